//! Regenerates `data/conformance_v1.txt` on the reference platform.

use pcv_core::lattice::{ConformanceVectors, SimParams};

fn main() {
    let vectors = ConformanceVectors::compute(SimParams::default(), 0x5eed_c0de_0000_0001, 1000)
        .expect("conformance trajectory");
    print!("{}", vectors.to_text());
}
