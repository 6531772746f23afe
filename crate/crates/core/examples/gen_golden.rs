//! Regenerates `tests/data/golden_v1.pcv`, the container regression fixture.
//! Secrets: sp "correct horse", sk "WXYZ7", payload "golden payload\n".

use pcv_core::glyphs::{Charset, StrongKey};
use pcv_core::lattice::{thermalize, SimParams};
use pcv_core::vault::seal_container;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let params = SimParams::default()
        .with_n(16)
        .with_burn_in_steps(200)
        .with_tau_steps(500);
    let fs = {
        let mut s = thermalize(params, 2024)?;
        s.integrate(params.tau_steps)?;
        s
    };
    let charset = Charset::default_v1();
    let sk = StrongKey::new("WXYZ7", &charset)?;
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let container = seal_container(b"golden payload\n", "correct horse", &sk, &fs, charset.id, 1000, &mut rng)?;
    let path = std::env::args().nth(1).unwrap_or_else(|| "golden_v1.pcv".into());
    std::fs::write(&path, container.to_bytes())?;
    eprintln!("wrote {path}");
    Ok(())
}
