use pcv_core::attack::TemplateOracle;
use pcv_core::glyphs::{generate_sk, imprint, layout_masks, Charset, Deformation};
use pcv_core::lattice::{thermalize, SimParams};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Fresh thermalized background, '+' strokes, no selection. At T = 0.9 the
/// background is ordered about as often '+' as '-', and a '+' background
/// swallows '+' strokes, so this sits near 40% rather than 95%. Encryption
/// copes by re-thermalizing until the self-check passes.
#[test]
#[ignore = "unselected legibility is well below 95%; run with --ignored to measure"]
fn unselected_isks_are_legible() {
    let params = SimParams::default();
    let charset = Charset::default_v1();
    let oracle = TemplateOracle::new(charset.clone(), params.n, 5).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(2025);
    let mut legible = 0;
    for _ in 0..100 {
        let sk = generate_sk(&charset, 5, &mut rng).unwrap();
        let mask = layout_masks(&sk, params.n, Deformation::Seeded(rng.next_u64())).unwrap();
        let state = thermalize(params, rng.next_u64()).unwrap();
        let isk = imprint(&state, &mask).unwrap();
        if oracle.decode_field(&isk.sign_field()).text == sk.as_str() {
            legible += 1;
        }
    }
    println!("legible {legible}/100");
    assert!(legible >= 95, "legible {legible}/100");
}
