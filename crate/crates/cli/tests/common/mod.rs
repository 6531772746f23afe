#![allow(dead_code)]

use pcv_core::attack::TemplateOracle;
use pcv_core::glyphs::{Charset, GrayImage, StrongKey};
use pcv_core::lattice::{SignField, SimParams};
use pcv_core::vault::{encrypt_with_key, restore_candidate, EncryptConfig, VaultContainer};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// A short protection time keeps the flows fast; the format and the code
/// paths are the same as with the defaults. Burn-in stays at the default
/// because short burn-ins rarely produce a legible background.
pub fn quick_config() -> EncryptConfig {
    EncryptConfig {
        params: SimParams::default().with_tau_steps(3_000),
        kdf_work: 1_000,
        attempts: 64,
        ..EncryptConfig::default()
    }
}

pub const SP: &str = "tidal-mosaic-47";
pub const SK: &str = "K7XM2";

pub fn sealed(payload: &[u8], seed: u64) -> VaultContainer {
    let config = quick_config();
    let sk = StrongKey::new(SK, &config.charset).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    encrypt_with_key(payload, SP, &sk, &config, &mut rng).unwrap().0
}

/// Stands in for the human reader.
pub fn read_key(field: &SignField, sk_len: usize) -> String {
    let oracle = TemplateOracle::new(Charset::default_v1(), field.n, sk_len).unwrap();
    oracle.decode_field(field).text
}

pub fn read_key_from_pgm(pgm: &[u8], n: usize, sk_len: usize) -> String {
    let field = GrayImage::from_pgm(pgm).unwrap().to_sign_field(n).unwrap();
    read_key(&field, sk_len)
}

pub fn key_of(container: &VaultContainer, sp: &str) -> String {
    let field = restore_candidate(container, sp).unwrap();
    read_key(&field, container.sk_len as usize)
}
