use pcv_core::glyphs::{Charset, StrongKey};
use pcv_core::lattice::{thermalize, SimParams};
use pcv_core::vault::{
    decrypt_f2, decrypt_phase1, decrypt_phase2, decrypt_with_keys, derive_keys, restore_candidate, seal_container,
    VaultContainer,
};
use pcv_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

const GOLDEN: &[u8] = include_bytes!("data/golden_v1.pcv");

fn small_container(seed: u64) -> VaultContainer {
    let params = SimParams::default().with_n(16).with_burn_in_steps(200);
    let mut fs = thermalize(params, seed).unwrap();
    fs.integrate(params.tau_steps).unwrap();
    let charset = Charset::default_v1();
    let sk = StrongKey::new("WXYZ7", &charset).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    seal_container(b"small payload", "pw", &sk, &fs, charset.id, 10, &mut rng).unwrap()
}

#[test]
fn golden_fixture_still_opens() {
    let c = VaultContainer::from_bytes(GOLDEN).unwrap();
    assert_eq!(c.to_bytes(), GOLDEN);
    assert_eq!((c.n, c.tau_steps, c.sk_len, c.kdf_work), (16, 500, 5, 1000));
    assert_eq!(decrypt_with_keys(&c, "correct horse", "WXYZ7").unwrap(), b"golden payload\n");
    assert_eq!(decrypt_with_keys(&c, "correct horse", "WXYZ8"), Err(Error::AuthFailure));
    assert_eq!(decrypt_with_keys(&c, "correct horsf", "WXYZ7"), Err(Error::AuthFailure));
}

#[test]
fn two_phase_decrypt_on_the_fixture() {
    let c = VaultContainer::from_bytes(GOLDEN).unwrap();
    let session = decrypt_phase1(c, "correct horse").unwrap();
    assert_eq!(session.sk_len(), 5);
    assert_eq!(decrypt_phase2(session, "WXYZ7").unwrap(), b"golden payload\n");
}

#[test]
fn one_password_character_flips_half_the_key_bits() {
    let mut rng = ChaCha20Rng::seed_from_u64(99);
    let salt = [3u8; 16];
    let trials = 100;
    let mut total = 0u32;
    for _ in 0..trials {
        let sp: String = (0..10).map(|_| rng.sample(rand::distributions::Alphanumeric) as char).collect();
        let mut other = sp.clone().into_bytes();
        let k = rng.gen_range(0..other.len());
        other[k] = if other[k] == b'a' { b'b' } else { b'a' };
        let other = String::from_utf8(other).unwrap();
        let a = derive_keys(&sp, None, &salt, 1).unwrap();
        let b = derive_keys(&other, None, &salt, 1).unwrap();
        total += a.k2.iter().zip(&b.k2).map(|(x, y)| (x ^ y).count_ones()).sum::<u32>();
    }
    let mean = total as f64 / trials as f64;
    assert!((mean - 128.0).abs() < 20.0, "mean Hamming distance {mean}");
}

#[test]
fn wrong_password_gives_an_ordinary_looking_state() {
    let c = small_container(5);
    let right = restore_candidate(&c, "pw").unwrap();
    for sp in ["pw ", "Pw", "hunter2"] {
        let wrong = restore_candidate(&c, sp).unwrap();
        assert_ne!(wrong, right);
        let keys = derive_keys(sp, None, &c.salt, c.kdf_work).unwrap();
        let f2 = decrypt_f2(&c.ef2, &keys.k2, &c.nonce_f2);
        let ones: u32 = f2.iter().map(|b| b.count_ones()).sum();
        let frac = ones as f64 / (8 * f2.len()) as f64;
        assert!((frac - 0.5).abs() < 0.05, "{frac}");
    }
}

#[test]
fn tampering_anywhere_is_caught() {
    let c = small_container(6);
    let bytes = c.to_bytes();
    // Header fields covered by the tag: salt area and the data section.
    for pos in [60, bytes.len() - 2 * c.f1.len() - 1] {
        let mut damaged = bytes.clone();
        damaged[pos] ^= 0x01;
        match VaultContainer::from_bytes(&damaged) {
            Ok(d) => assert!(decrypt_with_keys(&d, "pw", "WXYZ7").is_err(), "flip at {pos}"),
            Err(e) => assert!(matches!(e, Error::MalformedContainer(_))),
        }
    }
    let mut extended = bytes.clone();
    extended.push(0);
    assert!(VaultContainer::from_bytes(&extended).is_err());
}
