use pcv_core::analysis::{ks_two_sample, recovery_fidelity};
use pcv_core::attack::attack_time_estimate;
use pcv_core::glyphs::{imprint_conserving, layout_text, Deformation, GrayImage};
use pcv_core::lattice::{initial_state, LatticeState, SignField, SimParams};
use pcv_core::vault::{half_len, merge_state, split_state, VaultContainer};
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    -1e3f64..1e3
}

fn state(n: usize) -> impl Strategy<Value = LatticeState> {
    let sites = n * n;
    (
        prop::collection::vec(finite(), sites),
        prop::collection::vec(finite(), sites),
    )
        .prop_map(move |(u, p)| LatticeState::from_planes(SimParams::default().with_n(n), u, p).unwrap())
}

fn field(n: usize) -> impl Strategy<Value = SignField> {
    prop::collection::vec(any::<bool>(), n * n).prop_map(move |bits| SignField::from_bits(n, bits).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_merge_is_lossless(s in state(8)) {
        let split = split_state(&s);
        prop_assert_eq!(split.f1.len(), half_len(8));
        prop_assert_eq!(split.f2.len(), half_len(8));
        let back = merge_state(&split, s.params).unwrap();
        prop_assert_eq!(back.u, s.u);
        prop_assert_eq!(back.p, s.p);
    }

    #[test]
    fn container_bytes_round_trip(
        tau in 1u32..100_000,
        kdf_work in 1u32..1_000_000,
        sk_len in 4u8..9,
        salt in any::<[u8; 16]>(),
        ed in prop::collection::vec(any::<u8>(), 16..200),
        halves in prop::collection::vec(any::<u8>(), 2 * half_len(8)),
    ) {
        let c = VaultContainer {
            version: 1,
            n: 8,
            tau_steps: tau,
            h_bits: 0.01f64.to_bits(),
            temperature_bits: 0.9f64.to_bits(),
            charset_id: 1,
            sk_len,
            kdf_work,
            salt,
            nonce_f2: [7; 16],
            nonce_d: [9; 16],
            ed,
            f1: halves[..half_len(8)].to_vec(),
            ef2: halves[half_len(8)..].to_vec(),
        };
        let bytes = c.to_bytes();
        prop_assert_eq!(VaultContainer::from_bytes(&bytes).unwrap(), c);
        // Any truncation is rejected, never misparsed.
        let cut = bytes.len() / 2;
        prop_assert!(VaultContainer::from_bytes(&bytes[..cut]).is_err());
    }

    #[test]
    fn container_parser_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..400)) {
        let _ = VaultContainer::from_bytes(&bytes);
        let mut framed = b"PCV1".to_vec();
        framed.extend_from_slice(&bytes);
        let _ = VaultContainer::from_bytes(&framed);
    }

    #[test]
    fn fidelity_is_a_symmetric_fraction(a in field(9), b in field(9)) {
        let ab = recovery_fidelity(&a, &b, None).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, recovery_fidelity(&b, &a, None).unwrap());
        prop_assert_eq!(recovery_fidelity(&a, &a, None).unwrap(), 1.0);
        let flipped = recovery_fidelity(&a, &a.complement(), None).unwrap();
        prop_assert_eq!(flipped, 0.0);
    }

    #[test]
    fn graymap_round_trips_any_field(f in field(7), scale in 1usize..5) {
        let pgm = GrayImage::from_sign_field(&f, scale).to_pgm();
        let back = GrayImage::from_pgm(&pgm).unwrap().to_sign_field(7).unwrap();
        prop_assert_eq!(back, f);
    }

    #[test]
    fn attack_cost_grows_with_length_and_alphabet(len in 1u32..10, alphabet in 2u32..100, rate in 1.0f64..1e6) {
        let base = attack_time_estimate(len, alphabet, rate).unwrap();
        let longer = attack_time_estimate(len + 1, alphabet, rate).unwrap();
        let wider = attack_time_estimate(len, alphabet + 1, rate).unwrap();
        prop_assert!(longer.seconds > base.seconds);
        prop_assert!(wider.seconds > base.seconds);
        prop_assert_eq!(&longer.candidates, &(&base.candidates * alphabet));
    }

    #[test]
    fn ks_statistics_are_bounded(
        a in prop::collection::vec(-10.0f64..10.0, 1..60),
        b in prop::collection::vec(-10.0f64..10.0, 1..60),
    ) {
        let (d, p) = ks_two_sample(&a, &b);
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!((0.0..=1.0).contains(&p));
        let (d_self, p_self) = ks_two_sample(&a, &a);
        prop_assert_eq!(d_self, 0.0);
        prop_assert_eq!(p_self, 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn imprint_keeps_energy_and_is_idempotent(seed in any::<u64>()) {
        let start = initial_state(SimParams::default(), seed).unwrap();
        let mask = layout_text("K7XM2", 69, Deformation::None).unwrap();
        let (once, report) = imprint_conserving(&start, &mask).unwrap();
        let e0 = start.total_energy();
        prop_assert!(((once.total_energy() - e0) / e0).abs() < 1e-9);
        prop_assert!((report.energy_before - e0).abs() < 1e-9 * e0.abs());
        let (twice, _) = imprint_conserving(&once, &mask).unwrap();
        prop_assert_eq!(twice.sign_field(), once.sign_field());
    }
}
