use invdes::micro::Microstructure;
use invdes::property::{absorption, absorption_from_features, interface_density, volume_fraction};
use proptest::prelude::*;

fn image(side: usize, bits: &[bool]) -> Microstructure {
    Microstructure::from_phases(side, &bits[..side * side]).unwrap()
}

/// Straight-line reimplementation over the raw pixel values.
fn oracle(m: &Microstructure) -> (f64, f64, f64) {
    let s = m.side();
    let px = m.pixels();
    let mut pos = 0usize;
    for &p in px {
        if p > 0.0 {
            pos += 1;
        }
    }
    let mut pairs = 0usize;
    let mut cut = 0usize;
    for r in 0..s {
        for c in 0..s - 1 {
            pairs += 1;
            cut += ((px[r * s + c] > 0.0) ^ (px[r * s + c + 1] > 0.0)) as usize;
        }
    }
    for r in 0..s - 1 {
        for c in 0..s {
            pairs += 1;
            cut += ((px[r * s + c] > 0.0) ^ (px[(r + 1) * s + c] > 0.0)) as usize;
        }
    }
    let vf = pos as f64 / (s * s) as f64;
    let id = cut as f64 / pairs as f64;
    (vf, id, 0.5 + 0.3 * (0.6 * (4.0 * vf * (1.0 - vf)) + 0.4 * id))
}

fn arb_image() -> impl Strategy<Value = Microstructure> {
    (2usize..20, prop::collection::vec(-1.0f32..=1.0, 400))
        .prop_map(|(s, v)| Microstructure::new(s, v[..s * s].to_vec()).unwrap())
}

proptest! {
    #[test]
    fn matches_oracle(m in arb_image()) {
        let (vf, id, y) = oracle(&m);
        prop_assert_eq!(volume_fraction(&m), vf);
        prop_assert_eq!(interface_density(&m), id);
        prop_assert!((absorption(&m) - y).abs() < 1e-12);
    }

    #[test]
    fn range_and_symmetry(m in arb_image()) {
        let y = absorption(&m);
        prop_assert!((0.5..=0.8).contains(&y));
        prop_assert_eq!(absorption(&m.rotated90()), y);
        prop_assert_eq!(absorption(&m.mirrored()), y);
        prop_assert_eq!(absorption(&m), y);
    }

    #[test]
    fn increasing_in_interface(vf in 0.0f64..=1.0, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        prop_assume!(a < b);
        prop_assert!(absorption_from_features(vf, a) < absorption_from_features(vf, b));
    }

    #[test]
    fn sign_only_matters(bits in prop::collection::vec(any::<bool>(), 64), scale in 0.01f32..1.0) {
        let m = image(8, &bits);
        let soft = Microstructure::new(8, m.pixels().iter().map(|p| p * scale).collect()).unwrap();
        prop_assert_eq!(absorption(&soft), absorption(&m));
    }
}

#[test]
fn two_by_two_by_hand() {
    // ■□ / □□ : one phase-B pixel, two of four pairs cut.
    let m = image(2, &[true, false, false, false]);
    assert_eq!(volume_fraction(&m), 0.25);
    assert_eq!(interface_density(&m), 0.5);
    assert!((absorption(&m) - (0.5 + 0.3 * (0.6 * 0.75 + 0.2))).abs() < 1e-15);
}
