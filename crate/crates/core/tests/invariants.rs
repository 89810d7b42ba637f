use nalgebra::{Matrix3, Vector3, Vector6};
use proptest::prelude::*;
use xfft_core::element::{cut_tet, tet_volume};
use xfft_core::properties as checks;
use xfft_core::voigt::{iso_stiffness, mandel_from_tensor, tensor_from_mandel, MaterialIso};

fn point() -> impl Strategy<Value = Vector3<f64>> {
    prop::array::uniform3(-1.0f64..1.0).prop_map(Vector3::from)
}

fn tet() -> impl Strategy<Value = [Vector3<f64>; 4]> {
    prop::array::uniform4(point()).prop_filter("degenerate", |x| tet_volume(x).abs() > 1e-3)
}

fn nonzero() -> impl Strategy<Value = f64> {
    prop_oneof![-2.0f64..-1e-3, 1e-3f64..2.0]
}

proptest! {
    #[test]
    fn cut_weights_sum_to_volume(x in tet()) {
        prop_assert!(checks::quadrature_volume_error(&[x]) < 1e-12);
        prop_assert!(checks::subtet_volume_error(&[x]) < 1e-12);
    }

    #[test]
    fn quadratics_integrate_exactly_on_each_side(x in tet()) {
        prop_assert!(checks::quadratic_exactness_error(&[x]) < 1e-12);
    }

    #[test]
    fn subtets_lie_on_one_side(x in tet(), l in prop::array::uniform4(nonzero())) {
        let subs = cut_tet(&x, &l);
        prop_assert!(!subs.is_empty() && subs.len() <= 6);
        let total: f64 = subs.iter().map(|s| s.volume()).sum();
        prop_assert!((total - tet_volume(&x).abs()).abs() < 1e-12 * (1.0 + total));
    }

    #[test]
    fn mandel_round_trip_preserves_inner_product(a in prop::array::uniform6(-3.0f64..3.0), b in prop::array::uniform6(-3.0f64..3.0)) {
        let (a, b) = (Vector6::from(a), Vector6::from(b));
        let (ta, tb): (Matrix3<f64>, Matrix3<f64>) = (tensor_from_mandel(&a), tensor_from_mandel(&b));
        prop_assert!((mandel_from_tensor(&ta) - a).norm() < 1e-14);
        prop_assert!((ta.component_mul(&tb).sum() - a.dot(&b)).abs() < 1e-12);
    }

    #[test]
    fn isotropic_stiffness_has_bulk_and_shear_eigenvalues(e in 0.1f64..100.0, nu in -0.9f64..0.49) {
        let m = MaterialIso::new(e, nu).unwrap();
        let c = iso_stiffness(&m).unwrap();
        let mut ev: Vec<f64> = c.eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        let mut expect = vec![3.0 * m.bulk(), 2.0 * m.shear(), 2.0 * m.shear(), 2.0 * m.shear(), 2.0 * m.shear(), 2.0 * m.shear()];
        expect.sort_by(f64::total_cmp);
        for (p, q) in ev.iter().zip(&expect) {
            prop_assert!((p - q).abs() < 1e-10 * q.abs().max(1.0));
        }
    }
}

#[test]
fn enrichment_vanishes_away_from_the_cut() {
    let pts: Vec<[f64; 4]> = (0..5).map(|i| {
        let a = 0.1 * i as f64;
        [a, 0.5 - a / 2.0, 0.25, 0.25 - a / 2.0]
    }).collect();
    assert_eq!(checks::enrichment_leak(&pts), 0.0);
}
