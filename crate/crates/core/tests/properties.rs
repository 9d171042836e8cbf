//! Property tests over randomly drawn parameters and data.

use proptest::prelude::*;
use survmed::calibrate::{MedParams, OutParams};
use survmed::dataio::{self, MainRecord, Schema, Study, ValidationRecord};
use survmed::infer;
use survmed::mediate::{self, Contrast, MediationMeasures, RForm, Theta};

fn theta(a: [f64; 3], s2: f64, b: [f64; 4]) -> Theta {
    Theta {
        med: MedParams {
            alpha0: a[0],
            alpha1: a[1],
            alpha2: vec![a[2]],
            sigma_alpha2: s2,
        },
        out: OutParams::from_coefs(&b, true),
    }
}

fn theta_strategy() -> impl Strategy<Value = Theta> {
    (
        prop::array::uniform3(-1.0f64..1.0),
        0.05f64..2.0,
        prop::array::uniform4(-1.0f64..1.0),
    )
        .prop_map(|(a, s2, b)| theta(a, s2, b))
}

fn contrast_strategy() -> impl Strategy<Value = Contrast> {
    (-2.0f64..2.0, 0.1f64..2.0, -1.0f64..1.0).prop_map(|(a_star, d, w)| Contrast::new(a_star + d, a_star, vec![w]))
}

fn check_identities(m: &MediationMeasures) -> Result<(), TestCaseError> {
    prop_assert!((m.te - m.nie - m.nde).abs() < 1e-10);
    match m.mp {
        Some(mp) => prop_assert!((mp * m.te - m.nie).abs() < 1e-10),
        None => prop_assert!(m.te.abs() < mediate::TE_ZERO),
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn measure_identities_hold(th in theta_strategy(), c in contrast_strategy(), lambda in 0.0f64..2.0) {
        check_identities(&mediate::approx_measures(&th, &c))?;
        let exact = mediate::exact_measures_at_cumhaz(&th, lambda, &c, 40, RForm::Derived).unwrap();
        check_identities(&exact)?;
    }

    #[test]
    fn reliability_index_within_bound(r_aa in -1.0f64..=1.0, r_am in 0.01f64..0.99, sign in prop::bool::ANY) {
        let r_am = if sign { r_am } else { -r_am };
        let rho = mediate::reliability_index_nocov(r_aa, r_am).unwrap();
        prop_assert!(rho >= 0.0);
        prop_assert!(rho <= r_am * r_am + 1e-15);
    }

    #[test]
    fn unadjusted_mp_never_underestimates(gamma1 in -2.0f64..2.0, rho in 0.0f64..0.99, mp in 0.001f64..0.999) {
        let r = mediate::theorem1_relbias(gamma1, rho, mp).unwrap();
        prop_assert!(r.mp >= 0.0);
        prop_assert!((r.te - (gamma1 - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn resample_indices_in_range_and_deterministic(n1 in 1usize..200, n2 in 1usize..50, seed in any::<u64>(), r in 0u64..1000) {
        let (m, v) = infer::resample_indices(n1, n2, seed, r);
        prop_assert_eq!(m.len(), n1);
        prop_assert_eq!(v.len(), n2);
        prop_assert!(m.iter().all(|&i| i < n1) && v.iter().all(|&i| i < n2));
        prop_assert_eq!((m, v), infer::resample_indices(n1, n2, seed, r));
    }

    #[test]
    fn csv_round_trip_is_exact(
        main in prop::collection::vec((0.01f64..50.0, any::<bool>(), -3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0), 1..30),
        val in prop::collection::vec((0.01f64..50.0, -3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0), 4..20),
    ) {
        let main: Vec<MainRecord> = main
            .into_iter()
            .map(|(t, e, m, s, w)| MainRecord { t_obs: t, event: e, mediator: m, exposure_star: s, covariates: vec![w] })
            .collect();
        let val: Vec<ValidationRecord> = val
            .into_iter()
            .map(|(t, m, s, a, w)| ValidationRecord { t_obs: t, mediator: m, exposure_star: s, exposure_true: a, covariates: vec![w] })
            .collect();
        let study = Study::new(main, val, vec!["w".into()], Some(50.0)).unwrap();
        let schema = Schema { covariates: vec!["w".into()], ..Schema::default() };
        let dir = tempfile::tempdir().unwrap();
        let (mp, vp) = (dir.path().join("m.csv"), dir.path().join("v.csv"));
        dataio::write_study(&study, &mp, &vp, &schema).unwrap();
        let back = dataio::load_study(&mp, &vp, &schema, Some(50.0)).unwrap();
        prop_assert_eq!(back, study);
    }
}

/// Parameters and contrasts at the scale of the simulation design.
fn test_grid() -> Vec<(Theta, Contrast)> {
    let mut out = Vec::new();
    for b1 in [-0.5, 0.0, 0.5] {
        for b2 in [-0.5, 0.5] {
            for b3 in [-0.2, 0.0, 0.2] {
                for a1 in [-0.5, 0.5] {
                    for s2 in [0.25, 1.0] {
                        for (a, a_star) in [(1.0, 0.0), (0.5, -0.5), (0.0, -1.0)] {
                            out.push((
                                theta([0.0, a1, 0.1], s2, [b1, b2, b3, 0.1]),
                                Contrast::new(a, a_star, vec![0.0]),
                            ));
                        }
                    }
                }
            }
        }
    }
    out
}

#[test]
fn exact_tends_to_approx_at_small_hazard() {
    for (th, c) in test_grid() {
        let a = mediate::approx_measures(&th, &c);
        for lambda in [1e-6, 5e-5, 1e-4] {
            let e = mediate::exact_measures_at_cumhaz(&th, lambda, &c, 40, RForm::Derived).unwrap();
            assert!((a.nie - e.nie).abs() < 1e-3 && (a.nde - e.nde).abs() < 1e-3);
        }
    }
}

#[test]
fn quadrature_order_is_converged() {
    for (th, c) in test_grid() {
        for lambda in [0.01, 0.3, 1.0] {
            let e40 = mediate::exact_measures_at_cumhaz(&th, lambda, &c, 40, RForm::Derived).unwrap();
            let e80 = mediate::exact_measures_at_cumhaz(&th, lambda, &c, 80, RForm::Derived).unwrap();
            assert!((e40.nie - e80.nie).abs() < 1e-8, "{e40:?} {e80:?}");
            assert!((e40.nde - e80.nde).abs() < 1e-8, "{e40:?} {e80:?}");
        }
    }
}
