use nalgebra::SymmetricEigen;
use proptest::prelude::*;

use gpgm::harness::{relative_errors, PRESETS};
use gpgm::lsq_refine::quadrature_weights;
use gpgm::ode_core::{lotka_volterra, protein_transduction};
use gpgm::{
    integrate_with, sensitivity_indices, ExperimentConfig, KernelFamily, KernelSpec, ObservationSet, ParameterPrior,
    StepSchedule,
};

fn family() -> impl Strategy<Value = KernelFamily> {
    prop_oneof![Just(KernelFamily::SquaredExponential), Just(KernelFamily::Matern52), Just(KernelFamily::Sigmoid)]
}

fn sorted_times(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..1.0, n).prop_map(|gaps| {
        gaps.iter()
            .scan(0.0, |t, g| {
                *t += g;
                Some(*t)
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kernels_are_symmetric(fam in family(), h0 in 0.2f64..3.0, h1 in 0.2f64..3.0, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let k = KernelSpec::new(fam, vec![h0, h1]).unwrap();
        let tol = 1e-12 * (1.0 + k.eval(a, a).abs());
        prop_assert!((k.eval(a, b) - k.eval(b, a)).abs() <= tol);
        prop_assert!((k.eval_da(a, b) - k.eval_db(b, a)).abs() <= 1e-10 * (1.0 + k.eval_da(a, b).abs()));
        prop_assert!((k.eval_dadb(a, b) - k.eval_dadb(b, a)).abs() <= 1e-10 * (1.0 + k.eval_dadb(a, b).abs()));
    }

    #[test]
    fn gram_matrices_are_positive_semidefinite(fam in family(), h0 in 0.2f64..3.0, h1 in 0.2f64..3.0, times in sorted_times(2..15)) {
        let k = KernelSpec::new(fam, vec![h0, h1]).unwrap();
        let g = k.gram(&times);
        prop_assert!((&g - g.transpose()).amax() == 0.0);
        let min = SymmetricEigen::new(g.clone()).eigenvalues.min();
        prop_assert!(min >= -1e-9 * g.trace(), "smallest eigenvalue {min}");
    }

    #[test]
    fn prior_density_is_flat_on_the_box(upper in prop::collection::vec(0.1f64..20.0, 1..6), u in prop::collection::vec(-0.2f64..1.2, 6)) {
        let prior = ParameterPrior::new(vec![0.0; upper.len()], upper.clone()).unwrap();
        let theta: Vec<f64> = upper.iter().zip(&u).map(|(w, f)| w * f).collect();
        let inside = u.iter().take(upper.len()).all(|f| (0.0..=1.0).contains(f));
        let lp = prior.log_density(&theta);
        if inside {
            let want = -upper.iter().map(|w| w.ln()).sum::<f64>();
            prop_assert!((lp - want).abs() < 1e-12);
        } else {
            prop_assert_eq!(lp, f64::NEG_INFINITY);
        }
    }

    #[test]
    fn observations_round_trip_through_csv(
        times in sorted_times(1..12),
        seed_vals in prop::collection::vec(-1e6f64..1e6, 36),
        n_obs in 1usize..4,
    ) {
        let n = times.len();
        let values: Vec<Vec<f64>> = (0..n_obs).map(|k| seed_vals[k * 12..k * 12 + n].to_vec()).collect();
        let idx: Vec<usize> = (0..n_obs).map(|k| 2 * k).collect();
        let y = ObservationSet::new(times, idx, values).unwrap();
        let text = y.to_csv();
        prop_assert!(text.starts_with("time,"));
        prop_assert_eq!(ObservationSet::from_csv(&text).unwrap(), y);
    }

    #[test]
    fn schedule_grids_cover_the_span(fine in 0.001f64..0.2, until in 0.1f64..5.0, coarse in 0.001f64..0.5, t0 in -1.0f64..1.0, len in 0.01f64..10.0) {
        let s = StepSchedule::refined(fine, until, coarse);
        let t1 = t0 + len;
        let grid = s.grid(t0, t1);
        prop_assert_eq!(grid[0], t0);
        prop_assert_eq!(*grid.last().unwrap(), t1);
        for w in grid.windows(2) {
            let h = w[1] - w[0];
            let nominal = if w[1] <= until + 1e-12 { fine } else { coarse };
            prop_assert!(h > 0.0 && h <= nominal * (1.0 + 1e-9) + 1e-12, "step {h} > {nominal}");
        }
        let parsed: StepSchedule = s.to_string().parse().unwrap();
        prop_assert_eq!(parsed, s);
    }

    #[test]
    fn trapezoid_weights_integrate_constants(times in sorted_times(3..20)) {
        let w = quadrature_weights(&times);
        let span = times[times.len() - 1] - times[0];
        let total: f64 = w.iter().sum();
        let dt = times[1] - times[0];
        let uniform = times.windows(2).all(|p| ((p[1] - p[0]) - dt).abs() <= 1e-9 * dt);
        let want = if uniform { times.len() as f64 * dt } else { span };
        prop_assert!((total - want).abs() < 1e-9 * (1.0 + want));
        prop_assert!(w.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn presets_round_trip_through_ini(i in 0usize..8, seed in any::<u64>(), samples in 1usize..10_000, gamma in 1e-5f64..10.0, strict in any::<bool>()) {
        let mut cfg = ExperimentConfig::preset(PRESETS[i]).unwrap().with_seed(seed);
        cfg.mcmc.n_samples = samples;
        cfg.mcmc.gamma = gamma;
        cfg.mcmc.strict_paper_caching = strict;
        let back = ExperimentConfig::from_ini(&cfg.to_ini()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn relative_errors_vanish_only_at_the_truth(t in prop::collection::vec(0.1f64..10.0, 1..6), d in -1.0f64..1.0) {
        prop_assert!(relative_errors(&t, &t).iter().all(|e| *e == 0.0));
        let moved: Vec<f64> = t.iter().map(|v| v * (1.0 + d)).collect();
        for e in relative_errors(&moved, &t) {
            prop_assert!((e - d.abs()).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn protein_cascade_conserves_receptor(theta in prop::collection::vec(0.01f64..1.0, 6), r0 in 0.1f64..2.0, s0 in 0.1f64..2.0) {
        let traj = integrate_with(
            &protein_transduction(),
            &theta,
            &[s0, 0.0, r0, 0.0, 0.0],
            (0.0, 50.0),
            &StepSchedule::refined(0.01, 1.0, 0.05),
        )
        .unwrap();
        for k in 0..traj.len() {
            let total: f64 = traj.state(k)[2..].iter().sum();
            prop_assert!((total - r0).abs() < 1e-9);
        }
    }

    #[test]
    fn sensitivities_are_finite_and_nonnegative(scale in prop::collection::vec(0.8f64..1.2, 4)) {
        let theta: Vec<f64> = [2.0, 1.0, 4.0, 1.0].iter().zip(&scale).map(|(t, s)| t * s).collect();
        let m = sensitivity_indices(&lotka_volterra(), &theta, &[5.0, 3.0], (0.0, 2.0), &StepSchedule::uniform(0.01), 1e-4)
            .unwrap();
        prop_assert!(m.values.iter().flatten().all(|v| v.is_finite() && *v >= 0.0));
    }
}
