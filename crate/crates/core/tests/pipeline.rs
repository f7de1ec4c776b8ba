use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use gpgm::harness::{fit_gps, generate_data};
use gpgm::{
    build_context, fit_hyperparameters, posterior_estimate, run_chain, ExperimentConfig, JointDensity, KernelFamily,
    KernelSpec, McmcConfig,
};

fn density_for(cfg: &ExperimentConfig) -> JointDensity {
    let y = generate_data(cfg).unwrap();
    let gps = fit_gps(cfg, &y).unwrap();
    let ctx = build_context(gps, cfg.mcmc.gamma).unwrap();
    JointDensity::new(ctx, cfg.build_system().unwrap(), y, cfg.prior().unwrap(), cfg.schedule.clone()).unwrap()
}

#[test]
fn recovers_squared_exponential_hyperparameters() {
    let times: Vec<f64> = (0..50).map(|i| 4.0 * i as f64 / 49.0).collect();
    let k = KernelSpec::squared_exponential(1.0, 0.4).unwrap();
    let mut gram = k.gram(&times);
    for i in 0..50 {
        gram[(i, i)] += 1e-8;
    }
    let lower = gram.cholesky().unwrap().l();
    let fits: Vec<(f64, f64)> = (0..20u64)
        .into_par_iter()
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z: DVector<f64> = DVector::from_fn(50, |_, _| StandardNormal.sample(&mut rng));
            let f = &lower * z;
            let y: Vec<f64> = f
                .iter()
                .map(|v| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    v + 0.1 * e
                })
                .collect();
            let m = fit_hyperparameters(&times, &y, KernelFamily::SquaredExponential).unwrap();
            (m.spec().hyperparameters()[1], m.sigma())
        })
        .collect();
    for (seed, (l, sigma)) in fits.iter().enumerate() {
        assert!((0.2..=0.8).contains(l), "seed {seed}: length scale {l}");
        assert!((0.05..=0.15).contains(sigma), "seed {seed}: noise {sigma}");
    }
}

#[test]
fn lv_noise_estimate_brackets_the_truth() {
    for seed in 0..10 {
        let cfg = ExperimentConfig::preset("lv-x1obs").unwrap().with_seed(seed);
        let gp = &fit_gps(&cfg, &generate_data(&cfg).unwrap()).unwrap()[0];
        assert!((0.05..=0.2).contains(&gp.sigma()), "seed {seed}: sigma {}", gp.sigma());
    }
}

#[test]
fn cached_density_agrees_with_recomputation() {
    for preset in ["lv-x1obs", "pt-x1x3latent"] {
        let mut cfg = ExperimentConfig::preset(preset).unwrap().with_seed(4);
        cfg.mcmc.n_samples = 600;
        cfg.mcmc.n_burnin = 0;
        cfg.mcmc.coherence_check_every = Some(100);
        let chain = run_chain(&density_for(&cfg), &cfg.mcmc).unwrap();
        assert!(chain.cache_drift < 1e-9, "{preset}: drift {}", chain.cache_drift);
    }
}

#[test]
fn screening_prior_draws_never_starts_lower() {
    let cfg = ExperimentConfig::preset("lv-x2obs").unwrap().with_seed(2);
    let density = density_for(&cfg);
    let start = |draws: usize| {
        let mc = McmcConfig { n_samples: 1, n_burnin: 0, init_draws: draws, ..cfg.mcmc.clone() };
        run_chain(&density, &mc).unwrap().initial
    };
    let (one, many) = (start(1), start(256));
    assert_eq!(one.x_m, many.x_m);
    assert!(many.log_density >= one.log_density);
    assert!(many.log_density > one.log_density, "256 draws found nothing better than the first");
}

#[test]
fn fhn_posterior_mean_is_near_the_truth() {
    let hits: usize = (0..10u64)
        .into_par_iter()
        .map(|seed| {
            let cfg = ExperimentConfig::preset("fhn-x1obs").unwrap().with_seed(seed);
            assert_eq!(cfg.mcmc.n_samples, 3500);
            let chain = run_chain(&density_for(&cfg), &cfg.mcmc).unwrap();
            let theta1 = posterior_estimate(&chain.samples).unwrap().theta[0];
            usize::from((0.1..=0.4).contains(&theta1))
        })
        .sum();
    assert!(hits >= 8, "posterior mean of theta1 in [0.1, 0.4] for {hits}/10 seeds");
}
