use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use gpgm::harness::{
    fit_gps, generate_data, ground_truth, run_experiment, run_refine_only, run_sensitivity, ExperimentConfig,
};
use gpgm::{Error, ObservationSet, Result};

#[derive(Parser)]
#[command(name = "gpgm", version, about = "Gradient-matching parameter inference for ODE systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate noisy observations (data.csv) and the noise-free states (truth.csv).
    Simulate(Common),
    /// Fit one GP per observed state and print the fitted models.
    FitGp {
        #[command(flatten)]
        common: Common,
        /// Observation CSV to fit instead of simulated data.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Full pipeline: GP fit, sampling, least-squares refinement.
    Infer(Common),
    /// Least-squares refinement alone, from `refine_start` or the true parameters.
    RefineOnly {
        #[command(flatten)]
        common: Common,
        /// Comma-separated starting parameters.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        theta0: Option<Vec<f64>>,
    },
    /// Sensitivity indices at the true parameters.
    Sensitivity(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// INI config file; its flags below still override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; without it results go to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Retained sweeps.
    #[arg(long)]
    mcmc_samples: Option<usize>,
    #[arg(long)]
    burnin: Option<usize>,
    /// Model noise variance added to the derivative covariance.
    #[arg(long)]
    gamma: Option<f64>,
    /// Keep cached latent states when the first observed value moves.
    #[arg(long)]
    strict_paper_caching: bool,
    /// Use the classical sign convention for FitzHugh-Nagumo.
    #[arg(long, value_name = "BOOL", num_args = 0..=1, default_missing_value = "true")]
    fhn_standard_sign: Option<bool>,
    /// Run this many consecutive seeds concurrently, each in `<out>/seed-<s>`.
    #[arg(long, default_value_t = 1)]
    repeat: u64,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => {
                let text = fs::read_to_string(path)?;
                let mut cfg = ExperimentConfig::from_ini(&text)?;
                if let Some(p) = &self.preset {
                    if *p != cfg.name {
                        return Err(Error::Config(format!("--preset {p} conflicts with config '{}'", cfg.name)));
                    }
                }
                cfg.mcmc.seed = cfg.seed;
                cfg
            }
            (None, Some(p)) => ExperimentConfig::preset(p)?,
            (None, None) => return Err(Error::Config("one of --config or --preset is required".into())),
        };
        if let Some(s) = self.seed {
            cfg = cfg.with_seed(s);
        }
        if let Some(n) = self.mcmc_samples {
            cfg.mcmc.n_samples = n;
        }
        if let Some(n) = self.burnin {
            cfg.mcmc.n_burnin = n;
        }
        if let Some(g) = self.gamma {
            cfg.mcmc.gamma = g;
        }
        if self.strict_paper_caching {
            cfg.mcmc.strict_paper_caching = true;
        }
        if let Some(b) = self.fhn_standard_sign {
            cfg.fhn_standard_sign = b;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// (config, output dir) for every requested seed.
    fn runs(&self) -> Result<Vec<(ExperimentConfig, Option<PathBuf>)>> {
        let base = self.load()?;
        if self.repeat <= 1 {
            return Ok(vec![(base, self.out.clone())]);
        }
        Ok((0..self.repeat)
            .map(|i| {
                let cfg = base.clone().with_seed(base.seed + i);
                let dir = self.out.as_ref().map(|o| o.join(format!("seed-{}", cfg.seed)));
                (cfg, dir)
            })
            .collect())
    }
}

fn write_file(dir: Option<&Path>, name: &str, text: &str) -> Result<()> {
    match dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            fs::write(d.join(name), text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn truth_csv(cfg: &ExperimentConfig) -> Result<String> {
    let (times, states) = ground_truth(cfg)?;
    let dim = states.first().map_or(0, |r| r.len());
    let mut out = String::from("time");
    for i in 0..dim {
        out.push_str(&format!(",x{}", i + 1));
    }
    out.push('\n');
    for (t, row) in times.iter().zip(&states) {
        out.push_str(&t.to_string());
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    Ok(out)
}

fn simulate(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<()> {
    let y = generate_data(cfg).map_err(|e| e.in_stage("simulate"))?;
    match out {
        Some(d) => {
            write_file(Some(d), "data.csv", &y.to_csv())?;
            write_file(Some(d), "truth.csv", &truth_csv(cfg)?)?;
            write_file(Some(d), "config.ini", &cfg.to_ini())
        }
        None => write_file(None, "data.csv", &y.to_csv()),
    }
}

fn fit_gp(cfg: &ExperimentConfig, data: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let y = match data {
        Some(p) => ObservationSet::from_csv(&fs::read_to_string(p)?)?,
        None => generate_data(cfg).map_err(|e| e.in_stage("simulate"))?,
    };
    let models = fit_gps(cfg, &y).map_err(|e| e.in_stage("fit-gp"))?;
    let mut text = String::new();
    for (model, idx) in models.iter().zip(&y.observed_idx) {
        text.push_str(&format!("[x{}]\n{}", idx + 1, model.describe()));
    }
    write_file(out, "gp.txt", &text)
}

type Runner = Box<dyn Fn(&ExperimentConfig, Option<&Path>) -> Result<()> + Sync>;

fn dispatch(command: &Command) -> Result<()> {
    let (common, run): (&Common, Runner) = match command {
        Command::Simulate(c) => (c, Box::new(simulate)),
        Command::FitGp { common, data } => {
            let data = data.clone();
            (common, Box::new(move |cfg, out| fit_gp(cfg, data.as_deref(), out)))
        }
        Command::Infer(c) => (
            c,
            Box::new(|cfg, out| {
                let report = run_experiment(cfg, out)?;
                if out.is_none() {
                    print!("{}", report.to_text());
                }
                Ok(())
            }),
        ),
        Command::RefineOnly { common, theta0 } => {
            let theta0 = theta0.clone();
            (
                common,
                Box::new(move |cfg, out| {
                    let mut cfg = cfg.clone();
                    if let Some(t) = &theta0 {
                        cfg.refine_start = Some(t.clone());
                    }
                    let r = run_refine_only(&cfg, out)?;
                    if out.is_none() {
                        println!("theta_refined = {:?}", r.refinement.theta);
                        println!("objective_refined = {}", r.refinement.objective);
                        println!("objective_true = {}", r.objective_true);
                        println!("lsq_stop = {:?}", r.refinement.stop);
                        println!("lsq_iterations = {}", r.refinement.trace.len().saturating_sub(1));
                    }
                    Ok(())
                }),
            )
        }
        Command::Sensitivity(c) => (
            c,
            Box::new(|cfg, out| {
                let m = run_sensitivity(cfg).map_err(|e| e.in_stage("sensitivity"))?;
                write_file(out, "sensitivity.csv", &m.to_csv())
            }),
        ),
    };
    let runs = common.runs()?;
    runs.par_iter().map(|(cfg, dir)| run(cfg, dir.as_deref())).collect::<Result<Vec<()>>>()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
