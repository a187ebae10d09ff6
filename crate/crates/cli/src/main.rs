use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use imcv::experiments::{
    format_summary, parse_config_text, run_bounds, run_experiment, write_bounds, write_report, ConfigError,
    ExperimentConfig, ExperimentError, ExperimentKind,
};

#[derive(Parser, Debug)]
#[command(name = "imcv", version, about = "Independent Metropolis control-variate experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Master seed; replica t uses stream t.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    replicas: Option<usize>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory [default: out/<experiment>]
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// `key = value` file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra `key=value` settings, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// N(0,1) target, N(0,σ²) proposals.
    OnedGauss {
        /// Comma-separated proposal variances.
        #[arg(long)]
        sigma2: Option<String>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// N(0,1) target, Student-t proposals.
    OnedT {
        /// Comma-separated degrees of freedom.
        #[arg(long)]
        nu: Option<String>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Adaptive IM on N(0, I_d).
    GaussD {
        #[arg(long)]
        d: Option<usize>,
        /// `after` or `during`.
        #[arg(long)]
        protocol: Option<String>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Marginal likelihoods of all submodels of a synthetic regression.
    Modelselect {
        #[arg(long)]
        n: Option<usize>,
    },
    /// Bayesian logistic regression.
    Logreg {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        protocol: Option<String>,
    },
    /// GP regression hyperparameters.
    Gp {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Row subsample size, or `none`.
        #[arg(long)]
        subsample: Option<String>,
    },
    /// Variance bounds for the one-dimensional proposals.
    Bounds {
        #[arg(long)]
        sigma2: Option<String>,
        #[arg(long)]
        nu: Option<String>,
        /// Monte Carlo draws for the Student-t bounds.
        #[arg(long)]
        bound_mc: Option<usize>,
    },
}

impl Command {
    fn kind(&self) -> ExperimentKind {
        match self {
            Command::OnedGauss { .. } | Command::Bounds { .. } => ExperimentKind::OnedGauss,
            Command::OnedT { .. } => ExperimentKind::OnedT,
            Command::GaussD { .. } => ExperimentKind::GaussD,
            Command::Modelselect { .. } => ExperimentKind::Modelselect,
            Command::Logreg { .. } => ExperimentKind::Logreg,
            Command::Gp { .. } => ExperimentKind::Gp,
        }
    }

    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        let mut put = |k: &'static str, x: Option<String>| {
            if let Some(x) = x {
                v.push((k, x));
            }
        };
        let s = |x: &Option<usize>| x.map(|n| n.to_string());
        let p = |x: &Option<PathBuf>| x.as_ref().map(|p| p.display().to_string());
        match self {
            Command::OnedGauss { sigma2, n } => {
                put("sigma2", sigma2.clone());
                put("n", s(n));
            }
            Command::OnedT { nu, n } => {
                put("nu", nu.clone());
                put("n", s(n));
            }
            Command::GaussD { d, protocol, n } => {
                put("d", s(d));
                put("protocol", protocol.clone());
                put("n", s(n));
            }
            Command::Modelselect { n } => put("n", s(n)),
            Command::Logreg { dataset, protocol } => {
                put("dataset", p(dataset));
                put("protocol", protocol.clone());
            }
            Command::Gp { dataset, subsample } => {
                put("dataset", p(dataset));
                put("subsample", subsample.clone());
            }
            Command::Bounds { sigma2, nu, bound_mc } => {
                put("sigma2", sigma2.clone());
                put("nu", nu.clone());
                put("bound_mc", s(bound_mc));
            }
        }
        v
    }
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig, ExperimentError> {
    let kind = cli.command.kind();
    let mut cfg = ExperimentConfig::defaults(kind);
    if let Some(path) = &cli.global.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        for (k, v) in parse_config_text(&text)? {
            if k == "experiment" {
                if v != kind.name() && !matches!(cli.command, Command::Bounds { .. }) {
                    return Err(ConfigError(format!("config file is for '{v}', command is '{kind}'")).into());
                }
                continue;
            }
            cfg.apply(&k, &v)?;
        }
    }
    for (k, v) in cli.command.overrides() {
        cfg.apply(k, &v)?;
    }
    if let Some(seed) = cli.global.seed {
        cfg.seed = seed;
    }
    if let Some(r) = cli.global.replicas {
        cfg.replicas = r;
    }
    for kv in &cli.global.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.apply(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), ExperimentError> {
    let cfg = build_config(cli)?;
    if let Command::Bounds { .. } = cli.command {
        let out = cli.global.out.clone().unwrap_or_else(|| Path::new("out").join("bounds"));
        let rows = run_bounds(&cfg)?;
        for r in &rows {
            println!("{:<10} {:>8} bound {:.6e} se {:.2e} log10 VRF lower {:.4}", r.proposal, r.parameter, r.bound, r.se, r.log10_vrf_lower);
        }
        let p = write_bounds(&rows, &out)?;
        eprintln!("wrote {}", p.display());
        return Ok(());
    }
    let out = cli.global.out.clone().unwrap_or_else(|| Path::new("out").join(cfg.kind.name()));
    let report = run_experiment(&cfg)?;
    print!("{}", format_summary(&report));
    for p in write_report(&report, &out)? {
        eprintln!("wrote {}", p.display());
    }
    let cfg_json = serde_json::to_string_pretty(&cfg).map_err(|e| ExperimentError::Io(e.into()))?;
    std::fs::write(out.join("config.json"), cfg_json)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let threads = cli.global.threads.unwrap_or(0);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(4);
        }
    };
    match pool.install(|| run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
