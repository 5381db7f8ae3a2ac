use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctxreg::experiment::{self, ExperimentConfig};
use ctxreg::{Error, ErrorKind};

#[derive(Parser)]
#[command(name = "ctxreg", version, about = "Localized in-context regression experiments")]
struct Cli {
    /// Log progress (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Worker threads for prediction (default: available cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set retrieval.k_train=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seeds, comma separated.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Output directory.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Dataset CSV (label in the last column unless `data.label` says otherwise).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Balanced train/test split.
    Split(Common),
    /// Evaluate one strategy and predictor over all seeds.
    Run {
        #[command(flatten)]
        common: Common,
        /// vanilla, downsample, inverse, smoter or augmented.
        #[arg(long)]
        strategy: Option<String>,
        /// average, ridge, ols, icl or external.
        #[arg(long)]
        predictor: Option<String>,
    },
    /// Bias-variance bound curves per shot region.
    Bound {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        k_max: Option<usize>,
        /// Noise level; estimated from the training split when absent.
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Run every sampling strategy and rank them.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictor: Option<String>,
    },
    /// Train the in-context transformer on synthetic tasks.
    TrainIcl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Error against context size for a trained checkpoint.
    EvalIcl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Render a curve CSV as SVG.
    Plot {
        input: PathBuf,
        /// Defaults to the input path with an `.svg` extension.
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Column for the y axis.
        #[arg(short, long)]
        y: Option<String>,
    },
    /// Write the synthetic skewed benchmark as CSV.
    GenBench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
    },
}

fn quoted(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

impl Common {
    fn load(&self, extra: Vec<(String, String)>) -> Result<ExperimentConfig, Error> {
        let mut overrides = Vec::new();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        if !self.seeds.is_empty() {
            let s: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
            overrides.push(("run.seeds".into(), format!("[{}]", s.join(","))));
        }
        if let Some(out) = &self.out {
            overrides.push(("run.out_dir".into(), quoted(&out.to_string_lossy())));
        }
        if let Some(data) = &self.data {
            overrides.push(("data.path".into(), quoted(&data.to_string_lossy())));
        }
        overrides.extend(extra);
        ExperimentConfig::load(self.config.as_deref(), &overrides)
    }
}

fn opt<T: ToString>(key: &str, v: &Option<T>) -> Option<(String, String)> {
    v.as_ref().map(|v| (key.to_string(), v.to_string()))
}

fn opt_str(key: &str, v: &Option<String>) -> Option<(String, String)> {
    v.as_ref().map(|v| (key.to_string(), quoted(v)))
}

fn list_files(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::Split(common) => {
            let cfg = common.load(Vec::new())?;
            let out = experiment::cmd_split(&cfg)?;
            println!("seed {}: {} train, {} test", out.seed, out.train_len, out.test_len);
            list_files(&out.files);
        }
        Command::Run {
            common,
            strategy,
            predictor,
        } => {
            let extra = [
                opt_str("retrieval.strategy", &strategy),
                opt_str("predictor.name", &predictor),
            ];
            let cfg = common.load(extra.into_iter().flatten().collect())?;
            let out = experiment::cmd_run(&cfg)?;
            print!("{}", out.report.to_text());
            list_files(&out.files);
        }
        Command::Bound { common, k_max, sigma } => {
            let extra = [opt("analysis.k_max", &k_max), opt("analysis.sigma", &sigma)];
            let cfg = common.load(extra.into_iter().flatten().collect())?;
            let out = experiment::cmd_bound(&cfg)?;
            println!("seed {} sigma {}", out.seed, out.sigma);
            for c in &out.curves {
                println!(
                    "{:<6} query {:.4}: best k {} total {:.6}",
                    c.region.to_string(),
                    c.query_label,
                    c.curve.argmin(),
                    c.curve.min_total()
                );
            }
            for r in &out.skipped {
                println!("{r}: no test queries, skipped");
            }
            list_files(&out.files);
        }
        Command::Ablate { common, predictor } => {
            let extra = opt_str("predictor.name", &predictor).into_iter().collect();
            let cfg = common.load(extra)?;
            let out = experiment::cmd_ablate(&cfg)?;
            for r in out.ranking.iter().filter(|r| r.metric.name() == "mae") {
                println!("{:<6} mae rank {} {:<10} {:.4} ± {:.4}", r.region.to_string(), r.rank, r.strategy, r.mean, r.std);
            }
            list_files(&out.files);
        }
        Command::TrainIcl { common, steps } => {
            let cfg = common.load(opt("icl.steps", &steps).into_iter().collect())?;
            let out = experiment::cmd_train_icl(&cfg)?;
            if let Some(last) = out.losses.last() {
                println!("final loss {last:.6} after {} steps", out.losses.len());
            }
            list_files(&out.files);
        }
        Command::EvalIcl { common, checkpoint } => {
            let cfg = common.load(Vec::new())?;
            let out = experiment::cmd_eval_icl(&cfg, &checkpoint)?;
            println!("k,model_mse,average_mse,ridge_mse");
            for p in &out.points {
                println!("{},{},{},{}", p.k, p.model_mse, p.average_mse, p.ridge_mse);
            }
            list_files(&out.files);
        }
        Command::Plot { input, output, y } => {
            let output = output.unwrap_or_else(|| input.with_extension("svg"));
            let path = experiment::cmd_plot(&input, &output, y.as_deref())?;
            println!("wrote {}", path.display());
        }
        Command::GenBench { common, n } => {
            let cfg = common.load(opt("bench.n", &n).into_iter().collect())?;
            let path = experiment::cmd_gen_bench(&cfg)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Runtime => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Some(w) = cli.workers {
        std::env::set_var(ctxreg::par::WORKERS_ENV, w.to_string());
    }
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string();
            let parts: Vec<&str> = msg.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
            eprintln!("error: {}", parts.join(" "));
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
