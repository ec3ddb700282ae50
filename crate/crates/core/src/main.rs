use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use spa::attribution::Method;
use spa::metrics::{compare_reports, DiversityReport};
use spa::pipeline::{load_config, run_sweep, Pipeline, PipelineConfig, Variant, WorkdirLock};
use spa::Error;

#[derive(Parser)]
#[command(
    name = "spa",
    version,
    about = "Partition a corpus by data attribution and train one adaptation per subset"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML pipeline config; defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the work directory.
    #[arg(long)]
    workdir: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct MethodArg {
    /// influence-exact, influence-cg, influence-lissa, bm25, random or single.
    #[arg(long)]
    method: Option<String>,
}

#[derive(Args, Clone)]
struct TauArg {
    /// Comma-separated temperatures; the configured one when absent.
    #[arg(long, value_delimiter = ',')]
    tau_sweep: Vec<f64>,
}

#[derive(Args)]
struct MethodStage {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    method: MethodArg,
}

#[derive(Args)]
struct SampleStage {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    method: MethodArg,
    #[command(flatten)]
    tau: TauArg,
}

#[derive(Subcommand)]
enum Command {
    /// Write the corpus, candidate queries, evaluation prompts and base model.
    Synth(Common),
    /// Fine-tune and build the attribution matrix.
    Attribute(MethodStage),
    /// Keep the highest-variance candidate queries.
    SelectQueries(MethodStage),
    /// Assign examples to subsets (`--method random` or `single` for the baselines).
    Partition(MethodStage),
    /// Train one adaptation per subset.
    Adapt(MethodStage),
    /// Decode every evaluation prompt with each adaptation.
    Sample(SampleStage),
    /// Score the generations and write a report.
    Evaluate(SampleStage),
    /// Every variant end to end.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        tau: TauArg,
        /// Comma-separated K values, each run in `<workdir>/k<K>`.
        #[arg(long, value_delimiter = ',')]
        k_sweep: Vec<usize>,
    },
    /// Side-by-side table of two or more reports.
    Compare { reports: Vec<PathBuf> },
}

enum Failure {
    Config(Error),
    Stage(Error),
}

fn config(common: &Common) -> Result<PipelineConfig, Failure> {
    let mut cfg = load_config(common.config.as_deref()).map_err(Failure::Config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(w) = &common.workdir {
        cfg.workdir = w.clone();
    }
    cfg.validate().map_err(Failure::Config)?;
    Ok(cfg)
}

fn variant(cfg: &PipelineConfig, m: &MethodArg) -> Result<Variant, Failure> {
    match &m.method {
        Some(s) => Variant::parse(s).map_err(Failure::Config),
        None => Ok(Variant::Attribution(cfg.attribution.method)),
    }
}

fn attribution_method(v: Variant) -> Result<Method, Failure> {
    match v {
        Variant::Attribution(m) => Ok(m),
        other => Err(Failure::Config(Error::Config(format!(
            "{} partitions do not use an attribution matrix",
            other.tag()
        )))),
    }
}

fn taus(cfg: &PipelineConfig, t: &TauArg) -> Vec<f64> {
    if t.tau_sweep.is_empty() {
        vec![cfg.eval.eval.sampler.temperature]
    } else {
        t.tau_sweep.clone()
    }
}

fn stage(
    common: &Common,
    f: impl FnOnce(&Pipeline, &PipelineConfig) -> Result<(), Failure>,
) -> Result<(), Failure> {
    let cfg = config(common)?;
    let _lock = WorkdirLock::acquire(&cfg.workdir).map_err(Failure::Config)?;
    let p = Pipeline::new(cfg.clone()).map_err(Failure::Config)?;
    f(&p, &cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    use Failure::Stage;
    match cli.command {
        Command::Synth(c) => stage(&c, |p, _| p.synth().map_err(Stage)),
        Command::Attribute(MethodStage {
            common: c,
            method: m,
        }) => stage(&c, |p, cfg| {
            let method = attribution_method(variant(cfg, &m)?)?;
            let path = p.matrix_path(method);
            p.attribute(method).map_err(Stage)?;
            println!("{}", path.display());
            Ok(())
        }),
        Command::SelectQueries(MethodStage {
            common: c,
            method: m,
        }) => stage(&c, |p, cfg| {
            let method = attribution_method(variant(cfg, &m)?)?;
            let rows = p.select_queries(method).map_err(Stage)?;
            println!(
                "{}",
                rows.iter()
                    .map(|r| r.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            );
            Ok(())
        }),
        Command::Partition(MethodStage {
            common: c,
            method: m,
        }) => stage(&c, |p, cfg| {
            let v = variant(cfg, &m)?;
            let part = p.partition(v).map_err(Stage)?;
            println!("{} sizes {:?}", p.partition_path(v).display(), part.sizes());
            Ok(())
        }),
        Command::Adapt(MethodStage {
            common: c,
            method: m,
        }) => stage(&c, |p, cfg| {
            let v = variant(cfg, &m)?;
            p.adapt(v).map_err(Stage)?;
            println!("{}", p.adapt_dir(v).display());
            Ok(())
        }),
        Command::Sample(SampleStage {
            common: c,
            method: m,
            tau: t,
        }) => stage(&c, |p, cfg| {
            let v = variant(cfg, &m)?;
            for tau in taus(cfg, &t) {
                p.sample(v, tau).map_err(Stage)?;
                println!("{}", p.generations_path(v, tau).display());
            }
            Ok(())
        }),
        Command::Evaluate(SampleStage {
            common: c,
            method: m,
            tau: t,
        }) => stage(&c, |p, cfg| {
            let v = variant(cfg, &m)?;
            for tau in taus(cfg, &t) {
                p.evaluate(v, tau).map_err(Stage)?;
                println!("{}", p.report_path(v, tau).display());
            }
            Ok(())
        }),
        Command::Pipeline {
            common,
            tau,
            k_sweep,
        } => {
            let cfg = config(&common)?;
            let taus = taus(&cfg, &tau);
            let reports = run_sweep(&cfg, &taus, &k_sweep).map_err(|e| match e {
                Error::Config(_) => Failure::Config(e),
                other => Stage(other),
            })?;
            for (k, v, tau, r) in reports {
                println!(
                    "K={k} {} tau={tau} diversity={:.4} avg_kl={}",
                    v.tag(),
                    r.sample_diversity,
                    r.avg_kl.map_or("NA".into(), |x| format!("{x:.6}"))
                );
            }
            Ok(())
        }
        Command::Compare { reports } => {
            let loaded = reports
                .iter()
                .map(|p| DiversityReport::load(p).map(|r| (p.display().to_string(), r)))
                .collect::<Result<Vec<_>, _>>()
                .map_err(Stage)?;
            print!("{}", compare_reports(&loaded).map_err(Stage)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
