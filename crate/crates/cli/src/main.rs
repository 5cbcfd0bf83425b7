use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bapo_core::config::{Overrides, RunConfig};
use bapo_core::data::PreferenceType;
use bapo_core::eval::EvalReport;
use bapo_core::loss::Method;
use bapo_core::pipeline::{ExportKind, Pipeline, Stage, SweepAxis};
use bapo_core::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bapo", version, about = "Base-anchored preference optimization laboratory")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML config file; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root for every stage.
    #[arg(long, global = true, env = "BAPO_OUT", default_value = "bapo-out")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    method: Option<Method>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Adapter rank; alpha is set to twice the rank.
    #[arg(long, global = true)]
    rank: Option<usize>,
    /// Preference type id, e.g. P2A.
    #[arg(long = "type", global = true)]
    preference_type: Option<PreferenceType>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the world, preference corpora and knowledge probes.
    Gen,
    /// Pretrain and freeze the base/reference model.
    Pretrain,
    /// Cache base-model responses for every prompt.
    CacheBase,
    /// Run one preference optimization.
    Train,
    /// Evaluate a finished run directory.
    Eval { run_dir: PathBuf },
    /// Every configured method on every configured type.
    Compare,
    /// Lambda or adapter-rank ablation.
    Sweep { axis: SweepAxis },
    /// Linear Bradley-Terry sample-complexity study.
    Theory,
    /// Merge per-run artifacts into one table under <out>/exports.
    Export { what: ExportKind },
    /// Print the fully resolved configuration.
    Config,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidInput(_) | Error::Capacity(_) | Error::Parse { .. } => 2,
        Error::MissingArtifact { .. } | Error::StaleArtifact { .. } | Error::Checkpoint(_) => 3,
        Error::Numerical(_) | Error::Diverged { .. } | Error::NonConvergence { .. } => 4,
        Error::Io { .. } => 1,
    }
}

fn load_config(c: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: c.seed,
        method: c.method,
        lambda: c.lambda,
        rank: c.rank,
        preference_type: c.preference_type,
    });
    Ok(cfg)
}

fn report_stage(what: &str, s: &Stage) {
    let state = if s.created { "created" } else { "up to date" };
    println!("{what}: {} ({state})", s.dir.display());
}

fn print_reports(path: &Path, reports: &[EvalReport]) {
    for r in reports {
        println!(
            "{}\t{}\tlambda={}\tr={}\trwd_acc={:.4}\tfact={:.4}\tsafety={:.4}\tdb={:.4}",
            r.method, r.type_id, r.lambda, r.rank, r.reward_accuracy, r.fact_accuracy, r.safety_accuracy, r.delta_b_final
        );
    }
    println!("table: {}", path.display());
}

fn run(cli: Cli) -> Result<(), Error> {
    let root = cli.common.out.clone();
    match cli.cmd {
        Cmd::Eval { run_dir } => {
            let r = Pipeline::eval(&root, &run_dir)?;
            println!("{}\n{}", bapo_core::eval::REPORT_HEADER, r.to_row());
            return Ok(());
        }
        Cmd::Export { what } => {
            println!("{}", Pipeline::export(&root, what)?.display());
            return Ok(());
        }
        _ => {}
    }
    let p = Pipeline::new(&root, load_config(&cli.common)?)?;
    match cli.cmd {
        Cmd::Gen => report_stage("world", &p.gen()?),
        Cmd::Pretrain => {
            report_stage("base", &p.pretrain()?);
            let (fact, safety) = p.base_accuracy()?;
            println!("base probe accuracy: fact {fact:.4}, safety {safety:.4}");
        }
        Cmd::CacheBase => report_stage("cache", &p.cache_base()?),
        Cmd::Train => report_stage("run", &p.train()?),
        Cmd::Compare => {
            let (path, reports) = p.compare()?;
            print_reports(&path, &reports);
        }
        Cmd::Sweep { axis } => {
            let (path, reports) = p.sweep(axis)?;
            print_reports(&path, &reports);
        }
        Cmd::Theory => {
            let (stage, o) = p.theory()?;
            report_stage("theory", &stage);
            let s = &o.summary;
            println!(
                "slopes full {:.3} restricted {:.3}; final ratio {:.3}; dominance {:.3}; bound coverage {:.3}",
                s.slope_full, s.slope_restricted, s.final_ratio, s.dominance, o.bound_coverage
            );
        }
        Cmd::Config => print!("{}", p.config.to_toml()),
        Cmd::Eval { .. } | Cmd::Export { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
