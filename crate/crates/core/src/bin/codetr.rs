use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command as Process, ExitCode, Stdio};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use codetr::harness::case_study::{case_study, write_case_csv};
use codetr::harness::config::ExperimentConfig;
use codetr::harness::gradcheck::grad_check;
use codetr::harness::oracle_check::oracle_checks;
use codetr::harness::run::{run_seed, write_curves};
use codetr::model::load_checkpoint_for;

/// Marker printed by `run` for every finished seed; the parent of a
/// `--jobs` fan-out reads it from each worker.
const RUN_DIR_TAG: &str = "run_dir\t";

#[derive(Parser)]
#[command(name = "codetr", version, about = "Composite delayed reward experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment for every seed and plot mean ± std curves.
    Run(RunArgs),
    /// Per-step weights and relabels of a trained checkpoint.
    CaseStudy(CaseArgs),
    /// Finite-difference check of the reward-model loss gradient.
    GradCheck(GradArgs),
    /// Cross-check the environment oracles.
    OracleCheck(OracleArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated seeds; overrides the config.
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    /// Worker processes; each runs one seed.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Overrides `experiment.outdir`.
    #[arg(long)]
    outdir: Option<PathBuf>,
    #[arg(long, hide = true)]
    no_plot: bool,
}

#[derive(Args)]
struct CaseArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 20)]
    episodes: usize,
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    #[arg(long)]
    outdir: Option<PathBuf>,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 20)]
    draws: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 1000)]
    rollouts: usize,
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
}

enum Failure {
    Config(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn load_config(path: &Path) -> Result<(ExperimentConfig, String), Failure> {
    ExperimentConfig::load(path).map_err(|e| Failure::Config(e.to_string()))
}

fn first_seed(seed: &Option<Vec<u64>>) -> u64 {
    seed.as_ref().and_then(|s| s.first().copied()).unwrap_or(0)
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let (cfg, snapshot) = load_config(&args.config)?;
    let seeds = args.seed.clone().unwrap_or_else(|| cfg.experiment.seeds.clone());
    if seeds.is_empty() {
        return Err(Failure::Config("`--seed`: seed list must be nonempty".into()));
    }
    let outdir = args.outdir.clone().unwrap_or_else(|| cfg.experiment.outdir.clone());
    let dirs = if args.jobs > 1 && seeds.len() > 1 {
        fan_out(&args, &seeds, &outdir)?
    } else {
        let mut dirs = Vec::new();
        for &seed in &seeds {
            let r = run_seed(&cfg, &snapshot, seed, &outdir)?;
            if let Some(last) = r.log.rows.last() {
                eprintln!(
                    "seed {seed}: step {} eval_return {:.6} normalized_score {:.6}",
                    last.step, last.eval_return, last.normalized_score
                );
            }
            println!("{RUN_DIR_TAG}{}", r.dir.display());
            dirs.push(r.dir);
        }
        dirs
    };
    if !args.no_plot {
        let path = write_curves(&cfg, &outdir, &dirs)?;
        eprintln!("curves: {}", path.display());
    }
    Ok(())
}

/// Runs each seed in its own worker process, at most `jobs` at a time.
fn fan_out(args: &RunArgs, seeds: &[u64], outdir: &Path) -> Result<Vec<PathBuf>> {
    let exe = std::env::current_exe().context("locating own executable")?;
    let mut dirs = Vec::new();
    for chunk in seeds.chunks(args.jobs) {
        let children = chunk
            .iter()
            .map(|seed| {
                Process::new(&exe)
                    .arg("run")
                    .arg("--config")
                    .arg(&args.config)
                    .arg("--seed")
                    .arg(seed.to_string())
                    .arg("--outdir")
                    .arg(outdir)
                    .arg("--no-plot")
                    .stdout(Stdio::piped())
                    .spawn()
                    .with_context(|| format!("spawning worker for seed {seed}"))
            })
            .collect::<Result<Vec<_>>>()?;
        for (mut child, seed) in children.into_iter().zip(chunk) {
            let stdout = child.stdout.take().expect("piped stdout");
            for line in BufReader::new(stdout).lines() {
                let line = line?;
                match line.strip_prefix(RUN_DIR_TAG) {
                    Some(dir) => dirs.push(PathBuf::from(dir)),
                    None => println!("{line}"),
                }
            }
            let status = child.wait()?;
            if !status.success() {
                bail!("worker for seed {seed} failed with {status}");
            }
        }
    }
    for d in &dirs {
        println!("{RUN_DIR_TAG}{}", d.display());
    }
    Ok(dirs)
}

fn case(args: CaseArgs) -> Result<(), Failure> {
    let (cfg, _) = load_config(&args.config)?;
    let spec = cfg.env_spec();
    let model = load_checkpoint_for(&args.checkpoint, &cfg.model_config(&spec))
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let study = case_study(
        &model,
        &spec,
        cfg.experiment.delay,
        args.episodes,
        cfg.trainer.relabel_output,
        first_seed(&args.seed),
    )?;
    let outdir = args.outdir.unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    });
    std::fs::create_dir_all(&outdir).with_context(|| format!("creating {}", outdir.display()))?;
    let path = outdir.join("case_study.csv");
    let file = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    write_case_csv(&study.rows, file).context("writing case study")?;
    let r = study.report;
    println!("segments\t{}", r.segments);
    println!("mean_abs_weight_dev\t{}", r.mean_abs_dev);
    println!("weight_argmax_hit_rate\t{}", r.hit_rate());
    println!("degenerate_segments\t{}", r.degenerate);
    if r.all_degenerate() {
        println!("note\tall weights are tied; hit-rate reported as 0");
    }
    println!("csv\t{}", path.display());
    Ok(())
}

fn gradcheck(args: GradArgs) -> Result<(), Failure> {
    let report = grad_check(args.draws, args.step, first_seed(&args.seed)).map_err(anyhow::Error::from)?;
    println!(
        "draws {} entries {} max_rel_error {:.3e} at {}[{}]",
        report.draws, report.entries, report.max_rel_error, report.worst.0, report.worst.1
    );
    if report.max_rel_error > args.tolerance {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "max relative error {:.3e} exceeds {:.1e}",
            report.max_rel_error,
            args.tolerance
        )));
    }
    Ok(())
}

fn oracle(args: OracleArgs) -> Result<(), Failure> {
    let mut failed = 0;
    for line in oracle_checks(args.rollouts, first_seed(&args.seed)) {
        let tag = if line.pass() { "ok  " } else { "FAIL" };
        println!(
            "{tag} {}: expected {:.9} observed {:.9} (tol {:.1e})",
            line.name, line.expected, line.observed, line.tolerance
        );
        failed += usize::from(!line.pass());
    }
    if failed > 0 {
        return Err(Failure::Runtime(anyhow::anyhow!("{failed} oracle checks failed")));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::CaseStudy(a) => case(a),
        Command::GradCheck(a) => gradcheck(a),
        Command::OracleCheck(a) => oracle(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
