use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use super::config::{ExperimentConfig, Method};
use crate::model::{save_checkpoint, RewardModel};
use crate::trainer::{
    run_alternation, stream_seed, streams, BaselineSource, CodetrSource, ExperimentLog, LogRow, OracleSource,
    RewardSource, LOG_COLUMNS,
};

pub const LOG_FILE: &str = "log.csv";
pub const SNAPSHOT_FILE: &str = "config.snapshot";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CURVES_FILE: &str = "curves.svg";

/// `<env>_<spec>_<n>_<method>_<seed>_<utc>`.
pub fn run_id(cfg: &ExperimentConfig, seed: u64, utc: &str) -> String {
    let e = &cfg.experiment;
    format!("{}_{}_{}_{}_{}_{}", e.env, cfg.composite.name(), e.delay, e.method, seed, utc)
}

pub fn utc_stamp() -> String {
    chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string()
}

/// Creates a fresh run directory, suffixing `-k` if the id is taken.
fn create_run_dir(outdir: &Path, id: &str) -> Result<PathBuf> {
    fs::create_dir_all(outdir).with_context(|| format!("creating {}", outdir.display()))?;
    let mut k = 0;
    loop {
        let name = if k == 0 { id.to_string() } else { format!("{id}-{k}") };
        let dir = outdir.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => k += 1,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
}

pub struct SeedRun {
    pub dir: PathBuf,
    pub log: ExperimentLog,
    pub model: Option<RewardModel>,
}

/// Runs one seed, writing the snapshot first and log rows as they appear.
pub fn run_seed(cfg: &ExperimentConfig, snapshot: &str, seed: u64, outdir: &Path) -> Result<SeedRun> {
    let dir = create_run_dir(outdir, &run_id(cfg, seed, &utc_stamp()))?;
    fs::write(dir.join(SNAPSHOT_FILE), snapshot).context("writing config snapshot")?;

    let log_path = dir.join(LOG_FILE);
    let file = File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut csv = csv::Writer::from_writer(BufWriter::new(file));
    csv.write_record(LOG_COLUMNS)?;
    csv.flush()?;
    let mut on_row = |row: &LogRow| -> std::io::Result<()> {
        csv.write_record(row.csv_fields())?;
        csv.flush()
    };

    let spec = cfg.env_spec();
    let alt = cfg.alternation();
    let e = &cfg.experiment;
    let context = || format!("seed {seed}: {} on {} ({})", e.method, e.env, dir.display());
    let (log, model) = match e.method {
        Method::Codetr => {
            let model = RewardModel::new(cfg.model_config(&spec), stream_seed(seed, streams::INIT))?;
            let mut src = CodetrSource::new(model, cfg.trainer.clone(), e.delay, seed)?;
            let out = run_alternation(&spec, &alt, &mut src, seed, &mut on_row).with_context(context)?;
            (out.log, Some(src.into_model()))
        }
        method => {
            let mut src: Box<dyn RewardSource> = match method.baseline() {
                Some(kind) => Box::new(BaselineSource(kind)),
                None => Box::new(OracleSource),
            };
            let out = run_alternation(&spec, &alt, src.as_mut(), seed, &mut on_row).with_context(context)?;
            (out.log, None)
        }
    };
    drop(on_row);
    csv.flush()?;
    if let Some(m) = &model {
        save_checkpoint(m, dir.join(CHECKPOINT_FILE)).context("writing checkpoint")?;
    }
    Ok(SeedRun { dir, log, model })
}

/// Reads a run's log back.
pub fn read_log(dir: &Path) -> Result<ExperimentLog> {
    let path = dir.join(LOG_FILE);
    let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    Ok(ExperimentLog::read_csv(file)?)
}

/// Writes `<outdir>/curves.svg` from the given run directories.
pub fn write_curves(cfg: &ExperimentConfig, outdir: &Path, dirs: &[PathBuf]) -> Result<PathBuf> {
    let logs = dirs.iter().map(|d| read_log(d)).collect::<Result<Vec<_>>>()?;
    let e = &cfg.experiment;
    let title = format!(
        "{} / {} / n={} / {} ({} seeds)",
        e.env,
        cfg.composite.name(),
        e.delay,
        e.method,
        logs.len()
    );
    let svg = super::svg::curves_svg(&title, &logs);
    let path = outdir.join(CURVES_FILE);
    let mut f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(svg.as_bytes())?;
    Ok(path)
}
