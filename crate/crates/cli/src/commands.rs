use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use aclrec_core::checkpoint::Checkpoint;
use aclrec_core::data::{
    filter_users, leave_last_split, load_interactions, read_prepared, write_prepared, SplitDataset,
};
use aclrec_core::evaluation::{self, popularity_propensities, WeightSource, Weighting};
use aclrec_core::models::RecModel;
use aclrec_core::propensity::PropensityHead;
use aclrec_core::simulation::{generate_semi_synthetic, write_oracle, ProbTable, EXPOSURE_FILE};
use aclrec_core::training::{
    acl_train, erm_train, init_f, init_g, ps_train, stream_rng, EpochRecord, RegularizerData,
    TrainMode, TrainState,
};
use serde::Serialize;

use crate::config::{to_toml, LoadedConfig, RunConfig};
use crate::error::CliError;

pub const PREPARED_DIR: &str = "prepared";
pub const SIM_DIR: &str = "sim";
pub const TRAIN_DIR: &str = "train";
pub const EVAL_DIR: &str = "eval";
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
const LOCK_FILE: &str = ".aclrec.lock";
const EVAL_STREAM: u64 = 0xe7a1;

pub fn output_dir(config: &RunConfig, flag: Option<&Path>) -> Result<PathBuf, CliError> {
    flag.map(Path::to_path_buf)
        .or_else(|| config.output.directory.clone())
        .ok_or_else(|| {
            CliError::Config("no output directory: pass --out or set output.directory".into())
        })
}

/// Exclusive claim on a run directory, released on drop.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CliError::Config(format!(
                    "{} is locked by another aclrec process (remove {} if stale)",
                    dir.display(),
                    path.display()
                )))
            }
            Err(e) => Err(CliError::Data(format!("{}: {e}", path.display()))),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| CliError::Data(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(value).map_err(aclrec_core::Error::from)?;
    write_file(path, &(json + "\n"))
}

fn write_resolved(dir: &Path, config: &RunConfig) -> Result<(), CliError> {
    write_file(&dir.join(RESOLVED_CONFIG), &to_toml(config)?)
}

#[derive(Debug, Serialize)]
struct PrepareSummary {
    n_users: usize,
    n_items: usize,
    interactions: usize,
    train_interactions: usize,
}

pub fn prepare(loaded: &LoadedConfig, out: Option<&Path>) -> Result<(), CliError> {
    let config = &loaded.config;
    let run = output_dir(config, out)?;
    let _lock = RunLock::acquire(&run)?;
    let path = config
        .data
        .path
        .as_ref()
        .ok_or_else(|| CliError::Config("data.path is required for `prepare`".into()))?;
    let raw = load_interactions(path, config.data.format, &config.data.separator)?;
    let log = filter_users(&raw, config.data.min_n, config.data.max_n)?;
    if log.is_empty() {
        return Err(CliError::Data(format!(
            "no user in {} has between {} and {} interactions",
            path.display(),
            config.data.min_n,
            config.data.max_n
        )));
    }
    let split = leave_last_split(&log)?;
    let dir = run.join(PREPARED_DIR);
    write_prepared(&dir, &log, &split)?;
    let summary = PrepareSummary {
        n_users: log.n_users(),
        n_items: log.n_items(),
        interactions: log.len(),
        train_interactions: split.n_train(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    write_resolved(&dir, config)?;
    println!(
        "prepared {} users, {} items, {} interactions ({} dropped by filter) -> {}",
        summary.n_users,
        summary.n_items,
        summary.interactions,
        raw.len() - log.len(),
        dir.display()
    );
    Ok(())
}

pub fn simulate(
    loaded: &LoadedConfig,
    out: Option<&Path>,
    replicates: Option<usize>,
) -> Result<(), CliError> {
    let mut config = loaded.config.clone();
    if let Some(n) = replicates {
        if n == 0 {
            return Err(CliError::Config("--replicates must be >= 1".into()));
        }
        config.sim.replicates = n;
    }
    let run = output_dir(&config, out)?;
    let _lock = RunLock::acquire(&run)?;
    let source = run.join(PREPARED_DIR);
    if !source.join("train.tsv").exists() {
        return Err(CliError::Data(format!(
            "no prepared explicit data in {}; run `aclrec prepare` with the same --out first",
            source.display()
        )));
    }
    let (explicit, _) = read_prepared(&source)?;
    let sim_root = run.join(SIM_DIR);
    for r in 0..config.sim.replicates {
        let mut sim = config.sim.config.clone();
        sim.seed = config.seed + r as u64;
        let dir = if config.sim.replicates == 1 {
            sim_root.clone()
        } else {
            sim_root.join(format!("rep_{r:02}"))
        };
        let oracle = generate_semi_synthetic(&explicit, &sim)?;
        let manifest = write_oracle(&dir, &oracle, &sim)?;
        let prepared = oracle.prepare(config.sim.min_clicks, usize::MAX)?;
        write_prepared(&dir.join(PREPARED_DIR), &prepared.log, &prepared.split)?;
        let mut resolved = config.clone();
        resolved.sim.config.seed = sim.seed;
        write_resolved(&dir, &resolved)?;
        println!(
            "simulated {} clicks over {} users x {} items (seed {}, stage2 == stage1: {}) -> {}",
            manifest.n_clicks,
            manifest.n_users,
            manifest.n_items,
            sim.seed,
            manifest.stage2_equals_stage1,
            dir.display()
        );
    }
    Ok(())
}

/// The prepared split a run trains and evaluates on.
fn dataset_dir(config: &RunConfig, run: &Path) -> Result<PathBuf, CliError> {
    if let Some(d) = &config.train.dataset {
        return Ok(d.clone());
    }
    let simulated = run.join(SIM_DIR).join(PREPARED_DIR);
    if simulated.join("train.tsv").exists() {
        return Ok(simulated);
    }
    let explicit = run.join(PREPARED_DIR);
    if explicit.join("train.tsv").exists() {
        return Ok(explicit);
    }
    Err(CliError::Data(format!(
        "no prepared split under {}; run `aclrec prepare` (and optionally `simulate`) first",
        run.display()
    )))
}

fn write_training_log(path: &Path, records: &[EpochRecord]) -> Result<(), CliError> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(aclrec_core::Error::from)?);
        text.push('\n');
    }
    write_file(path, &text)
}

fn save_checkpoint(
    path: &Path,
    model: RecModel,
    head: Option<PropensityHead>,
) -> Result<(), CliError> {
    Checkpoint::new(model, head)
        .save(path)
        .map_err(CliError::from)
}

pub fn train(loaded: &LoadedConfig, out: Option<&Path>) -> Result<(), CliError> {
    let config = &loaded.config;
    let cfg = &config.train.config;
    let run = output_dir(config, out)?;
    let _lock = RunLock::acquire(&run)?;
    let data = dataset_dir(config, &run)?;
    let (_, split) = read_prepared(&data)?;
    if cfg.mode != TrainMode::Acl && loaded.is_set("train", "alpha") {
        log::warn!("train.alpha is ignored in mode {}", cfg.mode);
    }
    let dir = run.join(TRAIN_DIR);
    let mut resolved = config.clone();
    resolved.train.dataset = Some(data.clone());
    write_resolved(&dir, &resolved)?;
    log::info!(
        "training {} f={} g={} on {} users x {} items",
        cfg.mode,
        cfg.f_kind,
        cfg.g_kind,
        split.n_users,
        split.n_items
    );
    let state: TrainState = match cfg.mode {
        TrainMode::Erm => {
            let out = erm_train(init_f(cfg, &split)?, &split, cfg)?;
            save_checkpoint(&dir.join("f.json"), out.model, None)?;
            for stale in ["g.json", "stage1_log.jsonl"] {
                let p = dir.join(stale);
                if p.exists() {
                    fs::remove_file(&p)
                        .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
                }
            }
            out.state
        }
        TrainMode::Ps => {
            let out = ps_train(&split, cfg)?;
            save_checkpoint(&dir.join("f.json"), out.f, None)?;
            save_checkpoint(&dir.join("g.json"), out.g, Some(out.head))?;
            write_training_log(&dir.join("stage1_log.jsonl"), &out.g_state.records)?;
            out.state
        }
        TrainMode::Acl => {
            let reg = RegularizerData::for_kind(cfg.reg_kind, &split, None)?;
            let head = PropensityHead::neutral(cfg.mu)?;
            let out = acl_train(
                init_f(cfg, &split)?,
                init_g(cfg, &split)?,
                head,
                &split,
                cfg,
                &reg,
            )?;
            save_checkpoint(&dir.join("f.json"), out.f, None)?;
            save_checkpoint(&dir.join("g.json"), out.g, Some(out.head))?;
            out.state
        }
    };
    write_training_log(&dir.join("train_log.jsonl"), &state.records)?;
    write_json(&dir.join("state.json"), &state)?;
    if state.diverged() {
        return Err(CliError::Diverged(format!(
            "{:?}; last good checkpoint (epoch {}) kept in {}",
            state.stop_reason,
            state.best_epoch,
            dir.display()
        )));
    }
    println!(
        "trained {} epochs ({:?}), checkpoint epoch {} -> {}",
        state.epochs,
        state.stop_reason,
        state.best_epoch,
        dir.display()
    );
    Ok(())
}

fn oracle_exposure(
    data: &Path,
    split_log: &aclrec_core::data::InteractionLog,
) -> Result<ProbTable, CliError> {
    let path = data
        .parent()
        .map(|p| p.join(EXPOSURE_FILE))
        .filter(|p| p.exists())
        .ok_or_else(|| {
            CliError::Data(format!(
                "OracleUnbiased weighting needs {} next to {}; evaluate a simulated dataset (`aclrec simulate`)",
                EXPOSURE_FILE,
                data.display()
            ))
        })?;
    Ok(ProbTable::read_triples(
        &path,
        &split_log.user_ids,
        &split_log.item_ids,
    )?)
}

pub fn evaluate(loaded: &LoadedConfig, out: Option<&Path>) -> Result<(), CliError> {
    let config = &loaded.config;
    let run = output_dir(config, out)?;
    let _lock = RunLock::acquire(&run)?;
    let data = dataset_dir(config, &run)?;
    let (log, split) = read_prepared(&data)?;
    let train_dir = run.join(TRAIN_DIR);
    let f_path = train_dir.join("f.json");
    if !f_path.exists() {
        return Err(CliError::Data(format!(
            "no checkpoint at {}; run `aclrec train` first",
            f_path.display()
        )));
    }
    let f = Checkpoint::load(&f_path)?.model;
    check_space(&f, &split)?;
    let g_path = train_dir.join("g.json");
    let paired = if g_path.exists() {
        Some(Checkpoint::load(&g_path)?)
    } else {
        None
    };
    let dir = run.join(EVAL_DIR);
    write_resolved(&dir, config)?;
    for &weighting in &config.eval.weightings {
        let protocol = config.eval.protocol(weighting);
        let oracle;
        let popularity;
        let source = match weighting {
            Weighting::Standard => WeightSource::None,
            Weighting::OracleUnbiased => {
                oracle = oracle_exposure(&data, &log)?;
                WeightSource::Oracle(&oracle)
            }
            Weighting::PopularityDebiased => {
                popularity = popularity_propensities(&split);
                WeightSource::Popularity(&popularity)
            }
            Weighting::Robust => match &paired {
                Some(Checkpoint {
                    model,
                    head: Some(head),
                    ..
                }) => WeightSource::Robust { g: model, head },
                _ => {
                    return Err(CliError::Config(format!(
                        "Robust weighting needs a paired g checkpoint with a propensity head at {}; train with mode = \"acl\" or \"ps\"",
                        g_path.display()
                    )))
                }
            },
        };
        let mut rng = stream_rng(config.seed, EVAL_STREAM);
        let mut report = evaluation::evaluate(&f, &split, &protocol, source, &mut rng)?;
        report.seed = Some(config.seed);
        let stem = weighting.to_string().to_ascii_lowercase();
        write_json(&dir.join(format!("{stem}.json")), &report)?;
        let table = report.to_table();
        write_file(&dir.join(format!("{stem}.txt")), &table)?;
        print!("{table}");
    }
    Ok(())
}

fn check_space(model: &RecModel, split: &SplitDataset) -> Result<(), CliError> {
    if model.n_users() != split.n_users || model.n_items() != split.n_items {
        return Err(CliError::Data(format!(
            "checkpoint covers {}x{} but the split has {}x{}",
            model.n_users(),
            model.n_items(),
            split.n_users,
            split.n_items
        )));
    }
    Ok(())
}
