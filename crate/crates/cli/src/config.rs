use std::path::{Path, PathBuf};

use aclrec_core::data::{FileFormat, Separator};
use aclrec_core::evaluation::{EvalProtocol, Weighting};
use aclrec_core::simulation::SimConfig;
use aclrec_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Prefix of environment variables that override config keys, e.g.
/// `ACLREC_TRAIN_ALPHA=2` or `ACLREC_SEED=7`.
pub const ENV_PREFIX: &str = "ACLREC_";

const SECTIONS: [&str; 5] = ["data", "sim", "train", "eval", "output"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    pub format: FileFormat,
    pub separator: Separator,
    pub min_n: usize,
    pub max_n: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            path: None,
            format: FileFormat::DelimitedTriples,
            separator: "tab".parse().expect("tab separator"),
            min_n: 20,
            max_n: usize::MAX / 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimSection {
    #[serde(flatten)]
    pub config: SimConfig,
    /// Independent datasets written to `rep_XX` subdirectories when above 1.
    pub replicates: usize,
    /// Users with fewer clicks are dropped before splitting the click log.
    pub min_clicks: usize,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            config: SimConfig::default(),
            replicates: 1,
            min_clicks: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    #[serde(flatten)]
    pub config: TrainConfig,
    /// Prepared split to train on; defaults to the simulated clicks when present,
    /// else the prepared explicit data.
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_eval_negatives: usize,
    pub cutoffs: Vec<usize>,
    pub weightings: Vec<Weighting>,
    pub self_normalize: bool,
    pub mu: f64,
    pub full_catalog: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        let p = EvalProtocol::default();
        EvalSection {
            n_eval_negatives: p.n_eval_negatives,
            cutoffs: p.cutoffs,
            weightings: vec![Weighting::Standard],
            self_normalize: p.self_normalize,
            mu: p.mu,
            full_catalog: p.full_catalog,
        }
    }
}

impl EvalSection {
    pub fn protocol(&self, weighting: Weighting) -> EvalProtocol {
        EvalProtocol {
            n_eval_negatives: self.n_eval_negatives,
            cutoffs: self.cutoffs.clone(),
            weighting,
            self_normalize: self.self_normalize,
            mu: self.mu,
            full_catalog: self.full_catalog,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub directory: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub sim: SimSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub output: OutputSection,
}

/// A parsed config plus the keys the user set explicitly.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    raw: toml::Table,
}

impl LoadedConfig {
    /// Whether `section.key` appeared in the file or the environment.
    pub fn is_set(&self, section: &str, key: &str) -> bool {
        self.raw
            .get(section)
            .and_then(|s| s.as_table())
            .is_some_and(|t| t.contains_key(key))
    }
}

/// Reads the config file (if any), applies environment overrides, then the
/// command-line seed, and propagates the run seed into every section.
pub fn load(
    path: Option<&Path>,
    env: impl IntoIterator<Item = (String, String)>,
    seed: Option<u64>,
) -> Result<LoadedConfig, CliError> {
    let mut raw: toml::Table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            text.parse()
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    apply_env(&mut raw, env)?;
    if let Some(s) = seed {
        raw.insert("seed".into(), toml::Value::Integer(seed_as_i64(s)?));
    }
    reject_unknown_flattened(&raw)?;
    let mut config: RunConfig = raw
        .clone()
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    config.sim.config.seed = config.seed;
    config.train.config.seed = config.seed;
    validate(&config)?;
    Ok(LoadedConfig { config, raw })
}

/// Checks the keys of `[sim]` and `[train]` against the strict core config types.
fn reject_unknown_flattened(raw: &toml::Table) -> Result<(), CliError> {
    fn strict<T: serde::de::DeserializeOwned>(
        raw: &toml::Table,
        section: &str,
        own_keys: &[&str],
    ) -> Result<(), CliError> {
        let Some(value) = raw.get(section) else {
            return Ok(());
        };
        let mut table = value
            .as_table()
            .ok_or_else(|| CliError::Config(format!("`{section}` must be a table")))?
            .clone();
        for k in own_keys {
            table.remove(*k);
        }
        T::deserialize(toml::Value::Table(table))
            .map(drop)
            .map_err(|e| CliError::Config(format!("[{section}] {e}")))
    }
    strict::<SimConfig>(raw, "sim", &["replicates", "min_clicks"])?;
    strict::<TrainConfig>(raw, "train", &["dataset"])
}

fn seed_as_i64(s: u64) -> Result<i64, CliError> {
    i64::try_from(s).map_err(|_| CliError::Config(format!("seed {s} does not fit a TOML integer")))
}

fn apply_env(
    raw: &mut toml::Table,
    env: impl IntoIterator<Item = (String, String)>,
) -> Result<(), CliError> {
    let mut vars: Vec<(String, String)> = env
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    vars.sort();
    for (key, value) in vars {
        let rest = key[ENV_PREFIX.len()..].to_ascii_lowercase();
        if rest == "seed" {
            let s: u64 = value
                .parse()
                .map_err(|_| CliError::Config(format!("{key}: not a seed: {value}")))?;
            raw.insert("seed".into(), toml::Value::Integer(seed_as_i64(s)?));
            continue;
        }
        let Some((section, field)) = SECTIONS
            .iter()
            .find_map(|s| rest.strip_prefix(&format!("{s}_")).map(|f| (*s, f)))
        else {
            if rest != "log" {
                log::warn!("ignoring unrecognised override {key}");
            }
            continue;
        };
        let parsed = parse_env_value(&value);
        let table = raw
            .entry(section)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{section}` must be a table")))?;
        table.insert(field.to_string(), parsed);
    }
    Ok(())
}

/// Interprets an override as a TOML literal (number, bool, array, quoted
/// string), falling back to a bare string.
fn parse_env_value(value: &str) -> toml::Value {
    format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

fn validate(c: &RunConfig) -> Result<(), CliError> {
    c.train.config.validate()?;
    c.sim.config.validate()?;
    for w in &c.eval.weightings {
        c.eval.protocol(*w).validate()?;
    }
    if c.eval.weightings.is_empty() {
        return Err(CliError::Config("eval.weightings must not be empty".into()));
    }
    if c.sim.replicates == 0 {
        return Err(CliError::Config("sim.replicates must be >= 1".into()));
    }
    if c.data.min_n < 1 || c.data.max_n <= c.data.min_n {
        return Err(CliError::Config(
            "data bounds must satisfy 1 <= min_n < max_n".into(),
        ));
    }
    Ok(())
}

/// Serializes the fully resolved config.
pub fn to_toml(c: &RunConfig) -> Result<String, CliError> {
    toml::to_string(c).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use aclrec_core::training::TrainMode;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn defaults_round_trip() {
        let c = load(None, env(&[]), None).unwrap().config;
        let back: RunConfig = toml::from_str(&to_toml(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[train]\nlearning_rate = 0.1\n").unwrap();
        assert!(matches!(
            load(Some(&p), env(&[]), None),
            Err(CliError::Config(_))
        ));
        std::fs::write(&p, "[training]\nalpha = 0.1\n").unwrap();
        assert!(load(Some(&p), env(&[]), None).is_err());
    }

    #[test]
    fn environment_and_flag_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 3\n[train]\nmode = \"erm\"\nalpha = 0.5\n").unwrap();
        let l = load(
            Some(&p),
            env(&[
                ("ACLREC_TRAIN_ALPHA", "2"),
                ("ACLREC_TRAIN_MODE", "acl"),
                ("ACLREC_EVAL_WEIGHTINGS", "[\"Standard\", \"Robust\"]"),
                ("ACLREC_SEED", "9"),
                ("PATH", "/bin"),
            ]),
            None,
        )
        .unwrap();
        assert_eq!(l.config.train.config.alpha, 2.0);
        assert_eq!(l.config.train.config.mode, TrainMode::Acl);
        assert_eq!(
            l.config.eval.weightings,
            vec![Weighting::Standard, Weighting::Robust]
        );
        assert_eq!(l.config.seed, 9);
        assert_eq!(l.config.train.config.seed, 9);
        assert!(l.is_set("train", "alpha"));
        assert!(!l.is_set("train", "r_psi"));
        let flagged = load(Some(&p), env(&[("ACLREC_SEED", "9")]), Some(11)).unwrap();
        assert_eq!(flagged.config.sim.config.seed, 11);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(load(None, env(&[("ACLREC_TRAIN_PATIENCE", "0")]), None).is_err());
        assert!(load(None, env(&[("ACLREC_SIM_SIGMA1", "-1.0")]), None).is_err());
        assert!(load(None, env(&[("ACLREC_SEED", "x")]), None).is_err());
    }
}
