//! Run configuration: one TOML file with `[corpus]`, `[train]`, `[paths]`,
//! `[eval]`, `[heatmaps]` and `[gradcheck]` tables, every key optional.
//!
//! Overrides use dotted keys, `train.steps=100`. The value is parsed as a TOML
//! value and falls back to a plain string, so `train.objective=global` works
//! unquoted.
//!
//! Unset paths resolve under the output directory: the `--out-dir` flag, else
//! `$TOKENALIGN_OUT_DIR`, else `./out`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusConfig, CACHE_FILE};
use crate::error::{Error, Result};
use crate::objective::Objective;
use crate::pipeline::train::TrainConfig;

pub const OUT_DIR_ENV: &str = "TOKENALIGN_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "out";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Corpus directory (cache, manifest, config).
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub reports: Option<PathBuf>,
    pub heatmaps: Option<PathBuf>,
}

/// Fully resolved output and input locations.
#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub corpus: PathBuf,
    pub checkpoint: PathBuf,
    pub reports: PathBuf,
    pub heatmaps: PathBuf,
}

impl Paths {
    pub fn loss_log(&self) -> PathBuf {
        self.reports.join("loss.tsv")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[default]
    Validation,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    /// Second checkpoint to report against; its rows are labeled `baseline`.
    pub baseline: Option<PathBuf>,
    /// Trials of the random-ranking baseline row.
    pub random_trials: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Validation,
            baseline: None,
            random_trials: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapsConfig {
    /// Corpus sample indices.
    pub samples: Vec<usize>,
    /// Each grid cell becomes an `upscale × upscale` pixel square.
    pub upscale: usize,
}

impl Default for HeatmapsConfig {
    fn default() -> Self {
        Self {
            samples: vec![0],
            upscale: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub objectives: Vec<Objective>,
    /// Random batches per objective.
    pub batches: usize,
    pub batch_size: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            objectives: vec![Objective::Dense, Objective::Global, Objective::Hybrid],
            batches: 5,
            batch_size: 3,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
    pub eval: EvalConfig,
    pub heatmaps: HeatmapsConfig,
    pub gradcheck: GradcheckConfig,
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies one `a.b=value` override to a TOML table.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must have the form key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "empty key segment"));
    }
    let (last, parents) = parts.split_last().expect("non-empty");
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses TOML text with overrides applied on top.
    pub fn from_toml(text: &str, origin: &Path, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Parse {
            what: "config",
            path: origin.to_path_buf(),
            detail: e.to_string(),
        })?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        RunConfig::deserialize(toml::Value::Table(table)).map_err(|e| Error::Parse {
            what: "config",
            path: origin.to_path_buf(),
            detail: e.to_string(),
        })
    }

    /// Reads `path` (defaults only when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml(&text, p, overrides)
            }
            None => Self::from_toml("", Path::new("<defaults>"), overrides),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidArgument(format!("serializing config: {e}")))
    }

    /// Checks every section; path existence is checked per command.
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.train.validate()?;
        let e = &self.eval;
        if e.random_trials == 0 {
            return Err(Error::config("eval.random_trials", "must be at least 1"));
        }
        let h = &self.heatmaps;
        if h.samples.is_empty() {
            return Err(Error::config("heatmaps.samples", "must list at least one sample"));
        }
        if h.upscale == 0 {
            return Err(Error::config("heatmaps.upscale", "must be at least 1"));
        }
        let g = &self.gradcheck;
        if g.objectives.is_empty() {
            return Err(Error::config("gradcheck.objectives", "must list at least one objective"));
        }
        if g.batches == 0 || g.batch_size == 0 {
            return Err(Error::config("gradcheck.batches", "batches and batch_size must be at least 1"));
        }
        if !(g.tolerance > 0.0) {
            return Err(Error::config("gradcheck.tolerance", "must be positive"));
        }
        Ok(())
    }

    pub fn resolve_paths(&self, out_dir: &Path) -> Paths {
        let p = &self.paths;
        Paths {
            corpus: p.corpus.clone().unwrap_or_else(|| out_dir.join("corpus")),
            checkpoint: p.checkpoint.clone().unwrap_or_else(|| out_dir.join("checkpoint.vesc")),
            reports: p.reports.clone().unwrap_or_else(|| out_dir.join("reports")),
            heatmaps: p.heatmaps.clone().unwrap_or_else(|| out_dir.join("heatmaps")),
        }
    }
}

/// `--out-dir`, then the environment variable, then `./out`.
pub fn out_dir(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

/// Fails with the field name when an input the command reads is absent.
pub fn require_file(field: &str, path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::config(field, format!("{} does not exist", path.display())))
    }
}

pub fn require_corpus(field: &str, dir: &Path) -> Result<()> {
    require_file(field, &dir.join(CACHE_FILE))
}
