//! Run configuration: TOML on disk, `key=value` overrides on the command
//! line, validated as a whole before any work starts.
use std::path::{Path, PathBuf};

use htrmrl_core::envs::{EnvParams, Family, TaskDistribution};
use htrmrl_core::metarl::TrainConfig;
use htrmrl_core::policy::{PolicyConfig, PolicyKind, Sampling};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AppError, AppResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvMode {
    /// One family, disjoint finite train/test goal sets.
    SingleFamily,
    /// Disjoint train and test family lists.
    MultiFamily,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub mode: EnvMode,
    /// Family of single-family mode.
    pub family: Family,
    /// Goals per split in single-family mode.
    pub n_goals: usize,
    pub goal_seed: u64,
    pub train_families: Vec<Family>,
    pub test_families: Vec<Family>,
    pub params: EnvParams,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            mode: EnvMode::SingleFamily,
            family: Family::Reach,
            n_goals: 50,
            goal_seed: 7,
            train_families: Family::MLN_TRAIN.to_vec(),
            test_families: Family::MLN_TEST.to_vec(),
            params: EnvParams::default(),
        }
    }
}

impl EnvConfig {
    pub fn distribution(&self) -> htrmrl_core::Result<TaskDistribution> {
        match self.mode {
            EnvMode::SingleFamily => {
                TaskDistribution::single_family(self.family, self.n_goals, self.goal_seed, self.params)
            }
            EnvMode::MultiFamily => {
                if self.train_families.is_empty() || self.test_families.is_empty() {
                    return Err(htrmrl_core::Error::contract(
                        "multi-family mode needs train and test families",
                    ));
                }
                TaskDistribution::multi_family(self.train_families.clone(), self.test_families.clone(), self.params)
            }
        }
    }
}

/// Encoder depth pair `[intra, inter]` for the block-count axis.
pub type Blocks = [usize; 2];

/// Axes of an ablation grid. Every cell of the cartesian product is
/// trained for every seed; an omitted axis keeps the base configuration's
/// value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<Vec<PolicyKind>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampling: Option<Vec<Sampling>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state_concat: Option<Vec<bool>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blocks: Option<Vec<Blocks>>,
}

/// One point of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub kind: PolicyKind,
    pub k: usize,
    pub s: usize,
    pub sampling: Sampling,
    pub state_concat: bool,
    pub blocks: Blocks,
    /// Set when the grid has a block axis: the flat baseline then gets
    /// `intra + inter` blocks.
    pub flat_from_blocks: bool,
}

impl Cell {
    /// Directory-safe identifier.
    pub fn label(&self) -> String {
        format!(
            "{}_k{}_s{}_{}_concat{}_l{}-{}",
            self.kind.name(),
            self.k,
            self.s,
            sampling_name(self.sampling),
            u8::from(self.state_concat),
            self.blocks[0],
            self.blocks[1]
        )
    }

    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        c.policy.kind = self.kind;
        c.policy.state_concat = self.state_concat;
        c.policy.intra_blocks = self.blocks[0];
        c.policy.inter_blocks = self.blocks[1];
        if self.flat_from_blocks {
            c.policy.flat_blocks = self.blocks[0] + self.blocks[1];
        }
        c.train.k = self.k;
        c.train.s = self.s;
        c.train.sampling = self.sampling;
        c.ablate = None;
        c
    }
}

pub fn sampling_name(s: Sampling) -> &'static str {
    match s {
        Sampling::RecentEpisodes => "recent",
        Sampling::RandomEpisodes => "random",
    }
}

impl AblateConfig {
    pub fn cells(&self, base: &RunConfig) -> AppResult<Vec<Cell>> {
        fn axis<T: Clone>(name: &str, v: &Option<Vec<T>>, base: T) -> AppResult<Vec<T>> {
            match v {
                Some(v) if v.is_empty() => Err(AppError::Config(format!(
                    "ablation grid is empty: axis `{name}` has no values"
                ))),
                Some(v) => Ok(v.clone()),
                None => Ok(vec![base]),
            }
        }
        let p = &base.policy;
        let kinds = axis("kind", &self.kind, p.kind)?;
        let ks = axis("k", &self.k, base.train.k)?;
        let ss = axis("s", &self.s, base.train.s)?;
        let samplings = axis("sampling", &self.sampling, base.train.sampling)?;
        let concats = axis("state_concat", &self.state_concat, p.state_concat)?;
        let blocks = axis("blocks", &self.blocks, [p.intra_blocks, p.inter_blocks])?;
        let mut out = Vec::new();
        for &kind in &kinds {
            for &k in &ks {
                for &s in &ss {
                    for &sampling in &samplings {
                        for &state_concat in &concats {
                            for &blocks in &blocks {
                                out.push(Cell {
                                    kind,
                                    k,
                                    s,
                                    sampling,
                                    state_concat,
                                    blocks,
                                    flat_from_blocks: self.blocks.is_some(),
                                });
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// One run per seed; each run's `train.seed` is set from this list.
    pub seeds: Vec<u64>,
    /// Relative paths resolve against the output root.
    pub output_dir: PathBuf,
    pub env: EnvConfig,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablate: Option<AblateConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: PathBuf::from("run"),
            env: EnvConfig::default(),
            policy: PolicyConfig::default(),
            train: TrainConfig::default(),
            ablate: None,
        }
    }
}

impl RunConfig {
    /// Parse TOML text, apply overrides in order, validate.
    pub fn from_toml(text: &str, overrides: &[String]) -> AppResult<Self> {
        // Deserializing the text itself keeps spans for line numbers.
        toml::from_str::<RunConfig>(text).map_err(|e| AppError::Config(diagnose(text, &e)))?;
        let mut table: toml::Table = toml::from_str(text).map_err(|e| AppError::Config(diagnose(text, &e)))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| AppError::Config(format!("after overrides: {}", e.message().trim_end())))?;
        cfg.validate().map_err(|e| AppError::Config(locate(text, e)))?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> AppResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text, overrides).map_err(|e| match e {
            AppError::Config(m) => AppError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration always serializes")
    }

    /// SHA-256 of the canonical serialization, lowercase hex.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if self.seeds.is_empty() {
            return Err(("seeds", "at least one seed is required".into()));
        }
        self.env.params.validate().map_err(|e| ("env", e.to_string()))?;
        self.env.distribution().map_err(|e| ("env", e.to_string()))?;
        self.policy.validate().map_err(|e| ("policy", e.to_string()))?;
        self.train.validate().map_err(|e| ("train", e.to_string()))?;
        if let Some(a) = &self.ablate {
            a.cells(self).map_err(|e| ("ablate", e.to_string()))?;
        }
        Ok(())
    }

    /// The configuration of the run for one seed.
    pub fn for_seed(&self, seed: u64) -> RunConfig {
        let mut c = self.clone();
        c.seeds = vec![seed];
        c.train.seed = seed;
        c
    }
}

/// Set `a.b.c = value` in a TOML table. The value is read as a TOML
/// literal and falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> AppResult<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| AppError::Config(format!("override `{spec}` is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() {
        return Err(AppError::Config(format!("override `{spec}` has an empty key")));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed table has the key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| AppError::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn diagnose(text: &str, e: &toml::de::Error) -> String {
    let msg = e.message().trim_end();
    match e.span() {
        Some(span) if !text.is_empty() => format!("line {}: {msg}", line_of(text, span.start)),
        _ => format!("invalid config: {msg}"),
    }
}

/// Prefix a semantic error with the line of its section header.
fn locate(text: &str, (section, msg): (&'static str, String)) -> String {
    let header = format!("[{section}]");
    let line = text.lines().position(|l| {
        l.trim() == header
            || l.trim_start().starts_with(&format!("{section} "))
            || l.trim_start().starts_with(&format!("{section}="))
    });
    match line {
        Some(i) => format!("line {}: [{section}] {msg}", i + 1),
        None => format!("[{section}] {msg}"),
    }
}
