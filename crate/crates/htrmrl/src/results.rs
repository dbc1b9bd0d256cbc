//! Run directories and the CSV files written into them. Every CSV has a
//! fixed header; floats use Rust's shortest round-trip formatting so equal
//! values always print identically.
use std::fs;
use std::path::{Path, PathBuf};

use htrmrl_core::envs::Family;
use htrmrl_core::eval::{AttentionCost, MeasuredAttention};
use htrmrl_core::metarl::{EvalSummary, MetricsLog, UpdateSummary};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

pub const OUTPUT_ROOT_VAR: &str = "HTRMRL_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

/// `v<crate version>-g<commit>[-dirty]`, fixed at build time.
pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"), "-g", env!("HTRMRL_GIT_DESCRIBE"));

pub const METRICS_HEADER: &[&str] = &[
    "env_steps",
    "split",
    "task_family",
    "success_rate",
    "mean_return",
    "total_loss",
    "policy_loss",
    "value_loss",
    "entropy",
    "approx_kl",
    "clip_fraction",
    "grad_norm",
];
pub const TIMING_HEADER: &[&str] = &["env_steps", "event", "wall_time"];
pub const EVAL_HEADER: &[&str] = &[
    "split",
    "task_family",
    "tasks",
    "episodes",
    "success_rate",
    "std_error",
    "mean_return",
];
pub const EVAL_TASKS_HEADER: &[&str] = &[
    "task",
    "split",
    "task_family",
    "episodes",
    "final_success",
    "final_return",
    "first_return",
];
pub const ABLATION_HEADER: &[&str] = &[
    "cell",
    "method",
    "kind",
    "k",
    "s",
    "sampling",
    "state_concat",
    "intra_blocks",
    "inter_blocks",
    "seeds",
    "train_success_mean",
    "train_success_se",
    "test_success_mean",
    "test_success_se",
];
pub const CURVES_HEADER: &[&str] = &[
    "cell",
    "env_steps",
    "split",
    "task_family",
    "seeds",
    "success_mean",
    "success_se",
];
pub const RANKS_HEADER: &[&str] = &["cell", "split", "env_steps", "average_rank"];
pub const COUNTS_HEADER: &[&str] = &[
    "k",
    "s",
    "heads",
    "intra_blocks",
    "inter_blocks",
    "intra_scores",
    "inter_scores",
    "hierarchical_scores",
    "flat_scores",
    "flat_same_depth_scores",
    "ratio",
    "ratio_same_depth",
    "measured_hierarchical",
    "measured_flat",
    "measured_flat_same_depth",
    "matches",
];
pub const PROJECTION_HEADER: &[&str] = &["task_family", "task", "episode", "pc1", "pc2"];
pub const SEPARATION_HEADER: &[&str] = &[
    "rows",
    "families",
    "silhouette",
    "explained_pc1",
    "explained_pc2",
    "degenerate",
];

pub fn embeddings_header(dim: usize) -> Vec<String> {
    let mut h: Vec<String> = ["task_family", "task", "episode"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((0..dim).map(|i| format!("z{i}")));
    h
}

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

/// Absolute paths are kept; relative ones go under the output root.
pub fn resolve(dir: &Path) -> PathBuf {
    if dir.is_absolute() {
        dir.to_path_buf()
    } else {
        output_root().join(dir)
    }
}

pub fn num(v: f64) -> String {
    format!("{v}")
}

fn family_name(f: Option<Family>) -> String {
    f.map_or_else(|| "all".to_string(), |f| f.name().to_string())
}

pub fn write_csv<S: AsRef<str>>(path: &Path, header: &[S], rows: &[Vec<String>]) -> AppResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| AppError::Runtime(format!("{}: {e}", path.display())))?;
    w.write_record(header.iter().map(|h| h.as_ref()))?;
    for r in rows {
        if r.len() != header.len() {
            return Err(AppError::Runtime(format!(
                "{}: row has {} fields, header has {}",
                path.display(),
                r.len(),
                header.len()
            )));
        }
        w.write_record(r)?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

fn update_row(u: &UpdateSummary) -> Vec<String> {
    let s = &u.stats;
    vec![
        u.env_steps.to_string(),
        "rollout".into(),
        "all".into(),
        num(u.train_success),
        num(u.mean_return),
        num(s.total),
        num(s.policy_loss),
        num(s.value_loss),
        num(s.entropy),
        num(s.approx_kl),
        num(s.clip_fraction),
        num(s.grad_norm),
    ]
}

fn eval_row(e: &EvalSummary) -> Vec<String> {
    let mut r = vec![
        e.env_steps.to_string(),
        e.split.name().into(),
        family_name(e.family),
        num(e.success_rate),
        num(e.mean_return),
    ];
    r.extend(std::iter::repeat_n(String::new(), 7));
    r
}

/// Update rows (`split = rollout`) and evaluation rows interleaved by env
/// steps; at equal steps the update comes first.
pub fn metrics_rows(log: &MetricsLog) -> Vec<Vec<String>> {
    let mut rows: Vec<(u64, u8, usize, Vec<String>)> = Vec::new();
    for (i, u) in log.updates.iter().enumerate() {
        rows.push((u.env_steps, 0, i, update_row(u)));
    }
    for (i, e) in log.evals.iter().enumerate() {
        rows.push((e.env_steps, 1, i, eval_row(e)));
    }
    rows.sort_by_key(|r| (r.0, r.1, r.2));
    rows.into_iter().map(|r| r.3).collect()
}

pub fn counts_row(c: &AttentionCost, m: &MeasuredAttention) -> Vec<String> {
    let matches = m.intra == c.intra_scores
        && m.inter == c.inter_scores
        && m.flat == c.flat_scores
        && m.flat_same_depth == c.flat_same_depth_scores;
    vec![
        c.k.to_string(),
        c.s.to_string(),
        c.heads.to_string(),
        c.intra_blocks.to_string(),
        c.inter_blocks.to_string(),
        c.intra_scores.to_string(),
        c.inter_scores.to_string(),
        c.hierarchical_scores.to_string(),
        c.flat_scores.to_string(),
        c.flat_same_depth_scores.to_string(),
        num(c.ratio),
        num(c.ratio_same_depth),
        (m.intra + m.inter).to_string(),
        m.flat.to_string(),
        m.flat_same_depth.to_string(),
        matches.to_string(),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub command: String,
    /// SHA-256 of `config.toml`.
    pub config_sha256: String,
    pub method: String,
    pub seed: Option<u64>,
    pub env_steps: Option<u64>,
    /// Checksum of the final parameters.
    pub params_checksum: Option<String>,
    pub files: Vec<String>,
}

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

/// A directory owned by one run. Creation fails if it already holds
/// anything; [`RunDir::finish`] writes the manifest and marks every file
/// read-only.
#[derive(Debug)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(path: PathBuf) -> AppResult<Self> {
        if path.exists() {
            let mut entries = fs::read_dir(&path).map_err(|e| AppError::io(&path, e))?;
            if entries.next().is_some() {
                return Err(AppError::Config(format!(
                    "{} already exists and is not empty; run directories are never overwritten",
                    path.display()
                )));
            }
        }
        fs::create_dir_all(&path).map_err(|e| AppError::io(&path, e))?;
        Ok(RunDir { path })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn subdir(&self, name: &str) -> AppResult<PathBuf> {
        let p = self.path.join(name);
        fs::create_dir_all(&p).map_err(|e| AppError::io(&p, e))?;
        Ok(p)
    }

    pub fn write(&self, name: &str, contents: &str) -> AppResult<()> {
        let p = self.file(name);
        fs::write(&p, contents).map_err(|e| AppError::io(&p, e))
    }

    fn files(&self) -> AppResult<Vec<String>> {
        let mut out = Vec::new();
        let mut stack = vec![self.path.clone()];
        while let Some(dir) = stack.pop() {
            for e in fs::read_dir(&dir).map_err(|e| AppError::io(&dir, e))? {
                let p = e.map_err(|e| AppError::io(&dir, e))?.path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(&self.path).expect("walk stays under the root");
                    out.push(rel.to_string_lossy().replace('\\', "/"));
                }
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn finish(self, mut manifest: Manifest) -> AppResult<PathBuf> {
        manifest.files = self.files()?;
        manifest.files.push(MANIFEST.into());
        let json = serde_json::to_string_pretty(&manifest)?;
        self.write(MANIFEST, &(json + "\n"))?;
        for f in &manifest.files {
            let p = self.path.join(f);
            let mut perm = fs::metadata(&p).map_err(|e| AppError::io(&p, e))?.permissions();
            perm.set_readonly(true);
            fs::set_permissions(&p, perm).map_err(|e| AppError::io(&p, e))?;
        }
        Ok(self.path)
    }
}

pub fn read_manifest(run_dir: &Path) -> AppResult<Manifest> {
    let p = run_dir.join(MANIFEST);
    let text = fs::read_to_string(&p).map_err(|e| AppError::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}
