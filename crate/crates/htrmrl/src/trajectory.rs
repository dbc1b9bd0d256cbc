//! Newline-delimited JSON dump of rollouts, one record per step.
use std::io::Write;

use htrmrl_core::envs::Family;
use htrmrl_core::metarl::TaskRollout;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLine {
    pub task: usize,
    pub family: Family,
    pub episode: usize,
    pub step: usize,
    pub state: Vec<f64>,
    /// The action the environment received (clamped to the action box).
    pub action: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

pub fn lines(task: usize, rollout: &TaskRollout) -> Vec<StepLine> {
    let mut out = Vec::with_capacity(rollout.steps.len());
    let mut step = 0;
    let mut prev = usize::MAX;
    for r in &rollout.steps {
        if r.episode != prev {
            step = 0;
            prev = r.episode;
        }
        out.push(StepLine {
            task,
            family: rollout.task.family,
            episode: r.episode,
            step,
            state: r.state.clone(),
            action: r.action.iter().map(|a| a.clamp(-1.0, 1.0)).collect(),
            reward: r.reward,
            done: r.done,
        });
        step += 1;
    }
    out
}

pub fn write(out: &mut impl Write, lines: &[StepLine]) -> AppResult<()> {
    for l in lines {
        serde_json::to_writer(&mut *out, l)?;
        out.write_all(b"\n").map_err(|e| AppError::io("trajectory dump", e))?;
    }
    Ok(())
}
