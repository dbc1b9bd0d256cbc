//! Two-dimensional point-mass task families sharing one state/action space.
//!
//! Observation layout is `[agent x, agent y, object x, object y, vel x,
//! vel y]`; actions are forces in `[-1, 1]²`. Goal positions, hazards and
//! task phases are hidden: nothing in the observation depends on them, so
//! the agent has to infer them from rewards.
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Prng};

pub const STATE_DIM: usize = 6;
pub const ACTION_DIM: usize = 2;
pub const DT: f64 = 0.1;
pub const DAMPING: f64 = 0.9;
pub const MAX_SPEED: f64 = 1.0;
/// Positions are clamped to `[-ARENA, ARENA]²`.
pub const ARENA: f64 = 1.0;
pub const START_RADIUS: f64 = 0.1;
pub const CONTACT_RADIUS: f64 = 0.1;
pub const HOLD_STEPS: usize = 10;
pub const HAZARD_RADIUS: f64 = 0.08;
pub const HAZARD_PENALTY: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Reach,
    Push,
    Pull,
    AvoidReach,
    Hold,
    Return,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Reach,
        Family::Push,
        Family::Pull,
        Family::AvoidReach,
        Family::Hold,
        Family::Return,
    ];

    /// Train families of the held-out-family mode.
    pub const MLN_TRAIN: [Family; 4] = [Family::Reach, Family::Push, Family::AvoidReach, Family::Hold];
    pub const MLN_TEST: [Family; 2] = [Family::Pull, Family::Return];

    pub fn name(self) -> &'static str {
        match self {
            Family::Reach => "reach",
            Family::Push => "push",
            Family::Pull => "pull",
            Family::AvoidReach => "avoid-reach",
            Family::Hold => "hold",
            Family::Return => "return",
        }
    }

    fn moves_object(self) -> bool {
        matches!(self, Family::Push | Family::Pull)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::UnknownFamily(String::from(s)))
    }
}

/// Tunable constants shared by every family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvParams {
    pub success_radius: f64,
    pub goal_radius_min: f64,
    pub goal_radius_max: f64,
    pub horizon: usize,
    pub gamma: f64,
}

impl Default for EnvParams {
    fn default() -> Self {
        EnvParams {
            success_radius: 0.05,
            goal_radius_min: 0.3,
            goal_radius_max: 0.7,
            horizon: 100,
            gamma: 0.99,
        }
    }
}

impl EnvParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.success_radius > 0.0
            && 0.0 <= self.goal_radius_min
            && self.goal_radius_min <= self.goal_radius_max
            && self.goal_radius_max < ARENA
            && self.horizon > 0
            && (0.0..=1.0).contains(&self.gamma);
        if ok {
            Ok(())
        } else {
            Err(Error::contract(format!("invalid environment parameters {self:?}")))
        }
    }
}

/// A sampled task instance. Everything except `family` is hidden from the
/// agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: Family,
    pub goal: [f64; 2],
    pub object_start: [f64; 2],
    pub hazard_center: [f64; 2],
    pub seed: u64,
}

impl TaskSpec {
    /// Task with hidden parameters derived from `goal` for `family`. The
    /// object start is drawn from `rng` independently of the goal.
    pub fn new(family: Family, goal: [f64; 2], rng: &mut Prng) -> Self {
        let object_start = match family {
            Family::Push => polar(rng, 0.1, 0.2),
            Family::Pull => polar(rng, 0.75, 0.9),
            _ => [0.0, 0.0],
        };
        TaskSpec {
            family,
            goal,
            object_start,
            hazard_center: [0.6 * goal[0], 0.6 * goal[1]],
            seed: rand::Rng::random(rng),
        }
    }
}

fn polar(rng: &mut Prng, r_min: f64, r_max: f64) -> [f64; 2] {
    // Area-uniform on the annulus.
    let r = libm::sqrt(rng::uniform(rng, r_min * r_min, r_max * r_max));
    let theta = rng::uniform(rng, 0.0, 2.0 * core::f64::consts::PI);
    [r * libm::cos(theta), r * libm::sin(theta)]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    libm::hypot(a[0] - b[0], a[1] - b[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DistributionMode {
    /// One family; train and test use disjoint finite goal sets.
    SingleFamily {
        family: Family,
        train_goals: Vec<[f64; 2]>,
        test_goals: Vec<[f64; 2]>,
    },
    /// Disjoint train and test family sets, goals drawn continuously.
    MultiFamily { train: Vec<Family>, test: Vec<Family> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDistribution {
    pub mode: DistributionMode,
    pub params: EnvParams,
}

impl TaskDistribution {
    /// Parametric-variation mode: `n_goals` train and `n_goals` test goals
    /// drawn from the annulus with `seed`.
    pub fn single_family(family: Family, n_goals: usize, seed: u64, params: EnvParams) -> Result<Self> {
        params.validate()?;
        if n_goals == 0 {
            return Err(Error::contract("single-family mode needs at least one goal per split"));
        }
        let mut rng = rng::seeded(seed);
        let mut draw = |n| {
            (0..n)
                .map(|_| polar(&mut rng, params.goal_radius_min, params.goal_radius_max))
                .collect::<Vec<_>>()
        };
        let train_goals = draw(n_goals);
        let test_goals = draw(n_goals);
        if test_goals.iter().any(|g| train_goals.contains(g)) {
            return Err(Error::contract("train and test goal sets overlap"));
        }
        Ok(TaskDistribution {
            mode: DistributionMode::SingleFamily {
                family,
                train_goals,
                test_goals,
            },
            params,
        })
    }

    pub fn multi_family(train: Vec<Family>, test: Vec<Family>, params: EnvParams) -> Result<Self> {
        params.validate()?;
        if let Some(f) = train.iter().find(|f| test.contains(f)) {
            return Err(Error::contract(format!("family {f} is in both train and test splits")));
        }
        Ok(TaskDistribution {
            mode: DistributionMode::MultiFamily { train, test },
            params,
        })
    }

    pub fn families(&self, split: Split) -> Vec<Family> {
        match (&self.mode, split) {
            (DistributionMode::SingleFamily { family, .. }, _) => alloc::vec![*family],
            (DistributionMode::MultiFamily { train, .. }, Split::Train) => train.clone(),
            (DistributionMode::MultiFamily { test, .. }, Split::Test) => test.clone(),
        }
    }

    /// A task of a given family from `split`, hidden parameters drawn as in
    /// [`TaskDistribution::sample_task`].
    pub fn sample_family_task(&self, family: Family, split: Split, rng: &mut Prng) -> Result<TaskSpec> {
        if !self.families(split).contains(&family) {
            return Err(Error::contract(format!(
                "{family} is not in the {} split",
                split.name()
            )));
        }
        match &self.mode {
            DistributionMode::SingleFamily { .. } => self.sample_task(split, rng),
            DistributionMode::MultiFamily { .. } => {
                let goal = polar(rng, self.params.goal_radius_min, self.params.goal_radius_max);
                Ok(TaskSpec::new(family, goal, rng))
            }
        }
    }

    /// Uniform family from the split, then uniform hidden parameters.
    pub fn sample_task(&self, split: Split, rng: &mut Prng) -> Result<TaskSpec> {
        match &self.mode {
            DistributionMode::SingleFamily {
                family,
                train_goals,
                test_goals,
            } => {
                let goals = match split {
                    Split::Train => train_goals,
                    Split::Test => test_goals,
                };
                if goals.is_empty() {
                    return Err(Error::contract(format!("{} split has no goals", split.name())));
                }
                let goal = goals[rng::index(rng, goals.len())];
                Ok(TaskSpec::new(*family, goal, rng))
            }
            DistributionMode::MultiFamily { train, test } => {
                let fams = match split {
                    Split::Train => train,
                    Split::Test => test,
                };
                if fams.is_empty() {
                    return Err(Error::contract(format!("{} split has no families", split.name())));
                }
                let family = fams[rng::index(rng, fams.len())];
                let goal = polar(rng, self.params.goal_radius_min, self.params.goal_radius_max);
                Ok(TaskSpec::new(family, goal, rng))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: [f64; STATE_DIM],
    pub reward: f64,
    pub done: bool,
    pub success: bool,
}

/// One running episode of a task.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMassEnv {
    task: TaskSpec,
    params: EnvParams,
    agent: [f64; 2],
    velocity: [f64; 2],
    object: [f64; 2],
    start: [f64; 2],
    steps: usize,
    returning: bool,
    hold_count: usize,
}

impl PointMassEnv {
    /// Start an episode: agent uniformly within `START_RADIUS` of the origin,
    /// at rest, object at the task's start position.
    pub fn reset(task: &TaskSpec, params: &EnvParams, rng: &mut Prng) -> (Self, [f64; STATE_DIM]) {
        let start = polar(rng, 0.0, START_RADIUS);
        let env = PointMassEnv {
            task: *task,
            params: *params,
            agent: start,
            velocity: [0.0, 0.0],
            object: task.object_start,
            start,
            steps: 0,
            returning: false,
            hold_count: 0,
        };
        let obs = env.observation();
        (env, obs)
    }

    pub fn observation(&self) -> [f64; STATE_DIM] {
        [
            self.agent[0],
            self.agent[1],
            self.object[0],
            self.object[1],
            self.velocity[0],
            self.velocity[1],
        ]
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn agent(&self) -> [f64; 2] {
        self.agent
    }

    pub fn velocity(&self) -> [f64; 2] {
        self.velocity
    }

    pub fn object(&self) -> [f64; 2] {
        self.object
    }

    pub fn start(&self) -> [f64; 2] {
        self.start
    }

    pub fn is_returning(&self) -> bool {
        self.returning
    }

    /// Advance one step. Actions outside the box are clamped.
    pub fn step(&mut self, action: &[f64]) -> StepOutcome {
        let a = [
            action.first().copied().unwrap_or(0.0).clamp(-1.0, 1.0),
            action.get(1).copied().unwrap_or(0.0).clamp(-1.0, 1.0),
        ];
        let before = self.agent;
        let mut v = [
            DAMPING * self.velocity[0] + DT * a[0],
            DAMPING * self.velocity[1] + DT * a[1],
        ];
        let speed = libm::hypot(v[0], v[1]);
        if speed > MAX_SPEED {
            v = [v[0] * MAX_SPEED / speed, v[1] * MAX_SPEED / speed];
        }
        for axis in 0..2 {
            let p = self.agent[axis] + DT * v[axis];
            if p.abs() > ARENA {
                self.agent[axis] = p.clamp(-ARENA, ARENA);
                v[axis] = 0.0;
            } else {
                self.agent[axis] = p;
            }
        }
        self.velocity = v;
        if self.task.family.moves_object() && dist(before, self.object) < CONTACT_RADIUS {
            for axis in 0..2 {
                self.object[axis] = (self.object[axis] + self.agent[axis] - before[axis]).clamp(-ARENA, ARENA);
            }
        }
        self.steps += 1;

        let r = self.params.success_radius;
        let goal = self.task.goal;
        let (reward, success) = match self.task.family {
            Family::Reach => {
                let d = dist(self.agent, goal);
                (-d, d < r)
            }
            Family::Push | Family::Pull => {
                let d = dist(self.object, goal);
                (-d, d < r)
            }
            Family::AvoidReach => {
                let d = dist(self.agent, goal);
                let inside = dist(self.agent, self.task.hazard_center) < HAZARD_RADIUS;
                (-d - if inside { HAZARD_PENALTY } else { 0.0 }, d < r)
            }
            Family::Hold => {
                let d = dist(self.agent, goal);
                self.hold_count = if d < r { self.hold_count + 1 } else { 0 };
                (-d, self.hold_count >= HOLD_STEPS)
            }
            Family::Return => {
                if !self.returning && dist(self.agent, goal) < r {
                    self.returning = true;
                }
                if self.returning {
                    let d = dist(self.agent, self.start);
                    (-d, d < r)
                } else {
                    (-dist(self.agent, goal) - dist(goal, self.start), false)
                }
            }
        };
        StepOutcome {
            observation: self.observation(),
            reward,
            done: success || self.steps >= self.params.horizon,
            success,
        }
    }

    /// Privileged controller that knows the hidden task parameters.
    pub fn scripted_action(&self) -> [f64; 2] {
        let r = self.params.success_radius;
        let target = match self.task.family {
            Family::Reach | Family::Hold => self.task.goal,
            Family::AvoidReach => {
                let c = self.task.hazard_center;
                let to_goal = sub(self.task.goal, self.agent);
                let to_c = sub(c, self.agent);
                let len = libm::hypot(to_goal[0], to_goal[1]).max(1e-9);
                let along = (to_c[0] * to_goal[0] + to_c[1] * to_goal[1]) / len;
                let perp = (to_c[0] * to_goal[1] - to_c[1] * to_goal[0]) / len;
                let blocked = along > 0.0 && along < len && perp.abs() < HAZARD_RADIUS + 0.04;
                if blocked {
                    // Side-step perpendicular to the hazard centre.
                    let n = [-to_goal[1] / len, to_goal[0] / len];
                    let side = if perp > 0.0 { -1.0 } else { 1.0 };
                    let off = HAZARD_RADIUS + 0.08;
                    [c[0] + side * n[0] * off, c[1] + side * n[1] * off]
                } else {
                    self.task.goal
                }
            }
            Family::Return => {
                if self.returning {
                    self.start
                } else {
                    self.task.goal
                }
            }
            Family::Push | Family::Pull => {
                if dist(self.agent, self.object) < CONTACT_RADIUS * 0.8 {
                    let offset = sub(self.agent, self.object);
                    [self.task.goal[0] + offset[0], self.task.goal[1] + offset[1]]
                } else {
                    self.object
                }
            }
        };
        let err = sub(target, self.agent);
        // Critically-damped-ish PD; gains tuned for dt=0.1, damping 0.9.
        let gain = if libm::hypot(err[0], err[1]) < 2.0 * r {
            6.0
        } else {
            4.0
        };
        [
            (gain * err[0] - 1.5 * self.velocity[0]).clamp(-1.0, 1.0),
            (gain * err[1] - 1.5 * self.velocity[1]).clamp(-1.0, 1.0),
        ]
    }
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

/// Σ γᵗ rₜ over one episode's rewards.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
}
