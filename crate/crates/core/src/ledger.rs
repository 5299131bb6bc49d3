//! Episode-indexed record of a run: policies, trajectories, pseudo-regret and
//! whatever per-epoch model-selection state the algorithm produced.

use serde::{Deserialize, Serialize};

use crate::mdp::{policy_value, value_iteration, EpisodicMdp, Policy, Trajectory};

/// Which part of an algorithm produced an episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Base,
    Regret,
    Support,
    Norm,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Base => "base",
            Phase::Regret => "regret",
            Phase::Support => "support",
            Phase::Norm => "norm",
        }
    }
}

/// Algorithm-side annotations attached to one episode.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeInfo {
    pub epoch: usize,
    pub phase: Option<Phase>,
    /// 1-based model class used for planning (finite families).
    pub selected_class: Option<usize>,
    /// Active coordinates of a restricted linear learner.
    pub active_coords: Option<Vec<usize>>,
    pub b_estimate: Option<f64>,
    pub beta: f64,
    pub lambda_min: Option<f64>,
    /// Members of the confidence set used for planning (finite families).
    pub members: Option<Vec<usize>>,
    /// Whether the true parameter lies in the ellipsoid after the episode.
    pub theta_covered: Option<bool>,
    /// `V_{h+1}` vectors used as regression targets, one per step.
    pub next_values: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub policy: Policy,
    pub trajectory: Trajectory,
    pub optimal_value: f64,
    pub policy_value: f64,
    pub instant_regret: f64,
    pub cum_regret: f64,
    pub info: EpisodeInfo,
}

/// Per-epoch model-selection record of the general algorithm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub epoch: usize,
    pub first_episode: usize,
    pub episodes: usize,
    pub delta: f64,
    /// `T_1 .. T_M`; empty for the data-free first epoch.
    pub statistics: Vec<f64>,
    pub gamma: Option<f64>,
    /// 1-based selected class.
    pub selected: usize,
    pub anomaly: bool,
}

/// Per-epoch support estimate of the dimension-adaptive algorithm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportRecord {
    pub epoch: usize,
    pub first_episode: usize,
    pub regret_episodes: usize,
    pub support_episodes: usize,
    pub threshold: f64,
    pub active: Vec<usize>,
    pub sup_norm_error: f64,
    pub exact_support: bool,
    pub anomaly: bool,
}

/// Per-epoch norm estimate of the norm-adaptive algorithm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormRecord {
    pub epoch: usize,
    pub first_episode: usize,
    pub episodes: usize,
    pub delta: f64,
    pub b_estimate: f64,
    pub next_b_estimate: f64,
    pub theta_hat_norm: f64,
    pub radius: f64,
    pub theta_in_final_ellipsoid: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub optimal_value: f64,
    pub records: Vec<EpisodeRecord>,
    pub selections: Vec<SelectionRecord>,
    pub supports: Vec<SupportRecord>,
    pub norms: Vec<NormRecord>,
    /// Confidence-set members after the final episode (finite families).
    pub final_members: Option<Vec<usize>>,
}

impl RunLedger {
    /// Starts an empty ledger; `V*_1(s_1)` is computed once under the true kernel.
    pub fn new(mdp: &EpisodicMdp) -> Self {
        let (v, _) = value_iteration(&mdp.kernel, &mdp.reward, mdp.horizon);
        Self {
            optimal_value: v.v(0)[mdp.initial_state],
            records: Vec::new(),
            selections: Vec::new(),
            supports: Vec::new(),
            norms: Vec::new(),
            final_members: None,
        }
    }

    pub fn episodes(&self) -> usize {
        self.records.len()
    }

    pub fn cum_regret(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.cum_regret)
    }

    /// Cumulative regret after each episode.
    pub fn regret_curve(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.cum_regret).collect()
    }

    /// Appends the pseudo-regret `V*_1(s_1) - V^pi_1(s_1)` of `policy`.
    pub fn record_regret(&mut self, mdp: &EpisodicMdp, policy: Policy, trajectory: Trajectory, info: EpisodeInfo) -> f64 {
        let achieved = policy_value(&mdp.kernel, &mdp.reward, &policy).v(0)[mdp.initial_state];
        // DP round-off can put an optimal policy a hair above V*
        let gap = (self.optimal_value - achieved).max(0.0);
        let cum = self.cum_regret() + gap;
        self.records.push(EpisodeRecord {
            episode: self.records.len(),
            policy,
            trajectory,
            optimal_value: self.optimal_value,
            policy_value: achieved,
            instant_regret: gap,
            cum_regret: cum,
            info,
        });
        gap
    }
}

/// Where a per-epoch "correct" flag first holds for `run` consecutive epochs,
/// and how often it fails afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LockIn {
    /// Index into the flag sequence of the first epoch of the run.
    pub index: Option<usize>,
    pub deviations: usize,
}

impl LockIn {
    pub fn held(&self) -> bool {
        self.index.is_some() && self.deviations == 0
    }
}

pub fn lock_in(flags: &[bool], run: usize) -> LockIn {
    let run = run.max(1);
    let index = (0..flags.len()).find(|&i| i + run <= flags.len() && flags[i..i + run].iter().all(|&f| f));
    let deviations = index.map_or(0, |i| flags[i..].iter().filter(|&&f| !f).count());
    LockIn { index, deviations }
}
