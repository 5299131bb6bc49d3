//! Value-targeted regression over a finite kernel family, the finite-class
//! confidence set, and the optimistic base learner built on them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ledger::{EpisodeInfo, Phase, RunLedger};
use crate::mdp::{sample_episode, value_iteration, EpisodicMdp, Policy, Rewards, Trajectory, TransitionKernel, ValueTable};

/// One regression tuple `(s_h, a_h, V_{h+1}, V_{h+1}(s_{h+1}))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VtrRecord {
    pub state: usize,
    pub action: usize,
    pub value: Vec<f64>,
    pub target: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VtrDataset {
    pub records: Vec<VtrRecord>,
    pub episodes: usize,
}

impl VtrDataset {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the `H` tuples of one episode. `next_values[h]` is the value
    /// vector `V_{h+1}` that was planned against at step `h`.
    pub fn push_episode(&mut self, trajectory: &Trajectory, next_values: &[Vec<f64>]) -> &[VtrRecord] {
        let start = self.records.len();
        for (step, v) in trajectory.steps.iter().zip(next_values) {
            self.records.push(VtrRecord {
                state: step.state,
                action: step.action,
                value: v.clone(),
                target: v[step.next_state],
            });
        }
        self.episodes += 1;
        &self.records[start..]
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// `L(P) = sum (y - (P V)(s, a))^2` over the dataset.
pub fn empirical_loss(data: &VtrDataset, kernel: &TransitionKernel) -> f64 {
    data.records
        .iter()
        .map(|r| {
            let e = r.target - kernel.expect(r.state, r.action, &r.value);
            e * e
        })
        .sum()
}

/// `L(P, Q) = sum ((P V)(s, a) - (Q V)(s, a))^2` over the dataset.
pub fn pairwise_loss(data: &VtrDataset, p: &TransitionKernel, q: &TransitionKernel) -> f64 {
    data.records
        .iter()
        .map(|r| {
            let e = p.expect(r.state, r.action, &r.value) - q.expect(r.state, r.action, &r.value);
            e * e
        })
        .sum()
}

/// Index of the loss minimizer; ties go to the lowest index.
pub fn fit_kernel(data: &VtrDataset, family: &[TransitionKernel]) -> usize {
    argmin(family.iter().map(|k| empirical_loss(data, k)))
}

pub(crate) fn argmin(values: impl Iterator<Item = f64>) -> usize {
    let mut best = f64::INFINITY;
    let mut best_i = 0;
    for (i, x) in values.enumerate() {
        if x < best {
            best = x;
            best_i = i;
        }
    }
    best_i
}

/// Finite-class width `8 H^2 log(|P| / delta)`.
pub fn beta_finite(family_size: usize, horizon: usize, delta: f64) -> f64 {
    let h = horizon as f64;
    8.0 * h * h * (family_size as f64 / delta).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteConfidenceSet {
    pub member_flags: Vec<bool>,
    pub center: usize,
    pub width: f64,
}

impl FiniteConfidenceSet {
    pub fn members(&self) -> Vec<usize> {
        self.member_flags.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i).collect()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.member_flags.get(index).copied().unwrap_or(false)
    }

    fn from_losses(center: usize, width: f64, pair_to_center: impl Iterator<Item = f64>) -> Self {
        let mut member_flags: Vec<bool> = pair_to_center.map(|l| l <= width).collect();
        member_flags[center] = true;
        Self {
            member_flags,
            center,
            width,
        }
    }
}

/// Confidence set computed directly from the dataset.
pub fn build_confidence_set(data: &VtrDataset, family: &[TransitionKernel], horizon: usize, delta: f64) -> FiniteConfidenceSet {
    let center = fit_kernel(data, family);
    let width = beta_finite(family.len(), horizon, delta);
    FiniteConfidenceSet::from_losses(center, width, family.iter().map(|k| pairwise_loss(data, k, &family[center])))
}

/// Plans with the member whose optimal initial value is largest (ties to the
/// lowest index) and returns its index, value tables and greedy policy.
pub fn optimistic_plan(
    set: &FiniteConfidenceSet,
    family: &[TransitionKernel],
    reward: &Rewards,
    horizon: usize,
    initial_state: usize,
) -> (usize, ValueTable, Policy) {
    let mut best: Option<(usize, ValueTable, Policy)> = None;
    for i in set.members() {
        let (v, pi) = value_iteration(&family[i], reward, horizon);
        if best.as_ref().is_none_or(|(_, bv, _)| v.v(0)[initial_state] > bv.v(0)[initial_state]) {
            best = Some((i, v, pi));
        }
    }
    best.expect("confidence set has at least one member")
}

/// Running losses of every pool kernel, updated one record at a time so
/// confidence sets for any prefix family cost `O(|family|)`.
#[derive(Clone, Debug)]
pub struct LossCache {
    n: usize,
    point: Vec<f64>,
    pair: Vec<f64>,
    preds: Vec<f64>,
}

impl LossCache {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            point: vec![0.0; n],
            pair: vec![0.0; n * n],
            preds: vec![0.0; n],
        }
    }

    pub fn add(&mut self, pool: &[TransitionKernel], r: &VtrRecord) {
        for (p, k) in self.preds.iter_mut().zip(pool) {
            *p = k.expect(r.state, r.action, &r.value);
        }
        for i in 0..self.n {
            let e = r.target - self.preds[i];
            self.point[i] += e * e;
            for j in 0..self.n {
                let g = self.preds[i] - self.preds[j];
                self.pair[i * self.n + j] += g * g;
            }
        }
    }

    pub fn loss(&self, i: usize) -> f64 {
        self.point[i]
    }

    pub fn pair_loss(&self, i: usize, j: usize) -> f64 {
        self.pair[i * self.n + j]
    }

    /// Minimizer over the first `len` pool kernels.
    pub fn fit(&self, len: usize) -> usize {
        argmin(self.point[..len].iter().copied())
    }

    pub fn confidence_set(&self, len: usize, width: f64) -> FiniteConfidenceSet {
        let center = self.fit(len);
        FiniteConfidenceSet::from_losses(center, width, (0..len).map(|i| self.pair_loss(i, center)))
    }
}

/// UCRL-VTR state over a kernel pool whose prefixes are the candidate
/// families. Optimal plans of every pool kernel are cached up front.
#[derive(Clone, Debug)]
pub struct VtrLearner<'a> {
    pool: &'a [TransitionKernel],
    plans: Vec<(ValueTable, Policy)>,
    data: VtrDataset,
    cache: LossCache,
}

impl<'a> VtrLearner<'a> {
    pub fn new(mdp: &EpisodicMdp, pool: &'a [TransitionKernel]) -> Self {
        let plans = pool.iter().map(|k| value_iteration(k, &mdp.reward, mdp.horizon)).collect();
        Self {
            pool,
            plans,
            data: VtrDataset::new(),
            cache: LossCache::new(pool.len()),
        }
    }

    pub fn data(&self) -> &VtrDataset {
        &self.data
    }

    pub fn cache(&self) -> &LossCache {
        &self.cache
    }

    pub fn confidence_set(&self, family_len: usize, horizon: usize, delta: f64) -> FiniteConfidenceSet {
        self.cache.confidence_set(family_len, beta_finite(family_len, horizon, delta))
    }

    /// One episode on the family `pool[..family_len]`: plan optimistically
    /// from the current set, act, then absorb the new tuples.
    pub fn play_episode<R: Rng + ?Sized>(
        &mut self,
        mdp: &EpisodicMdp,
        family_len: usize,
        delta: f64,
        rng: &mut R,
        ledger: &mut RunLedger,
        mut info: EpisodeInfo,
    ) {
        let set = self.confidence_set(family_len, mdp.horizon, delta);
        let s1 = mdp.initial_state;
        let mut chosen = None;
        for i in set.members() {
            let v = self.plans[i].0.v(0)[s1];
            if chosen.is_none_or(|(_, best)| v > best) {
                chosen = Some((i, v));
            }
        }
        let (idx, _) = chosen.expect("center is always a member");
        let (values, policy) = &self.plans[idx];
        let next_values: Vec<Vec<f64>> = (1..=mdp.horizon).map(|h| values.v(h).to_vec()).collect();

        let trajectory = sample_episode(mdp, policy, ledger.episodes(), rng);
        for r in self.data.push_episode(&trajectory, &next_values) {
            self.cache.add(self.pool, r);
        }
        info.beta = set.width;
        info.members = Some(set.members());
        info.next_values = next_values;
        if info.phase.is_none() {
            info.phase = Some(Phase::Base);
        }
        ledger.record_regret(mdp, policy.clone(), trajectory, info);
    }
}

/// Runs UCRL-VTR on `family` for `episodes` episodes at confidence `delta`.
pub fn run_ucrl_vtr<R: Rng + ?Sized>(
    mdp: &EpisodicMdp,
    family: &[TransitionKernel],
    episodes: usize,
    delta: f64,
    rng: &mut R,
    mut ledger: RunLedger,
) -> RunLedger {
    let mut learner = VtrLearner::new(mdp, family);
    for _ in 0..episodes {
        learner.play_episode(mdp, family.len(), delta, rng, &mut ledger, EpisodeInfo::default());
    }
    ledger.final_members = Some(learner.confidence_set(family.len(), mdp.horizon, delta).members());
    ledger
}
