//! Finite episodic MDPs, exact dynamic programming and trajectory sampling.
//!
//! States and actions are dense indices. Steps are zero-based internally:
//! step `h` in `0..horizon` is the one-based step `h + 1`, and value tables
//! carry one extra terminal row (`h == horizon`) that is identically zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when checking that kernel rows are probability vectors.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// A row-stochastic table `(s, a) -> distribution over next states`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KernelDoc", into = "KernelDoc")]
pub struct TransitionKernel {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct KernelDoc {
    n_states: usize,
    n_actions: usize,
    /// One row per `(s, a)` pair, ordered `s * n_actions + a`.
    rows: Vec<Vec<f64>>,
}

impl TryFrom<KernelDoc> for TransitionKernel {
    type Error = Error;
    fn try_from(doc: KernelDoc) -> Result<Self> {
        TransitionKernel::from_rows(doc.n_states, doc.n_actions, doc.rows)
    }
}

impl From<TransitionKernel> for KernelDoc {
    fn from(k: TransitionKernel) -> Self {
        let rows = k.probs.chunks(k.n_states).map(<[f64]>::to_vec).collect();
        KernelDoc {
            n_states: k.n_states,
            n_actions: k.n_actions,
            rows,
        }
    }
}

impl TransitionKernel {
    /// Builds a kernel from `n_states * n_actions` rows. Rows are normalized;
    /// negative, non-finite or all-zero rows are rejected.
    pub fn from_rows(n_states: usize, n_actions: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidKernel("empty state or action space".into()));
        }
        if rows.len() != n_states * n_actions {
            return Err(Error::Dimension(format!(
                "expected {} kernel rows, got {}",
                n_states * n_actions,
                rows.len()
            )));
        }
        let mut probs = Vec::with_capacity(n_states * n_states * n_actions);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != n_states {
                return Err(Error::Dimension(format!(
                    "row {i} has {} entries, expected {n_states}",
                    row.len()
                )));
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::InvalidKernel(format!("row {i} has a negative or non-finite entry")));
            }
            let total: f64 = row.iter().sum();
            if total <= 0.0 {
                return Err(Error::InvalidKernel(format!("row {i} has zero mass")));
            }
            probs.extend(row.iter().map(|p| p / total));
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    /// Kernel where every `(s, a)` moves deterministically to `targets[s * A + a]`.
    pub fn deterministic(n_states: usize, n_actions: usize, targets: &[usize]) -> Result<Self> {
        let rows = targets
            .iter()
            .map(|&t| {
                let mut row = vec![0.0; n_states];
                if t < n_states {
                    row[t] = 1.0;
                }
                row
            })
            .collect();
        Self::from_rows(n_states, n_actions, rows)
    }

    /// Rows drawn from a flat Dirichlet distribution.
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, rng: &mut R) -> Self {
        let rows = (0..n_states * n_actions)
            .map(|_| {
                (0..n_states)
                    .map(|_| -(1.0 - rng.random::<f64>()).ln())
                    .collect()
            })
            .collect();
        Self::from_rows(n_states, n_actions, rows).expect("exponential draws are positive")
    }

    /// Rows with weights `e^sharpness` for exponential `e`; larger
    /// `sharpness` concentrates mass on fewer next states.
    pub fn random_peaked<R: Rng + ?Sized>(n_states: usize, n_actions: usize, sharpness: f64, rng: &mut R) -> Self {
        let rows = (0..n_states * n_actions)
            .map(|_| {
                (0..n_states)
                    .map(|_| (-(1.0 - rng.random::<f64>()).ln()).powf(sharpness) + 1e-12)
                    .collect()
            })
            .collect();
        Self::from_rows(n_states, n_actions, rows).expect("positive weights")
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.probs[start..start + self.n_states]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks(self.n_states)
    }

    /// `(P V)(s, a)`: the expected value of `v` at the next state.
    #[inline]
    pub fn expect(&self, s: usize, a: usize, v: &[f64]) -> f64 {
        self.row(s, a).iter().zip(v).map(|(p, x)| p * x).sum()
    }

    /// Largest total-variation distance between matching rows.
    pub fn max_tv_distance(&self, other: &TransitionKernel) -> f64 {
        self.rows()
            .zip(other.rows())
            .map(|(p, q)| 0.5 * p.iter().zip(q).map(|(x, y)| (x - y).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Largest absolute deviation of a row sum from one.
    pub fn max_row_sum_error(&self) -> f64 {
        self.rows()
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Deterministic reward table `(s, a) -> [0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RewardDoc", into = "RewardDoc")]
pub struct Rewards {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RewardDoc {
    /// `table[s][a]`
    table: Vec<Vec<f64>>,
}

impl TryFrom<RewardDoc> for Rewards {
    type Error = Error;
    fn try_from(doc: RewardDoc) -> Result<Self> {
        Rewards::from_table(doc.table)
    }
}

impl From<Rewards> for RewardDoc {
    fn from(r: Rewards) -> Self {
        RewardDoc {
            table: r.values.chunks(r.n_actions).map(<[f64]>::to_vec).collect(),
        }
    }
}

impl Rewards {
    pub fn from_table(table: Vec<Vec<f64>>) -> Result<Self> {
        let n_states = table.len();
        let n_actions = table.first().map_or(0, Vec::len);
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidReward("empty reward table".into()));
        }
        let mut values = Vec::with_capacity(n_states * n_actions);
        for (s, row) in table.into_iter().enumerate() {
            if row.len() != n_actions {
                return Err(Error::Dimension(format!("reward row {s} has {} actions", row.len())));
            }
            if let Some(x) = row.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                return Err(Error::InvalidReward(format!("r({s}, .) = {x} outside [0, 1]")));
            }
            values.extend(row);
        }
        Ok(Self {
            n_states,
            n_actions,
            values,
        })
    }

    pub fn constant(n_states: usize, n_actions: usize, value: f64) -> Result<Self> {
        Self::from_table(vec![vec![value; n_actions]; n_states])
    }

    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, rng: &mut R) -> Self {
        let table = (0..n_states)
            .map(|_| (0..n_actions).map(|_| rng.random::<f64>()).collect())
            .collect();
        Self::from_table(table).expect("uniform draws lie in [0, 1]")
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
}

/// A nonstationary deterministic policy `(h, s) -> a`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    horizon: usize,
    n_states: usize,
    actions: Vec<usize>,
}

impl Policy {
    pub fn new(horizon: usize, n_states: usize, actions: Vec<usize>) -> Result<Self> {
        if actions.len() != horizon * n_states {
            return Err(Error::Dimension(format!(
                "policy needs {} entries, got {}",
                horizon * n_states,
                actions.len()
            )));
        }
        Ok(Self {
            horizon,
            n_states,
            actions,
        })
    }

    /// The policy that plays `action` everywhere.
    pub fn constant(horizon: usize, n_states: usize, action: usize) -> Self {
        Self {
            horizon,
            n_states,
            actions: vec![action; horizon * n_states],
        }
    }

    #[inline]
    pub fn action(&self, h: usize, s: usize) -> usize {
        self.actions[h * self.n_states + s]
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }

    pub fn validate(&self, n_actions: usize) -> Result<()> {
        match self.actions.iter().find(|&&a| a >= n_actions) {
            Some(a) => Err(Error::Dimension(format!("policy action {a} out of range"))),
            None => Ok(()),
        }
    }
}

/// State values for steps `0..=horizon` plus the matching action values.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueTable {
    horizon: usize,
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
    q: Vec<f64>,
}

impl ValueTable {
    pub fn zeros(horizon: usize, n_states: usize, n_actions: usize) -> Self {
        Self {
            horizon,
            n_states,
            n_actions,
            values: vec![0.0; (horizon + 1) * n_states],
            q: vec![0.0; horizon * n_states * n_actions],
        }
    }

    /// Value vector over states at step `h` (`h == horizon` is the zero row).
    #[inline]
    pub fn v(&self, h: usize) -> &[f64] {
        &self.values[h * self.n_states..(h + 1) * self.n_states]
    }

    #[inline]
    pub fn v_mut(&mut self, h: usize) -> &mut [f64] {
        &mut self.values[h * self.n_states..(h + 1) * self.n_states]
    }

    #[inline]
    pub fn q(&self, h: usize, s: usize, a: usize) -> f64 {
        self.q[(h * self.n_states + s) * self.n_actions + a]
    }

    #[inline]
    pub fn set_q(&mut self, h: usize, s: usize, a: usize, x: f64) {
        self.q[(h * self.n_states + s) * self.n_actions + a] = x;
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn all_values(&self) -> &[f64] {
        &self.values
    }
}

/// A finite-horizon MDP with a fixed initial state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodicMdp {
    pub horizon: usize,
    pub initial_state: usize,
    pub reward: Rewards,
    pub kernel: TransitionKernel,
}

impl EpisodicMdp {
    pub fn new(horizon: usize, initial_state: usize, reward: Rewards, kernel: TransitionKernel) -> Result<Self> {
        let mdp = Self {
            horizon,
            initial_state,
            reward,
            kernel,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    /// Uniform rewards and Dirichlet rows, starting from state 0.
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, horizon: usize, rng: &mut R) -> Self {
        let reward = Rewards::random(n_states, n_actions, rng);
        let kernel = TransitionKernel::random(n_states, n_actions, rng);
        Self {
            horizon,
            initial_state: 0,
            reward,
            kernel,
        }
    }

    /// Instance with polarized rewards (near 0 or near 1) and sparse-ish
    /// rows, so value functions vary strongly across states.
    pub fn random_peaked<R: Rng + ?Sized>(n_states: usize, n_actions: usize, horizon: usize, rng: &mut R) -> Self {
        let table = (0..n_states)
            .map(|_| {
                (0..n_actions)
                    .map(|_| {
                        let u: f64 = rng.random::<f64>() * 0.2;
                        if rng.random::<bool>() {
                            1.0 - u
                        } else {
                            u
                        }
                    })
                    .collect()
            })
            .collect();
        let reward = Rewards::from_table(table).expect("rewards in [0, 1]");
        let kernel = TransitionKernel::random_peaked(n_states, n_actions, 3.0, rng);
        Self {
            horizon,
            initial_state: 0,
            reward,
            kernel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Dimension("horizon must be positive".into()));
        }
        if self.reward.n_states() != self.kernel.n_states() || self.reward.n_actions() != self.kernel.n_actions() {
            return Err(Error::Dimension("reward and kernel shapes differ".into()));
        }
        if self.initial_state >= self.n_states() {
            return Err(Error::Dimension(format!("initial state {} out of range", self.initial_state)));
        }
        if self.kernel.max_row_sum_error() > ROW_SUM_TOL {
            return Err(Error::InvalidKernel("row sums deviate from 1".into()));
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.kernel.n_states()
    }

    pub fn n_actions(&self) -> usize {
        self.kernel.n_actions()
    }

    /// Same rewards and horizon, different dynamics.
    pub fn with_kernel(&self, kernel: TransitionKernel) -> Self {
        Self {
            kernel,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mdp: Self = serde_json::from_str(text)?;
        mdp.validate()?;
        Ok(mdp)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub episode: usize,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// Inverse-CDF draw from a probability row.
#[inline]
pub(crate) fn sample_index<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the last cumulative sum
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

/// Plays one episode of `policy` from the fixed initial state.
pub fn sample_episode<R: Rng + ?Sized>(mdp: &EpisodicMdp, policy: &Policy, episode: usize, rng: &mut R) -> Trajectory {
    let mut steps = Vec::with_capacity(mdp.horizon);
    let mut s = mdp.initial_state;
    for h in 0..mdp.horizon {
        let a = policy.action(h, s);
        let next = sample_index(mdp.kernel.row(s, a), rng);
        steps.push(Step {
            state: s,
            action: a,
            reward: mdp.reward.get(s, a),
            next_state: next,
        });
        s = next;
    }
    Trajectory { episode, steps }
}

/// Backward induction for the optimal values of `kernel`. Ties in the greedy
/// action go to the lowest index.
pub fn value_iteration(kernel: &TransitionKernel, reward: &Rewards, horizon: usize) -> (ValueTable, Policy) {
    let (ns, na) = (kernel.n_states(), kernel.n_actions());
    let mut table = ValueTable::zeros(horizon, ns, na);
    let mut actions = vec![0; horizon * ns];
    for h in (0..horizon).rev() {
        let (head, tail) = table.values.split_at_mut((h + 1) * ns);
        let next = &tail[..ns];
        let cur = &mut head[h * ns..];
        for s in 0..ns {
            let mut best = f64::NEG_INFINITY;
            let mut best_a = 0;
            for a in 0..na {
                let q = reward.get(s, a) + kernel.expect(s, a, next);
                table.q[(h * ns + s) * na + a] = q;
                if q > best {
                    best = q;
                    best_a = a;
                }
            }
            cur[s] = best;
            actions[h * ns + s] = best_a;
        }
    }
    let policy = Policy {
        horizon,
        n_states: ns,
        actions,
    };
    (table, policy)
}

/// Exact values of `policy` under `kernel`.
pub fn policy_value(kernel: &TransitionKernel, reward: &Rewards, policy: &Policy) -> ValueTable {
    let (ns, na) = (kernel.n_states(), kernel.n_actions());
    let horizon = policy.horizon();
    let mut table = ValueTable::zeros(horizon, ns, na);
    for h in (0..horizon).rev() {
        let (head, tail) = table.values.split_at_mut((h + 1) * ns);
        let next = &tail[..ns];
        let cur = &mut head[h * ns..];
        for s in 0..ns {
            for a in 0..na {
                table.q[(h * ns + s) * na + a] = reward.get(s, a) + kernel.expect(s, a, next);
            }
            cur[s] = table.q[(h * ns + s) * na + policy.action(h, s)];
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> EpisodicMdp {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        EpisodicMdp::random(3, 2, 2, &mut rng)
    }

    #[test]
    fn kernel_rejects_negative_and_normalizes() {
        assert!(TransitionKernel::from_rows(2, 1, vec![vec![0.5, -0.1], vec![1.0, 0.0]]).is_err());
        assert!(TransitionKernel::from_rows(2, 1, vec![vec![0.0, 0.0], vec![1.0, 0.0]]).is_err());
        let k = TransitionKernel::from_rows(2, 1, vec![vec![2.0, 2.0], vec![1.0, 3.0]]).unwrap();
        assert_eq!(k.row(0, 0), &[0.5, 0.5]);
        assert_eq!(k.row(1, 0), &[0.25, 0.75]);
        assert!(k.max_row_sum_error() <= ROW_SUM_TOL);
    }

    #[test]
    fn rewards_outside_unit_interval_rejected() {
        assert!(Rewards::from_table(vec![vec![1.5]]).is_err());
        assert!(Rewards::from_table(vec![vec![-0.1]]).is_err());
    }

    #[test]
    fn deterministic_kernel_forces_trajectory() {
        let kernel = TransitionKernel::deterministic(3, 2, &[1, 2, 2, 0, 0, 1]).unwrap();
        let reward = Rewards::constant(3, 2, 0.5).unwrap();
        let mdp = EpisodicMdp::new(4, 0, reward, kernel).unwrap();
        let policy = Policy::constant(4, 3, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let traj = sample_episode(&mdp, &policy, 0, &mut rng);
        let states: Vec<_> = traj.steps.iter().map(|s| s.state).collect();
        assert_eq!(states, vec![0, 1, 2, 0]);
        assert_eq!(traj.steps.last().unwrap().next_state, 1);
    }

    #[test]
    fn horizon_one_value_is_best_reward() {
        let mdp = tiny();
        let (v, pi) = value_iteration(&mdp.kernel, &mdp.reward, 1);
        for s in 0..3 {
            let best = (0..2).map(|a| mdp.reward.get(s, a)).fold(f64::MIN, f64::max);
            assert_eq!(v.v(0)[s], best);
            assert_eq!(mdp.reward.get(s, pi.action(0, s)), best);
        }
        assert!(v.v(1).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_step_episode() {
        let mdp = tiny();
        let policy = Policy::constant(1, 3, 1);
        let one = EpisodicMdp { horizon: 1, ..mdp.clone() };
        let traj = sample_episode(&one, &policy, 5, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(traj.steps.len(), 1);
        assert_eq!(traj.episode, 5);
        assert_eq!(traj.steps[0].state, 0);
        assert_eq!(traj.steps[0].reward, mdp.reward.get(0, 1));
    }

    #[test]
    fn zero_reward_gives_zero_values() {
        let mdp = tiny();
        let zero = Rewards::constant(3, 2, 0.0).unwrap();
        let (v, _) = value_iteration(&mdp.kernel, &zero, 3);
        assert!(v.all_values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn unit_reward_telescopes() {
        let mdp = tiny();
        let one = Rewards::constant(3, 2, 1.0).unwrap();
        let policy = Policy::new(3, 3, vec![0, 1, 0, 1, 1, 0, 0, 0, 1]).unwrap();
        let v = policy_value(&mdp.kernel, &one, &policy);
        for h in 0..=3 {
            for s in 0..3 {
                assert!((v.v(h)[s] - (3 - h) as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn optimal_policy_value_matches_value_iteration() {
        let mdp = tiny();
        let (v, pi) = value_iteration(&mdp.kernel, &mdp.reward, 4);
        let pv = policy_value(&mdp.kernel, &mdp.reward, &pi);
        assert_eq!(v.all_values(), pv.all_values());
    }

    #[test]
    fn json_round_trip() {
        let mdp = tiny();
        let back = EpisodicMdp::from_json(&mdp.to_json().unwrap()).unwrap();
        assert_eq!(back.horizon, mdp.horizon);
        for (a, b) in mdp.kernel.rows().zip(back.kernel.rows()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn sampler_is_deterministic_per_seed() {
        let mdp = tiny();
        let policy = Policy::constant(2, 3, 0);
        let a = sample_episode(&mdp, &policy, 0, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_episode(&mdp, &policy, 0, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }
}
