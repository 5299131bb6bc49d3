//! Linear kernel MDPs and the ridge-regression base learner.
//!
//! Transitions are `P(s'|s,a) = <phi(s,a,s'), theta*>`. The learner regresses
//! realized next-state values on integrated features `phi_V(s,a)` and plans
//! with an optimism bonus `sqrt(beta) * ||phi_V||_{Sigma^-1}`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::{EpisodeInfo, Phase, RunLedger};
use crate::mdp::{sample_episode, EpisodicMdp, Policy, Rewards, TransitionKernel, ValueTable, ROW_SUM_TOL};

/// Above this many states the exact vertex search for the feature bound is
/// replaced by the triangle-inequality bound.
pub const VERTEX_SEARCH_MAX_STATES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureProfile {
    /// Coordinates are fixed base kernels; `theta*` mixes them.
    Mixture,
    /// One coordinate per `(s, a, s')` triple; `theta*` is the kernel itself.
    Tabular,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseKernelKind {
    /// Flat Dirichlet rows.
    Random,
    /// Concentrated rows.
    Peaked,
    /// Every row is a point mass; distinct coordinates send `(s, a)` to
    /// distinct states where possible.
    Deterministic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    Uniform,
    /// Reward 1 on the first half of the states, 0 elsewhere.
    Partition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum WeightProfile {
    /// Random simplex weights, each at least `min_weight`.
    Random { min_weight: f64 },
    /// Exact weights on the support, in support order.
    Explicit { weights: Vec<f64> },
}

/// Generator parameters for [`build_linear_mdp`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearSpec {
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub d: usize,
    pub d_star: usize,
    pub profile: FeatureProfile,
    pub base: BaseKernelKind,
    pub weights: WeightProfile,
    /// Fixed support; drawn at random when absent.
    pub support: Option<Vec<usize>>,
    pub reward: RewardKind,
}

impl Default for LinearSpec {
    fn default() -> Self {
        Self {
            n_states: 4,
            n_actions: 2,
            horizon: 2,
            d: 4,
            d_star: 4,
            profile: FeatureProfile::Mixture,
            base: BaseKernelKind::Peaked,
            weights: WeightProfile::Random { min_weight: 0.1 },
            support: None,
            reward: RewardKind::Uniform,
        }
    }
}

/// A linear kernel MDP with its feature tensor and true parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearKernelMdp {
    /// Rewards, horizon, initial state and the induced kernel.
    pub base: EpisodicMdp,
    pub d: usize,
    /// `phi(s, a, s')` flattened as `((s * A + a) * S + s') * d + j`.
    pub features: Vec<f64>,
    pub theta_star: Vec<f64>,
    /// Upper bound on `||theta*||`; equal to it for generated instances.
    pub norm_bound: f64,
    /// Factor applied to the raw features so that `||phi_V|| <= 1`.
    pub feature_scale: f64,
}

/// `phi_V(s, a)` for every pair, flattened as `(s * A + a) * d + j`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub n_actions: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl FeatureTable {
    #[inline]
    pub fn get(&self, s: usize, a: usize) -> &[f64] {
        let i = (s * self.n_actions + a) * self.d;
        &self.data[i..i + self.d]
    }
}

impl LinearKernelMdp {
    /// Builds the instance and derives its kernel; rejects parameters whose
    /// induced rows are not distributions.
    pub fn new(
        reward: Rewards,
        horizon: usize,
        initial_state: usize,
        d: usize,
        features: Vec<f64>,
        theta_star: Vec<f64>,
    ) -> Result<Self> {
        let (ns, na) = (reward.n_states(), reward.n_actions());
        if features.len() != ns * na * ns * d || theta_star.len() != d {
            return Err(Error::Dimension("feature tensor or parameter has the wrong length".into()));
        }
        let kernel = induced_kernel(ns, na, d, &features, &theta_star)?;
        let base = EpisodicMdp::new(horizon, initial_state, reward, kernel)?;
        let norm_bound = norm(&theta_star);
        Ok(Self {
            base,
            d,
            features,
            theta_star,
            norm_bound,
            feature_scale: 1.0,
        })
    }

    pub fn n_states(&self) -> usize {
        self.base.n_states()
    }

    pub fn n_actions(&self) -> usize {
        self.base.n_actions()
    }

    pub fn horizon(&self) -> usize {
        self.base.horizon
    }

    #[inline]
    pub fn phi(&self, s: usize, a: usize, next: usize) -> &[f64] {
        let i = ((s * self.n_actions() + a) * self.n_states() + next) * self.d;
        &self.features[i..i + self.d]
    }

    pub fn support(&self) -> Vec<usize> {
        (0..self.d).filter(|&j| self.theta_star[j] != 0.0).collect()
    }

    pub fn d_star(&self) -> usize {
        self.support().len()
    }

    /// Smallest nonzero `|theta*(j)|`.
    pub fn gamma_min_coord(&self) -> f64 {
        self.theta_star
            .iter()
            .filter(|x| **x != 0.0)
            .fold(f64::INFINITY, |m, x| m.min(x.abs()))
    }

    /// `phi_V(s, a) = sum_{s'} phi(s, a, s') V(s')`.
    pub fn integrate_features(&self, v: &[f64]) -> FeatureTable {
        let (ns, na, d) = (self.n_states(), self.n_actions(), self.d);
        let mut data = vec![0.0; ns * na * d];
        for (sa, out) in data.chunks_exact_mut(d).enumerate() {
            let block = &self.features[sa * ns * d..(sa + 1) * ns * d];
            for (phi, &vs) in block.chunks_exact(d).zip(v) {
                if vs != 0.0 {
                    for (o, p) in out.iter_mut().zip(phi) {
                        *o += p * vs;
                    }
                }
            }
        }
        FeatureTable { n_actions: na, d, data }
    }

    /// Exact `max ||phi_V(s, a)||` over `V` in `[0, H]^S`. The map
    /// `V -> ||phi_V(s,a)||` is convex, so its maximum over the box sits at a
    /// vertex; vertices are enumerated up to [`VERTEX_SEARCH_MAX_STATES`]
    /// states, beyond which the triangle bound `H * sum_{s'} ||phi(s,a,s')||`
    /// is returned.
    pub fn feature_norm_bound(&self) -> f64 {
        feature_norm_bound(self.n_states(), self.n_actions(), self.d, &self.features, self.horizon() as f64)
    }

    /// Largest `||phi_V(s, a)||` over the given value vectors.
    pub fn max_feature_norm_on(&self, values: &[Vec<f64>]) -> f64 {
        values
            .iter()
            .flat_map(|v| {
                let t = self.integrate_features(v);
                t.data.chunks_exact(self.d).map(norm).collect::<Vec<_>>()
            })
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Self = serde_json::from_str(text)?;
        let mut checked = Self::new(
            doc.base.reward.clone(),
            doc.base.horizon,
            doc.base.initial_state,
            doc.d,
            doc.features.clone(),
            doc.theta_star.clone(),
        )?;
        if doc.norm_bound < checked.norm_bound {
            return Err(Error::InfeasibleProfile("norm bound is below ||theta*||".into()));
        }
        checked.norm_bound = doc.norm_bound;
        checked.feature_scale = doc.feature_scale;
        Ok(checked)
    }
}

fn induced_kernel(ns: usize, na: usize, d: usize, features: &[f64], theta: &[f64]) -> Result<TransitionKernel> {
    let mut rows = Vec::with_capacity(ns * na);
    for sa in 0..ns * na {
        let row: Vec<f64> = (0..ns)
            .map(|next| dot(&features[(sa * ns + next) * d..(sa * ns + next + 1) * d], theta))
            .collect();
        if row.iter().any(|&p| p < -ROW_SUM_TOL) {
            return Err(Error::InvalidKernel(format!("negative induced probability in row {sa}")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::InvalidKernel(format!("induced row {sa} sums to {sum}")));
        }
        rows.push(row.into_iter().map(|p| p.max(0.0)).collect());
    }
    TransitionKernel::from_rows(ns, na, rows)
}

fn feature_norm_bound(ns: usize, na: usize, d: usize, features: &[f64], h: f64) -> f64 {
    let mut best: f64 = 0.0;
    for sa in 0..ns * na {
        let block = &features[sa * ns * d..(sa + 1) * ns * d];
        if ns <= VERTEX_SEARCH_MAX_STATES {
            let mut acc = vec![0.0; d];
            for mask in 0u32..(1 << ns) {
                acc.iter_mut().for_each(|x| *x = 0.0);
                for (next, phi) in block.chunks_exact(d).enumerate() {
                    if mask >> next & 1 == 1 {
                        for (o, p) in acc.iter_mut().zip(phi) {
                            *o += p;
                        }
                    }
                }
                best = best.max(h * norm(&acc));
            }
        } else {
            best = best.max(h * block.chunks_exact(d).map(norm).sum::<f64>());
        }
    }
    best
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn random_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let e: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn base_kernels<R: Rng + ?Sized>(spec: &LinearSpec, rng: &mut R) -> Vec<TransitionKernel> {
    let (ns, na) = (spec.n_states, spec.n_actions);
    match spec.base {
        BaseKernelKind::Random => (0..spec.d).map(|_| TransitionKernel::random(ns, na, rng)).collect(),
        BaseKernelKind::Peaked => (0..spec.d)
            .map(|_| TransitionKernel::random_peaked(ns, na, 3.0, rng))
            .collect(),
        BaseKernelKind::Deterministic => {
            // a random permutation per (s, a) assigns coordinate j to the
            // j-th state of the permutation, so coordinates disagree
            let perms: Vec<Vec<usize>> = (0..ns * na)
                .map(|_| {
                    let mut p: Vec<usize> = (0..ns).collect();
                    p.shuffle(rng);
                    p
                })
                .collect();
            (0..spec.d)
                .map(|j| {
                    let targets: Vec<usize> = perms.iter().map(|p| p[j % ns]).collect();
                    TransitionKernel::deterministic(ns, na, &targets).expect("targets in range")
                })
                .collect()
        }
    }
}

fn mixture_weights<R: Rng + ?Sized>(spec: &LinearSpec, rng: &mut R) -> Result<Vec<f64>> {
    match &spec.weights {
        WeightProfile::Random { min_weight } => {
            let floor = *min_weight;
            if !(0.0..=1.0).contains(&floor) || floor * spec.d_star as f64 > 1.0 + 1e-12 {
                return Err(Error::InfeasibleProfile(format!(
                    "{} weights of at least {floor} cannot sum to 1",
                    spec.d_star
                )));
            }
            let slack = 1.0 - floor * spec.d_star as f64;
            Ok(random_simplex(spec.d_star, rng).into_iter().map(|w| floor + slack * w).collect())
        }
        WeightProfile::Explicit { weights } => {
            if weights.len() != spec.d_star {
                return Err(Error::InfeasibleProfile(format!(
                    "{} weights given for sparsity {}",
                    weights.len(),
                    spec.d_star
                )));
            }
            if weights.iter().any(|&w| w <= 0.0) || (weights.iter().sum::<f64>() - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InfeasibleProfile("mixture weights must be positive and sum to 1".into()));
            }
            Ok(weights.clone())
        }
    }
}

fn rewards<R: Rng + ?Sized>(spec: &LinearSpec, rng: &mut R) -> Rewards {
    match spec.reward {
        RewardKind::Uniform => Rewards::random(spec.n_states, spec.n_actions, rng),
        RewardKind::Partition => {
            let half = spec.n_states.div_ceil(2);
            let table = (0..spec.n_states)
                .map(|s| vec![if s < half { 1.0 } else { 0.0 }; spec.n_actions])
                .collect();
            Rewards::from_table(table).expect("binary rewards")
        }
    }
}

/// Generates a linear kernel MDP. Features are rescaled so that
/// `||phi_V(s,a)|| <= 1` for every `V` in `[0, H]^S`, with `theta*` scaled
/// inversely; the induced kernel does not change.
pub fn build_linear_mdp<R: Rng + ?Sized>(spec: &LinearSpec, rng: &mut R) -> Result<LinearKernelMdp> {
    let (ns, na, d) = (spec.n_states, spec.n_actions, spec.d);
    if ns == 0 || na == 0 || spec.horizon == 0 {
        return Err(Error::InfeasibleProfile("states, actions and horizon must be positive".into()));
    }
    if !(1..=d).contains(&spec.d_star) {
        return Err(Error::InfeasibleProfile(format!("need d >= d* >= 1, got d = {d}, d* = {}", spec.d_star)));
    }
    let reward = rewards(spec, rng);
    let (features, theta) = match spec.profile {
        FeatureProfile::Mixture => {
            let support = match &spec.support {
                Some(s) => {
                    let mut sorted = s.clone();
                    sorted.sort_unstable();
                    sorted.dedup();
                    if sorted.len() != spec.d_star || sorted.iter().any(|&j| j >= d) {
                        return Err(Error::InfeasibleProfile("support must list d* distinct coordinates below d".into()));
                    }
                    s.clone()
                }
                None => {
                    let mut idx: Vec<usize> = (0..d).collect();
                    idx.shuffle(rng);
                    idx.truncate(spec.d_star);
                    idx.sort_unstable();
                    idx
                }
            };
            let weights = mixture_weights(spec, rng)?;
            let kernels = base_kernels(spec, rng);
            let mut features = vec![0.0; ns * na * ns * d];
            for (j, k) in kernels.iter().enumerate() {
                for (sa, row) in k.rows().enumerate() {
                    for (next, &p) in row.iter().enumerate() {
                        features[(sa * ns + next) * d + j] = p;
                    }
                }
            }
            let mut theta = vec![0.0; d];
            for (&j, &w) in support.iter().zip(&weights) {
                theta[j] = w;
            }
            (features, theta)
        }
        FeatureProfile::Tabular => {
            if d != ns * na * ns {
                return Err(Error::InfeasibleProfile(format!("tabular features need d = S*A*S = {}", ns * na * ns)));
            }
            if spec.d_star < ns * na {
                return Err(Error::InfeasibleProfile("every (s, a) row needs a nonzero entry".into()));
            }
            // spread d* nonzeros over rows: one per row, the rest at random
            let mut counts = vec![1usize; ns * na];
            let mut extra = spec.d_star - ns * na;
            while extra > 0 {
                let sa = rng.random_range(0..ns * na);
                if counts[sa] < ns {
                    counts[sa] += 1;
                    extra -= 1;
                }
            }
            let mut features = vec![0.0; ns * na * ns * d];
            let mut theta = vec![0.0; d];
            for sa in 0..ns * na {
                for next in 0..ns {
                    let j = sa * ns + next;
                    features[j * d + j] = 1.0;
                }
                let mut cols: Vec<usize> = (0..ns).collect();
                cols.shuffle(rng);
                let w = random_simplex(counts[sa], rng);
                for (&next, wi) in cols.iter().zip(w) {
                    theta[sa * ns + next] = wi;
                }
            }
            (features, theta)
        }
    };
    let bound = feature_norm_bound(ns, na, d, &features, spec.horizon as f64);
    let scale = 1.0 / bound;
    let features: Vec<f64> = features.into_iter().map(|x| x * scale).collect();
    let theta: Vec<f64> = theta.into_iter().map(|x| x / scale).collect();
    let mut mdp = LinearKernelMdp::new(reward, spec.horizon, 0, d, features, theta)?;
    mdp.feature_scale = scale;
    Ok(mdp)
}

/// Ridge regression state with unit regularizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RidgeState {
    pub dim: usize,
    /// `I + sum phi phi^T`, row-major.
    pub gram: Vec<f64>,
    pub moment: Vec<f64>,
    pub estimate: Vec<f64>,
    pub samples: usize,
    pub episodes: usize,
}

impl RidgeState {
    pub fn new(dim: usize) -> Self {
        let mut gram = vec![0.0; dim * dim];
        for i in 0..dim {
            gram[i * dim + i] = 1.0;
        }
        Self {
            dim,
            gram,
            moment: vec![0.0; dim],
            estimate: vec![0.0; dim],
            samples: 0,
            episodes: 0,
        }
    }

    pub fn gram_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.gram)
    }

    fn accumulate(&mut self, phi: &[f64], y: f64) {
        let n = self.dim;
        for i in 0..n {
            if phi[i] == 0.0 {
                continue;
            }
            for j in 0..n {
                self.gram[i * n + j] += phi[i] * phi[j];
            }
            self.moment[i] += phi[i] * y;
        }
        self.samples += 1;
    }

    fn solve(&mut self) {
        let chol = self.gram_matrix().cholesky().expect("gram is positive definite");
        let x = chol.solve(&DVector::from_column_slice(&self.moment));
        self.estimate = x.iter().copied().collect();
    }

    /// Rank-one update with `(phi_V, y)` followed by a fresh solve.
    pub fn update(&mut self, phi: &[f64], y: f64) {
        self.accumulate(phi, y);
        self.solve();
    }

    /// Absorbs one episode's records and solves once.
    pub fn update_episode(&mut self, records: &[(Vec<f64>, f64)]) {
        for (phi, y) in records {
            self.accumulate(phi, *y);
        }
        self.solve();
        self.episodes += 1;
    }

    /// Smallest eigenvalue of the gram matrix.
    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(&self.gram_matrix())
    }

    /// `||gram * estimate - moment|| / max(||moment||, 1)`.
    pub fn relative_residual(&self) -> f64 {
        let r = self.gram_matrix() * DVector::from_column_slice(&self.estimate) - DVector::from_column_slice(&self.moment);
        r.norm() / norm(&self.moment).max(1.0)
    }

    pub fn ellipsoid(&self, radius: f64, c_beta: f64) -> ConfidenceEllipsoid {
        ConfidenceEllipsoid::new(self.estimate.clone(), self.gram_matrix(), radius, c_beta)
    }
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

/// Fresh solve of `(I + sum phi phi^T) theta = sum phi y`.
pub fn ridge_batch(dim: usize, records: &[(Vec<f64>, f64)]) -> Vec<f64> {
    let mut gram = DMatrix::<f64>::identity(dim, dim);
    let mut moment = DVector::<f64>::zeros(dim);
    for (phi, y) in records {
        let p = DVector::from_column_slice(phi);
        gram += &p * p.transpose();
        moment += p * *y;
    }
    gram.cholesky().expect("positive definite").solve(&moment).iter().copied().collect()
}

/// `c_beta * (b^2 + H^2 d log(kH) log^2(k^2 H / delta))`.
pub fn beta_lin(b: f64, d: usize, horizon: usize, k: usize, delta: f64, c_beta: f64) -> f64 {
    beta_formula(b, d as f64, horizon as f64, k as f64, delta, c_beta)
}

fn beta_formula(b: f64, d: f64, h: f64, k: f64, delta: f64, c_beta: f64) -> f64 {
    let l = (k * k * h / delta).ln();
    c_beta * (b * b + h * h * d * (k * h).ln() * l * l)
}

/// `{theta : ||Sigma^{1/2} (theta - center)||^2 <= radius}`.
#[derive(Clone, Debug)]
pub struct ConfidenceEllipsoid {
    pub center: Vec<f64>,
    pub shape: DMatrix<f64>,
    pub radius: f64,
    pub c_beta: f64,
    inverse: DMatrix<f64>,
}

impl ConfidenceEllipsoid {
    pub fn new(center: Vec<f64>, shape: DMatrix<f64>, radius: f64, c_beta: f64) -> Self {
        let inverse = shape.clone().cholesky().expect("shape is positive definite").inverse();
        Self {
            center,
            shape,
            radius: radius.max(0.0),
            c_beta,
            inverse,
        }
    }

    /// `(theta - center)^T Sigma (theta - center)`.
    pub fn distance_sq(&self, theta: &[f64]) -> f64 {
        let diff = DVector::from_iterator(theta.len(), theta.iter().zip(&self.center).map(|(a, b)| a - b));
        (diff.transpose() * &self.shape * &diff)[0]
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        self.distance_sq(theta) <= self.radius
    }

    /// `||phi||_{Sigma^-1}`.
    pub fn inverse_norm(&self, phi: &[f64]) -> f64 {
        let n = phi.len();
        let mut q = 0.0;
        for i in 0..n {
            if phi[i] == 0.0 {
                continue;
            }
            let mut row = 0.0;
            for j in 0..n {
                row += self.inverse[(i, j)] * phi[j];
            }
            q += phi[i] * row;
        }
        q.max(0.0).sqrt()
    }

    /// Upper bound `||center|| + sqrt(radius / lambda_min(Sigma))` on the
    /// largest norm in the ellipsoid; exact when `Sigma` is a multiple of
    /// the identity.
    pub fn max_norm_bound(&self) -> f64 {
        norm(&self.center) + (self.radius / min_eigenvalue(&self.shape)).sqrt()
    }
}

/// Optimistic values, greedy policy and the projected `phi_{V_{h+1}}`
/// tables used for planning at each step.
#[derive(Clone, Debug)]
pub struct LinearPlan {
    pub values: ValueTable,
    pub policy: Policy,
    pub features: Vec<FeatureTable>,
}

fn project(table: &FeatureTable, coords: &[usize]) -> FeatureTable {
    if coords.len() == table.d && coords.iter().enumerate().all(|(i, &c)| i == c) {
        return table.clone();
    }
    let data = table
        .data
        .chunks_exact(table.d)
        .flat_map(|phi| coords.iter().map(move |&c| phi[c]))
        .collect();
    FeatureTable {
        n_actions: table.n_actions,
        d: coords.len(),
        data,
    }
}

/// Backward recursion `Q_h = r + <phi_{V_{h+1}}, theta> + sqrt(beta) ||phi||`,
/// `V_h = clamp(max_a Q_h, 0, H)` in the coordinates `coords`.
pub fn optimistic_q_plan(mdp: &LinearKernelMdp, coords: &[usize], ellipsoid: &ConfidenceEllipsoid) -> LinearPlan {
    let (ns, na, horizon) = (mdp.n_states(), mdp.n_actions(), mdp.horizon());
    let cap = horizon as f64;
    let root = ellipsoid.radius.sqrt();
    let mut values = ValueTable::zeros(horizon, ns, na);
    let mut actions = vec![0; horizon * ns];
    let mut features = vec![None; horizon];
    for h in (0..horizon).rev() {
        let phi = project(&mdp.integrate_features(values.v(h + 1)), coords);
        let mut next_v = vec![0.0; ns];
        for (s, slot) in next_v.iter_mut().enumerate() {
            let mut best = f64::NEG_INFINITY;
            let mut best_a = 0;
            for a in 0..na {
                let f = phi.get(s, a);
                let bonus = if root > 0.0 { root * ellipsoid.inverse_norm(f) } else { 0.0 };
                let q = mdp.base.reward.get(s, a) + dot(f, &ellipsoid.center) + bonus;
                values.set_q(h, s, a, q);
                if q > best {
                    best = q;
                    best_a = a;
                }
            }
            *slot = best.clamp(0.0, cap);
            actions[h * ns + s] = best_a;
        }
        values.v_mut(h).copy_from_slice(&next_v);
        features[h] = Some(phi);
    }
    LinearPlan {
        values,
        policy: Policy::new(horizon, ns, actions).expect("greedy actions are in range"),
        features: features.into_iter().map(|f| f.expect("every step planned")).collect(),
    }
}

/// Parameters of the ridge learner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinParams {
    pub delta: f64,
    /// Norm bound `b` entering the confidence radius.
    pub b: f64,
    pub c_beta: f64,
}

/// UCRL-VTR-LIN restricted to a coordinate subset.
#[derive(Clone, Debug)]
pub struct LinearLearner {
    pub coords: Vec<usize>,
    pub state: RidgeState,
    pub params: LinParams,
}

impl LinearLearner {
    pub fn new(coords: Vec<usize>, params: LinParams, warm: Option<RidgeState>) -> Self {
        assert!(!coords.is_empty(), "coordinate set must be nonempty");
        let state = warm.unwrap_or_else(|| RidgeState::new(coords.len()));
        assert_eq!(state.dim, coords.len(), "warm state dimension must match the coordinates");
        Self { coords, state, params }
    }

    /// Radius after `k` completed episodes (`k` is floored at 1).
    pub fn beta(&self, mdp: &LinearKernelMdp, k: usize) -> f64 {
        let p = self.params;
        beta_lin(p.b, self.coords.len(), mdp.horizon(), k.max(1), p.delta, p.c_beta)
    }

    pub fn ellipsoid(&self, mdp: &LinearKernelMdp) -> ConfidenceEllipsoid {
        self.state.ellipsoid(self.beta(mdp, self.state.episodes), self.params.c_beta)
    }

    /// `theta*` restricted to the learner's coordinates.
    pub fn projected_truth(&self, mdp: &LinearKernelMdp) -> Vec<f64> {
        self.coords.iter().map(|&c| mdp.theta_star[c]).collect()
    }

    /// Plans against the current ellipsoid, plays one episode and absorbs
    /// its `H` regression records.
    pub fn play_episode<R: Rng + ?Sized>(
        &mut self,
        mdp: &LinearKernelMdp,
        rng: &mut R,
        ledger: &mut RunLedger,
        mut info: EpisodeInfo,
    ) {
        let ellipsoid = self.ellipsoid(mdp);
        let plan = optimistic_q_plan(mdp, &self.coords, &ellipsoid);
        let trajectory = sample_episode(&mdp.base, &plan.policy, ledger.episodes(), rng);
        let records: Vec<(Vec<f64>, f64)> = trajectory
            .steps
            .iter()
            .enumerate()
            .map(|(h, step)| {
                let phi = plan.features[h].get(step.state, step.action).to_vec();
                (phi, plan.values.v(h + 1)[step.next_state])
            })
            .collect();
        self.state.update_episode(&records);

        let after = self.state.ellipsoid(self.beta(mdp, self.state.episodes), self.params.c_beta);
        info.beta = ellipsoid.radius;
        info.lambda_min = Some(self.state.min_eigenvalue());
        info.theta_covered = Some(after.contains(&self.projected_truth(mdp)));
        info.active_coords = Some(self.coords.clone());
        info.b_estimate = Some(self.params.b);
        info.next_values = (1..=mdp.horizon()).map(|h| plan.values.v(h).to_vec()).collect();
        if info.phase.is_none() {
            info.phase = Some(Phase::Base);
        }
        ledger.record_regret(&mdp.base, plan.policy, trajectory, info);
    }
}

/// Runs the restricted learner for `episodes` episodes, optionally resuming
/// from `warm_state`, and returns the final ridge state.
pub fn run_ucrl_vtr_lin<R: Rng + ?Sized>(
    mdp: &LinearKernelMdp,
    episodes: usize,
    params: LinParams,
    coords: &[usize],
    warm_state: Option<RidgeState>,
    rng: &mut R,
    mut ledger: RunLedger,
) -> (RunLedger, RidgeState) {
    let mut learner = LinearLearner::new(coords.to_vec(), params, warm_state);
    for _ in 0..episodes {
        learner.play_episode(mdp, rng, &mut ledger, EpisodeInfo::default());
    }
    (ledger, learner.state)
}
