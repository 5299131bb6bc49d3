//! Nested finite families of transition kernels with a known realizability
//! index, plus exhaustive separation checks.
//!
//! Families are stored as prefixes of one kernel pool: family `m` (1-based)
//! is `pool[..sizes[m - 1]]`. Nesting therefore holds by table identity.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{value_iteration, EpisodicMdp, TransitionKernel};

/// Candidate budget shared by all rows of all separated kernels.
pub const GENERATION_BUDGET: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NestedModelFamilies {
    pool: Vec<TransitionKernel>,
    sizes: Vec<usize>,
    realizable_index: usize,
    true_index: usize,
    separation: f64,
    probe_values: Vec<Vec<f64>>,
}

/// Knobs for [`build_nested_families`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub sizes: Vec<usize>,
    pub m_star: usize,
    pub target_delta: f64,
    /// Total-variation radius of the distractors drawn around the true kernel.
    pub distractor_radius: f64,
}

impl NestedModelFamilies {
    /// Assembles families from an explicit pool. `true_index` locates the true
    /// kernel; the realizability index is derived from it.
    pub fn from_pool(
        pool: Vec<TransitionKernel>,
        sizes: Vec<usize>,
        true_index: usize,
        separation: f64,
        probe_values: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if sizes.is_empty() || sizes.windows(2).any(|w| w[0] > w[1]) || sizes[0] == 0 {
            return Err(Error::config("sizes", "family sizes must be positive and nondecreasing"));
        }
        if *sizes.last().unwrap() != pool.len() {
            return Err(Error::Dimension("largest family must be the whole pool".into()));
        }
        if true_index >= pool.len() {
            return Err(Error::Dimension("true kernel index outside the pool".into()));
        }
        let realizable_index = sizes.iter().position(|&n| true_index < n).unwrap() + 1;
        Ok(Self {
            pool,
            sizes,
            realizable_index,
            true_index,
            separation,
            probe_values,
        })
    }

    pub fn num_families(&self) -> usize {
        self.sizes.len()
    }

    /// Family `m`, 1-based.
    pub fn family(&self, m: usize) -> &[TransitionKernel] {
        &self.pool[..self.sizes[m - 1]]
    }

    pub fn family_size(&self, m: usize) -> usize {
        self.sizes[m - 1]
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn largest(&self) -> &[TransitionKernel] {
        &self.pool
    }

    pub fn realizable_index(&self) -> usize {
        self.realizable_index
    }

    /// Position of the true kernel in the pool.
    pub fn true_index(&self) -> usize {
        self.true_index
    }

    pub fn true_kernel(&self) -> &TransitionKernel {
        &self.pool[self.true_index]
    }

    pub fn separation(&self) -> f64 {
        self.separation
    }

    pub fn probe_values(&self) -> &[Vec<f64>] {
        &self.probe_values
    }

    /// Table-identity membership test.
    pub fn contains(&self, m: usize, kernel: &TransitionKernel) -> bool {
        self.family(m).iter().any(|k| k == kernel)
    }

    /// Kernels of the classes below the realizable one.
    pub fn non_realizable(&self) -> &[TransitionKernel] {
        if self.realizable_index == 1 {
            &[]
        } else {
            self.family(self.realizable_index - 1)
        }
    }

    /// Optimal value vectors `V*_{P,h}` of every pool kernel for steps that are
    /// not constant across states.
    pub fn optimal_value_probes(&self, mdp: &EpisodicMdp) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for k in &self.pool {
            let (v, _) = value_iteration(k, &mdp.reward, mdp.horizon);
            for h in 0..mdp.horizon {
                let row = v.v(h);
                if !is_constant(row) {
                    out.push(row.to_vec());
                }
            }
        }
        out
    }
}

pub(crate) fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|x| (x - v[0]).abs() <= 1e-12)
}

/// Minimum squared prediction gap of one kernel against the truth for one value function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationEntry {
    pub kernel: usize,
    pub probe: usize,
    pub min_sq_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub entries: Vec<SeparationEntry>,
    /// Minimum over all entries; `+inf` when there is nothing to separate.
    pub realized_delta: f64,
}

fn min_sq_gap(p: &TransitionKernel, truth: &TransitionKernel, v: &[f64]) -> f64 {
    let mut best = f64::INFINITY;
    for s in 0..p.n_states() {
        for a in 0..p.n_actions() {
            let g = p.expect(s, a, v) - truth.expect(s, a, v);
            best = best.min(g * g);
        }
    }
    best
}

/// Exhaustive scan over every kernel below the realizable class, every value
/// function and every `(s, a)`.
pub fn verify_separation(
    families: &NestedModelFamilies,
    true_kernel: &TransitionKernel,
    value_functions: &[Vec<f64>],
) -> SeparationReport {
    let mut entries = Vec::new();
    for (i, k) in families.non_realizable().iter().enumerate() {
        for (j, v) in value_functions.iter().enumerate() {
            entries.push(SeparationEntry {
                kernel: i,
                probe: j,
                min_sq_gap: min_sq_gap(k, true_kernel, v),
            });
        }
    }
    let realized_delta = entries.iter().map(|e| e.min_sq_gap).fold(f64::INFINITY, f64::min);
    SeparationReport {
        entries,
        realized_delta,
    }
}

/// Default probe set when the caller supplies none: the non-constant
/// optimal value vectors of the true kernel.
pub fn true_kernel_probes(mdp: &EpisodicMdp) -> Vec<Vec<f64>> {
    let (v, _) = value_iteration(&mdp.kernel, &mdp.reward, mdp.horizon);
    (0..mdp.horizon).map(|h| v.v(h).to_vec()).filter(|v| !is_constant(v)).collect()
}

fn random_simplex<R: Rng + ?Sized>(n: usize, peaked: bool, rng: &mut R) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n)
        .map(|_| {
            let e = -(1.0 - rng.random::<f64>()).ln();
            if peaked {
                e.powi(4)
            } else {
                e
            }
        })
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

fn mix(base: &[f64], other: &[f64], weight: f64) -> Vec<f64> {
    base.iter().zip(other).map(|(p, q)| (1.0 - weight) * p + weight * q).collect()
}

/// Draws a separated row: each candidate mixes the true row with a random
/// (often point-mass) distribution and is kept once every probe shows a
/// squared gap of at least `target`.
fn separated_row<R: Rng + ?Sized>(
    truth: &[f64],
    probes: &[Vec<f64>],
    target: f64,
    attempts: &mut usize,
    rng: &mut R,
) -> Option<Vec<f64>> {
    let n = truth.len();
    let base: Vec<f64> = probes.iter().map(|v| truth.iter().zip(v).map(|(p, x)| p * x).sum()).collect();
    let passes = |row: &[f64]| {
        probes.iter().zip(&base).all(|(v, b)| {
            let g: f64 = row.iter().zip(v).map(|(p, x)| p * x).sum::<f64>() - b;
            g * g >= target
        })
    };
    // vertices first: a point mass maximizes the gap for any single probe
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|_| rng.random::<u32>());
    for j in order {
        if *attempts >= GENERATION_BUDGET {
            return None;
        }
        *attempts += 1;
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let row = mix(truth, &e, rng.random_range(0.8..=1.0));
        if passes(&row) {
            return Some(row);
        }
    }
    while *attempts < GENERATION_BUDGET {
        *attempts += 1;
        let q = if rng.random::<bool>() {
            let mut e = vec![0.0; n];
            e[rng.random_range(0..n)] = 1.0;
            e
        } else {
            random_simplex(n, true, rng)
        };
        let row = mix(truth, &q, rng.random_range(0.3..=1.0));
        if passes(&row) {
            return Some(row);
        }
    }
    None
}

fn distractor<R: Rng + ?Sized>(truth: &TransitionKernel, radius: f64, rng: &mut R) -> TransitionKernel {
    let rows = truth
        .rows()
        .map(|row| {
            let q = random_simplex(row.len(), true, rng);
            mix(row, &q, radius * rng.random_range(0.5..=1.0))
        })
        .collect();
    TransitionKernel::from_rows(truth.n_states(), truth.n_actions(), rows).expect("mixtures of distributions")
}

/// Generates nested families around `mdp.kernel`: kernels below `m_star` are
/// certified separated against `probes` (true-kernel optimal values when
/// `None`), realizable classes add the truth plus nearby distractors.
pub fn build_nested_families<R: Rng + ?Sized>(
    mdp: &EpisodicMdp,
    spec: &FamilySpec,
    probes: Option<Vec<Vec<f64>>>,
    rng: &mut R,
) -> Result<NestedModelFamilies> {
    let m = spec.sizes.len();
    if m == 0 || spec.m_star == 0 || spec.m_star > m {
        return Err(Error::config("m_star", format!("need 1 <= m_star <= M = {m}")));
    }
    if spec.sizes.windows(2).any(|w| w[0] > w[1]) || spec.sizes[0] == 0 {
        return Err(Error::config("sizes", "family sizes must be positive and nondecreasing"));
    }
    let below = if spec.m_star == 1 { 0 } else { spec.sizes[spec.m_star - 2] };
    if spec.sizes[spec.m_star - 1] <= below {
        return Err(Error::config("sizes", "the realizable family must add the true kernel"));
    }
    if !(spec.target_delta >= 0.0) {
        return Err(Error::config("target_delta", "must be nonnegative"));
    }
    let probes = probes.unwrap_or_else(|| true_kernel_probes(mdp));
    let truth = &mdp.kernel;

    let mut pool = Vec::with_capacity(*spec.sizes.last().unwrap());
    let mut attempts = 0;
    for _ in 0..below {
        let mut rows = Vec::with_capacity(truth.n_states() * truth.n_actions());
        for row in truth.rows() {
            match separated_row(row, &probes, spec.target_delta, &mut attempts, rng) {
                Some(r) => rows.push(r),
                None => {
                    return Err(Error::GenerationFailure {
                        attempts,
                        reason: format!("no row reaches squared gap {} on all probes", spec.target_delta),
                    })
                }
            }
        }
        pool.push(TransitionKernel::from_rows(truth.n_states(), truth.n_actions(), rows)?);
    }
    let true_index = pool.len();
    pool.push(truth.clone());
    while pool.len() < *spec.sizes.last().unwrap() {
        pool.push(distractor(truth, spec.distractor_radius, rng));
    }
    NestedModelFamilies::from_pool(pool, spec.sizes.clone(), true_index, spec.target_delta, probes)
}
