//! Brute-force eluder dimension, martingale concentration audits and checks
//! of the eigenvalue-growth condition for linear instances.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::RunLedger;
use crate::linear::{min_eigenvalue, LinearKernelMdp};
use crate::mdp::TransitionKernel;

pub const ELUDER_MAX_INPUTS: usize = 16;
pub const ELUDER_MAX_FUNCTIONS: usize = 64;

/// Finite function class given by its evaluation tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionClassSample {
    pub n_inputs: usize,
    /// `functions[f][x]`.
    pub functions: Vec<Vec<f64>>,
    pub epsilon: f64,
}

impl FunctionClassSample {
    pub fn new(functions: Vec<Vec<f64>>, epsilon: f64) -> Result<Self> {
        let n_inputs = functions.first().map_or(0, Vec::len);
        if functions.is_empty() {
            return Err(Error::Dimension("function class is empty".into()));
        }
        if functions.iter().any(|f| f.len() != n_inputs) {
            return Err(Error::Dimension("every function needs a value on every input".into()));
        }
        if !(epsilon > 0.0) {
            return Err(Error::Dimension("epsilon must be positive".into()));
        }
        Ok(Self {
            n_inputs,
            functions,
            epsilon,
        })
    }
}

/// Convention at the scale `eps'`: `AsWritten` requires the prefix sum
/// `<= eps'^2` and the new gap `> eps'`; `Swapped` requires `< eps'^2` and
/// `>= eps'`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    #[default]
    AsWritten,
    Swapped,
}

#[derive(Clone, Copy)]
struct Rule {
    scale: f64,
    prefix_strict: bool,
    gap_strict: bool,
}

impl Rule {
    fn independent(&self, prefix_sq: f64, gap: f64) -> bool {
        let s2 = self.scale * self.scale;
        let prefix_ok = if self.prefix_strict { prefix_sq < s2 } else { prefix_sq <= s2 };
        let gap_ok = if self.gap_strict { gap > self.scale } else { gap >= self.scale };
        prefix_ok && gap_ok
    }
}

fn longest(gaps: &[Vec<f64>], n: usize, rule: Rule) -> usize {
    fn go(mask: u32, gaps: &[Vec<f64>], n: usize, rule: Rule, memo: &mut HashMap<u32, usize>) -> usize {
        if let Some(&v) = memo.get(&mask) {
            return v;
        }
        let mut best = 0;
        for x in 0..n {
            if mask >> x & 1 == 1 {
                continue;
            }
            let independent = gaps.iter().any(|g| {
                let prefix: f64 = (0..n).filter(|&y| mask >> y & 1 == 1).map(|y| g[y] * g[y]).sum();
                rule.independent(prefix, g[x])
            });
            if independent {
                best = best.max(1 + go(mask | 1 << x, gaps, n, rule, memo));
            }
        }
        memo.insert(mask, best);
        best
    }
    go(0, gaps, n, rule, &mut HashMap::new())
}

/// Length of the longest sequence of inputs each of which is
/// `eps'`-independent of its predecessors for some `eps' >= epsilon`.
///
/// The length is piecewise constant in `eps'` with jumps only at realized
/// pairwise gaps, so it suffices to evaluate `eps' = epsilon` and the left
/// limits at gaps above `epsilon`.
pub fn eluder_dimension(class: &FunctionClassSample, boundary: Boundary) -> Result<usize> {
    let n = class.n_inputs;
    if n > ELUDER_MAX_INPUTS || class.functions.len() > ELUDER_MAX_FUNCTIONS {
        return Err(Error::SizeLimit(format!(
            "{} inputs and {} functions exceed {ELUDER_MAX_INPUTS} / {ELUDER_MAX_FUNCTIONS}",
            n,
            class.functions.len()
        )));
    }
    let f = &class.functions;
    let mut gaps = Vec::new();
    for i in 0..f.len() {
        for j in i + 1..f.len() {
            let g: Vec<f64> = (0..n).map(|x| (f[i][x] - f[j][x]).abs()).collect();
            if g.iter().any(|&v| v > 0.0) && !gaps.contains(&g) {
                gaps.push(g);
            }
        }
    }
    if gaps.is_empty() {
        return Ok(0);
    }
    let eps = class.epsilon;
    let (prefix_strict, gap_strict) = match boundary {
        Boundary::AsWritten => (false, true),
        Boundary::Swapped => (true, false),
    };
    let mut best = longest(&gaps, n, Rule { scale: eps, prefix_strict, gap_strict });
    let mut levels: Vec<f64> = gaps.iter().flatten().copied().filter(|&g| g > eps).collect();
    levels.sort_by(|a, b| a.partial_cmp(b).expect("finite gaps"));
    levels.dedup();
    for g in levels {
        // just below g for the as-written rule, exactly at g for the swapped one
        let rule = Rule {
            scale: g,
            prefix_strict: true,
            gap_strict: false,
        };
        best = best.max(longest(&gaps, n, rule));
    }
    Ok(best)
}

/// Concentration audit of the squared value-targeted residuals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleAudit {
    pub delta: f64,
    /// `m - E[m | history]` for each step, in play order.
    pub increments: Vec<f64>,
    /// `|sum of increments|` at each episode end.
    pub running_sums: Vec<f64>,
    /// `H^2 sqrt(2 n log(2 / delta))` with `n = kH`.
    pub envelopes: Vec<f64>,
    pub violations: usize,
    pub violation_rate: f64,
    /// Empirical mean of `m`.
    pub sigma_hat_sq: f64,
    /// Mean exact conditional variance over the visited steps.
    pub sigma_exact_sq: f64,
}

impl MartingaleAudit {
    pub fn violated(&self) -> bool {
        self.violations > 0
    }
}

pub fn azuma_envelope(horizon: usize, steps: usize, delta: f64) -> f64 {
    let h = horizon as f64;
    h * h * (2.0 * steps as f64 * (2.0 / delta).ln()).sqrt()
}

/// Computes the exact conditional means `(P* V_{h+1})(s_h, a_h)` of every
/// regression target in `ledger` and checks the running sums of centered
/// squared residuals against the Azuma envelope at every episode end.
pub fn audit_value_target_martingale(ledger: &RunLedger, kernel: &TransitionKernel, horizon: usize, delta: f64) -> MartingaleAudit {
    let mut increments = Vec::new();
    let mut running_sums = Vec::new();
    let mut envelopes = Vec::new();
    let (mut sum, mut m_total, mut var_total) = (0.0, 0.0, 0.0);
    let mut violations = 0;
    for rec in &ledger.records {
        for (step, v) in rec.trajectory.steps.iter().zip(&rec.info.next_values) {
            let row = kernel.row(step.state, step.action);
            let mean: f64 = row.iter().zip(v).map(|(p, x)| p * x).sum();
            let var: f64 = row.iter().zip(v).map(|(p, x)| p * (x - mean) * (x - mean)).sum();
            let m = (v[step.next_state] - mean).powi(2);
            increments.push(m - var);
            sum += m - var;
            m_total += m;
            var_total += var;
        }
        let env = azuma_envelope(horizon, increments.len(), delta);
        if sum.abs() > env {
            violations += 1;
        }
        running_sums.push(sum.abs());
        envelopes.push(env);
    }
    let n = increments.len().max(1) as f64;
    let prefixes = running_sums.len();
    MartingaleAudit {
        delta,
        increments,
        running_sums,
        envelopes,
        violations,
        violation_rate: if prefixes == 0 { 0.0 } else { violations as f64 / prefixes as f64 },
        sigma_hat_sq: m_total / n,
        sigma_exact_sq: var_total / n,
    }
}

/// Parameters of the value-function sampler
/// `V(s) = clamp(max_a r + <psi, theta> + eta ||psi||_W, 0, H)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueClassSampler {
    /// Norm of the sampled `theta`.
    pub theta_norm: f64,
    /// `eta` is uniform on `[0, eta_max]`.
    pub eta_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RhoEstimate {
    /// Minimum over samples of `lambda_min(E[phi_V phi_V^T])`.
    pub rho_min: f64,
    pub per_sample: Vec<f64>,
    /// Largest spectral-norm distance between a sampled moment and the
    /// average moment; zero when the moment does not depend on `V`.
    pub moment_spread: f64,
}

fn unit_direction<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        // Box-Muller pairs give an isotropic direction
        let g: Vec<f64> = (0..d)
            .map(|_| {
                let u1: f64 = 1.0 - rng.random::<f64>();
                let u2: f64 = rng.random();
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        let n = crate::linear::norm(&g);
        if n > 1e-12 {
            return g.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Draws one value vector from the sampler's class.
pub fn sample_value_function<R: Rng + ?Sized>(mdp: &LinearKernelMdp, sampler: &ValueClassSampler, rng: &mut R) -> Vec<f64> {
    let (ns, na, d) = (mdp.n_states(), mdp.n_actions(), mdp.d);
    let h = mdp.horizon() as f64;
    let theta: Vec<f64> = unit_direction(d, rng)
        .into_iter()
        .map(|x| x * sampler.theta_norm * rng.random::<f64>())
        .collect();
    let m = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() - 0.5);
    let mut w = &m * m.transpose();
    let top = w.symmetric_eigenvalues().max();
    if top > 0.0 {
        w /= top;
    }
    let eta = sampler.eta_max * rng.random::<f64>();
    let seed_v: Vec<f64> = (0..ns).map(|_| h * rng.random::<f64>()).collect();
    let psi = mdp.integrate_features(&seed_v);
    let scale = psi.data.chunks_exact(d).map(crate::linear::norm).fold(0.0, f64::max);
    let scale = if scale > 0.0 { 1.0 / scale } else { 0.0 };
    (0..ns)
        .map(|s| {
            let mut best = f64::NEG_INFINITY;
            for a in 0..na {
                let p = DVector::from_iterator(d, psi.get(s, a).iter().map(|x| x * scale));
                let lin: f64 = p.iter().zip(&theta).map(|(x, t)| x * t).sum();
                let bonus = (p.transpose() * &w * &p)[0].max(0.0).sqrt();
                best = best.max(mdp.base.reward.get(s, a) + lin + eta * bonus);
            }
            best.clamp(0.0, h)
        })
        .collect()
}

/// `sum_{s,a} w(s,a) phi_V(s,a) phi_V(s,a)^T`, uniform `w` by default.
pub fn feature_moment(mdp: &LinearKernelMdp, v: &[f64], visitation: Option<&[f64]>) -> DMatrix<f64> {
    let d = mdp.d;
    let table = mdp.integrate_features(v);
    let pairs = mdp.n_states() * mdp.n_actions();
    let mut m = DMatrix::zeros(d, d);
    for (i, phi) in table.data.chunks_exact(d).enumerate() {
        let w = visitation.map_or(1.0 / pairs as f64, |vis| vis[i]);
        let p = DVector::from_column_slice(phi);
        m += (&p * p.transpose()) * w;
    }
    m
}

/// Estimates the smallest eigenvalue of the feature second moment over
/// value functions drawn from the sampler.
pub fn estimate_rho_min<R: Rng + ?Sized>(
    mdp: &LinearKernelMdp,
    sampler: &ValueClassSampler,
    n_samples: usize,
    visitation: Option<&[f64]>,
    rng: &mut R,
) -> RhoEstimate {
    assert!(n_samples >= 1, "need at least one sample");
    let moments: Vec<DMatrix<f64>> = (0..n_samples)
        .map(|_| feature_moment(mdp, &sample_value_function(mdp, sampler, rng), visitation))
        .collect();
    let per_sample: Vec<f64> = moments.iter().map(min_eigenvalue).collect();
    let mean = moments.iter().fold(DMatrix::zeros(mdp.d, mdp.d), |acc, m| acc + m) / n_samples as f64;
    let moment_spread = moments
        .iter()
        .map(|m| {
            let diff = m - &mean;
            diff.symmetric_eigenvalues().iter().fold(0.0f64, |a, x| a.max(x.abs()))
        })
        .fold(0.0, f64::max);
    RhoEstimate {
        rho_min: per_sample.iter().copied().fold(f64::INFINITY, f64::min),
        per_sample,
        moment_spread,
    }
}

/// `(16 / rho^2 + 8 / (3 rho)) log(2 d K H / delta)`.
pub fn tau_min(rho: f64, d: usize, episodes: usize, horizon: usize, delta: f64) -> f64 {
    if rho <= 0.0 {
        return 0.0;
    }
    (16.0 / (rho * rho) + 8.0 / (3.0 * rho)) * (2.0 * d as f64 * episodes as f64 * horizon as f64 / delta).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenGrowthReport {
    pub tau_min: f64,
    /// Episodes at or beyond `tau_min`.
    pub checked: usize,
    pub violations: usize,
    pub violation_fraction: f64,
}

/// Flags episodes `k >= tau_min` whose `lambda_min(Sigma_k)` falls below
/// `1 + rho_hat k H / 2`. A nonpositive `rho_hat` gives the bound 1 at
/// every episode.
pub fn check_eigen_growth(history: &[(usize, f64)], rho_hat: f64, d: usize, episodes: usize, horizon: usize, delta: f64) -> EigenGrowthReport {
    assert!(!history.is_empty(), "history must be nonempty");
    let rho = rho_hat.max(0.0);
    let tau = tau_min(rho, d, episodes, horizon, delta);
    let mut checked = 0;
    let mut violations = 0;
    for &(k, lambda) in history {
        if (k as f64) < tau {
            continue;
        }
        checked += 1;
        let bound = 1.0 + rho * k as f64 * horizon as f64 / 2.0;
        if lambda < bound - 1e-9 {
            violations += 1;
        }
    }
    EigenGrowthReport {
        tau_min: tau,
        checked,
        violations,
        violation_fraction: if checked == 0 { 0.0 } else { violations as f64 / checked as f64 },
    }
}

/// `(k, lambda_min)` pairs recorded by a linear run.
pub fn eigen_history(ledger: &RunLedger) -> Vec<(usize, f64)> {
    ledger
        .records
        .iter()
        .filter_map(|r| r.info.lambda_min.map(|l| (r.episode + 1, l)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear::{build_linear_mdp, run_ucrl_vtr_lin, LinParams, LinearSpec};
    use crate::mdp::{EpisodicMdp, Rewards};
    use crate::vtr::run_ucrl_vtr;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: enumerate every ordered sequence without repeats
    /// and scan `eps'` over a fine grid plus all realized gaps.
    fn oracle(class: &FunctionClassSample, boundary: Boundary) -> usize {
        let f = &class.functions;
        let n = class.n_inputs;
        let mut scales = vec![class.epsilon];
        for a in f {
            for b in f {
                for x in 0..n {
                    let g = (a[x] - b[x]).abs();
                    if g >= class.epsilon {
                        scales.push(g);
                        scales.push((g - 1e-7).max(class.epsilon));
                    }
                }
            }
        }
        let ok = |seq: &[usize], x: usize, e: f64| {
            f.iter().any(|a| {
                f.iter().any(|b| {
                    let s: f64 = seq.iter().map(|&y| (a[y] - b[y]).powi(2)).sum();
                    let g = (a[x] - b[x]).abs();
                    match boundary {
                        Boundary::AsWritten => s <= e * e && g > e,
                        Boundary::Swapped => s < e * e && g >= e,
                    }
                })
            })
        };
        fn extend(seq: &mut Vec<usize>, n: usize, e: f64, ok: &dyn Fn(&[usize], usize, f64) -> bool) -> usize {
            let mut best = seq.len();
            for x in 0..n {
                if !seq.contains(&x) && ok(seq, x, e) {
                    seq.push(x);
                    best = best.max(extend(seq, n, e, ok));
                    seq.pop();
                }
            }
            best
        }
        scales.iter().map(|&e| extend(&mut Vec::new(), n, e, &ok)).max().unwrap()
    }

    #[test]
    fn single_function_has_dimension_zero() {
        let c = FunctionClassSample::new(vec![vec![0.3, 0.9, 0.1]], 0.1).unwrap();
        assert_eq!(eluder_dimension(&c, Boundary::AsWritten).unwrap(), 0);
    }

    #[test]
    fn constant_offset_pair() {
        for n in 1..=4 {
            let c = FunctionClassSample::new(vec![vec![0.0; n], vec![0.7; n]], 0.5).unwrap();
            for b in [Boundary::AsWritten, Boundary::Swapped] {
                assert_eq!(eluder_dimension(&c, b).unwrap(), 1);
                assert_eq!(oracle(&c, b), 1);
            }
            // gap exactly epsilon separates the two conventions
            let c = FunctionClassSample::new(vec![vec![0.0; n], vec![0.5; n]], 0.5).unwrap();
            assert_eq!(eluder_dimension(&c, Boundary::AsWritten).unwrap(), 0);
            assert_eq!(eluder_dimension(&c, Boundary::Swapped).unwrap(), 1);
            assert_eq!(oracle(&c, Boundary::AsWritten), 0);
            assert_eq!(oracle(&c, Boundary::Swapped), 1);
        }
    }

    #[test]
    fn two_dimensional_linear_class() {
        let funcs = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let c = FunctionClassSample::new(funcs, 0.5).unwrap();
        assert_eq!(eluder_dimension(&c, Boundary::AsWritten).unwrap(), 2);
    }

    #[test]
    fn matches_exhaustive_oracle_on_random_tiny_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..60 {
            let n = rng.random_range(1..=4);
            let m = rng.random_range(1..=4);
            let funcs: Vec<Vec<f64>> = (0..m)
                .map(|_| (0..n).map(|_| (rng.random_range(0..5) as f64) * 0.25).collect())
                .collect();
            let eps = [0.1, 0.25, 0.3, 0.5][rng.random_range(0..4)];
            let c = FunctionClassSample::new(funcs, eps).unwrap();
            for b in [Boundary::AsWritten, Boundary::Swapped] {
                assert_eq!(eluder_dimension(&c, b).unwrap(), oracle(&c, b), "{c:?} {b:?}");
            }
        }
    }

    #[test]
    fn size_limit_and_validation() {
        let big = FunctionClassSample::new(vec![vec![0.0; 17], vec![1.0; 17]], 0.1).unwrap();
        assert!(matches!(eluder_dimension(&big, Boundary::AsWritten), Err(Error::SizeLimit(_))));
        assert!(FunctionClassSample::new(vec![], 0.1).is_err());
        assert!(FunctionClassSample::new(vec![vec![0.0]], 0.0).is_err());
        assert!(FunctionClassSample::new(vec![vec![0.0], vec![0.0, 1.0]], 0.1).is_err());
    }

    #[test]
    fn deterministic_kernel_audit_is_silent() {
        let kernel = TransitionKernel::deterministic(3, 2, &[1, 2, 0, 0, 2, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mdp = EpisodicMdp::new(3, 0, Rewards::random(3, 2, &mut rng), kernel.clone()).unwrap();
        let family = vec![kernel.clone(), TransitionKernel::random(3, 2, &mut rng)];
        let ledger = run_ucrl_vtr(&mdp, &family, 30, 0.1, &mut rng, RunLedger::new(&mdp));
        let audit = audit_value_target_martingale(&ledger, &kernel, 3, 0.1);
        assert_eq!(audit.increments.len(), 90);
        assert!(audit.increments.iter().all(|&x| x == 0.0));
        assert_eq!(audit.violations, 0);
        assert_eq!(audit.sigma_exact_sq, 0.0);
    }

    #[test]
    fn envelope_scales_with_sqrt_steps() {
        for n in [1usize, 5, 37] {
            let a = azuma_envelope(3, n, 0.1);
            let b = azuma_envelope(3, 4 * n, 0.1);
            assert!((b - 2.0 * a).abs() < 1e-12 * b);
        }
    }

    #[test]
    fn tau_min_closed_form() {
        // 2 d K H / delta = e
        let e = std::f64::consts::E;
        let t = tau_min(1.0, 1, 1, 1, 2.0 / e);
        assert!((t - (16.0 + 8.0 / 3.0)).abs() < 1e-12);
        assert!((t - 18.67).abs() < 0.01);
    }

    #[test]
    fn zero_rho_bound_never_violated() {
        let mdp = linear_instance(3);
        let params = LinParams { delta: 0.1, b: mdp.norm_bound, c_beta: 3e-4 };
        let all: Vec<usize> = (0..mdp.d).collect();
        let (ledger, _) = run_ucrl_vtr_lin(&mdp, 50, params, &all, None, &mut ChaCha8Rng::seed_from_u64(2), RunLedger::new(&mdp.base));
        let hist = eigen_history(&ledger);
        assert_eq!(hist.len(), 50);
        let rep = check_eigen_growth(&hist, 0.0, mdp.d, 50, 3, 0.1);
        assert_eq!((rep.checked, rep.violations), (50, 0));
    }

    #[test]
    fn eigen_growth_flags_low_eigenvalues() {
        let hist: Vec<(usize, f64)> = (1..=10).map(|k| (k, 1.0 + 0.05 * k as f64)).collect();
        let rep = check_eigen_growth(&hist, 0.1, 1, 10, 1, 0.1);
        assert_eq!(rep.checked, 0);
        let rep = check_eigen_growth(&hist, 10.0, 1, 10, 1, 0.1);
        assert!(rep.tau_min > 2.0 && rep.tau_min < 3.0);
        assert_eq!((rep.checked, rep.violations), (8, 8));
        let rep = check_eigen_growth(&hist, 0.0, 1, 10, 1, 0.1);
        assert_eq!((rep.checked, rep.violations), (10, 0));
    }

    fn linear_instance(seed: u64) -> LinearKernelMdp {
        let spec = LinearSpec {
            n_states: 4,
            n_actions: 2,
            horizon: 3,
            d: 3,
            d_star: 3,
            ..Default::default()
        };
        build_linear_mdp(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn rho_estimate_is_a_monotone_minimum() {
        let mdp = linear_instance(4);
        let sampler = ValueClassSampler { theta_norm: mdp.norm_bound, eta_max: 1.0 };
        let a = estimate_rho_min(&mdp, &sampler, 20, None, &mut ChaCha8Rng::seed_from_u64(1));
        let b = estimate_rho_min(&mdp, &sampler, 40, None, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(&b.per_sample[..20], &a.per_sample[..]);
        assert!(b.rho_min <= a.rho_min);
        assert!(a.per_sample.iter().all(|&x| x >= a.rho_min));
        assert!(a.rho_min >= -1e-12);
    }

    #[test]
    fn constant_value_moment_is_rank_deficient() {
        let mdp = linear_instance(5);
        let m = feature_moment(&mdp, &[3.0; 4], None);
        // every base row sums to one, so phi_V is the same vector everywhere
        assert!(min_eigenvalue(&m).abs() < 1e-12);
    }
}
