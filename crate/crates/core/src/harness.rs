//! Seeded experiment runner: configuration, per-seed runs, CSV tables,
//! summaries and paired comparisons.
//!
//! Every run derives its random streams from one global seed. The run seed
//! is the first eight bytes (little endian) of
//! `SHA-256(global_seed as u64 LE || scenario_id || 0x00 || seed_index as u64 LE)`.
//! Instances are drawn from ChaCha8 stream 0 of that seed and algorithm
//! randomness from stream 1, so scenarios sharing a `scenario_id` see the
//! same instances and the same sampling noise.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arl_gen::run_arl_gen;
use crate::arl_lin::{run_arl_lin_dim, run_arl_lin_norm, DimConfig, NormConfig, ScheduleVariant};
use crate::error::{Error, Result};
use crate::families::{build_nested_families, FamilySpec, NestedModelFamilies};
use crate::ledger::{lock_in, RunLedger};
use crate::linear::{beta_lin, build_linear_mdp, norm, run_ucrl_vtr_lin, LinParams, LinearKernelMdp, LinearLearner, LinearSpec};
use crate::mdp::EpisodicMdp;
use crate::vtr::run_ucrl_vtr;

pub const SCHEMA_VERSION: u32 = 1;

pub const EPISODE_HEADER: [&str; 10] = [
    "episode",
    "epoch",
    "phase",
    "selected_class",
    "active_coords",
    "b_estimate",
    "instant_regret",
    "cum_regret",
    "beta",
    "lambda_min",
];

pub const EPOCH_HEADER: [&str; 16] = [
    "epoch",
    "phase",
    "first_episode",
    "episodes",
    "delta",
    "statistics",
    "gamma",
    "selected_class",
    "anomaly",
    "threshold",
    "active_coords",
    "sup_norm_error",
    "b_estimate",
    "next_b_estimate",
    "theta_in_final_ellipsoid",
    "cum_regret",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    General,
    LinearDim,
    LinearNorm,
    BaselineOracle,
    BaselineLargest,
}

impl ScenarioKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::General => "general",
            Self::LinearDim => "linear-dim",
            Self::LinearNorm => "linear-norm",
            Self::BaselineOracle => "baseline-oracle",
            Self::BaselineLargest => "baseline-largest",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelGenerator {
    Uniform,
    #[default]
    Peaked,
}

/// Random finite MDP plus nested families around its kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteInstance {
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    #[serde(default)]
    pub generator: KernelGenerator,
    pub families: FamilySpec,
    /// Fresh MDPs drawn before giving up on family generation.
    #[serde(default = "default_attempts")]
    pub max_attempts: usize,
}

fn default_attempts() -> usize {
    50
}

/// Either a count (`seeds = 20` means indices `0..20`) or explicit indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SeedList {
    Count(u64),
    List(Vec<u64>),
}

impl SeedList {
    pub fn indices(&self) -> Vec<u64> {
        match self {
            SeedList::Count(n) => (0..*n).collect(),
            SeedList::List(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlgorithmConfig {
    pub delta: f64,
    pub k0: u64,
    pub k1: u64,
    /// Norm bound for linear learners; the instance's `||theta*||` when absent.
    pub b: Option<f64>,
    /// Initial norm guess of the norm-adaptive algorithm, as a multiple of `||theta*||`.
    pub b_init_factor: f64,
    pub c_beta: f64,
    pub schedule_variant: ScheduleVariant,
}

impl Default for AlgorithmConfig {
    fn default() -> Self {
        Self {
            delta: 0.1,
            k0: 64,
            k1: 256,
            b: None,
            b_init_factor: 10.0,
            c_beta: 1.0,
            schedule_variant: ScheduleVariant::Literal,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub kind: ScenarioKind,
    #[serde(default = "default_scenario_id")]
    pub scenario_id: String,
    pub global_seed: u64,
    pub seeds: SeedList,
    pub episodes: usize,
    /// Episodes at which linear coverage is checked; powers of two from 64
    /// up to `episodes` when absent.
    #[serde(default)]
    pub checkpoints: Option<Vec<usize>>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "yes")]
    pub episode_rows: bool,
    #[serde(default)]
    pub algorithm: AlgorithmConfig,
    #[serde(default)]
    pub finite: Option<FiniteInstance>,
    #[serde(default)]
    pub linear: Option<LinearSpec>,
}

fn default_scenario_id() -> String {
    "default".into()
}

fn yes() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config("document", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        if self.episodes == 0 {
            return Err(Error::config("episodes", "must be positive"));
        }
        let seeds = self.seeds.indices();
        if seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if seeds.iter().collect::<BTreeSet<_>>().len() != seeds.len() {
            return Err(Error::config("seeds", "seed indices must be distinct"));
        }
        let a = &self.algorithm;
        if !(a.delta > 0.0 && a.delta < 1.0) {
            return Err(Error::config("algorithm.delta", "must lie in (0, 1)"));
        }
        if !(a.c_beta > 0.0) {
            return Err(Error::config("algorithm.c_beta", "must be positive"));
        }
        if a.k0 == 0 {
            return Err(Error::config("algorithm.k0", "must be positive"));
        }
        if a.k1 == 0 {
            return Err(Error::config("algorithm.k1", "must be positive"));
        }
        if a.b.is_some_and(|b| !(b > 0.0)) {
            return Err(Error::config("algorithm.b", "must be positive"));
        }
        if !(a.b_init_factor > 0.0) {
            return Err(Error::config("algorithm.b_init_factor", "must be positive"));
        }
        if let Some(cps) = &self.checkpoints {
            if cps.iter().any(|&k| k == 0 || k > self.episodes) {
                return Err(Error::config("checkpoints", "checkpoints must lie in 1..=episodes"));
            }
        }
        match (self.kind, &self.finite, &self.linear) {
            (_, Some(_), Some(_)) => Err(Error::config("finite", "give either a finite or a linear instance, not both")),
            (ScenarioKind::General, None, _) => Err(Error::config("finite", "general scenarios need a finite instance")),
            (ScenarioKind::LinearDim | ScenarioKind::LinearNorm, _, None) => {
                Err(Error::config("linear", "linear scenarios need a linear instance"))
            }
            (ScenarioKind::BaselineOracle | ScenarioKind::BaselineLargest, None, None) => {
                Err(Error::config("finite", "baselines need a finite or a linear instance"))
            }
            (_, Some(f), _) => validate_finite(f),
            (_, _, Some(l)) => validate_linear(l),
        }
    }

    pub fn checkpoint_list(&self) -> Vec<usize> {
        self.checkpoints.clone().unwrap_or_else(|| default_checkpoints(self.episodes))
    }
}

fn validate_finite(f: &FiniteInstance) -> Result<()> {
    if f.n_states == 0 || f.n_actions == 0 || f.horizon == 0 {
        return Err(Error::config("finite", "states, actions and horizon must be positive"));
    }
    if f.max_attempts == 0 {
        return Err(Error::config("finite.max_attempts", "must be positive"));
    }
    let fs = &f.families;
    if fs.sizes.is_empty() || fs.sizes[0] == 0 || fs.sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::config("finite.families.sizes", "sizes must be positive and nondecreasing"));
    }
    if fs.m_star == 0 || fs.m_star > fs.sizes.len() {
        return Err(Error::config("finite.families.m_star", "must lie in 1..=number of families"));
    }
    if !(fs.target_delta >= 0.0) {
        return Err(Error::config("finite.families.target_delta", "must be nonnegative"));
    }
    if !(0.0..=1.0).contains(&fs.distractor_radius) {
        return Err(Error::config("finite.families.distractor_radius", "must lie in [0, 1]"));
    }
    Ok(())
}

fn validate_linear(l: &LinearSpec) -> Result<()> {
    if l.n_states == 0 || l.n_actions == 0 || l.horizon == 0 {
        return Err(Error::config("linear", "states, actions and horizon must be positive"));
    }
    if l.d == 0 || l.d_star == 0 || l.d_star > l.d {
        return Err(Error::config("linear.d_star", "need 1 <= d_star <= d"));
    }
    Ok(())
}

/// Powers of two from 64 up to `episodes`, or just `episodes` when shorter.
pub fn default_checkpoints(episodes: usize) -> Vec<usize> {
    let v: Vec<usize> = (6..usize::BITS).map(|j| 1usize << j).take_while(|&k| k <= episodes).collect();
    if v.is_empty() {
        vec![episodes]
    } else {
        v
    }
}

pub fn run_seed(global_seed: u64, scenario_id: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(global_seed.to_le_bytes());
    h.update(scenario_id.as_bytes());
    h.update([0u8]);
    h.update(index.to_le_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("digest has 32 bytes"))
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn instance_rng(seed: u64) -> ChaCha8Rng {
    stream(seed, 0)
}

pub fn algorithm_rng(seed: u64) -> ChaCha8Rng {
    stream(seed, 1)
}

/// A generated problem instance.
#[derive(Clone, Debug)]
pub enum Instance {
    Finite { mdp: EpisodicMdp, families: NestedModelFamilies },
    Linear(LinearKernelMdp),
}

impl Instance {
    pub fn mdp(&self) -> &EpisodicMdp {
        match self {
            Instance::Finite { mdp, .. } => mdp,
            Instance::Linear(l) => &l.base,
        }
    }
}

/// Draws the instance of one run; family generation retries with fresh
/// MDPs from the same stream.
pub fn generate_instance(cfg: &ExperimentConfig, seed: u64) -> Result<Instance> {
    let mut rng = instance_rng(seed);
    if let Some(lin) = &cfg.linear {
        return build_linear_mdp(lin, &mut rng).map(Instance::Linear);
    }
    let f = cfg.finite.as_ref().ok_or_else(|| Error::config("finite", "missing instance"))?;
    let mut attempts = 0;
    for _ in 0..f.max_attempts {
        let mdp = match f.generator {
            KernelGenerator::Uniform => EpisodicMdp::random(f.n_states, f.n_actions, f.horizon, &mut rng),
            KernelGenerator::Peaked => EpisodicMdp::random_peaked(f.n_states, f.n_actions, f.horizon, &mut rng),
        };
        match build_nested_families(&mdp, &f.families, None, &mut rng) {
            Ok(families) => return Ok(Instance::Finite { mdp, families }),
            Err(Error::GenerationFailure { attempts: n, .. }) => attempts += n,
            Err(e) => return Err(e),
        }
    }
    Err(Error::GenerationFailure {
        attempts,
        reason: format!("{} sampled MDPs admitted no separated families", f.max_attempts),
    })
}

/// Executes one run of the configured scenario on `instance`.
pub fn run_scenario(cfg: &ExperimentConfig, instance: &Instance, seed: u64) -> RunLedger {
    let a = &cfg.algorithm;
    let k = cfg.episodes;
    let mut rng = algorithm_rng(seed);
    match instance {
        Instance::Finite { mdp, families } => {
            let fresh = RunLedger::new(mdp);
            match cfg.kind {
                ScenarioKind::General => run_arl_gen(mdp, families, k, a.delta, &mut rng),
                ScenarioKind::BaselineOracle => {
                    run_ucrl_vtr(mdp, families.family(families.realizable_index()), k, a.delta, &mut rng, fresh)
                }
                _ => run_ucrl_vtr(mdp, families.largest(), k, a.delta, &mut rng, fresh),
            }
        }
        Instance::Linear(mdp) => {
            let b = a.b.unwrap_or(mdp.norm_bound);
            let params = LinParams {
                delta: a.delta,
                b,
                c_beta: a.c_beta,
            };
            match cfg.kind {
                ScenarioKind::LinearDim => {
                    let dim = DimConfig {
                        k0: a.k0,
                        delta: a.delta,
                        b,
                        c_beta: a.c_beta,
                        variant: a.schedule_variant,
                    };
                    run_arl_lin_dim(mdp, &dim, k, &mut rng)
                }
                ScenarioKind::LinearNorm => {
                    let nc = NormConfig {
                        k1: a.k1,
                        delta: a.delta,
                        b_init: a.b_init_factor * norm(&mdp.theta_star),
                        c_beta: a.c_beta,
                    };
                    run_arl_lin_norm(mdp, &nc, k, &mut rng)
                }
                ScenarioKind::BaselineOracle => {
                    run_ucrl_vtr_lin(mdp, k, params, &mdp.support(), None, &mut rng, RunLedger::new(&mdp.base)).0
                }
                _ => {
                    let all: Vec<usize> = (0..mdp.d).collect();
                    run_ucrl_vtr_lin(mdp, k, params, &all, None, &mut rng, RunLedger::new(&mdp.base)).0
                }
            }
        }
    }
}

/// Per-seed results row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub index: u64,
    pub run_seed: u64,
    pub episodes: usize,
    pub final_regret: f64,
    /// Cumulative regret after `episodes / 2` episodes.
    pub half_regret: f64,
    /// `log2(final_regret / half_regret)`.
    pub slope: Option<f64>,
    /// Position in the epoch sequence where the correct class or support
    /// first appears.
    pub lock_in_epoch: Option<usize>,
    pub lock_in_episode: Option<usize>,
    pub lock_in_held: bool,
    pub lock_in_deviations: usize,
    pub support_recovered: Option<bool>,
    /// `T_1 >= T_2 >= ... >= T_M` at every epoch with statistics.
    pub nesting_ok: Option<bool>,
    pub realized_delta: Option<f64>,
    pub theta_norm: Option<f64>,
    /// Norm estimates `b^(1), b^(2), ...` including the one after the last epoch.
    pub b_sequence: Vec<f64>,
    /// Every epoch whose final ellipsoid held `theta*` produced `b >= ||theta*||`.
    pub b_bracket_ok: Option<bool>,
    pub coverage_checks: usize,
    pub coverage_hits: usize,
    /// Cumulative regret after selected episode counts, starting at 0.
    pub regret_at: Vec<(usize, f64)>,
}

impl SeedSummary {
    pub fn covered_all(&self) -> bool {
        self.coverage_checks > 0 && self.coverage_hits == self.coverage_checks
    }

    pub fn regret_after(&self, episodes: usize) -> Option<f64> {
        self.regret_at.iter().find(|(e, _)| *e == episodes).map(|(_, r)| *r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub median_final_regret: f64,
    pub q10_final_regret: f64,
    pub q90_final_regret: f64,
    pub mean_final_regret: f64,
    /// `log2` ratio of mean cumulative regret at `K` and `K / 2`.
    pub mean_curve_slope: Option<f64>,
    pub lock_in_rate: Option<f64>,
    pub support_rate: Option<f64>,
    pub coverage_rate: Option<f64>,
    /// Median over seeds of `|b^(i) - ||theta*|||`, per position in the sequence.
    pub median_norm_error: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub name: String,
    pub kind: ScenarioKind,
    pub scenario_id: String,
    pub global_seed: u64,
    pub episodes: usize,
    pub seeds: Vec<SeedSummary>,
    pub aggregate: Aggregate,
    /// SHA-256 over every emitted result table, in seed order.
    pub digest: String,
}

impl RunSummary {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Linear-interpolated quantile of the finite values, `NaN` when empty.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        v[lo]
    } else {
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    }
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

fn log2_ratio(end: f64, half: f64) -> Option<f64> {
    if end <= 0.0 {
        Some(0.0)
    } else if half <= 0.0 {
        None
    } else {
        Some((end / half).log2())
    }
}

fn rate(flags: impl Iterator<Item = Option<bool>>) -> Option<f64> {
    let v: Vec<bool> = flags.flatten().collect();
    (!v.is_empty()).then(|| v.iter().filter(|&&f| f).count() as f64 / v.len() as f64)
}

/// Recomputes the aggregate block from per-seed rows.
pub fn aggregate(seeds: &[SeedSummary], kind: ScenarioKind) -> Aggregate {
    let finals: Vec<f64> = seeds.iter().map(|s| s.final_regret).collect();
    let n = seeds.len().max(1) as f64;
    let mean_final = finals.iter().sum::<f64>() / n;
    let mean_half = seeds.iter().map(|s| s.half_regret).sum::<f64>() / n;
    let tracks_lock_in = matches!(kind, ScenarioKind::General | ScenarioKind::LinearDim);
    let longest = seeds.iter().map(|s| s.b_sequence.len()).max().unwrap_or(0);
    let median_norm_error = (0..longest)
        .map(|i| {
            let errs: Vec<f64> = seeds
                .iter()
                .filter_map(|s| Some((s.b_sequence.get(i)? - s.theta_norm?).abs()))
                .collect();
            median(&errs)
        })
        .collect();
    Aggregate {
        median_final_regret: median(&finals),
        q10_final_regret: quantile(&finals, 0.1),
        q90_final_regret: quantile(&finals, 0.9),
        mean_final_regret: mean_final,
        mean_curve_slope: log2_ratio(mean_final, mean_half),
        lock_in_rate: if tracks_lock_in {
            rate(seeds.iter().map(|s| Some(s.lock_in_held)))
        } else {
            None
        },
        support_rate: rate(seeds.iter().map(|s| s.support_recovered)),
        coverage_rate: rate(seeds.iter().map(|s| (s.coverage_checks > 0).then(|| s.covered_all()))),
        median_norm_error,
    }
}

fn regret_grid(ledger: &RunLedger) -> Vec<usize> {
    let k = ledger.episodes();
    let mut grid: BTreeSet<usize> = [0, k / 2, k].into_iter().collect();
    for j in 1..usize::BITS {
        let p = 1usize << j;
        if p - 2 > k {
            break;
        }
        grid.insert(p - 2);
        if p <= k {
            grid.insert(p);
        }
    }
    grid.extend(ledger.selections.iter().map(|s| s.first_episode));
    grid.extend(ledger.supports.iter().map(|s| s.first_episode));
    grid.extend(ledger.norms.iter().map(|s| s.first_episode));
    grid.into_iter().filter(|&e| e <= k).collect()
}

fn regret_after(ledger: &RunLedger, episodes: usize) -> f64 {
    if episodes == 0 {
        0.0
    } else {
        ledger.records[episodes - 1].cum_regret
    }
}

/// Reduces one run to its summary row.
pub fn summarize_run(cfg: &ExperimentConfig, instance: &Instance, ledger: &RunLedger, index: u64, seed: u64) -> SeedSummary {
    let k = ledger.episodes();
    let final_regret = ledger.cum_regret();
    let half_regret = regret_after(ledger, k / 2);
    let mut s = SeedSummary {
        index,
        run_seed: seed,
        episodes: k,
        final_regret,
        half_regret,
        slope: log2_ratio(final_regret, half_regret),
        lock_in_epoch: None,
        lock_in_episode: None,
        lock_in_held: false,
        lock_in_deviations: 0,
        support_recovered: None,
        nesting_ok: None,
        realized_delta: None,
        theta_norm: None,
        b_sequence: Vec::new(),
        b_bracket_ok: None,
        coverage_checks: 0,
        coverage_hits: 0,
        regret_at: regret_grid(ledger).into_iter().map(|e| (e, regret_after(ledger, e))).collect(),
    };
    match instance {
        Instance::Finite { families, .. } => {
            s.realized_delta = Some(families.separation());
            let truth = families.true_index();
            let sets = ledger
                .records
                .iter()
                .filter_map(|r| r.info.members.as_ref())
                .chain(ledger.final_members.as_ref());
            for members in sets {
                s.coverage_checks += 1;
                s.coverage_hits += usize::from(members.contains(&truth));
            }
            if cfg.kind == ScenarioKind::General {
                let m_star = families.realizable_index();
                let flags: Vec<bool> = ledger.selections.iter().map(|r| r.selected == m_star).collect();
                let li = lock_in(&flags, 1);
                s.lock_in_epoch = li.index.map(|i| ledger.selections[i].epoch);
                s.lock_in_episode = li.index.map(|i| ledger.selections[i].first_episode);
                s.lock_in_held = li.held();
                s.lock_in_deviations = li.deviations;
                s.nesting_ok = Some(
                    ledger
                        .selections
                        .iter()
                        .all(|r| r.statistics.windows(2).all(|w| w[0] >= w[1])),
                );
            }
        }
        Instance::Linear(mdp) => {
            let theta_norm = norm(&mdp.theta_star);
            s.theta_norm = Some(theta_norm);
            for &c in &cfg.checkpoints.clone().unwrap_or_else(|| default_checkpoints(cfg.episodes)) {
                if let Some(covered) = ledger.records.get(c - 1).and_then(|r| r.info.theta_covered) {
                    s.coverage_checks += 1;
                    s.coverage_hits += usize::from(covered);
                }
            }
            if cfg.kind == ScenarioKind::LinearDim {
                let flags: Vec<bool> = ledger.supports.iter().map(|r| r.exact_support).collect();
                let li = lock_in(&flags, 1);
                s.lock_in_epoch = li.index.map(|i| ledger.supports[i].epoch);
                s.lock_in_episode = li.index.map(|i| ledger.supports[i].first_episode);
                s.lock_in_held = li.held();
                s.lock_in_deviations = li.deviations;
                s.support_recovered = Some(li.held());
            }
            if cfg.kind == ScenarioKind::LinearNorm {
                s.b_sequence = ledger.norms.iter().map(|r| r.b_estimate).collect();
                s.b_sequence.extend(ledger.norms.last().map(|r| r.next_b_estimate));
                s.b_bracket_ok = Some(
                    ledger
                        .norms
                        .iter()
                        .filter(|r| r.theta_in_final_ellipsoid)
                        .all(|r| r.next_b_estimate >= theta_norm),
                );
            }
        }
    }
    s
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Bitmask of a coordinate set (coordinates beyond 63 are not representable).
pub fn coord_mask(coords: &[usize]) -> u64 {
    coords.iter().filter(|&&c| c < 64).fold(0, |m, &c| m | 1 << c)
}

pub fn episode_table(ledger: &RunLedger) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(EPISODE_HEADER)?;
    for r in &ledger.records {
        let i = &r.info;
        w.write_record([
            (r.episode + 1).to_string(),
            i.epoch.to_string(),
            i.phase.map_or("", |p| p.as_str()).to_string(),
            opt(i.selected_class),
            opt(i.active_coords.as_deref().map(coord_mask)),
            opt(i.b_estimate),
            r.instant_regret.to_string(),
            r.cum_regret.to_string(),
            i.beta.to_string(),
            opt(i.lambda_min),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn epoch_table(ledger: &RunLedger) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(EPOCH_HEADER)?;
    let cum_after = |first: usize, n: usize| regret_after(ledger, (first + n).min(ledger.episodes())).to_string();
    for r in &ledger.selections {
        let stats: Vec<String> = r.statistics.iter().map(f64::to_string).collect();
        w.write_record([
            r.epoch.to_string(),
            "selection".into(),
            r.first_episode.to_string(),
            r.episodes.to_string(),
            r.delta.to_string(),
            stats.join(";"),
            opt(r.gamma),
            r.selected.to_string(),
            r.anomaly.to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            cum_after(r.first_episode, r.episodes),
        ])?;
    }
    for r in &ledger.supports {
        w.write_record([
            r.epoch.to_string(),
            "support".into(),
            r.first_episode.to_string(),
            (r.regret_episodes + r.support_episodes).to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            r.anomaly.to_string(),
            r.threshold.to_string(),
            coord_mask(&r.active).to_string(),
            r.sup_norm_error.to_string(),
            String::new(),
            String::new(),
            String::new(),
            cum_after(r.first_episode, r.regret_episodes + r.support_episodes),
        ])?;
    }
    for r in &ledger.norms {
        w.write_record([
            r.epoch.to_string(),
            "norm".into(),
            r.first_episode.to_string(),
            r.episodes.to_string(),
            r.delta.to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            r.b_estimate.to_string(),
            r.next_b_estimate.to_string(),
            r.theta_in_final_ellipsoid.to_string(),
            cum_after(r.first_episode, r.episodes),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn seed_table(seeds: &[SeedSummary]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "seed_index",
        "run_seed",
        "episodes",
        "final_regret",
        "half_regret",
        "lock_in_epoch",
        "lock_in_held",
        "support_recovered",
        "coverage_hits",
        "coverage_checks",
        "b_sequence",
    ])?;
    for s in seeds {
        let bs: Vec<String> = s.b_sequence.iter().map(f64::to_string).collect();
        w.write_record([
            s.index.to_string(),
            s.run_seed.to_string(),
            s.episodes.to_string(),
            s.final_regret.to_string(),
            s.half_regret.to_string(),
            opt(s.lock_in_epoch),
            s.lock_in_held.to_string(),
            opt(s.support_recovered),
            s.coverage_hits.to_string(),
            s.coverage_checks.to_string(),
            bs.join(";"),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn seed_dir(out: &Path, index: u64) -> PathBuf {
    out.join(format!("seed-{index:04}"))
}

struct SeedOutcome {
    summary: SeedSummary,
    tables_digest: [u8; 32],
}

fn run_one(cfg: &ExperimentConfig, index: u64, out: Option<&Path>) -> Result<SeedOutcome> {
    let seed = run_seed(cfg.global_seed, &cfg.scenario_id, index);
    let instance = generate_instance(cfg, seed)?;
    let ledger = run_scenario(cfg, &instance, seed);
    let summary = summarize_run(cfg, &instance, &ledger, index, seed);
    let epochs = epoch_table(&ledger)?;
    let episodes = if cfg.episode_rows { Some(episode_table(&ledger)?) } else { None };
    let mut h = Sha256::new();
    if let Some(e) = &episodes {
        h.update(e);
    }
    h.update(&epochs);
    if let Some(out) = out {
        let dir = seed_dir(out, index);
        fs::create_dir_all(&dir)?;
        if let Some(e) = &episodes {
            fs::write(dir.join("episodes.csv"), e)?;
        }
        fs::write(dir.join("epochs.csv"), &epochs)?;
    }
    Ok(SeedOutcome {
        summary,
        tables_digest: h.finalize().into(),
    })
}

/// Runs every seed of `cfg` (in parallel), writes per-seed tables as each
/// run finishes, then writes `config.toml`, `seeds.csv` and `summary.json`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let out = cfg.output_dir.as_deref();
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    }
    let indices = cfg.seeds.indices();
    let outcomes: Vec<SeedOutcome> = indices
        .par_iter()
        .map(|&i| run_one(cfg, i, out))
        .collect::<Result<_>>()?;
    let seeds: Vec<SeedSummary> = outcomes.iter().map(|o| o.summary.clone()).collect();
    let seed_rows = seed_table(&seeds)?;
    let mut h = Sha256::new();
    for o in &outcomes {
        h.update(o.tables_digest);
    }
    h.update(&seed_rows);
    let summary = RunSummary {
        schema_version: SCHEMA_VERSION,
        name: cfg.name.clone(),
        kind: cfg.kind,
        scenario_id: cfg.scenario_id.clone(),
        global_seed: cfg.global_seed,
        episodes: cfg.episodes,
        aggregate: aggregate(&seeds, cfg.kind),
        seeds,
        digest: hex(&h.finalize()),
    };
    if let Some(out) = out {
        fs::write(out.join("seeds.csv"), &seed_rows)?;
        fs::write(out.join("summary.json"), summary.to_json()?)?;
    }
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub index: u64,
    /// Start of the post-lock-in window; 0 when the adaptive run never locked in.
    pub window_start: usize,
    pub locked_in: bool,
    pub tail_adaptive: f64,
    pub tail_oracle: f64,
    /// `tail_adaptive / tail_oracle`; 1 when both tails are zero and `None`
    /// (unbounded) when only the oracle tail is zero.
    pub ratio: Option<f64>,
    /// Regret difference accumulated before the window.
    pub pre_lock_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    /// Unbounded ratios count as `+inf`.
    pub median_ratio: f64,
    pub median_pre_lock_gap: f64,
}

/// Pairs seeds of an adaptive run with an oracle run and compares regret
/// after the adaptive run's lock-in episode.
pub fn compare_to_oracle(adaptive: &RunSummary, oracle: &RunSummary) -> Result<Comparison> {
    let key = |s: &RunSummary| s.seeds.iter().map(|r| (r.index, r.run_seed)).collect::<Vec<_>>();
    if key(adaptive) != key(oracle) {
        return Err(Error::MismatchedSeeds("seed indices or run seeds differ".into()));
    }
    if adaptive.episodes != oracle.episodes {
        return Err(Error::MismatchedSeeds(format!(
            "budgets differ: {} vs {}",
            adaptive.episodes, oracle.episodes
        )));
    }
    let mut rows = Vec::with_capacity(adaptive.seeds.len());
    for (a, o) in adaptive.seeds.iter().zip(&oracle.seeds) {
        let start = if a.lock_in_held { a.lock_in_episode.unwrap_or(0) } else { 0 };
        let missing = || Error::MismatchedSeeds(format!("seed {}: no regret checkpoint at episode {start}", a.index));
        let a0 = a.regret_after(start).ok_or_else(missing)?;
        let o0 = o.regret_after(start).ok_or_else(missing)?;
        let tail_adaptive = a.final_regret - a0;
        let tail_oracle = o.final_regret - o0;
        let ratio = if tail_oracle > 0.0 {
            Some(tail_adaptive / tail_oracle)
        } else if tail_adaptive <= 0.0 {
            Some(1.0)
        } else {
            None
        };
        rows.push(ComparisonRow {
            index: a.index,
            window_start: start,
            locked_in: a.lock_in_held,
            tail_adaptive,
            tail_oracle,
            ratio,
            pre_lock_gap: a0 - o0,
        });
    }
    let ratios: Vec<f64> = rows.iter().map(|r| r.ratio.unwrap_or(f64::INFINITY)).collect();
    let gaps: Vec<f64> = rows.iter().map(|r| r.pre_lock_gap).collect();
    Ok(Comparison {
        median_ratio: median(&ratios),
        median_pre_lock_gap: median(&gaps),
        rows,
    })
}

/// Result of [`calibrate_c_beta`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub c_beta: f64,
    /// Smallest constant that would have covered each seed at every
    /// checkpoint during the last pass.
    pub required: Vec<f64>,
    pub passes: usize,
}

/// Fixed-point calibration of the radius constant for full-dimensional
/// learners on `spec`: each pass runs every seed at the current constant
/// and replaces it with the `quantile` of the per-seed constants needed
/// for `theta*` to stay inside the ellipsoid at every checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_c_beta(
    spec: &LinearSpec,
    global_seed: u64,
    scenario_id: &str,
    seeds: &[u64],
    episodes: usize,
    checkpoints: &[usize],
    delta: f64,
    quantile_level: f64,
    pilot: f64,
    passes: usize,
) -> Result<Calibration> {
    let mut c = pilot;
    let mut required = Vec::new();
    for _ in 0..passes.max(1) {
        required = seeds
            .par_iter()
            .map(|&i| -> Result<f64> {
                let seed = run_seed(global_seed, scenario_id, i);
                let mdp = build_linear_mdp(spec, &mut instance_rng(seed))?;
                let mut rng = algorithm_rng(seed);
                let params = LinParams {
                    delta,
                    b: mdp.norm_bound,
                    c_beta: c,
                };
                let mut learner = LinearLearner::new((0..mdp.d).collect(), params, None);
                let mut ledger = RunLedger::new(&mdp.base);
                let mut need = 0.0f64;
                for k in 1..=episodes {
                    learner.play_episode(&mdp, &mut rng, &mut ledger, Default::default());
                    if checkpoints.contains(&k) {
                        let unit = beta_lin(mdp.norm_bound, mdp.d, mdp.horizon(), k, delta, 1.0);
                        let dist = learner.state.ellipsoid(unit, 1.0).distance_sq(&mdp.theta_star);
                        need = need.max(dist / unit);
                    }
                }
                Ok(need)
            })
            .collect::<Result<_>>()?;
        c = quantile(&required, quantile_level);
    }
    Ok(Calibration {
        c_beta: c,
        required,
        passes: passes.max(1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_config() -> ExperimentConfig {
        ExperimentConfig::from_toml(
            r#"
schema_version = 1
name = "tiny"
kind = "general"
global_seed = 7
seeds = 3
episodes = 40

[finite]
n_states = 4
n_actions = 2
horizon = 3

[finite.families]
sizes = [2, 4]
m_star = 2
target_delta = 0.01
distractor_radius = 0.3
"#,
        )
        .unwrap()
    }

    fn linear_config(kind: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml(&format!(
            r#"
schema_version = 1
name = "lin"
kind = "{kind}"
global_seed = 11
seeds = [0, 5]
episodes = 70

[algorithm]
k0 = 2
k1 = 4
c_beta = 0.01
schedule_variant = "short"

[linear]
n_states = 4
n_actions = 2
horizon = 3
d = 4
d_star = 2
"#
        ))
        .unwrap()
    }

    #[test]
    fn run_seed_is_stable_and_separates_inputs() {
        let a = run_seed(1, "x", 0);
        assert_eq!(a, run_seed(1, "x", 0));
        assert_ne!(a, run_seed(1, "x", 1));
        assert_ne!(a, run_seed(1, "y", 0));
        assert_ne!(a, run_seed(2, "x", 0));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = finite_config();
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.algorithm, AlgorithmConfig::default());
        assert_eq!(cfg.seeds.indices(), vec![0, 1, 2]);
    }

    #[test]
    fn validation_names_the_field() {
        let mut cfg = finite_config();
        cfg.schema_version = 2;
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "schema_version"));
        let mut cfg = finite_config();
        cfg.seeds = SeedList::List(vec![1, 1]);
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "seeds"));
        let mut cfg = finite_config();
        cfg.algorithm.delta = 1.5;
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "algorithm.delta"));
        let mut cfg = finite_config();
        cfg.kind = ScenarioKind::LinearDim;
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "linear"));
        let err = ExperimentConfig::from_toml("schema_version = 1\nname = 3").unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn default_checkpoints_are_powers_of_two() {
        assert_eq!(default_checkpoints(512), vec![64, 128, 256, 512]);
        assert_eq!(default_checkpoints(700), vec![64, 128, 256, 512]);
        assert_eq!(default_checkpoints(10), vec![10]);
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(median(&v), 2.5);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn general_run_rows_are_complete() {
        let cfg = finite_config();
        let seed = run_seed(cfg.global_seed, &cfg.scenario_id, 0);
        let inst = generate_instance(&cfg, seed).unwrap();
        let ledger = run_scenario(&cfg, &inst, seed);
        assert_eq!(ledger.episodes(), 40);
        let table = String::from_utf8(episode_table(&ledger).unwrap()).unwrap();
        let mut lines = table.lines();
        assert_eq!(lines.next().unwrap(), EPISODE_HEADER.join(","));
        let mut sum = 0.0;
        for (k, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            assert_eq!(f[0].parse::<usize>().unwrap(), k + 1);
            sum += f[6].parse::<f64>().unwrap();
            let cum: f64 = f[7].parse().unwrap();
            assert!((cum - sum).abs() <= 1e-9 * (1.0 + sum));
        }
        let s = summarize_run(&cfg, &inst, &ledger, 0, seed);
        assert_eq!(s.regret_after(0), Some(0.0));
        assert_eq!(s.regret_after(40), Some(s.final_regret));
        assert_eq!(s.nesting_ok, Some(true));
        assert!(s.realized_delta.unwrap() >= 0.01);
    }

    #[test]
    fn linear_scenarios_summarize() {
        for kind in ["linear-dim", "linear-norm", "baseline-oracle", "baseline-largest"] {
            let cfg = linear_config(kind);
            let summary = run_experiment(&cfg).unwrap();
            assert_eq!(summary.seeds.len(), 2);
            for s in &summary.seeds {
                assert_eq!(s.episodes, 70);
                assert_eq!(s.coverage_checks, 1);
                assert_eq!(s.support_recovered.is_some(), kind == "linear-dim");
                assert_eq!(!s.b_sequence.is_empty(), kind == "linear-norm");
            }
            assert_eq!(summary.aggregate, aggregate(&summary.seeds, summary.kind));
        }
    }

    #[test]
    fn experiment_is_deterministic_and_writes_tables() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = finite_config();
        cfg.output_dir = Some(dir.path().join("a"));
        let a = run_experiment(&cfg).unwrap();
        cfg.output_dir = Some(dir.path().join("b"));
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a, b);
        for f in ["seed-0000/episodes.csv", "seed-0002/epochs.csv", "seeds.csv", "summary.json"] {
            let x = fs::read(dir.path().join("a").join(f)).unwrap();
            let y = fs::read(dir.path().join("b").join(f)).unwrap();
            assert_eq!(x, y, "{f}");
        }
        let back = RunSummary::load(&dir.path().join("a/summary.json")).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn self_comparison_gives_unit_ratios() {
        let cfg = finite_config();
        let a = run_experiment(&cfg).unwrap();
        let c = compare_to_oracle(&a, &a).unwrap();
        assert!(c.rows.iter().all(|r| r.ratio == Some(1.0) && r.pre_lock_gap == 0.0));
        let mut other = cfg.clone();
        other.global_seed = 8;
        let b = run_experiment(&other).unwrap();
        assert!(matches!(compare_to_oracle(&a, &b), Err(Error::MismatchedSeeds(_))));
    }

    #[test]
    fn oracle_singleton_has_zero_regret() {
        let mut cfg = finite_config();
        cfg.kind = ScenarioKind::BaselineOracle;
        let f = cfg.finite.as_mut().unwrap();
        f.families.sizes = vec![1, 3];
        f.families.m_star = 1;
        let s = run_experiment(&cfg).unwrap();
        assert!(s.seeds.iter().all(|r| r.final_regret == 0.0));
    }

    #[test]
    fn paired_scenarios_share_instances() {
        let cfg = finite_config();
        let mut oracle = cfg.clone();
        oracle.kind = ScenarioKind::BaselineOracle;
        let seed = run_seed(cfg.global_seed, &cfg.scenario_id, 1);
        let (Instance::Finite { mdp: a, .. }, Instance::Finite { mdp: b, .. }) =
            (generate_instance(&cfg, seed).unwrap(), generate_instance(&oracle, seed).unwrap())
        else {
            unreachable!()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn calibration_covers_its_own_seeds() {
        let cfg = linear_config("baseline-largest");
        let spec = cfg.linear.clone().unwrap();
        let cal = calibrate_c_beta(&spec, 3, "cal", &[0, 1, 2], 64, &[64], 0.1, 1.0, 0.01, 1).unwrap();
        assert_eq!(cal.required.len(), 3);
        assert_eq!(cal.c_beta, cal.required.iter().copied().fold(0.0, f64::max));
    }
}
