//! Epoch-doubling model selection over nested finite families.
//!
//! Epoch `i` plays `2^i` episodes at confidence `delta / 2^i` on the smallest
//! family whose normalized loss stays within the threshold of the largest
//! family's. Data is shared across epochs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::families::NestedModelFamilies;
use crate::ledger::{EpisodeInfo, Phase, RunLedger, SelectionRecord};
use crate::mdp::{EpisodicMdp, TransitionKernel};
use crate::vtr::{empirical_loss, fit_kernel, VtrDataset, VtrLearner};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSchedule {
    pub epoch: usize,
    pub episodes: usize,
    pub delta: f64,
    /// Episodes completed before the epoch starts.
    pub prior_episodes: usize,
}

impl EpochSchedule {
    /// Doubling schedule for epoch `i >= 1`.
    pub fn doubling(epoch: usize, delta: f64) -> Self {
        assert!(epoch >= 1, "epochs are 1-based");
        Self {
            epoch,
            episodes: 1 << epoch,
            delta: delta / (1u64 << epoch) as f64,
            prior_episodes: (1 << epoch) - 2,
        }
    }
}

/// Loss of the best kernel of `family`, normalized by the number of tuples.
pub fn test_statistic(data: &VtrDataset, family: &[TransitionKernel]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let best = fit_kernel(data, family);
    Ok(empirical_loss(data, &family[best]) / data.len() as f64)
}

/// `gamma_i = T_M + sqrt(i) / 2^(i/2)`.
pub fn threshold(t_largest: f64, epoch: usize) -> f64 {
    let i = epoch as f64;
    t_largest + i.sqrt() * (-i / 2.0).exp2()
}

/// Smallest 1-based class with `T_m <= gamma`. Falls back to the largest
/// class, flagging an anomaly, if rounding empties the set.
pub fn select_class(statistics: &[f64], gamma: f64) -> (usize, bool) {
    match statistics.iter().position(|&t| t <= gamma) {
        Some(i) => (i + 1, false),
        None => (statistics.len(), true),
    }
}

/// Runs the adaptive algorithm for `total_episodes` episodes.
pub fn run_arl_gen<R: Rng + ?Sized>(
    mdp: &EpisodicMdp,
    families: &NestedModelFamilies,
    total_episodes: usize,
    delta: f64,
    rng: &mut R,
) -> RunLedger {
    let mut ledger = RunLedger::new(mdp);
    let mut learner = VtrLearner::new(mdp, families.largest());
    let m = families.num_families();
    let mut epoch = 1;
    while ledger.episodes() < total_episodes {
        let sched = EpochSchedule::doubling(epoch, delta);
        let (statistics, gamma, selected, anomaly) = if learner.data().is_empty() {
            (Vec::new(), None, m, false)
        } else {
            let n = learner.data().len() as f64;
            let cache = learner.cache();
            let stats: Vec<f64> = families
                .sizes()
                .iter()
                .map(|&len| cache.loss(cache.fit(len)) / n)
                .collect();
            let gamma = threshold(stats[m - 1], epoch);
            let (sel, anomaly) = select_class(&stats, gamma);
            (stats, Some(gamma), sel, anomaly)
        };
        let first_episode = ledger.episodes();
        let episodes = sched.episodes.min(total_episodes - first_episode);
        let family_len = families.family_size(selected);
        for _ in 0..episodes {
            let info = EpisodeInfo {
                epoch,
                phase: Some(Phase::Base),
                selected_class: Some(selected),
                ..Default::default()
            };
            learner.play_episode(mdp, family_len, sched.delta, rng, &mut ledger, info);
        }
        ledger.selections.push(SelectionRecord {
            epoch,
            first_episode,
            episodes,
            delta: sched.delta,
            statistics,
            gamma,
            selected,
            anomaly,
        });
        epoch += 1;
    }
    ledger
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::{build_nested_families, FamilySpec};
    use crate::mdp::{sample_episode, value_iteration, Rewards};
    use crate::vtr::run_ucrl_vtr;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_is_exact() {
        let mut prior = 0;
        for i in 1..20 {
            let s = EpochSchedule::doubling(i, 0.1);
            assert_eq!(s.episodes, 1 << i);
            assert_eq!(s.delta, 0.1 / 2f64.powi(i as i32));
            assert_eq!(s.prior_episodes, prior);
            prior += s.episodes;
        }
    }

    #[test]
    fn threshold_closed_forms() {
        assert!((threshold(0.5, 4) - 1.0).abs() < 1e-15);
        assert!((threshold(0.0, 1) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((threshold(0.3, 200) - 0.3).abs() < 1e-25);
    }

    #[test]
    fn selection_rules() {
        assert_eq!(select_class(&[0.9, 0.3, 0.2], 0.35), (2, false));
        assert_eq!(select_class(&[0.4, 0.4, 0.4], 0.4), (1, false));
        assert_eq!(select_class(&[0.9, 0.8, 0.2], 0.25), (3, false));
        assert_eq!(select_class(&[0.9, 0.8, 0.2], 0.1), (3, true));
    }

    #[test]
    fn empty_data_is_an_error() {
        let k = TransitionKernel::deterministic(2, 1, &[1, 0]).unwrap();
        assert!(matches!(test_statistic(&VtrDataset::new(), &[k]), Err(Error::EmptyData)));
    }

    #[test]
    fn perfect_fit_statistic_is_zero() {
        let kernel = TransitionKernel::deterministic(3, 2, &[1, 2, 0, 0, 2, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mdp = EpisodicMdp::new(3, 0, Rewards::random(3, 2, &mut rng), kernel.clone()).unwrap();
        let (v, pi) = value_iteration(&kernel, &mdp.reward, 3);
        let next: Vec<_> = (1..=3).map(|h| v.v(h).to_vec()).collect();
        let mut data = VtrDataset::new();
        for k in 0..5 {
            data.push_episode(&sample_episode(&mdp, &pi, k, &mut rng), &next);
        }
        let other = TransitionKernel::random(3, 2, &mut rng);
        assert_eq!(test_statistic(&data, &[other, kernel]).unwrap(), 0.0);
    }

    fn generated(seed: u64) -> (EpisodicMdp, NestedModelFamilies) {
        let spec = FamilySpec {
            sizes: vec![3, 6, 9],
            m_star: 2,
            target_delta: 0.05,
            distractor_radius: 0.2,
        };
        (seed..seed + 200)
            .find_map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let mdp = EpisodicMdp::random_peaked(5, 2, 3, &mut rng);
                build_nested_families(&mdp, &spec, None, &mut rng).ok().map(|f| (mdp, f))
            })
            .expect("feasible instance")
    }

    #[test]
    fn statistics_monotone_in_nesting_and_replayable() {
        let (mdp, fam) = generated(3);
        let ledger = run_arl_gen(&mdp, &fam, 200, 0.1, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(ledger.episodes(), 200);
        // replay: rebuild the dataset from the ledger and recompute each epoch's statistics
        let mut data = VtrDataset::new();
        let mut rec = ledger.records.iter();
        for sel in &ledger.selections {
            if sel.statistics.is_empty() {
                assert_eq!(sel.selected, 3);
            } else {
                for w in sel.statistics.windows(2) {
                    assert!(w[0] >= w[1]);
                }
                assert!(sel.statistics[2] <= sel.gamma.unwrap());
                for (m, &t) in sel.statistics.iter().enumerate() {
                    let replay = test_statistic(&data, fam.family(m + 1)).unwrap();
                    assert!((replay - t).abs() <= 1e-12 * t.max(1.0));
                }
            }
            for r in rec.by_ref().take(sel.episodes) {
                data.push_episode(&r.trajectory, &r.info.next_values);
            }
        }
    }

    #[test]
    fn single_family_matches_base_learner_on_oracle_family() {
        let (mdp, _) = generated(4);
        let fam = NestedModelFamilies::from_pool(vec![mdp.kernel.clone()], vec![1], 0, 0.0, vec![]).unwrap();
        let a = run_arl_gen(&mdp, &fam, 100, 0.1, &mut ChaCha8Rng::seed_from_u64(7));
        let b = run_ucrl_vtr(&mdp, fam.largest(), 100, 0.1, &mut ChaCha8Rng::seed_from_u64(7), RunLedger::new(&mdp));
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.trajectory, y.trajectory);
            assert_eq!(x.policy, y.policy);
        }
        assert_eq!(a.cum_regret(), 0.0);
    }

    #[test]
    fn episodes_per_epoch_truncate() {
        let (mdp, fam) = generated(5);
        let ledger = run_arl_gen(&mdp, &fam, 20, 0.1, &mut ChaCha8Rng::seed_from_u64(2));
        let counts: Vec<_> = ledger.selections.iter().map(|s| s.episodes).collect();
        assert_eq!(counts, vec![2, 4, 8, 6]);
    }
}
