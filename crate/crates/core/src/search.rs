//! Predictor-guided candidate ranking with oracle and random baselines.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{mean_std, rank};
use crate::numerics::rng::substream;
use crate::predictor::Predict;
use crate::synth::{oracle_success, PlantedOracle};
use crate::workflow::{TaskRecord, Workflow};

pub enum RewardSource<'a> {
    Predictor(&'a dyn Predict),
    Oracle(&'a PlantedOracle),
    /// iid uniform score per workflow.
    Random {
        seed: u64,
    },
}

impl RewardSource<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            RewardSource::Predictor(_) => "predictor",
            RewardSource::Oracle(_) => "oracle",
            RewardSource::Random { .. } => "random",
        }
    }
}

impl fmt::Debug for RewardSource<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Whether candidates are ranked once on their mean over tasks or once per task.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    #[default]
    Pooled,
    PerTask,
}

fn check_pool(pool: &[Workflow], tasks: &[TaskRecord]) -> Result<()> {
    if pool.is_empty() || tasks.is_empty() {
        return Err(Error::usage("candidate pool and task set must be non-empty"));
    }
    let mut ids: Vec<&str> = pool.iter().map(|w| w.id.as_str()).collect();
    ids.sort_unstable();
    if let Some(d) = ids.windows(2).find(|p| p[0] == p[1]) {
        return Err(Error::usage(format!("duplicate candidate id `{}`", d[0])));
    }
    Ok(())
}

/// Score matrix, candidate-major: `out[w][t]`.
fn pair_scores(pool: &[Workflow], tasks: &[TaskRecord], reward: &RewardSource) -> Result<Vec<Vec<f64>>> {
    let pairs: Vec<(&Workflow, &TaskRecord)> = pool.iter().flat_map(|w| tasks.iter().map(move |t| (w, t))).collect();
    let flat = match reward {
        RewardSource::Predictor(p) => p.predict_pairs(&pairs)?,
        RewardSource::Oracle(o) => pairs
            .iter()
            .map(|(w, t)| oracle_success(w, t, o))
            .collect::<Result<_>>()?,
        RewardSource::Random { seed } => {
            let mut rng = substream(*seed, "search.random");
            let per_workflow: Vec<f64> = pool.iter().map(|_| rng.random::<f64>()).collect();
            pairs
                .iter()
                .enumerate()
                .map(|(i, _)| per_workflow[i / tasks.len()])
                .collect()
        }
    };
    Ok(flat.chunks(tasks.len()).map(<[f64]>::to_vec).collect())
}

/// Mean score over `tasks` for every candidate.
pub fn score_candidates(
    pool: &[Workflow],
    tasks: &[TaskRecord],
    reward: &RewardSource,
) -> Result<BTreeMap<String, f64>> {
    check_pool(pool, tasks)?;
    let scores = pair_scores(pool, tasks, reward)?;
    Ok(pool
        .iter()
        .zip(scores)
        .map(|(w, s)| (w.id.clone(), s.iter().sum::<f64>() / s.len() as f64))
        .collect())
}

/// Top-k ids by descending score, smaller id first on ties.
pub fn top_k(scores: &BTreeMap<String, f64>, k: usize) -> Result<Vec<String>> {
    if k == 0 || k > scores.len() {
        return Err(Error::usage(format!("k = {k} outside 1..={}", scores.len())));
    }
    let mut ids = rank(scores);
    ids.truncate(k);
    Ok(ids)
}

pub fn guided_rank(pool: &[Workflow], tasks: &[TaskRecord], reward: &RewardSource, k: usize) -> Result<Vec<String>> {
    top_k(&score_candidates(pool, tasks, reward)?, k)
}

/// One top-k list per task, in task order.
pub fn guided_rank_per_task(
    pool: &[Workflow],
    tasks: &[TaskRecord],
    reward: &RewardSource,
    k: usize,
) -> Result<Vec<Vec<String>>> {
    check_pool(pool, tasks)?;
    let scores = pair_scores(pool, tasks, reward)?;
    (0..tasks.len())
        .map(|t| {
            let m: BTreeMap<String, f64> = pool.iter().zip(&scores).map(|(w, s)| (w.id.clone(), s[t])).collect();
            top_k(&m, k)
        })
        .collect()
}

/// Mean oracle success of the picks a reward source makes.
pub fn realized_success(
    pool: &[Workflow],
    tasks: &[TaskRecord],
    reward: &RewardSource,
    oracle: &PlantedOracle,
    k: usize,
    scope: Scope,
) -> Result<f64> {
    let by_id: BTreeMap<&str, &Workflow> = pool.iter().map(|w| (w.id.as_str(), w)).collect();
    match scope {
        Scope::Pooled => {
            let picks = guided_rank(pool, tasks, reward, k)?;
            let mut sum = 0.0;
            for id in &picks {
                for t in tasks {
                    sum += oracle_success(by_id[id.as_str()], t, oracle)?;
                }
            }
            Ok(sum / (picks.len() * tasks.len()) as f64)
        }
        Scope::PerTask => {
            let picks = guided_rank_per_task(pool, tasks, reward, k)?;
            let mut sum = 0.0;
            for (t, ids) in tasks.iter().zip(&picks) {
                for id in ids {
                    sum += oracle_success(by_id[id.as_str()], t, oracle)?;
                }
            }
            Ok(sum / (k * tasks.len()) as f64)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretRow {
    pub reward_source: String,
    pub k: usize,
    pub trial: usize,
    pub realized_success: f64,
    /// Oracle-guided realized success minus this row's.
    pub gap_vs_oracle: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretSummary {
    pub reward_source: String,
    pub mean: f64,
    pub std: f64,
    pub mean_gap: f64,
}

/// Realized success of predictor, oracle and random selection over `trials`
/// repetitions. Only the random source changes between trials.
#[allow(clippy::too_many_arguments)]
pub fn compare_rewards(
    pool: &[Workflow],
    tasks: &[TaskRecord],
    predictor: &dyn Predict,
    oracle: &PlantedOracle,
    k: usize,
    trials: usize,
    seed: u64,
    scope: Scope,
) -> Result<Vec<RegretRow>> {
    if trials == 0 {
        return Err(Error::usage("trials must be positive"));
    }
    let best = realized_success(pool, tasks, &RewardSource::Oracle(oracle), oracle, k, scope)?;
    let guided = realized_success(pool, tasks, &RewardSource::Predictor(predictor), oracle, k, scope)?;
    let mut rows = Vec::with_capacity(3 * trials);
    for trial in 0..trials {
        let random = RewardSource::Random {
            seed: seed.wrapping_add(trial as u64),
        };
        let r = realized_success(pool, tasks, &random, oracle, k, scope)?;
        for (name, v) in [("predictor", guided), ("oracle", best), ("random", r)] {
            rows.push(RegretRow {
                reward_source: name.into(),
                k,
                trial,
                realized_success: v,
                gap_vs_oracle: best - v,
            });
        }
    }
    Ok(rows)
}

pub fn summarize(rows: &[RegretRow]) -> Vec<RegretSummary> {
    let mut by: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let e = by.entry(&r.reward_source).or_default();
        e.0.push(r.realized_success);
        e.1.push(r.gap_vs_oracle);
    }
    by.into_iter()
        .map(|(name, (v, g))| {
            let (mean, std) = mean_std(&v);
            RegretSummary {
                reward_source: name.into(),
                mean,
                std,
                mean_gap: mean_std(&g).0,
            }
        })
        .collect()
}

pub fn regret_csv(rows: &[RegretRow]) -> String {
    let mut out = String::from("reward_source,k,trial,realized_success,gap_vs_oracle\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.reward_source, r.k, r.trial, r.realized_success, r.gap_vs_oracle
        ));
    }
    out
}
