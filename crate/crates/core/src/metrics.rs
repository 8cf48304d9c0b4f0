//! Fit quality, per-experiment summaries and the rank-sum test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::ssm::{StateSpaceModel, Vector};
use crate::sysid::TimeSeriesDataset;

/// Best fit rate `100·(1 − ‖y − ŷ‖ / ‖y − ȳ‖)`.
pub fn bfr(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    if actual.len() != predicted.len() || actual.is_empty() {
        return Err(Error::Dimension(format!(
            "bfr needs equal nonzero lengths, got {} and {}",
            actual.len(),
            predicted.len()
        )));
    }
    let mean = actual.iter().sum::<f64>() / actual.len() as f64;
    let den: f64 = actual.iter().map(|y| (y - mean).powi(2)).sum();
    if den <= 0.0 {
        return Err(Error::UndefinedBfr);
    }
    let num: f64 = actual
        .iter()
        .zip(predicted)
        .map(|(y, yh)| (y - yh).powi(2))
        .sum();
    Ok(100.0 * (1.0 - (num / den).sqrt()))
}

/// Per-output BFR of the free-run simulation from the zero state. An
/// overflowing simulation scores `−∞` on every channel.
pub fn worker_bfr(model: &StateSpaceModel, data: &TimeSeriesDataset) -> Result<Vec<f64>> {
    data.check_model(model)?;
    let predicted = match model.simulate(data.inputs(), &Vector::zeros(model.nx())) {
        Ok(traj) => traj.outputs,
        Err(Error::Overflow { .. }) => return Ok(vec![f64::NEG_INFINITY; model.ny()]),
        Err(e) => return Err(e),
    };
    (0..model.ny())
        .map(|p| {
            let actual: Vec<f64> = data.outputs().row(p).iter().copied().collect();
            let pred: Vec<f64> = predicted.row(p).iter().copied().collect();
            let score = bfr(&actual, &pred)?;
            Ok(if score.is_nan() { f64::NEG_INFINITY } else { score })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkerRecord {
    pub train_bfr: Vec<f64>,
    pub test_bfr: Option<Vec<f64>>,
    /// Condition number of this worker's alignment transform; absent for
    /// the initialization record and failed rounds.
    pub kappa: Option<f64>,
    pub ill_conditioned: bool,
    /// Simulation of the worker's model overflowed on some split.
    pub overflow: bool,
    /// Local update could not take a single step.
    pub stalled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 0 for the initial models, `r + 1` after communication round `r`.
    pub round: usize,
    pub workers: Vec<WorkerRecord>,
    /// Absent when no global model exists for this round.
    pub global_stable: Option<bool>,
    pub global_spectral_radius: Option<f64>,
    /// Reason aggregation was skipped this round.
    pub alignment_failure: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionPolicy {
    /// Drop seeds whose final global model is unstable or failed to learn.
    #[default]
    UnstableOrFailed,
    KeepAll,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Worker-averaged final BFR per output for one seed.
fn final_channel_means(record: &RoundRecord, split: Split) -> Option<Vec<f64>> {
    let per_worker: Vec<&Vec<f64>> = record
        .workers
        .iter()
        .map(|w| match split {
            Split::Train => Some(&w.train_bfr),
            Split::Test => w.test_bfr.as_ref(),
        })
        .collect::<Option<_>>()?;
    let ny = per_worker.first()?.len();
    let m = per_worker.len() as f64;
    Some(
        (0..ny)
            .map(|p| per_worker.iter().map(|b| b[p]).sum::<f64>() / m)
            .collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedVerdict {
    pub seed: u64,
    pub unstable: bool,
    pub failed_to_learn: bool,
    pub aggregation_failed: bool,
    pub excluded: bool,
    pub train_bfr: Vec<f64>,
    pub test_bfr: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStat {
    pub mean: f64,
    /// Sample standard deviation across included seeds; absent for a
    /// single seed.
    pub dispersion: Option<f64>,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaStat {
    pub round: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub median_log10: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub seeds: usize,
    pub unstable: usize,
    pub failed_to_learn: usize,
    pub aggregation_failed: usize,
    pub excluded_seeds: Vec<u64>,
    /// Per-output statistics; `None` when every seed was excluded.
    pub train: Option<Vec<ChannelStat>>,
    pub test: Option<Vec<ChannelStat>>,
    pub kappa_by_round: Vec<KappaStat>,
    pub per_seed: Vec<SeedVerdict>,
}

pub fn verdict(seed: u64, records: &[RoundRecord], policy: ExclusionPolicy) -> Result<SeedVerdict> {
    let last = records
        .last()
        .ok_or_else(|| Error::Empty(format!("seed {seed} has no records")))?;
    let train = final_channel_means(last, Split::Train)
        .ok_or_else(|| Error::Empty(format!("seed {seed} has no workers")))?;
    let test = final_channel_means(last, Split::Test);
    let unstable = last.global_stable == Some(false);
    let failed_to_learn = train
        .iter()
        .chain(test.iter().flatten())
        .any(|b| !(*b >= 0.0));
    let aggregation_failed = last.alignment_failure.is_some();
    let excluded = match policy {
        ExclusionPolicy::UnstableOrFailed => unstable || failed_to_learn || aggregation_failed,
        ExclusionPolicy::KeepAll => false,
    };
    Ok(SeedVerdict {
        seed,
        unstable,
        failed_to_learn,
        aggregation_failed,
        excluded,
        train_bfr: train,
        test_bfr: test,
    })
}

fn mean_and_dispersion(values: &[f64]) -> ChannelStat {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let dispersion = (n > 1).then(|| {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    });
    ChannelStat { mean, dispersion, n }
}

fn channel_stats(verdicts: &[&SeedVerdict], pick: impl Fn(&SeedVerdict) -> Option<&Vec<f64>>) -> Option<Vec<ChannelStat>> {
    let rows: Vec<&Vec<f64>> = verdicts.iter().map(|v| pick(v)).collect::<Option<_>>()?;
    let ny = rows.first()?.len();
    Some(
        (0..ny)
            .map(|p| mean_and_dispersion(&rows.iter().map(|r| r[p]).collect::<Vec<_>>()))
            .collect(),
    )
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// κ statistics per round over all seeds and workers.
pub fn kappa_by_round<'a, I>(runs: I) -> Vec<KappaStat>
where
    I: IntoIterator<Item = &'a [RoundRecord]>,
{
    let mut by_round: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
    for records in runs {
        for rec in records {
            let entry = by_round.entry(rec.round).or_default();
            entry.extend(rec.workers.iter().filter_map(|w| w.kappa));
        }
    }
    by_round
        .into_iter()
        .filter(|(_, k)| !k.is_empty())
        .map(|(round, kappas)| {
            let mut logs: Vec<f64> = kappas.iter().map(|k| k.log10()).collect();
            logs.sort_by(f64::total_cmp);
            KappaStat {
                round,
                mean: kappas.iter().sum::<f64>() / kappas.len() as f64,
                min: kappas.iter().copied().fold(f64::INFINITY, f64::min),
                max: kappas.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                median_log10: median(&logs),
            }
        })
        .collect()
}

/// Aggregates per-seed record sequences. The final record of each seed
/// decides instability and failure to learn.
pub fn summarize(runs: &[(u64, Vec<RoundRecord>)], policy: ExclusionPolicy) -> Result<ExperimentSummary> {
    if runs.is_empty() {
        return Err(Error::Empty("no seeds to summarize".into()));
    }
    let mut per_seed = runs
        .iter()
        .map(|(seed, records)| verdict(*seed, records, policy))
        .collect::<Result<Vec<_>>>()?;
    per_seed.sort_by_key(|v| v.seed);
    let included: Vec<&SeedVerdict> = per_seed.iter().filter(|v| !v.excluded).collect();
    Ok(ExperimentSummary {
        seeds: per_seed.len(),
        unstable: per_seed.iter().filter(|v| v.unstable).count(),
        failed_to_learn: per_seed.iter().filter(|v| v.failed_to_learn).count(),
        aggregation_failed: per_seed.iter().filter(|v| v.aggregation_failed).count(),
        excluded_seeds: per_seed.iter().filter(|v| v.excluded).map(|v| v.seed).collect(),
        train: channel_stats(&included, |v| Some(&v.train_bfr)),
        test: channel_stats(&included, |v| v.test_bfr.as_ref()),
        kappa_by_round: kappa_by_round(runs.iter().map(|(_, r)| r.as_slice())),
        per_seed,
    })
}

/// Average ranks (1-based) of the pooled sample, ties sharing their mean rank.
fn pooled_ranks(pooled: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
    let mut ranks = vec![0.0; pooled.len()];
    let mut ties = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && pooled[order[end]] == pooled[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = rank;
        }
        if end - start > 1 {
            ties.push(end - start);
        }
        start = end;
    }
    (ranks, ties)
}

/// `counts[s]` = number of `k`-subsets of `{1, …, n}` whose sum is `s`.
fn subset_sum_counts(n: usize, k: usize) -> Vec<f64> {
    let max_sum = n * (n + 1) / 2;
    // table[j][s]: j chosen so far
    let mut table = vec![vec![0.0; max_sum + 1]; k + 1];
    table[0][0] = 1.0;
    for item in 1..=n {
        for j in (1..=k.min(item)).rev() {
            for s in (item..=max_sum).rev() {
                table[j][s] += table[j - 1][s - item];
            }
        }
    }
    table.swap_remove(k)
}

/// Pooled size at or below which tie-free samples use the exact null
/// distribution.
pub const EXACT_RANKSUM_LIMIT: usize = 12;

/// Two-sided Wilcoxon rank-sum (Mann–Whitney) p-value.
///
/// Small tie-free samples use the exact permutation distribution; otherwise
/// the normal approximation with tie and continuity corrections.
pub fn ranksum_test(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Dimension("rank-sum test needs two nonempty samples".into()));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::Numeric("rank-sum sample contains NaN".into()));
    }
    let (na, nb) = (a.len(), b.len());
    let n = na + nb;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = pooled_ranks(&pooled);
    let rank_sum_a: f64 = ranks[..na].iter().sum();

    if n <= EXACT_RANKSUM_LIMIT && ties.is_empty() {
        let counts = subset_sum_counts(n, na);
        let total: f64 = counts.iter().sum();
        let w = rank_sum_a.round() as usize;
        let lower: f64 = counts[..=w].iter().sum();
        let upper: f64 = counts[w..].iter().sum();
        return Ok((2.0 * lower.min(upper) / total).min(1.0));
    }

    let u = rank_sum_a - (na * (na + 1)) as f64 / 2.0;
    let mean = (na * nb) as f64 / 2.0;
    let nf = n as f64;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (nf * (nf - 1.0));
    let var = (na * nb) as f64 / 12.0 * ((nf + 1.0) - tie_term);
    if var <= 0.0 {
        return Ok(1.0);
    }
    let z = ((u - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::standard();
    Ok((2.0 * normal.sf(z)).min(1.0))
}
