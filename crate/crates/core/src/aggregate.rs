//! Seed and city aggregation, competition ranks, split deltas and the
//! Spearman factor diagnostic.
//!
//! All outputs are independent of input order: groups live in ordered maps
//! and every floating-point sum runs over sorted values.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dataset::{CityPolicy, Task};
use crate::metrics::{Direction, Metric};
use crate::split::Protocol;
use crate::{Error, Result};

/// One score of one model on one city-task pair for one seed and protocol.
/// A degenerate value is stored as NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub model: String,
    pub task: Task,
    pub city: String,
    pub seed: i64,
    pub protocol: Protocol,
    pub metric: Metric,
    pub value: f64,
    pub n_test: usize,
}

impl ResultRecord {
    pub fn is_degenerate(&self) -> bool {
        !self.value.is_finite()
    }
}

/// Sum of the values in ascending order.
fn stable_sum(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

fn mean(values: &[f64]) -> f64 {
    stable_sum(values) / values.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CityScore {
    pub model: String,
    pub task: Task,
    pub city: String,
    pub protocol: Protocol,
    pub metric: Metric,
    /// Mean over non-degenerate seeds.
    pub value: f64,
    pub n_seeds: usize,
    /// Degenerate seed values left out of the mean.
    pub excluded: usize,
}

/// Averages one metric over seeds.
pub fn city_score(records: &[ResultRecord]) -> Result<CityScore> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidArgument("city score of no records".into()))?;
    let key = |r: &ResultRecord| (r.model.clone(), r.task, r.city.clone(), r.protocol, r.metric);
    if records.iter().any(|r| key(r) != key(first)) {
        return Err(Error::InvalidArgument(
            "records for one city score must share model, task, city, protocol and metric".into(),
        ));
    }
    let ok: Vec<f64> = records.iter().filter(|r| !r.is_degenerate()).map(|r| r.value).collect();
    if ok.is_empty() {
        return Err(Error::Validation(format!(
            "{} {} {}: every seed value of {} is degenerate",
            first.model, first.task, first.city, first.metric
        )));
    }
    Ok(CityScore {
        model: first.model.clone(),
        task: first.task,
        city: first.city.clone(),
        protocol: first.protocol,
        metric: first.metric,
        value: mean(&ok),
        n_seeds: ok.len(),
        excluded: records.len() - ok.len(),
    })
}

/// City scores of each task's primary metric under `protocol`. Groups whose
/// every seed is degenerate are returned separately.
pub fn primary_city_scores(records: &[ResultRecord], protocol: Protocol) -> (Vec<CityScore>, Vec<String>) {
    let mut groups: BTreeMap<(String, Task, String), Vec<ResultRecord>> = BTreeMap::new();
    for r in records
        .iter()
        .filter(|r| r.protocol == protocol && r.metric == r.task.primary_metric())
    {
        groups.entry((r.model.clone(), r.task, r.city.clone())).or_default().push(r.clone());
    }
    let mut scores = Vec::new();
    let mut failed = Vec::new();
    for ((m, t, c), rs) in groups {
        match city_score(&rs) {
            Ok(s) => scores.push(s),
            Err(_) => failed.push(format!("{m},{t},{c}")),
        }
    }
    (scores, failed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub model: String,
    pub task: Task,
    pub avg: f64,
    /// Sample (n-1) standard deviation; `None` with a single city.
    pub c_std: Option<f64>,
    pub cities: Vec<String>,
    /// Cities dropped because the task is restricted to other cities.
    pub restricted: Vec<String>,
}

/// Mean and cross-city standard deviation of one model's city scores on one
/// task, after applying the city policy.
pub fn task_summary(scores: &[CityScore], policy: &CityPolicy) -> Result<TaskSummary> {
    let first = scores
        .first()
        .ok_or_else(|| Error::InvalidArgument("task summary of no city scores".into()))?;
    if scores.iter().any(|s| s.model != first.model || s.task != first.task) {
        return Err(Error::InvalidArgument("scores for one summary must share model and task".into()));
    }
    let mut seen = BTreeSet::new();
    if let Some(dup) = scores.iter().find(|s| !seen.insert(s.city.clone())) {
        return Err(Error::InvalidArgument(format!("two scores for city {}", dup.city)));
    }
    let (kept, dropped): (Vec<&CityScore>, Vec<&CityScore>) = scores.iter().partition(|s| policy.admits(s.task, &s.city));
    if kept.is_empty() {
        return Err(Error::Validation(format!(
            "{} has no admitted cities for {}",
            first.model, first.task
        )));
    }
    let values: Vec<f64> = kept.iter().map(|s| s.value).collect();
    let avg = mean(&values);
    let c_std = (values.len() >= 2).then(|| {
        let sq: Vec<f64> = values.iter().map(|v| (v - avg) * (v - avg)).collect();
        (stable_sum(&sq) / (values.len() - 1) as f64).sqrt()
    });
    let sorted = |v: Vec<&CityScore>| {
        let mut c: Vec<String> = v.into_iter().map(|s| s.city.clone()).collect();
        c.sort();
        c
    };
    Ok(TaskSummary {
        model: first.model.clone(),
        task: first.task,
        avg,
        c_std,
        cities: sorted(kept),
        restricted: sorted(dropped),
    })
}

/// Summaries for every (model, task) present in `scores`.
pub fn task_summaries(scores: &[CityScore], policy: &CityPolicy) -> Vec<TaskSummary> {
    let mut groups: BTreeMap<(String, Task), Vec<CityScore>> = BTreeMap::new();
    for s in scores {
        groups.entry((s.model.clone(), s.task)).or_default().push(s.clone());
    }
    groups.into_values().filter_map(|g| task_summary(&g, policy).ok()).collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CityRanks {
    pub ranks: BTreeMap<String, usize>,
    /// Models with a non-finite score.
    pub excluded: Vec<String>,
}

/// Competition ranks: rank 1 is best, exact ties share the best rank and the
/// next rank skips by the size of the tie.
pub fn city_ranks(scores: &BTreeMap<String, f64>, direction: Direction) -> CityRanks {
    let (finite, bad): (Vec<_>, Vec<_>) = scores.iter().partition(|(_, v)| v.is_finite());
    let oriented: Vec<(&String, f64)> = finite.iter().map(|(m, v)| (*m, direction.orient(**v))).collect();
    let ranks = oriented
        .iter()
        .map(|(m, v)| ((*m).clone(), 1 + oriented.iter().filter(|(_, w)| w > v).count()))
        .collect();
    CityRanks {
        ranks,
        excluded: bad.into_iter().map(|(m, _)| m.clone()).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RankTable {
    /// Per (task, city): model to rank.
    pub city: BTreeMap<(Task, String), BTreeMap<String, usize>>,
    /// Per task: model to mean rank over the cities where it appears.
    pub task_mean: BTreeMap<Task, BTreeMap<String, f64>>,
    /// Model to equal-task average of mean city ranks.
    pub overall: BTreeMap<String, f64>,
    /// Human-readable notes on excluded models.
    pub exclusions: Vec<String>,
}

/// Ranks the primary city scores of one protocol. Restricted cities are
/// dropped first; a model missing from a city is ranked only where present.
pub fn rank_table(scores: &[CityScore], policy: &CityPolicy) -> Result<RankTable> {
    let mut cells: BTreeMap<(Task, String), BTreeMap<String, f64>> = BTreeMap::new();
    for s in scores.iter().filter(|s| policy.admits(s.task, &s.city)) {
        if cells
            .entry((s.task, s.city.clone()))
            .or_default()
            .insert(s.model.clone(), s.value)
            .is_some()
        {
            return Err(Error::InvalidArgument(format!(
                "duplicate score for {} {} {}",
                s.model, s.task, s.city
            )));
        }
    }
    let mut table = RankTable::default();
    let mut per_task: BTreeMap<Task, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for ((task, city), models) in cells {
        let r = city_ranks(&models, task.direction());
        for m in &r.excluded {
            table.exclusions.push(format!("{m} excluded from {task} {city}: non-finite score"));
        }
        for (m, rank) in &r.ranks {
            per_task.entry(task).or_default().entry(m.clone()).or_default().push(*rank as f64);
        }
        table.city.insert((task, city), r.ranks);
    }
    for (task, models) in per_task {
        table
            .task_mean
            .insert(task, models.into_iter().map(|(m, r)| (m, mean(&r))).collect());
    }
    if !table.task_mean.is_empty() {
        let (overall, missing) = overall_rank(&table.task_mean)?;
        table.overall = overall;
        table.exclusions.extend(
            missing
                .into_iter()
                .map(|m| format!("{m} excluded from overall rank: missing tasks")),
        );
    }
    Ok(table)
}

/// Equal-task average of per-task mean ranks. Models absent from any task
/// are left out and returned separately.
pub fn overall_rank(per_task: &BTreeMap<Task, BTreeMap<String, f64>>) -> Result<(BTreeMap<String, f64>, Vec<String>)> {
    if per_task.is_empty() {
        return Err(Error::InvalidArgument("overall rank needs at least one task".into()));
    }
    let models: BTreeSet<&String> = per_task.values().flat_map(|m| m.keys()).collect();
    let mut overall = BTreeMap::new();
    let mut missing = Vec::new();
    for m in models {
        let rs: Option<Vec<f64>> = per_task.values().map(|t| t.get(m).copied()).collect();
        match rs {
            Some(rs) => {
                overall.insert(m.clone(), mean(&rs));
            }
            None => missing.push(m.clone()),
        }
    }
    Ok((overall, missing))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDelta {
    pub model: String,
    pub task: Task,
    pub city: String,
    pub metric: Metric,
    pub random: f64,
    pub spatial: f64,
    /// Raw `random - spatial`; not oriented by metric direction.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SplitDeltaReport {
    pub deltas: Vec<SplitDelta>,
    /// Keys present under only one protocol, as `model,task,city,metric`.
    pub gaps: Vec<String>,
}

pub fn split_delta(random: &[CityScore], spatial: &[CityScore]) -> SplitDeltaReport {
    let index = |v: &[CityScore]| -> BTreeMap<(String, Task, String, Metric), f64> {
        v.iter()
            .map(|s| ((s.model.clone(), s.task, s.city.clone(), s.metric), s.value))
            .collect()
    };
    let (r, s) = (index(random), index(spatial));
    let mut out = SplitDeltaReport::default();
    for k in r.keys().chain(s.keys()).collect::<BTreeSet<_>>() {
        match (r.get(k), s.get(k)) {
            (Some(&rv), Some(&sv)) => out.deltas.push(SplitDelta {
                model: k.0.clone(),
                task: k.1,
                city: k.2.clone(),
                metric: k.3,
                random: rv,
                spatial: sv,
                delta: rv - sv,
            }),
            _ => out.gaps.push(format!("{},{},{},{}", k.0, k.1, k.2, k.3)),
        }
    }
    out
}

/// Ranks with ties replaced by their average rank (1-based).
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpearmanResult {
    /// `None` when either side is constant.
    pub rho: Option<f64>,
    /// Two-sided, unadjusted, from the t approximation.
    pub p_value: Option<f64>,
    pub n: usize,
    /// Fewer than 10 cities: the t approximation is rough.
    pub approximate: bool,
}

/// Spearman correlation between a city factor and city performance.
/// Lower-better performance is sign-flipped first so that positive rho
/// always means the factor goes with better performance.
pub fn spearman_factor_correlation(
    factors: &BTreeMap<String, f64>,
    perf: &BTreeMap<String, f64>,
    direction: Direction,
) -> Result<SpearmanResult> {
    let pairs: Vec<(f64, f64)> = factors
        .iter()
        .filter_map(|(c, f)| perf.get(c).map(|p| (*f, direction.orient(*p))))
        .filter(|(f, p)| f.is_finite() && p.is_finite())
        .collect();
    let n = pairs.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "Spearman correlation needs at least 3 cities, got {n}"
        )));
    }
    let rx = average_ranks(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let ry = average_ranks(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    let approximate = n < 10;
    let Some(rho) = pearson(&rx, &ry) else {
        return Ok(SpearmanResult {
            rho: None,
            p_value: None,
            n,
            approximate,
        });
    };
    let df = (n - 2) as f64;
    let p_value = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Ok(SpearmanResult {
        rho: Some(rho),
        p_value: Some(p_value),
        n,
        approximate,
    })
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}
