//! Benchmark orchestration: splits, alignment, training, scoring and
//! reports.
//!
//! A run first loads every task dataset and computes every split, writing
//! their hashes to `splits.csv`, and only then touches representations.
//! Each (model, city, task) group is evaluated on a worker; records flow to
//! a single writer that rewrites `results.csv` in canonical order after
//! every group, so an interrupted run resumes to the same final store.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use ndarray::Axis;
use rayon::prelude::*;
use serde::Serialize;

use crate::aggregate::{
    primary_city_scores, rank_table, spearman_factor_correlation, split_delta, task_summaries, CityScore, ResultRecord, TaskSummary,
};
use crate::align::{align, coverage, AlignedMatrix, EntityAggregation};
use crate::dataset::{load_task_dataset, CityPolicy, Label, LabelKind, Task, TaskDataset};
use crate::grid::{build_block_grid, HexGrid, Rect, H3_RES8_EDGE_M};
use crate::heads::{
    split_rows, train_head, HeadConfig, HeadKind, OutputKind, Predictions, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON, EARLY_STOP_TOLERANCE,
};
use crate::io::{read_result_store, write_result_store};
use crate::manifest::{load_representation, validate_manifest, Manifest};
use crate::metrics::{classification_metrics, distribution_metrics, regression_metrics, Metric, MetricValue, KL_EPSILON};
use crate::pe::PeConfig;
use crate::split::{
    derive_seed, random_split, spatial_split, write_split_cache, Protocol, SplitAssignment, SplitLabel, DEFAULT_SEEDS, DEFAULT_TEST_FRAC,
    DEFAULT_VAL_FRAC, RNG_NAME,
};
use crate::{Error, Result};

pub const RESULTS_FILE: &str = "results.csv";
pub const SPLITS_FILE: &str = "splits.csv";
pub const JOBS_FILE: &str = "jobs.csv";
pub const FAILURES_FILE: &str = "failures.csv";
pub const META_FILE: &str = "run_meta.json";
pub const FACTORS_FILE: &str = "city_factors.csv";

/// Every label kind reports three metrics.
const METRICS_PER_JOB: usize = 3;

/// Test-set scores of one trained head.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: [MetricValue; 3],
    pub n_test: usize,
}

impl Evaluation {
    pub fn value(&self, m: Metric) -> f64 {
        self.metrics.iter().find(|v| v.metric == m).map_or(f64::NAN, |v| v.value)
    }
}

/// The benchmark head for a task's label kind.
pub fn head_config_for(task: &TaskDataset, kind: HeadKind) -> Result<HeadConfig> {
    let output = match task.task.label_kind() {
        LabelKind::Scalar => OutputKind::Scalar,
        LabelKind::Class => OutputKind::Logits(
            task.n_classes
                .ok_or_else(|| Error::Validation(format!("{} has no class count", task.task)))?,
        ),
        LabelKind::Distribution => OutputKind::Distribution(
            task.n_bins()
                .ok_or_else(|| Error::Validation(format!("{} has no bins", task.task)))?,
        ),
    };
    Ok(HeadConfig::new(kind, output))
}

/// Trains on the split's training units and scores its valid test units.
pub fn evaluate(
    features: &AlignedMatrix,
    task: &TaskDataset,
    split: &SplitAssignment,
    cfg: &HeadConfig,
    run_seed: u64,
) -> Result<Evaluation> {
    let head = train_head(features, &task.labels, split, cfg, run_seed)?;
    let test = split_rows(features, split, SplitLabel::Test);
    if test.is_empty() {
        return Err(Error::Training("no valid test units".into()));
    }
    let x = features.rows.select(Axis(0), &test);
    let metrics = match head.predict(x.view())? {
        Predictions::Scalar(p) => {
            let y: Vec<f64> = test.iter().map(|&i| scalar(&task.labels[i])).collect();
            regression_metrics(&y, &p)?.values()
        }
        Predictions::Class(p) => {
            let y: Vec<usize> = test.iter().map(|&i| class(&task.labels[i])).collect();
            classification_metrics(&y, &p, cfg.output.width())?.values()
        }
        Predictions::Distribution(q) => {
            let p: Vec<Vec<f64>> = test.iter().map(|&i| distribution(&task.labels[i])).collect();
            distribution_metrics(&p, &q)?.values()
        }
    };
    Ok(Evaluation {
        metrics,
        n_test: test.len(),
    })
}

fn scalar(l: &Label) -> f64 {
    match l {
        Label::Scalar(v) => *v,
        _ => unreachable!("label kinds are validated on load"),
    }
}

fn class(l: &Label) -> usize {
    match l {
        Label::Class(k) => *k,
        _ => unreachable!("label kinds are validated on load"),
    }
}

fn distribution(l: &Label) -> Vec<f64> {
    match l {
        Label::Distribution(p) => p.clone(),
        _ => unreachable!("label kinds are validated on load"),
    }
}

#[derive(Debug, Clone)]
pub struct RunPlan {
    pub manifest: Manifest,
    pub grid: (u32, u32),
    pub protocols: Vec<Protocol>,
    pub seeds: Vec<i64>,
    pub head: HeadKind,
    pub out_dir: PathBuf,
    pub test_frac: f64,
    pub val_frac: f64,
    pub policy: CityPolicy,
    /// Worker threads; `None` uses the global pool.
    pub workers: Option<usize>,
}

impl RunPlan {
    pub fn new(manifest: Manifest, out_dir: impl Into<PathBuf>) -> RunPlan {
        RunPlan {
            manifest,
            grid: (10, 10),
            protocols: vec![Protocol::Spatial, Protocol::Random],
            seeds: DEFAULT_SEEDS.to_vec(),
            head: HeadKind::Mlp,
            out_dir: out_dir.into(),
            test_frac: DEFAULT_TEST_FRAC,
            val_frac: DEFAULT_VAL_FRAC,
            policy: CityPolicy::default(),
            workers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Failure {
    pub model: String,
    pub task: Task,
    pub city: String,
    pub protocol: Option<Protocol>,
    pub seed: Option<i64>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunSummary {
    pub new_records: usize,
    pub total_records: usize,
    pub skipped_jobs: usize,
    pub failures: Vec<Failure>,
    /// (city, task) pairs left out by the city policy.
    pub restricted: Vec<(String, Task)>,
}

type SplitKey = (String, Task, Protocol, i64);

/// Per-job audit line: which split each model was scored on.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct JobLog {
    pub model: String,
    pub task: Task,
    pub city: String,
    pub protocol: Protocol,
    pub seed: i64,
    pub split_hash: String,
    pub n_test: usize,
}

enum Message {
    Done {
        records: Vec<ResultRecord>,
        jobs: Vec<JobLog>,
        failures: Vec<Failure>,
    },
}

fn job_key(model: &str, task: Task, city: &str, protocol: Protocol, seed: i64) -> (String, Task, String, Protocol, i64) {
    (model.to_string(), task, city.to_string(), protocol, seed)
}

/// Seed for head initialization and batch order of one job.
pub fn run_seed(model: &str, task: Task, city: &str, protocol: Protocol, seed: i64) -> u64 {
    derive_seed(&["run", model, task.as_str(), city, protocol.as_str(), &seed.to_string()])
}

fn hex_grid_for(m: &Manifest, city: &str, datasets: &BTreeMap<(String, Task), TaskDataset>) -> HexGrid {
    let origin = m.cities.get(city).and_then(|c| c.hex_origin).unwrap_or_else(|| {
        datasets
            .iter()
            .filter(|((c, _), _)| c == city)
            .map(|(_, d)| d.extent)
            .reduce(|a, b| a.union(&b))
            .map_or((0.0, 0.0), |r: Rect| r.center())
    });
    HexGrid::res8(origin.0, origin.1)
}

/// Executes a plan, resuming from any existing result store in `out_dir`.
pub fn run(plan: &RunPlan) -> Result<RunSummary> {
    let started = unix_time();
    let validation = validate_manifest(&plan.manifest, &plan.policy);
    if !validation.is_ok() {
        return Err(Error::Validation(validation.errors.join("; ")));
    }
    if plan.protocols.is_empty() || plan.seeds.is_empty() {
        return Err(Error::InvalidArgument("a run needs at least one protocol and one seed".into()));
    }
    let out = &plan.out_dir;
    std::fs::create_dir_all(out.join("splits")).map_err(|e| Error::io(out, e))?;
    let mut summary = RunSummary::default();

    // Task data and splits come first; no representation is loaded yet.
    let mut datasets = BTreeMap::new();
    let mut load_failures = Vec::new();
    for (city, ce) in &plan.manifest.cities {
        for task in ce.tasks.keys() {
            if !plan.policy.admits(*task, city) {
                summary.restricted.push((city.clone(), *task));
                continue;
            }
            let path = plan.manifest.task_path(city, *task).expect("task listed in manifest");
            match load_task_dataset(&path) {
                Ok(d) => {
                    datasets.insert((city.clone(), *task), d);
                }
                Err(e) => load_failures.push((city.clone(), *task, e.to_string())),
            }
        }
    }
    let mut splits: BTreeMap<SplitKey, SplitAssignment> = BTreeMap::new();
    let mut split_failures = Vec::new();
    for ((city, task), d) in &datasets {
        let grid = build_block_grid(d.extent, plan.grid.0, plan.grid.1)?;
        for &p in &plan.protocols {
            for &s in &plan.seeds {
                let made = match p {
                    Protocol::Spatial => spatial_split(d, &grid, s, plan.test_frac, plan.val_frac),
                    Protocol::Random => random_split(d, s, plan.test_frac, plan.val_frac),
                };
                match made {
                    Ok(a) => {
                        let cache = out
                            .join("splits")
                            .join(format!("{}_{}_{}_{}.csv", crate::dataset::city_key(city), task, p, s));
                        write_split_cache(&a, d, cache)?;
                        splits.insert((city.clone(), *task, p, s), a);
                    }
                    Err(e) => split_failures.push((city.clone(), *task, p, s, e.to_string())),
                }
            }
        }
    }
    write_splits_index(&out.join(SPLITS_FILE), &splits)?;

    // A job counts as done only with all three metrics stored; partial jobs
    // from an interrupted flush are dropped and rerun.
    let mut records = read_result_store(out.join(RESULTS_FILE))?;
    let mut per_job: BTreeMap<_, usize> = BTreeMap::new();
    for r in &records {
        *per_job.entry(job_key(&r.model, r.task, &r.city, r.protocol, r.seed)).or_default() += 1;
    }
    let done: BTreeSet<_> = per_job.into_iter().filter(|(_, n)| *n == METRICS_PER_JOB).map(|(k, _)| k).collect();
    records.retain(|r| done.contains(&job_key(&r.model, r.task, &r.city, r.protocol, r.seed)));
    let mut jobs_log = read_jobs(&out.join(JOBS_FILE))?;
    jobs_log.retain(|j| done.contains(&job_key(&j.model, j.task, &j.city, j.protocol, j.seed)));

    // One group per (model, city, task) with at least one pending job.
    let mut groups = Vec::new();
    for model in plan.manifest.models.keys() {
        for (city, task, why) in &load_failures {
            summary.failures.push(Failure {
                model: model.clone(),
                task: *task,
                city: city.clone(),
                protocol: None,
                seed: None,
                error: why.clone(),
            });
        }
        for (city, task, p, s, why) in &split_failures {
            summary.failures.push(Failure {
                model: model.clone(),
                task: *task,
                city: city.clone(),
                protocol: Some(*p),
                seed: Some(*s),
                error: why.clone(),
            });
        }
        for (city, task) in datasets.keys() {
            let pending: Vec<SplitKey> = splits
                .keys()
                .filter(|(c, t, _, _)| c == city && t == task)
                .filter(|(c, t, p, s)| !done.contains(&job_key(model, *t, c, *p, *s)))
                .cloned()
                .collect();
            let total = plan.protocols.len() * plan.seeds.len();
            summary.skipped_jobs += total - pending.len().min(total);
            if !pending.is_empty() {
                groups.push((model.clone(), city.clone(), *task, pending));
            }
        }
    }

    let (tx, rx) = mpsc::channel::<Message>();
    let hexes: BTreeMap<String, HexGrid> = plan
        .manifest
        .cities
        .keys()
        .map(|c| (c.clone(), hex_grid_for(&plan.manifest, c, &datasets)))
        .collect();
    let work = |tx: mpsc::Sender<Message>| {
        groups.par_iter().for_each_with(tx, |tx, (model, city, task, pending)| {
            let msg = run_group(
                plan,
                model,
                city,
                *task,
                pending,
                &datasets[&(city.clone(), *task)],
                &splits,
                &hexes[city],
            );
            tx.send(msg).expect("writer outlives workers");
        });
    };
    let writer = |rx: mpsc::Receiver<Message>,
                  records: &mut Vec<ResultRecord>,
                  summary: &mut RunSummary,
                  jobs_log: &mut Vec<JobLog>|
     -> Result<()> {
        for Message::Done {
            records: new,
            jobs,
            failures,
        } in rx
        {
            summary.new_records += new.len();
            records.extend(new);
            jobs_log.extend(jobs);
            summary.failures.extend(failures);
            write_result_store(out.join(RESULTS_FILE), records)?;
            write_jobs(&out.join(JOBS_FILE), jobs_log)?;
        }
        Ok(())
    };
    let pool = match plan.workers {
        Some(n) => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::InvalidArgument(e.to_string()))?,
        ),
        None => None,
    };
    std::thread::scope(|scope| -> Result<()> {
        let handle = scope.spawn(move || match &pool {
            Some(p) => p.install(|| work(tx)),
            None => work(tx),
        });
        let res = writer(rx, &mut records, &mut summary, &mut jobs_log);
        handle.join().expect("worker pool panicked");
        res
    })?;

    write_result_store(out.join(RESULTS_FILE), &records)?;
    summary.total_records = records.len();
    summary.failures.sort();
    write_failures(&out.join(FAILURES_FILE), &summary.failures)?;
    write_run_meta(plan, &summary, started, &out.join(META_FILE))?;
    if !records.is_empty() {
        report(out)?;
    }
    Ok(summary)
}

#[allow(clippy::too_many_arguments)]
fn run_group(
    plan: &RunPlan,
    model: &str,
    city: &str,
    task: Task,
    pending: &[SplitKey],
    data: &TaskDataset,
    splits: &BTreeMap<SplitKey, SplitAssignment>,
    hex: &HexGrid,
) -> Message {
    let fail_all = |e: String| Message::Done {
        records: Vec::new(),
        jobs: Vec::new(),
        failures: pending
            .iter()
            .map(|(_, _, p, s)| Failure {
                model: model.into(),
                task,
                city: city.into(),
                protocol: Some(*p),
                seed: Some(*s),
                error: e.clone(),
            })
            .collect(),
    };
    let entry = &plan.manifest.models[model];
    let aggregation = entry.entity_aggregation.unwrap_or(EntityAggregation::H3First);
    let features = match load_representation(&plan.manifest, model, city).and_then(|r| align(&r, data, hex, aggregation)) {
        Ok(f) => f,
        Err(e) => return fail_all(e.to_string()),
    };
    let cfg = match head_config_for(data, plan.head) {
        Ok(c) => c,
        Err(e) => return fail_all(e.to_string()),
    };
    let mut records = Vec::new();
    let mut jobs = Vec::new();
    let mut failures = Vec::new();
    for key in pending {
        let (_, _, protocol, seed) = key;
        let split = &splits[key];
        match evaluate(&features, data, split, &cfg, run_seed(model, task, city, *protocol, *seed)) {
            Ok(ev) => {
                for mv in ev.metrics {
                    records.push(ResultRecord {
                        model: model.into(),
                        task,
                        city: city.into(),
                        seed: *seed,
                        protocol: *protocol,
                        metric: mv.metric,
                        value: if mv.value.is_finite() { mv.value } else { f64::NAN },
                        n_test: ev.n_test,
                    });
                }
                jobs.push(JobLog {
                    model: model.into(),
                    task,
                    city: city.into(),
                    protocol: *protocol,
                    seed: *seed,
                    split_hash: split.hash.clone(),
                    n_test: ev.n_test,
                });
            }
            Err(e) => failures.push(Failure {
                model: model.into(),
                task,
                city: city.into(),
                protocol: Some(*protocol),
                seed: Some(*seed),
                error: format!("{e} (coverage {:.4})", coverage(&features).unwrap_or(0.0)),
            }),
        }
    }
    Message::Done { records, jobs, failures }
}

fn atomic_write(path: &Path, body: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_splits_index(path: &Path, splits: &BTreeMap<SplitKey, SplitAssignment>) -> Result<()> {
    let mut s = String::from("city,task,protocol,seed,grid,n_train,n_val,n_test,hash\n");
    for ((city, task, p, seed), a) in splits {
        let grid = a.grid.map_or_else(|| "none".into(), |g| format!("{}x{}", g.nx, g.ny));
        let _ = writeln!(
            s,
            "{},{task},{p},{seed},{grid},{},{},{},{}",
            csv_text(city),
            a.count(SplitLabel::Train),
            a.count(SplitLabel::Val),
            a.count(SplitLabel::Test),
            a.hash
        );
    }
    atomic_write(path, &s)
}

/// Split hashes by (city, task, protocol, seed) from a run's `splits.csv`.
pub fn read_split_hashes(out_dir: &Path) -> Result<BTreeMap<(String, Task, Protocol, i64), String>> {
    let path = out_dir.join(SPLITS_FILE);
    let mut rdr = csv::Reader::from_path(&path)?;
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let bad = |w: &str| Error::parse(path.display(), 0, format!("bad {w}"));
        out.insert(
            (
                rec[0].to_string(),
                rec[1].parse().map_err(|_| bad("task"))?,
                rec[2].parse().map_err(|_| bad("protocol"))?,
                rec[3].parse().map_err(|_| bad("seed"))?,
            ),
            rec[8].to_string(),
        );
    }
    Ok(out)
}

/// The jobs of a run, from its `jobs.csv`.
pub fn read_job_log(out_dir: &Path) -> Result<Vec<JobLog>> {
    read_jobs(&out_dir.join(JOBS_FILE))
}

fn write_jobs(path: &Path, jobs: &[JobLog]) -> Result<()> {
    let mut sorted = jobs.to_vec();
    sorted.sort();
    let mut s = String::from("model,task,city,protocol,seed,split_hash,n_test\n");
    for j in &sorted {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            csv_text(&j.model),
            j.task,
            csv_text(&j.city),
            j.protocol,
            j.seed,
            j.split_hash,
            j.n_test
        );
    }
    atomic_write(path, &s)
}

fn read_jobs(path: &Path) -> Result<Vec<JobLog>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let bad = |w: &str| Error::parse(path.display(), 0, format!("bad {w}"));
        out.push(JobLog {
            model: rec[0].to_string(),
            task: rec[1].parse().map_err(|_| bad("task"))?,
            city: rec[2].to_string(),
            protocol: rec[3].parse().map_err(|_| bad("protocol"))?,
            seed: rec[4].parse().map_err(|_| bad("seed"))?,
            split_hash: rec[5].to_string(),
            n_test: rec[6].parse().map_err(|_| bad("n_test"))?,
        });
    }
    Ok(out)
}

fn write_failures(path: &Path, failures: &[Failure]) -> Result<()> {
    let mut s = String::from("model,task,city,protocol,seed,error\n");
    for f in failures {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            csv_text(&f.model),
            f.task,
            csv_text(&f.city),
            f.protocol.map_or(String::new(), |p| p.to_string()),
            f.seed.map_or(String::new(), |v| v.to_string()),
            csv_text(&f.error)
        );
    }
    atomic_write(path, &s)
}

fn csv_text(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn unix_time() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn write_run_meta(plan: &RunPlan, summary: &RunSummary, started: u64, path: &Path) -> Result<()> {
    let head = HeadConfig::new(plan.head, OutputKind::Scalar);
    let meta = serde_json::json!({
        "started_unix": started,
        "finished_unix": unix_time(),
        "grid": { "nx": plan.grid.0, "ny": plan.grid.1, "frame": "degrees over the task extent", "boundaries": "half-open, global max edge closed" },
        "protocols": plan.protocols,
        "seeds": plan.seeds,
        "test_frac": plan.test_frac,
        "val_frac": plan.val_frac,
        "split_rounding": "round half up, at least one block per requested partition; only occupied blocks sampled",
        "rng": RNG_NAME,
        "head": {
            "kind": plan.head,
            "hidden_dim": head.hidden_dim,
            "batch_size": head.batch_size,
            "learning_rate": head.learning_rate,
            "max_epochs": head.max_epochs,
            "patience": head.patience,
            "optimizer": { "name": "adam", "beta1": ADAM_BETA1, "beta2": ADAM_BETA2, "epsilon": ADAM_EPSILON },
            "early_stopping": { "monitor": "validation loss", "min_improvement": EARLY_STOP_TOLERANCE },
            "init": "uniform +-sqrt(6 / (fan_in + fan_out)), zero biases",
            "target_scaler": "train mean and population std",
            "weight_decay": 0.0,
        },
        "metrics": { "kl_epsilon": KL_EPSILON, "kl_log": "natural", "macro_zero_denominator": "contributes 0, flagged", "degenerate_r2": "stored as NaN, excluded from seed means" },
        "alignment": { "entity_pooling": "unweighted mean", "invalid_rows": "dropped, not imputed", "raster_sharing": "representative point inside source cell" },
        "hex_grid": { "edge_len_m": H3_RES8_EDGE_M, "projection": "spherical azimuthal equidistant about the city anchor", "note": "axial hexagons approximating H3 resolution 8" },
        "pe": PeConfig::default(),
        "city_policy": plan.policy,
        "restricted": summary.restricted.iter().map(|(c, t)| format!("{c} {t}")).collect::<Vec<_>>(),
        "records": summary.total_records,
        "failures": summary.failures.len(),
    });
    atomic_write(path, &(serde_json::to_string_pretty(&meta)? + "\n"))
}

/// Protocol used for summaries, ranks and factor correlations.
fn summary_protocol(records: &[ResultRecord]) -> Protocol {
    if records.iter().any(|r| r.protocol == Protocol::Spatial) {
        Protocol::Spatial
    } else {
        Protocol::Random
    }
}

/// Everything `report` writes, for callers that want the values.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub protocol: Protocol,
    pub summaries: Vec<TaskSummary>,
    pub leaderboard: String,
}

/// Writes summary tables and a text leaderboard next to the result store.
pub fn report(dir: &Path) -> Result<Report> {
    let records = read_result_store(dir.join(RESULTS_FILE))?;
    if records.is_empty() {
        return Err(Error::Validation(format!("no results in {}", dir.display())));
    }
    let policy = CityPolicy::default();
    let protocol = summary_protocol(&records);
    let (scores, _) = primary_city_scores(&records, protocol);
    let summaries = task_summaries(&scores, &policy);
    let table = rank_table(&scores, &policy)?;

    let mut s = String::from("model,task,avg,c_std,n_cities\n");
    for t in &summaries {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            csv_text(&t.model),
            t.task,
            t.avg,
            t.c_std.map_or("NaN".into(), |v| v.to_string()),
            t.cities.len()
        );
    }
    atomic_write(&dir.join("task_summary.csv"), &s)?;

    let mut s = String::from("model,task,mean_city_rank\n");
    for (task, models) in &table.task_mean {
        for (m, r) in models {
            let _ = writeln!(s, "{},{task},{r}", csv_text(m));
        }
    }
    atomic_write(&dir.join("ranks.csv"), &s)?;

    let mut s = String::from("model,overall_rank\n");
    for (m, r) in &table.overall {
        let _ = writeln!(s, "{},{r}", csv_text(m));
    }
    atomic_write(&dir.join("overall.csv"), &s)?;

    let (random, _) = primary_city_scores(&records, Protocol::Random);
    let (spatial, _) = primary_city_scores(&records, Protocol::Spatial);
    let d = split_delta(&random, &spatial);
    let mut s = String::from("model,task,city,metric,random,spatial,delta\n");
    for x in &d.deltas {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            csv_text(&x.model),
            x.task,
            csv_text(&x.city),
            x.metric,
            x.random,
            x.spatial,
            x.delta
        );
    }
    atomic_write(&dir.join("split_delta.csv"), &s)?;

    atomic_write(&dir.join("factor_corr.csv"), &factor_correlations(dir, &scores)?)?;

    let leaderboard = render_leaderboard(&summaries, &table.task_mean, &table.overall);
    atomic_write(&dir.join("leaderboard.txt"), &leaderboard)?;
    Ok(Report {
        protocol,
        summaries,
        leaderboard,
    })
}

/// Reads `city_factors.csv` (`city,<factor>...`) if present and correlates
/// each factor with each model's city scores per task.
fn factor_correlations(dir: &Path, scores: &[CityScore]) -> Result<String> {
    let mut s = String::from("factor,model,task,rho,p_value,n,approximate\n");
    let path = dir.join(FACTORS_FILE);
    if !path.exists() {
        return Ok(s);
    }
    let mut rdr = csv::Reader::from_path(&path)?;
    let names: Vec<String> = rdr.headers()?.iter().skip(1).map(|h| h.trim().to_string()).collect();
    let mut factors: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        for (k, name) in names.iter().enumerate() {
            if let Ok(v) = rec[k + 1].trim().parse::<f64>() {
                factors.entry(name.clone()).or_default().insert(rec[0].trim().to_string(), v);
            }
        }
    }
    let mut perf: BTreeMap<(String, Task), BTreeMap<String, f64>> = BTreeMap::new();
    for c in scores {
        perf.entry((c.model.clone(), c.task)).or_default().insert(c.city.clone(), c.value);
    }
    for (fname, f) in &factors {
        for ((model, task), p) in &perf {
            if let Ok(r) = spearman_factor_correlation(f, p, task.direction()) {
                let show = |v: Option<f64>| v.map_or("NaN".to_string(), |x| x.to_string());
                let _ = writeln!(
                    s,
                    "{},{},{task},{},{},{},{}",
                    csv_text(fname),
                    csv_text(model),
                    show(r.rho),
                    show(r.p_value),
                    r.n,
                    r.approximate
                );
            }
        }
    }
    Ok(s)
}

/// Fixed-width table: one row per model in overall-rank order, and for each
/// task the mean score, cross-city deviation and mean city rank.
pub fn render_leaderboard(
    summaries: &[TaskSummary],
    task_mean: &BTreeMap<Task, BTreeMap<String, f64>>,
    overall: &BTreeMap<String, f64>,
) -> String {
    let tasks: Vec<Task> = summaries.iter().map(|t| t.task).collect::<BTreeSet<_>>().into_iter().collect();
    let mut models: Vec<&String> = summaries.iter().map(|t| &t.model).collect::<BTreeSet<_>>().into_iter().collect();
    models.sort_by(|a, b| {
        let ra = overall.get(*a).copied().unwrap_or(f64::INFINITY);
        let rb = overall.get(*b).copied().unwrap_or(f64::INFINITY);
        ra.total_cmp(&rb).then(a.cmp(b))
    });
    let by: BTreeMap<(&str, Task), &TaskSummary> = summaries.iter().map(|t| ((t.model.as_str(), t.task), t)).collect();
    let width = models.iter().map(|m| m.len()).max().unwrap_or(5).max(5);
    let mut s = String::new();
    let _ = write!(s, "{:<width$}", "model");
    for t in &tasks {
        let arrow = match t.direction() {
            crate::metrics::Direction::HigherBetter => "^",
            crate::metrics::Direction::LowerBetter => "v",
        };
        let head = format!("{t} {}{arrow}", t.primary_metric());
        let _ = write!(s, " | {head:>10} {:>8} {:>6}", "c_std", "rank");
    }
    let _ = writeln!(s, " | {:>7}", "overall");
    for m in models {
        let _ = write!(s, "{m:<width$}");
        for t in &tasks {
            match by.get(&(m.as_str(), *t)) {
                Some(x) => {
                    let rank = task_mean
                        .get(t)
                        .and_then(|r| r.get(m.as_str()))
                        .map_or("-".into(), |r| format!("{r:.2}"));
                    let cs = x.c_std.map_or("-".into(), |v| format!("{v:.4}"));
                    let _ = write!(s, " | {:>10.4} {cs:>8} {rank:>6}", x.avg);
                }
                None => {
                    let _ = write!(s, " | {:>10} {:>8} {:>6}", "-", "-", "-");
                }
            }
        }
        let _ = writeln!(s, " | {:>7}", overall.get(m.as_str()).map_or("-".into(), |r| format!("{r:.2}")));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{CityEntry, ModelEntry};
    use crate::repr::SupportKind;
    use crate::synth::{synth_city, write_synth_city, SynthConfig};

    fn plan_for(dir: &Path, n: usize) -> RunPlan {
        let cfg = SynthConfig::square("Testville", n, 50.0, (0.0, 0.0), n as f64 / 4.0, 1);
        let city = synth_city(&cfg).unwrap();
        let files = write_synth_city(&city, dir.join("data")).unwrap();
        let mut m = Manifest {
            base_dir: dir.to_path_buf(),
            ..Manifest::default()
        };
        m.cities.insert(
            "Testville".into(),
            CityEntry {
                hex_origin: None,
                tasks: [(Task::Pop, files.task.clone())].into_iter().collect(),
            },
        );
        m.models.insert(
            "field".into(),
            ModelEntry {
                dim: 8,
                support: SupportKind::Raster,
                encoder: None,
                entity_aggregation: None,
                files: [("Testville".to_string(), files.embedding.unwrap())].into_iter().collect(),
            },
        );
        let mut plan = RunPlan::new(m, dir.join("out"));
        plan.head = HeadKind::Linear;
        plan
    }

    #[test]
    fn record_cardinality_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let plan = plan_for(dir.path(), 16);
        let s = run(&plan).unwrap();
        assert!(s.failures.is_empty(), "{:?}", s.failures);
        assert_eq!(s.new_records, 30);
        let again = run(&plan).unwrap();
        assert_eq!((again.new_records, again.total_records, again.skipped_jobs), (0, 30, 10));
        for f in [
            "task_summary.csv",
            "ranks.csv",
            "overall.csv",
            "split_delta.csv",
            "factor_corr.csv",
            "leaderboard.txt",
            META_FILE,
            SPLITS_FILE,
        ] {
            assert!(plan.out_dir.join(f).is_file(), "{f}");
        }
    }

    #[test]
    fn age_restricted_in_plan() {
        let dir = tempfile::tempdir().unwrap();
        let mut plan = plan_for(dir.path(), 16);
        let pop = plan.manifest.cities["Testville"].tasks[&Task::Pop].clone();
        plan.manifest.cities.get_mut("Testville").unwrap().tasks.insert(Task::Age, pop);
        plan.seeds = vec![42];
        plan.protocols = vec![Protocol::Spatial];
        let s = run(&plan).unwrap();
        assert_eq!(s.restricted, vec![("Testville".to_string(), Task::Age)]);
        assert_eq!(s.new_records, 3);
    }

    #[test]
    fn leaderboard_order_follows_overall_rank() {
        let mk = |m: &str, avg: f64| TaskSummary {
            model: m.into(),
            task: Task::Age,
            avg,
            c_std: Some(0.01),
            cities: vec!["London".into(), "Sydney".into()],
            restricted: vec![],
        };
        let summaries = vec![mk("zeta", 0.04), mk("alpha", 0.02)];
        let overall: BTreeMap<String, f64> = [("zeta".to_string(), 3.4), ("alpha".to_string(), 2.1)].into_iter().collect();
        let tm: BTreeMap<Task, BTreeMap<String, f64>> = [(Task::Age, overall.clone())].into_iter().collect();
        let out = render_leaderboard(&summaries, &tm, &overall);
        let lines: Vec<&str> = out.lines().collect();
        assert!(lines[0].contains("AGE klv"));
        assert!(lines[1].starts_with("alpha") && lines[2].starts_with("zeta"));
        assert!(lines[1].contains("0.0200"));
    }
}
