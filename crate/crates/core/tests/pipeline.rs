//! End-to-end runs over synthetic suites.

use std::path::Path;

use geoeval::dataset::Task;
use geoeval::heads::HeadKind;
use geoeval::manifest::Manifest;
use geoeval::runner::{report, run, RunPlan, RESULTS_FILE};
use geoeval::split::{Protocol, DEFAULT_SEEDS};
use geoeval::synth::{leakage_experiment, linear_scalar_head, write_synth_suite, SynthConfig, SynthEmbedding, SynthLabel};

fn two_city_suite(dir: &Path) -> Manifest {
    let mut configs = Vec::new();
    for (i, name) in ["Avon", "Brook"].into_iter().enumerate() {
        let base = SynthConfig::square(name, 16, 100.0, (i as f64, 0.0), 3.0, i as u64);
        configs.push(SynthConfig {
            embedding: SynthEmbedding::FieldPlusNoise,
            noise_sd: 0.5,
            ..base.clone()
        });
        configs.push(SynthConfig {
            embedding: SynthEmbedding::CoordinatePe,
            ..base
        });
    }
    write_synth_suite(&configs, dir).unwrap()
}

fn linear_plan(m: Manifest, out: &Path) -> RunPlan {
    let mut plan = RunPlan::new(m, out);
    plan.head = HeadKind::Linear;
    plan
}

#[test]
fn interrupted_run_resumes_to_the_same_store() {
    let dir = tempfile::tempdir().unwrap();
    let m = two_city_suite(&dir.path().join("data"));
    let full = dir.path().join("full");
    let s = run(&linear_plan(m.clone(), &full)).unwrap();
    assert!(s.failures.is_empty());
    assert_eq!(s.total_records, 2 * 2 * 5 * 2 * 3);

    // Simulate a kill that left a prefix of the store, cut mid-job.
    let cut = dir.path().join("cut");
    run(&linear_plan(m.clone(), &cut)).unwrap();
    let text = std::fs::read_to_string(cut.join(RESULTS_FILE)).unwrap();
    let kept: Vec<&str> = text.lines().take(1 + 3 * 7 + 2).collect();
    std::fs::write(cut.join(RESULTS_FILE), kept.join("\n") + "\n").unwrap();
    let resumed = run(&linear_plan(m, &cut)).unwrap();
    assert_eq!(resumed.new_records, 120 - 21);
    for f in [RESULTS_FILE, "jobs.csv", "splits.csv", "task_summary.csv", "leaderboard.txt"] {
        assert_eq!(std::fs::read(full.join(f)).unwrap(), std::fs::read(cut.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn age_runs_only_in_the_four_cities() {
    let dir = tempfile::tempdir().unwrap();
    let cities = ["London", "New York", "Singapore", "Sydney", "Paris", "Tokyo", "Berlin", "Chicago"];
    let configs: Vec<SynthConfig> = cities
        .iter()
        .enumerate()
        .map(|(i, c)| SynthConfig {
            label: SynthLabel::Distribution { bins: 4 },
            ..SynthConfig::square(*c, 12, 100.0, (i as f64 * 10.0, 10.0), 2.0, i as u64)
        })
        .collect();
    let m = write_synth_suite(&configs, dir.path().join("data")).unwrap();
    let mut plan = linear_plan(m, &dir.path().join("out"));
    plan.seeds = vec![42];
    plan.protocols = vec![Protocol::Spatial];
    let s = run(&plan).unwrap();
    assert!(s.failures.is_empty(), "{:?}", s.failures);
    assert_eq!(s.total_records, 4 * 3);
    assert_eq!(s.restricted.len(), 4);
    let r = report(&plan.out_dir).unwrap();
    assert!(r.summaries.iter().all(|t| t.task == Task::Age && t.cities.len() == 4));
}

#[test]
fn report_requires_results() {
    let dir = tempfile::tempdir().unwrap();
    assert!(report(dir.path()).is_err());
}

/// Mean random-minus-spatial R² rises with the field's length scale.
///
/// Fails on this generator: the gap peaks near the block size (n/10 cells)
/// and shrinks for smoother fields, which extrapolate across blocks.
/// Measured deltas (linear head): 0.341, 0.484, 0.062.
#[test]
#[ignore = "gap is hump-shaped in the length scale, not monotone; run with --ignored"]
fn leakage_grows_with_length_scale() {
    let n = 64;
    let head = linear_scalar_head();
    let deltas: Vec<f64> = [n as f64 / 32.0, n as f64 / 8.0, n as f64 / 4.0]
        .into_iter()
        .map(|cells| {
            let cfg = SynthConfig {
                embedding: SynthEmbedding::CoordinatePe,
                ..SynthConfig::square("Leakville", n, 50.0, (2.35, 48.85), cells, 5)
            };
            leakage_experiment(&cfg, &head, &DEFAULT_SEEDS, (10, 10)).unwrap().mean_delta
        })
        .collect();
    assert!(deltas.windows(2).all(|w| w[0] <= w[1]), "{deltas:?}");
}

/// A fully informative embedding leaves nothing for leakage to add.
#[test]
fn informative_control_has_no_leakage_gap() {
    let cfg = SynthConfig::square("Control", 96, 50.0, (0.0, 45.0), 16.0, 4);
    let o = leakage_experiment(&cfg, &linear_scalar_head(), &DEFAULT_SEEDS, (10, 10)).unwrap();
    assert!(o.mean_delta.abs() < 0.05, "{}", o.mean_delta);
    for s in &o.per_seed {
        assert!(s.random_r2 > 0.95 && s.spatial_r2 > 0.95, "{s:?}");
    }
}
