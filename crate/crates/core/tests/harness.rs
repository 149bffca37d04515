//! Report, trace and timeline behavior of the experiment driver on a tiny
//! pipeline (a few demonstrations, one BC epoch, two PPO updates).

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use phasesched::harness::{self, run_ablation, run_eval, Aggregate, ExperimentConfig, Mode, PolicyKind, TraceRow};
use phasesched::Error;

fn tiny(out: &Path) -> ExperimentConfig {
    let mut c: ExperimentConfig = serde_json::from_str(
        r#"{
            "seeds": [0],
            "eval_seeds": [1000, 1001, 1002],
            "diagnose_seeds": [1000, 1001],
            "dataset": {"episodes": 4, "noisy_episodes": 0},
            "clone": {"epochs": 1},
            "ppo": {"updates": 2, "episodes_per_update": 2, "hidden": 8}
        }"#,
    )
    .unwrap();
    c.out_dir = out.to_path_buf();
    c
}

/// Artifacts (surrogate plus both stages for seed 0) shared by every test.
fn artifacts() -> &'static ExperimentConfig {
    static ARTIFACTS: OnceLock<ExperimentConfig> = OnceLock::new();
    ARTIFACTS.get_or_init(|| {
        let root = tempfile::tempdir_in(env!("CARGO_TARGET_TMPDIR")).unwrap().keep();
        let mut base = tiny(&root);
        base.artifacts_dir = Some(root.clone());
        for mode in [Mode::Clone, Mode::TrainStage1, Mode::TrainStage2] {
            let mut c = base.clone();
            c.mode = mode;
            c.out_dir = root.join(format!("{mode:?}"));
            harness::run(&c).unwrap();
        }
        base
    })
}

fn fresh_out(config: &ExperimentConfig, mode: Mode) -> (ExperimentConfig, tempfile::TempDir) {
    let dir = tempfile::tempdir_in(env!("CARGO_TARGET_TMPDIR")).unwrap();
    let mut c = config.clone();
    c.mode = mode;
    c.out_dir = dir.path().to_path_buf();
    (c, dir)
}

fn read_trace(path: &Path) -> Vec<TraceRow> {
    csv::Reader::from_path(path)
        .unwrap()
        .deserialize()
        .map(|r| r.unwrap())
        .collect()
}

fn files_in(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn full_override_reports_unit_speedup() {
    let (mut c, _dir) = fresh_out(artifacts(), Mode::Eval);
    c.schedule = Some(PolicyKind::Full);
    let report = run_eval(&c).unwrap();
    assert_eq!(report.aggregate.speedup, 1.0);
    assert!(report.episodes.iter().all(|e| e.speedup == 1.0));
    assert_eq!(report.aggregate.backbone_usage[0] as usize, report.aggregate.steps);
    assert_eq!(report.training_seed, None);
}

#[test]
fn eval_is_bit_reproducible() {
    let (a, dir_a) = fresh_out(artifacts(), Mode::Eval);
    let (b, dir_b) = fresh_out(artifacts(), Mode::Eval);
    harness::run(&a).unwrap();
    harness::run(&b).unwrap();
    let (fa, fb) = (files_in(dir_a.path()), files_in(dir_b.path()));
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.file_name(), y.file_name());
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{x:?} differs");
    }
}

#[test]
fn report_aggregates_match_traces() {
    let (c, dir) = fresh_out(artifacts(), Mode::Eval);
    harness::run(&c).unwrap();
    let report: harness::EvalReport = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report.config_hash, c.hash());
    assert_eq!(report.eval_seeds, c.eval_seeds);
    assert_eq!(report.training_seed, Some(c.seeds[0]));

    let traces: Vec<Vec<TraceRow>> = c
        .eval_seeds
        .iter()
        .map(|s| read_trace(&dir.path().join(format!("trace_{s}.csv"))))
        .collect();
    // recomputed by hand, not through Aggregate
    let steps: usize = traces.iter().map(Vec::len).sum();
    let executed: u64 = traces.iter().flatten().map(|r| r.flops).sum();
    let full: u64 = traces.iter().flatten().map(|r| r.full_flops).sum();
    let successes = traces.iter().filter(|t| t.last().unwrap().success).count();
    let a = &report.aggregate;
    assert_eq!(a.steps, steps);
    assert_eq!(a.executed_flops, executed);
    assert_eq!(a.full_flops, full);
    assert_eq!(a.successes, successes);
    assert_eq!(a.speedup, full as f64 / executed as f64);
    assert_eq!(a, &Aggregate::from_traces(traces.iter().map(Vec::as_slice)));
    for (e, t) in report.episodes.iter().zip(&traces) {
        assert_eq!(e.steps, t.len());
        assert_eq!(e.executed_flops, t.iter().map(|r| r.flops).sum::<u64>());
    }
}

#[test]
fn all_full_timeline_has_one_band_per_branch() {
    let (mut c, dir) = fresh_out(artifacts(), Mode::Diagnose);
    c.schedule = Some(PolicyKind::Full);
    harness::run(&c).unwrap();
    for seed in &c.diagnose_seeds {
        let text = fs::read_to_string(dir.path().join(format!("timeline_{seed}.svg"))).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap();
        for band in ["backbone-band", "head-band"] {
            let g = doc
                .descendants()
                .find(|n| n.attribute("id") == Some(band))
                .unwrap_or_else(|| panic!("no {band}"));
            let rects: Vec<_> = g.children().filter(|n| n.has_tag_name("rect")).collect();
            assert_eq!(rects.len(), 1, "{band}");
            assert_eq!(rects[0].attribute("data-level"), Some("0"));
        }
        assert!(dir.path().join(format!("trace_{seed}.csv")).is_file());
    }
}

#[test]
fn learned_timeline_is_well_formed() {
    let (c, dir) = fresh_out(artifacts(), Mode::Diagnose);
    harness::run(&c).unwrap();
    let text = fs::read_to_string(dir.path().join("timeline_1000.svg")).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    for id in ["backbone-band", "head-band", "rho", "v-trans", "v-grip"] {
        assert!(doc.descendants().any(|n| n.attribute("id") == Some(id)), "missing {id}");
    }
    let rows = read_trace(&dir.path().join("trace_1000.csv"));
    let g = doc.descendants().find(|n| n.attribute("id") == Some("backbone-band")).unwrap();
    let covered: usize = g.children().filter(|n| n.has_tag_name("rect")).count();
    let runs = 1 + rows.windows(2).filter(|w| w[0].backbone != w[1].backbone).count();
    assert_eq!(covered, runs);
}

#[test]
fn missing_checkpoint_is_rejected() {
    let dir = tempfile::tempdir_in(env!("CARGO_TARGET_TMPDIR")).unwrap();
    let mut c = artifacts().clone();
    // surrogate present, checkpoints absent
    let src = c.artifacts().join("surrogate");
    let dst = dir.path().join("surrogate");
    fs::create_dir_all(&dst).unwrap();
    for f in files_in(&src) {
        fs::copy(&f, dst.join(f.file_name().unwrap())).unwrap();
    }
    c.artifacts_dir = Some(dir.path().to_path_buf());
    c.out_dir = dir.path().join("out");
    assert!(matches!(run_eval(&c), Err(Error::RejectedInput(_))));
    c.mode = Mode::TrainStage2;
    assert!(matches!(harness::run(&c), Err(Error::RejectedInput(_))));
    // rule-based schedules need no checkpoint
    c.schedule = Some(PolicyKind::Threshold);
    assert!(run_eval(&c).is_ok());
}

#[test]
fn missing_surrogate_is_rejected() {
    let dir = tempfile::tempdir_in(env!("CARGO_TARGET_TMPDIR")).unwrap();
    let mut c = tiny(dir.path());
    c.schedule = Some(PolicyKind::Full);
    assert!(matches!(run_eval(&c), Err(Error::RejectedInput(_))));
}

#[test]
fn mismatched_pipeline_is_rejected() {
    let mut c = artifacts().clone();
    c.pipeline.head_hidden += 1;
    c.schedule = Some(PolicyKind::Full);
    assert!(matches!(run_eval(&c), Err(Error::RejectedInput(_))));
}

#[test]
fn ablation_covers_every_schedule() {
    let (c, dir) = fresh_out(artifacts(), Mode::Ablate);
    let report = run_ablation(&c).unwrap();
    let names: Vec<&str> = report.rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(
        names,
        [
            "full",
            "threshold",
            "random",
            "stage1",
            "stage2",
            "force-llm-full",
            "force-ah-full",
            "stage2/cka-progress",
            "stage2/speed-progress"
        ]
    );
    assert_eq!(report.row("full").unwrap().mean_speedup, 1.0);
    for r in &report.rows[3..] {
        assert_eq!(r.training_seeds, c.seeds);
        assert_eq!(r.success_rates.len(), c.seeds.len());
    }
    drop(dir);
}
