mod common;

use std::path::Path;

use common::*;
use posttrain_core::harness::commands::{
    cmd_eval, cmd_merge, cmd_probe, cmd_report, cmd_rl_train, cmd_sft_train, curves_from_records, run_pipeline,
    MERGE, PROBE, RL, SFT,
};
use posttrain_core::harness::config::Algorithm;
use posttrain_core::harness::train::RlStepRecord;
use posttrain_core::harness::{EvalTarget, Experiment, ExperimentConfig};
use posttrain_core::tasks::Split;
use posttrain_core::Error;

fn bytes(dir: &Path, rel: &str) -> Vec<u8> {
    std::fs::read(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

fn full_run(cfg: ExperimentConfig, dir: &Path) {
    let mut exp = Experiment::open(cfg, None, dir, false).unwrap();
    run_pipeline(&mut exp).unwrap();
}

#[test]
fn checkpoint_cadence() {
    let mut cfg = tiny_config();
    cfg.sft.steps = 1000;
    cfg.sft.checkpoint_every = 200;
    cfg.sft.batch_size = 4;
    cfg.sft.warmup_steps = 1;
    let dir = tempfile::tempdir().unwrap();
    let mut exp = Experiment::open(cfg, None, dir.path(), false).unwrap();
    let out = cmd_sft_train(&mut exp).unwrap();
    assert_eq!(out.checkpoints.len(), 20);
    for sid in 0..4 {
        let steps: Vec<u64> = out.checkpoints.iter().filter(|c| c.subdomain == sid).map(|c| c.step).collect();
        assert_eq!(steps, vec![200, 400, 600, 800, 1000]);
    }
    for c in &out.checkpoints {
        assert!(dir.path().join(&c.path).exists());
    }
}

#[test]
fn empty_universe_is_a_config_error() {
    let mut cfg = tiny_config();
    cfg.universe.subdomains.clear();
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(Experiment::open(cfg, None, dir.path(), false), Err(Error::Config(_))));
}

#[test]
fn pipeline_outputs_and_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    full_run(tiny_config(), a.path());
    full_run(tiny_config(), b.path());
    for rel in ["rl/final.json", "rl/metrics.jsonl", "rl/monitor.jsonl", "probe/curves.jsonl", "merge/fused.json"] {
        assert_eq!(bytes(a.path(), rel), bytes(b.path(), rel), "{rel}");
    }

    let mut exp = Experiment::open(tiny_config(), None, a.path(), true).unwrap();
    for stage in [SFT, PROBE, MERGE, RL] {
        assert!(exp.manifest().stages.contains_key(stage), "{stage}");
    }

    // the merge picked each curve's argmax, earliest on ties
    let records = cmd_probe(&mut exp).unwrap();
    let fusion = cmd_merge(&mut exp).unwrap();
    for (curve, spec) in curves_from_records(&records).unwrap().iter().zip(&fusion.specialists) {
        let best = curve.points.iter().map(|p| p.1).fold(f64::MIN, f64::max);
        let first = curve.points.iter().find(|p| p.1 == best).unwrap().0;
        assert_eq!(spec.step, first);
        assert_eq!(spec.weight, 0.25);
    }

    let steps: Vec<RlStepRecord> = std::fs::read_to_string(a.path().join("rl/metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(steps.len(), 30);
    for (i, s) in steps.iter().enumerate() {
        assert_eq!(s.global_step, i + 1);
        assert_eq!(s.pc_histogram.iter().sum::<usize>(), 16);
        assert_eq!(s.w_me_by_bucket.len(), 9);
        let mean_w = s.pc_histogram.iter().zip(&s.w_me_by_bucket).map(|(&n, w)| n as f64 * w).sum::<f64>() / 16.0;
        assert!((mean_w - s.mean_w_me).abs() < 1e-12);
    }

    let table = cmd_eval(&mut exp, &EvalTarget::Final, Split::Holdout).unwrap();
    assert_eq!(table.rows.len(), 4);
    assert_eq!(table.aggregate.subdomain, "all");
    assert_eq!(table.aggregate.problems, 160);
    assert_eq!((table.n, table.k), (8, 4));
    let mean = table.rows.iter().map(|r| r.pass1).sum::<f64>() / 4.0;
    assert!((table.aggregate.pass1 - mean).abs() < 1e-12);
    assert!(table.rows.iter().all(|r| r.passk >= r.pass1));

    let report = cmd_report(&mut exp).unwrap();
    let csv = std::fs::read_to_string(a.path().join(&report.curve_csv)).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("stage,step,pass1,passk,mean_w_me"));
    assert!(csv.contains("\nmerge,0,"));
    assert!(csv.contains("\nrl:1,30,"));
    assert!(std::fs::read_to_string(a.path().join(&report.summary)).unwrap().contains("## eval:final:holdout"));
}

fn with_algorithm(alg: Algorithm, lambda: f64) -> ExperimentConfig {
    let mut cfg = tiny_config();
    for s in &mut cfg.rl.stages {
        s.algorithm = alg;
        s.lambda = lambda;
    }
    cfg
}

#[test]
fn mgpo_at_lambda_zero_reproduces_grpo_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    full_run(with_algorithm(Algorithm::Mgpo, 0.0), a.path());
    full_run(with_algorithm(Algorithm::Grpo, 1.0), b.path());
    for rel in ["rl/final.json", "rl/metrics.jsonl", "rl/monitor.jsonl"] {
        assert_eq!(bytes(a.path(), rel), bytes(b.path(), rel), "{rel}");
    }
}

#[test]
fn resume_recomputes_only_what_is_missing_or_stale() {
    let dir = tempfile::tempdir().unwrap();
    full_run(tiny_config(), dir.path());
    let final_bytes = bytes(dir.path(), "rl/final.json");
    let fused_bytes = bytes(dir.path(), "merge/fused.json");
    let seconds = |exp: &Experiment, s: &str| exp.manifest().stages[s].seconds;

    std::fs::remove_file(dir.path().join("rl/final.json")).unwrap();
    let before = {
        let exp = Experiment::open(tiny_config(), None, dir.path(), true).unwrap();
        (seconds(&exp, SFT), seconds(&exp, MERGE))
    };
    let mut exp = Experiment::open(tiny_config(), None, dir.path(), true).unwrap();
    run_pipeline(&mut exp).unwrap();
    assert_eq!((seconds(&exp, SFT), seconds(&exp, MERGE)), before);
    assert_eq!(bytes(dir.path(), "rl/final.json"), final_bytes);
    drop(exp);

    // an RL-only change keeps the upstream stages
    let mut cfg = tiny_config();
    cfg.rl.stages[1].lr *= 0.5;
    let mut exp = Experiment::open(cfg, None, dir.path(), true).unwrap();
    run_pipeline(&mut exp).unwrap();
    assert_eq!((seconds(&exp, SFT), seconds(&exp, MERGE)), before);
    assert_eq!(bytes(dir.path(), "merge/fused.json"), fused_bytes);
    assert_ne!(bytes(dir.path(), "rl/final.json"), final_bytes);
    drop(exp);

    // a seed change invalidates everything
    let mut exp = Experiment::open(tiny_config(), Some(12), dir.path(), true).unwrap();
    run_pipeline(&mut exp).unwrap();
    assert_ne!(seconds(&exp, SFT), before.0);
    assert_ne!(bytes(dir.path(), "merge/fused.json"), fused_bytes);
}

#[test]
fn stages_refuse_to_run_out_of_order() {
    let dir = tempfile::tempdir().unwrap();
    let mut exp = Experiment::open(tiny_config(), None, dir.path(), false).unwrap();
    assert!(matches!(cmd_probe(&mut exp), Err(Error::MissingDependency { .. })));
    assert!(matches!(cmd_merge(&mut exp), Err(Error::MissingDependency { .. })));
    assert!(matches!(cmd_rl_train(&mut exp), Err(Error::MissingDependency { .. })));
    assert!(matches!(cmd_report(&mut exp), Err(Error::MissingDependency { .. })));
    assert!(matches!(
        cmd_eval(&mut exp, &EvalTarget::Final, Split::Holdout),
        Err(Error::MissingDependency { .. })
    ));
    cmd_sft_train(&mut exp).unwrap();
    assert!(matches!(cmd_merge(&mut exp), Err(Error::MissingDependency { .. })));
    assert!(cmd_eval(&mut exp, &EvalTarget::Init, Split::Probe).is_ok());
}

#[test]
fn a_run_directory_admits_one_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let exp = Experiment::open(tiny_config(), None, dir.path(), false).unwrap();
    assert!(matches!(
        Experiment::open(tiny_config(), None, dir.path(), false),
        Err(Error::Locked(_))
    ));
    drop(exp);
    assert!(Experiment::open(tiny_config(), None, dir.path(), false).is_ok());
}

#[test]
fn stage_hashes_track_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let base = {
        let exp = Experiment::open(tiny_config(), None, dir.path(), false).unwrap();
        [SFT, PROBE, MERGE, RL].map(|s| exp.stage_hash(s))
    };
    let mut cfg = tiny_config();
    cfg.eval.n = 12;
    let exp = Experiment::open(cfg, None, dir.path(), false).unwrap();
    assert_eq!([SFT, PROBE, MERGE, RL].map(|s| exp.stage_hash(s)), base);
    drop(exp);

    let mut cfg = tiny_config();
    cfg.probe.k = 2;
    let exp = Experiment::open(cfg, None, dir.path(), false).unwrap();
    let h = [SFT, PROBE, MERGE, RL].map(|s| exp.stage_hash(s));
    assert_eq!(h[0], base[0]);
    for i in 1..4 {
        assert_ne!(h[i], base[i]);
    }
}
