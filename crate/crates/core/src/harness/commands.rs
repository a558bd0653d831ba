//! The staged pipeline: `sft-train -> probe -> merge -> rl-train`, plus
//! `eval`, `report` and the standalone `decontam`.
//!
//! Every stage records its artifacts in `manifest.json` under a hash of the
//! config sections it depends on. With `resume` set, a stage whose record
//! matches the current hash and whose files all exist is skipped and its
//! outputs are read back from disk.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::decontam::{build_index, filter_corpus, normalize_bytes, DEFAULT_GRAM_LEN};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::run::{read_json, read_jsonl, write_json, write_jsonl, RunDir, RunLock, RunManifest, StageRecord};
use crate::harness::train::{rl_stage, sft_run, RlStepRecord, SftStepMetrics};
use crate::policy::{init_params, PolicyArchitecture, PolicySnapshot};
use crate::seed::derive_seed;
use crate::spectrum::{evaluate_set, fuse, select_specialists, FusionSpec, ProbeConfig, ProbeCurve, SnapshotStore};
use crate::tasks::{generate_universe, Problem, ProbingSet, Split, Universe};

pub const SFT: &str = "sft-train";
pub const PROBE: &str = "probe";
pub const MERGE: &str = "merge";
pub const RL: &str = "rl-train";
pub const REPORT: &str = "report";

const UNIVERSE_FILE: &str = "universe.jsonl";
const SFT_INDEX: &str = "sft/index.json";
const SFT_METRICS: &str = "sft/metrics.jsonl";
const INIT_CKPT: &str = "sft/init.json";
const WARM_CKPT: &str = "sft/warm_start.json";
const CURVES: &str = "probe/curves.jsonl";
const FUSED_CKPT: &str = "merge/fused.json";
const FUSION_MANIFEST: &str = "merge/fusion_manifest.json";
const RL_METRICS: &str = "rl/metrics.jsonl";
const RL_MONITOR: &str = "rl/monitor.jsonl";
const FINAL_CKPT: &str = "rl/final.json";

/// An opened, locked run directory together with its resolved config.
#[derive(Debug)]
pub struct Experiment {
    config: ExperimentConfig,
    run: RunDir,
    manifest: RunManifest,
    resume: bool,
    _lock: RunLock,
}

fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn rel(p: &str) -> PathBuf {
    PathBuf::from(p)
}

fn elapsed(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

impl Experiment {
    /// Validates the config, creates and locks `out`. `seed` overrides the config seed.
    pub fn open(mut config: ExperimentConfig, seed: Option<u64>, out: &Path, resume: bool) -> Result<Self> {
        if let Some(s) = seed {
            config.seed = s;
        }
        config.validate()?;
        let run = RunDir::create(out)?;
        let lock = RunLock::acquire(run.root())?;
        let hash = config.hash();
        let mut manifest = run
            .load_manifest()?
            .unwrap_or_else(|| RunManifest::new(hash.clone(), config.seed));
        manifest.config_hash = hash;
        manifest.seed = config.seed;
        std::fs::write(run.path("config.toml"), config.to_toml_string()?)
            .map_err(|e| Error::io(run.path("config.toml"), e))?;
        run.save_manifest(&manifest)?;
        Ok(Experiment {
            config,
            run,
            manifest,
            resume,
            _lock: lock,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn run_dir(&self) -> &RunDir {
        &self.run
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.run.path(rel)
    }

    /// Hash of the config sections `stage` depends on, upstream stages included.
    pub fn stage_hash(&self, stage: &str) -> String {
        let c = &self.config;
        let mut v = serde_json::Map::new();
        let mut put = |k: &str, val: serde_json::Value| {
            v.insert(k.to_string(), val);
        };
        fn j<T: Serialize>(x: &T) -> serde_json::Value {
            serde_json::to_value(x).expect("config section serializes")
        }
        put("format_version", j(&c.format_version));
        put("seed", j(&c.seed));
        put("universe", j(&c.universe));
        put("policy", j(&c.policy));
        put("sft", j(&c.sft));
        let depth = match stage {
            SFT => 0,
            PROBE => 1,
            MERGE => 2,
            RL => 3,
            _ => 4,
        };
        if depth >= 1 {
            put("probe", j(&c.probe));
        }
        if depth >= 2 {
            put("fusion", j(&c.fusion));
        }
        if depth >= 3 {
            put("rl", j(&c.rl));
        }
        if depth >= 4 {
            put("eval", j(&c.eval));
            put("stage", j(&stage.to_string()));
        }
        let canonical = serde_json::to_string(&serde_json::Value::Object(v)).expect("value serializes");
        hex_sha256(canonical.as_bytes())
    }

    fn reusable(&self, stage: &str) -> bool {
        self.resume
            && self
                .manifest
                .stages
                .get(stage)
                .is_some_and(|r| r.config_hash == self.stage_hash(stage) && self.run.complete(r))
    }

    /// Fails unless `stage` has completed under the current config.
    fn require(&self, stage: &str, artifact: &str) -> Result<()> {
        let ok = self
            .manifest
            .stages
            .get(stage)
            .is_some_and(|r| r.config_hash == self.stage_hash(stage) && self.run.complete(r));
        if ok && self.path(artifact).exists() {
            Ok(())
        } else {
            Err(Error::MissingDependency {
                stage: stage.to_string(),
                path: self.path(artifact),
            })
        }
    }

    fn record(&mut self, stage: &str, artifacts: Vec<PathBuf>, metrics: Vec<PathBuf>, started: Instant) -> Result<()> {
        let rec = StageRecord {
            config_hash: self.stage_hash(stage),
            artifacts,
            metrics,
            seconds: elapsed(started),
        };
        self.manifest.stages.insert(stage.to_string(), rec);
        self.run.save_manifest(&self.manifest)
    }

    pub fn universe(&self) -> Result<Universe> {
        self.require(SFT, UNIVERSE_FILE)?;
        Universe::read_jsonl(&self.path(UNIVERSE_FILE), &self.config.universe)
    }

    fn architecture(&self, universe: &Universe) -> Result<PolicyArchitecture> {
        self.config.policy.architecture(universe.vocab.clone())
    }
}

// ---------------------------------------------------------------------------
// sft-train
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub subdomain: usize,
    pub name: String,
    pub step: u64,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftOutcome {
    pub init: PathBuf,
    pub warm_start: PathBuf,
    pub checkpoints: Vec<CheckpointEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftMetricRow {
    /// `"warm-start"` or the subdomain name.
    pub phase: String,
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

fn checkpoint_rel(name: &str, step: u64) -> PathBuf {
    PathBuf::from(format!("sft/{name}/step-{step:06}.json"))
}

/// Generates the universe, warm-starts on all subdomains, then trains one
/// specialist per subdomain from the warm start, checkpointing every
/// `checkpoint_every` steps.
pub fn cmd_sft_train(exp: &mut Experiment) -> Result<SftOutcome> {
    if exp.reusable(SFT) {
        return read_json(&exp.path(SFT_INDEX));
    }
    let started = Instant::now();
    let cfg = exp.config.clone();
    let universe = generate_universe(&cfg.universe, derive_seed(cfg.seed, "universe"))?;
    universe.write_jsonl(&exp.path(UNIVERSE_FILE))?;
    let arch = exp.architecture(&universe)?;

    let init = init_params(&arch, derive_seed(cfg.seed, "init"), cfg.policy.init_scale)?;
    save_checkpoint(&exp.path(INIT_CKPT), &PolicySnapshot::new(arch.clone(), init.clone(), 0)?)?;

    let mut rows = Vec::new();
    let all_train: Vec<&Problem> = universe
        .split(Split::Train)
        .flat_map(|s| s.problems.iter())
        .collect();
    let warm = sft_run(
        init,
        &arch,
        &all_train,
        cfg.sft.warmup_steps,
        &cfg.sft,
        derive_seed(cfg.seed, "sft/warm-start"),
        |m: &SftStepMetrics, _| {
            rows.push(metric_row("warm-start", m));
            Ok(())
        },
    )?;
    save_checkpoint(&exp.path(WARM_CKPT), &PolicySnapshot::new(arch.clone(), warm.clone(), 0)?)?;

    let every = cfg.sft.checkpoint_every;
    let per_subdomain: Vec<(Vec<SftMetricRow>, Vec<CheckpointEntry>)> = (0..universe.subdomain_count())
        .into_par_iter()
        .map(|sid| {
            let name = universe.subdomain_name(sid).to_string();
            let data: Vec<&Problem> = universe
                .set(sid, Split::Train)
                .map(|s| s.problems.iter().collect())
                .unwrap_or_default();
            let mut rows = Vec::new();
            let mut ckpts = Vec::new();
            sft_run(
                warm.clone(),
                &arch,
                &data,
                cfg.sft.steps,
                &cfg.sft,
                derive_seed(cfg.seed, &format!("sft/{name}")),
                |m, params| {
                    rows.push(metric_row(&name, m));
                    if m.step % every == 0 {
                        let step = m.step as u64;
                        let path = checkpoint_rel(&name, step);
                        save_checkpoint(
                            &exp.path(&path),
                            &PolicySnapshot::new(arch.clone(), params.clone(), step)?,
                        )?;
                        ckpts.push(CheckpointEntry {
                            subdomain: sid,
                            name: name.clone(),
                            step,
                            path,
                        });
                    }
                    Ok(())
                },
            )?;
            Ok((rows, ckpts))
        })
        .collect::<Result<_>>()?;

    let mut checkpoints = Vec::new();
    for (r, c) in per_subdomain {
        rows.extend(r);
        checkpoints.extend(c);
    }
    write_jsonl(&exp.path(SFT_METRICS), &rows)?;
    let outcome = SftOutcome {
        init: rel(INIT_CKPT),
        warm_start: rel(WARM_CKPT),
        checkpoints,
    };
    write_json(&exp.path(SFT_INDEX), &outcome)?;

    let mut artifacts = vec![rel(UNIVERSE_FILE), rel(INIT_CKPT), rel(WARM_CKPT), rel(SFT_INDEX)];
    artifacts.extend(outcome.checkpoints.iter().map(|c| c.path.clone()));
    exp.record(SFT, artifacts, vec![rel(SFT_METRICS)], started)?;
    Ok(outcome)
}

fn metric_row(phase: &str, m: &SftStepMetrics) -> SftMetricRow {
    SftMetricRow {
        phase: phase.to_string(),
        step: m.step,
        loss: m.loss,
        grad_norm: m.grad_norm,
    }
}

// ---------------------------------------------------------------------------
// probe
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub subdomain: usize,
    pub name: String,
    pub step: u64,
    pub pass1: f64,
    pub passk: f64,
    pub n: usize,
    pub k: usize,
    pub checkpoint: PathBuf,
}

/// Pass@k curve of every specialist series on its own subdomain's probing set.
pub fn cmd_probe(exp: &mut Experiment) -> Result<Vec<ProbeRecord>> {
    if exp.reusable(PROBE) {
        return read_jsonl(&exp.path(CURVES));
    }
    exp.require(SFT, SFT_INDEX)?;
    let started = Instant::now();
    let universe = exp.universe()?;
    let sft: SftOutcome = read_json(&exp.path(SFT_INDEX))?;
    let cfg = exp.config.probe;
    let seed = exp.config.seed;

    let records: Vec<ProbeRecord> = sft
        .checkpoints
        .par_iter()
        .map(|c| {
            let set = universe
                .set(c.subdomain, Split::Probe)
                .ok_or_else(|| Error::Config(format!("no probing set for {}", c.name)))?;
            let snap = load_checkpoint(&exp.path(&c.path))?;
            // the same sub-seeds at every step of a series: differences are the checkpoint's
            let scores = evaluate_set(&snap, set, &cfg, derive_seed(seed, &format!("probe/{}", c.name)))?;
            Ok(ProbeRecord {
                subdomain: c.subdomain,
                name: c.name.clone(),
                step: c.step,
                pass1: scores.pass1,
                passk: scores.passk,
                n: cfg.n,
                k: cfg.k,
                checkpoint: c.path.clone(),
            })
        })
        .collect::<Result<_>>()?;
    write_jsonl(&exp.path(CURVES), &records)?;
    exp.record(PROBE, vec![], vec![rel(CURVES)], started)?;
    Ok(records)
}

/// Groups probe records into one curve per subdomain, ordered by step.
pub fn curves_from_records(records: &[ProbeRecord]) -> Result<Vec<ProbeCurve>> {
    let mut by_sub: BTreeMap<usize, Vec<(u64, f64)>> = BTreeMap::new();
    for r in records {
        by_sub.entry(r.subdomain).or_default().push((r.step, r.passk));
    }
    by_sub
        .into_iter()
        .map(|(sid, mut pts)| {
            pts.sort_by_key(|p| p.0);
            ProbeCurve::new(sid, pts)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// merge
// ---------------------------------------------------------------------------

/// Checkpoints on disk, keyed by `(subdomain, step)`.
pub struct DiskStore<'a> {
    run: &'a RunDir,
    paths: BTreeMap<(usize, u64), PathBuf>,
}

impl SnapshotStore for DiskStore<'_> {
    fn snapshot(&self, subdomain: usize, step: u64) -> Result<Option<PolicySnapshot>> {
        match self.paths.get(&(subdomain, step)) {
            Some(p) => load_checkpoint(&self.run.path(p)).map(Some),
            None => Ok(None),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecialistEntry {
    pub subdomain: usize,
    pub name: String,
    pub step: u64,
    pub passk: f64,
    pub checkpoint: PathBuf,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionManifest {
    pub specialists: Vec<SpecialistEntry>,
    pub fused: PathBuf,
}

/// Picks each subdomain's pass@k-argmax checkpoint and averages them.
pub fn cmd_merge(exp: &mut Experiment) -> Result<FusionManifest> {
    if exp.reusable(MERGE) {
        return read_json(&exp.path(FUSION_MANIFEST));
    }
    exp.require(PROBE, CURVES)?;
    let started = Instant::now();
    let sft: SftOutcome = read_json(&exp.path(SFT_INDEX))?;
    let records: Vec<ProbeRecord> = read_jsonl(&exp.path(CURVES))?;
    let curves = curves_from_records(&records)?;
    let store = DiskStore {
        run: &exp.run,
        paths: sft
            .checkpoints
            .iter()
            .map(|c| ((c.subdomain, c.step), c.path.clone()))
            .collect(),
    };
    let specialists = select_specialists(&curves, &store)?;
    let weights = if exp.config.fusion.weights.is_empty() {
        vec![1.0 / specialists.len() as f64; specialists.len()]
    } else {
        exp.config.fusion.weights.clone()
    };
    let spec = FusionSpec::new(specialists, weights.clone())?;
    let fused = fuse(&spec)?;
    save_checkpoint(&exp.path(FUSED_CKPT), &fused)?;

    let entries = curves
        .iter()
        .zip(&weights)
        .map(|(curve, &w)| {
            let step = curve.argmax_step()?;
            let passk = curve.points.iter().find(|p| p.0 == step).map_or(0.0, |p| p.1);
            let rec = records
                .iter()
                .find(|r| r.subdomain == curve.subdomain && r.step == step)
                .expect("curve point comes from a record");
            Ok(SpecialistEntry {
                subdomain: curve.subdomain,
                name: rec.name.clone(),
                step,
                passk,
                checkpoint: rec.checkpoint.clone(),
                weight: w,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = FusionManifest {
        specialists: entries,
        fused: rel(FUSED_CKPT),
    };
    write_json(&exp.path(FUSION_MANIFEST), &manifest)?;
    exp.record(MERGE, vec![rel(FUSED_CKPT), rel(FUSION_MANIFEST)], vec![], started)?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// rl-train
// ---------------------------------------------------------------------------

/// Probe-split pass@1/pass@k of the policy during RL (step 0 is the fused start).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorRow {
    pub stage: usize,
    pub global_step: usize,
    pub pass1: f64,
    pub passk: f64,
    pub mean_w_me: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlOutcome {
    pub stage_checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub steps: Vec<RlStepRecord>,
    pub monitor: Vec<MonitorRow>,
}

fn pooled_set(universe: &Universe, split: Split) -> ProbingSet {
    ProbingSet {
        subdomain: usize::MAX,
        split,
        problems: universe.split(split).flat_map(|s| s.problems.iter().cloned()).collect(),
    }
}

/// Runs the configured RL stages in order, starting from the fused checkpoint.
pub fn cmd_rl_train(exp: &mut Experiment) -> Result<RlOutcome> {
    if exp.reusable(RL) {
        return Ok(RlOutcome {
            stage_checkpoints: (0..exp.config.rl.stages.len()).map(stage_ckpt).collect(),
            final_checkpoint: rel(FINAL_CKPT),
            steps: read_jsonl(&exp.path(RL_METRICS))?,
            monitor: read_jsonl(&exp.path(RL_MONITOR))?,
        });
    }
    exp.require(MERGE, FUSED_CKPT)?;
    let started = Instant::now();
    let universe = exp.universe()?;
    let fused = load_checkpoint(&exp.path(FUSED_CKPT))?;
    let arch = fused.arch.clone();
    let cfg = exp.config.clone();
    let pool: Vec<&Problem> = universe
        .split(Split::Train)
        .flat_map(|s| s.problems.iter())
        .collect();
    let probe_all = pooled_set(&universe, Split::Probe);
    let monitor_seed = derive_seed(cfg.seed, "rl/monitor");
    let monitor_at = |stage: usize, global_step: usize, snap: &PolicySnapshot, w: Option<f64>| -> Result<MonitorRow> {
        let s = evaluate_set(snap, &probe_all, &cfg.probe, monitor_seed)?;
        Ok(MonitorRow {
            stage,
            global_step,
            pass1: s.pass1,
            passk: s.passk,
            mean_w_me: w,
        })
    };

    let mut monitor = Vec::new();
    if cfg.rl.eval_every > 0 {
        monitor.push(monitor_at(0, 0, &fused, None)?);
    }
    let reference = fused.clone();
    let mut params = fused.params.clone();
    let mut steps = Vec::new();
    let mut stage_checkpoints = Vec::new();
    let mut global = 0usize;
    let total: usize = cfg.rl.stages.iter().map(|s| s.steps).sum();
    for (i, stage) in cfg.rl.stages.iter().enumerate() {
        params = rl_stage(
            params,
            &arch,
            &pool,
            stage,
            i,
            global,
            Some(&reference),
            derive_seed(cfg.seed, &format!("rl/stage-{i}")),
            |rec, p| {
                let g = rec.global_step;
                if cfg.rl.eval_every > 0 && (g % cfg.rl.eval_every == 0 || g == total) {
                    let snap = PolicySnapshot::new(arch.clone(), p.clone(), g as u64)?;
                    monitor.push(monitor_at(i, g, &snap, Some(rec.mean_w_me))?);
                }
                steps.push(rec.clone());
                Ok(())
            },
        )?;
        global += stage.steps;
        let path = stage_ckpt(i);
        save_checkpoint(&exp.path(&path), &PolicySnapshot::new(arch.clone(), params.clone(), global as u64)?)?;
        stage_checkpoints.push(path);
    }
    save_checkpoint(&exp.path(FINAL_CKPT), &PolicySnapshot::new(arch, params, global as u64)?)?;
    write_jsonl(&exp.path(RL_METRICS), &steps)?;
    write_jsonl(&exp.path(RL_MONITOR), &monitor)?;

    let mut artifacts = stage_checkpoints.clone();
    artifacts.push(rel(FINAL_CKPT));
    exp.record(RL, artifacts, vec![rel(RL_METRICS), rel(RL_MONITOR)], started)?;
    Ok(RlOutcome {
        stage_checkpoints,
        final_checkpoint: rel(FINAL_CKPT),
        steps,
        monitor,
    })
}

fn stage_ckpt(i: usize) -> PathBuf {
    PathBuf::from(format!("rl/stage-{i}.json"))
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Which checkpoint `cmd_eval` scores.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EvalTarget {
    Init,
    WarmStart,
    Fused,
    Final,
    Path(PathBuf),
}

impl std::str::FromStr for EvalTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "init" => EvalTarget::Init,
            "warm-start" => EvalTarget::WarmStart,
            "fused" => EvalTarget::Fused,
            "final" => EvalTarget::Final,
            other => EvalTarget::Path(PathBuf::from(other)),
        })
    }
}

impl EvalTarget {
    fn label(&self) -> String {
        match self {
            EvalTarget::Init => "init".into(),
            EvalTarget::WarmStart => "warm-start".into(),
            EvalTarget::Fused => "fused".into(),
            EvalTarget::Final => "final".into(),
            EvalTarget::Path(p) => {
                let h = hex_sha256(p.to_string_lossy().as_bytes());
                format!("ckpt-{}", &h[..12])
            }
        }
    }

    fn resolve(&self, exp: &Experiment) -> Result<PathBuf> {
        let (stage, file) = match self {
            EvalTarget::Init => (SFT, INIT_CKPT),
            EvalTarget::WarmStart => (SFT, WARM_CKPT),
            EvalTarget::Fused => (MERGE, FUSED_CKPT),
            EvalTarget::Final => (RL, FINAL_CKPT),
            EvalTarget::Path(p) => {
                return if p.exists() {
                    Ok(p.clone())
                } else {
                    Err(Error::MissingDependency {
                        stage: "checkpoint".into(),
                        path: p.clone(),
                    })
                }
            }
        };
        exp.require(stage, file)?;
        Ok(exp.path(file))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub subdomain: String,
    pub problems: usize,
    pub pass1: f64,
    pub passk: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub checkpoint: PathBuf,
    pub split: Split,
    pub n: usize,
    pub k: usize,
    pub rows: Vec<EvalRow>,
    /// Problem-weighted mean over all subdomains.
    pub aggregate: EvalRow,
}

impl EvalTable {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} on {} (n={}, k={})", self.checkpoint.display(), self.split.as_str(), self.n, self.k);
        let _ = writeln!(s, "{:<12} {:>8} {:>8} {:>8}", "subdomain", "problems", "pass@1", format!("pass@{}", self.k));
        for r in self.rows.iter().chain(std::iter::once(&self.aggregate)) {
            let _ = writeln!(s, "{:<12} {:>8} {:>8.4} {:>8.4}", r.subdomain, r.problems, r.pass1, r.passk);
        }
        s
    }
}

/// Scores one checkpoint on every subdomain's set of `split`.
pub fn cmd_eval(exp: &mut Experiment, target: &EvalTarget, split: Split) -> Result<EvalTable> {
    let key = format!("eval:{}:{}", target.label(), split.as_str());
    let out = PathBuf::from(format!("eval/{}-{}.json", target.label(), split.as_str()));
    // explicit paths can change on disk, so only named checkpoints are reused
    if !matches!(target, EvalTarget::Path(_)) && exp.reusable(&key) {
        return read_json(&exp.path(&out));
    }
    let ckpt = target.resolve(exp)?;
    let started = Instant::now();
    let universe = exp.universe()?;
    let snap = load_checkpoint(&ckpt)?;
    let cfg: ProbeConfig = exp.config.eval;
    let seed = derive_seed(exp.config.seed, &format!("eval/{}", split.as_str()));
    let sets: Vec<&ProbingSet> = universe.split(split).collect();
    let scores = sets
        .par_iter()
        .map(|set| evaluate_set(&snap, set, &cfg, crate::seed::child_seed(seed, set.subdomain as u64)))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<EvalRow> = sets
        .iter()
        .zip(&scores)
        .map(|(set, s)| EvalRow {
            subdomain: universe.subdomain_name(set.subdomain).to_string(),
            problems: s.problems,
            pass1: s.pass1,
            passk: s.passk,
        })
        .collect();
    let total: usize = rows.iter().map(|r| r.problems).sum();
    let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(|r| f(r) * r.problems as f64).sum::<f64>() / total as f64;
    let table = EvalTable {
        checkpoint: ckpt,
        split,
        n: cfg.n,
        k: cfg.k,
        aggregate: EvalRow {
            subdomain: "all".into(),
            problems: total,
            pass1: mean(|r| r.pass1),
            passk: mean(|r| r.passk),
        },
        rows,
    };
    write_json(&exp.path(&out), &table)?;
    exp.record(&key, vec![out], vec![], started)?;
    Ok(table)
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutcome {
    pub curve_csv: PathBuf,
    pub probe_csv: PathBuf,
    pub summary: PathBuf,
}

fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| format!("{v:.6}"))
}

/// Plot-ready CSVs and a markdown summary of whatever stages have run.
pub fn cmd_report(exp: &mut Experiment) -> Result<ReportOutcome> {
    exp.require(SFT, SFT_INDEX)?;
    let started = Instant::now();
    let records: Vec<ProbeRecord> = if exp.path(CURVES).exists() {
        read_jsonl(&exp.path(CURVES))?
    } else {
        Vec::new()
    };
    let fusion: Option<FusionManifest> = if exp.path(FUSION_MANIFEST).exists() {
        Some(read_json(&exp.path(FUSION_MANIFEST))?)
    } else {
        None
    };
    let monitor: Vec<MonitorRow> = if exp.path(RL_MONITOR).exists() {
        read_jsonl(&exp.path(RL_MONITOR))?
    } else {
        Vec::new()
    };

    let mut curve = String::from("stage,step,pass1,passk,mean_w_me\n");
    for r in &records {
        let _ = writeln!(curve, "sft:{},{},{:.6},{:.6},", r.name, r.step, r.pass1, r.passk);
    }
    for m in &monitor {
        let stage = if m.global_step == 0 { "merge".to_string() } else { format!("rl:{}", m.stage) };
        let _ = writeln!(curve, "{stage},{},{:.6},{:.6},{}", m.global_step, m.pass1, m.passk, opt(m.mean_w_me));
    }
    let mut probe = String::from("subdomain,step,pass1,passk\n");
    for r in &records {
        let _ = writeln!(probe, "{},{},{:.6},{:.6}", r.name, r.step, r.pass1, r.passk);
    }

    let mut md = String::from("# Run summary\n\n");
    let _ = writeln!(md, "config hash: `{}`\n", exp.manifest.config_hash);
    if !records.is_empty() {
        md.push_str("## Probe curves (pass@k)\n\n| subdomain | step | pass@1 | pass@k |\n|---|---|---|---|\n");
        for r in &records {
            let _ = writeln!(md, "| {} | {} | {:.4} | {:.4} |", r.name, r.step, r.pass1, r.passk);
        }
        md.push('\n');
    }
    if let Some(f) = &fusion {
        md.push_str("## Specialists\n\n| subdomain | step | pass@k | weight |\n|---|---|---|---|\n");
        for s in &f.specialists {
            let _ = writeln!(md, "| {} | {} | {:.4} | {:.4} |", s.name, s.step, s.passk, s.weight);
        }
        md.push('\n');
    }
    if !monitor.is_empty() {
        md.push_str("## RL monitor (probe split)\n\n| step | pass@1 | pass@k | mean w |\n|---|---|---|---|\n");
        for m in &monitor {
            let _ = writeln!(md, "| {} | {:.4} | {:.4} | {} |", m.global_step, m.pass1, m.passk, opt(m.mean_w_me));
        }
        md.push('\n');
    }
    let evals: Vec<(String, PathBuf)> = exp
        .manifest
        .stages
        .iter()
        .filter(|(k, _)| k.starts_with("eval:"))
        .filter_map(|(k, r)| r.artifacts.first().map(|p| (k.clone(), p.clone())))
        .collect();
    for (key, path) in evals {
        if let Ok(t) = read_json::<EvalTable>(&exp.path(&path)) {
            let _ = writeln!(md, "## {key}\n\n```\n{}```\n", t.render());
        }
    }

    let out = ReportOutcome {
        curve_csv: rel("report/curve.csv"),
        probe_csv: rel("report/probe_curves.csv"),
        summary: rel("report/summary.md"),
    };
    for (p, text) in [(&out.curve_csv, &curve), (&out.probe_csv, &probe), (&out.summary, &md)] {
        let full = exp.path(p);
        std::fs::create_dir_all(full.parent().expect("report dir")).map_err(|e| Error::io(&full, e))?;
        std::fs::write(&full, text).map_err(|e| Error::io(&full, e))?;
    }
    exp.record(
        REPORT,
        vec![out.curve_csv.clone(), out.probe_csv.clone(), out.summary.clone()],
        vec![],
        started,
    )?;
    Ok(out)
}

/// Runs `sft-train`, `probe`, `merge` and `rl-train` in order.
pub fn run_pipeline(exp: &mut Experiment) -> Result<RlOutcome> {
    cmd_sft_train(exp)?;
    cmd_probe(exp)?;
    cmd_merge(exp)?;
    cmd_rl_train(exp)
}

// ---------------------------------------------------------------------------
// decontam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecontamAudit {
    pub train_line: usize,
    pub window: Vec<String>,
    pub eval_file: PathBuf,
    pub eval_line: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecontamReport {
    pub gram_len: usize,
    pub train_records: usize,
    pub kept: usize,
    pub removed: usize,
    pub tokens: usize,
    pub seconds: f64,
    pub audit: Vec<DecontamAudit>,
}

pub struct DecontamArgs<'a> {
    pub train: &'a Path,
    pub eval: &'a [PathBuf],
    pub output: &'a Path,
    pub report: Option<&'a Path>,
    pub gram_len: usize,
}

impl Default for DecontamArgs<'_> {
    fn default() -> Self {
        DecontamArgs {
            train: Path::new("train.txt"),
            eval: &[],
            output: Path::new("train.clean.txt"),
            report: None,
            gram_len: DEFAULT_GRAM_LEN,
        }
    }
}

/// Lines of a UTF-8 text file; invalid bytes fail with their file offset.
fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut offset = 0;
    for raw in bytes.split(|&b| b == b'\n') {
        let line = raw.strip_suffix(b"\r").unwrap_or(raw);
        if let Err(Error::InvalidEncoding { offset: o }) = normalize_bytes(line) {
            return Err(Error::InvalidEncoding { offset: offset + o });
        }
        out.push(String::from_utf8(line.to_vec()).expect("validated above"));
        offset += raw.len() + 1;
    }
    if bytes.ends_with(b"\n") {
        out.pop();
    }
    Ok(out)
}

/// Removes every training line (one record per line) sharing an n-gram with any eval line.
pub fn cmd_decontam(args: &DecontamArgs) -> Result<DecontamReport> {
    let started = Instant::now();
    let mut eval_lines = Vec::new();
    let mut origin = Vec::new();
    for f in args.eval {
        for (i, l) in read_lines(f)?.into_iter().enumerate() {
            eval_lines.push(l);
            origin.push((f.clone(), i));
        }
    }
    let index = build_index(&eval_lines, args.gram_len)?;
    let train = read_lines(args.train)?;
    let n_train = train.len();
    let outcome = filter_corpus(train, &index);

    let mut text = outcome.kept.join("\n");
    if !outcome.kept.is_empty() {
        text.push('\n');
    }
    if let Some(dir) = args.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(args.output, text).map_err(|e| Error::io(args.output, e))?;

    let report = DecontamReport {
        gram_len: args.gram_len,
        train_records: n_train,
        kept: outcome.kept.len(),
        removed: outcome.removed.len(),
        tokens: outcome.tokens,
        seconds: elapsed(started),
        audit: outcome
            .audit
            .into_iter()
            .map(|a| DecontamAudit {
                train_line: a.record_id,
                window: a.window,
                eval_file: origin[a.eval_source].0.clone(),
                eval_line: origin[a.eval_source].1,
            })
            .collect(),
    };
    if let Some(p) = args.report {
        write_json(p, &report)?;
    }
    Ok(report)
}
