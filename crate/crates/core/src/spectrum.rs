//! Pass@k estimation, checkpoint probing, specialist selection and parameter fusion.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{sample, ParamVector, PolicySnapshot};
use crate::seed::child_seed;
use crate::tasks::{verify, ProbingSet};

// ---------------------------------------------------------------------------
// Pass@k
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    /// 1 if any of the first k samples is correct.
    NaiveMax,
    /// `1 - C(n - c, k) / C(n, k)` over all n samples.
    Unbiased,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassKEstimate {
    pub n: usize,
    pub c: usize,
    pub k: usize,
    pub value: f64,
    pub kind: EstimatorKind,
}

fn check_nck(n: usize, c: usize, k: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::InputDomain(format!("pass@k needs 1 <= k <= n, got k={k}, n={n}")));
    }
    if c > n {
        return Err(Error::InputDomain(format!("correct count {c} exceeds n={n}")));
    }
    Ok(())
}

/// Exact binomial coefficient; `None` on overflow.
fn binomial(n: u64, k: u64) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) is divisible by (i + 1) at every step
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

/// Unbiased pass@k from `n` samples of which `c` are correct.
///
/// Up to `n = 64` this is the exact ratio of integer binomials, rounded once;
/// beyond that it uses the product form `1 - prod_{i=n-c+1}^{n} (1 - k/i)`.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    check_nck(n, c, k)?;
    if n - c < k {
        return Ok(1.0);
    }
    if n <= 64 {
        let total = binomial(n as u64, k as u64).expect("C(64, k) fits in u128");
        let miss = binomial((n - c) as u64, k as u64).expect("C(64, k) fits in u128");
        return Ok((total - miss) as f64 / total as f64);
    }
    let miss: f64 = ((n - c + 1)..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - miss)
}

pub fn naive_pass_at_k(outcomes: &[bool], k: usize) -> Result<f64> {
    check_nck(outcomes.len(), 0, k)?;
    Ok(if outcomes[..k].iter().any(|&o| o) { 1.0 } else { 0.0 })
}

pub fn estimate(outcomes: &[bool], k: usize, kind: EstimatorKind) -> Result<PassKEstimate> {
    let n = outcomes.len();
    let c = outcomes.iter().filter(|&&o| o).count();
    let value = match kind {
        EstimatorKind::Unbiased => pass_at_k(n, c, k)?,
        EstimatorKind::NaiveMax => naive_pass_at_k(outcomes, k)?,
    };
    Ok(PassKEstimate {
        n,
        c,
        k,
        value,
        kind,
    })
}

// ---------------------------------------------------------------------------
// Probing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Samples drawn per problem.
    pub n: usize,
    pub k: usize,
    pub temperature: f64,
    pub max_len: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            n: 16,
            k: 8,
            temperature: 1.0,
            max_len: 6,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        check_nck(self.n, 0, self.k).map_err(|e| Error::Config(e.to_string()))?;
        if self.temperature.is_nan() || self.temperature <= 0.0 || self.max_len == 0 {
            return Err(Error::Config(
                "probe temperature must be > 0 and max_len >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Mean pass@1 and pass@k of one checkpoint over one problem set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetScores {
    pub problems: usize,
    pub pass1: f64,
    pub passk: f64,
}

/// Samples `n` responses per problem and scores both pass@1 and pass@k from them.
///
/// Problem `j` uses sub-seed `child_seed(seed, j)`, so the result does not
/// depend on how the work is scheduled across threads.
pub fn evaluate_set(
    snapshot: &PolicySnapshot,
    set: &ProbingSet,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<SetScores> {
    cfg.validate()?;
    if set.problems.is_empty() {
        return Err(Error::InputDomain("empty probing set".into()));
    }
    let per_problem: Vec<(f64, f64)> = set
        .problems
        .par_iter()
        .enumerate()
        .map(|(j, problem)| {
            let pseed = child_seed(seed, j as u64);
            let mut c = 0;
            for s in 0..cfg.n {
                let (resp, _) = sample(
                    &snapshot.params,
                    &snapshot.arch,
                    &problem.prompt,
                    cfg.temperature,
                    cfg.max_len,
                    child_seed(pseed, s as u64),
                )?;
                if verify(problem, &resp) == 1.0 {
                    c += 1;
                }
            }
            Ok((pass_at_k(cfg.n, c, 1)?, pass_at_k(cfg.n, c, cfg.k)?))
        })
        .collect::<Result<_>>()?;
    let m = per_problem.len() as f64;
    let (p1, pk) = per_problem
        .iter()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    Ok(SetScores {
        problems: per_problem.len(),
        pass1: p1 / m,
        passk: pk / m,
    })
}

/// Mean unbiased pass@k of `snapshot` over the probing set.
pub fn probe_checkpoint(
    snapshot: &PolicySnapshot,
    probe_set: &ProbingSet,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    Ok(evaluate_set(snapshot, probe_set, cfg, seed)?.passk)
}

/// Pass@k of one subdomain's probing set across checkpoint steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCurve {
    pub subdomain: usize,
    pub points: Vec<(u64, f64)>,
}

impl ProbeCurve {
    pub fn new(subdomain: usize, points: Vec<(u64, f64)>) -> Result<Self> {
        if points.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::InputDomain("probe curve steps must strictly increase".into()));
        }
        if points.iter().any(|&(_, v)| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InputDomain("probe curve values must lie in [0, 1]".into()));
        }
        Ok(ProbeCurve { subdomain, points })
    }

    /// Step with the highest score; ties go to the earliest step.
    pub fn argmax_step(&self) -> Result<u64> {
        let mut best: Option<(u64, f64)> = None;
        for &(t, v) in &self.points {
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((t, v));
            }
        }
        best.map(|(t, _)| t)
            .ok_or_else(|| Error::InputDomain(format!("empty probe curve for subdomain {}", self.subdomain)))
    }
}

/// Lookup of stored checkpoints for specialist selection.
pub trait SnapshotStore {
    fn snapshot(&self, subdomain: usize, step: u64) -> Result<Option<PolicySnapshot>>;
}

/// One shared training run: every subdomain probes the same checkpoint series.
impl SnapshotStore for BTreeMap<u64, PolicySnapshot> {
    fn snapshot(&self, _subdomain: usize, step: u64) -> Result<Option<PolicySnapshot>> {
        Ok(self.get(&step).cloned())
    }
}

/// One checkpoint series per subdomain.
impl SnapshotStore for BTreeMap<(usize, u64), PolicySnapshot> {
    fn snapshot(&self, subdomain: usize, step: u64) -> Result<Option<PolicySnapshot>> {
        Ok(self.get(&(subdomain, step)).cloned())
    }
}

/// Per curve, the stored snapshot at the curve's argmax step.
pub fn select_specialists<S: SnapshotStore + ?Sized>(
    curves: &[ProbeCurve],
    snapshots: &S,
) -> Result<Vec<PolicySnapshot>> {
    curves
        .iter()
        .map(|curve| {
            let step = curve.argmax_step()?;
            snapshots
                .snapshot(curve.subdomain, step)?
                .ok_or(Error::MissingSnapshot(step))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Fusion
// ---------------------------------------------------------------------------

/// Specialists and their convex combination weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionSpec {
    specialists: Vec<PolicySnapshot>,
    weights: Vec<f64>,
}

impl FusionSpec {
    pub fn new(specialists: Vec<PolicySnapshot>, weights: Vec<f64>) -> Result<Self> {
        if specialists.is_empty() {
            return Err(Error::InputDomain("fusion needs at least one specialist".into()));
        }
        if weights.len() != specialists.len() {
            return Err(Error::DimensionMismatch {
                expected: specialists.len(),
                found: weights.len(),
            });
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InputDomain("fusion weights must be finite and >= 0".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InputDomain(format!("fusion weights sum to {sum}, not 1")));
        }
        let arch = &specialists[0].arch;
        for s in &specialists[1..] {
            if s.arch != *arch || s.params.dim() != specialists[0].params.dim() {
                return Err(Error::ArchitectureMismatch(
                    "specialists do not share one architecture".into(),
                ));
            }
        }
        Ok(FusionSpec {
            specialists,
            weights,
        })
    }

    /// Equal weights `1/N`.
    pub fn uniform(specialists: Vec<PolicySnapshot>) -> Result<Self> {
        let n = specialists.len().max(1);
        FusionSpec::new(specialists, vec![1.0 / n as f64; n])
    }

    pub fn specialists(&self) -> &[PolicySnapshot] {
        &self.specialists
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Elementwise `sum_i w_i * params_i`; the step is the latest specialist step.
pub fn fuse(spec: &FusionSpec) -> Result<PolicySnapshot> {
    let first = &spec.specialists[0];
    let dim = first.params.dim();
    let mut out = vec![0.0; dim];
    let mut lo = first.params.to_vec();
    let mut hi = first.params.to_vec();
    for (s, &w) in spec.specialists.iter().zip(&spec.weights) {
        for (d, &x) in s.params.iter().enumerate() {
            out[d] += w * x;
            lo[d] = lo[d].min(x);
            hi[d] = hi[d].max(x);
        }
    }
    // rounding may step an ulp outside the coordinatewise hull
    for d in 0..dim {
        out[d] = out[d].clamp(lo[d], hi[d]);
    }
    let step = spec.specialists.iter().map(|s| s.step).max().unwrap_or(0);
    PolicySnapshot::new(first.arch.clone(), ParamVector::new(out)?, step)
}
