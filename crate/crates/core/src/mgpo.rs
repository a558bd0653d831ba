//! Max-entropy guided advantage weighting.
//!
//! A question's rollout group yields an empirical accuracy `p_c`. Its
//! distance from the maximum-entropy point `p0` is the binary KL divergence
//! `D(p_c || p0)`, and every advantage of the group is scaled by
//! `w = exp(-lambda * D)`. With `lambda = 0` every weight is exactly 1 and the
//! objective is the plain group-relative one. All logarithms are natural and
//! `0 * ln 0` is taken as 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grpo::{surrogate, ClipConfig, RolloutGroup, SurrogateReport};
use crate::policy::{ParamVector, PolicySnapshot};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MgpoConfig {
    lambda: f64,
    p0: f64,
}

impl Default for MgpoConfig {
    fn default() -> Self {
        MgpoConfig {
            lambda: 1.0,
            p0: 0.5,
        }
    }
}

impl MgpoConfig {
    pub fn new(lambda: f64, p0: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InputDomain(format!("lambda must be >= 0, got {lambda}")));
        }
        if !(p0 > 0.0 && p0 < 1.0) {
            return Err(Error::InputDomain(format!("p0 must lie in (0, 1), got {p0}")));
        }
        Ok(MgpoConfig { lambda, p0 })
    }

    pub fn with_lambda(lambda: f64) -> Result<Self> {
        MgpoConfig::new(lambda, 0.5)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn p0(&self) -> f64 {
        self.p0
    }
}

/// Uncertainty summary of one question's rollout group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionUncertainty {
    pub question_id: usize,
    pub p_c: f64,
    pub entropy: f64,
    pub distance: f64,
    pub weight: f64,
}

fn check_prob(p: f64, what: &str) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InputDomain(format!("{what} = {p} outside [0, 1]")))
    }
}

/// `x * ln(x / y)` with `0 * ln 0 = 0`.
fn xlog_ratio(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * (x / y).ln()
    }
}

/// Fraction of rewards equal to 1.
pub fn empirical_accuracy(group: &RolloutGroup) -> f64 {
    accuracy_of(group.rewards())
}

fn accuracy_of(rewards: &[f64]) -> f64 {
    rewards.iter().filter(|&&r| r == 1.0).count() as f64 / rewards.len() as f64
}

pub fn binary_entropy(p: f64) -> Result<f64> {
    check_prob(p, "p")?;
    let h = |x: f64| if x == 0.0 { 0.0 } else { -x * x.ln() };
    Ok(h(p) + h(1.0 - p))
}

/// Binary KL divergence `p ln(p/p0) + (1-p) ln((1-p)/(1-p0))`.
pub fn max_entropy_deviation(p: f64, p0: f64) -> Result<f64> {
    check_prob(p, "p")?;
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(Error::InputDomain(format!("p0 = {p0} outside (0, 1)")));
    }
    let d = xlog_ratio(p, p0) + xlog_ratio(1.0 - p, 1.0 - p0);
    // rounding can leave a tiny negative value near p = p0
    Ok(d.max(0.0))
}

pub fn entropy_weight(p: f64, cfg: &MgpoConfig) -> Result<f64> {
    let d = max_entropy_deviation(p, cfg.p0)?;
    Ok((-cfg.lambda * d).exp())
}

pub fn assess(question_id: usize, group: &RolloutGroup, cfg: &MgpoConfig) -> QuestionUncertainty {
    let p_c = empirical_accuracy(group);
    let distance = max_entropy_deviation(p_c, cfg.p0).expect("accuracy lies in [0, 1]");
    QuestionUncertainty {
        question_id,
        p_c,
        entropy: binary_entropy(p_c).expect("accuracy lies in [0, 1]"),
        distance,
        weight: (-cfg.lambda * distance).exp(),
    }
}

/// Scales every advantage of the group by `w(p_c)`. Apply once per rollout batch.
pub fn modulate_advantages(group: &RolloutGroup, cfg: &MgpoConfig) -> RolloutGroup {
    let w = assess(0, group, cfg).weight;
    let mut out = group.clone();
    out.scale_advantages(w);
    out
}

pub fn mgpo_objective_and_grad(
    params: &ParamVector,
    old_snapshot: &PolicySnapshot,
    groups: &[RolloutGroup],
    clip: &ClipConfig,
    cfg: &MgpoConfig,
) -> Result<(f64, ParamVector)> {
    let r = mgpo_surrogate(params, old_snapshot, groups, clip, cfg)?;
    Ok((r.objective, r.grad))
}

pub fn mgpo_surrogate(
    params: &ParamVector,
    old_snapshot: &PolicySnapshot,
    groups: &[RolloutGroup],
    clip: &ClipConfig,
    cfg: &MgpoConfig,
) -> Result<SurrogateReport> {
    let modulated: Vec<RolloutGroup> = groups.iter().map(|g| modulate_advantages(g, cfg)).collect();
    surrogate(params, old_snapshot, &modulated, clip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grpo::Rollout;
    use crate::policy::{LogProbTrace, Prompt, Response, Vocabulary};
    use crate::tasks::Problem;

    fn group(rewards: &[f64]) -> RolloutGroup {
        let v = Vocabulary::anonymous(3).unwrap();
        let eos = Response::new(vec![2], &v).unwrap();
        let q = Problem {
            prompt: Prompt::new(vec![0]),
            answer: eos.clone(),
            subdomain: 0,
        };
        let rollouts = rewards
            .iter()
            .map(|_| Rollout {
                response: eos.clone(),
                old_trace: LogProbTrace::new(vec![-1.0]),
            })
            .collect();
        RolloutGroup::from_parts(q, rollouts, rewards.to_vec()).unwrap()
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(empirical_accuracy(&group(&[1.0, 0.0, 0.0, 1.0])), 0.5);
        assert_eq!(empirical_accuracy(&group(&[0.0; 4])), 0.0);
        assert_eq!(empirical_accuracy(&group(&[1.0; 4])), 1.0);
    }

    #[test]
    fn entropy_examples() {
        assert!((binary_entropy(0.5).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
        assert!((binary_entropy(0.25).unwrap() - 0.562335).abs() < 1e-6);
        assert!(binary_entropy(1.5).is_err());
        assert!(binary_entropy(-0.1).is_err());
    }

    #[test]
    fn deviation_examples() {
        assert_eq!(max_entropy_deviation(0.5, 0.5).unwrap(), 0.0);
        assert!((max_entropy_deviation(1.0, 0.5).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((max_entropy_deviation(0.75, 0.5).unwrap() - 0.130812).abs() < 1e-6);
        assert!(max_entropy_deviation(0.5, 0.0).is_err());
        assert!(max_entropy_deviation(0.5, 1.0).is_err());
        assert!(max_entropy_deviation(1.1, 0.5).is_err());
    }

    #[test]
    fn weight_examples() {
        let zero = MgpoConfig::with_lambda(0.0).unwrap();
        for p in [0.0, 0.3, 1.0] {
            assert_eq!(entropy_weight(p, &zero).unwrap(), 1.0);
        }
        for l in [0.5, 1.0, 7.0] {
            let c = MgpoConfig::with_lambda(l).unwrap();
            assert_eq!(entropy_weight(0.5, &c).unwrap(), 1.0);
        }
        let one = MgpoConfig::with_lambda(1.0).unwrap();
        // exp(-0.130812035941137) evaluated independently
        assert!((entropy_weight(0.75, &one).unwrap() - 0.877382675301662).abs() < 1e-12);
    }

    #[test]
    fn modulation_examples() {
        let g = group(&[1.0, 0.0, 0.0, 1.0]);
        let zero = MgpoConfig::with_lambda(0.0).unwrap();
        assert_eq!(modulate_advantages(&g, &zero).advantages(), g.advantages());
        let one = MgpoConfig::with_lambda(1.0).unwrap();
        assert_eq!(modulate_advantages(&g, &one).advantages(), g.advantages());

        let g = group(&[1.0, 1.0, 1.0, 0.0]);
        let two = MgpoConfig::with_lambda(2.0).unwrap();
        let m = modulate_advantages(&g, &two);
        for (a, b) in m.advantages().iter().zip(g.advantages()) {
            assert!((a / b - 0.769800358919501).abs() < 1e-12);
        }
    }

    #[test]
    fn config_domain() {
        assert!(MgpoConfig::new(-1.0, 0.5).is_err());
        assert!(MgpoConfig::new(1.0, 0.0).is_err());
        assert!(MgpoConfig::new(1.0, 1.0).is_err());
        let c = MgpoConfig::default();
        assert_eq!((c.lambda(), c.p0()), (1.0, 0.5));
    }
}
