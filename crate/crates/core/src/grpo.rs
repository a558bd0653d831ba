//! Group-relative advantages and the clipped surrogate objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{
    accumulate_rows, log_softmax, sample, step_log_probs, step_logits, LogProbTrace, ParamVector,
    PolicyArchitecture, PolicySnapshot, Response,
};
use crate::seed::child_seed;
use crate::tasks::{verify, Problem};

/// One sampled response and its log-probabilities under the sampling policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub response: Response,
    pub old_trace: LogProbTrace,
}

/// Mean, population standard deviation and standardized advantages of a reward group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub mean: f64,
    pub std: f64,
    pub advantages: Vec<f64>,
}

/// `A_i = (r_i - mean) / std` with the population standard deviation.
///
/// A group whose rewards are all identical has `std = 0` and all-zero
/// advantages; no epsilon is added to the denominator.
pub fn group_advantages(rewards: &[f64]) -> GroupStats {
    let g = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / g;
    if rewards.iter().all(|&r| r == rewards[0]) {
        return GroupStats {
            mean,
            std: 0.0,
            advantages: vec![0.0; rewards.len()],
        };
    }
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g).sqrt();
    let advantages = rewards.iter().map(|r| (r - mean) / std).collect();
    GroupStats {
        mean,
        std,
        advantages,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    question: Problem,
    rollouts: Vec<Rollout>,
    rewards: Vec<f64>,
    mean: f64,
    std: f64,
    advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn from_parts(question: Problem, rollouts: Vec<Rollout>, rewards: Vec<f64>) -> Result<Self> {
        if rollouts.len() < 2 {
            return Err(Error::InputDomain(format!(
                "a rollout group needs G >= 2, got {}",
                rollouts.len()
            )));
        }
        if rewards.len() != rollouts.len() {
            return Err(Error::DimensionMismatch {
                expected: rollouts.len(),
                found: rewards.len(),
            });
        }
        for r in &rollouts {
            if r.old_trace.per_token.len() != r.response.len() {
                return Err(Error::DimensionMismatch {
                    expected: r.response.len(),
                    found: r.old_trace.per_token.len(),
                });
            }
        }
        let GroupStats {
            mean,
            std,
            advantages,
        } = group_advantages(&rewards);
        Ok(RolloutGroup {
            question,
            rollouts,
            rewards,
            mean,
            std,
            advantages,
        })
    }

    pub fn question(&self) -> &Problem {
        &self.question
    }

    pub fn rollouts(&self) -> &[Rollout] {
        &self.rollouts
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std(&self) -> f64 {
        self.std
    }

    pub fn advantages(&self) -> &[f64] {
        &self.advantages
    }

    pub fn size(&self) -> usize {
        self.rollouts.len()
    }

    pub(crate) fn scale_advantages(&mut self, w: f64) {
        self.advantages.iter_mut().for_each(|a| *a *= w);
    }
}

/// Samples `g` responses (sub-seeds `child_seed(seed, i)`) and scores them with the verifier.
pub fn rollout_group(
    params: &[f64],
    arch: &PolicyArchitecture,
    question: &Problem,
    g: usize,
    temperature: f64,
    max_len: usize,
    seed: u64,
) -> Result<RolloutGroup> {
    if g < 2 {
        return Err(Error::InputDomain(format!("group size must be >= 2, got {g}")));
    }
    let mut rollouts = Vec::with_capacity(g);
    let mut rewards = Vec::with_capacity(g);
    for i in 0..g {
        let (response, old_trace) = sample(
            params,
            arch,
            &question.prompt,
            temperature,
            max_len,
            child_seed(seed, i as u64),
        )?;
        rewards.push(verify(question, &response));
        rollouts.push(Rollout {
            response,
            old_trace,
        });
    }
    RolloutGroup::from_parts(question.clone(), rollouts, rewards)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipConfig {
    epsilon: f64,
    kl_coef: f64,
    reference: Option<PolicySnapshot>,
}

impl ClipConfig {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::InputDomain(format!(
                "clip epsilon must lie in (0, 1), got {epsilon}"
            )));
        }
        Ok(ClipConfig {
            epsilon,
            kl_coef: 0.0,
            reference: None,
        })
    }

    /// Adds an exact per-token KL penalty towards `reference`. A zero
    /// coefficient drops the reference.
    pub fn with_kl(mut self, coef: f64, reference: PolicySnapshot) -> Result<Self> {
        if !(coef >= 0.0 && coef.is_finite()) {
            return Err(Error::InputDomain(format!("kl coefficient {coef} must be >= 0")));
        }
        if coef > 0.0 {
            self.kl_coef = coef;
            self.reference = Some(reference);
        } else {
            self.kl_coef = 0.0;
            self.reference = None;
        }
        Ok(self)
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn kl_coef(&self) -> f64 {
        self.kl_coef
    }

    pub fn reference(&self) -> Option<&PolicySnapshot> {
        self.reference.as_ref()
    }
}

/// `min(r * A, clip(r, 1 - eps, 1 + eps) * A)` and whether the unclipped
/// branch (the one that carries gradient) attains the minimum.
pub fn clipped_term(ratio: f64, advantage: f64, epsilon: f64) -> (f64, bool) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage;
    if unclipped <= clipped {
        (unclipped, true)
    } else {
        (clipped, false)
    }
}

/// Objective value, gradient, and diagnostics of one surrogate evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateReport {
    pub objective: f64,
    pub grad: ParamVector,
    /// Fraction of tokens with non-zero advantage where the clipped branch was active.
    pub clip_fraction: f64,
    /// Mean per-token KL to the reference policy (0 without a reference).
    pub kl: f64,
}

pub fn grpo_objective_and_grad(
    params: &ParamVector,
    old_snapshot: &PolicySnapshot,
    groups: &[RolloutGroup],
    clip: &ClipConfig,
) -> Result<(f64, ParamVector)> {
    let r = surrogate(params, old_snapshot, groups, clip)?;
    Ok((r.objective, r.grad))
}

/// The clipped surrogate averaged over tokens, then responses, then groups:
///
/// `mean_groups (1/G) sum_i (1/|y_i|) sum_t min(r_it A_i, clip(r_it) A_i) - beta * KL`
///
/// with `r_it = exp(log pi(y_it) - log pi_old(y_it))`. The old log-probs are
/// the ones recorded in each rollout's trace.
pub fn surrogate(
    params: &ParamVector,
    old_snapshot: &PolicySnapshot,
    groups: &[RolloutGroup],
    clip: &ClipConfig,
) -> Result<SurrogateReport> {
    let arch = &old_snapshot.arch;
    arch.check_params(params)?;
    if let Some(reference) = clip.reference() {
        if reference.arch != *arch {
            return Err(Error::ArchitectureMismatch(
                "reference policy architecture differs from the trained policy".into(),
            ));
        }
    }
    if groups.is_empty() {
        return Err(Error::InputDomain("no rollout groups".into()));
    }

    let v = arch.vocab.size();
    let eps = clip.epsilon();
    let beta = clip.kl_coef();
    let mut grad = vec![0.0; params.len()];
    let mut objective = 0.0;
    let mut kl_total = 0.0;
    let mut active = 0usize;
    let mut clipped = 0usize;
    let per_group = 1.0 / groups.len() as f64;

    for group in groups {
        let per_rollout = per_group / group.size() as f64;
        let prompt = group.question().prompt.tokens();
        for (rollout, &adv) in group.rollouts().iter().zip(group.advantages()) {
            let y = rollout.response.tokens();
            let weight = per_rollout / y.len() as f64;
            let steps = step_log_probs(arch, params, prompt, y);
            for (t, ((rows, lp), &tok)) in steps.iter().zip(y).enumerate() {
                let ratio = (lp[tok as usize] - rollout.old_trace.per_token[t]).exp();
                let (term, live) = clipped_term(ratio, adv, eps);
                objective += weight * term;
                if adv != 0.0 {
                    active += 1;
                    if live {
                        // d(r A) = A r (onehot - p)
                        let mut g: Vec<f64> = lp.iter().map(|l| -l.exp()).collect();
                        g[tok as usize] += 1.0;
                        accumulate_rows(&mut grad, v, rows, &g, weight * adv * ratio);
                    } else {
                        clipped += 1;
                    }
                }
                if let Some(reference) = clip.reference() {
                    let ref_rows = reference.arch.active_rows(prompt, &y[..t]);
                    let lq = log_softmax(&step_logits(v, &reference.params, &ref_rows));
                    let kl: f64 = lp
                        .iter()
                        .zip(&lq)
                        .map(|(a, b)| a.exp() * (a - b))
                        .sum();
                    kl_total += weight * kl;
                    objective -= beta * weight * kl;
                    // dKL/dz_k = p_k (log p_k - log q_k - KL)
                    let g: Vec<f64> = lp
                        .iter()
                        .zip(&lq)
                        .map(|(a, b)| a.exp() * (a - b - kl))
                        .collect();
                    accumulate_rows(&mut grad, v, rows, &g, -beta * weight);
                }
            }
        }
    }

    if !objective.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("surrogate objective or gradient is not finite".into()));
    }
    Ok(SurrogateReport {
        objective,
        grad: ParamVector::from_raw(grad),
        clip_fraction: if active == 0 {
            0.0
        } else {
            clipped as f64 / active as f64
        },
        kl: kl_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{init_params, logprob, sft_loss_and_grad, Prompt, Vocabulary};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn hand_evaluated_group() {
        let s = group_advantages(&[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(s.mean, 0.5);
        assert_eq!(s.std, 0.5);
        assert_eq!(s.advantages, vec![1.0, -1.0, -1.0, 1.0]);
    }

    #[test]
    fn degenerate_groups_have_zero_advantage() {
        for r in [[0.0; 5], [1.0; 5], [0.1; 5]] {
            let s = group_advantages(&r);
            assert_eq!(s.std, 0.0);
            assert!(s.advantages.iter().all(|&a| a == 0.0));
        }
    }

    #[test]
    fn clipped_term_examples() {
        assert_eq!(clipped_term(1.5, 1.0, 0.2), (1.2, false));
        assert_eq!(clipped_term(1.5, -1.0, 0.2), (-1.5, true));
        assert_eq!(clipped_term(0.5, -1.0, 0.2), (-0.8, false));
        assert_eq!(clipped_term(1.1, 2.0, 0.2), (1.1 * 2.0, true));
    }

    #[test]
    fn clip_config_validation() {
        assert!(ClipConfig::new(0.0).is_err());
        assert!(ClipConfig::new(1.0).is_err());
        let c = ClipConfig::new(0.2).unwrap();
        assert!(c.reference().is_none());
    }

    fn tiny() -> (PolicyArchitecture, Problem) {
        let v = Vocabulary::anonymous(3).unwrap();
        let arch = PolicyArchitecture::tabular(v.clone(), 2, 8).unwrap();
        let q = Problem {
            prompt: Prompt::new(vec![0, 1]),
            answer: Response::new(vec![1, 2], &v).unwrap(),
            subdomain: 0,
        };
        (arch, q)
    }

    #[test]
    fn clipped_tokens_carry_no_gradient() {
        let (arch, q) = tiny();
        let params = init_params(&arch, 1, 0.3).unwrap();
        let eos_only = Response::new(vec![2], &arch.vocab).unwrap();
        let lp = logprob(&params, &arch, &q.prompt, &eos_only).unwrap().total;
        let mk = |ratio: f64| Rollout {
            response: eos_only.clone(),
            old_trace: LogProbTrace {
                per_token: vec![lp - ratio.ln()],
                total: lp - ratio.ln(),
            },
        };
        let group =
            RolloutGroup::from_parts(q, vec![mk(1.5), mk(0.5)], vec![1.0, 0.0]).unwrap();
        let snap = PolicySnapshot::new(arch, params.clone(), 0).unwrap();
        let rep = surrogate(&params, &snap, &[group], &ClipConfig::new(0.2).unwrap()).unwrap();
        assert!(close(rep.objective, 0.5 * (1.2 - 0.8), 1e-12));
        assert!(rep.grad.iter().all(|&g| g == 0.0));
        assert_eq!(rep.clip_fraction, 1.0);
    }

    #[test]
    fn ratio_one_gradient_is_vanilla_policy_gradient() {
        let (arch, q) = tiny();
        let params = init_params(&arch, 4, 0.5).unwrap();
        let group = rollout_group(&params, &arch, &q, 6, 1.0, 4, 99).unwrap();
        // force a non-degenerate reward pattern
        let rewards = vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let group =
            RolloutGroup::from_parts(q.clone(), group.rollouts().to_vec(), rewards).unwrap();
        let snap = PolicySnapshot::new(arch.clone(), params.clone(), 0).unwrap();
        let (obj, grad) =
            grpo_objective_and_grad(&params, &snap, std::slice::from_ref(&group), &ClipConfig::new(0.2).unwrap())
                .unwrap();

        let g = group.size() as f64;
        let mut expected = vec![0.0; params.len()];
        let mut expected_obj = 0.0;
        for (r, &a) in group.rollouts().iter().zip(group.advantages()) {
            let len = r.response.len() as f64;
            expected_obj += a / g;
            // the SFT gradient of one pair is -grad log pi(y|x)
            let (_, nll_grad) =
                sft_loss_and_grad(&params, &arch, &[(q.prompt.clone(), r.response.clone())])
                    .unwrap();
            for (e, n) in expected.iter_mut().zip(nll_grad.iter()) {
                *e -= a / (g * len) * n;
            }
        }
        assert!(close(obj, expected_obj, 1e-12));
        for (a, b) in grad.iter().zip(&expected) {
            assert!(close(*a, *b, 1e-12), "{a} vs {b}");
        }
    }

    #[test]
    fn mismatched_params_rejected() {
        let (arch, q) = tiny();
        let params = init_params(&arch, 4, 0.5).unwrap();
        let group = rollout_group(&params, &arch, &q, 2, 1.0, 4, 1).unwrap();
        let snap = PolicySnapshot::new(arch, params, 0).unwrap();
        let short = ParamVector::zeros(3);
        assert!(matches!(
            grpo_objective_and_grad(&short, &snap, &[group], &ClipConfig::new(0.2).unwrap()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rollout_group_is_deterministic() {
        let (arch, q) = tiny();
        let params = init_params(&arch, 4, 0.5).unwrap();
        let a = rollout_group(&params, &arch, &q, 4, 1.0, 4, 5).unwrap();
        let b = rollout_group(&params, &arch, &q, 4, 1.0, 4, 5).unwrap();
        assert_eq!(a, b);
        assert!(rollout_group(&params, &arch, &q, 1, 1.0, 4, 5).is_err());
    }
}
