//! Supervised and RL optimization loops shared by the pipeline commands.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grpo::{rollout_group, surrogate, ClipConfig, RolloutGroup};
use crate::harness::config::{Algorithm, RlStage, SftConfig};
use crate::mgpo::{assess, entropy_weight, modulate_advantages, MgpoConfig};
use crate::policy::{clip_grad_norm, sft_loss_and_grad, sgd_step, ParamVector, PolicyArchitecture, PolicySnapshot};
use crate::seed::child_seed;
use crate::tasks::Problem;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftStepMetrics {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Minibatch SGD on the negative log-likelihood of the reference answers.
///
/// Each step draws `batch_size` problems uniformly with replacement.
/// `on_step` sees the parameters after every update (steps count from 1).
pub fn sft_run<F>(
    start: ParamVector,
    arch: &PolicyArchitecture,
    data: &[&Problem],
    steps: usize,
    cfg: &SftConfig,
    seed: u64,
    mut on_step: F,
) -> Result<ParamVector>
where
    F: FnMut(&SftStepMetrics, &ParamVector) -> Result<()>,
{
    if data.is_empty() {
        return Err(Error::InputDomain("no SFT training data".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = start;
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for step in 1..=steps {
        batch.clear();
        for _ in 0..cfg.batch_size {
            let p = data[rng.gen_range(0..data.len())];
            batch.push((p.prompt.clone(), p.answer.clone()));
        }
        let (loss, mut grad) = sft_loss_and_grad(&params, arch, &batch)?;
        let grad_norm = match cfg.grad_clip {
            Some(c) => clip_grad_norm(&mut grad, c),
            None => grad.norm(),
        };
        params = sgd_step(&params, &grad, cfg.lr)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("SFT loss diverged at step {step}")));
        }
        on_step(&SftStepMetrics { step, loss, grad_norm }, &params)?;
    }
    Ok(params)
}

/// One line of the RL metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlStepRecord {
    pub stage: usize,
    /// Step within the stage, from 1.
    pub step: usize,
    /// Step counted across all stages.
    pub global_step: usize,
    pub mean_reward: f64,
    pub mean_abs_advantage: f64,
    pub clip_fraction: f64,
    pub objective: f64,
    pub kl: f64,
    pub grad_norm: f64,
    pub mean_w_me: f64,
    /// Summed weight of non-degenerate groups over the number of groups.
    pub effective_weight_fraction: f64,
    /// Bucket `c` counts questions with exactly `c` correct rollouts.
    pub pc_histogram: Vec<usize>,
    /// Weight given to a question in bucket `c`; with `pc_histogram` this is
    /// the step's weight histogram.
    pub w_me_by_bucket: Vec<f64>,
}

/// Group-relative policy optimization over `stage.steps` steps.
///
/// Per step: draw questions (with replacement) from `pool`, sample a rollout
/// group for each under the current policy, weight the advantages (MGPO), and
/// take `epochs` clipped-surrogate ascent steps on that frozen batch. GRPO
/// stages are the MGPO computation with `lambda = 0`, so every weight is
/// exactly 1.
#[allow(clippy::too_many_arguments)]
pub fn rl_stage<F>(
    start: ParamVector,
    arch: &PolicyArchitecture,
    pool: &[&Problem],
    stage: &RlStage,
    stage_index: usize,
    first_global_step: usize,
    reference: Option<&PolicySnapshot>,
    seed: u64,
    mut on_step: F,
) -> Result<ParamVector>
where
    F: FnMut(&mut RlStepRecord, &ParamVector) -> Result<()>,
{
    if pool.is_empty() {
        return Err(Error::InputDomain("no RL questions".into()));
    }
    let lambda = match stage.algorithm {
        Algorithm::Grpo => 0.0,
        Algorithm::Mgpo => stage.lambda,
    };
    let mcfg = MgpoConfig::new(lambda, stage.p0)?;
    let mut clip = ClipConfig::new(stage.epsilon)?;
    if let Some(r) = reference {
        clip = clip.with_kl(stage.kl_coef, r.clone())?;
    }

    let w_by_bucket = (0..=stage.group_size)
        .map(|c| entropy_weight(c as f64 / stage.group_size as f64, &mcfg))
        .collect::<Result<Vec<f64>>>()?;
    let mut params = start;
    for step in 1..=stage.steps {
        let step_seed = child_seed(seed, step as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(child_seed(step_seed, 0));
        let questions: Vec<&Problem> = (0..stage.questions_per_step)
            .map(|_| pool[rng.gen_range(0..pool.len())])
            .collect();
        let rollout_seed = child_seed(step_seed, 1);
        let groups: Vec<RolloutGroup> = questions
            .par_iter()
            .enumerate()
            .map(|(j, q)| {
                rollout_group(
                    &params,
                    arch,
                    q,
                    stage.group_size,
                    stage.temperature,
                    stage.max_len,
                    child_seed(rollout_seed, j as u64),
                )
            })
            .collect::<Result<_>>()?;

        let mut hist = vec![0usize; stage.group_size + 1];
        let mut reward_sum = 0.0;
        let mut w_sum = 0.0;
        let mut w_live = 0.0;
        for (j, g) in groups.iter().enumerate() {
            let u = assess(j, g, &mcfg);
            let correct = g.rewards().iter().filter(|&&r| r == 1.0).count();
            hist[correct] += 1;
            reward_sum += g.rewards().iter().sum::<f64>();
            w_sum += u.weight;
            if g.std() > 0.0 {
                w_live += u.weight;
            }
        }
        // weights are frozen for the whole batch, across epochs
        let weighted: Vec<RolloutGroup> = groups.iter().map(|g| modulate_advantages(g, &mcfg)).collect();
        let n_groups = weighted.len() as f64;
        let mean_abs_adv = weighted
            .iter()
            .map(|g| g.advantages().iter().map(|a| a.abs()).sum::<f64>() / g.size() as f64)
            .sum::<f64>()
            / n_groups;

        let old = PolicySnapshot::new(arch.clone(), params.clone(), 0)?;
        let mut first = None;
        for _ in 0..stage.epochs {
            let report = surrogate(&params, &old, &weighted, &clip)?;
            let mut grad = report.grad.clone();
            let grad_norm = match stage.grad_clip {
                Some(c) => clip_grad_norm(&mut grad, c),
                None => grad.norm(),
            };
            // ascent
            params = sgd_step(&params, &grad, -stage.lr)?;
            if first.is_none() {
                first = Some((report.objective, report.clip_fraction, report.kl, grad_norm));
            }
        }
        let (objective, clip_fraction, kl, grad_norm) = first.expect("epochs >= 1");

        let mut rec = RlStepRecord {
            stage: stage_index,
            step,
            global_step: first_global_step + step,
            mean_reward: reward_sum / (n_groups * stage.group_size as f64),
            mean_abs_advantage: mean_abs_adv,
            clip_fraction,
            objective,
            kl,
            grad_norm,
            mean_w_me: w_sum / n_groups,
            effective_weight_fraction: w_live / n_groups,
            pc_histogram: hist,
            w_me_by_bucket: w_by_bucket.clone(),
        };
        on_step(&mut rec, &params)?;
    }
    Ok(params)
}
