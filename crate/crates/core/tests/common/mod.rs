#![allow(dead_code)]

use posttrain_core::grpo::{Rollout, RolloutGroup};
use posttrain_core::harness::ExperimentConfig;
use posttrain_core::policy::{
    logprob, sample, PolicyArchitecture, Prompt, Response, TokenId, Vocabulary,
};
use posttrain_core::tasks::Problem;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let x0 = p[i];
            p[i] = x0 + h;
            let up = f(&p);
            p[i] = x0 - h;
            let down = f(&p);
            p[i] = x0;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`, or the absolute gap when both are ~0.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

pub fn tabular(vocab: usize, ctx: usize, rows: usize) -> PolicyArchitecture {
    PolicyArchitecture::tabular(Vocabulary::anonymous(vocab).unwrap(), ctx, rows).unwrap()
}

pub fn linear(vocab: usize, ctx: usize, dim: usize) -> PolicyArchitecture {
    PolicyArchitecture::linear(Vocabulary::anonymous(vocab).unwrap(), ctx, dim).unwrap()
}

pub fn random_params(n: usize, scale: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| (2.0 * rng.gen::<f64>() - 1.0) * scale).collect()
}

pub fn random_prompt(arch: &PolicyArchitecture, len: usize, rng: &mut impl Rng) -> Prompt {
    let body = arch.vocab.size() as TokenId - 1;
    Prompt::new((0..len).map(|_| rng.gen_range(0..body)).collect())
}

pub fn random_response(arch: &PolicyArchitecture, max_body: usize, rng: &mut impl Rng) -> Response {
    let eos = arch.vocab.eos();
    let len = rng.gen_range(0..=max_body);
    let mut t: Vec<TokenId> = (0..len)
        .map(|_| loop {
            let x = rng.gen_range(0..arch.vocab.size() as TokenId);
            if x != eos {
                break x;
            }
        })
        .collect();
    t.push(eos);
    Response::new(t, &arch.vocab).unwrap()
}

/// Groups sampled from `old` with random binary rewards (at least one mixed group).
pub fn random_groups(
    arch: &PolicyArchitecture,
    old: &[f64],
    n_groups: usize,
    g: usize,
    seed: u64,
) -> Vec<RolloutGroup> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_groups)
        .map(|gi| {
            let prompt = random_prompt(arch, 3, &mut rng);
            let answer = random_response(arch, 2, &mut rng);
            let q = Problem {
                prompt: prompt.clone(),
                answer,
                subdomain: 0,
            };
            let rollouts: Vec<Rollout> = (0..g)
                .map(|i| {
                    let (response, old_trace) =
                        sample(old, arch, &prompt, 1.0, 4, seed ^ ((gi * 131 + i) as u64)).unwrap();
                    Rollout { response, old_trace }
                })
                .collect();
            let mut rewards: Vec<f64> = (0..g).map(|_| f64::from(rng.gen_bool(0.5) as u8)).collect();
            if gi == 0 {
                rewards[0] = 1.0;
                rewards[1] = 0.0;
            }
            RolloutGroup::from_parts(q, rollouts, rewards).unwrap()
        })
        .collect()
}

/// Minimum distance of any token ratio to a clip boundary.
pub fn clip_margin(arch: &PolicyArchitecture, p: &[f64], groups: &[RolloutGroup], eps: f64) -> f64 {
    let mut m = f64::INFINITY;
    for g in groups {
        for r in g.rollouts() {
            let now = trace_under(arch, p, &g.question().prompt, &r.response);
            for (a, b) in now.iter().zip(&r.old_trace.per_token) {
                let ratio = (a - b).exp();
                m = m.min((ratio - 1.0 - eps).abs()).min((ratio - 1.0 + eps).abs());
            }
        }
    }
    m
}

/// Recomputes a rollout's log-prob trace under `params`.
pub fn trace_under(arch: &PolicyArchitecture, params: &[f64], prompt: &Prompt, r: &Response) -> Vec<f64> {
    logprob(params, arch, prompt, r).unwrap().per_token
}

/// A small pipeline config that runs in a few seconds.
pub fn tiny_config() -> ExperimentConfig {
    ExperimentConfig::from_toml_str(
        r#"
seed = 11

[universe]
train_size = 300
probe_size = 40
holdout_size = 40

[policy]
feature_dim = 2048

[sft]
warmup_steps = 20
steps = 200
checkpoint_every = 50

[probe]
n = 8
k = 4

[eval]
n = 8
k = 4

[rl]
eval_every = 10

[[rl.stages]]
steps = 20
questions_per_step = 16
max_len = 3

[[rl.stages]]
steps = 10
questions_per_step = 16
max_len = 6
"#,
    )
    .unwrap()
}

pub struct DecontamFixture {
    pub eval: Vec<String>,
    pub train: Vec<String>,
    /// Indices into `train` of the records that share a 10-token run with `eval`.
    pub planted: Vec<usize>,
}

fn words(vocab: &str, n: usize, rng: &mut impl Rng) -> Vec<String> {
    (0..n).map(|_| format!("{vocab}{}", rng.gen_range(0..5000))).collect()
}

/// Punctuation and case noise that normalization must see through.
fn noisy(tokens: &[String], rng: &mut impl Rng) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push_str([" ", ", ", " - ", "; ", "  "][rng.gen_range(0..5)]);
        }
        if rng.gen_bool(0.3) {
            out.push_str(&t.to_uppercase());
        } else {
            out.push_str(t);
        }
    }
    out
}

/// 1000 clean records (a third of them carry a 9-token eval run) plus 50
/// records carrying a 10..=16 token eval run, shuffled together.
pub fn decontam_fixture(seed: u64) -> DecontamFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval: Vec<Vec<String>> = (0..40).map(|_| words("e", 60, &mut rng)).collect();
    let mut records: Vec<(String, bool)> = Vec::new();
    for i in 0..1050 {
        let planted = i >= 1000;
        let mut body = words("t", rng.gen_range(40..120), &mut rng);
        let run = if planted {
            Some(rng.gen_range(10..=16))
        } else if i % 3 == 0 {
            Some(9)
        } else {
            None
        };
        if let Some(len) = run {
            let src = &eval[rng.gen_range(0..eval.len())];
            let start = rng.gen_range(0..=src.len() - len);
            let at = rng.gen_range(0..=body.len());
            body.splice(at..at, src[start..start + len].iter().cloned());
        }
        records.push((noisy(&body, &mut rng), planted));
    }
    // Fisher-Yates with the fixture rng
    for i in (1..records.len()).rev() {
        let j = rng.gen_range(0..=i);
        records.swap(i, j);
    }
    DecontamFixture {
        eval: eval.iter().map(|e| noisy(e, &mut rng)).collect(),
        planted: records.iter().enumerate().filter(|(_, r)| r.1).map(|(i, _)| i).collect(),
        train: records.into_iter().map(|r| r.0).collect(),
    }
}
