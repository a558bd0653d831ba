//! Toy autoregressive softmax policies.
//!
//! Two architectures share one evaluation path: at every generation step the
//! architecture maps `(prompt, generated prefix)` to a small set of active
//! parameter rows, and the step logits are the sum of those rows. A tabular
//! policy activates exactly one row (a hashed context key); a linear policy
//! activates one row per hand-coded indicator feature. Because the logits are
//! linear in the parameters, every gradient here is the closed-form
//! `softmax - onehot` outer product and no autodiff engine is involved.
//!
//! Parameter layout: row `r` occupies `params[r * V .. (r + 1) * V]` where `V`
//! is the vocabulary size.

use std::collections::HashSet;
use std::ops::Deref;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::splitmix64;

pub type TokenId = u32;

// ---------------------------------------------------------------------------
// Vocabulary and sequences
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    eos: TokenId,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    tokens: Vec<String>,
    eos: TokenId,
}

impl TryFrom<VocabularyRepr> for Vocabulary {
    type Error = Error;
    fn try_from(r: VocabularyRepr) -> Result<Self> {
        Vocabulary::new(r.tokens, r.eos)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            tokens: v.tokens,
            eos: v.eos,
        }
    }
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, eos: TokenId) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::InputDomain(format!(
                "vocabulary needs at least 2 tokens, got {}",
                tokens.len()
            )));
        }
        if eos as usize >= tokens.len() {
            return Err(Error::InputDomain(format!(
                "end-of-sequence id {eos} outside vocabulary of size {}",
                tokens.len()
            )));
        }
        let mut seen = HashSet::with_capacity(tokens.len());
        for t in &tokens {
            if !seen.insert(t.as_str()) {
                return Err(Error::InputDomain(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, eos })
    }

    /// A vocabulary of `size` anonymous tokens `t0..`, with the last one as end-of-sequence.
    pub fn anonymous(size: usize) -> Result<Self> {
        let tokens: Vec<String> = (0..size).map(|i| format!("t{i}")).collect();
        let eos = size.saturating_sub(1) as TokenId;
        Vocabulary::new(tokens, eos)
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.tokens
            .iter()
            .position(|t| t == token)
            .map(|i| i as TokenId)
    }

    pub fn check(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|&&id| id as usize >= self.size()) {
            Some(bad) => Err(Error::InputDomain(format!(
                "token id {bad} outside vocabulary of size {}",
                self.size()
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Prompt(Vec<TokenId>);

impl Prompt {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Prompt(tokens)
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }
}

/// A generated or reference response; always non-empty and terminated by the
/// end-of-sequence token, which appears nowhere else.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Response(Vec<TokenId>);

impl Response {
    pub fn new(tokens: Vec<TokenId>, vocab: &Vocabulary) -> Result<Self> {
        vocab.check(&tokens)?;
        match tokens.split_last() {
            None => Err(Error::InputDomain("empty response".into())),
            Some((&last, body)) => {
                if last != vocab.eos() {
                    Err(Error::InputDomain(
                        "response does not end with end-of-sequence".into(),
                    ))
                } else if body.contains(&vocab.eos()) {
                    Err(Error::InputDomain(
                        "end-of-sequence inside response body".into(),
                    ))
                } else {
                    Ok(Response(tokens))
                }
            }
        }
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Parameters and architecture
// ---------------------------------------------------------------------------

/// Flat policy parameters. All entries are finite.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl<'de> Deserialize<'de> for ParamVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let values = Vec::<f64>::deserialize(d)?;
        ParamVector::new(values).map_err(serde::de::Error::custom)
    }
}

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite parameter {} at index {i}",
                values[i]
            )));
        }
        Ok(ParamVector(values))
    }

    pub fn zeros(dim: usize) -> Self {
        ParamVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        ParamVector(values)
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ArchKind {
    /// One logit row per hashed `(position, last context_length tokens)` key.
    TabularSoftmax { rows: usize },
    /// Logits are a sum of rows selected by hashed indicator features.
    LinearSoftmax { feature_dim: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyArchitecture {
    #[serde(flatten)]
    pub kind: ArchKind,
    pub context_length: usize,
    pub vocab: Vocabulary,
}

impl PolicyArchitecture {
    pub fn tabular(vocab: Vocabulary, context_length: usize, rows: usize) -> Result<Self> {
        PolicyArchitecture {
            kind: ArchKind::TabularSoftmax { rows },
            context_length,
            vocab,
        }
        .validated()
    }

    pub fn linear(vocab: Vocabulary, context_length: usize, feature_dim: usize) -> Result<Self> {
        PolicyArchitecture {
            kind: ArchKind::LinearSoftmax { feature_dim },
            context_length,
            vocab,
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self> {
        if self.context_length == 0 {
            return Err(Error::Config("context_length must be >= 1".into()));
        }
        if self.row_count() == 0 {
            return Err(Error::Config("architecture needs at least one row".into()));
        }
        Ok(self)
    }

    fn row_count(&self) -> usize {
        match self.kind {
            ArchKind::TabularSoftmax { rows } => rows,
            ArchKind::LinearSoftmax { feature_dim } => feature_dim,
        }
    }

    pub fn param_count(&self) -> usize {
        self.row_count() * self.vocab.size()
    }

    pub fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                found: params.len(),
            });
        }
        Ok(())
    }

    /// Parameter rows active at the step that follows `prefix`.
    ///
    /// Linear features are indicator conjunctions keyed on the step index:
    /// a bias, the last `context_length` generated tokens, the leading prompt
    /// token (the task marker) alone, and the marker joined with every single
    /// prompt token and every pair of prompt tokens after it. Rows may repeat
    /// when two features hash to the same bucket; repeats count twice.
    pub fn active_rows(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Vec<usize> {
        let t = prefix.len() as u64;
        match self.kind {
            ArchKind::TabularSoftmax { rows } => {
                let mut key = KeyHash::new(1).push(t);
                let ctx_len = prompt.len() + prefix.len();
                for back in (1..=self.context_length).rev() {
                    let tok = if back > ctx_len {
                        PAD
                    } else {
                        let idx = ctx_len - back;
                        if idx < prompt.len() {
                            prompt[idx] as u64
                        } else {
                            prefix[idx - prompt.len()] as u64
                        }
                    };
                    key = key.push(tok);
                }
                vec![key.bucket(rows)]
            }
            ArchKind::LinearSoftmax { feature_dim } => {
                let mut out = Vec::with_capacity(2 + prompt.len() * (prompt.len() + 1) / 2);
                out.push(KeyHash::new(10).push(t).bucket(feature_dim));

                let mut key = KeyHash::new(11).push(t);
                for back in (1..=self.context_length).rev() {
                    let tok = if back > prefix.len() {
                        PAD
                    } else {
                        prefix[prefix.len() - back] as u64
                    };
                    key = key.push(tok);
                }
                out.push(key.bucket(feature_dim));

                if let Some((&marker, rest)) = prompt.split_first() {
                    let base = KeyHash::new(12).push(t).push(marker as u64);
                    out.push(base.bucket(feature_dim));
                    for (i, &a) in rest.iter().enumerate() {
                        out.push(
                            KeyHash::new(13)
                                .push(t)
                                .push(marker as u64)
                                .push(i as u64)
                                .push(a as u64)
                                .bucket(feature_dim),
                        );
                        for (j, &b) in rest.iter().enumerate().skip(i + 1) {
                            out.push(
                                KeyHash::new(14)
                                    .push(t)
                                    .push(marker as u64)
                                    .push(i as u64)
                                    .push(j as u64)
                                    .push(a as u64)
                                    .push(b as u64)
                                    .bucket(feature_dim),
                            );
                        }
                    }
                }
                out
            }
        }
    }
}

const PAD: u64 = u64::MAX;

#[derive(Clone, Copy)]
struct KeyHash(u64);

impl KeyHash {
    fn new(tag: u64) -> Self {
        KeyHash(splitmix64(tag))
    }

    fn push(self, x: u64) -> Self {
        KeyHash(splitmix64(self.0 ^ x.wrapping_mul(0xA076_1D64_78BD_642F)))
    }

    fn bucket(self, n: usize) -> usize {
        (self.0 % n as u64) as usize
    }
}

/// Parameters plus the architecture they belong to and the training step they were taken at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub arch: PolicyArchitecture,
    pub params: ParamVector,
    pub step: u64,
}

impl PolicySnapshot {
    pub fn new(arch: PolicyArchitecture, params: ParamVector, step: u64) -> Result<Self> {
        arch.check_params(&params)?;
        Ok(PolicySnapshot { arch, params, step })
    }
}

/// Per-token log-probabilities of a response; `total` is their sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogProbTrace {
    pub per_token: Vec<f64>,
    pub total: f64,
}

impl LogProbTrace {
    pub fn new(per_token: Vec<f64>) -> Self {
        let total = per_token.iter().sum();
        LogProbTrace { per_token, total }
    }
}

// ---------------------------------------------------------------------------
// Step distributions
// ---------------------------------------------------------------------------

pub(crate) fn step_logits(v: usize, params: &[f64], rows: &[usize]) -> Vec<f64> {
    let mut z = vec![0.0; v];
    for &r in rows {
        let row = &params[r * v..(r + 1) * v];
        for (zi, w) in z.iter_mut().zip(row) {
            *zi += w;
        }
    }
    z
}

pub(crate) fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    z.iter().map(|x| x - lse).collect()
}

/// Log-probabilities of every token at each step of `response`.
pub(crate) fn step_log_probs(
    arch: &PolicyArchitecture,
    params: &[f64],
    prompt: &[TokenId],
    response: &[TokenId],
) -> Vec<(Vec<usize>, Vec<f64>)> {
    let v = arch.vocab.size();
    (0..response.len())
        .map(|t| {
            let rows = arch.active_rows(prompt, &response[..t]);
            let lp = log_softmax(&step_logits(v, params, &rows));
            (rows, lp)
        })
        .collect()
}

/// Adds `scale * g` to every active row of `grad`.
pub(crate) fn accumulate_rows(grad: &mut [f64], v: usize, rows: &[usize], g: &[f64], scale: f64) {
    for &r in rows {
        for (gi, x) in grad[r * v..(r + 1) * v].iter_mut().zip(g) {
            *gi += scale * x;
        }
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Parameters drawn i.i.d. uniform in `[-scale, scale]`, deterministic in `seed`.
pub fn init_params(arch: &PolicyArchitecture, seed: u64, scale: f64) -> Result<ParamVector> {
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::InputDomain(format!(
            "init scale must be finite and >= 0, got {scale}"
        )));
    }
    let n = arch.param_count();
    if scale == 0.0 {
        return Ok(ParamVector::zeros(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..n)
        .map(|_| (2.0 * rng.gen::<f64>() - 1.0) * scale)
        .collect();
    Ok(ParamVector(values))
}

pub fn logprob(
    params: &[f64],
    arch: &PolicyArchitecture,
    prompt: &Prompt,
    response: &Response,
) -> Result<LogProbTrace> {
    arch.check_params(params)?;
    arch.vocab.check(prompt.tokens())?;
    arch.vocab.check(response.tokens())?;
    let per_token = step_log_probs(arch, params, prompt.tokens(), response.tokens())
        .into_iter()
        .zip(response.tokens())
        .map(|((_, lp), &y)| lp[y as usize])
        .collect();
    Ok(LogProbTrace::new(per_token))
}

/// Untempered next-token distribution after `prompt` followed by `prefix`.
pub fn next_token_probs(
    params: &[f64],
    arch: &PolicyArchitecture,
    prompt: &Prompt,
    prefix: &[TokenId],
) -> Result<Vec<f64>> {
    arch.check_params(params)?;
    arch.vocab.check(prompt.tokens())?;
    arch.vocab.check(prefix)?;
    let rows = arch.active_rows(prompt.tokens(), prefix);
    Ok(log_softmax(&step_logits(arch.vocab.size(), params, &rows))
        .into_iter()
        .map(f64::exp)
        .collect())
}

/// Samples a response with a fresh generator seeded from `seed`.
pub fn sample(
    params: &[f64],
    arch: &PolicyArchitecture,
    prompt: &Prompt,
    temperature: f64,
    max_len: usize,
    seed: u64,
) -> Result<(Response, LogProbTrace)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with_rng(params, arch, prompt, temperature, max_len, &mut rng)
}

/// Autoregressive sampling from the temperature-scaled step distributions.
///
/// The returned trace holds untempered model log-probabilities. A generation
/// that reaches `max_len` without emitting end-of-sequence gets it forced as
/// its final token, and that token's log-probability is recorded.
pub fn sample_with_rng<R: Rng + ?Sized>(
    params: &[f64],
    arch: &PolicyArchitecture,
    prompt: &Prompt,
    temperature: f64,
    max_len: usize,
    rng: &mut R,
) -> Result<(Response, LogProbTrace)> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::InputDomain(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    if max_len == 0 {
        return Err(Error::InputDomain("max_len must be >= 1".into()));
    }
    arch.check_params(params)?;
    arch.vocab.check(prompt.tokens())?;

    let v = arch.vocab.size();
    let eos = arch.vocab.eos();
    let mut tokens = Vec::with_capacity(max_len);
    let mut per_token = Vec::with_capacity(max_len);
    loop {
        let rows = arch.active_rows(prompt.tokens(), &tokens);
        let z = step_logits(v, params, &rows);
        let lp = log_softmax(&z);
        let next = if tokens.len() + 1 == max_len {
            eos
        } else {
            draw_tempered(&z, temperature, rng)
        };
        tokens.push(next);
        per_token.push(lp[next as usize]);
        if next == eos {
            break;
        }
    }
    Ok((Response(tokens), LogProbTrace::new(per_token)))
}

fn draw_tempered<R: Rng + ?Sized>(z: &[f64], temperature: f64, rng: &mut R) -> TokenId {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = z.iter().map(|x| ((x - m) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut last_positive = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            if u < *w {
                return i as TokenId;
            }
            u -= w;
            last_positive = i;
        }
    }
    last_positive as TokenId
}

/// Mean negative log-likelihood of the batch and its exact gradient.
pub fn sft_loss_and_grad(
    params: &[f64],
    arch: &PolicyArchitecture,
    batch: &[(Prompt, Response)],
) -> Result<(f64, ParamVector)> {
    if batch.is_empty() {
        return Err(Error::InputDomain("empty SFT batch".into()));
    }
    arch.check_params(params)?;
    let v = arch.vocab.size();
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    for (prompt, response) in batch {
        arch.vocab.check(prompt.tokens())?;
        arch.vocab.check(response.tokens())?;
        let steps = step_log_probs(arch, params, prompt.tokens(), response.tokens());
        for ((rows, lp), &y) in steps.iter().zip(response.tokens()) {
            loss -= lp[y as usize];
            let mut g: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
            g[y as usize] -= 1.0;
            accumulate_rows(&mut grad, v, rows, &g, scale);
        }
    }
    Ok((loss * scale, ParamVector(grad)))
}

/// `params - lr * grad`.
pub fn sgd_step(params: &ParamVector, grad: &ParamVector, lr: f64) -> Result<ParamVector> {
    if params.dim() != grad.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            found: grad.dim(),
        });
    }
    if !lr.is_finite() {
        return Err(Error::InputDomain(format!("learning rate {lr} is not finite")));
    }
    let values = params.iter().zip(grad.iter()).map(|(p, g)| p - lr * g).collect();
    ParamVector::new(values)
}

/// Rescales `grad` so its Euclidean norm is at most `max_norm`. Returns the pre-clip norm.
pub fn clip_grad_norm(grad: &mut ParamVector, max_norm: f64) -> f64 {
    let norm = grad.norm();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grad.0.iter_mut().for_each(|g| *g *= s);
    }
    norm
}
