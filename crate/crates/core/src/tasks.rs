//! Synthetic verifiable task universe.
//!
//! Every subdomain is a column-wise digit operation: a prompt is
//! `[marker, a_0 .. a_{w-1}, b_0 .. b_{w-1}]` and the ground-truth answer is
//! `[op(a_0, b_0) mod m, .., op(a_{w-1}, b_{w-1}) mod m, <eos>]`. Answer digit `j`
//! depends only on column `j`, so a policy that learns the per-column rule
//! generalizes to operand pairs it never saw as whole prompts.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Prompt, Response, TokenId, Vocabulary};
use crate::seed::child_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Operation {
    Add,
    Sub,
    Mul,
    /// Parity of the column sum; the modulus is always 2.
    Parity,
}

impl Operation {
    pub fn apply(self, a: u32, b: u32, modulus: u32) -> u32 {
        let (a, b, m) = (a as i64, b as i64, modulus as i64);
        let v = match self {
            Operation::Add => a + b,
            Operation::Sub => a - b,
            Operation::Mul => a * b,
            Operation::Parity => return ((a + b) % 2) as u32,
        };
        v.rem_euclid(m) as u32
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubdomainSpec {
    pub name: String,
    pub op: Operation,
    /// Defaults to the digit base.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modulus: Option<u32>,
}

impl SubdomainSpec {
    pub fn new(name: &str, op: Operation) -> Self {
        SubdomainSpec {
            name: name.to_string(),
            op,
            modulus: None,
        }
    }

    fn modulus(&self, base: u32) -> u32 {
        match self.op {
            Operation::Parity => 2,
            _ => self.modulus.unwrap_or(base),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UniverseConfig {
    /// Digit radix; operand digits are drawn from `0..base`.
    pub base: u32,
    /// Number of operand columns, which is also the answer width.
    pub width: usize,
    pub subdomains: Vec<SubdomainSpec>,
    pub train_size: usize,
    pub probe_size: usize,
    pub holdout_size: usize,
}

impl Default for UniverseConfig {
    fn default() -> Self {
        UniverseConfig {
            base: 10,
            width: 2,
            subdomains: vec![
                SubdomainSpec::new("add", Operation::Add),
                SubdomainSpec::new("sub", Operation::Sub),
                SubdomainSpec::new("mul", Operation::Mul),
                SubdomainSpec::new("parity", Operation::Parity),
            ],
            train_size: 3000,
            probe_size: 200,
            holdout_size: 200,
        }
    }
}

impl UniverseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subdomains.is_empty() {
            return Err(Error::Config("universe needs at least one subdomain".into()));
        }
        if self.base < 2 {
            return Err(Error::Config(format!("digit base {} < 2", self.base)));
        }
        if self.width == 0 {
            return Err(Error::Config("answer width must be >= 1".into()));
        }
        for (what, n) in [
            ("train", self.train_size),
            ("probe", self.probe_size),
            ("holdout", self.holdout_size),
        ] {
            if n == 0 {
                return Err(Error::Config(format!("{what} split size is 0")));
            }
        }
        let mut names = HashSet::new();
        for s in &self.subdomains {
            if !names.insert(s.name.as_str()) {
                return Err(Error::Config(format!("duplicate subdomain {:?}", s.name)));
            }
            let m = s.modulus(self.base);
            if m < 2 || m > self.base {
                return Err(Error::Config(format!(
                    "subdomain {:?}: modulus {m} outside 2..={}",
                    s.name, self.base
                )));
            }
        }
        let space = self.prompt_space();
        let needed = self.train_size + self.probe_size + self.holdout_size;
        if space.is_some_and(|s| s < needed as u128) {
            return Err(Error::Config(format!(
                "subdomain prompt space {} smaller than requested {needed} problems",
                space.unwrap_or(0)
            )));
        }
        Ok(())
    }

    /// Distinct operand pairs per subdomain, `None` if it overflows.
    fn prompt_space(&self) -> Option<u128> {
        (self.base as u128).checked_pow(2 * self.width as u32)
    }

    /// Digits, one marker per subdomain, then end-of-sequence.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let mut tokens: Vec<String> = (0..self.base).map(|d| d.to_string()).collect();
        tokens.extend(self.subdomains.iter().map(|s| format!("<{}>", s.name)));
        tokens.push("<eos>".into());
        let eos = (tokens.len() - 1) as TokenId;
        Vocabulary::new(tokens, eos)
    }

    /// Response length of every ground-truth answer (digits plus end-of-sequence).
    pub fn answer_len(&self) -> usize {
        self.width + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Probe,
    Holdout,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Probe, Split::Holdout];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Probe => "probe",
            Split::Holdout => "holdout",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "probe" => Ok(Split::Probe),
            "holdout" => Ok(Split::Holdout),
            other => Err(Error::InputDomain(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub prompt: Prompt,
    pub answer: Response,
    pub subdomain: usize,
}

/// Problems of one subdomain in one split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbingSet {
    pub subdomain: usize,
    pub split: Split,
    pub problems: Vec<Problem>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Universe {
    pub config: UniverseConfig,
    pub vocab: Vocabulary,
    /// Subdomain-major, then train/probe/holdout.
    pub sets: Vec<ProbingSet>,
}

#[derive(Serialize, Deserialize)]
struct ProblemRecord {
    subdomain: usize,
    split: Split,
    prompt: Vec<TokenId>,
    answer: Vec<TokenId>,
}

impl Universe {
    pub fn set(&self, subdomain: usize, split: Split) -> Option<&ProbingSet> {
        self.sets
            .iter()
            .find(|s| s.subdomain == subdomain && s.split == split)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ProbingSet> {
        self.sets.iter().filter(move |s| s.split == split)
    }

    /// The per-subdomain probing sets used for checkpoint probing.
    pub fn probing_sets(&self) -> Vec<&ProbingSet> {
        self.split(Split::Probe).collect()
    }

    pub fn subdomain_count(&self) -> usize {
        self.config.subdomains.len()
    }

    pub fn subdomain_name(&self, id: usize) -> &str {
        &self.config.subdomains[id].name
    }

    /// One JSON record per line, in the universe's stable set order.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for set in &self.sets {
            for p in &set.problems {
                let rec = ProblemRecord {
                    subdomain: p.subdomain,
                    split: set.split,
                    prompt: p.prompt.tokens().to_vec(),
                    answer: p.answer.tokens().to_vec(),
                };
                serde_json::to_writer(&mut w, &rec).map_err(|e| Error::json(path, e))?;
                w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path, config: &UniverseConfig) -> Result<Universe> {
        config.validate()?;
        let vocab = config.vocabulary()?;
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut sets: Vec<ProbingSet> = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ProblemRecord = serde_json::from_str(&line).map_err(|e| Error::json(path, e))?;
            vocab.check(&rec.prompt)?;
            let problem = Problem {
                prompt: Prompt::new(rec.prompt),
                answer: Response::new(rec.answer, &vocab)?,
                subdomain: rec.subdomain,
            };
            match sets.last_mut() {
                Some(s) if s.subdomain == rec.subdomain && s.split == rec.split => {
                    s.problems.push(problem)
                }
                _ => sets.push(ProbingSet {
                    subdomain: rec.subdomain,
                    split: rec.split,
                    problems: vec![problem],
                }),
            }
        }
        Ok(Universe {
            config: config.clone(),
            vocab,
            sets,
        })
    }
}

/// Builds the universe deterministically from `seed`.
///
/// Each subdomain draws `train + probe + holdout` distinct operand pairs
/// without replacement, so the three splits never share a prompt.
pub fn generate_universe(config: &UniverseConfig, seed: u64) -> Result<Universe> {
    config.validate()?;
    let vocab = config.vocabulary()?;
    let base = config.base;
    let width = config.width;
    let space = config
        .prompt_space()
        .filter(|s| *s <= usize::MAX as u128)
        .ok_or_else(|| Error::Config("prompt space too large to enumerate".into()))?
        as usize;
    let total = config.train_size + config.probe_size + config.holdout_size;

    let mut sets = Vec::with_capacity(config.subdomains.len() * 3);
    for (sid, spec) in config.subdomains.iter().enumerate() {
        let marker = base + sid as u32;
        let modulus = spec.modulus(base);
        let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, sid as u64));
        let picks = index::sample(&mut rng, space, total).into_vec();

        let make = |code: usize| -> Result<Problem> {
            // code enumerates the 2*width operand digits, most significant first
            let mut digits = vec![0u32; 2 * width];
            let mut c = code;
            for d in digits.iter_mut().rev() {
                *d = (c % base as usize) as u32;
                c /= base as usize;
            }
            let (a, b) = digits.split_at(width);
            let mut prompt = Vec::with_capacity(1 + 2 * width);
            prompt.push(marker);
            prompt.extend_from_slice(&digits);
            let mut answer: Vec<TokenId> = a
                .iter()
                .zip(b)
                .map(|(&x, &y)| spec.op.apply(x, y, modulus))
                .collect();
            answer.push(vocab.eos());
            Ok(Problem {
                prompt: Prompt::new(prompt),
                answer: Response::new(answer, &vocab)?,
                subdomain: sid,
            })
        };

        let mut offset = 0;
        for (split, n) in [
            (Split::Train, config.train_size),
            (Split::Probe, config.probe_size),
            (Split::Holdout, config.holdout_size),
        ] {
            let problems = picks[offset..offset + n]
                .iter()
                .map(|&c| make(c))
                .collect::<Result<Vec<_>>>()?;
            offset += n;
            sets.push(ProbingSet {
                subdomain: sid,
                split,
                problems,
            });
        }
    }
    Ok(Universe {
        config: config.clone(),
        vocab,
        sets,
    })
}

/// Binary exact-match reward: 1.0 iff the response equals the ground-truth answer.
pub fn verify(problem: &Problem, response: &Response) -> f64 {
    if response.tokens() == problem.answer.tokens() {
        1.0
    } else {
        0.0
    }
}
