//! Decoding from an adaptation set.
//!
//! Each step takes the model's softmax, applies temperature, then top-k,
//! then top-p, renormalizes and draws. Temperature 0 is plain argmax with
//! ties to the lowest token id. The recorded step distribution is always the
//! untempered, untruncated softmax.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::AdaptationSet;
use crate::corpus::{TokenId, Vocab};
use crate::error::{Error, Result};
use crate::model::{BaseModel, InferenceModel, LowRankAdaptation};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub top_p: Option<f64>,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            temperature: 0.0,
            top_k: None,
            top_p: None,
            max_len: 8,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.top_k == Some(0) {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if let Some(p) = self.top_p {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Config(format!("top_p must lie in (0, 1], got {p}")));
            }
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    /// Full predictive distribution before each emitted token.
    pub step_dists: Vec<Vec<f64>>,
    pub adaptation_index: usize,
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate().skip(1) {
        if x > p[best] {
            best = i;
        }
    }
    best
}

/// The distribution actually sampled from at temperature `> 0`.
pub fn sampling_distribution(probs: &[f64], config: &SamplerConfig) -> Vec<f64> {
    let t = config.temperature;
    // softmax(log p / t), shifted by the max for stability
    let logs: Vec<f64> = probs
        .iter()
        .map(|&p| {
            if p > 0.0 {
                p.ln() / t
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut q: Vec<f64> = logs.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = q.iter().sum();
    q.iter_mut().for_each(|x| *x /= s);

    let mut order: Vec<usize> = (0..q.len()).collect();
    order.sort_by(|&a, &b| q[b].total_cmp(&q[a]).then(a.cmp(&b)));
    let mut keep = order.len();
    if let Some(k) = config.top_k {
        keep = keep.min(k);
    }
    if let Some(top_p) = config.top_p {
        let mut mass = 0.0;
        for (n, &i) in order.iter().take(keep).enumerate() {
            mass += q[i];
            if mass >= top_p {
                keep = n + 1;
                break;
            }
        }
    }
    for &i in &order[keep..] {
        q[i] = 0.0;
    }
    let s: f64 = q.iter().sum();
    q.iter_mut().for_each(|x| *x /= s);
    q
}

fn draw(q: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &x) in q.iter().enumerate() {
        if x > 0.0 {
            acc += x;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

fn decode(
    model: &InferenceModel,
    prompt: &[TokenId],
    eos: Option<TokenId>,
    config: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<TokenId>, Vec<Vec<f64>>) {
    let mut ctx = prompt.to_vec();
    let mut tokens = Vec::new();
    let mut dists = Vec::new();
    while tokens.len() < config.max_len {
        let p = model.next_distribution(&ctx);
        let next = if config.temperature == 0.0 {
            argmax(&p)
        } else {
            draw(&sampling_distribution(&p, config), rng)
        };
        dists.push(p);
        tokens.push(next);
        ctx.push(next);
        if Some(next) == eos {
            break;
        }
    }
    (tokens, dists)
}

fn check_prompt(base: &BaseModel, prompt: &[TokenId]) -> Result<()> {
    match prompt.iter().find(|&&t| t >= base.vocab_size()) {
        Some(t) => Err(Error::Input(format!(
            "prompt token {t} out of range for vocabulary {}",
            base.vocab_size()
        ))),
        None => Ok(()),
    }
}

/// One generation. Stops after emitting `eos` or at `max_len` tokens.
pub fn generate(
    base: &BaseModel,
    adaptation: Option<&LowRankAdaptation>,
    prompt: &[TokenId],
    eos: Option<TokenId>,
    config: &SamplerConfig,
) -> Result<Generation> {
    config.validate()?;
    check_prompt(base, prompt)?;
    let model = InferenceModel::new(base, adaptation)?;
    let mut rng = seed::stream(config.seed, &[0]);
    let (tokens, step_dists) = decode(&model, prompt, eos, config, &mut rng);
    Ok(Generation {
        tokens,
        step_dists,
        adaptation_index: 0,
    })
}

/// `n` generations, each from an adaptation drawn uniformly at random.
/// Draw `i` uses its own stream, so draws are independent of each other and
/// of scheduling.
pub fn sample_diverse(
    set: &AdaptationSet,
    prompt: &[TokenId],
    n: usize,
    eos: Option<TokenId>,
    config: &SamplerConfig,
) -> Result<Vec<Generation>> {
    config.validate()?;
    check_prompt(set.base(), prompt)?;
    if n == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let models = set
        .adaptations()
        .iter()
        .map(|a| InferenceModel::new(set.base(), Some(a)))
        .collect::<Result<Vec<_>>>()?;
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::stream(config.seed, &[1, i as u64]);
            let k = rng.random_range(0..set.k());
            let (tokens, step_dists) = decode(&models[k], prompt, eos, config, &mut rng);
            Generation {
                tokens,
                step_dists,
                adaptation_index: k,
            }
        })
        .collect())
}

/// Exactly one generation per adaptation, in index order.
pub fn round_robin_sample(
    set: &AdaptationSet,
    prompt: &[TokenId],
    eos: Option<TokenId>,
    config: &SamplerConfig,
) -> Result<Vec<Generation>> {
    config.validate()?;
    check_prompt(set.base(), prompt)?;
    set.adaptations()
        .par_iter()
        .enumerate()
        .map(|(k, a)| {
            let model = InferenceModel::new(set.base(), Some(a))?;
            let mut rng = seed::stream(config.seed, &[2, k as u64]);
            let (tokens, step_dists) = decode(&model, prompt, eos, config, &mut rng);
            Ok(Generation {
                tokens,
                step_dists,
                adaptation_index: k,
            })
        })
        .collect()
}

/// Generations for one prompt, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptGenerations {
    pub prompt_id: usize,
    pub generations: Vec<Generation>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    prompt_id: usize,
    adaptation: usize,
    tokens: Vec<String>,
}

/// One JSON line per generation. With `sidecar`, the step distributions go
/// to that file as little-endian f64 (count u32, vocab u32, then values per
/// generation, in line order).
pub fn write_generations(
    path: &Path,
    sets: &[PromptGenerations],
    vocab: &Vocab,
    sidecar: Option<&Path>,
) -> Result<()> {
    let mut text = String::new();
    let mut bin = Vec::new();
    for pg in sets {
        for g in &pg.generations {
            let rec = Record {
                prompt_id: pg.prompt_id,
                adaptation: g.adaptation_index,
                tokens: g
                    .tokens
                    .iter()
                    .map(|&t| vocab.token(t).to_string())
                    .collect(),
            };
            text.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            text.push('\n');
            bin.extend_from_slice(&(g.step_dists.len() as u32).to_le_bytes());
            bin.extend_from_slice(&(vocab.len() as u32).to_le_bytes());
            for d in &g.step_dists {
                for x in d {
                    bin.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    if let Some(side) = sidecar {
        fs::write(side, bin).map_err(|e| Error::io(side, e))?;
    }
    Ok(())
}

/// Reads a generations file. Step distributions are restored only when a
/// sidecar is given; otherwise they are empty.
pub fn read_generations(
    path: &Path,
    vocab: &Vocab,
    sidecar: Option<&Path>,
) -> Result<Vec<PromptGenerations>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bin = match sidecar {
        Some(side) => Some(fs::read(side).map_err(|e| Error::io(side, e))?),
        None => None,
    };
    let mut pos = 0usize;
    let mut out: Vec<PromptGenerations> = Vec::new();
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let tokens = rec
            .tokens
            .iter()
            .map(|t| {
                vocab.id(t).ok_or_else(|| Error::UnknownToken {
                    token: t.clone(),
                    line: i + 1,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let step_dists = match &bin {
            None => Vec::new(),
            Some(b) => {
                let truncated = || Error::Parse {
                    line: i + 1,
                    message: "distribution sidecar is truncated".into(),
                };
                let mut take = |n: usize| -> Result<&[u8]> {
                    let s = b.get(pos..pos + n).ok_or_else(truncated)?;
                    pos += n;
                    Ok(s)
                };
                let steps = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
                let v = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
                let raw = take(steps * v * 8)?;
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect::<Vec<_>>()
                    .chunks(v.max(1))
                    .map(<[f64]>::to_vec)
                    .collect()
            }
        };
        let g = Generation {
            tokens,
            step_dists,
            adaptation_index: rec.adaptation,
        };
        match out.last_mut() {
            Some(pg) if pg.prompt_id == rec.prompt_id => pg.generations.push(g),
            _ => out.push(PromptGenerations {
                prompt_id: rec.prompt_id,
                generations: vec![g],
            }),
        }
    }
    Ok(out)
}
