//! Diversity metrics and the evaluation report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::AdaptationSet;
use crate::corpus::{Example, TokenId, Vocab};
use crate::error::{Error, Result};
use crate::model::InferenceModel;
use crate::partition::PartitionStats;
use crate::sample::{round_robin_sample, sample_diverse, PromptGenerations, SamplerConfig};

/// Probabilities are clamped to this before taking logs.
pub const KL_CLAMP: f64 = 1e-12;

pub const REPORT_HEADER: &str = "spa-report v1";

/// `D_KL(p ‖ q)` with both sides clamped at [`KL_CLAMP`] inside the log.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.max(KL_CLAMP).ln() - qi.max(KL_CLAMP).ln()))
        .sum::<f64>()
        .max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlReport {
    pub avg: f64,
    /// `(i, j, value)` for every `i < j`.
    pub pairs: Vec<(usize, usize, f64)>,
}

/// Average over pairs `i < j` of `D_KL(P_i ‖ P_j)`, where `P_k` are
/// adaptation `k`'s next-token distributions teacher-forced along each
/// prompt's reference output. Each pair value is a mean over the first
/// `positions` reference positions (all when `None`) and then over prompts.
/// Returns `None` for fewer than two adaptations.
pub fn avg_kl(
    set: &AdaptationSet,
    prompts: &[Example],
    positions: Option<usize>,
    symmetric: bool,
) -> Result<Option<KlReport>> {
    if set.k() < 2 {
        return Ok(None);
    }
    if prompts.is_empty() {
        return Err(Error::Input(
            "KL needs at least one evaluation prompt".into(),
        ));
    }
    for p in prompts {
        crate::model::loss(set.base(), None, p)
            .map_err(|e| e.context(format!("prompt {}", p.id)))?;
    }
    let models = set
        .adaptations()
        .iter()
        .map(|a| InferenceModel::new(set.base(), Some(a)))
        .collect::<Result<Vec<_>>>()?;
    // dists[k][prompt][position]
    let dists: Vec<Vec<Vec<Vec<f64>>>> = models
        .par_iter()
        .map(|m| {
            prompts
                .iter()
                .map(|p| {
                    let upto = positions.map_or(p.output.len(), |n| n.min(p.output.len()));
                    m.teacher_forced(&p.input, &p.output[..upto])
                })
                .collect()
        })
        .collect();
    let k = set.k();
    let pair_list: Vec<(usize, usize)> = (0..k)
        .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
        .collect();
    let pairs: Vec<(usize, usize, f64)> = pair_list
        .par_iter()
        .map(|&(i, j)| {
            let per_prompt: Vec<f64> = (0..prompts.len())
                .map(|n| {
                    let (a, b) = (&dists[i][n], &dists[j][n]);
                    let d: f64 = a
                        .iter()
                        .zip(b)
                        .map(|(p, q)| {
                            let forward = kl_divergence(p, q);
                            if symmetric {
                                0.5 * (forward + kl_divergence(q, p))
                            } else {
                                forward
                            }
                        })
                        .sum();
                    d / a.len().max(1) as f64
                })
                .collect();
            (i, j, per_prompt.iter().sum::<f64>() / prompts.len() as f64)
        })
        .collect();
    let avg = pairs.iter().map(|p| p.2).sum::<f64>() / pairs.len() as f64;
    Ok(Some(KlReport { avg, pairs }))
}

/// Whitespace-normalized text of a token sequence.
pub fn normalized_text(tokens: &[TokenId], vocab: &Vocab) -> String {
    let tokens: Vec<&str> = tokens.iter().map(|&t| vocab.token(t)).collect();
    let joined = match vocab.splitting() {
        crate::corpus::Splitting::Chars => tokens.concat(),
        crate::corpus::Splitting::Whitespace => tokens.join(" "),
    };
    joined.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// `1 − duplicate_pairs / C(n, 2)` over the samples, compared after
/// whitespace normalization.
pub fn sample_diversity(samples: &[String]) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Input(format!(
            "sample diversity needs at least 2 samples, got {n}"
        )));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for s in samples {
        *counts
            .entry(s.split_whitespace().collect::<Vec<_>>().join(" "))
            .or_insert(0) += 1;
    }
    let dup: usize = counts.values().map(|&c| c * (c - 1) / 2).sum();
    Ok(1.0 - dup as f64 / (n * (n - 1) / 2) as f64)
}

/// Unbiased pass@k `1 − C(n−c, k) / C(n, k)` in product form.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if c > n || k == 0 || k > n {
        return Err(Error::Input(format!(
            "pass@k needs 0 <= c <= n and 1 <= k <= n, got n={n} c={c} k={k}"
        )));
    }
    if n - c < k {
        return Ok(1.0);
    }
    let miss: f64 = ((n - c + 1)..=n)
        .map(|i| 1.0 - k as f64 / i as f64)
        .product();
    Ok(1.0 - miss)
}

/// Decides whether a generation for a prompt is correct.
pub trait CorrectnessOracle: Sync {
    fn passes(&self, prompt_id: usize, tokens: &[TokenId]) -> bool;
}

/// Correct when the generation equals the reference, ignoring a trailing
/// end-of-sequence token on either side.
pub struct ExactMatch {
    pub references: BTreeMap<usize, Vec<TokenId>>,
    pub eos: Option<TokenId>,
}

impl CorrectnessOracle for ExactMatch {
    fn passes(&self, prompt_id: usize, tokens: &[TokenId]) -> bool {
        let strip = |s: &[TokenId]| -> Vec<TokenId> {
            match (s.last(), self.eos) {
                (Some(&l), Some(e)) if l == e => s[..s.len() - 1].to_vec(),
                _ => s.to_vec(),
            }
        };
        self.references
            .get(&prompt_id)
            .is_some_and(|r| strip(r) == strip(tokens))
    }
}

/// Correct when at least `min_fraction` of the generated tokens fall in the
/// prompt's allowed token range (a planted topic's preferred tokens).
pub struct TokenSet {
    pub allowed: BTreeMap<usize, Range<TokenId>>,
    pub min_fraction: f64,
}

impl CorrectnessOracle for TokenSet {
    fn passes(&self, prompt_id: usize, tokens: &[TokenId]) -> bool {
        let Some(r) = self.allowed.get(&prompt_id) else {
            return false;
        };
        if tokens.is_empty() {
            return false;
        }
        let hits = tokens.iter().filter(|t| r.contains(t)).count();
        hits as f64 >= self.min_fraction * tokens.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub sampler: SamplerConfig,
    /// Generations per prompt for a single adaptation. Sets with `K > 1`
    /// use one generation per adaptation unless `sample_diverse` is on.
    pub samples_per_prompt: usize,
    /// Draw adaptations at random per sample instead of one per adaptation.
    pub sample_diverse: bool,
    /// Reference positions used by the KL metric; all when absent.
    pub kl_positions: Option<usize>,
    pub symmetric_kl: bool,
    pub pass_ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            sampler: SamplerConfig::default(),
            samples_per_prompt: 8,
            sample_diverse: false,
            kl_positions: None,
            symmetric_kl: false,
            pass_ks: vec![1],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiversityReport {
    pub method: String,
    pub k: usize,
    pub temperature: f64,
    pub n_prompts: usize,
    pub samples_per_prompt: usize,
    pub avg_kl: Option<f64>,
    pub sample_diversity: f64,
    /// Fraction of generations identical to their adaptation's greedy output.
    pub greedy_match_rate: f64,
    pub pass_at: BTreeMap<usize, f64>,
    pub kl_pairs: Vec<(usize, usize, f64)>,
    /// `(prompt id, diversity)` in prompt order.
    pub prompt_diversity: Vec<(usize, f64)>,
    pub partition: Option<PartitionStats>,
    pub config_digest: String,
}

/// Generations for every prompt: one per adaptation for `K > 1`, otherwise
/// `samples_per_prompt` draws. Prompt `n` gets its own sampler seed derived
/// from `(seed, n)`.
pub fn generate_for_prompts(
    set: &AdaptationSet,
    prompts: &[Example],
    eos: Option<TokenId>,
    config: &EvalConfig,
) -> Result<Vec<PromptGenerations>> {
    prompts
        .iter()
        .enumerate()
        .map(|(n, p)| {
            let sampler = SamplerConfig {
                seed: crate::seed::derive(config.sampler.seed, &[n as u64]),
                ..config.sampler.clone()
            };
            let generations = if set.k() > 1 && !config.sample_diverse {
                round_robin_sample(set, &p.input, eos, &sampler)?
            } else {
                let count = if set.k() > 1 {
                    set.k()
                } else {
                    config.samples_per_prompt
                };
                sample_diverse(set, &p.input, count, eos, &sampler)?
            };
            Ok(PromptGenerations {
                prompt_id: p.id,
                generations,
            })
        })
        .collect()
}

/// Report over existing generations. `prompts` supplies the references for
/// the KL metric and must cover every prompt id in `generations`.
pub fn evaluate_generations(
    set: &AdaptationSet,
    prompts: &[Example],
    generations: &[PromptGenerations],
    vocab: &Vocab,
    oracle: Option<&dyn CorrectnessOracle>,
    config: &EvalConfig,
    config_digest: &str,
) -> Result<DiversityReport> {
    if prompts.is_empty() || generations.is_empty() {
        return Err(Error::Input("evaluation needs at least one prompt".into()));
    }
    let mut prompt_diversity = Vec::with_capacity(generations.len());
    let mut pass_sums: BTreeMap<usize, f64> = BTreeMap::new();
    let mut samples_per_prompt = 0;
    for pg in generations {
        let texts: Vec<String> = pg
            .generations
            .iter()
            .map(|g| normalized_text(&g.tokens, vocab))
            .collect();
        let d =
            sample_diversity(&texts).map_err(|e| e.context(format!("prompt {}", pg.prompt_id)))?;
        prompt_diversity.push((pg.prompt_id, d));
        samples_per_prompt = samples_per_prompt.max(texts.len());
        if let Some(o) = oracle {
            let n = pg.generations.len();
            let c = pg
                .generations
                .iter()
                .filter(|g| o.passes(pg.prompt_id, &g.tokens))
                .count();
            for &k in &config.pass_ks {
                if k <= n {
                    *pass_sums.entry(k).or_insert(0.0) += pass_at_k(n, c, k)?;
                }
            }
        }
    }
    let greedy_match_rate = greedy_match_rate(
        set,
        prompts,
        generations,
        Some(vocab.eos()),
        &config.sampler,
    )?;
    let n_prompts = generations.len();
    let pass_at = pass_sums
        .into_iter()
        .map(|(k, s)| (k, s / n_prompts as f64))
        .collect();
    let kl = avg_kl(set, prompts, config.kl_positions, config.symmetric_kl)?;
    Ok(DiversityReport {
        method: set.provenance().method.clone(),
        k: set.k(),
        temperature: config.sampler.temperature,
        n_prompts,
        samples_per_prompt,
        avg_kl: kl.as_ref().map(|r| r.avg),
        sample_diversity: prompt_diversity.iter().map(|p| p.1).sum::<f64>() / n_prompts as f64,
        greedy_match_rate,
        pass_at,
        kl_pairs: kl.map(|r| r.pairs).unwrap_or_default(),
        prompt_diversity,
        partition: None,
        config_digest: config_digest.to_string(),
    })
}

/// Share of generations equal to the greedy decode of the adaptation that
/// produced them, on the same prompt and length budget.
pub fn greedy_match_rate(
    set: &AdaptationSet,
    prompts: &[Example],
    generations: &[PromptGenerations],
    eos: Option<TokenId>,
    sampler: &SamplerConfig,
) -> Result<f64> {
    let greedy_cfg = SamplerConfig {
        temperature: 0.0,
        top_k: None,
        top_p: None,
        ..sampler.clone()
    };
    let mut total = 0usize;
    let mut hits = 0usize;
    for pg in generations {
        let prompt = prompts
            .iter()
            .find(|p| p.id == pg.prompt_id)
            .ok_or_else(|| {
                Error::Input(format!(
                    "generations refer to unknown prompt {}",
                    pg.prompt_id
                ))
            })?;
        let mut greedy: BTreeMap<usize, Vec<TokenId>> = BTreeMap::new();
        for g in &pg.generations {
            if g.adaptation_index >= set.k() {
                return Err(Error::Input(format!(
                    "generation names adaptation {} of {}",
                    g.adaptation_index,
                    set.k()
                )));
            }
            let reference = match greedy.get(&g.adaptation_index) {
                Some(r) => r,
                None => {
                    let a = set.adaptation(g.adaptation_index);
                    let r = crate::sample::generate(
                        set.base(),
                        Some(a),
                        &prompt.input,
                        eos,
                        &greedy_cfg,
                    )?
                    .tokens;
                    greedy.entry(g.adaptation_index).or_insert(r)
                }
            };
            total += 1;
            hits += usize::from(*reference == g.tokens);
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    })
}

/// Samples and scores in one go.
pub fn evaluate(
    set: &AdaptationSet,
    prompts: &[Example],
    vocab: &Vocab,
    oracle: Option<&dyn CorrectnessOracle>,
    config: &EvalConfig,
    config_digest: &str,
) -> Result<DiversityReport> {
    let gens = generate_for_prompts(set, prompts, Some(vocab.eos()), config)?;
    evaluate_generations(set, prompts, &gens, vocab, oracle, config, config_digest)
}

fn fmt_f(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or("NA".to_string(), fmt_f)
}

impl DiversityReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{REPORT_HEADER}");
        let _ = writeln!(s, "method = {}", self.method);
        let _ = writeln!(s, "k = {}", self.k);
        let _ = writeln!(s, "temperature = {}", fmt_f(self.temperature));
        let _ = writeln!(s, "n_prompts = {}", self.n_prompts);
        let _ = writeln!(s, "samples_per_prompt = {}", self.samples_per_prompt);
        let _ = writeln!(s, "sample_diversity = {}", fmt_f(self.sample_diversity));
        let _ = writeln!(s, "avg_kl = {}", fmt_opt(self.avg_kl));
        let _ = writeln!(s, "greedy_match_rate = {}", fmt_f(self.greedy_match_rate));
        let _ = writeln!(s, "config_digest = {}", self.config_digest);
        let _ = writeln!(s, "\n[pass_at]");
        for (k, v) in &self.pass_at {
            let _ = writeln!(s, "{k} = {}", fmt_f(*v));
        }
        let _ = writeln!(s, "\n[partition]");
        if let Some(p) = &self.partition {
            let sizes: Vec<String> = p.sizes.iter().map(usize::to_string).collect();
            let _ = writeln!(s, "sizes = {}", sizes.join(","));
            let _ = writeln!(s, "min_size = {}", p.min_size);
            let _ = writeln!(s, "max_size = {}", p.max_size);
            let _ = writeln!(s, "mean_size = {}", fmt_f(p.mean_size));
            let _ = writeln!(s, "purity = {}", fmt_opt(p.purity));
            let _ = writeln!(s, "objective = {}", fmt_opt(p.objective));
        }
        let _ = writeln!(s, "\n[kl_pairs]");
        for (i, j, v) in &self.kl_pairs {
            let _ = writeln!(s, "{i},{j} = {}", fmt_f(*v));
        }
        let _ = writeln!(s, "\n[prompt_diversity]");
        for (id, v) in &self.prompt_diversity {
            let _ = writeln!(s, "{id} = {}", fmt_f(*v));
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let version = |message: String| Error::Version {
            path: path.to_path_buf(),
            message,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == REPORT_HEADER => {}
            other => {
                return Err(version(format!(
                    "expected {REPORT_HEADER:?}, found {:?}",
                    other.map(|o| o.1)
                )))
            }
        }
        let mut section = String::new();
        let mut top: BTreeMap<String, String> = BTreeMap::new();
        let mut sections: BTreeMap<String, Vec<(String, String, usize)>> = BTreeMap::new();
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.to_string();
                sections.entry(section.clone()).or_default();
                continue;
            }
            let (k, v) = line.split_once(" = ").ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            if section.is_empty() {
                top.insert(k.to_string(), v.to_string());
            } else {
                sections.entry(section.clone()).or_default().push((
                    k.to_string(),
                    v.to_string(),
                    i + 1,
                ));
            }
        }
        let field = |k: &str| {
            top.get(k)
                .cloned()
                .ok_or_else(|| version(format!("report lacks field {k:?}")))
        };
        let float = |s: &str, line: usize| -> Result<f64> {
            s.parse().map_err(|_| Error::Parse {
                line,
                message: format!("bad number {s:?}"),
            })
        };
        let opt = |s: &str, line: usize| -> Result<Option<f64>> {
            if s == "NA" {
                Ok(None)
            } else {
                float(s, line).map(Some)
            }
        };
        let int = |s: &str, line: usize| -> Result<usize> {
            s.parse().map_err(|_| Error::Parse {
                line,
                message: format!("bad integer {s:?}"),
            })
        };
        for required in ["pass_at", "partition", "kl_pairs", "prompt_diversity"] {
            if !sections.contains_key(required) {
                return Err(version(format!("report lacks section [{required}]")));
            }
        }
        let mut pass_at = BTreeMap::new();
        for (k, v, line) in &sections["pass_at"] {
            pass_at.insert(int(k, *line)?, float(v, *line)?);
        }
        let mut kl_pairs = Vec::new();
        for (k, v, line) in &sections["kl_pairs"] {
            let (i, j) = k.split_once(',').ok_or(Error::Parse {
                line: *line,
                message: "bad pair".into(),
            })?;
            kl_pairs.push((int(i, *line)?, int(j, *line)?, float(v, *line)?));
        }
        let mut prompt_diversity = Vec::new();
        for (k, v, line) in &sections["prompt_diversity"] {
            prompt_diversity.push((int(k, *line)?, float(v, *line)?));
        }
        let part = &sections["partition"];
        let partition = if part.is_empty() {
            None
        } else {
            let get = |name: &str| {
                part.iter()
                    .find(|(k, _, _)| k == name)
                    .map(|(_, v, l)| (v.clone(), *l))
                    .ok_or_else(|| version(format!("partition section lacks {name:?}")))
            };
            let (sizes, l) = get("sizes")?;
            let sizes = sizes
                .split(',')
                .map(|s| int(s, l))
                .collect::<Result<Vec<_>>>()?;
            let (min_size, l1) = get("min_size")?;
            let (max_size, l2) = get("max_size")?;
            let (mean_size, l3) = get("mean_size")?;
            let (purity, l4) = get("purity")?;
            let (objective, l5) = get("objective")?;
            Some(PartitionStats {
                sizes,
                min_size: int(&min_size, l1)?,
                max_size: int(&max_size, l2)?,
                mean_size: float(&mean_size, l3)?,
                purity: opt(&purity, l4)?,
                objective: opt(&objective, l5)?,
            })
        };
        Ok(DiversityReport {
            method: field("method")?,
            k: int(&field("k")?, 0)?,
            temperature: float(&field("temperature")?, 0)?,
            n_prompts: int(&field("n_prompts")?, 0)?,
            samples_per_prompt: int(&field("samples_per_prompt")?, 0)?,
            avg_kl: opt(&field("avg_kl")?, 0)?,
            sample_diversity: float(&field("sample_diversity")?, 0)?,
            greedy_match_rate: float(&field("greedy_match_rate")?, 0)?,
            pass_at,
            kl_pairs,
            prompt_diversity,
            partition,
            config_digest: field("config_digest")?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        DiversityReport::parse(&text, path)
    }
}

/// Methods × metrics table. The best value in each column (highest, all
/// metrics are larger-is-better) is marked with `*`; equal best values are
/// all marked. Absent values print as `NA`.
pub fn compare_reports(reports: &[(String, DiversityReport)]) -> Result<String> {
    if reports.len() < 2 {
        return Err(Error::Input(format!(
            "comparison needs at least 2 reports, got {}",
            reports.len()
        )));
    }
    let pass_keys: Vec<usize> = reports[0].1.pass_at.keys().copied().collect();
    for (name, r) in &reports[1..] {
        if r.pass_at.keys().copied().collect::<Vec<_>>() != pass_keys {
            return Err(Error::Version {
                path: name.into(),
                message: "report has different pass@k columns from the first".into(),
            });
        }
    }
    let mut columns: Vec<(String, Vec<Option<f64>>)> = vec![
        (
            "diversity".into(),
            reports.iter().map(|r| Some(r.1.sample_diversity)).collect(),
        ),
        (
            "avg_kl".into(),
            reports.iter().map(|r| r.1.avg_kl).collect(),
        ),
    ];
    for k in &pass_keys {
        columns.push((
            format!("pass@{k}"),
            reports
                .iter()
                .map(|r| r.1.pass_at.get(k).copied())
                .collect(),
        ));
    }
    columns.push((
        "purity".into(),
        reports
            .iter()
            .map(|r| r.1.partition.as_ref().and_then(|p| p.purity))
            .collect(),
    ));

    let name_w = reports
        .iter()
        .map(|r| r.0.len())
        .max()
        .unwrap_or(0)
        .max("method".len());
    let mut out = format!("{:<name_w$}", "method");
    for (c, _) in &columns {
        let _ = write!(out, "  {c:>12}");
    }
    out.push('\n');
    for (row, (name, _)) in reports.iter().enumerate() {
        let _ = write!(out, "{name:<name_w$}");
        for (_, values) in &columns {
            let best = values
                .iter()
                .flatten()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            let cell = match values[row] {
                Some(v) => format!("{v:.4}{}", if v == best { "*" } else { " " }),
                None => "NA ".into(),
            };
            let _ = write!(out, "  {cell:>12}");
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_hand_value() {
        let d = kl_divergence(&[0.5, 0.5], &[0.9, 0.1]);
        let want = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((d - want).abs() < 1e-15);
        assert!((d - 0.5108).abs() < 1e-4);
        assert_eq!(kl_divergence(&[0.2, 0.8], &[0.2, 0.8]), 0.0);
        assert!(kl_divergence(&[1.0, 0.0], &[0.0, 1.0]).is_finite());
    }

    #[test]
    fn diversity_cases() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        assert_eq!(sample_diversity(&s(&["a", "b", "c"])).unwrap(), 1.0);
        assert_eq!(sample_diversity(&s(&["a", "a", "a"])).unwrap(), 0.0);
        assert!((sample_diversity(&s(&["a", "a", "b"])).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((sample_diversity(&s(&["a", "a", "b", "b"])).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(sample_diversity(&s(&["a  b", " a b "])).unwrap(), 0.0);
        assert!(sample_diversity(&s(&["a"])).is_err());
    }

    #[test]
    fn pass_at_k_cases() {
        assert_eq!(pass_at_k(5, 5, 3).unwrap(), 1.0);
        assert_eq!(pass_at_k(5, 0, 3).unwrap(), 0.0);
        assert!((pass_at_k(5, 2, 1).unwrap() - 0.4).abs() < 1e-15);
        assert!(pass_at_k(3, 4, 1).is_err());
        assert!(pass_at_k(3, 1, 0).is_err());
        assert!(pass_at_k(3, 1, 4).is_err());
    }

    #[test]
    fn oracles() {
        let exact = ExactMatch {
            references: BTreeMap::from([(1, vec![3, 4, 0])]),
            eos: Some(0),
        };
        assert!(exact.passes(1, &[3, 4]));
        assert!(!exact.passes(1, &[3]));
        assert!(!exact.passes(2, &[3, 4]));
        let set = TokenSet {
            allowed: BTreeMap::from([(1, 2..5)]),
            min_fraction: 0.5,
        };
        assert!(set.passes(1, &[2, 9]));
        assert!(!set.passes(1, &[9, 9, 3]));
    }

    #[test]
    fn report_roundtrip() {
        let r = DiversityReport {
            method: "bm25".into(),
            k: 3,
            temperature: 0.25,
            n_prompts: 2,
            samples_per_prompt: 3,
            avg_kl: Some(0.1),
            sample_diversity: 2.0 / 3.0,
            greedy_match_rate: 0.5,
            pass_at: BTreeMap::from([(1, 0.5)]),
            kl_pairs: vec![(0, 1, 0.1), (0, 2, 0.2), (1, 2, 0.0)],
            prompt_diversity: vec![(7, 1.0), (8, 1.0 / 3.0)],
            partition: Some(PartitionStats {
                sizes: vec![3, 4, 5],
                min_size: 3,
                max_size: 5,
                mean_size: 4.0,
                purity: None,
                objective: Some(12.5),
            }),
            config_digest: "abc".into(),
        };
        let text = r.render();
        assert_eq!(DiversityReport::parse(&text, Path::new("r")).unwrap(), r);
        let single = DiversityReport {
            avg_kl: None,
            partition: None,
            kl_pairs: vec![],
            ..r
        };
        assert_eq!(
            DiversityReport::parse(&single.render(), Path::new("r")).unwrap(),
            single
        );
        assert!(matches!(
            DiversityReport::parse("spa-report v0\n", Path::new("r")),
            Err(Error::Version { .. })
        ));
    }
}
