//! Attribution scores between training examples and test queries.
//!
//! An [`AttributionMatrix`] is stored queries × examples: row `k` holds the
//! score of every training example for query `k`.
//!
//! Influence follows the upweighting convention
//! `score(z, q) = −∇L(z)ᵀ (H + λI)⁻¹ ∇L(q)`, with gradients and Hessian taken
//! over the trainable parameters at their current (fine-tuned) values. A
//! negative score means upweighting `z` would lower the loss on `q`.

mod bm25;
mod solver;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use bm25::{
    bm25_score, terms, Bm25Config, Bm25Score, Bm25Scorer, Bm25Variant, CorpusStats, Document,
};
pub use solver::{
    estimate_scale, ihvp_cg, ihvp_exact, ihvp_lissa, CgSolution, DenseDampedHessian,
    HessianOperator, LissaConfig, ModelHessian, ScaledIdentity, EXACT_MAX_PARAMS,
};

use crate::corpus::{Example, Vocab};
use crate::error::{Error, Result};
use crate::model::{BaseModel, Differentiable, LowRankAdaptation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "influence-exact")]
    InfluenceExact,
    #[serde(rename = "influence-cg")]
    InfluenceCg,
    #[serde(rename = "influence-lissa")]
    InfluenceLissa,
    #[serde(rename = "bm25")]
    Bm25,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::InfluenceExact,
        Method::InfluenceCg,
        Method::InfluenceLissa,
        Method::Bm25,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::InfluenceExact => "influence-exact",
            Method::InfluenceCg => "influence-cg",
            Method::InfluenceLissa => "influence-lissa",
            Method::Bm25 => "bm25",
        }
    }

    pub fn is_influence(self) -> bool {
        self != Method::Bm25
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown attribution method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMatrix {
    method: Method,
    scores: Vec<Vec<f64>>,
    query_ids: Vec<usize>,
    example_ids: Vec<usize>,
}

impl AttributionMatrix {
    pub fn new(
        method: Method,
        scores: Vec<Vec<f64>>,
        query_ids: Vec<usize>,
        example_ids: Vec<usize>,
    ) -> Result<Self> {
        if scores.len() != query_ids.len() {
            return Err(Error::Size(format!(
                "{} rows but {} query ids",
                scores.len(),
                query_ids.len()
            )));
        }
        if let Some((k, row)) = scores
            .iter()
            .enumerate()
            .find(|(_, r)| r.len() != example_ids.len())
        {
            return Err(Error::Size(format!(
                "row {k} has {} entries, expected {}",
                row.len(),
                example_ids.len()
            )));
        }
        for (k, row) in scores.iter().enumerate() {
            if let Some(i) = row.iter().position(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!(
                    "score for query row {k}, example column {i} is not finite"
                )));
            }
        }
        let mut seen = query_ids.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Input("query ids must be distinct".into()));
        }
        Ok(AttributionMatrix {
            method,
            scores,
            query_ids,
            example_ids,
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn n_queries(&self) -> usize {
        self.scores.len()
    }

    pub fn n_examples(&self) -> usize {
        self.example_ids.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.scores
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.scores[k]
    }

    pub fn get(&self, k: usize, i: usize) -> f64 {
        self.scores[k][i]
    }

    pub fn query_ids(&self) -> &[usize] {
        &self.query_ids
    }

    pub fn example_ids(&self) -> &[usize] {
        &self.example_ids
    }

    /// Same ids and method with new scores of the same shape.
    pub fn with_scores(&self, scores: Vec<Vec<f64>>) -> Result<Self> {
        AttributionMatrix::new(
            self.method,
            scores,
            self.query_ids.clone(),
            self.example_ids.clone(),
        )
    }

    /// Keeps the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&k) = rows.iter().find(|&&k| k >= self.n_queries()) {
            return Err(Error::Input(format!(
                "row {k} out of range for {} queries",
                self.n_queries()
            )));
        }
        AttributionMatrix::new(
            self.method,
            rows.iter().map(|&k| self.scores[k].clone()).collect(),
            rows.iter().map(|&k| self.query_ids[k]).collect(),
            self.example_ids.clone(),
        )
    }

    /// Every score multiplied by −1.
    pub fn negated(&self) -> Self {
        let scores = self
            .scores
            .iter()
            .map(|r| r.iter().map(|x| -x).collect())
            .collect();
        AttributionMatrix {
            scores,
            ..self.clone()
        }
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "{},{},{}\n",
            self.method,
            self.n_queries(),
            self.n_examples()
        );
        for row in &self.scores {
            let cells: Vec<String> = row.iter().map(|x| format!("{x:.16e}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, query_ids: Vec<usize>, example_ids: Vec<usize>) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "empty matrix file".into(),
        })?;
        let fields: Vec<&str> = header.split(',').collect();
        let bad_header = || Error::Parse {
            line: 1,
            message: format!("expected header method,K_q,N, got {header:?}"),
        };
        if fields.len() != 3 {
            return Err(bad_header());
        }
        let method: Method = fields[0].parse()?;
        let kq: usize = fields[1].parse().map_err(|_| bad_header())?;
        let n: usize = fields[2].parse().map_err(|_| bad_header())?;
        let mut scores = Vec::with_capacity(kq);
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: std::result::Result<Vec<f64>, _> =
                line.split(',').map(|c| c.trim().parse::<f64>()).collect();
            let row = row.map_err(|e| Error::Parse {
                line: i + 2,
                message: e.to_string(),
            })?;
            if row.len() != n {
                return Err(Error::Parse {
                    line: i + 2,
                    message: format!("expected {n} values, got {}", row.len()),
                });
            }
            scores.push(row);
        }
        if scores.len() != kq {
            return Err(Error::Parse {
                line: 1,
                message: format!("header declares {kq} rows, file has {}", scores.len()),
            });
        }
        AttributionMatrix::new(method, scores, query_ids, example_ids)
    }

    /// Writes the matrix to `path` and the id maps to [`ids_path`]`(path)`.
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).map_err(|e| Error::io(path, e))?;
        let ids = IdMaps {
            query_ids: self.query_ids.clone(),
            example_ids: self.example_ids.clone(),
        };
        let ids_file = ids_path(path);
        let json = serde_json::to_string_pretty(&ids).expect("id maps serialize");
        fs::write(&ids_file, json).map_err(|e| Error::io(&ids_file, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ids_file = ids_path(path);
        let ids_text = fs::read_to_string(&ids_file).map_err(|e| Error::io(&ids_file, e))?;
        let ids: IdMaps = serde_json::from_str(&ids_text).map_err(|e| Error::Parse {
            line: e.line(),
            message: format!("{}: {e}", ids_file.display()),
        })?;
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        AttributionMatrix::parse(&text, ids.query_ids, ids.example_ids)
            .map_err(|e| e.context(path.display().to_string()))
    }
}

#[derive(Serialize, Deserialize)]
struct IdMaps {
    query_ids: Vec<usize>,
    example_ids: Vec<usize>,
}

/// Companion id-map file for a matrix written at `path`.
pub fn ids_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".ids.json");
    path.with_file_name(name)
}

/// Settings for every method. Only the fields of the chosen method are read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionConfig {
    pub damping: f64,
    pub cg_tol: f64,
    pub cg_max_iters: usize,
    /// LiSSA settings; `None` means [`LissaConfig::for_dataset`] with the
    /// shared damping.
    pub lissa: Option<LissaConfig>,
    pub bm25: Bm25Config,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            damping: 1e-3,
            cg_tol: 1e-8,
            cg_max_iters: 500,
            lissa: None,
            bm25: Bm25Config::default(),
        }
    }
}

/// `−train_gradᵀ · ihvp`.
pub fn influence_from_grad(train_grad: &[f64], ihvp: &[f64]) -> f64 {
    -train_grad.iter().zip(ihvp).map(|(a, b)| a * b).sum::<f64>()
}

/// Influence of one training example on the query whose damped inverse
/// Hessian-vector product is `ihvp`.
pub fn influence_score(
    base: &BaseModel,
    adaptation: Option<&LowRankAdaptation>,
    train_example: &Example,
    ihvp: &[f64],
) -> Result<f64> {
    let d = Differentiable::new(base, adaptation)?;
    if ihvp.len() != d.len() {
        return Err(Error::Input(format!(
            "ihvp has {} entries, model has {} parameters",
            ihvp.len(),
            d.len()
        )));
    }
    crate::model::loss(base, adaptation, train_example)?;
    Ok(influence_from_grad(&d.example_grad(train_example), ihvp))
}

/// Full matrix for `queries` against every example of `train`.
#[allow(clippy::too_many_arguments)]
pub fn build_matrix(
    method: Method,
    config: &AttributionConfig,
    base: &BaseModel,
    adaptation: Option<&LowRankAdaptation>,
    vocab: &Vocab,
    train: &[Example],
    queries: &[Example],
    seed_value: u64,
) -> Result<AttributionMatrix> {
    if queries.is_empty() {
        return Err(Error::Input("attribution needs at least one query".into()));
    }
    if train.is_empty() {
        return Err(Error::Input(
            "attribution needs at least one training example".into(),
        ));
    }
    let scores = match method {
        Method::Bm25 => bm25_rows(config, vocab, train, queries)?,
        _ => influence_rows(method, config, base, adaptation, train, queries, seed_value)?,
    };
    AttributionMatrix::new(
        method,
        scores,
        queries.iter().map(|q| q.id).collect(),
        train.iter().map(|z| z.id).collect(),
    )
}

fn bm25_rows(
    config: &AttributionConfig,
    vocab: &Vocab,
    train: &[Example],
    queries: &[Example],
) -> Result<Vec<Vec<f64>>> {
    let docs: Vec<Document> = train
        .iter()
        .map(|z| Document::new(&terms(z, vocab)))
        .collect();
    let stats = CorpusStats::new(&docs)?;
    let scorer = Bm25Scorer::new(&stats, config.bm25)?;
    Ok(queries
        .iter()
        .map(|q| {
            let qt = terms(q, vocab);
            if qt.is_empty() {
                log::warn!("query {} has no bm25 terms; its row is all zeros", q.id);
            }
            docs.iter().map(|d| scorer.score(d, &qt).value).collect()
        })
        .collect())
}

fn influence_rows(
    method: Method,
    config: &AttributionConfig,
    base: &BaseModel,
    adaptation: Option<&LowRankAdaptation>,
    train: &[Example],
    queries: &[Example],
    seed_value: u64,
) -> Result<Vec<Vec<f64>>> {
    for ex in train.iter().chain(queries) {
        crate::model::loss(base, adaptation, ex)
            .map_err(|e| e.context(format!("example {}", ex.id)))?;
    }
    let d = Differentiable::new(base, adaptation)?;
    let op = ModelHessian::new(&d, train)?;
    let train_grads: Vec<Vec<f64>> = train.par_iter().map(|z| d.example_grad(z)).collect();
    let query_grads: Vec<Vec<f64>> = queries.par_iter().map(|q| d.example_grad(q)).collect();

    let dense = match method {
        Method::InfluenceExact => Some(DenseDampedHessian::assemble(&op, config.damping)?),
        _ => None,
    };
    let lissa = match &config.lissa {
        Some(l) => l.clone(),
        None => LissaConfig {
            damping: config.damping,
            ..LissaConfig::for_dataset(train.len())
        },
    };
    let lissa = match (method, lissa.scale) {
        (Method::InfluenceLissa, None) => LissaConfig {
            scale: Some(estimate_scale(&op, lissa.damping, seed_value)),
            ..lissa
        },
        _ => lissa,
    };

    query_grads
        .par_iter()
        .enumerate()
        .map(|(k, g)| {
            let v = match method {
                Method::InfluenceExact => dense.as_ref().expect("assembled").solve(g),
                Method::InfluenceCg => {
                    let sol = ihvp_cg(&op, g, config.damping, config.cg_tol, config.cg_max_iters)?;
                    if sol.relative_residual > config.cg_tol {
                        log::warn!(
                            "query row {k}: conjugate gradient stopped at residual {:e} after {} iterations",
                            sol.relative_residual,
                            sol.iterations
                        );
                    }
                    Ok(sol.v)
                }
                Method::InfluenceLissa => ihvp_lissa(&op, g, &lissa, seed_value, k as u64),
                Method::Bm25 => unreachable!("handled by bm25_rows"),
            }
            .map_err(|e| e.context(format!("query row {k} (id {})", queries[k].id)))?;
            Ok(train_grads.iter().map(|tg| influence_from_grad(tg, &v)).collect())
        })
        .collect()
}

/// Row indices ranked by the population variance of their scores, highest
/// first, ties to the lower index; the first `top_k` are returned.
pub fn select_queries_by_variance(matrix: &AttributionMatrix, top_k: usize) -> Result<Vec<usize>> {
    if top_k > matrix.n_queries() {
        return Err(Error::Config(format!(
            "cannot select {top_k} of {} candidate queries",
            matrix.n_queries()
        )));
    }
    let var: Vec<f64> = matrix
        .rows()
        .iter()
        .map(|r| population_variance(r))
        .collect();
    let mut order: Vec<usize> = (0..matrix.n_queries()).collect();
    order.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(a.cmp(&b)));
    order.truncate(top_k);
    Ok(order)
}

pub fn population_variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}
