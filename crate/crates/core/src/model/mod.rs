//! Two small differentiable next-token models and their low-rank adaptations.
//!
//! Both kinds predict output token `y[t]` from the context `x ++ y[..t]`:
//!
//! * `Convex`: softmax regression `Wᵀ φ(context)` where `φ` is the
//!   length-normalized histogram of context tokens hashed into `feature_dim`
//!   buckets (`id % feature_dim`). The loss is convex in `W`.
//! * `MlpLm`: `softmax(W2ᵀ tanh(W1ᵀ c))` where `c` is the mean embedding of
//!   the context tokens (rows of `E`).
//!
//! Gradients are analytic. Hessian-vector products run the same gradient code
//! on [`Dual`] numbers seeded with `v`, which is exact up to rounding.

mod io;
mod lora;
mod net;
mod params;
pub mod scalar;
mod train;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, TokenId};
use crate::error::{Error, Result};
use crate::seed;

pub use io::{
    adaptation_bytes, base_model_bytes, read_adaptation, read_base_model, write_adaptation,
    write_base_model, FORMAT_VERSION,
};
pub use lora::{LoraConfig, LowRankAdaptation, LowRankFactor};
pub use net::{Differentiable, InferenceModel, PROB_FLOOR};
pub use params::{Layout, LayoutEntry, ParamVector};
pub use train::{train_adaptation, train_full, TrainConfig, TrainOutcome};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Size(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "convex")]
    Convex,
    #[serde(rename = "mlp-lm")]
    MlpLm,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Convex => "convex",
            ModelKind::MlpLm => "mlp-lm",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "convex" => Ok(ModelKind::Convex),
            "mlp-lm" => Ok(ModelKind::MlpLm),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Model dimensions. `embed_dim`/`hidden_dim` apply to `MlpLm`,
/// `feature_dim` to `Convex`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub vocab: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel {
    kind: ModelKind,
    dims: Dims,
    weights: BTreeMap<String, Matrix>,
}

impl BaseModel {
    pub fn mlp(vocab: usize, embed_dim: usize, hidden_dim: usize) -> Result<Self> {
        if vocab < 2 || embed_dim == 0 || hidden_dim == 0 {
            return Err(Error::Config(format!(
                "invalid mlp-lm dims ({vocab}, {embed_dim}, {hidden_dim})"
            )));
        }
        let dims = Dims {
            vocab,
            embed_dim,
            hidden_dim,
            feature_dim: 0,
        };
        let mut weights = BTreeMap::new();
        weights.insert("E".into(), Matrix::zeros(vocab, embed_dim));
        weights.insert("W1".into(), Matrix::zeros(embed_dim, hidden_dim));
        weights.insert("W2".into(), Matrix::zeros(hidden_dim, vocab));
        Ok(BaseModel {
            kind: ModelKind::MlpLm,
            dims,
            weights,
        })
    }

    pub fn convex(vocab: usize, feature_dim: usize) -> Result<Self> {
        if vocab < 2 || feature_dim == 0 {
            return Err(Error::Config(format!(
                "invalid convex dims ({vocab}, {feature_dim})"
            )));
        }
        let dims = Dims {
            vocab,
            embed_dim: 0,
            hidden_dim: 0,
            feature_dim,
        };
        let mut weights = BTreeMap::new();
        weights.insert("W".into(), Matrix::zeros(feature_dim, vocab));
        Ok(BaseModel {
            kind: ModelKind::Convex,
            dims,
            weights,
        })
    }

    /// Seeded uniform initialization. For `MlpLm` the embedding is dense,
    /// `W1` is scaled by `1/sqrt(embed_dim)` and `W2` is kept small so the
    /// initial predictive distribution is close to uniform.
    pub fn randomized(mut self, seed_value: u64, scale: f64) -> Self {
        let mut rng = seed::rng(seed_value);
        let d = self.dims;
        for (name, m) in self.weights.iter_mut() {
            let bound = match name.as_str() {
                "E" => scale,
                "W1" => scale * 2.0 / (d.embed_dim as f64).sqrt(),
                "W2" => scale * 0.1 / (d.hidden_dim as f64).sqrt(),
                _ => scale,
            };
            *m = Matrix::uniform(m.rows, m.cols, bound, &mut rng);
        }
        self
    }

    pub fn from_parts(
        kind: ModelKind,
        dims: Dims,
        weights: BTreeMap<String, Matrix>,
    ) -> Result<Self> {
        let expected = match kind {
            ModelKind::MlpLm => BaseModel::mlp(dims.vocab, dims.embed_dim, dims.hidden_dim)?,
            ModelKind::Convex => BaseModel::convex(dims.vocab, dims.feature_dim)?,
        };
        if weights.len() != expected.weights.len() {
            return Err(Error::Input(format!(
                "{kind} model expects {} matrices",
                expected.weights.len()
            )));
        }
        for (name, m) in &expected.weights {
            let got = weights
                .get(name)
                .ok_or_else(|| Error::Input(format!("missing matrix {name}")))?;
            if (got.rows, got.cols) != (m.rows, m.cols) {
                return Err(Error::Input(format!(
                    "matrix {name} is {}x{}, expected {}x{}",
                    got.rows, got.cols, m.rows, m.cols
                )));
            }
            if !got.all_finite() {
                return Err(Error::Numerical(format!(
                    "matrix {name} has non-finite entries"
                )));
            }
        }
        Ok(BaseModel {
            kind,
            dims,
            weights,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn vocab_size(&self) -> usize {
        self.dims.vocab
    }

    pub fn weights(&self) -> &BTreeMap<String, Matrix> {
        &self.weights
    }

    pub fn weight(&self, name: &str) -> Option<&Matrix> {
        self.weights.get(name)
    }

    pub(crate) fn weight_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.weights.get_mut(name)
    }

    pub fn param_count(&self) -> usize {
        self.weights.values().map(|m| m.data.len()).sum()
    }

    pub(crate) fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.dims.vocab) {
            Some(t) => Err(Error::Input(format!(
                "token id {t} out of range for vocabulary {}",
                self.dims.vocab
            ))),
            None => Ok(()),
        }
    }

    pub(crate) fn check_example(&self, ex: &Example) -> Result<()> {
        if ex.output.is_empty() {
            return Err(Error::Input(format!(
                "example {} has an empty output",
                ex.id
            )));
        }
        self.check_tokens(&ex.input)?;
        self.check_tokens(&ex.output)
    }
}

/// Per-position next-token distributions: entry `i` is the distribution
/// after the prefix `input[..=i]`.
pub fn forward(
    model: &BaseModel,
    adaptation: Option<&LowRankAdaptation>,
    input: &[TokenId],
) -> Result<Vec<Vec<f64>>> {
    model.check_tokens(input)?;
    let m = InferenceModel::new(model, adaptation)?;
    Ok((1..=input.len())
        .map(|n| m.next_distribution(&input[..n]))
        .collect())
}

/// Mean negative log-likelihood of the output tokens given the input prefix.
pub fn loss(
    model: &BaseModel,
    adaptation: Option<&LowRankAdaptation>,
    example: &Example,
) -> Result<f64> {
    model.check_example(example)?;
    Ok(Differentiable::new(model, adaptation)?.loss(example))
}

/// Gradient of the mean batch loss with respect to the trainable parameters
/// (adaptation factors when present, else all base weights).
pub fn grad(
    model: &BaseModel,
    adaptation: Option<&LowRankAdaptation>,
    batch: &[Example],
) -> Result<ParamVector> {
    check_batch(model, batch)?;
    Ok(Differentiable::new(model, adaptation)?.grad(batch))
}

/// Hessian of the mean batch loss applied to `v`, never materializing H.
pub fn hvp(
    model: &BaseModel,
    adaptation: Option<&LowRankAdaptation>,
    batch: &[Example],
    v: &ParamVector,
) -> Result<ParamVector> {
    check_batch(model, batch)?;
    let d = Differentiable::new(model, adaptation)?;
    if v.layout != *d.layout() {
        return Err(Error::Input(
            "vector layout does not match the trainable parameters".into(),
        ));
    }
    Ok(d.hvp(batch, &v.values))
}

fn check_batch(model: &BaseModel, batch: &[Example]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Input("batch must not be empty".into()));
    }
    batch.iter().try_for_each(|ex| model.check_example(ex))
}

pub fn trainable_params(
    model: &BaseModel,
    adaptation: Option<&LowRankAdaptation>,
) -> Result<ParamVector> {
    Ok(Differentiable::new(model, adaptation)?.params())
}
