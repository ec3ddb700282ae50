use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{BaseModel, Matrix};
use crate::error::{Error, Result};
use crate::seed;

/// Factor pair for one adapted matrix `W` (stored `d_in x d_out`):
/// `A` is `r x d_in`, `B` is `d_out x r`, and the effective weight is
/// `W + (alpha / r) * (B A)ᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactor {
    pub a: Matrix,
    pub b: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            alpha: 4.0,
            targets: vec!["W1".into(), "W2".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdaptation {
    rank: usize,
    alpha: f64,
    factors: BTreeMap<String, LowRankFactor>,
}

impl LowRankAdaptation {
    /// `A` gets uniform noise in `±1/sqrt(d_in)`, `B` starts at zero, so the
    /// initial update is exactly zero.
    pub fn init(base: &BaseModel, config: &LoraConfig, seed_value: u64) -> Result<Self> {
        let mut rng = seed::rng(seed_value);
        let mut factors = BTreeMap::new();
        for name in &config.targets {
            let w = base
                .weight(name)
                .ok_or_else(|| Error::Config(format!("cannot adapt unknown matrix {name:?}")))?;
            let bound = 1.0 / (w.rows as f64).sqrt();
            let factor = LowRankFactor {
                a: Matrix::uniform(config.rank, w.rows, bound, &mut rng),
                b: Matrix::zeros(w.cols, config.rank),
            };
            factors.insert(name.clone(), factor);
        }
        LowRankAdaptation::from_parts(base, config.rank, config.alpha, factors)
    }

    pub fn from_parts(
        base: &BaseModel,
        rank: usize,
        alpha: f64,
        factors: BTreeMap<String, LowRankFactor>,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("adaptation rank must be at least 1".into()));
        }
        if factors.is_empty() {
            return Err(Error::Config(
                "adaptation must target at least one matrix".into(),
            ));
        }
        if !alpha.is_finite() {
            return Err(Error::Config("adaptation alpha must be finite".into()));
        }
        for (name, f) in &factors {
            let w = base
                .weight(name)
                .ok_or_else(|| Error::Config(format!("cannot adapt unknown matrix {name:?}")))?;
            if rank >= w.rows.min(w.cols) {
                return Err(Error::Config(format!(
                    "rank {rank} must be below min({}, {}) for {name}",
                    w.rows, w.cols
                )));
            }
            if (f.a.rows, f.a.cols) != (rank, w.rows) || (f.b.rows, f.b.cols) != (w.cols, rank) {
                return Err(Error::Input(format!(
                    "factor shapes for {name} do not match the base matrix"
                )));
            }
        }
        Ok(LowRankAdaptation {
            rank,
            alpha,
            factors,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn factors(&self) -> &BTreeMap<String, LowRankFactor> {
        &self.factors
    }

    pub(crate) fn factors_mut(&mut self) -> &mut BTreeMap<String, LowRankFactor> {
        &mut self.factors
    }

    pub fn adapted_names(&self) -> impl Iterator<Item = &str> {
        self.factors.keys().map(String::as_str)
    }

    pub fn param_count(&self) -> usize {
        self.factors
            .values()
            .map(|f| f.a.data.len() + f.b.data.len())
            .sum()
    }

    /// The dense update `(alpha / r) (B A)ᵀ`, shaped like the base matrix.
    pub fn delta(&self, name: &str) -> Option<Matrix> {
        let f = self.factors.get(name)?;
        let (din, dout, r) = (f.a.cols, f.b.rows, self.rank);
        let s = self.scaling();
        let mut m = Matrix::zeros(din, dout);
        for i in 0..din {
            for j in 0..dout {
                let mut acc = 0.0;
                for k in 0..r {
                    acc += f.a.data[k * din + i] * f.b.data[j * r + k];
                }
                m.data[i * dout + j] = s * acc;
            }
        }
        Some(m)
    }
}
