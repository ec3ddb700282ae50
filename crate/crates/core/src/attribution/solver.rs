//! Solvers for `(H + λI) v = g` where `H` is only available through
//! Hessian-vector products.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::error::{Error, Result};
use crate::model::Differentiable;
use crate::seed;

/// Largest parameter count for which the dense solver will assemble H.
pub const EXACT_MAX_PARAMS: usize = 2000;

/// LiSSA iterates with a norm above this are treated as divergent.
const LISSA_DIVERGENCE_NORM: f64 = 1e8;

const POWER_ITERATIONS: usize = 10;

/// Something that can multiply a vector by the Hessian of a mean loss,
/// either over the whole dataset or over one sampled example.
pub trait HessianOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[f64]) -> Vec<f64>;
    fn n_samples(&self) -> usize;
    fn apply_sample(&self, index: usize, v: &[f64]) -> Vec<f64>;
}

/// Hessian of the model's mean training loss at its current parameters.
pub struct ModelHessian<'m, 'd> {
    model: &'m Differentiable<'m>,
    dataset: &'d [Example],
}

impl<'m, 'd> ModelHessian<'m, 'd> {
    pub fn new(model: &'m Differentiable<'m>, dataset: &'d [Example]) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Input("Hessian needs a nonempty dataset".into()));
        }
        Ok(ModelHessian { model, dataset })
    }
}

impl HessianOperator for ModelHessian<'_, '_> {
    fn dim(&self) -> usize {
        self.model.len()
    }
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.model.hvp_values(self.dataset, v)
    }
    fn n_samples(&self) -> usize {
        self.dataset.len()
    }
    fn apply_sample(&self, index: usize, v: &[f64]) -> Vec<f64> {
        self.model.hvp_values(&self.dataset[index..=index], v)
    }
}

/// `H = c I`, used to check solvers against closed forms.
#[derive(Debug, Clone, Copy)]
pub struct ScaledIdentity {
    pub dim: usize,
    pub scale: f64,
}

impl HessianOperator for ScaledIdentity {
    fn dim(&self) -> usize {
        self.dim
    }
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter().map(|x| self.scale * x).collect()
    }
    fn n_samples(&self) -> usize {
        1
    }
    fn apply_sample(&self, _: usize, v: &[f64]) -> Vec<f64> {
        self.apply(v)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_damping(damping: f64) -> Result<()> {
    if !(damping > 0.0 && damping.is_finite()) {
        return Err(Error::Config(format!(
            "damping must be positive, got {damping}"
        )));
    }
    Ok(())
}

fn check_dim(op: &dyn HessianOperator, g: &[f64]) -> Result<()> {
    if g.len() != op.dim() {
        return Err(Error::Input(format!(
            "vector has {} entries, operator has {}",
            g.len(),
            op.dim()
        )));
    }
    Ok(())
}

/// Explicitly assembled and factorized `H + λI`. Building it costs `dim`
/// Hessian-vector products; each solve afterwards is a triangular solve.
pub struct DenseDampedHessian {
    matrix: DMatrix<f64>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl DenseDampedHessian {
    pub fn assemble(op: &dyn HessianOperator, damping: f64) -> Result<Self> {
        check_damping(damping)?;
        let n = op.dim();
        if n > EXACT_MAX_PARAMS {
            return Err(Error::Size(format!(
                "exact inverse needs at most {EXACT_MAX_PARAMS} trainable parameters, model has {n}"
            )));
        }
        let mut matrix = DMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            for (i, x) in op.apply(&e).into_iter().enumerate() {
                matrix[(i, j)] = x;
            }
            e[j] = 0.0;
        }
        // exact in theory; rounding in the product breaks symmetry slightly
        let matrix = (&matrix + matrix.transpose()) * 0.5 + DMatrix::identity(n, n) * damping;
        if !matrix.iter().all(|x| x.is_finite()) {
            return Err(Error::Numerical(
                "assembled Hessian has non-finite entries".into(),
            ));
        }
        let lu = matrix.clone().lu();
        Ok(DenseDampedHessian { matrix, lu })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn solve(&self, g: &[f64]) -> Result<Vec<f64>> {
        if g.len() != self.matrix.nrows() {
            return Err(Error::Input(format!(
                "vector has {} entries, Hessian is {}",
                g.len(),
                self.matrix.nrows()
            )));
        }
        let rhs = DVector::from_column_slice(g);
        let v = self
            .lu
            .solve(&rhs)
            .ok_or_else(|| Error::Numerical("damped Hessian is singular".into()))?;
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::Numerical(
                "dense solve produced non-finite values".into(),
            ));
        }
        Ok(v.as_slice().to_vec())
    }
}

pub fn ihvp_exact(op: &dyn HessianOperator, g: &[f64], damping: f64) -> Result<Vec<f64>> {
    check_dim(op, g)?;
    DenseDampedHessian::assemble(op, damping)?.solve(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgSolution {
    pub v: Vec<f64>,
    /// `‖(H+λI)v − g‖ / ‖g‖` at the returned iterate.
    pub relative_residual: f64,
    pub iterations: usize,
}

pub fn ihvp_cg(
    op: &dyn HessianOperator,
    g: &[f64],
    damping: f64,
    tol: f64,
    max_iters: usize,
) -> Result<CgSolution> {
    check_damping(damping)?;
    check_dim(op, g)?;
    let n = g.len();
    let g_norm = norm(g);
    let mut v = vec![0.0; n];
    if g_norm == 0.0 {
        return Ok(CgSolution {
            v,
            relative_residual: 0.0,
            iterations: 0,
        });
    }
    let apply = |x: &[f64]| -> Vec<f64> {
        let mut y = op.apply(x);
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi += damping * xi;
        }
        y
    };
    let mut r = g.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut iterations = 0;
    while iterations < max_iters && rr.sqrt() / g_norm >= tol {
        let ap = apply(&p);
        let curvature = dot(&p, &ap);
        if curvature.is_nan() || curvature <= 0.0 {
            return Err(Error::Numerical(format!(
                "damped Hessian is not positive definite (curvature {curvature:e} at iteration {iterations}); raise the damping"
            )));
        }
        let alpha = rr / curvature;
        for i in 0..n {
            v[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        iterations += 1;
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::Numerical(format!(
                "conjugate gradient iterate is non-finite at iteration {iterations}"
            )));
        }
        let rr_next = dot(&r, &r);
        let beta = rr_next / rr;
        rr = rr_next;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    // report the true residual rather than the recursively updated one
    let hv = apply(&v);
    let res: Vec<f64> = hv.iter().zip(g).map(|(a, b)| a - b).collect();
    Ok(CgSolution {
        relative_residual: norm(&res) / g_norm,
        v,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LissaConfig {
    pub damping: f64,
    pub depth: usize,
    pub repeats: usize,
    /// Step normalizer; must bound the largest damped eigenvalue. Estimated
    /// with a short power iteration when absent.
    #[serde(default)]
    pub scale: Option<f64>,
}

impl Default for LissaConfig {
    fn default() -> Self {
        LissaConfig {
            damping: 1e-3,
            depth: 120,
            repeats: 1,
            scale: None,
        }
    }
}

impl LissaConfig {
    /// Defaults with enough repeats that `depth * repeats` is about `n`.
    pub fn for_dataset(n: usize) -> Self {
        let d = LissaConfig::default();
        LissaConfig {
            repeats: n.div_ceil(d.depth).max(1),
            ..d
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_damping(self.damping)?;
        if self.depth == 0 || self.repeats == 0 {
            return Err(Error::Config(
                "lissa depth and repeats must be at least 1".into(),
            ));
        }
        if let Some(s) = self.scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!(
                    "lissa scale must be positive, got {s}"
                )));
            }
        }
        Ok(())
    }
}

/// Twice the power-method estimate of the largest eigenvalue of `H + λI`.
pub fn estimate_scale(op: &dyn HessianOperator, damping: f64, seed_value: u64) -> f64 {
    let mut rng = seed::stream(seed_value, &[0x5ca1e]);
    let mut v: Vec<f64> = (0..op.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let nv = norm(&v);
        if nv == 0.0 {
            break;
        }
        v.iter_mut().for_each(|x| *x /= nv);
        let mut hv = op.apply(&v);
        for (h, x) in hv.iter_mut().zip(&v) {
            *h += damping * x;
        }
        lambda = dot(&v, &hv).abs();
        v = hv;
    }
    2.0 * lambda.max(damping)
}

/// Stochastic Neumann-series estimate. `stream` identifies the caller (for
/// example the query index) so independent solves draw independent samples.
pub fn ihvp_lissa(
    op: &dyn HessianOperator,
    g: &[f64],
    config: &LissaConfig,
    seed_value: u64,
    stream: u64,
) -> Result<Vec<f64>> {
    config.validate()?;
    check_dim(op, g)?;
    let scale = config
        .scale
        .unwrap_or_else(|| estimate_scale(op, config.damping, seed_value));
    let n = g.len();
    let mut total = vec![0.0; n];
    for repeat in 0..config.repeats {
        let mut rng = seed::stream(seed_value, &[stream, repeat as u64]);
        let mut v = g.to_vec();
        // samples are drawn without replacement, reshuffling after each pass
        let mut order: Vec<usize> = Vec::new();
        for step in 0..config.depth {
            if order.is_empty() {
                order = (0..op.n_samples()).collect();
                order.shuffle(&mut rng);
            }
            let s = order.pop().expect("refilled");
            let hv = op.apply_sample(s, &v);
            for i in 0..n {
                v[i] = g[i] + v[i] - (hv[i] + config.damping * v[i]) / scale;
            }
            let nv = norm(&v);
            if nv.is_nan() || nv > LISSA_DIVERGENCE_NORM {
                return Err(Error::Numerical(format!(
                    "LiSSA diverged at repeat {repeat}, step {step} (norm {nv:e}); raise the scale or the damping"
                )));
            }
        }
        for (t, x) in total.iter_mut().zip(&v) {
            *t += x;
        }
    }
    let denom = config.repeats as f64 * scale;
    Ok(total.into_iter().map(|x| x / denom).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_surrogate_closed_forms() {
        let op = ScaledIdentity { dim: 3, scale: 1.0 };
        let g = [1.0, -2.0, 0.5];
        let cg = ihvp_cg(&op, &g, 0.5, 1e-12, 10).unwrap();
        assert!(cg.iterations <= 2);
        for (v, gi) in cg.v.iter().zip(&g) {
            assert!((v - gi / 1.5).abs() < 1e-14);
        }
        let exact = ihvp_exact(&op, &g, 0.5).unwrap();
        for (v, gi) in exact.iter().zip(&g) {
            assert!((v - gi / 1.5).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let op = ScaledIdentity { dim: 4, scale: 2.0 };
        let cg = ihvp_cg(&op, &[0.0; 4], 1.0, 1e-8, 10).unwrap();
        assert_eq!(cg.iterations, 0);
        assert_eq!(cg.v, vec![0.0; 4]);
        let cfg = LissaConfig {
            depth: 1,
            repeats: 1,
            ..Default::default()
        };
        assert_eq!(
            ihvp_lissa(&op, &[0.0; 4], &cfg, 1, 0).unwrap(),
            vec![0.0; 4]
        );
    }

    #[test]
    fn lissa_fixed_point_on_identity() {
        // damping must be positive; one far below rounding acts as λ = 0,
        // so v_j = g + (1 − 1)v = g at every depth
        let op = ScaledIdentity { dim: 2, scale: 1.0 };
        for depth in [1, 5, 40] {
            let cfg = LissaConfig {
                damping: 1e-300,
                depth,
                repeats: 2,
                scale: Some(1.0),
            };
            let v = ihvp_lissa(&op, &[3.0, -1.0], &cfg, 0, 0).unwrap();
            assert!((v[0] - 3.0).abs() < 1e-12 && (v[1] + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn lissa_reports_divergence() {
        let op = ScaledIdentity {
            dim: 1,
            scale: 10.0,
        };
        let cfg = LissaConfig {
            damping: 1e-3,
            depth: 100,
            repeats: 1,
            scale: Some(1.0),
        };
        assert!(matches!(
            ihvp_lissa(&op, &[1.0], &cfg, 0, 0),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn exact_rejects_large_and_bad_damping() {
        let op = ScaledIdentity {
            dim: EXACT_MAX_PARAMS + 1,
            scale: 1.0,
        };
        assert!(matches!(
            DenseDampedHessian::assemble(&op, 1.0),
            Err(Error::Size(_))
        ));
        let small = ScaledIdentity { dim: 2, scale: 1.0 };
        assert!(matches!(
            ihvp_exact(&small, &[1.0, 1.0], 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn power_estimate_bounds_spectrum() {
        let op = ScaledIdentity { dim: 5, scale: 3.0 };
        let s = estimate_scale(&op, 0.5, 1);
        assert!((s - 7.0).abs() < 1e-9);
    }
}
