// the kernels index several parallel arrays with one loop variable
#![allow(clippy::needless_range_loop)]

use rayon::prelude::*;

use super::lora::LowRankAdaptation;
use super::params::{Layout, ParamVector};
use super::scalar::{Dual, Real};
use super::{BaseModel, Dims, ModelKind};
use crate::corpus::{Example, TokenId};
use crate::error::Result;

/// Probabilities are clamped here before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

const CHUNK: usize = 16;

/// Effective weights over some scalar type. Unused matrices are empty.
#[derive(Debug, Clone)]
struct Net<T> {
    kind: ModelKind,
    dims: Dims,
    e: Vec<T>,
    w1: Vec<T>,
    w2: Vec<T>,
    w: Vec<T>,
}

impl<T: Real> Net<T> {
    fn from_base(base: &BaseModel) -> Self {
        let conv = |name: &str| -> Vec<T> {
            base.weight(name)
                .map(|m| m.data.iter().map(|&x| T::from_f64(x)).collect())
                .unwrap_or_default()
        };
        Net {
            kind: base.kind(),
            dims: base.dims(),
            e: conv("E"),
            w1: conv("W1"),
            w2: conv("W2"),
            w: conv("W"),
        }
    }

    fn zeros_like(&self) -> Self {
        let z = |v: &Vec<T>| vec![T::zero(); v.len()];
        Net {
            kind: self.kind,
            dims: self.dims,
            e: z(&self.e),
            w1: z(&self.w1),
            w2: z(&self.w2),
            w: z(&self.w),
        }
    }

    fn matrix_mut(&mut self, name: &str) -> &mut Vec<T> {
        match name {
            "E" => &mut self.e,
            "W1" => &mut self.w1,
            "W2" => &mut self.w2,
            "W" => &mut self.w,
            other => panic!("unknown matrix {other}"),
        }
    }

    fn matrix(&self, name: &str) -> &[T] {
        match name {
            "E" => &self.e,
            "W1" => &self.w1,
            "W2" => &self.w2,
            "W" => &self.w,
            other => panic!("unknown matrix {other}"),
        }
    }

    fn add_assign(&mut self, other: &Net<T>) {
        for (a, b) in [
            (&mut self.e, &other.e),
            (&mut self.w1, &other.w1),
            (&mut self.w2, &other.w2),
            (&mut self.w, &other.w),
        ] {
            a.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
        }
    }
}

fn softmax<T: Real>(z: &[T]) -> Vec<T> {
    let m = z
        .iter()
        .map(|x| x.value())
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<T> = z.iter().map(|&x| (x - T::from_f64(m)).exp()).collect();
    let mut s = T::zero();
    for &x in &e {
        s += x;
    }
    e.into_iter().map(|x| x / s).collect()
}

/// Adds the gradient of `weight * mean_t(-ln p(y_t))` for one example to
/// `g` and returns the example's (unweighted) mean loss.
fn example_backward<T: Real>(
    net: &Net<T>,
    ex: &Example,
    weight: f64,
    g: &mut Net<T>,
    embed_grad: bool,
) -> f64 {
    match net.kind {
        ModelKind::MlpLm => mlp_backward(net, ex, weight, g, embed_grad),
        ModelKind::Convex => convex_backward(net, ex, weight, g),
    }
}

fn mlp_backward<T: Real>(
    net: &Net<T>,
    ex: &Example,
    weight: f64,
    g: &mut Net<T>,
    embed_grad: bool,
) -> f64 {
    let Dims {
        vocab: v,
        embed_dim: de,
        hidden_dim: dh,
        ..
    } = net.dims;
    let ny = ex.output.len();
    let w_pos = weight / ny as f64;
    let mut sum = vec![T::zero(); de];
    for &tok in &ex.input {
        for (s, &e) in sum.iter_mut().zip(&net.e[tok * de..(tok + 1) * de]) {
            *s += e;
        }
    }
    let mut loss = 0.0;
    let mut h = vec![T::zero(); dh];
    let mut z = vec![T::zero(); v];
    for t in 0..ny {
        let len = ex.input.len() + t;
        let inv = if len == 0 { 0.0 } else { 1.0 / len as f64 };
        let c: Vec<T> = sum.iter().map(|s| s.scale(inv)).collect();
        h.iter_mut().for_each(|x| *x = T::zero());
        for i in 0..de {
            let ci = c[i];
            for (hj, &w) in h.iter_mut().zip(&net.w1[i * dh..(i + 1) * dh]) {
                *hj += ci * w;
            }
        }
        h.iter_mut().for_each(|x| *x = x.tanh());
        z.iter_mut().for_each(|x| *x = T::zero());
        for j in 0..dh {
            let hj = h[j];
            for (zk, &w) in z.iter_mut().zip(&net.w2[j * v..(j + 1) * v]) {
                *zk += hj * w;
            }
        }
        let p = softmax(&z);
        let y = ex.output[t];
        loss -= p[y].value().max(PROB_FLOOR).ln();

        let mut dz = p;
        dz[y] = dz[y] - T::from_f64(1.0);
        dz.iter_mut().for_each(|x| *x = x.scale(w_pos));

        let mut da = vec![T::zero(); dh];
        for j in 0..dh {
            let hj = h[j];
            let row = &net.w2[j * v..(j + 1) * v];
            let grow = &mut g.w2[j * v..(j + 1) * v];
            let mut dhj = T::zero();
            for k in 0..v {
                grow[k] += hj * dz[k];
                dhj += row[k] * dz[k];
            }
            da[j] = dhj * (T::from_f64(1.0) - hj * hj);
        }
        for i in 0..de {
            let ci = c[i];
            for (gw, &d) in g.w1[i * dh..(i + 1) * dh].iter_mut().zip(&da) {
                *gw += ci * d;
            }
        }
        if embed_grad && len > 0 {
            let mut dc = vec![T::zero(); de];
            for i in 0..de {
                let mut acc = T::zero();
                for (&w, &d) in net.w1[i * dh..(i + 1) * dh].iter().zip(&da) {
                    acc += w * d;
                }
                dc[i] = acc.scale(inv);
            }
            for &tok in ex.input.iter().chain(&ex.output[..t]) {
                for (ge, &d) in g.e[tok * de..(tok + 1) * de].iter_mut().zip(&dc) {
                    *ge += d;
                }
            }
        }
        for (s, &e) in sum.iter_mut().zip(&net.e[y * de..(y + 1) * de]) {
            *s += e;
        }
    }
    loss / ny as f64
}

fn convex_features(dims: &Dims, context: impl Iterator<Item = TokenId>) -> Vec<f64> {
    let mut phi = vec![0.0; dims.feature_dim];
    let mut n = 0usize;
    for tok in context {
        phi[tok % dims.feature_dim] += 1.0;
        n += 1;
    }
    if n > 0 {
        phi.iter_mut().for_each(|x| *x /= n as f64);
    }
    phi
}

fn convex_backward<T: Real>(net: &Net<T>, ex: &Example, weight: f64, g: &mut Net<T>) -> f64 {
    let v = net.dims.vocab;
    let ny = ex.output.len();
    let w_pos = weight / ny as f64;
    let mut loss = 0.0;
    for t in 0..ny {
        let phi = convex_features(&net.dims, ex.input.iter().chain(&ex.output[..t]).copied());
        let mut z = vec![T::zero(); v];
        for (f, &pf) in phi.iter().enumerate() {
            if pf == 0.0 {
                continue;
            }
            for (zk, &w) in z.iter_mut().zip(&net.w[f * v..(f + 1) * v]) {
                *zk += w.scale(pf);
            }
        }
        let p = softmax(&z);
        let y = ex.output[t];
        loss -= p[y].value().max(PROB_FLOOR).ln();
        let mut dz = p;
        dz[y] = dz[y] - T::from_f64(1.0);
        for (f, &pf) in phi.iter().enumerate() {
            if pf == 0.0 {
                continue;
            }
            for (gw, &d) in g.w[f * v..(f + 1) * v].iter_mut().zip(&dz) {
                *gw += d.scale(pf * w_pos);
            }
        }
    }
    loss / ny as f64
}

/// Mean loss and gradient of the mean loss with respect to effective weights.
fn accumulate<T: Real>(net: &Net<T>, batch: &[Example], embed_grad: bool) -> (f64, Net<T>) {
    let weight = 1.0 / batch.len() as f64;
    let partials: Vec<(f64, Net<T>)> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = net.zeros_like();
            let loss: f64 = chunk
                .iter()
                .map(|ex| example_backward(net, ex, weight, &mut g, embed_grad))
                .sum();
            (loss, g)
        })
        .collect();
    let mut iter = partials.into_iter();
    let (mut loss, mut g) = iter.next().expect("nonempty batch");
    for (l, part) in iter {
        loss += l;
        g.add_assign(&part);
    }
    (loss * weight, g)
}

/// Frozen effective model for evaluation and decoding.
#[derive(Debug, Clone)]
pub struct InferenceModel {
    net: Net<f64>,
}

impl InferenceModel {
    pub fn new(base: &BaseModel, adaptation: Option<&LowRankAdaptation>) -> Result<Self> {
        let d = Differentiable::new(base, adaptation)?;
        Ok(InferenceModel { net: d.net })
    }

    pub fn vocab_size(&self) -> usize {
        self.net.dims.vocab
    }

    /// Next-token distribution after `context`; an empty context yields the
    /// distribution at the zero context vector.
    pub fn next_distribution(&self, context: &[TokenId]) -> Vec<f64> {
        let net = &self.net;
        let v = net.dims.vocab;
        let z = match net.kind {
            ModelKind::MlpLm => {
                let Dims {
                    embed_dim: de,
                    hidden_dim: dh,
                    ..
                } = net.dims;
                let mut c = vec![0.0; de];
                for &tok in context {
                    for (ci, &e) in c.iter_mut().zip(&net.e[tok * de..(tok + 1) * de]) {
                        *ci += e;
                    }
                }
                if !context.is_empty() {
                    let inv = 1.0 / context.len() as f64;
                    c.iter_mut().for_each(|x| *x *= inv);
                }
                let mut h = vec![0.0; dh];
                for i in 0..de {
                    for (hj, &w) in h.iter_mut().zip(&net.w1[i * dh..(i + 1) * dh]) {
                        *hj += c[i] * w;
                    }
                }
                let mut z = vec![0.0; v];
                for j in 0..dh {
                    let hj = h[j].tanh();
                    for (zk, &w) in z.iter_mut().zip(&net.w2[j * v..(j + 1) * v]) {
                        *zk += hj * w;
                    }
                }
                z
            }
            ModelKind::Convex => {
                let phi = convex_features(&net.dims, context.iter().copied());
                let mut z = vec![0.0; v];
                for (f, &pf) in phi.iter().enumerate() {
                    for (zk, &w) in z.iter_mut().zip(&net.w[f * v..(f + 1) * v]) {
                        *zk += pf * w;
                    }
                }
                z
            }
        };
        softmax(&z)
    }

    /// Distributions for each position of `output` under teacher forcing.
    pub fn teacher_forced(&self, input: &[TokenId], output: &[TokenId]) -> Vec<Vec<f64>> {
        let mut ctx = input.to_vec();
        let mut out = Vec::with_capacity(output.len());
        for &y in output {
            out.push(self.next_distribution(&ctx));
            ctx.push(y);
        }
        out
    }
}

/// Trainable view over a base model and an optional adaptation. Without an
/// adaptation every base weight is trainable; with one, only its factors.
///
/// Token ids are not checked here and out-of-range ids panic; the free
/// functions in [`crate::model`] validate batches first.
#[derive(Debug, Clone)]
pub struct Differentiable<'a> {
    base: &'a BaseModel,
    adaptation: Option<&'a LowRankAdaptation>,
    layout: Layout,
    params: Vec<f64>,
    net: Net<f64>,
}

impl<'a> Differentiable<'a> {
    pub fn new(base: &'a BaseModel, adaptation: Option<&'a LowRankAdaptation>) -> Result<Self> {
        let mut layout = Layout::default();
        let mut params = Vec::new();
        match adaptation {
            None => {
                for (name, m) in base.weights() {
                    layout.push(name.clone(), m.rows, m.cols);
                    params.extend_from_slice(&m.data);
                }
            }
            Some(a) => {
                for (name, f) in a.factors() {
                    layout.push(format!("{name}.A"), f.a.rows, f.a.cols);
                    params.extend_from_slice(&f.a.data);
                    layout.push(format!("{name}.B"), f.b.rows, f.b.cols);
                    params.extend_from_slice(&f.b.data);
                }
            }
        }
        let net = build_net(base, adaptation, &layout, &params);
        Ok(Differentiable {
            base,
            adaptation,
            layout,
            params,
            net,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> ParamVector {
        ParamVector {
            layout: self.layout.clone(),
            values: self.params.clone(),
        }
    }

    pub fn param_values(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.params.len(), "parameter count mismatch");
        self.params.copy_from_slice(values);
        self.net = build_net(self.base, self.adaptation, &self.layout, &self.params);
    }

    pub fn inference(&self) -> InferenceModel {
        InferenceModel {
            net: self.net.clone(),
        }
    }

    fn embed_grad(&self) -> bool {
        match self.adaptation {
            None => self.base.kind() == ModelKind::MlpLm,
            Some(a) => a.factors().contains_key("E"),
        }
    }

    pub fn loss(&self, ex: &Example) -> f64 {
        self.inference()
            .teacher_forced(&ex.input, &ex.output)
            .iter()
            .zip(&ex.output)
            .map(|(p, &y)| -p[y].max(PROB_FLOOR).ln())
            .sum::<f64>()
            / ex.output.len() as f64
    }

    pub fn mean_loss(&self, batch: &[Example]) -> f64 {
        let inf = self.inference();
        let total: f64 = batch
            .par_iter()
            .map(|ex| {
                inf.teacher_forced(&ex.input, &ex.output)
                    .iter()
                    .zip(&ex.output)
                    .map(|(p, &y)| -p[y].max(PROB_FLOOR).ln())
                    .sum::<f64>()
                    / ex.output.len() as f64
            })
            .collect::<Vec<_>>()
            .iter()
            .sum();
        total / batch.len() as f64
    }

    /// Mean batch loss together with its gradient.
    pub fn loss_and_grad(&self, batch: &[Example]) -> (f64, Vec<f64>) {
        let (loss, g) = accumulate(&self.net, batch, self.embed_grad());
        (
            loss,
            project(self.adaptation, &self.layout, &self.params, &g),
        )
    }

    pub fn grad(&self, batch: &[Example]) -> ParamVector {
        let (_, values) = self.loss_and_grad(batch);
        ParamVector {
            layout: self.layout.clone(),
            values,
        }
    }

    /// Gradient of a single example's loss.
    pub fn example_grad(&self, ex: &Example) -> Vec<f64> {
        let mut g = self.net.zeros_like();
        example_backward(&self.net, ex, 1.0, &mut g, self.embed_grad());
        project(self.adaptation, &self.layout, &self.params, &g)
    }

    pub fn hvp_values(&self, batch: &[Example], v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.params.len(), "vector length mismatch");
        let dual: Vec<Dual> = self
            .params
            .iter()
            .zip(v)
            .map(|(&p, &t)| Dual::new(p, t))
            .collect();
        let net = build_net(self.base, self.adaptation, &self.layout, &dual);
        let (_, g) = accumulate(&net, batch, self.embed_grad());
        project(self.adaptation, &self.layout, &dual, &g)
            .into_iter()
            .map(|d| d.eps)
            .collect()
    }

    pub fn hvp(&self, batch: &[Example], v: &[f64]) -> ParamVector {
        ParamVector {
            layout: self.layout.clone(),
            values: self.hvp_values(batch, v),
        }
    }

    /// The base model with current parameters (only meaningful without an
    /// adaptation; otherwise returns the frozen base unchanged).
    pub fn base_model(&self) -> BaseModel {
        let mut out = self.base.clone();
        if self.adaptation.is_none() {
            for entry in self.layout.entries() {
                let m = out
                    .weight_mut(&entry.name)
                    .expect("layout names come from the base");
                m.data.copy_from_slice(&self.params[entry.range()]);
            }
        }
        out
    }

    /// The adaptation with current factor values.
    pub fn adaptation(&self) -> Option<LowRankAdaptation> {
        let mut out = self.adaptation?.clone();
        for (name, f) in out.factors_mut() {
            let a = self
                .layout
                .entry(&format!("{name}.A"))
                .expect("factor in layout");
            f.a.data.copy_from_slice(&self.params[a.range()]);
            let b = self
                .layout
                .entry(&format!("{name}.B"))
                .expect("factor in layout");
            f.b.data.copy_from_slice(&self.params[b.range()]);
        }
        Some(out)
    }
}

fn build_net<T: Real>(
    base: &BaseModel,
    adaptation: Option<&LowRankAdaptation>,
    layout: &Layout,
    params: &[T],
) -> Net<T> {
    let mut net = Net::<T>::from_base(base);
    match adaptation {
        None => {
            for entry in layout.entries() {
                net.matrix_mut(&entry.name)
                    .copy_from_slice(&params[entry.range()]);
            }
        }
        Some(a) => {
            let s = a.scaling();
            let r = a.rank();
            for (name, f) in a.factors() {
                let (din, dout) = (f.a.cols, f.b.rows);
                let av = &params[layout.entry(&format!("{name}.A")).expect("factor").range()];
                let bv = &params[layout.entry(&format!("{name}.B")).expect("factor").range()];
                let w = net.matrix_mut(name);
                for i in 0..din {
                    for j in 0..dout {
                        let mut acc = T::zero();
                        for k in 0..r {
                            acc += av[k * din + i] * bv[j * r + k];
                        }
                        w[i * dout + j] += acc.scale(s);
                    }
                }
            }
        }
    }
    net
}

/// Chains effective-weight gradients back to the trainable parameters.
fn project<T: Real>(
    adaptation: Option<&LowRankAdaptation>,
    layout: &Layout,
    params: &[T],
    g: &Net<T>,
) -> Vec<T> {
    let mut out = vec![T::zero(); layout.len()];
    match adaptation {
        None => {
            for entry in layout.entries() {
                out[entry.range()].copy_from_slice(g.matrix(&entry.name));
            }
        }
        Some(a) => {
            let s = a.scaling();
            let r = a.rank();
            for (name, f) in a.factors() {
                let (din, dout) = (f.a.cols, f.b.rows);
                let ea = layout.entry(&format!("{name}.A")).expect("factor");
                let eb = layout.entry(&format!("{name}.B")).expect("factor");
                let gm = g.matrix(name);
                let (av, bv) = (&params[ea.range()], &params[eb.range()]);
                let mut da = vec![T::zero(); ea.len()];
                let mut db = vec![T::zero(); eb.len()];
                for i in 0..din {
                    for j in 0..dout {
                        let gij = gm[i * dout + j];
                        for k in 0..r {
                            da[k * din + i] += bv[j * r + k] * gij;
                            db[j * r + k] += av[k * din + i] * gij;
                        }
                    }
                }
                for (o, d) in out[ea.range()].iter_mut().zip(da) {
                    *o = d.scale(s);
                }
                for (o, d) in out[eb.range()].iter_mut().zip(db) {
                    *o = d.scale(s);
                }
            }
        }
    }
    out
}
