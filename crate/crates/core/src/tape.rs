//! Reverse-mode differentiation over a fixed operation vocabulary.
//!
//! A [`Tape`] evaluates eagerly: every op computes its value when recorded, and
//! [`Tape::backward`] walks the records in reverse to accumulate gradients for
//! the registered parameters. Constants (data, labels, noise draws) are leaves
//! that never receive gradients.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identity of a trainable parameter; gradients are keyed by it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Affine { x: Var, w: Var, b: Var },
    LeakyRelu { x: Var, slope: f64 },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    HarmonicMean { a: Var, b: Var, eps: f64 },
    Scale { x: Var, c: f64 },
    DivScalar { x: Var, s: Var },
    Concat(Vec<Var>),
    Transpose(Var),
    CosineSim { a: Var, b: Var, a_norms: Vec<f64>, b_norms: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    SquaredError { pred: Var, target: Var },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every registered parameter.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_param: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.by_param.insert(id, grad);
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a trainable parameter (copied onto the tape).
    pub fn param(&mut self, id: ParamId, value: &Tensor) -> Var {
        self.push(value.clone(), Op::Param(id), true)
    }

    /// Registers tensors as parameters `ParamId(offset)..`, in order.
    pub fn params<'a>(
        &mut self,
        offset: usize,
        tensors: impl IntoIterator<Item = &'a Tensor>,
    ) -> Vec<Var> {
        tensors
            .into_iter()
            .enumerate()
            .map(|(i, t)| self.param(ParamId(offset + i), t))
            .collect()
    }

    /// `x W + b` with `x: [B x in]` (or `[in]`), `W: [in x out]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let (rows, inp) = xv.dims2()?;
        let (win, out) = match wv.shape() {
            [i, o] => (*i, *o),
            s => return Err(Error::shape(format!("affine weight must be 2-D, got {s:?}"))),
        };
        if inp != win {
            return Err(Error::shape(format!(
                "affine input has {inp} features, weight expects {win}"
            )));
        }
        if bv.shape() != [out] {
            return Err(Error::shape(format!(
                "affine bias shape {:?}, expected [{out}]",
                bv.shape()
            )));
        }
        let mut data = Vec::with_capacity(rows * out);
        for _ in 0..rows {
            data.extend_from_slice(bv.data());
        }
        gemm(rows, inp, out, xv.data(), false, wv.data(), false, &mut data, 1.0);
        let shape = if xv.rank() == 1 { vec![out] } else { vec![rows, out] };
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Affine { x, w, b }, rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0) {
            return Err(Error::invalid(format!("leaky-relu slope must be > 0, got {slope}")));
        }
        let xv = self.value(x);
        xv.ensure_finite("leaky_relu input")?;
        let value = xv.map(|v| if v >= 0.0 { v } else { slope * v });
        let rg = self.rg(x);
        Ok(self.push(value, Op::LeakyRelu { x, slope }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Elementwise `2ab / (a + b + eps)`.
    pub fn harmonic_mean(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let value = self
            .value(a)
            .zip_map(self.value(b), |x, y| 2.0 * x * y / (x + y + eps))?;
        value.ensure_finite("harmonic mean")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::HarmonicMean { a, b, eps }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, c }, rg)
    }

    /// Divides every element by a one-element tensor.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        if sv == 0.0 {
            return Err(Error::invalid("division by zero scalar"));
        }
        let value = self.value(x).map(|v| v / sv);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(value, Op::DivScalar { x, s }, rg))
    }

    /// Concatenates along the last axis. Operands must agree in row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let first = self.value(parts[0]);
        let vector = first.rank() == 1;
        let rows = first.dims2()?.0;
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if (v.rank() == 1) != vector || v.dims2()?.0 != rows {
                return Err(Error::shape(format!(
                    "concat operands {:?} and {:?}",
                    first.shape(),
                    v.shape()
                )));
            }
            total += v.dims2()?.1;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let shape = if vector { vec![total] } else { vec![rows, total] };
        let value = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    /// Pairwise cosine similarities between the rows of `a` and `b`.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (ra, da) = av.dims2()?;
        let (rb, db) = bv.dims2()?;
        if da != db {
            return Err(Error::shape(format!(
                "cosine similarity between {da}- and {db}-dim rows"
            )));
        }
        let a_norms = row_norms(av, "cosine similarity (first operand)")?;
        let b_norms = row_norms(bv, "cosine similarity (second operand)")?;
        let mut s = vec![0.0; ra * rb];
        gemm(ra, da, rb, av.data(), false, bv.data(), true, &mut s, 0.0);
        for i in 0..ra {
            for j in 0..rb {
                s[i * rb + j] /= a_norms[i] * b_norms[j];
            }
        }
        let value = Tensor::matrix(ra, rb, s)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            value,
            Op::CosineSim {
                a,
                b,
                a_norms,
                b_norms,
            },
            rg,
        ))
    }

    /// Softmax cross-entropy averaged over rows of `[B x C]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, classes) = lv.dims2()?;
        if rows != labels.len() {
            return Err(Error::shape(format!(
                "{rows} logit rows but {} labels",
                labels.len()
            )));
        }
        if rows == 0 {
            return Err(Error::invalid("cross-entropy over an empty batch"));
        }
        lv.ensure_finite("logits")?;
        let mut probs = Vec::with_capacity(rows * classes);
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(Error::LabelOutOfRange { label: y, classes });
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            loss += log_z - row[y];
            probs.extend(row.iter().map(|&v| (v - log_z).exp()));
        }
        let value = Tensor::scalar(loss / rows as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean over rows of the squared L2 distance between `pred` and `target`.
    pub fn squared_error(&mut self, pred: Var, target: Var) -> Result<Var> {
        let pv = self.value(pred);
        let tv = self.value(target);
        if pv.shape() != tv.shape() {
            return Err(Error::shape(format!(
                "squared error between {:?} and {:?}",
                pv.shape(),
                tv.shape()
            )));
        }
        let rows = pv.dims2()?.0;
        let sse: f64 = pv
            .data()
            .iter()
            .zip(tv.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let value = Tensor::scalar(sse / rows as f64);
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(value, Op::SquaredError { pred, target }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    /// Gradients of `loss` with respect to every parameter on the tape.
    /// Parameters the loss does not reach get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        lv.ensure_finite("loss")?;
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Param(_) = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }

        let mut out = Gradients::default();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                let g = grads
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                match out.by_param.get_mut(&id) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.by_param.insert(id, g);
                    }
                }
            }
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, delta: Tensor| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Affine { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (rows, inp) = xv.dims2()?;
                let out = wv.shape()[1];
                if self.rg(*x) {
                    let mut dx = vec![0.0; rows * inp];
                    gemm(rows, out, inp, g.data(), false, wv.data(), true, &mut dx, 0.0);
                    acc(*x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; inp * out];
                    gemm(inp, rows, out, xv.data(), true, g.data(), false, &mut dw, 0.0);
                    acc(*w, Tensor::matrix(inp, out, dw)?);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; out];
                    for r in 0..rows {
                        for (d, gv) in db.iter_mut().zip(&g.data()[r * out..(r + 1) * out]) {
                            *d += gv;
                        }
                    }
                    acc(*b, Tensor::vector(db));
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x);
                let d = xv.zip_map(g, |v, gv| if v >= 0.0 { gv } else { slope * gv })?;
                acc(*x, d);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                acc(*a, g.zip_map(bv, |gv, y| gv * y)?);
                acc(*b, g.zip_map(av, |gv, x| gv * x)?);
            }
            Op::HarmonicMean { a, b, eps } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                // d/da 2ab/(a+b+e) = 2b(b+e)/(a+b+e)^2
                let da = av.zip_map(bv, |x, y| {
                    let s = x + y + eps;
                    2.0 * y * (y + eps) / (s * s)
                })?;
                let db = av.zip_map(bv, |x, y| {
                    let s = x + y + eps;
                    2.0 * x * (x + eps) / (s * s)
                })?;
                acc(*a, g.zip_map(&da, |gv, d| gv * d)?);
                acc(*b, g.zip_map(&db, |gv, d| gv * d)?);
            }
            Op::Scale { x, c } => acc(*x, g.map(|v| v * c)),
            Op::DivScalar { x, s } => {
                let sv = self.value(*s).item()?;
                acc(*x, g.map(|v| v / sv));
                if self.rg(*s) {
                    let xv = self.value(*x);
                    let dot: f64 = g.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                    let shape = self.value(*s).shape().to_vec();
                    acc(*s, Tensor::new(shape, vec![-dot / (sv * sv)])?);
                }
            }
            Op::Concat(parts) => {
                let rows = g.dims2()?.0;
                let total = g.dims2()?.1;
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.dims2()?.1;
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    acc(p, Tensor::new(pv.shape().to_vec(), d)?);
                }
            }
            Op::Transpose(x) => acc(*x, g.transpose()?),
            Op::CosineSim {
                a,
                b,
                a_norms,
                b_norms,
            } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let s = &node.value;
                let (ra, d) = av.dims2()?;
                let rb = bv.dims2()?.0;
                let a_hat = normalize_rows(av, a_norms);
                let b_hat = normalize_rows(bv, b_norms);
                // row weights: sum_j G_ij S_ij and sum_i G_ij S_ij
                let gs = g.zip_map(s, |x, y| x * y)?;
                if self.rg(*a) {
                    let mut da = vec![0.0; ra * d];
                    gemm(ra, rb, d, g.data(), false, &b_hat, false, &mut da, 0.0);
                    for i in 0..ra {
                        let w: f64 = gs.row(i).iter().sum();
                        for k in 0..d {
                            da[i * d + k] = (da[i * d + k] - w * a_hat[i * d + k]) / a_norms[i];
                        }
                    }
                    acc(*a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; rb * d];
                    gemm(rb, ra, d, g.data(), true, &a_hat, false, &mut db, 0.0);
                    for j in 0..rb {
                        let w: f64 = (0..ra).map(|i| gs.data()[i * rb + j]).sum();
                        for k in 0..d {
                            db[j * d + k] = (db[j * d + k] - w * b_hat[j * d + k]) / b_norms[j];
                        }
                    }
                    acc(*b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let lv = self.value(*logits);
                let (rows, classes) = lv.dims2()?;
                let scale = g.item()? / rows as f64;
                let mut d = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    d[r * classes + y] -= 1.0;
                }
                for v in &mut d {
                    *v *= scale;
                }
                acc(*logits, Tensor::new(lv.shape().to_vec(), d)?);
            }
            Op::SquaredError { pred, target } => {
                let pv = self.value(*pred);
                let tv = self.value(*target);
                let rows = pv.dims2()?.0;
                let scale = 2.0 * g.item()? / rows as f64;
                let d = pv.zip_map(tv, |p, t| scale * (p - t))?;
                acc(*target, d.map(|v| -v));
                acc(*pred, d);
            }
            Op::Sum(x) => {
                let gv = g.item()?;
                acc(*x, Tensor::full(self.value(*x).shape(), gv));
            }
        }
        Ok(())
    }
}

fn row_norms(t: &Tensor, context: &str) -> Result<Vec<f64>> {
    let (rows, _) = t.dims2()?;
    (0..rows)
        .map(|r| {
            let n = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if !n.is_finite() {
                Err(Error::NonFinite(context.to_string()))
            } else if n == 0.0 {
                Err(Error::ZeroNorm(format!("{context}, row {r}")))
            } else {
                Ok(n)
            }
        })
        .collect()
}

fn normalize_rows(t: &Tensor, norms: &[f64]) -> Vec<f64> {
    let c = t.cols();
    let mut out = t.data().to_vec();
    for (r, n) in norms.iter().enumerate() {
        for v in &mut out[r * c..(r + 1) * c] {
            *v /= n;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_loss_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(ParamId(0), &Tensor::scalar(0.7));
        let x = tape.constant(Tensor::scalar(3.0));
        let loss = tape.mul(w, x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().item().unwrap(), 3.0);
    }

    #[test]
    fn quadratic_loss_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(ParamId(0), &Tensor::vector(vec![1.0, 2.0]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreached_params_get_zero_gradients() {
        let mut tape = Tape::new();
        let w = tape.param(ParamId(0), &Tensor::vector(vec![1.0, 2.0]));
        let _unused = tape.param(ParamId(1), &Tensor::zeros(&[2, 3]));
        let loss = tape.sum(w);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(ParamId(1)).unwrap(), &Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(ParamId(0), &Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn cosine_of_zero_row_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[[0.0, 0.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[[1.0, 0.0]]).unwrap());
        assert!(matches!(tape.cosine_sim(a, b), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn shared_parameter_gradients_accumulate() {
        // loss = sum(w * w) registered twice under one id
        let mut tape = Tape::new();
        let w1 = tape.param(ParamId(0), &Tensor::vector(vec![1.0, -2.0]));
        let w2 = tape.param(ParamId(0), &Tensor::vector(vec![1.0, -2.0]));
        let p = tape.mul(w1, w2).unwrap();
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[2.0, -4.0]);
    }
}
