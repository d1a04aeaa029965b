//! Embedding matching alignment: single-layer encoders map both modalities into
//! a shared space, trained with a bidirectional in-batch contrastive loss over
//! cosine similarities plus a classification loss on the mapped visual rows.

use rand::Rng;

use crate::error::{Error, Result};
use crate::mlp::{leaky_relu, MlpParams, DEFAULT_SLOPE};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::{LossReport, ParamSet};

pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_SHARED_DIM: usize = 128;
/// Lower bound for a trainable temperature.
pub const MIN_TAU: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct EmaModel {
    pub visual: MlpParams,
    pub semantic: MlpParams,
    pub classifier: MlpParams,
    /// One-element tensor so it can be optimized alongside the weights.
    tau: Tensor,
    pub train_tau: bool,
    pub alpha1: f64,
    pub beta: f64,
}

impl EmaModel {
    pub fn new(
        visual: MlpParams,
        semantic: MlpParams,
        classifier: MlpParams,
        tau: f64,
        alpha1: f64,
        beta: f64,
    ) -> Result<Self> {
        for (name, m) in [("visual", &visual), ("semantic", &semantic)] {
            if m.layers().len() != 1 {
                return Err(Error::invalid(format!("{name} encoder must be one linear layer")));
            }
        }
        if visual.out_dim() != semantic.out_dim() {
            return Err(Error::shape(format!(
                "encoders map to {} and {} dims",
                visual.out_dim(),
                semantic.out_dim()
            )));
        }
        if classifier.in_dim() != visual.out_dim() {
            return Err(Error::shape(format!(
                "classifier takes {} features, shared dim is {}",
                classifier.in_dim(),
                visual.out_dim()
            )));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid(format!("temperature must be > 0, got {tau}")));
        }
        if !(alpha1 >= 0.0 && beta >= 0.0) {
            return Err(Error::invalid("loss weights must be >= 0"));
        }
        Ok(EmaModel {
            visual,
            semantic,
            classifier,
            tau: Tensor::scalar(tau),
            train_tau: false,
            alpha1,
            beta,
        })
    }

    pub fn init<R: Rng + ?Sized>(
        visual_dim: usize,
        semantic_dim: usize,
        shared_dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let visual = MlpParams::init(&[visual_dim, shared_dim], DEFAULT_SLOPE, rng)?;
        let semantic = MlpParams::init(&[semantic_dim, shared_dim], DEFAULT_SLOPE, rng)?;
        let classifier = MlpParams::init(&[shared_dim, classes], DEFAULT_SLOPE, rng)?;
        Self::new(visual, semantic, classifier, DEFAULT_TAU, 1.0, 1.0)
    }

    pub fn tau(&self) -> f64 {
        self.tau.data()[0]
    }

    pub fn shared_dim(&self) -> usize {
        self.visual.out_dim()
    }

    /// `leaky_relu(E_v x_v)`.
    pub fn encode_visual(&self, x_v: &Tensor) -> Result<Tensor> {
        leaky_relu(&self.visual.forward(x_v)?, self.visual.slope())
    }

    pub fn encode_semantic(&self, x_s: &Tensor) -> Result<Tensor> {
        leaky_relu(&self.semantic.forward(x_s)?, self.semantic.slope())
    }

    /// Class logits for raw visual rows.
    pub fn logits(&self, x_v: &Tensor) -> Result<Tensor> {
        self.classifier.forward(&self.encode_visual(x_v)?)
    }

    /// Splits taped parameter handles into (visual, semantic, classifier, tau).
    fn split<'a>(&self, vars: &'a [Var]) -> Result<(&'a [Var], &'a [Var], &'a [Var], Option<Var>)> {
        let expected = 6 + usize::from(self.train_tau);
        if vars.len() != expected {
            return Err(Error::invalid(format!(
                "expected {expected} parameter handles, got {}",
                vars.len()
            )));
        }
        Ok((&vars[0..2], &vars[2..4], &vars[4..6], vars.get(6).copied()))
    }

    /// Builds `L_EMA` on `tape` and returns it with the term breakdown.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x_v: &Tensor,
        x_s: &Tensor,
        labels: &[usize],
    ) -> Result<(Var, LossReport)> {
        let (vv, sv, cv, tau_var) = self.split(vars)?;
        let xv = tape.constant(x_v.clone());
        let xs = tape.constant(x_s.clone());
        let hv = self.visual.forward_tape(tape, vv, xv)?;
        let u = tape.leaky_relu(hv, self.visual.slope())?;
        let hs = self.semantic.forward_tape(tape, sv, xs)?;
        let v = tape.leaky_relu(hs, self.semantic.slope())?;
        let logits = self.classifier.forward_tape(tape, cv, u)?;
        let ce = tape.cross_entropy(logits, labels)?;
        let tau = match tau_var {
            Some(t) => TauHandle::Var(t),
            None => TauHandle::Fixed(self.tau()),
        };
        let ita = ita_on_tape(tape, u, v, tau)?;
        let a = tape.scale(ce, self.alpha1);
        let b = tape.scale(ita.ita, self.beta);
        let total = tape.add(a, b)?;
        let report = LossReport {
            ce: tape.value(ce).item()?,
            ita: Some(tape.value(ita.ita).item()?),
            mse: None,
            total: tape.value(total).item()?,
        };
        Ok((total, report))
    }
}

impl ParamSet for EmaModel {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut t = self.visual.tensors();
        t.extend(self.semantic.tensors());
        t.extend(self.classifier.tensors());
        if self.train_tau {
            t.push(&self.tau);
        }
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = self.visual.tensors_mut();
        t.extend(self.semantic.tensors_mut());
        t.extend(self.classifier.tensors_mut());
        if self.train_tau {
            t.push(&mut self.tau);
        }
        t
    }

    fn after_step(&mut self) {
        let tau = &mut self.tau.data_mut()[0];
        if *tau < MIN_TAU {
            *tau = MIN_TAU;
        }
    }
}

/// `(x_v', x_s')` for a batch.
pub fn ema_encode(model: &EmaModel, x_v: &Tensor, x_s: &Tensor) -> Result<(Tensor, Tensor)> {
    let u = model.encode_visual(x_v).map_err(|e| Error::DimMismatch(format!("visual: {e}")))?;
    let v = model
        .encode_semantic(x_s)
        .map_err(|e| Error::DimMismatch(format!("semantic: {e}")))?;
    Ok((u, v))
}

/// Cosine similarity of two nonzero vectors.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("cosine of {}- and {}-vectors", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine similarity".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ItaLosses {
    pub v2s: f64,
    pub s2v: f64,
    pub ita: f64,
}

#[derive(Debug, Clone, Copy)]
pub enum TauHandle {
    Fixed(f64),
    Var(Var),
}

#[derive(Debug, Clone, Copy)]
pub struct ItaVars {
    pub v2s: Var,
    pub s2v: Var,
    pub ita: Var,
}

/// Contrastive loss between the rows of `u` and `v` (matched by index).
pub fn ita_on_tape(tape: &mut Tape, u: Var, v: Var, tau: TauHandle) -> Result<ItaVars> {
    let sim = tape.cosine_sim(u, v)?;
    ita_from_similarity_on_tape(tape, sim, tau)
}

fn ita_from_similarity_on_tape(tape: &mut Tape, sim: Var, tau: TauHandle) -> Result<ItaVars> {
    let (rows, cols) = tape.value(sim).dims2()?;
    if rows != cols || rows == 0 {
        return Err(Error::shape(format!("similarity matrix must be square and nonempty, got {rows}x{cols}")));
    }
    let scaled = match tau {
        TauHandle::Fixed(t) => {
            if !(t > 0.0) {
                return Err(Error::invalid(format!("temperature must be > 0, got {t}")));
            }
            tape.scale(sim, 1.0 / t)
        }
        TauHandle::Var(t) => tape.div_scalar(sim, t)?,
    };
    let diag: Vec<usize> = (0..rows).collect();
    let v2s = tape.cross_entropy(scaled, &diag)?;
    let st = tape.transpose(scaled)?;
    let s2v = tape.cross_entropy(st, &diag)?;
    let ita = tape.add(v2s, s2v)?;
    Ok(ItaVars { v2s, s2v, ita })
}

/// `L_v2s`, `L_s2v` and their sum for `[B x d]` batches.
pub fn ita_loss(x_v: &Tensor, x_s: &Tensor, tau: f64) -> Result<ItaLosses> {
    let mut tape = Tape::new();
    let u = tape.constant(x_v.clone());
    let v = tape.constant(x_s.clone());
    let vars = ita_on_tape(&mut tape, u, v, TauHandle::Fixed(tau))?;
    read_ita(&tape, vars)
}

/// The same losses from a precomputed `[B x B]` similarity matrix.
pub fn ita_from_similarity(sim: &Tensor, tau: f64) -> Result<ItaLosses> {
    let mut tape = Tape::new();
    let s = tape.constant(sim.clone());
    let vars = ita_from_similarity_on_tape(&mut tape, s, TauHandle::Fixed(tau))?;
    read_ita(&tape, vars)
}

fn read_ita(tape: &Tape, vars: ItaVars) -> Result<ItaLosses> {
    Ok(ItaLosses {
        v2s: tape.value(vars.v2s).item()?,
        s2v: tape.value(vars.s2v).item()?,
        ita: tape.value(vars.ita).item()?,
    })
}

/// `L_EMA` on a labeled batch, plus `x_EMA = x_v'`.
pub fn ema_loss(
    model: &EmaModel,
    x_v: &Tensor,
    x_s: &Tensor,
    labels: &[usize],
) -> Result<(LossReport, Tensor)> {
    let mut tape = Tape::new();
    let vars = tape.params(0, model.tensors());
    let (_, report) = model.loss_on_tape(&mut tape, &vars, x_v, x_s, labels)?;
    Ok((report, model.encode_visual(x_v)?))
}

/// Mean cosine similarity of matched pairs and of mismatched pairs.
pub fn pair_similarity_gap(u: &Tensor, v: &Tensor) -> Result<(f64, f64)> {
    let n = u.rows();
    if n < 2 || v.rows() != n {
        return Err(Error::shape("need at least two matched rows"));
    }
    let (mut diag, mut off) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let c = cosine_sim(u.row(i), v.row(j))?;
            if i == j {
                diag += c;
            } else {
                off += c;
            }
        }
    }
    Ok((diag / n as f64, off / (n * (n - 1)) as f64))
}
