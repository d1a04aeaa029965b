//! Fusion of the two branch outputs, the linear classification head, and the
//! evaluation metrics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::MlpParams;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_HM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionStrategy {
    #[default]
    Concat,
    Add,
    /// Same operation as `Add`, kept as a separate name.
    Sum,
    Mul,
    /// Elementwise `2ab / (a + b + ε)`.
    Hm,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 5] = [
        FusionStrategy::Concat,
        FusionStrategy::Add,
        FusionStrategy::Sum,
        FusionStrategy::Mul,
        FusionStrategy::Hm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::Concat => "concat",
            FusionStrategy::Add => "add",
            FusionStrategy::Sum => "sum",
            FusionStrategy::Mul => "mul",
            FusionStrategy::Hm => "hm",
        }
    }

    /// Fused width for operand widths `a` and `b`.
    pub fn output_dim(self, a: usize, b: usize) -> Result<usize> {
        match self {
            FusionStrategy::Concat => Ok(a + b),
            _ if a == b => Ok(a),
            s => Err(Error::DimMismatch(format!(
                "{} fusion needs equal widths, got {a} and {b}",
                s.name()
            ))),
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionStrategy::ALL
            .into_iter()
            .find(|f| f.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown fusion strategy {s:?} (concat, add, sum, mul, hm)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub strategy: FusionStrategy,
    pub eps: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            strategy: FusionStrategy::Concat,
            eps: DEFAULT_HM_EPS,
        }
    }
}

impl FusionConfig {
    pub fn new(strategy: FusionStrategy) -> Self {
        FusionConfig {
            strategy,
            ..Self::default()
        }
    }
}

/// `x_f = a ⊕ b`, row by row. Concat keeps the order `[a ‖ b]`.
pub fn fuse(a: &Tensor, b: &Tensor, cfg: &FusionConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let bv = tape.constant(b.clone());
    let out = fuse_on_tape(&mut tape, av, bv, cfg)?;
    Ok(tape.value(out).clone())
}

pub fn fuse_on_tape(tape: &mut Tape, a: Var, b: Var, cfg: &FusionConfig) -> Result<Var> {
    let (ra, da) = tape.value(a).dims2()?;
    let (rb, db) = tape.value(b).dims2()?;
    if ra != rb || tape.value(a).rank() != tape.value(b).rank() {
        return Err(Error::DimMismatch(format!(
            "fusion operands {:?} and {:?}",
            tape.value(a).shape(),
            tape.value(b).shape()
        )));
    }
    cfg.strategy.output_dim(da, db)?;
    match cfg.strategy {
        FusionStrategy::Concat => tape.concat(&[a, b]),
        FusionStrategy::Add | FusionStrategy::Sum => tape.add(a, b),
        FusionStrategy::Mul => tape.mul(a, b),
        FusionStrategy::Hm => tape.harmonic_mean(a, b, cfg.eps),
    }
}

/// Logits of a single affine head.
pub fn classify(head: &MlpParams, x_f: &Tensor) -> Result<Tensor> {
    if head.layers().len() != 1 {
        return Err(Error::invalid("classification head must be one affine layer"));
    }
    let cols = x_f.dims2()?.1;
    if cols != head.in_dim() {
        return Err(Error::DimMismatch(format!(
            "head expects {} features, got {cols}",
            head.in_dim()
        )));
    }
    head.forward(x_f)
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let (rows, classes) = logits.dims2()?;
    if rows != labels.len() {
        return Err(Error::shape(format!("{rows} logit rows but {} labels", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok((rows, classes))
}

fn log_softmax_at(row: &[f64], k: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row[k] - lse
}

/// Mean negative log-softmax of the true class.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (rows, _) = check_labels(logits, labels)?;
    if rows == 0 {
        return Err(Error::invalid("cross entropy of an empty batch"));
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(r, &y)| -log_softmax_at(logits.row(r), y))
        .sum();
    Ok(total / rows as f64)
}

/// Class indices of a row ordered by descending logit; ties keep the lower index first.
fn ranking(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&i, &j| row[j].total_cmp(&row[i]).then(i.cmp(&j)));
    idx
}

/// Fraction of rows whose label is among the `k` largest logits.
pub fn topk_accuracy(logits: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let (rows, classes) = check_labels(logits, labels)?;
    if k == 0 || k > classes {
        return Err(Error::invalid(format!("k = {k} outside 1..={classes}")));
    }
    if rows == 0 {
        return Ok(0.0);
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(r, &y)| hit(logits.row(*r), y, k))
        .count();
    Ok(hits as f64 / rows as f64)
}

fn hit(row: &[f64], y: usize, k: usize) -> bool {
    // rank of y = number of classes ordered strictly before it
    let before = row
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > row[y] || (v == row[y] && j < y))
        .count();
    before < k
}

/// Top-1/top-5 accuracy, mean max-softmax confidence and per-class top-1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub top5: f64,
    pub confidence_mean: f64,
    /// `None` for classes absent from the evaluated rows.
    pub per_class: Vec<Option<f64>>,
}

pub const REPORT_FORMAT_VERSION: u32 = 1;

impl EvalReport {
    /// Top-5 uses `k = min(5, C)`.
    pub fn from_logits(logits: &Tensor, labels: &[usize]) -> Result<Self> {
        let (rows, classes) = check_labels(logits, labels)?;
        if rows == 0 {
            return Err(Error::invalid("evaluation on zero rows"));
        }
        let top1 = topk_accuracy(logits, labels, 1)?;
        let top5 = topk_accuracy(logits, labels, classes.min(5))?;
        let mut conf = 0.0;
        let mut hits = vec![0usize; classes];
        let mut counts = vec![0usize; classes];
        for (r, &y) in labels.iter().enumerate() {
            let row = logits.row(r);
            let best = ranking(row)[0];
            conf += log_softmax_at(row, best).exp();
            counts[y] += 1;
            if best == y {
                hits[y] += 1;
            }
        }
        let per_class = hits
            .iter()
            .zip(&counts)
            .map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64))
            .collect();
        Ok(EvalReport {
            top1,
            top5,
            confidence_mean: conf / rows as f64,
            per_class,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        v["format_version"] = REPORT_FORMAT_VERSION.into();
        Ok(serde_json::to_string_pretty(&v)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Flat `key = value` lines.
    pub fn to_kv(&self) -> String {
        let mut out = format!(
            "format_version = {REPORT_FORMAT_VERSION}\ntop1 = {}\ntop5 = {}\nconfidence_mean = {}\n",
            self.top1, self.top5, self.confidence_mean
        );
        for (c, acc) in self.per_class.iter().enumerate() {
            match acc {
                Some(a) => out.push_str(&format!("per_class.{c} = {a}\n")),
                None => out.push_str(&format!("per_class.{c} = none\n")),
            }
        }
        out
    }
}
