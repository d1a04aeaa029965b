//! Central finite-difference verification of taped gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct FdOptions {
    /// Perturbation half-width.
    pub h: f64,
    /// Maximum allowed relative error.
    pub tol: f64,
    /// Tensors larger than this are checked on this many sampled coordinates.
    pub coords_per_tensor: usize,
    /// Magnitude below which errors are measured absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            h: 1e-5,
            tol: 1e-4,
            coords_per_tensor: 64,
            floor: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub passed: bool,
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Parameter and flat index of the worst coordinate.
    pub worst: Option<(ParamId, usize)>,
}

/// Compares `backward` against `(f(θ+h) − f(θ−h)) / 2h` coordinate by coordinate.
///
/// `loss_fn` builds the loss on a fresh tape from parameter handles registered
/// as `ParamId(0..params.len())`.
pub fn finite_diff_check<F>(params: &[Tensor], loss_fn: F, opts: &FdOptions) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(opts.h > 0.0) || !(opts.tol > 0.0) {
        return Err(Error::invalid("finite differences need h > 0 and tol > 0"));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = tape.params(0, ps);
        let loss = loss_fn(&mut tape, &vars)?;
        let v = tape.value(loss).item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite("loss at perturbed point".into()));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars = tape.params(0, params);
    let loss = loss_fn(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut checked = 0;
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get(ParamId(pi)).expect("every parameter has a gradient");
        let coords: Vec<usize> = if p.len() <= opts.coords_per_tensor {
            (0..p.len()).collect()
        } else {
            let mut c = sample(&mut rng, p.len(), opts.coords_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        for c in coords {
            let orig = p.data()[c];
            work[pi].data_mut()[c] = orig + opts.h;
            let up = eval(&work)?;
            work[pi].data_mut()[c] = orig - opts.h;
            let down = eval(&work)?;
            work[pi].data_mut()[c] = orig;

            let numeric = (up - down) / (2.0 * opts.h);
            let a = analytic.data()[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if rel > max_rel || worst.is_none() {
                max_rel = max_rel.max(rel);
                worst = Some((ParamId(pi), c));
            }
            checked += 1;
        }
    }
    Ok(FdReport {
        passed: max_rel < opts.tol,
        max_rel_error: max_rel,
        coords_checked: checked,
        worst,
    })
}
