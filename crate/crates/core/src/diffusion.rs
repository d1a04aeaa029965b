//! Conditional diffusion reconstruction of semantic embeddings.
//!
//! Semantic rows are noised with a linear-β forward process. A four-layer
//! denoiser sees `concat(x_t, x_v, temb(t))` and predicts the clean row
//! directly. At inference x_CDR is drawn by ancestral sampling from pure noise,
//! guided by the visual row.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::mlp::{MlpParams, DEFAULT_SLOPE};
use crate::par::{map_indexed, ExecMode};
use crate::seed::{derive_indexed, rng_from};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::{LossReport, ParamSet};

pub const DEFAULT_STEPS: usize = 200;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.1;
pub const DEFAULT_TIME_DIM: usize = 64;
pub const DEFAULT_HIDDEN: usize = 512;
/// Rows per work item when sampling a batch.
pub const SAMPLE_CHUNK: usize = 64;

/// Precomputed schedule arrays, indexed by step `t` in `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
    beta_start: f64,
    beta_end: f64,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_start, self.beta_end)
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// Panics unless `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// Cumulative product; defined for `0 <= t <= T` with value 1 at 0.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Posterior variance; zero at `t = 1`.
    pub fn beta_hat(&self, t: usize) -> f64 {
        self.posterior_vars[t - 1]
    }

    /// Coefficients `(c0, ct)` of the posterior mean `c0 x̂0 + ct x_t`.
    pub fn posterior_coefs(&self, t: usize) -> Result<(f64, f64)> {
        self.check(t)?;
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let c0 = ab_prev.sqrt() * self.beta(t) / (1.0 - ab);
        let ct = self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        Ok((c0, ct))
    }
}

/// Linear β from `beta_start` to `beta_end` over `steps` steps.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let mut alpha_bars = Vec::with_capacity(steps + 1);
    alpha_bars.push(1.0);
    for &b in &betas {
        let prev = *alpha_bars.last().expect("nonempty");
        alpha_bars.push(prev * (1.0 - b));
    }
    let posterior_vars = (1..=steps)
        .map(|t| (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t]) * betas[t - 1])
        .collect();
    Ok(NoiseSchedule {
        betas,
        alpha_bars,
        posterior_vars,
        beta_start,
        beta_end,
    })
}

/// Closed-form forward noising `√ᾱ_t x0 + √(1−ᾱ_t) ε`.
pub fn q_sample(schedule: &NoiseSchedule, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    schedule.check(t)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// One forward transition `√α_t x_{t−1} + √β_t ε`.
pub fn q_step(schedule: &NoiseSchedule, x_prev: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    schedule.check(t)?;
    let (a, b) = (schedule.alpha(t).sqrt(), schedule.beta(t).sqrt());
    x_prev.zip_map(eps, |x, e| a * x + b * e)
}

/// Sinusoidal step encoding: `[sin(t f_i)..., cos(t f_i)...]` with
/// `f_i = 10000^(−i/half)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeEmbedding {
    dim: usize,
}

impl TimeEmbedding {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < 2 || dim % 2 != 0 {
            return Err(Error::invalid(format!("time embedding dim must be even and >= 2, got {dim}")));
        }
        Ok(TimeEmbedding { dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed_into(&self, t: usize, out: &mut Vec<f64>) {
        let half = self.dim / 2;
        let start = out.len();
        out.resize(start + self.dim, 0.0);
        for i in 0..half {
            let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let (s, c) = (t as f64 * f).sin_cos();
            out[start + i] = s;
            out[start + half + i] = c;
        }
    }

    pub fn embed(&self, t: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim);
        self.embed_into(t, &mut v);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CdrModel {
    pub denoiser: MlpParams,
    pub classifier: MlpParams,
    pub schedule: NoiseSchedule,
    pub temb: TimeEmbedding,
    pub alpha2: f64,
    pub gamma: f64,
}

impl CdrModel {
    pub fn new(
        denoiser: MlpParams,
        classifier: MlpParams,
        schedule: NoiseSchedule,
        temb: TimeEmbedding,
        alpha2: f64,
        gamma: f64,
    ) -> Result<Self> {
        let ds = denoiser.out_dim();
        if denoiser.in_dim() <= ds + temb.dim() {
            return Err(Error::shape(format!(
                "denoiser input {} leaves no room for the visual condition (d_s={ds}, d_t={})",
                denoiser.in_dim(),
                temb.dim()
            )));
        }
        if classifier.in_dim() != ds {
            return Err(Error::shape(format!(
                "classifier takes {} features, denoiser emits {ds}",
                classifier.in_dim()
            )));
        }
        if !(alpha2 >= 0.0 && gamma >= 0.0) {
            return Err(Error::invalid("loss weights must be >= 0"));
        }
        Ok(CdrModel {
            denoiser,
            classifier,
            schedule,
            temb,
            alpha2,
            gamma,
        })
    }

    /// Four-layer denoiser `in → hidden → hidden → hidden → d_s`.
    pub fn init<R: Rng + ?Sized>(
        visual_dim: usize,
        semantic_dim: usize,
        classes: usize,
        hidden: usize,
        schedule: NoiseSchedule,
        temb: TimeEmbedding,
        rng: &mut R,
    ) -> Result<Self> {
        let input = semantic_dim + visual_dim + temb.dim();
        let denoiser = MlpParams::init(&[input, hidden, hidden, hidden, semantic_dim], DEFAULT_SLOPE, rng)?;
        let classifier = MlpParams::init(&[semantic_dim, classes], DEFAULT_SLOPE, rng)?;
        Self::new(denoiser, classifier, schedule, temb, 1.0, 1.0)
    }

    pub fn semantic_dim(&self) -> usize {
        self.denoiser.out_dim()
    }

    pub fn visual_dim(&self) -> usize {
        self.denoiser.in_dim() - self.semantic_dim() - self.temb.dim()
    }

    /// Denoiser input rows `concat(x_t, x_v, temb(t))`.
    pub fn denoiser_input(&self, x_t: &Tensor, steps: &[usize], x_v: &Tensor) -> Result<Tensor> {
        let (rows, ds) = x_t.dims2()?;
        let (vrows, dv) = x_v.dims2()?;
        if ds != self.semantic_dim() || dv != self.visual_dim() || vrows != rows || steps.len() != rows {
            return Err(Error::shape(format!(
                "denoiser expects {rows} rows of d_s={} and d_v={} with one step each; got x_t {:?}, x_v {:?}, {} steps",
                self.semantic_dim(),
                self.visual_dim(),
                x_t.shape(),
                x_v.shape(),
                steps.len()
            )));
        }
        let mut data = Vec::with_capacity(rows * self.denoiser.in_dim());
        for (r, &t) in steps.iter().enumerate() {
            self.schedule.check(t)?;
            data.extend_from_slice(x_t.row(r));
            data.extend_from_slice(x_v.row(r));
            self.temb.embed_into(t, &mut data);
        }
        Tensor::matrix(rows, self.denoiser.in_dim(), data)
    }

    fn split<'a>(&self, vars: &'a [Var]) -> Result<(&'a [Var], &'a [Var])> {
        let n = self.denoiser.tensor_count();
        if vars.len() != n + self.classifier.tensor_count() {
            return Err(Error::invalid(format!(
                "expected {} parameter handles, got {}",
                n + self.classifier.tensor_count(),
                vars.len()
            )));
        }
        Ok(vars.split_at(n))
    }

    /// `L_CDR` on `tape` for fixed draws of per-row steps and noise.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &CdrBatch,
        draws: &Draws,
    ) -> Result<(Var, LossReport)> {
        let (dv, cv) = self.split(vars)?;
        let x_t = self.noised(batch, draws)?;
        let input = tape.constant(self.denoiser_input(&x_t, &draws.steps, batch.x_v)?);
        let x0_hat = self.denoiser.forward_tape(tape, dv, input)?;
        let target = tape.constant(batch.x_s0.clone());
        let mse = tape.squared_error(x0_hat, target)?;
        let logits = self.classifier.forward_tape(tape, cv, x0_hat)?;
        let ce = tape.cross_entropy(logits, batch.labels)?;
        let a = tape.scale(ce, self.alpha2);
        let b = tape.scale(mse, self.gamma);
        let total = tape.add(a, b)?;
        let report = LossReport {
            ce: tape.value(ce).item()?,
            ita: None,
            mse: Some(tape.value(mse).item()?),
            total: tape.value(total).item()?,
        };
        Ok((total, report))
    }

    fn noised(&self, batch: &CdrBatch, draws: &Draws) -> Result<Tensor> {
        let (rows, ds) = batch.x_s0.dims2()?;
        if draws.steps.len() != rows || draws.eps.shape() != batch.x_s0.shape() {
            return Err(Error::shape("draws do not match the batch"));
        }
        let mut data = Vec::with_capacity(rows * ds);
        for (r, &t) in draws.steps.iter().enumerate() {
            self.schedule.check(t)?;
            let ab = self.schedule.alpha_bar(t);
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            data.extend(batch.x_s0.row(r).iter().zip(draws.eps.row(r)).map(|(x, e)| a * x + b * e));
        }
        Tensor::matrix(rows, ds, data)
    }
}

impl ParamSet for CdrModel {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut t = self.denoiser.tensors();
        t.extend(self.classifier.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = self.denoiser.tensors_mut();
        t.extend(self.classifier.tensors_mut());
        t
    }
}

/// A labeled training batch: clean semantic rows, visual condition rows, labels.
#[derive(Debug, Clone, Copy)]
pub struct CdrBatch<'a> {
    pub x_s0: &'a Tensor,
    pub x_v: &'a Tensor,
    pub labels: &'a [usize],
}

/// Per-row diffusion step and Gaussian noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Draws {
    pub steps: Vec<usize>,
    pub eps: Tensor,
}

impl Draws {
    /// `t ~ U{1..T}` and `ε ~ N(0, I)` for each row.
    pub fn sample<R: Rng + ?Sized>(schedule: &NoiseSchedule, rows: usize, dim: usize, rng: &mut R) -> Self {
        let steps = (0..rows).map(|_| rng.random_range(1..=schedule.steps())).collect();
        let eps = gaussian(rows, dim, rng);
        Draws { steps, eps }
    }
}

fn gaussian<R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * dim).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(rows, dim, data).expect("sized above")
}

/// `x̂0 = X_θ(x_t, t, x_v)` for every row at step `t`.
pub fn denoise_predict(model: &CdrModel, x_t: &Tensor, t: usize, x_v: &Tensor) -> Result<Tensor> {
    let rows = x_t.dims2()?.0;
    model.denoiser.forward(&model.denoiser_input(x_t, &vec![t; rows], x_v)?)
}

/// Draws `(t, ε)` from `rng` and evaluates `L_CDR` on the batch.
pub fn cdr_training_loss<R: Rng + ?Sized>(model: &CdrModel, batch: &CdrBatch, rng: &mut R) -> Result<LossReport> {
    let (rows, ds) = batch.x_s0.dims2()?;
    let draws = Draws::sample(&model.schedule, rows, ds, rng);
    cdr_loss_with_draws(model, batch, &draws)
}

pub fn cdr_loss_with_draws(model: &CdrModel, batch: &CdrBatch, draws: &Draws) -> Result<LossReport> {
    let mut tape = Tape::new();
    let vars = tape.params(0, model.tensors());
    Ok(model.loss_on_tape(&mut tape, &vars, batch, draws)?.1)
}

/// Mean of the reverse transition given a prediction of the clean row.
pub fn posterior_mean(schedule: &NoiseSchedule, x_t: &Tensor, t: usize, x0_hat: &Tensor) -> Result<Tensor> {
    let (c0, ct) = schedule.posterior_coefs(t)?;
    x0_hat.zip_map(x_t, |p, x| c0 * p + ct * x)
}

/// `μ + √β̂_t z`; at `t = 1` no noise is drawn.
pub fn p_sample_from_prediction<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    x_t: &Tensor,
    t: usize,
    x0_hat: &Tensor,
    rng: &mut R,
) -> Result<Tensor> {
    let mut mu = posterior_mean(schedule, x_t, t, x0_hat)?;
    if t > 1 {
        let sd = schedule.beta_hat(t).sqrt();
        for v in mu.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += sd * z;
        }
    }
    Ok(mu)
}

/// One ancestral step `x_t → x_{t−1}`.
pub fn p_sample_step<R: Rng + ?Sized>(
    model: &CdrModel,
    x_t: &Tensor,
    t: usize,
    x_v: &Tensor,
    rng: &mut R,
) -> Result<Tensor> {
    let x0_hat = denoise_predict(model, x_t, t, x_v)?;
    p_sample_from_prediction(&model.schedule, x_t, t, &x0_hat, rng)
}

/// Full reverse chain from `x_T ~ N(0, I)`, all rows driven by one rng.
pub fn sample_x_cdr<R: Rng + ?Sized>(model: &CdrModel, x_v: &Tensor, rng: &mut R) -> Result<Tensor> {
    let rows = x_v.dims2()?.0;
    let mut x = gaussian(rows, model.semantic_dim(), rng);
    for t in (1..=model.schedule.steps()).rev() {
        x = p_sample_step(model, &x, t, x_v, rng)?;
    }
    x.ensure_finite("sampled x_CDR")?;
    Ok(x)
}

/// Reverse chain where row `r` draws all of its noise from its own seed.
pub fn sample_rows_seeded(model: &CdrModel, x_v: &Tensor, seeds: &[u64]) -> Result<Tensor> {
    let (rows, _) = x_v.dims2()?;
    if seeds.len() != rows {
        return Err(Error::shape(format!("{rows} rows but {} seeds", seeds.len())));
    }
    let ds = model.semantic_dim();
    let mut rngs: Vec<_> = seeds.iter().map(|&s| rng_from(s)).collect();
    let mut data = Vec::with_capacity(rows * ds);
    for rng in &mut rngs {
        data.extend((0..ds).map(|_| rng.sample::<f64, _>(StandardNormal)));
    }
    let mut x = Tensor::matrix(rows, ds, data)?;
    for t in (1..=model.schedule.steps()).rev() {
        let x0_hat = denoise_predict(model, &x, t, x_v)?;
        let mut mu = posterior_mean(&model.schedule, &x, t, &x0_hat)?;
        if t > 1 {
            let sd = model.schedule.beta_hat(t).sqrt();
            for (r, rng) in rngs.iter_mut().enumerate() {
                for v in mu.row_mut(r) {
                    let z: f64 = rng.sample(StandardNormal);
                    *v += sd * z;
                }
            }
        }
        x = mu;
    }
    x.ensure_finite("sampled x_CDR")?;
    Ok(x)
}

/// Seed for sample `index` of draw `draw` under `base`.
pub fn sample_seed(base: u64, draw: usize, index: usize) -> u64 {
    derive_indexed(derive_indexed(base, "draw", draw as u64), "row", index as u64)
}

/// Samples x_CDR for every row of `x_v`, averaging `num_samples` independent
/// chains. `indices[r]` is the stable identity of row `r` (its position in the
/// full data set), so results do not depend on batching or execution mode.
pub fn sample_x_cdr_batch(
    model: &CdrModel,
    x_v: &Tensor,
    indices: &[usize],
    base_seed: u64,
    num_samples: usize,
    mode: ExecMode,
) -> Result<Tensor> {
    let (rows, _) = x_v.dims2()?;
    if indices.len() != rows {
        return Err(Error::shape(format!("{rows} rows but {} indices", indices.len())));
    }
    if num_samples == 0 {
        return Err(Error::invalid("num_samples must be >= 1"));
    }
    let ds = model.semantic_dim();
    let chunks = rows.div_ceil(SAMPLE_CHUNK);
    let work = chunks * num_samples;
    let parts = map_indexed(work, mode, |w| -> Result<Tensor> {
        let (draw, chunk) = (w / chunks, w % chunks);
        let lo = chunk * SAMPLE_CHUNK;
        let hi = (lo + SAMPLE_CHUNK).min(rows);
        let sel: Vec<usize> = (lo..hi).collect();
        let seeds: Vec<u64> = indices[lo..hi].iter().map(|&i| sample_seed(base_seed, draw, i)).collect();
        sample_rows_seeded(model, &x_v.select_rows(&sel), &seeds)
    });
    let mut out = vec![0.0; rows * ds];
    for (w, part) in parts.into_iter().enumerate() {
        let part = part?;
        let lo = (w % chunks) * SAMPLE_CHUNK;
        for (o, v) in out[lo * ds..lo * ds + part.len()].iter_mut().zip(part.data()) {
            *o += v;
        }
    }
    if num_samples > 1 {
        let k = num_samples as f64;
        out.iter_mut().for_each(|v| *v /= k);
    }
    Tensor::matrix(rows, ds, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::Layer;

    fn tiny_model(steps: usize) -> CdrModel {
        let schedule = build_schedule(steps, 0.1, 0.2).unwrap();
        let temb = TimeEmbedding::new(2).unwrap();
        let mut rng = rng_from(0);
        CdrModel::init(2, 2, 3, 8, schedule, temb, &mut rng).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = build_schedule(1, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert_eq!(s.beta_hat(1), 0.0);
    }

    #[test]
    fn two_step_schedule() {
        let s = build_schedule(2, 0.1, 0.2).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        assert!((s.beta_hat(2) - 0.0714286).abs() < 1e-7);
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(build_schedule(0, 0.1, 0.2).is_err());
        assert!(build_schedule(5, 0.0, 0.2).is_err());
        assert!(build_schedule(5, 0.3, 0.2).is_err());
        assert!(build_schedule(5, 0.1, 1.0).is_err());
    }

    #[test]
    fn q_sample_hand_case() {
        // alpha_bar(1) = 0.25 with a single step of beta 0.75
        let s = build_schedule(1, 0.75, 0.75).unwrap();
        let x = q_sample(&s, &Tensor::vector(vec![2.0, 0.0]), 1, &Tensor::vector(vec![0.0, 2.0])).unwrap();
        assert!((x.data()[0] - 1.0).abs() < 1e-12);
        assert!((x.data()[1] - 3f64.sqrt()).abs() < 1e-12);
        assert!(q_sample(&s, &Tensor::vector(vec![0.0]), 2, &Tensor::vector(vec![0.0])).is_err());
    }

    #[test]
    fn posterior_mean_hand_case() {
        // alpha_1 = 0.9, alpha_2 = 0.9: alpha_bar = [1, 0.9, 0.81]
        let s = build_schedule(2, 0.1, 0.1).unwrap();
        let mu = posterior_mean(&s, &Tensor::vector(vec![1.0]), 2, &Tensor::vector(vec![0.5])).unwrap();
        let c = 0.9f64.sqrt() * 0.1 / 0.19;
        assert!((mu.data()[0] - (c * 0.5 + c * 1.0)).abs() < 1e-12);
        assert!((mu.data()[0] - 0.748960).abs() < 1e-6);
        let (c0, ct) = s.posterior_coefs(1).unwrap();
        assert!((c0 - 1.0).abs() < 1e-15);
        assert_eq!(ct, 0.0);
    }

    #[test]
    fn time_embedding_distinct_and_deterministic() {
        let te = TimeEmbedding::new(64).unwrap();
        assert_eq!(te.embed(17), te.embed(17));
        let mut seen = std::collections::HashSet::new();
        for t in 0..10_000 {
            let bits: Vec<u64> = te.embed(t).iter().map(|v| v.to_bits()).collect();
            assert!(seen.insert(bits), "collision at t={t}");
        }
        assert!(TimeEmbedding::new(3).is_err());
    }

    #[test]
    fn zero_weights_emit_last_bias() {
        let mut m = tiny_model(3);
        let n = m.denoiser.layers().len();
        let mut ts: Vec<Tensor> = m.denoiser.tensors().into_iter().cloned().collect();
        for t in &mut ts {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        ts[2 * n - 1] = Tensor::vector(vec![0.25, -4.0]);
        m.denoiser = MlpParams::from_tensors(ts, DEFAULT_SLOPE).unwrap();
        let x_t = Tensor::from_rows(&[[1.0, 2.0], [-3.0, 0.5]]).unwrap();
        let out = denoise_predict(&m, &x_t, 2, &x_t).unwrap();
        assert_eq!(out.data(), &[0.25, -4.0, 0.25, -4.0]);
    }

    #[test]
    fn one_unit_denoiser_hand_value() {
        // input = [x_t, x_v, sin t, cos t] with t = 1, four 1-wide layers
        let schedule = build_schedule(2, 0.1, 0.2).unwrap();
        let temb = TimeEmbedding::new(2).unwrap();
        let l = |w: Vec<f64>, b: f64| Layer {
            weight: Tensor::matrix(w.len(), 1, w).unwrap(),
            bias: Tensor::vector(vec![b]),
        };
        let den = MlpParams::new(
            vec![l(vec![1.0, 2.0, 0.0, 0.0], -1.0), l(vec![2.0], 0.0), l(vec![1.0], 0.5), l(vec![3.0], 0.0)],
            DEFAULT_SLOPE,
        )
        .unwrap();
        let cls = MlpParams::new(vec![l(vec![1.0], 0.0)], DEFAULT_SLOPE).unwrap();
        let m = CdrModel::new(den, cls, schedule, temb, 1.0, 1.0).unwrap();
        // h1 = lrelu(0.2 + 2*(-1) - 1) = lrelu(-2.8) = -0.028
        // h2 = lrelu(2 * -0.028) = -0.00056
        // h3 = lrelu(-0.00056 + 0.5) = 0.49944
        // out = 3 * 0.49944 = 1.49832
        let out = denoise_predict(
            &m,
            &Tensor::from_rows(&[[0.2]]).unwrap(),
            1,
            &Tensor::from_rows(&[[-1.0]]).unwrap(),
        )
        .unwrap();
        assert!((out.data()[0] - 1.49832).abs() < 1e-12);
    }

    #[test]
    fn perfect_denoiser_gives_zero_mse() {
        // zero weights make the output the last bias; targets equal to it are
        // reconstructed exactly whatever the noise
        let mut m = tiny_model(3);
        let n = m.denoiser.layers().len();
        let mut ts: Vec<Tensor> = m.denoiser.tensors().into_iter().cloned().collect();
        for t in &mut ts {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        ts[2 * n - 1] = Tensor::vector(vec![0.7, -0.2]);
        m.denoiser = MlpParams::from_tensors(ts, DEFAULT_SLOPE).unwrap();
        let x_s0 = Tensor::from_rows(&[[0.7, -0.2], [0.7, -0.2]]).unwrap();
        let x_v = Tensor::from_rows(&[[0.1, 0.2], [0.3, -0.4]]).unwrap();
        let batch = CdrBatch { x_s0: &x_s0, x_v: &x_v, labels: &[0, 1] };
        let r = cdr_training_loss(&m, &batch, &mut rng_from(2)).unwrap();
        assert_eq!(r.mse, Some(0.0));
    }

    #[test]
    fn gamma_zero_leaves_scaled_ce() {
        let mut m = tiny_model(4);
        m.gamma = 0.0;
        m.alpha2 = 1.5;
        let x = Tensor::from_rows(&[[0.1, 0.2], [0.3, -0.4]]).unwrap();
        let r = cdr_training_loss(&m, &CdrBatch { x_s0: &x, x_v: &x, labels: &[0, 2] }, &mut rng_from(1)).unwrap();
        assert_eq!(r.total, 1.5 * r.ce);
    }

    #[test]
    fn sampling_is_seeded_and_final_step_is_mean() {
        let m = tiny_model(5);
        let x_v = Tensor::from_rows(&[[0.1, 0.2], [0.3, -0.4], [1.0, 1.0]]).unwrap();
        let a = sample_x_cdr(&m, &x_v, &mut rng_from(9)).unwrap();
        let b = sample_x_cdr(&m, &x_v, &mut rng_from(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[3, 2]);
        assert!(a.is_finite());

        let x_t = Tensor::from_rows(&[[0.5, -0.5], [0.0, 1.0], [2.0, 2.0]]).unwrap();
        let step = p_sample_step(&m, &x_t, 1, &x_v, &mut rng_from(3)).unwrap();
        let mu = posterior_mean(&m.schedule, &x_t, 1, &denoise_predict(&m, &x_t, 1, &x_v).unwrap()).unwrap();
        assert_eq!(step, mu);
    }

    #[test]
    fn batch_sampling_independent_of_mode_and_chunking() {
        let m = tiny_model(4);
        let rows = SAMPLE_CHUNK + 7;
        let x_v = Tensor::matrix(rows, 2, (0..rows * 2).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let idx: Vec<usize> = (100..100 + rows).collect();
        let seq = sample_x_cdr_batch(&m, &x_v, &idx, 5, 2, ExecMode::Sequential).unwrap();
        let par = sample_x_cdr_batch(&m, &x_v, &idx, 5, 2, ExecMode::Parallel).unwrap();
        assert_eq!(seq, par);
        // a row's sample depends only on its own seed
        let one = sample_x_cdr_batch(&m, &x_v.select_rows(&[70]), &[170], 5, 2, ExecMode::Sequential).unwrap();
        assert_eq!(one.row(0), seq.row(70));
    }
}
