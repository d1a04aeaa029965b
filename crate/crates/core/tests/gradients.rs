//! Taped gradients against central finite differences.

use marnet_core::diffusion::{CdrBatch, CdrModel, Draws};
use marnet_core::ema::{ita_on_tape, EmaModel, TauHandle};
use marnet_core::fusion::{fuse_on_tape, FusionConfig, FusionStrategy};
use marnet_core::gradcheck::{finite_diff_check, FdOptions};
use marnet_core::mlp::{MlpParams, DEFAULT_SLOPE};
use marnet_core::seed::rng_from;
use marnet_core::tape::{ParamId, Tape, Var};
use marnet_core::train::ParamSet;
use marnet_core::{Result, Tensor};

mod common;
use common::{randomized, small_cdr, uniform};

fn check<F>(params: &[Tensor], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let report = finite_diff_check(params, f, &FdOptions::default()).unwrap();
    assert!(report.passed, "max rel error {} at {:?}", report.max_rel_error, report.worst);
}

#[test]
fn elementwise_ops() {
    let a = uniform(3, 4, -1.0, 1.0, 1);
    let b = uniform(3, 4, -1.0, 1.0, 2);
    let s = Tensor::scalar(0.7);
    check(&[a, b, s], |tape, v| {
        let d = tape.sub(v[0], v[1])?;
        let m = tape.mul(d, v[0])?;
        let l = tape.leaky_relu(m, 0.2)?;
        let q = tape.div_scalar(l, v[2])?;
        let c = tape.scale(q, -1.3);
        let t = tape.transpose(c)?;
        let sq = tape.mul(t, t)?;
        Ok(tape.sum(sq))
    });
}

#[test]
fn affine_concat_and_vector_input() {
    let x = uniform(1, 3, -1.0, 1.0, 3).reshape(vec![3]).unwrap();
    let w = uniform(3, 2, -1.0, 1.0, 4);
    let b = Tensor::vector(vec![0.1, -0.3]);
    let y = uniform(1, 2, -1.0, 1.0, 5).reshape(vec![2]).unwrap();
    check(&[x, w, b, y], |tape, v| {
        let h = tape.affine(v[0], v[1], v[2])?;
        let c = tape.concat(&[h, v[3], h])?;
        let sq = tape.mul(c, c)?;
        Ok(tape.sum(sq))
    });
}

#[test]
fn harmonic_mean_positive_operands() {
    let a = uniform(2, 5, 0.5, 1.5, 6);
    let b = uniform(2, 5, 0.5, 1.5, 7);
    check(&[a, b], |tape, v| {
        let h = tape.harmonic_mean(v[0], v[1], 1e-8)?;
        let sq = tape.mul(h, h)?;
        Ok(tape.sum(sq))
    });
}

#[test]
fn cosine_and_cross_entropy() {
    let a = uniform(4, 3, -1.0, 1.0, 8);
    let b = uniform(5, 3, -1.0, 1.0, 9);
    check(&[a, b], |tape, v| {
        let s = tape.cosine_sim(v[0], v[1])?;
        let scaled = tape.scale(s, 3.0);
        tape.cross_entropy(scaled, &[4, 0, 2, 2])
    });
}

#[test]
fn squared_error() {
    let p = uniform(4, 3, -1.0, 1.0, 10);
    let t = uniform(4, 3, -1.0, 1.0, 11);
    check(&[p, t], |tape, v| tape.squared_error(v[0], v[1]));
}

#[test]
fn ita_loss_four_pairs() {
    let u = uniform(4, 6, -1.0, 1.0, 12);
    let v = uniform(4, 6, -1.0, 1.0, 13);
    check(&[u, v], |tape, p| Ok(ita_on_tape(tape, p[0], p[1], TauHandle::Fixed(0.07))?.ita));
}

#[test]
fn ita_loss_with_trainable_temperature() {
    let u = uniform(4, 6, -1.0, 1.0, 14);
    let v = uniform(4, 6, -1.0, 1.0, 15);
    check(&[u, v, Tensor::scalar(0.3)], |tape, p| {
        Ok(ita_on_tape(tape, p[0], p[1], TauHandle::Var(p[2]))?.ita)
    });
}

#[test]
fn ema_loss_four_samples() {
    let mut model = EmaModel::init(5, 4, 6, 3, &mut rng_from(16)).unwrap();
    randomized(&mut model, 17);
    model.alpha1 = 0.8;
    model.beta = 1.2;
    let xv = uniform(4, 5, -1.0, 1.0, 18);
    let xs = uniform(4, 4, -1.0, 1.0, 19);
    let labels = [0, 2, 1, 2];
    let params: Vec<Tensor> = model.tensors().into_iter().cloned().collect();
    check(&params, |tape, vars| Ok(model.loss_on_tape(tape, vars, &xv, &xs, &labels)?.0));
}

fn cdr_case(model: &CdrModel) {
    let x_s0 = uniform(4, 4, -1.0, 1.0, 22);
    let x_v = uniform(4, 3, -1.0, 1.0, 23);
    let labels = [1, 0, 2, 1];
    let draws = Draws::sample(&model.schedule, 4, 4, &mut rng_from(24));
    let batch = CdrBatch {
        x_s0: &x_s0,
        x_v: &x_v,
        labels: &labels,
    };
    let params: Vec<Tensor> = model.tensors().into_iter().cloned().collect();
    assert!(params.iter().any(|p| p.len() > 64), "exercise coordinate sampling");
    check(&params, |tape, vars| Ok(model.loss_on_tape(tape, vars, &batch, &draws)?.0));
}

#[test]
fn mse_term_four_samples() {
    cdr_case(&small_cdr(0.0, 1.0));
}

#[test]
fn cdr_loss_four_samples() {
    cdr_case(&small_cdr(1.0, 1.0));
}

#[test]
fn fused_cross_entropy_all_strategies() {
    for strategy in FusionStrategy::ALL {
        let a = uniform(4, 3, 0.2, 1.2, 25);
        let b = uniform(4, 3, 0.2, 1.2, 26);
        let width = strategy.output_dim(3, 3).unwrap();
        let head = MlpParams::init(&[width, 5], DEFAULT_SLOPE, &mut rng_from(27)).unwrap();
        let mut params = vec![a, b];
        params.extend(head.tensors().into_iter().cloned());
        let cfg = FusionConfig::new(strategy);
        check(&params, |tape, v| {
            let f = fuse_on_tape(tape, v[0], v[1], &cfg)?;
            let logits = head.forward_tape(tape, &v[2..], f)?;
            tape.cross_entropy(logits, &[0, 4, 2, 1])
        });
    }
}

#[test]
fn shared_parameter_ids_accumulate_in_checks() {
    let w = uniform(2, 2, -1.0, 1.0, 28);
    let report = finite_diff_check(
        &[w],
        |tape, v| {
            let value = tape.value(v[0]).clone();
            let again = tape.param(ParamId(0), &value);
            let m = tape.mul(v[0], again)?;
            Ok(tape.sum(m))
        },
        &FdOptions::default(),
    )
    .unwrap();
    assert!(report.passed);
}
