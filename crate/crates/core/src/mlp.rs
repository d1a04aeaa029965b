//! Multilayer perceptrons: affine layers with leaky-ReLU between them.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{gemm, Tensor};

/// Default negative slope of the leaky ReLU.
pub const DEFAULT_SLOPE: f64 = 0.01;

/// Elementwise `x` for `x >= 0`, `slope * x` otherwise.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    if !(slope > 0.0) {
        return Err(Error::invalid(format!("leaky-relu slope must be > 0, got {slope}")));
    }
    x.ensure_finite("leaky_relu input")?;
    Ok(x.map(|v| if v >= 0.0 { v } else { slope * v }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `[in x out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Weights of a small MLP. The final layer has no activation.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<Layer>,
    slope: f64,
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>, slope: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("an MLP needs at least one layer"));
        }
        if !(slope > 0.0) {
            return Err(Error::invalid(format!("leaky-relu slope must be > 0, got {slope}")));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.rank() != 2 {
                return Err(Error::LayerShape {
                    layer: i,
                    detail: format!("weight must be 2-D, got {:?}", l.weight.shape()),
                });
            }
            if l.bias.shape() != [l.out_dim()] {
                return Err(Error::LayerShape {
                    layer: i,
                    detail: format!(
                        "bias shape {:?} does not match {} outputs",
                        l.bias.shape(),
                        l.out_dim()
                    ),
                });
            }
            if i > 0 && layers[i - 1].out_dim() != l.in_dim() {
                return Err(Error::LayerShape {
                    layer: i,
                    detail: format!(
                        "expects {} inputs, previous layer emits {}",
                        l.in_dim(),
                        layers[i - 1].out_dim()
                    ),
                });
            }
        }
        Ok(MlpParams { layers, slope })
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], slope: f64, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid("need at least input and output dims"));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect();
                Layer {
                    weight: Tensor::new(vec![fan_in, fan_out], data).expect("sized above"),
                    bias: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        Self::new(layers, slope)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Weight and bias of each layer, in order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn tensor_count(&self) -> usize {
        2 * self.layers.len()
    }

    /// Rebuilds from tensors in [`MlpParams::tensors`] order.
    pub fn from_tensors(tensors: Vec<Tensor>, slope: f64) -> Result<Self> {
        if tensors.len() % 2 != 0 {
            return Err(Error::invalid("expected weight/bias pairs"));
        }
        let mut it = tensors.into_iter();
        let mut layers = Vec::new();
        while let (Some(weight), Some(bias)) = (it.next(), it.next()) {
            layers.push(Layer { weight, bias });
        }
        Self::new(layers, slope)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let cols = x.dims2()?.1;
        if cols != self.in_dim() {
            return Err(Error::LayerShape {
                layer: 0,
                detail: format!("input has {cols} features, layer expects {}", self.in_dim()),
            });
        }
        Ok(())
    }

    /// Untaped forward pass; rows of `x` are independent samples.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        x.ensure_finite("mlp input")?;
        let rows = x.dims2()?.0;
        let mut cur = x.data().to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (inp, out) = (layer.in_dim(), layer.out_dim());
            let mut next = Vec::with_capacity(rows * out);
            for _ in 0..rows {
                next.extend_from_slice(layer.bias.data());
            }
            gemm(rows, inp, out, &cur, false, layer.weight.data(), false, &mut next, 1.0);
            if i < last {
                for v in &mut next {
                    if *v < 0.0 {
                        *v *= self.slope;
                    }
                }
            }
            cur = next;
        }
        let shape = if x.rank() == 1 {
            vec![self.out_dim()]
        } else {
            vec![rows, self.out_dim()]
        };
        let out = Tensor::new(shape, cur)?;
        out.ensure_finite("mlp output")?;
        Ok(out)
    }

    /// Taped forward pass. `vars` are this network's parameters as registered
    /// on `tape`, in [`MlpParams::tensors`] order.
    pub fn forward_tape(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        if vars.len() != self.tensor_count() {
            return Err(Error::invalid(format!(
                "expected {} parameter handles, got {}",
                self.tensor_count(),
                vars.len()
            )));
        }
        self.check_input(tape.value(x))?;
        let mut h = x;
        let last = self.layers.len() - 1;
        for i in 0..self.layers.len() {
            h = tape
                .affine(h, vars[2 * i], vars[2 * i + 1])
                .map_err(|e| Error::LayerShape {
                    layer: i,
                    detail: e.to_string(),
                })?;
            if i < last {
                h = tape.leaky_relu(h, self.slope)?;
            }
        }
        Ok(h)
    }
}

/// `mlp_forward` with operations recorded on `tape`; registers the parameters
/// starting at `ParamId(offset)`.
pub fn mlp_forward(params: &MlpParams, input: &Tensor, tape: &mut Tape, offset: usize) -> Result<Var> {
    let vars = tape.params(offset, params.tensors());
    let x = tape.constant(input.clone());
    params.forward_tape(tape, &vars, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(w: Vec<Vec<f64>>, b: Vec<f64>) -> Layer {
        Layer {
            weight: Tensor::from_rows(&w).unwrap(),
            bias: Tensor::vector(b),
        }
    }

    #[test]
    fn leaky_relu_values() {
        let x = Tensor::vector(vec![2.0, -1.0, 0.0]);
        let y = leaky_relu(&x, 0.01).unwrap();
        assert_eq!(y.data(), &[2.0, -0.01, 0.0]);
        assert!(leaky_relu(&x, 0.0).is_err());
        assert!(leaky_relu(&Tensor::vector(vec![f64::NAN]), 0.01).is_err());
    }

    #[test]
    fn identity_layer() {
        let mlp = MlpParams::new(
            vec![layer(vec![vec![1., 0.], vec![0., 1.]], vec![0., 0.])],
            0.01,
        )
        .unwrap();
        let y = mlp.forward(&Tensor::vector(vec![3.0, -4.0])).unwrap();
        assert_eq!(y.data(), &[3.0, -4.0]);
    }

    #[test]
    fn scalar_affine() {
        let mlp = MlpParams::new(vec![layer(vec![vec![2.0]], vec![1.0])], 0.01).unwrap();
        assert_eq!(mlp.forward(&Tensor::vector(vec![3.0])).unwrap().data(), &[7.0]);
    }

    #[test]
    fn two_layer_hand_composition() {
        // 0.5 -> 0.5*1 - 1 = -0.5 -> leaky 0.01 -> -0.005 -> *1 + 0 = -0.005
        let mlp = MlpParams::new(
            vec![layer(vec![vec![1.0]], vec![-1.0]), layer(vec![vec![1.0]], vec![0.0])],
            0.01,
        )
        .unwrap();
        let y = mlp.forward(&Tensor::vector(vec![0.5])).unwrap();
        assert!((y.data()[0] + 0.005).abs() < 1e-15);

        let mut tape = Tape::new();
        let v = mlp_forward(&mlp, &Tensor::vector(vec![0.5]), &mut tape, 0).unwrap();
        assert_eq!(tape.value(v), &y);
    }

    #[test]
    fn mismatched_chain_names_layer() {
        let err = MlpParams::new(
            vec![layer(vec![vec![1.0, 1.0]], vec![0.0, 0.0]), layer(vec![vec![1.0]], vec![0.0])],
            0.01,
        )
        .unwrap_err();
        assert!(matches!(err, Error::LayerShape { layer: 1, .. }));

        let mlp = MlpParams::new(vec![layer(vec![vec![1.0]], vec![0.0])], 0.01).unwrap();
        let err = mlp.forward(&Tensor::vector(vec![1.0, 2.0])).unwrap_err();
        assert!(matches!(err, Error::LayerShape { layer: 0, .. }));
    }

    #[test]
    fn init_respects_glorot_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = MlpParams::init(&[10, 6, 3], DEFAULT_SLOPE, &mut rng).unwrap();
        let bound = (6.0f64 / 16.0).sqrt();
        assert!(mlp.layers()[0].weight.data().iter().all(|w| w.abs() <= bound));
        assert!(mlp.layers()[1].bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn taped_and_untaped_forward_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mlp = MlpParams::init(&[7, 16, 16, 4], DEFAULT_SLOPE, &mut rng).unwrap();
        let x = Tensor::matrix(3, 7, (0..21).map(|i| (i as f64 - 10.0) / 7.0).collect()).unwrap();
        let mut tape = Tape::new();
        let v = mlp_forward(&mlp, &x, &mut tape, 0).unwrap();
        assert_eq!(tape.value(v), &mlp.forward(&x).unwrap());
        assert_eq!(mlp.forward(&x).unwrap(), mlp.forward(&x).unwrap());
    }
}
