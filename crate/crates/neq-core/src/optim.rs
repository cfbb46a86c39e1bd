//! SGD with momentum and Adam, gated by the freeze mask.
//!
//! Updates touch only the rows/channels listed in the packed gradients;
//! buffers of frozen neurons are neither read nor written, so unfreezing
//! resumes from the retained state. Weight decay is L2 added to the
//! gradient before any momentum/moment accumulation, and is suspended for
//! frozen neurons along with everything else.

use serde::{Deserialize, Serialize};

use crate::autodiff::Grads;
use crate::error::{Error, Result};
use crate::model::{FreezeMask, LayerParams, Model};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Momentum / moment buffers for one parameterized layer. `weight` matches
/// the weight (or gamma) tensor, `bias` the bias (or beta) vector.
#[derive(Clone, Debug)]
pub struct LayerBuffer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub enum Optimizer<T> {
    Sgd {
        config: SgdConfig,
        velocity: Vec<Option<LayerBuffer<T>>>,
    },
    Adam {
        config: AdamConfig,
        first: Vec<Option<LayerBuffer<T>>>,
        second: Vec<Option<LayerBuffer<T>>>,
        /// Per-neuron step counters; advance only when the neuron updates.
        steps: Vec<Option<Vec<u64>>>,
    },
}

fn zero_buffers<T: Scalar>(model: &Model<T>) -> Vec<Option<LayerBuffer<T>>> {
    model
        .params
        .iter()
        .map(|p| match p {
            LayerParams::Linear { weight, bias } | LayerParams::Conv2d { weight, bias } => {
                Some(LayerBuffer {
                    weight: Tensor::zeros(weight.shape()),
                    bias: Tensor::zeros(bias.shape()),
                })
            }
            LayerParams::BatchNorm2d { gamma, beta, .. } => Some(LayerBuffer {
                weight: Tensor::zeros(gamma.shape()),
                bias: Tensor::zeros(beta.shape()),
            }),
            LayerParams::None => None,
        })
        .collect()
}

impl<T: Scalar> Optimizer<T> {
    pub fn sgd(model: &Model<T>, config: SgdConfig) -> Self {
        Optimizer::Sgd { config, velocity: zero_buffers(model) }
    }

    pub fn adam(model: &Model<T>, config: AdamConfig) -> Self {
        let steps = model
            .params
            .iter()
            .map(|p| match p {
                LayerParams::None => None,
                other => {
                    let n = match other {
                        LayerParams::Linear { weight, .. } | LayerParams::Conv2d { weight, .. } => {
                            weight.shape()[0]
                        }
                        LayerParams::BatchNorm2d { gamma, .. } => gamma.numel(),
                        LayerParams::None => unreachable!(),
                    };
                    Some(vec![0u64; n])
                }
            })
            .collect();
        Optimizer::Adam {
            config,
            first: zero_buffers(model),
            second: zero_buffers(model),
            steps,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Optimizer::Sgd { .. } => OptimizerKind::Sgd,
            Optimizer::Adam { .. } => OptimizerKind::Adam,
        }
    }

    /// Apply one update step to the non-frozen rows. The packed gradient
    /// rows must match the mask's open rows exactly.
    pub fn step(
        &mut self,
        model: &mut Model<T>,
        grads: &Grads<T>,
        mask: &FreezeMask,
        lr: f64,
    ) -> Result<()> {
        for li in 0..model.layers.len() {
            let n = match model.layers[li].kind.neuron_count() {
                Some(n) => n,
                None => continue,
            };
            let expected_rows = mask.unfrozen_rows(li, n);
            let grad = grads.by_layer[li].as_ref();
            match grad {
                None if expected_rows.is_empty() => continue,
                None => {
                    return Err(Error::MissingGradient {
                        layer: model.layers[li].name.clone(),
                        index: expected_rows[0],
                    });
                }
                Some(g) if g.rows != expected_rows => {
                    let missing = expected_rows
                        .iter()
                        .find(|r| !g.rows.contains(r))
                        .copied()
                        .unwrap_or(0);
                    return Err(Error::MissingGradient {
                        layer: model.layers[li].name.clone(),
                        index: missing,
                    });
                }
                Some(g) => {
                    self.update_layer(model, li, g, lr)?;
                }
            }
        }
        Ok(())
    }

    fn update_layer(
        &mut self,
        model: &mut Model<T>,
        layer: usize,
        grad: &crate::autodiff::LayerGrad<T>,
        lr: f64,
    ) -> Result<()> {
        let (weight, bias): (&mut Tensor<T>, &mut Tensor<T>) = match &mut model.params[layer] {
            LayerParams::Linear { weight, bias } | LayerParams::Conv2d { weight, bias } => {
                (weight, bias)
            }
            LayerParams::BatchNorm2d { gamma, beta, .. } => (gamma, beta),
            LayerParams::None => unreachable!("gradient for parameterless layer"),
        };
        let row_width = weight.numel() / weight.shape()[0];
        if grad.weight.numel() != grad.rows.len() * row_width
            || grad.bias.numel() != grad.rows.len()
        {
            return Err(Error::ShapeMismatch {
                expected: vec![grad.rows.len(), row_width],
                got: grad.weight.shape().to_vec(),
            });
        }
        let lr_t = T::from_f64(lr);

        match self {
            Optimizer::Sgd { config, velocity } => {
                let buf = velocity[layer].as_mut().expect("buffer for parameterized layer");
                let mu = T::from_f64(config.momentum);
                let wd = T::from_f64(config.weight_decay);
                for (r, &row) in grad.rows.iter().enumerate() {
                    sgd_row(
                        &mut weight.data_mut()[row * row_width..(row + 1) * row_width],
                        &grad.weight.data()[r * row_width..(r + 1) * row_width],
                        &mut buf.weight.data_mut()[row * row_width..(row + 1) * row_width],
                        mu,
                        wd,
                        lr_t,
                    );
                    sgd_row(
                        &mut bias.data_mut()[row..=row],
                        &grad.bias.data()[r..=r],
                        &mut buf.bias.data_mut()[row..=row],
                        mu,
                        wd,
                        lr_t,
                    );
                }
            }
            Optimizer::Adam { config, first, second, steps } => {
                let m = first[layer].as_mut().expect("buffer for parameterized layer");
                let v = second[layer].as_mut().expect("buffer for parameterized layer");
                let t_rows = steps[layer].as_mut().expect("steps for parameterized layer");
                for (r, &row) in grad.rows.iter().enumerate() {
                    t_rows[row] += 1;
                    let t = t_rows[row];
                    let bc1 = T::from_f64(1.0 - config.beta1.powi(t as i32));
                    let bc2 = T::from_f64(1.0 - config.beta2.powi(t as i32));
                    adam_row(
                        &mut weight.data_mut()[row * row_width..(row + 1) * row_width],
                        &grad.weight.data()[r * row_width..(r + 1) * row_width],
                        &mut m.weight.data_mut()[row * row_width..(row + 1) * row_width],
                        &mut v.weight.data_mut()[row * row_width..(row + 1) * row_width],
                        config,
                        bc1,
                        bc2,
                        lr_t,
                    );
                    adam_row(
                        &mut bias.data_mut()[row..=row],
                        &grad.bias.data()[r..=r],
                        &mut m.bias.data_mut()[row..=row],
                        &mut v.bias.data_mut()[row..=row],
                        config,
                        bc1,
                        bc2,
                        lr_t,
                    );
                }
            }
        }
        Ok(())
    }

    /// Serialized optimizer state of one layer, for bit-exactness checks.
    pub fn layer_state_bytes(&self, layer: usize) -> Vec<u8> {
        let mut out = Vec::new();
        let mut push_buf = |b: &Option<LayerBuffer<T>>| {
            if let Some(b) = b {
                for &x in b.weight.data() {
                    x.write_le(&mut out);
                }
                for &x in b.bias.data() {
                    x.write_le(&mut out);
                }
            }
        };
        match self {
            Optimizer::Sgd { velocity, .. } => push_buf(&velocity[layer]),
            Optimizer::Adam { first, second, steps, .. } => {
                push_buf(&first[layer]);
                push_buf(&second[layer]);
                if let Some(s) = &steps[layer] {
                    for &t in s {
                        out.extend_from_slice(&t.to_le_bytes());
                    }
                }
            }
        }
        out
    }
}

#[inline]
fn sgd_row<T: Scalar>(w: &mut [T], g: &[T], buf: &mut [T], mu: T, wd: T, lr: T) {
    for i in 0..w.len() {
        let grad = g[i] + wd * w[i];
        buf[i] = mu * buf[i] + grad;
        w[i] -= lr * buf[i];
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn adam_row<T: Scalar>(
    w: &mut [T],
    g: &[T],
    m: &mut [T],
    v: &mut [T],
    config: &AdamConfig,
    bc1: T,
    bc2: T,
    lr: T,
) {
    let b1 = T::from_f64(config.beta1);
    let b2 = T::from_f64(config.beta2);
    let one_m_b1 = T::from_f64(1.0 - config.beta1);
    let one_m_b2 = T::from_f64(1.0 - config.beta2);
    let wd = T::from_f64(config.weight_decay);
    let eps = T::from_f64(config.eps);
    for i in 0..w.len() {
        let grad = g[i] + wd * w[i];
        m[i] = b1 * m[i] + one_m_b1 * grad;
        v[i] = b2 * v[i] + one_m_b2 * grad * grad;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::LayerGrad;
    use crate::model::{build_model, ArchSpec, FreezeMask};

    fn tiny_model() -> Model<f64> {
        // One tracked linear layer of 2 units plus the classifier.
        build_model::<f64>(&ArchSpec::Mlp { input: 1, hidden: vec![2], classes: 2 }, 0).unwrap()
    }

    fn full_grad(model: &Model<f64>, layer: usize, wg: Vec<f64>, bg: Vec<f64>) -> Grads<f64> {
        let mut by_layer: Vec<Option<LayerGrad<f64>>> =
            (0..model.layers.len()).map(|_| None).collect();
        let n = model.layers[layer].kind.neuron_count().unwrap();
        let width = wg.len() / n;
        by_layer[layer] = Some(LayerGrad {
            rows: (0..n).collect(),
            weight: Tensor::from_vec(&[n, width], wg).unwrap(),
            bias: Tensor::from_vec(&[n], bg).unwrap(),
        });
        Grads { by_layer }
    }

    #[test]
    fn sgd_basic_step() {
        let mut model = tiny_model();
        // w = 1, grad = 0.5, lr = 0.1, no momentum, no decay -> w = 0.95
        model.params[0] = LayerParams::Linear {
            weight: Tensor::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap(),
            bias: Tensor::zeros(&[2]),
        };
        let mut opt = Optimizer::sgd(&model, SgdConfig { momentum: 0.0, weight_decay: 0.0 });
        let grads = full_grad(&model, 0, vec![0.5, 0.5], vec![0.0, 0.0]);
        // Classifier also needs gradients (nothing is frozen).
        let mut grads = grads;
        let c = model.layers.len() - 1;
        let cw = model.params[c].named_tensors()[0].1.numel();
        grads.by_layer[c] = Some(LayerGrad {
            rows: (0..2).collect(),
            weight: Tensor::zeros(&[2, cw / 2]),
            bias: Tensor::zeros(&[2]),
        });
        let mask = FreezeMask::all_unfrozen(&model.layers);
        opt.step(&mut model, &grads, &mask, 0.1).unwrap();
        let w = model.params[0].named_tensors()[0].1.data().to_vec();
        assert_eq!(w, vec![0.95, 0.95]);
    }

    #[test]
    fn sgd_momentum_matches_hand_unrolled_recurrence() {
        let mut model = tiny_model();
        model.params[0] = LayerParams::Linear {
            weight: Tensor::from_vec(&[2, 1], vec![2.0, 2.0]).unwrap(),
            bias: Tensor::zeros(&[2]),
        };
        let mut opt = Optimizer::sgd(&model, SgdConfig { momentum: 0.9, weight_decay: 0.0 });
        let mask = FreezeMask::all_unfrozen(&model.layers);
        let lr = 0.1;

        // Quadratic loss L = w^2 / 2, so grad = w; three steps by hand.
        let mut w_ref = 2.0f64;
        let mut buf = 0.0f64;
        for _ in 0..3 {
            let g = { // read current engine weight as the gradient source
                model.params[0].named_tensors()[0].1.data()[0]
            };
            let mut grads = full_grad(&model, 0, vec![g, g], vec![0.0, 0.0]);
            let c = model.layers.len() - 1;
            let cw = model.params[c].named_tensors()[0].1.numel();
            grads.by_layer[c] = Some(LayerGrad {
                rows: (0..2).collect(),
                weight: Tensor::zeros(&[2, cw / 2]),
                bias: Tensor::zeros(&[2]),
            });
            opt.step(&mut model, &grads, &mask, lr).unwrap();

            buf = 0.9 * buf + w_ref;
            w_ref -= lr * buf;
            let w_engine = model.params[0].named_tensors()[0].1.data()[0];
            assert_eq!(w_engine.to_bits(), w_ref.to_bits());
        }
    }

    #[test]
    fn frozen_rows_stay_bit_identical() {
        let mut model = tiny_model();
        let mut mask = FreezeMask::all_unfrozen(&model.layers);
        mask.set(crate::model::NeuronId { layer: 0, index: 0 }, true);
        let before_w = model.params[0].named_tensors()[0].1.data()[0];
        let before_b = model.params[0].named_tensors()[1].1.data()[0];

        let mut opt = Optimizer::sgd(&model, SgdConfig { momentum: 0.9, weight_decay: 1e-2 });
        // Packed grads exclude the frozen row 0.
        let mut by_layer: Vec<Option<LayerGrad<f64>>> =
            (0..model.layers.len()).map(|_| None).collect();
        by_layer[0] = Some(LayerGrad {
            rows: vec![1],
            weight: Tensor::from_vec(&[1, 1], vec![0.7]).unwrap(),
            bias: Tensor::from_vec(&[1], vec![0.2]).unwrap(),
        });
        let c = model.layers.len() - 1;
        let cw = model.params[c].named_tensors()[0].1.numel();
        by_layer[c] = Some(LayerGrad {
            rows: (0..2).collect(),
            weight: Tensor::zeros(&[2, cw / 2]),
            bias: Tensor::zeros(&[2]),
        });
        let grads = Grads { by_layer };
        for _ in 0..10 {
            opt.step(&mut model, &grads, &mask, 0.1).unwrap();
        }
        assert_eq!(model.params[0].named_tensors()[0].1.data()[0].to_bits(), before_w.to_bits());
        assert_eq!(model.params[0].named_tensors()[1].1.data()[0].to_bits(), before_b.to_bits());
        // Buffer row 0 untouched as well.
        let Optimizer::Sgd { velocity, .. } = &opt else { unreachable!() };
        assert_eq!(velocity[0].as_ref().unwrap().weight.data()[0], 0.0);
        assert_ne!(velocity[0].as_ref().unwrap().weight.data()[1], 0.0);
    }

    #[test]
    fn missing_gradient_for_open_row_is_an_error() {
        let mut model = tiny_model();
        let mask = FreezeMask::all_unfrozen(&model.layers);
        let mut opt = Optimizer::sgd(&model, SgdConfig { momentum: 0.0, weight_decay: 0.0 });
        let grads = Grads { by_layer: (0..model.layers.len()).map(|_| None).collect() };
        assert!(matches!(
            opt.step(&mut model, &grads, &mask, 0.1),
            Err(Error::MissingGradient { .. })
        ));
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        let mut model = tiny_model();
        model.params[0] = LayerParams::Linear {
            weight: Tensor::from_vec(&[2, 1], vec![0.0, 0.0]).unwrap(),
            bias: Tensor::zeros(&[2]),
        };
        let cfg = AdamConfig::default();
        let mut opt = Optimizer::adam(&model, cfg);
        let mask = FreezeMask::all_unfrozen(&model.layers);
        let g = 0.3f64;
        let mut grads = full_grad(&model, 0, vec![g, g], vec![0.0, 0.0]);
        let c = model.layers.len() - 1;
        let cw = model.params[c].named_tensors()[0].1.numel();
        grads.by_layer[c] = Some(LayerGrad {
            rows: (0..2).collect(),
            weight: Tensor::zeros(&[2, cw / 2]),
            bias: Tensor::zeros(&[2]),
        });
        opt.step(&mut model, &grads, &mask, 0.001).unwrap();

        // Hand computation: m = 0.1 g, v = 0.001 g^2, bias-corrected back to
        // m_hat = g, v_hat = g^2; step = lr * g / (|g| + eps).
        let m = (1.0 - cfg.beta1) * g;
        let v = (1.0 - cfg.beta2) * g * g;
        let m_hat = m / (1.0 - cfg.beta1);
        let v_hat = v / (1.0 - cfg.beta2);
        let expected = -0.001 * m_hat / (v_hat.sqrt() + cfg.eps);
        let w = model.params[0].named_tensors()[0].1.data()[0];
        assert!((w - expected).abs() < 1e-15);
        assert!((w + 0.001).abs() < 1e-6); // ~ -lr for the first step
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let mut model = tiny_model();
        let before = model.parameter_bytes();
        let mut opt = Optimizer::adam(&model, AdamConfig::default());
        let mask = FreezeMask::all_unfrozen(&model.layers);
        let mut grads = full_grad(&model, 0, vec![0.0, 0.0], vec![0.0, 0.0]);
        let c = model.layers.len() - 1;
        let cw = model.params[c].named_tensors()[0].1.numel();
        grads.by_layer[c] = Some(LayerGrad {
            rows: (0..2).collect(),
            weight: Tensor::zeros(&[2, cw / 2]),
            bias: Tensor::zeros(&[2]),
        });
        for _ in 0..5 {
            opt.step(&mut model, &grads, &mask, 0.001).unwrap();
        }
        assert_eq!(model.parameter_bytes(), before);
    }

    #[test]
    fn adam_frozen_neuron_buffers_and_counters_hold() {
        let mut model = tiny_model();
        let mut mask = FreezeMask::all_unfrozen(&model.layers);
        mask.set(crate::model::NeuronId { layer: 0, index: 1 }, true);
        let mut opt = Optimizer::adam(&model, AdamConfig::default());
        let mut by_layer: Vec<Option<LayerGrad<f64>>> =
            (0..model.layers.len()).map(|_| None).collect();
        by_layer[0] = Some(LayerGrad {
            rows: vec![0],
            weight: Tensor::from_vec(&[1, 1], vec![0.5]).unwrap(),
            bias: Tensor::from_vec(&[1], vec![0.1]).unwrap(),
        });
        let c = model.layers.len() - 1;
        let cw = model.params[c].named_tensors()[0].1.numel();
        by_layer[c] = Some(LayerGrad {
            rows: (0..2).collect(),
            weight: Tensor::zeros(&[2, cw / 2]),
            bias: Tensor::zeros(&[2]),
        });
        let grads = Grads { by_layer };
        for _ in 0..10 {
            opt.step(&mut model, &grads, &mask, 0.001).unwrap();
        }
        let Optimizer::Adam { first, steps, .. } = &opt else { unreachable!() };
        assert_eq!(first[0].as_ref().unwrap().weight.data()[1], 0.0);
        assert_eq!(steps[0].as_ref().unwrap()[0], 10);
        assert_eq!(steps[0].as_ref().unwrap()[1], 0);
    }
}
