//! Momentum SGD with weight decay and a linearly decaying learning rate.

use serde::{Deserialize, Serialize};

use super::{Gradients, LayerGrad, NetworkWeights};
use crate::error::{param, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Last epoch (1-based) trained at the full rate.
    pub lr_decay_start_epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self { lr0: 2e-4, momentum: 0.8, weight_decay: 5e-4, epochs: 200, lr_decay_start_epoch: 20, batch_size: 16, seed: 0 }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(param(format!("lr0 must be finite and >= 0, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(param(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(param("weight_decay must be finite and >= 0"));
        }
        if self.batch_size < 1 {
            return Err(param("batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Learning rate for 1-based `epoch`: constant up to `lr_decay_start_epoch`,
/// then linear down to zero at the final epoch.
pub fn learning_rate(hyper: &TrainHyper, epoch: usize) -> f64 {
    let start = hyper.lr_decay_start_epoch;
    if epoch <= start || hyper.epochs <= start {
        return hyper.lr0;
    }
    let frac = (epoch - start) as f64 / (hyper.epochs - start) as f64;
    hyper.lr0 * (1.0 - frac).max(0.0)
}

/// Momentum buffers, one per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity {
    layers: Vec<LayerGrad>,
}

impl Velocity {
    pub fn zeros(weights: &NetworkWeights) -> Self {
        Self { layers: weights.layers().iter().map(LayerGrad::zeros_like).collect() }
    }
}

/// `v <- momentum * v - lr * (g + weight_decay * w)`, `w <- w + v` on every
/// trainable layer that has a gradient. Non-finite gradients reject the whole
/// update.
pub fn sgd_step(
    weights: &mut NetworkWeights,
    grads: &Gradients,
    hyper: &TrainHyper,
    velocity: &mut Velocity,
    epoch: usize,
) -> Result<()> {
    if grads.len() != weights.layers().len() || velocity.layers.len() != grads.len() {
        return Err(Error::Shape("gradient, velocity and network layer counts differ".into()));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            let p = &weights.layers()[i];
            if g.weights.len() != p.weights.len() || g.bias.len() != p.bias.len() {
                return Err(Error::Shape(format!("gradient of layer {i} has the wrong size")));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of layer {i}; update rejected")));
            }
        }
    }
    let lr = learning_rate(hyper, epoch);
    let (mu, wd) = (hyper.momentum, hyper.weight_decay);
    weights.apply_update(|layers| {
        for ((p, g), v) in layers.iter_mut().zip(grads).zip(&mut velocity.layers) {
            let Some(g) = g else { continue };
            if !p.trainable {
                continue;
            }
            let pairs = p.weights.iter_mut().zip(&g.weights).zip(v.weights.iter_mut());
            let bias = p.bias.iter_mut().zip(&g.bias).zip(v.bias.iter_mut());
            for ((w, g), v) in pairs.chain(bias) {
                *v = mu * *v - lr * (g + wd * *w);
                *w += *v;
            }
        }
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ConvSpec, LayerParams, NetworkSpec, TrainablePattern};

    fn one_param_net(w0: f64) -> NetworkWeights {
        let spec = NetworkSpec {
            input_size: 1,
            input_channels: 1,
            conv: vec![ConvSpec { out_channels: 1, kernel: 1, stride: 1, pool: 1 }],
            fc: vec![1],
        };
        NetworkWeights::from_layers(
            &spec,
            vec![
                LayerParams { weights: vec![1.0], bias: vec![0.0], trainable: true },
                LayerParams { weights: vec![w0], bias: vec![0.0], trainable: true },
            ],
        )
        .unwrap()
    }

    fn grads(g: f64) -> Gradients {
        vec![None, Some(LayerGrad { weights: vec![g], bias: vec![0.0] })]
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut w = one_param_net(0.3);
        let hyper = TrainHyper { weight_decay: 0.0, ..Default::default() };
        let mut v = Velocity::zeros(&w);
        sgd_step(&mut w, &grads(0.0), &hyper, &mut v, 1).unwrap();
        assert_eq!(w.layers()[1].weights[0], 0.3);
    }

    #[test]
    fn single_step_hand_value() {
        let mut w = one_param_net(0.0);
        let hyper = TrainHyper { lr0: 0.1, momentum: 0.8, weight_decay: 0.0, ..Default::default() };
        let mut v = Velocity::zeros(&w);
        sgd_step(&mut w, &grads(1.0), &hyper, &mut v, 1).unwrap();
        assert!((w.layers()[1].weights[0] + 0.1).abs() < 1e-15);
        sgd_step(&mut w, &grads(1.0), &hyper, &mut v, 1).unwrap();
        // v = 0.8 * -0.1 - 0.1 = -0.18
        assert!((w.layers()[1].weights[0] + 0.28).abs() < 1e-15);
    }

    #[test]
    fn schedule_hand_values() {
        let h = TrainHyper::default();
        assert_eq!(learning_rate(&h, 1), 2e-4);
        assert_eq!(learning_rate(&h, 20), 2e-4);
        assert!((learning_rate(&h, 110) - 1e-4).abs() < 1e-18);
        assert_eq!(learning_rate(&h, 200), 0.0);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut w = one_param_net(0.5);
        let mut v = Velocity::zeros(&w);
        let err = sgd_step(&mut w, &grads(f64::NAN), &TrainHyper::default(), &mut v, 1);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(w.layers()[1].weights[0], 0.5);
    }

    #[test]
    fn frozen_layers_are_bit_stable() {
        let mut w = one_param_net(0.5);
        w.set_trainable(TrainablePattern::FcOnly);
        let before = w.conv_checksum();
        let mut v = Velocity::zeros(&w);
        let g = vec![Some(LayerGrad { weights: vec![3.0], bias: vec![1.0] }), Some(LayerGrad { weights: vec![1.0], bias: vec![1.0] })];
        for e in 1..20 {
            sgd_step(&mut w, &g, &TrainHyper { lr0: 0.01, ..Default::default() }, &mut v, e).unwrap();
        }
        assert_eq!(w.conv_checksum(), before);
        assert_eq!(w.layers()[0].weights[0], 1.0);
        assert_ne!(w.layers()[1].weights[0], 0.5);
    }
}
