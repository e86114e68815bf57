use serde::{Deserialize, Serialize};

use super::dense::{DenseNet, GradTape};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state for one network. Moment buffers are allocated on the first
/// step and must stay congruent with the network afterwards.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    adam: AdamParams,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(Optimizer {
            kind,
            learning_rate,
            adam: AdamParams::default(),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Optimizer::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Result<Self> {
        Optimizer::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn with_adam_params(mut self, params: AdamParams) -> Self {
        self.adam = params;
        self
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    pub fn step(&mut self, net: &mut DenseNet, tape: &GradTape) -> Result<()> {
        if !tape.is_congruent(net) {
            return Err(Error::Shape("gradient tape is not congruent with the network".into()));
        }
        tape.check_finite()?;
        match self.kind {
            OptimizerKind::Sgd => {
                let lr = self.learning_rate;
                for (i, g) in tape.layers().iter().enumerate() {
                    let layer = net.layer_mut(i);
                    for (w, d) in layer.weight_mut().data_mut().iter_mut().zip(g.weight.data()) {
                        *w -= lr * d;
                    }
                    for (b, d) in layer.bias_mut().iter_mut().zip(&g.bias) {
                        *b -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                let n = net.param_count();
                if self.m.is_empty() {
                    self.m = vec![0.0; n];
                    self.v = vec![0.0; n];
                } else if self.m.len() != n {
                    return Err(Error::Shape("optimizer moments belong to a different network".into()));
                }
                self.step += 1;
                let AdamParams { beta1, beta2, eps } = self.adam;
                let t = self.step as i32;
                let lr_t = self.learning_rate * (1.0 - beta2.powi(t)).sqrt() / (1.0 - beta1.powi(t));
                let mut offset = 0;
                for (i, g) in tape.layers().iter().enumerate() {
                    let layer = net.layer_mut(i);
                    let nw = g.weight.data().len();
                    let (m, v) = (&mut self.m[offset..offset + nw], &mut self.v[offset..offset + nw]);
                    adam_update(layer.weight_mut().data_mut(), g.weight.data(), m, v, beta1, beta2, eps, lr_t);
                    offset += nw;
                    let nb = g.bias.len();
                    let (m, v) = (&mut self.m[offset..offset + nb], &mut self.v[offset..offset + nb]);
                    adam_update(layer.bias_mut(), &g.bias, m, v, beta1, beta2, eps, lr_t);
                    offset += nb;
                }
                return Ok(());
            }
        }
        self.step += 1;
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], b1: f64, b2: f64, eps: f64, lr_t: f64) {
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        p[i] -= lr_t * m[i] / (v[i].sqrt() + eps);
    }
}
