//! Full network: encoder, recurrent stack and output heads.

use serde::{Deserialize, Serialize};

use crate::convlstm::{ConvLstmParams, ConvLstmVars, Recurrence};
use crate::error::{Error, Result};
use crate::fcn::{self, FcnParams, FcnVars};
use crate::inhibition::{self, HeadOrder, InhibitionParams, InhibitionVars};
use crate::nnops::Conv2dParams;
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Image channels `c`.
    pub in_channels: usize,
    /// Feature and state channels `d`.
    pub channels: usize,
    /// Kernel size of each encoder layer, first to last.
    pub fcn_kernels: Vec<usize>,
    /// Stride of the first encoder layer.
    pub stride: usize,
    pub lstm_layers: usize,
    /// Gate convolution size `f`.
    pub gate_kernel: usize,
    pub head_order: HeadOrder,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            channels: 16,
            fcn_kernels: vec![9, 3, 3, 3, 3],
            stride: 2,
            lstm_layers: 2,
            gate_kernel: 3,
            head_order: HeadOrder::UpsampleThenSigmoid,
        }
    }
}

impl ModelConfig {
    /// The 30-channel, stride-5 encoder used on 500x530 leaf images.
    pub fn plant() -> Self {
        ModelConfig {
            in_channels: 3,
            channels: 30,
            stride: 5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let odd = |k: usize| k % 2 == 1;
        if self.in_channels == 0
            || self.channels == 0
            || self.stride == 0
            || self.lstm_layers == 0
            || self.fcn_kernels.is_empty()
            || !self.fcn_kernels.iter().all(|&k| odd(k))
            || !odd(self.gate_kernel)
        {
            return Err(Error::Contract(format!("invalid model config {self:?}")));
        }
        Ok(())
    }
}

/// Every learnable tensor of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub fcn: FcnParams<T>,
    pub lstm: Vec<ConvLstmParams<T>>,
    pub head: InhibitionParams<T>,
}

impl<T: Real> ModelParams<T> {
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.channels;
        let mut layers = Vec::with_capacity(cfg.fcn_kernels.len());
        let mut c_in = cfg.in_channels;
        for &k in &cfg.fcn_kernels {
            layers.push(Conv2dParams::zeros(d, c_in, k));
            c_in = d;
        }
        Ok(ModelParams {
            fcn: FcnParams {
                layers,
                stride: cfg.stride,
            },
            lstm: (0..cfg.lstm_layers)
                .map(|_| ConvLstmParams::zeros(d, d, cfg.gate_kernel))
                .collect(),
            head: InhibitionParams::zeros(d),
        })
    }

    /// Stable names and references, in checkpoint order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.fcn.layers.iter().enumerate() {
            out.push((format!("fcn.{i}.weight"), &l.weight));
            out.push((format!("fcn.{i}.bias"), &l.bias));
        }
        for (i, l) in self.lstm.iter().enumerate() {
            out.push((format!("lstm.{i}.w_x"), &l.w_x));
            out.push((format!("lstm.{i}.w_h"), &l.w_h));
            out.push((format!("lstm.{i}.bias"), &l.bias));
        }
        out.push(("head.proj.weight".into(), &self.head.proj.weight));
        out.push(("head.proj.bias".into(), &self.head.proj.bias));
        out.push(("head.threshold".into(), &self.head.threshold));
        out.push(("head.conf.weight".into(), &self.head.conf_weight));
        out.push(("head.conf.bias".into(), &self.head.conf_bias));
        out
    }

    /// Mutable references in the same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.fcn.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        for l in &mut self.lstm {
            out.push(&mut l.w_x);
            out.push(&mut l.w_h);
            out.push(&mut l.bias);
        }
        let h = &mut self.head;
        out.push(&mut h.proj.weight);
        out.push(&mut h.proj.bias);
        out.push(&mut h.threshold);
        out.push(&mut h.conf_weight);
        out.push(&mut h.conf_bias);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.named()
            .iter()
            .flat_map(|(_, t)| t.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let conv = |c: &Conv2dParams<T>| Conv2dParams {
            weight: c.weight.cast(),
            bias: c.bias.cast(),
        };
        ModelParams {
            fcn: FcnParams {
                layers: self.fcn.layers.iter().map(conv).collect(),
                stride: self.fcn.stride,
            },
            lstm: self
                .lstm
                .iter()
                .map(|l| ConvLstmParams {
                    w_x: l.w_x.cast(),
                    w_h: l.w_h.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
            head: InhibitionParams {
                proj: conv(&self.head.proj),
                threshold: self.head.threshold.cast(),
                conf_weight: self.head.conf_weight.cast(),
                conf_bias: self.head.conf_bias.cast(),
            },
        }
    }

    /// Check that the tensors agree with `cfg`.
    pub fn check_config(&self, cfg: &ModelConfig) -> Result<()> {
        let reference = ModelParams::<T>::zeros(cfg)?;
        let ours = self.named();
        let theirs = reference.named();
        if ours.len() != theirs.len() {
            return Err(Error::Contract(format!(
                "parameter count {} does not match config ({})",
                ours.len(),
                theirs.len()
            )));
        }
        for ((name, a), (_, b)) in ours.iter().zip(&theirs) {
            if a.shape() != b.shape() {
                return Err(Error::shape(
                    "model",
                    format!("{name}: {:?} vs config {:?}", a.shape(), b.shape()),
                ));
            }
        }
        if self.fcn.stride != cfg.stride {
            return Err(Error::Contract("encoder stride differs from config".into()));
        }
        Ok(())
    }

    pub fn record(&self, tape: &mut Tape<T>) -> ParamVars {
        ParamVars {
            fcn: self.fcn.record(tape),
            lstm: self.lstm.iter().map(|l| l.record(tape)).collect(),
            head: self.head.record(tape),
        }
    }
}

/// Tape handles of every parameter, in the order of [`ModelParams::named`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub fcn: FcnVars,
    pub lstm: Vec<ConvLstmVars>,
    pub head: InhibitionVars,
}

impl ParamVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in &self.fcn.layers {
            out.push(l.weight);
            out.push(l.bias);
        }
        for l in &self.lstm {
            out.extend([l.w_x, l.w_h, l.bias]);
        }
        let h = &self.head;
        out.extend([
            h.proj.weight,
            h.proj.bias,
            h.threshold,
            h.conf_weight,
            h.conf_bias,
        ]);
        out
    }
}

/// Outputs of one unrolled forward pass, still on the tape.
#[derive(Clone, Debug)]
pub struct SequenceVars {
    pub features: Var,
    /// `[1, H, W]` per step.
    pub masks: Vec<Var>,
    /// `[1]` per step.
    pub scores: Vec<Var>,
    /// Top-layer hidden state per step.
    pub hidden: Vec<Var>,
}

/// Runs the encoder once and the recurrence incrementally.
pub struct Session<'a> {
    vars: &'a ParamVars,
    features: Var,
    target: (usize, usize),
    order: HeadOrder,
    recurrence: Recurrence,
}

impl<'a> Session<'a> {
    pub fn start<T: Real>(
        tape: &mut Tape<T>,
        vars: &'a ParamVars,
        image: Var,
        order: HeadOrder,
    ) -> Result<Self> {
        let shape = tape.shape(image).to_vec();
        let features = fcn::extract_on(tape, image, &vars.fcn)?;
        Ok(Session {
            vars,
            features,
            target: (shape[1], shape[2]),
            order,
            recurrence: Recurrence::new(vars.lstm.clone())?,
        })
    }

    pub fn features(&self) -> Var {
        self.features
    }

    /// One iteration: `(mask, score, hidden)`.
    pub fn next<T: Real>(&mut self, tape: &mut Tape<T>) -> Result<(Var, Var, Var)> {
        let state = self.recurrence.advance(tape, self.features)?;
        let mask =
            inhibition::segment_head_on(tape, state.h, &self.vars.head, self.target, self.order)?;
        let score = inhibition::confidence_head_on(tape, state.h, &self.vars.head)?;
        Ok((mask, score, state.h))
    }
}

/// Forward pass for a fixed number of steps.
pub fn forward_on<T: Real>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    image: Var,
    steps: usize,
    order: HeadOrder,
) -> Result<SequenceVars> {
    if steps == 0 {
        return Err(Error::Contract("forward needs at least one step".into()));
    }
    let mut session = Session::start(tape, vars, image, order)?;
    let mut out = SequenceVars {
        features: session.features(),
        masks: Vec::with_capacity(steps),
        scores: Vec::with_capacity(steps),
        hidden: Vec::with_capacity(steps),
    };
    for _ in 0..steps {
        let (m, s, h) = session.next(tape)?;
        out.masks.push(m);
        out.scores.push(s);
        out.hidden.push(h);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_and_vars_align() {
        let cfg = ModelConfig {
            channels: 3,
            ..ModelConfig::default()
        };
        let params = ModelParams::<f64>::zeros(&cfg).unwrap();
        let mut tape = Tape::new();
        let vars = params.record(&mut tape);
        let names = params.named();
        let all = vars.all();
        assert_eq!(names.len(), all.len());
        for ((_, t), v) in names.iter().zip(&all) {
            assert_eq!(t.shape(), tape.shape(*v));
        }
        assert_eq!(names.len(), 5 * 2 + 2 * 3 + 5);
    }

    #[test]
    fn config_check_catches_mismatch() {
        let cfg = ModelConfig::default();
        let params = ModelParams::<f64>::zeros(&cfg).unwrap();
        params.check_config(&cfg).unwrap();
        let other = ModelConfig { channels: 8, ..cfg };
        assert!(params.check_config(&other).is_err());
    }

    #[test]
    fn forward_shapes() {
        let cfg = ModelConfig {
            channels: 4,
            ..ModelConfig::default()
        };
        let params = ModelParams::<f64>::zeros(&cfg).unwrap();
        let mut tape = Tape::new();
        let vars = params.record(&mut tape);
        let img = tape.constant(Tensor::zeros(&[1, 20, 18]));
        let out = forward_on(&mut tape, &vars, img, 3, HeadOrder::default()).unwrap();
        assert_eq!(out.masks.len(), 3);
        assert_eq!(tape.shape(out.features), &[4, 10, 9]);
        assert_eq!(tape.shape(out.masks[2]), &[1, 20, 18]);
        assert_eq!(tape.value(out.scores[0]).item(), 0.5);
    }
}
