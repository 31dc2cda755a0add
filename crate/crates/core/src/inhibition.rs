//! Spatial inhibition output head.
//!
//! The mask branch projects the hidden state to one channel, normalizes it
//! with a log-softmax over all pixels so that pixels compete with each other,
//! shifts it by a learned threshold and squashes it with a sigmoid. The score
//! branch max-pools each channel globally and feeds the result to a logistic
//! unit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnops::{self, Conv2dParams, ConvVars, Padding};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Where the bilinear upsampling sits relative to the final sigmoid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadOrder {
    /// `sigmoid(upsample(lsm + b))`
    #[default]
    UpsampleThenSigmoid,
    /// `upsample(sigmoid(lsm + b))`
    SigmoidThenUpsample,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InhibitionParams<T> {
    /// `d -> 1` projection with a 1x1 kernel.
    pub proj: Conv2dParams<T>,
    /// Learned threshold `[1]`.
    pub threshold: Tensor<T>,
    /// `[1, d]`
    pub conf_weight: Tensor<T>,
    /// `[1]`
    pub conf_bias: Tensor<T>,
}

impl<T: Real> InhibitionParams<T> {
    pub fn zeros(d: usize) -> Self {
        InhibitionParams {
            proj: Conv2dParams::zeros(1, d, 1),
            threshold: Tensor::zeros(&[1]),
            conf_weight: Tensor::zeros(&[1, d]),
            conf_bias: Tensor::zeros(&[1]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ws = self.proj.weight.shape();
        let d = ws.get(1).copied().unwrap_or(0);
        if ws != [1, d, 1, 1]
            || self.proj.bias.shape() != [1]
            || self.threshold.shape() != [1]
            || self.conf_weight.shape() != [1, d]
            || self.conf_bias.shape() != [1]
        {
            return Err(Error::shape(
                "inhibition",
                format!("proj {:?}, conf_weight {:?}", ws, self.conf_weight.shape()),
            ));
        }
        Ok(())
    }

    pub fn record(&self, tape: &mut Tape<T>) -> InhibitionVars {
        InhibitionVars {
            proj: self.proj.record(tape),
            threshold: tape.leaf(self.threshold.clone()),
            conf_weight: tape.leaf(self.conf_weight.clone()),
            conf_bias: tape.leaf(self.conf_bias.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct InhibitionVars {
    pub proj: ConvVars,
    pub threshold: Var,
    pub conf_weight: Var,
    pub conf_bias: Var,
}

/// Mask logits at feature resolution: `log_softmax(proj(h)) + b`, `[1, h', w']`.
pub fn mask_logits_on<T: Real>(tape: &mut Tape<T>, h: Var, p: &InhibitionVars) -> Result<Var> {
    let proj = nnops::conv2d_with(tape, h, p.proj, 1, Padding::Same)?;
    let lsm = nnops::log_softmax_spatial(tape, proj)?;
    nnops::bias_scalar_add(tape, lsm, p.threshold)
}

/// Instance mask `[1, H, W]` with values in `(0, 1)`.
pub fn segment_head_on<T: Real>(
    tape: &mut Tape<T>,
    h: Var,
    p: &InhibitionVars,
    target: (usize, usize),
    order: HeadOrder,
) -> Result<Var> {
    let logits = mask_logits_on(tape, h, p)?;
    match order {
        HeadOrder::UpsampleThenSigmoid => {
            let up = nnops::upsample_bilinear(tape, logits, target)?;
            nnops::sigmoid(tape, up)
        }
        HeadOrder::SigmoidThenUpsample => {
            let s = nnops::sigmoid(tape, logits)?;
            nnops::upsample_bilinear(tape, s, target)
        }
    }
}

/// Confidence score as a `[1]` tensor.
pub fn confidence_head_on<T: Real>(tape: &mut Tape<T>, h: Var, p: &InhibitionVars) -> Result<Var> {
    let pooled = nnops::global_maxpool(tape, h)?;
    let z = nnops::linear(tape, pooled, p.conf_weight, p.conf_bias)?;
    nnops::sigmoid(tape, z)
}

pub fn segment_head<T: Real>(
    h: &Tensor<T>,
    p: &InhibitionParams<T>,
    target: (usize, usize),
    order: HeadOrder,
) -> Result<Tensor<T>> {
    p.validate()?;
    let mut tape = Tape::new();
    let vars = p.record(&mut tape);
    let hv = tape.constant(h.clone());
    let out = segment_head_on(&mut tape, hv, &vars, target, order)?;
    Ok(tape.value(out).clone())
}

pub fn confidence_head<T: Real>(h: &Tensor<T>, p: &InhibitionParams<T>) -> Result<T> {
    p.validate()?;
    let mut tape = Tape::new();
    let vars = p.record(&mut tape);
    let hv = tape.constant(h.clone());
    let out = confidence_head_on(&mut tape, hv, &vars)?;
    Ok(tape.value(out).item())
}

/// Per-pixel sum of absolute state values across channels, `[1, h', w']`.
/// Diagnostic only; never recorded on a tape.
pub fn state_summary<T: Real>(h: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = h.shape();
    if shape.len() != 3 {
        return Err(Error::shape("state_summary", format!("{shape:?}")));
    }
    let plane = shape[1] * shape[2];
    let mut out = vec![T::zero(); plane];
    for ch in h.data().chunks(plane) {
        for (o, &v) in out.iter_mut().zip(ch) {
            *o += v.abs();
        }
    }
    Tensor::from_vec(&[1, shape[1], shape[2]], out)
}
