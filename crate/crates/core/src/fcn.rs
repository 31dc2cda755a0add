//! Fully convolutional feature extractor: a stack of same-padded
//! convolutions, each followed by a ReLU. The first convolution carries the
//! stride that maps the `h x w` image onto the `h' x w'` feature lattice.

use crate::error::{Error, Result};
use crate::nnops::{self, Conv2dParams, ConvVars, Padding};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct FcnParams<T> {
    pub layers: Vec<Conv2dParams<T>>,
    /// Stride of the first convolution, i.e. the `h / h'` reduction.
    pub stride: usize,
}

impl<T: Real> FcnParams<T> {
    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels())
    }

    pub fn in_channels(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_channels())
    }

    /// Spatial size of the feature map produced for an `h x w` image.
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let reduce = |n: usize| (n - 1) / self.stride + 1;
        (reduce(h), reduce(w))
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.stride == 0 {
            return Err(Error::Contract(
                "fcn needs at least one layer and a positive stride".into(),
            ));
        }
        for pair in self.layers.windows(2) {
            if pair[0].out_channels() != pair[1].in_channels() {
                return Err(Error::shape(
                    "fcn",
                    format!(
                        "layer emits {} channels, next expects {}",
                        pair[0].out_channels(),
                        pair[1].in_channels()
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn record(&self, tape: &mut Tape<T>) -> FcnVars {
        FcnVars {
            layers: self.layers.iter().map(|l| l.record(tape)).collect(),
            stride: self.stride,
            first_kernel: self.layers.first().map_or(1, |l| l.kernel()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FcnVars {
    pub layers: Vec<ConvVars>,
    pub stride: usize,
    first_kernel: usize,
}

pub fn extract_on<T: Real>(tape: &mut Tape<T>, image: Var, p: &FcnVars) -> Result<Var> {
    let shape = tape.shape(image).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("fcn", format!("image shape {shape:?}")));
    }
    if shape[1] < p.first_kernel || shape[2] < p.first_kernel {
        return Err(Error::Contract(format!(
            "image {}x{} is smaller than the {}x{} receptive minimum",
            shape[1], shape[2], p.first_kernel, p.first_kernel
        )));
    }
    let mut x = image;
    for (idx, layer) in p.layers.iter().enumerate() {
        let stride = if idx == 0 { p.stride } else { 1 };
        let z = nnops::conv2d_with(tape, x, *layer, stride, Padding::Same)?;
        x = nnops::relu(tape, z)?;
    }
    Ok(x)
}

/// Value-level feature extraction `[c, h, w] -> [d, h', w']`.
pub fn extract<T: Real>(image: &Tensor<T>, p: &FcnParams<T>) -> Result<Tensor<T>> {
    p.validate()?;
    let mut tape = Tape::new();
    let vars = p.record(&mut tape);
    let x = tape.constant(image.clone());
    let out = extract_on(&mut tape, x, &vars)?;
    Ok(tape.value(out).clone())
}
