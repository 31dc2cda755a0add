//! Convolutional LSTM cell and its unrolled stack.
//!
//! Gate weights are stored stacked along the output-channel axis in the order
//! input, forget, output, candidate, so one convolution per source (input and
//! previous hidden state) computes all four gate pre-activations.

use crate::error::{Error, Result};
use crate::nnops::{self, Padding};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Input,
    Forget,
    Output,
    Candidate,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Input, Gate::Forget, Gate::Output, Gate::Candidate];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Gate::Input => "i",
            Gate::Forget => "f",
            Gate::Output => "o",
            Gate::Candidate => "g",
        }
    }
}

/// `w_x [4d, d_in, f, f]`, `w_h [4d, d, f, f]`, `bias [4d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmParams<T> {
    pub w_x: Tensor<T>,
    pub w_h: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> ConvLstmParams<T> {
    pub fn zeros(d_in: usize, d: usize, f: usize) -> Self {
        ConvLstmParams {
            w_x: Tensor::zeros(&[4 * d, d_in, f, f]),
            w_h: Tensor::zeros(&[4 * d, d, f, f]),
            bias: Tensor::zeros(&[4 * d]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_h.shape()[1]
    }

    pub fn input_channels(&self) -> usize {
        self.w_x.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.w_x.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.hidden();
        let xs = self.w_x.shape();
        let hs = self.w_h.shape();
        let ok = xs.len() == 4
            && hs.len() == 4
            && xs[0] == 4 * d
            && hs[0] == 4 * d
            && hs[1] == d
            && xs[2] == xs[3]
            && hs[2] == hs[3]
            && xs[2] == hs[2]
            && xs[2] % 2 == 1
            && self.bias.shape() == [4 * d];
        if ok {
            Ok(())
        } else {
            Err(Error::shape(
                "convlstm",
                format!("w_x {:?}, w_h {:?}, bias {:?}", xs, hs, self.bias.shape()),
            ))
        }
    }

    /// Bias slice `[d]` of one gate.
    pub fn gate_bias(&self, gate: Gate) -> &[T] {
        let d = self.hidden();
        &self.bias.data()[gate.index() * d..(gate.index() + 1) * d]
    }

    pub fn gate_bias_mut(&mut self, gate: Gate) -> &mut [T] {
        let d = self.hidden();
        &mut self.bias.data_mut()[gate.index() * d..(gate.index() + 1) * d]
    }

    pub fn record(&self, tape: &mut Tape<T>) -> ConvLstmVars {
        ConvLstmVars {
            w_x: tape.leaf(self.w_x.clone()),
            w_h: tape.leaf(self.w_h.clone()),
            bias: tape.leaf(self.bias.clone()),
            hidden: self.hidden(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvLstmVars {
    pub w_x: Var,
    pub w_h: Var,
    pub bias: Var,
    pub hidden: usize,
}

/// Hidden and cell state, both `[d, h', w']`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmState<T> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Real> ConvLstmState<T> {
    pub fn zeros(d: usize, height: usize, width: usize) -> Self {
        ConvLstmState {
            h: Tensor::zeros(&[d, height, width]),
            c: Tensor::zeros(&[d, height, width]),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub h: Var,
    pub c: Var,
}

/// One cell update on the tape. `prev = None` is the all-zero initial state,
/// whose recurrent convolution and forget term vanish and are skipped.
pub fn step_on<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    prev: Option<StateVars>,
    p: &ConvLstmVars,
) -> Result<StateVars> {
    let d = p.hidden;
    if let Some(prev) = prev {
        let (xs, hs, cs) = (tape.shape(x), tape.shape(prev.h), tape.shape(prev.c));
        if xs[1..] != hs[1..] || hs != cs {
            return Err(Error::shape(
                "convlstm step",
                format!("x {xs:?}, h {hs:?}, c {cs:?}"),
            ));
        }
    }
    let mut z = nnops::conv2d(tape, x, p.w_x, Some(p.bias), 1, Padding::Same)?;
    if let Some(prev) = prev {
        let zh = nnops::conv2d(tape, prev.h, p.w_h, None, 1, Padding::Same)?;
        z = tape.add(z, zh)?;
    }
    let gate = |tape: &mut Tape<T>, g: Gate| tape.slice_channels(z, g.index() * d, d);
    let zi = gate(tape, Gate::Input)?;
    let zf = gate(tape, Gate::Forget)?;
    let zo = gate(tape, Gate::Output)?;
    let zg = gate(tape, Gate::Candidate)?;
    let i = nnops::sigmoid(tape, zi)?;
    let o = nnops::sigmoid(tape, zo)?;
    let g = nnops::tanh(tape, zg)?;
    let mut c = tape.mul(i, g)?;
    if let Some(prev) = prev {
        let f = nnops::sigmoid(tape, zf)?;
        let keep = tape.mul(f, prev.c)?;
        c = tape.add(keep, c)?;
    }
    let tc = nnops::tanh(tape, c)?;
    let h = tape.mul(o, tc)?;
    Ok(StateVars { h, c })
}

/// Value-level single step.
pub fn step<T: Real>(
    x: &Tensor<T>,
    prev: &ConvLstmState<T>,
    p: &ConvLstmParams<T>,
) -> Result<ConvLstmState<T>> {
    p.validate()?;
    let mut tape = Tape::new();
    let vars = p.record(&mut tape);
    let xv = tape.constant(x.clone());
    let prev = StateVars {
        h: tape.constant(prev.h.clone()),
        c: tape.constant(prev.c.clone()),
    };
    let next = step_on(&mut tape, xv, Some(prev), &vars)?;
    Ok(ConvLstmState {
        h: tape.value(next.h).clone(),
        c: tape.value(next.c).clone(),
    })
}

/// Layered recurrence over a constant input. Layer `l > 0` consumes the hidden
/// state of layer `l - 1` as its input.
pub struct Recurrence {
    layers: Vec<ConvLstmVars>,
    states: Vec<Option<StateVars>>,
}

impl Recurrence {
    pub fn new(layers: Vec<ConvLstmVars>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Contract(
                "convlstm stack needs at least one layer".into(),
            ));
        }
        let states = vec![None; layers.len()];
        Ok(Recurrence { layers, states })
    }

    /// Advance every layer once and return the top layer's state.
    pub fn advance<T: Real>(&mut self, tape: &mut Tape<T>, input: Var) -> Result<StateVars> {
        let mut x = input;
        for (layer, state) in self.layers.iter().zip(self.states.iter_mut()) {
            let next = step_on(tape, x, *state, layer)?;
            *state = Some(next);
            x = next.h;
        }
        Ok(self
            .states
            .last()
            .copied()
            .flatten()
            .expect("non-empty stack"))
    }
}

/// Tape-level unroll for `steps` iterations from zero state.
pub fn unroll_on<T: Real>(
    tape: &mut Tape<T>,
    input: Var,
    layers: &[ConvLstmVars],
    steps: usize,
) -> Result<Vec<StateVars>> {
    if steps == 0 {
        return Err(Error::Contract("unroll needs at least one step".into()));
    }
    let mut rec = Recurrence::new(layers.to_vec())?;
    (0..steps).map(|_| rec.advance(tape, input)).collect()
}

/// Value-level unroll; returns the top-layer state after each step.
pub fn unroll<T: Real>(
    input: &Tensor<T>,
    layers: &[ConvLstmParams<T>],
    steps: usize,
) -> Result<Vec<ConvLstmState<T>>> {
    for l in layers {
        l.validate()?;
    }
    let mut tape = Tape::new();
    let vars: Vec<_> = layers.iter().map(|l| l.record(&mut tape)).collect();
    let x = tape.constant(input.clone());
    let states = unroll_on(&mut tape, x, &vars, steps)?;
    Ok(states
        .into_iter()
        .map(|s| ConvLstmState {
            h: tape.value(s.h).clone(),
            c: tape.value(s.c).clone(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(d: usize, f: usize, seed: u64) -> ConvLstmParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ConvLstmParams {
            w_x: Tensor::uniform_with(&mut rng, -0.5, 0.5, &[4 * d, d, f, f]),
            w_h: Tensor::uniform_with(&mut rng, -0.5, 0.5, &[4 * d, d, f, f]),
            bias: Tensor::uniform_with(&mut rng, -0.5, 0.5, &[4 * d]),
        }
    }

    #[test]
    fn zero_params_zero_state_is_fixed_point() {
        let p = ConvLstmParams::<f64>::zeros(3, 3, 3);
        let x = Tensor::full(&[3, 4, 5], 0.7);
        let next = step(&x, &ConvLstmState::zeros(3, 4, 5), &p).unwrap();
        assert!(next.h.data().iter().all(|&v| v == 0.0));
        assert!(next.c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_params_halve_the_cell() {
        let p = ConvLstmParams::<f64>::zeros(2, 2, 3);
        let x = Tensor::full(&[2, 3, 3], -1.3);
        let c_prev: Vec<f64> = (0..18).map(|i| (i as f64 - 9.0) * 0.4).collect();
        let prev = ConvLstmState {
            h: Tensor::zeros(&[2, 3, 3]),
            c: Tensor::from_vec(&[2, 3, 3], c_prev.clone()).unwrap(),
        };
        let next = step(&x, &prev, &p).unwrap();
        for ((&c, &h), &cp) in next.c.data().iter().zip(next.h.data()).zip(&c_prev) {
            assert!((c - 0.5 * cp).abs() < 1e-12);
            assert!((h - 0.5 * (0.5 * cp).tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = ConvLstmParams::<f64>::zeros(2, 2, 3);
        let x = Tensor::zeros(&[2, 3, 3]);
        let prev = ConvLstmState::zeros(2, 4, 3);
        assert!(step(&x, &prev, &p).is_err());
    }

    #[test]
    fn unroll_zero_params_stays_zero() {
        let layers = vec![ConvLstmParams::<f64>::zeros(2, 2, 3); 2];
        let b = Tensor::full(&[2, 4, 4], 3.0);
        let states = unroll(&b, &layers, 3).unwrap();
        assert_eq!(states.len(), 3);
        for s in states {
            assert!(s.h.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn unroll_single_step_matches_step() {
        let p = random_params(2, 3, 1);
        let b = Tensor::uniform_with(&mut ChaCha8Rng::seed_from_u64(2), -1.0, 1.0, &[2, 4, 5]);
        let one = unroll(&b, std::slice::from_ref(&p), 1).unwrap();
        let direct = step(&b, &ConvLstmState::zeros(2, 4, 5), &p).unwrap();
        for (a, e) in one[0].h.data().iter().zip(direct.h.data()) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn unroll_is_causal_and_bounded() {
        let layers = vec![random_params(3, 3, 4), random_params(3, 3, 5)];
        let b = Tensor::uniform_with(&mut ChaCha8Rng::seed_from_u64(6), -2.0, 2.0, &[3, 5, 4]);
        let short = unroll(&b, &layers, 2).unwrap();
        let long = unroll(&b, &layers, 3).unwrap();
        assert_eq!(short[..], long[..2]);
        for s in &long {
            assert!(s.h.data().iter().all(|&v| v > -1.0 && v < 1.0));
        }
    }

    #[test]
    fn unroll_errors() {
        let b = Tensor::<f64>::zeros(&[2, 3, 3]);
        assert!(unroll(&b, &[], 2).is_err());
        let layers = vec![ConvLstmParams::<f64>::zeros(2, 2, 3)];
        assert!(unroll(&b, &layers, 0).is_err());
    }

    #[test]
    fn gate_bias_slices() {
        let mut p = ConvLstmParams::<f64>::zeros(2, 3, 1);
        p.gate_bias_mut(Gate::Forget).fill(1.0);
        assert_eq!(p.gate_bias(Gate::Forget), &[1.0; 3]);
        assert_eq!(p.gate_bias(Gate::Input), &[0.0; 3]);
        assert_eq!(&p.bias.data()[3..6], &[1.0; 3]);
    }
}
