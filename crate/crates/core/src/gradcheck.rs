//! Central finite-difference checks of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matchloss::{self, InstanceLabelSet, LossConfig, Mask, PredictedSequence};
use crate::model::{self, ModelConfig, ModelParams};
use crate::tensor::{Tape, Tensor, Var};
use crate::trainer;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    /// Perturbation `h` of the central difference.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Lower bound of the relative-error denominator.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-6,
            tolerance: 1e-5,
            floor: 1e-6,
        }
    }
}

impl GradCheckConfig {
    /// Whole-network setting. Parameter gradients here reach 1e-7, where
    /// cancellation noise at `h = 1e-6` (about 2e-10) alone exceeds 1e-4
    /// relative, so the step is raised to 1e-5.
    pub fn network() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
        }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst_relative: f64,
    /// Name and flat index of the worst element.
    pub worst_at: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    fn new(tolerance: f64) -> Self {
        GradCheckReport {
            checked: 0,
            worst_relative: 0.0,
            worst_at: String::new(),
            worst_analytic: 0.0,
            worst_numeric: 0.0,
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        self.worst_relative < self.tolerance
    }

    fn record(&mut self, at: impl FnOnce() -> String, analytic: f64, numeric: f64, floor: f64) {
        self.checked += 1;
        let rel = relative_error(analytic, numeric, floor);
        if rel > self.worst_relative || self.worst_at.is_empty() {
            self.worst_relative = rel;
            self.worst_at = at();
            self.worst_analytic = analytic;
            self.worst_numeric = numeric;
        }
    }

    pub fn merge(mut self, other: GradCheckReport) -> Self {
        self.checked += other.checked;
        if other.worst_relative > self.worst_relative || self.worst_at.is_empty() {
            self.worst_relative = other.worst_relative;
            self.worst_at = other.worst_at;
            self.worst_analytic = other.worst_analytic;
            self.worst_numeric = other.worst_numeric;
        }
        self
    }
}

/// Central difference of `f` with respect to element `i` of `x`.
pub fn central_difference(
    x: &mut [f64],
    i: usize,
    h: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<f64> {
    let orig = x[i];
    x[i] = orig + h;
    let plus = f(x)?;
    x[i] = orig - h;
    let minus = f(x)?;
    x[i] = orig;
    Ok((plus - minus) / (2.0 * h))
}

/// Compare the tape gradient of `build(tape, inputs) -> scalar` against
/// finite differences for every element of every input.
pub fn check_op(
    inputs: &[Tensor<f64>],
    gc: &GradCheckConfig,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut report = GradCheckReport::new(gc.tolerance);
    let mut values = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(&tape, *var);
        for i in 0..values[k].len() {
            let orig = values[k].data()[i];
            values[k].data_mut()[i] = orig + gc.step;
            let plus = eval(&values)?;
            values[k].data_mut()[i] = orig - gc.step;
            let minus = eval(&values)?;
            values[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * gc.step);
            report.record(
                || format!("input{k}[{i}]"),
                analytic.data()[i],
                numeric,
                gc.floor,
            );
        }
    }
    Ok(report)
}

/// Loss gradient with respect to every mask pixel and score, with the
/// matching found at the unperturbed point held fixed.
pub fn check_loss(
    pred: &PredictedSequence<f64>,
    gt: &InstanceLabelSet,
    cfg: &LossConfig,
    gc: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let (_, matching) = matchloss::loss_forward(pred, gt, cfg)?;
    let grads = matchloss::loss_backward(pred, gt, &matching, cfg)?;
    let assignment = matching.assignment.clone();
    let cost =
        |p: &PredictedSequence<f64>| matchloss::loss_with_assignment(p, gt, &assignment, cfg);
    let mut report = GradCheckReport::new(gc.tolerance);
    let mut p = pred.clone();
    for t in 0..p.len() {
        for i in 0..p.masks[t].len() {
            let orig = p.masks[t].data()[i];
            p.masks[t].data_mut()[i] = orig + gc.step;
            let plus = cost(&p)?;
            p.masks[t].data_mut()[i] = orig - gc.step;
            let minus = cost(&p)?;
            p.masks[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * gc.step);
            report.record(
                || format!("mask{t}[{i}]"),
                grads.masks[t].data()[i],
                numeric,
                gc.floor,
            );
        }
        let orig = p.scores[t];
        p.scores[t] = orig + gc.step;
        let plus = cost(&p)?;
        p.scores[t] = orig - gc.step;
        let minus = cost(&p)?;
        p.scores[t] = orig;
        let numeric = (plus - minus) / (2.0 * gc.step);
        report.record(|| format!("score{t}"), grads.scores[t], numeric, gc.floor);
    }
    Ok(report)
}

/// Whole-pipeline check: every parameter of the network, loss evaluated
/// under the matching of the unperturbed forward pass.
pub fn check_model(
    params: &ModelParams<f64>,
    cfg: &ModelConfig,
    image: &Tensor<f64>,
    gt: &InstanceLabelSet,
    steps: usize,
    loss_cfg: &LossConfig,
    gc: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let base = trainer::loss_and_grad(params, cfg, image, gt, steps, loss_cfg)?;
    if !base.loss.is_finite() {
        return Err(Error::NonFinite("gradient check base loss".into()));
    }
    let assignment = base.matching.assignment.clone();
    let cost = |p: &ModelParams<f64>| -> Result<f64> {
        let mut tape = Tape::frozen();
        let vars = p.record(&mut tape);
        let img = tape.constant(image.clone());
        let out = model::forward_on(&mut tape, &vars, img, steps, cfg.head_order)?;
        let pred = trainer::predict_on(&tape, &out);
        matchloss::loss_with_assignment(&pred, gt, &assignment, loss_cfg)
    };
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let mut report = GradCheckReport::new(gc.tolerance);
    let mut p = params.clone();
    for (k, name) in names.iter().enumerate() {
        let len = base.grads[k].len();
        for i in 0..len {
            let orig = p.tensors_mut()[k].data()[i];
            p.tensors_mut()[k].data_mut()[i] = orig + gc.step;
            let plus = cost(&p)?;
            p.tensors_mut()[k].data_mut()[i] = orig - gc.step;
            let minus = cost(&p)?;
            p.tensors_mut()[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * gc.step);
            report.record(
                || format!("{name}[{i}]"),
                base.grads[k].data()[i],
                numeric,
                gc.floor,
            );
        }
    }
    Ok(report)
}

/// Small random problem for the whole-pipeline check: a `size x size`
/// image with two square instances, `channels` feature channels,
/// parameters uniform in `[-scale, scale]`.
pub struct Problem {
    pub model: ModelConfig,
    pub params: ModelParams<f64>,
    pub image: Tensor<f64>,
    pub labels: InstanceLabelSet,
}

pub fn tiny_problem(seed: u64, size: usize, channels: usize, scale: f64) -> Result<Problem> {
    let model = ModelConfig {
        channels,
        ..ModelConfig::default()
    };
    let mut params = ModelParams::<f64>::zeros(&model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-scale..=scale);
        }
    }
    let image = Tensor::uniform_with(&mut rng, 0.0, 1.0, &[1, size, size]);
    let half = size / 2;
    let mut a = Mask::empty(size, size);
    let mut b = Mask::empty(size, size);
    for y in 0..half {
        for x in 0..half {
            a.set(y, x, true);
            b.set(y + half, x + half, true);
        }
    }
    let labels = InstanceLabelSet::new(size, size, vec![a, b])?;
    Ok(Problem {
        model,
        params,
        image,
        labels,
    })
}

/// Random `size x size` ground truth with `n` instances of roughly 30%
/// density, and `steps` predicted masks and scores in `[0.05, 0.95]`.
pub fn random_loss_problem(
    seed: u64,
    size: usize,
    n: usize,
    steps: usize,
) -> Result<(PredictedSequence<f64>, InstanceLabelSet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masks = (0..n)
        .map(|_| {
            let on = (0..size * size)
                .map(|_| rng.random_bool(0.3) as u8)
                .collect();
            Mask::new(size, size, on)
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = InstanceLabelSet::new(size, size, masks)?;
    let masks = (0..steps)
        .map(|_| Tensor::uniform_with(&mut rng, 0.05, 0.95, &[1, size, size]))
        .collect();
    let scores = (0..steps).map(|_| rng.random_range(0.05..0.95)).collect();
    Ok((PredictedSequence { masks, scores }, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_cases() {
        assert_eq!(relative_error(1.0, 1.0, 1e-6), 0.0);
        assert_eq!(relative_error(2.0, 1.0, 1e-6), 0.5);
        assert_eq!(relative_error(0.0, 1e-9, 1e-6), 1e-3);
    }

    #[test]
    fn quadratic_op() {
        let x = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let r = check_op(&[x], &GradCheckConfig::default(), |t, v| {
            let sq = t.mul(v[0], v[0])?;
            t.sum(sq)
        })
        .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.worst_relative < 1e-8, "{r:?}");
    }

    #[test]
    fn central_difference_of_cube() {
        let mut x = vec![2.0];
        let d = central_difference(&mut x, 0, 1e-5, |v| Ok(v[0].powi(3))).unwrap();
        assert!((d - 12.0).abs() < 1e-6);
        assert_eq!(x, vec![2.0]);
    }
}
