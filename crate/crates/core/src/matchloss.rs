//! Permutation-invariant instance loss.
//!
//! The first `min(n, n_hat)` predicted masks are matched one-to-one to the
//! ground-truth masks so that the summed relaxed IoU is maximal (Hungarian
//! algorithm). The loss is the negated matched sum plus `lambda` times the
//! binary cross entropy of each score against "an instance is still left"
//! (`t <= n`). Forward and backward are explicit: the loss is a point-wise
//! minimum over matchings, and its gradient is that of the minimizing one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Binary `h x w` mask, one byte per pixel holding 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "mask",
                format!("{} values for {height}x{width}", data.len()),
            ));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Contract("mask values must be 0 or 1".into()));
        }
        Ok(Mask {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn area(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn intersection(&self, other: &Mask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a != 0 && b != 0)
            .count()
    }

    /// Mask as a `[1, h, w]` tensor of zeros and ones.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::of(v as f64)).collect();
        Tensor::from_vec(&[1, self.height, self.width], data).expect("mask shape")
    }

    /// Mean pixel position `(y, x)`; `None` for an empty mask.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sy, mut sx, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    sy += y as f64;
                    sx += x as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sy / n as f64, sx / n as f64))
    }
}

/// Ground-truth instances of one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceLabelSet {
    pub height: usize,
    pub width: usize,
    pub masks: Vec<Mask>,
}

impl InstanceLabelSet {
    pub fn new(height: usize, width: usize, masks: Vec<Mask>) -> Result<Self> {
        for m in &masks {
            if m.height() != height || m.width() != width {
                return Err(Error::shape(
                    "labels",
                    format!(
                        "mask {}x{} in a {height}x{width} set",
                        m.height(),
                        m.width()
                    ),
                ));
            }
        }
        Ok(InstanceLabelSet {
            height,
            width,
            masks,
        })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Soft masks `[1, h, w]` in `[0, 1]` and scores in `[0, 1]`, one per step.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedSequence<T> {
    pub masks: Vec<Tensor<T>>,
    pub scores: Vec<T>,
}

impl<T: Real> PredictedSequence<T> {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.masks.len() != self.scores.len() {
            return Err(Error::Contract(format!(
                "{} masks but {} scores",
                self.masks.len(),
                self.scores.len()
            )));
        }
        let unit = |v: T| v >= T::zero() && v <= T::one();
        if let Some(first) = self.masks.first() {
            for m in &self.masks {
                if m.shape() != first.shape() {
                    return Err(Error::shape("predicted masks", "masks differ in shape"));
                }
                if !m.data().iter().all(|&v| unit(v)) {
                    return Err(Error::Contract("mask values outside [0, 1]".into()));
                }
            }
        }
        if !self.scores.iter().all(|&s| unit(s)) {
            return Err(Error::Contract("scores outside [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the score term.
    pub lambda: f64,
    /// Scores are clamped to `[eps, 1 - eps]` before the logarithm.
    pub score_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            score_epsilon: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.score_epsilon > 0.0 && self.score_epsilon < 0.5) {
            return Err(Error::Contract(format!("invalid loss config {self:?}")));
        }
        Ok(())
    }
}

fn iou_parts<T: Real>(pred: &[T], target: &[T]) -> (f64, f64) {
    let (mut inter, mut sp, mut st) = (0.0f64, 0.0f64, 0.0f64);
    for (&p, &t) in pred.iter().zip(target) {
        let (p, t) = (p.as_f64(), t.as_f64());
        inter += p * t;
        sp += p;
        st += t;
    }
    (inter, sp + st - inter)
}

fn iou_slices<T: Real>(pred: &[T], target: &[T]) -> f64 {
    let (inter, denom) = iou_parts(pred, target);
    if denom == 0.0 {
        0.0
    } else {
        inter / denom
    }
}

fn iou_grad_slices<T: Real>(pred: &[T], target: &[T]) -> Vec<f64> {
    let (inter, denom) = iou_parts(pred, target);
    if denom == 0.0 {
        return vec![0.0; pred.len()];
    }
    let d2 = denom * denom;
    target
        .iter()
        .map(|&t| {
            let t = t.as_f64();
            (t * denom - inter * (1.0 - t)) / d2
        })
        .collect()
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "relaxed_iou",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// `<p, y> / (|p|_1 + |y|_1 - <p, y>)`; zero when both inputs vanish.
pub fn relaxed_iou<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    same_shape(pred, target)?;
    Ok(iou_slices(pred.data(), target.data()))
}

/// Gradient of [`relaxed_iou`] with respect to `pred`.
pub fn relaxed_iou_grad<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(pred, target)?;
    let g = iou_grad_slices(pred.data(), target.data());
    Tensor::from_f64(pred.shape(), &g)
}

/// Dense `rows x cols` score matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "score matrix",
                format!("{} entries for {rows}x{cols}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract(
                "score matrix entries must be finite".into(),
            ));
        }
        Ok(ScoreMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("score matrix", "ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Partial one-to-one assignment of predictions (rows) to ground truths
/// (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// `n_tilde = min(n, n_hat)` rows that took part in the matching.
    pub rows: usize,
    /// `n` ground-truth columns.
    pub cols: usize,
    /// Column matched to each row, if any.
    pub assignment: Vec<Option<usize>>,
    /// Sum of the matched entries.
    pub matched_sum: f64,
}

impl MatchResult {
    /// Indicator matrix `delta`, row-major `rows x cols`.
    pub fn indicator(&self) -> Vec<u8> {
        let mut delta = vec![0u8; self.rows * self.cols];
        for (r, c) in self.assignment.iter().enumerate() {
            if let Some(c) = c {
                delta[r * self.cols + c] = 1;
            }
        }
        delta
    }

    /// True when every row and every column is used at most once.
    pub fn is_feasible(&self) -> bool {
        let mut used = vec![false; self.cols];
        self.assignment.len() == self.rows
            && self
                .assignment
                .iter()
                .flatten()
                .all(|&c| c < self.cols && !std::mem::replace(&mut used[c], true))
    }
}

fn matched_sum(m: &ScoreMatrix, assignment: &[Option<usize>]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| m.get(r, c)))
        .fold(0.0, |acc, v| acc + v)
}

/// Maximum-weight partial assignment (Kuhn-Munkres with potentials).
///
/// The matrix is padded to a square one with zero entries and negative
/// entries are floored at zero, which makes "leave unmatched" an explicit
/// option worth zero. Pairs landing on padding or on a negative entry are
/// reported as unmatched.
pub fn hungarian(m: &ScoreMatrix) -> MatchResult {
    let (rows, cols) = (m.rows(), m.cols());
    let n = rows.max(cols);
    if rows == 0 || cols == 0 {
        return MatchResult {
            rows,
            cols,
            assignment: vec![None; rows],
            matched_sum: 0.0,
        };
    }
    let cost = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            -m.get(i, j).max(0.0)
        } else {
            0.0
        }
    };
    // 1-based potentials; column 0 is the virtual root of each augmentation
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![None; rows];
    for j in 1..=n {
        let (i, c) = (owner[j] - 1, j - 1);
        if i < rows && c < cols && m.get(i, c) >= 0.0 {
            assignment[i] = Some(c);
        }
    }
    let matched_sum = matched_sum(m, &assignment);
    MatchResult {
        rows,
        cols,
        assignment,
        matched_sum,
    }
}

/// Largest side accepted by [`brute_force_match`].
pub const BRUTE_FORCE_LIMIT: usize = 8;

/// Exhaustive maximum over every partial injection of rows into columns.
pub fn brute_force_match(m: &ScoreMatrix) -> Result<MatchResult> {
    let (rows, cols) = (m.rows(), m.cols());
    if rows.max(cols) > BRUTE_FORCE_LIMIT {
        return Err(Error::Contract(format!(
            "brute force matching is capped at {BRUTE_FORCE_LIMIT}, got {rows}x{cols}"
        )));
    }
    struct Search<'a> {
        m: &'a ScoreMatrix,
        used: Vec<bool>,
        current: Vec<Option<usize>>,
        best: Vec<Option<usize>>,
        best_sum: f64,
    }
    impl Search<'_> {
        fn go(&mut self, row: usize, acc: f64) {
            if row == self.m.rows() {
                if acc > self.best_sum {
                    self.best_sum = acc;
                    self.best = self.current.clone();
                }
                return;
            }
            self.current[row] = None;
            self.go(row + 1, acc);
            for c in 0..self.m.cols() {
                if self.used[c] {
                    continue;
                }
                self.used[c] = true;
                self.current[row] = Some(c);
                self.go(row + 1, acc + self.m.get(row, c));
                self.used[c] = false;
            }
            self.current[row] = None;
        }
    }
    let mut s = Search {
        m,
        used: vec![false; cols],
        current: vec![None; rows],
        best: vec![None; rows],
        best_sum: 0.0,
    };
    s.go(0, 0.0);
    Ok(MatchResult {
        rows,
        cols,
        matched_sum: s.best_sum,
        assignment: s.best,
    })
}

/// Outcome of comparing [`hungarian`] with [`brute_force_match`] on random
/// matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conformance {
    pub trials: usize,
    pub exact: usize,
    pub worst_difference: f64,
}

/// Matrices with uniform `[0, 1)` entries and independent side lengths in
/// `1..=max_size`; agreement means matched sums within `1e-12`.
pub fn conformance(trials: usize, max_size: usize, seed: u64) -> Result<Conformance> {
    use rand::{Rng, SeedableRng};
    if max_size == 0 || max_size > BRUTE_FORCE_LIMIT {
        return Err(Error::Contract(format!(
            "max size must be within 1..={BRUTE_FORCE_LIMIT}"
        )));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Conformance {
        trials,
        exact: 0,
        worst_difference: 0.0,
    };
    for _ in 0..trials {
        let rows = rng.random_range(1..=max_size);
        let cols = rng.random_range(1..=max_size);
        let data = (0..rows * cols).map(|_| rng.random::<f64>()).collect();
        let m = ScoreMatrix::new(rows, cols, data)?;
        let fast = hungarian(&m);
        let slow = brute_force_match(&m)?;
        let diff = (fast.matched_sum - slow.matched_sum).abs();
        out.worst_difference = out.worst_difference.max(diff);
        if diff <= 1e-12 && fast.is_feasible() {
            out.exact += 1;
        }
    }
    Ok(out)
}

/// Relaxed IoU between each of the first `min(n, n_hat)` predictions and
/// each ground truth.
pub fn iou_matrix<T: Real>(
    pred: &PredictedSequence<T>,
    gt: &InstanceLabelSet,
) -> Result<ScoreMatrix> {
    let rows = pred.len().min(gt.len());
    let targets: Vec<Tensor<T>> = gt.masks.iter().map(|m| m.to_tensor()).collect();
    let mut data = Vec::with_capacity(rows * gt.len());
    for p in &pred.masks[..rows] {
        for t in &targets {
            data.push(relaxed_iou(p, t)?);
        }
    }
    ScoreMatrix::new(rows, gt.len(), data)
}

fn bce(target: f64, s: f64, eps: f64) -> f64 {
    let s = s.clamp(eps, 1.0 - eps);
    -(target * s.ln() + (1.0 - target) * (1.0 - s).ln())
}

fn bce_grad(target: f64, s: f64, eps: f64) -> f64 {
    let s = s.clamp(eps, 1.0 - eps);
    -target / s + (1.0 - target) / (1.0 - s)
}

fn score_term<T: Real>(pred: &PredictedSequence<T>, n: usize, eps: f64) -> f64 {
    pred.scores
        .iter()
        .enumerate()
        .map(|(t, &s)| bce(if t < n { 1.0 } else { 0.0 }, s.as_f64(), eps))
        .sum()
}

fn check_inputs<T: Real>(
    pred: &PredictedSequence<T>,
    gt: &InstanceLabelSet,
    cfg: &LossConfig,
) -> Result<()> {
    cfg.validate()?;
    pred.validate()?;
    if let Some(m) = pred.masks.first() {
        if m.shape() != [1, gt.height, gt.width] {
            return Err(Error::shape(
                "loss",
                format!(
                    "predicted masks {:?} vs labels {}x{}",
                    m.shape(),
                    gt.height,
                    gt.width
                ),
            ));
        }
    }
    Ok(())
}

/// Loss value and the matching that attains it.
pub fn loss_forward<T: Real>(
    pred: &PredictedSequence<T>,
    gt: &InstanceLabelSet,
    cfg: &LossConfig,
) -> Result<(f64, MatchResult)> {
    check_inputs(pred, gt, cfg)?;
    let m = iou_matrix(pred, gt)?;
    let matching = hungarian(&m);
    let cost = -matching.matched_sum + cfg.lambda * score_term(pred, gt.len(), cfg.score_epsilon);
    Ok((cost, matching))
}

/// Loss value under a caller-chosen feasible assignment of the first
/// `min(n, n_hat)` predictions.
pub fn loss_with_assignment<T: Real>(
    pred: &PredictedSequence<T>,
    gt: &InstanceLabelSet,
    assignment: &[Option<usize>],
    cfg: &LossConfig,
) -> Result<f64> {
    check_inputs(pred, gt, cfg)?;
    let rows = pred.len().min(gt.len());
    let candidate = MatchResult {
        rows,
        cols: gt.len(),
        assignment: assignment.to_vec(),
        matched_sum: 0.0,
    };
    if !candidate.is_feasible() {
        return Err(Error::Contract(
            "assignment is not a partial matching".into(),
        ));
    }
    let mut total = 0.0;
    for (r, c) in assignment.iter().enumerate() {
        if let Some(c) = c {
            total += relaxed_iou(&pred.masks[r], &gt.masks[*c].to_tensor())?;
        }
    }
    Ok(-total + cfg.lambda * score_term(pred, gt.len(), cfg.score_epsilon))
}

/// Gradients of the loss with respect to every mask pixel and score.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGradients<T> {
    pub masks: Vec<Tensor<T>>,
    pub scores: Vec<T>,
}

/// Backward pass for the matching found by [`loss_forward`] on the same
/// inputs. Matched masks receive the negated relaxed-IoU gradient, unmatched
/// ones receive zero.
pub fn loss_backward<T: Real>(
    pred: &PredictedSequence<T>,
    gt: &InstanceLabelSet,
    matching: &MatchResult,
    cfg: &LossConfig,
) -> Result<LossGradients<T>> {
    check_inputs(pred, gt, cfg)?;
    let rows = pred.len().min(gt.len());
    let stale = || Error::Contract("match does not belong to these inputs".into());
    if matching.rows != rows || matching.cols != gt.len() || !matching.is_feasible() {
        return Err(stale());
    }
    let mut recomputed = 0.0;
    let mut masks = Vec::with_capacity(pred.len());
    for (t, p) in pred.masks.iter().enumerate() {
        match matching.assignment.get(t).copied().flatten() {
            Some(c) => {
                let target = gt.masks[c].to_tensor::<T>();
                recomputed += relaxed_iou(p, &target)?;
                let g = iou_grad_slices(p.data(), target.data());
                let neg: Vec<f64> = g.into_iter().map(|v| -v).collect();
                masks.push(Tensor::from_f64(p.shape(), &neg)?);
            }
            None => masks.push(Tensor::zeros(p.shape())),
        }
    }
    if recomputed != matching.matched_sum {
        return Err(stale());
    }
    let n = gt.len();
    let scores = pred
        .scores
        .iter()
        .enumerate()
        .map(|(t, &s)| {
            let target = if t < n { 1.0 } else { 0.0 };
            T::of(cfg.lambda * bce_grad(target, s.as_f64(), cfg.score_epsilon))
        })
        .collect();
    Ok(LossGradients { masks, scores })
}
