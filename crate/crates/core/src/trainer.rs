//! Optimization: initialization, per-element clipping, Adam, one-image
//! training steps and the sequence-length curriculum. Also the inference
//! loop with the score-based stopping rule and dataset evaluation.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::convlstm::Gate;
use crate::data::{self, SceneSample};
use crate::error::{Error, Result};
use crate::matchloss::{self, InstanceLabelSet, LossConfig, MatchResult, PredictedSequence};
use crate::metrics::{self, DiscreteLabeling, MetricsReport};
use crate::model::{self, ModelConfig, ModelParams, Session};
use crate::tensor::{DType, Real, Tape, Tensor};

/// Bound of the uniform initialization.
pub const INIT_RANGE: f64 = 0.08;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Factor applied to the learning rate when the final stage plateaus.
    pub lr_decay: f64,
    /// Decays allowed in the final stage before training stops.
    pub max_lr_decays: usize,
    /// Epochs compared by the plateau detector.
    pub plateau_window: usize,
    /// Relative improvement below which the loss counts as flat.
    pub plateau_tolerance: f64,
    /// Per-element gradient bound.
    pub clip: f64,
    pub loss: LossConfig,
    /// Unroll cap of the first curriculum stage.
    pub curriculum_start: usize,
    /// Steps unrolled beyond the instance count.
    pub extra_steps: usize,
    pub max_epochs_per_stage: usize,
    /// Upper bound on the final cap; `None` derives it from the data.
    pub stage_cap: Option<usize>,
    pub augment: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub precision: DType,
    /// Wall-clock limit for the whole curriculum.
    pub time_budget_secs: Option<f64>,
    /// Longest sequence emitted at inference time.
    pub max_inference_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            lr_decay: 0.1,
            max_lr_decays: 2,
            plateau_window: 5,
            plateau_tolerance: 0.01,
            clip: 5.0,
            loss: LossConfig::default(),
            curriculum_start: 2,
            extra_steps: 2,
            max_epochs_per_stage: 30,
            stage_cap: None,
            augment: false,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            precision: DType::F32,
            time_budget_secs: None,
            max_inference_steps: 12,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.learning_rate,
            self.lr_decay,
            self.plateau_tolerance,
            self.clip,
            self.adam_eps,
        ];
        if positive.iter().any(|v| !(*v > 0.0))
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.plateau_window == 0
            || self.curriculum_start == 0
            || self.max_epochs_per_stage == 0
            || self.max_inference_steps == 0
            || self.stage_cap == Some(0)
        {
            return Err(Error::Contract(format!("invalid train config {self:?}")));
        }
        self.loss.validate()
    }

    /// Unroll length for an image with `n` instances under `cap`.
    pub fn unroll_length(&self, n: usize, cap: usize) -> usize {
        (n + self.extra_steps).min(cap).max(1)
    }

    /// Cap of stage `k`, counting from 1.
    pub fn stage_cap_of(&self, k: usize) -> usize {
        self.curriculum_start + k - 1
    }

    /// Cap of the last stage for a dataset whose largest count is `max_n`.
    pub fn final_cap(&self, max_n: usize) -> usize {
        let natural = (max_n + self.extra_steps).max(self.curriculum_start);
        match self.stage_cap {
            Some(c) => natural.min(c.max(self.curriculum_start)),
            None => natural,
        }
    }
}

/// Uniform `[-0.08, 0.08]` everywhere, then every forget-gate bias set to 1.
/// Values are drawn in double precision and rounded, so both precisions
/// start from the same point.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    let mut params = ModelParams::<T>::zeros(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v = T::of(rng.random_range(-INIT_RANGE..=INIT_RANGE));
        }
    }
    for layer in &mut params.lstm {
        layer.gate_bias_mut(Gate::Forget).fill(T::one());
    }
    Ok(params)
}

pub fn clip_value<T: Real>(g: T, c: T) -> T {
    if g > c {
        c
    } else if g < -c {
        -c
    } else {
        g
    }
}

/// Element-wise clamp to `[-c, c]`.
pub fn clip_gradients<T: Real>(grads: &mut [Tensor<T>], c: f64) {
    let c = T::of(c);
    for g in grads {
        for v in g.data_mut() {
            *v = clip_value(*v, c);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ModelParams<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .named()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn check(&self, params: &ModelParams<T>) -> Result<()> {
        let named = params.named();
        if self.m.len() != named.len() || self.v.len() != named.len() {
            return Err(Error::Contract(
                "optimizer state does not match parameters".into(),
            ));
        }
        for ((name, p), (m, v)) in named.iter().zip(self.m.iter().zip(&self.v)) {
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return Err(Error::shape("adam", format!("moments of {name}")));
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    state.check(params)?;
    let mut tensors = params.tensors_mut();
    if grads.len() != tensors.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            tensors.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let c1 = T::of(1.0 - state.beta1.powi(t));
    let c2 = T::of(1.0 - state.beta2.powi(t));
    let (lr, eps) = (T::of(lr), T::of(state.eps));
    let one = T::one();
    for (i, p) in tensors.iter_mut().enumerate() {
        let g = &grads[i];
        if g.shape() != p.shape() {
            return Err(Error::shape(
                "adam",
                format!("gradient {i}: {:?} vs {:?}", g.shape(), p.shape()),
            ));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            let gk = g.data()[k];
            m[k] = b1 * m[k] + (one - b1) * gk;
            v[k] = b2 * v[k] + (one - b2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Loss, gradients (in [`ModelParams::named`] order) and matching for one
/// image unrolled `steps` times.
pub struct LossAndGrad<T> {
    pub loss: f64,
    pub grads: Vec<Tensor<T>>,
    pub matching: MatchResult,
    /// Largest absolute hidden-state value seen in the last step.
    pub last_hidden_max: f64,
}

pub fn predict_on<T: Real>(tape: &Tape<T>, out: &model::SequenceVars) -> PredictedSequence<T> {
    PredictedSequence {
        masks: out.masks.iter().map(|&m| tape.value(m).clone()).collect(),
        scores: out.scores.iter().map(|&s| tape.value(s).item()).collect(),
    }
}

pub fn loss_and_grad<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    image: &Tensor<T>,
    labels: &InstanceLabelSet,
    steps: usize,
    loss_cfg: &LossConfig,
) -> Result<LossAndGrad<T>> {
    let mut tape = Tape::new();
    let vars = params.record(&mut tape);
    let img = tape.constant(image.clone());
    let out = model::forward_on(&mut tape, &vars, img, steps, cfg.head_order)?;
    let pred = predict_on(&tape, &out);
    let (loss, matching) = matchloss::loss_forward(&pred, labels, loss_cfg)?;
    let last_hidden_max = out
        .hidden
        .last()
        .map_or(0.0, |&h| tape.value(h).max_abs().as_f64());
    if !loss.is_finite() {
        return Ok(LossAndGrad {
            loss,
            grads: Vec::new(),
            matching,
            last_hidden_max,
        });
    }
    let lg = matchloss::loss_backward(&pred, labels, &matching, loss_cfg)?;
    let mut seeds = Vec::with_capacity(2 * steps);
    for (var, g) in out.masks.iter().zip(lg.masks) {
        seeds.push((*var, g));
    }
    for (var, g) in out.scores.iter().zip(lg.scores) {
        seeds.push((*var, Tensor::from_vec(&[1], vec![g])?));
    }
    let mut grads = tape.backward_seeded(seeds)?;
    let grads = vars
        .all()
        .into_iter()
        .map(|v| grads.take(&tape, v))
        .collect();
    Ok(LossAndGrad {
        loss,
        grads,
        matching,
        last_hidden_max,
    })
}

/// Outcome of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub unrolled: usize,
    /// Largest absolute gradient element after clipping.
    pub grad_max_abs: f64,
}

/// One CSV row of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub stage: usize,
    pub loss: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "step,stage,loss,lr";

impl LogRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{}", self.step, self.stage, self.loss, self.lr)
    }
}

/// Fires when the best epoch-mean loss of the last `window` epochs improves
/// on the best before them by less than `tolerance`, relatively.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauDetector {
    pub window: usize,
    pub tolerance: f64,
    history: Vec<f64>,
}

impl PlateauDetector {
    pub fn new(window: usize, tolerance: f64) -> Self {
        PlateauDetector {
            window,
            tolerance,
            history: Vec::new(),
        }
    }

    pub fn reset(&mut self) {
        self.history.clear();
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }

    /// Record an epoch mean; true when the loss has flattened.
    pub fn push(&mut self, epoch_mean: f64) -> bool {
        self.history.push(epoch_mean);
        if self.history.len() <= self.window {
            return false;
        }
        let split = self.history.len() - self.window;
        let best = |s: &[f64]| s.iter().copied().fold(f64::INFINITY, f64::min);
        let before = best(&self.history[..split]);
        let recent = best(&self.history[split..]);
        let improvement = (before - recent) / before.abs().max(1e-12);
        improvement < self.tolerance
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageEnd {
    Plateau,
    EpochLimit,
    TimeBudget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub cap: usize,
    pub epoch_means: Vec<f64>,
    pub lr_at_end: f64,
    pub ended_by: StageEnd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumReport {
    pub stages: Vec<StageRecord>,
    pub final_cap: usize,
    pub steps: u64,
    pub seconds: f64,
    pub checkpoints: Vec<PathBuf>,
}

impl CurriculumReport {
    /// Mean loss of the last completed epoch of the last stage.
    pub fn final_loss(&self) -> Option<f64> {
        self.stages
            .last()
            .and_then(|s| s.epoch_means.last().copied())
    }

    pub fn reached_final_stage(&self) -> bool {
        self.stages.last().is_some_and(|s| s.cap == self.final_cap)
    }
}

/// Parameters, optimizer and schedule position of one training run.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub params: ModelParams<T>,
    pub adam: AdamState<T>,
    pub lr: f64,
    pub step: u64,
    pub stage: usize,
    pub epoch: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = init_params(&model, config.seed)?;
        Ok(Self::with_params(model, config, params))
    }

    pub fn with_params(model: ModelConfig, config: TrainConfig, params: ModelParams<T>) -> Self {
        let adam = AdamState::new(&params, config.beta1, config.beta2, config.adam_eps);
        Trainer {
            lr: config.learning_rate,
            model,
            config,
            params,
            adam,
            step: 0,
            stage: 1,
            epoch: 0,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint<T>) -> Result<Self> {
        let meta = ckpt.meta;
        ckpt.params.check_config(&meta.model)?;
        let adam = match ckpt.adam {
            Some(a) => a,
            None => AdamState::new(
                &ckpt.params,
                meta.train.beta1,
                meta.train.beta2,
                meta.train.adam_eps,
            ),
        };
        adam.check(&ckpt.params)?;
        Ok(Trainer {
            model: meta.model,
            config: meta.train,
            params: ckpt.params,
            adam,
            lr: meta.learning_rate,
            step: meta.step,
            stage: meta.stage,
            epoch: meta.epoch,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            params: self.params.clone(),
            adam: Some(self.adam.clone()),
            meta: CheckpointMeta {
                model: self.model.clone(),
                train: self.config.clone(),
                stage: self.stage,
                epoch: self.epoch,
                step: self.step,
                learning_rate: self.lr,
            },
        }
    }

    fn diagnostics(&self, lg: &LossAndGrad<T>) -> String {
        let gates: Vec<String> = self
            .params
            .lstm
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let means: Vec<String> = Gate::ALL
                    .iter()
                    .map(|&g| {
                        let b = l.gate_bias(g);
                        let mean = b.iter().map(|v| v.as_f64()).sum::<f64>() / b.len() as f64;
                        format!("{}={mean:.4}", g.name())
                    })
                    .collect();
                format!("layer {i} bias means [{}]", means.join(", "))
            })
            .collect();
        format!(
            "loss {} at step {}: params l2 {:.6e}, last hidden max {:.6e}, {}",
            lg.loss,
            self.step,
            self.params.l2_norm(),
            lg.last_hidden_max,
            gates.join("; ")
        )
    }

    /// Forward, matched loss, backpropagation through time, clip and Adam on
    /// one image.
    pub fn train_step(&mut self, sample: &SceneSample, cap: usize) -> Result<StepOutcome> {
        let steps = self.config.unroll_length(sample.labels.len(), cap);
        let image = sample.image.cast::<T>();
        let mut lg = loss_and_grad(
            &self.params,
            &self.model,
            &image,
            &sample.labels,
            steps,
            &self.config.loss,
        )?;
        if !lg.loss.is_finite() || lg.grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(self.diagnostics(&lg)));
        }
        clip_gradients(&mut lg.grads, self.config.clip);
        let grad_max_abs = lg
            .grads
            .iter()
            .map(|g| g.max_abs().as_f64())
            .fold(0.0, f64::max);
        adam_step(&mut self.params, &lg.grads, &mut self.adam, self.lr)?;
        self.step += 1;
        Ok(StepOutcome {
            loss: lg.loss,
            unrolled: steps,
            grad_max_abs,
        })
    }

    /// Visit order and (optionally augmented) samples of one epoch.
    fn epoch_samples<'a>(
        &self,
        data: &'a [SceneSample],
    ) -> Result<Vec<std::borrow::Cow<'a, SceneSample>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x005e_ed0f_e90c);
        rng.set_stream(self.epoch as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        order
            .into_iter()
            .map(|i| {
                if self.config.augment {
                    data::augment(&data[i], &mut rng).map(std::borrow::Cow::Owned)
                } else {
                    Ok(std::borrow::Cow::Borrowed(&data[i]))
                }
            })
            .collect()
    }

    /// Curriculum over the unroll cap. A plateau in an intermediate stage
    /// raises the cap by one; a plateau in the final stage decays the
    /// learning rate until `max_lr_decays` is used up, then training stops.
    /// Each stage also ends after `max_epochs_per_stage` epochs. When `out`
    /// is set, a checkpoint is written after every stage.
    pub fn run_curriculum(
        &mut self,
        data: &[SceneSample],
        out: Option<&Path>,
        mut on_step: impl FnMut(&LogRow),
    ) -> Result<CurriculumReport> {
        if data.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        let started = Instant::now();
        let max_n = data.iter().map(|s| s.labels.len()).max().unwrap_or(0);
        let final_cap = self.config.final_cap(max_n);
        let mut report = CurriculumReport {
            stages: Vec::new(),
            final_cap,
            steps: 0,
            seconds: 0.0,
            checkpoints: Vec::new(),
        };
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let budget = self.config.time_budget_secs;
        let over_budget = |t: &Instant| budget.is_some_and(|b| t.elapsed().as_secs_f64() > b);
        let mut plateau =
            PlateauDetector::new(self.config.plateau_window, self.config.plateau_tolerance);
        let mut decays = 0;
        'stages: loop {
            let cap = self.config.stage_cap_of(self.stage).min(final_cap);
            let is_final = cap >= final_cap;
            plateau.reset();
            let mut record = StageRecord {
                stage: self.stage,
                cap,
                epoch_means: Vec::new(),
                lr_at_end: self.lr,
                ended_by: StageEnd::EpochLimit,
            };
            let mut stage_epochs = 0;
            let mut stop = false;
            while stage_epochs < self.config.max_epochs_per_stage {
                let mut sum = 0.0;
                let mut count = 0usize;
                for sample in self.epoch_samples(data)? {
                    if over_budget(&started) {
                        record.ended_by = StageEnd::TimeBudget;
                        break;
                    }
                    let o = self.train_step(&sample, cap)?;
                    sum += o.loss;
                    count += 1;
                    on_step(&LogRow {
                        step: self.step,
                        stage: self.stage,
                        loss: o.loss,
                        lr: self.lr,
                    });
                }
                if record.ended_by == StageEnd::TimeBudget {
                    // a partial epoch is still reported, marked by the stop
                    if count > 0 {
                        record.epoch_means.push(sum / count as f64);
                    }
                    stop = true;
                    break;
                }
                self.epoch += 1;
                stage_epochs += 1;
                let mean = sum / count as f64;
                record.epoch_means.push(mean);
                if plateau.push(mean) {
                    if !is_final {
                        record.ended_by = StageEnd::Plateau;
                        break;
                    }
                    if decays < self.config.max_lr_decays {
                        decays += 1;
                        self.lr *= self.config.lr_decay;
                        plateau.reset();
                        continue;
                    }
                    record.ended_by = StageEnd::Plateau;
                    stop = true;
                    break;
                }
            }
            record.lr_at_end = self.lr;
            let done = stop || is_final;
            report.stages.push(record);
            if let Some(dir) = out {
                let path = dir.join(format!("stage{}.ckpt", self.stage));
                self.checkpoint().save(&path)?;
                report.checkpoints.push(path);
            }
            if done {
                break 'stages;
            }
            self.stage += 1;
        }
        report.steps = self.step;
        report.seconds = started.elapsed().as_secs_f64();
        Ok(report)
    }
}

/// Writes loss-log rows as CSV with [`LOG_HEADER`].
pub struct LossLog {
    writer: BufWriter<fs::File>,
    path: PathBuf,
}

impl LossLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = BufWriter::new(file);
        writeln!(writer, "{LOG_HEADER}").map_err(|e| Error::io(path, e))?;
        Ok(LossLog {
            writer,
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, row: &LogRow) -> Result<()> {
        writeln!(self.writer, "{}", row.csv()).map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Masks and scores up to and including the first score below 0.5.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference<T> {
    pub masks: Vec<Tensor<T>>,
    pub scores: Vec<T>,
}

impl<T: Real> Inference<T> {
    pub fn sequence(&self) -> PredictedSequence<T> {
        PredictedSequence {
            masks: self.masks.clone(),
            scores: self.scores.clone(),
        }
    }
}

pub fn infer<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    image: &Tensor<T>,
    max_steps: usize,
) -> Result<Inference<T>> {
    params.check_config(cfg)?;
    let mut tape = Tape::frozen();
    let vars = params.record(&mut tape);
    let img = tape.constant(image.clone());
    let mut session = Session::start(&mut tape, &vars, img, cfg.head_order)?;
    let mut out = Inference {
        masks: Vec::new(),
        scores: Vec::new(),
    };
    for _ in 0..max_steps {
        let (m, s, _) = session.next(&mut tape)?;
        let score = tape.value(s).item();
        out.masks.push(tape.value(m).clone());
        out.scores.push(score);
        if score.as_f64() < metrics::DECISION {
            break;
        }
    }
    Ok(out)
}

pub fn decode_image<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    image: &Tensor<T>,
    max_steps: usize,
) -> Result<DiscreteLabeling> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let inf = infer(params, cfg, image, max_steps)?;
    metrics::decode(&inf.sequence(), h, w)
}

/// Inference with the stopping rule on every sample, then the metrics
/// report.
pub fn evaluate<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    data: &[SceneSample],
    max_steps: usize,
) -> Result<MetricsReport> {
    params.check_config(cfg)?;
    let mut entries = Vec::with_capacity(data.len());
    for s in data {
        let decoded = decode_image(params, cfg, &s.image.cast::<T>(), max_steps)?;
        entries.push((s.id.clone(), decoded, s.labels.clone()));
    }
    MetricsReport::build(&entries)
}
