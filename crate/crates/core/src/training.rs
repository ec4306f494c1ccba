//! Supervised fine-tuning: AdamW with decoupled decay, epoch-granular
//! warmup plus cosine schedule, per-epoch frame resampling and
//! augmentation, history logging, checkpoint/resume and a
//! finite-difference gradient checker.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augmentation::{apply_train_augs, preprocess, AugConfig};
use crate::autograd::{Gradients, Graph};
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::dataset::{sample_frames, write_atomic, ClipRecord, FrameCache, Manifest};
use crate::encoders::{encode_text, forward_video, text_node, video_node};
use crate::error::{Error, Result};
use crate::evaluation::MetricsReport;
use crate::frame::FrameStack;
use crate::head::{loss_node, predict, TemperatureMode, MIN_TAU};
use crate::model::{decays, names, Model, ParameterStore};
use crate::rng::{clip_rng, seeded};
use crate::tensor::Tensor;
use crate::text::{category_prompts, BehaviourVocabulary, PromptTemplate, TokenSequence, Tokenizer};

/// Seed of the frame-sampling stream used for every evaluation pass.
pub const EVAL_SEED: u64 = 0x5eed_e7a1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augmentation: bool,
    pub prompt_remap: bool,
    pub temperature_mode: TemperatureMode,
    /// Evaluate the validation split after every epoch.
    pub validate_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 5e-4,
            weight_decay: 1e-3,
            warmup_epochs: 5,
            total_epochs: 30,
            batch_size: 8,
            seed: 0,
            augmentation: true,
            prompt_remap: true,
            temperature_mode: TemperatureMode::LearnableLog,
            validate_each_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) must be below total_epochs ({})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Learning rate for `epoch`, in `0..=total_epochs`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> Result<f64> {
    let (w, t) = (config.warmup_epochs, config.total_epochs);
    if epoch > t {
        return Err(Error::InvalidArgument(format!("epoch {epoch} beyond total {t}")));
    }
    if epoch < w {
        return Ok(config.base_lr * ((epoch + 1) as f64 / w as f64));
    }
    if epoch == t {
        return Ok(0.0);
    }
    let progress = (epoch - w) as f64 / (t - w) as f64;
    Ok(config.base_lr * 0.5 * (1.0 + (PI * progress).cos()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(params: &ParameterStore) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.rows(), t.cols())))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn check_against(&self, params: &ParameterStore) -> Result<()> {
        for moments in [&self.m, &self.v] {
            if moments.len() != params.len() {
                return Err(Error::Checkpoint("optimizer state does not cover the parameters".into()));
            }
            for (name, t) in moments {
                let p = params
                    .try_get(name)
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter {name}")))?;
                if p.shape() != t.shape() {
                    return Err(Error::ShapeMismatch {
                        name: name.clone(),
                        expected: p.shape().to_vec(),
                        found: t.shape().to_vec(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// One AdamW step. Parameters without a gradient are left untouched.
pub fn optimizer_step(
    params: &mut ParameterStore,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .try_get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                expected: p.shape().to_vec(),
                found: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    // Sorted order keeps the update sequence independent of hash order.
    let mut names: Vec<&String> = grads.keys().collect();
    names.sort();
    for name in names {
        let g = &grads[name];
        let p = params.get_mut(name).expect("checked above");
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
        let decay = if decays(name) { 1.0 - lr * weight_decay } else { 1.0 };
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            md[i] = BETA1 * md[i] + (1.0 - BETA1) * gi;
            vd[i] = BETA2 * vd[i] + (1.0 - BETA2) * gi * gi;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] = pd[i] * decay - lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    clamp_temperature(params);
    Ok(())
}

/// Enforces `τ ≥ MIN_TAU`.
pub fn clamp_temperature(params: &mut ParameterStore) {
    if let Some(t) = params.get_mut(names::LOG_TAU) {
        let floor = MIN_TAU.ln();
        for v in t.data_mut() {
            if *v < floor {
                *v = floor;
            }
        }
    }
}

/// Prompt rendering and tokenization settings shared by training and
/// evaluation.
#[derive(Debug, Clone)]
pub struct TextSetup {
    pub tokenizer: Tokenizer,
    pub template: PromptTemplate,
    pub vocabulary: BehaviourVocabulary,
}

impl TextSetup {
    pub fn desk() -> Self {
        Self {
            tokenizer: Tokenizer::desk(),
            template: PromptTemplate::default(),
            vocabulary: BehaviourVocabulary::default(),
        }
    }

    /// Token sequences for `categories`, remapped only when `remap` is set.
    pub fn prompts(&self, categories: &[String], remap: bool) -> Result<Vec<TokenSequence>> {
        let identity = BehaviourVocabulary::identity();
        let vocab = if remap { &self.vocabulary } else { &identity };
        category_prompts(categories, &self.template, vocab)
            .iter()
            .map(|p| self.tokenizer.tokenize(p))
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
    pub wall_time_s: f64,
}

/// Equality ignores wall time, which is the only non-deterministic field.
impl PartialEq for EpochRecord {
    fn eq(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.lr.to_bits() == other.lr.to_bits()
            && self.train_loss.to_bits() == other.train_loss.to_bits()
            && self.val_accuracy.map(f64::to_bits) == other.val_accuracy.map(f64::to_bits)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Everything a training run reads besides the model.
pub struct TrainJob<'a> {
    pub manifest: &'a Manifest,
    pub train: Vec<&'a ClipRecord>,
    pub val: Vec<&'a ClipRecord>,
    /// Category space of the text head; every training label must be in it.
    pub categories: Vec<String>,
    pub config: TrainConfig,
    pub aug: AugConfig,
    pub text: &'a TextSetup,
    pub cache: &'a FrameCache,
    /// Written after every epoch when set, enabling resume.
    pub checkpoint_path: Option<PathBuf>,
    /// Rewritten with one JSON line per completed epoch when set.
    pub history_path: Option<PathBuf>,
    /// Stop after this many completed epochs (simulated interruption).
    pub stop_after: Option<usize>,
    /// Tags copied into every checkpoint written by this run.
    pub tags: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: AdamState,
    /// Number of completed epochs.
    pub epoch: usize,
    pub history: TrainHistory,
}

impl TrainState {
    pub fn fresh(model: Model) -> Self {
        let optimizer = AdamState::new(&model.params);
        Self {
            model,
            optimizer,
            epoch: 0,
            history: TrainHistory::default(),
        }
    }

    pub fn to_checkpoint(&self, config: &TrainConfig, tags: &BTreeMap<String, String>) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: Some(self.optimizer.clone()),
            epoch: self.epoch,
            tags: tags.clone(),
            meta: serde_json::json!({
                "train_config": config,
                "history": self.history,
            }),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let history = match ckpt.meta.get("history") {
            Some(h) => serde_json::from_value(h.clone())?,
            None => TrainHistory::default(),
        };
        let optimizer = ckpt.optimizer.unwrap_or_else(|| AdamState::new(&ckpt.model.params));
        Ok(Self {
            model: ckpt.model,
            optimizer,
            epoch: ckpt.epoch,
            history,
        })
    }
}

fn label_indices(records: &[&ClipRecord], categories: &[String]) -> Result<Vec<usize>> {
    records
        .iter()
        .map(|r| {
            categories
                .iter()
                .position(|c| *c == r.label)
                .ok_or_else(|| Error::UnknownLabel {
                    label: r.label.clone(),
                    known: categories.join(", "),
                })
        })
        .collect()
}

/// Frame stack for training: per-epoch resampled and augmented.
fn train_stack(job: &TrainJob, clip: &ClipRecord, k: usize, epoch: usize) -> Result<FrameStack> {
    let mut rng = clip_rng(job.config.seed, "train", epoch as u64, &clip.clip_id);
    let stack = sample_frames(job.manifest, clip, k, &mut rng, job.cache)?;
    let mut aug = job.aug.clone();
    aug.enabled = job.config.augmentation && aug.enabled;
    Ok(apply_train_augs(&stack, &aug, &mut rng))
}

/// Runs (or resumes) supervised training until `total_epochs` or
/// `stop_after` completed epochs.
pub fn train_supervised(job: &TrainJob, mut state: TrainState) -> Result<TrainState> {
    job.config.validate()?;
    if job.train.is_empty() {
        return Err(Error::InsufficientData("training split is empty".into()));
    }
    let labels = label_indices(&job.train, &job.categories)?;
    let prompts = job.text.prompts(&job.categories, job.config.prompt_remap)?;
    let end = job
        .stop_after
        .map_or(job.config.total_epochs, |s| s.min(job.config.total_epochs));

    while state.epoch < end {
        let epoch = state.epoch;
        let started = Instant::now();
        let lr = lr_at(epoch, &job.config)?;
        let mut order: Vec<usize> = (0..job.train.len()).collect();
        order.shuffle(&mut seeded(job.config.seed, "shuffle", epoch as u64));

        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(job.config.batch_size).enumerate() {
            let stacks: Vec<FrameStack> = chunk
                .par_iter()
                .map(|&i| train_stack(job, job.train[i], state.model.config.frames, epoch))
                .collect::<Result<_>>()?;
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = batch_loss_and_grads(&state.model, &stacks, &batch_labels, &prompts, job.config.temperature_mode)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            loss_sum += loss * chunk.len() as f64;
            optimizer_step(&mut state.model.params, &grads, &mut state.optimizer, lr, job.config.weight_decay)?;
        }

        let val_accuracy = if job.config.validate_each_epoch && !job.val.is_empty() {
            Some(evaluate(&state.model, job.manifest, &job.val, &job.categories, job.text, job.config.prompt_remap, &job.aug, job.cache)?.overall_accuracy)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / job.train.len() as f64,
            val_accuracy,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        state.history.records.push(record);
        state.epoch += 1;
        if let Some(path) = &job.checkpoint_path {
            save_checkpoint(&state.to_checkpoint(&job.config, &job.tags), path)?;
        }
        if let Some(path) = &job.history_path {
            write_atomic(path, state.history.to_jsonl()?.as_bytes())?;
        }
    }
    Ok(state)
}

/// Loss and parameter gradients for one batch of prepared clips.
pub fn batch_loss_and_grads(
    model: &Model,
    stacks: &[FrameStack],
    labels: &[usize],
    prompts: &[TokenSequence],
    mode: TemperatureMode,
) -> Result<(f64, Gradients)> {
    let mut g = Graph::new();
    let texts = prompts
        .iter()
        .map(|p| text_node(&mut g, p, model))
        .collect::<Result<Vec<_>>>()?;
    let videos = stacks
        .iter()
        .map(|s| video_node(&mut g, s, model))
        .collect::<Result<Vec<_>>>()?;
    let loss = loss_node(&mut g, &videos, &texts, labels, model, mode)?;
    let value = g.value(loss).as_scalar();
    Ok((value, g.backward(loss)))
}

/// Deterministic evaluation frames: a fixed-seed sample, fill and resize.
pub fn eval_stack(manifest: &Manifest, clip: &ClipRecord, k: usize, aug: &AugConfig, cache: &FrameCache) -> Result<FrameStack> {
    let mut rng = clip_rng(EVAL_SEED, "eval", 0, &clip.clip_id);
    let stack = sample_frames(manifest, clip, k, &mut rng, cache)?;
    Ok(preprocess(&stack, aug))
}

/// Predicted category index for every record, in order.
#[allow(clippy::too_many_arguments)]
pub fn predict_records(
    model: &Model,
    manifest: &Manifest,
    records: &[&ClipRecord],
    categories: &[String],
    text: &TextSetup,
    remap: bool,
    aug: &AugConfig,
    cache: &FrameCache,
) -> Result<Vec<usize>> {
    let text_embs = text
        .prompts(categories, remap)?
        .iter()
        .map(|p| encode_text(p, model))
        .collect::<Result<Vec<_>>>()?;
    let tau = model.params.tau();
    records
        .par_iter()
        .map(|r| {
            let stack = eval_stack(manifest, r, model.config.frames, aug, cache)?;
            let v = forward_video(&stack, model)?;
            Ok(predict(&v, &text_embs, tau)?.index)
        })
        .collect()
}

/// Metrics over `records` in the category space `categories`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &Model,
    manifest: &Manifest,
    records: &[&ClipRecord],
    categories: &[String],
    text: &TextSetup,
    remap: bool,
    aug: &AugConfig,
    cache: &FrameCache,
) -> Result<MetricsReport> {
    let truth = label_indices(records, categories)?;
    let predicted = predict_records(model, manifest, records, categories, text, remap, aug, cache)?;
    MetricsReport::from_predictions(categories, &truth, &predicted)
}

/// Parameters covered by [`grad_check`].
pub const GRAD_CHECK_PARAMS: [&str; 5] = [
    names::IMAGE_PROJ,
    names::TEXT_PROJ,
    names::CLS_TOKEN,
    names::IMAGE_POS,
    names::PATCH_PROJ,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub coordinates: usize,
    pub max_relative_error: f64,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_relative_error).fold(0.0, f64::max)
    }
}

/// Relative error with a floor so that two tiny gradients agree.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central finite differences of the batch loss against the analytic
/// gradient, on `coords_per_param` sampled coordinates of each parameter
/// in [`GRAD_CHECK_PARAMS`].
pub fn grad_check(
    model: &Model,
    stacks: &[FrameStack],
    labels: &[usize],
    prompts: &[TokenSequence],
    step: f64,
    coords_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mode = TemperatureMode::LearnableLog;
    let (_, grads) = batch_loss_and_grads(model, stacks, labels, prompts, mode)?;
    let loss_at = |m: &Model| -> Result<f64> {
        let mut g = Graph::new();
        let texts = prompts.iter().map(|p| text_node(&mut g, p, m)).collect::<Result<Vec<_>>>()?;
        let videos = stacks.iter().map(|s| video_node(&mut g, s, m)).collect::<Result<Vec<_>>>()?;
        let l = loss_node(&mut g, &videos, &texts, labels, m, mode)?;
        Ok(g.value(l).as_scalar())
    };
    let mut rng = seeded(seed, "grad-check", 0);
    let mut entries = Vec::new();
    for name in GRAD_CHECK_PARAMS {
        let n = model.params.get(name).len();
        let analytic = grads
            .get(name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(model.params.get(name).rows(), model.params.get(name).cols()));
        let coords: Vec<usize> = if n <= coords_per_param {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, coords_per_param).into_vec()
        };
        let mut entry = GradCheckEntry {
            name: name.to_string(),
            coordinates: coords.len(),
            max_relative_error: 0.0,
            max_abs_analytic: 0.0,
            max_abs_numeric: 0.0,
        };
        let mut probe = model.clone();
        for &i in &coords {
            let orig = model.params.get(name).data()[i];
            probe.params.get_mut(name).unwrap().data_mut()[i] = orig + step;
            let up = loss_at(&probe)?;
            probe.params.get_mut(name).unwrap().data_mut()[i] = orig - step;
            let down = loss_at(&probe)?;
            probe.params.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[i];
            entry.max_relative_error = entry.max_relative_error.max(relative_error(a, numeric));
            entry.max_abs_analytic = entry.max_abs_analytic.max(a.abs());
            entry.max_abs_numeric = entry.max_abs_numeric.max(numeric.abs());
        }
        entries.push(entry);
    }
    Ok(GradCheckReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::load_checkpoint;
    use crate::dataset::{split_dataset, Split, SplitRatios};
    use crate::synth::{generate_synthetic_dataset, SynthConfig};
    use proptest::prelude::*;

    fn sched(base: f64, w: usize, t: usize) -> TrainConfig {
        TrainConfig {
            base_lr: base,
            warmup_epochs: w,
            total_epochs: t,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_examples() {
        let c = sched(1.0, 5, 25);
        assert!((lr_at(0, &c).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(lr_at(4, &c).unwrap(), 1.0);
        assert_eq!(lr_at(5, &c).unwrap(), 1.0);
        assert!((lr_at(15, &c).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(lr_at(25, &c).unwrap(), 0.0);
        assert!(lr_at(26, &c).is_err());
        assert!(sched(1.0, 5, 5).validate().is_err());
    }

    proptest! {
        #[test]
        fn schedule_is_bounded_and_monotone_after_warmup(w in 1usize..10, extra in 1usize..50, base in 1e-6f64..1.0) {
            let c = sched(base, w, w + extra);
            let lrs: Vec<f64> = (0..=w + extra).map(|e| lr_at(e, &c).unwrap()).collect();
            prop_assert!(lrs.iter().all(|&l| (0.0..=base).contains(&l)));
            prop_assert!(lrs[w..].windows(2).all(|p| p[1] <= p[0]));
            prop_assert!(lrs[..w].windows(2).all(|p| p[1] > p[0]));
        }
    }

    fn store(names: &[&str], value: f64) -> ParameterStore {
        ParameterStore::from_map(names.iter().map(|n| (n.to_string(), Tensor::from_vec(1, 2, vec![value, -value]))).collect())
    }

    fn grads(names: &[&str], value: f64) -> Gradients {
        names.iter().map(|n| (n.to_string(), Tensor::from_vec(1, 2, vec![value, -value]))).collect()
    }

    const W: &str = "visual.proj";
    const B: &str = "visual.blocks.0.attn.bias";

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let mut p = store(&[W, B], 0.3);
        let before = p.clone();
        let mut s = AdamState::new(&p);
        for _ in 0..5 {
            optimizer_step(&mut p, &grads(&[W, B], 0.0), &mut s, 0.1, 0.0).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(s.step, 5);
    }

    #[test]
    fn decay_is_decoupled_and_selective() {
        let (lr, wd) = (0.1, 0.01);
        let mut p = store(&[W, B], 0.3);
        let mut s = AdamState::new(&p);
        optimizer_step(&mut p, &grads(&[W, B], 0.0), &mut s, lr, wd).unwrap();
        assert_eq!(p.get(W).data()[0], 0.3 * (1.0 - lr * wd));
        assert_eq!(p.get(B).data()[0], 0.3);
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        let lr = 1e-3;
        let mut p = store(&[W], 0.0);
        let mut s = AdamState::new(&p);
        let g = grads(&[W], 2.0);
        let mut prev = 0.0;
        for step in 0..200 {
            optimizer_step(&mut p, &g, &mut s, lr, 0.0).unwrap();
            let now = p.get(W).data()[0];
            // Bias correction makes every step exactly lr * g / (|g| + eps).
            let expected = lr * 2.0 / (2.0 + ADAM_EPS);
            assert!(((prev - now) - expected).abs() < 1e-12, "step {step}");
            prev = now;
        }
        assert!(p.get(W).data()[1] > 0.0);
    }

    #[test]
    fn bad_gradients_are_rejected() {
        let mut p = store(&[W], 0.0);
        let mut s = AdamState::new(&p);
        assert!(optimizer_step(&mut p, &grads(&["nope"], 1.0), &mut s, 0.1, 0.0).is_err());
        let wrong: Gradients = [(W.to_string(), Tensor::zeros(2, 2))].into_iter().collect();
        assert!(optimizer_step(&mut p, &wrong, &mut s, 0.1, 0.0).is_err());
        assert_eq!(s.step, 0);
    }

    #[test]
    fn temperature_is_clamped() {
        let mut p = ParameterStore::from_map([(names::LOG_TAU.to_string(), Tensor::from_vec(1, 1, vec![-10.0]))].into_iter().collect());
        clamp_temperature(&mut p);
        assert!((p.tau() - MIN_TAU).abs() < 1e-15);
    }

    #[test]
    fn relative_error_definition() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(1.0, 0.5) - 0.5).abs() < 1e-15);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let synth = SynthConfig {
            clips_per_category: 3,
            ..SynthConfig::default()
        };
        let m = generate_synthetic_dataset(&synth, 1, dir.path()).unwrap();
        let m = split_dataset(&m, SplitRatios::default(), 1).unwrap();
        let model = Model::init(crate::model::ModelConfig::desk(), 2, 0.07).unwrap();
        let text = TextSetup::desk();
        let cache = FrameCache::new();
        let aug = AugConfig {
            target_height: 16,
            target_width: 16,
            ..AugConfig::default()
        };
        let job = |ckpt: Option<PathBuf>, stop: Option<usize>| TrainJob {
            manifest: &m,
            train: m.split(Split::Train),
            val: m.split(Split::Val),
            categories: m.categories.clone(),
            config: TrainConfig {
                total_epochs: 4,
                warmup_epochs: 1,
                batch_size: 4,
                seed: 5,
                ..TrainConfig::default()
            },
            aug: aug.clone(),
            text: &text,
            cache: &cache,
            checkpoint_path: ckpt,
            history_path: None,
            stop_after: stop,
            tags: BTreeMap::new(),
        };
        let full = train_supervised(&job(None, None), TrainState::fresh(model.clone())).unwrap();
        assert_eq!(full.history.records.len(), 4);

        let path = dir.path().join("run.ckpt");
        let partial = train_supervised(&job(Some(path.clone()), Some(2)), TrainState::fresh(model)).unwrap();
        assert_eq!(partial.epoch, 2);
        let (ckpt, _) = load_checkpoint(&path).unwrap();
        let resumed = train_supervised(&job(Some(path), None), TrainState::from_checkpoint(ckpt).unwrap()).unwrap();
        assert_eq!(resumed.history, full.history);
        assert_eq!(resumed.model, full.model);
        assert_eq!(resumed.optimizer, full.optimizer);
    }
}
