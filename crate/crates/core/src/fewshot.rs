//! Base-to-novel few-shot protocol with replay.
//!
//! For each data-scarce category the base model `B` is trained on the
//! other five categories. For each shot count `n`, `n` scarce clips form
//! `D_r`; the final model `F` starts from `B` and trains on the balanced
//! `D_f` (`D_r` plus `n` clips of every base category), while the one-stage
//! baseline `M` trains from scratch on `D_b ∪ D_r`. Stage outputs live
//! under `<out>/<category>/seed-<s>/` and a stage whose result file exists
//! is never recomputed, so an interrupted run resumes where it stopped.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augmentation::AugConfig;
use crate::checkpoint::load_checkpoint;
use crate::dataset::{write_atomic, ClipRecord, FrameCache, Manifest, Split};
use crate::error::{Error, Result};
use crate::evaluation::{render_table, MetricsReport};
use crate::head::TemperatureMode;
use crate::model::{Model, ModelConfig};
use crate::rng::{derive_seed, seeded};
use crate::training::{evaluate, train_supervised, TextSetup, TrainConfig, TrainJob, TrainState};

pub const SHOTS: [usize; 4] = [16, 8, 4, 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FewShotConfig {
    pub ns: Vec<usize>,
    pub seeds: Vec<u64>,
    pub base_epochs: usize,
    /// Final-stage epochs when `n = 16`.
    pub final_epochs_full: usize,
    /// Final-stage epochs for smaller `n`.
    pub final_epochs_scarce: usize,
    pub base_lr_stage1: f64,
    pub base_lr_stage2: f64,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub augmentation: bool,
    pub prompt_remap: bool,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self {
            ns: SHOTS.to_vec(),
            seeds: vec![0],
            base_epochs: 30,
            final_epochs_full: 30,
            final_epochs_scarce: 100,
            base_lr_stage1: 5e-4,
            base_lr_stage2: 5e-3,
            warmup_epochs: 5,
            batch_size: 8,
            weight_decay: 1e-3,
            augmentation: true,
            prompt_remap: true,
        }
    }
}

impl FewShotConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(n) = self.ns.iter().find(|n| !SHOTS.contains(n)) {
            return Err(Error::Config(format!("shot count {n} not in {SHOTS:?}")));
        }
        if self.ns.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("few-shot ns and seeds must be non-empty".into()));
        }
        for e in [self.base_epochs, self.final_epochs_full, self.final_epochs_scarce] {
            if e <= self.warmup_epochs {
                return Err(Error::Config(format!(
                    "few-shot epochs ({e}) must exceed warmup_epochs ({})",
                    self.warmup_epochs
                )));
            }
        }
        if !(self.base_lr_stage1 > 0.0 && self.base_lr_stage2 > 0.0) {
            return Err(Error::Config("few-shot learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn final_epochs(&self, n: usize) -> usize {
        if n == 16 {
            self.final_epochs_full
        } else {
            self.final_epochs_scarce
        }
    }

    fn train_config(&self, lr: f64, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            base_lr: lr,
            weight_decay: self.weight_decay,
            warmup_epochs: self.warmup_epochs,
            total_epochs: epochs,
            batch_size: self.batch_size,
            seed,
            augmentation: self.augmentation,
            prompt_remap: self.prompt_remap,
            temperature_mode: TemperatureMode::LearnableLog,
            validate_each_epoch: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotPlan {
    pub scarce_category: String,
    pub n: usize,
    pub seed: u64,
}

impl FewShotPlan {
    pub fn new(manifest: &Manifest, scarce_category: &str, n: usize, seed: u64) -> Result<Self> {
        if !SHOTS.contains(&n) {
            return Err(Error::InvalidArgument(format!("shot count {n} not in {SHOTS:?}")));
        }
        if manifest.category_index(scarce_category).is_none() {
            return Err(Error::UnknownLabel {
                label: scarce_category.to_string(),
                known: manifest.categories.join(", "),
            });
        }
        Ok(Self {
            scarce_category: scarce_category.to_string(),
            n,
            seed,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Base,
    Final,
    Baseline,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Final => "final",
            Stage::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Stage::Base),
            "final" => Ok(Stage::Final),
            "baseline" => Ok(Stage::Baseline),
            other => Err(Error::InvalidArgument(format!("unknown stage {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub stage: Stage,
    pub scarce_category: String,
    pub n: Option<usize>,
    pub seed: u64,
    /// Checkpoint path relative to the few-shot output directory.
    pub checkpoint: PathBuf,
    pub checkpoint_id: String,
    /// Clip ids of the training set, sorted.
    pub train_clip_ids: Vec<String>,
    /// Clip ids of `D_r`, sorted; empty for the base stage.
    pub scarce_clip_ids: Vec<String>,
    pub report: MetricsReport,
}

/// Train-split records of every category except `scarce`.
pub fn build_base_dataset<'a>(manifest: &'a Manifest, scarce: &str) -> Vec<&'a ClipRecord> {
    manifest
        .split(Split::Train)
        .into_iter()
        .filter(|r| r.label != scarce)
        .collect()
}

pub fn base_categories(manifest: &Manifest, scarce: &str) -> Vec<String> {
    manifest.categories.iter().filter(|c| *c != scarce).cloned().collect()
}

/// `n` scarce-category training records, uniformly without replacement,
/// returned in manifest order.
pub fn sample_scarce<'a>(manifest: &'a Manifest, scarce: &str, n: usize, seed: u64) -> Result<Vec<&'a ClipRecord>> {
    let pool: Vec<&ClipRecord> = manifest
        .split(Split::Train)
        .into_iter()
        .filter(|r| r.label == scarce)
        .collect();
    pick(&pool, n, seed, &format!("scarce/{scarce}"))
}

fn pick<'a>(pool: &[&'a ClipRecord], n: usize, seed: u64, tag: &str) -> Result<Vec<&'a ClipRecord>> {
    if pool.len() < n {
        return Err(Error::InsufficientData(format!(
            "{tag}: need {n} training records, found {}",
            pool.len()
        )));
    }
    let mut idx = sample(&mut seeded(seed, tag, n as u64), pool.len(), n).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| pool[i]).collect())
}

/// `D_r` plus `n` records of every base category, so each of the six
/// categories appears exactly `n` times.
pub fn build_replay_dataset<'a>(
    d_r: &[&'a ClipRecord],
    d_b: &[&'a ClipRecord],
    base_categories: &[String],
    seed: u64,
) -> Result<Vec<&'a ClipRecord>> {
    let n = d_r.len();
    let mut out = d_r.to_vec();
    for c in base_categories {
        let pool: Vec<&ClipRecord> = d_b.iter().copied().filter(|r| r.label == *c).collect();
        out.extend(pick(&pool, n, seed, &format!("replay/{c}"))?);
    }
    Ok(out)
}

/// `D_m = D_b ∪ D_r`.
pub fn build_combined_dataset<'a>(d_r: &[&'a ClipRecord], d_b: &[&'a ClipRecord]) -> Vec<&'a ClipRecord> {
    d_b.iter().chain(d_r).copied().collect()
}

fn sorted_ids(records: &[&ClipRecord]) -> Vec<String> {
    let mut ids: Vec<String> = records.iter().map(|r| r.clip_id.clone()).collect();
    ids.sort();
    ids
}

/// Shared inputs of every stage.
pub struct FewShotContext<'a> {
    pub manifest: &'a Manifest,
    pub config: FewShotConfig,
    pub model_config: ModelConfig,
    pub tau_init: f64,
    pub aug: AugConfig,
    pub text: &'a TextSetup,
    pub cache: &'a FrameCache,
    pub out_dir: PathBuf,
}

impl FewShotContext<'_> {
    fn seed_dir(&self, scarce: &str, seed: u64) -> PathBuf {
        PathBuf::from(scarce).join(format!("seed-{seed}"))
    }

    fn stage_rel(&self, stage: Stage, scarce: &str, n: Option<usize>, seed: u64) -> PathBuf {
        let mut dir = self.seed_dir(scarce, seed);
        if let Some(n) = n {
            dir = dir.join(format!("n-{n}"));
        }
        dir.join(stage.as_str())
    }

    pub fn result_path(&self, stage: Stage, scarce: &str, n: Option<usize>, seed: u64) -> PathBuf {
        self.out_dir
            .join(self.stage_rel(stage, scarce, n, seed))
            .with_extension("json")
    }
}

struct StageSpec<'a> {
    stage: Stage,
    scarce: String,
    n: Option<usize>,
    seed: u64,
    train: Vec<&'a ClipRecord>,
    d_r: Vec<&'a ClipRecord>,
    categories: Vec<String>,
    lr: f64,
    epochs: usize,
}

fn read_result(path: &Path) -> Result<Option<StageResult>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

fn run_stage(ctx: &FewShotContext, spec: StageSpec, init: impl FnOnce() -> Result<Model>) -> Result<StageResult> {
    let rel = ctx.stage_rel(spec.stage, &spec.scarce, spec.n, spec.seed);
    let result_path = ctx.out_dir.join(&rel).with_extension("json");
    if let Some(done) = read_result(&result_path)? {
        return Ok(done);
    }
    let ckpt_rel = rel.with_extension("ckpt");
    let ckpt_path = ctx.out_dir.join(&ckpt_rel);
    if let Some(parent) = ckpt_path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }

    let mut tags = BTreeMap::new();
    tags.insert("stage".to_string(), spec.stage.as_str().to_string());
    tags.insert("scarce_category".to_string(), spec.scarce.clone());
    tags.insert("seed".to_string(), spec.seed.to_string());
    if let Some(n) = spec.n {
        tags.insert("n".to_string(), n.to_string());
    }

    let state = if ckpt_path.exists() {
        let (ckpt, _) = load_checkpoint(&ckpt_path)?;
        if ckpt.tags != tags {
            return Err(Error::Checkpoint(format!(
                "{} belongs to a different stage: {:?}",
                ckpt_path.display(),
                ckpt.tags
            )));
        }
        TrainState::from_checkpoint(ckpt)?
    } else {
        TrainState::fresh(init()?)
    };

    let train_seed = derive_seed(spec.seed, &format!("train/{}", rel.display()), 0);
    let job = TrainJob {
        manifest: ctx.manifest,
        train: spec.train.clone(),
        val: Vec::new(),
        categories: spec.categories.clone(),
        config: ctx.config.train_config(spec.lr, spec.epochs, train_seed),
        aug: ctx.aug.clone(),
        text: ctx.text,
        cache: ctx.cache,
        checkpoint_path: Some(ckpt_path.clone()),
        history_path: Some(ctx.out_dir.join(&rel).with_extension("history.jsonl")),
        stop_after: None,
        tags,
    };
    let state = train_supervised(&job, state)?;
    let (_, checkpoint_id) = load_checkpoint(&ckpt_path)?;

    let val: Vec<&ClipRecord> = ctx
        .manifest
        .split(Split::Val)
        .into_iter()
        .filter(|r| spec.categories.contains(&r.label))
        .collect();
    let report = evaluate(
        &state.model,
        ctx.manifest,
        &val,
        &spec.categories,
        ctx.text,
        ctx.config.prompt_remap,
        &ctx.aug,
        ctx.cache,
    )?;
    let result = StageResult {
        stage: spec.stage,
        scarce_category: spec.scarce,
        n: spec.n,
        seed: spec.seed,
        checkpoint: ckpt_rel,
        checkpoint_id,
        train_clip_ids: sorted_ids(&spec.train),
        scarce_clip_ids: sorted_ids(&spec.d_r),
        report,
    };
    let mut text = serde_json::to_string_pretty(&result)?;
    text.push('\n');
    write_atomic(&result_path, text.as_bytes())?;
    Ok(result)
}

fn fresh_model(ctx: &FewShotContext, seed: u64, tag: &str) -> Result<Model> {
    Model::init(ctx.model_config.clone(), derive_seed(seed, tag, 0), ctx.tau_init)
}

/// Stage 1: five base categories, stage-1 learning rate.
pub fn train_base(ctx: &FewShotContext, scarce: &str, seed: u64) -> Result<StageResult> {
    let spec = StageSpec {
        stage: Stage::Base,
        scarce: scarce.to_string(),
        n: None,
        seed,
        train: build_base_dataset(ctx.manifest, scarce),
        d_r: Vec::new(),
        categories: base_categories(ctx.manifest, scarce),
        lr: ctx.config.base_lr_stage1,
        epochs: ctx.config.base_epochs,
    };
    run_stage(ctx, spec, || fresh_model(ctx, seed, &format!("init/base/{scarce}")))
}

/// Stage 2: starts from `B`, trains on the balanced `D_f` over all six
/// categories at the stage-2 learning rate.
pub fn train_final(ctx: &FewShotContext, plan: &FewShotPlan, base: &StageResult) -> Result<StageResult> {
    if base.stage != Stage::Base || base.scarce_category != plan.scarce_category || base.seed != plan.seed {
        return Err(Error::Checkpoint(format!(
            "base result for {} seed {} does not match plan {plan:?}",
            base.scarce_category, base.seed
        )));
    }
    let d_b = build_base_dataset(ctx.manifest, &plan.scarce_category);
    let d_r = sample_scarce(ctx.manifest, &plan.scarce_category, plan.n, plan.seed)?;
    let d_f = build_replay_dataset(
        &d_r,
        &d_b,
        &base_categories(ctx.manifest, &plan.scarce_category),
        derive_seed(plan.seed, "replay", plan.n as u64),
    )?;
    let spec = StageSpec {
        stage: Stage::Final,
        scarce: plan.scarce_category.clone(),
        n: Some(plan.n),
        seed: plan.seed,
        train: d_f,
        d_r,
        categories: ctx.manifest.categories.clone(),
        lr: ctx.config.base_lr_stage2,
        epochs: ctx.config.final_epochs(plan.n),
    };
    let base_ckpt = ctx.out_dir.join(&base.checkpoint);
    run_stage(ctx, spec, || {
        let (ckpt, _) = load_checkpoint(&base_ckpt)?;
        if ckpt.tags.get("stage").map(String::as_str) != Some("base")
            || ckpt.tags.get("scarce_category") != Some(&plan.scarce_category)
        {
            return Err(Error::Checkpoint(format!(
                "{} is not the base checkpoint for {}",
                base_ckpt.display(),
                plan.scarce_category
            )));
        }
        Ok(ckpt.model)
    })
}

/// One-stage baseline on the imbalanced `D_m` with stage-1 settings.
pub fn train_baseline(ctx: &FewShotContext, plan: &FewShotPlan) -> Result<StageResult> {
    let d_b = build_base_dataset(ctx.manifest, &plan.scarce_category);
    let d_r = sample_scarce(ctx.manifest, &plan.scarce_category, plan.n, plan.seed)?;
    let spec = StageSpec {
        stage: Stage::Baseline,
        scarce: plan.scarce_category.clone(),
        n: Some(plan.n),
        seed: plan.seed,
        train: build_combined_dataset(&d_r, &d_b),
        d_r,
        categories: ctx.manifest.categories.clone(),
        lr: ctx.config.base_lr_stage1,
        epochs: ctx.config.base_epochs,
    };
    let tag = format!("init/baseline/{}/{}", plan.scarce_category, plan.n);
    run_stage(ctx, spec, || fresh_model(ctx, plan.seed, &tag))
}

/// Comparison row for one `(category, n, seed)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub plan: FewShotPlan,
    pub base_accuracy: f64,
    /// Mean recall of `B` over the five base categories.
    pub base_recall: Option<f64>,
    pub final_accuracy: f64,
    pub final_scarce_recall: Option<f64>,
    /// Mean recall of `F` over the five base categories.
    pub final_base_recall: Option<f64>,
    pub final_suboptimal: bool,
    pub baseline_accuracy: f64,
    pub baseline_scarce_recall: Option<f64>,
    pub baseline_suboptimal: bool,
    /// `D_r` was identical for the final and baseline runs.
    pub replay_identical: bool,
}

impl CellSummary {
    pub fn new(plan: FewShotPlan, base: &StageResult, fin: &StageResult, baseline: &StageResult) -> Self {
        let base_cats = base.report.category_order.clone();
        let scarce = plan.scarce_category.clone();
        Self {
            base_accuracy: base.report.overall_accuracy,
            base_recall: base.report.mean_recall(&base_cats),
            final_accuracy: fin.report.overall_accuracy,
            final_scarce_recall: fin.report.recall_of(&scarce),
            final_base_recall: fin.report.mean_recall(&base_cats),
            final_suboptimal: fin.report.suboptimal_flag,
            baseline_accuracy: baseline.report.overall_accuracy,
            baseline_scarce_recall: baseline.report.recall_of(&scarce),
            baseline_suboptimal: baseline.report.suboptimal_flag,
            replay_identical: fin.scarce_clip_ids == baseline.scarce_clip_ids,
            plan,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotResults {
    pub base: Vec<StageResult>,
    pub finals: Vec<StageResult>,
    pub baselines: Vec<StageResult>,
    pub cells: Vec<CellSummary>,
}

impl FewShotResults {
    pub fn stage_count(&self) -> usize {
        self.base.len() + self.finals.len() + self.baselines.len()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for c in &self.cells {
            out.push_str(&serde_json::to_string(c)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Aligned table; `x` marks a suboptimal run.
    pub fn render(&self) -> String {
        let pct = |v: f64| format!("{:.1}", v * 100.0);
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.2}"));
        let mark = |f: bool| if f { "x" } else { "" }.to_string();
        let rows: Vec<Vec<String>> = self
            .cells
            .iter()
            .map(|c| {
                vec![
                    c.plan.scarce_category.clone(),
                    c.plan.n.to_string(),
                    c.plan.seed.to_string(),
                    pct(c.base_accuracy),
                    pct(c.final_accuracy),
                    opt(c.final_scarce_recall),
                    opt(c.final_base_recall),
                    mark(c.final_suboptimal),
                    pct(c.baseline_accuracy),
                    opt(c.baseline_scarce_recall),
                    mark(c.baseline_suboptimal),
                ]
            })
            .collect();
        render_table(
            &[
                "scarce", "n", "seed", "B acc", "F acc", "F scarce", "F base", "F flag", "M acc",
                "M scarce", "M flag",
            ],
            &rows,
        )
    }
}

/// Runs one cell: `B` (shared across `n`), then `F` and `M`.
pub fn run_cell(ctx: &FewShotContext, plan: &FewShotPlan) -> Result<(StageResult, StageResult, StageResult)> {
    let base = train_base(ctx, &plan.scarce_category, plan.seed)?;
    let fin = train_final(ctx, plan, &base)?;
    let baseline = train_baseline(ctx, plan)?;
    Ok((base, fin, baseline))
}

/// Leave-one-out over `categories`, every configured `n` and seed. Base
/// stages run first, then the `(category, n, seed)` cells, each batch in
/// parallel on a pool of `jobs` threads. Completed stages are reused.
pub fn run_leave_one_out(ctx: &FewShotContext, categories: &[String], jobs: usize) -> Result<FewShotResults> {
    ctx.config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let seeds = &ctx.config.seeds;
    let base_keys: Vec<(String, u64)> = categories
        .iter()
        .flat_map(|c| seeds.iter().map(move |&s| (c.clone(), s)))
        .collect();
    let plans: Vec<FewShotPlan> = categories
        .iter()
        .flat_map(|c| {
            ctx.config
                .ns
                .iter()
                .flat_map(move |&n| seeds.iter().map(move |&s| (c.clone(), n, s)))
        })
        .map(|(c, n, s)| FewShotPlan::new(ctx.manifest, &c, n, s))
        .collect::<Result<_>>()?;

    pool.install(|| {
        let base: Vec<StageResult> = base_keys
            .par_iter()
            .map(|(c, s)| train_base(ctx, c, *s))
            .collect::<Result<_>>()?;
        let lookup = |p: &FewShotPlan| {
            base.iter()
                .find(|b| b.scarce_category == p.scarce_category && b.seed == p.seed)
                .expect("base stage trained for every plan")
        };
        let pairs: Vec<(StageResult, StageResult)> = plans
            .par_iter()
            .map(|p| Ok((train_final(ctx, p, lookup(p))?, train_baseline(ctx, p)?)))
            .collect::<Result<_>>()?;
        let cells = plans
            .iter()
            .zip(&pairs)
            .map(|(p, (f, m))| CellSummary::new(p.clone(), lookup(p), f, m))
            .collect();
        let (finals, baselines) = pairs.into_iter().unzip();
        Ok(FewShotResults {
            base,
            finals,
            baselines,
            cells,
        })
    })
}

/// Writes `results.jsonl` and `results.txt` into the context's output.
pub fn write_results(ctx: &FewShotContext, results: &FewShotResults) -> Result<()> {
    write_atomic(&ctx.out_dir.join("results.jsonl"), results.to_jsonl()?.as_bytes())?;
    write_atomic(&ctx.out_dir.join("results.txt"), results.render().as_bytes())
}
