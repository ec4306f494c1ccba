use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cattle_clip::checkpoint::{load_checkpoint, Checkpoint};
use cattle_clip::config::GlobalConfig;
use cattle_clip::curation::{curate, ingest_tracklets, write_curation};
use cattle_clip::dataset::{load_manifest, split_dataset, write_atomic, FrameCache, Manifest, Split};
use cattle_clip::error::ErrorKind;
use cattle_clip::evaluation::{render_report, render_table, write_report, Provenance};
use cattle_clip::fewshot::{
    run_leave_one_out, train_base, train_baseline, train_final, write_results, FewShotContext, FewShotPlan, Stage,
    StageResult,
};
use cattle_clip::model::Model;
use cattle_clip::rng::derive_seed;
use cattle_clip::synth::generate_synthetic_dataset;
use cattle_clip::text::{check_token_split, BehaviourVocabulary, Tokenizer};
use cattle_clip::training::{evaluate, train_supervised, TrainJob, TrainState};
use cattle_clip::{Error, Result};

#[derive(Parser)]
#[command(name = "cattle-clip", version, about = "Video behaviour classification with a dual-encoder model")]
struct Cli {
    /// TOML configuration file; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic six-category dataset.
    Synth,
    /// Turn tracklets into candidate clips and apply the retention rules.
    Curate {
        #[arg(long)]
        tracklets: PathBuf,
    },
    /// Supervised training followed by evaluation on the test split.
    Train(TrainArgs),
    /// Leave-one-out few-shot protocol, or a single cell of it.
    Fewshot(FewshotArgs),
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Defaults to the configured evaluation split.
        #[arg(long)]
        split: Option<Split>,
    },
    /// Show how each category word tokenizes.
    InspectTokens {
        /// Vocabulary file (one token per line).
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Byte-pair merges file; selects the byte-pair tokenizer.
        #[arg(long, requires = "vocab")]
        merges: Option<PathBuf>,
        /// Apply the configured label remapping first.
        #[arg(long)]
        remap: bool,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Disable training augmentation.
    #[arg(long)]
    no_aug: bool,
    /// Use raw labels in prompts.
    #[arg(long)]
    no_prompt_remap: bool,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct FewshotArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Restrict to one scarce category.
    #[arg(long)]
    category: Option<String>,
    /// Restrict to one shot count.
    #[arg(long)]
    n: Option<usize>,
    /// Run only this stage.
    #[arg(long)]
    stage: Option<Stage>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numeric => 3,
            })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.max(1))
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut cfg = match &cli.config {
        Some(p) => GlobalConfig::load(p)?,
        None => GlobalConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
        cfg.fewshot.seeds = vec![seed];
    }
    let config_dir = cli
        .config
        .as_deref()
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let out = cli.out.as_path();

    match cli.command {
        Command::Synth => {
            cfg.echo(out)?;
            let m = generate_synthetic_dataset(&cfg.synth, cfg.seed, out)?;
            println!("wrote {} clips to {}", m.len(), out.display());
            Ok(())
        }
        Command::Curate { tracklets } => {
            cfg.echo(out)?;
            let t = ingest_tracklets(&tracklets)?;
            let result = curate(&t, &cfg.curation, &cfg.dataset.categories)?;
            write_curation(&result, out)?;
            let accepted = result.reports.iter().filter(|r| r.accepted).count();
            println!(
                "{} candidates, {accepted} accepted, {} in manifest",
                result.reports.len(),
                result.manifest.len()
            );
            Ok(())
        }
        Command::Train(args) => {
            if args.no_aug {
                cfg.training.augmentation = false;
            }
            if args.no_prompt_remap {
                cfg.training.prompt_remap = false;
            }
            cfg.echo(out)?;
            cmd_train(&cfg, &config_dir, &args, out)
        }
        Command::Fewshot(args) => {
            if let Some(n) = args.n {
                cfg.fewshot.ns = vec![n];
            }
            cfg.validate()?;
            cfg.echo(out)?;
            cmd_fewshot(&cfg, &config_dir, &args, out, cli.jobs)
        }
        Command::Eval {
            checkpoint,
            manifest,
            split,
        } => {
            cfg.echo(out)?;
            cmd_eval(&cfg, &config_dir, &checkpoint, &manifest, split.unwrap_or(cfg.evaluation.split), out)
        }
        Command::InspectTokens { vocab, merges, remap } => {
            cfg.echo(out)?;
            let tokenizer = match (&vocab, &merges) {
                (Some(v), Some(m)) => Tokenizer::bpe_from_files(v, m)?,
                (Some(v), None) => Tokenizer::desk_from_file(v)?,
                _ => cfg.text.build(&config_dir)?.tokenizer,
            };
            let vocabulary = if remap {
                BehaviourVocabulary::new(cfg.text.remap.clone())?
            } else {
                BehaviourVocabulary::identity()
            };
            let phrases: Vec<String> = cfg.dataset.categories.iter().map(|c| vocabulary.apply(c)).collect();
            let rows = check_token_split(&phrases, &tokenizer)?;
            let mut jsonl = String::new();
            for r in &rows {
                jsonl.push_str(&serde_json::to_string(r)?);
                jsonl.push('\n');
            }
            write_atomic(&out.join("token-split.jsonl"), jsonl.as_bytes())?;
            let table: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        r.phrase.clone(),
                        r.word.clone(),
                        r.pieces.join(" "),
                        r.token_count.to_string(),
                        if r.flagged { "split" } else { "" }.to_string(),
                    ]
                })
                .collect();
            print!("{}", render_table(&["phrase", "word", "pieces", "tokens", "flag"], &table));
            Ok(())
        }
    }
}

/// Loads a manifest and assigns splits when none are present.
fn load_split_manifest(cfg: &GlobalConfig, path: &Path, out: &Path) -> Result<Manifest> {
    let m = load_manifest(path)?;
    if m.records.iter().all(|r| r.split.is_some()) {
        return Ok(m);
    }
    let m = split_dataset(&m, cfg.dataset.split, cfg.seed)?;
    let mut lines = String::new();
    for r in &m.records {
        let split = r.split.map_or("", |s| s.as_str());
        lines.push_str(&serde_json::to_string(&serde_json::json!({ "clip_id": r.clip_id, "split": split }))?);
        lines.push('\n');
    }
    write_atomic(&out.join("splits.jsonl"), lines.as_bytes())?;
    Ok(m)
}

fn cmd_train(cfg: &GlobalConfig, config_dir: &Path, args: &TrainArgs, out: &Path) -> Result<()> {
    let manifest = load_split_manifest(cfg, &args.manifest, out)?;
    let text = cfg.text.build(config_dir)?;
    let cache = FrameCache::new();
    let ckpt_path = out.join("model.ckpt");
    let state = if args.resume && ckpt_path.exists() {
        let (ckpt, _) = load_checkpoint(&ckpt_path)?;
        check_model_config(cfg, &ckpt)?;
        eprintln!("resuming after epoch {}", ckpt.epoch);
        TrainState::from_checkpoint(ckpt)?
    } else {
        let init_seed = derive_seed(cfg.seed, "init", 0);
        TrainState::fresh(Model::init(cfg.model.clone(), init_seed, cfg.contrastive.tau_init)?)
    };
    let job = TrainJob {
        manifest: &manifest,
        train: manifest.split(Split::Train),
        val: manifest.split(Split::Val),
        categories: manifest.categories.clone(),
        config: cfg.training.clone(),
        aug: cfg.aug_config(),
        text: &text,
        cache: &cache,
        checkpoint_path: Some(ckpt_path.clone()),
        history_path: Some(out.join("history.jsonl")),
        stop_after: None,
        tags: [("stage".to_string(), "supervised".to_string())].into_iter().collect(),
    };
    let state = train_supervised(&job, state)?;
    if let Some(last) = state.history.records.last() {
        eprintln!("epoch {} loss {:.4}", last.epoch, last.train_loss);
    }
    let (_, checkpoint_id) = load_checkpoint(&ckpt_path)?;
    let test = manifest.split(Split::Test);
    let report = evaluate(
        &state.model,
        &manifest,
        &test,
        &manifest.categories,
        &text,
        cfg.training.prompt_remap,
        &job.aug,
        &cache,
    )?;
    let prov = Provenance {
        checkpoint_id: Some(checkpoint_id),
        dataset_hash: Some(manifest.content_hash()?),
        config_hash: Some(cfg.hash()?),
        split: Some(Split::Test.as_str().into()),
    };
    write_report(&report, &prov, &out.join("report.json"))?;
    print!("{}", render_report(&report));
    Ok(())
}

fn check_model_config(cfg: &GlobalConfig, ckpt: &Checkpoint) -> Result<()> {
    if ckpt.model.config == cfg.model {
        return Ok(());
    }
    let want_order = cfg.model.parameter_shapes();
    let have_order = ckpt.model.config.parameter_shapes();
    let want: BTreeMap<&str, [usize; 2]> = want_order.iter().map(|(n, s)| (n.as_str(), *s)).collect();
    let have: BTreeMap<&str, [usize; 2]> = have_order.iter().map(|(n, s)| (n.as_str(), *s)).collect();
    let show = |s: Option<&[usize; 2]>| s.map_or("absent".to_string(), |s| format!("{s:?}"));
    let mut diff: Vec<String> = want_order
        .iter()
        .map(|(n, _)| n.as_str())
        .chain(have_order.iter().map(|(n, _)| n.as_str()).filter(|n| !want.contains_key(n)))
        .filter(|n| want.get(n) != have.get(n))
        .map(|n| format!("{n}: config {}, checkpoint {}", show(want.get(n)), show(have.get(n))))
        .collect();
    if diff.is_empty() {
        diff.push("same shapes, different hyperparameters".into());
    }
    let total = diff.len();
    diff.truncate(8);
    if total > diff.len() {
        diff.push(format!("... {} more", total - diff.len()));
    }
    Err(Error::Checkpoint(format!(
        "checkpoint model does not match the configured model: {}",
        diff.join("; ")
    )))
}

fn cmd_fewshot(cfg: &GlobalConfig, config_dir: &Path, args: &FewshotArgs, out: &Path, jobs: usize) -> Result<()> {
    let manifest = load_split_manifest(cfg, &args.manifest, out)?;
    let text = cfg.text.build(config_dir)?;
    let cache = FrameCache::new();
    let ctx = FewShotContext {
        manifest: &manifest,
        config: cfg.fewshot.clone(),
        model_config: cfg.model.clone(),
        tau_init: cfg.contrastive.tau_init,
        aug: cfg.aug_config(),
        text: &text,
        cache: &cache,
        out_dir: out.join("fewshot"),
    };
    let categories = match &args.category {
        Some(c) => {
            FewShotPlan::new(&manifest, c, cfg.fewshot.ns[0], 0)?;
            vec![c.clone()]
        }
        None => manifest.categories.clone(),
    };

    let Some(stage) = args.stage else {
        let results = run_leave_one_out(&ctx, &categories, jobs)?;
        write_results(&ctx, &results)?;
        print!("{}", results.render());
        println!("{} stage results", results.stage_count());
        return Ok(());
    };

    let mut done: Vec<StageResult> = Vec::new();
    for c in &categories {
        for &seed in &cfg.fewshot.seeds {
            if stage == Stage::Base {
                done.push(train_base(&ctx, c, seed)?);
                continue;
            }
            for &n in &cfg.fewshot.ns {
                let plan = FewShotPlan::new(&manifest, c, n, seed)?;
                done.push(match stage {
                    Stage::Final => train_final(&ctx, &plan, &train_base(&ctx, c, seed)?)?,
                    _ => train_baseline(&ctx, &plan)?,
                });
            }
        }
    }
    let rows: Vec<Vec<String>> = done
        .iter()
        .map(|r| {
            vec![
                r.stage.as_str().to_string(),
                r.scarce_category.clone(),
                r.n.map_or("-".into(), |n| n.to_string()),
                r.seed.to_string(),
                format!("{:.1}", r.report.overall_accuracy * 100.0),
                r.report
                    .recall_of(&r.scarce_category)
                    .map_or("n/a".into(), |v| format!("{v:.2}")),
            ]
        })
        .collect();
    print!("{}", render_table(&["stage", "scarce", "n", "seed", "acc", "scarce recall"], &rows));
    Ok(())
}

fn cmd_eval(cfg: &GlobalConfig, config_dir: &Path, checkpoint: &Path, manifest: &Path, split: Split, out: &Path) -> Result<()> {
    let (ckpt, checkpoint_id) = load_checkpoint(checkpoint)?;
    check_model_config(cfg, &ckpt)?;
    let manifest = load_split_manifest(cfg, manifest, out)?;
    let text = cfg.text.build(config_dir)?;
    let cache = FrameCache::new();
    let records = manifest.split(split);
    if records.is_empty() {
        return Err(Error::InsufficientData(format!("split {} is empty", split.as_str())));
    }
    let report = evaluate(
        &ckpt.model,
        &manifest,
        &records,
        &manifest.categories,
        &text,
        cfg.training.prompt_remap,
        &cfg.aug_config(),
        &cache,
    )?;
    let prov = Provenance {
        checkpoint_id: Some(checkpoint_id),
        dataset_hash: Some(manifest.content_hash()?),
        config_hash: Some(cfg.hash()?),
        split: Some(split.as_str().into()),
    };
    write_report(&report, &prov, &out.join(format!("report-{}.json", split.as_str())))?;
    print!("{}", render_report(&report));
    Ok(())
}
