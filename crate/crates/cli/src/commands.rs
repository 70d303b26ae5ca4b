use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use caila_core::data::{generate_dataset, load_dataset, split_compositions, Dataset, RenderSpec, SplitCounts, Stage, World};
use caila_core::eval::{evaluate, percent, score_all, write_curve, write_report};
use caila_core::io::{load_checkpoint, save_checkpoint, CheckpointMeta, RunConfig};
use caila_core::model::ModelParams;
use caila_core::train::{frozen_hash, metrics_csv, stage0_pretrain, train as train_adapters};
use caila_core::Error;

/// A problem with the invocation rather than with the run itself.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// 2 for usage and configuration problems, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(Error::Config(_)) = cause.downcast_ref::<Error>() {
            return 2;
        }
    }
    1
}

pub struct GenArgs {
    pub out: PathBuf,
    pub attrs: usize,
    pub objs: usize,
    pub seen_frac: f64,
    pub per_pair: usize,
    pub val_per_pair: usize,
    pub test_per_pair: usize,
    pub image_hw: usize,
    pub noise: f32,
    pub seed: u64,
}

pub fn gen_data(args: &GenArgs) -> Result<()> {
    if args.attrs == 0 || args.objs == 0 {
        return Err(usage("--attrs and --objs must be positive"));
    }
    if !(0.0..=0.5).contains(&args.noise) {
        return Err(usage(format!("--noise must be in [0, 0.5], got {}", args.noise)));
    }
    let spec = RenderSpec::synthetic(args.attrs, args.objs, args.image_hw, args.noise);
    let vocab = spec.vocab()?;
    let ls = split_compositions(&vocab, args.seen_frac, args.seed)?;
    let counts = SplitCounts {
        train: args.per_pair,
        val: args.val_per_pair,
        test: args.test_per_pair,
    };
    let data = generate_dataset(&args.out, &spec, &ls, counts, args.seed)
        .with_context(|| format!("writing dataset to {}", args.out.display()))?;
    println!(
        "seen pairs: {}  unseen pairs: {}  samples: {}",
        ls.seen().len(),
        ls.unseen().len(),
        data.samples.len()
    );
    log::info!("dataset written to {}", args.out.display());
    Ok(())
}

fn load_data(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(usage(format!("data directory {} does not exist", dir.display())));
    }
    load_dataset(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    RunConfig::parse(&text).with_context(|| format!("in config {}", path.display()))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn train(
    data: Option<PathBuf>,
    config: Option<PathBuf>,
    out: &Path,
    seed: Option<u64>,
    metrics: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = read_config(config.as_deref())?;
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    if let Some(d) = data {
        cfg.data = Some(d);
    }
    let dir = cfg
        .data
        .clone()
        .ok_or_else(|| usage("no dataset given: pass --data or set `data` in the config"))?;
    let dataset = load_data(&dir)?;
    if dataset.image_hw != cfg.encoder.image_hw {
        return Err(usage(format!(
            "dataset images are {0}x{0} but the config expects image_hw = {1}",
            dataset.image_hw, cfg.encoder.image_hw
        )));
    }
    let vocab = dataset.labelspace.vocab().clone();
    let mut params = ModelParams::init(cfg.encoder.clone(), vocab, cfg.train.seed)?;
    log::info!(
        "{} parameter tensors, {} training samples",
        params.store.len(),
        dataset.samples.iter().filter(|s| s.split == caila_core::data::Split::Train).count()
    );
    let s0 = stage0_pretrain(&mut params, &dataset, &cfg.train)?;
    log::info!(
        "backbone pretraining done: final loss {:.4}, train top-1 {}%",
        s0.losses.last().copied().unwrap_or(f64::NAN),
        percent(s0.train_top1)
    );
    let outcome = train_adapters(&mut params, &dataset, &cfg.train)?;
    let meta = CheckpointMeta {
        config: cfg.clone(),
        frozen: params
            .store
            .iter()
            .filter(|(_, _, t)| !t.requires_grad())
            .map(|(_, n, _)| n.to_string())
            .collect(),
        frozen_hash: frozen_hash(&params),
    };
    save_checkpoint(out, &params.store, &meta)?;
    let metrics_path = metrics.unwrap_or_else(|| sibling(out, ".metrics.csv"));
    std::fs::write(&metrics_path, metrics_csv(&outcome.metrics))
        .with_context(|| format!("writing {}", metrics_path.display()))?;
    println!(
        "best epoch {} (val auc {}), checkpoint {}",
        outcome.best_epoch,
        percent(outcome.metrics[outcome.best_epoch].val_auc),
        out.display()
    );
    Ok(())
}

pub fn eval(ckpt: &Path, data: &Path, world: World, stage: Stage, report: &Path, curve: Option<PathBuf>) -> Result<()> {
    let dataset = load_data(data)?;
    let ck = load_checkpoint(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    if dataset.image_hw != ck.meta.config.encoder.image_hw {
        return Err(usage(format!(
            "dataset images are {0}x{0} but the checkpoint expects {1}x{1}",
            dataset.image_hw, ck.meta.config.encoder.image_hw
        )));
    }
    let ls = &dataset.labelspace;
    let params = ModelParams::from_store(ck.meta.config.encoder.clone(), ls.vocab().clone(), ck.store)
        .with_context(|| format!("checkpoint {} does not match the dataset", ckpt.display()))?;
    let samples = dataset.stage(stage);
    let scores = score_all(&params, &samples, ls, world)?;
    let result = evaluate(&scores)?;
    let candidates = scores.cols();
    write_report(report, &result, world, candidates)?;
    let curve_path = curve.unwrap_or_else(|| sibling(report, ".curve.csv"));
    write_curve(&curve_path, &result.curve)?;
    println!(
        "{} world, {} candidates: auc {}  best hm {}  seen {}  unseen {}  (top-1 seen {}  unseen {})",
        world.as_str(),
        candidates,
        percent(result.auc),
        percent(result.best_hm),
        percent(result.best_seen),
        percent(result.best_unseen),
        percent(result.seen_top1),
        percent(result.unseen_top1)
    );
    Ok(())
}
