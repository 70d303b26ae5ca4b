use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use super::loss::{caila_loss, LossConfig, VisionBatch};
use super::optim::{adam_step, AdamConfig, OptimizerState};
use super::shift::{concept_shift, ShiftPlan};
use crate::autodiff::{ParamId, Tape};
use crate::data::{Dataset, LabelSpace, Pair, Sample, Split, Stage, World};
use crate::error::{Error, Result};
use crate::eval::{evaluate, score_samples, vision_features, EvalReport};
use crate::model::{Encoder, ModelParams};
use crate::tensor::Tensor;

/// One line of the metrics log. Epoch 0 is the state before any update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub val_seen: f64,
    pub val_unseen: f64,
    pub val_auc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage0Report {
    /// Mean composition loss per epoch.
    pub losses: Vec<f64>,
    /// Top-1 over the seen pairs on the training images afterwards.
    pub train_top1: f64,
    pub frozen_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    /// Epoch whose parameters were restored (highest validation AUC,
    /// earliest on ties).
    pub best_epoch: usize,
    pub frozen_hash_before: String,
    pub frozen_hash_after: String,
    pub shifted: usize,
    pub skipped: usize,
}

/// SHA-256 over the name, shape and bytes of every frozen tensor.
pub fn frozen_hash(params: &ModelParams) -> String {
    let mut h = Sha256::new();
    for (_, name, t) in params.store.iter().filter(|(_, _, t)| !t.requires_grad()) {
        h.update((name.len() as u32).to_le_bytes());
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u32).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().fold(String::new(), |mut s, b| {
        write!(s, "{b:02x}").expect("write to string");
        s
    })
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,loss,val_seen,val_unseen,val_auc\n");
    for m in metrics {
        writeln!(out, "{},{},{},{},{}", m.epoch, m.loss, m.val_seen, m.val_unseen, m.val_auc).expect("write to string");
    }
    out
}

fn batches(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(size).map(<[usize]>::to_vec).collect()
}

/// One optimizer step; returns the batch loss.
#[allow(clippy::too_many_arguments)]
fn step(
    params: &mut ModelParams,
    backbone_only: bool,
    vision: VisionBatch,
    labels: &[Pair],
    plan: &ShiftPlan,
    labelspace: &LabelSpace,
    loss_cfg: &LossConfig,
    state: &mut OptimizerState,
    adam: &AdamConfig,
) -> Result<f64> {
    let mut tape = Tape::<f32>::new();
    let enc = Encoder { params, backbone_only };
    let diverged = |what: String| {
        Error::Training(format!("{what}; try a lower learning rate (currently {})", adam.lr))
    };
    let terms = caila_loss(&mut tape, &enc, vision, labels, plan, labelspace, loss_cfg).map_err(|e| match e {
        Error::NonFinite { op } => diverged(format!("non-finite value in {op}")),
        other => other,
    })?;
    let loss = tape.scalar(terms.total)? as f64;
    if !loss.is_finite() {
        return Err(diverged(format!("loss diverged to {loss}")));
    }
    tape.backward(terms.total)?;
    params.store.zero_grads();
    tape.accumulate_param_grads(&mut params.store);
    adam_step(&mut params.store, state, adam)?;
    Ok(loss)
}

/// Trains the backbone, embeddings and class prompts on the seen training
/// pairs with the composition term alone, then freezes the backbone.
pub fn stage0_pretrain(params: &mut ModelParams, data: &Dataset, cfg: &TrainConfig) -> Result<Stage0Report> {
    cfg.validate()?;
    let ls = &data.labelspace;
    let train: Vec<&Sample> = data.split(Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    params.pretraining_phase();
    let mut state = OptimizerState::new(&params.store);
    let adam = cfg.stage0_adam();
    let loss_cfg = LossConfig {
        primitive: false,
        ..cfg.loss()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5354_4147_4530);
    let mut losses = Vec::with_capacity(cfg.stage0_epochs);
    for epoch in 1..=cfg.stage0_epochs {
        let mut total = 0.0;
        for idx in batches(train.len(), cfg.batch, &mut rng) {
            let images: Vec<&Tensor> = idx.iter().map(|&i| &train[i].image).collect();
            let labels: Vec<Pair> = idx.iter().map(|&i| train[i].pair).collect();
            let loss = step(
                params,
                true,
                VisionBatch::Images(&images),
                &labels,
                &ShiftPlan::default(),
                ls,
                &loss_cfg,
                &mut state,
                &adam,
            )
            .map_err(|e| match e {
                Error::Training(msg) => Error::Training(format!("backbone pretraining epoch {epoch}: {msg}")),
                other => other,
            })?;
            total += loss * idx.len() as f64;
        }
        let mean = total / train.len() as f64;
        log::info!("pretrain epoch {epoch}/{}: loss {mean:.4}", cfg.stage0_epochs);
        losses.push(mean);
    }
    params.freeze_backbone();

    let enc = Encoder::backbone(params);
    let images: Vec<&Tensor> = train.iter().map(|s| &s.image).collect();
    let f = vision_features(&enc, &images)?;
    let g = crate::eval::text_features(&enc, ls.seen())?;
    let truth: Vec<usize> = train.iter().map(|s| ls.seen_index(s.pair).expect("train pairs are seen")).collect();
    let m = crate::eval::score_features(&f, &g, vec![false; ls.seen().len()], truth)?;
    let hits = (0..m.rows())
        .filter(|&r| {
            let row = m.row(r);
            let best = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            best == m.truth()[r]
        })
        .count();
    Ok(Stage0Report {
        losses,
        train_top1: hits as f64 / m.rows() as f64,
        frozen_hash: frozen_hash(params),
    })
}

fn snapshot(params: &ModelParams) -> Vec<(ParamId, Vec<f32>)> {
    params
        .trainable_ids()
        .into_iter()
        .map(|id| (id, params.store.get(id).data().to_vec()))
        .collect()
}

fn restore(params: &mut ModelParams, snap: &[(ParamId, Vec<f32>)]) {
    for (id, data) in snap {
        params.store.get_mut(*id).data_mut().copy_from_slice(data);
    }
}

/// Closed-world validation over the seen and unseen validation splits.
fn validate(params: &ModelParams, val: &[&Sample], labelspace: &LabelSpace, cached: Option<&Tensor>) -> Result<EvalReport> {
    let m = score_samples(&Encoder::new(params), val, labelspace, World::Closed, cached)?;
    evaluate(&m)
}

/// Adapter and prompt training with the frozen backbone. Leaves `params`
/// at the epoch with the best validation AUC.
pub fn train(params: &mut ModelParams, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ls = &data.labelspace;
    if &params.vocab != ls.vocab() {
        return Err(Error::Contract("model vocabulary differs from the dataset".into()));
    }
    let train: Vec<&Sample> = data.split(Split::Train).collect();
    let val = data.stage(Stage::Val);
    if train.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    params.freeze_backbone();
    let hash_before = frozen_hash(params);
    let ablation = params.config.ablation;
    let shifting = ablation.two_stage() && cfg.shift_ratio > 0.0;
    if cfg.shift_ratio > 0.0 && !shifting {
        log::info!("concept shift disabled: it needs vision adapters with mixture layers");
    }

    // With every vision adapter disabled the image features never change.
    let (train_cache, val_cache) = if ablation.vision_adapters {
        (None, None)
    } else {
        let enc = Encoder::new(params);
        let ti: Vec<&Tensor> = train.iter().map(|s| &s.image).collect();
        let vi: Vec<&Tensor> = val.iter().map(|s| &s.image).collect();
        (Some(vision_features(&enc, &ti)?), Some(vision_features(&enc, &vi)?))
    };
    let d = params.config.d;
    let rows_of = |cache: &Tensor, idx: &[usize]| -> Result<Tensor> {
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(cache.row(i));
        }
        Tensor::new(vec![idx.len(), d], out)
    };

    let loss_cfg = cfg.loss();
    let adam = cfg.adam();
    let mut state = OptimizerState::new(&params.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Epoch 0: loss over the training set and validation before any update.
    let mut initial = 0.0;
    {
        let enc = Encoder::new(params);
        let order: Vec<usize> = (0..train.len()).collect();
        for idx in order.chunks(cfg.batch) {
            let mut tape = Tape::<f32>::inference();
            let labels: Vec<Pair> = idx.iter().map(|&i| train[i].pair).collect();
            let images: Vec<&Tensor> = idx.iter().map(|&i| &train[i].image).collect();
            let feats = train_cache.as_ref().map(|c| rows_of(c, idx)).transpose()?;
            let vision = match &feats {
                Some(f) => VisionBatch::Features(f),
                None => VisionBatch::Images(&images),
            };
            let terms = caila_loss(&mut tape, &enc, vision, &labels, &ShiftPlan::default(), ls, &loss_cfg)?;
            initial += tape.scalar(terms.total)? as f64 * idx.len() as f64;
        }
    }
    let report = validate(params, &val, ls, val_cache.as_ref())?;
    let mut metrics = vec![EpochMetrics {
        epoch: 0,
        loss: initial / train.len() as f64,
        val_seen: report.seen_top1,
        val_unseen: report.unseen_top1,
        val_auc: report.auc,
    }];
    log::info!("epoch 0: loss {:.4} val auc {:.4}", metrics[0].loss, report.auc);
    let mut best = (0, report.auc, snapshot(params));
    let (mut shifted, mut skipped) = (0, 0);

    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for idx in batches(train.len(), cfg.batch, &mut rng) {
            let labels: Vec<Pair> = idx.iter().map(|&i| train[i].pair).collect();
            let images: Vec<&Tensor> = idx.iter().map(|&i| &train[i].image).collect();
            let shift_seed = rng.next_u64();
            let plan = if shifting {
                concept_shift(&labels, cfg.shift_ratio, ls, shift_seed)
            } else {
                ShiftPlan::default()
            };
            shifted += plan.shifted.len();
            skipped += plan.skipped;
            let feats = train_cache.as_ref().map(|c| rows_of(c, &idx)).transpose()?;
            let vision = match &feats {
                Some(f) => VisionBatch::Features(f),
                None => VisionBatch::Images(&images),
            };
            let loss = step(params, false, vision, &labels, &plan, ls, &loss_cfg, &mut state, &adam)
                .map_err(|e| match e {
                    Error::Training(msg) => Error::Training(format!("epoch {epoch}: {msg}")),
                    other => other,
                })?;
            total += loss * idx.len() as f64;
        }
        let report = validate(params, &val, ls, val_cache.as_ref())?;
        let m = EpochMetrics {
            epoch,
            loss: total / train.len() as f64,
            val_seen: report.seen_top1,
            val_unseen: report.unseen_top1,
            val_auc: report.auc,
        };
        log::info!(
            "epoch {epoch}/{}: loss {:.4} val seen {:.3} unseen {:.3} auc {:.4}",
            cfg.epochs,
            m.loss,
            m.val_seen,
            m.val_unseen,
            m.val_auc
        );
        if m.val_auc > best.1 {
            best = (epoch, m.val_auc, snapshot(params));
        }
        metrics.push(m);
    }
    restore(params, &best.2);
    let hash_after = frozen_hash(params);
    if hash_after != hash_before {
        log::error!("frozen parameters changed during training");
    }
    Ok(TrainOutcome {
        metrics,
        best_epoch: best.0,
        frozen_hash_before: hash_before,
        frozen_hash_after: hash_after,
        shifted,
        skipped,
    })
}
