use super::shift::{composition_rows, ShiftPlan};
use crate::autodiff::{Tape, Var};
use crate::data::{LabelSpace, Pair};
use crate::error::{Error, Result};
use crate::model::{scores, Encoder};
use crate::tensor::{Real, Tensor};

/// Temperatures and whether the attribute and object terms are included.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub tau_c: f64,
    pub tau_a: f64,
    pub tau_o: f64,
    pub primitive: bool,
}

/// Visual input of a training batch.
#[derive(Debug, Clone, Copy)]
pub enum VisionBatch<'a> {
    Images(&'a [&'a Tensor]),
    /// Normalized features of a frozen vision encoder, one row per sample.
    /// Only valid while every vision adapter is disabled.
    Features(&'a Tensor),
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub composition: Var,
    pub attribute: Option<Var>,
    pub object: Option<Var>,
}

/// Cross-entropy of the composition scores over all seen pairs, plus the
/// attribute and object terms over every attribute and object. Shifted rows
/// only enter the composition term; every term is averaged over the batch.
pub fn caila_loss<T: Real>(
    tape: &mut Tape<T>,
    enc: &Encoder,
    vision: VisionBatch,
    labels: &[Pair],
    plan: &ShiftPlan,
    labelspace: &LabelSpace,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let b = labels.len();
    if b == 0 {
        return Err(Error::Parameter("empty training batch".into()));
    }
    let vocab = labelspace.vocab();
    for &p in labels.iter().chain(plan.shifted.iter().map(|f| &f.label)) {
        if !labelspace.is_seen(p) {
            return Err(Error::Contract(format!("training label {} is not a seen pair", vocab.pair_name(p))));
        }
    }
    let (mixes, comp_labels, regular) = composition_rows(labels, plan);
    if !plan.shifted.is_empty() && !enc.two_stage() {
        return Err(Error::Contract("concept shift needs the two-stage vision path".into()));
    }

    let (f_a, f_o, f_c) = match vision {
        VisionBatch::Images(images) => {
            if images.len() != b {
                return Err(Error::dim("caila_loss", &[images.len()], &[b]));
            }
            let s = enc.vision_streams(tape, images)?;
            let f_c = enc.vision_composition(tape, &s, &mixes)?;
            (s.f_a, s.f_o, f_c)
        }
        VisionBatch::Features(features) => {
            if !enc.backbone_only && enc.params.config.ablation.vision_adapters {
                return Err(Error::Contract("cached vision features with trainable vision adapters".into()));
            }
            if features.rows() != b || features.cols() != enc.params.config.d {
                return Err(Error::dim("caila_loss", features.shape(), &[b, enc.params.config.d]));
            }
            if !plan.shifted.is_empty() {
                return Err(Error::Contract("concept shift needs images".into()));
            }
            let f = tape.constant(features)?;
            (f, f, f)
        }
    };

    let text = enc.encode_labels(tape, labelspace.seen())?;
    let targets: Vec<usize> = comp_labels
        .iter()
        .map(|&p| labelspace.seen_index(p).expect("checked above"))
        .collect();
    let logits = scores(tape, f_c, text.g)?;
    let composition = tape.cross_entropy(logits, &targets, cfg.tau_c)?;
    if !cfg.primitive {
        return Ok(LossTerms {
            total: composition,
            composition,
            attribute: None,
            object: None,
        });
    }

    let rows: Vec<usize> = (0..b).filter(|&i| regular[i]).collect();
    let weight = rows.len() as f64 / b as f64;
    let primitive = |tape: &mut Tape<T>, f: Var, g: Var, tau: f64, target: &dyn Fn(Pair) -> usize| -> Result<Var> {
        let f = if rows.len() == b { f } else { tape.select_rows(f, &rows)? };
        let t: Vec<usize> = rows.iter().map(|&i| target(labels[i])).collect();
        let logits = scores(tape, f, g)?;
        let ce = tape.cross_entropy(logits, &t, tau)?;
        if rows.len() == b {
            Ok(ce)
        } else {
            tape.scale(ce, weight)
        }
    };
    let attribute = primitive(tape, f_a, text.g_a, cfg.tau_a, &|p| p.attr)?;
    let object = primitive(tape, f_o, text.g_o, cfg.tau_o, &|p| p.obj)?;
    let total = tape.add(composition, attribute)?;
    let total = tape.add(total, object)?;
    Ok(LossTerms {
        total,
        composition,
        attribute: Some(attribute),
        object: Some(object),
    })
}
