use super::metrics::ScoreMatrix;
use crate::autodiff::Tape;
use crate::data::{LabelSpace, Pair, Sample, World};
use crate::error::{Error, Result};
use crate::model::{Encoder, ModelParams};
use crate::tensor::Tensor;

/// Images per inference pass when encoding a split.
const BATCH: usize = 64;

/// Mixed text embeddings `G`, one row per pair.
pub fn text_features(enc: &Encoder, pairs: &[Pair]) -> Result<Tensor> {
    let mut tape = Tape::<f32>::inference();
    let g = enc.encode_labels(&mut tape, pairs)?.g;
    Ok(tape.to_tensor(g))
}

/// Composition features `F_C`, one row per image.
pub fn vision_features(enc: &Encoder, images: &[&Tensor]) -> Result<Tensor> {
    let d = enc.params.config.d;
    let mut out = Vec::with_capacity(images.len() * d);
    for chunk in images.chunks(BATCH) {
        let mut tape = Tape::<f32>::inference();
        let s = enc.vision_streams(&mut tape, chunk)?;
        let mixes: Vec<_> = (0..chunk.len()).map(|i| (i, i)).collect();
        let f = enc.vision_composition(&mut tape, &s, &mixes)?;
        out.extend_from_slice(tape.value(f));
    }
    Tensor::new(vec![images.len(), d], out)
}

/// Scores `f · gᵀ` accumulated in double precision.
pub fn score_features(f: &Tensor, g: &Tensor, col_unseen: Vec<bool>, truth: Vec<usize>) -> Result<ScoreMatrix> {
    if f.cols() != g.cols() || g.rows() != col_unseen.len() || f.rows() != truth.len() {
        return Err(Error::dim("score_features", f.shape(), g.shape()));
    }
    let mut values = Vec::with_capacity(f.rows() * g.rows());
    for r in 0..f.rows() {
        let x = f.row(r);
        for c in 0..g.rows() {
            values.push(x.iter().zip(g.row(c)).map(|(&a, &b)| a as f64 * b as f64).sum());
        }
    }
    ScoreMatrix::new(values, col_unseen, truth)
}

/// Scores every sample against the candidate set of `world`. In the open
/// world every pair outside the seen set counts as unseen.
pub fn score_all(params: &ModelParams, samples: &[&Sample], labelspace: &LabelSpace, world: World) -> Result<ScoreMatrix> {
    score_samples(&Encoder::new(params), samples, labelspace, world, None)
}

/// [`score_all`] with an explicit encoder and optionally precomputed
/// composition features (one row per sample).
pub fn score_samples(
    enc: &Encoder,
    samples: &[&Sample],
    labelspace: &LabelSpace,
    world: World,
    features: Option<&Tensor>,
) -> Result<ScoreMatrix> {
    if &enc.params.vocab != labelspace.vocab() {
        return Err(Error::Contract("model vocabulary differs from the label space".into()));
    }
    let candidates = labelspace.candidates(world);
    let truth = samples
        .iter()
        .map(|s| {
            candidates.binary_search(&s.pair).map_err(|_| {
                Error::Contract(format!(
                    "label {} is not a {} candidate",
                    labelspace.vocab().pair_name(s.pair),
                    world.as_str()
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let col_unseen = candidates.iter().map(|&p| !labelspace.is_seen(p)).collect();
    let g = text_features(enc, &candidates)?;
    let f = match features {
        Some(f) => f.clone(),
        None => {
            let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
            vision_features(enc, &images)?
        }
    };
    score_features(&f, &g, col_unseen, truth)
}
