//! The dual encoder: frozen transformer blocks with per-concept adapters,
//! the two-stage vision pipeline with mixture layers, the text mixture, and
//! compatibility scores.
//!
//! The batch-level passes live in [`forward`]; the functions here are
//! single-sample conveniences returning plain tensors.

pub mod config;
pub mod forward;
pub mod params;

pub use config::{Ablation, EncoderConfig};
pub use forward::{
    adapter_forward, block_forward, scores, vision_moa_block_forward, Encoder, TextEmbeddings,
    VisionStreams,
};
pub use params::{
    AdapterParams, ConceptBlock, FrozenBlock, ModelParams, SiteAdapters, ADAPTER_PREFIX,
    PROMPT_PREFIX,
};

use crate::autodiff::Tape;
use crate::concept::ConceptKind;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A text label by primitive names.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label<'a> {
    Attribute(&'a str),
    Object(&'a str),
    Composition(&'a str, &'a str),
}

fn row(t: Tensor) -> Tensor {
    let d = t.numel();
    Tensor::new(vec![d], t.into_data()).expect("row of a matrix")
}

/// `F_A(x)` or `F_O(x)`.
pub fn encode_vision_primitive(x: &Tensor, concept: ConceptKind, params: &ModelParams) -> Result<Tensor> {
    if concept == ConceptKind::Composition {
        return Err(Error::Contract("primitive vision encoding needs attribute or object".into()));
    }
    let mut tape = Tape::<f32>::inference();
    let s = Encoder::new(params).vision_streams(&mut tape, &[x])?;
    let f = if concept == ConceptKind::Attribute { s.f_a } else { s.f_o };
    Ok(row(tape.to_tensor(f)))
}

/// `F_C(x)`.
pub fn encode_vision_composition(x: &Tensor, params: &ModelParams) -> Result<Tensor> {
    let mut tape = Tape::<f32>::inference();
    let enc = Encoder::new(params);
    let s = enc.vision_streams(&mut tape, &[x])?;
    let f = enc.vision_composition(&mut tape, &s, &[(0, 0)])?;
    Ok(row(tape.to_tensor(f)))
}

/// `G_A(a)`, `G_O(o)` or `G_C(a, o)`.
pub fn encode_text(label: Label, params: &ModelParams) -> Result<Tensor> {
    let v = &params.vocab;
    let (kind, item) = match label {
        Label::Attribute(a) => (ConceptKind::Attribute, (v.attr_index(a)?, 0)),
        Label::Object(o) => (ConceptKind::Object, (0, v.obj_index(o)?)),
        Label::Composition(a, o) => (ConceptKind::Composition, (v.attr_index(a)?, v.obj_index(o)?)),
    };
    let mut tape = Tape::<f32>::inference();
    let g = Encoder::new(params).encode_prompts(&mut tape, kind, &[item])?;
    Ok(row(tape.to_tensor(g)))
}

/// Mixed composition embedding `G(a, o)`.
pub fn text_mixture(attr: &str, obj: &str, params: &ModelParams) -> Result<Tensor> {
    let pair = params.vocab.pair(attr, obj)?;
    let mut tape = Tape::<f32>::inference();
    let g = Encoder::new(params).encode_labels(&mut tape, &[pair])?.g;
    Ok(row(tape.to_tensor(g)))
}

/// `F_C(x) · G(a, o)`.
pub fn compatibility(x: &Tensor, attr: &str, obj: &str, params: &ModelParams) -> Result<f64> {
    let f = encode_vision_composition(x, params)?;
    let g = text_mixture(attr, obj, params)?;
    f.dot(&g)
}

/// `F_A(x) · G_A(a)` or `F_O(x) · G_O(o)`.
pub fn primitive_compatibility(x: &Tensor, label: Label, params: &ModelParams) -> Result<f64> {
    let concept = match label {
        Label::Attribute(_) => ConceptKind::Attribute,
        Label::Object(_) => ConceptKind::Object,
        Label::Composition(..) => {
            return Err(Error::Contract("primitive compatibility needs a primitive label".into()))
        }
    };
    let f = encode_vision_primitive(x, concept, params)?;
    let g = encode_text(label, params)?;
    f.dot(&g)
}
