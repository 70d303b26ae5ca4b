//! Tape-level encoder passes over batches.

use super::params::{AdapterParams, ConceptBlock, FrozenBlock, ModelParams};
use crate::autodiff::{Activation, SeqLayout, Tape, Var};
use crate::concept::ConceptKind;
use crate::data::{Pair, PromptTemplate};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `up(σ(down(h))) + h`, row by row.
pub fn adapter_forward<T: Real>(
    tape: &mut Tape<T>,
    params: &ModelParams,
    adapter: &AdapterParams,
    h: Var,
) -> Result<Var> {
    let z = adapter_latent(tape, params, adapter, h)?;
    let up = adapter_up(tape, params, adapter, z)?;
    tape.add(up, h)
}

fn adapter_latent<T: Real>(
    tape: &mut Tape<T>,
    params: &ModelParams,
    adapter: &AdapterParams,
    h: Var,
) -> Result<Var> {
    let store = &params.store;
    let (w, b) = (tape.param(store, adapter.down_w)?, tape.param(store, adapter.down_b)?);
    let down = tape.linear(h, w, b)?;
    tape.activation(down, params.config.activation)
}

fn adapter_up<T: Real>(
    tape: &mut Tape<T>,
    params: &ModelParams,
    adapter: &AdapterParams,
    z: Var,
) -> Result<Var> {
    let store = &params.store;
    let (w, b) = (tape.param(store, adapter.up_w)?, tape.param(store, adapter.up_b)?);
    tape.linear(z, w, b)
}

/// How the sublayer output is transformed before the residual add.
#[derive(Clone, Copy)]
enum Site<'a> {
    Plain,
    Single(&'a AdapterParams),
    Mixture([&'a AdapterParams; 3]),
}

impl Site<'_> {
    fn apply<T: Real>(self, tape: &mut Tape<T>, params: &ModelParams, s: Var) -> Result<Var> {
        match self {
            Site::Plain => Ok(s),
            Site::Single(a) => adapter_forward(tape, params, a, s),
            Site::Mixture([a, o, c]) => {
                let za = adapter_latent(tape, params, a, s)?;
                let zo = adapter_latent(tape, params, o, s)?;
                let zc = adapter_latent(tape, params, c, s)?;
                let zc_mixed = tape.average(&[za, zo, zc])?;
                let ha = adapter_up(tape, params, a, za)?;
                let ho = adapter_up(tape, params, o, zo)?;
                let hc = adapter_up(tape, params, c, zc_mixed)?;
                let mixed = tape.average(&[ha, ho, hc])?;
                tape.add(mixed, s)
            }
        }
    }
}

fn frozen_block<T: Real>(
    tape: &mut Tape<T>,
    params: &ModelParams,
    fb: &FrozenBlock,
    h: Var,
    layout: &SeqLayout,
    attn_site: Site,
    ffn_site: Site,
) -> Result<Var> {
    let store = &params.store;
    let cfg = &params.config;
    let mut p = |id| tape.param(store, id);
    let (ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b) =
        (p(fb.ln1_g)?, p(fb.ln1_b)?, p(fb.qkv_w)?, p(fb.qkv_b)?, p(fb.proj_w)?, p(fb.proj_b)?);
    let (ln2_g, ln2_b, ffn1_w, ffn1_b, ffn2_w, ffn2_b) =
        (p(fb.ln2_g)?, p(fb.ln2_b)?, p(fb.ffn1_w)?, p(fb.ffn1_b)?, p(fb.ffn2_w)?, p(fb.ffn2_b)?);

    let x = tape.layer_norm(h, ln1_g, ln1_b, cfg.ln_eps)?;
    let qkv = tape.linear(x, qkv_w, qkv_b)?;
    let att = tape.attention(qkv, layout, cfg.heads)?;
    let att = tape.linear(att, proj_w, proj_b)?;
    let att = attn_site.apply(tape, params, att)?;
    let h = tape.add(h, att)?;

    let x = tape.layer_norm(h, ln2_g, ln2_b, cfg.ln_eps)?;
    let f = tape.linear(x, ffn1_w, ffn1_b)?;
    let f = tape.activation(f, Activation::Gelu)?;
    let f = tape.linear(f, ffn2_w, ffn2_b)?;
    let f = ffn_site.apply(tape, params, f)?;
    tape.add(h, f)
}

/// One block with `concept`'s adapters, or the plain frozen block when
/// `concept` is `None`.
pub fn block_forward<T: Real>(
    tape: &mut Tape<T>,
    params: &ModelParams,
    block: &ConceptBlock,
    h: Var,
    layout: &SeqLayout,
    concept: Option<ConceptKind>,
) -> Result<Var> {
    let fb = match concept {
        Some(c) => block.frozen_for(c),
        None => block.frozen_for(ConceptKind::Composition),
    };
    let (a, f) = match concept {
        None => (Site::Plain, Site::Plain),
        Some(c) => {
            let s = block.require_adapters(c)?;
            (Site::Single(&s.attn), Site::Single(&s.ffn))
        }
    };
    frozen_block(tape, params, fb, h, layout, a, f)
}

/// One block with the ternary adapter mixture at both sites.
pub fn vision_moa_block_forward<T: Real>(
    tape: &mut Tape<T>,
    params: &ModelParams,
    block: &ConceptBlock,
    h: Var,
    layout: &SeqLayout,
) -> Result<Var> {
    let a = block.require_adapters(ConceptKind::Attribute)?;
    let o = block.require_adapters(ConceptKind::Object)?;
    let c = block.require_adapters(ConceptKind::Composition)?;
    frozen_block(
        tape,
        params,
        block.frozen(),
        h,
        layout,
        Site::Mixture([&a.attn, &o.attn, &c.attn]),
        Site::Mixture([&a.ffn, &o.ffn, &c.ffn]),
    )
}

/// Vision-side hidden states of a batch, before the composition stream.
#[derive(Debug, Clone)]
pub struct VisionStreams {
    pub layout: SeqLayout,
    /// Embedded tokens.
    pub h0: Var,
    /// Attribute and object streams after the stage-1 depths.
    pub h_a: Var,
    pub h_o: Var,
    /// Normalized `[CLS]` features of the attribute and object streams.
    pub f_a: Var,
    pub f_o: Var,
}

impl VisionStreams {
    pub fn batch(&self) -> usize {
        self.layout.n_seq()
    }
}

/// Encoder passes over a parameter set. With `backbone_only` every adapter
/// is skipped, which yields the frozen backbone's outputs.
#[derive(Clone, Copy)]
pub struct Encoder<'a> {
    pub params: &'a ModelParams,
    pub backbone_only: bool,
}

impl<'a> Encoder<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        Encoder {
            params,
            backbone_only: false,
        }
    }

    pub fn backbone(params: &'a ModelParams) -> Self {
        Encoder {
            params,
            backbone_only: true,
        }
    }

    fn vision_adapters(&self) -> bool {
        !self.backbone_only && self.params.config.ablation.vision_adapters
    }

    fn text_adapters(&self) -> bool {
        !self.backbone_only && self.params.config.ablation.text_adapters
    }

    /// Whether the composition stream is built from fused stage-1 states.
    pub fn two_stage(&self) -> bool {
        !self.backbone_only && self.params.config.ablation.two_stage()
    }

    /// Patch embedding plus `[CLS]` and positions: `[B·T, d]`.
    pub fn embed_images<T: Real>(&self, tape: &mut Tape<T>, images: &[&Tensor]) -> Result<(Var, SeqLayout)> {
        let p = self.params;
        let cfg = &p.config;
        if images.is_empty() {
            return Err(Error::Parameter("empty image batch".into()));
        }
        let (hw, ps) = (cfg.image_hw, cfg.patch);
        let side = cfg.patches_per_side();
        let n_patch = side * side;
        let width = ps * ps * 3;
        let mut patches = Vec::with_capacity(images.len() * n_patch * width);
        for img in images {
            if img.shape() != [hw, hw, 3] {
                return Err(Error::dim("embed_images", img.shape(), &[hw, hw, 3]));
            }
            let data = img.data();
            for py in 0..side {
                for px in 0..side {
                    for y in 0..ps {
                        let row = (py * ps + y) * hw + px * ps;
                        patches.extend(data[row * 3..(row + ps) * 3].iter().map(|&v| T::from_f32(v)));
                    }
                }
            }
        }
        let b = images.len();
        let x = tape.leaf(vec![b * n_patch, width], patches, false)?;
        let (w, bias) = (tape.param(&p.store, p.patch_w)?, tape.param(&p.store, p.patch_b)?);
        let x = tape.linear(x, w, bias)?;
        let cls = tape.param(&p.store, p.vision_cls)?;
        let t = n_patch + 1;
        let mut picks = Vec::with_capacity(b * t);
        for i in 0..b {
            picks.push((0, 0));
            picks.extend((0..n_patch).map(|j| (1, i * n_patch + j)));
        }
        let tokens = tape.gather_rows(&[cls, x], &picks)?;
        let pos = tape.param(&p.store, p.vision_pos)?;
        let pos_picks: Vec<_> = (0..b).flat_map(|_| (0..t).map(|j| (0, j))).collect();
        let pos = tape.gather_rows(&[pos], &pos_picks)?;
        Ok((tape.add(tokens, pos)?, SeqLayout::dense(b, t)))
    }

    fn run_blocks<T: Real>(
        &self,
        tape: &mut Tape<T>,
        blocks: &[ConceptBlock],
        mut h: Var,
        layout: &SeqLayout,
        concept: Option<ConceptKind>,
    ) -> Result<Var> {
        for block in blocks {
            h = block_forward(tape, self.params, block, h, layout, concept)?;
        }
        Ok(h)
    }

    fn readout<T: Real>(&self, tape: &mut Tape<T>, h: Var, layout: &SeqLayout, vision: bool) -> Result<Var> {
        let p = self.params;
        let idx: Vec<usize> = (0..layout.n_seq()).map(|i| i * layout.seq_len).collect();
        let cls = tape.select_rows(h, &idx)?;
        let (g, b) = if vision {
            (p.vision_ln_g, p.vision_ln_b)
        } else {
            (p.text_ln_g, p.text_ln_b)
        };
        let (g, b) = (tape.param(&p.store, g)?, tape.param(&p.store, b)?);
        let x = tape.layer_norm(cls, g, b, p.config.ln_eps)?;
        tape.l2_normalize_rows(x)
    }

    fn vision_readout<T: Real>(&self, tape: &mut Tape<T>, h: Var, layout: &SeqLayout) -> Result<Var> {
        self.readout(tape, h, layout, true)
    }

    /// Attribute and object streams of a batch.
    pub fn vision_streams<T: Real>(&self, tape: &mut Tape<T>, images: &[&Tensor]) -> Result<VisionStreams> {
        let (h0, layout) = self.embed_images(tape, images)?;
        let blocks = &self.params.vision;
        let split = self.params.config.stage1_depth();
        if !self.vision_adapters() {
            let h1 = self.run_blocks(tape, &blocks[..split], h0, &layout, None)?;
            let hn = self.run_blocks(tape, &blocks[split..], h1, &layout, None)?;
            let f = self.vision_readout(tape, hn, &layout)?;
            return Ok(VisionStreams {
                layout,
                h0,
                h_a: h1,
                h_o: h1,
                f_a: f,
                f_o: f,
            });
        }
        let stream = |tape: &mut Tape<T>, c| -> Result<(Var, Var)> {
            let h1 = self.run_blocks(tape, &blocks[..split], h0, &layout, Some(c))?;
            let hn = self.run_blocks(tape, &blocks[split..], h1, &layout, Some(c))?;
            Ok((h1, self.vision_readout(tape, hn, &layout)?))
        };
        let (h_a, f_a) = stream(tape, ConceptKind::Attribute)?;
        let (h_o, f_o) = stream(tape, ConceptKind::Object)?;
        Ok(VisionStreams {
            layout,
            h0,
            h_a,
            h_o,
            f_a,
            f_o,
        })
    }

    /// Composition features. Row `k` fuses the attribute stream of image
    /// `mixes[k].0` with the object stream of image `mixes[k].1`; mixed
    /// donors are only meaningful on the two-stage path.
    pub fn vision_composition<T: Real>(
        &self,
        tape: &mut Tape<T>,
        streams: &VisionStreams,
        mixes: &[(usize, usize)],
    ) -> Result<Var> {
        let n = streams.batch();
        let t = streams.layout.seq_len;
        if mixes.iter().any(|&(i, j)| i >= n || j >= n) {
            return Err(Error::Parameter(format!("donor index out of range for batch {n}")));
        }
        let layout = SeqLayout::dense(mixes.len(), t);
        let blocks = &self.params.vision;
        let split = self.params.config.stage1_depth();
        let identity = mixes.len() == n && mixes.iter().enumerate().all(|(k, &(i, j))| i == k && j == k);

        if !self.two_stage() {
            if mixes.iter().any(|&(i, j)| i != j) {
                return Err(Error::Contract("mixed donors need the two-stage vision path".into()));
            }
            if !self.vision_adapters() {
                let f = streams.f_a;
                return if identity {
                    Ok(f)
                } else {
                    let rows: Vec<usize> = mixes.iter().map(|m| m.0).collect();
                    tape.select_rows(f, &rows)
                };
            }
            let h0 = if identity {
                streams.h0
            } else {
                let picks: Vec<_> = mixes.iter().flat_map(|&(i, _)| (0..t).map(move |r| (0, i * t + r))).collect();
                tape.gather_rows(&[streams.h0], &picks)?
            };
            let h = self.run_blocks(tape, blocks, h0, &layout, Some(ConceptKind::Composition))?;
            return self.vision_readout(tape, h, &layout);
        }

        let (ha, ho) = if identity {
            (streams.h_a, streams.h_o)
        } else {
            let pa: Vec<_> = mixes.iter().flat_map(|&(i, _)| (0..t).map(move |r| (0, i * t + r))).collect();
            let po: Vec<_> = mixes.iter().flat_map(|&(_, j)| (0..t).map(move |r| (0, j * t + r))).collect();
            (tape.gather_rows(&[streams.h_a], &pa)?, tape.gather_rows(&[streams.h_o], &po)?)
        };
        let mut h = tape.average(&[ha, ho])?;
        for block in &blocks[split..] {
            h = vision_moa_block_forward(tape, self.params, block, h, &layout)?;
        }
        self.vision_readout(tape, h, &layout)
    }

    /// Normalized prompt embeddings for `kind`, one row per `(attr, obj)`
    /// item (the unused index of primitive prompts is ignored).
    pub fn encode_prompts<T: Real>(
        &self,
        tape: &mut Tape<T>,
        kind: ConceptKind,
        items: &[(usize, usize)],
    ) -> Result<Var> {
        let p = self.params;
        if items.is_empty() {
            return Err(Error::Parameter("no prompts to encode".into()));
        }
        let mut prompts = Vec::with_capacity(items.len());
        for &(a, o) in items {
            let tpl = PromptTemplate::render(kind, &p.vocab, a, o)?;
            prompts.push(p.tokens.tokenize_prompt(&tpl, p.config.max_text_len)?);
        }
        let seq_len = prompts.iter().map(|t| t.valid_len).max().unwrap_or(1);
        let mut picks = Vec::with_capacity(items.len() * seq_len);
        for tp in &prompts {
            for pos in 0..seq_len {
                let slot = tp.class_slots.iter().find(|(i, _)| *i == pos);
                picks.push(match slot {
                    Some((_, crate::data::SlotKind::Attribute(a))) => (1, *a),
                    Some((_, crate::data::SlotKind::Object(o))) => (2, *o),
                    None => (0, tp.ids[pos]),
                });
            }
        }
        let tok = tape.param(&p.store, p.token_emb)?;
        let ca = tape.param(&p.store, p.class_attr)?;
        let co = tape.param(&p.store, p.class_obj)?;
        let x = tape.gather_rows(&[tok, ca, co], &picks)?;
        let pos = tape.param(&p.store, p.text_pos)?;
        let pos_picks: Vec<_> = (0..items.len()).flat_map(|_| (0..seq_len).map(|j| (0, j))).collect();
        let pos = tape.gather_rows(&[pos], &pos_picks)?;
        let h = tape.add(x, pos)?;
        let layout = SeqLayout {
            seq_len,
            valid: prompts.iter().map(|t| t.valid_len).collect(),
        };
        let concept = self.text_adapters().then_some(kind);
        let h = self.run_blocks(tape, &p.text, h, &layout, concept)?;
        self.readout(tape, h, &layout, false)
    }

    /// Text embeddings for a label set.
    pub fn encode_labels<T: Real>(&self, tape: &mut Tape<T>, pairs: &[Pair]) -> Result<TextEmbeddings> {
        let p = self.params;
        let attrs: Vec<_> = (0..p.vocab.n_attrs()).map(|a| (a, 0)).collect();
        let objs: Vec<_> = (0..p.vocab.n_objs()).map(|o| (0, o)).collect();
        let g_a = self.encode_prompts(tape, ConceptKind::Attribute, &attrs)?;
        let g_o = self.encode_prompts(tape, ConceptKind::Object, &objs)?;
        let items: Vec<_> = pairs.iter().map(|q| (q.attr, q.obj)).collect();
        let g_c = self.encode_prompts(tape, ConceptKind::Composition, &items)?;
        let g = if p.config.ablation.text_moa {
            let ra: Vec<usize> = pairs.iter().map(|q| q.attr).collect();
            let ro: Vec<usize> = pairs.iter().map(|q| q.obj).collect();
            let ga = tape.select_rows(g_a, &ra)?;
            let go = tape.select_rows(g_o, &ro)?;
            let mixed = tape.average(&[ga, go, g_c])?;
            tape.l2_normalize_rows(mixed)?
        } else {
            g_c
        };
        Ok(TextEmbeddings { g_a, g_o, g_c, g })
    }
}

/// Normalized text embeddings: per attribute, per object, and per pair.
#[derive(Debug, Clone, Copy)]
pub struct TextEmbeddings {
    pub g_a: Var,
    pub g_o: Var,
    pub g_c: Var,
    /// Mixed composition embeddings used for scoring.
    pub g: Var,
}

/// `f · gᵀ`: one row of scores per image.
pub fn scores<T: Real>(tape: &mut Tape<T>, f: Var, g: Var) -> Result<Var> {
    let gt = tape.transpose(g)?;
    tape.matmul(f, gt)
}
