use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{Ablation, EncoderConfig};
use crate::autodiff::{ParamId, ParamStore};
use crate::concept::ConceptKind;
use crate::data::{TokenVocab, VocabSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Prefix shared by every adapter tensor name.
pub const ADAPTER_PREFIX: &str = "adapter.";
/// Prefix shared by the trainable class-prompt tables.
pub const PROMPT_PREFIX: &str = "prompt.";

/// Bottleneck adapter `up(σ(down(h))) + h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterParams {
    pub down_w: ParamId,
    pub down_b: ParamId,
    pub up_w: ParamId,
    pub up_b: ParamId,
}

impl AdapterParams {
    pub fn ids(&self) -> [ParamId; 4] {
        [self.down_w, self.down_b, self.up_w, self.up_b]
    }
}

/// The two adapter sites of one block for one concept.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SiteAdapters {
    pub attn: AdapterParams,
    pub ffn: AdapterParams,
}

/// Frozen pre-norm transformer block weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrozenBlock {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub ffn1_w: ParamId,
    pub ffn1_b: ParamId,
    pub ffn2_w: ParamId,
    pub ffn2_b: ParamId,
}

impl FrozenBlock {
    pub fn ids(&self) -> [ParamId; 12] {
        [
            self.ln1_g, self.ln1_b, self.qkv_w, self.qkv_b, self.proj_w, self.proj_b, self.ln2_g,
            self.ln2_b, self.ffn1_w, self.ffn1_b, self.ffn2_w, self.ffn2_b,
        ]
    }
}

/// One depth of an encoder: a single frozen block plus per-concept adapters.
#[derive(Debug, Clone)]
pub struct ConceptBlock {
    frozen: Arc<FrozenBlock>,
    adapters: [Option<SiteAdapters>; 3],
}

impl ConceptBlock {
    /// The frozen weights used by `concept`. The same instance is returned
    /// for every concept.
    pub fn frozen_for(&self, _concept: ConceptKind) -> &Arc<FrozenBlock> {
        &self.frozen
    }

    pub fn frozen(&self) -> &FrozenBlock {
        &self.frozen
    }

    pub fn adapters(&self, concept: ConceptKind) -> Option<&SiteAdapters> {
        self.adapters[concept.index()].as_ref()
    }

    pub fn require_adapters(&self, concept: ConceptKind) -> Result<&SiteAdapters> {
        self.adapters(concept)
            .ok_or_else(|| Error::Contract(format!("block has no {concept} adapters")))
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Uniform(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Backbone,
    Adapter,
    Prompt,
}

/// Every tensor of the model, addressed by name through a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: EncoderConfig,
    pub vocab: VocabSpec,
    pub tokens: TokenVocab,
    pub store: ParamStore,
    pub vision: Vec<ConceptBlock>,
    pub text: Vec<ConceptBlock>,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub vision_cls: ParamId,
    pub vision_pos: ParamId,
    pub vision_ln_g: ParamId,
    pub vision_ln_b: ParamId,
    /// Token table; row 0 (`[CLS]`) doubles as the text `[CLS]` embedding.
    pub token_emb: ParamId,
    pub text_pos: ParamId,
    pub text_ln_g: ParamId,
    pub text_ln_b: ParamId,
    pub class_attr: ParamId,
    pub class_obj: ParamId,
}

type Builder<'a> = dyn FnMut(String, Vec<usize>, Init) -> Result<ParamId> + 'a;

fn build_block(cfg: &EncoderConfig, prefix: &str, b: &mut Builder) -> Result<FrozenBlock> {
    let d = cfg.d;
    let std_in = 1.0 / (d as f64).sqrt();
    let depth = cfg.n_vision.max(cfg.n_text) as f64;
    let std_out = std_in / (2.0 * depth).sqrt();
    let mut p = |n: &str, shape: Vec<usize>, init| b(format!("{prefix}.{n}"), shape, init);
    Ok(FrozenBlock {
        ln1_g: p("ln1.g", vec![d], Init::Ones)?,
        ln1_b: p("ln1.b", vec![d], Init::Zeros)?,
        qkv_w: p("qkv.w", vec![d, 3 * d], Init::Normal(std_in))?,
        qkv_b: p("qkv.b", vec![3 * d], Init::Zeros)?,
        proj_w: p("proj.w", vec![d, d], Init::Normal(std_out))?,
        proj_b: p("proj.b", vec![d], Init::Zeros)?,
        ln2_g: p("ln2.g", vec![d], Init::Ones)?,
        ln2_b: p("ln2.b", vec![d], Init::Zeros)?,
        ffn1_w: p("ffn1.w", vec![d, 4 * d], Init::Normal(std_in))?,
        ffn1_b: p("ffn1.b", vec![4 * d], Init::Zeros)?,
        ffn2_w: p("ffn2.w", vec![4 * d, d], Init::Normal(std_out / 2.0))?,
        ffn2_b: p("ffn2.b", vec![d], Init::Zeros)?,
    })
}

fn build_adapter(cfg: &EncoderConfig, prefix: &str, b: &mut Builder) -> Result<AdapterParams> {
    let (d, r) = (cfg.d, cfg.bottleneck());
    let bound = 1.0 / (d as f64).sqrt();
    Ok(AdapterParams {
        down_w: b(format!("{prefix}.down.w"), vec![d, r], Init::Uniform(bound))?,
        down_b: b(format!("{prefix}.down.b"), vec![r], Init::Zeros)?,
        up_w: b(format!("{prefix}.up.w"), vec![r, d], Init::Zeros)?,
        up_b: b(format!("{prefix}.up.b"), vec![d], Init::Zeros)?,
    })
}

fn build_sites(cfg: &EncoderConfig, prefix: &str, b: &mut Builder) -> Result<SiteAdapters> {
    Ok(SiteAdapters {
        attn: build_adapter(cfg, &format!("{prefix}.attn"), b)?,
        ffn: build_adapter(cfg, &format!("{prefix}.ffn"), b)?,
    })
}

/// Concepts that carry adapters at vision depth `i`.
fn vision_concepts(cfg: &EncoderConfig, i: usize) -> &'static [ConceptKind] {
    use ConceptKind::*;
    let ab = cfg.ablation;
    if !ab.vision_adapters {
        &[]
    } else if ab.vision_moa && i < cfg.stage1_depth() {
        &[Attribute, Object]
    } else {
        &[Attribute, Object, Composition]
    }
}

fn text_concepts(cfg: &EncoderConfig) -> &'static [ConceptKind] {
    if cfg.ablation.text_adapters {
        &ConceptKind::ALL
    } else {
        &[]
    }
}

fn build_encoder(
    cfg: &EncoderConfig,
    side: &str,
    depth: usize,
    concepts: impl Fn(usize) -> &'static [ConceptKind],
    b: &mut Builder,
) -> Result<Vec<ConceptBlock>> {
    let mut blocks = Vec::with_capacity(depth);
    for i in 0..depth {
        let frozen = Arc::new(build_block(cfg, &format!("{side}.block{i}"), b)?);
        let mut adapters = [None; 3];
        for &c in concepts(i) {
            let prefix = format!("{ADAPTER_PREFIX}{side}.block{i}.{}", c.tag());
            adapters[c.index()] = Some(build_sites(cfg, &prefix, b)?);
        }
        blocks.push(ConceptBlock { frozen, adapters });
    }
    Ok(blocks)
}

impl ModelParams {
    fn build(config: EncoderConfig, vocab: VocabSpec, b: &mut Builder) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let d = cfg.d;
        let tokens = TokenVocab::new(&vocab);
        let patch_in = cfg.patch * cfg.patch * 3;
        let emb = Init::Normal(0.02);
        let patch_w = b("vision.patch.w".into(), vec![patch_in, d], Init::Normal(1.0 / (patch_in as f64).sqrt()))?;
        let patch_b = b("vision.patch.b".into(), vec![d], Init::Zeros)?;
        let vision_cls = b("vision.cls".into(), vec![1, d], emb)?;
        let vision_pos = b("vision.pos".into(), vec![cfg.vision_tokens(), d], emb)?;
        let vision = build_encoder(cfg, "vision", cfg.n_vision, |i| vision_concepts(cfg, i), b)?;
        let vision_ln_g = b("vision.ln_post.g".into(), vec![d], Init::Ones)?;
        let vision_ln_b = b("vision.ln_post.b".into(), vec![d], Init::Zeros)?;
        let token_emb = b("text.token".into(), vec![tokens.len(), d], emb)?;
        let text_pos = b("text.pos".into(), vec![cfg.max_text_len, d], emb)?;
        let text = build_encoder(cfg, "text", cfg.n_text, |_| text_concepts(cfg), b)?;
        let text_ln_g = b("text.ln_post.g".into(), vec![d], Init::Ones)?;
        let text_ln_b = b("text.ln_post.b".into(), vec![d], Init::Zeros)?;
        let class_attr = b(format!("{PROMPT_PREFIX}attr"), vec![vocab.n_attrs(), d], emb)?;
        let class_obj = b(format!("{PROMPT_PREFIX}obj"), vec![vocab.n_objs(), d], emb)?;
        Ok(ModelParams {
            config,
            vocab,
            tokens,
            store: ParamStore::new(),
            vision,
            text,
            patch_w,
            patch_b,
            vision_cls,
            vision_pos,
            vision_ln_g,
            vision_ln_b,
            token_emb,
            text_pos,
            text_ln_g,
            text_ln_b,
            class_attr,
            class_obj,
        })
    }

    /// Random backbone and embeddings, zero up-projections. Adapters and
    /// class prompts are trainable; the backbone is frozen.
    pub fn init(config: EncoderConfig, vocab: VocabSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut params = Self::build(config, vocab, &mut |name, shape, init| {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).map_err(|e| Error::Parameter(e.to_string()))?;
                    (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
                }
                Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b) as f32).collect(),
            };
            store.add(name, Tensor::new(shape, data)?)
        })?;
        params.store = store;
        params.freeze_backbone();
        Ok(params)
    }

    /// Rebinds a model to tensors loaded by name, checking every shape.
    /// Trainability flags follow the adapter phase.
    pub fn from_store(config: EncoderConfig, vocab: VocabSpec, store: ParamStore) -> Result<Self> {
        let mut expected = Vec::new();
        let mut params = Self::build(config, vocab, &mut |name, shape, _| {
            let id = store
                .id(&name)
                .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
            if store.get(id).shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    store.get(id).shape()
                )));
            }
            expected.push(id);
            Ok(id)
        })?;
        if expected.len() != store.len() {
            let extra: Vec<&str> = store
                .ids()
                .filter(|id| !expected.contains(id))
                .map(|id| store.name(id))
                .collect();
            return Err(Error::Format(format!("unexpected tensors {extra:?}")));
        }
        params.store = store;
        params.freeze_backbone();
        Ok(params)
    }

    /// Same backbone and class prompts under another ablation, with freshly
    /// initialized adapters and the backbone frozen.
    pub fn with_ablation(&self, ablation: Ablation, seed: u64) -> Result<Self> {
        let config = EncoderConfig {
            ablation,
            ..self.config.clone()
        };
        let mut out = ModelParams::init(config, self.vocab.clone(), seed)?;
        let shared: Vec<(ParamId, String)> = out
            .store
            .iter()
            .filter(|(_, n, _)| Self::role(n) != Role::Adapter)
            .map(|(id, n, _)| (id, n.to_string()))
            .collect();
        for (id, name) in shared {
            let src = self
                .store
                .by_name(&name)
                .ok_or_else(|| Error::Contract(format!("`{name}` missing from the source parameters")))?;
            out.store.get_mut(id).data_mut().copy_from_slice(src.data());
        }
        Ok(out)
    }

    fn role(name: &str) -> Role {
        if name.starts_with(ADAPTER_PREFIX) {
            Role::Adapter
        } else if name.starts_with(PROMPT_PREFIX) {
            Role::Prompt
        } else {
            Role::Backbone
        }
    }

    fn ids_with(&self, role: Role) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, name, _)| Self::role(name) == role)
            .map(|(id, _, _)| id)
            .collect()
    }

    pub fn backbone_ids(&self) -> Vec<ParamId> {
        self.ids_with(Role::Backbone)
    }

    pub fn adapter_ids(&self) -> Vec<ParamId> {
        self.ids_with(Role::Adapter)
    }

    pub fn prompt_ids(&self) -> Vec<ParamId> {
        self.ids_with(Role::Prompt)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, _, t)| t.requires_grad())
            .map(|(id, _, _)| id)
            .collect()
    }

    fn set_roles(&mut self, trainable: &[Role]) {
        let ids: Vec<(ParamId, Role)> = self
            .store
            .iter()
            .map(|(id, name, _)| (id, Self::role(name)))
            .collect();
        for (id, role) in ids {
            self.store.get_mut(id).set_requires_grad(trainable.contains(&role));
        }
    }

    /// Backbone and prompts trainable, adapters frozen.
    pub fn pretraining_phase(&mut self) {
        self.set_roles(&[Role::Backbone, Role::Prompt]);
    }

    /// Backbone frozen, adapters and prompts trainable.
    pub fn freeze_backbone(&mut self) {
        self.set_roles(&[Role::Adapter, Role::Prompt]);
    }

    /// Draws every adapter tensor (including up-projections and biases)
    /// from `U(-scale, scale)`.
    pub fn randomize_adapters(&mut self, seed: u64, scale: f32) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in self.adapter_ids() {
            for v in self.store.get_mut(id).data_mut() {
                *v = rng.random_range(-scale..=scale);
            }
        }
    }

    /// Copies one concept's adapter values onto the other concepts wherever
    /// they coexist.
    pub fn tie_adapters_to(&mut self, source: ConceptKind) {
        let blocks: Vec<ConceptBlock> = self.vision.iter().chain(&self.text).cloned().collect();
        for block in blocks {
            let Some(src) = block.adapters(source).copied() else { continue };
            for c in ConceptKind::ALL {
                let Some(dst) = block.adapters(c).copied() else { continue };
                for (s, d) in [src.attn, src.ffn].iter().zip([dst.attn, dst.ffn]) {
                    for (si, di) in s.ids().into_iter().zip(d.ids()) {
                        if si != di {
                            let vals = self.store.get(si).data().to_vec();
                            self.store.get_mut(di).data_mut().copy_from_slice(&vals);
                        }
                    }
                }
            }
        }
    }

    /// Sets every adapter up-projection to zero.
    pub fn zero_up_projections(&mut self) {
        let ids: Vec<ParamId> = self
            .store
            .iter()
            .filter(|(_, n, _)| n.starts_with(ADAPTER_PREFIX) && n.contains(".up."))
            .map(|(id, _, _)| id)
            .collect();
        for id in ids {
            self.store.get_mut(id).data_mut().fill(0.0);
        }
    }
}
