use crate::autodiff::Activation;
use crate::error::{Error, Result};

/// Which adapter components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    pub vision_adapters: bool,
    pub text_adapters: bool,
    /// Two-stage vision pipeline with ternary mixture layers. Without it the
    /// composition stream runs every depth with its own adapters.
    pub vision_moa: bool,
    /// Average attribute, object and composition text embeddings. Without it
    /// the composition embedding is used alone.
    pub text_moa: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        vision_adapters: true,
        text_adapters: true,
        vision_moa: true,
        text_moa: true,
    };

    pub const NONE: Ablation = Ablation {
        vision_adapters: false,
        text_adapters: false,
        vision_moa: false,
        text_moa: false,
    };

    /// Whether the vision composition stream uses the two-stage mixture path.
    pub fn two_stage(&self) -> bool {
        self.vision_adapters && self.vision_moa
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::FULL
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub d: usize,
    pub heads: usize,
    pub n_vision: usize,
    pub n_text: usize,
    /// Trailing vision mixture layers.
    pub moa_layers: usize,
    pub reduction: usize,
    pub patch: usize,
    pub image_hw: usize,
    pub max_text_len: usize,
    pub activation: Activation,
    pub ln_eps: f64,
    pub ablation: Ablation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d: 64,
            heads: 4,
            n_vision: 6,
            n_text: 4,
            moa_layers: 2,
            reduction: 4,
            patch: 16,
            image_hw: 64,
            max_text_len: 12,
            activation: Activation::Gelu,
            ln_eps: 1e-5,
            ablation: Ablation::FULL,
        }
    }
}

impl EncoderConfig {
    /// Tiny configuration used by gradient checks.
    pub fn micro() -> Self {
        EncoderConfig {
            d: 8,
            heads: 2,
            n_vision: 2,
            n_text: 1,
            moa_layers: 1,
            reduction: 4,
            patch: 4,
            image_hw: 8,
            max_text_len: 8,
            ..EncoderConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return fail(format!("d = {} must be a positive multiple of heads = {}", self.d, self.heads));
        }
        if self.reduction == 0 || !self.d.is_multiple_of(self.reduction) || self.d / self.reduction == 0 {
            return fail(format!("d = {} must be divisible by reduction = {}", self.d, self.reduction));
        }
        if self.n_vision == 0 || self.n_text == 0 {
            return fail("encoder depths must be positive".into());
        }
        if self.moa_layers == 0 || self.moa_layers >= self.n_vision {
            return fail(format!(
                "moa_layers = {} must satisfy 1 <= moa_layers < n_vision = {}",
                self.moa_layers, self.n_vision
            ));
        }
        if self.patch == 0 || self.image_hw == 0 || !self.image_hw.is_multiple_of(self.patch) {
            return fail(format!(
                "image_hw = {} must be divisible by patch = {}",
                self.image_hw, self.patch
            ));
        }
        if self.max_text_len < 6 {
            return fail(format!("max_text_len = {} cannot hold a composition prompt", self.max_text_len));
        }
        if !(self.ln_eps > 0.0) {
            return fail(format!("ln_eps = {} must be positive", self.ln_eps));
        }
        Ok(())
    }

    pub fn bottleneck(&self) -> usize {
        self.d / self.reduction
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_hw / self.patch
    }

    /// Vision sequence length including `[CLS]`.
    pub fn vision_tokens(&self) -> usize {
        self.patches_per_side().pow(2) + 1
    }

    /// Depths before the trailing mixture layers.
    pub fn stage1_depth(&self) -> usize {
        self.n_vision - self.moa_layers
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        EncoderConfig::default().validate().unwrap();
        EncoderConfig::micro().validate().unwrap();
        assert_eq!(EncoderConfig::default().vision_tokens(), 17);
    }

    #[test]
    fn invalid_shapes_rejected() {
        let base = EncoderConfig::default();
        for bad in [
            EncoderConfig { heads: 5, ..base.clone() },
            EncoderConfig { reduction: 3, ..base.clone() },
            EncoderConfig { moa_layers: 6, ..base.clone() },
            EncoderConfig { moa_layers: 0, ..base.clone() },
            EncoderConfig { patch: 7, ..base.clone() },
            EncoderConfig { max_text_len: 5, ..base.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }
}
