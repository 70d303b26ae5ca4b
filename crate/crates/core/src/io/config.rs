use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::autodiff::Activation;
use crate::data::World;
use crate::error::{Error, Result};
use crate::model::EncoderConfig;
use crate::train::TrainConfig;

/// Everything a run needs besides its command-line paths. Parsed from flat
/// `key = value` lines; `#` starts a comment.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub world: World,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            data: None,
            world: World::Closed,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value `{value}` for `{key}`"))
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("invalid value `{value}` for `{key}` (expected true or false)")),
    }
}

impl RunConfig {
    /// Every recognised key.
    pub const KEYS: &'static [&'static str] = &[
        "d",
        "heads",
        "n_vision",
        "n_text",
        "moa_layers",
        "reduction",
        "patch",
        "image_hw",
        "max_text_len",
        "activation",
        "ln_eps",
        "vision_adapters",
        "text_adapters",
        "vision_moa",
        "text_moa",
        "lr",
        "weight_decay",
        "decoupled_weight_decay",
        "tau_c",
        "tau_a",
        "tau_o",
        "batch",
        "epochs",
        "shift_ratio",
        "stage0_epochs",
        "stage0_lr",
        "seed",
        "data",
        "world",
    ];

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let e = &mut self.encoder;
        let t = &mut self.train;
        match key {
            "d" => e.d = parse_value(key, value)?,
            "heads" => e.heads = parse_value(key, value)?,
            "n_vision" => e.n_vision = parse_value(key, value)?,
            "n_text" => e.n_text = parse_value(key, value)?,
            "moa_layers" => e.moa_layers = parse_value(key, value)?,
            "reduction" => e.reduction = parse_value(key, value)?,
            "patch" => e.patch = parse_value(key, value)?,
            "image_hw" => e.image_hw = parse_value(key, value)?,
            "max_text_len" => e.max_text_len = parse_value(key, value)?,
            "activation" => {
                e.activation = match value {
                    "gelu" => Activation::Gelu,
                    "relu" => Activation::Relu,
                    _ => return Err(format!("invalid value `{value}` for `activation` (expected gelu or relu)")),
                }
            }
            "ln_eps" => e.ln_eps = parse_value(key, value)?,
            "vision_adapters" => e.ablation.vision_adapters = parse_bool(key, value)?,
            "text_adapters" => e.ablation.text_adapters = parse_bool(key, value)?,
            "vision_moa" => e.ablation.vision_moa = parse_bool(key, value)?,
            "text_moa" => e.ablation.text_moa = parse_bool(key, value)?,
            "lr" => t.lr = parse_value(key, value)?,
            "weight_decay" => t.weight_decay = parse_value(key, value)?,
            "decoupled_weight_decay" => t.decoupled_weight_decay = parse_bool(key, value)?,
            "tau_c" => t.tau_c = parse_value(key, value)?,
            "tau_a" => t.tau_a = parse_value(key, value)?,
            "tau_o" => t.tau_o = parse_value(key, value)?,
            "batch" => t.batch = parse_value(key, value)?,
            "epochs" => t.epochs = parse_value(key, value)?,
            "shift_ratio" => t.shift_ratio = parse_value(key, value)?,
            "stage0_epochs" => t.stage0_epochs = parse_value(key, value)?,
            "stage0_lr" => t.stage0_lr = parse_value(key, value)?,
            "seed" => t.seed = parse_value(key, value)?,
            "data" => self.data = Some(PathBuf::from(value)),
            "world" => self.world = value.parse().map_err(|e: Error| e.to_string())?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses and validates. Errors name the offending line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let n = k + 1;
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {n}: expected `key = value`, got `{}`", raw.trim())))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {n}: duplicate key `{key}`")));
            }
            cfg.set(key, value).map_err(|msg| Error::Config(format!("line {n}: {msg}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()
    }

    /// Canonical text form listing every key; parses back to `self`.
    pub fn to_text(&self) -> String {
        let e = &self.encoder;
        let t = &self.train;
        let a = e.ablation;
        let mut s = String::new();
        let act = match e.activation {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
        };
        let lines: Vec<(&str, String)> = vec![
            ("d", e.d.to_string()),
            ("heads", e.heads.to_string()),
            ("n_vision", e.n_vision.to_string()),
            ("n_text", e.n_text.to_string()),
            ("moa_layers", e.moa_layers.to_string()),
            ("reduction", e.reduction.to_string()),
            ("patch", e.patch.to_string()),
            ("image_hw", e.image_hw.to_string()),
            ("max_text_len", e.max_text_len.to_string()),
            ("activation", act.to_string()),
            ("ln_eps", e.ln_eps.to_string()),
            ("vision_adapters", a.vision_adapters.to_string()),
            ("text_adapters", a.text_adapters.to_string()),
            ("vision_moa", a.vision_moa.to_string()),
            ("text_moa", a.text_moa.to_string()),
            ("lr", t.lr.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("decoupled_weight_decay", t.decoupled_weight_decay.to_string()),
            ("tau_c", t.tau_c.to_string()),
            ("tau_a", t.tau_a.to_string()),
            ("tau_o", t.tau_o.to_string()),
            ("batch", t.batch.to_string()),
            ("epochs", t.epochs.to_string()),
            ("shift_ratio", t.shift_ratio.to_string()),
            ("stage0_epochs", t.stage0_epochs.to_string()),
            ("stage0_lr", t.stage0_lr.to_string()),
            ("seed", t.seed.to_string()),
            ("world", self.world.as_str().to_string()),
        ];
        for (k, v) in lines {
            writeln!(s, "{k} = {v}").expect("write to string");
        }
        if let Some(d) = &self.data {
            writeln!(s, "data = {}", d.display()).expect("write to string");
        }
        s
    }
}
