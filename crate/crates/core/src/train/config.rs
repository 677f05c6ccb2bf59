//! Training configuration and its flat `key=value` file format.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::AugmentationConfig;
use crate::error::ConfigError;
use crate::loss::LossWeights;
use crate::model::ModelConfig;
use crate::train::optim::AdamWConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_backbone: f64,
    pub lr_transformer: f64,
    pub lr_head: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Images whose gradients are summed (and averaged) per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    /// Joint gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Run validation every this many epochs (and after the last one).
    pub eval_every: usize,
    /// Capacity of the augmentation prefetch queue; 0 augments inline.
    pub prefetch: usize,
    /// Frame decision threshold used during validation.
    pub threshold: f64,
    pub augmentation: AugmentationConfig,
    pub loss: LossWeights,
}

impl TrainConfig {
    /// Learning rates and schedule length as published for fine-tuning a
    /// pretrained backbone.
    pub fn fine_tuning() -> Self {
        Self {
            epochs: 500,
            lr_backbone: 1e-6,
            lr_transformer: 1e-5,
            lr_head: 5e-5,
            ..Self::default()
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr_backbone: self.lr_backbone,
            lr_transformer: self.lr_transformer,
            lr_head: self.lr_head,
            weight_decay: self.weight_decay,
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError::Invalid(m));
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        for (name, lr) in [
            ("lr_backbone", self.lr_backbone),
            ("lr_transformer", self.lr_transformer),
            ("lr_head", self.lr_head),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return fail(format!("{name} must be positive, got {lr}"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return fail("weight_decay must be non-negative".into());
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return fail(format!("betas ({b1}, {b2}) must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return fail("eps must be positive".into());
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return fail("batch_size and eval_every must be at least 1".into());
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return fail("grad_clip must be positive".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return fail("threshold must lie in (0, 1)".into());
        }
        self.augmentation.validate().map_err(ConfigError::Invalid)?;
        Ok(())
    }
}

/// Settings for training this detector from scratch on the synthetic scenes.
impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr_backbone: 2e-4,
            lr_transformer: 2e-4,
            lr_head: 5e-4,
            weight_decay: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            batch_size: 1,
            seed: 0,
            grad_clip: None,
            eval_every: 1,
            prefetch: 0,
            threshold: 0.5,
            augmentation: AugmentationConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        }),
    }
}

fn parse_list<T: FromStr, const N: usize>(key: &str, value: &str) -> Result<[T; N], ConfigError> {
    let items: Vec<T> = value
        .split(',')
        .map(|v| parse(key, v.trim()))
        .collect::<Result<_, _>>()?;
    items.try_into().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

fn pair<T: FromStr + Copy>(key: &str, value: &str) -> Result<(T, T), ConfigError> {
    let [a, b] = parse_list::<T, 2>(key, value)?;
    Ok((a, b))
}

/// Applies one `key=value` setting. Model keys carry a `model.` prefix,
/// augmentation keys `aug.`, loss weights `loss.`.
pub fn apply_setting(
    train: &mut TrainConfig,
    model: &mut ModelConfig,
    key: &str,
    value: &str,
) -> Result<(), ConfigError> {
    let a = &mut train.augmentation;
    match key {
        "epochs" => train.epochs = parse(key, value)?,
        "lr_backbone" => train.lr_backbone = parse(key, value)?,
        "lr_transformer" => train.lr_transformer = parse(key, value)?,
        "lr_head" => train.lr_head = parse(key, value)?,
        "weight_decay" => train.weight_decay = parse(key, value)?,
        "betas" => train.betas = pair(key, value)?,
        "eps" => train.eps = parse(key, value)?,
        "batch_size" => train.batch_size = parse(key, value)?,
        "seed" => train.seed = parse(key, value)?,
        "grad_clip" => {
            let c: f64 = parse(key, value)?;
            train.grad_clip = (c > 0.0).then_some(c);
        }
        "eval_every" => train.eval_every = parse(key, value)?,
        "prefetch" => train.prefetch = parse(key, value)?,
        "threshold" => train.threshold = parse(key, value)?,
        "loss.class" => train.loss.class = parse(key, value)?,
        "loss.l1" => train.loss.l1 = parse(key, value)?,
        "loss.giou" => train.loss.giou = parse(key, value)?,
        "loss.background" => train.loss.background = parse(key, value)?,
        "aug.seed" => a.seed = parse(key, value)?,
        "aug.motion_blur" => a.motion_blur = parse_bool(key, value)?,
        "aug.motion_blur_p" => a.motion_blur_p = parse(key, value)?,
        "aug.blur_length" => a.blur_length = pair(key, value)?,
        "aug.graying" => a.graying = parse_bool(key, value)?,
        "aug.graying_p" => a.graying_p = parse(key, value)?,
        "aug.brightness_contrast" => a.brightness_contrast = parse_bool(key, value)?,
        "aug.brightness_contrast_p" => a.brightness_contrast_p = parse(key, value)?,
        "aug.brightness" => a.brightness = pair(key, value)?,
        "aug.contrast" => a.contrast = pair(key, value)?,
        "aug.color_jitter" => a.color_jitter = parse_bool(key, value)?,
        "aug.color_jitter_p" => a.color_jitter_p = parse(key, value)?,
        "aug.jitter_gain" => a.jitter_gain = pair(key, value)?,
        "aug.jitter_offset" => a.jitter_offset = pair(key, value)?,
        "aug.gamma" => a.gamma = parse_bool(key, value)?,
        "aug.gamma_p" => a.gamma_p = parse(key, value)?,
        "aug.gamma_range" => a.gamma_range = pair(key, value)?,
        "aug.normalize_mean" => a.normalization.mean = parse_list(key, value)?,
        "aug.normalize_std" => a.normalization.std = parse_list(key, value)?,
        "model.d_model" => model.d_model = parse(key, value)?,
        "model.n_heads" => model.n_heads = parse(key, value)?,
        "model.enc_layers" => model.enc_layers = parse(key, value)?,
        "model.dec_layers" => model.dec_layers = parse(key, value)?,
        "model.n_queries" => model.n_queries = parse(key, value)?,
        "model.backbone_channels" => model.backbone_channels = parse_list::<usize, 3>(key, value)?.to_vec(),
        "model.input_size" => model.input_size = parse(key, value)?,
        "model.ffn_dim" => model.ffn_dim = parse(key, value)?,
        _ => return Err(ConfigError::UnknownKey(key.to_string())),
    }
    Ok(())
}

/// Parses a config file on top of the defaults. Blank lines and lines
/// starting with `#` are ignored.
pub fn parse_config(text: &str) -> Result<(TrainConfig, ModelConfig), ConfigError> {
    let mut train = TrainConfig::default();
    let mut model = ModelConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        };
        apply_setting(&mut train, &mut model, k.trim(), v.trim())?;
    }
    train.validate()?;
    model.validate()?;
    Ok((train, model))
}

/// Writes every key understood by [`parse_config`].
pub fn write_config(train: &TrainConfig, model: &ModelConfig) -> String {
    let a = &train.augmentation;
    let list = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k}={v}");
    };
    kv("epochs", train.epochs.to_string());
    kv("lr_backbone", train.lr_backbone.to_string());
    kv("lr_transformer", train.lr_transformer.to_string());
    kv("lr_head", train.lr_head.to_string());
    kv("weight_decay", train.weight_decay.to_string());
    kv("betas", format!("{},{}", train.betas.0, train.betas.1));
    kv("eps", train.eps.to_string());
    kv("batch_size", train.batch_size.to_string());
    kv("seed", train.seed.to_string());
    kv("grad_clip", train.grad_clip.unwrap_or(0.0).to_string());
    kv("eval_every", train.eval_every.to_string());
    kv("prefetch", train.prefetch.to_string());
    kv("threshold", train.threshold.to_string());
    kv("loss.class", train.loss.class.to_string());
    kv("loss.l1", train.loss.l1.to_string());
    kv("loss.giou", train.loss.giou.to_string());
    kv("loss.background", train.loss.background.to_string());
    kv("aug.seed", a.seed.to_string());
    kv("aug.motion_blur", a.motion_blur.to_string());
    kv("aug.motion_blur_p", a.motion_blur_p.to_string());
    kv("aug.blur_length", format!("{},{}", a.blur_length.0, a.blur_length.1));
    kv("aug.graying", a.graying.to_string());
    kv("aug.graying_p", a.graying_p.to_string());
    kv("aug.brightness_contrast", a.brightness_contrast.to_string());
    kv("aug.brightness_contrast_p", a.brightness_contrast_p.to_string());
    kv("aug.brightness", format!("{},{}", a.brightness.0, a.brightness.1));
    kv("aug.contrast", format!("{},{}", a.contrast.0, a.contrast.1));
    kv("aug.color_jitter", a.color_jitter.to_string());
    kv("aug.color_jitter_p", a.color_jitter_p.to_string());
    kv("aug.jitter_gain", format!("{},{}", a.jitter_gain.0, a.jitter_gain.1));
    kv(
        "aug.jitter_offset",
        format!("{},{}", a.jitter_offset.0, a.jitter_offset.1),
    );
    kv("aug.gamma", a.gamma.to_string());
    kv("aug.gamma_p", a.gamma_p.to_string());
    kv("aug.gamma_range", format!("{},{}", a.gamma_range.0, a.gamma_range.1));
    kv("aug.normalize_mean", list(&a.normalization.mean));
    kv("aug.normalize_std", list(&a.normalization.std));
    kv("model.d_model", model.d_model.to_string());
    kv("model.n_heads", model.n_heads.to_string());
    kv("model.enc_layers", model.enc_layers.to_string());
    kv("model.dec_layers", model.dec_layers.to_string());
    kv("model.n_queries", model.n_queries.to_string());
    kv(
        "model.backbone_channels",
        model
            .backbone_channels
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(","),
    );
    kv("model.input_size", model.input_size.to_string());
    kv("model.ffn_dim", model.ffn_dim.to_string());
    s
}
