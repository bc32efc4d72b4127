//! Flat `key = value` run configuration.
//!
//! Files hold one `key = value` per line; `#` starts a comment. Keys are
//! dotted (`encoder.heads`, `loss.lambda2`, ...); unknown keys are rejected.
//! Command-line `--set key=value` overrides are applied after the file.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::analysis::QmapSource;
use crate::data::{Family, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

/// Settings of the diagnostic subcommands.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisConfig {
    /// Patches averaged per image for prediction, flip reports and retrieval.
    pub n_patches: usize,
    /// Neighbors returned by retrieval.
    pub k: usize,
    pub qmap_source: QmapSource,
    pub seed: u64,
    /// Seeds trained per configuration by `ablate`.
    pub ablation_seeds: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            n_patches: 50,
            k: 3,
            qmap_source: QmapSource::Encoder,
            seed: 0,
            ablation_seeds: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SyntheticSpec,
    pub split_ratio: f64,
    pub split_seed: u64,
    pub analysis: AnalysisConfig,
    pub workers: usize,
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get()).min(8)
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::paper(),
            synth: SyntheticSpec::default(),
            split_ratio: 0.8,
            split_seed: 0,
            analysis: AnalysisConfig::default(),
            workers: default_workers(),
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("backbone.channels", "channels of the four CNN scales, comma separated"),
    ("backbone.units_per_block", "residual units after each strided block entry"),
    ("backbone.feature_dropout", "dropout rate on the fused multi-scale features"),
    ("backbone.entry_kernel", "kernel size of the strided block-entry convolutions"),
    ("backbone.pool_kernel", "Hamming window size of the L2 pooling (odd)"),
    ("backbone.euclid_eps", "floor of the per-sample norm in feature normalization"),
    ("model.seed", "weight initialization seed"),
    ("model.transformer", "use the attention branch (true/false)"),
    ("encoder.n_layers", "number of encoder layers"),
    ("encoder.width", "token width d"),
    ("encoder.heads", "attention heads h (must divide width)"),
    ("encoder.ffn_dim", "hidden width of the feed-forward block"),
    ("encoder.pe_temperature", "temperature of the sine positional encoding"),
    ("encoder.positional_encoding", "add positional encoding to queries and keys (true/false)"),
    ("loss.lambda1", "weight of the ranking difference inside self-consistency"),
    ("loss.lambda2", "weight of the relative ranking loss"),
    ("loss.lambda3", "weight of the self-consistency loss"),
    ("loss.norm", "distance of the quality and consistency terms: l1 or l2"),
    ("loss.consistency_on", "compare branch logits (scalar) or pooled features (vector)"),
    ("train.epochs", "number of epochs"),
    ("train.batch_size", "patches per step"),
    ("train.lr", "initial learning rate"),
    ("train.lr_decay_factor", "learning rate divisor applied after every epoch"),
    ("train.weight_decay", "L2 weight decay added to gradients"),
    ("train.adam_beta1", "Adam first-moment decay"),
    ("train.adam_beta2", "Adam second-moment decay"),
    ("train.adam_eps", "Adam denominator epsilon"),
    ("train.consistency_transform", "hflip, vflip, rot90, translate, random_crop or hflip_translate"),
    ("train.consistency_warmup", "epochs over which loss.lambda3 ramps up from 0"),
    ("train.hflip_prob", "probability of a horizontal flip augmentation per patch"),
    ("train.vflip_prob", "probability of a vertical flip augmentation per patch"),
    ("train.seed", "seed of batch sampling, augmentation and dropout"),
    ("train.patches_per_image", "training patches drawn from each image per epoch"),
    ("train.patch_size", "patch side in pixels (multiple of 16)"),
    ("train.eval_patches", "patches averaged per image during validation"),
    ("train.eval_every", "validate every N steps; 0 = after each epoch"),
    ("train.max_steps", "stop after N steps; 0 = no limit"),
    ("train.split_ratio", "fraction of reference ids in the training split"),
    ("train.split_seed", "seed of the reference-disjoint split"),
    ("synth.n_refs", "number of pristine reference images"),
    ("synth.height", "image height (multiple of 16)"),
    ("synth.width", "image width (multiple of 16)"),
    ("synth.families", "comma separated: gaussian_blur, white_noise, quantize_blocks, contrast_shift"),
    ("synth.levels", "severity levels per family (>= 2)"),
    ("synth.seed", "generator seed"),
    ("synth.score_low", "lower end of the score range"),
    ("synth.score_high", "upper end of the score range (pristine score)"),
    ("analysis.n_patches", "patches averaged per image at inference"),
    ("analysis.k", "neighbors returned by retrieve"),
    ("analysis.qmap_source", "quality map layer: encoder or cnn"),
    ("analysis.seed", "patch sampling seed at inference"),
    ("analysis.ablation_seeds", "training seeds per ablation row"),
    ("workers", "worker threads (default: available cores, at most 8)"),
];

/// Keys that never influence results and are left out of checkpoints.
pub const NON_SEMANTIC_KEYS: &[&str] = &["workers"];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn unknown(key: &str) -> Error {
    Error::Config(format!("unknown key {key:?} (see --help for the accepted keys)"))
}

impl RunConfig {
    /// Paper-scale defaults.
    pub fn paper() -> Self {
        Self::default()
    }

    /// Desk-scale defaults for the synthetic dataset.
    pub fn toy() -> Self {
        let mut c = Self::default();
        c.train = TrainConfig::toy();
        c.analysis.n_patches = 1;
        c
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let m = &self.model;
        let (b, e, t, s) = (&m.backbone, &m.encoder, &self.train, &self.synth);
        Ok(match key {
            "backbone.channels" => join(&b.channels),
            "backbone.units_per_block" => b.units_per_block.to_string(),
            "backbone.feature_dropout" => b.feature_dropout.to_string(),
            "backbone.entry_kernel" => b.entry_kernel.to_string(),
            "backbone.pool_kernel" => b.pool_kernel.to_string(),
            "backbone.euclid_eps" => b.euclid_eps.to_string(),
            "model.seed" => b.seed.to_string(),
            "model.transformer" => m.use_transformer.to_string(),
            "encoder.n_layers" => e.n_layers.to_string(),
            "encoder.width" => e.width.to_string(),
            "encoder.heads" => e.heads.to_string(),
            "encoder.ffn_dim" => e.ffn_dim.to_string(),
            "encoder.pe_temperature" => e.pe_temperature.to_string(),
            "encoder.positional_encoding" => e.positional_encoding.to_string(),
            "loss.lambda1" => t.loss.lambda1.to_string(),
            "loss.lambda2" => t.loss.lambda2.to_string(),
            "loss.lambda3" => t.loss.lambda3.to_string(),
            "loss.norm" => t.loss_norm.to_string(),
            "loss.consistency_on" => t.consistency_on.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.lr" => t.lr.to_string(),
            "train.lr_decay_factor" => t.lr_decay_factor.to_string(),
            "train.weight_decay" => t.adam.weight_decay.to_string(),
            "train.adam_beta1" => t.adam.beta1.to_string(),
            "train.adam_beta2" => t.adam.beta2.to_string(),
            "train.adam_eps" => t.adam.eps.to_string(),
            "train.consistency_transform" => t.consistency_transform.to_string(),
            "train.hflip_prob" => t.augment.hflip.to_string(),
            "train.vflip_prob" => t.augment.vflip.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.patches_per_image" => t.patches_per_image.to_string(),
            "train.patch_size" => t.patch_size.to_string(),
            "train.eval_patches" => t.eval_patches.to_string(),
            "train.eval_every" => t.eval_every.to_string(),
            "train.max_steps" => t.max_steps.to_string(),
            "train.consistency_warmup" => t.consistency_warmup.to_string(),
            "train.split_ratio" => self.split_ratio.to_string(),
            "train.split_seed" => self.split_seed.to_string(),
            "synth.n_refs" => s.n_refs.to_string(),
            "synth.height" => s.height.to_string(),
            "synth.width" => s.width.to_string(),
            "synth.families" => join(&s.families),
            "synth.levels" => s.levels.to_string(),
            "synth.seed" => s.seed.to_string(),
            "synth.score_low" => s.score_range.0.to_string(),
            "synth.score_high" => s.score_range.1.to_string(),
            "analysis.n_patches" => self.analysis.n_patches.to_string(),
            "analysis.k" => self.analysis.k.to_string(),
            "analysis.qmap_source" => self.analysis.qmap_source.to_string(),
            "analysis.seed" => self.analysis.seed.to_string(),
            "analysis.ablation_seeds" => self.analysis.ablation_seeds.to_string(),
            "workers" => self.workers.to_string(),
            _ => return Err(unknown(key)),
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let (b, e, t, s) = (&mut m.backbone, &mut m.encoder, &mut self.train, &mut self.synth);
        match key {
            "backbone.channels" => {
                let parts: Vec<usize> = v
                    .split(',')
                    .map(|p| parse(key, p.trim()))
                    .collect::<Result<_>>()?;
                b.channels = parts.try_into().map_err(|p: Vec<usize>| {
                    Error::Config(format!("{key}: expected 4 values, got {}", p.len()))
                })?;
            }
            "backbone.units_per_block" => b.units_per_block = parse(key, v)?,
            "backbone.feature_dropout" => b.feature_dropout = parse(key, v)?,
            "backbone.entry_kernel" => b.entry_kernel = parse(key, v)?,
            "backbone.pool_kernel" => b.pool_kernel = parse(key, v)?,
            "backbone.euclid_eps" => b.euclid_eps = parse(key, v)?,
            "model.seed" => b.seed = parse(key, v)?,
            "model.transformer" => m.use_transformer = parse_bool(key, v)?,
            "encoder.n_layers" => e.n_layers = parse(key, v)?,
            "encoder.width" => e.width = parse(key, v)?,
            "encoder.heads" => e.heads = parse(key, v)?,
            "encoder.ffn_dim" => e.ffn_dim = parse(key, v)?,
            "encoder.pe_temperature" => e.pe_temperature = parse(key, v)?,
            "encoder.positional_encoding" => e.positional_encoding = parse_bool(key, v)?,
            "loss.lambda1" => t.loss.lambda1 = parse(key, v)?,
            "loss.lambda2" => t.loss.lambda2 = parse(key, v)?,
            "loss.lambda3" => t.loss.lambda3 = parse(key, v)?,
            "loss.norm" => t.loss_norm = v.parse()?,
            "loss.consistency_on" => t.consistency_on = v.parse()?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.lr_decay_factor" => t.lr_decay_factor = parse(key, v)?,
            "train.weight_decay" => t.adam.weight_decay = parse(key, v)?,
            "train.adam_beta1" => t.adam.beta1 = parse(key, v)?,
            "train.adam_beta2" => t.adam.beta2 = parse(key, v)?,
            "train.adam_eps" => t.adam.eps = parse(key, v)?,
            "train.consistency_transform" => t.consistency_transform = v.parse()?,
            "train.hflip_prob" => t.augment.hflip = parse(key, v)?,
            "train.vflip_prob" => t.augment.vflip = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.patches_per_image" => t.patches_per_image = parse(key, v)?,
            "train.patch_size" => t.patch_size = parse(key, v)?,
            "train.eval_patches" => t.eval_patches = parse(key, v)?,
            "train.eval_every" => t.eval_every = parse(key, v)?,
            "train.max_steps" => t.max_steps = parse(key, v)?,
            "train.consistency_warmup" => t.consistency_warmup = parse(key, v)?,
            "train.split_ratio" => self.split_ratio = parse(key, v)?,
            "train.split_seed" => self.split_seed = parse(key, v)?,
            "synth.n_refs" => s.n_refs = parse(key, v)?,
            "synth.height" => s.height = parse(key, v)?,
            "synth.width" => s.width = parse(key, v)?,
            "synth.families" => {
                s.families = v
                    .split(',')
                    .map(|f| f.trim().parse::<Family>())
                    .collect::<Result<_>>()?;
            }
            "synth.levels" => s.levels = parse(key, v)?,
            "synth.seed" => s.seed = parse(key, v)?,
            "synth.score_low" => s.score_range.0 = parse(key, v)?,
            "synth.score_high" => s.score_range.1 = parse(key, v)?,
            "analysis.n_patches" => self.analysis.n_patches = parse(key, v)?,
            "analysis.k" => self.analysis.k = parse(key, v)?,
            "analysis.qmap_source" => self.analysis.qmap_source = v.parse()?,
            "analysis.seed" => self.analysis.seed = parse(key, v)?,
            "analysis.ablation_seeds" => self.analysis.ablation_seeds = parse(key, v)?,
            "workers" => {
                let w: usize = parse(key, v)?;
                if w == 0 {
                    return Err(Error::Config("workers must be positive".into()));
                }
                self.workers = w;
            }
            _ => return Err(unknown(key)),
        }
        Ok(())
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// All keys with their resolved values, in schema order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        KEYS.iter()
            .map(|(k, _)| (k.to_string(), self.get(k).expect("schema keys are known")))
            .collect()
    }

    /// Pairs that can change results (everything but worker counts).
    pub fn semantic_pairs(&self) -> Vec<(String, String)> {
        self.pairs()
            .into_iter()
            .filter(|(k, _)| !NON_SEMANTIC_KEYS.contains(&k.as_str()))
            .collect()
    }

    /// `key = value` text that [`RunConfig::apply_text`] reads back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.backbone.validate()?;
        self.model.encoder.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!(
                "train.split_ratio must be in (0, 1), got {}",
                self.split_ratio
            )));
        }
        if self.analysis.n_patches == 0 || self.analysis.k == 0 || self.analysis.ablation_seeds == 0 {
            return Err(Error::Config("analysis counts must be positive".into()));
        }
        Ok(())
    }
}

/// Model configuration from `key = value` pairs (keys outside `backbone.`,
/// `encoder.` and `model.` are ignored).
pub fn model_config_from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<ModelConfig> {
    let mut c = RunConfig::default();
    for (k, v) in pairs {
        if is_model_key(k) {
            c.set(k, v)?;
        }
    }
    Ok(c.model)
}

pub fn is_model_key(key: &str) -> bool {
    key.starts_with("backbone.") || key.starts_with("encoder.") || key.starts_with("model.")
}

/// Model keys and values of `model`.
pub fn model_pairs(model: &ModelConfig) -> Vec<(String, String)> {
    let c = RunConfig {
        model: model.clone(),
        ..RunConfig::default()
    };
    c.pairs().into_iter().filter(|(k, _)| is_model_key(k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips() {
        let c = RunConfig::toy();
        for (k, _) in KEYS {
            let mut d = RunConfig::default();
            d.set(k, &c.get(k).unwrap()).unwrap();
            assert_eq!(d.get(k).unwrap(), c.get(k).unwrap(), "{k}");
        }
        let mut d = RunConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(d, c);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let mut c = RunConfig::default();
        assert!(c.set("train.learning_rate", "1").is_err());
        let err = c.apply_text("# ok\ntrain.epochs = 3\n\nbogus\n").unwrap_err();
        assert!(err.to_string().contains("line 4"), "{err}");
        assert!(c.set("backbone.channels", "1,2,3").is_err());
        assert!(c.set("model.transformer", "maybe").is_err());
    }

    #[test]
    fn comments_and_overrides() {
        let mut c = RunConfig::default();
        c.apply_text("loss.lambda2 = 0.1  # stronger ranking\n").unwrap();
        assert_eq!(c.train.loss.lambda2, 0.1);
        c.apply_overrides(&["loss.lambda2=0"]).unwrap();
        assert_eq!(c.train.loss.lambda2, 0.0);
    }

    #[test]
    fn defaults_echo_loss_weights() {
        let c = RunConfig::default();
        let p = c.pairs();
        let get = |k: &str| p.iter().find(|(kk, _)| kk == k).unwrap().1.clone();
        assert_eq!(get("loss.lambda1"), "0.5");
        assert_eq!(get("loss.lambda2"), "0.05");
        assert_eq!(get("loss.lambda3"), "1");
    }
}
