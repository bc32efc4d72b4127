//! Full model: backbone → (fused features → encoder) → head.

use crate::backbone::{Backbone, BackboneConfig, MultiScaleFeatures};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::Result;
use crate::head::{Head, HeadVars};
use crate::nn::{Graph, Init, ParamStore, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub encoder: EncoderConfig,
    /// Without the transformer only the convolutional branch scores images.
    pub use_transformer: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            encoder: EncoderConfig::default(),
            use_transformer: true,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration for gradient checks on 16×16 inputs.
    pub fn tiny() -> Self {
        Self {
            backbone: BackboneConfig {
                channels: [2, 3, 4, 4],
                units_per_block: 1,
                feature_dropout: 0.0,
                pool_kernel: 3,
                ..BackboneConfig::default()
            },
            encoder: EncoderConfig {
                n_layers: 1,
                width: 8,
                heads: 2,
                ffn_dim: 16,
                ..EncoderConfig::default()
            },
            use_transformer: true,
        }
    }

    pub fn latent_len(&self) -> usize {
        self.backbone.channels[3] + if self.use_transformer { self.encoder.width } else { 0 }
    }
}

/// Affine map between subjective scores and the unit range the network is
/// trained on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreScale {
    pub low: f64,
    pub high: f64,
}

impl Default for ScoreScale {
    fn default() -> Self {
        Self { low: 0.0, high: 1.0 }
    }
}

impl ScoreScale {
    pub fn new(low: f64, high: f64) -> Self {
        Self { low, high }
    }

    fn span(&self) -> f64 {
        if self.high > self.low {
            self.high - self.low
        } else {
            1.0
        }
    }

    pub fn to_unit(&self, score: f64) -> f64 {
        (score - self.low) / self.span()
    }

    pub fn from_unit(&self, q: f64) -> f64 {
        self.low + q * self.span()
    }
}

/// Per-sample outputs of one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub q: Vec<f64>,
    pub conv_logit: Vec<f64>,
    /// All zeros when the model has no attention branch.
    pub atten_logit: Vec<f64>,
    pub latent: Vec<Vec<f64>>,
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub head: HeadVars,
    pub features: MultiScaleFeatures,
    pub fused: Option<Var>,
    pub encoded: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    config: ModelConfig,
    pub store: ParamStore<T>,
    /// Maps network outputs back to subjective scores.
    pub score_scale: ScoreScale,
    backbone: Backbone,
    encoder: Option<Encoder>,
    head: Head,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut init = Init::new(config.backbone.seed);
        let backbone = Backbone::new(&mut store, &mut init, &config.backbone)?;
        let encoder = if config.use_transformer {
            Some(Encoder::new(
                &mut store,
                &mut init,
                config.backbone.fused_channels(),
                &config.encoder,
            )?)
        } else {
            None
        };
        let head = Head::new(
            &mut store,
            &mut init,
            config.backbone.channels[3],
            config.use_transformer.then_some(config.encoder.width),
        );
        Ok(Self {
            config: config.clone(),
            store,
            score_scale: ScoreScale::default(),
            backbone,
            encoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn encoder(&self) -> Option<&Encoder> {
        self.encoder.as_ref()
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            score_scale: self.score_scale,
            backbone: self.backbone.clone(),
            encoder: self.encoder.clone(),
            head: self.head.clone(),
        }
    }

    /// Records a forward pass of `(b, 3, H, W)` images.
    pub fn forward(&self, g: &mut Graph<T>, images: Var) -> Result<ForwardVars> {
        let features = self.backbone.forward(g, &self.store, images)?;
        let (fused, encoded) = match &self.encoder {
            Some(enc) => {
                let fused = self.backbone.rescale_and_concat(g, &features)?;
                let encoded = enc.forward(g, &self.store, fused)?;
                (Some(fused), Some(encoded))
            }
            None => (None, None),
        };
        let head = self.head.forward(g, &self.store, features.f[3], encoded)?;
        Ok(ForwardVars {
            head,
            features,
            fused,
            encoded,
        })
    }

    /// Evaluation-mode forward without gradient bookkeeping.
    pub fn predict(&self, images: &Tensor<T>) -> Result<ModelOutput> {
        let mut g = Graph::inference();
        let x = g.constant(images.clone());
        let vars = self.forward(&mut g, x)?;
        Ok(collect_output(&g, &vars.head))
    }

    /// Encoder output `(b, d, m, n)` (or the last CNN scale when `from_cnn`)
    /// for spatial quality maps.
    pub fn activation_grid(&self, images: &Tensor<T>, from_cnn: bool) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let x = g.constant(images.clone());
        let vars = self.forward(&mut g, x)?;
        let v = match (from_cnn, vars.encoded) {
            (false, Some(e)) => e,
            _ => vars.features.f[3],
        };
        Ok(g.value(v).clone())
    }
}

pub fn collect_output<T: Scalar>(g: &Graph<T>, head: &HeadVars) -> ModelOutput {
    let to_vec = |v: Var| g.value(v).data().iter().map(|x| x.f64()).collect::<Vec<_>>();
    let q = to_vec(head.q);
    let atten_logit = head.atten_logit.map(to_vec).unwrap_or_else(|| vec![0.0; q.len()]);
    let latent_t = g.value(head.latent);
    let width = latent_t.shape()[1];
    let latent = latent_t
        .data()
        .chunks(width)
        .map(|r| r.iter().map(|x| x.f64()).collect())
        .collect();
    ModelOutput {
        conv_logit: to_vec(head.conv_logit),
        atten_logit,
        latent,
        q,
    }
}

const PARAM_JITTER: f64 = 0.1;

/// Central-difference check of every trainable parameter of a fresh 64-bit
/// model, jittered to a random point, on `batch` random `side × side` images.
/// The objective is a fixed random weighting of the per-image scores. Returns the worst relative error
/// per parameter, probing at most `max_entries` entries of each.
pub fn model_grad_check(
    config: &ModelConfig,
    batch: usize,
    side: usize,
    seed: u64,
    max_entries: usize,
) -> Result<Vec<(String, f64)>> {
    let mut model = Model::<f64>::new(config)?;
    let mut init = Init::new(seed);
    // Move away from the zero-initialized output layer so every parameter
    // receives a nonzero gradient.
    for p in model.store.iter_mut().filter(|p| p.trainable) {
        let noise: Tensor<f64> = init.normal(p.value.shape(), PARAM_JITTER);
        p.value.add_assign(&noise);
    }
    let images: Tensor<f64> = init.normal(&[batch, 3, side, side], 1.0);
    let weights: Tensor<f64> = init.normal(&[batch, 1], 1.0);
    let ids: Vec<_> = model.store.iter().filter(|(_, p)| p.trainable).map(|(id, p)| (id, p.name.clone())).collect();
    let arch = model.clone();
    let objective = |g: &mut Graph<f64>, store: &ParamStore<f64>| -> Result<Var> {
        let mut m = arch.clone();
        m.store = store.clone();
        let x = g.constant(images.clone());
        let out = m.forward(g, x)?;
        let w = g.constant(weights.clone());
        let q = g.reshape(out.head.q, &[batch, 1])?;
        let p = g.mul(q, w)?;
        Ok(g.sum(p))
    };
    let mut out = Vec::with_capacity(ids.len());
    for (id, name) in ids {
        let err = crate::nn::grad_check_params(&mut model.store, &[id], objective, 1e-5, max_entries)?;
        out.push((name, err));
    }
    Ok(out)
}
