//! Residual CNN producing four feature scales, and their fusion into one
//! grid-aligned tensor (normalize, L2-pool, dropout, concatenate).

use crate::error::{Error, Result};
use crate::nn::layers::{ChannelNorm, Conv2d};
use crate::nn::{Graph, HammingKernel2D, Init, ParamStore, Var, EUCLID_EPS};
use crate::tensor::Scalar;

/// Spatial downsampling of each block's entry convolution.
pub const BLOCK_ENTRY_STRIDE: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub channels: [usize; 4],
    pub units_per_block: usize,
    pub feature_dropout: f64,
    /// Entry convolution kernel size. Odd sizes use `pad = k/2`; an even size
    /// (4) with pad 1 keeps strided sampling mirror-symmetric.
    pub entry_kernel: usize,
    /// Hamming window size of the L2 pooling used when rescaling features.
    pub pool_kernel: usize,
    pub euclid_eps: f64,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: [8, 16, 32, 64],
            units_per_block: 1,
            feature_dropout: 0.1,
            entry_kernel: 3,
            pool_kernel: 5,
            euclid_eps: EUCLID_EPS,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::Config("backbone channels must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.feature_dropout) {
            return Err(Error::Config(format!(
                "feature_dropout {} outside [0, 1)",
                self.feature_dropout
            )));
        }
        if !(2..=5).contains(&self.entry_kernel) {
            return Err(Error::Config(format!(
                "entry_kernel must be 2..=5, got {}",
                self.entry_kernel
            )));
        }
        HammingKernel2D::new(self.pool_kernel).map_err(|e| Error::Config(e.to_string()))?;
        if self.euclid_eps <= 0.0 {
            return Err(Error::Config("euclid_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn fused_channels(&self) -> usize {
        self.channels.iter().sum()
    }

    fn entry_pad(&self) -> usize {
        if self.entry_kernel % 2 == 1 {
            self.entry_kernel / 2
        } else {
            self.entry_kernel / 2 - 1
        }
    }
}

/// The last-layer activations of the four blocks, `f[i]` of shape
/// `(b, c_i, H/2^(i+1), W/2^(i+1))`.
#[derive(Clone, Copy, Debug)]
pub struct MultiScaleFeatures {
    pub f: [Var; 4],
}

#[derive(Clone, Debug)]
struct ResidualUnit {
    conv1: Conv2d,
    norm1: ChannelNorm,
    conv2: Conv2d,
    norm2: ChannelNorm,
}

#[derive(Clone, Debug)]
struct Block {
    entry: Conv2d,
    entry_norm: ChannelNorm,
    units: Vec<ResidualUnit>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    stem: Conv2d,
    stem_norm: ChannelNorm,
    blocks: Vec<Block>,
    pool: HammingKernel2D,
}

impl Backbone {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let stem = Conv2d::new(store, init, "backbone.stem", 3, c[0], 3, 1, 1, false);
        let stem_norm = ChannelNorm::new(store, "backbone.stem_norm", c[0]);
        let mut blocks = Vec::with_capacity(4);
        let mut in_c = c[0];
        for (i, &out_c) in c.iter().enumerate() {
            let name = format!("backbone.block{}", i + 1);
            let entry = Conv2d::new(
                store,
                init,
                &format!("{name}.entry"),
                in_c,
                out_c,
                config.entry_kernel,
                BLOCK_ENTRY_STRIDE,
                config.entry_pad(),
                false,
            );
            let entry_norm = ChannelNorm::new(store, &format!("{name}.entry_norm"), out_c);
            let units = (0..config.units_per_block)
                .map(|u| {
                    let un = format!("{name}.unit{u}");
                    ResidualUnit {
                        conv1: Conv2d::new(store, init, &format!("{un}.conv1"), out_c, out_c, 3, 1, 1, false),
                        norm1: ChannelNorm::new(store, &format!("{un}.norm1"), out_c),
                        conv2: Conv2d::new(store, init, &format!("{un}.conv2"), out_c, out_c, 3, 1, 1, false),
                        norm2: ChannelNorm::new(store, &format!("{un}.norm2"), out_c),
                    }
                })
                .collect();
            blocks.push(Block {
                entry,
                entry_norm,
                units,
            });
            in_c = out_c;
        }
        Ok(Self {
            config: config.clone(),
            stem,
            stem_norm,
            blocks,
            pool: HammingKernel2D::new(config.pool_kernel)?,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Runs the CNN on `(b, 3, H, W)` images; H and W must be multiples of 16.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: Var,
    ) -> Result<MultiScaleFeatures> {
        let (_, c, h, w) = g.value(image).dims4("forward_backbone")?;
        if c != 3 {
            return Err(Error::shape(
                "forward_backbone",
                format!("expected 3 input channels (axis 1), got {c}"),
            ));
        }
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::shape(
                "forward_backbone",
                format!("height and width must be divisible by 16, got {h}x{w}"),
            ));
        }
        let mut x = self.stem.forward(g, store, image)?;
        x = self.stem_norm.forward(g, store, x)?;
        x = g.relu(x);
        let mut taps = Vec::with_capacity(4);
        for block in &self.blocks {
            x = block.entry.forward(g, store, x)?;
            x = block.entry_norm.forward(g, store, x)?;
            x = g.relu(x);
            for unit in &block.units {
                let mut y = unit.conv1.forward(g, store, x)?;
                y = unit.norm1.forward(g, store, y)?;
                y = g.relu(y);
                y = unit.conv2.forward(g, store, y)?;
                y = unit.norm2.forward(g, store, y)?;
                let s = g.add(x, y)?;
                x = g.relu(s);
            }
            taps.push(x);
        }
        Ok(MultiScaleFeatures {
            f: [taps[0], taps[1], taps[2], taps[3]],
        })
    }

    /// Normalizes every scale, L2-pools it down to the grid of the coarsest
    /// scale, applies feature dropout (training only) and concatenates the
    /// scales along channels.
    pub fn rescale_and_concat<T: Scalar>(&self, g: &mut Graph<T>, feats: &MultiScaleFeatures) -> Result<Var> {
        rescale_and_concat(g, feats, &self.pool, self.config.euclid_eps, self.config.feature_dropout)
    }
}

/// Number of stride-2 halvings that take `from` down to `to`, if it is a power of two ratio.
fn halvings(from: usize, to: usize) -> Option<u32> {
    if to == 0 || !from.is_multiple_of(to) {
        return None;
    }
    let ratio = from / to;
    ratio.is_power_of_two().then(|| ratio.trailing_zeros())
}

pub fn rescale_and_concat<T: Scalar>(
    g: &mut Graph<T>,
    feats: &MultiScaleFeatures,
    kernel: &HammingKernel2D,
    eps: f64,
    dropout: f64,
) -> Result<Var> {
    let (b4, _, m4, n4) = g.value(feats.f[3]).dims4("rescale_and_concat")?;
    let mut scaled = Vec::with_capacity(4);
    for (i, &f) in feats.f.iter().enumerate() {
        let (b, _, m, n) = g.value(f).dims4("rescale_and_concat")?;
        if b != b4 {
            return Err(Error::shape(
                "rescale_and_concat",
                format!("scale {} batch {b} vs {b4} (axis 0)", i + 1),
            ));
        }
        let (Some(sy), Some(sx)) = (halvings(m, m4), halvings(n, n4)) else {
            return Err(Error::shape(
                "rescale_and_concat",
                format!("scale {} grid {m}x{n} is not a power-of-two multiple of {m4}x{n4}", i + 1),
            ));
        };
        if sy != sx {
            return Err(Error::shape(
                "rescale_and_concat",
                format!("scale {} has unequal height/width ratios", i + 1),
            ));
        }
        let mut x = g.euclid_normalize(f, eps)?;
        for _ in 0..sy {
            x = g.l2pool(x, kernel, 2)?;
        }
        scaled.push(x);
    }
    let fused = g.concat(&scaled, 1)?;
    g.dropout(fused, dropout)
}
