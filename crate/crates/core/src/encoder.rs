//! Self-attention encoder over the fused feature grid.
//!
//! Tokens are the `m × n` grid cells of the fused features (row-major),
//! projected to width `d`. Each layer is post-norm:
//! `x = LN(x + MHSA(x))`, `x = LN(x + FFN(x))`, with the 2D sine positional
//! encoding added to the query and key inputs (not the values) of every layer.

use crate::error::{Error, Result};
use crate::nn::layers::{LayerNorm, Linear};
use crate::nn::{Graph, Init, ParamStore, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub pe_temperature: f64,
    pub positional_encoding: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            width: 64,
            heads: 16,
            ffn_dim: 256,
            pe_temperature: 10000.0,
            positional_encoding: true,
        }
    }
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("encoder width, heads and ffn_dim must be positive".into()));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads ({}) must divide width ({})",
                self.heads, self.width
            )));
        }
        if self.positional_encoding && !self.width.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "positional encoding needs width divisible by 4, got {}",
                self.width
            )));
        }
        if self.pe_temperature <= 0.0 {
            return Err(Error::Config("pe_temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Tokens `(b, L, d)` plus the grid they were flattened from.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub grid: (usize, usize),
}

/// 2D sine encoding of shape `(m·n, d)`: the first `d/2` channels encode the
/// row index and the last `d/2` the column index, alternating sin/cos with
/// frequencies `temperature^(-2i/(d/2))`.
pub fn positional_encoding<T: Scalar>(rows: usize, cols: usize, d: usize, temperature: f64) -> Result<Tensor<T>> {
    if d == 0 || !d.is_multiple_of(4) {
        return Err(Error::Invalid(format!(
            "positional encoding width must be a positive multiple of 4, got {d}"
        )));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::Invalid("positional encoding grid must be non-empty".into()));
    }
    let half = d / 2;
    let freq: Vec<f64> = (0..half)
        .map(|i| temperature.powf(-((2 * (i / 2)) as f64) / half as f64))
        .collect();
    let mut data = Vec::with_capacity(rows * cols * d);
    for r in 0..rows {
        for c in 0..cols {
            for pos in [r as f64, c as f64] {
                for (i, f) in freq.iter().enumerate() {
                    let a = pos * f;
                    data.push(T::of(if i % 2 == 0 { a.sin() } else { a.cos() }));
                }
            }
        }
    }
    Tensor::from_vec(&[rows * cols, d], data)
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    /// Output projection `W1` (d × d).
    pub output: Linear,
    pub norm1: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    input_proj: Linear,
    layers: Vec<AttentionParams>,
}

/// Attention probabilities of every layer, `(b, h, L, L)` each.
pub struct EncoderTrace {
    pub output: Var,
    pub attention: Vec<Var>,
}

impl Encoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        in_channels: usize,
        config: &EncoderConfig,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let input_proj = Linear::new(store, init, "encoder.input_proj", in_channels, d);
        let layers = (0..config.n_layers)
            .map(|l| {
                let n = format!("encoder.layer{l}");
                AttentionParams {
                    query: Linear::new(store, init, &format!("{n}.query"), d, d),
                    key: Linear::new(store, init, &format!("{n}.key"), d, d),
                    value: Linear::new(store, init, &format!("{n}.value"), d, d),
                    output: Linear::new(store, init, &format!("{n}.output"), d, d),
                    norm1: LayerNorm::new(store, &format!("{n}.norm1"), d),
                    ffn_in: Linear::new(store, init, &format!("{n}.ffn_in"), d, config.ffn_dim),
                    ffn_out: Linear::new(store, init, &format!("{n}.ffn_out"), config.ffn_dim, d),
                    norm2: LayerNorm::new(store, &format!("{n}.norm2"), d),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            input_proj,
            layers,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn layers(&self) -> &[AttentionParams] {
        &self.layers
    }

    /// 1×1 projection of `(b, C, m, n)` to `(b, m·n, d)` tokens.
    pub fn project_tokens<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, fused: Var) -> Result<TokenSequence> {
        let (b, c, m, n) = g.value(fused).dims4("project_tokens")?;
        let flat = flatten_grid(g, fused)?;
        debug_assert_eq!(g.shape(flat), [b, m * n, c]);
        let tokens = self.input_proj.forward(g, store, flat)?;
        Ok(TokenSequence {
            tokens,
            grid: (m, n),
        })
    }

    /// Encodes fused features `(b, C, m, n)` into `(b, d, m, n)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, fused: Var) -> Result<Var> {
        Ok(self.forward_traced(g, store, fused)?.output)
    }

    pub fn forward_traced<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        fused: Var,
    ) -> Result<EncoderTrace> {
        let seq = self.project_tokens(g, store, fused)?;
        let (m, n) = seq.grid;
        let b = g.shape(seq.tokens)[0];
        let pe = if self.config.positional_encoding {
            let pe = positional_encoding::<T>(m, n, self.config.width, self.config.pe_temperature)?;
            Some(g.constant(tile_batch(&pe, b)?))
        } else {
            None
        };
        let mut x = seq.tokens;
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (a, probs) = mhsa(g, store, x, pe, layer, self.config.heads)?;
            attention.push(probs);
            let s = g.add(x, a)?;
            x = layer.norm1.forward(g, store, s)?;
            let f = ffn(g, store, x, layer)?;
            let s = g.add(x, f)?;
            x = layer.norm2.forward(g, store, s)?;
        }
        let output = unflatten_grid(g, x, seq.grid)?;
        Ok(EncoderTrace { output, attention })
    }
}

fn tile_batch<T: Scalar>(t: &Tensor<T>, b: usize) -> Result<Tensor<T>> {
    let mut shape = vec![b];
    shape.extend_from_slice(t.shape());
    let data: Vec<T> = (0..b).flat_map(|_| t.data().iter().copied()).collect();
    Tensor::from_vec(&shape, data)
}

/// `(b, C, m, n)` → `(b, m·n, C)`, tokens in row-major grid order.
pub fn flatten_grid<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let (b, c, m, n) = g.value(x).dims4("flatten_grid")?;
    let r = g.reshape(x, &[b, c, m * n])?;
    g.permute(r, &[0, 2, 1])
}

/// Inverse of [`flatten_grid`].
pub fn unflatten_grid<T: Scalar>(g: &mut Graph<T>, tokens: Var, grid: (usize, usize)) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    if s.len() != 3 || s[1] != grid.0 * grid.1 {
        return Err(Error::shape(
            "unflatten_grid",
            format!("tokens {s:?} vs grid {}x{} (axis 1)", grid.0, grid.1),
        ));
    }
    let p = g.permute(tokens, &[0, 2, 1])?;
    g.reshape(p, &[s[0], s[2], grid.0, grid.1])
}

fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = g.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    g.permute(r, &[0, 2, 1, 3])
}

/// Multi-head self-attention. Returns the projected output `(b, L, d)` and
/// the attention probabilities `(b, h, L, L)`.
pub fn mhsa<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    pe: Option<Var>,
    p: &AttentionParams,
    heads: usize,
) -> Result<(Var, Var)> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || !s[2].is_multiple_of(heads) {
        return Err(Error::shape(
            "mhsa",
            format!("tokens {s:?} not (b, L, d) with d divisible by {heads} heads"),
        ));
    }
    let (b, l, d) = (s[0], s[1], s[2]);
    let head_dim = d / heads;
    let qk_in = match pe {
        Some(pe) => g.add(x, pe)?,
        None => x,
    };
    let q = p.query.forward(g, store, qk_in)?;
    let k = p.key.forward(g, store, qk_in)?;
    let v = p.value.forward(g, store, x)?;
    let (q, k, v) = (
        split_heads(g, q, heads)?,
        split_heads(g, k, heads)?,
        split_heads(g, v, heads)?,
    );
    let scores = g.batch_matmul(q, k, true)?;
    let scores = g.scale(scores, T::of(1.0 / (head_dim as f64).sqrt()));
    let probs = g.softmax(scores);
    let ctx = g.batch_matmul(probs, v, false)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, l, d])?;
    let out = p.output.forward(g, store, ctx)?;
    Ok((out, probs))
}

/// `W3 · relu(W2 · x + b2) + b3`.
pub fn ffn<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, p: &AttentionParams) -> Result<Var> {
    let h = p.ffn_in.forward(g, store, x)?;
    let h = g.relu(h);
    p.ffn_out.forward(g, store, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pe_rejects_bad_width() {
        assert!(positional_encoding::<f64>(4, 4, 6, 1e4).is_err());
        assert!(positional_encoding::<f64>(4, 4, 8, 1e4).is_ok());
    }

    #[test]
    fn pe_first_row_is_zero_position() {
        let pe = positional_encoding::<f64>(2, 3, 8, 1e4).unwrap();
        // position (0, 0): sin(0) = 0, cos(0) = 1 alternating
        assert_eq!(&pe.data()[..8], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn config_validation() {
        let mut c = EncoderConfig::default();
        assert_eq!(c.head_dim(), 4);
        c.heads = 5;
        assert!(c.validate().is_err());
    }
}
