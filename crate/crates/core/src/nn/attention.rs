//! Token self-attention with a relative-position bias, and position
//! attention over the spatial locations of a feature map.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::config::GsaMode;
use crate::nn::layers::Conv;
use crate::nn::params::{Bound, Init, ParamId};

/// Row of the `(2M-1)^2`-row bias table used for the query/key pair.
/// Positions are `(row, col)` on an `M x M` token window.
pub fn relative_offset_index(window: usize, query: (usize, usize), key: (usize, usize)) -> usize {
    let span = 2 * window - 1;
    let dr = query.0 + window - 1 - key.0;
    let dc = query.1 + window - 1 - key.1;
    dr * span + dc
}

/// Table rows for every (query, key) pair of an `M x M` window, row-major
/// over queries then keys.
pub fn relative_bias_index(window: usize) -> Vec<usize> {
    let n = window * window;
    let mut index = Vec::with_capacity(n * n);
    for q in 0..n {
        for k in 0..n {
            index.push(relative_offset_index(
                window,
                (q / window, q % window),
                (k / window, k % window),
            ));
        }
    }
    index
}

#[derive(Clone, Debug)]
pub struct RelativeBias {
    /// `[(2M-1)^2, heads]`
    pub table: ParamId,
    pub window: usize,
    index: Vec<usize>,
}

impl RelativeBias {
    pub fn new(init: &mut Init, name: &str, window: usize, heads: usize) -> Self {
        let span = 2 * window - 1;
        RelativeBias {
            table: init.zeros(&format!("{name}.rel_bias"), &[span * span, heads]),
            window,
            index: relative_bias_index(window),
        }
    }

    /// Bias laid out as `[heads, N, N]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound) -> Result<Var> {
        let n = self.window * self.window;
        let rows = g.index_select(p.var(self.table), &self.index)?;
        let heads = g.dims(rows)[1];
        let r = g.reshape(rows, &[n, n, heads])?;
        g.permute(r, &[2, 0, 1])
    }
}

/// Multi-head attention. [`msa`](Self::msa) yields the concatenated head
/// outputs; [`tmsa`](Self::tmsa) additionally applies the merge matrix.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub dim: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bias: Option<RelativeBias>,
}

/// Intermediate results of one attention evaluation.
pub struct AttentionOutput {
    /// `[B, N, d]` concatenated head outputs.
    pub heads: Var,
    /// `[B, heads, N, N]` attention weights; rows (last axis) sum to one.
    pub weights: Var,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize, window: Option<usize>) -> Self {
        MultiHeadAttention {
            heads,
            dim,
            wq: init.weight(&format!("{name}.wq"), &[dim, dim]),
            wk: init.weight(&format!("{name}.wk"), &[dim, dim]),
            wv: init.weight(&format!("{name}.wv"), &[dim, dim]),
            wo: init.weight(&format!("{name}.wo"), &[dim, dim]),
            bias: window.map(|m| RelativeBias::new(init, name, m, heads)),
        }
    }

    fn split_heads(&self, g: &mut Graph, x: Var, perm: &[usize]) -> Result<Var> {
        let d = g.dims(x).to_vec();
        let r = g.reshape(x, &[d[0], d[1], self.heads, self.dim / self.heads])?;
        g.permute(r, perm)
    }

    pub fn attention(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<AttentionOutput> {
        let dims = g.dims(z).to_vec();
        if dims.len() != 3 || dims[2] != self.dim {
            return Err(Error::shape(format!("attention of width {} got {dims:?}", self.dim)));
        }
        let (batch, tokens) = (dims[0], dims[1]);
        if let Some(bias) = &self.bias {
            if bias.window * bias.window != tokens {
                return Err(Error::BiasGridMismatch {
                    window: bias.window,
                    tokens,
                });
            }
        }
        let q = g.matmul(z, p.var(self.wq))?;
        let k = g.matmul(z, p.var(self.wk))?;
        let v = g.matmul(z, p.var(self.wv))?;
        let q = self.split_heads(g, q, &[0, 2, 1, 3])?;
        let kt = self.split_heads(g, k, &[0, 2, 3, 1])?;
        let v = self.split_heads(g, v, &[0, 2, 1, 3])?;

        let scores = g.matmul(q, kt)?;
        let head_dim = (self.dim / self.heads) as f64;
        let mut logits = g.scale(scores, 1.0 / head_dim.sqrt())?;
        if let Some(bias) = &self.bias {
            let b = bias.forward(g, p)?;
            logits = g.add(logits, b)?;
        }
        let weights = g.softmax(logits, 3)?;
        let out = g.matmul(weights, v)?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let heads = g.reshape(out, &[batch, tokens, self.dim])?;
        Ok(AttentionOutput { heads, weights })
    }

    pub fn msa(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        Ok(self.attention(g, p, z)?.heads)
    }

    pub fn tmsa(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        let heads = self.msa(g, p, z)?;
        g.matmul(heads, p.var(self.wo))
    }
}

/// Position attention over the `n = h*w` locations of a `[B, c, h, w]` map.
///
/// The query projection has no bias: a query bias shifts every logit of a
/// column by the same amount and cancels in the softmax over `i`.
#[derive(Clone, Debug)]
pub struct PositionAttention {
    pub query: Conv,
    pub key: Conv,
    pub value: Conv,
    pub mode: GsaMode,
}

impl PositionAttention {
    pub fn new(init: &mut Init, name: &str, channels: usize, reduced: usize, mode: GsaMode) -> Self {
        PositionAttention {
            query: Conv::same_unbiased(init, &format!("{name}.m"), channels, reduced, 1),
            key: Conv::same(init, &format!("{name}.n"), channels, reduced, 1),
            value: Conv::same(init, &format!("{name}.w"), channels, channels, 1),
            mode,
        }
    }

    /// Attention map `[B, n, n]` with entry `[i, j] = softmax_i(M_i . N_j)`.
    pub fn attention_map(&self, g: &mut Graph, p: &Bound, f: Var) -> Result<Var> {
        let d = g.dims(f).to_vec();
        if d.len() != 4 {
            return Err(Error::shape(format!("position attention of {d:?}")));
        }
        let n = d[2] * d[3];
        let m = self.query.forward(g, p, f)?;
        let r = g.dims(m)[1];
        let m = g.reshape(m, &[d[0], r, n])?;
        let mt = g.permute(m, &[0, 2, 1])?;
        let k = self.key.forward(g, p, f)?;
        let k = g.reshape(k, &[d[0], r, n])?;
        let logits = g.matmul(mt, k)?;
        g.softmax(logits, 1)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, f: Var) -> Result<Var> {
        let d = g.dims(f).to_vec();
        let attn = self.attention_map(g, p, f)?;
        let w = self.value.forward(g, p, f)?;
        let w = g.reshape(w, &[d[0], d[1], d[2] * d[3]])?;
        let out = match self.mode {
            GsaMode::Verbatim => {
                let colsum = g.sum_axis(attn, 1)?;
                g.mul(w, colsum)?
            }
            _ => g.matmul(w, attn)?,
        };
        g.reshape(out, &d)
    }
}
