use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::config::{split_sizes, Activation};
use crate::nn::params::{Bound, Init, ParamId};

/// `x W + b` over the last axis, `W` stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Linear {
            weight: init.weight(&format!("{name}.w"), &[fan_in, fan_out]),
            bias: bias.then(|| init.zeros(&format!("{name}.b"), &[fan_out])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => g.add(y, p.var(b)),
            None => Ok(y),
        }
    }
}

/// Square-kernel convolution, weight `[out, in, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// Stride-1 convolution with "same" padding.
    pub fn same(init: &mut Init, name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        Conv {
            weight: init.weight(&format!("{name}.w"), &[cout, cin, kernel, kernel]),
            bias: Some(init.zeros(&format!("{name}.b"), &[cout])),
            stride: 1,
            pad: kernel / 2,
        }
    }

    /// Like [`Conv::same`] without a bias term.
    pub fn same_unbiased(init: &mut Init, name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        Conv {
            weight: init.weight(&format!("{name}.w"), &[cout, cin, kernel, kernel]),
            bias: None,
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let bias = self.bias.map(|b| p.var(b));
        g.conv2d(x, p.var(self.weight), bias, self.stride, self.pad)
    }
}

/// Kernel-4, stride-2, pad-1 transposed convolution: an exact x2 upsampler.
#[derive(Clone, Debug)]
pub struct ConvTranspose {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvTranspose {
    pub fn doubling(init: &mut Init, name: &str, cin: usize, cout: usize) -> Self {
        ConvTranspose {
            weight: init.weight(&format!("{name}.w"), &[cin, cout, 4, 4]),
            bias: init.zeros(&format!("{name}.b"), &[cout]),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv_transpose2d(x, p.var(self.weight), Some(p.var(self.bias)), 2, 1)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, dim: usize, eps: f64) -> Self {
        LayerNorm {
            gamma: init.ones(&format!("{name}.gamma"), &[dim]),
            beta: init.zeros(&format!("{name}.beta"), &[dim]),
            eps,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layernorm(x, p.var(self.gamma), p.var(self.beta), self.eps)
    }
}

pub fn activate(g: &mut Graph, x: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Gelu => g.gelu(x),
        Activation::Relu => g.relu(x),
    }
}

/// Splits channels three ways, runs 1x1 / 3x3 / 5x5 convolutions on the
/// parts and concatenates the results. Shape-preserving.
#[derive(Clone, Debug)]
pub struct MultiScaleBlock {
    pub sizes: [usize; 3],
    pub branches: [Conv; 3],
}

impl MultiScaleBlock {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Result<Self> {
        if channels < 3 {
            return Err(Error::shape(format!(
                "multi-scale block needs at least 3 channels, got {channels}"
            )));
        }
        let sizes = split_sizes(channels);
        let branches = [1, 3, 5].map(|k| {
            let c = sizes[k / 2];
            Conv::same(init, &format!("{name}.conv{k}"), c, c, k)
        });
        Ok(MultiScaleBlock { sizes, branches })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let dims = g.dims(x);
        let channels: usize = self.sizes.iter().sum();
        if dims.len() != 4 || dims[1] < 3 || dims[1] != channels {
            return Err(Error::shape(format!(
                "multi-scale block for {channels} channels got {dims:?}"
            )));
        }
        let parts = g.split(x, &self.sizes, 1)?;
        let mut outs = Vec::with_capacity(3);
        for (part, conv) in parts.into_iter().zip(&self.branches) {
            outs.push(conv.forward(g, p, part)?);
        }
        g.concat(&outs, 1)
    }
}

/// `[B, N, d]` tokens to a `[B, d, h, w]` feature map (row-major tokens).
pub fn tokens_to_grid(g: &mut Graph, z: Var, h: usize, w: usize) -> Result<Var> {
    let d = g.dims(z).to_vec();
    if d.len() != 3 || d[1] != h * w {
        return Err(Error::shape(format!("{d:?} tokens do not form a {h}x{w} grid")));
    }
    let t = g.permute(z, &[0, 2, 1])?;
    g.reshape(t, &[d[0], d[2], h, w])
}

/// Inverse of [`tokens_to_grid`].
pub fn grid_to_tokens(g: &mut Graph, f: Var) -> Result<Var> {
    let d = g.dims(f).to_vec();
    if d.len() != 4 {
        return Err(Error::shape(format!("feature map expected, got {d:?}")));
    }
    let r = g.reshape(f, &[d[0], d[1], d[2] * d[3]])?;
    g.permute(r, &[0, 2, 1])
}
