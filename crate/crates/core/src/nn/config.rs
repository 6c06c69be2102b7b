use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    Bilinear,
    TransposedConv,
}

impl UpsampleMode {
    /// Row label used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            UpsampleMode::Bilinear => "BI",
            UpsampleMode::TransposedConv => "TC",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Relu,
}

/// How the position-attention block aggregates values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GsaMode {
    Off,
    /// Output at position j is `sum_i B[i,j] * W_i`.
    Standard,
    /// Output at position j is `sum_i B[i,j] * W_j`, which reduces to `W_j`
    /// because each column of `B` sums to one. Kept for comparison runs.
    Verbatim,
}

/// Every architecture hyperparameter of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub in_channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Transformer blocks per stack.
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub mlp_activation: Activation,
    /// Channel width after the d -> K bottleneck reduction.
    pub reduced_channels: usize,
    pub num_classes: usize,
    pub num_stacks: usize,
    pub upsample_mode: UpsampleMode,
    pub relative_bias: bool,
    /// Side of the token window for relative bias; `None` uses the token grid.
    pub window_size: Option<usize>,
    pub gsa: GsaMode,
    /// Concatenate the raw input image into the last decoder stage.
    pub input_skip: bool,
    pub init_std: f64,
    pub layernorm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_height: 32,
            image_width: 32,
            in_channels: 1,
            patch_size: 4,
            embed_dim: 64,
            depth: 2,
            num_heads: 4,
            mlp_ratio: 4.0,
            mlp_activation: Activation::Gelu,
            reduced_channels: 128,
            num_classes: 2,
            num_stacks: 3,
            upsample_mode: UpsampleMode::TransposedConv,
            relative_bias: true,
            window_size: None,
            gsa: GsaMode::Standard,
            input_skip: true,
            init_std: 0.02,
            layernorm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Full-size 2D configuration: 224x224 input, patch 4, d = 384, L = 4.
    pub fn full_scale() -> Self {
        ModelConfig {
            image_height: 224,
            image_width: 224,
            embed_dim: 384,
            depth: 4,
            num_heads: 6,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::ConfigMismatch(msg));
        let p = self.patch_size;
        if p < 2 || !p.is_power_of_two() {
            return fail(format!("patch size {p} must be a power of two >= 2"));
        }
        if self.image_height % p != 0 || self.image_width % p != 0 {
            return fail(format!(
                "image {}x{} not divisible by patch size {p}",
                self.image_height, self.image_width
            ));
        }
        if self.in_channels == 0 || self.depth == 0 || self.num_stacks == 0 {
            return fail("channels, depth and stack count must be positive".into());
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return fail(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            ));
        }
        if self.embed_dim < 3 {
            return fail("embed dim must be >= 3 for the three-way channel split".into());
        }
        if self.num_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.reduced_channels == 0 || self.mlp_hidden() == 0 {
            return fail("reduced channels and MLP width must be positive".into());
        }
        if self.num_stacks - 1 > self.decoder_stages() {
            return fail(format!(
                "{} stacks leave {} skips but patch size {p} gives only {} decoder stages",
                self.num_stacks,
                self.num_stacks - 1,
                self.decoder_stages()
            ));
        }
        if !(self.init_std > 0.0) || !(self.layernorm_eps > 0.0) {
            return fail("init std and layernorm eps must be positive".into());
        }
        if self.relative_bias {
            let window = self.window();
            let tokens = self.num_tokens();
            if window == 0 || window * window != tokens {
                return Err(Error::BiasGridMismatch { window, tokens });
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (
            self.image_height / self.patch_size,
            self.image_width / self.patch_size,
        )
    }

    pub fn num_tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn window(&self) -> usize {
        self.window_size.unwrap_or(self.grid().0)
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64).round() as usize
    }

    /// Number of x2 decoder stages needed to undo the patch stride.
    pub fn decoder_stages(&self) -> usize {
        self.patch_size.trailing_zeros() as usize
    }

    pub fn stage_width(&self, stage: usize) -> usize {
        (self.reduced_channels >> (stage + 1)).max(4)
    }

    pub fn stage_input_width(&self, stage: usize) -> usize {
        if stage == 0 {
            self.reduced_channels
        } else {
            self.stage_width(stage - 1)
        }
    }

    /// Index of the encoder stack whose output feeds decoder stage `stage`.
    pub fn skip_for_stage(&self, stage: usize) -> Option<usize> {
        (self.num_stacks - 1).checked_sub(stage + 1)
    }

    pub fn gsa_reduced(&self) -> usize {
        (self.embed_dim / 8).max(1)
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let d = self.embed_dim;
        let p = self.patch_size;
        let c = self.in_channels;
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
        let multi_scale = |ch: usize| {
            let [a, b, e] = split_sizes(ch);
            conv(a, a, 1) + conv(b, b, 3) + conv(e, e, 5)
        };

        let embed = p * p * c * d + self.num_tokens() * d;
        let bias = if self.relative_bias {
            let span = 2 * self.window() - 1;
            span * span * self.num_heads
        } else {
            0
        };
        let hidden = self.mlp_hidden();
        let block = 2 * d + 4 * d * d + bias + 2 * d + (d * hidden + hidden) + (hidden * d + d);
        let encoder = embed + multi_scale(d) + self.num_stacks * self.depth * block;
        let gsa = match self.gsa {
            GsaMode::Off => 0,
            _ => 2 * conv(d, self.gsa_reduced(), 1) - self.gsa_reduced() + conv(d, d, 1),
        };
        let reduce = conv(d, self.reduced_channels, 1);

        let mut decoder = 0;
        let stages = self.decoder_stages();
        for j in 0..stages {
            let cin = self.stage_input_width(j);
            let w = self.stage_width(j);
            if self.upsample_mode == UpsampleMode::TransposedConv {
                decoder += conv(cin, cin, 4);
            }
            decoder += conv(cin, w, 3);
            let mut fused = w + cin;
            if self.skip_for_stage(j).is_some() {
                decoder += conv(d, w, 1);
                fused += w;
            }
            if self.input_skip && j + 1 == stages {
                fused += c;
            }
            decoder += conv(fused, w, 3);
        }
        let last = self.stage_width(stages - 1);
        let head = multi_scale(last) + conv(last, self.num_classes, 1);
        encoder + gsa + reduce + decoder + head
    }
}

/// Channel split of the multi-scale block: the remainder goes to the first
/// (1x1) branch.
pub fn split_sizes(channels: usize) -> [usize; 3] {
    let third = channels / 3;
    [channels - 2 * third, third, third]
}
