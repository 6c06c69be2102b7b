//! The full encoder-decoder network.
//!
//! ```text
//! x -> patch embed -> multi-scale block -> stack_1 .. stack_S   (each stack output is a skip)
//!   -> tokens to grid (+ position attention) -> 1x1 conv d->K
//!   -> decoder stages (x2 each, fusing skips from the deepest remaining stack first)
//!   -> multi-scale block -> 1x1 projection to J logits
//! ```

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::attention::PositionAttention;
use crate::nn::block::{BlockSpec, TransformerBlock};
use crate::nn::config::{GsaMode, ModelConfig};
use crate::nn::decoder::DecoderStage;
use crate::nn::layers::{grid_to_tokens, tokens_to_grid, Conv, MultiScaleBlock};
use crate::nn::params::{Bound, Init, ParamId, ParamStore};
use crate::rng::Rng64;
use crate::tensor::Tensor;

/// Linear patch projection plus learned position embedding.
#[derive(Clone, Debug)]
pub struct PatchEmbedding {
    /// `[P*P*C, d]`; rows follow (channel, patch row, patch col) order.
    pub projection: ParamId,
    /// `[N, d]`
    pub position: ParamId,
    pub patch: usize,
    pub channels: usize,
    pub dim: usize,
}

impl PatchEmbedding {
    pub fn new(init: &mut Init, patch: usize, channels: usize, dim: usize, tokens: usize) -> Self {
        PatchEmbedding {
            projection: init.weight("embed.proj", &[patch * patch * channels, dim]),
            position: init.weight("embed.pos", &[tokens, dim]),
            patch,
            channels,
            dim,
        }
    }

    /// `[B, C, H, W]` image to `[B, N, d]` tokens, patches in row-major order.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let d = g.dims(x).to_vec();
        if d.len() != 4 || d[1] != self.channels || d[2] % self.patch != 0 || d[3] % self.patch != 0 {
            return Err(Error::shape(format!(
                "patch embedding ({} channels, patch {}) got {d:?}",
                self.channels, self.patch
            )));
        }
        // The projection applied patch-wise is a stride-P convolution.
        let e = g.transpose(p.var(self.projection))?;
        let kernel = g.reshape(e, &[self.dim, self.channels, self.patch, self.patch])?;
        let grid = g.conv2d(x, kernel, None, self.patch, 0)?;
        let tokens = grid_to_tokens(g, grid)?;
        g.add(tokens, p.var(self.position))
    }
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Encoder stack indices whose skip output is replaced by zeros before
    /// the decoder consumes it. The last stack feeds the bottleneck.
    pub zero_skips: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct VitbisModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub embed: PatchEmbedding,
    pub encoder_context: MultiScaleBlock,
    pub stacks: Vec<Vec<TransformerBlock>>,
    pub position_attention: Option<PositionAttention>,
    pub reduce: Conv,
    pub skip_projections: Vec<Option<Conv>>,
    pub stages: Vec<DecoderStage>,
    pub decoder_context: MultiScaleBlock,
    pub head: Conv,
}

impl VitbisModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init {
            store: &mut params,
            rng: Rng64::new(seed),
            std: config.init_std,
        };
        let d = config.embed_dim;
        let embed = PatchEmbedding::new(
            &mut init,
            config.patch_size,
            config.in_channels,
            d,
            config.num_tokens(),
        );
        let encoder_context = MultiScaleBlock::new(&mut init, "enc_ms", d)?;
        let spec = BlockSpec {
            dim: d,
            heads: config.num_heads,
            hidden: config.mlp_hidden(),
            window: config.relative_bias.then(|| config.window()),
            activation: config.mlp_activation,
            eps: config.layernorm_eps,
        };
        let stacks = (0..config.num_stacks)
            .map(|s| {
                (0..config.depth)
                    .map(|l| TransformerBlock::new(&mut init, &format!("stack{s}.block{l}"), &spec))
                    .collect()
            })
            .collect();
        let position_attention = match config.gsa {
            GsaMode::Off => None,
            mode => Some(PositionAttention::new(&mut init, "gsa", d, config.gsa_reduced(), mode)),
        };
        let reduce = Conv::same(&mut init, "reduce", d, config.reduced_channels, 1);

        let n_stages = config.decoder_stages();
        let mut skip_projections = Vec::with_capacity(n_stages);
        let mut stages = Vec::with_capacity(n_stages);
        for j in 0..n_stages {
            let width = config.stage_width(j);
            let proj = config
                .skip_for_stage(j)
                .map(|_| Conv::same(&mut init, &format!("dec{j}.skip"), d, width, 1));
            let mut skip_channels = if proj.is_some() { width } else { 0 };
            if config.input_skip && j + 1 == n_stages {
                skip_channels += config.in_channels;
            }
            skip_projections.push(proj);
            stages.push(DecoderStage::new(
                &mut init,
                &format!("dec{j}"),
                config.upsample_mode,
                config.stage_input_width(j),
                width,
                skip_channels,
            ));
        }
        let last = config.stage_width(n_stages - 1);
        let decoder_context = MultiScaleBlock::new(&mut init, "dec_ms", last)?;
        let head = Conv::same(&mut init, "head", last, config.num_classes, 1);

        Ok(VitbisModel {
            config,
            params,
            embed,
            encoder_context,
            stacks,
            position_attention,
            reduce,
            skip_projections,
            stages,
            decoder_context,
            head,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.num_elements()
    }

    /// Tokens after the patch embedding and the encoder multi-scale block.
    pub fn encode_input(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let (h, w) = self.config.grid();
        let z0 = self.embed.forward(g, p, x)?;
        let grid = tokens_to_grid(g, z0, h, w)?;
        let ctx = self.encoder_context.forward(g, p, grid)?;
        grid_to_tokens(g, ctx)
    }

    /// Outputs of every encoder stack, shallowest first.
    pub fn encoder_skips(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Vec<Var>> {
        let mut z = self.encode_input(g, p, x)?;
        let mut skips = Vec::with_capacity(self.stacks.len());
        for stack in &self.stacks {
            for block in stack {
                z = block.forward(g, p, z)?;
            }
            skips.push(z);
        }
        Ok(skips)
    }

    /// `[B, C, H, W]` images to `[B, J, H, W]` logits.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        self.forward_with(g, p, x, &ForwardOptions::default())
    }

    pub fn forward_with(&self, g: &mut Graph, p: &Bound, x: Var, opts: &ForwardOptions) -> Result<Var> {
        let cfg = &self.config;
        let dims = g.dims(x).to_vec();
        if dims.len() != 4
            || dims[1] != cfg.in_channels
            || dims[2] != cfg.image_height
            || dims[3] != cfg.image_width
        {
            return Err(Error::ConfigMismatch(format!(
                "model expects [B, {}, {}, {}], got {dims:?}",
                cfg.in_channels, cfg.image_height, cfg.image_width
            )));
        }
        let (h, w) = cfg.grid();
        let mut skips = self.encoder_skips(g, p, x)?;
        for &k in &opts.zero_skips {
            let s = skips
                .get_mut(k)
                .ok_or_else(|| Error::ConfigMismatch(format!("no skip {k}")))?;
            let zeros = Tensor::zeros_like(g.value(*s));
            *s = g.constant(zeros);
        }

        let deepest = *skips.last().expect("at least one stack");
        let mut f = tokens_to_grid(g, deepest, h, w)?;
        if let Some(pa) = &self.position_attention {
            let attended = pa.forward(g, p, f)?;
            f = g.add(f, attended)?;
        }
        let reduced = self.reduce.forward(g, p, f)?;
        let mut y = g.gelu(reduced)?;

        let n_stages = self.stages.len();
        for (j, stage) in self.stages.iter().enumerate() {
            let mut stage_skips = Vec::with_capacity(2);
            if let (Some(k), Some(proj)) = (cfg.skip_for_stage(j), &self.skip_projections[j]) {
                let grid = tokens_to_grid(g, skips[k], h, w)?;
                let s = proj.forward(g, p, grid)?;
                stage_skips.push(g.upsample_bilinear(s, 1 << (j + 1))?);
            }
            if cfg.input_skip && j + 1 == n_stages {
                stage_skips.push(x);
            }
            y = stage.forward(g, p, y, &stage_skips)?;
        }
        let ctx = self.decoder_context.forward(g, p, y)?;
        self.head.forward(g, p, ctx)
    }

    /// Inference on a `[B, C, H, W]` batch without recording gradients.
    pub fn predict_logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(images.clone());
        let y = self.forward(&mut g, &p, x)?;
        Ok(g.value(y).clone())
    }
}
