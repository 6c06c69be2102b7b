use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::config::UpsampleMode;
use crate::nn::layers::{Conv, ConvTranspose};
use crate::nn::params::{Bound, Init};

#[derive(Clone, Debug)]
pub enum Upsampler {
    Bilinear,
    Transposed(ConvTranspose),
}

impl Upsampler {
    pub fn new(init: &mut Init, name: &str, mode: UpsampleMode, channels: usize) -> Self {
        match mode {
            UpsampleMode::Bilinear => Upsampler::Bilinear,
            UpsampleMode::TransposedConv => {
                Upsampler::Transposed(ConvTranspose::doubling(init, &format!("{name}.up"), channels, channels))
            }
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        match self {
            Upsampler::Bilinear => g.upsample_bilinear(x, 2),
            Upsampler::Transposed(conv) => conv.forward(g, p, x),
        }
    }
}

/// One x2 decoder stage.
///
/// The upsampled input `v(F)` and the processed path `f(F)` (a 3x3 conv on
/// the upsampled map) are concatenated with any skip maps, then mixed by a
/// 3x3 conv down to the stage width.
#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub upsample: Upsampler,
    pub process: Conv,
    pub mix: Conv,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Total channel count of the skip maps this stage expects.
    pub skip_channels: usize,
}

impl DecoderStage {
    pub fn new(
        init: &mut Init,
        name: &str,
        mode: UpsampleMode,
        in_channels: usize,
        out_channels: usize,
        skip_channels: usize,
    ) -> Self {
        DecoderStage {
            upsample: Upsampler::new(init, name, mode, in_channels),
            process: Conv::same(init, &format!("{name}.f"), in_channels, out_channels, 3),
            mix: Conv::same(
                init,
                &format!("{name}.mix"),
                out_channels + in_channels + skip_channels,
                out_channels,
                3,
            ),
            in_channels,
            out_channels,
            skip_channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, prev: Var, skips: &[Var]) -> Result<Var> {
        let d = g.dims(prev).to_vec();
        if d.len() != 4 || d[1] != self.in_channels {
            return Err(Error::shape(format!(
                "decoder stage for {} channels got {d:?}",
                self.in_channels
            )));
        }
        let target = [d[0], d[2] * 2, d[3] * 2];
        let mut skip_channels = 0;
        for &s in skips {
            let sd = g.dims(s);
            if sd.len() != 4 || sd[0] != target[0] || sd[2] != target[1] || sd[3] != target[2] {
                return Err(Error::shape(format!(
                    "skip {sd:?} does not match upsampled {}x{}",
                    target[1], target[2]
                )));
            }
            skip_channels += sd[1];
        }
        if skip_channels != self.skip_channels {
            return Err(Error::shape(format!(
                "skips carry {skip_channels} channels, stage expects {}",
                self.skip_channels
            )));
        }
        let up = self.upsample.forward(g, p, prev)?;
        let processed = self.process.forward(g, p, up)?;
        let processed = g.gelu(processed)?;
        let mut parts = vec![processed, up];
        parts.extend_from_slice(skips);
        let fused = g.concat(&parts, 1)?;
        let mixed = self.mix.forward(g, p, fused)?;
        g.gelu(mixed)
    }
}
