use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::nn::attention::MultiHeadAttention;
use crate::nn::config::Activation;
use crate::nn::layers::{activate, LayerNorm, Linear};
use crate::nn::params::{Bound, Init};

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub activation: Activation,
}

impl Mlp {
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = activate(g, h, self.activation)?;
        self.fc2.forward(g, p, h)
    }
}

/// Pre-norm transformer block:
///
/// ```text
/// z' = TMSA(LN1(z)) + z
/// z  = MLP(LN2(z')) + z'
/// ```
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

pub struct BlockSpec {
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
    pub window: Option<usize>,
    pub activation: Activation,
    pub eps: f64,
}

impl TransformerBlock {
    pub fn new(init: &mut Init, name: &str, spec: &BlockSpec) -> Self {
        TransformerBlock {
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), spec.dim, spec.eps),
            attn: MultiHeadAttention::new(init, &format!("{name}.attn"), spec.dim, spec.heads, spec.window),
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), spec.dim, spec.eps),
            mlp: Mlp {
                fc1: Linear::new(init, &format!("{name}.mlp.fc1"), spec.dim, spec.hidden, true),
                fc2: Linear::new(init, &format!("{name}.mlp.fc2"), spec.hidden, spec.dim, true),
                activation: spec.activation,
            },
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        let n1 = self.norm1.forward(g, p, z)?;
        let a = self.attn.tmsa(g, p, n1)?;
        let z1 = g.add(a, z)?;
        let n2 = self.norm2.forward(g, p, z1)?;
        let m = self.mlp.forward(g, p, n2)?;
        g.add(m, z1)
    }
}
