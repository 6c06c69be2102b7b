//! Segmentation losses, built on the autodiff graph so they can be trained.
//!
//! Probabilities enter as graph variables; targets may be constants or
//! variables. Every loss returns a scalar variable.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Tolerance for "rows sum to one" and one-hot checks.
const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            beta: 0.5,
            epsilon: 1e-4,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.epsilon > 0.0) {
            return Err(Error::Domain(format!(
                "need alpha, beta >= 0 and epsilon > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Which form of the soft Dice loss to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiceForm {
    /// `1 - (2 sum(yp) + eps) / (sum(y) + sum(p) + eps)`
    #[default]
    Standard,
    /// Numerator without the factor 2; a perfect prediction scores about 0.5.
    Verbatim,
}

/// Sign of the cross-entropy term of [`voxelwise_combined_loss`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CeSign {
    /// `+beta * mean(sum_j G log Y)`; minimizing it rewards wrong predictions.
    Printed,
    /// `-beta * mean(sum_j G log Y)`, a proper cross-entropy.
    #[default]
    Trainable,
}

fn check_binary(t: &Tensor, what: &str) -> Result<()> {
    if let Some(v) = t.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Domain(format!("{what} must be 0 or 1, found {v}")));
    }
    Ok(())
}

fn check_unit_interval(t: &Tensor, what: &str) -> Result<()> {
    if let Some(v) = t.data().iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Domain(format!("{what} must lie in [0, 1], found {v}")));
    }
    Ok(())
}

fn check_same_dims(g: &Graph, a: Var, b: Var) -> Result<()> {
    if g.dims(a) != g.dims(b) {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            g.dims(a),
            g.dims(b)
        )));
    }
    Ok(())
}

/// `1 - x`
fn complement(g: &mut Graph, x: Var) -> Result<Var> {
    let n = g.neg(x)?;
    g.add_scalar(n, 1.0)
}

/// Mean binary cross-entropy `-(1/t) sum(y log p + (1-y) log(1-p))`.
pub fn bce_loss(g: &mut Graph, p: Var, y: Var) -> Result<Var> {
    check_same_dims(g, p, y)?;
    check_binary(g.value(y), "BCE targets")?;
    let pc = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let log_p = g.log(pc)?;
    let q = complement(g, pc)?;
    let log_q = g.log(q)?;
    let not_y = complement(g, y)?;
    let pos = g.mul(y, log_p)?;
    let neg = g.mul(not_y, log_q)?;
    let ll = g.add(pos, neg)?;
    let mean = g.mean(ll)?;
    g.neg(mean)
}

/// Soft Dice loss over all elements.
pub fn dice_loss(g: &mut Graph, p: Var, y: Var, eps: f64, form: DiceForm) -> Result<Var> {
    check_same_dims(g, p, y)?;
    check_unit_interval(g.value(p), "Dice predictions")?;
    check_binary(g.value(y), "Dice targets")?;
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("epsilon must be positive, got {eps}")));
    }
    let yp = g.mul(y, p)?;
    let overlap = g.sum(yp)?;
    let overlap = match form {
        DiceForm::Standard => g.scale(overlap, 2.0)?,
        DiceForm::Verbatim => overlap,
    };
    let num = g.add_scalar(overlap, eps)?;
    let sy = g.sum(y)?;
    let sp = g.sum(p)?;
    let den = g.add(sy, sp)?;
    let den = g.add_scalar(den, eps)?;
    let ratio = g.div(num, den)?;
    complement(g, ratio)
}

/// `bce_loss + dice_loss` (standard Dice form).
pub fn combined_loss(g: &mut Graph, p: Var, y: Var, eps: f64) -> Result<Var> {
    let bce = bce_loss(g, p, y)?;
    let dice = dice_loss(g, p, y, eps, DiceForm::Standard)?;
    g.add(bce, dice)
}

/// Voxel-wise combined loss on `[I, J]` probabilities `Y` and one-hot `G`:
///
/// ```text
/// 1 - alpha (2/J) sum_j  sum_i G_ij Y_ij / (sum_i G_ij^2 + sum_i Y_ij^2)
///   + s beta (1/I) sum_i sum_j G_ij log Y_ij
/// ```
///
/// with `s = +1` for [`CeSign::Printed`] and `-1` for [`CeSign::Trainable`].
/// `Y` is clamped below by [`PROB_CLAMP`] inside the log only.
pub fn voxelwise_combined_loss(
    g: &mut Graph,
    y: Var,
    gt: Var,
    cfg: &LossConfig,
    sign: CeSign,
) -> Result<Var> {
    cfg.validate()?;
    check_same_dims(g, y, gt)?;
    let dims = g.dims(y).to_vec();
    if dims.len() != 2 {
        return Err(Error::ShapeMismatch(format!("expected [I, J] probabilities, got {dims:?}")));
    }
    let (voxels, classes) = (dims[0], dims[1]);
    check_simplex_rows(g.value(y), classes)?;
    check_onehot_rows(g.value(gt), classes)?;

    let gy = g.mul(gt, y)?;
    let overlap = g.sum_axis(gy, 0)?;
    let g2 = g.square(gt)?;
    let g2 = g.sum_axis(g2, 0)?;
    let y2 = g.square(y)?;
    let y2 = g.sum_axis(y2, 0)?;
    let den = g.add(g2, y2)?;
    let fractions = g.div(overlap, den)?;
    let dice_sum = g.sum(fractions)?;
    let dice_term = g.scale(dice_sum, cfg.alpha * 2.0 / classes as f64)?;

    let yc = g.clamp(y, PROB_CLAMP, 1.0)?;
    let log_y = g.log(yc)?;
    let glog = g.mul(gt, log_y)?;
    let ce_sum = g.sum(glog)?;
    let s = match sign {
        CeSign::Printed => 1.0,
        CeSign::Trainable => -1.0,
    };
    let ce_term = g.scale(ce_sum, s * cfg.beta / voxels as f64)?;

    let loss = complement(g, dice_term)?;
    g.add(loss, ce_term)
}

fn check_simplex_rows(t: &Tensor, classes: usize) -> Result<()> {
    for (i, row) in t.data().chunks(classes).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL || row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Domain(format!("probability row {i} is not normalized: {row:?}")));
        }
    }
    Ok(())
}

fn check_onehot_rows(t: &Tensor, classes: usize) -> Result<()> {
    check_binary(t, "one-hot targets")?;
    for (i, row) in t.data().chunks(classes).enumerate() {
        if row.iter().sum::<f64>() != 1.0 {
            return Err(Error::Domain(format!("target row {i} is not one-hot: {row:?}")));
        }
    }
    Ok(())
}

/// One-hot `[B, J, H, W]` tensor from integer labels laid out `[B, H, W]`.
pub fn one_hot(labels: &[u8], batch: usize, height: usize, width: usize, classes: usize) -> Result<Tensor> {
    let plane = height * width;
    if labels.len() != batch * plane {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for a {batch}x{height}x{width} batch",
            labels.len()
        )));
    }
    let mut out = Tensor::zeros(vec![batch, classes, height, width])?;
    let data = out.data_mut();
    for b in 0..batch {
        for i in 0..plane {
            let c = labels[b * plane + i] as usize;
            if c >= classes {
                return Err(Error::Domain(format!("label {c} outside {classes} classes")));
            }
            data[(b * classes + c) * plane + i] = 1.0;
        }
    }
    Ok(out)
}

/// Logits, their class softmax and one-hot targets, all `[B, J, H, W]`.
#[derive(Clone, Debug)]
pub struct SegmentationBatch {
    pub logits: Tensor,
    pub probs: Tensor,
    pub targets_onehot: Tensor,
}

impl SegmentationBatch {
    pub fn new(logits: Tensor, targets_onehot: Tensor) -> Result<Self> {
        if logits.dims() != targets_onehot.dims() || logits.rank() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "logits {:?} vs targets {:?}",
                logits.dims(),
                targets_onehot.dims()
            )));
        }
        let mut g = Graph::new();
        let l = g.constant(logits.clone());
        let p = g.softmax(l, 1)?;
        let probs = g.value(p).clone();
        let flat = to_rows(&targets_onehot);
        check_onehot_rows(&flat, targets_onehot.dims()[1])?;
        Ok(SegmentationBatch {
            logits,
            probs,
            targets_onehot,
        })
    }
}

/// `[B, J, H, W]` to `[B*H*W, J]` rows, outside the graph.
fn to_rows(t: &Tensor) -> Tensor {
    let d = t.dims();
    let (b, j, plane) = (d[0], d[1], d[2] * d[3]);
    let mut out = vec![0.0; t.numel()];
    for bi in 0..b {
        for c in 0..j {
            for i in 0..plane {
                out[(bi * plane + i) * j + c] = t.data()[(bi * j + c) * plane + i];
            }
        }
    }
    Tensor::new(vec![b * plane, j], out).expect("same element count")
}

/// `[B, J, H, W]` variable to `[B*H*W, J]` rows.
pub fn pixel_rows(g: &mut Graph, x: Var) -> Result<Var> {
    let d = g.dims(x).to_vec();
    if d.len() != 4 {
        return Err(Error::ShapeMismatch(format!("expected [B, J, H, W], got {d:?}")));
    }
    let t = g.permute(x, &[0, 2, 3, 1])?;
    g.reshape(t, &[d[0] * d[2] * d[3], d[1]])
}

/// Training objective: class softmax of `logits`, then the voxel-wise
/// combined loss with the trainable cross-entropy sign.
pub fn segmentation_loss(g: &mut Graph, logits: Var, targets_onehot: Var, cfg: &LossConfig) -> Result<Var> {
    let probs = g.softmax(logits, 1)?;
    let y = pixel_rows(g, probs)?;
    let gt = pixel_rows(g, targets_onehot)?;
    voxelwise_combined_loss(g, y, gt, cfg, CeSign::Trainable)
}
