//! Central finite-difference gradient checker.
//!
//! The error reported for each input is
//! `max_i |tape_i - fd_i| / max(max_i |tape_i|, max_i |fd_i|)`, i.e. the
//! worst component deviation relative to the gradient's own scale. An input
//! whose tape and numeric gradients are both exactly zero reports 0.
//! Functions with kinks (relu, clamp) must be probed away from them.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng64;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Probe at most this many coordinates per input (sampled without
    /// replacement); `None` probes every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub index: usize,
    pub probed: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub inputs: Vec<InputReport>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::NonScalarOutput(g.value(out).dims().to_vec()));
    }
    Ok((g, vars, out))
}

/// Tape gradients of the scalar `f` with respect to every input.
pub fn tape_gradients<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (g, vars, out) = evaluate(f, inputs)?;
    let mut grads = g.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros_like(t)))
        .collect())
}

/// Compares tape gradients of `f` against central differences with step `h`.
pub fn grad_check<F>(
    name: &str,
    f: F,
    inputs: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic = tape_gradients(&f, inputs)?;
    let scalar_at = |probe: &[Tensor]| -> Result<f64> {
        let (g, _, out) = evaluate(&f, probe)?;
        g.value(out).item()
    };
    let mut rng = Rng64::new(opts.seed);
    let mut probe: Vec<Tensor> = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    for (index, grad) in analytic.iter().enumerate() {
        let n = inputs[index].numel();
        let mut coords: Vec<usize> = (0..n).collect();
        if let Some(limit) = opts.max_coords.filter(|&l| l < n) {
            rng.shuffle(&mut coords);
            coords.truncate(limit);
            coords.sort_unstable();
        }
        let mut worst_diff = 0.0f64;
        let mut scale = grad.max_abs();
        for &c in &coords {
            let orig = inputs[index].data()[c];
            probe[index].data_mut()[c] = orig + opts.step;
            let plus = scalar_at(&probe)?;
            probe[index].data_mut()[c] = orig - opts.step;
            let minus = scalar_at(&probe)?;
            probe[index].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            worst_diff = worst_diff.max((numeric - grad.data()[c]).abs());
            scale = scale.max(numeric.abs());
        }
        let max_rel_error = if scale == 0.0 { 0.0 } else { worst_diff / scale };
        reports.push(InputReport {
            index,
            probed: coords.len(),
            max_rel_error,
        });
    }
    let max_rel_error = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        name: name.to_string(),
        inputs: reports,
        max_rel_error,
        tolerance: opts.tolerance,
    })
}
