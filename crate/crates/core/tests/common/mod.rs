//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use vitbis::autodiff::{Graph, Var};
use vitbis::rng::Rng64;

/// Weighted sum with fixed random weights so every output element matters.
pub fn project(g: &mut Graph, y: Var, seed: u64) -> vitbis::Result<Var> {
    let dims = g.dims(y).to_vec();
    let w = Rng64::new(seed ^ 0xABCD).uniform_tensor(&dims, -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

// ---- losses ---------------------------------------------------------------

pub fn bce_oracle(p: &[f64], y: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..p.len() {
        let pc = p[i].clamp(1e-7, 1.0 - 1e-7);
        acc += y[i] * pc.ln() + (1.0 - y[i]) * (1.0 - pc).ln();
    }
    -acc / p.len() as f64
}

pub fn dice_oracle(p: &[f64], y: &[f64], eps: f64, factor: f64) -> f64 {
    let (mut inter, mut sy, mut sp) = (0.0, 0.0, 0.0);
    for i in 0..p.len() {
        inter += y[i] * p[i];
        sy += y[i];
        sp += p[i];
    }
    1.0 - (factor * inter + eps) / (sy + sp + eps)
}

/// Row-major `[I, J]` inputs; `sign` is +1 for the printed form.
pub fn voxelwise_oracle(y: &[f64], g: &[f64], classes: usize, alpha: f64, beta: f64, sign: f64) -> f64 {
    let voxels = y.len() / classes;
    let mut dice = 0.0;
    for j in 0..classes {
        let (mut num, mut gg, mut yy) = (0.0, 0.0, 0.0);
        for i in 0..voxels {
            let (yv, gv) = (y[i * classes + j], g[i * classes + j]);
            num += gv * yv;
            gg += gv * gv;
            yy += yv * yv;
        }
        dice += num / (gg + yy);
    }
    let mut ce = 0.0;
    for i in 0..voxels {
        for j in 0..classes {
            ce += g[i * classes + j] * y[i * classes + j].max(1e-7).ln();
        }
    }
    1.0 - alpha * (2.0 / classes as f64) * dice + sign * beta * ce / voxels as f64
}

/// Random probability rows and one-hot rows, both `[voxels, classes]`.
pub fn random_simplex(rng: &mut Rng64, voxels: usize, classes: usize) -> (Vec<f64>, Vec<f64>) {
    let mut y = Vec::with_capacity(voxels * classes);
    let mut g = vec![0.0; voxels * classes];
    for i in 0..voxels {
        let row: Vec<f64> = (0..classes).map(|_| rng.uniform_in(0.05, 1.0)).collect();
        let s: f64 = row.iter().sum();
        y.extend(row.iter().map(|v| v / s));
        g[i * classes + rng.below(classes as u64) as usize] = 1.0;
    }
    (y, g)
}

// ---- metrics --------------------------------------------------------------

use vitbis::metrics::LabelMask;

pub fn random_mask(rng: &mut Rng64, h: usize, w: usize, classes: u64, density: f64) -> LabelMask {
    let labels = (0..h * w)
        .map(|_| if rng.bernoulli(density) { 1 + rng.below(classes - 1) as u8 } else { 0 })
        .collect();
    LabelMask::new(h, w, labels).unwrap()
}

pub fn dice_count_oracle(p: &LabelMask, g: &LabelMask, class: u8) -> f64 {
    let mut inter = 0;
    let mut np = 0;
    let mut ng = 0;
    for r in 0..p.height {
        for c in 0..p.width {
            let a = p.get(r, c) == class;
            let b = g.get(r, c) == class;
            if a {
                np += 1;
            }
            if b {
                ng += 1;
            }
            if a && b {
                inter += 1;
            }
        }
    }
    if np + ng == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + ng) as f64
    }
}

fn points(m: &LabelMask, class: u8) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for r in 0..m.height {
        for c in 0..m.width {
            if m.get(r, c) == class {
                out.push((r, c));
            }
        }
    }
    out
}

/// Smallest k with k/n >= q/100, i.e. the nearest-rank order statistic.
fn rank_quantile(mut v: Vec<f64>, percent: usize) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    let mut k = 1;
    while 100 * k < percent * n {
        k += 1;
    }
    v[k - 1]
}

/// All-pairs Hausdorff percentile with the same empty-set conventions.
pub fn hausdorff_oracle(p: &LabelMask, g: &LabelMask, class: u8, percent: usize) -> Option<f64> {
    let (a, b) = (points(p, class), points(g, class));
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return Some(0.0),
        (true, false) | (false, true) => return None,
        _ => {}
    }
    let (sr, sc) = p.spacing;
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| -> Vec<f64> {
        from.iter()
            .map(|&(r, c)| {
                to.iter()
                    .map(|&(r2, c2)| {
                        let dr = r.abs_diff(r2) as f64 * sr;
                        let dc = c.abs_diff(c2) as f64 * sc;
                        dr * dr + dc * dc
                    })
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect()
    };
    Some(rank_quantile(directed(&a, &b), percent).max(rank_quantile(directed(&b, &a), percent)))
}

// ---- attention ------------------------------------------------------------

use vitbis::nn::attention::PositionAttention;
use vitbis::nn::ParamStore;
use vitbis::Tensor;

/// All-pairs position attention, one column softmax per target position.
pub fn brute_force_gsa(store: &ParamStore, pa: &PositionAttention, f: &Tensor) -> Tensor {
    let d = f.dims().to_vec();
    let (bsz, c, n) = (d[0], d[1], d[2] * d[3]);
    let conv1x1 = |conv: &vitbis::nn::layers::Conv, b: usize| -> Vec<Vec<f64>> {
        let w = store.get(conv.weight);
        let bias = conv.bias.map(|b| store.get(b).clone());
        let out = w.dims()[0];
        (0..out)
            .map(|o| {
                (0..n)
                    .map(|pos| {
                        bias.as_ref().map_or(0.0, |b| b.data()[o])
                            + (0..c)
                                .map(|ci| w.at(&[o, ci, 0, 0]) * f.data()[(b * c + ci) * n + pos])
                                .sum::<f64>()
                    })
                    .collect()
            })
            .collect()
    };
    let mut out = Tensor::zeros(d.clone()).unwrap();
    for b in 0..bsz {
        let mq = conv1x1(&pa.query, b);
        let nk = conv1x1(&pa.key, b);
        let wv = conv1x1(&pa.value, b);
        let logit = |i: usize, j: usize| (0..mq.len()).map(|r| mq[r][i] * nk[r][j]).sum::<f64>();
        for j in 0..n {
            let col: Vec<f64> = (0..n).map(|i| logit(i, j)).collect();
            let denom: f64 = col.iter().map(|l| l.exp()).sum();
            for ch in 0..c {
                let v: f64 = (0..n).map(|i| col[i].exp() / denom * wv[ch][i]).sum();
                out.data_mut()[(b * c + ch) * n + j] = v;
            }
        }
    }
    out
}
