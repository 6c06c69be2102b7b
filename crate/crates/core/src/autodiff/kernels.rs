//! Raw numeric kernels shared by forward and backward passes.

/// `c = op(a) * op(b) + beta * c` for row-major buffers.
///
/// `a` is stored as `[m, k]`, or `[k, m]` when `trans_a`; `b` as `[k, n]`,
/// or `[n, k]` when `trans_b`. `c` is `[m, n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    // SAFETY: the asserts above bound every index dgemm touches through the
    // given strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of one sliding-window pass: a `channels x height x width` image
/// read by a `kernel x kernel` window into an `out_h x out_w` grid.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn source(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + kk) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Unfolds `image` (`[C, H, W]`) into `cols` (`[C*k*k, out_h*out_w]`).
pub(crate) fn im2col(image: &[f64], win: &Window, cols: &mut [f64]) {
    let ncols = win.cols();
    let k = win.kernel;
    for c in 0..win.channels {
        let plane = &image[c * win.height * win.width..(c + 1) * win.height * win.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..win.out_h {
                    let line = &mut dst[oy * win.out_w..(oy + 1) * win.out_w];
                    match win.source(oy, ky, win.height) {
                        None => line.fill(0.0),
                        Some(iy) => {
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match win.source(ox, kx, win.width) {
                                    Some(ix) => plane[iy * win.width + ix],
                                    None => 0.0,
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back into `image`, accumulating.
pub(crate) fn col2im(cols: &[f64], win: &Window, image: &mut [f64]) {
    let ncols = win.cols();
    let k = win.kernel;
    for c in 0..win.channels {
        let plane = &mut image[c * win.height * win.width..(c + 1) * win.height * win.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..win.out_h {
                    let Some(iy) = win.source(oy, ky, win.height) else {
                        continue;
                    };
                    for ox in 0..win.out_w {
                        if let Some(ix) = win.source(ox, kx, win.width) {
                            plane[iy * win.width + ix] += src[oy * win.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// One output coordinate of a bilinear resize: two source taps and the
/// weight of the second.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Half-pixel-center sampling (align-corners = false): output `o` reads
/// source coordinate `(o + 0.5) / factor - 0.5`, clamped at the borders.
pub(crate) fn bilinear_taps(extent: usize, factor: usize) -> Vec<Tap> {
    (0..extent * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(extent - 1);
            let hi = (lo + 1).min(extent - 1);
            let frac = if lo == hi { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

/// Right-aligned broadcast of two shapes.
pub(crate) fn broadcast_dims(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `dims` viewed inside `out` (zero on broadcast axes).
pub(crate) fn broadcast_strides(dims: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..dims.len()).rev() {
        let oi = i + rank - dims.len();
        strides[oi] = if dims[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= dims[i];
    }
    strides
}

/// Calls `f(out_index, offset_a, offset_b)` for every element of `out`.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..total {
        f(o, oa, ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Gathers `src` (shape `dims`) into `dst` laid out as `dims` permuted by `perm`.
pub(crate) fn permute(src: &[f64], dims: &[usize], perm: &[usize], dst: &mut [f64]) {
    let in_strides = crate::tensor::Shape::new(dims.to_vec())
        .expect("valid dims")
        .strides();
    let out_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zeros = vec![0; out_dims.len()];
    for_each_broadcast(&out_dims, &strides, &zeros, |o, i, _| dst[o] = src[i]);
}
