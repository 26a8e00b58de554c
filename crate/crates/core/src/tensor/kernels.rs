//! Raw slice kernels behind the tape primitives.
//!
//! Everything here works on row-major `f64` slices with explicit sizes and
//! writes into caller-provided buffers. Image-shaped data is NHWC.

/// `out += a · b` for `a: m×k`, `b: k×n`.
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n == 0 {
        return;
    }
    for (arow, orow) in a.chunks_exact(k.max(1)).zip(out.chunks_exact_mut(n)).take(m) {
        for (p, &av) in arow.iter().enumerate().take(k) {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += aᵀ · b` for `a: k×m`, `b: k×n`.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n == 0 || m == 0 {
        return;
    }
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Transpose of a `rows×cols` matrix.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `out += a · bᵀ` for `a: m×k`, `b: n×k`.
pub fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let bt = transpose(b, n, k);
    matmul_acc(a, &bt, m, k, n, out);
}

/// Geometry of a 3×3, zero-padded convolution over an NHWC batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub const KERNEL: usize = 3;

    pub fn out_height(&self) -> usize {
        (self.height - 1) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - 1) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        Self::KERNEL * Self::KERNEL * self.in_channels
    }

    pub fn out_positions(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }
}

/// Unfolds 3×3 patches into rows of `(ky, kx, c)`.
pub fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (ho, wo, c) = (g.out_height(), g.out_width(), g.in_channels);
    let plen = g.patch_len();
    let mut cols = vec![0.0; g.out_positions() * plen];
    for n in 0..g.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((n * ho + oy) * wo + ox) * plen;
                for ky in 0..3 {
                    let iy = (oy * g.stride + ky) as isize - 1;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * g.stride + kx) as isize - 1;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let src = ((n * g.height + iy as usize) * g.width + ix as usize) * c;
                        let dst = row + (ky * 3 + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&input[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back into an NHWC buffer.
pub fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (ho, wo, c) = (g.out_height(), g.out_width(), g.in_channels);
    let plen = g.patch_len();
    let mut out = vec![0.0; g.batch * g.height * g.width * c];
    for n in 0..g.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((n * ho + oy) * wo + ox) * plen;
                for ky in 0..3 {
                    let iy = (oy * g.stride + ky) as isize - 1;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * g.stride + kx) as isize - 1;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let dst = ((n * g.height + iy as usize) * g.width + ix as usize) * c;
                        let src = row + (ky * 3 + kx) * c;
                        for (o, v) in out[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Bilinear taps for a sample at continuous pixel coordinate `(x, y)`, where
/// integer coordinates are pixel centers. Taps outside the image are dropped,
/// which is equivalent to zero fill.
pub fn bilinear_taps(x: f64, y: f64, width: usize, height: usize) -> [(usize, f64); 4] {
    let mut taps = [(0usize, 0.0f64); 4];
    if !x.is_finite() || !y.is_finite() {
        return taps;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let corners = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1.0, y0, fx * (1.0 - fy)),
        (x0, y0 + 1.0, (1.0 - fx) * fy),
        (x0 + 1.0, y0 + 1.0, fx * fy),
    ];
    for (tap, &(cx, cy, w)) in taps.iter_mut().zip(&corners) {
        if w != 0.0 && cx >= 0.0 && cy >= 0.0 && cx < width as f64 && cy < height as f64 {
            *tap = (cy as usize * width + cx as usize, w);
        }
    }
    taps
}

/// Bilinear grid sample. `input` is `(n, h, w, c)`, `grid` is
/// `(n, ho, wo, 2)` holding `(x, y)` pixel coordinates.
pub fn grid_sample(
    input: &[f64],
    grid: &[f64],
    (n, h, w, c): (usize, usize, usize, usize),
    (ho, wo): (usize, usize),
) -> Vec<f64> {
    let mut out = vec![0.0; n * ho * wo * c];
    for b in 0..n {
        let img = &input[b * h * w * c..(b + 1) * h * w * c];
        for p in 0..ho * wo {
            let gi = (b * ho * wo + p) * 2;
            let taps = bilinear_taps(grid[gi], grid[gi + 1], w, h);
            let dst = &mut out[(b * ho * wo + p) * c..(b * ho * wo + p + 1) * c];
            for &(idx, wt) in &taps {
                if wt == 0.0 {
                    continue;
                }
                for (o, v) in dst.iter_mut().zip(&img[idx * c..(idx + 1) * c]) {
                    *o += wt * v;
                }
            }
        }
    }
    out
}

/// Gradient of [`grid_sample`] with respect to its input image.
pub fn grid_sample_backward(
    grad_out: &[f64],
    grid: &[f64],
    (n, h, w, c): (usize, usize, usize, usize),
    (ho, wo): (usize, usize),
) -> Vec<f64> {
    let mut grad_in = vec![0.0; n * h * w * c];
    for b in 0..n {
        let gimg = &mut grad_in[b * h * w * c..(b + 1) * h * w * c];
        for p in 0..ho * wo {
            let gi = (b * ho * wo + p) * 2;
            let taps = bilinear_taps(grid[gi], grid[gi + 1], w, h);
            let src = &grad_out[(b * ho * wo + p) * c..(b * ho * wo + p + 1) * c];
            for &(idx, wt) in &taps {
                if wt == 0.0 {
                    continue;
                }
                for (g, v) in gimg[idx * c..(idx + 1) * c].iter_mut().zip(src) {
                    *g += wt * v;
                }
            }
        }
    }
    grad_in
}

/// Row-wise softmax over the last axis of a `rows × d` buffer.
pub fn softmax_rows(x: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    if d == 0 {
        return out;
    }
    for (row, orow) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}
