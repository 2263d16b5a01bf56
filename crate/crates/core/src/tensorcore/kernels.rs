//! Batched numeric kernels shared by the pure forward path and the tape.
//!
//! Activations are laid out `[batch, channels, height, width]` or
//! `[batch, features]`, row-major. Dense weights are `[out, in]`, conv weights
//! `[c_out, c_in, k, k]`.

/// `c = op(a) · op(b)` (or `c += ...` when `accumulate`), where `op(a)` is
/// `[m, k]` and `op(b)` is `[k, n]`. `c` is dense row-major `[m, n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the strides can reach.
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

fn im2col(g: &ConvGeometry, x: &[f64], col: &mut [f64]) {
    let cols = g.col_cols();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeometry, col: &[f64], dx: &mut [f64]) {
    let cols = g.col_cols();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    g: &ConvGeometry,
    batch: usize,
    x: &[f64],
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * g.col_cols();
    let mut out = vec![0.0; batch * out_len];
    let mut col = vec![0.0; g.col_rows() * g.col_cols()];
    for n in 0..batch {
        im2col(g, &x[n * in_len..(n + 1) * in_len], &mut col);
        let y = &mut out[n * out_len..(n + 1) * out_len];
        for (c, chunk) in y.chunks_mut(g.col_cols()).enumerate() {
            chunk.fill(bias[c]);
        }
        matmul(
            false,
            false,
            g.c_out,
            g.col_rows(),
            g.col_cols(),
            weight,
            &col,
            y,
            true,
        );
    }
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `need_dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    batch: usize,
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    need_dx: bool,
) -> Option<Vec<f64>> {
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * g.col_cols();
    let mut col = vec![0.0; g.col_rows() * g.col_cols()];
    let mut dcol = vec![0.0; g.col_rows() * g.col_cols()];
    let mut dx = need_dx.then(|| vec![0.0; batch * in_len]);
    for n in 0..batch {
        let dyn_ = &dy[n * out_len..(n + 1) * out_len];
        im2col(g, &x[n * in_len..(n + 1) * in_len], &mut col);
        matmul(
            false,
            true,
            g.c_out,
            g.col_cols(),
            g.col_rows(),
            dyn_,
            &col,
            dweight,
            true,
        );
        for (c, chunk) in dyn_.chunks(g.col_cols()).enumerate() {
            dbias[c] += chunk.iter().sum::<f64>();
        }
        if let Some(dx) = dx.as_mut() {
            matmul(
                true,
                false,
                g.col_rows(),
                g.c_out,
                g.col_cols(),
                weight,
                dyn_,
                &mut dcol,
                false,
            );
            col2im_add(g, &dcol, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
    dx
}

pub(crate) fn dense_forward(
    batch: usize,
    in_f: usize,
    out_f: usize,
    x: &[f64],
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let mut y = Vec::with_capacity(batch * out_f);
    for _ in 0..batch {
        y.extend_from_slice(bias);
    }
    matmul(false, true, batch, in_f, out_f, x, weight, &mut y, true);
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward(
    batch: usize,
    in_f: usize,
    out_f: usize,
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    need_dx: bool,
) -> Option<Vec<f64>> {
    matmul(true, false, out_f, batch, in_f, dy, x, dweight, true);
    for row in dy.chunks(out_f) {
        for (db, g) in dbias.iter_mut().zip(row) {
            *db += g;
        }
    }
    need_dx.then(|| {
        let mut dx = vec![0.0; batch * in_f];
        matmul(false, false, batch, out_f, in_f, dy, weight, &mut dx, false);
        dx
    })
}

/// 2×2 max pooling with stride 2; returns outputs and, for each output, the
/// flat input index that produced it. Odd trailing rows/columns are dropped.
pub(crate) fn maxpool2_forward(
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
    x: &[f64],
) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(batch * channels * ho * wo);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..batch * channels {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn global_avg_pool_forward(planes: usize, area: usize, x: &[f64]) -> Vec<f64> {
    x.chunks(area)
        .take(planes)
        .map(|p| p.iter().sum::<f64>() / area as f64)
        .collect()
}

/// Mean softmax cross-entropy over the batch, stabilized by max subtraction.
/// Returns the loss and the row-wise softmax probabilities.
pub(crate) fn softmax_cross_entropy(
    batch: usize,
    classes: usize,
    logits: &[f64],
    labels: &[usize],
) -> (f64, Vec<f64>) {
    let mut probs = vec![0.0; batch * classes];
    let mut total = 0.0;
    for n in 0..batch {
        let row = &logits[n * classes..(n + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_sum = sum.ln();
        total += log_sum - (row[labels[n]] - max);
        for (p, v) in probs[n * classes..(n + 1) * classes].iter_mut().zip(row) {
            *p = (v - max).exp() / sum;
        }
    }
    (total / batch as f64, probs)
}

/// Numerically stable row softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
