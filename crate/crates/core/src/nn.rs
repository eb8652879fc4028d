//! Layer kernels with explicit backward passes. All buffers are row-major
//! `f64`, batch-major, channel-major within an item (B × C × H × W).

/// `c = alpha · op(a) · op(b) + beta · c` with explicit strides.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the caller's strides index within `a` (m×k), `b` (k×n) and `c` (m×n);
    // checked in debug builds.
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

/// 3×3 kernel, stride 1, zero padding 1.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv3x3 {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
}

impl Conv3x3 {
    fn k(&self) -> usize {
        self.c_in * 9
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let (h, w, hw) = (self.h, self.w, self.hw());
        for c in 0..self.c_in {
            let plane = &x[c * hw..(c + 1) * hw];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut col[((c * 9) + ky * 3 + kx) * hw..][..hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        let out = &mut row[y * w..(y + 1) * w];
                        if sy < 0 || sy >= h as isize {
                            out.fill(0.0);
                            continue;
                        }
                        let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                        match kx {
                            0 => {
                                out[0] = 0.0;
                                out[1..].copy_from_slice(&src[..w - 1]);
                            }
                            1 => out.copy_from_slice(src),
                            _ => {
                                out[..w - 1].copy_from_slice(&src[1..]);
                                out[w - 1] = 0.0;
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, col: &[f64], dx: &mut [f64]) {
        let (h, w, hw) = (self.h, self.w, self.hw());
        for c in 0..self.c_in {
            let plane = &mut dx[c * hw..(c + 1) * hw];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &col[((c * 9) + ky * 3 + kx) * hw..][..hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &row[y * w..(y + 1) * w];
                        let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                        match kx {
                            0 => dst[..w - 1]
                                .iter_mut()
                                .zip(&src[1..])
                                .for_each(|(d, s)| *d += s),
                            1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                            _ => dst[1..]
                                .iter_mut()
                                .zip(&src[..w - 1])
                                .for_each(|(d, s)| *d += s),
                        }
                    }
                }
            }
        }
    }

    /// `x`: B × c_in × h × w → returns B × c_out × h × w.
    pub fn forward(&self, x: &[f64], weight: &[f64], bias: &[f64], batch: usize) -> Vec<f64> {
        let (k, hw) = (self.k(), self.hw());
        let in_len = self.c_in * hw;
        let out_len = self.c_out * hw;
        let mut out = vec![0.0; batch * out_len];
        let mut col = vec![0.0; k * hw];
        for b in 0..batch {
            self.im2col(&x[b * in_len..(b + 1) * in_len], &mut col);
            let o = &mut out[b * out_len..(b + 1) * out_len];
            for (co, row) in o.chunks_exact_mut(hw).enumerate() {
                row.fill(bias[co]);
            }
            gemm(
                self.c_out,
                k,
                hw,
                1.0,
                weight,
                (k, 1),
                &col,
                (hw, 1),
                1.0,
                o,
            );
        }
        out
    }

    /// Accumulates weight/bias gradients; returns the input gradient when requested.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        x: &[f64],
        weight: &[f64],
        d_out: &[f64],
        batch: usize,
        d_weight: &mut [f64],
        d_bias: &mut [f64],
        need_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let (k, hw) = (self.k(), self.hw());
        let in_len = self.c_in * hw;
        let out_len = self.c_out * hw;
        let mut col = vec![0.0; k * hw];
        let mut dcol = vec![0.0; k * hw];
        let mut dx = need_input_grad.then(|| vec![0.0; batch * in_len]);
        for b in 0..batch {
            let dy = &d_out[b * out_len..(b + 1) * out_len];
            for (co, row) in dy.chunks_exact(hw).enumerate() {
                d_bias[co] += row.iter().sum::<f64>();
            }
            self.im2col(&x[b * in_len..(b + 1) * in_len], &mut col);
            // dW (c_out × k) += dY (c_out × hw) · colᵀ (hw × k)
            gemm(
                self.c_out,
                hw,
                k,
                1.0,
                dy,
                (hw, 1),
                &col,
                (1, hw),
                1.0,
                d_weight,
            );
            if let Some(dx) = dx.as_mut() {
                // dcol (k × hw) = Wᵀ (k × c_out) · dY (c_out × hw)
                gemm(
                    k,
                    self.c_out,
                    hw,
                    1.0,
                    weight,
                    (1, k),
                    dy,
                    (hw, 1),
                    0.0,
                    &mut dcol,
                );
                self.col2im_add(&dcol, &mut dx[b * in_len..(b + 1) * in_len]);
            }
        }
        dx
    }
}

/// 2×2 max pool with stride 2 (floor). Returns pooled values and argmax offsets
/// into the input plane.
pub(crate) fn maxpool2_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    let mut arg = vec![0u32; planes * oh * ow];
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut bi = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = (2 * y + dy) * w + 2 * xo + dx;
                        if plane[i] > best {
                            best = plane[i];
                            bi = i;
                        }
                    }
                }
                let o = p * oh * ow + y * ow + xo;
                out[o] = best;
                arg[o] = bi as u32;
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool2_backward(
    d_out: &[f64],
    arg: &[u32],
    planes: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let per_out = (h / 2) * (w / 2);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for o in 0..per_out {
            let i = p * per_out + o;
            dx[p * h * w + arg[i] as usize] += d_out[i];
        }
    }
    dx
}

/// Fully connected layer on row vectors: `y = x Wᵀ + b`, `W` is out × in.
pub(crate) fn linear_forward(
    x: &[f64],
    rows: usize,
    n_in: usize,
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let n_out = bias.len();
    let mut y = Vec::with_capacity(rows * n_out);
    for _ in 0..rows {
        y.extend_from_slice(bias);
    }
    gemm(
        rows,
        n_in,
        n_out,
        1.0,
        x,
        (n_in, 1),
        weight,
        (1, n_in),
        1.0,
        &mut y,
    );
    y
}

/// Accumulates `dW`, `db`; returns `dx`.
pub(crate) fn linear_backward(
    x: &[f64],
    rows: usize,
    n_in: usize,
    weight: &[f64],
    dy: &[f64],
    d_weight: &mut [f64],
    d_bias: &mut [f64],
) -> Vec<f64> {
    let n_out = d_bias.len();
    for r in 0..rows {
        for (db, g) in d_bias.iter_mut().zip(&dy[r * n_out..(r + 1) * n_out]) {
            *db += g;
        }
    }
    gemm(
        n_out,
        rows,
        n_in,
        1.0,
        dy,
        (1, n_out),
        x,
        (n_in, 1),
        1.0,
        d_weight,
    );
    let mut dx = vec![0.0; rows * n_in];
    gemm(
        rows,
        n_out,
        n_in,
        1.0,
        dy,
        (n_out, 1),
        weight,
        (n_in, 1),
        0.0,
        &mut dx,
    );
    dx
}

/// Numerically stable log-softmax of one row.
pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}
