//! Pure math kernels shared by the tape and by inference.
//!
//! Shapes follow the usual conventions: matrices are row-major `[rows, cols]`,
//! images are `[n, c, h, w]`. Convolution is cross-correlation with zero
//! padding. The GEMM kernels keep the innermost loop contiguous so the
//! autovectorizer can do its job; accumulation order is fixed, which keeps
//! results bit-identical regardless of thread count elsewhere.

use super::tensor::Scalar;

/// c[m,n] += a[m,k] * b[k,n]
pub fn gemm_nn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == S::ZERO {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T  (each output is a dot product of two rows)
pub fn gemm_nt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::ZERO;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            crow[j] += acc;
        }
    }
}

/// c[m,n] += a[k,m]^T * b[k,n]
pub fn gemm_tn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == S::ZERO {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvMeta {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvMeta {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kh) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kw) / self.stride + 1
    }
    pub fn col_rows(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }
    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfolds one image `[c, h, w]` into `[c*kh*kw, oh*ow]` patches.
pub fn im2col<S: Scalar>(x: &[S], meta: &ConvMeta, col: &mut [S]) {
    let (oh, ow) = (meta.out_h(), meta.out_w());
    debug_assert_eq!(col.len(), meta.col_rows() * meta.col_cols());
    let mut r = 0;
    for c in 0..meta.in_ch {
        let chan = &x[c * meta.in_h * meta.in_w..(c + 1) * meta.in_h * meta.in_w];
        for ki in 0..meta.kh {
            for kj in 0..meta.kw {
                let dst = &mut col[r * oh * ow..(r + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * meta.stride + ki) as isize - meta.pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= meta.in_h as isize {
                        for v in drow.iter_mut() {
                            *v = S::ZERO;
                        }
                        continue;
                    }
                    let src = &chan[iy as usize * meta.in_w..(iy as usize + 1) * meta.in_w];
                    for ox in 0..ow {
                        let ix = (ox * meta.stride + kj) as isize - meta.pad as isize;
                        drow[ox] = if ix < 0 || ix >= meta.in_w as isize {
                            S::ZERO
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                r += 1;
            }
        }
    }
}

/// Scatter-adds a column buffer back to image layout (adjoint of `im2col`).
pub fn col2im<S: Scalar>(col: &[S], meta: &ConvMeta, x: &mut [S]) {
    let (oh, ow) = (meta.out_h(), meta.out_w());
    let mut r = 0;
    for c in 0..meta.in_ch {
        let chan = &mut x[c * meta.in_h * meta.in_w..(c + 1) * meta.in_h * meta.in_w];
        for ki in 0..meta.kh {
            for kj in 0..meta.kw {
                let src = &col[r * oh * ow..(r + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * meta.stride + ki) as isize - meta.pad as isize;
                    if iy < 0 || iy >= meta.in_h as isize {
                        continue;
                    }
                    let drow = &mut chan[iy as usize * meta.in_w..(iy as usize + 1) * meta.in_w];
                    for ox in 0..ow {
                        let ix = (ox * meta.stride + kj) as isize - meta.pad as isize;
                        if ix >= 0 && ix < meta.in_w as isize {
                            drow[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

/// y[n, co, oh, ow] = conv(x[n, ci, h, w], w[co, ci, kh, kw])
pub fn conv2d_forward<S: Scalar>(x: &[S], w: &[S], n: usize, meta: &ConvMeta) -> Vec<S> {
    let (oh, ow) = (meta.out_h(), meta.out_w());
    let img = meta.in_ch * meta.in_h * meta.in_w;
    let out_img = meta.out_ch * oh * ow;
    let mut col = vec![S::ZERO; meta.col_rows() * meta.col_cols()];
    let mut y = vec![S::ZERO; n * out_img];
    for s in 0..n {
        im2col(&x[s * img..(s + 1) * img], meta, &mut col);
        gemm_nn(w, &col, &mut y[s * out_img..(s + 1) * out_img], meta.out_ch, meta.col_rows(), oh * ow);
    }
    y
}

/// dx[n, ci, h, w] = conv2d^T(dy[n, co, oh, ow], w) — the adjoint with
/// respect to the input. Also the building block for symbolic input-gradient
/// expressions (gradient penalty).
pub fn conv2d_input_grad<S: Scalar>(dy: &[S], w: &[S], n: usize, meta: &ConvMeta) -> Vec<S> {
    let (oh, ow) = (meta.out_h(), meta.out_w());
    let img = meta.in_ch * meta.in_h * meta.in_w;
    let out_img = meta.out_ch * oh * ow;
    let mut dcol = vec![S::ZERO; meta.col_rows() * meta.col_cols()];
    let mut dx = vec![S::ZERO; n * img];
    for s in 0..n {
        for v in dcol.iter_mut() {
            *v = S::ZERO;
        }
        gemm_tn(w, &dy[s * out_img..(s + 1) * out_img], &mut dcol, meta.col_rows(), meta.out_ch, oh * ow);
        col2im(&dcol, meta, &mut dx[s * img..(s + 1) * img]);
    }
    dx
}

/// dw[co, ci, kh, kw] = sum_n dy_n * col_n^T — the adjoint wrt the weights.
pub fn conv2d_weight_grad<S: Scalar>(x: &[S], dy: &[S], n: usize, meta: &ConvMeta) -> Vec<S> {
    let (oh, ow) = (meta.out_h(), meta.out_w());
    let img = meta.in_ch * meta.in_h * meta.in_w;
    let out_img = meta.out_ch * oh * ow;
    let mut col = vec![S::ZERO; meta.col_rows() * meta.col_cols()];
    let mut dw = vec![S::ZERO; meta.out_ch * meta.col_rows()];
    for s in 0..n {
        im2col(&x[s * img..(s + 1) * img], meta, &mut col);
        gemm_nt(&dy[s * out_img..(s + 1) * out_img], &col, &mut dw, meta.out_ch, oh * ow, meta.col_rows());
    }
    dw
}

/// 2x2 average pooling with stride 2; odd trailing rows/cols are dropped.
pub fn avg_pool2<S: Scalar>(x: &[S], n: usize, c: usize, h: usize, w: usize) -> Vec<S> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = S::from_f64(0.25);
    let mut y = vec![S::ZERO; n * c * oh * ow];
    for img in 0..n * c {
        let src = &x[img * h * w..(img + 1) * h * w];
        let dst = &mut y[img * oh * ow..(img + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let i = 2 * oy * w + 2 * ox;
                dst[oy * ow + ox] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
            }
        }
    }
    y
}

pub fn avg_pool2_backward<S: Scalar>(dy: &[S], n: usize, c: usize, h: usize, w: usize) -> Vec<S> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = S::from_f64(0.25);
    let mut dx = vec![S::ZERO; n * c * h * w];
    for img in 0..n * c {
        let src = &dy[img * oh * ow..(img + 1) * oh * ow];
        let dst = &mut dx[img * h * w..(img + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = src[oy * ow + ox] * quarter;
                let i = 2 * oy * w + 2 * ox;
                dst[i] += g;
                dst[i + 1] += g;
                dst[i + w] += g;
                dst[i + w + 1] += g;
            }
        }
    }
    dx
}

/// Row-wise softmax of `[rows, cols]` logits.
pub fn softmax_rows<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut y = vec![S::ZERO; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let out = &mut y[r * cols..(r + 1) * cols];
        let mut m = row[0];
        for &v in row.iter() {
            m = m.maxv(v);
        }
        let mut sum = S::ZERO;
        for (o, &v) in out.iter_mut().zip(row.iter()) {
            *o = (v - m).exp();
            sum += *o;
        }
        for o in out.iter_mut() {
            *o = *o / sum;
        }
    }
    y
}

/// Row-wise log-softmax of `[rows, cols]` logits.
pub fn log_softmax_rows<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut y = vec![S::ZERO; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let out = &mut y[r * cols..(r + 1) * cols];
        let mut m = row[0];
        for &v in row.iter() {
            m = m.maxv(v);
        }
        let mut sum = S::ZERO;
        for &v in row.iter() {
            sum += (v - m).exp();
        }
        let lse = m + sum.ln();
        for (o, &v) in out.iter_mut().zip(row.iter()) {
            *o = v - lse;
        }
    }
    y
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    // Stable in both tails.
    if x >= S::ZERO {
        S::ONE / (S::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::ONE + e)
    }
}

/// log(1 + exp(x)), computed stably.
#[inline]
pub fn softplus<S: Scalar>(x: S) -> S {
    x.maxv(S::ZERO) + (S::ONE + (-x.abs()).exp()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_small_known() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm_nn(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);

        // a * b^T with b stored row-major [n,k]
        let mut c2 = [0.0f64; 4];
        let bt = [5.0, 7.0, 6.0, 8.0]; // rows of b^T = columns of b
        gemm_nt(&a, &bt, &mut c2, 2, 2, 2);
        assert_eq!(c2, [19.0, 22.0, 43.0, 50.0]);

        let mut c3 = [0.0f64; 4];
        let at = [1.0, 3.0, 2.0, 4.0];
        gemm_tn(&at, &b, &mut c3, 2, 2, 2);
        assert_eq!(c3, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn conv_identity_kernel_preserves_input() {
        let meta = ConvMeta { in_ch: 1, out_ch: 1, kh: 3, kw: 3, stride: 1, pad: 1, in_h: 4, in_w: 5 };
        let x: Vec<f64> = (0..20).map(|v| v as f64 * 0.1).collect();
        let mut w = vec![0.0; 9];
        w[4] = 1.0; // center tap
        let y = conv2d_forward(&x, &w, 1, &meta);
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_naive_loop() {
        let meta = ConvMeta { in_ch: 2, out_ch: 3, kh: 3, kw: 3, stride: 2, pad: 1, in_h: 6, in_w: 6 };
        let mut rng = crate::util::rng_for(3, &[7]);
        use rand::Rng;
        let x: Vec<f64> = (0..2 * 36).map(|_| rng.random::<f64>() - 0.5).collect();
        let w: Vec<f64> = (0..3 * 2 * 9).map(|_| rng.random::<f64>() - 0.5).collect();
        let y = conv2d_forward(&x, &w, 1, &meta);
        let (oh, ow) = (meta.out_h(), meta.out_w());
        for co in 0..3 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let iy = (oy * 2 + ki) as isize - 1;
                                let ix = (ox * 2 + kj) as isize - 1;
                                if iy >= 0 && iy < 6 && ix >= 0 && ix < 6 {
                                    acc += x[ci * 36 + iy as usize * 6 + ix as usize]
                                        * w[((co * 2 + ci) * 3 + ki) * 3 + kj];
                                }
                            }
                        }
                    }
                    let got = y[(co * oh + oy) * ow + ox];
                    assert!((got - acc).abs() < 1e-12, "mismatch at {co},{oy},{ox}");
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)> for random x, c.
        let meta = ConvMeta { in_ch: 2, out_ch: 1, kh: 3, kw: 3, stride: 2, pad: 1, in_h: 5, in_w: 5 };
        let mut rng = crate::util::rng_for(9, &[1]);
        use rand::Rng;
        let x: Vec<f64> = (0..2 * 25).map(|_| rng.random::<f64>()).collect();
        let c: Vec<f64> = (0..meta.col_rows() * meta.col_cols()).map(|_| rng.random::<f64>()).collect();
        let mut col = vec![0.0; c.len()];
        im2col(&x, &meta, &mut col);
        let lhs: f64 = col.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&c, &meta, &mut back);
        let rhs: f64 = x.iter().zip(back.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_uniform_for_equal_logits() {
        let x = vec![0.7f64; 12];
        let y = softmax_rows(&x, 3, 4);
        for r in 0..3 {
            let row = &y[r * 4..(r + 1) * 4];
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            for &p in row {
                assert!((p - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_logits_give_exactly_zero_probability() {
        let x = vec![0.3, -1e9, 1.2, 0.0];
        let p = softmax_rows(&x, 1, 4);
        assert_eq!(p[1], 0.0);
        let lp = log_softmax_rows(&x, 1, 4);
        assert_eq!(lp[1].exp(), 0.0);
    }

    #[test]
    fn avg_pool_block_means() {
        let x = vec![0.0, 0.0, 1.0, 1.0];
        let y = avg_pool2(&x, 1, 1, 2, 2);
        assert_eq!(y, vec![0.5]);
    }
}
