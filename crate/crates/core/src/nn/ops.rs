//! Layer kernels on raw NCHW slices.
//!
//! Every kernel walks its loops in a fixed order so results are bit-identical
//! across runs, and each batch row is computed independently of the others.

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
}

impl ConvGeom {
    pub fn pad_h(&self) -> usize {
        self.k_h / 2
    }
    pub fn pad_w(&self) -> usize {
        self.k_w / 2
    }
    pub fn out_h(&self) -> usize {
        self.in_h + 2 * self.pad_h() + 1 - self.k_h
    }
    pub fn out_w(&self) -> usize {
        self.in_w + 2 * self.pad_w() + 1 - self.k_w
    }
    pub fn in_plane(&self) -> usize {
        self.in_h * self.in_w
    }
    pub fn out_plane(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Valid output range along one axis for kernel offset `k`:
    /// output `o` reads input `o + k - pad`.
    fn span(out: usize, inp: usize, k: usize, pad: usize) -> (usize, usize) {
        let lo = pad.saturating_sub(k);
        let hi = (inp + pad).saturating_sub(k).min(out);
        (lo, hi.max(lo))
    }
}

/// Stride-1 "same" convolution (zero padding `k/2`).
pub(crate) fn conv2d_forward<S: Scalar>(
    g: &ConvGeom,
    input: &[S],
    weight: &[S],
    bias: &[S],
    out: &mut [S],
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (ph, pw) = (g.pad_h(), g.pad_w());
    let ksz = g.k_h * g.k_w;
    for b in 0..g.batch {
        for co in 0..g.out_c {
            let o_plane = &mut out[(b * g.out_c + co) * oh * ow..][..oh * ow];
            o_plane.fill(bias[co]);
            for ci in 0..g.in_c {
                let i_plane = &input[(b * g.in_c + ci) * g.in_plane()..][..g.in_plane()];
                let w_k = &weight[(co * g.in_c + ci) * ksz..][..ksz];
                for ky in 0..g.k_h {
                    let (y0, y1) = ConvGeom::span(oh, g.in_h, ky, ph);
                    for kx in 0..g.k_w {
                        let wv = w_k[ky * g.k_w + kx];
                        let (x0, x1) = ConvGeom::span(ow, g.in_w, kx, pw);
                        for oy in y0..y1 {
                            let iy = oy + ky - ph;
                            let o_row = &mut o_plane[oy * ow + x0..oy * ow + x1];
                            let i_row = &i_plane[iy * g.in_w + x0 + kx - pw..][..x1 - x0];
                            for (o, &i) in o_row.iter_mut().zip(i_row) {
                                *o += wv * i;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight/bias gradients and, when `grad_in` is given, the input
/// gradient. Gradient buffers must be zeroed by the caller.
pub(crate) fn conv2d_backward<S: Scalar>(
    g: &ConvGeom,
    input: &[S],
    weight: &[S],
    grad_out: &[S],
    grad_w: &mut [S],
    grad_b: &mut [S],
    mut grad_in: Option<&mut [S]>,
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (ph, pw) = (g.pad_h(), g.pad_w());
    let ksz = g.k_h * g.k_w;
    for b in 0..g.batch {
        for co in 0..g.out_c {
            let go_plane = &grad_out[(b * g.out_c + co) * oh * ow..][..oh * ow];
            grad_b[co] += go_plane.iter().copied().sum::<S>();
            for ci in 0..g.in_c {
                let base = (b * g.in_c + ci) * g.in_plane();
                let i_plane = &input[base..base + g.in_plane()];
                let wk_base = (co * g.in_c + ci) * ksz;
                for ky in 0..g.k_h {
                    let (y0, y1) = ConvGeom::span(oh, g.in_h, ky, ph);
                    for kx in 0..g.k_w {
                        let (x0, x1) = ConvGeom::span(ow, g.in_w, kx, pw);
                        let wv = weight[wk_base + ky * g.k_w + kx];
                        let mut acc = S::zero();
                        for oy in y0..y1 {
                            let iy = oy + ky - ph;
                            let go_row = &go_plane[oy * ow + x0..oy * ow + x1];
                            let i_off = iy * g.in_w + x0 + kx - pw;
                            let i_row = &i_plane[i_off..i_off + (x1 - x0)];
                            for (&go, &i) in go_row.iter().zip(i_row) {
                                acc += go * i;
                            }
                            if let Some(gi) = grad_in.as_deref_mut() {
                                let gi_row = &mut gi[base + i_off..base + i_off + (x1 - x0)];
                                for (d, &go) in gi_row.iter_mut().zip(go_row) {
                                    *d += wv * go;
                                }
                            }
                        }
                        grad_w[wk_base + ky * g.k_w + kx] += acc;
                    }
                }
            }
        }
    }
}

pub(crate) fn relu_inplace<S: Scalar>(x: &mut [S]) {
    for v in x {
        if *v < S::zero() {
            *v = S::zero();
        }
    }
}

/// Zeroes gradient entries where the pre-activation was not positive.
pub(crate) fn relu_backward_inplace<S: Scalar>(pre: &[S], grad: &mut [S]) {
    for (g, &z) in grad.iter_mut().zip(pre) {
        if z <= S::zero() {
            *g = S::zero();
        }
    }
}

/// 2x2 stride-2 max pooling over `planes` planes of `h x w`. Returns the
/// pooled values and, per output cell, the flat input index of the maximum
/// (first maximum in row-major order on ties).
pub(crate) fn maxpool2_forward<S: Scalar>(
    x: &[S],
    planes: usize,
    h: usize,
    w: usize,
) -> (Vec<S>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[j] > x[best] {
                        best = j;
                    }
                }
                out.push(x[best]);
                idx.push(best as u32);
            }
        }
    }
    (out, idx)
}

pub(crate) fn maxpool2_backward<S: Scalar>(grad_out: &[S], idx: &[u32], in_len: usize) -> Vec<S> {
    let mut g = vec![S::zero(); in_len];
    for (&go, &j) in grad_out.iter().zip(idx) {
        g[j as usize] += go;
    }
    g
}

/// `out[b, o] = bias[o] + sum_i weight[o, i] * x[b, i]`.
pub(crate) fn dense_forward<S: Scalar>(
    x: &[S],
    batch: usize,
    n_in: usize,
    weight: &[S],
    bias: &[S],
    n_out: usize,
) -> Vec<S> {
    let mut out = vec![S::zero(); batch * n_out];
    for b in 0..batch {
        let xr = &x[b * n_in..(b + 1) * n_in];
        for o in 0..n_out {
            let wr = &weight[o * n_in..(o + 1) * n_in];
            let mut acc = S::zero();
            for (&wv, &xv) in wr.iter().zip(xr) {
                acc += wv * xv;
            }
            out[b * n_out + o] = acc + bias[o];
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward<S: Scalar>(
    x: &[S],
    batch: usize,
    n_in: usize,
    weight: &[S],
    n_out: usize,
    grad_out: &[S],
    grad_w: &mut [S],
    grad_b: &mut [S],
    mut grad_in: Option<&mut [S]>,
) {
    for b in 0..batch {
        let xr = &x[b * n_in..(b + 1) * n_in];
        for o in 0..n_out {
            let go = grad_out[b * n_out + o];
            grad_b[o] += go;
            let gw = &mut grad_w[o * n_in..(o + 1) * n_in];
            for (d, &xv) in gw.iter_mut().zip(xr) {
                *d += go * xv;
            }
            if let Some(gi) = grad_in.as_deref_mut() {
                let wr = &weight[o * n_in..(o + 1) * n_in];
                for (d, &wv) in gi[b * n_in..(b + 1) * n_in].iter_mut().zip(wr) {
                    *d += go * wv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct definition of a zero-padded correlation, one output at a time.
    fn conv_naive(g: &ConvGeom, x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.batch * g.out_c * oh * ow];
        for b in 0..g.batch {
            for co in 0..g.out_c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[co];
                        for ci in 0..g.in_c {
                            for ky in 0..g.k_h {
                                for kx in 0..g.k_w {
                                    let iy = oy as isize + ky as isize - g.pad_h() as isize;
                                    let ix = ox as isize + kx as isize - g.pad_w() as isize;
                                    if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                        continue;
                                    }
                                    let xi = ((b * g.in_c + ci) * g.in_h + iy as usize) * g.in_w + ix as usize;
                                    let wi = ((co * g.in_c + ci) * g.k_h + ky) * g.k_w + kx;
                                    acc += w[wi] * x[xi];
                                }
                            }
                        }
                        out[((b * g.out_c + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_definition() {
        let g = ConvGeom { batch: 2, in_c: 2, in_h: 5, in_w: 4, out_c: 3, k_h: 3, k_w: 3 };
        let x: Vec<f64> = (0..g.batch * g.in_c * 20).map(|i| ((i * 7) % 11) as f64 / 10.0 - 0.4).collect();
        let w: Vec<f64> = (0..3 * 2 * 9).map(|i| ((i * 5) % 13) as f64 / 13.0 - 0.5).collect();
        let bias = vec![0.1, -0.2, 0.3];
        let mut out = vec![0.0; g.batch * g.out_c * g.out_plane()];
        conv2d_forward(&g, &x, &w, &bias, &mut out);
        let want = conv_naive(&g, &x, &w, &bias);
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_picks_first_max_on_ties() {
        let x = [1.0f64, 1.0, 0.0, 0.5, 1.0, 0.0, 3.0, 3.0];
        let (out, idx) = maxpool2_forward(&x, 1, 2, 4);
        assert_eq!(out, vec![1.0, 3.0]);
        assert_eq!(idx, vec![0, 6]);
        let g = maxpool2_backward(&[1.0f64, 2.0], &idx, 8);
        assert_eq!(g, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }
}
