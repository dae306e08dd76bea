//! Convolution and pooling kernels over NCHW buffers.
//!
//! Convolution lowers each sample to a `[C*KH*KW, OH*OW]` patch matrix and
//! multiplies by the `[OC, C*KH*KW]` filter bank. Samples are independent and
//! run through [`crate::par`]; the weight-gradient reduction is summed over
//! fixed-size sample groups in index order.

use super::gemm::{gemm, MatRef};
use crate::par;

/// Samples per partial sum in the weight-gradient reduction.
const REDUCE_GROUP: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub oc: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output columns `ox` whose input column `ox * stride + kx - pad` is in bounds.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride);
    // ox * stride + kx < w + pad
    let hi = if g.w + g.pad > kx {
        ((g.w + g.pad - kx - 1) / g.stride + 1).min(g.ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col(g: &ConvGeom, input: &[f32], cols: &mut [f32]) {
    let p = g.out_pixels();
    for c in 0..g.c {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let seg = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        seg.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    seg[..lo].fill(0.0);
                    seg[hi..].fill(0.0);
                    if lo == hi {
                        continue;
                    }
                    let x0 = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        seg[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                    } else {
                        for (j, v) in seg[lo..hi].iter_mut().enumerate() {
                            *v = src[x0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f32], out: &mut [f32]) {
    let p = g.out_pixels();
    out.fill(0.0);
    for c in 0..g.c {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kx);
                if lo == hi {
                    continue;
                }
                let x0 = lo * g.stride + kx - g.pad;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let seg = &src[oy * g.ow + lo..oy * g.ow + hi];
                    if g.stride == 1 {
                        dst[x0..x0 + seg.len()].iter_mut().zip(seg).for_each(|(d, s)| *d += s);
                    } else {
                        for (j, s) in seg.iter().enumerate() {
                            dst[x0 + j * g.stride] += s;
                        }
                    }
                }
            }
        }
    }
}

/// Returns `(output, patch matrices)`.
pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    input: &[f32],
    weight: &[f32],
    bias: Option<&[f32]>,
) -> (Vec<f32>, Vec<f32>) {
    let (k, p) = (g.patch_len(), g.out_pixels());
    let in_len = g.c * g.h * g.w;
    let mut out = vec![0.0f32; g.n * g.oc * p];
    let mut cols = vec![0.0f32; g.n * k * p];
    par::for_each_chunk_pair(&mut out, g.oc * p, &mut cols, k * p, |i, o, col| {
        im2col(g, &input[i * in_len..(i + 1) * in_len], col);
        gemm(
            1.0,
            MatRef::row_major(weight, g.oc, k),
            MatRef::row_major(col, k, p),
            0.0,
            o,
        );
        if let Some(b) = bias {
            for (ch, row) in o.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v += b[ch]);
            }
        }
    });
    (out, cols)
}

/// Gradient with respect to the convolution input.
pub(crate) fn conv2d_backward_input(g: &ConvGeom, grad_out: &[f32], weight: &[f32]) -> Vec<f32> {
    let (k, p) = (g.patch_len(), g.out_pixels());
    let in_len = g.c * g.h * g.w;
    let mut dx = vec![0.0f32; g.n * in_len];
    par::for_each_chunk(&mut dx, in_len, |i, dxi| {
        let mut dcols = vec![0.0f32; k * p];
        gemm(
            1.0,
            MatRef::transposed(weight, g.oc, k),
            MatRef::row_major(&grad_out[i * g.oc * p..(i + 1) * g.oc * p], g.oc, p),
            0.0,
            &mut dcols,
        );
        col2im(g, &dcols, dxi);
    });
    dx
}

/// Gradients with respect to the filter bank and bias.
pub(crate) fn conv2d_backward_params(
    g: &ConvGeom,
    grad_out: &[f32],
    cols: &[f32],
    want_bias: bool,
) -> (Vec<f32>, Option<Vec<f32>>) {
    let (k, p) = (g.patch_len(), g.out_pixels());
    let wlen = g.oc * k;
    let groups = g.n.div_ceil(REDUCE_GROUP);
    let partials = par::map_range(groups, |gi| {
        let mut acc = vec![0.0f32; wlen];
        let end = ((gi + 1) * REDUCE_GROUP).min(g.n);
        for i in gi * REDUCE_GROUP..end {
            gemm(
                1.0,
                MatRef::row_major(&grad_out[i * g.oc * p..(i + 1) * g.oc * p], g.oc, p),
                MatRef::transposed(&cols[i * k * p..(i + 1) * k * p], k, p),
                1.0,
                &mut acc,
            );
        }
        acc
    });
    let mut dw = vec![0.0f32; wlen];
    for part in &partials {
        dw.iter_mut().zip(part).for_each(|(a, b)| *a += b);
    }
    let db = want_bias.then(|| {
        let mut sums = vec![0.0f64; g.oc];
        for i in 0..g.n {
            for (ch, s) in sums.iter_mut().enumerate() {
                let start = (i * g.oc + ch) * p;
                *s += grad_out[start..start + p].iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        sums.into_iter().map(|v| v as f32).collect()
    });
    (dw, db)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Returns `(output, flat input index of each window's maximum)`. Ties go to
/// the first element in row-major window order.
pub(crate) fn max_pool_forward(g: &PoolGeom, input: &[f32]) -> (Vec<f32>, Vec<u32>) {
    let planes = g.n * g.c;
    let op = g.oh * g.ow;
    let mut out = vec![0.0f32; planes * op];
    let mut arg = vec![0u32; planes * op];
    par::for_each_chunk_pair(&mut out, op, &mut arg, op, |pi, o, a| {
        let base = pi * g.h * g.w;
        let plane = &input[base..base + g.h * g.w];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0usize;
                let mut first = true;
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let idx = (oy * g.stride + ky) * g.w + ox * g.stride + kx;
                        let v = plane[idx];
                        if first || v > best {
                            best = v;
                            best_idx = idx;
                            first = false;
                        }
                    }
                }
                o[oy * g.ow + ox] = best;
                a[oy * g.ow + ox] = (base + best_idx) as u32;
            }
        }
    });
    (out, arg)
}

pub(crate) fn max_pool_backward(input_len: usize, grad_out: &[f32], argmax: &[u32]) -> Vec<f32> {
    let mut dx = vec![0.0f32; input_len];
    for (g, &i) in grad_out.iter().zip(argmax) {
        dx[i as usize] += g;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(n: usize, c: usize, h: usize, w: usize, oc: usize, k: usize, stride: usize, pad: usize) -> ConvGeom {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        ConvGeom { n, c, h, w, oc, kh: k, kw: k, stride, pad, oh, ow }
    }

    fn naive_conv(g: &ConvGeom, x: &[f32], wt: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0f32; g.n * g.oc * g.oh * g.ow];
        for n in 0..g.n {
            for o in 0..g.oc {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut s = 0.0f64;
                        for c in 0..g.c {
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    let xv = x[((n * g.c + c) * g.h + iy as usize) * g.w + ix as usize];
                                    let wv = wt[((o * g.c + c) * g.kh + ky) * g.kw + kx];
                                    s += (xv * wv) as f64;
                                }
                            }
                        }
                        out[((n * g.oc + o) * g.oh + oy) * g.ow + ox] = s as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let g = geom(3, 2, 7, 6, 4, 3, 2, 1);
        let x: Vec<f32> = (0..g.n * g.c * g.h * g.w).map(|i| ((i * 37 % 11) as f32 - 5.0) * 0.1).collect();
        let w: Vec<f32> = (0..g.oc * g.patch_len()).map(|i| ((i * 13 % 7) as f32 - 3.0) * 0.2).collect();
        let (out, _) = conv2d_forward(&g, &x, &w, None);
        let want = naive_conv(&g, &x, &w);
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn conv_matches_direct_loops_across_geometries() {
        for &(h, w, k, stride, pad) in &[(5, 5, 3, 1, 0), (6, 4, 3, 1, 2), (7, 9, 2, 3, 1), (4, 4, 5, 1, 2), (5, 6, 3, 2, 2)] {
            let g = geom(2, 2, h, w, 3, k, stride, pad);
            let x: Vec<f32> = (0..g.n * g.c * g.h * g.w).map(|i| ((i * 29 % 17) as f32 - 8.0) * 0.1).collect();
            let wt: Vec<f32> = (0..g.oc * g.patch_len()).map(|i| ((i * 11 % 5) as f32 - 2.0) * 0.3).collect();
            let (out, _) = conv2d_forward(&g, &x, &wt, None);
            let want = naive_conv(&g, &x, &wt);
            for (a, b) in out.iter().zip(&want) {
                assert!((a - b).abs() < 1e-4, "{h}x{w} k{k} s{stride} p{pad}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        for &(h, w, k, stride, pad) in &[(5, 5, 3, 1, 1), (7, 6, 3, 2, 2), (4, 4, 5, 1, 2)] {
            let g = geom(1, 2, h, w, 1, k, stride, pad);
            let x: Vec<f32> = (0..g.c * h * w).map(|i| (i % 7) as f32 - 3.0).collect();
            let y: Vec<f32> = (0..g.patch_len() * g.out_pixels()).map(|i| (i % 5) as f32 - 2.0).collect();
            let mut cols = vec![0.0; y.len()];
            im2col(&g, &x, &mut cols);
            let mut back = vec![0.0; x.len()];
            col2im(&g, &y, &mut back);
            let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| (a * b) as f64).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| (a * b) as f64).sum();
            assert_eq!(lhs, rhs);
        }
    }

    #[test]
    fn pool_picks_first_maximum() {
        let g = PoolGeom { n: 1, c: 1, h: 2, w: 2, k: 2, stride: 2, oh: 1, ow: 1 };
        let (out, arg) = max_pool_forward(&g, &[3.0, 3.0, 1.0, 2.0]);
        assert_eq!(out, vec![3.0]);
        assert_eq!(arg, vec![0]);
    }
}
