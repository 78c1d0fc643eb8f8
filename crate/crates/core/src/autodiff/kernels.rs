//! Forward and backward kernels for the shaped ops.
//!
//! Every kernel fixes its accumulation order. Batch-parallel kernels write
//! disjoint output slices and reduce per-sample partials serially, so results
//! do not depend on the thread count.

use rayon::prelude::*;

use crate::tensor::strides;

/// `(m,k) x (k,n) -> (m,n)`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Gradients of `matmul` with respect to both operands.
pub fn matmul_backward(
    a: &[f64],
    b: &[f64],
    grad: &[f64],
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<f64>, Vec<f64>) {
    // dA = dC . B^T
    let mut ga = vec![0.0; m * k];
    for i in 0..m {
        for p in 0..k {
            let mut acc = 0.0;
            for j in 0..n {
                acc += grad[i * n + j] * b[p * n + j];
            }
            ga[i * k + p] = acc;
        }
    }
    // dB = A^T . dC
    let mut gb = vec![0.0; k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let grow = &grad[i * n..(i + 1) * n];
            for (o, &g) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += av * g;
            }
        }
    }
    (ga, gb)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn in_plane(&self) -> usize {
        self.h * self.w
    }
    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

/// Input position feeding output `o` through kernel tap `k`, if inside the image.
#[inline]
fn tap(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    let pos = (o * stride + k) as isize - pad as isize;
    (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
}

/// Cross-correlation. `x: (n,cin,h,w)`, `w: (cout,cin,kh,kw)`.
///
/// Each output element accumulates bias first, then taps in `(ci, ky, kx)` order.
pub fn conv2d(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.cout * g.out_plane()];
    out.par_chunks_mut(g.cout * g.out_plane())
        .enumerate()
        .for_each(|(n, out_n)| {
            let x_n = &x[n * g.cin * g.in_plane()..(n + 1) * g.cin * g.in_plane()];
            for co in 0..g.cout {
                let plane = &mut out_n[co * g.out_plane()..(co + 1) * g.out_plane()];
                if let Some(b) = bias {
                    plane.iter_mut().for_each(|v| *v = b[co]);
                }
                for ci in 0..g.cin {
                    let xp = &x_n[ci * g.in_plane()..(ci + 1) * g.in_plane()];
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let wv = w[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                            for oy in 0..g.ho {
                                let Some(iy) = tap(oy, ky, g.stride, g.pad, g.h) else {
                                    continue;
                                };
                                for ox in 0..g.wo {
                                    if let Some(ix) = tap(ox, kx, g.stride, g.pad, g.w) {
                                        plane[oy * g.wo + ox] += wv * xp[iy * g.w + ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Returns `(dx, dw, db)` for `conv2d`.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let wlen = w.len();
    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let x_n = &x[n * g.cin * g.in_plane()..(n + 1) * g.cin * g.in_plane()];
            let dy_n = &dy[n * g.cout * g.out_plane()..(n + 1) * g.cout * g.out_plane()];
            let mut dx_n = vec![0.0; g.cin * g.in_plane()];
            let mut dw_n = vec![0.0; wlen];
            for co in 0..g.cout {
                let dyp = &dy_n[co * g.out_plane()..(co + 1) * g.out_plane()];
                for ci in 0..g.cin {
                    let xp = &x_n[ci * g.in_plane()..(ci + 1) * g.in_plane()];
                    let dxp = &mut dx_n[ci * g.in_plane()..(ci + 1) * g.in_plane()];
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let widx = ((co * g.cin + ci) * g.kh + ky) * g.kw + kx;
                            let wv = w[widx];
                            let mut acc = 0.0;
                            for oy in 0..g.ho {
                                let Some(iy) = tap(oy, ky, g.stride, g.pad, g.h) else {
                                    continue;
                                };
                                for ox in 0..g.wo {
                                    if let Some(ix) = tap(ox, kx, g.stride, g.pad, g.w) {
                                        let d = dyp[oy * g.wo + ox];
                                        acc += xp[iy * g.w + ix] * d;
                                        dxp[iy * g.w + ix] += wv * d;
                                    }
                                }
                            }
                            dw_n[widx] += acc;
                        }
                    }
                }
            }
            (dx_n, dw_n)
        })
        .collect();

    let mut dx = Vec::with_capacity(x.len());
    let mut dw = vec![0.0; wlen];
    for (dx_n, dw_n) in &per_sample {
        dx.extend_from_slice(dx_n);
        for (a, b) in dw.iter_mut().zip(dw_n) {
            *a += b;
        }
    }
    let db = channel_sums(dy, g.n, g.cout, g.out_plane());
    (dx, dw, db)
}

/// Transposed convolution. `x: (n,cin,h,w)`, `w: (cin,cout,kh,kw)`,
/// output extent `(h-1)*stride - 2*pad + kh`.
pub fn conv2d_transpose(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.cout * g.out_plane()];
    out.par_chunks_mut(g.cout * g.out_plane())
        .enumerate()
        .for_each(|(n, out_n)| {
            let x_n = &x[n * g.cin * g.in_plane()..(n + 1) * g.cin * g.in_plane()];
            for co in 0..g.cout {
                let plane = &mut out_n[co * g.out_plane()..(co + 1) * g.out_plane()];
                if let Some(b) = bias {
                    plane.iter_mut().for_each(|v| *v = b[co]);
                }
                for ci in 0..g.cin {
                    let xp = &x_n[ci * g.in_plane()..(ci + 1) * g.in_plane()];
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let wv = w[((ci * g.cout + co) * g.kh + ky) * g.kw + kx];
                            // output (oy, ox) receives input (iy, ix) when oy = iy*s + ky - p
                            for iy in 0..g.h {
                                let Some(oy) = tap(iy, ky, g.stride, g.pad, g.ho) else {
                                    continue;
                                };
                                for ix in 0..g.w {
                                    if let Some(ox) = tap(ix, kx, g.stride, g.pad, g.wo) {
                                        plane[oy * g.wo + ox] += wv * xp[iy * g.w + ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Returns `(dx, dw, db)` for `conv2d_transpose`.
pub fn conv2d_transpose_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let wlen = w.len();
    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let x_n = &x[n * g.cin * g.in_plane()..(n + 1) * g.cin * g.in_plane()];
            let dy_n = &dy[n * g.cout * g.out_plane()..(n + 1) * g.cout * g.out_plane()];
            let mut dx_n = vec![0.0; g.cin * g.in_plane()];
            let mut dw_n = vec![0.0; wlen];
            for ci in 0..g.cin {
                let xp = &x_n[ci * g.in_plane()..(ci + 1) * g.in_plane()];
                let dxp = &mut dx_n[ci * g.in_plane()..(ci + 1) * g.in_plane()];
                for co in 0..g.cout {
                    let dyp = &dy_n[co * g.out_plane()..(co + 1) * g.out_plane()];
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let widx = ((ci * g.cout + co) * g.kh + ky) * g.kw + kx;
                            let wv = w[widx];
                            let mut acc = 0.0;
                            for iy in 0..g.h {
                                let Some(oy) = tap(iy, ky, g.stride, g.pad, g.ho) else {
                                    continue;
                                };
                                for ix in 0..g.w {
                                    if let Some(ox) = tap(ix, kx, g.stride, g.pad, g.wo) {
                                        let d = dyp[oy * g.wo + ox];
                                        acc += xp[iy * g.w + ix] * d;
                                        dxp[iy * g.w + ix] += wv * d;
                                    }
                                }
                            }
                            dw_n[widx] += acc;
                        }
                    }
                }
            }
            (dx_n, dw_n)
        })
        .collect();

    let mut dx = Vec::with_capacity(x.len());
    let mut dw = vec![0.0; wlen];
    for (dx_n, dw_n) in &per_sample {
        dx.extend_from_slice(dx_n);
        for (a, b) in dw.iter_mut().zip(dw_n) {
            *a += b;
        }
    }
    let db = channel_sums(dy, g.n, g.cout, g.out_plane());
    (dx, dw, db)
}

fn channel_sums(dy: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut db = vec![0.0; c];
    for s in 0..n {
        for (ch, acc) in db.iter_mut().enumerate() {
            let off = (s * c + ch) * plane;
            *acc += dy[off..off + plane].iter().sum::<f64>();
        }
    }
    db
}

pub fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// For each element of `out_shape`, the flat index of the source element
/// under right-aligned broadcasting from `in_shape`.
pub fn broadcast_index_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let lead = out_shape.len() - in_shape.len();
    let in_strides = strides(in_shape);
    let src_strides: Vec<usize> = (0..out_shape.len())
        .map(|d| {
            if d < lead || in_shape[d - lead] == 1 {
                0
            } else {
                in_strides[d - lead]
            }
        })
        .collect();
    let n: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum());
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

/// `(outer, axis, inner)` decomposition of `shape` around `axis`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn permute_transposes() {
        let (d, s) = permute(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3], &[1, 0]);
        assert_eq!(s, vec![3, 2]);
        assert_eq!(d, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn broadcast_map_row_vector() {
        assert_eq!(broadcast_index_map(&[3], &[2, 3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_index_map(&[2, 1], &[2, 3]), vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn transpose_conv_output_extent() {
        // 2x2 input, k=4 s=2 p=1 -> 4x4
        let g = ConvGeom {
            n: 1,
            cin: 1,
            h: 2,
            w: 2,
            cout: 1,
            kh: 4,
            kw: 4,
            stride: 2,
            pad: 1,
            ho: 4,
            wo: 4,
        };
        let out = conv2d_transpose(&[1.0; 4], &[1.0; 16], None, g);
        assert_eq!(out.len(), 16);
        // every output pixel is hit by exactly 2x2 = 4 input taps with k=4, s=2
        // except the border which sees fewer.
        assert_eq!(out[5], 4.0);
        assert_eq!(out[0], 1.0);
    }
}
