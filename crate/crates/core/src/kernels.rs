//! Raw numeric kernels shared by the forward and backward rules of the tape.

use alloc::vec;
use alloc::vec::Vec;

/// Strided matrix view used by [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> Mat<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        Mat { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `rows x cols` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Mat { data, rs: 1, cs: cols }
    }
}

/// `c = alpha * a(m x k) * b(k x n) + beta * c`, with `c` row-major `m x n`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: Mat, b: Mat, beta: f64, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    assert!((m - 1) * a.rs + (k - 1) * a.cs < a.data.len());
    assert!((k - 1) * b.rs + (n - 1) * b.cs < b.data.len());
    // SAFETY: the asserts above bound every index the kernel touches for the
    // given extents and strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of one 2-D convolution over a single image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfolds `c_in x h x w` into a `(c_in*k*k) x (h_out*w_out)` column block
/// with zero padding. Rows of `cols` are `ld` apart, so several images can
/// share one wide column matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64], ld: usize) {
    let ncol = g.col_cols();
    let (hp, wp) = (g.pad as isize, g.pad as isize);
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ld..row * ld + ncol];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - hp;
                    let out_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - wp;
                        *o = if ix < 0 || ix >= g.w as isize {
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

/// Adjoint of [`im2col`]: accumulates column gradients back into the image gradient.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64], ld: usize) {
    let (hp, wp) = (g.pad as isize, g.pad as isize);
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ld..];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - hp;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - wp;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Half-open input range pooled into output cell `i` of `out` cells over an input of extent `n`.
///
/// Bins tile the input exactly when `out <= n`; when `out > n` each bin holds
/// the single cell `floor(i*n/out)`.
pub fn pool_bin(i: usize, n: usize, out: usize) -> (usize, usize) {
    let start = i * n / out;
    let end = ((i + 1) * n / out).max(start + 1);
    (start, end)
}

/// Source index for nearest-neighbour upsampling of `n` cells to `out` cells.
pub fn nearest_src(i: usize, n: usize, out: usize) -> usize {
    i * n / out
}

/// Per-plane adaptive average pooling over the last two axes.
pub(crate) fn adaptive_pool_forward(x: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; planes * oh * ow];
    let rows: Vec<_> = (0..oh).map(|i| pool_bin(i, h, oh)).collect();
    let cols: Vec<_> = (0..ow).map(|j| pool_bin(j, w, ow)).collect();
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (i, &(r0, r1)) in rows.iter().enumerate() {
            for (j, &(c0, c1)) in cols.iter().enumerate() {
                let mut s = 0.0;
                for r in r0..r1 {
                    s += src[r * w + c0..r * w + c1].iter().sum::<f64>();
                }
                dst[i * ow + j] = s / ((r1 - r0) * (c1 - c0)) as f64;
            }
        }
    }
    out
}

pub(crate) fn adaptive_pool_backward(dy: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut dx = vec![0.0; planes * h * w];
    let rows: Vec<_> = (0..oh).map(|i| pool_bin(i, h, oh)).collect();
    let cols: Vec<_> = (0..ow).map(|j| pool_bin(j, w, ow)).collect();
    for p in 0..planes {
        let g = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (i, &(r0, r1)) in rows.iter().enumerate() {
            for (j, &(c0, c1)) in cols.iter().enumerate() {
                let v = g[i * ow + j] / ((r1 - r0) * (c1 - c0)) as f64;
                for r in r0..r1 {
                    for d in &mut dst[r * w + c0..r * w + c1] {
                        *d += v;
                    }
                }
            }
        }
    }
    dx
}

/// Broadcast index maps: for every output element, the flat offset into `a` and into `b`.
#[derive(Clone, Debug)]
pub(crate) struct Broadcast {
    pub out_shape: Vec<usize>,
    pub a_idx: Vec<usize>,
    pub b_idx: Vec<usize>,
}

/// Broadcast shape of `a` and `b` (numpy rules restricted to equal-or-1 extents).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
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

/// Flat source offsets of `input` (broadcast against `out_shape`) for each output element.
pub(crate) fn broadcast_offsets(input: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let padded: Vec<usize> = (0..rank)
        .map(|i| if i + input.len() >= rank { input[i + input.len() - rank] } else { 1 })
        .collect();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        strides[i] = if padded[i] == 1 { 0 } else { acc };
        acc *= padded[i];
    }
    let n: usize = out_shape.iter().product();
    let mut offsets = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        offsets.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    offsets
}

impl Broadcast {
    pub fn new(a: &[usize], b: &[usize]) -> Option<Self> {
        let out_shape = broadcast_shape(a, b)?;
        let a_idx = broadcast_offsets(a, &out_shape);
        let b_idx = broadcast_offsets(b, &out_shape);
        Some(Broadcast { out_shape, a_idx, b_idx })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins_tile_when_downsampling() {
        for n in 1..20 {
            for out in 1..=n {
                let mut covered = vec![0; n];
                for i in 0..out {
                    let (s, e) = pool_bin(i, n, out);
                    assert!(s < e);
                    for c in &mut covered[s..e] {
                        *c += 1;
                    }
                }
                assert!(covered.iter().all(|&c| c == 1), "n={n} out={out}");
            }
        }
    }

    #[test]
    fn upsampling_bins_are_single_cells() {
        for i in 0..4 {
            let (s, e) = pool_bin(i, 2, 4);
            assert_eq!(e - s, 1);
            assert_eq!(s, nearest_src(i, 2, 4));
        }
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 1, 3], &[4, 1]), Some(vec![2, 4, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[3, 3]), None);
        assert_eq!(broadcast_offsets(&[3, 1], &[3, 2]), vec![0, 0, 1, 1, 2, 2]);
        assert_eq!(broadcast_offsets(&[2], &[3, 2]), vec![0, 1, 0, 1, 0, 1]);
    }

    #[test]
    fn gemm_matches_naive() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3x2
        let mut c = [0.0; 4];
        gemm(2, 3, 2, 1.0, Mat::row_major(&a, 3), Mat::row_major(&b, 2), 0.0, &mut c);
        assert_eq!(c, [1.0 - 2.0 + 1.5, 4.0 + 3.0, 4.0 - 5.0 + 3.0, 10.0 + 6.0]);
        // a^T (3x2) * a (2x3)
        let mut d = [0.0; 9];
        gemm(3, 2, 3, 1.0, Mat::transposed(&a, 3), Mat::row_major(&a, 3), 0.0, &mut d);
        assert_eq!(d[0], 1.0 + 16.0);
        assert_eq!(d[5], 2.0 * 3.0 + 5.0 * 6.0);
    }
}
