//! Raw buffer kernels behind the graph ops. Everything here works on flat
//! row-major slices; shape checking happens in the graph layer.

/// Row/column strides of a matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct Layout {
    pub rs: isize,
    pub cs: isize,
}

impl Layout {
    /// Row-major matrix with `cols` columns.
    pub fn rows(cols: usize) -> Self {
        Layout { rs: cols as isize, cs: 1 }
    }

    /// Transposed view of a row-major matrix that has `cols` columns.
    pub fn trans(cols: usize) -> Self {
        Layout { rs: 1, cs: cols as isize }
    }
}

/// `c = a·b + beta·c` for an `m×k` by `k×n` product; `c` is row-major `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    la: Layout,
    b: &[f32],
    lb: Layout,
    beta: f32,
    c: &mut [f32],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the strides describe in-bounds views of `a` and `b`; every
    // caller derives them from buffer lengths checked by the graph layer.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

/// Unfolds `x` into a `(cin·k·k) × (n·ho·wo)` column matrix.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let plane = g.ho * g.wo;
    let ncols = g.cols();
    let mut cols = vec![0.0f32; g.rows() * ncols];
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (c * g.k + ky) * g.k + kx;
                let row = &mut cols[r * ncols..(r + 1) * ncols];
                for b in 0..g.n {
                    let src = &x[(b * g.cin + c) * g.h * g.w..(b * g.cin + c + 1) * g.h * g.w];
                    let dst = &mut row[b * plane..(b + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                        let (lo, hi) = valid_outputs(g, kx);
                        if g.stride == 1 {
                            drow[lo..hi].copy_from_slice(&srow[lo + kx - g.pad..hi + kx - g.pad]);
                        } else {
                            for ox in lo..hi {
                                drow[ox] = srow[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let plane = g.ho * g.wo;
    let ncols = g.cols();
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (c * g.k + ky) * g.k + kx;
                let row = &cols[r * ncols..(r + 1) * ncols];
                for b in 0..g.n {
                    let dst = &mut dx[(b * g.cin + c) * g.h * g.w..(b * g.cin + c + 1) * g.h * g.w];
                    let src = &row[b * plane..(b + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let srow = &src[oy * g.wo..(oy + 1) * g.wo];
                        let (lo, hi) = valid_outputs(g, kx);
                        if g.stride == 1 {
                            let d = &mut drow[lo + kx - g.pad..hi + kx - g.pad];
                            d.iter_mut().zip(&srow[lo..hi]).for_each(|(d, s)| *d += s);
                        } else {
                            for ox in lo..hi {
                                drow[ox * g.stride + kx - g.pad] += srow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `lo..hi` whose tap `kx` lands inside the input row.
fn valid_outputs(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = if g.pad > kx { (g.pad - kx).div_ceil(g.stride) } else { 0 };
    let hi = (g.w + g.pad).saturating_sub(kx).div_ceil(g.stride).min(g.wo);
    (lo, hi.max(lo))
}

/// `[n, c, p]` to `[c, n·p]`.
pub(crate) fn batch_to_channel_major(x: &[f32], n: usize, c: usize, p: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let src = &x[(b * c + ch) * p..(b * c + ch + 1) * p];
            out[ch * n * p + b * p..ch * n * p + (b + 1) * p].copy_from_slice(src);
        }
    }
    out
}

/// `[c, n·p]` to `[n, c, p]`.
pub(crate) fn channel_to_batch_major(x: &[f32], n: usize, c: usize, p: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[(b * c + ch) * p..(b * c + ch + 1) * p]
                .copy_from_slice(&x[ch * n * p + b * p..ch * n * p + (b + 1) * p]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|v| v as f32 * 0.5 - 2.0).collect();
        let b: Vec<f32> = (0..k * n).map(|v| (v % 7) as f32 - 3.0).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, Layout::rows(k), &b, Layout::rows(n), 0.0, &mut c);
        for i in 0..m {
            for j in 0..n {
                let want: f32 = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-4);
            }
        }
        // a^T stored as k×m row-major
        let at: Vec<f32> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, &at, Layout::trans(m), &b, Layout::rows(n), 0.0, &mut c2);
        assert_eq!(c, c2);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for any x, y.
        let g = ConvGeom { n: 2, cin: 2, h: 5, w: 4, k: 3, stride: 2, pad: 1, ho: 3, wo: 2 };
        let x: Vec<f32> = (0..g.n * g.cin * g.h * g.w).map(|v| ((v * 37) % 11) as f32 - 5.0).collect();
        let y: Vec<f32> = (0..g.rows() * g.cols()).map(|v| ((v * 13) % 7) as f32 - 3.0).collect();
        let cols = im2col(&x, &g);
        let lhs: f32 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; x.len()];
        col2im(&y, &g, &mut dx);
        let rhs: f32 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn layout_shuffles_invert() {
        let x: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let cm = batch_to_channel_major(&x, 2, 3, 4);
        assert_eq!(channel_to_batch_major(&cm, 2, 3, 4), x);
    }
}
