//! Dense numeric kernels used by the layers.
//!
//! Convolution activations inside a [`ConvNet`](super::ConvNet) are laid out
//! channel-major over the whole batch (`[C, N, H, W]`), so a single matrix
//! product covers every sample of a batch.

/// `c = a · b + beta · c` on strided row-major views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa, "gemm: a too short");
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb, "gemm: b too short");
    }
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc, "gemm: c too short");
    // SAFETY: every index touched by sgemm lies inside the asserted extents.
    unsafe {
        matrixmultiply::sgemm(
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
            rsc as isize,
            csc as isize,
        );
    }
}

/// Unfold a `[C, N, H, W]` tensor into `[C·k·k, N·H·W]` patches for a
/// stride-1, same-padded `k×k` convolution.
pub(crate) fn im2col(input: &[f32], c: usize, n: usize, h: usize, w: usize, k: usize) -> Vec<f32> {
    let plane = h * w;
    let m = n * plane;
    let pad = (k / 2) as isize;
    let mut cols = vec![0.0f32; c * k * k * m];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * m..(row + 1) * m];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for ni in 0..n {
                    let src = &input[(ci * n + ni) * plane..(ci * n + ni + 1) * plane];
                    let d = &mut dst[ni * plane..(ni + 1) * plane];
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize || x0 >= x1 {
                            continue;
                        }
                        let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                        let sx0 = (x0 as isize + dx) as usize;
                        d[y * w + x0..y * w + x1].copy_from_slice(&srow[sx0..sx0 + (x1 - x0)]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: fold patch gradients back onto the input grid.
pub(crate) fn col2im(cols: &[f32], c: usize, n: usize, h: usize, w: usize, k: usize) -> Vec<f32> {
    let plane = h * w;
    let m = n * plane;
    let pad = (k / 2) as isize;
    let mut out = vec![0.0f32; c * m];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * m..(row + 1) * m];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for ni in 0..n {
                    let o = &mut out[(ci * n + ni) * plane..(ci * n + ni + 1) * plane];
                    let s = &src[ni * plane..(ni + 1) * plane];
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize || x0 >= x1 {
                            continue;
                        }
                        let sy = sy as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        let orow = &mut o[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        for (dst, v) in orow.iter_mut().zip(&s[y * w + x0..y * w + x1]) {
                            *dst += *v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// 2×2 stride-2 max pooling over `planes` independent `h×w` planes.
/// Returns the pooled values and, per output cell, the flat input index of
/// the winning element.
pub(crate) fn maxpool2(input: &[f32], planes: usize, h: usize, w: usize) -> (Vec<f32>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + (2 * y) * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = base + (2 * y + dy) * w + 2 * x + dx;
                    if input[cand] > input[best] {
                        best = cand;
                    }
                }
                out.push(input[best]);
                idx.push(best as u32);
            }
        }
    }
    (out, idx)
}

pub(crate) fn relu_inplace(x: &mut [f32]) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Numerically stable softmax of one row.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut out: Vec<f32> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f32 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Mean softmax cross-entropy over a batch of rows; returns the loss and its
/// gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &[f32], labels: &[usize], classes: usize) -> (f32, Vec<f32>) {
    let n = labels.len();
    assert_eq!(logits.len(), n * classes);
    if n == 0 {
        return (0.0, Vec::new());
    }
    let mut grad = vec![0.0f32; logits.len()];
    let mut loss = 0.0f64;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits[i * classes..(i + 1) * classes];
        let p = softmax(row);
        loss -= (p[y].max(1e-30) as f64).ln();
        let g = &mut grad[i * classes..(i + 1) * classes];
        for (j, gj) in g.iter_mut().enumerate() {
            *gj = (p[j] - if j == y { 1.0 } else { 0.0 }) / n as f32;
        }
    }
    ((loss / n as f64) as f32, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(
        input: &[f32],
        c: usize,
        h: usize,
        w: usize,
        weight: &[f32],
        out_c: usize,
        k: usize,
    ) -> Vec<f32> {
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; out_c * h * w];
        for o in 0..out_c {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - pad;
                                let sx = x as isize + kx as isize - pad;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += weight[((o * c + ci) * k + ky) * k + kx]
                                    * input[(ci * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    out[(o * h + y) * w + x] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_gemm_matches_direct_convolution() {
        let (c, h, w, k, oc) = (3, 5, 4, 3, 2);
        let input: Vec<f32> = (0..c * h * w)
            .map(|i| ((i * 7 % 11) as f32 - 5.0) / 3.0)
            .collect();
        let weight: Vec<f32> = (0..oc * c * k * k)
            .map(|i| ((i * 5 % 13) as f32 - 6.0) / 7.0)
            .collect();
        let cols = im2col(&input, c, 1, h, w, k);
        let mut out = vec![0.0; oc * h * w];
        gemm(
            oc,
            c * k * k,
            h * w,
            &weight,
            (c * k * k, 1),
            &cols,
            (h * w, 1),
            0.0,
            &mut out,
            (h * w, 1),
        );
        let expect = naive_conv(&input, c, h, w, &weight, oc, k);
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, n, h, w, k) = (2, 2, 4, 3, 3);
        let x: Vec<f32> = (0..c * n * h * w)
            .map(|i| (i as f32 * 0.37).sin())
            .collect();
        let y: Vec<f32> = (0..c * k * k * n * h * w)
            .map(|i| (i as f32 * 0.11).cos())
            .collect();
        let ax = im2col(&x, c, n, h, w, k);
        let aty = col2im(&y, c, n, h, w, k);
        let lhs: f32 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-3, "{lhs} vs {rhs}");
    }

    #[test]
    fn maxpool_picks_maximum() {
        let input = [1.0, 5.0, 2.0, 0.0, 3.0, 4.0, -1.0, 7.0];
        let (out, idx) = maxpool2(&input, 1, 2, 4);
        assert_eq!(out, vec![5.0, 7.0]);
        assert_eq!(idx, vec![1, 7]);
    }

    #[test]
    fn cross_entropy_gradient_rows_sum_to_zero() {
        let logits = [1.0, 2.0, 0.5, -1.0, 0.0, 3.0];
        let (loss, g) = softmax_cross_entropy(&logits, &[1, 2], 3);
        assert!(loss > 0.0);
        assert!((g[0] + g[1] + g[2]).abs() < 1e-6);
        assert!((g[3] + g[4] + g[5]).abs() < 1e-6);
    }
}
