//! Inference-only resampling and smoothing.

use super::Tensor;
use crate::error::{Result, SirError};

/// Source coordinate for half-pixel-center sampling, clamped to the input.
fn source_coord(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, s - i0 as f64)
}

/// Bilinear resampling with half-pixel centers ("align corners = false").
pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [n, c, h, w] = input.shape();
    if out_h == 0 || out_w == 0 {
        return Err(SirError::invalid("bilinear_resize", "output extent must be at least 1"));
    }
    if h == 0 || w == 0 {
        return Err(SirError::invalid("bilinear_resize", "input has an empty spatial extent"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(input.clone().with_grad(false));
    }
    let rows: Vec<_> = (0..out_h).map(|y| source_coord(y, h, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|x| source_coord(x, w, out_w)).collect();
    let src = input.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in src.chunks_exact(h * w) {
        for &(y0, y1, fy) in &rows {
            let (r0, r1) = (&plane[y0 * w..][..w], &plane[y1 * w..][..w]);
            for &(x0, x1, fx) in &cols {
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bottom = r1[x0] + (r1[x1] - r1[x0]) * fx;
                out.push(top + (bottom - top) * fy);
            }
        }
    }
    Tensor::new([n, c, out_h, out_w], out)
}

/// Discrete Gaussian taps on `[-r, r]` with `r = ceil(3σ)`, normalized to sum 1.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(SirError::invalid("gaussian_smooth", format!("sigma must be positive, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / total).collect())
}

fn smooth_line(src: &[f64], dst: &mut [f64], kernel: &[f64], stride: usize, len: usize) {
    let radius = (kernel.len() / 2) as isize;
    for i in 0..len {
        let mut acc = 0.0;
        for (t, k) in kernel.iter().enumerate() {
            let j = (i as isize + t as isize - radius).clamp(0, len as isize - 1) as usize;
            acc += k * src[j * stride];
        }
        dst[i * stride] = acc;
    }
}

/// Separable Gaussian blur of every plane with replicate padding.
pub fn gaussian_smooth(input: &Tensor, sigma: f64) -> Result<Tensor> {
    let kernel = gaussian_kernel(sigma)?;
    let [_, _, h, w] = input.shape();
    let mut tmp = input.data().to_vec();
    let mut out = input.data().to_vec();
    for (src, (mid, dst)) in input
        .data()
        .chunks_exact(h * w)
        .zip(tmp.chunks_exact_mut(h * w).zip(out.chunks_exact_mut(h * w)))
    {
        for y in 0..h {
            smooth_line(&src[y * w..], &mut mid[y * w..], &kernel, 1, w);
        }
        for x in 0..w {
            smooth_line(&mid[x..], &mut dst[x..], &kernel, w, h);
        }
    }
    // A convex combination can round just past its inputs; clip to the input range.
    let (lo, hi) = (input.min(), input.max());
    for v in &mut out {
        *v = v.clamp(lo, hi);
    }
    Tensor::new(input.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_maps_are_fixed_points() {
        let t = Tensor::full([1, 1, 7, 9], 0.37);
        let up = bilinear_resize(&t, 20, 13).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.37).abs() < 1e-12));
        let s = gaussian_smooth(&t, 2.5).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn single_pixel_broadcasts() {
        let up = bilinear_resize(&Tensor::scalar(4.25), 5, 3).unwrap();
        assert_eq!(up.shape(), [1, 1, 5, 3]);
        assert!(up.data().iter().all(|&v| v == 4.25));
    }

    #[test]
    fn two_by_two_to_four_by_four_matches_formula() {
        let t = Tensor::new([1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let up = bilinear_resize(&t, 4, 4).unwrap();
        // Scalar oracle: s = (d + 0.5) * in/out - 0.5, clamped, then lerp.
        let oracle = |d: usize| -> f64 {
            let s = ((d as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0);
            let (i0, i1) = (s.floor() as usize, (s.floor() as usize + 1).min(1));
            let v = [0.0, 1.0];
            v[i0] + (v[i1] - v[i0]) * (s - i0 as f64)
        };
        let row: Vec<f64> = (0..4).map(oracle).collect();
        assert_eq!(row, vec![0.0, 0.25, 0.75, 1.0]);
        for y in 0..4 {
            for x in 0..4 {
                assert!((up.at(0, 0, y, x) - row[x]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn impulse_reproduces_kernel_table() {
        let sigma = 1.5;
        let kernel = gaussian_kernel(sigma).unwrap();
        assert_eq!(kernel.len(), 2 * 5 + 1);
        let size = 31;
        let mid = size / 2;
        let mut t = Tensor::zeros([1, 1, size, size]);
        let idx = t.index(0, 0, mid, mid);
        t.data_mut()[idx] = 1.0;
        // Clipping to [0, 1] leaves interior values untouched.
        let s = gaussian_smooth(&t, sigma).unwrap();
        let r = kernel.len() / 2;
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = (y as isize - mid as isize, x as isize - mid as isize);
                let expected = if dy.unsigned_abs() <= r && dx.unsigned_abs() <= r {
                    kernel[(dy + r as isize) as usize] * kernel[(dx + r as isize) as usize]
                } else {
                    0.0
                };
                assert!((s.at(0, 0, y, x) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn narrow_kernel_is_near_identity() {
        let sigma = 0.3;
        let kernel = gaussian_kernel(sigma).unwrap();
        assert_eq!(kernel.len(), 3);
        let tail = 1.0 - kernel[1] * kernel[1];
        let t = Tensor::from_fn([1, 1, 6, 6], |_, _, y, x| ((y * 7 + x * 3) % 5) as f64 / 4.0);
        let s = gaussian_smooth(&t, sigma).unwrap();
        // Each output moves by at most the off-center mass times the value range.
        assert!(s.max_abs_diff(&t) <= tail * (t.max() - t.min()) + 1e-15);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(gaussian_kernel(0.0).is_err());
        assert!(bilinear_resize(&Tensor::scalar(1.0), 0, 3).is_err());
    }
}
