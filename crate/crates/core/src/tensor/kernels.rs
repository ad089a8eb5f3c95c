//! Forward and backward kernels for convolution, activation and the
//! channel-wise cosine distance.
//!
//! Convolutions go through an im2col layout that spans the whole batch, so a
//! single matrix product covers every image: the column matrix has one row per
//! `(channel, ky, kx)` tap and one column per `(image, oy, ox)` output site.

use super::Tensor;
use crate::error::{Result, SirError};

/// Geometry shared by a convolution and its transpose.
///
/// `(h, w)` is the extent of the "dense" side (the conv2d input, or the
/// conv_transpose2d output) and `(ho, wo)` the extent of the strided side.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_dense: usize,
    pub h: usize,
    pub w: usize,
    pub c_strided: usize,
    pub ho: usize,
    pub wo: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    fn taps(&self) -> usize {
        self.c_dense * self.kh * self.kw
    }

    fn sites(&self) -> usize {
        self.ho * self.wo
    }
}

fn conv_out_extent(op: &'static str, len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if len + 2 * pad < k {
        return Err(SirError::shape(
            op,
            format!("padded extent {} smaller than kernel {k}", len + 2 * pad),
        ));
    }
    Ok((len + 2 * pad - k) / stride + 1)
}

fn check_bias(op: &'static str, bias: &Tensor, channels: usize) -> Result<()> {
    if bias.numel() != channels {
        return Err(SirError::shape(
            op,
            format!("bias has {} values, expected {channels}", bias.numel()),
        ));
    }
    Ok(())
}

pub(crate) fn conv2d_geom(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    const OP: &str = "conv2d";
    if stride == 0 {
        return Err(SirError::invalid(OP, "stride must be positive"));
    }
    let [n, ci, h, w] = input.shape();
    let [co, wci, kh, kw] = weight.shape();
    if ci != wci {
        return Err(SirError::shape(
            OP,
            format!("input has {ci} channels but weight {:?} expects {wci}", weight.shape()),
        ));
    }
    check_bias(OP, bias, co)?;
    let ho = conv_out_extent(OP, h, kh, stride, pad)?;
    let wo = conv_out_extent(OP, w, kw, stride, pad)?;
    Ok(ConvGeom {
        n,
        c_dense: ci,
        h,
        w,
        c_strided: co,
        ho,
        wo,
        kh,
        kw,
        stride,
        pad,
    })
}

pub(crate) fn conv_transpose2d_geom(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    const OP: &str = "conv_transpose2d";
    if stride == 0 {
        return Err(SirError::invalid(OP, "stride must be positive"));
    }
    let [n, ci, h, w] = input.shape();
    let [wci, co, kh, kw] = weight.shape();
    if ci != wci {
        return Err(SirError::shape(
            OP,
            format!("input has {ci} channels but weight {:?} expects {wci}", weight.shape()),
        ));
    }
    check_bias(OP, bias, co)?;
    let extent = |len: usize, k: usize| -> Result<usize> {
        let out = (len as i64 - 1) * stride as i64 - 2 * pad as i64 + k as i64;
        if len == 0 || out <= 0 {
            return Err(SirError::shape(OP, format!("non-positive output extent {out}")));
        }
        Ok(out as usize)
    };
    let oh = extent(h, kh)?;
    let ow = extent(w, kw)?;
    Ok(ConvGeom {
        n,
        c_dense: co,
        h: oh,
        w: ow,
        c_strided: ci,
        ho: h,
        wo: w,
        kh,
        kw,
        stride,
        pad,
    })
}

/// Gathers the dense-side tensor into a `[taps][n * sites]` matrix.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let sites = g.sites();
    let row_len = g.n * sites;
    let mut cols = vec![0.0; g.taps() * row_len];
    for c in 0..g.c_dense {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst_row = &mut cols[row * row_len..(row + 1) * row_len];
                for ni in 0..g.n {
                    let plane = &x[(ni * g.c_dense + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..][..g.w];
                        let dst = &mut dst_row[ni * sites + oy * g.wo..][..g.wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a `[taps][n * sites]` matrix back onto the dense side.
fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let sites = g.sites();
    let row_len = g.n * sites;
    let mut x = vec![0.0; g.n * g.c_dense * g.h * g.w];
    for c in 0..g.c_dense {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src_row = &cols[row * row_len..(row + 1) * row_len];
                for ni in 0..g.n {
                    let plane = &mut x[(ni * g.c_dense + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * g.w..][..g.w];
                        let src = &src_row[ni * sites + oy * g.wo..][..g.wo];
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Rearranges an `(n, c, sites)` tensor buffer into a `[c][n * sites]` matrix.
fn batch_to_rows(x: &[f64], n: usize, c: usize, sites: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[ci * n * sites + ni * sites..][..sites]
                .copy_from_slice(&x[(ni * c + ci) * sites..][..sites]);
        }
    }
    out
}

/// Inverse of [`batch_to_rows`].
fn rows_to_batch(rows: &[f64], n: usize, c: usize, sites: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[(ni * c + ci) * sites..][..sites]
                .copy_from_slice(&rows[ci * n * sites + ni * sites..][..sites]);
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

const MR: usize = 4;
const NR: usize = 8;

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
///
/// Both operands are packed into zero-padded `MR`- and `NR`-wide panels and
/// multiplied by a register-blocked micro-kernel. Every output element is
/// accumulated over `p = 0..k` in order and then added to `c`, so the result
/// does not depend on the blocking.
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let m_panels = m.div_ceil(MR);
    let n_panels = n.div_ceil(NR);

    let mut ap = vec![0.0; m_panels * k * MR];
    for ib in 0..m_panels {
        let panel = &mut ap[ib * k * MR..(ib + 1) * k * MR];
        for r in 0..MR.min(m - ib * MR) {
            let row = &a[(ib * MR + r) * k..][..k];
            for (p, &v) in row.iter().enumerate() {
                panel[p * MR + r] = v;
            }
        }
    }
    let mut bp = vec![0.0; n_panels * k * NR];
    for jb in 0..n_panels {
        let width = NR.min(n - jb * NR);
        let panel = &mut bp[jb * k * NR..(jb + 1) * k * NR];
        for p in 0..k {
            panel[p * NR..p * NR + width].copy_from_slice(&b[p * n + jb * NR..][..width]);
        }
    }

    for jb in 0..n_panels {
        let bpanel = &bp[jb * k * NR..(jb + 1) * k * NR];
        let width = NR.min(n - jb * NR);
        for ib in 0..m_panels {
            let apanel = &ap[ib * k * MR..(ib + 1) * k * MR];
            let acc = micro_kernel(apanel, bpanel);
            for r in 0..MR.min(m - ib * MR) {
                let crow = &mut c[(ib * MR + r) * n + jb * NR..][..width];
                for (cv, av) in crow.iter_mut().zip(&acc[r]) {
                    *cv += av;
                }
            }
        }
    }
}

#[inline(always)]
fn micro_kernel(apanel: &[f64], bpanel: &[f64]) -> [[f64; NR]; MR] {
    let mut acc = [[0.0; NR]; MR];
    for (av, bv) in apanel.chunks_exact(MR).zip(bpanel.chunks_exact(NR)) {
        let av: &[f64; MR] = av.try_into().expect("MR chunk");
        let bv: &[f64; NR] = bv.try_into().expect("NR chunk");
        for r in 0..MR {
            for j in 0..NR {
                acc[r][j] += av[r] * bv[j];
            }
        }
    }
    acc
}

/// `c[m×n] += aᵀ · b` where `a` is stored `[k×m]` and `b` is `[k×n]`.
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let at = transpose(&a[..k * m], k, m);
    gemm_nn(m, k, n, &at, b, c);
}

/// `c[m×n] += a · bᵀ` where `a` is `[m×k]` and `b` is stored `[n×k]`.
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let bt = transpose(&b[..n * k], n, k);
    gemm_nn(m, k, n, a, &bt, c);
}

fn add_bias(out: &mut [f64], bias: &[f64], n: usize, sites: usize) {
    let c = bias.len();
    for ni in 0..n {
        for (ci, b) in bias.iter().enumerate() {
            for v in &mut out[(ni * c + ci) * sites..][..sites] {
                *v += b;
            }
        }
    }
}

fn bias_grad(grad: &[f64], n: usize, c: usize, sites: usize) -> Vec<f64> {
    let mut db = vec![0.0; c];
    for ni in 0..n {
        for (ci, d) in db.iter_mut().enumerate() {
            *d += grad[(ni * c + ci) * sites..][..sites].iter().sum::<f64>();
        }
    }
    db
}

/// Cross-correlation of `input` (`n×ci×h×w`) with `weight` (`co×ci×kh×kw`).
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = conv2d_geom(input, weight, bias, stride, padding)?;
    Ok(conv2d_forward(input, weight, bias, &g))
}

pub(crate) fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, g: &ConvGeom) -> Tensor {
    let cols = im2col(input.data(), g);
    let row_len = g.n * g.sites();
    let mut rows = vec![0.0; g.c_strided * row_len];
    gemm_nn(g.c_strided, g.taps(), row_len, weight.data(), &cols, &mut rows);
    let mut out = rows_to_batch(&rows, g.n, g.c_strided, g.sites());
    add_bias(&mut out, bias.data(), g.n, g.sites());
    Tensor::new([g.n, g.c_strided, g.ho, g.wo], out).expect("conv2d output shape")
}

/// Gradients of conv2d with respect to `(input, weight, bias)`.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    g: &ConvGeom,
    need_input: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let sites = g.sites();
    let row_len = g.n * sites;
    let grad_rows = batch_to_rows(grad_out.data(), g.n, g.c_strided, sites);
    let cols = im2col(input.data(), g);

    let mut dw = vec![0.0; g.c_strided * g.taps()];
    gemm_nt(g.c_strided, row_len, g.taps(), &grad_rows, &cols, &mut dw);

    let dx = need_input.then(|| {
        let mut dcols = vec![0.0; g.taps() * row_len];
        gemm_tn(g.taps(), g.c_strided, row_len, weight.data(), &grad_rows, &mut dcols);
        Tensor::new(input.shape(), col2im(&dcols, g)).expect("conv2d input grad shape")
    });
    let db = bias_grad(grad_out.data(), g.n, g.c_strided, sites);
    (
        dx,
        Tensor::new(weight.shape(), dw).expect("conv2d weight grad shape"),
        Tensor::new([1, g.c_strided, 1, 1], db).expect("conv2d bias grad shape"),
    )
}

/// Transposed convolution: `input` is `n×ci×h×w`, `weight` is `ci×co×kh×kw`,
/// output extent `(h−1)·stride − 2·padding + kh`.
///
/// This is the adjoint of [`conv2d`] with the same weight tensor read as
/// `co_conv = ci`, `ci_conv = co`.
pub fn conv_transpose2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = conv_transpose2d_geom(input, weight, bias, stride, padding)?;
    Ok(conv_transpose2d_forward(input, weight, bias, &g))
}

pub(crate) fn conv_transpose2d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, g: &ConvGeom) -> Tensor {
    let sites = g.sites();
    let row_len = g.n * sites;
    let x_rows = batch_to_rows(input.data(), g.n, g.c_strided, sites);
    let mut cols = vec![0.0; g.taps() * row_len];
    gemm_tn(g.taps(), g.c_strided, row_len, weight.data(), &x_rows, &mut cols);
    let mut out = col2im(&cols, g);
    add_bias(&mut out, bias.data(), g.n, g.h * g.w);
    Tensor::new([g.n, g.c_dense, g.h, g.w], out).expect("conv_transpose2d output shape")
}

pub(crate) fn conv_transpose2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    g: &ConvGeom,
    need_input: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let sites = g.sites();
    let row_len = g.n * sites;
    let grad_cols = im2col(grad_out.data(), g);

    let x_rows = batch_to_rows(input.data(), g.n, g.c_strided, sites);
    let mut dw = vec![0.0; g.c_strided * g.taps()];
    gemm_nt(g.c_strided, row_len, g.taps(), &x_rows, &grad_cols, &mut dw);

    let dx = need_input.then(|| {
        let mut dx_rows = vec![0.0; g.c_strided * row_len];
        gemm_nn(g.c_strided, g.taps(), row_len, weight.data(), &grad_cols, &mut dx_rows);
        Tensor::new(input.shape(), rows_to_batch(&dx_rows, g.n, g.c_strided, sites))
            .expect("conv_transpose2d input grad shape")
    });
    let db = bias_grad(grad_out.data(), g.n, g.c_dense, g.h * g.w);
    (
        dx,
        Tensor::new(weight.shape(), dw).expect("conv_transpose2d weight grad shape"),
        Tensor::new([1, g.c_dense, 1, 1], db).expect("conv_transpose2d bias grad shape"),
    )
}

/// Elementwise `max(x, slope·x)`.
pub fn leaky_relu(input: &Tensor, slope: f64) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { slope * v })
}

pub(crate) fn leaky_relu_backward(input: &Tensor, grad_out: &Tensor, slope: f64) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { slope * g })
        .collect();
    Tensor::new(input.shape(), data).expect("leaky_relu grad shape")
}

/// Per-location `1 − cos` between the channel vectors of `a` and `b`,
/// with each norm floored at `eps`. Output is `n×1×h×w` in `[0, 2]`.
pub fn cosine_distance_map(a: &Tensor, b: &Tensor, eps: f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(SirError::shape(
            "cosine_distance_map",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    if !(eps > 0.0) {
        return Err(SirError::invalid("cosine_distance_map", "epsilon must be positive"));
    }
    let [n, c, h, w] = a.shape();
    let sites = h * w;
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; n * sites];
    for ni in 0..n {
        for s in 0..sites {
            let (mut dot, mut aa, mut bb) = (0.0, 0.0, 0.0);
            for ci in 0..c {
                let idx = (ni * c + ci) * sites + s;
                dot += ad[idx] * bd[idx];
                aa += ad[idx] * ad[idx];
                bb += bd[idx] * bd[idx];
            }
            let cos = dot / (aa.sqrt().max(eps) * bb.sqrt().max(eps));
            out[ni * sites + s] = 1.0 - cos.clamp(-1.0, 1.0);
        }
    }
    Tensor::new([n, 1, h, w], out)
}

pub(crate) fn cosine_distance_backward(
    a: &Tensor,
    b: &Tensor,
    grad_out: &Tensor,
    eps: f64,
) -> (Tensor, Tensor) {
    let [n, c, h, w] = a.shape();
    let sites = h * w;
    let (ad, bd, gd) = (a.data(), b.data(), grad_out.data());
    let mut da = vec![0.0; ad.len()];
    let mut db = vec![0.0; bd.len()];
    for ni in 0..n {
        for s in 0..sites {
            let (mut dot, mut aa, mut bb) = (0.0, 0.0, 0.0);
            for ci in 0..c {
                let idx = (ni * c + ci) * sites + s;
                dot += ad[idx] * bd[idx];
                aa += ad[idx] * ad[idx];
                bb += bd[idx] * bd[idx];
            }
            let (norm_a, norm_b) = (aa.sqrt(), bb.sqrt());
            let (na, nb) = (norm_a.max(eps), norm_b.max(eps));
            let cos = dot / (na * nb);
            // d(1 - cos) = -d(cos); the norm term only exists where the guard is inactive.
            let g = -gd[ni * sites + s];
            let ka = if norm_a > eps { cos / (na * na) } else { 0.0 };
            let kb = if norm_b > eps { cos / (nb * nb) } else { 0.0 };
            let inv = 1.0 / (na * nb);
            for ci in 0..c {
                let idx = (ni * c + ci) * sites + s;
                da[idx] = g * (bd[idx] * inv - ad[idx] * ka);
                db[idx] = g * (ad[idx] * inv - bd[idx] * kb);
            }
        }
    }
    (
        Tensor::new(a.shape(), da).expect("cosine grad shape"),
        Tensor::new(b.shape(), db).expect("cosine grad shape"),
    )
}
