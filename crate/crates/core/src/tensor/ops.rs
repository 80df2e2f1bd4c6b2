//! Tensor kernels: matrix products, row softmax, softplus, grouped and
//! transposed convolution, bilinear upsampling, plus the adjoint kernels the
//! tape needs for backward passes.
//!
//! Convolutions follow the cross-correlation convention (no kernel flip) with
//! zero padding. Feature maps are `C×H×W`, weights are `Cout×(Cin/g)×kh×kw`.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::parallel;

fn expect_2d<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    t.expect_rank(2, op)?;
    Ok((t.dim(0), t.dim(1)))
}

/// `a · b` for `a: M×K`, `b: K×P`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = expect_2d(a, "matmul")?;
    let (k2, p) = expect_2d(b, "matmul")?;
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            format!("inner dimensions differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = Tensor::zeros(&[m, p]);
    parallel::for_each_chunk(out.data_mut(), p, |i, row| {
        for (kk, &aik) in ad[i * k..(i + 1) * k].iter().enumerate() {
            let brow = &bd[kk * p..(kk + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    });
    out.ensure_finite("matmul")?;
    Ok(out)
}

/// `a · bᵀ` for `a: M×K`, `b: P×K`, without materializing the transpose.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = expect_2d(a, "matmul_nt")?;
    let (p, k2) = expect_2d(b, "matmul_nt")?;
    if k != k2 {
        return Err(Error::dim(
            "matmul_nt",
            format!("row lengths differ: {:?} x {:?}ᵀ", a.shape(), b.shape()),
        ));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = Tensor::zeros(&[m, p]);
    parallel::for_each_chunk(out.data_mut(), p, |i, row| {
        let arow = &ad[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &bd[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *o = acc;
        }
    });
    out.ensure_finite("matmul_nt")?;
    Ok(out)
}

/// `aᵀ · b` for `a: K×M`, `b: K×P`, without materializing the transpose.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = expect_2d(a, "matmul_tn")?;
    let (k2, p) = expect_2d(b, "matmul_tn")?;
    if k != k2 {
        return Err(Error::dim(
            "matmul_tn",
            format!("column lengths differ: {:?}ᵀ x {:?}", a.shape(), b.shape()),
        ));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = Tensor::zeros(&[m, p]);
    parallel::for_each_chunk(out.data_mut(), p, |i, row| {
        for kk in 0..k {
            let aki = ad[kk * m + i];
            let brow = &bd[kk * p..(kk + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aki * bv;
            }
        }
    });
    out.ensure_finite("matmul_tn")?;
    Ok(out)
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = expect_2d(a, "transpose")?;
    let ad = a.data();
    Ok(Tensor::from_fn(&[n, m], |idx| {
        let (j, i) = (idx / m, idx % m);
        ad[i * n + j]
    }))
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let out = a.zip_map(b, |x, y| x + y)?;
    out.ensure_finite("add")?;
    Ok(out)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let out = a.zip_map(b, |x, y| x - y)?;
    out.ensure_finite("sub")?;
    Ok(out)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let out = a.zip_map(b, |x, y| x * y)?;
    out.ensure_finite("mul")?;
    Ok(out)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, s: T) -> Result<Tensor<T>> {
    let out = a.map(|x| x * s);
    out.ensure_finite("scale")?;
    Ok(out)
}

/// `⟨a, b⟩` over all elements.
pub fn inner<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    a.expect_same_shape(b, "inner")?;
    Ok(a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).sum())
}

/// Row-wise softmax with the row maximum subtracted before exponentiation.
pub fn softmax_rows<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = a.clone();
    softmax_rows_inplace(&mut out)?;
    Ok(out)
}

pub fn softmax_rows_inplace<T: Scalar>(a: &mut Tensor<T>) -> Result<()> {
    let (_, n) = expect_2d(a, "softmax_rows")?;
    a.ensure_finite("softmax_rows")?;
    parallel::for_each_chunk(a.data_mut(), n, |_, row| {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        let inv = T::one() / total;
        for x in row.iter_mut() {
            *x *= inv;
        }
    });
    Ok(())
}

/// Smallest value softplus returns. Its square is still a normal number, so
/// products of two floored features (kernel similarities, attention
/// denominators) never underflow to zero.
pub fn softplus_floor<T: Scalar>() -> T {
    T::min_positive_value().sqrt()
}

/// `log(1 + eˣ)` as `max(x, 0) + log1p(e^{-|x|})`, floored at [`softplus_floor`].
#[inline]
pub fn softplus_scalar<T: Scalar>(x: T) -> T {
    let v = x.max(T::zero()) + (-x.abs()).exp().ln_1p();
    v.max(softplus_floor())
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    a.map(softplus_scalar)
}

pub fn relu<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    a.map(|x| x.max(T::zero()))
}

/// Sum over rows of an `N×D` matrix, giving `1×D`.
pub fn col_sums<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = expect_2d(a, "col_sums")?;
    let mut out = Tensor::zeros(&[1, d]);
    let ad = a.data();
    let od = out.data_mut();
    for i in 0..n {
        for (o, &x) in od.iter_mut().zip(&ad[i * d..(i + 1) * d]) {
            *o += x;
        }
    }
    out.ensure_finite("col_sums")?;
    Ok(out)
}

/// Stride, zero padding and group count of a 2-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, pad: usize, groups: usize) -> Self {
        ConvSpec {
            stride,
            pad,
            groups,
        }
    }
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec::new(1, 0, 1)
    }
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_geometry(
    op: &'static str,
    in_shape: &[usize],
    w_shape: &[usize],
    spec: ConvSpec,
) -> Result<ConvGeom> {
    if in_shape.len() != 3 {
        return Err(Error::dim(op, format!("input must be C×H×W, got {in_shape:?}")));
    }
    if w_shape.len() != 4 {
        return Err(Error::dim(
            op,
            format!("weight must be Cout×Cin/g×kh×kw, got {w_shape:?}"),
        ));
    }
    let (cin, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (cout, cin_g, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    let g = spec.groups;
    if g == 0 || cin % g != 0 || cout % g != 0 {
        return Err(Error::Config(format!(
            "{op}: groups {g} must divide input channels {cin} and output channels {cout}"
        )));
    }
    if spec.stride == 0 {
        return Err(Error::Config(format!("{op}: stride must be at least 1")));
    }
    if cin_g != cin / g {
        return Err(Error::dim(
            op,
            format!(
                "weight {w_shape:?} expects {} channels per group, input has {cin} in {g} groups",
                cin_g
            ),
        ));
    }
    let (ph, pw) = (h + 2 * spec.pad, w + 2 * spec.pad);
    if ph < kh || pw < kw {
        return Err(Error::dim(
            op,
            format!(
                "kernel {kh}×{kw} larger than padded input {ph}×{pw} (stride {}, pad {})",
                spec.stride, spec.pad
            ),
        ));
    }
    Ok(ConvGeom {
        cin,
        h,
        w,
        cout,
        cin_g,
        cout_g: cout / g,
        kh,
        kw,
        oh: (ph - kh) / spec.stride + 1,
        ow: (pw - kw) / spec.stride + 1,
    })
}

/// Valid output positions `o` for kernel tap `k`: those with
/// `0 <= o*stride + k - pad < len`.
#[inline]
fn tap_range(k: usize, stride: usize, pad: usize, len: usize, out_len: usize) -> (usize, usize) {
    // smallest o with o*stride + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // largest o with o*stride + k - pad <= len - 1
    let hi = if len + pad > k {
        ((len + pad - 1 - k) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Grouped 2-d cross-correlation. Output is `Cout×H'×W'` with
/// `H' = (H + 2·pad − kh)/stride + 1`.
pub fn conv2d_grouped<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let geo = conv_geometry("conv2d", x.shape(), w.shape(), spec)?;
    let ConvSpec { stride, pad, .. } = spec;
    let (xd, wd) = (x.data(), w.data());
    let mut out = Tensor::zeros(&[geo.cout, geo.oh, geo.ow]);
    parallel::for_each_chunk(out.data_mut(), geo.oh * geo.ow, |co, plane| {
        let group = co / geo.cout_g;
        for cig in 0..geo.cin_g {
            let ci = group * geo.cin_g + cig;
            let xplane = &xd[ci * geo.h * geo.w..(ci + 1) * geo.h * geo.w];
            for ki in 0..geo.kh {
                let (oy0, oy1) = tap_range(ki, stride, pad, geo.h, geo.oh);
                for kj in 0..geo.kw {
                    let wv = wd[((co * geo.cin_g + cig) * geo.kh + ki) * geo.kw + kj];
                    let (ox0, ox1) = tap_range(kj, stride, pad, geo.w, geo.ow);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ki - pad;
                        let xrow = &xplane[iy * geo.w..(iy + 1) * geo.w];
                        let orow = &mut plane[oy * geo.ow..(oy + 1) * geo.ow];
                        for ox in ox0..ox1 {
                            orow[ox] += wv * xrow[ox * stride + kj - pad];
                        }
                    }
                }
            }
        }
    });
    out.ensure_finite("conv2d")?;
    Ok(out)
}

/// Adjoint of [`conv2d_grouped`] with respect to its input: scatters
/// `grad_out` back to an input of shape `in_shape`.
pub fn conv2d_backward_input<T: Scalar>(
    grad_out: &Tensor<T>,
    w: &Tensor<T>,
    in_shape: &[usize],
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let geo = conv_geometry("conv2d_backward_input", in_shape, w.shape(), spec)?;
    if grad_out.shape() != [geo.cout, geo.oh, geo.ow] {
        return Err(Error::dim(
            "conv2d_backward_input",
            format!(
                "gradient {:?} does not match convolution output {:?}",
                grad_out.shape(),
                [geo.cout, geo.oh, geo.ow]
            ),
        ));
    }
    let ConvSpec { stride, pad, .. } = spec;
    let (gd, wd) = (grad_out.data(), w.data());
    let mut gx = Tensor::zeros(&[geo.cin, geo.h, geo.w]);
    parallel::for_each_chunk(gx.data_mut(), geo.h * geo.w, |ci, plane| {
        let group = ci / geo.cin_g;
        let cig = ci % geo.cin_g;
        for co in group * geo.cout_g..(group + 1) * geo.cout_g {
            let gplane = &gd[co * geo.oh * geo.ow..(co + 1) * geo.oh * geo.ow];
            for ki in 0..geo.kh {
                let (oy0, oy1) = tap_range(ki, stride, pad, geo.h, geo.oh);
                for kj in 0..geo.kw {
                    let wv = wd[((co * geo.cin_g + cig) * geo.kh + ki) * geo.kw + kj];
                    let (ox0, ox1) = tap_range(kj, stride, pad, geo.w, geo.ow);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ki - pad;
                        let grow = &gplane[oy * geo.ow..(oy + 1) * geo.ow];
                        let prow = &mut plane[iy * geo.w..(iy + 1) * geo.w];
                        for ox in ox0..ox1 {
                            prow[ox * stride + kj - pad] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    });
    gx.ensure_finite("conv2d_backward_input")?;
    Ok(gx)
}

/// Gradient of [`conv2d_grouped`] with respect to its weight.
pub fn conv2d_backward_weight<T: Scalar>(
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
    w_shape: &[usize],
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let geo = conv_geometry("conv2d_backward_weight", x.shape(), w_shape, spec)?;
    if grad_out.shape() != [geo.cout, geo.oh, geo.ow] {
        return Err(Error::dim(
            "conv2d_backward_weight",
            format!(
                "gradient {:?} does not match convolution output {:?}",
                grad_out.shape(),
                [geo.cout, geo.oh, geo.ow]
            ),
        ));
    }
    let ConvSpec { stride, pad, .. } = spec;
    let (xd, gd) = (x.data(), grad_out.data());
    let mut gw = Tensor::zeros(w_shape);
    parallel::for_each_chunk(gw.data_mut(), geo.cin_g * geo.kh * geo.kw, |co, filt| {
        let group = co / geo.cout_g;
        let gplane = &gd[co * geo.oh * geo.ow..(co + 1) * geo.oh * geo.ow];
        for cig in 0..geo.cin_g {
            let ci = group * geo.cin_g + cig;
            let xplane = &xd[ci * geo.h * geo.w..(ci + 1) * geo.h * geo.w];
            for ki in 0..geo.kh {
                let (oy0, oy1) = tap_range(ki, stride, pad, geo.h, geo.oh);
                for kj in 0..geo.kw {
                    let (ox0, ox1) = tap_range(kj, stride, pad, geo.w, geo.ow);
                    let mut acc = T::zero();
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ki - pad;
                        let xrow = &xplane[iy * geo.w..(iy + 1) * geo.w];
                        let grow = &gplane[oy * geo.ow..(oy + 1) * geo.ow];
                        for ox in ox0..ox1 {
                            acc += grow[ox] * xrow[ox * stride + kj - pad];
                        }
                    }
                    filt[(cig * geo.kh + ki) * geo.kw + kj] = acc;
                }
            }
        }
    });
    gw.ensure_finite("conv2d_backward_weight")?;
    Ok(gw)
}

/// Padding and output padding that make a transposed convolution with
/// kernel `k` map `H` to exactly `stride·H`: `k = stride + 2·pad − out_pad`.
pub fn conv_transpose_padding(kernel: usize, stride: usize) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::Config("conv_transpose2d: stride must be at least 1".into()));
    }
    let (k, s) = (kernel as isize, stride as isize);
    let pad = ((k - s).max(0) + 1) / 2;
    let out_pad = s + 2 * pad - k;
    if kernel == 0 || out_pad < 0 || out_pad >= s {
        return Err(Error::Config(format!(
            "conv_transpose2d: kernel {kernel} cannot produce an exact ×{stride} output"
        )));
    }
    Ok((pad as usize, out_pad as usize))
}

/// Transposed convolution with weight `Cin×Cout×k×k`, mapping `Cin×H×W`
/// to `Cout×(stride·H)×(stride·W)`.
///
/// Defined as the adjoint of `conv2d_grouped` (groups 1) with the padding from
/// [`conv_transpose_padding`] applied to a `stride·H` input.
pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let (out_shape, spec) = conv_transpose_layout(x.shape(), w.shape(), stride)?;
    conv2d_backward_input(x, w, &out_shape, spec)
}

/// Output shape of [`conv_transpose2d`] and the matching forward convolution.
pub fn conv_transpose_layout(
    in_shape: &[usize],
    w_shape: &[usize],
    stride: usize,
) -> Result<([usize; 3], ConvSpec)> {
    if in_shape.len() != 3 || w_shape.len() != 4 {
        return Err(Error::dim(
            "conv_transpose2d",
            format!("expected C×H×W input and Cin×Cout×k×k weight, got {in_shape:?}, {w_shape:?}"),
        ));
    }
    if w_shape[0] != in_shape[0] {
        return Err(Error::dim(
            "conv_transpose2d",
            format!("weight {w_shape:?} expects {} input channels, got {in_shape:?}", w_shape[0]),
        ));
    }
    if w_shape[2] != w_shape[3] {
        return Err(Error::Config(format!(
            "conv_transpose2d: square kernels only, got {}×{}",
            w_shape[2], w_shape[3]
        )));
    }
    let (pad, _) = conv_transpose_padding(w_shape[2], stride)?;
    Ok((
        [w_shape[1], in_shape[1] * stride, in_shape[2] * stride],
        ConvSpec::new(stride, pad, 1),
    ))
}

pub fn conv_transpose2d_backward_input<T: Scalar>(
    grad_out: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let (pad, _) = conv_transpose_padding(w.dim(2), stride)?;
    conv2d_grouped(grad_out, w, ConvSpec::new(stride, pad, 1))
}

pub fn conv_transpose2d_backward_weight<T: Scalar>(
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
    w_shape: &[usize],
    stride: usize,
) -> Result<Tensor<T>> {
    let (pad, _) = conv_transpose_padding(w_shape[2], stride)?;
    conv2d_backward_weight(grad_out, x, w_shape, ConvSpec::new(stride, pad, 1))
}

/// Source taps `(i0, i1, w0, w1)` for each output index along one axis,
/// align-corners=false.
fn bilinear_taps(len: usize, factor: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..len * factor)
        .map(|d| {
            let src = ((d as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let lambda = src - i0 as f64;
            (i0, i1, 1.0 - lambda, lambda)
        })
        .collect()
}

fn check_factor(factor: usize) -> Result<()> {
    if factor < 1 {
        return Err(Error::Config("bilinear_upsample: factor must be at least 1".into()));
    }
    Ok(())
}

/// Bilinear upsampling of a `C×H×W` map by an integer factor, with the
/// align-corners=false sampling grid (half-pixel centers, edge clamping).
pub fn bilinear_upsample<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    check_factor(factor)?;
    x.expect_rank(3, "bilinear_upsample")?;
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let (ty, tx) = (bilinear_taps(h, factor), bilinear_taps(w, factor));
    let (oh, ow) = (h * factor, w * factor);
    let xd = x.data();
    let mut out = Tensor::zeros(&[c, oh, ow]);
    parallel::for_each_chunk(out.data_mut(), oh * ow, |ch, plane| {
        let src = &xd[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let v = T::of(wy0 * wx0) * src[y0 * w + x0]
                    + T::of(wy0 * wx1) * src[y0 * w + x1]
                    + T::of(wy1 * wx0) * src[y1 * w + x0]
                    + T::of(wy1 * wx1) * src[y1 * w + x1];
                plane[oy * ow + ox] = v;
            }
        }
    });
    Ok(out)
}

/// Adjoint of [`bilinear_upsample`].
pub fn bilinear_upsample_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    in_shape: &[usize],
    factor: usize,
) -> Result<Tensor<T>> {
    check_factor(factor)?;
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (h * factor, w * factor);
    if grad_out.shape() != [c, oh, ow] {
        return Err(Error::dim(
            "bilinear_upsample_backward",
            format!("gradient {:?} does not match {:?}", grad_out.shape(), [c, oh, ow]),
        ));
    }
    let (ty, tx) = (bilinear_taps(h, factor), bilinear_taps(w, factor));
    let gd = grad_out.data();
    let mut gx = Tensor::zeros(in_shape);
    parallel::for_each_chunk(gx.data_mut(), h * w, |ch, plane| {
        let g = &gd[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                plane[y0 * w + x0] += T::of(wy0 * wx0) * v;
                plane[y0 * w + x1] += T::of(wy0 * wx1) * v;
                plane[y1 * w + x0] += T::of(wy1 * wx0) * v;
                plane[y1 * w + x1] += T::of(wy1 * wx1) * v;
            }
        }
    });
    Ok(gx)
}

/// Stacks two `C×H×W` maps along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.expect_rank(3, "concat_channels")?;
    b.expect_rank(3, "concat_channels")?;
    if a.shape()[1..] != b.shape()[1..] {
        return Err(Error::dim(
            "concat_channels",
            format!("spatial sizes differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(&[a.dim(0) + b.dim(0), a.dim(1), a.dim(2)], data)
}

/// Splits a `C×H×W` map after `first` channels.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    x.expect_rank(3, "split_channels")?;
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    if first == 0 || first >= c {
        return Err(Error::dim(
            "split_channels",
            format!("split point {first} outside 1..{c}"),
        ));
    }
    let at = first * h * w;
    Ok((
        Tensor::from_vec(&[first, h, w], x.data()[..at].to_vec())?,
        Tensor::from_vec(&[c - first, h, w], x.data()[at..].to_vec())?,
    ))
}

/// `x[c]·scale[c] + bias[c]` for each channel of a `C×H×W` map.
pub fn channel_affine<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    x.expect_rank(3, "channel_affine")?;
    let c = x.dim(0);
    if scale.len() != c || bias.len() != c {
        return Err(Error::dim(
            "channel_affine",
            format!(
                "{c} channels but scale {:?}, bias {:?}",
                scale.shape(),
                bias.shape()
            ),
        ));
    }
    let plane = x.dim(1) * x.dim(2);
    let mut out = x.clone();
    let (s, b) = (scale.data(), bias.data());
    for (ch, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        for v in chunk {
            *v = *v * s[ch] + b[ch];
        }
    }
    out.ensure_finite("channel_affine")?;
    Ok(out)
}

/// Per-channel sums of a `C×H×W` map, shape `[C]`.
pub fn channel_sums<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let plane = x.dim(1) * x.dim(2);
    let sums: Vec<T> = x.data().chunks(plane).map(|c| c.iter().copied().sum()).collect();
    Tensor::from_vec(&[x.dim(0)], sums).expect("channel count is positive")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        let cols = rows[0].len();
        Tensor::from_vec(
            &[rows.len(), cols],
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
        .unwrap()
    }

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, p) = (a.dim(0), a.dim(1), b.dim(1));
        Tensor::from_fn(&[m, p], |idx| {
            let (i, j) = (idx / p, idx % p);
            let mut s = 0.0;
            for kk in 0..k {
                s += a.at2(i, kk) * b.at2(kk, j);
            }
            s
        })
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let a = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Tensor::eye(2), &a).unwrap(), a);
        let r = matmul(&t2(&[&[1.0, 2.0]]), &t2(&[&[3.0], &[4.0]])).unwrap();
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f64>::randn(&[5, 7], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[7, 3], 1.0, &mut rng);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        let bt = transpose(&b).unwrap();
        assert!(matmul_nt(&a, &bt).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        let at = transpose(&a).unwrap();
        assert!(matmul_tn(&at, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let err = matmul(&Tensor::<f64>::zeros(&[2, 3]), &Tensor::zeros(&[2, 3]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("[2, 3] x [2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&t2(&[&[0.0, 0.0]])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&t2(&[&[1.0, 2.0, 3.0]])).unwrap();
        for (got, want) in s.data().iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((got - want).abs() < 1e-4);
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::<f64>::randn(&[4, 6], 2.0, &mut rng);
        let shifted = a.map(|x| x + 123.25);
        let d = softmax_rows(&a).unwrap().max_abs_diff(&softmax_rows(&shifted).unwrap());
        assert!(d < 1e-12, "{d}");
    }

    #[test]
    fn softplus_values() {
        assert!((softplus_scalar(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(((softplus_scalar(50.0f64) - 50.0) / 50.0).abs() < 1e-12);
        let tiny = softplus_scalar(-50.0f64);
        assert!(tiny > 0.0);
        assert!((tiny / 1.928_749_847_963_917_8e-22 - 1.0).abs() < 1e-9);
        assert!(softplus_scalar(-1e4f64) > 0.0);
        assert!(softplus_scalar(-1e4f32) > 0.0);
        assert!(softplus_scalar(f64::MAX).is_finite());
        assert!(softplus_scalar(-f64::MAX) > 0.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(&[1, 5, 6], 1.0, &mut rng);
        let w = Tensor::ones(&[1, 1, 1, 1]);
        assert_eq!(conv2d_grouped(&x, &w, ConvSpec::default()).unwrap(), x);
    }

    #[test]
    fn conv_rejects_bad_configs() {
        let x = Tensor::<f64>::zeros(&[3, 4, 4]);
        let w = Tensor::zeros(&[4, 1, 3, 3]);
        assert!(matches!(
            conv2d_grouped(&x, &w, ConvSpec::new(1, 1, 2)),
            Err(Error::Config(_))
        ));
        let w = Tensor::zeros(&[3, 3, 7, 7]);
        assert!(matches!(
            conv2d_grouped(&x, &w, ConvSpec::new(1, 1, 1)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn conv_transpose_shape_and_zero() {
        let x = Tensor::<f64>::zeros(&[1, 4, 4]);
        let w = Tensor::ones(&[1, 1, 2, 2]);
        let y = conv_transpose2d(&x, &w, 2).unwrap();
        assert_eq!(y.shape(), &[1, 8, 8]);
        assert!(y.data().iter().all(|&v| v == 0.0));
        let w3 = Tensor::ones(&[1, 2, 3, 3]);
        assert_eq!(conv_transpose2d(&x, &w3, 2).unwrap().shape(), &[2, 8, 8]);
    }

    #[test]
    fn transpose_padding_table() {
        assert_eq!(conv_transpose_padding(2, 2).unwrap(), (0, 0));
        assert_eq!(conv_transpose_padding(3, 2).unwrap(), (1, 1));
        assert_eq!(conv_transpose_padding(3, 1).unwrap(), (1, 0));
        assert_eq!(conv_transpose_padding(4, 2).unwrap(), (1, 0));
    }

    #[test]
    fn bilinear_rejects_zero_factor() {
        assert!(matches!(
            bilinear_upsample(&Tensor::<f64>::zeros(&[1, 2, 2]), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn concat_split_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::<f64>::randn(&[2, 3, 3], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[1, 3, 3], 1.0, &mut rng);
        let c = concat_channels(&a, &b).unwrap();
        let (a2, b2) = split_channels(&c, 2).unwrap();
        assert_eq!((a2, b2), (a, b));
    }
}
