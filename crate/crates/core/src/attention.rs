//! Attention mechanisms over `N×C` token matrices and `C×H×W` feature maps.
//!
//! * [`dot_attention`]: `softmax_row(QKᵀ)V`, quadratic in `N`.
//! * [`kernel_attention_quadratic`]: the softplus-kernel similarity
//!   `φ(qᵢ)ᵀφ(kⱼ)` normalized per row, with the `N×N` matrix materialized.
//! * [`kernel_attention_linear`]: the same quantity computed by reassociating
//!   the product chain, `φ(Q)(φ(K)ᵀV) / φ(Q)Σⱼφ(kⱼ)`, linear in `N`.
//!
//! `φ` is softplus throughout. The spatial module (KAM) wraps the linear form
//! with query/key/value projections and a residual scale `γ`; the channel
//! module (CAM) reweights channels with the softmax of their `C×C` Gram
//! matrix and a residual scale `β`. Both scales start at zero, so an
//! untrained block is the identity on its fused input.
//!
//! Every operation exists twice: as a plain function on tensors, and as a
//! builder on a [`Graph`] for differentiation. Tests check the two against
//! each other.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::ops::{self, ConvSpec};
use crate::tensor::{Scalar, Tensor};

/// Dimensions of a single-head attention projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub channels_in: usize,
    pub key_dim: usize,
    pub value_dim: usize,
}

impl AttentionConfig {
    pub fn new(channels_in: usize, key_dim: usize, value_dim: usize) -> Result<Self> {
        if channels_in == 0 || key_dim == 0 || value_dim == 0 {
            return Err(Error::Config(format!(
                "attention dimensions must be positive: C={channels_in}, D_k={key_dim}, D_v={value_dim}"
            )));
        }
        Ok(AttentionConfig {
            channels_in,
            key_dim,
            value_dim,
        })
    }

    /// `D_k = max(C/2, 1)`, `D_v = C`, the layout used inside the network.
    pub fn for_channels(channels: usize) -> Result<Self> {
        Self::new(channels, (channels / 2).max(1), channels)
    }
}

/// Bias-free query, key and value projections.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionWeights<T: Scalar> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
}

impl<T: Scalar> ProjectionWeights<T> {
    pub fn new(wq: Tensor<T>, wk: Tensor<T>, wv: Tensor<T>) -> Result<Self> {
        let w = ProjectionWeights { wq, wk, wv };
        w.config()?;
        Ok(w)
    }

    /// `W_q = W_k = W_v = I_C`.
    pub fn identity(channels: usize) -> Self {
        ProjectionWeights {
            wq: Tensor::eye(channels),
            wk: Tensor::eye(channels),
            wv: Tensor::eye(channels),
        }
    }

    /// Normal entries with standard deviation `1/√C`.
    pub fn random<R: Rng + ?Sized>(cfg: AttentionConfig, rng: &mut R) -> Self {
        let std = 1.0 / (cfg.channels_in as f64).sqrt();
        ProjectionWeights {
            wq: Tensor::randn(&[cfg.channels_in, cfg.key_dim], std, rng),
            wk: Tensor::randn(&[cfg.channels_in, cfg.key_dim], std, rng),
            wv: Tensor::randn(&[cfg.channels_in, cfg.value_dim], std, rng),
        }
    }

    pub fn config(&self) -> Result<AttentionConfig> {
        for (name, w) in [("W_q", &self.wq), ("W_k", &self.wk), ("W_v", &self.wv)] {
            if w.rank() != 2 {
                return Err(Error::dim(
                    "projection",
                    format!("{name} must be a matrix, got {:?}", w.shape()),
                ));
            }
        }
        let c = self.wq.dim(0);
        if self.wk.shape() != self.wq.shape() || self.wv.dim(0) != c {
            return Err(Error::dim(
                "projection",
                format!(
                    "inconsistent shapes W_q {:?}, W_k {:?}, W_v {:?}",
                    self.wq.shape(),
                    self.wk.shape(),
                    self.wv.shape()
                ),
            ));
        }
        AttentionConfig::new(c, self.wq.dim(1), self.wv.dim(1))
    }
}

/// `Q = XW_q`, `K = XW_k`, `V = XW_v`.
pub fn project_qkv<T: Scalar>(
    x: &Tensor<T>,
    w: &ProjectionWeights<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    x.ensure_finite("project_qkv")?;
    Ok((
        ops::matmul(x, &w.wq)?,
        ops::matmul(x, &w.wk)?,
        ops::matmul(x, &w.wv)?,
    ))
}

fn check_qkv<T: Scalar>(
    op: &'static str,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    for t in [q, k, v] {
        t.expect_rank(2, op)?;
    }
    let n = q.dim(0);
    if n == 0 {
        return Err(Error::dim(op, "sequence length is zero"));
    }
    if q.dim(1) != k.dim(1) {
        return Err(Error::dim(
            op,
            format!("Q {:?} and K {:?} differ in key dimension", q.shape(), k.shape()),
        ));
    }
    if k.dim(0) != n || v.dim(0) != n {
        return Err(Error::dim(
            op,
            format!(
                "row counts differ: Q {:?}, K {:?}, V {:?}",
                q.shape(),
                k.shape(),
                v.shape()
            ),
        ));
    }
    Ok((n, q.dim(1), v.dim(1)))
}

/// `softmax_row(QKᵀ)V`. The `N×N` score matrix is normalized in place.
pub fn dot_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    check_qkv("dot_attention", q, k, v)?;
    let mut scores = ops::matmul_nt(q, k)?;
    ops::softmax_rows_inplace(&mut scores)?;
    ops::matmul(&scores, v)
}

/// Row-normalized softplus-kernel weights `wᵢⱼ = φ(qᵢ)ᵀφ(kⱼ) / Σⱼ φ(qᵢ)ᵀφ(kⱼ)`.
pub fn kernel_attention_weights<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    let mut sim = ops::matmul_nt(&ops::softplus(q), &ops::softplus(k))?;
    let n = sim.dim(1);
    for row in sim.data_mut().chunks_mut(n) {
        let total: T = row.iter().copied().sum();
        if !(total > T::zero()) {
            return Err(Error::numeric(
                "kernel_attention",
                format!("similarity row sums to {total}"),
            ));
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
    Ok(sim)
}

/// Kernel attention with the `N×N` similarity matrix materialized.
pub fn kernel_attention_quadratic<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_qkv("kernel_attention_quadratic", q, k, v)?;
    ops::matmul(&kernel_attention_weights(q, k)?, v)
}

/// Kernel attention in linear time and memory:
/// `φ(Q)(φ(K)ᵀV)` divided row-wise by `φ(Q)Σⱼφ(kⱼ)`.
///
/// Buffers: `φ(Q)`, `φ(K)` (`N×D_k` each), `φ(K)ᵀV` (`D_k×D_v`), `Σⱼφ(kⱼ)`
/// (`D_k`) and the `N×D_v` output. Nothing scales with `N²`.
pub fn kernel_attention_linear<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (_, dk, dv) = check_qkv("kernel_attention_linear", q, k, v)?;
    let fq = ops::softplus(q);
    let fk = ops::softplus(k);
    let kv = ops::matmul_tn(&fk, v)?;
    let key_sum = ops::col_sums(&fk)?;
    let mut out = ops::matmul(&fq, &kv)?;
    let ks = key_sum.data();
    for (row, fqr) in out.data_mut().chunks_mut(dv).zip(fq.data().chunks(dk)) {
        let den: T = fqr.iter().zip(ks).map(|(&a, &b)| a * b).sum();
        if !(den > T::zero() && den.is_finite()) {
            return Err(Error::numeric(
                "kernel_attention_linear",
                format!("normalizer {den} is not strictly positive"),
            ));
        }
        let inv = T::one() / den;
        for x in row.iter_mut() {
            *x *= inv;
        }
    }
    out.ensure_finite("kernel_attention_linear")?;
    Ok(out)
}

/// `C×H×W` map to its `N×C` token matrix, `N = H·W`.
pub fn to_tokens<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.expect_rank(3, "to_tokens")?;
    let (c, n) = (x.dim(0), x.dim(1) * x.dim(2));
    ops::transpose(&x.clone().reshape(&[c, n])?)
}

/// Inverse of [`to_tokens`].
pub fn from_tokens<T: Scalar>(t: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let c = t.dim(1);
    ops::transpose(t)?.reshape(&[c, h, w])
}

/// Parameters of the kernel attention module.
#[derive(Clone, Debug, PartialEq)]
pub struct KamParams<T: Scalar> {
    pub proj: ProjectionWeights<T>,
    pub gamma: T,
}

/// Spatial kernel attention without the residual: projections, linear
/// kernel attention, reshape back to `C×H×W`.
pub fn kam_core<T: Scalar>(x: &Tensor<T>, proj: &ProjectionWeights<T>) -> Result<Tensor<T>> {
    x.expect_rank(3, "kam")?;
    let cfg = proj.config()?;
    if cfg.value_dim != x.dim(0) || cfg.channels_in != x.dim(0) {
        return Err(Error::Config(format!(
            "KAM needs C = D_v for the residual: input has {} channels, projections are {}→(D_k={}, D_v={})",
            x.dim(0),
            cfg.channels_in,
            cfg.key_dim,
            cfg.value_dim
        )));
    }
    let tokens = to_tokens(x)?;
    let (q, k, v) = project_qkv(&tokens, proj)?;
    let attended = kernel_attention_linear(&q, &k, &v)?;
    from_tokens(&attended, x.dim(1), x.dim(2))
}

/// `x + γ·KAM(x)`.
pub fn kam_forward<T: Scalar>(x: &Tensor<T>, params: &KamParams<T>) -> Result<Tensor<T>> {
    let core = kam_core(x, &params.proj)?;
    let out = x.zip_map(&core, |a, b| a + params.gamma * b)?;
    out.ensure_finite("kam_forward")?;
    Ok(out)
}

/// `softmax_row(X_r X_rᵀ)` for the `C×N` reshape `X_r` of `x`.
pub fn cam_attention_map<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.expect_rank(3, "cam")?;
    let xr = x.clone().reshape(&[x.dim(0), x.dim(1) * x.dim(2)])?;
    let mut gram = ops::matmul_nt(&xr, &xr)?;
    ops::softmax_rows_inplace(&mut gram)?;
    Ok(gram)
}

/// Channel attention without the residual: `reshape(A X_r)`.
pub fn cam_core<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let a = cam_attention_map(x)?;
    let xr = x.clone().reshape(&[x.dim(0), x.dim(1) * x.dim(2)])?;
    ops::matmul(&a, &xr)?.reshape(x.shape())
}

/// `x + β·CAM(x)`.
pub fn cam_forward<T: Scalar>(x: &Tensor<T>, beta: T) -> Result<Tensor<T>> {
    let core = cam_core(x)?;
    let out = x.zip_map(&core, |a, b| a + beta * b)?;
    out.ensure_finite("cam_forward")?;
    Ok(out)
}

/// Parameters of one attention block: a 1×1 fusion convolution followed by
/// parallel KAM and CAM branches over a shared residual.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlockParams<T: Scalar> {
    /// `C_out × (C_low + C_high) × 1 × 1`.
    pub fuse_weight: Tensor<T>,
    /// `C_out`.
    pub fuse_bias: Tensor<T>,
    pub kam: KamParams<T>,
    pub beta: T,
}

impl<T: Scalar> AttentionBlockParams<T> {
    /// He-initialized fusion, random projections, `γ = β = 0`.
    pub fn init<R: Rng + ?Sized>(channels_in: usize, channels_out: usize, rng: &mut R) -> Result<Self> {
        let cfg = AttentionConfig::for_channels(channels_out)?;
        Ok(AttentionBlockParams {
            fuse_weight: Tensor::randn(
                &[channels_out, channels_in, 1, 1],
                (2.0 / channels_in as f64).sqrt(),
                rng,
            ),
            fuse_bias: Tensor::zeros(&[channels_out]),
            kam: KamParams {
                proj: ProjectionWeights::random(cfg, rng),
                gamma: T::zero(),
            },
            beta: T::zero(),
        })
    }

    pub fn channels_out(&self) -> usize {
        self.fuse_weight.dim(0)
    }
}

fn check_spatial(low: &[usize], high: &[usize]) -> Result<()> {
    if low.len() != 3 || high.len() != 3 || low[1..] != high[1..] {
        return Err(Error::dim(
            "attention_block",
            format!("low {low:?} and high {high:?} must be C×H×W with equal H×W"),
        ));
    }
    Ok(())
}

/// `z + γ·KAM(z) + β·CAM(z)` with `z = fuse(concat(low, high))`.
pub fn attention_block_forward<T: Scalar>(
    low: &Tensor<T>,
    high: &Tensor<T>,
    params: &AttentionBlockParams<T>,
) -> Result<Tensor<T>> {
    check_spatial(low.shape(), high.shape())?;
    let cat = ops::concat_channels(low, high)?;
    let z = ops::conv2d_grouped(&cat, &params.fuse_weight, ConvSpec::default())?;
    let ones = Tensor::ones(&[z.dim(0)]);
    let z = ops::channel_affine(&z, &ones, &params.fuse_bias)?;
    let kam = kam_core(&z, &params.kam.proj)?;
    let cam = cam_core(&z)?;
    let (gamma, beta) = (params.kam.gamma, params.beta);
    let mut out = z;
    for ((o, &a), &c) in out.data_mut().iter_mut().zip(kam.data()).zip(cam.data()) {
        *o = *o + gamma * a + beta * c;
    }
    out.ensure_finite("attention_block")?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Differentiable builders
// ---------------------------------------------------------------------------

/// Graph handles for the parameters of one attention block.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub fuse_weight: Var,
    pub fuse_bias: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub gamma: Var,
    pub beta: Var,
}

impl BlockVars {
    /// Registers `params` on `g` under `prefix.fuse.w`, `prefix.kam.wq`, ...
    pub fn register<T: Scalar>(g: &mut Graph<T>, prefix: &str, params: &AttentionBlockParams<T>) -> Self {
        BlockVars {
            fuse_weight: g.param(format!("{prefix}.fuse.w"), params.fuse_weight.clone()),
            fuse_bias: g.param(format!("{prefix}.fuse.b"), params.fuse_bias.clone()),
            wq: g.param(format!("{prefix}.kam.wq"), params.kam.proj.wq.clone()),
            wk: g.param(format!("{prefix}.kam.wk"), params.kam.proj.wk.clone()),
            wv: g.param(format!("{prefix}.kam.wv"), params.kam.proj.wv.clone()),
            gamma: g.param(format!("{prefix}.kam.gamma"), Tensor::scalar(params.kam.gamma)),
            beta: g.param(format!("{prefix}.cam.beta"), Tensor::scalar(params.beta)),
        }
    }
}

pub fn dot_attention_var<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    check_qkv("dot_attention", g.value(q), g.value(k), g.value(v))?;
    let scores = g.matmul_nt(q, k)?;
    let weights = g.softmax_rows(scores)?;
    g.matmul(weights, v)
}

pub fn kernel_attention_linear_var<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    check_qkv("kernel_attention_linear", g.value(q), g.value(k), g.value(v))?;
    let fq = g.softplus(q);
    let fk = g.softplus(k);
    let kv = g.matmul_tn(fk, v)?;
    let key_sum = g.col_sums(fk)?;
    let num = g.matmul(fq, kv)?;
    let den = g.matmul_nt(fq, key_sum)?;
    g.div_rows(num, den)
}

pub fn to_tokens_var<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::dim("to_tokens", format!("expected C×H×W, got {s:?}")));
    }
    let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
    g.transpose(flat)
}

pub fn from_tokens_var<T: Scalar>(g: &mut Graph<T>, t: Var, h: usize, w: usize) -> Result<Var> {
    let c = g.shape(t)[1];
    let flat = g.transpose(t)?;
    g.reshape(flat, &[c, h, w])
}

pub fn kam_core_var<T: Scalar>(g: &mut Graph<T>, x: Var, wq: Var, wk: Var, wv: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if g.shape(wv).get(1) != Some(&s[0]) {
        return Err(Error::Config(format!(
            "KAM needs C = D_v for the residual: input {s:?}, W_v {:?}",
            g.shape(wv)
        )));
    }
    let tokens = to_tokens_var(g, x)?;
    let q = g.matmul(tokens, wq)?;
    let k = g.matmul(tokens, wk)?;
    let v = g.matmul(tokens, wv)?;
    let att = kernel_attention_linear_var(g, q, k, v)?;
    from_tokens_var(g, att, s[1], s[2])
}

pub fn cam_core_var<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let xr = g.reshape(x, &[s[0], s[1] * s[2]])?;
    let gram = g.matmul_nt(xr, xr)?;
    let a = g.softmax_rows(gram)?;
    let mixed = g.matmul(a, xr)?;
    g.reshape(mixed, &s)
}

pub fn kam_forward_var<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    gamma: Var,
) -> Result<Var> {
    let core = kam_core_var(g, x, wq, wk, wv)?;
    let scaled = g.scale_by(core, gamma)?;
    g.add(x, scaled)
}

pub fn cam_forward_var<T: Scalar>(g: &mut Graph<T>, x: Var, beta: Var) -> Result<Var> {
    let core = cam_core_var(g, x)?;
    let scaled = g.scale_by(core, beta)?;
    g.add(x, scaled)
}

/// Fusion convolution only: the block with both attention branches removed.
pub fn fuse_var<T: Scalar>(g: &mut Graph<T>, low: Var, high: Var, p: &BlockVars) -> Result<Var> {
    check_spatial(g.shape(low), g.shape(high))?;
    let cat = g.concat_channels(low, high)?;
    let z = g.conv2d(cat, p.fuse_weight, ConvSpec::default())?;
    g.channel_bias(z, p.fuse_bias)
}

pub fn attention_block_var<T: Scalar>(g: &mut Graph<T>, low: Var, high: Var, p: &BlockVars) -> Result<Var> {
    let z = fuse_var(g, low, high, p)?;
    let kam = kam_core_var(g, z, p.wq, p.wk, p.wv)?;
    let kam = g.scale_by(kam, p.gamma)?;
    let cam = cam_core_var(g, z)?;
    let cam = g.scale_by(cam, p.beta)?;
    let out = g.add(z, kam)?;
    g.add(out, cam)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_vec(
            &[rows.len(), rows[0].len()],
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::randn(&[6, 4], 1.0, &mut rng);
        let (q, k, v) = project_qkv(&x, &ProjectionWeights::identity(4)).unwrap();
        assert_eq!((&q, &k, &v), (&x, &x, &x));
    }

    #[test]
    fn projection_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::randn(&[16, 8], 1.0, &mut rng);
        let w = ProjectionWeights::random(AttentionConfig::new(8, 4, 8).unwrap(), &mut rng);
        let (q, k, v) = project_qkv(&x, &w).unwrap();
        assert_eq!((q.shape(), k.shape(), v.shape()), (&[16, 4][..], &[16, 4][..], &[16, 8][..]));
        assert!(project_qkv(&Tensor::zeros(&[16, 7]), &w).is_err());
    }

    #[test]
    fn dot_attention_hand_case() {
        let i2 = Tensor::<f64>::eye(2);
        let v = mat(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let out = dot_attention(&i2, &i2, &v).unwrap();
        let want = [1.5379, 2.5379, 2.4621, 3.4621];
        for (g, w) in out.data().iter().zip(want) {
            assert!((g - w).abs() < 1e-3, "{g} vs {w}");
        }
    }

    #[test]
    fn single_key_returns_its_value() {
        let q = mat(&[&[0.3, -1.0]]);
        let k = mat(&[&[2.0, 0.5]]);
        let v = mat(&[&[7.0, -3.0, 1.0]]);
        assert_eq!(dot_attention(&q, &k, &v).unwrap(), v);
        assert!(kernel_attention_quadratic(&q, &k, &v).unwrap().max_abs_diff(&v) < 1e-15);
        assert!(kernel_attention_linear(&q, &k, &v).unwrap().max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn zero_queries_and_keys_average_values() {
        let z = Tensor::<f64>::zeros(&[2, 3]);
        let v = mat(&[&[1.0], &[3.0]]);
        let out = kernel_attention_quadratic(&z, &z, &v).unwrap();
        assert!(out.max_abs_diff(&mat(&[&[2.0], &[2.0]])) < 1e-15);
        let w = kernel_attention_weights(&z, &z).unwrap();
        assert!(w.data().iter().all(|&x| (x - 0.5).abs() < 1e-15));
    }

    #[test]
    fn linear_matches_quadratic_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let q = Tensor::<f64>::randn(&[9, 3], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[9, 3], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(&[9, 5], 1.0, &mut rng);
        let a = kernel_attention_linear(&q, &k, &v).unwrap();
        let b = kernel_attention_quadratic(&q, &k, &v).unwrap();
        assert!(a.rel_err(&b) < 1e-12);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let q = Tensor::<f64>::zeros(&[4, 3]);
        let k = Tensor::<f64>::zeros(&[4, 2]);
        let v = Tensor::<f64>::zeros(&[4, 2]);
        assert!(matches!(dot_attention(&q, &k, &v), Err(Error::Dimension { .. })));
        let k = Tensor::<f64>::zeros(&[5, 3]);
        assert!(kernel_attention_linear(&q, &k, &v).is_err());
    }

    #[test]
    fn kam_requires_value_dim_equal_channels() {
        let x = Tensor::<f64>::zeros(&[4, 2, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let proj = ProjectionWeights::random(AttentionConfig::new(4, 2, 3).unwrap(), &mut rng);
        let p = KamParams { proj, gamma: 0.0 };
        assert!(matches!(kam_forward(&x, &p), Err(Error::Config(_))));
    }

    #[test]
    fn residual_scales_at_zero_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::randn(&[4, 3, 5], 1.0, &mut rng);
        let proj = ProjectionWeights::random(AttentionConfig::for_channels(4).unwrap(), &mut rng);
        assert_eq!(kam_forward(&x, &KamParams { proj, gamma: 0.0 }).unwrap(), x);
        assert_eq!(cam_forward(&x, 0.0).unwrap(), x);
    }

    #[test]
    fn cam_single_channel_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f64>::randn(&[1, 3, 3], 1.0, &mut rng);
        assert_eq!(cam_attention_map(&x).unwrap().data(), &[1.0]);
        let out = cam_forward(&x, 0.75).unwrap();
        assert!(out.max_abs_diff(&x.map(|v| 1.75 * v)) < 1e-14);
    }

    #[test]
    fn block_spatial_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = AttentionBlockParams::<f64>::init(5, 4, &mut rng).unwrap();
        let low = Tensor::zeros(&[2, 4, 4]);
        let high = Tensor::zeros(&[3, 2, 4]);
        assert!(matches!(
            attention_block_forward(&low, &high, &p),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn graph_builders_match_plain_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let low = Tensor::<f64>::randn(&[3, 4, 5], 1.0, &mut rng);
        let high = Tensor::<f64>::randn(&[2, 4, 5], 1.0, &mut rng);
        let mut p = AttentionBlockParams::init(5, 4, &mut rng).unwrap();
        p.kam.gamma = 0.7;
        p.beta = -0.4;
        let plain = attention_block_forward(&low, &high, &p).unwrap();

        let mut g = Graph::new();
        let vars = BlockVars::register(&mut g, "blk", &p);
        let l = g.input(low);
        let h = g.input(high);
        let out = attention_block_var(&mut g, l, h, &vars).unwrap();
        assert!(g.value(out).max_abs_diff(&plain) < 1e-12);
    }
}
