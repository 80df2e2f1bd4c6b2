//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] evaluates eagerly: every method computes its result right away
//! and appends a node recording the operation and its operands. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! a gradient for every node, including each named parameter.
//!
//! ```
//! use linattn_core::autodiff::Graph;
//! use linattn_core::Tensor;
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param("x", Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
//! let y = g.mul(x, x).unwrap();
//! let loss = g.sum(y);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.param("x").unwrap().data(), &[2.0, 4.0]);
//! ```

pub mod gradcheck;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::ops::{self, ConvSpec};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    MatMulTn(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleBy(Var, Var),
    ScaleConst(Var, T),
    SoftmaxRows(Var),
    Softplus(Var),
    Relu(Var),
    Reshape(Var),
    ColSums(Var),
    DivRows(Var, Var),
    Conv2d(Var, Var, ConvSpec),
    ConvTranspose(Var, Var, usize),
    ChannelAffine(Var, Var, Var),
    ChannelBias(Var, Var),
    Bilinear(Var, usize),
    Concat(Var, Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Eager evaluation tape.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    relu_signature: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
            relu_signature: 0xcbf2_9ce4_8422_2325,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Learnable leaf, reported by name in [`Gradients::by_name`].
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf);
        self.params.push((name.into(), v));
        v
    }

    /// Leaf that is not a parameter (inputs, targets, fixed weights).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(n, v)| (n.as_str(), *v))
    }

    /// Hash of the sign pattern of every ReLU input evaluated so far.
    ///
    /// Two evaluations with equal signatures took the same linear piece of
    /// every ReLU; finite-difference checks use it to detect kink crossings.
    pub fn relu_signature(&self) -> u64 {
        self.relu_signature
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMulNt(a, b)))
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul_tn(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMulTn(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = ops::transpose(self.value(a))?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::sub(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// `s · x` for a one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let factor = self.value(s).item()?;
        let v = ops::scale(self.value(x), factor)?;
        Ok(self.push(v, Op::ScaleBy(x, s)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let v = ops::scale(self.value(x), c)?;
        Ok(self.push(v, Op::ScaleConst(x, c)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = ops::softmax_rows(self.value(a))?;
        Ok(self.push(v, Op::SoftmaxRows(a)))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = ops::softplus(self.value(a));
        self.push(v, Op::Softplus(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut h = self.relu_signature ^ (a.0 as u64);
        for &e in x.data() {
            h = (h ^ u64::from(e > T::zero())).wrapping_mul(FNV_PRIME);
        }
        let v = ops::relu(x);
        self.relu_signature = h;
        self.push(v, Op::Relu(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Column sums of an `N×D` matrix as `1×D`.
    pub fn col_sums(&mut self, a: Var) -> Result<Var> {
        let v = ops::col_sums(self.value(a))?;
        Ok(self.push(v, Op::ColSums(a)))
    }

    /// Divides each row of `num: N×D` by the matching entry of `den: N×1`.
    pub fn div_rows(&mut self, num: Var, den: Var) -> Result<Var> {
        let (n, d) = (self.shape(num)[0], self.shape(num)[1]);
        if self.shape(den) != [n, 1] {
            return Err(Error::dim(
                "div_rows",
                format!(
                    "denominator {:?} does not match numerator {:?}",
                    self.shape(den),
                    self.shape(num)
                ),
            ));
        }
        let dv = self.value(den).data();
        if let Some(i) = dv.iter().position(|&x| !(x > T::zero())) {
            return Err(Error::numeric(
                "div_rows",
                format!("non-positive denominator {} at row {i}", dv[i]),
            ));
        }
        let nv = self.value(num);
        let out = Tensor::from_fn(&[n, d], |idx| nv.data()[idx] / dv[idx / d]);
        out.ensure_finite("div_rows")?;
        Ok(self.push(out, Op::DivRows(num, den)))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let v = ops::conv2d_grouped(self.value(x), self.value(w), spec)?;
        Ok(self.push(v, Op::Conv2d(x, w, spec)))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let v = ops::conv_transpose2d(self.value(x), self.value(w), stride)?;
        Ok(self.push(v, Op::ConvTranspose(x, w, stride)))
    }

    pub fn channel_affine(&mut self, x: Var, scale: Var, bias: Var) -> Result<Var> {
        let v = ops::channel_affine(self.value(x), self.value(scale), self.value(bias))?;
        Ok(self.push(v, Op::ChannelAffine(x, scale, bias)))
    }

    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.shape(x)[0];
        let ones = Tensor::ones(&[c]);
        let v = ops::channel_affine(self.value(x), &ones, self.value(bias))?;
        Ok(self.push(v, Op::ChannelBias(x, bias)))
    }

    pub fn bilinear_upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let v = ops::bilinear_upsample(self.value(x), factor)?;
        Ok(self.push(v, Op::Bilinear(x, factor)))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Concat(a, b)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Mean pixelwise cross-entropy between `k×H×W` logits and a label map of
    /// `H·W` class indices, softmax taken over the channel axis.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        x.expect_rank(3, "cross_entropy")?;
        let k = x.dim(0);
        let pixels = x.dim(1) * x.dim(2);
        if labels.len() != pixels {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} labels for {pixels} pixels", labels.len()),
            ));
        }
        if let Some(p) = labels.iter().position(|&l| l >= k) {
            return Err(Error::Data(format!(
                "cross_entropy: label {} at pixel {p} outside 0..{k}",
                labels[p]
            )));
        }
        let xd = x.data();
        let mut probs = Tensor::zeros(&[k, x.dim(1), x.dim(2)]);
        let mut total = 0.0f64;
        {
            let pd = probs.data_mut();
            for p in 0..pixels {
                let max = (0..k).map(|c| xd[c * pixels + p]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for c in 0..k {
                    let e = (xd[c * pixels + p] - max).exp();
                    pd[c * pixels + p] = e;
                    z += e;
                }
                for c in 0..k {
                    pd[c * pixels + p] /= z;
                }
                let lse = max + z.ln();
                total += (lse - xd[labels[p] * pixels + p]).as_f64();
            }
        }
        let loss = Tensor::scalar(T::of(total / pixels as f64));
        loss.ensure_finite("cross_entropy")?;
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from a one-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            shapes,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, ops::matmul_nt(g, val(*b))?);
                accumulate(grads, *b, ops::matmul_tn(val(*a), g)?);
            }
            Op::MatMulNt(a, b) => {
                accumulate(grads, *a, ops::matmul(g, val(*b))?);
                accumulate(grads, *b, ops::matmul_tn(g, val(*a))?);
            }
            Op::MatMulTn(a, b) => {
                accumulate(grads, *a, ops::matmul_nt(val(*b), g)?);
                accumulate(grads, *b, ops::matmul(val(*a), g)?);
            }
            Op::Transpose(a) => accumulate(grads, *a, ops::transpose(g)?),
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, ops::mul(g, val(*b))?);
                accumulate(grads, *b, ops::mul(g, val(*a))?);
            }
            Op::ScaleBy(x, s) => {
                let factor = val(*s).item()?;
                accumulate(grads, *x, ops::scale(g, factor)?);
                let ds = ops::inner(g, val(*x))?;
                accumulate(grads, *s, Tensor::full(val(*s).shape(), ds));
            }
            Op::ScaleConst(x, c) => accumulate(grads, *x, ops::scale(g, *c)?),
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                let n = y.dim(1);
                let mut dx = Tensor::zeros(y.shape());
                for ((dxr, yr), gr) in dx
                    .data_mut()
                    .chunks_mut(n)
                    .zip(y.data().chunks(n))
                    .zip(g.data().chunks(n))
                {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for ((d, &p), &q) in dxr.iter_mut().zip(yr).zip(gr) {
                        *d = p * (q - dot);
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::Softplus(a) => {
                let dx = g.zip_map(val(*a), |q, x| q * ops::sigmoid_scalar(x))?;
                accumulate(grads, *a, dx);
            }
            Op::Relu(a) => {
                let dx = g.zip_map(val(*a), |q, x| if x > T::zero() { q } else { T::zero() })?;
                accumulate(grads, *a, dx);
            }
            Op::Reshape(a) => {
                let dx = g.clone().reshape(val(*a).shape())?;
                accumulate(grads, *a, dx);
            }
            Op::ColSums(a) => {
                let x = val(*a);
                let d = x.dim(1);
                let gd = g.data();
                accumulate(grads, *a, Tensor::from_fn(x.shape(), |i| gd[i % d]));
            }
            Op::DivRows(num, den) => {
                let (nv, dv) = (val(*num), val(*den));
                let d = nv.dim(1);
                let (gd, nd, ddd) = (g.data(), nv.data(), dv.data());
                let dnum = Tensor::from_fn(nv.shape(), |i| gd[i] / ddd[i / d]);
                let dden = Tensor::from_fn(dv.shape(), |r| {
                    let row = r * d..(r + 1) * d;
                    let s: T = gd[row.clone()].iter().zip(&nd[row]).map(|(&a, &b)| a * b).sum();
                    -s / (ddd[r] * ddd[r])
                });
                accumulate(grads, *num, dnum);
                accumulate(grads, *den, dden);
            }
            Op::Conv2d(x, w, spec) => {
                let (xv, wv) = (val(*x), val(*w));
                accumulate(grads, *x, ops::conv2d_backward_input(g, wv, xv.shape(), *spec)?);
                accumulate(grads, *w, ops::conv2d_backward_weight(xv, g, wv.shape(), *spec)?);
            }
            Op::ConvTranspose(x, w, stride) => {
                let (xv, wv) = (val(*x), val(*w));
                accumulate(grads, *x, ops::conv_transpose2d_backward_input(g, wv, *stride)?);
                accumulate(
                    grads,
                    *w,
                    ops::conv_transpose2d_backward_weight(xv, g, wv.shape(), *stride)?,
                );
            }
            Op::ChannelAffine(x, s, b) => {
                let (xv, sv) = (val(*x), val(*s));
                let bias = Tensor::zeros(sv.shape());
                accumulate(grads, *x, ops::channel_affine(g, sv, &bias)?);
                accumulate(grads, *s, ops::channel_sums(&ops::mul(g, xv)?));
                accumulate(grads, *b, ops::channel_sums(g));
            }
            Op::ChannelBias(x, b) => {
                accumulate(grads, *x, g.clone());
                accumulate(grads, *b, ops::channel_sums(g));
            }
            Op::Bilinear(x, factor) => {
                let dx = ops::bilinear_upsample_backward(g, val(*x).shape(), *factor)?;
                accumulate(grads, *x, dx);
            }
            Op::Concat(a, b) => {
                let (ga, gb) = ops::split_channels(g, val(*a).dim(0))?;
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Sum(a) => {
                let s = g.item()?;
                accumulate(grads, *a, Tensor::full(val(*a).shape(), s));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let pixels = labels.len();
                let scale = g.item()? / T::of(pixels as f64);
                let mut dx = probs.clone();
                {
                    let d = dx.data_mut();
                    for (p, &l) in labels.iter().enumerate() {
                        d[l * pixels + p] -= T::one();
                    }
                    for v in d.iter_mut() {
                        *v *= scale;
                    }
                }
                accumulate(grads, *logits, dx);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += *x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(String, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn param(&self, name: &str) -> Option<Tensor<T>> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| self.get(*v))
    }

    /// One gradient per registered parameter, shaped like the parameter.
    pub fn by_name(&self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|(n, v)| (n.clone(), self.get(*v)))
            .collect()
    }
}
