//! A small reverse-mode automatic differentiation tape over `f64` tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes created
//! with [`Graph::param`] or [`Graph::input_with_grad`] receive gradients on
//! [`Graph::backward`]; constants never do, which is how a frozen model is
//! expressed: its parameters are bound as constants.
//!
//! Layouts follow NCHW for the convolutional ops. The tape is single-use
//! and not shared between threads.

mod kernels;
mod params;

pub use params::{BoundParams, ParamSet};

use ndarray::{ArrayD, Axis, IxDyn, Slice};

pub type Tensor = ArrayD<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Padding for a 2-D convolution: (top, bottom, left, right).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub const NONE: Padding = Padding {
        top: 0,
        bottom: 0,
        left: 0,
        right: 0,
    };

    /// "Same" output size for a stride-1 kernel of `kh x kw`.
    pub fn same(kh: usize, kw: usize) -> Self {
        let top = (kh - 1) / 2;
        let left = (kw - 1) / 2;
        Self {
            top,
            bottom: kh - 1 - top,
            left,
            right: kw - 1 - left,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowStat {
    Mean,
    Std,
    Min,
    Max,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    AddRowBias(Var, Var),
    MatMul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Square(Var),
    LogEps(Var, f64),
    Sum(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: Padding,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        x: Var,
        fh: usize,
        fw: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    MaskedMaxLast {
        x: Var,
        argmax: Vec<usize>,
    },
    RowStat {
        x: Var,
        stat: RowStat,
        arg: Vec<usize>,
    },
    BoundComplex(Var),
    ComplexAbs(Var),
    ComplexMulConst {
        x: Var,
        c: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v` or zeros shaped like `like`.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.raw_dim()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "node is not a scalar: {:?}", t.shape());
        *t.iter().next().unwrap()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // Elementwise ops never broadcast: a broadcast would lose its gradient reduction.
    fn same_shape(&self, a: Var, b: Var) {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.param(t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b);
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b);
        let v = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b);
        let v = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, k), ng)
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        let ng = self.ng(a);
        self.push(v, Op::Offset(a), ng)
    }

    /// `x [m, n] + b [n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(b);
        assert_eq!(xv.ndim(), 2);
        assert_eq!(bv.shape(), &[xv.shape()[1]]);
        let v = xv + &bv.view().insert_axis(Axis(0));
        let ng = self.ng(x) || self.ng(b);
        self.push(v, Op::AddRowBias(x, b), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = kernels::matmul(self.value(a), self.value(b), false, false);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let ng = self.ng(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self
            .value(a)
            .mapv(|x| if x >= 0.0 { x } else { slope * x });
        let ng = self.ng(a);
        self.push(v, Op::LeakyRelu(a, slope), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        let ng = self.ng(a);
        self.push(v, Op::Square(a), ng)
    }

    /// `ln(x + eps)`.
    pub fn log_eps(&mut self, a: Var, eps: f64) -> Var {
        let v = self.value(a).mapv(|x| (x + eps).ln());
        let ng = self.ng(a);
        self.push(v, Op::LogEps(a, eps), ng)
    }

    /// Sum of all elements as a 1-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::from_elem(IxDyn(&[1]), s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Stride-1 convolution of `x [N, C, H, W]` with `w [O, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: Padding) -> Var {
        let v = kernels::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            pad,
        );
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(v, Op::Conv2d { x, w, b, pad }, ng)
    }

    /// Non-overlapping max pooling over `kh x kw` windows of `[N, C, H, W]`.
    pub fn max_pool(&mut self, x: Var, kh: usize, kw: usize) -> Var {
        let (v, argmax) = kernels::max_pool_forward(self.value(x), kh, kw);
        let ng = self.ng(x);
        self.push(v, Op::MaxPool { x, argmax }, ng)
    }

    /// Nearest-neighbour upsampling of `[N, C, H, W]`.
    pub fn upsample(&mut self, x: Var, fh: usize, fw: usize) -> Var {
        let v = kernels::upsample_forward(self.value(x), fh, fw);
        let ng = self.ng(x);
        self.push(v, Op::Upsample { x, fh, fw }, ng)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self
            .value(x)
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let ng = self.ng(x);
        self.push(v, Op::Narrow { x, axis, start }, ng)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty());
        let views: Vec<_> = xs.iter().map(|v| self.value(*v).view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let ng = xs.iter().any(|x| self.ng(*x));
        self.push(
            v,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            ng,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self
            .value(x)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        let ng = self.ng(x);
        self.push(v, Op::Reshape(x), ng)
    }

    /// Max over the last axis of `x [N, ..., T]` using only the first
    /// `valid[n]` positions of each row `n`. Output is `[N, M]` where `M` is
    /// the product of the middle axes.
    pub fn masked_max_last(&mut self, x: Var, valid: &[usize]) -> Var {
        let (v, argmax) = kernels::masked_max_last(self.value(x), valid);
        let ng = self.ng(x);
        self.push(v, Op::MaskedMaxLast { x, argmax }, ng)
    }

    /// Column statistic over the rows of `x [B, D]`, giving `[1, D]`.
    pub fn row_stat(&mut self, x: Var, stat: RowStat) -> Var {
        let (v, arg) = kernels::row_stat(self.value(x), stat);
        let ng = self.ng(x);
        self.push(v, Op::RowStat { x, stat, arg }, ng)
    }

    /// Maps complex values held in channels 0/1 of `[N, 2, H, W]` through
    /// `z -> tanh(|z|) z / |z|`, bounding the magnitude below 1.
    pub fn bound_complex(&mut self, x: Var) -> Var {
        let v = kernels::bound_complex_forward(self.value(x));
        let ng = self.ng(x);
        self.push(v, Op::BoundComplex(x), ng)
    }

    /// `|z|` of channels 0/1 of `[N, 2, H, W]`, giving `[N, 1, H, W]`.
    pub fn complex_abs(&mut self, x: Var) -> Var {
        let v = kernels::complex_abs_forward(self.value(x));
        let ng = self.ng(x);
        self.push(v, Op::ComplexAbs(x), ng)
    }

    /// Complex product of `x` with a constant `c`, both `[N, 2, H, W]`.
    pub fn complex_mul_const(&mut self, x: Var, c: Tensor) -> Var {
        let v = kernels::complex_mul(self.value(x), &c);
        let ng = self.ng(x);
        self.push(v, Op::ComplexMulConst { x, c }, ng)
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(self.value(root).raw_dim()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.ng(*b) {
                    self.accumulate(grads, *b, -g);
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g * *k),
            Op::Offset(a) => self.accumulate(grads, *a, g.clone()),
            Op::AddRowBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.ng(*b) {
                    self.accumulate(grads, *b, g.sum_axis(Axis(0)));
                }
            }
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    let ga = kernels::matmul(g, self.value(*b), false, true);
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let gb = kernels::matmul(self.value(*a), g, true, false);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                d.zip_mut_with(out, |d, &y| *d *= y * (1.0 - y));
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let mut d = g.clone();
                d.zip_mut_with(out, |d, &y| *d *= 1.0 - y * y);
                self.accumulate(grads, *a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let mut d = g.clone();
                d.zip_mut_with(self.value(*a), |d, &x| {
                    if x < 0.0 {
                        *d *= slope
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let mut d = g.clone();
                d.zip_mut_with(self.value(*a), |d, &x| *d *= 2.0 * x);
                self.accumulate(grads, *a, d);
            }
            Op::LogEps(a, eps) => {
                let mut d = g.clone();
                d.zip_mut_with(self.value(*a), |d, &x| *d /= x + eps);
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let s = *g.iter().next().unwrap();
                self.accumulate(grads, *a, Tensor::from_elem(self.value(*a).raw_dim(), s));
            }
            Op::Conv2d { x, w, b, pad } => {
                let (gx, gw, gb) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *pad,
                    self.ng(*x),
                    self.ng(*w),
                    b.is_some_and(|b| self.ng(b)),
                );
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, gw);
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MaxPool { x, argmax } => {
                let gx = kernels::scatter(self.value(*x).raw_dim(), g, argmax);
                self.accumulate(grads, *x, gx);
            }
            Op::Upsample { x, fh, fw } => {
                let gx = kernels::upsample_backward(self.value(*x).raw_dim(), g, *fh, *fw);
                self.accumulate(grads, *x, gx);
            }
            Op::Narrow { x, axis, start } => {
                let mut gx = Tensor::zeros(self.value(*x).raw_dim());
                let len = g.shape()[*axis];
                gx.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + len))
                    .assign(g);
                self.accumulate(grads, *x, gx);
            }
            Op::Concat { xs, axis } => {
                let mut start = 0;
                for x in xs {
                    let len = self.value(*x).shape()[*axis];
                    if self.ng(*x) {
                        let gx = g
                            .slice_axis(Axis(*axis), Slice::from(start..start + len))
                            .to_owned();
                        self.accumulate(grads, *x, gx);
                    }
                    start += len;
                }
            }
            Op::Reshape(x) => {
                let gx = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(self.value(*x).raw_dim())
                    .expect("reshape grad");
                self.accumulate(grads, *x, gx);
            }
            Op::MaskedMaxLast { x, argmax } => {
                let gx = kernels::scatter(self.value(*x).raw_dim(), g, argmax);
                self.accumulate(grads, *x, gx);
            }
            Op::RowStat { x, stat, arg } => {
                let gx = kernels::row_stat_backward(self.value(*x), out, g, *stat, arg);
                self.accumulate(grads, *x, gx);
            }
            Op::BoundComplex(x) => {
                let gx = kernels::bound_complex_backward(self.value(*x), g);
                self.accumulate(grads, *x, gx);
            }
            Op::ComplexAbs(x) => {
                let gx = kernels::complex_abs_backward(self.value(*x), out, g);
                self.accumulate(grads, *x, gx);
            }
            Op::ComplexMulConst { x, c } => {
                let gx = kernels::complex_mul_backward(c, g);
                self.accumulate(grads, *x, gx);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
