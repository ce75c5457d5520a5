//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every op eagerly; [`Graph::backward`] walks the tape
//! in reverse. Parameters enter through [`Graph::param`] and receive
//! gradients only when marked trainable in the [`ParamStore`].

use std::collections::HashMap;

use super::kernels::{col2im_add, gemm, im2col, ConvGeom};
use super::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-pixel channel norm offset of [`Graph::channel_normalize`].
pub const CHANNEL_NORM_EPS: f64 = 1e-10;

enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Silu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Option<Vec<f64>>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    AddChannel(Var, Var),
    PixelUnshuffle(Var, usize),
    PixelShuffle(Var, usize),
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Var, Var),
    Crop {
        input: Var,
        y: usize,
        x: usize,
    },
    Mean(Var),
    Sum(Var),
    GlobalAvgPool(Var),
    ChannelNormalize(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &[(ParamId, Tensor)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(ParamId, Tensor)> {
        self.params
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records values only; nothing receives gradients.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor) -> Var {
        let needs_grad = self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let needs_grad = self.grad_enabled && store.is_trainable(id);
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param,
            needs_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.nodes[a.0].value.map(f);
        self.push(value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .value(a)
            .add(self.value(b))
            .expect("add: shape mismatch");
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .value(a)
            .sub(self.value(b))
            .expect("sub: shape mismatch");
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .value(a)
            .zip_map(self.value(b), |x, y| x * y)
            .expect("mul: shape mismatch");
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// 2-D convolution of a `(C, H, W)` input with a `(O, C, k, k)` kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Var {
        let (c, h, w) = self.value(input).dims3();
        let wshape = self.value(weight).shape().to_vec();
        assert!(
            wshape.len() == 4 && wshape[1] == c && wshape[2] == wshape[3],
            "conv2d: kernel {wshape:?} does not fit input channels {c}"
        );
        let c_out = wshape[0];
        let geom = ConvGeom::new(c, h, w, wshape[2], stride, pad)
            .expect("conv2d: input smaller than kernel");
        let n = geom.cols();
        let mut out = vec![0.0; c_out * n];
        if let Some(b) = bias {
            let b = self.value(b).data();
            assert_eq!(b.len(), c_out, "conv2d: bias length");
            for (o, chunk) in out.chunks_mut(n).enumerate() {
                chunk.fill(b[o]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        let k = geom.rows();
        let cols = if geom.is_pointwise() {
            gemm(
                c_out,
                k,
                n,
                self.value(weight).data(),
                (k as isize, 1),
                self.value(input).data(),
                (n as isize, 1),
                beta,
                &mut out,
            );
            None
        } else {
            let cols = im2col(self.value(input).data(), &geom);
            gemm(
                c_out,
                k,
                n,
                self.value(weight).data(),
                (k as isize, 1),
                &cols,
                (n as isize, 1),
                beta,
                &mut out,
            );
            Some(cols)
        };
        let value = Tensor::from_vec(&[c_out, geom.h_out, geom.w_out], out).expect("conv2d output");
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        let needs = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let cols = if needs { cols } else { None };
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            &inputs,
        )
    }

    /// `W x + b` with `W: (out, in)` and `x` of any shape holding `in` values.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Var {
        let x = self.value(input).data();
        let wt = self.value(weight);
        let (o, i) = (wt.shape()[0], wt.shape()[1]);
        assert_eq!(x.len(), i, "linear: input length");
        let mut out = match bias {
            Some(b) => self.value(b).data().to_vec(),
            None => vec![0.0; o],
        };
        for (r, acc) in out.iter_mut().enumerate() {
            let row = &wt.data()[r * i..(r + 1) * i];
            *acc += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        let value = Tensor::from_vec(&[o], out).expect("linear output");
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            value,
            Op::Linear {
                input,
                weight,
                bias,
            },
            &inputs,
        )
    }

    /// Add a per-channel vector `(C)` to a `(C, H, W)` map.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        let vv = self.value(v).data();
        assert_eq!(vv.len(), c, "add_channel: vector length");
        let mut out = self.value(x).clone();
        for (ci, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            for p in plane {
                *p += vv[ci];
            }
        }
        self.push(out, Op::AddChannel(x, v), &[x, v])
    }

    pub fn pixel_unshuffle(&mut self, x: Var, f: usize) -> Var {
        let value = unshuffle(self.value(x), f);
        self.push(value, Op::PixelUnshuffle(x, f), &[x])
    }

    pub fn pixel_shuffle(&mut self, x: Var, f: usize) -> Var {
        let value = shuffle(self.value(x), f);
        self.push(value, Op::PixelShuffle(x, f), &[x])
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let (c, h, w) = src.dims3();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2: odd size {h}x{w}");
        let value = Tensor::from_fn3(c, h / 2, w / 2, |ci, y, xx| {
            0.25 * (src.at(ci, 2 * y, 2 * xx)
                + src.at(ci, 2 * y, 2 * xx + 1)
                + src.at(ci, 2 * y + 1, 2 * xx)
                + src.at(ci, 2 * y + 1, 2 * xx + 1))
        });
        self.push(value, Op::AvgPool2(x), &[x])
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let (c, h, w) = src.dims3();
        let value = Tensor::from_fn3(c, 2 * h, 2 * w, |ci, y, xx| src.at(ci, y / 2, xx / 2));
        self.push(value, Op::Upsample2(x), &[x])
    }

    /// Channel concatenation of two `(C, H, W)` maps.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (ca, h, w) = self.value(a).dims3();
        let (cb, hb, wb) = self.value(b).dims3();
        assert_eq!((h, w), (hb, wb), "concat: spatial mismatch");
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::from_vec(&[ca + cb, h, w], data).expect("concat");
        self.push(value, Op::Concat(a, b), &[a, b])
    }

    pub fn crop(&mut self, x: Var, y: usize, xo: usize, h: usize, w: usize) -> Var {
        let value = self.value(x).crop(y, xo, h, w).expect("crop out of bounds");
        self.push(value, Op::Crop { input: x, y, x: xo }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x).mean();
        self.push(Tensor::full(&[1], m), Op::Mean(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::full(&[1], s), Op::Sum(x), &[x])
    }

    /// `(C, H, W) -> (C)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / (h * w) as f64)
            .collect();
        let value = Tensor::from_vec(&[c], data).expect("pool");
        self.push(value, Op::GlobalAvgPool(x), &[x])
    }

    /// Unit-normalize each pixel's channel vector.
    pub fn channel_normalize(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let (c, h, w) = src.dims3();
        let norms = channel_norms(src);
        let mut out = src.clone();
        let hw = h * w;
        for ci in 0..c {
            for p in 0..hw {
                out.data_mut()[ci * hw + p] /= norms[p] + CHANNEL_NORM_EPS;
            }
        }
        self.push(out, Op::ChannelNormalize(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape).expect("reshape");
        self.push(value, Op::Reshape(x), &[x])
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean(sq)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(
            self.value(output).len(),
            1,
            "backward needs a scalar output"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), 1.0));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &gy, &mut grads);
            if matches!(node.op, Op::Leaf | Op::Param) {
                grads[i] = Some(gy);
            }
        }

        let mut params: Vec<(ParamId, Tensor)> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| grads[v.0].clone().map(|g| (id, g)))
            .collect();
        params.sort_by_key(|(id, _)| *id);
        Gradients {
            nodes: grads,
            params,
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, op: &Op, y: &Tensor, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        match *op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, gy.clone());
                self.accumulate(grads, b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, gy.clone());
                if self.needs(b) {
                    self.accumulate(grads, b, gy.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let g = gy.zip_map(self.value(b), |g, x| g * x).unwrap();
                    self.accumulate(grads, a, g);
                }
                if self.needs(b) {
                    let g = gy.zip_map(self.value(a), |g, x| g * x).unwrap();
                    self.accumulate(grads, b, g);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, a, gy.scale(s)),
            Op::Square(a) => {
                let g = gy.zip_map(self.value(a), |g, x| 2.0 * g * x).unwrap();
                self.accumulate(grads, a, g);
            }
            Op::Silu(a) => {
                let g = gy
                    .zip_map(self.value(a), |g, x| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .unwrap();
                self.accumulate(grads, a, g);
            }
            Op::Tanh(a) => {
                let g = gy.zip_map(y, |g, t| g * (1.0 - t * t)).unwrap();
                self.accumulate(grads, a, g);
            }
            Op::Sigmoid(a) => {
                let g = gy.zip_map(y, |g, s| g * s * (1.0 - s)).unwrap();
                self.accumulate(grads, a, g);
            }
            Op::Ln(a) => {
                let g = gy.zip_map(self.value(a), |g, x| g / x).unwrap();
                self.accumulate(grads, a, g);
            }
            Op::Clamp(a, lo, hi) => {
                let g = gy
                    .zip_map(
                        self.value(a),
                        |g, x| if x >= lo && x <= hi { g } else { 0.0 },
                    )
                    .unwrap();
                self.accumulate(grads, a, g);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                ref geom,
                ref cols,
            } => self.conv_backward(input, weight, bias, geom, cols.as_deref(), gy, grads),
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.value(input);
                let wt = self.value(weight);
                let (o, i) = (wt.shape()[0], wt.shape()[1]);
                if self.needs(input) {
                    let mut gx = vec![0.0; i];
                    for r in 0..o {
                        let gr = gy.data()[r];
                        for (acc, wv) in gx.iter_mut().zip(&wt.data()[r * i..(r + 1) * i]) {
                            *acc += gr * wv;
                        }
                    }
                    self.accumulate(grads, input, Tensor::from_vec(x.shape(), gx).unwrap());
                }
                if self.needs(weight) {
                    let mut gw = vec![0.0; o * i];
                    for r in 0..o {
                        let gr = gy.data()[r];
                        for (acc, xv) in gw[r * i..(r + 1) * i].iter_mut().zip(x.data()) {
                            *acc = gr * xv;
                        }
                    }
                    self.accumulate(grads, weight, Tensor::from_vec(&[o, i], gw).unwrap());
                }
                if let Some(b) = bias {
                    self.accumulate(grads, b, gy.clone());
                }
            }
            Op::AddChannel(x, v) => {
                self.accumulate(grads, x, gy.clone());
                if self.needs(v) {
                    let (c, h, w) = gy.dims3();
                    let sums = gy.data().chunks(h * w).map(|p| p.iter().sum()).collect();
                    self.accumulate(grads, v, Tensor::from_vec(&[c], sums).unwrap());
                }
            }
            Op::PixelUnshuffle(x, f) => self.accumulate(grads, x, shuffle(gy, f)),
            Op::PixelShuffle(x, f) => self.accumulate(grads, x, unshuffle(gy, f)),
            Op::AvgPool2(x) => {
                let (c, h, w) = self.value(x).dims3();
                let g = Tensor::from_fn3(c, h, w, |ci, yy, xx| 0.25 * gy.at(ci, yy / 2, xx / 2));
                self.accumulate(grads, x, g);
            }
            Op::Upsample2(x) => {
                let (c, h, w) = self.value(x).dims3();
                let g = Tensor::from_fn3(c, h, w, |ci, yy, xx| {
                    gy.at(ci, 2 * yy, 2 * xx)
                        + gy.at(ci, 2 * yy, 2 * xx + 1)
                        + gy.at(ci, 2 * yy + 1, 2 * xx)
                        + gy.at(ci, 2 * yy + 1, 2 * xx + 1)
                });
                self.accumulate(grads, x, g);
            }
            Op::Concat(a, b) => {
                let na = self.value(a).len();
                let ga = Tensor::from_vec(self.value(a).shape(), gy.data()[..na].to_vec()).unwrap();
                let gb = Tensor::from_vec(self.value(b).shape(), gy.data()[na..].to_vec()).unwrap();
                self.accumulate(grads, a, ga);
                self.accumulate(grads, b, gb);
            }
            Op::Crop {
                input,
                y: oy,
                x: ox,
            } => {
                if !self.needs(input) {
                    return;
                }
                let (c, h, w) = self.value(input).dims3();
                let (_, ph, pw) = gy.dims3();
                let mut g = Tensor::zeros(&[c, h, w]);
                for ci in 0..c {
                    for yy in 0..ph {
                        let dst = (ci * h + oy + yy) * w + ox;
                        let src = (ci * ph + yy) * pw;
                        for (d, s) in g.data_mut()[dst..dst + pw]
                            .iter_mut()
                            .zip(&gy.data()[src..src + pw])
                        {
                            *d = *s;
                        }
                    }
                }
                self.accumulate(grads, input, g);
            }
            Op::Mean(x) => {
                let n = self.value(x).len() as f64;
                let g = Tensor::full(self.value(x).shape(), gy.data()[0] / n);
                self.accumulate(grads, x, g);
            }
            Op::Sum(x) => {
                let g = Tensor::full(self.value(x).shape(), gy.data()[0]);
                self.accumulate(grads, x, g);
            }
            Op::GlobalAvgPool(x) => {
                let (c, h, w) = self.value(x).dims3();
                let n = (h * w) as f64;
                let g = Tensor::from_fn3(c, h, w, |ci, _, _| gy.data()[ci] / n);
                self.accumulate(grads, x, g);
            }
            Op::ChannelNormalize(x) => {
                let src = self.value(x);
                let (c, h, w) = src.dims3();
                let hw = h * w;
                let norms = channel_norms(src);
                let mut g = Tensor::zeros(&[c, h, w]);
                for p in 0..hw {
                    let n = norms[p];
                    let d = n + CHANNEL_NORM_EPS;
                    let dot: f64 = (0..c)
                        .map(|ci| gy.data()[ci * hw + p] * src.data()[ci * hw + p])
                        .sum();
                    let coef = if n > 0.0 { dot / (d * d * n) } else { 0.0 };
                    for ci in 0..c {
                        let k = ci * hw + p;
                        g.data_mut()[k] = gy.data()[k] / d - src.data()[k] * coef;
                    }
                }
                self.accumulate(grads, x, g);
            }
            Op::Reshape(x) => {
                let g = gy.clone().reshape(self.value(x).shape()).unwrap();
                self.accumulate(grads, x, g);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: &ConvGeom,
        cols: Option<&[f64]>,
        gy: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let c_out = gy.shape()[0];
        let n = geom.cols();
        let k = geom.rows();
        if let Some(b) = bias {
            if self.needs(b) {
                let sums = gy.data().chunks(n).map(|p| p.iter().sum()).collect();
                self.accumulate(grads, b, Tensor::from_vec(&[c_out], sums).unwrap());
            }
        }
        if self.needs(weight) {
            let owned;
            let cols = match cols {
                Some(c) => c,
                None if geom.is_pointwise() => self.value(input).data(),
                None => {
                    owned = im2col(self.value(input).data(), geom);
                    &owned
                }
            };
            let mut gw = vec![0.0; c_out * k];
            gemm(
                c_out,
                n,
                k,
                gy.data(),
                (n as isize, 1),
                cols,
                (1, n as isize),
                0.0,
                &mut gw,
            );
            let shape = self.value(weight).shape().to_vec();
            self.accumulate(grads, weight, Tensor::from_vec(&shape, gw).unwrap());
        }
        if self.needs(input) {
            let w = self.value(weight).data();
            let mut gcols = vec![0.0; k * n];
            gemm(
                k,
                c_out,
                n,
                w,
                (1, k as isize),
                gy.data(),
                (n as isize, 1),
                0.0,
                &mut gcols,
            );
            let gx = if geom.is_pointwise() {
                gcols
            } else {
                let mut gx = vec![0.0; geom.c_in * geom.h * geom.w];
                col2im_add(&gcols, geom, &mut gx);
                gx
            };
            let shape = self.value(input).shape().to_vec();
            self.accumulate(grads, input, Tensor::from_vec(&shape, gx).unwrap());
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn channel_norms(t: &Tensor) -> Vec<f64> {
    let (c, h, w) = t.dims3();
    let hw = h * w;
    let mut norms = vec![0.0; hw];
    for ci in 0..c {
        for (p, n) in norms.iter_mut().enumerate() {
            let v = t.data()[ci * hw + p];
            *n += v * v;
        }
    }
    norms.iter_mut().for_each(|n| *n = n.sqrt());
    norms
}

fn shuffle(src: &Tensor, f: usize) -> Tensor {
    let (c, h, w) = src.dims3();
    assert!(
        c % (f * f) == 0,
        "pixel_shuffle: {c} channels not divisible by {}",
        f * f
    );
    let co = c / (f * f);
    let (ho, wo) = (h * f, w * f);
    let mut out = vec![0.0; c * h * w];
    for oc in 0..co {
        for dy in 0..f {
            for dx in 0..f {
                let ic = (oc * f + dy) * f + dx;
                for y in 0..h {
                    for x in 0..w {
                        out[(oc * ho + y * f + dy) * wo + x * f + dx] =
                            src.data()[(ic * h + y) * w + x];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[co, ho, wo], out).expect("shuffle")
}

fn unshuffle(src: &Tensor, f: usize) -> Tensor {
    let (c, h, w) = src.dims3();
    assert!(
        h % f == 0 && w % f == 0,
        "pixel_unshuffle: {h}x{w} not divisible by {f}"
    );
    let (ho, wo) = (h / f, w / f);
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        for dy in 0..f {
            for dx in 0..f {
                let oc = (ci * f + dy) * f + dx;
                for y in 0..ho {
                    for x in 0..wo {
                        out[(oc * ho + y) * wo + x] =
                            src.data()[(ci * h + y * f + dy) * w + x * f + dx];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c * f * f, ho, wo], out).expect("unshuffle")
}
