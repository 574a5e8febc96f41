//! A small define-by-run reverse-mode autodiff engine.
//!
//! Values are computed eagerly as nodes are added; [`Graph::backward`] walks
//! the tape in reverse and accumulates adjoints for every node reachable from
//! a parameter. The primitive set is exactly what the networks and losses
//! need: stride-1 same-padding convolution, leaky-ReLU / ReLU, 2x average
//! pooling, 2x nearest upsampling, channel concatenation, elementwise
//! arithmetic, zero-pad / crop, scalar reductions, and the tomography
//! operators (whose adjoints supply exact vector-Jacobian products).
//!
//! The engine is generic over the scalar: `f32` for production, `f64` for
//! tight finite-difference testing.

use crate::geometry::Geometry;
use crate::projector::{self, FilterWindow};
use crate::tensor::Tensor;
use rayon::prelude::*;
use std::sync::Arc;
use thiserror::Error;

/// Scalar the graph is generic over.
pub trait Scalar: num_traits::Float + Send + Sync + std::fmt::Debug + 'static {}
impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline]
pub(crate) fn lit<T: Scalar>(v: f64) -> T {
    T::from(v).expect("scalar conversion")
}

#[inline]
pub(crate) fn as_f64<T: Scalar>(v: T) -> f64 {
    v.to_f64().expect("scalar conversion")
}

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("backward requires a scalar loss node, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

/// Shape + data; rank 0 (empty shape) holds a scalar.
#[derive(Debug, Clone)]
pub struct Value<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Value<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "shape/data mismatch");
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| lit::<T>(v as f64)).collect(),
        }
    }

    /// A 2-D tensor lifted to a single-channel (1, H, W) feature map.
    pub fn feature_from_tensor(t: &Tensor) -> Self {
        let (h, w) = t.dims2();
        Self {
            shape: vec![1, h, w],
            data: t.data().iter().map(|&v| lit::<T>(v as f64)).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        let shape = if self.shape.is_empty() {
            vec![1]
        } else {
            self.shape.clone()
        };
        Tensor::new(
            shape,
            self.data.iter().map(|&v| as_f64(v) as f32).collect(),
        )
        .expect("graph produced non-finite value")
    }

    /// Drops the leading unit channel of a (1, H, W) feature map.
    pub fn to_tensor2d(&self) -> Tensor {
        let (c, h, w) = self.dims3();
        assert_eq!(c, 1, "expected single channel");
        Tensor::new(
            vec![h, w],
            self.data.iter().map(|&v| as_f64(v) as f32).collect(),
        )
        .expect("graph produced non-finite value")
    }

    pub fn dims3(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected (C, H, W) value");
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn scalar_value(&self) -> T {
        assert!(self.shape.is_empty() && self.data.len() == 1);
        self.data[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    Conv2d { x: NodeId, w: NodeId, b: NodeId, pad: usize },
    LeakyRelu { x: NodeId, slope: T },
    Relu { x: NodeId },
    AvgPool2 { x: NodeId },
    Upsample2 { x: NodeId },
    ConcatC { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Affine { x: NodeId, scale: T },
    PadTo { x: NodeId },
    CropTo { x: NodeId },
    Sum { x: NodeId },
    MaskedL1 { a: NodeId, b: NodeId, mask: Option<Arc<Vec<T>>>, count: f64 },
    Fbp { x: NodeId, geom: Arc<Geometry>, window: FilterWindow },
    ForwardProject { x: NodeId, geom: Arc<Geometry> },
    Combine { parts: Vec<(NodeId, T)> },
}

struct Node<T> {
    op: Op<T>,
    value: Value<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Value<T> {
        &self.nodes[id.0].value
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, op: Op<T>, value: Value<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input; gradients do not flow into it.
    pub fn input(&mut self, value: Value<T>) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Trainable leaf; `backward` produces an adjoint for it.
    pub fn param(&mut self, value: Value<T>) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Stride-1 same-padding convolution: (Ci,H,W) * (Co,Ci,K,K) + (Co).
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (ci, h, wd) = self.value(x).dims3();
        let ws = &self.value(w).shape;
        assert_eq!(ws.len(), 4, "conv weight must be (Co,Ci,K,K)");
        let (co, wci, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(wci, ci, "conv input channels mismatch");
        assert_eq!(kh, kw, "square kernels only");
        assert_eq!(kh % 2, 1, "odd kernels only");
        assert_eq!(self.value(b).shape, vec![co], "bias shape");
        let pad = kh / 2;

        let mut out = Value::zeros(&[co, h, wd]);
        conv2d_forward(
            &self.value(x).data,
            &self.value(w).data,
            &self.value(b).data,
            (ci, h, wd),
            (co, kh),
            pad,
            &mut out.data,
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Op::Conv2d { x, w, b, pad }, out, needs)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: T) -> NodeId {
        let v = self.value(x);
        let data = v
            .data
            .iter()
            .map(|&a| if a >= T::zero() { a } else { a * slope })
            .collect();
        let value = Value::new(v.shape.clone(), data);
        let needs = self.needs(x);
        self.push(Op::LeakyRelu { x, slope }, value, needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let data = v.data.iter().map(|&a| a.max(T::zero())).collect();
        let value = Value::new(v.shape.clone(), data);
        let needs = self.needs(x);
        self.push(Op::Relu { x }, value, needs)
    }

    /// 2x2 average pooling; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let (c, h, w) = self.value(x).dims3();
        assert!(h % 2 == 0 && w % 2 == 0, "pool needs even dims, got {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let xv = &self.value(x).data;
        let quarter = lit::<T>(0.25);
        let mut data = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let base = ch * h * w + 2 * i * w + 2 * j;
                    data[ch * oh * ow + i * ow + j] =
                        (xv[base] + xv[base + 1] + xv[base + w] + xv[base + w + 1]) * quarter;
                }
            }
        }
        let needs = self.needs(x);
        self.push(Op::AvgPool2 { x }, Value::new(vec![c, oh, ow], data), needs)
    }

    /// 2x nearest-neighbor upsampling.
    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let (c, h, w) = self.value(x).dims3();
        let (oh, ow) = (h * 2, w * 2);
        let xv = &self.value(x).data;
        let mut data = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    data[ch * oh * ow + i * ow + j] = xv[ch * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        let needs = self.needs(x);
        self.push(Op::Upsample2 { x }, Value::new(vec![c, oh, ow], data), needs)
    }

    /// Channel concatenation of two (C,H,W) values with equal spatial dims.
    pub fn concat_c(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ca, h, w) = self.value(a).dims3();
        let (cb, hb, wb) = self.value(b).dims3();
        assert_eq!((h, w), (hb, wb), "concat spatial dims mismatch");
        let mut data = Vec::with_capacity((ca + cb) * h * w);
        data.extend_from_slice(&self.value(a).data);
        data.extend_from_slice(&self.value(b).data);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::ConcatC { a, b }, Value::new(vec![ca + cb, h, w], data), needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.elementwise(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.elementwise(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.elementwise(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn elementwise(&mut self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T, op: Op<T>) -> NodeId {
        assert_eq!(
            self.value(a).shape,
            self.value(b).shape,
            "elementwise shape mismatch"
        );
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Value::new(self.value(a).shape.clone(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(op, value, needs)
    }

    /// Elementwise scale * x + offset.
    pub fn affine(&mut self, x: NodeId, scale: T, offset: T) -> NodeId {
        let v = self.value(x);
        let data = v.data.iter().map(|&a| a * scale + offset).collect();
        let value = Value::new(v.shape.clone(), data);
        let needs = self.needs(x);
        self.push(Op::Affine { x, scale }, value, needs)
    }

    /// Zero-pads the bottom/right of a (C,H,W) value to (C,new_h,new_w).
    pub fn pad_to(&mut self, x: NodeId, new_h: usize, new_w: usize) -> NodeId {
        let (c, h, w) = self.value(x).dims3();
        assert!(new_h >= h && new_w >= w, "pad must not shrink");
        let xv = &self.value(x).data;
        let mut data = vec![T::zero(); c * new_h * new_w];
        for ch in 0..c {
            for i in 0..h {
                let src = ch * h * w + i * w;
                let dst = ch * new_h * new_w + i * new_w;
                data[dst..dst + w].copy_from_slice(&xv[src..src + w]);
            }
        }
        let needs = self.needs(x);
        self.push(Op::PadTo { x }, Value::new(vec![c, new_h, new_w], data), needs)
    }

    /// Crops a (C,H,W) value to its top-left (C,new_h,new_w) corner.
    pub fn crop_to(&mut self, x: NodeId, new_h: usize, new_w: usize) -> NodeId {
        let (c, h, w) = self.value(x).dims3();
        assert!(new_h <= h && new_w <= w, "crop must not grow");
        let xv = &self.value(x).data;
        let mut data = vec![T::zero(); c * new_h * new_w];
        for ch in 0..c {
            for i in 0..new_h {
                let src = ch * h * w + i * w;
                let dst = ch * new_h * new_w + i * new_w;
                data[dst..dst + new_w].copy_from_slice(&xv[src..src + new_w]);
            }
        }
        let needs = self.needs(x);
        self.push(Op::CropTo { x }, Value::new(vec![c, new_h, new_w], data), needs)
    }

    /// Scalar sum of all elements (f64 accumulation).
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.value(x).data.iter().map(|&v| as_f64(v)).sum();
        let needs = self.needs(x);
        self.push(Op::Sum { x }, Value::scalar(lit(total)), needs)
    }

    /// Mean absolute difference, optionally restricted by a 0/1 mask of the
    /// same shape: sum(mask * |a-b|) / sum(mask). The mask must select at
    /// least one element.
    pub fn masked_l1(&mut self, a: NodeId, b: NodeId, mask: Option<Arc<Vec<T>>>) -> NodeId {
        assert_eq!(
            self.value(a).shape,
            self.value(b).shape,
            "masked_l1 shape mismatch"
        );
        let n = self.value(a).data.len();
        let count = match &mask {
            Some(m) => {
                assert_eq!(m.len(), n, "mask length mismatch");
                m.iter().map(|&v| as_f64(v)).sum::<f64>()
            }
            None => n as f64,
        };
        assert!(count > 0.0, "masked_l1 over an empty mask");
        let mut acc = 0.0f64;
        for i in 0..n {
            let d = as_f64(self.value(a).data[i] - self.value(b).data[i]).abs();
            let m = mask.as_ref().map_or(1.0, |m| as_f64(m[i]));
            acc += m * d;
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(
            Op::MaskedL1 { a, b, mask, count },
            Value::scalar(lit(acc / count)),
            needs,
        )
    }

    /// Filtered backprojection node: (1,N,D) -> (1,H,W). The backward pass is
    /// the exact adjoint of the reconstruction.
    pub fn fbp(&mut self, x: NodeId, geom: Arc<Geometry>, window: FilterWindow) -> NodeId {
        let (c, n, d) = self.value(x).dims3();
        assert_eq!(c, 1, "fbp expects a single channel");
        assert_eq!((n, d), geom.sinogram_shape(), "fbp shape mismatch");
        let (h, w) = geom.image_size;
        let sino: Vec<f64> = self.value(x).data.iter().map(|&v| as_f64(v)).collect();
        let mut img = vec![0.0f64; h * w];
        projector::fbp_f64(&sino, &geom, window, &mut img);
        let data = img.into_iter().map(lit::<T>).collect();
        let needs = self.needs(x);
        self.push(
            Op::Fbp { x, geom, window },
            Value::new(vec![1, h, w], data),
            needs,
        )
    }

    /// Forward projection node: (1,H,W) -> (1,N,D); backward is the exact
    /// adjoint (backprojection).
    pub fn forward_project(&mut self, x: NodeId, geom: Arc<Geometry>) -> NodeId {
        let (c, h, w) = self.value(x).dims3();
        assert_eq!(c, 1, "forward_project expects a single channel");
        assert_eq!((h, w), geom.image_size, "forward_project shape mismatch");
        let (n, d) = geom.sinogram_shape();
        let img: Vec<f64> = self.value(x).data.iter().map(|&v| as_f64(v)).collect();
        let mut sino = vec![0.0f64; n * d];
        projector::forward_project_f64(&img, &geom, &mut sino);
        let data = sino.into_iter().map(lit::<T>).collect();
        let needs = self.needs(x);
        self.push(
            Op::ForwardProject { x, geom },
            Value::new(vec![1, n, d], data),
            needs,
        )
    }

    /// Weighted sum of scalar nodes.
    pub fn combine(&mut self, parts: Vec<(NodeId, T)>) -> NodeId {
        assert!(!parts.is_empty());
        let mut acc = 0.0f64;
        let mut needs = false;
        for &(id, coeff) in &parts {
            assert!(self.value(id).shape.is_empty(), "combine needs scalars");
            acc += as_f64(self.value(id).data[0]) * as_f64(coeff);
            needs |= self.needs(id);
        }
        self.push(Op::Combine { parts }, Value::scalar(lit(acc)), needs)
    }

    /// Reverse pass from a scalar loss; returns per-node adjoints.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, GraphError> {
        let loss_val = &self.nodes[loss.0].value;
        if !loss_val.shape.is_empty() {
            return Err(GraphError::NonScalarLoss(loss_val.shape.clone()));
        }
        let mut adj: Vec<Option<Value<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Value::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = adj[idx].take() else {
                continue;
            };
            // Re-store for the caller before propagating.
            let node = &self.nodes[idx];
            self.propagate(node, &upstream, &mut adj);
            adj[idx] = Some(upstream);
        }
        Ok(Gradients { adj })
    }

    fn accumulate(&self, adj: &mut [Option<Value<T>>], id: NodeId, delta: &[T]) {
        if !self.needs(id) {
            return;
        }
        let slot = &mut adj[id.0];
        match slot {
            Some(v) => {
                debug_assert_eq!(v.data.len(), delta.len());
                for (a, &d) in v.data.iter_mut().zip(delta) {
                    *a = *a + d;
                }
            }
            None => {
                let shape = self.nodes[id.0].value.shape.clone();
                *slot = Some(Value::new(shape, delta.to_vec()));
            }
        }
    }

    fn propagate(&self, node: &Node<T>, upstream: &Value<T>, adj: &mut [Option<Value<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, pad } => {
                let (ci, h, wd) = self.value(*x).dims3();
                let ws = &self.value(*w).shape;
                let (co, k) = (ws[0], ws[2]);
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); ci * h * wd];
                    conv2d_backward_input(
                        &self.value(*w).data,
                        &upstream.data,
                        (ci, h, wd),
                        (co, k),
                        *pad,
                        &mut dx,
                    );
                    self.accumulate(adj, *x, &dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); co * ci * k * k];
                    conv2d_backward_weight(
                        &self.value(*x).data,
                        &upstream.data,
                        (ci, h, wd),
                        (co, k),
                        *pad,
                        &mut dw,
                    );
                    self.accumulate(adj, *w, &dw);
                }
                if self.needs(*b) {
                    let plane = h * wd;
                    let db: Vec<T> = (0..co)
                        .map(|c| {
                            let s: f64 = upstream.data[c * plane..(c + 1) * plane]
                                .iter()
                                .map(|&v| as_f64(v))
                                .sum();
                            lit(s)
                        })
                        .collect();
                    self.accumulate(adj, *b, &db);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let dx: Vec<T> = self
                    .value(*x)
                    .data
                    .iter()
                    .zip(&upstream.data)
                    .map(|(&v, &g)| if v >= T::zero() { g } else { g * *slope })
                    .collect();
                self.accumulate(adj, *x, &dx);
            }
            Op::Relu { x } => {
                let dx: Vec<T> = self
                    .value(*x)
                    .data
                    .iter()
                    .zip(&upstream.data)
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(adj, *x, &dx);
            }
            Op::AvgPool2 { x } => {
                let (c, h, w) = self.value(*x).dims3();
                let (oh, ow) = (h / 2, w / 2);
                let quarter = lit::<T>(0.25);
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            let g = upstream.data[ch * oh * ow + i * ow + j] * quarter;
                            let base = ch * h * w + 2 * i * w + 2 * j;
                            dx[base] = dx[base] + g;
                            dx[base + 1] = dx[base + 1] + g;
                            dx[base + w] = dx[base + w] + g;
                            dx[base + w + 1] = dx[base + w + 1] + g;
                        }
                    }
                }
                self.accumulate(adj, *x, &dx);
            }
            Op::Upsample2 { x } => {
                let (c, h, w) = self.value(*x).dims3();
                let (oh, ow) = (h * 2, w * 2);
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            let idx = ch * h * w + (i / 2) * w + j / 2;
                            dx[idx] = dx[idx] + upstream.data[ch * oh * ow + i * ow + j];
                        }
                    }
                }
                self.accumulate(adj, *x, &dx);
            }
            Op::ConcatC { a, b } => {
                let na = self.value(*a).data.len();
                self.accumulate(adj, *a, &upstream.data[..na]);
                self.accumulate(adj, *b, &upstream.data[na..]);
            }
            Op::Add { a, b } => {
                self.accumulate(adj, *a, &upstream.data);
                self.accumulate(adj, *b, &upstream.data);
            }
            Op::Sub { a, b } => {
                self.accumulate(adj, *a, &upstream.data);
                let neg: Vec<T> = upstream.data.iter().map(|&g| -g).collect();
                self.accumulate(adj, *b, &neg);
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let da: Vec<T> = upstream
                        .data
                        .iter()
                        .zip(&self.value(*b).data)
                        .map(|(&g, &bv)| g * bv)
                        .collect();
                    self.accumulate(adj, *a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<T> = upstream
                        .data
                        .iter()
                        .zip(&self.value(*a).data)
                        .map(|(&g, &av)| g * av)
                        .collect();
                    self.accumulate(adj, *b, &db);
                }
            }
            Op::Affine { x, scale, .. } => {
                let dx: Vec<T> = upstream.data.iter().map(|&g| g * *scale).collect();
                self.accumulate(adj, *x, &dx);
            }
            Op::PadTo { x } => {
                let (c, h, w) = self.value(*x).dims3();
                let (_, nh, nw) = node.value.dims3();
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for i in 0..h {
                        let src = ch * nh * nw + i * nw;
                        let dst = ch * h * w + i * w;
                        dx[dst..dst + w].copy_from_slice(&upstream.data[src..src + w]);
                    }
                }
                self.accumulate(adj, *x, &dx);
            }
            Op::CropTo { x } => {
                let (c, h, w) = self.value(*x).dims3();
                let (_, nh, nw) = node.value.dims3();
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for i in 0..nh {
                        let src = ch * nh * nw + i * nw;
                        let dst = ch * h * w + i * w;
                        dx[dst..dst + nw].copy_from_slice(&upstream.data[src..src + nw]);
                    }
                }
                self.accumulate(adj, *x, &dx);
            }
            Op::Sum { x } => {
                let g = upstream.data[0];
                let dx = vec![g; self.value(*x).data.len()];
                self.accumulate(adj, *x, &dx);
            }
            Op::MaskedL1 { a, b, mask, count } => {
                let g = upstream.data[0];
                let inv = lit::<T>(1.0 / count);
                let n = self.value(*a).data.len();
                let mut da = vec![T::zero(); n];
                for i in 0..n {
                    let diff = self.value(*a).data[i] - self.value(*b).data[i];
                    let sign = if diff > T::zero() {
                        T::one()
                    } else if diff < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    let m = mask.as_ref().map_or(T::one(), |m| m[i]);
                    da[i] = g * m * sign * inv;
                }
                if self.needs(*a) {
                    self.accumulate(adj, *a, &da);
                }
                if self.needs(*b) {
                    for v in da.iter_mut() {
                        *v = -*v;
                    }
                    self.accumulate(adj, *b, &da);
                }
            }
            Op::Fbp { x, geom, window } => {
                let (h, w) = geom.image_size;
                debug_assert_eq!(upstream.data.len(), h * w);
                let img: Vec<f64> = upstream.data.iter().map(|&v| as_f64(v)).collect();
                let (n, d) = geom.sinogram_shape();
                let mut sino = vec![0.0f64; n * d];
                projector::fbp_vjp_f64(&img, geom, *window, &mut sino);
                let dx: Vec<T> = sino.into_iter().map(lit::<T>).collect();
                self.accumulate(adj, *x, &dx);
            }
            Op::ForwardProject { x, geom } => {
                let (n, d) = geom.sinogram_shape();
                debug_assert_eq!(upstream.data.len(), n * d);
                let sino: Vec<f64> = upstream.data.iter().map(|&v| as_f64(v)).collect();
                let (h, w) = geom.image_size;
                let mut img = vec![0.0f64; h * w];
                projector::back_project_f64(&sino, geom, &mut img);
                let dx: Vec<T> = img.into_iter().map(lit::<T>).collect();
                self.accumulate(adj, *x, &dx);
            }
            Op::Combine { parts } => {
                let g = upstream.data[0];
                for &(id, coeff) in parts {
                    self.accumulate(adj, id, &[g * coeff]);
                }
            }
        }
    }
}

#[derive(Debug)]
pub struct Gradients<T> {
    adj: Vec<Option<Value<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Adjoint of a node; `None` when no gradient reached it.
    pub fn get(&self, id: NodeId) -> Option<&Value<T>> {
        self.adj[id.0].as_ref()
    }
}

// ---------------------------------------------------------------------------
// Convolution kernels. Shifted-row SAXPY formulation: contiguous inner loops
// over the image width so the compiler can vectorize.
// ---------------------------------------------------------------------------

fn conv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: &[T],
    (ci, h, wd): (usize, usize, usize),
    (_co, k): (usize, usize),
    pad: usize,
    out: &mut [T],
) {
    let plane = h * wd;
    out.par_chunks_mut(plane).enumerate().for_each(|(oc, o)| {
        o.fill(b[oc]);
        for ic in 0..ci {
            let xin = &x[ic * plane..(ic + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - pad as isize;
                let (y0, y1) = shift_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad as isize;
                    let (x0, x1) = shift_range(wd, dx);
                    if y0 >= y1 || x0 >= x1 {
                        continue;
                    }
                    let wv = w[((oc * ci + ic) * k + ky) * k + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    for y in y0..y1 {
                        let src = ((y as isize + dy) as usize) * wd + (x0 as isize + dx) as usize;
                        let dst = y * wd + x0;
                        let len = x1 - x0;
                        let (orow, irow) = (&mut o[dst..dst + len], &xin[src..src + len]);
                        for j in 0..len {
                            orow[j] = irow[j].mul_add(wv, orow[j]);
                        }
                    }
                }
            }
        }
    });
}

fn conv2d_backward_input<T: Scalar>(
    w: &[T],
    dout: &[T],
    (ci, h, wd): (usize, usize, usize),
    (co, k): (usize, usize),
    pad: usize,
    dx: &mut [T],
) {
    let plane = h * wd;
    dx.par_chunks_mut(plane).enumerate().for_each(|(ic, dxi)| {
        for oc in 0..co {
            let go = &dout[oc * plane..(oc + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - pad as isize;
                let (y0, y1) = shift_range(h, dy);
                for kx in 0..k {
                    let dxs = kx as isize - pad as isize;
                    let (x0, x1) = shift_range(wd, dxs);
                    if y0 >= y1 || x0 >= x1 {
                        continue;
                    }
                    let wv = w[((oc * ci + ic) * k + ky) * k + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    // Forward read x[y+dy, x+dx] for out[y, x]; the transpose
                    // adds into dx[y+dy, x+dx] from dout[y, x].
                    for y in y0..y1 {
                        let dst = ((y as isize + dy) as usize) * wd + (x0 as isize + dxs) as usize;
                        let src = y * wd + x0;
                        let len = x1 - x0;
                        let (drow, grow) = (&mut dxi[dst..dst + len], &go[src..src + len]);
                        for j in 0..len {
                            drow[j] = grow[j].mul_add(wv, drow[j]);
                        }
                    }
                }
            }
        }
    });
}

fn conv2d_backward_weight<T: Scalar>(
    x: &[T],
    dout: &[T],
    (ci, h, wd): (usize, usize, usize),
    (_co, k): (usize, usize),
    pad: usize,
    dw: &mut [T],
) {
    let plane = h * wd;
    let per_oc = ci * k * k;
    dw.par_chunks_mut(per_oc).enumerate().for_each(|(oc, dwoc)| {
        let go = &dout[oc * plane..(oc + 1) * plane];
        for ic in 0..ci {
            let xin = &x[ic * plane..(ic + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - pad as isize;
                let (y0, y1) = shift_range(h, dy);
                for kx in 0..k {
                    let dxs = kx as isize - pad as isize;
                    let (x0, x1) = shift_range(wd, dxs);
                    let mut acc = 0.0f64;
                    for y in y0..y1 {
                        let src = ((y as isize + dy) as usize) * wd + (x0 as isize + dxs) as usize;
                        let dst = y * wd + x0;
                        let len = x1 - x0;
                        let (xrow, grow) = (&xin[src..src + len], &go[dst..dst + len]);
                        let mut row_acc = T::zero();
                        for j in 0..len {
                            row_acc = xrow[j].mul_add(grow[j], row_acc);
                        }
                        acc += as_f64(row_acc);
                    }
                    dwoc[(ic * k + ky) * k + kx] = lit(acc);
                }
            }
        }
    });
}

#[inline]
fn shift_range(n: usize, d: isize) -> (usize, usize) {
    // Output rows y where y + d stays inside [0, n).
    let lo = (-d).max(0) as usize;
    let hi = (n as isize).min(n as isize - d).max(0) as usize;
    (lo.min(n), hi)
}
