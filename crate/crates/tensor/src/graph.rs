//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every value produced by an operation together with the
//! provenance needed to push gradients back to its inputs. Nodes are appended
//! in evaluation order, so walking the tape backwards is a valid reverse
//! topological order.

use crate::conv::{self, ConvGeom, ConvSpec};
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::{dims5, strides_of, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of one training-mode batch-norm evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, used for the running estimate.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Sigmoid(Var),
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor<T>),
    Square(Var),
    Sum(Var),
    SpatialMean(Var),
    Upsample2x(Var),
    PadCrop {
        x: Var,
        from: [usize; 2],
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// A single forward evaluation and its gradient tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// Output shape when broadcasting `a` against `b` (size-1 axes stretch).
fn broadcast_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>> {
    let err = || TensorError::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() != b.len() {
        return Err(err());
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(err()),
        })
        .collect()
}

/// For every flat index of `out`, the flat index of the (broadcast) source.
fn broadcast_offsets(out: &[usize], src: &[usize]) -> Vec<usize> {
    let src_strides = strides_of(src);
    let eff: Vec<usize> = src
        .iter()
        .zip(&src_strides)
        .map(|(&n, &s)| if n == 1 { 0 } else { s })
        .collect();
    let total: usize = out.iter().product();
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; out.len()];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for axis in (0..out.len()).rev() {
            idx[axis] += 1;
            off += eff[axis];
            if idx[axis] < out[axis] {
                break;
            }
            off -= eff[axis] * out[axis];
            idx[axis] = 0;
        }
    }
    offsets
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Spatial source index along one axis for `pad_crop`, or `None` in padding.
fn pad_crop_source(target: usize, from: usize, i: usize) -> Option<usize> {
    if target >= from {
        let before = (target - from) / 2;
        (i >= before && i - before < from).then(|| i - before)
    } else {
        Some(i + (from - target) / 2)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf holding `value`; gradients are tracked when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Shapes of every node in creation order.
    pub fn node_shapes(&self) -> impl Iterator<Item = &[usize]> {
        self.nodes.iter().map(|n| n.value.shape())
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a node after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let bias = b.map(|b| &self.nodes[b.0].value);
        let (out, geom) = conv::forward(self.value(x), self.value(w), bias, spec)?;
        check_finite(&out, "conv3d")?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv3d { x, w, b, geom }, &inputs))
    }

    /// Training-mode batch normalization over `(b, t, h, w)` per channel.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<T>)> {
        let [b, c, t, h, w] = dims5(self.shape(x), "batchnorm")?;
        self.check_bn_params(c, gamma, beta)?;
        let plane = t * h * w;
        let n = b * plane;
        if n == 0 {
            return Err(TensorError::Config {
                op: "batchnorm",
                reason: "empty reduction set".into(),
            });
        }
        let xd = self.value(x).data();
        let nf = T::from_usize(n).unwrap();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for bi in 0..b {
                let start = (bi * c + ch) * plane;
                s = s + xd[start..start + plane].iter().copied().sum::<T>();
            }
            let m = s / nf;
            let mut ss = T::zero();
            for bi in 0..b {
                let start = (bi * c + ch) * plane;
                ss = ss
                    + xd[start..start + plane]
                        .iter()
                        .map(|&v| (v - m) * (v - m))
                        .sum::<T>();
            }
            mean[ch] = m;
            var[ch] = ss / nf;
        }
        let eps_t = T::from_f64_lossy(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let (out, xhat) = self.bn_apply(x, gamma, beta, &mean, &inv_std, [b, c, plane]);
        check_finite(&out, "batchnorm")?;
        let unbiased = if n > 1 {
            let scale = nf / T::from_usize(n - 1).unwrap();
            var.iter().map(|&v| v * scale).collect()
        } else {
            var.clone()
        };
        let id = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: true,
            },
            &[x, gamma, beta],
        );
        Ok((
            id,
            BatchStats {
                mean,
                var: unbiased,
            },
        ))
    }

    /// Inference-mode batch normalization with fixed running statistics.
    pub fn batchnorm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let [b, c, t, h, w] = dims5(self.shape(x), "batchnorm")?;
        self.check_bn_params(c, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::Shape {
                op: "batchnorm running stats",
                lhs: vec![running_mean.len(), running_var.len()],
                rhs: vec![c],
            });
        }
        let eps_t = T::from_f64_lossy(eps);
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + eps_t).sqrt())
            .collect();
        let (out, xhat) = self.bn_apply(x, gamma, beta, running_mean, &inv_std, [b, c, t * h * w]);
        check_finite(&out, "batchnorm")?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: false,
            },
            &[x, gamma, beta],
        ))
    }

    fn check_bn_params(&self, c: usize, gamma: Var, beta: Var) -> Result<()> {
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(TensorError::Shape {
                    op: "batchnorm",
                    lhs: self.shape(p).to_vec(),
                    rhs: vec![c],
                });
            }
        }
        Ok(())
    }

    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        [b, c, plane]: [usize; 3],
    ) -> (Tensor<T>, Vec<T>) {
        let xv = self.value(x);
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let start = (bi * c + ch) * plane;
                for i in start..start + plane {
                    let z = (xv.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = z;
                    out[i] = gd[ch] * z + bd[ch];
                }
            }
        }
        (Tensor::new(xv.shape().to_vec(), out).unwrap(), xhat)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        check_finite(&out, "sigmoid")?;
        Ok(self.push(out, Op::Sigmoid(x), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(T::zero()));
        check_finite(&out, "relu")?;
        Ok(self.push(out, Op::Relu(x), &[x]))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        let shape = broadcast_shape(av.shape(), bv.shape(), op)?;
        let data = if av.shape() == bv.shape() {
            av.data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else {
            let oa = broadcast_offsets(&shape, av.shape());
            let ob = broadcast_offsets(&shape, bv.shape());
            oa.iter()
                .zip(&ob)
                .map(|(&i, &j)| f(av.data()[i], bv.data()[j]))
                .collect()
        };
        let out = Tensor::new(shape, data)?;
        check_finite(&out, op)?;
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != c.shape() {
            return Err(TensorError::Shape {
                op: "mul_const",
                lhs: xv.shape().to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        let data = xv.data().iter().zip(c.data()).map(|(&a, &b)| a * b).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        check_finite(&out, "mul_const")?;
        Ok(self.push(out, Op::MulConst(x, c), &[x]))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * v);
        check_finite(&out, "square")?;
        Ok(self.push(out, Op::Square(x), &[x]))
    }

    /// Sum of all elements as a scalar (shape `[]`).
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        check_finite(&out, "sum")?;
        Ok(self.push(out, Op::Sum(x), &[x]))
    }

    /// Mean over the two spatial axes: `(b,c,t,h,w) -> (b,c,t,1,1)`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let [b, c, t, h, w] = dims5(self.shape(x), "spatial_mean")?;
        let plane = h * w;
        let denom = T::from_usize(plane).unwrap();
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() / denom)
            .collect();
        let out = Tensor::new(vec![b, c, t, 1, 1], data)?;
        check_finite(&out, "spatial_mean")?;
        Ok(self.push(out, Op::SpatialMean(x), &[x]))
    }

    /// Nearest-neighbour 2x upsampling of the spatial axes.
    pub fn upsample2x_spatial(&mut self, x: Var) -> Result<Var> {
        let [b, c, t, h, w] = dims5(self.shape(x), "upsample2x")?;
        let (h2, w2) = (2 * h, 2 * w);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); b * c * t * h2 * w2];
        for (slab, dst) in data.chunks_mut(h2 * w2).enumerate() {
            let s = &src[slab * h * w..(slab + 1) * h * w];
            for i in 0..h2 {
                for j in 0..w2 {
                    dst[i * w2 + j] = s[(i / 2) * w + j / 2];
                }
            }
        }
        let out = Tensor::new(vec![b, c, t, h2, w2], data)?;
        Ok(self.push(out, Op::Upsample2x(x), &[x]))
    }

    /// Zero-pads or centre-crops each spatial axis to the target extent.
    pub fn pad_crop_spatial(&mut self, x: Var, target_h: usize, target_w: usize) -> Result<Var> {
        let [b, c, t, h, w] = dims5(self.shape(x), "pad_crop")?;
        if target_h == 0 || target_w == 0 {
            return Err(TensorError::Config {
                op: "pad_crop",
                reason: "target extent must be positive".into(),
            });
        }
        let src = self.value(x).data();
        let mut data = vec![T::zero(); b * c * t * target_h * target_w];
        for (slab, dst) in data.chunks_mut(target_h * target_w).enumerate() {
            let s = &src[slab * h * w..(slab + 1) * h * w];
            for i in 0..target_h {
                let Some(si) = pad_crop_source(target_h, h, i) else {
                    continue;
                };
                for j in 0..target_w {
                    if let Some(sj) = pad_crop_source(target_w, w, j) {
                        dst[i * target_w + j] = s[si * w + sj];
                    }
                }
            }
        }
        let out = Tensor::new(vec![b, c, t, target_h, target_w], data)?;
        Ok(self.push(out, Op::PadCrop { x, from: [h, w] }, &[x]))
    }

    /// Reverse sweep from a scalar `loss`. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::Usage(
                "backward already ran on this graph; rebuild it with a new forward pass".into(),
            ));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(gout) = self.nodes[id].grad.take() else {
                continue;
            };
            self.propagate(id, &gout);
            self.nodes[id].grad = Some(gout);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
            None => node.grad = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Sums a broadcast gradient back onto the shape of `src`.
    fn reduce_to(&self, gout: &[T], out_shape: &[usize], src: Var) -> Vec<T> {
        let src_shape = self.shape(src);
        if src_shape == out_shape {
            return gout.to_vec();
        }
        let offsets = broadcast_offsets(out_shape, src_shape);
        let mut g = vec![T::zero(); self.value(src).len()];
        for (o, &gv) in offsets.iter().zip(gout) {
            g[*o] = g[*o] + gv;
        }
        g
    }

    fn propagate(&mut self, id: usize, gout: &[T]) {
        let out_shape = self.nodes[id].value.shape().to_vec();
        // Temporarily move the op out to appease the borrow checker.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv3d { x, w, b, geom } => {
                let (dx, dw, db) =
                    conv::backward(geom, self.value(*x), self.value(*w), gout);
                self.accumulate(*x, dx);
                self.accumulate(*w, dw);
                if let Some(b) = b {
                    self.accumulate(*b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let [b, c, t, h, w] = dims5(&out_shape, "batchnorm").unwrap();
                let plane = t * h * w;
                let n = T::from_usize(b * plane).unwrap();
                let gd = self.value(*gamma).data().to_vec();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let start = (bi * c + ch) * plane;
                        for i in start..start + plane {
                            dgamma[ch] = dgamma[ch] + gout[i] * xhat[i];
                            dbeta[ch] = dbeta[ch] + gout[i];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); gout.len()];
                    for ch in 0..c {
                        let k = gd[ch] * inv_std[ch];
                        for bi in 0..b {
                            let start = (bi * c + ch) * plane;
                            for i in start..start + plane {
                                dx[i] = if *train {
                                    // dxhat = gout * gamma; sums of dxhat are gamma * dbeta etc.
                                    k * (gout[i] - (dbeta[ch] + xhat[i] * dgamma[ch]) / n)
                                } else {
                                    k * gout[i]
                                };
                            }
                        }
                    }
                    self.accumulate(*x, dx);
                }
                self.accumulate(*gamma, dgamma);
                self.accumulate(*beta, dbeta);
            }
            Op::Sigmoid(x) => {
                let out = self.nodes[id].value.data();
                let g = out
                    .iter()
                    .zip(gout)
                    .map(|(&s, &g)| g * s * (T::one() - s))
                    .collect();
                self.accumulate(*x, g);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let g = xv
                    .iter()
                    .zip(gout)
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(*x, g);
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let negate = matches!(op, Op::Sub(..));
                if self.wants(*a) {
                    let ga = self.reduce_to(gout, &out_shape, *a);
                    self.accumulate(*a, ga);
                }
                if self.wants(*b) {
                    let mut gb = self.reduce_to(gout, &out_shape, *b);
                    if negate {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    self.accumulate(*b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ash, bsh) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let oa = broadcast_offsets(&out_shape, &ash);
                let ob = broadcast_offsets(&out_shape, &bsh);
                if self.wants(*a) {
                    let bd = self.value(*b).data();
                    let full: Vec<T> = ob.iter().zip(gout).map(|(&j, &g)| g * bd[j]).collect();
                    let ga = self.reduce_to(&full, &out_shape, *a);
                    self.accumulate(*a, ga);
                }
                if self.wants(*b) {
                    let ad = self.value(*a).data();
                    let full: Vec<T> = oa.iter().zip(gout).map(|(&i, &g)| g * ad[i]).collect();
                    let gb = self.reduce_to(&full, &out_shape, *b);
                    self.accumulate(*b, gb);
                }
            }
            Op::MulConst(x, c) => {
                let g = gout.iter().zip(c.data()).map(|(&g, &k)| g * k).collect();
                self.accumulate(*x, g);
            }
            Op::Square(x) => {
                let two = T::from_f64_lossy(2.0);
                let xv = self.value(*x).data();
                let g = xv.iter().zip(gout).map(|(&v, &g)| two * v * g).collect();
                self.accumulate(*x, g);
            }
            Op::Sum(x) => {
                let g = vec![gout[0]; self.value(*x).len()];
                self.accumulate(*x, g);
            }
            Op::SpatialMean(x) => {
                let [_, _, _, h, w] = dims5(self.shape(*x), "spatial_mean").unwrap();
                let plane = h * w;
                let denom = T::from_usize(plane).unwrap();
                let mut g = vec![T::zero(); self.value(*x).len()];
                for (slab, dst) in g.chunks_mut(plane).enumerate() {
                    dst.fill(gout[slab] / denom);
                }
                self.accumulate(*x, g);
            }
            Op::Upsample2x(x) => {
                let [_, _, _, h, w] = dims5(self.shape(*x), "upsample2x").unwrap();
                let (h2, w2) = (2 * h, 2 * w);
                let mut g = vec![T::zero(); self.value(*x).len()];
                for (slab, dst) in g.chunks_mut(h * w).enumerate() {
                    let s = &gout[slab * h2 * w2..(slab + 1) * h2 * w2];
                    for i in 0..h2 {
                        for j in 0..w2 {
                            let d = &mut dst[(i / 2) * w + j / 2];
                            *d = *d + s[i * w2 + j];
                        }
                    }
                }
                self.accumulate(*x, g);
            }
            Op::PadCrop { x, from: [h, w] } => {
                let (th, tw) = (out_shape[3], out_shape[4]);
                let mut g = vec![T::zero(); self.value(*x).len()];
                for (slab, dst) in g.chunks_mut(h * w).enumerate() {
                    let s = &gout[slab * th * tw..(slab + 1) * th * tw];
                    for i in 0..th {
                        let Some(si) = pad_crop_source(th, *h, i) else {
                            continue;
                        };
                        for j in 0..tw {
                            if let Some(sj) = pad_crop_source(tw, *w, j) {
                                dst[si * w + sj] = s[i * tw + j];
                            }
                        }
                    }
                }
                self.accumulate(*x, g);
            }
        }
        self.nodes[id].op = op;
    }
}
