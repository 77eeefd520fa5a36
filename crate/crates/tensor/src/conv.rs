//! 3-D cross-correlation over `(b, c, t, h, w)` tensors.
//!
//! The fast path lowers each `(batch, output-time)` slab to a matrix product
//! (im2col). [`reference`] is the direct nested-loop definition kept as the
//! oracle for it.

use crate::error::{Result, TensorError};
use crate::parallel;
use crate::scalar::Scalar;
use crate::tensor::{dims5, Tensor};

/// Kernel, stride and padding along `(t, h, w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvSpec {
    /// Stride-1 convolution whose output matches the input extent (odd kernels).
    pub fn same(kernel: [usize; 3]) -> Self {
        Self {
            kernel,
            stride: [1, 1, 1],
            padding: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2],
        }
    }

    pub fn pointwise() -> Self {
        Self::same([1, 1, 1])
    }

    pub fn with_stride(mut self, stride: [usize; 3]) -> Self {
        self.stride = stride;
        self
    }

    pub fn output_len(&self, axis: usize, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding[axis];
        if self.stride[axis] == 0 || padded < self.kernel[axis] {
            return None;
        }
        Some((padded - self.kernel[axis]) / self.stride[axis] + 1)
    }
}

/// Fully resolved geometry of one convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub spec: ConvSpec,
}

impl ConvGeom {
    pub fn resolve(x_shape: &[usize], w_shape: &[usize], spec: ConvSpec) -> Result<Self> {
        let [b, c_in, t, h, w] = dims5(x_shape, "conv3d")?;
        let [c_out, wc_in, kt, kh, kw] = dims5(w_shape, "conv3d")?;
        if wc_in != c_in || [kt, kh, kw] != spec.kernel {
            return Err(TensorError::Shape {
                op: "conv3d",
                lhs: x_shape.to_vec(),
                rhs: w_shape.to_vec(),
            });
        }
        let input = [t, h, w];
        let mut output = [0; 3];
        for axis in 0..3 {
            output[axis] = match spec.output_len(axis, input[axis]) {
                Some(n) if n >= 1 => n,
                _ => {
                    return Err(TensorError::Shape {
                        op: "conv3d",
                        lhs: x_shape.to_vec(),
                        rhs: w_shape.to_vec(),
                    })
                }
            };
        }
        Ok(Self {
            batch: b,
            c_in,
            c_out,
            input,
            output,
            spec,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.c_out,
            self.output[0],
            self.output[1],
            self.output[2],
        ]
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.spec.kernel.iter().product::<usize>()
    }

    fn in_len(&self) -> usize {
        self.c_in * self.input.iter().product::<usize>()
    }

    fn out_len(&self) -> usize {
        self.c_out * self.output.iter().product::<usize>()
    }

    fn plane_out(&self) -> usize {
        self.output[1] * self.output[2]
    }

    /// Input coordinate hit by kernel offset `k` at output position `o`, if inside.
    #[inline]
    fn source(&self, axis: usize, o: usize, k: usize) -> Option<usize> {
        let pos = (o * self.spec.stride[axis] + k) as isize - self.spec.padding[axis] as isize;
        (pos >= 0 && (pos as usize) < self.input[axis]).then_some(pos as usize)
    }

    /// Fills `cols` (patch_len x plane_out) for one batch item and output time.
    fn im2col<T: Scalar>(&self, x_b: &[T], to: usize, cols: &mut [T]) {
        let [kt, kh, kw] = self.spec.kernel;
        let [_, hi, wi] = self.input;
        let [_, ho, wo] = self.output;
        let plane = ho * wo;
        let mut row = 0;
        for ci in 0..self.c_in {
            for dt in 0..kt {
                let ti = self.source(0, to, dt);
                for dh in 0..kh {
                    for dw in 0..kw {
                        let dst = &mut cols[row * plane..(row + 1) * plane];
                        match ti {
                            None => dst.fill(T::zero()),
                            Some(ti) => {
                                let base = (ci * self.input[0] + ti) * hi * wi;
                                for oh in 0..ho {
                                    let line = &mut dst[oh * wo..(oh + 1) * wo];
                                    match self.source(1, oh, dh) {
                                        None => line.fill(T::zero()),
                                        Some(hh) => {
                                            let src = base + hh * wi;
                                            for (ow, v) in line.iter_mut().enumerate() {
                                                *v = match self.source(2, ow, dw) {
                                                    Some(ww) => x_b[src + ww],
                                                    None => T::zero(),
                                                };
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back into the input gradient of one batch item.
    fn col2im<T: Scalar>(&self, cols: &[T], to: usize, dx_b: &mut [T]) {
        let [kt, kh, kw] = self.spec.kernel;
        let [_, hi, wi] = self.input;
        let [_, ho, wo] = self.output;
        let plane = ho * wo;
        let mut row = 0;
        for ci in 0..self.c_in {
            for dt in 0..kt {
                let ti = self.source(0, to, dt);
                for dh in 0..kh {
                    for dw in 0..kw {
                        if let Some(ti) = ti {
                            let src = &cols[row * plane..(row + 1) * plane];
                            let base = (ci * self.input[0] + ti) * hi * wi;
                            for oh in 0..ho {
                                if let Some(hh) = self.source(1, oh, dh) {
                                    let dst = base + hh * wi;
                                    for ow in 0..wo {
                                        if let Some(ww) = self.source(2, ow, dw) {
                                            dx_b[dst + ww] = dx_b[dst + ww] + src[oh * wo + ow];
                                        }
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

/// im2col forward. `weight` is `(c_out, c_in, kt, kh, kw)`, `bias` is `(c_out)`.
pub fn forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<(Tensor<T>, ConvGeom)> {
    let g = ConvGeom::resolve(x.shape(), weight.shape(), spec)?;
    if let Some(b) = bias {
        if b.shape() != [g.c_out] {
            return Err(TensorError::Shape {
                op: "conv3d bias",
                lhs: b.shape().to_vec(),
                rhs: vec![g.c_out],
            });
        }
    }
    let mut out = vec![T::zero(); g.batch * g.out_len()];
    let (k, plane, t_out) = (g.patch_len(), g.plane_out(), g.output[0]);
    let xd = x.data();
    let wd = weight.data();
    parallel::for_each_chunk_mut(&mut out, g.out_len(), |b, out_b| {
        let x_b = &xd[b * g.in_len()..(b + 1) * g.in_len()];
        let mut cols = vec![T::zero(); k * plane];
        for to in 0..t_out {
            g.im2col(x_b, to, &mut cols);
            let offset = to * plane;
            T::gemm(
                g.c_out,
                k,
                plane,
                T::one(),
                wd,
                (k as isize, 1),
                &cols,
                (plane as isize, 1),
                T::zero(),
                &mut out_b[offset..],
                ((t_out * plane) as isize, 1),
            );
        }
        if let Some(bias) = bias {
            let per_channel = t_out * plane;
            for (co, chunk) in out_b.chunks_mut(per_channel).enumerate() {
                let bv = bias.data()[co];
                chunk.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    });
    Ok((Tensor::new(g.output_shape(), out)?, g))
}

/// Gradients `(dx, dweight, dbias)` of the convolution given the output gradient.
pub fn backward<T: Scalar>(
    g: &ConvGeom,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (k, plane, t_out) = (g.patch_len(), g.plane_out(), g.output[0]);
    let w_len = g.c_out * k;
    let mut dx = vec![T::zero(); g.batch * g.in_len()];
    let mut dw_parts = vec![T::zero(); g.batch * w_len];
    let xd = x.data();
    let wd = weight.data();
    parallel::for_each_chunk_pair_mut(
        &mut dx,
        g.in_len(),
        &mut dw_parts,
        w_len,
        |b, dx_b, dw_b| {
            let x_b = &xd[b * g.in_len()..(b + 1) * g.in_len()];
            let dy_b = &dy[b * g.out_len()..(b + 1) * g.out_len()];
            let mut cols = vec![T::zero(); k * plane];
            let mut dcols = vec![T::zero(); k * plane];
            for to in 0..t_out {
                let dy_slab = &dy_b[to * plane..];
                let dy_strides = ((t_out * plane) as isize, 1);
                g.im2col(x_b, to, &mut cols);
                // dW += dY_slab * cols^T
                T::gemm(
                    g.c_out,
                    plane,
                    k,
                    T::one(),
                    dy_slab,
                    dy_strides,
                    &cols,
                    (1, plane as isize),
                    T::one(),
                    dw_b,
                    (k as isize, 1),
                );
                // dcols = W^T * dY_slab
                T::gemm(
                    k,
                    g.c_out,
                    plane,
                    T::one(),
                    wd,
                    (1, k as isize),
                    dy_slab,
                    dy_strides,
                    T::zero(),
                    &mut dcols,
                    (plane as isize, 1),
                );
                g.col2im(&dcols, to, dx_b);
            }
        },
    );
    let mut dw = vec![T::zero(); w_len];
    for part in dw_parts.chunks(w_len) {
        for (acc, v) in dw.iter_mut().zip(part) {
            *acc = *acc + *v;
        }
    }
    let per_channel = t_out * plane;
    let mut db = vec![T::zero(); g.c_out];
    for b in 0..g.batch {
        for (co, acc) in db.iter_mut().enumerate() {
            let start = b * g.out_len() + co * per_channel;
            *acc = *acc + dy[start..start + per_channel].iter().copied().sum::<T>();
        }
    }
    (dx, dw, db)
}

/// Direct nested-loop cross-correlation; the oracle for [`forward`].
/// Accumulates in `f64` and rounds once.
pub fn reference<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let g = ConvGeom::resolve(x.shape(), weight.shape(), spec)?;
    let [t, h, w] = g.input;
    let [to_n, ho_n, wo_n] = g.output;
    let [kt, kh, kw] = spec.kernel;
    let xd = x.data();
    let wd = weight.data();
    let mut out = Tensor::zeros(&g.output_shape());
    let od = out.data_mut();
    let mut idx = 0;
    for b in 0..g.batch {
        for co in 0..g.c_out {
            for to in 0..to_n {
                for ho in 0..ho_n {
                    for wo in 0..wo_n {
                        let mut acc = bias.map_or(0.0, |bb| bb.data()[co].as_f64());
                        for ci in 0..g.c_in {
                            for dt in 0..kt {
                                for dh in 0..kh {
                                    for dw in 0..kw {
                                        let ti = (to * spec.stride[0] + dt) as isize
                                            - spec.padding[0] as isize;
                                        let hi = (ho * spec.stride[1] + dh) as isize
                                            - spec.padding[1] as isize;
                                        let wi = (wo * spec.stride[2] + dw) as isize
                                            - spec.padding[2] as isize;
                                        if ti < 0
                                            || hi < 0
                                            || wi < 0
                                            || ti as usize >= t
                                            || hi as usize >= h
                                            || wi as usize >= w
                                        {
                                            continue;
                                        }
                                        let xv = xd[(((b * g.c_in + ci) * t + ti as usize) * h
                                            + hi as usize)
                                            * w
                                            + wi as usize];
                                        let wv =
                                            wd[(((co * g.c_in + ci) * kt + dt) * kh + dh) * kw + dw];
                                        acc += xv.as_f64() * wv.as_f64();
                                    }
                                }
                            }
                        }
                        od[idx] = T::from_f64_lossy(acc);
                        idx += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 1, 3, 4, 5], &mut rng);
        let w = Tensor::full(&[1, 1, 1, 1, 1], 1.0);
        let b = Tensor::zeros(&[1]);
        let (y, _) = forward(&x, &w, Some(&b), ConvSpec::pointwise()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_on_constant_counts_taps() {
        let x = Tensor::full(&[1, 1, 5, 5, 5], 2.0f64);
        let w = Tensor::full(&[1, 1, 3, 3, 3], 1.0);
        let (y, _) = forward(&x, &w, None, ConvSpec::same([3, 3, 3])).unwrap();
        assert_eq!(y.shape(), &[1, 1, 5, 5, 5]);
        // interior point (2,2,2)
        assert_eq!(y.data()[(2 * 5 + 2) * 5 + 2], 54.0);
        // corner sees 2x2x2 taps
        assert_eq!(y.data()[0], 16.0);
    }

    #[test]
    fn im2col_matches_reference_small_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[1, 2, 4, 5, 5], &mut rng);
        let w = random(&[3, 2, 3, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let spec = ConvSpec::same([3, 3, 3]);
        let (fast, _) = forward(&x, &w, Some(&b), spec).unwrap();
        let slow = reference(&x, &w, Some(&b), spec).unwrap();
        assert!(fast.max_abs_diff(&slow) <= 1e-6);
    }

    #[test]
    fn strided_output_length_is_ceil_half() {
        let spec = ConvSpec::same([3, 3, 3]).with_stride([1, 2, 2]);
        assert_eq!(spec.output_len(1, 34), Some(17));
        assert_eq!(spec.output_len(1, 17), Some(9));
        assert_eq!(spec.output_len(0, 10), Some(10));
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = Tensor::<f32>::zeros(&[1, 2, 3, 3, 3]);
        let w = Tensor::<f32>::zeros(&[1, 3, 1, 1, 1]);
        let err = forward(&x, &w, None, ConvSpec::pointwise()).unwrap_err();
        assert!(matches!(err, TensorError::Shape { .. }));
        assert!(err.to_string().contains("[1, 2, 3, 3, 3]"));
    }
}
