//! Reductions and concatenation.

use super::for_each_index;
use crate::error::TensorError;
use crate::tape::{BackwardFn, OpKind, SweepCtx, Tape, Var};
use crate::tensor::{Scalar, Tensor};

fn reduced_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .filter(|(d, _)| !axes.contains(d))
        .map(|(_, &e)| e)
        .collect()
}

/// For each axis of the input: the stride of the output it maps to, or 0 if
/// the axis is reduced away.
fn output_stride_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let out_shape = reduced_shape(shape, axes);
    let out_strides = crate::tensor::strides_for(&out_shape);
    let mut map = vec![0usize; shape.len()];
    let mut kept = 0;
    for (d, m) in map.iter_mut().enumerate() {
        if !axes.contains(&d) {
            *m = out_strides[kept];
            kept += 1;
        }
    }
    map
}

struct SumBackward<T: Scalar> {
    in_shape: Vec<usize>,
    stride_map: Vec<usize>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> BackwardFn<T> for SumBackward<T> {
    fn backward(&self, g: &Tensor<T>, _ctx: &SweepCtx, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![needs[0].then(|| {
            let gd = g.data();
            let mut out = vec![T::zero(); self.in_shape.iter().product()];
            for_each_index(&self.in_shape, |flat, coords| {
                let oi: usize = coords
                    .iter()
                    .zip(&self.stride_map)
                    .map(|(&c, &s)| c * s)
                    .sum();
                out[flat] = gd[oi];
            });
            Tensor::from_vec(self.in_shape.clone(), out).expect("shape")
        })]
    }
}

struct ConcatBackward<T: Scalar> {
    axis: usize,
    extents: Vec<usize>,
    outer: usize,
    inner: usize,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> BackwardFn<T> for ConcatBackward<T> {
    fn backward(&self, g: &Tensor<T>, _ctx: &SweepCtx, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let total_axis: usize = self.extents.iter().sum();
        let gd = g.data();
        let mut offset = 0usize;
        self.extents
            .iter()
            .enumerate()
            .map(|(i, &ext)| {
                let start = offset;
                offset += ext;
                if !needs[i] {
                    return None;
                }
                let mut shape = g.shape().to_vec();
                shape[self.axis] = ext;
                let mut out = Vec::with_capacity(self.outer * ext * self.inner);
                for o in 0..self.outer {
                    let row = (o * total_axis + start) * self.inner;
                    out.extend_from_slice(&gd[row..row + ext * self.inner]);
                }
                Some(Tensor::from_vec(shape, out).expect("shape"))
            })
            .collect()
    }
}

impl<T: Scalar> Tape<T> {
    /// Sum over the given axes (no kept dims). An empty axis list is the
    /// identity reduction and is rejected.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x).clone();
        let shape = t.shape().to_vec();
        for &a in axes {
            if a >= shape.len() {
                return Err(TensorError::AxisMismatch {
                    op: "sum",
                    axis: a,
                    detail: format!("tensor has rank {}", shape.len()),
                });
            }
        }
        let out_shape = reduced_shape(&shape, axes);
        let stride_map = output_stride_map(&shape, axes);
        let mut out = vec![T::zero(); out_shape.iter().product()];
        for_each_index(&shape, |flat, coords| {
            let oi: usize = coords.iter().zip(&stride_map).map(|(&c, &s)| c * s).sum();
            out[oi] = out[oi] + t.data()[flat];
        });
        let value = Tensor::from_vec(out_shape, out).expect("shape");
        Ok(self.record(
            value,
            vec![x],
            OpKind::Reduce,
            Box::new(SumBackward {
                in_shape: shape,
                stride_map,
                _marker: std::marker::PhantomData,
            }),
        ))
    }

    /// Sum of every element, producing a rank-0 scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let rank = self.shape(x).len();
        let axes: Vec<usize> = (0..rank).collect();
        self.sum_axes(x, &axes).expect("axes in range")
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        let s = self.sum_axes(x, axes)?;
        Ok(self.mul_scalar(s, T::from_f64(1.0 / count as f64)))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let rank = self.shape(x).len();
        let axes: Vec<usize> = (0..rank).collect();
        self.mean_axes(x, &axes).expect("axes in range")
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        if inputs.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                detail: "no inputs".into(),
            });
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::AxisMismatch {
                op: "concat",
                axis,
                detail: format!("tensor has rank {}", first.len()),
            });
        }
        let mut extents = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            for (d, (&a, &b)) in first.iter().zip(s).enumerate() {
                if d != axis && a != b {
                    return Err(TensorError::AxisMismatch {
                        op: "concat",
                        axis: d,
                        detail: format!("extent {} vs {}", a, b),
                    });
                }
            }
            extents.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total_axis: usize = extents.iter().sum();
        let mut shape = first;
        shape[axis] = total_axis;
        let mut out = vec![T::zero(); outer * total_axis * inner];
        let mut offset = 0usize;
        for (&v, &ext) in inputs.iter().zip(&extents) {
            let data = self.value(v).data();
            for o in 0..outer {
                let src = o * ext * inner;
                let dst = (o * total_axis + offset) * inner;
                out[dst..dst + ext * inner].copy_from_slice(&data[src..src + ext * inner]);
            }
            offset += ext;
        }
        let value = Tensor::from_vec(shape, out).expect("shape");
        Ok(self.record(
            value,
            inputs.to_vec(),
            OpKind::Concat,
            Box::new(ConcatBackward {
                axis,
                extents,
                outer,
                inner,
                _marker: std::marker::PhantomData,
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_all_gradient_is_ones() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let s = tape.sum_all(x);
        assert_eq!(tape.value(s).item(), 10.0);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_axes_shape_and_values() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(
            Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            false,
        );
        let s = tape.sum_axes(x, &[1]).unwrap();
        assert_eq!(tape.shape(s), &[2]);
        assert_eq!(tape.value(s).data(), &[6.0, 15.0]);
    }

    #[test]
    fn concat_channel_axis() {
        // (1,2,4,4,4) + (1,3,4,4,4) concatenated on channels -> (1,5,4,4,4)
        let mut tape: Tape<f32> = Tape::new();
        let a = tape.leaf(Tensor::full(vec![1, 2, 4, 4, 4], 1.0), false);
        let b = tape.leaf(Tensor::full(vec![1, 3, 4, 4, 4], 2.0), false);
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[1, 5, 4, 4, 4]);
        let d = tape.value(c).data();
        assert!(d[..128].iter().all(|&v| v == 1.0));
        assert!(d[128..].iter().all(|&v| v == 2.0));
    }

    #[test]
    fn concat_backward_splits() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::full(vec![2, 1], 1.0), true);
        let b = tape.leaf(Tensor::full(vec![2, 2], 2.0), true);
        let c = tape.concat(&[a, b], 1).unwrap();
        let w = tape.leaf(
            Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            false,
        );
        let prod = tape.mul(c, w).unwrap();
        let s = tape.sum_all(prod);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 4.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn concat_axis_mismatch_error() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![1, 2, 4]), false);
        let b = tape.leaf(Tensor::zeros(vec![1, 3, 5]), false);
        assert!(tape.concat(&[a, b], 1).is_err());
    }
}
