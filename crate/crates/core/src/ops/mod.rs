//! Differentiable operations recorded on the tape.

mod conv;
mod elementwise;
mod layers;
mod reduce;

pub use layers::{BnMode, BnStats};

use crate::tensor::{Scalar, Tensor};

/// Sum every element of `g` into a tensor of `shape` (which must have one
/// element); used when a binary op broadcast a scalar operand.
pub(crate) fn reduce_full<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let total: T = g.data().iter().copied().sum();
    Tensor::from_vec(shape.to_vec(), vec![total]).expect("scalar shape")
}

/// Row-major odometer: calls `f(flat_index, coords)` for every index of
/// `shape` in order.
pub(crate) fn for_each_index(shape: &[usize], mut f: impl FnMut(usize, &[usize])) {
    let numel: usize = shape.iter().product();
    if numel == 0 {
        return;
    }
    let mut coords = vec![0usize; shape.len()];
    for flat in 0..numel {
        f(flat, &coords);
        for d in (0..shape.len()).rev() {
            coords[d] += 1;
            if coords[d] < shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
}
