//! Taped 3D convolution and transposed convolution.
//!
//! The transposed convolution is the exact adjoint of `conv3d` with shared
//! weights: its forward pass runs the conv input-gradient kernel and vice
//! versa, so `<conv3d(X), Y> == <X, conv_transpose3d(Y)>` holds to floating
//! point accuracy by construction.

use crate::error::TensorError;
use crate::kernels::{self, ConvDims};
use crate::tape::{BackwardFn, OpKind, SweepCtx, Tape, Var};
use crate::tensor::{Scalar, Tensor};

struct Conv3dBackward<T: Scalar> {
    x: Tensor<T>,
    w: Tensor<T>,
    dims: ConvDims,
    has_bias: bool,
}

impl<T: Scalar> BackwardFn<T> for Conv3dBackward<T> {
    fn backward(&self, g: &Tensor<T>, _ctx: &SweepCtx, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let d = &self.dims;
        let mut out = Vec::with_capacity(needs.len());
        out.push(needs[0].then(|| {
            let dx = kernels::conv3d_bwd_input(g.data(), self.w.data(), d);
            Tensor::from_vec(d.in_shape(), dx).expect("shape")
        }));
        out.push(needs[1].then(|| {
            let dw = kernels::conv3d_bwd_weight(self.x.data(), g.data(), d);
            Tensor::from_vec(self.w.shape().to_vec(), dw).expect("shape")
        }));
        if self.has_bias {
            out.push(needs[2].then(|| {
                let spatial = d.out_sp.iter().product();
                let db = kernels::sum_per_channel(g.data(), d.batch, d.cout, spatial);
                Tensor::from_vec(vec![d.cout], db).expect("shape")
            }));
        }
        out
    }
}

struct ConvTranspose3dBackward<T: Scalar> {
    x: Tensor<T>,
    w: Tensor<T>,
    dims: ConvDims,
    has_bias: bool,
}

impl<T: Scalar> BackwardFn<T> for ConvTranspose3dBackward<T> {
    fn backward(&self, g: &Tensor<T>, _ctx: &SweepCtx, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let d = &self.dims;
        let mut out = Vec::with_capacity(needs.len());
        // upstream grad lives on the conv-view input grid
        out.push(needs[0].then(|| {
            let dx = kernels::conv3d_fwd(g.data(), self.w.data(), None, d);
            Tensor::from_vec(d.out_shape(), dx).expect("shape")
        }));
        out.push(needs[1].then(|| {
            let dw = kernels::conv3d_bwd_weight(g.data(), self.x.data(), d);
            Tensor::from_vec(self.w.shape().to_vec(), dw).expect("shape")
        }));
        if self.has_bias {
            out.push(needs[2].then(|| {
                let spatial = d.in_sp.iter().product();
                let db = kernels::sum_per_channel(g.data(), d.batch, d.cin, spatial);
                Tensor::from_vec(vec![d.cin], db).expect("shape")
            }));
        }
        out
    }
}

fn check_bias<T: Scalar>(
    op: &'static str,
    bias: &Tensor<T>,
    out_channels: usize,
) -> Result<(), TensorError> {
    if bias.numel() != out_channels {
        return Err(TensorError::InvalidArgument {
            op,
            detail: format!(
                "bias has {} elements, expected {out_channels}",
                bias.numel()
            ),
        });
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    /// 3D convolution: `x (N,Cin,D,H,W)` with `w (Cout,Cin,kD,kH,kW)`.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var, TensorError> {
        let xt = self.value(x).clone();
        let wt = self.value(w).clone();
        let dims = ConvDims::conv(xt.shape(), wt.shape(), stride, pad)?;
        let bt = bias.map(|b| self.value(b).clone());
        if let Some(b) = &bt {
            check_bias("conv3d", b, dims.cout)?;
        }
        let out = kernels::conv3d_fwd(xt.data(), wt.data(), bt.as_ref().map(|b| b.data()), &dims);
        let value = Tensor::from_vec(dims.out_shape(), out)?;
        let mut parents = vec![x, w];
        if let Some(b) = bias {
            parents.push(b);
        }
        Ok(self.record(
            value,
            parents,
            OpKind::Conv3d,
            Box::new(Conv3dBackward {
                x: xt,
                w: wt,
                dims,
                has_bias: bias.is_some(),
            }),
        ))
    }

    /// Transposed 3D convolution: `x (N,Cin,D,H,W)` with `w (Cin,Cout,kD,kH,kW)`;
    /// output extent `(in-1)*s - 2p + k` per axis.
    pub fn conv_transpose3d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var, TensorError> {
        let xt = self.value(x).clone();
        let wt = self.value(w).clone();
        let dims = ConvDims::conv_transpose(xt.shape(), wt.shape(), stride, pad)?;
        let bt = bias.map(|b| self.value(b).clone());
        if let Some(b) = &bt {
            check_bias("conv_transpose3d", b, dims.cin)?;
        }
        // forward is the conv-view input gradient
        let mut out = kernels::conv3d_bwd_input(xt.data(), wt.data(), &dims);
        if let Some(b) = &bt {
            let spatial: usize = dims.in_sp.iter().product();
            for n in 0..dims.batch {
                for c in 0..dims.cin {
                    let bv = b.data()[c];
                    let base = (n * dims.cin + c) * spatial;
                    for v in &mut out[base..base + spatial] {
                        *v = *v + bv;
                    }
                }
            }
        }
        let value = Tensor::from_vec(dims.in_shape(), out)?;
        let mut parents = vec![x, w];
        if let Some(b) = bias {
            parents.push(b);
        }
        Ok(self.record(
            value,
            parents,
            OpKind::ConvTranspose3d,
            Box::new(ConvTranspose3dBackward {
                x: xt,
                w: wt,
                dims,
                has_bias: bias.is_some(),
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn filled(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut rng = Rng::from_seed(seed);
        Tensor::from_fn(shape, |_| rng.uniform_in(-1.0, 1.0))
    }

    #[test]
    fn identity_conv_passthrough() {
        let mut tape: Tape<f64> = Tape::new();
        let t = filled(vec![1, 1, 4, 4, 4], 5);
        let x = tape.leaf(t.clone(), false);
        let w = tape.leaf(Tensor::ones(vec![1, 1, 1, 1, 1]), false);
        let y = tape.conv3d(x, w, None, [1, 1, 1], [0, 0, 0]).unwrap();
        assert_eq!(tape.value(y).data(), t.data());
    }

    #[test]
    fn ones_cube_sums_to_27() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::ones(vec![1, 1, 4, 4, 4]), false);
        let w = tape.leaf(Tensor::ones(vec![1, 1, 3, 3, 3]), false);
        let y = tape.conv3d(x, w, None, [1, 1, 1], [0, 0, 0]).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2, 2]);
        assert!(tape.value(y).data().iter().all(|&v| v == 27.0));
    }

    #[test]
    fn transpose_shape_formula() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(filled(vec![1, 1, 2, 2, 2], 6), false);
        let w = tape.leaf(filled(vec![1, 1, 2, 2, 2], 7), false);
        let y = tape
            .conv_transpose3d(x, w, None, [2, 2, 2], [0, 0, 0])
            .unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 4, 4, 4]);
    }

    #[test]
    fn adjoint_identity_shared_weights() {
        // <conv3d(X), Y> == <X, conv_transpose3d(Y)> across random shapes
        let mut rng = Rng::from_seed(99);
        for trial in 0..25 {
            let cin = 1 + rng.below(3);
            let cout = 1 + rng.below(3);
            let k = [1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3)];
            let s = [1 + rng.below(2), 1 + rng.below(2), 1 + rng.below(2)];
            let p = [rng.below(2), rng.below(2), rng.below(2)];
            // choose an exact-fit input extent so the adjoint pair closes
            let out_sp = [1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4)];
            let mut in_sp = [0usize; 3];
            let mut ok = true;
            for a in 0..3 {
                let reach = (out_sp[a] - 1) * s[a] + k[a];
                if reach <= 2 * p[a] {
                    ok = false;
                    break;
                }
                in_sp[a] = reach - 2 * p[a];
            }
            if !ok {
                continue;
            }

            let mut tape: Tape<f64> = Tape::new();
            let x = tape.leaf(
                filled(vec![1, cin, in_sp[0], in_sp[1], in_sp[2]], 100 + trial),
                false,
            );
            let w = tape.leaf(
                filled(vec![cout, cin, k[0], k[1], k[2]], 200 + trial),
                false,
            );
            let y_probe = tape.leaf(
                filled(vec![1, cout, out_sp[0], out_sp[1], out_sp[2]], 300 + trial),
                false,
            );
            let cx = tape.conv3d(x, w, None, s, p).unwrap();
            assert_eq!(tape.shape(cx), tape.shape(y_probe));
            let ty = tape.conv_transpose3d(y_probe, w, None, s, p).unwrap();
            assert_eq!(tape.shape(ty), tape.shape(x));

            let dot = |a: &[f64], b: &[f64]| -> f64 {
                a.iter().zip(b).map(|(x, y)| x * y).sum()
            };
            let lhs = dot(tape.value(cx).data(), tape.value(y_probe).data());
            let rhs = dot(tape.value(ty).data(), tape.value(x).data());
            let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-12);
            assert!(rel < 1e-10, "trial {trial}: {lhs} vs {rhs}");
        }
    }
}
