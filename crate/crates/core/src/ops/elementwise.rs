//! Elementwise arithmetic and activations. Binary ops accept equal shapes or
//! a one-element operand on either side (scalar broadcast).

use super::reduce_full;
use crate::error::TensorError;
use crate::tape::{BackwardFn, OpKind, SweepCtx, Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

fn check_binary<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(), TensorError> {
    if a.shape() == b.shape() || a.numel() == 1 || b.numel() == 1 {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn binary_eval<T: Scalar>(kind: BinKind, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let apply = |x: T, y: T| match kind {
        BinKind::Add => x + y,
        BinKind::Sub => x - y,
        BinKind::Mul => x * y,
        BinKind::Div => x / y,
    };
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| apply(x, y))
            .collect();
        Tensor::from_vec(a.shape().to_vec(), data).expect("same shape")
    } else if b.numel() == 1 {
        let y = b.data()[0];
        a.map(|x| apply(x, y))
    } else {
        let x = a.data()[0];
        b.map(|y| apply(x, y))
    }
}

struct BinaryBackward<T: Scalar> {
    kind: BinKind,
    a: Tensor<T>,
    b: Tensor<T>,
}

impl<T: Scalar> BackwardFn<T> for BinaryBackward<T> {
    fn backward(&self, g: &Tensor<T>, _ctx: &SweepCtx, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (a, b) = (&self.a, &self.b);
        let da = if needs[0] {
            let full = match self.kind {
                BinKind::Add | BinKind::Sub => g.clone(),
                BinKind::Mul => binary_eval(BinKind::Mul, g, b),
                BinKind::Div => binary_eval(BinKind::Div, g, b),
            };
            Some(if a.numel() == 1 && full.numel() != 1 {
                reduce_full(&full, a.shape())
            } else {
                full
            })
        } else {
            None
        };
        let db = if needs[1] {
            let full = match self.kind {
                BinKind::Add => g.clone(),
                BinKind::Sub => g.map(|v| -v),
                BinKind::Mul => binary_eval(BinKind::Mul, g, a),
                BinKind::Div => {
                    // d(a/b)/db = -a / b^2
                    let ratio = binary_eval(BinKind::Div, a, b);
                    let quot = binary_eval(BinKind::Div, &ratio, b);
                    binary_eval(BinKind::Mul, g, &quot).map(|v| -v)
                }
            };
            Some(if b.numel() == 1 && full.numel() != 1 {
                reduce_full(&full, b.shape())
            } else {
                full
            })
        } else {
            None
        };
        vec![da, db]
    }
}

struct AffineBackward<T: Scalar> {
    scale: T,
    shape: Vec<usize>,
}

impl<T: Scalar> BackwardFn<T> for AffineBackward<T> {
    fn backward(&self, g: &Tensor<T>, _ctx: &SweepCtx, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        debug_assert_eq!(g.shape(), &self.shape[..]);
        vec![needs[0].then(|| g.map(|v| v * self.scale))]
    }
}

struct SigmoidBackward<T: Scalar> {
    y: Tensor<T>,
}

impl<T: Scalar> BackwardFn<T> for SigmoidBackward<T> {
    fn backward(&self, g: &Tensor<T>, _ctx: &SweepCtx, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![needs[0].then(|| {
            let data = g
                .data()
                .iter()
                .zip(self.y.data())
                .map(|(&gv, &y)| gv * y * (T::one() - y))
                .collect();
            Tensor::from_vec(g.shape().to_vec(), data).expect("same shape")
        })]
    }
}

struct ReluBackward<T: Scalar> {
    x: Tensor<T>,
}

impl<T: Scalar> BackwardFn<T> for ReluBackward<T> {
    fn backward(&self, g: &Tensor<T>, ctx: &SweepCtx, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![needs[0].then(|| {
            let data = g
                .data()
                .iter()
                .zip(self.x.data())
                .map(|(&gv, &x)| {
                    let pass = x > T::zero() && (!ctx.guided || gv >= T::zero());
                    if pass {
                        gv
                    } else {
                        T::zero()
                    }
                })
                .collect();
            Tensor::from_vec(g.shape().to_vec(), data).expect("same shape")
        })]
    }
}

fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    fn binary(
        &mut self,
        kind: BinKind,
        op_name: &'static str,
        op: OpKind,
        a: Var,
        b: Var,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        check_binary(op_name, &ta, &tb)?;
        let out = binary_eval(kind, &ta, &tb);
        Ok(self.record(
            out,
            vec![a, b],
            op,
            Box::new(BinaryBackward { kind, a: ta, b: tb }),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Add, "add", OpKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Sub, "sub", OpKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Mul, "mul", OpKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Div, "div", OpKind::Div, a, b)
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let t = self.value(x).clone();
        let out = t.map(|v| scale * v + shift);
        self.record(
            out,
            vec![x],
            OpKind::AffineScalar,
            Box::new(AffineBackward {
                scale,
                shape: t.shape().to_vec(),
            }),
        )
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.affine(x, T::one(), c)
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Var {
        self.affine(x, c, T::zero())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        let y = t.map(stable_sigmoid);
        self.record(
            y.clone(),
            vec![x],
            OpKind::Sigmoid,
            Box::new(SigmoidBackward { y }),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        let y = t.map(|v| if v > T::zero() { v } else { T::zero() });
        self.record(y, vec![x], OpKind::Relu, Box::new(ReluBackward { x: t }))
    }
}
