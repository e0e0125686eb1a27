//! DeepLift with the rescale rule.
//!
//! Runs the eval-mode forward twice --- once on the input, once on the
//! reference baseline --- then propagates multipliers back through the
//! identically-structured tapes. Linear ops (convolutions, eval-mode batch
//! norm, sums, concats, scalar affines) pass multipliers through their
//! ordinary backward; elementwise nonlinearities use the finite slope
//! `delta_out / delta_in` with the local gradient as fallback when the
//! input delta is below 1e-7. Ops without a rescale rule (products or
//! quotients of two input-dependent operands, training-mode layers) are
//! rejected by name. The construction preserves summation-to-delta:
//! `sum(attributions) == f_M(input) - f_M(baseline)` up to rounding.

use crate::error::XaiError;
use crate::tape::{OpKind, SweepCtx, Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::unet::Model;

use super::{AttributionMap, AttributionMethod, PixelSet};

/// Reference input for DeepLift; defaults to the all-zeros volume
/// (background intensity after normalization).
#[derive(Debug, Clone)]
pub struct Baseline<T: Scalar> {
    pub volume: Tensor<T>,
}

impl<T: Scalar> Baseline<T> {
    pub fn zeros_like(input: &Tensor<T>) -> Self {
        Baseline {
            volume: Tensor::zeros(input.shape().to_vec()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DeepLiftAttribution<T: Scalar> {
    pub map: AttributionMap<T>,
    /// Sum of all attributions.
    pub total: f64,
    /// `f_M(input) - f_M(baseline)`; equals `total` up to rounding.
    pub delta: f64,
}

const RESCALE_EPS: f64 = 1e-7;

fn local_gradient<T: Scalar>(op: OpKind, x_in: &Tensor<T>, y_out: &Tensor<T>, alpha: Option<&Tensor<T>>) -> Vec<T> {
    let n = x_in.numel();
    let mut out = Vec::with_capacity(n);
    match op {
        OpKind::Relu => {
            for &x in x_in.data() {
                out.push(if x > T::zero() { T::one() } else { T::zero() });
            }
        }
        OpKind::Sigmoid => {
            for &y in y_out.data() {
                out.push(y * (T::one() - y));
            }
        }
        OpKind::PRelu => {
            let alpha = alpha.expect("prelu carries alpha");
            let per_channel = alpha.numel() > 1;
            let shape = x_in.shape();
            let (channels, spatial) = if shape.len() >= 2 {
                (shape[1], shape[2..].iter().product::<usize>())
            } else {
                (1, x_in.numel())
            };
            for (i, &x) in x_in.data().iter().enumerate() {
                if x > T::zero() {
                    out.push(T::one());
                } else {
                    let a = if per_channel {
                        alpha.data()[(i / spatial) % channels]
                    } else {
                        alpha.data()[0]
                    };
                    out.push(a);
                }
            }
        }
        _ => unreachable!("local_gradient only covers elementwise nonlinearities"),
    }
    out
}

/// Multiplier sweep over two identically-structured tapes; returns the
/// multiplier reaching each node (None where no path).
fn rescale_sweep<T: Scalar>(
    tape_x: &Tape<T>,
    tape_b: &Tape<T>,
    root: Var,
    seed: &Tensor<T>,
) -> Result<Vec<Option<Tensor<T>>>, XaiError> {
    assert_eq!(
        tape_x.len(),
        tape_b.len(),
        "input and baseline forwards must have identical structure"
    );
    let n = tape_x.len();
    let mut mult: Vec<Option<Tensor<T>>> = vec![None; n];
    mult[root.id()] = Some(seed.clone());
    let ctx = SweepCtx::default();

    for id in (0..=root.id()).rev() {
        let node = &tape_x.nodes[id];
        let Some(m_out) = mult[id].clone() else {
            continue;
        };
        if node.parents.is_empty() {
            continue;
        }
        let needs: Vec<bool> = node
            .parents
            .iter()
            .map(|p| tape_x.nodes[p.id()].requires_grad)
            .collect();
        if !needs.iter().any(|&b| b) {
            continue;
        }

        let parent_multipliers: Vec<Option<Tensor<T>>> = match node.op {
            OpKind::Relu | OpKind::Sigmoid | OpKind::PRelu => {
                let xin = &tape_x.nodes[node.parents[0].id()].value;
                let bin = &tape_b.nodes[node.parents[0].id()].value;
                let xout = &node.value;
                let bout = &tape_b.nodes[id].value;
                let alpha = if node.op == OpKind::PRelu {
                    Some(&tape_x.nodes[node.parents[1].id()].value)
                } else {
                    None
                };
                let fallback = local_gradient(node.op, xin, xout, alpha);
                let eps = T::from_f64(RESCALE_EPS);
                let data: Vec<T> = (0..xin.numel())
                    .map(|i| {
                        let din = xin.data()[i] - bin.data()[i];
                        let slope = if din.abs() < eps {
                            fallback[i]
                        } else {
                            (xout.data()[i] - bout.data()[i]) / din
                        };
                        m_out.data()[i] * slope
                    })
                    .collect();
                let m_in = Tensor::from_vec(xin.shape().to_vec(), data).expect("shape");
                let mut v: Vec<Option<Tensor<T>>> = vec![None; node.parents.len()];
                v[0] = needs[0].then_some(m_in);
                v
            }
            OpKind::Mul => {
                if needs.iter().filter(|&&b| b).count() > 1 {
                    return Err(XaiError::UnsupportedOp(
                        "mul of two input-dependent operands".into(),
                    ));
                }
                node.backward
                    .as_ref()
                    .expect("grad-requiring node has backward")
                    .backward(&m_out, &ctx, &needs)
            }
            OpKind::Div => {
                if needs[1] {
                    return Err(XaiError::UnsupportedOp(
                        "div with input-dependent divisor".into(),
                    ));
                }
                node.backward
                    .as_ref()
                    .expect("grad-requiring node has backward")
                    .backward(&m_out, &ctx, &needs)
            }
            OpKind::BatchNormTrain | OpKind::DropoutTrain => {
                return Err(XaiError::UnsupportedOp(node.op.name().into()));
            }
            OpKind::BatchNormEval => {
                if needs[1] || needs[2] {
                    return Err(XaiError::UnsupportedOp(
                        "batch_norm with input-dependent scale".into(),
                    ));
                }
                node.backward
                    .as_ref()
                    .expect("grad-requiring node has backward")
                    .backward(&m_out, &ctx, &needs)
            }
            _ => {
                debug_assert!(node.op.is_linear(), "unhandled op {}", node.op.name());
                node.backward
                    .as_ref()
                    .expect("grad-requiring node has backward")
                    .backward(&m_out, &ctx, &needs)
            }
        };

        for (parent, pm) in node.parents.iter().zip(parent_multipliers) {
            let Some(pm) = pm else { continue };
            if !tape_x.nodes[parent.id()].requires_grad {
                continue;
            }
            crate::tape::accumulate(&mut mult[parent.id()], pm);
        }
    }
    Ok(mult)
}

/// DeepLift attributions `m (.) (input - baseline)` for the pixel-set
/// target, with the completeness diagnostics alongside.
pub fn deeplift_rescale<T: Scalar>(
    model: &Model<T>,
    input: &Tensor<T>,
    baseline: &Baseline<T>,
    pixel_set: &PixelSet,
) -> Result<DeepLiftAttribution<T>, XaiError> {
    if baseline.volume.shape() != input.shape() {
        return Err(XaiError::BaselineShape {
            baseline: baseline.volume.shape().to_vec(),
            input: input.shape().to_vec(),
        });
    }
    let mut tape_x = Tape::new();
    let x = tape_x.leaf(input.clone(), true);
    let trace_x = model.forward_eval(&mut tape_x, x)?;

    let mut tape_b = Tape::new();
    let xb = tape_b.leaf(baseline.volume.clone(), true);
    let trace_b = model.forward_eval(&mut tape_b, xb)?;

    let logits_shape = tape_x.shape(trace_x.logits).to_vec();
    pixel_set.validate(
        logits_shape[1],
        [logits_shape[2], logits_shape[3], logits_shape[4]],
    )?;
    let seed = pixel_set.seed_tensor::<T>(&logits_shape);

    let mult = rescale_sweep(&tape_x, &tape_b, trace_x.logits, &seed)?;
    let m_x = mult[x.id()]
        .clone()
        .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));

    let contrib: Vec<T> = m_x
        .data()
        .iter()
        .zip(input.data().iter().zip(baseline.volume.data()))
        .map(|(&m, (&xi, &bi))| m * (xi - bi))
        .collect();
    let total: f64 = contrib.iter().map(|v| v.as_f64()).sum();

    let f_of = |tape: &Tape<T>, logits: Var| -> f64 {
        tape.value(logits)
            .data()
            .iter()
            .zip(seed.data())
            .map(|(&y, &s)| (y * s).as_f64())
            .sum()
    };
    let delta = f_of(&tape_x, trace_x.logits) - f_of(&tape_b, trace_b.logits);

    let dims = [input.shape()[2], input.shape()[3], input.shape()[4]];
    let values = Tensor::from_vec(dims.to_vec(), contrib).expect("single-channel input");
    Ok(DeepLiftAttribution {
        map: AttributionMap {
            method: AttributionMethod::DeepLift,
            class_id: pixel_set.class_id,
            pixel_count: pixel_set.voxels.len(),
            layer: None,
            values,
        },
        total,
        delta,
    })
}
