//! Guided backpropagation and its product with GradCAM.

use crate::error::XaiError;
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};
use crate::unet::Model;

use super::{grad_cam, AttributionMap, AttributionMethod, PixelSet};

/// Input-space gradient of the pixel-set target under the guided rule: at
/// every ReLU/PReLU the backward signal is zeroed where the forward
/// pre-activation is non-positive or the incoming signal is negative (the
/// PReLU negative-slope branch is suppressed entirely).
pub fn guided_backprop<T: Scalar>(
    model: &Model<T>,
    input: &Tensor<T>,
    pixel_set: &PixelSet,
) -> Result<AttributionMap<T>, XaiError> {
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone(), true);
    let trace = model.forward_eval(&mut tape, x)?;
    let logits_shape = tape.shape(trace.logits).to_vec();
    pixel_set.validate(
        logits_shape[1],
        [logits_shape[2], logits_shape[3], logits_shape[4]],
    )?;
    let seed = pixel_set.seed_tensor::<T>(&logits_shape);
    let grads = tape.backward_guided(trace.logits, &seed)?;
    let g = grads.get_or_zeros(x, &tape);
    let dims = [input.shape()[2], input.shape()[3], input.shape()[4]];
    Ok(AttributionMap {
        method: AttributionMethod::GuidedBackprop,
        class_id: pixel_set.class_id,
        pixel_count: pixel_set.voxels.len(),
        layer: None,
        values: g.reshape(dims.to_vec()).expect("input is single-channel"),
    })
}

/// Element-wise product of the upsampled GradCAM map and the guided
/// backpropagation map.
pub fn guided_grad_cam<T: Scalar>(
    model: &Model<T>,
    input: &Tensor<T>,
    target_layer: &str,
    pixel_set: &PixelSet,
) -> Result<AttributionMap<T>, XaiError> {
    let cam = grad_cam(model, input, target_layer, pixel_set)?;
    let guided = guided_backprop(model, input, pixel_set)?;
    let values = Tensor::from_vec(
        cam.values.shape().to_vec(),
        cam.values
            .data()
            .iter()
            .zip(guided.values.data())
            .map(|(&a, &b)| a * b)
            .collect(),
    )
    .expect("same grid");
    Ok(AttributionMap {
        method: AttributionMethod::GuidedGradCam,
        class_id: pixel_set.class_id,
        pixel_count: pixel_set.voxels.len(),
        layer: Some(target_layer.to_string()),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tape::Var;
    use crate::unet::UNetConfig;

    fn tiny_model(seed: u64) -> Model<f64> {
        let mut rng = Rng::from_seed(seed);
        let cfg = UNetConfig {
            levels: 2,
            channels_per_level: vec![3, 5],
            down_strides: vec![[2, 2, 2]],
            ..UNetConfig::tiny()
        };
        Model::build(cfg, &mut rng).unwrap()
    }

    fn test_input(seed: u64) -> Tensor<f64> {
        let mut rng = Rng::from_seed(seed);
        Tensor::from_fn(vec![1, 1, 8, 8, 8], |_| rng.uniform_in(0.0, 1.0))
    }

    #[test]
    fn guided_equals_plain_gradient_without_activations() {
        // chain of linear ops only: the guided rule is vacuous
        let mut rng = Rng::from_seed(21);
        let x_t = Tensor::<f64>::from_fn(vec![1, 2, 4, 4, 4], |_| rng.uniform_in(-1.0, 1.0));
        let w_t = Tensor::<f64>::from_fn(vec![3, 2, 3, 3, 3], |_| rng.uniform_in(-0.5, 0.5));
        let run = |guided: bool| -> Vec<f64> {
            let mut tape: Tape<f64> = Tape::new();
            let x = tape.leaf(x_t.clone(), true);
            let w = tape.leaf(w_t.clone(), false);
            let y = tape.conv3d(x, w, None, [1, 1, 1], [1, 1, 1]).unwrap();
            let z = tape.affine(y, 1.7, 0.3);
            let seed = Tensor::ones(tape.shape(z).to_vec());
            let grads = if guided {
                tape.backward_guided(z, &seed).unwrap()
            } else {
                tape.backward_seeded(z, &seed).unwrap()
            };
            grads.get(x).unwrap().data().to_vec()
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn single_relu_negative_preactivation_blocks() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![-1.0, 2.0]).unwrap(), true);
        let y = tape.relu(x);
        let seed = Tensor::ones(vec![2]);
        let grads = tape.backward_guided(y, &seed).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn guided_magnitudes_bounded_by_positive_part_gradients() {
        // two-layer ReLU toy net: guided gradients can only remove signal
        // relative to a plain backward whose negative contributions are
        // clipped at each step; verify against explicit path enumeration
        let w1 = [[0.6, -0.4], [0.3, 0.8]];
        let w2 = [0.7, -0.5];
        let x_vals = [0.9, 0.4];
        let build = |tape: &mut Tape<f64>| -> (Var, Var) {
            let x = tape.leaf(Tensor::from_vec(vec![2], x_vals.to_vec()).unwrap(), true);
            let w1_rows: Vec<Var> = w1
                .iter()
                .map(|r| tape.leaf(Tensor::from_vec(vec![2], r.to_vec()).unwrap(), false))
                .collect();
            // h_i = relu(<w1_i, x>)
            let mut hs = Vec::new();
            for r in w1_rows {
                let p = tape.mul(x, r).unwrap();
                let s = tape.sum_all(p);
                hs.push(tape.relu(s));
            }
            // y = w2 . h
            let mut acc = tape.mul_scalar(hs[0], w2[0]);
            let h1w = tape.mul_scalar(hs[1], w2[1]);
            acc = tape.add(acc, h1w).unwrap();
            (x, acc)
        };
        let mut tape = Tape::new();
        let (x, y) = build(&mut tape);
        let grads = tape.backward_guided(y, &Tensor::scalar(1.0)).unwrap();
        let guided = grads.get(x).unwrap().data().to_vec();

        // path enumeration: contribution of path i is w2_i * w1_i_j when
        // h_i > 0 and the incoming signal w2_i >= 0
        let mut expected = [0.0f64; 2];
        for i in 0..2 {
            let pre: f64 = w1[i][0] * x_vals[0] + w1[i][1] * x_vals[1];
            if pre > 0.0 && w2[i] >= 0.0 {
                for j in 0..2 {
                    // the guided rule also clips the per-input signal sign
                    let contrib = w2[i] * w1[i][j];
                    expected[j] += contrib;
                }
            }
        }
        assert_eq!(guided, expected.to_vec());
    }

    #[test]
    fn guided_zero_where_plain_gradient_zero() {
        let model = tiny_model(13);
        let input = test_input(14);
        let m = PixelSet::all_voxels(0, [8, 8, 8]);
        let guided = guided_backprop(&model, &input, &m).unwrap();

        let mut tape = Tape::new();
        let x = tape.leaf(input.clone(), true);
        let trace = model.forward_eval(&mut tape, x).unwrap();
        let seed = m.seed_tensor::<f64>(tape.shape(trace.logits));
        let plain = tape.backward_seeded(trace.logits, &seed).unwrap();
        let pg = plain.get(x).unwrap();
        for (&g, &p) in guided.values.data().iter().zip(pg.data()) {
            if p == 0.0 {
                assert_eq!(g, 0.0);
            }
        }
    }

    #[test]
    fn guided_gradcam_absorption_and_identity() {
        let model = tiny_model(15);
        let input = test_input(16);
        let m = PixelSet::all_voxels(2, [8, 8, 8]);
        let cam = grad_cam(&model, &input, "bottleneck", &m).unwrap();
        let guided = guided_backprop(&model, &input, &m).unwrap();
        let combo = guided_grad_cam(&model, &input, "bottleneck", &m).unwrap();
        for i in 0..combo.values.numel() {
            let c = cam.values.data()[i];
            let g = guided.values.data()[i];
            let out = combo.values.data()[i];
            assert_eq!(out, c * g);
            if c == 0.0 {
                assert_eq!(out, 0.0);
            }
            if c > 0.0 {
                assert_eq!(out.signum() * g.signum() >= 0.0, true);
            }
        }
    }
}
