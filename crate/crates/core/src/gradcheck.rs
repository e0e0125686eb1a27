//! Central finite-difference gradient checking.
//!
//! The checked function is rebuilt on a fresh tape for every probe, so it
//! must be deterministic for fixed inputs (seed any internal randomness).

use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Which input elements to probe with finite differences.
#[derive(Debug, Clone, Copy)]
pub enum CheckMode {
    /// Every element of every input.
    Full,
    /// A deterministic random subset per input; use when inputs are large.
    Sampled { per_tensor: usize, seed: u64 },
}

/// Maximum over probed elements of
/// `|analytic - central_difference| / max(|analytic|, |cd|, 1e-12)` for a
/// scalar-valued tensor function.
pub fn grad_check<T, F>(mut f: F, inputs: &[Tensor<T>], epsilon: f64, mode: CheckMode) -> f64
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, &[Var]) -> Var,
{
    let eval = |tensors: &[Tensor<T>], f: &mut F| -> (Tape<T>, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), true))
            .collect();
        let root = f(&mut tape, &vars);
        assert!(
            tape.value(root).numel() == 1,
            "grad_check requires a scalar-valued function"
        );
        (tape, vars, root)
    };

    let (tape, vars, root) = eval(inputs, &mut f);
    let grads = tape.backward(root).expect("backward over checked function");
    let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| grads.get_or_zeros(v, &tape)).collect();

    let mut max_rel: f64 = 0.0;
    for (ti, input) in inputs.iter().enumerate() {
        let indices: Vec<usize> = match mode {
            CheckMode::Full => (0..input.numel()).collect(),
            CheckMode::Sampled { per_tensor, seed } => {
                let mut rng = Rng::from_seed(seed ^ (ti as u64).wrapping_mul(0x9e3779b9));
                (0..per_tensor.min(input.numel()))
                    .map(|_| rng.below(input.numel()))
                    .collect()
            }
        };
        for idx in indices {
            let probe = |delta: f64, f: &mut F| -> f64 {
                let mut perturbed: Vec<Tensor<T>> = inputs.to_vec();
                let mut data = input.data().to_vec();
                data[idx] = data[idx] + T::from_f64(delta);
                perturbed[ti] =
                    Tensor::from_vec(input.shape().to_vec(), data).expect("same shape");
                let (tape, _, root) = eval(&perturbed, f);
                tape.value(root).item().as_f64()
            };
            let plus = probe(epsilon, &mut f);
            let minus = probe(-epsilon, &mut f);
            let cd = (plus - minus) / (2.0 * epsilon);
            let an = analytic[ti].data()[idx].as_f64();
            let rel = (an - cd).abs() / an.abs().max(cd.abs()).max(1e-12);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let mut rng = Rng::from_seed(1);
        let x = Tensor::<f64>::from_fn(vec![3, 4], |_| rng.uniform_in(-1.0, 1.0));
        // sum is linear, so a large step keeps the quotient exact while
        // avoiding cancellation noise
        let err = grad_check(
            |tape, vars| tape.sum_all(vars[0]),
            &[x],
            0.25,
            CheckMode::Full,
        );
        assert!(err < 1e-12, "rel err {err}");
    }

    #[test]
    fn product_chain() {
        let mut rng = Rng::from_seed(2);
        let x = Tensor::<f64>::from_fn(vec![5], |_| rng.uniform_in(0.5, 1.5));
        let y = Tensor::<f64>::from_fn(vec![5], |_| rng.uniform_in(0.5, 1.5));
        let err = grad_check(
            |tape, vars| {
                let p = tape.mul(vars[0], vars[1]).unwrap();
                let s = tape.sigmoid(p);
                tape.sum_all(s)
            },
            &[x, y],
            1e-6,
            CheckMode::Full,
        );
        assert!(err < 1e-8, "rel err {err}");
    }
}
