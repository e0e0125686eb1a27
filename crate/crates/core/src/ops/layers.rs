//! Normalization, activation, and regularization layers.

use crate::error::TensorError;
use crate::rng::Rng;
use crate::tape::{BackwardFn, OpKind, SweepCtx, Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Per-channel running statistics owned by the model, updated by training
/// forward passes via exponential momentum.
#[derive(Debug, Clone)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BnStats<T> {
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

/// Whether batch_norm normalizes with batch statistics (and updates the
/// running stats) or with the frozen running statistics.
pub enum BnMode<'a, T> {
    Train {
        stats: &'a mut BnStats<T>,
        momentum: f64,
    },
    Eval {
        stats: &'a BnStats<T>,
    },
}

fn check_channel_param<T: Scalar>(
    op: &'static str,
    name: &str,
    t: &Tensor<T>,
    channels: usize,
) -> Result<(), TensorError> {
    if t.numel() != channels {
        return Err(TensorError::InvalidArgument {
            op,
            detail: format!("{name} has {} elements, expected {channels}", t.numel()),
        });
    }
    Ok(())
}

struct BnTrainBackward<T: Scalar> {
    xhat: Tensor<T>,
    gamma: Tensor<T>,
    inv_std: Vec<T>,
    channels: usize,
    spatial: usize,
    batch: usize,
}

impl<T: Scalar> BackwardFn<T> for BnTrainBackward<T> {
    fn backward(&self, g: &Tensor<T>, _ctx: &SweepCtx, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let c = self.channels;
        let sp = self.spatial;
        let m = T::from_f64((self.batch * sp) as f64);
        let gd = g.data();
        let xh = self.xhat.data();

        // per-channel sums of g and g*xhat
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for n in 0..self.batch {
            for ch in 0..c {
                let base = (n * c + ch) * sp;
                let mut s = T::zero();
                let mut sx = T::zero();
                for i in base..base + sp {
                    s = s + gd[i];
                    sx = sx + gd[i] * xh[i];
                }
                sum_g[ch] = sum_g[ch] + s;
                sum_gx[ch] = sum_gx[ch] + sx;
            }
        }

        let dx = needs[0].then(|| {
            let mut out = vec![T::zero(); gd.len()];
            for n in 0..self.batch {
                for ch in 0..c {
                    let base = (n * c + ch) * sp;
                    let scale = self.gamma.data()[ch] * self.inv_std[ch];
                    let mg = sum_g[ch] / m;
                    let mgx = sum_gx[ch] / m;
                    for i in base..base + sp {
                        out[i] = scale * (gd[i] - mg - xh[i] * mgx);
                    }
                }
            }
            Tensor::from_vec(g.shape().to_vec(), out).expect("shape")
        });
        let dgamma = needs[1]
            .then(|| Tensor::from_vec(vec![c], sum_gx.clone()).expect("shape"));
        let dbeta = needs[2].then(|| Tensor::from_vec(vec![c], sum_g.clone()).expect("shape"));
        vec![dx, dgamma, dbeta]
    }
}

struct BnEvalBackward<T: Scalar> {
    xhat: Tensor<T>,
    gamma: Tensor<T>,
    inv_std: Vec<T>,
    channels: usize,
    spatial: usize,
    batch: usize,
}

impl<T: Scalar> BackwardFn<T> for BnEvalBackward<T> {
    fn backward(&self, g: &Tensor<T>, _ctx: &SweepCtx, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let c = self.channels;
        let sp = self.spatial;
        let gd = g.data();
        let xh = self.xhat.data();
        let dx = needs[0].then(|| {
            let mut out = vec![T::zero(); gd.len()];
            for n in 0..self.batch {
                for ch in 0..c {
                    let base = (n * c + ch) * sp;
                    let scale = self.gamma.data()[ch] * self.inv_std[ch];
                    for i in base..base + sp {
                        out[i] = gd[i] * scale;
                    }
                }
            }
            Tensor::from_vec(g.shape().to_vec(), out).expect("shape")
        });
        let dgamma = needs[1].then(|| {
            let mut out = vec![T::zero(); c];
            for n in 0..self.batch {
                for ch in 0..c {
                    let base = (n * c + ch) * sp;
                    for i in base..base + sp {
                        out[ch] = out[ch] + gd[i] * xh[i];
                    }
                }
            }
            Tensor::from_vec(vec![c], out).expect("shape")
        });
        let dbeta = needs[2].then(|| {
            let mut out = vec![T::zero(); c];
            for n in 0..self.batch {
                for ch in 0..c {
                    let base = (n * c + ch) * sp;
                    for i in base..base + sp {
                        out[ch] = out[ch] + gd[i];
                    }
                }
            }
            Tensor::from_vec(vec![c], out).expect("shape")
        });
        vec![dx, dgamma, dbeta]
    }
}

struct PReluBackward<T: Scalar> {
    x: Tensor<T>,
    alpha: Tensor<T>,
    channels: usize,
    spatial: usize,
}

impl<T: Scalar> BackwardFn<T> for PReluBackward<T> {
    fn backward(&self, g: &Tensor<T>, ctx: &SweepCtx, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let xd = self.x.data();
        let gd = g.data();
        let per_channel = self.alpha.numel() > 1;
        let alpha_at = |flat: usize| {
            if per_channel {
                self.alpha.data()[(flat / self.spatial) % self.channels]
            } else {
                self.alpha.data()[0]
            }
        };
        let dx = needs[0].then(|| {
            let data: Vec<T> = (0..xd.len())
                .map(|i| {
                    if ctx.guided {
                        // negative-slope branch suppressed entirely
                        if xd[i] > T::zero() && gd[i] >= T::zero() {
                            gd[i]
                        } else {
                            T::zero()
                        }
                    } else if xd[i] > T::zero() {
                        gd[i]
                    } else {
                        gd[i] * alpha_at(i)
                    }
                })
                .collect();
            Tensor::from_vec(g.shape().to_vec(), data).expect("shape")
        });
        let dalpha = (needs[1] && !ctx.guided).then(|| {
            let mut out = vec![T::zero(); self.alpha.numel()];
            for i in 0..xd.len() {
                if xd[i] <= T::zero() {
                    let slot = if per_channel {
                        (i / self.spatial) % self.channels
                    } else {
                        0
                    };
                    out[slot] = out[slot] + gd[i] * xd[i];
                }
            }
            Tensor::from_vec(self.alpha.shape().to_vec(), out).expect("shape")
        });
        vec![dx, dalpha]
    }
}

struct DropoutBackward<T: Scalar> {
    scaled_mask: Tensor<T>,
}

impl<T: Scalar> BackwardFn<T> for DropoutBackward<T> {
    fn backward(&self, g: &Tensor<T>, _ctx: &SweepCtx, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![needs[0].then(|| {
            let data = g
                .data()
                .iter()
                .zip(self.scaled_mask.data())
                .map(|(&gv, &m)| gv * m)
                .collect();
            Tensor::from_vec(g.shape().to_vec(), data).expect("shape")
        })]
    }
}

/// Channel extent and per-channel spatial size of a tensor; rank < 2 is one
/// implicit channel.
fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    if shape.len() >= 2 {
        let batch = shape[0];
        let channels = shape[1];
        let spatial: usize = shape[2..].iter().product();
        (batch, channels, spatial)
    } else {
        (1, 1, shape.iter().product())
    }
}

impl<T: Scalar> Tape<T> {
    /// Batch normalization over `(N, *spatial)` per channel.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let t = self.value(x).clone();
        let shape = t.shape().to_vec();
        if shape.len() < 2 {
            return Err(TensorError::RankMismatch {
                op: "batch_norm",
                expected: 2,
                shape,
            });
        }
        let (batch, channels, spatial) = channel_layout(&shape);
        let gamma_t = self.value(gamma).clone();
        let beta_t = self.value(beta).clone();
        check_channel_param("batch_norm", "gamma", &gamma_t, channels)?;
        check_channel_param("batch_norm", "beta", &beta_t, channels)?;
        let eps_t = T::from_f64(eps);

        match mode {
            BnMode::Train { stats, momentum } => {
                let m = batch * spatial;
                if m < 2 {
                    return Err(TensorError::DegenerateBatch { count: m });
                }
                if stats.mean.len() != channels {
                    return Err(TensorError::InvalidArgument {
                        op: "batch_norm",
                        detail: format!(
                            "running stats track {} channels, input has {channels}",
                            stats.mean.len()
                        ),
                    });
                }
                let xd = t.data();
                let m_t = T::from_f64(m as f64);
                let mut mu = vec![T::zero(); channels];
                let mut var = vec![T::zero(); channels];
                for ch in 0..channels {
                    let mut s = T::zero();
                    for n in 0..batch {
                        let base = (n * channels + ch) * spatial;
                        for &v in &xd[base..base + spatial] {
                            s = s + v;
                        }
                    }
                    mu[ch] = s / m_t;
                    let mut sq = T::zero();
                    for n in 0..batch {
                        let base = (n * channels + ch) * spatial;
                        for &v in &xd[base..base + spatial] {
                            let d = v - mu[ch];
                            sq = sq + d * d;
                        }
                    }
                    var[ch] = sq / m_t;
                }
                let inv_std: Vec<T> =
                    var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();

                let mut xhat = vec![T::zero(); xd.len()];
                let mut out = vec![T::zero(); xd.len()];
                for n in 0..batch {
                    for ch in 0..channels {
                        let base = (n * channels + ch) * spatial;
                        let (g, b) = (gamma_t.data()[ch], beta_t.data()[ch]);
                        for i in base..base + spatial {
                            let h = (xd[i] - mu[ch]) * inv_std[ch];
                            xhat[i] = h;
                            out[i] = g * h + b;
                        }
                    }
                }

                // running stats take the unbiased batch variance
                let mom = T::from_f64(momentum);
                let keep = T::one() - mom;
                let unbias = T::from_f64(m as f64 / (m as f64 - 1.0));
                for ch in 0..channels {
                    stats.mean[ch] = keep * stats.mean[ch] + mom * mu[ch];
                    stats.var[ch] = keep * stats.var[ch] + mom * var[ch] * unbias;
                }

                let xhat_t = Tensor::from_vec(shape.clone(), xhat)?;
                let value = Tensor::from_vec(shape, out)?;
                Ok(self.record(
                    value,
                    vec![x, gamma, beta],
                    OpKind::BatchNormTrain,
                    Box::new(BnTrainBackward {
                        xhat: xhat_t,
                        gamma: gamma_t,
                        inv_std,
                        channels,
                        spatial,
                        batch,
                    }),
                ))
            }
            BnMode::Eval { stats } => {
                let xd = t.data();
                let inv_std: Vec<T> = stats
                    .var
                    .iter()
                    .map(|&v| T::one() / (v + eps_t).sqrt())
                    .collect();
                let mut xhat = vec![T::zero(); xd.len()];
                let mut out = vec![T::zero(); xd.len()];
                for n in 0..batch {
                    for ch in 0..channels {
                        let base = (n * channels + ch) * spatial;
                        let (g, b) = (gamma_t.data()[ch], beta_t.data()[ch]);
                        for i in base..base + spatial {
                            let h = (xd[i] - stats.mean[ch]) * inv_std[ch];
                            xhat[i] = h;
                            out[i] = g * h + b;
                        }
                    }
                }
                let xhat_t = Tensor::from_vec(shape.clone(), xhat)?;
                let value = Tensor::from_vec(shape, out)?;
                Ok(self.record(
                    value,
                    vec![x, gamma, beta],
                    OpKind::BatchNormEval,
                    Box::new(BnEvalBackward {
                        xhat: xhat_t,
                        gamma: gamma_t,
                        inv_std,
                        channels,
                        spatial,
                        batch,
                    }),
                ))
            }
        }
    }

    /// Parametric ReLU; `alpha` has one element or one per channel.
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var, TensorError> {
        let t = self.value(x).clone();
        let alpha_t = self.value(alpha).clone();
        let (_, channels, spatial) = channel_layout(t.shape());
        if alpha_t.numel() != 1 && alpha_t.numel() != channels {
            return Err(TensorError::InvalidArgument {
                op: "prelu",
                detail: format!(
                    "alpha has {} elements, expected 1 or {channels}",
                    alpha_t.numel()
                ),
            });
        }
        let per_channel = alpha_t.numel() > 1;
        let out: Vec<T> = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v > T::zero() {
                    v
                } else {
                    let a = if per_channel {
                        alpha_t.data()[(i / spatial) % channels]
                    } else {
                        alpha_t.data()[0]
                    };
                    a * v
                }
            })
            .collect();
        let value = Tensor::from_vec(t.shape().to_vec(), out)?;
        Ok(self.record(
            value,
            vec![x, alpha],
            OpKind::PRelu,
            Box::new(PReluBackward {
                x: t,
                alpha: alpha_t,
                channels,
                spatial,
            }),
        ))
    }

    /// Inverted dropout: training mode zeroes each element with probability
    /// `p` and scales survivors by `1/(1-p)`; eval mode is the identity.
    pub fn dropout(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut Rng,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::DropoutProbability { p });
        }
        if !training {
            return Ok(x);
        }
        let t = self.value(x).clone();
        let scale = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..t.numel())
            .map(|_| {
                if rng.uniform() >= p {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect();
        let mask_t = Tensor::from_vec(t.shape().to_vec(), mask)?;
        let out: Vec<T> = t
            .data()
            .iter()
            .zip(mask_t.data())
            .map(|(&v, &m)| v * m)
            .collect();
        let value = Tensor::from_vec(t.shape().to_vec(), out)?;
        Ok(self.record(
            value,
            vec![x],
            OpKind::DropoutTrain,
            Box::new(DropoutBackward { scaled_mask: mask_t }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut rng = Rng::from_seed(seed);
        Tensor::from_fn(shape, |_| rng.uniform_in(-2.0, 2.0))
    }

    #[test]
    fn bn_train_normalizes_per_channel() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(filled(vec![2, 3, 4, 4, 4], 1), false);
        let gamma = tape.leaf(Tensor::ones(vec![3]), false);
        let beta = tape.leaf(Tensor::zeros(vec![3]), false);
        let mut stats = BnStats::new(3);
        let y = tape
            .batch_norm(
                x,
                gamma,
                beta,
                BnMode::Train {
                    stats: &mut stats,
                    momentum: 0.1,
                },
                1e-5,
            )
            .unwrap();
        let yd = tape.value(y).data();
        let spatial = 64;
        for ch in 0..3 {
            let mut vals = Vec::new();
            for n in 0..2 {
                let base = (n * 3 + ch) * spatial;
                vals.extend_from_slice(&yd[base..base + spatial]);
            }
            let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let v: f64 = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-6, "channel {ch} mean {m}");
            assert!((v - 1.0).abs() < 1e-4, "channel {ch} var {v}");
        }
        // running stats moved away from the (0,1) init
        assert!(stats.mean.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn bn_eval_identity_with_unit_stats() {
        let mut tape: Tape<f64> = Tape::new();
        let t = filled(vec![1, 2, 3, 3, 3], 2);
        let x = tape.leaf(t.clone(), false);
        let gamma = tape.leaf(Tensor::ones(vec![2]), false);
        let beta = tape.leaf(Tensor::zeros(vec![2]), false);
        let stats = BnStats::new(2);
        let eps = 1e-5;
        let y = tape
            .batch_norm(x, gamma, beta, BnMode::Eval { stats: &stats }, eps)
            .unwrap();
        let scale = 1.0 / (1.0f64 + eps).sqrt();
        for (a, b) in tape.value(y).data().iter().zip(t.data()) {
            assert!((a - b * scale).abs() < 1e-12);
        }
    }

    #[test]
    fn bn_degenerate_population_errors() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::ones(vec![1, 3, 1, 1, 1]), false);
        let gamma = tape.leaf(Tensor::ones(vec![3]), false);
        let beta = tape.leaf(Tensor::zeros(vec![3]), false);
        let mut stats = BnStats::new(3);
        let err = tape
            .batch_norm(
                x,
                gamma,
                beta,
                BnMode::Train {
                    stats: &mut stats,
                    momentum: 0.1,
                },
                1e-5,
            )
            .unwrap_err();
        assert!(matches!(err, TensorError::DegenerateBatch { count: 1 }));
    }

    #[test]
    fn prelu_definition() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1, 1, 2], vec![-2.0, 3.0]).unwrap(), false);
        let alpha = tape.leaf(Tensor::scalar(0.25), false);
        let y = tape.prelu(x, alpha).unwrap();
        assert_eq!(tape.value(y).data(), &[-0.5, 3.0]);
    }

    #[test]
    fn prelu_zero_alpha_is_relu() {
        let mut tape: Tape<f64> = Tape::new();
        let t = filled(vec![1, 2, 5], 3);
        let x = tape.leaf(t.clone(), false);
        let alpha = tape.leaf(Tensor::zeros(vec![2]), false);
        let y = tape.prelu(x, alpha).unwrap();
        let r = tape.relu(x);
        assert_eq!(tape.value(y).data(), tape.value(r).data());
    }

    #[test]
    fn dropout_eval_and_p_zero_identity() {
        let mut rng = Rng::from_seed(0);
        let mut tape: Tape<f64> = Tape::new();
        let t = filled(vec![10], 4);
        let x = tape.leaf(t.clone(), false);
        let eval = tape.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(eval, x);
        let p0 = tape.dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(tape.value(p0).data(), t.data());
    }

    #[test]
    fn dropout_preserves_mean() {
        let mut rng = Rng::from_seed(11);
        let mut tape: Tape<f64> = Tape::new();
        let n = 1_000_000;
        let x = tape.leaf(Tensor::ones(vec![n]), false);
        let y = tape.dropout(x, 0.2, true, &mut rng).unwrap();
        let mean: f64 = tape.value(y).data().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn dropout_p_one_rejected() {
        let mut rng = Rng::from_seed(0);
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::ones(vec![4]), false);
        assert!(tape.dropout(x, 1.0, true, &mut rng).is_err());
    }
}
