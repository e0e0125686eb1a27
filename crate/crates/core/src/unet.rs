//! 5-level volumetric UNet.
//!
//! Encoder blocks apply conv(k=3) -> batch norm -> dropout -> PReLU, with
//! downsampling folded into the block convolution as stride between levels.
//! The decoder mirrors the encoder with stride-matched transposed
//! convolutions and channel-concatenation skip connections, and a final
//! 1x1x1 convolution produces per-class logits (sigmoid is applied
//! downstream).

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::ops::{BnMode, BnStats};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub levels: usize,
    pub channels_per_level: Vec<usize>,
    pub down_strides: Vec<[usize; 3]>,
    pub dropout_p: f64,
    pub norm: String,
    pub activation: String,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 1,
            out_channels: 3,
            levels: 5,
            channels_per_level: vec![32, 64, 128, 256, 512],
            down_strides: vec![[2, 2, 2]; 4],
            dropout_p: 0.2,
            norm: "batch".into(),
            activation: "prelu".into(),
        }
    }
}

impl UNetConfig {
    /// A 3-level configuration small enough for tests and desk-scale runs.
    pub fn tiny() -> Self {
        UNetConfig {
            levels: 3,
            channels_per_level: vec![4, 8, 16],
            down_strides: vec![[2, 2, 2]; 2],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.levels < 2 {
            return Err(ModelError::InvalidConfig(format!(
                "levels must be >= 2, got {}",
                self.levels
            )));
        }
        if self.channels_per_level.len() != self.levels {
            return Err(ModelError::InvalidConfig(format!(
                "levels == len(channels_per_level) violated: {} vs {}",
                self.levels,
                self.channels_per_level.len()
            )));
        }
        if self.down_strides.len() != self.levels - 1 {
            return Err(ModelError::InvalidConfig(format!(
                "len(down_strides) == levels - 1 violated: {} vs {}",
                self.down_strides.len(),
                self.levels - 1
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(ModelError::InvalidConfig("zero channel count".into()));
        }
        if self.channels_per_level.contains(&0) {
            return Err(ModelError::InvalidConfig("zero-width level".into()));
        }
        if self.down_strides.iter().flatten().any(|&s| s == 0) {
            return Err(ModelError::InvalidConfig("zero stride".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(ModelError::InvalidConfig(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        if self.norm != "batch" {
            return Err(ModelError::InvalidConfig(format!(
                "unsupported norm `{}`",
                self.norm
            )));
        }
        if self.activation != "prelu" {
            return Err(ModelError::InvalidConfig(format!(
                "unsupported activation `{}`",
                self.activation
            )));
        }
        Ok(())
    }

    /// Per-axis divisibility requirement on input spatial extents: the
    /// product of the down strides along that axis.
    pub fn required_multiple(&self) -> [usize; 3] {
        let mut m = [1usize; 3];
        for s in &self.down_strides {
            for a in 0..3 {
                m[a] *= s[a];
            }
        }
        m
    }

    /// Ordered `(name, shape)` of every trainable parameter; build, load,
    /// and the enumeration oracle in tests all agree on this list.
    pub fn parameter_specs(&self) -> Vec<(String, Vec<usize>)> {
        let ch = &self.channels_per_level;
        let mut specs = Vec::new();
        for i in 0..self.levels {
            let cin = if i == 0 { self.in_channels } else { ch[i - 1] };
            // block convs feed batch norm, which cancels any bias exactly
            specs.push((format!("enc{i}.conv.weight"), vec![ch[i], cin, 3, 3, 3]));
            specs.push((format!("enc{i}.bn.gamma"), vec![ch[i]]));
            specs.push((format!("enc{i}.bn.beta"), vec![ch[i]]));
            specs.push((format!("enc{i}.prelu.alpha"), vec![ch[i]]));
        }
        for i in (0..self.levels - 1).rev() {
            let s = self.down_strides[i];
            specs.push((
                format!("up{i}.weight"),
                vec![ch[i + 1], ch[i], s[0], s[1], s[2]],
            ));
            specs.push((format!("up{i}.bias"), vec![ch[i]]));
            specs.push((format!("dec{i}.conv.weight"), vec![ch[i], 2 * ch[i], 3, 3, 3]));
            specs.push((format!("dec{i}.bn.gamma"), vec![ch[i]]));
            specs.push((format!("dec{i}.bn.beta"), vec![ch[i]]));
            specs.push((format!("dec{i}.prelu.alpha"), vec![ch[i]]));
        }
        specs.push((
            "head.weight".into(),
            vec![self.out_channels, ch[0], 1, 1, 1],
        ));
        specs.push(("head.bias".into(), vec![self.out_channels]));
        specs
    }

    /// Ordered `(name, channels)` of every batch-norm layer.
    pub fn bn_layer_specs(&self) -> Vec<(String, usize)> {
        let ch = &self.channels_per_level;
        let mut specs = Vec::new();
        for i in 0..self.levels {
            specs.push((format!("enc{i}.bn"), ch[i]));
        }
        for i in (0..self.levels - 1).rev() {
            specs.push((format!("dec{i}.bn"), ch[i]));
        }
        specs
    }
}

/// Activation handles recorded during one forward pass.
#[derive(Debug)]
pub struct ForwardTrace {
    pub logits: Var,
    /// Block outputs by name: `enc0..`, `bottleneck`, `dec0..`, `logits`.
    pub activations: Vec<(String, Var)>,
    /// Parameter leaves in `Model::params()` order (training needs them to
    /// route gradients back to named weights).
    pub param_vars: Vec<Var>,
}

impl ForwardTrace {
    pub fn activation(&self, name: &str) -> Option<Var> {
        self.activations
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, v)| v)
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub struct Model<T: Scalar> {
    config: UNetConfig,
    params: Vec<(String, Tensor<T>)>,
    bn_stats: Vec<(String, BnStats<T>)>,
}

enum StatsRef<'a, T> {
    Train(&'a mut Vec<(String, BnStats<T>)>),
    Eval(&'a Vec<(String, BnStats<T>)>),
}

impl<T: Scalar> Model<T> {
    /// Initialize a fresh model: Kaiming-uniform fan-in weights with PReLU
    /// gain (alpha 0.25), zero-centered biases, unit batch-norm scale.
    pub fn build(config: UNetConfig, rng: &mut Rng) -> Result<Model<T>, ModelError> {
        config.validate()?;
        let gain = (2.0 / (1.0 + 0.25f64 * 0.25)).sqrt();
        let params = config
            .parameter_specs()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".weight") && shape.len() == 5 {
                    let fan_in: usize = shape[1] * shape[2] * shape[3] * shape[4];
                    let bound = gain * (3.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(shape, |_| T::from_f64(rng.uniform_in(-bound, bound)))
                } else if name.ends_with(".bias") {
                    // fan-in of the conv this bias belongs to is unknown here;
                    // use the conventional 1/sqrt(len) bound
                    let bound = 1.0 / (shape[0] as f64).sqrt();
                    Tensor::from_fn(shape, |_| T::from_f64(rng.uniform_in(-bound, bound)))
                } else if name.ends_with(".gamma") {
                    Tensor::ones(shape)
                } else if name.ends_with(".beta") {
                    Tensor::zeros(shape)
                } else {
                    // prelu alpha
                    Tensor::full(shape, T::from_f64(0.25))
                };
                (name, t)
            })
            .collect();
        let bn_stats = config
            .bn_layer_specs()
            .into_iter()
            .map(|(name, c)| (name, BnStats::new(c)))
            .collect();
        Ok(Model {
            config,
            params,
            bn_stats,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn bn_stats(&self) -> &[(String, BnStats<T>)] {
        &self.bn_stats
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<(), ModelError> {
        let slot = self
            .params
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| ModelError::WeightShape {
                name: name.into(),
                expected: vec![],
                found: value.shape().to_vec(),
            })?;
        if slot.1.shape() != value.shape() {
            return Err(ModelError::WeightShape {
                name: name.into(),
                expected: slot.1.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        slot.1 = value;
        Ok(())
    }

    pub fn set_bn_stats(&mut self, name: &str, stats: BnStats<T>) -> Result<(), ModelError> {
        let slot = self
            .bn_stats
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| ModelError::InvalidConfig(format!("no batch-norm layer `{name}`")))?;
        if slot.1.mean.len() != stats.mean.len() {
            return Err(ModelError::InvalidConfig(format!(
                "batch-norm `{name}` tracks {} channels, got {}",
                slot.1.mean.len(),
                stats.mean.len()
            )));
        }
        slot.1 = stats;
        Ok(())
    }

    fn check_input(&self, shape: &[usize]) -> Result<(), ModelError> {
        if shape.len() != 5 || shape[1] != self.config.in_channels {
            return Err(ModelError::InvalidConfig(format!(
                "input shape {:?}, expected (N, {}, D, H, W)",
                shape, self.config.in_channels
            )));
        }
        let required = self.config.required_multiple();
        for a in 0..3 {
            if !shape[2 + a].is_multiple_of(required[a]) {
                return Err(ModelError::Indivisible {
                    axis: 2 + a,
                    extent: shape[2 + a],
                    required: required[a],
                });
            }
        }
        Ok(())
    }

    /// Deterministic eval-mode forward: dropout off, frozen running stats,
    /// parameters recorded as constants.
    pub fn forward_eval(&self, tape: &mut Tape<T>, x: Var) -> Result<ForwardTrace, ModelError> {
        self.check_input(tape.shape(x))?;
        run_forward(
            &self.config,
            &self.params,
            StatsRef::Eval(&self.bn_stats),
            tape,
            x,
            false,
            None,
        )
    }

    /// Training-mode forward: dropout active, batch statistics used and
    /// running stats updated, parameters recorded as gradient leaves.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        rng: &mut Rng,
    ) -> Result<ForwardTrace, ModelError> {
        self.check_input(tape.shape(x))?;
        let Model {
            config,
            params,
            bn_stats,
        } = self;
        run_forward(
            config,
            params,
            StatsRef::Train(bn_stats),
            tape,
            x,
            true,
            Some(rng),
        )
    }
}

#[allow(clippy::too_many_arguments)]
fn run_forward<T: Scalar>(
    config: &UNetConfig,
    params: &[(String, Tensor<T>)],
    mut stats: StatsRef<'_, T>,
    tape: &mut Tape<T>,
    x: Var,
    training: bool,
    mut rng: Option<&mut Rng>,
) -> Result<ForwardTrace, ModelError> {
    let param_vars: Vec<Var> = params
        .iter()
        .map(|(_, t)| tape.leaf(t.clone(), training))
        .collect();
    let var_of = |name: &str| -> Var {
        let idx = params
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("parameter `{name}` exists by construction"));
        param_vars[idx]
    };

    let mut activations = Vec::new();
    let block = |tape: &mut Tape<T>,
                     h: Var,
                     prefix: &str,
                     stride: [usize; 3],
                     stats: &mut StatsRef<'_, T>,
                     rng: &mut Option<&mut Rng>|
     -> Result<Var, ModelError> {
        let w = var_of(&format!("{prefix}.conv.weight"));
        let gamma = var_of(&format!("{prefix}.bn.gamma"));
        let beta = var_of(&format!("{prefix}.bn.beta"));
        let alpha = var_of(&format!("{prefix}.prelu.alpha"));
        let bn_name = format!("{prefix}.bn");

        let h = tape.conv3d(h, w, None, stride, [1, 1, 1])?;
        let h = match stats {
            StatsRef::Train(all) => {
                let entry = all
                    .iter_mut()
                    .find(|(n, _)| *n == bn_name)
                    .expect("bn layer exists by construction");
                tape.batch_norm(
                    h,
                    gamma,
                    beta,
                    BnMode::Train {
                        stats: &mut entry.1,
                        momentum: BN_MOMENTUM,
                    },
                    BN_EPS,
                )?
            }
            StatsRef::Eval(all) => {
                let entry = all
                    .iter()
                    .find(|(n, _)| *n == bn_name)
                    .expect("bn layer exists by construction");
                tape.batch_norm(h, gamma, beta, BnMode::Eval { stats: &entry.1 }, BN_EPS)?
            }
        };
        let h = if training {
            let r = rng.as_deref_mut().expect("training forward carries an rng");
            tape.dropout(h, config.dropout_p, true, r)?
        } else {
            h
        };
        Ok(tape.prelu(h, alpha)?)
    };

    // contracting path; the last level is the bottleneck
    let mut h = x;
    let mut skips = Vec::with_capacity(config.levels - 1);
    for i in 0..config.levels {
        let stride = if i == 0 {
            [1, 1, 1]
        } else {
            config.down_strides[i - 1]
        };
        h = block(tape, h, &format!("enc{i}"), stride, &mut stats, &mut rng)?;
        if i < config.levels - 1 {
            activations.push((format!("enc{i}"), h));
            skips.push(h);
        } else {
            activations.push(("bottleneck".to_string(), h));
        }
    }

    // expanding path
    for i in (0..config.levels - 1).rev() {
        let s = config.down_strides[i];
        let up_w = var_of(&format!("up{i}.weight"));
        let up_b = var_of(&format!("up{i}.bias"));
        h = tape.conv_transpose3d(h, up_w, Some(up_b), s, [0, 0, 0])?;
        h = tape.concat(&[h, skips[i]], 1)?;
        h = block(tape, h, &format!("dec{i}"), [1, 1, 1], &mut stats, &mut rng)?;
        activations.push((format!("dec{i}"), h));
    }

    let head_w = var_of("head.weight");
    let head_b = var_of("head.bias");
    let logits = tape.conv3d(h, head_w, Some(head_b), [1, 1, 1], [0, 0, 0])?;
    activations.push(("logits".to_string(), logits));

    Ok(ForwardTrace {
        logits,
        activations,
        param_vars,
    })
}
