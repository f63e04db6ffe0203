//! Layers used by the generator, discriminator and mixture density network.
//! Each layer only holds [`ParamId`]s; the values live in a [`ParamStore`].

use rand::{Rng, RngExt};

use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::tape::{BatchNormMode, Tape, Var};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f32 = 0.2;
pub const ELU_ALPHA: f32 = 1.0;
pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.9;

/// Uniform in `(-1/√fan_in, 1/√fan_in)`.
pub fn uniform_fan_in<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f32).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("finite init")
}

/// Whether a forward pass should record parameters as differentiable leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Track {
    Params,
    Frozen,
}

fn bind(tape: &mut Tape, store: &ParamStore, id: ParamId, track: Track) -> Result<Var> {
    match track {
        Track::Params => tape.param(store, id),
        Track::Frozen => tape.frozen(store, id),
    }
}

/// Fully connected layer `x·W + b` on `N×in` inputs.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let weight = store.add_param(&format!("{name}.weight"), uniform_fan_in(&[inputs, outputs], inputs, rng));
        let bias = store.add_param(&format!("{name}.bias"), uniform_fan_in(&[outputs], inputs, rng));
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, track: Track) -> Result<Var> {
        let w = bind(tape, store, self.weight, track)?;
        let b = bind(tape, store, self.bias, track)?;
        let y = tape.matmul(x, w)?;
        tape.add_channel_bias(y, b)
    }
}

/// Strided convolution with `out×in×k×k` kernels.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add_param(&format!("{name}.weight"), uniform_fan_in(&[out_ch, in_ch, kernel, kernel], fan_in, rng));
        let bias = with_bias.then(|| store.add_param(&format!("{name}.bias"), uniform_fan_in(&[out_ch], fan_in, rng)));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, track: Track) -> Result<Var> {
        let w = bind(tape, store, self.weight, track)?;
        let mut y = tape.conv2d(x, w, self.stride, self.pad)?;
        if let Some(b) = self.bias {
            let b = bind(tape, store, b, track)?;
            y = tape.add_channel_bias(y, b)?;
        }
        Ok(y)
    }
}

/// Transposed convolution with `in×out×k×k` kernels.
#[derive(Clone, Debug)]
pub struct Deconv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Deconv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add_param(&format!("{name}.weight"), uniform_fan_in(&[in_ch, out_ch, kernel, kernel], fan_in, rng));
        let bias = with_bias.then(|| store.add_param(&format!("{name}.bias"), uniform_fan_in(&[out_ch], fan_in, rng)));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, track: Track) -> Result<Var> {
        let w = bind(tape, store, self.weight, track)?;
        let mut y = tape.deconv2d(x, w, self.stride, self.pad)?;
        if let Some(b) = self.bias {
            let b = bind(tape, store, b, track)?;
            y = tape.add_channel_bias(y, b)?;
        }
        Ok(y)
    }
}

/// Batch normalization with learned scale/shift and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f32,
    pub momentum: f32,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add_param(&format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add_param(&format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::full(&[channels], 1.0)),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    /// In training mode the running statistics in `store` are updated.
    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var, training: bool, track: Track) -> Result<Var> {
        if !training {
            return self.forward_eval(tape, store, x, track);
        }
        let g = bind(tape, store, self.gamma, track)?;
        let b = bind(tape, store, self.beta, track)?;
        {
            let mut mean = store.get(self.running_mean).data().to_vec();
            let mut var = store.get(self.running_var).data().to_vec();
            let y = tape.batch_norm(
                x,
                g,
                b,
                BatchNormMode::Train {
                    running_mean: &mut mean,
                    running_var: &mut var,
                    momentum: self.momentum,
                },
                self.eps,
            )?;
            store.get_mut(self.running_mean).data_mut().copy_from_slice(&mean);
            store.get_mut(self.running_var).data_mut().copy_from_slice(&var);
            Ok(y)
        }
    }

    /// Training-mode normalization that leaves the running statistics alone.
    pub fn forward_batch_stats(&self, tape: &mut Tape, store: &ParamStore, x: Var, track: Track) -> Result<Var> {
        let g = bind(tape, store, self.gamma, track)?;
        let b = bind(tape, store, self.beta, track)?;
        let mut mean = store.get(self.running_mean).data().to_vec();
        let mut var = store.get(self.running_var).data().to_vec();
        let mode = BatchNormMode::Train {
            running_mean: &mut mean,
            running_var: &mut var,
            momentum: self.momentum,
        };
        tape.batch_norm(x, g, b, mode, self.eps)
    }

    /// Inference-mode normalization by the running statistics.
    pub fn forward_eval(&self, tape: &mut Tape, store: &ParamStore, x: Var, track: Track) -> Result<Var> {
        let g = bind(tape, store, self.gamma, track)?;
        let b = bind(tape, store, self.beta, track)?;
        let mode = BatchNormMode::Eval {
            running_mean: store.get(self.running_mean).data(),
            running_var: store.get(self.running_var).data(),
        };
        tape.batch_norm(x, g, b, mode, self.eps)
    }
}
