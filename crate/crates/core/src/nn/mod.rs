//! A small layer library with explicit backward passes.
//!
//! Layers are stateless descriptions; their weights live in [`ModelParams`]
//! under a (group, tensor) key, so the same network can be evaluated against
//! different parameter sets and frozen group-by-group.

mod basic;
mod container;
mod conv;
pub mod gradcheck;
mod norm;
mod pool;

use std::fmt;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use basic::{Dropout, Linear, Relu};
pub use container::{Concat, Sequential};
pub use conv::{Conv1d, Conv3d};
pub use norm::FrozenBatchNorm;
pub use pool::{GlobalAvgPool, MaxPool3d};

use crate::error::Result;
use crate::params::{Gradients, ModelParams};

/// Forward-pass mode. Training mode owns the caller's randomness stream so
/// replicas stay reproducible.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Values a layer keeps from its forward pass for the backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    pub tensors: Vec<ArrayD<f64>>,
    pub indices: Vec<usize>,
    pub dims: Vec<usize>,
    pub children: Vec<Tape>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    Zeros,
    Ones,
}

impl Init {
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform(1.0 / (fan_in as f64).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub group: String,
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Buffers are stored with the group but never receive gradients.
    pub buffer: bool,
}

impl ParamSpec {
    pub fn tensor(group: &str, name: String, shape: Vec<usize>, init: Init) -> Self {
        Self {
            group: group.to_string(),
            name,
            shape,
            init,
            buffer: false,
        }
    }

    pub fn buffer(group: &str, name: String, shape: Vec<usize>, init: Init) -> Self {
        Self {
            buffer: true,
            ..Self::tensor(group, name, shape, init)
        }
    }
}

pub trait Layer: Send + Sync + fmt::Debug {
    fn forward(&self, params: &ModelParams, x: ArrayD<f64>, mode: &mut Mode<'_>) -> Result<(ArrayD<f64>, Tape)>;

    /// Accumulates parameter gradients for trainable groups and returns the
    /// input gradient when `need_dx` is set.
    fn backward(
        &self,
        params: &ModelParams,
        tape: Tape,
        dy: ArrayD<f64>,
        grads: &mut Gradients,
        need_dx: bool,
    ) -> Result<Option<ArrayD<f64>>>;

    fn param_specs(&self) -> Vec<ParamSpec> {
        Vec::new()
    }

    fn has_trainable(&self, params: &ModelParams) -> bool {
        self.param_specs()
            .iter()
            .any(|s| !s.buffer && params.is_trainable(&s.group))
    }
}

/// Materialises parameters for `specs`, drawing in declaration order from a
/// seeded stream. All groups start trainable.
pub fn init_params(specs: &[ParamSpec], seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::new();
    for spec in specs {
        let arr = match spec.init {
            Init::Zeros => ArrayD::zeros(IxDyn(&spec.shape)),
            Init::Ones => ArrayD::ones(IxDyn(&spec.shape)),
            Init::Uniform(bound) => {
                let n = spec.shape.iter().product();
                let values = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
                ArrayD::from_shape_vec(IxDyn(&spec.shape), values).expect("shape matches length")
            }
        };
        let group = params.group_or_insert(&spec.group, true);
        if spec.buffer {
            group.buffers.insert(spec.name.clone(), arr);
        } else {
            group.tensors.insert(spec.name.clone(), arr);
        }
    }
    params
}

/// Checks that `params` holds every tensor of `specs` with the declared shape.
pub fn check_params(specs: &[ParamSpec], params: &ModelParams) -> Result<()> {
    for spec in specs {
        let found = params.get(&spec.group, &spec.name)?;
        if found.shape() != spec.shape.as_slice() {
            return Err(crate::Error::GroupShape {
                group: spec.group.clone(),
                tensor: spec.name.clone(),
                expected: spec.shape.clone(),
                found: found.shape().to_vec(),
            });
        }
    }
    Ok(())
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
