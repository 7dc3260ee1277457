//! Minimal differentiable-programming core: dense tensors, a reverse-mode
//! tape, parameter storage, Adam, gradient accumulation and checkpoints.

mod checkpoint;
mod optim;
mod tape;
mod tensor;

use rand::Rng;
use thiserror::Error;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{Adam, AdamConfig, GradAccumulator};
pub use tape::{Activation, BatchNormState, BatchStats, Gradients, Mode, Tape, Var};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batchnorm needs at least 2 rows in train mode, got {0}")]
    BatchTooSmall(usize),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("non-finite gradient at node {0}")]
    NonFiniteGradient(usize),
    #[error("tape node {0} refers forward")]
    GraphCycle(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors.iter().map(Tensor::shape).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }
}

/// Parameter slots of an affine map `x W + b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearLayer {
    pub w: usize,
    pub b: usize,
}

impl LinearLayer {
    /// Registers `W` (`fan_in x fan_out`, uniform in `±1/sqrt(fan_in)`) and a
    /// zero bias.
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| T::of(rng.random_range(-bound..=bound))).collect();
        let w = params.push(format!("{name}.weight"), Tensor { rows: fan_in, cols: fan_out, data });
        let b = params.push(format!("{name}.bias"), Tensor::zeros(1, fan_out));
        Self { w, b }
    }

    pub fn locate<T: Scalar>(params: &ParamSet<T>, name: &str) -> Option<Self> {
        Some(Self { w: params.index_of(&format!("{name}.weight"))?, b: params.index_of(&format!("{name}.bias"))? })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamSet<T>, x: Var) -> Result<Var, NeuralError> {
        let w = tape.param(self.w, params.get(self.w))?;
        let b = tape.param(self.b, params.get(self.b))?;
        tape.linear(x, w, b)
    }
}

/// Two-layer feed-forward block: linear, activation, linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mlp2 {
    pub first: LinearLayer,
    pub second: LinearLayer,
}

impl Mlp2 {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        dims: (usize, usize, usize),
        rng: &mut R,
    ) -> Self {
        Self {
            first: LinearLayer::init(params, &format!("{name}.0"), dims.0, dims.1, rng),
            second: LinearLayer::init(params, &format!("{name}.1"), dims.1, dims.2, rng),
        }
    }

    pub fn locate<T: Scalar>(params: &ParamSet<T>, name: &str) -> Option<Self> {
        Some(Self {
            first: LinearLayer::locate(params, &format!("{name}.0"))?,
            second: LinearLayer::locate(params, &format!("{name}.1"))?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        x: Var,
        act: Activation,
    ) -> Result<Var, NeuralError> {
        let h = self.first.forward(tape, params, x)?;
        let h = tape.activate(h, act)?;
        self.second.forward(tape, params, h)
    }
}

/// Learnable scale and shift of a batchnorm layer; running statistics live
/// alongside in a [`BatchNormState`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchNormLayer {
    pub gamma: usize,
    pub beta: usize,
}

impl BatchNormLayer {
    pub fn init<T: Scalar>(params: &mut ParamSet<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: params.push(format!("{name}.gamma"), Tensor::filled(1, dim, T::one())),
            beta: params.push(format!("{name}.beta"), Tensor::zeros(1, dim)),
        }
    }

    pub fn locate<T: Scalar>(params: &ParamSet<T>, name: &str) -> Option<Self> {
        Some(Self { gamma: params.index_of(&format!("{name}.gamma"))?, beta: params.index_of(&format!("{name}.beta"))? })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        state: &BatchNormState<T>,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats<T>>), NeuralError> {
        let g = tape.param(self.gamma, params.get(self.gamma))?;
        let b = tape.param(self.beta, params.get(self.beta))?;
        tape.batchnorm(x, g, b, state, mode)
    }
}
