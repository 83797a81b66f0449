//! Minimal reverse-mode automatic differentiation over dense row-major
//! tensors: enough machinery to define, train and checkpoint the encoder and
//! the warp regressor, nothing more.
//!
//! The design is a tape of immutable value nodes plus one backward closure
//! per node. Graphs are built per forward pass and consumed by [`Graph::backward`];
//! gradients accumulate (`+=`) into [`ParameterSet`] entries so that repeated
//! backward passes sum.

mod adam;
mod graph;
pub mod gradcheck;

pub use adam::Adam;
pub use graph::{Graph, Var};

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid shape {shape:?} for buffer of {len} elements")]
    ShapeLenMismatch { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("graph already consumed by a non-retaining backward pass")]
    GraphConsumed,
    #[error("parameter {0:?} has no gradient")]
    MissingGrad(String),
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("{0}")]
    InvalidArgument(String),
}

/// Element dtype tag, carried by checkpoints and shape/grad audits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dtype::F32 => write!(f, "f32"),
            Dtype::F64 => write!(f, "f64"),
        }
    }
}

/// Floating scalar the tensor machinery is generic over. Training runs in
/// `f32`; gradient-check tests run the same code in `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
    fn to_le_bytes_vec(self) -> Vec<u8>;
    fn from_le_slice(bytes: &[u8]) -> Self;
    /// Bytes per element, matching the checkpoint payload layout.
    fn byte_width() -> usize;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte f32"))
    }
    fn byte_width() -> usize {
        4
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn into_f64(self) -> f64 {
        self
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte f64"))
    }
    fn byte_width() -> usize {
        8
    }
}

/// Dense row-major tensor. `grad`, when present, has the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
    pub requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeLenMismatch {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![S::zero(); numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(v: S) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut Vec<S>> {
        self.grad.as_mut()
    }

    /// Split borrow of value and gradient buffers.
    pub(crate) fn data_and_grad(&mut self) -> (&mut [S], Option<&[S]>) {
        let Self { data, grad, .. } = self;
        (data.as_mut_slice(), grad.as_deref())
    }

    /// Installs a zero gradient buffer (idempotent reset).
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = S::zero()),
            None => self.grad = Some(vec![S::zero(); self.data.len()]),
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn accumulate_grad(&mut self, delta: &[S]) {
        debug_assert_eq!(delta.len(), self.data.len());
        match &mut self.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += *di;
                }
            }
            None => self.grad = Some(delta.to_vec()),
        }
    }

    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(TensorError::ShapeLenMismatch {
                shape: shape.to_vec(),
                len: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Element-exact dtype conversion (used to lift f32 fixtures into f64
    /// gradient checks).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.into_f64())).collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| f(*v)).collect(),
            grad: None,
            requires_grad: false,
        }
    }
}

/// Named, insertion-ordered collection of trainable tensors.
///
/// Iteration order is the insertion order, which makes optimizer state,
/// checkpoint layout and parameter hashes reproducible across runs.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet<S: Scalar> {
    entries: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> ParameterSet<S> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<S>) -> Result<(), TensorError> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        self.entries.push((name.to_string(), tensor.requires_grad(true)));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in &mut self.entries {
            t.zero_grad();
        }
    }

    pub fn clear_grads(&mut self) {
        for (_, t) in &mut self.entries {
            t.clear_grad();
        }
    }

    pub fn cast<T: Scalar>(&self) -> ParameterSet<T> {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast::<T>().requires_grad(true)))
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and little-endian element bytes; equal
    /// hashes mean bitwise-equal parameters. Used by freeze audits and
    /// checkpoint identity tests.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.shape.len() as u64).to_le_bytes());
            for d in &t.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &t.data {
                h.update(v.to_le_bytes_vec());
            }
        }
        h.finalize().into()
    }
}

pub fn content_hash_hex<S: Scalar>(ps: &ParameterSet<S>) -> String {
    ps.content_hash().iter().map(|b| format!("{b:02x}")).collect()
}
