//! Named parameter storage shared by the attention blocks and the network.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Adds a tensor drawn uniformly from `±1/√fan_in`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.add(name, Tensor::uniform(shape, -bound, bound, rng))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(value.shape(), self.tensors[id.0].shape(), "set: shape change");
        self.tensors[id.0] = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape, requires_grad: bool) -> Bound<'t> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.var(t.clone(), requires_grad))
                .collect(),
        }
    }
}

/// Parameters of a [`ParamStore`] recorded on one tape, indexed by [`ParamId`].
#[derive(Clone)]
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Wraps externally created variables; `vars[i]` stands for `ParamId(i)`.
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Self { vars }
    }

    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

/// Convolution weight `O×I×K×K` with an optional per-channel bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    /// Square kernel, "same" padding `k/2` unless `stride` shrinks the map.
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * k * k;
        let weight = store.add_uniform(format!("{name}.weight"), &[cout, cin, k, k], fan_in, rng);
        let bias = bias.then(|| store.add_uniform(format!("{name}.bias"), &[cout], fan_in, rng));
        Self {
            weight,
            bias,
            stride,
            padding: k / 2,
        }
    }

    pub fn apply<'t>(&self, x: Var<'t>, bound: &Bound<'t>) -> Result<Var<'t>> {
        let y = x.conv2d(bound.get(self.weight), self.stride, self.padding)?;
        match self.bias {
            Some(b) => add_channel_bias(y, bound.get(b)),
            None => Ok(y),
        }
    }
}

/// Adds a `[C]` bias to an `N×C×H×W` map.
pub fn add_channel_bias<'t>(x: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    let c = bias.shape()[0];
    x.add(bias.reshape(&[1, c, 1, 1])?)
}

/// Affine layer `Cout×Cin` plus bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.add_uniform(format!("{name}.weight"), &[cout, cin], cin, rng),
            bias: store.add_uniform(format!("{name}.bias"), &[cout], cin, rng),
        }
    }

    /// Applies to an `N×Cin` input.
    pub fn apply<'t>(&self, x: Var<'t>, bound: &Bound<'t>) -> Result<Var<'t>> {
        x.linear(bound.get(self.weight), Some(bound.get(self.bias)))
    }
}
