//! Named parameter storage shared by every model component.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Coarse grouping used to freeze parts of the model during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    VisualCnn,
    Alignment,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.groups.push(group);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Uniform in `[-bound, bound)`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        bound: f64,
        rng: &mut Rng,
    ) -> ParamId {
        let n = shape.iter().product();
        let t = Tensor::from_parts(shape.to_vec(), rng.uniform_vec(n, -bound, bound));
        self.add(name, group, t)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn total_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Puts every parameter on `tape`; those in a frozen group become constants.
    pub fn bind(&self, tape: &Tape, frozen: &[ParamGroup]) -> Bound {
        let vars = self
            .values
            .iter()
            .zip(&self.groups)
            .map(|(v, g)| if frozen.contains(g) { tape.constant(v.clone()) } else { tape.param(v.clone()) })
            .collect();
        Bound { vars }
    }

    /// Replaces all values from `(name, tensor)` pairs, requiring an exact name and shape match.
    pub fn load_values(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.values.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters, model expects {}",
                entries.len(),
                self.values.len()
            )));
        }
        for (name, t) in entries {
            let id = self.find(&name).ok_or_else(|| Error::Data(format!("unknown parameter `{name}`")))?;
            if t.shape() != self.values[id.0].shape() {
                return Err(Error::Data(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    self.values[id.0].shape()
                )));
            }
            self.values[id.0] = t;
        }
        Ok(())
    }
}

/// Parameters placed on one tape.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps vars already on a tape, in parameter-id order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// A tape together with the parameters bound onto it.
pub struct Ctx<'a> {
    pub tape: &'a Tape,
    pub params: &'a Bound,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a Tape, params: &'a Bound) -> Self {
        Self { tape, params }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.params.var(id)
    }
}

/// He-uniform bound for a layer with `fan_in` inputs.
pub fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Glorot-uniform bound.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
