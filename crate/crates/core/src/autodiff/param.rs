use super::adam::{adam_step, AdamState};
use super::array::{Array, Real};
use super::checkpoint::{Checkpoint, Record};
use super::graph::{Graph, Var};
use crate::error::{Error, Result};

/// Learning-rate group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Feature-plane matrices and z-vectors.
    Planes,
    /// Weights and biases of every MLP.
    Mlp,
}

/// A named trainable array with its optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Array<T>,
    pub adam: AdamState<T>,
    pub group: ParamGroup,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, value: Array<T>, group: ParamGroup) -> Self {
        let adam = AdamState::new(value.shape());
        Param {
            name: name.into(),
            value: value.with_grad(true),
            adam,
            group,
        }
    }

    /// Inserts the parameter into `graph`, as a constant when `trainable` is false.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> Result<Var> {
        graph.leaf(self.value.clone().with_grad(trainable))
    }

    pub fn step(&mut self, grad: &Array<T>, lr: f64) -> Result<()> {
        adam_step(&mut self.value, grad, &mut self.adam, lr)
    }

    pub fn save(&self, ck: &mut Checkpoint) {
        ck.push(Record::array(self.name.clone(), &self.value));
        ck.push(Record::array(format!("{}.adam_m", self.name), &self.adam.m));
        ck.push(Record::array(format!("{}.adam_v", self.name), &self.adam.v));
        ck.push(Record::u64(format!("{}.adam_t", self.name), vec![self.adam.t]));
    }

    /// Restores value and optimizer state saved by [`Param::save`].
    pub fn load(&mut self, ck: &Checkpoint) -> Result<()> {
        let value = ck.require(&self.name)?.to_array::<T>()?;
        if value.shape() != self.value.shape() {
            return Err(Error::Checkpoint(format!(
                "{}: shape {:?} in checkpoint, model expects {:?}",
                self.name,
                value.shape(),
                self.value.shape()
            )));
        }
        self.value = value.with_grad(true);
        if let Some(m) = ck.get(&format!("{}.adam_m", self.name)) {
            self.adam.m = m.to_array()?;
            self.adam.v = ck.require(&format!("{}.adam_v", self.name))?.to_array()?;
            let t = ck.require(&format!("{}.adam_t", self.name))?;
            self.adam.t = match &t.payload {
                super::checkpoint::Payload::U64(v) if v.len() == 1 => v[0],
                _ => return Err(Error::Checkpoint(format!("{}.adam_t malformed", self.name))),
            };
        }
        Ok(())
    }
}
