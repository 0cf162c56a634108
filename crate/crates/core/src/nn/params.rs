//! Named parameter registry shared by every model graph.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which part of the network a parameter belongs to. Optimizer steps select
/// the groups they update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    /// Token embeddings, encoder and memory encoder.
    Shared,
    QeHead,
    PeHead,
    /// Generative decoder, its positional table and output head.
    Decoder,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Glorot { fan_in: usize, fan_out: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: Group,
    pub value: Vec<f64>,
    /// Incremented whenever an optimizer step changes the value.
    pub version: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        group: Group,
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        let len: usize = shape.iter().product();
        let value = match init {
            Init::Zeros => vec![0.0; len],
            Init::Ones => vec![1.0; len],
            Init::Glorot { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        };
        self.params.push(Param {
            name,
            shape: shape.to_vec(),
            group,
            value,
            version: 0,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_index(&self, index: usize) -> &Param {
        &self.params[index]
    }

    pub fn by_index_mut(&mut self, index: usize) -> &mut Param {
        &mut self.params[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            data: self.params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }
}

/// Gradient buffers laid out like the [`ParamStore`] that created them.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    data: Vec<Vec<f64>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.data[id.0]
    }

    pub fn by_index(&self, index: usize) -> &[f64] {
        &self.data[index]
    }

    pub fn by_index_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.data[index]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn clear(&mut self) {
        for g in &mut self.data {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.data {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }
}
