//! Named trainable parameters, tape binding, init schemes, and checkpoints.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::iofmt;
use crate::tensor::{Tape, Tensor, VarId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub(crate) fn from_index(i: usize) -> Self {
        ParamId(i)
    }
}

pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Owns all model parameters. Layers hold `ParamId` handles.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name:?}"
        );
        self.by_name.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    /// Kaiming-style fan-in init for linear/conv weights.
    pub fn add_kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let std = (2.0 / fan_in as f32).sqrt();
        let dist = Normal::new(0.0f32, std).unwrap();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data))
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let n: usize = shape.iter().product();
        self.add(name, Tensor::new(shape.to_vec(), vec![1.0; n]))
    }

    /// normal(0, 0.02), used for class token and positional embeddings.
    pub fn add_normal_002(&mut self, name: &str, shape: &[usize], rng: &mut impl Rng) -> ParamId {
        let dist = Normal::new(0.0f32, 0.02).unwrap();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    /// Creates one leaf per parameter on a fresh tape.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        Binding {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone()))
                .collect(),
        }
    }

    /// Collects per-parameter gradients after `tape.backward`. Parameters the
    /// loss does not depend on get zero gradients.
    pub fn collect_grads(&self, binding: &Binding, grads: &[Option<Tensor>]) -> Vec<Tensor> {
        self.params
            .iter()
            .zip(&binding.vars)
            .map(|(p, &v)| {
                grads[v]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), iofmt::FormatError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for p in &self.params {
            iofmt::write_entry(&mut f, Some(&p.name), p.value.shape(), p.value.data())?;
        }
        Ok(())
    }

    /// Loads values by name into the existing store. Every stored parameter
    /// must be present in the file with a matching shape.
    pub fn load(&mut self, path: &Path) -> Result<(), iofmt::FormatError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let entries = iofmt::read_entries(&mut f)?;
        let by_name: HashMap<&str, &iofmt::Entry> = entries
            .iter()
            .filter_map(|e| e.name.as_deref().map(|n| (n, e)))
            .collect();
        for p in &mut self.params {
            let entry = by_name.get(p.name.as_str()).ok_or_else(|| {
                iofmt::FormatError::Header(format!("missing parameter {:?}", p.name))
            })?;
            if entry.shape != p.value.shape() {
                return Err(iofmt::FormatError::Header(format!(
                    "shape mismatch for {:?}: checkpoint {:?} vs model {:?}",
                    p.name,
                    entry.shape,
                    p.value.shape()
                )));
            }
            p.value = Tensor::new(entry.shape.clone(), entry.data.clone());
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct Binding {
    vars: Vec<VarId>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> VarId {
        self.vars[id.0]
    }
}
