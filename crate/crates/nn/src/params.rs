use serde::{Deserialize, Serialize};

use crate::{NnError, Result, Scalar, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether decoupled weight decay applies to this parameter.
    pub decay: bool,
}

/// Ordered collection of named trainable arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    /// Registers a parameter and returns its slot index.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> usize {
        self.params.push(Param {
            name: name.into(),
            value,
            decay,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn get(&self, idx: usize) -> &Param<T> {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param<T> {
        &mut self.params[idx]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    decay: p.decay,
                })
                .collect(),
        }
    }

    /// Snapshot suitable for serialization, with an opaque config header.
    pub fn to_checkpoint(&self, config: serde_json::Value) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config,
            params: self
                .params
                .iter()
                .map(|p| NamedArray {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    decay: p.decay,
                    values: p.value.data().iter().map(|v| v.as_f64()).collect(),
                })
                .collect(),
        }
    }

    /// Copies checkpoint arrays into this store. Names, order and shapes must match.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.validate()?;
        if ckpt.params.len() != self.params.len() {
            return Err(NnError::Checkpoint(format!(
                "expected {} arrays, found {}",
                self.params.len(),
                ckpt.params.len()
            )));
        }
        for (p, a) in self.params.iter_mut().zip(&ckpt.params) {
            if p.name != a.name || p.value.shape() != a.shape.as_slice() {
                return Err(NnError::Checkpoint(format!(
                    "array {} {:?} does not match parameter {} {:?}",
                    a.name,
                    a.shape,
                    p.name,
                    p.value.shape()
                )));
            }
            for (dst, &src) in p.value.data_mut().iter_mut().zip(&a.values) {
                *dst = T::from_f64(src);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(default = "yes")]
    pub decay: bool,
    pub values: Vec<f64>,
}

fn yes() -> bool {
    true
}

/// JSON checkpoint: format version, model config header, named arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: serde_json::Value,
    pub params: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(NnError::Checkpoint(format!(
                "unsupported format version {}",
                self.format_version
            )));
        }
        for a in &self.params {
            let n = a
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| NnError::Checkpoint(format!("shape overflow in {}", a.name)))?;
            if n != a.values.len() {
                return Err(NnError::Checkpoint(format!(
                    "array {} has shape {:?} but {} values",
                    a.name,
                    a.shape,
                    a.values.len()
                )));
            }
            if a.values.iter().any(|v| !v.is_finite()) {
                return Err(NnError::Checkpoint(format!("non-finite value in {}", a.name)));
            }
        }
        Ok(())
    }
}
