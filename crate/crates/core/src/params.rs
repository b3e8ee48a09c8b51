//! Named parameter storage shared by every tower of the model.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("parameter `{0}` is already registered")]
    DuplicateName(String),
    #[error("unknown parameter `{0}`")]
    Unknown(String),
    #[error("tensor `{name}`: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Numeric width used for stored parameters.
///
/// Arithmetic is always carried out in `f64`; in `F32` mode parameter
/// values are rounded to single precision after initialisation and after
/// every optimiser update, and checkpoints store 4-byte payloads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn width(self) -> u8 {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    pub fn from_env() -> Result<Self, String> {
        match std::env::var("TRANSREC_PRECISION") {
            Err(_) => Ok(Precision::F64),
            Ok(v) => match v.trim() {
                "f64" | "" => Ok(Precision::F64),
                "f32" => Ok(Precision::F32),
                other => Err(format!("TRANSREC_PRECISION must be f32 or f64, got `{other}`")),
            },
        }
    }

    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F32 => v as f32 as f64,
            Precision::F64 => v,
        }
    }
}

/// How a freshly registered tensor is filled.
#[derive(Clone, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal(f64),
    /// He-normal for a ReLU layer with the given fan-in.
    Kaiming { fan_in: usize },
    /// Square identity in the leading block, zeros elsewhere.
    Identity,
    Values(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub trainable: bool,
}

impl Param {
    /// The 2-D view used by the tape: vectors are single rows, higher ranks
    /// flatten everything after the leading axis.
    pub fn matrix_dims(&self) -> (usize, usize) {
        matrix_dims(&self.shape)
    }
}

pub fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[0], shape[1..].iter().product()),
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
    precision: Precision,
}

impl ParameterStore {
    pub fn new(precision: Precision) -> Self {
        Self { params: Vec::new(), index: HashMap::new(), precision }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> Result<ParamId, ParamError> {
        if self.index.contains_key(name) {
            return Err(ParamError::DuplicateName(name.to_string()));
        }
        let n: usize = shape.iter().product();
        let mut value = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::TruncNormal(std) => (0..n).map(|_| trunc_normal(rng, std)).collect(),
            Init::Kaiming { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| trunc_normal(rng, std)).collect()
            }
            Init::Identity => {
                let (rows, cols) = matrix_dims(shape);
                let mut v = vec![0.0; n];
                for i in 0..rows.min(cols) {
                    v[i * cols + i] = 1.0;
                }
                v
            }
            Init::Values(v) => {
                if v.len() != n {
                    return Err(ParamError::ShapeMismatch {
                        name: name.to_string(),
                        expected: shape.to_vec(),
                        found: vec![v.len()],
                    });
                }
                v
            }
        };
        for v in value.iter_mut() {
            *v = self.precision.round(*v);
        }
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            grad: vec![0.0; n],
            value,
            trainable: true,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<ParamId, ParamError> {
        self.id(name).ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value_tensor(&self, id: ParamId) -> Tensor {
        let p = self.get(id);
        let (r, c) = p.matrix_dims();
        Tensor::from_vec(r, c, p.value.clone())
    }

    /// Overwrites a tensor's values, refusing any shape change.
    pub fn set_value(&mut self, name: &str, shape: &[usize], values: &[f64]) -> Result<(), ParamError> {
        let id = self.require(name)?;
        let precision = self.precision;
        let p = self.get_mut(id);
        if p.shape != shape {
            return Err(ParamError::ShapeMismatch {
                name: name.to_string(),
                expected: p.shape.clone(),
                found: shape.to_vec(),
            });
        }
        for (dst, src) in p.value.iter_mut().zip(values) {
            *dst = precision.round(*src);
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Marks every tensor whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.params.iter().find(|p| p.value.iter().any(|v| !v.is_finite())).map(|p| p.name.as_str())
    }

    /// Snapshot of all values keyed by name, in registration order.
    pub fn snapshot(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.params.iter().map(|p| (p.name.clone(), p.shape.clone(), p.value.clone())).collect()
    }

    pub fn restore(&mut self, snapshot: &[(String, Vec<usize>, Vec<f64>)]) -> Result<(), ParamError> {
        for (name, shape, values) in snapshot {
            self.set_value(name, shape, values)?;
        }
        Ok(())
    }
}

fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParameterStore::new(Precision::F64);
        store.add("w", &[2, 2], Init::Zeros, &mut rng).unwrap();
        assert_eq!(
            store.add("w", &[2, 2], Init::Zeros, &mut rng),
            Err(ParamError::DuplicateName("w".into()))
        );
    }

    #[test]
    fn trunc_normal_stays_within_two_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParameterStore::new(Precision::F64);
        let id = store.add("w", &[64, 64], Init::TruncNormal(0.02), &mut rng).unwrap();
        let p = store.get(id);
        assert!(p.value.iter().all(|v| v.abs() <= 0.04));
        let mean = p.value.iter().sum::<f64>() / p.value.len() as f64;
        assert!(mean.abs() < 0.002);
    }

    #[test]
    fn set_value_refuses_shape_change() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParameterStore::new(Precision::F64);
        store.add("b", &[3], Init::Zeros, &mut rng).unwrap();
        let err = store.set_value("b", &[4], &[0.0; 4]).unwrap_err();
        assert!(matches!(err, ParamError::ShapeMismatch { .. }));
    }

    #[test]
    fn f32_precision_rounds_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParameterStore::new(Precision::F32);
        let id = store.add("x", &[1], Init::Values(vec![0.1]), &mut rng).unwrap();
        assert_eq!(store.get(id).value[0], 0.1f32 as f64);
    }
}
