use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError};
use crate::numerics::Tensor;

/// How fresh parameters are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    /// Weights are uniform in `[-scale, scale]`.
    pub scale: f64,
    /// Draw square recurrent matrices (`U`, `U_r`, `U_z`) as random
    /// orthonormal matrices instead.
    pub orthogonal_recurrent: bool,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            scale: 0.08,
            orthogonal_recurrent: false,
        }
    }
}

/// Every trained tensor of a model plus the config that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

fn is_bias(name: &str) -> bool {
    name.rsplit('.').next().is_some_and(|leaf| leaf.starts_with('b'))
}

fn is_recurrent(name: &str) -> bool {
    name.rsplit('.').next().is_some_and(|leaf| leaf.starts_with('U')) && !name.starts_with("att.")
}

fn orthonormal(n: usize, rng: &mut impl Rng) -> Tensor {
    // modified Gram-Schmidt over the columns of a gaussian matrix
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    for i in 0..n {
        for j in 0..i {
            let (done, rest) = cols.split_at_mut(i);
            let dot: f64 = rest[0].iter().zip(&done[j]).map(|(a, b)| a * b).sum();
            for (a, b) in rest[0].iter_mut().zip(&done[j]) {
                *a -= dot * b;
            }
        }
        let norm = cols[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        cols[i].iter_mut().for_each(|v| *v /= norm);
    }
    let mut data = vec![0.0; n * n];
    for (c, col) in cols.iter().enumerate() {
        for (r, &v) in col.iter().enumerate() {
            data[r * n + c] = v;
        }
    }
    Tensor::matrix(n, n, data).expect("square")
}

impl ModelParams {
    /// Weights uniform in `[-scale, scale]` (or orthonormal), biases zero.
    pub fn init(config: ModelConfig, init: &InitConfig, rng: &mut impl Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.param_shapes() {
            let t = if is_bias(&name) {
                Tensor::zeros(&shape)
            } else if init.orthogonal_recurrent && is_recurrent(&name) && shape[0] == shape[1] {
                orthonormal(shape[0], rng)
            } else {
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-init.scale..=init.scale)).collect();
                Tensor::new(shape, data)?
            };
            tensors.insert(name, t);
        }
        Ok(Self { config, tensors })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let tensors = config
            .param_shapes()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(&s)))
            .collect();
        Ok(Self { config, tensors })
    }

    /// Assembles params from named tensors, checking that the set of names
    /// and every shape match `config` exactly.
    pub fn from_tensors(config: ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self, ModelError> {
        config.validate()?;
        let shapes = config.param_shapes();
        for (name, t) in &tensors {
            match shapes.get(name) {
                None => return Err(ModelError::UnknownTensor(name.clone())),
                Some(s) if s.as_slice() != t.shape() => {
                    return Err(ModelError::TensorShape {
                        name: name.clone(),
                        expected: s.clone(),
                        got: t.shape().to_vec(),
                    })
                }
                _ => {}
            }
        }
        if let Some(missing) = shapes.keys().find(|n| !tensors.contains_key(*n)) {
            return Err(ModelError::MissingTensor(missing.clone()));
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<(), ModelError> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| ModelError::UnknownTensor(name.into()))?;
        if slot.shape() != value.shape() {
            return Err(ModelError::TensorShape {
                name: name.into(),
                expected: slot.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_respects_scale_and_zero_biases() {
        let cfg = ModelConfig::uniform(7, 9, 5);
        let p = ModelParams::init(cfg, &InitConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for (name, t) in p.tensors() {
            if is_bias(name) {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            } else {
                assert!(t.data().iter().all(|&v| v.abs() <= 0.08), "{name}");
            }
        }
    }

    #[test]
    fn orthogonal_recurrent_matrices() {
        let cfg = ModelConfig::uniform(7, 9, 5);
        let init = InitConfig {
            orthogonal_recurrent: true,
            ..Default::default()
        };
        let p = ModelParams::init(cfg, &init, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let u = p.get("dec1.U").unwrap();
        let prod = crate::numerics::matmul(&u.transpose(), u).unwrap();
        assert!(prod.max_abs_diff(&Tensor::identity(5)) < 1e-12);
        // attention's U_a is not recurrent
        assert!(p.get("att.U_a").unwrap().data().iter().all(|v| v.abs() <= 0.08));
    }

    #[test]
    fn from_tensors_rejects_unknown_and_missing() {
        let cfg = ModelConfig::uniform(4, 4, 2);
        let p = ModelParams::zeros(cfg.clone()).unwrap();
        let mut t = p.tensors().clone();
        t.insert("bogus".into(), Tensor::zeros(&[1]));
        assert!(matches!(
            ModelParams::from_tensors(cfg.clone(), t),
            Err(ModelError::UnknownTensor(_))
        ));
        let mut t = p.tensors().clone();
        t.remove("att.v_a");
        assert!(matches!(
            ModelParams::from_tensors(cfg, t),
            Err(ModelError::MissingTensor(_))
        ));
    }
}
