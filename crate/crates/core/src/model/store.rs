use std::collections::HashMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::audio::{Checkpoint, NamedTensor};
use crate::autodiff::{Gradients, Parameter, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered collection of uniquely named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<R: Real> {
    params: Vec<Parameter<R>>,
    by_name: HashMap<String, usize>,
}

impl<R: Real> Default for ParamStore<R> {
    fn default() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter and returns its index.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<R>) -> Result<usize> {
        let name = name.into();
        if name.is_empty() || self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate or empty parameter name {name:?}")));
        }
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter::new(name, tensor));
        Ok(self.params.len() - 1)
    }

    /// Conv weight drawn from normal(0, 0.01).
    pub fn add_weight(&mut self, name: &str, shape: &[usize], rng: &mut impl Rng) -> Result<usize> {
        self.add(name, Tensor::randn(shape, 0.01, rng))
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> Result<usize> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: &str, shape: &[usize]) -> Result<usize> {
        self.add(name, Tensor::full(shape, R::one()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<R>> {
        self.index(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<R>> {
        self.index(name).map(move |i| &mut self.params[i])
    }

    pub fn params(&self) -> &[Parameter<R>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<R>] {
        &mut self.params
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Puts every parameter on the tape, in store order.
    pub fn bind(&self, tape: &mut Tape<R>, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p, trainable)).collect()
    }

    /// Adds `scale * grad` for each bound parameter into its accumulator.
    pub fn accumulate(&mut self, grads: &Gradients<R>, vars: &[Var], scale: R) {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            if let Some(g) = grads.get(v) {
                if scale == R::one() {
                    p.tensor.accumulate_grad(g);
                } else {
                    let scaled: Vec<R> = g.iter().map(|&x| x * scale).collect();
                    p.tensor.accumulate_grad(&scaled);
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        crate::autodiff::zero_grads(&mut self.params);
    }

    /// Sets every value to zero.
    pub fn zero_values(&mut self) {
        for p in &mut self.params {
            p.tensor.values_mut().iter_mut().for_each(|v| *v = R::zero());
        }
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter::new(p.name.clone(), p.tensor.cast()))
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    pub fn to_named_tensors(&self, prefix: &str) -> Vec<NamedTensor> {
        self.params
            .iter()
            .map(|p| NamedTensor::from_tensor(format!("{prefix}{}", p.name), &p.tensor))
            .collect()
    }

    /// Overwrites values from `ckpt` entries named `prefix + name`.
    pub fn load_from(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        for p in &mut self.params {
            let nt = ckpt.require(&format!("{prefix}{}", p.name))?;
            if nt.shape != p.tensor.shape() {
                return Err(Error::Shape(format!(
                    "checkpoint tensor {} has shape {:?}, model expects {:?}",
                    nt.name,
                    nt.shape,
                    p.tensor.shape()
                )));
            }
            p.tensor.values_mut().copy_from_slice(&nt.data.to_real::<R>());
        }
        Ok(())
    }

    /// SHA-256 over names and raw value bits, as lowercase hex.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for v in p.tensor.values() {
                h.update(v.f64().to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Tensors (values only) in store order, for use as gradcheck inputs.
    pub fn tensors_f64(&self) -> Vec<Tensor<f64>> {
        self.params.iter().map(|p| p.tensor.cast::<f64>()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::<f32>::new();
        s.add_zeros("a", &[2]).unwrap();
        assert!(s.add_zeros("a", &[3]).is_err());
        assert!(s.add_zeros("", &[3]).is_err());
        assert_eq!(s.index("a"), Some(0));
    }

    #[test]
    fn checkpoint_round_trip_and_checksum() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::<f32>::new();
        s.add_weight("w", &[3, 2], &mut rng).unwrap();
        s.add_ones("g", &[3]).unwrap();
        let ckpt = Checkpoint {
            tensors: s.to_named_tensors("gen."),
            ..Checkpoint::default()
        };
        let mut t = s.clone();
        t.zero_values();
        assert_ne!(t.checksum(), s.checksum());
        t.load_from(&ckpt, "gen.").unwrap();
        assert_eq!(t.checksum(), s.checksum());
        assert!(t.load_from(&ckpt, "disc.").is_err());
    }
}
