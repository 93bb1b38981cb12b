//! Named parameter storage and the shared-MLP layer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::Rng as StdRng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// Puts every parameter on the tape as a gradient-receiving leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Puts every parameter on the tape as a constant, for inference.
    pub fn bind_constant(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    /// Overwrites values from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Mismatch(format!(
                "expected {} parameter tensors, found {}",
                self.len(),
                other.len()
            )));
        }
        for (name, t) in other.iter() {
            let i = self
                .index_of(name)
                .ok_or_else(|| Error::Mismatch(format!("unexpected parameter {name:?}")))?;
            if self.tensors[i].shape() != t.shape() {
                return Err(Error::Mismatch(format!(
                    "parameter {name:?} has shape {:?}, expected {:?}",
                    t.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = t.clone();
        }
        Ok(())
    }

    /// Rounds every value to the nearest f32.
    pub fn quantize_f32(&mut self) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Allocates named, initialized parameters while a model is assembled.
pub struct ParamBuilder<'a> {
    params: ParamSet,
    prefix: Vec<String>,
    rng: &'a mut StdRng,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(rng: &'a mut StdRng) -> Self {
        ParamBuilder {
            params: ParamSet::default(),
            prefix: Vec::new(),
            rng,
        }
    }

    pub fn scoped<T>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> T) -> T {
        self.prefix.push(name.into());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn full_name(&self, name: &str) -> String {
        let mut s = self.prefix.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(name);
        s
    }

    /// Uniform in `±sqrt(1 / fan_in)`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = (1.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("positive extents");
        let full = self.full_name(name);
        self.params.push(full, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let full = self.full_name(name);
        self.params.push(full, Tensor::full(shape, value))
    }

    pub fn finish(self) -> ParamSet {
        self.params
    }
}

/// Per-row affine map shared across points (and edges).
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, cin: usize, cout: usize, bias: bool) -> Linear {
        b.scoped(name, |b| Linear {
            weight: b.uniform("weight", &[cin, cout], cin),
            bias: bias.then(|| b.constant("bias", &[cout], 0.0)),
            in_features: cin,
            out_features: cout,
        })
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        tape.linear(x, vars[self.weight.0], self.bias.map(|b| vars[b.0]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn builder_names_are_scoped_and_init_bounded() {
        let mut rng = rng_from(0);
        let mut b = ParamBuilder::new(&mut rng);
        let l = b.scoped("block", |b| Linear::new(b, "fc1", 16, 4, true));
        let p = b.finish();
        assert_eq!(p.names(), &["block.fc1.weight", "block.fc1.bias"]);
        assert!(p.get(l.weight).data().iter().all(|v| v.abs() <= 0.25));
        assert!(p.get(l.bias.unwrap()).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn load_checks_names_and_shapes() {
        let mut a = ParamSet::default();
        a.push("w", Tensor::zeros(&[2, 2]));
        let mut b = ParamSet::default();
        b.push("w", Tensor::full(&[2, 2], 1.0));
        a.load_from(&b).unwrap();
        assert_eq!(a.tensors()[0].data(), &[1.0; 4]);
        let mut c = ParamSet::default();
        c.push("w", Tensor::zeros(&[4]));
        assert!(a.load_from(&c).is_err());
        let mut d = ParamSet::default();
        d.push("v", Tensor::zeros(&[2, 2]));
        assert!(a.load_from(&d).is_err());
    }
}
