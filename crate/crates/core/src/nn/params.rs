use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng64;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
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

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Replaces every tensor by name; shapes and the name set must match.
    pub fn load<'a>(&mut self, named: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        let mut seen = vec![false; self.len()];
        for (name, tensor) in named {
            let id = self
                .find(name)
                .ok_or_else(|| Error::ConfigMismatch(format!("unexpected parameter `{name}`")))?;
            if self.tensors[id.0].dims() != tensor.dims() {
                return Err(Error::shape(format!(
                    "parameter `{name}` is {:?}, checkpoint has {:?}",
                    self.tensors[id.0].dims(),
                    tensor.dims()
                )));
            }
            self.tensors[id.0] = tensor.clone();
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::ConfigMismatch(format!(
                "missing parameter `{}`",
                self.names[missing]
            )));
        }
        Ok(())
    }

    /// Places every parameter on `g` as a gradient-receiving leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.input(t.clone())).collect(),
        }
    }

    /// Places every parameter on `g` as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }
}

/// Parameters placed on one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps vars given in store order, e.g. grad-check inputs.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Parameter gradients in store order; unreached parameters get zeros.
    pub fn collect(&self, grads: &mut Gradients, store: &ParamStore) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(&store.tensors)
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros_like(t)))
            .collect()
    }
}

/// Parameter factory used while building a model.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: Rng64,
    pub std: f64,
}

impl Init<'_> {
    pub fn weight(&mut self, name: &str, dims: &[usize]) -> ParamId {
        let n: usize = dims.iter().product();
        let std = self.std;
        let data = (0..n).map(|_| self.rng.truncated_normal(std)).collect();
        let t = Tensor::new(dims.to_vec(), data).expect("valid parameter dims");
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, dims: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(dims.to_vec()).expect("valid parameter dims"))
    }

    pub fn ones(&mut self, name: &str, dims: &[usize]) -> ParamId {
        self.store.add(name, Tensor::ones(dims.to_vec()).expect("valid parameter dims"))
    }
}
