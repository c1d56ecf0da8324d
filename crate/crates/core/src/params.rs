//! Named parameter storage and the per-forward binding context.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{DType, Tape, Tensor, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid("param", format!("duplicate parameter name {name:?}")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        self.trainable.push(trainable);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalars across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }

    /// Overwrites every tensor from `named`, which must cover exactly the same
    /// names with the same shapes.
    pub fn load_named(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.tensors.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, file has {}",
                self.tensors.len(),
                named.len()
            )));
        }
        for (name, tensor) in named {
            let i = *self
                .index
                .get(&name)
                .ok_or_else(|| Error::Format(format!("unexpected tensor {name:?}")))?;
            if tensor.shape() != self.tensors[i].shape() {
                return Err(Error::Format(format!(
                    "tensor {name:?}: shape {:?} does not match model {:?}",
                    tensor.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = tensor;
        }
        Ok(())
    }

    /// Casts every tensor to `dtype`.
    pub fn cast(&mut self, dtype: DType) {
        for t in &mut self.tensors {
            *t = t.to_dtype(dtype);
        }
    }
}

/// Parameter factory with a name prefix, used while building modules.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut dyn rand::RngCore,
    dtype: DType,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut dyn rand::RngCore, dtype: DType) -> Self {
        Init {
            store,
            rng,
            dtype,
            prefix: String::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn scope(&mut self, name: &str) -> Init<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Init {
            store: self.store,
            rng: self.rng,
            dtype: self.dtype,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn rng(&mut self) -> &mut dyn rand::RngCore {
        self.rng
    }

    pub fn tensor(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.insert(full, tensor.to_dtype(self.dtype), true)
    }

    /// A non-trainable tensor (running statistics and similar).
    pub fn buffer(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.insert(full, tensor.to_dtype(self.dtype), false)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let t = Tensor::randn(shape, std, self.dtype, &mut self.rng);
        self.tensor(name, t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], lo: f64, hi: f64) -> Result<ParamId> {
        let t = Tensor::rand_uniform(shape, lo, hi, self.dtype, &mut self.rng);
        self.tensor(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.tensor(name, Tensor::zeros(shape, self.dtype))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.tensor(name, Tensor::full(shape, value, self.dtype))
    }

    pub fn next_f64(&mut self) -> f64 {
        self.rng.random::<f64>()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Binds parameters from a store onto a tape for one forward evaluation.
pub struct Ctx<'a> {
    tape: &'a Tape,
    store: &'a ParamStore,
    mode: Mode,
    bound: RefCell<HashMap<ParamId, Var<'a>>>,
    stats: RefCell<Vec<(ParamId, Tensor)>>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParamStore, mode: Mode) -> Self {
        Ctx {
            tape,
            store,
            mode,
            bound: RefCell::new(HashMap::new()),
            stats: RefCell::new(Vec::new()),
        }
    }

    pub fn tape(&self) -> &'a Tape {
        self.tape
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// The tape leaf for `id`; created once per context.
    pub fn param(&self, id: ParamId) -> Var<'a> {
        if let Some(v) = self.bound.borrow().get(&id) {
            return *v;
        }
        let t = self.store.get(id).clone();
        let var = if self.store.is_trainable(id) {
            self.tape.leaf(t.with_requires_grad(true))
        } else {
            self.tape.constant(t)
        };
        self.bound.borrow_mut().insert(id, var);
        var
    }

    pub fn constant(&self, t: Tensor) -> Var<'a> {
        self.tape.constant(t)
    }

    /// Every parameter bound so far, in id order.
    pub fn bound_params(&self) -> Vec<(ParamId, Var<'a>)> {
        let mut v: Vec<_> = self.bound.borrow().iter().map(|(&k, &v)| (k, v)).collect();
        v.sort_by_key(|(k, _)| *k);
        v
    }

    /// Queues a replacement value for a non-trainable buffer.
    pub fn record_stat(&self, id: ParamId, value: Tensor) {
        self.stats.borrow_mut().push((id, value));
    }

    pub fn take_stats(&self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.stats.borrow_mut())
    }
}
