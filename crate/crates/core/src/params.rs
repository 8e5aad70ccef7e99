//! Named parameter storage, initialization, and binding of parameters onto a
//! tape for one forward pass.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// What a parameter is, which decides whether weight decay applies to it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    Embedding,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::Norm => "norm",
            ParamKind::Embedding => "embedding",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "weight" => ParamKind::Weight,
            "bias" => ParamKind::Bias,
            "norm" => ParamKind::Norm,
            "embedding" => ParamKind::Embedding,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Real> {
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// Ordered, uniquely named trainable parameters plus non-trainable buffers
/// (batch-norm running statistics).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    params: IndexMap<String, Param<T>>,
    buffers: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { params: IndexMap::new(), buffers: IndexMap::new() }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let (idx, _) = self.params.insert_full(name, Param { value, kind });
        Ok(ParamId(idx))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<BufferId> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate buffer name {name}")));
        }
        let (idx, _) = self.buffers.insert_full(name, value);
        Ok(BufferId(idx))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params.get_index(id.0).expect("valid id").0
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffer_by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.buffers.get_mut(name)
    }

    pub fn param_by_name_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    /// Same names and values in another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), Param { value: p.value.cast(), kind: p.kind }))
                .collect(),
            buffers: self.buffers.iter().map(|(k, b)| (k.clone(), b.cast())).collect(),
        }
    }
}

/// Seeded source of initial parameter values.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn normal<T: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("positive std");
        Tensor::from_fn(shape.to_vec(), |_| T::lit(dist.sample(&mut self.rng)))
    }

    /// He-normal with the given fan-in.
    pub fn he<T: Real>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        self.normal(shape, (2.0 / fan_in as f64).sqrt())
    }
}

/// Whether batch-norm layers use batch statistics (and later update their
/// running statistics) or the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: a tape plus the lazily bound parameter leaves.
pub struct Graph<'s, T: Real = f32> {
    pub tape: Tape<T>,
    store: &'s ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    bn_nodes: Vec<(BufferId, BufferId, Var)>,
    track_grads: bool,
}

impl<'s, T: Real> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            bn_nodes: Vec::new(),
            track_grads: true,
        }
    }

    /// A graph whose parameters are constants; for inference only.
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        let mut g = Self::new(store, Mode::Eval);
        g.track_grads = false;
        g
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.value(id).clone(), self.track_grads);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.tape.constant(value)
    }

    pub(crate) fn record_bn(&mut self, mean: BufferId, var: BufferId, node: Var) {
        self.bn_nodes.push((mean, var, node));
    }

    /// Gradients per parameter, in store order. Parameters that did not take
    /// part in the pass get `None`.
    pub fn grads(&self) -> Vec<Option<&[T]>> {
        self.bound.iter().map(|b| b.and_then(|v| self.tape.grad(v))).collect()
    }

    /// Batch statistics of every train-mode batch-norm layer, to be folded into
    /// running statistics with [`apply_bn_updates`].
    pub fn bn_updates(&self) -> Vec<BnUpdate<T>> {
        self.bn_nodes
            .iter()
            .filter_map(|&(mean_id, var_id, node)| {
                let (mean, var) = self.tape.batch_norm_stats(node)?;
                let count = self.tape.value(node).rows();
                Some(BnUpdate { mean_id, var_id, mean: mean.to_vec(), var: var.to_vec(), count })
            })
            .collect()
    }
}

pub struct BnUpdate<T> {
    mean_id: BufferId,
    var_id: BufferId,
    mean: Vec<T>,
    var: Vec<T>,
    count: usize,
}

/// Exponential moving average of batch statistics; the stored variance is the
/// unbiased estimate.
pub fn apply_bn_updates<T: Real>(store: &mut ParamStore<T>, updates: &[BnUpdate<T>], momentum: T) {
    for u in updates {
        let n = T::from_usize(u.count).unwrap();
        let unbias = if u.count > 1 { n / (n - T::one()) } else { T::one() };
        for (r, &m) in store.buffer_mut(u.mean_id).data_mut().iter_mut().zip(&u.mean) {
            *r = (T::one() - momentum) * *r + momentum * m;
        }
        for (r, &v) in store.buffer_mut(u.var_id).data_mut().iter_mut().zip(&u.var) {
            *r = (T::one() - momentum) * *r + momentum * v * unbias;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::zeros([2]), ParamKind::Weight).unwrap();
        assert!(s.add("a", Tensor::zeros([2]), ParamKind::Bias).is_err());
        assert!(s.add_buffer("a", Tensor::zeros([2])).is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a: Tensor<f32> = Init::new(3).normal(&[16], 0.02);
        let b: Tensor<f32> = Init::new(3).normal(&[16], 0.02);
        let c: Tensor<f32> = Init::new(4).normal(&[16], 0.02);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut s = ParamStore::<f64>::new();
        let m = s.add_buffer("m", Tensor::zeros([1])).unwrap();
        let v = s.add_buffer("v", Tensor::ones([1])).unwrap();
        let u = BnUpdate { mean_id: m, var_id: v, mean: vec![2.0], var: vec![3.0], count: 4 };
        apply_bn_updates(&mut s, &[u], 0.1);
        assert!((s.buffer(m).data()[0] - 0.2).abs() < 1e-12);
        assert!((s.buffer(v).data()[0] - (0.9 + 0.1 * 4.0)).abs() < 1e-12);
    }
}
