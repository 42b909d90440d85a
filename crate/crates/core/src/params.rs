//! Named parameter storage, seeded initialization and the per-forward
//! context that binds stored tensors into an autograd graph.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use mdsam_autograd::{BatchStats, Gradients, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Optimizer treatment of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Never updated.
    Frozen,
    /// Imported weights that are fine-tuned at the low learning rate.
    Pretrained,
    /// Freshly initialized modules trained at the high learning rate.
    New,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Frozen, ParamGroup::Pretrained, ParamGroup::New];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Frozen => "frozen",
            ParamGroup::Pretrained => "pretrained",
            ParamGroup::New => "new",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub group: ParamGroup,
}

/// All learnable parameters and non-learnable buffers of a model, keyed by
/// dotted path. Iteration order is the sorted key order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) {
        let name = name.into();
        let prev = self.params.insert(name.clone(), Param { value, group });
        assert!(prev.is_none(), "parameter {name} registered twice");
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        let prev = self.buffers.insert(name.clone(), value);
        assert!(prev.is_none(), "buffer {name} registered twice");
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing buffer `{name}`")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.buffers.get_mut(name)
    }

    /// Replaces a parameter value, keeping its group. Shapes must agree.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
        if p.value.shape() != value.shape() {
            return Err(shape_err(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        let b = self
            .buffers
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing buffer `{name}`")))?;
        if b.shape() != value.shape() {
            return Err(shape_err(format!(
                "buffer `{name}` has shape {:?}, got {:?}",
                b.shape(),
                value.shape()
            )));
        }
        *b = value;
        Ok(())
    }

    pub fn set_group(&mut self, name: &str, group: ParamGroup) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
        p.group = group;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of scalar parameters, optionally restricted to one group.
    pub fn count(&self, group: Option<ParamGroup>) -> usize {
        self.params
            .values()
            .filter(|p| group.is_none_or(|g| p.group == g))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Number of scalar parameters whose name matches `pred`.
    pub fn count_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| pred(n))
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    /// Moves every parameter of `other` into `self`.
    pub fn extend(&mut self, other: ParamStore) {
        for (n, p) in other.params {
            self.insert(n, p.value, p.group);
        }
        for (n, b) in other.buffers {
            self.insert_buffer(n, b);
        }
    }
}

/// Seeded initializer that registers parameters into a [`ParamStore`].
///
/// Weights of linear and convolutional layers use the fan-in uniform
/// scheme `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weight and bias alike.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    pub group: ParamGroup,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64, group: ParamGroup) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            group,
        }
    }

    /// Continues with a different group but the same random stream.
    pub fn with_group(&mut self, group: ParamGroup) -> &mut Self {
        self.group = group;
        self
    }

    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.rng.random_range(-bound..bound))
    }

    pub fn tensor(&mut self, name: &str, value: Tensor) {
        self.store.insert(name, value, self.group);
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.tensor(name, Tensor::zeros(shape));
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) {
        let dist = Normal::new(0.0, std).expect("valid std");
        let t = Tensor::from_fn(shape, |_| dist.sample(&mut self.rng));
        self.tensor(name, t);
    }

    /// Normal samples registered as a buffer (not a parameter).
    pub fn normal_buffer(&mut self, name: &str, shape: &[usize], std: f64) {
        let dist = Normal::new(0.0, std).expect("valid std");
        let t = Tensor::from_fn(shape, |_| dist.sample(&mut self.rng));
        self.store.insert_buffer(name, t);
    }

    /// `{prefix}.weight` of shape `[out, in]` and optionally `{prefix}.bias`.
    pub fn linear(&mut self, prefix: &str, fan_in: usize, out: usize, bias: bool) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = self.uniform(&[out, fan_in], bound);
        self.tensor(&format!("{prefix}.weight"), w);
        if bias {
            let b = self.uniform(&[out], bound);
            self.tensor(&format!("{prefix}.bias"), b);
        }
    }

    /// Same as [`Init::linear`] but with an all-zero weight and bias.
    pub fn linear_zero(&mut self, prefix: &str, fan_in: usize, out: usize) {
        self.zeros(&format!("{prefix}.weight"), &[out, fan_in]);
        self.zeros(&format!("{prefix}.bias"), &[out]);
    }

    /// Convolution weight `[co, ci / groups, k, k]`.
    pub fn conv(&mut self, prefix: &str, ci: usize, co: usize, k: usize, groups: usize, bias: bool) {
        let fan_in = ci / groups * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = self.uniform(&[co, ci / groups, k, k], bound);
        self.tensor(&format!("{prefix}.weight"), w);
        if bias {
            let b = self.uniform(&[co], bound);
            self.tensor(&format!("{prefix}.bias"), b);
        }
    }

    /// Transposed-convolution weight `[ci, co, k, k]` with bias.
    pub fn conv_transpose(&mut self, prefix: &str, ci: usize, co: usize, k: usize) {
        let bound = 1.0 / ((co * k * k) as f64).sqrt();
        let w = self.uniform(&[ci, co, k, k], bound);
        self.tensor(&format!("{prefix}.weight"), w);
        let b = self.uniform(&[co], bound);
        self.tensor(&format!("{prefix}.bias"), b);
    }

    /// Affine normalization parameters (ones / zeros).
    pub fn norm(&mut self, prefix: &str, c: usize) {
        self.tensor(&format!("{prefix}.weight"), Tensor::ones(&[c]));
        self.tensor(&format!("{prefix}.bias"), Tensor::zeros(&[c]));
    }

    /// Batch norm affine parameters plus running-statistics buffers.
    pub fn batch_norm(&mut self, prefix: &str, c: usize) {
        self.norm(prefix, c);
        self.store.insert_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[c]));
        self.store.insert_buffer(format!("{prefix}.running_var"), Tensor::ones(&[c]));
    }
}

/// Which stored parameters become differentiable leaves during a forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    /// Everything enters the graph as a constant.
    None,
    /// Every parameter outside [`ParamGroup::Frozen`] is a leaf.
    Trainable,
}

/// Per-forward binding of a [`ParamStore`] into a [`Graph`].
///
/// Each parameter is materialized at most once per forward; training-mode
/// batch norm statistics are collected for the caller to fold into the
/// running estimates.
pub struct Fwd<'g, 's> {
    graph: &'g Graph,
    store: &'s ParamStore,
    train: bool,
    scope: GradScope,
    bound: BTreeMap<String, Var<'g>>,
    cache: RefCell<BTreeMap<String, Var<'g>>>,
    bn_stats: RefCell<Vec<(String, BatchStats)>>,
}

impl<'g, 's> Fwd<'g, 's> {
    pub fn new(graph: &'g Graph, store: &'s ParamStore, train: bool, scope: GradScope) -> Self {
        Self {
            graph,
            store,
            train,
            scope,
            bound: BTreeMap::new(),
            cache: RefCell::new(BTreeMap::new()),
            bn_stats: RefCell::new(Vec::new()),
        }
    }

    /// Inference context: eval mode, no parameter gradients.
    pub fn eval(graph: &'g Graph, store: &'s ParamStore) -> Self {
        Self::new(graph, store, false, GradScope::None)
    }

    /// Overrides one parameter with a caller-provided variable, e.g. a leaf
    /// under gradient check.
    pub fn bind(mut self, name: &str, var: Var<'g>) -> Self {
        self.bound.insert(name.to_string(), var);
        self
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn param(&self, name: &str) -> Result<Var<'g>> {
        if let Some(v) = self.bound.get(name) {
            return Ok(v.clone());
        }
        if let Some(v) = self.cache.borrow().get(name) {
            return Ok(v.clone());
        }
        let p = self
            .store
            .param(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
        let value = Rc::new(p.value.clone());
        let trainable = self.scope == GradScope::Trainable && p.group != ParamGroup::Frozen;
        let var = if trainable {
            self.graph.leaf_rc(value)
        } else {
            self.graph.constant_rc(value)
        };
        self.cache.borrow_mut().insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn buffer(&self, name: &str) -> Result<&'s Tensor> {
        self.store.buffer(name)
    }

    pub(crate) fn push_bn_stats(&self, prefix: &str, stats: BatchStats) {
        self.bn_stats.borrow_mut().push((prefix.to_string(), stats));
    }

    /// Batch statistics gathered by training-mode batch norms, keyed by
    /// layer prefix, in execution order.
    pub fn take_bn_stats(&self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut *self.bn_stats.borrow_mut())
    }

    /// Gradients of every differentiable parameter touched in this forward.
    pub fn param_grads(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        let cache = self.cache.borrow();
        cache
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(n, v)| (n.clone(), grads.take(v).unwrap_or_else(|| Tensor::zeros(v.shape()))))
            .collect()
    }
}

/// Folds batch statistics into running estimates:
/// `running = (1 - momentum) * running + momentum * batch`.
pub fn apply_bn_stats(store: &mut ParamStore, stats: &[(String, BatchStats)], momentum: f64) -> Result<()> {
    for (prefix, s) in stats {
        for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var_unbiased)] {
            let name = format!("{prefix}.{suffix}");
            let buf = store
                .buffer_mut(&name)
                .ok_or_else(|| Error::Config(format!("missing buffer `{name}`")))?;
            for (r, b) in buf.data_mut().iter_mut().zip(batch.data()) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }
    Ok(())
}
