//! Parameters, forward contexts and the two stateful layers everything else
//! is built from.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BatchMoments, BnStats, Graph, Gradients, Var};
use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Persistent state that is not optimized (batch-norm running moments).
    Buffer,
}

/// Named tensors in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    kinds: Vec<ParamKind>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        self.kinds.push(kind);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.names.len()).map(ParamId)
    }

    /// Parameters the optimizer updates, in registration order.
    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.kind(id) == ParamKind::Trainable)
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.trainable().map(|id| self.get(id).len()).sum()
    }

    /// Folds batch moments into running averages:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            for (id, batch) in [(u.mean, &u.moments.mean), (u.var, &u.moments.var_unbiased)] {
                for (r, b) in self.values[id.0].data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - u.momentum) * *r + u.momentum * b;
                }
            }
        }
    }
}

/// Scoped parameter registration with a shared initializer RNG.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Builder { store, rng, prefix: String::new() }
    }

    /// A builder whose names are prefixed with `name.`.
    pub fn sub(&mut self, name: &str) -> Builder<'_> {
        let prefix =
            if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Builder { store: self.store, rng: self.rng, prefix }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn tensor(&mut self, name: &str, value: Tensor, kind: ParamKind) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.add(full, value, kind)
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn fan_in_uniform(&mut self, name: &str, shape: Shape, fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-bound..bound));
        self.tensor(name, t, ParamKind::Trainable)
    }
}

/// Whether a forward pass trains (batch statistics) or infers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pending running-statistics update produced by a training forward pass.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub moments: BatchMoments,
    pub momentum: f64,
}

/// One forward pass: a fresh graph plus lazily bound parameters.
pub struct Ctx<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    mode: Mode,
    bn_updates: Vec<BnUpdate>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Ctx { g: Graph::new(), store, bound: vec![None; store.len()], mode, bn_updates: Vec::new() }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// The graph leaf for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.g.leaf(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.g.leaf(t)
    }

    /// Parameters that took part in this pass.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().enumerate().filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }

    /// Trainable-parameter gradients keyed by id; parameters without a path to
    /// the differentiated scalar are omitted.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<(ParamId, Tensor)> {
        let ids: Vec<(ParamId, Var)> = self.bound_params().collect();
        ids.into_iter()
            .filter(|(id, _)| self.store.kind(*id) == ParamKind::Trainable)
            .filter_map(|(id, v)| grads.take(v).map(|g| (id, g)))
            .collect()
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }
}

/// 2-D convolution layer with fan-in uniform kernels and zero bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv2d {
    pub fn new(
        b: &mut Builder<'_>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        spec: ConvSpec,
    ) -> Result<Self> {
        let mut b = b.sub(name);
        let weight = b.fan_in_uniform("weight", Shape::new(kernel, kernel, c_in, c_out), kernel * kernel * c_in)?;
        let bias = b.tensor("bias", Tensor::zeros(Shape::new(1, 1, 1, c_out)), ParamKind::Trainable)?;
        Ok(Conv2d { weight, bias: Some(bias), spec, c_in, c_out })
    }

    /// `kernel x kernel`, stride 1, dimension-preserving padding.
    pub fn same(b: &mut Builder<'_>, name: &str, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        Self::new(b, name, c_in, c_out, kernel, ConvSpec::same(kernel, 1))
    }

    pub fn dilated(b: &mut Builder<'_>, name: &str, c: usize, dilation: usize) -> Result<Self> {
        Self::new(b, name, c, c, 3, ConvSpec::same(3, dilation))
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.g.conv2d(x, w, b, self.spec)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Batch normalisation over `N, H, W` per channel.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(b: &mut Builder<'_>, name: &str, c: usize) -> Result<Self> {
        let mut b = b.sub(name);
        let ch = Shape::new(1, 1, 1, c);
        Ok(BatchNorm2d {
            gamma: b.tensor("gamma", Tensor::full(ch, 1.0), ParamKind::Trainable)?,
            beta: b.tensor("beta", Tensor::zeros(ch), ParamKind::Trainable)?,
            running_mean: b.tensor("running_mean", Tensor::zeros(ch), ParamKind::Buffer)?,
            running_var: b.tensor("running_var", Tensor::full(ch, 1.0), ParamKind::Buffer)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        match ctx.mode {
            Mode::Train => {
                let (y, moments) = ctx.g.batch_norm(x, gamma, beta, BnStats::Batch { eps: self.eps })?;
                if let Some(moments) = moments {
                    ctx.bn_updates.push(BnUpdate {
                        mean: self.running_mean,
                        var: self.running_var,
                        moments,
                        momentum: self.momentum,
                    });
                }
                Ok(y)
            }
            Mode::Eval => {
                let store = ctx.store;
                let stats = BnStats::Running {
                    mean: store.get(self.running_mean).data(),
                    var: store.get(self.running_var).data(),
                    eps: self.eps,
                };
                Ok(ctx.g.batch_norm(x, gamma, beta, stats)?.0)
            }
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}
