use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensorcore::{BatchNormState, Graph, Mode, ParamStore, Scalar, Tensor, TensorError, Var};

use super::{ModelError, BN_EPS};

/// Which speaker conditions a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum SpeakerRef<'s> {
    /// A row of `speaker_table`.
    Row(usize),
    /// A named `[d_spk]` parameter, e.g. an adapted `speaker_vec`.
    Param(&'s str),
    /// A fixed external vector, e.g. a zero-shot speaker embedding.
    Vector(&'s [f32]),
}

/// Batch statistics observed by one train-mode batch-norm evaluation. The
/// trainer folds them into the running statistics after the step.
#[derive(Clone, Debug, PartialEq)]
pub struct BnUpdate {
    /// Prefix such as `decoder.blocks.0.conv.bn`.
    pub prefix: String,
    pub batch_mean: Vec<f32>,
    pub batch_var: Vec<f32>,
}

impl BnUpdate {
    /// `running <- (1 - momentum) * running + momentum * batch`.
    pub fn apply(&self, store: &mut ParamStore, momentum: f64) -> Result<(), TensorError> {
        for (field, stat) in [("running_mean", &self.batch_mean), ("running_var", &self.batch_var)] {
            let t = store.tensor_mut(&format!("{}.{field}", self.prefix))?;
            for (r, &b) in t.data_mut().iter_mut().zip(stat) {
                *r = ((1.0 - momentum) * *r as f64 + momentum * b as f64) as f32;
            }
        }
        Ok(())
    }
}

/// One forward pass: a fresh graph plus parameter lookup over a stack of
/// stores (earlier stores win), explicit bindings and train/infer state.
pub struct Forward<'a, T: Scalar = f32> {
    pub g: Graph<T>,
    stores: Vec<&'a ParamStore>,
    vars: HashMap<String, Var>,
    bound: HashMap<String, Var>,
    pub mode: Mode,
    /// Keep batch-norm running statistics fixed even in train mode.
    pub freeze_bn: bool,
    /// Dropout rate applied inside residual adapters.
    pub adapter_dropout: f64,
    /// Create gradient-carrying leaves for trainable parameters.
    pub want_grads: bool,
    pub rng: ChaCha8Rng,
    pub bn_updates: Vec<BnUpdate>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(stores: Vec<&'a ParamStore>, mode: Mode) -> Self {
        Self {
            g: Graph::new(),
            stores,
            vars: HashMap::new(),
            bound: HashMap::new(),
            mode,
            freeze_bn: false,
            adapter_dropout: 0.0,
            want_grads: mode == Mode::Train,
            rng: ChaCha8Rng::seed_from_u64(0),
            bn_updates: Vec::new(),
        }
    }

    pub fn infer(stores: Vec<&'a ParamStore>) -> Self {
        Self::new(stores, Mode::Infer)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    /// Routes lookups of `name` to an existing graph node instead of a store.
    pub fn bind(&mut self, name: impl Into<String>, var: Var) {
        self.bound.insert(name.into(), var);
    }

    pub fn has(&self, name: &str) -> bool {
        self.bound.contains_key(name) || self.stores.iter().any(|s| s.contains(name))
    }

    fn lookup(&self, name: &str) -> Option<(&'a ParamStore, bool)> {
        self.stores
            .iter()
            .find(|s| s.contains(name))
            .map(|s| (*s, s.is_trainable(name)))
    }

    /// Graph node for parameter `name`, created on first use.
    pub fn param(&mut self, name: &str) -> Result<Var, ModelError> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let (store, trainable) = self
            .lookup(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let t = store.tensor(name)?.cast::<T>();
        let v = self.g.leaf(t.with_requires_grad(trainable && self.want_grads));
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: &[f64]) -> Result<Var, ModelError> {
        Ok(self.g.constant(Tensor::from_f64_slice(shape, data)?))
    }

    fn raw(&self, name: &str) -> Result<Vec<T>, ModelError> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(self.g.data(v).to_vec());
        }
        let (store, _) = self
            .lookup(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        Ok(store.tensor(name)?.data().iter().map(|&v| T::from_f32(v)).collect())
    }

    /// Batch norm over the frames of `x` with parameters under `prefix`.
    pub fn batch_norm(&mut self, prefix: &str, x: Var) -> Result<Var, ModelError> {
        let gain = self.param(&format!("{prefix}.gain"))?;
        let bias = self.param(&format!("{prefix}.bias"))?;
        // Unit momentum makes the local state hold the raw batch statistics.
        let mut state = BatchNormState {
            running_mean: self.raw(&format!("{prefix}.running_mean"))?,
            running_var: self.raw(&format!("{prefix}.running_var"))?,
            momentum: T::one(),
            frozen_stats: self.freeze_bn,
        };
        let y = self.g.batch_norm_1d(x, gain, bias, &mut state, self.mode, BN_EPS)?;
        if self.mode == Mode::Train && !self.freeze_bn {
            self.bn_updates.push(BnUpdate {
                prefix: prefix.to_string(),
                batch_mean: state.running_mean.iter().map(|v| v.as_f32()).collect(),
                batch_var: state.running_var.iter().map(|v| v.as_f32()).collect(),
            });
        }
        Ok(y)
    }

    /// Batch norm whose statistics pool the rows of every input; each output
    /// keeps its input's row count.
    pub fn batch_norm_rows(&mut self, prefix: &str, xs: &[Var]) -> Result<Vec<Var>, ModelError> {
        if let [x] = xs {
            return Ok(vec![self.batch_norm(prefix, *x)?]);
        }
        let cols: Vec<Var> = xs.iter().map(|&x| self.g.transpose(x)).collect::<Result<_, _>>()?;
        let joined = self.g.concat_last(&cols)?;
        let joined = self.g.transpose(joined)?;
        let y = self.batch_norm(prefix, joined)?;
        let yt = self.g.transpose(y)?;
        let mut out = Vec::with_capacity(xs.len());
        let mut start = 0;
        for &x in xs {
            let rows = self.g.shape(x)[0];
            let part = self.g.slice_last(yt, start, start + rows)?;
            out.push(self.g.transpose(part)?);
            start += rows;
        }
        Ok(out)
    }

    /// Gradients of every store parameter touched by this pass that required
    /// one, keyed by name. Call after `g.backward`.
    pub fn grads(&self) -> BTreeMap<String, Vec<f32>> {
        self.vars
            .iter()
            .filter_map(|(name, &v)| {
                self.g
                    .grad(v)
                    .map(|gr| (name.clone(), gr.iter().map(|x| x.as_f32()).collect()))
            })
            .collect()
    }

    /// Names of store parameters read by this pass.
    pub fn touched(&self) -> Vec<String> {
        let mut v: Vec<String> = self.vars.keys().cloned().collect();
        v.sort();
        v
    }
}
