use super::{NnError, ParamStore, Result};
use crate::tensor::{Gradients, Graph, Tensor, Var};

/// Batchnorm statistics are updated in training mode only; inference uses
/// the running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Batch statistics captured during a training forward, applied to the
/// store after the step.
#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdate {
    pub mean_index: usize,
    pub var_index: usize,
    pub batch_mean: Vec<f64>,
    /// Unbiased estimate (n / (n - 1) times the population variance).
    pub batch_var: Vec<f64>,
}

/// Binds a [`ParamStore`] to a [`Graph`] for one forward/backward pass.
///
/// Trainable parameters become graph leaves the first time a layer asks for
/// them; buffers become constants. Nothing in the store is modified.
pub struct Session<'a> {
    pub graph: &'a mut Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    mode: Mode,
    bn_updates: Vec<BnUpdate>,
}

impl<'a> Session<'a> {
    pub fn new(graph: &'a mut Graph, store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            graph,
            store,
            bound: vec![None; store.len()],
            mode,
            bn_updates: Vec::new(),
        }
    }

    /// Session whose trainable parameters are already leaves on `graph`,
    /// e.g. perturbed copies supplied by a gradient checker.
    pub fn prebound(
        graph: &'a mut Graph,
        store: &'a ParamStore,
        mode: Mode,
        vars: &[(usize, Var)],
    ) -> Self {
        let mut s = Self::new(graph, store, mode);
        for &(idx, v) in vars {
            s.bound[idx] = Some(v);
        }
        s
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let idx = self.store.index_of(name)?;
        if let Some(v) = self.bound[idx] {
            return Ok(v);
        }
        let entry = self.store.entry(idx);
        let v = self.graph.leaf(entry.tensor.clone(), entry.trainable);
        self.bound[idx] = Some(v);
        Ok(v)
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.store.get(name)
    }

    pub fn record_bn(
        &mut self,
        mean_name: &str,
        var_name: &str,
        mean: Vec<f64>,
        var: Vec<f64>,
    ) -> Result<()> {
        self.bn_updates.push(BnUpdate {
            mean_index: self.store.index_of(mean_name)?,
            var_index: self.store.index_of(var_name)?,
            batch_mean: mean,
            batch_var: var,
        });
        Ok(())
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Graph variables of the trainable parameters touched so far.
    pub fn bound_trainable(&self) -> Vec<(usize, Var)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.filter(|_| self.store.entry(i).trainable).map(|v| (i, v)))
            .collect()
    }

    /// Pull the gradient of every bound trainable parameter out of `grads`.
    pub fn collect_gradients(&self, grads: &mut Gradients) -> Result<Vec<(usize, Tensor)>> {
        self.bound_trainable()
            .into_iter()
            .map(|(i, v)| {
                grads
                    .take(v)
                    .map(|g| (i, g))
                    .ok_or_else(|| NnError::MissingGradient(self.store.entry(i).name.clone()))
            })
            .collect()
    }
}

impl ParamStore {
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate], momentum: f64) {
        for u in updates {
            for (r, b) in self
                .tensor_mut(u.mean_index)
                .data_mut()
                .iter_mut()
                .zip(&u.batch_mean)
            {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
            for (r, b) in self
                .tensor_mut(u.var_index)
                .data_mut()
                .iter_mut()
                .zip(&u.batch_var)
            {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }
}
