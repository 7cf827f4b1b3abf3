//! Named parameter storage and the per-forward [`Session`] that binds it to a graph.

use rand::Rng as _;

use crate::autodiff::{BatchStats, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub value: Tensor,
    /// False for normalization running statistics.
    pub trainable: bool,
}

/// All tensors of a model in build order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| self.entries[id.0].trainable)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len() as u64)
            .sum()
    }

    fn push(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        self.entries.push(Entry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Exponential moving average of batch-norm statistics collected during a step.
    ///
    /// Observations of the same layer within one step are averaged first.
    pub fn update_running_stats(&mut self, observed: &[BnObservation], momentum: f64) {
        let mut groups: Vec<(ParamId, ParamId, Vec<&BatchStats>)> = Vec::new();
        for o in observed {
            match groups.iter_mut().find(|g| g.0 == o.mean) {
                Some(g) => g.2.push(&o.stats),
                None => groups.push((o.mean, o.var, vec![&o.stats])),
            }
        }
        for (mean_id, var_id, stats) in groups {
            let n = stats.len() as f64;
            let c = self.get(mean_id).len();
            for ch in 0..c {
                let m = stats.iter().map(|s| s.mean[ch]).sum::<f64>() / n;
                let v = stats.iter().map(|s| s.var[ch]).sum::<f64>() / n;
                let rm = &mut self.get_mut(mean_id).data_mut()[ch];
                *rm = (1.0 - momentum) * *rm + momentum * m;
                let rv = &mut self.get_mut(var_id).data_mut()[ch];
                *rv = (1.0 - momentum) * *rv + momentum * v;
            }
        }
    }

    /// Replaces every value, checking names and shapes against `other`'s layout.
    pub fn load_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::contract(
                "load_values",
                format!(
                    "expected {} tensors, got {}",
                    self.entries.len(),
                    values.len()
                ),
            ));
        }
        for (e, v) in self.entries.iter_mut().zip(values) {
            if e.value.shape() != v.shape() {
                return Err(Error::Shape {
                    op: "load_values",
                    lhs: e.value.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            e.value = v;
        }
        Ok(())
    }
}

/// Deterministic initializer that appends tensors to a [`ParamStore`].
///
/// Weights and biases draw from `uniform(−s, s)` with `s = 1/sqrt(fan_in)`
/// of the owning layer; norm scales start at 1 and shifts at 0.
pub struct ParamBuilder {
    store: ParamStore,
    rng: Rng,
    prefix: Vec<String>,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::default(),
            rng: rng::stream(seed, 0x1417),
            prefix: Vec::new(),
        }
    }

    pub fn scope<T>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> T) -> T {
        self.prefix.push(name.into());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let s = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-s..s)).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("parameter shape");
        let name = self.full_name(name);
        self.store.push(name, t, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let name = self.full_name(name);
        self.store
            .push(name, Tensor::full(shape.to_vec(), value), true)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let name = self.full_name(name);
        self.store
            .push(name, Tensor::full(shape.to_vec(), value), false)
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; gradients recorded.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnObservation {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats,
}

/// One forward pass: a graph plus the lazily bound parameters it reads.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    mode: Mode,
    observed: Vec<BnObservation>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode, graph: Graph) -> Self {
        Self {
            graph,
            store,
            bound: vec![None; store.len()],
            mode,
            observed: Vec::new(),
        }
    }

    pub fn train(store: &'a ParamStore) -> Self {
        Self::new(store, Mode::Train, Graph::new())
    }

    /// Evaluation without gradient bookkeeping.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self::new(store, Mode::Eval, Graph::inference())
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let e = &self.store.entries[id.0];
        let v = if e.trainable {
            self.graph.param(e.value.clone())
        } else {
            self.graph.constant(e.value.clone())
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn buffer(&self, id: ParamId) -> &'a Tensor {
        &self.store.entries[id.0].value
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    pub fn observe(&mut self, mean: ParamId, var: ParamId, stats: BatchStats) {
        self.observed.push(BnObservation { mean, var, stats });
    }

    pub fn observations(&self) -> &[BnObservation] {
        &self.observed
    }

    /// Gradient for every trainable parameter; zeros for those never read.
    pub fn gradients(&self) -> Vec<(ParamId, Tensor)> {
        self.store
            .trainable_ids()
            .map(|id| {
                let g = self
                    .bound(id)
                    .and_then(|v| self.graph.grad(v))
                    .unwrap_or_else(|| Tensor::zeros(self.store.get(id).shape().to_vec()));
                (id, g)
            })
            .collect()
    }
}
