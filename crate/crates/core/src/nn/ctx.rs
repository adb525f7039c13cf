use super::params::{BufferId, ParamId, ParamStore};
use crate::engine::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed by a batch-norm layer during a training forward.
pub struct StatUpdate<T> {
    pub mean: BufferId,
    pub var: BufferId,
    pub batch_mean: Vec<T>,
    /// Unbiased estimate.
    pub batch_var: Vec<T>,
}

/// Forward-pass context: the graph being recorded, the parameter store it
/// reads from, and the parameters bound to graph leaves so far.
pub struct Ctx<'a, T> {
    pub g: Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    stats: Vec<StatUpdate<T>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    /// Train mode records a tape; eval mode builds an inference graph.
    pub fn new(store: &'a ParamStore<T>, mode: Mode) -> Self {
        let g = match mode {
            Mode::Train => Graph::new(),
            Mode::Eval => Graph::inference(),
        };
        Self::with_graph(store, mode, g)
    }

    pub fn with_graph(store: &'a ParamStore<T>, mode: Mode, g: Graph<T>) -> Self {
        Self {
            g,
            store,
            bound: vec![None; store.len()],
            mode,
            stats: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    /// Uses `v` in place of the stored value of `id`.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound[id.0] = Some(v);
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = if p.trainable {
            self.g.leaf(p.value.clone())
        } else {
            self.g.constant(p.value.clone())
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        self.store.buffer_value(id)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.g.constant(t)
    }

    pub(crate) fn push_stats(&mut self, update: StatUpdate<T>) {
        self.stats.push(update);
    }

    /// Graph, parameter bindings (indexed by `ParamId`) and collected statistics.
    pub fn finish(self) -> (Graph<T>, Vec<Option<Var>>, Vec<StatUpdate<T>>) {
        (self.g, self.bound, self.stats)
    }
}
