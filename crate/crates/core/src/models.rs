//! The five model variants: shared embeddings, parallel heads and each variant's
//! composition into entire-space targets.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{
    compose, composition_gradients, CompositeTargets, GraphError, HeadProbabilities, Task, Variant,
};
use crate::nn::{
    cross_entropy, read_checkpoint, write_checkpoint, AdamConfig, AdamState, CheckpointHeader,
    ForwardCache, Gradients, Network, NetworkShape, NnError, Objective, Real, TensorMeta,
    CHECKPOINT_VERSION,
};
use crate::synth::ImpressionRecord;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("variant {variant} does not train task {task}")]
    TaskMismatch { variant: Variant, task: Task },
    #[error("non-finite loss")]
    Diverged,
}

/// Per-task loss weights. Tasks a variant does not model are never evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub ctr: f64,
    pub dmi: f64,
    pub dma: f64,
    pub ctcvr: f64,
    /// Click-conditioned purchase loss of the `Base` CVR network.
    pub cvr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ctr: 1.0,
            dmi: 1.0,
            dma: 1.0,
            ctcvr: 1.0,
            cvr: 1.0,
        }
    }
}

impl LossWeights {
    pub fn get(&self, task: Task) -> f64 {
        match task {
            Task::Ctr => self.ctr,
            Task::Dmi => self.dmi,
            Task::Dma => self.dma,
            Task::Ctcvr => self.ctcvr,
            Task::Cvr => self.cvr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    /// One vocabulary per categorical field.
    pub vocab_sizes: Vec<usize>,
    pub embedding_dims: Vec<usize>,
    pub hidden_widths: Vec<usize>,
    #[serde(default)]
    pub loss_weights: LossWeights,
    pub seed: u64,
}

impl ModelSpec {
    /// Three fields of width 16 and heads `128 → 64 → 32 → 1`.
    pub fn standard(variant: Variant, vocab_sizes: Vec<usize>, seed: u64) -> Self {
        let embedding_dims = vec![16; vocab_sizes.len()];
        Self {
            variant,
            vocab_sizes,
            embedding_dims,
            hidden_widths: vec![128, 64, 32],
            loss_weights: LossWeights::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for task in self.variant.tasks() {
            let w = self.loss_weights.get(*task);
            if !(w >= 0.0 && w.is_finite()) {
                return Err(ModelError::Spec(format!("loss weight for {task} must be ≥ 0")));
            }
        }
        for shape in self.network_shapes() {
            shape.validate().map_err(|e| ModelError::Spec(e.to_string()))?;
        }
        Ok(())
    }

    /// `Base` has two independent single-head networks; every other variant has one
    /// network whose heads share the embeddings.
    pub fn network_shapes(&self) -> Vec<NetworkShape> {
        let shape = |heads| NetworkShape {
            vocab_sizes: self.vocab_sizes.clone(),
            embedding_dims: self.embedding_dims.clone(),
            hidden_widths: self.hidden_widths.clone(),
            heads,
        };
        match self.variant {
            Variant::Base => vec![shape(1), shape(1)],
            v => vec![shape(v.head_count())],
        }
    }

    pub fn param_count(&self) -> usize {
        self.network_shapes().iter().map(NetworkShape::param_count).sum()
    }

    /// `(network, head)` for each entry of `variant.head_slots()`.
    fn head_locations(&self) -> Vec<(usize, usize)> {
        match self.variant {
            Variant::Base => vec![(0, 0), (1, 0)],
            v => (0..v.head_count()).map(|h| (0, h)).collect(),
        }
    }
}

/// Labels for the entire-space tasks of one impression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TaskTargets {
    pub click: bool,
    pub dmi: bool,
    pub dma: bool,
    pub purchase: bool,
}

impl TaskTargets {
    pub fn get(&self, task: Task) -> bool {
        match task {
            Task::Ctr => self.click,
            Task::Dmi => self.dmi,
            Task::Dma => self.dma,
            Task::Ctcvr | Task::Cvr => self.purchase,
        }
    }
}

impl From<&ImpressionRecord> for TaskTargets {
    fn from(r: &ImpressionRecord) -> Self {
        Self {
            click: r.click,
            dmi: r.dmi,
            dma: r.dma,
            purchase: r.purchase,
        }
    }
}

/// Feature ids (`batch × fields`) with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Array2<u32>,
    pub targets: Vec<TaskTargets>,
}

impl Batch {
    pub fn from_records(records: &[ImpressionRecord]) -> Self {
        let mut features = Array2::zeros((records.len(), 3));
        for (i, r) in records.iter().enumerate() {
            for (f, id) in r.features().into_iter().enumerate() {
                features[[i, f]] = id;
            }
        }
        Self {
            features,
            targets: records.iter().map(TaskTargets::from).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Mean cross-entropy per task and their weighted sum.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown<T> {
    /// `(task, mean loss, examples contributing)`
    pub tasks: Vec<(Task, T, usize)>,
    pub total: T,
}

impl<T: Real> LossBreakdown<T> {
    pub fn task(&self, task: Task) -> Option<T> {
        self.tasks.iter().find(|t| t.0 == task).map(|t| t.1)
    }
}

struct ModelForward<T> {
    caches: Vec<ForwardCache<T>>,
    heads: Vec<HeadProbabilities<T>>,
}

/// A built variant.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    spec: ModelSpec,
    nets: Vec<Network<T>>,
    head_locations: Vec<(usize, usize)>,
}

impl<T: Real> Model<T> {
    /// Initializes every network from one seeded stream, tables first, so variants
    /// built with the same seed start from identical embeddings.
    pub fn build(spec: ModelSpec) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let nets = spec
            .network_shapes()
            .into_iter()
            .map(|s| Network::new(s, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        let head_locations = spec.head_locations();
        Ok(Self {
            spec,
            nets,
            head_locations,
        })
    }

    pub fn zeros(spec: ModelSpec) -> Result<Self, ModelError> {
        spec.validate()?;
        let nets = spec
            .network_shapes()
            .into_iter()
            .map(Network::zeros)
            .collect::<Result<Vec<_>, _>>()?;
        let head_locations = spec.head_locations();
        Ok(Self {
            spec,
            nets,
            head_locations,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn variant(&self) -> Variant {
        self.spec.variant
    }

    pub fn networks(&self) -> &[Network<T>] {
        &self.nets
    }

    pub fn networks_mut(&mut self) -> &mut [Network<T>] {
        &mut self.nets
    }

    pub fn param_count(&self) -> usize {
        self.nets.iter().map(Network::param_count).sum()
    }

    fn run(&self, features: ArrayView2<u32>) -> Result<ModelForward<T>, ModelError> {
        let caches = self
            .nets
            .iter()
            .map(|n| n.forward(features))
            .collect::<Result<Vec<_>, _>>()?;
        let slots = self.spec.variant.head_slots();
        let heads = (0..features.nrows())
            .map(|i| {
                let mut y = [T::zero(); 6];
                for (&slot, &(net, head)) in slots.iter().zip(&self.head_locations) {
                    y[slot] = caches[net].probs[[i, head]];
                }
                HeadProbabilities::new(y)
            })
            .collect();
        Ok(ModelForward { caches, heads })
    }

    /// Raw head outputs, unused slots zero.
    pub fn head_probabilities(
        &self,
        features: ArrayView2<u32>,
    ) -> Result<Vec<HeadProbabilities<T>>, ModelError> {
        Ok(self.run(features)?.heads)
    }

    pub fn predict(&self, features: ArrayView2<u32>) -> Result<Vec<CompositeTargets<T>>, ModelError> {
        let variant = self.spec.variant;
        self.run(features)?
            .heads
            .iter()
            .map(|h| compose(variant, h).map_err(ModelError::from))
            .collect()
    }

    /// Weighted multi-task loss; with `want_gradient`, also `∂loss/∂y` per head.
    fn evaluate(
        &self,
        fwd: &ModelForward<T>,
        batch: &Batch,
        want_gradient: bool,
    ) -> Result<(LossBreakdown<T>, Vec<[T; 6]>), ModelError> {
        let variant = self.spec.variant;
        let weights = &self.spec.loss_weights;
        let tasks = variant.tasks();
        let n = batch.len();
        let mut sums = vec![T::zero(); tasks.len()];
        let mut counts = vec![0usize; tasks.len()];
        let mut dy = vec![[T::zero(); 6]; if want_gradient { n } else { 0 }];

        // Denominators first so per-example gradients carry the mean's scale.
        for (k, task) in tasks.iter().enumerate() {
            counts[k] = match task {
                Task::Cvr => batch.targets.iter().filter(|t| t.click).count(),
                _ => n,
            };
        }

        for (i, h) in fwd.heads.iter().enumerate() {
            let targets = compose(variant, h)?;
            let grads = if want_gradient {
                Some(composition_gradients(h, variant)?)
            } else {
                None
            };
            let labels = batch.targets[i];
            for (k, &task) in tasks.iter().enumerate() {
                let w = weights.get(task);
                if w == 0.0 || counts[k] == 0 {
                    continue;
                }
                // The click-conditioned loss only sees clicked impressions.
                if task == Task::Cvr && !labels.click {
                    continue;
                }
                let p = targets
                    .get(task)
                    .ok_or(ModelError::TaskMismatch { variant, task })?;
                let (loss, dl_dp) = cross_entropy(p, labels.get(task))?;
                sums[k] += loss;
                if let Some(g) = &grads {
                    let dp = g.get(task).ok_or(ModelError::TaskMismatch { variant, task })?;
                    let scale = crate::nn::real::<T>(w) * dl_dp / T::from_usize(counts[k]).expect("count");
                    for (acc, d) in dy[i].iter_mut().zip(dp) {
                        *acc += scale * d;
                    }
                }
            }
        }

        let mut breakdown = Vec::with_capacity(tasks.len());
        let mut total = T::zero();
        for (k, &task) in tasks.iter().enumerate() {
            let mean = if counts[k] == 0 {
                T::zero()
            } else {
                sums[k] / T::from_usize(counts[k]).expect("count")
            };
            let w = weights.get(task);
            if w != 0.0 {
                total += crate::nn::real::<T>(w) * mean;
            }
            breakdown.push((task, mean, counts[k]));
        }
        if !total.is_finite() {
            return Err(ModelError::Diverged);
        }
        Ok((
            LossBreakdown {
                tasks: breakdown,
                total,
            },
            dy,
        ))
    }

    pub fn loss(&self, batch: &Batch) -> Result<LossBreakdown<T>, ModelError> {
        let fwd = self.run(batch.features.view())?;
        Ok(self.evaluate(&fwd, batch, false)?.0)
    }

    /// Loss and exact gradients, one [`Gradients`] per network.
    pub fn loss_and_gradients(
        &self,
        batch: &Batch,
    ) -> Result<(LossBreakdown<T>, Vec<Gradients<T>>), ModelError> {
        let fwd = self.run(batch.features.view())?;
        let (breakdown, dy) = self.evaluate(&fwd, batch, true)?;
        let slots = self.spec.variant.head_slots();
        let mut grads = Vec::with_capacity(self.nets.len());
        for (k, net) in self.nets.iter().enumerate() {
            let cache = &fwd.caches[k];
            let mut dlogits = Array2::zeros((batch.len(), net.heads.len()));
            for (&slot, &(nk, head)) in slots.iter().zip(&self.head_locations) {
                if nk != k {
                    continue;
                }
                for i in 0..batch.len() {
                    let p = cache.probs[[i, head]];
                    dlogits[[i, head]] = dy[i][slot] * p * (T::one() - p);
                }
            }
            grads.push(net.backward(cache, dlogits.view())?);
        }
        Ok((breakdown, grads))
    }

    fn region_signature(&self, batch: &Batch) -> u64 {
        self.nets
            .iter()
            .map(|n| {
                n.forward(batch.features.view())
                    .map(|c| c.region_signature())
                    .unwrap_or(0)
            })
            .fold(0u64, |acc, s| acc.rotate_left(17) ^ s)
    }

    fn tensor_prefix(&self, net: usize) -> &'static str {
        match (self.spec.variant, net) {
            (Variant::Base, 0) => "ctr.",
            (Variant::Base, _) => "cvr.",
            _ => "",
        }
    }

    /// Tensor names in declaration order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (k, net) in self.nets.iter().enumerate() {
            for i in 0..net.tensor_count() {
                names.push(format!("{}{}", self.tensor_prefix(k), net.tensor_name(i)));
            }
        }
        names
    }

    fn locate(&self, tensor: usize) -> (usize, usize) {
        let mut t = tensor;
        for (k, net) in self.nets.iter().enumerate() {
            if t < net.tensor_count() {
                return (k, t);
            }
            t -= net.tensor_count();
        }
        panic!("tensor {tensor} out of range");
    }

    pub fn write_checkpoint(&self, path: &Path, step: u64) -> Result<(), ModelError> {
        let mut metas = Vec::new();
        let mut data: Vec<&[T]> = Vec::new();
        for (k, net) in self.nets.iter().enumerate() {
            for i in 0..net.tensor_count() {
                metas.push(TensorMeta {
                    name: format!("{}{}", self.tensor_prefix(k), net.tensor_name(i)),
                    shape: net.tensor_shape(i),
                });
                data.push(net.tensor(i));
            }
        }
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            variant: self.spec.variant.name().to_string(),
            seed: self.spec.seed,
            step,
            spec: serde_json::to_value(&self.spec).map_err(|e| ModelError::Spec(e.to_string()))?,
            tensors: metas,
        };
        write_checkpoint(path, &header, &data)?;
        Ok(())
    }

    /// Loads a checkpoint; returns the model and its optimizer step.
    pub fn read_checkpoint(path: &Path) -> Result<(Self, u64), ModelError> {
        let ck = read_checkpoint(path)?;
        let spec: ModelSpec = serde_json::from_value(ck.header.spec.clone())
            .map_err(|e| ModelError::Spec(format!("checkpoint spec: {e}")))?;
        if spec.variant.name() != ck.header.variant {
            return Err(ModelError::Spec("checkpoint variant tag disagrees with spec".into()));
        }
        let mut model = Self::zeros(spec)?;
        let names = model.tensor_names();
        if names.len() != ck.header.tensors.len() {
            return Err(ModelError::Spec("checkpoint tensor count mismatch".into()));
        }
        for (t, (meta, values)) in ck.header.tensors.iter().zip(&ck.data).enumerate() {
            let (k, i) = model.locate(t);
            if meta.name != names[t] || meta.shape != model.nets[k].tensor_shape(i) {
                return Err(ModelError::Spec(format!("unexpected tensor {}", meta.name)));
            }
            for (dst, &src) in model.nets[k].tensor_mut(i).iter_mut().zip(values) {
                *dst = T::from_f32(src).expect("f32 fits");
            }
        }
        Ok((model, ck.header.step))
    }
}

/// A model with one Adam state per network.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: Model<T>,
    optimizers: Vec<AdamState<T>>,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, adam: AdamConfig) -> Self {
        let optimizers = model.nets.iter().map(|n| AdamState::new(n, adam)).collect();
        Self { model, optimizers }
    }

    pub fn step_count(&self) -> u64 {
        self.optimizers.first().map_or(0, AdamState::step)
    }

    pub fn train_step(&mut self, batch: &Batch) -> Result<LossBreakdown<T>, ModelError> {
        let (loss, grads) = match self.model.loss_and_gradients(batch) {
            Err(ModelError::Nn(NnError::NonFinite(_))) => return Err(ModelError::Diverged),
            Err(ModelError::Graph(GraphError::Domain { value, .. })) if !value.is_finite() => {
                return Err(ModelError::Diverged)
            }
            r => r?,
        };
        if !loss.total.is_finite() {
            return Err(ModelError::Diverged);
        }
        for ((net, opt), g) in self
            .model
            .nets
            .iter_mut()
            .zip(&mut self.optimizers)
            .zip(&grads)
        {
            opt.apply(net, g)?;
        }
        Ok(loss)
    }
}

/// A model bound to a fixed batch, for finite-difference checks.
pub struct ModelObjective<'a, T> {
    pub model: &'a mut Model<T>,
    pub batch: &'a Batch,
}

impl<T: Real> Objective<T> for ModelObjective<'_, T> {
    fn loss(&self) -> T {
        self.model.loss(self.batch).expect("loss").total
    }

    fn gradient(&self) -> (T, Vec<Vec<T>>) {
        let (loss, grads) = self.model.loss_and_gradients(self.batch).expect("gradient");
        let mut flat = Vec::new();
        for (net, g) in self.model.nets.iter().zip(&grads) {
            flat.extend(g.to_dense(net.shape()));
        }
        (loss.total, flat)
    }

    fn tensor_names(&self) -> Vec<String> {
        self.model.tensor_names()
    }

    fn param_mut(&mut self, tensor: usize, index: usize) -> &mut T {
        let (k, i) = self.model.locate(tensor);
        &mut self.model.nets[k].tensor_mut(i)[index]
    }

    fn region_signature(&self) -> u64 {
        self.model.region_signature(self.batch)
    }
}
