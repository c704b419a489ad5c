use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{real, sigmoid, NnError, Real};

fn uniform<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, limit: f64, rng: &mut R) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || real(rng.random_range(-limit..=limit)))
}

/// Lookup table for one categorical field.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<T> {
    /// `vocab × dim`
    pub weights: Array2<T>,
}

impl<T: Real> EmbeddingTable<T> {
    /// Uniform in `(−r, r)` with `r = sqrt(6 / (vocab + dim))`.
    pub fn new<R: Rng + ?Sized>(vocab: usize, dim: usize, rng: &mut R) -> Self {
        let r = (6.0 / (vocab + dim) as f64).sqrt();
        Self {
            weights: uniform(vocab, dim, r, rng),
        }
    }

    pub fn zeros(vocab: usize, dim: usize) -> Self {
        Self {
            weights: Array2::zeros((vocab, dim)),
        }
    }

    pub fn vocab(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }
}

/// Fully connected layer, `y = x · W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weights: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Dense<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, limit: f64, rng: &mut R) -> Self {
        Self {
            weights: uniform(inputs, outputs, limit, rng),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weights.ncols()
    }
}

/// Rectifier hidden layers followed by a single logistic output unit.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpHead<T> {
    pub layers: Vec<Dense<T>>,
}

impl<T: Real> MlpHead<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input;
        for &w in hidden {
            // He-uniform for rectifier layers
            layers.push(Dense::new(fan_in, w, (6.0 / fan_in as f64).sqrt(), rng));
            fan_in = w;
        }
        layers.push(Dense::new(fan_in, 1, (6.0 / (fan_in + 1) as f64).sqrt(), rng));
        Self { layers }
    }

    pub fn zeros(input: usize, hidden: &[usize]) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(1);
        Self {
            layers: dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        }
    }

    /// `Σ (w_in + 1) · w_out`
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| (l.inputs() + 1) * l.outputs())
            .sum()
    }
}

/// Architecture of one network: embedding tables feeding parallel heads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub vocab_sizes: Vec<usize>,
    pub embedding_dims: Vec<usize>,
    pub hidden_widths: Vec<usize>,
    pub heads: usize,
}

impl NetworkShape {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.vocab_sizes.is_empty() || self.vocab_sizes.len() != self.embedding_dims.len() {
            return Err(NnError::Shape(
                "need one embedding dim per feature field".into(),
            ));
        }
        if self.vocab_sizes.iter().chain(&self.embedding_dims).any(|&v| v == 0) {
            return Err(NnError::Shape("vocabulary sizes and dims must be positive".into()));
        }
        if self.hidden_widths.iter().any(|&w| w == 0) {
            return Err(NnError::Shape("hidden widths must be positive".into()));
        }
        if self.heads == 0 {
            return Err(NnError::Shape("at least one head is required".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.embedding_dims.iter().sum()
    }

    pub fn embedding_params(&self) -> usize {
        self.vocab_sizes
            .iter()
            .zip(&self.embedding_dims)
            .map(|(v, d)| v * d)
            .sum()
    }

    pub fn head_params(&self) -> usize {
        let mut dims = vec![self.input_dim()];
        dims.extend_from_slice(&self.hidden_widths);
        dims.push(1);
        dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    pub fn param_count(&self) -> usize {
        self.embedding_params() + self.heads * self.head_params()
    }
}

/// Activations kept from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub features: Array2<u32>,
    /// Concatenated embeddings, `batch × input_dim`.
    pub input: Array2<T>,
    /// Post-rectifier activations per head, per hidden layer.
    pub hidden: Vec<Vec<Array2<T>>>,
    /// `batch × heads`
    pub logits: Array2<T>,
    /// `batch × heads`, logistic of `logits`.
    pub probs: Array2<T>,
}

impl<T: Real> ForwardCache<T> {
    pub fn batch_size(&self) -> usize {
        self.input.nrows()
    }

    /// Hash of every rectifier on/off state; piecewise-linear regions change iff this does.
    pub fn region_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for head in &self.hidden {
            for a in head {
                for &v in a {
                    h ^= u64::from(v > T::zero());
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Gradient rows for the embedding rows a batch touched, rows sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows<T> {
    pub rows: Vec<u32>,
    pub grads: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients<T> {
    pub layers: Vec<Dense<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub tables: Vec<SparseRows<T>>,
    pub heads: Vec<HeadGradients<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn squared_norm(&self) -> T {
        let sq = |a: &Array2<T>| a.iter().fold(T::zero(), |acc, &v| acc + v * v);
        let mut total = T::zero();
        for t in &self.tables {
            total += sq(&t.grads);
        }
        for h in &self.heads {
            for l in &h.layers {
                total += sq(&l.weights);
                total += l.bias.iter().fold(T::zero(), |acc, &v| acc + v * v);
            }
        }
        total
    }

    pub fn all_finite(&self) -> bool {
        self.tables.iter().all(|t| t.grads.iter().all(|v| v.is_finite()))
            && self.heads.iter().all(|h| {
                h.layers.iter().all(|l| {
                    l.weights.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite())
                })
            })
    }

    /// Flattens into one dense vector per tensor, in the network's tensor order.
    pub fn to_dense(&self, shape: &NetworkShape) -> Vec<Vec<T>> {
        let mut out = Vec::new();
        for (f, t) in self.tables.iter().enumerate() {
            let dim = shape.embedding_dims[f];
            let mut dense = vec![T::zero(); shape.vocab_sizes[f] * dim];
            for (k, &row) in t.rows.iter().enumerate() {
                let start = row as usize * dim;
                for (d, &g) in t.grads.row(k).iter().enumerate() {
                    dense[start + d] = g;
                }
            }
            out.push(dense);
        }
        for h in &self.heads {
            for l in &h.layers {
                out.push(l.weights.iter().copied().collect());
                out.push(l.bias.to_vec());
            }
        }
        out
    }
}

/// Shared embedding module plus parallel heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    shape: NetworkShape,
    pub tables: Vec<EmbeddingTable<T>>,
    pub heads: Vec<MlpHead<T>>,
}

impl<T: Real> Network<T> {
    pub fn new<R: Rng + ?Sized>(shape: NetworkShape, rng: &mut R) -> Result<Self, NnError> {
        shape.validate()?;
        let tables = shape
            .vocab_sizes
            .iter()
            .zip(&shape.embedding_dims)
            .map(|(&v, &d)| EmbeddingTable::new(v, d, rng))
            .collect();
        let heads = (0..shape.heads)
            .map(|_| MlpHead::new(shape.input_dim(), &shape.hidden_widths, rng))
            .collect();
        Ok(Self {
            shape,
            tables,
            heads,
        })
    }

    pub fn zeros(shape: NetworkShape) -> Result<Self, NnError> {
        shape.validate()?;
        let tables = shape
            .vocab_sizes
            .iter()
            .zip(&shape.embedding_dims)
            .map(|(&v, &d)| EmbeddingTable::zeros(v, d))
            .collect();
        let heads = (0..shape.heads)
            .map(|_| MlpHead::zeros(shape.input_dim(), &shape.hidden_widths))
            .collect();
        Ok(Self {
            shape,
            tables,
            heads,
        })
    }

    pub fn shape(&self) -> &NetworkShape {
        &self.shape
    }

    pub fn param_count(&self) -> usize {
        self.tables.iter().map(|t| t.weights.len()).sum::<usize>()
            + self.heads.iter().map(MlpHead::param_count).sum::<usize>()
    }

    fn gather(&self, features: ArrayView2<u32>) -> Result<Array2<T>, NnError> {
        if features.ncols() != self.tables.len() {
            return Err(NnError::Shape(format!(
                "batch has {} feature fields, network expects {}",
                features.ncols(),
                self.tables.len()
            )));
        }
        let mut x = Array2::zeros((features.nrows(), self.shape.input_dim()));
        for (i, row) in features.outer_iter().enumerate() {
            let mut off = 0;
            for (f, table) in self.tables.iter().enumerate() {
                let id = row[f];
                if id as usize >= table.vocab() {
                    return Err(NnError::IndexOutOfRange {
                        field: f,
                        index: id,
                        vocab: table.vocab(),
                    });
                }
                let dim = table.dim();
                x.slice_mut(s![i, off..off + dim])
                    .assign(&table.weights.row(id as usize));
                off += dim;
            }
        }
        Ok(x)
    }

    /// Runs every head on a `batch × fields` matrix of categorical ids.
    pub fn forward(&self, features: ArrayView2<u32>) -> Result<ForwardCache<T>, NnError> {
        let input = self.gather(features)?;
        let n = input.nrows();
        let mut logits = Array2::zeros((n, self.heads.len()));
        let mut hidden = Vec::with_capacity(self.heads.len());
        for (h, head) in self.heads.iter().enumerate() {
            let mut acts: Vec<Array2<T>> = Vec::with_capacity(head.layers.len() - 1);
            let last = head.layers.len() - 1;
            for (l, layer) in head.layers.iter().enumerate() {
                let x = if l == 0 { input.view() } else { acts[l - 1].view() };
                let mut z = x.dot(&layer.weights);
                z += &layer.bias;
                if l == last {
                    logits.column_mut(h).assign(&z.column(0));
                } else {
                    z.mapv_inplace(|v| if v < T::zero() { T::zero() } else { v });
                    acts.push(z);
                }
            }
            hidden.push(acts);
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite("head logits".into()));
        }
        let probs = logits.mapv(sigmoid);
        Ok(ForwardCache {
            features: features.to_owned(),
            input,
            hidden,
            logits,
            probs,
        })
    }

    /// Exact gradients given `∂loss/∂logit` for every example and head.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        dlogits: ArrayView2<T>,
    ) -> Result<Gradients<T>, NnError> {
        let n = cache.batch_size();
        if dlogits.dim() != (n, self.heads.len()) || cache.hidden.len() != self.heads.len() {
            return Err(NnError::Shape(format!(
                "upstream gradient {:?} does not match batch {n} × {} heads",
                dlogits.dim(),
                self.heads.len()
            )));
        }
        let mut dx: Array2<T> = Array2::zeros(cache.input.raw_dim());
        let mut heads = Vec::with_capacity(self.heads.len());
        for (h, head) in self.heads.iter().enumerate() {
            let acts = &cache.hidden[h];
            if acts.len() + 1 != head.layers.len() {
                return Err(NnError::Shape("cache depth does not match head".into()));
            }
            let mut g = dlogits.column(h).to_owned().insert_axis(Axis(1));
            let mut grads: Vec<Dense<T>> = Vec::with_capacity(head.layers.len());
            for l in (0..head.layers.len()).rev() {
                let layer = &head.layers[l];
                let x = if l == 0 { cache.input.view() } else { acts[l - 1].view() };
                let dw = x.t().dot(&g).as_standard_layout().into_owned();
                let db = g.sum_axis(Axis(0));
                let mut back = g.dot(&layer.weights.t());
                if l == 0 {
                    dx += &back;
                } else {
                    Zip::from(&mut back)
                        .and(&acts[l - 1])
                        .for_each(|b, &a| {
                            if a <= T::zero() {
                                *b = T::zero();
                            }
                        });
                }
                grads.push(Dense {
                    weights: dw,
                    bias: db,
                });
                g = back;
            }
            grads.reverse();
            heads.push(HeadGradients { layers: grads });
        }

        let mut tables = Vec::with_capacity(self.tables.len());
        let mut off = 0;
        for (f, table) in self.tables.iter().enumerate() {
            let dim = table.dim();
            let ids = cache.features.column(f);
            let mut rows: Vec<u32> = ids.to_vec();
            rows.sort_unstable();
            rows.dedup();
            let mut grads = Array2::zeros((rows.len(), dim));
            for (i, &id) in ids.iter().enumerate() {
                let k = rows.binary_search(&id).expect("row collected above");
                let mut dst = grads.row_mut(k);
                dst += &dx.slice(s![i, off..off + dim]);
            }
            tables.push(SparseRows { rows, grads });
            off += dim;
        }
        Ok(Gradients { tables, heads })
    }

    /// Number of parameter tensors: tables, then weight and bias per head layer.
    pub fn tensor_count(&self) -> usize {
        self.tables.len() + self.heads.iter().map(|h| 2 * h.layers.len()).sum::<usize>()
    }

    fn locate(&self, i: usize) -> TensorLoc {
        if i < self.tables.len() {
            return TensorLoc::Table(i);
        }
        let mut j = i - self.tables.len();
        for (h, head) in self.heads.iter().enumerate() {
            let n = 2 * head.layers.len();
            if j < n {
                return if j % 2 == 0 {
                    TensorLoc::Weight(h, j / 2)
                } else {
                    TensorLoc::Bias(h, j / 2)
                };
            }
            j -= n;
        }
        panic!("tensor index {i} out of range");
    }

    pub fn tensor_name(&self, i: usize) -> String {
        match self.locate(i) {
            TensorLoc::Table(f) => format!("embedding.{f}"),
            TensorLoc::Weight(h, l) => format!("head{h}.layer{l}.weight"),
            TensorLoc::Bias(h, l) => format!("head{h}.layer{l}.bias"),
        }
    }

    pub fn tensor_shape(&self, i: usize) -> Vec<usize> {
        match self.locate(i) {
            TensorLoc::Table(f) => self.tables[f].weights.shape().to_vec(),
            TensorLoc::Weight(h, l) => self.heads[h].layers[l].weights.shape().to_vec(),
            TensorLoc::Bias(h, l) => self.heads[h].layers[l].bias.shape().to_vec(),
        }
    }

    pub fn tensor(&self, i: usize) -> &[T] {
        match self.locate(i) {
            TensorLoc::Table(f) => self.tables[f].weights.as_slice(),
            TensorLoc::Weight(h, l) => self.heads[h].layers[l].weights.as_slice(),
            TensorLoc::Bias(h, l) => self.heads[h].layers[l].bias.as_slice(),
        }
        .expect("parameters are contiguous")
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut [T] {
        match self.locate(i) {
            TensorLoc::Table(f) => self.tables[f].weights.as_slice_mut(),
            TensorLoc::Weight(h, l) => self.heads[h].layers[l].weights.as_slice_mut(),
            TensorLoc::Bias(h, l) => self.heads[h].layers[l].bias.as_slice_mut(),
        }
        .expect("parameters are contiguous")
    }
}

#[derive(Debug, Clone, Copy)]
enum TensorLoc {
    Table(usize),
    Weight(usize, usize),
    Bias(usize, usize),
}
