use ndarray::{Array2, ArrayViewMut1, ArrayView1};
use serde::{Deserialize, Serialize};

use super::layers::{Dense, Gradients, Network};
use super::{real, NnError, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.0005,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err("learning_rate must be positive".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(self.epsilon > 0.0) {
            return Err("epsilon must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct StepCoefficients<T> {
    beta1: T,
    beta2: T,
    one_minus_beta1: T,
    one_minus_beta2: T,
    step_size: T,
    sqrt_bc2: T,
    epsilon: T,
}

impl<T: Real> StepCoefficients<T> {
    fn new(config: &AdamConfig, step: u64) -> Self {
        let t = step as i32;
        let bc1 = 1.0 - config.beta1.powi(t);
        let bc2 = 1.0 - config.beta2.powi(t);
        Self {
            beta1: real(config.beta1),
            beta2: real(config.beta2),
            one_minus_beta1: real(1.0 - config.beta1),
            one_minus_beta2: real(1.0 - config.beta2),
            step_size: real(config.learning_rate / bc1),
            sqrt_bc2: real(bc2.sqrt()),
            epsilon: real(config.epsilon),
        }
    }

    #[inline]
    fn apply(&self, p: &mut T, g: T, m: &mut T, v: &mut T) {
        *m = self.beta1 * *m + self.one_minus_beta1 * g;
        *v = self.beta2 * *v + self.one_minus_beta2 * g * g;
        let denom = v.sqrt() / self.sqrt_bc2 + self.epsilon;
        *p -= self.step_size * *m / denom;
    }
}

fn apply_slice<T: Real>(c: &StepCoefficients<T>, p: &mut [T], g: &[T], m: &mut [T], v: &mut [T]) {
    for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
        c.apply(p, g, m, v);
    }
}

fn apply_row<T: Real>(
    c: &StepCoefficients<T>,
    mut p: ArrayViewMut1<T>,
    g: ArrayView1<T>,
    mut m: ArrayViewMut1<T>,
    mut v: ArrayViewMut1<T>,
) {
    for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
        c.apply(p, g, m, v);
    }
}

/// Adam moments for one [`Network`].
///
/// Embedding rows are updated sparsely: rows absent from a batch keep their
/// parameters and moments bit-for-bit. Bias correction uses the global step.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    config: AdamConfig,
    step: u64,
    tables: Vec<(Array2<T>, Array2<T>)>,
    heads: Vec<Vec<(Dense<T>, Dense<T>)>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(net: &Network<T>, config: AdamConfig) -> Self {
        let tables = net
            .tables
            .iter()
            .map(|t| {
                (
                    Array2::zeros(t.weights.raw_dim()),
                    Array2::zeros(t.weights.raw_dim()),
                )
            })
            .collect();
        let heads = net
            .heads
            .iter()
            .map(|h| {
                h.layers
                    .iter()
                    .map(|l| {
                        (
                            Dense::zeros(l.inputs(), l.outputs()),
                            Dense::zeros(l.inputs(), l.outputs()),
                        )
                    })
                    .collect()
            })
            .collect();
        Self {
            config,
            step: 0,
            tables,
            heads,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    fn check_shapes(&self, net: &Network<T>, grads: &Gradients<T>) -> Result<(), NnError> {
        let mismatch = |what: &str| Err(NnError::Shape(format!("adam: {what}")));
        if grads.tables.len() != net.tables.len() || self.tables.len() != net.tables.len() {
            return mismatch("embedding table count");
        }
        for ((g, t), (m, _)) in grads.tables.iter().zip(&net.tables).zip(&self.tables) {
            if g.grads.ncols() != t.dim()
                || g.grads.nrows() != g.rows.len()
                || m.dim() != t.weights.dim()
                || g.rows.iter().any(|&r| r as usize >= t.vocab())
            {
                return mismatch("embedding gradient shape");
            }
        }
        if grads.heads.len() != net.heads.len() || self.heads.len() != net.heads.len() {
            return mismatch("head count");
        }
        for ((g, h), s) in grads.heads.iter().zip(&net.heads).zip(&self.heads) {
            if g.layers.len() != h.layers.len() || s.len() != h.layers.len() {
                return mismatch("head depth");
            }
            for (gl, l) in g.layers.iter().zip(&h.layers) {
                if gl.weights.dim() != l.weights.dim() || gl.bias.dim() != l.bias.dim() {
                    return mismatch("layer shape");
                }
            }
        }
        Ok(())
    }

    /// One bias-corrected Adam update. Fails without touching anything if shapes
    /// disagree or a gradient is not finite.
    pub fn apply(&mut self, net: &mut Network<T>, grads: &Gradients<T>) -> Result<(), NnError> {
        self.check_shapes(net, grads)?;
        if !grads.all_finite() {
            return Err(NnError::NonFinite(format!(
                "gradient at optimizer step {}",
                self.step + 1
            )));
        }
        self.step += 1;
        let c = StepCoefficients::<T>::new(&self.config, self.step);

        for ((table, g), (m, v)) in net.tables.iter_mut().zip(&grads.tables).zip(&mut self.tables) {
            for (k, &row) in g.rows.iter().enumerate() {
                let r = row as usize;
                apply_row(
                    &c,
                    table.weights.row_mut(r),
                    g.grads.row(k),
                    m.row_mut(r),
                    v.row_mut(r),
                );
            }
        }
        for ((head, g), state) in net.heads.iter_mut().zip(&grads.heads).zip(&mut self.heads) {
            for ((layer, gl), (m, v)) in head.layers.iter_mut().zip(&g.layers).zip(state.iter_mut()) {
                apply_slice(
                    &c,
                    layer.weights.as_slice_mut().expect("contiguous"),
                    gl.weights.as_slice().expect("contiguous"),
                    m.weights.as_slice_mut().expect("contiguous"),
                    v.weights.as_slice_mut().expect("contiguous"),
                );
                apply_slice(
                    &c,
                    layer.bias.as_slice_mut().expect("contiguous"),
                    gl.bias.as_slice().expect("contiguous"),
                    m.bias.as_slice_mut().expect("contiguous"),
                    v.bias.as_slice_mut().expect("contiguous"),
                );
            }
        }
        Ok(())
    }
}
