use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::HarnessError;
use crate::graph::{
    compose, enumerate_paths_oracle, CompositeTargets, GraphError, HeadProbabilities, Task, Variant,
};
use crate::models::{Batch, Model, ModelObjective, ModelSpec};
use crate::nn::{grad_check, GradCheckOptions, GradCheckReport};
use crate::synth::ImpressionRecord;

pub const ORACLE_TOLERANCE: f64 = 1e-12;

pub type ComposeFn = fn(Variant, &HeadProbabilities<f64>) -> Result<CompositeTargets<f64>, GraphError>;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleFailure {
    pub variant: Variant,
    pub task: Task,
    pub heads: [f64; 6],
    pub what: &'static str,
    pub closed_form: f64,
    pub expected: f64,
}

impl fmt::Display for OracleFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {}: closed form {:e}, expected {:e}, heads y = {:?}",
            self.variant, self.task, self.what, self.closed_form, self.expected, self.heads
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleCheckReport {
    pub cases: usize,
    pub max_abs_error: f64,
    pub failures: Vec<OracleFailure>,
}

impl OracleCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn head_vectors(samples: usize, seed: u64) -> Vec<[f64; 6]> {
    // every corner of the unit cube, then uniform draws
    let mut out: Vec<[f64; 6]> = (0..64u32)
        .map(|m| std::array::from_fn(|j| f64::from((m >> j) & 1)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    out.extend((0..samples).map(|_| std::array::from_fn(|_| rng.random::<f64>())));
    out
}

/// Compares `compose` against path enumeration on random heads for every
/// variant, and checks that `p_ctcvr` is exactly `p_ctr · p_cvr`.
pub fn oracle_check_with(samples: usize, seed: u64, compose: ComposeFn) -> OracleCheckReport {
    let mut report = OracleCheckReport {
        cases: 0,
        max_abs_error: 0.0,
        failures: Vec::new(),
    };
    for y in head_vectors(samples, seed) {
        let h = HeadProbabilities::new(y);
        for variant in Variant::ALL {
            report.cases += 1;
            let (closed, oracle) = match (compose(variant, &h), enumerate_paths_oracle(&h, variant)) {
                (Ok(c), Ok(o)) => (c, o),
                _ => {
                    report.failures.push(OracleFailure {
                        variant,
                        task: Task::Ctr,
                        heads: y,
                        what: "rejected valid heads",
                        closed_form: f64::NAN,
                        expected: f64::NAN,
                    });
                    continue;
                }
            };
            for task in [Task::Ctr, Task::Dmi, Task::Dma, Task::Ctcvr, Task::Cvr] {
                let (c, o) = (closed.get(task), oracle.get(task));
                match (c, o) {
                    (Some(c), Some(o)) => {
                        let err = (c - o).abs();
                        report.max_abs_error = report.max_abs_error.max(err);
                        if !(err <= ORACLE_TOLERANCE) {
                            report.failures.push(OracleFailure {
                                variant,
                                task,
                                heads: y,
                                what: "differs from path enumeration",
                                closed_form: c,
                                expected: o,
                            });
                        }
                    }
                    (None, None) => {}
                    _ => report.failures.push(OracleFailure {
                        variant,
                        task,
                        heads: y,
                        what: "target presence differs from path enumeration",
                        closed_form: c.unwrap_or(f64::NAN),
                        expected: o.unwrap_or(f64::NAN),
                    }),
                }
            }
            let product = closed.p_ctr * closed.p_cvr;
            if closed.p_ctcvr.to_bits() != product.to_bits() {
                report.failures.push(OracleFailure {
                    variant,
                    task: Task::Ctcvr,
                    heads: y,
                    what: "is not bit-identical to p_ctr * p_cvr",
                    closed_form: closed.p_ctcvr,
                    expected: product,
                });
            }
        }
    }
    report
}

pub fn oracle_check(samples: usize, seed: u64) -> OracleCheckReport {
    oracle_check_with(samples, seed, compose)
}

/// Runs the oracle check; a failure is a verification error naming the first
/// counterexample.
pub fn cmd_oracle_check(samples: usize, seed: u64) -> Result<OracleCheckReport, HarnessError> {
    let report = oracle_check(samples, seed);
    match report.failures.first() {
        None => Ok(report),
        Some(f) => Err(HarnessError::Verification(format!(
            "{} of {} cases failed; first: {f}",
            report.failures.len(),
            report.cases
        ))),
    }
}

/// Random records respecting the label implications, with enough positives for
/// every task.
fn gradcheck_records(n: usize, vocab: &[usize], rng: &mut ChaCha8Rng) -> Vec<ImpressionRecord> {
    (0..n)
        .map(|i| {
            let click = rng.random_bool(0.6);
            let mut bit = |p| click && rng.random_bool(p);
            let (dmi, dma, purchase) = (bit(0.5), bit(0.5), bit(0.5));
            ImpressionRecord {
                impression_id: i as u64,
                user_id: rng.random_range(0..vocab[0] as u32),
                item_id: rng.random_range(0..vocab[1] as u32),
                category_id: rng.random_range(0..vocab[2] as u32),
                click,
                dmi,
                dma,
                purchase,
            }
        })
        .collect()
}

/// Finite-difference check of the full loss for one variant, in 64-bit, on a
/// small network so every parameter is checked.
pub fn gradcheck_variant(variant: Variant, batch_size: usize, seed: u64) -> Result<GradCheckReport, HarnessError> {
    let spec = ModelSpec {
        variant,
        vocab_sizes: vec![12, 10, 4],
        embedding_dims: vec![4, 3, 2],
        hidden_widths: vec![8, 6],
        loss_weights: Default::default(),
        seed,
    };
    let mut model = Model::<f64>::build(spec.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let batch = Batch::from_records(&gradcheck_records(batch_size, &spec.vocab_sizes, &mut rng));
    let mut objective = ModelObjective {
        model: &mut model,
        batch: &batch,
    };
    Ok(grad_check(&mut objective, &GradCheckOptions::default()))
}

pub fn cmd_gradcheck(
    variants: &[Variant],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<(Variant, GradCheckReport)>, HarnessError> {
    let mut out = Vec::new();
    for &v in variants {
        out.push((v, gradcheck_variant(v, batch_size, seed)?));
    }
    if let Some((v, r)) = out.iter().find(|(_, r)| !r.passed()) {
        return Err(HarnessError::Verification(format!("{v}: {r}")));
    }
    Ok(out)
}
