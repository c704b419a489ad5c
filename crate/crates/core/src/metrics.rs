//! Ranking and calibration metrics.
//!
//! AUC is the Mann–Whitney statistic: the probability that a random positive
//! outscores a random negative, ties counted one half. Both the rank-sum path and
//! the pairwise oracle work in exact integer arithmetic (doubled ranks), so they
//! agree to the last bit.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::CompositeTargets;
use crate::models::{Batch, Model};
use crate::nn::{Real, PROB_EPSILON};
use crate::synth::{GenerativeModel, ImpressionRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("AUC undefined: {positives} positives and {negatives} negatives")]
    Degenerate { positives: usize, negatives: usize },
    #[error("non-finite score at position {0}")]
    NonFinite(usize),
    #[error("no examples")]
    Empty,
    #[error("scorer failed: {0}")]
    Scorer(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredExample {
    pub score: f64,
    pub label: bool,
}

impl ScoredExample {
    pub fn new(score: f64, label: bool) -> Self {
        Self { score, label }
    }
}

fn check(examples: &[ScoredExample]) -> Result<(u64, u64), MetricsError> {
    if let Some(i) = examples.iter().position(|e| !e.score.is_finite()) {
        return Err(MetricsError::NonFinite(i));
    }
    let pos = examples.iter().filter(|e| e.label).count();
    let neg = examples.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::Degenerate {
            positives: pos,
            negatives: neg,
        });
    }
    Ok((pos as u64, neg as u64))
}

/// Rank-statistic AUC in `O(n log n)`, tied scores sharing their average rank.
pub fn auc(examples: &[ScoredExample]) -> Result<f64, MetricsError> {
    let (pos, neg) = check(examples)?;
    let mut sorted: Vec<ScoredExample> = examples.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));

    // Twice the rank sum of the positives; ranks are 1-based.
    let mut rank_sum2: u128 = 0;
    let mut start = 0usize;
    while start < sorted.len() {
        let mut end = start + 1;
        while end < sorted.len() && sorted[end].score == sorted[start].score {
            end += 1;
        }
        let group = (end - start) as u128;
        let positives = sorted[start..end].iter().filter(|e| e.label).count() as u128;
        // average rank of positions start+1..=end, doubled
        let avg2 = 2 * start as u128 + group + 1;
        rank_sum2 += positives * avg2;
        start = end;
    }
    let u2 = rank_sum2 - u128::from(pos) * u128::from(pos + 1);
    Ok(u2 as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Pairwise oracle: explicit loop over every positive–negative pair.
pub fn auc_bruteforce(examples: &[ScoredExample]) -> Result<f64, MetricsError> {
    let (pos, neg) = check(examples)?;
    let mut credit2: u128 = 0;
    for p in examples.iter().filter(|e| e.label) {
        for n in examples.iter().filter(|e| !e.label) {
            if p.score > n.score {
                credit2 += 2;
            } else if p.score == n.score {
                credit2 += 1;
            }
        }
    }
    Ok(credit2 as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Mean binary cross-entropy with the same clamp as training.
pub fn log_loss(examples: &[ScoredExample]) -> Result<f64, MetricsError> {
    if examples.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut sum = 0.0;
    for (i, e) in examples.iter().enumerate() {
        if !e.score.is_finite() {
            return Err(MetricsError::NonFinite(i));
        }
        let p = e.score.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON);
        sum -= if e.label { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(sum / examples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationBucket {
    pub count: usize,
    pub mean_predicted: f64,
    pub empirical_rate: f64,
}

/// Equal-count buckets by ascending score.
pub fn calibration(examples: &[ScoredExample], buckets: usize) -> Vec<CalibrationBucket> {
    let mut sorted = examples.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    let n = sorted.len();
    (0..buckets)
        .filter_map(|b| {
            let chunk = &sorted[n * b / buckets..n * (b + 1) / buckets];
            (!chunk.is_empty()).then(|| CalibrationBucket {
                count: chunk.len(),
                mean_predicted: chunk.iter().map(|e| e.score).sum::<f64>() / chunk.len() as f64,
                empirical_rate: chunk.iter().filter(|e| e.label).count() as f64 / chunk.len() as f64,
            })
        })
        .collect()
}

/// Anything that produces composed predictions for impressions.
pub trait Scorer {
    fn score(&self, records: &[ImpressionRecord]) -> Result<Vec<CompositeTargets<f64>>, MetricsError>;
}

const SCORING_CHUNK: usize = 4096;

impl<T: Real> Scorer for Model<T> {
    fn score(&self, records: &[ImpressionRecord]) -> Result<Vec<CompositeTargets<f64>>, MetricsError> {
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(SCORING_CHUNK) {
            let batch = Batch::from_records(chunk);
            let preds = self
                .predict(batch.features.view())
                .map_err(|e| MetricsError::Scorer(e.to_string()))?;
            out.extend(preds.iter().map(CompositeTargets::to_f64));
        }
        Ok(out)
    }
}

/// Scores with the generator's exact targets: the best achievable ranking.
impl Scorer for GenerativeModel {
    fn score(&self, records: &[ImpressionRecord]) -> Result<Vec<CompositeTargets<f64>>, MetricsError> {
        records
            .iter()
            .map(|r| {
                self.ground_truth_targets(r.user_id, r.item_id)
                    .map_err(|e| MetricsError::Scorer(e.to_string()))
            })
            .collect()
    }
}

/// Uniform random CTR and CVR scores, keyed by impression id.
#[derive(Debug, Clone, Copy)]
pub struct RandomScorer {
    pub seed: u64,
}

impl Scorer for RandomScorer {
    fn score(&self, records: &[ImpressionRecord]) -> Result<Vec<CompositeTargets<f64>>, MetricsError> {
        Ok(records
            .iter()
            .map(|r| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(r.impression_id);
                let ctr: f64 = rng.random();
                let cvr: f64 = rng.random();
                CompositeTargets {
                    p_ctr: ctr,
                    p_dmi: None,
                    p_dma: None,
                    p_ctcvr: ctr * cvr,
                    p_cvr: cvr,
                }
            })
            .collect())
    }
}

/// Evaluation of one scorer on one test log.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub records: usize,
    pub clicks: usize,
    pub purchases: usize,
    /// Purchase vs `p_cvr` on clicked impressions; `Err` holds why it is absent.
    pub cvr_auc: Result<f64, String>,
    /// Purchase vs `p_ctcvr` on all impressions.
    pub ctcvr_auc: Result<f64, String>,
    pub ctr_auc: Result<f64, String>,
    pub logloss_ctr: f64,
    pub logloss_ctcvr: f64,
    pub logloss_cvr: Option<f64>,
    pub mean_p_ctr: f64,
    pub empirical_ctr: f64,
    pub mean_p_ctcvr: f64,
    pub empirical_ctcvr: f64,
    pub calibration_ctr: Vec<CalibrationBucket>,
    pub calibration_ctcvr: Vec<CalibrationBucket>,
}

pub const CALIBRATION_BUCKETS: usize = 10;

pub fn eval_protocol<S: Scorer + ?Sized>(
    scorer: &S,
    records: &[ImpressionRecord],
) -> Result<EvalReport, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let preds = scorer.score(records)?;
    let mut ctr = Vec::with_capacity(records.len());
    let mut ctcvr = Vec::with_capacity(records.len());
    let mut cvr = Vec::new();
    for (r, p) in records.iter().zip(&preds) {
        ctr.push(ScoredExample::new(p.p_ctr, r.click));
        ctcvr.push(ScoredExample::new(p.p_ctcvr, r.purchase));
        if r.click {
            cvr.push(ScoredExample::new(p.p_cvr, r.purchase));
        }
    }
    let n = records.len() as f64;
    let reason = |e: MetricsError| e.to_string();
    let mean = |v: &[ScoredExample]| v.iter().map(|e| e.score).sum::<f64>() / v.len() as f64;
    let rate = |v: &[ScoredExample]| v.iter().filter(|e| e.label).count() as f64 / v.len() as f64;
    let clicks = cvr.len();
    Ok(EvalReport {
        records: records.len(),
        clicks,
        purchases: ctcvr.iter().filter(|e| e.label).count(),
        cvr_auc: if cvr.is_empty() {
            Err("no clicked impressions".to_string())
        } else {
            auc(&cvr).map_err(reason)
        },
        ctcvr_auc: auc(&ctcvr).map_err(reason),
        ctr_auc: auc(&ctr).map_err(reason),
        logloss_ctr: log_loss(&ctr)?,
        logloss_ctcvr: log_loss(&ctcvr)?,
        logloss_cvr: if cvr.is_empty() { None } else { Some(log_loss(&cvr)?) },
        mean_p_ctr: mean(&ctr),
        empirical_ctr: ctr.iter().filter(|e| e.label).count() as f64 / n,
        mean_p_ctcvr: mean(&ctcvr),
        empirical_ctcvr: rate(&ctcvr),
        calibration_ctr: calibration(&ctr, CALIBRATION_BUCKETS),
        calibration_ctcvr: calibration(&ctcvr, CALIBRATION_BUCKETS),
    })
}

fn fmt_metric(v: &Result<f64, String>) -> String {
    match v {
        Ok(x) => x.to_string(),
        Err(_) => "absent".to_string(),
    }
}

impl EvalReport {
    /// `key = value` lines; floats use shortest round-trip formatting.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("auc_kind", "global".into());
        kv("cvr_auc_population", "clicked".into());
        kv("records", self.records.to_string());
        kv("clicks", self.clicks.to_string());
        kv("purchases", self.purchases.to_string());
        kv("cvr_auc", fmt_metric(&self.cvr_auc));
        if let Err(why) = &self.cvr_auc {
            kv("cvr_auc_absent_reason", why.clone());
        }
        kv("ctcvr_auc", fmt_metric(&self.ctcvr_auc));
        kv("ctr_auc", fmt_metric(&self.ctr_auc));
        kv("logloss_ctr", self.logloss_ctr.to_string());
        kv("logloss_ctcvr", self.logloss_ctcvr.to_string());
        kv(
            "logloss_cvr",
            self.logloss_cvr.map_or("absent".into(), |v| v.to_string()),
        );
        kv("mean_p_ctr", self.mean_p_ctr.to_string());
        kv("empirical_ctr", self.empirical_ctr.to_string());
        kv("mean_p_ctcvr", self.mean_p_ctcvr.to_string());
        kv("empirical_ctcvr", self.empirical_ctcvr.to_string());
        for (name, buckets) in [
            ("ctr", &self.calibration_ctr),
            ("ctcvr", &self.calibration_ctcvr),
        ] {
            for (i, b) in buckets.iter().enumerate() {
                kv(
                    &format!("calibration_{name}_{i}"),
                    format!("{} {} {}", b.count, b.mean_predicted, b.empirical_rate),
                );
            }
        }
        s
    }

    pub fn to_table(&self) -> String {
        let f = |v: &Result<f64, String>| match v {
            Ok(x) => format!("{x:.5}"),
            Err(why) => format!("absent ({why})"),
        };
        let mut s = String::new();
        let _ = writeln!(
            s,
            "impressions {}  clicks {}  purchases {}",
            self.records, self.clicks, self.purchases
        );
        let _ = writeln!(s, "CVR AUC (clicked)    {}", f(&self.cvr_auc));
        let _ = writeln!(s, "CTCVR AUC            {}", f(&self.ctcvr_auc));
        let _ = writeln!(s, "CTR AUC              {}", f(&self.ctr_auc));
        let _ = writeln!(
            s,
            "log-loss ctr/ctcvr/cvr {:.5} / {:.5} / {}",
            self.logloss_ctr,
            self.logloss_ctcvr,
            self.logloss_cvr.map_or("absent".into(), |v| format!("{v:.5}"))
        );
        let _ = writeln!(
            s,
            "mean p_ctr {:.5} vs empirical {:.5}; mean p_ctcvr {:.6} vs empirical {:.6}",
            self.mean_p_ctr, self.empirical_ctr, self.mean_p_ctcvr, self.empirical_ctcvr
        );
        let _ = writeln!(s, "calibration (ctcvr deciles): predicted / empirical");
        for b in &self.calibration_ctcvr {
            let _ = writeln!(s, "  {:>8}  {:.6}  {:.6}", b.count, b.mean_predicted, b.empirical_rate);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(scores: &[f64], labels: &[u8]) -> Vec<ScoredExample> {
        scores
            .iter()
            .zip(labels)
            .map(|(&s, &l)| ScoredExample::new(s, l == 1))
            .collect()
    }

    #[test]
    fn fixed_examples() {
        assert_eq!(auc(&ex(&[0.9, 0.8, 0.1], &[1, 1, 0])).unwrap(), 1.0);
        assert_eq!(auc(&ex(&[0.3; 6], &[1, 0, 1, 0, 0, 1])).unwrap(), 0.5);
        let e = ex(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]);
        assert_eq!(auc(&e).unwrap(), 0.75);
        assert_eq!(auc_bruteforce(&e).unwrap(), 0.75);
        assert_eq!(auc_bruteforce(&ex(&[0.7, 0.2], &[1, 0])).unwrap(), 1.0);
    }

    #[test]
    fn degenerate_labels_are_errors() {
        let e = ex(&[0.1, 0.2], &[1, 1]);
        assert_eq!(
            auc(&e),
            Err(MetricsError::Degenerate {
                positives: 2,
                negatives: 0
            })
        );
        assert!(auc_bruteforce(&ex(&[0.1], &[0])).is_err());
        assert!(matches!(
            auc(&ex(&[f64::NAN, 0.2], &[1, 0])),
            Err(MetricsError::NonFinite(0))
        ));
    }

    #[test]
    fn log_loss_and_calibration() {
        let e = ex(&[0.5, 0.5], &[1, 0]);
        assert!((log_loss(&e).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let scores: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        let labels: Vec<u8> = (0..100).map(|i| u8::from(i >= 50)).collect();
        let b = calibration(&ex(&scores, &labels), 10);
        assert_eq!(b.len(), 10);
        assert!(b.iter().all(|b| b.count == 10));
        assert_eq!(b[0].empirical_rate, 0.0);
        assert_eq!(b[9].empirical_rate, 1.0);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn examples() -> impl Strategy<Value = Vec<ScoredExample>> {
            // few distinct score values force heavy ties
            prop::collection::vec((0u8..12, any::<bool>()), 2..300).prop_map(|v| {
                v.into_iter()
                    .map(|(s, l)| ScoredExample::new(f64::from(s) / 11.0, l))
                    .collect()
            })
        }

        proptest! {
            #[test]
            fn rank_statistic_equals_pairwise(e in examples()) {
                match (auc(&e), auc_bruteforce(&e)) {
                    (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
                    (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
                }
            }

            #[test]
            fn monotone_transform_invariance(e in examples()) {
                if let Ok(a) = auc(&e) {
                    let t: Vec<_> = e.iter().map(|x| ScoredExample::new((3.0 * x.score).exp() - 7.0, x.label)).collect();
                    prop_assert_eq!(a, auc(&t).unwrap());
                }
            }

            #[test]
            fn complement_symmetry(e in examples()) {
                if let Ok(a) = auc(&e) {
                    let flipped: Vec<_> = e.iter().map(|x| ScoredExample::new(x.score, !x.label)).collect();
                    prop_assert!((a + auc(&flipped).unwrap() - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
