//! Synthetic impression logs with known ground truth.
//!
//! A hidden latent-factor model assigns every (user, item) pair six path-conditional
//! probabilities `y_j = logistic(a_j · φ(u, v) + b_j)`, where `φ` concatenates the
//! user latent, the item latent and their elementwise product. Impressions are
//! sampled by walking the behavior graph
//! `impression → click → {D-Mi, O-Mi} → {D-Ma, O-Ma} → purchase`.
//!
//! Biases are calibrated by bisection so that the marginal click rate and the
//! post-click D-Mi, D-Ma and purchase rates hit configured targets. Models only see
//! categorical ids; the latents stay hidden.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{compose_hm3, CompositeTargets, HeadProbabilities};

pub const GENERATOR_VERSION: u32 = 1;
pub const LOG_HEADER: &str = "impression_id,user_id,item_id,category_id,click,dmi,dma,pay";

const BISECTION_ITERATIONS: usize = 60;
const BISECTION_BRACKET: f64 = 40.0;
const CALIBRATION_TOLERANCE: f64 = 0.02;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("head y{head}: target rate {target} unreachable (closest {achieved} after {iterations} bisection steps)")]
    Unreachable {
        head: usize,
        target: f64,
        achieved: f64,
        iterations: usize,
    },
    #[error("{what} id {id} out of range (size {size})")]
    OutOfRange { what: &'static str, id: u32, size: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: label invariant violated: {violation}")]
    Invariant {
        path: PathBuf,
        line: usize,
        violation: LabelViolation,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Marginal rates: click per impression, then D-Mi, D-Ma and purchase per click.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateTargets {
    pub click: f64,
    pub dmi: f64,
    pub dma: f64,
    pub purchase: f64,
}

impl RateTargets {
    /// Ratios of the small production training set: 4.9B impressions, 146M clicks,
    /// 36M D-Mi, 19M D-Ma, 5M purchases.
    pub fn sr_s() -> Self {
        Self {
            click: 146.0 / 4900.0,
            dmi: 36.0 / 146.0,
            dma: 19.0 / 146.0,
            purchase: 5.0 / 146.0,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        for (name, v) in self.named() {
            if !(v > 0.0 && v < 1.0) {
                return Err(SynthError::Config(format!(
                    "rate target `{name}` = {v} must lie strictly in (0, 1)"
                )));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, f64); 4] {
        [
            ("click", self.click),
            ("dmi", self.dmi),
            ("dma", self.dma),
            ("purchase", self.purchase),
        ]
    }
}

impl Default for RateTargets {
    fn default() -> Self {
        Self::sr_s()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_categories: usize,
    pub latent_dim: usize,
    /// Standard deviation of each head's logit across (user, item) pairs, before bias.
    pub weight_scale: f64,
    /// Per-head multiplier on `weight_scale`, in y1..y6 order.
    pub head_scales: [f64; 6],
    /// Fraction of each head's weight variance carried by a direction shared by all heads.
    pub head_correlation: f64,
    /// Fraction of an item's latent variance explained by its category centroid.
    pub category_share: f64,
    /// `b5 = b3 − macro_offset`: D-Ma is less likely after O-Mi than after D-Mi.
    pub macro_offset: f64,
    /// `b6 = b4 − purchase_offset`: purchase is less likely after O-Ma than after D-Ma.
    pub purchase_offset: f64,
    /// Monte-Carlo (user, item) pairs used for bias calibration.
    pub calibration_pairs: usize,
    pub seed: u64,
    pub targets: RateTargets,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_users: 10_000,
            n_items: 10_000,
            n_categories: 100,
            latent_dim: 8,
            weight_scale: 1.0,
            head_scales: [1.0; 6],
            head_correlation: 0.5,
            category_share: 0.5,
            macro_offset: 1.5,
            purchase_offset: 2.0,
            calibration_pairs: 200_000,
            seed: 20200916,
            targets: RateTargets::sr_s(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        if self.n_users == 0 || self.n_items == 0 || self.n_categories == 0 {
            return bad("user, item and category counts must be positive");
        }
        if self.n_users > u32::MAX as usize || self.n_items > u32::MAX as usize {
            return bad("user and item counts must fit in 32 bits");
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive");
        }
        if !(self.weight_scale >= 0.0 && self.weight_scale.is_finite()) {
            return bad("weight_scale must be finite and non-negative");
        }
        if !self.head_scales.iter().all(|s| *s >= 0.0 && s.is_finite()) {
            return bad("head_scales must be finite and non-negative");
        }
        for (name, v) in [
            ("head_correlation", self.head_correlation),
            ("category_share", self.category_share),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SynthError::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.macro_offset.is_finite() && self.purchase_offset.is_finite()) {
            return bad("offsets must be finite");
        }
        if self.calibration_pairs == 0 {
            return bad("calibration_pairs must be positive");
        }
        self.targets.validate()
    }
}

/// Hidden ground-truth model.
#[derive(Debug, Clone)]
pub struct GenerativeModel {
    config: GeneratorConfig,
    user_latent: Vec<f64>,
    item_latent: Vec<f64>,
    item_category: Vec<u32>,
    /// Six weight vectors over φ, each `3 · latent_dim` long.
    head_weights: Vec<Vec<f64>>,
    head_bias: [f64; 6],
    record_key: [u8; 32],
}

#[inline]
fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl GenerativeModel {
    /// Draws latents and head weights; biases start at zero for y1..y4 and at the
    /// configured negative offsets for y5 and y6.
    pub fn sample(config: GeneratorConfig) -> Result<Self, SynthError> {
        config.validate()?;
        let d = config.latent_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

        let user_latent: Vec<f64> = (0..config.n_users * d).map(|_| normal(&mut rng)).collect();

        let centroids: Vec<f64> = (0..config.n_categories * d).map(|_| normal(&mut rng)).collect();
        let item_category: Vec<u32> = (0..config.n_items)
            .map(|_| rng.random_range(0..config.n_categories as u32))
            .collect();
        let share = config.category_share;
        let mut item_latent = Vec::with_capacity(config.n_items * d);
        for &c in &item_category {
            let centroid = &centroids[c as usize * d..(c as usize + 1) * d];
            for &m in centroid {
                item_latent.push(share.sqrt() * m + (1.0 - share).sqrt() * normal(&mut rng));
            }
        }

        // φ has unit second moment per coordinate, so N(0, s²/|φ|) weights give a
        // logit standard deviation close to s.
        let phi_len = 3 * d;
        let sd = config.weight_scale / (phi_len as f64).sqrt();
        let shared: Vec<f64> = (0..phi_len).map(|_| normal(&mut rng)).collect();
        let rho = config.head_correlation;
        let head_weights = (0..6)
            .map(|j| {
                let sd = sd * config.head_scales[j];
                shared
                    .iter()
                    .map(|&s| sd * (rho.sqrt() * s + (1.0 - rho).sqrt() * normal(&mut rng)))
                    .collect()
            })
            .collect();

        let mut record_key = [0u8; 32];
        rng.fill(&mut record_key);

        let head_bias = [
            0.0,
            0.0,
            0.0,
            0.0,
            -config.macro_offset,
            -config.purchase_offset,
        ];
        Ok(Self {
            config,
            user_latent,
            item_latent,
            item_category,
            head_weights,
            head_bias,
            record_key,
        })
    }

    /// Samples and calibrates in one go.
    pub fn build(config: GeneratorConfig) -> Result<Self, SynthError> {
        let targets = config.targets;
        Self::sample(config)?.calibrate_biases(&targets)
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn biases(&self) -> [f64; 6] {
        self.head_bias
    }

    pub fn set_biases(&mut self, biases: [f64; 6]) {
        self.head_bias = biases;
    }

    /// Zeroes every head weight vector, leaving heads equal to `logistic(b_j)`.
    pub fn zero_weights(&mut self) {
        for w in &mut self.head_weights {
            w.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn n_users(&self) -> usize {
        self.config.n_users
    }

    pub fn n_items(&self) -> usize {
        self.config.n_items
    }

    pub fn n_categories(&self) -> usize {
        self.config.n_categories
    }

    pub fn category_of(&self, item: u32) -> u32 {
        self.item_category[item as usize]
    }

    /// `a_j · φ(u, v)` for all six heads.
    fn head_scores(&self, user: usize, item: usize) -> [f64; 6] {
        let d = self.config.latent_dim;
        let u = &self.user_latent[user * d..(user + 1) * d];
        let v = &self.item_latent[item * d..(item + 1) * d];
        std::array::from_fn(|j| {
            let w = &self.head_weights[j];
            let mut s = 0.0;
            for k in 0..d {
                s += w[k] * u[k] + w[d + k] * v[k] + w[2 * d + k] * u[k] * v[k];
            }
            s
        })
    }

    fn heads_unchecked(&self, user: usize, item: usize) -> HeadProbabilities<f64> {
        let s = self.head_scores(user, item);
        HeadProbabilities::new(std::array::from_fn(|j| logistic(s[j] + self.head_bias[j])))
    }

    /// Ground-truth y1..y6 for a pair.
    pub fn heads(&self, user: u32, item: u32) -> Result<HeadProbabilities<f64>, SynthError> {
        self.check_ids(user, item)?;
        Ok(self.heads_unchecked(user as usize, item as usize))
    }

    fn check_ids(&self, user: u32, item: u32) -> Result<(), SynthError> {
        if user as usize >= self.config.n_users {
            return Err(SynthError::OutOfRange {
                what: "user",
                id: user,
                size: self.config.n_users,
            });
        }
        if item as usize >= self.config.n_items {
            return Err(SynthError::OutOfRange {
                what: "item",
                id: item,
                size: self.config.n_items,
            });
        }
        Ok(())
    }

    /// Exact composed targets for a pair.
    pub fn ground_truth_targets(
        &self,
        user: u32,
        item: u32,
    ) -> Result<CompositeTargets<f64>, SynthError> {
        let h = self.heads(user, item)?;
        Ok(compose_hm3(&h).expect("logistic heads lie in [0, 1]"))
    }

    fn calibration_scores(&self) -> Vec<[f64; 6]> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(u64::MAX);
        (0..self.config.calibration_pairs)
            .map(|_| {
                let u = rng.random_range(0..self.config.n_users);
                let v = rng.random_range(0..self.config.n_items);
                self.head_scores(u, v)
            })
            .collect()
    }

    /// Monte-Carlo marginal rates `(click, dmi|click, dma|click, purchase|click)` under
    /// the current biases.
    pub fn expected_rates(&self) -> RateTargets {
        rates_from_scores(&self.calibration_scores(), &self.head_bias)
    }

    /// Sets each bias by bisection on the Monte-Carlo rate estimate. Heads are
    /// calibrated in graph order; y5 and y6 move with y3 and y4 at fixed offsets.
    pub fn calibrate_biases(mut self, targets: &RateTargets) -> Result<Self, SynthError> {
        targets.validate()?;
        let scores = self.calibration_scores();
        let macro_offset = self.head_bias[2] - self.head_bias[4];
        let purchase_offset = self.head_bias[3] - self.head_bias[5];

        let steps: [(usize, f64, fn(&RateTargets) -> f64); 4] = [
            (0, targets.click, |r| r.click),
            (1, targets.dmi, |r| r.dmi),
            (2, targets.dma, |r| r.dma),
            (3, targets.purchase, |r| r.purchase),
        ];
        for (head, target, pick) in steps {
            let mut lo = -BISECTION_BRACKET;
            let mut hi = BISECTION_BRACKET;
            let mut bias = self.head_bias;
            let rate_at = |b: f64, bias: &mut [f64; 6]| {
                bias[head] = b;
                match head {
                    2 => bias[4] = b - macro_offset,
                    3 => bias[5] = b - purchase_offset,
                    _ => {}
                }
                pick(&rates_from_scores(&scores, bias))
            };
            let mut achieved = f64::NAN;
            let mut iterations = 0;
            while iterations < BISECTION_ITERATIONS {
                iterations += 1;
                let mid = 0.5 * (lo + hi);
                achieved = rate_at(mid, &mut bias);
                if (achieved - target).abs() <= 1e-9 * target {
                    break;
                }
                if achieved < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            if !((achieved - target).abs() <= CALIBRATION_TOLERANCE * target) {
                return Err(SynthError::Unreachable {
                    head: head + 1,
                    target,
                    achieved,
                    iterations,
                });
            }
            self.head_bias = bias;
        }
        Ok(self)
    }

    /// Samples one impression. The RNG stream is keyed by `impression_id`, so the
    /// result does not depend on generation order.
    pub fn sample_impression(&self, impression_id: u64) -> ImpressionRecord {
        let mut rng = ChaCha8Rng::from_seed(self.record_key);
        rng.set_stream(impression_id);
        let user = rng.random_range(0..self.config.n_users);
        let item = rng.random_range(0..self.config.n_items);
        let y = self.heads_unchecked(user, item).y;
        let mut bern = |p: f64| rng.random::<f64>() < p;

        let click = bern(y[0]);
        let (mut dmi, mut dma, mut purchase) = (false, false, false);
        if click {
            dmi = bern(y[1]);
            dma = bern(if dmi { y[2] } else { y[4] });
            purchase = bern(if dma { y[3] } else { y[5] });
        }
        ImpressionRecord {
            impression_id,
            user_id: user as u32,
            item_id: item as u32,
            category_id: self.item_category[item],
            click,
            dmi,
            dma,
            purchase,
        }
    }

    /// Impressions with ids in `ids`, generated in parallel, returned in id order.
    pub fn generate(&self, ids: std::ops::Range<u64>) -> Vec<ImpressionRecord> {
        ids.into_par_iter()
            .map(|id| self.sample_impression(id))
            .collect()
    }
}

fn rates_from_scores(scores: &[[f64; 6]], bias: &[f64; 6]) -> RateTargets {
    let (mut click, mut dmi, mut dma, mut purchase) = (0.0, 0.0, 0.0, 0.0);
    for s in scores {
        let y: [f64; 6] = std::array::from_fn(|j| logistic(s[j] + bias[j]));
        let pi = y[1] * y[2] + (1.0 - y[1]) * y[4];
        let cvr = y[3] * pi + y[5] * (1.0 - pi);
        click += y[0];
        dmi += y[0] * y[1];
        dma += y[0] * pi;
        purchase += y[0] * cvr;
    }
    RateTargets {
        click: click / scores.len() as f64,
        dmi: dmi / click,
        dma: dma / click,
        purchase: purchase / click,
    }
}

/// Which reachability implication a record breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum LabelViolation {
    #[error("dmi=1 requires click=1")]
    DmiWithoutClick,
    #[error("dma=1 requires click=1")]
    DmaWithoutClick,
    #[error("pay=1 requires click=1")]
    PurchaseWithoutClick,
}

/// One logged impression: categorical features and the four behavior labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImpressionRecord {
    pub impression_id: u64,
    pub user_id: u32,
    pub item_id: u32,
    pub category_id: u32,
    pub click: bool,
    pub dmi: bool,
    pub dma: bool,
    /// Purchase may happen through the O-Ma branch, so it does not imply `dma`.
    pub purchase: bool,
}

impl ImpressionRecord {
    pub fn validate(&self) -> Result<(), LabelViolation> {
        if !self.click {
            if self.dmi {
                return Err(LabelViolation::DmiWithoutClick);
            }
            if self.dma {
                return Err(LabelViolation::DmaWithoutClick);
            }
            if self.purchase {
                return Err(LabelViolation::PurchaseWithoutClick);
            }
        }
        Ok(())
    }

    pub fn features(&self) -> [u32; 3] {
        [self.user_id, self.item_id, self.category_id]
    }

    fn write_line<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            self.impression_id,
            self.user_id,
            self.item_id,
            self.category_id,
            u8::from(self.click),
            u8::from(self.dmi),
            u8::from(self.dma),
            u8::from(self.purchase)
        )
    }

    fn parse_line(line: &str) -> Result<Self, String> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(format!("expected 8 fields, found {}", fields.len()));
        }
        let int = |i: usize| -> Result<u64, String> {
            fields[i]
                .parse::<u64>()
                .map_err(|e| format!("column {}: {e}", i + 1))
        };
        let id32 = |i: usize| -> Result<u32, String> {
            fields[i]
                .parse::<u32>()
                .map_err(|e| format!("column {}: {e}", i + 1))
        };
        let label = |i: usize| -> Result<bool, String> {
            match fields[i] {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(format!("column {}: label must be 0 or 1, got `{other}`", i + 1)),
            }
        };
        Ok(Self {
            impression_id: int(0)?,
            user_id: id32(1)?,
            item_id: id32(2)?,
            category_id: id32(3)?,
            click: label(4)?,
            dmi: label(5)?,
            dma: label(6)?,
            purchase: label(7)?,
        })
    }
}

/// Summary written next to every log.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub record_count: u64,
    pub clicks: u64,
    pub dmi: u64,
    pub dma: u64,
    pub purchases: u64,
    pub seed: Option<u64>,
    pub generator_version: u32,
}

impl DatasetManifest {
    pub fn from_records<'a>(
        records: impl IntoIterator<Item = &'a ImpressionRecord>,
        seed: Option<u64>,
    ) -> Self {
        let mut m = Self {
            record_count: 0,
            clicks: 0,
            dmi: 0,
            dma: 0,
            purchases: 0,
            seed,
            generator_version: GENERATOR_VERSION,
        };
        for r in records {
            m.record_count += 1;
            m.clicks += u64::from(r.click);
            m.dmi += u64::from(r.dmi);
            m.dma += u64::from(r.dma);
            m.purchases += u64::from(r.purchase);
        }
        m
    }

    pub fn click_rate(&self) -> Option<f64> {
        (self.record_count > 0).then(|| self.clicks as f64 / self.record_count as f64)
    }

    pub fn dmi_rate(&self) -> Option<f64> {
        (self.clicks > 0).then(|| self.dmi as f64 / self.clicks as f64)
    }

    pub fn dma_rate(&self) -> Option<f64> {
        (self.clicks > 0).then(|| self.dma as f64 / self.clicks as f64)
    }

    pub fn purchase_rate(&self) -> Option<f64> {
        (self.clicks > 0).then(|| self.purchases as f64 / self.clicks as f64)
    }

    /// Purchases per impression.
    pub fn ctcvr_rate(&self) -> Option<f64> {
        (self.record_count > 0).then(|| self.purchases as f64 / self.record_count as f64)
    }

    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "none".to_string(), |v| v.to_string());
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("generator_version", self.generator_version.to_string());
        kv(
            "seed",
            self.seed.map_or_else(|| "none".to_string(), |v| v.to_string()),
        );
        kv("record_count", self.record_count.to_string());
        kv("clicks", self.clicks.to_string());
        kv("dmi", self.dmi.to_string());
        kv("dma", self.dma.to_string());
        kv("purchases", self.purchases.to_string());
        kv("click_rate", opt(self.click_rate()));
        kv("dmi_rate", opt(self.dmi_rate()));
        kv("dma_rate", opt(self.dma_rate()));
        kv("purchase_rate", opt(self.purchase_rate()));
        s
    }

    /// Parses a manifest and checks that the stored rates agree with the counts.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut map = std::collections::BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| map.get(k).ok_or_else(|| format!("missing key `{k}`"));
        let count = |k: &str| -> Result<u64, String> {
            get(k)?.parse().map_err(|e| format!("`{k}`: {e}"))
        };
        let seed = match get("seed")?.as_str() {
            "none" => None,
            s => Some(s.parse().map_err(|e| format!("`seed`: {e}"))?),
        };
        let m = Self {
            record_count: count("record_count")?,
            clicks: count("clicks")?,
            dmi: count("dmi")?,
            dma: count("dma")?,
            purchases: count("purchases")?,
            seed,
            generator_version: count("generator_version")? as u32,
        };
        for (k, v) in [
            ("click_rate", m.click_rate()),
            ("dmi_rate", m.dmi_rate()),
            ("dma_rate", m.dma_rate()),
            ("purchase_rate", m.purchase_rate()),
        ] {
            let stored = get(k)?;
            let expected = v.map_or_else(|| "none".to_string(), |v| v.to_string());
            if *stored != expected {
                return Err(format!("`{k}` = {stored} disagrees with counts ({expected})"));
            }
        }
        Ok(m)
    }
}

/// Manifest path for a log: `train.csv` → `train.manifest`.
pub fn manifest_path(log: &Path) -> PathBuf {
    log.with_extension("manifest")
}

/// Writes the log and its manifest.
pub fn write_log(
    records: &[ImpressionRecord],
    path: &Path,
    seed: Option<u64>,
) -> Result<DatasetManifest, SynthError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{LOG_HEADER}").map_err(io_err(path))?;
    for r in records {
        r.write_line(&mut w).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;

    let manifest = DatasetManifest::from_records(records, seed);
    let mpath = manifest_path(path);
    std::fs::write(&mpath, manifest.to_text()).map_err(io_err(&mpath))?;
    Ok(manifest)
}

/// Streaming reader over a log file. Every record is checked against the label
/// invariants.
pub struct LogReader {
    path: PathBuf,
    lines: std::io::Lines<BufReader<File>>,
    line_no: usize,
}

impl Iterator for LogReader {
    type Item = Result<ImpressionRecord, SynthError>;

    fn next(&mut self) -> Option<Self::Item> {
        let line = match self.lines.next()? {
            Ok(l) => l,
            Err(e) => return Some(Err(io_err(&self.path)(e))),
        };
        self.line_no += 1;
        let record = match ImpressionRecord::parse_line(line.trim_end()) {
            Ok(r) => r,
            Err(message) => {
                return Some(Err(SynthError::Malformed {
                    path: self.path.clone(),
                    line: self.line_no,
                    message,
                }))
            }
        };
        Some(
            record
                .validate()
                .map(|()| record)
                .map_err(|violation| SynthError::Invariant {
                    path: self.path.clone(),
                    line: self.line_no,
                    violation,
                }),
        )
    }
}

pub fn read_log(path: &Path) -> Result<LogReader, SynthError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .transpose()
        .map_err(io_err(path))?
        .unwrap_or_default();
    if header.trim_end() != LOG_HEADER {
        return Err(SynthError::Malformed {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header `{LOG_HEADER}`"),
        });
    }
    Ok(LogReader {
        path: path.to_path_buf(),
        lines,
        line_no: 1,
    })
}

pub fn read_log_all(path: &Path) -> Result<Vec<ImpressionRecord>, SynthError> {
    read_log(path)?.collect()
}

pub fn read_manifest(log: &Path) -> Result<DatasetManifest, SynthError> {
    let mpath = manifest_path(log);
    let text = std::fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    DatasetManifest::parse(&text).map_err(|message| SynthError::Malformed {
        path: mpath,
        line: 0,
        message,
    })
}
