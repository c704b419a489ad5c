//! Probability calculus over the user sequential behavior graph.
//!
//! The full graph is `impression → click → {D-Mi, O-Mi} → {D-Ma, O-Ma} → purchase`.
//! Every model variant predicts some of the six path-conditional probabilities
//!
//! | slot | edge (HM3)        |
//! |------|-------------------|
//! | y1   | impression → click |
//! | y2   | click → D-Mi       |
//! | y3   | D-Mi → D-Ma        |
//! | y4   | D-Ma → purchase    |
//! | y5   | O-Mi → D-Ma        |
//! | y6   | O-Ma → purchase    |
//!
//! and composes them into entire-space targets. The reversed variant swaps the micro
//! and macro levels, the macro-only variant drops the micro level, and the two-head
//! variants model `impression → click → purchase` directly.
//!
//! All functions here are pure. [`enumerate_paths_oracle`] walks every root-to-leaf
//! path of a variant's behavior tree and serves as an independent check on the
//! closed forms.

use std::fmt;
use std::str::FromStr;

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("head probability y{slot} = {value} is outside [0, 1]")]
    Domain { slot: usize, value: f64 },
    #[error("unknown model variant `{0}`")]
    UnknownVariant(String),
}

/// Model variant, each with its own behavior graph and head layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Two independent networks: CTR on impressions, CVR on clicks only.
    Base,
    /// Shared embeddings, CTR and CVR heads, trained on CTR and CTCVR.
    Esmm,
    /// Macro-only graph: click → {D-Ma, O-Ma} → purchase.
    Esm2,
    /// Full hierarchical graph, micro level before macro level.
    Hm3,
    /// Same network as `Hm3` with the macro level before the micro level.
    Hm3r,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Base,
        Variant::Esmm,
        Variant::Esm2,
        Variant::Hm3,
        Variant::Hm3r,
    ];

    /// Heads per network. `Base` has two single-head networks.
    pub fn head_count(self) -> usize {
        match self {
            Variant::Base => 1,
            Variant::Esmm => 2,
            Variant::Esm2 => 4,
            Variant::Hm3 | Variant::Hm3r => 6,
        }
    }

    /// Zero-based `HeadProbabilities` slot fed by each head, in head order.
    /// For `Base` the two entries belong to the CTR and CVR networks respectively.
    pub fn head_slots(self) -> &'static [usize] {
        match self {
            Variant::Base | Variant::Esmm => &[0, 3],
            Variant::Esm2 => &[0, 2, 3, 5],
            Variant::Hm3 | Variant::Hm3r => &[0, 1, 2, 3, 4, 5],
        }
    }

    /// Supervised tasks, in the order their losses are summed.
    pub fn tasks(self) -> &'static [Task] {
        match self {
            Variant::Base => &[Task::Ctr, Task::Cvr],
            Variant::Esmm => &[Task::Ctr, Task::Ctcvr],
            Variant::Esm2 => &[Task::Ctr, Task::Dma, Task::Ctcvr],
            Variant::Hm3 | Variant::Hm3r => &[Task::Ctr, Task::Dmi, Task::Dma, Task::Ctcvr],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Esmm => "esmm",
            Variant::Esm2 => "esm2",
            Variant::Hm3 => "hm3",
            Variant::Hm3r => "hm3r",
        }
    }

    /// Display label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Base => "BASE",
            Variant::Esmm => "ESMM",
            Variant::Esm2 => "ESM2",
            Variant::Hm3 => "HM3",
            Variant::Hm3r => "HM3-R",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(Variant::Base),
            "esmm" => Ok(Variant::Esmm),
            "esm2" => Ok(Variant::Esm2),
            "hm3" => Ok(Variant::Hm3),
            "hm3r" | "hm3-r" => Ok(Variant::Hm3r),
            _ => Err(GraphError::UnknownVariant(s.to_string())),
        }
    }
}

/// A supervised binary task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// impression → click
    Ctr,
    /// impression → D-Mi
    Dmi,
    /// impression → D-Ma
    Dma,
    /// impression → purchase
    Ctcvr,
    /// click → purchase, only trained directly by `Base`
    Cvr,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Ctr => "ctr",
            Task::Dmi => "dmi",
            Task::Dma => "dma",
            Task::Ctcvr => "ctcvr",
            Task::Cvr => "cvr",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The six path-conditional probabilities for one impression.
///
/// `y[0]..y[5]` hold y1..y6. Slots a variant does not use are ignored by its
/// composition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadProbabilities<T> {
    pub y: [T; 6],
}

impl<T: Float> HeadProbabilities<T> {
    pub fn new(y: [T; 6]) -> Self {
        Self { y }
    }

    /// Every slot set to `value`.
    pub fn splat(value: T) -> Self {
        Self { y: [value; 6] }
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        for (i, &v) in self.y.iter().enumerate() {
            // NaN fails both comparisons
            if !(v >= T::zero() && v <= T::one()) {
                return Err(GraphError::Domain {
                    slot: i + 1,
                    value: v.to_f64().unwrap_or(f64::NAN),
                });
            }
        }
        Ok(())
    }
}

/// Composed targets. `p_dmi`/`p_dma` are `None` for variants whose graph lacks
/// that node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositeTargets<T> {
    pub p_ctr: T,
    pub p_dmi: Option<T>,
    pub p_dma: Option<T>,
    pub p_ctcvr: T,
    /// Conditional on click.
    pub p_cvr: T,
}

impl<T: Copy> CompositeTargets<T> {
    /// Prediction for a task; `None` when the variant does not model it.
    pub fn get(&self, task: Task) -> Option<T> {
        match task {
            Task::Ctr => Some(self.p_ctr),
            Task::Dmi => self.p_dmi,
            Task::Dma => self.p_dma,
            Task::Ctcvr => Some(self.p_ctcvr),
            Task::Cvr => Some(self.p_cvr),
        }
    }
}

impl<T: Float> CompositeTargets<T> {
    pub fn to_f64(&self) -> CompositeTargets<f64> {
        let c = |v: T| v.to_f64().unwrap_or(f64::NAN);
        CompositeTargets {
            p_ctr: c(self.p_ctr),
            p_dmi: self.p_dmi.map(c),
            p_dma: self.p_dma.map(c),
            p_ctcvr: c(self.p_ctcvr),
            p_cvr: c(self.p_cvr),
        }
    }
}

/// Two-level mixture shared by the hierarchical variants.
///
/// Returns `(first-level rate, second-level rate, p_cvr)` for a clicked item, where
/// the second-level rate is `π = a·b + (1−a)·c` and `p_cvr = d·π + e·ρ` with
/// `ρ = a·(1−b) + (1−a)·(1−c)`.
#[inline]
fn two_level<T: Float>(y: &[T; 6]) -> (T, T, T) {
    let one = T::one();
    let (y2, y3, y4, y5, y6) = (y[1], y[2], y[3], y[4], y[5]);
    let pi = y2 * y3 + (one - y2) * y5;
    let rho = y2 * (one - y3) + (one - y2) * (one - y5);
    let cvr = y4 * pi + y6 * rho;
    (y2, pi, cvr)
}

/// Micro level first: `p_dmi = y1·y2`, `p_dma = y1·(y2·y3 + (1−y2)·y5)`.
pub fn compose_hm3<T: Float>(h: &HeadProbabilities<T>) -> Result<CompositeTargets<T>, GraphError> {
    h.validate()?;
    let y1 = h.y[0];
    let (first, second, cvr) = two_level(&h.y);
    Ok(CompositeTargets {
        p_ctr: y1,
        p_dmi: Some(y1 * first),
        p_dma: Some(y1 * second),
        p_ctcvr: y1 * cvr,
        p_cvr: cvr,
    })
}

/// Macro level first. Slots are reinterpreted as y2 = P(D-Ma | click),
/// y3 = P(D-Mi | D-Ma), y4 = P(purchase | D-Mi), y5 = P(D-Mi | O-Ma),
/// y6 = P(purchase | O-Mi).
pub fn compose_hm3_reversed<T: Float>(
    h: &HeadProbabilities<T>,
) -> Result<CompositeTargets<T>, GraphError> {
    h.validate()?;
    let y1 = h.y[0];
    let (first, second, cvr) = two_level(&h.y);
    Ok(CompositeTargets {
        p_ctr: y1,
        p_dmi: Some(y1 * second),
        p_dma: Some(y1 * first),
        p_ctcvr: y1 * cvr,
        p_cvr: cvr,
    })
}

/// CTR head in y1, direct CVR head in y4.
pub fn compose_esmm<T: Float>(h: &HeadProbabilities<T>) -> Result<CompositeTargets<T>, GraphError> {
    h.validate()?;
    let (y1, y4) = (h.y[0], h.y[3]);
    Ok(CompositeTargets {
        p_ctr: y1,
        p_dmi: None,
        p_dma: None,
        p_ctcvr: y1 * y4,
        p_cvr: y4,
    })
}

/// Macro-only graph: y3 = P(D-Ma | click), y4 = P(purchase | D-Ma),
/// y6 = P(purchase | O-Ma).
pub fn compose_esm2<T: Float>(h: &HeadProbabilities<T>) -> Result<CompositeTargets<T>, GraphError> {
    h.validate()?;
    let one = T::one();
    let (y1, y3, y4, y6) = (h.y[0], h.y[2], h.y[3], h.y[5]);
    let cvr = y3 * y4 + (one - y3) * y6;
    Ok(CompositeTargets {
        p_ctr: y1,
        p_dmi: None,
        p_dma: Some(y1 * y3),
        p_ctcvr: y1 * cvr,
        p_cvr: cvr,
    })
}

/// Dispatch on variant. `Base` composes its two networks like `Esmm`.
pub fn compose<T: Float>(
    variant: Variant,
    h: &HeadProbabilities<T>,
) -> Result<CompositeTargets<T>, GraphError> {
    match variant {
        Variant::Hm3 => compose_hm3(h),
        Variant::Hm3r => compose_hm3_reversed(h),
        Variant::Esm2 => compose_esm2(h),
        Variant::Esmm | Variant::Base => compose_esmm(h),
    }
}

/// Partial derivatives of every composite target with respect to y1..y6.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetGradients<T> {
    pub ctr: [T; 6],
    pub dmi: Option<[T; 6]>,
    pub dma: Option<[T; 6]>,
    pub ctcvr: [T; 6],
    pub cvr: [T; 6],
}

impl<T: Copy> TargetGradients<T> {
    pub fn get(&self, task: Task) -> Option<[T; 6]> {
        match task {
            Task::Ctr => Some(self.ctr),
            Task::Dmi => self.dmi,
            Task::Dma => self.dma,
            Task::Ctcvr => Some(self.ctcvr),
            Task::Cvr => Some(self.cvr),
        }
    }
}

pub fn composition_gradients<T: Float>(
    h: &HeadProbabilities<T>,
    variant: Variant,
) -> Result<TargetGradients<T>, GraphError> {
    h.validate()?;
    let zero = T::zero();
    let one = T::one();
    let y = h.y;
    let y1 = y[0];
    let ctr = [one, zero, zero, zero, zero, zero];
    let scale = |g: [T; 6], s: T| g.map(|v| v * s);

    match variant {
        Variant::Hm3 | Variant::Hm3r => {
            let (y2, y3, y4, y5, y6) = (y[1], y[2], y[3], y[4], y[5]);
            let (_, pi, cvr) = two_level(&y);
            let rho = y2 * (one - y3) + (one - y2) * (one - y5);
            let first = [y2, y1, zero, zero, zero, zero];
            let second = [pi, y1 * (y3 - y5), y1 * y2, zero, y1 * (one - y2), zero];
            let d46 = y4 - y6;
            let dcvr = [zero, d46 * (y3 - y5), y2 * d46, pi, (one - y2) * d46, rho];
            let mut dctcvr = scale(dcvr, y1);
            dctcvr[0] = cvr;
            let (dmi, dma) = if variant == Variant::Hm3 {
                (first, second)
            } else {
                (second, first)
            };
            Ok(TargetGradients {
                ctr,
                dmi: Some(dmi),
                dma: Some(dma),
                ctcvr: dctcvr,
                cvr: dcvr,
            })
        }
        Variant::Esm2 => {
            let (y3, y4, y6) = (y[2], y[3], y[5]);
            let cvr = y3 * y4 + (one - y3) * y6;
            let dcvr = [zero, zero, y4 - y6, y3, zero, one - y3];
            let mut dctcvr = scale(dcvr, y1);
            dctcvr[0] = cvr;
            Ok(TargetGradients {
                ctr,
                dmi: None,
                dma: Some([y3, zero, y1, zero, zero, zero]),
                ctcvr: dctcvr,
                cvr: dcvr,
            })
        }
        Variant::Esmm | Variant::Base => {
            let y4 = y[3];
            Ok(TargetGradients {
                ctr,
                dmi: None,
                dma: None,
                ctcvr: [y4, zero, zero, y1, zero, zero],
                cvr: [zero, zero, zero, one, zero, zero],
            })
        }
    }
}

/// What a stage of the post-click tree records when its event happens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StageEvent {
    Dmi,
    Dma,
    Purchase,
}

/// One binary post-click stage. The probability of the "deterministic" branch
/// comes from `slot_after_d` when the previous stage took its deterministic branch
/// and from `slot_after_o` otherwise.
#[derive(Debug, Clone, Copy)]
struct Stage {
    event: StageEvent,
    slot_after_d: usize,
    slot_after_o: usize,
}

fn post_click_stages(variant: Variant) -> Vec<Stage> {
    let st = |event, d, o| Stage {
        event,
        slot_after_d: d,
        slot_after_o: o,
    };
    match variant {
        Variant::Hm3 => vec![
            st(StageEvent::Dmi, 1, 1),
            st(StageEvent::Dma, 2, 4),
            st(StageEvent::Purchase, 3, 5),
        ],
        Variant::Hm3r => vec![
            st(StageEvent::Dma, 1, 1),
            st(StageEvent::Dmi, 2, 4),
            st(StageEvent::Purchase, 3, 5),
        ],
        Variant::Esm2 => vec![st(StageEvent::Dma, 2, 2), st(StageEvent::Purchase, 3, 5)],
        Variant::Esmm | Variant::Base => vec![st(StageEvent::Purchase, 3, 3)],
    }
}

#[derive(Default)]
struct PathMass {
    dmi: f64,
    dma: f64,
    purchase: f64,
}

fn walk(
    y: &[f64; 6],
    stages: &[Stage],
    prev_d: bool,
    mass: f64,
    reached: (bool, bool, bool),
    out: &mut PathMass,
) {
    let Some((stage, rest)) = stages.split_first() else {
        let (dmi, dma, purchase) = reached;
        if dmi {
            out.dmi += mass;
        }
        if dma {
            out.dma += mass;
        }
        if purchase {
            out.purchase += mass;
        }
        return;
    };
    let p = if prev_d {
        y[stage.slot_after_d]
    } else {
        y[stage.slot_after_o]
    };
    for taken in [true, false] {
        let edge = if taken { p } else { 1.0 - p };
        let mut r = reached;
        if taken {
            match stage.event {
                StageEvent::Dmi => r.0 = true,
                StageEvent::Dma => r.1 = true,
                StageEvent::Purchase => r.2 = true,
            }
        }
        walk(y, rest, taken, mass * edge, r, out);
    }
}

/// Brute-force targets: sums edge-probability products over every root-to-leaf
/// path of the variant's behavior tree.
pub fn enumerate_paths_oracle(
    h: &HeadProbabilities<f64>,
    variant: Variant,
) -> Result<CompositeTargets<f64>, GraphError> {
    h.validate()?;
    let stages = post_click_stages(variant);
    let has = |e: StageEvent| stages.iter().any(|s| s.event == e);

    // Entire space: impression branches into click / no click; nothing downstream
    // of "no click" is reachable.
    let mut space = PathMass::default();
    let mut p_ctr = 0.0;
    for clicked in [true, false] {
        let edge = if clicked { h.y[0] } else { 1.0 - h.y[0] };
        if clicked {
            p_ctr += edge;
            walk(&h.y, &stages, true, edge, (false, false, false), &mut space);
        }
    }

    let mut post_click = PathMass::default();
    walk(&h.y, &stages, true, 1.0, (false, false, false), &mut post_click);

    Ok(CompositeTargets {
        p_ctr,
        p_dmi: has(StageEvent::Dmi).then_some(space.dmi),
        p_dma: has(StageEvent::Dma).then_some(space.dma),
        p_ctcvr: space.purchase,
        p_cvr: post_click.purchase,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EX: [f64; 6] = [0.5, 0.4, 0.6, 0.3, 0.2, 0.1];

    fn random_heads(rng: &mut ChaCha8Rng) -> HeadProbabilities<f64> {
        HeadProbabilities::new(std::array::from_fn(|_| rng.random::<f64>()))
    }

    #[test]
    fn hm3_worked_example() {
        let t = compose_hm3(&HeadProbabilities::new(EX)).unwrap();
        assert_abs_diff_eq!(t.p_dmi.unwrap(), 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(t.p_dma.unwrap(), 0.18, epsilon = 1e-15);
        assert_abs_diff_eq!(t.p_cvr, 0.172, epsilon = 1e-15);
        assert_abs_diff_eq!(t.p_ctcvr, 0.086, epsilon = 1e-15);
        let o = enumerate_paths_oracle(&HeadProbabilities::new(EX), Variant::Hm3).unwrap();
        assert_abs_diff_eq!(o.p_cvr, 0.172, epsilon = 1e-15);
        assert_abs_diff_eq!(o.p_dma.unwrap(), 0.18, epsilon = 1e-15);
    }

    #[test]
    fn hm3_zero_click_zeroes_entire_space() {
        let t = compose_hm3(&HeadProbabilities::new([0.0, 0.4, 0.6, 0.3, 0.2, 0.1])).unwrap();
        assert_eq!(t.p_ctr, 0.0);
        assert_eq!(t.p_dmi, Some(0.0));
        assert_eq!(t.p_dma, Some(0.0));
        assert_eq!(t.p_ctcvr, 0.0);
        assert_abs_diff_eq!(t.p_cvr, 0.172, epsilon = 1e-15);
    }

    #[test]
    fn deterministic_paths() {
        let h = HeadProbabilities::new([1.0, 1.0, 1.0, 1.0, 0.37, 0.81]);
        let t = compose_hm3(&h).unwrap();
        assert_eq!((t.p_cvr, t.p_ctcvr), (1.0, 1.0));
        let r = compose_hm3_reversed(&h).unwrap();
        assert_eq!((r.p_dma, r.p_dmi, r.p_ctcvr), (Some(1.0), Some(1.0), 1.0));
        let e = compose_esm2(&HeadProbabilities::new([1.0, 0.0, 1.0, 1.0, 0.0, 0.42])).unwrap();
        assert_eq!(e.p_ctcvr, 1.0);
    }

    #[test]
    fn reversed_worked_example() {
        let t = compose_hm3_reversed(&HeadProbabilities::new(EX)).unwrap();
        assert_abs_diff_eq!(t.p_dma.unwrap(), 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(t.p_dmi.unwrap(), 0.18, epsilon = 1e-15);
        assert_abs_diff_eq!(t.p_cvr, 0.172, epsilon = 1e-15);

        let h = HeadProbabilities::new([0.7, 0.0, 0.6, 0.3, 0.2, 0.1]);
        let t = compose_hm3_reversed(&h).unwrap();
        assert_eq!(t.p_dma, Some(0.0));
        assert_abs_diff_eq!(t.p_dmi.unwrap(), 0.7 * 0.2, epsilon = 1e-15);
    }

    #[test]
    fn esmm_products() {
        let h = |a, b| HeadProbabilities::new([a, 0.0, 0.0, b, 0.0, 0.0]);
        assert_abs_diff_eq!(compose_esmm(&h(0.5, 0.2)).unwrap().p_ctcvr, 0.1, epsilon = 1e-16);
        assert_eq!(compose_esmm(&h(1.0, 1.0)).unwrap().p_ctcvr, 1.0);
        // click and purchase ratios from the SR-S row of the dataset statistics
        let ctr = 146.0 / 4900.0;
        let cvr = 5.0 / 146.0;
        assert_abs_diff_eq!(ctr, 0.0298, epsilon = 5e-5);
        assert_abs_diff_eq!(cvr, 0.0342, epsilon = 5e-5);
        let t = compose_esmm(&h(0.0298, 0.0342)).unwrap();
        assert_abs_diff_eq!(t.p_ctcvr, 0.00102, epsilon = 5e-6);
        assert!(t.p_ctcvr < 0.001 + 5e-5);
        assert_eq!(t.p_dmi, None);
        assert_eq!(t.p_dma, None);
    }

    #[test]
    fn esm2_matches_hm3_at_mixture() {
        let t = compose_esm2(&HeadProbabilities::new([0.5, 0.0, 0.36, 0.3, 0.0, 0.1])).unwrap();
        assert_abs_diff_eq!(t.p_cvr, 0.172, epsilon = 1e-15);
        assert_abs_diff_eq!(t.p_ctcvr, 0.086, epsilon = 1e-15);
        assert_eq!(t.p_dmi, None);

        let t = compose_esm2(&HeadProbabilities::new([0.5, 0.0, 0.0, 0.3, 0.0, 0.1])).unwrap();
        assert_eq!(t.p_cvr, 0.1);
    }

    #[test]
    fn rejects_out_of_domain() {
        for bad in [-0.1, 1.0 + 1e-12, f64::NAN, f64::INFINITY] {
            let mut y = EX;
            y[4] = bad;
            let h = HeadProbabilities::new(y);
            for v in Variant::ALL {
                assert!(matches!(compose(v, &h), Err(GraphError::Domain { slot: 5, .. })));
                assert!(enumerate_paths_oracle(&h, v).is_err());
                assert!(composition_gradients(&h, v).is_err());
            }
        }
    }

    #[test]
    fn oracle_agrees_on_random_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let h = random_heads(&mut rng);
            for v in Variant::ALL {
                let a = compose(v, &h).unwrap();
                let b = enumerate_paths_oracle(&h, v).unwrap();
                assert!((a.p_ctr - b.p_ctr).abs() <= 1e-12);
                assert!((a.p_cvr - b.p_cvr).abs() <= 1e-12);
                assert!((a.p_ctcvr - b.p_ctcvr).abs() <= 1e-12);
                assert_eq!(a.p_dmi.is_some(), b.p_dmi.is_some());
                assert_eq!(a.p_dma.is_some(), b.p_dma.is_some());
                if let (Some(x), Some(y)) = (a.p_dma, b.p_dma) {
                    assert!((x - y).abs() <= 1e-12);
                }
                if let (Some(x), Some(y)) = (a.p_dmi, b.p_dmi) {
                    assert!((x - y).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn degenerate_heads_give_binary_targets() {
        for bits in 0u32..64 {
            let y = std::array::from_fn(|i| f64::from((bits >> i) & 1));
            let h = HeadProbabilities::new(y);
            for v in Variant::ALL {
                let t = enumerate_paths_oracle(&h, v).unwrap();
                for p in [Some(t.p_ctr), t.p_dmi, t.p_dma, Some(t.p_ctcvr), Some(t.p_cvr)]
                    .into_iter()
                    .flatten()
                {
                    assert!(p == 0.0 || p == 1.0, "{v} {y:?} -> {p}");
                }
            }
        }
    }

    #[test]
    fn gradient_spot_values() {
        let h = HeadProbabilities::new(EX);
        let g = composition_gradients(&h, Variant::Hm3).unwrap();
        let t = compose_hm3(&h).unwrap();
        assert_eq!(g.ctcvr[0], t.p_cvr);
        assert_abs_diff_eq!(g.cvr[3], 0.36, epsilon = 1e-15);

        let e = HeadProbabilities::new([0.3, 0.0, 0.0, 0.8, 0.0, 0.0]);
        let g = composition_gradients(&e, Variant::Esmm).unwrap();
        assert_eq!(g.ctcvr[3], 0.3);
    }

    #[test]
    fn gradients_match_central_differences() {
        let step = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            // keep every coordinate a step away from the boundary
            let y: [f64; 6] = std::array::from_fn(|_| 0.01 + 0.98 * rng.random::<f64>());
            let h = HeadProbabilities::new(y);
            for v in Variant::ALL {
                let g = composition_gradients(&h, v).unwrap();
                for task in [Task::Ctr, Task::Dmi, Task::Dma, Task::Ctcvr, Task::Cvr] {
                    let Some(grad) = g.get(task) else { continue };
                    for j in 0..6 {
                        let mut up = y;
                        let mut dn = y;
                        up[j] += step;
                        dn[j] -= step;
                        let f = |y| compose(v, &HeadProbabilities::new(y)).unwrap().get(task).unwrap();
                        let numeric = (f(up) - f(dn)) / (2.0 * step);
                        let denom = grad[j].abs().max(numeric.abs()).max(1e-4);
                        assert!(
                            (grad[j] - numeric).abs() / denom < 1e-6,
                            "{v} {task} y{}: {} vs {numeric}",
                            j + 1,
                            grad[j]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn variant_parsing() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(v.head_slots().len(), if v == Variant::Base { 2 } else { v.head_count() });
        }
        assert_eq!("HM3-R".parse::<Variant>().unwrap(), Variant::Hm3r);
        assert!("gmcm".parse::<Variant>().is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn heads() -> impl Strategy<Value = HeadProbabilities<f64>> {
            prop::array::uniform6(0.0f64..=1.0).prop_map(HeadProbabilities::new)
        }

        proptest! {
            #[test]
            fn invariants_hold(h in heads()) {
                for v in Variant::ALL {
                    let t = compose(v, &h).unwrap();
                    // bit-exact factorization under the fixed evaluation order
                    prop_assert_eq!(t.p_ctcvr, t.p_ctr * t.p_cvr);
                    prop_assert!(t.p_ctcvr <= t.p_ctr);
                    for p in [Some(t.p_ctr), t.p_dmi, t.p_dma, Some(t.p_ctcvr), Some(t.p_cvr)].into_iter().flatten() {
                        prop_assert!((0.0..=1.0).contains(&p));
                    }
                    if let Some(d) = t.p_dmi { prop_assert!(d <= t.p_ctr); }
                    if let Some(d) = t.p_dma {
                        prop_assert!(d <= t.p_ctr);
                        prop_assert!(t.p_ctcvr <= d + (t.p_ctr - d) + 1e-15);
                    }
                    let (lo, hi) = match v {
                        Variant::Esmm | Variant::Base => (h.y[3], h.y[3]),
                        _ => (h.y[3].min(h.y[5]), h.y[3].max(h.y[5])),
                    };
                    prop_assert!(t.p_cvr >= lo - 1e-15 && t.p_cvr <= hi + 1e-15);
                    if t.p_ctr > 0.0 {
                        let ratio = t.p_ctcvr / t.p_ctr;
                        prop_assert!((ratio - t.p_cvr).abs() <= t.p_cvr * f64::EPSILON);
                    }
                }
            }

            #[test]
            fn esm2_reproduces_hm3_cvr(h in heads()) {
                let hm3 = compose_hm3(&h).unwrap();
                let pi = h.y[1] * h.y[2] + (1.0 - h.y[1]) * h.y[4];
                let mut y = h.y;
                y[2] = pi;
                let esm2 = compose_esm2(&HeadProbabilities::new(y)).unwrap();
                prop_assert!((esm2.p_cvr - hm3.p_cvr).abs() <= 4.0 * f64::EPSILON);
            }
        }
    }
}
