//! Synthetic model outputs and expert pools.
//!
//! Samples are i.i.d., so the generated tables are exchangeable and conformal
//! coverage holds on them. Model confusions can be steered into class
//! blocks, so that two-label prediction sets fall inside the blocks where
//! specialist experts are strong.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::conformal::ProbVector;
use crate::dataio::{AnnotationStore, ProbabilityRow, ProbabilityTable};
use crate::error::{Error, Result};
use crate::experts::ExpertRecord;
use crate::ids::ExpertId;

/// Upper clamp for the model's target accuracy.
pub const MAX_MODEL_ACCURACY: f64 = 1.0 - 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ExpertKind {
    Generalist {
        accuracy: f64,
    },
    /// Accuracy `inside` on true labels in `block`, `outside` elsewhere.
    Specialist {
        block: Vec<usize>,
        inside: f64,
        outside: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: ExpertKind,
    /// Fraction of samples this expert annotates.
    #[serde(default = "one")]
    pub coverage: f64,
    #[serde(default = "one")]
    pub cost: f64,
}

fn one() -> f64 {
    1.0
}

impl ExpertSpec {
    pub fn generalist(id: &str, accuracy: f64) -> Self {
        ExpertSpec {
            id: id.into(),
            kind: ExpertKind::Generalist { accuracy },
            coverage: 1.0,
            cost: 1.0,
        }
    }

    pub fn specialist(id: &str, block: Vec<usize>, inside: f64, outside: f64) -> Self {
        ExpertSpec {
            id: id.into(),
            kind: ExpertKind::Specialist {
                block,
                inside,
                outside,
            },
            coverage: 1.0,
            cost: 1.0,
        }
    }

    pub fn with_coverage(mut self, coverage: f64) -> Self {
        self.coverage = coverage;
        self
    }

    pub fn with_cost(mut self, cost: f64) -> Self {
        self.cost = cost;
        self
    }

    fn validate(&self, classes: usize) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!(
                    "expert `{}`: {name} {v} is outside [0, 1]",
                    self.id
                )))
            }
        };
        match &self.kind {
            ExpertKind::Generalist { accuracy } => unit("accuracy", *accuracy)?,
            ExpertKind::Specialist {
                block,
                inside,
                outside,
            } => {
                unit("inside accuracy", *inside)?;
                unit("outside accuracy", *outside)?;
                if block.is_empty() {
                    return Err(Error::InvalidParameter(format!(
                        "expert `{}`: empty specialist block",
                        self.id
                    )));
                }
                if let Some(c) = block.iter().find(|&&c| c >= classes) {
                    return Err(Error::LabelOutOfRange { label: *c, classes });
                }
            }
        }
        if !(self.coverage > 0.0 && self.coverage <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "expert `{}`: coverage {} is outside (0, 1]",
                self.id, self.coverage
            )));
        }
        if !(self.cost.is_finite() && self.cost >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "expert `{}`: invalid cost {}",
                self.id, self.cost
            )));
        }
        Ok(())
    }

    /// Probability of a correct answer on a sample of class `truth`.
    pub fn accuracy_on(&self, truth: usize) -> f64 {
        match &self.kind {
            ExpertKind::Generalist { accuracy } => *accuracy,
            ExpertKind::Specialist {
                block,
                inside,
                outside,
            } => {
                if block.contains(&truth) {
                    *inside
                } else {
                    *outside
                }
            }
        }
    }
}

/// Expected accuracy of `spec` under uniformly distributed truths.
pub fn theoretical_expert_accuracy(spec: &ExpertSpec, classes: usize) -> f64 {
    match &spec.kind {
        ExpertKind::Generalist { accuracy } => *accuracy,
        ExpertKind::Specialist {
            block,
            inside,
            outside,
        } => {
            let k = block
                .iter()
                .filter(|&&c| c < classes)
                .collect::<std::collections::BTreeSet<_>>()
                .len() as f64;
            (k * inside + (classes as f64 - k) * outside) / classes as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: usize,
    pub n: usize,
    /// Probability that the argmax is the true class; clamped to `1 - 1e-9`.
    pub model_target_accuracy: f64,
    /// Gamma shape of the split of the off-top mass; small values concentrate it.
    #[serde(default = "default_sharpness")]
    pub confusion_sharpness: f64,
    /// Disjoint groups of mutually confusable classes.
    #[serde(default)]
    pub blocks: Vec<Vec<usize>>,
    /// Share of the off-top mass placed outside the truth's block.
    #[serde(default = "default_leak")]
    pub leak: f64,
    pub experts: Vec<ExpertSpec>,
    #[serde(default)]
    pub seed: u64,
}

fn default_sharpness() -> f64 {
    0.5
}

fn default_leak() -> f64 {
    0.05
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.n < self.classes {
            return Err(Error::InvalidParameter(format!(
                "n = {} is below the class count {}",
                self.n, self.classes
            )));
        }
        let chance = 1.0 / self.classes as f64;
        if !(self.model_target_accuracy > chance && self.model_target_accuracy <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "model_target_accuracy {} must lie in (1/C, 1]",
                self.model_target_accuracy
            )));
        }
        if !(self.confusion_sharpness.is_finite() && self.confusion_sharpness > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "confusion_sharpness must be positive, got {}",
                self.confusion_sharpness
            )));
        }
        if !(0.0..=1.0).contains(&self.leak) {
            return Err(Error::InvalidParameter(format!(
                "leak {} is outside [0, 1]",
                self.leak
            )));
        }
        let mut seen = vec![false; self.classes];
        for block in &self.blocks {
            for &c in block {
                if c >= self.classes {
                    return Err(Error::LabelOutOfRange {
                        label: c,
                        classes: self.classes,
                    });
                }
                if std::mem::replace(&mut seen[c], true) {
                    return Err(Error::InvalidParameter(format!(
                        "class {c} appears in two confusion blocks"
                    )));
                }
            }
        }
        if self.experts.is_empty() {
            return Err(Error::Empty("expert specs"));
        }
        let mut ids = std::collections::HashSet::new();
        for e in &self.experts {
            e.validate(self.classes)?;
            if !ids.insert(e.id.as_str()) {
                return Err(Error::InvalidParameter(format!(
                    "duplicate expert id `{}`",
                    e.id
                )));
            }
        }
        Ok(())
    }

    /// Per-expert costs keyed by id.
    pub fn costs(&self) -> BTreeMap<ExpertId, f64> {
        self.experts
            .iter()
            .map(|e| (ExpertId::from(e.id.as_str()), e.cost))
            .collect()
    }
}

/// Classes `c` is confused with: its block mates, or every other class.
fn confusables(classes: usize, blocks: &[Vec<usize>], c: usize) -> Vec<usize> {
    blocks
        .iter()
        .find(|b| b.contains(&c) && b.len() > 1)
        .map(|b| b.iter().copied().filter(|&o| o != c).collect())
        .unwrap_or_else(|| (0..classes).filter(|&o| o != c).collect())
}

/// Splits `mass` over `classes` with Gamma shares; `first` (if any) gets the largest.
fn spread(
    rng: &mut ChaCha8Rng,
    gamma: &Gamma<f64>,
    p: &mut [f64],
    classes: &[usize],
    first: Option<usize>,
    mass: f64,
) -> bool {
    if classes.is_empty() {
        return true;
    }
    let mut shares: Vec<f64> = classes.iter().map(|_| gamma.sample(rng)).collect();
    let total: f64 = shares.iter().sum();
    if !(total > 0.0) {
        return false;
    }
    shares.sort_by(|a, b| b.total_cmp(a));
    let mut rest: Vec<usize> = classes
        .iter()
        .copied()
        .filter(|&c| Some(c) != first)
        .collect();
    rest.shuffle(rng);
    let order = first.into_iter().chain(rest);
    for (c, share) in order.zip(shares) {
        p[c] = share / total * mass;
    }
    true
}

/// Probability vector with `top` as the strict argmax and `partner` as the
/// runner-up. `group` holds the classes confusable with the truth; all but
/// `leak` of the off-top mass stays inside it.
fn draw_probs(
    rng: &mut ChaCha8Rng,
    classes: usize,
    top: usize,
    partner: usize,
    group: &[usize],
    leak: f64,
    gamma: &Gamma<f64>,
) -> Vec<f64> {
    let inside: Vec<usize> = group.iter().copied().filter(|&c| c != top).collect();
    let outside: Vec<usize> = (0..classes)
        .filter(|c| *c != top && !inside.contains(c))
        .collect();
    let leak = if outside.is_empty() { 0.0 } else { leak };
    loop {
        let mass: f64 = rng.random_range(0.3..1.0);
        let rest = 1.0 - mass;
        let mut p = vec![0.0; classes];
        p[top] = mass;
        if !spread(
            rng,
            gamma,
            &mut p,
            &inside,
            Some(partner),
            rest * (1.0 - leak),
        ) || !spread(rng, gamma, &mut p, &outside, None, rest * leak)
        {
            continue;
        }
        let sum: f64 = p.iter().sum();
        for v in &mut p {
            *v /= sum;
        }
        if p.iter().enumerate().all(|(c, &v)| c == top || v < p[top]) {
            return p;
        }
    }
}

/// Generates a probability table and an annotation store from `cfg`.
pub fn gen_dataset(cfg: &SynthConfig) -> Result<(ProbabilityTable, AnnotationStore)> {
    cfg.validate()?;
    let classes = cfg.classes;
    let accuracy = cfg.model_target_accuracy.min(MAX_MODEL_ACCURACY);
    let gamma = Gamma::new(cfg.confusion_sharpness, 1.0)
        .map_err(|e| Error::InvalidParameter(format!("confusion_sharpness: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let width = (cfg.n - 1).to_string().len();

    let mut rows = Vec::with_capacity(cfg.n);
    let mut records = Vec::new();
    for i in 0..cfg.n {
        let truth = rng.random_range(0..classes);
        let mates = confusables(classes, &cfg.blocks, truth);
        let (top, partner) = if rng.random_bool(accuracy) {
            (
                truth,
                *mates.choose(&mut rng).expect("at least two classes"),
            )
        } else {
            (
                *mates.choose(&mut rng).expect("at least two classes"),
                truth,
            )
        };
        let mut group = mates.clone();
        group.push(truth);
        let probs = draw_probs(&mut rng, classes, top, partner, &group, cfg.leak, &gamma);
        let sample_id = format!("s{i:0width$}");

        let mut covered: Vec<bool>;
        loop {
            covered = cfg
                .experts
                .iter()
                .map(|e| rng.random_bool(e.coverage))
                .collect();
            if covered.iter().any(|&c| c) {
                break;
            }
        }
        for (spec, _) in cfg.experts.iter().zip(&covered).filter(|(_, c)| **c) {
            let label = if rng.random_bool(spec.accuracy_on(truth)) {
                truth
            } else {
                let wrong = rng.random_range(0..classes - 1);
                if wrong >= truth {
                    wrong + 1
                } else {
                    wrong
                }
            };
            records.push(ExpertRecord {
                expert_id: spec.id.as_str().into(),
                sample_id: sample_id.as_str().into(),
                predicted_label: label,
            });
        }
        rows.push(ProbabilityRow {
            sample_id: sample_id.into(),
            truth,
            probs: ProbVector::new(probs)?,
        });
    }
    let table = ProbabilityTable::new(classes, rows)?;
    let store = AnnotationStore::new(records, &table)?;
    Ok((table, store))
}

/// Ten classes in three confusable blocks `{0,1,2}`, `{3,4,5}`, `{6,7,8}`;
/// one generalist at 0.95 and one specialist per block (0.99 inside, 0.3
/// outside); model accuracy 0.9.
pub fn canonical_specialists(seed: u64) -> SynthConfig {
    let blocks: Vec<Vec<usize>> = vec![vec![0, 1, 2], vec![3, 4, 5], vec![6, 7, 8]];
    let mut experts = vec![ExpertSpec::generalist("generalist", 0.95)];
    for (i, block) in blocks.iter().enumerate() {
        experts.push(ExpertSpec::specialist(
            &format!("specialist_{i}"),
            block.clone(),
            0.99,
            0.3,
        ));
    }
    SynthConfig {
        classes: 10,
        n: 3000,
        model_target_accuracy: 0.9,
        confusion_sharpness: 0.5,
        blocks,
        leak: 0.05,
        experts,
        seed,
    }
}

/// A pool dominated by the model (accurate model, mediocre generalists) or
/// by the experts (weak model, strong generalists), for comparing the
/// miscoverage each regime selects.
pub fn regime(model_dominant: bool, seed: u64) -> SynthConfig {
    let (model, experts) = if model_dominant {
        (0.95, 0.7)
    } else {
        (0.6, 0.95)
    };
    SynthConfig {
        classes: 10,
        n: 3000,
        model_target_accuracy: model,
        confusion_sharpness: 0.5,
        blocks: Vec::new(),
        leak: 0.05,
        experts: (0..3)
            .map(|i| ExpertSpec::generalist(&format!("expert_{i}"), experts))
            .collect(),
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            n: 2000,
            ..canonical_specialists(seed)
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = gen_dataset(&small(4)).unwrap();
        let b = gen_dataset(&small(4)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_ne!(gen_dataset(&small(5)).unwrap().0, a.0);
    }

    #[test]
    fn argmax_accuracy_tracks_target() {
        for target in [0.6, 0.9] {
            let cfg = SynthConfig {
                n: 10_000,
                model_target_accuracy: target,
                ..canonical_specialists(11)
            };
            let (table, _) = gen_dataset(&cfg).unwrap();
            assert!(
                (table.model_accuracy() - target).abs() < 0.02,
                "{}",
                table.model_accuracy()
            );
            assert!(table.warnings().is_empty());
        }
    }

    #[test]
    fn accuracy_one_is_clamped() {
        let cfg = SynthConfig {
            model_target_accuracy: 1.0,
            ..small(1)
        };
        let (table, _) = gen_dataset(&cfg).unwrap();
        assert_eq!(table.model_accuracy(), 1.0);
    }

    #[test]
    fn perfect_generalist_matches_truth() {
        let cfg = SynthConfig {
            experts: vec![ExpertSpec::generalist("oracle", 1.0)],
            ..small(2)
        };
        let (table, store) = gen_dataset(&cfg).unwrap();
        assert_eq!(store.len(), table.len());
        for r in store.records() {
            assert_eq!(r.predicted_label, table.get(&r.sample_id).unwrap().truth);
        }
    }

    #[test]
    fn theoretical_accuracy_examples() {
        assert_eq!(
            theoretical_expert_accuracy(&ExpertSpec::generalist("g", 0.9), 10),
            0.9
        );
        let s = ExpertSpec::specialist("s", vec![0, 1], 1.0, 0.5);
        assert!((theoretical_expert_accuracy(&s, 10) - 0.6).abs() < 1e-15);
        let flat = ExpertSpec::specialist("s", vec![2, 5, 7], 0.42, 0.42);
        assert!((theoretical_expert_accuracy(&flat, 10) - 0.42).abs() < 1e-15);
    }

    #[test]
    fn empirical_expert_accuracy_within_three_se() {
        let cfg = SynthConfig {
            n: 6000,
            ..canonical_specialists(21)
        };
        let (table, store) = gen_dataset(&cfg).unwrap();
        for spec in &cfg.experts {
            let id = ExpertId::from(spec.id.as_str());
            let (mut hit, mut total) = (0usize, 0usize);
            for r in store.for_expert(&id) {
                total += 1;
                hit += usize::from(r.predicted_label == table.get(&r.sample_id).unwrap().truth);
            }
            let p = theoretical_expert_accuracy(spec, cfg.classes);
            let se = (p * (1.0 - p) / total as f64).sqrt();
            let emp = hit as f64 / total as f64;
            assert!((emp - p).abs() <= 3.0 * se, "{}: {emp} vs {p}", spec.id);
        }
    }

    #[test]
    fn coverage_masks_keep_one_annotator() {
        let cfg = SynthConfig {
            experts: vec![
                ExpertSpec::generalist("a", 0.8).with_coverage(0.2),
                ExpertSpec::generalist("b", 0.8).with_coverage(0.3),
            ],
            ..small(3)
        };
        let (table, store) = gen_dataset(&cfg).unwrap();
        for row in table.rows() {
            assert!(!store.for_sample(&row.sample_id).is_empty());
        }
        let a = store.for_expert(&ExpertId::from("a")).count() as f64 / table.len() as f64;
        assert!(a > 0.2 && a < 0.5, "{a}");
    }

    #[test]
    fn wrong_argmax_stays_in_block() {
        let (table, _) = gen_dataset(&small(8)).unwrap();
        let blocks = canonical_specialists(0).blocks;
        for row in table.rows() {
            let top = row.probs.argmax();
            if top != row.truth {
                if let Some(b) = blocks.iter().find(|b| b.contains(&row.truth)) {
                    assert!(b.contains(&top));
                }
                assert_eq!(row.probs.ranking()[1], row.truth);
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = small(0);
        let bad = [
            SynthConfig {
                model_target_accuracy: 0.05,
                ..base.clone()
            },
            SynthConfig {
                n: 5,
                ..base.clone()
            },
            SynthConfig {
                blocks: vec![vec![0, 1], vec![1, 2]],
                ..base.clone()
            },
            SynthConfig {
                experts: vec![],
                ..base.clone()
            },
            SynthConfig {
                experts: vec![ExpertSpec::generalist("g", 1.2)],
                ..base.clone()
            },
            SynthConfig {
                experts: vec![ExpertSpec::specialist("s", vec![], 0.9, 0.1)],
                ..base.clone()
            },
            SynthConfig {
                experts: vec![ExpertSpec::generalist("g", 0.9).with_coverage(0.0)],
                ..base.clone()
            },
        ];
        for cfg in bad {
            assert!(gen_dataset(&cfg).is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = canonical_specialists(9);
        let json = serde_json::to_string(&cfg).unwrap();
        let back: SynthConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        let minimal: SynthConfig = serde_json::from_str(
            r#"{"classes": 3, "n": 10, "model_target_accuracy": 0.8,
                "experts": [{"id": "g", "type": "generalist", "accuracy": 0.9}]}"#,
        )
        .unwrap();
        assert_eq!(minimal.experts[0].coverage, 1.0);
    }
}
