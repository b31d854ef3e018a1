//! Per-expert evidence and segregativity-based expert selection.
//!
//! Each expert is summarised by an integer confusion matrix (rows are true
//! labels, columns are the expert's answers). The segregativity of an expert
//! over a label set `S` is its accuracy on the records whose answer and truth
//! both lie in `S`, which is the trace of the `S x S` sub-matrix over the sum
//! of that sub-matrix.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conformal::PredictionSet;
use crate::error::{Error, Result};
use crate::ids::{ExpertId, SampleId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertRecord {
    pub expert_id: ExpertId,
    pub sample_id: SampleId,
    pub predicted_label: usize,
}

/// A non-negative ratio of counts. A zero denominator means "undefined".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Fraction {
    pub num: u64,
    pub den: u64,
}

impl Fraction {
    pub fn new(num: u64, den: u64) -> Self {
        Fraction { num, den }
    }

    pub fn is_defined(&self) -> bool {
        self.den > 0
    }

    pub fn value(&self) -> Option<f64> {
        self.is_defined().then(|| self.num as f64 / self.den as f64)
    }

    /// Exact comparison of two defined fractions.
    pub fn cmp_value(&self, other: &Fraction) -> Ordering {
        debug_assert!(self.is_defined() && other.is_defined());
        (self.num as u128 * other.den as u128).cmp(&(other.num as u128 * self.den as u128))
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// `C x C` count matrix, indexed `[truth][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    n_total: u64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
            n_total: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn n_total(&self) -> u64 {
        self.n_total
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    fn check(&self, label: usize) -> Result<()> {
        if label >= self.classes {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.classes,
            });
        }
        Ok(())
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<()> {
        self.check(truth)?;
        self.check(predicted)?;
        self.counts[truth * self.classes + predicted] += 1;
        self.n_total += 1;
        Ok(())
    }

    pub fn correct(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    /// Trace over `n_total`.
    pub fn accuracy(&self) -> Fraction {
        Fraction::new(self.correct(), self.n_total)
    }

    /// Diagonal and total mass of the sub-matrix indexed by `labels`.
    pub fn tally(&self, labels: &[usize]) -> Fraction {
        let mut diag = 0;
        let mut total = 0;
        for &i in labels {
            let row = &self.counts[i * self.classes..(i + 1) * self.classes];
            diag += row[i];
            total += labels.iter().map(|&j| row[j]).sum::<u64>();
        }
        Fraction::new(diag, total)
    }
}

/// Tallies `records` against `truths`, skipping records of sample `exclude`.
pub fn build_confusion(
    records: &[ExpertRecord],
    truths: &HashMap<SampleId, usize>,
    classes: usize,
    exclude: Option<&SampleId>,
) -> Result<ConfusionMatrix> {
    if classes < 2 {
        return Err(Error::InvalidParameter(format!(
            "confusion matrices need at least 2 classes, got {classes}"
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for record in records {
        if exclude == Some(&record.sample_id) {
            continue;
        }
        let truth = *truths
            .get(&record.sample_id)
            .ok_or_else(|| Error::MissingTruth(record.sample_id.0.clone()))?;
        cm.add(truth, record.predicted_label)?;
    }
    Ok(cm)
}

/// Exact segregativity of `cm` over `labels`; `None` when no record falls in
/// the sub-matrix.
pub fn segregativity_ratio(cm: &ConfusionMatrix, labels: &PredictionSet) -> Option<Fraction> {
    let f = cm.tally(labels.labels());
    f.is_defined().then_some(f)
}

pub fn segregativity(cm: &ConfusionMatrix, labels: &PredictionSet) -> Option<f64> {
    segregativity_ratio(cm, labels).and_then(|f| f.value())
}

/// Anything that can be scored during expert selection.
pub trait ExpertEvidence {
    fn expert_id(&self) -> &ExpertId;
    fn cost(&self) -> f64;
    /// Sub-matrix tally over `labels` (ascending, distinct).
    fn tally(&self, labels: &[usize]) -> Fraction;
    fn overall(&self) -> Fraction;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertProfile {
    pub expert_id: ExpertId,
    pub confusion: ConfusionMatrix,
    pub cost: f64,
}

impl ExpertProfile {
    pub fn new(expert_id: ExpertId, confusion: ConfusionMatrix) -> Self {
        ExpertProfile {
            expert_id,
            confusion,
            cost: 1.0,
        }
    }

    pub fn with_cost(mut self, cost: f64) -> Self {
        self.cost = cost;
        self
    }

    /// `None` while the profile holds no records.
    pub fn overall_accuracy(&self) -> Option<f64> {
        self.confusion.accuracy().value()
    }
}

impl ExpertEvidence for ExpertProfile {
    fn expert_id(&self) -> &ExpertId {
        &self.expert_id
    }

    fn cost(&self) -> f64 {
        self.cost
    }

    fn tally(&self, labels: &[usize]) -> Fraction {
        self.confusion.tally(labels)
    }

    fn overall(&self) -> Fraction {
        self.confusion.accuracy()
    }
}

/// A profile with a single `(truth, predicted)` record removed, without
/// copying the underlying matrix.
#[derive(Debug, Clone, Copy)]
pub struct LeaveOneOut<'a> {
    profile: &'a ExpertProfile,
    excluded: Option<(usize, usize)>,
}

impl<'a> LeaveOneOut<'a> {
    /// `excluded` must be a record that was tallied into `profile`.
    pub fn new(profile: &'a ExpertProfile, excluded: Option<(usize, usize)>) -> Self {
        if let Some((t, p)) = excluded {
            debug_assert!(profile.confusion.get(t, p) > 0);
        }
        LeaveOneOut { profile, excluded }
    }

    pub fn profile(&self) -> &'a ExpertProfile {
        self.profile
    }
}

impl ExpertEvidence for LeaveOneOut<'_> {
    fn expert_id(&self) -> &ExpertId {
        &self.profile.expert_id
    }

    fn cost(&self) -> f64 {
        self.profile.cost
    }

    fn tally(&self, labels: &[usize]) -> Fraction {
        let mut f = self.profile.confusion.tally(labels);
        if let Some((t, p)) = self.excluded {
            if labels.binary_search(&t).is_ok() && labels.binary_search(&p).is_ok() {
                f.den -= 1;
                if t == p {
                    f.num -= 1;
                }
            }
        }
        f
    }

    fn overall(&self) -> Fraction {
        let mut f = self.profile.confusion.accuracy();
        if let Some((t, p)) = self.excluded {
            f.den -= 1;
            if t == p {
                f.num -= 1;
            }
        }
        f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieRule {
    /// Uniform draw among the tied experts.
    #[default]
    Random,
    /// Cheapest expert, then the lexicographically smallest id.
    #[serde(alias = "least_cost")]
    Cost,
}

impl std::str::FromStr for TieRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(TieRule::Random),
            "cost" | "least-cost" | "least_cost" => Ok(TieRule::Cost),
            other => Err(Error::InvalidParameter(format!(
                "unknown tie rule `{other}` (expected random or cost)"
            ))),
        }
    }
}

impl fmt::Display for TieRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TieRule::Random => "random",
            TieRule::Cost => "cost",
        })
    }
}

/// Breaks a tie among `tied` (indices into `candidates`, in candidate order).
pub fn break_tie<E, R>(candidates: &[E], tied: &[usize], rule: TieRule, rng: &mut R) -> usize
where
    E: ExpertEvidence,
    R: Rng + ?Sized,
{
    debug_assert!(!tied.is_empty());
    if tied.len() == 1 {
        return tied[0];
    }
    match rule {
        TieRule::Random => tied[rng.random_range(0..tied.len())],
        TieRule::Cost => *tied
            .iter()
            .min_by(|&&a, &&b| {
                let (ea, eb) = (&candidates[a], &candidates[b]);
                ea.cost()
                    .total_cmp(&eb.cost())
                    .then_with(|| ea.expert_id().cmp(eb.expert_id()))
            })
            .expect("non-empty tie"),
    }
}

/// Index of the candidate maximising `score`, ignoring undefined scores.
/// Returns `None` if no candidate has a defined score.
pub fn argmax_by<E, R, F>(candidates: &[E], score: F, rule: TieRule, rng: &mut R) -> Option<usize>
where
    E: ExpertEvidence,
    R: Rng + ?Sized,
    F: Fn(&E) -> Fraction,
{
    let mut best: Option<Fraction> = None;
    let mut tied = Vec::new();
    for (i, c) in candidates.iter().enumerate() {
        let s = score(c);
        if !s.is_defined() {
            continue;
        }
        match best.map(|b| s.cmp_value(&b)) {
            None | Some(Ordering::Greater) => {
                best = Some(s);
                tied.clear();
                tied.push(i);
            }
            Some(Ordering::Equal) => tied.push(i),
            Some(Ordering::Less) => {}
        }
    }
    (!tied.is_empty()).then(|| break_tie(candidates, &tied, rule, rng))
}

/// The candidate with the highest overall accuracy, falling back to a tie
/// among everyone when nobody has evidence.
pub fn most_accurate<E, R>(candidates: &[E], rule: TieRule, rng: &mut R) -> Result<usize>
where
    E: ExpertEvidence,
    R: Rng + ?Sized,
{
    if candidates.is_empty() {
        return Err(Error::Empty("expert candidates"));
    }
    Ok(
        argmax_by(candidates, |e| e.overall(), rule, rng).unwrap_or_else(|| {
            let all: Vec<usize> = (0..candidates.len()).collect();
            break_tie(candidates, &all, rule, rng)
        }),
    )
}

/// Picks the expert with maximal segregativity over `labels`.
///
/// An empty set scores every expert by overall accuracy. Experts without any
/// record inside the sub-matrix are skipped; when that leaves nobody, the
/// choice falls back to overall accuracy. Returns an index into `candidates`.
pub fn select_expert<E, R>(
    candidates: &[E],
    labels: &PredictionSet,
    rule: TieRule,
    rng: &mut R,
) -> Result<usize>
where
    E: ExpertEvidence,
    R: Rng + ?Sized,
{
    if candidates.is_empty() {
        return Err(Error::Empty("expert candidates"));
    }
    if labels.is_empty() {
        return most_accurate(candidates, rule, rng);
    }
    match argmax_by(candidates, |e| e.tally(labels.labels()), rule, rng) {
        Some(i) => Ok(i),
        None => most_accurate(candidates, rule, rng),
    }
}
