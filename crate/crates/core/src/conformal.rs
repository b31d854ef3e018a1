//! Split-conformal prediction sets around a probability-vector classifier.
//!
//! Three nonconformity scores are supported:
//!
//! * **LAC**: `1 - p[y]`. Sets may be empty.
//! * **APS**: cumulative probability mass of every label ranked at or above
//!   `y` (deterministic variant, no randomization).
//! * **RAPS**: APS plus `lambda * max(0, rank(y) - k_reg)`.
//!
//! Labels are ranked by descending probability with ties broken by the
//! smaller class index. For APS and RAPS the first label whose score exceeds
//! the threshold is always included, so those sets are never empty.
//!
//! The threshold is the `ceil((n + 1)(1 - alpha))`-th smallest calibration
//! score; when that rank exceeds `n` the threshold is `+inf` and every label
//! is admitted.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vectors whose mass is within this distance of 1 are accepted verbatim.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;
/// Vectors within this distance of 1 are renormalized; beyond it they are rejected.
pub const RENORMALIZATION_LIMIT: f64 = 1e-3;

/// Slack subtracted before taking the ceiling in the conformal rank, so that
/// products such as `1000 * 0.9` that land a hair above an integer in binary
/// floating point do not skip a rank.
const RANK_EPSILON: f64 = 1e-9;

/// A model's probability vector over `C >= 2` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector {
    probs: Vec<f64>,
}

impl ProbVector {
    /// Validates `probs`, renormalizing silently when the total mass is off by
    /// less than [`RENORMALIZATION_LIMIT`].
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        Self::checked(probs).map(|(p, _)| p)
    }

    /// Like [`ProbVector::new`] but also reports whether renormalization was
    /// applied, so loaders can surface it as a warning.
    pub fn checked(mut probs: Vec<f64>) -> Result<(Self, bool)> {
        if probs.len() < 2 {
            return Err(Error::InvalidProbabilities(format!(
                "need at least 2 classes, got {}",
                probs.len()
            )));
        }
        if let Some((i, v)) = probs
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::InvalidProbabilities(format!(
                "entry {i} is {v}, expected a finite non-negative value"
            )));
        }
        let total: f64 = probs.iter().sum();
        let drift = (total - 1.0).abs();
        if drift <= NORMALIZATION_TOLERANCE {
            return Ok((ProbVector { probs }, false));
        }
        if drift <= RENORMALIZATION_LIMIT {
            for v in &mut probs {
                *v /= total;
            }
            return Ok((ProbVector { probs }, true));
        }
        Err(Error::InvalidProbabilities(format!(
            "entries sum to {total}, beyond the {RENORMALIZATION_LIMIT} renormalization tolerance"
        )))
    }

    pub fn classes(&self) -> usize {
        self.probs.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    /// Class indices by descending probability, ties toward the lower index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.probs.len()).collect();
        order.sort_by(|&a, &b| self.probs[b].total_cmp(&self.probs[a]).then(a.cmp(&b)));
        order
    }

    /// The top-ranked class under [`ProbVector::ranking`].
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.probs.iter().enumerate().skip(1) {
            if v > self.probs[best] {
                best = i;
            }
        }
        best
    }

    fn check_label(&self, y: usize) -> Result<()> {
        if y >= self.probs.len() {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: self.probs.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Lac,
    Aps,
    Raps,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 3] = [ScoreKind::Lac, ScoreKind::Aps, ScoreKind::Raps];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Lac => "lac",
            ScoreKind::Aps => "aps",
            ScoreKind::Raps => "raps",
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lac" => Ok(ScoreKind::Lac),
            "aps" => Ok(ScoreKind::Aps),
            "raps" => Ok(ScoreKind::Raps),
            other => Err(Error::InvalidParameter(format!(
                "unknown score `{other}` (expected lac, aps or raps)"
            ))),
        }
    }
}

/// Regularization parameters of the RAPS score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RapsParams {
    pub k_reg: usize,
    pub lambda: f64,
}

impl RapsParams {
    pub fn new(k_reg: usize, lambda: f64) -> Result<Self> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "RAPS lambda must be finite and non-negative, got {lambda}"
            )));
        }
        Ok(RapsParams { k_reg, lambda })
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "RAPS lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        if self.k_reg > classes {
            return Err(Error::InvalidParameter(format!(
                "RAPS k_reg = {} exceeds class count {classes}",
                self.k_reg
            )));
        }
        Ok(())
    }

    fn penalty(&self, rank: usize) -> f64 {
        self.lambda * rank.saturating_sub(self.k_reg) as f64
    }
}

/// The default RAPS tuning grid: `k_reg in {1, 2, 3, 5}` crossed with
/// `lambda in {0.001, 0.01, 0.1, 0.5}`.
pub fn default_raps_grid() -> Vec<RapsParams> {
    let mut grid = Vec::with_capacity(16);
    for k_reg in [1, 2, 3, 5] {
        for lambda in [0.001, 0.01, 0.1, 0.5] {
            grid.push(RapsParams { k_reg, lambda });
        }
    }
    grid
}

/// A fully specified nonconformity score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Score {
    Lac,
    Aps,
    Raps(RapsParams),
}

impl Score {
    pub fn from_kind(kind: ScoreKind, params: Option<RapsParams>) -> Result<Self> {
        match (kind, params) {
            (ScoreKind::Lac, None) => Ok(Score::Lac),
            (ScoreKind::Aps, None) => Ok(Score::Aps),
            (ScoreKind::Raps, Some(p)) => Ok(Score::Raps(p)),
            (ScoreKind::Raps, None) => Err(Error::InvalidParameter(
                "RAPS requires k_reg and lambda".into(),
            )),
            (kind, Some(_)) => Err(Error::InvalidParameter(format!(
                "RAPS parameters supplied for the {kind} score"
            ))),
        }
    }

    pub fn kind(&self) -> ScoreKind {
        match self {
            Score::Lac => ScoreKind::Lac,
            Score::Aps => ScoreKind::Aps,
            Score::Raps(_) => ScoreKind::Raps,
        }
    }

    pub fn raps_params(&self) -> Option<RapsParams> {
        match self {
            Score::Raps(p) => Some(*p),
            _ => None,
        }
    }

    pub fn score(&self, p: &ProbVector, y: usize) -> Result<f64> {
        match self {
            Score::Lac => score_lac(p, y),
            Score::Aps => score_aps(p, y),
            Score::Raps(params) => score_raps(p, y, *params),
        }
    }
}

pub fn score_lac(p: &ProbVector, y: usize) -> Result<f64> {
    p.check_label(y)?;
    Ok(1.0 - p.probs[y])
}

pub fn score_aps(p: &ProbVector, y: usize) -> Result<f64> {
    p.check_label(y)?;
    Ok(ranked_scores(p, None)
        .into_iter()
        .find(|&(label, _)| label == y)
        .map(|(_, s)| s)
        .expect("every label appears in the ranking"))
}

pub fn score_raps(p: &ProbVector, y: usize, params: RapsParams) -> Result<f64> {
    p.check_label(y)?;
    Ok(ranked_scores(p, Some(params))
        .into_iter()
        .find(|&(label, _)| label == y)
        .map(|(_, s)| s)
        .expect("every label appears in the ranking"))
}

/// `(label, score)` in ranking order for the cumulative scores. Scores are
/// non-decreasing along the returned order.
fn ranked_scores(p: &ProbVector, raps: Option<RapsParams>) -> Vec<(usize, f64)> {
    let mut cumulative = 0.0;
    p.ranking()
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            cumulative += p.probs[label];
            let penalty = raps.map_or(0.0, |r| r.penalty(i + 1));
            (label, cumulative + penalty)
        })
        .collect()
}

/// Calibrated score threshold at miscoverage `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConformalThreshold {
    /// `f64::INFINITY` when the conformal rank overflows the calibration set.
    pub tau: f64,
    pub alpha: f64,
    pub n_cal: usize,
    pub score_kind: ScoreKind,
}

/// The 1-based conformal rank `ceil((n + 1)(1 - alpha))`.
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    (((n + 1) as f64) * (1.0 - alpha) - RANK_EPSILON)
        .ceil()
        .max(1.0) as usize
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "miscoverage alpha must lie in (0, 1), got {alpha}"
        )));
    }
    Ok(())
}

/// Sorted calibration scores, reusable across many miscoverage levels.
#[derive(Debug, Clone)]
pub struct CalibrationScores {
    sorted: Vec<f64>,
    kind: ScoreKind,
}

impl CalibrationScores {
    pub fn new(mut scores: Vec<f64>, kind: ScoreKind) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Empty("calibration scores"));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::InvalidParameter("calibration score is NaN".into()));
        }
        scores.sort_by(f64::total_cmp);
        Ok(CalibrationScores {
            sorted: scores,
            kind,
        })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn threshold(&self, alpha: f64) -> Result<ConformalThreshold> {
        check_alpha(alpha)?;
        let n = self.sorted.len();
        let k = conformal_rank(n, alpha);
        let tau = if k > n {
            f64::INFINITY
        } else {
            self.sorted[k - 1]
        };
        Ok(ConformalThreshold {
            tau,
            alpha,
            n_cal: n,
            score_kind: self.kind,
        })
    }
}

/// Split-conformal calibration of a single threshold.
pub fn calibrate(cal_scores: &[f64], alpha: f64, kind: ScoreKind) -> Result<ConformalThreshold> {
    check_alpha(alpha)?;
    CalibrationScores::new(cal_scores.to_vec(), kind)?.threshold(alpha)
}

/// A set of candidate labels, stored in ascending class order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    labels: Vec<usize>,
    pub alpha: f64,
}

impl PredictionSet {
    pub fn new(mut labels: Vec<usize>, alpha: f64) -> Result<Self> {
        labels.sort_unstable();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidParameter(
                "prediction set contains a duplicate label".into(),
            ));
        }
        Ok(PredictionSet { labels, alpha })
    }

    pub fn full(classes: usize, alpha: f64) -> Self {
        PredictionSet {
            labels: (0..classes).collect(),
            alpha,
        }
    }

    pub fn empty(alpha: f64) -> Self {
        PredictionSet {
            labels: Vec::new(),
            alpha,
        }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn contains(&self, label: usize) -> bool {
        self.labels.binary_search(&label).is_ok()
    }

    /// The sole member of a singleton set.
    pub fn singleton(&self) -> Option<usize> {
        match self.labels.as_slice() {
            [only] => Some(*only),
            _ => None,
        }
    }

    pub fn is_subset(&self, other: &PredictionSet) -> bool {
        self.labels.iter().all(|&l| other.contains(l))
    }
}

/// Builds the prediction set for `p` under `thr`. `params` must be present
/// exactly when the threshold was calibrated with RAPS.
pub fn predict_set(
    p: &ProbVector,
    thr: &ConformalThreshold,
    params: Option<RapsParams>,
) -> Result<PredictionSet> {
    let score = Score::from_kind(thr.score_kind, params)?;
    Ok(build_set(p, thr, score))
}

fn build_set(p: &ProbVector, thr: &ConformalThreshold, score: Score) -> PredictionSet {
    let tau = thr.tau;
    let mut labels = match score {
        Score::Lac => (0..p.classes())
            .filter(|&y| 1.0 - p.probs[y] <= tau)
            .collect(),
        Score::Aps | Score::Raps(_) => {
            let mut labels = Vec::new();
            for (label, s) in ranked_scores(p, score.raps_params()) {
                labels.push(label);
                if s > tau {
                    break;
                }
            }
            labels
        }
    };
    labels.sort_unstable();
    PredictionSet {
        labels,
        alpha: thr.alpha,
    }
}

/// A calibrated predictor bound to a class count.
#[derive(Debug, Clone, Copy)]
pub struct ConformalPredictor {
    score: Score,
    threshold: ConformalThreshold,
    classes: usize,
}

impl ConformalPredictor {
    pub fn new(score: Score, threshold: ConformalThreshold, classes: usize) -> Result<Self> {
        if score.kind() != threshold.score_kind {
            return Err(Error::InvalidParameter(format!(
                "threshold calibrated for {} used with the {} score",
                threshold.score_kind,
                score.kind()
            )));
        }
        if let Score::Raps(params) = score {
            params.validate(classes)?;
        }
        Ok(ConformalPredictor {
            score,
            threshold,
            classes,
        })
    }

    pub fn score(&self) -> Score {
        self.score
    }

    pub fn threshold(&self) -> &ConformalThreshold {
        &self.threshold
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn predict(&self, p: &ProbVector) -> Result<PredictionSet> {
        if p.classes() != self.classes {
            return Err(Error::DimensionMismatch {
                expected: self.classes,
                actual: p.classes(),
            });
        }
        Ok(build_set(p, &self.threshold, self.score))
    }
}

/// Picks RAPS parameters on a held-out tuning subset.
///
/// The first half of `samples` calibrates each candidate and the second half
/// measures coverage and mean set size. Among candidates reaching coverage
/// `1 - alpha`, the smallest mean set size wins, ties going to the smaller
/// `lambda` and then the smaller `k_reg`. If no candidate reaches the target,
/// the highest-coverage candidate wins under the same tie order.
pub fn tune_raps(
    samples: &[(&ProbVector, usize)],
    alpha: f64,
    grid: &[RapsParams],
) -> Result<RapsParams> {
    check_alpha(alpha)?;
    if grid.is_empty() {
        return Err(Error::Empty("RAPS tuning grid"));
    }
    if samples.len() < 4 {
        return Err(Error::InvalidParameter(format!(
            "RAPS tuning needs at least 4 samples, got {}",
            samples.len()
        )));
    }
    let classes = samples[0].0.classes();
    let (cal, eval) = samples.split_at(samples.len() / 2);

    struct Candidate {
        params: RapsParams,
        covered: usize,
        total_size: usize,
    }

    let mut evaluated = Vec::with_capacity(grid.len());
    for &params in grid {
        if params.validate(classes).is_err() {
            continue;
        }
        let score = Score::Raps(params);
        let scores = cal
            .iter()
            .map(|(p, y)| score.score(p, *y))
            .collect::<Result<Vec<_>>>()?;
        let thr = calibrate(&scores, alpha, ScoreKind::Raps)?;
        let predictor = ConformalPredictor::new(score, thr, classes)?;
        let mut covered = 0;
        let mut total_size = 0;
        for (p, y) in eval {
            let set = predictor.predict(p)?;
            covered += usize::from(set.contains(*y));
            total_size += set.len();
        }
        evaluated.push(Candidate {
            params,
            covered,
            total_size,
        });
    }
    if evaluated.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "no RAPS grid candidate is valid for {classes} classes"
        )));
    }

    let target = (1.0 - alpha) * eval.len() as f64 - RANK_EPSILON;
    let meets = |c: &Candidate| c.covered as f64 >= target;
    let any_meets = evaluated.iter().any(meets);
    let tie_order = |a: &Candidate, b: &Candidate| {
        a.params
            .lambda
            .total_cmp(&b.params.lambda)
            .then(a.params.k_reg.cmp(&b.params.k_reg))
    };
    let best = if any_meets {
        evaluated
            .iter()
            .filter(|c| meets(c))
            .min_by(|a, b| a.total_size.cmp(&b.total_size).then(tie_order(a, b)))
    } else {
        evaluated
            .iter()
            .min_by(|a, b| b.covered.cmp(&a.covered).then(tie_order(a, b)))
    };
    Ok(best.expect("non-empty candidate list").params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    fn thr(tau: f64, kind: ScoreKind) -> ConformalThreshold {
        ConformalThreshold {
            tau,
            alpha: 0.1,
            n_cal: 10,
            score_kind: kind,
        }
    }

    const EPS: f64 = 1e-12;

    #[test]
    fn lac_scores() {
        assert!((score_lac(&pv(&[0.7, 0.2, 0.1]), 0).unwrap() - 0.3).abs() < EPS);
        assert_eq!(score_lac(&pv(&[0.0, 1.0, 0.0]), 1).unwrap(), 0.0);
        assert!((score_lac(&pv(&[0.25; 4]), 2).unwrap() - 0.75).abs() < EPS);
        assert!(matches!(
            score_lac(&pv(&[0.5, 0.5]), 2),
            Err(Error::LabelOutOfRange {
                label: 2,
                classes: 2
            })
        ));
    }

    #[test]
    fn aps_scores() {
        let p = pv(&[0.5, 0.3, 0.2]);
        assert!((score_aps(&p, 1).unwrap() - 0.8).abs() < EPS);
        assert!((score_aps(&p, 0).unwrap() - 0.5).abs() < EPS);
        // tied probabilities rank class 0 first
        let tied = pv(&[0.4, 0.4, 0.2]);
        assert!((score_aps(&tied, 1).unwrap() - 0.8).abs() < EPS);
        assert!((score_aps(&tied, 0).unwrap() - 0.4).abs() < EPS);
        assert!(score_aps(&p, 3).is_err());
    }

    #[test]
    fn raps_scores() {
        let p = pv(&[0.5, 0.3, 0.2]);
        let s = score_raps(
            &p,
            2,
            RapsParams {
                k_reg: 1,
                lambda: 0.1,
            },
        )
        .unwrap();
        assert!((s - 1.2).abs() < EPS);
        let s = score_raps(
            &p,
            0,
            RapsParams {
                k_reg: 1,
                lambda: 0.5,
            },
        )
        .unwrap();
        assert!((s - 0.5).abs() < EPS);
        assert!(score_raps(
            &p,
            5,
            RapsParams {
                k_reg: 1,
                lambda: 0.5
            }
        )
        .is_err());
    }

    #[test]
    fn calibrate_rank_rule() {
        let t = calibrate(&[0.1, 0.2, 0.3, 0.4], 0.25, ScoreKind::Lac).unwrap();
        assert_eq!(t.tau, 0.4);
        let t = calibrate(&[0.5], 0.4, ScoreKind::Lac).unwrap();
        assert_eq!(t.tau, f64::INFINITY);
        let t = calibrate(&[0.9, 0.1], 0.5, ScoreKind::Aps).unwrap();
        assert_eq!(t.tau, 0.9);
        assert_eq!(t.n_cal, 2);
        assert!(matches!(
            calibrate(&[], 0.1, ScoreKind::Lac),
            Err(Error::Empty(_))
        ));
        assert!(calibrate(&[0.1], 0.0, ScoreKind::Lac).is_err());
        assert!(calibrate(&[0.1], 1.0, ScoreKind::Lac).is_err());
    }

    #[test]
    fn conformal_rank_is_exact_on_round_products() {
        assert_eq!(conformal_rank(999, 0.1), 900);
        assert_eq!(conformal_rank(4, 0.25), 4);
        assert_eq!(conformal_rank(99, 0.05), 95);
    }

    #[test]
    fn set_examples() {
        let s = predict_set(&pv(&[0.7, 0.2, 0.1]), &thr(0.5, ScoreKind::Lac), None).unwrap();
        assert_eq!(s.labels(), &[0]);
        let s = predict_set(&pv(&[0.4, 0.35, 0.25]), &thr(0.1, ScoreKind::Lac), None).unwrap();
        assert!(s.is_empty());
        let s = predict_set(&pv(&[0.5, 0.3, 0.2]), &thr(0.6, ScoreKind::Aps), None).unwrap();
        assert_eq!(s.labels(), &[0, 1]);
        // threshold below the top score still yields the crossing label
        let s = predict_set(&pv(&[0.5, 0.3, 0.2]), &thr(0.1, ScoreKind::Aps), None).unwrap();
        assert_eq!(s.labels(), &[0]);
        let s = predict_set(
            &pv(&[0.5, 0.3, 0.2]),
            &thr(f64::INFINITY, ScoreKind::Aps),
            None,
        )
        .unwrap();
        assert_eq!(s.len(), 3);
    }

    #[test]
    fn params_must_match_kind() {
        let p = pv(&[0.5, 0.5]);
        assert!(predict_set(&p, &thr(0.5, ScoreKind::Raps), None).is_err());
        assert!(predict_set(
            &p,
            &thr(0.5, ScoreKind::Aps),
            Some(RapsParams {
                k_reg: 1,
                lambda: 0.1
            })
        )
        .is_err());
    }

    #[test]
    fn predictor_rejects_dimension_mismatch() {
        let predictor = ConformalPredictor::new(Score::Aps, thr(0.5, ScoreKind::Aps), 3).unwrap();
        assert!(matches!(
            predictor.predict(&pv(&[0.5, 0.5])),
            Err(Error::DimensionMismatch {
                expected: 3,
                actual: 2
            })
        ));
    }

    #[test]
    fn normalization_tolerances() {
        assert!(ProbVector::new(vec![0.5, 0.5 + 5e-7]).is_ok());
        let (p, renorm) = ProbVector::checked(vec![0.5, 0.4995]).unwrap();
        assert!(renorm);
        assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(ProbVector::new(vec![0.5, 0.4]).is_err());
        assert!(ProbVector::new(vec![1.0]).is_err());
        assert!(ProbVector::new(vec![1.2, -0.2]).is_err());
        assert!(ProbVector::new(vec![f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn tune_raps_singleton_grid() {
        let vecs: Vec<ProbVector> = (0..8)
            .map(|i| pv(&[0.6 - 0.01 * i as f64, 0.3, 0.1 + 0.01 * i as f64]))
            .collect();
        let samples: Vec<(&ProbVector, usize)> = vecs.iter().map(|p| (p, 0)).collect();
        let only = RapsParams {
            k_reg: 1,
            lambda: 0.0,
        };
        assert_eq!(tune_raps(&samples, 0.1, &[only]).unwrap(), only);
    }

    #[test]
    fn tune_raps_tie_prefers_smaller_lambda() {
        // Every label always ends up in the set with tau = +inf (n = 2 per half),
        // so every candidate has the same size and coverage.
        let vecs: Vec<ProbVector> = (0..4).map(|_| pv(&[0.6, 0.3, 0.1])).collect();
        let samples: Vec<(&ProbVector, usize)> = vecs.iter().map(|p| (p, 0)).collect();
        let grid = [
            RapsParams {
                k_reg: 1,
                lambda: 0.5,
            },
            RapsParams {
                k_reg: 2,
                lambda: 0.01,
            },
            RapsParams {
                k_reg: 1,
                lambda: 0.01,
            },
        ];
        assert_eq!(
            tune_raps(&samples, 0.1, &grid).unwrap(),
            RapsParams {
                k_reg: 1,
                lambda: 0.01
            }
        );
    }

    #[test]
    fn tune_raps_errors() {
        let vecs: Vec<ProbVector> = (0..3).map(|_| pv(&[0.6, 0.4])).collect();
        let samples: Vec<(&ProbVector, usize)> = vecs.iter().map(|p| (p, 0)).collect();
        assert!(tune_raps(&samples, 0.1, &default_raps_grid()).is_err());
        assert!(tune_raps(&samples, 0.1, &[]).is_err());
    }

    fn prob_vec(classes: std::ops::Range<usize>) -> impl Strategy<Value = ProbVector> {
        prop::collection::vec(0.001f64..1.0, classes).prop_map(|raw| {
            let total: f64 = raw.iter().sum();
            ProbVector::new(raw.iter().map(|v| v / total).collect()).unwrap()
        })
    }

    fn any_score() -> impl Strategy<Value = Score> {
        prop_oneof![
            Just(Score::Lac),
            Just(Score::Aps),
            (0usize..3, 0.0f64..0.6)
                .prop_map(|(k_reg, lambda)| Score::Raps(RapsParams { k_reg, lambda })),
        ]
    }

    proptest! {
        #[test]
        fn raps_with_zero_lambda_is_aps(p in prob_vec(2..8), k in 0usize..4, y in 0usize..8) {
            prop_assume!(y < p.classes());
            let params = RapsParams { k_reg: k, lambda: 0.0 };
            prop_assert_eq!(score_raps(&p, y, params).unwrap(), score_aps(&p, y).unwrap());
        }

        #[test]
        fn sets_are_monotone_in_tau(p in prob_vec(2..8), score in any_score(), a in 0.0f64..2.0, b in 0.0f64..2.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let small = build_set(&p, &thr(lo, score.kind()), score);
            let large = build_set(&p, &thr(hi, score.kind()), score);
            prop_assert!(small.is_subset(&large));
        }

        #[test]
        fn cumulative_sets_contain_argmax(p in prob_vec(2..8), aps in any::<bool>(), tau in 0.0f64..2.0) {
            let score = if aps { Score::Aps } else { Score::Raps(RapsParams { k_reg: 1, lambda: 0.1 }) };
            let set = build_set(&p, &thr(tau, score.kind()), score);
            prop_assert!(!set.is_empty());
            prop_assert!(set.contains(p.argmax()));
        }

        #[test]
        fn singleton_sets_are_the_argmax(p in prob_vec(2..8), score in any_score(), tau in 0.0f64..2.0) {
            let set = build_set(&p, &thr(tau, score.kind()), score);
            if let Some(only) = set.singleton() {
                prop_assert_eq!(only, p.argmax());
            }
        }

        #[test]
        fn sets_are_permutation_equivariant(
            raw in prop::collection::vec(1u32..1000, 2..7),
            score in any_score(),
            tau in 0.0f64..2.0,
            seed in any::<u64>(),
        ) {
            // distinct masses, so the ranking has no ties
            let mut masses: Vec<u32> = raw.clone();
            masses.sort_unstable();
            masses.dedup();
            prop_assume!(masses.len() == raw.len());
            let total: u32 = raw.iter().sum();
            let p = pv(&raw.iter().map(|&v| v as f64 / total as f64).collect::<Vec<_>>());
            let c = raw.len();
            let mut perm: Vec<usize> = (0..c).collect();
            let mut state = seed;
            for i in (1..c).rev() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                perm.swap(i, (state >> 33) as usize % (i + 1));
            }
            // class i of the original lands at position perm[i]
            let mut permuted = vec![0.0; c];
            for i in 0..c {
                permuted[perm[i]] = p.as_slice()[i];
            }
            let q = ProbVector::new(permuted).unwrap();
            let base = build_set(&p, &thr(tau, score.kind()), score);
            let moved = build_set(&q, &thr(tau, score.kind()), score);
            let mut mapped: Vec<usize> = base.labels().iter().map(|&l| perm[l]).collect();
            mapped.sort_unstable();
            prop_assert_eq!(mapped.as_slice(), moved.labels());
        }

        #[test]
        fn thresholds_are_monotone_in_alpha(
            scores in prop::collection::vec(0.0f64..2.0, 1..50),
            a in 0.001f64..0.999,
            b in 0.001f64..0.999,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let cal = CalibrationScores::new(scores, ScoreKind::Aps).unwrap();
            prop_assert!(cal.threshold(lo).unwrap().tau >= cal.threshold(hi).unwrap().tau);
        }
    }
}
