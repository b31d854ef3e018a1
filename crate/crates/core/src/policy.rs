//! Per-input deferral decisions and the baseline strategies.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conformal::{ConformalPredictor, PredictionSet, ProbVector};
use crate::error::{Error, Result};
use crate::experts::{self, ExpertEvidence, TieRule};
use crate::ids::ExpertId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Accept singletons, otherwise defer to the most segregative expert.
    Segregativity,
    /// Same deferral rule, defer to the highest overall accuracy.
    NaiveMostAccurate,
    /// Same deferral rule, defer to a uniformly random expert.
    NaiveRandom,
    ModelOnly,
    /// Always defer to the expert with the best overall accuracy.
    BestExpert,
    RandomExpert,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Segregativity,
        Strategy::NaiveMostAccurate,
        Strategy::NaiveRandom,
        Strategy::ModelOnly,
        Strategy::BestExpert,
        Strategy::RandomExpert,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Segregativity => "segregativity",
            Strategy::NaiveMostAccurate => "naive_most_accurate",
            Strategy::NaiveRandom => "naive_random",
            Strategy::ModelOnly => "model_only",
            Strategy::BestExpert => "best_expert",
            Strategy::RandomExpert => "random_expert",
        }
    }

    /// Stable index used for seeding and ordering.
    pub fn index(self) -> u64 {
        Strategy::ALL.iter().position(|&s| s == self).unwrap() as u64
    }

    /// Whether the strategy consults the prediction set before deferring.
    pub fn uses_prediction_set(self) -> bool {
        matches!(
            self,
            Strategy::Segregativity | Strategy::NaiveMostAccurate | Strategy::NaiveRandom
        )
    }

    /// Whether the strategy reads expert profiles at all.
    pub fn uses_expert_knowledge(self) -> bool {
        matches!(
            self,
            Strategy::Segregativity | Strategy::NaiveMostAccurate | Strategy::BestExpert
        )
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == norm)
            .ok_or_else(|| {
                Error::InvalidParameter(format!(
                    "unknown strategy `{s}` (expected one of {})",
                    Strategy::ALL.map(|s| s.as_str()).join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source<'a> {
    Model,
    Expert(&'a ExpertId),
}

/// Outcome of [`decide`]. For expert decisions the label is only known once
/// the recorded annotation is replayed by [`resolve`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decision<'a> {
    pub source: Source<'a>,
    /// The accepted label when `source` is the model.
    pub label: Option<usize>,
    /// Size of the prediction set; the class count for strategies that never
    /// build one, and 1 for the model-only baseline.
    pub set_size: usize,
}

impl Decision<'_> {
    pub fn is_deferred(&self) -> bool {
        matches!(self.source, Source::Expert(_))
    }
}

/// Decides for one input: build the prediction set where the strategy needs
/// one, then either accept the model or pick an expert among `candidates`.
pub fn decide<'a, E, R>(
    p: &ProbVector,
    predictor: &ConformalPredictor,
    candidates: &'a [E],
    strategy: Strategy,
    tie_rule: TieRule,
    rng: &mut R,
) -> Result<Decision<'a>>
where
    E: ExpertEvidence,
    R: Rng + ?Sized,
{
    let set = if strategy.uses_prediction_set() {
        Some(predictor.predict(p)?)
    } else {
        if p.classes() != predictor.classes() {
            return Err(Error::DimensionMismatch {
                expected: predictor.classes(),
                actual: p.classes(),
            });
        }
        None
    };
    decide_with_set(p, set.as_ref(), candidates, strategy, tie_rule, rng)
}

/// [`decide`] with a precomputed prediction set, so one set can be shared by
/// several strategies. `set` is required for set-based strategies.
pub fn decide_with_set<'a, E, R>(
    p: &ProbVector,
    set: Option<&PredictionSet>,
    candidates: &'a [E],
    strategy: Strategy,
    tie_rule: TieRule,
    rng: &mut R,
) -> Result<Decision<'a>>
where
    E: ExpertEvidence,
    R: Rng + ?Sized,
{
    let classes = p.classes();
    let defer = |index: usize, set_size: usize| Decision {
        source: Source::Expert(candidates[index].expert_id()),
        label: None,
        set_size,
    };
    let no_candidates = || Error::Empty("expert candidates");

    match strategy {
        Strategy::ModelOnly => Ok(Decision {
            source: Source::Model,
            label: Some(p.argmax()),
            set_size: 1,
        }),
        Strategy::BestExpert => {
            let i = experts::most_accurate(candidates, tie_rule, rng)?;
            Ok(defer(i, classes))
        }
        Strategy::RandomExpert => {
            if candidates.is_empty() {
                return Err(no_candidates());
            }
            Ok(defer(rng.random_range(0..candidates.len()), classes))
        }
        Strategy::Segregativity | Strategy::NaiveMostAccurate | Strategy::NaiveRandom => {
            let set = set.ok_or_else(|| {
                Error::InvalidParameter(format!("{strategy} needs a prediction set"))
            })?;
            if let Some(label) = set.singleton() {
                return Ok(Decision {
                    source: Source::Model,
                    label: Some(label),
                    set_size: 1,
                });
            }
            if candidates.is_empty() {
                return Err(no_candidates());
            }
            let i = match strategy {
                Strategy::Segregativity => experts::select_expert(candidates, set, tie_rule, rng)?,
                Strategy::NaiveMostAccurate => experts::most_accurate(candidates, tie_rule, rng)?,
                _ => rng.random_range(0..candidates.len()),
            };
            Ok(defer(i, set.len()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub final_label: usize,
    pub correct: bool,
    pub queried_expert: Option<ExpertId>,
}

/// Replays `decision` against the sample's recorded annotations
/// (`(expert, label)` pairs).
pub fn resolve(
    decision: &Decision<'_>,
    annotations: &[(ExpertId, usize)],
    truth: usize,
) -> Result<Outcome> {
    match decision.source {
        Source::Model => {
            let label = decision
                .label
                .ok_or_else(|| Error::InvalidParameter("model decision without a label".into()))?;
            Ok(Outcome {
                final_label: label,
                correct: label == truth,
                queried_expert: None,
            })
        }
        Source::Expert(id) => {
            let label = annotations
                .iter()
                .find(|(e, _)| e == id)
                .map(|(_, l)| *l)
                .ok_or_else(|| Error::MissingAnnotation {
                    expert: id.0.clone(),
                    sample: String::new(),
                })?;
            Ok(Outcome {
                final_label: label,
                correct: label == truth,
                queried_expert: Some(id.clone()),
            })
        }
    }
}
