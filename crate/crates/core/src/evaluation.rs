//! Replay harness: stratified splits, the miscoverage grid search, accuracy
//! and workload metrics, the significance protocol, and the two ablations.
//!
//! Every random draw comes from a ChaCha stream seeded by
//! [`derive_seed`] over `(master seed, split, alpha index, strategy)`, so
//! results do not depend on how tasks are scheduled across threads.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{
    default_raps_grid, tune_raps, CalibrationScores, ConformalPredictor, ProbVector, RapsParams,
    Score, ScoreKind,
};
use crate::dataio::{sort_results, AnnotationStore, ProbabilityTable};
use crate::error::{Error, Result};
use crate::experts::{ConfusionMatrix, ExpertEvidence, ExpertProfile, LeaveOneOut, TieRule};
use crate::ids::ExpertId;
use crate::policy::{decide_with_set, resolve, Outcome, Strategy};
use crate::stats;

const TAG_SPLIT: u64 = 0x5350_4c49_54;
const TAG_TUNING: u64 = 0x5455_4e45;
const TAG_SHOTS: u64 = 0x5348_4f54;
const TAG_DECIDE: u64 = 0x4445_4349_4445;

/// Mixes `parts` into a single seed (SplitMix64 finalizer per step).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut state: u64 = 0x9e37_79b9_7f4a_7c15;
    for &part in parts {
        state = state.wrapping_add(part).wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        state = z ^ (z >> 31);
    }
    state
}

fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

/// Miscoverage grid: `0.001` steps up to `1 - model_accuracy` (rounded to
/// three decimals), then `0.01` steps up to `0.99`.
pub fn alpha_grid(model_accuracy: f64) -> Result<Vec<f64>> {
    if !(model_accuracy > 0.001 && model_accuracy < 0.999) {
        return Err(Error::InvalidParameter(format!(
            "model accuracy must lie in (0.001, 0.999) to build the alpha grid, got {model_accuracy}"
        )));
    }
    let fine_end = ((1.0 - model_accuracy) * 1000.0).round() as u32;
    let mut grid: Vec<f64> = (1..=fine_end).map(|i| f64::from(i) / 1000.0).collect();
    let coarse_start = fine_end / 10 + 1;
    grid.extend((coarse_start..=99).map(|j| f64::from(j) / 100.0));
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub seed: u64,
    pub cal_size: usize,
    pub split_index: usize,
}

/// Row indices (ascending) of the calibration and test partitions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub cal: Vec<usize>,
    pub test: Vec<usize>,
}

/// Class-stratified split with largest-remainder allocation of `cal_size`.
pub fn stratified_split(table: &ProbabilityTable, spec: SplitSpec) -> Result<Split> {
    let n = table.len();
    if spec.cal_size >= n {
        return Err(Error::InvalidParameter(format!(
            "calibration size {} leaves no test samples out of {n}",
            spec.cal_size
        )));
    }
    if spec.cal_size < table.classes() {
        return Err(Error::InvalidParameter(format!(
            "calibration size {} is below the class count {}",
            spec.cal_size,
            table.classes()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); table.classes()];
    for (i, row) in table.rows().iter().enumerate() {
        by_class[row.truth].push(i);
    }
    let mut quota: Vec<usize> = by_class
        .iter()
        .map(|c| spec.cal_size * c.len() / n)
        .collect();
    let mut leftover = spec.cal_size - quota.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..by_class.len()).collect();
    // largest remainder first, lower class index on ties
    order.sort_by_key(|&c| (std::cmp::Reverse(spec.cal_size * by_class[c].len() % n), c));
    for &c in &order {
        if leftover == 0 {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            leftover -= 1;
        }
    }

    let mut rng = rng_for(&[TAG_SPLIT, spec.seed, spec.split_index as u64]);
    let mut cal = Vec::with_capacity(spec.cal_size);
    for (members, &q) in by_class.iter_mut().zip(&quota) {
        members.shuffle(&mut rng);
        cal.extend_from_slice(&members[..q]);
    }
    cal.sort_unstable();
    let chosen: HashSet<usize> = cal.iter().copied().collect();
    let test = (0..n).filter(|i| !chosen.contains(i)).collect();
    Ok(Split { cal, test })
}

/// How expert profiles used for selection are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Knowledge {
    /// All records except those of the current test sample.
    #[default]
    LeaveOneOut,
    /// At most `n` records per true label per expert, drawn once per split,
    /// again excluding the current test sample.
    Shots(usize),
}

impl fmt::Display for Knowledge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Knowledge::LeaveOneOut => f.write_str("loo"),
            Knowledge::Shots(n) => write!(f, "shots:{n}"),
        }
    }
}

impl FromStr for Knowledge {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "loo" {
            return Ok(Knowledge::LeaveOneOut);
        }
        s.strip_prefix("shots:")
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|&n| n > 0)
            .map(Knowledge::Shots)
            .ok_or_else(|| {
                Error::InvalidParameter(format!(
                    "unknown knowledge mode `{s}` (expected loo or shots:N with N >= 1)"
                ))
            })
    }
}

impl Serialize for Knowledge {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Knowledge {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Everything that parameterises a sweep. Serializable as the JSON config
/// file accepted by the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub score: ScoreKind,
    pub strategies: Vec<Strategy>,
    /// `None` selects [`alpha_grid`] over the table's model accuracy.
    pub alphas: Option<Vec<f64>>,
    pub splits: usize,
    pub cal_size: usize,
    pub seed: u64,
    pub tie_rule: TieRule,
    pub knowledge: Knowledge,
    pub raps_grid: Vec<RapsParams>,
    /// Share of each calibration set held out to tune RAPS.
    pub raps_tuning_fraction: f64,
    /// Miscoverage at which RAPS parameters are tuned.
    pub raps_tuning_alpha: f64,
    /// Worker threads; 0 lets the pool decide.
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            score: ScoreKind::Aps,
            strategies: Strategy::ALL.to_vec(),
            alphas: None,
            splits: 20,
            cal_size: 1000,
            seed: 0,
            tie_rule: TieRule::Random,
            knowledge: Knowledge::LeaveOneOut,
            raps_grid: default_raps_grid(),
            raps_tuning_fraction: 0.2,
            raps_tuning_alpha: 0.1,
            jobs: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::Empty("strategy list"));
        }
        if self.splits == 0 {
            return Err(Error::InvalidParameter(
                "at least one split is required".into(),
            ));
        }
        if let Some(alphas) = &self.alphas {
            if alphas.is_empty() {
                return Err(Error::Empty("alpha list"));
            }
            if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
                return Err(Error::InvalidParameter(format!(
                    "alpha {a} is outside (0, 1)"
                )));
            }
        }
        if !(self.raps_tuning_fraction > 0.0 && self.raps_tuning_fraction < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "RAPS tuning fraction must lie in (0, 1), got {}",
                self.raps_tuning_fraction
            )));
        }
        if self.score == ScoreKind::Raps && self.raps_grid.is_empty() {
            return Err(Error::Empty("RAPS grid"));
        }
        Ok(())
    }

    /// The configured alphas, or the default grid for `table`.
    pub fn resolve_alphas(&self, table: &ProbabilityTable) -> Result<Vec<f64>> {
        match &self.alphas {
            Some(a) => {
                let mut a = a.clone();
                a.sort_by(f64::total_cmp);
                a.dedup();
                Ok(a)
            }
            None => alpha_grid(table.model_accuracy()),
        }
    }
}

/// Metrics for one `(strategy, score, alpha, split)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub strategy: Strategy,
    pub score_kind: ScoreKind,
    pub alpha: f64,
    pub split_index: usize,
    pub accuracy: f64,
    pub n_queries: u64,
    pub max_qpe: u64,
    /// Queries per queried expert; `None` when nobody was queried.
    pub avg_qpe: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Workload {
    pub n_queries: u64,
    pub max_qpe: u64,
    pub avg_qpe: Option<f64>,
}

pub fn workload_metrics(outcomes: &[Outcome]) -> Workload {
    let mut per_expert: HashMap<&ExpertId, u64> = HashMap::new();
    for o in outcomes {
        if let Some(e) = &o.queried_expert {
            *per_expert.entry(e).or_default() += 1;
        }
    }
    workload_from_counts(per_expert.into_values())
}

fn workload_from_counts(counts: impl IntoIterator<Item = u64>) -> Workload {
    let mut n_queries = 0;
    let mut max_qpe = 0;
    let mut queried = 0u64;
    for c in counts.into_iter().filter(|&c| c > 0) {
        n_queries += c;
        max_qpe = max_qpe.max(c);
        queried += 1;
    }
    Workload {
        n_queries,
        max_qpe,
        avg_qpe: (queried > 0).then(|| n_queries as f64 / queried as f64),
    }
}

/// A probability table joined with its annotation store, plus the global
/// per-expert confusion matrices used for leave-one-out profiling.
#[derive(Debug, Clone)]
pub struct Benchmark {
    table: ProbabilityTable,
    store: AnnotationStore,
    profiles: Vec<ExpertProfile>,
    /// Per table row: `(expert index, recorded label)` sorted by expert id.
    per_sample: Vec<Vec<(usize, usize)>>,
    /// Per table row: `(expert id, recorded label)`, as consumed by `resolve`.
    annotations: Vec<Vec<(ExpertId, usize)>>,
}

impl Benchmark {
    pub fn new(table: ProbabilityTable, store: AnnotationStore) -> Result<Self> {
        let experts = store.experts().to_vec();
        let index: HashMap<&ExpertId, usize> =
            experts.iter().enumerate().map(|(i, e)| (e, i)).collect();
        let mut matrices = vec![ConfusionMatrix::new(table.classes()); experts.len()];
        let mut per_sample = vec![Vec::new(); table.len()];
        let mut annotations = vec![Vec::new(); table.len()];
        for r in store.records() {
            let row = table
                .position(&r.sample_id)
                .ok_or_else(|| Error::MissingTruth(r.sample_id.0.clone()))?;
            let e = index[&r.expert_id];
            matrices[e].add(table.row(row).truth, r.predicted_label)?;
            per_sample[row].push((e, r.predicted_label));
            annotations[row].push((r.expert_id.clone(), r.predicted_label));
        }
        let profiles = experts
            .into_iter()
            .zip(matrices)
            .map(|(id, cm)| ExpertProfile::new(id, cm))
            .collect();
        Ok(Benchmark {
            table,
            store,
            profiles,
            per_sample,
            annotations,
        })
    }

    /// Sets expert costs used by the least-cost tie rule; unknown ids are ignored.
    pub fn with_costs(mut self, costs: &BTreeMap<ExpertId, f64>) -> Self {
        for p in &mut self.profiles {
            if let Some(&c) = costs.get(&p.expert_id) {
                p.cost = c;
            }
        }
        self
    }

    pub fn table(&self) -> &ProbabilityTable {
        &self.table
    }

    pub fn store(&self) -> &AnnotationStore {
        &self.store
    }

    /// Full-data profiles, one per expert, sorted by id.
    pub fn profiles(&self) -> &[ExpertProfile] {
        &self.profiles
    }

    /// Keeps only the experts in `keep`. Fails if a sample loses every annotator.
    pub fn retain_experts(&self, keep: &HashSet<ExpertId>) -> Result<Benchmark> {
        let store = self.store.retain_experts(keep, &self.table)?;
        for (row, pool) in self.per_sample.iter().enumerate() {
            if !pool.is_empty() && store.for_sample(&self.table.row(row).sample_id).is_empty() {
                return Err(Error::NoEligibleExpert(
                    self.table.row(row).sample_id.0.clone(),
                ));
            }
        }
        Benchmark::new(self.table.clone(), store)
    }

    /// Shot-limited profiles for one split, plus per-expert membership of
    /// the drawn records (by table row). Also returns how many
    /// `(expert, label)` cells had fewer than `shots` records.
    fn shot_profiles(
        &self,
        shots: usize,
        seed: u64,
        split: usize,
    ) -> (Vec<ExpertProfile>, Vec<HashMap<usize, usize>>, usize) {
        let classes = self.table.classes();
        let mut by_expert: Vec<Vec<Vec<(usize, usize)>>> =
            vec![vec![Vec::new(); classes]; self.profiles.len()];
        for (row, pool) in self.per_sample.iter().enumerate() {
            let truth = self.table.row(row).truth;
            for &(e, label) in pool {
                by_expert[e][truth].push((row, label));
            }
        }
        let mut short = 0;
        let mut profiles = Vec::with_capacity(self.profiles.len());
        let mut members = Vec::with_capacity(self.profiles.len());
        for (e, per_label) in by_expert.iter_mut().enumerate() {
            let mut rng = rng_for(&[TAG_SHOTS, seed, split as u64, e as u64]);
            let mut cm = ConfusionMatrix::new(classes);
            let mut drawn = HashMap::new();
            for (truth, records) in per_label.iter_mut().enumerate() {
                if records.is_empty() {
                    continue;
                }
                if records.len() < shots {
                    short += 1;
                }
                let take = shots.min(records.len());
                let (chosen, _) = records.partial_shuffle(&mut rng, take);
                for &(row, label) in chosen.iter() {
                    cm.add(truth, label).expect("labels validated on load");
                    drawn.insert(row, label);
                }
            }
            profiles.push(ExpertProfile::new(self.profiles[e].expert_id.clone(), cm));
            members.push(drawn);
        }
        (profiles, members, short)
    }

    /// Runs every configured strategy at every alpha on one split.
    pub fn run_split(
        &self,
        config: &ExperimentConfig,
        alphas: &[f64],
        split_index: usize,
    ) -> Result<Vec<RunResult>> {
        let split = stratified_split(
            &self.table,
            SplitSpec {
                seed: config.seed,
                cal_size: config.cal_size,
                split_index,
            },
        )?;
        let classes = self.table.classes();

        let mut cal_rows = split.cal.clone();
        let score = match config.score {
            ScoreKind::Lac => Score::Lac,
            ScoreKind::Aps => Score::Aps,
            ScoreKind::Raps => {
                cal_rows.shuffle(&mut rng_for(&[TAG_TUNING, config.seed, split_index as u64]));
                let n_tune =
                    ((cal_rows.len() as f64 * config.raps_tuning_fraction).round() as usize).max(4);
                if n_tune >= cal_rows.len() {
                    return Err(Error::InvalidParameter(format!(
                        "calibration set of {} is too small to hold out {n_tune} RAPS tuning samples",
                        cal_rows.len()
                    )));
                }
                let tuning: Vec<(&ProbVector, usize)> = cal_rows[..n_tune]
                    .iter()
                    .map(|&r| (&self.table.row(r).probs, self.table.row(r).truth))
                    .collect();
                let params = tune_raps(&tuning, config.raps_tuning_alpha, &config.raps_grid)?;
                log::debug!(
                    "split {split_index}: RAPS k_reg={} lambda={}",
                    params.k_reg,
                    params.lambda
                );
                cal_rows.drain(..n_tune);
                Score::Raps(params)
            }
        };
        let cal_scores = cal_rows
            .iter()
            .map(|&r| score.score(&self.table.row(r).probs, self.table.row(r).truth))
            .collect::<Result<Vec<_>>>()?;
        let calibration = CalibrationScores::new(cal_scores, config.score)?;

        let shots = match config.knowledge {
            Knowledge::LeaveOneOut => None,
            Knowledge::Shots(n) => {
                let (profiles, members, short) = self.shot_profiles(n, config.seed, split_index);
                if short > 0 {
                    log::warn!(
                        "split {split_index}: {short} (expert, label) cells hold fewer than {n} records; using all available"
                    );
                }
                Some((profiles, members))
            }
        };

        // per test sample: (knowledge views, hindsight views)
        let views: Vec<(Vec<LeaveOneOut<'_>>, Vec<LeaveOneOut<'_>>)> = split
            .test
            .iter()
            .map(|&row| {
                let truth = self.table.row(row).truth;
                let hindsight: Vec<LeaveOneOut<'_>> = self.per_sample[row]
                    .iter()
                    .map(|&(e, label)| LeaveOneOut::new(&self.profiles[e], Some((truth, label))))
                    .collect();
                let knowledge = match &shots {
                    None => hindsight.clone(),
                    Some((profiles, members)) => self.per_sample[row]
                        .iter()
                        .map(|&(e, _)| {
                            let excluded = members[e].get(&row).map(|&label| (truth, label));
                            LeaveOneOut::new(&profiles[e], excluded)
                        })
                        .collect(),
                };
                (knowledge, hindsight)
            })
            .collect();

        let strategies = &config.strategies;
        let needs_set = strategies.iter().any(|s| s.uses_prediction_set());
        let expert_index: HashMap<&ExpertId, usize> = self
            .profiles
            .iter()
            .enumerate()
            .map(|(i, p)| (&p.expert_id, i))
            .collect();

        let per_alpha: Vec<Result<Vec<RunResult>>> = alphas
            .par_iter()
            .enumerate()
            .map(|(alpha_index, &alpha)| {
                let threshold = calibration.threshold(alpha)?;
                let predictor = ConformalPredictor::new(score, threshold, classes)?;
                let mut rngs: Vec<ChaCha8Rng> = strategies
                    .iter()
                    .map(|s| {
                        rng_for(&[
                            TAG_DECIDE,
                            config.seed,
                            split_index as u64,
                            alpha_index as u64,
                            s.index(),
                        ])
                    })
                    .collect();
                let mut correct = vec![0u64; strategies.len()];
                let mut queries = vec![vec![0u64; self.profiles.len()]; strategies.len()];

                for (t, &row) in split.test.iter().enumerate() {
                    let sample = self.table.row(row);
                    let set = if needs_set {
                        Some(predictor.predict(&sample.probs)?)
                    } else {
                        None
                    };
                    let (knowledge, hindsight) = &views[t];
                    for (si, &strategy) in strategies.iter().enumerate() {
                        let candidates = if strategy == Strategy::BestExpert {
                            hindsight
                        } else {
                            knowledge
                        };
                        let decision = decide_with_set(
                            &sample.probs,
                            set.as_ref(),
                            candidates,
                            strategy,
                            config.tie_rule,
                            &mut rngs[si],
                        )
                        .map_err(|e| match e {
                            Error::Empty(_) => Error::NoEligibleExpert(sample.sample_id.0.clone()),
                            other => other,
                        })?;
                        let outcome = resolve(&decision, &self.annotations[row], sample.truth)
                            .map_err(|e| match e {
                                Error::MissingAnnotation { expert, .. } => {
                                    Error::MissingAnnotation {
                                        expert,
                                        sample: sample.sample_id.0.clone(),
                                    }
                                }
                                other => other,
                            })?;
                        correct[si] += u64::from(outcome.correct);
                        if let Some(e) = &outcome.queried_expert {
                            queries[si][expert_index[e]] += 1;
                        }
                    }
                }

                let n_test = split.test.len() as f64;
                Ok(strategies
                    .iter()
                    .enumerate()
                    .map(|(si, &strategy)| {
                        let w = workload_from_counts(queries[si].iter().copied());
                        RunResult {
                            strategy,
                            score_kind: config.score,
                            alpha,
                            split_index,
                            accuracy: correct[si] as f64 / n_test,
                            n_queries: w.n_queries,
                            max_qpe: w.max_qpe,
                            avg_qpe: w.avg_qpe,
                        }
                    })
                    .collect())
            })
            .collect();

        let mut out = Vec::with_capacity(alphas.len() * strategies.len());
        for r in per_alpha {
            out.extend(r?);
        }
        Ok(out)
    }

    /// Runs all splits and returns results ordered by `(strategy, alpha, split)`.
    pub fn run(&self, config: &ExperimentConfig) -> Result<Vec<RunResult>> {
        config.validate()?;
        let alphas = config.resolve_alphas(&self.table)?;
        let work = || -> Result<Vec<RunResult>> {
            let per_split: Vec<Result<Vec<RunResult>>> = (0..config.splits)
                .into_par_iter()
                .map(|split| self.run_split(config, &alphas, split))
                .collect();
            let mut all = Vec::new();
            for r in per_split {
                all.extend(r?);
            }
            sort_results(&mut all);
            Ok(all)
        };
        if config.jobs == 0 {
            work()
        } else {
            rayon::ThreadPoolBuilder::new()
                .num_threads(config.jobs)
                .build()
                .map_err(|e| {
                    Error::InvalidParameter(format!("cannot start {} workers: {e}", config.jobs))
                })?
                .install(work)
        }
    }
}

fn alpha_key(alpha: f64) -> u64 {
    alpha.to_bits()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation; 0 for fewer than two values.
fn sd(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

/// The alpha maximising mean accuracy across splits; ties go to the smaller alpha.
pub fn select_alpha_opt(results: &[RunResult]) -> Result<f64> {
    let mut by_alpha: BTreeMap<u64, (f64, Vec<f64>)> = BTreeMap::new();
    for r in results {
        by_alpha
            .entry(alpha_key(r.alpha))
            .or_insert_with(|| (r.alpha, Vec::new()))
            .1
            .push(r.accuracy);
    }
    let mut rows: Vec<(f64, f64)> = by_alpha
        .into_values()
        .map(|(a, accs)| (a, mean(&accs)))
        .collect();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best: Option<(f64, f64)> = None;
    for (alpha, acc) in rows {
        if best.is_none_or(|(_, b)| acc > b) {
            best = Some((alpha, acc));
        }
    }
    best.map(|(a, _)| a)
        .ok_or(Error::Empty("results for alpha selection"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TestKind {
    PairedT,
    Wilcoxon,
}

/// Normality gate for routing to the paired t-test.
pub const NORMALITY_GATE: f64 = 0.05;
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

/// Number of stars for `p` under the strict thresholds 0.05, 0.01, 0.001, 0.0001.
pub fn stars(p: f64) -> u8 {
    [0.05, 0.01, 0.001, 0.0001]
        .iter()
        .filter(|&&t| p < t)
        .count() as u8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: Strategy,
    pub test_used: TestKind,
    pub p_value: f64,
    pub statistic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceVerdict {
    /// Test and p-value against the stronger baseline.
    pub test_used: TestKind,
    pub p_value: f64,
    pub stars: u8,
    /// Significant against both baselines at `p < 0.05`.
    pub complementarity: bool,
    pub versus_best_expert: Comparison,
    pub versus_model: Comparison,
}

fn one_sided(method: &[f64], baseline: &[f64], name: Strategy) -> Result<Comparison> {
    let d: Vec<f64> = method.iter().zip(baseline).map(|(m, b)| m - b).collect();
    let normal = if d.iter().all(|&v| v == 0.0) {
        true
    } else {
        match stats::shapiro_wilk(&d) {
            Ok(r) => r.p_value >= NORMALITY_GATE,
            Err(Error::Degenerate(_)) => false,
            Err(e) => return Err(e),
        }
    };
    let (test_used, r) = if normal {
        (
            TestKind::PairedT,
            stats::paired_t_one_tailed(method, baseline)?,
        )
    } else {
        (
            TestKind::Wilcoxon,
            stats::wilcoxon_one_tailed(method, baseline)?,
        )
    };
    Ok(Comparison {
        baseline: name,
        test_used,
        p_value: r.p_value,
        statistic: r.statistic,
    })
}

/// One-tailed paired comparison of per-split accuracies against both the
/// best-expert and the model-only baselines.
///
/// Each comparison runs Shapiro-Wilk on the differences and uses the paired
/// t-test when normality is not rejected at 0.05, Wilcoxon otherwise. Zero
/// differences everywhere count as the symmetric null (`p = 0.5`).
pub fn complementarity_test(
    method: &[f64],
    best_expert: &[f64],
    model: &[f64],
) -> Result<SignificanceVerdict> {
    let n = method.len();
    if best_expert.len() != n || model.len() != n {
        return Err(Error::InvalidParameter(
            "per-split accuracy vectors differ in length".into(),
        ));
    }
    if n < 3 {
        return Err(Error::InvalidParameter(format!(
            "significance testing needs at least 3 splits, got {n}"
        )));
    }
    let vs_best = one_sided(method, best_expert, Strategy::BestExpert)?;
    let vs_model = one_sided(method, model, Strategy::ModelOnly)?;
    let stronger = if mean(best_expert) >= mean(model) {
        &vs_best
    } else {
        &vs_model
    };
    Ok(SignificanceVerdict {
        test_used: stronger.test_used,
        p_value: stronger.p_value,
        stars: stars(stronger.p_value),
        complementarity: vs_best.p_value < SIGNIFICANCE_LEVEL
            && vs_model.p_value < SIGNIFICANCE_LEVEL,
        versus_best_expert: vs_best.clone(),
        versus_model: vs_model.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    fn of(values: &[f64]) -> Self {
        MeanSd {
            mean: mean(values),
            sd: sd(values),
        }
    }

    /// Half-width of the normal 95% interval of the mean.
    pub fn ci95(&self, n: usize) -> f64 {
        1.96 * self.sd / (n as f64).sqrt()
    }
}

/// Per-strategy record of the α_opt row, as reported in the summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub score: ScoreKind,
    pub strategy: Strategy,
    pub alpha_opt: f64,
    pub splits: usize,
    pub accuracy: MeanSd,
    pub n_queries: MeanSd,
    pub max_qpe: MeanSd,
    /// Over splits where at least one query was made; absent otherwise.
    pub avg_qpe: Option<MeanSd>,
    pub significance: Option<SignificanceVerdict>,
}

fn at_alpha(results: &[&RunResult], alpha: f64) -> Vec<RunResult> {
    let mut rows: Vec<RunResult> = results
        .iter()
        .filter(|r| alpha_key(r.alpha) == alpha_key(alpha))
        .map(|r| (*r).clone())
        .collect();
    rows.sort_by_key(|r| r.split_index);
    rows
}

/// Builds one summary per `(score, strategy)`, with significance for the
/// non-baseline strategies when both baselines are present.
pub fn summarize(results: &[RunResult]) -> Result<Vec<StrategySummary>> {
    let mut groups: BTreeMap<(ScoreKind, Strategy), Vec<&RunResult>> = BTreeMap::new();
    for r in results {
        groups
            .entry((r.score_kind, r.strategy))
            .or_default()
            .push(r);
    }
    let mut optimal: BTreeMap<(ScoreKind, Strategy), Vec<RunResult>> = BTreeMap::new();
    let mut alpha_opts = BTreeMap::new();
    for (key, rows) in &groups {
        let owned: Vec<RunResult> = rows.iter().map(|r| (*r).clone()).collect();
        let alpha = select_alpha_opt(&owned)?;
        alpha_opts.insert(*key, alpha);
        optimal.insert(*key, at_alpha(rows, alpha));
    }

    let accuracies = |rows: &[RunResult]| -> BTreeMap<usize, f64> {
        rows.iter().map(|r| (r.split_index, r.accuracy)).collect()
    };

    let mut out = Vec::new();
    for (&(score, strategy), rows) in &optimal {
        let accs: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
        let nq: Vec<f64> = rows.iter().map(|r| r.n_queries as f64).collect();
        let mq: Vec<f64> = rows.iter().map(|r| r.max_qpe as f64).collect();
        let aq: Vec<f64> = rows.iter().filter_map(|r| r.avg_qpe).collect();

        let significance = match (
            strategy,
            optimal.get(&(score, Strategy::BestExpert)),
            optimal.get(&(score, Strategy::ModelOnly)),
        ) {
            (Strategy::BestExpert | Strategy::ModelOnly, _, _) => None,
            (_, Some(best), Some(model)) => {
                let (m, b, o) = (accuracies(rows), accuracies(best), accuracies(model));
                let splits: Vec<usize> = m
                    .keys()
                    .filter(|s| b.contains_key(s) && o.contains_key(s))
                    .copied()
                    .collect();
                if splits.len() >= 3 {
                    let pick = |map: &BTreeMap<usize, f64>| {
                        splits.iter().map(|s| map[s]).collect::<Vec<_>>()
                    };
                    Some(complementarity_test(&pick(&m), &pick(&b), &pick(&o))?)
                } else {
                    None
                }
            }
            _ => None,
        };

        out.push(StrategySummary {
            score,
            strategy,
            alpha_opt: alpha_opts[&(score, strategy)],
            splits: rows.len(),
            accuracy: MeanSd::of(&accs),
            n_queries: MeanSd::of(&nq),
            max_qpe: MeanSd::of(&mq),
            avg_qpe: (!aq.is_empty()).then(|| MeanSd::of(&aq)),
            significance,
        });
    }
    Ok(out)
}

/// Mean metrics per `(strategy, alpha)` across splits, for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub score: ScoreKind,
    pub strategy: Strategy,
    pub alpha: f64,
    pub splits: usize,
    pub accuracy: MeanSd,
    pub accuracy_ci95: f64,
    pub n_queries: f64,
    pub max_qpe: f64,
    pub avg_qpe: Option<f64>,
}

pub fn curves(results: &[RunResult]) -> Vec<CurvePoint> {
    let mut groups: BTreeMap<(ScoreKind, Strategy, u64), Vec<&RunResult>> = BTreeMap::new();
    for r in results {
        groups
            .entry((r.score_kind, r.strategy, alpha_key(r.alpha)))
            .or_default()
            .push(r);
    }
    let mut points: Vec<CurvePoint> = groups
        .into_values()
        .map(|rows| {
            let accs: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
            let acc = MeanSd::of(&accs);
            let avg: Vec<f64> = rows.iter().filter_map(|r| r.avg_qpe).collect();
            CurvePoint {
                score: rows[0].score_kind,
                strategy: rows[0].strategy,
                alpha: rows[0].alpha,
                splits: rows.len(),
                accuracy: acc,
                accuracy_ci95: acc.ci95(rows.len()),
                n_queries: mean(&rows.iter().map(|r| r.n_queries as f64).collect::<Vec<_>>()),
                max_qpe: mean(&rows.iter().map(|r| r.max_qpe as f64).collect::<Vec<_>>()),
                avg_qpe: (!avg.is_empty()).then(|| mean(&avg)),
            }
        })
        .collect();
    points.sort_by(|a, b| {
        a.score
            .cmp(&b.score)
            .then(a.strategy.cmp(&b.strategy))
            .then(a.alpha.total_cmp(&b.alpha))
    });
    points
}

/// Experts ranked by full-data overall accuracy, weakest first (ties by id).
pub fn rank_experts_by_accuracy(profiles: &[ExpertProfile]) -> Vec<ExpertId> {
    let mut ranked: Vec<&ExpertProfile> = profiles.iter().collect();
    ranked.sort_by(|a, b| {
        let (fa, fb) = (a.overall(), b.overall());
        let ord = match (fa.is_defined(), fb.is_defined()) {
            (true, true) => fa.cmp_value(&fb),
            (false, true) => std::cmp::Ordering::Less,
            (true, false) => std::cmp::Ordering::Greater,
            (false, false) => std::cmp::Ordering::Equal,
        };
        ord.then_with(|| a.expert_id.cmp(&b.expert_id))
    });
    ranked.into_iter().map(|p| p.expert_id.clone()).collect()
}

/// Restricts the pool to the weakest `ceil(f_kept * K)` experts.
pub fn retain_bottom_fraction(bench: &Benchmark, f_kept: f64) -> Result<Benchmark> {
    if !(f_kept > 0.0 && f_kept <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "f_kept must lie in (0, 1], got {f_kept}"
        )));
    }
    let ranked = rank_experts_by_accuracy(bench.profiles());
    let keep_n =
        ((f_kept * ranked.len() as f64 - 1e-9).ceil() as usize).clamp(1, ranked.len().max(1));
    let keep: HashSet<ExpertId> = ranked.into_iter().take(keep_n).collect();
    bench.retain_experts(&keep)
}

/// Reruns the sweep with only the weakest fraction `f_kept` of experts.
pub fn ablate_expert_fraction(
    bench: &Benchmark,
    config: &ExperimentConfig,
    f_kept: f64,
) -> Result<Vec<RunResult>> {
    retain_bottom_fraction(bench, f_kept)?.run(config)
}

/// One point of an ablation sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationPoint {
    /// `f_kept` or `n_shots`.
    pub parameter: f64,
    pub results: Vec<RunResult>,
}

/// Decreases `f_kept` from 1 in `step` increments until some sample would
/// lose all annotators; that last point is excluded.
pub fn expert_fraction_sweep(
    bench: &Benchmark,
    config: &ExperimentConfig,
    step: f64,
) -> Result<Vec<AblationPoint>> {
    if !(step > 0.0 && step < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "step must lie in (0, 1), got {step}"
        )));
    }
    let mut points = Vec::new();
    let mut i = 0u32;
    loop {
        let f_kept = 1.0 - f64::from(i) * step;
        let f_kept = (f_kept * 1e6).round() / 1e6;
        if f_kept <= 0.0 {
            break;
        }
        match retain_bottom_fraction(bench, f_kept) {
            Ok(reduced) => points.push(AblationPoint {
                parameter: f_kept,
                results: reduced.run(config)?,
            }),
            Err(Error::NoEligibleExpert(sample)) => {
                log::info!("f_kept = {f_kept}: sample `{sample}` loses all annotators; stopping");
                break;
            }
            Err(e) => return Err(e),
        }
        i += 1;
    }
    Ok(points)
}

/// Reruns the sweep once per `n_shots` value with shot-limited profiles.
pub fn ablate_shots(
    bench: &Benchmark,
    config: &ExperimentConfig,
    n_shots: &[usize],
) -> Result<Vec<AblationPoint>> {
    n_shots
        .iter()
        .map(|&n| {
            if n == 0 {
                return Err(Error::InvalidParameter("n_shots must be at least 1".into()));
            }
            let cfg = ExperimentConfig {
                knowledge: Knowledge::Shots(n),
                ..config.clone()
            };
            Ok(AblationPoint {
                parameter: n as f64,
                results: bench.run(&cfg)?,
            })
        })
        .collect()
}

/// Per-parameter α_opt and accuracy of each strategy, for ablation tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummaryRow {
    pub parameter: f64,
    pub strategy: Strategy,
    pub alpha_opt: f64,
    pub accuracy: MeanSd,
    pub accuracy_ci95: f64,
}

pub fn summarize_ablation(points: &[AblationPoint]) -> Result<Vec<AblationSummaryRow>> {
    let mut rows = Vec::new();
    for point in points {
        for s in summarize(&point.results)? {
            rows.push(AblationSummaryRow {
                parameter: point.parameter,
                strategy: s.strategy,
                alpha_opt: s.alpha_opt,
                accuracy: s.accuracy,
                accuracy_ci95: s.accuracy.ci95(s.splits),
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::ProbabilityRow;
    use crate::experts::ExpertRecord;

    #[test]
    fn grid_for_093() {
        let g = alpha_grid(0.93).unwrap();
        assert_eq!(g.len(), 162);
        assert_eq!(g[0], 0.001);
        assert_eq!(g[69], 0.07);
        assert_eq!(g[70], 0.08);
        assert_eq!(*g.last().unwrap(), 0.99);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn grid_for_099() {
        let g = alpha_grid(0.99).unwrap();
        assert_eq!(g.len(), 108);
        assert_eq!(g[9], 0.01);
        assert_eq!(g[10], 0.02);
    }

    #[test]
    fn grid_bounds() {
        assert!(alpha_grid(0.001).is_err());
        assert!(alpha_grid(0.999).is_err());
        for acc in [0.0015, 0.2, 0.5, 0.777, 0.9985] {
            let g = alpha_grid(acc).unwrap();
            assert!(g.windows(2).all(|w| w[0] < w[1]), "{acc}");
        }
    }

    fn outcome(expert: Option<&str>) -> Outcome {
        Outcome {
            final_label: 0,
            correct: true,
            queried_expert: expert.map(ExpertId::from),
        }
    }

    #[test]
    fn workload_examples() {
        let outs: Vec<Outcome> = ["e1", "e1", "e2", "e1"]
            .iter()
            .map(|e| outcome(Some(e)))
            .chain([outcome(None)])
            .collect();
        assert_eq!(
            workload_metrics(&outs),
            Workload {
                n_queries: 4,
                max_qpe: 3,
                avg_qpe: Some(2.0)
            }
        );
        assert_eq!(
            workload_metrics(&[outcome(None)]),
            Workload {
                n_queries: 0,
                max_qpe: 0,
                avg_qpe: None
            }
        );
        assert_eq!(
            workload_metrics(&[outcome(Some("e"))]),
            Workload {
                n_queries: 1,
                max_qpe: 1,
                avg_qpe: Some(1.0)
            }
        );
    }

    fn row(strategy: Strategy, alpha: f64, split: usize, accuracy: f64) -> RunResult {
        RunResult {
            strategy,
            score_kind: ScoreKind::Aps,
            alpha,
            split_index: split,
            accuracy,
            n_queries: 0,
            max_qpe: 0,
            avg_qpe: None,
        }
    }

    #[test]
    fn alpha_opt_examples() {
        let s = Strategy::Segregativity;
        assert_eq!(
            select_alpha_opt(&[row(s, 0.01, 0, 0.99), row(s, 0.5, 0, 0.95)]).unwrap(),
            0.01
        );
        assert_eq!(
            select_alpha_opt(&[row(s, 0.3, 0, 0.9), row(s, 0.2, 0, 0.9)]).unwrap(),
            0.2
        );
        assert_eq!(select_alpha_opt(&[row(s, 0.4, 0, 0.1)]).unwrap(), 0.4);
        assert!(select_alpha_opt(&[]).is_err());
        // averaged over splits: 0.1 -> 0.9, 0.2 -> 0.91
        let rows = [
            row(s, 0.1, 0, 1.0),
            row(s, 0.1, 1, 0.8),
            row(s, 0.2, 0, 0.91),
            row(s, 0.2, 1, 0.91),
        ];
        assert_eq!(select_alpha_opt(&rows).unwrap(), 0.2);
    }

    #[test]
    fn star_thresholds_are_strict() {
        assert_eq!(stars(0.05), 0);
        assert_eq!(stars(0.0499), 1);
        assert_eq!(stars(0.01), 1);
        assert_eq!(stars(0.0066), 2);
        assert_eq!(stars(0.0001), 3);
        assert_eq!(stars(0.00001), 4);
    }

    #[test]
    fn complementarity_examples() {
        let base = [0.9, 0.91, 0.92, 0.93, 0.94];
        let v = complementarity_test(&base, &base, &[0.5; 5]).unwrap();
        assert!(v.p_value >= 0.5);
        assert_eq!(v.stars, 0);
        assert!(!v.complementarity);

        // d = [1, 2, 3, 4, 5] against the stronger baseline: normal, paired t
        let best = [0.0; 5];
        let method = [1.0, 2.0, 3.0, 4.0, 5.0];
        let v = complementarity_test(&method, &best, &[-10.0; 5]).unwrap();
        assert_eq!(v.test_used, TestKind::PairedT);
        assert!((v.versus_best_expert.statistic - 4.2426).abs() < 1e-3);
        assert!((v.p_value - 0.0066).abs() < 5e-4);
        assert_eq!(v.stars, 2);
        // d = 11..15 against the model: constant shape, also significant
        assert!(v.complementarity);

        // beats the model but not the best expert
        let v = complementarity_test(&method, &[1.5, 1.9, 3.2, 3.8, 5.1], &[0.0; 5]).unwrap();
        assert!(!v.complementarity);

        assert!(complementarity_test(&[1.0, 2.0], &[0.0, 0.0], &[0.0, 0.0]).is_err());
        assert!(complementarity_test(&[1.0, 2.0, 3.0], &[0.0; 2], &[0.0; 3]).is_err());
    }

    #[test]
    fn constant_nonzero_differences_route_to_wilcoxon() {
        let v = complementarity_test(&[1.0, 2.0, 3.0], &[0.0, 1.0, 2.0], &[0.0; 3]).unwrap();
        assert_eq!(v.versus_best_expert.test_used, TestKind::Wilcoxon);
        assert!((v.versus_best_expert.p_value - 0.125).abs() < 1e-12);
    }

    fn balanced_table(classes: usize, per_class: usize) -> ProbabilityTable {
        let mut rows = Vec::new();
        for c in 0..classes {
            for i in 0..per_class {
                let mut p = vec![0.5 / (classes - 1) as f64; classes];
                p[c] = 0.5;
                rows.push(ProbabilityRow {
                    sample_id: format!("c{c}-{i:04}").into(),
                    truth: c,
                    probs: ProbVector::new(p).unwrap(),
                });
            }
        }
        ProbabilityTable::new(classes, rows).unwrap()
    }

    #[test]
    fn stratified_split_allocation() {
        let table = balanced_table(10, 150);
        let spec = SplitSpec {
            seed: 3,
            cal_size: 1000,
            split_index: 0,
        };
        let split = stratified_split(&table, spec).unwrap();
        assert_eq!(split.cal.len(), 1000);
        assert_eq!(split.test.len(), 500);
        let mut per_class = [0usize; 10];
        for &i in &split.cal {
            per_class[table.row(i).truth] += 1;
        }
        assert!(per_class.iter().all(|&n| n == 100));
        assert_eq!(stratified_split(&table, spec).unwrap(), split);
        assert_ne!(
            stratified_split(
                &table,
                SplitSpec {
                    split_index: 1,
                    ..spec
                }
            )
            .unwrap(),
            split
        );
        assert!(stratified_split(
            &table,
            SplitSpec {
                cal_size: 1500,
                ..spec
            }
        )
        .is_err());
        assert!(stratified_split(
            &table,
            SplitSpec {
                cal_size: 5,
                ..spec
            }
        )
        .is_err());
    }

    #[test]
    fn largest_remainder_rounding() {
        // classes of 5, 3, 2 samples; cal_size 5 -> quotas 2.5, 1.5, 1.0
        let mut rows = Vec::new();
        for (c, n) in [(0usize, 5usize), (1, 3), (2, 2)] {
            for i in 0..n {
                let mut p = vec![0.25; 3];
                p[c] = 0.5;
                rows.push(ProbabilityRow {
                    sample_id: format!("{c}-{i}").into(),
                    truth: c,
                    probs: ProbVector::new(p).unwrap(),
                });
            }
        }
        let table = ProbabilityTable::new(3, rows).unwrap();
        let split = stratified_split(
            &table,
            SplitSpec {
                seed: 0,
                cal_size: 5,
                split_index: 0,
            },
        )
        .unwrap();
        let mut per_class = [0usize; 3];
        for &i in &split.cal {
            per_class[table.row(i).truth] += 1;
        }
        // equal remainders: the lower class index wins the extra slot
        assert_eq!(per_class, [3, 1, 1]);
    }

    #[test]
    fn knowledge_parsing() {
        assert_eq!("loo".parse::<Knowledge>().unwrap(), Knowledge::LeaveOneOut);
        assert_eq!("shots:5".parse::<Knowledge>().unwrap(), Knowledge::Shots(5));
        assert!("shots:0".parse::<Knowledge>().is_err());
        assert!("all".parse::<Knowledge>().is_err());
        let json = serde_json::to_string(&Knowledge::Shots(10)).unwrap();
        assert_eq!(json, "\"shots:10\"");
    }

    #[test]
    fn expert_ranking_and_cut() {
        let table = balanced_table(2, 4);
        let mut records = Vec::new();
        // accuracies: a 1.0, b 0.75, c 0.5, d 0.25
        for (e, wrong) in [("a", 0usize), ("b", 2), ("c", 4), ("d", 6)] {
            for (i, r) in table.rows().iter().enumerate() {
                let label = if i < wrong { 1 - r.truth } else { r.truth };
                records.push(ExpertRecord {
                    expert_id: e.into(),
                    sample_id: r.sample_id.clone(),
                    predicted_label: label,
                });
            }
        }
        let store = AnnotationStore::new(records, &table).unwrap();
        let bench = Benchmark::new(table, store).unwrap();
        let ranked = rank_experts_by_accuracy(bench.profiles());
        assert_eq!(
            ranked.iter().map(|e| e.as_str()).collect::<Vec<_>>(),
            ["d", "c", "b", "a"]
        );
        let half = retain_bottom_fraction(&bench, 0.5).unwrap();
        assert_eq!(
            half.store()
                .experts()
                .iter()
                .map(|e| e.as_str())
                .collect::<Vec<_>>(),
            ["c", "d"]
        );
        let all = retain_bottom_fraction(&bench, 1.0).unwrap();
        assert_eq!(all.store(), bench.store());
    }

    #[test]
    fn seeds_differ_per_component() {
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
        assert_ne!(derive_seed(&[0]), derive_seed(&[0, 0]));
    }
}
