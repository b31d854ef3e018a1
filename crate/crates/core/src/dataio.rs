//! File formats.
//!
//! All tables are comma-separated text with a mandatory header row:
//!
//! | file | header |
//! |------|--------|
//! | probabilities | `sample_id,true_label,p_0,...,p_{C-1}` |
//! | annotations | `expert_id,sample_id,predicted_label` |
//! | class mapping | `fine_label,coarse_label` |
//! | expert costs | `expert_id,cost` |
//! | results | `split,score,strategy,alpha,accuracy,n_queries,max_qpe,avg_qpe` |
//!
//! Class labels are integers. An optional `labels.txt` holds one class name
//! per line, in class-index order. Floats are written in the shortest form
//! that parses back to the same value, so every write/load cycle is lossless.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::conformal::{ProbVector, ScoreKind};
use crate::error::{Error, Result};
use crate::evaluation::{RunResult, StrategySummary};
use crate::experts::ExpertRecord;
use crate::ids::{ExpertId, SampleId};
use crate::policy::Strategy;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityRow {
    pub sample_id: SampleId,
    pub truth: usize,
    pub probs: ProbVector,
}

/// Exported model outputs with ground truth, ordered by sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityTable {
    classes: usize,
    rows: Vec<ProbabilityRow>,
    index: HashMap<SampleId, usize>,
    warnings: Vec<String>,
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader)
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

fn read_headers<R: Read>(rdr: &mut csv::Reader<R>, path: &Path) -> Result<Vec<String>> {
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse(path, 1, e.to_string()))?;
    Ok(headers.iter().map(str::to_owned).collect())
}

fn records<'a, R: Read>(
    rdr: &'a mut csv::Reader<R>,
    path: &Path,
) -> impl Iterator<Item = Result<csv::StringRecord>> + use<'a, R> {
    let path = path.to_path_buf();
    rdr.records().map(move |r| {
        r.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::parse(&path, line, e.to_string())
        })
    })
}

fn parse_label(field: &str, path: &Path, line: u64, what: &str) -> Result<usize> {
    field
        .parse::<usize>()
        .map_err(|_| Error::parse(path, line, format!("{what} `{field}` is not a class index")))
}

impl ProbabilityTable {
    /// Validates and sorts `rows` by sample id.
    pub fn new(classes: usize, rows: Vec<ProbabilityRow>) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidParameter(format!(
                "a probability table needs at least 2 classes, got {classes}"
            )));
        }
        for row in &rows {
            if row.probs.classes() != classes {
                return Err(Error::DimensionMismatch {
                    expected: classes,
                    actual: row.probs.classes(),
                });
            }
            if row.truth >= classes {
                return Err(Error::LabelOutOfRange {
                    label: row.truth,
                    classes,
                });
            }
        }
        let mut table = ProbabilityTable {
            classes,
            rows,
            index: HashMap::new(),
            warnings: Vec::new(),
        };
        table.rows.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        if let Some(w) = table
            .rows
            .windows(2)
            .find(|w| w[0].sample_id == w[1].sample_id)
        {
            return Err(Error::InvalidParameter(format!(
                "duplicate sample_id `{}`",
                w[0].sample_id
            )));
        }
        table.reindex();
        Ok(table)
    }

    fn reindex(&mut self) {
        self.index = self
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| (r.sample_id.clone(), i))
            .collect();
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_reader(open(path)?, path)
    }

    /// Parses a probability table; `path` is only used in error messages.
    pub fn from_reader<R: Read>(reader: R, path: &Path) -> Result<Self> {
        let mut rdr = csv_reader(reader);
        let headers = read_headers(&mut rdr, path)?;
        if headers.len() < 4 || headers[0] != "sample_id" || headers[1] != "true_label" {
            return Err(Error::parse(
                path,
                1,
                "header must be `sample_id,true_label,p_0,...,p_{C-1}` with C >= 2",
            ));
        }
        let classes = headers.len() - 2;
        for (i, h) in headers[2..].iter().enumerate() {
            if *h != format!("p_{i}") {
                return Err(Error::parse(
                    path,
                    1,
                    format!("column {} is `{h}`, expected `p_{i}`", i + 3),
                ));
            }
        }

        let mut rows = Vec::new();
        let mut seen: HashMap<String, u64> = HashMap::new();
        let mut warnings = Vec::new();
        for record in records(&mut rdr, path) {
            let record = record?;
            let line = line_of(&record);
            if record.len() != classes + 2 {
                return Err(Error::parse(
                    path,
                    line,
                    format!("expected {} fields, found {}", classes + 2, record.len()),
                ));
            }
            let id = record[0].to_owned();
            if id.is_empty() {
                return Err(Error::parse(path, line, "empty sample_id"));
            }
            if let Some(first) = seen.insert(id.clone(), line) {
                return Err(Error::parse(
                    path,
                    line,
                    format!("duplicate sample_id `{id}` (first seen on line {first})"),
                ));
            }
            let truth = parse_label(&record[1], path, line, "true_label")?;
            if truth >= classes {
                return Err(Error::parse(
                    path,
                    line,
                    format!("true_label {truth} out of range for {classes} classes"),
                ));
            }
            let probs = record
                .iter()
                .skip(2)
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| Error::parse(path, line, format!("`{f}` is not a number")))
                })
                .collect::<Result<Vec<_>>>()?;
            let (probs, renormalized) = ProbVector::checked(probs)
                .map_err(|e| Error::parse(path, line, format!("sample `{id}`: {e}")))?;
            if renormalized {
                warnings.push(format!(
                    "{}:{line}: renormalized probabilities of sample `{id}`",
                    path.display()
                ));
            }
            rows.push(ProbabilityRow {
                sample_id: SampleId(id),
                truth,
                probs,
            });
        }
        let mut table = ProbabilityTable::new(classes, rows)?;
        table.warnings = warnings;
        Ok(table)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<PathBuf> {
        let path = path.as_ref();
        let mut out = create(path)?;
        let io = |e| Error::io(path, e);
        let mut header = String::from("sample_id,true_label");
        for i in 0..self.classes {
            header.push_str(&format!(",p_{i}"));
        }
        writeln!(out, "{header}").map_err(io)?;
        for row in &self.rows {
            write!(out, "{},{}", row.sample_id, row.truth).map_err(io)?;
            for p in row.probs.as_slice() {
                write!(out, ",{p:?}").map_err(io)?;
            }
            writeln!(out).map_err(io)?;
        }
        out.flush().map_err(io)?;
        Ok(path.to_path_buf())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[ProbabilityRow] {
        &self.rows
    }

    pub fn row(&self, index: usize) -> &ProbabilityRow {
        &self.rows[index]
    }

    pub fn position(&self, id: &SampleId) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &SampleId) -> Option<&ProbabilityRow> {
        self.position(id).map(|i| &self.rows[i])
    }

    pub fn truths(&self) -> HashMap<SampleId, usize> {
        self.rows
            .iter()
            .map(|r| (r.sample_id.clone(), r.truth))
            .collect()
    }

    /// Loader diagnostics such as renormalized rows.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Fraction of rows whose argmax equals the truth.
    pub fn model_accuracy(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        let hits = self
            .rows
            .iter()
            .filter(|r| r.probs.argmax() == r.truth)
            .count();
        hits as f64 / self.rows.len() as f64
    }
}

/// Recorded expert answers, ordered by `(sample_id, expert_id)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationStore {
    records: Vec<ExpertRecord>,
    experts: Vec<ExpertId>,
    by_sample: HashMap<SampleId, (usize, usize)>,
}

impl AnnotationStore {
    /// Validates `records` against `table` and builds the indexes.
    pub fn new(mut records: Vec<ExpertRecord>, table: &ProbabilityTable) -> Result<Self> {
        for r in &records {
            if table.position(&r.sample_id).is_none() {
                return Err(Error::InvalidParameter(format!(
                    "annotation for unknown sample `{}`",
                    r.sample_id
                )));
            }
            if r.predicted_label >= table.classes() {
                return Err(Error::LabelOutOfRange {
                    label: r.predicted_label,
                    classes: table.classes(),
                });
            }
        }
        records.sort_by(|a, b| {
            a.sample_id
                .cmp(&b.sample_id)
                .then_with(|| a.expert_id.cmp(&b.expert_id))
        });
        if let Some(w) = records
            .windows(2)
            .find(|w| w[0].sample_id == w[1].sample_id && w[0].expert_id == w[1].expert_id)
        {
            return Err(Error::InvalidParameter(format!(
                "duplicate annotation by `{}` for sample `{}`",
                w[0].expert_id, w[0].sample_id
            )));
        }
        let mut experts: Vec<ExpertId> = records.iter().map(|r| r.expert_id.clone()).collect();
        experts.sort();
        experts.dedup();
        let mut by_sample = HashMap::new();
        let mut start = 0;
        while start < records.len() {
            let mut end = start + 1;
            while end < records.len() && records[end].sample_id == records[start].sample_id {
                end += 1;
            }
            by_sample.insert(records[start].sample_id.clone(), (start, end));
            start = end;
        }
        Ok(AnnotationStore {
            records,
            experts,
            by_sample,
        })
    }

    pub fn load(path: impl AsRef<Path>, table: &ProbabilityTable) -> Result<Self> {
        let path = path.as_ref();
        Self::from_reader(open(path)?, path, table)
    }

    pub fn from_reader<R: Read>(reader: R, path: &Path, table: &ProbabilityTable) -> Result<Self> {
        let mut rdr = csv_reader(reader);
        let headers = read_headers(&mut rdr, path)?;
        if headers != ["expert_id", "sample_id", "predicted_label"] {
            return Err(Error::parse(
                path,
                1,
                "header must be `expert_id,sample_id,predicted_label`",
            ));
        }
        let mut out = Vec::new();
        let mut seen: HashSet<(String, String)> = HashSet::new();
        for record in records(&mut rdr, path) {
            let record = record?;
            let line = line_of(&record);
            if record.len() != 3 {
                return Err(Error::parse(
                    path,
                    line,
                    format!("expected 3 fields, found {}", record.len()),
                ));
            }
            let (expert, sample) = (record[0].to_owned(), record[1].to_owned());
            if expert.is_empty() {
                return Err(Error::parse(path, line, "empty expert_id"));
            }
            let label = parse_label(&record[2], path, line, "predicted_label")?;
            if table.position(&SampleId(sample.clone())).is_none() {
                return Err(Error::parse(
                    path,
                    line,
                    format!("sample `{sample}` is not in the probability table"),
                ));
            }
            if label >= table.classes() {
                return Err(Error::parse(
                    path,
                    line,
                    format!(
                        "predicted_label {label} out of range for {} classes",
                        table.classes()
                    ),
                ));
            }
            if !seen.insert((expert.clone(), sample.clone())) {
                return Err(Error::parse(
                    path,
                    line,
                    format!("duplicate annotation by `{expert}` for sample `{sample}`"),
                ));
            }
            out.push(ExpertRecord {
                expert_id: ExpertId(expert),
                sample_id: SampleId(sample),
                predicted_label: label,
            });
        }
        AnnotationStore::new(out, table)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<PathBuf> {
        let path = path.as_ref();
        let mut out = create(path)?;
        let io = |e| Error::io(path, e);
        writeln!(out, "expert_id,sample_id,predicted_label").map_err(io)?;
        let mut sorted: Vec<&ExpertRecord> = self.records.iter().collect();
        sorted.sort_by(|a, b| {
            a.expert_id
                .cmp(&b.expert_id)
                .then_with(|| a.sample_id.cmp(&b.sample_id))
        });
        for r in sorted {
            writeln!(out, "{},{},{}", r.expert_id, r.sample_id, r.predicted_label).map_err(io)?;
        }
        out.flush().map_err(io)?;
        Ok(path.to_path_buf())
    }

    pub fn records(&self) -> &[ExpertRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct expert ids, sorted.
    pub fn experts(&self) -> &[ExpertId] {
        &self.experts
    }

    /// Annotations of one sample, sorted by expert id.
    pub fn for_sample(&self, id: &SampleId) -> &[ExpertRecord] {
        self.by_sample
            .get(id)
            .map_or(&[], |&(start, end)| &self.records[start..end])
    }

    pub fn for_expert<'a>(
        &'a self,
        id: &'a ExpertId,
    ) -> impl Iterator<Item = &'a ExpertRecord> + 'a {
        self.records.iter().filter(move |r| &r.expert_id == id)
    }

    /// A store restricted to the experts in `keep`.
    pub fn retain_experts(
        &self,
        keep: &HashSet<ExpertId>,
        table: &ProbabilityTable,
    ) -> Result<Self> {
        let records = self
            .records
            .iter()
            .filter(|r| keep.contains(&r.expert_id))
            .cloned()
            .collect();
        AnnotationStore::new(records, table)
    }
}

/// Total map from fine class indices to contiguous coarse indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMapping {
    fine_to_coarse: Vec<usize>,
    coarse_classes: usize,
}

impl ClassMapping {
    pub fn new(fine_to_coarse: Vec<usize>) -> Result<Self> {
        if fine_to_coarse.is_empty() {
            return Err(Error::Empty("class mapping"));
        }
        let coarse_classes = fine_to_coarse.iter().max().map_or(0, |m| m + 1);
        let mut used = vec![false; coarse_classes];
        for &c in &fine_to_coarse {
            used[c] = true;
        }
        if let Some(gap) = used.iter().position(|u| !u) {
            return Err(Error::InvalidParameter(format!(
                "coarse labels must be contiguous from 0; label {gap} is unused"
            )));
        }
        Ok(ClassMapping {
            fine_to_coarse,
            coarse_classes,
        })
    }

    pub fn identity(classes: usize) -> Self {
        ClassMapping {
            fine_to_coarse: (0..classes).collect(),
            coarse_classes: classes,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv_reader(open(path)?);
        let headers = read_headers(&mut rdr, path)?;
        if headers != ["fine_label", "coarse_label"] {
            return Err(Error::parse(
                path,
                1,
                "header must be `fine_label,coarse_label`",
            ));
        }
        let mut pairs: BTreeMap<usize, usize> = BTreeMap::new();
        for record in records(&mut rdr, path) {
            let record = record?;
            let line = line_of(&record);
            if record.len() != 2 {
                return Err(Error::parse(path, line, "expected 2 fields"));
            }
            let fine = parse_label(&record[0], path, line, "fine_label")?;
            let coarse = parse_label(&record[1], path, line, "coarse_label")?;
            if pairs.insert(fine, coarse).is_some() {
                return Err(Error::parse(
                    path,
                    line,
                    format!("fine label {fine} mapped twice"),
                ));
            }
        }
        let fine_classes = pairs.keys().next_back().map_or(0, |m| m + 1);
        if pairs.len() != fine_classes {
            let missing = (0..fine_classes)
                .find(|f| !pairs.contains_key(f))
                .unwrap_or(0);
            return Err(Error::parse(
                path,
                0,
                format!("fine label {missing} has no coarse label"),
            ));
        }
        ClassMapping::new(pairs.into_values().collect())
    }

    pub fn fine_classes(&self) -> usize {
        self.fine_to_coarse.len()
    }

    pub fn coarse_classes(&self) -> usize {
        self.coarse_classes
    }

    pub fn coarse(&self, fine: usize) -> usize {
        self.fine_to_coarse[fine]
    }
}

/// Sums fine-class probabilities into their coarse class (in ascending fine
/// index order), divides by the total, and maps truths through `map`.
pub fn aggregate_superclasses(
    table: &ProbabilityTable,
    map: &ClassMapping,
) -> Result<ProbabilityTable> {
    if map.fine_classes() != table.classes() {
        return Err(Error::InvalidParameter(format!(
            "class mapping covers {} fine classes but the table has {}",
            map.fine_classes(),
            table.classes()
        )));
    }
    let rows = table
        .rows()
        .iter()
        .map(|row| {
            let mut coarse = vec![0.0; map.coarse_classes()];
            for (fine, p) in row.probs.as_slice().iter().enumerate() {
                coarse[map.coarse(fine)] += p;
            }
            let total: f64 = coarse.iter().sum();
            for v in &mut coarse {
                *v /= total;
            }
            Ok(ProbabilityRow {
                sample_id: row.sample_id.clone(),
                truth: map.coarse(row.truth),
                probs: ProbVector::new(coarse)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ProbabilityTable::new(map.coarse_classes(), rows)
}

/// Class names from a `labels.txt` sidecar, one per line.
pub fn load_label_names(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

pub const COSTS_HEADER: &str = "expert_id,cost";

/// Per-expert query costs from an `expert_id,cost` file.
pub fn load_costs(path: impl AsRef<Path>) -> Result<BTreeMap<ExpertId, f64>> {
    let path = path.as_ref();
    let mut rdr = csv_reader(open(path)?);
    let headers = read_headers(&mut rdr, path)?;
    if headers.join(",") != COSTS_HEADER {
        return Err(Error::parse(
            path,
            1,
            format!("header must be `{COSTS_HEADER}`"),
        ));
    }
    let mut out = BTreeMap::new();
    for record in records(&mut rdr, path) {
        let record = record?;
        let line = line_of(&record);
        if record.len() != 2 {
            return Err(Error::parse(path, line, "expected 2 fields"));
        }
        let cost: f64 = record[1]
            .parse()
            .ok()
            .filter(|c: &f64| c.is_finite() && *c >= 0.0)
            .ok_or_else(|| Error::parse(path, line, format!("invalid cost `{}`", &record[1])))?;
        if out.insert(ExpertId::from(&record[0]), cost).is_some() {
            return Err(Error::parse(
                path,
                line,
                format!("duplicate expert `{}`", &record[0]),
            ));
        }
    }
    Ok(out)
}

pub fn write_costs(costs: &BTreeMap<ExpertId, f64>, path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    let mut out = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(out, "{COSTS_HEADER}").map_err(io)?;
    for (id, cost) in costs {
        writeln!(out, "{id},{cost:?}").map_err(io)?;
    }
    out.flush().map_err(io)?;
    Ok(path.to_path_buf())
}

pub const RESULTS_HEADER: &str = "split,score,strategy,alpha,accuracy,n_queries,max_qpe,avg_qpe";

/// Orders results by `(score, strategy, alpha, split)`.
pub fn sort_results(results: &mut [RunResult]) {
    results.sort_by(|a, b| {
        a.score_kind
            .cmp(&b.score_kind)
            .then(a.strategy.cmp(&b.strategy))
            .then(a.alpha.total_cmp(&b.alpha))
            .then(a.split_index.cmp(&b.split_index))
    });
}

pub fn write_results_csv(results: &[RunResult], path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    let mut sorted = results.to_vec();
    sort_results(&mut sorted);
    let mut out = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(out, "{RESULTS_HEADER}").map_err(io)?;
    for r in &sorted {
        let avg = r.avg_qpe.map(|v| format!("{v:?}")).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{:?},{:?},{},{},{}",
            r.split_index,
            r.score_kind,
            r.strategy,
            r.alpha,
            r.accuracy,
            r.n_queries,
            r.max_qpe,
            avg
        )
        .map_err(io)?;
    }
    out.flush().map_err(io)?;
    Ok(path.to_path_buf())
}

pub fn load_results(path: impl AsRef<Path>) -> Result<Vec<RunResult>> {
    let path = path.as_ref();
    let mut rdr = csv_reader(open(path)?);
    let headers = read_headers(&mut rdr, path)?;
    if headers.join(",") != RESULTS_HEADER {
        return Err(Error::parse(
            path,
            1,
            format!("header must be `{RESULTS_HEADER}`"),
        ));
    }
    let mut out = Vec::new();
    for record in records(&mut rdr, path) {
        let record = record?;
        let line = line_of(&record);
        if record.len() != 8 {
            return Err(Error::parse(path, line, "expected 8 fields"));
        }
        let bad = |what: &str| Error::parse(path, line, format!("invalid {what}"));
        out.push(RunResult {
            split_index: record[0].parse().map_err(|_| bad("split"))?,
            score_kind: record[1].parse::<ScoreKind>().map_err(|_| bad("score"))?,
            strategy: record[2].parse::<Strategy>().map_err(|_| bad("strategy"))?,
            alpha: record[3].parse().map_err(|_| bad("alpha"))?,
            accuracy: record[4].parse().map_err(|_| bad("accuracy"))?,
            n_queries: record[5].parse().map_err(|_| bad("n_queries"))?,
            max_qpe: record[6].parse().map_err(|_| bad("max_qpe"))?,
            avg_qpe: if record[7].is_empty() {
                None
            } else {
                Some(record[7].parse().map_err(|_| bad("avg_qpe"))?)
            },
        });
    }
    Ok(out)
}

pub fn write_json<T: Serialize + ?Sized>(value: &T, path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line() as u64, e.to_string()))
}

/// Writes `results.csv` and `summary.json` into `out_dir`.
pub fn write_results(
    results: &[RunResult],
    summaries: &[StrategySummary],
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(vec![
        write_results_csv(results, dir.join("results.csv"))?,
        write_json(summaries, dir.join("summary.json"))?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Strategy;
    use proptest::prelude::*;
    use proptest::strategy::Strategy as Gen;

    fn table_from(text: &str) -> Result<ProbabilityTable> {
        ProbabilityTable::from_reader(text.as_bytes(), Path::new("probs.csv"))
    }

    #[test]
    fn loads_a_two_class_table() {
        let t = table_from("sample_id,true_label,p_0,p_1\nb,1,0.25,0.75\na,0,0.9,0.1\n").unwrap();
        assert_eq!(t.classes(), 2);
        assert_eq!(t.len(), 2);
        assert_eq!(t.row(0).sample_id.as_str(), "a");
        assert!(t.warnings().is_empty());
    }

    #[test]
    fn rejects_duplicates_with_line() {
        let err =
            table_from("sample_id,true_label,p_0,p_1\na,1,0.5,0.5\na,0,0.9,0.1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("probs.csv:3"), "{msg}");
        assert!(msg.contains("`a`"), "{msg}");
    }

    #[test]
    fn tolerance_rules() {
        let err = table_from("sample_id,true_label,p_0,p_1\na,1,0.5,0.4\n").unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
        let t = table_from("sample_id,true_label,p_0,p_1\na,1,0.5,0.4995\n").unwrap();
        assert_eq!(t.warnings().len(), 1);
    }

    #[test]
    fn malformed_tables() {
        for text in [
            "id,true_label,p_0,p_1\n",
            "sample_id,true_label,p_0\n",
            "sample_id,true_label,p_0,p_2\n",
            "sample_id,true_label,p_0,p_1\na,2,0.5,0.5\n",
            "sample_id,true_label,p_0,p_1\na,x,0.5,0.5\n",
            "sample_id,true_label,p_0,p_1\na,0,0.5\n",
            "sample_id,true_label,p_0,p_1\na,0,0.5,oops\n",
        ] {
            assert!(table_from(text).is_err(), "{text}");
        }
    }

    fn small_table() -> ProbabilityTable {
        table_from("sample_id,true_label,p_0,p_1,p_2\ns1,0,0.6,0.3,0.1\ns2,2,0.1,0.1,0.8\n")
            .unwrap()
    }

    #[test]
    fn annotations() {
        let t = small_table();
        let load =
            |text: &str| AnnotationStore::from_reader(text.as_bytes(), Path::new("a.csv"), &t);
        let store =
            load("expert_id,sample_id,predicted_label\ne2,s1,0\ne1,s1,1\ne1,s2,2\n").unwrap();
        assert_eq!(store.len(), 3);
        assert_eq!(store.experts().len(), 2);
        let pool = store.for_sample(&"s1".into());
        assert_eq!(pool.len(), 2);
        assert_eq!(pool[0].expert_id.as_str(), "e1");
        assert!(store.for_sample(&"zz".into()).is_empty());

        let err = load("expert_id,sample_id,predicted_label\ne1,s9,0\n").unwrap_err();
        assert!(err.to_string().contains("a.csv:2"), "{err}");
        assert!(load("expert_id,sample_id,predicted_label\ne1,s1,3\n").is_err());
        assert!(load("expert_id,sample_id,predicted_label\ne1,s1,0\ne1,s1,1\n").is_err());
        assert!(load("expert,sample,label\n").is_err());
        let empty = load("expert_id,sample_id,predicted_label\n").unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn aggregation() {
        let t = table_from("sample_id,true_label,p_0,p_1,p_2,p_3\na,2,0.1,0.2,0.3,0.4\n").unwrap();
        let coarse =
            aggregate_superclasses(&t, &ClassMapping::new(vec![0, 0, 1, 1]).unwrap()).unwrap();
        assert_eq!(coarse.classes(), 2);
        let p = coarse.row(0).probs.as_slice();
        assert!((p[0] - 0.3).abs() < 1e-12 && (p[1] - 0.7).abs() < 1e-12);
        assert_eq!(coarse.row(0).truth, 1);

        let same = aggregate_superclasses(&t, &ClassMapping::identity(4)).unwrap();
        assert_eq!(same, t);

        assert!(aggregate_superclasses(&t, &ClassMapping::new(vec![0, 0, 1]).unwrap()).is_err());
        assert!(ClassMapping::new(vec![0, 2]).is_err());
    }

    #[test]
    fn results_round_trip_and_blank_avg() {
        let dir = tempfile::tempdir().unwrap();
        let r = RunResult {
            strategy: Strategy::ModelOnly,
            score_kind: ScoreKind::Aps,
            alpha: 0.05,
            split_index: 0,
            accuracy: 0.9,
            n_queries: 0,
            max_qpe: 0,
            avg_qpe: None,
        };
        let path = write_results_csv(&[r.clone()], dir.path().join("results.csv")).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            format!("{RESULTS_HEADER}\n0,aps,model_only,0.05,0.9,0,0,\n")
        );
        assert_eq!(load_results(&path).unwrap(), vec![r]);
    }

    fn arbitrary_table() -> impl Gen<Value = ProbabilityTable> {
        (2usize..5)
            .prop_flat_map(|c| {
                prop::collection::vec((0..c, prop::collection::vec(1e-6f64..1.0, c)), 1..12)
                    .prop_map(move |rows| (c, rows))
            })
            .prop_map(|(c, rows)| {
                let rows = rows
                    .into_iter()
                    .enumerate()
                    .map(|(i, (truth, raw))| {
                        let total: f64 = raw.iter().sum();
                        ProbabilityRow {
                            sample_id: format!("s{i:03}").into(),
                            truth,
                            probs: ProbVector::new(raw.iter().map(|v| v / total).collect())
                                .unwrap(),
                        }
                    })
                    .collect();
                ProbabilityTable::new(c, rows).unwrap()
            })
    }

    proptest! {
        #[test]
        fn probability_tables_round_trip_exactly(table in arbitrary_table()) {
            let dir = tempfile::tempdir().unwrap();
            let path = table.write(dir.path().join("p.csv")).unwrap();
            let back = ProbabilityTable::load(&path).unwrap();
            prop_assert_eq!(back, table);
        }

        #[test]
        fn row_order_does_not_matter(table in arbitrary_table(), rot in 0usize..12) {
            let mut rows = table.rows().to_vec();
            let k = rot % rows.len();
            rows.rotate_left(k);
            rows.reverse();
            prop_assert_eq!(ProbabilityTable::new(table.classes(), rows).unwrap(), table);
        }
    }
}
