//! Longitudinal panel data: in-memory representation, CSV ingestion and
//! persistence, and outcome/covariate transforms.
//!
//! Outcome files carry rows `(subject_id, time, value)`; covariate files
//! carry `(subject_id, time, z1[, z2, …])`. Times within a subject must be
//! strictly increasing, and every outcome time needs a covariate record at
//! or before it so the carry-forward lookup is defined. Floats are written
//! with 17 significant digits, so a save/load round trip is exact.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path}:{row}: {message}")]
    Row {
        path: String,
        row: usize,
        message: String,
    },
    #[error("subject {subject}: times not strictly increasing at t = {time}")]
    UnsortedTimes { subject: String, time: f64 },
    #[error("subject {subject}: observation time {time} outside [0, {end_time}]")]
    TimeOutOfRange {
        subject: String,
        time: f64,
        end_time: f64,
    },
    #[error("subject {subject}: no covariate record at or before t = {time}")]
    CovariateUndefined { subject: String, time: f64 },
    #[error("subject {subject}: covariate dimension {found} differs from {expected}")]
    CovariateDimMismatch {
        subject: String,
        expected: usize,
        found: usize,
    },
    #[error("subject {subject}: non-finite value at t = {time}")]
    NonFinite { subject: String, time: f64 },
    #[error("subject {subject}: true-intensity records do not align with outcomes")]
    IntensityMisaligned { subject: String },
    #[error("transform domain violation: {transform} of {value} (subject {subject}, t = {time})")]
    TransformDomain {
        transform: &'static str,
        subject: String,
        value: f64,
        time: f64,
    },
}

/// One noisy outcome observation `X_ij` at time `t_ij`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub time: f64,
    pub value: f64,
}

/// One covariate record `Z_i(t)` (vector-valued).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateRecord {
    pub time: f64,
    pub values: Vec<f64>,
}

/// One subject's panel: irregular outcomes, a densely recorded covariate
/// trajectory, and the end of follow-up `τ_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    pub end_time: f64,
    pub outcomes: Vec<Observation>,
    pub covariates: Vec<CovariateRecord>,
    /// True observation intensity at each outcome time, when known
    /// (simulated data records it; real data leaves it `None`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_intensities: Option<Vec<f64>>,
}

impl Subject {
    pub fn num_obs(&self) -> usize {
        self.outcomes.len()
    }

    /// Carry-forward covariate lookup: the record with the largest time
    /// `≤ t`. Errors when no record exists at or before `t`.
    pub fn covariate_at(&self, t: f64) -> Result<&[f64], DataError> {
        let idx = self.covariates.partition_point(|r| r.time <= t);
        if idx == 0 {
            return Err(DataError::CovariateUndefined {
                subject: self.id.clone(),
                time: t,
            });
        }
        Ok(&self.covariates[idx - 1].values)
    }

    fn validate(&self, expected_dim: Option<usize>) -> Result<usize, DataError> {
        let mut dim = expected_dim;
        let mut prev = f64::NEG_INFINITY;
        for r in &self.covariates {
            if !(r.time.is_finite() && r.values.iter().all(|v| v.is_finite())) {
                return Err(DataError::NonFinite {
                    subject: self.id.clone(),
                    time: r.time,
                });
            }
            if r.time <= prev {
                return Err(DataError::UnsortedTimes {
                    subject: self.id.clone(),
                    time: r.time,
                });
            }
            prev = r.time;
            match dim {
                None => dim = Some(r.values.len()),
                Some(d) if d != r.values.len() => {
                    return Err(DataError::CovariateDimMismatch {
                        subject: self.id.clone(),
                        expected: d,
                        found: r.values.len(),
                    });
                }
                _ => {}
            }
        }
        let mut prev = f64::NEG_INFINITY;
        for o in &self.outcomes {
            if !(o.time.is_finite() && o.value.is_finite()) {
                return Err(DataError::NonFinite {
                    subject: self.id.clone(),
                    time: o.time,
                });
            }
            if o.time <= prev {
                return Err(DataError::UnsortedTimes {
                    subject: self.id.clone(),
                    time: o.time,
                });
            }
            prev = o.time;
            if !(0.0..=self.end_time).contains(&o.time) {
                return Err(DataError::TimeOutOfRange {
                    subject: self.id.clone(),
                    time: o.time,
                    end_time: self.end_time,
                });
            }
            self.covariate_at(o.time)?;
        }
        if let Some(lams) = &self.true_intensities {
            if lams.len() != self.outcomes.len() || lams.iter().any(|l| !(*l > 0.0)) {
                return Err(DataError::IntensityMisaligned {
                    subject: self.id.clone(),
                });
            }
        }
        Ok(dim.unwrap_or(0))
    }
}

/// A validated collection of subjects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalDataset {
    subjects: Vec<Subject>,
    covariate_dim: usize,
    /// Unit the time axis is measured in (e.g. "months"); informational.
    pub time_unit: Option<String>,
    /// Transform provenance, e.g. `outcome:sqrt`.
    pub transforms: Vec<String>,
}

impl LongitudinalDataset {
    pub fn new(subjects: Vec<Subject>) -> Result<Self, DataError> {
        let mut dim = None;
        for s in &subjects {
            let d = s.validate(dim)?;
            if !s.covariates.is_empty() {
                dim = Some(d);
            }
        }
        Ok(Self {
            subjects,
            covariate_dim: dim.unwrap_or(0),
            time_unit: None,
            transforms: Vec::new(),
        })
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn covariate_dim(&self) -> usize {
        self.covariate_dim
    }

    /// Global end of follow-up `τ = max_i τ_i` (0 for an empty dataset).
    pub fn tau(&self) -> f64 {
        self.subjects.iter().map(|s| s.end_time).fold(0.0, f64::max)
    }

    pub fn total_observations(&self) -> usize {
        self.subjects.iter().map(Subject::num_obs).sum()
    }

    /// All outcome times, flattened; handy for quantile knot placement.
    pub fn all_times(&self) -> Vec<f64> {
        self.subjects
            .iter()
            .flat_map(|s| s.outcomes.iter().map(|o| o.time))
            .collect()
    }
}

/// Outcome transform applied to `X_ij`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeTransform {
    Identity,
    Sqrt,
}

/// Covariate transform applied componentwise to `Z_i(t)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateTransform {
    Identity,
    Log,
}

/// Return a transformed copy of the dataset, recording provenance in
/// `transforms`. Domain violations (negative under sqrt, nonpositive under
/// log) are reported with the offending subject and time.
pub fn apply_transform(
    data: &LongitudinalDataset,
    outcome: OutcomeTransform,
    covariate: CovariateTransform,
) -> Result<LongitudinalDataset, DataError> {
    let mut out = data.clone();
    for s in &mut out.subjects {
        if outcome == OutcomeTransform::Sqrt {
            for o in &mut s.outcomes {
                if o.value < 0.0 {
                    return Err(DataError::TransformDomain {
                        transform: "sqrt",
                        subject: s.id.clone(),
                        value: o.value,
                        time: o.time,
                    });
                }
                o.value = o.value.sqrt();
            }
        }
        if covariate == CovariateTransform::Log {
            for r in &mut s.covariates {
                for v in &mut r.values {
                    if *v <= 0.0 {
                        return Err(DataError::TransformDomain {
                            transform: "log",
                            subject: s.id.clone(),
                            value: *v,
                            time: r.time,
                        });
                    }
                    *v = v.ln();
                }
            }
        }
    }
    match outcome {
        OutcomeTransform::Identity => {}
        OutcomeTransform::Sqrt => out.transforms.push("outcome:sqrt".into()),
    }
    match covariate {
        CovariateTransform::Identity => {}
        CovariateTransform::Log => out.transforms.push("covariate:log".into()),
    }
    Ok(out)
}

/// Options controlling CSV ingestion.
#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    /// End of follow-up applied to every subject. When `None`, each
    /// subject's `τ_i` is the latest time seen in either file.
    pub end_of_followup: Option<f64>,
    /// Optional sidecar with true observation intensities
    /// `(subject_id, time, intensity)` aligned with the outcome rows.
    pub intensity_path: Option<std::path::PathBuf>,
}

/// Row counts observed during loading; the loader never drops rows, so
/// these equal the file row counts minus headers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub outcome_rows: usize,
    pub covariate_rows: usize,
}

struct RawSubject {
    id: String,
    outcomes: Vec<Observation>,
    covariates: Vec<CovariateRecord>,
    intensities: Vec<f64>,
}

/// Load a dataset from an outcome CSV and a covariate CSV.
pub fn load_csv(
    outcome_path: &Path,
    covariate_path: &Path,
    options: &LoadOptions,
) -> Result<(LongitudinalDataset, LoadReport), DataError> {
    let mut order: Vec<String> = Vec::new();
    let mut by_id: std::collections::HashMap<String, RawSubject> = std::collections::HashMap::new();
    let mut report = LoadReport::default();

    let mut get = |order: &mut Vec<String>,
                   by_id: &mut std::collections::HashMap<String, RawSubject>,
                   id: &str|
     -> usize {
        if !by_id.contains_key(id) {
            order.push(id.to_string());
            by_id.insert(
                id.to_string(),
                RawSubject {
                    id: id.to_string(),
                    outcomes: Vec::new(),
                    covariates: Vec::new(),
                    intensities: Vec::new(),
                },
            );
        }
        order.len()
    };

    for (row_idx, rec) in csv_reader(outcome_path)?.into_iter().enumerate() {
        let rec = rec.map_err(|e| csv_err(outcome_path, e))?;
        let row = row_idx + 2; // 1-based, after header
        if rec.len() < 3 {
            return Err(row_err(outcome_path, row, "expected subject_id,time,value"));
        }
        let id = rec.get(0).unwrap();
        let time = parse_float(outcome_path, row, rec.get(1).unwrap())?;
        let value = parse_float(outcome_path, row, rec.get(2).unwrap())?;
        get(&mut order, &mut by_id, id);
        let raw = by_id.get_mut(id).unwrap();
        if let Some(last) = raw.outcomes.last() {
            if time <= last.time {
                return Err(row_err(
                    outcome_path,
                    row,
                    &format!("times for subject {id} not strictly increasing"),
                ));
            }
        }
        raw.outcomes.push(Observation { time, value });
        report.outcome_rows += 1;
    }

    let mut cov_dim: Option<usize> = None;
    for (row_idx, rec) in csv_reader(covariate_path)?.into_iter().enumerate() {
        let rec = rec.map_err(|e| csv_err(covariate_path, e))?;
        let row = row_idx + 2;
        if rec.len() < 3 {
            return Err(row_err(
                covariate_path,
                row,
                "expected subject_id,time,z1[,z2,…]",
            ));
        }
        let id = rec.get(0).unwrap();
        let time = parse_float(covariate_path, row, rec.get(1).unwrap())?;
        let values: Vec<f64> = (2..rec.len())
            .map(|i| parse_float(covariate_path, row, rec.get(i).unwrap()))
            .collect::<Result<_, _>>()?;
        match cov_dim {
            None => cov_dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(row_err(
                    covariate_path,
                    row,
                    &format!("covariate dimension {} differs from {d}", values.len()),
                ));
            }
            _ => {}
        }
        get(&mut order, &mut by_id, id);
        let raw = by_id.get_mut(id).unwrap();
        if let Some(last) = raw.covariates.last() {
            if time <= last.time {
                return Err(row_err(
                    covariate_path,
                    row,
                    &format!("times for subject {id} not strictly increasing"),
                ));
            }
        }
        raw.covariates.push(CovariateRecord { time, values });
        report.covariate_rows += 1;
    }

    if let Some(path) = &options.intensity_path {
        for (row_idx, rec) in csv_reader(path)?.into_iter().enumerate() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let row = row_idx + 2;
            if rec.len() < 3 {
                return Err(row_err(path, row, "expected subject_id,time,intensity"));
            }
            let id = rec.get(0).unwrap().to_string();
            let lam = parse_float(path, row, rec.get(2).unwrap())?;
            match by_id.get_mut(&id) {
                Some(raw) => raw.intensities.push(lam),
                None => {
                    return Err(row_err(path, row, &format!("unknown subject {id}")));
                }
            }
        }
    }

    let subjects: Vec<Subject> = order
        .into_iter()
        .map(|id| {
            let raw = by_id.remove(&id).unwrap();
            let last_seen = raw
                .outcomes
                .iter()
                .map(|o| o.time)
                .chain(raw.covariates.iter().map(|c| c.time))
                .fold(0.0, f64::max);
            let end_time = options.end_of_followup.unwrap_or(last_seen);
            let true_intensities = if raw.intensities.is_empty() {
                None
            } else {
                Some(raw.intensities)
            };
            Subject {
                id: raw.id,
                end_time,
                outcomes: raw.outcomes,
                covariates: raw.covariates,
                true_intensities,
            }
        })
        .collect();

    Ok((LongitudinalDataset::new(subjects)?, report))
}

/// Write a float with 17 significant digits (exact f64 round trip).
pub fn fmt_float(v: f64) -> String {
    let mut s = String::new();
    write!(s, "{v:.16e}").expect("formatting cannot fail");
    s
}

/// Write the outcome CSV `(subject_id, time, value)`.
pub fn write_outcome_csv(data: &LongitudinalDataset, path: &Path) -> Result<(), DataError> {
    let mut w = csv_writer(path)?;
    w.write_record(["subject_id", "time", "value"])
        .map_err(|e| csv_err(path, e))?;
    for s in data.subjects() {
        for o in &s.outcomes {
            w.write_record([s.id.as_str(), &fmt_float(o.time), &fmt_float(o.value)])
                .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Write the covariate CSV `(subject_id, time, z1[, z2, …])`.
pub fn write_covariate_csv(data: &LongitudinalDataset, path: &Path) -> Result<(), DataError> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["subject_id".to_string(), "time".to_string()];
    for k in 0..data.covariate_dim().max(1) {
        header.push(format!("z{}", k + 1));
    }
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for s in data.subjects() {
        for r in &s.covariates {
            let mut rec = vec![s.id.clone(), fmt_float(r.time)];
            rec.extend(r.values.iter().map(|v| fmt_float(*v)));
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Write the true-intensity sidecar `(subject_id, time, intensity)` for
/// subjects that carry it.
pub fn write_intensity_csv(data: &LongitudinalDataset, path: &Path) -> Result<(), DataError> {
    let mut w = csv_writer(path)?;
    w.write_record(["subject_id", "time", "intensity"])
        .map_err(|e| csv_err(path, e))?;
    for s in data.subjects() {
        if let Some(lams) = &s.true_intensities {
            for (o, lam) in s.outcomes.iter().zip(lams) {
                w.write_record([s.id.as_str(), &fmt_float(o.time), &fmt_float(*lam)])
                    .map_err(|e| csv_err(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

fn csv_reader(path: &Path) -> Result<csv::StringRecordsIntoIter<std::fs::File>, DataError> {
    let rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    Ok(rdr.into_records())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>, DataError> {
    csv::WriterBuilder::new()
        .from_path(path)
        .map_err(|e| csv_err(path, e))
}

fn parse_float(path: &Path, row: usize, field: &str) -> Result<f64, DataError> {
    let v: f64 = field
        .parse()
        .map_err(|_| row_err(path, row, &format!("not a number: {field:?}")))?;
    if v.is_nan() {
        return Err(row_err(path, row, "NaN value"));
    }
    Ok(v)
}

fn row_err(path: &Path, row: usize, message: &str) -> DataError {
    DataError::Row {
        path: path.display().to_string(),
        row,
        message: message.to_string(),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> DataError {
    DataError::Csv {
        path: path.display().to_string(),
        source: e,
    }
}

fn io_err(path: &Path, e: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source: e,
    }
}
