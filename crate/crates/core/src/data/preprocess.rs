use serde::{Deserialize, Serialize};

use super::{DataError, PatientRecord, VariableKind, VariableSchema};
use crate::tensor::Tensor;

/// Lower bound on the standard deviation used for z-normalization.
pub const STD_FLOOR: f64 = 1e-6;

/// One timestamped observation, `time` in hours since admission.
#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub time: f64,
    pub variable: String,
    pub value: String,
}

impl Event {
    pub fn new(time: f64, variable: impl Into<String>, value: impl Into<String>) -> Self {
        Event {
            time,
            variable: variable.into(),
            value: value.into(),
        }
    }
}

/// Buckets events into 1-hour cells; the latest event in a cell wins.
///
/// Categorical values outside the vocabulary are stored as `-1` and later
/// encode to an all-zero group.
pub fn discretize(
    patient_id: &str,
    label: u8,
    events: &[Event],
    schema: &VariableSchema,
    horizon: usize,
) -> Result<PatientRecord, DataError> {
    let mut record = PatientRecord::empty(patient_id, horizon, schema.len(), label);
    let mut latest = vec![f64::NEG_INFINITY; horizon * schema.len()];
    for ev in events {
        let var = schema
            .index_of(&ev.variable)
            .ok_or_else(|| DataError::UnknownVariable(ev.variable.clone()))?;
        if ev.time < 0.0 {
            return Err(DataError::NegativeTimestamp {
                variable: ev.variable.clone(),
                time: ev.time,
            });
        }
        if !(ev.time < horizon as f64) {
            return Err(DataError::OutOfHorizon {
                variable: ev.variable.clone(),
                time: ev.time,
                horizon,
            });
        }
        let value = match &schema.variables[var].kind {
            VariableKind::Continuous => ev.value.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                DataError::BadValue {
                    variable: ev.variable.clone(),
                    value: ev.value.clone(),
                }
            })?,
            VariableKind::Categorical { vocab } => {
                vocab.iter().position(|c| c == ev.value.trim()).map_or(-1.0, |i| i as f64)
            }
        };
        let hour = ev.time.floor() as usize;
        let cell = hour * schema.len() + var;
        if ev.time >= latest[cell] {
            latest[cell] = ev.time;
            record.set(hour, var, value);
        }
    }
    Ok(record)
}

/// Training-split statistics used for imputation and normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortStats {
    /// Per raw variable: mean of observed values (continuous) or the modal
    /// category index (categorical); `None` when never observed.
    pub averages: Vec<Option<f64>>,
    /// Per encoded column.
    pub means: Vec<f64>,
    /// Per encoded column, population standard deviation.
    pub stds: Vec<f64>,
}

/// Fills gaps with the most recent earlier value of the same variable;
/// leading gaps take the training average, or `-1` when none exists.
pub fn forward_impute(record: &PatientRecord, stats: &CohortStats) -> Result<PatientRecord, DataError> {
    if stats.averages.len() != record.vars {
        return Err(DataError::ShapeMismatch(format!(
            "record '{}' has {} variables, stats cover {}",
            record.patient_id,
            record.vars,
            stats.averages.len()
        )));
    }
    let mut out = record.clone();
    for v in 0..record.vars {
        let mut carry: Option<f64> = None;
        for t in 0..record.hours {
            let i = t * record.vars + v;
            if record.missing[i] {
                out.grid[i] = carry.or(stats.averages[v]).unwrap_or(-1.0);
                out.missing[i] = false;
            } else {
                carry = Some(record.grid[i]);
            }
        }
    }
    Ok(out)
}

/// Encoded hours × columns matrix with any out-of-vocabulary notes.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub matrix: Tensor,
    pub warnings: Vec<String>,
}

fn encode_raw(record: &PatientRecord, schema: &VariableSchema) -> Result<(Vec<f64>, Vec<String>), DataError> {
    if record.vars != schema.len() {
        return Err(DataError::ShapeMismatch(format!(
            "record '{}' has {} variables, schema has {}",
            record.patient_id,
            record.vars,
            schema.len()
        )));
    }
    if !record.is_dense() {
        return Err(DataError::NotImputed(record.patient_id.clone()));
    }
    let width = schema.encoded_width();
    let ranges = schema.column_ranges();
    let mut out = vec![0.0; record.hours * width];
    let mut warnings = Vec::new();
    for t in 0..record.hours {
        let row = &mut out[t * width..(t + 1) * width];
        for (v, spec) in schema.variables.iter().enumerate() {
            let x = record.grid[t * record.vars + v];
            match &spec.kind {
                VariableKind::Continuous => row[ranges[v].start] = x,
                VariableKind::Categorical { vocab } => {
                    let k = x.round();
                    if k >= 0.0 && (k as usize) < vocab.len() && k == x {
                        row[ranges[v].start + k as usize] = 1.0;
                    } else {
                        warnings.push(format!(
                            "patient '{}' hour {t}: value {x} of '{}' outside vocabulary; encoded as zeros",
                            record.patient_id, spec.name
                        ));
                    }
                }
            }
        }
    }
    Ok((out, warnings))
}

/// One-hot encodes categorical variables and z-normalizes continuous columns.
pub fn encode_and_normalize(
    record: &PatientRecord,
    schema: &VariableSchema,
    stats: &CohortStats,
) -> Result<Encoded, DataError> {
    let width = schema.encoded_width();
    if stats.means.len() != width || stats.stds.len() != width {
        return Err(DataError::ShapeMismatch(format!(
            "stats cover {} columns, schema encodes {width}",
            stats.means.len()
        )));
    }
    let (mut out, warnings) = encode_raw(record, schema)?;
    let cont = schema.continuous_columns();
    for row in out.chunks_mut(width) {
        for c in 0..width {
            if cont[c] {
                row[c] = (row[c] - stats.means[c]) / stats.stds[c].max(STD_FLOOR);
            }
        }
    }
    let matrix = Tensor::new(vec![record.hours, width], out).map_err(|e| DataError::ShapeMismatch(e.to_string()))?;
    Ok(Encoded { matrix, warnings })
}

/// Inverse of the normalization step on continuous columns.
pub fn denormalize(matrix: &Tensor, schema: &VariableSchema, stats: &CohortStats) -> Tensor {
    let width = schema.encoded_width();
    let cont = schema.continuous_columns();
    let mut out = matrix.clone();
    for row in out.data_mut().chunks_mut(width) {
        for c in 0..width {
            if cont[c] {
                row[c] = row[c] * stats.stds[c].max(STD_FLOOR) + stats.means[c];
            }
        }
    }
    out
}

/// Fits imputation averages and column statistics on training records only.
pub fn fit_stats(train: &[&PatientRecord], schema: &VariableSchema) -> Result<CohortStats, DataError> {
    let vars = schema.len();
    let mut averages = Vec::with_capacity(vars);
    for (v, spec) in schema.variables.iter().enumerate() {
        let observed = train.iter().flat_map(|r| (0..r.hours).filter_map(move |t| r.get(t, v)));
        let avg = match &spec.kind {
            VariableKind::Continuous => {
                let (sum, n) = observed.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
                (n > 0).then(|| sum / n as f64)
            }
            VariableKind::Categorical { vocab } => {
                let mut counts = vec![0usize; vocab.len()];
                for x in observed {
                    if x >= 0.0 && (x as usize) < vocab.len() {
                        counts[x as usize] += 1;
                    }
                }
                // first modal index wins ties
                let best = counts.iter().enumerate().fold(None, |best: Option<(usize, usize)>, (i, &c)| match best {
                    Some((_, bc)) if bc >= c => best,
                    _ if c > 0 => Some((i, c)),
                    _ => best,
                });
                best.map(|(i, _)| i as f64)
            }
        };
        averages.push(avg);
    }

    let width = schema.encoded_width();
    let provisional = CohortStats {
        averages,
        means: vec![0.0; width],
        stds: vec![1.0; width],
    };
    let mut sum = vec![0.0; width];
    let mut sq = vec![0.0; width];
    let mut rows = 0usize;
    let mut encoded = Vec::with_capacity(train.len());
    for r in train {
        let dense = forward_impute(r, &provisional)?;
        let (m, _) = encode_raw(&dense, schema)?;
        for row in m.chunks(width) {
            for c in 0..width {
                sum[c] += row[c];
            }
        }
        rows += dense.hours;
        encoded.push(m);
    }
    let means: Vec<f64> = sum.iter().map(|s| if rows > 0 { s / rows as f64 } else { 0.0 }).collect();
    for m in &encoded {
        for row in m.chunks(width) {
            for c in 0..width {
                let d = row[c] - means[c];
                sq[c] += d * d;
            }
        }
    }
    let stds = sq.iter().map(|s| if rows > 0 { (s / rows as f64).sqrt() } else { 0.0 }).collect();
    Ok(CohortStats {
        averages: provisional.averages,
        means,
        stds,
    })
}

/// Impute → encode → normalize for every record, returning `[N, T, V_enc]`.
pub fn preprocess_cohort(
    records: &[&PatientRecord],
    schema: &VariableSchema,
    stats: &CohortStats,
) -> Result<(Tensor, Vec<String>), DataError> {
    let mut mats = Vec::with_capacity(records.len());
    let mut warnings = Vec::new();
    for r in records {
        let dense = forward_impute(r, stats)?;
        let enc = encode_and_normalize(&dense, schema, stats)?;
        warnings.extend(enc.warnings);
        mats.push(enc.matrix);
    }
    let stacked = Tensor::stack(&mats).map_err(|e| DataError::ShapeMismatch(e.to_string()))?;
    Ok((stacked, warnings))
}
