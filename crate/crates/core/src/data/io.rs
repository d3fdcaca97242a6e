//! On-disk cohort layout: `events.csv` (`patient_id,hour,variable,value`),
//! `labels.csv` (`patient_id,label`) and `schema.json`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{discretize, DataError, Event, PatientRecord, VariableKind, VariableSchema};

pub const EVENTS_FILE: &str = "events.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const SCHEMA_FILE: &str = "schema.json";

#[derive(Debug, Serialize, Deserialize)]
struct EventRow {
    patient_id: String,
    hour: f64,
    variable: String,
    value: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    patient_id: String,
    label: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> DataError + '_ {
    move |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| DataError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| DataError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_schema(path: &Path) -> Result<VariableSchema, DataError> {
    read_json(path)
}

/// Labels in file order.
pub fn read_labels(path: &Path) -> Result<Vec<(String, u8)>, DataError> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut out = Vec::new();
    for row in rdr.deserialize::<LabelRow>() {
        let row = row.map_err(csv_err(path))?;
        let label = match row.label.trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(DataError::BadLabel {
                    id: row.patient_id,
                    label: other.to_string(),
                })
            }
        };
        out.push((row.patient_id, label));
    }
    Ok(out)
}

/// Events grouped by patient, each group in file order.
pub fn read_events(path: &Path) -> Result<HashMap<String, Vec<Event>>, DataError> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut out: HashMap<String, Vec<Event>> = HashMap::new();
    for row in rdr.deserialize::<EventRow>() {
        let row = row.map_err(csv_err(path))?;
        out.entry(row.patient_id)
            .or_default()
            .push(Event::new(row.hour, row.variable, row.value));
    }
    Ok(out)
}

/// Loads and discretizes a cohort directory; patients follow `labels.csv` order.
pub fn load_cohort(dir: &Path, horizon: usize) -> Result<(VariableSchema, Vec<PatientRecord>), DataError> {
    let schema = read_schema(&dir.join(SCHEMA_FILE))?;
    let labels = read_labels(&dir.join(LABELS_FILE))?;
    let mut events = read_events(&dir.join(EVENTS_FILE))?;
    let records = labels
        .iter()
        .map(|(id, label)| {
            let evs = events.remove(id).unwrap_or_default();
            discretize(id, *label, &evs, &schema, horizon)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((schema, records))
}

/// Writes every observed cell of `records` as one event at the start of its hour.
pub fn write_cohort(dir: &Path, schema: &VariableSchema, records: &[PatientRecord]) -> Result<Vec<PathBuf>, DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let schema_path = dir.join(SCHEMA_FILE);
    write_json(&schema_path, schema)?;

    let events_path = dir.join(EVENTS_FILE);
    let mut w = csv::Writer::from_path(&events_path).map_err(csv_err(&events_path))?;
    for r in records {
        for t in 0..r.hours {
            for (v, spec) in schema.variables.iter().enumerate() {
                let Some(x) = r.get(t, v) else { continue };
                let value = match &spec.kind {
                    VariableKind::Continuous => x.to_string(),
                    VariableKind::Categorical { vocab } => {
                        vocab.get(x as usize).filter(|_| x >= 0.0).cloned().unwrap_or_else(|| "?".into())
                    }
                };
                w.serialize(EventRow {
                    patient_id: r.patient_id.clone(),
                    hour: t as f64,
                    variable: spec.name.clone(),
                    value,
                })
                .map_err(csv_err(&events_path))?;
            }
        }
    }
    w.flush().map_err(io_err(&events_path))?;

    let labels_path = dir.join(LABELS_FILE);
    let labels: Vec<(String, u8)> = records.iter().map(|r| (r.patient_id.clone(), r.label)).collect();
    write_labels(&labels_path, &labels)?;
    Ok(vec![events_path, labels_path, schema_path])
}

pub fn write_labels(path: &Path, labels: &[(String, u8)]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for (id, label) in labels {
        w.serialize(LabelRow {
            patient_id: id.clone(),
            label: label.to_string(),
        })
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// One row per hour: `hour` followed by `columns.len()` values.
pub fn write_matrix_csv(path: &Path, columns: &[String], values: &[f64]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let header = std::iter::once("hour").chain(columns.iter().map(String::as_str));
    w.write_record(header).map_err(csv_err(path))?;
    for (t, row) in values.chunks(columns.len().max(1)).enumerate() {
        let fields = std::iter::once(t.to_string()).chain(row.iter().map(f64::to_string));
        w.write_record(fields).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a matrix written by [`write_matrix_csv`], returning the column names
/// and the row-major values without the hour column.
pub fn read_matrix_csv(path: &Path) -> Result<(Vec<String>, Vec<f64>), DataError> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let columns: Vec<String> = rdr.headers().map_err(csv_err(path))?.iter().skip(1).map(String::from).collect();
    let mut values = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err(path))?;
        for (field, name) in rec.iter().skip(1).zip(&columns) {
            let v = field.parse::<f64>().map_err(|_| DataError::BadValue {
                variable: name.clone(),
                value: field.to_string(),
            })?;
            values.push(v);
        }
    }
    Ok((columns, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    #[test]
    fn cohort_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            n_pos: 3,
            n_neg: 4,
            ..Default::default()
        };
        let cohort = generate_synthetic(&spec).unwrap();
        write_cohort(dir.path(), &cohort.schema, &cohort.records).unwrap();
        let (schema, records) = load_cohort(dir.path(), spec.hours).unwrap();
        assert_eq!(schema, cohort.schema);
        assert_eq!(records, cohort.records);
    }

    #[test]
    fn bad_label_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        fs::write(&path, "patient_id,label\na,1\nb,2\n").unwrap();
        assert!(matches!(read_labels(&path), Err(DataError::BadLabel { .. })));
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_schema(Path::new("/nonexistent/schema.json")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/schema.json"));
    }
}
