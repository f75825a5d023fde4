//! Dataset export and import: a CSV file for rows, a JSON sidecar for the
//! schema the CSV cannot carry (tags, label column, location columns,
//! column kinds).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Column, ColumnValues, DataError, UserDataset};

#[derive(Serialize, Deserialize)]
struct SidecarColumn {
    name: String,
    #[serde(default)]
    tags: Vec<String>,
    kind: String,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    user_id: String,
    label_column: String,
    location_columns: Option<(String, String)>,
    columns: Vec<SidecarColumn>,
}

fn kind_name(values: &ColumnValues) -> &'static str {
    match values {
        ColumnValues::Float(_) => "float",
        ColumnValues::Int(_) => "int",
        ColumnValues::Categorical(_) => "categorical",
    }
}

/// Renders a dataset as `(csv, sidecar_json)`. Float cells print in the
/// shortest form that parses back to the identical value, so a round trip
/// is exact.
pub fn dataset_to_csv(d: &UserDataset) -> (String, String) {
    let sidecar = Sidecar {
        user_id: d.user_id().to_string(),
        label_column: d.label_column().to_string(),
        location_columns: d
            .location_columns()
            .map(|(a, b)| (a.to_string(), b.to_string())),
        columns: d
            .columns()
            .iter()
            .map(|c| SidecarColumn {
                name: c.name.clone(),
                tags: c.tags.iter().cloned().collect(),
                kind: kind_name(&c.values).to_string(),
            })
            .collect(),
    };
    let sidecar_json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(d.columns().iter().map(|c| c.name.as_str()))
        .expect("writing to memory");
    for row in 0..d.n_rows() {
        let record: Vec<String> = d
            .columns()
            .iter()
            .map(|c| match &c.values {
                ColumnValues::Float(v) => v[row].to_string(),
                ColumnValues::Int(v) => v[row].to_string(),
                ColumnValues::Categorical(v) => v[row].clone(),
            })
            .collect();
        w.write_record(&record).expect("writing to memory");
    }
    let csv_text = String::from_utf8(w.into_inner().expect("writing to memory"))
        .expect("csv output is UTF-8");
    (csv_text, sidecar_json)
}

/// Parses a dataset back from its CSV text and sidecar JSON, validating the
/// header against the sidecar schema and every cell against its column
/// kind.
pub fn dataset_from_csv(csv_text: &str, sidecar_json: &str) -> Result<UserDataset, DataError> {
    let sidecar: Sidecar = serde_json::from_str(sidecar_json)?;
    let mut reader = csv::Reader::from_reader(csv_text.as_bytes());

    let header = reader.headers()?.clone();
    let names: Vec<&str> = sidecar.columns.iter().map(|c| c.name.as_str()).collect();
    let header_names: Vec<&str> = header.iter().collect();
    if header_names != names {
        return Err(DataError::SchemaMismatch(format!(
            "csv header {header_names:?} does not match sidecar columns {names:?}"
        )));
    }

    enum Builder {
        Float(Vec<f64>),
        Int(Vec<i64>),
        Categorical(Vec<String>),
    }
    let mut builders: Vec<Builder> = sidecar
        .columns
        .iter()
        .map(|c| match c.kind.as_str() {
            "float" => Ok(Builder::Float(Vec::new())),
            "int" => Ok(Builder::Int(Vec::new())),
            "categorical" => Ok(Builder::Categorical(Vec::new())),
            other => Err(DataError::SchemaMismatch(format!(
                "column `{}` has unknown kind `{other}`",
                c.name
            ))),
        })
        .collect::<Result<_, _>>()?;

    for (row, record) in reader.records().enumerate() {
        let record = record?;
        for ((cell, builder), spec) in record.iter().zip(&mut builders).zip(&sidecar.columns) {
            match builder {
                Builder::Float(v) => v.push(cell.parse().map_err(|_| {
                    DataError::SchemaMismatch(format!(
                        "row {row}, column `{}`: `{cell}` is not a float",
                        spec.name
                    ))
                })?),
                Builder::Int(v) => v.push(cell.parse().map_err(|_| {
                    DataError::SchemaMismatch(format!(
                        "row {row}, column `{}`: `{cell}` is not an integer",
                        spec.name
                    ))
                })?),
                Builder::Categorical(v) => v.push(cell.to_string()),
            }
        }
    }

    let columns: Vec<Column> = builders
        .into_iter()
        .zip(&sidecar.columns)
        .map(|(b, spec)| Column {
            name: spec.name.clone(),
            tags: spec.tags.iter().cloned().collect(),
            values: match b {
                Builder::Float(v) => ColumnValues::Float(v),
                Builder::Int(v) => ColumnValues::Int(v),
                Builder::Categorical(v) => ColumnValues::Categorical(v),
            },
        })
        .collect();
    UserDataset::new(
        &sidecar.user_id,
        columns,
        &sidecar.label_column,
        sidecar
            .location_columns
            .as_ref()
            .map(|(a, b)| (a.as_str(), b.as_str())),
    )
}

/// Writes the CSV and sidecar files for one dataset.
pub fn write_dataset(
    d: &UserDataset,
    csv_path: &Path,
    sidecar_path: &Path,
) -> Result<(), DataError> {
    let (csv_text, sidecar_json) = dataset_to_csv(d);
    fs::write(csv_path, csv_text)?;
    fs::write(sidecar_path, sidecar_json)?;
    Ok(())
}

/// Reads a dataset from its CSV and sidecar files.
pub fn read_dataset(csv_path: &Path, sidecar_path: &Path) -> Result<UserDataset, DataError> {
    let csv_text = fs::read_to_string(csv_path)?;
    let sidecar_json = fs::read_to_string(sidecar_path)?;
    dataset_from_csv(&csv_text, &sidecar_json)
}
