//! Synthetic per-user datasets: schema-tagged tables, sensor filtering,
//! geofencing, and non-IID partitioning.
//!
//! A [`UserDataset`] is a small column table with schema metadata the policy
//! layer cares about: columns carry tags naming their sensitive source
//! (`"mic"`, `"loc"`), and an optional pair of columns holds row locations.
//! [`filter_columns`] and [`in_geofence_cond`] are the data-shaping
//! operations policies can mandate; [`dirichlet_partition`] produces the
//! skewed client splits used to stress federated averaging.

mod generate;
mod io;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Dirichlet, Distribution};
use thiserror::Error;

use crate::fl::task::Examples;

pub use generate::{generate_task, TaskKind};
pub use io::{dataset_from_csv, dataset_to_csv, read_dataset, write_dataset};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("no column named `{0}`")]
    UnknownColumn(String),
    #[error("dataset has no location columns")]
    NoLocation,
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
}

/// Values of one column. Every variant stores one value per row.
#[derive(Clone, Debug, PartialEq)]
pub enum ColumnValues {
    Float(Vec<f64>),
    Int(Vec<i64>),
    Categorical(Vec<String>),
}

impl ColumnValues {
    pub fn len(&self) -> usize {
        match self {
            ColumnValues::Float(v) => v.len(),
            ColumnValues::Int(v) => v.len(),
            ColumnValues::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> ColumnValues {
        match self {
            ColumnValues::Float(v) => {
                ColumnValues::Float(idx.iter().map(|&i| v[i]).collect())
            }
            ColumnValues::Int(v) => ColumnValues::Int(idx.iter().map(|&i| v[i]).collect()),
            ColumnValues::Categorical(v) => {
                ColumnValues::Categorical(idx.iter().map(|&i| v[i].clone()).collect())
            }
        }
    }
}

/// A named column with its sensitive-source tags.
#[derive(Clone, Debug, PartialEq)]
pub struct Column {
    pub name: String,
    pub tags: BTreeSet<String>,
    pub values: ColumnValues,
}

impl Column {
    pub fn float(name: &str, values: Vec<f64>) -> Column {
        Column {
            name: name.to_string(),
            tags: BTreeSet::new(),
            values: ColumnValues::Float(values),
        }
    }

    pub fn int(name: &str, values: Vec<i64>) -> Column {
        Column {
            name: name.to_string(),
            tags: BTreeSet::new(),
            values: ColumnValues::Int(values),
        }
    }

    pub fn categorical(name: &str, values: Vec<String>) -> Column {
        Column {
            name: name.to_string(),
            tags: BTreeSet::new(),
            values: ColumnValues::Categorical(values),
        }
    }

    pub fn tagged(mut self, tag: &str) -> Column {
        self.tags.insert(tag.to_string());
        self
    }

    pub fn has_tag(&self, tag: &str) -> bool {
        self.tags.contains(tag)
    }
}

/// One user's table: equal-length columns, a label column, and optionally a
/// (latitude, longitude) column pair for geofencing.
///
/// Generated datasets always hold at least one row, but the type admits
/// empty tables so degenerate fences have a result to return; training
/// rejects emptiness at the point of use.
#[derive(Clone, Debug, PartialEq)]
pub struct UserDataset {
    user_id: String,
    columns: Vec<Column>,
    label_column: String,
    location_columns: Option<(String, String)>,
}

impl UserDataset {
    pub fn new(
        user_id: &str,
        columns: Vec<Column>,
        label_column: &str,
        location_columns: Option<(&str, &str)>,
    ) -> Result<Self, DataError> {
        let mut seen = BTreeSet::new();
        for c in &columns {
            if !seen.insert(c.name.as_str()) {
                return Err(DataError::InvalidArg(format!(
                    "duplicate column `{}`",
                    c.name
                )));
            }
        }
        if let Some(first) = columns.first() {
            let n = first.values.len();
            if columns.iter().any(|c| c.values.len() != n) {
                return Err(DataError::InvalidArg(
                    "columns have differing row counts".into(),
                ));
            }
        }
        let label = columns
            .iter()
            .find(|c| c.name == label_column)
            .ok_or_else(|| DataError::UnknownColumn(label_column.to_string()))?;
        if !matches!(label.values, ColumnValues::Int(_)) {
            return Err(DataError::InvalidArg(format!(
                "label column `{label_column}` must be an integer column"
            )));
        }
        if let Some((lat, lon)) = location_columns {
            for name in [lat, lon] {
                let col = columns
                    .iter()
                    .find(|c| c.name == name)
                    .ok_or_else(|| DataError::UnknownColumn(name.to_string()))?;
                if !matches!(col.values, ColumnValues::Float(_)) {
                    return Err(DataError::InvalidArg(format!(
                        "location column `{name}` must be a float column"
                    )));
                }
            }
        }
        Ok(UserDataset {
            user_id: user_id.to_string(),
            columns,
            label_column: label_column.to_string(),
            location_columns: location_columns.map(|(a, b)| (a.to_string(), b.to_string())),
        })
    }

    pub fn user_id(&self) -> &str {
        &self.user_id
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, |c| c.values.len())
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn label_column(&self) -> &str {
        &self.label_column
    }

    pub fn location_columns(&self) -> Option<(&str, &str)> {
        self.location_columns
            .as_ref()
            .map(|(a, b)| (a.as_str(), b.as_str()))
    }

    /// New dataset holding the given rows in order. Indices may repeat.
    pub fn select_rows(&self, idx: &[usize]) -> Result<UserDataset, DataError> {
        let n = self.n_rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(DataError::InvalidArg(format!(
                "row index {bad} out of range for {n} rows"
            )));
        }
        Ok(UserDataset {
            user_id: self.user_id.clone(),
            columns: self
                .columns
                .iter()
                .map(|c| Column {
                    name: c.name.clone(),
                    tags: c.tags.clone(),
                    values: c.values.select(idx),
                })
                .collect(),
            label_column: self.label_column.clone(),
            location_columns: self.location_columns.clone(),
        })
    }

    /// Splits a pooled dataset into one dataset per assignment list, with
    /// user ids `prefix-000`, `prefix-001`, ...
    pub fn split_by_assignment(
        &self,
        assignment: &[Vec<usize>],
        id_prefix: &str,
    ) -> Result<Vec<UserDataset>, DataError> {
        assignment
            .iter()
            .enumerate()
            .map(|(i, idx)| {
                let mut d = self.select_rows(idx)?;
                d.user_id = format!("{id_prefix}-{i:03}");
                Ok(d)
            })
            .collect()
    }

    /// Numeric training view: features are the float and integer columns in
    /// schema order, excluding the label and location columns; categorical
    /// columns are not encoded and are skipped. Labels come from the label
    /// column and must be non-negative.
    pub fn to_examples(&self) -> Result<Examples, DataError> {
        let n = self.n_rows();
        let mut features = vec![Vec::new(); n];
        for c in &self.columns {
            if c.name == self.label_column || self.is_location_column(&c.name) {
                continue;
            }
            match &c.values {
                ColumnValues::Float(v) => {
                    if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
                        return Err(DataError::InvalidArg(format!(
                            "non-finite value {bad} in column `{}`",
                            c.name
                        )));
                    }
                    for (row, &x) in features.iter_mut().zip(v) {
                        row.push(x);
                    }
                }
                ColumnValues::Int(v) => {
                    for (row, &x) in features.iter_mut().zip(v) {
                        row.push(x as f64);
                    }
                }
                ColumnValues::Categorical(_) => {}
            }
        }
        let labels = match &self.column(&self.label_column).unwrap().values {
            ColumnValues::Int(v) => v
                .iter()
                .map(|&x| {
                    usize::try_from(x).map_err(|_| {
                        DataError::InvalidArg(format!("negative label {x}"))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?,
            _ => unreachable!("label column type is validated at construction"),
        };
        Examples::new(features, labels).map_err(|e| DataError::InvalidArg(e.to_string()))
    }

    fn is_location_column(&self, name: &str) -> bool {
        self.location_columns
            .as_ref()
            .is_some_and(|(a, b)| a == name || b == name)
    }
}

/// Drops every column carrying any of the listed tags. The label column is
/// always retained; if a location column is dropped, the result no longer
/// has locations.
pub fn filter_columns(d: &UserDataset, drop_tags: &[String]) -> UserDataset {
    let dropped: BTreeSet<&str> = drop_tags.iter().map(String::as_str).collect();
    let columns: Vec<Column> = d
        .columns
        .iter()
        .filter(|c| {
            c.name == d.label_column || !c.tags.iter().any(|t| dropped.contains(t.as_str()))
        })
        .cloned()
        .collect();
    let location_columns = d.location_columns.clone().filter(|(lat, lon)| {
        columns.iter().any(|c| c.name == *lat) && columns.iter().any(|c| c.name == *lon)
    });
    UserDataset {
        user_id: d.user_id.clone(),
        columns,
        label_column: d.label_column.clone(),
        location_columns,
    }
}

/// A circular fence on the Earth's surface. A zero radius is degenerate but
/// representable: it keeps only rows exactly at the center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geofence {
    pub center_lat: f64,
    pub center_lon: f64,
    pub radius_m: f64,
}

impl Geofence {
    pub fn new(center_lat: f64, center_lon: f64, radius_m: f64) -> Result<Self, DataError> {
        if !((-90.0..=90.0).contains(&center_lat) && (-180.0..=180.0).contains(&center_lon)) {
            return Err(DataError::InvalidArg(format!(
                "center ({center_lat}, {center_lon}) out of range"
            )));
        }
        if !(radius_m.is_finite() && radius_m >= 0.0) {
            return Err(DataError::InvalidArg(format!(
                "radius {radius_m} must be finite and non-negative"
            )));
        }
        Ok(Geofence {
            center_lat,
            center_lon,
            radius_m,
        })
    }
}

const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Great-circle distance in meters by the haversine formula.
pub fn haversine_m(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (phi1, phi2) = (lat1.to_radians(), lat2.to_radians());
    let dphi = (lat2 - lat1).to_radians();
    let dlambda = (lon2 - lon1).to_radians();
    let a = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().min(1.0).asin()
}

/// Keeps only rows inside the fence. Errors when the dataset has no
/// location columns.
pub fn in_geofence_cond(d: &UserDataset, gf: &Geofence) -> Result<UserDataset, DataError> {
    let (lat_col, lon_col) = d.location_columns().ok_or(DataError::NoLocation)?;
    let lats = match &d.column(lat_col).unwrap().values {
        ColumnValues::Float(v) => v,
        _ => unreachable!("location column type is validated at construction"),
    };
    let lons = match &d.column(lon_col).unwrap().values {
        ColumnValues::Float(v) => v,
        _ => unreachable!("location column type is validated at construction"),
    };
    let keep: Vec<usize> = lats
        .iter()
        .zip(lons)
        .enumerate()
        .filter(|(_, (&lat, &lon))| {
            haversine_m(lat, lon, gf.center_lat, gf.center_lon) <= gf.radius_m
        })
        .map(|(i, _)| i)
        .collect();
    d.select_rows(&keep)
}

/// Splits each class's indices across `n_clients` by a Dirichlet(alpha)
/// proportion draw, the standard recipe for label-skewed federated splits.
/// Every index is assigned exactly once; small alpha concentrates a class
/// on few clients, large alpha approaches a uniform split. Deterministic
/// given the seed. Clients may receive empty lists.
pub fn dirichlet_partition(
    labels: &[usize],
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>, DataError> {
    if n_clients == 0 {
        return Err(DataError::InvalidArg("n_clients must be >= 1".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(DataError::InvalidArg(format!(
            "alpha must be positive and finite, got {alpha}"
        )));
    }
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = vec![Vec::new(); n_clients];
    for (_, mut idx) in by_class {
        idx.shuffle(&mut rng);
        let proportions: Vec<f64> = if n_clients == 1 {
            vec![1.0]
        } else {
            Dirichlet::new_with_size(alpha, n_clients)
                .expect("valid Dirichlet parameters")
                .sample(&mut rng)
        };
        // Quota cuts at the rounded cumulative proportions keep the split
        // exact: the last boundary is pinned to the class size.
        let n = idx.len();
        let mut start = 0usize;
        let mut cum = 0.0;
        for (client, share) in out.iter_mut().zip(&proportions) {
            cum += share;
            let end = ((cum * n as f64).round() as usize).clamp(start, n);
            client.extend_from_slice(&idx[start..end]);
            start = end;
        }
        // Rounding residue, if any, lands on the last client.
        out[n_clients - 1].extend_from_slice(&idx[start..]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> UserDataset {
        UserDataset::new(
            "u0",
            vec![
                Column::float("f0", vec![1.0, 2.0, 3.0]),
                Column::float("mic_level", vec![0.1, 0.2, 0.3]).tagged("mic"),
                Column::float("lat", vec![37.0, 37.1, 37.2]).tagged("loc"),
                Column::float("lon", vec![-122.0, -122.1, -122.2]).tagged("loc"),
                Column::categorical(
                    "device",
                    vec!["phone".into(), "tablet".into(), "phone".into()],
                ),
                Column::int("label", vec![0, 1, 0]),
            ],
            "label",
            Some(("lat", "lon")),
        )
        .unwrap()
    }

    #[test]
    fn construction_validates_schema() {
        let dup = UserDataset::new(
            "u",
            vec![Column::int("a", vec![1]), Column::int("a", vec![2])],
            "a",
            None,
        );
        assert!(dup.is_err());

        let ragged = UserDataset::new(
            "u",
            vec![
                Column::int("label", vec![1]),
                Column::float("f", vec![1.0, 2.0]),
            ],
            "label",
            None,
        );
        assert!(ragged.is_err());

        let no_label = UserDataset::new("u", vec![Column::float("f", vec![1.0])], "label", None);
        assert!(matches!(no_label, Err(DataError::UnknownColumn(_))));

        let float_label =
            UserDataset::new("u", vec![Column::float("label", vec![1.0])], "label", None);
        assert!(float_label.is_err());

        let missing_loc = UserDataset::new(
            "u",
            vec![Column::int("label", vec![1])],
            "label",
            Some(("lat", "lon")),
        );
        assert!(missing_loc.is_err());
    }

    #[test]
    fn filter_drops_tagged_columns_and_nothing_else() {
        let d = sample();
        let filtered = filter_columns(&d, &["mic".into(), "loc".into()]);
        let names: Vec<&str> = filtered.columns().iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, vec!["f0", "device", "label"]);
        assert_eq!(filtered.location_columns(), None);
        assert_eq!(filtered.n_rows(), 3);

        assert_eq!(filter_columns(&d, &[]), d);
        assert_eq!(filter_columns(&d, &["nonexistent".into()]), d);
    }

    #[test]
    fn filter_is_idempotent_and_keeps_a_tagged_label() {
        let d = sample();
        let tags = vec!["mic".to_string(), "loc".to_string()];
        let once = filter_columns(&d, &tags);
        let twice = filter_columns(&once, &tags);
        assert_eq!(once, twice);

        let tagged_label = UserDataset::new(
            "u",
            vec![
                Column::float("f", vec![1.0]),
                Column {
                    name: "label".into(),
                    tags: [String::from("mic")].into(),
                    values: ColumnValues::Int(vec![1]),
                },
            ],
            "label",
            None,
        )
        .unwrap();
        let kept = filter_columns(&tagged_label, &["mic".into()]);
        assert!(kept.column("label").is_some());
    }

    #[test]
    fn geofence_validation_and_distance_basics() {
        assert!(Geofence::new(91.0, 0.0, 1.0).is_err());
        assert!(Geofence::new(0.0, 0.0, -1.0).is_err());
        assert!(Geofence::new(0.0, 0.0, f64::INFINITY).is_err());
        assert!(Geofence::new(0.0, 0.0, 0.0).is_ok());

        assert_eq!(haversine_m(37.0, -122.0, 37.0, -122.0), 0.0);
        // One degree of latitude is about 111.2 km on this sphere.
        let d = haversine_m(37.0, -122.0, 38.0, -122.0);
        assert!((d - 111_195.0).abs() < 100.0, "got {d}");
        // Antipodal points are half the circumference apart.
        let half = std::f64::consts::PI * EARTH_RADIUS_M;
        assert!((haversine_m(0.0, 0.0, 0.0, 180.0) - half).abs() < 1.0);
    }

    #[test]
    fn zero_radius_fence_keeps_only_exact_center_rows() {
        let d = sample();
        let off_center = Geofence::new(40.0, -100.0, 0.0).unwrap();
        assert_eq!(in_geofence_cond(&d, &off_center).unwrap().n_rows(), 0);

        let at_row = Geofence::new(37.1, -122.1, 0.0).unwrap();
        let kept = in_geofence_cond(&d, &at_row).unwrap();
        assert_eq!(kept.n_rows(), 1);
        assert_eq!(
            kept.column("label").unwrap().values,
            ColumnValues::Int(vec![1])
        );
    }

    #[test]
    fn all_inclusive_fence_is_identity_and_missing_location_errors() {
        let d = sample();
        let everywhere = Geofence::new(0.0, 0.0, 2.1e7).unwrap();
        assert_eq!(in_geofence_cond(&d, &everywhere).unwrap(), d);

        let no_loc = filter_columns(&d, &["loc".into()]);
        assert!(matches!(
            in_geofence_cond(&no_loc, &everywhere),
            Err(DataError::NoLocation)
        ));
    }

    #[test]
    fn enlarging_the_radius_never_removes_rows() {
        let d = sample();
        let mut prev = 0;
        for radius in [0.0, 5_000.0, 10_000.0, 20_000.0, 40_000.0] {
            let fence = Geofence::new(37.0, -122.0, radius).unwrap();
            let n = in_geofence_cond(&d, &fence).unwrap().n_rows();
            assert!(n >= prev, "radius {radius} kept {n} < {prev}");
            prev = n;
        }
        assert_eq!(prev, 3);
    }

    #[test]
    fn to_examples_uses_numeric_non_label_non_location_columns() {
        let d = sample();
        let ex = d.to_examples().unwrap();
        // f0 and mic_level only: label, lat/lon, and the categorical
        // column are excluded.
        assert_eq!(ex.dim(), 2);
        assert_eq!(ex.len(), 3);
        assert_eq!(ex.row(0), (&[1.0, 0.1][..], 0));
        assert_eq!(ex.row(1), (&[2.0, 0.2][..], 1));

        let negative = UserDataset::new(
            "u",
            vec![Column::int("label", vec![-1])],
            "label",
            None,
        )
        .unwrap();
        assert!(negative.to_examples().is_err());
    }

    #[test]
    fn select_rows_checks_bounds_and_preserves_schema() {
        let d = sample();
        let s = d.select_rows(&[2, 0]).unwrap();
        assert_eq!(s.n_rows(), 2);
        assert_eq!(
            s.column("f0").unwrap().values,
            ColumnValues::Float(vec![3.0, 1.0])
        );
        assert_eq!(s.location_columns(), Some(("lat", "lon")));
        assert!(d.select_rows(&[3]).is_err());
    }

    #[test]
    fn dirichlet_partition_is_a_partition() {
        let labels: Vec<usize> = (0..500).map(|i| i % 7).collect();
        let parts = dirichlet_partition(&labels, 13, 0.9, 42).unwrap();
        assert_eq!(parts.len(), 13);
        let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
        all.sort_unstable();
        let want: Vec<usize> = (0..500).collect();
        assert_eq!(all, want);
    }

    #[test]
    fn dirichlet_partition_is_deterministic_and_validates() {
        let labels: Vec<usize> = (0..100).map(|i| i % 3).collect();
        let a = dirichlet_partition(&labels, 5, 0.5, 7).unwrap();
        let b = dirichlet_partition(&labels, 5, 0.5, 7).unwrap();
        assert_eq!(a, b);
        let c = dirichlet_partition(&labels, 5, 0.5, 8).unwrap();
        assert_ne!(a, c);

        let single = dirichlet_partition(&labels, 1, 0.5, 7).unwrap();
        assert_eq!(single[0].len(), 100);

        assert!(dirichlet_partition(&labels, 0, 0.5, 7).is_err());
        assert!(dirichlet_partition(&labels, 5, 0.0, 7).is_err());
        assert!(dirichlet_partition(&labels, 5, f64::NAN, 7).is_err());
    }

    #[test]
    fn split_by_assignment_names_users() {
        let d = sample();
        let parts = d
            .split_by_assignment(&[vec![0, 1], vec![2]], "client")
            .unwrap();
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[0].user_id(), "client-000");
        assert_eq!(parts[1].user_id(), "client-001");
        assert_eq!(parts[1].n_rows(), 1);
    }
}
