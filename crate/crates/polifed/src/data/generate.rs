//! Seeded synthetic task generators.
//!
//! Three desk-scale stand-ins for federated workloads: a two-class sensor
//! table with tagged microphone and location columns, a ten-class Gaussian
//! blob problem, and an order-2 Markov next-token task. All generators are
//! deterministic in the seed; users draw from independent RNG streams, so
//! any one user's data is reproducible without generating the others first.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Column, DataError, UserDataset};

/// Which synthetic workload to generate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    /// Two-class behavior table: four informative float features with
    /// 4-sigma class separation, weakly informative `mic`- and `loc`-tagged
    /// sensor columns, a categorical device column, and per-row locations
    /// scattered around each user's home point.
    #[serde(rename = "classification-2class")]
    Classification2Class,
    /// Ten Gaussian blobs in eight dimensions, class means drawn once per
    /// seed.
    #[serde(rename = "multiclass-10")]
    Multiclass10,
    /// Next-token prediction on an order-2 Markov source over an 8-token
    /// alphabet; context tokens arrive one-hot encoded.
    #[serde(rename = "sequence-next-token")]
    SequenceNextToken,
}

const CENTER_LAT: f64 = 37.7749;
const CENTER_LON: f64 = -122.4194;
const SEQ_ALPHABET: usize = 8;
const SEQ_ORDER: usize = 2;

/// Per-user RNG on its own stream; stream 0 is reserved for task-level
/// structure such as class means and Markov transitions.
fn user_rng(seed: u64, user: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(1 + user as u64);
    rng
}

fn normal(rng: &mut ChaCha20Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Generates one dataset per user, deterministically in `seed`.
pub fn generate_task(
    kind: TaskKind,
    n_users: usize,
    rows_per_user: usize,
    seed: u64,
) -> Result<Vec<UserDataset>, DataError> {
    if n_users == 0 || rows_per_user == 0 {
        return Err(DataError::InvalidArg(format!(
            "need at least one user and one row, got {n_users} users x {rows_per_user} rows"
        )));
    }
    let datasets = match kind {
        TaskKind::Classification2Class => (0..n_users)
            .map(|u| behavior_user(u, rows_per_user, seed))
            .collect::<Result<Vec<_>, _>>()?,
        TaskKind::Multiclass10 => {
            let mut global = ChaCha20Rng::seed_from_u64(seed);
            let means: Vec<Vec<f64>> = (0..10)
                .map(|_| (0..8).map(|_| 2.0 * normal(&mut global)).collect())
                .collect();
            (0..n_users)
                .map(|u| blob_user(u, rows_per_user, seed, &means))
                .collect::<Result<Vec<_>, _>>()?
        }
        TaskKind::SequenceNextToken => {
            let mut global = ChaCha20Rng::seed_from_u64(seed);
            let dominant: Vec<usize> = (0..SEQ_ALPHABET.pow(SEQ_ORDER as u32))
                .map(|_| global.gen_range(0..SEQ_ALPHABET))
                .collect();
            (0..n_users)
                .map(|u| markov_user(u, rows_per_user, seed, &dominant))
                .collect::<Result<Vec<_>, _>>()?
        }
    };
    Ok(datasets)
}

fn behavior_user(user: usize, rows: usize, seed: u64) -> Result<UserDataset, DataError> {
    let mut rng = user_rng(seed, user);
    let home_lat = CENTER_LAT + rng.gen_range(-0.05..0.05);
    let home_lon = CENTER_LON + rng.gen_range(-0.05..0.05);

    let mut features = vec![Vec::with_capacity(rows); 4];
    let mut mic = Vec::with_capacity(rows);
    let mut loc_visits = Vec::with_capacity(rows);
    let mut device = Vec::with_capacity(rows);
    let mut lat = Vec::with_capacity(rows);
    let mut lon = Vec::with_capacity(rows);
    let mut label = Vec::with_capacity(rows);
    const DEVICES: [&str; 3] = ["phone", "tablet", "watch"];
    for _ in 0..rows {
        let y = rng.gen_range(0..2i64);
        // Class means at -1 and +1 with std 0.5: a 4-sigma separation per
        // feature.
        let mean = (2 * y - 1) as f64;
        for f in features.iter_mut() {
            f.push(mean + 0.5 * normal(&mut rng));
        }
        mic.push(0.4 * y as f64 + normal(&mut rng));
        loc_visits.push(0.4 * y as f64 + normal(&mut rng));
        device.push(DEVICES[rng.gen_range(0..DEVICES.len())].to_string());
        lat.push(home_lat + 0.001 * normal(&mut rng));
        lon.push(home_lon + 0.001 * normal(&mut rng));
        label.push(y);
    }

    let mut columns: Vec<Column> = features
        .into_iter()
        .enumerate()
        .map(|(j, v)| Column::float(&format!("f{j}"), v))
        .collect();
    columns.push(Column::float("mic_level", mic).tagged("mic"));
    columns.push(Column::float("loc_visits", loc_visits).tagged("loc"));
    columns.push(Column::categorical("device", device));
    columns.push(Column::float("lat", lat).tagged("loc"));
    columns.push(Column::float("lon", lon).tagged("loc"));
    columns.push(Column::int("label", label));
    UserDataset::new(
        &format!("user-{user:03}"),
        columns,
        "label",
        Some(("lat", "lon")),
    )
}

fn blob_user(
    user: usize,
    rows: usize,
    seed: u64,
    means: &[Vec<f64>],
) -> Result<UserDataset, DataError> {
    let mut rng = user_rng(seed, user);
    let mut features = vec![Vec::with_capacity(rows); 8];
    let mut label = Vec::with_capacity(rows);
    for _ in 0..rows {
        let c = rng.gen_range(0..means.len());
        for (f, m) in features.iter_mut().zip(&means[c]) {
            f.push(m + normal(&mut rng));
        }
        label.push(c as i64);
    }
    let mut columns: Vec<Column> = features
        .into_iter()
        .enumerate()
        .map(|(j, v)| Column::float(&format!("f{j}"), v))
        .collect();
    columns.push(Column::int("label", label));
    UserDataset::new(&format!("user-{user:03}"), columns, "label", None)
}

fn markov_user(
    user: usize,
    rows: usize,
    seed: u64,
    dominant: &[usize],
) -> Result<UserDataset, DataError> {
    let mut rng = user_rng(seed, user);
    let mut tokens = Vec::with_capacity(rows + SEQ_ORDER);
    for _ in 0..SEQ_ORDER {
        tokens.push(rng.gen_range(0..SEQ_ALPHABET));
    }
    for i in 0..rows {
        let ctx = tokens[i] * SEQ_ALPHABET + tokens[i + 1];
        // The dominant next token fires 80% of the time; otherwise one of
        // the remaining seven, uniformly.
        let next = if rng.gen::<f64>() < 0.8 {
            dominant[ctx]
        } else {
            let r = rng.gen_range(0..SEQ_ALPHABET - 1);
            if r >= dominant[ctx] {
                r + 1
            } else {
                r
            }
        };
        tokens.push(next);
    }

    let mut one_hot = vec![vec![0.0f64; rows]; 2 * SEQ_ALPHABET];
    let mut label = Vec::with_capacity(rows);
    for i in 0..rows {
        one_hot[tokens[i]][i] = 1.0;
        one_hot[SEQ_ALPHABET + tokens[i + 1]][i] = 1.0;
        label.push(tokens[i + 2] as i64);
    }
    let mut columns = Vec::with_capacity(2 * SEQ_ALPHABET + 1);
    for (j, v) in one_hot.into_iter().enumerate() {
        let name = if j < SEQ_ALPHABET {
            format!("p2_{j}")
        } else {
            format!("p1_{}", j - SEQ_ALPHABET)
        };
        columns.push(Column::float(&name, v));
    }
    columns.push(Column::int("label", label));
    UserDataset::new(&format!("user-{user:03}"), columns, "label", None)
}
