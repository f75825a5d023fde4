//! Training tasks with closed-form gradients.
//!
//! A task owns the model architecture: it creates parameter containers,
//! scores feature rows, and computes the mean batch loss and its exact
//! gradient. The two reference tasks are binary logistic regression and a
//! one-hidden-layer tanh perceptron with a softmax output; both keep their
//! gradients in lockstep with central finite differences of the loss.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{FlError, ModelParams, ParamEntry};

/// Dense numeric training set: one feature row and one class label per
/// example. All rows share a dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct Examples {
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl Examples {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self, FlError> {
        if features.len() != labels.len() {
            return Err(FlError::InvalidArg(format!(
                "{} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        if let Some(first) = features.first() {
            let dim = first.len();
            if features.iter().any(|r| r.len() != dim) {
                return Err(FlError::InvalidArg("ragged feature rows".into()));
            }
        }
        Ok(Examples { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Feature dimension; zero for an empty set.
    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn row(&self, i: usize) -> (&[f64], usize) {
        (&self.features[i], self.labels[i])
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.features
            .iter()
            .map(Vec::as_slice)
            .zip(self.labels.iter().copied())
    }

    /// New set holding the given rows, in order.
    pub fn select(&self, idx: &[usize]) -> Examples {
        Examples {
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Rows widened to `dim` features by appending zeros: a feature column a
    /// dataset never carried reads as zero signal. Errors when rows are
    /// already wider than `dim`.
    pub fn pad_features(&self, dim: usize) -> Result<Examples, FlError> {
        let have = self.dim();
        if !self.is_empty() && have > dim {
            return Err(FlError::InvalidArg(format!(
                "{have} features per row does not fit a {dim}-input model"
            )));
        }
        let features = self
            .features
            .iter()
            .map(|r| {
                let mut row = r.clone();
                row.resize(dim, 0.0);
                row
            })
            .collect();
        Ok(Examples {
            features,
            labels: self.labels.clone(),
        })
    }
}

/// A differentiable model: parameters, per-row class scores, and the mean
/// loss with its exact gradient over a batch (given as row indices into the
/// dataset).
pub trait DifferentiableTask: Send + Sync {
    /// Fresh seeded parameters with this task's names and shapes.
    fn init_params(&self, seed: u64) -> ModelParams;

    /// Mean loss over the rows `idx` of `data`.
    fn loss(&self, params: &ModelParams, data: &Examples, idx: &[usize]) -> f64;

    /// Gradient of `loss` with respect to `params`, conformable with them.
    fn gradient(&self, params: &ModelParams, data: &Examples, idx: &[usize]) -> ModelParams;

    /// Per-class probabilities for one feature row; sums to 1.
    fn scores(&self, params: &ModelParams, row: &[f64]) -> Vec<f64>;

    fn input_dim(&self) -> usize;

    fn n_classes(&self) -> usize;
}

/// Fraction of rows whose argmax score equals the label.
pub fn accuracy(task: &dyn DifferentiableTask, params: &ModelParams, data: &Examples) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let hits = data
        .rows()
        .filter(|(x, y)| {
            let s = task.scores(params, x);
            let best = (0..s.len()).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
            best == *y
        })
        .count();
    hits as f64 / data.len() as f64
}

/// Area under the ROC curve for a binary task, from the class-1 score.
/// Computed by the rank statistic with midranks for ties. `None` when either
/// class is absent.
pub fn binary_auc(
    task: &dyn DifferentiableTask,
    params: &ModelParams,
    data: &Examples,
) -> Option<f64> {
    let scored: Vec<(f64, usize)> = data
        .rows()
        .map(|(x, y)| (task.scores(params, x)[1], y))
        .collect();
    let n_pos = scored.iter().filter(|(_, y)| *y == 1).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[a].0.total_cmp(&scored[b].0));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scored[order[j]].0 == scored[order[i]].0 {
            j += 1;
        }
        // Ranks are 1-based; tied scores share the midrank of their block.
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            if scored[k].1 == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

fn seeded_normals(rng: &mut ChaCha20Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

/// Binary logistic regression: `p = sigmoid(w . x + b)`, mean binary
/// cross-entropy loss. Entries: `weights [dim]`, `bias [1]`.
#[derive(Clone, Debug)]
pub struct LogisticRegression {
    pub dim: usize,
}

impl LogisticRegression {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "feature dimension must be positive");
        LogisticRegression { dim }
    }

    fn logit(&self, params: &ModelParams, x: &[f64]) -> f64 {
        let w = &params.entry("weights").expect("weights entry").values;
        let b = params.entry("bias").expect("bias entry").values[0];
        debug_assert_eq!(w.len(), x.len());
        w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + b
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl DifferentiableTask for LogisticRegression {
    fn init_params(&self, seed: u64) -> ModelParams {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let std = 1.0 / (self.dim as f64).sqrt();
        ModelParams::new(vec![
            ParamEntry::new("weights", vec![self.dim], seeded_normals(&mut rng, self.dim, std)),
            ParamEntry::new("bias", vec![1], vec![0.0]),
        ])
        .expect("valid init")
    }

    fn loss(&self, params: &ModelParams, data: &Examples, idx: &[usize]) -> f64 {
        let mut total = 0.0;
        for &i in idx {
            let (x, y) = data.row(i);
            let t = self.logit(params, x);
            // Stable form of -(y ln p + (1-y) ln(1-p)).
            total += t.max(0.0) - t * y as f64 + (-t.abs()).exp().ln_1p();
        }
        total / idx.len() as f64
    }

    fn gradient(&self, params: &ModelParams, data: &Examples, idx: &[usize]) -> ModelParams {
        let mut dw = vec![0.0; self.dim];
        let mut db = 0.0;
        for &i in idx {
            let (x, y) = data.row(i);
            let err = sigmoid(self.logit(params, x)) - y as f64;
            for (dwi, xi) in dw.iter_mut().zip(x) {
                *dwi += err * xi;
            }
            db += err;
        }
        let inv = 1.0 / idx.len() as f64;
        for v in &mut dw {
            *v *= inv;
        }
        ModelParams::new(vec![
            ParamEntry::new("weights", vec![self.dim], dw),
            ParamEntry::new("bias", vec![1], vec![db * inv]),
        ])
        .expect("valid gradient shape")
    }

    fn scores(&self, params: &ModelParams, row: &[f64]) -> Vec<f64> {
        let p = sigmoid(self.logit(params, row));
        vec![1.0 - p, p]
    }

    fn input_dim(&self) -> usize {
        self.dim
    }

    fn n_classes(&self) -> usize {
        2
    }
}

/// One-hidden-layer perceptron: `h = tanh(W1 x + b1)`, softmax over
/// `W2 h + b2`, mean cross-entropy loss. Entries: `w1 [hidden, input]`,
/// `b1 [hidden]`, `w2 [classes, hidden]`, `b2 [classes]`, all row-major.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Mlp {
    pub fn new(input: usize, hidden: usize, classes: usize) -> Self {
        assert!(input > 0 && hidden > 0 && classes > 1, "degenerate layer sizes");
        Mlp {
            input,
            hidden,
            classes,
        }
    }

    /// Hidden activations and output logits for one row.
    fn forward(&self, params: &ModelParams, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let w1 = &params.entry("w1").expect("w1 entry").values;
        let b1 = &params.entry("b1").expect("b1 entry").values;
        let w2 = &params.entry("w2").expect("w2 entry").values;
        let b2 = &params.entry("b2").expect("b2 entry").values;
        debug_assert_eq!(x.len(), self.input);
        let mut h = vec![0.0; self.hidden];
        for j in 0..self.hidden {
            let row = &w1[j * self.input..(j + 1) * self.input];
            let pre: f64 = row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b1[j];
            h[j] = pre.tanh();
        }
        let mut logits = vec![0.0; self.classes];
        for c in 0..self.classes {
            let row = &w2[c * self.hidden..(c + 1) * self.hidden];
            logits[c] = row.iter().zip(&h).map(|(w, hj)| w * hj).sum::<f64>() + b2[c];
        }
        (h, logits)
    }
}

/// Log-sum-exp with the max factored out.
fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

impl DifferentiableTask for Mlp {
    fn init_params(&self, seed: u64) -> ModelParams {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let s1 = 1.0 / (self.input as f64).sqrt();
        let s2 = 1.0 / (self.hidden as f64).sqrt();
        ModelParams::new(vec![
            ParamEntry::new(
                "w1",
                vec![self.hidden, self.input],
                seeded_normals(&mut rng, self.hidden * self.input, s1),
            ),
            ParamEntry::new("b1", vec![self.hidden], vec![0.0; self.hidden]),
            ParamEntry::new(
                "w2",
                vec![self.classes, self.hidden],
                seeded_normals(&mut rng, self.classes * self.hidden, s2),
            ),
            ParamEntry::new("b2", vec![self.classes], vec![0.0; self.classes]),
        ])
        .expect("valid init")
    }

    fn loss(&self, params: &ModelParams, data: &Examples, idx: &[usize]) -> f64 {
        let mut total = 0.0;
        for &i in idx {
            let (x, y) = data.row(i);
            let (_, logits) = self.forward(params, x);
            total += log_sum_exp(&logits) - logits[y];
        }
        total / idx.len() as f64
    }

    fn gradient(&self, params: &ModelParams, data: &Examples, idx: &[usize]) -> ModelParams {
        let w2 = &params.entry("w2").expect("w2 entry").values;
        let mut dw1 = vec![0.0; self.hidden * self.input];
        let mut db1 = vec![0.0; self.hidden];
        let mut dw2 = vec![0.0; self.classes * self.hidden];
        let mut db2 = vec![0.0; self.classes];
        for &i in idx {
            let (x, y) = data.row(i);
            let (h, logits) = self.forward(params, x);
            let lse = log_sum_exp(&logits);
            // dL/dlogit_c = softmax_c - [c == y]
            let mut dlogit: Vec<f64> = logits.iter().map(|&l| (l - lse).exp()).collect();
            dlogit[y] -= 1.0;
            let mut dh = vec![0.0; self.hidden];
            for c in 0..self.classes {
                let g = dlogit[c];
                for j in 0..self.hidden {
                    dw2[c * self.hidden + j] += g * h[j];
                    dh[j] += w2[c * self.hidden + j] * g;
                }
                db2[c] += g;
            }
            for j in 0..self.hidden {
                let dpre = dh[j] * (1.0 - h[j] * h[j]);
                for (k, &xi) in x.iter().enumerate() {
                    dw1[j * self.input + k] += dpre * xi;
                }
                db1[j] += dpre;
            }
        }
        let inv = 1.0 / idx.len() as f64;
        for v in dw1
            .iter_mut()
            .chain(&mut db1)
            .chain(&mut dw2)
            .chain(&mut db2)
        {
            *v *= inv;
        }
        ModelParams::new(vec![
            ParamEntry::new("w1", vec![self.hidden, self.input], dw1),
            ParamEntry::new("b1", vec![self.hidden], db1),
            ParamEntry::new("w2", vec![self.classes, self.hidden], dw2),
            ParamEntry::new("b2", vec![self.classes], db2),
        ])
        .expect("valid gradient shape")
    }

    fn scores(&self, params: &ModelParams, row: &[f64]) -> Vec<f64> {
        let (_, logits) = self.forward(params, row);
        let lse = log_sum_exp(&logits);
        logits.iter().map(|&l| (l - lse).exp()).collect()
    }

    fn input_dim(&self) -> usize {
        self.input
    }

    fn n_classes(&self) -> usize {
        self.classes
    }
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;

    /// Data-free test task with loss `0.5 ||params||^2`, so the gradient is
    /// the parameter vector itself.
    pub struct QuadraticTask;

    impl DifferentiableTask for QuadraticTask {
        fn init_params(&self, _seed: u64) -> ModelParams {
            ModelParams::flat("w", vec![0.0, 0.0]).unwrap()
        }

        fn loss(&self, params: &ModelParams, _data: &Examples, _idx: &[usize]) -> f64 {
            0.5 * params.values().map(|v| v * v).sum::<f64>()
        }

        fn gradient(&self, params: &ModelParams, _data: &Examples, _idx: &[usize]) -> ModelParams {
            params.clone()
        }

        fn scores(&self, _params: &ModelParams, _row: &[f64]) -> Vec<f64> {
            vec![1.0]
        }

        fn input_dim(&self) -> usize {
            0
        }

        fn n_classes(&self) -> usize {
            1
        }
    }
}
