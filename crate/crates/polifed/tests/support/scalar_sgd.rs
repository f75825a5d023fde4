//! Plain-loop logistic regression oracle.
//!
//! Raw slices, zero-initialized weights, one weight update per example in
//! fixed index order. Shares no code with the library's model containers or
//! tasks, so agreement on reachable accuracy is evidence for both routes.

pub struct ScalarLogistic {
    pub w: Vec<f64>,
    pub b: f64,
}

/// Runs `epochs` passes of per-example SGD and returns the fitted model.
pub fn fit_logistic(xs: &[Vec<f64>], ys: &[usize], epochs: usize, lr: f64) -> ScalarLogistic {
    let dim = xs[0].len();
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    for _ in 0..epochs {
        for (x, &y) in xs.iter().zip(ys) {
            let t: f64 = w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + b;
            let p = 1.0 / (1.0 + (-t).exp());
            let err = p - y as f64;
            for (wi, xi) in w.iter_mut().zip(x) {
                *wi -= lr * err * xi;
            }
            b -= lr * err;
        }
    }
    ScalarLogistic { w, b }
}

/// Fraction of points on the correct side of the fitted boundary.
pub fn logistic_accuracy(model: &ScalarLogistic, xs: &[Vec<f64>], ys: &[usize]) -> f64 {
    let hits = xs
        .iter()
        .zip(ys)
        .filter(|(x, &y)| {
            let t: f64 =
                model.w.iter().zip(x.iter()).map(|(wi, xi)| wi * xi).sum::<f64>() + model.b;
            (t > 0.0) == (y == 1)
        })
        .count();
    hits as f64 / xs.len() as f64
}
