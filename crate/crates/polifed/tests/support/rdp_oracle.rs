//! Independent numerical oracle for the Renyi-DP accountant.
//!
//! Computes the per-step Renyi divergence of the Poisson-subsampled Gaussian
//! mechanism by direct quadrature of the mixture-form integral
//!
//! ```text
//! A(alpha) = integral of  nu(x)^alpha * mu(x)^(1-alpha)  dx
//! mu = N(0, z^2),  nu = (1-q) N(0, z^2) + q N(1, z^2)
//! rdp(alpha) = log(A) / (alpha - 1)
//! ```
//!
//! evaluated with Simpson's rule on a uniform grid in log space. The main
//! accountant evaluates the same quantity in the moment parameterization
//! `E_{x~mu}[(nu/mu)^alpha]` with its own grid; the two routes share no code.

/// log(exp(a) + exp(b)) without overflow.
fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Log density of N(mean, z^2) at x.
fn log_normal_pdf(x: f64, mean: f64, z: f64) -> f64 {
    let d = (x - mean) / z;
    -0.5 * d * d - (z * (2.0 * std::f64::consts::PI).sqrt()).ln()
}

/// Per-step RDP of the subsampled Gaussian at order `alpha`, for sampling
/// probability `q` and noise multiplier `z`, by numerical integration.
pub fn rdp_step(q: f64, z: f64, alpha: f64) -> f64 {
    assert!((0.0..=1.0).contains(&q), "q must be a probability");
    assert!(z > 0.0, "noise multiplier must be positive");
    assert!(alpha > 1.0, "Renyi order must exceed 1");
    if q == 0.0 {
        return 0.0;
    }

    let ln_q = q.ln();
    let ln_1mq = if q < 1.0 { (1.0 - q).ln() } else { f64::NEG_INFINITY };

    // Integrand mass concentrates near x = 0 and, for large alpha, near
    // x = alpha (where the shifted mixture component raised to alpha peaks).
    let lo = -1.0 - 14.0 * z;
    let hi = alpha + 1.0 + 14.0 * z;
    let h = (z / 32.0).min(0.01);
    let mut n = ((hi - lo) / h).ceil() as usize;
    if n % 2 == 1 {
        n += 1;
    }
    let n = n.max(512);
    let h = (hi - lo) / n as f64;

    let log_integrand = |x: f64| -> f64 {
        let log_mu = log_normal_pdf(x, 0.0, z);
        let log_nu = log_add_exp(ln_1mq + log_mu, ln_q + log_normal_pdf(x, 1.0, z));
        alpha * log_nu + (1.0 - alpha) * log_mu
    };

    // Simpson's rule in log space: log sum of w_i * exp(g_i), weights
    // 1,4,2,4,...,4,1 scaled by h/3.
    let mut max_term = f64::NEG_INFINITY;
    let mut terms = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let x = lo + i as f64 * h;
        let w: f64 = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let t = log_integrand(x) + w.ln();
        terms.push(t);
        if t > max_term {
            max_term = t;
        }
    }
    let sum: f64 = terms.iter().map(|t| (t - max_term).exp()).sum();
    let log_a = max_term + sum.ln() + (h / 3.0).ln();
    (log_a / (alpha - 1.0)).max(0.0)
}

/// RDP after `steps` identical compositions.
pub fn rdp_composed(q: f64, z: f64, alpha: f64, steps: u64) -> f64 {
    steps as f64 * rdp_step(q, z, alpha)
}
