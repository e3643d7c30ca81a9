use serde::{Deserialize, Serialize};

use crate::error::{bail_input, Result};

fn sorted(x: &[f64], what: &str) -> Result<Vec<f64>> {
    if x.is_empty() {
        bail_input!("{what}: empty sample");
    }
    if x.iter().any(|v| !v.is_finite()) {
        bail_input!("{what}: non-finite sample value");
    }
    let mut s = x.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    Ok(s)
}

/// Walks the merged support of two sorted samples, calling `f(x, next_x,
/// cdf_u, cdf_v)` for each gap between consecutive distinct values, with the
/// CDFs evaluated just right of `x`.
fn scan_cdfs(u: &[f64], v: &[f64], mut f: impl FnMut(f64, f64, f64, f64)) {
    let (n, m) = (u.len() as f64, v.len() as f64);
    let (mut i, mut j) = (0, 0);
    while i < u.len() || j < v.len() {
        let x = match (u.get(i), v.get(j)) {
            (Some(&a), Some(&b)) => a.min(b),
            (Some(&a), None) => a,
            (None, Some(&b)) => b,
            (None, None) => unreachable!(),
        };
        while i < u.len() && u[i] == x {
            i += 1;
        }
        while j < v.len() && v[j] == x {
            j += 1;
        }
        let next = match (u.get(i), v.get(j)) {
            (Some(&a), Some(&b)) => a.min(b),
            (Some(&a), None) => a,
            (None, Some(&b)) => b,
            (None, None) => x,
        };
        f(x, next, i as f64 / n, j as f64 / m);
    }
}

/// 1-D earth mover's distance: the integral of |F_u − F_v|.
pub fn wasserstein_1d(u: &[f64], v: &[f64]) -> Result<f64> {
    let u = sorted(u, "wasserstein_1d")?;
    let v = sorted(v, "wasserstein_1d")?;
    let mut total = 0.0;
    scan_cdfs(&u, &v, |x, next, fu, fv| total += (fu - fv).abs() * (next - x));
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Survival function of the Kolmogorov distribution,
/// Q(λ) = 2 Σ_{k≥1} (−1)^{k−1} exp(−2k²λ²).
/// Small λ uses the Jacobi-transformed series, which converges there.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.0 {
        let s: f64 = (1..=20)
            .map(|k| {
                let a = (2 * k - 1) as f64 * std::f64::consts::PI / lambda;
                (-a * a / 8.0).exp()
            })
            .sum();
        (1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * s).clamp(0.0, 1.0)
    } else {
        let mut sum = 0.0;
        for k in 1..=100 {
            let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
            sum += if k % 2 == 1 { term } else { -term };
            if term < 1e-18 {
                break;
            }
        }
        (2.0 * sum).clamp(0.0, 1.0)
    }
}

/// Two-sample Kolmogorov–Smirnov test with the asymptotic p-value
/// Q(D·sqrt(nm/(n+m))).
pub fn ks_two_sample(u: &[f64], v: &[f64]) -> Result<KsResult> {
    let u = sorted(u, "ks_two_sample")?;
    let v = sorted(v, "ks_two_sample")?;
    let mut d: f64 = 0.0;
    scan_cdfs(&u, &v, |_, _, fu, fv| d = d.max((fu - fv).abs()));
    let (n, m) = (u.len() as f64, v.len() as f64);
    let en = (n * m / (n + m)).sqrt();
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_sf(en * d),
    })
}
