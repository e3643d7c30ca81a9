use rayon::prelude::*;

use crate::error::{bail_input, Error, Result};

/// Centres `x` and scales it to unit Euclidean norm; `None` for constant input.
fn standardize(x: &[f64]) -> Option<Vec<f64>> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let ss: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    if !(ss > 0.0) || !ss.is_finite() {
        return None;
    }
    let inv = 1.0 / ss.sqrt();
    Some(x.iter().map(|v| (v - mean) * inv).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pearson correlation of two equally long vectors.
pub fn pearsonr(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        bail_input!("pearsonr on vectors of length {} and {}", a.len(), b.len());
    }
    if a.len() < 2 {
        bail_input!("pearsonr needs at least 2 values");
    }
    let za = standardize(a).ok_or(Error::ZeroVariance { set: "a", id: 0 })?;
    let zb = standardize(b).ok_or(Error::ZeroVariance { set: "b", id: 0 })?;
    Ok(dot(&za, &zb).clamp(-1.0, 1.0))
}

/// For every element of `set_a`, its maximum correlation with `set_b`.
/// With `exclude_self` the sets are the same collection and index `i` of
/// `set_a` is not compared with index `i` of `set_b`.
pub fn max_corr_distribution<A, B>(set_a: &[A], set_b: &[B], exclude_self: bool) -> Result<Vec<f64>>
where
    A: AsRef<[f64]> + Sync,
    B: AsRef<[f64]> + Sync,
{
    if set_b.is_empty() {
        bail_input!("reference set is empty");
    }
    if exclude_self {
        if set_a.len() != set_b.len() {
            bail_input!("within-set mode needs the same set on both sides");
        }
        if set_b.len() < 2 {
            bail_input!("within-set mode needs at least 2 images");
        }
    }
    let len = set_b[0].as_ref().len();
    if len < 2 {
        bail_input!("images must have at least 2 pixels");
    }
    let prep = |set: &'static str, items: Vec<&[f64]>| -> Result<Vec<Vec<f64>>> {
        items
            .into_par_iter()
            .enumerate()
            .map(|(id, x)| {
                if x.len() != len {
                    bail_input!("image {id} in set {set} has {} pixels, expected {len}", x.len());
                }
                standardize(x).ok_or(Error::ZeroVariance { set, id })
            })
            .collect()
    };
    let zb = prep("B", set_b.iter().map(|x| x.as_ref()).collect())?;
    let za = if exclude_self {
        zb.clone()
    } else {
        prep("A", set_a.iter().map(|x| x.as_ref()).collect())?
    };
    Ok(za
        .par_iter()
        .enumerate()
        .map(|(i, a)| {
            zb.iter()
                .enumerate()
                .filter(|(j, _)| !(exclude_self && *j == i))
                .map(|(_, b)| dot(a, b).clamp(-1.0, 1.0))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}
