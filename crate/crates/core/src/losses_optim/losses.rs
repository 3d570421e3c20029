//! Scalar loss kernels and their derivatives.
//!
//! Every log argument is clamped to `[EPS, 1 - EPS]`; where the clamp is
//! active the derivative is zero.

use ndarray::{ArrayView1, ArrayView2};

use crate::error::{Error, Result};

pub const EPS: f64 = 1e-7;

#[inline]
fn clamp(p: f64) -> (f64, bool) {
    let c = p.clamp(EPS, 1.0 - EPS);
    (c, c == p)
}

/// Category index of a one-hot label.
pub fn one_hot_index(label: ArrayView1<'_, f64>) -> Result<usize> {
    let ones: Vec<usize> = label
        .iter()
        .enumerate()
        .filter(|(_, v)| **v == 1.0)
        .map(|(i, _)| i)
        .collect();
    let rest_zero = label.iter().all(|v| *v == 0.0 || *v == 1.0);
    match (ones.as_slice(), rest_zero) {
        ([k], true) => Ok(*k),
        _ => Err(Error::NotOneHot(label.to_vec())),
    }
}

/// Binary cross-entropy of one score against a 0/1 target, with derivative.
#[inline]
pub fn bce_term(s: f64, c: f64) -> (f64, f64) {
    let (s, live) = clamp(s);
    let l = -(c * s.ln() + (1.0 - c) * (1.0 - s).ln());
    let d = if live {
        -c / s + (1.0 - c) / (1.0 - s)
    } else {
        0.0
    };
    (l, d)
}

/// Focal term of one score against a 0/1 target, with derivative.
#[inline]
pub fn focal_term(z: f64, t: f64, gamma: f64) -> (f64, f64) {
    let (z, live) = clamp(z);
    let (lz, l1z) = (z.ln(), (1.0 - z).ln());
    let pos = (1.0 - z).powf(gamma);
    let neg = z.powf(gamma);
    let l = -(t * pos * lz + (1.0 - t) * neg * l1z);
    if !live {
        return (l, 0.0);
    }
    let dpos = if gamma == 0.0 {
        0.0
    } else {
        gamma * (1.0 - z).powf(gamma - 1.0)
    };
    let dneg = if gamma == 0.0 {
        0.0
    } else {
        gamma * z.powf(gamma - 1.0)
    };
    let d = t * (dpos * lz - pos / z) + (1.0 - t) * (-dneg * l1z + neg / (1.0 - z));
    (l, d)
}

/// `-s^gamma log(1 - s)` for one negative score, with derivative.
#[inline]
pub fn neg_term(s: f64, gamma: f64) -> (f64, f64) {
    focal_term(s, 0.0, gamma)
}

fn check_rows(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Mean over objects of the summed per-category cross-entropy.
/// Rows of `bag_scores` and `labels` are objects.
pub fn loss_cbp(bag_scores: ArrayView2<'_, f64>, labels: ArrayView2<'_, f64>) -> Result<f64> {
    check_rows(bag_scores, labels, "cbp loss")?;
    let m = bag_scores.nrows();
    if m == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (s, c) in bag_scores.rows().into_iter().zip(labels.rows()) {
        one_hot_index(c)?;
        total += s
            .iter()
            .zip(c)
            .map(|(&s, &c)| bce_term(s, c).0)
            .sum::<f64>();
    }
    Ok(total / m as f64)
}

/// Focal loss of a score vector against a one-hot label.
pub fn focal(zeta: ArrayView1<'_, f64>, tau: ArrayView1<'_, f64>, gamma: f64) -> f64 {
    zeta.iter()
        .zip(tau)
        .map(|(&z, &t)| focal_term(z, t, gamma).0)
        .sum()
}

/// Derivative of [`focal`] with respect to `zeta`.
pub fn focal_grad(zeta: ArrayView1<'_, f64>, tau: ArrayView1<'_, f64>, gamma: f64) -> Vec<f64> {
    zeta.iter()
        .zip(tau)
        .map(|(&z, &t)| focal_term(z, t, gamma).1)
        .collect()
}

/// Focal loss per object weighted by the previous-stage true-class score.
pub fn loss_pbr_mil(
    current: ArrayView2<'_, f64>,
    previous: ArrayView2<'_, f64>,
    labels: ArrayView2<'_, f64>,
    gamma: f64,
) -> Result<f64> {
    check_rows(current, labels, "pbr loss")?;
    check_rows(previous, labels, "pbr loss weights")?;
    let m = current.nrows();
    if m == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for ((s, p), c) in current
        .rows()
        .into_iter()
        .zip(previous.rows())
        .zip(labels.rows())
    {
        one_hot_index(c)?;
        total += c.dot(&p) * focal(s, c, gamma);
    }
    Ok(total / m as f64)
}

/// Mean background suppression over negatives, scaled by `beta`.
pub fn loss_neg(neg_scores: ArrayView2<'_, f64>, beta: f64, gamma: f64) -> f64 {
    let n = neg_scores.nrows();
    if n == 0 {
        return 0.0;
    }
    beta * neg_scores
        .iter()
        .map(|&s| neg_term(s, gamma).0)
        .sum::<f64>()
        / n as f64
}
