//! Depth loss and evaluation metrics over the valid pixel set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SI_LAMBDA: f64 = 0.85;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthEval {
    pub abs_rel: f64,
    pub rmse: f64,
    pub log_rmse: f64,
    pub sq_rel: f64,
    pub delta: [f64; 3],
    pub valid_count: usize,
}

impl DepthEval {
    pub const CSV_HEADER: &'static str =
        "xi,abs_rel,rmse,log_rmse,sq_rel,delta1,delta2,delta3,n_valid";

    pub fn csv_row(&self, xi: f64) -> String {
        format!(
            "{xi:.4},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            self.abs_rel,
            self.rmse,
            self.log_rmse,
            self.sq_rel,
            self.delta[0],
            self.delta[1],
            self.delta[2],
            self.valid_count
        )
    }
}

fn check_lengths(a: usize, b: usize, mask: usize) -> Result<()> {
    if a != b || a != mask {
        return Err(Error::ShapeMismatch(format!(
            "prediction {a}, ground truth {b}, mask {mask}"
        )));
    }
    Ok(())
}

/// Indices in `mask ∧ gt > 0`.
pub fn valid_indices(gt: &[f64], mask: &[bool]) -> Vec<usize> {
    (0..gt.len()).filter(|&i| mask[i] && gt[i] > 0.0).collect()
}

/// Scale-invariant log loss on predicted log-depth.
pub fn si_log_loss(pred_log: &[f64], gt: &[f64], mask: &[bool], lambda: f64) -> Result<f64> {
    check_lengths(pred_log.len(), gt.len(), mask.len())?;
    if let Some(i) = (0..gt.len()).find(|&i| mask[i] && gt[i] <= 0.0 && !gt[i].is_nan()) {
        if gt[i] < 0.0 {
            return Err(Error::InvalidValue(format!("negative ground-truth depth at {i}")));
        }
    }
    let valid = valid_indices(gt, mask);
    if valid.is_empty() {
        return Err(Error::Empty("no valid pixels".into()));
    }
    let n = valid.len() as f64;
    let (mut s1, mut s2) = (0.0, 0.0);
    for &i in &valid {
        let d = pred_log[i] - gt[i].ln();
        s1 += d;
        s2 += d * d;
    }
    let m = s1 / n;
    Ok((s2 / n - lambda * m * m).max(0.0).sqrt())
}

pub fn evaluate(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<DepthEval> {
    check_lengths(pred.len(), gt.len(), mask.len())?;
    let valid = valid_indices(gt, mask);
    if valid.is_empty() {
        return Err(Error::Empty("no valid pixels".into()));
    }
    if let Some(&i) = valid.iter().find(|&&i| pred[i] < 0.0 || pred[i].is_nan()) {
        return Err(Error::InvalidValue(format!(
            "predicted depth {} at pixel {i}",
            pred[i]
        )));
    }
    let n = valid.len() as f64;
    let mut acc = [0.0f64; 4];
    let mut hits = [0usize; 3];
    for &i in &valid {
        let (t, p) = (gt[i], pred[i]);
        let e = t - p;
        acc[0] += e.abs() / t;
        acc[1] += e * e;
        acc[2] += e * e / t;
        let le = t.ln() - p.max(f64::MIN_POSITIVE).ln();
        acc[3] += le * le;
        let ratio = if p > 0.0 { (t / p).max(p / t) } else { f64::INFINITY };
        for (k, h) in hits.iter_mut().enumerate() {
            if ratio <= 1.25f64.powi(k as i32 + 1) {
                *h += 1;
            }
        }
    }
    Ok(DepthEval {
        abs_rel: acc[0] / n,
        rmse: (acc[1] / n).sqrt(),
        sq_rel: acc[2] / n,
        log_rmse: (acc[3] / n).sqrt(),
        delta: hits.map(|h| h as f64 / n),
        valid_count: valid.len(),
    })
}
