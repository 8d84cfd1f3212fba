use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub pearson: f64,
    pub spearman: f64,
    pub rmse: f64,
    pub mae: f64,
    pub n: usize,
    /// Predictions or targets were constant; correlations reported as 0.
    pub degenerate_variance: bool,
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "n={} pearson={:.4} spearman={:.4} rmse={:.4} mae={:.4}",
            self.n, self.pearson, self.spearman, self.rmse, self.mae
        )?;
        if self.degenerate_variance {
            write!(f, " degenerate_variance")?;
        }
        Ok(())
    }
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks, ties given their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn metrics(preds: &[f64], targets: &[f64]) -> Result<Metrics> {
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if preds.len() != targets.len() {
        return Err(Error::shape("metrics", format!("{} predictions vs {} targets", preds.len(), targets.len())));
    }
    let n = preds.len();
    let mse = preds.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n as f64;
    let mae = preds.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / n as f64;
    let r = pearson(preds, targets);
    let rho = pearson(&average_ranks(preds), &average_ranks(targets));
    Ok(Metrics {
        pearson: r.unwrap_or(0.0),
        spearman: rho.unwrap_or(0.0),
        rmse: mse.sqrt(),
        mae,
        n,
        degenerate_variance: r.is_none(),
    })
}
