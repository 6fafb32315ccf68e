//! Linear meta models on segment feature rows: logistic meta classification
//! (IoU = 0 vs IoU > 0) and ridge meta regression (predict IoU), with AuROC
//! and R² evaluation. Fitting is deterministic: fixed iteration order, no
//! shuffling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::segments::SegmentTable;

/// Per-column standardization fitted on training rows. Zero-variance columns
/// map to 0 so no NaN can appear downstream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; cols];
        for row in rows {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; cols];
        for row in rows {
            for ((v, m), x) in var.iter_mut().zip(&mean).zip(row) {
                let d = x - m;
                *v += d * d;
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
        Self { mean, std }
    }

    pub fn transform_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| if *s > 0.0 { (x - m) / s } else { 0.0 })
            .collect()
    }

    pub fn transform(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.transform_row(r)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logistic,
    LeastSquares,
}

/// Linear model over standardized features.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearModel {
    pub kind: ModelKind,
    pub feature_names: Vec<String>,
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub standardizer: Standardizer,
}

impl LinearModel {
    /// Raw linear score of one unstandardized feature row.
    pub fn decision(&self, row: &[f64]) -> f64 {
        let z = self.standardizer.transform_row(row);
        self.intercept
            + z.iter()
                .zip(&self.weights)
                .map(|(x, w)| x * w)
                .sum::<f64>()
    }

    /// Logistic probability or clamped regression output, by kind.
    pub fn predict(&self, row: &[f64]) -> f64 {
        let d = self.decision(row);
        match self.kind {
            ModelKind::Logistic => sigmoid(d),
            ModelKind::LeastSquares => d.clamp(0.0, 1.0),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Solves `A x = b` for symmetric positive definite `A` (row-major n*n) via
/// Cholesky. Fails with a numeric error when a pivot falls below the
/// singularity threshold (relative to the largest diagonal entry).
fn cholesky_solve(a: &[f64], b: &[f64], n: usize) -> Result<Vec<f64>> {
    let scale = (0..n).fold(0.0f64, |m, i| m.max(a[i * n + i].abs()));
    let floor = scale * 1e-12;
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= floor {
                    return Err(Error::Numeric(format!(
                        "matrix singular or not positive definite at pivot {i} (value {sum})"
                    )));
                }
                l[i * n + j] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    // Forward then back substitution.
    let mut y = vec![0.0f64; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i * n + k] * y[k];
        }
        y[i] = sum / l[i * n + i];
    }
    let mut x = vec![0.0f64; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[k * n + i] * x[k];
        }
        x[i] = sum / l[i * n + i];
    }
    Ok(x)
}

/// Full-batch Newton (IRLS) configuration for the logistic meta classifier.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LogisticConfig {
    /// L2 penalty on the weights (not the intercept).
    pub l2: f64,
    pub max_iter: usize,
    /// Stop when the gradient infinity norm drops below this.
    pub tol: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            max_iter: 100,
            tol: 1e-8,
        }
    }
}

fn table_matrix(table: &SegmentTable) -> Vec<Vec<f64>> {
    table.rows.iter().map(|r| r.values.clone()).collect()
}

/// Fits the L2-regularized logistic meta classifier on a segment table.
/// `targets[i]` is the indicator `IoU > 0` for row `i`.
pub fn fit_logistic(
    table: &SegmentTable,
    targets: &[bool],
    config: LogisticConfig,
) -> Result<LinearModel> {
    let raw = table_matrix(table);
    if raw.len() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} rows vs {} targets",
            raw.len(),
            targets.len()
        )));
    }
    if raw.len() < 2 {
        return Err(Error::DegenerateTargets("need at least 2 rows".into()));
    }
    let pos = targets.iter().filter(|&&t| t).count();
    if pos == 0 || pos == targets.len() {
        return Err(Error::DegenerateTargets(
            "both classes must be present to fit the meta classifier".into(),
        ));
    }
    let standardizer = Standardizer::fit(&raw);
    let x = standardizer.transform(&raw);
    let n = x.len();
    let d = x[0].len();
    // Parameter vector: weights then intercept.
    let dim = d + 1;
    let mut theta = vec![0.0f64; dim];
    for _ in 0..config.max_iter {
        let mut grad = vec![0.0f64; dim];
        let mut hess = vec![0.0f64; dim * dim];
        for (row, &t) in x.iter().zip(targets) {
            let mut z = theta[d];
            for (xi, wi) in row.iter().zip(&theta[..d]) {
                z += xi * wi;
            }
            let p = sigmoid(z);
            let r = p - f64::from(t as u8);
            let wgt = (p * (1.0 - p)).max(1e-12);
            for i in 0..d {
                grad[i] += r * row[i];
            }
            grad[d] += r;
            for i in 0..d {
                let wxi = wgt * row[i];
                for j in 0..=i {
                    hess[i * dim + j] += wxi * row[j];
                }
                hess[d * dim + i] += wxi;
            }
            hess[d * dim + d] += wgt;
        }
        for i in 0..d {
            grad[i] += config.l2 * theta[i];
            hess[i * dim + i] += config.l2;
        }
        // Mirror the lower triangle.
        for i in 0..dim {
            for j in i + 1..dim {
                hess[i * dim + j] = hess[j * dim + i];
            }
        }
        let gnorm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gnorm <= config.tol {
            break;
        }
        let step = cholesky_solve(&hess, &grad, dim)?;
        for (t, s) in theta.iter_mut().zip(&step) {
            *t -= s;
        }
        let _ = n;
    }
    Ok(LinearModel {
        kind: ModelKind::Logistic,
        feature_names: table.feature_names.clone(),
        weights: theta[..d].to_vec(),
        intercept: theta[d],
        standardizer,
    })
}

/// Closed-form ridge least squares on a segment table; `targets` are IoU
/// values. Predictions clamp to `[0, 1]`.
pub fn fit_least_squares(
    table: &SegmentTable,
    targets: &[f64],
    ridge: f64,
) -> Result<LinearModel> {
    let raw = table_matrix(table);
    if raw.len() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} rows vs {} targets",
            raw.len(),
            targets.len()
        )));
    }
    if raw.is_empty() {
        return Err(Error::DegenerateTargets("need at least 1 row".into()));
    }
    let d = raw[0].len();
    if ridge <= 0.0 && raw.len() < d + 1 {
        return Err(Error::Validation(format!(
            "{} rows underdetermine {d}+1 parameters; use a positive ridge term",
            raw.len()
        )));
    }
    let standardizer = Standardizer::fit(&raw);
    let x = standardizer.transform(&raw);
    let dim = d + 1;
    let mut xtx = vec![0.0f64; dim * dim];
    let mut xty = vec![0.0f64; dim];
    for (row, &t) in x.iter().zip(targets) {
        for i in 0..d {
            for j in 0..=i {
                xtx[i * dim + j] += row[i] * row[j];
            }
            xtx[d * dim + i] += row[i];
            xty[i] += row[i] * t;
        }
        xtx[d * dim + d] += 1.0;
        xty[d] += t;
    }
    for i in 0..d {
        xtx[i * dim + i] += ridge;
    }
    for i in 0..dim {
        for j in i + 1..dim {
            xtx[i * dim + j] = xtx[j * dim + i];
        }
    }
    let theta = cholesky_solve(&xtx, &xty, dim)?;
    Ok(LinearModel {
        kind: ModelKind::LeastSquares,
        feature_names: table.feature_names.clone(),
        weights: theta[..d].to_vec(),
        intercept: theta[d],
        standardizer,
    })
}

/// Exact AuROC via the rank statistic; tied scores get average ranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AuROC needs both classes present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // Average ranks over tie groups (1-based ranks).
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Determination coefficient `1 - SS_res / SS_tot`; 0 by convention when the
/// targets are constant.
pub fn r_squared(predictions: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(predictions.len(), targets.len());
    if targets.is_empty() {
        return 0.0;
    }
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let ss_tot: f64 = targets.iter().map(|t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        return 0.0;
    }
    let ss_res: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    1.0 - ss_res / ss_tot
}

/// Deterministic train/validation assignment: a row is a training row iff
/// the SplitMix64 hash of `(image_id, segment_id)` maps below `train_frac`.
pub fn is_training_row(image_id: u64, segment_id: u64, train_frac: f64) -> bool {
    let mut rng = SplitMix64::new(image_id.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ segment_id);
    rng.next_unit() < train_frac
}
