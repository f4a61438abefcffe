//! Evaluation metrics, logistic fitting, CORAL distance and score ensembling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ranking::LogisticParams;
use crate::tensor::{gemm, Operand};

/// Pearson correlation; `None` when either input has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "pearson length mismatch");
    let n = a.len() as f64;
    if a.len() < 2 {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Ascending ranks starting at 1; tied values share their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1 ..= end
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Spearman correlation with tie-corrected ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&average_ranks(a), &average_ranks(b))
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn std_dev(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt()
}

fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let pivot = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            let pivot_row = a[col];
            for (x, p) in a[row].iter_mut().zip(pivot_row).skip(col) {
                *x -= f * p;
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for row in (0..4).rev() {
        let s: f64 = (row + 1..4).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

pub const FIT_ITERATIONS: usize = 500;

fn sse(params: &LogisticParams, x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let r = params.apply(xi) - yi;
            r * r
        })
        .sum()
}

/// Least-squares fit of the 4-parameter logistic `y ≈ γ₃σ(γ₁x + γ₂) + γ₄`
/// by damped Gauss-Newton (Levenberg-Marquardt), bounded to
/// [`FIT_ITERATIONS`] iterations. Initialised from data statistics.
pub fn fit_logistic(x: &[f64], y: &[f64]) -> LogisticParams {
    let (ymax, ymin) = y
        .iter()
        .fold((f64::NEG_INFINITY, f64::INFINITY), |(hi, lo), &v| (hi.max(v), lo.min(v)));
    let spread = std_dev(x);
    let scale = if spread > 0.0 { spread } else { 1.0 };
    let increasing = spearman(x, y).unwrap_or(1.0) >= 0.0;
    let (top, bottom) = if increasing { (ymax, ymin) } else { (ymin, ymax) };
    let mut params = LogisticParams::from_standard([median(x), scale, top, bottom])
        .unwrap_or_default();
    let mut current = sse(&params, x, y);
    let mut damping = 1e-3;
    for _ in 0..FIT_ITERATIONS {
        let [g1, g2, g3, _] = params.gamma;
        let mut jtj = [[0.0; 4]; 4];
        let mut jtr = [0.0; 4];
        for (&xi, &yi) in x.iter().zip(y) {
            let s = crate::autodiff::sigmoid(g1 * xi + g2);
            let ds = g3 * s * (1.0 - s);
            let j = [ds * xi, ds, s, 1.0];
            let r = g3 * s + params.gamma[3] - yi;
            for a in 0..4 {
                jtr[a] += j[a] * r;
                for b in 0..4 {
                    jtj[a][b] += j[a] * j[b];
                }
            }
        }
        let mut improved = false;
        for _ in 0..30 {
            let mut lhs = jtj;
            for (d, row) in lhs.iter_mut().enumerate() {
                row[d] += damping * jtj[d][d].max(1e-12);
            }
            let rhs = jtr.map(|v| -v);
            if let Some(step) = solve4(lhs, rhs) {
                let mut trial = params;
                for (g, s) in trial.gamma.iter_mut().zip(step) {
                    *g += s;
                }
                let value = sse(&trial, x, y);
                if value.is_finite() && value < current {
                    let gain = current - value;
                    params = trial;
                    current = value;
                    damping = (damping / 3.0).max(1e-12);
                    improved = gain > 1e-15 * current.max(1e-300);
                    break;
                }
            }
            damping *= 4.0;
        }
        if !improved {
            break;
        }
    }
    params
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatabaseMetrics {
    pub database_id: String,
    pub n: usize,
    /// `None` when predictions are constant.
    pub srcc: Option<f64>,
    pub plcc: Option<f64>,
    pub degenerate: bool,
    /// Share of this database in the weighted averages.
    pub weight: f64,
    pub logistic: Option<LogisticParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub databases: Vec<DatabaseMetrics>,
    pub weighted_srcc: Option<f64>,
    pub weighted_plcc: Option<f64>,
}

impl EvalReport {
    /// Model-selection criterion `(SRCC + PLCC) / 2` on weighted averages.
    pub fn selection_score(&self) -> Option<f64> {
        Some((self.weighted_srcc? + self.weighted_plcc?) / 2.0)
    }

    pub fn database(&self, id: &str) -> Option<&DatabaseMetrics> {
        self.databases.iter().find(|d| d.database_id == id)
    }
}

/// A scored item: database, prediction, ground-truth MOS.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub database_id: String,
    pub prediction: f64,
    pub mos: f64,
}

/// SRCC and fitted PLCC for one list.
pub fn list_metrics(pred: &[f64], mos: &[f64]) -> (Option<f64>, Option<f64>, Option<LogisticParams>) {
    let srcc = spearman(pred, mos);
    let raw = pearson(pred, mos);
    if raw.is_none() {
        return (srcc, None, None);
    }
    let fit = fit_logistic(pred, mos);
    let mapped: Vec<f64> = pred.iter().map(|&p| fit.apply(p)).collect();
    let fitted = pearson(&mapped, mos);
    match (fitted, raw) {
        (Some(f), Some(r)) if f >= r => (srcc, Some(f), Some(fit)),
        _ => (srcc, raw, None),
    }
}

/// Per-database SRCC/PLCC and database-size-weighted averages.
pub fn evaluate_scores(items: &[Scored]) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::Empty("evaluate"));
    }
    let mut groups: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for it in items {
        if !it.prediction.is_finite() {
            return Err(Error::NonFinite { op: "evaluate" });
        }
        let g = groups.entry(it.database_id.as_str()).or_default();
        g.0.push(it.prediction);
        g.1.push(it.mos);
    }
    let total = items.len() as f64;
    let mut databases = Vec::with_capacity(groups.len());
    for (id, (pred, mos)) in groups {
        if pred.len() < 3 {
            return Err(Error::degenerate(
                "evaluate",
                format!("database `{id}` has {} videos, need at least 3", pred.len()),
            ));
        }
        let (srcc, plcc, logistic) = list_metrics(&pred, &mos);
        databases.push(DatabaseMetrics {
            database_id: id.to_string(),
            n: pred.len(),
            degenerate: srcc.is_none(),
            srcc,
            plcc,
            weight: pred.len() as f64 / total,
            logistic,
        });
    }
    let weighted = |f: fn(&DatabaseMetrics) -> Option<f64>| -> Option<f64> {
        let mut acc = 0.0;
        let mut n = 0usize;
        for d in &databases {
            acc += d.n as f64 * f(d)?;
            n += d.n;
        }
        Some(acc / n as f64)
    };
    let weighted_srcc = weighted(|d| d.srcc);
    let weighted_plcc = weighted(|d| d.plcc);
    Ok(EvalReport {
        databases,
        weighted_srcc,
        weighted_plcc,
    })
}

/// Unbiased sample covariance of the rows of a row-major `[n, d]` matrix.
pub fn covariance(rows: &[f64], n: usize, d: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::degenerate("covariance", "need at least two samples"));
    }
    if rows.len() != n * d {
        return Err(Error::InvalidShape {
            op: "covariance",
            detail: format!("{} values cannot form [{n}, {d}]", rows.len()),
        });
    }
    let mut mean = vec![0.0; d];
    for row in rows.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<f64> = rows
        .chunks_exact(d)
        .flat_map(|row| row.iter().zip(&mean).map(|(v, m)| v - m))
        .collect();
    let mut cov = vec![0.0; d * d];
    gemm(
        Operand::transposed(&centered, n, d),
        Operand::plain(&centered, n, d),
        &mut cov,
    );
    cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    Ok(cov)
}

/// CORAL distance `‖C_a − C_b‖²_F / (4d²)` between two `[n, d]` feature sets.
pub fn coral_distance(a: &[f64], na: usize, b: &[f64], nb: usize, d: usize) -> Result<f64> {
    if d == 0 {
        return Err(Error::Empty("coral_distance"));
    }
    let ca = covariance(a, na, d)?;
    let cb = covariance(b, nb, d)?;
    let sq: f64 = ca.iter().zip(&cb).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sq / (4.0 * (d * d) as f64))
}

/// CORAL distance between two `[n, d]` tensors.
pub fn coral_distance_tensors(a: &crate::Tensor, b: &crate::Tensor) -> Result<f64> {
    let (na, da) = a.dims2()?;
    let (nb, db) = b.dims2()?;
    if da != db {
        return Err(Error::ShapeMismatch {
            op: "coral_distance",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    coral_distance(a.data(), na, b.data(), nb, da)
}

/// `κ·a + (1−κ)·b` elementwise.
pub fn ensemble(a: &[f64], b: &[f64], kappa: f64) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "ensemble",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    if !(0.0..=1.0).contains(&kappa) {
        return Err(Error::Config(format!("kappa must lie in [0, 1], got {kappa}")));
    }
    Ok(a.iter().zip(b).map(|(x, y)| kappa * x + (1.0 - kappa) * y).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub kappa: f64,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best_kappa: f64,
    pub best_score: f64,
    pub points: Vec<SweepPoint>,
}

/// Evaluates `κ ∈ {0, 0.01, …, 1}` and keeps the best `(SRCC+PLCC)/2`;
/// the first κ reaching the best value wins.
pub fn sweep_kappa(a: &[f64], b: &[f64], mos: &[f64], database_ids: &[String]) -> Result<SweepResult> {
    if mos.len() != a.len() || database_ids.len() != a.len() {
        return Err(Error::ShapeMismatch {
            op: "sweep_kappa",
            lhs: vec![a.len()],
            rhs: vec![mos.len(), database_ids.len()],
        });
    }
    let mut points = Vec::with_capacity(101);
    let mut best: Option<(f64, f64)> = None;
    for step in 0..=100 {
        let kappa = step as f64 / 100.0;
        let mixed = ensemble(a, b, kappa)?;
        let items: Vec<Scored> = mixed
            .iter()
            .zip(mos)
            .zip(database_ids)
            .map(|((&p, &m), db)| Scored {
                database_id: db.clone(),
                prediction: p,
                mos: m,
            })
            .collect();
        let score = evaluate_scores(&items)?.selection_score();
        if let Some(s) = score {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((kappa, s));
            }
        }
        points.push(SweepPoint { kappa, score });
    }
    let (best_kappa, best_score) =
        best.ok_or_else(|| Error::degenerate("sweep_kappa", "every ensemble is constant"))?;
    Ok(SweepResult {
        best_kappa,
        best_score,
        points,
    })
}
