//! List-wise fine-tuning objective: learnable 4-parameter logistic mapping,
//! PLCC loss, soft-rank SRCC loss and their mixture.
//!
//! Soft ranks are the Euclidean projection of `−s/ε` onto the permutahedron
//! spanned by `(1, …, N)`. The projection reduces to a non-increasing
//! isotonic regression on sorted inputs, solved exactly with
//! pool-adjacent-violators; its Jacobian averages the gradient within
//! each pooled block.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Guard added under the PLCC variance square roots.
pub const PLCC_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticParams {
    pub gamma: [f64; 4],
}

impl Default for LogisticParams {
    fn default() -> Self {
        Self {
            gamma: [1.0, 0.0, 1.0, 0.0],
        }
    }
}

impl LogisticParams {
    /// Converts the standard VQEG parameterisation
    /// `(γ₃' − γ₄') / (1 + exp(−(x − γ₁')/|γ₂'|)) + γ₄'` into the
    /// `γ₃·σ(γ₁x + γ₂) + γ₄` form.
    pub fn from_standard(standard: [f64; 4]) -> Result<Self> {
        let [g1, g2, g3, g4] = standard;
        if g2 == 0.0 {
            return Err(Error::domain("logistic", "γ₂' must be non-zero"));
        }
        let scale = 1.0 / g2.abs();
        Ok(Self {
            gamma: [scale, -g1 * scale, g3 - g4, g4],
        })
    }

    pub fn apply(&self, x: f64) -> f64 {
        let [g1, g2, g3, g4] = self.gamma;
        g3 * crate::autodiff::sigmoid(g1 * x + g2) + g4
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Result<Var<'t>> {
        let t = Tensor::vector(self.gamma.to_vec());
        if trainable {
            tape.param(t)
        } else {
            tape.constant(t)
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let gamma: [f64; 4] = t.data().try_into().map_err(|_| Error::InvalidShape {
            op: "logistic_params",
            detail: format!("expected 4 values, shape is {:?}", t.shape()),
        })?;
        Ok(Self { gamma })
    }
}

/// Evaluates the standard parameterisation directly.
pub fn logistic_standard(standard: [f64; 4], x: f64) -> f64 {
    let [g1, g2, g3, g4] = standard;
    (g3 - g4) / (1.0 + (-(x - g1) / g2.abs()).exp()) + g4
}

/// `γ₃·sigmoid(γ₁·q + γ₂) + γ₄` elementwise; `gamma` is a `[4]` variable.
pub fn logistic_map<'t>(scores: Var<'t>, gamma: Var<'t>) -> Result<Var<'t>> {
    if gamma.value().len() != 4 {
        return Err(Error::InvalidShape {
            op: "logistic_map",
            detail: format!("expected 4 parameters, got {:?}", gamma.shape()),
        });
    }
    let g = |i| gamma.index(i);
    scores
        .mul(g(0)?)?
        .add(g(1)?)?
        .sigmoid()?
        .mul(g(2)?)?
        .add(g(3)?)
}

fn centered(values: &[f64]) -> Vec<f64> {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| v - mean).collect()
}

fn check_lengths(op: &'static str, pred: &Tensor, target: &[f64]) -> Result<()> {
    if pred.ndim() != 1 || pred.len() != target.len() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: pred.shape().to_vec(),
            rhs: vec![target.len()],
        });
    }
    if target.len() < 2 {
        return Err(Error::degenerate(op, "needs at least two items"));
    }
    Ok(())
}

fn is_constant(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[0] == w[1])
}

/// Differentiable Pearson correlation between `pred` and a fixed `target`.
///
/// The predicted spread is guarded by [`PLCC_EPS`] under its square root.
pub fn pearson_var<'t>(op: &'static str, pred: Var<'t>, target: &[f64]) -> Result<Var<'t>> {
    let p = pred.value();
    check_lengths(op, &p, target)?;
    if is_constant(target) {
        return Err(Error::degenerate(op, "target has zero variance"));
    }
    if is_constant(p.data()) {
        return Err(Error::degenerate(op, "predictions have zero variance"));
    }
    let tape = pred.tape();
    let tc = centered(target);
    let target_norm = (tc.iter().map(|v| v * v).sum::<f64>() + PLCC_EPS).sqrt();
    let tc = tape.constant(Tensor::vector(tc))?;
    let pc = pred.sub(pred.mean()?)?;
    let cov = pc.mul(tc)?.sum()?;
    let pred_norm = pc.square()?.sum()?.add_scalar(PLCC_EPS)?.sqrt()?;
    cov.div(pred_norm)?.mul_scalar(1.0 / target_norm)
}

/// `(1 − PLCC) / 2`.
pub fn plcc_loss<'t>(mapped: Var<'t>, target: &[f64]) -> Result<Var<'t>> {
    pearson_var("plcc_loss", mapped, target)?
        .neg()?
        .add_scalar(1.0)?
        .mul_scalar(0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoftRankConfig {
    /// Regularisation strength; smaller values approach hard ranks.
    pub epsilon: f64,
}

impl Default for SoftRankConfig {
    fn default() -> Self {
        Self { epsilon: 1.0 }
    }
}

impl SoftRankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon > 0.0 && self.epsilon.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "soft-rank epsilon must be positive, got {}",
                self.epsilon
            )))
        }
    }
}

/// Non-increasing isotonic regression of `y` by pool-adjacent-violators.
///
/// Returns the fitted values and the block boundaries (`start..end` ranges
/// partitioning `0..y.len()`).
pub fn isotonic_decreasing(y: &[f64]) -> (Vec<f64>, Vec<std::ops::Range<usize>>) {
    // (start, len, sum)
    let mut blocks: Vec<(usize, usize, f64)> = Vec::with_capacity(y.len());
    for (i, &v) in y.iter().enumerate() {
        blocks.push((i, 1, v));
        while blocks.len() > 1 {
            let (_, n_last, s_last) = blocks[blocks.len() - 1];
            let (_, n_prev, s_prev) = blocks[blocks.len() - 2];
            // violation: previous mean < last mean
            if s_prev * (n_last as f64) < s_last * (n_prev as f64) {
                blocks.pop();
                let prev = blocks.last_mut().expect("two blocks");
                prev.1 += n_last;
                prev.2 += s_last;
            } else {
                break;
            }
        }
    }
    let mut fitted = vec![0.0; y.len()];
    let mut ranges = Vec::with_capacity(blocks.len());
    for (start, len, sum) in blocks {
        let mean = sum / len as f64;
        fitted[start..start + len].iter_mut().for_each(|v| *v = mean);
        ranges.push(start..start + len);
    }
    (fitted, ranges)
}

/// Indices ordering `values` descending; ties keep their original order.
pub fn argsort_descending(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    idx
}

struct Projection {
    ranks: Vec<f64>,
    order: Vec<usize>,
    blocks: Vec<std::ops::Range<usize>>,
}

/// Projection of `z` onto the permutahedron of `(N, N−1, …, 1)`.
fn project_permutahedron(z: &[f64]) -> Projection {
    let n = z.len();
    let order = argsort_descending(z);
    let shifted: Vec<f64> = order
        .iter()
        .enumerate()
        .map(|(k, &i)| z[i] - (n - k) as f64)
        .collect();
    let (fitted, blocks) = isotonic_decreasing(&shifted);
    let mut ranks = vec![0.0; n];
    for (k, &i) in order.iter().enumerate() {
        ranks[i] = z[i] - fitted[k];
    }
    Projection {
        ranks,
        order,
        blocks,
    }
}

/// Soft descending ranks of plain values (rank 1 ≈ largest).
pub fn soft_rank_values(scores: &[f64], cfg: &SoftRankConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if scores.is_empty() {
        return Err(Error::Empty("soft_rank"));
    }
    let z: Vec<f64> = scores.iter().map(|s| -s / cfg.epsilon).collect();
    Ok(project_permutahedron(&z).ranks)
}

/// Differentiable soft descending ranks of a score vector.
pub fn soft_rank<'t>(scores: Var<'t>, cfg: &SoftRankConfig) -> Result<Var<'t>> {
    cfg.validate()?;
    let s = scores.value();
    if s.ndim() != 1 {
        return Err(Error::InvalidShape {
            op: "soft_rank",
            detail: format!("expected a vector, shape is {:?}", s.shape()),
        });
    }
    if s.is_empty() {
        return Err(Error::Empty("soft_rank"));
    }
    let eps = cfg.epsilon;
    let z: Vec<f64> = s.data().iter().map(|v| -v / eps).collect();
    let Projection {
        ranks,
        order,
        blocks,
    } = project_permutahedron(&z);
    scores
        .tape()
        .custom("soft_rank", &[scores], Tensor::vector(ranks), move |g, _| {
            // d ranks / d z = I − Pᵀ B P with B the block-averaging matrix.
            let g = g.data();
            let mut grad: Vec<f64> = g.to_vec();
            for block in &blocks {
                let mean = block.clone().map(|k| g[order[k]]).sum::<f64>() / block.len() as f64;
                for k in block.clone() {
                    grad[order[k]] -= mean;
                }
            }
            // z = −s/ε
            grad.iter_mut().for_each(|v| *v *= -1.0 / eps);
            vec![Some(Tensor::vector(grad))]
        })
}

/// Hard descending ranks (1 = largest); ties broken by original index.
pub fn hard_rank_descending(values: &[f64]) -> Vec<f64> {
    let mut ranks = vec![0.0; values.len()];
    for (k, i) in argsort_descending(values).into_iter().enumerate() {
        ranks[i] = (k + 1) as f64;
    }
    ranks
}

/// `1 − Pearson(soft_rank(pred), hard_rank(target))`.
pub fn srcc_loss<'t>(pred: Var<'t>, target: &[f64], cfg: &SoftRankConfig) -> Result<Var<'t>> {
    check_lengths("srcc_loss", &pred.value(), target)?;
    let soft = soft_rank(pred, cfg)?;
    let hard = hard_rank_descending(target);
    pearson_var("srcc_loss", soft, &hard)?
        .neg()?
        .add_scalar(1.0)
}

#[derive(Debug, Clone, Copy)]
pub struct MixedLoss<'t> {
    pub total: Var<'t>,
    pub plcc: Var<'t>,
    pub srcc: Var<'t>,
}

/// `plcc_loss(logistic(pred), target) + λ·srcc_loss(pred, target)`.
pub fn mixed_loss<'t>(
    pred: Var<'t>,
    target: &[f64],
    gamma: Var<'t>,
    lambda: f64,
    cfg: &SoftRankConfig,
) -> Result<MixedLoss<'t>> {
    let plcc = plcc_loss(logistic_map(pred, gamma)?, target)?;
    let srcc = srcc_loss(pred, target, cfg)?;
    let total = plcc.add(srcc.mul_scalar(lambda)?)?;
    Ok(MixedLoss { total, plcc, srcc })
}
