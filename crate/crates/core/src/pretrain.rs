//! Pairwise quality-aware pre-training objective.
//!
//! Under the Thurstone model, the probability that image `x` is rated above
//! image `y` is `Φ((μx − μy) / √(σx² + σy²))`. Ground-truth probabilities
//! come from MOS statistics; predicted ones from a model's `(μ_w, σ_w)`
//! heads. The two Bernoulli distributions are compared with the fidelity
//! loss, and a hinge term supervises the ordering of predicted stds.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{normal_cdf, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default hinge margin `η`.
pub const DEFAULT_MARGIN: f64 = 0.025;
/// Default weight `ν` of the std hinge term.
pub const DEFAULT_HINGE_WEIGHT: f64 = 1.0;

const PROB_TOLERANCE: f64 = 1e-9;

/// Ground-truth comparison probability `Pr(s(x) ≥ s(y))`.
pub fn pair_probability(mu_x: f64, mu_y: f64, sigma_x: f64, sigma_y: f64) -> Result<f64> {
    let spread = (sigma_x * sigma_x + sigma_y * sigma_y).sqrt();
    if spread <= 0.0 || !spread.is_finite() {
        return Err(Error::domain(
            "pair_probability",
            "sigma_x² + sigma_y² must be positive",
        ));
    }
    Ok(normal_cdf((mu_x - mu_y) / spread))
}

/// Differentiable comparison probability over batched heads.
pub fn pair_probability_var<'t>(
    mu_x: Var<'t>,
    mu_y: Var<'t>,
    sigma_x: Var<'t>,
    sigma_y: Var<'t>,
) -> Result<Var<'t>> {
    let spread = sigma_x.square()?.add(sigma_y.square()?)?.sqrt()?;
    if spread.value().data().contains(&0.0) {
        return Err(Error::domain(
            "pair_probability",
            "sigma_x² + sigma_y² must be positive",
        ));
    }
    mu_x.sub(mu_y)?.div(spread)?.normal_cdf()
}

fn check_probability(op: &'static str, p: f64) -> Result<f64> {
    if !(-PROB_TOLERANCE..=1.0 + PROB_TOLERANCE).contains(&p) || p.is_nan() {
        return Err(Error::domain(op, format!("probability {p} outside [0, 1]")));
    }
    Ok(p.clamp(0.0, 1.0))
}

/// `1 − √(p·q) − √((1−p)(1−q))`, with radicands clamped at zero.
pub fn fidelity(p_true: f64, p_pred: f64) -> Result<f64> {
    let p = check_probability("fidelity_loss", p_true)?;
    let q = check_probability("fidelity_loss", p_pred)?;
    let agree = (p * q).max(0.0).sqrt();
    let disagree = ((1.0 - p) * (1.0 - q)).max(0.0).sqrt();
    // One commutative sum keeps f(p, q) and f(1−p, 1−q) bit-identical
    // whenever the complements are exact.
    Ok((1.0 - (agree + disagree)).max(0.0))
}

// Gradient of the fidelity loss w.r.t. the prediction. Terms whose
// ground-truth weight is zero contribute nothing; the prediction is kept
// off {0, 1} so the square roots stay differentiable.
fn fidelity_grad(p: f64, q: f64) -> f64 {
    const EDGE: f64 = 1e-12;
    let q = q.clamp(EDGE, 1.0 - EDGE);
    let mut d = 0.0;
    if p > 0.0 {
        d -= 0.5 * (p / q).sqrt();
    }
    if p < 1.0 {
        d += 0.5 * ((1.0 - p) / (1.0 - q)).sqrt();
    }
    d
}

/// Elementwise fidelity loss between fixed ground-truth probabilities and a
/// predicted probability vector.
pub fn fidelity_loss<'t>(p_true: &[f64], p_pred: Var<'t>) -> Result<Var<'t>> {
    let q = p_pred.value();
    if q.len() != p_true.len() {
        return Err(Error::ShapeMismatch {
            op: "fidelity_loss",
            lhs: vec![p_true.len()],
            rhs: q.shape().to_vec(),
        });
    }
    let p: Vec<f64> = p_true
        .iter()
        .map(|&v| check_probability("fidelity_loss", v))
        .collect::<Result<_>>()?;
    let qs: Vec<f64> = q
        .data()
        .iter()
        .map(|&v| check_probability("fidelity_loss", v))
        .collect::<Result<_>>()?;
    let values = p
        .iter()
        .zip(&qs)
        .map(|(&a, &b)| fidelity(a, b))
        .collect::<Result<Vec<_>>>()?;
    let shape = q.shape().to_vec();
    let value = Tensor::new(shape.clone(), values)?;
    p_pred
        .tape()
        .custom("fidelity_loss", &[p_pred], value, move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(p.iter().zip(&qs))
                .map(|(gv, (&a, &b))| gv * fidelity_grad(a, b))
                .collect();
            vec![Some(Tensor::new(shape.clone(), data).expect("fidelity grad"))]
        })
}

/// `max(0, η − sign(σx − σy)·(σ̂x − σ̂y))` for scalar inputs.
pub fn std_hinge(
    sigma_true_x: f64,
    sigma_true_y: f64,
    sigma_pred_x: f64,
    sigma_pred_y: f64,
    margin: f64,
) -> Result<f64> {
    let g = std_order_label(sigma_true_x, sigma_true_y)?;
    check_margin(margin)?;
    Ok((margin - g * (sigma_pred_x - sigma_pred_y)).max(0.0))
}

/// Batched hinge over predicted stds; `labels` are the std-order signs.
pub fn std_hinge_loss<'t>(
    labels: &[f64],
    sigma_pred_x: Var<'t>,
    sigma_pred_y: Var<'t>,
    margin: f64,
) -> Result<Var<'t>> {
    check_margin(margin)?;
    if labels.iter().any(|&g| g != 1.0 && g != -1.0) {
        return Err(Error::domain("std_hinge_loss", "labels must be ±1"));
    }
    let tape = sigma_pred_x.tape();
    let g = tape.constant(Tensor::new(sigma_pred_x.shape(), labels.to_vec())?)?;
    g.mul(sigma_pred_x.sub(sigma_pred_y)?)?
        .neg()?
        .add_scalar(margin)?
        .max_scalar(0.0)
}

fn check_margin(margin: f64) -> Result<()> {
    if margin > 0.0 && margin.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("hinge margin must be positive, got {margin}")))
    }
}

/// `sign(σx − σy)`; equal stds are rejected.
pub fn std_order_label(sigma_x: f64, sigma_y: f64) -> Result<f64> {
    if sigma_x == sigma_y {
        return Err(Error::degenerate(
            "std_hinge_loss",
            "pair has equal ground-truth stds and should have been filtered",
        ));
    }
    Ok(if sigma_x > sigma_y { 1.0 } else { -1.0 })
}

/// One training pair with precomputed probability and std-order label.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub id_x: String,
    pub id_y: String,
    pub feat_x: Vec<f64>,
    pub feat_y: Vec<f64>,
    pub mu_x: f64,
    pub mu_y: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub p: f64,
    pub g: f64,
}

impl PairSample {
    pub fn new(
        id_x: impl Into<String>,
        id_y: impl Into<String>,
        feat_x: Vec<f64>,
        feat_y: Vec<f64>,
        (mu_x, sigma_x): (f64, f64),
        (mu_y, sigma_y): (f64, f64),
    ) -> Result<Self> {
        if sigma_x < 0.0 || sigma_y < 0.0 {
            return Err(Error::domain("pair_sample", "stds must be non-negative"));
        }
        if feat_x.len() != feat_y.len() {
            return Err(Error::ShapeMismatch {
                op: "pair_sample",
                lhs: vec![feat_x.len()],
                rhs: vec![feat_y.len()],
            });
        }
        let p = pair_probability(mu_x, mu_y, sigma_x, sigma_y)?;
        let g = std_order_label(sigma_x, sigma_y)?;
        Ok(Self {
            id_x: id_x.into(),
            id_y: id_y.into(),
            feat_x,
            feat_y,
            mu_x,
            mu_y,
            sigma_x,
            sigma_y,
            p,
            g,
        })
    }
}

/// A differentiable image-quality model with mean and std heads.
pub trait QualityModel {
    type Bound<'t>;

    fn bind<'t>(&self, tape: &'t Tape) -> Result<Self::Bound<'t>>;

    /// Predicts `(μ_w, σ_w)` for each row of `features` (`[n, d]`), each `[n]`.
    fn predict<'t>(
        &self,
        bound: &Self::Bound<'t>,
        features: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainLossConfig {
    pub margin: f64,
    pub hinge_weight: f64,
}

impl Default for PretrainLossConfig {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
            hinge_weight: DEFAULT_HINGE_WEIGHT,
        }
    }
}

pub struct PretrainLoss<'t> {
    pub total: Var<'t>,
    /// Batch mean of the fidelity term.
    pub fidelity: f64,
    /// Batch mean of the (unweighted) hinge term.
    pub hinge: f64,
}

/// Mean over the batch of `fidelity + ν·hinge`.
pub fn pretrain_batch_loss<'t, M: QualityModel>(
    batch: &[PairSample],
    model: &M,
    bound: &M::Bound<'t>,
    tape: &'t Tape,
    cfg: PretrainLossConfig,
) -> Result<PretrainLoss<'t>> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Empty("pretrain_batch_loss"));
    }
    let dim = batch[0].feat_x.len();
    let mut rows = Vec::with_capacity(2 * n * dim);
    for s in batch {
        if s.feat_x.len() != dim || s.feat_y.len() != dim {
            return Err(Error::ShapeMismatch {
                op: "pretrain_batch_loss",
                lhs: vec![dim],
                rhs: vec![s.feat_x.len(), s.feat_y.len()],
            });
        }
        rows.extend_from_slice(&s.feat_x);
    }
    for s in batch {
        rows.extend_from_slice(&s.feat_y);
    }
    let features = tape.constant(Tensor::matrix(2 * n, dim, rows)?)?;
    let (mu, sigma) = model.predict(bound, features)?;
    let (mu_x, mu_y) = (mu.slice(0..n)?, mu.slice(n..2 * n)?);
    let (sigma_x, sigma_y) = (sigma.slice(0..n)?, sigma.slice(n..2 * n)?);
    let p_pred = pair_probability_var(mu_x, mu_y, sigma_x, sigma_y)?;
    let p_true: Vec<f64> = batch.iter().map(|s| s.p).collect();
    let labels: Vec<f64> = batch.iter().map(|s| s.g).collect();
    let fid = fidelity_loss(&p_true, p_pred)?;
    let hinge = std_hinge_loss(&labels, sigma_x, sigma_y, cfg.margin)?;
    let per_pair = fid.add(hinge.mul_scalar(cfg.hinge_weight)?)?;
    let total = per_pair.mean()?;
    Ok(PretrainLoss {
        total,
        fidelity: fid.value().sum() / n as f64,
        hinge: hinge.value().sum() / n as f64,
    })
}

/// Desk-scale backbone: one tanh hidden layer with linear `μ` and
/// softplus-constrained `σ` heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpQualityModel {
    pub w_hidden: Tensor,
    pub b_hidden: Tensor,
    pub w_mu: Tensor,
    pub b_mu: Tensor,
    pub w_sigma: Tensor,
    pub b_sigma: Tensor,
}

pub struct BoundMlp<'t> {
    pub w_hidden: Var<'t>,
    pub b_hidden: Var<'t>,
    pub w_mu: Var<'t>,
    pub b_mu: Var<'t>,
    pub w_sigma: Var<'t>,
    pub b_sigma: Var<'t>,
}

impl<'t> BoundMlp<'t> {
    pub fn vars(&self) -> Vec<Var<'t>> {
        vec![
            self.w_hidden,
            self.b_hidden,
            self.w_mu,
            self.b_mu,
            self.w_sigma,
            self.b_sigma,
        ]
    }
}

impl MlpQualityModel {
    pub fn new<R: Rng>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w_hidden: crate::head::xavier(input_dim, hidden, rng),
            b_hidden: Tensor::zeros(&[hidden]),
            w_mu: crate::head::xavier(hidden, 1, rng),
            b_mu: Tensor::zeros(&[1]),
            w_sigma: crate::head::xavier(hidden, 1, rng),
            b_sigma: Tensor::zeros(&[1]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_hidden.shape()[0]
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w_hidden", &self.w_hidden),
            ("b_hidden", &self.b_hidden),
            ("w_mu", &self.w_mu),
            ("b_mu", &self.b_mu),
            ("w_sigma", &self.w_sigma),
            ("b_sigma", &self.b_sigma),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("w_hidden", &mut self.w_hidden),
            ("b_hidden", &mut self.b_hidden),
            ("w_mu", &mut self.w_mu),
            ("b_mu", &mut self.b_mu),
            ("w_sigma", &mut self.w_sigma),
            ("b_sigma", &mut self.b_sigma),
        ]
    }
}

impl QualityModel for MlpQualityModel {
    type Bound<'t> = BoundMlp<'t>;

    fn bind<'t>(&self, tape: &'t Tape) -> Result<BoundMlp<'t>> {
        Ok(BoundMlp {
            w_hidden: tape.param(self.w_hidden.clone())?,
            b_hidden: tape.param(self.b_hidden.clone())?,
            w_mu: tape.param(self.w_mu.clone())?,
            b_mu: tape.param(self.b_mu.clone())?,
            w_sigma: tape.param(self.w_sigma.clone())?,
            b_sigma: tape.param(self.b_sigma.clone())?,
        })
    }

    fn predict<'t>(&self, b: &BoundMlp<'t>, features: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let n = features.value().dims2()?.0;
        let hidden = features.affine(b.w_hidden, b.b_hidden)?.tanh()?;
        let mu = hidden.affine(b.w_mu, b.b_mu)?.reshape(vec![n])?;
        let sigma = hidden
            .affine(b.w_sigma, b.b_sigma)?
            .softplus()?
            .reshape(vec![n])?;
        Ok((mu, sigma))
    }
}

/// One entry of a pair list file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub id_x: String,
    pub id_y: String,
    pub mu_x: f64,
    pub mu_y: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub feat_x_path: PathBuf,
    pub feat_y_path: PathBuf,
}

pub fn read_pair_list(path: &Path) -> Result<Vec<PairRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_pair_list(path: &Path, pairs: &[PairRecord]) -> Result<()> {
    let text = serde_json::to_string_pretty(pairs).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads a pair list and its feature vectors. Relative feature paths are
/// resolved against the pair list's directory.
pub fn load_pairs(path: &Path) -> Result<Vec<PairSample>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut cache = std::collections::BTreeMap::<PathBuf, Vec<f64>>::new();
    let mut load = |p: &Path| -> Result<Vec<f64>> {
        let full = base.join(p);
        if let Some(v) = cache.get(&full) {
            return Ok(v.clone());
        }
        let t = crate::io::read_tensor(&full)?;
        let v = t.into_data();
        cache.insert(full, v.clone());
        Ok(v)
    };
    read_pair_list(path)?
        .into_iter()
        .map(|r| {
            PairSample::new(
                r.id_x,
                r.id_y,
                load(&r.feat_x_path)?,
                load(&r.feat_y_path)?,
                (r.mu_x, r.sigma_x),
                (r.mu_y, r.sigma_y),
            )
        })
        .collect()
}

/// An image with MOS statistics, the unit pairs are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub mu: f64,
    pub sigma: f64,
    pub database_id: String,
    pub feat_path: PathBuf,
}

/// Draws up to `count` distinct-std pairs. With `within_database` set, both
/// images of a pair come from the same database.
pub fn sample_pairs<R: Rng>(
    images: &[ImageRecord],
    count: usize,
    within_database: bool,
    rng: &mut R,
) -> Vec<PairRecord> {
    let mut candidates: Vec<(usize, usize)> = Vec::new();
    for i in 0..images.len() {
        for j in (i + 1)..images.len() {
            let (a, b) = (&images[i], &images[j]);
            if a.sigma == b.sigma {
                continue;
            }
            if within_database && a.database_id != b.database_id {
                continue;
            }
            if a.sigma * a.sigma + b.sigma * b.sigma <= 0.0 {
                continue;
            }
            candidates.push((i, j));
        }
    }
    candidates.shuffle(rng);
    candidates.truncate(count);
    candidates
        .into_iter()
        .map(|(i, j)| {
            let (a, b) = if rng.random_bool(0.5) { (i, j) } else { (j, i) };
            let (x, y) = (&images[a], &images[b]);
            PairRecord {
                id_x: x.id.clone(),
                id_y: y.id.clone(),
                mu_x: x.mu,
                mu_y: y.mu,
                sigma_x: x.sigma,
                sigma_y: y.sigma,
                feat_x_path: x.feat_path.clone(),
                feat_y_path: y.feat_path.clone(),
            }
        })
        .collect()
}
