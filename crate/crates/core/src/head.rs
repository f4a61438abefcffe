//! Temporal quality head: dimension reduction, GRU recurrence, per-frame
//! score projection and hysteresis temporal pooling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::FUSED_CHANNELS;
use crate::tensor::Tensor;

pub const DEFAULT_REDUCED_DIM: usize = 128;
pub const DEFAULT_HIDDEN: usize = 32;

/// Xavier/Glorot-uniform `[fan_in, fan_out]` matrix.
pub fn xavier<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("xavier shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub input_dim: usize,
    pub reduced_dim: usize,
    pub hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            input_dim: FUSED_CHANNELS,
            reduced_dim: DEFAULT_REDUCED_DIM,
            hidden: DEFAULT_HIDDEN,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.reduced_dim == 0 || self.hidden == 0 {
            return Err(Error::Config(format!(
                "head dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Learnable parameters of the head. Matrices are stored `[in, out]` and
/// applied to row vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub b_z: Tensor,
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub w_n: Tensor,
    pub u_n: Tensor,
    pub b_n: Tensor,
    pub w_q: Tensor,
    pub b_q: Tensor,
}

pub struct BoundHead<'t> {
    pub w_v: Var<'t>,
    pub b_v: Var<'t>,
    pub w_z: Var<'t>,
    pub u_z: Var<'t>,
    pub b_z: Var<'t>,
    pub w_r: Var<'t>,
    pub u_r: Var<'t>,
    pub b_r: Var<'t>,
    pub w_n: Var<'t>,
    pub u_n: Var<'t>,
    pub b_n: Var<'t>,
    pub w_q: Var<'t>,
    pub b_q: Var<'t>,
}

impl<'t> BoundHead<'t> {
    /// Bound variables in the same order as [`HeadParams::params`].
    pub fn vars(&self) -> Vec<Var<'t>> {
        vec![
            self.w_v, self.b_v, self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r,
            self.w_n, self.u_n, self.b_n, self.w_q, self.b_q,
        ]
    }
}

impl HeadParams {
    pub fn init<R: Rng>(cfg: &HeadConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (c, r, h) = (cfg.input_dim, cfg.reduced_dim, cfg.hidden);
        Ok(Self {
            w_v: xavier(c, r, rng),
            b_v: Tensor::zeros(&[r]),
            w_z: xavier(r, h, rng),
            u_z: xavier(h, h, rng),
            b_z: Tensor::zeros(&[h]),
            w_r: xavier(r, h, rng),
            u_r: xavier(h, h, rng),
            b_r: Tensor::zeros(&[h]),
            w_n: xavier(r, h, rng),
            u_n: xavier(h, h, rng),
            b_n: Tensor::zeros(&[h]),
            w_q: xavier(h, 1, rng),
            b_q: Tensor::zeros(&[1]),
        })
    }

    pub fn zeros(cfg: &HeadConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, r, h) = (cfg.input_dim, cfg.reduced_dim, cfg.hidden);
        Ok(Self {
            w_v: Tensor::zeros(&[c, r]),
            b_v: Tensor::zeros(&[r]),
            w_z: Tensor::zeros(&[r, h]),
            u_z: Tensor::zeros(&[h, h]),
            b_z: Tensor::zeros(&[h]),
            w_r: Tensor::zeros(&[r, h]),
            u_r: Tensor::zeros(&[h, h]),
            b_r: Tensor::zeros(&[h]),
            w_n: Tensor::zeros(&[r, h]),
            u_n: Tensor::zeros(&[h, h]),
            b_n: Tensor::zeros(&[h]),
            w_q: Tensor::zeros(&[h, 1]),
            b_q: Tensor::zeros(&[1]),
        })
    }

    pub fn config(&self) -> HeadConfig {
        HeadConfig {
            input_dim: self.w_v.shape()[0],
            reduced_dim: self.w_v.shape()[1],
            hidden: self.u_z.shape()[0],
        }
    }

    /// Checks that every parameter has the shape implied by [`Self::config`].
    pub fn validate(&self) -> Result<()> {
        let reference = Self::zeros(&self.config())?;
        for ((name, actual), (_, expected)) in self.params().into_iter().zip(reference.params()) {
            if actual.shape() != expected.shape() {
                return Err(Error::InvalidShape {
                    op: "head_params",
                    detail: format!(
                        "{name} has shape {:?}, expected {:?}",
                        actual.shape(),
                        expected.shape()
                    ),
                });
            }
            if !actual.is_finite() {
                return Err(Error::NonFinite { op: "head_params" });
            }
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w_v", &self.w_v),
            ("b_v", &self.b_v),
            ("w_z", &self.w_z),
            ("u_z", &self.u_z),
            ("b_z", &self.b_z),
            ("w_r", &self.w_r),
            ("u_r", &self.u_r),
            ("b_r", &self.b_r),
            ("w_n", &self.w_n),
            ("u_n", &self.u_n),
            ("b_n", &self.b_n),
            ("w_q", &self.w_q),
            ("b_q", &self.b_q),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("w_v", &mut self.w_v),
            ("b_v", &mut self.b_v),
            ("w_z", &mut self.w_z),
            ("u_z", &mut self.u_z),
            ("b_z", &mut self.b_z),
            ("w_r", &mut self.w_r),
            ("u_r", &mut self.u_r),
            ("b_r", &mut self.b_r),
            ("w_n", &mut self.w_n),
            ("u_n", &mut self.u_n),
            ("b_n", &mut self.b_n),
            ("w_q", &mut self.w_q),
            ("b_q", &mut self.b_q),
        ]
    }

    /// Binds every parameter onto `tape`; with `trainable` unset they are
    /// recorded as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Result<BoundHead<'t>> {
        let leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        Ok(BoundHead {
            w_v: leaf(&self.w_v)?,
            b_v: leaf(&self.b_v)?,
            w_z: leaf(&self.w_z)?,
            u_z: leaf(&self.u_z)?,
            b_z: leaf(&self.b_z)?,
            w_r: leaf(&self.w_r)?,
            u_r: leaf(&self.u_r)?,
            b_r: leaf(&self.b_r)?,
            w_n: leaf(&self.w_n)?,
            u_n: leaf(&self.u_n)?,
            b_n: leaf(&self.b_n)?,
            w_q: leaf(&self.w_q)?,
            b_q: leaf(&self.b_q)?,
        })
    }
}

/// One GRU step on row vectors `x` (`[1, R]` pre-projected per gate) and
/// `h` (`[1, H]`):
///
/// ```text
/// z = σ(x W_z + h U_z + b_z)
/// r = σ(x W_r + h U_r + b_r)
/// n = tanh(x W_n + (r ⊙ h) U_n + b_n)
/// h' = z ⊙ h + (1 − z) ⊙ n
/// ```
///
/// `xz`, `xr`, `xn` already include the input projection and bias.
fn gru_step<'t>(
    head: &BoundHead<'t>,
    xz: Var<'t>,
    xr: Var<'t>,
    xn: Var<'t>,
    h: Var<'t>,
) -> Result<Var<'t>> {
    let z = xz.add(h.matmul(head.u_z)?)?.sigmoid()?;
    let r = xr.add(h.matmul(head.u_r)?)?.sigmoid()?;
    let n = xn.add(r.mul(h)?.matmul(head.u_n)?)?.tanh()?;
    // z ⊙ h + (1 − z) ⊙ n = n + z ⊙ (h − n)
    n.add(z.mul(h.sub(n)?)?)
}

/// GRU hidden states for every frame, `[T, H]`, starting from `h_0 = 0`.
pub fn gru_states<'t>(head: &BoundHead<'t>, reduced: Var<'t>) -> Result<Var<'t>> {
    let tape = reduced.tape();
    let (frames, _) = reduced.value().dims2()?;
    let hidden = head.u_z.value().dims2()?.0;
    let xz = reduced.affine(head.w_z, head.b_z)?;
    let xr = reduced.affine(head.w_r, head.b_r)?;
    let xn = reduced.affine(head.w_n, head.b_n)?;
    let mut h = tape.constant(Tensor::zeros(&[1, hidden]))?;
    let mut states = Vec::with_capacity(frames);
    for t in 0..frames {
        h = gru_step(head, xz.row(t)?, xr.row(t)?, xn.row(t)?, h)?;
        states.push(h);
    }
    concat(&states)
}

/// Per-frame quality scores `[T]` for a `[T, C]` feature sequence.
pub fn head_forward<'t>(head: &BoundHead<'t>, features: &Tensor) -> Result<Var<'t>> {
    let tape = head.w_v.tape();
    let (frames, channels) = features.dims2()?;
    if frames == 0 {
        return Err(Error::Empty("head_forward"));
    }
    let expected = head.w_v.value().dims2()?.0;
    if channels != expected {
        return Err(Error::ShapeMismatch {
            op: "head_forward",
            lhs: features.shape().to_vec(),
            rhs: vec![frames, expected],
        });
    }
    let x = tape.constant(features.clone())?;
    let reduced = x.affine(head.w_v, head.b_v)?;
    let states = gru_states(head, reduced)?;
    states.affine(head.w_q, head.b_q)?.reshape(vec![frames])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolingConfig {
    /// Memory duration in frames.
    pub tau: usize,
    /// Weight of the memory term against the current term.
    pub beta: f64,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        Self { tau: 12, beta: 0.5 }
    }
}

impl PoolingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau < 1 {
            return Err(Error::Config("pooling tau must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!(
                "pooling beta must lie in [0, 1], got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Softmin-weighted average `Σ a_k q_k` with `a = softmin(q)`.
fn softmin_average<'t>(window: Var<'t>) -> Result<Var<'t>> {
    let shift = window
        .value()
        .data()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let weights = window.add_scalar(-shift)?.neg()?.exp()?;
    weights.mul(window)?.sum()?.div(weights.sum()?)
}

/// Hysteresis temporal pooling.
///
/// For frame `t` (0-based):
/// * memory `m_t` is `q_0` at `t = 0`, otherwise the minimum of
///   `q[max(0, t−τ) .. t]`;
/// * current `c_t` is the softmin-weighted average of `q[t ..= min(t+τ, T−1)]`;
/// * the pooled score is `β·m_t + (1−β)·c_t`.
pub fn hysteresis_pool<'t>(scores: Var<'t>, cfg: &PoolingConfig) -> Result<Var<'t>> {
    cfg.validate()?;
    let q = scores.value();
    if q.ndim() != 1 {
        return Err(Error::InvalidShape {
            op: "hysteresis_pool",
            detail: format!("expected a vector, shape is {:?}", q.shape()),
        });
    }
    let frames = q.len();
    if frames == 0 {
        return Err(Error::Empty("hysteresis_pool"));
    }
    let mut pooled = Vec::with_capacity(frames);
    for t in 0..frames {
        let memory = if t == 0 {
            scores.index(0)?
        } else {
            scores.slice(t.saturating_sub(cfg.tau)..t)?.min()?
        };
        let end = (t + cfg.tau).min(frames - 1);
        let current = softmin_average(scores.slice(t..end + 1)?)?;
        let mixed = memory
            .mul_scalar(cfg.beta)?
            .add(current.mul_scalar(1.0 - cfg.beta)?)?;
        pooled.push(mixed);
    }
    concat(&pooled)
}

/// Global average of pooled frame scores.
pub fn video_score<'t>(pooled: Var<'t>) -> Result<Var<'t>> {
    pooled.mean()
}

/// Differentiable video score `Q_p` for one feature sequence.
pub fn score_video<'t>(
    head: &BoundHead<'t>,
    features: &Tensor,
    pooling: &PoolingConfig,
) -> Result<Var<'t>> {
    let frame_scores = head_forward(head, features)?;
    video_score(hysteresis_pool(frame_scores, pooling)?)
}

/// Inference-only video score.
pub fn predict_video(params: &HeadParams, features: &Tensor, pooling: &PoolingConfig) -> Result<f64> {
    let tape = Tape::new();
    let head = params.bind(&tape, false)?;
    score_video(&head, features, pooling)?.item()
}

/// Inference-only pooling of plain frame scores.
pub fn hysteresis_pool_values(scores: &[f64], cfg: &PoolingConfig) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let q = tape.constant(Tensor::vector(scores.to_vec()))?;
    Ok(hysteresis_pool(q, cfg)?.value().data().to_vec())
}
