//! Finite-difference verification of reverse-mode gradients.
//!
//! Every case builds a computation from random inputs, contracts its output
//! with a random weight tensor to obtain a scalar, and compares the tape's
//! gradients against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autodiff::{concat, Tape, Var};
use crate::error::Result;
use crate::head::{gru_states, head_forward, hysteresis_pool, BoundHead, HeadConfig, HeadParams, PoolingConfig};
use crate::pretrain::{
    fidelity_loss, pair_probability_var, pretrain_batch_loss, std_hinge_loss, BoundMlp, MlpQualityModel,
    PairSample, PretrainLossConfig,
};
use crate::ranking::{
    argsort_descending, isotonic_decreasing, logistic_map, mixed_loss, plcc_loss, soft_rank, srcc_loss,
    SoftRankConfig,
};
use crate::tensor::Tensor;

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const SCALE_FLOOR: f64 = 1e-6;
/// Rounding noise of a central difference is about `ulp(f) / STEP`; the
/// comparison floor is raised to this many times that estimate.
pub const NOISE_FACTOR: f64 = 1e4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub max_rel_error: f64,
}

/// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / inf(analytic).max(inf(numeric)).max(floor)
}

fn contract<'t>(out: Var<'t>, weights: &Tensor) -> Result<Var<'t>> {
    let w = out.tape().constant(weights.clone())?;
    out.mul(w)?.sum()
}

/// Checks the gradient of `f` with respect to every input tensor and returns
/// the worst relative error over all inputs.
pub fn check_gradient<F>(name: &str, inputs: &[Tensor], rng: &mut impl Rng, f: F) -> Result<CaseResult>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&tape, &vars)?;
    let shape = out.shape();
    let weights = Tensor::new(
        shape.clone(),
        (0..out.value().len()).map(|_| rng.sample(StandardNormal)).collect(),
    )?;
    let magnitude: f64 = out
        .value()
        .data()
        .iter()
        .zip(weights.data())
        .map(|(o, w)| (o * w).abs())
        .sum();
    let floor = SCALE_FLOOR.max(NOISE_FACTOR * f64::EPSILON * magnitude / STEP);
    let loss = contract(out, &weights)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars = values
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        contract(f(&tape, &vars)?, &weights)?.item()
    };

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(a.len());
        for j in 0..inputs[i].len() {
            let x = inputs[i].data()[j];
            probe[i].data_mut()[j] = x + STEP;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = x - STEP;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = x;
            numeric.push((plus - minus) / (2.0 * STEP));
        }
        worst = worst.max(relative_error(a.data(), &numeric, floor));
    }
    Ok(CaseResult {
        name: name.to_string(),
        max_rel_error: worst,
    })
}

fn normal(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("shape")
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Random values at least `gap` apart, so piecewise ops are not probed
/// across a kink.
fn separated(rng: &mut impl Rng, n: usize, gap: f64) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(n);
    while out.len() < n {
        let v: f64 = rng.sample(StandardNormal);
        if out.iter().all(|u| (u - v).abs() > gap) {
            out.push(v);
        }
    }
    out
}

/// Sort order and pooled blocks selecting the linear piece of the soft-rank
/// map that contains `scores`.
fn soft_rank_piece(scores: &[f64], epsilon: f64) -> (Vec<usize>, Vec<std::ops::Range<usize>>) {
    let n = scores.len();
    let z: Vec<f64> = scores.iter().map(|s| -s / epsilon).collect();
    let order = argsort_descending(&z);
    let shifted: Vec<f64> = order
        .iter()
        .enumerate()
        .map(|(k, &i)| z[i] - (n - k) as f64)
        .collect();
    (order, isotonic_decreasing(&shifted).1)
}

/// Whether every coordinate can move by twice the probe step without
/// leaving the current linear piece.
fn soft_rank_smooth_at(scores: &[f64], epsilon: f64) -> bool {
    let piece = soft_rank_piece(scores, epsilon);
    let mut probe = scores.to_vec();
    for j in 0..scores.len() {
        for delta in [-2.0 * STEP, 2.0 * STEP] {
            probe[j] = scores[j] + delta;
            if soft_rank_piece(&probe, epsilon) != piece {
                return false;
            }
        }
        probe[j] = scores[j];
    }
    true
}

/// Bound parameters of the desk-scale model, in `MlpQualityModel::params` order.
fn mlp_from<'t>(v: &[Var<'t>]) -> BoundMlp<'t> {
    BoundMlp {
        w_hidden: v[0],
        b_hidden: v[1],
        w_mu: v[2],
        b_mu: v[3],
        w_sigma: v[4],
        b_sigma: v[5],
    }
}

fn head_from<'t>(v: &[Var<'t>]) -> BoundHead<'t> {
    BoundHead {
        w_v: v[0],
        b_v: v[1],
        w_z: v[2],
        u_z: v[3],
        b_z: v[4],
        w_r: v[5],
        u_r: v[6],
        b_r: v[7],
        w_n: v[8],
        u_n: v[9],
        b_n: v[10],
        w_q: v[11],
        b_q: v[12],
    }
}

/// Randomised head parameters with non-zero biases.
fn random_head(rng: &mut impl Rng, cfg: &HeadConfig) -> Result<Vec<Tensor>> {
    let mut head = HeadParams::init(cfg, rng)?;
    for (_, t) in head.params_mut() {
        for v in t.data_mut() {
            *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(head.params().into_iter().map(|(_, t)| t.clone()).collect())
}

/// Runs every named case once with inputs drawn from `seed`.
pub fn run_suite(seed: u64) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();

    let a = normal(r, &[3, 4]);
    let b = normal(r, &[3, 4]);
    let pos = uniform(r, &[3, 4], 0.5, 2.0);
    let s = normal(r, &[]);

    out.push(check_gradient("add", &[a.clone(), b.clone()], r, |_, v| v[0].add(v[1]))?);
    out.push(check_gradient("sub", &[a.clone(), s.clone()], r, |_, v| v[0].sub(v[1]))?);
    out.push(check_gradient("mul", &[a.clone(), b.clone()], r, |_, v| v[0].mul(v[1]))?);
    out.push(check_gradient("mul_scalar_broadcast", &[s.clone(), b.clone()], r, |_, v| v[0].mul(v[1]))?);
    out.push(check_gradient("div", &[a.clone(), pos.clone()], r, |_, v| v[0].div(v[1]))?);
    out.push(check_gradient("neg", std::slice::from_ref(&a), r, |_, v| v[0].neg())?);
    out.push(check_gradient("exp", std::slice::from_ref(&a), r, |_, v| v[0].exp())?);
    out.push(check_gradient("log", std::slice::from_ref(&pos), r, |_, v| v[0].log())?);
    out.push(check_gradient("sqrt", std::slice::from_ref(&pos), r, |_, v| v[0].sqrt())?);
    out.push(check_gradient("sigmoid", std::slice::from_ref(&a), r, |_, v| v[0].sigmoid())?);
    out.push(check_gradient("tanh", std::slice::from_ref(&a), r, |_, v| v[0].tanh())?);
    out.push(check_gradient("softplus", std::slice::from_ref(&a), r, |_, v| v[0].softplus())?);
    out.push(check_gradient("normal_cdf", std::slice::from_ref(&a), r, |_, v| v[0].normal_cdf())?);
    out.push(check_gradient("square", std::slice::from_ref(&a), r, |_, v| v[0].square())?);
    out.push(check_gradient("scalar_affine", std::slice::from_ref(&a), r, |_, v| {
        v[0].mul_scalar(-1.7)?.add_scalar(0.4)
    })?);
    let kinked = Tensor::vector(separated(r, 8, 1e-3).iter().map(|x| x + 0.1 + 0.01 * x.signum()).collect());
    out.push(check_gradient("max_scalar", &[kinked], r, |_, v| v[0].max_scalar(0.1))?);

    let m = normal(r, &[4, 5]);
    out.push(check_gradient("matmul", &[a.clone(), m.clone()], r, |_, v| v[0].matmul(v[1]))?);
    out.push(check_gradient("affine", &[a.clone(), m, normal(r, &[5])], r, |_, v| {
        v[0].affine(v[1], v[2])
    })?);
    out.push(check_gradient("sum", std::slice::from_ref(&a), r, |_, v| v[0].sum())?);
    out.push(check_gradient("mean", std::slice::from_ref(&a), r, |_, v| v[0].mean())?);
    out.push(check_gradient("std", std::slice::from_ref(&a), r, |_, v| v[0].std())?);
    out.push(check_gradient("sum_axis0", std::slice::from_ref(&a), r, |_, v| v[0].sum_axis(0))?);
    out.push(check_gradient("mean_axis1", std::slice::from_ref(&a), r, |_, v| v[0].mean_axis(1))?);
    let spread = Tensor::vector(separated(r, 6, 1e-3));
    out.push(check_gradient("min", &[spread], r, |_, v| v[0].min())?);
    out.push(check_gradient("reshape_slice_index", std::slice::from_ref(&a), r, |_, v| {
        let flat = v[0].reshape(vec![12])?;
        flat.slice(2..9)?.mul(flat.slice(4..11)?)?.add(flat.index(0)?)
    })?);
    out.push(check_gradient("row_repeat_concat", &[a.clone(), b.clone()], r, |_, v| {
        concat(&[v[0].row(1)?.repeat_rows(2)?, v[1], v[0].row(2)?])
    })?);

    // Pairwise objective.
    let n = 6;
    let mu_x = normal(r, &[n]);
    let mu_y = normal(r, &[n]);
    let sx = uniform(r, &[n], 0.2, 1.5);
    let sy = uniform(r, &[n], 0.2, 1.5);
    out.push(check_gradient(
        "pair_probability",
        &[mu_x.clone(), mu_y.clone(), sx.clone(), sy.clone()],
        r,
        |_, v| pair_probability_var(v[0], v[1], v[2], v[3]),
    )?);
    let mut p_true: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
    p_true[0] = 0.0;
    p_true[1] = 1.0;
    let p_pred = uniform(r, &[n], 0.05, 0.95);
    out.push(check_gradient("fidelity", &[p_pred], r, |_, v| fidelity_loss(&p_true, v[0]))?);
    out.push(check_gradient(
        "fidelity_of_probability",
        &[mu_x, mu_y, sx, sy],
        r,
        |_, v| fidelity_loss(&p_true, pair_probability_var(v[0], v[1], v[2], v[3])?),
    )?);
    let x = normal(r, &[n, 3]);
    out.push(check_gradient("fidelity_sigmoid_matmul", &[x, normal(r, &[3, 1])], r, |_, v| {
        let p = v[0].matmul(v[1])?.sigmoid()?.reshape(vec![n])?;
        fidelity_loss(&p_true, p)
    })?);
    let labels: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let hx = Tensor::vector(separated(r, n, 0.0).iter().map(|v| 0.5 + 0.2 * v).collect());
    // Keep every hinge argument clear of zero by at least 0.05.
    let hy = Tensor::vector(
        hx.data()
            .iter()
            .zip(&labels)
            .enumerate()
            .map(|(i, (&x, &g))| {
                let offset = if i % 3 == 0 { 0.2 } else { -0.2 };
                x - g * (0.025 + offset)
            })
            .collect(),
    );
    out.push(check_gradient("std_hinge", &[hx, hy], r, |_, v| {
        std_hinge_loss(&labels, v[0], v[1], 0.025)
    })?);

    let dim = 5;
    let model = MlpQualityModel::new(dim, 4, r);
    let batch: Vec<PairSample> = (0..4)
        .map(|i| {
            let fx = normal(r, &[dim]).into_data();
            let fy = normal(r, &[dim]).into_data();
            let (ax, ay) = (r.random_range(0.5..1.5), r.random_range(0.5..1.5));
            PairSample::new(
                format!("x{i}"),
                format!("y{i}"),
                fx,
                fy,
                (r.random_range(1.0..5.0), ax),
                (r.random_range(1.0..5.0), ay),
            )
        })
        .collect::<Result<_>>()?;
    let mut mlp_params: Vec<Tensor> = model.params().into_iter().map(|(_, t)| t.clone()).collect();
    for t in &mut mlp_params {
        for v in t.data_mut() {
            *v += 0.2 * r.sample::<f64, _>(StandardNormal);
        }
    }
    // Fidelity-only keeps the objective smooth; the hinge is covered above.
    let cfg_smooth = PretrainLossConfig {
        margin: 0.025,
        hinge_weight: 0.0,
    };
    out.push(check_gradient("pretrain_batch_loss", &mlp_params, r, |tape, v| {
        Ok(pretrain_batch_loss(&batch, &model, &mlp_from(v), tape, cfg_smooth)?.total)
    })?);

    // Temporal head.
    let head_cfg = HeadConfig {
        input_dim: 7,
        reduced_dim: 5,
        hidden: 4,
    };
    let head = random_head(r, &head_cfg)?;
    let features = normal(r, &[5, head_cfg.input_dim]);
    out.push(check_gradient("head_forward", &head, r, |_, v| head_forward(&head_from(v), &features))?);
    let reduced = normal(r, &[5, head_cfg.reduced_dim]);
    let mut with_input = head.clone();
    with_input.push(reduced);
    out.push(check_gradient("gru_states_input", &with_input, r, |_, v| {
        gru_states(&head_from(v), v[13])
    })?);

    for (tau, beta) in [(1, 0.5), (3, 0.0), (12, 1.0), (2, 0.3)] {
        let q = Tensor::vector(separated(r, 9, 1e-3));
        let cfg = PoolingConfig { tau, beta };
        out.push(check_gradient(&format!("hysteresis_tau{tau}"), &[q], r, |_, v| hysteresis_pool(v[0], &cfg))?);
    }

    // Ranking losses.
    let list = 8;
    let pred = loop {
        let candidate = separated(r, list, 1e-2);
        if [1.0, 0.1].iter().all(|&eps| soft_rank_smooth_at(&candidate, eps)) {
            break Tensor::vector(candidate);
        }
    };
    let target: Vec<f64> = normal(r, &[list]).into_data();
    for eps in [1.0, 0.1] {
        let cfg = SoftRankConfig { epsilon: eps };
        out.push(check_gradient(&format!("soft_rank_eps{eps}"), std::slice::from_ref(&pred), r, |_, v| soft_rank(v[0], &cfg))?);
    }
    let gamma = Tensor::vector(vec![
        r.random_range(0.5..1.5),
        r.random_range(-0.5..0.5),
        r.random_range(0.5..2.0),
        r.random_range(-1.0..1.0),
    ]);
    out.push(check_gradient("logistic_map", &[pred.clone(), gamma.clone()], r, |_, v| {
        logistic_map(v[0], v[1])
    })?);
    out.push(check_gradient("plcc_loss", std::slice::from_ref(&pred), r, |_, v| plcc_loss(v[0], &target))?);
    let cfg = SoftRankConfig::default();
    out.push(check_gradient("srcc_loss", std::slice::from_ref(&pred), r, |_, v| srcc_loss(v[0], &target, &cfg))?);
    out.push(check_gradient("mixed_loss", &[pred, gamma], r, |_, v| {
        Ok(mixed_loss(v[0], &target, v[1], 1.0, &cfg)?.total)
    })?);

    // End to end: head, pooling and mixed loss over a short list.
    let videos: Vec<Tensor> = (0..3).map(|_| normal(r, &[4, head_cfg.input_dim])).collect();
    let mos: Vec<f64> = vec![1.0, 3.0, 2.0];
    let pooling = PoolingConfig { tau: 2, beta: 0.5 };
    out.push(check_gradient("head_pool_mixed", &head, r, |tape, v| {
        let bound = head_from(v);
        let scores = videos
            .iter()
            .map(|f| crate::head::score_video(&bound, f, &pooling))
            .collect::<Result<Vec<_>>>()?;
        let gamma = tape.constant(Tensor::vector(vec![1.0, 0.0, 1.0, 0.0]))?;
        Ok(mixed_loss(concat(&scores)?, &mos, gamma, 1.0, &cfg)?.total)
    })?);

    Ok(out)
}

/// Worst error per case name across several seeds.
pub fn run_seeds(seeds: impl IntoIterator<Item = u64>) -> Result<Vec<CaseResult>> {
    let mut worst: Vec<CaseResult> = Vec::new();
    for seed in seeds {
        for case in run_suite(seed)? {
            match worst.iter_mut().find(|c| c.name == case.name) {
                Some(c) => c.max_rel_error = c.max_rel_error.max(case.max_rel_error),
                None => worst.push(case),
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(&[0.0], &[1e-9], SCALE_FLOOR), 1e-3);
        assert!((relative_error(&[2.0, 1.0], &[2.0, 1.1], SCALE_FLOOR) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn suite_passes_for_one_seed() {
        for case in run_suite(7).unwrap() {
            assert!(case.max_rel_error < 1e-4, "{}: {}", case.name, case.max_rel_error);
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::vector(vec![0.3, -0.7, 1.1]);
        // A custom op whose backward is deliberately off by a factor of two.
        let res = check_gradient("broken", &[x], &mut rng, |tape, v| {
            let value = v[0].value().map(|a| a * a);
            let input = v[0].value();
            tape.custom("broken", &[v[0]], value, move |g, _| {
                Some(g.zip_map(&input, |g, a| 4.0 * a * g).ok()).into_iter().collect()
            })
        })
        .unwrap();
        assert!(res.max_rel_error > 0.1);
    }
}
