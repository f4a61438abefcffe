//! Optimisation: Adam with decoupled weight decay, step learning-rate
//! schedules, list-wise fine-tuning over one or more databases, and the
//! pairwise pre-training loop.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, Tape};
use crate::error::{Error, Result};
use crate::eval::{evaluate_scores, EvalReport, Scored};
use crate::head::{predict_video, score_video, HeadConfig, HeadParams, PoolingConfig};
use crate::io::{load_manifest, read_tensor, Manifest};
use crate::pretrain::{pretrain_batch_loss, MlpQualityModel, PairSample, PretrainLossConfig, QualityModel};
use crate::ranking::{mixed_loss, LogisticParams, SoftRankConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled L2 weight decay coefficient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    steps: u64,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if cfg.eps <= 0.0 || cfg.weight_decay < 0.0 {
            return Err(Error::Config(
                "Adam eps must be positive and weight decay non-negative".into(),
            ));
        }
        Ok(Self {
            cfg,
            steps: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. Gradients are validated before any parameter is
    /// touched, so a non-finite gradient leaves the model unchanged.
    pub fn step(&mut self, lr: f64, params: Vec<(String, &mut Tensor)>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidShape {
                op: "adam_step",
                detail: format!("{} parameters but {} gradients", params.len(), grads.len()),
            });
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        self.steps += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        for ((name, p), g) in params.into_iter().zip(grads) {
            let m = self.moments.entry(name).or_insert_with(|| Moments {
                first: vec![0.0; g.len()],
                second: vec![0.0; g.len()],
            });
            for (((w, &gv), m1), m2) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.first.iter_mut())
                .zip(m.second.iter_mut())
            {
                *m1 = beta1 * *m1 + (1.0 - beta1) * gv;
                *m2 = beta2 * *m2 + (1.0 - beta2) * gv * gv;
                let update = (*m1 / c1) / ((*m2 / c2).sqrt() + eps) + weight_decay * *w;
                *w -= lr * update;
            }
        }
        Ok(())
    }
}

/// Step decay: `initial · factor^⌊(epoch − 1) / every⌋` for 1-based epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub factor: f64,
    pub every: usize,
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = epoch.saturating_sub(1) / self.every.max(1);
        self.initial * self.factor.powi(drops as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Videos per list; list-wise losses are computed per list.
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Multiplicative decay applied every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub weight_decay: f64,
    /// Weight of the SRCC term in the mixed loss.
    pub lambda: f64,
    pub seed: u64,
    /// Stop once the weighted validation SRCC reaches this value.
    pub stop_srcc: Option<f64>,
    pub head: HeadConfig,
    pub pooling: PoolingConfig,
    pub soft_rank: SoftRankConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 40,
            lr: 5e-4,
            lr_decay: 0.2,
            lr_decay_every: 2,
            weight_decay: 0.0,
            lambda: 1.0,
            seed: 0,
            stop_srcc: None,
            head: HeadConfig::default(),
            pooling: PoolingConfig::default(),
            soft_rank: SoftRankConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.lr_decay <= 0.0 || self.lr_decay_every == 0 {
            return Err(Error::Config("lr decay must be positive with a positive period".into()));
        }
        if self.weight_decay < 0.0 || self.lambda < 0.0 {
            return Err(Error::Config("weight_decay and lambda must be non-negative".into()));
        }
        self.head.validate()?;
        self.pooling.validate()?;
        self.soft_rank.validate()
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            initial: self.lr,
            factor: self.lr_decay,
            every: self.lr_decay_every,
        }
    }
}

/// Everything needed to score videos: head weights, pooling settings and the
/// per-database logistic mappings learnt during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub head: HeadParams,
    pub pooling: PoolingConfig,
    pub logistic: BTreeMap<String, LogisticParams>,
}

impl ModelParams {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: Self = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        model.head.validate()?;
        model.pooling.validate()?;
        Ok(model)
    }
}

/// A video with its fused features and label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVideo {
    pub video_id: String,
    pub database_id: String,
    pub mos: f64,
    pub features: Tensor,
}

/// Loads every record of a manifest together with its features.
pub fn load_videos(manifest: &Manifest) -> Result<Vec<LabeledVideo>> {
    manifest
        .records
        .iter()
        .map(|r| {
            Ok(LabeledVideo {
                video_id: r.video_id.clone(),
                database_id: r.database_id.clone(),
                mos: r.mos,
                features: read_tensor(&manifest.resolve(r))?,
            })
        })
        .collect()
}

pub fn load_videos_from(path: &Path) -> Result<Vec<LabeledVideo>> {
    load_videos(&load_manifest(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_srcc: Option<f64>,
    pub val_plcc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation `(SRCC+PLCC)/2`.
    pub params: ModelParams,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

fn run_pool<T: Send>(threads: usize, job: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(job))
}

/// Video scores `Q_p`, in input order.
pub fn predict(params: &ModelParams, videos: &[LabeledVideo], threads: usize) -> Result<Vec<f64>> {
    run_pool(threads, || {
        videos
            .par_iter()
            .map(|v| predict_video(&params.head, &v.features, &params.pooling))
            .collect::<Result<Vec<_>>>()
    })?
}

pub fn evaluate_model(params: &ModelParams, videos: &[LabeledVideo], threads: usize) -> Result<EvalReport> {
    let scores = predict(params, videos, threads)?;
    evaluate_scores(&scored(videos, &scores))
}

pub fn scored(videos: &[LabeledVideo], predictions: &[f64]) -> Vec<Scored> {
    videos
        .iter()
        .zip(predictions)
        .map(|(v, &p)| Scored {
            database_id: v.database_id.clone(),
            prediction: p,
            mos: v.mos,
        })
        .collect()
}

fn group_by_database(videos: &[LabeledVideo]) -> BTreeMap<String, Vec<usize>> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, v) in videos.iter().enumerate() {
        groups.entry(v.database_id.clone()).or_default().push(i);
    }
    groups
}

/// Fine-tunes the head with the mixed PLCC/SRCC loss.
///
/// Each epoch shuffles every database and cuts it into lists of
/// `batch_size` videos (a trailing partial list is dropped). A step takes
/// one list per database, scores it with that database's logistic mapping
/// and averages the per-database losses. Databases with fewer lists cycle.
/// The returned parameters are those with the best validation score.
pub fn finetune(
    train: &[LabeledVideo],
    val: &[LabeledVideo],
    cfg: &TrainConfig,
    threads: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("finetune: training set"));
    }
    if val.is_empty() {
        return Err(Error::Empty("finetune: validation set"));
    }
    let groups = group_by_database(train);
    for (db, idx) in &groups {
        if idx.len() < cfg.batch_size {
            return Err(Error::Config(format!(
                "database `{db}` has {} training videos, fewer than batch_size {}",
                idx.len(),
                cfg.batch_size
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams {
        head: HeadParams::init(&cfg.head, &mut rng)?,
        pooling: cfg.pooling,
        logistic: groups
            .keys()
            .map(|db| (db.clone(), LogisticParams::default()))
            .collect(),
    };
    let mut adam = Adam::new(AdamConfig {
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    })?;
    let schedule = cfg.schedule();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for epoch in 1..=cfg.epochs {
        let lr = schedule.lr_at(epoch);
        let lists: Vec<(&String, Vec<Vec<usize>>)> = groups
            .iter()
            .map(|(db, idx)| {
                let mut order = idx.clone();
                order.shuffle(&mut rng);
                let chunks = order
                    .chunks_exact(cfg.batch_size)
                    .map(<[usize]>::to_vec)
                    .collect();
                (db, chunks)
            })
            .collect();
        let steps = lists.iter().map(|(_, l)| l.len()).max().unwrap_or(0);
        let mut epoch_loss = 0.0;
        for step in 0..steps {
            let (loss, grads) = list_step(&params, train, &lists, step, cfg)?;
            epoch_loss += loss;
            apply_grads(&mut adam, lr, &mut params, &grads)?;
        }
        let report = evaluate_model(&params, val, threads)?;
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / steps.max(1) as f64,
            val_srcc: report.weighted_srcc,
            val_plcc: report.weighted_plcc,
        });
        let score = report.selection_score().unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, params.clone()));
        }
        if cfg
            .stop_srcc
            .is_some_and(|target| report.weighted_srcc.is_some_and(|s| s >= target))
        {
            break;
        }
    }
    let (best_epoch, params) = match best {
        Some((_, e, p)) => (e, p),
        None => (0, params),
    };
    Ok(TrainOutcome {
        params,
        best_epoch,
        history,
    })
}

/// Gradients for one optimisation step: head parameters in
/// [`HeadParams::params`] order followed by each database's `γ`.
struct StepGrads {
    head: Vec<Tensor>,
    logistic: Vec<(String, Tensor)>,
}

fn list_step(
    params: &ModelParams,
    videos: &[LabeledVideo],
    lists: &[(&String, Vec<Vec<usize>>)],
    step: usize,
    cfg: &TrainConfig,
) -> Result<(f64, StepGrads)> {
    let tape = Tape::new();
    let head = params.head.bind(&tape, true)?;
    let mut gammas = Vec::with_capacity(lists.len());
    let mut losses = Vec::with_capacity(lists.len());
    for (db, chunks) in lists {
        let list = &chunks[step % chunks.len()];
        let scores = list
            .iter()
            .map(|&i| score_video(&head, &videos[i].features, &cfg.pooling))
            .collect::<Result<Vec<_>>>()?;
        let scores = concat(&scores)?;
        let mos: Vec<f64> = list.iter().map(|&i| videos[i].mos).collect();
        let gamma = params.logistic[*db].bind(&tape, true)?;
        losses.push(mixed_loss(scores, &mos, gamma, cfg.lambda, &cfg.soft_rank)?.total);
        gammas.push(((*db).clone(), gamma));
    }
    let loss = concat(&losses)?.mean()?;
    let value = loss.item()?;
    let grads = tape.backward(loss)?;
    Ok((
        value,
        StepGrads {
            head: head.vars().into_iter().map(|v| grads.wrt(v)).collect(),
            logistic: gammas
                .into_iter()
                .map(|(db, g)| (db, grads.wrt(g)))
                .collect(),
        },
    ))
}

fn apply_grads(adam: &mut Adam, lr: f64, params: &mut ModelParams, grads: &StepGrads) -> Result<()> {
    let mut gamma_tensors: Vec<(String, Tensor)> = grads
        .logistic
        .iter()
        .map(|(db, _)| (db.clone(), Tensor::vector(params.logistic[db].gamma.to_vec())))
        .collect();
    let mut named: Vec<(String, &mut Tensor)> = params
        .head
        .params_mut()
        .into_iter()
        .map(|(n, t)| (format!("head.{n}"), t))
        .collect();
    named.extend(
        gamma_tensors
            .iter_mut()
            .map(|(db, t)| (format!("logistic.{db}"), t)),
    );
    let mut all_grads = grads.head.clone();
    all_grads.extend(grads.logistic.iter().map(|(_, g)| g.clone()));
    adam.step(lr, named, &all_grads)?;
    for (db, t) in gamma_tensors {
        params.logistic.insert(db, LogisticParams::from_tensor(&t)?);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub weight_decay: f64,
    /// Hinge margin `η`.
    pub margin: f64,
    /// Hinge weight `ν`.
    pub hinge_weight: f64,
    /// Hidden width of the desk-scale backbone.
    pub hidden: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 32,
            lr: 1e-4,
            lr_decay: 0.1,
            lr_decay_every: 3,
            weight_decay: 0.0,
            margin: crate::pretrain::DEFAULT_MARGIN,
            hinge_weight: crate::pretrain::DEFAULT_HINGE_WEIGHT,
            hidden: 64,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            initial: self.lr,
            factor: self.lr_decay,
            every: self.lr_decay_every,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.hidden == 0 || self.lr_decay_every == 0 {
            return Err(Error::Config(
                "batch_size, hidden and lr_decay_every must be positive".into(),
            ));
        }
        if self.lr.is_nan() || self.lr <= 0.0 || self.lr_decay <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("invalid pre-training learning-rate settings".into()));
        }
        if self.margin.is_nan() || self.margin <= 0.0 || self.hinge_weight < 0.0 {
            return Err(Error::Config("margin must be positive and hinge_weight non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub fidelity: f64,
    pub hinge: f64,
}

/// Trains a desk-scale quality model on pairs with the pairwise objective.
pub fn pretrain(pairs: &[PairSample], cfg: &PretrainConfig) -> Result<(MlpQualityModel, Vec<PretrainEpoch>)> {
    cfg.validate()?;
    let first = pairs.first().ok_or(Error::Empty("pretrain"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = MlpQualityModel::new(first.feat_x.len(), cfg.hidden, &mut rng);
    let mut adam = Adam::new(AdamConfig {
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    })?;
    let loss_cfg = PretrainLossConfig {
        margin: cfg.margin,
        hinge_weight: cfg.hinge_weight,
    };
    let schedule = cfg.schedule();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 1..=cfg.epochs {
        let lr = schedule.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut fid_sum, mut hinge_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<PairSample> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            let tape = Tape::new();
            let bound = model.bind(&tape)?;
            let loss = pretrain_batch_loss(&batch, &model, &bound, &tape, loss_cfg)?;
            loss_sum += loss.total.item()?;
            fid_sum += loss.fidelity;
            hinge_sum += loss.hinge;
            batches += 1;
            let grads = tape.backward(loss.total)?;
            let g: Vec<Tensor> = bound.vars().into_iter().map(|v| grads.wrt(v)).collect();
            let named = model
                .params_mut()
                .into_iter()
                .map(|(n, t)| (n.to_string(), t))
                .collect();
            adam.step(lr, named, &g)?;
        }
        let n = batches.max(1) as f64;
        history.push(PretrainEpoch {
            epoch,
            lr,
            loss: loss_sum / n,
            fidelity: fid_sum / n,
            hinge: hinge_sum / n,
        });
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn named(ts: &mut [Tensor]) -> Vec<(String, &mut Tensor)> {
        ts.iter_mut()
            .enumerate()
            .map(|(i, t)| (format!("p{i}"), t))
            .collect()
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut ps = vec![Tensor::vector(vec![0.3, -1.2]), Tensor::scalar(4.0)];
        let before = ps.clone();
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        let grads = vec![Tensor::zeros(&[2]), Tensor::zeros(&[])];
        adam.step(1e-2, named(&mut ps), &grads).unwrap();
        assert_eq!(ps, before);
    }

    #[test]
    fn first_step_moves_against_gradient_sign() {
        let mut ps = vec![Tensor::vector(vec![0.0, 0.0, 0.0])];
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        let grads = vec![Tensor::vector(vec![2.0, -0.001, 0.0])];
        adam.step(0.1, named(&mut ps), &grads).unwrap();
        let p = ps[0].data();
        assert!(p[0] < 0.0 && p[1] > 0.0 && p[2] == 0.0);
        // bias-corrected first step has magnitude ≈ lr
        assert!((p[0] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut ps = vec![Tensor::vector(vec![0.5, 2.0])];
        let before = ps.clone();
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        adam.step(0.0, named(&mut ps), &[Tensor::vector(vec![3.0, -1.0])]).unwrap();
        assert_eq!(ps, before);
    }

    #[test]
    fn non_finite_gradient_aborts_with_name() {
        let mut ps = vec![Tensor::vector(vec![1.0]), Tensor::vector(vec![1.0])];
        let before = ps.clone();
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        let grads = vec![Tensor::vector(vec![1.0]), Tensor::vector(vec![f64::NAN])];
        let err = adam.step(0.1, named(&mut ps), &grads).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "p1"));
        assert_eq!(ps, before);
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn weight_decay_shrinks_without_gradient() {
        let mut ps = vec![Tensor::vector(vec![2.0])];
        let mut adam = Adam::new(AdamConfig {
            weight_decay: 0.1,
            ..AdamConfig::default()
        })
        .unwrap();
        adam.step(0.5, named(&mut ps), &[Tensor::vector(vec![0.0])]).unwrap();
        assert!((ps[0].data()[0] - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn schedules_match_published_settings() {
        let pre = PretrainConfig::default().schedule();
        assert_eq!(pre.lr_at(1), 1e-4);
        assert_eq!(pre.lr_at(3), 1e-4);
        assert!((pre.lr_at(4) - 1e-5).abs() < 1e-18);
        assert!((pre.lr_at(7) - 1e-6).abs() < 1e-18);
        let fine = TrainConfig::default().schedule();
        assert_eq!(fine.lr_at(2), 5e-4);
        assert!((fine.lr_at(3) - 1e-4).abs() < 1e-18);
        assert!((fine.lr_at(5) - 2e-5).abs() < 1e-18);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        cfg.validate().unwrap();
        cfg.batch_size = 1;
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"epochs": 3, "bogus": 1}"#);
        assert!(err.is_err());
        let ok: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
        assert_eq!(ok.epochs, 3);
        assert_eq!(ok.batch_size, 32);
    }
}
