//! AdamW with cosine annealing and the seeded end-to-end training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{BranchMasks, FocalConfig};
use crate::comments::{build_vocab, clean_comments, segment, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::{compute_metrics, MetricSummary, MetricsReport};
use crate::ingest::VideoSample;
use crate::model::{loss_and_grad, predict, prepare_sample, ModelConfig, ModelParams, Objective, PreparedSample, Resources};
use crate::sentiment::{Embedder, SkgStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eta_max: f64,
    pub eta_min: f64,
    pub t_max: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub lambda_mmd: f64,
    pub adam_eps: f64,
    /// Share of each class held out for evaluation, per seed.
    pub eval_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-3,
            eta_max: 1e-4,
            eta_min: 1e-6,
            t_max: 75,
            batch_size: 8,
            seeds: vec![0, 1, 2, 3, 4],
            lambda_mmd: 0.3,
            adam_eps: 1e-8,
            eval_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.eta_min > 0.0 && self.eta_min <= self.eta_max) {
            return bad("need 0 < eta_min <= eta_max");
        }
        if self.epochs < 1 || self.t_max < 1 {
            return bad("epochs and t_max must be at least 1");
        }
        for b in [self.beta1, self.beta2] {
            if !(b > 0.0 && b < 1.0) {
                return bad("betas must lie in (0, 1)");
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return bad("eval_fraction must lie in [0, 1)");
        }
        if self.lambda_mmd < 0.0 || self.adam_eps <= 0.0 || self.weight_decay < 0.0 {
            return bad("lambda_mmd, adam_eps and weight_decay must be non-negative");
        }
        Ok(())
    }
}

/// Learning rate for epoch `t`; stays at `eta_min` after `t_max`.
pub fn cosine_lr(t: usize, cfg: &TrainConfig) -> f64 {
    let frac = t.min(cfg.t_max) as f64 / cfg.t_max as f64;
    let w = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
    w * cfg.eta_max + (1.0 - w) * cfg.eta_min
}

/// Moment buffers in the tensor order of [`ModelParams::for_each`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let mut m = Vec::new();
        params.for_each(|_, t| m.push(vec![0.0; t.len()]));
        Self { step: 0, v: m.clone(), m }
    }
}

/// One decoupled-decay Adam update of a single tensor; `step` counts from 1.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(theta: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], step: u64, lr: f64, cfg: &TrainConfig) {
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..theta.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        let old = theta[i];
        theta[i] = old - lr * m_hat / (v_hat.sqrt() + cfg.adam_eps) - lr * cfg.weight_decay * old;
    }
}

pub fn adamw_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState, lr: f64, cfg: &TrainConfig) -> Result<()> {
    let mut g = Vec::new();
    let mut bad = None;
    grads.for_each(|name, t| {
        if bad.is_none() && t.iter().any(|x| !x.is_finite()) {
            bad = Some(name.to_string());
        }
        g.push(t.to_vec());
    });
    if let Some(name) = bad {
        return Err(Error::NanGradient(name));
    }
    if g.len() != state.m.len() {
        return Err(Error::DimMismatch("optimizer state does not match parameters".into()));
    }
    state.step += 1;
    let mut i = 0;
    let mut shape_err = None;
    params.for_each_mut(|name, t| {
        if t.len() != g[i].len() || t.len() != state.m[i].len() {
            shape_err.get_or_insert_with(|| name.to_string());
        } else {
            adamw_update(t, &g[i], &mut state.m[i], &mut state.v[i], state.step, lr, cfg);
        }
        i += 1;
    });
    if let Some(name) = shape_err {
        return Err(Error::DimMismatch(format!("gradient shape mismatch for {name}")));
    }
    for a in &mut params.sentiment.alpha {
        *a = a.clamp(0.0, 1.0);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub acc: f64,
    pub f1m: f64,
    pub recall: f64,
    pub precision: f64,
}

pub fn log_to_jsonl(log: &[EpochRecord]) -> Result<String> {
    let mut out = String::new();
    for r in log {
        out += &serde_json::to_string(r)?;
        out.push('\n');
    }
    Ok(out)
}

/// Labelled videos together with the knowledge store used for matching.
pub struct Dataset<'a> {
    pub samples: &'a [VideoSample],
    pub store: &'a SkgStore,
    pub embedder: &'a dyn Embedder,
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub params: ModelParams,
    pub vocab: Vocabulary,
    pub focal: FocalConfig,
    pub log: Vec<EpochRecord>,
    pub train_indices: Vec<usize>,
    pub eval_indices: Vec<usize>,
    /// Metrics on the held-out part, or on the training part when nothing is held out.
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub runs: Vec<SeedRun>,
    pub mean: MetricSummary,
}

/// Stratified split: each class is shuffled and its first `fraction` held out.
pub fn split_indices(labels: &[u8], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let k = (idx.len() as f64 * fraction).round() as usize;
        eval.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    eval.sort_unstable();
    (train, eval)
}

pub fn vocab_from_samples(samples: &[&VideoSample], cfg: &ModelConfig) -> Result<Vocabulary> {
    let corpus: Vec<Vec<String>> = samples
        .iter()
        .flat_map(|s| clean_comments(&s.comments))
        .filter_map(|c| segment(&c.text).ok())
        .collect();
    build_vocab(&corpus, cfg.vocab_min_freq, cfg.vocab_max_size)
}

/// Runs `f` on a pool capped by `CPCL_THREADS` when that is set.
pub fn with_thread_cap<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    match std::env::var("CPCL_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n > 0 => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        _ => f(),
    }
}

pub fn predict_labels(params: &ModelParams, cfg: &ModelConfig, samples: &[PreparedSample], masks: BranchMasks) -> Result<Vec<u8>> {
    samples
        .par_iter()
        .map(|s| predict(params, cfg, s, masks).map(|p| u8::from(p[1] > p[0])))
        .collect()
}

fn evaluate(params: &ModelParams, cfg: &ModelConfig, samples: &[PreparedSample], masks: BranchMasks) -> Result<MetricsReport> {
    let preds = predict_labels(params, cfg, samples, masks)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    compute_metrics(&preds, &labels)
}

/// Trains one seed on `train_idx` and reports on `eval_idx`.
pub fn train_seed(
    data: &Dataset,
    train_idx: &[usize],
    eval_idx: &[usize],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    masks: BranchMasks,
    seed: u64,
) -> Result<SeedRun> {
    model_cfg.validate()?;
    cfg.validate()?;
    let train_refs: Vec<&VideoSample> = train_idx.iter().map(|&i| &data.samples[i]).collect();
    let labels: Vec<u8> = train_refs.iter().map(|s| s.label).collect();
    if !labels.contains(&0) || !labels.contains(&1) {
        return Err(Error::InvalidArgument("training data must contain both classes".into()));
    }
    let vocab = vocab_from_samples(&train_refs, model_cfg)?;
    let res = Resources { vocab: &vocab, store: data.store, embedder: data.embedder };
    let prep = |idx: &[usize]| -> Result<Vec<PreparedSample>> {
        idx.par_iter().map(|&i| prepare_sample(&data.samples[i], model_cfg, &res)).collect()
    };
    let train_set = prep(train_idx)?;
    let eval_set = prep(eval_idx)?;
    let focal = match model_cfg.focal_alpha {
        Some(alpha) => FocalConfig { gamma: model_cfg.focal_gamma, alpha },
        None => FocalConfig::inverse_frequency(&labels, model_cfg.focal_gamma)?,
    };
    focal.validate()?;

    let mut params = ModelParams::init(model_cfg, vocab.len(), seed);
    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed_5eed_5eed);
    let obj = Objective { masks, lambda: cfg.lambda_mmd };
    let report_set = if eval_set.is_empty() { &train_set } else { &eval_set };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<_> = chunk
                .par_iter()
                .map(|&i| loss_and_grad(&params, model_cfg, &train_set[i], &obj, &focal))
                .collect();
            let mut grads = params.zeros_like();
            let mut batch_loss = 0.0;
            for r in results {
                let (res, g) = r.map_err(|e| if e.is_numeric() { Error::Diverged { epoch, batch } } else { e })?;
                batch_loss += res.loss;
                grads.add_scaled(&g, 1.0);
            }
            let scale = 1.0 / chunk.len() as f64;
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged { epoch, batch });
            }
            grads.for_each_mut(|_, t| t.iter_mut().for_each(|v| *v *= scale));
            adamw_step(&mut params, &grads, &mut state, lr, cfg).map_err(|e| match e {
                Error::NanGradient(_) => Error::Diverged { epoch, batch },
                e => e,
            })?;
            loss_sum += batch_loss * chunk.len() as f64;
        }
        let m = evaluate(&params, model_cfg, report_set, masks)?;
        log.push(EpochRecord {
            epoch,
            lr,
            loss: loss_sum / train_set.len() as f64,
            acc: m.accuracy,
            f1m: m.macro_f1,
            recall: m.recall,
            precision: m.precision,
        });
    }
    let metrics = evaluate(&params, model_cfg, report_set, masks)?;
    Ok(SeedRun {
        seed,
        params,
        vocab,
        focal,
        log,
        train_indices: train_idx.to_vec(),
        eval_indices: eval_idx.to_vec(),
        metrics,
    })
}

/// Trains once per configured seed with a fresh stratified split each time.
pub fn train(data: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig, masks: BranchMasks) -> Result<TrainOutcome> {
    if data.samples.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    cfg.validate()?;
    let labels: Vec<u8> = data.samples.iter().map(|s| s.label).collect();
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let (train_idx, eval_idx) = split_indices(&labels, cfg.eval_fraction, seed);
        runs.push(train_seed(data, &train_idx, &eval_idx, model_cfg, cfg, masks, seed)?);
    }
    let mean = MetricSummary::mean(&runs.iter().map(|r| r.metrics.summary()).collect::<Vec<_>>());
    Ok(TrainOutcome { runs, mean })
}
