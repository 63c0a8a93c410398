//! Late-fusion decision head and the training objective: focal loss on the
//! final probabilities plus a weighted alignment term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{affine, affine_backward, softmax, softmax_backward, Matrix};

pub const PROB_FLOOR: f64 = 1e-12;
/// Default weight of the alignment term.
pub const DEFAULT_LAMBDA: f64 = 0.3;

/// Ablation switches; configuration, never trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchMasks {
    pub comment: bool,
    pub sentiment: bool,
}

impl Default for BranchMasks {
    fn default() -> Self {
        Self {
            comment: true,
            sentiment: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    /// `(d_model + 2 + 3) × 2`
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl HeadParams {
    pub fn zeros(d_model: usize) -> Self {
        Self {
            w: Matrix::zeros(d_model + 5, 2),
            b: vec![0.0; 2],
        }
    }
}

pub struct HeadCache {
    input: Vec<f64>,
    probs: Vec<f64>,
    d_model: usize,
    masks: BranchMasks,
}

pub fn fuse_and_classify(
    video_vec: &[f64],
    comment_probs: &[f64; 2],
    sentiment_probs: &[f64; 3],
    params: &HeadParams,
    masks: BranchMasks,
) -> Result<[f64; 2]> {
    head_forward(video_vec, comment_probs, sentiment_probs, params, masks).map(|(p, _)| p)
}

pub fn head_forward(
    video_vec: &[f64],
    comment_probs: &[f64; 2],
    sentiment_probs: &[f64; 3],
    params: &HeadParams,
    masks: BranchMasks,
) -> Result<([f64; 2], HeadCache)> {
    if params.w.rows != video_vec.len() + 5 || params.w.cols != 2 || params.b.len() != 2 {
        return Err(Error::DimMismatch(format!(
            "head is {}x{}, input has {} + 5 features",
            params.w.rows,
            params.w.cols,
            video_vec.len()
        )));
    }
    let mut input = video_vec.to_vec();
    if masks.comment {
        input.extend_from_slice(comment_probs);
    } else {
        input.extend([0.0; 2]);
    }
    if masks.sentiment {
        input.extend_from_slice(sentiment_probs);
    } else {
        input.extend([0.0; 3]);
    }
    let probs = softmax(&affine(&input, &params.w, &params.b));
    Ok((
        [probs[0], probs[1]],
        HeadCache {
            input,
            probs,
            d_model: video_vec.len(),
            masks,
        },
    ))
}

pub struct HeadGrads {
    pub video: Vec<f64>,
    pub comment: [f64; 2],
    pub sentiment: [f64; 3],
}

pub fn head_backward(cache: &HeadCache, dprobs: &[f64; 2], params: &HeadParams, grads: &mut HeadParams) -> HeadGrads {
    let dlogits = softmax_backward(&cache.probs, dprobs);
    let dx = affine_backward(&cache.input, &params.w, &dlogits, &mut grads.w, &mut grads.b);
    let dm = cache.d_model;
    let mut out = HeadGrads {
        video: dx[..dm].to_vec(),
        comment: [0.0; 2],
        sentiment: [0.0; 3],
    };
    if cache.masks.comment {
        out.comment.copy_from_slice(&dx[dm..dm + 2]);
    }
    if cache.masks.sentiment {
        out.sentiment.copy_from_slice(&dx[dm + 2..dm + 5]);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocalConfig {
    pub gamma: f64,
    /// Per-class weights `[non-PCL, PCL]`.
    pub alpha: [f64; 2],
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: [0.5, 0.5],
        }
    }
}

impl FocalConfig {
    /// Weights proportional to inverse class frequency, normalized to sum 1.
    pub fn inverse_frequency(labels: &[u8], gamma: f64) -> Result<Self> {
        let pos = labels.iter().filter(|&&l| l == 1).count();
        let neg = labels.len() - pos;
        if pos == 0 || neg == 0 {
            return Err(Error::InvalidArgument("both classes must be present".into()));
        }
        let (wn, wp) = (1.0 / neg as f64, 1.0 / pos as f64);
        Ok(Self {
            gamma,
            alpha: [wn / (wn + wp), wp / (wn + wp)],
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!("focal gamma {}", self.gamma)));
        }
        if self.alpha.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::InvalidArgument(format!("focal alpha {:?}", self.alpha)));
        }
        Ok(())
    }
}

fn check_probs(probs: &[f64; 2], label: u8) -> Result<()> {
    if label > 1 {
        return Err(Error::InvalidLabel(label));
    }
    if ((probs[0] + probs[1]) - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("probabilities {probs:?} do not sum to 1")));
    }
    Ok(())
}

/// `-alpha[y] · (1 - p_y)^gamma · ln p_y`, with `p_y` clamped to `[1e-12, 1]`.
pub fn focal_loss(probs: &[f64; 2], label: u8, cfg: &FocalConfig) -> Result<f64> {
    check_probs(probs, label)?;
    let p = probs[label as usize].clamp(PROB_FLOOR, 1.0);
    Ok(-cfg.alpha[label as usize] * (1.0 - p).powf(cfg.gamma) * p.ln())
}

/// dL/dprobs; only the true-class entry is nonzero.
pub fn focal_loss_grad(probs: &[f64; 2], label: u8, cfg: &FocalConfig) -> Result<[f64; 2]> {
    check_probs(probs, label)?;
    let y = label as usize;
    let raw = probs[y];
    let mut g = [0.0; 2];
    if !(PROB_FLOOR..=1.0).contains(&raw) {
        return Ok(g);
    }
    let p = raw;
    let a = cfg.alpha[y];
    let q = 1.0 - p;
    let mod_term = if cfg.gamma == 0.0 {
        0.0
    } else if q > 0.0 {
        cfg.gamma * q.powf(cfg.gamma - 1.0) * p.ln()
    } else {
        0.0
    };
    g[y] = -a * (-mod_term + q.powf(cfg.gamma) / p);
    Ok(g)
}

pub fn total_loss(focal: f64, mmd: f64, lambda: f64) -> f64 {
    focal + lambda * mmd
}
