//! Central finite-difference checks of every hand-written backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{total_mmd_loss, total_mmd_loss_grad, MmdConfig};
use crate::audio::{lift_audio, lift_audio_backward};
use crate::classifier::{focal_loss, focal_loss_grad, head_backward, head_forward, BranchMasks, FocalConfig};
use crate::comments::{textcnn_backward, textcnn_forward};
use crate::error::{Error, Result};
use crate::fusion::{
    concat_project_backward, concat_project_forward, fsf_gate_backward, fsf_gate_forward, ssm_encode_backward,
    ssm_encode_forward,
};
use crate::ingest::{FeatureSequence, Modality};
use crate::linalg::{softmax, softmax_backward, Matrix};
use crate::model::{ModelConfig, ModelParams};
use crate::sentiment::{sentiment_backward, sentiment_forward};

pub const REGISTERED_OPS: [&str; 9] = [
    "lift",
    "concat_project",
    "fsf_gate",
    "ssm_encode",
    "textcnn_score",
    "sentiment_head",
    "fuse_and_classify",
    "focal_loss",
    "total_mmd_loss",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    pub perturbation: f64,
    pub instances: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            perturbation: 1e-5,
            instances: 5,
            tolerance: 1e-4,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpReport {
    pub op: String,
    pub instances: usize,
    pub coordinates: usize,
    pub max_rel_err: f64,
    /// Tensor holding the worst coordinate.
    pub worst_tensor: String,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

type Eval = Box<dyn Fn(&[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)>>;

/// A scalar function of named tensors together with its analytic gradient.
struct Problem {
    names: Vec<String>,
    tensors: Vec<Vec<f64>>,
    eval: Eval,
}

fn check(problem: &Problem, h: f64) -> Result<(f64, String, usize)> {
    let (_, analytic) = (problem.eval)(&problem.tensors)?;
    let mut worst = (0.0, String::new(), 0);
    let mut x = problem.tensors.clone();
    for t in 0..x.len() {
        for i in 0..x[t].len() {
            let orig = x[t][i];
            x[t][i] = orig + h;
            let up = (problem.eval)(&x)?.0;
            x[t][i] = orig - h;
            let down = (problem.eval)(&x)?.0;
            x[t][i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(analytic[t][i], numeric);
            if err > worst.0 || worst.1.is_empty() {
                worst.0 = worst.0.max(err);
                worst.1 = problem.names[t].clone();
            }
            worst.2 += 1;
        }
    }
    Ok(worst)
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        d: 4,
        n_mfcc: 3,
        d_model: 5,
        d_gate: 4,
        d_state: 3,
        emb_dim: 3,
        filter_widths: vec![2, 3, 4],
        n_filters: 3,
        seq_len: 9,
        sentiment_dim: 6,
        sentiment_hidden: 5,
        ..ModelConfig::default()
    }
}

const VOCAB: usize = 12;

fn random_params(rng: &mut ChaCha8Rng) -> ModelParams {
    let mut p = ModelParams::init(&tiny_config(), VOCAB, rng.random());
    p.for_each_mut(|name, t| {
        if name == "textcnn.embedding" {
            return;
        }
        for v in t.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    });
    p.sentiment.alpha = vec![rng.random_range(0.2..0.8)];
    // Steps of order one keep the decay gradients well above roundoff.
    for b in &mut p.fusion.ssm.b_delta {
        *b = rng.random_range(-1.0..1.0);
    }
    p
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn weighted_sum(out: &[f64], w: &[f64]) -> f64 {
    out.iter().zip(w).map(|(a, b)| a * b).sum()
}

/// Parameter tensors whose names start with `prefix`.
fn take(p: &ModelParams, prefix: &str) -> (Vec<String>, Vec<Vec<f64>>) {
    let (mut names, mut tensors) = (Vec::new(), Vec::new());
    p.for_each(|n, t| {
        if n.starts_with(prefix) {
            names.push(n.to_string());
            tensors.push(t.to_vec());
        }
    });
    (names, tensors)
}

fn put(p: &mut ModelParams, prefix: &str, vals: &[Vec<f64>]) {
    let mut i = 0;
    p.for_each_mut(|n, t| {
        if n.starts_with(prefix) {
            t.clone_from(&vals[i]);
            i += 1;
        }
    });
}

fn matrix_like(m: &Matrix, data: &[f64]) -> Matrix {
    Matrix::from_vec(m.rows, m.cols, data.to_vec()).expect("shape")
}

fn build(op: &str, rng: &mut ChaCha8Rng) -> Result<Problem> {
    let cfg = tiny_config();
    let base = random_params(rng);
    let q = rng.random_range(2..6);
    let problem = match op {
        "lift" => {
            let mfcc = random_matrix(rng.random_range(2..6), cfg.n_mfcc, rng);
            let r = random_matrix(mfcc.rows, cfg.d, rng);
            let (names, tensors) = take(&base, "lift.");
            Problem {
                names,
                tensors,
                eval: Box::new(move |x| {
                    let mut p = base.clone();
                    put(&mut p, "lift.", x);
                    let out = lift_audio(&mfcc, &p.lift)?;
                    let mut g = p.zeros_like();
                    lift_audio_backward(&mfcc, &r, &mut g.lift);
                    Ok((weighted_sum(&out.tokens.data, &r.data), take(&g, "lift.").1))
                }),
            }
        }
        "concat_project" => {
            let inputs: Vec<Matrix> = (0..4).map(|_| random_matrix(q, cfg.d, rng)).collect();
            let r = random_matrix(q, cfg.d_model, rng);
            let prefixes = ["fusion.proj_", "fusion.ln_"];
            let mut names: Vec<String> = ["text", "audio", "video", "face"].iter().map(|s| format!("input.{s}")).collect();
            let mut tensors: Vec<Vec<f64>> = inputs.iter().map(|m| m.data.clone()).collect();
            for pre in prefixes {
                let (n, t) = take(&base, pre);
                names.extend(n);
                tensors.extend(t);
            }
            Problem {
                names,
                tensors,
                eval: Box::new(move |x| {
                    let mut p = base.clone();
                    put(&mut p, "fusion.proj_", &x[4..6]);
                    put(&mut p, "fusion.ln_", &x[6..8]);
                    let seq = |i: usize, m: Modality| FeatureSequence::new(m, matrix_like(&inputs[i], &x[i]));
                    let (t, a, v, f) = (seq(0, Modality::Text)?, seq(1, Modality::Audio)?, seq(2, Modality::Video)?, seq(3, Modality::Face)?);
                    let (out, cache) = concat_project_forward(&t, &a, &v, &f, &p.fusion)?;
                    let mut g = p.zeros_like();
                    let dins = concat_project_backward(&cache, &r, &p.fusion, &mut g.fusion);
                    let mut grads: Vec<Vec<f64>> = dins.into_iter().map(|m| m.data).collect();
                    grads.extend(take(&g, "fusion.proj_").1);
                    grads.extend(take(&g, "fusion.ln_").1);
                    Ok((weighted_sum(&out.data, &r.data), grads))
                }),
            }
        }
        "fsf_gate" => {
            let input = random_matrix(q, cfg.d_model, rng);
            let r = random_matrix(q, cfg.d_model, rng);
            let (n, t) = take(&base, "fusion.gate_");
            Problem {
                names: std::iter::once("input".to_string()).chain(n).collect(),
                tensors: std::iter::once(input.data.clone()).chain(t).collect(),
                eval: Box::new(move |x| {
                    let mut p = base.clone();
                    put(&mut p, "fusion.gate_", &x[1..]);
                    let (out, cache) = fsf_gate_forward(&matrix_like(&input, &x[0]), &p.fusion)?;
                    let mut g = p.zeros_like();
                    let din = fsf_gate_backward(&cache, &r, &p.fusion, &mut g.fusion);
                    let grads = std::iter::once(din.data).chain(take(&g, "fusion.gate_").1).collect();
                    Ok((weighted_sum(&out.data, &r.data), grads))
                }),
            }
        }
        "ssm_encode" => {
            let input = random_matrix(q, cfg.d_model, rng);
            let r = random_matrix(q, cfg.d_model, rng);
            let (n, t) = take(&base, "fusion.ssm.");
            Problem {
                names: std::iter::once("input".to_string()).chain(n).collect(),
                tensors: std::iter::once(input.data.clone()).chain(t).collect(),
                eval: Box::new(move |x| {
                    let mut p = base.clone();
                    put(&mut p, "fusion.ssm.", &x[1..]);
                    let (out, cache) = ssm_encode_forward(&matrix_like(&input, &x[0]), &p.fusion.ssm)?;
                    let mut g = p.zeros_like();
                    let din = ssm_encode_backward(&cache, &r, &p.fusion.ssm, &mut g.fusion.ssm);
                    let grads = std::iter::once(din.data).chain(take(&g, "fusion.ssm.").1).collect();
                    Ok((weighted_sum(&out.data, &r.data), grads))
                }),
            }
        }
        "textcnn_score" => {
            let indices: Vec<usize> = (0..cfg.seq_len).map(|_| rng.random_range(1..VOCAB)).collect();
            let r = random_vec(2, rng);
            let (names, tensors) = take(&base, "textcnn.");
            Problem {
                names,
                tensors,
                eval: Box::new(move |x| {
                    let mut p = base.clone();
                    put(&mut p, "textcnn.", x);
                    let (probs, cache) = textcnn_forward(&indices, &p.textcnn)?;
                    let mut g = p.zeros_like();
                    textcnn_backward(&cache, &[r[0], r[1]], &p.textcnn, &mut g.textcnn);
                    Ok((weighted_sum(&probs, &r), take(&g, "textcnn.").1))
                }),
            }
        }
        "sentiment_head" => {
            let comment = random_vec(cfg.sentiment_dim, rng);
            let knowledge = random_vec(cfg.sentiment_dim, rng);
            let r = random_vec(3, rng);
            let (names, tensors) = take(&base, "sentiment.");
            Problem {
                names,
                tensors,
                eval: Box::new(move |x| {
                    let mut p = base.clone();
                    put(&mut p, "sentiment.", x);
                    let (probs, cache) = sentiment_forward(&comment, &knowledge, &p.sentiment)?;
                    let mut g = p.zeros_like();
                    sentiment_backward(&cache, &r, &p.sentiment, &mut g.sentiment);
                    Ok((weighted_sum(&probs, &r), take(&g, "sentiment.").1))
                }),
            }
        }
        "fuse_and_classify" => {
            let video = random_vec(cfg.d_model, rng);
            let comment = random_vec(2, rng);
            let sent = random_vec(3, rng);
            let r = random_vec(2, rng);
            let (n, t) = take(&base, "head.");
            Problem {
                names: ["input.video", "input.comment", "input.sentiment"].iter().map(|s| s.to_string()).chain(n).collect(),
                tensors: [video, comment, sent].into_iter().chain(t).collect(),
                eval: Box::new(move |x| {
                    let mut p = base.clone();
                    put(&mut p, "head.", &x[3..]);
                    let (probs, cache) = head_forward(&x[0], &[x[1][0], x[1][1]], &[x[2][0], x[2][1], x[2][2]], &p.head, BranchMasks::default())?;
                    let mut g = p.zeros_like();
                    let dins = head_backward(&cache, &[r[0], r[1]], &p.head, &mut g.head);
                    let grads = [dins.video, dins.comment.to_vec(), dins.sentiment.to_vec()].into_iter().chain(take(&g, "head.").1).collect();
                    Ok((weighted_sum(&probs, &r), grads))
                }),
            }
        }
        "focal_loss" => {
            let label = rng.random_range(0..2u8);
            let a = rng.random_range(0.2..0.8);
            let focal = FocalConfig { gamma: 2.0, alpha: [a, 1.0 - a] };
            let logits = vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            Problem {
                names: vec!["logits".into()],
                tensors: vec![logits],
                eval: Box::new(move |x| {
                    let p = softmax(&x[0]);
                    let probs = [p[0], p[1]];
                    let loss = focal_loss(&probs, label, &focal)?;
                    let g = focal_loss_grad(&probs, label, &focal)?;
                    Ok((loss, vec![softmax_backward(&p, &g)]))
                }),
            }
        }
        "total_mmd_loss" => {
            let text = FeatureSequence::new(Modality::Text, random_matrix(q, cfg.d, rng))?;
            let rows: Vec<usize> = (0..3).map(|_| rng.random_range(2..6)).collect();
            let tensors: Vec<Vec<f64>> = rows.iter().map(|&n| random_matrix(n, cfg.d, rng).data).collect();
            let mmd_cfg = MmdConfig::fixed(vec![0.5, 1.0, 2.0]);
            let d = cfg.d;
            Problem {
                names: vec!["aligned.audio".into(), "aligned.video".into(), "aligned.face".into()],
                tensors,
                eval: Box::new(move |x| {
                    let seq = |i: usize, m: Modality| {
                        FeatureSequence::new(m, Matrix::from_vec(x[i].len() / d, d, x[i].clone())?)
                    };
                    let (a, v, f) = (seq(0, Modality::Audio)?, seq(1, Modality::Video)?, seq(2, Modality::Face)?);
                    let value = total_mmd_loss(&a, &v, &f, &text, &mmd_cfg)?;
                    let g = total_mmd_loss_grad(&a, &v, &f, &text, &mmd_cfg)?;
                    Ok((value, vec![g.audio.data, g.video.data, g.face.data]))
                }),
            }
        }
        other => return Err(Error::UnregisteredOp(other.to_string())),
    };
    Ok(problem)
}

/// Checks one registered op on `cfg.instances` random instances.
pub fn grad_check(op: &str, cfg: &GradCheckConfig) -> Result<OpReport> {
    if !REGISTERED_OPS.contains(&op) {
        return Err(Error::UnregisteredOp(op.to_string()));
    }
    let mut report = OpReport {
        op: op.to_string(),
        instances: cfg.instances,
        coordinates: 0,
        max_rel_err: 0.0,
        worst_tensor: String::new(),
        passed: true,
    };
    for i in 0..cfg.instances {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(i as u64));
        let problem = build(op, &mut rng)?;
        let (err, tensor, coords) = check(&problem, cfg.perturbation)?;
        report.coordinates += coords;
        if err >= report.max_rel_err {
            report.max_rel_err = err;
            report.worst_tensor = tensor;
        }
    }
    report.passed = report.max_rel_err <= cfg.tolerance;
    Ok(report)
}

pub fn grad_check_all(cfg: &GradCheckConfig) -> Result<Vec<OpReport>> {
    REGISTERED_OPS.iter().map(|op| grad_check(op, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_op_is_rejected() {
        let err = grad_check("softmax", &GradCheckConfig::default()).unwrap_err();
        assert!(matches!(err, Error::UnregisteredOp(ref n) if n == "softmax"));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-10, 0.0) - 1e-2).abs() < 1e-15);
    }
}
