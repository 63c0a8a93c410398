//! The full detector graph for one video: alignment, fusion, the two
//! comment branches and the decision head, with an explicit backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    barycentric_backward, barycentric_project, cost_matrix, rot_solve, total_mmd_loss_grad, MmdConfig, RotConfig,
    TransportPlan,
};
use crate::audio::{lift_audio, lift_audio_backward, LiftParams};
use crate::classifier::{
    focal_loss, focal_loss_grad, head_backward, head_forward, total_loss, BranchMasks, FocalConfig, HeadParams,
};
use crate::comments::{
    clean_comments, encode_comment_batch, textcnn_backward, textcnn_forward, CharSegmenter, TextCnnParams, Vocabulary,
};
use crate::error::{Error, Result};
use crate::fusion::{
    concat_project_backward, concat_project_forward, fsf_gate_backward, fsf_gate_forward, pool_video,
    pool_video_backward, ssm_encode_backward, ssm_encode_forward, FusionParams,
};
use crate::ingest::{AudioTrack, FeatureSequence, VideoSample};
use crate::linalg::Matrix;
use crate::sentiment::{
    knowledge_vector, match_embedding, sentiment_backward, sentiment_forward, Embedder, MatchConfig,
    SentimentHeadParams, SkgStore,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Shared embedding dimension of the four modality sequences.
    pub d: usize,
    /// MFCC coefficients fed to the audio lift.
    pub n_mfcc: usize,
    pub d_model: usize,
    pub d_gate: usize,
    pub d_state: usize,
    pub emb_dim: usize,
    pub filter_widths: Vec<usize>,
    pub n_filters: usize,
    pub seq_len: usize,
    pub max_comments: usize,
    pub vocab_min_freq: usize,
    pub vocab_max_size: usize,
    pub sentiment_dim: usize,
    pub sentiment_hidden: usize,
    pub alpha_kg: f64,
    pub rot: RotConfig,
    pub mmd: MmdConfig,
    pub matching: MatchConfig,
    pub focal_gamma: f64,
    /// `None` derives inverse-frequency weights from the training labels.
    pub focal_alpha: Option<[f64; 2]>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 768,
            n_mfcc: 40,
            d_model: 128,
            d_gate: 64,
            d_state: 16,
            emb_dim: 64,
            filter_widths: vec![2, 3, 4],
            n_filters: 32,
            seq_len: 128,
            max_comments: 64,
            vocab_min_freq: 1,
            vocab_max_size: 20_000,
            sentiment_dim: 64,
            sentiment_hidden: 32,
            alpha_kg: 0.5,
            rot: RotConfig::default(),
            mmd: MmdConfig::default(),
            matching: MatchConfig::default(),
            focal_gamma: 2.0,
            focal_alpha: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if [self.d, self.n_mfcc, self.d_model, self.d_gate, self.d_state, self.emb_dim, self.n_filters, self.sentiment_dim, self.sentiment_hidden]
            .contains(&0)
        {
            return bad("model dimensions must be positive".into());
        }
        if self.filter_widths.is_empty() || self.filter_widths.contains(&0) {
            return bad("filter widths must be positive".into());
        }
        let maxw = *self.filter_widths.iter().max().unwrap();
        if self.seq_len < maxw {
            return bad(format!("seq_len {} < widest filter {maxw}", self.seq_len));
        }
        if !(0.0..=1.0).contains(&self.alpha_kg) {
            return bad("alpha_kg must be in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub lift: LiftParams,
    pub fusion: FusionParams,
    pub textcnn: TextCnnParams,
    pub sentiment: SentimentHeadParams,
    pub head: HeadParams,
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig, vocab_size: usize) -> Self {
        Self {
            lift: LiftParams::zeros(cfg.n_mfcc, cfg.d),
            fusion: FusionParams::zeros(cfg.d, cfg.d_model, cfg.d_gate, cfg.d_state),
            textcnn: TextCnnParams::zeros(vocab_size, cfg.emb_dim, &cfg.filter_widths, cfg.n_filters),
            sentiment: SentimentHeadParams::zeros(cfg.sentiment_dim, cfg.sentiment_hidden),
            head: HeadParams::zeros(cfg.d_model),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, t| t.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    pub fn init(cfg: &ModelConfig, vocab_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(cfg, vocab_size);
        let fill = |m: &mut Matrix, rng: &mut ChaCha8Rng| {
            let s = (6.0 / (m.rows + m.cols) as f64).sqrt();
            m.data.iter_mut().for_each(|v| *v = rng.random_range(-s..s));
        };
        fill(&mut p.lift.proj, &mut rng);
        fill(&mut p.fusion.proj_w, &mut rng);
        p.fusion.ln_gamma.iter_mut().for_each(|v| *v = 1.0);
        fill(&mut p.fusion.gate_w1, &mut rng);
        let s = (1.0 / cfg.d_gate as f64).sqrt();
        p.fusion.gate_w2.iter_mut().for_each(|v| *v = rng.random_range(-s..s));
        p.fusion.gate_b2 = vec![1.0];
        let ssm = &mut p.fusion.ssm;
        fill(&mut ssm.w_delta, &mut rng);
        ssm.w_delta.data.iter_mut().for_each(|v| *v *= 0.1);
        for b in ssm.b_delta.iter_mut() {
            // Initial steps spread log-uniformly over [1e-3, 1e-1].
            let dt: f64 = rng.random_range(1e-3f64.ln()..1e-1f64.ln()).exp();
            *b = dt + (-(-dt).exp_m1()).ln();
        }
        fill(&mut ssm.w_b, &mut rng);
        fill(&mut ssm.w_c, &mut rng);
        for ch in 0..cfg.d_model {
            for s in 0..cfg.d_state {
                ssm.log_a.set(ch, s, ((s + 1) as f64).ln());
            }
        }
        ssm.d_skip.iter_mut().for_each(|v| *v = 1.0);
        for r in 1..vocab_size {
            for v in p.textcnn.embedding.row_mut(r) {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        for conv in &mut p.textcnn.convs {
            fill(&mut conv.weight, &mut rng);
        }
        fill(&mut p.textcnn.head_w, &mut rng);
        p.sentiment.alpha = vec![cfg.alpha_kg];
        fill(&mut p.sentiment.w1, &mut rng);
        fill(&mut p.sentiment.w2, &mut rng);
        fill(&mut p.head.w, &mut rng);
        p
    }

    /// Visits every trainable tensor in a fixed order with its name.
    pub fn for_each(&self, mut f: impl FnMut(&str, &[f64])) {
        let mut this = self.clone();
        this.for_each_mut(|n, t| f(n, t));
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Vec<f64>)) {
        f("lift.proj", &mut self.lift.proj.data);
        f("lift.bias", &mut self.lift.bias);
        let fu = &mut self.fusion;
        f("fusion.proj_w", &mut fu.proj_w.data);
        f("fusion.proj_b", &mut fu.proj_b);
        f("fusion.ln_gamma", &mut fu.ln_gamma);
        f("fusion.ln_beta", &mut fu.ln_beta);
        f("fusion.gate_w1", &mut fu.gate_w1.data);
        f("fusion.gate_b1", &mut fu.gate_b1);
        f("fusion.gate_w2", &mut fu.gate_w2);
        f("fusion.gate_b2", &mut fu.gate_b2);
        let s = &mut fu.ssm;
        f("fusion.ssm.w_delta", &mut s.w_delta.data);
        f("fusion.ssm.b_delta", &mut s.b_delta);
        f("fusion.ssm.w_b", &mut s.w_b.data);
        f("fusion.ssm.b_b", &mut s.b_b);
        f("fusion.ssm.w_c", &mut s.w_c.data);
        f("fusion.ssm.b_c", &mut s.b_c);
        f("fusion.ssm.log_a", &mut s.log_a.data);
        f("fusion.ssm.d_skip", &mut s.d_skip);
        let t = &mut self.textcnn;
        f("textcnn.embedding", &mut t.embedding.data);
        for c in &mut t.convs {
            f(&format!("textcnn.conv{}.weight", c.width), &mut c.weight.data);
            f(&format!("textcnn.conv{}.bias", c.width), &mut c.bias);
        }
        f("textcnn.head_w", &mut t.head_w.data);
        f("textcnn.head_b", &mut t.head_b);
        let se = &mut self.sentiment;
        f("sentiment.alpha", &mut se.alpha);
        f("sentiment.w1", &mut se.w1.data);
        f("sentiment.b1", &mut se.b1);
        f("sentiment.w2", &mut se.w2.data);
        f("sentiment.b2", &mut se.b2);
        f("head.w", &mut self.head.w.data);
        f("head.b", &mut self.head.b);
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each(|n, _| out.push(n.to_string()));
        out
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, t| n += t.len());
        n
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        let mut src = Vec::new();
        other.for_each(|_, t| src.push(t.to_vec()));
        let mut i = 0;
        self.for_each_mut(|_, t| {
            for (a, b) in t.iter_mut().zip(&src[i]) {
                *a += scale * b;
            }
            i += 1;
        });
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Per-comment sentiment input: comment embedding and its matched knowledge.
#[derive(Debug, Clone, PartialEq)]
pub struct SentimentInput {
    pub comment: Vec<f64>,
    pub knowledge: Vec<f64>,
}

/// A sample with every parameter-independent quantity computed once.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub label: u8,
    pub text: FeatureSequence,
    pub audio: AudioTrack,
    pub aligned_video: FeatureSequence,
    pub aligned_face: FeatureSequence,
    /// Plan for embedded audio, which does not depend on parameters.
    pub audio_plan: Option<TransportPlan>,
    pub comment_indices: Vec<usize>,
    pub sentiment: Vec<SentimentInput>,
}

pub struct Resources<'a> {
    pub vocab: &'a Vocabulary,
    pub store: &'a SkgStore,
    pub embedder: &'a dyn Embedder,
}

fn align(src: &FeatureSequence, text: &FeatureSequence, rot: &RotConfig) -> Result<(TransportPlan, FeatureSequence)> {
    let plan = rot_solve(&cost_matrix(src, text)?, rot)?;
    let aligned = barycentric_project(&plan, src)?;
    Ok((plan, aligned))
}

pub fn prepare_sample(sample: &VideoSample, cfg: &ModelConfig, res: &Resources) -> Result<PreparedSample> {
    sample.validate()?;
    if sample.dim() != cfg.d {
        return Err(Error::DimMismatch(format!(
            "sample {} has dim {}, model expects {}",
            sample.id,
            sample.dim(),
            cfg.d
        )));
    }
    if let AudioTrack::Mfcc(m) = &sample.audio {
        if m.cols != cfg.n_mfcc {
            return Err(Error::DimMismatch(format!(
                "sample {} has {} MFCC coefficients, model expects {}",
                sample.id, m.cols, cfg.n_mfcc
            )));
        }
    }
    let (_, aligned_video) = align(&sample.video, &sample.text, &cfg.rot)?;
    let (_, aligned_face) = align(&sample.face, &sample.text, &cfg.rot)?;
    let audio_plan = match &sample.audio {
        AudioTrack::Embedded(a) => Some(align(a, &sample.text, &cfg.rot)?.0),
        AudioTrack::Mfcc(_) => None,
    };
    let comments = clean_comments(&sample.comments);
    let comment_indices = encode_comment_batch(&comments, res.vocab, &CharSegmenter, cfg.seq_len, cfg.max_comments);
    if res.embedder.dim() != cfg.sentiment_dim {
        return Err(Error::DimMismatch("embedder dim vs sentiment_dim".into()));
    }
    let sentiment = comments
        .iter()
        .take(cfg.max_comments)
        .map(|c| {
            let tokens = CharSegmenter::segment_str(&c.text);
            let emb = res.embedder.embed(&tokens.join(" "));
            let matches = if res.store.is_empty() {
                Vec::new()
            } else {
                match_embedding(&emb, res.store, &cfg.matching)
            };
            let knowledge = knowledge_vector(&matches, res.store, emb.len());
            SentimentInput { comment: emb, knowledge }
        })
        .collect();
    Ok(PreparedSample {
        id: sample.id.clone(),
        label: sample.label,
        text: sample.text.clone(),
        audio: sample.audio.clone(),
        aligned_video,
        aligned_face,
        audio_plan,
        comment_indices,
        sentiment,
    })
}

impl CharSegmenter {
    fn segment_str(text: &str) -> Vec<String> {
        use crate::comments::Segmenter;
        CharSegmenter.segment(text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub masks: BranchMasks,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult {
    pub probs: [f64; 2],
    pub focal: f64,
    pub mmd: f64,
    pub loss: f64,
}

pub const UNIFORM_SENTIMENT: [f64; 3] = [1.0 / 3.0; 3];

/// Forward pass returning only the decision probabilities.
pub fn predict(params: &ModelParams, cfg: &ModelConfig, s: &PreparedSample, masks: BranchMasks) -> Result<[f64; 2]> {
    let obj = Objective { masks, lambda: 0.0 };
    Ok(run(params, cfg, s, &obj, &FocalConfig::default(), false)?.0.probs)
}

/// Loss and parameter gradient for one sample.
pub fn loss_and_grad(
    params: &ModelParams,
    cfg: &ModelConfig,
    s: &PreparedSample,
    obj: &Objective,
    focal: &FocalConfig,
) -> Result<(SampleResult, ModelParams)> {
    let (r, g) = run(params, cfg, s, obj, focal, true)?;
    Ok((r, g.expect("gradient requested")))
}

fn run(
    params: &ModelParams,
    cfg: &ModelConfig,
    s: &PreparedSample,
    obj: &Objective,
    focal_cfg: &FocalConfig,
    want_grad: bool,
) -> Result<(SampleResult, Option<ModelParams>)> {
    let (audio_seq, audio_plan) = match (&s.audio, &s.audio_plan) {
        (AudioTrack::Embedded(a), Some(plan)) => (a.clone(), plan.clone()),
        (AudioTrack::Embedded(a), None) => {
            let (plan, _) = align(a, &s.text, &cfg.rot)?;
            (a.clone(), plan)
        }
        (AudioTrack::Mfcc(m), _) => {
            let lifted = lift_audio(m, &params.lift)?;
            let plan = rot_solve(&cost_matrix(&lifted, &s.text)?, &cfg.rot)?;
            (lifted, plan)
        }
    };
    let aligned_audio = barycentric_project(&audio_plan, &audio_seq)?;
    let mmd = total_mmd_loss_grad(&aligned_audio, &s.aligned_video, &s.aligned_face, &s.text, &cfg.mmd)?;

    let (z, c_cache) = concat_project_forward(&s.text, &aligned_audio, &s.aligned_video, &s.aligned_face, &params.fusion)?;
    let (gated, g_cache) = fsf_gate_forward(&z, &params.fusion)?;
    let (enc, ssm_cache) = ssm_encode_forward(&gated, &params.fusion.ssm)?;
    let video_vec = pool_video(&enc)?;

    let cnn = if obj.masks.comment {
        Some(textcnn_forward(&s.comment_indices, &params.textcnn)?)
    } else {
        None
    };
    let comment_probs = cnn.as_ref().map_or([0.5, 0.5], |(p, _)| *p);

    let mut sent_caches = Vec::new();
    let mut sentiment_probs = UNIFORM_SENTIMENT;
    if obj.masks.sentiment && !s.sentiment.is_empty() {
        let mut acc = [0.0; 3];
        for si in &s.sentiment {
            let (p, c) = sentiment_forward(&si.comment, &si.knowledge, &params.sentiment)?;
            for k in 0..3 {
                acc[k] += p[k];
            }
            sent_caches.push(c);
        }
        let n = s.sentiment.len() as f64;
        sentiment_probs = acc.map(|v| v / n);
    }

    let (probs, h_cache) = head_forward(&video_vec, &comment_probs, &sentiment_probs, &params.head, obj.masks)?;
    let focal = focal_loss(&probs, s.label, focal_cfg)?;
    let result = SampleResult {
        probs,
        focal,
        mmd: mmd.value,
        loss: total_loss(focal, mmd.value, obj.lambda),
    };
    if !result.loss.is_finite() {
        return Err(Error::NonFiniteIntermediate { stage: "loss", token: 0 });
    }
    if !want_grad {
        return Ok((result, None));
    }

    let mut grads = params.zeros_like();
    let dprobs = focal_loss_grad(&probs, s.label, focal_cfg)?;
    let hg = head_backward(&h_cache, &dprobs, &params.head, &mut grads.head);
    if let Some((_, cache)) = &cnn {
        textcnn_backward(cache, &hg.comment, &params.textcnn, &mut grads.textcnn);
    }
    if !sent_caches.is_empty() {
        let n = sent_caches.len() as f64;
        let per = hg.sentiment.map(|g| g / n);
        for c in &sent_caches {
            sentiment_backward(c, &per, &params.sentiment, &mut grads.sentiment);
        }
    }
    let denc = pool_video_backward(enc.rows, &hg.video);
    let dgated = ssm_encode_backward(&ssm_cache, &denc, &params.fusion.ssm, &mut grads.fusion.ssm);
    let dz = fsf_gate_backward(&g_cache, &dgated, &params.fusion, &mut grads.fusion);
    let [_, mut daudio, _, _] = concat_project_backward(&c_cache, &dz, &params.fusion, &mut grads.fusion);
    if let AudioTrack::Mfcc(m) = &s.audio {
        for (d, g) in daudio.data.iter_mut().zip(&mmd.audio.data) {
            *d += obj.lambda * g;
        }
        let dsrc = barycentric_backward(&audio_plan, &daudio);
        lift_audio_backward(m, &dsrc, &mut grads.lift);
    }
    Ok((result, Some(grads)))
}
