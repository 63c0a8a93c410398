//! Seeded synthetic corpus: two classes with shifted feature means,
//! class-dependent comment vocabulary and a matching knowledge store.

use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::{compute_mfcc, quantize_pcm16, write_wav, MfccConfig};
use crate::error::{Error, Result};
use crate::ingest::{write_comments, write_feature_file, AudioTrack, CommentRecord, FeatureSequence, Modality, VideoSample};
use crate::linalg::{norm, Matrix};
use crate::model::ModelConfig;
use crate::training::TrainConfig;
use crate::sentiment::{Polarity, SentimentTriple};

const PCL_PHRASES: [&str; 10] = [
    "真可怜", "好可怜的孩子", "弱者就该被帮助", "施舍一点吧", "要懂得感恩",
    "太惨了吧", "他们真不容易", "可怜的人啊", "应该同情他们", "给点施舍",
];
const PLAIN_PHRASES: [&str; 10] = [
    "太厉害了", "非常优秀", "真棒", "加油", "喜欢这个视频",
    "很有才华", "支持你", "做得好", "努力的人最美", "值得学习",
];
const FILLER: [&str; 5] = ["哈哈", "来了", "第一", "看完了", "路过"];
const NOISE: [&str; 4] = ["😂😂😂", "👍", "？？？", "..."];

const TRIPLES: [(&str, &str, Polarity); 10] = [
    ("孩子", "可怜", Polarity::Negative),
    ("人", "可怜", Polarity::Negative),
    ("他们", "不容易", Polarity::Negative),
    ("弱者", "帮助", Polarity::Negative),
    ("施舍", "一点", Polarity::Negative),
    ("视频", "喜欢", Polarity::Positive),
    ("表现", "厉害", Polarity::Positive),
    ("才华", "很有", Polarity::Positive),
    ("表现", "优秀", Polarity::Positive),
    ("努力", "最美", Polarity::Positive),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_samples: usize,
    pub positive_fraction: f64,
    pub d: usize,
    pub sample_rate: u32,
    /// Mean offset of feature tokens along the class direction.
    pub shift: f64,
    /// Probability that a first-level comment uses its class phrases rather
    /// than neutral filler.
    pub comment_purity: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_samples: 200,
            positive_fraction: 0.4,
            d: 16,
            sample_rate: 16_000,
            shift: 0.25,
            comment_purity: 0.9,
            seed: 2024,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub samples: Vec<VideoSample>,
    pub triples: Vec<SentimentTriple>,
    /// Raw waveforms, already at 16-bit resolution, indexed like `samples`.
    pub waves: Vec<Vec<f64>>,
    /// Comment files including replies and noise, as written to disk.
    pub raw_comments: Vec<Vec<CommentRecord>>,
}

fn unit_vector(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

fn tokens(n: usize, dir: &[f64], offset: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let d = dir.len();
    let data = (0..n * d)
        .map(|i| {
            let noise: f64 = StandardNormal.sample(rng);
            (offset * dir[i % d] + noise) as f32 as f64
        })
        .collect();
    Matrix::from_vec(n, d, data).expect("shape")
}

fn comment(own: &[&str], purity: f64, rng: &mut ChaCha8Rng) -> String {
    if !rng.random_bool(purity) {
        return FILLER.choose(rng).unwrap().to_string();
    }
    let mut text = own.choose(rng).unwrap().to_string();
    if rng.random_bool(0.3) {
        text += FILLER.choose(rng).unwrap();
    }
    text
}

pub fn mfcc_config(cfg: &SyntheticConfig, n_mfcc: usize) -> MfccConfig {
    MfccConfig {
        sample_rate: cfg.sample_rate as f64,
        n_mfcc,
        ..MfccConfig::default()
    }
}

pub fn generate(cfg: &SyntheticConfig, n_mfcc: usize) -> Result<SyntheticCorpus> {
    if cfg.n_samples < 2 || !(0.0..1.0).contains(&cfg.positive_fraction) || cfg.d == 0 {
        return Err(Error::InvalidArgument("invalid synthetic corpus settings".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_pos = (cfg.n_samples as f64 * cfg.positive_fraction).round() as usize;
    let mut labels: Vec<u8> = (0..cfg.n_samples).map(|i| u8::from(i < n_pos)).collect();
    labels.shuffle(&mut rng);
    let dirs: Vec<Vec<f64>> = (0..4).map(|_| unit_vector(cfg.d, &mut rng)).collect();
    let mfcc_cfg = mfcc_config(cfg, n_mfcc);

    let mut corpus = SyntheticCorpus {
        samples: Vec::with_capacity(cfg.n_samples),
        triples: TRIPLES
            .iter()
            .map(|(a, s, p)| SentimentTriple::new(a, s, *p))
            .collect::<Result<_>>()?,
        waves: Vec::new(),
        raw_comments: Vec::new(),
    };
    for (i, &label) in labels.iter().enumerate() {
        let sign = if label == 1 { 1.0 } else { -1.0 };
        let off = sign * cfg.shift;
        let n_frames = rng.random_range(4..=8);
        let video = tokens(n_frames, &dirs[0], off, &mut rng);
        let mut face = tokens(n_frames, &dirs[1], off, &mut rng);
        for r in 0..n_frames {
            if rng.random_bool(0.25) {
                face.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let text = tokens(rng.random_range(5..=10), &dirs[2], off, &mut rng);

        // A short tone whose pitch leans on the label, plus noise.
        let len = rng.random_range(1200..=2400);
        let base = if label == 1 { 220.0 } else { 330.0 };
        let freq = base * (1.0 + 0.4 * rng.random_range(-1.0..1.0));
        let amp = rng.random_range(0.1..0.5);
        let wave: Vec<f64> = (0..len)
            .map(|t| {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let ph = 2.0 * std::f64::consts::PI * freq * t as f64 / cfg.sample_rate as f64;
                quantize_pcm16(amp * ph.sin() + 0.05 * noise)
            })
            .collect();
        let mfcc = compute_mfcc(&wave, &mfcc_cfg)?;

        let (own, other): (&[&str], &[&str]) =
            if label == 1 { (&PCL_PHRASES, &PLAIN_PHRASES) } else { (&PLAIN_PHRASES, &PCL_PHRASES) };
        let mut first = Vec::new();
        for _ in 0..rng.random_range(4..=8) {
            first.push(CommentRecord::first_level(comment(own, cfg.comment_purity, &mut rng)));
        }
        let mut raw = first.clone();
        if rng.random_bool(0.3) {
            raw.push(first[0].clone());
        }
        if rng.random_bool(0.3) {
            raw.push(CommentRecord::first_level(*NOISE.choose(&mut rng).unwrap()));
        }
        // Replies carry the opposite class vocabulary; only first-level text counts.
        raw.push(CommentRecord { text: comment(other, 1.0, &mut rng), level: 2 });
        let comments: Vec<CommentRecord> = raw.iter().filter(|c| c.level == 1).cloned().collect();

        let sample = VideoSample {
            id: format!("syn{i:04}"),
            label,
            video: FeatureSequence::new(Modality::Video, video)?,
            face: FeatureSequence::new(Modality::Face, face)?,
            audio: AudioTrack::Mfcc(mfcc),
            text: FeatureSequence::new(Modality::Text, text)?,
            comments,
        };
        sample.validate()?;
        corpus.samples.push(sample);
        corpus.waves.push(wave);
        corpus.raw_comments.push(raw);
    }
    Ok(corpus)
}

/// Writes feature files, WAVs, comment files, `manifest.jsonl` and `skg.tsv`
/// under `dir`.
pub fn write_corpus(corpus: &SyntheticCorpus, dir: impl AsRef<Path>, sample_rate: u32) -> Result<()> {
    let dir = dir.as_ref();
    let io = |p: &Path, e| Error::io(p, e);
    fs::create_dir_all(dir.join("samples")).map_err(|e| io(dir, e))?;
    let mut manifest = String::new();
    for ((s, wave), raw) in corpus.samples.iter().zip(&corpus.waves).zip(&corpus.raw_comments) {
        let rel = |name: &str| format!("samples/{}.{name}", s.id);
        write_feature_file(&s.video, dir.join(rel("video.bin")))?;
        write_feature_file(&s.face, dir.join(rel("face.bin")))?;
        write_feature_file(&s.text, dir.join(rel("text.bin")))?;
        write_wav(dir.join(rel("wav")), wave, sample_rate)?;
        write_comments(dir.join(rel("comments.jsonl")), raw)?;
        manifest += &serde_json::to_string(&serde_json::json!({
            "id": s.id,
            "label": s.label,
            "video_feat": rel("video.bin"),
            "face_feat": rel("face.bin"),
            "audio_feat_or_wav": rel("wav"),
            "text_feat": rel("text.bin"),
            "comments_file": rel("comments.jsonl"),
        }))?;
        manifest.push('\n');
    }
    let mpath = dir.join("manifest.jsonl");
    fs::write(&mpath, manifest).map_err(|e| io(&mpath, e))?;
    let skg: String = corpus
        .triples
        .iter()
        .map(|t| format!("{}\t{}\t{}\n", t.attribute, t.sentiment_word, t.polarity))
        .collect();
    let spath = dir.join("skg.tsv");
    fs::write(&spath, skg).map_err(|e| io(&spath, e))
}

/// Model sized for the synthetic corpus.
pub fn model_config(cfg: &SyntheticConfig) -> ModelConfig {
    ModelConfig {
        d: cfg.d,
        n_mfcc: 8,
        d_model: 16,
        d_gate: 8,
        d_state: 4,
        emb_dim: 16,
        filter_widths: vec![2, 3, 4],
        n_filters: 8,
        seq_len: 64,
        max_comments: 8,
        sentiment_dim: 64,
        sentiment_hidden: 16,
        ..ModelConfig::default()
    }
}

/// Schedule for the synthetic corpus: shorter and with a larger peak rate
/// than the defaults, keeping the epochs-to-`t_max` ratio.
pub fn train_config() -> TrainConfig {
    TrainConfig {
        epochs: 40,
        t_max: 20,
        eta_max: 1e-2,
        ..TrainConfig::default()
    }
}
