//! Comment cleaning, character-level segmentation, vocabulary, per-video
//! index encoding, and the TextCNN comment scorer.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::ingest::CommentRecord;
use crate::linalg::{affine, affine_backward, softmax, softmax_backward, Matrix};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

static EMOJI_ONLY: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"^[\p{So}\p{Sk}\p{Extended_Pictographic}\p{Emoji_Presentation}\p{Emoji_Modifier}\p{Regional_Indicator}\u{200D}\u{FE0F}\u{20E3}\s]+$",
    )
    .unwrap()
});
static HAS_LETTER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\p{L}").unwrap());

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanReport {
    pub input: usize,
    pub kept: usize,
    pub dropped_dup: usize,
    pub dropped_emoji: usize,
    pub dropped_meaningless: usize,
    pub dropped_level: usize,
}

pub fn clean_comments(raw: &[CommentRecord]) -> Vec<CommentRecord> {
    clean_comments_with_report(raw).0
}

/// Order-preserving cleaning: NFKC + trim, exact dedup (first kept),
/// emoji/symbol-only removal, removal of comments without any letter, and
/// finally only first-level comments are kept.
pub fn clean_comments_with_report(raw: &[CommentRecord]) -> (Vec<CommentRecord>, CleanReport) {
    let mut report = CleanReport {
        input: raw.len(),
        ..Default::default()
    };
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for c in raw {
        let text: String = c.text.nfkc().collect::<String>().trim().to_string();
        if !seen.insert(text.clone()) {
            report.dropped_dup += 1;
            continue;
        }
        if !text.is_empty() && EMOJI_ONLY.is_match(&text) {
            report.dropped_emoji += 1;
            continue;
        }
        if !HAS_LETTER.is_match(&text) {
            report.dropped_meaningless += 1;
            continue;
        }
        if c.level != 1 {
            report.dropped_level += 1;
            continue;
        }
        out.push(CommentRecord { text, level: c.level });
    }
    report.kept = out.len();
    (out, report)
}

pub trait Segmenter: Send + Sync {
    fn segment(&self, text: &str) -> Vec<String>;
}

/// One token per character, except that runs of ASCII letters/digits stay
/// whole. Whitespace separates tokens and is dropped.
#[derive(Debug, Clone, Copy, Default)]
pub struct CharSegmenter;

impl Segmenter for CharSegmenter {
    fn segment(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut run = String::new();
        for ch in text.chars() {
            if ch.is_ascii_alphanumeric() {
                run.push(ch);
                continue;
            }
            if !run.is_empty() {
                out.push(std::mem::take(&mut run));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
        if !run.is_empty() {
            out.push(run);
        }
        out
    }
}

pub fn segment(text: &str) -> Result<Vec<String>> {
    if text.is_empty() {
        return Err(Error::InvalidArgument("cannot segment an empty string".into()));
    }
    Ok(CharSegmenter.segment(text))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn encode(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(Error::MalformedLine {
                path: path.to_path_buf(),
                line: 1,
                msg: format!("vocabulary must start with {PAD_TOKEN} and {UNK_TOKEN}"),
            });
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// Tokens with frequency ≥ `min_freq`, ranked by frequency then
/// lexicographically, after the reserved PAD and UNK entries.
pub fn build_vocab(corpus: &[Vec<String>], min_freq: usize, max_size: usize) -> Result<Vocabulary> {
    if max_size < 2 {
        return Err(Error::InvalidArgument("vocabulary max_size must be >= 2".into()));
    }
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for doc in corpus {
        for t in doc {
            if t != PAD_TOKEN && t != UNK_TOKEN {
                *freq.entry(t.as_str()).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, usize)> = freq.into_iter().filter(|(_, f)| *f >= min_freq).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
    tokens.extend(ranked.into_iter().take(max_size - 2).map(|(t, _)| t.to_string()));
    Ok(Vocabulary::from_tokens(tokens))
}

/// Concatenates the tokens of up to `max_comments` comments, separated by
/// PAD, then truncates or right-pads with PAD to exactly `len` indices.
pub fn encode_comment_batch(
    comments: &[CommentRecord],
    vocab: &Vocabulary,
    segmenter: &dyn Segmenter,
    len: usize,
    max_comments: usize,
) -> Vec<usize> {
    let mut out = Vec::with_capacity(len);
    for (k, c) in comments.iter().take(max_comments).enumerate() {
        if out.len() >= len {
            break;
        }
        if k > 0 {
            out.push(PAD);
        }
        out.extend(segmenter.segment(&c.text).iter().map(|t| vocab.encode(t)));
    }
    out.resize(len, PAD);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvFilter {
    pub width: usize,
    /// `(width · e) × n_filters`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextCnnParams {
    /// `|V| × e`; row `PAD` is held at zero.
    pub embedding: Matrix,
    pub convs: Vec<ConvFilter>,
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
}

impl TextCnnParams {
    pub fn zeros(vocab: usize, emb: usize, widths: &[usize], n_filters: usize) -> Self {
        Self {
            embedding: Matrix::zeros(vocab, emb),
            convs: widths
                .iter()
                .map(|&w| ConvFilter {
                    width: w,
                    weight: Matrix::zeros(w * emb, n_filters),
                    bias: vec![0.0; n_filters],
                })
                .collect(),
            head_w: Matrix::zeros(widths.len() * n_filters, 2),
            head_b: vec![0.0; 2],
        }
    }

    pub fn max_width(&self) -> usize {
        self.convs.iter().map(|c| c.width).max().unwrap_or(0)
    }

    fn n_features(&self) -> usize {
        self.convs.iter().map(|c| c.bias.len()).sum()
    }
}

pub struct TextCnnCache {
    indices: Vec<usize>,
    /// Per filter bank: (argmax window start, pre-activation max) per filter.
    peaks: Vec<Vec<(usize, f64)>>,
    features: Vec<f64>,
    probs: Vec<f64>,
}

/// `(P(non-PCL), P(PCL))` for one encoded comment sequence.
pub fn textcnn_score(indices: &[usize], params: &TextCnnParams) -> Result<[f64; 2]> {
    let (_, cache) = textcnn_forward(indices, params)?;
    Ok([cache.probs[0], cache.probs[1]])
}

pub fn textcnn_forward(indices: &[usize], params: &TextCnnParams) -> Result<([f64; 2], TextCnnCache)> {
    let vocab = params.embedding.rows;
    if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
        return Err(Error::IndexOutOfRange { index: bad, size: vocab });
    }
    let l = indices.len();
    if params.convs.is_empty() || params.max_width() > l {
        return Err(Error::InvalidArgument(format!(
            "sequence length {l} shorter than filter width {}",
            params.max_width()
        )));
    }
    if params.head_w.rows != params.n_features() {
        return Err(Error::DimMismatch("textcnn head width".into()));
    }
    let e = params.embedding.cols;
    let mut features = Vec::with_capacity(params.n_features());
    let mut peaks = Vec::with_capacity(params.convs.len());
    let mut window = Vec::new();
    for conv in &params.convs {
        let nf = conv.bias.len();
        let mut best = vec![(0usize, f64::NEG_INFINITY); nf];
        for t in 0..=l - conv.width {
            window.clear();
            for &idx in &indices[t..t + conv.width] {
                window.extend_from_slice(params.embedding.row(idx));
            }
            debug_assert_eq!(window.len(), conv.width * e);
            let s = affine(&window, &conv.weight, &conv.bias);
            for (b, v) in best.iter_mut().zip(s) {
                if v > b.1 {
                    *b = (t, v);
                }
            }
        }
        features.extend(best.iter().map(|(_, v)| v.max(0.0)));
        peaks.push(best);
    }
    let logits = affine(&features, &params.head_w, &params.head_b);
    let probs = softmax(&logits);
    Ok((
        [probs[0], probs[1]],
        TextCnnCache {
            indices: indices.to_vec(),
            peaks,
            features,
            probs,
        },
    ))
}

/// Accumulates parameter gradients given dL/dprobs.
pub fn textcnn_backward(cache: &TextCnnCache, dprobs: &[f64; 2], params: &TextCnnParams, grads: &mut TextCnnParams) {
    let dlogits = softmax_backward(&cache.probs, dprobs);
    let dfeat = affine_backward(&cache.features, &params.head_w, &dlogits, &mut grads.head_w, &mut grads.head_b);
    let e = params.embedding.cols;
    let mut offset = 0;
    for (k, conv) in params.convs.iter().enumerate() {
        let gconv = &mut grads.convs[k];
        for (f, &(t, pre)) in cache.peaks[k].iter().enumerate() {
            let g = dfeat[offset + f];
            if pre <= 0.0 || g == 0.0 {
                continue;
            }
            gconv.bias[f] += g;
            for (p, &idx) in cache.indices[t..t + conv.width].iter().enumerate() {
                for c in 0..e {
                    let row = p * e + c;
                    gconv.weight.data[row * gconv.weight.cols + f] += params.embedding.get(idx, c) * g;
                    if idx != PAD {
                        grads.embedding.data[idx * e + c] += conv.weight.get(row, f) * g;
                    }
                }
            }
        }
        offset += conv.bias.len();
    }
}
