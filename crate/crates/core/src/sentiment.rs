//! Sentiment knowledge graph: a flat store of (attribute, sentiment word,
//! polarity) triples, cosine matching through a pluggable text embedder,
//! and a small head that mixes matched knowledge into the comment
//! embedding before scoring {negative, neutral, positive}.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{affine, affine_backward, dot, norm, softmax, softmax_backward, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Negative,
    Neutral,
    Positive,
}

impl std::fmt::Display for Polarity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Polarity::Negative => "negative",
            Polarity::Neutral => "neutral",
            Polarity::Positive => "positive",
        })
    }
}

impl FromStr for Polarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "negative" => Ok(Polarity::Negative),
            "neutral" => Ok(Polarity::Neutral),
            "positive" => Ok(Polarity::Positive),
            other => Err(Error::UnknownPolarity(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SentimentTriple {
    pub attribute: String,
    pub sentiment_word: String,
    pub polarity: Polarity,
}

impl SentimentTriple {
    pub fn new(attribute: &str, sentiment_word: &str, polarity: Polarity) -> Result<Self> {
        if attribute.is_empty() || sentiment_word.is_empty() {
            return Err(Error::Invariant("triple words must be non-empty".into()));
        }
        Ok(Self {
            attribute: attribute.to_string(),
            sentiment_word: sentiment_word.to_string(),
            polarity,
        })
    }

    pub fn text(&self) -> String {
        format!("{} {}", self.attribute, self.sentiment_word)
    }
}

/// Deterministic text embedder.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Signed feature hashing of character unigrams and bigrams (whitespace
/// removed), L2-normalized.
#[derive(Debug, Clone, Copy)]
pub struct HashingEmbedder {
    pub dim: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self { dim: 64 }
    }
}

fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Embedder for HashingEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let chars: Vec<char> = text.chars().filter(|c| !c.is_whitespace()).collect();
        let mut v = vec![0.0; self.dim];
        let mut buf = [0u8; 4];
        for n in 1..=2 {
            for gram in chars.windows(n) {
                let bytes: Vec<u8> = std::iter::once(n as u8)
                    .chain(gram.iter().flat_map(|c| c.encode_utf8(&mut buf).as_bytes().to_vec()))
                    .collect();
                let h = fnv1a(bytes);
                let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
                v[(h % self.dim as u64) as usize] += sign;
            }
        }
        let n = norm(&v);
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkgStore {
    pub triples: Vec<SentimentTriple>,
    pub embeddings: Vec<Vec<f64>>,
}

impl SkgStore {
    pub fn from_triples(triples: Vec<SentimentTriple>, embedder: &dyn Embedder) -> Self {
        let embeddings = triples.iter().map(|t| embedder.embed(&t.text())).collect();
        Self { triples, embeddings }
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Drops repeated triples, keeping the first occurrence.
    pub fn dedup(&self) -> Self {
        let mut seen = HashSet::new();
        let mut out = Self {
            triples: Vec::new(),
            embeddings: Vec::new(),
        };
        for (t, e) in self.triples.iter().zip(&self.embeddings) {
            if seen.insert(t.clone()) {
                out.triples.push(t.clone());
                out.embeddings.push(e.clone());
            }
        }
        out
    }
}

/// Parses `attribute<TAB>sentiment_word<TAB>polarity` rows.
pub fn parse_skg(text: &str, path: &Path) -> Result<Vec<SentimentTriple>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        let malformed = |msg: String| Error::MalformedLine {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        if cols.len() != 3 {
            return Err(malformed(format!("expected 3 tab-separated columns, found {}", cols.len())));
        }
        let polarity: Polarity = cols[2].parse()?;
        out.push(SentimentTriple::new(cols[0], cols[1], polarity).map_err(|e| malformed(e.to_string()))?);
    }
    Ok(out)
}

pub fn load_skg(path: impl AsRef<Path>, embedder: &dyn Embedder) -> Result<SkgStore> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(SkgStore::from_triples(parse_skg(&text, path)?, embedder))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripleMatch {
    pub index: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    pub top_k: usize,
    pub threshold: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            top_k: 3,
            threshold: 0.35,
        }
    }
}

/// Triples whose cosine similarity with `comment_embedding` reaches the
/// threshold, best first (store order on ties), at most `top_k`.
pub fn match_embedding(comment_embedding: &[f64], store: &SkgStore, cfg: &MatchConfig) -> Vec<TripleMatch> {
    let mut hits: Vec<TripleMatch> = store
        .embeddings
        .iter()
        .enumerate()
        .map(|(index, e)| TripleMatch {
            index,
            similarity: cosine(comment_embedding, e),
        })
        .filter(|m| m.similarity >= cfg.threshold)
        .collect();
    hits.sort_by(|a, b| b.similarity.total_cmp(&a.similarity));
    hits.truncate(cfg.top_k);
    hits
}

pub fn match_triples(
    comment_tokens: &[String],
    store: &SkgStore,
    embedder: &dyn Embedder,
    cfg: &MatchConfig,
) -> Result<Vec<TripleMatch>> {
    if store.is_empty() {
        return Err(Error::InvalidArgument("sentiment store is empty".into()));
    }
    Ok(match_embedding(&embedder.embed(&comment_tokens.join(" ")), store, cfg))
}

/// Similarity-weighted mean of matched triple embeddings; zero when nothing
/// matched.
pub fn knowledge_vector(matches: &[TripleMatch], store: &SkgStore, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    let total: f64 = matches.iter().map(|m| m.similarity).sum();
    if matches.is_empty() || total.abs() < 1e-12 {
        return v;
    }
    for m in matches {
        for (o, e) in v.iter_mut().zip(&store.embeddings[m.index]) {
            *o += m.similarity * e;
        }
    }
    v.iter_mut().for_each(|x| *x /= total);
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentimentHeadParams {
    /// Single entry: knowledge mixing weight in [0, 1].
    pub alpha: Vec<f64>,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl SentimentHeadParams {
    pub fn zeros(e_s: usize, hidden: usize) -> Self {
        Self {
            alpha: vec![0.0],
            w1: Matrix::zeros(e_s, hidden),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(hidden, 3),
            b2: vec![0.0; 3],
        }
    }
}

/// `(1 - α)·comment + α·knowledge`.
pub fn enhance(comment_embedding: &[f64], knowledge: &[f64], alpha: f64) -> Vec<f64> {
    comment_embedding
        .iter()
        .zip(knowledge)
        .map(|(c, k)| (1.0 - alpha) * c + alpha * k)
        .collect()
}

pub struct SentimentCache {
    comment: Vec<f64>,
    knowledge: Vec<f64>,
    enhanced: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    probs: Vec<f64>,
}

pub fn integrate_and_score(
    comment_embedding: &[f64],
    matches: &[TripleMatch],
    store: &SkgStore,
    params: &SentimentHeadParams,
) -> Result<[f64; 3]> {
    let knowledge = knowledge_vector(matches, store, comment_embedding.len());
    sentiment_forward(comment_embedding, &knowledge, params).map(|(p, _)| p)
}

pub fn sentiment_forward(
    comment_embedding: &[f64],
    knowledge: &[f64],
    params: &SentimentHeadParams,
) -> Result<([f64; 3], SentimentCache)> {
    let e = params.w1.rows;
    if comment_embedding.len() != e || knowledge.len() != e {
        return Err(Error::DimMismatch(format!(
            "sentiment head expects {e}-dim embeddings, got {} and {}",
            comment_embedding.len(),
            knowledge.len()
        )));
    }
    let enhanced = enhance(comment_embedding, knowledge, params.alpha[0]);
    let hidden_pre = affine(&enhanced, &params.w1, &params.b1);
    let hidden: Vec<f64> = hidden_pre.iter().map(|v| v.max(0.0)).collect();
    let probs = softmax(&affine(&hidden, &params.w2, &params.b2));
    Ok((
        [probs[0], probs[1], probs[2]],
        SentimentCache {
            comment: comment_embedding.to_vec(),
            knowledge: knowledge.to_vec(),
            enhanced,
            hidden_pre,
            hidden,
            probs,
        },
    ))
}

pub fn sentiment_backward(cache: &SentimentCache, dprobs: &[f64], params: &SentimentHeadParams, grads: &mut SentimentHeadParams) {
    let dlogits = softmax_backward(&cache.probs, dprobs);
    let dhidden = affine_backward(&cache.hidden, &params.w2, &dlogits, &mut grads.w2, &mut grads.b2);
    let dpre: Vec<f64> = dhidden
        .iter()
        .zip(&cache.hidden_pre)
        .map(|(g, p)| if *p > 0.0 { *g } else { 0.0 })
        .collect();
    let denh = affine_backward(&cache.enhanced, &params.w1, &dpre, &mut grads.w1, &mut grads.b1);
    grads.alpha[0] += denh
        .iter()
        .zip(cache.knowledge.iter().zip(&cache.comment))
        .map(|(g, (k, c))| g * (k - c))
        .sum::<f64>();
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store(rows: &[(&str, &str, Polarity)]) -> SkgStore {
        let triples = rows.iter().map(|(a, s, p)| SentimentTriple::new(a, s, *p).unwrap()).collect();
        SkgStore::from_triples(triples, &HashingEmbedder::default())
    }

    #[test]
    fn loads_tsv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("skg.tsv");
        fs::write(&p, "孩子\t可怜\tnegative\n").unwrap();
        let s = load_skg(&p, &HashingEmbedder::default()).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.triples[0].polarity, Polarity::Negative);

        fs::write(&p, "孩子\tnegative\n").unwrap();
        assert!(matches!(load_skg(&p, &HashingEmbedder::default()), Err(Error::MalformedLine { line: 1, .. })));
        fs::write(&p, "a\tb\tangry\n").unwrap();
        assert!(matches!(load_skg(&p, &HashingEmbedder::default()), Err(Error::UnknownPolarity(_))));

        let rows: String = (0..1000).map(|i| format!("属性{i}\t词{i}\tneutral\n")).collect();
        fs::write(&p, rows).unwrap();
        let s = load_skg(&p, &HashingEmbedder::default()).unwrap();
        assert_eq!(s.embeddings.len(), 1000);
        assert_eq!(s.triples[999].attribute, "属性999");
    }

    #[test]
    fn hashing_embedder_is_deterministic_and_unit() {
        let e = HashingEmbedder::default();
        let a = e.embed("老人 真可怜");
        assert_eq!(a, e.embed("老人 真可怜"));
        assert_eq!(a, e.embed("老人真可怜"));
        assert!((norm(&a) - 1.0).abs() < 1e-12);
        assert_eq!(e.embed(""), vec![0.0; 64]);
    }

    #[test]
    fn identical_text_matches_first() {
        let s = store(&[("老人", "辛苦", Polarity::Neutral), ("孩子", "可怜", Polarity::Negative)]);
        let tokens: Vec<String> = ["孩", "子", "可", "怜"].iter().map(|t| t.to_string()).collect();
        let m = match_triples(&tokens, &s, &HashingEmbedder::default(), &MatchConfig::default()).unwrap();
        assert_eq!(m[0].index, 1);
        assert!((m[0].similarity - 1.0).abs() < 1e-9);

        let strict = MatchConfig { threshold: 1.1, ..Default::default() };
        assert!(match_triples(&tokens, &s, &HashingEmbedder::default(), &strict).unwrap().is_empty());
        let empty = store(&[]);
        assert!(match_triples(&tokens, &empty, &HashingEmbedder::default(), &strict).is_err());
    }

    #[test]
    fn top_k_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let words = ["好", "坏", "人", "心", "善", "弱", "帮", "助", "可", "怜"];
        let mut pick = || -> String { (0..2).map(|_| words[rng.random_range(0..words.len())]).collect() };
        let rows: Vec<(String, String)> = (0..10).map(|_| (pick(), pick())).collect();
        let triples: Vec<_> = rows.iter().map(|(a, b)| SentimentTriple::new(a, b, Polarity::Neutral).unwrap()).collect();
        let emb = HashingEmbedder::default();
        let s = SkgStore::from_triples(triples, &emb);
        let cfg = MatchConfig { top_k: 3, threshold: -1.0 };
        for _ in 0..20 {
            let q = pick() + &pick();
            let tokens: Vec<String> = q.chars().map(|c| c.to_string()).collect();
            let got = match_triples(&tokens, &s, &emb, &cfg).unwrap();
            let qe = emb.embed(&q);
            let mut all: Vec<(usize, f64)> = (0..10)
                .map(|i| {
                    let e = emb.embed(&s.triples[i].text());
                    let sim: f64 = qe.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>() / (norm(&qe) * norm(&e));
                    (i, sim)
                })
                .collect();
            // Stable sort keeps store order among ties.
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            let want: Vec<usize> = all.iter().take(3).map(|x| x.0).collect();
            assert_eq!(got.iter().map(|m| m.index).collect::<Vec<_>>(), want);
        }
    }

    #[test]
    fn dedup_preserves_matches() {
        let s = store(&[("老人", "辛苦", Polarity::Neutral), ("孩子", "可怜", Polarity::Negative), ("残疾人", "加油", Polarity::Positive)]);
        let mut doubled = s.clone();
        doubled.triples.extend(s.triples.clone());
        doubled.embeddings.extend(s.embeddings.clone());
        let emb = HashingEmbedder::default();
        let cfg = MatchConfig { top_k: 3, threshold: 0.0 };
        let q = emb.embed("孩子真可怜加油");
        let a: Vec<usize> = match_embedding(&q, &s, &cfg).iter().map(|m| m.index).collect();
        let b: Vec<usize> = match_embedding(&q, &doubled.dedup(), &cfg).iter().map(|m| m.index).collect();
        assert_eq!(a, b);
        assert_eq!(doubled.dedup(), s);
    }

    fn random_head(rng: &mut ChaCha8Rng, e: usize, h: usize) -> SentimentHeadParams {
        let mut p = SentimentHeadParams::zeros(e, h);
        p.alpha = vec![rng.random_range(0.1..0.9)];
        p.w1.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        p.b1.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        p.w2.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        p.b2.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        p
    }

    #[test]
    fn integration_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let emb = HashingEmbedder::default();
        let s = store(&[("孩子", "可怜", Polarity::Negative)]);
        let c = emb.embed("今天天气好");
        let k0 = knowledge_vector(&[], &s, 64);
        let e = enhance(&c, &k0, 0.3);
        for (a, b) in e.iter().zip(&c) {
            assert!((a - 0.7 * b).abs() < 1e-15);
        }
        let m = [TripleMatch { index: 0, similarity: 0.6 }];
        assert_eq!(knowledge_vector(&m, &s, 64), s.embeddings[0]);
        assert_eq!(enhance(&c, &s.embeddings[0], 0.0), c);

        let p = random_head(&mut rng, 64, 8);
        let got = integrate_and_score(&c, &m, &s, &p).unwrap();
        let a = p.alpha[0];
        let enh: Vec<f64> = c.iter().zip(&s.embeddings[0]).map(|(x, y)| (1.0 - a) * x + a * y).collect();
        let hid: Vec<f64> = (0..8)
            .map(|j| (p.b1[j] + (0..64).map(|i| enh[i] * p.w1.get(i, j)).sum::<f64>()).max(0.0))
            .collect();
        let logits: Vec<f64> = (0..3).map(|k| p.b2[k] + (0..8).map(|j| hid[j] * p.w2.get(j, k)).sum::<f64>()).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for k in 0..3 {
            assert!((got[k] - logits[k].exp() / z).abs() < 1e-10);
        }
        assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(integrate_and_score(&c[..10], &m, &s, &p).is_err());
    }

    #[test]
    fn enhancement_is_affine_in_alpha() {
        let emb = HashingEmbedder::default();
        let c = emb.embed("加油");
        let k = emb.embed("可怜");
        let e0 = enhance(&c, &k, 0.0);
        let e1 = enhance(&c, &k, 1.0);
        for a in [0.1, 0.35, 0.8] {
            let e = enhance(&c, &k, a);
            for i in 0..64 {
                assert!((e[i] - ((1.0 - a) * e0[i] + a * e1[i])).abs() < 1e-15);
            }
        }
    }
}
