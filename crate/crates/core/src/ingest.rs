//! Dataset ingestion: the binary per-modality feature file, face-track
//! assembly, and the JSON-Lines manifest.
//!
//! Feature file layout (little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "CPCL" (43 50 43 4C)
//! 4       1     version (1)
//! 5       1     modality code (0 video, 1 face, 2 audio, 3 text)
//! 6       2     reserved, 0
//! 8       4     row count n
//! 12      4     dim d
//! 16      4nd   binary32 values, row-major
//! ```

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{self, MfccConfig};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAGIC: [u8; 4] = *b"CPCL";
pub const FORMAT_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Video,
    Face,
    Audio,
    Text,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::Video => 0,
            Modality::Face => 1,
            Modality::Audio => 2,
            Modality::Text => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => Modality::Video,
            1 => Modality::Face,
            2 => Modality::Audio,
            3 => Modality::Text,
            other => return Err(Error::UnknownModality(other)),
        })
    }
}

/// A variable-length sequence of `dim`-dimensional embeddings for one
/// modality of one video. Rows of `tokens` are the token vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub modality: Modality,
    pub tokens: Matrix,
}

impl FeatureSequence {
    pub fn new(modality: Modality, tokens: Matrix) -> Result<Self> {
        let seq = Self { modality, tokens };
        seq.validate()?;
        Ok(seq)
    }

    pub fn from_rows(modality: Modality, rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(modality, Matrix::from_rows(rows)?)
    }

    pub fn zeros(modality: Modality, n: usize, dim: usize) -> Self {
        Self {
            modality,
            tokens: Matrix::zeros(n, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols
    }

    pub fn len(&self) -> usize {
        self.tokens.rows
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows == 0
    }

    pub fn token(&self, i: usize) -> &[f64] {
        self.tokens.row(i)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim() == 0 {
            return Err(Error::Invariant("feature dim must be positive".into()));
        }
        if self.is_empty() && self.modality != Modality::Face {
            return Err(Error::Invariant(format!(
                "{:?} sequence must have at least one token",
                self.modality
            )));
        }
        for r in 0..self.len() {
            if let Some(c) = self.token(r).iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row: r, col: c });
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let n = u32::try_from(self.len())
            .map_err(|_| Error::Invariant("row count exceeds 2^32-1".into()))?;
        let d = u32::try_from(self.dim())
            .map_err(|_| Error::Invariant("dim exceeds 2^32-1".into()))?;
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.tokens.data.len());
        out.extend_from_slice(&MAGIC);
        out.push(FORMAT_VERSION);
        out.push(self.modality.code());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&n.to_le_bytes());
        out.extend_from_slice(&d.to_le_bytes());
        for &v in &self.tokens.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            // A short file that does not even carry the magic is reported as
            // such; otherwise it is a truncated header.
            if bytes.len() < 4 || bytes[..4] != MAGIC {
                let mut m = [0u8; 4];
                m[..bytes.len().min(4)].copy_from_slice(&bytes[..bytes.len().min(4)]);
                return Err(Error::BadMagic(m));
            }
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        if bytes[4] != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(bytes[4]));
        }
        let modality = Modality::from_code(bytes[5])?;
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let expected = HEADER_LEN + 4 * n * d;
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::Invariant(format!(
                "{} trailing bytes after payload",
                bytes.len() - expected
            )));
        }
        let data: Vec<f64> = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: i / d,
                col: i % d,
            });
        }
        Self::new(modality, Matrix::from_vec(n, d, data)?)
    }

    /// Narrows every value to binary32 and back, as a write/read cycle would.
    pub fn narrowed(&self) -> Self {
        let mut s = self.clone();
        for v in &mut s.tokens.data {
            *v = *v as f32 as f64;
        }
        s
    }
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureSequence::from_bytes(&bytes)
}

pub fn write_feature_file(seq: &FeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = seq.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Builds a per-frame face track: frames with a detection carry that
/// vector, every other frame is the all-zero vector.
pub fn assemble_face_track(
    frames: usize,
    dim: usize,
    detections: &[(usize, Vec<f64>)],
) -> Result<FeatureSequence> {
    let mut tokens = Matrix::zeros(frames, dim);
    let mut seen = vec![false; frames];
    for (index, v) in detections {
        let index = *index;
        if index >= frames {
            return Err(Error::FrameOutOfRange { index, frames });
        }
        if seen[index] {
            return Err(Error::DuplicateFrame(index));
        }
        if v.len() != dim {
            return Err(Error::DimMismatch(format!(
                "face vector for frame {index} has {} entries, expected {dim}",
                v.len()
            )));
        }
        seen[index] = true;
        tokens.row_mut(index).copy_from_slice(v);
    }
    FeatureSequence::new(Modality::Face, tokens)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommentRecord {
    pub text: String,
    pub level: u32,
}

impl CommentRecord {
    pub fn first_level(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            level: 1,
        }
    }
}

/// Audio either arrives as precomputed `d`-dimensional embeddings or as raw
/// MFCC frames that the model lifts to `d` with a trainable projection.
#[derive(Debug, Clone, PartialEq)]
pub enum AudioTrack {
    Embedded(FeatureSequence),
    Mfcc(Matrix),
}

impl AudioTrack {
    pub fn len(&self) -> usize {
        match self {
            AudioTrack::Embedded(s) => s.len(),
            AudioTrack::Mfcc(m) => m.rows,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub label: u8,
    pub video: FeatureSequence,
    pub face: FeatureSequence,
    pub audio: AudioTrack,
    pub text: FeatureSequence,
    pub comments: Vec<CommentRecord>,
}

impl VideoSample {
    pub fn dim(&self) -> usize {
        self.text.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.label > 1 {
            return Err(Error::InvalidLabel(self.label));
        }
        for s in [&self.video, &self.face, &self.text] {
            s.validate()?;
        }
        let d = self.text.dim();
        if self.video.dim() != d || self.face.dim() != d {
            return Err(Error::DimMismatch(format!(
                "sample {}: modality dims differ (video {}, face {}, text {d})",
                self.id,
                self.video.dim(),
                self.face.dim()
            )));
        }
        if let AudioTrack::Embedded(a) = &self.audio {
            a.validate()?;
            if a.dim() != d {
                return Err(Error::DimMismatch(format!(
                    "sample {}: audio dim {} != {d}",
                    self.id,
                    a.dim()
                )));
            }
        }
        if self.audio.is_empty() {
            return Err(Error::Invariant(format!("sample {}: empty audio", self.id)));
        }
        if self.face.len() != self.video.len() {
            return Err(Error::Invariant(format!(
                "sample {}: {} face rows for {} video frames",
                self.id,
                self.face.len(),
                self.video.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    id: String,
    label: u8,
    video_feat: PathBuf,
    face_feat: PathBuf,
    audio_feat_or_wav: PathBuf,
    text_feat: PathBuf,
    comments_file: PathBuf,
}

/// One manifest entry; feature files are only read by [`SampleDescriptor::resolve`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleDescriptor {
    pub id: String,
    pub label: u8,
    pub video_feat: PathBuf,
    pub face_feat: PathBuf,
    pub audio_feat_or_wav: PathBuf,
    pub text_feat: PathBuf,
    pub comments_file: PathBuf,
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<SampleDescriptor>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |msg: String| Error::MalformedLine {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let m: ManifestLine = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if m.label > 1 {
            return Err(malformed(format!("label {} not in {{0,1}}", m.label)));
        }
        out.push(SampleDescriptor {
            id: m.id,
            label: m.label,
            video_feat: base.join(m.video_feat),
            face_feat: base.join(m.face_feat),
            audio_feat_or_wav: base.join(m.audio_feat_or_wav),
            text_feat: base.join(m.text_feat),
            comments_file: base.join(m.comments_file),
        });
    }
    Ok(out)
}

pub fn is_wav(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

impl SampleDescriptor {
    /// Reads every referenced file and assembles the sample. WAV audio is
    /// turned into MFCC frames with `mfcc`.
    pub fn resolve(&self, mfcc: &MfccConfig) -> Result<VideoSample> {
        let audio = if is_wav(&self.audio_feat_or_wav) {
            let (signal, rate) = audio::read_wav(&self.audio_feat_or_wav)?;
            let cfg = MfccConfig {
                sample_rate: rate as f64,
                ..mfcc.clone()
            };
            AudioTrack::Mfcc(audio::compute_mfcc(&signal, &cfg)?)
        } else {
            AudioTrack::Embedded(read_feature_file(&self.audio_feat_or_wav)?)
        };
        let sample = VideoSample {
            id: self.id.clone(),
            label: self.label,
            video: read_feature_file(&self.video_feat)?,
            face: read_feature_file(&self.face_feat)?,
            audio,
            text: read_feature_file(&self.text_feat)?,
            comments: read_comments(&self.comments_file)?
                .into_iter()
                .filter(|c| c.level == 1)
                .collect(),
        };
        sample.validate()?;
        Ok(sample)
    }
}

pub fn read_comments(path: impl AsRef<Path>) -> Result<Vec<CommentRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CommentRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_comments(path: impl AsRef<Path>, comments: &[CommentRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::new();
    for c in comments {
        s.push_str(&serde_json::to_string(c)?);
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
