//! MFCC audio tokens and the trainable lift into the shared embedding space.
//!
//! Pipeline per frame: periodic Hann window, `n_fft`-point magnitude
//! spectrum, HTK-scale triangular Mel filterbank, floored natural log, and
//! an orthonormal DCT-II truncated to `n_mfcc` coefficients.

use std::f64::consts::PI;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{FeatureSequence, Modality};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfccConfig {
    pub sample_rate: f64,
    pub frame_len: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub fmin: f64,
    /// `None` means Nyquist.
    pub fmax: Option<f64>,
    pub log_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000.0,
            frame_len: 400,
            hop: 160,
            n_fft: 512,
            n_mels: 40,
            n_mfcc: 40,
            fmin: 0.0,
            fmax: None,
            log_floor: 1e-10,
        }
    }
}

impl MfccConfig {
    pub fn fmax(&self) -> f64 {
        self.fmax.unwrap_or(self.sample_rate / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("mfcc config: {m}")));
        if self.sample_rate <= 0.0 {
            return bad("sample_rate must be positive");
        }
        if self.frame_len == 0 || self.frame_len > self.n_fft {
            return bad("need 0 < frame_len <= n_fft");
        }
        if self.hop == 0 {
            return bad("hop must be >= 1");
        }
        if self.n_mels == 0 || self.n_mfcc == 0 || self.n_mfcc > self.n_mels {
            return bad("need 0 < n_mfcc <= n_mels");
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax() && self.fmax() <= self.sample_rate / 2.0) {
            return bad("need 0 <= fmin < fmax <= sample_rate/2");
        }
        if self.log_floor <= 0.0 {
            return bad("log_floor must be positive");
        }
        Ok(())
    }

    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.frame_len {
            0
        } else {
            (len - self.frame_len) / self.hop + 1
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Corner frequencies (Hz) of the `n_mels` triangles: `n_mels + 2` points
/// evenly spaced on the Mel scale. Filter `m` spans `[f[m], f[m+2]]` and
/// peaks at `f[m+1]`.
pub fn mel_points(cfg: &MfccConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(cfg.fmax());
    let n = cfg.n_mels + 1;
    (0..=n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / n as f64))
        .collect()
}

/// Triangular filterbank, `n_mels × (n_fft/2 + 1)`.
pub fn mel_filterbank(cfg: &MfccConfig) -> Matrix {
    let bins = cfg.n_fft / 2 + 1;
    let pts = mel_points(cfg);
    let mut fb = Matrix::zeros(cfg.n_mels, bins);
    for m in 0..cfg.n_mels {
        let (l, c, r) = (pts[m], pts[m + 1], pts[m + 2]);
        for k in 0..bins {
            let f = k as f64 * cfg.sample_rate / cfg.n_fft as f64;
            let up = (f - l) / (c - l);
            let down = (r - f) / (r - c);
            fb.set(m, k, up.min(down).max(0.0));
        }
    }
    fb
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

fn check_signal(signal: &[f64], cfg: &MfccConfig) -> Result<()> {
    cfg.validate()?;
    if let Some(i) = signal.iter().position(|v| v.is_nan()) {
        return Err(Error::NanInput(i));
    }
    if signal.len() < cfg.frame_len {
        return Err(Error::SignalTooShort {
            len: signal.len(),
            frame_len: cfg.frame_len,
        });
    }
    Ok(())
}

/// Floored log Mel energies per frame (`m × n_mels`), i.e. the pipeline
/// before the DCT.
pub fn log_mel_energies(signal: &[f64], cfg: &MfccConfig) -> Result<Matrix> {
    check_signal(signal, cfg)?;
    let frames = cfg.frame_count(signal.len());
    let window = hann(cfg.frame_len);
    let fb = mel_filterbank(cfg);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);
    let bins = cfg.n_fft / 2 + 1;

    let mut out = Matrix::zeros(frames, cfg.n_mels);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut mag = vec![0.0; bins];
    for t in 0..frames {
        let start = t * cfg.hop;
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (i, w) in window.iter().enumerate() {
            buf[i].re = signal[start + i] * w;
        }
        fft.process(&mut buf);
        for (m, c) in mag.iter_mut().zip(&buf) {
            *m = c.norm();
        }
        let row = out.row_mut(t);
        for (m, e) in row.iter_mut().enumerate() {
            let energy: f64 = fb.row(m).iter().zip(&mag).map(|(w, a)| w * a).sum();
            *e = energy.max(cfg.log_floor).ln();
        }
    }
    Ok(out)
}

/// Orthonormal DCT-II basis, `n_out × n_in`.
pub fn dct2_basis(n_in: usize, n_out: usize) -> Matrix {
    let mut b = Matrix::zeros(n_out, n_in);
    for k in 0..n_out {
        let scale = if k == 0 {
            (1.0 / n_in as f64).sqrt()
        } else {
            (2.0 / n_in as f64).sqrt()
        };
        for n in 0..n_in {
            b.set(
                k,
                n,
                scale * (PI * k as f64 * (2 * n + 1) as f64 / (2 * n_in) as f64).cos(),
            );
        }
    }
    b
}

/// MFCC matrix, `m × n_mfcc`, with `m = floor((len - frame_len)/hop) + 1`.
pub fn compute_mfcc(signal: &[f64], cfg: &MfccConfig) -> Result<Matrix> {
    let logmel = log_mel_energies(signal, cfg)?;
    let basis = dct2_basis(cfg.n_mels, cfg.n_mfcc);
    let out = logmel.matmul(&basis.transpose())?;
    debug_assert!(out.all_finite());
    Ok(out)
}

/// Trainable `n_mfcc × d` projection plus bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftParams {
    pub proj: Matrix,
    pub bias: Vec<f64>,
}

impl LiftParams {
    pub fn zeros(n_mfcc: usize, d: usize) -> Self {
        Self {
            proj: Matrix::zeros(n_mfcc, d),
            bias: vec![0.0; d],
        }
    }

    /// Identity on the first `min(n_mfcc, d)` coordinates, zero elsewhere.
    pub fn identity(n_mfcc: usize, d: usize) -> Self {
        let mut p = Self::zeros(n_mfcc, d);
        for i in 0..n_mfcc.min(d) {
            p.proj.set(i, i, 1.0);
        }
        p
    }
}

pub fn lift_audio(mfcc: &Matrix, params: &LiftParams) -> Result<FeatureSequence> {
    if mfcc.cols != params.proj.rows || params.bias.len() != params.proj.cols {
        return Err(Error::DimMismatch(format!(
            "lift: mfcc has {} coefficients, projection is {}x{} with bias {}",
            mfcc.cols,
            params.proj.rows,
            params.proj.cols,
            params.bias.len()
        )));
    }
    let mut tokens = mfcc.matmul(&params.proj)?;
    for r in 0..tokens.rows {
        for (v, b) in tokens.row_mut(r).iter_mut().zip(&params.bias) {
            *v += b;
        }
    }
    FeatureSequence::new(Modality::Audio, tokens)
}

/// Accumulates dL/dproj and dL/dbias given dL/dtokens.
pub fn lift_audio_backward(mfcc: &Matrix, dtokens: &Matrix, grads: &mut LiftParams) {
    for r in 0..mfcc.rows {
        let g = dtokens.row(r);
        for (b, gv) in grads.bias.iter_mut().zip(g) {
            *b += gv;
        }
        for (k, &x) in mfcc.row(r).iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (p, gv) in grads.proj.row_mut(k).iter_mut().zip(g) {
                *p += x * gv;
            }
        }
    }
}

/// Reads 16-bit PCM WAV as mono samples in [-1, 1]; multi-channel input is
/// averaged.
pub fn read_wav(path: impl AsRef<Path>) -> Result<(Vec<f64>, u32)> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Wav(format!(
            "{}: only 16-bit integer PCM is supported",
            path.display()
        )));
    }
    let channels = spec.channels.max(1) as usize;
    let raw: Vec<i16> = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Wav(e.to_string()))?;
    let mono = raw
        .chunks(channels)
        .map(|c| c.iter().map(|&s| s as f64 / 32768.0).sum::<f64>() / c.len() as f64)
        .collect();
    Ok((mono, spec.sample_rate))
}

fn pcm16(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// The value a sample takes after a 16-bit write and read.
pub fn quantize_pcm16(x: f64) -> f64 {
    pcm16(x) as f64 / 32768.0
}

pub fn write_wav(path: impl AsRef<Path>, samples: &[f64], sample_rate: u32) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |e: hound::Error| Error::Wav(format!("{}: {e}", path.display()));
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in samples {
        w.write_sample(pcm16(s)).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sine(freq: f64, len: usize, rate: f64) -> Vec<f64> {
        (0..len)
            .map(|i| 0.5 * (2.0 * PI * freq * i as f64 / rate).sin())
            .collect()
    }

    #[test]
    fn frame_count_arithmetic() {
        let cfg = MfccConfig::default();
        let m = compute_mfcc(&vec![0.1; 720], &cfg).unwrap();
        assert_eq!((m.rows, m.cols), (3, 40));
        assert!(matches!(
            compute_mfcc(&vec![0.0; 399], &cfg),
            Err(Error::SignalTooShort { len: 399, frame_len: 400 })
        ));
        let mut s = vec![0.0; 500];
        s[7] = f64::NAN;
        assert!(matches!(compute_mfcc(&s, &cfg), Err(Error::NanInput(7))));
    }

    #[test]
    fn silence_only_has_coefficient_zero() {
        let cfg = MfccConfig::default();
        let m = compute_mfcc(&vec![0.0; 1000], &cfg).unwrap();
        let c0 = (1e-10f64).ln() * (cfg.n_mels as f64).sqrt();
        for r in 0..m.rows {
            assert!((m.get(r, 0) - c0).abs() < 1e-9);
            for c in 1..m.cols {
                assert!(m.get(r, c).abs() < 1e-9, "coef {c} = {}", m.get(r, c));
            }
        }
    }

    #[test]
    fn sine_peaks_in_filter_spanning_its_frequency() {
        let cfg = MfccConfig::default();
        let logmel = log_mel_energies(&sine(440.0, 4000, 16_000.0), &cfg).unwrap();
        // Oracle: corner frequencies straight from the HTK formula.
        let lo = 0.0f64;
        let hi = 2595.0 * (1.0 + 8000.0f64 / 700.0).log10();
        let corner = |i: usize| 700.0 * (10f64.powf((lo + (hi - lo) * i as f64 / 41.0) / 2595.0) - 1.0);
        for t in 0..logmel.rows {
            let row = logmel.row(t);
            let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert!(corner(arg) < 440.0 && 440.0 < corner(arg + 2), "frame {t}: filter {arg}");
        }
    }

    #[test]
    fn hop_shift_shifts_frames() {
        let cfg = MfccConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sig: Vec<f64> = (0..3000).map(|_| rng.random_range(-0.5..0.5)).collect();
        let a = compute_mfcc(&sig, &cfg).unwrap();
        let b = compute_mfcc(&sig[cfg.hop..], &cfg).unwrap();
        assert_eq!(b.rows, a.rows - 1);
        for r in 0..b.rows {
            for c in 0..b.cols {
                assert!((a.get(r + 1, c) - b.get(r, c)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn louder_signal_raises_c0() {
        let cfg = MfccConfig::default();
        let sig = sine(300.0, 2000, 16_000.0);
        let loud: Vec<f64> = sig.iter().map(|v| v * 1.7).collect();
        let a = compute_mfcc(&sig, &cfg).unwrap();
        let b = compute_mfcc(&loud, &cfg).unwrap();
        for r in 0..a.rows {
            assert!(b.get(r, 0) > a.get(r, 0));
        }
    }

    #[test]
    fn dct_basis_is_orthonormal() {
        let b = dct2_basis(12, 12);
        let g = b.matmul(&b.transpose()).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lift_special_cases() {
        let mfcc = Matrix::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap();
        let mut p = LiftParams::zeros(2, 3);
        p.bias = vec![0.1, 0.2, 0.3];
        let s = lift_audio(&mfcc, &p).unwrap();
        assert_eq!(s.token(0), &[0.1, 0.2, 0.3]);
        assert_eq!(s.token(1), &[0.1, 0.2, 0.3]);

        let s = lift_audio(&mfcc, &LiftParams::identity(2, 2)).unwrap();
        assert_eq!(s.tokens, mfcc);

        assert!(matches!(lift_audio(&mfcc, &LiftParams::zeros(3, 2)), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn lift_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (m, k, d) = (5, 4, 6);
        let mfcc = Matrix::from_vec(m, k, (0..m * k).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let p = LiftParams {
            proj: Matrix::from_vec(k, d, (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
            bias: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let s = lift_audio(&mfcc, &p).unwrap();
        for i in 0..m {
            for j in 0..d {
                let mut acc = p.bias[j];
                for t in 0..k {
                    acc += mfcc.get(i, t) * p.proj.get(t, j);
                }
                assert!((s.token(i)[j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wav_round_trip_stereo_mixdown() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        for _ in 0..4 {
            w.write_sample(16384i16).unwrap();
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        let (s, rate) = read_wav(&p).unwrap();
        assert_eq!(rate, 8000);
        assert_eq!(s, vec![0.25; 4]);
    }
}
