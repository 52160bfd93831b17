//! Frame-level acoustic features and utterance summaries.
//!
//! All extractors share one framing: a Hann-windowed frame of
//! `frame_len_samples`, advanced by `hop_samples`, zero-padded to `n_fft`.
//! Frame count is `1 + (len - frame_len) / hop`.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};

pub const LOG_FLOOR: f64 = 1e-10;
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrameConfig {
    pub frame_len_samples: usize,
    pub hop_samples: usize,
    pub n_fft: usize,
    pub n_mels: usize,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            frame_len_samples: 400,
            hop_samples: 160,
            n_fft: 512,
            n_mels: 80,
        }
    }
}

impl FrameConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop_samples == 0 || self.n_mels == 0 {
            return Err(Error::Config("hop_samples and n_mels must be positive".into()));
        }
        if !(self.hop_samples <= self.frame_len_samples && self.frame_len_samples <= self.n_fft) {
            return Err(Error::Config(format!(
                "need hop ({}) <= frame_len ({}) <= n_fft ({})",
                self.hop_samples, self.frame_len_samples, self.n_fft
            )));
        }
        Ok(())
    }

    pub fn n_frames(&self, n_samples: usize) -> Result<usize> {
        if n_samples < self.frame_len_samples {
            return Err(Error::SignalTooShort {
                len: n_samples,
                need: self.frame_len_samples,
            });
        }
        Ok(1 + (n_samples - self.frame_len_samples) / self.hop_samples)
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    LogMel,
    Mfcc,
    Contrast,
    Rolloff,
    Zcr,
}

/// Time-major feature matrix, stored row-major as `frames × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub data: Vec<f64>,
    pub frames: usize,
    pub dim: usize,
    pub kind: FeatureKind,
    pub frame_rate_hz: f64,
}

impl FeatureSequence {
    pub fn new(data: Vec<f64>, frames: usize, dim: usize, kind: FeatureKind, frame_rate_hz: f64) -> Result<Self> {
        if frames == 0 || dim == 0 || data.len() != frames * dim {
            return Err(Error::shape(format!(
                "feature data of length {} does not form a {frames}x{dim} matrix",
                data.len()
            )));
        }
        Ok(Self {
            data,
            frames,
            dim,
            kind,
            frame_rate_hz,
        })
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn column_mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for r in self.rows() {
            m.iter_mut().zip(r).for_each(|(a, b)| *a += b);
        }
        m.iter_mut().for_each(|a| *a /= self.frames as f64);
        m
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters spanning 0 Hz to Nyquist, unit peak height.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    weights: Vec<Vec<f64>>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate_hz: f64) -> Self {
        let n_bins = n_fft / 2 + 1;
        let nyq = sample_rate_hz / 2.0;
        let top = hz_to_mel(nyq);
        let points: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate_hz / n_fft as f64;
        let weights = (0..n_mels)
            .map(|m| {
                let (lo, mid, hi) = (points[m], points[m + 1], points[m + 2]);
                (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        if f <= lo || f >= hi {
                            0.0
                        } else if f <= mid {
                            (f - lo) / (mid - lo)
                        } else {
                            (hi - f) / (hi - mid)
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            weights,
            centers_hz: points[1..=n_mels].to_vec(),
        }
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn apply(&self, mag: &[f64], out: &mut [f64]) {
        for (o, w) in out.iter_mut().zip(&self.weights) {
            *o = w.iter().zip(mag).map(|(a, b)| a * b).sum();
        }
    }
}

/// Hann-windowed magnitude spectra, one row of `n_fft/2 + 1` bins per frame.
pub struct Spectrogram {
    pub mags: Vec<Vec<f64>>,
    pub bin_hz: f64,
    pub frame_rate_hz: f64,
}

pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

fn frames<'a>(wave: &'a Waveform, cfg: &FrameConfig) -> Result<impl Iterator<Item = &'a [f64]>> {
    cfg.validate()?;
    let n = cfg.n_frames(wave.samples.len())?;
    let (len, hop) = (cfg.frame_len_samples, cfg.hop_samples);
    Ok((0..n).map(move |t| &wave.samples[t * hop..t * hop + len]))
}

pub fn spectrogram(wave: &Waveform, cfg: &FrameConfig) -> Result<Spectrogram> {
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(cfg.n_fft);
    let window = hann(cfg.frame_len_samples);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut mags = Vec::new();
    for frame in frames(wave, cfg)? {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for ((c, &x), &w) in buf.iter_mut().zip(frame).zip(&window) {
            c.re = x * w;
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        mags.push(buf[..cfg.n_bins()].iter().map(|c| c.norm()).collect());
    }
    let sr = f64::from(wave.sample_rate_hz);
    Ok(Spectrogram {
        mags,
        bin_hz: sr / cfg.n_fft as f64,
        frame_rate_hz: sr / cfg.hop_samples as f64,
    })
}

fn log_mel_from(spec: &Spectrogram, fb: &MelFilterbank, n_mels: usize) -> Result<FeatureSequence> {
    let mut data = vec![0.0; spec.mags.len() * n_mels];
    for (row, mag) in data.chunks_exact_mut(n_mels).zip(&spec.mags) {
        fb.apply(mag, row);
        row.iter_mut().for_each(|v| *v = v.max(LOG_FLOOR).ln());
    }
    FeatureSequence::new(data, spec.mags.len(), n_mels, FeatureKind::LogMel, spec.frame_rate_hz)
}

pub fn log_mel(wave: &Waveform, cfg: &FrameConfig) -> Result<FeatureSequence> {
    let spec = spectrogram(wave, cfg)?;
    let fb = MelFilterbank::new(cfg.n_mels, cfg.n_fft, f64::from(wave.sample_rate_hz));
    log_mel_from(&spec, &fb, cfg.n_mels)
}

/// Orthonormal DCT-II basis, `n_coeffs` rows of length `n`.
fn dct_basis(n: usize, n_coeffs: usize) -> Vec<Vec<f64>> {
    (0..n_coeffs)
        .map(|k| {
            let s = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            (0..n)
                .map(|i| s * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos())
                .collect()
        })
        .collect()
}

fn mfcc_from(log_mel: &FeatureSequence, n_coeffs: usize) -> Result<FeatureSequence> {
    if n_coeffs == 0 || n_coeffs > log_mel.dim {
        return Err(Error::invalid(format!(
            "n_coeffs must be in 1..={}, got {n_coeffs}",
            log_mel.dim
        )));
    }
    let basis = dct_basis(log_mel.dim, n_coeffs);
    let mut data = Vec::with_capacity(log_mel.frames * n_coeffs);
    for row in log_mel.rows() {
        data.extend(basis.iter().map(|b| b.iter().zip(row).map(|(a, x)| a * x).sum::<f64>()));
    }
    FeatureSequence::new(data, log_mel.frames, n_coeffs, FeatureKind::Mfcc, log_mel.frame_rate_hz)
}

pub fn mfcc(wave: &Waveform, cfg: &FrameConfig, n_coeffs: usize) -> Result<FeatureSequence> {
    if n_coeffs > cfg.n_mels {
        return Err(Error::invalid(format!(
            "n_coeffs ({n_coeffs}) exceeds n_mels ({})",
            cfg.n_mels
        )));
    }
    mfcc_from(&log_mel(wave, cfg)?, n_coeffs)
}

pub const CONTRAST_BASE_HZ: f64 = 200.0;

/// Bin ranges for `n_bands + 1` contrast bands: a sub-band below the base
/// frequency, then octaves, with the last band running to Nyquist.
pub fn contrast_band_ranges(n_bins: usize, bin_hz: f64, n_bands: usize) -> Result<Vec<std::ops::Range<usize>>> {
    let nyq = (n_bins - 1) as f64 * bin_hz;
    let mut edges = vec![0.0];
    edges.extend((0..=n_bands).map(|i| CONTRAST_BASE_HZ * 2f64.powi(i as i32)));
    if edges[n_bands] >= nyq {
        return Err(Error::invalid(format!(
            "contrast band edge {} Hz reaches Nyquist {nyq} Hz; reduce n_bands",
            edges[n_bands]
        )));
    }
    let bin_of = |hz: f64| ((hz / bin_hz).ceil() as usize).min(n_bins);
    let ranges: Vec<_> = (0..=n_bands)
        .map(|k| {
            let lo = bin_of(edges[k]);
            let hi = if k == n_bands { n_bins } else { bin_of(edges[k + 1]) };
            lo..hi
        })
        .collect();
    if let Some(r) = ranges.iter().find(|r| r.is_empty()) {
        return Err(Error::invalid(format!(
            "contrast band {r:?} holds no FFT bins at {bin_hz} Hz resolution"
        )));
    }
    Ok(ranges)
}

/// Per-band log peak/valley difference for one magnitude spectrum.
pub fn contrast_from_spectrum(mag: &[f64], bands: &[std::ops::Range<usize>], quantile: f64) -> Vec<f64> {
    bands
        .iter()
        .map(|r| {
            let mut band = mag[r.clone()].to_vec();
            band.sort_by(f64::total_cmp);
            let q = ((quantile * band.len() as f64).round() as usize).clamp(1, band.len());
            let valley = band[..q].iter().sum::<f64>() / q as f64;
            let peak = band[band.len() - q..].iter().sum::<f64>() / q as f64;
            peak.max(LOG_FLOOR).ln() - valley.max(LOG_FLOOR).ln()
        })
        .collect()
}

fn contrast_from(spec: &Spectrogram, n_bands: usize, quantile: f64) -> Result<FeatureSequence> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::invalid(format!("quantile must be in (0, 1), got {quantile}")));
    }
    let n_bins = spec.mags.first().map_or(0, Vec::len);
    let bands = contrast_band_ranges(n_bins, spec.bin_hz, n_bands)?;
    let data: Vec<f64> = spec
        .mags
        .iter()
        .flat_map(|m| contrast_from_spectrum(m, &bands, quantile))
        .collect();
    FeatureSequence::new(data, spec.mags.len(), n_bands + 1, FeatureKind::Contrast, spec.frame_rate_hz)
}

pub fn spectral_contrast(wave: &Waveform, cfg: &FrameConfig, n_bands: usize, quantile: f64) -> Result<FeatureSequence> {
    contrast_from(&spectrogram(wave, cfg)?, n_bands, quantile)
}

/// Lowest bin frequency at which cumulative power reaches `pct` of the total.
/// An all-zero spectrum has roll-off 0 Hz.
pub fn rolloff_from_spectrum(mag: &[f64], bin_hz: f64, pct: f64) -> f64 {
    let total: f64 = mag.iter().map(|m| m * m).sum();
    if total <= 0.0 {
        return 0.0;
    }
    let threshold = pct * total;
    let mut acc = 0.0;
    for (k, m) in mag.iter().enumerate() {
        acc += m * m;
        if acc >= threshold {
            return k as f64 * bin_hz;
        }
    }
    (mag.len() - 1) as f64 * bin_hz
}

fn rolloff_from(spec: &Spectrogram, pct: f64) -> Result<FeatureSequence> {
    if !(pct > 0.0 && pct < 1.0) {
        return Err(Error::invalid(format!("roll-off percentage must be in (0, 1), got {pct}")));
    }
    let data = spec
        .mags
        .iter()
        .map(|m| rolloff_from_spectrum(m, spec.bin_hz, pct))
        .collect();
    FeatureSequence::new(data, spec.mags.len(), 1, FeatureKind::Rolloff, spec.frame_rate_hz)
}

pub fn spectral_rolloff(wave: &Waveform, cfg: &FrameConfig, pct: f64) -> Result<FeatureSequence> {
    rolloff_from(&spectrogram(wave, cfg)?, pct)
}

pub fn zero_crossing_rate(wave: &Waveform, cfg: &FrameConfig) -> Result<FeatureSequence> {
    let data: Vec<f64> = frames(wave, cfg)?
        .map(|f| {
            let crossings = f.windows(2).filter(|w| (w[0] >= 0.0) != (w[1] >= 0.0)).count();
            crossings as f64 / (f.len() - 1).max(1) as f64
        })
        .collect();
    let n = data.len();
    FeatureSequence::new(
        data,
        n,
        1,
        FeatureKind::Zcr,
        f64::from(wave.sample_rate_hz) / cfg.hop_samples as f64,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SummaryConfig {
    pub n_mfcc: usize,
    pub contrast_bands: usize,
    pub contrast_quantile: f64,
    pub rolloff_pct: f64,
}

impl Default for SummaryConfig {
    fn default() -> Self {
        Self {
            n_mfcc: 13,
            contrast_bands: 6,
            contrast_quantile: 0.02,
            rolloff_pct: 0.85,
        }
    }
}

impl SummaryConfig {
    pub fn dim(&self) -> usize {
        self.n_mfcc + self.contrast_bands + 1 + 2
    }
}

/// Mean descriptor vector: `[mfcc, contrast, rolloff, zcr]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceSummary {
    pub id: String,
    pub vector: Vec<f64>,
}

pub fn utterance_summary(wave: &Waveform, cfg: &FrameConfig, scfg: &SummaryConfig) -> Result<UtteranceSummary> {
    let spec = spectrogram(wave, cfg)?;
    let fb = MelFilterbank::new(cfg.n_mels, cfg.n_fft, f64::from(wave.sample_rate_hz));
    let mel = log_mel_from(&spec, &fb, cfg.n_mels)?;
    let mut vector = mfcc_from(&mel, scfg.n_mfcc)?.column_mean();
    vector.extend(contrast_from(&spec, scfg.contrast_bands, scfg.contrast_quantile)?.column_mean());
    vector.extend(rolloff_from(&spec, scfg.rolloff_pct)?.column_mean());
    vector.extend(zero_crossing_rate(wave, cfg)?.column_mean());
    Ok(UtteranceSummary {
        id: wave.id.clone(),
        vector,
    })
}

/// Per-dimension mean and (population) standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Two-pass statistics over every row of every sequence, in input order.
    pub fn compute<'a>(seqs: impl IntoIterator<Item = &'a FeatureSequence> + Clone) -> Result<Self> {
        let mut dim = None;
        let mut count = 0usize;
        let mut mean: Vec<f64> = Vec::new();
        for s in seqs.clone() {
            let d = *dim.get_or_insert(s.dim);
            if d != s.dim {
                return Err(Error::shape(format!("mixed feature dims {d} and {}", s.dim)));
            }
            mean.resize(d, 0.0);
            for r in s.rows() {
                mean.iter_mut().zip(r).for_each(|(m, x)| *m += x);
            }
            count += s.frames;
        }
        if count == 0 {
            return Err(Error::invalid("no frames to compute statistics from"));
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0; mean.len()];
        for s in seqs {
            for r in s.rows() {
                for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                    *v += (x - m) * (x - m);
                }
            }
        }
        let std = var.iter().map(|v| (v / count as f64).sqrt()).collect();
        Ok(Self { mean, std })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let seq = FeatureSequence::new(rows.concat(), rows.len(), dim.max(1), FeatureKind::Mfcc, 0.0)?;
        Self::compute([&seq])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_row(&self, row: &[f64], out: &mut [f64]) {
        for (((o, x), m), s) in out.iter_mut().zip(row).zip(&self.mean).zip(&self.std) {
            *o = if *s <= STD_FLOOR { 0.0 } else { (x - m) / s };
        }
    }

    /// Little-endian f64 bytes of mean then std, for checksums.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.mean
            .iter()
            .chain(&self.std)
            .flat_map(|v| v.to_le_bytes())
            .collect()
    }
}

/// Standardizes `seq` with `stats`, or with its own statistics when `stats` is `None`.
pub fn normalize_global(seq: &FeatureSequence, stats: Option<&NormStats>) -> Result<FeatureSequence> {
    let own;
    let stats = match stats {
        Some(s) => s,
        None => {
            own = NormStats::compute([seq])?;
            &own
        }
    };
    if stats.dim() != seq.dim {
        return Err(Error::shape(format!(
            "stats have {} dims, sequence has {}",
            stats.dim(),
            seq.dim
        )));
    }
    let mut data = vec![0.0; seq.data.len()];
    for (o, r) in data.chunks_exact_mut(seq.dim).zip(seq.rows()) {
        stats.apply_row(r, o);
    }
    Ok(FeatureSequence { data, ..seq.clone() })
}

#[derive(Debug, Serialize, Deserialize)]
struct DumpHeader {
    id: String,
    kind: FeatureKind,
    #[serde(rename = "T")]
    frames: usize,
    #[serde(rename = "D")]
    dim: usize,
    frame_rate: f64,
}

/// Writes one feature block: u32 LE header length, JSON header, then
/// row-major f32 LE values.
pub fn write_feature_block(w: &mut impl Write, id: &str, seq: &FeatureSequence) -> Result<()> {
    let header = serde_json::to_vec(&DumpHeader {
        id: id.to_string(),
        kind: seq.kind,
        frames: seq.frames,
        dim: seq.dim,
        frame_rate: seq.frame_rate_hz,
    })?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for v in &seq.data {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Reads one block written by [`write_feature_block`]; `None` at clean EOF.
pub fn read_feature_block(r: &mut impl Read) -> Result<Option<(String, FeatureSequence)>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut header)?;
    let h: DumpHeader = serde_json::from_slice(&header)?;
    let mut raw = vec![0u8; h.frames * h.dim * 4];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Ok(Some((h.id, FeatureSequence::new(data, h.frames, h.dim, h.kind, h.frame_rate)?)))
}
