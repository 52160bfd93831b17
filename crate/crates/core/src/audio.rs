//! Mono 16-bit PCM audio, corpus manifests, and deterministic synthetic corpora.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub id: String,
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(id: impl Into<String>, samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("waveform has no samples"));
        }
        if sample_rate_hz == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(bad) = samples.iter().find(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::invalid(format!("sample {bad} outside [-1, 1]")));
        }
        Ok(Self {
            id: id.into(),
            samples,
            sample_rate_hz,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate_hz)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub duration_s: f64,
    #[serde(default)]
    pub cluster: Option<usize>,
}

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decodes a RIFF/WAVE byte buffer holding mono 16-bit PCM.
pub fn decode_wav(bytes: &[u8], id: &str) -> Result<Waveform> {
    if bytes.len() < 12 {
        return Err(Error::TruncatedHeader(format!("{} bytes, need 12 for RIFF header", bytes.len())));
    }
    if &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::UnsupportedFormat("not a RIFF/WAVE container".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let chunk_id = &bytes[pos..pos + 4];
        let size = le_u32(bytes, pos + 4) as usize;
        let body = pos + 8;
        if chunk_id == b"fmt " {
            if size < 16 || body + 16 > bytes.len() {
                return Err(Error::TruncatedHeader("fmt chunk shorter than 16 bytes".into()));
            }
            let mut tag = le_u16(bytes, body);
            // WAVE_FORMAT_EXTENSIBLE carries the real tag in its sub-format GUID.
            if tag == 0xFFFE && size >= 40 && body + 26 <= bytes.len() {
                tag = le_u16(bytes, body + 24);
            }
            fmt = Some((
                tag,
                le_u16(bytes, body + 2),
                le_u32(bytes, body + 4),
                le_u16(bytes, body + 14),
            ));
        } else if chunk_id == b"data" {
            let (tag, channels, rate, bits) =
                fmt.ok_or_else(|| Error::TruncatedHeader("data chunk before fmt chunk".into()))?;
            if tag != 1 {
                return Err(Error::UnsupportedFormat(format!("format tag {tag}, only PCM (1) is accepted")));
            }
            if channels != 1 {
                return Err(Error::UnsupportedFormat(format!("{channels} channels, only mono is accepted")));
            }
            if bits != 16 {
                return Err(Error::UnsupportedFormat(format!("{bits}-bit samples, only 16-bit is accepted")));
            }
            if rate == 0 {
                return Err(Error::UnsupportedFormat("sample rate 0".into()));
            }
            let end = body + size;
            if end > bytes.len() {
                return Err(Error::TruncatedHeader(format!(
                    "data chunk declares {size} bytes, {} present",
                    bytes.len() - body
                )));
            }
            let samples: Vec<f64> = bytes[body..end]
                .chunks_exact(2)
                .map(|c| f64::from(i16::from_le_bytes([c[0], c[1]])) / 32768.0)
                .collect();
            return Waveform::new(id, samples, rate);
        }
        pos = body + size + (size & 1);
    }
    Err(Error::TruncatedHeader("no data chunk found".into()))
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_wav(&bytes, &id)
}

/// Encodes samples as mono 16-bit PCM. Amplitudes are rounded to the nearest
/// multiple of 1/32768 and clamped to the i16 range.
pub fn encode_wav(samples: &[f64], sample_rate_hz: u32) -> Vec<u8> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate_hz.to_le_bytes());
    out.extend_from_slice(&(sample_rate_hz * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_wav(wave: &Waveform, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_wav(&wave.samples, wave.sample_rate_hz))?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let reader = BufReader::new(fs::File::open(path)?);
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::ManifestLine {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !(entry.duration_s > 0.0) {
            return Err(Error::ManifestLine {
                line: i + 1,
                message: format!("duration_s must be positive, got {}", entry.duration_s),
            });
        }
        if !seen.insert(entry.id.clone()) {
            return Err(Error::DuplicateId(entry.id));
        }
        entries.push(entry);
    }
    Ok(entries)
}

pub fn write_manifest(entries: &[ManifestEntry], path: impl AsRef<Path>) -> Result<()> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for e in entries {
        if !seen.insert(e.id.as_str()) {
            return Err(Error::DuplicateId(e.id.clone()));
        }
        serde_json::to_writer(&mut out, e)?;
        out.push(b'\n');
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Resolves an entry's path against the directory holding the manifest.
pub fn resolve_path(manifest_path: &Path, entry: &ManifestEntry) -> PathBuf {
    let p = Path::new(&entry.path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

pub fn load_corpus(manifest_path: &Path) -> Result<(Vec<ManifestEntry>, Vec<Waveform>)> {
    let entries = read_manifest(manifest_path)?;
    let waves = entries
        .iter()
        .map(|e| {
            let mut w = load_wav(resolve_path(manifest_path, e))?;
            w.id = e.id.clone();
            Ok(w)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((entries, waves))
}

/// Signal family for one synthetic utterance. Parameters left as `None` are
/// drawn from the utterance's seeded stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SignalFamily {
    Tone { freq_hz: Option<f64> },
    Harmonic { f0_hz: Option<f64> },
    Noise { low_hz: Option<f64>, high_hz: Option<f64> },
    /// A short sequence of tone segments repeated to fill the utterance.
    Pattern,
}

impl fmt::Display for SignalFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SignalFamily::Tone { freq_hz: Some(hz) } => write!(f, "tone:{hz}"),
            SignalFamily::Tone { freq_hz: None } => write!(f, "tone"),
            SignalFamily::Harmonic { f0_hz: Some(hz) } => write!(f, "harmonic:{hz}"),
            SignalFamily::Harmonic { f0_hz: None } => write!(f, "harmonic"),
            SignalFamily::Noise { low_hz: Some(lo), high_hz: Some(hi) } => write!(f, "noise:{lo}-{hi}"),
            SignalFamily::Noise { .. } => write!(f, "noise"),
            SignalFamily::Pattern => write!(f, "pattern"),
        }
    }
}

impl FromStr for SignalFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let hz = |a: &str| {
            a.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v > 0.0)
                .ok_or_else(|| Error::invalid(format!("bad frequency `{a}` in family `{s}`")))
        };
        match (name, arg) {
            ("tone", None) => Ok(SignalFamily::Tone { freq_hz: None }),
            ("tone", Some(a)) => Ok(SignalFamily::Tone { freq_hz: Some(hz(a)?) }),
            ("harmonic", None) => Ok(SignalFamily::Harmonic { f0_hz: None }),
            ("harmonic", Some(a)) => Ok(SignalFamily::Harmonic { f0_hz: Some(hz(a)?) }),
            ("noise", None) => Ok(SignalFamily::Noise { low_hz: None, high_hz: None }),
            ("noise", Some(a)) => {
                let (lo, hi) = a
                    .split_once('-')
                    .ok_or_else(|| Error::invalid(format!("noise band must be `lo-hi`, got `{a}`")))?;
                let (lo, hi) = (hz(lo)?, hz(hi)?);
                if lo >= hi {
                    return Err(Error::invalid(format!("empty noise band {lo}-{hi}")));
                }
                Ok(SignalFamily::Noise { low_hz: Some(lo), high_hz: Some(hi) })
            }
            ("pattern", None) => Ok(SignalFamily::Pattern),
            _ => Err(Error::invalid(format!("unknown signal family `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusRecipe {
    pub n_utterances: usize,
    pub duration_s: f64,
    /// Cycled over utterances: utterance i uses `families[i % len]`.
    pub families: Vec<SignalFamily>,
    pub sample_rate_hz: u32,
    pub seed: u64,
}

impl CorpusRecipe {
    pub fn new(n_utterances: usize, duration_s: f64, families: Vec<SignalFamily>, seed: u64) -> Self {
        Self {
            n_utterances,
            duration_s,
            families,
            sample_rate_hz: DEFAULT_SAMPLE_RATE,
            seed,
        }
    }

    pub fn mixed(n_utterances: usize, duration_s: f64, seed: u64) -> Self {
        Self::new(
            n_utterances,
            duration_s,
            vec![
                SignalFamily::Tone { freq_hz: None },
                SignalFamily::Harmonic { f0_hz: None },
                SignalFamily::Noise { low_hz: None, high_hz: None },
                SignalFamily::Pattern,
            ],
            seed,
        )
    }
}

fn peak_normalize(buf: &mut [f64], peak: f64) {
    let max = buf.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if max > 0.0 {
        let g = peak / max;
        buf.iter_mut().for_each(|s| *s *= g);
    }
}

fn synth_one(family: SignalFamily, n: usize, sr: f64, rng: &mut impl Rng) -> Vec<f64> {
    let nyq = sr / 2.0;
    let mut buf = vec![0.0; n];
    match family {
        SignalFamily::Tone { freq_hz } => {
            let f = freq_hz.unwrap_or_else(|| rng.random_range(100.0..3000.0));
            let phase = rng.random_range(0.0..2.0 * PI);
            for (i, s) in buf.iter_mut().enumerate() {
                *s = (2.0 * PI * f * i as f64 / sr + phase).sin();
            }
        }
        SignalFamily::Harmonic { f0_hz } => {
            let f0 = f0_hz.unwrap_or_else(|| rng.random_range(80.0..400.0));
            let n_harm = rng.random_range(3..=8usize);
            for h in 1..=n_harm {
                let fh = f0 * h as f64;
                if fh >= nyq {
                    break;
                }
                let amp = 1.0 / h as f64;
                let phase = rng.random_range(0.0..2.0 * PI);
                for (i, s) in buf.iter_mut().enumerate() {
                    *s += amp * (2.0 * PI * fh * i as f64 / sr + phase).sin();
                }
            }
        }
        SignalFamily::Noise { low_hz, high_hz } => {
            let lo = low_hz.unwrap_or_else(|| rng.random_range(200.0..2000.0));
            let hi = high_hz
                .unwrap_or_else(|| lo + rng.random_range(500.0..3000.0))
                .min(nyq * 0.99);
            // Sum of random-phase partials drawn uniformly inside the band.
            for _ in 0..48 {
                let f = rng.random_range(lo..hi.max(lo + 1.0));
                let phase = rng.random_range(0.0..2.0 * PI);
                for (i, s) in buf.iter_mut().enumerate() {
                    *s += (2.0 * PI * f * i as f64 / sr + phase).sin();
                }
            }
        }
        SignalFamily::Pattern => {
            let n_notes = rng.random_range(3..=5usize);
            let notes: Vec<f64> = (0..n_notes).map(|_| rng.random_range(150.0..3500.0)).collect();
            // Segment lengths are multiples of 10 ms so pattern boundaries track frames.
            let seg = (rng.random_range(6..=12usize) as f64 * sr / 100.0) as usize;
            let mut phase = 0.0f64;
            for (i, s) in buf.iter_mut().enumerate() {
                let f = notes[(i / seg.max(1)) % n_notes];
                phase += 2.0 * PI * f / sr;
                *s = phase.sin();
            }
        }
    }
    peak_normalize(&mut buf, 0.8);
    buf
}

/// Generates a deterministic corpus. Each utterance draws from its own seeded
/// stream, so utterance `i` does not depend on how many others are generated.
pub fn synth_corpus(recipe: &CorpusRecipe) -> Result<(Vec<Waveform>, Vec<ManifestEntry>)> {
    if recipe.n_utterances == 0 {
        return Err(Error::invalid("n_utterances must be at least 1"));
    }
    if !(recipe.duration_s > 0.0) || !recipe.duration_s.is_finite() {
        return Err(Error::invalid(format!("duration must be positive, got {}", recipe.duration_s)));
    }
    if recipe.families.is_empty() {
        return Err(Error::invalid("at least one signal family is required"));
    }
    if recipe.sample_rate_hz == 0 {
        return Err(Error::invalid("sample rate must be positive"));
    }
    let sr = f64::from(recipe.sample_rate_hz);
    let n = (recipe.duration_s * sr).round() as usize;
    if n == 0 {
        return Err(Error::invalid("duration rounds to zero samples"));
    }
    let mut waves = Vec::with_capacity(recipe.n_utterances);
    let mut entries = Vec::with_capacity(recipe.n_utterances);
    for i in 0..recipe.n_utterances {
        let family = recipe.families[i % recipe.families.len()];
        let mut r = rng::stream(recipe.seed, &[rng::TAG_CORPUS, i as u64]);
        let samples = synth_one(family, n, sr, &mut r);
        let id = format!("utt{i:05}");
        entries.push(ManifestEntry {
            id: id.clone(),
            path: format!("{id}.wav"),
            duration_s: n as f64 / sr,
            cluster: None,
        });
        waves.push(Waveform::new(id, samples, recipe.sample_rate_hz)?);
    }
    Ok((waves, entries))
}

/// Writes a corpus as `<dir>/<id>.wav` plus `<dir>/manifest.jsonl`; returns the manifest path.
pub fn write_corpus(dir: &Path, waves: &[Waveform], entries: &[ManifestEntry]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    for (w, e) in waves.iter().zip(entries) {
        write_wav(w, dir.join(&e.path))?;
    }
    let manifest = dir.join("manifest.jsonl");
    write_manifest(entries, &manifest)?;
    Ok(manifest)
}
