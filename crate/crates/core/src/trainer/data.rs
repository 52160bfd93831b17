use rand::seq::SliceRandom;

use super::config::RunConfig;
use crate::audio::{ManifestEntry, Waveform};
use crate::clustering::ClusterModel;
use crate::error::{Error, Result};
use crate::features::{log_mel, normalize_global, FeatureSequence, NormStats};
use crate::quantizer::{Projected, QuantizerBank, TargetSequence};
use crate::rng;

/// A normalized utterance with its frozen quantizer outputs.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub features: FeatureSequence,
    pub targets: TargetSequence,
    pub projected: Projected,
    pub cluster: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Utterance>,
    pub val: Vec<Utterance>,
    pub norm_stats: NormStats,
}

/// Deterministic held-out split: a seeded permutation, of which the first
/// `round(n * fraction)` (at least one when `fraction > 0`, none when `n < 2`) are
/// validation. Both halves are returned in ascending order.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[rng::TAG_SPLIT]));
    let mut n_val = (n as f64 * val_fraction).round() as usize;
    if n < 2 {
        n_val = 0;
    } else if val_fraction > 0.0 {
        n_val = n_val.clamp(1, n - 1);
    }
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Resolves the cluster id of every entry: the manifest annotation, else the
/// model's stored assignment.
fn clusters_for(entries: &[ManifestEntry], model: Option<&ClusterModel>, n_codebooks: usize) -> Result<Vec<usize>> {
    if let Some(m) = model {
        if m.k != n_codebooks {
            return Err(Error::Config(format!(
                "cluster model has {} clusters but the run uses {n_codebooks} codebooks",
                m.k
            )));
        }
    }
    entries
        .iter()
        .map(|e| {
            let c = e
                .cluster
                .or_else(|| model.and_then(|m| m.assignments.get(&e.id).copied()))
                .ok_or_else(|| Error::Config(format!("utterance `{}` has no cluster id", e.id)))?;
            if c >= n_codebooks {
                return Err(Error::Config(format!(
                    "utterance `{}` is in cluster {c}, but only {n_codebooks} codebooks exist",
                    e.id
                )));
            }
            Ok(c)
        })
        .collect()
}

impl Dataset {
    /// Extracts features, fits (or reuses) normalization statistics on the
    /// training split, and caches quantizer targets computed from the clean,
    /// unmasked normalized features.
    pub fn prepare(
        cfg: &RunConfig,
        entries: &[ManifestEntry],
        waves: &[Waveform],
        bank: &QuantizerBank,
        cluster_model: Option<&ClusterModel>,
        stored_stats: Option<&NormStats>,
    ) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("manifest is empty"));
        }
        let clusters = if cfg.train.loss.cluster_weighting {
            clusters_for(entries, cluster_model, bank.n_codebooks())?
                .into_iter()
                .map(Some)
                .collect()
        } else {
            entries.iter().map(|e| e.cluster).collect::<Vec<_>>()
        };
        let min_frames = cfg.bank.stack_factor;
        let feats = waves
            .iter()
            .map(|w| {
                let f = log_mel(w, &cfg.frames)?;
                if f.frames < min_frames {
                    return Err(Error::SignalTooShort {
                        len: w.samples.len(),
                        need: cfg.frames.frame_len_samples + (min_frames - 1) * cfg.frames.hop_samples,
                    });
                }
                Ok(f)
            })
            .collect::<Result<Vec<_>>>()?;
        let (train_idx, val_idx) = split_indices(entries.len(), cfg.train.val_fraction, cfg.train.seed);
        let norm_stats = match stored_stats {
            Some(s) => s.clone(),
            None => NormStats::compute(train_idx.iter().map(|&i| &feats[i]).collect::<Vec<_>>())?,
        };
        let build = |i: usize| -> Result<Utterance> {
            let features = normalize_global(&feats[i], Some(&norm_stats))?;
            let (targets, projected) = bank.quantize(&features)?;
            Ok(Utterance {
                id: entries[i].id.clone(),
                features,
                targets,
                projected,
                cluster: clusters[i],
            })
        };
        Ok(Self {
            train: train_idx.iter().map(|&i| build(i)).collect::<Result<_>>()?,
            val: val_idx.iter().map(|&i| build(i)).collect::<Result<_>>()?,
            norm_stats,
        })
    }
}

/// Buckets of up to `batch` utterances after sorting by length (ties by id).
pub fn length_buckets(utts: &[Utterance], batch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..utts.len()).collect();
    order.sort_by(|&a, &b| {
        utts[a]
            .features
            .frames
            .cmp(&utts[b].features.frames)
            .then_with(|| utts[a].id.cmp(&utts[b].id))
    });
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Bucket order for one epoch, shuffled from (seed, epoch).
pub fn epoch_order(n_buckets: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_buckets).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::TAG_SHUFFLE, epoch]));
    order
}
