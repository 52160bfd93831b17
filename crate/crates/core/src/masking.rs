//! Span masking of normalized feature sequences.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::rng;

pub const DEFAULT_P_START: f64 = 0.15;
pub const DEFAULT_SPAN: usize = 4;
pub const NOISE_STD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    /// Strictly increasing frame indices in `[0, frames)`.
    pub masked_frames: Vec<usize>,
    pub frames: usize,
    pub seed: u64,
    pub p_start: f64,
    pub span: usize,
}

impl MaskSpec {
    pub fn fraction(&self) -> f64 {
        self.masked_frames.len() as f64 / self.frames as f64
    }

    pub fn as_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.frames];
        for &i in &self.masked_frames {
            flags[i] = true;
        }
        flags
    }
}

/// How frame-level masks map onto stacked target positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMaskRule {
    /// A position is masked when any of its frames is masked.
    #[default]
    Any,
    /// A position is masked only when all of its frames are masked.
    All,
}

/// Every frame independently starts a span with probability `p_start`; the
/// mask is the union of `[s, min(s + span, frames))` over starts `s`.
pub fn sample_mask(frames: usize, p_start: f64, span: usize, seed: u64) -> Result<MaskSpec> {
    if frames == 0 {
        return Err(Error::invalid("cannot mask an empty sequence"));
    }
    if !(0.0..=1.0).contains(&p_start) {
        return Err(Error::invalid(format!("p_start must be in [0, 1], got {p_start}")));
    }
    if span == 0 {
        return Err(Error::invalid("span must be at least 1"));
    }
    let mut r = rng::stream(seed, &[rng::TAG_MASK]);
    let mut masked = Vec::new();
    // One past the last frame covered so far; spans only ever extend it.
    let mut covered_to = 0usize;
    for s in 0..frames {
        if r.random::<f64>() < p_start {
            let end = (s + span).min(frames);
            masked.extend(covered_to.max(s)..end);
            covered_to = covered_to.max(end);
        }
    }
    Ok(MaskSpec {
        masked_frames: masked,
        frames,
        seed,
        p_start,
        span,
    })
}

/// Replaces masked frames with fresh N(0, 0.1²) noise; other frames are copied bit-for-bit.
pub fn apply_mask(seq: &FeatureSequence, mask: &MaskSpec, noise_seed: u64) -> Result<FeatureSequence> {
    if let Some(&bad) = mask.masked_frames.iter().find(|&&i| i >= seq.frames) {
        return Err(Error::invalid(format!(
            "mask index {bad} out of range for {} frames",
            seq.frames
        )));
    }
    let mut out = seq.clone();
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut r = rng::stream(noise_seed, &[rng::TAG_NOISE]);
    for &t in &mask.masked_frames {
        for x in &mut out.data[t * seq.dim..(t + 1) * seq.dim] {
            *x = noise.sample(&mut r);
        }
    }
    Ok(out)
}

/// Target-level mask for `positions` stacks of `stack` frames each.
pub fn project_mask(mask: &MaskSpec, positions: usize, stack: usize, rule: TargetMaskRule) -> Vec<bool> {
    let flags = mask.as_flags();
    (0..positions)
        .map(|p| {
            let frames = &flags[p * stack..((p + 1) * stack).min(flags.len())];
            match rule {
                TargetMaskRule::Any => frames.iter().any(|&f| f),
                TargetMaskRule::All => !frames.is_empty() && frames.iter().all(|&f| f),
            }
        })
        .collect()
}
