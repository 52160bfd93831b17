//! Masked cross-entropy, KL regularization against similarity distributions,
//! and their weighted combination.
//!
//! Distributions are passed per codebook as `positions × V` row-major slices.
//! Only masked target positions contribute; each codebook's loss is the mean
//! over masked positions, and codebooks are averaged with optional weights:
//!
//! ```text
//! total = w_ce * mean_n(w[n] * ce[n]) + w_kl * mean_n(w[n] * kl[n])
//! ce[n] = mean_t -ln max(p[n,t,y], eps)
//! kl[n] = mean_t sum_i p[n,t,i] * ln((p[n,t,i] + eps) / (d[n,t,i] + eps))
//! ```

use serde::{Deserialize, Serialize};

use crate::clustering::CodebookWeights;
use crate::error::{Error, Result};
use crate::quantizer::{argmax_first, TargetSequence};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub w_ce: f64,
    pub w_kl: f64,
    pub epsilon: f64,
    pub cluster_weighting: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            w_ce: 1.0,
            w_kl: 0.1,
            epsilon: 1e-10,
            cluster_weighting: false,
        }
    }
}

impl LossConfig {
    pub fn ce_only() -> Self {
        Self {
            w_kl: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w_ce >= 0.0 && self.w_kl >= 0.0) || (self.w_ce == 0.0 && self.w_kl == 0.0) {
            return Err(Error::Config(format!(
                "need w_ce >= 0, w_kl >= 0, not both zero; got ({}, {})",
                self.w_ce, self.w_kl
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }

    pub fn uses_kl(&self) -> bool {
        self.w_kl != 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce_per_codebook: Vec<f64>,
    pub kl_per_codebook: Vec<f64>,
    pub applied_weights: Vec<f64>,
    pub total: f64,
    pub masked_positions: usize,
}

impl LossReport {
    /// Component-wise mean of per-utterance reports; masked positions are summed.
    pub fn mean(reports: &[LossReport]) -> Option<LossReport> {
        let first = reports.first()?;
        let n = first.ce_per_codebook.len();
        let b = reports.len() as f64;
        let avg = |f: &dyn Fn(&LossReport) -> &Vec<f64>| -> Vec<f64> {
            (0..n).map(|j| reports.iter().map(|r| f(r)[j]).sum::<f64>() / b).collect()
        };
        Some(LossReport {
            ce_per_codebook: avg(&|r| &r.ce_per_codebook),
            kl_per_codebook: avg(&|r| &r.kl_per_codebook),
            applied_weights: avg(&|r| &r.applied_weights),
            total: reports.iter().map(|r| r.total).sum::<f64>() / b,
            masked_positions: reports.iter().map(|r| r.masked_positions).sum(),
        })
    }
}

fn check_shapes(probs: &[Vec<f64>], positions: usize, v: usize, masked: &[bool]) -> Result<()> {
    if masked.len() != positions {
        return Err(Error::shape(format!(
            "mask covers {} positions, expected {positions}",
            masked.len()
        )));
    }
    if let Some(p) = probs.iter().find(|p| p.len() != positions * v) {
        return Err(Error::shape(format!(
            "distribution of length {} is not {positions}x{v}",
            p.len()
        )));
    }
    Ok(())
}

fn vocab(probs: &[Vec<f64>], positions: usize) -> Result<usize> {
    match probs.first() {
        Some(p) if positions > 0 && p.len() % positions == 0 && !p.is_empty() => Ok(p.len() / positions),
        _ => Err(Error::shape("cannot infer vocabulary size from distributions")),
    }
}

/// Per-codebook mean of `-ln max(p[target], eps)` over masked positions.
/// An empty mask yields zeros.
pub fn ce_loss(probs: &[Vec<f64>], targets: &TargetSequence, masked: &[bool], epsilon: f64) -> Result<Vec<f64>> {
    let positions = targets.frames;
    let v = vocab(probs, positions)?;
    check_shapes(probs, positions, v, masked)?;
    if targets.indices.len() != probs.len() {
        return Err(Error::shape(format!(
            "{} target streams for {} codebooks",
            targets.indices.len(),
            probs.len()
        )));
    }
    let m = masked.iter().filter(|&&f| f).count();
    if m == 0 {
        return Ok(vec![0.0; probs.len()]);
    }
    probs
        .iter()
        .zip(&targets.indices)
        .map(|(p, ys)| {
            let mut acc = 0.0;
            for (t, &y) in ys.iter().enumerate() {
                if !masked[t] {
                    continue;
                }
                if y as usize >= v {
                    return Err(Error::invalid(format!("target {y} out of range for V={v}")));
                }
                acc -= p[t * v + y as usize].max(epsilon).ln();
            }
            Ok(acc / m as f64)
        })
        .collect()
}

/// Per-codebook mean of KL(p ‖ d) over masked positions. An empty mask yields zeros.
pub fn kl_loss(probs: &[Vec<f64>], sims: &[Vec<f64>], masked: &[bool], epsilon: f64) -> Result<Vec<f64>> {
    let positions = masked.len();
    let v = vocab(probs, positions)?;
    check_shapes(probs, positions, v, masked)?;
    check_shapes(sims, positions, v, masked)?;
    if sims.len() != probs.len() {
        return Err(Error::shape("prediction and similarity codebook counts differ"));
    }
    let m = masked.iter().filter(|&&f| f).count();
    if m == 0 {
        return Ok(vec![0.0; probs.len()]);
    }
    Ok(probs
        .iter()
        .zip(sims)
        .map(|(p, d)| {
            let mut acc = 0.0;
            for t in (0..positions).filter(|&t| masked[t]) {
                let (pr, dr) = (&p[t * v..(t + 1) * v], &d[t * v..(t + 1) * v]);
                acc += pr
                    .iter()
                    .zip(dr)
                    .map(|(pi, di)| pi * ((pi + epsilon) / (di + epsilon)).ln())
                    .sum::<f64>();
            }
            acc / m as f64
        })
        .collect())
}

fn resolve_weights(weights: Option<&CodebookWeights>, n: usize) -> Result<Vec<f64>> {
    match weights {
        None => Ok(vec![1.0; n]),
        Some(w) if w.weights.len() == n => Ok(w.weights.clone()),
        Some(w) => Err(Error::shape(format!(
            "{} codebook weights for {n} codebooks",
            w.weights.len()
        ))),
    }
}

/// Weighted CE + KL objective. `sims` may be `None` only when `cfg.w_kl == 0`,
/// in which case the KL term is skipped entirely.
pub fn combined_loss(
    probs: &[Vec<f64>],
    targets: &TargetSequence,
    sims: Option<&[Vec<f64>]>,
    masked: &[bool],
    cfg: &LossConfig,
    weights: Option<&CodebookWeights>,
) -> Result<LossReport> {
    let n = probs.len();
    let w = resolve_weights(weights, n)?;
    let ce = ce_loss(probs, targets, masked, cfg.epsilon)?;
    let kl = if cfg.uses_kl() {
        let sims = sims.ok_or_else(|| Error::invalid("KL weight is non-zero but no similarity distributions given"))?;
        kl_loss(probs, sims, masked, cfg.epsilon)?
    } else {
        vec![0.0; n]
    };
    let weighted_mean = |xs: &[f64]| xs.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() / n as f64;
    let mut total = cfg.w_ce * weighted_mean(&ce);
    if cfg.uses_kl() {
        total += cfg.w_kl * weighted_mean(&kl);
    }
    Ok(LossReport {
        ce_per_codebook: ce,
        kl_per_codebook: kl,
        applied_weights: w,
        total,
        masked_positions: masked.iter().filter(|&&f| f).count(),
    })
}

/// Gradient of [`combined_loss`]'s total with respect to the pre-softmax
/// logits that produced `probs`. Unmasked positions get exactly zero.
pub fn combined_loss_grad(
    probs: &[Vec<f64>],
    targets: &TargetSequence,
    sims: Option<&[Vec<f64>]>,
    masked: &[bool],
    cfg: &LossConfig,
    weights: Option<&CodebookWeights>,
) -> Result<Vec<Vec<f64>>> {
    let n = probs.len();
    let positions = masked.len();
    let v = vocab(probs, positions)?;
    check_shapes(probs, positions, v, masked)?;
    let w = resolve_weights(weights, n)?;
    let m = masked.iter().filter(|&&f| f).count();
    let mut grads: Vec<Vec<f64>> = probs.iter().map(|p| vec![0.0; p.len()]).collect();
    if m == 0 {
        return Ok(grads);
    }
    let sims = if cfg.uses_kl() {
        let s = sims.ok_or_else(|| Error::invalid("KL weight is non-zero but no similarity distributions given"))?;
        check_shapes(s, positions, v, masked)?;
        Some(s)
    } else {
        None
    };
    let eps = cfg.epsilon;
    let mut dp = vec![0.0; v];
    for k in 0..n {
        let c_ce = cfg.w_ce * w[k] / (n * m) as f64;
        let c_kl = cfg.w_kl * w[k] / (n * m) as f64;
        for t in (0..positions).filter(|&t| masked[t]) {
            let p = &probs[k][t * v..(t + 1) * v];
            dp.iter_mut().for_each(|g| *g = 0.0);
            let y = targets.indices[k][t] as usize;
            if p[y] > eps {
                dp[y] -= c_ce / p[y];
            }
            if let Some(s) = sims {
                let d = &s[k][t * v..(t + 1) * v];
                for i in 0..v {
                    dp[i] += c_kl * (((p[i] + eps) / (d[i] + eps)).ln() + p[i] / (p[i] + eps));
                }
            }
            let inner: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            let g = &mut grads[k][t * v..(t + 1) * v];
            for i in 0..v {
                g[i] = p[i] * (dp[i] - inner);
            }
        }
    }
    Ok(grads)
}

/// Correct masked predictions per codebook, and the masked position count.
pub fn masked_hits(probs: &[Vec<f64>], targets: &TargetSequence, masked: &[bool]) -> (Vec<usize>, usize) {
    let positions = masked.len();
    let m = masked.iter().filter(|&&f| f).count();
    let hits = probs
        .iter()
        .zip(&targets.indices)
        .map(|(p, ys)| {
            if positions == 0 {
                return 0;
            }
            let v = p.len() / positions;
            (0..positions)
                .filter(|&t| masked[t] && argmax_first(&p[t * v..(t + 1) * v]) == ys[t] as usize)
                .count()
        })
        .collect();
    (hits, m)
}
