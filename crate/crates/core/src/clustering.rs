//! Utterance clustering on summary descriptors and cluster-specific codebook weights.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{NormStats, UtteranceSummary};
use crate::rng;

pub const DEFAULT_PRIMARY_WEIGHT: f64 = 2.0;
pub const DEFAULT_SECONDARY_WEIGHT: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub seed: u64,
    pub dim: usize,
    pub feature_stats: NormStats,
    /// `k × dim`, row-major, in standardized space.
    pub centroids: Vec<f64>,
    pub assignments: BTreeMap<String, usize>,
    /// Inertia after each assignment step.
    #[serde(default)]
    pub inertia: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[f64], dim: usize, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, r: &mut impl Rng) -> Vec<f64> {
    let dim = points[0].len();
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(&points[r.random_range(0..points.len())]);
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = r.random::<f64>() * total;
            let mut idx = d2.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            // Rounding can land on a zero-weight point; fall back to the farthest.
            if d2[idx] == 0.0 {
                idx = (0..d2.len()).max_by(|&a, &b| d2[a].total_cmp(&d2[b])).unwrap_or(0);
            }
            idx
        } else {
            r.random_range(0..points.len())
        };
        centroids.extend_from_slice(&points[pick]);
        let c = &centroids[centroids.len() - dim..];
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, c));
        }
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding on standardized summaries.
pub fn fit_kmeans(summaries: &[UtteranceSummary], k: usize, seed: u64, params: KMeansParams) -> Result<ClusterModel> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if summaries.len() < k {
        return Err(Error::invalid(format!(
            "{} utterances cannot form {k} clusters",
            summaries.len()
        )));
    }
    let dim = summaries[0].vector.len();
    if dim == 0 || summaries.iter().any(|s| s.vector.len() != dim) {
        return Err(Error::shape("summary vectors must share one non-zero dimension"));
    }
    let raw: Vec<Vec<f64>> = summaries.iter().map(|s| s.vector.clone()).collect();
    let stats = NormStats::from_rows(&raw)?;
    let points: Vec<Vec<f64>> = raw
        .iter()
        .map(|x| {
            let mut o = vec![0.0; dim];
            stats.apply_row(x, &mut o);
            o
        })
        .collect();

    let mut r = rng::stream(seed, &[rng::TAG_KMEANS]);
    let mut centroids = kmeans_pp(&points, k, &mut r);
    let mut labels = vec![0usize; points.len()];
    let mut inertia = Vec::new();
    for _ in 0..params.max_iters.max(1) {
        let mut dists = vec![0.0; points.len()];
        for ((l, d), p) in labels.iter_mut().zip(&mut dists).zip(&points) {
            (*l, *d) = nearest(&centroids, dim, p);
        }
        inertia.push(dists.iter().sum());

        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            sums[l * dim..(l + 1) * dim].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        let mut next = centroids.clone();
        for j in 0..k {
            let c = &mut next[j * dim..(j + 1) * dim];
            if counts[j] > 0 {
                c.iter_mut()
                    .zip(&sums[j * dim..(j + 1) * dim])
                    .for_each(|(c, s)| *c = s / counts[j] as f64);
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                // Reseed to the point farthest from its own centroid.
                let far = (0..points.len())
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]))
                    .unwrap_or(0);
                next[j * dim..(j + 1) * dim].copy_from_slice(&points[far]);
                dists[far] = 0.0;
            }
        }
        let shift = centroids
            .chunks_exact(dim)
            .zip(next.chunks_exact(dim))
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < params.tol {
            break;
        }
    }
    // Final assignment under the returned centroids.
    let mut final_inertia = 0.0;
    for (l, p) in labels.iter_mut().zip(&points) {
        let (j, d) = nearest(&centroids, dim, p);
        *l = j;
        final_inertia += d;
    }
    inertia.push(final_inertia);

    Ok(ClusterModel {
        k,
        seed,
        dim,
        feature_stats: stats,
        centroids,
        assignments: summaries.iter().map(|s| s.id.clone()).zip(labels).collect(),
        inertia,
    })
}

impl ClusterModel {
    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    pub fn standardize(&self, vector: &[f64]) -> Result<Vec<f64>> {
        if vector.len() != self.dim {
            return Err(Error::shape(format!(
                "summary has {} dims, model expects {}",
                vector.len(),
                self.dim
            )));
        }
        let mut o = vec![0.0; self.dim];
        self.feature_stats.apply_row(vector, &mut o);
        Ok(o)
    }

    /// Nearest centroid in standardized space; ties go to the lowest index.
    pub fn assign(&self, summary: &UtteranceSummary) -> Result<usize> {
        Ok(self.assign_standardized(&self.standardize(&summary.vector)?))
    }

    pub fn assign_standardized(&self, x: &[f64]) -> usize {
        nearest(&self.centroids, self.dim, x).0
    }

    pub fn centroid_checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for v in &self.centroids {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookWeights {
    pub weights: Vec<f64>,
    pub primary: Option<usize>,
}

impl CodebookWeights {
    pub fn uniform(n_codebooks: usize) -> Self {
        Self {
            weights: vec![1.0; n_codebooks],
            primary: None,
        }
    }
}

/// Primary weight on the utterance's own codebook, secondary elsewhere,
/// rescaled to sum to `n_codebooks`.
pub fn codebook_weights(cluster: usize, n_codebooks: usize, w_p: f64, w_s: f64) -> Result<CodebookWeights> {
    if cluster >= n_codebooks {
        return Err(Error::invalid(format!(
            "cluster {cluster} out of range for {n_codebooks} codebooks"
        )));
    }
    if !(w_s > 0.0) || !w_p.is_finite() || !w_s.is_finite() {
        return Err(Error::invalid(format!("weights must be positive and finite, got ({w_p}, {w_s})")));
    }
    if w_p < 2.0 * w_s {
        return Err(Error::invalid(format!(
            "primary weight {w_p} must be at least twice the secondary weight {w_s}"
        )));
    }
    let raw_sum = w_p + w_s * (n_codebooks - 1) as f64;
    let scale = n_codebooks as f64 / raw_sum;
    let weights = (0..n_codebooks)
        .map(|j| if j == cluster { w_p * scale } else { w_s * scale })
        .collect();
    Ok(CodebookWeights {
        weights,
        primary: Some(cluster),
    })
}
