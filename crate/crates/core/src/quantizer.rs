//! Frozen random-projection quantizers.
//!
//! A bank holds `N` independent (projection, codebook) pairs. Consecutive
//! normalized frames are stacked `S` at a time, projected to `d` dims, and
//! labeled with the codebook row of highest cosine similarity.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::rng;

/// Everything needed to regenerate a bank bit-for-bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankSpec {
    pub seed: u64,
    pub n_codebooks: usize,
    pub codebook_size: usize,
    pub codebook_dim: usize,
    pub stack_factor: usize,
    pub input_dim: usize,
}

impl BankSpec {
    /// Single 8192 × 16 codebook.
    pub fn baseline(seed: u64) -> Self {
        Self {
            seed,
            n_codebooks: 1,
            codebook_size: 8192,
            codebook_dim: 16,
            stack_factor: 4,
            input_dim: 80,
        }
    }

    /// Single 10240 × 32 codebook.
    pub fn best_single(seed: u64) -> Self {
        Self {
            codebook_size: 10240,
            codebook_dim: 32,
            ..Self::baseline(seed)
        }
    }

    pub fn stacked_dim(&self) -> usize {
        self.stack_factor * self.input_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_codebooks == 0
            || self.codebook_size == 0
            || self.codebook_dim == 0
            || self.stack_factor == 0
            || self.input_dim == 0
        {
            return Err(Error::invalid(format!("quantizer dimensions must all be positive: {self:?}")));
        }
        if self.codebook_size > u32::MAX as usize {
            return Err(Error::invalid("codebook size exceeds u32 index range"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerBank {
    spec: BankSpec,
    /// Per codebook: `(S * input_dim) × d`, row-major.
    projections: Vec<Vec<f64>>,
    /// Per codebook: `V × d`, row-major, unit-norm rows.
    codebooks: Vec<Vec<f64>>,
}

/// Discrete targets, one stream per codebook, each of length `frames`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSequence {
    pub indices: Vec<Vec<u32>>,
    pub frames: usize,
}

/// Projected stacked frames: per codebook a `frames × dim` row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Projected {
    pub data: Vec<Vec<f64>>,
    pub frames: usize,
    pub dim: usize,
}

impl Projected {
    pub fn row(&self, n: usize, t: usize) -> &[f64] {
        &self.data[n][t * self.dim..(t + 1) * self.dim]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl QuantizerBank {
    pub fn new(spec: BankSpec) -> Result<Self> {
        spec.validate()?;
        let (rows, d, v) = (spec.stacked_dim(), spec.codebook_dim, spec.codebook_size);
        let bound = (6.0 / (rows + d) as f64).sqrt();
        let xavier = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let mut projections = Vec::with_capacity(spec.n_codebooks);
        let mut codebooks = Vec::with_capacity(spec.n_codebooks);
        for n in 0..spec.n_codebooks {
            let mut r = rng::stream(spec.seed, &[rng::TAG_BANK, spec.n_codebooks as u64, n as u64]);
            projections.push((0..rows * d).map(|_| xavier.sample(&mut r)).collect());
            let mut cb: Vec<f64> = (0..v * d).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
            for row in cb.chunks_exact_mut(d) {
                let norm = dot(row, row).sqrt();
                row.iter_mut().for_each(|x| *x /= norm);
            }
            codebooks.push(cb);
        }
        Ok(Self {
            spec,
            projections,
            codebooks,
        })
    }

    pub fn spec(&self) -> &BankSpec {
        &self.spec
    }

    pub fn n_codebooks(&self) -> usize {
        self.spec.n_codebooks
    }

    pub fn codebook_size(&self) -> usize {
        self.spec.codebook_size
    }

    pub fn codebook_row(&self, n: usize, j: usize) -> &[f64] {
        let d = self.spec.codebook_dim;
        &self.codebooks[n][j * d..(j + 1) * d]
    }

    pub fn projection(&self, n: usize) -> &[f64] {
        &self.projections[n]
    }

    /// SHA-256 over all matrices as little-endian f64 bytes.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for m in self.projections.iter().chain(&self.codebooks) {
            for v in m {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Number of target positions for `frames` input frames.
    pub fn target_len(&self, frames: usize) -> usize {
        frames / self.spec.stack_factor
    }

    /// Stacks and projects `seq`; trailing frames that do not fill a stack are dropped.
    pub fn project(&self, seq: &FeatureSequence) -> Result<Projected> {
        if seq.dim != self.spec.input_dim {
            return Err(Error::shape(format!(
                "quantizer expects {}-dim frames, got {}",
                self.spec.input_dim, seq.dim
            )));
        }
        let s = self.spec.stack_factor;
        if seq.frames < s {
            return Err(Error::invalid(format!(
                "{} frames is fewer than the stack factor {s}",
                seq.frames
            )));
        }
        let frames = seq.frames / s;
        let (rows, d) = (self.spec.stacked_dim(), self.spec.codebook_dim);
        let data = self
            .projections
            .iter()
            .map(|a| {
                let mut out = vec![0.0; frames * d];
                for (t, o) in out.chunks_exact_mut(d).enumerate() {
                    let stacked = &seq.data[t * rows..(t + 1) * rows];
                    for (x, arow) in stacked.iter().zip(a.chunks_exact(d)) {
                        o.iter_mut().zip(arow).for_each(|(acc, w)| *acc += x * w);
                    }
                }
                out
            })
            .collect();
        Ok(Projected { data, frames, dim: d })
    }

    /// Cosine similarity of `query` against every row of codebook `n`.
    pub fn cosine_row(&self, n: usize, query: &[f64], out: &mut [f64]) {
        let qn = dot(query, query).sqrt();
        let d = self.spec.codebook_dim;
        for (o, c) in out.iter_mut().zip(self.codebooks[n].chunks_exact(d)) {
            *o = if qn > 0.0 { dot(query, c) / qn } else { 0.0 };
        }
    }

    /// Index of the most cosine-similar row; ties resolve to the lowest index.
    pub fn nearest(&self, n: usize, query: &[f64]) -> u32 {
        let mut sims = vec![0.0; self.spec.codebook_size];
        self.cosine_row(n, query, &mut sims);
        argmax_first(&sims) as u32
    }

    pub fn quantize(&self, seq: &FeatureSequence) -> Result<(TargetSequence, Projected)> {
        let projected = self.project(seq)?;
        let targets = self.targets_of(&projected);
        Ok((targets, projected))
    }

    pub fn targets_of(&self, projected: &Projected) -> TargetSequence {
        let indices = (0..self.spec.n_codebooks)
            .map(|n| (0..projected.frames).map(|t| self.nearest(n, projected.row(n, t))).collect())
            .collect();
        TargetSequence {
            indices,
            frames: projected.frames,
        }
    }

    /// Softmax of cosine similarities / `temperature`, per codebook a
    /// `frames × V` row-major matrix.
    pub fn similarity_distribution(&self, projected: &Projected, temperature: f64) -> Result<Vec<Vec<f64>>> {
        let positions: Vec<usize> = (0..projected.frames).collect();
        self.similarity_distribution_at(projected, temperature, &positions)
    }

    /// As [`similarity_distribution`](Self::similarity_distribution), but only
    /// rows listed in `positions` are filled; other rows are left uniform.
    pub fn similarity_distribution_at(
        &self,
        projected: &Projected,
        temperature: f64,
        positions: &[usize],
    ) -> Result<Vec<Vec<f64>>> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
        }
        let v = self.spec.codebook_size;
        Ok((0..self.spec.n_codebooks)
            .map(|n| {
                let mut out = vec![1.0 / v as f64; projected.frames * v];
                for &t in positions {
                    let row = &mut out[t * v..(t + 1) * v];
                    self.cosine_row(n, projected.row(n, t), row);
                    row.iter_mut().for_each(|s| *s /= temperature);
                    softmax_in_place(row);
                }
                out
            })
            .collect())
    }
}

pub(crate) fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = j;
        }
    }
    best
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

/// Shannon entropy (nats) of the empirical distribution of `indices` over `v` symbols.
pub fn token_entropy(indices: impl IntoIterator<Item = u32>, v: usize) -> f64 {
    let mut counts = vec![0u64; v];
    let mut total = 0u64;
    for i in indices {
        counts[i as usize] += 1;
        total += 1;
    }
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}
