//! Deterministic masked-prediction pre-training.
//!
//! Every random draw is derived from `(seed, step, utterance)`, so a run can
//! be resumed from any checkpoint without storing generator state.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod metrics;
pub mod optim;

use std::path::{Path, PathBuf};
use std::time::Instant;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use config::{MaskingConfig, Preset, RunConfig, TrainConfig};
pub use data::{Dataset, Utterance};
pub use metrics::{read_metrics, MetricsLog, MetricsRecord, Phase};
pub use optim::{clip_global_norm, noam_lr, AdamConfig, AdamState};

use crate::audio::{load_corpus, ManifestEntry, Waveform};
use crate::clustering::{codebook_weights, ClusterModel, CodebookWeights};
use crate::encoder::{build_encoder, Encoder, Mode};
use crate::error::{Error, Result};
use crate::features::NormStats;
use crate::losses::{combined_loss, combined_loss_grad, masked_hits, LossReport};
use crate::masking::{apply_mask, project_mask, sample_mask};
use crate::quantizer::QuantizerBank;
use crate::rng;

pub struct TrainState {
    pub encoder: Encoder<f32>,
    pub adam: AdamState<f32>,
    /// Number of updates applied so far.
    pub step: u64,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// Batch mean of the per-utterance reports.
    pub report: LossReport,
    pub per_utterance: Vec<LossReport>,
    pub accuracy: Vec<f64>,
    pub learning_rate: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: LossReport,
    pub per_utterance: Vec<LossReport>,
    pub accuracy: Vec<f64>,
}

/// SHA-256 digests of everything training must leave untouched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrozenChecksums {
    pub bank: [u8; 32],
    pub norm_stats: [u8; 32],
    pub centroids: Option<[u8; 32]>,
}

pub struct Trainer {
    config: RunConfig,
    bank: QuantizerBank,
    data: Dataset,
    cluster_model: Option<ClusterModel>,
    buckets: Vec<Vec<usize>>,
}

struct UttResult {
    report: LossReport,
    hits: Vec<usize>,
    masked: usize,
    upstream: Vec<Vec<f64>>,
}

impl Trainer {
    pub fn new(
        config: RunConfig,
        entries: &[ManifestEntry],
        waves: &[Waveform],
        cluster_model: Option<ClusterModel>,
        stored_stats: Option<&NormStats>,
    ) -> Result<Self> {
        config.validate()?;
        let bank = QuantizerBank::new(config.bank)?;
        let data = Dataset::prepare(&config, entries, waves, &bank, cluster_model.as_ref(), stored_stats)?;
        if data.train.is_empty() {
            return Err(Error::invalid("no training utterances after the validation split"));
        }
        let buckets = data::length_buckets(&data.train, config.train.batch_utterances);
        Ok(Self {
            config,
            bank,
            data,
            cluster_model,
            buckets,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn bank(&self) -> &QuantizerBank {
        &self.bank
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn cluster_model(&self) -> Option<&ClusterModel> {
        self.cluster_model.as_ref()
    }

    pub fn frozen_checksums(&self) -> FrozenChecksums {
        use sha2::{Digest, Sha256};
        FrozenChecksums {
            bank: self.bank.checksum(),
            norm_stats: Sha256::digest(self.data.norm_stats.to_bytes()).into(),
            centroids: self.cluster_model.as_ref().map(ClusterModel::centroid_checksum),
        }
    }

    pub fn init_state(&self) -> Result<TrainState> {
        let encoder = build_encoder::<f32>(&self.config.encoder)?;
        let adam = AdamState::zeros_like(encoder.params());
        Ok(TrainState { encoder, adam, step: 0 })
    }

    /// Training-set indices of the batch used at (0-based) step `step`.
    pub fn batch_indices(&self, step: u64) -> &[usize] {
        let n = self.buckets.len() as u64;
        let order = data::epoch_order(self.buckets.len(), self.config.train.seed, step / n);
        &self.buckets[order[(step % n) as usize]]
    }

    fn weights_for(&self, u: &Utterance) -> Result<Option<CodebookWeights>> {
        let t = &self.config.train;
        if !t.loss.cluster_weighting {
            return Ok(None);
        }
        let c = u
            .cluster
            .ok_or_else(|| Error::Config(format!("utterance `{}` has no cluster id", u.id)))?;
        codebook_weights(c, self.bank.n_codebooks(), t.primary_weight, t.secondary_weight).map(Some)
    }

    /// Masks one utterance with `mask_seed`, runs the encoder and evaluates the
    /// objective (and its gradient with respect to the logits).
    fn run_utterance(
        &self,
        encoder: &Encoder<f32>,
        u: &Utterance,
        mask_seed: u64,
        mode: Mode,
        need_grad: bool,
    ) -> Result<(UttResult, crate::encoder::ForwardOutput<f32>)> {
        let m = &self.config.masking;
        let t = &self.config.train;
        let mask = sample_mask(u.features.frames, m.p_start, m.span, mask_seed)?;
        let masked_feats = apply_mask(&u.features, &mask, mask_seed)?;
        let positions = u.targets.frames;
        let target_mask = project_mask(&mask, positions, self.bank.spec().stack_factor, m.target_rule);
        let out = encoder.forward(&[&masked_feats], mode)?;
        let probs = &out.probs[0];
        let sims = if t.loss.uses_kl() {
            let at: Vec<usize> = (0..positions).filter(|&p| target_mask[p]).collect();
            Some(self.bank.similarity_distribution_at(&u.projected, t.kl_temperature, &at)?)
        } else {
            None
        };
        let weights = self.weights_for(u)?;
        let report = combined_loss(probs, &u.targets, sims.as_deref(), &target_mask, &t.loss, weights.as_ref())?;
        let upstream = if need_grad {
            combined_loss_grad(probs, &u.targets, sims.as_deref(), &target_mask, &t.loss, weights.as_ref())?
        } else {
            Vec::new()
        };
        let (hits, masked) = masked_hits(probs, &u.targets, &target_mask);
        Ok((
            UttResult {
                report,
                hits,
                masked,
                upstream,
            },
            out,
        ))
    }

    /// One optimizer update on the training utterances `batch`.
    pub fn pretrain_step(&self, state: &mut TrainState, batch: &[usize]) -> Result<StepOutcome> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let t = &self.config.train;
        let step = state.step;
        let scale = 1.0 / batch.len() as f64;
        let mut grads = None;
        let mut reports = Vec::with_capacity(batch.len());
        let n_cb = self.bank.n_codebooks();
        let (mut hits, mut masked) = (vec![0usize; n_cb], 0usize);
        for &i in batch {
            let u = self
                .data
                .train
                .get(i)
                .ok_or_else(|| Error::invalid(format!("batch index {i} out of range")))?;
            let mask_seed = rng::derive_seed(t.seed, &[rng::TAG_MASK, step, i as u64]);
            let dropout_seed = rng::derive_seed(t.seed, &[rng::TAG_DROPOUT, step, i as u64]);
            let (mut r, out) = self.run_utterance(&state.encoder, u, mask_seed, Mode::Train { dropout_seed }, true)?;
            r.upstream.iter_mut().flatten().for_each(|g| *g *= scale);
            let g = state.encoder.backward(&out, &[r.upstream])?;
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => crate::encoder::Gradients::add_assign(acc, &g),
            }
            hits.iter_mut().zip(&r.hits).for_each(|(a, b)| *a += b);
            masked += r.masked;
            reports.push(r.report);
        }
        let report = LossReport::mean(&reports).expect("non-empty batch");
        let mut grads = grads.expect("non-empty batch");
        let grad_norm = clip_global_norm(&mut grads, t.grad_clip_norm);
        if !report.total.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                ids: batch.iter().map(|&i| self.data.train[i].id.clone()).collect(),
            });
        }
        let lr = noam_lr(step + 1, t.lr_peak, t.warmup_steps);
        state.adam.step(&t.adam, step + 1, lr, state.encoder.params_mut(), &grads);
        state.step += 1;
        Ok(StepOutcome {
            report,
            per_utterance: reports,
            accuracy: accuracy(&hits, masked),
            learning_rate: lr,
            grad_norm,
        })
    }

    /// Loss and accuracy over `utts` with dropout off and masks fixed by the
    /// run seed and each utterance's position, so repeated calls agree.
    pub fn evaluate(&self, state: &TrainState, utts: &[Utterance]) -> Result<Evaluation> {
        if utts.is_empty() {
            return Err(Error::invalid("evaluation set is empty"));
        }
        let seed = self.config.train.seed;
        let mut reports = Vec::with_capacity(utts.len());
        let (mut hits, mut masked) = (vec![0usize; self.bank.n_codebooks()], 0usize);
        for (j, u) in utts.iter().enumerate() {
            let mask_seed = rng::derive_seed(seed, &[rng::TAG_VALIDATE, j as u64]);
            let (r, _) = self.run_utterance(&state.encoder, u, mask_seed, Mode::Eval, false)?;
            hits.iter_mut().zip(&r.hits).for_each(|(a, b)| *a += b);
            masked += r.masked;
            reports.push(r.report);
        }
        Ok(Evaluation {
            report: LossReport::mean(&reports).expect("non-empty set"),
            per_utterance: reports,
            accuracy: accuracy(&hits, masked),
        })
    }

    pub fn validate(&self, state: &TrainState) -> Result<Evaluation> {
        self.evaluate(state, &self.data.val)
    }

    pub fn checkpoint(&self, state: &TrainState) -> Checkpoint {
        let params = state.encoder.params();
        Checkpoint {
            meta: CheckpointMeta {
                format_version: 1,
                config: self.config.clone(),
                step: state.step,
                bank: *self.bank.spec(),
                bank_checksum: checkpoint::hex(&self.bank.checksum()),
                norm_stats: self.data.norm_stats.clone(),
                cluster_model: self.cluster_model.clone(),
            },
            params: params.names().iter().cloned().zip(params.tensors().iter().cloned()).collect(),
            adam_m: state.adam.m.clone(),
            adam_v: state.adam.v.clone(),
        }
    }

    pub fn restore(&self, ckpt: &Checkpoint) -> Result<TrainState> {
        if ckpt.meta.bank_checksum != checkpoint::hex(&self.bank.checksum()) {
            return Err(Error::Checkpoint("quantizer bank differs from the one the checkpoint was trained with".into()));
        }
        let mut encoder = build_encoder::<f32>(&self.config.encoder)?;
        encoder.load_tensors(ckpt.params.clone())?;
        let adam = AdamState {
            m: ckpt.adam_m.clone(),
            v: ckpt.adam_v.clone(),
        };
        let shapes_match = |ms: &[crate::encoder::Mat<f32>]| {
            ms.len() == encoder.params().len()
                && ms.iter().zip(encoder.params().tensors()).all(|(a, b)| (a.rows, a.cols) == (b.rows, b.cols))
        };
        if !shapes_match(&adam.m) || !shapes_match(&adam.v) {
            return Err(Error::Checkpoint("optimizer state shapes do not match the encoder".into()));
        }
        Ok(TrainState {
            encoder,
            adam,
            step: ckpt.meta.step,
        })
    }
}

fn accuracy(hits: &[usize], masked: usize) -> Vec<f64> {
    hits.iter()
        .map(|&h| if masked == 0 { 0.0 } else { h as f64 / masked as f64 })
        .collect()
}

/// Files written by [`run_pretraining`] under its output directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.json")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.brq")
    }

    pub fn step_checkpoint(&self, step: u64) -> PathBuf {
        self.dir.join(format!("step-{step:08}.brq"))
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub steps: u64,
    pub last_train: Option<MetricsRecord>,
    pub last_val: Option<MetricsRecord>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

fn validates_at(cfg: &TrainConfig, completed: u64) -> bool {
    cfg.validate_every > 0 && (completed == 0 || completed % cfg.validate_every == 0 || completed == cfg.steps)
}

/// Configs must agree on everything except the step budget to resume.
fn check_resumable(stored: &RunConfig, cfg: &RunConfig) -> Result<()> {
    let mut a = stored.clone();
    a.train.steps = cfg.train.steps;
    if &a != cfg {
        return Err(Error::Config(
            "checkpoint was written with a different configuration (only `steps` may change on resume)".into(),
        ));
    }
    Ok(())
}

/// Trains `cfg.train.steps` updates on the corpus in `manifest`, writing the
/// metrics log, periodic checkpoints and `final.brq` into `out_dir`. With
/// `resume`, continues from that checkpoint and rewrites the log so that it
/// matches an uninterrupted run.
pub fn run_pretraining(
    cfg: &RunConfig,
    manifest: &Path,
    cluster_model: Option<ClusterModel>,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<RunSummary> {
    run_pretraining_with(cfg, manifest, cluster_model, out_dir, resume, &mut |_| {})
}

/// [`run_pretraining`] with a callback invoked for every metrics record written.
pub fn run_pretraining_with(
    cfg: &RunConfig,
    manifest: &Path,
    cluster_model: Option<ClusterModel>,
    out_dir: &Path,
    resume: Option<&Path>,
    progress: &mut dyn FnMut(&MetricsRecord),
) -> Result<RunSummary> {
    cfg.validate()?;
    let ckpt = resume.map(Checkpoint::load).transpose()?;
    if let Some(c) = &ckpt {
        check_resumable(&c.meta.config, cfg)?;
        if c.meta.step > cfg.train.steps {
            return Err(Error::Config(format!(
                "checkpoint is at step {}, beyond the requested {} steps",
                c.meta.step, cfg.train.steps
            )));
        }
    }
    let (entries, waves) = load_corpus(manifest)?;
    let cluster_model = match &ckpt {
        Some(c) => c.meta.cluster_model.clone().or(cluster_model),
        None => cluster_model,
    };
    let trainer = Trainer::new(
        cfg.clone(),
        &entries,
        &waves,
        cluster_model,
        ckpt.as_ref().map(|c| &c.meta.norm_stats),
    )?;
    let mut state = match &ckpt {
        Some(c) => trainer.restore(c)?,
        None => trainer.init_state()?,
    };

    std::fs::create_dir_all(out_dir)?;
    let paths = RunPaths::new(out_dir);
    std::fs::write(paths.config(), cfg.to_json())?;
    let t = &cfg.train;
    let k = state.step;
    let mut log = if ckpt.is_some() {
        MetricsLog::resume(paths.metrics(), |r| match r.phase {
            Phase::Train => r.step < k,
            Phase::Val => r.step < k || (r.step == k && validates_at(&TrainConfig { steps: u64::MAX, ..t.clone() }, k)),
        })?
    } else {
        MetricsLog::create(paths.metrics())?
    };

    let mut last_train = None;
    let mut last_val = None;
    let val_record = |trainer: &Trainer, state: &TrainState| -> Result<Option<MetricsRecord>> {
        if trainer.data.val.is_empty() {
            return Ok(None);
        }
        let ev = trainer.validate(state)?;
        let lr = noam_lr(state.step.max(1), t.lr_peak, t.warmup_steps);
        Ok(Some(MetricsRecord::new(Phase::Val, state.step, lr, &ev.report, ev.accuracy)))
    };
    if ckpt.is_none() && validates_at(t, 0) {
        if let Some(r) = val_record(&trainer, &state)? {
            log.append(&r)?;
            progress(&r);
            last_val = Some(r);
        }
    }
    while state.step < t.steps {
        let started = Instant::now();
        let step = state.step;
        let batch = trainer.batch_indices(step).to_vec();
        let out = trainer.pretrain_step(&mut state, &batch)?;
        let mut rec = MetricsRecord::new(Phase::Train, step, out.learning_rate, &out.report, out.accuracy);
        rec.grad_norm = Some(out.grad_norm);
        if t.record_wall_time {
            rec.wall_ms = Some(started.elapsed().as_millis() as u64);
        }
        log.append(&rec)?;
        progress(&rec);
        last_train = Some(rec);
        if validates_at(t, state.step) {
            if let Some(r) = val_record(&trainer, &state)? {
                log.append(&r)?;
                progress(&r);
                last_val = Some(r);
            }
        }
        if t.checkpoint_every > 0 && state.step % t.checkpoint_every == 0 {
            trainer.checkpoint(&state).save(paths.step_checkpoint(state.step))?;
        }
        log.flush()?;
    }
    log.flush()?;
    let final_path = paths.final_checkpoint();
    trainer.checkpoint(&state).save(&final_path)?;
    Ok(RunSummary {
        steps: state.step,
        last_train,
        last_val,
        checkpoint: final_path,
        metrics: paths.metrics(),
    })
}

/// Evaluates a checkpoint on a corpus using the checkpoint's stored
/// normalization statistics. All utterances are evaluated (no split).
pub fn validate_checkpoint(ckpt: &Checkpoint, manifest: &Path) -> Result<Evaluation> {
    let (entries, waves) = load_corpus(manifest)?;
    let mut cfg = ckpt.meta.config.clone();
    cfg.train.val_fraction = 0.0;
    let trainer = Trainer::new(cfg, &entries, &waves, ckpt.meta.cluster_model.clone(), Some(&ckpt.meta.norm_stats))?;
    let state = trainer.restore(ckpt)?;
    trainer.evaluate(&state, &trainer.data.train)
}
