//! `brq` command-line interface.
//!
//! Exit codes: 0 success, 1 user error (bad arguments or inputs), 2 internal error.
//! Data goes to files or stdout; diagnostics go to stderr.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::audio::{load_corpus, synth_corpus, write_corpus, write_manifest, CorpusRecipe, SignalFamily, DEFAULT_SAMPLE_RATE};
use crate::clustering::{fit_kmeans, ClusterModel, KMeansParams};
use crate::error::{Error, Result};
use crate::features::{log_mel, normalize_global, utterance_summary, FrameConfig, NormStats, SummaryConfig};
use crate::masking::sample_mask;
use crate::quantizer::{token_entropy, BankSpec, QuantizerBank};
use crate::trainer::{run_pretraining_with, validate_checkpoint, Checkpoint, Phase, Preset, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "brq", version, about = "Masked-prediction speech pre-training with random-projection quantizers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus of WAV files and a manifest.
    Synth(SynthArgs),
    /// Fit k-means on utterance summaries and annotate the manifest with cluster ids.
    Cluster(ClusterArgs),
    /// Run pre-training from a preset or config file.
    Pretrain(PretrainArgs),
    /// Evaluate a checkpoint on a corpus.
    Validate(ValidateArgs),
    /// Export quantizer target sequences as JSON Lines.
    Quantize(QuantizeArgs),
    /// Token utilization/entropy and mask coverage reports.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory for WAV files and manifest.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Number of utterances.
    #[arg(long, default_value_t = 20)]
    n: usize,
    /// Duration of each utterance in seconds.
    #[arg(long, default_value_t = 2.0)]
    duration: f64,
    /// Comma-separated signal families (tone[:hz], harmonic[:f0], noise[:lo-hi], pattern), cycled over utterances.
    #[arg(long, default_value = "tone,harmonic,noise,pattern")]
    families: String,
    /// Sample rate in Hz.
    #[arg(long, default_value_t = DEFAULT_SAMPLE_RATE)]
    sample_rate: u32,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ClusterArgs {
    /// Input manifest (JSON Lines).
    #[arg(long)]
    manifest: PathBuf,
    /// Number of clusters; must equal the codebook count used at pre-training.
    #[arg(long)]
    k: usize,
    /// Random seed for k-means++ initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the cluster model JSON.
    #[arg(long)]
    out_model: PathBuf,
    /// Where to write the manifest annotated with cluster ids.
    #[arg(long)]
    out_manifest: PathBuf,
    /// Maximum Lloyd iterations.
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    /// Training manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory (metrics.jsonl, config.json, checkpoints).
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON config file; flags below override its keys.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named configuration: baseline or proposed.
    #[arg(long)]
    preset: Option<String>,
    /// Cluster model from `brq cluster` (needed for cluster weighting unless the manifest carries ids).
    #[arg(long)]
    cluster_model: Option<PathBuf>,
    /// Resume from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print the resolved config as JSON and exit.
    #[arg(long)]
    dump_config: bool,
    /// Run seed (quantizer, encoder init, masks, batching).
    #[arg(long)]
    seed: Option<u64>,
    /// Number of optimizer steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Utterances per batch.
    #[arg(long)]
    batch: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Warmup steps.
    #[arg(long)]
    warmup: Option<u64>,
    /// Validate every this many steps (0 disables).
    #[arg(long)]
    validate_every: Option<u64>,
    /// Checkpoint every this many steps (0 keeps only the final one).
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Held-out validation fraction.
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Number of codebooks (and prediction heads).
    #[arg(long)]
    codebooks: Option<usize>,
    /// Codebook size V.
    #[arg(long)]
    vocab: Option<usize>,
    /// Cross-entropy weight.
    #[arg(long)]
    w_ce: Option<f64>,
    /// KL weight.
    #[arg(long)]
    w_kl: Option<f64>,
    /// Enable or disable cluster-specific codebook weighting.
    #[arg(long)]
    cluster_weighting: Option<bool>,
    /// Suppress progress output on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus manifest; every utterance is evaluated.
    #[arg(long)]
    manifest: PathBuf,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct QuantizeArgs {
    /// Corpus manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Output token file (JSON Lines); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use the quantizer and normalization stats stored in this checkpoint.
    #[arg(long, conflicts_with_all = ["codebooks", "vocab", "dim", "seed"])]
    checkpoint: Option<PathBuf>,
    /// Number of codebooks.
    #[arg(long, default_value_t = 1)]
    codebooks: usize,
    /// Codebook size V.
    #[arg(long, default_value_t = 8192)]
    vocab: usize,
    /// Codebook dimension.
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Quantizer seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct StatsArgs {
    /// Token file from `brq quantize`.
    #[arg(long, required_unless_present = "mask")]
    tokens: Option<PathBuf>,
    /// Codebook size (defaults to the `vocab` stored in the token file).
    #[arg(long)]
    vocab: Option<usize>,
    /// Also run the mask coverage Monte-Carlo report.
    #[arg(long)]
    mask: bool,
    /// Span start probability for the mask report.
    #[arg(long, default_value_t = 0.15)]
    p: f64,
    /// Span length for the mask report.
    #[arg(long, default_value_t = 4)]
    span: usize,
    /// Frames per simulated sequence.
    #[arg(long, default_value_t = 10_000)]
    frames: usize,
    /// Number of simulated sequences (seeds 0..n).
    #[arg(long, default_value_t = 200)]
    seeds: u64,
}

/// One line of a token file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenLine {
    pub id: String,
    pub vocab: usize,
    /// `targets[n]` is codebook `n`'s index sequence.
    pub targets: Vec<Vec<u32>>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        // A closed downstream pipe (`brq quantize | head`) is not a failure.
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                1
            } else {
                2
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Cluster(a) => cmd_cluster(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Quantize(a) => cmd_quantize(a),
        Command::Stats(a) => cmd_stats(a),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let families = a
        .families
        .split(',')
        .map(|s| s.trim().parse::<SignalFamily>())
        .collect::<Result<Vec<_>>>()?;
    let recipe = CorpusRecipe {
        n_utterances: a.n,
        duration_s: a.duration,
        families,
        sample_rate_hz: a.sample_rate,
        seed: a.seed,
    };
    let (waves, entries) = synth_corpus(&recipe)?;
    let manifest = write_corpus(&a.out, &waves, &entries)?;
    eprintln!("wrote {} utterances to {}", entries.len(), manifest.display());
    Ok(())
}

fn cmd_cluster(a: ClusterArgs) -> Result<()> {
    let (entries, waves) = load_corpus(&a.manifest)?;
    let frames = FrameConfig::default();
    let scfg = SummaryConfig::default();
    let summaries = waves
        .iter()
        .map(|w| utterance_summary(w, &frames, &scfg))
        .collect::<Result<Vec<_>>>()?;
    let params = KMeansParams {
        max_iters: a.max_iters,
        ..KMeansParams::default()
    };
    let model = fit_kmeans(&summaries, a.k, a.seed, params)?;
    let annotated: Vec<_> = entries
        .into_iter()
        .map(|mut e| {
            e.cluster = model.assignments.get(&e.id).copied();
            e.path = absolute_entry_path(&a.manifest, &a.out_manifest, &e.path);
            e
        })
        .collect();
    model.save(&a.out_model)?;
    write_manifest(&annotated, &a.out_manifest)?;
    let mut sizes = vec![0usize; model.k];
    annotated.iter().filter_map(|e| e.cluster).for_each(|c| sizes[c] += 1);
    eprintln!("k={} cluster sizes {sizes:?}", model.k);
    Ok(())
}

/// Rewrites a manifest-relative audio path so it still resolves from the new manifest's directory.
fn absolute_entry_path(from_manifest: &Path, to_manifest: &Path, path: &str) -> String {
    let p = Path::new(path);
    if p.is_absolute() {
        return path.to_string();
    }
    let src_dir = from_manifest.parent().unwrap_or(Path::new("."));
    let dst_dir = to_manifest.parent().unwrap_or(Path::new("."));
    if src_dir == dst_dir {
        return path.to_string();
    }
    let joined = src_dir.join(p);
    std::path::absolute(&joined).unwrap_or(joined).to_string_lossy().into_owned()
}

fn resolve_config(a: &PretrainArgs) -> Result<RunConfig> {
    let mut cfg = match (&a.config, &a.preset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(name)) => RunConfig::preset(name.parse::<Preset>()?, a.seed.unwrap_or(0)),
        (None, None) => RunConfig::preset(Preset::Baseline, a.seed.unwrap_or(0)),
    };
    if let Some(s) = a.seed {
        cfg.set_seed(s);
    }
    if let Some(n) = a.codebooks {
        cfg.set_codebooks(n);
    }
    if let Some(v) = a.vocab {
        cfg.set_vocab(v);
    }
    let t = &mut cfg.train;
    if let Some(v) = a.steps {
        t.steps = v;
    }
    if let Some(v) = a.batch {
        t.batch_utterances = v;
    }
    if let Some(v) = a.lr {
        t.lr_peak = v;
    }
    if let Some(v) = a.warmup {
        t.warmup_steps = v;
    }
    if let Some(v) = a.validate_every {
        t.validate_every = v;
    }
    if let Some(v) = a.checkpoint_every {
        t.checkpoint_every = v;
    }
    if let Some(v) = a.val_fraction {
        t.val_fraction = v;
    }
    if let Some(v) = a.w_ce {
        t.loss.w_ce = v;
    }
    if let Some(v) = a.w_kl {
        t.loss.w_kl = v;
    }
    if let Some(v) = a.cluster_weighting {
        t.loss.cluster_weighting = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let cfg = resolve_config(&a)?;
    if a.dump_config {
        emit(&cfg.to_json())?;
        return Ok(());
    }
    let manifest = a.manifest.as_ref().ok_or_else(|| Error::invalid("--manifest is required"))?;
    let out = a.out.as_ref().ok_or_else(|| Error::invalid("--out is required"))?;
    if let Some(r) = &a.resume {
        if !r.is_file() {
            return Err(Error::FileNotFound(r.clone()));
        }
    }
    let cluster_model = a.cluster_model.as_ref().map(ClusterModel::load).transpose()?;
    if let Some(m) = &cluster_model {
        if m.k != cfg.bank.n_codebooks {
            return Err(Error::Config(format!(
                "cluster model has k={} but the run uses {} codebooks",
                m.k, cfg.bank.n_codebooks
            )));
        }
    }
    let quiet = a.quiet;
    let mut progress = |r: &crate::trainer::MetricsRecord| {
        if quiet {
            return;
        }
        if r.phase == Phase::Val {
            eprintln!("step {:>6}  val loss {:.4}  acc {:.4}", r.step, r.total, r.mean_accuracy());
        } else if r.step % 50 == 0 {
            eprintln!("step {:>6}  train loss {:.4}  lr {:.3e}", r.step, r.total, r.learning_rate);
        }
    };
    let summary = run_pretraining_with(&cfg, manifest, cluster_model, out, a.resume.as_deref(), &mut progress)?;
    eprintln!(
        "finished {} steps; checkpoint {}; metrics {}",
        summary.steps,
        summary.checkpoint.display(),
        summary.metrics.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct ValidationReport<'a> {
    step: u64,
    utterances: usize,
    report: &'a crate::losses::LossReport,
    accuracy: &'a [f64],
}

fn cmd_validate(a: ValidateArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let ev = validate_checkpoint(&ckpt, &a.manifest)?;
    let rep = ValidationReport {
        step: ckpt.meta.step,
        utterances: ev.per_utterance.len(),
        report: &ev.report,
        accuracy: &ev.accuracy,
    };
    let text = serde_json::to_string_pretty(&rep)?;
    match &a.out {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => emit(&text)?,
    }
    Ok(())
}

fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{text}")?;
    out.flush()?;
    Ok(())
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn cmd_quantize(a: QuantizeArgs) -> Result<()> {
    let (entries, waves) = load_corpus(&a.manifest)?;
    if entries.is_empty() {
        return Err(Error::invalid("manifest is empty"));
    }
    let (spec, frames, stats) = match &a.checkpoint {
        Some(p) => {
            let c = Checkpoint::load(p)?;
            (c.meta.bank, c.meta.config.frames, Some(c.meta.norm_stats))
        }
        None => {
            let spec = BankSpec {
                seed: a.seed,
                n_codebooks: a.codebooks,
                codebook_size: a.vocab,
                codebook_dim: a.dim,
                ..BankSpec::baseline(a.seed)
            };
            (spec, FrameConfig::default(), None)
        }
    };
    let bank = QuantizerBank::new(spec)?;
    let feats = waves.iter().map(|w| log_mel(w, &frames)).collect::<Result<Vec<_>>>()?;
    let stats = match stats {
        Some(s) => s,
        None => NormStats::compute(&feats)?,
    };
    let mut out = output(a.out.as_deref())?;
    for (e, f) in entries.iter().zip(&feats) {
        let (targets, _) = bank.quantize(&normalize_global(f, Some(&stats))?)?;
        let line = TokenLine {
            id: e.id.clone(),
            vocab: spec.codebook_size,
            targets: targets.indices,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct CodebookStats {
    codebook: usize,
    tokens: usize,
    distinct: usize,
    utilization: f64,
    entropy_nats: f64,
    max_entropy_nats: f64,
}

#[derive(Debug, Serialize)]
struct MaskReport {
    p_start: f64,
    span: usize,
    frames: usize,
    seeds: u64,
    mean_fraction: f64,
    expected_fraction: f64,
}

#[derive(Debug, Serialize)]
struct StatsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    utterances: Option<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    codebooks: Vec<CodebookStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mask: Option<MaskReport>,
}

pub fn read_tokens(path: &Path) -> Result<Vec<TokenLine>> {
    let f = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::ManifestLine {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn cmd_stats(a: StatsArgs) -> Result<()> {
    let mut report = StatsReport {
        utterances: None,
        codebooks: Vec::new(),
        mask: None,
    };
    if let Some(path) = &a.tokens {
        let lines = read_tokens(path)?;
        if lines.is_empty() {
            return Err(Error::invalid(format!("token file {} is empty", path.display())));
        }
        let v = a.vocab.unwrap_or(lines[0].vocab);
        let n = lines[0].targets.len();
        if lines.iter().any(|l| l.targets.len() != n) {
            return Err(Error::invalid("token lines disagree on the number of codebooks"));
        }
        if let Some(bad) = lines.iter().flat_map(|l| l.targets.iter().flatten()).find(|&&t| t as usize >= v) {
            return Err(Error::invalid(format!("token {bad} is outside the vocabulary of size {v}")));
        }
        report.utterances = Some(lines.len());
        for cb in 0..n {
            let tokens = || lines.iter().flat_map(|l| l.targets[cb].iter().copied());
            let mut seen = vec![false; v];
            tokens().for_each(|t| seen[t as usize] = true);
            let distinct = seen.iter().filter(|&&s| s).count();
            report.codebooks.push(CodebookStats {
                codebook: cb,
                tokens: tokens().count(),
                distinct,
                utilization: distinct as f64 / v as f64,
                entropy_nats: token_entropy(tokens(), v),
                max_entropy_nats: (v as f64).ln(),
            });
        }
    }
    if a.mask {
        if a.seeds == 0 {
            return Err(Error::invalid("--seeds must be at least 1"));
        }
        let mut total = 0.0;
        for s in 0..a.seeds {
            total += sample_mask(a.frames, a.p, a.span, s)?.fraction();
        }
        report.mask = Some(MaskReport {
            p_start: a.p,
            span: a.span,
            frames: a.frames,
            seeds: a.seeds,
            mean_fraction: total / a.seeds as f64,
            expected_fraction: 1.0 - (1.0 - a.p).powi(a.span as i32),
        });
    }
    emit(&serde_json::to_string_pretty(&report)?)?;
    Ok(())
}
