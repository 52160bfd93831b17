//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fail.
//!
//! Every expected value is produced by an oracle written here, independently of
//! the library code path under test.

use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use brq_core::audio::{synth_corpus, write_corpus, CorpusRecipe, ManifestEntry, SignalFamily, Waveform};
use brq_core::clustering::{codebook_weights, fit_kmeans, CodebookWeights, KMeansParams};
use brq_core::encoder::{build_encoder, Encoder, EncoderConfig, Gradients, Mode};
use brq_core::features::{utterance_summary, FeatureKind, FeatureSequence, FrameConfig, NormStats, SummaryConfig};
use brq_core::losses::{ce_loss, combined_loss, combined_loss_grad, kl_loss, LossConfig};
use brq_core::masking::{apply_mask, sample_mask, DEFAULT_P_START, DEFAULT_SPAN, NOISE_STD};
use brq_core::quantizer::{softmax_in_place, BankSpec, QuantizerBank, TargetSequence};
use brq_core::rng;
use brq_core::trainer::{read_metrics, Checkpoint, Phase, Preset, RunConfig, Trainer};
use sha2::{Digest, Sha256};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- shared data

/// The repeating-pattern toy corpus used by criteria 5, 6, 7 and 10.
fn pattern_corpus() -> (Vec<Waveform>, Vec<ManifestEntry>) {
    synth_corpus(&CorpusRecipe::new(24, 1.0, vec![SignalFamily::Pattern], 11)).expect("corpus")
}

fn kmeans_model(waves: &[Waveform], k: usize, seed: u64) -> brq_core::clustering::ClusterModel {
    let summaries: Vec<_> = waves
        .iter()
        .map(|w| utterance_summary(w, &FrameConfig::default(), &SummaryConfig::default()).unwrap())
        .collect();
    fit_kmeans(&summaries, k, seed, KMeansParams::default()).expect("k-means")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn first_argmax(xs: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in xs.into_iter().enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

/// Stacked projection `x^T A` for one codebook; `A` is `rows × d` row-major.
fn project_row(a: &[f64], x: &[f64], d: usize) -> Vec<f64> {
    (0..d).map(|j| x.iter().enumerate().map(|(i, xi)| xi * a[i * d + j]).sum()).collect()
}

// ---------------------------------------------------------------- criterion 1

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let spec = BankSpec {
        seed: 21,
        n_codebooks: 1,
        codebook_size: 256,
        codebook_dim: 16,
        stack_factor: 4,
        input_dim: 80,
    };
    let bank = QuantizerBank::new(spec).map_err(|e| e.to_string())?;
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let frames = 4 * 1000;
    let data: Vec<f64> = (0..frames * 80).map(|_| StandardNormal.sample(&mut r)).collect();
    let seq = FeatureSequence::new(data, frames, 80, FeatureKind::LogMel, 100.0).unwrap();
    let (targets, _) = bank.quantize(&seq).map_err(|e| e.to_string())?;
    let (v, d) = (256, 16);
    let a = bank.projection(0);
    let rows: Vec<Vec<f64>> = (0..v).map(|j| bank.codebook_row(0, j).to_vec()).collect();
    let (mut cos_mismatch, mut l2_mismatch) = (0, 0);
    for t in 0..1000 {
        let y = project_row(a, &seq.data[t * 320..(t + 1) * 320], d);
        let yn = dot(&y, &y).sqrt();
        let cos = first_argmax(rows.iter().map(|c| dot(&y, c) / (yn * dot(c, c).sqrt())));
        let u: Vec<f64> = y.iter().map(|x| x / yn).collect();
        let l2 = first_argmax(rows.iter().map(|c| -u.iter().zip(c).map(|(p, q)| (p - q) * (p - q)).sum::<f64>()));
        cos_mismatch += usize::from(targets.indices[0][t] as usize != cos);
        l2_mismatch += usize::from(targets.indices[0][t] as usize != l2);
    }
    let secs = started.elapsed().as_secs_f64();
    check(
        cos_mismatch == 0 && l2_mismatch == 0 && secs < 10.0,
        format!("1000 frames: cosine mismatches {cos_mismatch}, L2 mismatches {l2_mismatch}, {secs:.2} s (< 10 s)"),
    )
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2() -> Outcome {
    let expected = 1.0 - (1.0 - DEFAULT_P_START).powi(DEFAULT_SPAN as i32);
    let mut total = 0.0;
    for s in 0..200 {
        let m = sample_mask(10_000, DEFAULT_P_START, DEFAULT_SPAN, s).map_err(|e| e.to_string())?;
        total += m.masked_frames.len() as f64 / 10_000.0;
    }
    let frac = total / 200.0;

    // 12,500 fully masked 80-dim frames = 10^6 replaced entries.
    let frames = 12_500;
    let seq = FeatureSequence::new(vec![7.0; frames * 80], frames, 80, FeatureKind::LogMel, 100.0).unwrap();
    let all = sample_mask(frames, 1.0, 1, 0).map_err(|e| e.to_string())?;
    let noisy = apply_mask(&seq, &all, 99).map_err(|e| e.to_string())?;
    let n = noisy.data.len() as f64;
    let mean = noisy.data.iter().sum::<f64>() / n;
    let std = (noisy.data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    check(
        (frac - expected).abs() <= 0.01 && mean.abs() <= 3e-4 && (std - NOISE_STD).abs() <= 1e-3 && n == 1e6,
        format!("masked fraction {frac:.4} vs {expected:.4} (±0.01); noise mean {mean:.2e} (≤3e-4), std {std:.5} vs 0.1 (±1e-3)"),
    )
}

// ---------------------------------------------------------------- criterion 3

fn random_dists(r: &mut ChaCha8Rng, n: usize, t: usize, v: usize, sharp: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let mut x: Vec<f64> = (0..t * v).map(|_| sharp * r.random::<f64>()).collect();
            x.chunks_mut(v).for_each(softmax_in_place);
            x
        })
        .collect()
}

fn naive_ce(p: &[f64], ys: &[u32], masked: &[bool], v: usize, eps: f64) -> f64 {
    let mut s = 0.0;
    let mut m = 0usize;
    for t in 0..masked.len() {
        if masked[t] {
            s += -(p[t * v + ys[t] as usize].max(eps)).ln();
            m += 1;
        }
    }
    if m == 0 {
        0.0
    } else {
        s / m as f64
    }
}

fn naive_kl(p: &[f64], d: &[f64], masked: &[bool], v: usize, eps: f64) -> f64 {
    let mut s = 0.0;
    let mut m = 0usize;
    for t in 0..masked.len() {
        if !masked[t] {
            continue;
        }
        m += 1;
        for i in 0..v {
            let (a, b) = (p[t * v + i], d[t * v + i]);
            s += a * (a + eps).ln() - a * (b + eps).ln();
        }
    }
    if m == 0 {
        0.0
    } else {
        s / m as f64
    }
}

fn criterion_3() -> Outcome {
    let eps = LossConfig::default().epsilon;
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_ce, mut worst_kl, mut worst_self, mut worst_uniform) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut exact_reduction = true;
    for _ in 0..100 {
        let n = r.random_range(1..=4);
        let t = r.random_range(1..=20);
        let v = r.random_range(2..=40);
        let p = random_dists(&mut r, n, t, v, 6.0);
        let d = random_dists(&mut r, n, t, v, 6.0);
        let masked: Vec<bool> = (0..t).map(|_| r.random_bool(0.5)).collect();
        let targets = TargetSequence {
            indices: (0..n).map(|_| (0..t).map(|_| r.random_range(0..v as u32)).collect()).collect(),
            frames: t,
        };
        let ce = ce_loss(&p, &targets, &masked, eps).map_err(|e| e.to_string())?;
        let kl = kl_loss(&p, &d, &masked, eps).map_err(|e| e.to_string())?;
        let kl_self = kl_loss(&p, &p, &masked, eps).map_err(|e| e.to_string())?;
        for k in 0..n {
            worst_ce = worst_ce.max((ce[k] - naive_ce(&p[k], &targets.indices[k], &masked, v, eps)).abs());
            worst_kl = worst_kl.max((kl[k] - naive_kl(&p[k], &d[k], &masked, v, eps)).abs());
            worst_self = worst_self.max(kl_self[k].abs());
        }
        let uniform = vec![vec![1.0 / v as f64; t * v]; n];
        let all = vec![true; t];
        for c in ce_loss(&uniform, &targets, &all, eps).map_err(|e| e.to_string())? {
            worst_uniform = worst_uniform.max((c - (v as f64).ln()).abs());
        }
        let cfg = LossConfig {
            w_kl: 0.0,
            ..LossConfig::default()
        };
        let rep = combined_loss(&p, &targets, Some(&d), &masked, &cfg, None).map_err(|e| e.to_string())?;
        let plain_ce = ce.iter().sum::<f64>() / n as f64;
        exact_reduction &= rep.total == plain_ce;
    }
    check(
        worst_ce <= 1e-8 && worst_kl <= 1e-8 && worst_self <= 1e-9 && worst_uniform <= 1e-9 && exact_reduction,
        format!(
            "100 instances: |CE-naive| {worst_ce:.1e}, |KL-naive| {worst_kl:.1e} (≤1e-8); |KL(p,p)| {worst_self:.1e}, |CE_unif-lnV| {worst_uniform:.1e} (≤1e-9); w_kl=0 reduces exactly to CE: {exact_reduction}"
        ),
    )
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4() -> Outcome {
    let started = Instant::now();
    let cfg = EncoderConfig {
        n_layers: 1,
        d_model: 16,
        n_heads: 2,
        conv_kernel: 3,
        ffn_expansion: 2,
        n_heads_out: 2,
        vocab: 8,
        dropout: 0.0,
        input_dim: 80,
        max_rel_dist: 4,
        seed: 17,
        ..EncoderConfig::default()
    };
    let mut enc: Encoder<f64> = build_encoder(&cfg).map_err(|e| e.to_string())?;
    let mut r = ChaCha8Rng::seed_from_u64(41);
    for m in enc.params_mut().tensors_mut() {
        m.data.iter_mut().for_each(|x| *x += r.random_range(-0.2..0.2));
    }
    let frames = 12;
    let data: Vec<f64> = (0..frames * 80).map(|_| r.random_range(-2.0..2.0)).collect();
    let x = FeatureSequence::new(data, frames, 80, FeatureKind::LogMel, 100.0).unwrap();
    let positions = frames / 4;
    let targets = TargetSequence {
        indices: vec![vec![1, 6, 3], vec![7, 0, 2]],
        frames: positions,
    };
    let masked = [true, false, true];
    let sims = random_dists(&mut r, 2, positions, 8, 3.0);
    let loss_cfg = LossConfig {
        w_ce: 1.0,
        w_kl: 0.1,
        ..LossConfig::default()
    };
    let weights = CodebookWeights {
        weights: vec![1.25, 0.75],
        primary: Some(0),
    };
    let loss = |e: &Encoder<f64>| -> f64 {
        let out = e.forward(&[&x], Mode::Eval).unwrap();
        combined_loss(&out.probs[0], &targets, Some(&sims), &masked, &loss_cfg, Some(&weights))
            .unwrap()
            .total
    };
    let out = enc.forward(&[&x], Mode::Eval).map_err(|e| e.to_string())?;
    let up = combined_loss_grad(&out.probs[0], &targets, Some(&sims), &masked, &loss_cfg, Some(&weights))
        .map_err(|e| e.to_string())?;
    let grads: Gradients<f64> = enc.backward(&out, &[up]).map_err(|e| e.to_string())?;
    let h = 1e-4;
    let mut worst = (0.0f64, String::new());
    let mut count = 0usize;
    for (pi, g) in grads.tensors.iter().enumerate() {
        for e in 0..g.data.len() {
            let mut plus = enc.clone();
            plus.params_mut().tensor_mut(pi).data[e] += h;
            let mut minus = enc.clone();
            minus.params_mut().tensor_mut(pi).data[e] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let an = g.data[e];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, format!("{}[{e}]", enc.param_names()[pi]));
            }
            count += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    check(
        worst.0 < 1e-4 && secs < 120.0,
        format!(
            "{count} parameters, max relative error {:.2e} at {} (< 1e-4), {secs:.1} s (< 120 s)",
            worst.0, worst.1
        ),
    )
}

// ------------------------------------------------------------ criteria 5 & 6

fn criteria_5_and_6() -> (Outcome, Outcome) {
    let run = || -> Result<(String, String, bool, bool), String> {
        let started = Instant::now();
        let (waves, entries) = pattern_corpus();
        let model = kmeans_model(&waves, 2, 5);
        let mut cfg = RunConfig::preset(Preset::Proposed, 1);
        cfg.set_codebooks(2);
        cfg.set_vocab(64);
        cfg.train.steps = 300;
        cfg.train.warmup_steps = 100;
        let bank_before = sha_bank(&QuantizerBank::new(cfg.bank).map_err(|e| e.to_string())?);
        let centroids_before = model.centroid_checksum();
        let trainer = Trainer::new(cfg.clone(), &entries, &waves, Some(model), None).map_err(|e| e.to_string())?;
        let stats_before: [u8; 32] = Sha256::digest(norm_bytes(&trainer.data().norm_stats)).into();
        let mut state = trainer.init_state().map_err(|e| e.to_string())?;
        let mut first = None;
        let mut last = 0.0;
        for s in 0..cfg.train.steps {
            let batch = trainer.batch_indices(s).to_vec();
            let out = trainer.pretrain_step(&mut state, &batch).map_err(|e| e.to_string())?;
            first.get_or_insert(out.report.total);
            last = out.report.total;
        }
        let ev = trainer.evaluate(&state, &trainer.data().train).map_err(|e| e.to_string())?;
        let acc = ev.accuracy.iter().sum::<f64>() / ev.accuracy.len() as f64;
        let chance = 1.0 / 64.0;
        let first = first.unwrap();

        let after = trainer.frozen_checksums();
        let ckpt = Checkpoint::from_bytes(&trainer.checkpoint(&state).to_bytes().map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let reloaded_bank = sha_bank(&QuantizerBank::new(ckpt.meta.bank).map_err(|e| e.to_string())?);
        let reloaded_stats: [u8; 32] = Sha256::digest(norm_bytes(&ckpt.meta.norm_stats)).into();
        let reloaded_centroids = ckpt.meta.cluster_model.as_ref().map(|m| m.centroid_checksum());
        let frozen = after.bank == bank_before
            && reloaded_bank == bank_before
            && after.norm_stats == stats_before
            && reloaded_stats == stats_before
            && after.centroids == Some(centroids_before)
            && reloaded_centroids == Some(centroids_before);
        let d5 = format!(
            "bank {}…, norm stats {}…, centroids {}… unchanged after 300 steps: {frozen}",
            &hex(&bank_before)[..12],
            &hex(&stats_before)[..12],
            &hex(&centroids_before)[..12]
        );
        let ok6 = acc >= 5.0 * chance && last <= 0.5 * first;
        let d6 = format!(
            "V=64 N=2 300 steps: masked accuracy {acc:.3} vs 5x chance {:.3}; loss {first:.3} -> {last:.3} (ratio {:.3} ≤ 0.5); {:.1} s",
            5.0 * chance,
            last / first,
            started.elapsed().as_secs_f64()
        );
        Ok((d5, d6, frozen, ok6))
    };
    match run() {
        Ok((d5, d6, ok5, ok6)) => (check(ok5, d5), check(ok6, d6)),
        Err(e) => (Err(e.clone()), Err(e)),
    }
}

/// SHA-256 over projection and codebook matrices, little-endian f64.
fn sha_bank(bank: &QuantizerBank) -> [u8; 32] {
    let mut h = Sha256::new();
    let s = bank.spec();
    for n in 0..s.n_codebooks {
        for x in bank.projection(n) {
            h.update(x.to_le_bytes());
        }
    }
    for n in 0..s.n_codebooks {
        for j in 0..s.codebook_size {
            for x in bank.codebook_row(n, j) {
                h.update(x.to_le_bytes());
            }
        }
    }
    h.finalize().into()
}

fn norm_bytes(s: &NormStats) -> Vec<u8> {
    s.mean.iter().chain(&s.std).flat_map(|x| x.to_le_bytes()).collect()
}

fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

// ---------------------------------------------------------------- criterion 7

fn normalized_val_ratio(preset: Preset, seed: u64, waves: &[Waveform], entries: &[ManifestEntry]) -> Result<f64, String> {
    let mut cfg = RunConfig::preset(preset, seed);
    cfg.train.steps = 300;
    let model = (preset == Preset::Proposed).then(|| kmeans_model(waves, cfg.bank.n_codebooks, seed));
    let trainer = Trainer::new(cfg.clone(), entries, waves, model, None).map_err(|e| e.to_string())?;
    let mut state = trainer.init_state().map_err(|e| e.to_string())?;
    let v0 = trainer.validate(&state).map_err(|e| e.to_string())?.report.total;
    for s in 0..cfg.train.steps {
        let batch = trainer.batch_indices(s).to_vec();
        trainer.pretrain_step(&mut state, &batch).map_err(|e| e.to_string())?;
    }
    let v1 = trainer.validate(&state).map_err(|e| e.to_string())?.report.total;
    Ok(v1 / v0)
}

fn criterion_7() -> Outcome {
    let started = Instant::now();
    let (waves, entries) = pattern_corpus();
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in [1, 2, 3] {
        let b = normalized_val_ratio(Preset::Baseline, seed, &waves, &entries)?;
        let p = normalized_val_ratio(Preset::Proposed, seed, &waves, &entries)?;
        wins += usize::from(p <= b);
        parts.push(format!("seed {seed}: proposed {p:.3} vs baseline {b:.3}"));
    }
    check(
        wins >= 2,
        format!(
            "{} -> proposed ≤ baseline in {wins}/3 seeds (need ≥ 2); {:.0} s",
            parts.join(", "),
            started.elapsed().as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let centers = [[0.0, 0.0, 0.0], [12.0, 0.0, -6.0], [-5.0, 11.0, 4.0]];
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut summaries = Vec::new();
    let mut labels = Vec::new();
    for i in 0..300 {
        let c = i % 3;
        let v: Vec<f64> = centers[c].iter().map(|m| m + noise.sample(&mut r)).collect();
        summaries.push(brq_core::features::UtteranceSummary {
            id: format!("p{i:04}"),
            vector: v,
        });
        labels.push(c);
    }
    let model = fit_kmeans(&summaries, 3, 2, KMeansParams::default()).map_err(|e| e.to_string())?;
    // Best label permutation.
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let best = perms
        .iter()
        .map(|p| {
            summaries
                .iter()
                .zip(&labels)
                .filter(|(s, &l)| model.assignments[&s.id] == p[l])
                .count()
        })
        .max()
        .unwrap();
    let recovered = best as f64 / summaries.len() as f64;
    let monotone = model.inertia.windows(2).all(|w| w[1] <= w[0]);
    let ok_weights = codebook_weights(0, 6, 2.0, 0.8).map(|w| w.weights[0] / w.weights[1]);
    let ratio_ok = matches!(ok_weights, Ok(q) if q >= 2.0);
    let rejects = codebook_weights(0, 6, 1.5, 0.8).is_err() && codebook_weights(0, 6, 1.0, 1.0).is_err();
    check(
        recovered >= 0.99 && monotone && !model.inertia.is_empty() && ratio_ok && rejects,
        format!(
            "recovery {:.1}% (≥ 99%), inertia non-increasing over {} iterations: {monotone}; w_p/w_s {:.2} ≥ 2: {ratio_ok}; violations rejected: {rejects}",
            100.0 * recovered,
            model.inertia.len(),
            ok_weights.unwrap_or(f64::NAN)
        ),
    )
}

// ---------------------------------------------------------------- criterion 9

fn brq(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_brq"))
        .args(args)
        .arg("--quiet")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("brq {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn brq_plain(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_brq")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("brq {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn criterion_9() -> Outcome {
    let started = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let p = |s: &str| dir.join(s).to_string_lossy().into_owned();
    let (waves, entries) = pattern_corpus();
    write_corpus(&dir.join("corpus"), &waves, &entries).map_err(|e| e.to_string())?;
    brq_plain(&[
        "cluster",
        "--manifest",
        &p("corpus/manifest.jsonl"),
        "--k",
        "6",
        "--seed",
        "7",
        "--out-model",
        &p("model.json"),
        "--out-manifest",
        &p("corpus/clustered.jsonl"),
    ])?;
    let common = |out: &str| -> Vec<String> {
        [
            "pretrain",
            "--preset",
            "proposed",
            "--seed",
            "7",
            "--manifest",
            &p("corpus/clustered.jsonl"),
            "--steps",
            "40",
            "--validate-every",
            "10",
            "--checkpoint-every",
            "20",
            "--out",
            &p(out),
        ]
        .map(String::from)
        .to_vec()
    };
    let run = |out: &str, extra: &[&str]| {
        let mut a = common(out);
        a.extend(extra.iter().map(|s| s.to_string()));
        brq(&a.iter().map(String::as_str).collect::<Vec<_>>())
    };
    run("a", &[])?;
    run("b", &[])?;
    let read = |f: &str| std::fs::read(dir.join(f)).map_err(|e| e.to_string());
    let same_log = read("a/metrics.jsonl")? == read("b/metrics.jsonl")?;
    let same_ckpt = read("a/final.brq")? == read("b/final.brq")?;

    // Interrupted copy: the log as it stood plus the step-20 checkpoint.
    std::fs::create_dir_all(dir.join("c")).map_err(|e| e.to_string())?;
    std::fs::write(dir.join("c/metrics.jsonl"), read("a/metrics.jsonl")?).map_err(|e| e.to_string())?;
    run("c", &["--resume", &p("a/step-00000020.brq")])?;
    let resumed_log = read("a/metrics.jsonl")? == read("c/metrics.jsonl")?;
    let resumed_ckpt = read("a/final.brq")? == read("c/final.brq")?;
    let records = read_metrics(dir.join("a/metrics.jsonl")).map_err(|e| e.to_string())?;
    let n_train = records.iter().filter(|r| r.phase == Phase::Train).count();
    check(
        same_log && same_ckpt && resumed_log && resumed_ckpt && n_train == 40,
        format!(
            "two runs: identical metrics {same_log}, identical checkpoints {same_ckpt}; resume at 20 of 40: identical metrics {resumed_log}, identical checkpoint {resumed_ckpt}; {:.0} s",
            started.elapsed().as_secs_f64()
        ),
    )
}

// --------------------------------------------------------------- criterion 10

/// Plain single-codebook masked prediction, coded from first principles:
/// stack 4 frames, project, cosine-nearest codebook row as the label,
/// span-masked inputs, mean CE over masked targets, mean over the batch,
/// softmax-minus-onehot logits gradient, global clipping, warmup/decay Adam.
struct Reference {
    enc: Encoder<f32>,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

fn reference_targets(bank: &QuantizerBank, x: &FeatureSequence) -> Vec<u32> {
    let s = bank.spec();
    let rows = s.stack_factor * s.input_dim;
    (0..x.frames / s.stack_factor)
        .map(|t| {
            let y = project_row(bank.projection(0), &x.data[t * rows..(t + 1) * rows], s.codebook_dim);
            first_argmax((0..s.codebook_size).map(|j| dot(&y, bank.codebook_row(0, j)))) as u32
        })
        .collect()
}

fn criterion_10() -> Outcome {
    let started = Instant::now();
    let steps = 30;
    let (waves, entries) = pattern_corpus();
    let mut cfg = RunConfig::preset(Preset::Baseline, 4);
    cfg.train.steps = steps;
    cfg.train.warmup_steps = 10;
    let t = cfg.train.clone();
    if cfg.bank.n_codebooks != 1 || t.loss.w_kl != 0.0 || t.loss.cluster_weighting {
        return Err("baseline preset is not N=1, w_kl=0, weighting off".into());
    }
    let trainer = Trainer::new(cfg.clone(), &entries, &waves, None, None).map_err(|e| e.to_string())?;
    let mut state = trainer.init_state().map_err(|e| e.to_string())?;
    let enc = build_encoder::<f32>(&cfg.encoder).map_err(|e| e.to_string())?;
    let zeros: Vec<Vec<f32>> = enc.params().tensors().iter().map(|m| vec![0.0; m.data.len()]).collect();
    let mut rf = Reference {
        enc,
        m: zeros.clone(),
        v: zeros,
    };
    let bank = trainer.bank();
    let mut label_mismatch = 0usize;
    let mut worst = 0.0f64;
    for step in 0..steps {
        let batch = trainer.batch_indices(step).to_vec();
        // Reference forward/backward.
        let mut losses = Vec::new();
        let mut grads: Option<Vec<Vec<f32>>> = None;
        for &i in &batch {
            let u = &trainer.data().train[i];
            let ys = reference_targets(bank, &u.features);
            label_mismatch += ys.iter().zip(&u.targets.indices[0]).filter(|(a, b)| a != b).count();
            let mseed = rng::derive_seed(t.seed, &[rng::TAG_MASK, step, i as u64]);
            let mask = sample_mask(u.features.frames, cfg.masking.p_start, cfg.masking.span, mseed).unwrap();
            let x = apply_mask(&u.features, &mask, mseed).unwrap();
            let flags = mask.as_flags();
            let positions = ys.len();
            let tmask: Vec<bool> = (0..positions).map(|p| flags[4 * p..4 * p + 4].iter().any(|&f| f)).collect();
            let dseed = rng::derive_seed(t.seed, &[rng::TAG_DROPOUT, step, i as u64]);
            let out = rf.enc.forward(&[&x], Mode::Train { dropout_seed: dseed }).unwrap();
            let p = &out.probs[0][0];
            let v = p.len() / positions;
            let m = tmask.iter().filter(|&&f| f).count();
            let mut loss = 0.0;
            let mut up = vec![0.0; p.len()];
            for pos in (0..positions).filter(|&q| tmask[q]) {
                let y = ys[pos] as usize;
                loss -= p[pos * v + y].max(t.loss.epsilon).ln();
                let scale = 1.0 / (m as f64 * batch.len() as f64);
                for k in 0..v {
                    let onehot = if k == y { 1.0 } else { 0.0 };
                    up[pos * v + k] = scale * (p[pos * v + k] - onehot);
                }
            }
            losses.push(if m == 0 { 0.0 } else { loss / m as f64 });
            let g = rf.enc.backward(&out, &[vec![up]]).unwrap();
            match grads.as_mut() {
                None => grads = Some(g.tensors.iter().map(|m| m.data.clone()).collect()),
                Some(acc) => acc
                    .iter_mut()
                    .zip(&g.tensors)
                    .for_each(|(a, b)| a.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y)),
            }
        }
        let ref_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let mut grads = grads.unwrap();
        let norm = grads.iter().flatten().map(|&g| f64::from(g) * f64::from(g)).sum::<f64>().sqrt();
        if norm > t.grad_clip_norm {
            let c = (t.grad_clip_norm / norm) as f32;
            grads.iter_mut().flatten().for_each(|g| *g *= c);
        }
        let n = (step + 1) as f64;
        let w = t.warmup_steps as f64;
        let lr = t.lr_peak * (n / w).min((w / n).sqrt());
        let (b1, b2) = (t.adam.beta1, t.adam.beta2);
        let (c1, c2) = (1.0 - b1.powi(n as i32), 1.0 - b2.powi(n as i32));
        let (step_size, rc2, eps) = ((lr / c1) as f32, (1.0 / c2) as f32, t.adam.eps as f32);
        let (fb1, fb2, ob1, ob2) = (b1 as f32, b2 as f32, (1.0 - b1) as f32, (1.0 - b2) as f32);
        let params = rf.enc.params_mut();
        for (k, tensor) in params.tensors_mut().iter_mut().enumerate() {
            for (e, p) in tensor.data.iter_mut().enumerate() {
                let g = grads[k][e];
                rf.m[k][e] = fb1 * rf.m[k][e] + ob1 * g;
                rf.v[k][e] = fb2 * rf.v[k][e] + ob2 * g * g;
                *p -= step_size * rf.m[k][e] / ((rf.v[k][e] * rc2).sqrt() + eps);
            }
        }

        let got = trainer.pretrain_step(&mut state, &batch).map_err(|e| e.to_string())?;
        worst = worst.max((got.report.total - ref_loss).abs());
    }
    check(
        worst <= 1e-9 && label_mismatch == 0,
        format!(
            "{steps} steps: max |trainer - reference| per-step loss {worst:.2e} (≤ 1e-9); label mismatches {label_mismatch}; {:.1} s",
            started.elapsed().as_secs_f64()
        ),
    )
}

// ------------------------------------------------------------------- driver

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |n: u32| filter.is_empty() || filter.iter().any(|f| f == &n.to_string());
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut run = |n: u32, name: &'static str, f: &dyn Fn() -> Outcome| {
        if wanted(n) {
            let r = f();
            print_line(n, name, &r);
            results.push((n, name, r));
        }
    };
    run(1, "quantizer oracle equivalence", &criterion_1);
    run(2, "mask coverage and noise statistics", &criterion_2);
    run(3, "loss formula oracles", &criterion_3);
    run(4, "gradient check", &criterion_4);
    // 5 and 6 share one 300-step training run.
    let shared = std::cell::OnceCell::new();
    run(5, "frozen-asset law", &|| shared.get_or_init(criteria_5_and_6).0.clone());
    run(6, "learnability", &|| shared.get_or_init(criteria_5_and_6).1.clone());
    run(7, "baseline vs proposed validation curve", &criterion_7);
    run(8, "clustering recovery and weighting rule", &criterion_8);
    run(9, "determinism and resumability", &criterion_9);
    run(10, "baseline recovery against plain reference", &criterion_10);

    let failed: Vec<u32> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!("acceptance: {} passed, {} failed", results.len() - failed.len(), failed.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}

fn print_line(n: u32, name: &str, r: &Outcome) {
    match r {
        Ok(d) => println!("criterion {n:>2} PASS  {name}: {d}"),
        Err(d) => println!("criterion {n:>2} FAIL  {name}: {d}"),
    }
}
