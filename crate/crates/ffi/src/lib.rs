//! C ABI over `brq-core`.
//!
//! Every fallible function returns a [`BrqStatus`]; on failure the message is
//! available from [`brq_last_error_message`] on the same thread. Objects are
//! opaque handles created by `*_new` and released by the matching `*_free`.
//! Array arguments are caller-owned, row-major, and sized as documented.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use brq_core::audio::Waveform;
use brq_core::clustering::{codebook_weights, CodebookWeights};
use brq_core::features::{log_mel, FeatureKind, FeatureSequence, FrameConfig};
use brq_core::losses::{combined_loss, LossConfig};
use brq_core::masking::sample_mask;
use brq_core::quantizer::{BankSpec, QuantizerBank, TargetSequence};
use brq_core::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BrqStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    BufferTooSmall = 4,
    SignalTooShort = 5,
    Internal = 6,
    Panic = 7,
}

/// Frozen random-projection quantizer bank.
pub struct BrqBank {
    inner: QuantizerBank,
}

/// Parameters for [`brq_bank_new`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BrqBankSpec {
    pub seed: u64,
    pub n_codebooks: usize,
    pub codebook_size: usize,
    pub codebook_dim: usize,
    pub stack_factor: usize,
    pub input_dim: usize,
}

/// Per-codebook breakdown is written to caller arrays; this holds the scalars.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct BrqLossSummary {
    pub total: f64,
    pub masked_positions: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> BrqStatus {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) => BrqStatus::InvalidArgument,
        Error::Shape(_) => BrqStatus::Shape,
        Error::SignalTooShort { .. } => BrqStatus::SignalTooShort,
        _ => BrqStatus::Internal,
    }
}

struct Fail(BrqStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(BrqStatus::NullPointer, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> BrqStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            BrqStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            BrqStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

fn checked_mul(dims: &[usize]) -> Result<usize, Fail> {
    dims.iter()
        .try_fold(1usize, |a, &b| a.checked_mul(b))
        .ok_or_else(|| Fail(BrqStatus::InvalidArgument, "array size overflows".into()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn brq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn brq_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds a bank from `spec` and stores the handle in `*out`.
#[no_mangle]
pub unsafe extern "C" fn brq_bank_new(spec: BrqBankSpec, out: *mut *mut BrqBank) -> BrqStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = QuantizerBank::new(BankSpec {
            seed: spec.seed,
            n_codebooks: spec.n_codebooks,
            codebook_size: spec.codebook_size,
            codebook_dim: spec.codebook_dim,
            stack_factor: spec.stack_factor,
            input_dim: spec.input_dim,
        })?;
        *out = Box::into_raw(Box::new(BrqBank { inner }));
        Ok(())
    })
}

/// Releases a bank. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn brq_bank_free(bank: *mut BrqBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// Number of target positions produced for `frames` input frames.
#[no_mangle]
pub unsafe extern "C" fn brq_bank_target_len(bank: *const BrqBank, frames: usize) -> usize {
    bank.as_ref().map_or(0, |b| b.inner.target_len(frames))
}

/// SHA-256 of the bank's projection and codebook matrices, written to `out[32]`.
#[no_mangle]
pub unsafe extern "C" fn brq_bank_checksum(bank: *const BrqBank, out: *mut u8) -> BrqStatus {
    guard(|| {
        let b = bank.as_ref().ok_or_else(|| null("bank"))?;
        slice_mut(out, 32, "out")?.copy_from_slice(&b.inner.checksum());
        Ok(())
    })
}

/// Quantizes a `frames × dim` normalized feature matrix. Writes
/// `n_codebooks × target_len(frames)` indices to `out` (capacity `out_len`).
#[no_mangle]
pub unsafe extern "C" fn brq_bank_quantize(
    bank: *const BrqBank,
    features: *const f64,
    frames: usize,
    dim: usize,
    out: *mut u32,
    out_len: usize,
) -> BrqStatus {
    guard(|| {
        let b = bank.as_ref().ok_or_else(|| null("bank"))?;
        let data = slice(features, checked_mul(&[frames, dim])?, "features")?.to_vec();
        let seq = FeatureSequence::new(data, frames, dim, FeatureKind::LogMel, 100.0)?;
        let (targets, _) = b.inner.quantize(&seq)?;
        let need = targets.indices.len() * targets.frames;
        if out_len < need {
            return Err(Fail(BrqStatus::BufferTooSmall, format!("need {need} indices, got {out_len}")));
        }
        let dst = slice_mut(out, need, "out")?;
        for (chunk, row) in dst.chunks_mut(targets.frames.max(1)).zip(&targets.indices) {
            chunk.copy_from_slice(row);
        }
        Ok(())
    })
}

/// 80-bin log-mel features with the default 25 ms / 10 ms framing.
/// `*out_frames` always receives the frame count; pass `out = NULL` to query
/// it. Otherwise `out` must hold `frames * 80` values (`out_len`).
#[no_mangle]
pub unsafe extern "C" fn brq_log_mel(
    samples: *const f64,
    n_samples: usize,
    sample_rate_hz: u32,
    out: *mut f64,
    out_len: usize,
    out_frames: *mut usize,
) -> BrqStatus {
    guard(|| {
        if out_frames.is_null() {
            return Err(null("out_frames"));
        }
        let cfg = FrameConfig::default();
        let frames = cfg.n_frames(n_samples)?;
        *out_frames = frames;
        if out.is_null() {
            return Ok(());
        }
        let need = frames * cfg.n_mels;
        if out_len < need {
            return Err(Fail(BrqStatus::BufferTooSmall, format!("need {need} values, got {out_len}")));
        }
        let wave = Waveform::new("ffi", slice(samples, n_samples, "samples")?.to_vec(), sample_rate_hz)?;
        let f = log_mel(&wave, &cfg)?;
        slice_mut(out, need, "out")?.copy_from_slice(&f.data);
        Ok(())
    })
}

/// Span mask over `frames` frames; `out[t]` is 1 when frame `t` is masked.
#[no_mangle]
pub unsafe extern "C" fn brq_sample_mask(frames: usize, p_start: f64, span: usize, seed: u64, out: *mut u8) -> BrqStatus {
    guard(|| {
        let m = sample_mask(frames, p_start, span, seed)?;
        let dst = slice_mut(out, frames, "out")?;
        dst.fill(0);
        for &t in &m.masked_frames {
            dst[t] = 1;
        }
        Ok(())
    })
}

/// Cluster-specific codebook weights for an utterance in `cluster`, written to `out[n_codebooks]`.
#[no_mangle]
pub unsafe extern "C" fn brq_codebook_weights(
    cluster: usize,
    n_codebooks: usize,
    primary_weight: f64,
    secondary_weight: f64,
    out: *mut f64,
) -> BrqStatus {
    guard(|| {
        let w = codebook_weights(cluster, n_codebooks, primary_weight, secondary_weight)?;
        slice_mut(out, n_codebooks, "out")?.copy_from_slice(&w.weights);
        Ok(())
    })
}

/// Weighted masked CE + KL objective.
///
/// `probs` and `sims` are `n_codebooks × positions × vocab`; `targets` is
/// `n_codebooks × positions`; `masked` is `positions` bytes (non-zero = masked).
/// `sims` may be null when `w_kl == 0`; `weights` (`n_codebooks`) may be null
/// for uniform weights. Per-codebook CE and KL go to `out_ce` / `out_kl` when
/// those are non-null.
#[no_mangle]
pub unsafe extern "C" fn brq_combined_loss(
    probs: *const f64,
    targets: *const u32,
    sims: *const f64,
    masked: *const u8,
    n_codebooks: usize,
    positions: usize,
    vocab: usize,
    w_ce: f64,
    w_kl: f64,
    weights: *const f64,
    out: *mut BrqLossSummary,
    out_ce: *mut f64,
    out_kl: *mut f64,
) -> BrqStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let per = checked_mul(&[positions, vocab])?;
        checked_mul(&[n_codebooks, per])?;
        let split = |p: *const f64, what: &str| -> Result<Vec<Vec<f64>>, Fail> {
            let all = slice(p, n_codebooks * per, what)?;
            Ok(all.chunks(per.max(1)).take(n_codebooks).map(<[f64]>::to_vec).collect())
        };
        let probs = split(probs, "probs")?;
        let sims = if sims.is_null() { None } else { Some(split(sims, "sims")?) };
        let idx = slice(targets, n_codebooks * positions, "targets")?;
        let targets = TargetSequence {
            indices: idx.chunks(positions.max(1)).take(n_codebooks).map(<[u32]>::to_vec).collect(),
            frames: positions,
        };
        let masked: Vec<bool> = slice(masked, positions, "masked")?.iter().map(|&b| b != 0).collect();
        let weights = if weights.is_null() {
            None
        } else {
            Some(CodebookWeights {
                weights: slice(weights, n_codebooks, "weights")?.to_vec(),
                primary: None,
            })
        };
        let cfg = LossConfig {
            w_ce,
            w_kl,
            ..LossConfig::default()
        };
        cfg.validate()?;
        let r = combined_loss(&probs, &targets, sims.as_deref(), &masked, &cfg, weights.as_ref())?;
        *out = BrqLossSummary {
            total: r.total,
            masked_positions: r.masked_positions,
        };
        if !out_ce.is_null() {
            slice_mut(out_ce, n_codebooks, "out_ce")?.copy_from_slice(&r.ce_per_codebook);
        }
        if !out_kl.is_null() {
            slice_mut(out_kl, n_codebooks, "out_kl")?.copy_from_slice(&r.kl_per_codebook);
        }
        Ok(())
    })
}
