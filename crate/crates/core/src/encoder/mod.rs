//! Conformer encoder with a 4x convolutional front-end and one linear
//! prediction head per codebook.

mod graph;
mod params;
mod tensor;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use graph::{Graph, Var};
pub use params::ParamStore;
pub use tensor::{Mat, Real};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::quantizer::softmax_in_place;
use crate::rng;

pub const SUBSAMPLE_FACTOR: usize = 4;
const FRONT_KERNEL: usize = 3;

fn default_input_dim() -> usize {
    80
}

fn default_max_rel_dist() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub conv_kernel: usize,
    pub ffn_expansion: usize,
    pub subsample_factor: usize,
    /// Number of prediction heads (one per codebook).
    pub n_heads_out: usize,
    pub vocab: usize,
    pub dropout: f64,
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    /// Relative offsets beyond this distance share one bias entry.
    #[serde(default = "default_max_rel_dist")]
    pub max_rel_dist: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            conv_kernel: 15,
            ffn_expansion: 4,
            subsample_factor: SUBSAMPLE_FACTOR,
            n_heads_out: 1,
            vocab: 8192,
            dropout: 0.1,
            input_dim: default_input_dim(),
            max_rel_dist: default_max_rel_dist(),
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 {
            return bad("n_layers, d_model and n_heads must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.conv_kernel % 2 == 0 {
            return bad(format!("conv_kernel must be odd, got {}", self.conv_kernel));
        }
        if self.ffn_expansion == 0 {
            return bad("ffn_expansion must be positive".into());
        }
        if self.subsample_factor != SUBSAMPLE_FACTOR {
            return bad(format!("subsample_factor is fixed at {SUBSAMPLE_FACTOR}, got {}", self.subsample_factor));
        }
        if self.n_heads_out == 0 || self.vocab == 0 || self.input_dim == 0 {
            return bad("n_heads_out, vocab and input_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    pub fn output_len(&self, frames: usize) -> usize {
        frames / 2 / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    /// Dropout off; forward is a pure function of parameters and inputs.
    Eval,
    /// Dropout on, with masks drawn from this seed.
    Train { dropout_seed: u64 },
}

#[derive(Debug, Clone)]
struct Ffn {
    ln: (usize, usize),
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct Attention {
    ln: (usize, usize),
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    rel: usize,
}

#[derive(Debug, Clone)]
struct ConvModule {
    ln: (usize, usize),
    pw1: usize,
    pb1: usize,
    dw: usize,
    db: usize,
    ln_mid: (usize, usize),
    pw2: usize,
    pb2: usize,
}

#[derive(Debug, Clone)]
struct Block {
    ff1: Ffn,
    attn: Attention,
    conv: ConvModule,
    ff2: Ffn,
    ln_out: (usize, usize),
}

#[derive(Debug, Clone)]
struct Layout {
    front: [usize; 4],
    blocks: Vec<Block>,
    heads: Vec<(usize, usize)>,
}

struct Builder<'a, F: Real, R: Rng> {
    store: ParamStore<F>,
    rng: &'a mut R,
}

impl<F: Real, R: Rng> Builder<'_, F, R> {
    fn uniform(&mut self, name: String, rows: usize, cols: usize, fan_in: usize) -> usize {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..rows * cols).map(|_| F::of(self.rng.random_range(-bound..bound))).collect();
        self.store.push(name, Mat::from_vec(rows, cols, data))
    }

    fn zeros(&mut self, name: String, rows: usize, cols: usize) -> usize {
        self.store.push(name, Mat::zeros(rows, cols))
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, out: usize) -> (usize, usize) {
        let w = self.uniform(format!("{prefix}.weight"), fan_in, out, fan_in);
        let b = self.zeros(format!("{prefix}.bias"), 1, out);
        (w, b)
    }

    fn layer_norm(&mut self, prefix: &str, d: usize) -> (usize, usize) {
        let g = self.store.push(format!("{prefix}.gamma"), Mat::from_vec(1, d, vec![F::one(); d]));
        let b = self.zeros(format!("{prefix}.beta"), 1, d);
        (g, b)
    }

    fn ffn(&mut self, prefix: &str, d: usize, hidden: usize) -> Ffn {
        let ln = self.layer_norm(&format!("{prefix}.norm"), d);
        let (w1, b1) = self.linear(&format!("{prefix}.linear1"), d, hidden);
        let (w2, b2) = self.linear(&format!("{prefix}.linear2"), hidden, d);
        Ffn { ln, w1, b1, w2, b2 }
    }
}

pub struct Encoder<F: Real = f32> {
    cfg: EncoderConfig,
    params: Arc<ParamStore<F>>,
    layout: Layout,
}

impl<F: Real> Clone for Encoder<F> {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            params: self.params.clone(),
            layout: self.layout.clone(),
        }
    }
}

/// Seeded initialization: weights uniform in +-1/sqrt(fan_in), biases zero,
/// normalization gains one.
pub fn build_encoder<F: Real>(cfg: &EncoderConfig) -> Result<Encoder<F>> {
    cfg.validate()?;
    let d = cfg.d_model;
    let mut r = rng::stream(cfg.seed, &[rng::TAG_ENCODER]);
    let mut b = Builder {
        store: ParamStore::default(),
        rng: &mut r,
    };
    let (fw1, fb1) = b.linear("frontend.conv1", FRONT_KERNEL * cfg.input_dim, d);
    let (fw2, fb2) = b.linear("frontend.conv2", FRONT_KERNEL * d, d);
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let p = format!("blocks.{l}");
        let ff1 = b.ffn(&format!("{p}.ffn1"), d, d * cfg.ffn_expansion);
        let ln = b.layer_norm(&format!("{p}.attn.norm"), d);
        let (wq, bq) = b.linear(&format!("{p}.attn.query"), d, d);
        let (wk, bk) = b.linear(&format!("{p}.attn.key"), d, d);
        let (wv, bv) = b.linear(&format!("{p}.attn.value"), d, d);
        let (wo, bo) = b.linear(&format!("{p}.attn.out"), d, d);
        let rel = b.zeros(format!("{p}.attn.rel_bias"), cfg.n_heads, 2 * cfg.max_rel_dist + 1);
        let attn = Attention {
            ln,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            rel,
        };
        let cln = b.layer_norm(&format!("{p}.conv.norm"), d);
        let (pw1, pb1) = b.linear(&format!("{p}.conv.pointwise1"), d, 2 * d);
        let dw = b.uniform(format!("{p}.conv.depthwise.weight"), cfg.conv_kernel, d, cfg.conv_kernel);
        let db = b.zeros(format!("{p}.conv.depthwise.bias"), 1, d);
        let ln_mid = b.layer_norm(&format!("{p}.conv.mid_norm"), d);
        let (pw2, pb2) = b.linear(&format!("{p}.conv.pointwise2"), d, d);
        let conv = ConvModule {
            ln: cln,
            pw1,
            pb1,
            dw,
            db,
            ln_mid,
            pw2,
            pb2,
        };
        let ff2 = b.ffn(&format!("{p}.ffn2"), d, d * cfg.ffn_expansion);
        let ln_out = b.layer_norm(&format!("{p}.final_norm"), d);
        blocks.push(Block {
            ff1,
            attn,
            conv,
            ff2,
            ln_out,
        });
    }
    let heads = (0..cfg.n_heads_out).map(|n| b.linear(&format!("heads.{n}"), d, cfg.vocab)).collect();
    Ok(Encoder {
        cfg: cfg.clone(),
        params: Arc::new(b.store),
        layout: Layout {
            front: [fw1, fb1, fw2, fb2],
            blocks,
            heads,
        },
    })
}

/// Result of a forward pass over a batch. Each utterance is evaluated in its
/// own graph, so outputs carry no padding internally.
pub struct ForwardOutput<F: Real> {
    /// `probs[b][n]` is the flattened `out_lengths[b] x V` distribution of head `n`.
    pub probs: Vec<Vec<Vec<f64>>>,
    pub out_lengths: Vec<usize>,
    graphs: Vec<Graph<F>>,
    logits: Vec<Vec<Var>>,
    version: u64,
}

impl<F: Real> ForwardOutput<F> {
    /// `N x B x T'max x V` with uniform rows past each utterance's length.
    pub fn padded(&self, vocab: usize) -> Vec<Vec<Vec<f64>>> {
        let n_heads = self.probs.first().map_or(0, Vec::len);
        let t_max = self.out_lengths.iter().copied().max().unwrap_or(0);
        (0..n_heads)
            .map(|n| {
                self.probs
                    .iter()
                    .map(|p| {
                        let mut row = p[n].clone();
                        row.resize(t_max * vocab, 1.0 / vocab as f64);
                        row
                    })
                    .collect()
            })
            .collect()
    }
}

/// Per-parameter gradients, aligned with [`Encoder::param_names`].
#[derive(Debug, Clone)]
pub struct Gradients<F: Real> {
    pub tensors: Vec<Mat<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|m| m.data.iter())
            .map(|v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        let s = F::of(s);
        self.tensors.iter_mut().flat_map(|m| m.data.iter_mut()).for_each(|v| *v *= s);
    }

    pub fn add_assign(&mut self, other: &Gradients<F>) {
        self.tensors.iter_mut().zip(&other.tensors).for_each(|(a, b)| a.add_assign(b));
    }
}

struct Dropout<R> {
    p: f64,
    rng: Option<R>,
}

impl<R: Rng> Dropout<R> {
    fn apply<F: Real>(&mut self, g: &mut Graph<F>, x: Var) -> Var {
        let Some(r) = self.rng.as_mut() else { return x };
        if self.p == 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - self.p);
        let n = g.value(x).len();
        let mask = (0..n)
            .map(|_| if r.random::<f64>() < self.p { F::zero() } else { F::of(keep) })
            .collect();
        g.mul_const(x, mask)
    }
}

impl<F: Real> Encoder<F> {
    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    /// Mutable parameter access; invalidates outstanding forward outputs.
    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        let store = Arc::make_mut(&mut self.params);
        store.tensors_mut();
        store
    }

    pub fn param_names(&self) -> &[String] {
        self.params.names()
    }

    pub fn n_parameters(&self) -> usize {
        self.params.n_scalars()
    }

    /// Replaces every tensor, e.g. when loading a checkpoint. Names and shapes must match.
    pub fn load_tensors(&mut self, tensors: Vec<(String, Mat<F>)>) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                self.params.len(),
                tensors.len()
            )));
        }
        let store = self.params_mut();
        for (name, m) in tensors {
            let i = store
                .index_of(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            let cur = store.tensor_mut(i);
            if (cur.rows, cur.cols) != (m.rows, m.cols) {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {}x{}, expected {}x{}",
                    m.rows, m.cols, cur.rows, cur.cols
                )));
            }
            *cur = m;
        }
        Ok(())
    }

    /// Same architecture evaluated in another precision.
    pub fn cast<G: Real>(&self) -> Encoder<G> {
        Encoder {
            cfg: self.cfg.clone(),
            params: Arc::new(self.params.cast()),
            layout: self.layout.clone(),
        }
    }

    /// Runs every utterance through the network. `features[b]` must be
    /// normalized (and masked, for pre-training) `T_b x input_dim` frames.
    pub fn forward(&self, features: &[&FeatureSequence], mode: Mode) -> Result<ForwardOutput<F>> {
        let mut out = ForwardOutput {
            probs: Vec::with_capacity(features.len()),
            out_lengths: Vec::with_capacity(features.len()),
            graphs: Vec::with_capacity(features.len()),
            logits: Vec::with_capacity(features.len()),
            version: self.params.version(),
        };
        for (b, seq) in features.iter().enumerate() {
            if seq.dim != self.cfg.input_dim {
                return Err(Error::shape(format!(
                    "utterance {b} has feature dim {}, encoder expects {}",
                    seq.dim, self.cfg.input_dim
                )));
            }
            let (g, heads, probs) = self.forward_one(&seq.data, seq.frames, mode, b as u64)?;
            out.out_lengths.push(self.cfg.output_len(seq.frames));
            out.probs.push(probs);
            out.graphs.push(g);
            out.logits.push(heads);
        }
        Ok(out)
    }

    /// Padded-batch entry point: `data` is `B x T x input_dim`, and only the
    /// first `lengths[b]` frames of each row are used.
    pub fn forward_padded(&self, data: &[f64], t: usize, lengths: &[usize], mode: Mode) -> Result<ForwardOutput<F>> {
        let dim = self.cfg.input_dim;
        if data.len() != lengths.len() * t * dim {
            return Err(Error::shape(format!(
                "batch buffer has {} values, expected {}x{t}x{dim}",
                data.len(),
                lengths.len()
            )));
        }
        let seqs = lengths
            .iter()
            .enumerate()
            .map(|(b, &len)| {
                if len > t {
                    return Err(Error::invalid(format!("length {len} of utterance {b} exceeds T={t}")));
                }
                let start = b * t * dim;
                FeatureSequence::new(
                    data[start..start + len * dim].to_vec(),
                    len,
                    dim,
                    crate::features::FeatureKind::LogMel,
                    100.0,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        self.forward(&seqs.iter().collect::<Vec<_>>(), mode)
    }

    fn forward_one(&self, data: &[f64], frames: usize, mode: Mode, index: u64) -> Result<(Graph<F>, Vec<Var>, Vec<Vec<f64>>)> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite value in encoder input"));
        }
        let cfg = &self.cfg;
        let t1 = frames / 2;
        let t2 = t1 / 2;
        if t2 == 0 {
            return Err(Error::SignalTooShort {
                len: frames,
                need: SUBSAMPLE_FACTOR,
            });
        }
        let mut drop = Dropout {
            p: cfg.dropout,
            rng: match mode {
                Mode::Eval => None,
                Mode::Train { dropout_seed } => Some(rng::stream(dropout_seed, &[rng::TAG_DROPOUT, index])),
            },
        };
        let mut g = Graph::new(self.params.clone());
        let l = &self.layout;
        let x = g.input(Mat::from_f64(frames, cfg.input_dim, data));

        let u = g.im2col(x, FRONT_KERNEL, 2, 1, t1);
        let x = linear(&mut g, u, l.front[0], l.front[1]);
        let x = g.silu(x);
        let u = g.im2col(x, FRONT_KERNEL, 2, 1, t2);
        let x = linear(&mut g, u, l.front[2], l.front[3]);
        let x = g.silu(x);
        let mut x = drop.apply(&mut g, x);

        for blk in &l.blocks {
            let h = self.ffn(&mut g, x, &blk.ff1, &mut drop);
            let h = g.scale(h, 0.5);
            x = g.add(x, h);
            let h = self.attention(&mut g, x, &blk.attn, &mut drop);
            x = g.add(x, h);
            let h = self.conv_module(&mut g, x, &blk.conv, &mut drop);
            x = g.add(x, h);
            let h = self.ffn(&mut g, x, &blk.ff2, &mut drop);
            let h = g.scale(h, 0.5);
            x = g.add(x, h);
            x = norm(&mut g, x, blk.ln_out);
        }

        let v = cfg.vocab;
        let mut heads = Vec::with_capacity(l.heads.len());
        let mut probs = Vec::with_capacity(l.heads.len());
        for &(w, b) in &l.heads {
            let logits = linear(&mut g, x, w, b);
            let mut p = g.value(logits).to_f64();
            p.chunks_mut(v).for_each(softmax_in_place);
            heads.push(logits);
            probs.push(p);
        }
        Ok((g, heads, probs))
    }

    fn ffn<R: Rng>(&self, g: &mut Graph<F>, x: Var, f: &Ffn, drop: &mut Dropout<R>) -> Var {
        let h = norm(g, x, f.ln);
        let h = linear(g, h, f.w1, f.b1);
        let h = g.silu(h);
        let h = linear(g, h, f.w2, f.b2);
        drop.apply(g, h)
    }

    fn attention<R: Rng>(&self, g: &mut Graph<F>, x: Var, a: &Attention, drop: &mut Dropout<R>) -> Var {
        let h = norm(g, x, a.ln);
        let q = linear(g, h, a.wq, a.bq);
        let k = linear(g, h, a.wk, a.bk);
        let v = linear(g, h, a.wv, a.bv);
        let dh = self.cfg.d_model / self.cfg.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let rel = g.param(a.rel);
        let mut ctx = Vec::with_capacity(self.cfg.n_heads);
        for head in 0..self.cfg.n_heads {
            let qh = g.slice_cols(q, head * dh, dh);
            let kh = g.slice_cols(k, head * dh, dh);
            let vh = g.slice_cols(v, head * dh, dh);
            let s = g.matmul_t(qh, kh);
            let s = g.scale(s, scale);
            let s = g.rel_bias(s, rel, head, self.cfg.max_rel_dist);
            let p = g.softmax(s);
            ctx.push(g.matmul(p, vh));
        }
        let c = g.concat_cols(&ctx);
        let o = linear(g, c, a.wo, a.bo);
        drop.apply(g, o)
    }

    fn conv_module<R: Rng>(&self, g: &mut Graph<F>, x: Var, c: &ConvModule, drop: &mut Dropout<R>) -> Var {
        let h = norm(g, x, c.ln);
        let h = linear(g, h, c.pw1, c.pb1);
        let h = g.glu(h);
        let w = g.param(c.dw);
        let h = g.depthwise_conv(h, w);
        let b = g.param(c.db);
        let h = g.add_row(h, b);
        let h = norm(g, h, c.ln_mid);
        let h = g.silu(h);
        let h = linear(g, h, c.pw2, c.pb2);
        drop.apply(g, h)
    }

    /// Backpropagates `upstream[b][n]`, the loss gradient with respect to
    /// head `n`'s logits of utterance `b` (flattened like `probs`), and sums
    /// over the batch.
    pub fn backward(&self, out: &ForwardOutput<F>, upstream: &[Vec<Vec<f64>>]) -> Result<Gradients<F>> {
        if out.version != self.params.version() || out.graphs.iter().any(|g| !Arc::ptr_eq(g.params(), &self.params)) {
            return Err(Error::StaleCache);
        }
        if upstream.len() != out.graphs.len() {
            return Err(Error::shape(format!(
                "upstream covers {} utterances, forward had {}",
                upstream.len(),
                out.graphs.len()
            )));
        }
        let mut total = Gradients {
            tensors: self.params.tensors().iter().map(|m| Mat::zeros(m.rows, m.cols)).collect(),
        };
        for ((g, heads), up) in out.graphs.iter().zip(&out.logits).zip(upstream) {
            if up.len() != heads.len() {
                return Err(Error::shape(format!("upstream has {} heads, encoder has {}", up.len(), heads.len())));
            }
            let mut seeds = Vec::with_capacity(heads.len());
            for (&h, u) in heads.iter().zip(up) {
                let shape = g.value(h);
                if u.len() != shape.len() {
                    return Err(Error::shape(format!("upstream gradient has {} values, expected {}", u.len(), shape.len())));
                }
                seeds.push((h, Mat::from_f64(shape.rows, shape.cols, u)));
            }
            for (acc, gr) in total.tensors.iter_mut().zip(g.backward(&seeds)) {
                acc.add_assign(&gr);
            }
        }
        Ok(total)
    }
}

fn linear<F: Real>(g: &mut Graph<F>, x: Var, w: usize, b: usize) -> Var {
    let w = g.param(w);
    let b = g.param(b);
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

fn norm<F: Real>(g: &mut Graph<F>, x: Var, (gamma, beta): (usize, usize)) -> Var {
    let gamma = g.param(gamma);
    let beta = g.param(beta);
    g.layer_norm(x, gamma, beta)
}
