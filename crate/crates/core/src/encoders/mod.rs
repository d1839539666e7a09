//! Definition encoders `E(S)`: linear bag-of-words, convolutional, GRU and
//! attentive GRU. Every encoder maps a padded token sequence to a vector in
//! the `dim`-dimensional word embedding space and has a hand-written backward
//! pass.
//!
//! All encoders only look at the real tokens of a [`PaddedSeq`]; padding
//! never influences the output.

mod attention;
mod conv;
mod gru;

use std::fmt;
use std::str::FromStr;

use rand::RngCore;

pub use attention::{attentive_pool, attentive_pool_backward, AttentionLayer, AttentionTrace};
pub use conv::{conv_layer, max_pool, ConvLayer};
pub use gru::{GruLayer, GruStep};

use crate::corpus::PaddedSeq;
use crate::error::{Error, Result};
use crate::numerics::{axpy, matvec_acc, matvec_t_acc, outer_acc, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EncoderKind {
    Bow,
    Cnn,
    Gru,
    Att,
}

impl EncoderKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EncoderKind::Bow => "bow",
            EncoderKind::Cnn => "cnn",
            EncoderKind::Gru => "gru",
            EncoderKind::Att => "att",
        }
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bow" => Ok(EncoderKind::Bow),
            "cnn" => Ok(EncoderKind::Cnn),
            "gru" => Ok(EncoderKind::Gru),
            "att" => Ok(EncoderKind::Att),
            other => Err(Error::Config(format!(
                "unknown encoder `{other}` (expected bow, cnn, gru or att)"
            ))),
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub layers: usize,
    pub hidden: usize,
    pub seq_len: usize,
    /// Convolution width (cnn only).
    pub kernel: usize,
    /// Max-pool size and stride (cnn only).
    pub pool: usize,
    /// Embedding dimension `k`.
    pub dim: usize,
    /// Pool attention states as `(1/|S|) Σ h2_t` instead of `(1/|S|) Σ a_t h2_t`.
    pub attention_single_weight: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Att,
            layers: 5,
            hidden: 200,
            seq_len: 15,
            kernel: 2,
            pool: 2,
            dim: 50,
            attention_single_weight: false,
        }
    }
}

impl EncoderConfig {
    pub fn new(kind: EncoderKind, dim: usize) -> Self {
        EncoderConfig {
            kind,
            dim,
            ..EncoderConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 || self.hidden < 1 || self.seq_len < 1 || self.dim < 1 {
            return Err(Error::Config(format!(
                "layers, hidden, seq_len and dim must all be >= 1 (got {}, {}, {}, {})",
                self.layers, self.hidden, self.seq_len, self.dim
            )));
        }
        if self.kind == EncoderKind::Cnn {
            if self.kernel < 1 || self.pool < 1 || self.kernel > self.seq_len {
                return Err(Error::Config(format!(
                    "cnn needs 1 <= kernel <= seq_len and pool >= 1 (kernel {}, pool {}, seq_len {})",
                    self.kernel, self.pool, self.seq_len
                )));
            }
            if self.min_tokens().is_none_or(|m| m > self.seq_len) {
                return Err(Error::Config(format!(
                    "a {}-layer cnn with kernel {} and pool {} cannot encode sequences of length {}",
                    self.layers, self.kernel, self.pool, self.seq_len
                )));
            }
        }
        Ok(())
    }

    /// Shortest sequence the encoder accepts. Only the cnn has a bound above 1;
    /// `None` when no length up to 10 000 works.
    pub fn min_tokens(&self) -> Option<usize> {
        if self.kind != EncoderKind::Cnn {
            return Some(1);
        }
        (1..=10_000).find(|&n| cnn_lengths(n, self.layers, self.kernel, self.pool).is_some())
    }

    fn head_mid(&self) -> usize {
        (self.hidden / 2).max(1)
    }
}

/// Per-layer pooled lengths of the cnn stack, or `None` if some layer gets
/// fewer than `kernel` positions.
fn cnn_lengths(mut len: usize, layers: usize, kernel: usize, pool: usize) -> Option<Vec<usize>> {
    let mut out = Vec::with_capacity(layers);
    for _ in 0..layers {
        if len < kernel {
            return None;
        }
        len = (len - kernel + 1).div_ceil(pool);
        out.push(len);
    }
    Some(out)
}

/// Creates fresh slots (Glorot weights, zero biases) or attaches to the
/// slots of an existing store by name.
pub(crate) enum SlotSource<'a> {
    Create {
        store: &'a mut ParamStore,
        rng: &'a mut dyn RngCore,
    },
    Attach {
        store: &'a ParamStore,
    },
}

impl<'a> SlotSource<'a> {
    pub(crate) fn create(store: &'a mut ParamStore, rng: &'a mut dyn RngCore) -> Self {
        SlotSource::Create { store, rng }
    }

    fn slot(&mut self, name: &str, rows: usize, cols: usize, bias: bool) -> Result<ParamId> {
        match self {
            SlotSource::Create { store, rng } => {
                let value = if bias {
                    Tensor::zeros(rows, cols)
                } else {
                    Tensor::glorot(rows, cols, &mut **rng)
                };
                store.add(name, value)
            }
            SlotSource::Attach { store } => {
                let id = store
                    .id(name)
                    .ok_or_else(|| Error::Integrity(format!("missing parameter `{name}`")))?;
                if store.value(id).shape() != (rows, cols) {
                    return Err(Error::Integrity(format!(
                        "parameter `{name}` is {:?}, configuration implies {:?}",
                        store.value(id).shape(),
                        (rows, cols)
                    )));
                }
                Ok(id)
            }
        }
    }

    pub(crate) fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        self.slot(name, rows, cols, false)
    }

    pub(crate) fn bias(&mut self, name: &str, len: usize) -> Result<ParamId> {
        self.slot(name, len, 1, true)
    }
}

/// Two affine layers `hidden -> hidden/2 -> dim` with tanh in between.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReductionHead {
    pub a1: ParamId,
    pub c1: ParamId,
    pub a2: ParamId,
    pub c2: ParamId,
}

#[derive(Clone, Debug)]
pub struct HeadTrace {
    input: Vec<f64>,
    mid: Vec<f64>,
}

impl ReductionHead {
    fn build(src: &mut SlotSource<'_>, input: usize, mid: usize, out: usize) -> Result<Self> {
        Ok(ReductionHead {
            a1: src.matrix("enc.head.a1", mid, input)?,
            c1: src.bias("enc.head.c1", mid)?,
            a2: src.matrix("enc.head.a2", out, mid)?,
            c2: src.bias("enc.head.c2", out)?,
        })
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.a1, self.c1, self.a2, self.c2]
    }

    pub fn forward(&self, p: &[Tensor], x: &[f64]) -> (Vec<f64>, HeadTrace) {
        let mut mid = p[self.c1].data().to_vec();
        matvec_acc(&p[self.a1], x, &mut mid);
        mid.iter_mut().for_each(|v| *v = v.tanh());
        let mut out = p[self.c2].data().to_vec();
        matvec_acc(&p[self.a2], &mid, &mut out);
        (out, HeadTrace { input: x.to_vec(), mid })
    }

    pub fn backward(&self, p: &[Tensor], tr: &HeadTrace, dout: &[f64], g: &mut [Tensor]) -> Vec<f64> {
        outer_acc(&mut g[self.a2], dout, &tr.mid);
        axpy(1.0, dout, g[self.c2].data_mut());
        let mut dmid = vec![0.0; tr.mid.len()];
        matvec_t_acc(&p[self.a2], dout, &mut dmid);
        for (d, m) in dmid.iter_mut().zip(&tr.mid) {
            *d *= 1.0 - m * m;
        }
        outer_acc(&mut g[self.a1], &dmid, &tr.input);
        axpy(1.0, &dmid, g[self.c1].data_mut());
        let mut dx = vec![0.0; tr.input.len()];
        matvec_t_acc(&p[self.a1], &dmid, &mut dx);
        dx
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Arch {
    Bow { mb: ParamId },
    Cnn { convs: Vec<ConvLayer>, head: ReductionHead },
    Gru { grus: Vec<GruLayer>, head: ReductionHead },
    Att { grus: Vec<GruLayer>, att: AttentionLayer, head: ReductionHead },
}

/// A definition encoder bound to its parameter slots (named `enc.*`).
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    cfg: EncoderConfig,
    arch: Arch,
}

#[derive(Clone, Debug)]
struct CnnLayerTrace {
    input: Vec<Vec<f64>>,
    conv: Vec<Vec<f64>>,
    argmax: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
struct GruLayerTrace {
    input: Vec<Vec<f64>>,
    steps: Vec<GruStep>,
}

#[derive(Clone, Debug)]
enum Inner {
    Bow,
    Cnn {
        layers: Vec<CnnLayerTrace>,
        last_len: usize,
        head: HeadTrace,
    },
    Gru {
        layers: Vec<GruLayerTrace>,
        head: HeadTrace,
    },
    Att {
        layers: Vec<GruLayerTrace>,
        att: AttentionTrace,
        head: HeadTrace,
    },
}

/// Forward-pass record needed by [`Encoder::backward`].
#[derive(Clone, Debug)]
pub struct Trace {
    pub output: Vec<f64>,
    tokens: Vec<usize>,
    xs: Vec<Vec<f64>>,
    inner: Inner,
}

impl Trace {
    /// Attention weights over the real tokens (attentive encoder only).
    pub fn attention_weights(&self) -> Option<&[f64]> {
        match &self.inner {
            Inner::Att { att, .. } => Some(&att.weights),
            _ => None,
        }
    }
}

impl Encoder {
    /// Register freshly initialized parameters in `store`.
    pub fn new(cfg: EncoderConfig, store: &mut ParamStore, rng: &mut dyn RngCore) -> Result<Self> {
        cfg.validate()?;
        let mut src = SlotSource::create(store, rng);
        let arch = Self::build(&cfg, &mut src)?;
        Ok(Encoder { cfg, arch })
    }

    /// Bind to parameters already present in `store` (e.g. from a checkpoint).
    pub fn attach(cfg: EncoderConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut src = SlotSource::Attach { store };
        let arch = Self::build(&cfg, &mut src)?;
        Ok(Encoder { cfg, arch })
    }

    fn build(cfg: &EncoderConfig, src: &mut SlotSource<'_>) -> Result<Arch> {
        let grus = |src: &mut SlotSource<'_>| -> Result<Vec<GruLayer>> {
            (0..cfg.layers)
                .map(|l| {
                    let input = if l == 0 { cfg.dim } else { cfg.hidden };
                    GruLayer::build(src, &format!("enc.gru{l}"), input, cfg.hidden)
                })
                .collect()
        };
        Ok(match cfg.kind {
            EncoderKind::Bow => Arch::Bow {
                mb: src.matrix("enc.bow.mb", cfg.dim, cfg.dim)?,
            },
            EncoderKind::Cnn => {
                let convs = (0..cfg.layers)
                    .map(|l| {
                        let input = if l == 0 { cfg.dim } else { cfg.hidden };
                        ConvLayer::build(src, &format!("enc.conv{l}"), input, cfg.hidden, cfg.kernel)
                    })
                    .collect::<Result<_>>()?;
                let head = ReductionHead::build(src, cfg.hidden, cfg.head_mid(), cfg.dim)?;
                Arch::Cnn { convs, head }
            }
            EncoderKind::Gru => {
                let grus = grus(src)?;
                let head = ReductionHead::build(src, cfg.hidden, cfg.head_mid(), cfg.dim)?;
                Arch::Gru { grus, head }
            }
            EncoderKind::Att => {
                let grus = grus(src)?;
                let att = AttentionLayer::build(src, "enc.att", cfg.hidden)?;
                let head = ReductionHead::build(src, cfg.hidden, cfg.head_mid(), cfg.dim)?;
                Arch::Att { grus, att, head }
            }
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn kind(&self) -> EncoderKind {
        self.cfg.kind
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match &self.arch {
            Arch::Bow { mb } => vec![*mb],
            Arch::Cnn { convs, head } => convs
                .iter()
                .flat_map(|c| c.ids())
                .chain(head.ids())
                .collect(),
            Arch::Gru { grus, head } => grus.iter().flat_map(|g| g.ids()).chain(head.ids()).collect(),
            Arch::Att { grus, att, head } => grus
                .iter()
                .flat_map(|g| g.ids())
                .chain(att.ids())
                .chain(head.ids())
                .collect(),
        }
    }

    pub fn head(&self) -> Option<&ReductionHead> {
        match &self.arch {
            Arch::Bow { .. } => None,
            Arch::Cnn { head, .. } | Arch::Gru { head, .. } | Arch::Att { head, .. } => Some(head),
        }
    }

    pub fn gru_layers(&self) -> &[GruLayer] {
        match &self.arch {
            Arch::Gru { grus, .. } | Arch::Att { grus, .. } => grus,
            _ => &[],
        }
    }

    pub fn attention(&self) -> Option<&AttentionLayer> {
        match &self.arch {
            Arch::Att { att, .. } => Some(att),
            _ => None,
        }
    }

    pub fn bow_projection(&self) -> Option<ParamId> {
        match &self.arch {
            Arch::Bow { mb } => Some(*mb),
            _ => None,
        }
    }

    /// Encode and return only the output vector.
    pub fn encode(&self, p: &[Tensor], emb: &Tensor, seq: &PaddedSeq) -> Result<Vec<f64>> {
        Ok(self.forward(p, emb, seq)?.output)
    }

    pub fn forward(&self, p: &[Tensor], emb: &Tensor, seq: &PaddedSeq) -> Result<Trace> {
        if seq.len == 0 {
            return Err(Error::Contract("cannot encode an all-padding sequence".into()));
        }
        if emb.cols() != self.cfg.dim {
            return Err(Error::dim(
                "encoder",
                format!("embeddings have width {}, encoder expects {}", emb.cols(), self.cfg.dim),
            ));
        }
        let tokens = seq.tokens().to_vec();
        if let Some(&bad) = tokens.iter().find(|&&t| t >= emb.rows()) {
            return Err(Error::Contract(format!(
                "token index {bad} outside a vocabulary of {}",
                emb.rows()
            )));
        }
        let xs: Vec<Vec<f64>> = tokens.iter().map(|&t| emb.row(t).to_vec()).collect();

        let (output, inner) = match &self.arch {
            Arch::Bow { mb } => {
                let mut out = vec![0.0; self.cfg.dim];
                for x in &xs {
                    matvec_acc(&p[*mb], x, &mut out);
                }
                (out, Inner::Bow)
            }
            Arch::Cnn { convs, head } => {
                let mut layers = Vec::with_capacity(convs.len());
                let mut cur = xs.clone();
                for conv in convs {
                    if cur.len() < self.cfg.kernel {
                        return Err(Error::Contract(format!(
                            "sequence of {} tokens is shorter than the receptive field of a {}-layer cnn",
                            tokens.len(),
                            self.cfg.layers
                        )));
                    }
                    let out = conv.forward(p, &cur)?;
                    let (pooled, argmax) = max_pool(&out, self.cfg.pool);
                    layers.push(CnnLayerTrace {
                        input: std::mem::replace(&mut cur, pooled),
                        conv: out,
                        argmax,
                    });
                }
                let mut mean = vec![0.0; self.cfg.hidden];
                for v in &cur {
                    axpy(1.0 / cur.len() as f64, v, &mut mean);
                }
                let (out, htr) = head.forward(p, &mean);
                (
                    out,
                    Inner::Cnn {
                        layers,
                        last_len: cur.len(),
                        head: htr,
                    },
                )
            }
            Arch::Gru { grus, head } => {
                let layers = run_grus(grus, p, &xs)?;
                let last = &layers.last().expect("layers >= 1").steps.last().expect("len >= 1").h;
                let (out, htr) = head.forward(p, last);
                (out, Inner::Gru { layers, head: htr })
            }
            Arch::Att { grus, att, head } => {
                let layers = run_grus(grus, p, &xs)?;
                let states: Vec<Vec<f64>> = layers
                    .last()
                    .expect("layers >= 1")
                    .steps
                    .iter()
                    .map(|s| s.h.clone())
                    .collect();
                let atr = att.forward(p, &states)?;
                let pooled = attentive_pool(&atr, self.cfg.attention_single_weight);
                let (out, htr) = head.forward(p, &pooled);
                (
                    out,
                    Inner::Att {
                        layers,
                        att: atr,
                        head: htr,
                    },
                )
            }
        };
        Ok(Trace {
            output,
            tokens,
            xs,
            inner,
        })
    }

    /// Accumulate gradients of `dout · E(S)` into `g`. Word-embedding
    /// gradients go to slot `emb_grad` when given.
    pub fn backward(&self, p: &[Tensor], tr: &Trace, dout: &[f64], g: &mut [Tensor], emb_grad: Option<ParamId>) {
        let dxs: Vec<Vec<f64>> = match (&self.arch, &tr.inner) {
            (Arch::Bow { mb }, Inner::Bow) => {
                let mut dx = vec![0.0; self.cfg.dim];
                matvec_t_acc(&p[*mb], dout, &mut dx);
                for x in &tr.xs {
                    outer_acc(&mut g[*mb], dout, x);
                }
                vec![dx; tr.xs.len()]
            }
            (
                Arch::Cnn { convs, head },
                Inner::Cnn {
                    layers,
                    last_len,
                    head: htr,
                },
            ) => {
                let dmean = head.backward(p, htr, dout, g);
                let scale = 1.0 / *last_len as f64;
                let mut dpooled = vec![dmean.iter().map(|d| d * scale).collect::<Vec<_>>(); *last_len];
                for (conv, lt) in convs.iter().zip(layers).rev() {
                    let mut dconv = vec![vec![0.0; self.cfg.hidden]; lt.conv.len()];
                    for (dp, arg) in dpooled.iter().zip(&lt.argmax) {
                        for (d, (&v, &src)) in dp.iter().zip(arg).enumerate() {
                            dconv[src][d] += v;
                        }
                    }
                    dpooled = conv.backward(p, &lt.input, &lt.conv, &dconv, g);
                }
                dpooled
            }
            (Arch::Gru { grus, head }, Inner::Gru { layers, head: htr }) => {
                let dlast = head.backward(p, htr, dout, g);
                let n = tr.xs.len();
                let mut dhs = vec![vec![0.0; self.cfg.hidden]; n];
                dhs[n - 1] = dlast;
                backprop_grus(grus, p, layers, dhs, g)
            }
            (
                Arch::Att { grus, att, head },
                Inner::Att {
                    layers,
                    att: atr,
                    head: htr,
                },
            ) => {
                let dpooled = head.backward(p, htr, dout, g);
                let (du, da) = attentive_pool_backward(atr, &dpooled, self.cfg.attention_single_weight);
                let states: Vec<Vec<f64>> = layers
                    .last()
                    .expect("layers >= 1")
                    .steps
                    .iter()
                    .map(|s| s.h.clone())
                    .collect();
                let dhs = att.backward(p, &states, atr, du, &da, g);
                backprop_grus(grus, p, layers, dhs, g)
            }
            _ => unreachable!("trace produced by a different encoder"),
        };
        if let Some(eid) = emb_grad {
            for (&t, dx) in tr.tokens.iter().zip(&dxs) {
                axpy(1.0, dx, g[eid].row_mut(t));
            }
        }
    }
}

fn run_grus(grus: &[GruLayer], p: &[Tensor], xs: &[Vec<f64>]) -> Result<Vec<GruLayerTrace>> {
    let mut out: Vec<GruLayerTrace> = Vec::with_capacity(grus.len());
    for gl in grus {
        let input = match out.last() {
            None => xs.to_vec(),
            Some(prev) => prev.steps.iter().map(|s| s.h.clone()).collect(),
        };
        let steps = gl.forward_seq(p, &input)?;
        out.push(GruLayerTrace { input, steps });
    }
    Ok(out)
}

fn backprop_grus(
    grus: &[GruLayer],
    p: &[Tensor],
    layers: &[GruLayerTrace],
    mut dhs: Vec<Vec<f64>>,
    g: &mut [Tensor],
) -> Vec<Vec<f64>> {
    for (gl, lt) in grus.iter().zip(layers).rev() {
        dhs = gl.backward_seq(p, &lt.input, &lt.steps, &dhs, g);
    }
    dhs
}
