//! Dictionary model training: single direction, bilingual multi-task, and the
//! asynchronous joint objective with four workers.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bilembed::{
    alignment_loss_grad, skipgram_batch_loss_grad, two_mut, AlignStream, EmbeddingSpace, EncodedPair, LangTable,
    SkipGramConfig, SkipGramSample, SkipGramStream,
};
use crate::corpus::{pad_or_truncate, DictionaryEntry, Lang, PaddedSeq, ParallelPair, Vocabulary, PAD, UNK};
use crate::encoders::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::{axpy, clip_grad_norm, OptConfig, ParamId, ParamStore, SharedParams, Tensor};

/// Word embeddings of two languages plus one shared definition encoder, all
/// held in a single [`ParamStore`].
///
/// Slots: `emb.<lang>` (input embeddings), `ctx.<lang>` (Skip-Gram output
/// embeddings) and the encoder's `enc.*`.
#[derive(Clone, Debug)]
pub struct Model {
    encoder: Encoder,
    store: ParamStore,
    vocabs: Vec<Vocabulary>,
    emb: Vec<ParamId>,
    ctx: Vec<ParamId>,
}

impl Model {
    pub fn new(space: &EmbeddingSpace, enc: EncoderConfig, rng: &mut dyn RngCore) -> Result<Self> {
        if space.tables().len() != 2 {
            return Err(Error::Config(format!(
                "a dictionary model needs exactly two languages, got {}",
                space.tables().len()
            )));
        }
        if enc.dim != space.dim() {
            return Err(Error::Config(format!(
                "encoder dimension {} differs from embedding dimension {}",
                enc.dim,
                space.dim()
            )));
        }
        let mut store = ParamStore::new();
        let mut emb = Vec::new();
        let mut ctx = Vec::new();
        for t in space.tables() {
            let lang = t.vocab.lang();
            emb.push(store.add(format!("emb.{lang}"), t.input.clone())?);
            ctx.push(store.add(format!("ctx.{lang}"), t.output.clone())?);
        }
        let encoder = Encoder::new(enc, &mut store, rng)?;
        Ok(Model {
            encoder,
            store,
            vocabs: space.tables().iter().map(|t| t.vocab.clone()).collect(),
            emb,
            ctx,
        })
    }

    /// Rebuild from a parameter store that already holds every slot.
    pub fn from_parts(vocabs: Vec<Vocabulary>, store: ParamStore, enc: EncoderConfig) -> Result<Self> {
        if vocabs.len() != 2 {
            return Err(Error::Integrity(format!("expected two vocabularies, got {}", vocabs.len())));
        }
        let mut emb = Vec::new();
        let mut ctx = Vec::new();
        for v in &vocabs {
            for (prefix, out) in [("emb", &mut emb), ("ctx", &mut ctx)] {
                let name = format!("{prefix}.{}", v.lang());
                let id = store
                    .id(&name)
                    .ok_or_else(|| Error::Integrity(format!("missing parameter `{name}`")))?;
                if store.value(id).shape() != (v.len(), enc.dim) {
                    return Err(Error::Integrity(format!(
                        "`{name}` is {:?} but the vocabulary has {} words of dimension {}",
                        store.value(id).shape(),
                        v.len(),
                        enc.dim
                    )));
                }
                out.push(id);
            }
        }
        let encoder = Encoder::attach(enc, &store)?;
        Ok(Model {
            encoder,
            store,
            vocabs,
            emb,
            ctx,
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn vocabs(&self) -> &[Vocabulary] {
        &self.vocabs
    }

    pub fn langs(&self) -> [Lang; 2] {
        [self.vocabs[0].lang(), self.vocabs[1].lang()]
    }

    pub fn lang_pos(&self, lang: Lang) -> Result<usize> {
        self.vocabs
            .iter()
            .position(|v| v.lang() == lang)
            .ok_or_else(|| Error::Config(format!("model has no language {lang}")))
    }

    pub fn vocab(&self, lang: Lang) -> Result<&Vocabulary> {
        Ok(&self.vocabs[self.lang_pos(lang)?])
    }

    pub fn emb_id(&self, pos: usize) -> ParamId {
        self.emb[pos]
    }

    pub fn ctx_id(&self, pos: usize) -> ParamId {
        self.ctx[pos]
    }

    pub fn embeddings(&self, lang: Lang) -> Result<&Tensor> {
        Ok(self.store.value(self.emb[self.lang_pos(lang)?]))
    }

    pub fn space(&self) -> EmbeddingSpace {
        let tables = self
            .vocabs
            .iter()
            .enumerate()
            .map(|(i, v)| LangTable {
                vocab: v.clone(),
                input: self.store.value(self.emb[i]).clone(),
                output: self.store.value(self.ctx[i]).clone(),
            })
            .collect();
        EmbeddingSpace::from_tables(self.encoder.config().dim, tables).expect("model tables are consistent")
    }

    /// Map definition tokens to a padded index sequence of the encoder's length.
    pub fn sequence<S: AsRef<str>>(&self, def_lang: Lang, tokens: &[S]) -> Result<PaddedSeq> {
        let ids = self.vocab(def_lang)?.encode(tokens);
        Ok(pad_or_truncate(&ids, self.encoder.config().seq_len))
    }

    pub fn encode_seq(&self, def_pos: usize, seq: &PaddedSeq) -> Result<Vec<f64>> {
        let p = self.store.values();
        self.encoder.encode(p, &p[self.emb[def_pos]], seq)
    }

    /// Encode a tokenized definition written in `def_lang`.
    pub fn encode<S: AsRef<str>>(&self, def_lang: Lang, tokens: &[S]) -> Result<Vec<f64>> {
        let seq = self.sequence(def_lang, tokens)?;
        self.encode_seq(self.lang_pos(def_lang)?, &seq)
    }

    pub fn encode_entry(&self, e: &DictionaryEntry) -> Result<EncodedEntry> {
        let target_pos = self.lang_pos(e.target_lang)?;
        let def_pos = self.lang_pos(e.def_lang)?;
        let target = match self.vocabs[target_pos].get(&e.target_word) {
            Some(i) if i != PAD && i != UNK => i,
            _ => {
                return Err(Error::Training(format!(
                    "target word `{}` ({}) is not in the vocabulary",
                    e.target_word, e.target_lang
                )))
            }
        };
        let seq = self.sequence(e.def_lang, &e.definition)?;
        if let Some(min) = self.encoder.config().min_tokens() {
            if seq.len < min {
                return Err(Error::Ingestion(format!(
                    "definition of `{}` has {} tokens; the {} encoder needs at least {min}",
                    e.target_word,
                    seq.len,
                    self.encoder.kind()
                )));
            }
        }
        Ok(EncodedEntry {
            target_pos,
            target,
            def_pos,
            seq,
        })
    }

    /// FNV-1a over the bit patterns of every parameter value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.store.values() {
            for x in t.data() {
                for b in x.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    fn encoder_ids(&self) -> Vec<ParamId> {
        self.encoder.param_ids()
    }
}

/// A dictionary entry resolved against a [`Model`]'s vocabularies.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedEntry {
    pub target_pos: usize,
    pub target: usize,
    pub def_pos: usize,
    pub seq: PaddedSeq,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Single,
    Multitask,
    Joint,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Strategy::Single),
            "multitask" => Ok(Strategy::Multitask),
            "joint" => Ok(Strategy::Joint),
            other => Err(Error::Config(format!(
                "unknown strategy `{other}` (expected single, multitask or joint)"
            ))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Single => "single",
            Strategy::Multitask => "multitask",
            Strategy::Joint => "joint",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the two Skip-Gram losses in the joint objective.
    pub lambda1: f64,
    /// Weight of the alignment loss in the joint objective.
    pub lambda2: f64,
    pub opt: OptConfig,
    pub seed: u64,
    /// Global gradient-norm bound per dictionary update.
    pub clip_norm: Option<f64>,
    /// Run the joint components round-robin on one thread.
    pub sync: bool,
    pub skipgram: SkipGramConfig,
    /// Skip-Gram pairs per worker update.
    pub sg_batch_size: usize,
    /// Call the checkpoint hook every this many epochs (0 = never).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy: Strategy::Multitask,
            batch_size: 64,
            epochs: 1000,
            lambda1: 0.1,
            lambda2: 0.1,
            opt: OptConfig::default(),
            seed: 0,
            clip_norm: Some(5.0),
            sync: false,
            skipgram: SkipGramConfig::default(),
            sg_batch_size: 64,
            checkpoint_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.sg_batch_size == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config(format!(
                "lambda1 and lambda2 must be >= 0 (got {}, {})",
                self.lambda1, self.lambda2
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip norm {c} must be > 0")));
            }
        }
        self.skipgram.validate()?;
        self.opt.validate()
    }
}

/// Training material, already mapped to vocabulary indices.
///
/// `forward` holds `D_ij` (definitions in the first language, targets in the
/// second), `backward` holds `D_ji`.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub forward: Vec<EncodedEntry>,
    pub backward: Vec<EncodedEntry>,
    pub mono_a: Vec<Vec<usize>>,
    pub mono_b: Vec<Vec<usize>>,
    pub parallel: Vec<EncodedPair>,
}

impl TrainData {
    /// Split cross-lingual entries by direction. Monolingual entries are skipped.
    pub fn from_dictionary(model: &Model, entries: &[DictionaryEntry]) -> Result<Self> {
        let [a, b] = model.langs();
        let mut data = TrainData::default();
        for e in entries {
            if e.def_lang == a && e.target_lang == b {
                data.forward.push(model.encode_entry(e)?);
            } else if e.def_lang == b && e.target_lang == a {
                data.backward.push(model.encode_entry(e)?);
            }
        }
        Ok(data)
    }

    /// Attach the corpora used by the joint strategy.
    pub fn with_corpora(
        mut self,
        model: &Model,
        mono_a: &[Vec<String>],
        mono_b: &[Vec<String>],
        parallel: &[ParallelPair],
    ) -> Self {
        let [va, vb] = [&model.vocabs[0], &model.vocabs[1]];
        self.mono_a = mono_a.iter().map(|s| va.encode(s)).collect();
        self.mono_b = mono_b.iter().map(|s| vb.encode(s)).collect();
        self.parallel = parallel.iter().map(|p| EncodedPair::encode(p, va, vb)).collect();
        self
    }
}

/// Mean squared distance `(1/B) Σ ‖E(S) - w‖²` over `batch`.
///
/// Gradients of `weight` times the loss go to the encoder slots and, when
/// `train_embeddings` is set, to the definition and target word embeddings.
#[allow(clippy::too_many_arguments)]
pub fn dict_loss_grad(
    batch: &[&EncodedEntry],
    encoder: &Encoder,
    emb_ids: &[ParamId],
    p: &[Tensor],
    g: &mut [Tensor],
    weight: f64,
    train_embeddings: bool,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("empty dictionary batch".into()));
    }
    let scale = 2.0 * weight / batch.len() as f64;
    let mut total = 0.0;
    for e in batch {
        let def_emb = emb_ids[e.def_pos];
        let tgt_emb = emb_ids[e.target_pos];
        let tr = encoder.forward(p, &p[def_emb], &e.seq)?;
        let diff: Vec<f64> = tr.output.iter().zip(p[tgt_emb].row(e.target)).map(|(a, b)| a - b).collect();
        total += diff.iter().map(|d| d * d).sum::<f64>();
        let dout: Vec<f64> = diff.iter().map(|d| d * scale).collect();
        encoder.backward(p, &tr, &dout, g, train_embeddings.then_some(def_emb));
        if train_embeddings {
            axpy(-1.0, &dout, g[tgt_emb].row_mut(e.target));
        }
    }
    Ok(total / batch.len() as f64)
}

/// One epoch of batches over `D_ij ∪ D_ji`, shuffled together.
pub fn make_multitask_batches<'a, T, R: Rng + ?Sized>(
    d_ij: &'a [T],
    d_ji: &'a [T],
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<&'a T>>> {
    if d_ij.is_empty() && d_ji.is_empty() {
        return Err(Error::Config("both dictionaries are empty".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let mut all: Vec<&T> = d_ij.iter().chain(d_ji).collect();
    all.shuffle(rng);
    Ok(all.chunks(batch_size).map(<[&T]>::to_vec).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct JointLosses {
    pub dict: f64,
    pub sg_a: f64,
    pub sg_b: f64,
    pub align: f64,
}

impl JointLosses {
    /// `J = L^MT + λ1 (SG_A + SG_B) + λ2 Ω`.
    pub fn total(&self, lambda1: f64, lambda2: f64) -> f64 {
        self.dict + lambda1 * (self.sg_a + self.sg_b) + lambda2 * self.align
    }
}

/// All four components of the joint objective on one set of batches, with
/// gradients of `J` accumulated into `model`'s gradient slots.
pub fn joint_objective(
    model: &mut Model,
    dict: &[&EncodedEntry],
    sg_a: &[SkipGramSample],
    sg_b: &[SkipGramSample],
    parallel: &[EncodedPair],
    lambda1: f64,
    lambda2: f64,
) -> Result<JointLosses> {
    let (ea, eb, ca, cb) = (model.emb[0], model.emb[1], model.ctx[0], model.ctx[1]);
    let (p, g) = model.store.split();
    let dict = dict_loss_grad(dict, &model.encoder, &model.emb, p, g, 1.0, true)?;
    let (gi, go) = two_mut(g, ea, ca);
    let sg_a = skipgram_batch_loss_grad(sg_a, &p[ea], &p[ca], lambda1, gi, go)?;
    let (gi, go) = two_mut(g, eb, cb);
    let sg_b = skipgram_batch_loss_grad(sg_b, &p[eb], &p[cb], lambda1, gi, go)?;
    let (ga, gb) = two_mut(g, ea, eb);
    let align = alignment_loss_grad(parallel, &p[ea], &p[eb], lambda2, ga, gb)?;
    Ok(JointLosses { dict, sg_a, sg_b, align })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLosses {
    pub epoch: usize,
    pub dict: f64,
    pub sg_a: f64,
    pub sg_b: f64,
    pub align: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UpdateCounts {
    pub dict: u64,
    pub sg_a: u64,
    pub sg_b: u64,
    pub align: u64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochLosses>,
    pub wall_time: Duration,
    pub checksum: u64,
    pub updates: UpdateCounts,
}

impl TrainReport {
    pub fn final_dict_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.dict)
    }

    /// `epoch TAB dict_loss TAB sgA TAB sgB TAB align`, one line per epoch.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch\tdict_loss\tsgA\tsgB\talign")?;
        for e in &self.epochs {
            writeln!(w, "{}\t{:.8}\t{:.8}\t{:.8}\t{:.8}", e.epoch, e.dict, e.sg_a, e.sg_b, e.align)?;
        }
        Ok(())
    }
}

/// Called with `(epoch, model)` every `checkpoint_every` epochs.
pub type CheckpointHook<'a> = &'a mut dyn FnMut(usize, &Model) -> Result<()>;

pub fn run_training(cfg: &TrainConfig, data: &TrainData, model: Model) -> Result<(Model, TrainReport)> {
    run_training_with(cfg, data, model, None)
}

pub fn run_training_with(
    cfg: &TrainConfig,
    data: &TrainData,
    mut model: Model,
    hook: Option<CheckpointHook<'_>>,
) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let backward: &[EncodedEntry] = match cfg.strategy {
        Strategy::Single => &[],
        Strategy::Multitask | Strategy::Joint => &data.backward,
    };
    if data.forward.is_empty() && backward.is_empty() {
        return Err(Error::Config("no dictionary entries for this language pair".into()));
    }
    let mut report = if cfg.strategy == Strategy::Joint {
        if data.mono_a.is_empty() || data.mono_b.is_empty() || data.parallel.is_empty() {
            return Err(Error::Config(
                "joint training needs both monolingual corpora and a parallel corpus".into(),
            ));
        }
        if cfg.sync {
            train_joint_sync(cfg, data, &mut model, hook)?
        } else {
            train_joint_async(cfg, data, &mut model, hook)?
        }
    } else {
        train_dictionary_only(cfg, &data.forward, backward, &mut model, hook)?
    };
    if let Some(bad) = model.store.first_non_finite() {
        return Err(Error::Numeric(format!("training produced non-finite values in `{bad}`")));
    }
    report.wall_time = start.elapsed();
    report.checksum = model.checksum();
    Ok((model, report))
}

fn check_loss(loss: f64, what: &str, epoch: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Numeric(format!("{what} loss became {loss} in epoch {epoch}")))
    }
}

fn call_hook(hook: &mut Option<CheckpointHook<'_>>, cfg: &TrainConfig, epoch: usize, model: &Model) -> Result<()> {
    if let Some(h) = hook {
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && epoch < cfg.epochs {
            h(epoch, model)?;
        }
    }
    Ok(())
}

fn train_dictionary_only(
    cfg: &TrainConfig,
    forward: &[EncodedEntry],
    backward: &[EncodedEntry],
    model: &mut Model,
    mut hook: Option<CheckpointHook<'_>>,
) -> Result<TrainReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids = model.encoder_ids();
    let mut report = TrainReport::default();
    for epoch in 1..=cfg.epochs {
        let batches = make_multitask_batches(forward, backward, cfg.batch_size, &mut rng)?;
        let mut sum = 0.0;
        let mut n = 0;
        for batch in &batches {
            let (p, g) = model.store.split();
            let loss = dict_loss_grad(batch, &model.encoder, &model.emb, p, g, 1.0, false)?;
            if let Some(c) = cfg.clip_norm {
                clip_grad_norm(g, &ids, c);
            }
            model.store.amsgrad_step(&ids, &cfg.opt)?;
            sum += loss * batch.len() as f64;
            n += batch.len();
            report.updates.dict += 1;
        }
        let dict = check_loss(sum / n as f64, "dictionary", epoch)?;
        log::debug!("epoch {epoch}: dict loss {dict:.6}");
        report.epochs.push(EpochLosses {
            epoch,
            dict,
            sg_a: 0.0,
            sg_b: 0.0,
            align: 0.0,
        });
        call_hook(&mut hook, cfg, epoch, model)?;
    }
    Ok(report)
}

/// Component-specific slot lists for the joint strategy.
struct JointSlots {
    dict: Vec<ParamId>,
    sg_a: [ParamId; 2],
    sg_b: [ParamId; 2],
    align: [ParamId; 2],
}

impl JointSlots {
    fn new(model: &Model) -> Self {
        let mut dict = model.encoder_ids();
        dict.extend_from_slice(&model.emb);
        JointSlots {
            dict,
            sg_a: [model.emb[0], model.ctx[0]],
            sg_b: [model.emb[1], model.ctx[1]],
            align: [model.emb[0], model.emb[1]],
        }
    }
}

struct Streams {
    sg_a: SkipGramStream,
    sg_b: SkipGramStream,
    align: AlignStream,
}

impl Streams {
    fn new(cfg: &TrainConfig, data: &TrainData, model: &Model) -> Result<Self> {
        Ok(Streams {
            sg_a: SkipGramStream::new(data.mono_a.clone(), &model.vocabs[0], cfg.skipgram)?,
            sg_b: SkipGramStream::new(data.mono_b.clone(), &model.vocabs[1], cfg.skipgram)?,
            align: AlignStream::new(data.parallel.clone())?,
        })
    }
}

fn dict_step(
    store: &mut ParamStore,
    encoder: &Encoder,
    emb: &[ParamId],
    batch: &[&EncodedEntry],
    cfg: &TrainConfig,
    ids: &[ParamId],
) -> Result<f64> {
    let (p, g) = store.split();
    let loss = dict_loss_grad(batch, encoder, emb, p, g, 1.0, true)?;
    if let Some(c) = cfg.clip_norm {
        clip_grad_norm(g, ids, c);
    }
    Ok(loss)
}

fn sg_grad(store: &mut ParamStore, slots: [ParamId; 2], batch: &[SkipGramSample], weight: f64) -> Result<f64> {
    let (p, g) = store.split();
    let (gi, go) = two_mut(g, slots[0], slots[1]);
    skipgram_batch_loss_grad(batch, &p[slots[0]], &p[slots[1]], weight, gi, go)
}

fn align_grad(store: &mut ParamStore, slots: [ParamId; 2], batch: &[EncodedPair], weight: f64) -> Result<f64> {
    let (p, g) = store.split();
    let (ga, gb) = two_mut(g, slots[0], slots[1]);
    alignment_loss_grad(batch, &p[slots[0]], &p[slots[1]], weight, ga, gb)
}

fn train_joint_sync(
    cfg: &TrainConfig,
    data: &TrainData,
    model: &mut Model,
    mut hook: Option<CheckpointHook<'_>>,
) -> Result<TrainReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut streams = Streams::new(cfg, data, model)?;
    let slots = JointSlots::new(model);
    let mut report = TrainReport::default();
    for epoch in 1..=cfg.epochs {
        let batches = make_multitask_batches(&data.forward, &data.backward, cfg.batch_size, &mut rng)?;
        let (mut dsum, mut dn) = (0.0, 0usize);
        let (mut la, mut lb, mut lal) = (0.0, 0.0, 0.0);
        for batch in &batches {
            let loss = dict_step(&mut model.store, &model.encoder, &model.emb, batch, cfg, &slots.dict)?;
            model.store.amsgrad_step(&slots.dict, &cfg.opt)?;
            dsum += loss * batch.len() as f64;
            dn += batch.len();
            report.updates.dict += 1;
            if cfg.lambda1 > 0.0 {
                let b = streams.sg_a.next_batch(cfg.sg_batch_size, &mut rng)?;
                la += sg_grad(&mut model.store, slots.sg_a, &b, cfg.lambda1)?;
                model.store.amsgrad_step(&slots.sg_a, &cfg.opt)?;
                let b = streams.sg_b.next_batch(cfg.sg_batch_size, &mut rng)?;
                lb += sg_grad(&mut model.store, slots.sg_b, &b, cfg.lambda1)?;
                model.store.amsgrad_step(&slots.sg_b, &cfg.opt)?;
                report.updates.sg_a += 1;
                report.updates.sg_b += 1;
            }
            if cfg.lambda2 > 0.0 {
                let b = streams.align.next_batch(cfg.batch_size, &mut rng);
                lal += align_grad(&mut model.store, slots.align, &b, cfg.lambda2)?;
                model.store.amsgrad_step(&slots.align, &cfg.opt)?;
                report.updates.align += 1;
            }
        }
        let nb = batches.len() as f64;
        report.epochs.push(EpochLosses {
            epoch,
            dict: check_loss(dsum / dn as f64, "dictionary", epoch)?,
            sg_a: check_loss(la / nb, "skip-gram", epoch)?,
            sg_b: check_loss(lb / nb, "skip-gram", epoch)?,
            align: check_loss(lal / nb, "alignment", epoch)?,
        });
        call_hook(&mut hook, cfg, epoch, model)?;
    }
    Ok(report)
}

/// Running loss sum and batch count of one background worker.
#[derive(Default)]
struct Tally(Mutex<(f64, u64)>);

impl Tally {
    fn add(&self, loss: f64) {
        let mut t = self.0.lock().expect("tally poisoned");
        t.0 += loss;
        t.1 += 1;
    }

    /// Mean since the last call, or `prev` if no batch finished meanwhile.
    fn take_mean(&self, prev: f64) -> f64 {
        let mut t = self.0.lock().expect("tally poisoned");
        let out = if t.1 == 0 { prev } else { t.0 / t.1 as f64 };
        *t = (0.0, 0);
        out
    }
}

fn train_joint_async(
    cfg: &TrainConfig,
    data: &TrainData,
    model: &mut Model,
    mut hook: Option<CheckpointHook<'_>>,
) -> Result<TrainReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let streams = Streams::new(cfg, data, model)?;
    let slots = JointSlots::new(model);
    let shared = SharedParams::from_store(&model.store);
    let stop = AtomicBool::new(false);
    let tallies: [Tally; 3] = Default::default();
    let counts: [AtomicU64; 3] = Default::default();
    // auxiliary workers may not run ahead of the dictionary worker, so the
    // mix of updates matches the sync schedule whatever the thread speeds
    let dict_updates = AtomicU64::new(0);
    let seeds: [u64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let Streams { sg_a, sg_b, align } = streams;

    let mut report = TrainReport::default();
    let dict_result = std::thread::scope(|scope| -> Result<()> {
        let shared = &shared;
        let stop = &stop;
        let (tallies, counts, dict_updates) = (&tallies, &counts, &dict_updates);
        let worker = |k: usize, slots: [ParamId; 2], mut step: Box<dyn FnMut(&mut ParamStore, &mut ChaCha8Rng) -> Result<f64> + Send>| {
            let seed = seeds[k];
            scope.spawn(move || -> Result<()> {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut local = shared.local_copy();
                while !stop.load(Ordering::Relaxed) {
                    if counts[k].load(Ordering::Relaxed) >= dict_updates.load(Ordering::Relaxed) {
                        std::thread::yield_now();
                        continue;
                    }
                    shared.refresh(&mut local, &slots);
                    let loss = step(&mut local, &mut rng);
                    let loss = loss.and_then(|l| {
                        shared.amsgrad_step(&mut local, &slots, &cfg.opt)?;
                        Ok(l)
                    });
                    match loss {
                        Ok(l) => {
                            tallies[k].add(l);
                            counts[k].fetch_add(1, Ordering::Relaxed);
                        }
                        Err(e) => {
                            stop.store(true, Ordering::Relaxed);
                            return Err(e);
                        }
                    }
                }
                Ok(())
            })
        };
        let mut handles = Vec::new();
        if cfg.lambda1 > 0.0 {
            for (k, mut stream, sl) in [(0, sg_a, slots.sg_a), (1, sg_b, slots.sg_b)] {
                let (bs, w) = (cfg.sg_batch_size, cfg.lambda1);
                handles.push(worker(
                    k,
                    sl,
                    Box::new(move |local, rng| {
                        let b = stream.next_batch(bs, rng)?;
                        sg_grad(local, sl, &b, w)
                    }),
                ));
            }
        }
        if cfg.lambda2 > 0.0 {
            let mut stream = align;
            let (bs, w, sl) = (cfg.batch_size, cfg.lambda2, slots.align);
            handles.push(worker(
                2,
                sl,
                Box::new(move |local, rng| {
                    let b = stream.next_batch(bs, rng);
                    align_grad(local, sl, &b, w)
                }),
            ));
        }

        // The dictionary worker runs on this thread and decides termination.
        let dict = (|| -> Result<()> {
            let mut local = shared.local_copy();
            let mut prev = [0.0; 3];
            for epoch in 1..=cfg.epochs {
                let batches = make_multitask_batches(&data.forward, &data.backward, cfg.batch_size, &mut rng)?;
                let (mut dsum, mut dn) = (0.0, 0usize);
                for batch in &batches {
                    if stop.load(Ordering::Relaxed) {
                        return Ok(());
                    }
                    shared.refresh(&mut local, &slots.dict);
                    let loss = dict_step(&mut local, &model.encoder, &model.emb, batch, cfg, &slots.dict)?;
                    shared.amsgrad_step(&mut local, &slots.dict, &cfg.opt)?;
                    dict_updates.fetch_add(1, Ordering::Relaxed);
                    dsum += loss * batch.len() as f64;
                    dn += batch.len();
                    report.updates.dict += 1;
                }
                for (k, p) in prev.iter_mut().enumerate() {
                    *p = tallies[k].take_mean(*p);
                }
                report.epochs.push(EpochLosses {
                    epoch,
                    dict: check_loss(dsum / dn as f64, "dictionary", epoch)?,
                    sg_a: check_loss(prev[0], "skip-gram", epoch)?,
                    sg_b: check_loss(prev[1], "skip-gram", epoch)?,
                    align: check_loss(prev[2], "alignment", epoch)?,
                });
                if hook.is_some() && cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                    let snapshot = Model {
                        store: shared.local_copy(),
                        ..model.clone()
                    };
                    call_hook(&mut hook, cfg, epoch, &snapshot)?;
                }
            }
            Ok(())
        })();
        stop.store(true, Ordering::Relaxed);
        let mut first_err = dict.err();
        for h in handles {
            let r = h.join().map_err(|_| Error::Training("worker thread panicked".into()))?;
            if let (None, Err(e)) = (&first_err, r) {
                first_err = Some(e);
            }
        }
        first_err.map_or(Ok(()), Err)
    });
    dict_result?;
    report.updates.sg_a = counts[0].load(Ordering::Relaxed);
    report.updates.sg_b = counts[1].load(Ordering::Relaxed);
    report.updates.align = counts[2].load(Ordering::Relaxed);
    model.store = shared.into_store();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderKind;
    use crate::numerics::grad_check;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, prop_assume, proptest, ProptestConfig};

    fn lang(s: &str) -> Lang {
        s.parse().unwrap()
    }

    fn vocab(l: &str, n: usize) -> Vocabulary {
        Vocabulary::from_tokens(lang(l), (0..n).map(|i| format!("w{i}"))).unwrap()
    }

    fn tiny_model(kind: EncoderKind, dim: usize, seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut space = EmbeddingSpace::random(dim, vec![vocab("en", 8), vocab("fr", 8)], &mut rng).unwrap();
        // larger than the word2vec init so no gradient element is vanishingly small
        for t in space.tables_mut() {
            let v = t.vocab.len();
            t.input = Tensor::uniform(v, dim, 1.0, &mut rng);
            t.input.row_mut(PAD).fill(0.0);
            t.output = Tensor::uniform(v, dim, 0.5, &mut rng);
        }
        let cfg = EncoderConfig {
            kind,
            layers: 1,
            hidden: 5,
            seq_len: 6,
            dim,
            ..EncoderConfig::default()
        };
        Model::new(&space, cfg, &mut rng).unwrap()
    }

    fn entries() -> Vec<DictionaryEntry> {
        let def = |s: &str| s.split(' ').map(String::from).collect::<Vec<_>>();
        vec![
            DictionaryEntry::new(lang("fr"), "w3", lang("en"), def("w2 w4 w5")),
            DictionaryEntry::new(lang("fr"), "w6", lang("en"), def("w7 w3")),
            DictionaryEntry::new(lang("en"), "w2", lang("fr"), def("w5 w5 w4 w1")),
        ]
    }

    #[test]
    fn zero_and_three_four_five() {
        let mut m = tiny_model(EncoderKind::Bow, 4, 1);
        let mb = m.encoder().bow_projection().unwrap();
        m.store_mut().value_mut(mb).fill(0.0);
        let e = m.encode_entry(&entries()[0]).unwrap();
        let emb = m.emb.clone();
        let tgt = emb[e.target_pos];
        m.store_mut().value_mut(tgt).row_mut(e.target).fill(0.0);
        let (p, g) = m.store.split();
        assert_eq!(dict_loss_grad(&[&e], &m.encoder, &emb, p, g, 1.0, false).unwrap(), 0.0);
        m.store_mut()
            .value_mut(tgt)
            .row_mut(e.target)
            .copy_from_slice(&[-3.0, -4.0, 0.0, 0.0]);
        let (p, g) = m.store.split();
        assert_eq!(dict_loss_grad(&[&e], &m.encoder, &emb, p, g, 1.0, false).unwrap(), 25.0);
    }

    #[test]
    fn oov_target_names_the_word() {
        let m = tiny_model(EncoderKind::Bow, 4, 1);
        let e = DictionaryEntry::new(lang("fr"), "appétit", lang("en"), vec!["w2".into()]);
        match m.encode_entry(&e) {
            Err(Error::Training(msg)) => assert!(msg.contains("appétit")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dict_gradients_including_embeddings() {
        for kind in [EncoderKind::Bow, EncoderKind::Gru, EncoderKind::Att] {
            let mut m = tiny_model(kind, 4, 3);
            let encoded: Vec<EncodedEntry> = entries().iter().map(|e| m.encode_entry(e).unwrap()).collect();
            let batch: Vec<&EncodedEntry> = encoded.iter().collect();
            let emb = m.emb.clone();
            let enc = m.encoder.clone();
            let (p, g) = m.store.split();
            dict_loss_grad(&batch, &enc, &emb, p, g, 1.0, true).unwrap();
            let err = grad_check(
                |s| {
                    let mut tmp = s.clone();
                    let (p, g) = tmp.split();
                    dict_loss_grad(&batch, &enc, &emb, p, g, 1.0, false).unwrap()
                },
                &mut m.store,
                1e-5,
            );
            assert!(err < 1e-4, "{kind}: {err}");
        }
    }

    #[test]
    fn frozen_embeddings_get_no_gradient() {
        let mut m = tiny_model(EncoderKind::Gru, 4, 3);
        let encoded: Vec<EncodedEntry> = entries().iter().map(|e| m.encode_entry(e).unwrap()).collect();
        let batch: Vec<&EncodedEntry> = encoded.iter().collect();
        let emb = m.emb.clone();
        let enc = m.encoder.clone();
        let (p, g) = m.store.split();
        dict_loss_grad(&batch, &enc, &emb, p, g, 1.0, false).unwrap();
        for id in &emb {
            assert!(m.store.grad(*id).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn multitask_batches_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = make_multitask_batches(&[1, 2, 3], &[4], 2, &mut rng).unwrap();
        assert_eq!(b.len(), 2);
        let mut all: Vec<i32> = b.iter().flatten().map(|&&x| x).collect();
        all.sort();
        assert_eq!(all, vec![1, 2, 3, 4]);
        let empty: [i32; 0] = [];
        assert!(matches!(
            make_multitask_batches(&empty, &empty, 2, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn every_entry_once_per_epoch() {
        let d_ij: Vec<u32> = (0..37).collect();
        let d_ji: Vec<u32> = (100..111).collect();
        for seed in 0..1000 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = make_multitask_batches(&d_ij, &d_ji, 5, &mut rng).unwrap();
            let mut seen: Vec<u32> = b.iter().flatten().map(|&&x| x).collect();
            seen.sort();
            let mut want: Vec<u32> = d_ij.iter().chain(&d_ji).copied().collect();
            want.sort();
            assert_eq!(seen, want);
        }
    }

    fn corpus_data(m: &Model) -> TrainData {
        let sent = |s: &str| s.split(' ').map(String::from).collect::<Vec<_>>();
        let mono: Vec<Vec<String>> = ["w2 w3 w4 w5", "w6 w7 w2 w3", "w4 w4 w5 w6 w7"].iter().map(|s| sent(s)).collect();
        let par: Vec<ParallelPair> = ["w2 w3", "w4 w5 w6", "w7 w2"]
            .iter()
            .map(|s| ParallelPair {
                sent_a: sent(s),
                sent_b: sent(s),
            })
            .collect();
        TrainData::from_dictionary(m, &entries()).unwrap().with_corpora(m, &mono, &mono, &par)
    }

    #[test]
    fn joint_with_zero_lambdas_is_the_dictionary_loss() {
        let mut m = tiny_model(EncoderKind::Att, 4, 5);
        let data = corpus_data(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut sa = SkipGramStream::new(data.mono_a.clone(), &m.vocabs[0], no_subsampling()).unwrap();
        let sg = sa.next_batch(6, &mut rng).unwrap();
        let batch: Vec<&EncodedEntry> = data.forward.iter().chain(&data.backward).collect();
        let l = joint_objective(&mut m, &batch, &sg, &sg, &data.parallel, 0.0, 0.0).unwrap();
        let mut m2 = m.clone();
        m2.store.zero_grads();
        let (p, g) = m2.store.split();
        let direct = dict_loss_grad(&batch, &m2.encoder, &m2.emb, p, g, 1.0, true).unwrap();
        assert_eq!(l.total(0.0, 0.0), direct);
    }

    #[test]
    fn joint_all_zero_composition() {
        let mut m = tiny_model(EncoderKind::Gru, 4, 5);
        for id in m.store.ids().collect::<Vec<_>>() {
            m.store.value_mut(id).fill(0.0);
        }
        let data = corpus_data(&m);
        let k = 5;
        let sg = vec![
            SkipGramSample {
                center: 2,
                context: 3,
                negatives: vec![4; k],
            };
            3
        ];
        let batch: Vec<&EncodedEntry> = data.forward.iter().collect();
        let l = joint_objective(&mut m, &batch, &sg, &sg, &data.parallel, 0.1, 0.1).unwrap();
        assert_eq!(l.dict, 0.0);
        assert_eq!(l.align, 0.0);
        assert!((l.sg_a - (1.0 + k as f64) * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn joint_total_matches_recomputation() {
        let mut m = tiny_model(EncoderKind::Att, 4, 9);
        let data = corpus_data(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut sa = SkipGramStream::new(data.mono_a.clone(), &m.vocabs[0], no_subsampling()).unwrap();
        let sga = sa.next_batch(5, &mut rng).unwrap();
        let sgb = sa.next_batch(5, &mut rng).unwrap();
        let batch: Vec<&EncodedEntry> = data.forward.iter().collect();
        let l = joint_objective(&mut m, &batch, &sga, &sgb, &data.parallel, 0.3, 0.7).unwrap();
        let dist: f64 = data
            .parallel
            .iter()
            .map(|pp| {
                crate::bilembed::sentence_bow_distance(&pp.a, &pp.b, m.store.value(m.emb[0]), m.store.value(m.emb[1]))
                    .unwrap()
            })
            .sum::<f64>()
            / data.parallel.len() as f64;
        assert!((l.align - dist).abs() < 1e-12);
        let expect = l.dict + 0.3 * (l.sg_a + l.sg_b) + 0.7 * dist;
        assert!((l.total(0.3, 0.7) - expect).abs() < 1e-12);

        // and the accumulated gradient is the gradient of J
        let enc = m.encoder.clone();
        let emb = m.emb.clone();
        let err = grad_check(
            |s| {
                let mut mm = Model {
                    store: s.clone(),
                    encoder: enc.clone(),
                    vocabs: m.vocabs.clone(),
                    emb: emb.clone(),
                    ctx: m.ctx.clone(),
                };
                joint_objective(&mut mm, &batch, &sga, &sgb, &data.parallel, 0.3, 0.7)
                    .unwrap()
                    .total(0.3, 0.7)
            },
            &mut m.store,
            1e-5,
        );
        assert!(err < 1e-4, "{err}");
    }

    fn no_subsampling() -> SkipGramConfig {
        SkipGramConfig {
            subsample: 0.0,
            ..SkipGramConfig::default()
        }
    }

    fn quick_cfg(strategy: Strategy, epochs: usize) -> TrainConfig {
        TrainConfig {
            skipgram: no_subsampling(),
            strategy,
            epochs,
            batch_size: 2,
            sg_batch_size: 4,
            opt: OptConfig::with_alpha(0.01),
            seed: 3,
            sync: true,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let m = tiny_model(EncoderKind::Gru, 4, 2);
        let data = corpus_data(&m);
        for s in [Strategy::Single, Strategy::Multitask, Strategy::Joint] {
            let (out, rep) = run_training(&quick_cfg(s, 0), &data, m.clone()).unwrap();
            assert_eq!(out.store.values(), m.store.values());
            assert!(rep.epochs.is_empty());
        }
    }

    #[test]
    fn frozen_embeddings_are_bit_identical() {
        let m = tiny_model(EncoderKind::Att, 4, 2);
        let data = corpus_data(&m);
        for s in [Strategy::Single, Strategy::Multitask] {
            let (out, rep) = run_training(&quick_cfg(s, 5), &data, m.clone()).unwrap();
            for i in 0..2 {
                assert_eq!(out.store.value(out.emb[i]), m.store.value(m.emb[i]));
            }
            assert_ne!(rep.checksum, m.checksum());
        }
    }

    #[test]
    fn single_sees_only_forward_entries() {
        let m = tiny_model(EncoderKind::Bow, 4, 2);
        let data = corpus_data(&m);
        let (_, single) = run_training(&quick_cfg(Strategy::Single, 1), &data, m.clone()).unwrap();
        let (_, multi) = run_training(&quick_cfg(Strategy::Multitask, 1), &data, m).unwrap();
        assert_eq!(single.updates.dict, 1); // 2 forward entries, batch 2
        assert_eq!(multi.updates.dict, 2);
    }

    #[test]
    fn sync_joint_is_deterministic() {
        let m = tiny_model(EncoderKind::Gru, 4, 2);
        let data = corpus_data(&m);
        let cfg = quick_cfg(Strategy::Joint, 4);
        let (a, ra) = run_training(&cfg, &data, m.clone()).unwrap();
        let (b, rb) = run_training(&cfg, &data, m.clone()).unwrap();
        assert_eq!(a.store.values(), b.store.values());
        assert_eq!(ra.checksum, rb.checksum);
        assert_ne!(a.store.value(a.emb[0]), m.store.value(m.emb[0]));
    }

    #[test]
    fn async_joint_finishes_finite() {
        let m = tiny_model(EncoderKind::Gru, 4, 2);
        let data = corpus_data(&m);
        let cfg = TrainConfig {
            sync: false,
            ..quick_cfg(Strategy::Joint, 20)
        };
        let (out, rep) = run_training(&cfg, &data, m).unwrap();
        assert!(out.store.all_finite());
        assert_eq!(rep.epochs.len(), 20);
        assert_eq!(rep.updates.dict, 20 * 2);
    }

    #[test]
    fn joint_without_corpora_fails_before_work() {
        let m = tiny_model(EncoderKind::Gru, 4, 2);
        let data = TrainData::from_dictionary(&m, &entries()).unwrap();
        assert!(matches!(
            run_training(&quick_cfg(Strategy::Joint, 3), &data, m),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn multitask_on_mirrored_data_tracks_single() {
        // same entries in both directions with aliased embeddings: full-batch
        // multitask sees each entry twice and takes the same steps as single
        let mut m = tiny_model(EncoderKind::Gru, 4, 8);
        let (e0, e1) = (m.emb[0], m.emb[1]);
        let copy = m.store.value(e0).clone();
        *m.store.value_mut(e1) = copy;
        let fwd: Vec<EncodedEntry> = entries()[..2].iter().map(|e| m.encode_entry(e).unwrap()).collect();
        let bwd: Vec<EncodedEntry> = fwd
            .iter()
            .map(|e| EncodedEntry {
                target_pos: e.def_pos,
                def_pos: e.target_pos,
                ..e.clone()
            })
            .collect();
        let data = TrainData {
            forward: fwd,
            backward: bwd,
            ..TrainData::default()
        };
        let cfg = |s| TrainConfig {
            batch_size: 16,
            ..quick_cfg(s, 6)
        };
        let (_, single) = run_training(&cfg(Strategy::Single), &data, m.clone()).unwrap();
        let (_, multi) = run_training(&cfg(Strategy::Multitask), &data, m).unwrap();
        for (a, b) in single.epochs.iter().zip(&multi.epochs) {
            assert!((a.dict - b.dict).abs() < 1e-12 * a.dict.max(1.0), "{} vs {}", a.dict, b.dict);
        }
    }

    #[test]
    fn tsv_log_header() {
        let rep = TrainReport {
            epochs: vec![EpochLosses {
                epoch: 1,
                dict: 0.5,
                sg_a: 1.0,
                sg_b: 2.0,
                align: 0.25,
            }],
            ..TrainReport::default()
        };
        let mut out = Vec::new();
        rep.write_tsv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("epoch\tdict_loss\tsgA\tsgB\talign\n1\t0.5"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn batches_cover_both_dictionaries(n in 0usize..40, m in 0usize..40, bs in 1usize..9, seed in any::<u64>()) {
            prop_assume!(n + m > 0);
            let a: Vec<usize> = (0..n).collect();
            let b: Vec<usize> = (1000..1000 + m).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batches = make_multitask_batches(&a, &b, bs, &mut rng).unwrap();
            prop_assert_eq!(batches.len(), (n + m).div_ceil(bs));
            prop_assert!(batches.iter().all(|x| !x.is_empty() && x.len() <= bs));
            prop_assert_eq!(batches.iter().map(Vec::len).sum::<usize>(), n + m);
        }
    }
}
