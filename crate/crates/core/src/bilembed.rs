//! Bilingual word embeddings: negative-sampling Skip-Gram per language plus a
//! bag-of-words alignment loss over parallel sentences.

use std::io::{BufRead, BufReader, Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{Lang, NegativeTable, ParallelPair, Vocabulary, PAD, UNK};
use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, log_sigmoid, sigmoid, OptConfig, ParamId, ParamStore, Tensor};

/// Input and output (context) embeddings of one language.
#[derive(Clone, Debug, PartialEq)]
pub struct LangTable {
    pub vocab: Vocabulary,
    pub input: Tensor,
    pub output: Tensor,
}

/// Per-language embedding matrices living in one shared `dim`-dimensional space.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSpace {
    dim: usize,
    tables: Vec<LangTable>,
}

impl EmbeddingSpace {
    /// word2vec-style init: inputs uniform in `±0.5/dim`, outputs zero, pad row zero.
    pub fn random<R: Rng + ?Sized>(dim: usize, vocabs: Vec<Vocabulary>, rng: &mut R) -> Result<Self> {
        let tables = vocabs
            .into_iter()
            .map(|vocab| {
                let mut input = Tensor::uniform(vocab.len(), dim, 0.5 / dim as f64, rng);
                input.row_mut(PAD).fill(0.0);
                let output = Tensor::zeros(vocab.len(), dim);
                LangTable { vocab, input, output }
            })
            .collect();
        EmbeddingSpace::from_tables(dim, tables)
    }

    pub fn from_tables(dim: usize, tables: Vec<LangTable>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        for (i, t) in tables.iter().enumerate() {
            let v = t.vocab.len();
            if t.input.shape() != (v, dim) || t.output.shape() != (v, dim) {
                return Err(Error::dim(
                    "EmbeddingSpace",
                    format!(
                        "language {} has {} words but matrices {:?}/{:?} (dim {dim})",
                        t.vocab.lang(),
                        v,
                        t.input.shape(),
                        t.output.shape()
                    ),
                ));
            }
            if tables[..i].iter().any(|o| o.vocab.lang() == t.vocab.lang()) {
                return Err(Error::Config(format!("language {} listed twice", t.vocab.lang())));
            }
        }
        Ok(EmbeddingSpace { dim, tables })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tables(&self) -> &[LangTable] {
        &self.tables
    }

    pub fn tables_mut(&mut self) -> &mut [LangTable] {
        &mut self.tables
    }

    pub fn langs(&self) -> Vec<Lang> {
        self.tables.iter().map(|t| t.vocab.lang()).collect()
    }

    pub fn position(&self, lang: Lang) -> Result<usize> {
        self.tables
            .iter()
            .position(|t| t.vocab.lang() == lang)
            .ok_or_else(|| Error::Config(format!("no embeddings for language {lang}")))
    }

    pub fn table(&self, lang: Lang) -> Result<&LangTable> {
        Ok(&self.tables[self.position(lang)?])
    }

    pub fn vocab(&self, lang: Lang) -> Result<&Vocabulary> {
        Ok(&self.table(lang)?.vocab)
    }

    pub fn vector(&self, lang: Lang, idx: usize) -> Result<&[f64]> {
        Ok(self.table(lang)?.input.row(idx))
    }

    pub fn all_finite(&self) -> bool {
        self.tables.iter().all(|t| t.input.is_finite() && t.output.is_finite())
    }

    /// Write input embeddings as text: `V k`, then `lang:token v1 .. vk`.
    pub fn export_text<W: Write>(&self, mut w: W) -> Result<()> {
        let total: usize = self.tables.iter().map(|t| t.vocab.len()).sum();
        writeln!(w, "{} {}", total, self.dim)?;
        for t in &self.tables {
            let lang = t.vocab.lang();
            for (i, tok) in t.vocab.tokens().iter().enumerate() {
                write!(w, "{lang}:{tok}")?;
                for x in t.input.row(i) {
                    write!(w, " {x:.6}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }

    /// Inverse of [`EmbeddingSpace::export_text`]; output matrices come back zero.
    pub fn import_text<R: Read>(reader: R) -> Result<Self> {
        let mut lines = BufReader::new(reader).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse { line: 1, msg: "missing header".into() })??;
        let mut it = header.split_whitespace();
        let parse_num = |s: Option<&str>| -> Result<usize> {
            s.and_then(|x| x.parse().ok()).ok_or_else(|| Error::Parse {
                line: 1,
                msg: format!("header must be `V k`, got `{header}`"),
            })
        };
        let total = parse_num(it.next())?;
        let dim = parse_num(it.next())?;

        let mut groups: Vec<(Lang, Vec<String>, Vec<f64>)> = Vec::new();
        let mut seen = 0usize;
        for (n, line) in lines.enumerate() {
            let line = line?;
            let lineno = n + 2;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(' ');
            let key = fields.next().unwrap_or_default();
            if key.len() < 4 || key.as_bytes()[2] != b':' {
                return Err(Error::Parse { line: lineno, msg: format!("bad word key `{key}`") });
            }
            let lang: Lang = key[..2].parse()?;
            let tok = key[3..].to_owned();
            let vals: Vec<f64> = fields
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
            if vals.len() != dim {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected {dim} values, found {}", vals.len()),
                });
            }
            let group = match groups.iter().position(|g| g.0 == lang) {
                Some(p) => &mut groups[p],
                None => {
                    groups.push((lang, Vec::new(), Vec::new()));
                    groups.last_mut().expect("just pushed")
                }
            };
            group.1.push(tok);
            group.2.extend(vals);
            seen += 1;
        }
        if seen != total {
            return Err(Error::Parse {
                line: seen + 1,
                msg: format!("header announces {total} words, file has {seen}"),
            });
        }
        let mut tables = Vec::new();
        for (lang, toks, vals) in groups {
            let vocab = Vocabulary::from_tokens(lang, toks.iter().cloned())?;
            if vocab.len() != toks.len() {
                return Err(Error::Ingestion(format!(
                    "embeddings for {lang} must start with the <pad> and <unk> rows"
                )));
            }
            let input = Tensor::from_vec(vocab.len(), dim, vals)?;
            let output = Tensor::zeros(vocab.len(), dim);
            tables.push(LangTable { vocab, input, output });
        }
        EmbeddingSpace::from_tables(dim, tables)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SkipGramConfig {
    pub window: usize,
    pub negatives: usize,
    /// Frequent-word subsampling threshold; `<= 0` disables subsampling.
    pub subsample: f64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        SkipGramConfig {
            window: 5,
            negatives: 5,
            subsample: 1e-4,
        }
    }
}

impl SkipGramConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 1 || self.negatives < 1 {
            return Err(Error::Config("skip-gram window and negatives must be >= 1".into()));
        }
        Ok(())
    }
}

/// Negative-sampling Skip-Gram loss of one `(center, context)` pair:
/// `-ln σ(u_ctx·v_c) - Σ ln σ(-u_neg·v_c)`.
///
/// Gradients scaled by `scale` are accumulated into `grad_input` / `grad_output`.
#[allow(clippy::too_many_arguments)]
pub fn skipgram_loss_grad(
    center: usize,
    context: usize,
    negatives: &[usize],
    input: &Tensor,
    output: &Tensor,
    scale: f64,
    grad_input: &mut Tensor,
    grad_output: &mut Tensor,
) -> Result<f64> {
    if center == PAD || context == PAD {
        return Err(Error::Contract("padding token used as skip-gram center or context".into()));
    }
    if negatives.contains(&context) {
        return Err(Error::Contract(format!("negative sample equals context token {context}")));
    }
    let v_c = input.row(center);
    let mut d_center = vec![0.0; input.cols()];

    let pos = dot(output.row(context), v_c);
    let mut loss = -log_sigmoid(pos);
    let g = sigmoid(pos) - 1.0;
    axpy(g, output.row(context), &mut d_center);
    axpy(scale * g, v_c, grad_output.row_mut(context));

    for &n in negatives {
        let s = dot(output.row(n), v_c);
        loss -= log_sigmoid(-s);
        let g = sigmoid(s);
        axpy(g, output.row(n), &mut d_center);
        axpy(scale * g, v_c, grad_output.row_mut(n));
    }
    axpy(scale, &d_center, grad_input.row_mut(center));
    Ok(loss)
}

/// One Skip-Gram training example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkipGramSample {
    pub center: usize,
    pub context: usize,
    pub negatives: Vec<usize>,
}

/// Mean loss over a batch; gradients of the mean times `weight` are accumulated.
pub fn skipgram_batch_loss_grad(
    batch: &[SkipGramSample],
    input: &Tensor,
    output: &Tensor,
    weight: f64,
    grad_input: &mut Tensor,
    grad_output: &mut Tensor,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("empty skip-gram batch".into()));
    }
    let scale = weight / batch.len() as f64;
    let mut total = 0.0;
    for s in batch {
        total += skipgram_loss_grad(s.center, s.context, &s.negatives, input, output, scale, grad_input, grad_output)?;
    }
    Ok(total / batch.len() as f64)
}

fn bow_mean(seq: &[usize], emb: &Tensor) -> Result<(Vec<f64>, usize)> {
    let mut mean = vec![0.0; emb.cols()];
    let mut n = 0;
    for &t in seq.iter().filter(|&&t| t != PAD) {
        axpy(1.0, emb.row(t), &mut mean);
        n += 1;
    }
    if n == 0 {
        return Err(Error::Contract("sentence is empty after removing padding".into()));
    }
    mean.iter_mut().for_each(|x| *x /= n as f64);
    Ok((mean, n))
}

/// Squared L2 distance between the bag-of-words means of two sentences.
pub fn sentence_bow_distance(sent_a: &[usize], sent_b: &[usize], emb_a: &Tensor, emb_b: &Tensor) -> Result<f64> {
    let (ma, _) = bow_mean(sent_a, emb_a)?;
    let (mb, _) = bow_mean(sent_b, emb_b)?;
    Ok(crate::numerics::sq_dist(&ma, &mb))
}

/// Parallel pair mapped to vocabulary indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
}

impl EncodedPair {
    pub fn encode(pair: &ParallelPair, vocab_a: &Vocabulary, vocab_b: &Vocabulary) -> Self {
        EncodedPair {
            a: vocab_a.encode(&pair.sent_a),
            b: vocab_b.encode(&pair.sent_b),
        }
    }
}

/// Mean sentence distance over the batch. Gradients of the mean times `weight`
/// are accumulated into the two input-embedding gradients.
pub fn alignment_loss_grad(
    batch: &[EncodedPair],
    emb_a: &Tensor,
    emb_b: &Tensor,
    weight: f64,
    grad_a: &mut Tensor,
    grad_b: &mut Tensor,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("empty alignment batch".into()));
    }
    let scale = weight * 2.0 / batch.len() as f64;
    let mut total = 0.0;
    for pair in batch {
        let (ma, na) = bow_mean(&pair.a, emb_a)?;
        let (mb, nb) = bow_mean(&pair.b, emb_b)?;
        let diff: Vec<f64> = ma.iter().zip(&mb).map(|(x, y)| x - y).collect();
        total += dot(&diff, &diff);
        for &t in pair.a.iter().filter(|&&t| t != PAD) {
            axpy(scale / na as f64, &diff, grad_a.row_mut(t));
        }
        for &t in pair.b.iter().filter(|&&t| t != PAD) {
            axpy(-scale / nb as f64, &diff, grad_b.row_mut(t));
        }
    }
    Ok(total / batch.len() as f64)
}

/// Endless stream of Skip-Gram samples drawn from one monolingual corpus.
pub struct SkipGramStream {
    sentences: Vec<Vec<usize>>,
    keep: Vec<f64>,
    table: NegativeTable,
    cfg: SkipGramConfig,
    order: Vec<usize>,
    cursor: usize,
    pending: Vec<SkipGramSample>,
    passes: usize,
}

impl SkipGramStream {
    pub fn new(sentences: Vec<Vec<usize>>, vocab: &Vocabulary, cfg: SkipGramConfig) -> Result<Self> {
        cfg.validate()?;
        if sentences.iter().all(|s| s.len() < 2) {
            return Err(Error::Ingestion(format!(
                "monolingual corpus for {} has no sentence with two or more tokens",
                vocab.lang()
            )));
        }
        let table = NegativeTable::from_vocab(vocab)?;
        let total: u64 = vocab.counts().iter().sum();
        let keep = vocab
            .counts()
            .iter()
            .map(|&c| {
                if cfg.subsample <= 0.0 || c == 0 {
                    1.0
                } else {
                    let f = c as f64 / total as f64;
                    (((f / cfg.subsample).sqrt() + 1.0) * cfg.subsample / f).min(1.0)
                }
            })
            .collect();
        let order = (0..sentences.len()).collect();
        Ok(SkipGramStream {
            sentences,
            keep,
            table,
            cfg,
            order,
            cursor: 0,
            pending: Vec::new(),
            passes: 0,
        })
    }

    /// Completed passes over the corpus.
    pub fn passes(&self) -> usize {
        self.passes
    }

    pub fn next_batch<R: Rng + ?Sized>(&mut self, size: usize, rng: &mut R) -> Result<Vec<SkipGramSample>> {
        let mut batch = Vec::with_capacity(size);
        let mut empty_sentences = 0usize;
        while batch.len() < size {
            if let Some(s) = self.pending.pop() {
                batch.push(s);
                continue;
            }
            if self.cursor == 0 {
                self.order.shuffle(rng);
            }
            let sid = self.order[self.cursor];
            self.cursor += 1;
            if self.cursor == self.order.len() {
                self.cursor = 0;
                self.passes += 1;
            }
            let before = self.pending.len();
            self.fill_from(sid, rng)?;
            if self.pending.len() == before {
                empty_sentences += 1;
                if empty_sentences > 10 * self.sentences.len() + 100 {
                    return Err(Error::Sampling(
                        "subsampling discards every skip-gram pair; lower the threshold".into(),
                    ));
                }
            }
        }
        Ok(batch)
    }

    fn fill_from<R: Rng + ?Sized>(&mut self, sid: usize, rng: &mut R) -> Result<()> {
        let kept: Vec<usize> = self.sentences[sid]
            .iter()
            .copied()
            .filter(|&t| t != PAD && t != UNK && rng.gen::<f64>() < self.keep[t])
            .collect();
        for (i, &center) in kept.iter().enumerate() {
            let b = rng.gen_range(1..=self.cfg.window);
            let lo = i.saturating_sub(b);
            let hi = (i + b).min(kept.len() - 1);
            for (j, &context) in kept.iter().enumerate().take(hi + 1).skip(lo) {
                if j == i {
                    continue;
                }
                let negatives = self.table.sample(self.cfg.negatives, context, rng)?;
                self.pending.push(SkipGramSample { center, context, negatives });
            }
        }
        self.pending.reverse();
        Ok(())
    }
}

/// Endless stream of shuffled parallel-pair batches.
pub struct AlignStream {
    pairs: Vec<EncodedPair>,
    order: Vec<usize>,
    cursor: usize,
}

impl AlignStream {
    pub fn new(pairs: Vec<EncodedPair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Ingestion("empty parallel corpus".into()));
        }
        for (i, p) in pairs.iter().enumerate() {
            if p.a.iter().all(|&t| t == PAD) || p.b.iter().all(|&t| t == PAD) {
                return Err(Error::Ingestion(format!("parallel pair {} has an empty side", i + 1)));
            }
        }
        let order = (0..pairs.len()).collect();
        Ok(AlignStream { pairs, order, cursor: 0 })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[EncodedPair] {
        &self.pairs
    }

    pub fn next_batch<R: Rng + ?Sized>(&mut self, size: usize, rng: &mut R) -> Vec<EncodedPair> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == 0 {
                self.order.shuffle(rng);
            }
            out.push(self.pairs[self.order[self.cursor]].clone());
            self.cursor = (self.cursor + 1) % self.order.len();
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Skip-Gram pairs per language per step.
    pub sg_batch_size: usize,
    pub skipgram: SkipGramConfig,
    pub align_weight: f64,
    pub opt: OptConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 50,
            batch_size: 64,
            sg_batch_size: 256,
            skipgram: SkipGramConfig::default(),
            align_weight: 1.0,
            opt: OptConfig::with_alpha(0.01),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct PretrainReport {
    /// Per epoch: mean Skip-Gram loss for language A.
    pub skipgram_a: Vec<f64>,
    pub skipgram_b: Vec<f64>,
    /// Per epoch: mean sentence distance over the whole parallel corpus,
    /// measured after the epoch.
    pub mean_distance: Vec<f64>,
}

/// Joint Skip-Gram + alignment pre-training of a two-language space.
///
/// Each step runs one Skip-Gram batch per language and one alignment batch,
/// each applied as its own AMSGrad update. One epoch is one pass over the
/// parallel corpus.
pub fn pretrain<R: Rng + ?Sized>(
    space: &mut EmbeddingSpace,
    mono_a: &[Vec<usize>],
    mono_b: &[Vec<usize>],
    parallel: &[EncodedPair],
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Result<PretrainReport> {
    cfg.opt.validate()?;
    if space.tables.len() != 2 {
        return Err(Error::Config("pre-training needs exactly two languages".into()));
    }
    if cfg.batch_size == 0 || cfg.sg_batch_size == 0 {
        return Err(Error::Config("batch sizes must be positive".into()));
    }
    let mut sg_a = SkipGramStream::new(mono_a.to_vec(), &space.tables[0].vocab, cfg.skipgram)?;
    let mut sg_b = SkipGramStream::new(mono_b.to_vec(), &space.tables[1].vocab, cfg.skipgram)?;
    let mut align = AlignStream::new(parallel.to_vec())?;

    let mut store = ParamStore::new();
    let ids: Vec<(ParamId, ParamId)> = space
        .tables
        .iter()
        .map(|t| -> Result<_> {
            let lang = t.vocab.lang();
            Ok((
                store.add(format!("emb.{lang}"), t.input.clone())?,
                store.add(format!("ctx.{lang}"), t.output.clone())?,
            ))
        })
        .collect::<Result<_>>()?;
    let (in_a, out_a) = ids[0];
    let (in_b, out_b) = ids[1];

    let steps = align.len().div_ceil(cfg.batch_size);
    let mut report = PretrainReport::default();
    for _ in 0..cfg.epochs {
        let (mut la, mut lb) = (0.0, 0.0);
        for _ in 0..steps {
            for (stream, (inp, out), acc) in [(&mut sg_a, (in_a, out_a), &mut la), (&mut sg_b, (in_b, out_b), &mut lb)] {
                let batch = stream.next_batch(cfg.sg_batch_size, rng)?;
                let (vals, grads) = store.split();
                let (gi, go) = two_mut(grads, inp, out);
                *acc += skipgram_batch_loss_grad(&batch, &vals[inp], &vals[out], 1.0, gi, go)?;
                store.amsgrad_step(&[inp, out], &cfg.opt)?;
            }
            let batch = align.next_batch(cfg.batch_size, rng);
            let (vals, grads) = store.split();
            let (ga, gb) = two_mut(grads, in_a, in_b);
            alignment_loss_grad(&batch, &vals[in_a], &vals[in_b], cfg.align_weight, ga, gb)?;
            store.amsgrad_step(&[in_a, in_b], &cfg.opt)?;
        }
        report.skipgram_a.push(la / steps as f64);
        report.skipgram_b.push(lb / steps as f64);
        let mut dist = 0.0;
        for p in align.pairs() {
            dist += sentence_bow_distance(&p.a, &p.b, store.value(in_a), store.value(in_b))?;
        }
        report.mean_distance.push(dist / align.len() as f64);
        if let Some(bad) = store.first_non_finite() {
            return Err(Error::Numeric(format!("pre-training produced non-finite values in `{bad}`")));
        }
    }
    for (t, (inp, out)) in space.tables.iter_mut().zip(ids) {
        t.input = store.value(inp).clone();
        t.output = store.value(out).clone();
    }
    Ok(report)
}

/// Two distinct mutable slots out of one gradient slice.
pub(crate) fn two_mut(ts: &mut [Tensor], a: ParamId, b: ParamId) -> (&mut Tensor, &mut Tensor) {
    let (i, j) = (a.index(), b.index());
    assert_ne!(i, j, "two_mut needs distinct slots");
    if i < j {
        let (lo, hi) = ts.split_at_mut(j);
        (&mut lo[i], &mut hi[0])
    } else {
        let (lo, hi) = ts.split_at_mut(i);
        (&mut hi[0], &mut lo[j])
    }
}

/// Index of the nearest word (squared Euclidean, ties to the lower index)
/// among ordinary words of `target`.
pub fn nearest_word(query: &[f64], target: &Tensor) -> usize {
    let mut best = (f64::INFINITY, 2);
    for i in 2..target.rows() {
        let d = crate::numerics::sq_dist(query, target.row(i));
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}
