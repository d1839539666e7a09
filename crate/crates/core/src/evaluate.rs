//! Reverse-dictionary retrieval, the two-stage monolingual baseline, and
//! paraphrase identification.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{DictionaryEntry, Lang, ParaphrasePair};
use crate::dicttrain::Model;
use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, matvec_acc, matvec_t_acc, outer_acc, softmax, sq_dist, OptConfig, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Metric {
    #[default]
    SqEuclidean,
    Cosine,
}

impl Metric {
    /// Smaller is closer.
    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::SqEuclidean => sq_dist(a, b),
            Metric::Cosine => {
                let na = dot(a, a).sqrt();
                let nb = dot(b, b).sqrt();
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - dot(a, b) / (na * nb)
                }
            }
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" | "euclidean" | "sq-euclidean" => Ok(Metric::SqEuclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::Config(format!("unknown metric `{other}` (expected l2 or cosine)"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::SqEuclidean => "l2",
            Metric::Cosine => "cosine",
        })
    }
}

/// Rank of `target` among `candidates` by distance to `query`: one plus the
/// number of candidates strictly closer, where an equal distance counts as
/// closer when the candidate has the lower index.
pub fn rank_target(query: &[f64], target: usize, candidates: &[usize], emb: &Tensor, metric: Metric) -> Result<usize> {
    if !candidates.contains(&target) {
        return Err(Error::Evaluation(format!("target index {target} is not in the candidate set")));
    }
    if query.len() != emb.cols() {
        return Err(Error::dim(
            "rank_target",
            format!("query has {} dims, embeddings {}", query.len(), emb.cols()),
        ));
    }
    let dt = metric.distance(query, emb.row(target));
    let ahead = candidates
        .iter()
        .filter(|&&c| c != target)
        .filter(|&&c| {
            let d = metric.distance(query, emb.row(c));
            d < dt || (d == dt && c < target)
        })
        .count();
    Ok(ahead + 1)
}

/// The `k` candidates nearest to `query`, ordered by `(distance, index)`.
pub fn nearest(query: &[f64], candidates: &[usize], emb: &Tensor, metric: Metric, k: usize) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = candidates.iter().map(|&c| (c, metric.distance(query, emb.row(c)))).collect();
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub ranks: Vec<usize>,
    /// Percent of cases ranked first.
    pub p_at_1: f64,
    /// Percent of cases ranked in the top ten.
    pub p_at_10: f64,
    pub mrr: f64,
}

pub fn retrieval_metrics(ranks: &[usize]) -> Result<RetrievalResult> {
    if ranks.is_empty() {
        return Err(Error::Evaluation("no test cases to score".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::Evaluation("ranks start at 1".into()));
    }
    let n = ranks.len() as f64;
    let count = |f: &dyn Fn(usize) -> bool| ranks.iter().filter(|&&r| f(r)).count() as f64;
    Ok(RetrievalResult {
        ranks: ranks.to_vec(),
        p_at_1: 100.0 * count(&|r| r == 1) / n,
        p_at_10: 100.0 * count(&|r| r <= 10) / n,
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
    })
}

/// Outcome of the two-stage baseline for one case.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MonoRank {
    /// Word picked in the definition language.
    pub stage1: usize,
    pub rank: usize,
}

/// Monolingual retrieval followed by a cross-lingual lookup: find the
/// definition-language word nearest to `query`, then rank `target` among the
/// target-language candidates by distance to that word's embedding.
pub fn mono_retrieval_rank(
    query: &[f64],
    def_emb: &Tensor,
    def_candidates: &[usize],
    target: usize,
    tgt_emb: &Tensor,
    tgt_candidates: &[usize],
    metric: Metric,
) -> Result<MonoRank> {
    let (stage1, _) = *nearest(query, def_candidates, def_emb, metric, 1)
        .first()
        .ok_or_else(|| Error::Evaluation("empty definition-language vocabulary".into()))?;
    let rank = rank_target(def_emb.row(stage1), target, tgt_candidates, tgt_emb, metric)?;
    Ok(MonoRank { stage1, rank })
}

/// Ordinary words (everything except `<pad>` and `<unk>`) of a vocabulary of size `v`.
pub fn all_words(v: usize) -> Vec<usize> {
    (2..v).collect()
}

/// One scored test case.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankedCase {
    pub target_word: String,
    pub rank: usize,
}

/// Rank every cross-lingual entry of `tests` (definitions in `def_lang`,
/// targets in `target_lang`). With `restriction`, only those target words
/// are candidates.
pub fn evaluate_retrieval(
    model: &Model,
    tests: &[DictionaryEntry],
    def_lang: Lang,
    target_lang: Lang,
    restriction: Option<&[String]>,
    metric: Metric,
) -> Result<(Vec<RankedCase>, RetrievalResult)> {
    let tv = model.vocab(target_lang)?;
    let emb = model.embeddings(target_lang)?;
    let candidates: Vec<usize> = match restriction {
        None => all_words(tv.len()),
        Some(words) => {
            let mut c: Vec<usize> = words.iter().filter_map(|w| tv.get(w)).filter(|&i| i >= 2).collect();
            c.sort_unstable();
            c.dedup();
            c
        }
    };
    let mut cases = Vec::new();
    for e in tests.iter().filter(|e| e.def_lang == def_lang && e.target_lang == target_lang) {
        let target = tv.get(&e.target_word).filter(|&i| i >= 2).ok_or_else(|| {
            Error::Evaluation(format!("test word `{}` is not in the {target_lang} vocabulary", e.target_word))
        })?;
        let q = model.encode(def_lang, &e.definition)?;
        cases.push(RankedCase {
            target_word: e.target_word.clone(),
            rank: rank_target(&q, target, &candidates, emb, metric)?,
        });
    }
    let ranks: Vec<usize> = cases.iter().map(|c| c.rank).collect();
    let result = retrieval_metrics(&ranks)?;
    Ok((cases, result))
}

/// Two-stage baseline over the same test entries. `model` encodes
/// definitions into the definition language's own word space.
pub fn evaluate_mono_baseline(
    model: &Model,
    tests: &[DictionaryEntry],
    def_lang: Lang,
    target_lang: Lang,
    metric: Metric,
) -> Result<(Vec<RankedCase>, RetrievalResult)> {
    let tv = model.vocab(target_lang)?;
    let def_emb = model.embeddings(def_lang)?;
    let tgt_emb = model.embeddings(target_lang)?;
    let def_cands = all_words(model.vocab(def_lang)?.len());
    let tgt_cands = all_words(tv.len());
    let mut cases = Vec::new();
    for e in tests.iter().filter(|e| e.def_lang == def_lang && e.target_lang == target_lang) {
        let target = tv.get(&e.target_word).filter(|&i| i >= 2).ok_or_else(|| {
            Error::Evaluation(format!("test word `{}` is not in the {target_lang} vocabulary", e.target_word))
        })?;
        let q = model.encode(def_lang, &e.definition)?;
        let r = mono_retrieval_rank(&q, def_emb, &def_cands, target, tgt_emb, &tgt_cands, metric)?;
        cases.push(RankedCase {
            target_word: e.target_word.clone(),
            rank: r.rank,
        });
    }
    let ranks: Vec<usize> = cases.iter().map(|c| c.rank).collect();
    let result = retrieval_metrics(&ranks)?;
    Ok((cases, result))
}

/// `target_word TAB rank` per case, then `P@1 TAB P@10 TAB MRR`.
pub fn write_retrieval_report<W: Write>(mut w: W, cases: &[RankedCase], result: &RetrievalResult) -> Result<()> {
    for c in cases {
        writeln!(w, "{}\t{}", c.target_word, c.rank)?;
    }
    writeln!(w, "{:.2}\t{:.2}\t{:.4}", result.p_at_1, result.p_at_10, result.mrr)?;
    Ok(())
}

pub const PARAPHRASE_NEIGHBORS: usize = 15;

/// A negative pair for `source`: among the 15 candidate words nearest to it
/// (the source itself excluded), pick one uniformly and pair the source's
/// definition with that word's definition.
pub fn make_paraphrase_negative<R: Rng + ?Sized>(
    source: usize,
    source_def: &[String],
    candidates: &BTreeMap<usize, Vec<String>>,
    emb: &Tensor,
    rng: &mut R,
) -> Result<ParaphrasePair> {
    let pool: Vec<usize> = candidates.keys().copied().filter(|&w| w != source).collect();
    if pool.len() < PARAPHRASE_NEIGHBORS {
        return Err(Error::Generation(format!(
            "word {source} has {} neighbour candidates with definitions, need {PARAPHRASE_NEIGHBORS}",
            pool.len()
        )));
    }
    let near = nearest(emb.row(source), &pool, emb, Metric::SqEuclidean, PARAPHRASE_NEIGHBORS);
    let (pick, _) = near[rng.gen_range(0..near.len())];
    Ok(ParaphrasePair {
        sent_a: source_def.to_vec(),
        sent_b: candidates[&pick].clone(),
        label: false,
    })
}

/// Word `word` (an index into the embedding matrix used for neighbour search)
/// with one definition in each language.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DefinedWord {
    pub word: usize,
    pub def_a: Vec<String>,
    pub def_b: Vec<String>,
}

/// One positive (both definitions of a word) and one 15-NN negative per word,
/// shuffled.
pub fn make_paraphrase_dataset<R: Rng + ?Sized>(
    words: &[DefinedWord],
    emb: &Tensor,
    rng: &mut R,
) -> Result<Vec<ParaphrasePair>> {
    let candidates: BTreeMap<usize, Vec<String>> = words.iter().map(|w| (w.word, w.def_b.clone())).collect();
    let mut out = Vec::with_capacity(2 * words.len());
    for w in words {
        out.push(ParaphrasePair {
            sent_a: w.def_a.clone(),
            sent_b: w.def_b.clone(),
            label: true,
        });
        out.push(make_paraphrase_negative(w.word, &w.def_a, &candidates, emb, rng)?);
    }
    out.shuffle(rng);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpConfig {
    pub hidden: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub opt: OptConfig,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden: 50,
            max_epochs: 500,
            patience: 10,
            batch_size: 32,
            opt: OptConfig::with_alpha(0.02),
            seed: 0,
        }
    }
}

/// `softmax(W2 tanh(W1 x + b1) + b2)` over {negative, positive}.
#[derive(Clone, Debug)]
pub struct MlpClassifier {
    pub(crate) store: ParamStore,
    pub(crate) ids: [ParamId; 4],
}

/// Labeled feature vector.
pub type Example = (Vec<f64>, bool);

impl MlpClassifier {
    pub fn new(input: usize, hidden: usize, rng: &mut dyn RngCore) -> Result<Self> {
        if input == 0 || hidden == 0 {
            return Err(Error::Config("classifier widths must be >= 1".into()));
        }
        let mut store = ParamStore::new();
        let ids = [
            store.add("mlp.w1", Tensor::glorot(hidden, input, rng))?,
            store.add("mlp.b1", Tensor::zeros(hidden, 1))?,
            store.add("mlp.w2", Tensor::glorot(2, hidden, rng))?,
            store.add("mlp.b2", Tensor::zeros(2, 1))?,
        ];
        Ok(MlpClassifier { store, ids })
    }

    /// Rebuild from stored tensors `mlp.w1`, `mlp.b1`, `mlp.w2`, `mlp.b2`.
    pub fn from_tensors(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Result<Self> {
        let (h, k) = w1.shape();
        if b1.shape() != (h, 1) || w2.shape() != (2, h) || b2.shape() != (2, 1) {
            return Err(Error::Integrity("classifier tensor shapes are inconsistent".into()));
        }
        let mut store = ParamStore::new();
        let ids = [
            store.add("mlp.w1", w1)?,
            store.add("mlp.b1", b1)?,
            store.add("mlp.w2", w2)?,
            store.add("mlp.b2", b2)?,
        ];
        let _ = k;
        Ok(MlpClassifier { store, ids })
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.ids.iter().map(|&id| (self.store.name(id), self.store.value(id)))
    }

    pub fn input_dim(&self) -> usize {
        self.store.value(self.ids[0]).cols()
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn hidden(&self, x: &[f64]) -> Vec<f64> {
        let [w1, b1, ..] = self.ids;
        let mut h = self.store.value(b1).data().to_vec();
        matvec_acc(self.store.value(w1), x, &mut h);
        h.iter_mut().for_each(|v| *v = v.tanh());
        h
    }

    /// `[P(negative), P(positive)]`.
    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::dim(
                "mlp",
                format!("feature width {} but classifier expects {}", x.len(), self.input_dim()),
            ));
        }
        let [_, _, w2, b2] = self.ids;
        let h = self.hidden(x);
        let mut z = self.store.value(b2).data().to_vec();
        matvec_acc(self.store.value(w2), &h, &mut z);
        softmax(&z)
    }

    pub fn predict(&self, x: &[f64]) -> Result<bool> {
        let p = self.probabilities(x)?;
        Ok(p[1] > p[0])
    }

    /// Mean cross-entropy over `batch`; gradients accumulate in the store.
    pub fn loss_grad(&mut self, batch: &[Example]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Contract("empty classifier batch".into()));
        }
        let [w1, b1, w2, b2] = self.ids;
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for (x, y) in batch {
            let p = self.probabilities(x)?;
            let h = self.hidden(x);
            let yi = usize::from(*y);
            total -= p[yi].max(f64::MIN_POSITIVE).ln();
            let mut dz = p.clone();
            dz[yi] -= 1.0;
            dz.iter_mut().for_each(|d| *d *= scale);
            let (vals, grads) = self.store.split();
            outer_acc(&mut grads[w2], &dz, &h);
            axpy(1.0, &dz, grads[b2].data_mut());
            let mut dh = vec![0.0; h.len()];
            matvec_t_acc(&vals[w2], &dz, &mut dh);
            for (d, hv) in dh.iter_mut().zip(&h) {
                *d *= 1.0 - hv * hv;
            }
            outer_acc(&mut grads[w1], &dh, x);
            axpy(1.0, &dh, grads[b1].data_mut());
        }
        Ok(total * scale)
    }

    pub fn accuracy(&self, data: &[Example]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Evaluation("empty split".into()));
        }
        let mut correct = 0;
        for (x, y) in data {
            if self.predict(x)? == *y {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_valid_accuracy: f64,
}

/// AMSGrad on cross-entropy with early stopping on validation accuracy.
/// Returns the parameters of the best validation epoch.
pub fn train_classifier(train: &[Example], valid: &[Example], cfg: &MlpConfig) -> Result<(MlpClassifier, ClassifierSummary)> {
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Training("classifier needs non-empty train and validation splits".into()));
    }
    let positives = train.iter().filter(|e| e.1).count();
    if positives == 0 || positives == train.len() {
        return Err(Error::Training("classifier training data has a single class".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    cfg.opt.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut clf = MlpClassifier::new(train[0].0.len(), cfg.hidden, &mut rng)?;
    let ids = clf.ids;
    let mut best = (f64::NEG_INFINITY, 0, clf.clone());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| train[i].clone()).collect();
            clf.loss_grad(&batch)?;
            clf.store.amsgrad_step(&ids, &cfg.opt)?;
        }
        epochs_run = epoch;
        let acc = clf.accuracy(valid)?;
        if acc > best.0 {
            best = (acc, epoch, clf.clone());
        } else if epoch - best.1 >= cfg.patience {
            break;
        }
    }
    let (best_valid_accuracy, best_epoch, clf) = best;
    Ok((
        clf,
        ClassifierSummary {
            epochs_run,
            best_epoch,
            best_valid_accuracy,
        },
    ))
}

/// `E(S_A) - E(S_B)`, with `S_A` read in `lang_a` and `S_B` in `lang_b`.
pub fn paraphrase_features(model: &Model, pair: &ParaphrasePair, lang_a: Lang, lang_b: Lang) -> Result<Vec<f64>> {
    let a = model.encode(lang_a, &pair.sent_a)?;
    let b = model.encode(lang_b, &pair.sent_b)?;
    Ok(a.iter().zip(&b).map(|(x, y)| x - y).collect())
}

pub fn paraphrase_examples(model: &Model, pairs: &[ParaphrasePair], lang_a: Lang, lang_b: Lang) -> Result<Vec<Example>> {
    pairs
        .iter()
        .map(|p| Ok((paraphrase_features(model, p, lang_a, lang_b)?, p.label)))
        .collect()
}

pub fn train_paraphrase_classifier(
    model: &Model,
    train: &[ParaphrasePair],
    valid: &[ParaphrasePair],
    langs: (Lang, Lang),
    cfg: &MlpConfig,
) -> Result<(MlpClassifier, ClassifierSummary)> {
    let tr = paraphrase_examples(model, train, langs.0, langs.1)?;
    let va = paraphrase_examples(model, valid, langs.0, langs.1)?;
    train_classifier(&tr, &va, cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParaphraseResult {
    pub accuracy: f64,
    pub f1: f64,
    pub predictions: Vec<bool>,
}

/// Accuracy and positive-class F1 (0 when there are no true positives).
pub fn binary_scores(predictions: &[bool], labels: &[bool]) -> Result<(f64, f64)> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::Evaluation(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let (mut tp, mut fp, mut fn_, mut correct) = (0.0, 0.0, 0.0, 0usize);
    for (&p, &y) in predictions.iter().zip(labels) {
        correct += usize::from(p == y);
        match (p, y) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            _ => {}
        }
    }
    let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
    Ok((correct as f64 / labels.len() as f64, f1))
}

pub fn eval_paraphrase(
    clf: &MlpClassifier,
    test: &[ParaphrasePair],
    model: &Model,
    langs: (Lang, Lang),
) -> Result<ParaphraseResult> {
    let examples = paraphrase_examples(model, test, langs.0, langs.1)?;
    let predictions = examples.iter().map(|(x, _)| clf.predict(x)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<bool> = examples.iter().map(|e| e.1).collect();
    let (accuracy, f1) = binary_scores(&predictions, &labels)?;
    Ok(ParaphraseResult {
        accuracy,
        f1,
        predictions,
    })
}

/// `accuracy TAB f1`, then one `label TAB prediction TAB sent_a TAB sent_b` line per pair.
pub fn write_paraphrase_report<W: Write>(mut w: W, test: &[ParaphrasePair], result: &ParaphraseResult) -> Result<()> {
    writeln!(w, "{:.4}\t{:.4}", result.accuracy, result.f1)?;
    for (p, &pred) in test.iter().zip(&result.predictions) {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            u8::from(p.label),
            u8::from(pred),
            p.sent_a.join(" "),
            p.sent_b.join(" ")
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use proptest::prelude::*;
    use rand::Rng;

    fn line(points: &[f64]) -> Tensor {
        let mut t = Tensor::zeros(points.len(), 2);
        for (i, &x) in points.iter().enumerate() {
            t.set(i, 0, x);
        }
        t
    }

    #[test]
    fn rank_on_a_line() {
        let emb = line(&[0.0, 1.0, 2.0]);
        let all = [0, 1, 2];
        assert_eq!(rank_target(&[0.9, 0.0], 1, &all, &emb, Metric::SqEuclidean).unwrap(), 1);
        assert_eq!(rank_target(&[0.9, 0.0], 2, &all, &emb, Metric::SqEuclidean).unwrap(), 3);
        assert!(matches!(
            rank_target(&[0.9, 0.0], 2, &[0, 1], &emb, Metric::SqEuclidean),
            Err(Error::Evaluation(_))
        ));
    }

    #[test]
    fn ties_go_to_the_lower_index() {
        let emb = line(&[1.0, -1.0, 1.0]);
        let all = [0, 1, 2];
        assert_eq!(rank_target(&[0.0, 0.0], 0, &all, &emb, Metric::SqEuclidean).unwrap(), 1);
        assert_eq!(rank_target(&[0.0, 0.0], 1, &all, &emb, Metric::SqEuclidean).unwrap(), 2);
        assert_eq!(rank_target(&[0.0, 0.0], 2, &all, &emb, Metric::SqEuclidean).unwrap(), 3);
    }

    #[test]
    fn metric_formulas() {
        let r = retrieval_metrics(&[1, 3, 11, 20]).unwrap();
        assert_eq!(r.p_at_1, 25.0);
        assert_eq!(r.p_at_10, 50.0);
        let mrr = (1.0 + 1.0 / 3.0 + 1.0 / 11.0 + 1.0 / 20.0) / 4.0;
        assert!((r.mrr - mrr).abs() < 1e-15);
        assert!((r.mrr - 0.3686).abs() < 1e-4);
        let perfect = retrieval_metrics(&[1, 1, 1]).unwrap();
        assert_eq!((perfect.p_at_1, perfect.mrr), (100.0, 1.0));
        assert!(retrieval_metrics(&[]).is_err());
    }

    #[test]
    fn two_stage_with_coincident_vectors() {
        let def = line(&[0.0, 0.0, 5.0, 9.0]);
        let tgt = line(&[0.0, 0.0, 9.0, 5.0, 1.0]);
        let r = mono_retrieval_rank(&[4.8, 0.0], &def, &[2, 3], 3, &tgt, &[2, 3, 4], Metric::SqEuclidean).unwrap();
        assert_eq!(r, MonoRank { stage1: 2, rank: 1 });
    }

    #[test]
    fn two_stage_degrades_when_stage_one_misses() {
        // words 2..=11 on a line; the query hits target word 2 exactly, but the
        // nearest definition-language word maps closer to target word 3
        let def = line(&[0.0, 0.0, 1.6, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0, 18.0, 20.0]);
        let tgt = line(&[0.0, 0.0, 1.0, 2.0, 5.0, 7.0, 9.0, 11.0, 13.0, 15.0, 17.0, 19.0]);
        let c: Vec<usize> = (2..12).collect();
        let q = [1.0, 0.0];
        let direct = rank_target(&q, 2, &c, &tgt, Metric::SqEuclidean).unwrap();
        let staged = mono_retrieval_rank(&q, &def, &c, 2, &tgt, &c, Metric::SqEuclidean).unwrap();
        assert_eq!(direct, 1);
        assert_eq!(staged, MonoRank { stage1: 2, rank: 2 });
    }

    #[test]
    fn binary_score_formulas() {
        let y = [true, false, true, false];
        assert_eq!(binary_scores(&y, &y).unwrap(), (1.0, 1.0));
        let (acc, f1) = binary_scores(&[true; 4], &y).unwrap();
        assert_eq!(acc, 0.5);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(binary_scores(&[false; 4], &y).unwrap().1, 0.0);
    }

    fn separable(n: usize, seed: u64, flip: bool) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let y = (x[0] > 0.0) != flip;
                (x, y)
            })
            .collect()
    }

    #[test]
    fn classifier_learns_a_separable_rule() {
        for flip in [false, true] {
            let train = separable(500, 1, flip);
            let valid = separable(100, 2, flip);
            let (clf, summary) = train_classifier(&train, &valid, &MlpConfig::default()).unwrap();
            assert!(summary.best_valid_accuracy >= 0.95, "{summary:?}");
            assert_eq!(clf.accuracy(&valid).unwrap(), summary.best_valid_accuracy);
        }
    }

    #[test]
    fn early_stop_when_nothing_improves() {
        // validation labels are pure noise relative to the features
        let train = separable(40, 3, false);
        let valid: Vec<Example> = vec![(vec![0.0; 4], true), (vec![0.0; 4], false)];
        let (_, s) = train_classifier(&train, &valid, &MlpConfig::default()).unwrap();
        assert_eq!(s.best_epoch, 1);
        assert_eq!(s.epochs_run, 11);
    }

    #[test]
    fn single_class_rejected() {
        let train: Vec<Example> = (0..5).map(|i| (vec![i as f64], true)).collect();
        assert!(matches!(
            train_classifier(&train, &train, &MlpConfig::default()),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn classifier_gradients() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut clf = MlpClassifier::new(4, 6, &mut rng).unwrap();
            let data = separable(7, seed + 10, false);
            clf.loss_grad(&data).unwrap();
            let ids = clf.ids;
            let err = grad_check(
                |s| {
                    let mut c = MlpClassifier { store: s.clone(), ids };
                    c.loss_grad(&data).unwrap()
                },
                &mut clf.store,
                1e-5,
            );
            assert!(err < 1e-4, "{err}");
        }
    }

    fn word_space(n: usize, seed: u64) -> Tensor {
        Tensor::uniform(n, 3, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn defs(words: impl Iterator<Item = usize>) -> BTreeMap<usize, Vec<String>> {
        words.map(|w| (w, vec![format!("def{w}")])).collect()
    }

    #[test]
    fn negative_comes_from_the_fifteen_neighbours() {
        let emb = word_space(16, 5);
        let cands = defs(0..16);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let p = make_paraphrase_negative(0, &["src".to_string()], &cands, &emb, &mut rng).unwrap();
            assert_ne!(p.sent_b, vec!["def0".to_string()]);
            assert!(!p.label);
        }
        let few = defs(0..15);
        assert!(matches!(
            make_paraphrase_negative(0, &["src".to_string()], &few, &emb, &mut rng),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn negative_pick_is_seeded_and_uniform() {
        let emb = word_space(40, 6);
        let cands = defs(0..40);
        let src = ["x".to_string()];
        let a = make_paraphrase_negative(3, &src, &cands, &emb, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = make_paraphrase_negative(3, &src, &cands, &emb, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);

        let pool: Vec<usize> = (0..40).filter(|&w| w != 3).collect();
        let near: Vec<String> = nearest(emb.row(3), &pool, &emb, Metric::SqEuclidean, 15)
            .iter()
            .map(|(w, _)| format!("def{w}"))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut hist: BTreeMap<String, usize> = BTreeMap::new();
        for _ in 0..10_000 {
            let p = make_paraphrase_negative(3, &src, &cands, &emb, &mut rng).unwrap();
            *hist.entry(p.sent_b[0].clone()).or_default() += 1;
        }
        assert_eq!(hist.len(), 15);
        for w in &near {
            let f = hist[w] as f64 / 10_000.0;
            assert!((f - 1.0 / 15.0).abs() < 0.03, "{w}: {f}");
        }
    }

    proptest! {
        #[test]
        fn rank_matches_full_sort(seed in any::<u64>(), target in 2usize..100, metric in prop_oneof![Just(Metric::SqEuclidean), Just(Metric::Cosine)]) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let emb = Tensor::uniform(100, 8, 1.0, &mut rng);
            let q: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let cands = all_words(100);
            let mut order: Vec<(f64, usize)> = cands.iter().map(|&c| (metric.distance(&q, emb.row(c)), c)).collect();
            order.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let oracle = order.iter().position(|&(_, c)| c == target).unwrap() + 1;
            prop_assert_eq!(rank_target(&q, target, &cands, &emb, metric).unwrap(), oracle);
        }

        #[test]
        fn metric_invariants(ranks in prop::collection::vec(1usize..50, 1..40)) {
            let r = retrieval_metrics(&ranks).unwrap();
            prop_assert!(r.mrr > 0.0 && r.mrr <= 1.0);
            prop_assert!(r.p_at_1 <= r.p_at_10);
            let mut more = ranks.clone();
            more.push(1);
            let r2 = retrieval_metrics(&more).unwrap();
            prop_assert!(r2.p_at_1 >= r.p_at_1 && r2.p_at_10 >= r.p_at_10 && r2.mrr >= r.mrr);
        }

        #[test]
        fn f1_matches_confusion_matrix(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..60)) {
            let (p, y): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
            let (_, f1) = binary_scores(&p, &y).unwrap();
            let tp = p.iter().zip(&y).filter(|(a, b)| **a && **b).count() as f64;
            let pp = p.iter().filter(|a| **a).count() as f64;
            let ap = y.iter().filter(|a| **a).count() as f64;
            let expect = if tp == 0.0 {
                0.0
            } else {
                let (prec, rec) = (tp / pp, tp / ap);
                2.0 * prec * rec / (prec + rec)
            };
            prop_assert!((f1 - expect).abs() < 1e-12);
        }

        #[test]
        fn two_stage_matches_enumeration(seed in any::<u64>(), target in 2usize..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let def = Tensor::uniform(50, 4, 1.0, &mut rng);
            let tgt = Tensor::uniform(50, 4, 1.0, &mut rng);
            let q: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c = all_words(50);
            let s1 = c.iter().copied().min_by(|&a, &b| sq_dist(&q, def.row(a)).total_cmp(&sq_dist(&q, def.row(b))).then(a.cmp(&b))).unwrap();
            let anchor = def.row(s1);
            let mut order: Vec<(f64, usize)> = c.iter().map(|&w| (sq_dist(anchor, tgt.row(w)), w)).collect();
            order.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let oracle = order.iter().position(|&(_, w)| w == target).unwrap() + 1;
            let got = mono_retrieval_rank(&q, &def, &c, target, &tgt, &c, Metric::SqEuclidean).unwrap();
            prop_assert_eq!(got, MonoRank { stage1: s1, rank: oracle });
        }
    }
}
