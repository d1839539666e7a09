//! Central-difference checks of every hand-written gradient: the dictionary
//! loss through a given encoder, Skip-Gram, sentence alignment and the
//! paraphrase classifier.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bilembed::{alignment_loss_grad, skipgram_batch_loss_grad, two_mut, EmbeddingSpace, EncodedPair, SkipGramSample};
use crate::corpus::{Vocabulary, PAD};
use crate::dicttrain::{dict_loss_grad, EncodedEntry, Model};
use crate::encoders::{EncoderConfig, EncoderKind};
use crate::error::Result;
use crate::evaluate::{Example, MlpClassifier};
use crate::numerics::{grad_check, grad_check_slots, ParamStore, Tensor};

// Small enough for the O(h^2) truncation term, large enough that roundoff on
// gradient elements near 1e-8 stays under the tolerance.
const STEP: f64 = 1e-4;
const VOCAB: usize = 10;
const MAX_LEN: usize = 5;

/// Worst relative error per loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub dict: f64,
    pub skipgram: f64,
    pub align: f64,
    pub mlp: f64,
}

impl GradCheckReport {
    pub fn max(&self) -> f64 {
        [self.dict, self.skipgram, self.align, self.mlp].into_iter().fold(0.0, f64::max)
    }
}

fn model(kind: EncoderKind, dim: usize, rng: &mut ChaCha8Rng) -> Result<Model> {
    let vocab = |l: &str| Vocabulary::from_tokens(l.parse().expect("valid code"), (0..VOCAB - 2).map(|i| format!("w{i}")));
    let mut space = EmbeddingSpace::random(dim, vec![vocab("en")?, vocab("fr")?], rng)?;
    // well away from zero so that no gradient element is vanishingly small
    for t in space.tables_mut() {
        t.input = Tensor::uniform(VOCAB, dim, 1.0, rng);
        t.input.row_mut(PAD).fill(0.0);
        t.output = Tensor::uniform(VOCAB, dim, 0.5, rng);
    }
    let cfg = EncoderConfig {
        kind,
        layers: 2,
        hidden: dim + 1,
        seq_len: 8,
        dim,
        ..EncoderConfig::default()
    };
    Model::new(&space, cfg, rng)
}

fn sentence(rng: &mut ChaCha8Rng, min: usize, max: usize) -> Vec<usize> {
    (0..rng.gen_range(min..=max)).map(|_| rng.gen_range(2..VOCAB)).collect()
}

/// Check all four losses on a random tiny problem. `dim` is the embedding
/// width; `kind` picks the definition encoder.
pub fn check_all(kind: EncoderKind, dim: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = model(kind, dim, &mut rng)?;
    let min = m.encoder().config().min_tokens().unwrap_or(1).max(2);

    let entries: Vec<EncodedEntry> = (0..3)
        .map(|i| {
            let def_pos = i % 2;
            EncodedEntry {
                target_pos: 1 - def_pos,
                target: rng.gen_range(2..VOCAB),
                def_pos,
                seq: crate::corpus::pad_or_truncate(&sentence(&mut rng, min, MAX_LEN), 8),
            }
        })
        .collect();
    let batch: Vec<&EncodedEntry> = entries.iter().collect();
    let enc = m.encoder().clone();
    let emb = [m.emb_id(0), m.emb_id(1)];
    let dict_loss = |s: &ParamStore| {
        let mut tmp = s.clone();
        let (p, g) = tmp.split();
        dict_loss_grad(&batch, &enc, &emb, p, g, 1.0, true).expect("shapes were checked once")
    };
    m.store_mut().zero_grads();
    {
        let (p, g) = m.store_mut().split();
        dict_loss_grad(&batch, &enc, &emb, p, g, 1.0, true)?;
    }
    let dict = grad_check(dict_loss, m.store_mut(), STEP);

    let samples: Vec<SkipGramSample> = (0..4)
        .map(|_| {
            let context = rng.gen_range(2..VOCAB);
            let mut others: Vec<usize> = (2..VOCAB).filter(|&w| w != context).collect();
            others.shuffle(&mut rng);
            SkipGramSample {
                center: rng.gen_range(2..VOCAB),
                context,
                negatives: others[..3].to_vec(),
            }
        })
        .collect();
    let (ea, ca) = (m.emb_id(0), m.ctx_id(0));
    let sg_loss = |s: &ParamStore| {
        let mut tmp = s.clone();
        let (p, g) = tmp.split();
        let (gi, go) = two_mut(g, ea, ca);
        skipgram_batch_loss_grad(&samples, &p[ea.index()], &p[ca.index()], 1.0, gi, go).expect("valid batch")
    };
    m.store_mut().zero_grads();
    {
        let (p, g) = m.store_mut().split();
        let (gi, go) = two_mut(g, ea, ca);
        skipgram_batch_loss_grad(&samples, &p[ea.index()], &p[ca.index()], 1.0, gi, go)?;
    }
    let skipgram = grad_check_slots(sg_loss, m.store_mut(), &[ea, ca], STEP);

    let pairs: Vec<EncodedPair> = (0..3)
        .map(|_| EncodedPair {
            a: sentence(&mut rng, 1, MAX_LEN),
            b: sentence(&mut rng, 1, MAX_LEN),
        })
        .collect();
    let eb = m.emb_id(1);
    let align_loss = |s: &ParamStore| {
        let mut tmp = s.clone();
        let (p, g) = tmp.split();
        let (ga, gb) = two_mut(g, ea, eb);
        alignment_loss_grad(&pairs, &p[ea.index()], &p[eb.index()], 1.0, ga, gb).expect("valid batch")
    };
    m.store_mut().zero_grads();
    {
        let (p, g) = m.store_mut().split();
        let (ga, gb) = two_mut(g, ea, eb);
        alignment_loss_grad(&pairs, &p[ea.index()], &p[eb.index()], 1.0, ga, gb)?;
    }
    let align = grad_check_slots(align_loss, m.store_mut(), &[ea, eb], STEP);

    let mut clf = MlpClassifier::new(dim, 5, &mut rng)?;
    let examples: Vec<Example> = (0..6)
        .map(|i| ((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(), i % 2 == 0))
        .collect();
    let ids = clf.ids;
    clf.loss_grad(&examples)?;
    let mlp_loss = |s: &ParamStore| {
        let mut c = MlpClassifier { store: s.clone(), ids };
        c.loss_grad(&examples).expect("valid batch")
    };
    let mlp = grad_check(mlp_loss, &mut clf.store, STEP);

    Ok(GradCheckReport { dict, skipgram, align, mlp })
}
