//! Synthetic bilingual worlds with a known embedding geometry.
//!
//! Each language has `primitives` content words and `fillers` function
//! words. A concept `(i, j)` (ordered, `i != j`) is a word whose vector is
//! `U_i + V_j`, and its definitions mention primitive `i` before primitive
//! `j`, mixed with fillers. Swapping the two primitives names a different
//! concept, so a model has to read token order. Counterpart words in the two
//! languages get nearby vectors.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bilembed::{EmbeddingSpace, LangTable};
use crate::corpus::{write_dictionary, write_monolingual, write_parallel, DictionaryEntry, Lang, ParallelPair, Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::evaluate::DefinedWord;
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub langs: (Lang, Lang),
    pub dim: usize,
    pub primitives: usize,
    pub fillers: usize,
    /// Number of concepts, at most `primitives * (primitives - 1)`.
    pub concepts: usize,
    /// Upper bound on fillers before and between the two primitives.
    pub max_gap: usize,
    /// Upper bound on fillers after the second primitive.
    pub max_tail: usize,
    /// Std-dev of the offset between counterpart vectors.
    pub counterpart_noise: f64,
    pub mono_sentences: usize,
    pub parallel_sentences: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            langs: ("en".parse().expect("valid"), "fr".parse().expect("valid")),
            dim: 16,
            primitives: 23,
            fillers: 20,
            concepts: 500,
            max_gap: 2,
            max_tail: 2,
            counterpart_noise: 0.05,
            mono_sentences: 1000,
            parallel_sentences: 300,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    A,
    B,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Concept {
    pub first: usize,
    pub second: usize,
}

#[derive(Clone, Debug)]
pub struct SynthWorld {
    cfg: SynthConfig,
    pub concepts: Vec<Concept>,
    /// Ground-truth embeddings for both languages.
    pub space: EmbeddingSpace,
}

fn prim(lang: Lang, i: usize) -> String {
    format!("{lang}p{i}")
}

fn filler(lang: Lang, i: usize) -> String {
    format!("{lang}f{i}")
}

fn concept_word(lang: Lang, c: &Concept) -> String {
    format!("{lang}c{}x{}", c.first, c.second)
}

impl SynthWorld {
    pub fn generate(cfg: &SynthConfig) -> Result<Self> {
        let n = cfg.primitives;
        if n < 2 || cfg.dim == 0 || cfg.fillers == 0 {
            return Err(Error::Config("need >= 2 primitives, >= 1 filler and dim >= 1".into()));
        }
        if cfg.concepts == 0 || cfg.concepts > n * (n - 1) {
            return Err(Error::Config(format!(
                "{} concepts requested but {n} primitives allow at most {}",
                cfg.concepts,
                n * (n - 1)
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut pairs: Vec<Concept> = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| Concept { first: i, second: j }))
            .collect();
        pairs.shuffle(&mut rng);
        pairs.truncate(cfg.concepts);

        let k = cfg.dim;
        let unit = Normal::new(0.0, (1.0 / k as f64).sqrt()).expect("positive std-dev");
        let half = Normal::new(0.0, (0.5 / k as f64).sqrt()).expect("positive std-dev");
        let noise = Normal::new(0.0, cfg.counterpart_noise.max(0.0) / (k as f64).sqrt()).expect("finite std-dev");
        let draw = |d: &Normal<f64>, rng: &mut ChaCha8Rng| -> Vec<f64> { (0..k).map(|_| d.sample(rng)).collect() };
        let prims: Vec<Vec<f64>> = (0..n).map(|_| draw(&unit, &mut rng)).collect();
        let fills: Vec<Vec<f64>> = (0..cfg.fillers).map(|_| draw(&unit, &mut rng)).collect();
        let u: Vec<Vec<f64>> = (0..n).map(|_| draw(&half, &mut rng)).collect();
        let v: Vec<Vec<f64>> = (0..n).map(|_| draw(&half, &mut rng)).collect();
        let concepts_vec: Vec<Vec<f64>> = pairs
            .iter()
            .map(|c| u[c.first].iter().zip(&v[c.second]).map(|(a, b)| a + b).collect())
            .collect();

        let mut world = SynthWorld {
            cfg: cfg.clone(),
            concepts: pairs,
            space: EmbeddingSpace::from_tables(k, Vec::new())?,
        };
        // vocabularies are counted over a monolingual sample so frequent
        // words come first, as with a real corpus
        let mut tables = Vec::new();
        for side in [Side::A, Side::B] {
            let lang = world.lang(side);
            let mut lines = world.mono_corpus(side, cfg.mono_sentences.max(1), &mut rng);
            lines.push(world.all_words(side));
            let vocab = Vocabulary::build(lang, &lines, 1)?;
            let mut input = Tensor::zeros(vocab.len(), k);
            let mut put = |word: &str, base: &[f64], rng: &mut ChaCha8Rng| {
                let idx = vocab.get(word).expect("every generated word is in the vocabulary");
                let row = input.row_mut(idx);
                for (r, b) in row.iter_mut().zip(base) {
                    *r = b + if side == Side::B { noise.sample(rng) } else { 0.0 };
                }
            };
            for (i, p) in prims.iter().enumerate() {
                put(&prim(lang, i), p, &mut rng);
            }
            for (i, f) in fills.iter().enumerate() {
                put(&filler(lang, i), f, &mut rng);
            }
            for (c, e) in world.concepts.iter().zip(&concepts_vec) {
                put(&concept_word(lang, c), e, &mut rng);
            }
            // <unk> sits at the origin like <pad>
            input.row_mut(PAD).fill(0.0);
            let output = Tensor::zeros(vocab.len(), k);
            tables.push(LangTable { vocab, input, output });
        }
        world.space = EmbeddingSpace::from_tables(k, tables)?;
        Ok(world)
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn lang(&self, side: Side) -> Lang {
        match side {
            Side::A => self.cfg.langs.0,
            Side::B => self.cfg.langs.1,
        }
    }

    fn all_words(&self, side: Side) -> Vec<String> {
        let lang = self.lang(side);
        (0..self.cfg.primitives)
            .map(|i| prim(lang, i))
            .chain((0..self.cfg.fillers).map(|i| filler(lang, i)))
            .chain(self.concepts.iter().map(|c| concept_word(lang, c)))
            .collect()
    }

    pub fn word(&self, concept: usize, side: Side) -> String {
        concept_word(self.lang(side), &self.concepts[concept])
    }

    fn gap<R: Rng + ?Sized>(&self, lang: Lang, max: usize, out: &mut Vec<String>, rng: &mut R) {
        for _ in 0..rng.gen_range(0..=max) {
            out.push(filler(lang, rng.gen_range(0..self.cfg.fillers)));
        }
    }

    /// A fresh random definition of `concept` in the language of `side`.
    pub fn definition<R: Rng + ?Sized>(&self, concept: usize, side: Side, rng: &mut R) -> Vec<String> {
        let lang = self.lang(side);
        let c = &self.concepts[concept];
        let mut out = Vec::new();
        let g = self.cfg.max_gap;
        self.gap(lang, g, &mut out, rng);
        out.push(prim(lang, c.first));
        self.gap(lang, g, &mut out, rng);
        out.push(prim(lang, c.second));
        self.gap(lang, self.cfg.max_tail, &mut out, rng);
        out
    }

    /// For each listed concept: its side-B word defined in language A, and its
    /// side-A word defined in language B.
    pub fn cross_entries<R: Rng + ?Sized>(&self, concepts: &[usize], rng: &mut R) -> Vec<DictionaryEntry> {
        let (a, b) = self.cfg.langs;
        let mut out = Vec::with_capacity(2 * concepts.len());
        for &c in concepts {
            out.push(DictionaryEntry::new(b, self.word(c, Side::B), a, self.definition(c, Side::A, rng)));
            out.push(DictionaryEntry::new(a, self.word(c, Side::A), b, self.definition(c, Side::B, rng)));
        }
        out
    }

    /// Same-language definitions for each listed concept, in both languages.
    pub fn mono_entries<R: Rng + ?Sized>(&self, concepts: &[usize], rng: &mut R) -> Vec<DictionaryEntry> {
        let (a, b) = self.cfg.langs;
        let mut out = Vec::with_capacity(2 * concepts.len());
        for &c in concepts {
            out.push(DictionaryEntry::new(a, self.word(c, Side::A), a, self.definition(c, Side::A, rng)));
            out.push(DictionaryEntry::new(b, self.word(c, Side::B), b, self.definition(c, Side::B, rng)));
        }
        out
    }

    /// Shuffle concept indices and split off `held_out` of them for testing.
    pub fn split<R: Rng + ?Sized>(&self, held_out: usize, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
        let mut ids: Vec<usize> = (0..self.concepts.len()).collect();
        ids.shuffle(rng);
        let test = ids.split_off(ids.len().saturating_sub(held_out));
        (ids, test)
    }

    /// Sentences that place concept words next to their definitions.
    pub fn mono_corpus<R: Rng + ?Sized>(&self, side: Side, n: usize, rng: &mut R) -> Vec<Vec<String>> {
        let lang = self.lang(side);
        (0..n)
            .map(|_| {
                let c = rng.gen_range(0..self.concepts.len());
                let mut s = vec![concept_word(lang, &self.concepts[c])];
                s.extend(self.definition(c, side, rng));
                s
            })
            .collect()
    }

    /// Word-by-word translations: the same concept and filler choices rendered
    /// in both languages.
    pub fn parallel_corpus<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<ParallelPair> {
        let (a, b) = self.cfg.langs;
        (0..n)
            .map(|_| {
                let c = rng.gen_range(0..self.concepts.len());
                let mut sa = vec![concept_word(a, &self.concepts[c])];
                sa.extend(self.definition(c, Side::A, rng));
                let sb = sa
                    .iter()
                    .map(|t| format!("{b}{}", &t[a.as_str().len()..]))
                    .collect();
                ParallelPair { sent_a: sa, sent_b: sb }
            })
            .collect()
    }

    /// Words of language A with one fresh definition in each language, for
    /// paraphrase data. `word` indexes the language-A vocabulary.
    pub fn defined_words<R: Rng + ?Sized>(&self, concepts: &[usize], rng: &mut R) -> Vec<DefinedWord> {
        let vocab = &self.space.tables()[0].vocab;
        concepts
            .iter()
            .map(|&c| DefinedWord {
                word: vocab.get(&self.word(c, Side::A)).expect("concept words are in the vocabulary"),
                def_a: self.definition(c, Side::A, rng),
                def_b: self.definition(c, Side::B, rng),
            })
            .collect()
    }

    /// Write a file bundle: `embeddings.txt`, `train.tsv`, `test.tsv`,
    /// `mono_a.txt`, `mono_b.txt` and `parallel.tsv`. Training entries cover
    /// every concept except `held_out` random ones, in both directions, plus
    /// same-language definitions; the test file holds the cross-lingual entries
    /// of the held-out concepts.
    pub fn write_bundle(&self, dir: impl AsRef<Path>, held_out: usize) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x5eed);
        let (train, test) = self.split(held_out, &mut rng);
        let mut train_entries = self.cross_entries(&train, &mut rng);
        train_entries.extend(self.mono_entries(&train, &mut rng));
        self.space.export_text(fs::File::create(dir.join("embeddings.txt"))?)?;
        write_dictionary(fs::File::create(dir.join("train.tsv"))?, &train_entries)?;
        write_dictionary(fs::File::create(dir.join("test.tsv"))?, &self.cross_entries(&test, &mut rng))?;
        let n = self.cfg.mono_sentences;
        write_monolingual(fs::File::create(dir.join("mono_a.txt"))?, &self.mono_corpus(Side::A, n, &mut rng))?;
        write_monolingual(fs::File::create(dir.join("mono_b.txt"))?, &self.mono_corpus(Side::B, n, &mut rng))?;
        write_parallel(
            fs::File::create(dir.join("parallel.tsv"))?,
            &self.parallel_corpus(self.cfg.parallel_sentences, &mut rng),
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::sq_dist;

    fn small() -> SynthWorld {
        SynthWorld::generate(&SynthConfig {
            primitives: 6,
            fillers: 5,
            concepts: 20,
            mono_sentences: 50,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn vocabulary_sizes() {
        let w = small();
        for t in w.space.tables() {
            assert_eq!(t.vocab.len(), 2 + 6 + 5 + 20);
        }
    }

    #[test]
    fn definitions_keep_primitive_order() {
        let w = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for c in 0..w.concepts.len() {
            let d = w.definition(c, Side::A, &mut rng);
            let prims: Vec<&String> = d.iter().filter(|t| t.starts_with("enp")).collect();
            assert_eq!(prims.len(), 2);
            assert_eq!(prims[0], &prim(w.lang(Side::A), w.concepts[c].first));
            assert!(d.len() >= 2 && d.len() <= 2 + 2 * w.config().max_gap + w.config().max_tail);
        }
    }

    #[test]
    fn counterparts_are_close() {
        let w = small();
        let (ta, tb) = (&w.space.tables()[0], &w.space.tables()[1]);
        for c in 0..w.concepts.len() {
            let ia = ta.vocab.get(&w.word(c, Side::A)).unwrap();
            let ib = tb.vocab.get(&w.word(c, Side::B)).unwrap();
            assert!(sq_dist(ta.input.row(ia), tb.input.row(ib)) < 0.05);
        }
    }

    #[test]
    fn parallel_sides_are_translations() {
        let w = small();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for p in w.parallel_corpus(10, &mut rng) {
            assert_eq!(p.sent_a.len(), p.sent_b.len());
            for (a, b) in p.sent_a.iter().zip(&p.sent_b) {
                assert_eq!(&a[2..], &b[2..]);
            }
        }
    }

    #[test]
    fn same_seed_same_world() {
        let a = small();
        let b = small();
        assert_eq!(a.space, b.space);
        assert_eq!(a.concepts, b.concepts);
    }
}
