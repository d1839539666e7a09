//! Dictionaries, monolingual and parallel corpora, vocabularies, padding and
//! negative sampling.
//!
//! All text is expected pre-tokenized (whitespace separated) and lowercased.
//! The loaders apply no filtering of their own.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Lowercase two-letter ISO-639-1 language tag.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Lang([u8; 2]);

impl Lang {
    pub fn as_str(&self) -> &str {
        std::str::from_utf8(&self.0).expect("tags are ascii")
    }
}

impl FromStr for Lang {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let b = s.as_bytes();
        if b.len() == 2 && b.iter().all(u8::is_ascii_lowercase) {
            Ok(Lang([b[0], b[1]]))
        } else {
            Err(Error::Config(format!("unknown language tag `{s}`")))
        }
    }
}

impl fmt::Display for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Debug for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Lang({})", self.as_str())
    }
}

pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_owned).collect()
}

/// Token <-> index map for one language. Index 0 is padding, 1 is unknown.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    lang: Lang,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    counts: Vec<u64>,
}

impl Vocabulary {
    /// Count tokens; those below `min_count` fold into `<unk>`.
    /// Index order is descending count, ties broken lexicographically.
    pub fn build<I, S>(lang: Lang, lines: I, min_count: u64) -> Result<Self>
    where
        I: IntoIterator,
        I::Item: AsRef<[S]>,
        S: AsRef<str>,
    {
        if min_count < 1 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        let mut raw: HashMap<String, u64> = HashMap::new();
        for line in lines {
            for tok in line.as_ref() {
                *raw.entry(tok.as_ref().to_owned()).or_insert(0) += 1;
            }
        }
        if raw.is_empty() {
            return Err(Error::Ingestion(format!("empty corpus for language {lang}")));
        }
        let mut unk_count = raw.remove(UNK_TOKEN).unwrap_or(0);
        raw.remove(PAD_TOKEN);
        let mut kept: Vec<(String, u64)> = Vec::with_capacity(raw.len());
        for (tok, c) in raw {
            if c >= min_count {
                kept.push((tok, c));
            } else {
                unk_count += c;
            }
        }
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut vocab = Vocabulary::empty(lang);
        vocab.counts[UNK] = unk_count;
        for (tok, c) in kept {
            vocab.push(tok, c);
        }
        Ok(vocab)
    }

    /// Vocabulary with the given tokens in order (special tokens are placed
    /// first if absent). Every other token gets count 1.
    pub fn from_tokens<I, S>(lang: Lang, tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary::empty(lang);
        for (pos, tok) in tokens.into_iter().enumerate() {
            let tok = tok.into();
            match tok.as_str() {
                PAD_TOKEN | UNK_TOKEN => {
                    let expected = if tok == PAD_TOKEN { PAD } else { UNK };
                    if pos != expected {
                        return Err(Error::Ingestion(format!(
                            "special token {tok} must sit at index {expected}, found at {pos}"
                        )));
                    }
                }
                _ => {
                    if vocab.index.contains_key(&tok) {
                        return Err(Error::Ingestion(format!("duplicate token `{tok}` in {lang}")));
                    }
                    vocab.push(tok, 1);
                }
            }
        }
        Ok(vocab)
    }

    /// [`Vocabulary::from_tokens`] with one explicit count per token.
    pub fn from_tokens_and_counts(lang: Lang, tokens: Vec<String>, counts: Vec<u64>) -> Result<Self> {
        let n = tokens.len().max(2);
        if counts.len() != n {
            return Err(Error::Ingestion(format!(
                "{} counts for {n} tokens in {lang}",
                counts.len()
            )));
        }
        let mut vocab = Vocabulary::from_tokens(lang, tokens)?;
        vocab.counts = counts;
        Ok(vocab)
    }

    fn empty(lang: Lang) -> Self {
        let mut index = HashMap::new();
        index.insert(PAD_TOKEN.to_owned(), PAD);
        index.insert(UNK_TOKEN.to_owned(), UNK);
        Vocabulary {
            lang,
            tokens: vec![PAD_TOKEN.to_owned(), UNK_TOKEN.to_owned()],
            index,
            counts: vec![0, 0],
        }
    }

    fn push(&mut self, tok: String, count: u64) {
        self.index.insert(tok.clone(), self.tokens.len());
        self.tokens.push(tok);
        self.counts.push(count);
    }

    pub fn lang(&self) -> Lang {
        self.lang
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn token(&self, idx: usize) -> &str {
        &self.tokens[idx]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, tok: &str) -> Option<usize> {
        self.index.get(tok).copied()
    }

    pub fn index_or_unk(&self, tok: &str) -> usize {
        self.get(tok).unwrap_or(UNK)
    }

    pub fn count(&self, idx: usize) -> u64 {
        self.counts[idx]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Indices of ordinary (non-special) words.
    pub fn word_indices(&self) -> std::ops::Range<usize> {
        2..self.tokens.len()
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.index_or_unk(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter().map(|&i| self.tokens[i].as_str()).collect()
    }
}

/// `(target word in one language, its definition in another)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DictionaryEntry {
    pub target_lang: Lang,
    pub target_word: String,
    pub def_lang: Lang,
    pub definition: Vec<String>,
}

impl DictionaryEntry {
    pub fn new(target_lang: Lang, target_word: impl Into<String>, def_lang: Lang, definition: Vec<String>) -> Self {
        DictionaryEntry {
            target_lang,
            target_word: target_word.into(),
            def_lang,
            definition,
        }
    }

    pub fn is_cross_lingual(&self) -> bool {
        self.target_lang != self.def_lang
    }
}

pub fn load_dictionary(path: impl AsRef<Path>) -> Result<Vec<DictionaryEntry>> {
    let path = path.as_ref();
    let entries = parse_dictionary(File::open(path)?)?;
    if entries.is_empty() {
        log::warn!("dictionary {} contains no entries", path.display());
    }
    Ok(entries)
}

/// Parse the 4-column dictionary TSV:
/// `target_lang TAB target_word TAB def_lang TAB definition tokens`.
pub fn parse_dictionary<R: Read>(reader: R) -> Result<Vec<DictionaryEntry>> {
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 4 tab-separated columns, found {}", cols.len()),
            });
        }
        let target_lang: Lang = cols[0].trim().parse()?;
        let def_lang: Lang = cols[2].trim().parse()?;
        let target_word = cols[1].trim();
        if target_word.is_empty() || target_word.contains(char::is_whitespace) {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("target word must be a single token, got `{target_word}`"),
            });
        }
        let definition = tokenize(cols[3]);
        if definition.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                msg: "empty definition".into(),
            });
        }
        out.push(DictionaryEntry::new(target_lang, target_word, def_lang, definition));
    }
    Ok(out)
}

pub fn write_dictionary<W: Write>(mut w: W, entries: &[DictionaryEntry]) -> Result<()> {
    for e in entries {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            e.target_lang,
            e.target_word,
            e.def_lang,
            e.definition.join(" ")
        )?;
    }
    Ok(())
}

/// One tokenized sentence per non-empty line.
pub fn load_monolingual(path: impl AsRef<Path>) -> Result<Vec<Vec<String>>> {
    parse_monolingual(File::open(path)?)
}

pub fn parse_monolingual<R: Read>(reader: R) -> Result<Vec<Vec<String>>> {
    let mut out = Vec::new();
    for line in BufReader::new(reader).lines() {
        let toks = tokenize(&line?);
        if !toks.is_empty() {
            out.push(toks);
        }
    }
    Ok(out)
}

pub fn write_monolingual<W: Write, S: AsRef<[String]>>(mut w: W, sentences: &[S]) -> Result<()> {
    for s in sentences {
        writeln!(w, "{}", s.as_ref().join(" "))?;
    }
    Ok(())
}

/// Aligned sentences from a parallel corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelPair {
    pub sent_a: Vec<String>,
    pub sent_b: Vec<String>,
}

pub fn load_parallel(path: impl AsRef<Path>) -> Result<Vec<ParallelPair>> {
    parse_parallel(File::open(path)?)
}

pub fn parse_parallel<R: Read>(reader: R) -> Result<Vec<ParallelPair>> {
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 2 {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: format!("expected 2 tab-separated columns, found {}", cols.len()),
            });
        }
        let (sent_a, sent_b) = (tokenize(cols[0]), tokenize(cols[1]));
        if sent_a.is_empty() || sent_b.is_empty() {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: "parallel pair with an empty side".into(),
            });
        }
        out.push(ParallelPair { sent_a, sent_b });
    }
    Ok(out)
}

pub fn write_parallel<W: Write>(mut w: W, pairs: &[ParallelPair]) -> Result<()> {
    for p in pairs {
        writeln!(w, "{}\t{}", p.sent_a.join(" "), p.sent_b.join(" "))?;
    }
    Ok(())
}

/// Sentence pair in two languages with a paraphrase label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParaphrasePair {
    pub sent_a: Vec<String>,
    pub sent_b: Vec<String>,
    pub label: bool,
}

pub fn load_paraphrase_pairs(path: impl AsRef<Path>) -> Result<Vec<ParaphrasePair>> {
    parse_paraphrase_pairs(File::open(path)?)
}

pub fn parse_paraphrase_pairs<R: Read>(reader: R) -> Result<Vec<ParaphrasePair>> {
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 3 tab-separated columns, found {}", cols.len()),
            });
        }
        let label = match cols[2].trim() {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("label must be 0 or 1, got `{other}`"),
                })
            }
        };
        let (sent_a, sent_b) = (tokenize(cols[0]), tokenize(cols[1]));
        if sent_a.is_empty() || sent_b.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                msg: "paraphrase pair with an empty side".into(),
            });
        }
        out.push(ParaphrasePair { sent_a, sent_b, label });
    }
    Ok(out)
}

pub fn write_paraphrase_pairs<W: Write>(mut w: W, pairs: &[ParaphrasePair]) -> Result<()> {
    for p in pairs {
        writeln!(
            w,
            "{}\t{}\t{}",
            p.sent_a.join(" "),
            p.sent_b.join(" "),
            u8::from(p.label)
        )?;
    }
    Ok(())
}

/// Index sequence padded or truncated to a fixed length, plus the number of
/// real tokens it holds.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PaddedSeq {
    pub ids: Vec<usize>,
    pub len: usize,
}

impl PaddedSeq {
    /// The real (non-pad) tokens.
    pub fn tokens(&self) -> &[usize] {
        &self.ids[..self.len]
    }
}

/// Right-pad with [`PAD`] or keep the first `max_len` tokens.
pub fn pad_or_truncate(tokens: &[usize], max_len: usize) -> PaddedSeq {
    assert!(max_len >= 1, "sequence length must be at least 1");
    let len = tokens.len().min(max_len);
    let mut ids = tokens[..len].to_vec();
    ids.resize(max_len, PAD);
    PaddedSeq { ids, len }
}

/// Unigram^0.75 sampling table over ordinary words.
#[derive(Clone, Debug)]
pub struct NegativeTable {
    probs: Vec<f64>,
    eligible: usize,
    dist: WeightedIndex<f64>,
}

impl NegativeTable {
    pub fn from_vocab(vocab: &Vocabulary) -> Result<Self> {
        Self::from_counts(vocab.counts())
    }

    /// `counts` is indexed by token id; the two special ids are never eligible.
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let weights: Vec<f64> = counts
            .iter()
            .enumerate()
            .map(|(i, &c)| if i == PAD || i == UNK { 0.0 } else { (c as f64).powf(0.75) })
            .collect();
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Sampling("no eligible tokens for negative sampling".into()));
        }
        let dist = WeightedIndex::new(&weights)
            .map_err(|e| Error::Sampling(format!("cannot build sampling table: {e}")))?;
        let eligible = weights.iter().filter(|&&w| w > 0.0).count();
        let probs = weights.iter().map(|w| w / total).collect();
        Ok(NegativeTable { probs, eligible, dist })
    }

    pub fn probability(&self, idx: usize) -> f64 {
        self.probs.get(idx).copied().unwrap_or(0.0)
    }

    pub fn eligible(&self) -> usize {
        self.eligible
    }

    /// Draw `k` indices (with replacement) none of which equals `exclude`.
    pub fn sample<R: Rng + ?Sized>(&self, k: usize, exclude: usize, rng: &mut R) -> Result<Vec<usize>> {
        let available = self.eligible - usize::from(self.probability(exclude) > 0.0);
        if available == 0 || k > available {
            return Err(Error::Sampling(format!(
                "requested {k} negatives but only {available} eligible tokens remain"
            )));
        }
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            let idx = self.dist.sample(rng);
            if idx != exclude {
                out.push(idx);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn en() -> Lang {
        "en".parse().unwrap()
    }

    fn lines(s: &[&str]) -> Vec<Vec<String>> {
        s.iter().map(|l| tokenize(l)).collect()
    }

    #[test]
    fn vocab_counts_and_specials() {
        let v = Vocabulary::build(en(), &lines(&["a a b"]), 1).unwrap();
        assert_eq!(v.tokens(), &["<pad>", "<unk>", "a", "b"]);
        assert_eq!(v.count(v.get("a").unwrap()), 2);
        assert_eq!(v.get(PAD_TOKEN), Some(PAD));
        assert_eq!(v.get(UNK_TOKEN), Some(UNK));
    }

    #[test]
    fn vocab_threshold_folds_into_unk() {
        let v = Vocabulary::build(en(), &lines(&["a a b"]), 2).unwrap();
        assert_eq!(v.get("b"), None);
        assert_eq!(v.index_or_unk("b"), UNK);
        assert_eq!(v.count(UNK), 1);
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn vocab_tie_break_is_lexicographic() {
        let v = Vocabulary::build(en(), &lines(&["zeta alpha mid", "mid"]), 1).unwrap();
        assert_eq!(v.tokens(), &["<pad>", "<unk>", "mid", "alpha", "zeta"]);
    }

    #[test]
    fn vocab_rejects_empty_corpus() {
        let empty: Vec<Vec<String>> = vec![vec![]];
        assert!(matches!(Vocabulary::build(en(), &empty, 1), Err(Error::Ingestion(_))));
    }

    #[test]
    fn dictionary_line_parses() {
        let src = "fr\tappétit\ten\tdesire for or relish of food or drink\n";
        let d = parse_dictionary(src.as_bytes()).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].definition.len(), 8);
        assert_eq!(d[0].target_word, "appétit");
        assert_eq!(d[0].target_lang.as_str(), "fr");
        assert!(d[0].is_cross_lingual());
    }

    #[test]
    fn dictionary_empty_and_bad_lines() {
        assert!(parse_dictionary("".as_bytes()).unwrap().is_empty());
        let err = parse_dictionary("en\tcat\ten\ta pet\nfr\tchat\ten\n".as_bytes()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let err = parse_dictionary("english\tcat\tfr\tun chat\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn dictionary_keeps_multiple_definitions() {
        let src = "en\tbank\tfr\tbord de rivière\n\nen\tbank\tfr\tinstitution financière\n";
        let d = parse_dictionary(src.as_bytes()).unwrap();
        assert_eq!(d.len(), 2);
    }

    #[test]
    fn pad_and_truncate() {
        let p = pad_or_truncate(&[5, 6, 7], 5);
        assert_eq!(p.ids, vec![5, 6, 7, PAD, PAD]);
        assert_eq!(p.len, 3);
        let long: Vec<usize> = (2..19).collect();
        let p = pad_or_truncate(&long, 15);
        assert_eq!(p.ids, long[..15].to_vec());
        assert_eq!(p.len, 15);
        let exact: Vec<usize> = (2..17).collect();
        assert_eq!(pad_or_truncate(&exact, 15).ids, exact);
    }

    #[test]
    fn negatives_forced_choice() {
        let table = NegativeTable::from_counts(&[0, 0, 1, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(table.sample(1, 2, &mut rng).unwrap(), vec![3]);
        }
    }

    #[test]
    fn negatives_too_few_tokens() {
        let table = NegativeTable::from_counts(&[0, 0, 1, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(table.sample(2, 2, &mut rng), Err(Error::Sampling(_))));
    }

    #[test]
    fn negatives_follow_three_quarter_power() {
        // counts a:16, b:1 -> 16^0.75 = 8 : 1
        let table = NegativeTable::from_counts(&[0, 0, 16, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut draws = Vec::with_capacity(100_000);
        for _ in 0..50_000 {
            draws.extend(table.sample(2, PAD, &mut rng).unwrap());
        }
        let a = draws.iter().filter(|&&i| i == 2).count() as f64;
        let b = draws.iter().filter(|&&i| i == 3).count() as f64;
        let ratio = a / b;
        assert!((ratio - 8.0).abs() / 8.0 < 0.05, "ratio {ratio}");
    }

    #[test]
    fn paraphrase_pairs_parse() {
        let p = parse_paraphrase_pairs("a b\tc d\t1\ne\tf\t0\n".as_bytes()).unwrap();
        assert_eq!(p.len(), 2);
        assert!(p[0].label && !p[1].label);
        assert!(parse_paraphrase_pairs("a\tb\t2\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn vocab_round_trip(words in prop::collection::vec("[a-e]{1,3}", 1..30)) {
            let v = Vocabulary::build(en(), std::slice::from_ref(&words), 1).unwrap();
            let ids = v.encode(&words);
            prop_assert_eq!(v.decode(&ids), words.iter().map(String::as_str).collect::<Vec<_>>());
        }

        #[test]
        fn pad_idempotent(toks in prop::collection::vec(2usize..50, 0..30), l in 1usize..20) {
            let once = pad_or_truncate(&toks, l);
            let twice = pad_or_truncate(once.tokens(), l);
            prop_assert_eq!(&once, &twice);
            prop_assert_eq!(once.ids.len(), l);
        }

        #[test]
        fn dictionary_preserves_multiplicity(n in 0usize..20, blanks in 0usize..5) {
            let mut s = String::new();
            for i in 0..n {
                s.push_str(&format!("en\tw{i}\tfr\tmot numero {i}\n"));
                if i < blanks { s.push('\n'); }
            }
            prop_assert_eq!(parse_dictionary(s.as_bytes()).unwrap().len(), n);
        }
    }
}
