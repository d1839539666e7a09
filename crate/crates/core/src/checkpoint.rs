//! Binary checkpoints.
//!
//! Layout (little-endian): magic `BDRL`, version `u32`, config line count
//! `u32`, each config line as `u32` byte length plus UTF-8 `key=value`, tensor
//! count `u32`, then per tensor: name length `u32`, name, rows `u32`, cols
//! `u32`, `rows * cols` `f32` values row-major.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::corpus::{Lang, Vocabulary};
use crate::dicttrain::Model;
use crate::encoders::{EncoderConfig, EncoderKind};
use crate::error::{Error, Result};
use crate::evaluate::MlpClassifier;
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"BDRL";
pub const VERSION: u32 = 1;

/// A trained model, free-form run settings and an optional paraphrase classifier.
///
/// Tensors are rounded to `f32` on construction, so what is evaluated in
/// memory is exactly what a reload sees.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    model: Model,
    run: BTreeMap<String, String>,
    classifier: Option<MlpClassifier>,
}

impl Checkpoint {
    pub fn new(mut model: Model) -> Self {
        quantize(model.store_mut());
        Checkpoint {
            model,
            run: BTreeMap::new(),
            classifier: None,
        }
    }

    /// Record a run setting (strategy, seed, ...). Keys must not contain `=`.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.run.insert(key.to_owned(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.run.get(key).map(String::as_str)
    }

    pub fn with_classifier(mut self, mut clf: MlpClassifier) -> Self {
        quantize(clf.store_mut());
        self.classifier = Some(clf);
        self
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn classifier(&self) -> Option<&MlpClassifier> {
        self.classifier.as_ref()
    }

    fn config_lines(&self) -> Vec<String> {
        let enc = self.model.encoder().config();
        let mut lines = vec![
            format!("encoder.kind={}", enc.kind),
            format!("encoder.dim={}", enc.dim),
            format!("encoder.hidden={}", enc.hidden),
            format!("encoder.layers={}", enc.layers),
            format!("encoder.seq_len={}", enc.seq_len),
            format!("encoder.kernel={}", enc.kernel),
            format!("encoder.pool={}", enc.pool),
            format!("encoder.attention_single_weight={}", enc.attention_single_weight),
        ];
        let langs = self.model.langs();
        lines.push(format!("langs={} {}", langs[0], langs[1]));
        for v in self.model.vocabs() {
            lines.push(format!("vocab.{}={}", v.lang(), v.tokens().join(" ")));
            let counts: Vec<String> = v.counts().iter().map(u64::to_string).collect();
            lines.push(format!("counts.{}={}", v.lang(), counts.join(" ")));
        }
        for (k, v) in &self.run {
            lines.push(format!("run.{k}={v}"));
        }
        lines
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let lines = self.config_lines();
        put_u32(&mut out, lines.len() as u32);
        for l in &lines {
            put_u32(&mut out, l.len() as u32);
            out.extend_from_slice(l.as_bytes());
        }
        let store = self.model.store();
        let mut tensors: Vec<(&str, &Tensor)> = store.ids().map(|id| (store.name(id), store.value(id))).collect();
        if let Some(clf) = &self.classifier {
            tensors.extend(clf.tensors());
        }
        put_u32(&mut out, tensors.len() as u32);
        for (name, t) in tensors {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rows() as u32);
            put_u32(&mut out, t.cols() as u32);
            for &x in t.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Load {
                offset: 0,
                msg: "bad magic (not a checkpoint file)".into(),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let n_lines = r.u32("config line count")?;
        let mut config = BTreeMap::new();
        for _ in 0..n_lines {
            let at = r.pos;
            let len = r.u32("config line length")? as usize;
            let raw = r.take(len, "config line")?;
            let line = std::str::from_utf8(raw).map_err(|_| Error::Load {
                offset: at,
                msg: "config line is not UTF-8".into(),
            })?;
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Load {
                offset: at,
                msg: format!("config line `{line}` has no `=`"),
            })?;
            config.insert(k.to_owned(), v.to_owned());
        }
        let n_tensors = r.u32("tensor count")?;
        let mut tensors = Vec::with_capacity(n_tensors as usize);
        for _ in 0..n_tensors {
            let at = r.pos;
            let len = r.u32("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| Error::Load {
                    offset: at,
                    msg: "tensor name is not UTF-8".into(),
                })?
                .to_owned();
            let rows = r.u32("rows")? as usize;
            let cols = r.u32("cols")? as usize;
            let n = rows.checked_mul(cols).filter(|n| n.checked_mul(4).is_some()).ok_or_else(|| Error::Load {
                offset: at,
                msg: format!("tensor `{name}` is impossibly large"),
            })?;
            let raw = r.take(n * 4, "tensor values")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            tensors.push((name, Tensor::from_vec(rows, cols, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Load {
                offset: r.pos,
                msg: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        assemble(config, tensors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

fn quantize(store: &mut ParamStore) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.value_mut(id).quantize_f32();
    }
}

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Load {
                offset: self.pos,
                msg: format!("file truncated while reading {what}"),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn field<'a>(config: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    config
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Integrity(format!("config is missing `{key}`")))
}

fn parsed<T: std::str::FromStr>(config: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = field(config, key)?;
    raw.parse()
        .map_err(|_| Error::Integrity(format!("config `{key}` has invalid value `{raw}`")))
}

fn assemble(config: BTreeMap<String, String>, tensors: Vec<(String, Tensor)>) -> Result<Checkpoint> {
    let enc = EncoderConfig {
        kind: field(&config, "encoder.kind")?
            .parse::<EncoderKind>()
            .map_err(|e| Error::Integrity(e.to_string()))?,
        dim: parsed(&config, "encoder.dim")?,
        hidden: parsed(&config, "encoder.hidden")?,
        layers: parsed(&config, "encoder.layers")?,
        seq_len: parsed(&config, "encoder.seq_len")?,
        kernel: parsed(&config, "encoder.kernel")?,
        pool: parsed(&config, "encoder.pool")?,
        attention_single_weight: parsed(&config, "encoder.attention_single_weight")?,
    };
    let mut vocabs = Vec::new();
    for l in field(&config, "langs")?.split(' ') {
        let lang: Lang = l.parse().map_err(|e: Error| Error::Integrity(e.to_string()))?;
        let tokens: Vec<String> = field(&config, &format!("vocab.{lang}"))?.split(' ').map(String::from).collect();
        let counts: Vec<u64> = field(&config, &format!("counts.{lang}"))?
            .split(' ')
            .map(|c| c.parse().map_err(|_| Error::Integrity(format!("bad count `{c}` for {lang}"))))
            .collect::<Result<_>>()?;
        vocabs.push(Vocabulary::from_tokens_and_counts(lang, tokens, counts).map_err(|e| Error::Integrity(e.to_string()))?);
    }

    let mut store = ParamStore::new();
    let mut mlp: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, t) in tensors {
        if name.starts_with("mlp.") {
            mlp.insert(name, t);
        } else {
            store.add(name, t).map_err(|e| Error::Integrity(e.to_string()))?;
        }
    }
    let n_model = store.len();
    let model = Model::from_parts(vocabs, store, enc)?;
    let expected = 4 + model.encoder().param_ids().len();
    if n_model != expected {
        return Err(Error::Integrity(format!(
            "checkpoint holds {n_model} model tensors, configuration implies {expected}"
        )));
    }

    let classifier = if mlp.is_empty() {
        None
    } else {
        let mut take = |n: &str| {
            mlp.remove(n)
                .ok_or_else(|| Error::Integrity(format!("classifier tensor `{n}` missing")))
        };
        let clf = MlpClassifier::from_tensors(take("mlp.w1")?, take("mlp.b1")?, take("mlp.w2")?, take("mlp.b2")?)?;
        if let Some(extra) = mlp.keys().next() {
            return Err(Error::Integrity(format!("unknown tensor `{extra}`")));
        }
        if clf.input_dim() != model.encoder().config().dim {
            return Err(Error::Integrity("classifier input width differs from the embedding dimension".into()));
        }
        Some(clf)
    };
    let run = config
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("run.").map(|k| (k.to_owned(), v.clone())))
        .collect();
    Ok(Checkpoint {
        model,
        run,
        classifier,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bilembed::EmbeddingSpace;
    use crate::evaluate::MlpClassifier;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(kind: EncoderKind) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = |l: &str| Vocabulary::build(l.parse().unwrap(), [vec!["a", "b", "b", "c"]], 1).unwrap();
        let space = EmbeddingSpace::random(4, vec![v("en"), v("fr")], &mut rng).unwrap();
        let cfg = EncoderConfig {
            kind,
            dim: 4,
            hidden: 6,
            layers: 2,
            seq_len: 5,
            ..EncoderConfig::default()
        };
        Model::new(&space, cfg, &mut rng).unwrap()
    }

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(model(EncoderKind::Att));
        c.set("strategy", "multitask");
        c.set("seed", 7);
        let clf = MlpClassifier::new(4, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        c.with_classifier(clf)
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.model().store().values(), c.model().store().values());
        assert_eq!(back.model().vocabs(), c.model().vocabs());
        assert_eq!(back.get("seed"), Some("7"));
        assert_eq!(back.to_bytes(), bytes);
        let q = ["a", "c", "b"];
        let lang = "fr".parse().unwrap();
        assert_eq!(back.model().encode(lang, &q).unwrap(), c.model().encode(lang, &q).unwrap());
    }

    #[test]
    fn every_encoder_kind_round_trips() {
        for kind in [EncoderKind::Bow, EncoderKind::Gru, EncoderKind::Att] {
            let c = Checkpoint::new(model(kind));
            let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
            assert_eq!(back.model().encoder(), c.model().encoder());
        }
    }

    #[test]
    fn truncation_is_reported_with_offset() {
        let bytes = sample().to_bytes();
        for cut in [0, 3, 7, 20, bytes.len() / 2, bytes.len() - 1] {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::Load { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn version_is_checked() {
        let mut bytes = sample().to_bytes();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::UnsupportedVersion(99))));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Load { offset: 0, .. })));
    }

    #[test]
    fn shape_inconsistency_is_an_integrity_error() {
        let c = sample();
        let text = String::from_utf8_lossy(&c.to_bytes()).into_owned();
        assert!(text.contains("encoder.hidden=6"));
        let mut bytes = c.to_bytes();
        let at = bytes.windows(16).position(|w| w == b"encoder.hidden=6").unwrap();
        bytes[at + 15] = b'7';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Integrity(_))));
    }
}
