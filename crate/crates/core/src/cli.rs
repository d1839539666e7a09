//! The `bildrl` command line.
//!
//! Every option can also come from a `--config` file of `key=value` lines,
//! where the key is the long flag name without dashes. Flags win over the
//! file. `--seed` falls back to `BILDRL_SEED`, then to 0.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bilembed::{pretrain, EmbeddingSpace, EncodedPair, PretrainConfig};
use crate::checkpoint::Checkpoint;
use crate::corpus::{
    load_dictionary, load_monolingual, load_paraphrase_pairs, load_parallel, tokenize, write_paraphrase_pairs, Lang, Vocabulary,
};
use crate::dicttrain::{run_training_with, Model, Strategy, TrainConfig, TrainData};
use crate::encoders::{EncoderConfig, EncoderKind};
use crate::error::{Error, Result};
use crate::evaluate::{
    all_words, eval_paraphrase, evaluate_mono_baseline, evaluate_retrieval, make_paraphrase_dataset, nearest,
    train_paraphrase_classifier, write_paraphrase_report, write_retrieval_report, DefinedWord, Metric, MlpConfig,
};
use crate::gradcheck::check_all;
use crate::numerics::OptConfig;

pub const SEED_ENV: &str = "BILDRL_SEED";

#[derive(Debug, Parser)]
#[command(name = "bildrl", version, about = "Cross-lingual definition encoders")]
struct Cli {
    /// Optional key=value defaults; flags override them.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain bilingual word embeddings from monolingual and parallel text.
    TrainEmbed(EmbedArgs),
    /// Train a definition encoder on a bilingual dictionary.
    TrainDict(DictArgs),
    /// Train encoder and embeddings together, Hogwild style unless --sync.
    TrainJoint(JointArgs),
    /// Rank held-out targets and print P@1, P@10 and MRR.
    EvalRetrieval(RetrievalArgs),
    /// Train the paraphrase classifier on encoded pairs and score a test split.
    EvalParaphrase(ParaphraseArgs),
    /// Nearest target-language words for a free-text definition.
    Query(QueryArgs),
    /// Finite-difference check of all analytic gradients.
    Gradcheck(GradcheckArgs),
    /// Build paraphrase pairs from a dictionary with definitions in both languages.
    MakeParaphraseData(MakeParaphraseArgs),
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long)]
    mono_a: PathBuf,
    #[arg(long)]
    mono_b: PathBuf,
    #[arg(long)]
    parallel: PathBuf,
    /// Languages of the two corpora, e.g. en-fr.
    #[arg(long)]
    lang_pair: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    min_count: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output embedding file (text).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Pretrained embeddings covering both languages.
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    dict: PathBuf,
    /// DEF-TARGET: definitions in DEF describe words of TARGET.
    #[arg(long)]
    lang_pair: Option<String>,
    #[arg(long)]
    encoder: Option<EncoderKind>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long)]
    pool: Option<usize>,
    /// Average attention states with one weighting instead of two.
    #[arg(long)]
    attention_single_weight: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Global gradient norm bound for dictionary updates; 0 disables.
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss log (TSV).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DictArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// single, multitask or joint.
    #[arg(long)]
    strategy: Option<Strategy>,
}

#[derive(Debug, Args)]
struct JointArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    mono_a: PathBuf,
    #[arg(long)]
    mono_b: PathBuf,
    #[arg(long)]
    parallel: PathBuf,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    sg_batch_size: Option<usize>,
    /// Deterministic single-thread round robin instead of concurrent workers.
    #[arg(long)]
    sync: bool,
}

#[derive(Debug, Args)]
struct RetrievalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Defaults to the model's training direction.
    #[arg(long)]
    lang_pair: Option<String>,
    /// l2 or cosine.
    #[arg(long)]
    metric: Option<Metric>,
    /// Candidate target words, one per line.
    #[arg(long)]
    restrict: Option<PathBuf>,
    /// Two-stage baseline: nearest definition-language word, then its nearest target.
    #[arg(long)]
    mono_baseline: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ParaphraseArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    lang_pair: Option<String>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the model plus the trained classifier here.
    #[arg(long)]
    save: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct QueryArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    lang_pair: Option<String>,
    #[arg(long)]
    text: String,
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    metric: Option<Metric>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    encoder: Option<EncoderKind>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct MakeParaphraseArgs {
    #[arg(long)]
    model: PathBuf,
    /// Needs, per word of the first language, one definition in each language.
    #[arg(long)]
    dict: PathBuf,
    #[arg(long)]
    lang_pair: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Receives train.tsv, valid.tsv and test.tsv (70/5/25).
    #[arg(long)]
    out_dir: PathBuf,
}

/// Values from `--config`.
#[derive(Debug, Default)]
struct Settings(BTreeMap<String, String>);

impl Settings {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Settings::default());
        };
        let text = fs::read_to_string(path)?;
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value in {}", path.display()),
            })?;
            map.insert(k.trim().replace('_', "-"), v.trim().to_owned());
        }
        Ok(Settings(map))
    }

    fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.0.get(key) {
            Some(s) => s.parse().map_err(|e| Error::Config(format!("config key `{key}`: {e}"))),
            None => Ok(default),
        }
    }

    fn flag(&self, flag: bool, key: &str) -> Result<bool> {
        self.pick(flag.then_some(true), key, false)
    }

    fn seed(&self, flag: Option<u64>) -> Result<u64> {
        if flag.is_some() || self.0.contains_key("seed") {
            return self.pick(flag, "seed", 0);
        }
        match std::env::var(SEED_ENV) {
            Ok(s) => s.parse().map_err(|e| Error::Config(format!("{SEED_ENV}: {e}"))),
            Err(_) => Ok(0),
        }
    }

    fn lang_pair(&self, flag: Option<String>, fallback: Option<[Lang; 2]>) -> Result<(Lang, Lang)> {
        match flag.or_else(|| self.0.get("lang-pair").cloned()) {
            Some(s) => parse_lang_pair(&s),
            None => fallback
                .map(|[a, b]| (a, b))
                .ok_or_else(|| Error::Config("--lang-pair is required".into())),
        }
    }
}

pub fn parse_lang_pair(s: &str) -> Result<(Lang, Lang)> {
    let (a, b) = s
        .split_once('-')
        .ok_or_else(|| Error::Config(format!("language pair `{s}` is not of the form xx-yy")))?;
    let (a, b): (Lang, Lang) = (a.parse()?, b.parse()?);
    if a == b {
        return Err(Error::Config(format!("language pair `{s}` names one language twice")));
    }
    Ok((a, b))
}

/// Parse `argv` (program name first), run the subcommand and return the
/// process exit status.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let stdout = io::stdout();
    let mut out = stdout.lock();
    run_with_output(argv, &mut out)
}

/// [`run`] with command output sent to `out`. Diagnostics still go to stderr.
pub fn run_with_output<I, S>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli, mut out: &mut dyn Write) -> Result<i32> {
    let cfg = Settings::load(cli.config.as_deref())?;
    match cli.cmd {
        Command::TrainEmbed(a) => train_embed(&cfg, a, &mut out),
        Command::TrainDict(a) => {
            let strategy = cfg.pick(a.strategy, "strategy", Strategy::Multitask)?;
            train(&cfg, a.model, strategy, None, &mut out)
        }
        Command::TrainJoint(a) => train(&cfg, a.model, Strategy::Joint, Some(Corpora {
            mono_a: a.mono_a,
            mono_b: a.mono_b,
            parallel: a.parallel,
            lambda1: a.lambda1,
            lambda2: a.lambda2,
            sg_batch_size: a.sg_batch_size,
            sync: a.sync,
        }), &mut out),
        Command::EvalRetrieval(a) => eval_retrieval(&cfg, a, &mut out),
        Command::EvalParaphrase(a) => eval_paraphrase_cmd(&cfg, a, &mut out),
        Command::Query(a) => query(&cfg, a, &mut out),
        Command::Gradcheck(a) => gradcheck(&cfg, a, &mut out),
        Command::MakeParaphraseData(a) => make_paraphrase_data(&cfg, a, &mut out),
    }
}

fn train_embed(cfg: &Settings, a: EmbedArgs, out: &mut dyn Write) -> Result<i32> {
    let (la, lb) = cfg.lang_pair(a.lang_pair, None)?;
    let dim = cfg.pick(a.dim, "dim", 50)?;
    let min_count = cfg.pick(a.min_count, "min-count", 1)?;
    let defaults = PretrainConfig::default();
    let pcfg = PretrainConfig {
        epochs: cfg.pick(a.epochs, "epochs", defaults.epochs)?,
        batch_size: cfg.pick(a.batch_size, "batch-size", defaults.batch_size)?,
        opt: OptConfig::with_alpha(cfg.pick(a.lr, "lr", defaults.opt.alpha)?),
        ..defaults
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed(a.seed)?);
    let mono_a = load_monolingual(&a.mono_a)?;
    let mono_b = load_monolingual(&a.mono_b)?;
    let parallel = load_parallel(&a.parallel)?;
    let text_a = mono_a.iter().chain(parallel.iter().map(|p| &p.sent_a));
    let text_b = mono_b.iter().chain(parallel.iter().map(|p| &p.sent_b));
    let va = Vocabulary::build(la, text_a, min_count)?;
    let vb = Vocabulary::build(lb, text_b, min_count)?;
    let enc_a: Vec<Vec<usize>> = mono_a.iter().map(|s| va.encode(s)).collect();
    let enc_b: Vec<Vec<usize>> = mono_b.iter().map(|s| vb.encode(s)).collect();
    let pairs: Vec<EncodedPair> = parallel.iter().map(|p| EncodedPair::encode(p, &va, &vb)).collect();
    let mut space = EmbeddingSpace::random(dim, vec![va, vb], &mut rng)?;
    let report = pretrain(&mut space, &enc_a, &enc_b, &pairs, &pcfg, &mut rng)?;
    if !space.all_finite() {
        return Err(Error::Numeric("embeddings contain NaN or infinity after pretraining".into()));
    }
    space.export_text(BufWriter::new(File::create(&a.out)?))?;
    let last = |v: &[f64]| v.last().copied().unwrap_or(f64::NAN);
    writeln!(
        out,
        "epochs\t{}\tsgA\t{:.6}\tsgB\t{:.6}\tmean_distance\t{:.6}",
        pcfg.epochs,
        last(&report.skipgram_a),
        last(&report.skipgram_b),
        last(&report.mean_distance)
    )?;
    Ok(0)
}

struct Corpora {
    mono_a: PathBuf,
    mono_b: PathBuf,
    parallel: PathBuf,
    lambda1: Option<f64>,
    lambda2: Option<f64>,
    sg_batch_size: Option<usize>,
    sync: bool,
}

fn encoder_config(cfg: &Settings, a: &ModelArgs, dim: usize) -> Result<EncoderConfig> {
    let d = EncoderConfig::default();
    let enc = EncoderConfig {
        kind: cfg.pick(a.encoder, "encoder", d.kind)?,
        layers: cfg.pick(a.layers, "layers", d.layers)?,
        hidden: cfg.pick(a.hidden, "hidden", d.hidden)?,
        seq_len: cfg.pick(a.seq_len, "seq-len", d.seq_len)?,
        kernel: cfg.pick(a.kernel, "kernel", d.kernel)?,
        pool: cfg.pick(a.pool, "pool", d.pool)?,
        dim,
        attention_single_weight: cfg.flag(a.attention_single_weight, "attention-single-weight")?,
    };
    enc.validate()?;
    Ok(enc)
}

/// The two languages of `space`, reordered to `(first, second)`.
fn pair_space(space: &EmbeddingSpace, first: Lang, second: Lang) -> Result<EmbeddingSpace> {
    EmbeddingSpace::from_tables(
        space.dim(),
        vec![space.table(first)?.clone(), space.table(second)?.clone()],
    )
}

fn train(cfg: &Settings, a: ModelArgs, strategy: Strategy, corpora: Option<Corpora>, out: &mut dyn Write) -> Result<i32> {
    let (def_lang, target_lang) = cfg.lang_pair(a.lang_pair.clone(), None)?;
    let space = EmbeddingSpace::import_text(File::open(&a.embeddings)?)?;
    let space = pair_space(&space, def_lang, target_lang)?;
    let enc = encoder_config(cfg, &a, space.dim())?;
    let d = TrainConfig::default();
    let clip = cfg.pick(a.clip_norm, "clip-norm", d.clip_norm.unwrap_or(0.0))?;
    let mut tc = TrainConfig {
        strategy,
        batch_size: cfg.pick(a.batch_size, "batch-size", d.batch_size)?,
        epochs: cfg.pick(a.epochs, "epochs", d.epochs)?,
        opt: OptConfig::with_alpha(cfg.pick(a.lr, "lr", d.opt.alpha)?),
        seed: cfg.seed(a.seed)?,
        clip_norm: (clip > 0.0).then_some(clip),
        checkpoint_every: cfg.pick(a.checkpoint_every, "checkpoint-every", d.checkpoint_every)?,
        ..d
    };
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let kind = enc.kind;
    let model = Model::new(&space, enc, &mut rng)?;
    let entries = load_dictionary(&a.dict)?;
    let mut data = TrainData::from_dictionary(&model, &entries)?;
    if let Some(c) = corpora {
        tc.lambda1 = cfg.pick(c.lambda1, "lambda1", d.lambda1)?;
        tc.lambda2 = cfg.pick(c.lambda2, "lambda2", d.lambda2)?;
        tc.sg_batch_size = cfg.pick(c.sg_batch_size, "sg-batch-size", d.sg_batch_size)?;
        tc.sync = cfg.flag(c.sync, "sync")?;
        let mono_a = load_monolingual(&c.mono_a)?;
        let mono_b = load_monolingual(&c.mono_b)?;
        let parallel = load_parallel(&c.parallel)?;
        data = data.with_corpora(&model, &mono_a, &mono_b, &parallel);
    }
    log::info!(
        "{} forward and {} backward entries, encoder {}",
        data.forward.len(),
        data.backward.len(),
        kind
    );
    let snapshot = |m: &Model| {
        let mut ck = Checkpoint::new(m.clone());
        ck.set("strategy", tc.strategy);
        ck.set("seed", tc.seed);
        ck.set("lambda1", tc.lambda1);
        ck.set("lambda2", tc.lambda2);
        ck.set("sync", tc.sync);
        ck
    };
    let path = a.out.clone();
    let mut hook = |epoch: usize, m: &Model| -> Result<()> {
        let mut ck = snapshot(m);
        ck.set("epoch", epoch);
        ck.save(&path)
    };
    let (model, report) = run_training_with(&tc, &data, model, Some(&mut hook))?;
    if let Some(bad) = model.store().first_non_finite() {
        return Err(Error::Numeric(format!("parameter {bad} is not finite after training")));
    }
    let mut ck = snapshot(&model);
    ck.set("epoch", tc.epochs);
    ck.save(&a.out)?;
    if let Some(log) = &a.log {
        report.write_tsv(BufWriter::new(File::create(log)?))?;
    }
    writeln!(
        out,
        "epochs\t{}\tdict_loss\t{:.6}\tseconds\t{:.2}",
        tc.epochs,
        report.final_dict_loss().unwrap_or(f64::NAN),
        report.wall_time.as_secs_f64()
    )?;
    Ok(0)
}

fn load_model(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

fn eval_retrieval(cfg: &Settings, a: RetrievalArgs, out: &mut dyn Write) -> Result<i32> {
    let ck = load_model(&a.model)?;
    let model = ck.model();
    let (def_lang, target_lang) = cfg.lang_pair(a.lang_pair, Some(model.langs()))?;
    let metric = cfg.pick(a.metric, "metric", Metric::SqEuclidean)?;
    let tests = load_dictionary(&a.test)?;
    let restriction = match &a.restrict {
        Some(p) => Some(fs::read_to_string(p)?.split_whitespace().map(str::to_owned).collect::<Vec<_>>()),
        None => None,
    };
    let (cases, result) = if cfg.flag(a.mono_baseline, "mono-baseline")? {
        if restriction.is_some() {
            return Err(Error::Config("--restrict does not apply to the two-stage baseline".into()));
        }
        evaluate_mono_baseline(model, &tests, def_lang, target_lang, metric)?
    } else {
        evaluate_retrieval(model, &tests, def_lang, target_lang, restriction.as_deref(), metric)?
    };
    match &a.out {
        Some(p) => {
            write_retrieval_report(BufWriter::new(File::create(p)?), &cases, &result)?;
            writeln!(out, "{:.2}\t{:.2}\t{:.4}", result.p_at_1, result.p_at_10, result.mrr)?;
        }
        None => write_retrieval_report(out, &cases, &result)?,
    }
    Ok(0)
}

fn eval_paraphrase_cmd(cfg: &Settings, a: ParaphraseArgs, out: &mut dyn Write) -> Result<i32> {
    let ck = load_model(&a.model)?;
    let model = ck.model();
    let langs = cfg.lang_pair(a.lang_pair, Some(model.langs()))?;
    let d = MlpConfig::default();
    let mcfg = MlpConfig {
        hidden: cfg.pick(a.hidden, "hidden", d.hidden)?,
        max_epochs: cfg.pick(a.max_epochs, "max-epochs", d.max_epochs)?,
        patience: cfg.pick(a.patience, "patience", d.patience)?,
        opt: OptConfig::with_alpha(cfg.pick(a.lr, "lr", d.opt.alpha)?),
        seed: cfg.seed(a.seed)?,
        ..d
    };
    let train = load_paraphrase_pairs(&a.train)?;
    let valid = load_paraphrase_pairs(&a.valid)?;
    let test = load_paraphrase_pairs(&a.test)?;
    let (clf, summary) = train_paraphrase_classifier(model, &train, &valid, langs, &mcfg)?;
    log::info!(
        "classifier: best validation accuracy {:.4} at epoch {} of {}",
        summary.best_valid_accuracy,
        summary.best_epoch,
        summary.epochs_run
    );
    let result = eval_paraphrase(&clf, &test, model, langs)?;
    match &a.out {
        Some(p) => {
            write_paraphrase_report(BufWriter::new(File::create(p)?), &test, &result)?;
            writeln!(out, "{:.4}\t{:.4}", result.accuracy, result.f1)?;
        }
        None => write_paraphrase_report(out, &test, &result)?,
    }
    if let Some(p) = &a.save {
        let mut saved = Checkpoint::new(model.clone()).with_classifier(clf);
        for key in ["strategy", "seed", "lambda1", "lambda2", "sync", "epoch"] {
            if let Some(v) = ck.get(key) {
                saved.set(key, v);
            }
        }
        saved.save(p)?;
    }
    Ok(0)
}

fn query(cfg: &Settings, a: QueryArgs, out: &mut dyn Write) -> Result<i32> {
    let ck = load_model(&a.model)?;
    let model = ck.model();
    let (def_lang, target_lang) = cfg.lang_pair(a.lang_pair, Some(model.langs()))?;
    let topk = cfg.pick(a.topk, "topk", 10)?;
    let metric = cfg.pick(a.metric, "metric", Metric::SqEuclidean)?;
    let tokens = tokenize(&a.text);
    if tokens.is_empty() {
        return Err(Error::Ingestion("query text is empty".into()));
    }
    let q = model.encode(def_lang, &tokens)?;
    let vocab = model.vocab(target_lang)?;
    let emb = model.embeddings(target_lang)?;
    for (idx, dist) in nearest(&q, &all_words(vocab.len()), emb, metric, topk) {
        writeln!(out, "{}\t{:.6}", vocab.token(idx), dist)?;
    }
    Ok(0)
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn gradcheck(cfg: &Settings, a: GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let dim = cfg.pick(a.dim, "dim", 4)?;
    let kind = cfg.pick(a.encoder, "encoder", EncoderKind::Att)?;
    let r = check_all(kind, dim, cfg.seed(a.seed)?)?;
    writeln!(out, "dict\t{:.3e}", r.dict)?;
    writeln!(out, "skipgram\t{:.3e}", r.skipgram)?;
    writeln!(out, "align\t{:.3e}", r.align)?;
    writeln!(out, "mlp\t{:.3e}", r.mlp)?;
    writeln!(out, "max relative error\t{:.3e}", r.max())?;
    Ok(if r.max() < GRADCHECK_TOLERANCE { 0 } else { 3 })
}

fn make_paraphrase_data(cfg: &Settings, a: MakeParaphraseArgs, out: &mut dyn Write) -> Result<i32> {
    let ck = load_model(&a.model)?;
    let model = ck.model();
    let (la, lb) = cfg.lang_pair(a.lang_pair, Some(model.langs()))?;
    let vocab = model.vocab(la)?;
    let mut defs: BTreeMap<usize, (Option<Vec<String>>, Option<Vec<String>>)> = BTreeMap::new();
    for e in load_dictionary(&a.dict)? {
        if e.target_lang != la {
            continue;
        }
        let Some(w) = vocab.get(&e.target_word).filter(|&w| w >= 2) else {
            continue;
        };
        let slot = defs.entry(w).or_default();
        if e.def_lang == la && slot.0.is_none() {
            slot.0 = Some(e.definition);
        } else if e.def_lang == lb && slot.1.is_none() {
            slot.1 = Some(e.definition);
        }
    }
    let words: Vec<DefinedWord> = defs
        .into_iter()
        .filter_map(|(word, d)| match d {
            (Some(def_a), Some(def_b)) => Some(DefinedWord { word, def_a, def_b }),
            _ => None,
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed(a.seed)?);
    let pairs = make_paraphrase_dataset(&words, model.embeddings(la)?, &mut rng)?;
    let n = pairs.len();
    let n_train = n * 70 / 100;
    let n_valid = n * 5 / 100;
    if n_valid == 0 || n_train + n_valid >= n {
        return Err(Error::Generation(format!("{n} pairs are too few for a 70/5/25 split")));
    }
    fs::create_dir_all(&a.out_dir)?;
    let (train, rest) = pairs.split_at(n_train);
    let (valid, test) = rest.split_at(n_valid);
    for (name, part) in [("train.tsv", train), ("valid.tsv", valid), ("test.tsv", test)] {
        write_paraphrase_pairs(BufWriter::new(File::create(a.out_dir.join(name))?), part)?;
    }
    writeln!(out, "words\t{}\ttrain\t{}\tvalid\t{}\ttest\t{}", words.len(), train.len(), valid.len(), test.len())?;
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lang_pairs() {
        let (a, b) = parse_lang_pair("en-fr").unwrap();
        assert_eq!((a.as_str(), b.as_str()), ("en", "fr"));
        assert!(parse_lang_pair("en").is_err());
        assert!(parse_lang_pair("en-en").is_err());
        assert!(parse_lang_pair("EN-fr").is_err());
    }

    #[test]
    fn flags_override_config_file() {
        let mut s = Settings::default();
        s.0.insert("epochs".into(), "7".into());
        assert_eq!(s.pick(None, "epochs", 1000usize).unwrap(), 7);
        assert_eq!(s.pick(Some(3), "epochs", 1000usize).unwrap(), 3);
        assert_eq!(s.pick(None, "batch-size", 64usize).unwrap(), 64);
        s.0.insert("lr".into(), "fast".into());
        assert!(matches!(s.pick::<f64>(None, "lr", 0.1), Err(Error::Config(_))));
    }

    #[test]
    fn gradcheck_passes() {
        let mut out = Vec::new();
        let argv = ["bildrl", "gradcheck", "--dim", "4", "--encoder", "att", "--seed", "7"];
        assert_eq!(run_with_output(argv, &mut out), 0);
        let text = String::from_utf8(out).unwrap();
        assert!(text.lines().last().unwrap().starts_with("max relative error\t"));
    }
}
