use std::path::Path;
use std::process::{Command, Output};

use bildrl::evaluate::retrieval_metrics;
use bildrl::synth::{SynthConfig, SynthWorld};

fn bildrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bildrl")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn p(dir: &Path, f: &str) -> String {
    dir.join(f).to_str().unwrap().to_owned()
}

fn bundle() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let world = SynthWorld::generate(&SynthConfig { concepts: 120, mono_sentences: 200, parallel_sentences: 60, ..SynthConfig::default() }).unwrap();
    world.write_bundle(dir.path(), 20).unwrap();
    dir
}

fn train_dict(dir: &Path) -> String {
    let out = p(dir, "m.ckpt");
    let o = bildrl(&[
        "train-dict", "--embeddings", &p(dir, "embeddings.txt"), "--dict", &p(dir, "train.tsv"), "--lang-pair",
        "en-fr", "--encoder", "gru", "--layers", "1", "--hidden", "8", "--seq-len", "8", "--epochs", "3", "--seed",
        "2", "--out", &out, "--log", &p(dir, "log.tsv"),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(bildrl(&[]).status.code(), Some(1));
    assert_eq!(bildrl(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(bildrl(&["query", "--topk", "many"]).status.code(), Some(1));
}

#[test]
fn help_exits_0() {
    let o = bildrl(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    for cmd in [
        "train-embed", "train-dict", "train-joint", "eval-retrieval", "eval-paraphrase", "query", "gradcheck",
        "make-paraphrase-data",
    ] {
        assert!(stdout(&o).contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn missing_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = bildrl(&["eval-retrieval", "--model", &p(dir.path(), "absent.ckpt"), "--test", &p(dir.path(), "t.tsv")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
}

#[test]
fn gradcheck_command_passes() {
    let o = bildrl(&["gradcheck", "--encoder", "cnn", "--dim", "5", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0));
    let max: f64 = stdout(&o).lines().last().unwrap().split('\t').nth(1).unwrap().parse().unwrap();
    assert!(max < 1e-4);
}

#[test]
fn dictionary_pipeline() {
    let dir = bundle();
    let d = dir.path();
    let model = train_dict(d);
    let log = std::fs::read_to_string(p(d, "log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 3);

    let o = bildrl(&["eval-retrieval", "--model", &model, "--test", &p(d, "test.tsv"), "--lang-pair", "en-fr"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    let ranks: Vec<usize> = lines[..lines.len() - 1].iter().map(|l| l.split('\t').nth(1).unwrap().parse().unwrap()).collect();
    let r = retrieval_metrics(&ranks).unwrap();
    assert_eq!(lines.last().unwrap(), &format!("{:.2}\t{:.2}\t{:.4}", r.p_at_1, r.p_at_10, r.mrr));

    let o = bildrl(&["query", "--model", &model, "--lang-pair", "en-fr", "--text", "enp1 enf2 enp4", "--topk", "7"]);
    assert!(o.status.success());
    let dists: Vec<f64> = stdout(&o).lines().map(|l| l.split('\t').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(dists.len(), 7);
    assert!(dists.windows(2).all(|w| w[0] <= w[1]));

    let o = bildrl(&[
        "make-paraphrase-data", "--model", &model, "--dict", &p(d, "train.tsv"), "--lang-pair", "en-fr", "--seed", "1",
        "--out-dir", &p(d, "para"),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let para = d.join("para");
    let o = bildrl(&[
        "eval-paraphrase", "--model", &model, "--train", &p(&para, "train.tsv"), "--valid", &p(&para, "valid.tsv"),
        "--test", &p(&para, "test.tsv"), "--lang-pair", "en-fr", "--max-epochs", "20", "--out", &p(d, "para.txt"),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let scores: Vec<f64> = stdout(&o).trim().split('\t').map(|s| s.parse().unwrap()).collect();
    assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));
}

#[test]
fn embedding_and_joint_commands() {
    let dir = bundle();
    let d = dir.path();
    let o = bildrl(&[
        "train-embed", "--mono-a", &p(d, "mono_a.txt"), "--mono-b", &p(d, "mono_b.txt"), "--parallel",
        &p(d, "parallel.tsv"), "--lang-pair", "en-fr", "--dim", "8", "--epochs", "1", "--out", &p(d, "emb.txt"),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("emb.txt").exists());

    let o = bildrl(&[
        "train-joint", "--embeddings", &p(d, "embeddings.txt"), "--dict", &p(d, "train.tsv"), "--mono-a", &p(d, "mono_a.txt"),
        "--mono-b", &p(d, "mono_b.txt"), "--parallel", &p(d, "parallel.tsv"), "--lang-pair", "en-fr", "--encoder",
        "att", "--hidden", "8", "--layers", "1", "--seq-len", "8", "--epochs", "2", "--sync", "--out", &p(d, "j.ckpt"),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("epochs\t2\tdict_loss\t"));
}

#[test]
fn config_file_supplies_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = p(dir.path(), "run.conf");
    std::fs::write(&cfg, "encoder = bow\ndim = 6\nseed = 9\n").unwrap();
    let o = bildrl(&["--config", &cfg, "gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}
