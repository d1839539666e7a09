//! Cross-lingual paraphrase identification: build positive and 15-NN
//! negative definition pairs, then train the classifier on encoder features.

use bildrl::dicttrain::{run_training, Model, TrainConfig, TrainData};
use bildrl::encoders::{EncoderConfig, EncoderKind};
use bildrl::evaluate::{eval_paraphrase, make_paraphrase_dataset, train_paraphrase_classifier, MlpConfig};
use bildrl::numerics::OptConfig;
use bildrl::synth::{SynthConfig, SynthWorld};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> bildrl::Result<()> {
    let world = SynthWorld::generate(&SynthConfig::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let all: Vec<usize> = (0..world.concepts.len()).collect();
    let entries = world.cross_entries(&all, &mut rng);
    let enc = EncoderConfig { layers: 1, hidden: 32, seq_len: 10, ..EncoderConfig::new(EncoderKind::Att, 16) };
    let model = Model::new(&world.space, enc, &mut rng)?;
    let data = TrainData::from_dictionary(&model, &entries)?;
    let cfg = TrainConfig { epochs: 40, batch_size: 32, opt: OptConfig::with_alpha(0.01), ..TrainConfig::default() };
    let (model, _) = run_training(&cfg, &data, model)?;

    let words = world.defined_words(&all, &mut rng);
    let pairs = make_paraphrase_dataset(&words, &world.space.tables()[0].input, &mut rng)?;
    let n = pairs.len();
    let (train, rest) = pairs.split_at(n * 70 / 100);
    let (valid, test) = rest.split_at(n * 5 / 100);
    let langs = world.config().langs;
    let (clf, summary) = train_paraphrase_classifier(&model, train, valid, langs, &MlpConfig::default())?;
    let r = eval_paraphrase(&clf, test, &model, langs)?;
    println!(
        "{} pairs, classifier stopped after {} epochs (best validation {:.3})",
        n, summary.epochs_run, summary.best_valid_accuracy
    );
    println!("test accuracy {:.3}  F1 {:.3}", r.accuracy, r.f1);
    Ok(())
}
