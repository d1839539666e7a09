//! Cross-lingual reverse dictionary: describe a concept in one language and
//! list the nearest words of the other.

use bildrl::dicttrain::{run_training, Model, TrainConfig, TrainData};
use bildrl::encoders::{EncoderConfig, EncoderKind};
use bildrl::evaluate::{all_words, nearest, Metric};
use bildrl::numerics::OptConfig;
use bildrl::synth::{Side, SynthConfig, SynthWorld};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> bildrl::Result<()> {
    let world = SynthWorld::generate(&SynthConfig { concepts: 200, ..SynthConfig::default() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let all: Vec<usize> = (0..200).collect();
    let entries = world.cross_entries(&all, &mut rng);
    let enc = EncoderConfig { layers: 1, hidden: 32, seq_len: 10, ..EncoderConfig::new(EncoderKind::Gru, 16) };
    let model = Model::new(&world.space, enc, &mut rng)?;
    let data = TrainData::from_dictionary(&model, &entries)?;
    let cfg = TrainConfig { epochs: 100, batch_size: 32, opt: OptConfig::with_alpha(0.01), ..TrainConfig::default() };
    let (model, _) = run_training(&cfg, &data, model)?;

    let (la, lb) = world.config().langs;
    let target = model.embeddings(lb)?;
    let vocab = model.vocab(lb)?;
    for concept in [3, 42, 117] {
        // a fresh description, never seen in training
        let def = world.definition(concept, Side::A, &mut rng);
        let v = model.encode(la, &def)?;
        let hits = nearest(&v, &all_words(vocab.len()), target, Metric::SqEuclidean, 3);
        let shown: Vec<String> = hits.iter().map(|(w, d)| format!("{} ({d:.3})", vocab.token(*w))).collect();
        println!("{:<28} -> {}   expected {}", def.join(" "), shown.join(", "), world.word(concept, Side::B));
    }
    Ok(())
}
