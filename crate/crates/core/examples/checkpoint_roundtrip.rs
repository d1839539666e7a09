//! Save a trained model, load it back and confirm nothing changed.

use bildrl::checkpoint::Checkpoint;
use bildrl::dicttrain::{run_training, Model, TrainConfig, TrainData};
use bildrl::encoders::{EncoderConfig, EncoderKind};
use bildrl::synth::{Side, SynthConfig, SynthWorld};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> bildrl::Result<()> {
    let world = SynthWorld::generate(&SynthConfig { concepts: 60, ..SynthConfig::default() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let all: Vec<usize> = (0..60).collect();
    let entries = world.cross_entries(&all, &mut rng);
    let model = Model::new(&world.space, EncoderConfig { layers: 1, hidden: 16, seq_len: 10, ..EncoderConfig::new(EncoderKind::Gru, 16) }, &mut rng)?;
    let data = TrainData::from_dictionary(&model, &entries)?;
    let (model, _) = run_training(&TrainConfig { epochs: 5, ..TrainConfig::default() }, &data, model)?;

    let mut ck = Checkpoint::new(model);
    ck.set("note", "example run");
    let path = std::env::temp_dir().join("bildrl-example.ckpt");
    ck.save(&path)?;
    let back = Checkpoint::load(&path)?;

    let (la, _) = world.config().langs;
    let def = world.definition(7, Side::A, &mut rng);
    let before = ck.model().encode(la, &def)?;
    let after = back.model().encode(la, &def)?;
    println!("{} bytes at {}", std::fs::metadata(&path)?.len(), path.display());
    println!("note = {:?}", back.get("note"));
    println!("checksum {:016x} -> {:016x}", ck.model().checksum(), back.model().checksum());
    println!("encodings identical: {}", before == after);
    std::fs::remove_file(path)?;
    Ok(())
}
