//! Joint training: the dictionary loss plus Skip-Gram on both monolingual
//! corpora and sentence alignment on the parallel corpus, once with
//! asynchronous workers and once round-robin on one thread.

use bildrl::dicttrain::{run_training, Model, Strategy, TrainConfig, TrainData};
use bildrl::encoders::{EncoderConfig, EncoderKind};
use bildrl::numerics::OptConfig;
use bildrl::synth::{Side, SynthConfig, SynthWorld};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> bildrl::Result<()> {
    let world = SynthWorld::generate(&SynthConfig { concepts: 300, ..SynthConfig::default() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let all: Vec<usize> = (0..300).collect();
    let entries = world.cross_entries(&all, &mut rng);
    let mono_a = world.mono_corpus(Side::A, 500, &mut rng);
    let mono_b = world.mono_corpus(Side::B, 500, &mut rng);
    let parallel = world.parallel_corpus(200, &mut rng);

    for sync in [false, true] {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = EncoderConfig { layers: 1, hidden: 32, seq_len: 10, ..EncoderConfig::new(EncoderKind::Gru, 16) };
        let model = Model::new(&world.space, enc, &mut rng)?;
        let data = TrainData::from_dictionary(&model, &entries)?.with_corpora(&model, &mono_a, &mono_b, &parallel);
        let cfg = TrainConfig {
            strategy: Strategy::Joint,
            sync,
            epochs: 20,
            batch_size: 32,
            opt: OptConfig::with_alpha(0.005),
            ..TrainConfig::default()
        };
        let (model, report) = run_training(&cfg, &data, model)?;
        let last = report.epochs.last().expect("at least one epoch");
        println!(
            "{}: dict {:.5} sgA {:.4} sgB {:.4} align {:.4}  updates {:?}  finite {}  {:.1}s",
            if sync { "sync " } else { "async" },
            last.dict,
            last.sg_a,
            last.sg_b,
            last.align,
            report.updates,
            model.store().all_finite(),
            report.wall_time.as_secs_f64()
        );
    }
    Ok(())
}
