//! Pre-train a two-language embedding space with Skip-Gram plus sentence
//! alignment, then check that translations moved closer together.

use bildrl::bilembed::{pretrain, EmbeddingSpace, EncodedPair, PretrainConfig};
use bildrl::corpus::Vocabulary;
use bildrl::synth::{Side, SynthConfig, SynthWorld};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> bildrl::Result<()> {
    let world = SynthWorld::generate(&SynthConfig { concepts: 100, ..SynthConfig::default() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mono_a = world.mono_corpus(Side::A, 400, &mut rng);
    let mono_b = world.mono_corpus(Side::B, 400, &mut rng);
    let parallel = world.parallel_corpus(150, &mut rng);
    let (la, lb) = world.config().langs;

    let va = Vocabulary::build(la, mono_a.iter().chain(parallel.iter().map(|p| &p.sent_a)), 1)?;
    let vb = Vocabulary::build(lb, mono_b.iter().chain(parallel.iter().map(|p| &p.sent_b)), 1)?;
    let enc_a: Vec<Vec<usize>> = mono_a.iter().map(|s| va.encode(s)).collect();
    let enc_b: Vec<Vec<usize>> = mono_b.iter().map(|s| vb.encode(s)).collect();
    let pairs: Vec<EncodedPair> = parallel.iter().map(|p| EncodedPair::encode(p, &va, &vb)).collect();

    let mut space = EmbeddingSpace::random(16, vec![va, vb], &mut rng)?;
    let cfg = PretrainConfig { epochs: 10, ..PretrainConfig::default() };
    let report = pretrain(&mut space, &enc_a, &enc_b, &pairs, &cfg, &mut rng)?;
    for (e, d) in report.mean_distance.iter().enumerate() {
        println!(
            "epoch {:>2}  sgA {:.4}  sgB {:.4}  mean sentence distance {:.4}",
            e + 1,
            report.skipgram_a[e],
            report.skipgram_b[e],
            d
        );
    }
    Ok(())
}
