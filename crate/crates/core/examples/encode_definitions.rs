//! Encode one definition with each encoder family and show where the
//! attentive encoder puts its weight.

use bildrl::encoders::{EncoderConfig, EncoderKind};
use bildrl::dicttrain::Model;
use bildrl::synth::{Side, SynthConfig, SynthWorld};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> bildrl::Result<()> {
    let world = SynthWorld::generate(&SynthConfig::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let def = world.definition(0, Side::A, &mut rng);
    let (la, _) = world.config().langs;
    println!("definition: {}", def.join(" "));

    for kind in [EncoderKind::Bow, EncoderKind::Cnn, EncoderKind::Gru, EncoderKind::Att] {
        let cfg = EncoderConfig { layers: 2, hidden: 12, seq_len: 8, ..EncoderConfig::new(kind, world.space.dim()) };
        let model = Model::new(&world.space, cfg, &mut rng)?;
        let v = model.encode(la, &def)?;
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let params: usize = model.encoder().param_ids().iter().map(|&id| model.store().value(id).data().len()).sum();
        println!("{:>4}: {params} parameters, |E(S)| = {norm:.4}", kind.to_string());
        if kind == EncoderKind::Att {
            let seq = model.sequence(la, &def)?;
            let trace = model.encoder().forward(model.store().values(), model.embeddings(la)?, &seq)?;
            let weights = trace.attention_weights().unwrap_or_default();
            for (tok, a) in def.iter().zip(weights) {
                println!("      {tok:<10} {a:.3}");
            }
        }
    }
    Ok(())
}
