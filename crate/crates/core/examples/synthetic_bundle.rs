//! Write a synthetic bilingual corpus bundle for the command line tools.
//!
//! ```text
//! cargo run --release --example synthetic_bundle -- /tmp/bundle
//! ```
//!
//! The directory receives `embeddings.txt`, `train.tsv`, `test.tsv`,
//! `mono_a.txt`, `mono_b.txt` and `parallel.tsv` for the pair en-fr.

use bildrl::synth::{SynthConfig, SynthWorld};

fn main() -> bildrl::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "bundle".into());
    let cfg = SynthConfig {
        concepts: 300,
        ..SynthConfig::default()
    };
    let world = SynthWorld::generate(&cfg)?;
    world.write_bundle(&dir, 30)?;
    println!("wrote {} concepts ({} held out) to {dir}", world.concepts.len(), 30);
    Ok(())
}
