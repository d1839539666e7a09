//! Finite-difference check of every analytic gradient, for each encoder.

use bildrl::encoders::EncoderKind;
use bildrl::gradcheck::check_all;

fn main() -> bildrl::Result<()> {
    for kind in [EncoderKind::Bow, EncoderKind::Cnn, EncoderKind::Gru, EncoderKind::Att] {
        let r = check_all(kind, 5, 0)?;
        println!(
            "{:>4}: dict {:.2e}  skipgram {:.2e}  align {:.2e}  mlp {:.2e}",
            kind.to_string(),
            r.dict, r.skipgram, r.align, r.mlp
        );
    }
    Ok(())
}
