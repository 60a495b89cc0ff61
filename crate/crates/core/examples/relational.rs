//! Relational-gain run on synthetic duplicate-key bags.
//!
//! `cargo run --release --example relational -- [epochs] [lr] [batch]`

use nodulesat::activation::Activation;
use nodulesat::attention::SatConfig;
use nodulesat::experiment::{fit_and_score, relational_split, TrainOptions};
use nodulesat::mil::{ModelConfig, TrainMode};
use nodulesat::optim::LrSchedule;
use nodulesat::synth::SynthSpec;

fn main() -> nodulesat::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let epochs: usize = arg(0, "30").parse().expect("epochs");
    let lr: f64 = arg(1, "1e-3").parse().expect("lr");
    let batch: usize = arg(2, "32").parse().expect("batch");
    let layers: usize = arg(3, "3").parse().expect("layers");
    let spec = SynthSpec {
        n_min: 2,
        n_max: 8,
        keys: 8,
        width: 64,
        mask_fraction: 0.0,
        seed: 7,
        ..SynthSpec::default()
    };
    let (train, test) = relational_split(&spec, 2000, 500)?;
    let sat = SatConfig {
        layers,
        hidden: 64,
        groups: 8,
        sigma: Activation::Elu,
    };
    let opts = TrainOptions {
        epochs,
        batch_bags: batch,
        schedule: LrSchedule::constant(lr),
        mode: TrainMode::EndToEnd,
        seed: 7,
        augment: false,
    };
    let summary = fit_and_score(ModelConfig::features(64, sat), &train, &test, &opts)?;
    println!("{summary:?}");
    Ok(())
}
