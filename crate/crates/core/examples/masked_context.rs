//! Masked instances kept as attention context versus removed from the bags.
//!
//! `cargo run --release --example masked_context -- [epochs] [seeds] [lr]`

use nodulesat::activation::Activation;
use nodulesat::attention::SatConfig;
use nodulesat::experiment::{masked_context, TrainOptions};
use nodulesat::mil::TrainMode;
use nodulesat::optim::LrSchedule;
use nodulesat::synth::SynthSpec;

fn main() -> nodulesat::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let epochs: usize = arg(0, "30").parse().expect("epochs");
    let seeds: u64 = arg(1, "5").parse().expect("seeds");
    let lr: f64 = arg(2, "3e-3").parse().expect("lr");
    let sat = SatConfig {
        layers: 3,
        hidden: 64,
        groups: 8,
        sigma: Activation::Elu,
    };
    let mut margins = Vec::new();
    for seed in 0..seeds {
        let spec = SynthSpec {
            n_min: 2,
            n_max: 8,
            keys: 8,
            width: 64,
            mask_fraction: 0.4,
            seed,
            codebook_seed: seed,
            ..SynthSpec::default()
        };
        let opts = TrainOptions {
            epochs,
            batch_bags: 32,
            schedule: LrSchedule::constant(lr),
            mode: TrainMode::EndToEnd,
            seed,
            augment: false,
        };
        let r = masked_context(&spec, 2000, 500, sat.clone(), &opts)?;
        let m = r.with_context.test_auc - r.removed.test_auc;
        println!(
            "seed {seed}: context {:.4} removed {:.4} margin {m:.4} ({:.1}s + {:.1}s)",
            r.with_context.test_auc, r.removed.test_auc, r.with_context.seconds, r.removed.seconds
        );
        margins.push(m);
    }
    println!("mean margin {:.4}", margins.iter().sum::<f64>() / margins.len() as f64);
    Ok(())
}
