//! Trains the reference net on the bundled digit subset.
//!
//! `cargo run --release -p doconv-core --example train_digits -- [baseline|doconv] [epochs] [seed] [constant|cosine]`

use doconv_core::io::DatasetPaths;
use doconv_core::train::{train_run, LrSchedule, NetworkSpec, TrainConfig, Variant};

fn main() -> doconv_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let variant = match args.first().map(String::as_str) {
        Some("baseline") => Variant::Baseline,
        _ => Variant::DoConv,
    };
    let epochs = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);

    let data_dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data");
    let (train, test) = DatasetPaths::in_dir(data_dir, "digits").load()?;
    let schedule = match args.get(3).map(String::as_str) {
        Some("cosine") => LrSchedule::Cosine,
        _ => LrSchedule::Constant,
    };
    let cfg = TrainConfig {
        epochs,
        schedule,
        ..TrainConfig::default()
    };
    let (report, _) = train_run(&NetworkSpec::reference(), variant, &train, Some(&test), &cfg, seed, |e| {
        println!(
            "epoch {:>2}  loss {:.4}  train acc {:.4}  test acc {:.4}  ({:.1}s)",
            e.epoch,
            e.train_loss,
            e.train_accuracy,
            e.test_accuracy.unwrap_or(f64::NAN),
            e.seconds
        );
    })?;
    println!("{variant}: final test accuracy {:.4}", report.final_test_accuracy().unwrap_or(f64::NAN));
    Ok(())
}
