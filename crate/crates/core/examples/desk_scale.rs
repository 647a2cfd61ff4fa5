//! Few-shot run on the synthetic ring corpus: 20 classes × 10 images,
//! 4 test images per class, Adam.
//!
//! cargo run --release -p irisnet --example desk_scale -- [seed] [epochs] [spec-file] [augment]
//!
//! Without a spec file (or with `-`) the stock `resnet_micro` is used.

use std::time::Instant;

use irisnet::data::{make_split, prepare, synth_corpus, AugmentPolicy};
use irisnet::training::{train_with_progress, TrainConfig};
use irisnet::{Model, ModelSpec};

fn main() -> irisnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(60);
    let spec = match args.next().filter(|s| s != "-") {
        Some(path) => {
            let text = std::fs::read_to_string(&path).map_err(|e| irisnet::Error::io(&path, e))?;
            ModelSpec::from_config_str(&text)?
        }
        None => ModelSpec::resnet_micro(20),
    };
    let augment = match args.next() {
        Some(p) => AugmentPolicy::parse(&p)
            .ok_or_else(|| irisnet::Error::Config(format!("bad augment policy `{p}`")))?,
        None => AugmentPolicy::none(),
    };
    let corpus = prepare(&synth_corpus(20, 10, 32, 32, seed), 32)?;
    let split = make_split(&corpus, 4, 0.2, seed)?;
    let config = TrainConfig {
        epochs,
        batch_size: 8,
        seed,
        augment,
        ..TrainConfig::default()
    };
    let mut model = Model::build(spec, seed)?;
    let start = Instant::now();
    let (_, report) = train_with_progress(&mut model, &split, &config, |e| {
        eprintln!("{}", irisnet::training::epoch_line(e));
    })?;
    println!(
        "seed {seed}: best_epoch {} val {:.3} test {:.4} ({:.1}s)",
        report.best_epoch,
        report.best_val_accuracy,
        report.test_accuracy,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
