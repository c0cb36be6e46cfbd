//! Train one fold on the synthetic planted-community corpus and print the
//! loss curve plus a small evaluation sweep.
//!
//! Usage:
//!   cargo run --release -p gib-core --example train_synthetic -- \
//!     [epochs] [batch] [lr] [alpha] [beta] [hidden] [gcn|gin] [analog|digital]

use gib_core::backbone::{BackboneKind, GraphTensors};
use gib_core::channel::ChannelConfig;
use gib_core::dataset::{generate_synthetic, kfold_split};
use gib_core::trainer::{evaluate, train_fold, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let num = |i: usize, default: f64| -> f64 {
        args.get(i).and_then(|s| s.parse().ok()).unwrap_or(default)
    };
    let epochs = num(1, 100.0) as usize;
    let batch = num(2, 32.0) as usize;
    let lr = num(3, 3e-3);
    let alpha = num(4, 1.0);
    let beta = num(5, 0.1);
    let hidden = num(6, 16.0) as usize;
    let backbone = match args.get(7).map(String::as_str) {
        Some("gcn") => BackboneKind::Gcn,
        _ => BackboneKind::Gin,
    };
    let digital = args.get(8).map(String::as_str) == Some("digital");

    let corpus = generate_synthetic(200, 7).unwrap();
    let split = kfold_split(&corpus, 10, 7).unwrap();
    let mut config = if digital {
        TrainConfig::digital_defaults(7)
    } else {
        TrainConfig::analog_defaults(7)
    };
    config.epochs = epochs;
    config.batch_size = batch;
    config.learning_rate = lr;
    config.alpha = alpha;
    config.beta = beta;
    config.hidden_dim = hidden;
    config.backbone = backbone;

    let start = std::time::Instant::now();
    let outcome = train_fold(&corpus, &split, 0, &config).unwrap();
    let train_time = start.elapsed().as_secs_f64();

    println!("{:>5} {:>9} {:>9} {:>9} {:>9} {:>9}", "epoch", "inf", "mi", "con", "total", "acc");
    for stat in outcome.curve.iter().step_by((epochs / 15).max(1)) {
        println!(
            "{:>5} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            stat.epoch,
            stat.loss.inf,
            stat.loss.mi,
            stat.loss.con,
            stat.loss.total,
            stat.train_accuracy
        );
    }
    if let Some(last) = outcome.curve.last() {
        println!(
            "final: acc {:.4}, total {:.4} ({train_time:.1}s)",
            last.train_accuracy, last.loss.total
        );
    }
    if let Some(cb) = outcome.codebook.as_ref() {
        let active = cb.ema_counts.iter().filter(|&&c| c > 0.01).count();
        println!("codebook: {}/{} codewords active", active, cb.size());
    }

    let tensors: Vec<GraphTensors> =
        corpus.graphs.iter().map(GraphTensors::from_graph).collect();
    let settings: Vec<ChannelConfig> = if digital {
        [0.90, 0.92, 0.94, 0.96, 0.98]
            .iter()
            .map(|&e| ChannelConfig::Discrete { epsilon: e, r: config.codebook_size, seed: 1 })
            .collect()
    } else {
        [-15.0, -5.0, 5.0, 15.0, 25.0]
            .iter()
            .map(|&snr| ChannelConfig::Analog { snr_db: snr, seed: 1 })
            .collect()
    };
    let outcomes = evaluate(
        &outcome.model,
        outcome.codebook.as_ref(),
        &tensors,
        &split,
        0,
        &settings,
        &config,
    )
    .unwrap();
    for out in outcomes {
        println!("eval {:>7.2}: acc {:.4}", out.setting.setting_value(), out.accuracy);
    }
}
