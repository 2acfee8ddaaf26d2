use std::time::Instant;

use mtlsplit_core::data::FactorSpec;
use mtlsplit_core::model::ModelConfig;
use mtlsplit_core::train::{run_benchmark, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let lr: f32 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let width: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(64);
    let noise: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.15);

    let spec = FactorSpec::default_benchmark();
    let model_config = ModelConfig {
        input_shape: (16, 16, 3),
        backbone_widths: vec![width],
        feature_len: 64,
        head_hidden_width: 32,
        tasks: spec.tasks(),
    };
    let cfg = TrainConfig {
        epochs,
        learning_rate: lr,
        ..TrainConfig::default()
    };
    println!("epochs={epochs} lr={lr} width={width} noise={noise}");

    let started = Instant::now();
    for seed in [41u64, 42, 43] {
        let t0 = Instant::now();
        let outcome = run_benchmark(&spec, noise, &model_config, &cfg, 0.8, seed).unwrap();
        println!(
            "seed {seed}: stl={:?} mtl={:?} deltas={:?} ({:.1}s)",
            outcome
                .stl_accuracies
                .iter()
                .map(|a| (a * 100.0).round() / 100.0)
                .collect::<Vec<_>>(),
            outcome
                .mtl_accuracies
                .iter()
                .map(|a| (a * 100.0).round() / 100.0)
                .collect::<Vec<_>>(),
            outcome
                .deltas()
                .iter()
                .map(|a| (a * 100.0).round() / 100.0)
                .collect::<Vec<_>>(),
            t0.elapsed().as_secs_f64()
        );
    }
    println!("total {:.1}s", started.elapsed().as_secs_f64());
}
