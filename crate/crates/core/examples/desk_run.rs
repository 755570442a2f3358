//! Train on the synthetic set and print evaluation metrics.
//!
//! `desk_run <variant> <seed> <steps> [checkpoint_dir]` where variant is one
//! of full, no_gc, no_gd, no_kl.

use std::path::Path;
use std::time::Instant;

use idsynth::checkpoint::save_checkpoint;
use idsynth::datasets::{generate_synthetic_dataset, SyntheticSpec};
use idsynth::eval::{evaluate, EvalSplit, Metrics, ProbeConfig};
use idsynth::networks::ArchitectureConfig;
use idsynth::trainer::{train, TrainConfig};

fn main() -> idsynth::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let variant = args.get(1).map(String::as_str).unwrap_or("full");
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let steps: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(5000);
    let data = generate_synthetic_dataset(&SyntheticSpec::default())?;
    let split = EvalSplit::from_dataset(&data, 40)?;
    let mut cfg = TrainConfig { total_steps: steps, seed, ..TrainConfig::default() };
    match variant {
        "no_gc" => cfg.use_feature_matching_c = false,
        "no_gd" => cfg.use_feature_matching_d = false,
        "no_kl" => cfg.use_kl = false,
        _ => {}
    }
    let start = Instant::now();
    let (state, reports) = train::<f32>(&ArchitectureConfig::default(), &cfg, &split.train, None)?;
    eprintln!("trained in {:.0}s; last: {}", start.elapsed().as_secs_f64(), reports.last().unwrap());
    if let Some(dir) = args.get(4) {
        save_checkpoint(&state, Path::new(dir))?;
    }
    let m = evaluate(&state, &split, &ProbeConfig::default(), seed)?;
    println!("variant\tseed\t{}", Metrics::HEADER);
    println!("{variant}\t{seed}\t{m}");
    Ok(())
}
