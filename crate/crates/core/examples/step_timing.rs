//! Wall-clock time per training step on synthetic data.

use std::time::Instant;

use idsynth::datasets::{generate_synthetic_dataset, SyntheticSpec};
use idsynth::networks::ArchitectureConfig;
use idsynth::trainer::{TrainConfig, Trainer};

fn main() -> idsynth::Result<()> {
    let batch: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(16);
    let data = generate_synthetic_dataset(&SyntheticSpec::default())?;
    let config = TrainConfig { batch_size: batch, total_steps: 40, ..TrainConfig::default() };
    let mut t = Trainer::<f32>::new(&ArchitectureConfig::default(), config)?;
    t.step(&data, None)?;
    let start = Instant::now();
    let mut last = None;
    for _ in 0..20 {
        last = Some(t.step(&data, None)?);
    }
    let per = start.elapsed().as_secs_f64() / 20.0;
    println!("batch {batch}: {:.1} ms/step", per * 1e3);
    println!("{}", last.unwrap().report);
    Ok(())
}
