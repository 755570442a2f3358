//! Attribute-leakage probe variants on saved checkpoints.
//!
//! `probe_compare <ckpt>...`

use std::path::Path;

use idsynth::checkpoint::load_checkpoint;
use idsynth::datasets::{generate_synthetic_dataset, SyntheticSpec};
use idsynth::eval::{attribute_leakage_probe, EvalSplit, ProbeConfig};

fn main() -> idsynth::Result<()> {
    let data = generate_synthetic_dataset(&SyntheticSpec::default())?;
    let split = EvalSplit::from_dataset(&data, 40)?;
    println!("ckpt\tstandardize\tprobe_seed\ttrain\tvalidation");
    for ck in std::env::args().skip(1) {
        let state = load_checkpoint::<f32>(Path::new(&ck))?;
        for standardize in [false, true] {
            for seed in 0..3 {
                let cfg = ProbeConfig { standardize, seed, ..ProbeConfig::default() };
                let r = attribute_leakage_probe(&state, &split.train, 0.8, &cfg)?;
                println!("{ck}\t{standardize}\t{seed}\t{:.4}\t{:.4}", r.train_accuracy, r.validation_accuracy);
            }
        }
    }
    Ok(())
}
