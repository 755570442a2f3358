//! Attack success rate and detector accuracy on a trained checkpoint.
//!
//! `adversarial_run <checkpoint_dir> [pairs]`

use std::path::Path;
use std::time::Instant;

use idsynth::adversarial::{
    calibrate_theta, craft_adversarial, pair_features, train_detector, with_reconstructions, AttackConfig, SvmConfig,
};
use idsynth::checkpoint::load_checkpoint;
use idsynth::datasets::{generate_synthetic_dataset, SyntheticSpec};
use idsynth::eval::EvalSplit;
use idsynth::networks::ModelState;
use idsynth::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> idsynth::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let state: ModelState<f32> = load_checkpoint(Path::new(&args[1]))?;
    let pairs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(100);
    let data = generate_synthetic_dataset(&SyntheticSpec::default())?;
    let split = EvalSplit::from_dataset(&data, 40)?;
    let shape = [3, 32, 32];
    let theta = calibrate_theta(&state, &split.queries.images, &split.queries.labels, shape)?;
    println!("theta {theta:.4}");
    let cfg = AttackConfig { theta, ..AttackConfig::default() };
    let q = &split.queries;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let one = |i: usize| Tensor::from_vec(&[1, 3, 32, 32], q.images[i].clone()).unwrap();
    let start = Instant::now();
    let (mut ok, mut genuine, mut adv) = (0, vec![], vec![]);
    let mut iters = 0;
    for _ in 0..pairs {
        let a = rng.random_range(0..q.len());
        let b = loop {
            let b = rng.random_range(0..q.len());
            if q.labels[b] != q.labels[a] {
                break b;
            }
        };
        let res = craft_adversarial(&state, &one(a), &one(b), &cfg)?;
        iters += res.iterations;
        if res.success {
            ok += 1;
            adv.push(res.x_adv.data().to_vec());
            genuine.push(q.images[a].clone());
        }
    }
    println!(
        "success {ok}/{pairs} in {:.1}s, mean iterations {}",
        start.elapsed().as_secs_f64(),
        iters / pairs
    );
    let g = with_reconstructions(&state, &genuine)?;
    let a = with_reconstructions(&state, &adv)?;
    let h = g.len() / 2;
    let det = train_detector(&g[..h], &a[..h], 3, 32, &SvmConfig::default())?;
    let mut correct = 0;
    for (pairs, positive) in [(&g[h..], false), (&a[h..], true)] {
        for (x, r) in pairs {
            let s = det.svm.score(&pair_features(x, r, 3, 32)?);
            if (s > 0.0) == positive {
                correct += 1;
            }
        }
    }
    println!(
        "detector train acc {:.3}, held-out acc {:.3}",
        det.svm.training_accuracy,
        correct as f64 / (g.len() - h + a.len() - h) as f64
    );
    Ok(())
}
