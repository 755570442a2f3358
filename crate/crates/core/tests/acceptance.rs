//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Desk-scale criteria train twelve models on the synthetic set (about an hour
//! on one core). Set `IDSYNTH_ACCEPTANCE_CACHE=<dir>` to keep trained
//! checkpoints between runs.

mod common;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use common::*;
use idsynth::adversarial::{
    calibrate_theta, craft_adversarial, pair_features, train_detector, with_reconstructions, AttackConfig, SvmConfig,
};
use idsynth::checkpoint::{load_checkpoint, save_checkpoint};
use idsynth::datasets::{
    generate_synthetic_dataset, sample_transformation_batch, sample_unlabeled, Phase, PoolRole, SyntheticSpec,
    UnlabeledPool,
};
use idsynth::eval::{evaluate, EvalSplit, Metrics, ProbeConfig};
use idsynth::losses::*;
use idsynth::networks::{build_networks, ArchitectureConfig, LatentCode, ModelState, Net, Part};
use idsynth::nn::AdamConfig;
use idsynth::synthesis::{latent_code, morph_attributes, recombine};
use idsynth::trainer::{apply_net_update, compute_step_gradients, train, train_step, TrainConfig, Trainer};
use idsynth::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Criteria that do not hold for this implementation, with the reason.
const KNOWN_FAILURES: &[(&str, &str)] = &[
    ("5b", "attribute means still separate identities at desk scale (see README)"),
    ("5c", "the KL model's attribute means leak more, not less, at desk scale (see README)"),
];

const SEEDS: [u64; 3] = [0, 1, 2];

struct Report {
    unexpected: Vec<String>,
}

impl Report {
    fn line(&mut self, id: &str, title: &str, pass: bool, detail: String) {
        let known = KNOWN_FAILURES.iter().find(|(k, _)| *k == id);
        let status = if pass { "PASS" } else { "FAIL" };
        match (pass, known) {
            (false, Some((_, why))) => println!("{status} [{id}] {title}: {detail} (known failure: {why})"),
            _ => println!("{status} [{id}] {title}: {detail}"),
        }
        if !pass && known.is_none() {
            self.unexpected.push(id.to_string());
        }
    }
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

fn loss_oracles() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..6);
        let k = rng.random_range(2..9);
        let logits = random_tensor(&mut rng, &[n, k], 5.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let v = classification_loss(&logits, &labels).unwrap().value;
        worst = worst.max((v - oracle_cross_entropy(&rows(&logits), &labels)).abs());
        let a = random_tensor(&mut rng, &[n, k], 2.0);
        let b = random_tensor(&mut rng, &[n, k], 2.0);
        let want = oracle_half_sq(&rows(&a), &rows(&b));
        worst = worst.max((reconstruction_loss(&a, &b).unwrap().value - want).abs());
        worst = worst.max((feature_matching_loss(&a, &b).unwrap().value - want).abs());
        let lv = random_tensor(&mut rng, &[n, k], 2.0);
        worst = worst.max((kl_loss(&a, &lv).unwrap().value - oracle_kl(&rows(&a), &rows(&lv))).abs());
        let pr: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let pf: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let v = discriminator_loss(
            &Tensor::from_vec(&[n, 1], pr.clone()).unwrap(),
            &Tensor::from_vec(&[n, 1], pf.clone()).unwrap(),
        )
        .unwrap()
        .value;
        worst = worst.max((v - oracle_discriminator(&pr, &pf)).abs());
    }
    (worst < 1e-6, format!("max abs deviation {worst:.2e} over 100 instances"))
}

fn gradient_suite() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst: f64 = 0.0;
    let all = |n: usize| (0..n).collect::<Vec<_>>();
    for _ in 0..100 {
        let n = rng.random_range(1..5);
        let k = rng.random_range(2..6);
        let t = |v: &[f64]| Tensor::from_vec(&[n, k], v.to_vec()).unwrap();
        let col = |v: &[f64]| Tensor::from_vec(&[n, 1], v.to_vec()).unwrap();
        let logits = random_tensor(&mut rng, &[n, k], 3.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let g = classification_loss(&logits, &labels).unwrap().grad;
        let num = numeric_grad(|v| classification_loss(&t(v), &labels).unwrap().value, logits.data(), &all(n * k));
        worst = worst.max(relative_error(g.data(), &num));
        let a = random_tensor(&mut rng, &[n, k], 2.0);
        let b = random_tensor(&mut rng, &[n, k], 2.0);
        let g = reconstruction_loss(&a, &b).unwrap().grad;
        let num = numeric_grad(|v| reconstruction_loss(&t(v), &b).unwrap().value, a.data(), &all(n * k));
        worst = worst.max(relative_error(g.data(), &num));
        let g = feature_matching_loss(&a, &b).unwrap().grad;
        let num = numeric_grad(|v| feature_matching_loss(&t(v), &b).unwrap().value, a.data(), &all(n * k));
        worst = worst.max(relative_error(g.data(), &num));
        let lv = random_tensor(&mut rng, &[n, k], 2.0);
        let kl = kl_loss(&a, &lv).unwrap();
        let num = numeric_grad(|v| kl_loss(&t(v), &lv).unwrap().value, a.data(), &all(n * k));
        worst = worst.max(relative_error(kl.grad_mu.data(), &num));
        let num = numeric_grad(|v| kl_loss(&a, &t(v)).unwrap().value, lv.data(), &all(n * k));
        worst = worst.max(relative_error(kl.grad_log_var.data(), &num));
        let pr: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let pf: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let d = discriminator_loss(&col(&pr), &col(&pf)).unwrap();
        let num = numeric_grad(|v| discriminator_loss(&col(v), &col(&pf)).unwrap().value, &pr, &all(n));
        worst = worst.max(relative_error(d.grad_real.data(), &num));
        let num = numeric_grad(|v| discriminator_loss(&col(&pr), &col(v)).unwrap().value, &pf, &all(n));
        worst = worst.max(relative_error(d.grad_fake.data(), &num));
    }
    let loss_worst = worst;

    let state: ModelState<f64> =
        build_networks(&mini_arch(), AdamConfig::default(), &mut ChaCha8Rng::seed_from_u64(103)).unwrap();
    let (mut checked, mut kinks) = (0, 0);
    let mut net_worst: f64 = 0.0;
    for net in Net::ALL {
        let parts: &[Part] = match net {
            Net::D => &[Part::DiscriminatorBody, Part::DiscriminatorHead],
            n => n.parts(),
        };
        let mut chain: Vec<_> = parts.iter().map(|&p| state.part(p).clone()).collect();
        let input = match net {
            Net::G => random_tensor(&mut rng, &[4, state.config.latent_width()], 1.0),
            _ => random_tensor(&mut rng, &state.config.image_shape(4), 1.0),
        };
        let c = check_chain(&mut rng, &mut chain, &input, 12);
        net_worst = net_worst.max(c.worst);
        checked += c.checked;
        kinks += c.kinks;
    }
    let pass = loss_worst < 1e-4 && net_worst < 1e-4 && kinks * 20 <= checked;
    (
        pass,
        format!(
            "losses {loss_worst:.1e}, networks {net_worst:.1e} ({kinks} of {checked} coordinates skipped on kinks)"
        ),
    )
}

fn snapshot(s: &ModelState<f64>, p: Part) -> Vec<u64> {
    let st = s.part(p);
    let mut v: Vec<u64> = st.param_slices().iter().flat_map(|(_, x)| x.iter().map(|f| f.to_bits())).collect();
    v.extend(st.buffer_slices().iter().flat_map(|(_, x)| x.iter().map(|f| f.to_bits())));
    v
}

fn schedule_fidelity() -> (bool, String) {
    let data = mini_dataset(104);
    let cfg = TrainConfig {
        total_steps: 10,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let mut t = Trainer::<f64>::new(&mini_arch(), cfg.clone()).unwrap();
    let mut schedule_ok = true;
    t.run(&data, None, |o, _| {
        let recon = o.step % 2 == 1;
        schedule_ok &= o.report.phase == if recon { Phase::Reconstruction } else { Phase::Transformation };
        schedule_ok &= o.report.lambda == if recon { 1.0 } else { 0.1 };
        schedule_ok &= Net::ALL.iter().all(|&n| o.updated.get(n));
        Ok(())
    })
    .unwrap();

    let state: ModelState<f64> =
        build_networks(&mini_arch(), AdamConfig::default(), &mut ChaCha8Rng::seed_from_u64(105)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let batch = sample_transformation_batch(&data, 4, &mut rng).unwrap();
    let work = compute_step_gradients(&state, &batch, &cfg, &mut rng).unwrap();
    let mut isolation_ok = true;
    for net in Net::ALL {
        let mut s = state.clone();
        apply_net_update(&mut s, &work, net);
        for p in Part::ALL {
            isolation_ok &= (snapshot(&s, p) != snapshot(&state, p)) == net.parts().contains(&p);
        }
    }

    let pool = UnlabeledPool::from_dataset(&mini_dataset(107));
    let batch = sample_unlabeled(&pool, 4, PoolRole::Subject, &data, &mut rng).unwrap();
    let mut s = state.clone();
    let out = train_step(&mut s, &batch, &cfg, &mut rng).unwrap();
    let frozen = [Part::Trunk, Part::IdentityHead, Part::ClassifierBody, Part::ClassifierHead];
    let freeze_ok = !out.updated.i
        && !out.updated.c
        && frozen.iter().all(|&p| snapshot(&s, p) == snapshot(&state, p))
        && [Part::Attribute, Part::Generator, Part::DiscriminatorBody]
            .iter()
            .all(|&p| snapshot(&s, p) != snapshot(&state, p));
    (
        schedule_ok && isolation_ok && freeze_ok,
        format!("schedule {schedule_ok}, isolation {isolation_ok}, unsupervised freeze {freeze_ok}"),
    )
}

fn reparameterization_statistics() -> (bool, String) {
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let mu = Tensor::<f64>::zeros(&[n, 1]);
    let lv = Tensor::from_vec(&[n, 1], vec![2.0 * 2f64.ln(); n]).unwrap();
    let r = Tensor::from_vec(&[n, 1], (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).unwrap();
    let z = reparameterize(&mu, &lv, &r, NoiseScale::default()).unwrap();
    let mean = z.data().iter().sum::<f64>() / n as f64;
    let std = (z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let mu2 = Tensor::from_vec(&[2, 2], vec![0.3, -1.2, 4.0, 0.0]).unwrap();
    let lv2 = Tensor::from_vec(&[2, 2], vec![1.0, -3.0, 0.5, 7.0]).unwrap();
    let exact = reparameterize(&mu2, &lv2, &Tensor::zeros(&[2, 2]), NoiseScale::default()).unwrap() == mu2;
    let within = (std - 2.0).abs() / 2.0 < 0.02;
    (within && exact, format!("empirical std {std:.4} (target 2.0 ± 2%), r = 0 returns μ: {exact}"))
}

struct Desk {
    split: EvalSplit,
    cache: Option<PathBuf>,
}

impl Desk {
    fn model(&self, variant: &str, seed: u64) -> (ModelState<f32>, f64) {
        let dir = self.cache.as_ref().map(|c| c.join(format!("{variant}-{seed}")));
        if let Some(d) = dir.as_ref().filter(|d| d.join("manifest.json").exists()) {
            eprintln!("{variant} seed {seed}: loaded from cache");
            return (load_checkpoint(d).unwrap(), 0.0);
        }
        let mut cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        match variant {
            "no_gc" => cfg.use_feature_matching_c = false,
            "no_gd" => cfg.use_feature_matching_d = false,
            "no_kl" => cfg.use_kl = false,
            _ => {}
        }
        let start = Instant::now();
        let (state, _) = train::<f32>(&ArchitectureConfig::default(), &cfg, &self.split.train, None).unwrap();
        if let Some(d) = dir {
            save_checkpoint(&state, &d).unwrap();
        }
        (state, secs(start))
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/")
}

fn main() -> ExitCode {
    let mut report = Report { unexpected: vec![] };
    let start = Instant::now();

    let t = Instant::now();
    let (ok, detail) = loss_oracles();
    report.line("1", "loss oracles", ok && secs(t) < 10.0, format!("{detail}, {:.1}s", secs(t)));

    let t = Instant::now();
    let (ok, detail) = gradient_suite();
    report.line("2", "gradient checks", ok && secs(t) < 120.0, format!("{detail}, {:.1}s", secs(t)));

    let t = Instant::now();
    let (ok, detail) = schedule_fidelity();
    report.line("3", "training schedule", ok && secs(t) < 60.0, format!("{detail}, {:.1}s", secs(t)));

    let t = Instant::now();
    let (ok, detail) = reparameterization_statistics();
    report.line("4", "reparameterization", ok && secs(t) < 5.0, format!("{detail}, {:.2}s", secs(t)));

    let data = generate_synthetic_dataset(&SyntheticSpec::default()).unwrap();
    let desk = Desk {
        split: EvalSplit::from_dataset(&data, 40).unwrap(),
        cache: std::env::var_os("IDSYNTH_ACCEPTANCE_CACHE").map(PathBuf::from),
    };
    let probe = ProbeConfig::default();
    let mut metrics: Vec<(&str, u64, Metrics, f64)> = vec![];
    let mut full0 = None;
    for &seed in &SEEDS {
        for variant in ["full", "no_kl", "no_gc", "no_gd"] {
            let (state, train_secs) = desk.model(variant, seed);
            let t = Instant::now();
            let m = evaluate(&state, &desk.split, &probe, seed).unwrap();
            eprintln!("{variant}\tseed {seed}\t{m}\ttrain {train_secs:.0}s");
            metrics.push((variant, seed, m, train_secs + secs(t)));
            if variant == "full" && seed == 0 {
                full0 = Some(state);
            }
        }
    }
    let pick = |variant: &str, f: fn(&Metrics) -> f64| -> Vec<f64> {
        metrics.iter().filter(|m| m.0 == variant).map(|m| f(&m.2)).collect()
    };
    let cost = |variants: &[&str]| -> f64 { metrics.iter().filter(|m| variants.contains(&m.0)).map(|m| m.3).sum() };

    let chance = metrics[0].2.probe_chance;
    let minutes = cost(&["full", "no_kl"]) / 60.0;
    let top1 = pick("full", |m| m.top1_generated);
    report.line(
        "5a",
        "generated-mode top-1",
        top1.iter().all(|&v| v >= 0.25) && minutes <= 60.0,
        format!("{} per seed (bar 0.25, chance {chance:.2})", fmt(&top1)),
    );
    let leak = pick("full", |m| m.probe_validation);
    report.line(
        "5b",
        "attribute leakage probe",
        leak.iter().all(|&v| v <= 0.10),
        format!("{} per seed (bar 0.10)", fmt(&leak)),
    );
    let leak_nokl = pick("no_kl", |m| m.probe_validation);
    report.line(
        "5c",
        "KL lowers leakage",
        mean(&leak) < mean(&leak_nokl),
        format!(
            "with KL {} (mean {:.3}), without {} (mean {:.3}); {minutes:.0} min for 5",
            fmt(&leak),
            mean(&leak),
            fmt(&leak_nokl),
            mean(&leak_nokl)
        ),
    );

    let gen_gc = pick("no_gc", |m| m.top1_generated);
    report.line(
        "6a",
        "removing L_GC lowers generated top-1",
        mean(&gen_gc) < mean(&top1),
        format!("full mean {:.3} ({}), no_gc mean {:.3} ({})", mean(&top1), fmt(&top1), mean(&gen_gc), fmt(&gen_gc)),
    );
    let e_full = pick("full", |m| m.reconstruction_energy);
    let e_gd = pick("no_gd", |m| m.reconstruction_energy);
    report.line(
        "6b",
        "removing L_GD blurs reconstructions",
        mean(&e_gd) < mean(&e_full),
        format!(
            "high-frequency energy full mean {:.4} ({}), no_gd mean {:.4} ({})",
            mean(&e_full),
            fmt(&e_full),
            mean(&e_gd),
            fmt(&e_gd)
        ),
    );

    let state = full0.unwrap();
    let t = Instant::now();
    let (ok, detail) = morph_exactness(&state, &desk.split);
    report.line("7", "morphing exactness", ok && secs(t) < 10.0, format!("{detail}, {:.2}s", secs(t)));

    let t = Instant::now();
    let adv = adversarial(&state, &desk.split);
    let minutes = secs(t) / 60.0;
    report.line(
        "8a",
        "attack success",
        adv.successes >= 90 && minutes <= 20.0,
        format!("{}/100 pairs below θ = {:.4}", adv.successes, adv.theta),
    );
    report.line(
        "8b",
        "detector held-out accuracy",
        adv.detection > 0.70 && minutes <= 20.0,
        format!("{:.3} on {} held-out images (bar 0.70)", adv.detection, adv.held_out),
    );
    report.line(
        "8c",
        "pre-satisfied pairs",
        adv.fast_path && minutes <= 20.0,
        format!("zero perturbation: {}; {minutes:.1} min for 8", adv.fast_path),
    );

    let t = Instant::now();
    let (ok, detail) = checkpoint_round_trip(&state);
    report.line("9", "checkpoint round trip", ok && secs(t) < 10.0, format!("{detail}, {:.2}s", secs(t)));

    println!("total {:.1} min", secs(start) / 60.0);
    if report.unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected failures: {}", report.unexpected.join(", "));
        ExitCode::FAILURE
    }
}

fn one(images: &[Vec<f32>], i: usize) -> Tensor<f32> {
    Tensor::from_vec(&[1, 3, 32, 32], images[i].clone()).unwrap()
}

fn morph_exactness(state: &ModelState<f32>, split: &EvalSplit) -> (bool, String) {
    let q = &split.queries.images;
    let (xs, a1, a2) = (one(q, 0), one(q, 20), one(q, 40));
    let m = morph_attributes(state, &xs, &a1, &a2, 7).unwrap();
    let ends = m.frames[0] == recombine(state, &xs, &a2, None).unwrap()
        && m.frames[6] == recombine(state, &xs, &a1, None).unwrap();
    let z1 = latent_code(state, &xs, &a1, None).unwrap().attribute();
    let z2 = latent_code(state, &xs, &a2, None).unwrap().attribute();
    let f_i = state.forward_identity(&xs).unwrap().0 .0;
    let mut affine = true;
    for (code, &alpha) in m.codes.iter().zip(&m.alphas) {
        let (a, b) = (alpha as f32, (1.0 - alpha) as f32);
        let want: Vec<f32> = z1.data().iter().zip(z2.data()).map(|(u, v)| a * u + b * v).collect();
        affine &= code.attribute().data() == want.as_slice() && code.identity() == f_i;
    }
    (ends && affine, format!("endpoints bit-identical {ends}, affine latents {affine}"))
}

struct Adversarial {
    theta: f64,
    successes: usize,
    detection: f64,
    held_out: usize,
    fast_path: bool,
}

fn adversarial(state: &ModelState<f32>, split: &EvalSplit) -> Adversarial {
    let q = &split.queries;
    let theta = calibrate_theta(state, &q.images, &q.labels, [3, 32, 32]).unwrap();
    let cfg = AttackConfig {
        theta,
        ..AttackConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let (mut genuine, mut adv) = (vec![], vec![]);
    for _ in 0..100 {
        let a = rng.random_range(0..q.len());
        let b = loop {
            let b = rng.random_range(0..q.len());
            if q.labels[b] != q.labels[a] {
                break b;
            }
        };
        let res = craft_adversarial(state, &one(&q.images, a), &one(&q.images, b), &cfg).unwrap();
        if res.success {
            adv.push(res.x_adv.data().to_vec());
            genuine.push(q.images[a].clone());
        }
    }
    let successes = adv.len();
    let g = with_reconstructions(state, &genuine).unwrap();
    let a = with_reconstructions(state, &adv).unwrap();
    let h = successes / 2;
    let det = train_detector(&g[..h], &a[..h], 3, 32, &SvmConfig::default()).unwrap();
    let mut correct = 0;
    for (set, positive) in [(&g[h..], false), (&a[h..], true)] {
        for (x, r) in set {
            if (det.svm.score(&pair_features(x, r, 3, 32).unwrap()) > 0.0) == positive {
                correct += 1;
            }
        }
    }
    let held_out = 2 * (successes - h);

    let same = q.indices_of(q.labels[0]);
    let mut fast_path = true;
    for &i in &same {
        let res = craft_adversarial(state, &one(&q.images, i), &one(&q.images, i), &cfg).unwrap();
        fast_path &= res.success && res.iterations == 0 && res.r.data().iter().all(|&v| v == 0.0);
    }
    Adversarial {
        theta,
        successes,
        detection: correct as f64 / held_out as f64,
        held_out,
        fast_path,
    }
}

fn checkpoint_round_trip(state: &ModelState<f32>) -> (bool, String) {
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(state, dir.path()).unwrap();
    let loaded: ModelState<f32> = load_checkpoint(dir.path()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let (di, da) = (state.config.identity_dim, state.config.attribute_dim);
    let mut identical = 0;
    for _ in 0..10 {
        let f = Tensor::from_vec(&[1, di], (0..di).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
        let z = Tensor::from_vec(&[1, da], (0..da).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()).unwrap();
        let code = LatentCode::new(&f, &z).unwrap();
        let (a, b) = (state.generate(&code).unwrap(), loaded.generate(&code).unwrap());
        if a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()) {
            identical += 1;
        }
    }
    (identical == 10, format!("{identical}/10 latent codes bit-identical"))
}
