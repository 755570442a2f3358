mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use idsynth::adversarial::{
    calibrate_theta, craft_adversarial, detect, train_detector, with_reconstructions, AttackConfig, DetectorModel,
    SvmConfig,
};
use idsynth::checkpoint::{load_checkpoint, save_checkpoint};
use idsynth::eval::{
    attribute_leakage_probe, run_ablation, top1_identification, AblationRow, MatchMode, ProbeConfig, ProbeFeature,
};
use idsynth::image_io::{load_png, save_mosaic, save_png, to_byte, to_unit};
use idsynth::networks::ModelState;
use idsynth::synthesis::{morph_attributes, recombine};
use idsynth::trainer::{RunRecorder, Trainer};
use idsynth::{Error, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "idsynth", version, about = "Identity/attribute disentangled image synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train all five networks from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Recombine the identity of one image with the attributes of another.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        subject: PathBuf,
        #[arg(long)]
        attribute: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sample the attribute code instead of using its mean.
        #[arg(long)]
        sample: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Interpolate between two attribute codes under a fixed identity.
    Morph {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        subject: PathBuf,
        #[arg(long)]
        attr1: PathBuf,
        #[arg(long)]
        attr2: PathBuf,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Perturb a source image until its classifier features match a target's.
    Attack {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        theta: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the median same-identity feature distance of the held-out images.
    Calibrate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Fit the reconstruction-discrepancy detector on two image lists.
    TrainDetector {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        genuine: PathBuf,
        #[arg(long)]
        adversarial: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score each listed image with a trained detector.
    Detect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        inputs: PathBuf,
    },
    /// Run an evaluation protocol and print a TSV report.
    Eval {
        /// Required for top1 and probe; ablation trains its own models.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, value_enum)]
        protocol: Protocol,
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    Top1,
    Probe,
    Ablation,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, resume } => train(&config, resume.as_deref()),
        Command::Generate {
            ckpt,
            subject,
            attribute,
            out,
            sample,
            seed,
        } => {
            let state = load(&ckpt)?;
            let xs = read_image(&state, &subject)?;
            let xa = read_image(&state, &attribute)?;
            let y = if sample {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                recombine(&state, &xs, &xa, Some(&mut rng))?
            } else {
                recombine(&state, &xs, &xa, None)?
            };
            write_image(&state, &out, y.data())
        }
        Command::Morph {
            ckpt,
            subject,
            attr1,
            attr2,
            steps,
            out,
        } => {
            if steps < 2 {
                return Err(Error::validation(format!("--steps must be at least 2, got {steps}")));
            }
            let state = load(&ckpt)?;
            let m = morph_attributes(
                &state,
                &read_image(&state, &subject)?,
                &read_image(&state, &attr1)?,
                &read_image(&state, &attr2)?,
                steps,
            )?;
            fs::create_dir_all(&out)?;
            let mut index = String::from("frame\talpha\n");
            for (i, (frame, alpha)) in m.frames.iter().zip(&m.alphas).enumerate() {
                let name = format!("frame_{i:03}.png");
                write_image(&state, &out.join(&name), frame.data())?;
                index.push_str(&format!("{name}\t{alpha}\n"));
            }
            fs::write(out.join("alphas.tsv"), index)?;
            let strip = vec![m.frames.iter().map(|f| f.data().to_vec()).collect()];
            save_mosaic(&out.join("strip.png"), &strip, state.config.channels, state.config.image_size)
        }
        Command::Attack {
            ckpt,
            source,
            target,
            theta,
            out,
        } => attack(&ckpt, &source, &target, theta, &out),
        Command::Calibrate { ckpt, config } => {
            let state = load(&ckpt)?;
            let split = RunConfig::load(&config)?.eval_split()?;
            check_compatible(&state, split.queries.shape.size, split.queries.num_identities)?;
            let c = &state.config;
            let theta = calibrate_theta(
                &state,
                &split.queries.images,
                &split.queries.labels,
                [c.channels, c.image_size, c.image_size],
            )?;
            println!("{theta}");
            Ok(())
        }
        Command::TrainDetector {
            ckpt,
            genuine,
            adversarial,
            out,
        } => {
            let state = load(&ckpt)?;
            let g = with_reconstructions(&state, &read_list(&state, &genuine)?.1)?;
            let a = with_reconstructions(&state, &read_list(&state, &adversarial)?.1)?;
            let model = train_detector(&g, &a, state.config.channels, state.config.image_size, &SvmConfig::default())?;
            log::info!("detector training accuracy {:.4}", model.svm.training_accuracy);
            fs::write(&out, serde_json::to_string_pretty(&model)?)?;
            Ok(())
        }
        Command::Detect { ckpt, detector, inputs } => {
            let state = load(&ckpt)?;
            let text = fs::read_to_string(&detector).map_err(|e| Error::load(&detector, e.to_string()))?;
            let model: DetectorModel = serde_json::from_str(&text)?;
            let (names, images) = read_list(&state, &inputs)?;
            println!("path\tscore\tlabel");
            for (name, img) in names.iter().zip(&images) {
                let (score, verdict) = detect(&model, &state, img)?;
                println!("{name}\t{score:.6}\t{}", verdict.as_str());
            }
            Ok(())
        }
        Command::Eval { ckpt, protocol, config } => eval(ckpt.as_deref(), protocol, &config),
    }
}

fn train(config_path: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let labeled = cfg.training_set()?;
    let pool = cfg.unlabeled_pool()?;
    let arch = cfg.architecture(labeled.num_identities);
    let tc = cfg.train_config();
    let (mut trainer, mut recorder) = match resume {
        Some(ckpt) => {
            let state = load(ckpt)?;
            if state.config != arch {
                return Err(Error::config("checkpoint architecture differs from the config"));
            }
            (Trainer::resume(state, tc.clone())?, RunRecorder::reopen(&cfg.out_dir, &tc)?)
        }
        None => (Trainer::new(&arch, tc.clone())?, RunRecorder::create(&cfg.out_dir, &tc)?),
    };
    fs::write(cfg.out_dir.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let every = (tc.total_steps / 20).max(1);
    let start = trainer.state.step;
    trainer.run(&labeled, pool.as_ref(), |out, state| {
        if out.step % every == 0 {
            log::info!("{}", out.report);
        }
        recorder.record(out, state)
    })?;
    if start == tc.total_steps {
        // The checkpoint was already complete, so nothing was recorded.
        save_checkpoint(&trainer.state, &cfg.out_dir.join("checkpoint"))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct AttackRecord {
    success: bool,
    theta: f64,
    distance: f64,
    /// Distance after rounding the image to 8-bit pixels.
    distance_quantized: f64,
    r_norm_sq: f64,
    iterations: usize,
}

fn attack(ckpt: &Path, source: &Path, target: &Path, theta: f64, out: &Path) -> Result<()> {
    let state = load(ckpt)?;
    let x1 = read_image(&state, source)?;
    let x2 = read_image(&state, target)?;
    let cfg = AttackConfig {
        theta,
        ..AttackConfig::default()
    };
    let res = craft_adversarial(&state, &x1, &x2, &cfg)?;
    let quantized: Vec<f32> = res.x_adv.data().iter().map(|&v| to_unit(to_byte(v))).collect();
    let q = Tensor::from_vec(x1.shape(), quantized)?;
    let fq = state.classify(&q)?.1;
    let f2 = state.classify(&x2)?.1;
    let distance_quantized = fq.data().iter().zip(f2.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
    fs::create_dir_all(out)?;
    write_image(&state, &out.join("adversarial.png"), res.x_adv.data())?;
    let record = AttackRecord {
        success: res.success,
        theta,
        distance: res.distance,
        distance_quantized,
        r_norm_sq: res.r_norm_sq,
        iterations: res.iterations,
    };
    fs::write(out.join("attack.json"), serde_json::to_string_pretty(&record)?)?;
    Ok(())
}

fn eval(ckpt: Option<&Path>, protocol: Protocol, config: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let split = cfg.eval_split()?;
    let load_checked = || -> Result<ModelState<f32>> {
        let ckpt = ckpt.ok_or_else(|| Error::validation("--ckpt is required for this protocol"))?;
        let state = load(ckpt)?;
        check_compatible(&state, split.train.shape.size, split.train.num_identities)?;
        Ok(state)
    };
    match protocol {
        Protocol::Top1 => {
            let state = load_checked()?;
            println!("mode\ttop1");
            for (name, mode) in [("raw", MatchMode::Raw), ("generated", MatchMode::Generated)] {
                let acc = top1_identification(
                    &state,
                    &split.gallery,
                    &split.queries,
                    mode,
                    Some(&split.attribute_pool),
                    cfg.eval_seed,
                )?;
                println!("{name}\t{acc:.4}");
            }
        }
        Protocol::Probe => {
            let state = load_checked()?;
            println!("feature\ttrain_accuracy\tvalidation_accuracy\tchance");
            for (name, feature) in [
                ("attribute_mean", ProbeFeature::AttributeMean),
                ("identity_vector", ProbeFeature::IdentityVector),
            ] {
                let probe = ProbeConfig { feature, ..cfg.probe() };
                let r = attribute_leakage_probe(&state, &split.train, 0.8, &probe)?;
                println!(
                    "{name}\t{:.4}\t{:.4}\t{:.4}",
                    r.train_accuracy, r.validation_accuracy, r.chance
                );
            }
        }
        Protocol::Ablation => {
            let pool = cfg.unlabeled_pool()?;
            let arch = cfg.architecture(split.train.num_identities);
            println!("{}", AblationRow::header());
            run_ablation(
                &arch,
                &cfg.train_config(),
                &split,
                pool.as_ref(),
                &cfg.ablation_seeds,
                &cfg.probe(),
                |row| println!("{row}"),
            )?;
        }
    }
    Ok(())
}

fn load(ckpt: &Path) -> Result<ModelState<f32>> {
    load_checkpoint(ckpt)
}

fn check_compatible(state: &ModelState<f32>, image_size: usize, identities: usize) -> Result<()> {
    if state.config.image_size != image_size || state.config.num_identities != identities {
        return Err(Error::config(format!(
            "checkpoint expects {}px images and {} identities; config gives {image_size}px and {identities}",
            state.config.image_size, state.config.num_identities
        )));
    }
    Ok(())
}

fn read_image(state: &ModelState<f32>, path: &Path) -> Result<Tensor<f32>> {
    let c = &state.config;
    Tensor::from_vec(&c.image_shape(1), load_png(path, c.image_size)?)
}

fn write_image(state: &ModelState<f32>, path: &Path, data: &[f32]) -> Result<()> {
    save_png(path, data, state.config.channels, state.config.image_size)
}

/// Entries of a one-path-per-line list (relative to the list's directory)
/// and the decoded images.
fn read_list(state: &ModelState<f32>, list: &Path) -> Result<(Vec<String>, Vec<Vec<f32>>)> {
    let text = fs::read_to_string(list).map_err(|e| Error::load(list, e.to_string()))?;
    let root = list.parent().unwrap_or(Path::new(""));
    let mut names = vec![];
    let mut images = vec![];
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        images.push(load_png(&root.join(line), state.config.image_size)?);
        names.push(line.to_string());
    }
    if names.is_empty() {
        return Err(Error::validation(format!("{} lists no images", list.display())));
    }
    Ok((names, images))
}
