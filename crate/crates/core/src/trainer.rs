//! Two-process training: odd iterations reconstruct (`x^a = x^s`, weight 1),
//! even iterations transform (`x^a ≠ x^s`, weight λ). Each network is updated
//! only from its own loss terms:
//!
//! | net | objective                                   |
//! |-----|---------------------------------------------|
//! | I   | `L_I`                                       |
//! | C   | `L_C`                                       |
//! | D   | `L_D`                                       |
//! | G   | `λ·L_GR + L_GD + L_GC`                      |
//! | A   | `λ·L_KL + λ·L_G` (or unscaled)              |
//!
//! The generator never sees D's probability output, only the features `f_D`.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::datasets::{
    sample_reconstruction_batch, sample_transformation_batch, sample_unlabeled, Batch, LabeledDataset, Phase,
    PoolRole, UnlabeledPool,
};
use crate::error::{Error, Result};
use crate::losses::{
    classification_loss, discriminator_loss, feature_matching_loss, kl_loss, reconstruction_loss, reparameterize,
    NoiseScale,
};
use crate::networks::{build_networks, split_attribute, ArchitectureConfig, ModelState, Net};
use crate::nn::{AdamConfig, Grads, Mode, Tape};
use crate::tensor::{Scalar, Tensor};

/// How the attribute encoder's objective is weighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeObjective {
    /// `λ·L_KL + λ·L_G`.
    #[default]
    Scaled,
    /// `L_KL + L_G`.
    Unscaled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerNetOptimizer {
    pub identity: AdamConfig,
    pub attribute: AdamConfig,
    pub generator: AdamConfig,
    pub classifier: AdamConfig,
    pub discriminator: AdamConfig,
}

impl Default for PerNetOptimizer {
    fn default() -> Self {
        let a = AdamConfig::default();
        PerNetOptimizer {
            identity: a,
            attribute: a,
            generator: a,
            classifier: a,
            discriminator: a,
        }
    }
}

impl PerNetOptimizer {
    pub fn get(&self, net: Net) -> AdamConfig {
        match net {
            Net::I => self.identity,
            Net::A => self.attribute,
            Net::G => self.generator,
            Net::C => self.classifier,
            Net::D => self.discriminator,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    /// Reconstruction weight on transformation steps.
    pub lambda: f64,
    pub optimizer: PerNetOptimizer,
    /// Fraction of transformation steps that draw from the unlabeled pool.
    pub unsupervised_ratio: f64,
    /// Save a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
    pub seed: u64,
    pub noise_scale: NoiseScale,
    pub attribute_objective: AttributeObjective,
    /// Ablation switches.
    pub use_feature_matching_d: bool,
    pub use_feature_matching_c: bool,
    pub use_kl: bool,
    pub use_transformation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 5000,
            batch_size: 16,
            lambda: 0.1,
            optimizer: PerNetOptimizer::default(),
            unsupervised_ratio: 0.0,
            checkpoint_every: 0,
            seed: 0,
            noise_scale: NoiseScale::HalfExp,
            attribute_objective: AttributeObjective::Scaled,
            use_feature_matching_d: true,
            use_feature_matching_c: true,
            use_kl: true,
            use_transformation: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::config(format!("lambda {} outside (0, 1]", self.lambda)));
        }
        if self.total_steps < 1 {
            return Err(Error::config("total_steps must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.unsupervised_ratio) {
            return Err(Error::config(format!(
                "unsupervised_ratio {} outside [0, 1]",
                self.unsupervised_ratio
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2 for batch statistics"));
        }
        for n in Net::ALL {
            let o = self.optimizer.get(n);
            if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
                return Err(Error::config(format!("invalid optimizer settings for {n:?}")));
            }
        }
        Ok(())
    }
}

/// Value of every loss term of one step; `None` for terms not computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub phase: Phase,
    pub lambda: f64,
    pub l_i: Option<f64>,
    pub l_c: Option<f64>,
    pub l_d: Option<f64>,
    pub l_kl: Option<f64>,
    pub l_gr: Option<f64>,
    pub l_gd: Option<f64>,
    pub l_gc: Option<f64>,
}

impl LossReport {
    /// Header matching [`LossReport`]'s `Display` columns.
    pub const HEADER: &'static str = "step\tphase\tL_I\tL_C\tL_D\tL_KL\tL_GR\tL_GD\tL_GC";
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}", self.step, self.phase.as_str())?;
        for v in [self.l_i, self.l_c, self.l_d, self.l_kl, self.l_gr, self.l_gd, self.l_gc] {
            match v {
                Some(v) => write!(f, "\t{v:.6}")?,
                None => write!(f, "\t-")?,
            }
        }
        Ok(())
    }
}

/// Which networks received a parameter update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateFlags {
    pub i: bool,
    pub a: bool,
    pub g: bool,
    pub c: bool,
    pub d: bool,
}

impl UpdateFlags {
    pub fn get(&self, net: Net) -> bool {
        match net {
            Net::I => self.i,
            Net::A => self.a,
            Net::G => self.g,
            Net::C => self.c,
            Net::D => self.d,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub report: LossReport,
    pub updated: UpdateFlags,
    pub step: u64,
}

/// Gradients of one step, before any parameter changes.
pub struct StepGradients<T> {
    pub report: LossReport,
    /// Per network, gradients for each of its parts in [`Net::parts`] order.
    pub grads: Vec<(Net, Vec<Grads<T>>)>,
    stats: Vec<(crate::networks::Part, Tape<T>)>,
}

impl<T: Scalar> StepGradients<T> {
    pub fn flags(&self) -> UpdateFlags {
        let has = |n| self.grads.iter().any(|(m, _)| *m == n);
        UpdateFlags {
            i: has(Net::I),
            a: has(Net::A),
            g: has(Net::G),
            c: has(Net::C),
            d: has(Net::D),
        }
    }

    pub fn for_net(&self, net: Net) -> Option<&[Grads<T>]> {
        self.grads.iter().find(|(n, _)| *n == net).map(|(_, g)| g.as_slice())
    }
}

fn finite(term: &'static str, v: f64, step: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { term, step })
    }
}

/// Reconstruction weight for a phase.
pub fn phase_lambda(phase: Phase, config: &TrainConfig) -> f64 {
    match phase {
        Phase::Reconstruction => 1.0,
        Phase::Transformation | Phase::Unsupervised => config.lambda,
    }
}

/// Compute all loss terms of one step and the gradient each network would
/// apply. Parameters are not modified. `noise_rng` supplies the
/// reparameterization draws.
pub fn compute_step_gradients<T: Scalar, R: Rng + ?Sized>(
    state: &ModelState<T>,
    batch: &Batch,
    config: &TrainConfig,
    noise_rng: &mut R,
) -> Result<StepGradients<T>> {
    use crate::networks::Part;

    batch.validate()?;
    let step = state.step + 1;
    let xs: Tensor<T> = batch.subject.cast();
    let xa: Tensor<T> = batch.attribute.cast();
    state.check_images(&xs)?;
    state.check_images(&xa)?;
    let n = xs.rows();
    let lam = phase_lambda(batch.phase, config);
    let lam_t = T::from_f64c(lam);
    let d_i = state.config.identity_dim;
    let d_a = state.config.attribute_dim;

    let mut report = LossReport {
        step,
        phase: batch.phase,
        lambda: lam,
        l_i: None,
        l_c: None,
        l_d: None,
        l_kl: None,
        l_gr: None,
        l_gd: None,
        l_gc: None,
    };
    let mut grads = vec![];
    let mut stats = vec![];

    // I and C on the subject; frozen (no update, no stat tracking) without labels.
    let (f_i, trunk_tape) = state.trunk.forward(xs.clone(), Mode::Train);
    let (f_c_subject, body_tape) = state.classifier_body.forward(f_i.clone(), Mode::Train);
    if let Some(labels) = &batch.labels {
        let (logits_i, ih_tape) = state.identity_head.forward(f_i.clone(), Mode::Train);
        let li = classification_loss(&logits_i, labels)?;
        report.l_i = Some(finite("L_I", li.value.as_f64(), step)?);
        let mut g_head = state.identity_head.zero_grads();
        let d_fi = state
            .identity_head
            .backward(&ih_tape, li.grad, Some(&mut g_head), true)
            .expect("input grad");
        let mut g_trunk = state.trunk.zero_grads();
        state.trunk.backward(&trunk_tape, d_fi, Some(&mut g_trunk), false);
        grads.push((Net::I, vec![g_trunk, g_head]));

        let (logits_c, ch_tape) = state.classifier_head.forward(f_c_subject.clone(), Mode::Train);
        let lc = classification_loss(&logits_c, labels)?;
        report.l_c = Some(finite("L_C", lc.value.as_f64(), step)?);
        let mut g_head = state.classifier_head.zero_grads();
        let d_fc = state
            .classifier_head
            .backward(&ch_tape, lc.grad, Some(&mut g_head), true)
            .expect("input grad");
        let mut g_body = state.classifier_body.zero_grads();
        let d_fi = state
            .classifier_body
            .backward(&body_tape, d_fc, Some(&mut g_body), true)
            .expect("input grad");
        let mut g_trunk = state.trunk.zero_grads();
        state.trunk.backward(&trunk_tape, d_fi, Some(&mut g_trunk), false);
        grads.push((Net::C, vec![g_trunk, g_body, g_head]));
        stats.push((Part::Trunk, trunk_tape));
    }

    // A on the attribute image, KL, and the sampled attribute vector.
    let (a_out, a_tape) = state.attribute.forward(xa.clone(), Mode::Train);
    let dist = split_attribute(&a_out, d_a);
    let kl = kl_loss(&dist.mu, &dist.log_var)?;
    report.l_kl = Some(finite("L_KL", kl.value.as_f64(), step)?);
    let r_data: Vec<T> = (0..n * d_a)
        .map(|_| T::from_f64c(noise_rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let r = Tensor::from_vec(&[n, d_a], r_data)?;
    let z = reparameterize(&dist.mu, &dist.log_var, &r, config.noise_scale)?;

    // G on [f_I ; z]; f_I is a constant input for G and A.
    let code = Tensor::concat_cols(&f_i, &z)?;
    let (x_out, g_tape) = state.generator.forward(code, Mode::Train);

    // D on real attribute images and on the (detached) generated images.
    let (fd_real, dbr_tape) = state.discriminator_body.forward(xa.clone(), Mode::Train);
    let (p_real, dhr_tape) = state.discriminator_head.forward(fd_real.clone(), Mode::Train);
    let (fd_fake, dbf_tape) = state.discriminator_body.forward(x_out.clone(), Mode::Train);
    let (p_fake, dhf_tape) = state.discriminator_head.forward(fd_fake.clone(), Mode::Train);
    let ld = discriminator_loss(&p_real, &p_fake)?;
    report.l_d = Some(finite("L_D", ld.value.as_f64(), step)?);
    {
        let mut g_body = state.discriminator_body.zero_grads();
        let mut g_head = state.discriminator_head.zero_grads();
        for (tb, th, g) in [(&dbr_tape, &dhr_tape, ld.grad_real), (&dbf_tape, &dhf_tape, ld.grad_fake)] {
            let d_f = state
                .discriminator_head
                .backward(th, g, Some(&mut g_head), true)
                .expect("input grad");
            state.discriminator_body.backward(tb, d_f, Some(&mut g_body), false);
        }
        grads.push((Net::D, vec![g_body, g_head]));
    }

    // Generator objective, as a gradient w.r.t. x'.
    let lgr = reconstruction_loss(&x_out, &xa)?;
    report.l_gr = Some(finite("L_GR", lgr.value.as_f64(), step)?);
    let mut d_x = lgr.grad;
    d_x.scale(lam_t);
    if config.use_feature_matching_d {
        let lgd = feature_matching_loss(&fd_fake, &fd_real)?;
        report.l_gd = Some(finite("L_GD", lgd.value.as_f64(), step)?);
        let d = state
            .discriminator_body
            .backward(&dbf_tape, lgd.grad, None, true)
            .expect("input grad");
        d_x.add_assign(&d);
    }
    if config.use_feature_matching_c {
        let (fc_fake, tapes) = state.classifier_features(&x_out, Mode::Train);
        let lgc = feature_matching_loss(&fc_fake, &f_c_subject)?;
        report.l_gc = Some(finite("L_GC", lgc.value.as_f64(), step)?);
        d_x.add_assign(&state.classifier_features_input_grad(&tapes, lgc.grad));
    }
    let mut g_gen = state.generator.zero_grads();
    let d_code = state
        .generator
        .backward(&g_tape, d_x, Some(&mut g_gen), true)
        .expect("input grad");
    grads.push((Net::G, vec![g_gen]));

    // A: KL plus the generator objective routed through z.
    let d_z = d_code.split_cols(d_i).1;
    let scale = match config.attribute_objective {
        AttributeObjective::Scaled => lam_t,
        AttributeObjective::Unscaled => T::one(),
    };
    let kl_on = if config.use_kl { T::one() } else { T::zero() };
    let mut d_mu = Tensor::zeros(&[n, d_a]);
    let mut d_lv = Tensor::zeros(&[n, d_a]);
    for j in 0..n * d_a {
        let dz = d_z.data()[j];
        let lv = dist.log_var.data()[j];
        d_mu.data_mut()[j] = scale * (kl_on * kl.grad_mu.data()[j] + dz);
        d_lv.data_mut()[j] =
            scale * (kl_on * kl.grad_log_var.data()[j] + dz * config.noise_scale.dz_dlog_var(lv, r.data()[j]));
    }
    let d_a_out = Tensor::concat_cols(&d_mu, &d_lv)?;
    let mut g_attr = state.attribute.zero_grads();
    state.attribute.backward(&a_tape, d_a_out, Some(&mut g_attr), false);
    grads.push((Net::A, vec![g_attr]));

    stats.push((Part::Attribute, a_tape));
    stats.push((Part::Generator, g_tape));
    stats.push((Part::DiscriminatorBody, dbr_tape));
    stats.push((Part::DiscriminatorBody, dbf_tape));

    // Alg. order of the update lines: I, C, D, G, A.
    let order = [Net::I, Net::C, Net::D, Net::G, Net::A];
    grads.sort_by_key(|(n, _)| order.iter().position(|m| m == n));
    Ok(StepGradients { report, grads, stats })
}

/// Apply the optimizer step of a single network from precomputed gradients.
pub fn apply_net_update<T: Scalar>(state: &mut ModelState<T>, work: &StepGradients<T>, net: Net) {
    if let Some(g) = work.for_net(net) {
        state.apply_update(net, g);
    }
}

/// One full training step on a prepared batch.
pub fn train_step<T: Scalar, R: Rng + ?Sized>(
    state: &mut ModelState<T>,
    batch: &Batch,
    config: &TrainConfig,
    noise_rng: &mut R,
) -> Result<StepOutcome> {
    let work = compute_step_gradients(state, batch, config, noise_rng)?;
    for (net, g) in &work.grads {
        state.apply_update(*net, g);
    }
    for (part, tape) in &work.stats {
        state.part_mut(*part).absorb_stats(tape);
    }
    state.step += 1;
    Ok(StepOutcome {
        updated: work.flags(),
        step: state.step,
        report: work.report,
    })
}

/// Owns the model and the sampling stream for a run. Initialization uses
/// stream 0 of the seeded generator and step `k` uses stream `k`, so a resumed
/// run continues exactly where an uninterrupted one would.
pub struct Trainer<T> {
    pub state: ModelState<T>,
    pub config: TrainConfig,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh networks; all randomness derives from `config.seed`.
    pub fn new(arch: &ArchitectureConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        let mut state = build_networks(arch, AdamConfig::default(), &mut init)?;
        for n in Net::ALL {
            state.optimizers.get_mut(n).config = config.optimizer.get(n);
        }
        let rng = step_stream(config.seed, state.step + 1);
        Ok(Trainer { state, config, rng })
    }

    /// Continue from an existing state.
    pub fn resume(state: ModelState<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let rng = step_stream(config.seed, state.step + 1);
        Ok(Trainer { state, config, rng })
    }

    /// Phase scheduled for the next step, before unlabeled substitution.
    pub fn scheduled_phase(&self) -> Phase {
        scheduled_phase(self.state.step + 1, &self.config)
    }

    pub fn next_batch(&mut self, labeled: &LabeledDataset, unlabeled: Option<&UnlabeledPool>) -> Result<Batch> {
        let n = self.config.batch_size;
        match self.scheduled_phase() {
            Phase::Reconstruction => sample_reconstruction_batch(labeled, n, &mut self.rng),
            _ => {
                if let Some(pool) = unlabeled.filter(|p| !p.is_empty()) {
                    if self.config.unsupervised_ratio > 0.0 && self.rng.random::<f64>() < self.config.unsupervised_ratio {
                        let role = if self.rng.random::<bool>() {
                            PoolRole::Subject
                        } else {
                            PoolRole::Attribute
                        };
                        return sample_unlabeled(pool, n, role, labeled, &mut self.rng);
                    }
                }
                sample_transformation_batch(labeled, n, &mut self.rng)
            }
        }
    }

    pub fn step(&mut self, labeled: &LabeledDataset, unlabeled: Option<&UnlabeledPool>) -> Result<StepOutcome> {
        self.rng = step_stream(self.config.seed, self.state.step + 1);
        let batch = self.next_batch(labeled, unlabeled)?;
        train_step(&mut self.state, &batch, &self.config, &mut self.rng)
    }

    /// Run until `total_steps` steps have been completed, calling `on_step`
    /// after each one.
    pub fn run(
        &mut self,
        labeled: &LabeledDataset,
        unlabeled: Option<&UnlabeledPool>,
        mut on_step: impl FnMut(&StepOutcome, &ModelState<T>) -> Result<()>,
    ) -> Result<()> {
        if labeled.shape.size != self.state.config.image_size || labeled.shape.channels != self.state.config.channels {
            return Err(Error::config("dataset image shape differs from the architecture"));
        }
        if labeled.num_identities > self.state.config.num_identities {
            return Err(Error::config(format!(
                "dataset has {} identities but the classifier has {} outputs",
                labeled.num_identities, self.state.config.num_identities
            )));
        }
        while self.state.step < self.config.total_steps {
            let out = self.step(labeled, unlabeled)?;
            log::debug!("{}", out.report);
            on_step(&out, &self.state)?;
        }
        Ok(())
    }
}

fn step_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Odd iterations reconstruct, even ones transform (unless disabled).
pub fn scheduled_phase(iteration: u64, config: &TrainConfig) -> Phase {
    if iteration % 2 == 1 || !config.use_transformation {
        Phase::Reconstruction
    } else {
        Phase::Transformation
    }
}

/// Train from scratch and return the final state plus every step's report.
pub fn train<T: Scalar>(
    arch: &ArchitectureConfig,
    config: &TrainConfig,
    labeled: &LabeledDataset,
    unlabeled: Option<&UnlabeledPool>,
) -> Result<(ModelState<T>, Vec<LossReport>)> {
    let mut t = Trainer::new(arch, config.clone())?;
    let mut reports = Vec::with_capacity(config.total_steps as usize);
    t.run(labeled, unlabeled, |o, _| {
        reports.push(o.report.clone());
        Ok(())
    })?;
    Ok((t.state, reports))
}

/// Writes the per-step log and periodic checkpoints of a run into a directory.
pub struct RunRecorder {
    dir: PathBuf,
    every: u64,
    total: u64,
    log: BufWriter<File>,
}

impl RunRecorder {
    pub fn create(dir: impl Into<PathBuf>, config: &TrainConfig) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let mut log = BufWriter::new(File::create(dir.join("train.log"))?);
        writeln!(log, "{}", LossReport::HEADER)?;
        Ok(RunRecorder {
            dir,
            every: config.checkpoint_every,
            total: config.total_steps,
            log,
        })
    }

    /// Reopen a run directory, appending to its log.
    pub fn reopen(dir: impl Into<PathBuf>, config: &TrainConfig) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let path = dir.join("train.log");
        let fresh = !path.exists();
        let mut log = BufWriter::new(fs::OpenOptions::new().create(true).append(true).open(path)?);
        if fresh {
            writeln!(log, "{}", LossReport::HEADER)?;
        }
        Ok(RunRecorder {
            dir,
            every: config.checkpoint_every,
            total: config.total_steps,
            log,
        })
    }

    pub fn record<T: Scalar>(&mut self, out: &StepOutcome, state: &ModelState<T>) -> Result<()> {
        writeln!(self.log, "{}", out.report)?;
        let periodic = self.every > 0 && out.step % self.every == 0;
        if periodic || out.step == self.total {
            self.log.flush()?;
            checkpoint::save_checkpoint(state, &self.dir.join("checkpoint"))?;
            if periodic && out.step != self.total {
                checkpoint::save_checkpoint(state, &self.dir.join(format!("checkpoint-{:06}", out.step)))?;
            }
        }
        Ok(())
    }
}
