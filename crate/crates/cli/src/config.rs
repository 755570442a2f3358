//! Flat JSON run configuration shared by `train` and `eval`.

use std::fs;
use std::path::{Path, PathBuf};

use idsynth::datasets::{
    generate_synthetic_dataset, load_image_dataset, load_unlabeled_pool, LabeledDataset, SyntheticSpec, UnlabeledPool,
};
use idsynth::eval::{EvalSplit, ProbeConfig};
use idsynth::losses::NoiseScale;
use idsynth::networks::{ArchitectureConfig, DiscriminatorSpec, EncoderSpec, GeneratorSpec};
use idsynth::nn::AdamConfig;
use idsynth::trainer::{AttributeObjective, PerNetOptimizer, TrainConfig};
use idsynth::{Error, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    /// Where `train` writes its log and checkpoints.
    pub out_dir: PathBuf,

    /// `path<TAB>identity` manifest of PNGs. Synthetic data is generated when absent.
    pub data_manifest: Option<PathBuf>,
    /// Root for manifest paths; defaults to the manifest's directory.
    pub data_root: Option<PathBuf>,
    /// One PNG path per line, relative to its own directory.
    pub unlabeled_list: Option<PathBuf>,
    pub synthetic_identities: usize,
    pub synthetic_images_per_identity: usize,
    pub synthetic_seed: u64,
    /// Extra synthetic identities whose images form an unlabeled pool.
    pub synthetic_unlabeled_identities: usize,
    pub image_size: usize,
    /// Images per identity used for training; the rest are held out for evaluation.
    pub train_per_identity: usize,

    pub identity_dim: usize,
    pub attribute_dim: usize,
    pub classifier_hidden: usize,
    pub encoder_stages: Vec<usize>,
    pub generator_base_channels: usize,
    pub generator_stages: Vec<usize>,
    pub discriminator_stages: Vec<usize>,

    pub total_steps: u64,
    pub batch_size: usize,
    pub lambda: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub unsupervised_ratio: f64,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub noise_scale: NoiseScale,
    pub attribute_objective: AttributeObjective,
    pub use_feature_matching_d: bool,
    pub use_feature_matching_c: bool,
    pub use_kl: bool,
    pub use_transformation: bool,

    pub eval_seed: u64,
    pub probe_steps: usize,
    pub ablation_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let arch = ArchitectureConfig::default();
        let train = TrainConfig::default();
        let adam = AdamConfig::default();
        RunConfig {
            version: 0,
            out_dir: PathBuf::from("run"),
            data_manifest: None,
            data_root: None,
            unlabeled_list: None,
            synthetic_identities: 20,
            synthetic_images_per_identity: 50,
            synthetic_seed: 0,
            synthetic_unlabeled_identities: 0,
            image_size: arch.image_size,
            train_per_identity: 40,
            identity_dim: arch.identity_dim,
            attribute_dim: arch.attribute_dim,
            classifier_hidden: arch.classifier_hidden,
            encoder_stages: arch.encoder.stages,
            generator_base_channels: arch.generator.base_channels,
            generator_stages: arch.generator.stages,
            discriminator_stages: arch.discriminator.stages,
            total_steps: train.total_steps,
            batch_size: train.batch_size,
            lambda: train.lambda,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            unsupervised_ratio: train.unsupervised_ratio,
            checkpoint_every: train.checkpoint_every,
            seed: train.seed,
            noise_scale: train.noise_scale,
            attribute_objective: train.attribute_objective,
            use_feature_matching_d: train.use_feature_matching_d,
            use_feature_matching_c: train.use_feature_matching_c,
            use_kl: train.use_kl,
            use_transformation: train.use_transformation,
            eval_seed: 0,
            probe_steps: ProbeConfig::default().steps,
            ablation_seeds: vec![0, 1, 2],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "config version must be {CONFIG_VERSION}, got {}",
                cfg.version
            )));
        }
        cfg.train_config().validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        let adam = AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        };
        TrainConfig {
            total_steps: self.total_steps,
            batch_size: self.batch_size,
            lambda: self.lambda,
            optimizer: PerNetOptimizer {
                identity: adam,
                attribute: adam,
                generator: adam,
                classifier: adam,
                discriminator: adam,
            },
            unsupervised_ratio: self.unsupervised_ratio,
            checkpoint_every: self.checkpoint_every,
            seed: self.seed,
            noise_scale: self.noise_scale,
            attribute_objective: self.attribute_objective,
            use_feature_matching_d: self.use_feature_matching_d,
            use_feature_matching_c: self.use_feature_matching_c,
            use_kl: self.use_kl,
            use_transformation: self.use_transformation,
        }
    }

    pub fn architecture(&self, num_identities: usize) -> ArchitectureConfig {
        ArchitectureConfig {
            image_size: self.image_size,
            channels: 3,
            num_identities,
            identity_dim: self.identity_dim,
            attribute_dim: self.attribute_dim,
            classifier_hidden: self.classifier_hidden,
            encoder: EncoderSpec {
                stages: self.encoder_stages.clone(),
                normalization: true,
            },
            generator: GeneratorSpec {
                input_width: self.identity_dim + self.attribute_dim,
                base_channels: self.generator_base_channels,
                stages: self.generator_stages.clone(),
                normalization: true,
            },
            discriminator: DiscriminatorSpec {
                stages: self.discriminator_stages.clone(),
                normalization: true,
            },
        }
    }

    fn synthetic(&self, identities: usize, seed: u64) -> Result<LabeledDataset> {
        generate_synthetic_dataset(&SyntheticSpec {
            num_identities: identities,
            images_per_identity: self.synthetic_images_per_identity,
            image_size: self.image_size,
            seed,
            ..SyntheticSpec::default()
        })
    }

    /// The full labeled dataset.
    pub fn dataset(&self) -> Result<LabeledDataset> {
        match &self.data_manifest {
            Some(m) => {
                let root = self
                    .data_root
                    .clone()
                    .unwrap_or_else(|| m.parent().map(Path::to_path_buf).unwrap_or_default());
                load_image_dataset(&root, m, self.image_size)
            }
            None => self.synthetic(self.synthetic_identities, self.synthetic_seed),
        }
    }

    pub fn training_set(&self) -> Result<LabeledDataset> {
        let d = self.dataset()?;
        let train = d.split_per_identity(self.train_per_identity).0;
        train.validate()?;
        Ok(train)
    }

    pub fn eval_split(&self) -> Result<EvalSplit> {
        EvalSplit::from_dataset(&self.dataset()?, self.train_per_identity)
    }

    pub fn unlabeled_pool(&self) -> Result<Option<UnlabeledPool>> {
        if let Some(list) = &self.unlabeled_list {
            let root = list.parent().map(Path::to_path_buf).unwrap_or_default();
            return Ok(Some(load_unlabeled_pool(&root, list, self.image_size)?));
        }
        if self.synthetic_unlabeled_identities > 0 {
            let d = self.synthetic(self.synthetic_unlabeled_identities, self.synthetic_seed.wrapping_add(1))?;
            return Ok(Some(UnlabeledPool::from_dataset(&d)));
        }
        Ok(None)
    }

    pub fn probe(&self) -> ProbeConfig {
        ProbeConfig {
            steps: self.probe_steps,
            seed: self.eval_seed,
            ..ProbeConfig::default()
        }
    }
}
