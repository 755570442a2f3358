//! Identity preservation (top-1 identification on `f_C` cosine similarity),
//! the attribute-leakage probe, a reconstruction blur measure and the
//! ablation harness.

use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{LabeledDataset, UnlabeledPool};
use crate::error::{Error, Result};
use crate::losses::classification_loss;
use crate::networks::{ArchitectureConfig, ModelState};
use crate::nn::{Adam, AdamConfig, Layer, Linear, Mode, Stack};
use crate::synthesis::{reconstruct, recombine};
use crate::tensor::{Scalar, Tensor};
use crate::trainer::{train, TrainConfig};

const CHUNK: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Match query images directly.
    Raw,
    /// Recombine each query with a random attribute image first.
    Generated,
}

fn in_chunks<T: Scalar>(
    images: &[Vec<f32>],
    shape: [usize; 3],
    mut f: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>,
) -> Result<Vec<Vec<f64>>> {
    let mut out = vec![];
    for chunk in images.chunks(CHUNK) {
        let mut data = Vec::with_capacity(chunk.len() * chunk[0].len());
        for img in chunk {
            data.extend(img.iter().map(|&v| T::from_f64c(v as f64)));
        }
        let x = Tensor::from_vec(&[chunk.len(), shape[0], shape[1], shape[2]], data)?;
        let y = f(&x)?;
        for i in 0..y.rows() {
            out.push(y.row(i).iter().map(|v| v.as_f64()).collect());
        }
    }
    Ok(out)
}

fn image_shape(ds: &LabeledDataset) -> [usize; 3] {
    [ds.shape.channels, ds.shape.size, ds.shape.size]
}

/// Eval-mode `f_C` for each image.
pub fn classifier_features<T: Scalar>(state: &ModelState<T>, images: &[Vec<f32>], shape: [usize; 3]) -> Result<Vec<Vec<f64>>> {
    in_chunks(images, shape, |x| Ok(state.classify(x)?.1))
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n == 0.0 {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|a| a / n).collect()
    }
}

/// Index of the most cosine-similar gallery row; ties go to the lowest index.
pub fn nearest(gallery: &[Vec<f64>], probe: &[f64]) -> usize {
    let p = normalized(probe);
    let mut best = (0, f64::NEG_INFINITY);
    for (i, g) in gallery.iter().enumerate() {
        let s: f64 = normalized(g).iter().zip(&p).map(|(a, b)| a * b).sum();
        if s > best.1 {
            best = (i, s);
        }
    }
    best.0
}

/// Fraction of queries whose nearest gallery image has the same identity.
/// In generated mode each query is recombined with an attribute image drawn
/// from `attribute_pool` by a `seed`-driven stream.
pub fn top1_identification<T: Scalar>(
    state: &ModelState<T>,
    gallery: &LabeledDataset,
    queries: &LabeledDataset,
    mode: MatchMode,
    attribute_pool: Option<&UnlabeledPool>,
    seed: u64,
) -> Result<f64> {
    let mut seen = HashSet::new();
    for &l in &gallery.labels {
        if !seen.insert(l) {
            return Err(Error::validation(format!("gallery has more than one image of identity {l}")));
        }
    }
    if let Some(l) = queries.labels.iter().find(|l| !seen.contains(l)) {
        return Err(Error::validation(format!("query identity {l} is not in the gallery")));
    }
    if queries.is_empty() {
        return Err(Error::validation("no queries"));
    }
    let shape = image_shape(gallery);
    let g = classifier_features(state, &gallery.images, shape)?;
    let q = match mode {
        MatchMode::Raw => classifier_features(state, &queries.images, shape)?,
        MatchMode::Generated => {
            let pool = attribute_pool
                .filter(|p| !p.is_empty())
                .ok_or_else(|| Error::validation("generated mode needs a nonempty attribute pool"))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let attrs: Vec<Vec<f32>> = (0..queries.len())
                .map(|_| pool.images[rng.random_range(0..pool.len())].clone())
                .collect();
            let mut feats = vec![];
            for (qc, ac) in queries.images.chunks(CHUNK).zip(attrs.chunks(CHUNK)) {
                let xs = to_tensor::<T>(qc, shape)?;
                let xa = to_tensor::<T>(ac, shape)?;
                let fc = state.classify(&recombine(state, &xs, &xa, None)?)?.1;
                feats.extend((0..fc.rows()).map(|i| fc.row(i).iter().map(|v| v.as_f64()).collect()));
            }
            feats
        }
    };
    let correct = q
        .iter()
        .zip(&queries.labels)
        .filter(|(f, &l)| gallery.labels[nearest(&g, f)] == l)
        .count();
    Ok(correct as f64 / queries.len() as f64)
}

fn to_tensor<T: Scalar>(images: &[Vec<f32>], shape: [usize; 3]) -> Result<Tensor<T>> {
    let data = images.iter().flatten().map(|&v| T::from_f64c(v as f64)).collect();
    Tensor::from_vec(&[images.len(), shape[0], shape[1], shape[2]], data)
}

/// Which representation the leakage probe reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeFeature {
    AttributeMean,
    IdentityVector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub feature: ProbeFeature,
    /// Z-score each feature with training-split statistics.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: vec![256, 256],
            steps: 2000,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
            feature: ProbeFeature::AttributeMean,
            standardize: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
    pub chance: f64,
}

/// Per identity, `round(ratio · count)` records (at least one, leaving at
/// least one) go to training.
pub fn split_indices(labels: &[usize], num_identities: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::validation(format!("split ratio {ratio} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (vec![], vec![]);
    for k in 0..num_identities {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
        if idx.len() < 2 {
            return Err(Error::validation(format!("identity {k} has fewer than 2 records to split")));
        }
        idx.shuffle(&mut rng);
        let n = ((idx.len() as f64 * ratio).round() as usize).clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..n]);
        val.extend_from_slice(&idx[n..]);
    }
    Ok((train, val))
}

/// Probe input features for every image of `dataset`.
pub fn probe_features<T: Scalar>(state: &ModelState<T>, dataset: &LabeledDataset, feature: ProbeFeature) -> Result<Vec<Vec<f64>>> {
    let shape = image_shape(dataset);
    match feature {
        ProbeFeature::AttributeMean => in_chunks(&dataset.images, shape, |x| Ok(state.forward_attribute(x)?.mu)),
        ProbeFeature::IdentityVector => in_chunks(&dataset.images, shape, |x| Ok(state.forward_identity(x)?.0 .0)),
    }
}

/// Train an MLP to predict identity from features and report its accuracy.
pub fn train_probe(
    features: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    train_idx: &[usize],
    val_idx: &[usize],
    config: &ProbeConfig,
) -> Result<ProbeResult> {
    if num_classes < 2 {
        return Err(Error::validation("probe needs at least 2 identities"));
    }
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::validation("probe split is empty"));
    }
    let dim = features[0].len();
    let (shift, scale) = if config.standardize {
        let n = train_idx.len() as f64;
        let mean: Vec<f64> = (0..dim).map(|j| train_idx.iter().map(|&i| features[i][j]).sum::<f64>() / n).collect();
        let std: Vec<f64> = (0..dim)
            .map(|j| {
                let v = train_idx.iter().map(|&i| (features[i][j] - mean[j]).powi(2)).sum::<f64>() / n;
                if v > 0.0 { 1.0 / v.sqrt() } else { 0.0 }
            })
            .collect();
        (mean, std)
    } else {
        (vec![0.0; dim], vec![1.0; dim])
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut layers = vec![];
    let mut w = dim;
    for &h in &config.hidden {
        layers.push(Layer::Linear(Linear::new(w, h, (2.0 / w as f64).sqrt(), &mut rng)));
        layers.push(Layer::Relu);
        w = h;
    }
    layers.push(Layer::Linear(Linear::new(w, num_classes, (1.0 / w as f64).sqrt(), &mut rng)));
    let mut mlp: Stack<f32> = Stack::new("probe", layers);
    let sizes: Vec<usize> = mlp.param_slices().iter().map(|(_, p)| p.len()).collect();
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
        &sizes,
    );
    let batch = |idx: &[usize]| -> Result<Tensor<f32>> {
        let data = idx
            .iter()
            .flat_map(|&i| features[i].iter().enumerate().map(|(j, &v)| ((v - shift[j]) * scale[j]) as f32))
            .collect();
        Tensor::from_vec(&[idx.len(), dim], data)
    };
    for _ in 0..config.steps {
        let idx: Vec<usize> = (0..config.batch_size.min(train_idx.len()))
            .map(|_| train_idx[rng.random_range(0..train_idx.len())])
            .collect();
        let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let (logits, tape) = mlp.forward(batch(&idx)?, Mode::Train);
        let loss = classification_loss(&logits, &ys)?;
        let mut g = mlp.zero_grads();
        mlp.backward(&tape, loss.grad, Some(&mut g), false);
        let flat: Vec<&[f32]> = g.iter().map(|v| v.as_slice()).collect();
        adam.update(mlp.params_mut(), &flat);
    }
    let accuracy = |idx: &[usize]| -> Result<f64> {
        let (logits, _) = mlp.forward(batch(idx)?, Mode::Eval);
        let correct = idx
            .iter()
            .enumerate()
            .filter(|&(r, &i)| {
                let row = logits.row(r);
                let arg = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                arg == labels[i]
            })
            .count();
        Ok(correct as f64 / idx.len() as f64)
    };
    Ok(ProbeResult {
        train_accuracy: accuracy(train_idx)?,
        validation_accuracy: accuracy(val_idx)?,
        chance: 1.0 / num_classes as f64,
    })
}

/// How much identity an MLP can read off the attribute means (or, for a
/// sanity check, off the identity vectors).
pub fn attribute_leakage_probe<T: Scalar>(
    state: &ModelState<T>,
    dataset: &LabeledDataset,
    split_ratio: f64,
    config: &ProbeConfig,
) -> Result<ProbeResult> {
    if dataset.num_identities < 2 {
        return Err(Error::validation("probe needs at least 2 identities"));
    }
    let (tr, va) = split_indices(&dataset.labels, dataset.num_identities, split_ratio, config.seed)?;
    let f = probe_features(state, dataset, config.feature)?;
    train_probe(&f, &dataset.labels, dataset.num_identities, &tr, &va, config)
}

/// Mean squared 4-neighbour Laplacian of luminance over interior pixels.
/// Lower values mean blurrier images.
pub fn high_frequency_energy(images: &[Vec<f32>], channels: usize, size: usize) -> f64 {
    let plane = size * size;
    let mut total = 0.0;
    let mut count = 0usize;
    for img in images {
        let lum: Vec<f64> = (0..plane)
            .map(|i| {
                if channels >= 3 {
                    0.299 * img[i] as f64 + 0.587 * img[plane + i] as f64 + 0.114 * img[2 * plane + i] as f64
                } else {
                    img[i] as f64
                }
            })
            .collect();
        for y in 1..size - 1 {
            for x in 1..size - 1 {
                let c = y * size + x;
                let l = lum[c - 1] + lum[c + 1] + lum[c - size] + lum[c + size] - 4.0 * lum[c];
                total += l * l;
                count += 1;
            }
        }
    }
    total / count.max(1) as f64
}

/// High-frequency energy of the model's reconstructions of `dataset`.
pub fn reconstruction_energy<T: Scalar>(state: &ModelState<T>, dataset: &LabeledDataset) -> Result<f64> {
    let shape = image_shape(dataset);
    let recon = in_chunks(&dataset.images, shape, |x| reconstruct(state, x))?;
    let recon: Vec<Vec<f32>> = recon.into_iter().map(|r| r.into_iter().map(|v| v as f32).collect()).collect();
    Ok(high_frequency_energy(&recon, shape[0], shape[1]))
}

/// Data for an evaluation: a training set, a one-per-identity gallery, held
/// out queries, a probe set and an attribute pool.
pub struct EvalSplit {
    pub train: LabeledDataset,
    pub gallery: LabeledDataset,
    pub queries: LabeledDataset,
    pub attribute_pool: UnlabeledPool,
}

impl EvalSplit {
    /// First `train_per_identity` records of each identity train; of the
    /// rest, the first per identity is the gallery and the others query.
    pub fn from_dataset(ds: &LabeledDataset, train_per_identity: usize) -> Result<Self> {
        for k in 0..ds.num_identities {
            if ds.indices_of(k).len() < train_per_identity + 2 {
                return Err(Error::validation(format!(
                    "identity {k} needs {} records for training, gallery and query",
                    train_per_identity + 2
                )));
            }
        }
        let (train, rest) = ds.split_per_identity(train_per_identity);
        let (gallery, queries) = rest.split_per_identity(1);
        Ok(EvalSplit {
            attribute_pool: UnlabeledPool::from_dataset(&queries),
            train,
            gallery,
            queries,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub top1_raw: f64,
    pub top1_generated: f64,
    pub probe_validation: f64,
    pub probe_chance: f64,
    pub reconstruction_energy: f64,
}

impl Metrics {
    pub const HEADER: &'static str = "top1_raw\ttop1_generated\tprobe_validation\tprobe_chance\treconstruction_energy";
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.6}",
            self.top1_raw, self.top1_generated, self.probe_validation, self.probe_chance, self.reconstruction_energy
        )
    }
}

/// All metrics of one trained model. The probe runs on the training set.
pub fn evaluate<T: Scalar>(state: &ModelState<T>, split: &EvalSplit, probe: &ProbeConfig, seed: u64) -> Result<Metrics> {
    let p = attribute_leakage_probe(state, &split.train, 0.8, probe)?;
    Ok(Metrics {
        top1_raw: top1_identification(state, &split.gallery, &split.queries, MatchMode::Raw, None, seed)?,
        top1_generated: top1_identification(
            state,
            &split.gallery,
            &split.queries,
            MatchMode::Generated,
            Some(&split.attribute_pool),
            seed,
        )?,
        probe_validation: p.validation_accuracy,
        probe_chance: p.chance,
        reconstruction_energy: reconstruction_energy(state, &split.queries)?,
    })
}

/// The ablation configurations, each derived from `base` only through
/// [`TrainConfig`] switches.
pub fn ablation_configs(base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    vec![
        ("full", base.clone()),
        (
            "no_gc",
            TrainConfig {
                use_feature_matching_c: false,
                ..base.clone()
            },
        ),
        (
            "no_gd",
            TrainConfig {
                use_feature_matching_d: false,
                ..base.clone()
            },
        ),
        (
            "no_transformation",
            TrainConfig {
                use_transformation: false,
                ..base.clone()
            },
        ),
        (
            "no_unsupervised",
            TrainConfig {
                unsupervised_ratio: 0.0,
                ..base.clone()
            },
        ),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub seed: u64,
    pub metrics: Metrics,
}

impl AblationRow {
    pub fn header() -> String {
        format!("config\tseed\t{}", Metrics::HEADER)
    }
}

impl fmt::Display for AblationRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}", self.name, self.seed, self.metrics)
    }
}

/// Train and evaluate every ablation configuration for every seed.
pub fn run_ablation(
    arch: &ArchitectureConfig,
    base: &TrainConfig,
    split: &EvalSplit,
    unlabeled: Option<&UnlabeledPool>,
    seeds: &[u64],
    probe: &ProbeConfig,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = vec![];
    for (name, cfg) in ablation_configs(base) {
        for &seed in seeds {
            let cfg = TrainConfig { seed, ..cfg.clone() };
            let (state, _) = train::<f32>(arch, &cfg, &split.train, unlabeled)?;
            let row = AblationRow {
                name: name.to_string(),
                seed,
                metrics: evaluate(&state, split, probe, seed)?,
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_breaks_ties_by_lowest_index() {
        let g = vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(nearest(&g, &[3.0, 0.0]), 0);
        assert_eq!(nearest(&g, &[0.0, 0.5]), 2);
    }

    #[test]
    fn split_keeps_every_identity_on_both_sides() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let (tr, va) = split_indices(&labels, 3, 0.8, 1).unwrap();
        assert_eq!(tr.len() + va.len(), 30);
        for k in 0..3 {
            assert!(tr.iter().any(|&i| labels[i] == k));
            assert!(va.iter().any(|&i| labels[i] == k));
        }
        assert!(split_indices(&labels, 3, 1.0, 1).is_err());
    }

    #[test]
    fn probe_on_random_features_is_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels: Vec<usize> = (0..400).map(|i| i % 2).collect();
        let feats: Vec<Vec<f64>> = (0..400).map(|_| (0..8).map(|_| rng.random::<f64>()).collect()).collect();
        let (tr, va) = split_indices(&labels, 2, 0.5, 0).unwrap();
        let cfg = ProbeConfig {
            steps: 300,
            ..ProbeConfig::default()
        };
        let r = train_probe(&feats, &labels, 2, &tr, &va, &cfg).unwrap();
        assert_eq!(r.chance, 0.5);
        assert!((r.validation_accuracy - 0.5).abs() < 0.12, "{r:?}");
    }

    #[test]
    fn probe_learns_separable_features() {
        let labels: Vec<usize> = (0..200).map(|i| i % 4).collect();
        let feats: Vec<Vec<f64>> = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| (0..4).map(|j| if j == l { 1.0 } else { 0.0 } + 0.01 * (i % 7) as f64).collect())
            .collect();
        let (tr, va) = split_indices(&labels, 4, 0.5, 0).unwrap();
        let cfg = ProbeConfig {
            steps: 200,
            ..ProbeConfig::default()
        };
        assert_eq!(train_probe(&feats, &labels, 4, &tr, &va, &cfg).unwrap().validation_accuracy, 1.0);
    }

    #[test]
    fn flat_image_has_no_high_frequency_energy() {
        assert_eq!(high_frequency_energy(&[vec![0.3; 3 * 64]], 3, 8), 0.0);
        let checker: Vec<f32> = (0..3 * 64).map(|i| if (i % 8 + (i / 8) % 8) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert!(high_frequency_energy(&[checker], 3, 8) > 1.0);
    }
}
