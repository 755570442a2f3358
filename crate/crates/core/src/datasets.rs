//! Labeled and unlabeled image collections, a procedural glyph dataset with
//! known factors of variation, and the batch samplers used by training.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io;
use crate::tensor::Tensor;

/// Height/width/channels shared by every image of a collection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub size: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ground-truth nuisance factors of a synthetic image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeFactors {
    pub dx: f64,
    pub dy: f64,
    pub rotation_deg: f64,
    pub background_hue: f64,
    pub illumination: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub shape: ImageShape,
    /// Channel-major images with values in [-1, 1].
    pub images: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    pub num_identities: usize,
    /// Source identity names in label order.
    pub identity_names: Vec<String>,
    /// Present for synthetic data only.
    pub factors: Option<Vec<AttributeFactors>>,
}

impl LabeledDataset {
    pub fn new(
        shape: ImageShape,
        images: Vec<Vec<f32>>,
        labels: Vec<usize>,
        num_identities: usize,
    ) -> Result<Self> {
        let d = LabeledDataset {
            shape,
            images,
            labels,
            num_identities,
            identity_names: (0..num_identities).map(|i| i.to_string()).collect(),
            factors: None,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() {
            return Err(Error::validation("image and label counts differ"));
        }
        if self.images.is_empty() {
            return Err(Error::validation("dataset is empty"));
        }
        let mut counts = vec![0usize; self.num_identities];
        for &l in &self.labels {
            if l >= self.num_identities {
                return Err(Error::validation(format!(
                    "label {l} outside [0, {})",
                    self.num_identities
                )));
            }
            counts[l] += 1;
        }
        if let Some(k) = counts.iter().position(|&c| c < 2) {
            return Err(Error::validation(format!(
                "identity {} has {} image(s); at least 2 are required",
                self.identity_names.get(k).cloned().unwrap_or_else(|| k.to_string()),
                counts[k]
            )));
        }
        if self.images.iter().any(|im| im.len() != self.shape.len()) {
            return Err(Error::validation("images do not share one shape"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stack selected records into an `(n, c, h, w)` tensor.
    pub fn batch(&self, idx: &[usize]) -> Tensor<f32> {
        stack_images(&self.images, idx, self.shape)
    }

    pub fn indices_of(&self, label: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == label).collect()
    }

    /// Records at `idx`, keeping label space and names. Does not re-validate the
    /// two-images-per-identity rule, so galleries with one image each are allowed.
    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            shape: self.shape,
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_identities: self.num_identities,
            identity_names: self.identity_names.clone(),
            factors: self.factors.as_ref().map(|f| idx.iter().map(|&i| f[i]).collect()),
        }
    }

    /// Deterministic per-identity split: the first `train` images of every
    /// identity (in record order) go to the first part, the rest to the second.
    pub fn split_per_identity(&self, train: usize) -> (LabeledDataset, LabeledDataset) {
        let mut a = vec![];
        let mut b = vec![];
        for k in 0..self.num_identities {
            let idx = self.indices_of(k);
            a.extend_from_slice(&idx[..train.min(idx.len())]);
            b.extend_from_slice(&idx[train.min(idx.len())..]);
        }
        a.sort_unstable();
        b.sort_unstable();
        (self.subset(&a), self.subset(&b))
    }

    /// Write PNGs plus a `manifest.tsv` readable by [`load_image_dataset`].
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        for (i, (img, &l)) in self.images.iter().zip(&self.labels).enumerate() {
            let name = format!("{i:05}.png");
            image_io::save_png(&dir.join(&name), img, self.shape.channels, self.shape.size)?;
            manifest.push_str(&format!("{name}\t{}\n", self.identity_names[l]));
        }
        fs::write(dir.join("manifest.tsv"), manifest)?;
        Ok(())
    }
}

fn stack_images(images: &[Vec<f32>], idx: &[usize], shape: ImageShape) -> Tensor<f32> {
    let mut data = Vec::with_capacity(idx.len() * shape.len());
    for &i in idx {
        data.extend_from_slice(&images[i]);
    }
    Tensor::from_vec(&[idx.len(), shape.channels, shape.size, shape.size], data).expect("image shape")
}

/// Images without identity labels.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledPool {
    pub shape: ImageShape,
    pub images: Vec<Vec<f32>>,
}

impl UnlabeledPool {
    pub fn new(shape: ImageShape, images: Vec<Vec<f32>>) -> Result<Self> {
        if images.iter().any(|im| im.len() != shape.len()) {
            return Err(Error::validation("pool images do not share one shape"));
        }
        Ok(UnlabeledPool { shape, images })
    }

    /// Drop the labels of a dataset.
    pub fn from_dataset(d: &LabeledDataset) -> Self {
        UnlabeledPool {
            shape: d.shape,
            images: d.images.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Read `relative/path<TAB>identity` lines; identities are numbered in order
/// of first appearance.
pub fn load_image_dataset(root: &Path, manifest: &Path, size: usize) -> Result<LabeledDataset> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::load(manifest, e.to_string()))?;
    let mut names: Vec<String> = vec![];
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut images = vec![];
    let mut labels = vec![];
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (rel, ident) = line.split_once('\t').ok_or_else(|| {
            Error::validation(format!("{}:{}: expected `path<TAB>identity`", manifest.display(), lineno + 1))
        })?;
        let ident = ident.trim().to_string();
        let label = *ids.entry(ident.clone()).or_insert_with(|| {
            names.push(ident);
            names.len() - 1
        });
        let path = root.join(rel);
        if !path.is_file() {
            return Err(Error::load(path, "file not found"));
        }
        images.push(image_io::load_png(&path, size)?);
        labels.push(label);
    }
    let d = LabeledDataset {
        shape: ImageShape { channels: 3, size },
        images,
        labels,
        num_identities: names.len(),
        identity_names: names,
        factors: None,
    };
    d.validate()?;
    Ok(d)
}

/// Load every PNG listed one-per-line in a text file (paths relative to `root`).
pub fn load_unlabeled_pool(root: &Path, list: &Path, size: usize) -> Result<UnlabeledPool> {
    let text = fs::read_to_string(list).map_err(|e| Error::load(list, e.to_string()))?;
    let mut images = vec![];
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let rel = line.split('\t').next().unwrap_or(line);
        images.push(image_io::load_png(&root.join(rel), size)?);
    }
    UnlabeledPool::new(ImageShape { channels: 3, size }, images)
}

/// Synthetic images must tile the default four-stage generator's 16x upsampling.
pub const SIZE_MULTIPLE: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_identities: usize,
    pub images_per_identity: usize,
    pub image_size: usize,
    /// Maximum absolute translation in pixels along each axis.
    pub max_translation: f64,
    /// Maximum absolute rotation in degrees.
    pub max_rotation_deg: f64,
    /// Background hue range in degrees.
    pub background_hue: (f64, f64),
    /// Global brightness multiplier range.
    pub illumination: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_identities: 20,
            images_per_identity: 50,
            image_size: 32,
            max_translation: 4.0,
            max_rotation_deg: 30.0,
            background_hue: (0.0, 360.0),
            illumination: (0.6, 1.2),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities == 0 {
            return Err(Error::validation("num_identities must be positive"));
        }
        if self.images_per_identity < 2 {
            return Err(Error::validation("images_per_identity must be at least 2"));
        }
        if self.image_size < 16 || self.image_size % SIZE_MULTIPLE != 0 {
            return Err(Error::validation(format!(
                "image_size {} must be >= 16 and a multiple of {SIZE_MULTIPLE}",
                self.image_size
            )));
        }
        let ranges = [
            ("max_translation", 0.0, self.max_translation),
            ("max_rotation_deg", 0.0, self.max_rotation_deg),
            ("background_hue", self.background_hue.0, self.background_hue.1),
            ("illumination", self.illumination.0, self.illumination.1),
        ];
        for (name, lo, hi) in ranges {
            if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::validation(format!("{name} range [{lo}, {hi}] is degenerate")));
            }
        }
        if self.illumination.0 <= 0.0 {
            return Err(Error::validation("illumination must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Primitive {
    Disk { c: (f64, f64), r: f64 },
    Ring { c: (f64, f64), r: f64, w: f64 },
    Bar { c: (f64, f64), half_len: f64, half_w: f64, angle: f64 },
    Triangle { p: [(f64, f64); 3] },
}

impl Primitive {
    fn contains(&self, u: f64, v: f64) -> bool {
        match *self {
            Primitive::Disk { c, r } => (u - c.0).powi(2) + (v - c.1).powi(2) <= r * r,
            Primitive::Ring { c, r, w } => {
                let d = ((u - c.0).powi(2) + (v - c.1).powi(2)).sqrt();
                (d - r).abs() <= w
            }
            Primitive::Bar { c, half_len, half_w, angle } => {
                let (s, co) = angle.sin_cos();
                let (du, dv) = (u - c.0, v - c.1);
                let a = co * du + s * dv;
                let b = -s * du + co * dv;
                a.abs() <= half_len && b.abs() <= half_w
            }
            Primitive::Triangle { p } => {
                let cross = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (v - a.1) - (b.1 - a.1) * (u - a.0);
                let d0 = cross(p[0], p[1]);
                let d1 = cross(p[1], p[2]);
                let d2 = cross(p[2], p[0]);
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
        }
    }
}

/// One identity: a union of primitives in `[-1, 1]²` and a foreground colour.
#[derive(Clone, Debug)]
struct Glyph {
    parts: Vec<Primitive>,
    color: [f64; 3],
}

impl Glyph {
    fn random(rng: &mut ChaCha8Rng, hue: f64) -> Glyph {
        let n = rng.random_range(2..=3);
        let mut parts = Vec::with_capacity(n);
        for _ in 0..n {
            let c = (rng.random_range(-0.45..0.45), rng.random_range(-0.45..0.45));
            let p = match rng.random_range(0..4) {
                0 => Primitive::Disk {
                    c,
                    r: rng.random_range(0.25..0.5),
                },
                1 => Primitive::Ring {
                    c,
                    r: rng.random_range(0.3..0.55),
                    w: rng.random_range(0.08..0.15),
                },
                2 => Primitive::Bar {
                    c,
                    half_len: rng.random_range(0.4..0.8),
                    half_w: rng.random_range(0.08..0.2),
                    angle: rng.random_range(0.0..PI),
                },
                _ => {
                    let mut p = [(0.0, 0.0); 3];
                    for q in &mut p {
                        *q = (rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9));
                    }
                    Primitive::Triangle { p }
                }
            };
            parts.push(p);
        }
        Glyph {
            parts,
            color: hsv_to_rgb(hue, 0.85, 0.95),
        }
    }

    fn contains(&self, u: f64, v: f64) -> bool {
        self.parts.iter().any(|p| p.contains(u, v))
    }
}

fn hsv_to_rgb(hue_deg: f64, s: f64, v: f64) -> [f64; 3] {
    let h = hue_deg.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

const SUPERSAMPLE: usize = 3;

fn render(glyph: &Glyph, f: &AttributeFactors, size: usize) -> Vec<f32> {
    let bg = hsv_to_rgb(f.background_hue, 0.4, 0.45);
    let scale = 0.32 * size as f64;
    let (s, c) = (-f.rotation_deg.to_radians()).sin_cos();
    let center = size as f64 / 2.0;
    let plane = size * size;
    let mut out = vec![0.0f32; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                    let (dx, dy) = (px - center - f.dx, py - center - f.dy);
                    let u = (c * dx - s * dy) / scale;
                    let v = (s * dx + c * dy) / scale;
                    if glyph.contains(u, v) {
                        hits += 1;
                    }
                }
            }
            let cov = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            for ch in 0..3 {
                let val = ((cov * glyph.color[ch] + (1.0 - cov) * bg[ch]) * f.illumination).clamp(0.0, 1.0);
                let byte = (val * 255.0).round() as u8;
                out[ch * plane + y * size + x] = image_io::to_unit(byte);
            }
        }
    }
    out
}

/// Render `num_identities × images_per_identity` glyph images. Records are
/// ordered identity-major. The output is a pure function of the spec.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let glyphs: Vec<Glyph> = (0..spec.num_identities).map(|k| identity_glyph(spec, k)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut images = Vec::with_capacity(spec.num_identities * spec.images_per_identity);
    let mut labels = Vec::with_capacity(images.capacity());
    let mut factors = Vec::with_capacity(images.capacity());
    for (k, glyph) in glyphs.iter().enumerate() {
        for _ in 0..spec.images_per_identity {
            let f = AttributeFactors {
                dx: rng.random_range(-spec.max_translation..=spec.max_translation),
                dy: rng.random_range(-spec.max_translation..=spec.max_translation),
                rotation_deg: rng.random_range(-spec.max_rotation_deg..=spec.max_rotation_deg),
                background_hue: rng.random_range(spec.background_hue.0..spec.background_hue.1),
                illumination: rng.random_range(spec.illumination.0..spec.illumination.1),
            };
            images.push(render(glyph, &f, spec.image_size));
            labels.push(k);
            factors.push(f);
        }
    }
    let mut d = LabeledDataset::new(
        ImageShape {
            channels: 3,
            size: spec.image_size,
        },
        images,
        labels,
        spec.num_identities,
    )?;
    d.identity_names = (0..spec.num_identities).map(|k| format!("glyph{k:03}")).collect();
    d.factors = Some(factors);
    Ok(d)
}

fn identity_glyph(spec: &SyntheticSpec, k: usize) -> Glyph {
    let mut r = ChaCha8Rng::seed_from_u64(spec.seed);
    r.set_stream(u64::MAX);
    let hue0 = r.random_range(0.0..360.0);
    r.set_stream(k as u64 + 1);
    // golden-angle hue spacing keeps every identity's colour distinct
    Glyph::random(&mut r, hue0 + 137.507_764 * k as f64)
}

/// Render identity `k` of `spec` under explicit factors.
pub fn render_synthetic(spec: &SyntheticSpec, k: usize, factors: &AttributeFactors) -> Vec<f32> {
    render(&identity_glyph(spec, k), factors, spec.image_size)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Reconstruction,
    Transformation,
    Unsupervised,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Reconstruction => "reconstruction",
            Phase::Transformation => "transformation",
            Phase::Unsupervised => "unsupervised",
        }
    }
}

/// Where a batch row came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecordRef {
    Labeled(usize),
    Pool(usize),
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub subject: Tensor<f32>,
    pub attribute: Tensor<f32>,
    pub labels: Option<Vec<usize>>,
    pub phase: Phase,
    pub subject_refs: Vec<RecordRef>,
    pub attribute_refs: Vec<RecordRef>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.subject_refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subject_refs.is_empty()
    }

    /// Check the phase invariants.
    pub fn validate(&self) -> Result<()> {
        if self.labels.is_some() == (self.phase == Phase::Unsupervised) {
            return Err(Error::validation("labels must be present exactly when the phase is supervised"));
        }
        if let Some(l) = &self.labels {
            if l.len() != self.len() {
                return Err(Error::validation("label count differs from batch size"));
            }
        }
        match self.phase {
            Phase::Reconstruction => {
                if self.subject != self.attribute {
                    return Err(Error::validation("reconstruction batch has subject != attribute"));
                }
            }
            Phase::Transformation | Phase::Unsupervised => {
                if self.subject_refs.iter().zip(&self.attribute_refs).any(|(a, b)| a == b) {
                    return Err(Error::validation("transformation row pairs a record with itself"));
                }
            }
        }
        Ok(())
    }
}

fn require_rows(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::validation("batch size must be at least 1"));
    }
    Ok(())
}

pub fn sample_reconstruction_batch<R: Rng + ?Sized>(d: &LabeledDataset, n: usize, rng: &mut R) -> Result<Batch> {
    require_rows(n)?;
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..d.len())).collect();
    let subject = d.batch(&idx);
    Ok(Batch {
        attribute: subject.clone(),
        subject,
        labels: Some(idx.iter().map(|&i| d.labels[i]).collect()),
        phase: Phase::Reconstruction,
        subject_refs: idx.iter().map(|&i| RecordRef::Labeled(i)).collect(),
        attribute_refs: idx.iter().map(|&i| RecordRef::Labeled(i)).collect(),
    })
}

/// Uniform index in `0..len` other than `exclude`.
fn other_index<R: Rng + ?Sized>(len: usize, exclude: usize, rng: &mut R) -> usize {
    let j = rng.random_range(0..len - 1);
    if j >= exclude {
        j + 1
    } else {
        j
    }
}

pub fn sample_transformation_batch<R: Rng + ?Sized>(d: &LabeledDataset, n: usize, rng: &mut R) -> Result<Batch> {
    require_rows(n)?;
    if d.len() < 2 {
        return Err(Error::validation("transformation pairs need at least 2 records"));
    }
    let mut si = Vec::with_capacity(n);
    let mut ai = Vec::with_capacity(n);
    for _ in 0..n {
        let s = rng.random_range(0..d.len());
        si.push(s);
        ai.push(other_index(d.len(), s, rng));
    }
    Ok(Batch {
        subject: d.batch(&si),
        attribute: d.batch(&ai),
        labels: Some(si.iter().map(|&i| d.labels[i]).collect()),
        phase: Phase::Transformation,
        subject_refs: si.iter().map(|&i| RecordRef::Labeled(i)).collect(),
        attribute_refs: ai.iter().map(|&i| RecordRef::Labeled(i)).collect(),
    })
}

/// Which slot the unlabeled images fill.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolRole {
    Subject,
    Attribute,
}

pub fn sample_unlabeled<R: Rng + ?Sized>(
    pool: &UnlabeledPool,
    n: usize,
    role: PoolRole,
    companion: &LabeledDataset,
    rng: &mut R,
) -> Result<Batch> {
    require_rows(n)?;
    if pool.is_empty() {
        return Err(Error::validation("unlabeled pool is empty"));
    }
    if pool.shape != companion.shape {
        return Err(Error::validation("pool and labeled dataset image shapes differ"));
    }
    let pool_ref = |i: usize| RecordRef::Pool(i);
    match role {
        PoolRole::Attribute => {
            let si: Vec<usize> = (0..n).map(|_| rng.random_range(0..companion.len())).collect();
            let ai: Vec<usize> = (0..n).map(|_| rng.random_range(0..pool.len())).collect();
            Ok(Batch {
                subject: companion.batch(&si),
                attribute: stack_images(&pool.images, &ai, pool.shape),
                labels: Some(si.iter().map(|&i| companion.labels[i]).collect()),
                phase: Phase::Transformation,
                subject_refs: si.iter().map(|&i| RecordRef::Labeled(i)).collect(),
                attribute_refs: ai.into_iter().map(pool_ref).collect(),
            })
        }
        PoolRole::Subject => {
            // Attributes come from the union of pool and companion, excluding the subject record.
            let total = pool.len() + companion.len();
            let mut subject = Vec::with_capacity(n * pool.shape.len());
            let mut attribute = Vec::with_capacity(n * pool.shape.len());
            let mut srefs = Vec::with_capacity(n);
            let mut arefs = Vec::with_capacity(n);
            for _ in 0..n {
                let s = rng.random_range(0..pool.len());
                let a = other_index(total, s, rng);
                subject.extend_from_slice(&pool.images[s]);
                srefs.push(RecordRef::Pool(s));
                if a < pool.len() {
                    attribute.extend_from_slice(&pool.images[a]);
                    arefs.push(RecordRef::Pool(a));
                } else {
                    let c = a - pool.len();
                    attribute.extend_from_slice(&companion.images[c]);
                    arefs.push(RecordRef::Labeled(c));
                }
            }
            let shape = [n, pool.shape.channels, pool.shape.size, pool.shape.size];
            Ok(Batch {
                subject: Tensor::from_vec(&shape, subject)?,
                attribute: Tensor::from_vec(&shape, attribute)?,
                labels: None,
                phase: Phase::Unsupervised,
                subject_refs: srefs,
                attribute_refs: arefs,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_identities: 4,
            images_per_identity: 5,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn synthetic_counts() {
        let spec = SyntheticSpec {
            num_identities: 20,
            images_per_identity: 50,
            ..SyntheticSpec::default()
        };
        let d = generate_synthetic_dataset(&spec).unwrap();
        assert_eq!(d.num_identities, 20);
        assert_eq!(d.len(), 1000);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic_dataset(&small_spec()).unwrap();
        let b = generate_synthetic_dataset(&small_spec()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_dataset(&SyntheticSpec { seed: 1, ..small_spec() }).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn rotation_changes_pixels_not_label() {
        let spec = small_spec();
        let base = AttributeFactors {
            dx: 0.0,
            dy: 0.0,
            rotation_deg: 0.0,
            background_hue: 200.0,
            illumination: 1.0,
        };
        let rotated = AttributeFactors {
            rotation_deg: 25.0,
            ..base
        };
        assert_ne!(render_synthetic(&spec, 1, &base), render_synthetic(&spec, 1, &rotated));
    }

    #[test]
    fn identities_differ_under_equal_factors() {
        let spec = SyntheticSpec {
            num_identities: 20,
            ..small_spec()
        };
        let f = AttributeFactors {
            dx: 1.0,
            dy: -2.0,
            rotation_deg: 10.0,
            background_hue: 40.0,
            illumination: 0.9,
        };
        let imgs: Vec<_> = (0..20).map(|k| render_synthetic(&spec, k, &f)).collect();
        for i in 0..20 {
            for j in i + 1..20 {
                assert_ne!(imgs[i], imgs[j], "identities {i} and {j} collide");
            }
        }
    }

    #[test]
    fn generated_images_match_render() {
        let spec = small_spec();
        let d = generate_synthetic_dataset(&spec).unwrap();
        let f = d.factors.as_ref().unwrap()[7];
        assert_eq!(d.images[7], render_synthetic(&spec, d.labels[7], &f));
    }

    #[test]
    fn degenerate_ranges_are_rejected() {
        let bad = SyntheticSpec {
            illumination: (1.0, 1.0),
            ..small_spec()
        };
        assert!(generate_synthetic_dataset(&bad).is_err());
        let tiny = SyntheticSpec {
            image_size: 8,
            ..small_spec()
        };
        assert!(generate_synthetic_dataset(&tiny).is_err());
    }

    #[test]
    fn reconstruction_batch_invariants() {
        let d = generate_synthetic_dataset(&small_spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = sample_reconstruction_batch(&d, 4, &mut rng).unwrap();
        assert_eq!(b.subject, b.attribute);
        b.validate().unwrap();
        for (i, r) in b.subject_refs.iter().enumerate() {
            let RecordRef::Labeled(j) = *r else { panic!() };
            assert_eq!(b.labels.as_ref().unwrap()[i], d.labels[j]);
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(5);
        let b2 = sample_reconstruction_batch(&d, 4, &mut rng2).unwrap();
        assert_eq!(b.subject_refs, b2.subject_refs);
        // more rows than records is fine
        assert_eq!(sample_reconstruction_batch(&d, 100, &mut rng).unwrap().len(), 100);
    }

    #[test]
    fn transformation_pairs_are_distinct() {
        let d = generate_synthetic_dataset(&small_spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = sample_transformation_batch(&d, 8, &mut rng).unwrap();
        assert_eq!(b.len(), 8);
        b.validate().unwrap();
        let two = d.subset(&[0, 1]);
        let b = sample_transformation_batch(&two, 16, &mut rng).unwrap();
        for (s, a) in b.subject_refs.iter().zip(&b.attribute_refs) {
            let (RecordRef::Labeled(s), RecordRef::Labeled(a)) = (*s, *a) else { panic!() };
            assert_eq!(s + a, 1);
        }
        assert!(sample_transformation_batch(&d.subset(&[0]), 2, &mut rng).is_err());
    }

    #[test]
    fn unlabeled_roles() {
        let d = generate_synthetic_dataset(&small_spec()).unwrap();
        let pool = UnlabeledPool::from_dataset(&d.subset(&[0, 3, 9]));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = sample_unlabeled(&pool, 6, PoolRole::Subject, &d, &mut rng).unwrap();
        assert_eq!(b.phase, Phase::Unsupervised);
        assert!(b.labels.is_none());
        b.validate().unwrap();
        let b = sample_unlabeled(&pool, 6, PoolRole::Attribute, &d, &mut rng).unwrap();
        assert_eq!(b.phase, Phase::Transformation);
        assert_eq!(b.labels.as_ref().unwrap().len(), 6);
        b.validate().unwrap();
        assert!(sample_unlabeled(&pool, 0, PoolRole::Subject, &d, &mut rng).is_err());
        let empty = UnlabeledPool::new(d.shape, vec![]).unwrap();
        assert!(sample_unlabeled(&empty, 2, PoolRole::Subject, &d, &mut rng).is_err());
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let d = generate_synthetic_dataset(&SyntheticSpec {
            num_identities: 3,
            images_per_identity: 2,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let l = load_image_dataset(dir.path(), &dir.path().join("manifest.tsv"), 32).unwrap();
        assert_eq!(l.num_identities, 3);
        assert_eq!(l.len(), 6);
        assert_eq!(l.images, d.images);
        assert_eq!(l.labels, d.labels);

        let bad = dir.path().join("bad.tsv");
        fs::write(&bad, "missing.png\ta\n").unwrap();
        let err = load_image_dataset(dir.path(), &bad, 32).unwrap_err();
        assert!(matches!(err, Error::Load { .. }));
        assert!(err.to_string().contains("missing.png"));

        let single = dir.path().join("single.tsv");
        fs::write(&single, "00000.png\ta\n00001.png\ta\n00002.png\tb\n").unwrap();
        assert!(load_image_dataset(dir.path(), &single, 32).unwrap_err().is_validation());
    }
}
