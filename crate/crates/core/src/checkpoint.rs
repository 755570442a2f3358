//! On-disk model state: `manifest.json` plus one little-endian f32 file per
//! parameter, normalization buffer and optimizer moment.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{build_networks, ArchitectureConfig, ModelState, Net, Part};
use crate::nn::AdamConfig;
use crate::tensor::Scalar;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub net: Net,
    pub config: AdamConfig,
    pub step: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub architecture: ArchitectureConfig,
    pub step: u64,
    /// Stored parts making up each network; I and C both list the trunk.
    pub sharing: Vec<(Net, Vec<String>)>,
    pub optimizers: Vec<OptimizerEntry>,
    pub tensors: Vec<TensorEntry>,
}

fn adam_names<T: Scalar>(state: &ModelState<T>, net: Net) -> Vec<(String, Vec<usize>)> {
    net.parts()
        .iter()
        .flat_map(|&p| {
            let s = state.part(p);
            s.param_slices().into_iter().map(|(n, _)| n).zip(s.param_shapes()).collect::<Vec<_>>()
        })
        .collect()
}

fn entries<T: Scalar>(state: &ModelState<T>) -> Vec<(TensorEntry, Vec<f32>)> {
    let mut out = vec![];
    let mut push = |name: String, shape: Vec<usize>, data: &[T]| {
        let file = format!("{name}.f32");
        out.push((
            TensorEntry {
                name,
                shape,
                file,
                offset: 0,
            },
            data.iter().map(|v| v.as_f64() as f32).collect(),
        ));
    };
    for p in Part::ALL {
        let s = state.part(p);
        for ((name, v), shape) in s.param_slices().into_iter().zip(s.param_shapes()) {
            push(name, shape, v);
        }
        for (name, v) in s.buffer_slices() {
            push(name, vec![v.len()], v);
        }
    }
    for net in Net::ALL {
        let adam = state.optimizers.get(net);
        for (i, (name, shape)) in adam_names(state, net).into_iter().enumerate() {
            push(format!("adam.{net:?}.{name}.m"), shape.clone(), &adam.m[i]);
            push(format!("adam.{net:?}.{name}.v"), shape, &adam.v[i]);
        }
    }
    out
}

/// Write the full state into `dir` (created if needed).
pub fn save_checkpoint<T: Scalar>(state: &ModelState<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = vec![];
    for (entry, data) in entries(state) {
        let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.join(&entry.file), bytes)?;
        tensors.push(entry);
    }
    let manifest = Manifest {
        format: FORMAT_VERSION,
        architecture: state.config.clone(),
        step: state.step,
        sharing: Net::ALL
            .iter()
            .map(|&n| (n, n.parts().iter().map(|p| p.name().to_string()).collect()))
            .collect(),
        optimizers: Net::ALL
            .iter()
            .map(|&n| {
                let a = state.optimizers.get(n);
                OptimizerEntry {
                    net: n,
                    config: a.config,
                    step: a.step,
                }
            })
            .collect(),
        tensors,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn read_array(dir: &Path, entry: &TensorEntry) -> Result<Vec<f32>> {
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::load(&path, e.to_string()))?;
    let n: usize = entry.shape.iter().product();
    let start = entry.offset as usize;
    let end = start + 4 * n;
    if bytes.len() < end {
        return Err(Error::load(
            &path,
            format!("truncated: {} bytes, need {end} for shape {:?}", bytes.len(), entry.shape),
        ));
    }
    Ok(bytes[start..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Restore a state written by [`save_checkpoint`]. Every stored array must be
/// present with exactly the shape the architecture implies.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<ModelState<T>> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::load(&mpath, e.to_string()))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::load(&mpath, e.to_string()))?;
    if manifest.format != FORMAT_VERSION {
        return Err(Error::load(&mpath, format!("unsupported format {}", manifest.format)));
    }
    let mut state: ModelState<T> =
        build_networks(&manifest.architecture, AdamConfig::default(), &mut ChaCha8Rng::seed_from_u64(0))?;
    state.step = manifest.step;

    let stored: HashMap<&str, &TensorEntry> = manifest.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    let expected = entries(&state);
    let mut values: HashMap<String, Vec<T>> = HashMap::new();
    for (want, _) in &expected {
        let got = stored
            .get(want.name.as_str())
            .ok_or_else(|| Error::load(&mpath, format!("missing tensor {}", want.name)))?;
        if got.shape != want.shape {
            return Err(Error::load(
                &mpath,
                format!("tensor {} has shape {:?}, expected {:?}", want.name, got.shape, want.shape),
            ));
        }
        let data = read_array(dir, got)?;
        values.insert(want.name.clone(), data.into_iter().map(|v| T::from_f64c(v as f64)).collect());
    }
    if stored.len() != expected.len() {
        return Err(Error::load(&mpath, "manifest lists tensors the architecture does not have"));
    }

    let mut take = |name: &str| values.remove(name).expect("checked above");
    for p in Part::ALL {
        let names: Vec<String> = state.part(p).param_slices().into_iter().map(|(n, _)| n).collect();
        for (dst, name) in state.part_mut(p).params_mut().into_iter().zip(&names) {
            *dst = take(name);
        }
        let names: Vec<String> = state.part(p).buffer_slices().into_iter().map(|(n, _)| n).collect();
        for (dst, name) in state.part_mut(p).buffers_mut().into_iter().zip(&names) {
            *dst = take(name);
        }
    }
    for net in Net::ALL {
        let names = adam_names(&state, net);
        let adam = state.optimizers.get_mut(net);
        for (i, (name, _)) in names.into_iter().enumerate() {
            adam.m[i] = take(&format!("adam.{net:?}.{name}.m"));
            adam.v[i] = take(&format!("adam.{net:?}.{name}.v"));
        }
        if let Some(o) = manifest.optimizers.iter().find(|o| o.net == net) {
            adam.config = o.config;
            adam.step = o.step;
        }
    }
    Ok(state)
}
