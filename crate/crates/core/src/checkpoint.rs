//! Checkpoint directories: `manifest.json` plus one raw little-endian `f32`
//! blob per tensor.
//!
//! Parameters live at `params/<dotted.name>.f32`, e.g.
//! `params/denoiser.enc_a.lora_down.f32`; optimiser moments at
//! `optim/<optimizer>/<dotted.name>.m.f32` and `.v.f32`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::models::Models;
use crate::nn::{AdamW, AdamWConfig};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    #[serde(default)]
    pub trainable: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub config: AdamWConfig,
    pub step: u64,
    pub moments: Vec<MomentEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MomentEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub m: String,
    pub v: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub stage: String,
    pub step: u64,
    pub t_star: Option<usize>,
    pub latent_scale: f64,
    pub adapters: bool,
    pub config: Config,
    pub params: Vec<TensorEntry>,
    pub optimizers: BTreeMap<String, OptimizerEntry>,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct CheckpointBundle {
    pub config: Config,
    pub models: Models,
    pub stage: String,
    pub step: u64,
    pub t_star: Option<usize>,
    pub optimizers: BTreeMap<String, AdamW>,
}

fn write_blob(path: &Path, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.len() * 4);
    for &v in t.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_blob(path: &Path, shape: &[usize]) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::Checkpoint(format!(
            "{} holds {} bytes, expected {} for shape {shape:?}",
            path.display(),
            bytes.len(),
            n * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::from_vec(shape, data)
}

impl CheckpointBundle {
    pub fn new(config: Config, models: Models, stage: impl Into<String>) -> Self {
        Self {
            config,
            models,
            stage: stage.into(),
            step: 0,
            t_star: None,
            optimizers: BTreeMap::new(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let pdir = dir.join("params");
        fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
        let mut params = Vec::new();
        for e in self.models.store.entries() {
            let file = format!("params/{}.f32", e.name);
            write_blob(&dir.join(&file), &e.value)?;
            params.push(TensorEntry {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                file,
                trainable: e.trainable,
            });
        }
        let mut optimizers = BTreeMap::new();
        for (key, opt) in &self.optimizers {
            let odir = dir.join("optim").join(key);
            fs::create_dir_all(&odir).map_err(|e| Error::io(&odir, e))?;
            let mut moments = Vec::new();
            for (name, (m, v)) in opt.moments() {
                let mf = format!("optim/{key}/{name}.m.f32");
                let vf = format!("optim/{key}/{name}.v.f32");
                write_blob(&dir.join(&mf), m)?;
                write_blob(&dir.join(&vf), v)?;
                moments.push(MomentEntry {
                    name: name.clone(),
                    shape: m.shape().to_vec(),
                    m: mf,
                    v: vf,
                });
            }
            optimizers.insert(
                key.clone(),
                OptimizerEntry {
                    config: opt.config.clone(),
                    step: opt.step,
                    moments,
                },
            );
        }
        let manifest = Manifest {
            format: FORMAT_VERSION,
            stage: self.stage.clone(),
            step: self.step,
            t_star: self.t_star,
            latent_scale: self.models.vae.latent_scale,
            adapters: self.models.has_adapters(),
            config: self.config.clone(),
            params,
            optimizers,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format {}",
                manifest.format
            )));
        }
        manifest.config.validate()?;
        let mut models = Models::new(manifest.config.model.clone(), manifest.config.seed)?;
        if manifest.adapters {
            models.inject_adapters(manifest.config.seed)?;
        }
        if models.store.len() != manifest.params.len() {
            return Err(Error::Checkpoint(format!(
                "manifest lists {} tensors but the configured models have {}",
                manifest.params.len(),
                models.store.len()
            )));
        }
        let mut trainable = BTreeMap::new();
        for entry in &manifest.params {
            let id = models
                .store
                .id(&entry.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{}`", entry.name)))?;
            if models.store.get(id).shape() != entry.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{}`",
                    entry.name
                )));
            }
            models
                .store
                .set_value(id, read_blob(&dir.join(&entry.file), &entry.shape)?)?;
            trainable.insert(entry.name.clone(), entry.trainable);
        }
        models
            .store
            .set_trainable(|n| trainable.get(n).copied().unwrap_or(false));
        models.vae.latent_scale = manifest.latent_scale;

        let mut optimizers = BTreeMap::new();
        for (key, entry) in &manifest.optimizers {
            let mut opt = AdamW::new(entry.config.clone());
            opt.step = entry.step;
            for m in &entry.moments {
                opt.set_moments(
                    m.name.clone(),
                    read_blob(&dir.join(&m.m), &m.shape)?,
                    read_blob(&dir.join(&m.v), &m.shape)?,
                );
            }
            optimizers.insert(key.clone(), opt);
        }
        Ok(Self {
            config: manifest.config,
            models,
            stage: manifest.stage,
            step: manifest.step,
            t_star: manifest.t_star,
            optimizers,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{DenoiserConfig, VaeConfig};
    use crate::nn::Graph;
    use crate::tensor::seeded_rng;

    fn small_config() -> Config {
        let mut c = Config::default();
        c.model.vae = VaeConfig {
            hidden: 8,
            ..VaeConfig::default()
        };
        c.model.denoiser = DenoiserConfig {
            hidden: 8,
            ..DenoiserConfig::default()
        };
        c
    }

    #[test]
    fn round_trip_with_adapters_and_optimizer() {
        let cfg = small_config();
        let mut models = Models::new(cfg.model.clone(), cfg.seed).unwrap();
        models.vae.latent_scale = 0.75;
        models.inject_adapters(cfg.seed).unwrap();
        // One optimiser step so moments and adapter weights are non-trivial.
        let mut opt = AdamW::new(AdamWConfig {
            lr: 1e-2,
            ..AdamWConfig::default()
        });
        let mut g = Graph::new();
        let x = g.constant(Tensor::rand_uniform(
            &[3, 16, 16],
            -1.0,
            1.0,
            &mut seeded_rng(1),
        ));
        let z = models.vae.encode_var(&mut g, &models.store, x, true);
        let l = g.mean(z);
        let grads = g.backward(l);
        opt.update(&mut models.store, grads.params());

        let mut bundle = CheckpointBundle::new(cfg, models, "finetune");
        bundle.step = 17;
        bundle.t_star = Some(195);
        bundle.optimizers.insert("gen".into(), opt);
        let dir = tempfile::tempdir().unwrap();
        bundle.save(dir.path()).unwrap();
        assert!(dir
            .path()
            .join("params/vae.encoder.conv1.lora_down.f32")
            .exists());

        let back = CheckpointBundle::load(dir.path()).unwrap();
        assert_eq!(back.step, 17);
        assert_eq!(back.t_star, Some(195));
        assert_eq!(back.models.vae.latent_scale, 0.75);
        assert_eq!(back.models.store.digest(""), bundle.models.store.digest(""));
        for (a, b) in back
            .models
            .store
            .entries()
            .iter()
            .zip(bundle.models.store.entries())
        {
            assert_eq!(a.name, b.name);
            assert_eq!(a.trainable, b.trainable);
        }
        let (o1, o2) = (&back.optimizers["gen"], &bundle.optimizers["gen"]);
        assert_eq!(o1.step, o2.step);
        assert_eq!(o1.moments(), o2.moments());
    }

    #[test]
    fn corrupt_blob_is_rejected() {
        let cfg = small_config();
        let models = Models::new(cfg.model.clone(), 0).unwrap();
        let bundle = CheckpointBundle::new(cfg, models, "pretrain");
        let dir = tempfile::tempdir().unwrap();
        bundle.save(dir.path()).unwrap();
        fs::write(
            dir.path().join("params/vae.encoder.conv1.bias.f32"),
            [0u8; 3],
        )
        .unwrap();
        assert!(matches!(
            CheckpointBundle::load(dir.path()),
            Err(Error::Checkpoint(_))
        ));
    }
}
