use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Grads, Graph};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// `base · decay^(epoch / every)`.
pub fn lr_at_epoch(base: f64, epoch: usize, decay: f64, every: usize) -> f64 {
    base * decay.powi((epoch / every.max(1)) as i32)
}

/// Named trainable tensors with Adam moments.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Vec<f64>>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    index: HashMap<String, ParamId>,
    step: u64,
    seed: u64,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestParam {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    seed: u64,
    epoch: usize,
    step: u64,
    params: Vec<ManifestParam>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
            index: HashMap::new(),
            step: 0,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        let n = value.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.grads.push(vec![0.0; n]);
        self.m.push(vec![0.0; n]);
        self.v.push(vec![0.0; n]);
        self.index.insert(name.to_string(), id);
        id
    }

    /// Uniform in `±1/√fan_in`, drawn from the store's seeded stream.
    pub fn add_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor::from_vec(shape, data))
    }

    pub fn add_const(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        self.add(name, Tensor::full(shape, v))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v = 0.0));
    }

    /// Adds the gradients of every parameter used in `g`.
    pub fn accumulate(&mut self, g: &Graph, grads: &Grads) {
        for (id, var) in g.param_vars() {
            if let Some(d) = grads.wrt(var) {
                self.grads[id.0].iter_mut().zip(d).for_each(|(a, b)| *a += b);
            }
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.grads.iter().flatten().all(|v| v.is_finite())
    }

    /// One bias-corrected Adam update from the accumulated gradients.
    pub fn adam_step(&mut self, lr: f64, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..self.values.len() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &self.grads[i]);
            for (j, p) in self.values[i].data.iter_mut().enumerate() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *p -= lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
    }

    /// Writes `manifest.json` plus one little-endian `f64` blob per parameter.
    pub fn save(&self, dir: &Path, epoch: usize) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut params = Vec::with_capacity(self.values.len());
        for (i, (name, t)) in self.names.iter().zip(&self.values).enumerate() {
            let file = format!("p{i:04}.bin");
            let bytes: Vec<u8> = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            let path = dir.join(&file);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            params.push(ManifestParam { name: name.clone(), shape: t.shape.clone(), file });
        }
        let manifest = CheckpointManifest { seed: self.seed, epoch, step: self.step, params };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    /// Overwrites parameter values from a checkpoint written by [`save`].
    /// Every stored parameter must exist here with the same shape.
    ///
    /// [`save`]: ParamStore::save
    pub fn load(&mut self, dir: &Path) -> Result<usize> {
        let path = dir.join("manifest.json");
        if !path.exists() {
            return Err(Error::MissingPath(path));
        }
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CheckpointManifest = serde_json::from_slice(&text)?;
        if manifest.params.len() != self.values.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model has {}",
                manifest.params.len(),
                self.values.len()
            )));
        }
        for p in &manifest.params {
            let id = self
                .id(&p.name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {}", p.name)))?;
            if self.values[id.0].shape != p.shape {
                return Err(Error::Format(format!("shape mismatch for {}", p.name)));
            }
            let blob_path = dir.join(&p.file);
            let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
            if bytes.len() != 8 * self.values[id.0].len() {
                return Err(Error::Format(format!("blob size mismatch for {}", p.name)));
            }
            for (dst, b) in self.values[id.0].data.iter_mut().zip(bytes.chunks_exact(8)) {
                *dst = f64::from_le_bytes(b.try_into().unwrap());
            }
        }
        self.step = manifest.step;
        Ok(manifest.epoch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_init() {
        let mut a = ParamStore::new(7);
        let mut b = ParamStore::new(7);
        let pa = a.add_uniform("w", &[4, 3], 4);
        let pb = b.add_uniform("w", &[4, 3], 4);
        assert_eq!(a.value(pa), b.value(pb));
        assert!(a.value(pa).data.iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn adam_zero_grad_is_noop() {
        let mut s = ParamStore::new(1);
        let p = s.add_uniform("w", &[5], 5);
        let before = s.value(p).clone();
        s.adam_step(1e-3, &AdamConfig::default());
        assert_eq!(s.value(p), &before);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = ParamStore::new(1);
        let p = s.add_const("w", &[3], 0.0);
        s.grads[p.0] = vec![0.5, -2.0, 7.0];
        s.adam_step(1e-3, &AdamConfig::default());
        for (v, sign) in s.value(p).data.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((v - sign * 1e-3).abs() < 1e-9);
        }
    }

    #[test]
    fn schedule() {
        assert_eq!(lr_at_epoch(1e-3, 0, 0.8, 10), 1e-3);
        assert_eq!(lr_at_epoch(1e-3, 9, 0.8, 10), 1e-3);
        assert!((lr_at_epoch(1e-3, 10, 0.8, 10) - 8e-4).abs() < 1e-18);
        assert!((lr_at_epoch(1e-5, 25, 0.8, 10) - 1e-5 * 0.64).abs() < 1e-18);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::new(3);
        s.add_uniform("a.w", &[2, 3], 2);
        s.add_uniform("a.b", &[3], 2);
        s.save(dir.path(), 4).unwrap();
        let mut t = ParamStore::new(99);
        t.add_const("a.w", &[2, 3], 0.0);
        t.add_const("a.b", &[3], 0.0);
        assert_eq!(t.load(dir.path()).unwrap(), 4);
        for id in s.ids() {
            assert_eq!(s.value(id), t.value(id));
        }
        let mut bad = ParamStore::new(0);
        bad.add_const("a.w", &[3, 2], 0.0);
        bad.add_const("a.b", &[3], 0.0);
        assert!(bad.load(dir.path()).is_err());
    }
}
