//! Named parameter store shared by the adapter, guidance branch, and U-Net:
//! registration, graph binding, gradient harvest, freeze bookkeeping, and
//! the on-disk checkpoint layout (HDT1 tensors + JSON metadata).

use crate::autodiff::{Graph, Val};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::hdt1;
use crate::tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs;
use std::path::Path;

/// Learning-rate group: adapter/guidance parameters train an order of
/// magnitude faster than unfrozen backbone blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrGroup {
    Guidance,
    Backbone,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

pub struct ParamEntry<E: Element> {
    pub name: String,
    pub value: Tensor<E>,
    pub grad: Vec<E>,
    pub adam_m: Vec<E>,
    pub adam_v: Vec<E>,
    pub frozen: bool,
    pub group: LrGroup,
    /// Set when a gradient was harvested since the last zero_grads.
    pub touched: bool,
}

pub struct ParamStore<E: Element> {
    entries: Vec<ParamEntry<E>>,
    index: HashMap<String, usize>,
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<E>, group: LrGroup) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let n = value.numel();
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value,
            grad: vec![E::ZERO; n],
            adam_m: vec![E::ZERO; n],
            adam_v: vec![E::ZERO; n],
            frozen: false,
            group,
            touched: false,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<E> {
        &self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<E> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<E>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<E>] {
        &mut self.entries
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<E>) {
        assert_eq!(self.entries[id.0].value.shape(), value.shape());
        self.entries[id.0].value = value;
    }

    /// Freeze/unfreeze every parameter whose name starts with `prefix`.
    pub fn set_frozen_by_prefix(&mut self, prefix: &str, frozen: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.frozen = frozen;
            }
        }
    }

    pub fn freeze_all(&mut self) {
        for e in &mut self.entries {
            e.frozen = true;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(E::ZERO);
            e.touched = false;
        }
    }

    /// Bytes of every parameter matching a predicate, for freeze audits.
    pub fn digest_where(&self, pred: impl Fn(&ParamEntry<E>) -> bool) -> Vec<u8> {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for e in &self.entries {
            if pred(e) {
                hasher.update(e.name.as_bytes());
                let mut buf = Vec::with_capacity(e.value.numel() * 8);
                for &v in e.value.data() {
                    v.to_le_bytes(&mut buf);
                }
                hasher.update(&buf);
            }
        }
        hasher.finalize().to_vec()
    }
}

/// Caches graph bindings of parameters so each is inserted as a leaf once
/// per graph, and routes harvested gradients back into the store.
pub struct Binder {
    bound: HashMap<usize, Val>,
    /// Bind everything as constants (sampling / evaluation mode).
    pub inference: bool,
}

impl Binder {
    pub fn new() -> Self {
        Binder {
            bound: HashMap::new(),
            inference: false,
        }
    }

    pub fn inference() -> Self {
        Binder {
            bound: HashMap::new(),
            inference: true,
        }
    }

    pub fn bind<E: Element>(
        &mut self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        id: ParamId,
    ) -> Val {
        if let Some(v) = self.bound.get(&id.0) {
            return *v;
        }
        let e = &store.entries[id.0];
        let mut t = e.value.clone();
        t.requires_grad = !e.frozen && !self.inference;
        let v = g.leaf(t);
        self.bound.insert(id.0, v);
        v
    }

    /// Add the graph's accumulated leaf gradients into the store.
    pub fn harvest<E: Element>(&self, g: &Graph<E>, store: &mut ParamStore<E>) {
        let mut ids: Vec<(usize, Val)> = self.bound.iter().map(|(i, v)| (*i, *v)).collect();
        ids.sort_by_key(|(i, _)| *i);
        for (i, v) in ids {
            if let Some(grad) = g.grad(v) {
                let e = &mut store.entries[i];
                for (a, d) in e.grad.iter_mut().zip(grad.iter()) {
                    *a += *d;
                }
                e.touched = true;
            }
        }
    }
}

impl Default for Binder {
    fn default() -> Self {
        Self::new()
    }
}

// ── checkpoints ─────────────────────────────────────────────────────

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct CheckpointMeta {
    pub stage: String,
    pub step: usize,
    pub config_hash: String,
    pub seed: u64,
    pub params: Vec<String>,
}

pub fn save_checkpoint<E: Element>(
    dir: &Path,
    store: &ParamStore<E>,
    cfg: &RunConfig,
    stage: &str,
    step: usize,
) -> Result<()> {
    let pdir = dir.join("params");
    let odir = dir.join("optim");
    for d in [dir, &pdir, &odir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d.display().to_string(), e))?;
    }
    for e in &store.entries {
        hdt1::write(pdir.join(format!("{}.hdt1", e.name)), &e.value)?;
        if !e.frozen {
            let shape = e.value.shape().to_vec();
            hdt1::write(
                odir.join(format!("{}.m.hdt1", e.name)),
                &Tensor::from_vec(shape.clone(), e.adam_m.clone())?,
            )?;
            hdt1::write(
                odir.join(format!("{}.v.hdt1", e.name)),
                &Tensor::from_vec(shape, e.adam_v.clone())?,
            )?;
        }
    }
    let meta = CheckpointMeta {
        stage: stage.to_string(),
        step,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        params: store.entries.iter().map(|e| e.name.clone()).collect(),
    };
    let meta_path = dir.join("meta.json");
    fs::write(
        &meta_path,
        serde_json::to_string_pretty(&meta).expect("meta serializes"),
    )
    .map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    let cfg_path = dir.join("config.json");
    fs::write(&cfg_path, cfg.to_json_pretty())
        .map_err(|e| Error::io(cfg_path.display().to_string(), e))
}

pub fn read_checkpoint_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

pub fn read_checkpoint_config(dir: &Path) -> Result<RunConfig> {
    let path = dir.join("config.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    RunConfig::from_json(&text, &path.display().to_string())
}

/// Overwrite an initialized store's values (and optimizer state, when
/// present) from a checkpoint directory. Shapes must match the store; a
/// missing or malformed tensor file is an integrity error naming the file.
pub fn load_checkpoint_into<E: Element>(dir: &Path, store: &mut ParamStore<E>) -> Result<()> {
    let meta = read_checkpoint_meta(dir)?;
    if meta.params.len() != store.len() {
        return Err(Error::Integrity(format!(
            "{}: checkpoint has {} params, model expects {}",
            dir.display(),
            meta.params.len(),
            store.len()
        )));
    }
    for e in &mut store.entries {
        let path = dir.join("params").join(format!("{}.hdt1", e.name));
        let t: Tensor<E> = hdt1::read(&path)?;
        if t.shape() != e.value.shape() {
            return Err(Error::Integrity(format!(
                "{}: shape {:?} does not match expected {:?}",
                path.display(),
                t.shape(),
                e.value.shape()
            )));
        }
        e.value = t;
        let mpath = dir.join("optim").join(format!("{}.m.hdt1", e.name));
        if mpath.exists() {
            e.adam_m = hdt1::read::<E>(&mpath)?.into_data();
            e.adam_v = hdt1::read::<E>(dir.join("optim").join(format!("{}.v.hdt1", e.name)))?
                .into_data();
        }
    }
    Ok(())
}

// ── AdamW ───────────────────────────────────────────────────────────

pub struct AdamW {
    pub lr_guidance: f64,
    pub lr_backbone: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    /// global step counter (1-based after first call)
    pub t: usize,
}

impl AdamW {
    pub fn from_config(cfg: &RunConfig) -> Self {
        AdamW {
            lr_guidance: cfg.train.lr_guidance,
            lr_backbone: cfg.train.lr_backbone,
            beta1: cfg.train.adam_beta1,
            beta2: cfg.train.adam_beta2,
            weight_decay: cfg.train.weight_decay,
            eps: 1e-8,
            t: 0,
        }
    }

    /// One decoupled-weight-decay update over every touched, unfrozen entry.
    pub fn step<E: Element>(&mut self, store: &mut ParamStore<E>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for e in store.entries_mut() {
            if e.frozen || !e.touched {
                continue;
            }
            let lr = match e.group {
                LrGroup::Guidance => self.lr_guidance,
                LrGroup::Backbone => self.lr_backbone,
            };
            let (b1, b2) = (E::from_f64(self.beta1), E::from_f64(self.beta2));
            let one = E::ONE;
            let decay = E::from_f64(1.0 - lr * self.weight_decay);
            let step_scale = E::from_f64(lr / bc1);
            let bc2_e = E::from_f64(bc2);
            let eps = E::from_f64(self.eps);
            for i in 0..e.grad.len() {
                let g = e.grad[i];
                e.adam_m[i] = b1 * e.adam_m[i] + (one - b1) * g;
                e.adam_v[i] = b2 * e.adam_v[i] + (one - b2) * g * g;
                let vhat = (e.adam_v[i] / bc2_e).sqrt() + eps;
                let p = e.value.data()[i] * decay - step_scale * e.adam_m[i] / vhat;
                e.value.data_mut()[i] = p;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binder_caches_and_harvests() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let p = store.register("w", Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap(), LrGroup::Guidance);
        let mut g = Graph::new();
        let mut b = Binder::new();
        let v1 = b.bind(&mut g, &store, p);
        let v2 = b.bind(&mut g, &store, p);
        assert_eq!(v1, v2);
        let s = g.sum(v1).unwrap();
        g.backward(s).unwrap();
        b.harvest(&g, &mut store);
        assert_eq!(store.entry(p).grad, vec![1.0, 1.0]);
        assert!(store.entry(p).touched);
    }

    #[test]
    fn frozen_params_bind_as_constants() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let p = store.register("w", Tensor::from_vec(vec![1], vec![3.0]).unwrap(), LrGroup::Backbone);
        store.set_frozen_by_prefix("w", true);
        let mut g = Graph::new();
        let mut b = Binder::new();
        let v = b.bind(&mut g, &store, p);
        assert!(!g.needs_grad(v));
    }

    #[test]
    fn adamw_moves_touched_params_only() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let p0 = store.register("a", Tensor::scalar(1.0), LrGroup::Guidance);
        let p1 = store.register("b", Tensor::scalar(1.0), LrGroup::Guidance);
        store.entries_mut()[0].grad = vec![0.5];
        store.entries_mut()[0].touched = true;
        let mut opt = AdamW {
            lr_guidance: 0.1,
            lr_backbone: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            eps: 1e-8,
            t: 0,
        };
        opt.step(&mut store);
        assert!(store.value(p0).item() < 1.0);
        assert_eq!(store.value(p1).item(), 1.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let mut store: ParamStore<f32> = ParamStore::new();
        store.register("x.w", Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), LrGroup::Guidance);
        store.register("y.b", Tensor::from_vec(vec![3], vec![0.5, 0.25, -1.0]).unwrap(), LrGroup::Backbone);
        store.entries_mut()[0].adam_m = vec![0.1; 4];
        save_checkpoint(tmp.path(), &store, &cfg, "a", 7).unwrap();

        let mut store2: ParamStore<f32> = ParamStore::new();
        store2.register("x.w", Tensor::zeros(vec![2, 2]), LrGroup::Guidance);
        store2.register("y.b", Tensor::zeros(vec![3]), LrGroup::Backbone);
        load_checkpoint_into(tmp.path(), &mut store2).unwrap();
        assert_eq!(store2.entries()[0].value.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(store2.entries()[0].adam_m, vec![0.1; 4]);
        let meta = read_checkpoint_meta(tmp.path()).unwrap();
        assert_eq!(meta.step, 7);
        assert_eq!(meta.config_hash, cfg.hash());
    }

    #[test]
    fn corrupt_checkpoint_names_the_failing_file() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let mut store: ParamStore<f32> = ParamStore::new();
        store.register("x.w", Tensor::zeros(vec![2]), LrGroup::Guidance);
        save_checkpoint(tmp.path(), &store, &cfg, "a", 0).unwrap();
        std::fs::write(tmp.path().join("params/x.w.hdt1"), b"garbage").unwrap();
        let err = load_checkpoint_into(tmp.path(), &mut store).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("x.w.hdt1"), "message should name the file: {msg}");
    }
}
