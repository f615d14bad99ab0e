//! Checkpoint directories: one tensor file per parameter (and per optimizer
//! moment / EMA copy) beside a JSON manifest with per-parameter digests, so
//! freezing checks can compare hashes across stages.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamStore, Student};
use crate::optim::AdamState;
use crate::rng::fnv1a64;
use crate::tensor::{load_tensor, save_tensor};
use crate::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub file: String,
    pub fnv64: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub stage: u8,
    pub step: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub params: Vec<ParamRecord>,
    pub opt_step: Option<u64>,
    pub has_ema: bool,
}

pub fn tensor_hash(t: &Tensor) -> u64 {
    let mut bytes = Vec::with_capacity(t.numel() * 8 + t.shape().len() * 8);
    for &d in t.shape() {
        bytes.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fnv1a64(&bytes)
}

fn write_store(store: &ParamStore, dir: &Path) -> Result<Vec<ParamRecord>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut records = Vec::new();
    for (name, t) in store.iter() {
        let file = format!("{name}.tensor");
        save_tensor(t, &dir.join(&file))?;
        records.push(ParamRecord {
            name: name.clone(),
            file,
            fnv64: format!("{:016x}", tensor_hash(t)),
        });
    }
    Ok(records)
}

fn read_store(records: &[ParamRecord], dir: &Path) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for rec in records {
        let t = load_tensor(&dir.join(&rec.file))?;
        store.insert(&rec.name, t);
    }
    Ok(store)
}

/// Like `read_store` but tolerates missing files; optimizer moments exist
/// only for parameters that have received gradients.
fn read_store_partial(records: &[ParamRecord], dir: &Path) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for rec in records {
        let path = dir.join(&rec.file);
        if path.exists() {
            store.insert(&rec.name, load_tensor(&path)?);
        }
    }
    Ok(store)
}

fn moments_to_store(m: &std::collections::BTreeMap<String, Vec<f64>>, params: &ParamStore) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, data) in m {
        let shape = params.get(name)?.shape().to_vec();
        store.insert(name, Tensor::from_vec(shape, data.clone())?);
    }
    Ok(store)
}

pub fn save_checkpoint(
    dir: &Path,
    student: &Student,
    opt: Option<&AdamState>,
    ema: Option<&ParamStore>,
    stage: u8,
    step: usize,
    seed: u64,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let params = write_store(&student.params, &dir.join("params"))?;
    let mut opt_step = None;
    if let Some(state) = opt {
        write_store(&moments_to_store(&state.m, &student.params)?, &dir.join("opt_m"))?;
        write_store(&moments_to_store(&state.v, &student.params)?, &dir.join("opt_v"))?;
        opt_step = Some(state.t);
    }
    if let Some(e) = ema {
        write_store(e, &dir.join("ema"))?;
    }
    let meta = CheckpointMeta {
        version: 1,
        stage,
        step,
        seed,
        model: student.cfg.clone(),
        params,
        opt_step,
        has_ema: ema.is_some(),
    };
    let path = dir.join(MANIFEST_FILE);
    let f = std::fs::File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::to_writer_pretty(f, &meta)?;
    Ok(())
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub student: Student,
    pub opt: Option<AdamState>,
    pub ema: Option<ParamStore>,
    pub meta: CheckpointMeta,
}

pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    let path = dir.join(MANIFEST_FILE);
    let f = std::fs::File::open(&path).map_err(|e| {
        Error::Precondition(format!("checkpoint manifest missing at {}: {e}", path.display()))
    })?;
    let meta: CheckpointMeta = serde_json::from_reader(f)?;
    let params = read_store(&meta.params, &dir.join("params"))?;
    let student = Student {
        cfg: meta.model.clone(),
        params,
    };
    let opt = if let Some(t) = meta.opt_step {
        let m_store = read_store_partial(&meta.params, &dir.join("opt_m"))?;
        let v_store = read_store_partial(&meta.params, &dir.join("opt_v"))?;
        let mut state = AdamState { t, ..Default::default() };
        for (name, tensor) in m_store.iter() {
            state.m.insert(name.clone(), tensor.data().to_vec());
        }
        for (name, tensor) in v_store.iter() {
            state.v.insert(name.clone(), tensor.data().to_vec());
        }
        Some(state)
    } else {
        None
    };
    let ema = if meta.has_ema {
        Some(read_store(&meta.params, &dir.join("ema"))?)
    } else {
        None
    };
    Ok(LoadedCheckpoint {
        student,
        opt,
        ema,
        meta,
    })
}

/// Digest of each module group, for frozen-parameter checks.
pub fn group_hashes(store: &ParamStore) -> Vec<(String, u64)> {
    store
        .modules()
        .into_iter()
        .map(|m| {
            let h = store.group_hash(&m);
            (m, h)
        })
        .collect()
}

pub fn checkpoint_path(out_dir: &Path, tag: &str) -> PathBuf {
    out_dir.join(format!("checkpoint_{tag}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn toy_student(seed: u64) -> Student {
        let cfg = ModelConfig {
            image_h: 32,
            image_w: 32,
            enc_widths: [2, 2, 2, 4],
            teacher_widths: [2, 2, 4, 8],
            feat_c: 8,
            dk: 4,
            hidden: 8,
            latents: crate::model::LatentConfig { k: 4, k_global: 2, grid: 1 },
            ..Default::default()
        };
        Student::new(cfg, seed).unwrap()
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let student = toy_student(42);
        let mut opt = AdamState::default();
        opt.t = 7;
        opt.m.insert(
            "dec.mask_tok".to_string(),
            vec![0.5; student.params.get("dec.mask_tok").unwrap().numel()],
        );
        opt.v.insert(
            "dec.mask_tok".to_string(),
            vec![0.25; student.params.get("dec.mask_tok").unwrap().numel()],
        );
        let ema = student.params.clone();
        save_checkpoint(dir.path(), &student, Some(&opt), Some(&ema), 1, 123, 42).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.meta.stage, 1);
        assert_eq!(loaded.meta.step, 123);
        assert_eq!(loaded.meta.opt_step, Some(7));
        for (name, t) in student.params.iter() {
            let l = loaded.student.params.get(name).unwrap();
            assert_eq!(t.data(), l.data(), "{name}");
        }
        let lopt = loaded.opt.unwrap();
        assert_eq!(lopt.t, 7);
        assert_eq!(lopt.m["dec.mask_tok"], opt.m["dec.mask_tok"]);
        let lema = loaded.ema.unwrap();
        assert_eq!(
            lema.get("enc.conv0.w").unwrap().data(),
            ema.get("enc.conv0.w").unwrap().data()
        );
    }

    #[test]
    fn group_hashes_detect_changes() {
        let mut student = toy_student(1);
        let before = group_hashes(&student.params);
        student
            .params
            .get_mut("dec.mask_tok")
            .unwrap()
            .data_mut()[0] += 1.0;
        let after = group_hashes(&student.params);
        let changed: Vec<&String> = before
            .iter()
            .zip(&after)
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, _)| &a.0)
            .collect();
        assert_eq!(changed, vec!["dec"]);
    }

    #[test]
    fn missing_checkpoint_is_a_precondition_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_checkpoint(&dir.path().join("nope")).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }
}
