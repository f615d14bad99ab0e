//! On-disk cache for teacher encoder features.
//!
//! Layout: `<root>/<hex key>.tensor`, one tensor per entry in the standard
//! serialization format. Writes go through a temp file and rename so
//! concurrent readers never observe a partial entry.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::rng::fnv1a64;
use crate::tensor::{load_tensor, save_tensor};
use crate::Tensor;

/// Content-hash key over an image id and a preprocessing fingerprint.
pub fn cache_key(image_id: &str, preprocess_fingerprint: &str) -> String {
    let mut bytes = Vec::with_capacity(image_id.len() + preprocess_fingerprint.len() + 1);
    bytes.extend_from_slice(image_id.as_bytes());
    bytes.push(b'|');
    bytes.extend_from_slice(preprocess_fingerprint.as_bytes());
    format!("{:016x}", fnv1a64(&bytes))
}

pub struct TeacherCache {
    root: PathBuf,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl TeacherCache {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(root.display().to_string(), e))?;
        Ok(TeacherCache {
            root,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    fn entry_path(&self, key: &str) -> PathBuf {
        self.root.join(format!("{key}.tensor"))
    }

    pub fn put(&self, key: &str, value: &Tensor) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: format!("cache put {key}"),
            });
        }
        let final_path = self.entry_path(key);
        let tmp_path = self.root.join(format!("{key}.tmp"));
        save_tensor(value, &tmp_path)?;
        std::fs::rename(&tmp_path, &final_path)
            .map_err(|e| Error::io(final_path.display().to_string(), e))
    }

    /// Reads an entry; a corrupt file reads as a miss after a warning.
    pub fn get(&self, key: &str) -> Option<Tensor> {
        let path = self.entry_path(key);
        if !path.exists() {
            return None;
        }
        match load_tensor(&path) {
            Ok(t) => Some(t),
            Err(e) => {
                eprintln!(
                    "warning: corrupt teacher-cache entry {} ({e}); recomputing",
                    path.display()
                );
                None
            }
        }
    }

    /// Cache-through read: hits return the stored tensor bit-identically,
    /// misses run `compute` and store the result.
    pub fn get_or_compute(
        &self,
        key: &str,
        compute: impl FnOnce() -> Result<Tensor>,
    ) -> Result<Tensor> {
        if let Some(t) = self.get(key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(t);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let t = compute()?;
        self.put(key, &t)?;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tmp_cache() -> (tempfile::TempDir, TeacherCache) {
        let dir = tempfile::tempdir().unwrap();
        let cache = TeacherCache::new(dir.path().join("cache")).unwrap();
        (dir, cache)
    }

    #[test]
    fn put_get_is_bit_identical() {
        let (_dir, cache) = tmp_cache();
        let t = Tensor::from_vec(vec![2, 2], vec![1.0, -0.0, 1e-300, 3.5]).unwrap();
        cache.put("abc", &t).unwrap();
        let back = cache.get("abc").unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn cold_key_takes_the_compute_path() {
        let (_dir, cache) = tmp_cache();
        let computed = std::cell::Cell::new(0);
        let t = cache
            .get_or_compute("k", || {
                computed.set(computed.get() + 1);
                Ok(Tensor::ones(&[3]))
            })
            .unwrap();
        assert_eq!(computed.get(), 1);
        assert_eq!(t.data(), &[1.0, 1.0, 1.0]);
        assert_eq!(cache.misses(), 1);
        let _ = cache.get_or_compute("k", || unreachable!()).unwrap();
        assert_eq!(cache.hits(), 1);
    }

    #[test]
    fn corrupt_entry_recomputes_and_overwrites() {
        let (_dir, cache) = tmp_cache();
        let path = cache.root().join("bad.tensor");
        std::fs::write(&path, b"{\"shape\":[4],\"dtype\":\"f64\"}\nshort").unwrap();
        let t = cache
            .get_or_compute("bad", || Ok(Tensor::full(&[4], 2.0)))
            .unwrap();
        assert_eq!(t.data(), &[2.0; 4]);
        // Entry was overwritten with the recomputed tensor.
        let back = cache.get("bad").unwrap();
        assert_eq!(back.data(), &[2.0; 4]);
    }

    #[test]
    fn hit_rate_matches_replay_oracle() {
        let (_dir, cache) = tmp_cache();
        let mut rng = crate::rng::substream(42, "cache-replay");
        let mut seen = std::collections::HashSet::new();
        let mut expect_hits = 0u64;
        let mut expect_misses = 0u64;
        for _ in 0..100 {
            let key = format!("k{}", rng.gen_range(0..17));
            if seen.contains(&key) {
                expect_hits += 1;
            } else {
                expect_misses += 1;
                seen.insert(key.clone());
            }
            let _ = cache
                .get_or_compute(&key, || Ok(Tensor::ones(&[1])))
                .unwrap();
        }
        assert_eq!(cache.hits(), expect_hits);
        assert_eq!(cache.misses(), expect_misses);
    }

    #[test]
    fn keys_are_stable_and_distinct() {
        let a = cache_key("scene_000", "cfg-v1");
        let b = cache_key("scene_000", "cfg-v1");
        let c = cache_key("scene_001", "cfg-v1");
        let d = cache_key("scene_000", "cfg-v2");
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        assert_eq!(a.len(), 16);
    }
}
