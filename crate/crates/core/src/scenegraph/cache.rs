use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::clients::TemplateId;
use crate::error::{Error, Result};

/// On-disk store for caption bundles and edge labels. Entries are JSON files named by a
/// SHA-256 key over object content, prompt template hashes and client fingerprints.
#[derive(Debug, Clone)]
pub struct GraphCache {
    dir: PathBuf,
}

/// Environment variable naming the cache directory.
pub const CACHE_ENV: &str = "CGMAP_CACHE";

impl GraphCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(GraphCache { dir })
    }

    pub fn from_env() -> Result<Option<Self>> {
        match std::env::var_os(CACHE_ENV) {
            Some(dir) if !dir.is_empty() => GraphCache::new(PathBuf::from(dir)).map(Some),
            _ => Ok(None),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(kind: &str, templates: &[TemplateId], parts: &[&str]) -> String {
        let mut h = Sha256::new();
        h.update(kind.as_bytes());
        for t in templates {
            h.update([0]);
            h.update(t.hash().as_bytes());
        }
        for p in parts {
            h.update([0]);
            h.update(p.as_bytes());
        }
        format!("{kind}-{}", hex::encode(h.finalize()))
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    /// Unreadable or corrupt entries count as misses.
    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Option<T> {
        let bytes = fs::read(self.path(key)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    pub fn put<T: Serialize>(&self, key: &str, value: &T) -> Result<()> {
        let path = self.path(key);
        let tmp = self.dir.join(format!(".{key}.{}.tmp", std::process::id()));
        let bytes = serde_json::to_vec_pretty(value).expect("serializable");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_key_sensitivity() {
        let dir = tempfile::tempdir().unwrap();
        let cache = GraphCache::new(dir.path().join("c")).unwrap();
        let k = GraphCache::key("caption", &[TemplateId::CaptionView], &["abc", "mock"]);
        assert!(cache.get::<Vec<u32>>(&k).is_none());
        cache.put(&k, &vec![1u32, 2]).unwrap();
        assert_eq!(cache.get::<Vec<u32>>(&k), Some(vec![1, 2]));
        assert_ne!(
            k,
            GraphCache::key("caption", &[TemplateId::EdgeRelation], &["abc", "mock"])
        );
        assert_ne!(
            k,
            GraphCache::key("caption", &[TemplateId::CaptionView], &["abd", "mock"])
        );
        assert_ne!(
            GraphCache::key("x", &[], &["ab", "c"]),
            GraphCache::key("x", &[], &["a", "bc"])
        );
        fs::write(cache.path(&k), b"{broken").unwrap();
        assert!(cache.get::<Vec<u32>>(&k).is_none());
    }
}
