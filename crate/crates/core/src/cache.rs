//! Captured activations keyed by `(site, position)`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{read_container, write_container, HookSite, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor2D;

pub const CACHE_MAGIC: &[u8; 8] = b"PLABCCH1";

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCache<T> {
    entries: BTreeMap<(HookSite, usize), Vec<T>>,
    token_len: usize,
    model_fingerprint: String,
    last_logits: Option<Vec<T>>,
}

impl<T: Scalar> ActivationCache<T> {
    pub fn new(token_len: usize, model_fingerprint: String) -> Self {
        Self { entries: BTreeMap::new(), token_len, model_fingerprint, last_logits: None }
    }

    /// Stores a vector after checking its position and width.
    pub fn insert(&mut self, config: &ModelConfig, site: HookSite, position: usize, v: Vec<T>) -> Result<()> {
        site.validate(config)?;
        if position >= self.token_len {
            return Err(Error::Input(format!("position {position} out of range for {} tokens", self.token_len)));
        }
        let want = site.width(config, self.token_len);
        if v.len() != want {
            return Err(Error::Shape(format!("{site} at {position}: vector of length {} expected {want}", v.len())));
        }
        self.entries.insert((site, position), v);
        Ok(())
    }

    pub(crate) fn insert_unchecked(&mut self, site: HookSite, position: usize, v: Vec<T>) {
        self.entries.insert((site, position), v);
    }

    pub fn get(&self, site: HookSite, position: usize) -> Option<&[T]> {
        self.entries.get(&(site, position)).map(Vec::as_slice)
    }

    pub fn require(&self, site: HookSite, position: usize) -> Result<&[T]> {
        self.get(site, position).ok_or_else(|| Error::CacheMiss(format!("{site} at position {position}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn token_len(&self) -> usize {
        self.token_len
    }

    pub fn model_fingerprint(&self) -> &str {
        &self.model_fingerprint
    }

    /// Last-position logits of the run that produced this cache.
    pub fn last_logits(&self) -> Option<&[T]> {
        self.last_logits.as_deref()
    }

    pub(crate) fn set_last_logits(&mut self, logits: Vec<T>) {
        self.last_logits = Some(logits);
    }

    pub fn sites(&self) -> BTreeSet<HookSite> {
        self.entries.keys().map(|(s, _)| *s).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (HookSite, usize, &[T])> {
        self.entries.iter().map(|((s, p), v)| (*s, *p, v.as_slice()))
    }

    pub fn check_fingerprint(&self, fingerprint: &str) -> Result<()> {
        if self.model_fingerprint == fingerprint {
            Ok(())
        } else {
            Err(Error::Fingerprint { cache: self.model_fingerprint.clone(), model: fingerprint.to_string() })
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    token_len: usize,
    model_fingerprint: String,
}

impl ActivationCache<f32> {
    /// Spills to the cache container format. Tensor names are
    /// `<site>.<position>` (e.g. `mlp_out.3.12`, `head_out.1.2.7`); the last
    /// logits, when present, are stored as `logits.last`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::with_capacity(self.entries.len() + 1);
        for ((site, pos), v) in &self.entries {
            tensors.push((format!("{site}.{pos}"), Tensor2D::new(1, v.len(), v.clone())?));
        }
        if let Some(l) = &self.last_logits {
            tensors.push(("logits.last".to_string(), Tensor2D::new(1, l.len(), l.clone())?));
        }
        let header = serde_json::to_value(CacheHeader {
            token_len: self.token_len,
            model_fingerprint: self.model_fingerprint.clone(),
        })?;
        write_container(path, CACHE_MAGIC, header, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, tensors) = read_container(path, CACHE_MAGIC)?;
        let header: CacheHeader = serde_json::from_value(header)?;
        let mut cache = Self::new(header.token_len, header.model_fingerprint);
        for (name, t) in tensors {
            if name == "logits.last" {
                cache.last_logits = Some(t.into_data());
                continue;
            }
            let (site, pos) =
                name.rsplit_once('.').ok_or_else(|| Error::Load(format!("bad cache tensor name `{name}`")))?;
            let site: HookSite = site.parse()?;
            let pos: usize = pos.parse().map_err(|_| Error::Load(format!("bad cache tensor name `{name}`")))?;
            cache.entries.insert((site, pos), t.into_data());
        }
        Ok(cache)
    }
}
