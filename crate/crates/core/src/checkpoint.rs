//! Parameter archives with optional optimizer state alongside.
//!
//! `<path>` holds the model, `<path>.adam` the Adam moments; the step count
//! and a caller-supplied config string travel in the metadata.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mitodet_tensor::{Adam, AdamConfig, ParamStore};

use crate::error::{Error, Result};

pub const META_STEP: &str = "step";
pub const META_CONFIG: &str = "config";
pub const META_KIND: &str = "kind";

pub fn optimizer_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".adam");
    PathBuf::from(s)
}

/// Saves parameters and optimizer state.
pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    config: &str,
    store: &ParamStore<f32>,
    opt: &Adam<f32>,
) -> Result<()> {
    let meta = BTreeMap::from([
        (META_KIND.to_string(), kind.to_string()),
        (META_CONFIG.to_string(), config.to_string()),
        (META_STEP.to_string(), opt.step_count().to_string()),
    ]);
    store.save(path, &meta)?;
    opt.export(store).save(&optimizer_path(path), &meta)?;
    Ok(())
}

pub struct Checkpoint {
    pub params: ParamStore<f32>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn load(path: &Path, kind: &str) -> Result<Self> {
        let (params, meta) = ParamStore::load(path)?;
        match meta.get(META_KIND) {
            Some(k) if k == kind => Ok(Self { params, meta }),
            other => Err(Error::format(
                path,
                format!(
                    "expected a {kind} checkpoint, found {}",
                    other.map_or("unknown", String::as_str)
                ),
            )),
        }
    }

    pub fn config(&self) -> &str {
        self.meta.get(META_CONFIG).map_or("", String::as_str)
    }

    pub fn step(&self) -> u64 {
        self.meta
            .get(META_STEP)
            .and_then(|s| s.parse().ok())
            .unwrap_or(0)
    }

    /// Copies parameters into `store` (which must have the same layout) and
    /// restores the optimizer if its state file exists.
    pub fn restore(
        &self,
        path: &Path,
        store: &mut ParamStore<f32>,
        cfg: AdamConfig,
    ) -> Result<Adam<f32>> {
        let missing = store.load_matching(&self.params);
        if !missing.is_empty() {
            return Err(Error::format(
                path,
                format!(
                    "checkpoint lacks {} tensors, e.g. {}",
                    missing.len(),
                    missing[0]
                ),
            ));
        }
        let mut opt = Adam::new(cfg);
        let opath = optimizer_path(path);
        if opath.exists() {
            let (state, _) = ParamStore::<f32>::load(&opath)?;
            opt.import(store, &state, self.step());
        }
        Ok(opt)
    }
}
