//! Local content-addressed store for scenarios, DEMs and results.
//!
//! Layout under the root: `scenarios/<id>.json`, `dems/<id>.asc` and
//! `results/<id>/`. Result directories are built under a temporary name and
//! renamed into place, so a visible result is always complete.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use uavrel_core::dem::DemGrid;
use uavrel_core::report::sha256_hex;
use uavrel_core::scenario::{parse_scenario, Scenario};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultMeta {
    pub kind: String,
    pub scenario_hash: String,
    pub dem_id: Option<String>,
    /// Scenario document the result was computed from.
    pub scenario: serde_json::Value,
}

pub const META_JSON: &str = "meta.json";

pub struct Store {
    root: PathBuf,
    lock: RwLock<()>,
}

/// Ids are lowercase hex digests; anything else never names a file.
pub fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_hexdigit())
}

impl Store {
    pub fn open(root: &Path) -> Result<Self> {
        for sub in ["scenarios", "dems", "results"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        Ok(Self { root: root.to_path_buf(), lock: RwLock::new(()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn scenario_path(&self, id: &str) -> PathBuf {
        self.root.join("scenarios").join(format!("{id}.json"))
    }

    fn dem_path(&self, id: &str) -> PathBuf {
        self.root.join("dems").join(format!("{id}.asc"))
    }

    pub fn result_dir(&self, id: &str) -> PathBuf {
        self.root.join("results").join(id)
    }

    /// Stores a new scenario under its content hash.
    pub fn create_scenario(&self, scenario: &Scenario) -> Result<String> {
        let id = scenario.content_hash();
        let _w = self.lock.write().expect("store lock");
        fs::write(self.scenario_path(&id), scenario.to_json())?;
        Ok(id)
    }

    /// Replaces the document behind an existing id; `false` if the id is unknown.
    pub fn replace_scenario(&self, id: &str, scenario: &Scenario) -> Result<bool> {
        if !valid_id(id) {
            return Ok(false);
        }
        let _w = self.lock.write().expect("store lock");
        let path = self.scenario_path(id);
        if !path.exists() {
            return Ok(false);
        }
        fs::write(path, scenario.to_json())?;
        Ok(true)
    }

    pub fn scenario(&self, id: &str) -> Result<Option<Scenario>> {
        if !valid_id(id) {
            return Ok(None);
        }
        let _r = self.lock.read().expect("store lock");
        match fs::read_to_string(self.scenario_path(id)) {
            Ok(text) => Ok(Some(parse_scenario(&text)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Validates and stores an ESRI ASCII grid under the digest of its bytes.
    pub fn put_dem(&self, text: &str) -> Result<(String, DemGrid)> {
        let grid = DemGrid::parse_ascii(text)?;
        let id = sha256_hex(text.as_bytes());
        let _w = self.lock.write().expect("store lock");
        fs::write(self.dem_path(&id), text)?;
        Ok((id, grid))
    }

    pub fn dem(&self, id: &str) -> Result<Option<DemGrid>> {
        if !valid_id(id) {
            return Ok(None);
        }
        let _r = self.lock.read().expect("store lock");
        match fs::read_to_string(self.dem_path(id)) {
            Ok(text) => Ok(Some(DemGrid::parse_ascii(&text)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn has_result(&self, id: &str) -> bool {
        valid_id(id) && self.result_dir(id).join(META_JSON).exists()
    }

    /// Runs `fill` on a fresh directory and publishes it as result `id`.
    /// An existing result with the same id is kept.
    pub fn commit_result(&self, id: &str, meta: &ResultMeta, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        let staging = tempfile::Builder::new().prefix(".staging-").tempdir_in(self.root.join("results"))?;
        fill(staging.path())?;
        fs::write(staging.path().join(META_JSON), serde_json::to_string_pretty(meta)?)?;
        let _w = self.lock.write().expect("store lock");
        let dest = self.result_dir(id);
        if dest.join(META_JSON).exists() {
            return Ok(());
        }
        let staged = staging.keep();
        fs::rename(&staged, &dest).with_context(|| format!("publishing {}", dest.display()))?;
        Ok(())
    }

    pub fn result_file(&self, id: &str, name: &str) -> Result<Option<String>> {
        if !valid_id(id) {
            return Ok(None);
        }
        let _r = self.lock.read().expect("store lock");
        match fs::read_to_string(self.result_dir(id).join(name)) {
            Ok(text) => Ok(Some(text)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn result_meta(&self, id: &str) -> Result<Option<ResultMeta>> {
        self.result_file(id, META_JSON)?.map(|t| serde_json::from_str(&t).map_err(Into::into)).transpose()
    }
}

/// Digest naming the result of `kind` over the given inputs.
pub fn result_id(kind: &str, parts: &[&str]) -> String {
    let mut text = kind.to_string();
    for p in parts {
        text.push('\n');
        text.push_str(p);
    }
    sha256_hex(text.as_bytes())
}
