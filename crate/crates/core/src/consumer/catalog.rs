use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::counting::NoiseFit;
use crate::producer::ScanSpec;

/// What a NodeGroup needs to know about a scan beyond the stream itself:
/// its dimensions and, when available, the shared noise calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanEntry {
    pub spec: ScanSpec,
    #[serde(default)]
    pub fit: Option<NoiseFit>,
}

pub trait ScanCatalog: Send + Sync {
    fn lookup(&self, scan_number: u32) -> Option<ScanEntry>;
}

impl<T: ScanCatalog + ?Sized> ScanCatalog for Arc<T> {
    fn lookup(&self, scan_number: u32) -> Option<ScanEntry> {
        (**self).lookup(scan_number)
    }
}

#[derive(Debug, Default, Clone)]
pub struct MemoryCatalog {
    entries: Arc<RwLock<BTreeMap<u32, ScanEntry>>>,
}

impl MemoryCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, entry: ScanEntry) {
        self.entries.write().insert(entry.spec.scan_number, entry);
    }
}

impl ScanCatalog for MemoryCatalog {
    fn lookup(&self, scan_number: u32) -> Option<ScanEntry> {
        self.entries.read().get(&scan_number).cloned()
    }
}

/// One `scan{N}.json` file per scan in a shared directory.
#[derive(Debug, Clone)]
pub struct DirCatalog {
    dir: PathBuf,
}

impl DirCatalog {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path(&self, scan_number: u32) -> PathBuf {
        self.dir.join(format!("scan{scan_number}.json"))
    }

    /// Writes atomically so readers never see a half-written entry.
    pub fn insert(&self, entry: &ScanEntry) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(&self.dir)?;
        let path = self.path(entry.spec.scan_number);
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(entry).map_err(std::io::Error::other)?)?;
        std::fs::rename(&tmp, &path)?;
        Ok(path)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl ScanCatalog for DirCatalog {
    fn lookup(&self, scan_number: u32) -> Option<ScanEntry> {
        let text = std::fs::read_to_string(self.path(scan_number)).ok()?;
        match serde_json::from_str(&text) {
            Ok(e) => Some(e),
            Err(e) => {
                log::warn!("catalog entry for scan {scan_number} unreadable: {e}");
                None
            }
        }
    }
}

/// Reads scan entries from the orchestrator's `GET /scans/{n}`.
#[derive(Debug, Clone)]
pub struct HttpCatalog {
    base: String,
    agent: ureq::Agent,
}

impl HttpCatalog {
    pub fn new(base_url: &str) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(5)))
            .build()
            .into();
        Self {
            base: base_url.trim_end_matches('/').to_string(),
            agent,
        }
    }
}

impl ScanCatalog for HttpCatalog {
    fn lookup(&self, scan_number: u32) -> Option<ScanEntry> {
        #[derive(Deserialize)]
        struct Record {
            spec: Option<ScanSpec>,
            #[serde(default)]
            fit: Option<NoiseFit>,
        }
        let url = format!("{}/scans/{scan_number}", self.base);
        let record: Record = self.agent.get(&url).call().ok()?.body_mut().read_json().ok()?;
        Some(ScanEntry {
            spec: record.spec?,
            fit: record.fit,
        })
    }
}

/// Tries each catalog in turn.
pub struct ChainCatalog(pub Vec<Box<dyn ScanCatalog>>);

impl ScanCatalog for ChainCatalog {
    fn lookup(&self, scan_number: u32) -> Option<ScanEntry> {
        self.0.iter().find_map(|c| c.lookup(scan_number))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::DetectorGeometry;

    #[test]
    fn dir_catalog_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cat = DirCatalog::new(dir.path());
        assert!(cat.lookup(3).is_none());
        let entry = ScanEntry {
            spec: ScanSpec::new(3, 4, 4, DetectorGeometry::new(16, 16).unwrap()),
            fit: Some(NoiseFit {
                mean: 100.0,
                stddev: 5.0,
                degenerate: false,
            }),
        };
        cat.insert(&entry).unwrap();
        assert_eq!(cat.lookup(3), Some(entry.clone()));
        let mem = MemoryCatalog::new();
        mem.insert(entry.clone());
        let chain = ChainCatalog(vec![Box::new(DirCatalog::new(dir.path().join("none"))), Box::new(mem)]);
        assert_eq!(chain.lookup(3), Some(entry));
    }
}
