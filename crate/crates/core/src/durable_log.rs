//! Per-cluster persistent append-only file store.
//!
//! Files are single-writer: every [`DurableStore::open_writer`] bumps the
//! file's writer epoch and invalidates older handles. Appends are atomic with
//! the length update. Reads go through a per-cluster throttle. Contents
//! survive process kills; the store can also be snapshotted to a directory
//! for record/replay.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simnet::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DurableConfig {
    /// Cost of a locked open in write mode.
    pub open_cost_ms: u64,
    pub read_latency_ms: u64,
    pub append_latency_ms: u64,
    /// Minimum period between direct length polls.
    pub poll_ms: u64,
    /// Read budget per second for the whole cluster; 0 disables.
    pub max_read_qps: u64,
    /// Byte budget per second for the whole cluster; 0 disables.
    pub max_read_bps: u64,
    pub throttle_window_ms: u64,
}

impl Default for DurableConfig {
    fn default() -> Self {
        Self {
            open_cost_ms: 100,
            read_latency_ms: 8,
            append_latency_ms: 4,
            poll_ms: 1000,
            max_read_qps: 0,
            max_read_bps: 0,
            throttle_window_ms: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DurableError {
    #[error("stale writer handle for {path} (epoch {held}, current {current})")]
    StaleHandle {
        path: String,
        held: u64,
        current: u64,
    },
    #[error("append to {path} at offset {offset} but length is {length}")]
    OffsetMismatch {
        path: String,
        offset: u64,
        length: u64,
    },
    #[error("empty append")]
    EmptyAppend,
    #[error("read throttled, retry after {retry_after_ms} ms")]
    Throttled { retry_after_ms: u64 },
    #[error("durable store unavailable")]
    Unavailable,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DurableFile {
    pub bytes: Vec<u8>,
    pub writer_epoch: u64,
}

impl DurableFile {
    pub fn len(&self) -> u64 {
        self.bytes.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WriterHandle {
    pub path: String,
    pub epoch: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DurableStats {
    pub reads: u64,
    pub read_bytes: u64,
    pub throttled: u64,
    pub appends: u64,
    pub appended_bytes: u64,
    pub opens: u64,
    pub polls: u64,
}

#[derive(Debug, Clone)]
pub struct DurableStore {
    cfg: DurableConfig,
    files: BTreeMap<String, DurableFile>,
    available: bool,
    window_start: SimTime,
    window_reads: u64,
    window_bytes: u64,
    stats: DurableStats,
}

impl DurableStore {
    pub fn new(cfg: DurableConfig) -> Self {
        Self {
            cfg,
            files: BTreeMap::new(),
            available: true,
            window_start: 0,
            window_reads: 0,
            window_bytes: 0,
            stats: DurableStats::default(),
        }
    }

    pub fn config(&self) -> &DurableConfig {
        &self.cfg
    }

    pub fn stats(&self) -> DurableStats {
        self.stats
    }

    pub fn is_available(&self) -> bool {
        self.available
    }

    /// Models the hosting process going down; contents are kept.
    pub fn set_available(&mut self, up: bool) {
        self.available = up;
    }

    pub fn open_writer(&mut self, path: &str) -> WriterHandle {
        self.stats.opens += 1;
        let f = self.files.entry(path.to_string()).or_default();
        f.writer_epoch += 1;
        WriterHandle {
            path: path.to_string(),
            epoch: f.writer_epoch,
        }
    }

    pub fn is_stale(&self, h: &WriterHandle) -> bool {
        self.files
            .get(&h.path)
            .is_none_or(|f| f.writer_epoch != h.epoch)
    }

    /// Append at the current end. Returns the new length.
    pub fn append(&mut self, h: &WriterHandle, bytes: &[u8]) -> Result<u64, DurableError> {
        let offset = self.length(&h.path);
        self.append_at(h, offset, bytes)
    }

    /// Append only if the file is exactly `offset` bytes long.
    pub fn append_at(
        &mut self,
        h: &WriterHandle,
        offset: u64,
        bytes: &[u8],
    ) -> Result<u64, DurableError> {
        if !self.available {
            return Err(DurableError::Unavailable);
        }
        if bytes.is_empty() {
            return Err(DurableError::EmptyAppend);
        }
        let f = self.files.entry(h.path.clone()).or_default();
        if f.writer_epoch != h.epoch {
            return Err(DurableError::StaleHandle {
                path: h.path.clone(),
                held: h.epoch,
                current: f.writer_epoch,
            });
        }
        if f.len() != offset {
            return Err(DurableError::OffsetMismatch {
                path: h.path.clone(),
                offset,
                length: f.len(),
            });
        }
        f.bytes.extend_from_slice(bytes);
        self.stats.appends += 1;
        self.stats.appended_bytes += bytes.len() as u64;
        Ok(f.len())
    }

    /// Throttled read of up to `len` bytes at `offset`.
    pub fn read(
        &mut self,
        path: &str,
        offset: u64,
        len: u64,
        now: SimTime,
    ) -> Result<Vec<u8>, DurableError> {
        if !self.available {
            return Err(DurableError::Unavailable);
        }
        self.admit(now)?;
        let out = self.peek(path, offset, len).to_vec();
        self.window_bytes += out.len() as u64;
        self.stats.reads += 1;
        self.stats.read_bytes += out.len() as u64;
        Ok(out)
    }

    fn admit(&mut self, now: SimTime) -> Result<(), DurableError> {
        let w = self.cfg.throttle_window_ms.max(1);
        let start = now - now % w;
        if start != self.window_start {
            self.window_start = start;
            self.window_reads = 0;
            self.window_bytes = 0;
        }
        let reads_cap = (self.cfg.max_read_qps * w / 1000).max(1);
        let bytes_cap = (self.cfg.max_read_bps * w / 1000).max(1);
        if (self.cfg.max_read_qps > 0 && self.window_reads >= reads_cap)
            || (self.cfg.max_read_bps > 0 && self.window_bytes >= bytes_cap)
        {
            self.stats.throttled += 1;
            return Err(DurableError::Throttled {
                retry_after_ms: start + w - now,
            });
        }
        self.window_reads += 1;
        Ok(())
    }

    /// Unthrottled, uncounted view of file bytes. For monitors and tests.
    pub fn peek(&self, path: &str, offset: u64, len: u64) -> &[u8] {
        let Some(f) = self.files.get(path) else {
            return &[];
        };
        let start = offset.min(f.len()) as usize;
        let end = offset.saturating_add(len).min(f.len()) as usize;
        &f.bytes[start..end]
    }

    pub fn poll_length(&mut self, path: &str) -> Result<u64, DurableError> {
        if !self.available {
            return Err(DurableError::Unavailable);
        }
        self.stats.polls += 1;
        Ok(self.length(path))
    }

    /// Current length without counting a poll.
    pub fn length(&self, path: &str) -> u64 {
        self.files.get(path).map_or(0, DurableFile::len)
    }

    pub fn file(&self, path: &str) -> Option<&DurableFile> {
        self.files.get(path)
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.files.keys().map(String::as_str)
    }

    // ---- snapshot ----

    /// Write every file plus a manifest under `dir`.
    pub fn save_snapshot(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = Vec::with_capacity(self.files.len());
        for (path, f) in &self.files {
            let name = escape_path(path);
            fs::write(dir.join(&name), &f.bytes)?;
            manifest.push(ManifestEntry {
                path: path.clone(),
                file: name,
                length: f.len(),
                writer_epoch: f.writer_epoch,
            });
        }
        let json = serde_json::to_vec_pretty(&manifest).map_err(io::Error::other)?;
        fs::write(dir.join(MANIFEST), json)
    }

    pub fn load_snapshot(dir: &Path, cfg: DurableConfig) -> io::Result<Self> {
        let raw = fs::read(dir.join(MANIFEST))?;
        let manifest: Vec<ManifestEntry> = serde_json::from_slice(&raw)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        let mut store = Self::new(cfg);
        for e in manifest {
            let bytes = fs::read(dir.join(&e.file))?;
            if bytes.len() as u64 != e.length {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!(
                        "{}: manifest says {} bytes, found {}",
                        e.path,
                        e.length,
                        bytes.len()
                    ),
                ));
            }
            store.files.insert(
                e.path,
                DurableFile {
                    bytes,
                    writer_epoch: e.writer_epoch,
                },
            );
        }
        Ok(store)
    }
}

const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    path: String,
    file: String,
    length: u64,
    writer_epoch: u64,
}

fn escape_path(path: &str) -> String {
    let mut out = String::with_capacity(path.len() + 8);
    for c in path.chars() {
        match c {
            '%' => out.push_str("%25"),
            '/' => out.push_str("%2F"),
            c => out.push(c),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> DurableStore {
        DurableStore::new(DurableConfig::default())
    }

    #[test]
    fn fresh_open_is_empty() {
        let mut s = store();
        let h = s.open_writer("/a");
        assert_eq!(h.epoch, 1);
        assert_eq!(s.poll_length("/a"), Ok(0));
    }

    #[test]
    fn reopen_invalidates_old_handle() {
        let mut s = store();
        let h1 = s.open_writer("/a");
        s.append(&h1, b"abc").unwrap();
        let h2 = s.open_writer("/a");
        assert!(s.is_stale(&h1));
        assert!(matches!(
            s.append(&h1, b"zz"),
            Err(DurableError::StaleHandle {
                held: 1,
                current: 2,
                ..
            })
        ));
        assert_eq!(s.peek("/a", 0, 10), b"abc");
        assert_eq!(s.append(&h2, b"d"), Ok(4));
    }

    #[test]
    fn sequential_appends_concatenate() {
        let mut s = store();
        let h = s.open_writer("/a");
        assert_eq!(s.append(&h, &[1; 10]), Ok(10));
        assert_eq!(s.append(&h, &[2; 20]), Ok(30));
        let all = s.read("/a", 0, 30, 0).unwrap();
        assert_eq!(&all[..10], &[1; 10]);
        assert_eq!(&all[10..], &[2; 20]);
    }

    #[test]
    fn append_at_rejects_gaps() {
        let mut s = store();
        let h = s.open_writer("/a");
        s.append(&h, b"xy").unwrap();
        assert!(matches!(
            s.append_at(&h, 5, b"q"),
            Err(DurableError::OffsetMismatch { length: 2, .. })
        ));
        assert_eq!(s.append(&h, b""), Err(DurableError::EmptyAppend));
    }

    #[test]
    fn reads_past_end_are_short() {
        let mut s = store();
        let h = s.open_writer("/a");
        s.append(&h, b"hello").unwrap();
        assert_eq!(s.read("/a", 3, 100, 0).unwrap(), b"lo");
        assert!(s.read("/a", 5, 1, 0).unwrap().is_empty());
        assert!(s.read("/nope", 0, 1, 0).unwrap().is_empty());
    }

    #[test]
    fn polls_are_read_only() {
        let mut s = store();
        let h = s.open_writer("/a");
        s.append(&h, &[0; 100]).unwrap();
        assert_eq!(s.poll_length("/a"), Ok(100));
        assert_eq!(s.poll_length("/a"), Ok(100));
        assert_eq!(s.file("/a").unwrap().len(), 100);
    }

    #[test]
    fn read_throttle_reports_retry_after() {
        let mut s = DurableStore::new(DurableConfig {
            max_read_qps: 20,
            ..DurableConfig::default()
        });
        let h = s.open_writer("/a");
        s.append(&h, b"x").unwrap();
        assert!(s.read("/a", 0, 1, 130).is_ok());
        assert!(s.read("/a", 0, 1, 130).is_ok());
        assert_eq!(
            s.read("/a", 0, 1, 130),
            Err(DurableError::Throttled { retry_after_ms: 70 })
        );
        assert!(s.read("/a", 0, 1, 200).is_ok());
        assert_eq!(s.stats().throttled, 1);
    }

    #[test]
    fn unavailable_store_keeps_contents() {
        let mut s = store();
        let h = s.open_writer("/a");
        s.append(&h, b"abc").unwrap();
        s.set_available(false);
        assert_eq!(s.read("/a", 0, 3, 0), Err(DurableError::Unavailable));
        s.set_available(true);
        assert_eq!(s.read("/a", 0, 3, 0).unwrap(), b"abc");
    }

    #[test]
    fn snapshot_round_trip_is_byte_exact() {
        let mut s = store();
        for (p, data) in [
            ("/s/0/data", &b"hello"[..]),
            ("/s/0/%idx", &[0u8, 255, 7][..]),
        ] {
            let h = s.open_writer(p);
            s.append(&h, data).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        s.save_snapshot(dir.path()).unwrap();
        let back = DurableStore::load_snapshot(dir.path(), DurableConfig::default()).unwrap();
        assert_eq!(back.files, s.files);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// Earlier observations are always prefixes of later ones.
            #[test]
            fn prefix_stable(chunks in prop::collection::vec(prop::collection::vec(any::<u8>(), 1..20), 1..20)) {
                let mut s = store();
                let h = s.open_writer("/p");
                let mut prev = Vec::new();
                for c in chunks {
                    s.append(&h, &c).unwrap();
                    let now = s.peek("/p", 0, u64::MAX).to_vec();
                    prop_assert!(now.starts_with(&prev));
                    prev = now;
                }
            }
        }
    }
}
