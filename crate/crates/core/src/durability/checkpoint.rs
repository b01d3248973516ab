//! Checkpoints: full state dumps with manifest-last commit.
//!
//! A checkpoint is two files: `ckpt-<seq>.dump` (the key-ordered dump bytes)
//! and `ckpt-<seq>.manifest` (epoch, dump file name, dump CRC). The dump is
//! written and fsynced first; the manifest is written to a temp name,
//! fsynced, and renamed into place. A manifest therefore only ever points at
//! a complete dump, and a checkpoint without a manifest simply doesn't
//! exist. Loading walks manifests newest-first and falls back past any that
//! fail verification.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::codec::{decode_dump, encode_dump};
use crate::error::{Error, Result};
use crate::store::{ShardKey, ShardValue};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointManifest {
    pub seq: u64,
    pub epoch_id: u64,
    /// Highest durable admission stamp at checkpoint time. Log pruning can
    /// leave the checkpoint as the only witness of old stamps; recovery
    /// resumes the clock above this so durable ids are never reissued.
    pub clock: u64,
    pub dump_file: String,
    pub dump_crc32c: u32,
}

impl CheckpointManifest {
    fn to_text(&self) -> String {
        format!(
            "seq={}\nepoch={}\nclock={}\nfile={}\ncrc32c={:08x}\n",
            self.seq, self.epoch_id, self.clock, self.dump_file, self.dump_crc32c
        )
    }

    fn from_text(text: &str) -> Result<Self> {
        let mut seq = None;
        let mut epoch = None;
        let mut clock = None;
        let mut file = None;
        let mut crc = None;
        for line in text.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::codec(format!("manifest line without '=': {line}")))?;
            match k {
                "seq" => seq = Some(v.parse().map_err(|_| Error::codec("bad seq"))?),
                "epoch" => epoch = Some(v.parse().map_err(|_| Error::codec("bad epoch"))?),
                "clock" => clock = Some(v.parse().map_err(|_| Error::codec("bad clock"))?),
                "file" => file = Some(v.to_string()),
                "crc32c" => crc = Some(u32::from_str_radix(v, 16).map_err(|_| Error::codec("bad crc"))?),
                other => return Err(Error::codec(format!("unknown manifest field {other}"))),
            }
        }
        Ok(CheckpointManifest {
            seq: seq.ok_or_else(|| Error::codec("manifest missing seq"))?,
            epoch_id: epoch.ok_or_else(|| Error::codec("manifest missing epoch"))?,
            clock: clock.ok_or_else(|| Error::codec("manifest missing clock"))?,
            dump_file: file.ok_or_else(|| Error::codec("manifest missing file"))?,
            dump_crc32c: crc.ok_or_else(|| Error::codec("manifest missing crc32c"))?,
        })
    }
}

fn manifest_path(dir: &Path, seq: u64) -> PathBuf {
    dir.join(format!("ckpt-{seq:06}.manifest"))
}

fn dump_file_name(seq: u64) -> String {
    format!("ckpt-{seq:06}.dump")
}

/// Write dump + manifest for the state visible at `epoch_id`. The caller
/// passes the already-materialized dump listing (from a pinned snapshot).
pub fn write_checkpoint(
    dir: &Path,
    seq: u64,
    epoch_id: u64,
    clock: u64,
    entries: &[(ShardKey, Arc<ShardValue>)],
) -> Result<CheckpointManifest> {
    let bytes = encode_dump(entries);
    let crc = crc32c::crc32c(&bytes);
    let dump_name = dump_file_name(seq);
    let dump_path = dir.join(&dump_name);
    {
        let mut f = std::fs::File::create(&dump_path).map_err(|e| Error::io(&dump_path, e))?;
        use std::io::Write;
        f.write_all(&bytes).map_err(|e| Error::io(&dump_path, e))?;
        f.sync_all().map_err(|e| Error::io(&dump_path, e))?;
    }
    let manifest = CheckpointManifest { seq, epoch_id, clock, dump_file: dump_name, dump_crc32c: crc };
    let tmp = dir.join(format!("ckpt-{seq:06}.manifest.tmp"));
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        use std::io::Write;
        f.write_all(manifest.to_text().as_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    let final_path = manifest_path(dir, seq);
    std::fs::rename(&tmp, &final_path).map_err(|e| Error::io(&final_path, e))?;
    super::fsync_dir(dir)?;
    Ok(manifest)
}

/// Manifests present in `dir`, ascending by seq. Unparsable manifests are
/// skipped with a warning; they are as good as absent.
pub fn list_manifests(dir: &Path) -> Result<Vec<CheckpointManifest>> {
    let mut out = Vec::new();
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(Error::io(dir, e)),
    };
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if !name.starts_with("ckpt-") || !name.ends_with(".manifest") {
            continue;
        }
        let text = std::fs::read_to_string(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
        match CheckpointManifest::from_text(&text) {
            Ok(m) => out.push(m),
            Err(e) => log::warn!("skipping unreadable manifest {name}: {e}"),
        }
    }
    out.sort_by_key(|m| m.seq);
    Ok(out)
}

pub type CheckpointEntries = Vec<(ShardKey, ShardValue)>;

/// Newest checkpoint that verifies end to end, with its decoded entries.
pub fn load_latest_checkpoint(dir: &Path) -> Result<Option<(CheckpointManifest, CheckpointEntries)>> {
    let mut manifests = list_manifests(dir)?;
    manifests.reverse();
    for m in manifests {
        let dump_path = dir.join(&m.dump_file);
        let bytes = match std::fs::read(&dump_path) {
            Ok(b) => b,
            Err(e) => {
                log::warn!("checkpoint seq {} unreadable ({e}); falling back", m.seq);
                continue;
            }
        };
        if crc32c::crc32c(&bytes) != m.dump_crc32c {
            log::warn!("checkpoint seq {} fails crc; falling back", m.seq);
            continue;
        }
        match decode_dump(&bytes) {
            Ok(entries) => return Ok(Some((m, entries))),
            Err(e) => {
                log::warn!("checkpoint seq {} fails decode ({e}); falling back", m.seq);
                continue;
            }
        }
    }
    Ok(None)
}

/// Keep the newest `retain` checkpoints, delete the rest (manifest first so
/// a crash mid-delete never leaves a manifest pointing at a missing dump).
/// Returns the retained manifests, ascending by seq.
pub fn prune_checkpoints(dir: &Path, retain: usize) -> Result<Vec<CheckpointManifest>> {
    let manifests = list_manifests(dir)?;
    let cut = manifests.len().saturating_sub(retain);
    for m in &manifests[..cut] {
        // NotFound is tolerated on both files: two pruners may race and the
        // loser must not fail.
        for path in [manifest_path(dir, m.seq), dir.join(&m.dump_file)] {
            if let Err(e) = std::fs::remove_file(&path) {
                if e.kind() != std::io::ErrorKind::NotFound {
                    return Err(Error::io(&path, e));
                }
            }
        }
    }
    Ok(manifests[cut..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entries(n: usize) -> Vec<(ShardKey, Arc<ShardValue>)> {
        (0..n)
            .map(|i| {
                (ShardKey::params(format!("k{i:03}")).unwrap(), Arc::new(ShardValue::Params(vec![i as f64])))
            })
            .collect()
    }

    #[test]
    fn write_then_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_checkpoint(dir.path(), 1, 64, 640, &entries(5)).unwrap();
        let (loaded, got) = load_latest_checkpoint(dir.path()).unwrap().unwrap();
        assert_eq!(loaded, m);
        assert_eq!(got.len(), 5);
        assert_eq!(got[3].1.as_params().unwrap(), &[3.0]);
    }

    #[test]
    fn load_falls_back_past_corrupt_dump() {
        let dir = tempfile::tempdir().unwrap();
        write_checkpoint(dir.path(), 1, 64, 640, &entries(3)).unwrap();
        let m2 = write_checkpoint(dir.path(), 2, 128, 1280, &entries(4)).unwrap();
        // Corrupt the newest dump.
        let p = dir.path().join(&m2.dump_file);
        let mut b = std::fs::read(&p).unwrap();
        b[8] ^= 0xff;
        std::fs::write(&p, b).unwrap();
        let (loaded, got) = load_latest_checkpoint(dir.path()).unwrap().unwrap();
        assert_eq!(loaded.seq, 1);
        assert_eq!(loaded.epoch_id, 64);
        assert_eq!(got.len(), 3);
    }

    #[test]
    fn missing_manifest_means_missing_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let m1 = write_checkpoint(dir.path(), 1, 64, 640, &entries(2)).unwrap();
        write_checkpoint(dir.path(), 2, 128, 1280, &entries(3)).unwrap();
        // Simulate a crash between dump write and manifest rename: manifest
        // gone, dump present.
        std::fs::remove_file(dir.path().join("ckpt-000002.manifest")).unwrap();
        let (loaded, _) = load_latest_checkpoint(dir.path()).unwrap().unwrap();
        assert_eq!(loaded, m1);
    }

    #[test]
    fn retention_keeps_newest_two() {
        let dir = tempfile::tempdir().unwrap();
        for seq in 1..=4 {
            write_checkpoint(dir.path(), seq, seq * 64, seq * 640, &entries(seq as usize)).unwrap();
        }
        let retained = prune_checkpoints(dir.path(), 2).unwrap();
        assert_eq!(retained[0].epoch_id, 192);
        let left = list_manifests(dir.path()).unwrap();
        let seqs: Vec<u64> = left.iter().map(|m| m.seq).collect();
        assert_eq!(seqs, vec![3, 4]);
        // Dumps for pruned seqs are gone too.
        assert!(!dir.path().join("ckpt-000001.dump").exists());
    }

    #[test]
    fn empty_dir_loads_nothing() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_latest_checkpoint(dir.path()).unwrap().is_none());
        assert!(prune_checkpoints(dir.path(), 2).unwrap().is_empty());
    }
}
