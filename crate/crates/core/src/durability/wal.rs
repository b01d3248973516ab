//! Write-ahead log.
//!
//! Append-only file of framed records: `[body_len u32][body][crc32c(body)
//! u32]`, little-endian, one record per committed epoch, bodies encoded by
//! `codec::encode_log_body`. The CRC is over the body only; the length
//! prefix is validated implicitly by the CRC failing when the length lies.
//!
//! Scanning stops at the first frame that doesn't check out (short frame,
//! CRC mismatch, undecodable body, epoch regression) and reports everything
//! before it as the valid prefix. The scan never writes: crash recovery can
//! run any number of times and see the same bytes. Physical truncation of
//! the tail happens once, when the log is reopened for appending.

use std::fs::{File, OpenOptions};
use std::io::{Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::codec::{decode_log_body, encode_log_body, LogRecord};
use crate::error::{Error, Result};

pub const WAL_FILE_NAME: &str = "wal.log";

const FRAME_OVERHEAD: u64 = 8; // 4-byte length + 4-byte crc
/// A single record body can't meaningfully exceed this; treat bigger length
/// prefixes as corruption rather than attempting the allocation.
const MAX_BODY_LEN: u32 = 256 * 1024 * 1024;

pub struct Wal {
    file: File,
    path: PathBuf,
    len: u64,
    last_epoch: u64,
    /// Fsync every N appends; 0 disables fsync entirely (throughput studies).
    fsync_every: u32,
    appends_since_sync: u32,
}

#[derive(Debug)]
pub struct WalScan {
    pub records: Vec<LogRecord>,
    /// Byte length of the valid prefix.
    pub valid_len: u64,
    /// Bytes past the valid prefix (torn or corrupt tail).
    pub truncated_bytes: u64,
}

impl Wal {
    /// Open for appending, physically truncating anything past `valid_len`
    /// (as determined by a prior `scan`). Creates the file if absent, in
    /// which case `valid_len` and `last_epoch` must be 0.
    pub fn open(path: &Path, valid_len: u64, last_epoch: u64, fsync_every: u32) -> Result<Self> {
        // Never truncate blindly at open; the cut to valid_len below is the
        // only truncation and it is explicit.
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let actual = file.metadata().map_err(|e| Error::io(path, e))?.len();
        if valid_len > actual {
            return Err(Error::Corrupt(format!(
                "valid prefix {valid_len} exceeds file length {actual} of {}",
                path.display()
            )));
        }
        if valid_len < actual {
            log::warn!("truncating {} from {actual} to {valid_len} bytes", path.display());
            file.set_len(valid_len).map_err(|e| Error::io(path, e))?;
            file.sync_all().map_err(|e| Error::io(path, e))?;
        }
        let mut wal = Wal { file, path: path.to_path_buf(), len: valid_len, last_epoch, fsync_every, appends_since_sync: 0 };
        wal.file.seek(SeekFrom::End(0)).map_err(|e| Error::io(&wal.path, e))?;
        Ok(wal)
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn last_epoch(&self) -> u64 {
        self.last_epoch
    }

    /// Append one epoch record. Epochs must arrive in increasing order; the
    /// write is a single syscall so a crash tears at most one record.
    pub fn append(&mut self, record: &LogRecord) -> Result<()> {
        if self.last_epoch != 0 && record.epoch_id <= self.last_epoch {
            return Err(Error::invalid(format!(
                "append of epoch {} after epoch {}",
                record.epoch_id, self.last_epoch
            )));
        }
        let body = encode_log_body(record);
        let mut frame = Vec::with_capacity(body.len() + FRAME_OVERHEAD as usize);
        frame.extend_from_slice(&(body.len() as u32).to_le_bytes());
        frame.extend_from_slice(&body);
        frame.extend_from_slice(&crc32c::crc32c(&body).to_le_bytes());
        self.file.write_all(&frame).map_err(|e| Error::io(&self.path, e))?;
        self.len += frame.len() as u64;
        self.last_epoch = record.epoch_id;
        if self.fsync_every > 0 {
            self.appends_since_sync += 1;
            if self.appends_since_sync >= self.fsync_every {
                self.sync()?;
            }
        }
        Ok(())
    }

    pub fn sync(&mut self) -> Result<()> {
        self.appends_since_sync = 0;
        self.file.sync_data().map_err(|e| Error::io(&self.path, e))
    }

    /// Drop records with `epoch_id <= through` by rewriting the tail into a
    /// temp file and renaming it into place. Called after checkpointing;
    /// the log stays consistent if the process dies anywhere in between.
    pub fn prune_through(&mut self, through: u64) -> Result<()> {
        let scan = scan_file(&self.path)?;
        let keep: Vec<&LogRecord> = scan.records.iter().filter(|r| r.epoch_id > through).collect();
        if keep.len() == scan.records.len() {
            return Ok(());
        }
        let tmp = self.path.with_extension("log.tmp");
        {
            let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            for rec in &keep {
                let body = encode_log_body(rec);
                f.write_all(&(body.len() as u32).to_le_bytes()).map_err(|e| Error::io(&tmp, e))?;
                f.write_all(&body).map_err(|e| Error::io(&tmp, e))?;
                f.write_all(&crc32c::crc32c(&body).to_le_bytes()).map_err(|e| Error::io(&tmp, e))?;
            }
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, &self.path).map_err(|e| Error::io(&self.path, e))?;
        if let Some(dir) = self.path.parent() {
            super::fsync_dir(dir)?;
        }
        // Reopen: the old descriptor still points at the unlinked inode.
        let file = OpenOptions::new().read(true).write(true).open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        self.file = file;
        self.len = self.file.seek(SeekFrom::End(0)).map_err(|e| Error::io(&self.path, e))?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Read the valid prefix of a log file. Missing file reads as empty.
pub fn scan_file(path: &Path) -> Result<WalScan> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    Ok(scan_bytes(&bytes))
}

pub fn scan_bytes(bytes: &[u8]) -> WalScan {
    let mut records = Vec::new();
    let mut pos: usize = 0;
    let mut last_epoch: u64 = 0;
    loop {
        let rest = bytes.len() - pos;
        if rest < FRAME_OVERHEAD as usize {
            break;
        }
        let body_len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
        if body_len > MAX_BODY_LEN {
            break;
        }
        let body_len = body_len as usize;
        if rest < FRAME_OVERHEAD as usize + body_len {
            break;
        }
        let body = &bytes[pos + 4..pos + 4 + body_len];
        let crc = u32::from_le_bytes(bytes[pos + 4 + body_len..pos + FRAME_OVERHEAD as usize + body_len].try_into().unwrap());
        if crc32c::crc32c(body) != crc {
            break;
        }
        let record = match decode_log_body(body) {
            Ok(r) => r,
            Err(_) => break,
        };
        if record.epoch_id <= last_epoch {
            break;
        }
        last_epoch = record.epoch_id;
        records.push(record);
        pos += FRAME_OVERHEAD as usize + body_len;
    }
    WalScan { records, valid_len: pos as u64, truncated_bytes: (bytes.len() - pos) as u64 }
}

impl Wal {
    /// Scan helper bound to this log's path.
    pub fn scan(path: &Path) -> Result<WalScan> {
        scan_file(path)
    }
}
