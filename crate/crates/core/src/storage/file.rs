//! Append-only file backend.
//!
//! A store directory holds `store.log` and, after the first checkpoint,
//! `checkpoint`. Both use the same framing: a little-endian `u32` payload
//! length, a little-endian `u32` CRC-32 of the payload, then the JSON
//! payload. `store.log` is a sequence of [`CommitBatch`] frames; the
//! checkpoint is a single [`StateImage`] frame.
//!
//! Recovery loads the checkpoint, replays log frames newer than it, and
//! truncates the log at the first short or corrupt frame. Checkpoints are
//! written to `checkpoint.tmp` and renamed into place, after which the log
//! is truncated; a crash between the two steps is harmless because frames
//! at or below the checkpoint version are skipped.

use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use super::{CommitBatch, StateImage};
use crate::error::{Error, Result};

const LOG_FILE: &str = "store.log";
const CHECKPOINT_FILE: &str = "checkpoint";
const CHECKPOINT_TMP: &str = "checkpoint.tmp";
const HEADER: usize = 8;

#[derive(Debug, Clone)]
pub struct FileOptions {
    /// fsync after every commit and before renaming a checkpoint.
    pub sync: bool,
    /// Take a checkpoint after this many commits; 0 disables it.
    pub checkpoint_every: u64,
    /// Crash injection: the backend stops after writing this many bytes in
    /// total. Renames and truncations count as one byte each. The write that
    /// crosses the budget is torn at the budget boundary.
    pub crash_after_bytes: Option<u64>,
}

impl Default for FileOptions {
    fn default() -> Self {
        FileOptions { sync: true, checkpoint_every: 10_000, crash_after_bytes: None }
    }
}

pub struct FileBackend {
    dir: PathBuf,
    log: File,
    opts: FileOptions,
    commits_since_checkpoint: u64,
    budget: Option<u64>,
    written: u64,
}

fn frame(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    out.extend_from_slice(payload);
    out
}

/// Splits `bytes` into valid frame payloads; returns them plus the length of
/// the valid prefix.
fn read_frames(bytes: &[u8]) -> (Vec<&[u8]>, usize) {
    let mut frames = Vec::new();
    let mut pos = 0;
    while bytes.len() - pos >= HEADER {
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap());
        let start = pos + HEADER;
        let Some(end) = start.checked_add(len).filter(|&e| e <= bytes.len()) else { break };
        let payload = &bytes[start..end];
        if crc32fast::hash(payload) != crc {
            break;
        }
        frames.push(payload);
        pos = end;
    }
    (frames, pos)
}

impl FileBackend {
    /// Opens the directory, recovering the latest durable state.
    pub fn open(dir: &Path, opts: FileOptions) -> Result<(FileBackend, StateImage)> {
        fs::create_dir_all(dir)?;
        let _ = fs::remove_file(dir.join(CHECKPOINT_TMP));

        let mut image = match fs::read(dir.join(CHECKPOINT_FILE)) {
            Ok(bytes) => {
                let (frames, _) = read_frames(&bytes);
                let payload = frames
                    .first()
                    .ok_or_else(|| Error::StorageFailure("corrupt checkpoint".into()))?;
                serde_json::from_slice::<StateImage>(payload)
                    .map_err(|e| Error::StorageFailure(format!("corrupt checkpoint: {e}")))?
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => StateImage::default(),
            Err(e) => return Err(e.into()),
        };

        let log_path = dir.join(LOG_FILE);
        let mut bytes = Vec::new();
        if let Ok(mut f) = File::open(&log_path) {
            f.read_to_end(&mut bytes)?;
        }
        let (frames, mut valid) = read_frames(&bytes);
        let mut state = super::State::from_image(image.clone());
        let mut offset = 0;
        for payload in frames {
            let end = offset + HEADER + payload.len();
            let Ok(batch) = serde_json::from_slice::<CommitBatch>(payload) else {
                valid = offset;
                break;
            };
            if batch.version > state.version {
                if batch.version != state.version + 1 {
                    valid = offset;
                    break;
                }
                state.apply(&batch);
            }
            offset = end;
        }
        if valid < bytes.len() {
            tracing::warn!(dropped = bytes.len() - valid, "truncating torn tail of store log");
        }
        let log = OpenOptions::new().create(true).append(true).open(&log_path)?;
        log.set_len(valid as u64)?;
        image = state.image();

        Ok((
            FileBackend {
                dir: dir.to_path_buf(),
                log,
                budget: opts.crash_after_bytes,
                opts,
                commits_since_checkpoint: 0,
                written: 0,
            },
            image,
        ))
    }

    /// Total bytes (plus rename/truncate units) written since open.
    pub fn bytes_written(&self) -> u64 {
        self.written
    }

    fn spend(&mut self, n: u64) -> Result<u64> {
        match self.budget {
            Some(b) if n > b => {
                self.budget = Some(0);
                self.written += b;
                Err(Error::StorageFailure("injected crash".into()))
            }
            Some(b) => {
                self.budget = Some(b - n);
                self.written += n;
                Ok(n)
            }
            None => {
                self.written += n;
                Ok(n)
            }
        }
    }

    fn write_budgeted(file: &mut File, budget: &mut Option<u64>, written: &mut u64, bytes: &[u8]) -> Result<()> {
        let n = bytes.len() as u64;
        match *budget {
            Some(b) if n > b => {
                file.write_all(&bytes[..b as usize])?;
                *budget = Some(0);
                *written += b;
                Err(Error::StorageFailure("injected crash".into()))
            }
            Some(b) => {
                file.write_all(bytes)?;
                *budget = Some(b - n);
                *written += n;
                Ok(())
            }
            None => {
                file.write_all(bytes)?;
                *written += n;
                Ok(())
            }
        }
    }

    pub(super) fn append(&mut self, batch: &CommitBatch) -> Result<()> {
        let payload = serde_json::to_vec(batch).map_err(|e| Error::StorageFailure(e.to_string()))?;
        let bytes = frame(&payload);
        Self::write_budgeted(&mut self.log, &mut self.budget, &mut self.written, &bytes)?;
        if self.opts.sync {
            self.log.sync_data()?;
        }
        self.commits_since_checkpoint += 1;
        Ok(())
    }

    pub(super) fn wants_checkpoint(&self) -> bool {
        self.opts.checkpoint_every > 0 && self.commits_since_checkpoint >= self.opts.checkpoint_every
    }

    pub(super) fn checkpoint(&mut self, image: &StateImage) -> Result<()> {
        let payload = serde_json::to_vec(image).map_err(|e| Error::StorageFailure(e.to_string()))?;
        let bytes = frame(&payload);
        let tmp = self.dir.join(CHECKPOINT_TMP);
        {
            let mut f = File::create(&tmp)?;
            Self::write_budgeted(&mut f, &mut self.budget, &mut self.written, &bytes)?;
            if self.opts.sync {
                f.sync_all()?;
            }
        }
        self.spend(1)?;
        fs::rename(&tmp, self.dir.join(CHECKPOINT_FILE))?;
        self.spend(1)?;
        self.log.set_len(0)?;
        if self.opts.sync {
            self.log.sync_all()?;
        }
        self.commits_since_checkpoint = 0;
        Ok(())
    }
}
