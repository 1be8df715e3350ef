//! Durable block log: one JSON record per line, fsynced on append.
//!
//! Genesis is derived from the chain configuration and not stored, so line
//! `k` holds height `k + 1`. A final line without a trailing newline is a
//! torn write and is dropped on open. Records default to bare blocks; a node
//! stores blocks together with their commit certificates.

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use thiserror::Error;

use super::Block;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("chain file i/o: {0}")]
    Io(#[from] io::Error),
    #[error("chain file corrupt at height {height}: {reason}")]
    Corrupt { height: u64, reason: String },
}

#[derive(Debug)]
pub struct ChainStore<T = Block> {
    path: PathBuf,
    file: File,
    _record: PhantomData<fn(T)>,
}

impl<T: Serialize + DeserializeOwned> ChainStore<T> {
    /// Opens or creates the log and returns the stored records in order.
    pub fn open(path: impl AsRef<Path>) -> Result<(Self, Vec<T>), StoreError> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)?;
        let mut raw = Vec::new();
        file.read_to_end(&mut raw)?;

        let complete = raw.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        if complete < raw.len() {
            file.set_len(complete as u64)?;
            file.sync_all()?;
        }

        let mut blocks = Vec::new();
        for (i, line) in raw[..complete].split(|&b| b == b'\n').enumerate() {
            if line.is_empty() {
                continue;
            }
            let height = i as u64 + 1;
            let block: T = serde_json::from_slice(line).map_err(|e| StoreError::Corrupt {
                height,
                reason: e.to_string(),
            })?;
            blocks.push(block);
        }
        Ok((
            ChainStore {
                path,
                file,
                _record: PhantomData,
            },
            blocks,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one record and syncs it to disk before returning.
    pub fn append(&mut self, record: &T) -> Result<(), StoreError> {
        let mut line = serde_json::to_vec(record).expect("records always serialize");
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{Address, Hash};

    fn block(h: u64) -> Block {
        Block::seal(h, Hash::ZERO, h, Address::ZERO, vec![])
    }

    #[test]
    fn append_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.jsonl");
        {
            let (mut store, blocks) = ChainStore::<Block>::open(&path).unwrap();
            assert!(blocks.is_empty());
            store.append(&block(1)).unwrap();
            store.append(&block(2)).unwrap();
        }
        let (_, blocks) = ChainStore::<Block>::open(&path).unwrap();
        assert_eq!(blocks, vec![block(1), block(2)]);
    }

    #[test]
    fn torn_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.jsonl");
        {
            let (mut store, _) = ChainStore::<Block>::open(&path).unwrap();
            store.append(&block(1)).unwrap();
        }
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"height\":2,\"prev").unwrap();
        drop(f);
        let (mut store, blocks) = ChainStore::<Block>::open(&path).unwrap();
        assert_eq!(blocks.len(), 1);
        store.append(&block(2)).unwrap();
        let (_, blocks) = ChainStore::<Block>::open(&path).unwrap();
        assert_eq!(blocks.len(), 2);
    }

    #[test]
    fn garbage_line_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.jsonl");
        std::fs::write(&path, format!("{}\nnot json\n", serde_json::to_string(&block(1)).unwrap()))
            .unwrap();
        match ChainStore::<Block>::open(&path) {
            Err(StoreError::Corrupt { height, .. }) => assert_eq!(height, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
