//! Append-only JSON Lines files with an in-memory mirror.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("corrupt record in {path} at line {line}: {message}")]
    Corrupt {
        path: String,
        line: usize,
        message: String,
    },
}

/// Records are flushed and synced before `append` returns.
#[derive(Debug, Clone)]
pub struct Journal<T> {
    path: Option<PathBuf>,
    records: Vec<T>,
}

impl<T: Serialize + DeserializeOwned> Journal<T> {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            records: Vec::new(),
        }
    }

    /// Opens (or creates) a journal file and loads its records. A torn final
    /// line left by an interrupted write is dropped.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, JournalError> {
        let path = path.into();
        let io_err = |source| JournalError::Io {
            path: path.display().to_string(),
            source,
        };
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err)?;
        }
        let mut records = Vec::new();
        if path.exists() {
            let file = File::open(&path).map_err(io_err)?;
            let lines: Vec<String> = BufReader::new(file)
                .lines()
                .collect::<Result<_, _>>()
                .map_err(io_err)?;
            let last = lines.len();
            let mut good_len = 0u64;
            for (i, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    good_len += line.len() as u64 + 1;
                    continue;
                }
                match serde_json::from_str(line) {
                    Ok(rec) => {
                        records.push(rec);
                        good_len += line.len() as u64 + 1;
                    }
                    Err(_) if i + 1 == last => {
                        tracing::warn!(path = %path.display(), "dropping torn final journal line");
                        let file = OpenOptions::new().write(true).open(&path).map_err(io_err)?;
                        file.set_len(good_len).map_err(io_err)?;
                    }
                    Err(e) => {
                        return Err(JournalError::Corrupt {
                            path: path.display().to_string(),
                            line: i + 1,
                            message: e.to_string(),
                        })
                    }
                }
            }
        }
        Ok(Self {
            path: Some(path),
            records,
        })
    }

    pub fn append(&mut self, record: T) -> Result<&T, JournalError> {
        if let Some(path) = &self.path {
            write_line(path, &record).map_err(|source| JournalError::Io {
                path: path.display().to_string(),
                source,
            })?;
        }
        self.records.push(record);
        Ok(self.records.last().expect("just pushed"))
    }

    pub fn records(&self) -> &[T] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }
}

fn write_line<T: Serialize>(path: &Path, record: &T) -> io::Result<()> {
    let mut line = serde_json::to_vec(record).map_err(io::Error::other)?;
    line.push(b'\n');
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    file.write_all(&line)?;
    file.sync_data()
}
