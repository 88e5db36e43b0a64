//! Dataset tree scanning.
//!
//! A dataset root holds one directory per machine type, each with `train/`
//! and `test/` subdirectories of WAV files named
//! `<normal|anomaly>_id_<NN>_<index>.wav`, or `id_<NN>_<index>.wav` when the
//! label is withheld.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::eval::Label;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing directory {0}")]
    MissingDirectory(PathBuf),
    #[error("unparsable file name '{0}'")]
    UnparsableFilename(String),
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Label and machine id carried by a file name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedName {
    pub label: Label,
    pub machine_id: String,
}

/// Parses `normal_id_01_00000005.wav`, `anomaly_id_01_...` or `id_01_...`.
pub fn parse_filename(name: &str) -> Result<ParsedName, DatasetError> {
    let bad = || DatasetError::UnparsableFilename(name.to_string());
    let stem = name
        .strip_suffix(".wav")
        .or_else(|| name.strip_suffix(".WAV"))
        .ok_or_else(bad)?;
    let (label, rest) = if let Some(r) = stem.strip_prefix("normal_id_") {
        (Label::Normal, r)
    } else if let Some(r) = stem.strip_prefix("anomaly_id_") {
        (Label::Anomaly, r)
    } else if let Some(r) = stem.strip_prefix("id_") {
        (Label::Unknown, r)
    } else {
        return Err(bad());
    };
    let (id, index) = rest.split_once('_').ok_or_else(bad)?;
    if id.is_empty() || !id.bytes().all(|b| b.is_ascii_digit()) || index.is_empty() {
        return Err(bad());
    }
    Ok(ParsedName {
        label,
        machine_id: id.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileEntry {
    pub path: PathBuf,
    pub name: String,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MachineFiles {
    pub train: Vec<FileEntry>,
    pub test: Vec<FileEntry>,
}

impl MachineFiles {
    pub fn split(&self, split: Split) -> &[FileEntry] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

/// Files grouped by machine type and id, each list sorted by name.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub entries: BTreeMap<String, BTreeMap<String, MachineFiles>>,
    /// WAV files whose names did not parse.
    pub skipped: Vec<PathBuf>,
}

impl DatasetIndex {
    pub fn machine_types(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn machines(&self, machine_type: &str) -> Option<&BTreeMap<String, MachineFiles>> {
        self.entries.get(machine_type)
    }

    /// (train, test) file counts of one machine.
    pub fn counts(&self, machine_type: &str, machine_id: &str) -> Option<(usize, usize)> {
        let m = self.entries.get(machine_type)?.get(machine_id)?;
        Some((m.train.len(), m.test.len()))
    }

    /// All files of one split of a type, ordered by id and then name.
    pub fn files(&self, machine_type: &str, split: Split) -> Vec<(&str, &FileEntry)> {
        self.entries
            .get(machine_type)
            .into_iter()
            .flatten()
            .flat_map(|(id, m)| m.split(split).iter().map(move |f| (id.as_str(), f)))
            .collect()
    }
}

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let io = |source| DatasetError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io)? {
        out.push(entry.map_err(io)?.path());
    }
    out.sort();
    Ok(out)
}

fn is_wav(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

/// Indexes every machine type directory under `root`.
pub fn scan_dataset(root: impl AsRef<Path>) -> Result<DatasetIndex, DatasetError> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(DatasetError::MissingDirectory(root.to_path_buf()));
    }
    let mut index = DatasetIndex {
        root: root.to_path_buf(),
        ..Default::default()
    };
    for type_dir in list_dir(root)?.into_iter().filter(|p| p.is_dir()) {
        let machine_type = type_dir.file_name().expect("directory entry").to_string_lossy().into_owned();
        let mut machines: BTreeMap<String, MachineFiles> = BTreeMap::new();
        for split in [Split::Train, Split::Test] {
            let dir = type_dir.join(split.as_str());
            if !dir.is_dir() {
                return Err(DatasetError::MissingDirectory(dir));
            }
            for path in list_dir(&dir)?.into_iter().filter(|p| p.is_file() && is_wav(p)) {
                let name = path.file_name().expect("file entry").to_string_lossy().into_owned();
                match parse_filename(&name) {
                    Ok(parsed) => {
                        let files = machines.entry(parsed.machine_id).or_default();
                        let entry = FileEntry {
                            path,
                            name,
                            label: parsed.label,
                        };
                        match split {
                            Split::Train => files.train.push(entry),
                            Split::Test => files.test.push(entry),
                        }
                    }
                    Err(e) => {
                        log::warn!("skipping {}: {e}", path.display());
                        index.skipped.push(path);
                    }
                }
            }
        }
        log::info!(
            "{machine_type}: {} machines, {} train / {} test files",
            machines.len(),
            machines.values().map(|m| m.train.len()).sum::<usize>(),
            machines.values().map(|m| m.test.len()).sum::<usize>()
        );
        index.entries.insert(machine_type, machines);
    }
    Ok(index)
}
