//! Providers for the content of backing files
//!
//! Reads past the end of a backing file are zero-filled, as for a file mapping whose
//! last page is partial.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use crate::error::BackingError;

/// Something able to serve the content of backing files
pub trait Backing {
    /// Fill `buf` with the bytes of `path` starting at `offset`
    fn read_at(&self, path: &str, offset: u64, buf: &mut [u8]) -> Result<(), BackingError>;

    /// Length of a backing file
    fn file_len(&self, path: &str) -> Result<u64, BackingError>;
}

fn copy_zero_filled(content: &[u8], offset: u64, buf: &mut [u8]) {
    let start = (offset as usize).min(content.len());
    let end = start.saturating_add(buf.len()).min(content.len());
    let n = end - start;
    buf[..n].copy_from_slice(&content[start..end]);
    buf[n..].fill(0);
}

/// Backing files held in memory
#[derive(Debug, Clone, Default)]
pub struct MemBacking {
    files: BTreeMap<String, Vec<u8>>,
}

impl MemBacking {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, content: Vec<u8>) {
        self.files.insert(path.into(), content);
    }

    pub fn get(&self, path: &str) -> Option<&[u8]> {
        self.files.get(path).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[u8])> {
        self.files.iter().map(|(p, c)| (p.as_str(), c.as_slice()))
    }
}

impl FromIterator<(String, Vec<u8>)> for MemBacking {
    fn from_iter<T: IntoIterator<Item = (String, Vec<u8>)>>(iter: T) -> Self {
        MemBacking {
            files: iter.into_iter().collect(),
        }
    }
}

impl Backing for MemBacking {
    fn read_at(&self, path: &str, offset: u64, buf: &mut [u8]) -> Result<(), BackingError> {
        let content = self
            .files
            .get(path)
            .ok_or_else(|| BackingError::MissingBackingFile {
                path: path.to_string(),
            })?;
        copy_zero_filled(content, offset, buf);
        Ok(())
    }

    fn file_len(&self, path: &str) -> Result<u64, BackingError> {
        self.files.get(path).map(|c| c.len() as u64).ok_or_else(|| {
            BackingError::MissingBackingFile {
                path: path.to_string(),
            }
        })
    }
}

/// Backing files found under a root directory
///
/// The absolute path `/usr/lib/libc.so` is looked up as `<root>/usr/lib/libc.so`.
/// File contents are cached after the first read.
#[derive(Debug)]
pub struct DirBacking {
    root: PathBuf,
    cache: Mutex<BTreeMap<String, Arc<Vec<u8>>>>,
}

impl DirBacking {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DirBacking {
            root: root.into(),
            cache: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Host location of a backing path
    pub fn host_path(&self, path: &str) -> PathBuf {
        self.root.join(path.trim_start_matches('/'))
    }

    fn load(&self, path: &str) -> Result<Arc<Vec<u8>>, BackingError> {
        let mut cache = self.cache.lock().expect("backing cache poisoned");
        if let Some(content) = cache.get(path) {
            return Ok(content.clone());
        }
        let host = self.host_path(path);
        let mut file =
            std::fs::File::open(&host).map_err(|_| BackingError::MissingBackingFile {
                path: path.to_string(),
            })?;
        let mut content = Vec::new();
        file.read_to_end(&mut content)
            .map_err(|source| BackingError::ShortBackingRead {
                path: path.to_string(),
                offset: 0,
                source,
            })?;
        let content = Arc::new(content);
        cache.insert(path.to_string(), content.clone());
        Ok(content)
    }
}

impl Backing for DirBacking {
    fn read_at(&self, path: &str, offset: u64, buf: &mut [u8]) -> Result<(), BackingError> {
        let content = self.load(path)?;
        copy_zero_filled(&content, offset, buf);
        Ok(())
    }

    fn file_len(&self, path: &str) -> Result<u64, BackingError> {
        Ok(self.load(path)?.len() as u64)
    }
}

#[cfg(test)]
mod test {
    use super::*;

    #[test]
    fn zero_fill_past_eof() {
        let backing = MemBacking::from_iter([("/a".to_string(), vec![1, 2, 3])]);
        let mut buf = [0xffu8; 5];
        backing.read_at("/a", 1, &mut buf).unwrap();
        assert_eq!(buf, [2, 3, 0, 0, 0]);
        backing.read_at("/a", 100, &mut buf).unwrap();
        assert_eq!(buf, [0; 5]);
        assert!(matches!(
            backing.read_at("/b", 0, &mut buf),
            Err(BackingError::MissingBackingFile { .. })
        ));
    }

    #[test]
    fn directory() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("usr/lib")).unwrap();
        std::fs::write(dir.path().join("usr/lib/x.so"), [7u8; 10]).unwrap();
        let backing = DirBacking::new(dir.path());
        let mut buf = [0u8; 4];
        backing.read_at("/usr/lib/x.so", 8, &mut buf).unwrap();
        assert_eq!(buf, [7, 7, 0, 0]);
        assert_eq!(backing.file_len("/usr/lib/x.so").unwrap(), 10);
        assert!(backing.read_at("/nope", 0, &mut buf).is_err());
    }
}
