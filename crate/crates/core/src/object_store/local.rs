//! Local filesystem backend.
//!
//! Objects map to files under the root directory. Blocks staged for
//! `a/b/name` live in `a/b/name.staged/<block-hex>`; the file starts with the
//! little-endian writer origin followed by the payload. A block commit writes
//! the concatenation to a temp file and renames it over the object, then
//! records the committed block list in `name.staged/.committed` so later
//! commits can list those blocks again.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::{BlockId, ObjectPath, ObjectStore, ObjectVersion, StoreError, StoreResult, STAGED_SUFFIX};

const COMMITTED_INDEX: &str = ".committed";

#[derive(Debug, Default, Serialize, Deserialize)]
struct CommittedIndex {
    version: ObjectVersion,
    blocks: Vec<IndexedBlock>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexedBlock {
    id: String,
    origin: u32,
    offset: usize,
    len: usize,
}

#[derive(Debug)]
pub struct LocalFsStore {
    root: PathBuf,
    path_locks: Mutex<HashMap<ObjectPath, Arc<Mutex<()>>>>,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl LocalFsStore {
    pub fn open(root: impl Into<PathBuf>) -> StoreResult<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(Self {
            root,
            path_locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn file_path(&self, path: &ObjectPath) -> PathBuf {
        let mut p = self.root.clone();
        p.extend(path.segments());
        p
    }

    fn staged_dir(&self, path: &ObjectPath) -> PathBuf {
        let mut p = self.file_path(path);
        let name = format!("{}{}", path.file_name(), STAGED_SUFFIX);
        p.set_file_name(name);
        p
    }

    fn lock_for(&self, path: &ObjectPath) -> Arc<Mutex<()>> {
        self.path_locks
            .lock()
            .entry(path.clone())
            .or_insert_with(|| Arc::new(Mutex::new(())))
            .clone()
    }

    fn temp_path(dir: &Path) -> PathBuf {
        dir.join(format!(".tmp-{:016x}", rand::random::<u64>()))
    }

    fn write_temp(dir: &Path, bytes: &[u8]) -> StoreResult<PathBuf> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let tmp = Self::temp_path(dir);
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_data().map_err(io_err(&tmp))?;
        Ok(tmp)
    }

    fn read_index(&self, path: &ObjectPath) -> StoreResult<Option<CommittedIndex>> {
        let index_path = self.staged_dir(path).join(COMMITTED_INDEX);
        match fs::read(&index_path) {
            Ok(bytes) => Ok(serde_json::from_slice(&bytes).ok()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(&index_path)(e)),
        }
    }

    fn staged_entries(dir: &Path) -> StoreResult<Vec<(BlockId, PathBuf)>> {
        let mut out = Vec::new();
        let entries = match fs::read_dir(dir) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(io_err(dir)(e)),
        };
        for entry in entries {
            let entry = entry.map_err(io_err(dir))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(block) = BlockId::parse_hex(&name, 0) {
                let origin = read_origin(&entry.path()).unwrap_or(0);
                out.push((BlockId { origin, ..block }, entry.path()));
            }
        }
        out.sort();
        Ok(out)
    }

    fn walk(&self, dir: &Path, rel: &mut Vec<String>, visit: &mut dyn FnMut(&[String], &Path, bool)) -> StoreResult<()> {
        let entries = match fs::read_dir(dir) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
            Err(e) => return Err(io_err(dir)(e)),
        };
        for entry in entries {
            let entry = entry.map_err(io_err(dir))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.starts_with(".tmp-") {
                continue;
            }
            let ty = entry.file_type().map_err(io_err(dir))?;
            rel.push(name.clone());
            if ty.is_dir() {
                if name.ends_with(STAGED_SUFFIX) {
                    visit(rel, &entry.path(), true);
                } else {
                    self.walk(&entry.path(), rel, visit)?;
                }
            } else {
                visit(rel, &entry.path(), false);
            }
            rel.pop();
        }
        Ok(())
    }
}

fn read_origin(path: &Path) -> Option<u32> {
    let bytes = fs::read(path).ok()?;
    Some(u32::from_le_bytes(bytes.get(..4)?.try_into().ok()?))
}

impl ObjectStore for LocalFsStore {
    fn stage_block(&self, path: &ObjectPath, block: &BlockId, payload: &[u8]) -> StoreResult<()> {
        if payload.is_empty() {
            return Err(StoreError::EmptyPayload(path.to_string()));
        }
        let dir = self.staged_dir(path);
        let mut framed = Vec::with_capacity(payload.len() + 4);
        framed.extend_from_slice(&block.origin.to_le_bytes());
        framed.extend_from_slice(payload);
        let tmp = Self::write_temp(&dir, &framed)?;
        let dest = dir.join(block.hex());
        fs::rename(&tmp, &dest).map_err(io_err(&dest))
    }

    fn commit_block_list(&self, path: &ObjectPath, blocks: &[BlockId]) -> StoreResult<ObjectVersion> {
        let lock = self.lock_for(path);
        let _guard = lock.lock();
        let dir = self.staged_dir(path);
        let target = self.file_path(path);
        let index = self.read_index(path)?.unwrap_or_default();
        let mut current: Option<Vec<u8>> = None;

        let mut bytes = Vec::new();
        let mut indexed = Vec::with_capacity(blocks.len());
        for block in blocks {
            let staged_file = dir.join(block.hex());
            let payload = match fs::read(&staged_file) {
                Ok(framed) if framed.len() >= 4 => framed[4..].to_vec(),
                Ok(_) => {
                    return Err(StoreError::UnknownBlock {
                        path: path.to_string(),
                        block: block.hex(),
                    })
                }
                Err(e) if e.kind() == io::ErrorKind::NotFound => {
                    let hex = block.hex();
                    let Some(entry) = index.blocks.iter().find(|b| b.id == hex) else {
                        return Err(StoreError::UnknownBlock {
                            path: path.to_string(),
                            block: hex,
                        });
                    };
                    if current.is_none() {
                        current = Some(fs::read(&target).map_err(io_err(&target))?);
                    }
                    let cur = current.as_ref().unwrap();
                    cur.get(entry.offset..entry.offset + entry.len)
                        .ok_or_else(|| StoreError::UnknownBlock {
                            path: path.to_string(),
                            block: hex.clone(),
                        })?
                        .to_vec()
                }
                Err(e) => return Err(io_err(&staged_file)(e)),
            };
            indexed.push(IndexedBlock {
                id: block.hex(),
                origin: block.origin,
                offset: bytes.len(),
                len: payload.len(),
            });
            bytes.extend_from_slice(&payload);
        }

        let parent = target.parent().expect("object paths have a parent").to_path_buf();
        let tmp = Self::write_temp(&parent, &bytes)?;
        fs::rename(&tmp, &target).map_err(io_err(&target))?;

        let version = index.version + 1;
        let new_index = CommittedIndex {
            version,
            blocks: indexed,
        };
        let tmp = Self::write_temp(&dir, &serde_json::to_vec(&new_index).expect("index serializes"))?;
        let index_path = dir.join(COMMITTED_INDEX);
        fs::rename(&tmp, &index_path).map_err(io_err(&index_path))?;

        for (_, file) in Self::staged_entries(&dir)? {
            let _ = fs::remove_file(file);
        }
        Ok(version)
    }

    fn put_object(&self, path: &ObjectPath, payload: &[u8]) -> StoreResult<ObjectVersion> {
        let target = self.file_path(path);
        let parent = target.parent().expect("object paths have a parent").to_path_buf();
        let tmp = Self::write_temp(&parent, payload)?;
        // hard_link refuses to replace an existing file, giving create-if-absent atomically
        let res = fs::hard_link(&tmp, &target);
        let _ = fs::remove_file(&tmp);
        match res {
            Ok(()) => Ok(1),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                Err(StoreError::AlreadyExists(path.to_string()))
            }
            Err(e) => Err(io_err(&target)(e)),
        }
    }

    fn get_object(&self, path: &ObjectPath) -> StoreResult<Vec<u8>> {
        let target = self.file_path(path);
        match fs::read(&target) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(StoreError::NotFound(path.to_string())),
            Err(e) => Err(io_err(&target)(e)),
        }
    }

    fn list_prefix(&self, prefix: &str) -> StoreResult<Vec<ObjectPath>> {
        let mut out = Vec::new();
        let mut rel = Vec::new();
        self.walk(&self.root, &mut rel, &mut |segments, _, staged| {
            if staged {
                return;
            }
            let encoded = segments.join("/");
            if encoded.starts_with(prefix) {
                if let Ok(p) = ObjectPath::parse(&encoded) {
                    out.push(p);
                }
            }
        })?;
        out.sort();
        Ok(out)
    }

    fn delete_object(&self, path: &ObjectPath) -> StoreResult<()> {
        let target = self.file_path(path);
        match fs::remove_file(&target) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(io_err(&target)(e)),
        }
        let _ = fs::remove_file(self.staged_dir(path).join(COMMITTED_INDEX));
        Ok(())
    }

    fn list_staged(&self, prefix: &str) -> StoreResult<Vec<(ObjectPath, Vec<BlockId>)>> {
        let mut dirs = Vec::new();
        let mut rel = Vec::new();
        self.walk(&self.root, &mut rel, &mut |segments, dir, staged| {
            if !staged {
                return;
            }
            let mut segs = segments.to_vec();
            let last = segs.pop().unwrap();
            segs.push(last.trim_end_matches(STAGED_SUFFIX).to_owned());
            let encoded = segs.join("/");
            if encoded.starts_with(prefix) {
                if let Ok(p) = ObjectPath::parse(&encoded) {
                    dirs.push((p, dir.to_path_buf()));
                }
            }
        })?;
        let mut out = Vec::new();
        for (path, dir) in dirs {
            let blocks: Vec<BlockId> = Self::staged_entries(&dir)?.into_iter().map(|(b, _)| b).collect();
            if !blocks.is_empty() {
                out.push((path, blocks));
            }
        }
        out.sort();
        Ok(out)
    }

    fn read_staged(&self, path: &ObjectPath, block: &BlockId) -> StoreResult<Vec<u8>> {
        let file = self.staged_dir(path).join(block.hex());
        match fs::read(&file) {
            Ok(framed) if framed.len() >= 4 => Ok(framed[4..].to_vec()),
            Ok(_) => Err(StoreError::UnknownBlock {
                path: path.to_string(),
                block: block.hex(),
            }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(StoreError::UnknownBlock {
                path: path.to_string(),
                block: block.hex(),
            }),
            Err(e) => Err(io_err(&file)(e)),
        }
    }

    fn discard_staged(&self, path: &ObjectPath) -> StoreResult<()> {
        let lock = self.lock_for(path);
        let _guard = lock.lock();
        for (_, file) in Self::staged_entries(&self.staged_dir(path))? {
            let _ = fs::remove_file(file);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn local_backend_conformance() {
        let dir = tempfile::tempdir().unwrap();
        let store = LocalFsStore::open(dir.path()).unwrap();
        super::super::conformance::run_all(&store);
    }

    #[test]
    fn staged_files_use_reserved_suffix() {
        let dir = tempfile::tempdir().unwrap();
        let store = LocalFsStore::open(dir.path()).unwrap();
        let path = ObjectPath::parse("ws/1/manifests/g.m").unwrap();
        let b = BlockId::random(7);
        store.stage_block(&path, &b, b"line\n").unwrap();
        let staged = dir.path().join("ws/1/manifests/g.m.staged").join(b.hex());
        assert!(staged.exists());
        assert_eq!(store.list_staged("ws/").unwrap(), vec![(path.clone(), vec![b])]);
        store.commit_block_list(&path, &[b]).unwrap();
        assert!(!staged.exists());
        assert!(store.list_prefix("").unwrap().iter().all(|p| !p.as_str().contains(".staged")));
    }

    #[test]
    fn reopened_store_sees_committed_blocks() {
        let dir = tempfile::tempdir().unwrap();
        let path = ObjectPath::parse("ws/1/manifests/g.m").unwrap();
        let b1 = BlockId::random(1);
        {
            let store = LocalFsStore::open(dir.path()).unwrap();
            store.stage_block(&path, &b1, b"a\n").unwrap();
            store.commit_block_list(&path, &[b1]).unwrap();
        }
        let store = LocalFsStore::open(dir.path()).unwrap();
        let b2 = BlockId::random(2);
        store.stage_block(&path, &b2, b"b\n").unwrap();
        store.commit_block_list(&path, &[b1, b2]).unwrap();
        assert_eq!(store.get_object(&path).unwrap(), b"a\nb\n");
    }
}
