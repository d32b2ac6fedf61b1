use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use parking_lot::Mutex;

use super::{BlockId, ObjectPath, ObjectStore, ObjectVersion, StoreError, StoreResult};

#[derive(Debug, Default)]
struct Committed {
    bytes: Vec<u8>,
    version: ObjectVersion,
    /// Byte ranges of each block when the object came from a block commit.
    blocks: Vec<(BlockId, Range<usize>)>,
}

#[derive(Debug, Default)]
struct Inner {
    objects: BTreeMap<ObjectPath, Committed>,
    staged: HashMap<ObjectPath, BTreeMap<u128, (BlockId, Vec<u8>)>>,
    versions: HashMap<ObjectPath, ObjectVersion>,
}

/// In-process backend, mostly for tests and simulations.
#[derive(Debug, Default)]
pub struct MemoryStore {
    inner: Mutex<Inner>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Inner {
    fn next_version(&mut self, path: &ObjectPath) -> ObjectVersion {
        let v = self.versions.entry(path.clone()).or_insert(0);
        *v += 1;
        *v
    }
}

impl ObjectStore for MemoryStore {
    fn stage_block(&self, path: &ObjectPath, block: &BlockId, payload: &[u8]) -> StoreResult<()> {
        if payload.is_empty() {
            return Err(StoreError::EmptyPayload(path.to_string()));
        }
        self.inner
            .lock()
            .staged
            .entry(path.clone())
            .or_default()
            .insert(block.id, (*block, payload.to_vec()));
        Ok(())
    }

    fn commit_block_list(&self, path: &ObjectPath, blocks: &[BlockId]) -> StoreResult<ObjectVersion> {
        let mut inner = self.inner.lock();
        let staged = inner.staged.get(path);
        let current = inner.objects.get(path);
        let mut bytes = Vec::new();
        let mut ranges = Vec::with_capacity(blocks.len());
        for block in blocks {
            let payload: &[u8] = if let Some((_, p)) = staged.and_then(|s| s.get(&block.id)) {
                p
            } else if let Some((_, r)) = current
                .and_then(|c| c.blocks.iter().find(|(b, _)| b.id == block.id).map(|(b, r)| (b, r.clone())))
            {
                &current.unwrap().bytes[r]
            } else {
                return Err(StoreError::UnknownBlock {
                    path: path.to_string(),
                    block: block.hex(),
                });
            };
            let start = bytes.len();
            bytes.extend_from_slice(payload);
            ranges.push((*block, start..bytes.len()));
        }
        inner.staged.remove(path);
        let version = inner.next_version(path);
        inner.objects.insert(
            path.clone(),
            Committed {
                bytes,
                version,
                blocks: ranges,
            },
        );
        Ok(version)
    }

    fn put_object(&self, path: &ObjectPath, payload: &[u8]) -> StoreResult<ObjectVersion> {
        let mut inner = self.inner.lock();
        if inner.objects.contains_key(path) {
            return Err(StoreError::AlreadyExists(path.to_string()));
        }
        let version = inner.next_version(path);
        inner.objects.insert(
            path.clone(),
            Committed {
                bytes: payload.to_vec(),
                version,
                blocks: Vec::new(),
            },
        );
        Ok(version)
    }

    fn get_object(&self, path: &ObjectPath) -> StoreResult<Vec<u8>> {
        self.inner
            .lock()
            .objects
            .get(path)
            .map(|c| c.bytes.clone())
            .ok_or_else(|| StoreError::NotFound(path.to_string()))
    }

    fn list_prefix(&self, prefix: &str) -> StoreResult<Vec<ObjectPath>> {
        let inner = self.inner.lock();
        Ok(inner
            .objects
            .keys()
            .filter(|p| p.as_str().starts_with(prefix))
            .cloned()
            .collect())
    }

    fn delete_object(&self, path: &ObjectPath) -> StoreResult<()> {
        let mut inner = self.inner.lock();
        if let Some(c) = inner.objects.remove(path) {
            let v = c.version;
            inner.versions.insert(path.clone(), v);
        }
        Ok(())
    }

    fn list_staged(&self, prefix: &str) -> StoreResult<Vec<(ObjectPath, Vec<BlockId>)>> {
        let inner = self.inner.lock();
        let mut out: Vec<_> = inner
            .staged
            .iter()
            .filter(|(p, blocks)| p.as_str().starts_with(prefix) && !blocks.is_empty())
            .map(|(p, blocks)| (p.clone(), blocks.values().map(|(b, _)| *b).collect()))
            .collect();
        out.sort();
        Ok(out)
    }

    fn read_staged(&self, path: &ObjectPath, block: &BlockId) -> StoreResult<Vec<u8>> {
        self.inner
            .lock()
            .staged
            .get(path)
            .and_then(|s| s.get(&block.id))
            .map(|(_, p)| p.clone())
            .ok_or_else(|| StoreError::UnknownBlock {
                path: path.to_string(),
                block: block.hex(),
            })
    }

    fn discard_staged(&self, path: &ObjectPath) -> StoreResult<()> {
        self.inner.lock().staged.remove(path);
        Ok(())
    }
}
