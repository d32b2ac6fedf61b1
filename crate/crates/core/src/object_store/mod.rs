//! Object storage with block-blob semantics.
//!
//! Two kinds of writes are supported. Data files, delete vectors and
//! checkpoints are written whole with [`ObjectStore::put_object`] and never
//! change afterwards. Transaction manifests are assembled from independently
//! staged blocks: writers call [`ObjectStore::stage_block`] and the
//! coordinator makes an ordered selection of them visible at once with
//! [`ObjectStore::commit_block_list`]. Staged blocks are never visible to
//! readers and anything not named in a commit is discarded.

mod local;
mod memory;

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use local::LocalFsStore;
pub use memory::MemoryStore;

/// Maximum encoded length of a path, in bytes.
pub const MAX_PATH_LEN: usize = 1024;

/// Directory suffix reserved for staged blocks.
pub const STAGED_SUFFIX: &str = ".staged";

pub type ObjectVersion = u64;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("object not found: {0}")]
    NotFound(String),
    #[error("object already exists: {0}")]
    AlreadyExists(String),
    #[error("block {block} is not staged or committed for {path}")]
    UnknownBlock { path: String, block: String },
    #[error("empty block payload for {0}")]
    EmptyPayload(String),
    #[error("invalid object path {path:?}: {reason}")]
    InvalidPath { path: String, reason: &'static str },
    #[error("storage io on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type StoreResult<T> = Result<T, StoreError>;

/// A validated `/`-separated object path such as `ws/7/data/abc.col`.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ObjectPath(String);

impl ObjectPath {
    pub fn new<I, S>(segments: I) -> StoreResult<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let joined = segments
            .into_iter()
            .map(|s| s.as_ref().to_owned())
            .collect::<Vec<_>>()
            .join("/");
        Self::parse(&joined)
    }

    pub fn parse(encoded: &str) -> StoreResult<Self> {
        let invalid = |reason| StoreError::InvalidPath {
            path: encoded.to_owned(),
            reason,
        };
        if encoded.is_empty() {
            return Err(invalid("empty path"));
        }
        if encoded.len() > MAX_PATH_LEN {
            return Err(invalid("longer than 1024 bytes"));
        }
        for segment in encoded.split('/') {
            if segment.is_empty() {
                return Err(invalid("empty segment"));
            }
            if segment == "." || segment == ".." {
                return Err(invalid("relative segment"));
            }
            if segment.contains('\\') || segment.contains('\0') {
                return Err(invalid("segment contains a separator"));
            }
            if segment.ends_with(STAGED_SUFFIX) || segment.starts_with(".tmp-") {
                return Err(invalid("reserved segment name"));
            }
        }
        Ok(Self(encoded.to_owned()))
    }

    /// Appends one segment.
    pub fn child(&self, segment: &str) -> StoreResult<Self> {
        Self::parse(&format!("{}/{}", self.0, segment))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn segments(&self) -> impl Iterator<Item = &str> {
        self.0.split('/')
    }

    pub fn file_name(&self) -> &str {
        self.0.rsplit('/').next().unwrap_or(&self.0)
    }

    pub fn parent(&self) -> Option<&str> {
        self.0.rsplit_once('/').map(|(p, _)| p)
    }
}

impl fmt::Display for ObjectPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for ObjectPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl TryFrom<String> for ObjectPath {
    type Error = StoreError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::parse(&value)
    }
}

impl From<ObjectPath> for String {
    fn from(value: ObjectPath) -> Self {
        value.0
    }
}

/// Identifier of a staged block: 128 random bits plus the writer that produced it.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockId {
    pub id: u128,
    pub origin: u32,
}

impl BlockId {
    pub fn random(origin: u32) -> Self {
        Self::from_rng(&mut rand::thread_rng(), origin)
    }

    pub fn from_rng<R: Rng + ?Sized>(rng: &mut R, origin: u32) -> Self {
        Self {
            id: rng.gen(),
            origin,
        }
    }

    /// The 32 character lowercase hex rendering used as the staged file name.
    pub fn hex(&self) -> String {
        format!("{:032x}", self.id)
    }

    pub fn parse_hex(s: &str, origin: u32) -> Option<Self> {
        if s.len() != 32 {
            return None;
        }
        u128::from_str_radix(s, 16)
            .ok()
            .map(|id| Self { id, origin })
    }
}

impl fmt::Debug for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.hex(), self.origin)
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.hex())
    }
}

/// Block-blob capable object storage.
///
/// Implementations must be safe to share across threads. Commits on the same
/// path are serialized; staging may run fully in parallel.
pub trait ObjectStore: Send + Sync + fmt::Debug {
    /// Uploads a block without changing the object. Re-staging the same id
    /// replaces its payload.
    fn stage_block(&self, path: &ObjectPath, block: &BlockId, payload: &[u8]) -> StoreResult<()>;

    /// Atomically replaces the object content with the concatenation of the
    /// listed blocks. A listed block may be currently staged or part of the
    /// object's current committed block list. Every other staged block of the
    /// path is discarded.
    fn commit_block_list(&self, path: &ObjectPath, blocks: &[BlockId]) -> StoreResult<ObjectVersion>;

    /// Writes an immutable object. Fails if the path already holds committed content.
    fn put_object(&self, path: &ObjectPath, payload: &[u8]) -> StoreResult<ObjectVersion>;

    fn get_object(&self, path: &ObjectPath) -> StoreResult<Vec<u8>>;

    /// Committed objects whose encoded path starts with `prefix`, sorted.
    fn list_prefix(&self, prefix: &str) -> StoreResult<Vec<ObjectPath>>;

    /// Removes the committed object. Missing paths are not an error.
    fn delete_object(&self, path: &ObjectPath) -> StoreResult<()>;

    /// Staged (uncommitted) blocks under `prefix`, grouped by object path.
    fn list_staged(&self, prefix: &str) -> StoreResult<Vec<(ObjectPath, Vec<BlockId>)>>;

    fn read_staged(&self, path: &ObjectPath, block: &BlockId) -> StoreResult<Vec<u8>>;

    /// Drops every staged block of `path`; committed content is untouched.
    fn discard_staged(&self, path: &ObjectPath) -> StoreResult<()>;

    fn exists(&self, path: &ObjectPath) -> StoreResult<bool> {
        match self.get_object(path) {
            Ok(_) => Ok(true),
            Err(StoreError::NotFound(_)) => Ok(false),
            Err(e) => Err(e),
        }
    }
}

/// Writes `payload` unless the object already exists with exactly these bytes.
///
/// Retried tasks produce the same deterministic files as the attempt that
/// failed, so an identical existing object counts as success.
pub fn put_if_absent_or_same(
    store: &dyn ObjectStore,
    path: &ObjectPath,
    payload: &[u8],
) -> StoreResult<()> {
    match store.put_object(path, payload) {
        Ok(_) => Ok(()),
        Err(StoreError::AlreadyExists(p)) => {
            if store.get_object(path)? == payload {
                Ok(())
            } else {
                Err(StoreError::AlreadyExists(p))
            }
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
pub(crate) mod conformance {
    //! Behaviour every backend must share.

    use super::*;

    fn p(s: &str) -> ObjectPath {
        ObjectPath::parse(s).unwrap()
    }

    pub fn staging_is_invisible(store: &dyn ObjectStore) {
        let path = p("ws/t1/manifests/X2.m");
        let b1 = BlockId::random(1);
        store.stage_block(&path, &b1, b"add\n").unwrap();
        assert!(matches!(store.get_object(&path), Err(StoreError::NotFound(_))));
        assert!(store.list_prefix("ws/t1/").unwrap().is_empty());
        assert_eq!(store.read_staged(&path, &b1).unwrap(), b"add\n");
    }

    pub fn commit_discards_unlisted(store: &dyn ObjectStore) {
        let path = p("ws/t1/manifests/X3.m");
        let (b1, b2, b3) = (BlockId::random(1), BlockId::random(2), BlockId::random(3));
        store.stage_block(&path, &b1, b"one\n").unwrap();
        store.stage_block(&path, &b2, b"two\n").unwrap();
        store.stage_block(&path, &b3, b"three\n").unwrap();
        store.commit_block_list(&path, &[b1, b2]).unwrap();
        assert_eq!(store.get_object(&path).unwrap(), b"one\ntwo\n");
        assert!(store.list_staged("ws/t1/manifests/X3").unwrap().is_empty());
        assert!(store.read_staged(&path, &b3).is_err());

        // committed blocks may be listed again, which is how statements append
        let b4 = BlockId::random(4);
        store.stage_block(&path, &b4, b"four\n").unwrap();
        let v = store.commit_block_list(&path, &[b1, b2, b4]).unwrap();
        assert!(v >= 2);
        assert_eq!(store.get_object(&path).unwrap(), b"one\ntwo\nfour\n");
        store.commit_block_list(&path, &[b4, b1]).unwrap();
        assert_eq!(store.get_object(&path).unwrap(), b"four\none\n");
    }

    pub fn commit_empty_and_unknown(store: &dyn ObjectStore) {
        let path = p("ws/t1/manifests/X4.m");
        store.stage_block(&path, &BlockId::random(1), b"x").unwrap();
        store.commit_block_list(&path, &[]).unwrap();
        assert_eq!(store.get_object(&path).unwrap(), b"");
        assert!(store.list_staged("ws/t1/manifests/X4").unwrap().is_empty());

        let err = store.commit_block_list(&path, &[BlockId::random(9)]).unwrap_err();
        assert!(matches!(err, StoreError::UnknownBlock { .. }));
        assert_eq!(store.get_object(&path).unwrap(), b"");
    }

    pub fn empty_payload_rejected(store: &dyn ObjectStore) {
        let path = p("ws/t1/manifests/X5.m");
        let err = store.stage_block(&path, &BlockId::random(1), b"").unwrap_err();
        assert!(matches!(err, StoreError::EmptyPayload(_)));
    }

    pub fn put_get_delete(store: &dyn ObjectStore) {
        let a = p("ws/t1/data/2.col");
        let b = p("ws/t1/data/1.col");
        store.put_object(&a, b"aa").unwrap();
        store.put_object(&b, b"bb").unwrap();
        assert_eq!(store.get_object(&a).unwrap(), b"aa");
        assert!(matches!(store.put_object(&a, b"zz"), Err(StoreError::AlreadyExists(_))));
        assert_eq!(store.get_object(&a).unwrap(), b"aa");
        assert_eq!(store.list_prefix("ws/t1/data/").unwrap(), vec![b.clone(), a.clone()]);
        store.delete_object(&a).unwrap();
        store.delete_object(&a).unwrap();
        assert!(matches!(store.get_object(&a), Err(StoreError::NotFound(_))));
        assert_eq!(store.list_prefix("ws/t1/data/").unwrap(), vec![b]);
        put_if_absent_or_same(store, &p("ws/t1/data/3.col"), b"c").unwrap();
        put_if_absent_or_same(store, &p("ws/t1/data/3.col"), b"c").unwrap();
        assert!(put_if_absent_or_same(store, &p("ws/t1/data/3.col"), b"d").is_err());
    }

    pub fn concurrent_staging(store: &dyn ObjectStore) {
        let path = p("ws/t1/manifests/X6.m");
        let blocks: Vec<(BlockId, Vec<u8>)> = (0..8u32)
            .map(|i| (BlockId::random(i), vec![b'a' + i as u8; 4096 + i as usize]))
            .collect();
        std::thread::scope(|s| {
            for (id, payload) in &blocks {
                let path = &path;
                s.spawn(move || store.stage_block(path, id, payload).unwrap());
            }
        });
        for (id, payload) in &blocks {
            assert_eq!(&store.read_staged(&path, id).unwrap(), payload);
        }
        let ids: Vec<BlockId> = blocks.iter().map(|(b, _)| *b).collect();
        store.commit_block_list(&path, &ids).unwrap();
        let expected: Vec<u8> = blocks.iter().flat_map(|(_, p)| p.clone()).collect();
        assert_eq!(store.get_object(&path).unwrap(), expected);
    }

    pub fn run_all(store: &dyn ObjectStore) {
        staging_is_invisible(store);
        commit_discards_unlisted(store);
        commit_empty_and_unknown(store);
        empty_payload_rejected(store);
        put_get_delete(store);
        concurrent_staging(store);
    }
}
