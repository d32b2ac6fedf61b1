//! Object naming. Every object an engine transaction writes carries the
//! transaction guid, whose first 16 hex digits are the begin timestamp.

use crate::manifest::{SequenceId, TableId};
use crate::object_store::ObjectPath;

pub const DATA_DIR: &str = "data";
pub const DV_DIR: &str = "dv";
pub const MANIFEST_DIR: &str = "manifests";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const PUBLISH_DIR: &str = "publish";

fn path(parts: &[&str]) -> ObjectPath {
    ObjectPath::new(parts.iter().copied()).expect("engine paths are valid")
}

pub fn table_prefix(ws: &str, table: TableId) -> String {
    format!("{ws}/{table}/")
}

pub fn txn_guid(begin_ts: u64, nonce: u64) -> String {
    format!("{begin_ts:016x}{nonce:016x}")
}

pub fn data_file(ws: &str, table: TableId, guid: &str, statement: u32, task: u32) -> ObjectPath {
    path(&[ws, &table.to_string(), DATA_DIR, &format!("{guid}-s{statement:04}-t{task:04}.col")])
}

pub fn delete_vector(ws: &str, table: TableId, guid: &str, statement: u32, task: u32) -> ObjectPath {
    path(&[ws, &table.to_string(), DV_DIR, &format!("{guid}-s{statement:04}-t{task:04}.dv")])
}

pub fn manifest(ws: &str, table: TableId, guid: &str) -> ObjectPath {
    path(&[ws, &table.to_string(), MANIFEST_DIR, &format!("{guid}.m")])
}

pub fn checkpoint(ws: &str, table: TableId, upto: SequenceId) -> ObjectPath {
    path(&[ws, &table.to_string(), CHECKPOINT_DIR, &format!("{upto:020}.ckpt")])
}

pub fn publish_log_dir(ws: &str, table: TableId) -> String {
    format!("{ws}/{table}/{PUBLISH_DIR}/_log/")
}

pub fn publish_log(ws: &str, table: TableId, seq: SequenceId) -> ObjectPath {
    path(&[ws, &table.to_string(), PUBLISH_DIR, "_log", &format!("{seq:020}.json")])
}

/// Begin timestamp encoded in a guid-prefixed file name.
pub fn creation_stamp(path: &ObjectPath) -> Option<u64> {
    let name = path.file_name();
    let guid = name.get(..32)?;
    if !guid.bytes().all(|b| b.is_ascii_hexdigit()) {
        return None;
    }
    u64::from_str_radix(&guid[..16], 16).ok()
}

/// The kind directory of an engine path (`data`, `dv`, ...).
pub fn kind_of(path: &ObjectPath) -> Option<&str> {
    path.segments().nth(2)
}
