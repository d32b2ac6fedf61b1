use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::catalog::{CheckpointRow, ManifestsRow};
use crate::error::EngineResult;
use crate::manifest::{Checkpoint, SequenceId, TableId, TableState, TransactionManifest};
use crate::object_store::{ObjectPath, ObjectStore, StoreError};

const STATES_PER_TABLE: usize = 16;
const MAX_MANIFESTS: usize = 16_384;

/// Reconstructed table states keyed by the last sequence they include,
/// plus decoded committed manifests. Committed manifests never change, so
/// both caches are only ever extended.
#[derive(Debug, Default)]
pub(crate) struct StateCache {
    states: Mutex<HashMap<TableId, BTreeMap<SequenceId, Arc<TableState>>>>,
    manifests: Mutex<HashMap<ObjectPath, Arc<TransactionManifest>>>,
}

impl StateCache {
    pub fn manifest(&self, store: &dyn ObjectStore, row: &ManifestsRow) -> EngineResult<Arc<TransactionManifest>> {
        if let Some(m) = self.manifests.lock().get(&row.manifest_file) {
            return Ok(m.clone());
        }
        let bytes = store.get_object(&row.manifest_file)?;
        let m = Arc::new(TransactionManifest::decode(row.table_id, &bytes)?);
        let mut cache = self.manifests.lock();
        if cache.len() >= MAX_MANIFESTS {
            cache.clear();
        }
        cache.insert(row.manifest_file.clone(), m.clone());
        Ok(m)
    }

    /// State of `table` after applying `rows` (its visible manifests sorted
    /// by sequence). Starts from the best cached state or checkpoint.
    pub fn state(
        &self,
        store: &dyn ObjectStore,
        table: TableId,
        rows: &[ManifestsRow],
        checkpoints: &[CheckpointRow],
    ) -> EngineResult<Arc<TableState>> {
        let Some(target) = rows.last().map(|r| r.sequence_id) else {
            return Ok(Arc::new(TableState::empty()));
        };
        let cached = self
            .states
            .lock()
            .get(&table)
            .and_then(|m| m.range(..=target).next_back().map(|(k, v)| (*k, v.clone())));
        if let Some((k, s)) = &cached {
            if *k == target {
                return Ok(s.clone());
            }
        }
        let checkpoint = checkpoints
            .iter()
            .filter(|c| c.upto_sequence <= target && rows.iter().any(|r| r.sequence_id == c.upto_sequence))
            .max_by_key(|c| c.upto_sequence);
        let cached_seq = cached.as_ref().map_or(0, |(k, _)| *k);
        let from_checkpoint = match checkpoint {
            Some(c) if c.upto_sequence > cached_seq => match store.get_object(&c.path) {
                Ok(bytes) => Some(Checkpoint::decode(&bytes)?.state),
                Err(StoreError::NotFound(_)) => None,
                Err(e) => return Err(e.into()),
            },
            _ => None,
        };
        let mut state = match from_checkpoint {
            Some(s) => s,
            None => cached.map(|(_, s)| (*s).clone()).unwrap_or_default(),
        };
        let from = state.as_of_sequence;
        for row in rows.iter().filter(|r| r.sequence_id > from) {
            let m = self.manifest(store, row)?;
            state.apply_in_place(&m, row.sequence_id)?;
        }
        let state = Arc::new(state);
        let mut states = self.states.lock();
        let per_table = states.entry(table).or_default();
        per_table.insert(target, state.clone());
        while per_table.len() > STATES_PER_TABLE {
            let first = *per_table.keys().next().unwrap();
            per_table.remove(&first);
        }
        Ok(state)
    }

    pub fn forget_table(&self, table: TableId) {
        self.states.lock().remove(&table);
    }
}
