use serde::{Deserialize, Serialize};

use crate::catalog::Isolation;
use crate::dcp::DcpConfig;
use crate::maintenance::MaintenanceConfig;
use crate::txn::Granularity;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// First path segment of every object the engine writes.
    pub workspace: String,
    /// Seeds transaction guids.
    pub seed: u64,
    pub isolation: Isolation,
    pub granularity: Granularity,
    pub dcp: DcpConfig,
    pub maintenance: MaintenanceConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            workspace: "ws".into(),
            seed: 0,
            isolation: Isolation::Snapshot,
            granularity: Granularity::Table,
            dcp: DcpConfig::default(),
            maintenance: MaintenanceConfig::default(),
        }
    }
}
