use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Homogeneous cluster: `num_nodes` nodes with `devices_per_node` identical
/// devices each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub num_nodes: usize,
    pub devices_per_node: usize,
    pub device_memory_bytes: u64,
    #[serde(rename = "bw_intra")]
    pub bw_intra_bytes_per_sec: f64,
    #[serde(rename = "bw_inter")]
    pub bw_inter_bytes_per_sec: f64,
    #[serde(default)]
    pub link_latency_sec: f64,
}

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid cluster: {0}")]
    Invalid(String),
}

impl ClusterSpec {
    /// Nodes of eight 32 GiB devices, NVLink-class intra-node links and a
    /// 100 Gbit/s inter-node fabric.
    pub fn v100_nodes(num_nodes: usize) -> Self {
        ClusterSpec {
            num_nodes,
            devices_per_node: 8,
            device_memory_bytes: 32 << 30,
            bw_intra_bytes_per_sec: 25e9,
            bw_inter_bytes_per_sec: 12.5e9,
            link_latency_sec: 0.0,
        }
    }

    pub fn total_devices(&self) -> usize {
        self.num_nodes * self.devices_per_node
    }

    pub fn validate(&self) -> Result<(), ClusterError> {
        let bad = |m: &str| Err(ClusterError::Invalid(m.to_string()));
        if self.num_nodes == 0 || self.devices_per_node == 0 {
            return bad("node and device counts must be positive");
        }
        if self.device_memory_bytes == 0 {
            return bad("device memory must be positive");
        }
        if !(self.bw_inter_bytes_per_sec > 0.0) || !self.bw_inter_bytes_per_sec.is_finite() {
            return bad("bw_inter must be positive");
        }
        if !(self.bw_intra_bytes_per_sec >= self.bw_inter_bytes_per_sec) || !self.bw_intra_bytes_per_sec.is_finite() {
            return bad("bw_intra must be at least bw_inter");
        }
        if !(self.link_latency_sec >= 0.0) {
            return bad("link latency must be non-negative");
        }
        Ok(())
    }

    pub fn load<R: Read>(reader: R) -> Result<Self, ClusterError> {
        let c: ClusterSpec = serde_json::from_reader(reader)?;
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_schema() {
        let src = r#"{"num_nodes":4,"devices_per_node":8,"device_memory_bytes":34359738368,
                      "bw_intra":25e9,"bw_inter":12.5e9,"link_latency_sec":0}"#;
        let c = ClusterSpec::load(src.as_bytes()).unwrap();
        assert_eq!(c, ClusterSpec::v100_nodes(4));
        assert_eq!(c.total_devices(), 32);
    }

    #[test]
    fn inter_faster_than_intra_is_invalid() {
        let mut c = ClusterSpec::v100_nodes(1);
        c.bw_inter_bytes_per_sec = 1e12;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_field_rejected() {
        let src = r#"{"num_nodes":1,"devices_per_node":1,"device_memory_bytes":1,
                      "bw_intra":1,"bw_inter":1,"link_latency_sec":0,"gpus":3}"#;
        assert!(matches!(ClusterSpec::load(src.as_bytes()), Err(ClusterError::Parse(_))));
    }
}
