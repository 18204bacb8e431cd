//! Host-state snapshots for leak checks: mount table, plugcell-owned cgroup
//! directories, and nf_tables tables in the host netns. Attack runs and
//! attach/detach cycles must leave all three byte-identical.

use std::fs;
use std::path::PathBuf;

use crate::sandbox::{cgroup, firewall};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostSnapshot {
    pub mounts: Vec<String>,
    pub cgroups: Vec<String>,
    pub nft_tables: Vec<String>,
}

pub fn capture() -> std::io::Result<HostSnapshot> {
    let mut mounts: Vec<String> = fs::read_to_string("/proc/self/mounts")?
        .lines()
        .map(str::to_string)
        .collect();
    mounts.sort();
    let cgroups = cgroup::list_sandbox_cgroups();
    let nft_tables = firewall::list_tables(&PathBuf::from("/proc/self/ns/net")).unwrap_or_default();
    Ok(HostSnapshot {
        mounts,
        cgroups,
        nft_tables,
    })
}

impl HostSnapshot {
    /// Human-readable differences against a later snapshot; empty when the
    /// host state is byte-identical.
    pub fn diff(&self, later: &HostSnapshot) -> Vec<String> {
        let mut out = Vec::new();
        for m in &later.mounts {
            if !self.mounts.contains(m) {
                out.push(format!("mount added: {m}"));
            }
        }
        for m in &self.mounts {
            if !later.mounts.contains(m) {
                out.push(format!("mount removed: {m}"));
            }
        }
        for c in &later.cgroups {
            if !self.cgroups.contains(c) {
                out.push(format!("cgroup added: {c}"));
            }
        }
        for c in &self.cgroups {
            if !later.cgroups.contains(c) {
                out.push(format!("cgroup removed: {c}"));
            }
        }
        for t in &later.nft_tables {
            if !self.nft_tables.contains(t) {
                out.push(format!("nft table added: {t}"));
            }
        }
        for t in &self.nft_tables {
            if !later.nft_tables.contains(t) {
                out.push(format!("nft table removed: {t}"));
            }
        }
        out
    }
}
