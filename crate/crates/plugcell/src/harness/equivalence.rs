//! Collector equivalence: the same collector logic, run once inside the
//! sandbox and once in the guest's own context, must produce the same
//! records after normalizing timestamps and self-process exclusion.
//!
//! The guest's process tree is frozen for the comparison window so live
//! counters (cpu usage, memory) cannot drift between the two runs.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;
use std::time::Duration;

use serde_json::Value;

use crate::collectors::COLLECTOR_NAMES;
use crate::policy::{default_policy, PolicyOptions};
use crate::record::{validate_line, CollectionRecord, FeatureType};
use crate::sandbox::{self, exec_runner, teardown, SandboxConfig, SANDBOX_BIN};

use super::fixture::FixtureGuest;

/// Tolerance for metric values that the freezer cannot pin perfectly
/// (memory accounting may reclaim a page or two mid-freeze).
fn metric_values_equal(key: &str, a: f64, b: f64) -> bool {
    let band = match key {
        "memory_bytes" => (a.max(b) * 0.05).max(1_048_576.0),
        "cpu_usage_ns" => 50_000_000.0, // 50ms of residual accounting
        _ => 0.0,
    };
    (a - b).abs() <= band
}

fn normalize(records: &[CollectionRecord]) -> BTreeMap<String, Value> {
    let mut map = BTreeMap::new();
    for rec in records {
        if rec.feature_type == FeatureType::Error {
            continue;
        }
        let key = format!("{}/{}", serde_json::to_string(&rec.feature_type).unwrap(), rec.feature_key);
        map.insert(key, Value::Object(rec.payload.clone()));
    }
    map
}

/// Field-level differences between a sandbox-context run and a
/// guest-context run of the same collector. Empty = equivalent.
pub fn diff_outputs(collector: &str, sandbox_records: &[CollectionRecord], guest_records: &[CollectionRecord]) -> Vec<String> {
    let mut diffs = Vec::new();
    let a = normalize(sandbox_records);
    let b = normalize(guest_records);
    for key in a.keys() {
        if !b.contains_key(key) {
            diffs.push(format!("{collector}: {key} only in sandbox output"));
        }
    }
    for key in b.keys() {
        if !a.contains_key(key) {
            diffs.push(format!("{collector}: {key} only in guest output"));
        }
    }
    for (key, va) in &a {
        let Some(vb) = b.get(key) else { continue };
        let (Some(oa), Some(ob)) = (va.as_object(), vb.as_object()) else {
            if va != vb {
                diffs.push(format!("{collector}: {key} payload shape differs"));
            }
            continue;
        };
        for (field, fa) in oa {
            match ob.get(field) {
                None => diffs.push(format!("{collector}: {key}.{field} missing in guest output")),
                Some(fb) if fa == fb => {}
                Some(fb) => {
                    let metric_key = key.rsplit('/').next().unwrap_or("");
                    let nums = (fa.as_f64(), fb.as_f64());
                    let tolerated = collector == "metrics"
                        && field == "value"
                        && matches!(nums, (Some(x), Some(y)) if metric_values_equal(metric_key, x, y));
                    if !tolerated {
                        diffs.push(format!(
                            "{collector}: {key}.{field} differs: sandbox={fa} guest={fb}"
                        ));
                    }
                }
            }
        }
        for field in ob.keys() {
            if !oa.contains_key(field) {
                diffs.push(format!("{collector}: {key}.{field} missing in sandbox output"));
            }
        }
    }
    diffs
}

fn parse_records(raw: &[u8]) -> Vec<CollectionRecord> {
    raw.split(|b| *b == b'\n')
        .filter(|l| !l.is_empty())
        .filter_map(|l| validate_line(l).ok())
        .collect()
}

/// Run one collector inside a fresh sandbox over the guest and return its
/// records (stdout is captured via the comm log).
fn run_in_sandbox(
    guest: &FixtureGuest,
    collector: &str,
    base_dir: &Path,
    bin_dir: &Path,
) -> io::Result<Vec<CollectionRecord>> {
    let target = guest.resolve().map_err(io::Error::other)?;
    let policy = default_policy(&target, &PolicyOptions::default()).map_err(io::Error::other)?;
    let config = SandboxConfig {
        bin_dir: bin_dir.to_path_buf(),
        base_dir: base_dir.to_path_buf(),
        ablation: None,
    };
    let mut handle = sandbox::create_sandbox(&target, &policy, &config).map_err(io::Error::other)?;
    let log_path = handle.comm_dir.join(crate::comm::LOG_FILE);
    let mut env = BTreeMap::new();
    env.insert("PLUGCELL_NAMESPACE_LABEL".to_string(), guest.name.clone());
    let exe = format!("{SANDBOX_BIN}/{}", crate::collectors::collector_executable(collector));
    exec_runner(&mut handle, &exe, &[], &env).map_err(io::Error::other)?;
    let deadline = std::time::Instant::now() + Duration::from_secs(20);
    while handle.runner_alive() && std::time::Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(20));
    }
    let raw = std::fs::read(&log_path).unwrap_or_default();
    let _ = teardown(&mut handle);
    Ok(parse_records(&raw))
}

fn run_in_guest(guest: &FixtureGuest, collector: &str) -> io::Result<Vec<CollectionRecord>> {
    let exe = format!("/opt/plugcell/bin/{}", crate::collectors::collector_executable(collector));
    let (code, out) = guest.exec_in_guest_context(
        &exe,
        &[],
        &[
            ("PLUGCELL_GUEST_ROOT", "/"),
            ("PLUGCELL_GUEST_CGROUP", "/guest-cgroup"),
            ("PLUGCELL_NAMESPACE_LABEL", &guest.name),
            ("PLUGCELL_CYCLE", "0"),
        ],
    )?;
    if code != 0 {
        return Err(io::Error::other(format!("guest-context {collector} exited {code}")));
    }
    Ok(parse_records(&out))
}

#[derive(Debug, Default)]
pub struct EquivalenceReport {
    pub records_compared: usize,
    pub diffs: Vec<String>,
}

/// Full five-collector equivalence check against one guest.
pub fn check_guest(guest: &FixtureGuest, base_dir: &Path, bin_dir: &Path) -> io::Result<EquivalenceReport> {
    let mut report = EquivalenceReport::default();
    guest.set_frozen(true)?;
    let outcome = (|| -> io::Result<()> {
        for collector in COLLECTOR_NAMES {
            let in_sandbox = run_in_sandbox(guest, collector, base_dir, bin_dir)?;
            let in_guest = run_in_guest(guest, collector)?;
            if in_sandbox.is_empty() {
                report.diffs.push(format!("{collector}: sandbox run produced no records"));
            }
            if in_guest.is_empty() {
                report.diffs.push(format!("{collector}: guest run produced no records"));
            }
            report.records_compared += in_sandbox.len() + in_guest.len();
            report.diffs.extend(diff_outputs(collector, &in_sandbox, &in_guest));
        }
        Ok(())
    })();
    let thaw = guest.set_frozen(false);
    outcome?;
    thaw?;
    Ok(report)
}
