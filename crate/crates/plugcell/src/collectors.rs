//! Reference plugin set exercising every access path the sandbox grants:
//! guest disk via the read-only rootfs and chroot, guest memory via the
//! shared pid namespace and procfs, network state via the shared net
//! namespace, and resource stats via the guest's cgroup subtree.
//!
//! Each collector doubles as a standalone executable speaking the runner's
//! stdout contract, and as a library function so equivalence tests can run
//! the identical logic in the guest's own context.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::clock::{Clock, SystemClock};
use crate::record::{CollectionRecord, FeatureType};
use crate::runner::enter_guest_root;

/// Where a collector looks for guest state. Inside the sandbox this is
/// `/guest` + `/guest-cgroup` + the shared `/proc`; run in the guest's own
/// context it is simply `/`.
#[derive(Debug, Clone)]
pub struct GuestView {
    pub guest_root: PathBuf,
    pub guest_cgroup: PathBuf,
    pub proc_root: PathBuf,
    pub namespace_label: String,
    pub cycle: u64,
}

impl GuestView {
    pub fn from_env() -> GuestView {
        let var = |k: &str, d: &str| std::env::var(k).unwrap_or_else(|_| d.to_string());
        GuestView {
            guest_root: PathBuf::from(var("PLUGCELL_GUEST_ROOT", "/guest")),
            guest_cgroup: PathBuf::from(var("PLUGCELL_GUEST_CGROUP", "/guest-cgroup")),
            proc_root: PathBuf::from(var("PLUGCELL_PROC", "/proc")),
            namespace_label: var("PLUGCELL_NAMESPACE_LABEL", "guest"),
            cycle: var("PLUGCELL_CYCLE", "0").parse().unwrap_or(0),
        }
    }
}

fn now_ms() -> i64 {
    SystemClock.now_ms() as i64
}

fn record(view: &GuestView, ft: FeatureType, key: &str, payload: Map<String, Value>) -> CollectionRecord {
    CollectionRecord::new(&view.namespace_label, ft, key, now_ms(), view.cycle, payload)
}

fn error_record(view: &GuestView, key: &str, reason: &str) -> CollectionRecord {
    CollectionRecord::error(&view.namespace_label, key, now_ms(), view.cycle, reason)
}

fn obj(value: Value) -> Map<String, Value> {
    match value {
        Value::Object(m) => m,
        _ => Map::new(),
    }
}

/// One `os` record: distro id, version, hostname — read with the filesystem
/// root switched to the guest rootfs so the parsing logic is path-identical
/// to running inside the guest.
pub fn collect_os(view: &GuestView) -> Vec<CollectionRecord> {
    let out = enter_guest_root(&view.guest_root, || {
        let os_release = fs::read_to_string("/etc/os-release").unwrap_or_default();
        let hostname = fs::read_to_string("/etc/hostname").unwrap_or_default();
        serde_json::to_vec(&json!({
            "os_release": os_release,
            "hostname": hostname.trim(),
        }))
        .unwrap_or_default()
    });
    let raw: Value = match out.and_then(|bytes| serde_json::from_slice(&bytes).map_err(std::io::Error::other)) {
        Ok(v) => v,
        Err(_) => return vec![error_record(view, "os", "chroot_failed")],
    };
    let text = raw["os_release"].as_str().unwrap_or("");
    if text.is_empty() {
        return vec![error_record(view, "os", "missing_file")];
    }
    let mut fields = BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            fields.insert(k.trim().to_string(), v.trim().trim_matches('"').to_string());
        }
    }
    let payload = obj(json!({
        "os_id": fields.get("ID").cloned().unwrap_or_default(),
        "os_version": fields.get("VERSION_ID").cloned().unwrap_or_default(),
        "pretty_name": fields.get("PRETTY_NAME").cloned().unwrap_or_default(),
        "hostname": raw["hostname"].as_str().unwrap_or(""),
    }));
    vec![record(view, FeatureType::Os, "os", payload)]
}

/// Cgroup path marker identifying our own sandbox, for self-exclusion.
fn own_sandbox_marker() -> Option<String> {
    let content = fs::read_to_string("/proc/self/cgroup").ok()?;
    for line in content.lines() {
        if let Some(idx) = line.find("/plugcell/") {
            let tail = &line[idx + "/plugcell/".len()..];
            let name = tail.split('/').next()?.trim();
            if !name.is_empty() {
                return Some(format!("/plugcell/{name}"));
            }
        }
    }
    None
}

fn excluded(proc_root: &Path, pid: i32, own_pid: i32, marker: &Option<String>) -> bool {
    if pid == own_pid {
        return true;
    }
    if let Some(marker) = marker {
        if let Ok(cg) = fs::read_to_string(proc_root.join(pid.to_string()).join("cgroup")) {
            if cg.contains(marker.as_str()) {
                return true;
            }
        }
    }
    false
}

fn guest_pids(view: &GuestView) -> Vec<i32> {
    let own_pid = std::process::id() as i32;
    let marker = own_sandbox_marker();
    let mut pids: Vec<i32> = Vec::new();
    if let Ok(entries) = fs::read_dir(&view.proc_root) {
        for e in entries.flatten() {
            if let Ok(pid) = e.file_name().to_string_lossy().parse::<i32>() {
                if !excluded(&view.proc_root, pid, own_pid, &marker) {
                    pids.push(pid);
                }
            }
        }
    }
    pids.sort_unstable();
    pids
}

/// One `process` record per guest pid. The runner's own subtree is excluded
/// by cgroup membership; pids vanishing mid-scan are skipped silently.
pub fn collect_processes(view: &GuestView) -> Vec<CollectionRecord> {
    let mut records = Vec::new();
    for pid in guest_pids(view) {
        let dir = view.proc_root.join(pid.to_string());
        let Ok(stat) = fs::read_to_string(dir.join("stat")) else { continue };
        let comm = stat
            .split_once('(')
            .and_then(|(_, r)| r.rsplit_once(')'))
            .map(|(c, _)| c.to_string())
            .unwrap_or_default();
        let start_time = stat
            .rsplit_once(')')
            .map(|(_, r)| r)
            .and_then(|r| r.split_whitespace().nth(19))
            .unwrap_or("0")
            .to_string();
        let cmdline = fs::read(dir.join("cmdline"))
            .map(|b| {
                b.split(|c| *c == 0)
                    .filter(|s| !s.is_empty())
                    .map(|s| String::from_utf8_lossy(s).into_owned())
                    .collect::<Vec<_>>()
            })
            .unwrap_or_default();
        let uid = fs::read_to_string(dir.join("status"))
            .ok()
            .and_then(|s| {
                s.lines()
                    .find_map(|l| l.strip_prefix("Uid:").map(|r| r.trim().to_string()))
            })
            .and_then(|r| r.split_whitespace().next().map(str::to_string))
            .unwrap_or_default();
        let payload = obj(json!({
            "pid": pid,
            "comm": comm,
            "cmdline": cmdline,
            "uid": uid,
            "start_time": start_time,
        }));
        records.push(record(view, FeatureType::Process, &format!("pid/{pid}"), payload));
    }
    records
}

/// `open_file` records from dereferencing each guest pid's fd table.
/// Needs the ptrace read credential; without it every pid yields one error
/// record and no open_file records.
pub fn collect_open_files(view: &GuestView) -> Vec<CollectionRecord> {
    let mut records = Vec::new();
    for pid in guest_pids(view) {
        let fd_dir = view.proc_root.join(pid.to_string()).join("fd");
        let entries = match fs::read_dir(&fd_dir) {
            Ok(e) => e,
            Err(err) => {
                if view.proc_root.join(pid.to_string()).exists() {
                    records.push(error_record(
                        view,
                        &format!("pid/{pid}/fd"),
                        &format!("permission:{}", err.kind()),
                    ));
                }
                continue;
            }
        };
        for e in entries.flatten() {
            let fd: i32 = match e.file_name().to_string_lossy().parse() {
                Ok(fd) => fd,
                Err(_) => continue,
            };
            let Ok(target) = fs::read_link(e.path()) else { continue };
            let payload = obj(json!({
                "pid": pid,
                "fd": fd,
                "target": target.to_string_lossy(),
            }));
            records.push(record(
                view,
                FeatureType::OpenFile,
                &format!("pid/{pid}/fd/{fd}"),
                payload,
            ));
        }
    }
    records
}

fn parse_hex_addr(s: &str) -> Option<(String, u16)> {
    let (ip_hex, port_hex) = s.split_once(':')?;
    let port = u16::from_str_radix(port_hex, 16).ok()?;
    let ip = match ip_hex.len() {
        8 => {
            let v = u32::from_str_radix(ip_hex, 16).ok()?;
            let b = v.to_le_bytes();
            format!("{}.{}.{}.{}", b[0], b[1], b[2], b[3])
        }
        32 => {
            // IPv6 stored as four little-endian u32 groups.
            let mut segs = Vec::new();
            for chunk in 0..4 {
                let v = u32::from_str_radix(&ip_hex[chunk * 8..chunk * 8 + 8], 16).ok()?;
                let b = v.to_le_bytes();
                segs.push(format!("{:02x}{:02x}", b[1], b[0]));
                segs.push(format!("{:02x}{:02x}", b[3], b[2]));
            }
            segs.join(":")
        }
        _ => return None,
    };
    Some((ip, port))
}

fn tcp_state_name(hex: &str) -> &'static str {
    match hex {
        "01" => "ESTABLISHED",
        "02" => "SYN_SENT",
        "03" => "SYN_RECV",
        "04" => "FIN_WAIT1",
        "05" => "FIN_WAIT2",
        "06" => "TIME_WAIT",
        "07" => "CLOSE",
        "08" => "CLOSE_WAIT",
        "09" => "LAST_ACK",
        "0A" => "LISTEN",
        "0B" => "CLOSING",
        _ => "UNKNOWN",
    }
}

/// `connection` records parsed from the namespace's TCP/UDP tables, with
/// best-effort socket-inode → pid correlation from the fd scan.
pub fn collect_connections(view: &GuestView) -> Vec<CollectionRecord> {
    // inode -> pid map from fd symlinks (the ptrace blend's motivating join)
    let mut inode_pid: BTreeMap<u64, i32> = BTreeMap::new();
    for rec in collect_open_files(view) {
        if rec.feature_type != FeatureType::OpenFile {
            continue;
        }
        let target = rec.payload.get("target").and_then(|v| v.as_str()).unwrap_or("");
        if let Some(ino) = target
            .strip_prefix("socket:[")
            .and_then(|s| s.strip_suffix(']'))
            .and_then(|s| s.parse::<u64>().ok())
        {
            let pid = rec.payload.get("pid").and_then(|v| v.as_i64()).unwrap_or(0) as i32;
            inode_pid.entry(ino).or_insert(pid);
        }
    }

    let mut records = Vec::new();
    for proto in ["tcp", "tcp6", "udp", "udp6"] {
        let path = view.proc_root.join("net").join(proto);
        let Ok(content) = fs::read_to_string(&path) else { continue };
        for line in content.lines().skip(1) {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() < 10 {
                continue;
            }
            let Some((local_ip, local_port)) = parse_hex_addr(fields[1]) else { continue };
            let Some((remote_ip, remote_port)) = parse_hex_addr(fields[2]) else { continue };
            let state = if proto.starts_with("tcp") {
                tcp_state_name(fields[3])
            } else {
                "UDP"
            };
            let inode: u64 = fields[9].parse().unwrap_or(0);
            let mut payload = obj(json!({
                "proto": proto,
                "local_ip": local_ip,
                "local_port": local_port,
                "remote_ip": remote_ip,
                "remote_port": remote_port,
                "state": state,
            }));
            if let Some(pid) = inode_pid.get(&inode) {
                payload.insert("pid".into(), json!(pid));
            }
            records.push(record(
                view,
                FeatureType::Connection,
                &format!("{proto}/{local_ip}:{local_port}->{remote_ip}:{remote_port}"),
                payload,
            ));
        }
    }
    records
}

fn read_stat(base: &Path, controller: &str, file: &str) -> Option<String> {
    fs::read_to_string(base.join(controller).join(file))
        .ok()
        .map(|s| s.trim().to_string())
}

/// `metric` records from the guest's cgroup subtree: cpu usage, memory
/// current, pids current, blkio totals. Missing controller → error record.
pub fn collect_metrics(view: &GuestView) -> Vec<CollectionRecord> {
    let base = &view.guest_cgroup;
    let mut records = Vec::new();

    match read_stat(base, "cpuacct", "cpuacct.usage").or_else(|| read_stat(base, "cpu", "cpuacct.usage")) {
        Some(v) => records.push(record(
            view,
            FeatureType::Metric,
            "cpu_usage_ns",
            obj(json!({"value": v.parse::<u64>().unwrap_or(0)})),
        )),
        None => records.push(error_record(view, "cpu_usage_ns", "missing_controller")),
    }
    match read_stat(base, "memory", "memory.usage_in_bytes") {
        Some(v) => records.push(record(
            view,
            FeatureType::Metric,
            "memory_bytes",
            obj(json!({"value": v.parse::<u64>().unwrap_or(0)})),
        )),
        None => records.push(error_record(view, "memory_bytes", "missing_controller")),
    }
    match read_stat(base, "pids", "pids.current") {
        Some(v) => records.push(record(
            view,
            FeatureType::Metric,
            "pids",
            obj(json!({"value": v.parse::<u64>().unwrap_or(0)})),
        )),
        None => records.push(error_record(view, "pids", "missing_controller")),
    }
    match read_stat(base, "blkio", "blkio.throttle.io_service_bytes") {
        Some(content) => {
            let total: u64 = content
                .lines()
                .filter_map(|l| l.strip_prefix("Total "))
                .filter_map(|v| v.trim().parse::<u64>().ok())
                .sum();
            records.push(record(
                view,
                FeatureType::Metric,
                "blkio_bytes",
                obj(json!({"value": total})),
            ));
        }
        None => records.push(error_record(view, "blkio_bytes", "missing_controller")),
    }
    records
}

/// Dispatch by collector name (the executables are thin wrappers over this).
pub fn run_collector(name: &str, view: &GuestView) -> Option<Vec<CollectionRecord>> {
    match name {
        "os" => Some(collect_os(view)),
        "processes" => Some(collect_processes(view)),
        "open-files" => Some(collect_open_files(view)),
        "connections" => Some(collect_connections(view)),
        "metrics" => Some(collect_metrics(view)),
        _ => None,
    }
}

pub const COLLECTOR_NAMES: [&str; 5] = ["os", "processes", "open-files", "connections", "metrics"];

/// Executable name in the plugin store for a collector.
pub fn collector_executable(name: &str) -> String {
    format!("collect-{name}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hex_addresses_parse() {
        assert_eq!(parse_hex_addr("0100007F:1F90"), Some(("127.0.0.1".into(), 8080)));
        assert_eq!(parse_hex_addr("00000000:0050"), Some(("0.0.0.0".into(), 80)));
        assert_eq!(parse_hex_addr("garbage"), None);
    }

    #[test]
    fn own_process_is_excluded() {
        let view = GuestView {
            guest_root: PathBuf::from("/"),
            guest_cgroup: PathBuf::from("/sys/fs/cgroup"),
            proc_root: PathBuf::from("/proc"),
            namespace_label: "self".into(),
            cycle: 0,
        };
        let own = std::process::id().to_string();
        let records = collect_processes(&view);
        assert!(!records.is_empty());
        assert!(records
            .iter()
            .all(|r| r.payload.get("pid").map(|p| p.to_string()) != Some(own.clone())));
    }

    #[test]
    fn connections_cover_a_live_listener() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let port = listener.local_addr().unwrap().port();
        let view = GuestView {
            guest_root: PathBuf::from("/"),
            guest_cgroup: PathBuf::from("/sys/fs/cgroup"),
            proc_root: PathBuf::from("/proc"),
            namespace_label: "self".into(),
            cycle: 0,
        };
        let records = collect_connections(&view);
        let hit = records.iter().any(|r| {
            r.payload.get("local_port").and_then(|v| v.as_u64()) == Some(port as u64)
                && r.payload.get("state").and_then(|v| v.as_str()) == Some("LISTEN")
        });
        assert!(hit, "listener on {port} not seen in {} records", records.len());
    }
}
