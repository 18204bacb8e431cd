//! Resolve a container identifier into the concrete kernel handles the
//! sandbox builder consumes: rootfs path, namespace references, cgroup
//! subtree and owner uid.
//!
//! Resolution is read-only by construction — nothing in here opens a guest
//! path for writing or mutates engine state.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::os::unix::net::UnixStream;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum GuestError {
    #[error("container `{0}` not found")]
    NotFound(String),
    #[error("container `{0}` is not running")]
    NotRunning(String),
    #[error("engine unavailable: {0}")]
    EngineUnavailable(String),
    #[error("guest state unreadable: {0}")]
    Io(#[from] std::io::Error),
}

/// Controllers whose guest subtrees get mounted into the sandbox: the four
/// limited ones plus cpuacct, where split-hierarchy hosts keep cpu usage.
pub const GUEST_CONTROLLERS: [&str; 5] = ["cpu", "cpuacct", "memory", "pids", "blkio"];

/// Resolved handles to one guest container. Immutable after resolution;
/// handles stay valid until the guest exits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuestTarget {
    pub container_id: String,
    pub rootfs_path: PathBuf,
    pub pid_ns_ref: PathBuf,
    pub net_ns_ref: PathBuf,
    pub cgroup_paths: BTreeMap<String, PathBuf>,
    pub owner_uid: u32,
    pub init_pid: i32,
    /// Namespace inode of the guest's pid namespace; identity for liveness.
    pub pid_ns_id: u64,
    pub net_ns_id: u64,
    /// Start time (clock ticks since boot) of `init_pid`, so a recycled pid
    /// is never mistaken for a live guest.
    pub init_start_time: u64,
}

impl GuestTarget {
    /// Handle with made-up identifiers for pure policy-level tests. Nothing
    /// here touches the filesystem.
    pub fn synthetic(id: &str, rootfs: &str, init_pid: i32, owner_uid: u32) -> Self {
        let cgroup_paths = GUEST_CONTROLLERS
            .iter()
            .map(|c| (c.to_string(), PathBuf::from(format!("/sys/fs/cgroup/{c}/{id}"))))
            .collect();
        GuestTarget {
            container_id: id.to_string(),
            rootfs_path: PathBuf::from(rootfs),
            pid_ns_ref: PathBuf::from(format!("/proc/{init_pid}/ns/pid")),
            net_ns_ref: PathBuf::from(format!("/proc/{init_pid}/ns/net")),
            cgroup_paths,
            owner_uid,
            init_pid,
            pid_ns_id: 0,
            net_ns_id: 0,
            init_start_time: 0,
        }
    }
}

/// Raw facts an engine adapter reports about a container.
#[derive(Debug, Clone)]
pub struct EngineGuestInfo {
    pub init_pid: i32,
    pub rootfs_path: PathBuf,
    pub running: bool,
}

/// Source of container metadata. Two implementations ship: a Docker-style
/// local API socket query, and an engine-less fallback taking an explicit
/// `(init_pid, rootfs_path)` pair.
pub trait EngineAdapter {
    fn inspect(&self, container_id: &str) -> Result<EngineGuestInfo, GuestError>;
}

/// Engine-less adapter: the caller already knows the guest's init pid and
/// rootfs (tests, fixtures, `--guest-pid/--guest-rootfs`).
#[derive(Debug, Clone)]
pub struct FallbackAdapter {
    pub init_pid: i32,
    pub rootfs_path: PathBuf,
}

impl EngineAdapter for FallbackAdapter {
    fn inspect(&self, _container_id: &str) -> Result<EngineGuestInfo, GuestError> {
        Ok(EngineGuestInfo {
            init_pid: self.init_pid,
            rootfs_path: self.rootfs_path.clone(),
            running: Path::new(&format!("/proc/{}", self.init_pid)).exists(),
        })
    }
}

/// Read-only metadata query over a container engine's local API socket
/// (Docker-compatible inspect endpoint). No mutating request is ever issued.
#[derive(Debug, Clone)]
pub struct EngineSocketAdapter {
    pub socket_path: PathBuf,
}

impl EngineSocketAdapter {
    pub fn docker_default() -> Self {
        EngineSocketAdapter {
            socket_path: PathBuf::from("/var/run/docker.sock"),
        }
    }

    fn inspect_raw(&self, container_id: &str) -> Result<String, GuestError> {
        let mut stream = UnixStream::connect(&self.socket_path)
            .map_err(|e| GuestError::EngineUnavailable(format!("{}: {e}", self.socket_path.display())))?;
        let request = format!(
            "GET /containers/{container_id}/json HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n"
        );
        stream
            .write_all(request.as_bytes())
            .map_err(|e| GuestError::EngineUnavailable(e.to_string()))?;
        let mut response = String::new();
        stream
            .read_to_string(&mut response)
            .map_err(|e| GuestError::EngineUnavailable(e.to_string()))?;
        let (head, body) = response
            .split_once("\r\n\r\n")
            .ok_or_else(|| GuestError::EngineUnavailable("malformed engine response".into()))?;
        let status = head.split_whitespace().nth(1).unwrap_or("");
        if status == "404" {
            return Err(GuestError::NotFound(container_id.to_string()));
        }
        if status != "200" {
            return Err(GuestError::EngineUnavailable(format!("engine returned {status}")));
        }
        // Chunked responses carry length prefixes; concatenate the chunks.
        if head.to_ascii_lowercase().contains("transfer-encoding: chunked") {
            Ok(dechunk(body))
        } else {
            Ok(body.to_string())
        }
    }
}

fn dechunk(body: &str) -> String {
    let mut out = String::new();
    let mut rest = body;
    while let Some((size_line, tail)) = rest.split_once("\r\n") {
        let size = usize::from_str_radix(size_line.trim(), 16).unwrap_or(0);
        if size == 0 || size > tail.len() {
            break;
        }
        out.push_str(&tail[..size]);
        rest = tail[size..].trim_start_matches("\r\n");
    }
    out
}

/// Extract the fields we need from an engine inspect document.
pub fn parse_engine_inspect(doc: &str, container_id: &str) -> Result<EngineGuestInfo, GuestError> {
    let v: serde_json::Value = serde_json::from_str(doc)
        .map_err(|e| GuestError::EngineUnavailable(format!("bad inspect document: {e}")))?;
    let running = v["State"]["Running"].as_bool().unwrap_or(false);
    let init_pid = v["State"]["Pid"].as_i64().unwrap_or(0) as i32;
    let rootfs = v["GraphDriver"]["Data"]["MergedDir"]
        .as_str()
        .or_else(|| v["Rootfs"].as_str())
        .unwrap_or("");
    if rootfs.is_empty() {
        return Err(GuestError::EngineUnavailable(format!(
            "engine reported no rootfs for `{container_id}`"
        )));
    }
    Ok(EngineGuestInfo {
        init_pid,
        rootfs_path: PathBuf::from(rootfs),
        running: running && init_pid > 0,
    })
}

impl EngineAdapter for EngineSocketAdapter {
    fn inspect(&self, container_id: &str) -> Result<EngineGuestInfo, GuestError> {
        let body = self.inspect_raw(container_id)?;
        parse_engine_inspect(&body, container_id)
    }
}

/// Namespace inode behind a `/proc/<pid>/ns/<kind>` reference.
pub fn ns_inode(path: &Path) -> std::io::Result<u64> {
    use std::os::unix::fs::MetadataExt;
    Ok(fs::metadata(path)?.ino())
}

/// Field 22 of `/proc/<pid>/stat`: process start time in clock ticks.
pub fn proc_start_time(pid: i32) -> std::io::Result<u64> {
    let stat = fs::read_to_string(format!("/proc/{pid}/stat"))?;
    // comm may contain spaces; skip past the closing paren.
    let rest = stat.rsplit_once(')').map(|(_, r)| r).unwrap_or(&stat);
    rest.split_whitespace()
        .nth(19)
        .and_then(|f| f.parse().ok())
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidData, "malformed /proc stat"))
}

/// Real uid of a process, from `/proc/<pid>/status`.
pub fn proc_uid(pid: i32) -> std::io::Result<u32> {
    let status = fs::read_to_string(format!("/proc/{pid}/status"))?;
    for line in status.lines() {
        if let Some(rest) = line.strip_prefix("Uid:") {
            if let Some(uid) = rest.split_whitespace().next() {
                return uid
                    .parse()
                    .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidData, "bad Uid line"));
            }
        }
    }
    Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "no Uid line"))
}

/// Mount point of a v1 cgroup controller, from `/proc/self/mounts`.
pub fn controller_mount(controller: &str) -> Option<PathBuf> {
    let mounts = fs::read_to_string("/proc/self/mounts").ok()?;
    for line in mounts.lines() {
        let mut fields = line.split_whitespace();
        let _dev = fields.next()?;
        let target = fields.next()?;
        let fstype = fields.next()?;
        let opts = fields.next()?;
        if fstype == "cgroup" && opts.split(',').any(|o| o == controller) {
            return Some(PathBuf::from(target));
        }
    }
    None
}

/// Per-controller cgroup path of a process, joined onto the controller's
/// host mount point.
pub fn proc_cgroup_paths(pid: i32) -> std::io::Result<BTreeMap<String, PathBuf>> {
    let content = fs::read_to_string(format!("/proc/{pid}/cgroup"))?;
    let mut out = BTreeMap::new();
    for line in content.lines() {
        let mut parts = line.splitn(3, ':');
        let (_hier, controllers, path) = match (parts.next(), parts.next(), parts.next()) {
            (Some(h), Some(c), Some(p)) => (h, c, p),
            _ => continue,
        };
        for ctrl in controllers.split(',') {
            if !GUEST_CONTROLLERS.contains(&ctrl) {
                continue;
            }
            if let Some(mount) = controller_mount(ctrl) {
                out.insert(ctrl.to_string(), mount.join(path.trim_start_matches('/')));
            }
        }
    }
    Ok(out)
}

/// Resolve a container into a [`GuestTarget`], verifying the rootfs exists
/// and recording namespace identity for later liveness checks.
pub fn resolve_guest(container_id: &str, engine: &dyn EngineAdapter) -> Result<GuestTarget, GuestError> {
    let info = engine.inspect(container_id)?;
    if !info.running || info.init_pid <= 0 {
        return Err(GuestError::NotRunning(container_id.to_string()));
    }
    if !info.rootfs_path.is_dir() {
        return Err(GuestError::NotFound(format!(
            "{container_id} (rootfs {} is not a directory)",
            info.rootfs_path.display()
        )));
    }
    let pid = info.init_pid;
    let pid_ns_ref = PathBuf::from(format!("/proc/{pid}/ns/pid"));
    let net_ns_ref = PathBuf::from(format!("/proc/{pid}/ns/net"));
    let pid_ns_id = ns_inode(&pid_ns_ref).map_err(|_| GuestError::NotRunning(container_id.to_string()))?;
    let net_ns_id = ns_inode(&net_ns_ref).map_err(|_| GuestError::NotRunning(container_id.to_string()))?;
    let init_start_time =
        proc_start_time(pid).map_err(|_| GuestError::NotRunning(container_id.to_string()))?;
    let owner_uid = proc_uid(pid)?;
    let cgroup_paths = proc_cgroup_paths(pid)?;

    Ok(GuestTarget {
        container_id: container_id.to_string(),
        rootfs_path: info.rootfs_path,
        pid_ns_ref,
        net_ns_ref,
        cgroup_paths,
        owner_uid,
        init_pid: pid,
        pid_ns_id,
        net_ns_id,
        init_start_time,
    })
}

/// True iff the resolved init process still exists in the same pid namespace
/// with the same start time. Pid recycling therefore reads as "gone".
pub fn guest_alive(g: &GuestTarget) -> bool {
    let ns_ok = match ns_inode(&g.pid_ns_ref) {
        Ok(ino) => g.pid_ns_id == 0 || ino == g.pid_ns_id,
        Err(_) => false,
    };
    if !ns_ok {
        return false;
    }
    match proc_start_time(g.init_pid) {
        Ok(st) => g.init_start_time == 0 || st == g.init_start_time,
        Err(_) => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fallback_adapter_reports_self_as_running() {
        let adapter = FallbackAdapter {
            init_pid: std::process::id() as i32,
            rootfs_path: PathBuf::from("/"),
        };
        let g = resolve_guest("self", &adapter).unwrap();
        assert_eq!(g.init_pid, std::process::id() as i32);
        assert!(g.pid_ns_id > 0);
        assert!(g.init_start_time > 0);
        assert!(guest_alive(&g));
    }

    #[test]
    fn dead_pid_is_not_running() {
        let adapter = FallbackAdapter {
            init_pid: i32::MAX - 1,
            rootfs_path: PathBuf::from("/"),
        };
        assert!(matches!(
            resolve_guest("ghost", &adapter),
            Err(GuestError::NotRunning(_))
        ));
    }

    #[test]
    fn repeated_resolution_yields_identical_namespace_identity() {
        let adapter = FallbackAdapter {
            init_pid: std::process::id() as i32,
            rootfs_path: PathBuf::from("/"),
        };
        let a = resolve_guest("self", &adapter).unwrap();
        let b = resolve_guest("self", &adapter).unwrap();
        assert_eq!(a.pid_ns_id, b.pid_ns_id);
        assert_eq!(a.net_ns_id, b.net_ns_id);
        assert_eq!(a.init_start_time, b.init_start_time);
    }

    #[test]
    fn recycled_start_time_reads_as_dead() {
        let adapter = FallbackAdapter {
            init_pid: std::process::id() as i32,
            rootfs_path: PathBuf::from("/"),
        };
        let mut g = resolve_guest("self", &adapter).unwrap();
        g.init_start_time += 1; // pretend the pid was recycled
        assert!(!guest_alive(&g));
    }

    #[test]
    fn engine_inspect_document_parses() {
        let doc = r#"{
            "Id": "abc123",
            "State": {"Running": true, "Pid": 7777},
            "GraphDriver": {"Data": {"MergedDir": "/var/lib/docker/overlay2/abc/merged"}}
        }"#;
        let info = parse_engine_inspect(doc, "abc123").unwrap();
        assert!(info.running);
        assert_eq!(info.init_pid, 7777);
        assert_eq!(
            info.rootfs_path,
            PathBuf::from("/var/lib/docker/overlay2/abc/merged")
        );
    }

    #[test]
    fn stopped_engine_container_is_not_running() {
        let doc = r#"{"State": {"Running": false, "Pid": 0},
                      "GraphDriver": {"Data": {"MergedDir": "/x"}}}"#;
        let info = parse_engine_inspect(doc, "abc").unwrap();
        assert!(!info.running);
    }
}
