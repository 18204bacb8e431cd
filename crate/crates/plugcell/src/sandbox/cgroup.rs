//! v1 cgroup management for sandboxes: resource limits, the net_cls classid
//! that keys firewall rules, and freeze-then-kill teardown.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crate::guest::controller_mount;
use crate::policy::{BlkioLimit, ResourceLimits};

/// Controllers every sandbox is placed into. cpu/memory/pids/blkio carry the
/// policy limits; cpuacct supplies usage accounting; net_cls tags traffic
/// for the firewall; freezer makes teardown race-free against forking
/// payloads.
pub const SANDBOX_CONTROLLERS: [&str; 7] =
    ["cpu", "cpuacct", "memory", "pids", "blkio", "net_cls", "freezer"];

/// Parent directory under each controller.
pub const CGROUP_PARENT: &str = "plugcell";

/// Mount net_cls (and make sure freezer is visible) if the host has not
/// already. Idempotent; call once before the first sandbox build so host
/// state snapshots include it.
pub fn ensure_host_ready() -> io::Result<()> {
    for ctrl in ["net_cls", "freezer"] {
        if controller_mount(ctrl).is_some() {
            continue;
        }
        let target = PathBuf::from("/sys/fs/cgroup").join(ctrl);
        fs::create_dir_all(&target)?;
        mount_cgroup_v1(ctrl, &target)?;
    }
    Ok(())
}

fn mount_cgroup_v1(controller: &str, target: &Path) -> io::Result<()> {
    let src = std::ffi::CString::new("cgroup").unwrap();
    let tgt = std::ffi::CString::new(target.as_os_str().as_encoded_bytes()).unwrap();
    let fstype = std::ffi::CString::new("cgroup").unwrap();
    let data = std::ffi::CString::new(controller).unwrap();
    let rc = unsafe {
        libc::mount(
            src.as_ptr(),
            tgt.as_ptr(),
            fstype.as_ptr(),
            0,
            data.as_ptr() as *const libc::c_void,
        )
    };
    if rc != 0 {
        let err = io::Error::last_os_error();
        // Another builder may have raced us.
        if controller_mount(controller).is_some() {
            return Ok(());
        }
        return Err(err);
    }
    Ok(())
}

/// One sandbox's directories across all controllers.
#[derive(Debug, Clone)]
pub struct CgroupSet {
    pub name: String,
    dirs: BTreeMap<String, PathBuf>,
}

fn write_file(path: &Path, value: &str) -> io::Result<()> {
    let mut f = fs::OpenOptions::new().write(true).open(path)?;
    f.write_all(value.as_bytes())
}

impl CgroupSet {
    /// Create `<controller>/plugcell/<name>` everywhere, apply `limits`
    /// (when given) and tag net_cls with `classid`.
    pub fn create(name: &str, limits: Option<&ResourceLimits>, classid: u32) -> io::Result<CgroupSet> {
        let mut dirs = BTreeMap::new();
        for ctrl in SANDBOX_CONTROLLERS {
            let mount = controller_mount(ctrl)
                .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("cgroup controller {ctrl} not mounted")))?;
            let dir = mount.join(CGROUP_PARENT).join(name);
            fs::create_dir_all(&dir)?;
            dirs.insert(ctrl.to_string(), dir);
        }
        let set = CgroupSet {
            name: name.to_string(),
            dirs,
        };
        if let Some(limits) = limits {
            set.apply_limits(limits)?;
        }
        set.set_classid(classid)?;
        Ok(set)
    }

    pub fn dir(&self, controller: &str) -> Option<&Path> {
        self.dirs.get(controller).map(|p| p.as_path())
    }

    fn apply_limits(&self, limits: &ResourceLimits) -> io::Result<()> {
        let cpu = &self.dirs["cpu"];
        write_file(&cpu.join("cpu.cfs_period_us"), "100000")?;
        let quota = ((limits.cpu_quota * 100_000.0) as i64).max(1_000);
        write_file(&cpu.join("cpu.cfs_quota_us"), &quota.to_string())?;

        let mem = &self.dirs["memory"];
        write_file(&mem.join("memory.limit_in_bytes"), &limits.memory_bytes.to_string())?;
        // Also cap swap so the memory ceiling cannot be dodged; optional file.
        let _ = write_file(
            &mem.join("memory.memsw.limit_in_bytes"),
            &limits.memory_bytes.to_string(),
        );

        write_file(&self.dirs["pids"].join("pids.max"), &limits.pids_max.to_string())?;

        match limits.blkio {
            BlkioLimit::Weight(w) => {
                let blkio = &self.dirs["blkio"];
                // Weight file name depends on the active IO scheduler.
                let weight = w.to_string();
                if write_file(&blkio.join("blkio.bfq.weight"), &weight).is_err() {
                    let _ = write_file(&blkio.join("blkio.weight"), &weight);
                }
            }
            BlkioLimit::WriteBytesPerSec(bps) => {
                if let Some(dev) = root_block_device() {
                    let _ = write_file(
                        &self.dirs["blkio"].join("blkio.throttle.write_bps_device"),
                        &format!("{dev} {bps}"),
                    );
                }
            }
        }
        Ok(())
    }

    fn set_classid(&self, classid: u32) -> io::Result<()> {
        write_file(&self.dirs["net_cls"].join("net_cls.classid"), &classid.to_string())
    }

    /// Move a process into every controller.
    pub fn add_pid(&self, pid: i32) -> io::Result<()> {
        for dir in self.dirs.values() {
            write_file(&dir.join("cgroup.procs"), &pid.to_string())?;
        }
        Ok(())
    }

    /// net_cls child group with classid 0: threads moved here create
    /// untagged sockets the firewall will not match. Used for the loopback
    /// proxy, whose onward connections must bypass the sandbox drop rules
    /// while every other constraint still applies.
    pub fn exempt_tid_from_classid(&self, tid: i32) -> io::Result<()> {
        let sub = self.dirs["net_cls"].join("proxy");
        fs::create_dir_all(&sub)?;
        write_file(&sub.join("net_cls.classid"), "0")?;
        write_file(&sub.join("tasks"), &tid.to_string())
    }

    /// Tag a single thread with the sandbox classid (net_cls only).
    pub fn tag_net_cls_tid(&self, tid: i32) -> io::Result<()> {
        write_file(&self.dirs["net_cls"].join("tasks"), &tid.to_string())
    }

    pub fn member_pids(&self) -> Vec<i32> {
        let mut pids: Vec<i32> = Vec::new();
        if let Ok(content) = fs::read_to_string(self.dirs["freezer"].join("cgroup.procs")) {
            pids.extend(content.lines().filter_map(|l| l.trim().parse::<i32>().ok()));
        }
        pids.sort_unstable();
        pids.dedup();
        pids
    }

    pub fn pids_current(&self) -> Option<u64> {
        fs::read_to_string(self.dirs["pids"].join("pids.current"))
            .ok()?
            .trim()
            .parse()
            .ok()
    }

    pub fn memory_usage_bytes(&self) -> Option<u64> {
        fs::read_to_string(self.dirs["memory"].join("memory.usage_in_bytes"))
            .ok()?
            .trim()
            .parse()
            .ok()
    }

    /// High-water memory usage since creation.
    pub fn memory_peak_bytes(&self) -> Option<u64> {
        fs::read_to_string(self.dirs["memory"].join("memory.max_usage_in_bytes"))
            .ok()?
            .trim()
            .parse()
            .ok()
    }

    /// Pause/resume every member via the freezer controller.
    pub fn set_frozen(&self, frozen: bool) -> io::Result<()> {
        let state = self.dirs["freezer"].join("freezer.state");
        write_file(&state, if frozen { "FROZEN" } else { "THAWED" })?;
        let want = if frozen { "FROZEN" } else { "THAWED" };
        let deadline = Instant::now() + Duration::from_secs(5);
        while Instant::now() < deadline {
            if fs::read_to_string(&state)?.trim() == want {
                return Ok(());
            }
            std::thread::sleep(Duration::from_millis(10));
        }
        Err(io::Error::new(io::ErrorKind::TimedOut, "freezer state change"))
    }

    /// Freeze, SIGKILL every member, thaw, wait for empty. Returns how many
    /// processes were killed.
    pub fn kill_all(&self) -> io::Result<usize> {
        let freezer = &self.dirs["freezer"];
        let state = freezer.join("freezer.state");
        let _ = write_file(&state, "FROZEN");
        let deadline = Instant::now() + Duration::from_secs(5);
        while Instant::now() < deadline {
            match fs::read_to_string(&state) {
                Ok(s) if s.trim() == "FROZEN" => break,
                Ok(_) => std::thread::sleep(Duration::from_millis(10)),
                Err(_) => break,
            }
        }
        let victims = self.member_pids();
        for pid in &victims {
            unsafe { libc::kill(*pid, libc::SIGKILL) };
        }
        let _ = write_file(&state, "THAWED");
        let deadline = Instant::now() + Duration::from_secs(10);
        while !self.member_pids().is_empty() {
            if Instant::now() > deadline {
                return Err(io::Error::new(
                    io::ErrorKind::TimedOut,
                    format!("cgroup {} still has members after kill", self.name),
                ));
            }
            std::thread::sleep(Duration::from_millis(10));
        }
        Ok(victims.len())
    }

    /// Remove all directories. Fails while members remain; callers kill
    /// first. Idempotent over missing directories.
    pub fn remove(&self) -> io::Result<()> {
        let deadline = Instant::now() + Duration::from_secs(5);
        for dir in self.dirs.values() {
            let proxy = dir.join("proxy");
            if proxy.is_dir() {
                retry_rmdir(&proxy, deadline)?;
            }
            if dir.is_dir() {
                retry_rmdir(dir, deadline)?;
            }
        }
        Ok(())
    }

    /// Reconstruct a handle for teardown-by-name (idempotent detach paths).
    pub fn open_existing(name: &str) -> Option<CgroupSet> {
        let mut dirs = BTreeMap::new();
        for ctrl in SANDBOX_CONTROLLERS {
            let dir = controller_mount(ctrl)?.join(CGROUP_PARENT).join(name);
            if !dir.is_dir() {
                return None;
            }
            dirs.insert(ctrl.to_string(), dir);
        }
        Some(CgroupSet {
            name: name.to_string(),
            dirs,
        })
    }
}

fn retry_rmdir(dir: &Path, deadline: Instant) -> io::Result<()> {
    loop {
        match fs::remove_dir(dir) {
            Ok(()) => return Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
            Err(e) => {
                if Instant::now() > deadline {
                    return Err(e);
                }
                std::thread::sleep(Duration::from_millis(20));
            }
        }
    }
}

/// `major:minor` of the device backing `/`, for blkio throttle files.
fn root_block_device() -> Option<String> {
    let meta = fs::metadata("/").ok()?;
    use std::os::unix::fs::MetadataExt;
    let dev = meta.dev();
    let (major, minor) = (libc::major(dev), libc::minor(dev));
    if major == 0 {
        return None; // virtual fs; throttling has no device to attach to
    }
    Some(format!("{major}:{minor}"))
}

/// Names of all plugcell-owned cgroup directories, for leak checks.
pub fn list_sandbox_cgroups() -> Vec<String> {
    let mut names = Vec::new();
    for ctrl in SANDBOX_CONTROLLERS {
        let Some(mount) = controller_mount(ctrl) else { continue };
        let parent = mount.join(CGROUP_PARENT);
        let Ok(entries) = fs::read_dir(&parent) else { continue };
        for e in entries.flatten() {
            names.push(format!("{}/{}", ctrl, e.file_name().to_string_lossy()));
        }
    }
    names.sort();
    names
}

#[cfg(test)]
mod tests {
    use super::*;

    fn root() -> bool {
        unsafe { libc::geteuid() == 0 }
    }

    #[test]
    fn create_apply_and_remove_round_trip() {
        if !root() {
            eprintln!("skipping: requires root");
            return;
        }
        ensure_host_ready().unwrap();
        let limits = ResourceLimits::default();
        let set = CgroupSet::create("unit-cg-roundtrip", Some(&limits), 0x0010_0001).unwrap();
        let pids_max = fs::read_to_string(set.dir("pids").unwrap().join("pids.max")).unwrap();
        assert_eq!(pids_max.trim(), limits.pids_max.to_string());
        let classid = fs::read_to_string(set.dir("net_cls").unwrap().join("net_cls.classid")).unwrap();
        assert_eq!(classid.trim(), (0x0010_0001u32).to_string());
        set.remove().unwrap();
        set.remove().unwrap(); // idempotent
        assert!(CgroupSet::open_existing("unit-cg-roundtrip").is_none());
    }

    #[test]
    fn kill_all_reaps_members() {
        if !root() {
            eprintln!("skipping: requires root");
            return;
        }
        ensure_host_ready().unwrap();
        let set = CgroupSet::create("unit-cg-kill", None, 0x0010_0002).unwrap();
        let mut child = std::process::Command::new("sleep").arg("3600").spawn().unwrap();
        set.add_pid(child.id() as i32).unwrap();
        assert_eq!(set.member_pids(), vec![child.id() as i32]);
        let killed = set.kill_all().unwrap();
        assert_eq!(killed, 1);
        let _ = child.wait();
        set.remove().unwrap();
    }
}
