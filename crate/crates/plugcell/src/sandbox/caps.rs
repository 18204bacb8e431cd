//! Credential switch and capability surgery for the sandbox process.
//!
//! The runner executes as an unprivileged host uid holding exactly the
//! policy's capabilities in its permitted, effective, inheritable, ambient
//! and bounding sets. Ambient caps are what carry the grant across execve
//! of unmodified plugin binaries fetched at runtime.

use std::io;

use crate::policy::CapabilitySet;

const PR_SET_KEEPCAPS: libc::c_int = 8;
const PR_CAPBSET_DROP: libc::c_int = 24;
const PR_CAP_AMBIENT: libc::c_int = 47;
const PR_CAP_AMBIENT_RAISE: libc::c_ulong = 2;

const LINUX_CAPABILITY_VERSION_3: u32 = 0x2008_0522;

#[repr(C)]
struct CapHeader {
    version: u32,
    pid: libc::c_int,
}

#[repr(C)]
#[derive(Clone, Copy, Default)]
struct CapData {
    effective: u32,
    permitted: u32,
    inheritable: u32,
}

fn capset(effective: u64, permitted: u64, inheritable: u64) -> io::Result<()> {
    let header = CapHeader {
        version: LINUX_CAPABILITY_VERSION_3,
        pid: 0,
    };
    let data = [
        CapData {
            effective: effective as u32,
            permitted: permitted as u32,
            inheritable: inheritable as u32,
        },
        CapData {
            effective: (effective >> 32) as u32,
            permitted: (permitted >> 32) as u32,
            inheritable: (inheritable >> 32) as u32,
        },
    ];
    let rc = unsafe { libc::syscall(libc::SYS_capset, &header, data.as_ptr()) };
    if rc != 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(())
}

fn prctl(option: libc::c_int, a2: libc::c_ulong, a3: libc::c_ulong) -> io::Result<()> {
    let rc = unsafe { libc::prctl(option, a2, a3, 0, 0) };
    if rc != 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(())
}

fn last_cap() -> u32 {
    std::fs::read_to_string("/proc/sys/kernel/cap_last_cap")
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(40)
}

fn mask(caps: &CapabilitySet) -> u64 {
    caps.iter().fold(0u64, |m, c| m | (1u64 << c.number()))
}

/// Switch to `uid`/`gid` keeping only `caps`, in every capability set
/// including bounding and ambient. Must run as root; the calling process
/// is permanently de-privileged.
pub fn deprivilege(uid: u32, gid: u32, caps: &CapabilitySet) -> io::Result<()> {
    let target = mask(caps);
    let setpcap = 1u64 << 8; // needed while we prune the bounding set

    unsafe {
        if libc::setgroups(0, std::ptr::null()) != 0 {
            return Err(io::Error::last_os_error());
        }
    }
    prctl(PR_SET_KEEPCAPS, 1, 0)?;
    unsafe {
        if libc::setgid(gid) != 0 {
            return Err(io::Error::last_os_error());
        }
        if libc::setuid(uid) != 0 {
            return Err(io::Error::last_os_error());
        }
    }
    // keepcaps preserved permitted; rebuild effective with just what the
    // remaining surgery needs, and stage the target in inheritable.
    capset(target | setpcap, target | setpcap, target)?;

    for cap in 0..=last_cap() {
        if target & (1u64 << cap) != 0 {
            continue;
        }
        prctl(PR_CAPBSET_DROP, cap as libc::c_ulong, 0)?;
    }
    for cap in caps.iter() {
        prctl(PR_CAP_AMBIENT, PR_CAP_AMBIENT_RAISE, cap.number() as libc::c_ulong)?;
    }
    // Finally shed setpcap itself.
    capset(target, target, target)?;
    prctl(PR_SET_KEEPCAPS, 0, 0)?;
    Ok(())
}

/// Set the no-new-privileges bit; required before an unprivileged seccomp
/// install and blocks setuid escalation through guest binaries.
pub fn set_no_new_privs() -> io::Result<()> {
    prctl(libc::PR_SET_NO_NEW_PRIVS as libc::c_int, 1, 0)
}

/// Parse one `Cap*` line of `/proc/<pid>/status` as a bitmask.
pub fn proc_cap_mask(pid: i32, which: &str) -> io::Result<u64> {
    let status = std::fs::read_to_string(format!("/proc/{pid}/status"))?;
    let key = format!("{which}:");
    for line in status.lines() {
        if let Some(rest) = line.strip_prefix(&key) {
            return u64::from_str_radix(rest.trim(), 16)
                .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "bad cap mask"));
        }
    }
    Err(io::Error::new(
        io::ErrorKind::NotFound,
        format!("{which} not in /proc/{pid}/status"),
    ))
}

/// Expected `/proc/<pid>/status` capability mask for a policy set.
pub fn expected_mask(caps: &CapabilitySet) -> u64 {
    mask(caps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Capability;

    #[test]
    fn masks_match_kernel_numbering() {
        let caps = CapabilitySet::from_iter([
            Capability::DacReadSearch,
            Capability::SysChroot,
            Capability::SysPtrace,
        ]);
        assert_eq!(expected_mask(&caps), (1 << 2) | (1 << 18) | (1 << 19));
    }

    #[test]
    fn own_cap_masks_are_readable() {
        let eff = proc_cap_mask(std::process::id() as i32, "CapEff").unwrap();
        if unsafe { libc::geteuid() } == 0 {
            assert_ne!(eff, 0);
        }
    }
}
