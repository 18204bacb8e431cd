//! Construction of the sandbox's private mount tree.
//!
//! Runs in the sandbox child after `unshare(CLONE_NEWNS)`, while still
//! privileged. The tree is rooted in a size-capped tmpfs and pivoted into,
//! so nothing of it is visible on the host and the whole thing evaporates
//! with the namespace:
//!
//! ```text
//! /guest          guest rootfs, recursively read-only
//! /guest-cgroup   guest cgroup subtrees, read-only
//! /comm           the only writable bind (communication channel)
//! /plugins        tmpfs staging area, remounted read-only after fetch
//! /proc           fresh procfs for the joined pid namespace, read-only
//! /dev            minimal device nodes (null, zero, random, urandom, full)
//! /tmp            size-capped tmpfs scratch space
//! /opt/plugcell/bin  runner + collector executables, read-only
//! /usr /lib ...   host toolchain dirs, read-only+nosuid (plugin interpreters)
//! ```

use std::ffi::CString;
use std::io;
use std::os::unix::ffi::OsStrExt;
use std::path::{Path, PathBuf};

use crate::policy::MountSpec;

/// In-sandbox directory holding the runner and collector binaries.
pub const SANDBOX_BIN: &str = "/opt/plugcell/bin";
/// In-sandbox plugin staging area.
pub const PLUGIN_STAGE: &str = "/plugins";

fn cstr(p: &Path) -> io::Result<CString> {
    CString::new(p.as_os_str().as_bytes())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "path contains NUL"))
}

fn mount(
    src: Option<&Path>,
    target: &Path,
    fstype: Option<&str>,
    flags: libc::c_ulong,
    data: Option<&str>,
) -> io::Result<()> {
    let src_c = src.map(cstr).transpose()?;
    let tgt_c = cstr(target)?;
    let fs_c = fstype.map(|f| CString::new(f).unwrap());
    let data_c = data.map(|d| CString::new(d).unwrap());
    let rc = unsafe {
        libc::mount(
            src_c.as_ref().map_or(std::ptr::null(), |c| c.as_ptr()),
            tgt_c.as_ptr(),
            fs_c.as_ref().map_or(std::ptr::null(), |c| c.as_ptr()),
            flags,
            data_c
                .as_ref()
                .map_or(std::ptr::null(), |c| c.as_ptr() as *const libc::c_void),
        )
    };
    if rc != 0 {
        let e = io::Error::last_os_error();
        return Err(io::Error::new(
            e.kind(),
            format!("mount {:?} -> {}: {e}", src, target.display()),
        ));
    }
    Ok(())
}

#[repr(C)]
struct MountAttr {
    attr_set: u64,
    attr_clr: u64,
    propagation: u64,
    userns_fd: u64,
}

const MOUNT_ATTR_RDONLY: u64 = 0x01;
const MOUNT_ATTR_NOSUID: u64 = 0x02;
const MOUNT_ATTR_NODEV: u64 = 0x04;
const AT_RECURSIVE: libc::c_uint = 0x8000;

/// Recursively flip a mount (and submounts) read-only + nosuid + nodev.
fn set_readonly_recursive(target: &Path) -> io::Result<()> {
    let attr = MountAttr {
        attr_set: MOUNT_ATTR_RDONLY | MOUNT_ATTR_NOSUID | MOUNT_ATTR_NODEV,
        attr_clr: 0,
        propagation: 0,
        userns_fd: 0,
    };
    let tgt = cstr(target)?;
    let rc = unsafe {
        libc::syscall(
            libc::SYS_mount_setattr,
            libc::AT_FDCWD,
            tgt.as_ptr(),
            AT_RECURSIVE,
            &attr as *const MountAttr,
            std::mem::size_of::<MountAttr>(),
        )
    };
    if rc != 0 {
        let e = io::Error::last_os_error();
        return Err(io::Error::new(
            e.kind(),
            format!("mount_setattr ro {}: {e}", target.display()),
        ));
    }
    Ok(())
}

/// Stop mount events from propagating back to the host.
pub fn make_tree_private() -> io::Result<()> {
    mount(None, Path::new("/"), None, libc::MS_REC | libc::MS_PRIVATE, None)
}

fn bind(src: &Path, dst: &Path) -> io::Result<()> {
    mount(Some(src), dst, None, libc::MS_BIND | libc::MS_REC, None)
}

pub fn bind_ro(src: &Path, dst: &Path) -> io::Result<()> {
    bind(src, dst)?;
    set_readonly_recursive(dst)
}

/// Everything the child needs to assemble the tree.
pub struct RootSpec {
    /// Host-side staging directory the tmpfs root is mounted over.
    pub staging_root: PathBuf,
    /// Policy mounts (guest rootfs, guest cgroups, extras) — all read-only.
    pub policy_mounts: Vec<MountSpec>,
    /// Host comm directory, bound writable at /comm.
    pub comm_dir: PathBuf,
    /// Host directory with runner/collector binaries.
    pub bin_dir: PathBuf,
    /// None = uncapped (resource-limit ablation experiments).
    pub tmp_size_bytes: Option<u64>,
    pub plugins_size_bytes: u64,
    /// Host uid the de-privileged runner maps to; owns the writable tmpfs
    /// mounts (plugin staging must be writable during the fetch window).
    pub owner_uid: u32,
}

/// Host toolchain directories plugins may need (shells, interpreters).
/// Symlinked entries (merged-usr layouts) are replicated as symlinks.
const HOST_DIRS: [&str; 5] = ["/usr", "/lib", "/lib64", "/bin", "/sbin"];

pub fn build_root(spec: &RootSpec) -> io::Result<()> {
    let root = &spec.staging_root;
    std::fs::create_dir_all(root)?;
    mount(
        Some(Path::new("sandbox-root")),
        root,
        Some("tmpfs"),
        libc::MS_NOSUID,
        Some("size=16m,mode=0755"),
    )?;

    for dir in ["guest", "guest-cgroup", "comm", "proc", "dev", "tmp", "etc", "run"] {
        std::fs::create_dir_all(root.join(dir))?;
    }
    std::fs::create_dir_all(root.join(PLUGIN_STAGE.trim_start_matches('/')))?;
    std::fs::create_dir_all(root.join(SANDBOX_BIN.trim_start_matches('/')))?;

    for m in &spec.policy_mounts {
        let target = root.join(m.target.strip_prefix("/").unwrap_or(&m.target));
        std::fs::create_dir_all(&target)?;
        if m.read_only {
            bind_ro(&m.source, &target)?;
        } else {
            // Only reachable through an explicit ablation experiment.
            bind(&m.source, &target)?;
        }
    }

    // The one writable bind: the communication channel.
    bind(&spec.comm_dir, &root.join("comm"))?;
    mount(
        None,
        &root.join("comm"),
        None,
        libc::MS_REMOUNT | libc::MS_BIND | libc::MS_NOSUID | libc::MS_NODEV | libc::MS_NOEXEC,
        None,
    )?;

    bind_ro(&spec.bin_dir, &root.join(SANDBOX_BIN.trim_start_matches('/')))?;

    for host_dir in HOST_DIRS {
        let src = Path::new(host_dir);
        let name = host_dir.trim_start_matches('/');
        match std::fs::symlink_metadata(src) {
            Ok(meta) if meta.file_type().is_symlink() => {
                let dest = std::fs::read_link(src)?;
                std::os::unix::fs::symlink(dest, root.join(name))?;
            }
            Ok(meta) if meta.is_dir() => {
                std::fs::create_dir_all(root.join(name))?;
                bind_ro(src, &root.join(name))?;
            }
            _ => {}
        }
    }

    let tmp_opts = match spec.tmp_size_bytes {
        Some(size) => format!("size={size},mode=01777"),
        None => "mode=01777".to_string(),
    };
    mount(
        Some(Path::new("tmpfs")),
        &root.join("tmp"),
        Some("tmpfs"),
        libc::MS_NOSUID | libc::MS_NODEV,
        Some(&tmp_opts),
    )?;
    mount(
        Some(Path::new("tmpfs")),
        &root.join(PLUGIN_STAGE.trim_start_matches('/')),
        Some("tmpfs"),
        libc::MS_NOSUID | libc::MS_NODEV,
        Some(&format!(
            "size={},mode=0755,uid={},gid={}",
            spec.plugins_size_bytes, spec.owner_uid, spec.owner_uid
        )),
    )?;

    // Fresh procfs for the pid namespace we joined, read-only.
    mount(
        Some(Path::new("proc")),
        &root.join("proc"),
        Some("proc"),
        libc::MS_RDONLY | libc::MS_NOSUID | libc::MS_NODEV | libc::MS_NOEXEC,
        None,
    )?;

    setup_dev(&root.join("dev"))?;
    pivot_into(root)
}

/// Minimal /dev: no mem, no kmem, nothing block. The directory itself is a
/// root-owned 0755 tmpfs, so the de-privileged runner cannot add entries;
/// the mount stays writable because a read-only mount would also refuse
/// writable opens of the device nodes themselves (plugins need /dev/null).
fn setup_dev(dev: &Path) -> io::Result<()> {
    mount(
        Some(Path::new("tmpfs")),
        dev,
        Some("tmpfs"),
        libc::MS_NOSUID | libc::MS_NOEXEC,
        Some("size=64k,mode=0755"),
    )?;
    for (name, minor) in [("null", 3), ("zero", 5), ("full", 7), ("random", 8), ("urandom", 9)] {
        let path = cstr(&dev.join(name))?;
        let rc = unsafe {
            libc::mknod(
                path.as_ptr(),
                libc::S_IFCHR | 0o666,
                libc::makedev(1, minor),
            )
        };
        if rc != 0 {
            return Err(io::Error::last_os_error());
        }
        // mknod modes pass through the inherited umask.
        if unsafe { libc::chmod(path.as_ptr(), 0o666) } != 0 {
            return Err(io::Error::last_os_error());
        }
    }
    std::os::unix::fs::symlink("/proc/self/fd", dev.join("fd"))
}

fn pivot_into(root: &Path) -> io::Result<()> {
    std::env::set_current_dir(root)?;
    let dot = CString::new(".").unwrap();
    let rc = unsafe { libc::syscall(libc::SYS_pivot_root, dot.as_ptr(), dot.as_ptr()) };
    if rc != 0 {
        return Err(io::Error::new(
            io::Error::last_os_error().kind(),
            format!("pivot_root: {}", io::Error::last_os_error()),
        ));
    }
    let rc = unsafe { libc::umount2(dot.as_ptr(), libc::MNT_DETACH) };
    if rc != 0 {
        return Err(io::Error::last_os_error());
    }
    std::env::set_current_dir("/")
}

/// Remount the plugin staging area read-only. Called from a worker thread
/// joined to the sandbox's mount namespace when the fetch window closes —
/// the de-privileged runner cannot do this itself.
pub fn remount_plugins_readonly() -> io::Result<()> {
    mount(
        None,
        Path::new(PLUGIN_STAGE),
        None,
        libc::MS_REMOUNT | libc::MS_RDONLY | libc::MS_NOSUID | libc::MS_NODEV,
        Some("size=67108864"),
    )
}

/// Run `f` on a thread joined to the mount namespace of `pid`.
pub fn with_mount_ns<T: Send + 'static>(
    pid: i32,
    f: impl FnOnce() -> io::Result<T> + Send + 'static,
) -> io::Result<T> {
    let ns_path = format!("/proc/{pid}/ns/mnt");
    let handle = std::thread::spawn(move || -> io::Result<T> {
        // setns(NEWNS) refuses callers sharing fs state with other threads.
        if unsafe { libc::unshare(libc::CLONE_FS) } != 0 {
            return Err(io::Error::last_os_error());
        }
        let c = CString::new(ns_path).unwrap();
        let fd = unsafe { libc::open(c.as_ptr(), libc::O_RDONLY | libc::O_CLOEXEC) };
        if fd < 0 {
            return Err(io::Error::last_os_error());
        }
        let rc = unsafe { libc::setns(fd, libc::CLONE_NEWNS) };
        unsafe { libc::close(fd) };
        if rc != 0 {
            return Err(io::Error::last_os_error());
        }
        f()
    });
    handle
        .join()
        .map_err(|_| io::Error::other("mount ns worker panicked"))?
}
