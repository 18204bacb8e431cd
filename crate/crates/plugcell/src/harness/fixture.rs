//! Disposable fixture guests: a real container-shaped process tree (own
//! pid/net/mount/uts/ipc namespaces, pivoted rootfs, own cgroups, fixed
//! workload) that the sandbox attaches to exactly like a production guest,
//! via the engine-less adapter.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde_json::{json, Value};

use crate::guest::{resolve_guest, FallbackAdapter, GuestTarget};
use crate::sandbox::cgroup::{ensure_host_ready, CgroupSet};
use crate::sandbox::firewall;
use crate::sandbox::ipc::FdChannel;

/// Files the fixture plants in its rootfs; containment verdicts hash these.
/// `var/cache/app/state.json` is deliberately world-writable: guest data a
/// tampering payload could alter under plain DAC, so its integrity rests on
/// the read-only mount alone.
pub const FIXTURE_FILES: [(&str, &str); 5] = [
    ("etc/os-release", "ID=fixtureos\nVERSION_ID=\"1.0\"\nPRETTY_NAME=\"Fixture OS 1.0\"\n"),
    ("etc/hostname", "fixture-guest\n"),
    ("etc/secret.txt", "s3cr3t-api-key-0451\n"),
    ("etc/config.ini", "[service]\nport=8080\n"),
    ("var/cache/app/state.json", "{\"requests\": 7341, \"healthy\": true}\n"),
];

pub struct FixtureGuest {
    pub name: String,
    pub init_pid: i32,
    pub rootfs: PathBuf,
    pub base_dir: PathBuf,
    pub cgroup: CgroupSet,
    /// Guest-pidns pids of the fixture workload.
    pub sleeper_pid: i32,
    pub victim_pid: i32,
    ctrl: FdChannel,
    host_binds: Vec<PathBuf>,
    external_service: Option<std::process::Child>,
    pub external_marker: PathBuf,
    torn_down: bool,
}

fn bind_ro_host(src: &Path, dst: &Path) -> io::Result<()> {
    fs::create_dir_all(dst)?;
    let s = std::ffi::CString::new(src.as_os_str().as_encoded_bytes()).unwrap();
    let d = std::ffi::CString::new(dst.as_os_str().as_encoded_bytes()).unwrap();
    if unsafe { libc::mount(s.as_ptr(), d.as_ptr(), std::ptr::null(), libc::MS_BIND | libc::MS_REC, std::ptr::null()) } != 0 {
        return Err(io::Error::last_os_error());
    }
    if unsafe {
        libc::mount(
            std::ptr::null(),
            d.as_ptr(),
            std::ptr::null(),
            libc::MS_REMOUNT | libc::MS_BIND | libc::MS_RDONLY | libc::MS_NOSUID,
            std::ptr::null(),
        )
    } != 0
    {
        return Err(io::Error::last_os_error());
    }
    Ok(())
}

fn host_toolchain_dirs() -> Vec<(&'static str, bool)> {
    // (path, is_symlink handled at copy time)
    vec![("/usr", false), ("/lib", false), ("/lib64", false), ("/bin", false), ("/sbin", false)]
}

fn open_ns(pid: i32, kind: &str) -> io::Result<i32> {
    let path = std::ffi::CString::new(format!("/proc/{pid}/ns/{kind}")).unwrap();
    let fd = unsafe { libc::open(path.as_ptr(), libc::O_RDONLY | libc::O_CLOEXEC) };
    if fd < 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(fd)
}

impl FixtureGuest {
    /// Build and start a fixture guest under `base_dir` using the probe
    /// binary from `bin_dir`.
    pub fn create(name: &str, base_dir: &Path, bin_dir: &Path) -> io::Result<FixtureGuest> {
        ensure_host_ready()?;
        let base = base_dir.join(format!("guest-{name}"));
        let rootfs = base.join("rootfs");
        fs::create_dir_all(&rootfs)?;

        for dir in ["etc", "tmp", "var", "var/cache/app", "home", "root", "proc", "dev", "run"] {
            fs::create_dir_all(rootfs.join(dir))?;
        }
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(rootfs.join("tmp"), fs::Permissions::from_mode(0o1777))?;
        for (rel, content) in FIXTURE_FILES {
            fs::write(rootfs.join(rel), content)?;
        }
        fs::set_permissions(rootfs.join("etc/secret.txt"), fs::Permissions::from_mode(0o600))?;
        fs::set_permissions(rootfs.join("var/cache/app"), fs::Permissions::from_mode(0o777))?;
        fs::set_permissions(rootfs.join("var/cache/app/state.json"), fs::Permissions::from_mode(0o666))?;

        // Host toolchain + our binaries, bound in the host mount namespace
        // so the rootfs path is materially complete for the sandbox's bind.
        let mut host_binds = Vec::new();
        for (dir, _) in host_toolchain_dirs() {
            let src = Path::new(dir);
            let name = dir.trim_start_matches('/');
            match fs::symlink_metadata(src) {
                Ok(m) if m.file_type().is_symlink() => {
                    let target = fs::read_link(src)?;
                    let link = rootfs.join(name);
                    if !link.exists() {
                        std::os::unix::fs::symlink(target, &link)?;
                    }
                }
                Ok(m) if m.is_dir() => {
                    let dst = rootfs.join(name);
                    bind_ro_host(src, &dst)?;
                    host_binds.push(dst);
                }
                _ => {}
            }
        }
        let probe_dst = rootfs.join("opt/plugcell/bin");
        bind_ro_host(bin_dir, &probe_dst)?;
        host_binds.push(probe_dst);

        // Guest cgroups (no limits): metric source + teardown tool. The
        // guest's own dirs are also bound into its rootfs so in-guest
        // collector runs see the same /guest-cgroup view as sandboxed ones.
        let cgroup = CgroupSet::create(&format!("guest-{name}"), None, 0)?;
        for ctrl in crate::guest::GUEST_CONTROLLERS {
            if let Some(dir) = cgroup.dir(ctrl) {
                let dst = rootfs.join("guest-cgroup").join(ctrl);
                bind_ro_host(dir, &dst)?;
                host_binds.push(dst);
            }
        }

        let (host_chan, guest_chan) = FdChannel::pair()?;
        let init_pid = spawn_guest_init(&rootfs, &guest_chan)?;
        drop(guest_chan);
        cgroup.add_pid(init_pid)?;

        // Wait for init's readiness message carrying workload pids.
        let ready: Value = host_chan.recv(Duration::from_secs(10))?;
        if ready["ready"] != true {
            return Err(io::Error::other(format!("guest init not ready: {ready}")));
        }

        // "External world" collection point: host-side process joined to the
        // guest netns, listening on a dedicated loopback address.
        let external_marker = base.join("exfiltrated.bin");
        let external_service = std::process::Command::new(bin_dir.join("plugcell-probe"))
            .args([
                "marker-service",
                "--addr",
                "127.88.0.1:7070",
                "--marker",
                &external_marker.display().to_string(),
            ])
            .env("PLUGCELL_NETNS", format!("/proc/{init_pid}/ns/net"))
            .spawn()
            .ok();

        let guest = FixtureGuest {
            name: name.to_string(),
            init_pid,
            rootfs,
            base_dir: base,
            cgroup,
            sleeper_pid: ready["sleeper_pid"].as_i64().unwrap_or(0) as i32,
            victim_pid: ready["victim_pid"].as_i64().unwrap_or(0) as i32,
            ctrl: host_chan,
            host_binds,
            external_service,
            external_marker,
            torn_down: false,
        };
        // Give workload children a moment to publish their state.
        std::thread::sleep(Duration::from_millis(300));
        Ok(guest)
    }

    pub fn adapter(&self) -> FallbackAdapter {
        FallbackAdapter {
            init_pid: self.init_pid,
            rootfs_path: self.rootfs.clone(),
        }
    }

    pub fn resolve(&self) -> Result<GuestTarget, crate::guest::GuestError> {
        resolve_guest(&self.name, &self.adapter())
    }

    /// Issue a probe command to the guest init and return its reply.
    pub fn command(&self, cmd: Value) -> io::Result<Value> {
        self.ctrl.send(&cmd)?;
        self.ctrl.recv(Duration::from_secs(60))
    }

    /// Run a payload inside the guest's own context.
    pub fn run_in_guest(&self, argv: &[&str], timeout_ms: u64) -> io::Result<Value> {
        self.command(json!({
            "cmd": "run",
            "argv": argv,
            "timeout_ms": timeout_ms,
        }))
    }

    pub fn netns_path(&self) -> PathBuf {
        firewall::proc_netns(self.init_pid)
    }

    /// Hashes of the fixture-owned files (excludes host toolchain binds).
    pub fn rootfs_hashes(&self) -> Vec<(String, String)> {
        use sha2::{Digest, Sha256};
        let mut out = Vec::new();
        for dir in ["etc", "var", "home", "root"] {
            let mut stack = vec![self.rootfs.join(dir)];
            while let Some(d) = stack.pop() {
                let Ok(entries) = fs::read_dir(&d) else { continue };
                for e in entries.flatten() {
                    let p = e.path();
                    if e.file_type().map(|t| t.is_dir()).unwrap_or(false) {
                        stack.push(p);
                    } else if let Ok(bytes) = fs::read(&p) {
                        let rel = p.strip_prefix(&self.rootfs).unwrap_or(&p).display().to_string();
                        out.push((rel, hex::encode(Sha256::digest(&bytes))));
                    }
                }
            }
        }
        out.sort();
        out
    }

    /// Freeze/thaw the guest's process tree (exact-snapshot comparisons).
    pub fn set_frozen(&self, frozen: bool) -> io::Result<()> {
        let state = self
            .cgroup
            .dir("freezer")
            .ok_or_else(|| io::Error::other("no freezer controller"))?
            .join("freezer.state");
        fs::write(&state, if frozen { "FROZEN" } else { "THAWED" })?;
        let want = if frozen { "FROZEN" } else { "THAWED" };
        for _ in 0..200 {
            if fs::read_to_string(&state)?.trim() == want {
                return Ok(());
            }
            std::thread::sleep(Duration::from_millis(10));
        }
        Err(io::Error::new(io::ErrorKind::TimedOut, "freezer state change"))
    }

    /// Run an executable in the guest's own context — its mount, pid and
    /// net namespaces — capturing stdout. This is the reference point for
    /// collector equivalence: identical logic, guest-resident view. The
    /// spawned process stays outside the guest's cgroups, mirroring how the
    /// sandboxed collector is excluded from guest accounting.
    pub fn exec_in_guest_context(
        &self,
        path_in_guest: &str,
        args: &[&str],
        env: &[(&str, &str)],
    ) -> io::Result<(i32, Vec<u8>)> {
        let mnt = open_ns(self.init_pid, "mnt")?;
        let pid_ns = open_ns(self.init_pid, "pid")?;
        let net = open_ns(self.init_pid, "net")?;

        let mut fds = [0i32; 2];
        if unsafe { libc::pipe2(fds.as_mut_ptr(), libc::O_CLOEXEC) } != 0 {
            return Err(io::Error::last_os_error());
        }
        let (read_fd, write_fd) = (fds[0], fds[1]);

        let exe = std::ffi::CString::new(path_in_guest).unwrap();
        let mut argv_c: Vec<std::ffi::CString> = vec![exe.clone()];
        argv_c.extend(args.iter().map(|a| std::ffi::CString::new(*a).unwrap()));
        let mut envp_c: Vec<std::ffi::CString> = env
            .iter()
            .map(|(k, v)| std::ffi::CString::new(format!("{k}={v}")).unwrap())
            .collect();
        envp_c.push(std::ffi::CString::new("PATH=/opt/plugcell/bin:/usr/bin:/bin").unwrap());

        let staging = unsafe { libc::fork() };
        if staging < 0 {
            unsafe {
                libc::close(read_fd);
                libc::close(write_fd);
            }
            return Err(io::Error::last_os_error());
        }
        if staging == 0 {
            unsafe {
                libc::close(read_fd);
                if libc::setns(mnt, libc::CLONE_NEWNS) != 0
                    || libc::setns(net, libc::CLONE_NEWNET) != 0
                    || libc::setns(pid_ns, libc::CLONE_NEWPID) != 0
                {
                    libc::_exit(121);
                }
                let worker = libc::fork();
                if worker < 0 {
                    libc::_exit(122);
                }
                if worker == 0 {
                    libc::dup2(write_fd, 1);
                    let argv_ptrs: Vec<*const libc::c_char> = argv_c
                        .iter()
                        .map(|c| c.as_ptr())
                        .chain(std::iter::once(std::ptr::null()))
                        .collect();
                    let envp_ptrs: Vec<*const libc::c_char> = envp_c
                        .iter()
                        .map(|c| c.as_ptr())
                        .chain(std::iter::once(std::ptr::null()))
                        .collect();
                    libc::execve(exe.as_ptr(), argv_ptrs.as_ptr(), envp_ptrs.as_ptr());
                    libc::_exit(127);
                }
                libc::close(write_fd);
                let mut status = 0;
                libc::waitpid(worker, &mut status, 0);
                libc::_exit(if libc::WIFEXITED(status) {
                    libc::WEXITSTATUS(status)
                } else {
                    126
                });
            }
        }
        unsafe {
            libc::close(write_fd);
            libc::close(mnt);
            libc::close(pid_ns);
            libc::close(net);
        }
        let mut out = Vec::new();
        let mut buf = [0u8; 8192];
        loop {
            let n = unsafe { libc::read(read_fd, buf.as_mut_ptr() as *mut libc::c_void, buf.len()) };
            if n <= 0 {
                break;
            }
            out.extend_from_slice(&buf[..n as usize]);
        }
        unsafe { libc::close(read_fd) };
        let mut status = 0;
        unsafe { libc::waitpid(staging, &mut status, 0) };
        let code = if libc::WIFEXITED(status) {
            libc::WEXITSTATUS(status)
        } else {
            -1
        };
        Ok((code, out))
    }

    /// Detached variant of [`Self::exec_in_guest_context`]: returns the
    /// staging pid (kill its process group to stop the whole tree). When
    /// `join_cgroup_procs` is given, the tree is placed there before the
    /// namespace moves — used to give an in-guest workload a bounded CPU
    /// envelope.
    pub fn spawn_in_guest_context(
        &self,
        path_in_guest: &str,
        args: &[&str],
        env: &[(&str, &str)],
        join_cgroup_procs: Option<PathBuf>,
    ) -> io::Result<i32> {
        let mnt = open_ns(self.init_pid, "mnt")?;
        let pid_ns = open_ns(self.init_pid, "pid")?;
        let net = open_ns(self.init_pid, "net")?;

        let exe = std::ffi::CString::new(path_in_guest).unwrap();
        let mut argv_c: Vec<std::ffi::CString> = vec![exe.clone()];
        argv_c.extend(args.iter().map(|a| std::ffi::CString::new(*a).unwrap()));
        let mut envp_c: Vec<std::ffi::CString> = env
            .iter()
            .map(|(k, v)| std::ffi::CString::new(format!("{k}={v}")).unwrap())
            .collect();
        envp_c.push(std::ffi::CString::new("PATH=/opt/plugcell/bin:/usr/bin:/bin").unwrap());
        let cgroup_file = join_cgroup_procs
            .map(|p| std::ffi::CString::new(p.as_os_str().as_encoded_bytes()).unwrap());

        let staging = unsafe { libc::fork() };
        if staging < 0 {
            return Err(io::Error::last_os_error());
        }
        if staging == 0 {
            unsafe {
                libc::setpgid(0, 0);
                if let Some(procs) = &cgroup_file {
                    let fd = libc::open(procs.as_ptr(), libc::O_WRONLY);
                    if fd >= 0 {
                        let pid_str = std::ffi::CString::new(libc::getpid().to_string()).unwrap();
                        libc::write(fd, pid_str.as_ptr() as *const libc::c_void, pid_str.as_bytes().len());
                        libc::close(fd);
                    }
                }
                if libc::setns(mnt, libc::CLONE_NEWNS) != 0
                    || libc::setns(net, libc::CLONE_NEWNET) != 0
                    || libc::setns(pid_ns, libc::CLONE_NEWPID) != 0
                {
                    libc::_exit(121);
                }
                let worker = libc::fork();
                if worker < 0 {
                    libc::_exit(122);
                }
                if worker == 0 {
                    let devnull = std::ffi::CString::new("/dev/null").unwrap();
                    let fd = libc::open(devnull.as_ptr(), libc::O_RDWR);
                    if fd >= 0 {
                        libc::dup2(fd, 0);
                        libc::dup2(fd, 1);
                        libc::dup2(fd, 2);
                    }
                    let argv_ptrs: Vec<*const libc::c_char> = argv_c
                        .iter()
                        .map(|c| c.as_ptr())
                        .chain(std::iter::once(std::ptr::null()))
                        .collect();
                    let envp_ptrs: Vec<*const libc::c_char> = envp_c
                        .iter()
                        .map(|c| c.as_ptr())
                        .chain(std::iter::once(std::ptr::null()))
                        .collect();
                    libc::execve(exe.as_ptr(), argv_ptrs.as_ptr(), envp_ptrs.as_ptr());
                    libc::_exit(127);
                }
                let mut status = 0;
                libc::waitpid(worker, &mut status, 0);
                libc::_exit(0);
            }
        }
        unsafe {
            libc::close(mnt);
            libc::close(pid_ns);
            libc::close(net);
        }
        Ok(staging)
    }

    /// Kill everything, unmount, remove. Idempotent.
    pub fn teardown(&mut self) -> io::Result<()> {
        if self.torn_down {
            return Ok(());
        }
        self.torn_down = true;
        let _ = self.command(json!({"cmd": "shutdown"}));
        if let Some(mut svc) = self.external_service.take() {
            let _ = svc.kill();
            let _ = svc.wait();
        }
        let _ = self.cgroup.kill_all();
        // Reap the init process (we are its parent or subreaper).
        let mut status = 0;
        unsafe {
            libc::waitpid(self.init_pid, &mut status, libc::WNOHANG);
        }
        for bind in self.host_binds.iter().rev() {
            let c = std::ffi::CString::new(bind.as_os_str().as_encoded_bytes()).unwrap();
            unsafe { libc::umount2(c.as_ptr(), libc::MNT_DETACH) };
        }
        self.cgroup.remove()?;
        fs::remove_dir_all(&self.base_dir)?;
        Ok(())
    }
}

impl Drop for FixtureGuest {
    fn drop(&mut self) {
        let _ = self.teardown();
    }
}

/// Fork the guest init: staging child unshares the namespace set, forks the
/// actual init (pid 1), pivots into the rootfs and execs the probe binary.
fn spawn_guest_init(rootfs: &Path, guest_chan: &FdChannel) -> io::Result<i32> {
    // Make this process a subreaper so the init (our grandchild) stays
    // reapable after the staging child exits.
    unsafe {
        libc::prctl(libc::PR_SET_CHILD_SUBREAPER, 1, 0, 0, 0);
    }
    let (pid_tx, pid_rx) = FdChannel::pair()?;
    let rootfs = rootfs.to_path_buf();
    let ctrl_fd = guest_chan.raw_fd();

    let staging = unsafe { libc::fork() };
    if staging < 0 {
        return Err(io::Error::last_os_error());
    }
    if staging == 0 {
        // Staging child.
        let rc = unsafe {
            libc::unshare(
                libc::CLONE_NEWNS
                    | libc::CLONE_NEWPID
                    | libc::CLONE_NEWNET
                    | libc::CLONE_NEWUTS
                    | libc::CLONE_NEWIPC,
            )
        };
        if rc != 0 {
            let _ = pid_tx.send(&json!({"error": io::Error::last_os_error().to_string()}));
            unsafe { libc::_exit(1) };
        }
        let init = unsafe { libc::fork() };
        if init < 0 {
            let _ = pid_tx.send(&json!({"error": "fork init failed"}));
            unsafe { libc::_exit(1) };
        }
        if init == 0 {
            guest_init_process(&rootfs, ctrl_fd); // never returns
        }
        let _ = pid_tx.send(&json!({"pid": init}));
        unsafe { libc::_exit(0) };
    }
    // Parent.
    let mut status = 0;
    unsafe { libc::waitpid(staging, &mut status, 0) };
    drop(pid_tx);
    let msg: Value = pid_rx.recv(Duration::from_secs(10))?;
    match msg["pid"].as_i64() {
        Some(pid) => Ok(pid as i32),
        None => Err(io::Error::other(format!("guest staging failed: {msg}"))),
    }
}

/// Runs as the fixture guest's would-be init, still privileged: builds the
/// guest's private view, then execs the probe init.
fn guest_init_process(rootfs: &Path, ctrl_fd: i32) -> ! {
    let die = |step: &str| -> ! {
        eprintln!("fixture guest setup failed at {step}: {}", io::Error::last_os_error());
        unsafe { libc::_exit(1) };
    };
    unsafe {
        libc::setsid();
        // Private mount propagation, then pivot into the rootfs.
        let root = std::ffi::CString::new("/").unwrap();
        if libc::mount(std::ptr::null(), root.as_ptr(), std::ptr::null(), libc::MS_REC | libc::MS_PRIVATE, std::ptr::null()) != 0 {
            die("make-private");
        }
        let src = std::ffi::CString::new(rootfs.as_os_str().as_encoded_bytes()).unwrap();
        if libc::mount(src.as_ptr(), src.as_ptr(), std::ptr::null(), libc::MS_BIND | libc::MS_REC, std::ptr::null()) != 0 {
            die("self-bind");
        }
        if std::env::set_current_dir(rootfs).is_err() {
            die("chdir");
        }
        let dot = std::ffi::CString::new(".").unwrap();
        if libc::syscall(libc::SYS_pivot_root, dot.as_ptr(), dot.as_ptr()) != 0 {
            die("pivot_root");
        }
        if libc::umount2(dot.as_ptr(), libc::MNT_DETACH) != 0 {
            die("umount-old");
        }
        let _ = std::env::set_current_dir("/");

        // Fresh /proc for the new pid namespace.
        let proc_src = std::ffi::CString::new("proc").unwrap();
        let proc_dst = std::ffi::CString::new("/proc").unwrap();
        if libc::mount(proc_src.as_ptr(), proc_dst.as_ptr(), proc_src.as_ptr(), 0, std::ptr::null()) != 0 {
            die("mount-proc");
        }
        // Guest /dev with a mem node so the devmem baseline has a target.
        let tmpfs = std::ffi::CString::new("tmpfs").unwrap();
        let dev = std::ffi::CString::new("/dev").unwrap();
        let opts = std::ffi::CString::new("size=1m,mode=0755").unwrap();
        if libc::mount(tmpfs.as_ptr(), dev.as_ptr(), tmpfs.as_ptr(), 0, opts.as_ptr() as *const libc::c_void) != 0 {
            die("mount-dev");
        }
        for (name, major, minor) in [("/dev/null", 1, 3), ("/dev/zero", 1, 5), ("/dev/urandom", 1, 9), ("/dev/mem", 1, 1)] {
            let c = std::ffi::CString::new(name).unwrap();
            if libc::mknod(c.as_ptr(), libc::S_IFCHR | 0o666, libc::makedev(major, minor)) != 0 {
                die("mknod");
            }
        }
        let host = std::ffi::CString::new("fixture-guest").unwrap();
        libc::sethostname(host.as_ptr(), 13);
    }
    if firewall::bring_loopback_up().is_err() {
        die("lo-up");
    }
    // Clear close-on-exec on the control fd, then become the probe init.
    unsafe {
        let flags = libc::fcntl(ctrl_fd, libc::F_GETFD);
        libc::fcntl(ctrl_fd, libc::F_SETFD, flags & !libc::FD_CLOEXEC);
    }
    let exe = std::ffi::CString::new("/opt/plugcell/bin/plugcell-probe").unwrap();
    let arg0 = std::ffi::CString::new("plugcell-probe").unwrap();
    let arg1 = std::ffi::CString::new("guest-init").unwrap();
    let arg2 = std::ffi::CString::new("--ctrl-fd").unwrap();
    let arg3 = std::ffi::CString::new(ctrl_fd.to_string()).unwrap();
    let path_env = std::ffi::CString::new("PATH=/opt/plugcell/bin:/usr/bin:/bin").unwrap();
    let argv = [arg0.as_ptr(), arg1.as_ptr(), arg2.as_ptr(), arg3.as_ptr(), std::ptr::null()];
    let envp = [path_env.as_ptr(), std::ptr::null()];
    unsafe {
        libc::execve(exe.as_ptr(), argv.as_ptr(), envp.as_ptr());
        eprintln!("exec guest init: {}", io::Error::last_os_error());
        libc::_exit(127);
    }
}
