//! Apply a [`SandboxPolicy`] against a [`GuestTarget`]: construct the
//! sandbox in fixed order, exec the plugin-runner inside it, tear everything
//! down leak-free.
//!
//! Build order: join/unshare namespaces → cgroup + classid placement →
//! mount tree → firewall in the shared netns → socket pre-binds → privilege
//! drop → no-new-privileges → seccomp → (later) exec. Any step failure rolls
//! back everything already applied.

pub mod caps;
pub mod cgroup;
mod child;
pub mod firewall;
pub mod ipc;
pub mod mounts;
pub mod nft;

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU32, Ordering};
use std::time::Duration;

use crate::comm::CommChannel;
use crate::guest::{guest_alive, GuestTarget};
use crate::policy::{validate_policy, NsMode, SandboxPolicy, CLASSID_BASE};
use crate::seccomp::render_seccomp;

use child::{ChildConfig, ChildMsg, CoreCmd};
use ipc::FdChannel;
use mounts::RootSpec;

pub use mounts::SANDBOX_BIN;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SandboxState {
    Building,
    Ready,
    Running,
    TornDown,
}

#[derive(Debug, thiserror::Error)]
pub enum BuildError {
    #[error("policy failed validation:\n{0}")]
    PolicyInvalid(String),
    #[error("guest died during sandbox build")]
    GuestGone,
    #[error("build step `{step}` failed: {cause}")]
    Failed { step: String, cause: String },
}

impl BuildError {
    fn step(step: &str, cause: impl std::fmt::Display) -> Self {
        BuildError::Failed {
            step: step.to_string(),
            cause: cause.to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct TeardownAction {
    pub resource: String,
    pub outcome: String,
}

use serde::Serialize;

#[derive(Debug, Clone, Default, Serialize, serde::Deserialize)]
pub struct TeardownReport {
    pub actions: Vec<TeardownAction>,
    pub nothing_to_do: bool,
}

impl TeardownReport {
    fn record(&mut self, resource: &str, outcome: impl std::fmt::Display) {
        self.actions.push(TeardownAction {
            resource: resource.to_string(),
            outcome: outcome.to_string(),
        });
    }
}

/// One deliberately removed construct, for ablation experiments. The policy
/// stays intact and valid; the builder simply skips applying the construct.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Seccomp,
    Firewall,
    CgroupLimits,
    RoRootfs,
}

impl std::str::FromStr for Ablation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "seccomp" => Ok(Ablation::Seccomp),
            "firewall" => Ok(Ablation::Firewall),
            "cgroup" => Ok(Ablation::CgroupLimits),
            "ro-rootfs" => Ok(Ablation::RoRootfs),
            other => Err(format!("unknown ablation `{other}`")),
        }
    }
}

/// Builder-level knobs independent of the policy.
#[derive(Debug, Clone)]
pub struct SandboxConfig {
    /// Host directory holding the runner and collector binaries.
    pub bin_dir: PathBuf,
    /// Base directory for per-sandbox state.
    pub base_dir: PathBuf,
    /// Skip applying one construct (containment experiments only).
    pub ablation: Option<Ablation>,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        SandboxConfig {
            bin_dir: default_bin_dir(),
            base_dir: crate::runtime_dir(),
            ablation: None,
        }
    }
}

/// Locate the directory with our companion binaries: `PLUGCELL_BIN_DIR`,
/// else next to the current executable (covers both installed layouts and
/// cargo's target/debug[/deps] during tests).
pub fn default_bin_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os("PLUGCELL_BIN_DIR") {
        return PathBuf::from(dir);
    }
    let exe = std::env::current_exe().unwrap_or_else(|_| PathBuf::from("/proc/self/exe"));
    let mut dir = exe.parent().map(Path::to_path_buf).unwrap_or_default();
    for _ in 0..3 {
        if dir.join("plugcell-runner").exists() {
            return dir;
        }
        dir = match dir.parent() {
            Some(p) => p.to_path_buf(),
            None => break,
        };
    }
    exe.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub struct SandboxHandle {
    pub sandbox_id: String,
    pub runner_pid: i32,
    pub classid: u32,
    pub state: SandboxState,
    pub comm_dir: PathBuf,
    policy: SandboxPolicy,
    comm: CommChannel,
    cgroup: cgroup::CgroupSet,
    netns_path: PathBuf,
    chan: Option<FdChannel>,
    base_dir: PathBuf,
    fetch_window_open: bool,
    firewall_installed: bool,
    firewall_enabled: bool,
}

static ORDINAL: AtomicU32 = AtomicU32::new(1);

fn allocate_identity() -> (String, u32) {
    use rand::Rng;
    let n = ORDINAL.fetch_add(1, Ordering::SeqCst);
    let salt: u16 = rand::rng().random();
    let id = format!("sb{:04x}{:04x}{:04x}", std::process::id() as u16, n as u16, salt);
    (id, CLASSID_BASE + n)
}

fn become_subreaper() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| unsafe {
        libc::prctl(libc::PR_SET_CHILD_SUBREAPER, 1, 0, 0, 0);
    });
}

fn open_ns_fd(path: &Path) -> io::Result<i32> {
    use std::os::unix::ffi::OsStrExt;
    let c = std::ffi::CString::new(path.as_os_str().as_bytes())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "ns path"))?;
    let fd = unsafe { libc::open(c.as_ptr(), libc::O_RDONLY | libc::O_CLOEXEC) };
    if fd < 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(fd)
}

/// Build a sandbox for `guest` under `policy`. Requires host-admin
/// privilege. On success the handle is `Ready`: namespaces joined, mounts
/// pivoted, limits applied, firewall installed, privileges dropped, seccomp
/// active — with the init process parked awaiting [`exec_runner`].
pub fn create_sandbox(
    guest: &GuestTarget,
    policy: &SandboxPolicy,
    config: &SandboxConfig,
) -> Result<SandboxHandle, BuildError> {
    let report = validate_policy(policy);
    if !report.is_valid() {
        return Err(BuildError::PolicyInvalid(report.to_string()));
    }
    if !guest_alive(guest) {
        return Err(BuildError::GuestGone);
    }
    become_subreaper();
    cgroup::ensure_host_ready().map_err(|e| BuildError::step("host-prep", e))?;

    let (sandbox_id, classid) = allocate_identity();
    let base_dir = config.base_dir.join(&sandbox_id);
    let comm_dir = base_dir.join("comm");
    let staging_root = base_dir.join("root");

    let seccomp = render_seccomp(policy).map_err(|e| BuildError::step("seccomp-render", e))?;

    let comm = CommChannel::create(&comm_dir, policy.uid_map.host_uid)
        .map_err(|e| BuildError::step("comm-dir", e))?;
    std::fs::create_dir_all(&staging_root).map_err(|e| BuildError::step("staging-dir", e))?;

    let limits = if config.ablation == Some(Ablation::CgroupLimits) {
        None
    } else {
        Some(&policy.limits)
    };
    let cg = match cgroup::CgroupSet::create(&sandbox_id, limits, classid) {
        Ok(cg) => cg,
        Err(e) => {
            let _ = std::fs::remove_dir_all(&base_dir);
            return Err(BuildError::step("cgroup", e));
        }
    };

    let mut handle = SandboxHandle {
        sandbox_id: sandbox_id.clone(),
        runner_pid: 0,
        classid,
        state: SandboxState::Building,
        comm_dir,
        policy: policy.clone(),
        comm,
        cgroup: cg,
        netns_path: guest.net_ns_ref.clone(),
        chan: None,
        base_dir,
        fetch_window_open: false,
        firewall_installed: false,
        firewall_enabled: config.ablation != Some(Ablation::Firewall),
    };

    match build_child(&mut handle, guest, config, seccomp) {
        Ok(()) => {
            handle.state = SandboxState::Ready;
            Ok(handle)
        }
        Err(e) => {
            let _ = teardown(&mut handle);
            Err(e)
        }
    }
}

fn build_child(
    handle: &mut SandboxHandle,
    guest: &GuestTarget,
    config: &SandboxConfig,
    seccomp: crate::seccomp::SeccompProgram,
) -> Result<(), BuildError> {
    let policy = handle.policy.clone();
    let share_pid = policy.sharing.pid == NsMode::SharedWithGuest;
    let share_net = policy.sharing.net == NsMode::SharedWithGuest;

    let pid_ns_fd = if share_pid {
        Some(open_ns_fd(&guest.pid_ns_ref).map_err(|e| BuildError::step("open-pidns", e))?)
    } else {
        None
    };
    let net_ns_fd = if share_net {
        Some(open_ns_fd(&guest.net_ns_ref).map_err(|e| BuildError::step("open-netns", e))?)
    } else {
        None
    };

    let (core_chan, child_chan) = FdChannel::pair().map_err(|e| BuildError::step("control-channel", e))?;

    let mut policy_mounts = policy.mounts.clone();
    if config.ablation == Some(Ablation::RoRootfs) {
        for m in policy_mounts.iter_mut() {
            if m.target == PathBuf::from(crate::policy::GUEST_ROOT) {
                m.read_only = false;
            }
        }
    }
    let root_spec = RootSpec {
        staging_root: handle.base_dir.join("root"),
        policy_mounts,
        comm_dir: handle.comm_dir.clone(),
        bin_dir: config.bin_dir.clone(),
        tmp_size_bytes: (config.ablation != Some(Ablation::CgroupLimits))
            .then(|| (policy.limits.memory_bytes / 2).clamp(8 << 20, 64 << 20)),
        plugins_size_bytes: 64 << 20,
        owner_uid: policy.uid_map.host_uid,
    };
    let cfg = ChildConfig {
        sandbox_id: handle.sandbox_id.clone(),
        policy: policy.clone(),
        root_spec,
        seccomp,
        install_seccomp: config.ablation != Some(Ablation::Seccomp),
    };

    let fork_rc = unsafe { libc::fork() };
    if fork_rc < 0 {
        return Err(BuildError::step("fork", io::Error::last_os_error()));
    }
    if fork_rc == 0 {
        // Staging process: join the guest's pid/net namespaces (or unshare
        // private ones), then fork the sandbox init so the pid-ns move takes
        // effect. Exits immediately after reporting the grandchild pid.
        drop(core_chan);
        let join = (|| -> io::Result<()> {
            match net_ns_fd {
                Some(fd) => {
                    if unsafe { libc::setns(fd, libc::CLONE_NEWNET) } != 0 {
                        return Err(io::Error::last_os_error());
                    }
                }
                None => {
                    if unsafe { libc::unshare(libc::CLONE_NEWNET) } != 0 {
                        return Err(io::Error::last_os_error());
                    }
                }
            }
            match pid_ns_fd {
                Some(fd) => {
                    if unsafe { libc::setns(fd, libc::CLONE_NEWPID) } != 0 {
                        return Err(io::Error::last_os_error());
                    }
                }
                None => {
                    if unsafe { libc::unshare(libc::CLONE_NEWPID) } != 0 {
                        return Err(io::Error::last_os_error());
                    }
                }
            }
            Ok(())
        })();
        if let Err(e) = join {
            let _ = child_chan.send(&ChildMsg::Step {
                step: "join-namespaces".into(),
                ok: false,
                error: Some(e.to_string()),
            });
            unsafe { libc::_exit(1) };
        }
        let grand = unsafe { libc::fork() };
        if grand < 0 {
            let _ = child_chan.send(&ChildMsg::Step {
                step: "fork-init".into(),
                ok: false,
                error: Some(io::Error::last_os_error().to_string()),
            });
            unsafe { libc::_exit(1) };
        }
        if grand == 0 {
            child::child_main(cfg, child_chan); // never returns
        }
        let _ = child_chan.send(&ChildMsg::Forked { pid: grand });
        unsafe { libc::_exit(0) };
    }

    // Builder side.
    drop(child_chan);
    unsafe {
        let mut status = 0;
        libc::waitpid(fork_rc, &mut status, 0);
        if let Some(fd) = pid_ns_fd {
            libc::close(fd);
        }
        if let Some(fd) = net_ns_fd {
            libc::close(fd);
        }
    }

    // The staging child and the sandbox init both write to the same
    // control socket, so the init's first step report may arrive before
    // the staging child's pid announcement. Buffer and reorder.
    let mut pending: std::collections::VecDeque<ChildMsg> = std::collections::VecDeque::new();

    let recv_step = |chan: &FdChannel,
                         pending: &mut std::collections::VecDeque<ChildMsg>,
                         want: &str|
     -> Result<(), BuildError> {
        let msg = match pending.pop_front() {
            Some(m) => Ok(m),
            None => chan.recv::<ChildMsg>(Duration::from_secs(30)),
        };
        match msg {
            Ok(ChildMsg::Step { step, ok: true, .. }) if step == want => Ok(()),
            Ok(ChildMsg::Step { step, ok: false, error }) => Err(BuildError::Failed {
                step,
                cause: error.unwrap_or_default(),
            }),
            Ok(other) => Err(BuildError::step(want, format!("unexpected message {other:?}"))),
            Err(e) => Err(BuildError::step(want, e)),
        }
    };

    let pid = loop {
        match core_chan.recv::<ChildMsg>(Duration::from_secs(10)) {
            Ok(ChildMsg::Forked { pid }) => break pid,
            Ok(ChildMsg::Step { step, ok: false, error }) => {
                return Err(BuildError::Failed {
                    step,
                    cause: error.unwrap_or_default(),
                })
            }
            Ok(out_of_order) => pending.push_back(out_of_order),
            Err(e) => return Err(BuildError::step("fork-init", e)),
        }
    };
    handle.runner_pid = pid;
    if !share_net {
        handle.netns_path = PathBuf::from(format!("/proc/{pid}/ns/net"));
    }

    recv_step(&core_chan, &mut pending, "namespaces")?;
    handle
        .cgroup
        .add_pid(pid)
        .map_err(|e| BuildError::step("cgroup-join", e))?;
    if !guest_alive(guest) {
        let _ = core_chan.send(&CoreCmd::Abort);
        return Err(BuildError::GuestGone);
    }
    core_chan
        .send(&CoreCmd::CgroupDone)
        .map_err(|e| BuildError::step("cgroup-join", e))?;

    recv_step(&core_chan, &mut pending, "mounts")?;
    if !guest_alive(guest) {
        let _ = core_chan.send(&CoreCmd::Abort);
        return Err(BuildError::GuestGone);
    }
    if config.ablation != Some(Ablation::Firewall) {
        firewall::sync(
            &handle.netns_path,
            &handle.sandbox_id,
            handle.classid,
            &firewall::effective_rules(&policy.firewall, false),
        )
        .map_err(|e| BuildError::step("firewall", e))?;
        handle.firewall_installed = true;
    }
    core_chan
        .send(&CoreCmd::FirewallDone)
        .map_err(|e| BuildError::step("firewall", e))?;

    // Broker sockets: bound host-side in the target netns, passed as
    // descriptors so they never transit a net_cls join and keep classid 0.
    let wants_broker = policy.localhost_mode == crate::policy::LocalhostMode::HttpGetOnly
        || !policy.bind_port_allowlist.is_empty();
    if wants_broker {
        let proxy_port = (policy.localhost_mode == crate::policy::LocalhostMode::HttpGetOnly)
            .then_some(policy.proxy_port);
        let ports = policy.bind_port_allowlist.clone();
        let netns = handle.netns_path.clone();
        let bind_ports = ports.clone();
        let fds = firewall::bind_broker_sockets(&netns, proxy_port, &bind_ports)
            .map_err(|e| BuildError::step("broker-bind", e))?;
        let send_result = core_chan.send_with_fds(
            &CoreCmd::BrokerFds {
                proxy: proxy_port.is_some(),
                ports,
            },
            &fds,
        );
        for fd in fds {
            unsafe { libc::close(fd) };
        }
        send_result.map_err(|e| BuildError::step("broker-fds", e))?;
        recv_step(&core_chan, &mut pending, "broker-fds")?;
    }

    recv_step(&core_chan, &mut pending, "privileges")?;
    recv_step(&core_chan, &mut pending, "restraints")?;
    let ready_msg = match pending.pop_front() {
        Some(m) => Ok(m),
        None => core_chan.recv::<ChildMsg>(Duration::from_secs(10)),
    };
    match ready_msg {
        Ok(ChildMsg::Ready { .. }) => {}
        Ok(other) => return Err(BuildError::step("ready", format!("unexpected {other:?}"))),
        Err(e) => return Err(BuildError::step("ready", e)),
    }

    handle.chan = Some(core_chan);
    Ok(())
}

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error("sandbox is not ready")]
    SandboxNotReady,
    #[error("exec failed: {0}")]
    ExecFailed(String),
}

/// Exec the runner image inside a READY sandbox. The sandbox init becomes
/// the runner, so `runner_pid` stays valid.
pub fn exec_runner(
    handle: &mut SandboxHandle,
    runner_path: &str,
    argv: &[String],
    env: &BTreeMap<String, String>,
) -> Result<(), ExecError> {
    if handle.state != SandboxState::Ready {
        return Err(ExecError::SandboxNotReady);
    }
    let chan = handle.chan.as_ref().ok_or(ExecError::SandboxNotReady)?;
    chan.send(&CoreCmd::Exec {
        path: runner_path.to_string(),
        argv: argv.to_vec(),
        env: env.clone(),
    })
    .map_err(|e| ExecError::ExecFailed(e.to_string()))?;
    // The control channel is close-on-exec in the child; EOF means the exec
    // happened. A Step message instead carries the failure.
    match chan.recv::<ChildMsg>(Duration::from_secs(10)) {
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
            handle.state = SandboxState::Running;
            handle.chan = None;
            Ok(())
        }
        Ok(ChildMsg::Step { error, .. }) => Err(ExecError::ExecFailed(error.unwrap_or_default())),
        Ok(other) => Err(ExecError::ExecFailed(format!("unexpected message {other:?}"))),
        Err(e) => Err(ExecError::ExecFailed(e.to_string())),
    }
}

/// Host-side view of the communication directory.
pub fn open_comm_channel(handle: &SandboxHandle) -> Result<&CommChannel, io::Error> {
    if handle.state == SandboxState::TornDown {
        return Err(io::Error::new(io::ErrorKind::NotConnected, "sandbox torn down"));
    }
    Ok(&handle.comm)
}

impl SandboxHandle {
    /// True while the runner exists and is not a zombie awaiting reaping
    /// (the builder is a subreaper, so exited runners linger as zombies
    /// until teardown collects them).
    pub fn runner_alive(&self) -> bool {
        if self.runner_pid <= 0 {
            return false;
        }
        match std::fs::read_to_string(format!("/proc/{}/stat", self.runner_pid)) {
            Ok(stat) => stat
                .rsplit_once(')')
                .and_then(|(_, rest)| rest.split_whitespace().next())
                .map(|state| state != "Z" && state != "X")
                .unwrap_or(false),
            Err(_) => false,
        }
    }

    pub fn memory_usage_bytes(&self) -> Option<u64> {
        self.cgroup.memory_usage_bytes()
    }

    pub fn memory_peak_bytes(&self) -> Option<u64> {
        self.cgroup.memory_peak_bytes()
    }

    /// Pause/resume the whole sandbox process tree.
    pub fn set_frozen(&self, frozen: bool) -> io::Result<()> {
        self.cgroup.set_frozen(frozen)
    }

    pub fn pids_current(&self) -> Option<u64> {
        self.cgroup.pids_current()
    }

    pub fn member_pids(&self) -> Vec<i32> {
        self.cgroup.member_pids()
    }

    pub fn netns_path(&self) -> &Path {
        &self.netns_path
    }

    pub fn policy(&self) -> &SandboxPolicy {
        &self.policy
    }

    /// Move a runner thread into the classid-exempt net_cls child group
    /// (the GET-only proxy thread). `ns_tid` is the thread id as the runner
    /// sees it — inside the guest's pid namespace — and is translated to
    /// the host id through NSpid.
    pub fn exempt_proxy_tid(&self, ns_tid: i32) -> io::Result<()> {
        let host_tid = self.resolve_ns_tid(ns_tid).ok_or_else(|| {
            io::Error::new(
                io::ErrorKind::NotFound,
                format!("runner thread with namespace tid {ns_tid} not found"),
            )
        })?;
        self.cgroup.exempt_tid_from_classid(host_tid)
    }

    /// Host tid of a runner thread identified by its in-namespace tid.
    fn resolve_ns_tid(&self, ns_tid: i32) -> Option<i32> {
        let tasks = std::fs::read_dir(format!("/proc/{}/task", self.runner_pid)).ok()?;
        for entry in tasks.flatten() {
            let host_tid: i32 = entry.file_name().to_string_lossy().parse().ok()?;
            let status = std::fs::read_to_string(entry.path().join("status")).ok()?;
            let inner = status
                .lines()
                .find_map(|l| l.strip_prefix("NSpid:"))
                .and_then(|rest| rest.split_whitespace().last())
                .and_then(|v| v.parse::<i32>().ok());
            if inner == Some(ns_tid) {
                return Some(host_tid);
            }
        }
        None
    }

    /// Widen the firewall so plugin sources are reachable (fetch window).
    pub fn open_fetch_window(&mut self) -> io::Result<()> {
        if self.firewall_enabled {
            firewall::sync(
                &self.netns_path,
                &self.sandbox_id,
                self.classid,
                &firewall::effective_rules(&self.policy.firewall, true),
            )?;
        }
        self.fetch_window_open = true;
        Ok(())
    }

    /// Re-tighten the firewall and flip the plugin staging area read-only.
    pub fn close_fetch_window(&mut self) -> io::Result<()> {
        if self.firewall_enabled {
            firewall::sync(
                &self.netns_path,
                &self.sandbox_id,
                self.classid,
                &firewall::effective_rules(&self.policy.firewall, false),
            )?;
        }
        self.fetch_window_open = false;
        if self.runner_alive() {
            mounts::with_mount_ns(self.runner_pid, mounts::remount_plugins_readonly)?;
        }
        Ok(())
    }

    pub fn fetch_window_open(&self) -> bool {
        self.fetch_window_open
    }
}

/// Kill every sandbox process, remove firewall rules, cgroups and runtime
/// directories. Idempotent and best-effort: each resource's outcome is in
/// the report.
pub fn teardown(handle: &mut SandboxHandle) -> TeardownReport {
    let mut report = TeardownReport::default();
    if handle.state == SandboxState::TornDown {
        report.nothing_to_do = true;
        return report;
    }

    if let Some(chan) = handle.chan.take() {
        let _ = chan.send(&CoreCmd::Abort);
    }

    match handle.cgroup.kill_all() {
        Ok(n) => report.record("processes", format!("killed {n}")),
        Err(e) => report.record("processes", format!("error: {e}")),
    }
    if handle.runner_pid > 0 {
        let mut status = 0;
        unsafe {
            while libc::waitpid(handle.runner_pid, &mut status, libc::WNOHANG) == 0 {
                let still_there = Path::new(&format!("/proc/{}", handle.runner_pid)).exists();
                if !still_there {
                    break;
                }
                std::thread::sleep(Duration::from_millis(5));
            }
        }
    }

    if handle.firewall_installed {
        if handle.netns_path.exists() {
            match firewall::remove(&handle.netns_path, &handle.sandbox_id) {
                Ok(true) => report.record("firewall", "removed"),
                Ok(false) => report.record("firewall", "already absent"),
                Err(e) => report.record("firewall", format!("error: {e}")),
            }
        } else {
            report.record("firewall", "netns gone (rules died with it)");
        }
        handle.firewall_installed = false;
    }

    match handle.cgroup.remove() {
        Ok(()) => report.record("cgroup", "removed"),
        Err(e) => report.record("cgroup", format!("error: {e}")),
    }

    match std::fs::remove_dir_all(&handle.base_dir) {
        Ok(()) => report.record("runtime-dir", "removed"),
        Err(e) if e.kind() == io::ErrorKind::NotFound => report.record("runtime-dir", "already absent"),
        Err(e) => report.record("runtime-dir", format!("error: {e}")),
    }

    handle.state = SandboxState::TornDown;
    report
}
