//! Pure synthesis and validation of the sandbox policy.
//!
//! A [`SandboxPolicy`] is the single source of truth for what a sandbox
//! grants and denies: which guest namespaces are joined, how the runner is
//! de-privileged, which capabilities it keeps, which syscalls are refused,
//! which packets are dropped and what resources it may burn. Everything in
//! this module is side-effect free; applying a policy lives in
//! [`crate::sandbox`].

use std::collections::BTreeSet;
use std::fmt;
use std::net::Ipv4Addr;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::guest::GuestTarget;

/// Sharing mode for one namespace kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NsMode {
    Private,
    SharedWithGuest,
}

/// Which namespaces the sandbox keeps private and which it joins from the
/// guest. Mount, user, IPC and UTS are never shared; PID and NET sharing is
/// what gives plugins their read view of guest memory and network state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamespaceSharing {
    pub mount: NsMode,
    pub user: NsMode,
    pub ipc: NsMode,
    pub uts: NsMode,
    pub pid: NsMode,
    pub net: NsMode,
}

impl NamespaceSharing {
    pub fn shared_default() -> Self {
        NamespaceSharing {
            mount: NsMode::Private,
            user: NsMode::Private,
            ipc: NsMode::Private,
            uts: NsMode::Private,
            pid: NsMode::SharedWithGuest,
            net: NsMode::SharedWithGuest,
        }
    }
}

/// Linux capabilities the policy layer knows how to talk about.
///
/// The sandbox only ever grants from [`CAPABILITY_ALLOWLIST`]; the rest are
/// here so a validator can name what an out-of-bounds policy asked for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    DacReadSearch,
    SysChroot,
    SysPtrace,
    NetRaw,
    Kill,
    SysAdmin,
    SysModule,
    NetAdmin,
    SysRawio,
    DacOverride,
    Setuid,
    Setgid,
    Setpcap,
    Mknod,
    SysBoot,
    SysNice,
    SysTime,
    NetBindService,
    Fowner,
    Chown,
}

impl Capability {
    /// Kernel capability number.
    pub fn number(self) -> u32 {
        match self {
            Capability::Chown => 0,
            Capability::DacOverride => 1,
            Capability::DacReadSearch => 2,
            Capability::Fowner => 3,
            Capability::Kill => 5,
            Capability::Setgid => 6,
            Capability::Setuid => 7,
            Capability::Setpcap => 8,
            Capability::NetBindService => 10,
            Capability::NetRaw => 13,
            Capability::SysModule => 16,
            Capability::SysRawio => 17,
            Capability::SysChroot => 18,
            Capability::SysPtrace => 19,
            Capability::SysAdmin => 21,
            Capability::SysBoot => 22,
            Capability::SysNice => 23,
            Capability::Mknod => 27,
            Capability::NetAdmin => 12,
            Capability::SysTime => 25,
        }
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_string(self).map_err(|_| fmt::Error)?;
        f.write_str(s.trim_matches('"'))
    }
}

/// The only capabilities any valid policy may grant.
pub const CAPABILITY_ALLOWLIST: [Capability; 4] = [
    Capability::DacReadSearch,
    Capability::SysChroot,
    Capability::SysPtrace,
    Capability::NetRaw,
];

/// Ordered capability set (ordering keeps renders deterministic).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CapabilitySet {
    caps: BTreeSet<Capability>,
}

impl CapabilitySet {
    pub fn from_iter<I: IntoIterator<Item = Capability>>(iter: I) -> Self {
        CapabilitySet {
            caps: iter.into_iter().collect(),
        }
    }

    pub fn contains(&self, c: Capability) -> bool {
        self.caps.contains(&c)
    }

    pub fn insert(&mut self, c: Capability) {
        self.caps.insert(c);
    }

    pub fn remove(&mut self, c: Capability) {
        self.caps.remove(&c);
    }

    pub fn iter(&self) -> impl Iterator<Item = Capability> + '_ {
        self.caps.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.caps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.caps.is_empty()
    }
}

/// What the filter does when a rule's syscall is invoked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeccompAction {
    Allow,
    /// Fail the call with this errno instead of killing the process; a
    /// buggy-but-honest plugin survives a stray blocked call.
    DenyErrno(i32),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeccompRule {
    pub syscall_name: String,
    pub action: SeccompAction,
}

impl SeccompRule {
    pub fn deny(name: &str) -> Self {
        SeccompRule {
            syscall_name: name.to_string(),
            action: SeccompAction::DenyErrno(libc::EPERM),
        }
    }
}

/// Traffic selector for one firewall rule. Every rule is additionally scoped
/// to the sandbox's classid; guest traffic is never matched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleMatch {
    /// Any traffic carrying the sandbox classid.
    SandboxClassid,
    /// Sandbox-classid traffic on the loopback interface.
    Loopback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    In,
    Out,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Destination {
    Any,
    /// One TCP endpoint, e.g. the monitoring backend or the loopback proxy.
    Tcp { ip: Ipv4Addr, port: u16 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirewallVerdict {
    Accept,
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FirewallRule {
    pub matcher: RuleMatch,
    pub direction: Direction,
    pub destination: Destination,
    /// Additional TCP source-port anchor (proxy replies are identified by
    /// their un-bindable source port).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_tcp_port: Option<u16>,
    pub verdict: FirewallVerdict,
}

/// Resource ceilings applied through the sandbox's cgroup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceLimits {
    /// Fraction of one CPU, e.g. 0.25.
    pub cpu_quota: f64,
    pub memory_bytes: u64,
    pub pids_max: u32,
    pub blkio: BlkioLimit,
}

/// Block-IO cap: proportional weight, or an absolute write-rate ceiling on
/// the device backing the output channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlkioLimit {
    Weight(u32),
    WriteBytesPerSec(u64),
}

impl Default for ResourceLimits {
    fn default() -> Self {
        ResourceLimits {
            cpu_quota: 0.25,
            memory_bytes: 128 << 20,
            pids_max: 64,
            blkio: BlkioLimit::Weight(100),
        }
    }
}

/// Maps the runner's uid inside the sandbox to an unprivileged host uid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UidMap {
    pub inside_uid: u32,
    pub host_uid: u32,
    pub range: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalhostMode {
    BlockAll,
    HttpGetOnly,
    AllowAll,
}

/// `host:port` of the monitoring backend (TCP; a UDP channel is future work).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoint {
    pub ip: Ipv4Addr,
    pub port: u16,
}

impl FromStr for Endpoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (host, port) = s.rsplit_once(':').ok_or_else(|| format!("`{s}`: expected host:port"))?;
        Ok(Endpoint {
            ip: host.parse().map_err(|_| format!("`{host}`: not an IPv4 address"))?,
            port: port.parse().map_err(|_| format!("`{port}`: not a port"))?,
        })
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.ip, self.port)
    }
}

/// One read-only bind from a host path into the sandbox mount tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MountSpec {
    pub source: PathBuf,
    pub target: PathBuf,
    pub read_only: bool,
}

impl MountSpec {
    pub fn read_only(source: impl Into<PathBuf>, target: impl Into<PathBuf>) -> Self {
        MountSpec {
            source: source.into(),
            target: target.into(),
            read_only: true,
        }
    }
}

/// Target mount point of the guest rootfs inside the sandbox.
pub const GUEST_ROOT: &str = "/guest";
/// Target mount point of the guest's cgroup subtree inside the sandbox.
pub const GUEST_CGROUP: &str = "/guest-cgroup";
/// Default host uid the sandbox runs as.
pub const DEFAULT_SANDBOX_UID: u32 = 62000;
/// Default loopback port of the GET-only proxy.
pub const DEFAULT_PROXY_PORT: u16 = 3128;
/// classid space: base + sandbox ordinal, collision-free within one host.
pub const CLASSID_BASE: u32 = 0x0010_0000;

/// The full accessibility/constraint blend for one sandbox.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandboxPolicy {
    pub sharing: NamespaceSharing,
    pub uid_map: UidMap,
    pub caps: CapabilitySet,
    pub seccomp: Vec<SeccompRule>,
    pub firewall: Vec<FirewallRule>,
    pub limits: ResourceLimits,
    pub mounts: Vec<MountSpec>,
    pub localhost_mode: LocalhostMode,
    pub passive_capture: bool,
    pub allow_bind: bool,
    pub bind_port_allowlist: Vec<u16>,
    pub backend_endpoint: Option<Endpoint>,
    /// Loopback port the GET-only proxy listens on (relevant in
    /// `http_get_only` mode).
    pub proxy_port: u16,
    /// Host uid owning the guest; recorded so de-privileging stays checkable
    /// after the policy leaves the builder.
    pub guest_owner_uid: u32,
}

/// Tuning knobs accepted by [`default_policy`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyOptions {
    pub localhost_mode: LocalhostMode,
    pub passive_capture: bool,
    pub allow_bind: bool,
    pub bind_port_allowlist: Vec<u16>,
    pub backend_endpoint: Option<Endpoint>,
    pub pid_private: bool,
    pub net_private: bool,
    pub sandbox_uid: Option<u32>,
    pub proxy_port: u16,
    pub limits: Option<ResourceLimits>,
    pub extra_mounts: Vec<MountSpec>,
}

impl Default for PolicyOptions {
    fn default() -> Self {
        PolicyOptions {
            localhost_mode: LocalhostMode::BlockAll,
            passive_capture: false,
            allow_bind: false,
            bind_port_allowlist: Vec::new(),
            backend_endpoint: None,
            pid_private: false,
            net_private: false,
            sandbox_uid: None,
            proxy_port: DEFAULT_PROXY_PORT,
            limits: None,
            extra_mounts: Vec::new(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("invalid options: {0}")]
    InvalidOpts(String),
    #[error("unknown syscall `{0}` not in the build-time syscall table")]
    UnknownSyscall(String),
}

/// Build the default policy for a resolved guest.
///
/// Defaults: PID and NET shared with the guest; capabilities exactly
/// {dac_read_search, sys_chroot, sys_ptrace}; seccomp denies
/// {ptrace, process_vm_writev, bind}; all sandbox traffic dropped including
/// loopback; read-only mounts of the guest rootfs and cgroup subtree.
pub fn default_policy(guest: &GuestTarget, opts: &PolicyOptions) -> Result<SandboxPolicy, PolicyError> {
    if opts.passive_capture && opts.net_private {
        return Err(PolicyError::InvalidOpts(
            "passive_capture requires the guest network namespace (net_private conflicts)".into(),
        ));
    }
    if let Some(uid) = opts.sandbox_uid {
        if uid == 0 {
            return Err(PolicyError::InvalidOpts("sandbox uid must not be root".into()));
        }
        if uid == guest.owner_uid {
            return Err(PolicyError::InvalidOpts(format!(
                "sandbox uid {uid} collides with guest owner uid"
            )));
        }
    }

    let mut sharing = NamespaceSharing::shared_default();
    if opts.pid_private {
        sharing.pid = NsMode::Private;
    }
    if opts.net_private {
        sharing.net = NsMode::Private;
    }

    let mut caps = CapabilitySet::from_iter([
        Capability::DacReadSearch,
        Capability::SysChroot,
        Capability::SysPtrace,
    ]);
    if opts.passive_capture {
        caps.insert(Capability::NetRaw);
    }

    let mut seccomp = vec![SeccompRule::deny("ptrace"), SeccompRule::deny("process_vm_writev")];
    if !opts.allow_bind {
        seccomp.push(SeccompRule::deny("bind"));
    }

    let host_uid = opts.sandbox_uid.unwrap_or({
        if guest.owner_uid == DEFAULT_SANDBOX_UID {
            DEFAULT_SANDBOX_UID + 1
        } else {
            DEFAULT_SANDBOX_UID
        }
    });

    let mut mounts = vec![MountSpec::read_only(&guest.rootfs_path, GUEST_ROOT)];
    for (controller, path) in &guest.cgroup_paths {
        mounts.push(MountSpec::read_only(
            path,
            PathBuf::from(GUEST_CGROUP).join(controller),
        ));
    }
    mounts.extend(opts.extra_mounts.iter().cloned());

    let mut policy = SandboxPolicy {
        sharing,
        uid_map: UidMap {
            inside_uid: 0,
            host_uid,
            range: 1,
        },
        caps,
        seccomp,
        firewall: Vec::new(),
        limits: opts.limits.unwrap_or_default(),
        mounts,
        localhost_mode: opts.localhost_mode,
        passive_capture: opts.passive_capture,
        allow_bind: opts.allow_bind,
        bind_port_allowlist: opts.bind_port_allowlist.clone(),
        backend_endpoint: opts.backend_endpoint,
        proxy_port: opts.proxy_port,
        guest_owner_uid: guest.owner_uid,
    };
    policy.firewall = render_firewall(&policy);
    Ok(policy)
}

/// Ordered firewall rule list: ACCEPT exceptions first, then the terminal
/// classid-matched DROP pair for both directions.
pub fn render_firewall(p: &SandboxPolicy) -> Vec<FirewallRule> {
    let mut rules = Vec::new();
    if let Some(backend) = p.backend_endpoint {
        rules.push(FirewallRule {
            matcher: RuleMatch::SandboxClassid,
            direction: Direction::Out,
            destination: Destination::Tcp {
                ip: backend.ip,
                port: backend.port,
            },
            source_tcp_port: None,
            verdict: FirewallVerdict::Accept,
        });
    }
    if p.localhost_mode == LocalhostMode::HttpGetOnly {
        // The whole loopback exception is anchored to the proxy port, in
        // both packet directions: requests toward it and replies from it.
        // Plugins cannot bind (seccomp) and the port is taken, so the
        // source-port anchor cannot be forged from inside.
        rules.push(FirewallRule {
            matcher: RuleMatch::Loopback,
            direction: Direction::Out,
            destination: Destination::Tcp {
                ip: Ipv4Addr::LOCALHOST,
                port: p.proxy_port,
            },
            source_tcp_port: None,
            verdict: FirewallVerdict::Accept,
        });
        rules.push(FirewallRule {
            matcher: RuleMatch::Loopback,
            direction: Direction::Out,
            destination: Destination::Any,
            source_tcp_port: Some(p.proxy_port),
            verdict: FirewallVerdict::Accept,
        });
        rules.push(FirewallRule {
            matcher: RuleMatch::Loopback,
            direction: Direction::In,
            destination: Destination::Tcp {
                ip: Ipv4Addr::LOCALHOST,
                port: p.proxy_port,
            },
            source_tcp_port: None,
            verdict: FirewallVerdict::Accept,
        });
        rules.push(FirewallRule {
            matcher: RuleMatch::Loopback,
            direction: Direction::In,
            destination: Destination::Any,
            source_tcp_port: Some(p.proxy_port),
            verdict: FirewallVerdict::Accept,
        });
    }
    if p.localhost_mode == LocalhostMode::AllowAll {
        rules.push(FirewallRule {
            matcher: RuleMatch::Loopback,
            direction: Direction::Out,
            destination: Destination::Any,
            source_tcp_port: None,
            verdict: FirewallVerdict::Accept,
        });
        rules.push(FirewallRule {
            matcher: RuleMatch::Loopback,
            direction: Direction::In,
            destination: Destination::Any,
            source_tcp_port: None,
            verdict: FirewallVerdict::Accept,
        });
    }
    rules.push(FirewallRule {
        matcher: RuleMatch::SandboxClassid,
        direction: Direction::Out,
        destination: Destination::Any,
        source_tcp_port: None,
        verdict: FirewallVerdict::Drop,
    });
    rules.push(FirewallRule {
        matcher: RuleMatch::SandboxClassid,
        direction: Direction::In,
        destination: Destination::Any,
        source_tcp_port: None,
        verdict: FirewallVerdict::Drop,
    });
    rules
}

/// One failed invariant: which rule broke and where.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub invariant: String,
    pub field: String,
    pub detail: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, invariant: &str, field: &str, detail: String) {
        self.violations.push(Violation {
            invariant: invariant.to_string(),
            field: field.to_string(),
            detail,
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "policy valid");
        }
        for v in &self.violations {
            writeln!(f, "{}: {} ({})", v.invariant, v.detail, v.field)?;
        }
        Ok(())
    }
}

/// Check every policy invariant; violations are data, not errors.
pub fn validate_policy(p: &SandboxPolicy) -> ValidationReport {
    let mut report = ValidationReport::default();

    for (name, mode) in [
        ("mount", p.sharing.mount),
        ("user", p.sharing.user),
        ("ipc", p.sharing.ipc),
        ("uts", p.sharing.uts),
    ] {
        if mode != NsMode::Private {
            report.push(
                "namespace-privacy",
                "sharing",
                format!("{name} namespace must be private"),
            );
        }
    }

    for cap in p.caps.iter() {
        if !CAPABILITY_ALLOWLIST.contains(&cap) {
            report.push(
                "capability-allowlist",
                "caps",
                format!("capability {cap} is outside the allowlist"),
            );
        }
    }
    if p.caps.contains(Capability::NetRaw) && !p.passive_capture {
        report.push(
            "netraw-passive-capture",
            "caps",
            "net_raw requires the passive_capture flag".into(),
        );
    }
    if p.passive_capture && p.sharing.net != NsMode::SharedWithGuest {
        report.push(
            "passive-capture-shared-net",
            "passive_capture",
            "passive capture without a shared network namespace has nothing to observe".into(),
        );
    }

    if p.caps.contains(Capability::SysPtrace) {
        for denied in ["ptrace", "process_vm_writev"] {
            if !denies_syscall(p, denied) {
                report.push(
                    "ptrace-seccomp-blend",
                    "seccomp",
                    format!("sys_ptrace is granted but seccomp does not deny {denied}"),
                );
            }
        }
    }
    if !p.allow_bind && !denies_syscall(p, "bind") {
        report.push(
            "bind-denial",
            "seccomp",
            "allow_bind is false but seccomp does not deny bind".into(),
        );
    }
    if p.allow_bind && denies_syscall(p, "bind") {
        report.push(
            "bind-denial",
            "seccomp",
            "allow_bind is true but seccomp still denies bind".into(),
        );
    }

    validate_firewall(p, &mut report);

    if !(p.limits.cpu_quota > 0.0) {
        report.push("limits-positive", "limits.cpu_quota", "cpu quota must be positive".into());
    }
    if p.limits.memory_bytes == 0 {
        report.push("limits-positive", "limits.memory_bytes", "memory limit must be positive".into());
    }
    if p.limits.pids_max == 0 {
        report.push("limits-positive", "limits.pids_max", "pids limit must be positive".into());
    }
    match p.limits.blkio {
        BlkioLimit::Weight(0) => {
            report.push("limits-positive", "limits.blkio", "blkio weight must be positive".into())
        }
        BlkioLimit::WriteBytesPerSec(0) => {
            report.push("limits-positive", "limits.blkio", "blkio rate must be positive".into())
        }
        _ => {}
    }

    if p.uid_map.host_uid == 0 {
        report.push("deprivilege-uid", "uid_map", "sandbox must map to a non-root host uid".into());
    }
    if p.uid_map.host_uid == p.guest_owner_uid {
        report.push(
            "deprivilege-uid",
            "uid_map",
            "sandbox host uid must differ from the guest owner uid".into(),
        );
    }
    if p.uid_map.range == 0 {
        report.push("deprivilege-uid", "uid_map", "uid map range must be positive".into());
    }

    let mut has_guest_root = false;
    let mut has_guest_cgroup = false;
    for m in &p.mounts {
        if !m.read_only {
            report.push(
                "mounts-read-only",
                "mounts",
                format!("mount of {} must be read-only", m.source.display()),
            );
        }
        if m.target == PathBuf::from(GUEST_ROOT) {
            has_guest_root = true;
        }
        if m.target.starts_with(GUEST_CGROUP) {
            has_guest_cgroup = true;
        }
    }
    if !has_guest_root {
        report.push("mandatory-mounts", "mounts", format!("missing {GUEST_ROOT} mount"));
    }
    if !has_guest_cgroup {
        report.push("mandatory-mounts", "mounts", format!("missing {GUEST_CGROUP} mount"));
    }

    report
}

fn denies_syscall(p: &SandboxPolicy, name: &str) -> bool {
    p.seccomp
        .iter()
        .any(|r| r.syscall_name == name && matches!(r.action, SeccompAction::DenyErrno(_)))
}

fn validate_firewall(p: &SandboxPolicy, report: &mut ValidationReport) {
    let rules = &p.firewall;
    let drop_out = rules.iter().position(|r| {
        r.verdict == FirewallVerdict::Drop
            && r.direction == Direction::Out
            && r.destination == Destination::Any
            && r.matcher == RuleMatch::SandboxClassid
    });
    let drop_in = rules.iter().position(|r| {
        r.verdict == FirewallVerdict::Drop
            && r.direction == Direction::In
            && r.destination == Destination::Any
            && r.matcher == RuleMatch::SandboxClassid
    });
    match (drop_out, drop_in) {
        (Some(o), Some(i)) => {
            for (idx, r) in rules.iter().enumerate() {
                if r.verdict == FirewallVerdict::Accept && (idx > o || idx > i) {
                    report.push(
                        "firewall-terminal-drop",
                        "firewall",
                        "accept exceptions must precede the terminal drop pair".into(),
                    );
                    break;
                }
            }
        }
        _ => report.push(
            "firewall-terminal-drop",
            "firewall",
            "both directions must end in a classid-matched drop-all".into(),
        ),
    }

    for r in rules {
        if r.verdict != FirewallVerdict::Accept {
            continue;
        }
        let allowed = match (r.matcher, r.destination) {
            (RuleMatch::SandboxClassid, Destination::Tcp { ip, port }) => {
                p.backend_endpoint == Some(Endpoint { ip, port })
            }
            (RuleMatch::Loopback, Destination::Tcp { ip, port }) => {
                p.localhost_mode == LocalhostMode::HttpGetOnly
                    && ip == Ipv4Addr::LOCALHOST
                    && port == p.proxy_port
            }
            (RuleMatch::Loopback, Destination::Any) => {
                p.localhost_mode == LocalhostMode::AllowAll
                    || (p.localhost_mode == LocalhostMode::HttpGetOnly
                        && r.source_tcp_port == Some(p.proxy_port))
            }
            _ => false,
        };
        if !allowed {
            report.push(
                "firewall-exception-scope",
                "firewall",
                format!("accept rule {r:?} is broader than the configured exceptions"),
            );
        }
        if p.localhost_mode == LocalhostMode::BlockAll && r.matcher == RuleMatch::Loopback {
            report.push(
                "loopback-block",
                "firewall",
                "block_all forbids loopback accept rules".into(),
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guest::GuestTarget;

    fn fixture_guest() -> GuestTarget {
        GuestTarget::synthetic("g1", "/tmp/g1-rootfs", 4242, 1000)
    }

    #[test]
    fn default_policy_grants_exactly_the_three_caps() {
        let p = default_policy(&fixture_guest(), &PolicyOptions::default()).unwrap();
        let caps: Vec<_> = p.caps.iter().collect();
        assert_eq!(
            caps,
            vec![Capability::DacReadSearch, Capability::SysChroot, Capability::SysPtrace]
        );
        assert!(!p.passive_capture);
        assert_eq!(p.localhost_mode, LocalhostMode::BlockAll);
        assert_eq!(p.sharing.pid, NsMode::SharedWithGuest);
        assert_eq!(p.sharing.net, NsMode::SharedWithGuest);
    }

    #[test]
    fn passive_capture_adds_net_raw() {
        let opts = PolicyOptions {
            passive_capture: true,
            ..Default::default()
        };
        let p = default_policy(&fixture_guest(), &opts).unwrap();
        assert!(p.caps.contains(Capability::NetRaw));
        assert!(validate_policy(&p).is_valid());
    }

    #[test]
    fn passive_capture_with_private_net_is_invalid_opts() {
        let opts = PolicyOptions {
            passive_capture: true,
            net_private: true,
            ..Default::default()
        };
        assert!(matches!(
            default_policy(&fixture_guest(), &opts),
            Err(PolicyError::InvalidOpts(_))
        ));
    }

    #[test]
    fn get_only_mode_has_exactly_one_loopback_accept_toward_proxy() {
        let opts = PolicyOptions {
            localhost_mode: LocalhostMode::HttpGetOnly,
            ..Default::default()
        };
        let p = default_policy(&fixture_guest(), &opts).unwrap();
        let loopback_accepts: Vec<_> = p
            .firewall
            .iter()
            .filter(|r| r.verdict == FirewallVerdict::Accept && r.matcher == RuleMatch::Loopback)
            .collect();
        // Every loopback exception is anchored to the proxy port, as the
        // destination of requests or the source of replies.
        assert!(!loopback_accepts.is_empty());
        for rule in &loopback_accepts {
            let anchored = rule.destination
                == Destination::Tcp {
                    ip: Ipv4Addr::LOCALHOST,
                    port: DEFAULT_PROXY_PORT,
                }
                || rule.source_tcp_port == Some(DEFAULT_PROXY_PORT);
            assert!(anchored, "{rule:?}");
        }
        assert!(validate_policy(&p).is_valid());
    }

    #[test]
    fn backend_exception_precedes_terminal_drops() {
        let opts = PolicyOptions {
            backend_endpoint: Some("10.0.0.5:4433".parse().unwrap()),
            ..Default::default()
        };
        let p = default_policy(&fixture_guest(), &opts).unwrap();
        let rules = render_firewall(&p);
        assert_eq!(rules.len(), 3);
        assert_eq!(rules[0].verdict, FirewallVerdict::Accept);
        assert_eq!(
            rules[0].destination,
            Destination::Tcp {
                ip: "10.0.0.5".parse().unwrap(),
                port: 4433
            }
        );
        assert_eq!(rules[1].verdict, FirewallVerdict::Drop);
        assert_eq!(rules[1].direction, Direction::Out);
        assert_eq!(rules[2].verdict, FirewallVerdict::Drop);
        assert_eq!(rules[2].direction, Direction::In);
    }

    #[test]
    fn block_all_without_backend_is_just_the_drop_pair() {
        let p = default_policy(&fixture_guest(), &PolicyOptions::default()).unwrap();
        let rules = render_firewall(&p);
        assert_eq!(rules.len(), 2);
        assert!(rules.iter().all(|r| r.verdict == FirewallVerdict::Drop));
    }

    #[test]
    fn default_policy_validates_clean() {
        let p = default_policy(&fixture_guest(), &PolicyOptions::default()).unwrap();
        let report = validate_policy(&p);
        assert!(report.is_valid(), "{report}");
    }

    #[test]
    fn kill_capability_is_flagged_by_the_allowlist() {
        let mut p = default_policy(&fixture_guest(), &PolicyOptions::default()).unwrap();
        p.caps.insert(Capability::Kill);
        let report = validate_policy(&p);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].invariant, "capability-allowlist");
    }

    #[test]
    fn missing_process_vm_writev_denial_breaks_the_blend() {
        let mut p = default_policy(&fixture_guest(), &PolicyOptions::default()).unwrap();
        p.seccomp.retain(|r| r.syscall_name != "process_vm_writev");
        let report = validate_policy(&p);
        assert!(report
            .violations
            .iter()
            .any(|v| v.invariant == "ptrace-seccomp-blend"));
    }

    #[test]
    fn writable_mount_is_flagged() {
        let mut p = default_policy(&fixture_guest(), &PolicyOptions::default()).unwrap();
        p.mounts[0].read_only = false;
        assert!(validate_policy(&p)
            .violations
            .iter()
            .any(|v| v.invariant == "mounts-read-only"));
    }

    #[test]
    fn block_all_rejects_loopback_accepts() {
        let mut p = default_policy(&fixture_guest(), &PolicyOptions::default()).unwrap();
        p.firewall.insert(
            0,
            FirewallRule {
                matcher: RuleMatch::Loopback,
                direction: Direction::Out,
                destination: Destination::Any,
                source_tcp_port: None,
                verdict: FirewallVerdict::Accept,
            },
        );
        let report = validate_policy(&p);
        assert!(report.violations.iter().any(|v| v.invariant == "loopback-block"));
    }

    #[test]
    fn removing_an_accept_rule_keeps_the_policy_valid() {
        let opts = PolicyOptions {
            backend_endpoint: Some("10.0.0.5:4433".parse().unwrap()),
            localhost_mode: LocalhostMode::HttpGetOnly,
            ..Default::default()
        };
        let mut p = default_policy(&fixture_guest(), &opts).unwrap();
        assert!(validate_policy(&p).is_valid());
        while let Some(pos) = p.firewall.iter().position(|r| r.verdict == FirewallVerdict::Accept) {
            p.firewall.remove(pos);
            assert!(validate_policy(&p).is_valid(), "monotonic restraint broken");
        }
    }

    proptest::proptest! {
        /// Round-trip: every valid option set yields a policy its own
        /// validator accepts, and rendering it is deterministic.
        #[test]
        fn default_policy_always_validates(
            localhost in 0usize..3,
            passive_capture: bool,
            allow_bind: bool,
            pid_private: bool,
            net_private: bool,
            sandbox_uid in 1u32..60_000,
            proxy_port in 1024u16..,
            backend in proptest::option::of((1u8.., 1024u16..)),
        ) {
            let opts = PolicyOptions {
                localhost_mode: [LocalhostMode::BlockAll, LocalhostMode::HttpGetOnly, LocalhostMode::AllowAll][localhost],
                passive_capture,
                allow_bind,
                pid_private,
                net_private: net_private && !passive_capture,
                sandbox_uid: Some(sandbox_uid),
                proxy_port,
                backend_endpoint: backend.map(|(oct, port)| Endpoint {
                    ip: Ipv4Addr::new(10, 0, 0, oct),
                    port,
                }),
                ..Default::default()
            };
            let guest = GuestTarget::synthetic("pg", "/tmp/pg-rootfs", 77, 1000);
            let policy = default_policy(&guest, &opts).unwrap();
            let report = validate_policy(&policy);
            proptest::prop_assert!(report.is_valid(), "{report}");
            let rules = render_firewall(&policy);
            proptest::prop_assert_eq!(&rules, &policy.firewall);

            // Whenever sys_ptrace is granted, the rendered program denies
            // ptrace and process_vm_writev (scanned from the rule list).
            if policy.caps.contains(Capability::SysPtrace) {
                let prog = crate::seccomp::render_seccomp(&policy).unwrap();
                let denied: Vec<u32> = prog.denied_syscalls().iter().map(|(nr, _)| *nr).collect();
                proptest::prop_assert!(denied.contains(&crate::seccomp::syscall_number("ptrace").unwrap()));
                proptest::prop_assert!(denied.contains(&crate::seccomp::syscall_number("process_vm_writev").unwrap()));
            }

            // Monotonic restraint: adding any out-of-allowlist capability
            // must invalidate.
            let mut worse = policy.clone();
            worse.caps.insert(Capability::SysAdmin);
            proptest::prop_assert!(!validate_policy(&worse).is_valid());
        }
    }

    #[test]
    fn policy_json_round_trips() {
        let opts = PolicyOptions {
            backend_endpoint: Some("10.0.0.5:4433".parse().unwrap()),
            passive_capture: true,
            ..Default::default()
        };
        let p = default_policy(&fixture_guest(), &opts).unwrap();
        let json = serde_json::to_string_pretty(&p).unwrap();
        let back: SandboxPolicy = serde_json::from_str(&json).unwrap();
        assert_eq!(p, back);
        // Field names mirror the struct in snake_case.
        assert!(json.contains("\"localhost_mode\""));
        assert!(json.contains("\"uid_map\""));
    }
}
