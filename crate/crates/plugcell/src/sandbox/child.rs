//! The sandbox child: everything that happens between fork and exec.
//!
//! The build order is fixed and load-bearing: namespaces → cgroup placement
//! (done by the builder) → mounts → firewall (builder) → socket pre-binds →
//! privilege drop → no-new-privileges → seccomp → exec. Seccomp comes last
//! so the filter never has to allow the builder's own setup calls; the
//! pre-bound listener sockets are how `bind`-denied plugins can still be
//! handed a legal listening port.

use std::collections::BTreeMap;
use std::ffi::CString;
use std::io;
use std::os::fd::RawFd;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::caps;
use super::ipc::FdChannel;
use super::mounts::{self, RootSpec};
use crate::policy::{LocalhostMode, SandboxPolicy};
use crate::seccomp::SeccompProgram;

#[derive(Debug, Serialize, Deserialize)]
pub enum ChildMsg {
    Forked { pid: i32 },
    Step { step: String, ok: bool, error: Option<String> },
    Ready { proxy_fd: Option<i32>, broker_fds: Vec<(u16, i32)> },
}

#[derive(Debug, Serialize, Deserialize)]
pub enum CoreCmd {
    CgroupDone,
    FirewallDone,
    /// Pre-bound listener sockets arrive with this message via SCM_RIGHTS:
    /// first the proxy listener when present, then one per allowlist port.
    BrokerFds { proxy: bool, ports: Vec<u16> },
    Exec {
        path: String,
        argv: Vec<String>,
        env: BTreeMap<String, String>,
    },
    Abort,
}

/// Inputs the child needs; assembled by the builder before fork.
pub struct ChildConfig {
    pub sandbox_id: String,
    pub policy: SandboxPolicy,
    pub root_spec: RootSpec,
    pub seccomp: SeccompProgram,
    /// False only for seccomp-ablation experiments.
    pub install_seccomp: bool,
}

const STEP_TIMEOUT: Duration = Duration::from_secs(30);

fn fail(chan: &FdChannel, step: &str, err: io::Error) -> ! {
    let _ = chan.send(&ChildMsg::Step {
        step: step.to_string(),
        ok: false,
        error: Some(err.to_string()),
    });
    std::process::exit(1);
}

fn step<T>(chan: &FdChannel, name: &str, r: io::Result<T>) -> T {
    match r {
        Ok(v) => {
            let _ = chan.send(&ChildMsg::Step {
                step: name.to_string(),
                ok: true,
                error: None,
            });
            v
        }
        Err(e) => fail(chan, name, e),
    }
}

fn wait_cmd(chan: &FdChannel, expect_step: &str) -> CoreCmd {
    match chan.recv::<CoreCmd>(STEP_TIMEOUT) {
        Ok(CoreCmd::Abort) => std::process::exit(0),
        Ok(cmd) => cmd,
        Err(e) => fail(chan, expect_step, e),
    }
}

fn clear_cloexec(fd: RawFd) {
    unsafe {
        let flags = libc::fcntl(fd, libc::F_GETFD);
        libc::fcntl(fd, libc::F_SETFD, flags & !libc::FD_CLOEXEC);
    }
}

/// Close every inherited descriptor except stdio and the control channel.
///
/// Not just hygiene: net_cls cgroup attachment re-tags every socket in the
/// joining task's fd table, so a builder socket inherited across fork would
/// be poisoned with the sandbox classid and start matching the sandbox's
/// own firewall drops.
fn scrub_inherited_fds(keep: RawFd) {
    unsafe {
        if keep > 3 {
            libc::syscall(libc::SYS_close_range, 3u32, (keep - 1) as u32, 0u32);
        }
        libc::syscall(libc::SYS_close_range, (keep + 1) as u32, u32::MAX, 0u32);
    }
}

/// Runs in the sandbox-to-be. Never returns: it either execs the runner or
/// exits after reporting a failed step.
pub fn child_main(cfg: ChildConfig, chan: FdChannel) -> ! {
    // Own session so stray signals to the builder's group miss us.
    unsafe { libc::setsid() };
    scrub_inherited_fds(chan.raw_fd());

    let ns_result = (|| -> io::Result<()> {
        let flags = libc::CLONE_NEWNS | libc::CLONE_NEWIPC | libc::CLONE_NEWUTS;
        if unsafe { libc::unshare(flags) } != 0 {
            let e = io::Error::last_os_error();
            return Err(io::Error::new(e.kind(), format!("unshare: {e}")));
        }
        let host = CString::new(cfg.sandbox_id.clone()).unwrap();
        if unsafe { libc::sethostname(host.as_ptr(), cfg.sandbox_id.len()) } != 0 {
            let e = io::Error::last_os_error();
            return Err(io::Error::new(e.kind(), format!("sethostname: {e}")));
        }
        Ok(())
    })();
    step(&chan, "namespaces", ns_result);

    // Builder moves us into the sandbox cgroup (classid included) before we
    // touch anything else.
    match wait_cmd(&chan, "cgroup") {
        CoreCmd::CgroupDone => {}
        _ => fail(&chan, "cgroup", io::Error::other("unexpected command")),
    }

    step(&chan, "mounts", mounts::make_tree_private().and_then(|_| mounts::build_root(&cfg.root_spec)));

    // Firewall rules are installed from the host side into the shared netns.
    match wait_cmd(&chan, "firewall") {
        CoreCmd::FirewallDone => {}
        _ => fail(&chan, "firewall", io::Error::other("unexpected command")),
    }

    // Listening sockets that outlive the bind() denial: the GET-only proxy
    // port and any brokered allowlist ports. The builder binds them in the
    // shared netns and hands them over as descriptors — they must never sit
    // in this process's fd table during a net_cls join, which would re-tag
    // them with the sandbox classid and firewall their replies.
    let mut proxy_fd: Option<RawFd> = None;
    let mut broker_fds: Vec<(u16, RawFd)> = Vec::new();
    let wants_broker =
        cfg.policy.localhost_mode == LocalhostMode::HttpGetOnly || !cfg.policy.bind_port_allowlist.is_empty();
    if wants_broker {
        match chan.recv_with_fds::<CoreCmd>(STEP_TIMEOUT) {
            Ok((CoreCmd::BrokerFds { proxy, ports }, mut fds)) => {
                if proxy {
                    if fds.is_empty() {
                        fail(&chan, "broker-fds", io::Error::other("missing proxy fd"));
                    }
                    proxy_fd = Some(fds.remove(0));
                }
                if fds.len() != ports.len() {
                    fail(
                        &chan,
                        "broker-fds",
                        io::Error::other(format!("expected {} port fds, got {}", ports.len(), fds.len())),
                    );
                }
                broker_fds = ports.into_iter().zip(fds).collect();
                let _ = chan.send(&ChildMsg::Step {
                    step: "broker-fds".into(),
                    ok: true,
                    error: None,
                });
            }
            Ok((CoreCmd::Abort, _)) => std::process::exit(0),
            Ok((other, _)) => fail(&chan, "broker-fds", io::Error::other(format!("unexpected {other:?}"))),
            Err(e) => fail(&chan, "broker-fds", e),
        }
    }

    step(
        &chan,
        "privileges",
        caps::deprivilege(cfg.policy.uid_map.host_uid, cfg.policy.uid_map.host_uid, &cfg.policy.caps),
    );

    let restraints = caps::set_no_new_privs().and_then(|_| {
        if cfg.install_seccomp {
            cfg.seccomp.install()
        } else {
            Ok(())
        }
    });
    step(&chan, "restraints", restraints);

    let _ = chan.send(&ChildMsg::Ready {
        proxy_fd: proxy_fd.map(|fd| fd as i32),
        broker_fds: broker_fds.iter().map(|(p, fd)| (*p, *fd as i32)).collect(),
    });

    // READY: hold for the exec command.
    loop {
        match chan.recv::<CoreCmd>(Duration::from_secs(3600)) {
            Ok(CoreCmd::Exec { path, argv, env }) => {
                let err = exec_runner_image(&path, &argv, &env, proxy_fd, &broker_fds);
                fail(&chan, "exec", err);
            }
            Ok(CoreCmd::Abort) | Err(_) => std::process::exit(0),
            Ok(_) => continue,
        }
    }
}

/// Redirect stdio to the comm log and exec. Only returns on failure.
fn exec_runner_image(
    path: &str,
    argv: &[String],
    env: &BTreeMap<String, String>,
    proxy_fd: Option<RawFd>,
    broker_fds: &[(u16, RawFd)],
) -> io::Error {
    let log = match std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(PathBuf::from(crate::comm::COMM_MOUNT).join(crate::comm::LOG_FILE))
    {
        Ok(f) => f,
        Err(e) => return e,
    };
    use std::os::fd::AsRawFd;
    unsafe {
        libc::dup2(log.as_raw_fd(), 1);
        libc::dup2(log.as_raw_fd(), 2);
    }

    let mut envp: Vec<CString> = Vec::new();
    for (k, v) in env {
        envp.push(CString::new(format!("{k}={v}")).unwrap());
    }
    envp.push(CString::new(format!("PATH={}:/usr/bin:/bin", mounts::SANDBOX_BIN)).unwrap());
    if let Some(fd) = proxy_fd {
        clear_cloexec(fd);
        envp.push(CString::new(format!("PLUGCELL_PROXY_FD={fd}")).unwrap());
    }
    if !broker_fds.is_empty() {
        for (_, fd) in broker_fds {
            clear_cloexec(*fd);
        }
        let spec: Vec<String> = broker_fds.iter().map(|(p, fd)| format!("{p}={fd}")).collect();
        envp.push(CString::new(format!("PLUGCELL_BROKER_FDS={}", spec.join(","))).unwrap());
    }

    let prog = CString::new(path).unwrap();
    let args: Vec<CString> = std::iter::once(path.to_string())
        .chain(argv.iter().cloned())
        .map(|a| CString::new(a).unwrap())
        .collect();
    let argv_ptrs: Vec<*const libc::c_char> = args
        .iter()
        .map(|a| a.as_ptr())
        .chain(std::iter::once(std::ptr::null()))
        .collect();
    let envp_ptrs: Vec<*const libc::c_char> = envp
        .iter()
        .map(|e| e.as_ptr())
        .chain(std::iter::once(std::ptr::null()))
        .collect();
    unsafe { libc::execve(prog.as_ptr(), argv_ptrs.as_ptr(), envp_ptrs.as_ptr()) };
    io::Error::last_os_error()
}
