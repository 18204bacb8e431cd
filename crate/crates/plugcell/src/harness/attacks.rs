//! The attack-vector catalog and per-attack verdict logic.
//!
//! Every payload is a bounded synthetic fixture that attempts exactly the
//! primitive its real-world counterpart needs. Verdicts come from probes
//! observing guest/host state (file hashes, process liveness, marker files,
//! resource availability) — never from the payload's own exit status.

use std::io;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::policy::{default_policy, LocalhostMode, PolicyOptions};
use crate::sandbox::{self, exec_runner, teardown, Ablation, SandboxConfig, SANDBOX_BIN};

use super::fixture::FixtureGuest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackName {
    RootfsTamper,
    ForkBomb,
    MemHog,
    CpuHog,
    ZipBomb,
    PortHoard,
    CodeInjectPtrace,
    ProcmemWrite,
    LdPreloadHook,
    CovertExec,
    ReverseShellExfil,
    LoopbackAttack,
    DiskPrivescTmpfile,
    SignalKillGuest,
    DevmemAccess,
}

impl AttackName {
    pub const ALL: [AttackName; 15] = [
        AttackName::RootfsTamper,
        AttackName::ForkBomb,
        AttackName::MemHog,
        AttackName::CpuHog,
        AttackName::ZipBomb,
        AttackName::PortHoard,
        AttackName::CodeInjectPtrace,
        AttackName::ProcmemWrite,
        AttackName::LdPreloadHook,
        AttackName::CovertExec,
        AttackName::ReverseShellExfil,
        AttackName::LoopbackAttack,
        AttackName::DiskPrivescTmpfile,
        AttackName::SignalKillGuest,
        AttackName::DevmemAccess,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AttackName::RootfsTamper => "rootfs_tamper",
            AttackName::ForkBomb => "fork_bomb",
            AttackName::MemHog => "mem_hog",
            AttackName::CpuHog => "cpu_hog",
            AttackName::ZipBomb => "zip_bomb",
            AttackName::PortHoard => "port_hoard",
            AttackName::CodeInjectPtrace => "code_inject_ptrace",
            AttackName::ProcmemWrite => "procmem_write",
            AttackName::LdPreloadHook => "ld_preload_hook",
            AttackName::CovertExec => "covert_exec",
            AttackName::ReverseShellExfil => "reverse_shell_exfil",
            AttackName::LoopbackAttack => "loopback_attack",
            AttackName::DiskPrivescTmpfile => "disk_privesc_tmpfile",
            AttackName::SignalKillGuest => "signal_kill_guest",
            AttackName::DevmemAccess => "devmem_access",
        }
    }

    pub fn parse(s: &str) -> Option<AttackName> {
        AttackName::ALL.iter().copied().find(|a| a.as_str() == s)
    }

    /// The sandbox construct expected to neutralize this attack.
    pub fn expected_blocker(&self) -> &'static str {
        match self {
            AttackName::RootfsTamper | AttackName::LdPreloadHook | AttackName::DiskPrivescTmpfile => {
                "read-only guest rootfs"
            }
            AttackName::ForkBomb => "pids cgroup limit",
            AttackName::MemHog => "memory cgroup limit",
            AttackName::CpuHog => "cpu cgroup quota",
            AttackName::ZipBomb => "capped scratch space + memory cgroup limit",
            AttackName::PortHoard => "seccomp bind denial",
            AttackName::CodeInjectPtrace => "seccomp ptrace denial",
            AttackName::ProcmemWrite => "seccomp process_vm_writev denial",
            AttackName::CovertExec => "cgroup attribution + host visibility",
            AttackName::ReverseShellExfil => "classid firewall drop (egress)",
            AttackName::LoopbackAttack => "classid firewall drop (loopback)",
            AttackName::SignalKillGuest => "uid separation without kill credential",
            AttackName::DevmemAccess => "minimal /dev and nodev guest mount",
        }
    }

    /// Which ablation flips this attack to ESCAPED inside the sandbox.
    pub fn defeated_by(&self) -> Option<Ablation> {
        match self {
            AttackName::CodeInjectPtrace | AttackName::ProcmemWrite | AttackName::PortHoard => {
                Some(Ablation::Seccomp)
            }
            AttackName::ReverseShellExfil | AttackName::LoopbackAttack => Some(Ablation::Firewall),
            AttackName::ForkBomb | AttackName::MemHog | AttackName::CpuHog | AttackName::ZipBomb => {
                Some(Ablation::CgroupLimits)
            }
            AttackName::RootfsTamper | AttackName::DiskPrivescTmpfile | AttackName::LdPreloadHook => {
                Some(Ablation::RoRootfs)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunContext {
    Guest,
    Host,
    Sandbox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Contained,
    Escaped,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Verdict {
    pub attack: String,
    pub run_context: RunContext,
    pub outcome: Outcome,
    pub evidence: Value,
    pub blocker_observed: String,
}

#[derive(Debug, thiserror::Error)]
pub enum AttackError {
    #[error("fixture setup failed: {0}")]
    FixtureSetup(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Environment one attack runs in.
pub struct AttackRun<'a> {
    pub guest: &'a FixtureGuest,
    pub bin_dir: &'a Path,
    pub base_dir: &'a Path,
    pub ablation: Option<Ablation>,
    pub localhost_mode: LocalhostMode,
}

/// Needs a live probe of the guest while the payload still runs?
fn needs_concurrent_probe(attack: AttackName) -> bool {
    matches!(
        attack,
        AttackName::CpuHog | AttackName::PortHoard | AttackName::CovertExec
    )
}

fn target_pid_for(attack: AttackName, guest: &FixtureGuest) -> i32 {
    match attack {
        AttackName::ProcmemWrite => guest.sleeper_pid,
        AttackName::CodeInjectPtrace | AttackName::SignalKillGuest => guest.victim_pid,
        _ => 0,
    }
}

/// Execute the payload in the requested context and return its self-report
/// (whatever it claims to have achieved) plus any mid-run probe data.
fn execute_payload(
    attack: AttackName,
    ctx: RunContext,
    run: &AttackRun<'_>,
) -> Result<(Value, Value), AttackError> {
    let target_pid = target_pid_for(attack, run.guest);
    match ctx {
        RunContext::Sandbox => {
            let guest_target = run
                .guest
                .resolve()
                .map_err(|e| AttackError::FixtureSetup(e.to_string()))?;
            let opts = PolicyOptions {
                localhost_mode: run.localhost_mode,
                ..Default::default()
            };
            let policy = default_policy(&guest_target, &opts)
                .map_err(|e| AttackError::FixtureSetup(e.to_string()))?;
            let config = SandboxConfig {
                bin_dir: run.bin_dir.to_path_buf(),
                base_dir: run.base_dir.to_path_buf(),
                ablation: run.ablation,
            };
            let mut handle = sandbox::create_sandbox(&guest_target, &policy, &config)
                .map_err(|e| AttackError::FixtureSetup(e.to_string()))?;
            let comm_dir = handle.comm_dir.clone();
            let argv: Vec<String> = vec![
                "attack".into(),
                attack.as_str().into(),
                "--out".into(),
                "/comm/attack.json".into(),
                "--root".into(),
                "/guest".into(),
                "--target-pid".into(),
                target_pid.to_string(),
            ];
            let exec = exec_runner(
                &mut handle,
                &format!("{SANDBOX_BIN}/plugcell-probe"),
                &argv,
                &Default::default(),
            );
            if let Err(e) = exec {
                let _ = teardown(&mut handle);
                return Err(AttackError::FixtureSetup(e.to_string()));
            }
            let mid_probe = if needs_concurrent_probe(attack) {
                std::thread::sleep(Duration::from_millis(500));
                concurrent_probe(attack, run, &handle)
            } else {
                Value::Null
            };
            // Wait for the payload to finish (bounded).
            let deadline = std::time::Instant::now() + Duration::from_secs(30);
            while handle.runner_alive() && std::time::Instant::now() < deadline {
                std::thread::sleep(Duration::from_millis(50));
            }
            let report: Value = std::fs::read(comm_dir.join("attack.json"))
                .ok()
                .and_then(|b| serde_json::from_slice(&b).ok())
                .unwrap_or(Value::Null);
            let _ = teardown(&mut handle);
            Ok((report, mid_probe))
        }
        RunContext::Guest => {
            let argv = vec![
                "attack".to_string(),
                attack.as_str().to_string(),
                "--out".into(),
                "/tmp/attack-report.json".into(),
                "--root".into(),
                "/".into(),
                "--target-pid".into(),
                target_pid.to_string(),
            ];
            let argv_ref: Vec<&str> = argv.iter().map(String::as_str).collect();
            let mid_probe;
            if needs_concurrent_probe(attack) {
                let reply = run
                    .guest
                    .command(json!({"cmd": "run", "argv": argv_ref, "detach": true}))?;
                if reply["ok"] != true {
                    return Err(AttackError::FixtureSetup(format!("payload start: {reply}")));
                }
                std::thread::sleep(Duration::from_millis(500));
                mid_probe = concurrent_probe_guest(attack, run);
                std::thread::sleep(Duration::from_millis(2500));
            } else {
                let reply = run.guest.run_in_guest(&argv_ref, 30_000)?;
                if reply["ok"] != true {
                    return Err(AttackError::FixtureSetup(format!("payload run: {reply}")));
                }
                mid_probe = Value::Null;
            }
            let report = run
                .guest
                .command(json!({"cmd": "read", "path": "/tmp/attack-report.json"}))?;
            let parsed: Value = report["data"]
                .as_str()
                .and_then(|s| serde_json::from_str(s).ok())
                .unwrap_or(Value::Null);
            Ok((parsed, mid_probe))
        }
        RunContext::Host => {
            let out = run.base_dir.join(format!("host-attack-{}.json", attack.as_str()));
            let status = std::process::Command::new(run.bin_dir.join("plugcell-probe"))
                .args([
                    "attack",
                    attack.as_str(),
                    "--out",
                    &out.display().to_string(),
                    "--root",
                    &run.guest.rootfs.display().to_string(),
                    "--target-pid",
                    "0",
                ])
                .status();
            if let Err(e) = status {
                return Err(AttackError::FixtureSetup(e.to_string()));
            }
            let report: Value = std::fs::read(&out)
                .ok()
                .and_then(|b| serde_json::from_slice(&b).ok())
                .unwrap_or(Value::Null);
            let _ = std::fs::remove_file(&out);
            Ok((report, Value::Null))
        }
    }
}

/// Median guest benchmark rate (iters per 900 ms window) over `n` probes.
fn bench_median(run: &AttackRun<'_>, n: usize) -> u64 {
    let mut samples: Vec<u64> = (0..n)
        .map(|_| {
            run.guest
                .command(json!({"cmd": "bench", "ms": 900}))
                .ok()
                .and_then(|r| r["iters"].as_u64())
                .unwrap_or(0)
        })
        .collect();
    samples.sort_unstable();
    samples[samples.len() / 2]
}

/// Probe the guest while a sandboxed payload is still running.
fn concurrent_probe(attack: AttackName, run: &AttackRun<'_>, handle: &sandbox::SandboxHandle) -> Value {
    match attack {
        AttackName::CpuHog => {
            json!({"during_iters": bench_median(run, 3)})
        }
        AttackName::PortHoard => {
            let bind = run
                .guest
                .command(json!({"cmd": "bind", "port": 9010}))
                .unwrap_or(Value::Null);
            json!({"guest_bind_ok": bind["ok"]})
        }
        AttackName::CovertExec => {
            // Host-side scan for the renamed process; attribution comes from
            // sandbox cgroup membership.
            let members = handle.member_pids();
            let mut fake_pids = Vec::new();
            for _ in 0..20 {
                fake_pids = find_host_pids_by_comm("kworker/u9:9");
                if !fake_pids.is_empty() {
                    break;
                }
                std::thread::sleep(Duration::from_millis(100));
            }
            let attributed = fake_pids.iter().all(|p| members.contains(p)) && !fake_pids.is_empty();
            json!({
                "fake_pids": fake_pids,
                "sandbox_members": members,
                "host_visible_and_attributed": attributed,
            })
        }
        _ => Value::Null,
    }
}

fn concurrent_probe_guest(attack: AttackName, run: &AttackRun<'_>) -> Value {
    match attack {
        AttackName::CpuHog => {
            json!({"during_iters": bench_median(run, 3)})
        }
        AttackName::PortHoard => {
            let bind = run
                .guest
                .command(json!({"cmd": "bind", "port": 9010}))
                .unwrap_or(Value::Null);
            json!({"guest_bind_ok": bind["ok"]})
        }
        AttackName::CovertExec => {
            let fake = find_host_pids_by_comm("kworker/u9:9");
            json!({"fake_pids": fake, "host_visible_and_attributed": false})
        }
        _ => Value::Null,
    }
}

fn find_host_pids_by_comm(comm: &str) -> Vec<i32> {
    let mut out = Vec::new();
    if let Ok(entries) = std::fs::read_dir("/proc") {
        for e in entries.flatten() {
            let Ok(pid) = e.file_name().to_string_lossy().parse::<i32>() else { continue };
            if let Ok(c) = std::fs::read_to_string(format!("/proc/{pid}/comm")) {
                if c.trim() == comm {
                    out.push(pid);
                }
            }
        }
    }
    out
}

fn guest_read(run: &AttackRun<'_>, path: &str) -> Option<String> {
    run.guest
        .command(json!({"cmd": "read", "path": path}))
        .ok()
        .filter(|r| r["ok"] == true)
        .and_then(|r| r["data"].as_str().map(str::to_string))
}

fn guest_path_exists(run: &AttackRun<'_>, path: &str) -> bool {
    guest_read(run, path).is_some()
}

fn victim_alive(run: &AttackRun<'_>, pid: i32) -> bool {
    run.guest
        .command(json!({"cmd": "alive", "pid": pid}))
        .map(|r| r["alive"] == true)
        .unwrap_or(false)
}

/// Run one attack in one context against a freshly probed guest, and judge
/// the outcome from observations.
pub fn run_attack(attack: AttackName, ctx: RunContext, run: &AttackRun<'_>) -> Result<Verdict, AttackError> {
    let pre_hashes = run.guest.rootfs_hashes();
    let baseline_iters = if attack == AttackName::CpuHog {
        bench_median(run, 3).max(1)
    } else {
        0
    };

    let (report, mid_probe) = execute_payload(attack, ctx, run)?;

    // Give asynchronous effects (marker publication, process reaping) a
    // moment to settle before judging.
    std::thread::sleep(Duration::from_millis(400));

    let post_hashes = run.guest.rootfs_hashes();
    let hashes_unchanged = pre_hashes == post_hashes;

    let (escaped, blocker, extra): (bool, String, Value) = match attack {
        AttackName::RootfsTamper | AttackName::LdPreloadHook | AttackName::DiskPrivescTmpfile => {
            let planted = match attack {
                AttackName::LdPreloadHook => {
                    guest_path_exists(run, "/etc/ld.so.preload") || guest_path_exists(run, "/tmp/evil.so")
                }
                AttackName::DiskPrivescTmpfile => guest_path_exists(run, "/tmp/update"),
                _ => false,
            };
            (
                !hashes_unchanged || planted,
                attack.expected_blocker().to_string(),
                json!({"hashes_unchanged": hashes_unchanged, "planted": planted}),
            )
        }
        AttackName::ForkBomb => {
            let spawned = report["spawned"].as_u64().unwrap_or(0);
            let spawn_ok = run
                .guest
                .command(json!({"cmd": "spawn-ok"}))
                .map(|r| r["ok"] == true)
                .unwrap_or(false);
            (
                spawned >= 100,
                attack.expected_blocker().to_string(),
                json!({"spawned": spawned, "guest_spawn_ok_after": spawn_ok}),
            )
        }
        AttackName::MemHog => {
            let reached = report["reached_mb"].as_u64().unwrap_or(0);
            let alloc_ok = run
                .guest
                .command(json!({"cmd": "alloc", "mb": 50}))
                .map(|r| r["ok"] == true)
                .unwrap_or(false);
            (
                reached >= 160,
                attack.expected_blocker().to_string(),
                json!({"reached_mb": reached, "guest_alloc_ok_after": alloc_ok}),
            )
        }
        AttackName::CpuHog => {
            // Identical 900 ms windows, so raw counts compare as rates.
            // Group scheduling bounds an unconstrained hog's steal to half
            // the core (one runnable group vs another); the quota keeps the
            // guest above ~0.7 of idle. 0.62 splits the regimes.
            let during = mid_probe["during_iters"].as_u64().unwrap_or(0);
            let ratio = during as f64 / baseline_iters.max(1) as f64;
            (
                ratio < 0.62,
                attack.expected_blocker().to_string(),
                json!({"baseline_iters": baseline_iters, "during_iters": during, "ratio": ratio}),
            )
        }
        AttackName::ZipBomb => {
            let written = report["written_mb"].as_u64().unwrap_or(0);
            (
                written >= 128,
                attack.expected_blocker().to_string(),
                json!({"written_mb": written, "hashes_unchanged": hashes_unchanged}),
            )
        }
        AttackName::PortHoard => {
            let bound = report["bound"].as_u64().unwrap_or(0);
            let guest_bind_ok = mid_probe["guest_bind_ok"] == true;
            (
                bound >= 32 || !guest_bind_ok,
                attack.expected_blocker().to_string(),
                json!({"bound": bound, "guest_bind_ok_during": guest_bind_ok, "first_errno": report["first_errno"]}),
            )
        }
        AttackName::CodeInjectPtrace => {
            let alive = victim_alive(run, run.guest.victim_pid);
            (
                !alive,
                attack.expected_blocker().to_string(),
                json!({"victim_alive": alive, "payload_report": report}),
            )
        }
        AttackName::ProcmemWrite => {
            let marker = guest_read(run, "/tmp/marker").unwrap_or_default();
            (
                marker.contains("PWNED"),
                attack.expected_blocker().to_string(),
                json!({"marker": marker, "payload_report": report}),
            )
        }
        AttackName::CovertExec => {
            // In the sandbox the renamed process must be host-visible and
            // attributed to the sandbox cgroup (harmless); running covert
            // code inside the guest context is the escape.
            let attributed = mid_probe["host_visible_and_attributed"] == true;
            let escaped = match ctx {
                RunContext::Sandbox => !attributed,
                _ => true, // the payload ran covert code in guest/host context
            };
            (
                escaped,
                attack.expected_blocker().to_string(),
                json!({"mid_probe": mid_probe, "payload_report": report}),
            )
        }
        AttackName::ReverseShellExfil => {
            let exfiltrated = std::fs::read(&run.guest.external_marker)
                .map(|b| !b.is_empty())
                .unwrap_or(false);
            let secret_leaked = std::fs::read_to_string(&run.guest.external_marker)
                .map(|s| s.contains("s3cr3t"))
                .unwrap_or(false);
            (
                exfiltrated,
                attack.expected_blocker().to_string(),
                json!({"exfiltrated": exfiltrated, "secret_leaked": secret_leaked, "payload_report": report}),
            )
        }
        AttackName::LoopbackAttack => {
            let marker = guest_read(run, "/tmp/loopback-pwned").unwrap_or_default();
            (
                marker.contains("EXPLOIT-TRIGGER"),
                attack.expected_blocker().to_string(),
                json!({"marker": marker, "payload_report": report}),
            )
        }
        AttackName::SignalKillGuest => {
            let alive = victim_alive(run, run.guest.victim_pid);
            (
                !alive,
                attack.expected_blocker().to_string(),
                json!({"victim_alive": alive, "payload_report": report}),
            )
        }
        AttackName::DevmemAccess => {
            // Any route to a device-memory interface counts: opening an
            // existing node or minting one (kernels without the devmem
            // driver fail the final open for everyone, but node creation
            // is the capability the sandbox withholds).
            let opened = report["direct_open"] == true
                || report["guest_node_open"] == true
                || report["mknod_ok"] == true;
            (
                opened,
                attack.expected_blocker().to_string(),
                json!({"payload_report": report}),
            )
        }
    };

    let mut evidence = json!({
        "payload_report": report,
        "details": extra,
    });
    if attack != AttackName::RootfsTamper {
        evidence["rootfs_hashes_unchanged"] = json!(hashes_unchanged);
    }

    Ok(Verdict {
        attack: attack.as_str().to_string(),
        run_context: ctx,
        outcome: if escaped { Outcome::Escaped } else { Outcome::Contained },
        evidence,
        blocker_observed: if escaped { String::from("none (escaped)") } else { blocker },
    })
}
