//! End-to-end sandbox construction against live fixture guests: namespace
//! joins, de-privileging, capability sets, read-only views, seccomp and
//! firewall denials, teardown hygiene and build rollback. Requires root.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Duration;

use serde_json::Value;

use plugcell::harness::fixture::FixtureGuest;
use plugcell::harness::snapshot;
use plugcell::policy::{default_policy, MountSpec, PolicyOptions};
use plugcell::sandbox::{self, exec_runner, open_comm_channel, teardown, SandboxConfig, SandboxState};

// Shared-host side effects (cgroups, mounts, nft) make parallel sandbox
// tests unsound; serialize the file.
static HOST: Mutex<()> = Mutex::new(());

fn root() -> bool {
    unsafe { libc::geteuid() == 0 }
}

fn test_base(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("plugcell-it-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn bin_dir() -> PathBuf {
    sandbox::default_bin_dir()
}

/// Run the probe as the sandbox's runner image and return its JSON report.
fn probe_in_sandbox(
    guest: &FixtureGuest,
    opts: &PolicyOptions,
    config: &SandboxConfig,
    extra_args: &[&str],
) -> (Value, sandbox::TeardownReport) {
    let target = guest.resolve().expect("resolve fixture guest");
    let policy = default_policy(&target, opts).expect("policy");
    let mut handle = sandbox::create_sandbox(&target, &policy, config).expect("create sandbox");
    assert_eq!(handle.state, SandboxState::Ready);
    let comm_dir = handle.comm_dir.clone();

    let mut argv: Vec<String> = vec![
        "report".into(),
        "--out".into(),
        "/comm/probe.json".into(),
        "--target-pid".into(),
        guest.sleeper_pid.to_string(),
    ];
    argv.extend(extra_args.iter().map(|s| s.to_string()));
    exec_runner(
        &mut handle,
        &format!("{}/plugcell-probe", sandbox::SANDBOX_BIN),
        &argv,
        &BTreeMap::new(),
    )
    .expect("exec probe");

    let deadline = std::time::Instant::now() + Duration::from_secs(20);
    while handle.runner_alive() && std::time::Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(25));
    }
    let report: Value = std::fs::read(comm_dir.join("probe.json"))
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok())
        .unwrap_or(Value::Null);
    let td = teardown(&mut handle);
    (report, td)
}

#[test]
fn default_sandbox_grants_reads_and_denies_everything_else() {
    if !root() {
        eprintln!("skipping: requires root");
        return;
    }
    let _g = HOST.lock().unwrap();
    let base = test_base("grants");
    let mut guest = FixtureGuest::create("grants", &base, &bin_dir()).unwrap();

    let config = SandboxConfig {
        bin_dir: bin_dir(),
        base_dir: base.clone(),
        ablation: None,
    };
    let (report, _td) = probe_in_sandbox(&guest, &PolicyOptions::default(), &config, &[]);
    assert!(!report.is_null(), "probe produced no report");

    // De-privileged to the mapped host uid.
    assert_eq!(report["uid"], 62000, "{report}");
    assert_eq!(report["euid"], 62000);

    // Capability sets are exactly the policy's three grants:
    // dac_read_search (bit 2) + sys_chroot (18) + sys_ptrace (19).
    let expected_mask = format!("{:016x}", (1u64 << 2) | (1u64 << 18) | (1u64 << 19));
    assert_eq!(report["cap_eff"].as_str().unwrap().to_lowercase(), expected_mask, "{report}");
    assert_eq!(report["cap_bnd"].as_str().unwrap().to_lowercase(), expected_mask);
    assert_eq!(report["cap_amb"].as_str().unwrap().to_lowercase(), expected_mask);

    // Shared pid namespace: guest pids visible, including pid 1 (the guest
    // init) and the fixture sleeper.
    let pids: Vec<i64> = report["pids"]
        .as_array()
        .unwrap()
        .iter()
        .filter_map(|v| v.as_i64())
        .collect();
    assert!(pids.contains(&1), "guest init not visible: {pids:?}");
    assert!(pids.contains(&(guest.sleeper_pid as i64)), "sleeper not visible");

    // Read visibility incl. the DAC bypass for a 0600 root-owned secret.
    assert!(report["etc_entries"].as_u64().unwrap() >= 4);
    assert!(report["secret_read_len"].as_u64().unwrap() > 0, "dac_read_search read failed");

    // Write denial on the guest rootfs.
    assert_eq!(report["write_errno"], libc::EROFS, "{report}");
    assert_eq!(report["unlink_errno"], libc::EROFS);

    // The step-5 blend: ptrace and process_vm_writev fail with EPERM from
    // seccomp; plain bind too.
    assert_eq!(report["ptrace_errno"], libc::EPERM);
    assert_eq!(report["process_vm_writev_errno"], libc::EPERM);
    assert_eq!(report["bind_errno"], libc::EPERM);

    // Signals to guest processes denied by uid separation.
    assert_eq!(report["kill_errno"], libc::EPERM);

    // No global memory interface.
    assert_eq!(report["devmem_errno"], libc::ENOENT);
    assert_ne!(report["guest_devmem_errno"], 0);

    // All egress dropped, loopback included (drop = connect timeout, not
    // refusal).
    assert_eq!(report["connect_loopback"], "timeout", "{report}");
    assert_eq!(report["connect_backend"], "timeout");
    assert_eq!(report["connect_external"], "timeout");

    // Private UTS namespace carries the sandbox id, not the guest hostname.
    assert!(report["hostname"].as_str().unwrap().starts_with("sb"));

    guest.teardown().unwrap();
    let _ = std::fs::remove_dir_all(&base);
}

#[test]
fn backend_exception_and_open_files_work_inside_sandbox() {
    if !root() {
        eprintln!("skipping: requires root");
        return;
    }
    let _g = HOST.lock().unwrap();
    let base = test_base("backend");
    let mut guest = FixtureGuest::create("backend", &base, &bin_dir()).unwrap();

    // A "backend" listening inside the guest netns on the conventional
    // backend loopback address.
    let ns = guest.netns_path();
    plugcell::sandbox::nft::with_netns(&ns, || {
        let l = std::net::TcpListener::bind("127.99.0.1:4433")?;
        std::mem::forget(l);
        Ok(())
    })
    .unwrap();

    let opts = PolicyOptions {
        backend_endpoint: Some("127.99.0.1:4433".parse().unwrap()),
        ..Default::default()
    };
    let config = SandboxConfig {
        bin_dir: bin_dir(),
        base_dir: base.clone(),
        ablation: None,
    };
    let (report, _) = probe_in_sandbox(&guest, &opts, &config, &[]);
    assert_eq!(report["connect_backend"], "connected", "{report}");
    assert_eq!(report["connect_external"], "timeout");
    assert_eq!(report["connect_loopback"], "timeout");

    guest.teardown().unwrap();
    let _ = std::fs::remove_dir_all(&base);
}

#[test]
fn private_pid_namespace_hides_the_guest() {
    if !root() {
        eprintln!("skipping: requires root");
        return;
    }
    let _g = HOST.lock().unwrap();
    let base = test_base("pidpriv");
    let mut guest = FixtureGuest::create("pidpriv", &base, &bin_dir()).unwrap();

    let opts = PolicyOptions {
        pid_private: true,
        ..Default::default()
    };
    let config = SandboxConfig {
        bin_dir: bin_dir(),
        base_dir: base.clone(),
        ablation: None,
    };
    let (report, _) = probe_in_sandbox(&guest, &opts, &config, &[]);
    let pids: Vec<i64> = report["pids"]
        .as_array()
        .unwrap()
        .iter()
        .filter_map(|v| v.as_i64())
        .collect();
    assert_eq!(pids, vec![1], "private pid ns must only contain the probe: {pids:?}");

    guest.teardown().unwrap();
    let _ = std::fs::remove_dir_all(&base);
}

#[test]
fn guest_traffic_is_untouched_while_sandbox_is_blocked() {
    if !root() {
        eprintln!("skipping: requires root");
        return;
    }
    let _g = HOST.lock().unwrap();
    let base = test_base("neutral");
    let mut guest = FixtureGuest::create("neutral", &base, &bin_dir()).unwrap();

    let target = guest.resolve().unwrap();
    let policy = default_policy(&target, &PolicyOptions::default()).unwrap();
    let config = SandboxConfig {
        bin_dir: bin_dir(),
        base_dir: base.clone(),
        ablation: None,
    };
    let mut handle = sandbox::create_sandbox(&target, &policy, &config).unwrap();

    // With the sandbox's drop rules installed, the guest can still reach
    // its own loopback service.
    let reply = guest
        .run_in_guest(&["spin", "--ms", "1"], 5_000)
        .expect("guest exec");
    assert_eq!(reply["code"], 0, "{reply}");
    let read = guest
        .command(serde_json::json!({"cmd": "bind", "port": 9011}))
        .unwrap();
    assert_eq!(read["ok"], true, "guest bind must succeed: {read}");

    let td = teardown(&mut handle);
    assert!(td.actions.iter().any(|a| a.resource == "firewall"));
    guest.teardown().unwrap();
    let _ = std::fs::remove_dir_all(&base);
}

#[test]
fn comm_channel_flows_and_guest_cannot_see_it() {
    if !root() {
        eprintln!("skipping: requires root");
        return;
    }
    let _g = HOST.lock().unwrap();
    let base = test_base("comm");
    let mut guest = FixtureGuest::create("comm", &base, &bin_dir()).unwrap();

    let target = guest.resolve().unwrap();
    let policy = default_policy(&target, &PolicyOptions::default()).unwrap();
    let config = SandboxConfig {
        bin_dir: bin_dir(),
        base_dir: base.clone(),
        ablation: None,
    };
    let mut handle = sandbox::create_sandbox(&target, &policy, &config).unwrap();
    let comm = open_comm_channel(&handle).unwrap();
    comm.write_manifest("# empty\n").unwrap();

    // The comm dir lives in the sandbox's private mount ns; the guest's
    // view has no such path.
    let guest_view = guest
        .command(serde_json::json!({"cmd": "read", "path": "/comm/plugins-to-run"}))
        .unwrap();
    assert_eq!(guest_view["ok"], false, "guest must not see the comm dir: {guest_view}");

    // Host writes control files, sandbox writes output: exec a probe that
    // writes into /comm and read it host-side.
    exec_runner(
        &mut handle,
        &format!("{}/plugcell-probe", sandbox::SANDBOX_BIN),
        &["report".into(), "--out".into(), "/comm/probe.json".into()],
        &BTreeMap::new(),
    )
    .unwrap();
    let deadline = std::time::Instant::now() + Duration::from_secs(15);
    while handle.runner_alive() && std::time::Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(20));
    }
    assert!(handle.comm_dir.join("probe.json").exists());

    let td = teardown(&mut handle);
    assert!(!td.nothing_to_do);
    let td2 = teardown(&mut handle);
    assert!(td2.nothing_to_do, "second teardown must be a no-op");

    guest.teardown().unwrap();
    let _ = std::fs::remove_dir_all(&base);
}

#[test]
fn rollback_and_teardown_leave_no_host_residue() {
    if !root() {
        eprintln!("skipping: requires root");
        return;
    }
    let _g = HOST.lock().unwrap();
    plugcell::sandbox::cgroup::ensure_host_ready().unwrap();
    let base = test_base("residue");
    let mut guest = FixtureGuest::create("residue", &base, &bin_dir()).unwrap();
    let target = guest.resolve().unwrap();
    let config = SandboxConfig {
        bin_dir: bin_dir(),
        base_dir: base.clone(),
        ablation: None,
    };

    let pre = snapshot::capture().unwrap();

    // Normal build + teardown.
    let policy = default_policy(&target, &PolicyOptions::default()).unwrap();
    let mut handle = sandbox::create_sandbox(&target, &policy, &config).unwrap();
    let _ = teardown(&mut handle);

    // Forced build failure: a policy mount whose source does not exist
    // fails the mounts step after namespaces/cgroups are already in place.
    let opts = PolicyOptions {
        extra_mounts: vec![MountSpec::read_only("/nonexistent-plugcell-src", "/extra")],
        ..Default::default()
    };
    let bad_policy = default_policy(&target, &opts).unwrap();
    match sandbox::create_sandbox(&target, &bad_policy, &config) {
        Err(sandbox::BuildError::Failed { step, .. }) => assert_eq!(step, "mounts"),
        Err(other) => panic!("expected mounts failure, got {other}"),
        Ok(_) => panic!("expected mounts failure, build succeeded"),
    }

    // Guest death before build → GuestGone, nothing left behind.
    let mut dead = target.clone();
    dead.init_start_time += 1;
    match sandbox::create_sandbox(&dead, &policy, &config) {
        Err(sandbox::BuildError::GuestGone) => {}
        Err(other) => panic!("expected GuestGone, got {other}"),
        Ok(_) => panic!("expected GuestGone, build succeeded"),
    }

    let post = snapshot::capture().unwrap();
    let diffs = pre.diff(&post);
    assert!(diffs.is_empty(), "host state changed: {diffs:#?}");

    guest.teardown().unwrap();
    let _ = std::fs::remove_dir_all(&base);
}
