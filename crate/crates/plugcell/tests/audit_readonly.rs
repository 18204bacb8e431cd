//! Syscall-trace audits of the read-only contracts: guest resolution and
//! the collectors never mutate filesystem or process state; the runner
//! writes only under its comm directory. Requires root (ptrace).

use std::path::PathBuf;
use std::process::Command;

use plugcell::audit::mutations_outside;
use plugcell::sandbox::default_bin_dir;

fn root() -> bool {
    unsafe { libc::geteuid() == 0 }
}

#[test]
fn guest_resolution_opens_nothing_for_writing() {
    if !root() {
        eprintln!("skipping: requires root");
        return;
    }
    // `policy print-default` performs a full guest resolution; a scratch
    // sleeper stands in as the guest init.
    let mut sleeper = Command::new("sleep").arg("30").spawn().unwrap();
    let mut cmd = Command::new(default_bin_dir().join("plugcell"));
    cmd.args([
        "policy",
        "print-default",
        "--guest-pid",
        &sleeper.id().to_string(),
        "--guest-rootfs",
        "/",
    ])
    .stdout(std::process::Stdio::null())
    .stderr(std::process::Stdio::inherit());
    let (code, muts) = mutations_outside(cmd, &[]).unwrap();
    let _ = sleeper.kill();
    let _ = sleeper.wait();
    assert_eq!(code, 0);
    assert!(muts.is_empty(), "resolution mutated state: {muts:?}");
}

#[test]
fn collectors_issue_no_mutating_operations() {
    if !root() {
        eprintln!("skipping: requires root");
        return;
    }
    let bin = default_bin_dir();
    for collector in ["collect-os", "collect-processes", "collect-open-files", "collect-connections", "collect-metrics"] {
        let mut cmd = Command::new(bin.join(collector));
        cmd.env("PLUGCELL_GUEST_ROOT", "/")
            .env("PLUGCELL_GUEST_CGROUP", "/sys/fs/cgroup")
            .stdout(std::process::Stdio::null())
            .stderr(std::process::Stdio::null());
        let (_, muts) = mutations_outside(cmd, &[]).unwrap();
        assert!(muts.is_empty(), "{collector} mutated state: {muts:?}");
    }
}

#[test]
fn runner_writes_land_only_under_its_comm_dir() {
    if !root() {
        eprintln!("skipping: requires root");
        return;
    }
    let comm = tempfile::tempdir().unwrap();
    plugcell::comm::CommChannel::create(comm.path(), unsafe { libc::getuid() }).unwrap();
    let host = plugcell::comm::CommChannel::open(comm.path());
    host.write_manifest("").unwrap();
    host.send_control(plugcell::comm::ControlVerb::Stop).unwrap();

    let stage = tempfile::tempdir().unwrap();
    let mut cmd = Command::new(default_bin_dir().join("plugcell-runner"));
    cmd.env("PLUGCELL_COMM", comm.path())
        .env("PLUGCELL_STAGE", stage.path())
        .env("PLUGCELL_STORE", default_bin_dir())
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::null());
    let allowed = vec![comm.path().to_path_buf(), stage.path().to_path_buf(), PathBuf::from("/dev/null")];
    let (code, muts) = mutations_outside(cmd, &allowed).unwrap();
    assert_eq!(code, 0);
    assert!(muts.is_empty(), "runner wrote outside comm/stage: {muts:?}");
}
