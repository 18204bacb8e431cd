//! The in-sandbox supervisor: parse the manifest, fetch plugins while the
//! fetch window is open, then run collection cycles at the configured
//! frequency, writing validated records to the comm channel.
//!
//! Plugins are standalone executables speaking a stdout contract: argv is
//! `[exe, --args-json <json>]`, stdout is NDJSON collection records, exit 0
//! means success. A plugin failure becomes an error record; it never aborts
//! a cycle or the runner.

mod fetch;
pub mod proxy;

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::Duration;

use sha2::{Digest, Sha256};

use crate::clock::Clock;
use crate::collectors::GuestView;
use crate::comm::{ControlVerb, RunnerComm, StagedDigest, StatusEvent};
use crate::manifest::{PluginEntry, PluginManifest, PluginSource};
use crate::record::{validate_line, CollectionRecord};

pub use fetch::http_get;

/// Filesystem-root switch for one action, in a short-lived child so the
/// caller never stays chrooted. Needs CAP_SYS_CHROOT. The closure's output
/// bytes come back over a pipe.
pub fn enter_guest_root<F: FnOnce() -> Vec<u8>>(root: &Path, action: F) -> io::Result<Vec<u8>> {
    if !root.is_dir() {
        return Err(io::Error::new(
            io::ErrorKind::NotFound,
            format!("chroot target {} missing", root.display()),
        ));
    }
    let mut fds = [0i32; 2];
    if unsafe { libc::pipe2(fds.as_mut_ptr(), libc::O_CLOEXEC) } != 0 {
        return Err(io::Error::last_os_error());
    }
    let (read_fd, write_fd) = (fds[0], fds[1]);
    let pid = unsafe { libc::fork() };
    if pid < 0 {
        unsafe {
            libc::close(read_fd);
            libc::close(write_fd);
        }
        return Err(io::Error::last_os_error());
    }
    if pid == 0 {
        unsafe { libc::close(read_fd) };
        let c_root = std::ffi::CString::new(root.as_os_str().as_encoded_bytes()).unwrap();
        let rc = unsafe { libc::chroot(c_root.as_ptr()) };
        if rc != 0 || std::env::set_current_dir("/").is_err() {
            unsafe { libc::_exit(111) }; // chroot failed
        }
        let out = action();
        let mut off = 0;
        while off < out.len() {
            let n = unsafe {
                libc::write(
                    write_fd,
                    out[off..].as_ptr() as *const libc::c_void,
                    out.len() - off,
                )
            };
            if n <= 0 {
                break;
            }
            off += n as usize;
        }
        unsafe { libc::_exit(0) };
    }
    unsafe { libc::close(write_fd) };
    let mut out = Vec::new();
    let mut buf = [0u8; 4096];
    loop {
        let n = unsafe { libc::read(read_fd, buf.as_mut_ptr() as *mut libc::c_void, buf.len()) };
        if n <= 0 {
            break;
        }
        out.extend_from_slice(&buf[..n as usize]);
    }
    unsafe { libc::close(read_fd) };
    let mut status = 0;
    unsafe { libc::waitpid(pid, &mut status, 0) };
    if libc::WIFEXITED(status) && libc::WEXITSTATUS(status) == 111 {
        return Err(io::Error::new(io::ErrorKind::PermissionDenied, "chroot failed"));
    }
    Ok(out)
}

/// A fetched plugin, staged read-only with its digest recorded before any
/// execution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagedPlugin {
    pub name: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, thiserror::Error)]
pub enum FetchError {
    #[error("fetch failed for `{name}`: {cause}")]
    Failed { name: String, cause: String },
    #[error("digest mismatch for `{name}`: expected {expected}, got {got}")]
    DigestMismatch {
        name: String,
        expected: String,
        got: String,
    },
}

/// Resolve every manifest entry into an executable with a recorded digest.
/// URL entries are fetched over the fetch-window exception and written to
/// the staging area (read-only after the window closes). Store entries
/// already live on a read-only mount inside the sandbox and run in place —
/// same immutability guarantee, no copy through the size-capped tmpfs.
pub fn fetch_plugins(
    manifest: &PluginManifest,
    store_dir: &Path,
    stage_dir: &Path,
) -> Result<Vec<StagedPlugin>, FetchError> {
    let mut staged = Vec::new();
    for entry in &manifest.entries {
        let (bytes, path) = match &entry.source {
            PluginSource::Store(id) => {
                let path = store_dir.join(id);
                let bytes = fs::read(&path).map_err(|e| FetchError::Failed {
                    name: entry.name.clone(),
                    cause: format!("store {}: {e}", path.display()),
                })?;
                (bytes, path)
            }
            PluginSource::Url(url) => {
                let bytes = http_get(url, Duration::from_secs(5)).map_err(|e| FetchError::Failed {
                    name: entry.name.clone(),
                    cause: format!("{url}: {e}"),
                })?;
                let path = stage_dir.join(&entry.name);
                fs::write(&path, &bytes).map_err(|e| FetchError::Failed {
                    name: entry.name.clone(),
                    cause: format!("stage: {e}"),
                })?;
                use std::os::unix::fs::PermissionsExt;
                let _ = fs::set_permissions(&path, fs::Permissions::from_mode(0o755));
                (bytes, path)
            }
        };
        let digest = hex::encode(Sha256::digest(&bytes));
        if let Some(expected) = &entry.pinned_digest {
            if !expected.eq_ignore_ascii_case(&digest) {
                if matches!(entry.source, PluginSource::Url(_)) {
                    let _ = fs::remove_file(&path);
                }
                return Err(FetchError::DigestMismatch {
                    name: entry.name.clone(),
                    expected: expected.clone(),
                    got: digest,
                });
            }
        }
        staged.push(StagedPlugin {
            name: entry.name.clone(),
            path,
            sha256: digest,
        });
    }
    Ok(staged)
}

/// Cap on captured plugin stdout per execution.
const MAX_PLUGIN_OUTPUT: usize = 4 << 20;

fn plugin_env(view: &GuestView, cycle: u64) -> Vec<(String, String)> {
    vec![
        ("PLUGCELL_NAMESPACE_LABEL".into(), view.namespace_label.clone()),
        ("PLUGCELL_GUEST_ROOT".into(), view.guest_root.display().to_string()),
        ("PLUGCELL_GUEST_CGROUP".into(), view.guest_cgroup.display().to_string()),
        ("PLUGCELL_PROC".into(), view.proc_root.display().to_string()),
        ("PLUGCELL_CYCLE".into(), cycle.to_string()),
    ]
}

/// Execute one plugin once with a wall-clock timeout; translate its stdout
/// into records. Failures (timeout, bad exit, malformed output) yield error
/// records tagged with the plugin name.
fn run_plugin(
    plugin: &StagedPlugin,
    entry: &PluginEntry,
    view: &GuestView,
    cycle: u64,
    clock: &dyn Clock,
) -> Vec<CollectionRecord> {
    let now = clock.now_ms() as i64;
    let args_json = serde_json::to_string(&entry.args).unwrap_or_else(|_| "{}".into());
    let mut cmd = Command::new(&plugin.path);
    cmd.arg("--args-json")
        .arg(args_json)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit());
    for (k, v) in plugin_env(view, cycle) {
        cmd.env(k, v);
    }
    // Own process group so a timeout kill reaps the plugin's whole subtree,
    // not just its leader.
    unsafe {
        use std::os::unix::process::CommandExt;
        cmd.pre_exec(|| {
            libc::setpgid(0, 0);
            Ok(())
        });
    }
    let mut child = match cmd.spawn() {
        Ok(c) => c,
        Err(e) => {
            return vec![CollectionRecord::error(
                &view.namespace_label,
                &entry.name,
                now,
                cycle,
                &format!("spawn:{e}"),
            )]
        }
    };

    let pid = child.id() as i32;
    let stdout = child.stdout.take();
    let (out_tx, out_rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let mut buf = Vec::new();
        if let Some(mut out) = stdout {
            let mut chunk = [0u8; 8192];
            while buf.len() < MAX_PLUGIN_OUTPUT {
                match out.read(&mut chunk) {
                    Ok(0) | Err(_) => break,
                    Ok(n) => buf.extend_from_slice(&chunk[..n]),
                }
            }
        }
        let _ = out_tx.send(buf);
    });

    let timeout_ms = (entry.timeout_s() * 1000.0) as u64;
    let deadline = clock.now_ms() + timeout_ms;
    let mut timed_out = false;
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break Some(status),
            Ok(None) => {
                if clock.now_ms() >= deadline {
                    unsafe { libc::kill(-pid, libc::SIGKILL) };
                    let _ = child.wait();
                    timed_out = true;
                    break None;
                }
                // Real wait on a real subprocess; only the deadline is
                // clock-driven (so a fake clock controls timeouts without
                // stalling child reaping).
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(_) => break None,
        }
    };
    let output = out_rx.recv_timeout(Duration::from_secs(2)).unwrap_or_default();
    let finished = clock.now_ms() as i64;

    if timed_out {
        return vec![CollectionRecord::error(
            &view.namespace_label,
            &entry.name,
            finished,
            cycle,
            "timeout",
        )];
    }
    let exit_ok = status.map(|s| s.success()).unwrap_or(false);
    let mut records = Vec::new();
    for line in output.split(|b| *b == b'\n') {
        if line.iter().all(|b| b.is_ascii_whitespace()) {
            continue;
        }
        match validate_line(line) {
            Ok(mut rec) => {
                rec.namespace_label = view.namespace_label.clone();
                rec.cycle = cycle;
                records.push(rec);
            }
            Err(_) => {
                records.push(CollectionRecord::error(
                    &view.namespace_label,
                    &entry.name,
                    finished,
                    cycle,
                    "format",
                ));
            }
        }
    }
    if !exit_ok {
        records.push(CollectionRecord::error(
            &view.namespace_label,
            &entry.name,
            finished,
            cycle,
            &format!(
                "exit_{}",
                status.and_then(|s| s.code()).unwrap_or(-1)
            ),
        ));
    }
    records
}

/// Run every listed plugin once (one cycle), bounded by `fan_out`
/// concurrent children.
pub fn run_cycle(
    plugins: &[(StagedPlugin, PluginEntry)],
    view: &GuestView,
    cycle: u64,
    clock: &dyn Clock,
    fan_out: usize,
) -> Vec<CollectionRecord> {
    let fan_out = fan_out.max(1);
    let mut records = Vec::new();
    for batch in plugins.chunks(fan_out) {
        if batch.len() == 1 {
            records.extend(run_plugin(&batch[0].0, &batch[0].1, view, cycle, clock));
            continue;
        }
        let outs: Vec<Vec<CollectionRecord>> = std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .iter()
                .map(|(p, e)| scope.spawn(move || run_plugin(p, e, view, cycle, clock)))
                .collect();
            handles.into_iter().map(|h| h.join().unwrap_or_default()).collect()
        });
        for out in outs {
            records.extend(out);
        }
    }
    records
}

/// Outcome of the scheduling loop.
#[derive(Debug, Default, Clone)]
pub struct LoopStats {
    pub batches: u64,
    pub records: u64,
    pub executions: BTreeMap<String, u64>,
}

/// Drive plugins at their configured frequencies until a `stop` control
/// verb arrives. `run-once` triggers an immediate extra cycle for every
/// plugin. A cycle in flight always completes before the loop exits.
pub fn schedule_loop(
    plugins: &[(StagedPlugin, PluginEntry)],
    view: &GuestView,
    comm: &mut RunnerComm,
    clock: Arc<dyn Clock>,
    fan_out: usize,
) -> LoopStats {
    let mut stats = LoopStats::default();
    let start = clock.now_ms();
    let mut next_due: Vec<u64> = plugins.iter().map(|_| start).collect();
    let mut counts: Vec<u64> = vec![0; plugins.len()];

    loop {
        let verbs = comm.poll_control().unwrap_or_default();
        let mut stop = false;
        let mut run_all_now = false;
        for v in verbs {
            match v {
                ControlVerb::Stop => stop = true,
                ControlVerb::RunOnce => run_all_now = true,
            }
        }

        let now = clock.now_ms();
        // A stop lets an explicitly requested run-once batch finish, but
        // does not start newly scheduled cycles.
        let due: Vec<usize> = (0..plugins.len())
            .filter(|i| run_all_now || (!stop && next_due[*i] <= now))
            .collect();
        if !due.is_empty() {
            let mut batch_records = 0u64;
            for idx in &due {
                let (p, e) = &plugins[*idx];
                let recs = run_plugin(p, e, view, counts[*idx], clock.as_ref());
                counts[*idx] += 1;
                *stats.executions.entry(e.name.clone()).or_insert(0) += 1;
                for rec in recs {
                    if comm.append_output(&rec.to_line()).is_ok() {
                        batch_records += 1;
                    }
                }
                if !run_all_now {
                    // Drift-free: advance from the scheduled time.
                    while next_due[*idx] <= now {
                        next_due[*idx] += (e.freq_s * 1000.0) as u64;
                    }
                }
            }
            let _ = fan_out; // per-plugin output ordering is simplest serialized
            stats.batches += 1;
            stats.records += batch_records;
            let _ = comm.post_status(&StatusEvent::CycleComplete {
                cycle: stats.batches,
                records: batch_records,
            });
        }

        if stop {
            let _ = comm.post_status(&StatusEvent::Stopped { cycles: stats.batches });
            return stats;
        }

        let now = clock.now_ms();
        let soonest = next_due.iter().copied().min().unwrap_or(now + 100);
        let wait = soonest.saturating_sub(now).clamp(10, 200);
        clock.sleep(Duration::from_millis(wait));
    }
}

/// Entry point for the `plugcell-runner` executable inside the sandbox.
pub fn runner_main() -> i32 {
    let comm_dir = std::env::var("PLUGCELL_COMM").unwrap_or_else(|_| crate::comm::COMM_MOUNT.into());
    let mut comm = RunnerComm::open(&comm_dir);
    let view = GuestView::from_env();
    let store_dir = PathBuf::from(
        std::env::var("PLUGCELL_STORE").unwrap_or_else(|_| crate::sandbox::SANDBOX_BIN.into()),
    );
    let stage_dir = PathBuf::from(
        std::env::var("PLUGCELL_STAGE").unwrap_or_else(|_| "/plugins".into()),
    );
    let fan_out: usize = std::env::var("PLUGCELL_FAN_OUT")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(4);

    // The GET-only proxy thread, when the builder pre-bound its listener.
    let proxy_tid = std::env::var("PLUGCELL_PROXY_FD")
        .ok()
        .and_then(|v| v.parse::<i32>().ok())
        .map(|fd| {
            let (tx, rx) = std::sync::mpsc::channel();
            std::thread::spawn(move || {
                let tid = unsafe { libc::syscall(libc::SYS_gettid) } as i32;
                let _ = tx.send(tid);
                proxy::serve_from_fd(fd);
            });
            rx.recv_timeout(Duration::from_secs(5)).unwrap_or(0)
        });

    let _ = comm.post_status(&StatusEvent::Started {
        pid: std::process::id() as i32,
        proxy_tid,
    });

    let manifest_bytes = comm.read_manifest().unwrap_or_default();
    let manifest = match crate::manifest::parse_manifest(&manifest_bytes) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("manifest rejected: {e}");
            let _ = comm.post_status(&StatusEvent::FetchFailed {
                plugin: "<manifest>".into(),
                cause: e.to_string(),
            });
            return 2;
        }
    };

    // Fetch before the network block activates; per-plugin failures are
    // reported and skipped so one dead source cannot stall monitoring.
    let mut staged_pairs: Vec<(StagedPlugin, PluginEntry)> = Vec::new();
    let mut digests = Vec::new();
    for entry in &manifest.entries {
        let single = PluginManifest {
            entries: vec![entry.clone()],
        };
        match fetch_plugins(&single, &store_dir, &stage_dir) {
            Ok(mut staged) => {
                let s = staged.remove(0);
                digests.push(StagedDigest {
                    name: s.name.clone(),
                    sha256: s.sha256.clone(),
                });
                staged_pairs.push((s, entry.clone()));
            }
            Err(e) => {
                eprintln!("fetch: {e}");
                let _ = comm.post_status(&StatusEvent::FetchFailed {
                    plugin: entry.name.clone(),
                    cause: e.to_string(),
                });
            }
        }
    }
    // Signal the host that the fetch window may close, then hold until the
    // lock-down is observable (the host remounts the staging area
    // read-only when it revokes the firewall exception). Collection cycles
    // must never overlap the open window.
    let _ = comm.post_status(&StatusEvent::FetchComplete { staged: digests });
    let lockdown_deadline = std::time::Instant::now() + Duration::from_secs(90);
    while std::time::Instant::now() < lockdown_deadline {
        let probe = stage_dir.join(".window");
        match fs::write(&probe, b"") {
            Err(e) if e.raw_os_error() == Some(libc::EROFS) => break,
            Err(_) => break, // no staging mount at all: nothing was open
            Ok(()) => {
                let _ = fs::remove_file(&probe);
                std::thread::sleep(Duration::from_millis(20));
            }
        }
    }

    let clock: Arc<dyn Clock> = Arc::new(crate::clock::SystemClock);
    schedule_loop(&staged_pairs, &view, &mut comm, clock, fan_out);
    0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::FakeClock;
    use crate::comm::CommChannel;
    use crate::manifest::parse_manifest;

    fn fake_plugin(dir: &Path, name: &str, body: &str) -> PathBuf {
        let path = dir.join(name);
        fs::write(&path, format!("#!/bin/sh\n{body}\n")).unwrap();
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(&path, fs::Permissions::from_mode(0o755)).unwrap();
        path
    }

    fn view() -> GuestView {
        GuestView {
            guest_root: PathBuf::from("/"),
            guest_cgroup: PathBuf::from("/sys/fs/cgroup"),
            proc_root: PathBuf::from("/proc"),
            namespace_label: "t".into(),
            cycle: 0,
        }
    }

    #[test]
    fn store_fetch_stages_with_digest() {
        let store = tempfile::tempdir().unwrap();
        let stage = tempfile::tempdir().unwrap();
        fs::write(store.path().join("p1"), b"#!/bin/sh\necho hi\n").unwrap();
        let m = parse_manifest(br#"{"name":"p1","source":"store:p1","freq_s":1}"#).unwrap();
        let staged = fetch_plugins(&m, store.path(), stage.path()).unwrap();
        assert_eq!(staged.len(), 1);
        assert_eq!(staged[0].sha256.len(), 64);
        assert!(staged[0].path.exists());
    }

    #[test]
    fn pinned_digest_mismatch_refuses_to_stage() {
        let store = tempfile::tempdir().unwrap();
        let stage = tempfile::tempdir().unwrap();
        fs::write(store.path().join("p1"), b"payload").unwrap();
        let m = parse_manifest(
            br#"{"name":"p1","source":"store:p1","freq_s":1,"digest":"deadbeef"}"#,
        )
        .unwrap();
        match fetch_plugins(&m, store.path(), stage.path()) {
            Err(FetchError::DigestMismatch { name, .. }) => assert_eq!(name, "p1"),
            other => panic!("{other:?}"),
        }
        assert!(!stage.path().join("p1").exists());
    }

    #[test]
    fn missing_store_entry_is_fetch_failed() {
        let store = tempfile::tempdir().unwrap();
        let stage = tempfile::tempdir().unwrap();
        let m = parse_manifest(br#"{"name":"gone","source":"store:gone","freq_s":1}"#).unwrap();
        assert!(matches!(
            fetch_plugins(&m, store.path(), stage.path()),
            Err(FetchError::Failed { name, .. }) if name == "gone"
        ));
    }

    #[test]
    fn plugin_records_flow_and_failures_become_error_records() {
        let dir = tempfile::tempdir().unwrap();
        let good = fake_plugin(
            dir.path(),
            "good",
            r#"echo '{"namespace_label":"x","feature_type":"os","feature_key":"os","timestamp":"2024-01-01T00:00:00Z","cycle":9,"payload":{}}'"#,
        );
        let bad = fake_plugin(dir.path(), "bad", "echo not-json; exit 3");
        let m = parse_manifest(
            br#"{"name":"good","source":"store:good","freq_s":1}
{"name":"bad","source":"store:bad","freq_s":1}"#,
        )
        .unwrap();
        let plugins = vec![
            (
                StagedPlugin {
                    name: "good".into(),
                    path: good,
                    sha256: String::new(),
                },
                m.entries[0].clone(),
            ),
            (
                StagedPlugin {
                    name: "bad".into(),
                    path: bad,
                    sha256: String::new(),
                },
                m.entries[1].clone(),
            ),
        ];
        let clock = crate::clock::SystemClock;
        let records = run_cycle(&plugins, &view(), 7, &clock, 2);
        // good: 1 record rewritten to our label/cycle
        let good_rec = records
            .iter()
            .find(|r| r.feature_type == crate::record::FeatureType::Os)
            .unwrap();
        assert_eq!(good_rec.cycle, 7);
        assert_eq!(good_rec.namespace_label, "t");
        // bad: format error + exit error
        let errors: Vec<_> = records
            .iter()
            .filter(|r| r.feature_type == crate::record::FeatureType::Error)
            .collect();
        assert!(errors.iter().any(|r| r.payload["reason"] == "format"));
        assert!(errors.iter().any(|r| r.payload["reason"] == "exit_3"));
    }

    #[test]
    fn hung_plugin_is_killed_within_timeout() {
        let dir = tempfile::tempdir().unwrap();
        let hang = fake_plugin(dir.path(), "hang", "sleep 3600");
        let m = parse_manifest(
            br#"{"name":"hang","source":"store:hang","freq_s":1,"args":{"timeout_s":0.3}}"#,
        )
        .unwrap();
        let plugins = vec![(
            StagedPlugin {
                name: "hang".into(),
                path: hang,
                sha256: String::new(),
            },
            m.entries[0].clone(),
        )];
        let clock = crate::clock::SystemClock;
        let t0 = std::time::Instant::now();
        let records = run_cycle(&plugins, &view(), 0, &clock, 1);
        assert!(t0.elapsed() < Duration::from_millis(1300), "kill exceeded timeout+1s");
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].payload["reason"], "timeout");
    }

    #[test]
    fn crashing_plugin_never_crashes_the_runner() {
        let dir = tempfile::tempdir().unwrap();
        let crasher = fake_plugin(dir.path(), "crasher", "kill -ABRT $$");
        let m = parse_manifest(br#"{"name":"crasher","source":"store:c","freq_s":1}"#).unwrap();
        let plugins = vec![(
            StagedPlugin {
                name: "crasher".into(),
                path: crasher,
                sha256: String::new(),
            },
            m.entries[0].clone(),
        )];
        let clock = crate::clock::SystemClock;
        for i in 0..100 {
            let records = run_cycle(&plugins, &view(), i, &clock, 1);
            assert_eq!(records.len(), 1, "iteration {i}");
            assert_eq!(records[0].feature_type, crate::record::FeatureType::Error);
        }
    }

    #[test]
    fn fake_clock_schedule_is_exact() {
        // freq 1s over 5s → exactly 5 executions; freqs 1s+3s over 6s → 6 and 2.
        let dir = tempfile::tempdir().unwrap();
        let quick = fake_plugin(dir.path(), "quick", "exit 0");
        let m = parse_manifest(
            br#"{"name":"fast","source":"store:q","freq_s":1}
{"name":"slow","source":"store:q","freq_s":3}"#,
        )
        .unwrap();
        let plugins: Vec<(StagedPlugin, PluginEntry)> = m
            .entries
            .iter()
            .map(|e| {
                (
                    StagedPlugin {
                        name: e.name.clone(),
                        path: quick.clone(),
                        sha256: String::new(),
                    },
                    e.clone(),
                )
            })
            .collect();

        let comm_dir = tempfile::tempdir().unwrap();
        CommChannel::create(comm_dir.path(), unsafe { libc::getuid() }).unwrap();
        let host = CommChannel::open(comm_dir.path());
        let mut comm = RunnerComm::open(comm_dir.path());

        let clock = FakeClock::new(0);
        let driver = {
            let clock = clock.clone();
            std::thread::spawn(move || {
                // Tick to fake t=5.9s, stop before the t=6s batch could
                // fire, then keep ticking so the loop's final fake-time
                // sleep wakes up to see the verb.
                for _ in 0..59 {
                    std::thread::sleep(Duration::from_millis(15));
                    clock.advance(Duration::from_millis(100));
                }
                host.send_control(ControlVerb::Stop).unwrap();
                for _ in 0..40 {
                    std::thread::sleep(Duration::from_millis(15));
                    clock.advance(Duration::from_millis(100));
                }
            })
        };
        let stats = schedule_loop(
            &plugins,
            &view(),
            &mut comm,
            clock.clone() as Arc<dyn Clock>,
            1,
        );
        driver.join().unwrap();
        assert_eq!(stats.executions["fast"], 6, "{stats:?}");
        assert_eq!(stats.executions["slow"], 2, "{stats:?}");
    }

    #[test]
    fn run_once_and_stop_drain() {
        let dir = tempfile::tempdir().unwrap();
        let quick = fake_plugin(dir.path(), "quick", "exit 0");
        let m = parse_manifest(br#"{"name":"p","source":"store:q","freq_s":1000}"#).unwrap();
        let plugins = vec![(
            StagedPlugin {
                name: "p".into(),
                path: quick,
                sha256: String::new(),
            },
            m.entries[0].clone(),
        )];
        let comm_dir = tempfile::tempdir().unwrap();
        CommChannel::create(comm_dir.path(), unsafe { libc::getuid() }).unwrap();
        let host = CommChannel::open(comm_dir.path());
        let mut comm = RunnerComm::open(comm_dir.path());
        let clock = FakeClock::new(0);
        host.send_control(ControlVerb::RunOnce).unwrap();
        host.send_control(ControlVerb::RunOnce).unwrap();
        host.send_control(ControlVerb::Stop).unwrap();
        let stats = schedule_loop(&plugins, &view(), &mut comm, clock as Arc<dyn Clock>, 1);
        // initial due run is folded into the run-once batch; stop still
        // lets the batch complete first
        assert!(stats.executions["p"] >= 1);
        let (events, _) = host.read_status_since(0).unwrap();
        assert!(events
            .iter()
            .any(|e| matches!(e, StatusEvent::Stopped { .. })));
    }
}
