//! End-to-end attachment lifecycle: resolve → policy → sandbox → fetch
//! window → collection cycles through real collectors → validated records
//! at the backend → leak-free detach. Plus the collector-equivalence check.
//! Requires root.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use plugcell::clock::SystemClock;
use plugcell::events::EventLog;
use plugcell::harness::fixture::FixtureGuest;
use plugcell::harness::{equivalence, snapshot};
use plugcell::record::{validate_line, FeatureType};
use plugcell::sandbox::SandboxConfig;
use plugcell::session::{attach, detach, AttachOptions, Phase};

static HOST: Mutex<()> = Mutex::new(());

fn root() -> bool {
    unsafe { libc::geteuid() == 0 }
}

fn test_base(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("plugcell-e2e-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn manifest_for_collectors(freq_s: f64) -> String {
    plugcell::collectors::COLLECTOR_NAMES
        .iter()
        .map(|name| {
            format!(
                r#"{{"name":"{name}","source":"store:{}","freq_s":{freq_s}}}"#,
                plugcell::collectors::collector_executable(name)
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn attach_collects_validated_records_and_detaches_cleanly() {
    if !root() {
        eprintln!("skipping: requires root");
        return;
    }
    let _g = HOST.lock().unwrap();
    plugcell::sandbox::cgroup::ensure_host_ready().unwrap();
    let base = test_base("attach");
    let bin_dir = plugcell::sandbox::default_bin_dir();
    let mut guest = FixtureGuest::create("attach", &base, &bin_dir).unwrap();

    let pre = snapshot::capture().unwrap();

    let manifest_path = base.join("plugins.ndjson");
    std::fs::write(&manifest_path, manifest_for_collectors(0.5)).unwrap();

    let backend_dir = base.join("backend");
    let opts = AttachOptions {
        plugins_file: Some(manifest_path),
        backend: Some(format!("file:{}", backend_dir.display())),
        fetch_deadline_s: 20,
        sandbox: SandboxConfig {
            bin_dir: bin_dir.clone(),
            base_dir: base.clone(),
            ablation: None,
        },
        ..Default::default()
    };

    let events = Arc::new(EventLog::quiet());
    let clock = Arc::new(SystemClock);
    let mut session = attach("attach", &guest.adapter(), opts, events, clock).expect("attach");
    assert_eq!(session.phase, Phase::Collecting);

    assert!(
        session.wait_for_cycles(2, Duration::from_secs(20)),
        "no cycles observed: stats {:?}",
        session.stats
    );
    assert!(session.stats.records > 0);

    let report = detach(&mut session);
    assert!(!report.nothing_to_do);
    assert_eq!(session.phase, Phase::Stopped);

    // Backend file carries schema-valid records covering every grant path.
    let backend_file = backend_dir.join(format!("{}.ndjson", session.session_id));
    let content = std::fs::read(&backend_file).expect("backend file");
    let mut seen = std::collections::HashSet::new();
    let mut count = 0;
    for line in content.split(|b| *b == b'\n').filter(|l| !l.is_empty()) {
        let rec = validate_line(line).expect("backend line validates");
        assert_eq!(rec.namespace_label, "attach");
        seen.insert(format!("{:?}", rec.feature_type));
        count += 1;
    }
    assert!(count >= 5, "expected a full cycle of records, got {count}");
    for required in [
        FeatureType::Os,
        FeatureType::Process,
        FeatureType::OpenFile,
        FeatureType::Connection,
        FeatureType::Metric,
    ] {
        assert!(
            seen.contains(&format!("{required:?}")),
            "missing {required:?} records in {seen:?}"
        );
    }

    // Detach twice is a no-op; host state is restored.
    assert!(detach(&mut session).nothing_to_do);
    guest.teardown().unwrap();
    let post = snapshot::capture().unwrap();
    let diffs = pre.diff(&post);
    // The fixture guest itself is gone too, so compare against a world
    // where only it was removed.
    let residue: Vec<_> = diffs
        .iter()
        .filter(|d| !d.contains("guest-attach"))
        .collect();
    assert!(residue.is_empty(), "host residue: {residue:#?}");
    let _ = std::fs::remove_dir_all(&base);
}

#[test]
fn collectors_are_equivalent_inside_and_outside_the_sandbox() {
    if !root() {
        eprintln!("skipping: requires root");
        return;
    }
    let _g = HOST.lock().unwrap();
    let base = test_base("equiv");
    let bin_dir = plugcell::sandbox::default_bin_dir();
    let mut guest = FixtureGuest::create("equiv", &base, &bin_dir).unwrap();

    let report = equivalence::check_guest(&guest, &base, &bin_dir).unwrap();
    assert!(report.records_compared > 20, "too few records: {report:?}");
    assert!(report.diffs.is_empty(), "equivalence diffs: {:#?}", report.diffs);

    guest.teardown().unwrap();
    let _ = std::fs::remove_dir_all(&base);
}

#[test]
fn concurrent_sessions_do_not_interfere() {
    if !root() {
        eprintln!("skipping: requires root");
        return;
    }
    let _g = HOST.lock().unwrap();
    let base = test_base("multi");
    let bin_dir = plugcell::sandbox::default_bin_dir();
    let mut guest_a = FixtureGuest::create("multi-a", &base, &bin_dir).unwrap();
    let mut guest_b = FixtureGuest::create("multi-b", &base, &bin_dir).unwrap();

    let manifest_path = base.join("plugins.ndjson");
    std::fs::write(&manifest_path, manifest_for_collectors(0.5)).unwrap();
    let opts = |name: &str| AttachOptions {
        plugins_file: Some(manifest_path.clone()),
        backend: Some(format!("file:{}", base.join(format!("backend-{name}")).display())),
        fetch_deadline_s: 20,
        sandbox: SandboxConfig {
            bin_dir: bin_dir.clone(),
            base_dir: base.clone(),
            ablation: None,
        },
        ..Default::default()
    };
    let events = Arc::new(EventLog::quiet());
    let clock = Arc::new(SystemClock);

    let mut session_a =
        attach("multi-a", &guest_a.adapter(), opts("a"), events.clone(), clock.clone()).unwrap();
    let mut session_b =
        attach("multi-b", &guest_b.adapter(), opts("b"), events.clone(), clock.clone()).unwrap();

    assert!(session_a.wait_for_cycles(1, Duration::from_secs(15)));
    assert!(session_b.wait_for_cycles(1, Duration::from_secs(15)));

    // Tearing one down leaves the other collecting.
    let before = session_b.stats.cycles;
    detach(&mut session_a);
    assert!(
        session_b.wait_for_cycles(before + 1, Duration::from_secs(15)),
        "session b stalled after detaching session a"
    );
    assert_eq!(session_b.phase, Phase::Collecting);
    detach(&mut session_b);

    // Streams stayed separated by namespace label.
    for name in ["a", "b"] {
        let dir = base.join(format!("backend-{name}"));
        let file = std::fs::read_dir(&dir).unwrap().next().unwrap().unwrap().path();
        let content = std::fs::read_to_string(&file).unwrap();
        let expect = format!("multi-{name}");
        for line in content.lines() {
            let rec = validate_line(line.as_bytes()).unwrap();
            assert_eq!(rec.namespace_label, expect);
        }
    }

    guest_a.teardown().unwrap();
    guest_b.teardown().unwrap();
    let _ = std::fs::remove_dir_all(&base);
}

#[test]
fn get_only_proxy_admits_loopback_reads_and_nothing_else() {
    if !root() {
        eprintln!("skipping: requires root");
        return;
    }
    let _g = HOST.lock().unwrap();
    let base = test_base("proxy");
    let bin_dir = plugcell::sandbox::default_bin_dir();
    let mut guest = FixtureGuest::create("proxy", &base, &bin_dir).unwrap();

    // One plugin that reports loopback reachability directly and via the
    // GET-only proxy. The guest's loopback marker service plays the local
    // status endpoint.
    let manifest_path = base.join("plugins.ndjson");
    std::fs::write(
        &manifest_path,
        r#"{"name":"proxy-check","source":"store:plugcell-probe","freq_s":600,"args":{"cmd":"proxy-check","target":"127.0.0.1:8081","proxy_port":3128}}"#,
    )
    .unwrap();

    let opts = AttachOptions {
        policy_opts: plugcell::policy::PolicyOptions {
            localhost_mode: plugcell::policy::LocalhostMode::HttpGetOnly,
            ..Default::default()
        },
        plugins_file: Some(manifest_path),
        backend: Some(format!("file:{}", base.join("backend").display())),
        fetch_deadline_s: 20,
        sandbox: SandboxConfig {
            bin_dir: bin_dir.clone(),
            base_dir: base.clone(),
            ablation: None,
        },
        ..Default::default()
    };
    let events = Arc::new(EventLog::quiet());
    let clock = Arc::new(SystemClock);
    let mut session = attach("proxy", &guest.adapter(), opts, events, clock).expect("attach");
    assert!(session.wait_for_cycles(1, Duration::from_secs(20)));
    detach(&mut session);

    let backend = base
        .join("backend")
        .join(format!("{}.ndjson", session.session_id));
    let content = std::fs::read_to_string(&backend).unwrap();
    let record = content
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .find(|v| v["feature_key"] == "proxy_check")
        .expect("proxy_check record");
    // Direct loopback connects stay firewalled; the proxied GET reaches the
    // service (which answers with its ack banner).
    assert_eq!(record["payload"]["direct"], "timeout", "{record}");
    assert_eq!(record["payload"]["via_proxy"], "ack", "{record}");
    // The service really was hit, through the proxy only.
    let marker = guest
        .command(serde_json::json!({"cmd": "read", "path": "/tmp/loopback-pwned"}))
        .unwrap();
    assert_eq!(marker["ok"], true, "proxied GET must reach the service");
    assert!(marker["data"].as_str().unwrap_or("").starts_with("GET /status"));

    guest.teardown().unwrap();
    let _ = std::fs::remove_dir_all(&base);
}

#[test]
fn fetch_window_blocks_late_url_fetches() {
    if !root() {
        eprintln!("skipping: requires root");
        return;
    }
    let _g = HOST.lock().unwrap();
    let base = test_base("fetchwin");
    let bin_dir = plugcell::sandbox::default_bin_dir();
    let mut guest = FixtureGuest::create("fetchwin", &base, &bin_dir).unwrap();

    // Manifest referencing a URL that will never respond: the runner's
    // fetch fails (window firewall admits it, but nothing listens), the
    // runner still signals completion having staged nothing.
    let manifest_path = base.join("plugins.ndjson");
    std::fs::write(
        &manifest_path,
        r#"{"name":"ghost","source":"http://127.77.0.1:9/plugin","freq_s":5}"#,
    )
    .unwrap();

    let opts = AttachOptions {
        plugins_file: Some(manifest_path),
        fetch_deadline_s: 15,
        sandbox: SandboxConfig {
            bin_dir: bin_dir.clone(),
            base_dir: base.clone(),
            ablation: None,
        },
        ..Default::default()
    };
    let events = Arc::new(EventLog::quiet());
    let clock = Arc::new(SystemClock);
    let mut session = attach("fetchwin", &guest.adapter(), opts, events, clock).expect("attach");

    // After the window closed, a URL fetch attempt from inside must fail:
    // the staging area is read-only and the firewall exception is gone.
    // The ghost plugin was never staged, so no records of it exist.
    let _ = session.pump();
    let report = detach(&mut session);
    assert!(!report.nothing_to_do);

    guest.teardown().unwrap();
    let _ = std::fs::remove_dir_all(&base);
}
