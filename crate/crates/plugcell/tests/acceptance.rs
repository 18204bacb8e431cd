//! Acceptance battery. Each criterion prints one PASS/FAIL line; tolerances
//! and thresholds are pinned here in code. Requires root and a quiesced
//! machine (single-CPU hosts are fine; the performance checks are ratios).

use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};

use plugcell::clock::{FakeClock, SystemClock};
use plugcell::emit::{Backend, Emitter};
use plugcell::events::EventLog;
use plugcell::harness::{self, equivalence, fixture::FixtureGuest, snapshot, AttackName, Outcome};
use plugcell::policy::{
    default_policy, render_firewall, validate_policy, Capability, Destination, Direction,
    Endpoint, FirewallRule, FirewallVerdict, LocalhostMode, NsMode, PolicyOptions, RuleMatch,
    SandboxPolicy,
};
use plugcell::record::FeatureType;
use plugcell::sandbox::{Ablation, SandboxConfig};
use plugcell::seccomp::render_seccomp;
use plugcell::session::{attach, detach, AttachOptions, Validator};

static HOST: Mutex<()> = Mutex::new(());

fn host_lock() -> MutexGuard<'static, ()> {
    HOST.lock().unwrap_or_else(|poison| poison.into_inner())
}

fn root() -> bool {
    unsafe { libc::geteuid() == 0 }
}

fn verdict(criterion: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {criterion}: {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "{criterion} failed: {detail}");
}

fn base_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("plugcell-acc-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn synthetic_guest() -> plugcell::guest::GuestTarget {
    plugcell::guest::GuestTarget::synthetic("acc", "/tmp/acc-rootfs", 4242, 1000)
}

// ---------------------------------------------------------------------------
// 1. Containment matrix: every catalog attack CONTAINED in the sandbox and
//    ESCAPED in the guest baseline; suite restores host state; < 10 min.
#[test]
fn criterion_1_containment_matrix() {
    if !root() {
        eprintln!("skipping: requires root");
        return;
    }
    let _g = host_lock();
    let base = base_dir("c1");
    let started = Instant::now();
    let opts = harness::SuiteOptions::new(base.clone(), plugcell::sandbox::default_bin_dir());
    let report = harness::run_suite(&opts).unwrap();
    let elapsed = started.elapsed();

    let mut failures = Vec::new();
    for row in &report.matrix {
        if row.sandbox_outcome != Some(Outcome::Contained) {
            failures.push(format!("{} sandbox={:?}", row.attack, row.sandbox_outcome));
        }
        if row.guest_outcome != Some(Outcome::Escaped) {
            failures.push(format!("{} guest={:?}", row.attack, row.guest_outcome));
        }
        if let Some(err) = &row.setup_error {
            failures.push(format!("{} setup: {err}", row.attack));
        }
    }
    if !report.restoration_diffs.is_empty() {
        failures.push(format!("restoration: {:?}", report.restoration_diffs));
    }
    if elapsed > Duration::from_secs(600) {
        failures.push(format!("suite took {elapsed:?} (> 10 min)"));
    }
    let report_path = base.join("containment.ndjson");
    report.write_ndjson(&report_path).unwrap();
    verdict(
        "1 containment-matrix",
        failures.is_empty(),
        &format!(
            "{} attacks, {} verdicts, {elapsed:?}{}",
            report.matrix.len(),
            report.verdicts.len(),
            if failures.is_empty() {
                String::new()
            } else {
                format!("; failures: {failures:?}")
            }
        ),
    );
    let _ = std::fs::remove_dir_all(&base);
}

// ---------------------------------------------------------------------------
// 2. Ablation sensitivity: removing exactly one construct flips exactly the
//    predicted attacks.
#[test]
fn criterion_2_ablation_sensitivity() {
    if !root() {
        eprintln!("skipping: requires root");
        return;
    }
    let _g = host_lock();
    let base = base_dir("c2");
    let bin = plugcell::sandbox::default_bin_dir();

    let expectations: [(Ablation, &[AttackName]); 4] = [
        (
            Ablation::Seccomp,
            &[AttackName::CodeInjectPtrace, AttackName::ProcmemWrite, AttackName::PortHoard],
        ),
        (
            Ablation::Firewall,
            &[AttackName::ReverseShellExfil, AttackName::LoopbackAttack],
        ),
        (
            Ablation::CgroupLimits,
            &[AttackName::ForkBomb, AttackName::MemHog, AttackName::CpuHog, AttackName::ZipBomb],
        ),
        (
            Ablation::RoRootfs,
            &[AttackName::RootfsTamper, AttackName::DiskPrivescTmpfile, AttackName::LdPreloadHook],
        ),
    ];

    let mut failures = Vec::new();
    for (ablation, expected_flips) in expectations {
        let mut opts = harness::SuiteOptions::new(base.clone(), bin.clone());
        opts.ablate = Some(ablation);
        opts.guest_baselines = false;
        let report = harness::run_suite(&opts).unwrap();
        for row in &report.matrix {
            let attack = AttackName::parse(&row.attack).unwrap();
            let should_escape = expected_flips.contains(&attack);
            let expected = if should_escape { Outcome::Escaped } else { Outcome::Contained };
            if row.sandbox_outcome != Some(expected) {
                failures.push(format!(
                    "{ablation:?}: {} = {:?}, expected {expected:?}",
                    row.attack, row.sandbox_outcome
                ));
            }
            if let Some(err) = &row.setup_error {
                failures.push(format!("{ablation:?}: {} setup: {err}", row.attack));
            }
        }
        if !report.restoration_diffs.is_empty() {
            failures.push(format!("{ablation:?} restoration: {:?}", report.restoration_diffs));
        }
    }
    verdict(
        "2 ablation-sensitivity",
        failures.is_empty(),
        &if failures.is_empty() {
            "4 ablations × 15 attacks flip exactly as predicted".to_string()
        } else {
            format!("{failures:?}")
        },
    );
    let _ = std::fs::remove_dir_all(&base);
}

// ---------------------------------------------------------------------------
// 3. Collector equivalence on three fixture guests: zero field-level diffs
//    after timestamp normalization and self-exclusion.
#[test]
fn criterion_3_collector_equivalence() {
    if !root() {
        eprintln!("skipping: requires root");
        return;
    }
    let _g = host_lock();
    let base = base_dir("c3");
    let bin = plugcell::sandbox::default_bin_dir();
    let mut all_diffs = Vec::new();
    let mut compared = 0;
    for idx in 0..3 {
        let mut guest = FixtureGuest::create(&format!("eq{idx}"), &base, &bin).unwrap();
        let report = equivalence::check_guest(&guest, &base, &bin).unwrap();
        compared += report.records_compared;
        all_diffs.extend(report.diffs);
        guest.teardown().unwrap();
    }
    verdict(
        "3 collector-equivalence",
        all_diffs.is_empty() && compared > 60,
        &format!("3 guests, {compared} records compared, {} diffs {:?}", all_diffs.len(), all_diffs),
    );
    let _ = std::fs::remove_dir_all(&base);
}

// ---------------------------------------------------------------------------
// 4. Performance envelope: cycle ratio ≤ 2.0×, setup < 5 s, memory within
//    1.5×, benchmark-delta difference < 1 pp; ≥ 10 runs per measurement.
#[test]
fn criterion_4_performance_envelope() {
    if !root() {
        eprintln!("skipping: requires root");
        return;
    }
    let _g = host_lock();
    let base = base_dir("c4");
    let bin = plugcell::sandbox::default_bin_dir();
    let perf = harness::perf::measure_perf(&base, &bin, 300, 10).unwrap();

    let mut failures = Vec::new();
    if !(perf.cycle_ratio <= 2.0) {
        failures.push(format!("cycle ratio {:.2} > 2.0", perf.cycle_ratio));
    }
    if !(perf.setup_median_ms < 5_000.0) {
        failures.push(format!("setup median {:.0} ms ≥ 5 s", perf.setup_median_ms));
    }
    if perf.setup_latency_ms.len() < 10 {
        failures.push("fewer than 10 setup samples".into());
    }
    if !(perf.mem_ratio <= 1.5) {
        failures.push(format!("memory ratio {:.2} > 1.5", perf.mem_ratio));
    }
    if !(perf.delta_diff_pp < 1.0) {
        failures.push(format!("benchmark delta diff {:.2} pp ≥ 1", perf.delta_diff_pp));
    }
    verdict(
        "4 performance-envelope",
        failures.is_empty(),
        &format!(
            "cycle guest {:.1} ms vs sandbox {:.1} ms (ratio {:.2}); setup median {:.0} ms p95 {:.0} ms; mem {}/{} B (ratio {:.2}); bench deltas {:.2}%/{:.2}% (diff {:.2} pp){}",
            perf.cycle_ms_in_guest,
            perf.cycle_ms_in_sandbox,
            perf.cycle_ratio,
            perf.setup_median_ms,
            perf.setup_p95_ms,
            perf.sandbox_mem_bytes,
            perf.guest_mem_bytes,
            perf.mem_ratio,
            perf.delta_in_guest_pct,
            perf.delta_in_sandbox_pct,
            perf.delta_diff_pp,
            if failures.is_empty() { String::new() } else { format!("; {failures:?}") }
        ),
    );
    let _ = std::fs::remove_dir_all(&base);
}

// ---------------------------------------------------------------------------
// 5. Policy property suite: 1,000 random valid option sets validate; 1,000
//    invariant-violating mutations are each flagged; renders deterministic.
fn random_options(rng: &mut SmallRng) -> PolicyOptions {
    let passive_capture = rng.random_bool(0.3);
    PolicyOptions {
        localhost_mode: match rng.random_range(0..3) {
            0 => LocalhostMode::BlockAll,
            1 => LocalhostMode::HttpGetOnly,
            _ => LocalhostMode::AllowAll,
        },
        passive_capture,
        allow_bind: rng.random_bool(0.2),
        bind_port_allowlist: (0..rng.random_range(0..3)).map(|_| rng.random_range(1024..u16::MAX)).collect(),
        backend_endpoint: rng.random_bool(0.5).then(|| Endpoint {
            ip: std::net::Ipv4Addr::new(10, rng.random(), rng.random(), rng.random_range(1..255)),
            port: rng.random_range(1024..u16::MAX),
        }),
        pid_private: rng.random_bool(0.2),
        net_private: if passive_capture { false } else { rng.random_bool(0.2) },
        sandbox_uid: rng.random_bool(0.5).then(|| rng.random_range(10_000..60_000)),
        proxy_port: rng.random_range(1024..u16::MAX),
        limits: rng.random_bool(0.5).then(|| plugcell::policy::ResourceLimits {
            cpu_quota: rng.random_range(0.05..4.0),
            memory_bytes: rng.random_range(1..4096u64) << 20,
            pids_max: rng.random_range(1..4096),
            blkio: if rng.random_bool(0.5) {
                plugcell::policy::BlkioLimit::Weight(rng.random_range(1..1000))
            } else {
                plugcell::policy::BlkioLimit::WriteBytesPerSec(rng.random_range(1..1_000_000_000))
            },
        }),
        extra_mounts: Vec::new(),
    }
}

fn mutate_policy(rng: &mut SmallRng, p: &mut SandboxPolicy) -> &'static str {
    match rng.random_range(0..14) {
        0 => {
            p.caps.insert(
                *[Capability::Kill, Capability::SysAdmin, Capability::SysModule, Capability::SysRawio]
                    .iter()
                    .nth(rng.random_range(0..4))
                    .unwrap(),
            );
            "cap outside allowlist"
        }
        1 => {
            p.sharing.user = NsMode::SharedWithGuest;
            "shared user ns"
        }
        2 => {
            p.sharing.mount = NsMode::SharedWithGuest;
            "shared mount ns"
        }
        3 => {
            p.seccomp.retain(|r| r.syscall_name != "ptrace");
            "missing ptrace denial"
        }
        4 => {
            p.seccomp.retain(|r| r.syscall_name != "process_vm_writev");
            "missing process_vm_writev denial"
        }
        5 => {
            p.limits.pids_max = 0;
            "zero pids limit"
        }
        6 => {
            p.limits.memory_bytes = 0;
            "zero memory limit"
        }
        7 => {
            p.limits.cpu_quota = 0.0;
            "zero cpu quota"
        }
        8 => {
            p.uid_map.host_uid = 0;
            "root host uid"
        }
        9 => {
            p.uid_map.host_uid = p.guest_owner_uid;
            "uid collides with guest owner"
        }
        10 => {
            if let Some(m) = p.mounts.first_mut() {
                m.read_only = false;
            }
            "writable mount"
        }
        11 => {
            p.mounts.retain(|m| m.target != std::path::PathBuf::from(plugcell::policy::GUEST_ROOT));
            "missing guest rootfs mount"
        }
        12 => {
            p.firewall.clear();
            "missing terminal drops"
        }
        _ => {
            p.firewall.push(FirewallRule {
                matcher: RuleMatch::SandboxClassid,
                direction: Direction::Out,
                destination: Destination::Tcp {
                    ip: std::net::Ipv4Addr::new(8, 8, 8, 8),
                    port: 53,
                },
                source_tcp_port: None,
                verdict: FirewallVerdict::Accept,
            });
            "accept after terminal drop"
        }
    }
}

#[test]
fn criterion_5_policy_property_suite() {
    let guest = synthetic_guest();
    let mut rng = SmallRng::seed_from_u64(0x9e3779b97f4a7c15);

    let mut valid_failures = Vec::new();
    for i in 0..1000 {
        let opts = random_options(&mut rng);
        let policy = default_policy(&guest, &opts).expect("options constructed valid");
        let report = validate_policy(&policy);
        if !report.is_valid() {
            valid_failures.push(format!("case {i}: {report}"));
        }
        // Monotonic restraint: dropping accepts never invalidates.
        let mut restrained = policy.clone();
        restrained.firewall.retain(|r| r.verdict != FirewallVerdict::Accept);
        if !validate_policy(&restrained).is_valid() {
            valid_failures.push(format!("case {i}: accept removal broke validity"));
        }
    }

    let mut mutation_misses = Vec::new();
    for i in 0..1000 {
        let opts = random_options(&mut rng);
        let mut policy = default_policy(&guest, &opts).unwrap();
        // Guarantee the blend/bind preconditions the mutations rely on.
        policy.allow_bind = false;
        if !policy.seccomp.iter().any(|r| r.syscall_name == "bind") {
            policy.seccomp.push(plugcell::policy::SeccompRule::deny("bind"));
        }
        let kind = mutate_policy(&mut rng, &mut policy);
        if validate_policy(&policy).is_valid() {
            mutation_misses.push(format!("case {i}: `{kind}` not flagged"));
        }
    }

    let mut determinism_failures = 0;
    for _ in 0..100 {
        let opts = random_options(&mut rng);
        let policy = default_policy(&guest, &opts).unwrap();
        let a = render_seccomp(&policy).unwrap().to_bytes();
        let b = render_seccomp(&policy).unwrap().to_bytes();
        if a != b || render_firewall(&policy) != render_firewall(&policy) {
            determinism_failures += 1;
        }
    }

    let pass = valid_failures.is_empty() && mutation_misses.is_empty() && determinism_failures == 0;
    verdict(
        "5 policy-property-suite",
        pass,
        &format!(
            "1000 valid option sets validate; 1000 mutations flagged; renders deterministic{}{}",
            if valid_failures.is_empty() { String::new() } else { format!("; valid failures {:?}", &valid_failures[..valid_failures.len().min(3)]) },
            if mutation_misses.is_empty() { String::new() } else { format!("; misses {:?}", &mutation_misses[..mutation_misses.len().min(3)]) },
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. No-residue: 50 attach/detach cycles (10 with mid-session guest kills,
//    10 with forced build failures) leave host state byte-identical.
#[test]
fn criterion_6_no_residue() {
    if !root() {
        eprintln!("skipping: requires root");
        return;
    }
    let _g = host_lock();
    plugcell::sandbox::cgroup::ensure_host_ready().unwrap();
    let base = base_dir("c6");
    let bin = plugcell::sandbox::default_bin_dir();
    let events = Arc::new(EventLog::quiet());
    let clock = Arc::new(SystemClock);

    let manifest = base.join("plugins.ndjson");
    std::fs::write(&manifest, r#"{"name":"os","source":"store:collect-os","freq_s":60}"#).unwrap();

    // Long-lived guest for the normal and failure cycles.
    let mut guest = FixtureGuest::create("res", &base, &bin).unwrap();
    let pre = snapshot::capture().unwrap();

    let attach_opts = |base: &PathBuf, bin: &PathBuf| AttachOptions {
        plugins_file: Some(manifest.clone()),
        fetch_deadline_s: 20,
        sandbox: SandboxConfig {
            bin_dir: bin.clone(),
            base_dir: base.clone(),
            ablation: None,
        },
        ..Default::default()
    };

    let mut failures = Vec::new();

    // 30 normal attach/detach cycles.
    for i in 0..30 {
        match attach("res", &guest.adapter(), attach_opts(&base, &bin), events.clone(), clock.clone()) {
            Ok(mut session) => {
                let _ = session.pump();
                detach(&mut session);
            }
            Err(e) => failures.push(format!("cycle {i}: {e}")),
        }
    }

    // 10 forced build failures (mounts step fails after partial build).
    for i in 0..10 {
        let target = guest.resolve().unwrap();
        let opts = PolicyOptions {
            extra_mounts: vec![plugcell::policy::MountSpec::read_only(
                "/nonexistent-plugcell-src",
                "/extra",
            )],
            ..Default::default()
        };
        let bad = default_policy(&target, &opts).unwrap();
        let config = SandboxConfig {
            bin_dir: bin.clone(),
            base_dir: base.clone(),
            ablation: None,
        };
        match plugcell::sandbox::create_sandbox(&target, &bad, &config) {
            Err(plugcell::sandbox::BuildError::Failed { .. }) => {}
            Err(other) => failures.push(format!("forced failure {i}: unexpected error {other}")),
            Ok(mut handle) => {
                failures.push(format!("forced failure {i}: build unexpectedly succeeded"));
                let _ = plugcell::sandbox::teardown(&mut handle);
            }
        }
    }

    // 10 cycles where the guest dies mid-session.
    for i in 0..10 {
        let mut victim_guest = match FixtureGuest::create(&format!("res-k{i}"), &base, &bin) {
            Ok(g) => g,
            Err(e) => {
                failures.push(format!("kill cycle {i} fixture: {e}"));
                continue;
            }
        };
        match attach(
            &format!("res-k{i}"),
            &victim_guest.adapter(),
            attach_opts(&base, &bin),
            events.clone(),
            clock.clone(),
        ) {
            Ok(mut session) => {
                let _ = victim_guest.cgroup.kill_all();
                let _ = session.pump();
                detach(&mut session);
            }
            Err(e) => failures.push(format!("kill cycle {i}: {e}")),
        }
        let _ = victim_guest.teardown();
    }

    let post = snapshot::capture().unwrap();
    let diffs: Vec<String> = pre
        .diff(&post)
        .into_iter()
        .filter(|d| !d.contains("guest-res-k")) // killed fixtures removed themselves
        .collect();
    if !diffs.is_empty() {
        failures.push(format!("residue: {diffs:?}"));
    }
    guest.teardown().unwrap();
    verdict(
        "6 no-residue",
        failures.is_empty(),
        &format!(
            "50 attach/detach cycles (30 normal, 10 guest kills, 10 forced failures){}",
            if failures.is_empty() { String::new() } else { format!("; {failures:?}") }
        ),
    );
    let _ = std::fs::remove_dir_all(&base);
}

// ---------------------------------------------------------------------------
// 7. Write-denial fuzz: 1000 random mutation attempts under /guest all
//    denied; rootfs hashes unchanged.
#[test]
fn criterion_7_write_denial_fuzz() {
    if !root() {
        eprintln!("skipping: requires root");
        return;
    }
    let _g = host_lock();
    let base = base_dir("c7");
    let bin = plugcell::sandbox::default_bin_dir();
    let mut guest = FixtureGuest::create("fuzz", &base, &bin).unwrap();
    let pre_hashes = guest.rootfs_hashes();

    let target = guest.resolve().unwrap();
    let policy = default_policy(&target, &PolicyOptions::default()).unwrap();
    let config = SandboxConfig {
        bin_dir: bin.clone(),
        base_dir: base.clone(),
        ablation: None,
    };
    let mut handle = plugcell::sandbox::create_sandbox(&target, &policy, &config).unwrap();
    let comm = handle.comm_dir.clone();
    plugcell::sandbox::exec_runner(
        &mut handle,
        &format!("{}/plugcell-probe", plugcell::sandbox::SANDBOX_BIN),
        &[
            "write-fuzz".into(),
            "--root".into(),
            "/guest".into(),
            "--attempts".into(),
            "1000".into(),
            "--out".into(),
            "/comm/fuzz.json".into(),
        ],
        &Default::default(),
    )
    .unwrap();
    let deadline = Instant::now() + Duration::from_secs(60);
    while handle.runner_alive() && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(25));
    }
    let report: serde_json::Value = std::fs::read(comm.join("fuzz.json"))
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok())
        .unwrap_or_default();
    let _ = plugcell::sandbox::teardown(&mut handle);

    let denied = report["denied"].as_u64().unwrap_or(0);
    let succeeded = report["succeeded"].as_array().map(|a| a.len()).unwrap_or(usize::MAX);
    let hashes_unchanged = guest.rootfs_hashes() == pre_hashes;
    guest.teardown().unwrap();

    verdict(
        "7 write-denial-fuzz",
        denied == 1000 && succeeded == 0 && hashes_unchanged,
        &format!("denied {denied}/1000, succeeded {succeeded}, hashes unchanged: {hashes_unchanged}"),
    );
    let _ = std::fs::remove_dir_all(&base);
}

// ---------------------------------------------------------------------------
// 8. Output validation totality: 100,000 fuzzed lines never crash the
//    validator; throttle delivers exactly the limit under a fake clock.
#[test]
fn criterion_8_validation_totality_and_throttle() {
    let mut rng = SmallRng::seed_from_u64(0x5deece66d);
    let mut validator = Validator::default();
    let mut accepted = 0u64;
    let mut rejected = 0u64;

    let sample_record = plugcell::record::CollectionRecord::new(
        "g",
        FeatureType::Process,
        "pid/1",
        1_700_000_000_000,
        0,
        serde_json::Map::new(),
    )
    .to_line();

    for i in 0..100_000u64 {
        let line: Vec<u8> = match i % 5 {
            // pure noise
            0 => (0..rng.random_range(0..200)).map(|_| rng.random()).collect(),
            // structurally близко: valid record with random byte corruption
            1 => {
                let mut bytes = sample_record.clone().into_bytes();
                if !bytes.is_empty() {
                    let n = rng.random_range(0..4);
                    for _ in 0..n {
                        let idx = rng.random_range(0..bytes.len());
                        bytes[idx] = rng.random();
                    }
                }
                bytes
            }
            // random JSON documents
            2 => {
                let ft = ["process", "exfil", "os", "zzz"][rng.random_range(0..4)];
                let ts = ["2024-01-01T00:00:00Z", "whenever"][rng.random_range(0..2)];
                serde_json::json!({
                    "namespace_label": rng.random::<u32>().to_string(),
                    "feature_type": ft,
                    "feature_key": "k",
                    "timestamp": ts,
                    "cycle": rng.random::<u16>(),
                    "payload": {}
                })
                .to_string()
                .into_bytes()
            }
            // oversize payloads
            3 => {
                let mut rec: serde_json::Value = serde_json::from_str(&sample_record).unwrap();
                rec["payload"] = serde_json::json!({"blob": "x".repeat(rng.random_range(0..100_000))});
                rec.to_string().into_bytes()
            }
            // well-formed
            _ => sample_record.clone().into_bytes(),
        };
        match validator.validate_output(&line) {
            Ok(_) => accepted += 1,
            Err(_) => rejected += 1,
        }
    }
    let total_ok = accepted + rejected == 100_000;

    // Deterministic throttle: 10,000 records in one fake second at 1000/s
    // delivers exactly 1000 and drops exactly 9000.
    let dir = tempfile::tempdir().unwrap();
    let clock = FakeClock::new(0);
    let backend = Backend::file(dir.path(), "acc").unwrap();
    let mut emitter = Emitter::new(backend, 1000, clock);
    let records: Vec<_> = (0..10_000)
        .map(|i| {
            plugcell::record::CollectionRecord::new(
                "g",
                FeatureType::Metric,
                &format!("k{i}"),
                1_700_000_000_000 + i,
                0,
                serde_json::Map::new(),
            )
        })
        .collect();
    let stats = emitter.emit(&records);
    let throttle_exact = stats.delivered == 1000 && stats.throttle_drops == 9000;

    verdict(
        "8 validation-totality",
        total_ok && throttle_exact,
        &format!(
            "100000 lines → {accepted} accepted + {rejected} typed-rejected, no crash; throttle delivered {} dropped {}",
            stats.delivered, stats.throttle_drops
        ),
    );
}
