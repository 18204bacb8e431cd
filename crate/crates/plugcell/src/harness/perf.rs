//! Performance measurements: sandbox setup latency, per-cycle collection
//! overhead inside the sandbox vs inside the guest, memory parity after a
//! long run, and guest benchmark impact by plugin location.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::policy::{default_policy, PolicyOptions, ResourceLimits};
use crate::sandbox::{self, exec_runner, teardown, SandboxConfig, SANDBOX_BIN};

use super::fixture::FixtureGuest;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerfReport {
    pub runs: usize,
    pub cycles: u64,
    pub setup_latency_ms: Vec<f64>,
    pub setup_median_ms: f64,
    pub setup_p95_ms: f64,
    pub cycle_ms_in_guest: f64,
    pub cycle_ms_in_sandbox: f64,
    pub cycle_ratio: f64,
    pub sandbox_mem_bytes: u64,
    pub guest_mem_bytes: u64,
    pub mem_ratio: f64,
    /// Scheduled share of real (steal-corrected) CPU capacity the guest
    /// benchmark achieved.
    pub bench_idle_share: f64,
    pub bench_with_guest_collectors_share: f64,
    pub bench_with_sandbox_collectors_share: f64,
    pub delta_in_guest_pct: f64,
    pub delta_in_sandbox_pct: f64,
    pub delta_diff_pp: f64,
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((sorted.len() as f64 - 1.0) * p).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Per-cycle collection workload policy: full CPU so the measurement sees
/// location overhead, not an artificial quota.
fn perf_policy_opts() -> PolicyOptions {
    PolicyOptions {
        limits: Some(ResourceLimits {
            cpu_quota: 1.0,
            memory_bytes: 256 << 20,
            pids_max: 128,
            ..Default::default()
        }),
        ..Default::default()
    }
}

fn sandbox_cycle_bench(
    guest: &FixtureGuest,
    base_dir: &Path,
    bin_dir: &Path,
    cycles: u64,
) -> std::io::Result<(f64, u64)> {
    let target = guest.resolve().map_err(std::io::Error::other)?;
    let policy = default_policy(&target, &perf_policy_opts()).map_err(std::io::Error::other)?;
    let config = SandboxConfig {
        bin_dir: bin_dir.to_path_buf(),
        base_dir: base_dir.to_path_buf(),
        ablation: None,
    };
    let mut handle = sandbox::create_sandbox(&target, &policy, &config).map_err(std::io::Error::other)?;
    let comm_dir = handle.comm_dir.clone();
    let argv = vec![
        "cycle-bench".to_string(),
        "--cycles".into(),
        cycles.to_string(),
        "--out".into(),
        "/comm/perf.json".into(),
    ];
    exec_runner(&mut handle, &format!("{SANDBOX_BIN}/plugcell-probe"), &argv, &Default::default())
        .map_err(std::io::Error::other)?;
    let deadline = Instant::now() + Duration::from_secs(600);
    while handle.runner_alive() && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(50));
    }
    // Memory high-water of the whole sandbox over the run.
    let mem = handle.memory_peak_bytes().unwrap_or(0);
    let doc: Value = std::fs::read(comm_dir.join("perf.json"))
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok())
        .unwrap_or(Value::Null);
    let _ = teardown(&mut handle);
    let per_cycle = doc["per_cycle_ms"].as_f64().unwrap_or(f64::NAN);
    Ok((per_cycle, mem))
}

fn guest_cycle_bench(guest: &FixtureGuest, cycles: u64) -> std::io::Result<(f64, u64)> {
    let reply = guest.run_in_guest(
        &[
            "cycle-bench",
            "--cycles",
            &cycles.to_string(),
            "--out",
            "/tmp/perf.json",
            "--guest-root",
            "/",
            "--guest-cgroup",
            "/guest-cgroup",
        ],
        600_000,
    )?;
    if reply["ok"] != true {
        return Err(std::io::Error::other(format!("guest bench failed: {reply}")));
    }
    let doc = guest.command(json!({"cmd": "read", "path": "/tmp/perf.json"}))?;
    let parsed: Value = doc["data"]
        .as_str()
        .and_then(|s| serde_json::from_str(s).ok())
        .unwrap_or(Value::Null);
    let mem = guest.cgroup.memory_peak_bytes().unwrap_or(0);
    Ok((parsed["per_cycle_ms"].as_f64().unwrap_or(f64::NAN), mem))
}

/// Guest benchmark's scheduled share of real CPU capacity: thread cputime
/// over (wall − hypervisor steal). Iteration counts are hostage to steal
/// bursts on shared hosts; the share is not.
fn guest_bench_share(guest: &FixtureGuest, ms: u64) -> f64 {
    guest
        .command(json!({"cmd": "bench", "ms": ms}))
        .ok()
        .and_then(|r| r["share"].as_f64())
        .unwrap_or(0.0)
}

fn median_f64(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

/// Run the full measurement battery on a quiesced machine.
pub fn measure_perf(
    base_dir: &Path,
    bin_dir: &Path,
    cycles: u64,
    runs: usize,
) -> std::io::Result<PerfReport> {
    crate::sandbox::cgroup::ensure_host_ready()?;
    let base = base_dir.to_path_buf();
    let mut guest = FixtureGuest::create("perf", &base, bin_dir)?;

    // 1. Setup latency distribution over `runs` fresh sandboxes.
    let target = guest.resolve().map_err(std::io::Error::other)?;
    let policy = default_policy(&target, &PolicyOptions::default()).map_err(std::io::Error::other)?;
    let config = SandboxConfig {
        bin_dir: bin_dir.to_path_buf(),
        base_dir: base.clone(),
        ablation: None,
    };
    let mut setup_latency_ms = Vec::with_capacity(runs);
    for _ in 0..runs.max(10) {
        let t0 = Instant::now();
        let mut handle =
            sandbox::create_sandbox(&target, &policy, &config).map_err(std::io::Error::other)?;
        setup_latency_ms.push(t0.elapsed().as_secs_f64() * 1000.0);
        let _ = teardown(&mut handle);
    }
    let mut sorted = setup_latency_ms.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let setup_median_ms = percentile(&sorted, 0.5);
    let setup_p95_ms = percentile(&sorted, 0.95);

    // 2. Amortized per-cycle duration + memory, both locations.
    let (cycle_ms_in_sandbox, sandbox_mem_bytes) =
        sandbox_cycle_bench(&guest, &base, bin_dir, cycles)?;
    let (cycle_ms_in_guest, guest_mem_bytes) = guest_cycle_bench(&guest, cycles)?;

    // 3. Guest CPU benchmark impact by collector location. Both locations
    // get the same envelope: a periodic collection cadence (2 cycles/s, a
    // brisk monitoring frequency), the same CPU quota (the sandbox's from
    // policy; a quota'd child group of the guest's cgroup in-guest), and
    // interleaved measurement pairs so ambient drift cancels. On a single
    // shared core, back-to-back exec storms would otherwise measure CFS
    // preemption structure rather than plugin-location overhead.
    let quota = ResourceLimits::default().cpu_quota;

    let guest_cpu = guest
        .cgroup
        .dir("cpu")
        .ok_or_else(|| std::io::Error::other("no cpu controller"))?
        .to_path_buf();
    let plugins_group = guest_cpu.join("plugins");
    std::fs::create_dir_all(&plugins_group)?;
    std::fs::write(plugins_group.join("cpu.cfs_period_us"), "100000")?;
    std::fs::write(
        plugins_group.join("cpu.cfs_quota_us"),
        ((quota * 100_000.0) as i64).to_string(),
    )?;

    // Long-lived sandbox load, gated by the freezer between phases.
    let interference_policy =
        default_policy(&target, &PolicyOptions::default()).map_err(std::io::Error::other)?;
    let mut handle = sandbox::create_sandbox(&target, &interference_policy, &config)
        .map_err(std::io::Error::other)?;
    let argv = vec![
        "cycle-bench".to_string(),
        "--forever".into(),
        "--interval-ms".into(),
        "500".into(),
        "--out".into(),
        "/comm/perf-forever.json".into(),
    ];
    exec_runner(&mut handle, &format!("{SANDBOX_BIN}/plugcell-probe"), &argv, &Default::default())
        .map_err(std::io::Error::other)?;
    std::thread::sleep(Duration::from_millis(400));
    handle.set_frozen(true)?;

    let bench_idle_share = median_f64((0..3).map(|_| guest_bench_share(&guest, 2000)).collect());
    let mut guest_phase: Vec<f64> = Vec::new();
    let mut sandbox_phase: Vec<f64> = Vec::new();
    for _ in 0..9 {
        // in-guest phase
        let load_pid = guest.spawn_in_guest_context(
            "/opt/plugcell/bin/plugcell-probe",
            &[
                "cycle-bench",
                "--forever",
                "--interval-ms",
                "500",
                "--out",
                "/tmp/perf-forever.json",
                "--guest-root",
                "/",
                "--guest-cgroup",
                "/guest-cgroup",
            ],
            &[],
            Some(plugins_group.join("cgroup.procs")),
        )?;
        std::thread::sleep(Duration::from_millis(600));
        guest_phase.push(guest_bench_share(&guest, 2000));
        unsafe {
            libc::kill(-load_pid, libc::SIGKILL);
            let mut status = 0;
            libc::waitpid(load_pid, &mut status, 0);
        }
        for _ in 0..100 {
            let members =
                std::fs::read_to_string(plugins_group.join("cgroup.procs")).unwrap_or_default();
            if members.trim().is_empty() {
                break;
            }
            for pid in members.lines().filter_map(|l| l.trim().parse::<i32>().ok()) {
                unsafe { libc::kill(pid, libc::SIGKILL) };
            }
            std::thread::sleep(Duration::from_millis(20));
        }

        // sandbox phase
        handle.set_frozen(false)?;
        std::thread::sleep(Duration::from_millis(600));
        sandbox_phase.push(guest_bench_share(&guest, 2000));
        handle.set_frozen(true)?;
    }
    let _ = std::fs::remove_dir(&plugins_group);
    handle.set_frozen(false)?;
    let _ = teardown(&mut handle);

    let bench_with_guest_collectors_share = median_f64(guest_phase.clone());
    let bench_with_sandbox_collectors_share = median_f64(sandbox_phase.clone());
    // Paired per-phase differences in percentage points of the idle share;
    // ambient drift cancels within each pair.
    let paired: Vec<f64> = guest_phase
        .iter()
        .zip(&sandbox_phase)
        .map(|(g, s)| 100.0 * (s - g) / bench_idle_share.max(1e-9))
        .collect();
    let paired_diff_pp = median_f64(paired).abs();

    let _ = guest.teardown();

    let pct = |with: f64, idle: f64| -> f64 { 100.0 * (idle - with) / idle.max(1e-9) };
    let delta_in_guest_pct = pct(bench_with_guest_collectors_share, bench_idle_share);
    let delta_in_sandbox_pct = pct(bench_with_sandbox_collectors_share, bench_idle_share);

    Ok(PerfReport {
        runs: runs.max(10),
        cycles,
        setup_latency_ms,
        setup_median_ms,
        setup_p95_ms,
        cycle_ms_in_guest,
        cycle_ms_in_sandbox,
        cycle_ratio: cycle_ms_in_sandbox / cycle_ms_in_guest,
        sandbox_mem_bytes,
        guest_mem_bytes,
        mem_ratio: sandbox_mem_bytes as f64 / guest_mem_bytes.max(1) as f64,
        bench_idle_share,
        bench_with_guest_collectors_share,
        bench_with_sandbox_collectors_share,
        delta_in_guest_pct,
        delta_in_sandbox_pct,
        delta_diff_pp: paired_diff_pp,
    })
}

/// Convenience wrapper keeping path types out of bin code.
pub fn default_perf_paths() -> (PathBuf, PathBuf) {
    (crate::runtime_dir().join("perf"), crate::sandbox::default_bin_dir())
}
