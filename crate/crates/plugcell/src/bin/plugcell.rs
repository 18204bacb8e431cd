//! Host-side CLI: attach sandboxed plugin execution to a guest, manage
//! sessions, print/validate policies, and drive the containment/perf suite.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use plugcell::clock::SystemClock;
use plugcell::events::EventLog;
use plugcell::guest::{EngineAdapter, EngineSocketAdapter, FallbackAdapter};
use plugcell::harness;
use plugcell::policy::{
    default_policy, validate_policy, LocalhostMode, PolicyOptions, SandboxPolicy,
};
use plugcell::sandbox::{Ablation, SandboxConfig};
use plugcell::session::{attach, detach, AttachOptions};

#[derive(Parser)]
#[command(name = "plugcell", about = "Sandboxed execution of untrusted state-extraction plugins", version)]
struct Cli {
    /// Machine-readable event log (NDJSON) destination.
    #[arg(long, global = true)]
    event_log: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Attach a plugin sandbox to a running guest and collect until stopped.
    Attach(AttachArgs),
    /// Stop a running attach session by id.
    Detach { session: String },
    /// Policy inspection.
    Policy {
        #[command(subcommand)]
        cmd: PolicyCmd,
    },
    /// Containment and performance batteries.
    Suite {
        #[command(subcommand)]
        cmd: SuiteCmd,
    },
}

#[derive(Args, Clone)]
struct GuestSelector {
    /// Container id, resolved through the engine socket.
    #[arg(long)]
    guest: Option<String>,
    /// Engine-less fallback: the guest's init pid...
    #[arg(long)]
    guest_pid: Option<i32>,
    /// ...and its rootfs path on the host.
    #[arg(long)]
    guest_rootfs: Option<PathBuf>,
    /// Container engine API socket.
    #[arg(long, default_value = "/var/run/docker.sock")]
    engine_socket: PathBuf,
}

impl GuestSelector {
    fn adapter(&self) -> anyhow::Result<(String, Box<dyn EngineAdapter>)> {
        match (&self.guest_pid, &self.guest_rootfs) {
            (Some(pid), Some(rootfs)) => Ok((
                self.guest.clone().unwrap_or_else(|| format!("pid-{pid}")),
                Box::new(FallbackAdapter {
                    init_pid: *pid,
                    rootfs_path: rootfs.clone(),
                }),
            )),
            (None, None) => {
                let id = self
                    .guest
                    .clone()
                    .context("--guest <id> (or --guest-pid/--guest-rootfs) is required")?;
                Ok((
                    id,
                    Box::new(EngineSocketAdapter {
                        socket_path: self.engine_socket.clone(),
                    }),
                ))
            }
            _ => anyhow::bail!("--guest-pid and --guest-rootfs must be given together"),
        }
    }
}

#[derive(Args)]
struct AttachArgs {
    #[command(flatten)]
    selector: GuestSelector,
    /// Manifest file used when the guest rootfs carries none.
    #[arg(long)]
    plugins_file: Option<PathBuf>,
    /// Policy JSON file; defaults are synthesized when absent.
    #[arg(long)]
    policy: Option<PathBuf>,
    /// `file:<dir>` or `http:<host:port>`.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long, value_parser = parse_localhost_mode, default_value = "block")]
    localhost_mode: LocalhostMode,
    #[arg(long, default_value_t = 60)]
    fetch_deadline_s: u64,
    /// Collect for N seconds then detach (0 = until signalled).
    #[arg(long, default_value_t = 0)]
    duration_s: u64,
    #[arg(long)]
    passive_capture: bool,
}

#[derive(Subcommand)]
enum PolicyCmd {
    /// Emit the default policy for a guest as JSON.
    PrintDefault {
        #[command(flatten)]
        selector: GuestSelector,
        #[arg(long, value_parser = parse_localhost_mode, default_value = "block")]
        localhost_mode: LocalhostMode,
        #[arg(long)]
        passive_capture: bool,
        #[arg(long)]
        backend_endpoint: Option<String>,
    },
    /// Validate a policy file; exits 2 on violations.
    Validate {
        #[arg(long)]
        policy: PathBuf,
    },
}

#[derive(Subcommand)]
enum SuiteCmd {
    /// Containment battery over disposable fixture guests.
    Run {
        /// Run a single attack from the catalog.
        #[arg(long)]
        attack: Option<String>,
        /// Remove one construct: seccomp|firewall|cgroup|ro-rootfs.
        #[arg(long)]
        ablate: Option<String>,
        #[arg(long, value_parser = parse_localhost_mode, default_value = "block")]
        localhost_mode: LocalhostMode,
        /// Skip the guest-context baselines.
        #[arg(long)]
        no_baselines: bool,
        /// Write NDJSON verdicts + summary here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Performance measurements.
    Perf {
        #[arg(long, default_value_t = 300)]
        cycles: u64,
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn parse_localhost_mode(s: &str) -> Result<LocalhostMode, String> {
    match s {
        "block" | "block-all" => Ok(LocalhostMode::BlockAll),
        "get-only" | "http-get-only" => Ok(LocalhostMode::HttpGetOnly),
        "allow-all" => Ok(LocalhostMode::AllowAll),
        other => Err(format!("unknown localhost mode `{other}`")),
    }
}

static STOP: AtomicBool = AtomicBool::new(false);

extern "C" fn on_signal(_sig: libc::c_int) {
    STOP.store(true, Ordering::SeqCst);
}

fn install_signal_handlers() {
    let handler = on_signal as *const () as libc::sighandler_t;
    unsafe {
        libc::signal(libc::SIGINT, handler);
        libc::signal(libc::SIGTERM, handler);
    }
}

fn sessions_dir() -> PathBuf {
    plugcell::runtime_dir().join("sessions")
}

fn main() {
    let cli = Cli::parse();
    let events = Arc::new(match &cli.event_log {
        Some(path) => EventLog::file(path).unwrap_or_else(|e| {
            eprintln!("event log {}: {e}", path.display());
            std::process::exit(1);
        }),
        None => EventLog::stderr(),
    });
    let code = match run(cli, events) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli, events: Arc<EventLog>) -> anyhow::Result<i32> {
    match cli.command {
        Command::Attach(args) => cmd_attach(args, events),
        Command::Detach { session } => cmd_detach(&session),
        Command::Policy { cmd } => cmd_policy(cmd),
        Command::Suite { cmd } => cmd_suite(cmd),
    }
}

fn cmd_attach(args: AttachArgs, events: Arc<EventLog>) -> anyhow::Result<i32> {
    let (container_id, adapter) = args.selector.adapter()?;

    let policy: Option<SandboxPolicy> = match &args.policy {
        Some(path) => {
            let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let policy: SandboxPolicy = match serde_json::from_slice(&bytes) {
                Ok(p) => p,
                Err(e) => {
                    eprintln!("policy file rejected: {e}");
                    return Ok(2);
                }
            };
            let report = validate_policy(&policy);
            if !report.is_valid() {
                eprint!("{report}");
                return Ok(2);
            }
            Some(policy)
        }
        None => None,
    };

    let opts = AttachOptions {
        policy_opts: PolicyOptions {
            localhost_mode: args.localhost_mode,
            passive_capture: args.passive_capture,
            ..Default::default()
        },
        policy,
        plugins_file: args.plugins_file.clone(),
        backend: args.backend.clone(),
        fetch_deadline_s: args.fetch_deadline_s,
        ..Default::default()
    };

    let clock = Arc::new(SystemClock);
    let mut session = match attach(&container_id, adapter.as_ref(), opts, events.clone(), clock) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("attach failed: {e}");
            return Ok(e.exit_code());
        }
    };

    // Session registry entry so `plugcell detach <id>` can find us.
    let dir = sessions_dir();
    std::fs::create_dir_all(&dir)?;
    let session_file = dir.join(format!("{}.json", session.session_id));
    std::fs::write(
        &session_file,
        serde_json::to_vec(&serde_json::json!({
            "session": session.session_id,
            "pid": std::process::id(),
            "guest": container_id,
        }))?,
    )?;
    println!("{}", session.session_id);

    install_signal_handlers();
    let deadline = (args.duration_s > 0)
        .then(|| std::time::Instant::now() + Duration::from_secs(args.duration_s));
    while !STOP.load(Ordering::SeqCst) {
        let _ = session.pump();
        if let Some(d) = deadline {
            if std::time::Instant::now() >= d {
                break;
            }
        }
        if !session.guest_alive() {
            events.log("guest.gone", serde_json::json!({"session": session.session_id}));
            break;
        }
        std::thread::sleep(Duration::from_millis(100));
    }
    let report = detach(&mut session);
    let _ = std::fs::remove_file(&session_file);
    events.log(
        "session.final",
        serde_json::json!({"stats": session.stats, "teardown": report}),
    );
    Ok(0)
}

fn cmd_detach(session: &str) -> anyhow::Result<i32> {
    let path = sessions_dir().join(format!("{session}.json"));
    let bytes = std::fs::read(&path)
        .with_context(|| format!("no such session `{session}` (looked at {})", path.display()))?;
    let doc: serde_json::Value = serde_json::from_slice(&bytes)?;
    let pid = doc["pid"].as_i64().unwrap_or(0) as i32;
    if pid <= 0 {
        anyhow::bail!("session file is malformed");
    }
    unsafe { libc::kill(pid, libc::SIGTERM) };
    // Wait for the supervisor to clean up after itself.
    for _ in 0..100 {
        if !path.exists() {
            return Ok(0);
        }
        std::thread::sleep(Duration::from_millis(100));
    }
    eprintln!("supervisor did not confirm; session file left in place");
    Ok(1)
}

fn cmd_policy(cmd: PolicyCmd) -> anyhow::Result<i32> {
    match cmd {
        PolicyCmd::PrintDefault {
            selector,
            localhost_mode,
            passive_capture,
            backend_endpoint,
        } => {
            let (container_id, adapter) = selector.adapter()?;
            let guest = match plugcell::guest::resolve_guest(&container_id, adapter.as_ref()) {
                Ok(g) => g,
                Err(e) => {
                    eprintln!("guest resolution failed: {e}");
                    return Ok(3);
                }
            };
            let opts = PolicyOptions {
                localhost_mode,
                passive_capture,
                backend_endpoint: backend_endpoint
                    .map(|s| s.parse().map_err(|e| anyhow::anyhow!("--backend-endpoint: {e}")))
                    .transpose()?,
                ..Default::default()
            };
            let policy = match default_policy(&guest, &opts) {
                Ok(p) => p,
                Err(e) => {
                    eprintln!("{e}");
                    return Ok(2);
                }
            };
            println!("{}", serde_json::to_string_pretty(&policy)?);
            Ok(0)
        }
        PolicyCmd::Validate { policy } => {
            let bytes = std::fs::read(&policy)?;
            let parsed: SandboxPolicy = match serde_json::from_slice(&bytes) {
                Ok(p) => p,
                Err(e) => {
                    eprintln!("policy file rejected: {e}");
                    return Ok(2);
                }
            };
            let report = validate_policy(&parsed);
            if report.is_valid() {
                println!("policy valid");
                Ok(0)
            } else {
                print!("{report}");
                Ok(2)
            }
        }
    }
}

fn cmd_suite(cmd: SuiteCmd) -> anyhow::Result<i32> {
    match cmd {
        SuiteCmd::Run {
            attack,
            ablate,
            localhost_mode,
            no_baselines,
            report,
        } => {
            let only = match attack {
                Some(name) => Some(
                    harness::AttackName::parse(&name)
                        .with_context(|| format!("unknown attack `{name}`"))?,
                ),
                None => None,
            };
            let ablation: Option<Ablation> = match ablate {
                Some(s) => Some(s.parse().map_err(|e: String| anyhow::anyhow!(e))?),
                None => None,
            };
            let mut opts = harness::SuiteOptions::new(
                plugcell::runtime_dir().join("suite"),
                SandboxConfig::default().bin_dir,
            );
            opts.only = only;
            opts.ablate = ablation;
            opts.localhost_mode = localhost_mode;
            opts.guest_baselines = !no_baselines;

            let result = harness::run_suite(&opts)?;
            for row in &result.matrix {
                println!(
                    "{:<22} guest={:<9} sandbox={:<10} blocker: {}",
                    row.attack,
                    row.guest_outcome.map(|o| format!("{o:?}")).unwrap_or_else(|| "-".into()),
                    row.sandbox_outcome.map(|o| format!("{o:?}")).unwrap_or_else(|| "-".into()),
                    row.expected_blocker,
                );
                if let Some(err) = &row.setup_error {
                    println!("{:<22} setup error: {err}", "");
                }
            }
            if !result.restoration_diffs.is_empty() {
                println!("host state NOT restored:");
                for d in &result.restoration_diffs {
                    println!("  {d}");
                }
            }
            if let Some(path) = report {
                result.write_ndjson(&path)?;
                println!("report written to {}", path.display());
            }
            let ok = result.sandbox_all_contained()
                && (no_baselines || result.guest_all_escaped())
                && result.restoration_diffs.is_empty()
                && result.matrix.iter().all(|r| r.setup_error.is_none());
            Ok(if ok { 0 } else { 2 })
        }
        SuiteCmd::Perf { cycles, runs, report } => {
            let (base, bin) = harness::perf::default_perf_paths();
            let perf = harness::perf::measure_perf(&base, &bin, cycles, runs)?;
            println!(
                "setup: median {:.1} ms, p95 {:.1} ms over {} runs",
                perf.setup_median_ms, perf.setup_p95_ms, perf.runs
            );
            println!(
                "cycle: guest {:.2} ms, sandbox {:.2} ms (ratio {:.2})",
                perf.cycle_ms_in_guest, perf.cycle_ms_in_sandbox, perf.cycle_ratio
            );
            println!(
                "memory after {} cycles: sandbox {} B, guest {} B (ratio {:.2})",
                perf.cycles, perf.sandbox_mem_bytes, perf.guest_mem_bytes, perf.mem_ratio
            );
            println!(
                "benchmark impact: in-guest {:.2}%, in-sandbox {:.2}% (diff {:.2} pp)",
                perf.delta_in_guest_pct, perf.delta_in_sandbox_pct, perf.delta_diff_pp
            );
            if let Some(path) = report {
                std::fs::write(&path, serde_json::to_vec_pretty(&perf)?)?;
                println!("report written to {}", path.display());
            }
            Ok(0)
        }
    }
}
