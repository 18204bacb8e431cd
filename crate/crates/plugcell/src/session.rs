//! Host-side attachment lifecycle: resolve the guest, build and validate
//! the policy, create the sandbox, drive the fetch window, pump validated
//! output to the backend, and detach leak-free.
//!
//! The core never executes plugin bytes in its own process: plugins run
//! only behind [`crate::sandbox::exec_runner`], and everything arriving on
//! the comm channel is treated as untrusted input to be parsed, validated
//! and counted.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::comm::{ControlVerb, StatusEvent};
use crate::emit::{check_backend_against_policy, Backend, Emitter};
use crate::events::EventLog;
use crate::guest::{guest_alive, resolve_guest, EngineAdapter, GuestError, GuestTarget};
use crate::manifest::{parse_manifest, render_manifest, PluginManifest};
use crate::policy::{default_policy, validate_policy, PolicyError, PolicyOptions, SandboxPolicy};
use crate::record::{CollectionRecord, RejectReason};
use crate::sandbox::{
    create_sandbox, exec_runner, teardown, BuildError, SandboxConfig, SandboxHandle, SandboxState,
    TeardownReport, SANDBOX_BIN,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Resolving,
    FetchWindow,
    Collecting,
    Stopped,
}

#[derive(Debug, Default, Clone, Copy, Serialize, Deserialize)]
pub struct SessionStats {
    pub cycles: u64,
    pub records: u64,
    pub validation_failures: u64,
    pub throttle_drops: u64,
    pub output_bytes: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum AttachError {
    #[error(transparent)]
    Guest(#[from] GuestError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("policy failed validation:\n{0}")]
    PolicyInvalid(String),
    #[error("manifest rejected: {0}")]
    ManifestRejected(String),
    #[error("backend rejected: {0}")]
    BackendRejected(String),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error("fetch window deadline expired after {0}s")]
    FetchDeadline(u64),
    #[error("runner failed to start: {0}")]
    RunnerStart(String),
}

impl AttachError {
    /// CLI exit code: 2 = validation failure, 3 = build failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            AttachError::PolicyInvalid(_)
            | AttachError::ManifestRejected(_)
            | AttachError::BackendRejected(_)
            | AttachError::Policy(_) => 2,
            AttachError::Build(_) | AttachError::Guest(_) | AttachError::FetchDeadline(_) => 3,
            AttachError::RunnerStart(_) => 3,
        }
    }
}

/// Everything `attach` needs beyond the guest identity.
pub struct AttachOptions {
    pub policy_opts: PolicyOptions,
    /// Pre-built policy (e.g. from `--policy <file>`); skips synthesis.
    pub policy: Option<SandboxPolicy>,
    pub plugins_file: Option<PathBuf>,
    /// `file:<dir>` or `http:<host:port>`; default file backend under the
    /// runtime directory.
    pub backend: Option<String>,
    pub fetch_deadline_s: u64,
    pub emit_limit_per_s: u64,
    /// Runner stopped once the output file exceeds this (volume containment
    /// defense in depth on top of the blkio limit).
    pub max_output_bytes: u64,
    pub sandbox: SandboxConfig,
}

impl Default for AttachOptions {
    fn default() -> Self {
        AttachOptions {
            policy_opts: PolicyOptions::default(),
            policy: None,
            plugins_file: None,
            backend: None,
            fetch_deadline_s: 60,
            emit_limit_per_s: 1000,
            max_output_bytes: 100 << 20,
            sandbox: SandboxConfig::default(),
        }
    }
}

/// In-rootfs manifest location consulted before `--plugins-file`.
pub const GUEST_MANIFEST_PATH: &str = ".plugcell/plugins-to-run";

/// Stateful output validator: schema checks per line plus per-stream
/// timestamp monotonicity. A stream is one (namespace, feature type) pair.
#[derive(Default)]
pub struct Validator {
    last_ts: BTreeMap<(String, String), i64>,
}

impl Validator {
    /// Total over arbitrary bytes: every input is either an accepted record
    /// or a typed rejection.
    pub fn validate_output(&mut self, line: &[u8]) -> Result<CollectionRecord, RejectReason> {
        let rec = crate::record::validate_line(line)?;
        let ts = rec.timestamp_ms().unwrap_or(0);
        let key = (
            rec.namespace_label.clone(),
            serde_json::to_string(&rec.feature_type).unwrap_or_default(),
        );
        if let Some(prev) = self.last_ts.get(&key) {
            if ts < *prev {
                return Err(RejectReason::NonMonotoneTimestamp {
                    stream: format!("{}/{}", key.0, key.1.trim_matches('"')),
                });
            }
        }
        self.last_ts.insert(key, ts);
        Ok(rec)
    }
}

pub struct AttachmentSession {
    pub session_id: String,
    pub guest: GuestTarget,
    pub policy: SandboxPolicy,
    pub phase: Phase,
    pub stats: SessionStats,
    sandbox: SandboxHandle,
    validator: Validator,
    emitter: Emitter,
    output_offset: u64,
    status_offset: u64,
    runner_stopped: bool,
    max_output_bytes: u64,
    events: Arc<EventLog>,
    clock: Arc<dyn Clock>,
}

fn discover_manifest(
    guest: &GuestTarget,
    plugins_file: &Option<PathBuf>,
) -> Result<PluginManifest, AttachError> {
    let in_rootfs = guest.rootfs_path.join(GUEST_MANIFEST_PATH);
    let bytes = if in_rootfs.is_file() {
        std::fs::read(&in_rootfs).map_err(|e| AttachError::ManifestRejected(e.to_string()))?
    } else if let Some(file) = plugins_file {
        std::fs::read(file).map_err(|e| AttachError::ManifestRejected(e.to_string()))?
    } else {
        Vec::new()
    };
    parse_manifest(&bytes).map_err(|e| AttachError::ManifestRejected(e.to_string()))
}

/// Resolve, build, sandbox, fetch and start collecting. On any failure the
/// partially built sandbox is torn down before the error propagates.
pub fn attach(
    container_id: &str,
    adapter: &dyn EngineAdapter,
    opts: AttachOptions,
    events: Arc<EventLog>,
    clock: Arc<dyn Clock>,
) -> Result<AttachmentSession, AttachError> {
    events.log("attach.resolving", serde_json::json!({"guest": container_id}));
    let guest = resolve_guest(container_id, adapter)?;

    let policy = match opts.policy.clone() {
        Some(p) => p,
        None => default_policy(&guest, &opts.policy_opts)?,
    };
    let report = validate_policy(&policy);
    if !report.is_valid() {
        return Err(AttachError::PolicyInvalid(report.to_string()));
    }

    let manifest = discover_manifest(&guest, &opts.plugins_file)?;

    let mut sandbox = create_sandbox(&guest, &policy, &opts.sandbox)?;
    let session_id = sandbox.sandbox_id.clone();

    let backend = match &opts.backend {
        Some(spec) => Backend::parse(spec, &session_id).map_err(AttachError::BackendRejected)?,
        None => Backend::file(&opts.sandbox.base_dir.join("backend"), &session_id)
            .map_err(|e| AttachError::BackendRejected(e.to_string()))?,
    };
    if let Err(e) = check_backend_against_policy(&backend, policy.backend_endpoint) {
        let _ = teardown(&mut sandbox);
        return Err(AttachError::BackendRejected(e.to_string()));
    }

    let setup = start_runner_and_fetch(&mut sandbox, &guest, &manifest, &opts, &events, &clock);
    let status_offset = match setup {
        Ok(offset) => offset,
        Err(e) => {
            let _ = teardown(&mut sandbox);
            return Err(e);
        }
    };

    events.log("attach.collecting", serde_json::json!({"session": session_id}));
    Ok(AttachmentSession {
        session_id,
        guest,
        policy,
        phase: Phase::Collecting,
        stats: SessionStats::default(),
        sandbox,
        validator: Validator::default(),
        emitter: Emitter::new(backend, opts.emit_limit_per_s, clock.clone()),
        output_offset: 0,
        status_offset,
        runner_stopped: false,
        max_output_bytes: opts.max_output_bytes,
        events,
        clock,
    })
}

/// Deliver the manifest, open the fetch window, start the runner, and wait
/// for fetch completion under the hard deadline. Returns the status-file
/// offset already consumed.
fn start_runner_and_fetch(
    sandbox: &mut SandboxHandle,
    guest: &GuestTarget,
    manifest: &PluginManifest,
    opts: &AttachOptions,
    events: &EventLog,
    clock: &Arc<dyn Clock>,
) -> Result<u64, AttachError> {
    let comm = crate::sandbox::open_comm_channel(sandbox)
        .map_err(|e| AttachError::RunnerStart(e.to_string()))?;
    comm.write_manifest(&render_manifest(manifest))
        .map_err(|e| AttachError::RunnerStart(e.to_string()))?;

    events.log(
        "attach.fetch_window",
        serde_json::json!({"session": sandbox.sandbox_id}),
    );
    sandbox.open_fetch_window().map_err(|e| {
        AttachError::Build(BuildError::Failed {
            step: "fetch-window".into(),
            cause: e.to_string(),
        })
    })?;

    let mut env = BTreeMap::new();
    env.insert("PLUGCELL_NAMESPACE_LABEL".to_string(), guest.container_id.clone());
    exec_runner(sandbox, &format!("{SANDBOX_BIN}/plugcell-runner"), &[], &env)
        .map_err(|e| AttachError::RunnerStart(e.to_string()))?;

    // Fetch phase: wait for the runner's completion signal; the hard
    // deadline revokes the firewall exception regardless of signaling.
    let deadline = clock.now_ms() + opts.fetch_deadline_s * 1000;
    let mut status_offset = 0u64;
    let mut fetch_done = false;
    while clock.now_ms() < deadline {
        let comm = crate::sandbox::open_comm_channel(sandbox)
            .map_err(|e| AttachError::RunnerStart(e.to_string()))?;
        let (evs, next) = comm
            .read_status_since(status_offset)
            .map_err(|e| AttachError::RunnerStart(e.to_string()))?;
        status_offset = next;
        for ev in evs {
            match ev {
                StatusEvent::Started { proxy_tid, .. } => {
                    if let Some(tid) = proxy_tid.filter(|t| *t > 0) {
                        let _ = sandbox.exempt_proxy_tid(tid);
                    }
                }
                StatusEvent::FetchComplete { staged } => {
                    events.log(
                        "attach.fetch_complete",
                        serde_json::json!({"staged": staged.len()}),
                    );
                    fetch_done = true;
                }
                StatusEvent::FetchFailed { plugin, cause } => {
                    events.log(
                        "attach.fetch_failed",
                        serde_json::json!({"plugin": plugin, "cause": cause}),
                    );
                }
                _ => {}
            }
        }
        if fetch_done || !sandbox.runner_alive() {
            break;
        }
        clock.sleep(Duration::from_millis(25));
    }
    sandbox.close_fetch_window().map_err(|e| {
        AttachError::Build(BuildError::Failed {
            step: "fetch-window-close".into(),
            cause: e.to_string(),
        })
    })?;
    if !fetch_done {
        return Err(AttachError::FetchDeadline(opts.fetch_deadline_s));
    }
    Ok(status_offset)
}

impl AttachmentSession {
    /// Drain new runner output through validation into the emitter.
    /// Returns the number of lines consumed.
    pub fn pump(&mut self) -> std::io::Result<usize> {
        if self.phase == Phase::Stopped {
            return Ok(0);
        }
        let comm = crate::sandbox::open_comm_channel(&self.sandbox)?;
        let (lines, next) = comm.read_output_since(self.output_offset)?;
        self.output_offset = next;
        self.stats.output_bytes = next;

        let mut accepted = Vec::new();
        for line in &lines {
            match self.validator.validate_output(line) {
                Ok(rec) => accepted.push(rec),
                Err(reason) => {
                    self.stats.validation_failures += 1;
                    self.events.log(
                        "output.rejected",
                        serde_json::json!({"reason": format!("{reason:?}")}),
                    );
                }
            }
        }
        self.stats.records += accepted.len() as u64;
        let emit_stats = self.emitter.emit(&accepted);
        self.stats.throttle_drops = emit_stats.throttle_drops;

        let (status_events, soff) = comm.read_status_since(self.status_offset)?;
        self.status_offset = soff;
        for ev in status_events {
            if let StatusEvent::CycleComplete { .. } = ev {
                self.stats.cycles += 1;
            }
        }

        if self.output_offset > self.max_output_bytes && !self.runner_stopped {
            self.events.log(
                "output.cap_exceeded",
                serde_json::json!({"bytes": self.output_offset}),
            );
            let _ = comm.send_control(ControlVerb::Stop);
            self.runner_stopped = true;
        }
        Ok(lines.len())
    }

    pub fn guest_alive(&self) -> bool {
        guest_alive(&self.guest)
    }

    pub fn sandbox(&self) -> &SandboxHandle {
        &self.sandbox
    }

    pub fn sandbox_mut(&mut self) -> &mut SandboxHandle {
        &mut self.sandbox
    }

    pub fn send_run_once(&self) -> std::io::Result<()> {
        crate::sandbox::open_comm_channel(&self.sandbox)?.send_control(ControlVerb::RunOnce)
    }

    /// Wait until the runner has completed at least `n` cycle batches.
    pub fn wait_for_cycles(&mut self, n: u64, timeout: Duration) -> bool {
        let deadline = self.clock.now_ms() + timeout.as_millis() as u64;
        while self.clock.now_ms() < deadline {
            let _ = self.pump();
            if self.stats.cycles >= n {
                return true;
            }
            self.clock.sleep(Duration::from_millis(25));
        }
        false
    }
}

/// Stop collection, drain, tear down, log final stats. Idempotent.
pub fn detach(session: &mut AttachmentSession) -> TeardownReport {
    if session.phase == Phase::Stopped {
        return TeardownReport {
            nothing_to_do: true,
            ..Default::default()
        };
    }
    if session.sandbox.state != SandboxState::TornDown {
        if let Ok(comm) = crate::sandbox::open_comm_channel(&session.sandbox) {
            let _ = comm.send_control(ControlVerb::Stop);
        }
        // Bounded drain: give the runner a moment to flush, keep pumping.
        let deadline = session.clock.now_ms() + 5_000;
        while session.clock.now_ms() < deadline {
            let _ = session.pump();
            let stopped = {
                let comm = match crate::sandbox::open_comm_channel(&session.sandbox) {
                    Ok(c) => c,
                    Err(_) => break,
                };
                comm.read_status_since(0)
                    .map(|(evs, _)| evs.iter().any(|e| matches!(e, StatusEvent::Stopped { .. })))
                    .unwrap_or(false)
            };
            if stopped || !session.sandbox.runner_alive() {
                let _ = session.pump();
                break;
            }
            session.clock.sleep(Duration::from_millis(25));
        }
    }
    session.emitter.flush();
    let report = teardown(&mut session.sandbox);
    session.phase = Phase::Stopped;
    session.events.log(
        "detach.done",
        serde_json::json!({
            "session": session.session_id,
            "stats": session.stats,
            "teardown": report.actions.len(),
        }),
    );
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validator_accepts_then_rejects_backwards_time() {
        let mut v = Validator::default();
        let mk = |ts: &str| {
            format!(
                r#"{{"namespace_label":"g","feature_type":"metric","feature_key":"m","timestamp":"{ts}","cycle":0,"payload":{{}}}}"#
            )
        };
        assert!(v.validate_output(mk("2024-01-01T00:00:01Z").as_bytes()).is_ok());
        assert!(v.validate_output(mk("2024-01-01T00:00:01Z").as_bytes()).is_ok());
        assert!(matches!(
            v.validate_output(mk("2024-01-01T00:00:00Z").as_bytes()),
            Err(RejectReason::NonMonotoneTimestamp { .. })
        ));
        // Independent streams do not interfere.
        let other = r#"{"namespace_label":"h","feature_type":"metric","feature_key":"m","timestamp":"2023-01-01T00:00:00Z","cycle":0,"payload":{}}"#;
        assert!(v.validate_output(other.as_bytes()).is_ok());
    }

    #[test]
    fn validator_is_total_over_garbage() {
        let mut v = Validator::default();
        for junk in [&b"\xff\xfe\x00"[..], b"{}", b"[1,2,3]", b"null", b""] {
            assert!(v.validate_output(junk).is_err());
        }
    }

}
