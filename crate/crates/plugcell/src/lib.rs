//! Host-side runtime that executes untrusted state-extraction plugins against
//! container guests inside a purpose-built sandbox.
//!
//! The sandbox combines private namespaces with selective sharing of the
//! guest's PID and network namespaces, a de-privileged user, a minimal
//! capability set, a seccomp denylist, classid-keyed netfilter rules and
//! cgroup resource limits. Plugins get read-only visibility into guest
//! disk, memory and network state and nothing else.
//!
//! Crate layout follows the runtime's moving parts:
//!
//! * [`policy`] — pure synthesis and validation of [`policy::SandboxPolicy`].
//! * [`seccomp`] — syscall-filter rendering and installation.
//! * [`guest`] — resolving a container id into kernel handles.
//! * [`sandbox`] — building, running and tearing down one sandbox.
//! * [`runner`] — the in-sandbox supervisor driving plugin cycles.
//! * [`collectors`] — the reference plugin set.
//! * [`session`] — host-side attach/detach lifecycle, output validation, emit.
//! * [`harness`] — containment test battery and performance measurements.

pub mod audit;
pub mod clock;
pub mod collectors;
pub mod comm;
pub mod emit;
pub mod events;
pub mod guest;
pub mod harness;
pub mod manifest;
pub mod policy;
pub mod record;
pub mod runner;
pub mod sandbox;
pub mod seccomp;
pub mod session;
pub mod timefmt;

/// Base directory for per-sandbox runtime state (comm dirs, session files).
///
/// Overridable via `PLUGCELL_RUNTIME_DIR` so tests can isolate themselves.
pub fn runtime_dir() -> std::path::PathBuf {
    std::env::var_os("PLUGCELL_RUNTIME_DIR")
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::path::PathBuf::from("/run/plugcell"))
}
