//! Containment test battery and performance harness: runs the attack
//! catalog against disposable fixture guests in guest and sandbox contexts,
//! verifies host-state restoration after every run, and measures setup
//! latency, per-cycle overhead and resource parity.

pub mod attacks;
pub mod equivalence;
pub mod fixture;
pub mod perf;
pub mod snapshot;

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::policy::LocalhostMode;
use crate::sandbox::Ablation;

pub use attacks::{run_attack, AttackName, AttackRun, Outcome, RunContext, Verdict};
pub use fixture::FixtureGuest;

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub base_dir: PathBuf,
    pub bin_dir: PathBuf,
    /// Run only this attack.
    pub only: Option<AttackName>,
    /// Remove one construct and observe which attacks flip.
    pub ablate: Option<Ablation>,
    pub localhost_mode: LocalhostMode,
    /// Also run the guest-context baselines (expected ESCAPED).
    pub guest_baselines: bool,
}

impl SuiteOptions {
    pub fn new(base_dir: PathBuf, bin_dir: PathBuf) -> SuiteOptions {
        SuiteOptions {
            base_dir,
            bin_dir,
            only: None,
            ablate: None,
            localhost_mode: LocalhostMode::BlockAll,
            guest_baselines: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackRow {
    pub attack: String,
    pub expected_blocker: String,
    pub guest_outcome: Option<Outcome>,
    pub sandbox_outcome: Option<Outcome>,
    pub setup_error: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ContainmentReport {
    pub verdicts: Vec<Verdict>,
    pub matrix: Vec<AttackRow>,
    pub restoration_diffs: Vec<String>,
    pub ablation: Option<String>,
}

impl ContainmentReport {
    pub fn sandbox_all_contained(&self) -> bool {
        self.matrix
            .iter()
            .all(|r| r.sandbox_outcome == Some(Outcome::Contained))
    }

    pub fn guest_all_escaped(&self) -> bool {
        self.matrix
            .iter()
            .all(|r| !r.guest_outcome.is_some_and(|o| o == Outcome::Contained))
    }

    /// NDJSON verdicts followed by one summary object.
    pub fn write_ndjson(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        for v in &self.verdicts {
            writeln!(f, "{}", serde_json::to_string(v).map_err(std::io::Error::other)?)?;
        }
        let summary = json!({
            "summary": {
                "matrix": self.matrix,
                "restoration_diffs": self.restoration_diffs,
                "ablation": self.ablation,
                "sandbox_all_contained": self.sandbox_all_contained(),
                "guest_all_escaped": self.guest_all_escaped(),
            }
        });
        writeln!(f, "{summary}")
    }
}

static SUITE_SEQ: std::sync::atomic::AtomicU32 = std::sync::atomic::AtomicU32::new(0);

/// Run one attack in one context against its own disposable guest.
fn run_one(
    attack: AttackName,
    ctx: RunContext,
    opts: &SuiteOptions,
) -> Result<Verdict, attacks::AttackError> {
    let seq = SUITE_SEQ.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
    let label = format!("atk{seq}");
    let mut guest = FixtureGuest::create(&label, &opts.base_dir, &opts.bin_dir)
        .map_err(|e| attacks::AttackError::FixtureSetup(e.to_string()))?;
    let run = AttackRun {
        guest: &guest,
        bin_dir: &opts.bin_dir,
        base_dir: &opts.base_dir,
        ablation: opts.ablate,
        localhost_mode: opts.localhost_mode,
    };
    let verdict = run_attack(attack, ctx, &run);
    let _ = guest.teardown();
    verdict
}

/// The full battery: every catalog attack in sandbox context, plus
/// guest-context baselines; strictly sequential. Per-attack setup failures
/// are recorded and the suite continues.
pub fn run_suite(opts: &SuiteOptions) -> std::io::Result<ContainmentReport> {
    crate::sandbox::cgroup::ensure_host_ready()?;
    let pre = snapshot::capture()?;

    let mut report = ContainmentReport {
        ablation: opts.ablate.map(|a| format!("{a:?}")),
        ..Default::default()
    };
    let attacks: Vec<AttackName> = match opts.only {
        Some(one) => vec![one],
        None => AttackName::ALL.to_vec(),
    };

    for attack in attacks {
        let mut row = AttackRow {
            attack: attack.as_str().to_string(),
            expected_blocker: attack.expected_blocker().to_string(),
            guest_outcome: None,
            sandbox_outcome: None,
            setup_error: None,
        };
        if opts.guest_baselines {
            match run_one(attack, RunContext::Guest, opts) {
                Ok(v) => {
                    row.guest_outcome = Some(v.outcome);
                    report.verdicts.push(v);
                }
                Err(e) => row.setup_error = Some(format!("guest: {e}")),
            }
        }
        match run_one(attack, RunContext::Sandbox, opts) {
            Ok(v) => {
                row.sandbox_outcome = Some(v.outcome);
                report.verdicts.push(v);
            }
            Err(e) => {
                let prior = row.setup_error.take().map(|p| format!("{p}; ")).unwrap_or_default();
                row.setup_error = Some(format!("{prior}sandbox: {e}"));
            }
        }
        report.matrix.push(row);
    }

    let post = snapshot::capture()?;
    report.restoration_diffs = pre.diff(&post);
    Ok(report)
}
