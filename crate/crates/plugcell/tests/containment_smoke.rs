//! Quick containment smoke: one attack per blocking mechanism, both
//! contexts, plus restoration. The full 15-vector battery and the ablation
//! matrix live in the acceptance suite. Requires root.

use std::path::PathBuf;
use std::sync::Mutex;

use plugcell::harness::{run_attack, AttackName, AttackRun, Outcome, RunContext, SuiteOptions};
use plugcell::harness::{fixture::FixtureGuest, snapshot};
use plugcell::policy::LocalhostMode;

static HOST: Mutex<()> = Mutex::new(());

fn root() -> bool {
    unsafe { libc::geteuid() == 0 }
}

fn run_pair(attack: AttackName, base: &PathBuf, bin: &PathBuf) -> (Outcome, Outcome) {
    let mut guest = FixtureGuest::create(&format!("smoke-{}-g", attack.as_str()), base, bin).unwrap();
    let run = AttackRun {
        guest: &guest,
        bin_dir: bin,
        base_dir: base,
        ablation: None,
        localhost_mode: LocalhostMode::BlockAll,
    };
    let guest_verdict = run_attack(attack, RunContext::Guest, &run).unwrap();
    guest.teardown().unwrap();

    let mut guest2 = FixtureGuest::create(&format!("smoke-{}-s", attack.as_str()), base, bin).unwrap();
    let run2 = AttackRun {
        guest: &guest2,
        bin_dir: bin,
        base_dir: base,
        ablation: None,
        localhost_mode: LocalhostMode::BlockAll,
    };
    let sandbox_verdict = run_attack(attack, RunContext::Sandbox, &run2).unwrap();
    guest2.teardown().unwrap();
    eprintln!(
        "{}: guest={:?} sandbox={:?}\n  guest evidence: {}\n  sandbox evidence: {}",
        attack.as_str(),
        guest_verdict.outcome,
        sandbox_verdict.outcome,
        guest_verdict.evidence,
        sandbox_verdict.evidence
    );
    (guest_verdict.outcome, sandbox_verdict.outcome)
}

#[test]
fn disk_memory_and_network_attacks_bifurcate_by_context() {
    if !root() {
        eprintln!("skipping: requires root");
        return;
    }
    let _g = HOST.lock().unwrap();
    plugcell::sandbox::cgroup::ensure_host_ready().unwrap();
    let base = std::env::temp_dir().join(format!("plugcell-smoke-{}", std::process::id()));
    std::fs::create_dir_all(&base).unwrap();
    let bin = plugcell::sandbox::default_bin_dir();

    let pre = snapshot::capture().unwrap();
    for attack in [
        AttackName::RootfsTamper,
        AttackName::SignalKillGuest,
        AttackName::ReverseShellExfil,
    ] {
        let (guest, sandbox) = run_pair(attack, &base, &bin);
        assert_eq!(guest, Outcome::Escaped, "{attack:?} guest baseline");
        assert_eq!(sandbox, Outcome::Contained, "{attack:?} sandboxed");
    }
    let post = snapshot::capture().unwrap();
    let diffs = pre.diff(&post);
    assert!(diffs.is_empty(), "host residue: {diffs:#?}");
    let _ = std::fs::remove_dir_all(&base);
}

#[test]
fn suite_options_single_attack_path_works() {
    if !root() {
        eprintln!("skipping: requires root");
        return;
    }
    let _g = HOST.lock().unwrap();
    let base = std::env::temp_dir().join(format!("plugcell-smoke2-{}", std::process::id()));
    std::fs::create_dir_all(&base).unwrap();
    let mut opts = SuiteOptions::new(base.clone(), plugcell::sandbox::default_bin_dir());
    opts.only = Some(AttackName::DiskPrivescTmpfile);
    let report = plugcell::harness::run_suite(&opts).unwrap();
    assert_eq!(report.matrix.len(), 1);
    assert_eq!(report.matrix[0].sandbox_outcome, Some(Outcome::Contained));
    assert_eq!(report.matrix[0].guest_outcome, Some(Outcome::Escaped));
    assert!(report.restoration_diffs.is_empty(), "{:?}", report.restoration_diffs);
    let ndjson = base.join("report.ndjson");
    report.write_ndjson(&ndjson).unwrap();
    assert!(std::fs::read_to_string(&ndjson).unwrap().lines().count() >= 3);
    let _ = std::fs::remove_dir_all(&base);
}
