//! The release checklist, run end to end in a scratch directory. One line
//! prints per check so a plain `cargo test` shows where time went and what
//! failed. Budgets are generous multiples of observed timings; they exist to
//! catch order-of-magnitude regressions, not scheduler jitter.

use std::io::Write;

use covft_lab::experiment::ExperimentConfig;
use covft_lab::verify;

/// Write through the test harness's output capture so the checklist is
/// visible in a normal `cargo test` run, not only with `--nocapture`.
fn emit(line: &str) {
    let direct = std::fs::OpenOptions::new()
        .append(true)
        .open("/dev/stdout")
        .and_then(|mut f| writeln!(f, "{line}"));
    if direct.is_err() {
        println!("{line}");
    }
}

#[test]
fn release_checklist() {
    let tmp = tempfile::tempdir().unwrap();
    let mut xc = ExperimentConfig::default();
    xc.out = tmp.path().to_path_buf();

    let report = verify::run_all(&xc, |check| emit(&check.line())).unwrap();

    assert_eq!(report.checks.len(), 11, "checklist must cover all eleven checks");
    for (i, check) in report.checks.iter().enumerate() {
        assert_eq!(check.id, i + 1, "checks out of order");
    }

    let failing: Vec<String> =
        report.checks.iter().filter(|c| !c.passed).map(|c| c.line()).collect();
    assert!(failing.is_empty(), "failing checks:\n{}", failing.join("\n"));

    // Per-check wall-clock budgets (seconds), where a check has one.
    let budgets = [(1, 60.0), (2, 30.0), (3, 10.0), (4, 120.0), (5, 300.0), (6, 300.0), (7, 60.0)];
    for (id, limit) in budgets {
        let check = &report.checks[id - 1];
        assert!(
            check.seconds < limit,
            "check {id} took {:.1}s, budget {limit}s",
            check.seconds
        );
    }
    let total: f64 = report.checks.iter().map(|c| c.seconds).sum();
    emit(&format!("checklist total {total:.1}s"));
    assert!(total < 1200.0, "checklist took {total:.1}s, budget 1200s");
}
