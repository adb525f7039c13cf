use std::time::Instant;

use lmii_core::suite::{self, CaseKind};
use lmii_core::Error;

/// Tape op whose backward rule a case exercises most directly.
fn op_of(case: &str) -> &str {
    match case {
        "conv2d_strided" => "conv2d",
        "matmul_broadcast" => "matmul",
        "tokens" => "reshape",
        "resize_bilinear" => "upsample_bilinear",
        other => other,
    }
}

#[test]
fn every_case_passes() {
    let t = Instant::now();
    let results = suite::run_scope("all", None).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let mut failed = Vec::new();
    for r in &results {
        eprintln!(
            "{:<20} {:>10.3e} (tol {:e}, {} entries, {} refined) {:.2}s",
            r.name,
            r.report.max_rel_error(),
            r.report.tolerance,
            r.report.checked(),
            r.report.refined(),
            r.seconds
        );
        if !r.report.passed() {
            failed.push(r.name);
        }
    }
    assert!(failed.is_empty(), "failing: {failed:?}");
    for block in [
        "lfib",
        "cc",
        "cru",
        "flam",
        "transformer",
        "cab",
        "fe",
        "downsample",
        "seghead",
        "network",
    ] {
        assert!(
            results
                .iter()
                .any(|r| r.name == block && r.kind == CaseKind::Block),
            "{block} missing"
        );
    }
    assert!(secs < 600.0, "suite took {secs:.0}s");
}

#[test]
fn linear_ops_use_the_tight_tolerance() {
    for case in suite::registry() {
        let want = if case.linear { 1e-6 } else { 1e-4 };
        assert_eq!(case.tolerance(), want, "{}", case.name);
    }
}

#[test]
fn corrupted_backward_rules_are_caught() {
    for case in suite::select("ops").unwrap() {
        let report = case.run(Some(op_of(case.name))).unwrap();
        assert!(
            !report.passed(),
            "fault in {} went unnoticed",
            op_of(case.name)
        );
    }
    for (block, op) in [
        ("lfib", "channel_shuffle"),
        ("flam", "focused_map"),
        ("cab", "gelu"),
        ("seghead", "concat"),
    ] {
        let case = suite::select(block).unwrap().remove(0);
        assert!(
            !case.run(Some(op)).unwrap().passed(),
            "{op} fault inside {block}"
        );
    }
}

#[test]
fn unknown_scope_lists_the_choices() {
    match suite::select("conv3d") {
        Err(Error::InvalidConfig(v)) => {
            assert!(v[0].contains("channel_shuffle") && v[0].contains("network"))
        }
        other => panic!("{:?}", other.map(|c| c.len())),
    }
    assert_eq!(suite::select("blocks").unwrap().len(), 10);
}
