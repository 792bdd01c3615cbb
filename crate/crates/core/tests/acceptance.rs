//! Runs every acceptance criterion at its stated tolerance and prints one
//! PASS/FAIL line per criterion. Run with `--nocapture` to see the lines.

use sidlab::verify::{run_all, VerifyOptions};

#[test]
fn acceptance_criteria() {
    let reports = run_all(&VerifyOptions::new(0).expect("bundled configs")).expect("criteria run");
    for r in &reports {
        println!("{}", r.line());
    }
    let failed: Vec<u8> = reports.iter().filter(|r| !r.passed).map(|r| r.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
