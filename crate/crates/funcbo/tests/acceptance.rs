//! Acceptance gate: one test per criterion, each printing a single
//! pass/fail line (visible with `--nocapture`, and in full on failure).
//! Wall-clock budgets are asserted alongside the numeric outcome.

use std::time::Instant;

use funcbo::harness::checks::{self, CriterionResult};

fn gate(result: funcbo::Result<CriterionResult>, budget_s: f64, t0: Instant) {
    let elapsed = t0.elapsed().as_secs_f64();
    let r = result.expect("criterion errored");
    println!(
        "[{}] criterion {:>2}: {} — {} ({elapsed:.2}s, budget {budget_s}s)",
        if r.pass { "PASS" } else { "FAIL" },
        r.id,
        r.name,
        r.detail
    );
    assert!(r.pass, "criterion {} failed: {}", r.id, r.detail);
    assert!(
        elapsed <= budget_s,
        "criterion {} exceeded its {budget_s}s budget ({elapsed:.2}s)",
        r.id
    );
}

#[test]
fn criterion_01_gradient_identity() {
    let t0 = Instant::now();
    gate(checks::criterion_1(), 5.0, t0);
}

#[test]
fn criterion_02_adjoint_convergence() {
    let t0 = Instant::now();
    gate(checks::criterion_2(), 5.0, t0);
}

#[test]
fn criterion_03_projection_identity() {
    let t0 = Instant::now();
    gate(checks::criterion_3(), 5.0, t0);
}

#[test]
fn criterion_04_curvature_distortion() {
    let t0 = Instant::now();
    gate(checks::criterion_4(), 10.0, t0);
}

#[test]
fn criterion_05_bias_decreases_with_budget() {
    let t0 = Instant::now();
    gate(checks::criterion_5(), 60.0, t0);
}

#[test]
fn criterion_06_outer_stationarity() {
    let t0 = Instant::now();
    gate(checks::criterion_6(), 30.0, t0);
}

#[test]
fn criterion_07_instrumented_regression() {
    let t0 = Instant::now();
    gate(checks::criterion_7(), 300.0, t0);
}

#[test]
fn criterion_08_rl_closed_form_adjoint() {
    let t0 = Instant::now();
    gate(checks::criterion_8(), 5.0, t0);
}

#[test]
fn criterion_09_rl_fixed_point_and_policy() {
    let t0 = Instant::now();
    gate(checks::criterion_9(), 300.0, t0);
}

#[test]
fn criterion_10_cost_accounting() {
    let t0 = Instant::now();
    gate(checks::criterion_10(), 30.0, t0);
}

#[test]
fn criterion_11_derivative_micro_suite() {
    let t0 = Instant::now();
    gate(checks::criterion_11(), 10.0, t0);
}

#[test]
fn quick_suite_is_the_cheap_subset_and_passes() {
    let t0 = Instant::now();
    let results = checks::run_suite(true);
    let ids: Vec<usize> = results.iter().map(|r| r.id).collect();
    assert_eq!(ids, vec![11, 1, 2, 3]);
    print!("{}", checks::format_results(&results));
    assert!(results.iter().all(|r| r.pass), "quick suite failed");
    let elapsed = t0.elapsed().as_secs_f64();
    assert!(elapsed <= 60.0, "quick suite exceeded 60s ({elapsed:.2}s)");
}
