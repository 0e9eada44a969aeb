//! Finite-difference check of the MADA, DANN and source-only graphs.

use mada::gradcheck::{run, GradCheckConfig};

fn main() -> mada::Result<()> {
    let report = run(&GradCheckConfig::default())?;
    for r in &report.records {
        for g in &r.groups {
            println!("{:<12} seed {} {:<18} {:.3e}", r.algorithm, r.seed, g.group, g.max_relative_error);
        }
    }

    let zero = run(&GradCheckConfig { lambda: 0.0, ..GradCheckConfig::default() })?;
    let leak = zero.records.iter().map(|r| r.feature_domain_grad_max_abs).fold(0.0, f64::max);
    println!("lambda = 0: largest domain gradient reaching the feature extractor {leak}");

    let one = run(&GradCheckConfig { class_count: 1, ..GradCheckConfig::default() })?;
    println!("one class: mada vs dann gradient gap {:.2e}", one.k1_mada_dann_max_diff.unwrap_or(f64::NAN));
    println!("{}", if report.passed { "PASS" } else { "FAIL" });
    Ok(())
}
