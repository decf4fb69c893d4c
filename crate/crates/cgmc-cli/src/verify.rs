//! The `verify` subcommand: runs the exact-kernel invariants matrix
//! (detailed balance, stationarity, factorization, proposal-ratio and
//! mixed-class checks, spectral-gap sandwich) on the library's small-
//! instance grid and reports every violation.

use std::fmt::Write as _;

use cgmc::kernel_analysis::{run_verification_matrix, InstanceReport, GAP_CSV_HEADER};

const TOL: f64 = 1e-12;

pub struct VerifySummary {
    /// One line per instance.
    pub lines: Vec<String>,
    /// Human-readable failures; empty means everything passed.
    pub failures: Vec<String>,
    /// Spectral-gap table for all instances.
    pub gap_csv: String,
}

impl VerifySummary {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn check_value(label: &str, name: &str, value: f64, failures: &mut Vec<String>) {
    if !(value < TOL) {
        failures.push(format!("{label}: {name} = {value:.3e} exceeds {TOL:.0e}"));
    }
}

fn check_instance(report: &InstanceReport, failures: &mut Vec<String>) {
    let label = &report.label;
    check_value(label, "fine detailed balance", report.db_fine, failures);
    check_value(label, "coarse detailed balance", report.db_coarse, failures);
    check_value(label, "two-level detailed balance", report.db_two_level, failures);
    check_value(label, "two-level stationarity", report.stationarity_two_level, failures);
    check_value(label, "factorization residual", report.factorization, failures);
    check_value(label, "proposal ratio deviation", report.b_dev, failures);
    if report.c4_pairs != 0 {
        failures.push(format!("{label}: {} pairs in the mixed class", report.c4_pairs));
    }
    if let Some(s) = &report.splitting {
        check_value(label, "splitting detailed balance", s.db, failures);
        check_value(label, "splitting factorization", s.factorization, failures);
        check_value(label, "splitting proposal ratio", s.b_dev, failures);
        check_value(label, "approximate-target detailed balance", s.db_approximate, failures);
        if s.c4_pairs != 0 {
            failures.push(format!("{label}: {} splitting pairs in the mixed class", s.c4_pairs));
        }
    }
    if !report.gaps.sandwich_ok {
        failures.push(format!(
            "{}: gap sandwich fails ({:.6e} <= {:.6e} <= {:.6e})",
            report.label,
            report.gaps.a_inf * report.gaps.gamma_lo * report.gaps.lambda_c,
            report.gaps.lambda_cg,
            report.gaps.gamma_hi * report.gaps.lambda_c
        ));
    }
}

pub fn run_verify() -> cgmc::Result<VerifySummary> {
    let reports = run_verification_matrix()?;
    let mut lines = Vec::with_capacity(reports.len());
    let mut failures = Vec::new();
    let mut gap_csv = String::from(GAP_CSV_HEADER);
    gap_csv.push('\n');

    for report in &reports {
        let before = failures.len();
        check_instance(report, &mut failures);
        let status = if failures.len() == before { "ok" } else { "FAIL" };
        let mut line = String::new();
        let _ = write!(
            line,
            "{status:<4} {:<28} db {:.1e}/{:.1e}/{:.1e} stat {:.1e} fact {:.1e} gap [{:.4}, {:.4}]",
            report.label,
            report.db_fine,
            report.db_coarse,
            report.db_two_level,
            report.stationarity_two_level,
            report.factorization,
            report.gaps.lambda_c,
            report.gaps.lambda_cg,
        );
        lines.push(line);
        gap_csv.push_str(&report.gaps.csv_row());
        gap_csv.push('\n');
    }

    Ok(VerifySummary { lines, failures, gap_csv })
}
