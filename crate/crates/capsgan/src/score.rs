//! Score reports as CSV.

use std::fmt::Write;

use capsgan_core::metrics::ScoreReport;

/// `split,score` rows, then a `mean,std` header and its values.
pub fn report_csv(report: &ScoreReport) -> String {
    let mut out = String::from("split,score\n");
    for (i, s) in report.scores.iter().enumerate() {
        let _ = writeln!(out, "{i},{s:.6}");
    }
    let _ = writeln!(out, "mean,std");
    let _ = writeln!(out, "{:.6},{:.6}", report.mean, report.std);
    out
}

/// Mean and std parsed back from [`report_csv`] output.
pub fn parse_report_summary(csv: &str) -> Option<(f64, f64)> {
    let mut lines = csv.lines().skip_while(|l| *l != "mean,std").skip(1);
    let (mean, std) = lines.next()?.split_once(',')?;
    Some((mean.parse().ok()?, std.parse().ok()?))
}
