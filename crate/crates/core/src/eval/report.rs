use std::fmt::Write as _;
use std::path::Path;

use super::metrics::{CurvePoint, EvalReport};
use crate::data::World;
use crate::error::{Error, Result};

/// Fraction as a percentage with one decimal, ties to even.
pub fn percent(x: f64) -> String {
    format!("{:.1}", (x * 1000.0).round_ties_even() / 10.0)
}

/// `bias,seen_acc,unseen_acc` lines, sentinels written as `-inf` / `inf`.
pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("bias,seen_acc,unseen_acc\n");
    for p in curve {
        writeln!(out, "{},{},{}", p.bias, p.seen, p.unseen).expect("write to string");
    }
    out
}

/// `key = value` lines with raw fractions.
pub fn report_text(report: &EvalReport, world: World, candidate_count: usize) -> String {
    format!(
        "auc = {}\nbest_hm = {}\nbest_seen = {}\nbest_unseen = {}\nseen_top1 = {}\nunseen_top1 = {}\nworld = {}\ncandidate_count = {}\n",
        report.auc,
        report.best_hm,
        report.best_seen,
        report.best_unseen,
        report.seen_top1,
        report.unseen_top1,
        world.as_str(),
        candidate_count
    )
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_curve(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    write(path, &curve_csv(curve))
}

pub fn write_report(path: &Path, report: &EvalReport, world: World, candidate_count: usize) -> Result<()> {
    write(path, &report_text(report, world, candidate_count))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percent_rounds_half_to_even() {
        assert_eq!(percent(0.0625), "6.2");
        assert_eq!(percent(0.1875), "18.8");
        assert_eq!(percent(0.5), "50.0");
    }

    #[test]
    fn sentinel_serialization() {
        let c = [
            CurvePoint { bias: f64::NEG_INFINITY, seen: 1.0, unseen: 0.0 },
            CurvePoint { bias: f64::INFINITY, seen: 0.0, unseen: 0.5 },
        ];
        assert_eq!(curve_csv(&c), "bias,seen_acc,unseen_acc\n-inf,1,0\ninf,0,0.5\n");
    }
}
