//! Brute-force reference for the sweep: every pairwise seen/unseen score
//! gap is a threshold, accuracies come from a direct column scan, and the
//! area from the shoelace formula over the resulting staircase.

use super::metrics::{harmonic_mean, CurvePoint, EvalReport, ScoreMatrix};
use crate::error::{Error, Result};

/// Largest row or column count accepted by [`oracle_eval`].
pub const ORACLE_MAX_DIM: usize = 50;

/// Predicted column at `bias`. An unseen column beats a seen one when the
/// seen-minus-unseen gap is at most `bias`; within a group the higher score
/// wins and equal scores keep the lower index.
fn predict(m: &ScoreMatrix, r: usize, bias: f64) -> usize {
    let row = m.row(r);
    let flags = m.col_unseen();
    let mut best = 0;
    for c in 1..row.len() {
        let wins = match (flags[best], flags[c]) {
            (false, true) => row[best] - row[c] <= bias,
            (true, false) => row[c] - row[best] > bias,
            _ => row[c] > row[best],
        };
        if wins {
            best = c;
        }
    }
    best
}

fn accuracies(m: &ScoreMatrix, bias: f64) -> (f64, f64) {
    let (mut hit, mut total) = ([0usize; 2], [0usize; 2]);
    for r in 0..m.rows() {
        let g = m.row_unseen(r) as usize;
        total[g] += 1;
        if predict(m, r, bias) == m.truth()[r] {
            hit[g] += 1;
        }
    }
    (hit[0] as f64 / total[0] as f64, hit[1] as f64 / total[1] as f64)
}

pub fn oracle_eval(m: &ScoreMatrix) -> Result<EvalReport> {
    if m.rows() > ORACLE_MAX_DIM || m.cols() > ORACLE_MAX_DIM {
        return Err(Error::Contract(format!(
            "oracle limited to {ORACLE_MAX_DIM}x{ORACLE_MAX_DIM}, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let flags = m.col_unseen();
    if !flags.iter().any(|&u| u) || flags.iter().all(|&u| u) {
        return Err(Error::Contract("oracle needs seen and unseen columns".into()));
    }
    let n_unseen = (0..m.rows()).filter(|&r| m.row_unseen(r)).count();
    if n_unseen == 0 || n_unseen == m.rows() {
        return Err(Error::Contract("oracle needs seen and unseen samples".into()));
    }

    let mut gaps = Vec::new();
    for r in 0..m.rows() {
        for s in (0..m.cols()).filter(|&c| !flags[c]) {
            for u in (0..m.cols()).filter(|&c| flags[c]) {
                gaps.push(m.get(r, s) - m.get(r, u));
            }
        }
    }
    gaps.sort_by(f64::total_cmp);
    gaps.dedup();
    let mut probes = vec![f64::NEG_INFINITY];
    for (k, &g) in gaps.iter().enumerate() {
        probes.push(g);
        if let Some(&next) = gaps.get(k + 1) {
            probes.push(g + (next - g) / 2.0);
        }
    }
    probes.push(f64::INFINITY);

    let curve: Vec<CurvePoint> = probes
        .iter()
        .map(|&bias| {
            let (seen, unseen) = accuracies(m, bias);
            CurvePoint { bias, seen, unseen }
        })
        .collect();
    let best_seen = curve.iter().map(|p| p.seen).fold(0.0, f64::max);
    let best_unseen = curve.iter().map(|p| p.unseen).fold(0.0, f64::max);

    // Closed polygon: origin, up the unseen axis, along the staircase, back
    // along the seen axis.
    let mut stair: Vec<(f64, f64)> = curve.iter().map(|p| (p.seen, p.unseen)).collect();
    stair.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    stair.dedup();
    let mut poly = vec![(0.0, 0.0), (0.0, best_unseen)];
    poly.extend(stair);
    poly.push((best_seen, 0.0));
    let twice: f64 = (0..poly.len())
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum();
    let (seen_top1, unseen_top1) = accuracies(m, 0.0);
    Ok(EvalReport {
        auc: twice.abs() / 2.0,
        best_hm: curve.iter().map(|p| harmonic_mean(p.seen, p.unseen)).fold(0.0, f64::max),
        best_seen,
        best_unseen,
        seen_top1,
        unseen_top1,
        curve,
    })
}
