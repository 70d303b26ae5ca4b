use crate::error::{Error, Result};

/// Dense compatibility scores: one row per test sample, one column per
/// candidate composition.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    col_unseen: Vec<bool>,
    truth: Vec<usize>,
}

impl ScoreMatrix {
    /// `values` is row-major `truth.len() × col_unseen.len()`; `truth[r]` is
    /// the column of row `r`'s label.
    pub fn new(values: Vec<f64>, col_unseen: Vec<bool>, truth: Vec<usize>) -> Result<Self> {
        let (rows, cols) = (truth.len(), col_unseen.len());
        if values.len() != rows * cols {
            return Err(Error::dim("score_matrix", &[values.len()], &[rows, cols]));
        }
        if let Some(r) = truth.iter().position(|&t| t >= cols) {
            return Err(Error::Contract(format!("row {r} labels column {} of {cols}", truth[r])));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "score_matrix" });
        }
        Ok(ScoreMatrix {
            rows,
            cols,
            values,
            col_unseen,
            truth,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn col_unseen(&self) -> &[bool] {
        &self.col_unseen
    }

    pub fn truth(&self) -> &[usize] {
        &self.truth
    }

    pub fn row_unseen(&self, r: usize) -> bool {
        self.col_unseen[self.truth[r]]
    }

    /// Best seen and best unseen column of a row, lowest index on ties.
    pub(crate) fn group_argmax(&self, r: usize) -> (Option<usize>, Option<usize>) {
        let mut best = [None::<usize>; 2];
        for (c, &v) in self.row(r).iter().enumerate() {
            let g = self.col_unseen[c] as usize;
            if best[g].is_none_or(|b| v > self.get(r, b)) {
                best[g] = Some(c);
            }
        }
        (best[0], best[1])
    }

    fn require_both_column_groups(&self) -> Result<()> {
        if !self.col_unseen.iter().any(|&u| u) {
            return Err(Error::Contract("score matrix has no unseen columns".into()));
        }
        if self.col_unseen.iter().all(|&u| u) {
            return Err(Error::Contract("score matrix has no seen columns".into()));
        }
        Ok(())
    }

    fn require_both_row_groups(&self) -> Result<()> {
        let unseen = (0..self.rows).filter(|&r| self.row_unseen(r)).count();
        if unseen == 0 || unseen == self.rows {
            return Err(Error::Contract(format!(
                "evaluation needs seen and unseen samples, got {} seen and {unseen} unseen",
                self.rows - unseen
            )));
        }
        Ok(())
    }
}

/// One point of the bias sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub bias: f64,
    pub seen: f64,
    pub unseen: f64,
}

/// Summary of a sweep. All values are fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub auc: f64,
    pub best_hm: f64,
    pub best_seen: f64,
    pub best_unseen: f64,
    /// Accuracies with no bias applied.
    pub seen_top1: f64,
    pub unseen_top1: f64,
    pub curve: Vec<CurvePoint>,
}

/// Per-row gap `max seen − max unseen`, sorted and deduplicated, with `−∞`
/// and `+∞` appended.
pub fn bias_candidates(m: &ScoreMatrix) -> Result<Vec<f64>> {
    m.require_both_column_groups()?;
    let mut gaps: Vec<f64> = (0..m.rows()).map(|r| row_gap(m, r)).collect();
    gaps.sort_by(f64::total_cmp);
    gaps.dedup();
    let mut out = Vec::with_capacity(gaps.len() + 2);
    out.push(f64::NEG_INFINITY);
    out.extend(gaps);
    out.push(f64::INFINITY);
    Ok(out)
}

fn row_gap(m: &ScoreMatrix, r: usize) -> f64 {
    let (s, u) = m.group_argmax(r);
    m.get(r, s.expect("seen column")) - m.get(r, u.expect("unseen column"))
}

/// Seen and unseen accuracy for each bias. A row predicts its best unseen
/// column when `gap <= bias`, otherwise its best seen column.
pub fn sweep(m: &ScoreMatrix, biases: &[f64]) -> Result<Vec<CurvePoint>> {
    m.require_both_column_groups()?;
    m.require_both_row_groups()?;
    if biases.iter().any(|b| b.is_nan()) || biases.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Contract("bias values must be sorted".into()));
    }
    struct Row {
        gap: f64,
        seen_hit: bool,
        unseen_hit: bool,
        unseen_label: bool,
    }
    let rows: Vec<Row> = (0..m.rows())
        .map(|r| {
            let (s, u) = m.group_argmax(r);
            let (s, u) = (s.expect("seen column"), u.expect("unseen column"));
            Row {
                gap: m.get(r, s) - m.get(r, u),
                seen_hit: s == m.truth()[r],
                unseen_hit: u == m.truth()[r],
                unseen_label: m.row_unseen(r),
            }
        })
        .collect();
    let n_unseen = rows.iter().filter(|r| r.unseen_label).count() as f64;
    let n_seen = rows.len() as f64 - n_unseen;
    Ok(biases
        .iter()
        .map(|&bias| {
            let (mut hs, mut hu) = (0usize, 0usize);
            for r in &rows {
                let hit = if r.gap <= bias { r.unseen_hit } else { r.seen_hit };
                if hit {
                    if r.unseen_label {
                        hu += 1;
                    } else {
                        hs += 1;
                    }
                }
            }
            CurvePoint {
                bias,
                seen: hs as f64 / n_seen,
                unseen: hu as f64 / n_unseen,
            }
        })
        .collect())
}

/// Trapezoidal area under unseen accuracy as a function of seen accuracy,
/// extended to `(0, best unseen)` and `(best seen, 0)`.
pub fn auc(curve: &[CurvePoint]) -> Result<f64> {
    if curve.len() < 2 {
        return Err(Error::Contract(format!("auc needs at least 2 curve points, got {}", curve.len())));
    }
    let mut pts: Vec<(f64, f64)> = curve.iter().map(|p| (p.seen, p.unseen)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let best_seen = pts.iter().map(|p| p.0).fold(0.0, f64::max);
    let best_unseen = pts.iter().map(|p| p.1).fold(0.0, f64::max);
    let mut path = Vec::with_capacity(pts.len() + 2);
    path.push((0.0, best_unseen));
    path.extend(pts);
    path.push((best_seen, 0.0));
    Ok(path
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum())
}

/// `2·s·u / (s + u)`, zero when both are zero.
pub fn harmonic_mean(seen: f64, unseen: f64) -> f64 {
    if seen + unseen == 0.0 {
        0.0
    } else {
        2.0 * seen * unseen / (seen + unseen)
    }
}

pub fn best_hm(curve: &[CurvePoint]) -> f64 {
    curve
        .iter()
        .map(|p| harmonic_mean(p.seen, p.unseen))
        .fold(0.0, f64::max)
}

/// Full protocol: candidates, sweep, area and maxima.
pub fn evaluate(m: &ScoreMatrix) -> Result<EvalReport> {
    let biases = bias_candidates(m)?;
    let curve = sweep(m, &biases)?;
    let zero = sweep(m, &[0.0])?[0];
    Ok(EvalReport {
        auc: auc(&curve)?,
        best_hm: best_hm(&curve),
        best_seen: curve.iter().map(|p| p.seen).fold(0.0, f64::max),
        best_unseen: curve.iter().map(|p| p.unseen).fold(0.0, f64::max),
        seen_top1: zero.seen,
        unseen_top1: zero.unseen,
        curve,
    })
}
