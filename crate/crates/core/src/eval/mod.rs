//! Generalized seen/unseen evaluation: score matrices, the unseen-bias sweep,
//! area under the seen/unseen curve and harmonic mean.

mod metrics;
mod oracle;
mod report;
mod score;

pub use metrics::{
    auc, best_hm, bias_candidates, evaluate, harmonic_mean, sweep, CurvePoint, EvalReport,
    ScoreMatrix,
};
pub use oracle::{oracle_eval, ORACLE_MAX_DIM};
pub use report::{curve_csv, percent, report_text, write_curve, write_report};
pub use score::{score_all, score_features, score_samples, text_features, vision_features};
