use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{LabelSpace, Pair};

/// Donor draws per replaced slot before the slot is left unchanged.
pub const MAX_DONOR_RETRIES: usize = 20;

/// A synthesized composition: the attribute stream of `donor_attr` fused
/// with the object stream of `donor_obj`, placed at batch position `slot`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShiftedFeature {
    pub slot: usize,
    pub donor_attr: usize,
    pub donor_obj: usize,
    pub label: Pair,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ShiftPlan {
    pub shifted: Vec<ShiftedFeature>,
    /// Slots that found no valid donor pair within the retry budget.
    pub skipped: usize,
}

/// Picks `⌊ratio·B⌋` distinct slots and, for each, donors `i ≠ j` whose
/// combined label `(attr of i, obj of j)` is a seen pair. Deterministic in
/// `seed`.
pub fn concept_shift(labels: &[Pair], ratio: f64, labelspace: &LabelSpace, seed: u64) -> ShiftPlan {
    let b = labels.len();
    let n = (ratio * b as f64).floor() as usize;
    let mut plan = ShiftPlan::default();
    if n == 0 {
        return plan;
    }
    if b < 2 {
        plan.skipped = n;
        return plan;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slots = sample(&mut rng, b, n.min(b)).into_vec();
    slots.sort_unstable();
    for slot in slots {
        let found = (0..MAX_DONOR_RETRIES).find_map(|_| {
            let i = rng.random_range(0..b);
            let mut j = rng.random_range(0..b - 1);
            if j >= i {
                j += 1;
            }
            let label = Pair::new(labels[i].attr, labels[j].obj);
            labelspace.is_seen(label).then_some(ShiftedFeature {
                slot,
                donor_attr: i,
                donor_obj: j,
                label,
            })
        });
        match found {
            Some(f) => plan.shifted.push(f),
            None => plan.skipped += 1,
        }
    }
    if plan.skipped > 0 {
        log::debug!("concept shift skipped {} of {n} slots", plan.skipped);
    }
    plan
}

/// Composition-stream donors, labels and the regular-row mask after
/// applying a plan to a batch.
pub fn composition_rows(labels: &[Pair], plan: &ShiftPlan) -> (Vec<(usize, usize)>, Vec<Pair>, Vec<bool>) {
    let mut mixes: Vec<(usize, usize)> = (0..labels.len()).map(|i| (i, i)).collect();
    let mut out = labels.to_vec();
    let mut regular = vec![true; labels.len()];
    for f in &plan.shifted {
        mixes[f.slot] = (f.donor_attr, f.donor_obj);
        out[f.slot] = f.label;
        regular[f.slot] = false;
    }
    (mixes, out, regular)
}
