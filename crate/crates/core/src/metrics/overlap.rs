use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

/// Overlap coefficient `|A ∩ B| / min(|A|, |B|)` between two neuron sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub set_a_size: usize,
    pub set_b_size: usize,
    pub intersection_size: usize,
    pub coefficient: f64,
    /// At least one set was empty; `coefficient` is a convention (1 if both
    /// are empty, 0 otherwise).
    pub degenerate: bool,
}

pub fn overlap<A, B>(set_a: A, set_b: B) -> OverlapReport
where
    A: IntoIterator<Item = usize>,
    B: IntoIterator<Item = usize>,
{
    let a: BTreeSet<usize> = set_a.into_iter().collect();
    let b: BTreeSet<usize> = set_b.into_iter().collect();
    let inter = a.intersection(&b).count();
    let (na, nb) = (a.len(), b.len());
    let (coefficient, degenerate) = match (na, nb) {
        (0, 0) => (1.0, true),
        (0, _) | (_, 0) => (0.0, true),
        _ => (inter as f64 / na.min(nb) as f64, false),
    };
    OverlapReport {
        set_a_size: na,
        set_b_size: nb,
        intersection_size: inter,
        coefficient,
        degenerate,
    }
}

/// Overlap between the set bits of two masks.
pub fn overlap_masks(a: &[bool], b: &[bool]) -> OverlapReport {
    overlap(super::mask_indices(a), super::mask_indices(b))
}
