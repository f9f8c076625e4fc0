//! Plasticity metrics computed from network snapshots.
//!
//! All functions here are pure: they read a network and a probe batch and
//! return a report, so they can be evaluated on any snapshot at any time.

mod dormancy;
mod equivalence;
mod magi;
mod overlap;
mod rank;
mod stats;

pub use dormancy::{dormancy_index, dormancy_reports, DormancyReport, DENOMINATOR_FLOOR};
pub use equivalence::{equivalence_check, EquivalenceReport, Violation, ViolationKind};
pub use magi::{magi, magi_with_target, GradientIntensityReport, MagiTarget};
pub use overlap::{overlap, overlap_masks, OverlapReport};
pub use rank::{rank_stats, singular_values, RankStats};
pub use stats::{weight_stats, Moments, WeightStats};

/// Default dormancy threshold τ_d.
pub const DEFAULT_TAU_D: f64 = 0.025;
/// Default absolute MAGI threshold τ_g.
pub const DEFAULT_TAU_G: f64 = 1e-8;
/// Default relative singular-value cutoff δ.
pub const DEFAULT_RANK_DELTA: f64 = 0.01;

/// Indices where `mask` is set.
pub fn mask_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect()
}

pub(crate) fn fraction(mask: &[bool]) -> f64 {
    if mask.is_empty() {
        0.0
    } else {
        mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64
    }
}
