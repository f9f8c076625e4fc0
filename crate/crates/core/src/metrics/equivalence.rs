use serde::{Deserialize, Serialize};

use super::{dormancy_index, magi, overlap_masks, OverlapReport};
use crate::error::Result;
use crate::nn::{Activation, MlpNetwork};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    /// Dormant on the batch, yet its incoming weights receive gradient.
    DormantWithGradient,
    /// No incoming gradient and at least one zero activation, yet active
    /// somewhere on the batch.
    ZeroGradientButActive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub neuron: usize,
    pub kind: ViolationKind,
    /// Every batch preactivation of the neuron was strictly negative (ReLU
    /// layers only).
    pub strictly_negative: bool,
    /// The neuron is active only on rows whose layer input is entirely zero,
    /// so its incoming weights cannot receive gradient however active it is.
    pub zero_input_only: bool,
}

impl Violation {
    /// Whether the violation contradicts the exact-threshold equivalence.
    /// Dormant neurons count only when strictly negative; zero-gradient
    /// neurons count unless their activity comes from all-zero input rows.
    pub fn in_exact_scope(&self) -> bool {
        match self.kind {
            ViolationKind::DormantWithGradient => self.strictly_negative,
            ViolationKind::ZeroGradientButActive => !self.zero_input_only,
        }
    }
}

/// Comparison of the dormant set with the zero-gradient set of a layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub layer_index: usize,
    pub dormant_mask: Vec<bool>,
    pub zero_grad_mask: Vec<bool>,
    pub overlap: OverlapReport,
    pub violations: Vec<Violation>,
    /// Neurons whose preactivations were strictly negative on every row.
    pub strictly_negative: Vec<bool>,
    pub degenerate: bool,
}

impl EquivalenceReport {
    /// Violations that contradict the exact-threshold claim (see
    /// [`Violation::in_exact_scope`]).
    pub fn exact_scope_violations(&self) -> impl Iterator<Item = &Violation> {
        self.violations.iter().filter(|v| v.in_exact_scope())
    }
}

/// Checks the batch form of the dormancy / zero-gradient equivalence for one
/// layer:
///
/// * dormant (`score ≤ τ_d`) should imply `MAGI ≤ τ_g`;
/// * `MAGI ≤ τ_g` together with some activation `|h| ≤ τ_d` should imply
///   dormant.
///
/// At `τ_d = τ_g = 0` both directions are exact statements about the batch.
pub fn equivalence_check(
    net: &MlpNetwork,
    batch: &Tensor,
    layer_index: usize,
    tau_d: f64,
    tau_g: f64,
) -> Result<EquivalenceReport> {
    let layer = net.layer(layer_index)?;
    let input = net.layer_input(batch, layer_index)?;
    let pre = layer.preactivate(&input)?;
    let act = pre.map(|z| layer.activation.apply(z));
    let dormancy = dormancy_index(layer_index, &act, tau_d)?;
    let grad = magi(net, batch, layer_index, tau_g)?;

    let h = layer.n_out;
    let n = act.rows();
    let mut strictly_negative = vec![layer.activation == Activation::Relu; h];
    let mut has_zero_activation = vec![false; h];
    let mut zero_input_only = vec![true; h];
    for k in 0..n {
        let zero_row = input.row(k).iter().all(|&x| x == 0.0);
        for i in 0..h {
            if pre.get(k, i) >= 0.0 {
                strictly_negative[i] = false;
            }
            if act.get(k, i) != 0.0 && !zero_row {
                zero_input_only[i] = false;
            }
            if act.get(k, i).abs() <= tau_d {
                has_zero_activation[i] = true;
            }
        }
    }

    let mut violations = Vec::new();
    for i in 0..h {
        let dormant = dormancy.dormant_mask[i];
        let zero_grad = grad.zero_grad_mask[i];
        if dormant && !zero_grad {
            violations.push(Violation {
                neuron: i,
                kind: ViolationKind::DormantWithGradient,
                strictly_negative: strictly_negative[i],
                zero_input_only: zero_input_only[i],
            });
        } else if zero_grad && has_zero_activation[i] && !dormant {
            violations.push(Violation {
                neuron: i,
                kind: ViolationKind::ZeroGradientButActive,
                strictly_negative: strictly_negative[i],
                zero_input_only: zero_input_only[i],
            });
        }
    }

    Ok(EquivalenceReport {
        layer_index,
        overlap: overlap_masks(&dormancy.dormant_mask, &grad.zero_grad_mask),
        dormant_mask: dormancy.dormant_mask,
        zero_grad_mask: grad.zero_grad_mask,
        violations,
        strictly_negative,
        degenerate: dormancy.degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_network, LayerSpec};

    #[test]
    fn hand_built_dead_neuron() {
        // Neuron 1 has weights (-1, -1) and bias -0.5: dead on positive inputs.
        let l0 = LayerSpec::new(
            Tensor::from_rows(&[[1.0, 0.5], [-1.0, -1.0], [0.2, 0.9]]),
            Tensor::new(vec![3], vec![0.0, -0.5, 0.1]).unwrap(),
            Activation::Relu,
        )
        .unwrap();
        let l1 = LayerSpec::new(
            Tensor::from_rows(&[[1.0, 1.0, 1.0]]),
            Tensor::zeros(vec![1]),
            Activation::Identity,
        )
        .unwrap();
        let net = MlpNetwork::from_layers(vec![l0, l1], 0).unwrap();
        let x = Tensor::from_rows(&[[1.0, 2.0], [0.5, 0.1], [3.0, 0.0]]);
        let r = equivalence_check(&net, &x, 0, 0.0, 0.0).unwrap();
        assert_eq!(r.dormant_mask, vec![false, true, false]);
        assert_eq!(r.zero_grad_mask, vec![false, true, false]);
        assert!(r.violations.is_empty());
        assert_eq!(r.overlap.coefficient, 1.0);
        assert_eq!(r.strictly_negative, vec![false, true, false]);
    }

    #[test]
    fn identity_layer_has_neither_set() {
        let net = init_network(&[3, 4], Activation::Identity, 7).unwrap();
        let x = Tensor::from_rows(&[[1.0, 2.0, 0.5], [0.3, -0.2, 1.0]]);
        let r = equivalence_check(&net, &x, 0, 0.0, 0.0).unwrap();
        assert!(r.dormant_mask.iter().all(|&m| !m));
        assert!(r.zero_grad_mask.iter().all(|&m| !m));
        assert!(r.violations.is_empty());
    }

    #[test]
    fn zero_input_row_breaks_the_converse() {
        // Active only on the all-zero input row (through a positive bias) and
        // silent elsewhere: no incoming-weight gradient, yet not dormant.
        let l0 = LayerSpec::new(
            Tensor::from_rows(&[[-1.0, -1.0]]),
            Tensor::new(vec![1], vec![0.5]).unwrap(),
            Activation::Relu,
        )
        .unwrap();
        let net = MlpNetwork::from_layers(vec![l0], 0).unwrap();
        let x = Tensor::from_rows(&[[0.0, 0.0], [2.0, 2.0]]);
        let r = equivalence_check(&net, &x, 0, 0.0, 0.0).unwrap();
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].kind, ViolationKind::ZeroGradientButActive);
        assert!(!r.violations[0].strictly_negative);
        assert!(r.violations[0].zero_input_only);
        assert_eq!(r.exact_scope_violations().count(), 0);
    }
}
