//! Central finite-difference validation of tape gradients.

use crate::autodiff::{GradTape, Var};
use crate::error::{Error, Result};
use crate::nn::MlpNetwork;
use crate::tensor::Tensor;

/// Outcome of [`finite_difference_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |g_ad - g_fd| / max(1, |g_fd|)` over all parameters.
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub num_params: usize,
}

/// Evaluates `loss_fn` on a fresh tape without differentiating.
fn eval_loss<F>(net: &MlpNetwork, batch: &Tensor, loss_fn: &F) -> Result<f64>
where
    F: Fn(&mut GradTape, Var) -> Result<Var>,
{
    let mut tape = GradTape::new();
    let x = tape.constant(batch.clone())?;
    let vars = net.forward_on_tape(&mut tape, x)?;
    let loss = loss_fn(&mut tape, vars.output())?;
    let v = tape.value(loss);
    if v.len() != 1 {
        return Err(Error::NotScalar(v.shape().to_vec()));
    }
    Ok(v.data()[0])
}

/// Compares the tape gradient of `loss_fn(net(batch))` with central finite
/// differences of step `epsilon` for every weight and bias.
pub fn finite_difference_check<F>(
    net: &MlpNetwork,
    loss_fn: F,
    batch: &Tensor,
    epsilon: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut GradTape, Var) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {epsilon}")));
    }
    let base = eval_loss(net, batch, &loss_fn)?;
    let again = eval_loss(net, batch, &loss_fn)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic(base, again));
    }

    let (_, grads) = net.gradients(batch, |t, out| loss_fn(t, out))?;
    let analytic: Vec<f64> = flat_in_param_order(net, &grads);

    let mut probe = net.clone();
    let mut worst = (0.0f64, 0usize);
    let n = analytic.len();
    for idx in 0..n {
        let orig = *nth_param(&mut probe, idx);
        *nth_param(&mut probe, idx) = orig + epsilon;
        let up = eval_loss(&probe, batch, &loss_fn)?;
        *nth_param(&mut probe, idx) = orig - epsilon;
        let down = eval_loss(&probe, batch, &loss_fn)?;
        *nth_param(&mut probe, idx) = orig;
        let fd = (up - down) / (2.0 * epsilon);
        let err = (analytic[idx] - fd).abs() / fd.abs().max(1.0);
        if err > worst.0 || idx == 0 {
            worst = (err, idx);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_param: worst.1,
        num_params: n,
    })
}

/// Gradients flattened in the same order as [`MlpNetwork::params`].
fn flat_in_param_order(net: &MlpNetwork, grads: &crate::nn::NetGrads) -> Vec<f64> {
    let mut out = Vec::with_capacity(net.num_params());
    for k in 0..net.layers.len() {
        out.extend_from_slice(&grads.weights[k]);
        out.extend_from_slice(&grads.biases[k]);
    }
    out
}

fn nth_param(net: &mut MlpNetwork, idx: usize) -> &mut f64 {
    net.params_mut().nth(idx).expect("parameter index in range")
}

/// Smallest `|preactivation|` over all layers and rows; ReLU kinks make the
/// finite-difference comparison meaningless when this is tiny.
pub fn min_abs_preactivation(net: &MlpNetwork, batch: &Tensor) -> Result<f64> {
    let out = net.forward(batch)?;
    Ok(out
        .preactivations
        .iter()
        .zip(&net.layers)
        .filter(|(_, l)| l.activation == crate::nn::Activation::Relu)
        .flat_map(|(z, _)| z.data().iter().map(|v| v.abs()))
        .fold(f64::INFINITY, f64::min))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_network, Activation, LayerSpec};

    fn two_param_net() -> MlpNetwork {
        let layer = LayerSpec::new(
            Tensor::from_rows(&[[0.7]]),
            Tensor::new(vec![1], vec![-0.3]).unwrap(),
            Activation::Identity,
        )
        .unwrap();
        MlpNetwork::from_layers(vec![layer], 0).unwrap()
    }

    #[test]
    fn quadratic_loss_agrees() {
        let net = two_param_net();
        let x = Tensor::from_rows(&[[1.0], [2.0], [-0.5]]);
        let target = Tensor::from_rows(&[[0.0], [1.0], [2.0]]);
        let report = finite_difference_check(
            &net,
            |t, out| {
                let y = t.constant(target.clone())?;
                t.mse(out, y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(report.num_params, 2);
        assert!(report.max_rel_error <= 1e-5, "{report:?}");
    }

    #[test]
    fn linear_loss_is_exact_up_to_rounding() {
        let net = init_network(&[3, 2], Activation::Identity, 5).unwrap();
        let x = Tensor::from_rows(&[[1.0, 2.0, 3.0], [0.5, -1.0, 0.25]]);
        let report = finite_difference_check(&net, |t, out| t.sum(out), &x, 1e-3).unwrap();
        assert!(report.max_rel_error < 1e-10, "{report:?}");
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let net = init_network(&[3, 2], Activation::Relu, 5).unwrap();
        let x = Tensor::from_rows(&[[1.0, 2.0, 3.0]]);
        let (_, grads) = net
            .gradients(&x, |t, _| t.constant(Tensor::scalar(4.0)))
            .unwrap();
        assert!(grads.iter().all(|&g| g == 0.0));
        let report = finite_difference_check(
            &net,
            |t, _| t.constant(Tensor::scalar(4.0)),
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn nondeterministic_loss_is_detected() {
        use std::cell::Cell;
        let net = two_param_net();
        let x = Tensor::from_rows(&[[1.0]]);
        let calls = Cell::new(0.0);
        let r = finite_difference_check(
            &net,
            |t, out| {
                calls.set(calls.get() + 1.0);
                let s = t.sum(out)?;
                t.add_scalar(s, calls.get())
            },
            &x,
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonDeterministic(..))));
    }

    #[test]
    fn rejects_nonpositive_epsilon() {
        let net = two_param_net();
        let x = Tensor::from_rows(&[[1.0]]);
        assert!(finite_difference_check(&net, |t, o| t.sum(o), &x, 0.0).is_err());
    }
}
