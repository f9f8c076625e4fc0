use plasticity::gradcheck::{finite_difference_check, min_abs_preactivation};
use plasticity::nn::{init_network_with, LayerSpec};
use plasticity::{Activation, GradTape, MlpNetwork, Tensor};
use proptest::prelude::*;

fn net_strategy(act: Activation) -> impl Strategy<Value = (MlpNetwork, Tensor, Tensor)> {
    (
        1usize..4,
        prop::collection::vec(1usize..5, 1..3),
        1usize..3,
        1usize..5,
        any::<u64>(),
        prop::collection::vec(-1.5f64..1.5, 64),
    )
        .prop_map(move |(d_in, hidden, d_out, n, seed, pool)| {
            let mut widths = vec![d_in];
            widths.extend(&hidden);
            widths.push(d_out);
            let mut acts = vec![act; widths.len() - 1];
            *acts.last_mut().unwrap() = Activation::Identity;
            let mut net = init_network_with(&widths, &acts, seed).unwrap();
            for (k, b) in net.layers.iter_mut().flat_map(|l| l.bias.data_mut().iter_mut()).enumerate() {
                *b = 0.2 * pool[(k * 7 + 3) % pool.len()];
            }
            let x = Tensor::matrix(n, d_in, (0..n * d_in).map(|i| pool[i % pool.len()]).collect()).unwrap();
            let y = Tensor::matrix(n, d_out, (0..n * d_out).map(|i| pool[(i * 5 + 1) % pool.len()]).collect()).unwrap();
            (net, x, y)
        })
}

fn mse_check(net: &MlpNetwork, x: &Tensor, y: &Tensor) -> f64 {
    finite_difference_check(
        net,
        |tape, out| {
            let t = tape.constant(y.clone())?;
            tape.mse(out, t)
        },
        x,
        1e-6,
    )
    .unwrap()
    .max_rel_error
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tanh_gradients_match_finite_differences((net, x, y) in net_strategy(Activation::Tanh)) {
        let err = mse_check(&net, &x, &y);
        prop_assert!(err <= 1e-5, "relative error {err:e}");
    }

    #[test]
    fn relu_gradients_match_away_from_kinks((net, x, y) in net_strategy(Activation::Relu)) {
        prop_assume!(min_abs_preactivation(&net, &x).unwrap() > 1e-3);
        let err = mse_check(&net, &x, &y);
        prop_assert!(err <= 1e-4, "relative error {err:e}");
    }

    #[test]
    fn forward_is_pure((net, x, _) in net_strategy(Activation::Relu)) {
        let before = net.clone();
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        prop_assert_eq!(&net, &before);
        for (p, q) in a.activations.iter().zip(&b.activations) {
            prop_assert!(p.data().iter().zip(q.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
        // The tape forward agrees with the plain forward pass.
        let mut tape = GradTape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let vars = net.forward_on_tape(&mut tape, xv).unwrap();
        prop_assert_eq!(tape.value(vars.output()).data(), a.output().data());
    }

    #[test]
    fn sum_gradient_distributes(
        a in prop::collection::vec(-3.0f64..3.0, 6),
        b in prop::collection::vec(-3.0f64..3.0, 6),
        c in prop::collection::vec(-3.0f64..3.0, 6),
    ) {
        // d/da sum(a * (b + c)) == d/da [sum(a * b) + sum(a * c)] == b + c.
        let t = |v: &Vec<f64>, g: bool| Tensor::matrix(2, 3, v.clone()).unwrap().with_requires_grad(g);
        let mut tape = GradTape::new();
        let (va, vb, vc) = (tape.leaf(t(&a, true)).unwrap(), tape.leaf(t(&b, false)).unwrap(), tape.leaf(t(&c, false)).unwrap());
        let bc = tape.add(vb, vc).unwrap();
        let prod = tape.mul(va, bc).unwrap();
        let s = tape.sum(prod).unwrap();
        let g1 = tape.backward(s).unwrap().get(va).unwrap().to_vec();

        let mut tape = GradTape::new();
        let (va, vb, vc) = (tape.leaf(t(&a, true)).unwrap(), tape.leaf(t(&b, false)).unwrap(), tape.leaf(t(&c, false)).unwrap());
        let p1 = tape.mul(va, vb).unwrap();
        let p2 = tape.mul(va, vc).unwrap();
        let s1 = tape.sum(p1).unwrap();
        let s2 = tape.sum(p2).unwrap();
        let s = tape.add(s1, s2).unwrap();
        let g2 = tape.backward(s).unwrap().get(va).unwrap().to_vec();
        for i in 0..6 {
            prop_assert!((g1[i] - g2[i]).abs() <= 1e-12);
            prop_assert!((g1[i] - (b[i] + c[i])).abs() <= 1e-12);
        }
    }

    #[test]
    fn dead_relu_neurons_get_exactly_zero_gradient(
        w in prop::collection::vec(-1.0f64..1.0, 6),
        x in prop::collection::vec(-1.0f64..1.0, 8),
        dead in 0usize..3,
    ) {
        // Neuron `dead` has a bias far below any reachable preactivation.
        let mut bias = vec![0.1, 0.1, 0.1];
        bias[dead] = -100.0;
        let l0 = LayerSpec::new(Tensor::matrix(3, 2, w).unwrap(), Tensor::new(vec![3], bias).unwrap(), Activation::Relu).unwrap();
        let l1 = LayerSpec::new(Tensor::from_rows(&[[1.0, -2.0, 0.5]]), Tensor::new(vec![1], vec![0.0]).unwrap(), Activation::Identity).unwrap();
        let net = MlpNetwork::from_layers(vec![l0, l1], 0).unwrap();
        let batch = Tensor::matrix(4, 2, x).unwrap();
        let (_, g) = net.gradients(&batch, |tape, out| tape.sum(out)).unwrap();
        prop_assert_eq!(&g.weights[0][dead * 2..dead * 2 + 2], &[0.0, 0.0]);
        prop_assert_eq!(g.biases[0][dead], 0.0);
        // Its outgoing weight sees a zero activation too.
        prop_assert_eq!(g.weights[1][dead], 0.0);
    }
}

#[test]
fn relu_derivative_at_zero_is_zero() {
    let mut tape = GradTape::new();
    let x = tape.leaf(Tensor::matrix(1, 3, vec![-1.0, 0.0, 2.0]).unwrap().with_requires_grad(true)).unwrap();
    let r = tape.relu(x).unwrap();
    let s = tape.sum(r).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[0.0, 0.0, 1.0]);
}

#[test]
fn linear_layer_gradient_matches_closed_form() {
    // d/dW sum(X Wᵀ) = 1ᵀ X for every output row.
    let xs = Tensor::from_rows(&[[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]]);
    let mut tape = GradTape::new();
    let x = tape.constant(xs).unwrap();
    let w = tape.leaf(Tensor::from_rows(&[[0.3, -0.7], [1.0, 2.0]]).with_requires_grad(true)).unwrap();
    let z = tape.linear(x, w, None).unwrap();
    let s = tape.sum(z).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(w).unwrap(), &[4.5, 1.5, 4.5, 1.5]);
}
