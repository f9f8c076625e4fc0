//! Shared oracles for the integration tests.
#![allow(dead_code)]

/// Independent term-by-term evaluation of the 17-feature benchmark target.
/// Terms are summed in reverse order through a table so that any typo in
/// the library's single expression shows up as a mismatch.
pub fn reference_target(x: &[f64; 17]) -> f64 {
    let terms: [(&str, fn(&[f64; 17]) -> f64); 15] = [
        ("2.5 X0", |x| 2.5 * x[0]),
        ("-1.2 X1^2", |x| -1.2 * x[1] * x[1]),
        ("0.8 sin X2", |x| 0.8 * x[2].sin()),
        ("1.5 cos X3", |x| 1.5 * x[3].cos()),
        ("0.7 X4 X5", |x| 0.7 * x[4] * x[5]),
        ("-0.3 X6^3", |x| -0.3 * x[6] * x[6] * x[6]),
        ("exp(-0.1 X7^2)", |x| (-0.1 * x[7] * x[7]).exp()),
        ("1.1 X8", |x| 1.1 * x[8]),
        ("-0.5 X9^2", |x| -0.5 * x[9] * x[9]),
        ("0.9 tanh X10", |x| 0.9 * x[10].tanh()),
        ("0.2 X11^2", |x| 0.2 * x[11] * x[11]),
        ("-0.6 sqrt|X12|", |x| -0.6 * x[12].abs().sqrt()),
        ("0.5 X13 X14", |x| 0.5 * x[13] * x[14]),
        ("-0.4 X15", |x| -0.4 * x[15]),
        ("0.3 X16", |x| 0.3 * x[16]),
    ];
    terms.iter().rev().map(|(_, f)| f(x)).sum()
}

/// Sixteen probes that each switch on a single term of the target: the zero
/// vector plus one probe per term (the two product terms need both of their
/// coordinates). Expected values are written out by hand; the terms that
/// are not exact decimals are spelled as the same left-to-right float
/// expression the target evaluates, so the comparison can be exact.
pub fn single_term_probes() -> Vec<(&'static str, [f64; 17], f64)> {
    let e = |pairs: &[(usize, f64)]| {
        let mut x = [0.0; 17];
        for &(i, v) in pairs {
            x[i] = v;
        }
        x
    };
    // Zero input: only 1.5 cos(0) and exp(0) survive. Terms after the
    // exponential are added to this base.
    let base = 1.5 + 1.0;
    vec![
        ("zero", e(&[]), 2.5),
        ("X0", e(&[(0, 1.0)]), 5.0),
        ("X1", e(&[(1, 2.0)]), -4.8 + 1.5 + 1.0),
        ("X2", e(&[(2, 1.0)]), 0.8 * 1.0f64.sin() + 1.5 + 1.0),
        ("X3", e(&[(3, std::f64::consts::PI)]), 1.5 * std::f64::consts::PI.cos() + 1.0),
        ("X4*X5", e(&[(4, 1.0), (5, 1.0)]), 1.5 + 0.7 + 1.0),
        ("X6", e(&[(6, 2.0)]), -2.4 + 1.5 + 1.0),
        ("X7", e(&[(7, 1.0)]), 1.5 + (-0.1f64).exp()),
        ("X8", e(&[(8, 2.0)]), base + 2.2),
        ("X9", e(&[(9, 2.0)]), -2.0 + 1.5 + 1.0),
        ("X10", e(&[(10, 1.0)]), 1.5 + 1.0 + 0.9 * 1.0f64.tanh()),
        ("X11", e(&[(11, 2.0)]), base + 0.8),
        ("X12", e(&[(12, 4.0)]), base - 1.2),
        ("X13*X14", e(&[(13, 2.0), (14, 3.0)]), base + 3.0),
        ("X15", e(&[(15, 2.0)]), base - 0.8),
        ("X16", e(&[(16, 2.0)]), base + 0.6),
    ]
}
