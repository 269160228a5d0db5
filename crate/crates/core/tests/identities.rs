use ntklab::net::{init_network, Architecture, NetworkParams, WeightDistribution};
use ntklab::ntk::{gradient, hessian_quadratic_form, kernel_on_diagonal, sgd_update_kernel};
use ntklab::oracle::{pathsum_realized, OracleCap};
use proptest::prelude::*;

fn arch_strategy() -> impl Strategy<Value = Architecture> {
    (1usize..6, prop::collection::vec(1usize..7, 0..5))
        .prop_map(|(n0, hidden)| Architecture::new(n0, hidden).unwrap())
}

fn setup() -> impl Strategy<Value = (NetworkParams, Vec<f64>, f64)> {
    (arch_strategy(), any::<u64>(), any::<bool>(), 0.05f64..20.0).prop_flat_map(
        |(arch, seed, uniform, c)| {
            let n0 = arch.input_width();
            let dist = if uniform {
                WeightDistribution::Uniform
            } else {
                WeightDistribution::Normal
            };
            let params = init_network(&arch, dist, seed);
            (
                Just(params),
                prop::collection::vec(-3.0f64..3.0, n0),
                Just(c),
            )
        },
    )
}

fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn kernel_splits_into_weight_and_bias_parts((params, x, _) in setup()) {
        let s = kernel_on_diagonal(&params, &x).unwrap();
        prop_assert_eq!(s.k, s.kw + s.kb);
        let g = gradient(&params, &x).unwrap();
        prop_assert!(rel(g.norm_sq(), s.k) <= 1e-12);
        prop_assert!(rel(g.weights_only().norm_sq(), s.kw) <= 1e-12);
    }

    #[test]
    fn homogeneity_in_the_input((params, x, c) in setup()) {
        let s = kernel_on_diagonal(&params, &x).unwrap();
        let cx: Vec<f64> = x.iter().map(|v| c * v).collect();
        let t = kernel_on_diagonal(&params, &cx).unwrap();
        prop_assert!(rel(t.kw, c * c * s.kw) <= 1e-12, "{} vs {}", t.kw, c * c * s.kw);
        prop_assert!(rel(t.kb, s.kb) <= 1e-12);
        prop_assert!(rel(t.output, c * s.output) <= 1e-12);
    }

    #[test]
    fn path_sum_matches_backprop((params, x, _) in setup()) {
        let p = pathsum_realized(&params, &x, &OracleCap::default()).unwrap();
        let s = kernel_on_diagonal(&params, &x).unwrap();
        prop_assert!(rel(p.output, s.output) <= 1e-10 || (p.output - s.output).abs() <= 1e-14);
        prop_assert!(rel(p.kw, s.kw) <= 1e-10, "{} vs {}", p.kw, s.kw);
    }

    #[test]
    fn linearized_update_is_residual_times_quadratic_form((params, x, _) in setup(), target in -2.0f64..2.0) {
        let lambda = 1e-3;
        let u = sgd_update_kernel(&params, &x, target, lambda).unwrap();
        let g = gradient(&params, &x).unwrap();
        let q = hessian_quadratic_form(&params, &x, &g).unwrap();
        prop_assert_eq!(u.quad, q);
        prop_assert!(rel(u.delta_k_lin, -2.0 * lambda * u.residual * q.q) <= 1e-12);
        prop_assert!(rel(q.q, q.ww + 2.0 * q.wb + q.bb) <= 1e-12);
        prop_assert!(q.bb.abs() <= 1e-12 * q.ww.abs().max(1e-300));
    }
}
