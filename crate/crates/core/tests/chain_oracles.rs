use ntklab::chain::{
    chain_expectation, chain_expectation_with_window, first_collision_probabilities,
    sandwich_check, window_collision_probability, ChainSpec,
};
use ntklab::net::{Architecture, WeightDistribution};
use num_rational::BigRational;
use num_traits::{One, Zero};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn q(n: i64, d: i64) -> BigRational {
    BigRational::new(n.into(), d.into())
}

/// Sum over every state sequence `s_0..s_d` of probability times factors,
/// optionally restricted to sequences with a collision in `[i1, i2)`.
fn brute(
    spec: &ChainSpec<BigRational>,
    window: Option<(usize, usize)>,
    weighted: bool,
) -> BigRational {
    let d = spec.depth();
    let mut total = BigRational::zero();
    for mask in 0u32..(1 << (d + 1)) {
        let s = |i: usize| (mask >> i) & 1 == 1;
        if let Some((i1, i2)) = window {
            if !(i1..i2).any(s) {
                continue;
            }
        }
        let mut w = BigRational::one();
        for i in 0..=d {
            let p = &spec.collision[i];
            w *= if s(i) {
                p.clone()
            } else {
                BigRational::one() - p
            };
            if weighted && i >= 1 && s(i) {
                w *= &spec.alpha[i - 1];
                if s(i - 1) {
                    w *= &spec.gamma[i - 1];
                }
            }
        }
        total += w;
    }
    total
}

fn random_spec(rng: &mut ChaCha8Rng, d: usize) -> ChainSpec<BigRational> {
    let mut p: Vec<BigRational> = (0..d).map(|_| q(1, rng.random_range(1..9))).collect();
    p.push(BigRational::one());
    let alpha = (0..d).map(|_| q(rng.random_range(1..8), 1)).collect();
    let gamma = (0..d)
        .map(|_| q(rng.random_range(1..7), rng.random_range(1..4)))
        .collect();
    ChainSpec::new(p, alpha, gamma).unwrap()
}

#[test]
fn dp_equals_brute_force_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for d in 1..=12 {
        for _ in 0..3 {
            let spec = random_spec(&mut rng, d);
            assert_eq!(
                chain_expectation(&spec).value,
                brute(&spec, None, true),
                "d = {d}"
            );
        }
    }
}

#[test]
fn windows_equal_brute_force_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for d in 2..=8 {
        let spec = random_spec(&mut rng, d);
        for i1 in 1..d {
            for i2 in i1 + 1..=d {
                let w = Some((i1, i2));
                assert_eq!(
                    chain_expectation_with_window(&spec, i1, i2).unwrap(),
                    brute(&spec, w, true)
                );
                let p = window_collision_probability(&spec, i1, i2).unwrap();
                assert_eq!(p, brute(&spec, w, false));
                let first: BigRational = first_collision_probabilities(&spec, i1, i2)
                    .unwrap()
                    .into_iter()
                    .fold(BigRational::zero(), |a, b| a + b);
                assert_eq!(first, p);
            }
        }
    }
}

#[test]
fn architecture_spec_matches_exact_spec() {
    let arch = Architecture::new(3, vec![4, 5, 2]).unwrap();
    let x = [1.0, 2.0, -1.0];
    let f = ChainSpec::from_architecture(&arch, &x, WeightDistribution::Uniform).unwrap();
    let e = ChainSpec::from_architecture_exact(&arch, &x, WeightDistribution::Uniform).unwrap();
    let exact = chain_expectation(&e).value;
    let approx = chain_expectation(&f).value;
    let exact_f = ntklab::oracle::to_f64(&exact);
    assert!((approx - exact_f).abs() <= 1e-12 * exact_f);
}

/// Draw two paths independently (input index by `x_a^2 / |x|^2`, hidden
/// neurons uniformly) and evaluate the product of factors on their
/// coincidence pattern.
#[test]
fn path_pair_sampler_matches_dp() {
    let arch = Architecture::new(3, vec![3, 2, 4, 2]).unwrap();
    let x = [0.5, 1.0, 2.0];
    let dist = WeightDistribution::Uniform;
    let spec = ChainSpec::from_architecture(&arch, &x, dist).unwrap();
    let value = chain_expectation(&spec).value;
    let norm2: f64 = x.iter().map(|v| v * v).sum();
    let cumulative: Vec<f64> = x
        .iter()
        .scan(0.0, |acc, v| {
            *acc += v * v / norm2;
            Some(*acc)
        })
        .collect();
    let draw_input = |rng: &mut ChaCha8Rng| {
        let u: f64 = rng.random();
        cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(x.len() - 1)
    };
    let gamma = dist.fourth_moment() / 3.0;
    let d = arch.depth();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut sum, mut sum2) = (0.0, 0.0);
    let trials = 1_000_000;
    for _ in 0..trials {
        let mut prev = draw_input(&mut rng) == draw_input(&mut rng);
        let mut f = 1.0;
        for i in 1..=d {
            let n = arch.width(i);
            let same = rng.random_range(0..n) == rng.random_range(0..n);
            if same {
                f *= 6.0;
                if prev {
                    f *= gamma;
                }
            }
            prev = same;
        }
        sum += f;
        sum2 += f * f;
    }
    let mean = sum / trials as f64;
    let se = ((sum2 / trials as f64 - mean * mean) / (trials - 1) as f64).sqrt();
    assert!(
        (mean - value).abs() <= 5.0 * se,
        "mc {mean} dp {value} se {se}"
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sandwich_holds_for_random_widths(
        n0 in 1usize..40,
        hidden in prop::collection::vec(1usize..64, 0..40),
        uniform in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let arch = Architecture::new(n0, hidden).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n0).map(|_| rng.random_range(-2.0..2.0)).collect();
        prop_assume!(x.iter().any(|v| *v != 0.0));
        let dist = if uniform { WeightDistribution::Uniform } else { WeightDistribution::Normal };
        let spec = ChainSpec::from_architecture(&arch, &x, dist).unwrap();
        let s = sandwich_check(&spec).unwrap();
        prop_assert!(s.lower <= s.value * (1.0 + 1e-12) && s.value <= s.upper * (1.0 + 1e-12));
    }
}
