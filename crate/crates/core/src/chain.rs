//! Two-state transfer chain for pair-of-paths expectations.
//!
//! A pair of independent uniformly random paths either shares a neuron at
//! layer `i` (`s_i = 1`, probability `p_i`) or not. The chain evaluates
//! `E[prod_{i=1}^{d} alpha_i^{s_i} gamma_i^{s_{i-1} s_i}]` for independent
//! `s_0, ..., s_d` in `O(d)` by a forward pass over the two states. Every
//! routine is generic over the scalar so it runs in `f64` or exactly in
//! rationals.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{FromPrimitive, Num};
use serde::Serialize;

use crate::net::{Architecture, WeightDistribution};
use crate::theory::elementary_bounds;
use crate::{Error, Result};

/// Collision probabilities `p_0..=p_d` and per-layer factors for `1..=d`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChainSpec<T> {
    pub collision: Vec<T>,
    pub alpha: Vec<T>,
    pub gamma: Vec<T>,
}

impl<T: Clone + Num> ChainSpec<T> {
    pub fn new(collision: Vec<T>, alpha: Vec<T>, gamma: Vec<T>) -> Result<Self> {
        let d = alpha.len();
        if d == 0 || collision.len() != d + 1 || gamma.len() != d {
            return Err(Error::InvalidArgument(format!(
                "chain needs d >= 1 factors and d + 1 probabilities, got {} and {}",
                d,
                collision.len()
            )));
        }
        Ok(Self {
            collision,
            alpha,
            gamma,
        })
    }

    pub fn depth(&self) -> usize {
        self.alpha.len()
    }

    fn check_window(&self, i1: usize, i2: usize) -> Result<()> {
        let d = self.depth();
        if i1 >= 1 && i1 < i2 && i2 <= d {
            Ok(())
        } else {
            Err(Error::WindowOutOfRange { i1, i2, depth: d })
        }
    }
}

impl ChainSpec<f64> {
    /// Chain of a pair of paths in `arch` started from the input weights
    /// `x_a^2`: `p_0 = |x|_4^4 / |x|_2^4`, `p_i = 1/n_i`, `alpha_i = 6`,
    /// `gamma_i = mu_4 / 3`.
    pub fn from_architecture(
        arch: &Architecture,
        x: &[f64],
        dist: WeightDistribution,
    ) -> Result<Self> {
        let p0 = input_collision(arch, x)?;
        let d = arch.depth();
        let mut collision = vec![p0];
        collision.extend((1..=d).map(|i| 1.0 / arch.width(i) as f64));
        Self::new(collision, vec![6.0; d], vec![dist.fourth_moment() / 3.0; d])
    }
}

impl ChainSpec<BigRational> {
    pub fn from_architecture_exact(
        arch: &Architecture,
        x: &[f64],
        dist: WeightDistribution,
    ) -> Result<Self> {
        crate::net::check_input(arch, x)?;
        let sq: Vec<BigRational> = x
            .iter()
            .map(|&v| {
                let r = BigRational::from_f64(v).expect("finite input");
                &r * &r
            })
            .collect();
        let l2: BigRational = sq.iter().fold(zero(), |a, b| a + b);
        if l2 == zero() {
            return Err(Error::InvalidArgument("input must be nonzero".into()));
        }
        let l4: BigRational = sq.iter().fold(zero(), |a, b| a + b * b);
        let p0 = l4 / (&l2 * &l2);
        let d = arch.depth();
        let mut collision = vec![p0];
        collision.extend((1..=d).map(|i| ratio(1, arch.width(i) as i64)));
        let (num, den) = dist.fourth_moment_parts();
        Self::new(
            collision,
            vec![ratio(6, 1); d],
            vec![ratio(num, 3 * den); d],
        )
    }
}

fn zero() -> BigRational {
    BigRational::from_integer(BigInt::from(0))
}

fn ratio(num: i64, den: i64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

fn input_collision(arch: &Architecture, x: &[f64]) -> Result<f64> {
    crate::net::check_input(arch, x)?;
    let l2: f64 = x.iter().map(|v| v * v).sum();
    if l2 == 0.0 {
        return Err(Error::InvalidArgument("input must be nonzero".into()));
    }
    let l4: f64 = x.iter().map(|v| v.powi(4)).sum();
    Ok(l4 / (l2 * l2))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChainValue<T> {
    pub value: T,
    /// Unnormalized mass `[s_i = 0, s_i = 1]` after each layer `0..=d`.
    pub trace: Vec<[T; 2]>,
}

/// One transfer step: weight of moving from state `s` to `t` at layer `i`.
fn step_weight<T: Clone + Num>(spec: &ChainSpec<T>, i: usize, s: usize, t: usize) -> T {
    let p = spec.collision[i].clone();
    let mut w = if t == 1 { p } else { T::one() - p };
    if t == 1 {
        w = w * spec.alpha[i - 1].clone();
        if s == 1 {
            w = w * spec.gamma[i - 1].clone();
        }
    }
    w
}

pub fn chain_expectation<T: Clone + Num>(spec: &ChainSpec<T>) -> ChainValue<T> {
    let p0 = spec.collision[0].clone();
    let mut mass = [T::one() - p0.clone(), p0];
    let mut trace = vec![mass.clone()];
    for i in 1..=spec.depth() {
        let next = [0, 1].map(|t| {
            step_weight(spec, i, 0, t) * mass[0].clone()
                + step_weight(spec, i, 1, t) * mass[1].clone()
        });
        mass = next;
        trace.push(mass.clone());
    }
    let value = mass[0].clone() + mass[1].clone();
    ChainValue { value, trace }
}

/// `E[F * C(i1, i2)]` where `C` indicates a collision at some layer in
/// `[i1, i2 - 1]`. The flag doubles the state space to four.
pub fn chain_expectation_with_window<T: Clone + Num>(
    spec: &ChainSpec<T>,
    i1: usize,
    i2: usize,
) -> Result<T> {
    spec.check_window(i1, i2)?;
    Ok(windowed(spec, i1, i2, true))
}

fn windowed<T: Clone + Num>(spec: &ChainSpec<T>, i1: usize, i2: usize, weighted: bool) -> T {
    let p0 = spec.collision[0].clone();
    // mass[flag][s]
    let mut mass = [[T::one() - p0.clone(), p0], [T::zero(), T::zero()]];
    for i in 1..=spec.depth() {
        let mut next = [[T::zero(), T::zero()], [T::zero(), T::zero()]];
        for (f, row) in mass.iter().enumerate() {
            for (s, m) in row.iter().enumerate() {
                for t in 0..2 {
                    let w = if weighted {
                        step_weight(spec, i, s, t)
                    } else if t == 1 {
                        spec.collision[i].clone()
                    } else {
                        T::one() - spec.collision[i].clone()
                    };
                    let g = if f == 1 || (t == 1 && i >= i1 && i < i2) {
                        1
                    } else {
                        0
                    };
                    next[g][t] = next[g][t].clone() + w * m.clone();
                }
            }
        }
        mass = next;
    }
    mass[1][0].clone() + mass[1][1].clone()
}

/// `P(C(i1, i2) = 1)` computed by the flag chain with unit factors.
pub fn window_collision_probability<T: Clone + Num>(
    spec: &ChainSpec<T>,
    i1: usize,
    i2: usize,
) -> Result<T> {
    spec.check_window(i1, i2)?;
    Ok(windowed(spec, i1, i2, false))
}

/// `P(A_l) = p_l prod_{i=i1}^{l-1} (1 - p_i)` for `l` in `i1..i2`: the first
/// collision inside the window happens at layer `l`.
pub fn first_collision_probabilities<T: Clone + Num>(
    spec: &ChainSpec<T>,
    i1: usize,
    i2: usize,
) -> Result<Vec<T>> {
    spec.check_window(i1, i2)?;
    let mut survive = T::one();
    let mut out = Vec::with_capacity(i2 - i1);
    for l in i1..i2 {
        let p = spec.collision[l].clone();
        out.push(survive.clone() * p.clone());
        survive = survive * (T::one() - p);
    }
    Ok(out)
}

/// `sum_{1 <= i1 < i2 <= d} E[F * C(i1, i2)]`, exact in `O(d^3)`.
pub fn delta_ww_window_sum<T: Clone + Num>(spec: &ChainSpec<T>) -> T {
    let d = spec.depth();
    let mut total = T::zero();
    for i1 in 1..d {
        for i2 in i1 + 1..=d {
            total = total + windowed(spec, i1, i2, true);
        }
    }
    total
}

/// Closed approximation of [`delta_ww_window_sum`] for `alpha = 6`,
/// `gamma = 1`: each first-collision term is replaced by
/// `p_l e^{-5 p_l - 6 sum_{i=i1}^{l-1} p_i}` times `e^{5 sum_{i=1}^{d} p_i}`.
pub fn delta_ww_window_sum_closed(spec: &ChainSpec<f64>) -> f64 {
    let d = spec.depth();
    let p = &spec.collision;
    let growth = (5.0 * p[1..=d].iter().sum::<f64>()).exp();
    let mut total = crate::stats::KahanSum::new();
    for i1 in 1..d {
        let mut run = 0.0;
        for l in i1..d {
            total.add((d - l) as f64 * p[l] * (-5.0 * p[l] - 6.0 * run).exp());
            run += p[l];
        }
    }
    growth * total.value()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Sandwich {
    pub lower: f64,
    pub value: f64,
    pub upper: f64,
}

/// Relative slack allowed when comparing floating-point bounds.
pub const SANDWICH_SLACK: f64 = 1e-12;

/// Check `lower <= E[F] <= upper` with the elementary product bounds, using
/// `gamma ^ 1` for the lower product and `gamma v 1` for the upper one.
pub fn sandwich_check(spec: &ChainSpec<f64>) -> Result<Sandwich> {
    let d = spec.depth();
    let q = vec![0.0; d + 1];
    let k = vec![1.0; d];
    let lo_gamma: Vec<f64> = spec.gamma.iter().map(|g| g.min(1.0)).collect();
    let hi_gamma: Vec<f64> = spec.gamma.iter().map(|g| g.max(1.0)).collect();
    let lower = elementary_bounds(&spec.collision, &q, &spec.alpha, &lo_gamma, &k)?
        .lower
        .expect("clipped factors are at most one");
    let upper = elementary_bounds(&spec.collision, &q, &spec.alpha, &hi_gamma, &k)?
        .upper
        .expect("clipped factors are at least one");
    let value = chain_expectation(spec).value;
    let out = Sandwich {
        lower,
        value,
        upper,
    };
    if lower > value * (1.0 + SANDWICH_SLACK) || value > upper * (1.0 + SANDWICH_SLACK) {
        return Err(Error::Contract(format!(
            "chain value {value} escapes [{lower}, {upper}]"
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spec(p: &[f64], alpha: f64, gamma: f64) -> ChainSpec<f64> {
        let d = p.len() - 1;
        ChainSpec::new(p.to_vec(), vec![alpha; d], vec![gamma; d]).unwrap()
    }

    #[test]
    fn all_collisions_give_the_full_product() {
        let s = spec(&[1.0; 6], 6.0, 0.6);
        assert_relative_eq!(
            chain_expectation(&s).value,
            6f64.powi(5) * 0.6f64.powi(5),
            max_relative = 1e-14
        );
    }

    #[test]
    fn no_hidden_collisions_leave_the_terminal_factor() {
        let s = spec(&[0.0, 0.0, 0.0, 0.0, 1.0], 6.0, 1.0);
        assert_relative_eq!(chain_expectation(&s).value, 6.0, epsilon = 1e-15);
    }

    #[test]
    fn unit_factors_give_one() {
        let s = spec(&[0.3, 0.2, 0.9, 1.0], 1.0, 1.0);
        assert_relative_eq!(chain_expectation(&s).value, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn first_collisions_sum_to_window_probability() {
        let s = spec(&[0.5, 0.25, 0.1, 0.3, 0.2, 1.0], 6.0, 1.0);
        for (i1, i2) in [(1, 2), (1, 5), (2, 4), (3, 5)] {
            let parts: f64 = first_collision_probabilities(&s, i1, i2)
                .unwrap()
                .iter()
                .sum();
            let direct = window_collision_probability(&s, i1, i2).unwrap();
            assert_relative_eq!(parts, direct, epsilon = 1e-15);
        }
        assert!(chain_expectation_with_window(&s, 3, 3).is_err());
        assert!(chain_expectation_with_window(&s, 0, 2).is_err());
        assert!(chain_expectation_with_window(&s, 2, 6).is_err());
    }

    #[test]
    fn window_never_exceeds_full_value() {
        let s = spec(&[0.5, 0.25, 0.1, 0.3, 1.0], 6.0, 0.6);
        let full = chain_expectation(&s).value;
        for i1 in 1..4 {
            for i2 in i1 + 1..=4 {
                let w = chain_expectation_with_window(&s, i1, i2).unwrap();
                assert!(w > 0.0 && w <= full);
            }
        }
    }

    #[test]
    fn gaussian_sandwich_is_tight() {
        let s = spec(&[0.25, 0.1, 0.2, 0.05, 1.0], 6.0, 1.0);
        let b = sandwich_check(&s).unwrap();
        let prod: f64 = s.collision[1..].iter().map(|p| 1.0 + 5.0 * p).product();
        assert_relative_eq!(b.lower, prod, max_relative = 1e-14);
        assert_relative_eq!(b.upper, prod, max_relative = 1e-14);
        assert_relative_eq!(b.value, prod, max_relative = 1e-14);
    }

    #[test]
    fn exact_spec_from_architecture() {
        let arch = Architecture::new(2, vec![3, 4]).unwrap();
        let s = ChainSpec::from_architecture_exact(&arch, &[1.0, 1.0], WeightDistribution::Uniform)
            .unwrap();
        assert_eq!(s.collision[0], ratio(1, 2));
        assert_eq!(s.collision[3], ratio(1, 1));
        assert_eq!(s.gamma[0], ratio(3, 5));
        assert!(
            ChainSpec::from_architecture(&arch, &[0.0, 0.0], WeightDistribution::Normal).is_err()
        );
    }
}
