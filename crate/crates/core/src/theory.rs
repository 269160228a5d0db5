//! Closed-form means and envelopes for the kernel, its square and its update.
//!
//! Envelopes are known only up to universal constants, so every envelope is
//! returned as a central value with a multiplicative band around it.
//! `S_j` below denotes `sum_{i=1}^{j} 1/n_i` with `n_d = 1`.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::net::Architecture;
use crate::stats::KahanSum;
use crate::{Error, Result};

/// Default multiplicative band for envelope results.
pub const DEFAULT_BAND: f64 = 40.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BetaSummary {
    /// `sum_{i=1}^{d} 1/n_i`, including the output term `1/n_d = 1`.
    pub beta_paper: f64,
    /// Hidden layers only: `sum_{i=1}^{d-1} 1/n_i`.
    pub beta_hidden: f64,
    /// `d / n` when every hidden layer has width `n`.
    pub equal_width: Option<f64>,
}

pub fn beta_summary(arch: &Architecture) -> BetaSummary {
    let beta_hidden = inverse_width_sum(arch, 1, arch.depth() - 1);
    let hidden = arch.hidden_widths();
    let equal_width = match hidden.first() {
        Some(&n) if hidden.iter().all(|&m| m == n) => Some(arch.depth() as f64 / n as f64),
        _ => None,
    };
    BetaSummary {
        beta_paper: beta_hidden + 1.0,
        beta_hidden,
        equal_width,
    }
}

/// `sum_{i=lo}^{hi} 1/n_i`, zero when `lo > hi`.
fn inverse_width_sum(arch: &Architecture, lo: usize, hi: usize) -> f64 {
    (lo..=hi)
        .map(|i| 1.0 / arch.width(i) as f64)
        .collect::<KahanSum>()
        .value()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EnvelopeResult {
    pub central: f64,
    pub lower: f64,
    pub upper: f64,
    pub source: &'static str,
}

impl EnvelopeResult {
    pub fn new(central: f64, band: f64, source: &'static str) -> Self {
        assert!(band >= 1.0, "band factor must be at least 1");
        Self {
            central,
            lower: central / band,
            upper: central * band,
            source,
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

/// `E[K] = d (1/2 + |x|^2 / n_0)`.
pub fn mean_kernel(arch: &Architecture, xnorm2: f64) -> f64 {
    arch.depth() as f64 * (0.5 + xnorm2 / arch.input_width() as f64)
}

/// `E[K_w] = d |x|^2 / n_0`.
pub fn mean_kw(arch: &Architecture, xnorm2: f64) -> f64 {
    arch.depth() as f64 * xnorm2 / arch.input_width() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BiasMean {
    /// `d / 2`: every layer, output included, contributes one half.
    pub paper: f64,
    /// `(d - 1)/2 + 1`: the linear output bias has derivative exactly one.
    pub corrected: f64,
}

pub fn mean_kb(arch: &Architecture) -> BiasMean {
    let d = arch.depth() as f64;
    BiasMean {
        paper: d / 2.0,
        corrected: (d - 1.0) / 2.0 + 1.0,
    }
}

/// `e^{-5 S_j}` for `j = 1..=d`.
fn decay_profile(arch: &Architecture) -> Vec<f64> {
    let mut s = KahanSum::new();
    (1..=arch.depth())
        .map(|j| {
            s.add(1.0 / arch.width(j) as f64);
            (-5.0 * s.value()).exp()
        })
        .collect()
}

/// Central value of the kernel second moment:
/// `e^{5 beta} (d^2 |x|^4 / n_0^2 + (d |x|^2 / n_0) sum_j e^{-5 S_j} + sum_{i<=j} e^{-5 S_j})`.
pub fn second_moment_envelope(arch: &Architecture, xnorm2: f64) -> EnvelopeResult {
    second_moment_envelope_with_band(arch, xnorm2, DEFAULT_BAND)
}

pub fn second_moment_envelope_with_band(
    arch: &Architecture,
    xnorm2: f64,
    band: f64,
) -> EnvelopeResult {
    let parts = ComponentSums::new(arch);
    let d = arch.depth() as f64;
    let n0 = arch.input_width() as f64;
    let w = d * xnorm2 / n0;
    let mut bracket = KahanSum::new();
    bracket.add(w * w);
    bracket.add(w * parts.single);
    bracket.add(parts.weighted);
    EnvelopeResult::new(parts.growth * bracket.value(), band, "kernel second moment")
}

/// Expansion of the second moment for equal hidden widths `n`:
/// `e^{t} [n^2 (1 - e^{-t} - t e^{-t}) + (d n |x|^2/n_0)(1 - e^{-t}) + d^2 |x|^4/n_0^2]`
/// with `t = 5 d / n`.
pub fn equal_width_second_moment(d: usize, n: usize, n0: usize, xnorm2: f64) -> f64 {
    let (d, n, n0) = (d as f64, n as f64, n0 as f64);
    let beta = d / n;
    let t = 5.0 * beta;
    let mut sum = KahanSum::new();
    sum.add(n * n * one_minus_exp_poly(t));
    sum.add(d * n * xnorm2 / n0 * (-(-t).exp_m1()));
    sum.add(d * d * xnorm2 * xnorm2 / (n0 * n0));
    t.exp() * sum.value()
}

/// `1 - e^{-t} - t e^{-t}` without cancellation for small `t`.
fn one_minus_exp_poly(t: f64) -> f64 {
    if t > 0.5 {
        return -(-t).exp_m1() - t * (-t).exp();
    }
    // sum_{k>=2} (-1)^k (k - 1) t^k / k!
    let mut term = t; // t^k / k! at k = 1
    let mut sum = KahanSum::new();
    for k in 2..40 {
        term *= t / k as f64;
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        sum.add(sign * (k - 1) as f64 * term);
        if term < 1e-20 * t * t {
            break;
        }
    }
    sum.value()
}

/// Sums shared by the envelope formulas.
struct ComponentSums {
    /// `e^{5 beta}`.
    growth: f64,
    /// `sum_j e^{-5 S_j}`.
    single: f64,
    /// `sum_{i<=j} e^{-5 S_j} = sum_j j e^{-5 S_j}`.
    weighted: f64,
}

impl ComponentSums {
    fn new(arch: &Architecture) -> Self {
        let decay = decay_profile(arch);
        let beta = beta_summary(arch).beta_paper;
        Self {
            growth: (5.0 * beta).exp(),
            single: decay.iter().copied().collect::<KahanSum>().value(),
            weighted: decay
                .iter()
                .enumerate()
                .map(|(j, e)| (j + 1) as f64 * e)
                .collect::<KahanSum>()
                .value(),
        }
    }
}

/// Weight-weight update bracket
/// `sum_{i1<i2} sum_{l=i1}^{i2-1} (1/n_l) e^{-5/n_l - 6 sum_{i=i1}^{l-1} 1/n_i}`.
///
/// Swapping the order of summation, each `(i1, l)` term is counted once per
/// `i2` in `(l, d]`.
fn update_ww_bracket(arch: &Architecture) -> f64 {
    let d = arch.depth();
    let mut total = KahanSum::new();
    for i1 in 1..d {
        let mut run = 0.0f64;
        for l in i1..d {
            let inv = 1.0 / arch.width(l) as f64;
            let term = inv * (-5.0 * inv - 6.0 * run).exp();
            total.add((d - l) as f64 * term);
            run += inv;
        }
    }
    total.value()
}

/// Weight-bias update bracket
/// `sum_{j<i} e^{-5 S_j} sum_{l=j}^{i-1} (1/n_l) e^{-6 sum_{a=j+1}^{l-1} 1/n_a}`.
fn update_wb_bracket(arch: &Architecture) -> f64 {
    let d = arch.depth();
    let decay = decay_profile(arch);
    let mut total = KahanSum::new();
    for j in 1..d {
        let mut inner = KahanSum::new();
        let mut run = 0.0f64;
        for l in j..d {
            let inv = 1.0 / arch.width(l) as f64;
            inner.add((d - l) as f64 * inv * (-6.0 * run).exp());
            if l > j {
                run += inv;
            }
        }
        total.add(decay[j - 1] * inner.value());
    }
    total.value()
}

/// Envelope for `E[Delta K] / lambda`: the weight-weight and weight-bias
/// brackets times `e^{5 beta}`.
pub fn update_envelope(arch: &Architecture, xnorm2: f64) -> EnvelopeResult {
    update_envelope_with_band(arch, xnorm2, DEFAULT_BAND)
}

pub fn update_envelope_with_band(arch: &Architecture, xnorm2: f64, band: f64) -> EnvelopeResult {
    let n0 = arch.input_width() as f64;
    let growth = ComponentSums::new(arch).growth;
    let w = xnorm2 / n0;
    let central = growth * (w * w * update_ww_bracket(arch) + w * update_wb_bracket(arch));
    EnvelopeResult::new(central, band, "kernel update")
}

/// `(d beta / n_0) e^{5 beta}` with `beta = d / n`.
pub fn equal_width_update_ratio(d: usize, n: usize, n0: usize) -> f64 {
    let beta = d as f64 / n as f64;
    d as f64 * beta / n0 as f64 * (5.0 * beta).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Component {
    Kw2,
    Kb2,
    KbKw,
    DeltaWw,
    DeltaWb,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Kw2,
        Component::Kb2,
        Component::KbKw,
        Component::DeltaWw,
        Component::DeltaWb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Kw2 => "Kw^2",
            Component::Kb2 => "Kb^2",
            Component::KbKw => "KbKw",
            Component::DeltaWw => "Delta_ww",
            Component::DeltaWb => "Delta_wb",
        }
    }
}

pub fn component_envelopes(
    arch: &Architecture,
    xnorm2: f64,
) -> BTreeMap<Component, EnvelopeResult> {
    component_envelopes_with_band(arch, xnorm2, DEFAULT_BAND)
}

pub fn component_envelopes_with_band(
    arch: &Architecture,
    xnorm2: f64,
    band: f64,
) -> BTreeMap<Component, EnvelopeResult> {
    let sums = ComponentSums::new(arch);
    let d = arch.depth() as f64;
    let w = xnorm2 / arch.input_width() as f64;
    let g = sums.growth;
    let mut out = BTreeMap::new();
    out.insert(
        Component::Kw2,
        EnvelopeResult::new(d * d * w * w * g, band, "weight kernel second moment"),
    );
    out.insert(
        Component::Kb2,
        EnvelopeResult::new(sums.weighted * g, band, "bias kernel second moment"),
    );
    out.insert(
        Component::KbKw,
        EnvelopeResult::new(d * w * sums.single * g, band, "mixed kernel moment"),
    );
    out.insert(
        Component::DeltaWw,
        EnvelopeResult::new(
            w * w * update_ww_bracket(arch) * g,
            band,
            "weight-weight update",
        ),
    );
    out.insert(
        Component::DeltaWb,
        EnvelopeResult::new(w * update_wb_bracket(arch) * g, band, "weight-bias update"),
    );
    out
}

/// Bounds on `E[prod_i alpha_i^{X_i} gamma_i^{X_{i-1} X_i} K_i^{Y_i}]` for
/// independent layer events.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ElementaryBounds {
    /// Present when every `gamma_i <= 1`.
    pub lower: Option<f64>,
    /// Present when every `gamma_i >= 1`.
    pub upper: Option<f64>,
}

/// `p` and `q` are indexed `0..=d`; `alpha`, `gamma` and `k` are indexed
/// `1..=d` (length `d`). The conventions `alpha_0 = gamma_0 = 1` apply.
pub fn elementary_bounds(
    p: &[f64],
    q: &[f64],
    alpha: &[f64],
    gamma: &[f64],
    k: &[f64],
) -> Result<ElementaryBounds> {
    let d = alpha.len();
    if p.len() != d + 1 || q.len() != d + 1 || gamma.len() != d || k.len() != d {
        return Err(Error::InvalidArgument(format!(
            "expected {} probabilities and {d} factors per list",
            d + 1
        )));
    }
    for i in 0..=d {
        let ok = (0.0..=1.0).contains(&p[i]) && (0.0..=1.0).contains(&q[i]) && p[i] + q[i] <= 1.0;
        if !ok {
            return Err(Error::Contract(format!(
                "probabilities at layer {i} must satisfy p, q in [0, 1] and p + q <= 1"
            )));
        }
    }
    for i in 0..d {
        if !(alpha[i] >= 1.0 && k[i] >= 1.0 && gamma[i] > 0.0) {
            return Err(Error::Contract(format!(
                "factors at layer {} must satisfy alpha, K >= 1 and gamma > 0",
                i + 1
            )));
        }
    }
    let a = |i: usize| if i == 0 { 1.0 } else { alpha[i - 1] };
    let g = |i: usize| if i == 0 { 1.0 } else { gamma[i - 1] };

    let upper = gamma.iter().all(|&v| v >= 1.0).then(|| {
        (1..=d)
            .map(|i| {
                1.0 + p[i] * (a(i) - 1.0)
                    + q[i] * (k[i - 1] - 1.0)
                    + p[i] * p[i - 1] * a(i) * a(i - 1) * g(i - 1) * (g(i) - 1.0)
            })
            .product()
    });
    let lower = gamma.iter().all(|&v| v <= 1.0).then(|| {
        (1..=d)
            .map(|i| 1.0 + p[i] * (a(i) - 1.0) + p[i] * p[i - 1] * a(i - 1) * a(i) * (g(i) - 1.0))
            .product()
    });
    Ok(ElementaryBounds { lower, upper })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn arch(n0: usize, hidden: &[usize]) -> Architecture {
        Architecture::new(n0, hidden.to_vec()).unwrap()
    }

    #[test]
    fn means() {
        let a = arch(4, &[16; 7]);
        assert_eq!(mean_kernel(&a, 4.0), 12.0);
        assert_eq!(mean_kernel(&a, 0.0), 4.0);
        assert_eq!(mean_kernel(&arch(2, &[]), 2.0), 1.5);
        assert_eq!(mean_kw(&arch(2, &[5, 5]), 2.0), 3.0);
        let b = mean_kb(&arch(2, &[5, 5]));
        assert_eq!((b.paper, b.corrected), (1.5, 2.0));
        assert_eq!(mean_kb(&arch(2, &[])).corrected, 1.0);
    }

    #[test]
    fn beta_conventions() {
        let b = beta_summary(&arch(3, &[10, 10, 10]));
        assert_relative_eq!(b.beta_paper, b.beta_hidden + 1.0, epsilon = 1e-15);
        assert_relative_eq!(b.beta_hidden, 0.3, epsilon = 1e-15);
        assert_eq!(b.equal_width, Some(0.4));
        assert_eq!(beta_summary(&arch(3, &[4, 5])).equal_width, None);
    }

    #[test]
    fn zero_input_keeps_only_the_bias_sum() {
        let a = arch(3, &[6, 7, 8]);
        let env = second_moment_envelope(&a, 0.0);
        let decay = decay_profile(&a);
        let expect: f64 = decay
            .iter()
            .enumerate()
            .map(|(j, e)| (j + 1) as f64 * e)
            .sum::<f64>()
            * (5.0 * beta_summary(&a).beta_paper).exp();
        assert_relative_eq!(env.central, expect, max_relative = 1e-14);
        assert!(env.lower <= env.central && env.central <= env.upper);
    }

    #[test]
    fn equal_width_small_beta_limit() {
        let (d, n, n0, x2) = (10, 1_000_000, 4, 3.0);
        let v = equal_width_second_moment(d, n, n0, x2);
        let lim = (d * d) as f64 * (12.5 + 5.0 * x2 / n0 as f64 + x2 * x2 / (n0 * n0) as f64);
        assert_relative_eq!(v, lim, max_relative = 1e-3);
        let t: f64 = 5.0 * 20.0 / 8.0;
        let zero_x = equal_width_second_moment(20, 8, 3, 0.0);
        assert_relative_eq!(
            zero_x,
            t.exp() * 64.0 * (1.0 - (-t).exp() - t * (-t).exp()),
            max_relative = 1e-13
        );
    }

    #[test]
    fn series_matches_closed_form() {
        for t in [1e-3f64, 0.1, 0.3, 0.49, 0.5, 0.51] {
            let direct = 1.0 - (-t).exp() - t * (-t).exp();
            assert_relative_eq!(one_minus_exp_poly(t), direct, max_relative = 1e-9);
        }
    }

    #[test]
    fn update_envelope_edge_cases() {
        assert_eq!(update_envelope(&arch(3, &[]), 3.0).central, 0.0);
        let env = component_envelopes(&arch(3, &[]), 3.0);
        assert_eq!(env[&Component::DeltaWw].central, 0.0);
        assert_eq!(env[&Component::DeltaWb].central, 0.0);
        let zero = component_envelopes(&arch(3, &[5, 5]), 0.0);
        for c in [
            Component::Kw2,
            Component::KbKw,
            Component::DeltaWw,
            Component::DeltaWb,
        ] {
            assert_eq!(zero[&c].central, 0.0);
        }
    }

    #[test]
    fn brackets_match_literal_triple_sums() {
        let a = arch(2, &[3, 7, 4, 9, 5]);
        let d = a.depth();
        let inv = |i: usize| 1.0 / a.width(i) as f64;
        let s = |lo: usize, hi: usize| (lo..=hi).map(inv).sum::<f64>();
        let mut ww = 0.0;
        let mut wb = 0.0;
        for i1 in 1..=d {
            for i2 in i1 + 1..=d {
                for l in i1..i2 {
                    let run: f64 = if l > i1 { s(i1, l - 1) } else { 0.0 };
                    ww += inv(l) * (-5.0 * inv(l) - 6.0 * run).exp();
                    let inner: f64 = if l > i1 + 1 { s(i1 + 1, l - 1) } else { 0.0 };
                    wb += (-5.0 * s(1, i1)).exp() * inv(l) * (-6.0 * inner).exp();
                }
            }
        }
        assert_relative_eq!(update_ww_bracket(&a), ww, max_relative = 1e-13);
        assert_relative_eq!(update_wb_bracket(&a), wb, max_relative = 1e-13);
    }

    #[test]
    fn equal_width_update_ratio_decays_in_width() {
        let r1 = equal_width_update_ratio(10, 100, 4);
        let r2 = equal_width_update_ratio(10, 1000, 4);
        assert!(r2 < r1 / 9.0);
        assert_relative_eq!(r2, 100.0 / 4000.0 * (0.05f64).exp(), max_relative = 1e-14);
    }

    #[test]
    fn elementary_bound_examples() {
        let b = elementary_bounds(&[0.0; 3], &[0.0; 3], &[6.0; 2], &[1.0; 2], &[1.0; 2]).unwrap();
        assert_eq!((b.lower, b.upper), (Some(1.0), Some(1.0)));
        let b = elementary_bounds(&[0.5; 3], &[0.2; 3], &[1.0; 2], &[1.0; 2], &[1.0; 2]).unwrap();
        assert_eq!((b.lower, b.upper), (Some(1.0), Some(1.0)));
        let b = elementary_bounds(&[0.0, 0.5], &[0.0, 0.0], &[6.0], &[1.0], &[1.0]).unwrap();
        assert_eq!(b.upper, Some(3.5));
        let bad = elementary_bounds(&[0.7, 0.5], &[0.0, 0.6], &[6.0], &[1.0], &[1.0]);
        assert!(matches!(bad, Err(Error::Contract(_))));
        let bad = elementary_bounds(&[0.0, 0.5], &[0.0, 0.0], &[0.5], &[1.0], &[1.0]);
        assert!(bad.is_err());
    }
}
