//! Streaming moments, compensated sums and shard jackknife intervals.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::{Error, Result};

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for KahanSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = KahanSum::new();
        for v in iter {
            s.add(v);
        }
        s
    }
}

pub fn kahan_sum<I: IntoIterator<Item = f64>>(iter: I) -> f64 {
    iter.into_iter().collect::<KahanSum>().value()
}

/// Count, mean and central moment sums up to order four of one statistic.
///
/// Updates are Welford-style; merges use the pairwise formulas of Pebay, so
/// merging shard accumulators in a fixed order is deterministic.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MomentAccumulator {
    label: String,
    n: u64,
    mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

impl MomentAccumulator {
    pub fn new(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            n: 0,
            mean: 0.0,
            m2: 0.0,
            m3: 0.0,
            m4: 0.0,
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn push(&mut self, x: f64) {
        let n1 = self.n as f64;
        self.n += 1;
        let n = self.n as f64;
        let delta = x - self.mean;
        let delta_n = delta / n;
        let delta_n2 = delta_n * delta_n;
        let term1 = delta * delta_n * n1;
        self.mean += delta_n;
        self.m4 += term1 * delta_n2 * (n * n - 3.0 * n + 3.0) + 6.0 * delta_n2 * self.m2
            - 4.0 * delta_n * self.m3;
        self.m3 += term1 * delta_n * (n - 2.0) - 3.0 * delta_n * self.m2;
        self.m2 += term1;
    }

    pub fn merge(&self, other: &MomentAccumulator) -> Result<MomentAccumulator> {
        if self.label != other.label {
            return Err(Error::StatisticMismatch {
                left: self.label.clone(),
                right: other.label.clone(),
            });
        }
        if other.n == 0 {
            return Ok(self.clone());
        }
        if self.n == 0 {
            return Ok(other.clone());
        }
        let na = self.n as f64;
        let nb = other.n as f64;
        let n = na + nb;
        let delta = other.mean - self.mean;
        let d2 = delta * delta;
        let d3 = d2 * delta;
        let d4 = d2 * d2;
        let mean = self.mean + delta * nb / n;
        let m2 = self.m2 + other.m2 + d2 * na * nb / n;
        let m3 = self.m3
            + other.m3
            + d3 * na * nb * (na - nb) / (n * n)
            + 3.0 * delta * (na * other.m2 - nb * self.m2) / n;
        let m4 = self.m4
            + other.m4
            + d4 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
            + 6.0 * d2 * (na * na * other.m2 + nb * nb * self.m2) / (n * n)
            + 4.0 * delta * (na * other.m3 - nb * self.m3) / n;
        Ok(MomentAccumulator {
            label: self.label.clone(),
            n: self.n + other.n,
            mean,
            m2,
            m3,
            m4,
        })
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; zero with fewer than two samples.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn se_mean(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }

    /// `E[X^2]` estimated by the sample mean of `x^2`.
    pub fn second_raw_moment(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        self.mean * self.mean + self.m2 / self.n as f64
    }

    /// Standard error of [`Self::second_raw_moment`].
    pub fn se_second_raw_moment(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        let mu = self.mean;
        let c2 = self.m2 / n;
        let c3 = self.m3 / n;
        let c4 = self.m4 / n;
        let ex2 = mu * mu + c2;
        let ex4 = mu.powi(4) + 6.0 * mu * mu * c2 + 4.0 * mu * c3 + c4;
        let var = (ex4 - ex2 * ex2).max(0.0) * n / (n - 1.0);
        (var / n).sqrt()
    }

    /// Population central moment of order 2, 3 or 4.
    pub fn central_moment(&self, order: u32) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        let n = self.n as f64;
        match order {
            2 => self.m2 / n,
            3 => self.m3 / n,
            4 => self.m4 / n,
            _ => panic!("central moments are tracked up to order 4"),
        }
    }
}

/// Per-shard sums feeding a jackknife estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct ShardTotals {
    pub count: f64,
    pub sums: Vec<f64>,
}

impl ShardTotals {
    pub fn new(width: usize) -> Self {
        Self {
            count: 0.0,
            sums: vec![0.0; width],
        }
    }

    fn accumulate(&mut self, other: &ShardTotals) {
        self.count += other.count;
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            *a += b;
        }
    }
}

/// Point estimate with a delete-one-shard jackknife interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RatioEstimate {
    pub point: f64,
    pub std_error: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub shards: usize,
}

/// Jackknife over shards for a smooth function of pooled sums.
///
/// Empty shards are ignored. With fewer than two non-empty shards the
/// interval collapses to the point estimate.
pub fn jackknife<F>(shards: &[ShardTotals], confidence: f64, estimator: F) -> RatioEstimate
where
    F: Fn(&ShardTotals) -> f64,
{
    let used: Vec<&ShardTotals> = shards.iter().filter(|s| s.count > 0.0).collect();
    let width = shards.first().map_or(0, |s| s.sums.len());
    let mut total = ShardTotals::new(width);
    for s in &used {
        total.accumulate(s);
    }
    let point = estimator(&total);
    let g = used.len();
    if g < 2 {
        return RatioEstimate {
            point,
            std_error: 0.0,
            ci_lo: point,
            ci_hi: point,
            shards: g,
        };
    }
    let leave_out: Vec<f64> = (0..g)
        .map(|skip| {
            let mut part = ShardTotals::new(width);
            for (j, s) in used.iter().enumerate() {
                if j != skip {
                    part.accumulate(s);
                }
            }
            estimator(&part)
        })
        .collect();
    let gf = g as f64;
    let mean_loo = kahan_sum(leave_out.iter().copied()) / gf;
    let ss = kahan_sum(leave_out.iter().map(|v| (v - mean_loo).powi(2)));
    let std_error = ((gf - 1.0) / gf * ss).sqrt();
    let t = student_t_quantile(0.5 + confidence / 2.0, gf - 1.0);
    RatioEstimate {
        point,
        std_error,
        ci_lo: point - t * std_error,
        ci_hi: point + t * std_error,
        shards: g,
    }
}

pub fn student_t_quantile(p: f64, dof: f64) -> f64 {
    StudentsT::new(0.0, 1.0, dof)
        .expect("positive degrees of freedom")
        .inverse_cdf(p)
}
