//! Network architectures, weight laws and the forward pass.
//!
//! Layers are numbered `1..=d` as in the usual NTK parametrization: layer `i`
//! maps `x^{(i-1)}` (width `n_{i-1}`) to `y^{(i)}` (width `n_i`), with
//! `x^{(0)} = x` and `n_d = 1`. The effective weight is `s_i * W^{(i)}` where
//! `s_i^2 = 2 / n_{i-1}` for hidden layers and `s_d^2 = 1 / n_{d-1}` for the
//! linear read-out. In code, `weights[i - 1]` holds `W^{(i)}`.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Layer widths `n_0, n_1, ..., n_{d-1}` plus the scalar output.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    n0: usize,
    hidden: Vec<usize>,
}

impl Architecture {
    pub fn new(n0: usize, hidden: Vec<usize>) -> Result<Self> {
        if n0 == 0 {
            return Err(Error::InvalidArchitecture(
                "input width must be positive".into(),
            ));
        }
        if let Some(pos) = hidden.iter().position(|&n| n == 0) {
            return Err(Error::InvalidArchitecture(format!(
                "hidden layer {} has zero width",
                pos + 1
            )));
        }
        Ok(Self { n0, hidden })
    }

    /// `depth - 1` hidden layers of the same width.
    pub fn equal_width(n0: usize, width: usize, depth: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::InvalidArchitecture(
                "depth must be at least 1".into(),
            ));
        }
        Self::new(n0, vec![width; depth - 1])
    }

    pub fn input_width(&self) -> usize {
        self.n0
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.hidden
    }

    /// Number of weight layers `d`.
    pub fn depth(&self) -> usize {
        self.hidden.len() + 1
    }

    /// Width `n_i` for `i` in `0..=d`.
    pub fn width(&self, i: usize) -> usize {
        let d = self.depth();
        assert!(i <= d, "layer {i} out of range for depth {d}");
        if i == 0 {
            self.n0
        } else if i == d {
            1
        } else {
            self.hidden[i - 1]
        }
    }

    /// All widths `n_0, ..., n_d`.
    pub fn widths(&self) -> Vec<usize> {
        (0..=self.depth()).map(|i| self.width(i)).collect()
    }

    /// `s_i^2` as `(numerator, denominator)` for layer `i` in `1..=d`.
    pub fn scale_sq_parts(&self, i: usize) -> (u64, u64) {
        assert!(i >= 1 && i <= self.depth());
        let fan_in = self.width(i - 1) as u64;
        if i == self.depth() {
            (1, fan_in)
        } else {
            (2, fan_in)
        }
    }

    pub fn scale_sq(&self, i: usize) -> f64 {
        let (num, den) = self.scale_sq_parts(i);
        num as f64 / den as f64
    }

    pub fn scale(&self, i: usize) -> f64 {
        self.scale_sq(i).sqrt()
    }

    /// Total number of weights and biases.
    pub fn num_params(&self) -> usize {
        (1..=self.depth())
            .map(|i| self.width(i) * self.width(i - 1) + self.width(i))
            .sum()
    }
}

/// Law of the raw weights. Both laws are symmetric with unit variance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightDistribution {
    #[default]
    Normal,
    /// Uniform on `[-sqrt(3), sqrt(3)]`.
    Uniform,
}

impl WeightDistribution {
    /// `E[W^4]` as `(numerator, denominator)`.
    pub fn fourth_moment_parts(self) -> (i64, i64) {
        match self {
            WeightDistribution::Normal => (3, 1),
            WeightDistribution::Uniform => (9, 5),
        }
    }

    pub fn fourth_moment(self) -> f64 {
        let (num, den) = self.fourth_moment_parts();
        num as f64 / den as f64
    }

    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            WeightDistribution::Normal => StandardNormal.sample(rng),
            WeightDistribution::Uniform => {
                let half = 3f64.sqrt();
                rng.random_range(-half..half)
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            WeightDistribution::Normal => "normal",
            WeightDistribution::Uniform => "uniform",
        }
    }
}

impl std::str::FromStr for WeightDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" | "gaussian" => Ok(WeightDistribution::Normal),
            "uniform" => Ok(WeightDistribution::Uniform),
            other => Err(Error::InvalidArgument(format!(
                "unknown distribution '{other}'"
            ))),
        }
    }
}

/// Raw weights and biases of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    arch: Architecture,
    pub(crate) weights: Vec<Array2<f64>>,
    pub(crate) biases: Vec<Array1<f64>>,
}

impl NetworkParams {
    /// All weights and biases zero.
    pub fn zeros(arch: &Architecture) -> Self {
        let d = arch.depth();
        let weights = (1..=d)
            .map(|i| Array2::zeros((arch.width(i), arch.width(i - 1))))
            .collect();
        let biases = (1..=d).map(|i| Array1::zeros(arch.width(i))).collect();
        Self {
            arch: arch.clone(),
            weights,
            biases,
        }
    }

    pub fn from_parts(
        arch: &Architecture,
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
    ) -> Result<Self> {
        let d = arch.depth();
        if weights.len() != d || biases.len() != d {
            return Err(Error::ParamShape(format!(
                "expected {d} layers, got {} weight and {} bias arrays",
                weights.len(),
                biases.len()
            )));
        }
        for i in 1..=d {
            let want = (arch.width(i), arch.width(i - 1));
            if weights[i - 1].dim() != want {
                return Err(Error::ParamShape(format!(
                    "layer {i} weight is {:?}, expected {want:?}",
                    weights[i - 1].dim()
                )));
            }
            if biases[i - 1].len() != arch.width(i) {
                return Err(Error::ParamShape(format!(
                    "layer {i} bias has length {}, expected {}",
                    biases[i - 1].len(),
                    arch.width(i)
                )));
            }
        }
        Ok(Self {
            arch: arch.clone(),
            weights,
            biases,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    /// Raw weight matrix `W^{(i)}`, `i` in `1..=d`.
    pub fn weight(&self, i: usize) -> &Array2<f64> {
        &self.weights[i - 1]
    }

    pub fn bias(&self, i: usize) -> &Array1<f64> {
        &self.biases[i - 1]
    }

    pub fn weight_mut(&mut self, i: usize) -> &mut Array2<f64> {
        &mut self.weights[i - 1]
    }

    pub fn bias_mut(&mut self, i: usize) -> &mut Array1<f64> {
        &mut self.biases[i - 1]
    }

    /// Redraw every weight from `dist` and zero the biases, reusing storage.
    pub fn resample<R: Rng + ?Sized>(&mut self, dist: WeightDistribution, rng: &mut R) {
        for w in &mut self.weights {
            w.iter_mut().for_each(|v| *v = dist.sample(rng));
        }
        for b in &mut self.biases {
            b.fill(0.0);
        }
    }

    /// Largest absolute parameter value.
    pub fn max_abs(&self) -> f64 {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.biases.iter().flat_map(|b| b.iter()))
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn has_zero_biases(&self) -> bool {
        self.biases.iter().all(|b| b.iter().all(|&v| v == 0.0))
    }
}

/// Draw a fresh network: iid raw weights from `dist`, zero biases.
///
/// The draw order is layer by layer, row-major, from a ChaCha8 stream seeded
/// with `seed`.
pub fn init_network(arch: &Architecture, dist: WeightDistribution, seed: u64) -> NetworkParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_network_with(arch, dist, &mut rng)
}

pub fn init_network_with<R: Rng + ?Sized>(
    arch: &Architecture,
    dist: WeightDistribution,
    rng: &mut R,
) -> NetworkParams {
    let mut params = NetworkParams::zeros(arch);
    params.resample(dist, rng);
    params
}

/// Pre- and post-activations of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// `x^{(0)}, ..., x^{(d-1)}`.
    pub post: Vec<Array1<f64>>,
    /// `y^{(1)}, ..., y^{(d)}`.
    pub pre: Vec<Array1<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> f64 {
        self.pre.last().expect("depth >= 1")[0]
    }

    /// `x^{(i)}` for `i` in `0..d`.
    pub fn activation(&self, i: usize) -> &Array1<f64> {
        &self.post[i]
    }

    /// `y^{(i)}` for `i` in `1..=d`.
    pub fn preactivation(&self, i: usize) -> &Array1<f64> {
        &self.pre[i - 1]
    }

    /// Open neurons (`y > 0`) of each hidden layer `1..d`.
    pub fn activation_pattern(&self) -> Vec<Vec<bool>> {
        let d = self.pre.len();
        self.pre[..d - 1]
            .iter()
            .map(|y| y.iter().map(|&v| v > 0.0).collect())
            .collect()
    }
}

pub(crate) fn check_input(arch: &Architecture, x: &[f64]) -> Result<()> {
    if x.len() != arch.input_width() {
        return Err(Error::InputShape {
            expected: arch.input_width(),
            got: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "input contains a non-finite entry".into(),
        ));
    }
    Ok(())
}

pub fn forward(params: &NetworkParams, x: &[f64]) -> Result<ForwardTrace> {
    let arch = params.architecture();
    check_input(arch, x)?;
    let d = arch.depth();
    let mut post = Vec::with_capacity(d);
    let mut pre = Vec::with_capacity(d);
    post.push(Array1::from(x.to_vec()));
    for i in 1..=d {
        let s = arch.scale(i);
        let mut y = params.weight(i).dot(&post[i - 1]);
        y.mapv_inplace(|v| s * v);
        y += params.bias(i);
        if i < d {
            post.push(y.mapv(relu));
        }
        pre.push(y);
    }
    Ok(ForwardTrace { post, pre })
}

#[inline]
pub fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// `ReLU'(v)`, taking the value 0 at the kink.
#[inline]
pub fn relu_step(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        0.0
    }
}
