//! Parameter gradients, the on-diagonal NTK and its first SGD update.
//!
//! Gradients are taken with respect to the raw weights `W^{(i)}` and the
//! biases, so `K = K_w + K_b` with `K_w = sum_i s_i^2 |g_i|^2 |x^{(i-1)}|^2`
//! and `K_b = sum_i |g_i|^2`, where `g_i = dN/dy^{(i)}`.
//!
//! Hessian contractions use an exact forward-over-reverse pass (R-operator),
//! which is exact for piecewise-linear networks away from the kinks. A central
//! difference variant is kept for cross-checking.

use ndarray::{Array1, Array2, Zip};
use serde::Serialize;

use crate::net::{check_input, forward, relu_step, Architecture, ForwardTrace, NetworkParams};
use crate::{Error, Result};

/// A vector in parameter space, laid out like [`NetworkParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl ParamVector {
    pub fn zeros(arch: &Architecture) -> Self {
        let p = NetworkParams::zeros(arch);
        Self {
            weights: p.weights,
            biases: p.biases,
        }
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.dot_weights(other) + self.dot_biases(other)
    }

    pub fn dot_weights(&self, other: &ParamVector) -> f64 {
        self.weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| (a * b).sum())
            .sum()
    }

    pub fn dot_biases(&self, other: &ParamVector) -> f64 {
        self.biases
            .iter()
            .zip(&other.biases)
            .map(|(a, b)| a.dot(b))
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    /// Copy with the bias block zeroed.
    pub fn weights_only(&self) -> Self {
        Self {
            weights: self.weights.clone(),
            biases: self.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
        }
    }

    /// Copy with the weight block zeroed.
    pub fn biases_only(&self) -> Self {
        Self {
            weights: self
                .weights
                .iter()
                .map(|w| Array2::zeros(w.dim()))
                .collect(),
            biases: self.biases.clone(),
        }
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            weights: self.weights.iter().map(|w| w * a).collect(),
            biases: self.biases.iter().map(|b| b * a).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.biases.iter().flat_map(|b| b.iter()))
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn check_layout(&self, arch: &Architecture) -> Result<()> {
        let d = arch.depth();
        let ok = self.weights.len() == d
            && self.biases.len() == d
            && (1..=d).all(|i| {
                self.weights[i - 1].dim() == (arch.width(i), arch.width(i - 1))
                    && self.biases[i - 1].len() == arch.width(i)
            });
        if ok {
            Ok(())
        } else {
            Err(Error::ParamShape(
                "direction does not match the architecture".into(),
            ))
        }
    }
}

impl NetworkParams {
    /// `self + a * v`.
    pub fn add_scaled(&self, a: f64, v: &ParamVector) -> Result<NetworkParams> {
        v.check_layout(self.architecture())?;
        let mut out = self.clone();
        for (w, dw) in out.weights.iter_mut().zip(&v.weights) {
            w.scaled_add(a, dw);
        }
        for (b, db) in out.biases.iter_mut().zip(&v.biases) {
            b.scaled_add(a, db);
        }
        Ok(out)
    }
}

/// `g_i = dN/dy^{(i)}` for every layer, with the forward trace.
struct Backprop {
    trace: ForwardTrace,
    /// `deltas[i - 1] = g_i`.
    deltas: Vec<Array1<f64>>,
}

fn backprop(params: &NetworkParams, x: &[f64]) -> Result<Backprop> {
    let arch = params.architecture();
    let trace = forward(params, x)?;
    let d = arch.depth();
    let mut deltas = vec![Array1::zeros(0); d];
    deltas[d - 1] = Array1::from_elem(1, 1.0);
    for i in (2..=d).rev() {
        let s = arch.scale(i);
        let back = params.weight(i).t().dot(&deltas[i - 1]);
        let y_prev = trace.preactivation(i - 1);
        deltas[i - 2] = Zip::from(&back)
            .and(y_prev)
            .map_collect(|&b, &y| s * b * relu_step(y));
    }
    Ok(Backprop { trace, deltas })
}

/// Gradient of the scalar output with respect to all raw parameters.
pub fn gradient(params: &NetworkParams, x: &[f64]) -> Result<ParamVector> {
    let arch = params.architecture();
    let bp = backprop(params, x)?;
    Ok(gradient_from(arch, &bp))
}

fn gradient_from(arch: &Architecture, bp: &Backprop) -> ParamVector {
    let d = arch.depth();
    let mut weights = Vec::with_capacity(d);
    for i in 1..=d {
        let s = arch.scale(i);
        let g = &bp.deltas[i - 1];
        let xp = bp.trace.activation(i - 1);
        weights.push(outer(s, g, xp));
    }
    ParamVector {
        weights,
        biases: bp.deltas.clone(),
    }
}

fn outer(s: f64, a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(r, c)| s * a[r] * b[c])
}

/// One evaluation of the kernel and its weight/bias split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KernelSample {
    pub output: f64,
    pub k: f64,
    pub kw: f64,
    pub kb: f64,
}

/// `K(x, x)` without materializing the gradient: each weight gradient is the
/// rank-one matrix `s_i g_i x^{(i-1)T}`.
pub fn kernel_on_diagonal(params: &NetworkParams, x: &[f64]) -> Result<KernelSample> {
    let arch = params.architecture();
    let bp = backprop(params, x)?;
    Ok(kernel_from(arch, &bp))
}

fn kernel_from(arch: &Architecture, bp: &Backprop) -> KernelSample {
    let mut kw = 0.0;
    let mut kb = 0.0;
    for i in 1..=arch.depth() {
        let g2 = bp.deltas[i - 1].dot(&bp.deltas[i - 1]);
        let xp = bp.trace.activation(i - 1);
        kw += arch.scale_sq(i) * g2 * xp.dot(xp);
        kb += g2;
    }
    KernelSample {
        output: bp.trace.output(),
        k: kw + kb,
        kw,
        kb,
    }
}

/// Exact Hessian-vector product `H v` of the scalar output.
pub fn hessian_vector_product(
    params: &NetworkParams,
    x: &[f64],
    v: &ParamVector,
) -> Result<ParamVector> {
    let arch = params.architecture();
    v.check_layout(arch)?;
    let bp = backprop(params, x)?;
    Ok(r_op(params, &bp, v))
}

fn r_op(params: &NetworkParams, bp: &Backprop, v: &ParamVector) -> ParamVector {
    let arch = params.architecture();
    let d = arch.depth();
    let trace = &bp.trace;

    // Directional derivatives of the hidden activations, `r_x[i] = R x^{(i)}`.
    let mut r_x: Vec<Array1<f64>> = Vec::with_capacity(d);
    r_x.push(Array1::zeros(arch.input_width()));
    for i in 1..d {
        let s = arch.scale(i);
        let mut ry = v.weights[i - 1].dot(trace.activation(i - 1));
        ry += &params.weight(i).dot(&r_x[i - 1]);
        ry.mapv_inplace(|t| s * t);
        ry += &v.biases[i - 1];
        let rx = Zip::from(&ry)
            .and(trace.preactivation(i))
            .map_collect(|&r, &y| r * relu_step(y));
        r_x.push(rx);
    }

    let mut weights = vec![Array2::zeros((0, 0)); d];
    let mut biases = vec![Array1::zeros(0); d];
    let mut r_g = Array1::zeros(1);
    for i in (1..=d).rev() {
        let s = arch.scale(i);
        let g = &bp.deltas[i - 1];
        let mut hw = outer(s, &r_g, trace.activation(i - 1));
        hw.scaled_add(1.0, &outer(s, g, &r_x[i - 1]));
        weights[i - 1] = hw;
        if i > 1 {
            let mut back = v.weights[i - 1].t().dot(g);
            back += &params.weight(i).t().dot(&r_g);
            let next = Zip::from(&back)
                .and(trace.preactivation(i - 1))
                .map_collect(|&b, &y| s * b * relu_step(y));
            biases[i - 1] = std::mem::replace(&mut r_g, next);
        } else {
            biases[0] = r_g.clone();
        }
    }
    ParamVector { weights, biases }
}

/// `H v` by central differences of the gradient with step
/// `eps = 1e-4 * (1 + max|theta|)` unless given.
pub fn hessian_vector_product_fd(
    params: &NetworkParams,
    x: &[f64],
    v: &ParamVector,
    eps: Option<f64>,
) -> Result<ParamVector> {
    let arch = params.architecture();
    v.check_layout(arch)?;
    let eps = eps.unwrap_or_else(|| 1e-4 * (1.0 + params.max_abs()));
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "step {eps} must be positive"
        )));
    }
    let gp = gradient(&params.add_scaled(eps, v)?, x)?;
    let gm = gradient(&params.add_scaled(-eps, v)?, x)?;
    let inv = 0.5 / eps;
    Ok(ParamVector {
        weights: gp
            .weights
            .iter()
            .zip(&gm.weights)
            .map(|(a, b)| (a - b) * inv)
            .collect(),
        biases: gp
            .biases
            .iter()
            .zip(&gm.biases)
            .map(|(a, b)| (a - b) * inv)
            .collect(),
    })
}

/// Block contractions of `v^T H v` for `v = (v_w, v_b)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct QuadraticForm {
    /// `v^T H v = ww + 2 wb + bb`.
    pub q: f64,
    pub ww: f64,
    pub wb: f64,
    /// Identically zero: the output is affine in each bias given the pattern.
    pub bb: f64,
}

pub fn hessian_quadratic_form(
    params: &NetworkParams,
    x: &[f64],
    v: &ParamVector,
) -> Result<QuadraticForm> {
    let arch = params.architecture();
    v.check_layout(arch)?;
    let bp = backprop(params, x)?;
    Ok(quadratic_form_from(params, &bp, v))
}

fn quadratic_form_from(params: &NetworkParams, bp: &Backprop, v: &ParamVector) -> QuadraticForm {
    let vw = v.weights_only();
    let vb = v.biases_only();
    let h_vw = r_op(params, bp, &vw);
    let h_vb = r_op(params, bp, &vb);
    let ww = vw.dot_weights(&h_vw);
    let wb = vw.dot_weights(&h_vb);
    let bb = vb.dot_biases(&h_vb);
    QuadraticForm {
        q: ww + 2.0 * wb + bb,
        ww,
        wb,
        bb,
    }
}

/// Kernel change after one SGD step on the loss `(N - target)^2 / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DeltaSample {
    pub before: KernelSample,
    pub after: KernelSample,
    /// `N - target` at initialization.
    pub residual: f64,
    /// `K(theta') - K(theta)`.
    pub delta_k: f64,
    /// `-2 lambda (N - target) q` with `q = grad^T H grad`.
    pub delta_k_lin: f64,
    pub quad: QuadraticForm,
    /// Some hidden neuron changed sign between `theta` and `theta'`.
    pub pattern_flipped: bool,
}

impl DeltaSample {
    /// `grad_w^T H_ww grad_w * (N - target)`.
    pub fn delta_ww(&self) -> f64 {
        self.quad.ww * self.residual
    }

    /// `grad_w^T H_wb grad_b * (N - target)`.
    pub fn delta_wb(&self) -> f64 {
        self.quad.wb * self.residual
    }

    pub fn delta_bb(&self) -> f64 {
        self.quad.bb * self.residual
    }
}

pub fn sgd_update_kernel(
    params: &NetworkParams,
    x: &[f64],
    target: f64,
    lambda: f64,
) -> Result<DeltaSample> {
    let arch = params.architecture();
    check_input(arch, x)?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "learning rate {lambda} must be finite and non-negative"
        )));
    }
    if !target.is_finite() {
        return Err(Error::InvalidArgument("target must be finite".into()));
    }
    let bp = backprop(params, x)?;
    let before = kernel_from(arch, &bp);
    let grad = gradient_from(arch, &bp);
    let residual = before.output - target;
    let quad = quadratic_form_from(params, &bp, &grad);

    let stepped = params.add_scaled(-lambda * residual, &grad)?;
    let bp_after = backprop(&stepped, x)?;
    let after = kernel_from(arch, &bp_after);
    let pattern_flipped = bp.trace.activation_pattern() != bp_after.trace.activation_pattern();

    Ok(DeltaSample {
        before,
        after,
        residual,
        delta_k: after.k - before.k,
        delta_k_lin: -2.0 * lambda * residual * quad.q,
        quad,
        pattern_flipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_network, WeightDistribution};
    use approx::assert_relative_eq;
    use ndarray::array;

    fn small_net(seed: u64) -> NetworkParams {
        let arch = Architecture::new(3, vec![5, 4]).unwrap();
        init_network(&arch, WeightDistribution::Normal, seed)
    }

    #[test]
    fn kernel_matches_gradient_norm() {
        for seed in 0..10 {
            let p = small_net(seed);
            let x = [0.3, -1.2, 0.7];
            let g = gradient(&p, &x).unwrap();
            let k = kernel_on_diagonal(&p, &x).unwrap();
            assert_relative_eq!(k.k, g.norm_sq(), max_relative = 1e-12);
            assert_relative_eq!(k.kb, g.dot_biases(&g), max_relative = 1e-12);
            assert_relative_eq!(k.kw, g.dot_weights(&g), max_relative = 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = small_net(3);
        let x = [0.5, 0.1, -0.4];
        let g = gradient(&p, &x).unwrap();
        let h = 1e-6;
        for i in 1..=3 {
            let (r, c) = p.weight(i).dim();
            for a in 0..r {
                for b in 0..c {
                    let mut q = p.clone();
                    q.weight_mut(i)[[a, b]] += h;
                    let up = forward(&q, &x).unwrap().output();
                    q.weight_mut(i)[[a, b]] -= 2.0 * h;
                    let dn = forward(&q, &x).unwrap().output();
                    let fd = (up - dn) / (2.0 * h);
                    assert!((fd - g.weights[i - 1][[a, b]]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn single_neuron_kernel() {
        let arch = Architecture::new(1, vec![1]).unwrap();
        let p = NetworkParams::from_parts(
            &arch,
            vec![array![[1.0]], array![[1.0]]],
            vec![array![0.0], array![0.0]],
        )
        .unwrap();
        let k = kernel_on_diagonal(&p, &[1.0]).unwrap();
        assert_relative_eq!(k.kw, 4.0, epsilon = 1e-14);
        assert_relative_eq!(k.kb, 2.0, epsilon = 1e-14);
        assert_relative_eq!(k.k, 6.0, epsilon = 1e-14);
    }

    #[test]
    fn exact_hvp_matches_central_differences() {
        for seed in 0..5 {
            let p = small_net(seed);
            let x = [0.9, -0.2, 0.4];
            let v = gradient(&p, &x).unwrap();
            let exact = hessian_vector_product(&p, &x, &v).unwrap();
            let fd = hessian_vector_product_fd(&p, &x, &v, None).unwrap();
            let diff = exact.scaled(-1.0);
            let err: f64 = diff
                .weights
                .iter()
                .zip(&fd.weights)
                .map(|(a, b)| (a + b).mapv(f64::abs).sum())
                .sum();
            assert!(err < 1e-6 * (1.0 + exact.max_abs()), "seed {seed}: {err}");
        }
    }

    #[test]
    fn bias_block_vanishes_and_form_is_symmetric() {
        let p = small_net(11);
        let x = [1.0, 1.0, 1.0];
        let v = gradient(&p, &x).unwrap();
        let q = hessian_quadratic_form(&p, &x, &v).unwrap();
        assert_eq!(q.bb, 0.0);
        let full = v.dot(&hessian_vector_product(&p, &x, &v).unwrap());
        assert_relative_eq!(q.q, full, max_relative = 1e-12);
        // v_b^T H_bw v_w agrees with v_w^T H_wb v_b.
        let h_vw = hessian_vector_product(&p, &x, &v.weights_only()).unwrap();
        assert_relative_eq!(
            v.biases_only().dot_biases(&h_vw),
            q.wb,
            max_relative = 1e-12
        );
    }

    #[test]
    fn zero_step_leaves_kernel_unchanged() {
        let p = small_net(2);
        let s = sgd_update_kernel(&p, &[1.0, 0.0, -1.0], 0.0, 0.0).unwrap();
        assert_eq!(s.delta_k, 0.0);
        assert_eq!(s.delta_k_lin, 0.0);
        assert!(!s.pattern_flipped);
        assert!(sgd_update_kernel(&p, &[1.0, 0.0, -1.0], 0.0, -1.0).is_err());
    }

    #[test]
    fn update_is_second_order_accurate() {
        let p = small_net(5);
        let x = [0.2, 0.8, -0.5];
        let mut rel = Vec::new();
        for lambda in [1e-3, 5e-4] {
            let s = sgd_update_kernel(&p, &x, 0.3, lambda).unwrap();
            assert!(!s.pattern_flipped);
            rel.push((s.delta_k - s.delta_k_lin).abs());
        }
        // Error is O(lambda^2): halving lambda cuts it roughly by four.
        assert!(rel[1] < 0.3 * rel[0] + 1e-15, "{rel:?}");
    }
}
