//! Exact sum-over-paths expectations for tiny networks.
//!
//! Every kernel moment is a sum over tuples of paths of products of weights
//! and ReLU indicators. The expectation factorizes layer by layer once the
//! rows of `W^{(j)}` feeding the visited neurons are symmetrized: each visited
//! hidden neuron contributes `1/2`, each edge carrying `m` weight factors
//! contributes `E[W^m]`, and each path crossing layer `j` contributes `s_j`.
//! The engine below walks the layers once, carrying the positions of up to
//! four paths, so the cost is polynomial in the widths rather than in the
//! number of paths.
//!
//! A layer with no visited neuron can switch the whole network off (all
//! pre-activations negative, probability `2^{-n_j}`), after which bias
//! derivatives further up vanish. The engine tracks this with an `alive`
//! flag, which makes the bias moments exact rather than leading order.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{FromPrimitive, One, Signed, ToPrimitive, Zero};
use serde::{Serialize, Serializer};

use crate::net::{check_input, forward, Architecture, NetworkParams, WeightDistribution};
use crate::{Error, Result};

pub type Rational = BigRational;

/// How the bias of the linear output neuron enters `K_b`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, serde::Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Convention {
    /// Derivative identically one.
    #[default]
    Corrected,
    /// Treated like a hidden neuron, with an indicator worth `1/2`.
    Paper,
}

impl std::str::FromStr for Convention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "corrected" => Ok(Convention::Corrected),
            "paper" => Ok(Convention::Paper),
            other => Err(Error::InvalidArgument(format!(
                "unknown convention '{other}'"
            ))),
        }
    }
}

/// Enumeration limits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct OracleCap {
    /// Paths per start neuron for realized path sums and brute-force scans.
    pub max_paths_per_start: u128,
    /// Bound on tuple transitions per layer for exact expectations.
    pub max_layer_transitions: u128,
}

impl Default for OracleCap {
    fn default() -> Self {
        Self {
            max_paths_per_start: 10_000,
            max_layer_transitions: 1_000_000,
        }
    }
}

pub fn mu4_exact(dist: WeightDistribution) -> Rational {
    let (num, den) = dist.fourth_moment_parts();
    rational(num, den)
}

fn rational(num: i64, den: i64) -> Rational {
    Rational::new(BigInt::from(num), BigInt::from(den))
}

fn exact_input(arch: &Architecture, x: &[f64]) -> Result<Vec<Rational>> {
    check_input(arch, x)?;
    Ok(x.iter()
        .map(|&v| Rational::from_f64(v).expect("finite input"))
        .collect())
}

// ---------------------------------------------------------------------------
// Transfer engine

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Start {
    /// Begins at an input neuron `a`, weighted by `x_a`.
    Input,
    /// Begins at a neuron `z` of some layer `>= 1`, shared by every path of
    /// the same group (a bias derivative).
    Group(u8),
}

/// A family of path tuples: where each path starts, and which pairs of paths
/// have one shared edge whose weight factor is removed (a weight derivative).
struct Family {
    starts: Vec<Start>,
    marks: Vec<(usize, usize)>,
    /// Forbid two marks at the same layer.
    distinct_marks: bool,
}

impl Family {
    fn groups(&self) -> u8 {
        self.starts
            .iter()
            .filter_map(|s| match s {
                Start::Group(g) => Some(g + 1),
                Start::Input => None,
            })
            .max()
            .unwrap_or(0)
    }
}

const UNSET: u8 = u8::MAX;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct State {
    pos: [u8; 4],
    started: u8,
    /// Layer at which each mark was placed, 0 while unplaced.
    marks: [u8; 2],
    alive: bool,
    /// Input-pattern class of four input paths, see [`input_class`].
    tag: u8,
}

/// Class of the starting neurons `(a_1, a_2, a_3, a_4)`: 1 for all equal,
/// 2 for `(1,2,1,2)`, 3 for `(1,1,2,2)`, 4 for `(1,2,2,1)` shapes, 0 otherwise.
fn input_class(a: &[u8]) -> u8 {
    if a.len() != 4 {
        return 0;
    }
    let (p, q, r, s) = (a[0], a[1], a[2], a[3]);
    if p == q && q == r && r == s {
        1
    } else if p == r && q == s {
        2
    } else if p == q && r == s {
        3
    } else if p == s && q == r {
        4
    } else {
        0
    }
}

/// Sum of `(mark layers, input class) -> contribution`.
type Breakdown = BTreeMap<(u8, u8, u8), Rational>;

struct Engine<'a> {
    arch: &'a Architecture,
    x: &'a [Rational],
    mu4: &'a Rational,
    convention: Convention,
}

/// Visit every tuple in `[n]^len` in lexicographic order.
fn for_each_tuple(n: usize, len: usize, mut f: impl FnMut(&[u8])) {
    let mut t = vec![0u8; len];
    if n == 0 && len > 0 {
        return;
    }
    loop {
        f(&t);
        let mut i = len;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            t[i] += 1;
            if (t[i] as usize) < n {
                break;
            }
            t[i] = 0;
        }
    }
}

impl Engine<'_> {
    fn check_cap(&self, k: usize, cap: &OracleCap) -> Result<()> {
        for i in 0..=self.arch.depth() {
            if self.arch.width(i) >= UNSET as usize {
                return Err(Error::EnumerationCap {
                    needed: self.arch.width(i) as u128,
                    cap: UNSET as u128 - 1,
                    unit: "neurons per layer",
                });
            }
        }
        for j in 1..=self.arch.depth() {
            let prev = (self.arch.width(j - 1) as u128 + 1).pow(k as u32);
            let next = (self.arch.width(j) as u128 + 1).pow(k as u32);
            let needed = prev.saturating_mul(next);
            if needed > cap.max_layer_transitions {
                return Err(Error::EnumerationCap {
                    needed,
                    cap: cap.max_layer_transitions,
                    unit: "tuple transitions per layer",
                });
            }
        }
        Ok(())
    }

    fn run(&self, family: &Family, cap: &OracleCap) -> Result<Breakdown> {
        let k = family.starts.len();
        assert!(k <= 4 && family.marks.len() <= 2);
        self.check_cap(k, cap)?;
        let arch = self.arch;
        let d = arch.depth();
        let groups = family.groups();
        let all_groups = (1u8 << groups) - 1;
        let x_nonzero = self.x.iter().any(|v| !v.is_zero());

        let inputs: Vec<usize> = (0..k)
            .filter(|&p| family.starts[p] == Start::Input)
            .collect();
        let mut cur: HashMap<State, Rational> = HashMap::new();
        for_each_tuple(arch.input_width(), inputs.len(), |a| {
            let mut w = Rational::one();
            for &ai in a {
                w *= &self.x[ai as usize];
            }
            if w.is_zero() && !inputs.is_empty() {
                return;
            }
            let mut pos = [UNSET; 4];
            for (slot, &p) in inputs.iter().enumerate() {
                pos[p] = a[slot];
            }
            let state = State {
                pos,
                started: 0,
                marks: [0, 0],
                alive: x_nonzero,
                tag: input_class(a),
            };
            *cur.entry(state).or_insert_with(Rational::zero) += w;
        });

        let half = rational(1, 2);
        let max_pow = 8;
        let half_pow: Vec<Rational> = (0..=max_pow).map(|e| pow(&half, e)).collect();
        let mu4_pow: Vec<Rational> = (0..=2).map(|e| pow(self.mu4, e)).collect();

        for j in 1..=d {
            let nj = arch.width(j);
            let (sn, sd) = arch.scale_sq_parts(j);
            let s2 = rational(sn as i64, sd as i64);
            let scale_pow: Vec<Rational> = (0..=2).map(|e| pow(&s2, e)).collect();
            let dead = if j < d {
                pow(&half, nj)
            } else {
                Rational::zero()
            };
            let survive = Rational::one() - &dead;
            let output = j == d;
            let mut next: HashMap<State, Rational> = HashMap::new();

            for (state, w) in &cur {
                let cont: Vec<usize> = (0..k).filter(|&p| state.pos[p] != UNSET).collect();
                let c = cont.len();
                if c % 2 == 1 {
                    continue;
                }
                let unstarted: Vec<u8> = (0..groups)
                    .filter(|g| state.started & (1 << g) == 0)
                    .collect();
                let open_marks: Vec<usize> = (0..family.marks.len())
                    .filter(|&m| state.marks[m] == 0)
                    .collect();
                let alive_prev = state.alive || c > 0;

                for_each_tuple(nj, c, |v| {
                    // Edge of each continuing path, and parity of every edge.
                    let edge = |idx: usize| (state.pos[cont[idx]], v[idx]);
                    for a in 0..c {
                        let same = (0..c).filter(|&b| edge(b) == edge(a)).count();
                        if same % 2 == 1 {
                            return;
                        }
                    }
                    let slot_of = |p: usize| cont.iter().position(|&q| q == p);
                    let eligible: Vec<usize> = open_marks
                        .iter()
                        .copied()
                        .filter(|&m| {
                            let (a, b) = family.marks[m];
                            matches!((slot_of(a), slot_of(b)), (Some(sa), Some(sb)) if edge(sa) == edge(sb))
                        })
                        .collect();

                    for subset in 0u8..(1 << eligible.len()) {
                        if family.distinct_marks && subset.count_ones() > 1 {
                            continue;
                        }
                        let placed: Vec<usize> = eligible
                            .iter()
                            .enumerate()
                            .filter(|(bit, _)| subset & (1 << bit) != 0)
                            .map(|(_, &m)| m)
                            .collect();
                        // Remaining weight factors per distinct edge.
                        let mut counts: Vec<((u8, u8), i32)> = Vec::new();
                        for a in 0..c {
                            match counts.iter_mut().find(|(e, _)| *e == edge(a)) {
                                Some((_, n)) => *n += 1,
                                None => counts.push((edge(a), 1)),
                            }
                        }
                        for &m in &placed {
                            let e = edge(slot_of(family.marks[m].0).expect("eligible"));
                            counts.iter_mut().find(|(f, _)| *f == e).expect("edge").1 -= 2;
                        }
                        let fourth = counts.iter().filter(|(_, n)| *n == 4).count();

                        let mut marks = state.marks;
                        for &m in &placed {
                            marks[m] = j as u8;
                        }
                        let mut base = &scale_pow[c / 2] * &mu4_pow[fourth];
                        base *= w;

                        // Groups starting at this layer; at the output all must start.
                        let options = if output { 1 } else { nj + 1 };
                        let combos = options.pow(unstarted.len() as u32);
                        for combo in 0..combos {
                            let mut rest = combo;
                            let mut pos = state.pos;
                            for &p in &cont {
                                pos[p] = v[cont.iter().position(|&q| q == p).unwrap()];
                            }
                            let mut started = state.started;
                            let mut rows: BTreeSet<u8> = v.iter().copied().collect();
                            let mut new_start = false;
                            for &g in &unstarted {
                                let choice = rest % options;
                                rest /= options;
                                let z = if output {
                                    Some(0u8)
                                } else if choice == 0 {
                                    None
                                } else {
                                    Some((choice - 1) as u8)
                                };
                                if let Some(z) = z {
                                    started |= 1 << g;
                                    new_start = true;
                                    rows.insert(z);
                                    for (p, s) in family.starts.iter().enumerate() {
                                        if *s == Start::Group(g) {
                                            pos[p] = z;
                                        }
                                    }
                                }
                            }
                            let mut emit = |alive: bool, factor: Rational| {
                                let st = State {
                                    pos,
                                    started,
                                    marks,
                                    alive,
                                    tag: state.tag,
                                };
                                *next.entry(st).or_insert_with(Rational::zero) += factor;
                            };
                            if output {
                                if self.convention == Convention::Paper && new_start {
                                    if alive_prev {
                                        emit(true, &base * &half);
                                    }
                                } else {
                                    emit(alive_prev, base.clone());
                                }
                            } else if rows.is_empty() {
                                if state.alive {
                                    emit(true, &base * &survive);
                                    emit(false, &base * &dead);
                                } else {
                                    emit(false, base.clone());
                                }
                            } else if alive_prev {
                                emit(true, &base * &half_pow[rows.len()]);
                            }
                        }
                    }
                });
            }
            next.retain(|_, v| !v.is_zero());
            cur = next;
        }

        let mut out = Breakdown::new();
        for (state, w) in cur {
            let marks_done = (0..family.marks.len()).all(|m| state.marks[m] != 0);
            if state.started == all_groups && marks_done {
                *out.entry((state.marks[0], state.marks[1], state.tag))
                    .or_insert_with(Rational::zero) += w;
            }
        }
        Ok(out)
    }
}

fn pow(r: &Rational, e: usize) -> Rational {
    (0..e).fold(Rational::one(), |acc, _| acc * r)
}

fn total(b: &Breakdown) -> Rational {
    b.values().fold(Rational::zero(), |acc, v| acc + v)
}

// ---------------------------------------------------------------------------
// Exact moments

/// `E[K_w]` by exact enumeration.
pub fn exact_moment_kw(arch: &Architecture, x: &[f64], cap: &OracleCap) -> Result<Rational> {
    let xr = exact_input(arch, x)?;
    let mu4 = rational(3, 1);
    let engine = Engine {
        arch,
        x: &xr,
        mu4: &mu4,
        convention: Convention::Corrected,
    };
    Ok(total(&engine.run(&kw_family(), cap)?))
}

/// `E[K_w^2]` by exact enumeration.
pub fn exact_second_moment_kw(
    arch: &Architecture,
    x: &[f64],
    mu4: &Rational,
    cap: &OracleCap,
) -> Result<Rational> {
    let xr = exact_input(arch, x)?;
    let engine = Engine {
        arch,
        x: &xr,
        mu4,
        convention: Convention::Corrected,
    };
    Ok(total(&engine.run(&kw2_family(), cap)?))
}

/// `E[K] = E[K_w] + E[K_b]` by exact enumeration.
pub fn exact_kernel_mean(
    arch: &Architecture,
    x: &[f64],
    convention: Convention,
    cap: &OracleCap,
) -> Result<Rational> {
    let xr = exact_input(arch, x)?;
    let mu4 = rational(3, 1);
    let engine = Engine {
        arch,
        x: &xr,
        mu4: &mu4,
        convention,
    };
    let kw = total(&engine.run(&kw_family(), cap)?);
    let kb = total(&engine.run(
        &Family {
            starts: vec![Start::Group(0); 2],
            marks: vec![],
            distinct_marks: false,
        },
        cap,
    )?);
    Ok(kw + kb)
}

fn kw_family() -> Family {
    Family {
        starts: vec![Start::Input; 2],
        marks: vec![(0, 1)],
        distinct_marks: false,
    }
}

fn kw2_family() -> Family {
    Family {
        starts: vec![Start::Input; 4],
        marks: vec![(0, 1), (2, 3)],
        distinct_marks: false,
    }
}

fn serialize_rational<S: Serializer>(r: &Rational, s: S) -> std::result::Result<S::Ok, S::Error> {
    ExactValue::from(r).serialize(s)
}

fn serialize_terms<S: Serializer>(
    terms: &[LayerPairTerm],
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(terms)
}

/// A rational printed exactly and as the nearest float.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExactValue {
    pub exact: String,
    pub value: f64,
}

impl From<&Rational> for ExactValue {
    fn from(r: &Rational) -> Self {
        Self {
            exact: r.to_string(),
            value: to_f64(r),
        }
    }
}

pub fn to_f64(r: &Rational) -> f64 {
    r.to_f64().unwrap_or_else(|| {
        if r.is_negative() {
            f64::NEG_INFINITY
        } else {
            f64::INFINITY
        }
    })
}

/// One term of a layer-pair decomposition: the contribution of tuples whose
/// two marked edges sit at layers `i1`, `i2`, with input pattern `class`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerPairTerm {
    pub class: u8,
    pub i1: usize,
    pub i2: usize,
    #[serde(serialize_with = "serialize_rational")]
    pub value: Rational,
}

fn pair_terms(b: &Breakdown) -> Vec<LayerPairTerm> {
    b.iter()
        .map(|(&(i1, i2, class), v)| LayerPairTerm {
            class,
            i1: i1 as usize,
            i2: i2 as usize,
            value: v.clone(),
        })
        .collect()
}

/// Exact first and second moments of the kernel pieces for one convention.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleBreakdown {
    pub convention: Convention,
    #[serde(serialize_with = "serialize_rational")]
    pub mu4: Rational,
    #[serde(serialize_with = "serialize_rational")]
    pub kw_mean: Rational,
    #[serde(serialize_with = "serialize_rational")]
    pub kb_mean: Rational,
    #[serde(serialize_with = "serialize_rational")]
    pub kernel_mean: Rational,
    #[serde(serialize_with = "serialize_rational")]
    pub kw_second: Rational,
    #[serde(serialize_with = "serialize_rational")]
    pub kb_second: Rational,
    #[serde(serialize_with = "serialize_rational")]
    pub kb_kw: Rational,
    /// `E[K^2] = E[K_w^2] + 2 E[K_b K_w] + E[K_b^2]`.
    #[serde(serialize_with = "serialize_rational")]
    pub kernel_second: Rational,
    /// `E[grad_w^T H_ww grad_w * N]`.
    #[serde(serialize_with = "serialize_rational")]
    pub delta_ww: Rational,
    /// `E[grad_w^T H_wb grad_b * N]`.
    #[serde(serialize_with = "serialize_rational")]
    pub delta_wb: Rational,
    /// `E[K_w^2]` split by the layers of the two marked edges and the input
    /// pattern of the four paths.
    #[serde(serialize_with = "serialize_terms")]
    pub kw_second_terms: Vec<LayerPairTerm>,
    /// `E[Delta_ww]` split the same way.
    #[serde(serialize_with = "serialize_terms")]
    pub delta_ww_terms: Vec<LayerPairTerm>,
}

impl OracleBreakdown {
    /// Exact expectation of the linearized update `-2 lambda (N - target) q`
    /// divided by `-2 lambda`. The target drops out in expectation.
    pub fn update_mean_over_lambda(&self) -> Rational {
        &self.delta_ww + rational(2, 1) * &self.delta_wb
    }
}

/// Exact moments of `K_w`, `K_b`, their product and the update contractions.
pub fn exact_bias_and_mixed_moments(
    arch: &Architecture,
    x: &[f64],
    mu4: &Rational,
    convention: Convention,
    cap: &OracleCap,
) -> Result<OracleBreakdown> {
    let xr = exact_input(arch, x)?;
    let engine = Engine {
        arch,
        x: &xr,
        mu4,
        convention,
    };
    let g0 = Start::Group(0);
    let g1 = Start::Group(1);
    let i = Start::Input;
    let kw = total(&engine.run(&kw_family(), cap)?);
    let kw2 = engine.run(&kw2_family(), cap)?;
    let kb = total(&engine.run(
        &Family {
            starts: vec![g0, g0],
            marks: vec![],
            distinct_marks: false,
        },
        cap,
    )?);
    let kb2 = total(&engine.run(
        &Family {
            starts: vec![g0, g0, g1, g1],
            marks: vec![],
            distinct_marks: false,
        },
        cap,
    )?);
    let kbkw = total(&engine.run(
        &Family {
            starts: vec![g0, g0, i, i],
            marks: vec![(2, 3)],
            distinct_marks: false,
        },
        cap,
    )?);
    let dww = engine.run(
        &Family {
            starts: vec![i; 4],
            marks: vec![(0, 1), (1, 2)],
            distinct_marks: true,
        },
        cap,
    )?;
    let dwb = total(&engine.run(
        &Family {
            starts: vec![i, g0, g0, i],
            marks: vec![(0, 1)],
            distinct_marks: false,
        },
        cap,
    )?);
    let kw2_total = total(&kw2);
    let two = rational(2, 1);
    Ok(OracleBreakdown {
        convention,
        mu4: mu4.clone(),
        kernel_mean: &kw + &kb,
        kernel_second: &kw2_total + &two * &kbkw + &kb2,
        kw_mean: kw,
        kb_mean: kb,
        kw_second: kw2_total,
        kb_second: kb2,
        kb_kw: kbkw,
        delta_ww: total(&dww),
        delta_wb: dwb,
        kw_second_terms: pair_terms(&kw2),
        delta_ww_terms: pair_terms(&dww),
    })
}

/// Both output-bias conventions.
pub fn exact_breakdowns(
    arch: &Architecture,
    x: &[f64],
    mu4: &Rational,
    cap: &OracleCap,
) -> Result<[OracleBreakdown; 2]> {
    Ok([
        exact_bias_and_mixed_moments(arch, x, mu4, Convention::Corrected, cap)?,
        exact_bias_and_mixed_moments(arch, x, mu4, Convention::Paper, cap)?,
    ])
}

/// Exact `E[K_b]` including the chance that a layer switches the network off:
/// `1 + (1/2) sum_{l=1}^{d-1} prod_{j=1}^{l-1} (1 - 2^{-n_j})` for the
/// corrected convention, with `1` replaced by `(1/2) prod_{j<d} (1 - 2^{-n_j})`
/// for the paper convention. Assumes `x != 0`.
pub fn bias_mean_closed_form(arch: &Architecture, convention: Convention) -> Rational {
    let d = arch.depth();
    let half = rational(1, 2);
    let mut alive = Rational::one();
    let mut sum = Rational::zero();
    for l in 1..d {
        sum += &half * &alive;
        alive *= Rational::one() - pow(&half, arch.width(l));
    }
    match convention {
        Convention::Corrected => sum + Rational::one(),
        Convention::Paper => sum + &half * &alive,
    }
}

// ---------------------------------------------------------------------------
// Realized path sums

/// Output and `K_w` of one realization, evaluated path by path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RealizedPathSum {
    pub output: f64,
    pub kw: f64,
    pub paths: u128,
}

fn paths_per_start(arch: &Architecture) -> u128 {
    arch.hidden_widths().iter().map(|&n| n as u128).product()
}

fn check_paths(arch: &Architecture, cap: &OracleCap) -> Result<u128> {
    let per_start = paths_per_start(arch);
    if per_start > cap.max_paths_per_start {
        return Err(Error::EnumerationCap {
            needed: per_start,
            cap: cap.max_paths_per_start,
            unit: "paths per start neuron",
        });
    }
    Ok(per_start)
}

/// Evaluate `N` and `K_w` as sums over open input-to-output paths. Needs
/// zero biases, where `N` is exactly a path sum.
pub fn pathsum_realized(
    params: &NetworkParams,
    x: &[f64],
    cap: &OracleCap,
) -> Result<RealizedPathSum> {
    let arch = params.architecture();
    check_paths(arch, cap)?;
    if !params.has_zero_biases() {
        return Err(Error::InvalidArgument("path sums need zero biases".into()));
    }
    let trace = forward(params, x)?;
    let pattern = trace.activation_pattern();
    let d = arch.depth();
    let scales: Vec<f64> = (1..=d).map(|i| arch.scale(i)).collect();
    // Per-edge sums of `d(path weight) / dW_e` over the paths through `e`.
    let mut grads: Vec<ndarray::Array2<f64>> = (1..=d)
        .map(|i| ndarray::Array2::zeros((arch.width(i), arch.width(i - 1))))
        .collect();
    let mut output = 0.0;
    let mut paths = 0u128;
    let hidden = arch.hidden_widths();
    let mut gamma = vec![0u8; d + 1];
    let mut eff = vec![0.0; d];
    let mut suffix = vec![1.0; d + 1];
    for a in 0..arch.input_width() {
        let xa = x[a];
        let mut visit = |mid: &[u8]| {
            paths += 1;
            if mid
                .iter()
                .enumerate()
                .any(|(l, &z)| !pattern[l][z as usize])
            {
                return;
            }
            gamma[0] = a as u8;
            gamma[1..d].copy_from_slice(mid);
            gamma[d] = 0;
            for i in 1..=d {
                let w = params.weight(i)[[gamma[i] as usize, gamma[i - 1] as usize]];
                eff[i - 1] = scales[i - 1] * w;
            }
            for i in (0..d).rev() {
                suffix[i] = suffix[i + 1] * eff[i];
            }
            output += xa * suffix[0];
            let mut prefix = xa;
            for i in 0..d {
                grads[i][[gamma[i + 1] as usize, gamma[i] as usize]] +=
                    prefix * scales[i] * suffix[i + 1];
                prefix *= eff[i];
            }
        };
        for_each_mixed_tuple(hidden, &mut visit);
    }
    let kw = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum();
    Ok(RealizedPathSum { output, kw, paths })
}

pub fn pathsum_kw_realized(params: &NetworkParams, x: &[f64], cap: &OracleCap) -> Result<f64> {
    Ok(pathsum_realized(params, x, cap)?.kw)
}

/// Visit `[n_1] x ... x [n_m]` in lexicographic order.
fn for_each_mixed_tuple(widths: &[usize], f: &mut impl FnMut(&[u8])) {
    let m = widths.len();
    let mut t = vec![0u8; m];
    loop {
        f(&t);
        let mut i = m;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            t[i] += 1;
            if (t[i] as usize) < widths[i] {
                break;
            }
            t[i] = 0;
        }
    }
}

/// Full paths `gamma(0), ..., gamma(d)` starting at `start`.
fn paths_from(arch: &Architecture, start: u8) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    for_each_mixed_tuple(arch.hidden_widths(), &mut |mid: &[u8]| {
        let mut p = Vec::with_capacity(mid.len() + 2);
        p.push(start);
        p.extend_from_slice(mid);
        p.push(0);
        out.push(p);
    });
    out
}

// ---------------------------------------------------------------------------
// Combinatorial checks

type Edge = (u8, u8);

/// Sorted edge multiset of a path tuple at each layer `1..=d`.
fn edge_multiset(paths: &[&Vec<u8>], d: usize) -> Vec<Vec<Edge>> {
    (1..=d)
        .map(|i| {
            let mut e: Vec<Edge> = paths.iter().map(|p| (p[i - 1], p[i])).collect();
            e.sort_unstable();
            e
        })
        .collect()
}

fn is_even(layers: &[Vec<Edge>]) -> bool {
    layers.iter().all(|es| {
        let mut i = 0;
        while i < es.len() {
            let run = es[i..].iter().take_while(|&&e| e == es[i]).count();
            if run % 2 == 1 {
                return false;
            }
            i += run;
        }
        true
    })
}

fn distinct<T: Ord + Copy>(it: impl Iterator<Item = T>) -> usize {
    it.collect::<BTreeSet<T>>().len()
}

/// Occupied neurons `|R(E(l))|` for `l = 0..=d`; layer 0 uses the starts.
fn right_sizes(layers: &[Vec<Edge>]) -> Vec<usize> {
    let mut out = vec![distinct(layers[0].iter().map(|e| e.0))];
    out.extend(layers.iter().map(|es| distinct(es.iter().map(|e| e.1))));
    out
}

fn left_sizes(layers: &[Vec<Edge>]) -> Vec<usize> {
    layers
        .iter()
        .map(|es| distinct(es.iter().map(|e| e.0)))
        .collect()
}

fn format_edges(layers: &[Vec<Edge>]) -> String {
    layers
        .iter()
        .map(|es| {
            es.iter()
                .map(|(a, b)| format!("{a}>{b}"))
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect::<Vec<_>>()
        .join(" | ")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FiberMismatch {
    pub edges: String,
    pub brute: u64,
    pub formula: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FiberReport {
    /// Distinct doubled edge multisets seen.
    pub instances: usize,
    pub pairs_scanned: u64,
    pub mismatches: Vec<FiberMismatch>,
}

/// Compare the number of path pairs `V` with a given doubled edge multiset to
/// `2^{#loops(V) + 1{|V(0)| = 2}}`.
pub fn verify_fiber_counts(arch: &Architecture, cap: &OracleCap) -> Result<FiberReport> {
    let per_start = check_paths(arch, cap)?;
    let total = per_start * arch.input_width() as u128;
    if total * total > cap.max_layer_transitions {
        return Err(Error::EnumerationCap {
            needed: total * total,
            cap: cap.max_layer_transitions,
            unit: "path pairs",
        });
    }
    let d = arch.depth();
    let paths: Vec<Vec<u8>> = (0..arch.input_width() as u8)
        .flat_map(|a| paths_from(arch, a))
        .collect();
    let mut groups: BTreeMap<Vec<Vec<Edge>>, (u64, u64)> = BTreeMap::new();
    let mut scanned = 0u64;
    for p in &paths {
        for q in &paths {
            scanned += 1;
            let layers = edge_multiset(&[p, q], d);
            let sizes = right_sizes(&layers);
            let loops = (1..=d)
                .filter(|&i| sizes[i - 1] == 1 && sizes[i] == 2)
                .count();
            let exponent = loops + usize::from(sizes[0] == 2);
            let entry = groups.entry(layers).or_insert((0, 1u64 << exponent));
            entry.0 += 1;
        }
    }
    let mismatches = groups
        .iter()
        .filter(|(_, (brute, formula))| brute != formula)
        .map(|(layers, &(brute, formula))| FiberMismatch {
            edges: format_edges(layers),
            brute,
            formula,
        })
        .collect();
    Ok(FiberReport {
        instances: groups.len(),
        pairs_scanned: scanned,
        mismatches,
    })
}

/// Which pair of paths must share the second marked edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum JacobianKind {
    /// `gamma_1, gamma_2` share `e_1`; `gamma_3, gamma_4` share `e_2`.
    Disjoint,
    /// `gamma_1, gamma_2` share `e_1`; `gamma_2, gamma_3` share `e_2 != e_1`.
    Chained,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct JacobianEntry {
    /// Input pattern `1..=4`.
    pub pattern: u8,
    pub edges: String,
    pub i1: usize,
    pub i2: usize,
    pub loops: usize,
    pub brute: u64,
    #[serde(serialize_with = "serialize_rational")]
    pub formula: Rational,
    /// `brute / 6^{loops}`.
    #[serde(serialize_with = "serialize_rational")]
    pub ratio: Rational,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct JacobianReport {
    pub kind: JacobianKind,
    pub entries: usize,
    pub mismatches: usize,
    pub discrepancy_rate: f64,
    /// Distinct values of `brute / 6^{loops}` over all entries.
    pub observed_ratios: Vec<String>,
    /// Distinct values of `A(E, i1, i2)` produced by the formula.
    pub formula_weights: Vec<String>,
    /// Every entry where the brute count and the formula disagree.
    pub mismatch_entries: Vec<JacobianEntry>,
}

/// Starting neurons of the four input patterns.
const PATTERNS: [[u8; 4]; 4] = [[0, 0, 0, 0], [0, 1, 0, 1], [0, 0, 1, 1], [0, 1, 1, 0]];

/// Compare brute-force counts of even path quadruples with a given edge
/// multiset and marked-edge constraint against `6^{#loops} A (1 or C_hat)`,
/// reading the undefined set in the last case of `A` as "two occupied
/// neurons at both marked layers".
pub fn verify_jacobian_counts(
    arch: &Architecture,
    kind: JacobianKind,
    cap: &OracleCap,
) -> Result<JacobianReport> {
    let per_start = check_paths(arch, cap)?;
    if per_start.pow(4) > cap.max_layer_transitions {
        return Err(Error::EnumerationCap {
            needed: per_start.pow(4),
            cap: cap.max_layer_transitions,
            unit: "path quadruples per pattern",
        });
    }
    let d = arch.depth();
    let patterns = if arch.input_width() >= 2 { 4 } else { 1 };
    let six = rational(6, 1);
    let mut all_entries = Vec::new();

    for (j, starts) in PATTERNS.iter().take(patterns).enumerate() {
        let from: Vec<Vec<Vec<u8>>> = starts.iter().map(|&a| paths_from(arch, a)).collect();
        // (edges, i1, i2) -> brute count; every even E gets all layer pairs.
        let mut counts: BTreeMap<Vec<Vec<Edge>>, BTreeMap<(usize, usize), u64>> = BTreeMap::new();
        for g1 in &from[0] {
            for g2 in &from[1] {
                for g3 in &from[2] {
                    for g4 in &from[3] {
                        let gamma = [g1, g2, g3, g4];
                        let layers = edge_multiset(&gamma, d);
                        if !is_even(&layers) {
                            continue;
                        }
                        let shares = |a: usize, b: usize, i: usize| {
                            gamma[a][i - 1] == gamma[b][i - 1] && gamma[a][i] == gamma[b][i]
                        };
                        let slot = counts.entry(layers).or_default();
                        for i1 in 1..=d {
                            for i2 in 1..=d {
                                let hit = match kind {
                                    JacobianKind::Disjoint => shares(0, 1, i1) && shares(2, 3, i2),
                                    JacobianKind::Chained => {
                                        i1 != i2 && shares(0, 1, i1) && shares(1, 2, i2)
                                    }
                                };
                                let c = slot.entry((i1, i2)).or_insert(0);
                                if hit {
                                    *c += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
        for (layers, pairs) in counts {
            let r = right_sizes(&layers);
            let l = left_sizes(&layers);
            let loops = (1..=d).filter(|&i| l[i - 1] == 1 && r[i] == 2).count();
            let scale = pow(&six, loops);
            for ((i1, i2), brute) in pairs {
                if kind == JacobianKind::Chained && i1 == i2 {
                    continue;
                }
                let mut formula = &scale * jacobian_weight(&l, &r, i1, i2);
                if j >= 2 && !collision_before(&r, i1.min(i2)) {
                    formula = Rational::zero();
                }
                if kind == JacobianKind::Chained && !collision_between(&r, i1, i2) {
                    formula = Rational::zero();
                }
                if brute == 0 && formula.is_zero() {
                    continue;
                }
                all_entries.push(JacobianEntry {
                    pattern: j as u8 + 1,
                    edges: format_edges(&layers),
                    i1,
                    i2,
                    loops,
                    brute,
                    ratio: Rational::from_integer(BigInt::from(brute)) / &scale,
                    formula,
                });
            }
        }
    }

    let entries = all_entries.len();
    let ratios: BTreeSet<Rational> = all_entries.iter().map(|e| e.ratio.clone()).collect();
    let weights: BTreeSet<Rational> = all_entries
        .iter()
        .map(|e| &e.formula / pow(&six, e.loops))
        .collect();
    let mismatch_entries: Vec<JacobianEntry> = all_entries
        .into_iter()
        .filter(|e| Rational::from_integer(BigInt::from(e.brute)) != e.formula)
        .collect();
    let mismatches = mismatch_entries.len();
    Ok(JacobianReport {
        kind,
        entries,
        mismatches,
        discrepancy_rate: if entries == 0 {
            0.0
        } else {
            mismatches as f64 / entries as f64
        },
        observed_ratios: ratios.iter().map(|r| r.to_string()).collect(),
        formula_weights: weights.iter().map(|r| r.to_string()).collect(),
        mismatch_entries,
    })
}

/// `A(E, i1, i2)` from the occupied-neuron counts `|L(E(i))|` (indexed
/// `1..=d` at `l[i - 1]`) and `|R(E(i))|` (indexed `0..=d`).
fn jacobian_weight(l: &[usize], r: &[usize], i1: usize, i2: usize) -> Rational {
    let pinned = |i: usize| l[i - 1] == 1 && r[i] == 1;
    let lo = i1.min(i2);
    let hi = i1.max(i2);
    let merge_between = (lo..hi).any(|m| r[m] == 1);
    let mut a = Rational::zero();
    if pinned(i1) && pinned(i2) {
        a += Rational::one();
    }
    if (pinned(i1) && r[i2] == 2) || (pinned(i2) && r[i1] == 2) {
        a += rational(1, 6);
    }
    if r[i1] == 2 && r[i2] == 2 && !merge_between {
        a += rational(1, 6);
    }
    if r[i1] == 2 && r[i2] == 2 && merge_between {
        a += rational(1, 36);
    }
    a
}

/// Some layer `0..upto` has a single occupied neuron.
fn collision_before(r: &[usize], upto: usize) -> bool {
    (0..upto).any(|m| r[m] == 1)
}

/// Some layer in `[min(i1, i2), max(i1, i2 - 1)]` has a single occupied neuron.
fn collision_between(r: &[usize], i1: usize, i2: usize) -> bool {
    let lo = i1.min(i2);
    let hi = i1.max(i2 - 1);
    (lo..=hi).any(|m| r[m] == 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::init_network;
    use crate::ntk::kernel_on_diagonal;

    fn arch(n0: usize, hidden: &[usize]) -> Architecture {
        Architecture::new(n0, hidden.to_vec()).unwrap()
    }

    fn q(n: i64, d: i64) -> Rational {
        rational(n, d)
    }

    #[test]
    fn first_moment_of_kw_is_exact() {
        let cap = OracleCap::default();
        for (a, x) in [
            (arch(2, &[2, 2]), vec![1.0, 1.0]),
            (arch(3, &[2, 3]), vec![0.5, -1.0, 2.0]),
            (arch(1, &[]), vec![3.0]),
        ] {
            let got = exact_moment_kw(&a, &x, &cap).unwrap();
            let x2: Rational = x.iter().map(|&v| Rational::from_f64(v * v).unwrap()).sum();
            let want = Rational::from_integer(BigInt::from(a.depth())) * x2
                / Rational::from_integer(BigInt::from(a.input_width()));
            assert_eq!(got, want);
        }
    }

    #[test]
    fn bias_mean_matches_closed_form() {
        let cap = OracleCap::default();
        let a = arch(2, &[2, 3, 1]);
        for conv in [Convention::Corrected, Convention::Paper] {
            let b = exact_bias_and_mixed_moments(&a, &[1.0, -0.5], &q(3, 1), conv, &cap).unwrap();
            assert_eq!(b.kb_mean, bias_mean_closed_form(&a, conv));
        }
        // Single linear layer: the only bias derivative is one.
        let b = exact_bias_and_mixed_moments(
            &arch(2, &[]),
            &[1.0, 1.0],
            &q(3, 1),
            Convention::Corrected,
            &cap,
        )
        .unwrap();
        assert_eq!(b.kb_mean, q(1, 1));
        assert_eq!(b.kb_second, q(1, 1));
    }

    #[test]
    fn single_neuron_chain_by_hand() {
        // n0 = n1 = n2 = 1, x = 1: the second hidden layer is dead half the time.
        let b = exact_bias_and_mixed_moments(
            &arch(1, &[1, 1]),
            &[1.0],
            &q(3, 1),
            Convention::Corrected,
            &OracleCap::default(),
        )
        .unwrap();
        assert_eq!(b.kb_mean, q(7, 4));
    }

    #[test]
    fn zero_input_leaves_only_output_bias() {
        let b = exact_bias_and_mixed_moments(
            &arch(2, &[2, 2]),
            &[0.0, 0.0],
            &q(3, 1),
            Convention::Corrected,
            &OracleCap::default(),
        )
        .unwrap();
        assert_eq!(b.kw_mean, q(0, 1));
        assert_eq!(b.kb_mean, q(1, 1));
        assert_eq!(b.kb_kw, q(0, 1));
        assert_eq!(b.delta_ww, q(0, 1));
    }

    #[test]
    fn second_moments_dominate_squares() {
        let b = exact_bias_and_mixed_moments(
            &arch(2, &[2, 2]),
            &[1.0, 1.0],
            &q(9, 5),
            Convention::Corrected,
            &OracleCap::default(),
        )
        .unwrap();
        assert!(b.kw_second >= &b.kw_mean * &b.kw_mean);
        assert!(b.kb_second >= &b.kb_mean * &b.kb_mean);
        assert!(b.kb_kw >= q(0, 1));
        assert!(b.kernel_second >= &b.kernel_mean * &b.kernel_mean);
    }

    #[test]
    fn realized_path_sum_matches_backprop() {
        let cap = OracleCap::default();
        for seed in 0..20 {
            let a = arch(2, &[2, 3]);
            let p = init_network(&a, WeightDistribution::Normal, seed);
            let x = [0.7, -1.3];
            let ps = pathsum_realized(&p, &x, &cap).unwrap();
            let k = kernel_on_diagonal(&p, &x).unwrap();
            assert!((ps.kw - k.kw).abs() <= 1e-10 * k.kw.abs().max(1e-300));
            assert!((ps.output - k.output).abs() <= 1e-10 * (1.0 + k.output.abs()));
        }
    }

    #[test]
    fn realized_path_sum_edge_cases() {
        let cap = OracleCap::default();
        let a = arch(3, &[]);
        let p = init_network(&a, WeightDistribution::Uniform, 4);
        let kw = pathsum_kw_realized(&p, &[1.0, 2.0, 2.0], &cap).unwrap();
        assert!((kw - 3.0).abs() < 1e-12);
        let a = arch(2, &[2, 2]);
        let p = init_network(&a, WeightDistribution::Normal, 4);
        assert_eq!(pathsum_kw_realized(&p, &[0.0, 0.0], &cap).unwrap(), 0.0);
        let tight = OracleCap {
            max_paths_per_start: 3,
            ..OracleCap::default()
        };
        assert!(matches!(
            pathsum_kw_realized(&p, &[1.0, 0.0], &tight),
            Err(Error::EnumerationCap { .. })
        ));
    }

    #[test]
    fn fiber_counts_hold_on_small_graphs() {
        let cap = OracleCap::default();
        for a in [arch(2, &[2, 2]), arch(3, &[3]), arch(2, &[3, 2, 2])] {
            let r = verify_fiber_counts(&a, &cap).unwrap();
            assert!(r.mismatches.is_empty(), "{:?}", r.mismatches);
            assert!(r.instances > 0);
        }
    }

    #[test]
    fn engine_respects_cap() {
        let tight = OracleCap {
            max_layer_transitions: 100,
            ..OracleCap::default()
        };
        assert!(matches!(
            exact_moment_kw(&arch(2, &[16, 16]), &[1.0, 1.0], &tight),
            Err(Error::EnumerationCap { .. })
        ));
    }

    #[test]
    fn input_classes() {
        assert_eq!(input_class(&[1, 1, 1, 1]), 1);
        assert_eq!(input_class(&[0, 1, 0, 1]), 2);
        assert_eq!(input_class(&[0, 0, 1, 1]), 3);
        assert_eq!(input_class(&[0, 1, 1, 0]), 4);
        assert_eq!(input_class(&[0, 1, 1, 1]), 0);
    }
}
