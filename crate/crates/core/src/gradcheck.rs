//! Finite-difference verification of every analytic derivative.
//!
//! Three suites run at a toy scale: each differentiation primitive's reverse
//! pass, the network's input derivatives (`d(phi)/dw`, `d(phi)/dt`,
//! `d|J|/dt`), and the parameter gradient of the full fitting loss. Analytic
//! values are computed in the requested precision; reference differences are
//! always taken in f64.

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffengine::{Eager, Op, Ops, Precision, Real, Tape};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossContext, LossWeights, SamplePlan};
use crate::network::{DerivRequest, DisplacementResult, NetworkConfig, NetworkState};
use crate::trainer::loss_and_grads;
use crate::volume::{Scan, Volume3D, Volume4DSeries};

/// Relative tolerance for a precision.
pub fn tolerance(precision: Precision) -> f64 {
    match precision {
        Precision::F64 => 1e-4,
        Precision::F32 => 1e-2,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Hidden width of the toy network.
    pub width: usize,
    /// Random `(w, t)` points in the network suite.
    pub points: usize,
    pub precision: Precision,
    /// Name of a check whose analytic values are perturbed before comparison.
    pub corrupt: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 16,
            points: 200,
            precision: Precision::F64,
            corrupt: None,
        }
    }
}

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct TermCheck {
    pub name: String,
    /// Worst relative error over all compared entries.
    pub worst: f64,
    pub tolerance: f64,
    /// Where the worst error occurred.
    pub location: String,
    pub compared: usize,
}

impl TermCheck {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub precision: Precision,
    pub checks: Vec<TermCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(TermCheck::passed)
    }

    /// The check with the largest error relative to its tolerance.
    pub fn worst_offender(&self) -> Option<&TermCheck> {
        self.checks
            .iter()
            .max_by(|a, b| (a.worst / a.tolerance).total_cmp(&(b.worst / b.tolerance)))
    }

    pub fn check(&self, name: &str) -> Option<&TermCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Names of every check, in report order.
pub fn check_names() -> Vec<String> {
    let mut names: Vec<String> = PRIMITIVES.iter().map(|p| format!("primitive.{p}")).collect();
    names.extend(NETWORK_TERMS.iter().map(|t| format!("network.{t}")));
    names.push(LOSS_TERM.to_string());
    names
}

const PRIMITIVES: [&str; 26] = [
    "affine",
    "linear",
    "add_row",
    "broadcast",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "sin",
    "cos",
    "leaky",
    "leaky_tangent",
    "square",
    "relu",
    "min",
    "sum",
    "mean",
    "row_sum",
    "stack3x3",
    "stack3x3_identity",
    "det3",
    "adj3",
    "matmul3",
    "trace3",
    "trilinear",
];

const NETWORK_TERMS: [&str; 3] = ["spatial_jacobian", "dphi_dt", "jacdet_dt"];
const LOSS_TERM: &str = "loss.parameter_gradients";
const CORRUPTION: f64 = 1.1;

/// Relative error with a floor on the denominator.
pub fn relative_error(analytic: f64, reference: f64, floor: f64) -> f64 {
    (analytic - reference).abs() / analytic.abs().max(reference.abs()).max(floor)
}

struct Tracker {
    name: String,
    worst: f64,
    location: String,
    compared: usize,
    factor: f64,
}

impl Tracker {
    fn new(name: String, corrupt: &Option<String>) -> Self {
        let factor = if corrupt.as_deref() == Some(name.as_str()) {
            CORRUPTION
        } else {
            1.0
        };
        Self {
            name,
            worst: 0.0,
            location: String::new(),
            compared: 0,
            factor,
        }
    }

    fn compare(&mut self, analytic: f64, reference: f64, floor: f64, location: impl FnOnce() -> String) {
        let err = relative_error(analytic * self.factor, reference, floor);
        self.compared += 1;
        if !(err <= self.worst) {
            self.worst = err;
            self.location = location();
        }
    }

    fn finish(self, tolerance: f64) -> TermCheck {
        TermCheck {
            name: self.name,
            worst: self.worst,
            tolerance,
            location: self.location,
            compared: self.compared,
        }
    }
}

pub fn run(config: &GradcheckConfig) -> Result<GradcheckReport> {
    if config.width < 2 {
        return Err(Error::invalid("gradcheck width must be at least 2"));
    }
    if config.points == 0 {
        return Err(Error::invalid("gradcheck needs at least one point"));
    }
    if let Some(c) = &config.corrupt {
        if !check_names().contains(c) {
            return Err(Error::invalid(format!("unknown check `{c}`")));
        }
    }
    let mut checks = match config.precision {
        Precision::F64 => primitive_suite::<f64>(config)?,
        Precision::F32 => primitive_suite::<f32>(config)?,
    };
    checks.extend(network_suite(config)?);
    checks.push(loss_suite(config)?);
    Ok(GradcheckReport {
        precision: config.precision,
        checks,
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize), lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.random_range(lo..hi))
}

/// Values with magnitude in `[0.2, 1.2]` and random sign, away from kinks.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || {
        let m = rng.random_range(0.2..1.2);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn smooth_volume(n: usize, phase: f64) -> Volume3D {
    let mut data = Vec::with_capacity(n * n * n);
    let step = 2.0 / (n - 1) as f64;
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let (x, y, z) = (-1.0 + step * i as f64, -1.0 + step * j as f64, -1.0 + step * k as f64);
                data.push(0.5 + 0.25 * (2.0 * x + phase).sin() * (1.5 * y).cos() + 0.2 * (z - phase).sin());
            }
        }
    }
    Volume3D::new([n; 3], [1.0; 3], data).expect("values within [0, 1]")
}

/// Op and inputs for one primitive.
fn primitive_case(name: &str, rng: &mut ChaCha8Rng) -> Result<(Op, Vec<Array2<f64>>)> {
    let n = 4;
    let op = match name {
        "trilinear" => Op::Trilinear(Arc::new(smooth_volume(6, 0.3))),
        "broadcast" => Op::from_name(name, &[n as f64])?,
        "scale" => Op::from_name(name, &[1.7])?,
        "sin" | "cos" => Op::from_name(name, &[3.0])?,
        "leaky" | "leaky_tangent" => Op::from_name(name, &[0.01])?,
        other => Op::from_name(other, &[])?,
    };
    let inputs = match name {
        "affine" => vec![uniform(rng, (n, 3), -1.0, 1.0), uniform(rng, (2, 3), -1.0, 1.0), uniform(rng, (1, 2), -1.0, 1.0)],
        "linear" => vec![uniform(rng, (n, 3), -1.0, 1.0), uniform(rng, (2, 3), -1.0, 1.0)],
        "add_row" => vec![uniform(rng, (n, 3), -1.0, 1.0), uniform(rng, (1, 3), -1.0, 1.0)],
        "broadcast" => vec![uniform(rng, (1, 3), -1.0, 1.0)],
        "add" | "sub" | "mul" => vec![uniform(rng, (n, 3), -1.0, 1.0), uniform(rng, (n, 3), -1.0, 1.0)],
        "div" => vec![uniform(rng, (n, 3), -1.0, 1.0), away_from_zero(rng, (n, 3))],
        "leaky" | "relu" => vec![away_from_zero(rng, (n, 3))],
        "leaky_tangent" => vec![away_from_zero(rng, (n, 3)), uniform(rng, (n, 3), -1.0, 1.0)],
        "min" => {
            let a = uniform(rng, (n, 3), -1.0, 1.0);
            let gap = away_from_zero(rng, (n, 3));
            let b = &a + &gap;
            vec![a, b]
        }
        "stack3x3" | "stack3x3_identity" => (0..3).map(|_| uniform(rng, (n, 3), -1.0, 1.0)).collect(),
        "det3" | "adj3" | "trace3" => vec![uniform(rng, (n, 9), -1.0, 1.0)],
        "matmul3" => vec![uniform(rng, (n, 9), -1.0, 1.0), uniform(rng, (n, 9), -1.0, 1.0)],
        "trilinear" => {
            // keep points inside cells so the piecewise-linear sampler is smooth
            let cell = 2.0 / 5.0;
            let pts = Array2::from_shape_simple_fn((n, 3), || {
                let c = rng.random_range(0..5) as f64;
                -1.0 + cell * (c + rng.random_range(0.2..0.8))
            });
            vec![pts]
        }
        _ => vec![uniform(rng, (n, 3), -1.0, 1.0)],
    };
    Ok((op, inputs))
}

/// `sum(op(inputs) * r)` recorded on `ops`; returns the loss and input leaves.
fn weighted_output<T: Real, O: Ops<T>>(
    ops: &mut O,
    op: &Op,
    inputs: &[Array2<f64>],
    weights: &mut Option<Array2<f64>>,
    rng: &mut ChaCha8Rng,
) -> Result<(O::Node, Vec<O::Node>)> {
    let leaves: Vec<O::Node> = inputs.iter().map(|a| ops.param(a.mapv(T::lit))).collect();
    let refs: Vec<&O::Node> = leaves.iter().collect();
    let out = ops.record(op.clone(), &refs)?;
    let shape = ops.value(&out).dim();
    let r = weights.get_or_insert_with(|| uniform(rng, shape, -1.0, 1.0)).mapv(T::lit);
    let r = ops.constant(r);
    let prod = ops.mul(&out, &r)?;
    let total = ops.sum(&prod)?;
    Ok((total, leaves))
}

fn primitive_suite<T: Real>(config: &GradcheckConfig) -> Result<Vec<TermCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let tol = tolerance(config.precision);
    let h = 1e-6;
    let mut out = Vec::with_capacity(PRIMITIVES.len());
    for name in PRIMITIVES {
        let (op, inputs) = primitive_case(name, &mut rng)?;
        let mut weights = None;
        let mut tape = Tape::<T>::new();
        let (total, leaves) = weighted_output::<T, _>(&mut tape, &op, &inputs, &mut weights, &mut rng)?;
        let grads = tape.backward(total)?;
        let mut tracker = Tracker::new(format!("primitive.{name}"), &config.corrupt);
        for (a, leaf) in leaves.iter().enumerate() {
            let g = grads.get_or_zero(*leaf, inputs[a].dim());
            for (k, gk) in g.iter().enumerate() {
                let eval = |delta: f64| -> Result<f64> {
                    let mut perturbed = inputs.clone();
                    perturbed[a].as_slice_mut().expect("standard layout")[k] += delta;
                    let mut ops = Eager::new();
                    let mut w = weights.clone();
                    let (t, _) = weighted_output::<f64, _>(&mut ops, &op, &perturbed, &mut w, &mut rng.clone())?;
                    Ok(Ops::<f64>::scalar(&ops, &t))
                };
                let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
                tracker.compare(gk.to_f64().unwrap_or(f64::NAN), fd, 1e-3, || {
                    format!("input {a}, entry {k}")
                });
            }
        }
        out.push(tracker.finish(tol));
    }
    Ok(out)
}

fn toy_network(config: &GradcheckConfig) -> Result<NetworkState> {
    let cfg = NetworkConfig {
        hidden_width: config.width,
        ..NetworkConfig::default()
    };
    let gain = cfg.omega0;
    let mut s = NetworkState::init(config.seed, cfg)?;
    // unit-gain hidden layers and non-zero biases, so every derivative is
    // of order one rather than a near-identity map
    for l in s.layers.iter_mut().skip(1) {
        l.weight *= gain;
        if let Some(tw) = &mut l.time_weight {
            *tw *= gain;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xb1a5);
    for a in s.arrays_mut() {
        if a.nrows() == 1 {
            a.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
    }
    Ok(s)
}

fn analytic_at(s: &NetworkState, precision: Precision, w: [f64; 3], t: f64) -> Result<DisplacementResult> {
    match precision {
        Precision::F64 => s.evaluate::<f64>(&[w], t, DerivRequest::ALL),
        Precision::F32 => s.evaluate::<f32>(&[w], t, DerivRequest::ALL),
    }
}

fn network_suite(config: &GradcheckConfig) -> Result<Vec<TermCheck>> {
    let s = toy_network(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let tol = tolerance(config.precision);
    let h = 1e-5;
    let floor = 1e-2;
    let mut jac_t = Tracker::new("network.spatial_jacobian".into(), &config.corrupt);
    let mut dphi_t = Tracker::new("network.dphi_dt".into(), &config.corrupt);
    let mut ddet_t = Tracker::new("network.jacdet_dt".into(), &config.corrupt);
    for p in 0..config.points {
        let w = [
            rng.random_range(-0.9..0.9),
            rng.random_range(-0.9..0.9),
            rng.random_range(-0.9..0.9),
        ];
        let t = rng.random_range(0.05..1.2);
        let at = || format!("point {p} w={w:?} t={t:.4}");
        let r = analytic_at(&s, config.precision, w, t)?;
        let jac = r.spatial_jacobian.expect("requested")[0];
        for j in 0..3 {
            let (mut wp, mut wm) = (w, w);
            wp[j] += h;
            wm[j] -= h;
            let fp = s.forward(&[wp], t)?.phi[0];
            let fm = s.forward(&[wm], t)?.phi[0];
            for i in 0..3 {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                jac_t.compare(jac[3 * i + j], fd, floor, || format!("{}, entry ({i},{j})", at()));
            }
        }
        let p_ = s.forward_with_derivatives(&[w], t + h, DerivRequest::JACDET)?;
        let m_ = s.forward_with_derivatives(&[w], t - h, DerivRequest::JACDET)?;
        let dphi = r.temporal_derivative.expect("requested")[0];
        for (i, &d) in dphi.iter().enumerate() {
            let fd = (p_.phi[0][i] - m_.phi[0][i]) / (2.0 * h);
            dphi_t.compare(d, fd, floor, || format!("{}, component {i}", at()));
        }
        let fd = (p_.jac_det.expect("requested")[0] - m_.jac_det.expect("requested")[0]) / (2.0 * h);
        ddet_t.compare(r.jac_det_dt.expect("requested")[0], fd, floor, at);
    }
    Ok(vec![jac_t.finish(tol), dphi_t.finish(tol), ddet_t.finish(tol)])
}

fn loss_suite(config: &GradcheckConfig) -> Result<TermCheck> {
    let cfg = NetworkConfig {
        hidden_width: 2,
        time_embed_width: 3,
        time_hidden_width: 2,
        omega0: 3.0,
        ..NetworkConfig::default()
    };
    let mut s = NetworkState::init(config.seed, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    for a in s.arrays_mut() {
        a.mapv_inplace(|v| v + rng.random_range(-0.4..0.4));
    }
    let scan = |months: f64, phase: f64| Scan {
        months,
        volume: smooth_volume(9, phase),
        labels: None,
    };
    let series = Volume4DSeries::new(vec![scan(0.0, 0.0), scan(6.0, 0.3), scan(12.0, 0.5)])?;
    let ctx = LossContext::new(&series, 12.0)?;
    let plan = SamplePlan {
        coords: (0..6)
            .map(|_| {
                [
                    rng.random_range(-0.8..0.8),
                    rng.random_range(-0.8..0.8),
                    rng.random_range(-0.8..0.8),
                ]
            })
            .collect(),
        reg_points: 4,
        observed: vec![0.0, 0.5, 1.0],
        reg_times: vec![0.0, 0.4, 1.0],
    };
    let weights = LossWeights::default();
    let (_, grads) = match config.precision {
        Precision::F64 => loss_and_grads::<f64>(&s, &ctx, &plan, &weights)?,
        Precision::F32 => loss_and_grads::<f32>(&s, &ctx, &plan, &weights)?,
    };
    let h = 1e-6;
    let mut tracker = Tracker::new(LOSS_TERM.into(), &config.corrupt);
    for (a, g) in grads.iter().enumerate() {
        for (k, &gk) in g.iter().enumerate() {
            let eval = |delta: f64| -> Result<f64> {
                let mut p = s.clone();
                p.arrays_mut()[a].as_slice_mut().expect("standard layout")[k] += delta;
                Ok(total_loss(&p, &ctx, &plan, &weights)?.total)
            };
            let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
            tracker.compare(gk, fd, 1e-3, || format!("parameter array {a}, entry {k}"));
        }
    }
    Ok(tracker.finish(tolerance(config.precision)))
}
