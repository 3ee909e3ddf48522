//! Registration loss terms.
//!
//! Each term exists twice: as a plain function over values (used for
//! reporting and tests) and recorded through an [`Ops`] executor so the
//! trainer can differentiate it with respect to the network parameters.
//!
//! All reductions are means, so magnitudes do not depend on batch size.

use std::sync::Arc;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::diffengine::{Eager, Op, Ops, Real, Seeds};
use crate::error::{Error, Result};
use crate::network::{BoundNetwork, DerivRequest, NetworkState};
use crate::volume::{Volume3D, Volume4DSeries};

/// Weights of the non-similarity terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Zero-time anchor.
    pub lambda: f64,
    /// Spatial Jacobian penalty.
    pub alpha: f64,
    /// Temporal derivative penalty.
    pub beta: f64,
    /// Monotonicity penalty.
    pub gamma: f64,
    /// Penalize the full Jacobian of `phi` rather than its departure from
    /// the identity.
    pub spatial_penalize_raw_jacobian: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.1,
            spatial_penalize_raw_jacobian: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("lambda", self.lambda),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::invalid(format!("loss weight {name} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Values of every loss term. `sim` is already summed over follow-ups.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sim: f64,
    pub zero_anchor: f64,
    pub spatial: f64,
    pub temporal: f64,
    pub monotonic: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(weights: &LossWeights, sim: f64, zero_anchor: f64, spatial: f64, temporal: f64, monotonic: f64) -> Self {
        Self {
            sim,
            zero_anchor,
            spatial,
            temporal,
            monotonic,
            total: weights.lambda * zero_anchor
                + sim
                + weights.alpha * spatial
                + weights.beta * temporal
                + weights.gamma * monotonic,
        }
    }
}

/// `1 - NCC` over the whole batch.
///
/// Zero-variance inputs score 1, except two equal constant inputs, which
/// score 0.
pub fn ncc_loss(fixed: &[f64], warped: &[f64]) -> Result<f64> {
    if fixed.len() != warped.len() {
        return Err(Error::invalid(format!(
            "ncc inputs differ in length: {} vs {}",
            fixed.len(),
            warped.len()
        )));
    }
    if fixed.is_empty() {
        return Err(Error::invalid("ncc of an empty batch"));
    }
    let m = Array2::from_shape_vec((warped.len(), 1), warped.to_vec()).expect("column");
    let out = Op::Ncc(Arc::from(fixed)).forward(&[&m])?;
    Ok(out[[0, 0]])
}

/// Mean squared norm of the displacements at time zero.
pub fn zero_time_anchor(displacements: &[[f64; 3]]) -> Result<f64> {
    if displacements.is_empty() {
        return Err(Error::invalid("zero-time anchor of an empty batch"));
    }
    Ok(mean(displacements.iter().map(sq3)))
}

/// Mean over points of the squared Frobenius norm of `J - I`
/// (or of `J` itself when `raw`).
pub fn spatial_loss(jacobians: &[[f64; 9]], raw: bool) -> f64 {
    mean(jacobians.iter().map(|j| {
        j.iter()
            .enumerate()
            .map(|(k, &v)| {
                let d = if !raw && k % 4 == 0 { v - 1.0 } else { v };
                d * d
            })
            .sum()
    }))
}

/// Mean squared norm of `d(phi)/dt` over all (point, time) samples.
pub fn temporal_loss(derivatives: &[[f64; 3]]) -> f64 {
    mean(derivatives.iter().map(sq3))
}

/// Mean over points of `min(sum(d+), sum(d-))` where `d` are the samples
/// of `d|J|/dt` for that point across a time grid.
pub fn monotonic_loss(samples: &[Vec<f64>]) -> Result<f64> {
    if samples.iter().any(|s| s.len() < 2) {
        return Err(Error::invalid("monotonic loss needs at least 2 time samples per point"));
    }
    Ok(mean(samples.iter().map(|s| {
        let pos: f64 = s.iter().map(|&d| d.max(0.0)).sum();
        let neg: f64 = s.iter().map(|&d| (-d).max(0.0)).sum();
        pos.min(neg)
    })))
}

fn sq3(d: &[f64; 3]) -> f64 {
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

fn mean(it: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = it.len();
    if n == 0 {
        return 0.0;
    }
    it.sum::<f64>() / n as f64
}

/// Fixed inputs of the loss: the baseline and each follow-up with its
/// normalized time.
#[derive(Debug, Clone)]
pub struct LossContext {
    pub baseline: Arc<Volume3D>,
    pub followups: Vec<(f64, Arc<Volume3D>)>,
}

impl LossContext {
    /// Times are divided by `time_horizon` (months per network time unit).
    pub fn new(series: &Volume4DSeries, time_horizon: f64) -> Result<Self> {
        if !(time_horizon > 0.0) {
            return Err(Error::invalid("time horizon must be positive"));
        }
        if series.followups().is_empty() {
            return Err(Error::invalid("series has no follow-up scan"));
        }
        Ok(Self {
            baseline: Arc::new(series.baseline().volume.clone()),
            followups: series
                .followups()
                .iter()
                .map(|s| (s.months / time_horizon, Arc::new(s.volume.clone())))
                .collect(),
        })
    }
}

/// Coordinates and times at which one loss evaluation is taken.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePlan {
    /// Normalized coordinates for the similarity and anchor terms.
    pub coords: Vec<[f64; 3]>,
    /// The first `reg_points` coordinates also carry the regularizers.
    pub reg_points: usize,
    /// All scan times, normalized; the first is the baseline.
    pub observed: Vec<f64>,
    /// Normalized time grid for the regularizers.
    pub reg_times: Vec<f64>,
}

/// Executor nodes of each term and the weighted total.
pub struct LossNodes<N> {
    pub sim: N,
    pub zero_anchor: N,
    pub spatial: N,
    pub temporal: N,
    pub monotonic: N,
    pub total: N,
}

impl<N> LossNodes<N> {
    pub fn breakdown<T: Real, O: Ops<T, Node = N>>(&self, ops: &O) -> LossBreakdown {
        let v = |n: &N| ops.scalar(n).to_f64().unwrap();
        LossBreakdown {
            sim: v(&self.sim),
            zero_anchor: v(&self.zero_anchor),
            spatial: v(&self.spatial),
            temporal: v(&self.temporal),
            monotonic: v(&self.monotonic),
            total: v(&self.total),
        }
    }
}

fn coords_array<T: Real>(coords: &[[f64; 3]]) -> Array2<T> {
    crate::network::points_array(coords)
}

/// Records every loss term and the weighted total.
pub fn record_loss<T: Real, O: Ops<T>>(
    ops: &mut O,
    net: &BoundNetwork<O::Node>,
    ctx: &LossContext,
    plan: &SamplePlan,
    weights: &LossWeights,
) -> Result<LossNodes<O::Node>> {
    weights.validate()?;
    if plan.coords.is_empty() {
        return Err(Error::invalid("empty coordinate batch"));
    }
    if plan.reg_points == 0 || plan.reg_points > plan.coords.len() {
        return Err(Error::invalid(format!(
            "regularizer point count {} outside 1..={}",
            plan.reg_points,
            plan.coords.len()
        )));
    }
    if plan.reg_times.len() < 2 {
        return Err(Error::invalid("regularizer time grid needs at least 2 times"));
    }
    if plan.observed.len() != ctx.followups.len() + 1 {
        return Err(Error::invalid(format!(
            "plan has {} observed times for {} scans",
            plan.observed.len(),
            ctx.followups.len() + 1
        )));
    }

    let coords: Array2<T> = coords_array(&plan.coords);
    let w = ops.constant(coords.clone());

    let disp0 = net.displacement_bundle(ops, coords.clone(), T::lit(plan.observed[0]), Seeds::NONE)?;
    let sq = ops.square(&disp0.value)?;
    let norms = ops.row_sum(&sq)?;
    let zero_anchor = ops.mean(&norms)?;

    let fixed: Arc<[f64]> = plan.coords.iter().map(|&p| ctx.baseline.sample(p).0).collect();
    let mut sim: Option<O::Node> = None;
    for (&t, (_, vol)) in plan.observed[1..].iter().zip(&ctx.followups) {
        let disp = net.displacement_bundle(ops, coords.clone(), T::lit(t), Seeds::NONE)?;
        let phi = ops.add(&disp.value, &w)?;
        let moving = ops.record(Op::Trilinear(vol.clone()), &[&phi])?;
        let term = ops.record(Op::Ncc(fixed.clone()), &[&moving])?;
        sim = Some(match sim {
            Some(acc) => ops.add(&acc, &term)?,
            None => term,
        });
    }
    let sim = sim.expect("at least one follow-up");

    let reg = coords.slice(s![..plan.reg_points, ..]).to_owned();
    let k = plan.reg_times.len() as f64;
    let request = DerivRequest {
        spatial: true,
        temporal: true,
        jacdet: false,
        jacdet_dt: true,
    };
    let mut spatial_terms = Vec::new();
    let mut temporal_terms = Vec::new();
    let mut pos: Option<O::Node> = None;
    let mut neg: Option<O::Node> = None;
    for &t in &plan.reg_times {
        let d = net.derivatives(ops, reg.clone(), T::lit(t), request)?;
        let jac = if weights.spatial_penalize_raw_jacobian {
            d.jacobian.clone().expect("requested")
        } else {
            let [a, b, c] = d.disp_jacobian.as_ref().expect("requested");
            ops.stack3x3([a, b, c], false)?
        };
        let sq = ops.square(&jac)?;
        let per_point = ops.row_sum(&sq)?;
        spatial_terms.push(ops.mean(&per_point)?);

        let sq = ops.square(d.dphi_dt.as_ref().expect("requested"))?;
        let per_point = ops.row_sum(&sq)?;
        temporal_terms.push(ops.mean(&per_point)?);

        let djac = d.jacdet_dt.expect("requested");
        let p = ops.relu(&djac)?;
        let flipped = ops.scale(&djac, -1.0)?;
        let n = ops.relu(&flipped)?;
        pos = Some(match pos {
            Some(acc) => ops.add(&acc, &p)?,
            None => p,
        });
        neg = Some(match neg {
            Some(acc) => ops.add(&acc, &n)?,
            None => n,
        });
    }
    let spatial = mean_of(ops, &spatial_terms, k)?;
    let temporal = mean_of(ops, &temporal_terms, k)?;
    let smaller = ops.min(&pos.expect("grid"), &neg.expect("grid"))?;
    let monotonic = ops.mean(&smaller)?;

    let mut total = sim.clone();
    for (node, weight) in [
        (&zero_anchor, weights.lambda),
        (&spatial, weights.alpha),
        (&temporal, weights.beta),
        (&monotonic, weights.gamma),
    ] {
        if weight != 0.0 {
            let scaled = ops.scale(node, weight)?;
            total = ops.add(&total, &scaled)?;
        }
    }
    Ok(LossNodes {
        sim,
        zero_anchor,
        spatial,
        temporal,
        monotonic,
        total,
    })
}

fn mean_of<T: Real, O: Ops<T>>(ops: &mut O, terms: &[O::Node], k: f64) -> Result<O::Node> {
    let mut acc = terms[0].clone();
    for t in &terms[1..] {
        acc = ops.add(&acc, t)?;
    }
    ops.scale(&acc, 1.0 / k)
}

/// Evaluates every term for a frozen network.
pub fn total_loss(state: &NetworkState, ctx: &LossContext, plan: &SamplePlan, weights: &LossWeights) -> Result<LossBreakdown> {
    let mut ops = Eager::new();
    let net = state.bind::<f64, _>(&mut ops, false);
    let nodes = record_loss(&mut ops, &net, ctx, plan, weights)?;
    Ok(nodes.breakdown(&ops))
}
