//! Per-subject fitting and dense field inference.

use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffengine::{Ops, Precision, Real, Tape};
use crate::error::{Error, Result};
use crate::losses::{record_loss, LossBreakdown, LossContext, LossWeights, SamplePlan};
use crate::network::{DerivRequest, DisplacementModel, NetworkConfig, NetworkState};
use crate::volume::{grid_coords, Volume3D, Volume4DSeries};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
    Sgd,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Optimizer::Adam),
            "sgd" => Ok(Optimizer::Sgd),
            other => Err(Error::invalid(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Fitting hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub iterations: usize,
    pub batch_points: usize,
    /// Leading points of each batch that also carry the regularizers.
    pub reg_points: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub optimizer: Optimizer,
    pub weights: LossWeights,
    /// Number of regularizer times per iteration, endpoints included.
    pub reg_time_grid_size: usize,
    /// Months per network time unit; the last observed time when unset.
    pub time_horizon: Option<f64>,
    /// Upper end of the regularizer grid as a multiple of the horizon.
    pub t_extrap: f64,
    pub seed: u64,
    pub precision: Precision,
    pub log_every: usize,
    /// Zero disables checkpoints.
    pub checkpoint_every: usize,
    pub network: NetworkConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            batch_points: 8192,
            reg_points: 1024,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            optimizer: Optimizer::Adam,
            weights: LossWeights::default(),
            reg_time_grid_size: 8,
            time_horizon: None,
            t_extrap: 1.0,
            seed: 0,
            precision: Precision::F64,
            log_every: 100,
            checkpoint_every: 0,
            network: NetworkConfig::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_points == 0 {
            return Err(Error::invalid("batch_points must be positive"));
        }
        if self.reg_points == 0 {
            return Err(Error::invalid("reg_points must be positive"));
        }
        if self.reg_time_grid_size < 2 {
            return Err(Error::invalid("reg_time_grid_size must be at least 2"));
        }
        if self.log_every == 0 {
            return Err(Error::invalid("log_every must be positive"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::invalid("Adam betas must lie in [0, 1) and epsilon be positive"));
        }
        if !(self.t_extrap >= 1.0) || !self.t_extrap.is_finite() {
            return Err(Error::invalid("t_extrap must be >= 1"));
        }
        if let Some(h) = self.time_horizon {
            if !(h > 0.0) || !h.is_finite() {
                return Err(Error::invalid("time horizon must be positive"));
            }
        }
        self.weights.validate()?;
        self.network.validate()
    }

    fn horizon(&self, series: &Volume4DSeries) -> f64 {
        self.time_horizon.unwrap_or_else(|| series.last_time())
    }
}

/// Draws one batch of coordinates and regularizer times.
///
/// With a mask, points are drawn uniformly among the given voxel centres
/// and jittered uniformly within their voxel.
pub fn sample_plan(
    times: &[f64],
    time_horizon: f64,
    config: &FitConfig,
    mask: Option<&SamplingMask>,
    rng: &mut ChaCha8Rng,
) -> SamplePlan {
    let coords = match mask {
        None => (0..config.batch_points)
            .map(|_| {
                [
                    rng.random_range(-1.0..=1.0),
                    rng.random_range(-1.0..=1.0),
                    rng.random_range(-1.0..=1.0),
                ]
            })
            .collect(),
        Some(m) => (0..config.batch_points)
            .map(|_| {
                let c = m.centres[rng.random_range(0..m.centres.len())];
                let mut p = [0.0; 3];
                for a in 0..3 {
                    let j = rng.random_range(-0.5..=0.5) * m.voxel[a];
                    p[a] = (c[a] + j).clamp(-1.0, 1.0);
                }
                p
            })
            .collect(),
    };
    let top = config.t_extrap;
    let mut reg_times = vec![0.0, top];
    for _ in 2..config.reg_time_grid_size {
        reg_times.push(rng.random_range(0.0..top));
    }
    reg_times.sort_by(f64::total_cmp);
    SamplePlan {
        coords,
        reg_points: config.reg_points.min(config.batch_points),
        observed: times.iter().map(|t| t / time_horizon).collect(),
        reg_times,
    }
}

/// Voxel centres eligible for sampling.
#[derive(Debug, Clone)]
pub struct SamplingMask {
    centres: Vec<[f64; 3]>,
    voxel: [f64; 3],
}

impl SamplingMask {
    /// Uses every voxel of `mask` with a non-zero value.
    pub fn from_labels(mask: &crate::volume::LabelGrid) -> Result<Self> {
        let dims = mask.dims();
        let all = grid_coords(dims);
        let centres: Vec<[f64; 3]> = all
            .into_iter()
            .zip(mask.data())
            .filter(|(_, &l)| l != 0)
            .map(|(p, _)| p)
            .collect();
        if centres.is_empty() {
            return Err(Error::invalid("sampling mask is empty"));
        }
        let voxel = [0, 1, 2].map(|a| 2.0 / (dims[a] - 1) as f64);
        Ok(Self { centres, voxel })
    }

    /// Non-zero voxels of `mask` grown by `radius` voxels along every axis
    /// (a cubic structuring element).
    pub fn dilated(mask: &crate::volume::LabelGrid, radius: usize) -> Result<Self> {
        let dims = mask.dims();
        let mut on: Vec<bool> = mask.data().iter().map(|&l| l != 0).collect();
        for axis in 0..3 {
            let mut next = vec![false; on.len()];
            for (idx, out) in next.iter_mut().enumerate() {
                let mut ijk = crate::volume::unravel(idx, dims);
                let c = ijk[axis];
                let lo = c.saturating_sub(radius);
                let hi = (c + radius).min(dims[axis] - 1);
                *out = (lo..=hi).any(|v| {
                    ijk[axis] = v;
                    on[crate::volume::ravel(ijk, dims)]
                });
            }
            on = next;
        }
        let grown = crate::volume::LabelGrid::new(dims, on.into_iter().map(i32::from).collect())?;
        Self::from_labels(&grown)
    }

    pub fn len(&self) -> usize {
        self.centres.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centres.is_empty()
    }
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient entry of the given parameter array was not finite.
    Rejected(usize),
}

/// First-order optimizer state.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub kind: Optimizer,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(config: &FitConfig, shapes: &[(usize, usize)]) -> Self {
        Self {
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            kind: config.optimizer,
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected update. Non-finite gradients leave the
    /// parameters and moments untouched.
    pub fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[Array2<f64>]) -> Result<StepOutcome> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::invalid("optimizer received mismatched parameter lists"));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.dim() != g.dim() || p.dim() != self.m[i].dim() {
                return Err(Error::invalid(format!("gradient {i} has the wrong shape")));
            }
        }
        if let Some(i) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
            log::warn!("non-finite gradient in parameter array {i}; step skipped");
            return Ok(StepOutcome::Rejected(i));
        }
        self.step += 1;
        let lr = self.learning_rate;
        if self.kind == Optimizer::Sgd {
            for (p, g) in params.iter_mut().zip(grads) {
                p.scaled_add(-lr, g);
            }
            return Ok(StepOutcome::Applied);
        }
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            ndarray::Zip::from(&mut **p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / c1;
                    let vh = *v / c2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
        Ok(StepOutcome::Applied)
    }
}

/// One logged iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    pub loss: LossBreakdown,
    /// Milliseconds since the fit started.
    pub wall_ms: u64,
}

/// Record of a completed fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub history: Vec<LogEntry>,
    pub wall_ms: u64,
    /// SHA-256 of the final parameters, lowercase hex.
    pub checksum: String,
    pub config: FitConfig,
    pub rejected_steps: usize,
}

/// Callbacks invoked during a fit.
pub trait FitObserver {
    fn on_log(&mut self, _entry: &LogEntry) {}
    fn on_checkpoint(&mut self, _iteration: usize, _state: &NetworkState) -> Result<()> {
        Ok(())
    }
}

/// Logs progress at `info` level.
pub struct LogObserver;

impl FitObserver for LogObserver {
    fn on_log(&mut self, e: &LogEntry) {
        log::info!("iter {:>6} total {:.6} sim {:.6}", e.iteration, e.loss.total, e.loss.sim);
    }
}

/// SHA-256 over the parameters and time horizon in canonical order.
pub fn parameter_checksum(state: &NetworkState) -> String {
    let mut h = Sha256::new();
    for a in state.arrays() {
        for v in a.iter() {
            h.update(v.to_le_bytes());
        }
    }
    h.update(state.time_horizon.to_le_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn fit(series: &Volume4DSeries, config: &FitConfig) -> Result<(NetworkState, FitReport)> {
    fit_with(series, config, None, &mut LogObserver)
}

/// Fits a network to `series`, optionally sampling inside `mask`.
pub fn fit_with(
    series: &Volume4DSeries,
    config: &FitConfig,
    mask: Option<&SamplingMask>,
    observer: &mut dyn FitObserver,
) -> Result<(NetworkState, FitReport)> {
    config.validate()?;
    if series.followups().is_empty() {
        return Err(Error::invalid("series has no follow-up scan"));
    }
    let horizon = config.horizon(series);
    let mut state = NetworkState::init(config.seed, config.network.clone())?;
    state.time_horizon = horizon;
    let ctx = LossContext::new(series, horizon)?;
    let times = series.times();
    let shapes: Vec<_> = state.arrays().iter().map(|a| a.dim()).collect();
    let mut opt = Adam::new(config, &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let start = Instant::now();
    let mut history = Vec::new();
    let mut rejected = 0;
    let mut bad_in_a_row = 0;
    for it in 0..config.iterations {
        let plan = sample_plan(&times, horizon, config, mask, &mut rng);
        let (loss, grads) = match config.precision {
            Precision::F64 => loss_and_grads::<f64>(&state, &ctx, &plan, &config.weights)?,
            Precision::F32 => loss_and_grads::<f32>(&state, &ctx, &plan, &config.weights)?,
        };
        if !loss.total.is_finite() {
            bad_in_a_row += 1;
            rejected += 1;
            log::warn!("iteration {it}: non-finite total loss {loss:?}");
            if bad_in_a_row >= 2 {
                return Err(Error::NumericalAbort(format!(
                    "non-finite total loss on two consecutive iterations (last at {it}): {loss:?}; \
                     parameter checksum {}",
                    parameter_checksum(&state)
                )));
            }
            continue;
        }
        bad_in_a_row = 0;
        if it % config.log_every == 0 {
            let entry = LogEntry {
                iteration: it,
                loss,
                wall_ms: start.elapsed().as_millis() as u64,
            };
            observer.on_log(&entry);
            history.push(entry);
        }
        let mut params = state.arrays_mut();
        if opt.step(&mut params, &grads)? != StepOutcome::Applied {
            rejected += 1;
        }
        if config.checkpoint_every > 0 && (it + 1) % config.checkpoint_every == 0 {
            observer.on_checkpoint(it + 1, &state)?;
        }
    }
    let report = FitReport {
        history,
        wall_ms: start.elapsed().as_millis() as u64,
        checksum: parameter_checksum(&state),
        config: config.clone(),
        rejected_steps: rejected,
    };
    Ok((state, report))
}

/// Loss values and parameter gradients for one plan, evaluated in `T`.
pub fn loss_and_grads<T: Real>(
    state: &NetworkState,
    ctx: &LossContext,
    plan: &SamplePlan,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<Array2<f64>>)> {
    let mut tape = Tape::<T>::new();
    let net = state.bind::<T, _>(&mut tape, true);
    let nodes = record_loss(&mut tape, &net, ctx, plan, weights)?;
    let loss = nodes.breakdown(&tape);
    let g = tape.backward(nodes.total)?;
    let grads = net
        .leaves()
        .iter()
        .map(|&id| {
            g.get_or_zero(id, tape.value(&id).dim())
                .mapv(|v| v.to_f64().unwrap_or(f64::NAN))
        })
        .collect();
    Ok((loss, grads))
}

/// Dense field over a voxel grid at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrid {
    pub dims: [usize; 3],
    pub months: f64,
    /// `phi` at every voxel centre, x fastest.
    pub phi: Vec<[f64; 3]>,
    pub displacement: Vec<[f64; 3]>,
    pub jac_det: Vec<f64>,
    pub jac_det_dt: Option<Vec<f64>>,
}

/// Evaluates the field over every voxel of a `dims` grid.
///
/// Chunks are independent and may run concurrently; results are assembled
/// in voxel order.
pub fn predict_field(
    model: &dyn DisplacementModel,
    months: f64,
    dims: [usize; 3],
    chunk: usize,
    with_jacdet_dt: bool,
) -> Result<FieldGrid> {
    if !(months >= 0.0) || !months.is_finite() {
        return Err(Error::invalid(format!("query time must be >= 0 months, got {months}")));
    }
    if chunk == 0 {
        return Err(Error::invalid("chunk size must be positive"));
    }
    let coords = grid_coords(dims);
    let request = if with_jacdet_dt {
        DerivRequest::ALL
    } else {
        DerivRequest::JACDET
    };
    let parts: Vec<_> = coords
        .par_chunks(chunk)
        .map(|c| model.query(c, months, request))
        .collect::<Result<_>>()?;
    let mut out = FieldGrid {
        dims,
        months,
        phi: Vec::with_capacity(coords.len()),
        displacement: Vec::with_capacity(coords.len()),
        jac_det: Vec::with_capacity(coords.len()),
        jac_det_dt: with_jacdet_dt.then(|| Vec::with_capacity(coords.len())),
    };
    for p in parts {
        out.phi.extend(p.phi);
        out.displacement.extend(p.displacement);
        out.jac_det.extend(p.jac_det.unwrap_or_default());
        if let (Some(dst), Some(src)) = (&mut out.jac_det_dt, p.jac_det_dt) {
            dst.extend(src);
        }
    }
    Ok(out)
}

/// `I_t(phi_t(w))` at every voxel centre `w`.
pub fn warp_volume(vol: &Volume3D, field: &FieldGrid) -> Result<Volume3D> {
    if vol.dims() != field.dims {
        return Err(Error::DimMismatch(vol.dims(), field.dims));
    }
    let data = field.phi.iter().map(|&p| vol.sample(p).0).collect();
    Volume3D::new(vol.dims(), vol.spacing(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn dilation_grows_a_cube() {
        let dims = [9, 9, 9];
        let mut data = vec![0; 729];
        data[crate::volume::ravel([4, 4, 4], dims)] = 3;
        let labels = crate::volume::LabelGrid::new(dims, data).unwrap();
        assert_eq!(SamplingMask::from_labels(&labels).unwrap().len(), 1);
        assert_eq!(SamplingMask::dilated(&labels, 2).unwrap().len(), 125);
        assert_eq!(SamplingMask::dilated(&labels, 6).unwrap().len(), 729);
        let empty = crate::volume::LabelGrid::new(dims, vec![0; 729]).unwrap();
        assert!(SamplingMask::dilated(&empty, 2).is_err());
    }

    #[test]
    fn endpoints_forced() {
        let cfg = FitConfig {
            reg_time_grid_size: 2,
            batch_points: 4,
            ..FitConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = sample_plan(&[0.0, 6.0], 6.0, &cfg, None, &mut rng);
        assert_eq!(plan.reg_times, vec![0.0, 1.0]);
        assert_eq!(plan.observed, vec![0.0, 1.0]);
    }

    #[test]
    fn plan_is_deterministic_and_in_domain() {
        let cfg = FitConfig {
            batch_points: 100_000,
            reg_time_grid_size: 5,
            t_extrap: 1.5,
            ..FitConfig::default()
        };
        let a = sample_plan(&[0.0, 3.0], 3.0, &cfg, None, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_plan(&[0.0, 3.0], 3.0, &cfg, None, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!(a.coords.iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(a.reg_times.len(), 5);
        assert_eq!(a.reg_times[0], 0.0);
        assert_eq!(a.reg_times[4], 1.5);
    }

    #[test]
    fn adam_zero_gradient_and_first_step() {
        let cfg = FitConfig {
            learning_rate: 0.01,
            ..FitConfig::default()
        };
        let mut opt = Adam::new(&cfg, &[(1, 1)]);
        let mut p = array![[0.5]];
        opt.step(&mut [&mut p], &[array![[0.0]]]).unwrap();
        assert_eq!(p[[0, 0]], 0.5);
        assert_eq!(opt.step_count(), 1);

        let mut opt = Adam::new(&cfg, &[(1, 1)]);
        let mut p = array![[0.5]];
        opt.step(&mut [&mut p], &[array![[1.0]]]).unwrap();
        assert!((0.5 - p[[0, 0]] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut opt = Adam::new(&FitConfig::default(), &[(1, 2)]);
        let mut p = array![[0.5, 1.0]];
        let out = opt.step(&mut [&mut p], &[array![[f64::NAN, 0.0]]]).unwrap();
        assert_eq!(out, StepOutcome::Rejected(0));
        assert_eq!(p, array![[0.5, 1.0]]);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn adam_descends_parabola() {
        let cfg = FitConfig {
            learning_rate: 0.01,
            ..FitConfig::default()
        };
        let mut opt = Adam::new(&cfg, &[(1, 1)]);
        let mut p = array![[1.0]];
        let mut prev = 1.0;
        for _ in 0..100 {
            let g = array![[2.0 * p[[0, 0]]]];
            opt.step(&mut [&mut p], &[g]).unwrap();
            let f = p[[0, 0]] * p[[0, 0]];
            assert!(f < prev);
            prev = f;
        }
    }

    #[test]
    fn config_rejects_bad_values() {
        for cfg in [
            FitConfig {
                batch_points: 0,
                ..FitConfig::default()
            },
            FitConfig {
                reg_time_grid_size: 1,
                ..FitConfig::default()
            },
            FitConfig {
                log_every: 0,
                ..FitConfig::default()
            },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
