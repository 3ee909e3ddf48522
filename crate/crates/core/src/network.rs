//! The coordinate network and its analytic derivative products.
//!
//! A time sub-network maps scalar time to an embedding through two
//! leaky-rectified affine layers. The primary network is five affine layers:
//! the first three-to-hidden layer uses `sin(omega0 * .)`, the three hidden
//! layers use `sin(.)` and the output layer is linear. The time embedding is
//! concatenated to the input of every layer after the first (or only the
//! second, with `concat_time_every_layer = false`).

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffengine::{Eager, Ops, Real, Seeds, TangentBundle, SPATIAL, TIME};
use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden_width: usize,
    pub time_embed_width: usize,
    pub time_hidden_width: usize,
    pub omega0: f64,
    pub leaky_slope: f64,
    /// Concatenate the time embedding to every hidden layer (architecture A)
    /// or only to the first hidden layer.
    pub concat_time_every_layer: bool,
    /// Apply the leaky rectifier to the embedding output as well as the
    /// hidden layer of the time sub-network.
    pub leaky_embedding_output: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden_width: 256,
            time_embed_width: 64,
            time_hidden_width: 10,
            omega0: 30.0,
            leaky_slope: 0.01,
            concat_time_every_layer: true,
            leaky_embedding_output: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_width < 2 {
            return Err(Error::invalid("hidden width must be at least 2"));
        }
        if self.time_embed_width == 0 || self.time_hidden_width == 0 {
            return Err(Error::invalid("time sub-network widths must be positive"));
        }
        if !(self.omega0 > 0.0) || !self.omega0.is_finite() {
            return Err(Error::invalid("omega0 must be positive"));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::invalid("leaky slope must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Whether primary layer `i` (0-based) receives the time embedding.
    pub fn layer_takes_time(&self, i: usize) -> bool {
        match i {
            0 => false,
            1 => true,
            _ => self.concat_time_every_layer,
        }
    }
}

pub const PRIMARY_LAYERS: usize = 5;

/// One affine layer. A layer fed with the time embedding keeps that block
/// of its weight matrix separately.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `(out, in)`
    pub weight: Array2<f64>,
    /// `(out, time_embed_width)`
    pub time_weight: Option<Array2<f64>>,
    /// `(1, out)`
    pub bias: Array2<f64>,
}

/// All weights of the primary network and the time sub-network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub config: NetworkConfig,
    pub seed: u64,
    /// Months represented by one unit of network time.
    pub time_horizon: f64,
    pub layers: Vec<Layer>,
    pub time_layers: Vec<Layer>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize), bound: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..=bound))
}

impl NetworkState {
    /// Sine-network initialization: first layer `U(-1/3, 1/3)`, later
    /// primary layers `U(+-sqrt(6/fan_in)/omega0)`, time layers
    /// `U(+-sqrt(6/fan_in))`, zero biases.
    pub fn init(seed: u64, config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden_width;
        let e = config.time_embed_width;
        let mut layers = Vec::with_capacity(PRIMARY_LAYERS);
        for i in 0..PRIMARY_LAYERS {
            let in_main = if i == 0 { 3 } else { h };
            let out = if i == PRIMARY_LAYERS - 1 { 3 } else { h };
            let takes_time = config.layer_takes_time(i);
            let fan_in = in_main + if takes_time { e } else { 0 };
            let bound = if i == 0 {
                1.0 / 3.0
            } else {
                (6.0 / fan_in as f64).sqrt() / config.omega0
            };
            let weight = uniform(&mut rng, (out, in_main), bound);
            let time_weight = takes_time.then(|| uniform(&mut rng, (out, e), bound));
            layers.push(Layer {
                weight,
                time_weight,
                bias: Array2::zeros((1, out)),
            });
        }
        let mut time_layers = Vec::with_capacity(2);
        for (fan_in, out) in [(1, config.time_hidden_width), (config.time_hidden_width, e)] {
            let bound = (6.0 / fan_in as f64).sqrt();
            time_layers.push(Layer {
                weight: uniform(&mut rng, (out, fan_in), bound),
                time_weight: None,
                bias: Array2::zeros((1, out)),
            });
        }
        Ok(Self {
            config,
            seed,
            time_horizon: 1.0,
            layers,
            time_layers,
        })
    }

    /// A network whose every parameter is zero.
    pub fn zeroed(config: NetworkConfig) -> Result<Self> {
        let mut s = Self::init(0, config)?;
        for a in s.arrays_mut() {
            a.fill(0.0);
        }
        Ok(s)
    }

    /// Parameter arrays in their fixed canonical order.
    pub fn arrays(&self) -> Vec<&Array2<f64>> {
        let mut out = Vec::new();
        for l in self.layers.iter().chain(&self.time_layers) {
            out.push(&l.weight);
            if let Some(tw) = &l.time_weight {
                out.push(tw);
            }
            out.push(&l.bias);
        }
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = Vec::new();
        for l in self.layers.iter_mut().chain(self.time_layers.iter_mut()) {
            out.push(&mut l.weight);
            if let Some(tw) = &mut l.time_weight {
                out.push(tw);
            }
            out.push(&mut l.bias);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.arrays().iter().map(|a| a.len()).sum()
    }

    /// Checks layer shapes and finiteness.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let reference = Self::init(0, self.config.clone())?;
        let got: Vec<_> = self.arrays().iter().map(|a| a.dim()).collect();
        let want: Vec<_> = reference.arrays().iter().map(|a| a.dim()).collect();
        if got != want {
            return Err(Error::invalid(format!(
                "parameter shapes {got:?} do not match architecture {want:?}"
            )));
        }
        if self.arrays().iter().any(|a| a.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid("non-finite network parameter"));
        }
        if !(self.time_horizon > 0.0) {
            return Err(Error::invalid("time horizon must be positive"));
        }
        Ok(())
    }

    /// Registers every parameter array with an executor.
    pub fn bind<T: Real, O: Ops<T>>(&self, ops: &mut O, trainable: bool) -> BoundNetwork<O::Node> {
        let mut leaf = |a: &Array2<f64>| {
            let v = a.mapv(T::lit);
            if trainable {
                ops.param(v)
            } else {
                ops.constant(v)
            }
        };
        let mut leaves = Vec::new();
        let mut bind_layer = |l: &Layer, leaves: &mut Vec<O::Node>| {
            let weight = leaf(&l.weight);
            leaves.push(weight.clone());
            let time_weight = l.time_weight.as_ref().map(|tw| {
                let n = leaf(tw);
                leaves.push(n.clone());
                n
            });
            let bias = leaf(&l.bias);
            leaves.push(bias.clone());
            BoundLayer {
                weight,
                time_weight,
                bias,
            }
        };
        let layers = self.layers.iter().map(|l| bind_layer(l, &mut leaves)).collect();
        let time_layers = self
            .time_layers
            .iter()
            .map(|l| bind_layer(l, &mut leaves))
            .collect();
        BoundNetwork {
            config: self.config.clone(),
            layers,
            time_layers,
            leaves,
        }
    }

    /// Time embedding at normalized time `t`.
    pub fn time_embed(&self, t: f64) -> Vec<f64> {
        let mut ops = Eager::new();
        let net = self.bind::<f64, _>(&mut ops, false);
        let e = net
            .embed_time(&mut ops, t, Seeds::NONE)
            .expect("embedding shapes are fixed by construction");
        e.value.iter().copied().collect()
    }

    /// Displacement and transformed points at normalized time `t`.
    pub fn forward(&self, coords: &[[f64; 3]], t: f64) -> Result<DisplacementResult> {
        self.forward_with_derivatives(coords, t, DerivRequest::default())
    }

    /// Displacement plus any requested analytic derivative products at
    /// normalized time `t`. Time derivatives are per unit of network time.
    pub fn forward_with_derivatives(
        &self,
        coords: &[[f64; 3]],
        t: f64,
        request: DerivRequest,
    ) -> Result<DisplacementResult> {
        self.evaluate::<f64>(coords, t, request)
    }

    /// As [`Self::forward_with_derivatives`], computed in precision `T`.
    pub fn evaluate<T: Real>(&self, coords: &[[f64; 3]], t: f64, request: DerivRequest) -> Result<DisplacementResult> {
        request.validate()?;
        let mut ops = Eager::new();
        let net = self.bind::<T, _>(&mut ops, false);
        let nodes = net.derivatives(&mut ops, points_array(coords), T::lit(t), request)?;
        Ok(nodes.to_result(&ops, coords))
    }
}

pub(crate) fn points_array<T: Real>(coords: &[[f64; 3]]) -> Array2<T> {
    Array2::from_shape_fn((coords.len(), 3), |(r, c)| T::lit(coords[r][c]))
}

/// Parameter nodes of a [`NetworkState`] registered with an executor.
pub struct BoundNetwork<N> {
    config: NetworkConfig,
    layers: Vec<BoundLayer<N>>,
    time_layers: Vec<BoundLayer<N>>,
    leaves: Vec<N>,
}

struct BoundLayer<N> {
    weight: N,
    time_weight: Option<N>,
    bias: N,
}

/// Which derivative products to compute.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DerivRequest {
    pub spatial: bool,
    pub temporal: bool,
    pub jacdet: bool,
    pub jacdet_dt: bool,
}

impl DerivRequest {
    pub const ALL: DerivRequest = DerivRequest {
        spatial: true,
        temporal: true,
        jacdet: true,
        jacdet_dt: true,
    };

    pub const JACDET: DerivRequest = DerivRequest {
        spatial: true,
        temporal: false,
        jacdet: true,
        jacdet_dt: false,
    };

    pub fn validate(&self) -> Result<()> {
        if (self.jacdet || self.jacdet_dt) && !self.spatial {
            return Err(Error::invalid(
                "Jacobian determinant products require the spatial Jacobian",
            ));
        }
        if self.jacdet_dt && !self.temporal {
            return Err(Error::invalid("d|J|/dt requires temporal derivatives"));
        }
        Ok(())
    }

    pub fn seeds(&self) -> Seeds {
        Seeds {
            spatial: self.spatial,
            temporal: self.temporal,
            mixed: self.jacdet_dt,
        }
    }
}

/// Executor nodes for the derivative products at one time.
pub struct DerivativeNodes<N> {
    /// `(n, 3)`
    pub displacement: N,
    /// Columns `d(disp)/dx_j`, each `(n, 3)`.
    pub disp_jacobian: Option<[N; 3]>,
    /// `(n, 9)`, row-major `I + d(disp)/dw`.
    pub jacobian: Option<N>,
    /// `(n, 3)`
    pub dphi_dt: Option<N>,
    /// `(n, 1)`
    pub jacdet: Option<N>,
    /// `(n, 1)`
    pub jacdet_dt: Option<N>,
}

impl<N: Clone> DerivativeNodes<N> {
    pub fn to_result<T: Real, O: Ops<T, Node = N>>(&self, ops: &O, coords: &[[f64; 3]]) -> DisplacementResult {
        let rows3 = |n: &N| -> Vec<[f64; 3]> {
            ops.value(n)
                .rows()
                .into_iter()
                .map(|r| [r[0].to_f64().unwrap(), r[1].to_f64().unwrap(), r[2].to_f64().unwrap()])
                .collect()
        };
        let col = |n: &N| -> Vec<f64> { ops.value(n).iter().map(|v| v.to_f64().unwrap()).collect() };
        let displacement = rows3(&self.displacement);
        let phi = displacement
            .iter()
            .zip(coords)
            .map(|(d, w)| [d[0] + w[0], d[1] + w[1], d[2] + w[2]])
            .collect();
        DisplacementResult {
            displacement,
            phi,
            spatial_jacobian: self.jacobian.as_ref().map(|j| {
                ops.value(j)
                    .rows()
                    .into_iter()
                    .map(|r| {
                        let mut m = [0.0; 9];
                        for (k, v) in r.iter().enumerate() {
                            m[k] = v.to_f64().unwrap();
                        }
                        m
                    })
                    .collect()
            }),
            temporal_derivative: self.dphi_dt.as_ref().map(rows3),
            jac_det: self.jacdet.as_ref().map(col),
            jac_det_dt: self.jacdet_dt.as_ref().map(col),
        }
    }
}

impl<N: Clone> BoundNetwork<N> {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Parameter leaves in canonical order (matches [`NetworkState::arrays`]).
    pub fn leaves(&self) -> &[N] {
        &self.leaves
    }

    /// `e(t)`, a `(1, E)` bundle with the t-tangent when seeded.
    pub fn embed_time<T: Real, O: Ops<T, Node = N>>(&self, ops: &mut O, t: T, seeds: Seeds) -> Result<TangentBundle<N>> {
        let slope = self.config.leaky_slope;
        let tb = TangentBundle::time(ops, t, seeds);
        let l1 = &self.time_layers[0];
        let h = tb.affine(ops, &l1.weight, Some(&l1.bias))?.leaky(ops, slope)?;
        let l2 = &self.time_layers[1];
        let z = h.affine(ops, &l2.weight, Some(&l2.bias))?;
        if self.config.leaky_embedding_output {
            z.leaky(ops, slope)
        } else {
            Ok(z)
        }
    }

    /// Displacement bundle `(n, 3)` at normalized time `t`.
    pub fn displacement_bundle<T: Real, O: Ops<T, Node = N>>(
        &self,
        ops: &mut O,
        coords: Array2<T>,
        t: T,
        seeds: Seeds,
    ) -> Result<TangentBundle<N>> {
        let e = self.embed_time(ops, t, seeds)?;
        let w = TangentBundle::point(ops, coords, seeds);
        let last = self.layers.len() - 1;
        let mut a = w;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = a.affine(ops, &layer.weight, Some(&layer.bias))?;
            if let Some(tw) = &layer.time_weight {
                let et = e.affine(ops, tw, None)?;
                z = z.add_row(ops, &et)?;
            }
            a = if i == 0 {
                z.sin(ops, self.config.omega0)?
            } else if i < last {
                z.sin(ops, 1.0)?
            } else {
                z
            };
        }
        Ok(a)
    }

    /// Displacement and requested derivative products at normalized time `t`.
    pub fn derivatives<T: Real, O: Ops<T, Node = N>>(
        &self,
        ops: &mut O,
        coords: Array2<T>,
        t: T,
        request: DerivRequest,
    ) -> Result<DerivativeNodes<N>> {
        let n = coords.nrows();
        let bundle = self.displacement_bundle(ops, coords, t, request.seeds())?;
        assemble_derivatives(ops, bundle, n, request)
    }
}

/// Builds the derivative products of `phi = disp + w` from a displacement
/// bundle of `n` points.
pub fn assemble_derivatives<T: Real, O: Ops<T>>(
    ops: &mut O,
    bundle: TangentBundle<O::Node>,
    n: usize,
    request: DerivRequest,
) -> Result<DerivativeNodes<O::Node>> {
    let zeros = |ops: &mut O| ops.constant(Array2::zeros((n, 3)));
    let disp_jacobian = if request.spatial {
        let cols: Vec<O::Node> = SPATIAL
            .iter()
            .map(|&j| bundle.tangents[j].clone().unwrap_or_else(|| zeros(ops)))
            .collect();
        Some([cols[0].clone(), cols[1].clone(), cols[2].clone()])
    } else {
        None
    };
    let jacobian = match &disp_jacobian {
        Some([a, b, c]) => Some(ops.stack3x3([a, b, c], true)?),
        None => None,
    };
    let dphi_dt = if request.temporal {
        Some(bundle.tangents[TIME].clone().unwrap_or_else(|| zeros(ops)))
    } else {
        None
    };
    let jacdet = match (&jacobian, request.jacdet) {
        (Some(j), true) => Some(ops.det3(j)?),
        _ => None,
    };
    let jacdet_dt = match (&jacobian, request.jacdet_dt) {
        (Some(j), true) => {
            let m: Vec<O::Node> = (0..3)
                .map(|k| bundle.mixed[k].clone().unwrap_or_else(|| zeros(ops)))
                .collect();
            let dj_dt = ops.stack3x3([&m[0], &m[1], &m[2]], false)?;
            Some(jacobi_derivative(ops, j, &dj_dt)?)
        }
        _ => None,
    };
    Ok(DerivativeNodes {
        displacement: bundle.value,
        disp_jacobian,
        jacobian,
        dphi_dt,
        jacdet,
        jacdet_dt,
    })
}

/// `d det(J)/dt = trace(adj(J) dJ/dt)` for rows of 3x3 matrices.
pub fn jacobi_derivative<T: Real, O: Ops<T>>(ops: &mut O, jac: &O::Node, djac_dt: &O::Node) -> Result<O::Node> {
    let adj = ops.adj3(jac)?;
    let prod = ops.matmul3(&adj, djac_dt)?;
    ops.trace3(&prod)
}

/// Displacements and optional derivative products for a batch of points.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DisplacementResult {
    pub displacement: Vec<[f64; 3]>,
    /// `displacement + w`
    pub phi: Vec<[f64; 3]>,
    /// Row-major `d(phi)/dw`.
    pub spatial_jacobian: Option<Vec<[f64; 9]>>,
    pub temporal_derivative: Option<Vec<[f64; 3]>>,
    pub jac_det: Option<Vec<f64>>,
    pub jac_det_dt: Option<Vec<f64>>,
}

/// Anything that can be queried for a time-dependent displacement field.
///
/// Times are months since baseline, and time derivatives are per month.
pub trait DisplacementModel: Sync {
    fn query(&self, coords: &[[f64; 3]], months: f64, request: DerivRequest) -> Result<DisplacementResult>;
}

impl DisplacementModel for NetworkState {
    fn query(&self, coords: &[[f64; 3]], months: f64, request: DerivRequest) -> Result<DisplacementResult> {
        let mut r = self.forward_with_derivatives(coords, months / self.time_horizon, request)?;
        let per_month = 1.0 / self.time_horizon;
        if let Some(d) = &mut r.temporal_derivative {
            for v in d.iter_mut() {
                for c in v.iter_mut() {
                    *c *= per_month;
                }
            }
        }
        if let Some(d) = &mut r.jac_det_dt {
            for v in d.iter_mut() {
                *v *= per_month;
            }
        }
        Ok(r)
    }
}
