//! Loss terms against independent scalar reimplementations.
//!
//! The oracle network below uses hyper-dual numbers (two nilpotent
//! infinitesimals) in plain scalar loops, so it shares no code with the
//! library's matrix tangents.

use std::ops::{Add, Mul, Sub};

use ndfield::diffengine::{Ops, Tape};
use ndfield::losses::{
    ncc_loss, record_loss, total_loss, LossContext, LossWeights, SamplePlan,
};
use ndfield::network::{NetworkConfig, NetworkState};
use ndfield::volume::{Scan, Volume3D, Volume4DSeries};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, Default)]
struct Hd {
    re: f64,
    a: f64,
    b: f64,
    ab: f64,
}

impl Hd {
    fn c(re: f64) -> Self {
        Hd { re, ..Default::default() }
    }
    fn sin(self) -> Self {
        let (s, c) = self.re.sin_cos();
        Hd {
            re: s,
            a: c * self.a,
            b: c * self.b,
            ab: c * self.ab - s * self.a * self.b,
        }
    }
    fn leaky(self, slope: f64) -> Self {
        let k = if self.re > 0.0 { 1.0 } else { slope };
        Hd {
            re: self.re * k,
            a: self.a * k,
            b: self.b * k,
            ab: self.ab * k,
        }
    }
    fn scale(self, k: f64) -> Self {
        Hd {
            re: self.re * k,
            a: self.a * k,
            b: self.b * k,
            ab: self.ab * k,
        }
    }
}

impl Add for Hd {
    type Output = Hd;
    fn add(self, o: Hd) -> Hd {
        Hd {
            re: self.re + o.re,
            a: self.a + o.a,
            b: self.b + o.b,
            ab: self.ab + o.ab,
        }
    }
}

impl Sub for Hd {
    type Output = Hd;
    fn sub(self, o: Hd) -> Hd {
        self + o.scale(-1.0)
    }
}

impl Mul for Hd {
    type Output = Hd;
    fn mul(self, o: Hd) -> Hd {
        Hd {
            re: self.re * o.re,
            a: self.re * o.a + self.a * o.re,
            b: self.re * o.b + self.b * o.re,
            ab: self.re * o.ab + self.a * o.b + self.b * o.a + self.ab * o.re,
        }
    }
}

fn dense(w: &ndarray::Array2<f64>, x: &[Hd]) -> Vec<Hd> {
    (0..w.nrows())
        .map(|r| {
            x.iter()
                .enumerate()
                .fold(Hd::c(0.0), |acc, (c, &v)| acc + v.scale(w[[r, c]]))
        })
        .collect()
}

/// Displacement at `(w, t)` with infinitesimals seeded along `w[dir]`
/// (when given) and `t`.
fn oracle_disp(s: &NetworkState, w: [f64; 3], t: f64, dir: Option<usize>) -> Vec<Hd> {
    let slope = s.config.leaky_slope;
    let tt = Hd { re: t, b: 1.0, ..Default::default() };
    let mut h = dense(&s.time_layers[0].weight, &[tt]);
    for (v, b) in h.iter_mut().zip(s.time_layers[0].bias.iter()) {
        *v = (*v + Hd::c(*b)).leaky(slope);
    }
    let mut e = dense(&s.time_layers[1].weight, &h);
    for (v, b) in e.iter_mut().zip(s.time_layers[1].bias.iter()) {
        *v = *v + Hd::c(*b);
        if s.config.leaky_embedding_output {
            *v = v.leaky(slope);
        }
    }
    let mut a: Vec<Hd> = (0..3)
        .map(|k| Hd {
            re: w[k],
            a: if Some(k) == dir { 1.0 } else { 0.0 },
            ..Default::default()
        })
        .collect();
    let last = s.layers.len() - 1;
    for (i, l) in s.layers.iter().enumerate() {
        let mut z = dense(&l.weight, &a);
        if let Some(tw) = &l.time_weight {
            let ez = dense(tw, &e);
            for (v, q) in z.iter_mut().zip(ez) {
                *v = *v + q;
            }
        }
        for (v, b) in z.iter_mut().zip(l.bias.iter()) {
            *v = *v + Hd::c(*b);
        }
        a = z
            .into_iter()
            .map(|v| {
                if i == 0 {
                    v.scale(s.config.omega0).sin()
                } else if i < last {
                    v.sin()
                } else {
                    v
                }
            })
            .collect();
    }
    a
}

fn det(m: [[f64; 3]; 3]) -> f64 {
    // Leibniz permutation sum
    let perms = [
        ([0, 1, 2], 1.0),
        ([1, 2, 0], 1.0),
        ([2, 0, 1], 1.0),
        ([0, 2, 1], -1.0),
        ([2, 1, 0], -1.0),
        ([1, 0, 2], -1.0),
    ];
    perms
        .iter()
        .map(|(p, sgn)| sgn * m[0][p[0]] * m[1][p[1]] * m[2][p[2]])
        .sum()
}

struct OraclePoint {
    disp: [f64; 3],
    jac: [[f64; 3]; 3],
    dphi_dt: [f64; 3],
    djac_dt: f64,
}

fn oracle_point(s: &NetworkState, w: [f64; 3], t: f64) -> OraclePoint {
    let mut jac = [[0.0; 3]; 3];
    let mut djdt = [[0.0; 3]; 3];
    let mut disp = [0.0; 3];
    let mut dphi_dt = [0.0; 3];
    for j in 0..3 {
        let out = oracle_disp(s, w, t, Some(j));
        for i in 0..3 {
            disp[i] = out[i].re;
            dphi_dt[i] = out[i].b;
            jac[i][j] = out[i].a + if i == j { 1.0 } else { 0.0 };
            djdt[i][j] = out[i].ab;
        }
    }
    // derivative of det by columns
    let mut djac_dt = 0.0;
    for j in 0..3 {
        let mut m = jac;
        for i in 0..3 {
            m[i][j] = djdt[i][j];
        }
        djac_dt += det(m);
    }
    OraclePoint {
        disp,
        jac,
        dphi_dt,
        djac_dt,
    }
}

fn oracle_trilinear(v: &Volume3D, p: [f64; 3]) -> f64 {
    let d = v.dims();
    let mut i0 = [0usize; 3];
    let mut f = [0.0; 3];
    for a in 0..3 {
        let n = (d[a] - 1) as f64;
        let u = ((p[a] + 1.0) / 2.0 * n).clamp(0.0, n);
        let mut c = u.floor() as usize;
        if c == d[a] - 1 {
            c -= 1;
        }
        i0[a] = c;
        f[a] = u - c as f64;
    }
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let wgt = (if dx == 1 { f[0] } else { 1.0 - f[0] })
                    * (if dy == 1 { f[1] } else { 1.0 - f[1] })
                    * (if dz == 1 { f[2] } else { 1.0 - f[2] });
                acc += wgt * v.get([i0[0] + dx, i0[1] + dy, i0[2] + dz]);
            }
        }
    }
    acc
}

fn textbook_ncc(f: &[f64], m: &[f64]) -> f64 {
    let n = f.len() as f64;
    let fm = f.iter().sum::<f64>() / n;
    let mm = m.iter().sum::<f64>() / n;
    let num: f64 = f.iter().zip(m).map(|(a, b)| (a - fm) * (b - mm)).sum();
    let sf: f64 = f.iter().map(|a| (a - fm).powi(2)).sum();
    let sm: f64 = m.iter().map(|b| (b - mm).powi(2)).sum();
    num / (sf * sm).sqrt()
}

fn random_volume(rng: &mut ChaCha8Rng, n: usize) -> Volume3D {
    let data = (0..n * n * n).map(|_| rng.random_range(0.0..1.0)).collect();
    Volume3D::new([n; 3], [1.0; 3], data).unwrap()
}

fn smooth_volume(n: usize, phase: f64) -> Volume3D {
    let mut data = Vec::new();
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let x = i as f64 / (n - 1) as f64;
                let y = j as f64 / (n - 1) as f64;
                let z = k as f64 / (n - 1) as f64;
                data.push(0.5 + 0.4 * (3.0 * x + 2.0 * y - z + phase).sin() * (2.0 * z + y).cos());
            }
        }
    }
    Volume3D::new([n; 3], [1.0; 3], data).unwrap()
}

fn toy_state(seed: u64) -> NetworkState {
    let cfg = NetworkConfig {
        hidden_width: 2,
        time_embed_width: 3,
        time_hidden_width: 2,
        omega0: 3.0,
        ..NetworkConfig::default()
    };
    let mut s = NetworkState::init(seed, cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for a in s.arrays_mut() {
        a.mapv_inplace(|v| v + rng.random_range(-0.4..0.4));
    }
    s
}

fn toy_series(n: usize) -> Volume4DSeries {
    let scan = |months: f64, phase: f64| Scan {
        months,
        volume: smooth_volume(n, phase),
        labels: None,
    };
    Volume4DSeries::new(vec![scan(0.0, 0.0), scan(6.0, 0.3), scan(12.0, 0.5)]).unwrap()
}

fn toy_plan(rng: &mut ChaCha8Rng, points: usize, reg_points: usize) -> SamplePlan {
    SamplePlan {
        coords: (0..points)
            .map(|_| {
                [
                    rng.random_range(-0.8..0.8),
                    rng.random_range(-0.8..0.8),
                    rng.random_range(-0.8..0.8),
                ]
            })
            .collect(),
        reg_points,
        observed: vec![0.0, 0.5, 1.0],
        reg_times: vec![0.0, 0.4, 1.0],
    }
}

fn oracle_total(s: &NetworkState, series: &Volume4DSeries, plan: &SamplePlan, w: &LossWeights) -> [f64; 6] {
    let n = plan.coords.len() as f64;
    let anchor = plan
        .coords
        .iter()
        .map(|&p| oracle_point(s, p, plan.observed[0]).disp.iter().map(|d| d * d).sum::<f64>())
        .sum::<f64>()
        / n;
    let fixed: Vec<f64> = plan
        .coords
        .iter()
        .map(|&p| oracle_trilinear(&series.baseline().volume, p))
        .collect();
    let mut sim = 0.0;
    for (scan, &t) in series.followups().iter().zip(&plan.observed[1..]) {
        let moving: Vec<f64> = plan
            .coords
            .iter()
            .map(|&p| {
                let d = oracle_point(s, p, t).disp;
                oracle_trilinear(&scan.volume, [p[0] + d[0], p[1] + d[1], p[2] + d[2]])
            })
            .collect();
        sim += 1.0 - textbook_ncc(&fixed, &moving);
    }
    let reg = &plan.coords[..plan.reg_points];
    let (mut spatial, mut temporal) = (0.0, 0.0);
    let mut per_point = vec![(0.0, 0.0); reg.len()];
    for &t in &plan.reg_times {
        for (k, &p) in reg.iter().enumerate() {
            let o = oracle_point(s, p, t);
            for i in 0..3 {
                for j in 0..3 {
                    let v = o.jac[i][j] - if i == j && !w.spatial_penalize_raw_jacobian { 1.0 } else { 0.0 };
                    spatial += v * v;
                }
                temporal += o.dphi_dt[i] * o.dphi_dt[i];
            }
            if o.djac_dt > 0.0 {
                per_point[k].0 += o.djac_dt;
            } else {
                per_point[k].1 -= o.djac_dt;
            }
        }
    }
    let denom = (reg.len() * plan.reg_times.len()) as f64;
    spatial /= denom;
    temporal /= denom;
    let mono = per_point.iter().map(|(p, q)| p.min(*q)).sum::<f64>() / reg.len() as f64;
    let total = w.lambda * anchor + sim + w.alpha * spatial + w.beta * temporal + w.gamma * mono;
    [sim, anchor, spatial, temporal, mono, total]
}

#[test]
fn ncc_matches_textbook_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..1.0)).collect();
    let m: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..1.0)).collect();
    let got = ncc_loss(&f, &m).unwrap();
    assert!((got - (1.0 - textbook_ncc(&f, &m))).abs() <= 1e-12);
}

#[test]
fn total_matches_scalar_oracle() {
    let series = toy_series(7);
    let ctx = LossContext::new(&series, 12.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..4 {
        let s = toy_state(seed);
        let plan = toy_plan(&mut rng, 5, 5);
        for raw in [false, true] {
            let w = LossWeights {
                lambda: 2.0,
                alpha: 0.7,
                beta: 1.3,
                gamma: 0.9,
                spatial_penalize_raw_jacobian: raw,
            };
            let got = total_loss(&s, &ctx, &plan, &w).unwrap();
            let want = oracle_total(&s, &series, &plan, &w);
            let got = [got.sim, got.zero_anchor, got.spatial, got.temporal, got.monotonic, got.total];
            for (g, o) in got.iter().zip(want) {
                assert!((g - o).abs() <= 1e-10, "got {got:?}, oracle {want:?}");
            }
        }
    }
}

#[test]
fn regularizers_use_the_point_prefix() {
    let series = toy_series(7);
    let ctx = LossContext::new(&series, 12.0).unwrap();
    let s = toy_state(9);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let plan = toy_plan(&mut rng, 8, 3);
    let w = LossWeights::default();
    let got = total_loss(&s, &ctx, &plan, &w).unwrap();
    let want = oracle_total(&s, &series, &plan, &w);
    assert!((got.total - want[5]).abs() <= 1e-10);
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let series = toy_series(9);
    let ctx = LossContext::new(&series, 12.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w = LossWeights::default();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let s = toy_state(seed + 20);
        let plan = toy_plan(&mut rng, 5, 5);
        let mut tape = Tape::<f64>::new();
        let net = s.bind::<f64, _>(&mut tape, true);
        let nodes = record_loss(&mut tape, &net, &ctx, &plan, &w).unwrap();
        let grads = tape.backward(nodes.total).unwrap();
        let analytic: Vec<Vec<f64>> = net
            .leaves()
            .iter()
            .map(|&id| grads.get_or_zero(id, tape.value(&id).dim()).iter().copied().collect())
            .collect();
        for (a, g) in analytic.iter().enumerate() {
            for (k, &gk) in g.iter().enumerate() {
                let eval = |delta: f64| {
                    let mut p = s.clone();
                    p.arrays_mut()[a].as_slice_mut().unwrap()[k] += delta;
                    total_loss(&p, &ctx, &plan, &w).unwrap().total
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let err = (gk - fd).abs() / gk.abs().max(fd.abs()).max(1e-3);
                worst = worst.max(err);
            }
        }
    }
    assert!(worst <= 1e-4, "worst relative gradient error {worst:e}");
}

#[test]
fn zero_network_on_identical_volumes_scores_zero() {
    let vol = smooth_volume(6, 0.2);
    let scan = |months| Scan {
        months,
        volume: vol.clone(),
        labels: None,
    };
    let series = Volume4DSeries::new(vec![scan(0.0), scan(3.0)]).unwrap();
    let ctx = LossContext::new(&series, 3.0).unwrap();
    let s = NetworkState::zeroed(NetworkConfig {
        hidden_width: 4,
        ..NetworkConfig::default()
    })
    .unwrap();
    let plan = SamplePlan {
        observed: vec![0.0, 1.0],
        ..toy_plan(&mut ChaCha8Rng::seed_from_u64(1), 20, 10)
    };
    let b = total_loss(&s, &ctx, &plan, &LossWeights::default()).unwrap();
    assert!(b.sim.abs() <= 1e-12);
    assert_eq!([b.zero_anchor, b.spatial, b.temporal, b.monotonic], [0.0; 4]);
    assert!(b.total.abs() <= 1e-12);
}

#[test]
fn weight_isolation() {
    let series = toy_series(7);
    let ctx = LossContext::new(&series, 12.0).unwrap();
    let s = toy_state(2);
    let plan = toy_plan(&mut ChaCha8Rng::seed_from_u64(8), 6, 6);
    let only_lambda = LossWeights {
        lambda: 3.0,
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
        ..LossWeights::default()
    };
    let b = total_loss(&s, &ctx, &plan, &only_lambda).unwrap();
    assert!((b.total - (3.0 * b.zero_anchor + b.sim)).abs() < 1e-14);

    let base = LossWeights::default();
    let bumped = LossWeights { gamma: base.gamma + 0.5, ..base };
    let x = total_loss(&s, &ctx, &plan, &base).unwrap();
    let y = total_loss(&s, &ctx, &plan, &bumped).unwrap();
    assert_eq!([x.sim, x.zero_anchor, x.spatial, x.temporal, x.monotonic], [y.sim, y.zero_anchor, y.spatial, y.temporal, y.monotonic]);
    assert!((y.total - x.total - 0.5 * x.monotonic).abs() < 1e-12);
}

#[test]
fn series_without_followup_rejected() {
    let series = Volume4DSeries::new(vec![Scan {
        months: 0.0,
        volume: smooth_volume(4, 0.0),
        labels: None,
    }])
    .unwrap();
    assert!(LossContext::new(&series, 1.0).is_err());
}

#[test]
fn random_volume_sampling_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let v = random_volume(&mut rng, 8);
    for _ in 0..1000 {
        let p = [
            rng.random_range(-1.2..1.2),
            rng.random_range(-1.2..1.2),
            rng.random_range(-1.2..1.2),
        ];
        assert!((v.sample(p).0 - oracle_trilinear(&v, p)).abs() <= 1e-12);
    }
}

proptest! {
    #[test]
    fn ncc_affine_invariance(
        f in prop::collection::vec(0.0f64..1.0, 8..64),
        noise in prop::collection::vec(-0.3f64..0.3, 64),
        a in 0.01f64..50.0,
        b in -10.0f64..10.0,
    ) {
        let m: Vec<f64> = f.iter().zip(&noise).map(|(x, n)| x + n).collect();
        let am: Vec<f64> = m.iter().map(|v| a * v + b).collect();
        let l1 = ncc_loss(&f, &m).unwrap();
        let l2 = ncc_loss(&f, &am).unwrap();
        prop_assert!((l1 - l2).abs() <= 1e-12);
    }

    #[test]
    fn terms_are_non_negative(seed in 0u64..1000) {
        let series = toy_series(5);
        let ctx = LossContext::new(&series, 12.0).unwrap();
        let s = toy_state(seed);
        let plan = toy_plan(&mut ChaCha8Rng::seed_from_u64(seed), 6, 4);
        let b = total_loss(&s, &ctx, &plan, &LossWeights::default()).unwrap();
        prop_assert!(b.zero_anchor >= 0.0 && b.spatial >= 0.0 && b.temporal >= 0.0 && b.monotonic >= 0.0);
        prop_assert!(b.sim >= 0.0 && b.sim <= 4.0);
    }

    #[test]
    fn monotonic_zero_iff_uniform_sign(d in prop::collection::vec(-1.0f64..1.0, 2..10)) {
        let loss = ndfield::losses::monotonic_loss(std::slice::from_ref(&d)).unwrap();
        let uniform = d.iter().all(|&x| x >= 0.0) || d.iter().all(|&x| x <= 0.0);
        prop_assert_eq!(loss == 0.0, uniform);
    }
}
