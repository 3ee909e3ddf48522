use ndfield::io::{decode_model, encode_model};
use ndfield::network::{DerivRequest, DisplacementModel, NetworkConfig, NetworkState};
use ndfield::phantom::{generate, PhantomSpec};
use ndfield::trainer::{fit_with, predict_field, warp_volume, FieldGrid, FitConfig, FitObserver, LogEntry};
use ndfield::volume::{grid_coords, ravel, Volume3D, Volume4DSeries};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

struct Quiet;
impl FitObserver for Quiet {}

fn small_config(iterations: usize) -> FitConfig {
    FitConfig {
        iterations,
        batch_points: 256,
        reg_points: 64,
        reg_time_grid_size: 3,
        learning_rate: 1e-3,
        log_every: 1,
        seed: 11,
        network: NetworkConfig {
            hidden_width: 12,
            time_embed_width: 8,
            time_hidden_width: 4,
            omega0: 10.0,
            ..NetworkConfig::default()
        },
        ..FitConfig::default()
    }
}

fn series() -> Volume4DSeries {
    generate(&PhantomSpec {
        dims: [16; 3],
        ..PhantomSpec::default()
    })
    .unwrap()
    .series
}

#[test]
fn zero_iterations_returns_the_initialization() {
    let s = series();
    let cfg = small_config(0);
    let (state, report) = fit_with(&s, &cfg, None, &mut Quiet).unwrap();
    let mut init = NetworkState::init(cfg.seed, cfg.network.clone()).unwrap();
    init.time_horizon = 18.0;
    assert_eq!(state, init);
    assert!(report.history.is_empty());
}

#[test]
fn single_threaded_fits_are_bit_identical() {
    let s = series();
    let cfg = small_config(15);
    let (a, ra) = fit_with(&s, &cfg, None, &mut Quiet).unwrap();
    let (b, rb) = fit_with(&s, &cfg, None, &mut Quiet).unwrap();
    assert_eq!(encode_model(&a).unwrap(), encode_model(&b).unwrap());
    let losses = |r: &ndfield::trainer::FitReport| r.history.iter().map(|e| (e.iteration, e.loss)).collect::<Vec<_>>();
    assert_eq!(losses(&ra), losses(&rb));
    assert_eq!(ra.checksum, rb.checksum);
    assert_eq!(ra.history.len(), 15);
    let back = decode_model(Path::new("mem"), &encode_model(&a).unwrap()).unwrap();
    assert_eq!(back, a);
}

#[test]
fn smoothed_loss_descends_on_a_clean_phantom() {
    struct Totals(Vec<f64>);
    impl FitObserver for Totals {
        fn on_log(&mut self, e: &LogEntry) {
            self.0.push(e.loss.total);
        }
    }
    let s = series();
    let mut t = Totals(Vec::new());
    fit_with(&s, &small_config(400), None, &mut t).unwrap();
    let window = |end: usize| t.0[end - 100..end].iter().sum::<f64>() / 100.0;
    assert!(window(400) < window(100), "{} !< {}", window(400), window(100));
}

#[test]
fn field_is_continuous_across_the_last_observation() {
    let s = series();
    let (state, _) = fit_with(&s, &small_config(30), None, &mut Quiet).unwrap();
    let coords = grid_coords([6; 3]);
    let disp = |m: f64| state.query(&coords, m, DerivRequest::default()).unwrap().phi;
    let mut last = f64::INFINITY;
    for delta in [1e-1, 1e-2, 1e-3, 1e-4] {
        let (a, b) = (disp(18.0 - delta), disp(18.0 + delta));
        let gap = a
            .iter()
            .zip(&b)
            .map(|(p, q)| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>().sqrt())
            .sum::<f64>()
            / a.len() as f64;
        assert!(gap < last);
        last = gap;
    }
    assert!(last < 1e-4);
}

#[test]
fn chunking_does_not_change_predictions() {
    let state = NetworkState::init(
        3,
        NetworkConfig {
            hidden_width: 8,
            ..NetworkConfig::default()
        },
    )
    .unwrap();
    let whole = predict_field(&state, 0.4, [5, 6, 7], 10_000, true).unwrap();
    let parts = predict_field(&state, 0.4, [5, 6, 7], 7, true).unwrap();
    assert_eq!(whole, parts);
    assert!(predict_field(&state, -1.0, [5; 3], 7, false).is_err());
}

#[test]
fn zero_network_predicts_the_identity() {
    let state = NetworkState::zeroed(NetworkConfig {
        hidden_width: 8,
        ..NetworkConfig::default()
    })
    .unwrap();
    let f = predict_field(&state, 0.7, [4, 5, 6], 16, true).unwrap();
    assert_eq!(f.phi, grid_coords([4, 5, 6]));
    assert!(f.jac_det.iter().all(|&j| j == 1.0));
    assert!(f.jac_det_dt.unwrap().iter().all(|&d| d == 0.0));
}

fn field_from(dims: [usize; 3], phi: Vec<[f64; 3]>) -> FieldGrid {
    let n = phi.len();
    let displacement = phi.iter().zip(grid_coords(dims)).map(|(p, w)| std::array::from_fn(|k| p[k] - w[k])).collect();
    FieldGrid {
        dims,
        months: 6.0,
        phi,
        displacement,
        jac_det: vec![1.0; n],
        jac_det_dt: None,
    }
}

fn random_volume(dims: [usize; 3], seed: u64) -> Volume3D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    Volume3D::new(dims, [1.0; 3], (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
}

/// Scalar trilinear reference on voxel indices with clamping.
fn reference_sample(v: &Volume3D, p: [f64; 3]) -> f64 {
    let d = v.dims();
    let mut i0 = [0usize; 3];
    let mut f = [0.0; 3];
    for a in 0..3 {
        let x = ((p[a] + 1.0) / 2.0 * (d[a] - 1) as f64).clamp(0.0, (d[a] - 1) as f64);
        i0[a] = (x.floor() as usize).min(d[a] - 2);
        f[a] = x - i0[a] as f64;
    }
    let mut acc = 0.0;
    for c in 0..8usize {
        let mut w = 1.0;
        let mut idx = i0;
        for a in 0..3 {
            let bit = (c >> a) & 1;
            idx[a] += bit;
            w *= if bit == 1 { f[a] } else { 1.0 - f[a] };
        }
        acc += w * v.get(idx);
    }
    acc
}

#[test]
fn warp_matches_reference_and_degenerate_cases() {
    let dims = [6, 7, 8];
    let vol = random_volume(dims, 5);
    let grid = grid_coords(dims);

    let identity = warp_volume(&vol, &field_from(dims, grid.clone())).unwrap();
    assert_eq!(identity.data(), vol.data());

    let step = 2.0 / (dims[0] - 1) as f64;
    let shifted = warp_volume(&vol, &field_from(dims, grid.iter().map(|w| [w[0] + step, w[1], w[2]]).collect())).unwrap();
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] - 1 {
                let got = shifted.data()[ravel([i, j, k], dims)];
                assert!((got - vol.get([i + 1, j, k])).abs() < 1e-12);
            }
        }
    }

    let smooth: Vec<[f64; 3]> = grid
        .iter()
        .map(|w| [w[0] + 0.1 * (2.0 * w[1]).sin(), w[1] + 0.07 * w[0] * w[2], w[2] - 0.05 * (w[0] + w[1]).cos()])
        .collect();
    let warped = warp_volume(&vol, &field_from(dims, smooth.clone())).unwrap();
    for (got, p) in warped.data().iter().zip(&smooth) {
        assert!((got - reference_sample(&vol, *p)).abs() <= 1e-12);
    }

    assert!(warp_volume(&random_volume([5; 3], 1), &field_from(dims, grid)).is_err());
}
