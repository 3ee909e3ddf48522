use ndfield::losses::monotonic_loss;
use ndfield::metrics::{sign_consistency, DEAD_BAND};
use ndfield::network::{DerivRequest, DisplacementModel};
use ndfield::phantom::{generate, generate_raw, true_field, PhantomSpec, Sphere, GROWING_LABEL, SHRINKING_LABEL};
use ndfield::volume::grid_coords;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn det(m: [[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn phi(spec: &PhantomSpec, w: [f64; 3], months: f64) -> [f64; 3] {
    let r = spec.field().query(&[w], months, DerivRequest::default()).unwrap();
    r.phi[0]
}

fn fd_jacdet(spec: &PhantomSpec, w: [f64; 3], months: f64) -> f64 {
    let h = 1e-6;
    let mut m = [[0.0; 3]; 3];
    for b in 0..3 {
        let (mut up, mut dn) = (w, w);
        up[b] += h;
        dn[b] -= h;
        let (pu, pd) = (phi(spec, up, months), phi(spec, dn, months));
        for a in 0..3 {
            m[a][b] = (pu[a] - pd[a]) / (2.0 * h);
        }
    }
    det(m)
}

fn with_shell() -> PhantomSpec {
    PhantomSpec {
        growing: Sphere {
            center: [-0.35, 0.0, 0.0],
            radius: 0.2,
            shell: 0.15,
            ..PhantomSpec::default().growing
        },
        shrinking: Some(Sphere {
            center: [0.4, 0.1, 0.0],
            radius: 0.18,
            shell: 0.12,
            rate: -0.1,
            intensity: 0.6,
        }),
        falloff: 0.1,
        ..PhantomSpec::default()
    }
}

#[test]
fn closed_form_jacobian_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for spec in [PhantomSpec::default(), with_shell()] {
        let field = spec.field();
        for _ in 0..300 {
            let w: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.9..0.9));
            let months = rng.random_range(0.0..24.0);
            let analytic = field.jac_det(w, months);
            let fd = fd_jacdet(&spec, w, months);
            assert!((analytic - fd).abs() <= 1e-6 * analytic.abs().max(1.0), "{w:?} {months}: {analytic} vs {fd}");

            let h = 1e-5;
            let dt = (field.jac_det(w, months + h) - field.jac_det(w, months - h)) / (2.0 * h);
            let a = field.jac_det_dt(w, months);
            assert!((a - dt).abs() <= 1e-6 * a.abs().max(1e-3), "{a} vs {dt}");
        }
    }
}

#[test]
fn core_reaches_cubed_scale() {
    let spec = PhantomSpec::default();
    let f = spec.field();
    assert!((f.jac_det([0.05, -0.1, 0.02], 18.0) - 1.331).abs() < 1e-12);
    assert_eq!(f.jac_det([0.95, 0.95, 0.95], 18.0), 1.0);
    assert_eq!(f.jac_det([0.1, 0.0, 0.0], 0.0), 1.0);
}

#[test]
fn baseline_field_is_identity() {
    let spec = with_shell();
    assert!(true_field(&spec, 0.0).unwrap().iter().all(|d| *d == [0.0; 3]));
}

#[test]
fn analytic_field_is_monotone() {
    let spec = with_shell();
    let p = generate(&spec).unwrap();
    let labels = p.series.baseline().labels.clone().unwrap();
    let grid: Vec<f64> = (0..=24).map(|k| k as f64).collect();
    for label in [GROWING_LABEL, SHRINKING_LABEL] {
        assert_eq!(sign_consistency(&p.truth, &labels, label, &grid, DEAD_BAND).unwrap(), 1.0);
    }
    let coords = grid_coords(spec.dims);
    let rows: Vec<Vec<f64>> = grid
        .iter()
        .map(|&m| p.truth.query(&coords, m, DerivRequest::ALL).unwrap().jac_det_dt.unwrap())
        .collect();
    let inside: Vec<Vec<f64>> = labels
        .members(GROWING_LABEL)
        .into_iter()
        .chain(labels.members(SHRINKING_LABEL))
        .map(|i| rows.iter().map(|r| r[i]).collect())
        .collect();
    assert_eq!(monotonic_loss(&inside).unwrap(), 0.0);
}

#[test]
fn zero_rate_gives_identical_scans() {
    let spec = PhantomSpec {
        growing: Sphere {
            rate: 0.0,
            ..PhantomSpec::default().growing
        },
        ..PhantomSpec::default()
    };
    let raw = generate_raw(&spec).unwrap();
    assert!(raw.iter().all(|v| v == &raw[0]));
}

fn noise(seed: u64) -> Vec<f64> {
    let base = PhantomSpec {
        dims: [24; 3],
        ..PhantomSpec::default()
    };
    let clean = generate_raw(&base).unwrap();
    let noisy = generate_raw(&PhantomSpec {
        noise_sigma: 0.2,
        seed,
        ..base
    })
    .unwrap();
    clean[1].iter().zip(&noisy[1]).map(|(a, b)| b - a).collect()
}

#[test]
fn noise_has_requested_spread_and_seeds_are_independent() {
    let (a, b) = (noise(1), noise(2));
    assert!(a.len() >= 10_000);
    let n = a.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let (ma, mb) = (mean(&a), mean(&b));
    let var = |v: &[f64], m: f64| v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let (va, vb) = (var(&a, ma), var(&b, mb));
    assert!((va.sqrt() - 0.2).abs() < 0.01, "std {}", va.sqrt());
    let cov = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
    let rho = cov / (va * vb).sqrt();
    assert!(rho.abs() < 0.05, "correlation {rho}");
    assert_eq!(noise(1), a);
}
