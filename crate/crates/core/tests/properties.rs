use ndfield::diffengine::det3;
use ndfield::io::{RawData, RawVolume};
use ndfield::losses::monotonic_loss;
use ndfield::metrics::{consistent_sign, dice, residual_jacobian, JacobianMap};
use ndfield::volume::{ravel, LabelGrid, Volume3D};
use proptest::prelude::*;
use std::path::Path;

/// Leibniz expansion over all six permutations.
fn permutation_det(a: &[f64; 9]) -> f64 {
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
        .map(|(p, s)| s * a[p[0]] * a[3 + p[1]] * a[6 + p[2]])
        .sum()
}

fn volume_from(n: usize, vals: &[f64]) -> Volume3D {
    Volume3D::new([n; 3], [1.0; 3], vals.to_vec()).unwrap()
}

fn corners(v: &Volume3D, p: [f64; 3]) -> (f64, f64) {
    let dims = v.dims();
    let mut lo = [0usize; 3];
    for a in 0..3 {
        let x = ((p[a].clamp(-1.0, 1.0) + 1.0) / 2.0) * (dims[a] - 1) as f64;
        lo[a] = (x.floor() as usize).min(dims[a] - 2);
    }
    let (mut mn, mut mx) = (f64::INFINITY, f64::NEG_INFINITY);
    for c in 0..8 {
        let idx = [lo[0] + (c & 1), lo[1] + ((c >> 1) & 1), lo[2] + ((c >> 2) & 1)];
        let x = v.data()[ravel(idx, dims)];
        mn = mn.min(x);
        mx = mx.max(x);
    }
    (mn, mx)
}

proptest! {
    #[test]
    fn cofactor_det_matches_permutation_expansion(a in prop::array::uniform9(-1.0f64..1.0)) {
        prop_assert!((det3(&a[..]) - permutation_det(&a)).abs() <= 1e-12);
    }

    #[test]
    fn trilinear_stays_within_cell_corners(
        vals in prop::collection::vec(0.0f64..1.0, 64),
        p in prop::array::uniform3(-1.2f64..1.2),
    ) {
        let v = volume_from(4, &vals);
        let (x, _) = v.sample(p);
        let (lo, hi) = corners(&v, p);
        prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
    }

    #[test]
    fn sampler_gradient_matches_differences(
        vals in prop::collection::vec(0.0f64..1.0, 125),
        cell in prop::array::uniform3(0usize..4),
        frac in prop::array::uniform3(0.1f64..0.9),
    ) {
        let v = volume_from(5, &vals);
        let p: [f64; 3] = std::array::from_fn(|a| -1.0 + (cell[a] as f64 + frac[a]) * 0.5);
        let (_, g) = v.sample(p);
        let h = 1e-5;
        for a in 0..3 {
            let (mut up, mut dn) = (p, p);
            up[a] += h;
            dn[a] -= h;
            let fd = (v.sample(up).0 - v.sample(dn).0) / (2.0 * h);
            prop_assert!((g[a] - fd).abs() <= 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn clamping_outside_the_domain(
        vals in prop::collection::vec(0.0f64..1.0, 27),
        eps in 0.0f64..0.5,
        y in -1.0f64..1.0,
        z in -1.0f64..1.0,
    ) {
        let v = volume_from(3, &vals);
        prop_assert_eq!(v.sample([-1.0 - eps, y, z]).0, v.sample([-1.0, y, z]).0);
    }

    #[test]
    fn dice_is_symmetric(a in prop::collection::vec(0i32..3, 64), b in prop::collection::vec(0i32..3, 64), label in 1i32..3) {
        let a = LabelGrid::new([4; 3], a).unwrap();
        let b = LabelGrid::new([4; 3], b).unwrap();
        let d = dice(&a, &b, label).unwrap();
        prop_assert_eq!(d, dice(&b, &a, label).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn residual_is_antisymmetric(a in prop::collection::vec(-1.0f64..3.0, 8), b in prop::collection::vec(-1.0f64..3.0, 8)) {
        let ma = JacobianMap::new([2; 3], 6.0, a).unwrap();
        let mb = JacobianMap::new([2; 3], 6.0, b).unwrap();
        let ab = residual_jacobian(&ma, &mb).unwrap();
        let ba = residual_jacobian(&mb, &ma).unwrap();
        prop_assert!(ab.iter().zip(&ba).all(|(x, y)| *x == -*y));
    }

    #[test]
    fn folded_count_is_a_recount(v in prop::collection::vec(-1.0f64..2.0, 27)) {
        let m = JacobianMap::new([3; 3], 0.0, v.clone()).unwrap();
        prop_assert_eq!(m.folded_count, v.iter().filter(|&&x| x <= 0.0).count());
    }

    #[test]
    fn monotonic_loss_vanishes_exactly_for_uniform_signs(
        samples in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 2..6), 1..8),
    ) {
        let loss = monotonic_loss(&samples).unwrap();
        prop_assert!(loss >= 0.0);
        let uniform = samples.iter().all(|s| consistent_sign(s.iter().copied(), 0.0));
        prop_assert_eq!(loss == 0.0, uniform);
    }

    #[test]
    fn raw_round_trip_is_bit_exact(
        f in prop::collection::vec(any::<f64>(), 24),
        g in prop::collection::vec(any::<f32>(), 24),
        i in prop::collection::vec(any::<i32>(), 24),
    ) {
        for data in [RawData::F64(f.clone()), RawData::F32(g.clone()), RawData::I32(i.clone())] {
            let v = RawVolume::new([2, 3, 4], [0.5, 1.0, 2.0], data).unwrap();
            let bytes = v.encode();
            let back = RawVolume::decode(Path::new("mem"), &bytes).unwrap();
            prop_assert_eq!(back.encode(), bytes);
        }
    }

    #[test]
    fn raw_rejects_any_truncation(cut in 1usize..60) {
        let v = RawVolume::new([2; 3], [1.0; 3], RawData::F32(vec![1.5; 8])).unwrap();
        let bytes = v.encode();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(RawVolume::decode(Path::new("mem"), &bytes[..keep]).is_err());
    }
}
