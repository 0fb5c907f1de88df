//! Kuo-function values and stratum invariants on the built-in fixtures.

mod common;

use std::sync::Arc;

use common::{point, rng};
use nalgebra::DVector;
use rand::Rng;
use stratcheck::fixtures;
use stratcheck::grassmann::angle;
use stratcheck::kuo::{p_a_from, KuoContext};
use stratcheck::strata::{Interval, ParametricPatch};
use stratcheck::{PairXY, Stratum, Subspace};

#[test]
fn fixtures_pass_rank_and_closure_checks() {
    for pair in fixtures::all() {
        pair.x.check_regularity(1000, 11).unwrap_or_else(|e| panic!("{}: {e}", pair.name));
        pair.y.check_regularity(1000, 11).unwrap_or_else(|e| panic!("{}: {e}", pair.name));
        pair.validate(200, 5).unwrap_or_else(|e| panic!("{}: {e}", pair.name));
    }
}

#[test]
fn samples_lie_on_their_strata() {
    for pair in fixtures::all() {
        for s in [&pair.x, &pair.y] {
            for p in s.sample(1000, 3).points {
                assert!(s.residual(&p) < 1e-8, "{} residual {}", s.name, s.residual(&p));
            }
        }
    }
}

#[test]
fn umbrella_samples_avoid_the_handle() {
    let pair = fixtures::whitney_umbrella();
    let set = pair.x.sample(200, 7);
    assert_eq!(set.points.len(), 200);
    for p in &set.points {
        let (x, y, z) = (p.x[0], p.x[1], p.x[2]);
        assert!((x * x - z * y * y).abs() < 1e-8);
        assert!(y.abs() > 0.0);
    }
}

#[test]
fn nearest_point_on_circle_matches_dense_angles() {
    let circle = fixtures::unit_circle();
    let mut r = rng(9);
    for _ in 0..20 {
        let q = point(&[r.random_range(-2.0..2.0), r.random_range(-2.0..2.0), r.random_range(-0.5..0.5)]);
        let got = circle.nearest_point(&q).unwrap().x;
        // oracle: best of 20000 equally spaced angles
        let best = (0..20_000)
            .map(|i| {
                let t = i as f64 / 20_000.0 * std::f64::consts::TAU;
                (q.clone() - point(&[t.cos(), t.sin(), 0.0])).norm()
            })
            .fold(f64::INFINITY, f64::min);
        assert!((q.clone() - &got).norm() <= best + 1e-9, "{:?}", q.as_slice());
    }
    let far = circle.nearest_point(&point(&[2.0, 0.0, 0.0])).unwrap().x;
    assert!((far - point(&[1.0, 0.0, 0.0])).norm() < 1e-9);
}

#[test]
fn nearest_point_fixes_points_of_the_stratum() {
    for pair in fixtures::all() {
        for p in pair.x.sample(50, 4).points {
            let q = pair.x.nearest_point(&p.x).unwrap();
            assert!((q.x - &p.x).norm() < 1e-8, "{}", pair.name);
        }
    }
}

#[test]
fn paraboloid_secant_defect() {
    let pair = fixtures::paraboloid();
    let ctx = KuoContext::new(&pair, &point(&[0.0, 0.0, 0.0])).unwrap();
    let x = pair.x.locate(&point(&[1.0, 0.0, 1.0])).unwrap();
    // normal (-2, 0, 1)/sqrt 5 and secant (1, 0, 1)/sqrt 2
    let n = [-2.0 / 5f64.sqrt(), 0.0, 1.0 / 5f64.sqrt()];
    let s = [1.0 / 2f64.sqrt(), 0.0, 1.0 / 2f64.sqrt()];
    let oracle = common::dot(&n, &s).powi(2);
    assert!((oracle - 0.1).abs() < 1e-15);
    assert!((ctx.p_b_prime(&x).unwrap() - oracle).abs() <= 1e-9);
    assert_eq!(ctx.p_a(&x).unwrap(), 0.0);
    assert!((ctx.p_b(&x).unwrap() - 0.1).abs() <= 1e-9);
}

#[test]
fn cone_is_ruled_so_pb_vanishes() {
    let pair = fixtures::cone();
    let ctx = KuoContext::new(&pair, &point(&[0.0, 0.0, 0.0])).unwrap();
    let samples = pair.x.sample(100, 21).points;
    assert_eq!(samples.len(), 100);
    for p in &samples {
        assert!(ctx.p_b(p).unwrap().abs() <= 1e-9, "{:?}", p.x.as_slice());
    }
}

#[test]
fn kuo_values_stay_in_range() {
    for pair in fixtures::all() {
        let k = pair.k() as f64;
        for y in pair.y.sample(4, 1).points {
            let ctx = KuoContext::new(&pair, &y.x).unwrap();
            for x in pair.x.sample(200, 2).points {
                let Ok(v) = ctx.values(&x) else { continue };
                assert!((0.0..=k).contains(&v.pa), "{}: p_a {}", pair.name, v.pa);
                assert!((0.0..=1.0).contains(&v.pb_prime));
                assert_eq!(v.pb, v.pa + v.pb_prime);
            }
        }
    }
}

#[test]
fn pa_is_squeezed_by_the_angle() {
    // delta^2 <= p_a <= k delta^2, so both vanish together
    for pair in fixtures::all() {
        let k = pair.k() as f64;
        for y in pair.y.sample(3, 6).points {
            let ctx = KuoContext::new(&pair, &y.x).unwrap();
            for x in pair.x.sample(100, 8).points {
                let t = pair.x.tangent(&x).unwrap();
                let d = angle(&ctx.frame, &t).unwrap();
                let pa = ctx.p_a(&x).unwrap();
                assert!(d * d <= pa + 1e-9 && pa <= k * d * d + 1e-9, "{}: p_a {pa}, delta {d}", pair.name);
                assert_eq!(pa < 1e-12, d < 1e-6, "{}: p_a {pa}, delta {d}", pair.name);
            }
        }
    }
}

#[test]
fn frame_normal_to_the_tangent_plane_gives_one() {
    let e1 = Subspace::span(3, &[point(&[1.0, 0.0, 0.0])]).unwrap();
    let yz = Subspace::span(3, &[point(&[0.0, 1.0, 0.0]), point(&[0.0, 0.0, 1.0])]).unwrap();
    assert!((p_a_from(&e1, &yz) - 1.0).abs() < 1e-15);
}

#[test]
fn brim_is_coplanar_with_the_circle() {
    let pair = fixtures::santa_hat_brim();
    let ctx = KuoContext::new(&pair, &point(&fixtures::HAT_APEX)).unwrap();
    for p in pair.x.sample_shell(&point(&fixtures::HAT_APEX), 0.3, 0.01, 50, 3) {
        assert!(ctx.p_a(&p).unwrap() < 1e-12);
    }
}

#[test]
fn pa_ignores_the_choice_of_frame() {
    // X = {(u, v, w, w^2 + u w)} with w > 0 over the plane Y = {w = 0}
    let x = ParametricPatch::from_strs(
        &["u", "v", "w"],
        &["u", "v", "w", "w^2 + u*w"],
        vec![Interval::open(-1.0, 1.0), Interval::open(-1.0, 1.0), Interval::open(0.0, 1.0)],
        &[],
    )
    .unwrap();
    let y = ParametricPatch::from_strs(
        &["u", "v"],
        &["u", "v", "0", "0"],
        vec![Interval::open(-1.0, 1.0), Interval::open(-1.0, 1.0)],
        &[],
    )
    .unwrap();
    let pair = PairXY::new(
        "sheet",
        Arc::new(Stratum::parametric("sheet", x).unwrap()),
        Arc::new(Stratum::parametric("plane", y).unwrap()),
    )
    .unwrap();
    let base = point(&[0.2, -0.1, 0.0, 0.0]);
    let mut r = rng(4);
    let xs = pair.x.sample(50, 3).points;
    let reference = KuoContext::new(&pair, &base).unwrap();
    for _ in 0..10 {
        let th: f64 = r.random_range(0.0..std::f64::consts::TAU);
        let a = DVector::from_row_slice(&[th.cos(), th.sin(), 0.0, 0.0]);
        let b = DVector::from_row_slice(&[-th.sin(), th.cos(), 0.0, 0.0]);
        let frame = Subspace::from_orthonormal(nalgebra::DMatrix::from_columns(&[a, b])).unwrap();
        let ctx = KuoContext::with_frame(&pair, &base, frame).unwrap();
        for p in &xs {
            assert!((ctx.p_a(p).unwrap() - reference.p_a(p).unwrap()).abs() <= 1e-9);
        }
    }
    let bad = Subspace::span(4, &[point(&[1.0, 0.0, 0.0, 0.0]), point(&[0.0, 0.0, 1.0, 0.0])]).unwrap();
    assert!(KuoContext::with_frame(&pair, &base, bad).is_err());
}

#[test]
fn secant_is_undefined_on_y() {
    let pair = fixtures::paraboloid();
    let ctx = KuoContext::new(&pair, &point(&[0.0, 0.0, 0.0])).unwrap();
    assert!(ctx.secant(&point(&[0.0, 0.0, 0.0])).is_err());
}
