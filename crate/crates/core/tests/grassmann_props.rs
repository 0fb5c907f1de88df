//! Properties of the subspace angle and projections on random subspaces.

mod common;

use common::{brute_angle, random_subspace, random_superspace, rng};
use proptest::prelude::*;
use stratcheck::grassmann::{angle, grassmann_limit, symmetric_angle};
use stratcheck::Subspace;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn equal_dimensions_are_symmetric(seed: u64, n in 1usize..=8, d in 0usize..=8) {
        let d = d.min(n);
        let mut r = rng(seed);
        let (p, _) = random_subspace(&mut r, n, d);
        let (q, _) = random_subspace(&mut r, n, d);
        prop_assert!((angle(&p, &q).unwrap() - angle(&q, &p).unwrap()).abs() <= 1e-9);
    }

    #[test]
    fn containment_gives_zero_and_proper_containment_one(seed: u64, n in 2usize..=8, d in 1usize..8, extra in 1usize..8) {
        let d = d.min(n - 1);
        let e = (d + extra).min(n);
        let mut r = rng(seed);
        let (p, pb) = random_subspace(&mut r, n, d);
        let (q, _) = random_superspace(&mut r, n, &pb, e);
        prop_assert!(angle(&p, &q).unwrap() <= 1e-12);
        prop_assert!((angle(&q, &p).unwrap() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn triangle_inequality(seed: u64, n in 1usize..=8, a in 0usize..=8, b in 0usize..=8, c in 0usize..=8) {
        let mut dims = [a.min(n), b.min(n), c.min(n)];
        dims.sort();
        let mut r = rng(seed);
        let (t, _) = random_subspace(&mut r, n, dims[0]);
        let (p, _) = random_subspace(&mut r, n, dims[1]);
        let (q, _) = random_subspace(&mut r, n, dims[2]);
        let lhs = angle(&t, &q).unwrap();
        let rhs = angle(&t, &p).unwrap() + angle(&p, &q).unwrap();
        prop_assert!(lhs <= rhs + 1e-9, "{lhs} > {rhs}");
    }

    #[test]
    fn angle_lies_in_unit_interval(seed: u64, n in 1usize..=8, a in 0usize..=8, b in 0usize..=8) {
        let mut r = rng(seed);
        let (p, _) = random_subspace(&mut r, n, a.min(n));
        let (q, _) = random_subspace(&mut r, n, b.min(n));
        let d = angle(&p, &q).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn projection_is_idempotent_and_orthogonal(seed: u64, n in 1usize..=8, d in 0usize..=8) {
        let mut r = rng(seed);
        let (p, _) = random_subspace(&mut r, n, d.min(n));
        let v = common::point(&common::random_vector(&mut r, n));
        let pv = p.project(&v).unwrap();
        let ppv = p.project(&pv).unwrap();
        prop_assert!((&pv - &ppv).norm() <= 1e-12);
        let comp = p.orthogonal_complement();
        prop_assert_eq!(comp.dim(), n - p.dim());
        let back = comp.project(&v).unwrap();
        prop_assert!((&pv + &back - &v).norm() <= 1e-12);
    }

    #[test]
    fn spectral_angle_matches_sampled_sup(seed: u64, n in 2usize..=6, d in 1usize..=2, e in 0usize..=6) {
        let mut r = rng(seed);
        let (p, pb) = random_subspace(&mut r, n, d.min(n));
        let (q, qb) = random_subspace(&mut r, n, e.min(n));
        let brute = brute_angle(&pb, &qb, 20_000, &mut r);
        prop_assert!((angle(&p, &q).unwrap() - brute).abs() <= 1e-2);
    }
}

#[test]
fn zero_subspace_conventions() {
    let z = Subspace::zero(3);
    let mut r = rng(1);
    let (p, _) = random_subspace(&mut r, 3, 2);
    assert_eq!(angle(&z, &p).unwrap(), 0.0);
    assert_eq!(angle(&p, &z).unwrap(), 1.0);
    assert_eq!(z.orthogonal_complement().dim(), 3);
    assert!(angle(&z, &Subspace::zero(4)).is_err());
}

#[test]
fn symmetric_angle_is_the_larger_direction() {
    let mut r = rng(2);
    let (p, _) = random_subspace(&mut r, 5, 2);
    let (q, _) = random_subspace(&mut r, 5, 3);
    let s = symmetric_angle(&p, &q).unwrap();
    assert_eq!(s, angle(&p, &q).unwrap().max(angle(&q, &p).unwrap()));
}

#[test]
fn limit_window_is_the_last_quarter() {
    // early elements disagree wildly, the last quarter is constant
    let x = common::subspace(2, &[vec![1.0, 0.0]]);
    let y = common::subspace(2, &[vec![0.0, 1.0]]);
    let mut seq: Vec<Subspace> = (0..12).map(|i| if i % 2 == 0 { x.clone() } else { y.clone() }).collect();
    seq.extend(std::iter::repeat_n(x.clone(), 4));
    let lim = grassmann_limit(&seq, 1e-9).unwrap();
    assert!(lim.converged);
    assert_eq!(lim.limit, x);
    seq.push(y);
    assert!(!grassmann_limit(&seq, 1e-9).unwrap().converged);
}
