//! Flatness checks and flat subdivision of the circle and affine strata.

use stratcheck::error::Error;
use stratcheck::fixtures;
use stratcheck::flatness::{flatten, is_eps_flat, FLAT_SAMPLES, RECHECK_FACTOR};
use stratcheck::strata::{ImplicitPatch, Interval, ParametricPatch, Patch};
use stratcheck::Stratum;

/// Sine of the angle between circle tangents at two points of the circle.
fn circle_tangent_sine(a: &[f64], b: &[f64]) -> f64 {
    (a[0] * b[1] - a[1] * b[0]).abs()
}

fn affine_plane() -> Stratum {
    let p = ParametricPatch::from_strs(
        &["u", "v"],
        &["u + v", "2*u - v", "3"],
        vec![Interval::open(-1.0, 1.0), Interval::open(0.0, 2.0)],
        &[],
    )
    .unwrap();
    Stratum::parametric("plane", p).unwrap()
}

#[test]
fn affine_strata_are_flat_in_one_piece() {
    let plane = affine_plane();
    let check = is_eps_flat(&plane, 1e-6, 64, 1).unwrap();
    assert!(check.flat);
    assert!(check.max_angle < 1e-12);
    assert_eq!(flatten(&plane, 0.01, 1, 1).unwrap().len(), 1);
}

#[test]
fn whole_circle_is_not_flat() {
    let circle = fixtures::unit_circle();
    let check = is_eps_flat(&circle, 0.5, 64, 4).unwrap();
    assert!(!check.flat);
    let (a, b) = check.witness.unwrap();
    let s = circle_tangent_sine(a.x.as_slice(), b.x.as_slice());
    assert!((s - check.max_angle).abs() < 1e-9);
    // dense oracle: the true sup is 1 at a quarter turn
    assert!(check.max_angle > 0.99);
}

#[test]
fn circle_pieces_are_flat_and_partition_the_charts() {
    let circle = fixtures::unit_circle();
    let pieces = flatten(&circle, 0.5, 64, 42).unwrap();
    assert!((12..=64).contains(&pieces.len()), "{}", pieces.len());
    let dense = FLAT_SAMPLES * RECHECK_FACTOR;
    for piece in &pieces {
        let pts = piece.sample(dense, 17).points;
        for (i, a) in pts.iter().enumerate() {
            for b in &pts[i + 1..] {
                assert!(circle_tangent_sine(a.x.as_slice(), b.x.as_slice()) < 0.5, "{}", piece.name);
            }
        }
        assert!(is_eps_flat(piece, 0.5, dense, 23).unwrap().flat);
    }
    for (pi, patch) in circle.patches.iter().enumerate() {
        let Patch::Parametric(whole) = patch else { unreachable!() };
        let full = &whole.domain[0];
        let mut parts: Vec<Interval> = pieces
            .iter()
            .filter_map(|s| match &s.patches[0] {
                Patch::Parametric(pp) if pp.map == whole.map => Some(pp.domain[0]),
                _ => None,
            })
            .collect();
        assert!(!parts.is_empty(), "patch {pi}");
        parts.sort_by(|a, b| a.lo.total_cmp(&b.lo));
        assert_eq!(parts[0].lo, full.lo);
        assert_eq!(parts[0].lo_closed, full.lo_closed);
        assert_eq!(parts.last().unwrap().hi, full.hi);
        assert_eq!(parts.last().unwrap().hi_closed, full.hi_closed);
        for w in parts.windows(2) {
            assert_eq!(w[0].hi, w[1].lo);
            // a shared endpoint belongs to exactly one piece
            assert!(w[0].hi_closed != w[1].lo_closed);
        }
    }
}

#[test]
fn too_few_pieces_is_a_budget_error() {
    let circle = fixtures::unit_circle();
    assert!(matches!(flatten(&circle, 0.5, 4, 42), Err(Error::Budget(_))));
}

#[test]
fn piece_count_does_not_grow_with_eps() {
    let circle = fixtures::unit_circle();
    let counts: Vec<usize> =
        [0.2, 0.35, 0.5, 0.8, 1.0].iter().map(|e| flatten(&circle, *e, 256, 42).unwrap().len()).collect();
    for w in counts.windows(2) {
        assert!(w[1] <= w[0], "{counts:?}");
    }
}

#[test]
fn point_strata_are_flat_for_any_eps() {
    let p = Stratum::point("p", &[0.0, 1.0, 2.0]);
    assert!(is_eps_flat(&p, 1e-9, 2, 0).unwrap().flat);
}

#[test]
fn implicit_strata_cannot_be_flattened() {
    let patch = ImplicitPatch::from_strs(&["x", "y"], &["x^2 + y^2 - 1"], &[], vec![(-2.0, 2.0); 2]).unwrap();
    let s = Stratum::implicit("circle", patch).unwrap();
    assert!(matches!(flatten(&s, 0.5, 64, 1), Err(Error::Unsupported(_))));
    assert!(is_eps_flat(&s, 0.5, 32, 1).is_ok());
}

#[test]
fn bad_arguments() {
    let circle = fixtures::unit_circle();
    assert!(is_eps_flat(&circle, 0.0, 8, 0).is_err());
    assert!(is_eps_flat(&circle, 0.5, 1, 0).is_err());
    assert!(flatten(&circle, 0.5, 0, 0).is_err());
}
