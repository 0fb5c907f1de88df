//! Built-in pairs with known regularity behavior.
//!
//! Every fixture is polynomial or rational (plus `sqrt` for cone graphs),
//! so the unit circle is covered by two rational charts rather than an
//! angle: `t |-> ((1-t^2)/(1+t^2), 2t/(1+t^2))` over `[-1, 1]` for the right
//! half (the point `(1, 0)` sits at `t = 0`) and its mirror image over
//! `(-1, 1)` for the left half.

use std::sync::Arc;

use crate::error::Result;
use crate::io::{PairSpec, StrataSet};
use crate::strata::{Interval, PairXY, ParametricPatch, Patch, Stratum};

fn stratum(name: &str, patches: Vec<ParametricPatch>) -> Stratum {
    Stratum::new(name, patches.into_iter().map(Patch::Parametric).collect()).expect("fixture stratum")
}

fn patch(params: &[&str], map: &[&str], domain: Vec<Interval>, ineq: &[&str]) -> ParametricPatch {
    ParametricPatch::from_strs(params, map, domain, ineq).expect("fixture patch")
}

/// Unit circle in the plane `z = 0` of `R^3`.
pub fn unit_circle() -> Stratum {
    stratum(
        "circle",
        vec![
            patch(
                &["t"],
                &["(1 - t^2)/(1 + t^2)", "2*t/(1 + t^2)", "0"],
                vec![Interval::closed(-1.0, 1.0)],
                &[],
            ),
            patch(
                &["t"],
                &["(t^2 - 1)/(1 + t^2)", "2*t/(1 + t^2)", "0"],
                vec![Interval::open(-1.0, 1.0)],
                &[],
            ),
        ],
    )
}

/// Open annulus `1 < x^2 + y^2 < 4` in the plane `z = 0`.
pub fn hat_brim() -> Stratum {
    stratum(
        "annulus",
        vec![patch(
            &["u", "v"],
            &["u", "v", "0"],
            vec![Interval::open(-2.0, 2.0); 2],
            &["u^2 + v^2 - 1", "4 - u^2 - v^2"],
        )],
    )
}

/// Open cone `z = sqrt((x-1)^2 + y^2)`, `0 < z < 1`, with its tip on the
/// circle at `(1, 0, 0)`.
pub fn hat_cone() -> Stratum {
    stratum(
        "cone",
        vec![patch(
            &["a", "b"],
            &["1 + a", "b", "sqrt(a^2 + b^2)"],
            vec![Interval::open(-1.0, 1.0); 2],
            &["a^2 + b^2", "1 - a^2 - b^2"],
        )],
    )
}

/// Tip of the hat.
pub const HAT_APEX: [f64; 3] = [1.0, 0.0, 0.0];

pub fn santa_hat_set() -> StrataSet {
    StrataSet::new(
        3,
        vec![hat_brim(), hat_cone(), unit_circle()],
        vec![
            PairSpec::new("X,Y", &["annulus", "cone"], "circle"),
            PairSpec::new("brim", &["annulus"], "circle"),
        ],
    )
    .expect("fixture set")
}

/// `X` = brim and cone, `Y` = the circle they both bound.
pub fn santa_hat() -> PairXY {
    santa_hat_set().pair("X,Y").expect("fixture pair")
}

/// The brim alone over the circle.
pub fn santa_hat_brim() -> PairXY {
    santa_hat_set().pair("brim").expect("fixture pair")
}

pub fn whitney_umbrella_set() -> StrataSet {
    let x = stratum(
        "umbrella",
        vec![
            patch(&["u", "v"], &["u*v", "v", "u^2"], vec![Interval::open(-1.5, 1.5), Interval::open(0.0, 1.5)], &[]),
            patch(&["u", "v"], &["u*v", "v", "u^2"], vec![Interval::open(-1.5, 1.5), Interval::open(-1.5, 0.0)], &[]),
        ],
    );
    let y = stratum("handle", vec![patch(&["t"], &["0", "0", "t"], vec![Interval::closed_open(0.0, 2.0)], &[])]);
    StrataSet::new(3, vec![x, y], vec![PairSpec::new("umbrella", &["umbrella"], "handle")]).expect("fixture set")
}

/// `x^2 = z y^2` with `y != 0` over the non-negative `z`-axis.
pub fn whitney_umbrella() -> PairXY {
    whitney_umbrella_set().pair("umbrella").expect("fixture pair")
}

pub fn cone_set() -> StrataSet {
    let x = stratum(
        "cone",
        vec![patch(
            &["a", "b"],
            &["a", "b", "sqrt(a^2 + b^2)"],
            vec![Interval::open(-1.0, 1.0); 2],
            &["a^2 + b^2", "1 - a^2 - b^2"],
        )],
    );
    let y = Stratum::point("apex", &[0.0, 0.0, 0.0]);
    StrataSet::new(3, vec![x, y], vec![PairSpec::new("cone", &["cone"], "apex")]).expect("fixture set")
}

/// `z^2 = x^2 + y^2`, `0 < z < 1`, over its apex.
pub fn cone() -> PairXY {
    cone_set().pair("cone").expect("fixture pair")
}

pub fn paraboloid_set() -> StrataSet {
    let x = stratum(
        "paraboloid",
        vec![patch(
            &["a", "b"],
            &["a", "b", "a^2 + b^2"],
            vec![Interval::open(-1.5, 1.5); 2],
            &["a^2 + b^2"],
        )],
    );
    let y = Stratum::point("origin", &[0.0, 0.0, 0.0]);
    StrataSet::new(3, vec![x, y], vec![PairSpec::new("paraboloid", &["paraboloid"], "origin")]).expect("fixture set")
}

/// `z = x^2 + y^2` minus the origin, over the origin.
pub fn paraboloid() -> PairXY {
    paraboloid_set().pair("paraboloid").expect("fixture pair")
}

fn x_axis(name: &str) -> Stratum {
    stratum(name, vec![patch(&["t"], &["t", "0", "0"], vec![Interval::open(-1.0, 1.0)], &[])])
}

pub fn half_plane_set() -> StrataSet {
    let x = stratum(
        "half-plane",
        vec![patch(&["u", "v"], &["u", "v", "0"], vec![Interval::open(-1.0, 1.0), Interval::open(0.0, 1.0)], &[])],
    );
    StrataSet::new(3, vec![x, x_axis("edge")], vec![PairSpec::new("half-plane", &["half-plane"], "edge")])
        .expect("fixture set")
}

/// Open half-plane over its edge line.
pub fn half_plane_pair() -> PairXY {
    half_plane_set().pair("half-plane").expect("fixture pair")
}

pub fn slit_plane_set() -> StrataSet {
    let x = stratum(
        "slit-plane",
        vec![
            patch(&["u", "v"], &["u", "v", "0"], vec![Interval::open(-1.0, 1.0), Interval::open(0.0, 1.0)], &[]),
            patch(&["u", "v"], &["u", "v", "0"], vec![Interval::open(-1.0, 1.0), Interval::open(-1.0, 0.0)], &[]),
        ],
    );
    StrataSet::new(3, vec![x, x_axis("slit")], vec![PairSpec::new("slit-plane", &["slit-plane"], "slit")])
        .expect("fixture set")
}

/// A plane minus a line, over that line.
pub fn slit_plane() -> PairXY {
    slit_plane_set().pair("slit-plane").expect("fixture pair")
}

/// Radius of the disk cut out of [`offset_fiber_pair`]'s `X`: the fiber
/// over the origin meets `X` only at distance `2 * OFFSET_RADIUS`.
pub const OFFSET_RADIUS: f64 = 0.15;

pub fn offset_fiber_set() -> StrataSet {
    let x = stratum(
        "notched-plane",
        vec![patch(
            &["u", "v"],
            &["u", "v", "0"],
            vec![Interval::open(-1.0, 1.0), Interval::open(0.0, 1.0)],
            &["u^2 - v*(0.3 - v)"],
        )],
    );
    let y = stratum("edge", vec![patch(&["t"], &["t", "0", "0"], vec![Interval::open(-0.5, 0.5)], &[])]);
    StrataSet::new(3, vec![x, y], vec![PairSpec::new("offset-fiber", &["notched-plane"], "edge")]).expect("fixture set")
}

/// Half-plane with a disk tangent to its edge at the origin removed: the
/// normal fiber over the origin starts at distance 0.3.
pub fn offset_fiber_pair() -> PairXY {
    offset_fiber_set().pair("offset-fiber").expect("fixture pair")
}

/// Every fixture pair with its name.
pub fn all() -> Vec<PairXY> {
    vec![
        santa_hat(),
        santa_hat_brim(),
        whitney_umbrella(),
        cone(),
        paraboloid(),
        half_plane_pair(),
        slit_plane(),
        offset_fiber_pair(),
    ]
}

/// The JSON-exportable set behind a fixture, by set name.
pub fn set_by_name(name: &str) -> Option<StrataSet> {
    Some(match name {
        "santa_hat" => santa_hat_set(),
        "whitney_umbrella" => whitney_umbrella_set(),
        "cone" => cone_set(),
        "paraboloid" => paraboloid_set(),
        "half_plane" => half_plane_set(),
        "slit_plane" => slit_plane_set(),
        "offset_fiber" => offset_fiber_set(),
        _ => return None,
    })
}

pub const SET_NAMES: [&str; 7] =
    ["santa_hat", "whitney_umbrella", "cone", "paraboloid", "half_plane", "slit_plane", "offset_fiber"];

/// Builds a pair from strata that are already validated fixtures.
pub fn pair_of(name: &str, x: Stratum, y: Stratum) -> Result<PairXY> {
    PairXY::new(name, Arc::new(x), Arc::new(y))
}
