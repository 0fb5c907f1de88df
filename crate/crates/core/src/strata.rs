//! Definable submanifolds ("strata") and the pairs `(X, Y)` that regularity
//! tests act on.
//!
//! A [`Stratum`] is a disjoint union of one or more patches of equal
//! dimension. A patch is either
//!
//! * parametric: a polynomial/rational map from a parameter box, optionally
//!   cut by strict inequalities in the parameters,
//! * implicit: the zero set of equalities, cut by strict inequalities,
//! * a level curve or level region produced by slicing a parametric patch
//!   along a level set of `p_a` (see [`crate::refine`]).
//!
//! Everything downstream works with [`SamplePoint`]s, which remember the
//! patch and, for parametric patches, the parameter that produced them.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock, RwLock};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expression;
use crate::grassmann::Subspace;
use crate::kuo::PaField;
use crate::rng::{self, TaskRng};

/// Residual below which a point counts as lying on a stratum.
pub const ON_SET_TOL: f64 = 1e-8;
/// Strict constraints and open box ends must hold by at least this much
/// for a point to count as a member; rounding can satisfy `g > 0` at the
/// excluded boundary itself.
pub const MEMBERSHIP_MARGIN: f64 = 1e-9;
/// Number of local descents in a nearest-point query.
pub const NEAREST_STARTS: usize = 8;
const GN_MAX_ITERS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    #[serde(default)]
    pub lo_closed: bool,
    #[serde(default)]
    pub hi_closed: bool,
}

impl Interval {
    pub fn open(lo: f64, hi: f64) -> Self {
        Interval { lo, hi, lo_closed: false, hi_closed: false }
    }

    pub fn closed(lo: f64, hi: f64) -> Self {
        Interval { lo, hi, lo_closed: true, hi_closed: true }
    }

    /// `[lo, hi)`
    pub fn closed_open(lo: f64, hi: f64) -> Self {
        Interval { lo, hi, lo_closed: true, hi_closed: false }
    }

    pub fn contains(&self, t: f64) -> bool {
        let above = if self.lo_closed { t >= self.lo } else { t > self.lo };
        let below = if self.hi_closed { t <= self.hi } else { t < self.hi };
        above && below
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    /// Splits at the midpoint. The shared endpoint goes to the lower half,
    /// so the halves are disjoint and their union is `self`.
    pub fn bisect(&self) -> (Interval, Interval) {
        let m = self.mid();
        (
            Interval { lo: self.lo, hi: m, lo_closed: self.lo_closed, hi_closed: true },
            Interval { lo: m, hi: self.hi, lo_closed: false, hi_closed: self.hi_closed },
        )
    }

    fn clamp(&self, t: f64) -> f64 {
        t.clamp(self.lo, self.hi)
    }
}

/// A point of a stratum with the patch (and parameter) that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePoint {
    pub x: DVector<f64>,
    pub patch: usize,
    pub param: Option<DVector<f64>>,
}

/// Samples plus a flag raised when the retry budget ran out early.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub points: Vec<SamplePoint>,
    pub shortfall: bool,
}

// ---------------------------------------------------------------------------
// charts: the common machinery of parameterized patches
// ---------------------------------------------------------------------------

pub(crate) trait Chart: Sync {
    fn ambient(&self) -> usize;
    fn domain(&self) -> Vec<Interval>;
    fn map(&self, u: &[f64]) -> Result<DVector<f64>>;
    fn jacobian(&self, u: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)>;
    /// Constraints other than the box: strict inequalities, level predicates.
    fn feasible(&self, u: &[f64]) -> bool;
    fn start_cache(&self) -> &OnceLock<Vec<(DVector<f64>, DVector<f64>)>>;

    /// Smallest value of the strict constraints at `u` (infinite if none).
    fn constraint_margin(&self, u: &[f64]) -> f64;

    /// How far inside the patch `u` is: the smaller of the constraint
    /// margin and the distance to open ends of the box.
    fn margin(&self, u: &[f64]) -> f64 {
        let mut m = self.constraint_margin(u);
        for (iv, t) in self.domain().iter().zip(u) {
            if !iv.lo_closed {
                m = m.min(t - iv.lo);
            }
            if !iv.hi_closed {
                m = m.min(iv.hi - t);
            }
        }
        m
    }

    fn admissible(&self, u: &[f64]) -> bool {
        self.domain().iter().zip(u).all(|(iv, t)| iv.contains(*t)) && self.feasible(u)
    }

    /// Fixed quasi-random parameter samples used to seed local descents.
    fn starts(&self) -> &[(DVector<f64>, DVector<f64>)] {
        self.start_cache().get_or_init(|| {
            let dom = self.domain();
            let m = dom.len();
            if m == 0 {
                return self
                    .map(&[])
                    .map(|x| vec![(DVector::zeros(0), x)])
                    .unwrap_or_default();
            }
            let count = match m {
                1 => 96,
                2 => 400,
                _ => 1200,
            };
            let mut out = Vec::with_capacity(count);
            for i in 0..(count as u64 * 4) {
                if out.len() >= count {
                    break;
                }
                let h = rng::halton_point(i + 1, m);
                let u: Vec<f64> = dom.iter().zip(&h).map(|(iv, s)| iv.lo + s * iv.width()).collect();
                if !self.admissible(&u) {
                    continue;
                }
                if let Ok(x) = self.map(&u) {
                    out.push((DVector::from_vec(u), x));
                }
            }
            out
        })
    }
}

/// Tangent space of a chart at `u`; rejects non-immersive points.
fn chart_tangent(chart: &dyn Chart, u: &[f64]) -> Result<Subspace> {
    let (_, j) = chart.jacobian(u)?;
    if j.ncols() == 0 {
        return Ok(Subspace::zero(chart.ambient()));
    }
    check_rank(&j, "parametric map is not an immersion here")?;
    Subspace::column_space(&j)
}

fn check_rank(m: &DMatrix<f64>, what: &str) -> Result<()> {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || min <= 1e-9 * max {
        return Err(Error::RankDeficient(what.to_string()));
    }
    Ok(())
}

fn area_element(j: &DMatrix<f64>) -> f64 {
    if j.ncols() == 0 {
        return 1.0;
    }
    (j.transpose() * j).determinant().max(0.0).sqrt()
}

/// Levenberg-Marquardt descent of `|map(u) - q|^2` over the closed box,
/// keeping the other constraints strictly satisfied.
fn chart_descend(chart: &dyn Chart, q: &DVector<f64>, start: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
    let dom = chart.domain();
    let m = dom.len();
    let mut u = start.clone();
    let (mut x, mut j) = chart.jacobian(u.as_slice()).ok()?;
    if m == 0 {
        return Some((u, x));
    }
    let mut err = (q - &x).norm_squared();
    let mut lambda = 1e-3;
    for _ in 0..100 {
        let r = q - &x;
        let g = j.tr_mul(&r);
        if g.norm() <= 1e-15 * (1.0 + r.norm()) {
            break;
        }
        // Gauss-Newton converges only linearly when the residual is large,
        // so add the residual-weighted curvature from a difference of
        // Jacobians
        let gn = j.tr_mul(&j);
        let mut jtj = gn.clone();
        for k in 0..m {
            let h = 1e-7 * (1.0 + u[k].abs());
            let mut up: Vec<f64> = u.iter().copied().collect();
            up[k] += h;
            if let Ok((_, jk)) = chart.jacobian(&up) {
                let dj = (jk - &j) / h;
                let col = dj.tr_mul(&r);
                for l in 0..m {
                    jtj[(l, k)] -= 0.5 * col[l];
                    jtj[(k, l)] -= 0.5 * col[l];
                }
            }
        }
        let mut improved = false;
        while lambda < 1e12 {
            let mut a = jtj.clone();
            for i in 0..m {
                a[(i, i)] += lambda * (gn[(i, i)] + 1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&g)) else {
                lambda *= 10.0;
                continue;
            };
            if step.norm() <= 1e-15 * (1.0 + u.norm()) {
                break;
            }
            let cand: Vec<f64> = (0..m).map(|i| dom[i].clamp(u[i] + step[i])).collect();
            // pinned against the box: nothing left to gain
            let clamped = (0..m).any(|i| cand[i] != u[i] + step[i]);
            if clamped && cand.iter().zip(u.iter()).all(|(c, v)| (c - v).abs() <= 1e-12 * (1.0 + v.abs())) {
                break;
            }
            if chart.feasible(&cand) {
                if let Ok((nx, nj)) = chart.jacobian(&cand) {
                    let nr = q - &nx;
                    let nerr = nr.norm_squared();
                    // near the optimum the squared error stalls at rounding
                    // level, so fall back to the gradient norm
                    let better = nerr < err
                        || (nerr <= err * (1.0 + 1e-13) && nj.tr_mul(&nr).norm() < g.norm());
                    if better {
                        let cand = DVector::from_vec(cand);
                        let moved = (&cand - &u).norm();
                        u = cand;
                        x = nx;
                        j = nj;
                        err = nerr;
                        lambda = (lambda / 10.0).max(1e-12);
                        improved = moved > 1e-15 * (1.0 + u.norm());
                        break;
                    }
                }
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    Some((u, x))
}

/// Nearest point of the closure of the chart's image to `q`.
fn chart_nearest(chart: &dyn Chart, q: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
    let starts = chart.starts();
    if starts.is_empty() {
        return None;
    }
    let mut ranked: Vec<(f64, usize)> = starts
        .iter()
        .enumerate()
        .map(|(i, (_, x))| ((x - q).norm_squared(), i))
        .collect();
    let k = NEAREST_STARTS.min(ranked.len());
    ranked.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0));
    ranked.truncate(k);
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut best: Option<(f64, DVector<f64>, DVector<f64>)> = None;
    // a start inside the parameter ball swept by an earlier descent would
    // land on the same minimizer
    let mut basins: Vec<(DVector<f64>, f64)> = Vec::new();
    for (_, i) in ranked {
        let u0 = &starts[i].0;
        if basins.iter().any(|(c, r)| (u0 - c).norm() < *r) {
            continue;
        }
        if let Some((u, x)) = chart_descend(chart, q, u0) {
            basins.push((u.clone(), 1.5 * (&u - u0).norm()));
            let d = (&x - q).norm();
            if best.as_ref().is_none_or(|b| d < b.0) {
                best = Some((d, u, x));
            }
        }
    }
    best.map(|(_, u, x)| (u, x))
}

/// Local descent from a known parameter only (no global restarts).
pub(crate) fn chart_local_nearest(chart: &dyn Chart, q: &DVector<f64>, from: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
    chart_descend(chart, q, from)
}

struct Cell {
    lo: Vec<f64>,
    hi: Vec<f64>,
    depth: u32,
}

/// Samples of the chart's image inside the shell `r_in <= |x - c| < r_out`.
/// The parameter box is subdivided adaptively until the image of each
/// surviving cell is small relative to `r_out`; cells are then drawn in
/// proportion to their estimated image measure.
fn chart_ball_sample(
    chart: &dyn Chart,
    center: &DVector<f64>,
    r_out: f64,
    r_in: f64,
    n: usize,
    rng: &mut TaskRng,
) -> Vec<(DVector<f64>, DVector<f64>)> {
    let dom = chart.domain();
    let m = dom.len();
    if m == 0 {
        return match chart.map(&[]) {
            Ok(x) => {
                let d = (&x - center).norm();
                if d < r_out && d >= r_in {
                    vec![(DVector::zeros(0), x)]
                } else {
                    vec![]
                }
            }
            Err(_) => vec![],
        };
    }
    let mut stack = vec![Cell {
        lo: dom.iter().map(|iv| iv.lo).collect(),
        hi: dom.iter().map(|iv| iv.hi).collect(),
        depth: 0,
    }];
    let mut leaves: Vec<(Cell, f64)> = Vec::new();
    while let Some(cell) = stack.pop() {
        let mid: Vec<f64> = cell.lo.iter().zip(&cell.hi).map(|(a, b)| 0.5 * (a + b)).collect();
        let half: Vec<f64> = cell.lo.iter().zip(&cell.hi).map(|(a, b)| 0.5 * (b - a)).collect();
        let (x0, ext) = match chart.jacobian(&mid) {
            Ok((x0, j)) => {
                let ext: Vec<f64> = (0..m).map(|i| j.column(i).norm() * half[i]).collect();
                (x0, Some((ext, j)))
            }
            Err(_) => match chart.map(&mid) {
                Ok(x0) => (x0, None),
                Err(_) => {
                    if cell.depth < 40 {
                        split_cell(&cell, None, &mut stack);
                    }
                    continue;
                }
            },
        };
        let mut corner_r: f64 = 0.0;
        if m <= 3 {
            for mask in 0..(1usize << m) {
                let corner: Vec<f64> = (0..m)
                    .map(|i| if mask & (1 << i) != 0 { cell.hi[i] } else { cell.lo[i] })
                    .collect();
                if let Ok(xc) = chart.map(&corner) {
                    corner_r = corner_r.max((xc - &x0).norm());
                }
            }
        }
        let lin = ext.as_ref().map(|(e, _)| e.iter().map(|v| v * v).sum::<f64>().sqrt()).unwrap_or(f64::INFINITY);
        let reach = 1.5 * lin.max(corner_r);
        let d = (&x0 - center).norm();
        if d - reach > r_out || d + reach < r_in {
            continue;
        }
        if (reach <= r_out / 8.0 || cell.depth >= 48 || leaves.len() > 20_000) && ext.is_some() {
            let (_, j) = ext.unwrap();
            let vol: f64 = half.iter().map(|h| 2.0 * h).product();
            leaves.push((cell, vol * area_element(&j) + 1e-300));
        } else {
            split_cell(&cell, ext.as_ref().map(|(e, _)| e.as_slice()), &mut stack);
        }
    }
    if leaves.is_empty() {
        return vec![];
    }
    let total: f64 = leaves.iter().map(|(_, w)| w).sum();
    let mut cumulative = Vec::with_capacity(leaves.len());
    let mut acc = 0.0;
    for (_, w) in &leaves {
        acc += w / total;
        cumulative.push(acc);
    }
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n && attempts < 40 * n {
        attempts += 1;
        let pick: f64 = rng.random();
        let idx = cumulative.partition_point(|c| *c < pick).min(leaves.len() - 1);
        let cell = &leaves[idx].0;
        let u: Vec<f64> = (0..m).map(|i| cell.lo[i] + rng.random::<f64>() * (cell.hi[i] - cell.lo[i])).collect();
        if !chart.admissible(&u) {
            continue;
        }
        let Ok(x) = chart.map(&u) else { continue };
        let d = (&x - center).norm();
        if d < r_out && d >= r_in {
            out.push((DVector::from_vec(u), x));
        }
    }
    out
}

fn split_cell(cell: &Cell, ext: Option<&[f64]>, stack: &mut Vec<Cell>) {
    let m = cell.lo.len();
    let axis = match ext {
        Some(e) if e.iter().any(|v| *v > 0.0) => (0..m).max_by(|a, b| e[*a].total_cmp(&e[*b])).unwrap(),
        _ => (0..m)
            .max_by(|a, b| (cell.hi[*a] - cell.lo[*a]).total_cmp(&(cell.hi[*b] - cell.lo[*b])))
            .unwrap(),
    };
    let mid = 0.5 * (cell.lo[axis] + cell.hi[axis]);
    let mut lower_hi = cell.hi.clone();
    lower_hi[axis] = mid;
    let mut upper_lo = cell.lo.clone();
    upper_lo[axis] = mid;
    stack.push(Cell { lo: cell.lo.clone(), hi: lower_hi, depth: cell.depth + 1 });
    stack.push(Cell { lo: upper_lo, hi: cell.hi.clone(), depth: cell.depth + 1 });
}

// ---------------------------------------------------------------------------
// patch kinds
// ---------------------------------------------------------------------------

#[derive(Debug, Default)]
pub(crate) struct StartCache(OnceLock<Vec<(DVector<f64>, DVector<f64>)>>);

impl Clone for StartCache {
    fn clone(&self) -> Self {
        StartCache::default()
    }
}

impl PartialEq for StartCache {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

/// `u |-> map(u)` over a parameter box, cut by `h(u) > 0` inequalities.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricPatch {
    pub params: Vec<String>,
    pub map: Vec<Expression>,
    pub domain: Vec<Interval>,
    pub inequalities: Vec<Expression>,
    starts: StartCache,
}

impl ParametricPatch {
    pub fn new(params: Vec<String>, map: Vec<Expression>, domain: Vec<Interval>, inequalities: Vec<Expression>) -> Result<Self> {
        if domain.len() != params.len() {
            return Err(Error::Invalid(format!(
                "{} parameters but {} domain intervals",
                params.len(),
                domain.len()
            )));
        }
        for iv in &domain {
            if !(iv.lo.is_finite() && iv.hi.is_finite() && iv.lo <= iv.hi) {
                return Err(Error::Invalid(format!("bad parameter interval [{}, {}]", iv.lo, iv.hi)));
            }
        }
        for e in map.iter().chain(&inequalities) {
            if e.variables() != params.as_slice() {
                return Err(Error::Invalid(format!("expression `{e}` is not over the parameters {params:?}")));
            }
        }
        Ok(ParametricPatch { params, map, domain, inequalities, starts: StartCache::default() })
    }

    /// Parses map components and inequalities against `params`.
    pub fn from_strs(params: &[&str], map: &[&str], domain: Vec<Interval>, inequalities: &[&str]) -> Result<Self> {
        let map = map.iter().map(|s| Expression::parse_with_vars(s, params)).collect::<Result<Vec<_>, _>>()?;
        let ineq = inequalities
            .iter()
            .map(|s| Expression::parse_with_vars(s, params))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(params.iter().map(|s| s.to_string()).collect(), map, domain, ineq)
    }

    /// A single point.
    pub fn point(coords: &[f64]) -> Self {
        let map = coords
            .iter()
            .map(|c| {
                let node = if *c < 0.0 {
                    crate::expr::Node::Neg(Box::new(crate::expr::Node::Const(-c)))
                } else {
                    crate::expr::Node::Const(*c)
                };
                Expression::from_node(node, vec![]).expect("constant expression")
            })
            .collect();
        ParametricPatch { params: vec![], map, domain: vec![], inequalities: vec![], starts: StartCache::default() }
    }

    pub fn with_domain(&self, domain: Vec<Interval>) -> Self {
        ParametricPatch { domain, starts: StartCache::default(), ..self.clone() }
    }
}

impl Chart for ParametricPatch {
    fn ambient(&self) -> usize {
        self.map.len()
    }

    fn domain(&self) -> Vec<Interval> {
        self.domain.clone()
    }

    fn map(&self, u: &[f64]) -> Result<DVector<f64>> {
        let mut x = DVector::zeros(self.map.len());
        for (i, e) in self.map.iter().enumerate() {
            x[i] = e.eval(u)?;
        }
        Ok(x)
    }

    fn jacobian(&self, u: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let n = self.map.len();
        let mut x = DVector::zeros(n);
        let mut j = DMatrix::zeros(n, u.len());
        for (i, e) in self.map.iter().enumerate() {
            let (v, g) = e.value_and_gradient(u)?;
            x[i] = v;
            for (k, gk) in g.iter().enumerate() {
                j[(i, k)] = *gk;
            }
        }
        Ok((x, j))
    }

    fn feasible(&self, u: &[f64]) -> bool {
        self.inequalities.iter().all(|h| matches!(h.eval(u), Ok(v) if v > 0.0))
    }

    fn constraint_margin(&self, u: &[f64]) -> f64 {
        self.inequalities
            .iter()
            .map(|h| h.eval(u).unwrap_or(f64::NEG_INFINITY))
            .fold(f64::INFINITY, f64::min)
    }

    fn start_cache(&self) -> &OnceLock<Vec<(DVector<f64>, DVector<f64>)>> {
        &self.starts.0
    }
}

/// `{x : g(x) = 0, h(x) > 0}` with a box used for global sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitPatch {
    pub coords: Vec<String>,
    pub equalities: Vec<Expression>,
    pub inequalities: Vec<Expression>,
    pub bounds: Vec<(f64, f64)>,
}

impl ImplicitPatch {
    pub fn new(coords: Vec<String>, equalities: Vec<Expression>, inequalities: Vec<Expression>, bounds: Vec<(f64, f64)>) -> Result<Self> {
        if bounds.len() != coords.len() {
            return Err(Error::Invalid("implicit patch needs one sampling bound per coordinate".into()));
        }
        if equalities.len() > coords.len() {
            return Err(Error::Invalid("more equalities than coordinates".into()));
        }
        for e in equalities.iter().chain(&inequalities) {
            if e.variables() != coords.as_slice() {
                return Err(Error::Invalid(format!("expression `{e}` is not over the coordinates {coords:?}")));
            }
        }
        Ok(ImplicitPatch { coords, equalities, inequalities, bounds })
    }

    pub fn from_strs(coords: &[&str], equalities: &[&str], inequalities: &[&str], bounds: Vec<(f64, f64)>) -> Result<Self> {
        let parse = |v: &[&str]| {
            v.iter()
                .map(|s| Expression::parse_with_vars(s, coords))
                .collect::<Result<Vec<_>, _>>()
        };
        Self::new(coords.iter().map(|s| s.to_string()).collect(), parse(equalities)?, parse(inequalities)?, bounds)
    }

    pub fn dim(&self) -> usize {
        self.coords.len() - self.equalities.len()
    }

    fn values(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let mut g = DVector::zeros(self.equalities.len());
        for (i, e) in self.equalities.iter().enumerate() {
            g[i] = e.eval(x.as_slice())?;
        }
        Ok(g)
    }

    fn jacobian(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let k = self.equalities.len();
        let mut g = DVector::zeros(k);
        let mut j = DMatrix::zeros(k, x.len());
        for (i, e) in self.equalities.iter().enumerate() {
            let (v, grad) = e.value_and_gradient(x.as_slice())?;
            g[i] = v;
            for (c, gc) in grad.iter().enumerate() {
                j[(i, c)] = *gc;
            }
        }
        Ok((g, j))
    }

    pub fn residual(&self, x: &DVector<f64>) -> f64 {
        self.values(x).map(|g| g.norm()).unwrap_or(f64::INFINITY)
    }

    pub fn feasible(&self, x: &DVector<f64>) -> bool {
        self.inequalities.iter().all(|h| matches!(h.eval(x.as_slice()), Ok(v) if v > 0.0))
    }

    pub fn constraint_margin(&self, x: &DVector<f64>) -> f64 {
        self.inequalities
            .iter()
            .map(|h| h.eval(x.as_slice()).unwrap_or(f64::NEG_INFINITY))
            .fold(f64::INFINITY, f64::min)
    }

    /// Damped Gauss-Newton (minimum-norm steps, step halving) onto `g = 0`.
    pub fn project(&self, start: &DVector<f64>) -> Option<DVector<f64>> {
        let mut x = start.clone();
        if self.equalities.is_empty() {
            return Some(x);
        }
        let mut res = self.residual(&x);
        for _ in 0..GN_MAX_ITERS {
            if res < 1e-13 {
                break;
            }
            let (g, j) = self.jacobian(&x).ok()?;
            let jjt = &j * j.transpose();
            let y = jjt.lu().solve(&g)?;
            let step = j.transpose() * y;
            let mut t = 1.0;
            let mut moved = false;
            for _ in 0..30 {
                let cand = &x - &step * t;
                let r = self.residual(&cand);
                if r < res {
                    x = cand;
                    res = r;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            if !moved {
                break;
            }
        }
        (res < ON_SET_TOL).then_some(x)
    }

    pub fn tangent(&self, x: &DVector<f64>) -> Result<Subspace> {
        let n = x.len();
        if self.equalities.is_empty() {
            return Ok(Subspace::full(n));
        }
        let (_, j) = self.jacobian(x)?;
        check_rank(&j.transpose(), "equalities are not independent here")?;
        let normals: Vec<DVector<f64>> = j.row_iter().map(|r| r.transpose()).collect();
        Ok(Subspace::span(n, &normals)?.orthogonal_complement())
    }

    /// Projected descent toward `q` along the set, from several starts.
    fn nearest(&self, q: &DVector<f64>) -> Option<DVector<f64>> {
        let mut rng = rng::task_rng(rng::hash_floats(q.as_slice()), 0x4e45_4152);
        let scales = [0.0, 1e-3, 1e-2, 1e-1, 0.3, 1e-3, 1e-2, 1e-1];
        let mut best: Option<(f64, DVector<f64>)> = None;
        for s in scales {
            let start = if s == 0.0 { q.clone() } else { q + rng::gaussian_direction(&mut rng, q.len()) * s };
            let Some(mut x) = self.project(&start) else { continue };
            if !self.feasible(&x) {
                continue;
            }
            for _ in 0..200 {
                let Ok(t) = self.tangent(&x) else { break };
                let Ok(d) = t.project(&(q - &x)) else { break };
                if d.norm() <= 1e-14 * (1.0 + q.norm()) {
                    break;
                }
                let cur = (&x - q).norm();
                let mut step = 1.0;
                let mut moved = false;
                while step > 1e-10 {
                    if let Some(c) = self.project(&(&x + &d * step)) {
                        if self.feasible(&c) && (&c - q).norm() < cur {
                            x = c;
                            moved = true;
                            break;
                        }
                    }
                    step *= 0.5;
                }
                if !moved {
                    break;
                }
            }
            let d = (&x - q).norm();
            if best.as_ref().is_none_or(|b| d < b.0) {
                best = Some((d, x));
            }
        }
        best.map(|b| b.1)
    }
}

/// Gap kept between a band region and the levels bounding it. Level
/// curves are densified until they stay within half of it, so a band and
/// its bounding curves never share a point.
pub const BAND_GAP: f64 = 1e-6;

/// A polyline in the parameter space of a 2-parameter patch, mapped into
/// ambient space. Parameter `t` runs over `[0, segments]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelCurvePatch {
    pub base: ParametricPatch,
    pub vertices: Vec<DVector<f64>>,
    pub closed: bool,
    /// The level value this curve realizes, when it came from slicing.
    pub level: Option<f64>,
    starts: StartCache,
}

impl LevelCurvePatch {
    pub fn new(base: ParametricPatch, vertices: Vec<DVector<f64>>, closed: bool, level: Option<f64>) -> Result<Self> {
        if vertices.len() < 2 {
            return Err(Error::Invalid("a level curve needs at least two vertices".into()));
        }
        if vertices.iter().any(|v| v.len() != base.params.len()) {
            return Err(Error::Dimension("level-curve vertices must live in the base parameter space".into()));
        }
        Ok(LevelCurvePatch { base, vertices, closed, level, starts: StartCache::default() })
    }

    pub fn segments(&self) -> usize {
        if self.closed {
            self.vertices.len()
        } else {
            self.vertices.len() - 1
        }
    }

    fn vertex(&self, i: usize) -> &DVector<f64> {
        &self.vertices[i % self.vertices.len()]
    }

    /// Base parameter at curve parameter `t` and the segment direction.
    pub fn base_param(&self, t: f64) -> (DVector<f64>, DVector<f64>) {
        let segs = self.segments();
        let i = (t.floor().max(0.0) as usize).min(segs - 1);
        let s = t - i as f64;
        let a = self.vertex(i);
        let b = self.vertex(i + 1);
        let dir = b - a;
        (a + &dir * s, dir)
    }
}

impl Chart for LevelCurvePatch {
    fn ambient(&self) -> usize {
        self.base.ambient()
    }

    fn domain(&self) -> Vec<Interval> {
        let segs = self.segments() as f64;
        vec![if self.closed { Interval::closed_open(0.0, segs) } else { Interval::open(0.0, segs) }]
    }

    fn map(&self, u: &[f64]) -> Result<DVector<f64>> {
        let (p, _) = self.base_param(u[0]);
        self.base.map(p.as_slice())
    }

    fn jacobian(&self, u: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (p, dir) = self.base_param(u[0]);
        let (x, jb) = self.base.jacobian(p.as_slice())?;
        let col = jb * dir;
        Ok((x, DMatrix::from_column_slice(col.len(), 1, col.as_slice())))
    }

    fn feasible(&self, u: &[f64]) -> bool {
        let (p, _) = self.base_param(u[0]);
        self.base.admissible(p.as_slice())
    }

    fn constraint_margin(&self, u: &[f64]) -> f64 {
        let (p, _) = self.base_param(u[0]);
        self.base.margin(p.as_slice())
    }

    fn start_cache(&self) -> &OnceLock<Vec<(DVector<f64>, DVector<f64>)>> {
        &self.starts.0
    }
}

/// Values of a scalar field on the lattice of a 1- or 2-dimensional box.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelGrid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Cells per axis.
    pub res: usize,
    /// Row-major lattice values, `(res + 1)^dim` entries; NaN where the field
    /// could not be evaluated.
    pub values: Vec<f64>,
}

impl LevelGrid {
    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn node(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter()
            .enumerate()
            .map(|(a, &i)| self.lo[a] + (self.hi[a] - self.lo[a]) * i as f64 / self.res as f64)
            .collect()
    }

    pub fn value(&self, idx: &[usize]) -> f64 {
        let mut flat = 0;
        for &i in idx {
            flat = flat * (self.res + 1) + i;
        }
        self.values[flat]
    }

    /// Cell containing `u` (clamped to the box).
    pub fn cell_of(&self, u: &[f64]) -> Vec<usize> {
        u.iter()
            .enumerate()
            .map(|(a, t)| {
                let s = (t - self.lo[a]) / (self.hi[a] - self.lo[a]) * self.res as f64;
                (s.floor().max(0.0) as usize).min(self.res - 1)
            })
            .collect()
    }

    /// Values at the corners of a cell.
    pub fn corners(&self, cell: &[usize]) -> Vec<f64> {
        let d = cell.len();
        (0..(1usize << d))
            .map(|mask| {
                let idx: Vec<usize> = (0..d).map(|a| cell[a] + ((mask >> a) & 1)).collect();
                self.value(&idx)
            })
            .collect()
    }
}

/// The part of a parametric patch where `lo < p_a < hi`, minus the level
/// curves that bound it.
#[derive(Debug, Clone)]
pub struct LevelRegionPatch {
    pub base: ParametricPatch,
    pub field: Arc<PaField>,
    pub lo: f64,
    pub hi: f64,
    pub res: usize,
    /// Level curves on the boundary of the band, in base parameters.
    pub boundary: Vec<Arc<LevelCurvePatch>>,
    grid: Arc<OnceLock<LevelGrid>>,
    starts: StartCache,
}

impl PartialEq for LevelRegionPatch {
    fn eq(&self, other: &Self) -> bool {
        self.base == other.base
            && self.field == other.field
            && self.lo.to_bits() == other.lo.to_bits()
            && self.hi.to_bits() == other.hi.to_bits()
            && self.res == other.res
            && self.boundary == other.boundary
    }
}

impl LevelRegionPatch {
    pub fn new(
        base: ParametricPatch,
        field: Arc<PaField>,
        lo: f64,
        hi: f64,
        res: usize,
        boundary: Vec<Arc<LevelCurvePatch>>,
        grid: Option<LevelGrid>,
    ) -> Result<Self> {
        let m = base.params.len();
        if !(1..=2).contains(&m) {
            return Err(Error::Unsupported("level regions need 1 or 2 parameters".into()));
        }
        if res == 0 || !(lo < hi) {
            return Err(Error::Invalid("level band must satisfy lo < hi with a positive grid".into()));
        }
        let cell = OnceLock::new();
        if let Some(g) = grid {
            let _ = cell.set(g);
        }
        Ok(LevelRegionPatch { base, field, lo, hi, res, boundary, grid: Arc::new(cell), starts: StartCache::default() })
    }

    pub fn grid(&self) -> &LevelGrid {
        self.grid.get_or_init(|| self.field.grid(&self.base, self.res))
    }

    pub fn field_value(&self, u: &[f64]) -> Option<f64> {
        self.field.eval_param(&self.base, u).ok()
    }

    fn in_band(&self, v: f64) -> bool {
        v > self.lo + BAND_GAP && v < self.hi - BAND_GAP
    }
}

impl Chart for LevelRegionPatch {
    fn ambient(&self) -> usize {
        self.base.ambient()
    }

    fn domain(&self) -> Vec<Interval> {
        self.base.domain.clone()
    }

    fn map(&self, u: &[f64]) -> Result<DVector<f64>> {
        self.base.map(u)
    }

    fn jacobian(&self, u: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.base.jacobian(u)
    }

    fn feasible(&self, u: &[f64]) -> bool {
        if !self.base.feasible(u) {
            return false;
        }
        let grid = self.grid();
        let corners = grid.corners(&grid.cell_of(u));
        if corners.iter().all(|v| self.in_band(*v)) {
            return true;
        }
        let all_below = corners.iter().all(|v| *v <= self.lo);
        let all_above = corners.iter().all(|v| *v >= self.hi);
        if all_below || all_above {
            return false;
        }
        match self.field_value(u) {
            Some(v) => self.in_band(v),
            None => false,
        }
    }

    fn constraint_margin(&self, u: &[f64]) -> f64 {
        let band = match self.field_value(u) {
            Some(v) => (v - self.lo - BAND_GAP).min(self.hi - BAND_GAP - v),
            None => f64::NEG_INFINITY,
        };
        self.base.constraint_margin(u).min(band)
    }

    fn start_cache(&self) -> &OnceLock<Vec<(DVector<f64>, DVector<f64>)>> {
        &self.starts.0
    }

    /// Lattice nodes inside the band. Bands near a singular point of the
    /// field are thin wedges that quasi-random starts would miss.
    fn starts(&self) -> &[(DVector<f64>, DVector<f64>)] {
        self.start_cache().get_or_init(|| {
            let grid = self.grid();
            let side = grid.res + 1;
            let nodes: Vec<Vec<usize>> = match grid.dim() {
                1 => (0..side).map(|i| vec![i]).collect(),
                _ => (0..side * side).map(|k| vec![k / side, k % side]).collect(),
            };
            let inside: Vec<Vec<f64>> = nodes
                .iter()
                .filter(|idx| self.in_band(grid.value(idx)))
                .map(|idx| grid.node(idx))
                .filter(|u| self.admissible(u))
                .collect();
            let stride = inside.len().div_ceil(REGION_STARTS).max(1);
            inside
                .into_iter()
                .step_by(stride)
                .filter_map(|u| self.map(&u).ok().map(|x| (DVector::from_vec(u), x)))
                .collect()
        })
    }
}

/// Most lattice nodes kept as descent starts for a level region.
const REGION_STARTS: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub enum Patch {
    Parametric(ParametricPatch),
    Implicit(ImplicitPatch),
    LevelCurve(LevelCurvePatch),
    LevelRegion(LevelRegionPatch),
}

impl Patch {
    pub(crate) fn chart(&self) -> Option<&dyn Chart> {
        match self {
            Patch::Parametric(p) => Some(p),
            Patch::LevelCurve(p) => Some(p),
            Patch::LevelRegion(p) => Some(p),
            Patch::Implicit(_) => None,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Patch::Parametric(p) => p.params.len(),
            Patch::Implicit(p) => p.dim(),
            Patch::LevelCurve(_) => 1,
            Patch::LevelRegion(p) => p.base.params.len(),
        }
    }

    pub fn ambient(&self) -> usize {
        match self {
            Patch::Implicit(p) => p.coords.len(),
            other => other.chart().map(|c| c.ambient()).unwrap_or(0),
        }
    }
}

// ---------------------------------------------------------------------------
// strata
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Stratum {
    pub name: String,
    pub ambient_dim: usize,
    pub patches: Vec<Patch>,
}

impl Stratum {
    pub fn new(name: impl Into<String>, patches: Vec<Patch>) -> Result<Self> {
        let name = name.into();
        let first = patches
            .first()
            .ok_or_else(|| Error::Invalid(format!("stratum `{name}` has no patches")))?;
        let (ambient, dim) = (first.ambient(), first.dim());
        if patches.iter().any(|p| p.ambient() != ambient || p.dim() != dim) {
            return Err(Error::Dimension(format!("patches of `{name}` disagree on dimension")));
        }
        if dim > ambient {
            return Err(Error::Dimension(format!("`{name}` has dimension {dim} in R^{ambient}")));
        }
        Ok(Stratum { name, ambient_dim: ambient, patches })
    }

    pub fn parametric(name: impl Into<String>, patch: ParametricPatch) -> Result<Self> {
        Self::new(name, vec![Patch::Parametric(patch)])
    }

    pub fn implicit(name: impl Into<String>, patch: ImplicitPatch) -> Result<Self> {
        Self::new(name, vec![Patch::Implicit(patch)])
    }

    pub fn point(name: impl Into<String>, coords: &[f64]) -> Self {
        Self::parametric(name, ParametricPatch::point(coords)).expect("a point is a valid stratum")
    }

    /// Disjoint union of equal-dimensional strata, patches concatenated.
    pub fn union(name: impl Into<String>, parts: &[&Stratum]) -> Result<Self> {
        let patches = parts.iter().flat_map(|s| s.patches.iter().cloned()).collect();
        Self::new(name, patches)
    }

    pub fn dim(&self) -> usize {
        self.patches[0].dim()
    }

    pub fn is_parametric(&self) -> bool {
        self.patches.iter().all(|p| p.chart().is_some())
    }

    fn check_point(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.ambient_dim {
            return Err(Error::Dimension(format!(
                "point of length {} for `{}` in R^{}",
                x.len(),
                self.name,
                self.ambient_dim
            )));
        }
        Ok(())
    }

    /// Residual of a sample: distance to the chart image, or `|g(x)|`.
    pub fn residual(&self, p: &SamplePoint) -> f64 {
        match (&self.patches[p.patch], &p.param) {
            (Patch::Implicit(ip), _) => ip.residual(&p.x),
            (patch, Some(u)) => match patch.chart().and_then(|c| c.map(u.as_slice()).ok()) {
                Some(x) => (x - &p.x).norm(),
                None => f64::INFINITY,
            },
            _ => f64::INFINITY,
        }
    }

    pub fn tangent(&self, p: &SamplePoint) -> Result<Subspace> {
        match &self.patches[p.patch] {
            Patch::Implicit(ip) => {
                let r = ip.residual(&p.x);
                if r >= ON_SET_TOL {
                    return Err(Error::OffSet { stratum: self.name.clone(), residual: r });
                }
                ip.tangent(&p.x)
            }
            patch => {
                let chart = patch.chart().expect("chart patch");
                let u = p
                    .param
                    .as_ref()
                    .ok_or_else(|| Error::Invalid("parametric sample without parameter".into()))?;
                chart_tangent(chart, u.as_slice())
            }
        }
    }

    /// Tangent space at an ambient point, locating the point first.
    pub fn tangent_at(&self, x: &DVector<f64>) -> Result<Subspace> {
        let p = self.locate(x)?;
        self.tangent(&p)
    }

    /// Finds the patch (and parameter) of a point lying on the stratum.
    pub fn locate(&self, x: &DVector<f64>) -> Result<SamplePoint> {
        self.check_point(x)?;
        let mut best = f64::INFINITY;
        for (i, patch) in self.patches.iter().enumerate() {
            match patch {
                Patch::Implicit(ip) => {
                    let r = ip.residual(x);
                    if r < ON_SET_TOL && ip.feasible(x) && ip.constraint_margin(x) > MEMBERSHIP_MARGIN {
                        return Ok(SamplePoint { x: x.clone(), patch: i, param: None });
                    }
                    best = best.min(r);
                }
                other => {
                    let chart = other.chart().expect("chart patch");
                    if let Some((u, y)) = chart_nearest(chart, x) {
                        let d = (&y - x).norm();
                        if d < ON_SET_TOL && chart.admissible(u.as_slice()) && chart.margin(u.as_slice()) > MEMBERSHIP_MARGIN {
                            return Ok(SamplePoint { x: x.clone(), patch: i, param: Some(u) });
                        }
                        best = best.min(d);
                    }
                }
            }
        }
        Err(Error::OffSet { stratum: self.name.clone(), residual: best })
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.locate(x).is_ok()
    }

    /// How far inside its patch a sample is, in constraint values and
    /// parameter distance to open box ends.
    pub fn interior_margin(&self, p: &SamplePoint) -> f64 {
        match (&self.patches[p.patch], &p.param) {
            (Patch::Implicit(ip), _) => ip.constraint_margin(&p.x),
            (patch, Some(u)) => patch.chart().map(|c| c.margin(u.as_slice())).unwrap_or(f64::NEG_INFINITY),
            _ => f64::NEG_INFINITY,
        }
    }

    /// Nearest point of the closure of the stratum to `q`: multi-start
    /// local descent (exact for affine parametric patches).
    pub fn nearest_point(&self, q: &DVector<f64>) -> Result<SamplePoint> {
        self.check_point(q)?;
        let mut best: Option<(f64, SamplePoint)> = None;
        for (i, patch) in self.patches.iter().enumerate() {
            let found = match patch {
                Patch::Implicit(ip) => ip.nearest(q).map(|x| SamplePoint { x, patch: i, param: None }),
                other => chart_nearest(other.chart().unwrap(), q).map(|(u, x)| SamplePoint { x, patch: i, param: Some(u) }),
            };
            if let Some(p) = found {
                let d = (&p.x - q).norm();
                if best.as_ref().is_none_or(|b| d < b.0) {
                    best = Some((d, p));
                }
            }
        }
        best.map(|b| b.1)
            .ok_or_else(|| Error::NoConvergence(format!("nearest point on `{}`", self.name)))
    }

    /// Distance from `q` to the closure of the stratum.
    pub fn closure_distance(&self, q: &DVector<f64>) -> f64 {
        self.nearest_point(q).map(|p| (p.x - q).norm()).unwrap_or(f64::INFINITY)
    }

    /// Relative measure of each patch, for splitting sample budgets.
    fn patch_weights(&self) -> Vec<f64> {
        if self.patches.iter().any(|p| p.chart().is_none()) {
            return vec![1.0; self.patches.len()];
        }
        self.patches
            .iter()
            .map(|p| {
                let chart = p.chart().unwrap();
                let dom = chart.domain();
                let vol: f64 = dom.iter().map(|iv| iv.width()).product();
                let starts = chart.starts();
                let total = 256.min(starts.len().max(1));
                let acc: f64 = starts
                    .iter()
                    .take(total)
                    .filter_map(|(u, _)| chart.jacobian(u.as_slice()).ok())
                    .map(|(_, j)| area_element(&j))
                    .sum();
                (vol * acc / total as f64).max(1e-12)
            })
            .collect()
    }

    fn split_budget(&self, n: usize) -> Vec<usize> {
        let w = self.patch_weights();
        let total: f64 = w.iter().sum();
        let mut counts: Vec<usize> = w.iter().map(|x| ((x / total) * n as f64).floor() as usize).collect();
        let mut assigned: usize = counts.iter().sum();
        let len = counts.len();
        let mut i = 0;
        while assigned < n {
            counts[i % len] += 1;
            assigned += 1;
            i += 1;
        }
        counts
    }

    /// `n` points of the stratum, deterministic in `seed`. Parametric
    /// patches draw uniformly in the domain box and keep admissible draws;
    /// implicit patches project uniform draws from their bounds onto the
    /// zero set.
    pub fn sample(&self, n: usize, seed: u64) -> SampleSet {
        let mut points = Vec::with_capacity(n);
        let mut shortfall = false;
        for (pi, count) in self.split_budget(n).into_iter().enumerate() {
            let mut rng = rng::task_rng(seed, 0x5341_4d50 ^ pi as u64);
            let mut got = 0;
            let mut attempts = 0;
            let cap = 200 * count.max(1);
            match &self.patches[pi] {
                Patch::Implicit(ip) => {
                    while got < count && attempts < cap {
                        attempts += 1;
                        let z = DVector::from_iterator(
                            ip.bounds.len(),
                            ip.bounds.iter().map(|(a, b)| a + rng.random::<f64>() * (b - a)),
                        );
                        let Some(x) = ip.project(&z) else { continue };
                        let inside = ip.bounds.iter().zip(x.iter()).all(|((a, b), t)| *t >= *a && *t <= *b);
                        if inside && ip.feasible(&x) {
                            points.push(SamplePoint { x, patch: pi, param: None });
                            got += 1;
                        }
                    }
                }
                patch => {
                    let chart = patch.chart().unwrap();
                    let dom = chart.domain();
                    while got < count && attempts < cap {
                        attempts += 1;
                        let u: Vec<f64> = dom.iter().map(|iv| iv.lo + rng.random::<f64>() * iv.width()).collect();
                        if !chart.admissible(&u) {
                            continue;
                        }
                        if let Ok(x) = chart.map(&u) {
                            points.push(SamplePoint { x, patch: pi, param: Some(DVector::from_vec(u)) });
                            got += 1;
                        }
                    }
                }
            }
            shortfall |= got < count;
        }
        SampleSet { points, shortfall }
    }

    /// Evenly spread samples for scans. Curves get an equispaced parameter
    /// grid per patch, centered so it holds the midpoint of the interval
    /// (and a closed lower end) whenever the count allows; anything else
    /// falls back to [`Stratum::sample`].
    pub fn scan_samples(&self, n: usize, seed: u64) -> Vec<SamplePoint> {
        let charts: Option<Vec<_>> = self.patches.iter().map(|p| p.chart()).collect();
        let Some(charts) = charts else { return self.sample(n, seed).points };
        if charts.iter().all(|c| c.domain().is_empty()) {
            return self.sample(1, seed).points;
        }
        if !charts.iter().all(|c| c.domain().len() == 1) {
            return self.sample(n, seed).points;
        }
        let mut out = Vec::with_capacity(n);
        for (pi, (chart, count)) in charts.iter().zip(self.split_budget(n)).enumerate() {
            let iv = chart.domain()[0];
            for i in 0..count {
                let h = iv.width() / count as f64;
                let t = if count % 2 == 1 {
                    iv.mid() + h * (i as f64 - (count / 2) as f64)
                } else if iv.lo_closed {
                    iv.lo + h * i as f64
                } else {
                    iv.lo + h * (i as f64 + 0.5)
                };
                if chart.admissible(&[t]) {
                    if let Ok(x) = chart.map(&[t]) {
                        out.push(SamplePoint { x, patch: pi, param: Some(DVector::from_element(1, t)) });
                    }
                }
            }
        }
        out
    }

    /// Up to `n_per_patch` points of every patch inside the shell
    /// `r_in <= |x - center| < r_out`.
    pub fn sample_shell(&self, center: &DVector<f64>, r_out: f64, r_in: f64, n_per_patch: usize, seed: u64) -> Vec<SamplePoint> {
        let mut out = Vec::new();
        for (pi, patch) in self.patches.iter().enumerate() {
            let mut rng = rng::task_rng(seed, 0x4241_4c4c ^ pi as u64);
            match patch {
                Patch::Implicit(ip) => {
                    let mut got = 0;
                    let mut attempts = 0;
                    while got < n_per_patch && attempts < 40 * n_per_patch {
                        attempts += 1;
                        let z = rng::uniform_in_ball(&mut rng, center, r_out);
                        let Some(x) = ip.project(&z) else { continue };
                        let d = (&x - center).norm();
                        if d < r_out && d >= r_in && ip.feasible(&x) {
                            out.push(SamplePoint { x, patch: pi, param: None });
                            got += 1;
                        }
                    }
                }
                other => {
                    let chart = other.chart().unwrap();
                    for (u, x) in chart_ball_sample(chart, center, r_out, r_in, n_per_patch, &mut rng) {
                        out.push(SamplePoint { x, patch: pi, param: Some(u) });
                    }
                }
            }
        }
        out
    }

    /// Local descent toward `q` starting from a known sample, staying on
    /// the sample's patch.
    pub fn local_nearest(&self, q: &DVector<f64>, from: &SamplePoint) -> Option<SamplePoint> {
        match &self.patches[from.patch] {
            Patch::Implicit(ip) => {
                let mut x = from.x.clone();
                for _ in 0..100 {
                    let t = ip.tangent(&x).ok()?;
                    let d = t.project(&(q - &x)).ok()?;
                    if d.norm() <= 1e-14 * (1.0 + q.norm()) {
                        break;
                    }
                    let cur = (&x - q).norm();
                    let mut step = 1.0;
                    let mut moved = false;
                    while step > 1e-10 {
                        if let Some(c) = ip.project(&(&x + &d * step)) {
                            if ip.feasible(&c) && (&c - q).norm() < cur {
                                x = c;
                                moved = true;
                                break;
                            }
                        }
                        step *= 0.5;
                    }
                    if !moved {
                        break;
                    }
                }
                Some(SamplePoint { x, patch: from.patch, param: None })
            }
            patch => {
                let chart = patch.chart()?;
                let (u, x) = chart_local_nearest(chart, q, from.param.as_ref()?)?;
                Some(SamplePoint { x, patch: from.patch, param: Some(u) })
            }
        }
    }

    /// Moves from `from` by `step` in local coordinates of its patch:
    /// parameter offsets for charts, tangent-frame offsets (then projection)
    /// for implicit patches. Returns `None` when the move leaves the stratum.
    pub fn chart_step(&self, from: &SamplePoint, step: &[f64]) -> Option<SamplePoint> {
        match &self.patches[from.patch] {
            Patch::Implicit(ip) => {
                let t = ip.tangent(&from.x).ok()?;
                let offset = t.frame() * DVector::from_column_slice(step);
                let x = ip.project(&(&from.x + offset))?;
                ip.feasible(&x).then_some(SamplePoint { x, patch: from.patch, param: None })
            }
            patch => {
                let chart = patch.chart()?;
                let u = from.param.as_ref()? + DVector::from_column_slice(step);
                if !chart.admissible(u.as_slice()) {
                    return None;
                }
                let x = chart.map(u.as_slice()).ok()?;
                Some(SamplePoint { x, patch: from.patch, param: Some(u) })
            }
        }
    }

    /// Local coordinate scale at a sample: how far the point moves per unit
    /// step of [`Stratum::chart_step`] (largest Jacobian column norm).
    pub fn local_scale(&self, p: &SamplePoint) -> f64 {
        match &self.patches[p.patch] {
            Patch::Implicit(_) => 1.0,
            patch => {
                let Some(chart) = patch.chart() else { return 1.0 };
                let Some(u) = &p.param else { return 1.0 };
                match chart.jacobian(u.as_slice()) {
                    Ok((_, j)) => (0..j.ncols()).map(|c| j.column(c).norm()).fold(0.0, f64::max).max(1e-12),
                    Err(_) => 1.0,
                }
            }
        }
    }

    /// Checks that segment `a -> b` stays on one sheet: intermediate chart
    /// points (or projections) must stay admissible and within `tol` of the
    /// chord.
    pub fn connected_by_segment(&self, a: &SamplePoint, b: &SamplePoint, tol: f64) -> bool {
        if a.patch != b.patch {
            return false;
        }
        const STEPS: usize = 4;
        match &self.patches[a.patch] {
            Patch::Implicit(ip) => (1..STEPS).all(|k| {
                let s = k as f64 / STEPS as f64;
                let chord = &a.x * (1.0 - s) + &b.x * s;
                match ip.project(&chord) {
                    Some(x) => ip.feasible(&x) && (x - chord).norm() <= tol,
                    None => false,
                }
            }),
            patch => {
                let chart = patch.chart().unwrap();
                let (Some(ua), Some(ub)) = (&a.param, &b.param) else { return false };
                (1..STEPS).all(|k| {
                    let s = k as f64 / STEPS as f64;
                    let u = ua * (1.0 - s) + ub * s;
                    let chord = &a.x * (1.0 - s) + &b.x * s;
                    chart.admissible(u.as_slice())
                        && matches!(chart.map(u.as_slice()), Ok(x) if (&x - &chord).norm() <= tol)
                })
            }
        }
    }

    /// Moves a sample onto the affine space `base + span(frame)^perp` (the
    /// normal fiber through `base`), staying on the sample's patch.
    /// Returns `None` if Gauss-Newton does not reach the fiber within `tol`
    /// or the result leaves the stratum.
    pub fn project_to_fiber(&self, p: &SamplePoint, base: &DVector<f64>, frame: &Subspace, tol: f64) -> Option<SamplePoint> {
        let e = frame.frame();
        let k = e.ncols();
        if k == 0 {
            return Some(p.clone());
        }
        match &self.patches[p.patch] {
            Patch::Implicit(ip) => {
                let n = p.x.len();
                let eq = ip.equalities.len();
                let resid = |x: &DVector<f64>| -> Option<DVector<f64>> {
                    let g = ip.values(x).ok()?;
                    let f = e.tr_mul(&(x - base));
                    Some(DVector::from_iterator(eq + k, g.iter().chain(f.iter()).cloned()))
                };
                let mut x = p.x.clone();
                let mut r = resid(&x)?;
                for _ in 0..GN_MAX_ITERS {
                    if r.norm() < 1e-13 {
                        break;
                    }
                    let (_, jg) = ip.jacobian(&x).ok()?;
                    let mut j = nalgebra::DMatrix::zeros(eq + k, n);
                    j.rows_mut(0, eq).copy_from(&jg);
                    j.rows_mut(eq, k).copy_from(&e.transpose());
                    let step = j.transpose() * (&j * j.transpose()).lu().solve(&r)?;
                    let mut t = 1.0;
                    let mut moved = false;
                    for _ in 0..30 {
                        let cand = &x - &step * t;
                        if let Some(rc) = resid(&cand) {
                            if rc.norm() < r.norm() {
                                x = cand;
                                r = rc;
                                moved = true;
                                break;
                            }
                        }
                        t *= 0.5;
                    }
                    if !moved {
                        break;
                    }
                }
                let on = ip.residual(&x) < ON_SET_TOL && e.tr_mul(&(&x - base)).norm() <= tol && ip.feasible(&x);
                on.then_some(SamplePoint { x, patch: p.patch, param: None })
            }
            patch => {
                let chart = patch.chart()?;
                let mut u = p.param.clone()?;
                let resid = |u: &DVector<f64>| -> Option<(DVector<f64>, DVector<f64>, DMatrix<f64>)> {
                    let (x, j) = chart.jacobian(u.as_slice()).ok()?;
                    Some((e.tr_mul(&(&x - base)), x, e.tr_mul(&j)))
                };
                let (mut r, mut x, mut jr) = resid(&u)?;
                for _ in 0..GN_MAX_ITERS {
                    if r.norm() < 1e-14 {
                        break;
                    }
                    let step = match (&jr * jr.transpose()).lu().solve(&r) {
                        Some(s) => jr.transpose() * s,
                        None => break,
                    };
                    let mut t = 1.0;
                    let mut moved = false;
                    for _ in 0..30 {
                        let cand = &u - &step * t;
                        if chart.admissible(cand.as_slice()) {
                            if let Some((rc, xc, jc)) = resid(&cand) {
                                if rc.norm() < r.norm() {
                                    u = cand;
                                    r = rc;
                                    x = xc;
                                    jr = jc;
                                    moved = true;
                                    break;
                                }
                            }
                        }
                        t *= 0.5;
                    }
                    if !moved {
                        break;
                    }
                }
                (r.norm() <= tol).then_some(SamplePoint { x, patch: p.patch, param: Some(u) })
            }
        }
    }

    /// Immersion (parametric) and independence (implicit) rank checks at
    /// `n` sampled points.
    pub fn check_regularity(&self, n: usize, seed: u64) -> Result<()> {
        let set = self.sample(n, seed);
        for p in &set.points {
            let r = self.residual(p);
            if r >= ON_SET_TOL {
                return Err(Error::OffSet { stratum: self.name.clone(), residual: r });
            }
            let t = self.tangent(p)?;
            if t.dim() != self.dim() {
                return Err(Error::RankDeficient(format!("`{}` tangent has dimension {}", self.name, t.dim())));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// pairs
// ---------------------------------------------------------------------------

/// Distance under which a sampled point of `Y` counts as a limit of `X`.
pub const CLOSURE_TOL: f64 = 1e-4;

/// An ordered pair of strata with `Y` in the frontier of `X`.
#[derive(Debug)]
pub struct PairXY {
    pub name: String,
    pub x: Arc<Stratum>,
    pub y: Arc<Stratum>,
    frames: RwLock<HashMap<Vec<u64>, Subspace>>,
}

impl Clone for PairXY {
    fn clone(&self) -> Self {
        PairXY::new_unchecked(self.name.clone(), self.x.clone(), self.y.clone())
    }
}

impl PartialEq for PairXY {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.x == other.x && self.y == other.y
    }
}

impl PairXY {
    /// Builds a pair after checking `dim Y < dim X` and, on `16` sampled
    /// points of `Y`, that they lie in the closure of `X` but not in `X`.
    pub fn new(name: impl Into<String>, x: Arc<Stratum>, y: Arc<Stratum>) -> Result<Self> {
        let pair = Self::new_unchecked(name, x, y);
        pair.validate(16, 7)?;
        Ok(pair)
    }

    pub fn new_unchecked(name: impl Into<String>, x: Arc<Stratum>, y: Arc<Stratum>) -> Self {
        PairXY { name: name.into(), x, y, frames: RwLock::new(HashMap::new()) }
    }

    pub fn validate(&self, n: usize, seed: u64) -> Result<()> {
        let (dx, dy) = (self.x.dim(), self.y.dim());
        if self.x.ambient_dim != self.y.ambient_dim {
            return Err(Error::Dimension(format!("pair `{}` mixes ambient spaces", self.name)));
        }
        if dy >= dx {
            return Err(Error::Dimension(format!("pair `{}`: dim Y = {dy} is not below dim X = {dx}", self.name)));
        }
        for p in self.y.sample(n, seed).points {
            let d = self.x.closure_distance(&p.x);
            if d > CLOSURE_TOL {
                return Err(Error::Invalid(format!(
                    "pair `{}`: Y point {:?} is at distance {d:e} from the closure of X",
                    self.name,
                    p.x.as_slice()
                )));
            }
            if self.x.contains(&p.x) {
                return Err(Error::Invalid(format!("pair `{}`: Y meets X at {:?}", self.name, p.x.as_slice())));
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.y.dim()
    }

    /// Orthonormal frame of `T_y Y`, cached per base point.
    pub fn frame_at(&self, y: &DVector<f64>) -> Result<Subspace> {
        let key: Vec<u64> = y.iter().map(|v| v.to_bits()).collect();
        if let Some(f) = self.frames.read().expect("frame cache").get(&key) {
            return Ok(f.clone());
        }
        let frame = self.y.tangent_at(y)?;
        self.frames.write().expect("frame cache").insert(key, frame.clone());
        Ok(frame)
    }

    /// `pi_Y(x)`: nearest point of `Y`.
    pub fn project_to_y(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.y.nearest_point(x)?.x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grassmann::symmetric_angle;
    use std::f64::consts::PI;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn circle_implicit() -> Stratum {
        Stratum::implicit(
            "circle",
            ImplicitPatch::from_strs(&["x", "y"], &["x^2 + y^2 - 1"], &[], vec![(-2.0, 2.0), (-2.0, 2.0)]).unwrap(),
        )
        .unwrap()
    }

    fn circle_rational() -> Stratum {
        // stereographic chart missing only (-1, 0)
        Stratum::parametric(
            "circle",
            ParametricPatch::from_strs(
                &["t"],
                &["(1 - t^2)/(1 + t^2)", "2*t/(1 + t^2)"],
                vec![Interval::open(-50.0, 50.0)],
                &[],
            )
            .unwrap(),
        )
        .unwrap()
    }

    fn cone_parametric() -> Stratum {
        Stratum::parametric(
            "cone",
            ParametricPatch::from_strs(
                &["a", "b"],
                &["a", "b", "sqrt(a^2 + b^2)"],
                vec![Interval::open(-1.0, 1.0), Interval::open(-1.0, 1.0)],
                &["a^2 + b^2"],
            )
            .unwrap(),
        )
        .unwrap()
    }

    fn cone_implicit() -> Stratum {
        Stratum::implicit(
            "cone",
            ImplicitPatch::from_strs(&["x", "y", "z"], &["z^2 - x^2 - y^2"], &["z"], vec![(-1.0, 1.0), (-1.0, 1.0), (0.0, 1.5)])
                .unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn interval_bisection_partitions() {
        let iv = Interval::closed_open(0.0, 1.0);
        let (a, b) = iv.bisect();
        for t in [0.0, 0.25, 0.5, 0.75, 0.999, 1.0, -0.1] {
            assert_eq!(iv.contains(t), a.contains(t) || b.contains(t));
            assert!(!(a.contains(t) && b.contains(t)));
        }
        assert!(a.contains(0.5) && !b.contains(0.5));
    }

    #[test]
    fn circle_tangent_at_east_point() {
        let c = circle_implicit();
        let t = c.tangent_at(&v(&[1.0, 0.0])).unwrap();
        assert_eq!(t.dim(), 1);
        assert!((t.frame()[(1, 0)].abs() - 1.0).abs() < 1e-14);
        assert!(matches!(c.tangent_at(&v(&[1.1, 0.0])), Err(Error::OffSet { .. })));
    }

    #[test]
    fn plane_tangent_is_constant() {
        let plane = Stratum::parametric(
            "plane",
            ParametricPatch::from_strs(&["u", "v"], &["u", "v", "0"], vec![Interval::open(-1.0, 1.0); 2], &[]).unwrap(),
        )
        .unwrap();
        let xy = Subspace::span(3, &[v(&[1.0, 0.0, 0.0]), v(&[0.0, 1.0, 0.0])]).unwrap();
        for p in plane.sample(20, 3).points {
            assert!(symmetric_angle(&plane.tangent(&p).unwrap(), &xy).unwrap() < 1e-15);
        }
    }

    #[test]
    fn cone_tangent_matches_finite_difference_oracle() {
        let cone = cone_parametric();
        let x = v(&[1.0, 0.0, 1.0]);
        // outside the sampled box is fine for locate: extend the domain
        let big = Stratum::parametric(
            "cone",
            ParametricPatch::from_strs(
                &["a", "b"],
                &["a", "b", "sqrt(a^2 + b^2)"],
                vec![Interval::open(-2.0, 2.0), Interval::open(-2.0, 2.0)],
                &["a^2 + b^2"],
            )
            .unwrap(),
        )
        .unwrap();
        let t = big.tangent_at(&x).unwrap();
        // finite-difference Jacobian of (a, b) -> (a, b, sqrt(a^2+b^2)) at (1, 0)
        let f = |a: f64, b: f64| v(&[a, b, (a * a + b * b).sqrt()]);
        let h = 1e-6;
        let da = (f(1.0 + h, 0.0) - f(1.0 - h, 0.0)) / (2.0 * h);
        let db = (f(1.0, h) - f(1.0, -h)) / (2.0 * h);
        let oracle = Subspace::span(3, &[da, db]).unwrap();
        assert!(symmetric_angle(&t, &oracle).unwrap() < 1e-8);
        let expected = Subspace::span(3, &[v(&[1.0, 0.0, 1.0]), v(&[0.0, 1.0, 0.0])]).unwrap();
        assert!(symmetric_angle(&t, &expected).unwrap() < 1e-12);
        assert_eq!(cone.dim(), 2);
    }

    #[test]
    fn implicit_and_parametric_tangents_agree() {
        let (ci, cp) = (circle_implicit(), circle_rational());
        for p in cp.sample(50, 1).points {
            let a = cp.tangent(&p).unwrap();
            let b = ci.tangent_at(&p.x).unwrap();
            assert!(symmetric_angle(&a, &b).unwrap() < 1e-6);
        }
        let (ki, kp) = (cone_implicit(), cone_parametric());
        for p in kp.sample(50, 2).points {
            let a = kp.tangent(&p).unwrap();
            let b = ki.tangent_at(&p.x).unwrap();
            assert!(symmetric_angle(&a, &b).unwrap() < 1e-6);
        }
    }

    #[test]
    fn point_stratum_samples_repeat_the_point() {
        let p = Stratum::point("p", &[1.0, -2.0, 3.0]);
        let s = p.sample(5, 99);
        assert_eq!(s.points.len(), 5);
        assert!(s.points.iter().all(|q| q.x == v(&[1.0, -2.0, 3.0])));
        assert_eq!(p.nearest_point(&v(&[7.0, 7.0, 7.0])).unwrap().x, v(&[1.0, -2.0, 3.0]));
        assert_eq!(p.dim(), 0);
        assert_eq!(p.tangent(&s.points[0]).unwrap().dim(), 0);
    }

    #[test]
    fn circle_samples_have_small_residual_and_are_deterministic() {
        let c = circle_implicit();
        let a = c.sample(100, 42);
        assert_eq!(a.points.len(), 100);
        assert!(!a.shortfall);
        for p in &a.points {
            assert!((p.x.norm_squared() - 1.0).abs() < 1e-8);
        }
        let b = c.sample(100, 42);
        assert_eq!(a.points, b.points);
    }

    #[test]
    fn umbrella_samples_avoid_the_handle() {
        let u = Stratum::implicit(
            "umbrella",
            ImplicitPatch::from_strs(&["x", "y", "z"], &["x^2 - z*y^2"], &["y^2"], vec![(-1.0, 1.0), (-1.0, 1.0), (0.0, 1.0)])
                .unwrap(),
        )
        .unwrap();
        let s = u.sample(200, 7);
        assert_eq!(s.points.len(), 200);
        for p in &s.points {
            let (x, y, z) = (p.x[0], p.x[1], p.x[2]);
            assert!((x * x - z * y * y).abs() < 1e-8);
            assert!(y.abs() > 0.0);
        }
    }

    #[test]
    fn nearest_points() {
        let axis = Stratum::parametric(
            "x-axis",
            ParametricPatch::from_strs(&["t"], &["t", "0", "0"], vec![Interval::open(-10.0, 10.0)], &[]).unwrap(),
        )
        .unwrap();
        let p = axis.nearest_point(&v(&[3.0, 4.0, 0.0])).unwrap();
        assert!((&p.x - v(&[3.0, 0.0, 0.0])).norm() < 1e-12, "{p:?}");

        let c = circle_implicit();
        let p = c.nearest_point(&v(&[2.0, 0.0])).unwrap();
        // dense angular oracle
        let oracle = (0..100_000)
            .map(|i| {
                let t = 2.0 * PI * f64::from(i) / 100_000.0;
                v(&[t.cos(), t.sin()])
            })
            .min_by(|a, b| (a - v(&[2.0, 0.0])).norm().total_cmp(&(b - v(&[2.0, 0.0])).norm()))
            .unwrap();
        assert!((&p.x - &oracle).norm() < 1e-4);
        assert!((p.x - v(&[1.0, 0.0])).norm() < 1e-8);

        let cr = circle_rational();
        let p = cr.nearest_point(&v(&[0.0, 3.0])).unwrap();
        assert!((&p.x - v(&[0.0, 1.0])).norm() < 1e-8, "{p:?}");
    }

    #[test]
    fn nearest_point_is_identity_on_the_set() {
        for s in [circle_implicit(), circle_rational()] {
            for p in s.sample(30, 5).points {
                let q = s.nearest_point(&p.x).unwrap();
                assert!((q.x - &p.x).norm() < 1e-8);
            }
        }
        let k = cone_implicit();
        for p in k.sample(30, 5).points {
            let q = k.nearest_point(&p.x).unwrap();
            assert!((q.x - &p.x).norm() < 1e-8);
        }
    }

    #[test]
    fn shell_sampling_stays_in_the_shell() {
        let cone = cone_parametric();
        let c = v(&[0.0, 0.0, 0.0]);
        for r in [0.5, 1e-2, 1e-4] {
            let pts = cone.sample_shell(&c, r * 2f64.sqrt(), r / 2f64.sqrt(), 64, 11);
            assert!(pts.len() >= 60, "r = {r}: {} points", pts.len());
            for p in &pts {
                let d = p.x.norm();
                assert!(d < r * 2f64.sqrt() && d >= r / 2f64.sqrt());
                assert!(cone.residual(p) < 1e-12);
            }
        }
        let ki = cone_implicit();
        let pts = ki.sample_shell(&c, 0.1, 0.05, 32, 3);
        assert!(pts.len() >= 16);
    }

    #[test]
    fn segment_connectivity_respects_inequalities() {
        let slit = Stratum::parametric(
            "slit",
            ParametricPatch::from_strs(&["u", "v"], &["u", "v", "0"], vec![Interval::open(-1.0, 1.0); 2], &["v^2"]).unwrap(),
        )
        .unwrap();
        let a = slit.locate(&v(&[0.0, 0.01, 0.0])).unwrap();
        let b = slit.locate(&v(&[0.0, -0.01, 0.0])).unwrap();
        let c = slit.locate(&v(&[0.01, 0.01, 0.0])).unwrap();
        assert!(!slit.connected_by_segment(&a, &b, 1.0));
        assert!(slit.connected_by_segment(&a, &c, 1e-9));
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let fold = Stratum::parametric(
            "fold",
            ParametricPatch::from_strs(&["u", "v"], &["u^3", "v", "0"], vec![Interval::open(-1.0, 1.0); 2], &[]).unwrap(),
        )
        .unwrap();
        let p = SamplePoint { x: v(&[0.0, 0.5, 0.0]), patch: 0, param: Some(v(&[0.0, 0.5])) };
        assert!(matches!(fold.tangent(&p), Err(Error::RankDeficient(_))));
    }
}
