//! Level-set refinement of a pair until its fault scan is clean.
//!
//! Each round scans every tracked pair for (a)-faults. Fault clusters of a
//! one-dimensional `Y` are cut out as point strata, and `X` is sliced along
//! level sets of `p_a` at regular values into open bands and level curves.
//! Pairs are then recomputed from sampled closure relations and scanned
//! again.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{PairSpec, Provenance, StrataSet};
use crate::kuo::PaField;
use crate::sequence::SearchConfig;
use crate::strata::{
    Chart, Interval, LevelCurvePatch, LevelGrid, LevelRegionPatch, PairXY, ParametricPatch, Patch, SamplePoint, Stratum,
    BAND_GAP,
};
use crate::whitney::{scan_pair, CheckOptions, Condition, FaultReport};

/// Lattice cells per axis for marching squares.
pub const DEFAULT_RES: usize = 256;
/// Minimum number of `X` samples behind [`regular_values`].
pub const REGULAR_SAMPLES: usize = 4096;
/// Slicing values per refinement round.
pub const DEFAULT_VALUES: usize = 3;
/// `Y` samples per pair scan.
pub const DEFAULT_SCAN_SAMPLES: usize = 64;
const HISTOGRAM_BINS: usize = 64;
/// Stopping tolerance for roots of `p_a - level`.
const LEVEL_TOL: f64 = 1e-9;
/// Subdivision depth cap when densifying level polylines.
const MAX_DENSIFY_DEPTH: u32 = 12;

// ---------------------------------------------------------------------------
// regular values
// ---------------------------------------------------------------------------

/// `p_a` and the norm of its parameter gradient at a sample.
fn value_and_slope(x: &Stratum, field: &PaField, p: &SamplePoint) -> Option<(f64, f64)> {
    let f0 = field.eval_sample(x, p).ok()?;
    let u = p.param.as_ref()?;
    let chart = x.patches[p.patch].chart()?;
    let dom = chart.domain();
    let mut g2 = 0.0;
    for (k, iv) in dom.iter().enumerate() {
        let h = 1e-5 * iv.width().max(1e-12);
        let mut step = vec![0.0; u.len()];
        step[k] = h;
        let fwd = x.chart_step(p, &step).and_then(|q| field.eval_sample(x, &q).ok());
        step[k] = -h;
        let bwd = x.chart_step(p, &step).and_then(|q| field.eval_sample(x, &q).ok());
        let d = match (fwd, bwd) {
            (Some(a), Some(b)) => (a - b) / (2.0 * h),
            (Some(a), None) => (a - f0) / h,
            (None, Some(b)) => (f0 - b) / h,
            (None, None) => return None,
        };
        g2 += d * d;
    }
    Some((f0, g2.sqrt()))
}

/// `count` sorted, distinct values of `p_a` on `X` spread over its sampled
/// range, each taken at a histogram bin whose samples have gradient above
/// the 10th percentile of all sampled gradients.
pub fn regular_values(pair: &PairXY, count: usize, seed: u64) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::Invalid("count must be at least 1".into()));
    }
    if !pair.x.is_parametric() {
        return Err(Error::Unsupported(format!("`{}` has no parametrization", pair.x.name)));
    }
    let field = PaField::new(pair.y.clone());
    let n = REGULAR_SAMPLES.max(16 * count);
    let samples = pair.x.sample(n, seed).points;
    let vals: Vec<(f64, f64)> = samples.par_iter().filter_map(|p| value_and_slope(&pair.x, &field, p)).collect();
    if vals.len() < 2 {
        return Err(Error::Degenerate(format!("could not evaluate p_a on `{}`", pair.x.name)));
    }
    let lo = vals.iter().map(|v| v.0).fold(f64::INFINITY, f64::min);
    let hi = vals.iter().map(|v| v.0).fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 1e-9 {
        return Err(Error::Constant(format!("p_a on `{}` stays at {lo}", pair.x.name)));
    }
    let mut slopes: Vec<f64> = vals.iter().map(|v| v.1).collect();
    slopes.sort_by(f64::total_cmp);
    let threshold = slopes[slopes.len() / 10];
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    let mut bins: Vec<Vec<f64>> = vec![Vec::new(); HISTOGRAM_BINS];
    for (v, g) in &vals {
        let b = (((v - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
        bins[b].push(*g);
    }
    let good: Vec<bool> = bins
        .iter_mut()
        .map(|b| {
            if b.is_empty() {
                return false;
            }
            b.sort_by(f64::total_cmp);
            b[b.len() / 2] > threshold
        })
        .collect();
    let mut used = vec![false; HISTOGRAM_BINS];
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let target = lo + (hi - lo) * (i + 1) as f64 / (count + 1) as f64;
        let pick = (0..HISTOGRAM_BINS)
            .filter(|&b| good[b] && !used[b])
            .min_by(|&a, &b| {
                let ca = lo + (a as f64 + 0.5) * width;
                let cb = lo + (b as f64 + 0.5) * width;
                (ca - target).abs().total_cmp(&(cb - target).abs())
            });
        if let Some(b) = pick {
            used[b] = true;
            out.push(lo + (b as f64 + 0.5) * width);
        }
    }
    if out.is_empty() {
        return Err(Error::Constant(format!("p_a on `{}` has no regular histogram bin", pair.x.name)));
    }
    out.sort_by(f64::total_cmp);
    out.dedup();
    Ok(out)
}

// ---------------------------------------------------------------------------
// slicing
// ---------------------------------------------------------------------------

/// Root of `g(s) = 0` on `[0, 1]` given `g(0)`, `g(1)` of opposite sign
/// (Illinois variant of regula falsi).
fn bracketed_root(g: impl Fn(f64) -> Option<f64>, mut g0: f64, mut g1: f64) -> f64 {
    let (mut a, mut b) = (0.0, 1.0);
    let mut side = 0i8;
    let mut s = a;
    for _ in 0..60 {
        s = if g1 != g0 { (a * g1 - b * g0) / (g1 - g0) } else { 0.5 * (a + b) };
        if !(s > a && s < b) {
            s = 0.5 * (a + b);
        }
        let Some(gs) = g(s) else {
            s = 0.5 * (a + b);
            break;
        };
        if gs.abs() <= LEVEL_TOL || b - a < 1e-15 {
            break;
        }
        if (gs > 0.0) == (g0 > 0.0) {
            a = s;
            g0 = gs;
            if side == -1 {
                g1 *= 0.5;
            }
            side = -1;
        } else {
            b = s;
            g1 = gs;
            if side == 1 {
                g0 *= 0.5;
            }
            side = 1;
        }
    }
    s
}

/// Lattice edge between node `(i, j)` and its neighbor along axis `axis`.
type EdgeKey = (usize, usize, u8);

/// Polylines of `f = level` on a 2-parameter lattice, vertices refined on
/// the true field. Cells with an unevaluable corner are skipped.
fn marching_squares(grid: &LevelGrid, level: f64, eval: &(dyn Fn(&[f64]) -> Option<f64> + Sync)) -> Vec<(Vec<DVector<f64>>, bool)> {
    let res = grid.res;
    let above = |i: usize, j: usize| grid.value(&[i, j]) > level;
    let mut links: BTreeMap<EdgeKey, Vec<EdgeKey>> = BTreeMap::new();
    let mut link = |a: EdgeKey, b: EdgeKey| {
        links.entry(a).or_default().push(b);
        links.entry(b).or_default().push(a);
    };
    for i in 0..res {
        for j in 0..res {
            let c = [grid.value(&[i, j]), grid.value(&[i + 1, j]), grid.value(&[i + 1, j + 1]), grid.value(&[i, j + 1])];
            if c.iter().any(|v| !v.is_finite()) {
                continue;
            }
            let s = [above(i, j), above(i + 1, j), above(i + 1, j + 1), above(i, j + 1)];
            // edges: bottom, right, top, left
            let e = [(i, j, 0u8), (i + 1, j, 1u8), (i, j + 1, 0u8), (i, j, 1u8)];
            let crossing: Vec<usize> = (0..4).filter(|&k| s[k] != s[(k + 1) % 4]).collect();
            match crossing.len() {
                2 => link(e[crossing[0]], e[crossing[1]]),
                4 => {
                    let center = c.iter().sum::<f64>() / 4.0 > level;
                    if center == s[0] {
                        link(e[0], e[1]);
                        link(e[2], e[3]);
                    } else {
                        link(e[3], e[0]);
                        link(e[1], e[2]);
                    }
                }
                _ => {}
            }
        }
    }
    let keys: Vec<EdgeKey> = links.keys().copied().collect();
    let positions: Vec<DVector<f64>> = keys
        .par_iter()
        .map(|&(i, j, axis)| {
            let a = grid.node(&[i, j]);
            let b = if axis == 0 { grid.node(&[i + 1, j]) } else { grid.node(&[i, j + 1]) };
            let fa = grid.value(&[i, j]) - level;
            let fb = if axis == 0 { grid.value(&[i + 1, j]) } else { grid.value(&[i, j + 1]) } - level;
            let at = |s: f64| -> Vec<f64> { a.iter().zip(&b).map(|(p, q)| p + (q - p) * s).collect() };
            let s = bracketed_root(|s| eval(&at(s)).map(|v| v - level), fa, fb);
            DVector::from_vec(at(s))
        })
        .collect();
    let index: BTreeMap<EdgeKey, usize> = keys.iter().enumerate().map(|(k, key)| (*key, k)).collect();
    let mut seen: HashSet<EdgeKey> = HashSet::new();
    let mut out = Vec::new();
    let walk = |start: EdgeKey, seen: &mut HashSet<EdgeKey>| -> (Vec<DVector<f64>>, bool) {
        let mut path = vec![start];
        seen.insert(start);
        let mut cur = start;
        let closed;
        loop {
            let next = links[&cur].iter().find(|n| !seen.contains(*n)).copied();
            match next {
                Some(n) => {
                    seen.insert(n);
                    path.push(n);
                    cur = n;
                }
                None => {
                    closed = path.len() > 2 && links[&cur].contains(&start);
                    break;
                }
            }
        }
        (path.iter().map(|k| positions[index[k]].clone()).collect(), closed)
    };
    for key in &keys {
        if links[key].len() == 1 && !seen.contains(key) {
            out.push(walk(*key, &mut seen));
        }
    }
    for key in &keys {
        if !seen.contains(key) {
            out.push(walk(*key, &mut seen));
        }
    }
    out.retain(|(v, _)| v.len() >= 2);
    out
}

/// Inserts level-set points between polyline vertices until every segment
/// midpoint is within half the band gap of `level`. New points are found
/// on the perpendicular bisector of the segment.
fn densify(verts: &[DVector<f64>], closed: bool, level: f64, eval: &(dyn Fn(&[f64]) -> Option<f64> + Sync)) -> Vec<DVector<f64>> {
    fn refine_segment(
        a: &DVector<f64>,
        b: &DVector<f64>,
        depth: u32,
        level: f64,
        eval: &(dyn Fn(&[f64]) -> Option<f64> + Sync),
        out: &mut Vec<DVector<f64>>,
    ) {
        let mid = (a + b) * 0.5;
        let Some(fm) = eval(mid.as_slice()) else { return };
        if (fm - level).abs() <= 0.5 * BAND_GAP || depth >= MAX_DENSIFY_DEPTH {
            return;
        }
        let d = b - a;
        let len = d.norm();
        if len == 0.0 {
            return;
        }
        let normal = DVector::from_vec(vec![-d[1], d[0]]);
        let at = |s: f64| &mid + &normal * s;
        let g = |s: f64| eval(at(s).as_slice()).map(|v| v - level);
        let g0 = fm - level;
        // the polyline is within O(len^2) of the level, so a bracket of
        // half the segment length on one side contains the crossing
        let root = [0.5, -0.5].into_iter().find_map(|side: f64| {
            let g1 = g(side)?;
            ((g1 > 0.0) != (g0 > 0.0)).then(|| bracketed_root(|s| g(side * s), g0, g1) * side)
        });
        let Some(s) = root else { return };
        let p = at(s);
        refine_segment(a, &p, depth + 1, level, eval, out);
        out.push(p.clone());
        refine_segment(&p, b, depth + 1, level, eval, out);
    }
    let n = verts.len();
    let segs = if closed { n } else { n - 1 };
    let pieces: Vec<Vec<DVector<f64>>> = (0..segs)
        .into_par_iter()
        .map(|i| {
            let mut extra = Vec::new();
            refine_segment(&verts[i], &verts[(i + 1) % n], 0, level, eval, &mut extra);
            extra
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        out.push(verts[i].clone());
        if i < segs {
            out.extend(pieces[i].iter().cloned());
        }
    }
    out
}

/// Points of `f = level` along a 1-parameter lattice.
fn level_points_1d(grid: &LevelGrid, level: f64, eval: &(dyn Fn(&[f64]) -> Option<f64> + Sync)) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..grid.res {
        let (fa, fb) = (grid.value(&[i]) - level, grid.value(&[i + 1]) - level);
        if !(fa.is_finite() && fb.is_finite()) || (fa > 0.0) == (fb > 0.0) {
            continue;
        }
        let (a, b) = (grid.node(&[i])[0], grid.node(&[i + 1])[0]);
        let s = bracketed_root(|s| eval(&[a + (b - a) * s]).map(|v| v - level), fa, fb);
        out.push(a + (b - a) * s);
    }
    out
}

/// `X` cut along `p_a = values[i]`: `bands[i]` holds the points with
/// `values[i-1] < p_a < values[i]` and `levels[i]` the level set itself.
/// Empty pieces are `None`.
#[derive(Debug, Clone)]
pub struct Banding {
    pub values: Vec<f64>,
    pub bands: Vec<Option<Stratum>>,
    pub levels: Vec<Option<Stratum>>,
}

/// One-value slice of `X`.
#[derive(Debug, Clone)]
pub struct SliceResult {
    pub below: Vec<Stratum>,
    pub level: Vec<Stratum>,
    pub above: Vec<Stratum>,
}

fn slice_patches(x: &Stratum) -> Result<Vec<&ParametricPatch>> {
    x.patches
        .iter()
        .map(|p| match p {
            Patch::Parametric(pp) if (1..=2).contains(&pp.params.len()) => Ok(pp),
            Patch::Parametric(_) => Err(Error::Unsupported(format!("slicing `{}` needs 1 or 2 parameters", x.name))),
            _ => Err(Error::Unsupported(format!("slicing `{}` needs a plain parametrization", x.name))),
        })
        .collect()
}

/// Cuts `X` along the level sets `p_a = v` for each of the sorted `values`,
/// using a `res`-cell lattice per patch.
pub fn slice_bands(x: &Stratum, field: &Arc<PaField>, values: &[f64], res: usize) -> Result<Banding> {
    if values.is_empty() || values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid("slicing values must be sorted and distinct".into()));
    }
    if res < 2 {
        return Err(Error::Invalid("lattice needs at least 2 cells per axis".into()));
    }
    let patches = slice_patches(x)?;
    let nb = values.len() + 1;
    let band_lo = |b: usize| if b == 0 { -1.0 } else { values[b - 1] };
    let band_hi = |b: usize| if b == values.len() { field.y.dim() as f64 + 1.0 } else { values[b] };
    let band_of = |v: f64| values.iter().position(|t| v < *t).unwrap_or(values.len());
    let mut band_patches: Vec<Vec<Patch>> = vec![Vec::new(); nb];
    let mut level_patches: Vec<Vec<Patch>> = vec![Vec::new(); values.len()];
    for base in patches {
        let eval = |u: &[f64]| field.eval_param(base, u).ok();
        let coarse = field.grid(base, 16);
        let finite: Vec<f64> = coarse.values.iter().copied().filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            return Err(Error::Degenerate(format!("p_a cannot be evaluated on `{}`", x.name)));
        }
        let (cmin, cmax) = finite.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        if cmax - cmin <= 1e-9 && values.iter().all(|v| (v - cmin).abs() > 1e-6) {
            band_patches[band_of(cmin)].push(Patch::Parametric(base.clone()));
            continue;
        }
        let grid = field.grid(base, res);
        let mut curves: Vec<Vec<Arc<LevelCurvePatch>>> = Vec::with_capacity(values.len());
        for (i, &v) in values.iter().enumerate() {
            let mut here = Vec::new();
            if base.params.len() == 2 {
                for (verts, closed) in marching_squares(&grid, v, &eval) {
                    let verts = densify(&verts, closed, v, &eval);
                    let lc = LevelCurvePatch::new(base.clone(), verts, closed, Some(v))?;
                    level_patches[i].push(Patch::LevelCurve(lc.clone()));
                    here.push(Arc::new(lc));
                }
            } else {
                for t in level_points_1d(&grid, v, &eval) {
                    if base.admissible(&[t]) {
                        let x = base.map(&[t])?;
                        level_patches[i].push(Patch::Parametric(ParametricPatch::point(x.as_slice())));
                    }
                }
            }
            curves.push(here);
        }
        let present: Vec<bool> = (0..nb)
            .map(|b| grid.values.iter().any(|v| v.is_finite() && *v > band_lo(b) && *v < band_hi(b)))
            .collect();
        for b in 0..nb {
            if !present[b] {
                continue;
            }
            let mut boundary = Vec::new();
            if b > 0 {
                boundary.extend(curves[b - 1].iter().cloned());
            }
            if b < values.len() {
                boundary.extend(curves[b].iter().cloned());
            }
            let region = LevelRegionPatch::new(
                base.clone(),
                field.clone(),
                band_lo(b),
                band_hi(b),
                res,
                boundary,
                Some(grid.clone()),
            )?;
            band_patches[b].push(Patch::LevelRegion(region));
        }
    }
    let build = |name: String, patches: Vec<Patch>| -> Result<Option<Stratum>> {
        if patches.is_empty() {
            Ok(None)
        } else {
            Stratum::new(name, patches).map(Some)
        }
    };
    let bands = band_patches
        .into_iter()
        .enumerate()
        .map(|(b, p)| build(format!("{}.band{b}", x.name), p))
        .collect::<Result<_>>()?;
    let levels = level_patches
        .into_iter()
        .enumerate()
        .map(|(i, p)| build(format!("{}.level{i}", x.name), p))
        .collect::<Result<_>>()?;
    Ok(Banding { values: values.to_vec(), bands, levels })
}

/// Cuts `X` along `p_a = eps` into the parts below, on and above the level.
pub fn slice(x: &Stratum, field: &Arc<PaField>, eps: f64) -> Result<SliceResult> {
    slice_with_res(x, field, eps, DEFAULT_RES)
}

pub fn slice_with_res(x: &Stratum, field: &Arc<PaField>, eps: f64, res: usize) -> Result<SliceResult> {
    let mut b = slice_bands(x, field, &[eps], res)?;
    let Some(mut level) = b.levels.pop().flatten() else { return Err(Error::EmptyLevel) };
    level.name = format!("{}.level", x.name);
    let rename = |s: Option<Stratum>, suffix: &str| {
        s.map(|mut s| {
            s.name = format!("{}.{suffix}", x.name);
            s
        })
    };
    let above = rename(b.bands.pop().flatten(), "above");
    let below = rename(b.bands.pop().flatten(), "below");
    Ok(SliceResult { below: below.into_iter().collect(), level: vec![level], above: above.into_iter().collect() })
}

// ---------------------------------------------------------------------------
// excision
// ---------------------------------------------------------------------------

/// Removes the given points from a curve stratum by splitting the parameter
/// interval of the patch through each point. Returns the cut curve and the
/// located points.
fn excise(y: &Stratum, centers: &[DVector<f64>], name: &str) -> Result<(Stratum, Vec<DVector<f64>>)> {
    if y.dim() != 1 {
        return Err(Error::Unsupported(format!("cutting points out of `{}` needs a curve", y.name)));
    }
    let bases: Vec<&ParametricPatch> = y
        .patches
        .iter()
        .map(|p| match p {
            Patch::Parametric(pp) => Ok(pp),
            _ => Err(Error::Unsupported(format!("cutting points out of `{}` needs a plain parametrization", y.name))),
        })
        .collect::<Result<_>>()?;
    let mut cuts: Vec<Vec<f64>> = vec![Vec::new(); bases.len()];
    let mut points = Vec::with_capacity(centers.len());
    for c in centers {
        let p = y.locate(c)?;
        cuts[p.patch].push(p.param.as_ref().expect("parametric sample")[0]);
        points.push(p.x);
    }
    let mut kept = Vec::new();
    for (base, mut ts) in bases.into_iter().zip(cuts) {
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        let iv = base.domain[0];
        let mut lo = Interval { lo: iv.lo, hi: iv.lo, lo_closed: iv.lo_closed, hi_closed: false };
        for t in ts {
            let piece = Interval { hi: t, hi_closed: false, ..lo };
            if piece.width() > 0.0 {
                kept.push(Patch::Parametric(base.with_domain(vec![piece])));
            }
            lo = Interval { lo: t, hi: t, lo_closed: false, hi_closed: false };
        }
        let last = Interval { hi: iv.hi, hi_closed: iv.hi_closed, ..lo };
        if last.width() > 0.0 || (last.lo_closed && last.hi_closed) {
            kept.push(Patch::Parametric(base.with_domain(vec![last])));
        }
    }
    Ok((Stratum::new(name, kept)?, points))
}

// ---------------------------------------------------------------------------
// refinement loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct RefineOptions {
    pub tol: f64,
    /// Maximum number of refinement rounds.
    pub budget: usize,
    pub seed: u64,
    pub values: usize,
    pub res: usize,
    pub scan_samples: usize,
    /// Direction budget of each check.
    pub search_budget: usize,
    pub config: SearchConfig,
}

impl Default for RefineOptions {
    fn default() -> Self {
        RefineOptions {
            tol: crate::whitney::DEFAULT_TOL,
            budget: 3,
            seed: 42,
            values: DEFAULT_VALUES,
            res: DEFAULT_RES,
            scan_samples: DEFAULT_SCAN_SAMPLES,
            search_budget: CheckOptions::default().budget,
            config: SearchConfig::default(),
        }
    }
}

/// Strata with their closure relations and scan results.
#[derive(Debug, Clone)]
pub struct Stratification {
    pub ambient_dim: usize,
    pub strata: Vec<Arc<Stratum>>,
    /// `(x, y)` names with `y` in the closure of `x`, certified on samples
    /// or known from slicing.
    pub adjacency: Vec<(String, String)>,
    /// Pairs whose regularity was scanned (a subset of `adjacency`).
    pub scanned: Vec<(String, String)>,
    pub provenance: BTreeMap<String, Provenance>,
    /// Refinement rounds performed.
    pub iterations: usize,
    /// Every scanned pair came out clean.
    pub complete: bool,
    /// Final scan of each scanned pair.
    pub reports: Vec<FaultReport>,
}

impl Stratification {
    pub fn stratum(&self, name: &str) -> Option<&Arc<Stratum>> {
        self.strata.iter().find(|s| s.name == name)
    }

    /// Reports that still contain faults.
    pub fn offending(&self) -> Vec<&FaultReport> {
        self.reports.iter().filter(|r| !r.is_clean()).collect()
    }

    /// The same strata as a set description, one pair per adjacency.
    pub fn to_set(&self) -> Result<StrataSet> {
        let pairs = self.adjacency.iter().map(|(x, y)| PairSpec::new(&format!("{x},{y}"), &[x], y)).collect();
        let mut set = StrataSet::from_arcs(self.ambient_dim, self.strata.clone(), pairs)?;
        set.provenance = self.provenance.clone();
        Ok(set)
    }
}

struct State {
    strata: Vec<Arc<Stratum>>,
    structural: Vec<(String, String)>,
    provenance: BTreeMap<String, Provenance>,
}

impl State {
    fn get(&self, name: &str) -> Option<Arc<Stratum>> {
        self.strata.iter().find(|s| s.name == name).cloned()
    }

    fn replace(&mut self, old: &str, new: Vec<Stratum>, operation: &str, values: &[f64]) {
        let pos = self.strata.iter().position(|s| s.name == old).unwrap_or(self.strata.len());
        self.strata.retain(|s| s.name != old);
        let parent = self.provenance.get(old).map(|_| old.to_string()).unwrap_or_else(|| old.to_string());
        for (k, s) in new.into_iter().enumerate() {
            self.provenance.insert(
                s.name.clone(),
                Provenance { parent: parent.clone(), operation: operation.into(), values: values.to_vec() },
            );
            self.strata.insert((pos + k).min(self.strata.len()), Arc::new(s));
        }
        self.structural.retain(|(a, b)| a != old && b != old);
    }

    /// Pairs of strata of different dimension with the smaller one in the
    /// closure of the larger, checked on samples. Slicing relations are
    /// known and not scanned.
    fn pairs(&self) -> Vec<PairXY> {
        let known: HashSet<&(String, String)> = self.structural.iter().collect();
        let mut candidates = Vec::new();
        for x in &self.strata {
            for y in &self.strata {
                if x.dim() > y.dim() && !known.contains(&(x.name.clone(), y.name.clone())) {
                    candidates.push((x.clone(), y.clone()));
                }
            }
        }
        candidates
            .into_par_iter()
            .filter_map(|(x, y)| PairXY::new(format!("{},{}", x.name, y.name), x, y).ok())
            .collect()
    }
}

/// Refines `pair` with default options.
pub fn refine_until_regular(pair: &PairXY, tol: f64, budget: usize, seed: u64) -> Result<Stratification> {
    refine_with(pair, &RefineOptions { tol, budget, seed, ..RefineOptions::default() })
}

pub fn refine_with(pair: &PairXY, opts: &RefineOptions) -> Result<Stratification> {
    if pair.x.name == pair.y.name {
        return Err(Error::Invalid("X and Y need distinct names".into()));
    }
    let check = CheckOptions { tol: opts.tol, budget: opts.search_budget, seed: opts.seed, config: opts.config };
    let mut state = State { strata: vec![pair.x.clone(), pair.y.clone()], structural: Vec::new(), provenance: BTreeMap::new() };
    let mut pairs = vec![pair.clone()];
    let mut iterations = 0;
    loop {
        let reports: Vec<FaultReport> =
            pairs.iter().map(|p| scan_pair(p, Condition::A, opts.scan_samples, &check)).collect();
        let faulty: Vec<usize> = (0..pairs.len()).filter(|&i| !reports[i].is_clean()).collect();
        let cuttable = faulty.iter().all(|&i| pairs[i].y.dim() == 1);
        if faulty.is_empty() || iterations >= opts.budget || !cuttable {
            let scanned = pairs.iter().map(|p| (p.x.name.clone(), p.y.name.clone())).collect::<Vec<_>>();
            let mut adjacency = scanned.clone();
            adjacency.extend(state.structural.iter().cloned());
            return Ok(Stratification {
                ambient_dim: pair.x.ambient_dim,
                strata: state.strata,
                adjacency,
                scanned,
                provenance: state.provenance,
                iterations,
                complete: faulty.is_empty(),
                reports,
            });
        }
        iterations += 1;
        let round_seed = crate::rng::mix(opts.seed, iterations as u64);
        for &i in &faulty {
            let (xname, yname) = (pairs[i].x.name.clone(), pairs[i].y.name.clone());
            let (Some(x), Some(y)) = (state.get(&xname), state.get(&yname)) else { continue };
            let centers: Vec<DVector<f64>> =
                reports[i].isolated_faults.iter().map(|c| DVector::from_column_slice(&c.center)).collect();
            let (cut, points) = excise(&y, &centers, &format!("{}.cut{iterations}", y.name))?;
            let cut_name = cut.name.clone();
            let mut pieces = vec![cut];
            for (k, p) in points.iter().enumerate() {
                pieces.push(Stratum::point(format!("{}.pt{iterations}.{k}", y.name), p.as_slice()));
            }
            let flat: Vec<f64> = points.iter().flat_map(|p| p.iter().copied()).collect();
            state.replace(&yname, pieces, "excise", &flat);
            let y_cut = state.get(&cut_name).expect("just inserted");
            let sub = PairXY::new_unchecked(format!("{xname},{cut_name}"), x.clone(), y_cut.clone());
            let values = match regular_values(&sub, opts.values, round_seed) {
                Ok(v) => v,
                Err(Error::Constant(_)) | Err(Error::Unsupported(_)) => continue,
                Err(e) => return Err(e),
            };
            let field = Arc::new(PaField::new(y_cut));
            let banding = match slice_bands(&x, &field, &values, opts.res) {
                Ok(b) => b,
                Err(Error::Unsupported(_)) => continue,
                Err(e) => return Err(e),
            };
            let mut new = Vec::new();
            let mut structural = Vec::new();
            for (b, band) in banding.bands.iter().enumerate() {
                let Some(band) = band else { continue };
                for l in [b.checked_sub(1), Some(b)].into_iter().flatten() {
                    if let Some(Some(level)) = banding.levels.get(l) {
                        structural.push((band.name.clone(), level.name.clone()));
                    }
                }
            }
            new.extend(banding.bands.into_iter().flatten());
            new.extend(banding.levels.into_iter().flatten());
            state.replace(&xname, new, "slice", &values);
            state.structural.extend(structural);
        }
        pairs = state.pairs();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn root_finder() {
        let g = |s: f64| Some(s * s - 0.25);
        let s = bracketed_root(g, -0.25, 0.75);
        assert!((s - 0.5).abs() < 1e-9);
    }

    #[test]
    fn marching_circle() {
        // f = u^2 + v^2 on [-1, 1]^2, level 0.25: one closed loop of radius 0.5
        let grid = {
            let res = 32;
            let mut g = LevelGrid { lo: vec![-1.0, -1.0], hi: vec![1.0, 1.0], res, values: Vec::new() };
            let mut vals = Vec::new();
            for i in 0..=res {
                for j in 0..=res {
                    let u = g.node(&[i, j]);
                    vals.push(u[0] * u[0] + u[1] * u[1]);
                }
            }
            g.values = vals;
            g
        };
        let eval = |u: &[f64]| Some(u[0] * u[0] + u[1] * u[1]);
        let lines = marching_squares(&grid, 0.25, &eval);
        assert_eq!(lines.len(), 1);
        let (verts, closed) = &lines[0];
        assert!(closed);
        for v in verts {
            assert!((v.norm() - 0.5).abs() < 1e-8);
        }
    }
}
