//! Good sequences converging to a base point `y`, and adversarial searches
//! over families of them.
//!
//! A search first samples `X` in a fixed set of concentric shells around `y`
//! (radii `r0 * ratio^n`). A sequence is then a choice of one shell point
//! per shell; a *directional* sequence picks, in each shell, the point whose
//! secant `x - y` makes the smallest angle with a search direction, keeping
//! to the part of the shell inside the search cone closest to the point
//! chosen one shell further out. The Kuo functions are evaluated lazily and
//! cached per shell point, so scanning many directions is cheap.

use std::sync::OnceLock;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grassmann::{grassmann_limit, symmetric_angle, tail_window, Subspace};
use crate::kuo::{p_a_from, p_b_prime_from, KuoContext};
use crate::rng;
use crate::strata::{PairXY, SamplePoint};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub r0: f64,
    pub ratio: f64,
    pub len: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule { r0: 0.5, ratio: 0.7, len: 24 }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.len == 0 {
            return Err(Error::Invalid("radius schedule is empty".into()));
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) || !(self.r0 > 0.0) {
            return Err(Error::Invalid(format!(
                "radius schedule needs r0 > 0 and 0 < ratio < 1 (got {}, {})",
                self.r0, self.ratio
            )));
        }
        Ok(())
    }

    pub fn radius(&self, n: usize) -> f64 {
        self.r0 * self.ratio.powi(n as i32)
    }

    /// Band of distances from which shell `n` draws its points. Bands of
    /// consecutive shells are disjoint and contiguous, and each lies inside
    /// `[r_n / sqrt 2, r_n * sqrt 2]`.
    pub fn band(&self, n: usize) -> (f64, f64) {
        let r = self.radius(n);
        let s = self.ratio.sqrt();
        (r * s, r / s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchConfig {
    pub schedule: Schedule,
    /// Pairwise tail angle below which a sequence counts as converged.
    pub grassmann_tol: f64,
    /// Samples per patch per shell.
    pub cloud_size: usize,
    /// Sine of the half-angle of the search cone around a direction.
    pub aperture: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { schedule: Schedule::default(), grassmann_tol: 0.05, cloud_size: 128, aperture: 0.25 }
    }
}

/// Smallest number of directions any search uses.
pub const MIN_DIRECTIONS: usize = 32;
/// Default direction budget.
pub const DEFAULT_BUDGET: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Pa,
    Pb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Minimize,
    Maximize,
}

/// A sampled sequence converging to `y`, with its tangent spaces and Kuo
/// traces.
#[derive(Debug, Clone)]
pub struct GoodSequence {
    pub points: Vec<SamplePoint>,
    /// Shell index of each point.
    pub shells: Vec<usize>,
    /// `|x_n - y|`, strictly decreasing.
    pub radii: Vec<f64>,
    pub tangents: Vec<Subspace>,
    pub limit: Option<Subspace>,
    pub converged: bool,
    pub tail_spread: f64,
    /// True when every shell of the tail window produced a point.
    pub complete: bool,
    pub pa_trace: Vec<f64>,
    /// NaN where the secant is degenerate.
    pub pb_trace: Vec<f64>,
    pub direction: DVector<f64>,
    pub family: String,
    pub aperture: f64,
    tail_from: usize,
}

impl GoodSequence {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn tail_mean(&self, trace: &[f64]) -> f64 {
        let tail: Vec<f64> = self
            .shells
            .iter()
            .zip(trace)
            .filter(|(s, _)| **s >= self.tail_from)
            .map(|(_, v)| *v)
            .collect();
        if tail.is_empty() {
            return f64::NAN;
        }
        tail.iter().sum::<f64>() / tail.len() as f64
    }

    /// Mean of `p_a` over the tail window of shells.
    pub fn tail_pa(&self) -> f64 {
        self.tail_mean(&self.pa_trace)
    }

    /// Mean of `p_b` over the tail window of shells.
    pub fn tail_pb(&self) -> f64 {
        self.tail_mean(&self.pb_trace)
    }

    pub fn tail(&self, objective: Objective) -> f64 {
        match objective {
            Objective::Pa => self.tail_pa(),
            Objective::Pb => self.tail_pb(),
        }
    }
}

/// A sample in one shell, with lazily evaluated tangent space and Kuo
/// values.
#[derive(Debug)]
pub struct ShellPoint {
    pub point: SamplePoint,
    /// `(x - y) / |x - y|`
    pub unit: DVector<f64>,
    pub dist: f64,
    tangent: OnceLock<Option<(Subspace, f64)>>,
    pb_prime: OnceLock<Option<f64>>,
}

#[derive(Debug)]
pub struct ShellCloud {
    pub radius: f64,
    pub points: Vec<ShellPoint>,
}

/// Which shell points a family of sequences may use.
#[derive(Debug, Clone)]
pub struct Family {
    pub name: String,
    mask: Option<Vec<Vec<bool>>>,
}

impl Family {
    pub fn all() -> Self {
        Family { name: "all".into(), mask: None }
    }

    /// Points whose membership flag is set, one flag vector per shell.
    pub fn from_mask(name: impl Into<String>, mask: Vec<Vec<bool>>) -> Self {
        Family { name: name.into(), mask: Some(mask) }
    }

    fn admits(&self, shell: usize, idx: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[shell][idx])
    }
}

/// Sine of the angle to the ray along `dir`, continued past a right angle
/// as `2 - sine` so that mirror points behind `y` never tie with points
/// ahead of it.
fn ray_sine(unit: &DVector<f64>, dir: &DVector<f64>) -> f64 {
    let c = unit.dot(dir).clamp(-1.0, 1.0);
    let s = (1.0 - c * c).max(0.0).sqrt();
    if c >= 0.0 {
        s
    } else {
        2.0 - s
    }
}

/// Shell clouds around one base point plus everything needed to score
/// sequences drawn from them.
#[derive(Debug)]
pub struct SearchSpace<'a> {
    pub ctx: KuoContext<'a>,
    pub config: SearchConfig,
    pub seed: u64,
    pub shells: Vec<ShellCloud>,
}

impl<'a> SearchSpace<'a> {
    pub fn build(pair: &'a PairXY, y: &DVector<f64>, config: SearchConfig, seed: u64) -> Result<Self> {
        config.schedule.validate()?;
        let on_y = pair.y.locate(y)?;
        let ctx = KuoContext::new(pair, &on_y.x)?;
        let key = rng::hash_floats(y.as_slice());
        let shells = (0..config.schedule.len)
            .into_par_iter()
            .map(|n| {
                let (lo, hi) = config.schedule.band(n);
                let pts = pair.x.sample_shell(y, hi, lo, config.cloud_size, rng::mix(seed ^ key, n as u64));
                ShellCloud {
                    radius: config.schedule.radius(n),
                    points: pts
                        .into_iter()
                        .map(|p| {
                            let d = &p.x - y;
                            let dist = d.norm();
                            ShellPoint { unit: d / dist, dist, point: p, tangent: OnceLock::new(), pb_prime: OnceLock::new() }
                        })
                        .collect(),
                }
            })
            .collect();
        Ok(SearchSpace { ctx, config, seed, shells })
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.ctx.y
    }

    pub fn ambient(&self) -> usize {
        self.ctx.y.len()
    }

    /// First shell of the tail window.
    pub fn tail_from(&self) -> usize {
        let len = self.shells.len();
        len - tail_window(len)
    }

    /// One family per patch of `X`.
    pub fn patch_families(&self) -> Vec<Family> {
        (0..self.ctx.pair.x.patches.len())
            .map(|p| {
                Family::from_mask(
                    format!("patch {p}"),
                    self.shells
                        .iter()
                        .map(|s| s.points.iter().map(|q| q.point.patch == p).collect())
                        .collect(),
                )
            })
            .collect()
    }

    fn tangent_pa(&self, shell: usize, idx: usize) -> Option<&(Subspace, f64)> {
        let sp = &self.shells[shell].points[idx];
        sp.tangent
            .get_or_init(|| {
                let t = self.ctx.pair.x.tangent(&sp.point).ok()?;
                let pa = p_a_from(&self.ctx.frame, &t);
                Some((t, pa))
            })
            .as_ref()
    }

    fn pb_prime(&self, shell: usize, idx: usize) -> Option<f64> {
        let sp = &self.shells[shell].points[idx];
        *sp.pb_prime.get_or_init(|| {
            let (t, _) = self.tangent_pa(shell, idx)?;
            let s = self.ctx.secant(&sp.point.x).ok()?;
            Some(p_b_prime_from(&s, t))
        })
    }

    fn value(&self, shell: usize, idx: usize, objective: Objective) -> Option<f64> {
        let pa = self.tangent_pa(shell, idx)?.1;
        match objective {
            Objective::Pa => Some(pa),
            Objective::Pb => Some(pa + self.pb_prime(shell, idx)?),
        }
    }

    /// Shell point chosen in each shell for direction `dir`; `None` where
    /// the family has no point in that shell.
    pub fn select(&self, dir: &DVector<f64>, family: &Family) -> Vec<Option<usize>> {
        let mut prev: Option<&DVector<f64>> = None;
        let mut out = Vec::with_capacity(self.shells.len());
        for (s, shell) in self.shells.iter().enumerate() {
            let members: Vec<(usize, f64)> = shell
                .points
                .iter()
                .enumerate()
                .filter(|(i, _)| family.admits(s, *i))
                .map(|(i, p)| (i, ray_sine(&p.unit, dir)))
                .collect();
            let Some(best) = members.iter().map(|m| m.1).min_by(|a, b| a.total_cmp(b)) else {
                out.push(None);
                continue;
            };
            let cone = best.max(self.config.aperture);
            let pick = members
                .iter()
                .filter(|m| m.1 <= cone)
                .min_by(|a, b| {
                    let key = |m: &(usize, f64)| match prev {
                        Some(p) => (&shell.points[m.0].unit - p).norm(),
                        None => m.1,
                    };
                    key(a).total_cmp(&key(b)).then(a.1.total_cmp(&b.1)).then(a.0.cmp(&b.0))
                })
                .map(|m| m.0);
            if let Some(i) = pick {
                prev = Some(&shell.points[i].unit);
            }
            out.push(pick);
        }
        out
    }

    /// Tail mean of the objective for a selection, or `None` if any tail
    /// shell is empty or unevaluable.
    pub fn tail_score(&self, picks: &[Option<usize>], objective: Objective) -> Option<f64> {
        let from = self.tail_from();
        let mut sum = 0.0;
        for (s, pick) in picks.iter().enumerate().skip(from) {
            sum += self.value(s, (*pick)?, objective)?;
        }
        Some(sum / (picks.len() - from) as f64)
    }

    /// Full sequence with traces and Grassmannian limit for a selection.
    pub fn assemble(&self, picks: &[Option<usize>], dir: &DVector<f64>, family: &Family) -> GoodSequence {
        let from = self.tail_from();
        let mut seq = GoodSequence {
            points: vec![],
            shells: vec![],
            radii: vec![],
            tangents: vec![],
            limit: None,
            converged: false,
            tail_spread: f64::INFINITY,
            complete: picks.iter().skip(from).all(|p| p.is_some()),
            pa_trace: vec![],
            pb_trace: vec![],
            direction: dir.clone(),
            family: family.name.clone(),
            aperture: self.config.aperture,
            tail_from: from,
        };
        for (s, pick) in picks.iter().enumerate() {
            let Some(i) = *pick else { continue };
            let Some((t, pa)) = self.tangent_pa(s, i) else {
                if s >= from {
                    seq.complete = false;
                }
                continue;
            };
            let sp = &self.shells[s].points[i];
            seq.points.push(sp.point.clone());
            seq.shells.push(s);
            seq.radii.push(sp.dist);
            seq.tangents.push(t.clone());
            seq.pa_trace.push(*pa);
            seq.pb_trace.push(self.pb_prime(s, i).map(|v| pa + v).unwrap_or(f64::NAN));
        }
        let tail: Vec<Subspace> = seq
            .shells
            .iter()
            .zip(&seq.tangents)
            .filter(|(s, _)| **s >= from)
            .map(|(_, t)| t.clone())
            .collect();
        if let Ok(lim) = grassmann_limit(&tail, self.config.grassmann_tol) {
            seq.tail_spread = tail_spread(&tail);
            seq.converged = seq.complete && tail.len() >= 2 && seq.tail_spread < self.config.grassmann_tol;
            seq.limit = Some(lim.limit);
        }
        seq
    }

    pub fn sequence(&self, dir: &DVector<f64>, family: &Family) -> GoodSequence {
        self.assemble(&self.select(dir, family), dir, family)
    }

    /// Direction `i` of the search: even indices come from the normal space
    /// of `Y` at `y` when `normal_first` is set, odd ones from the full
    /// sphere.
    fn direction(&self, i: usize, normal_first: bool) -> DVector<f64> {
        let n = self.ambient();
        let normal = self.ctx.frame.orthogonal_complement();
        if normal_first && normal.dim() > 0 && normal.dim() < n {
            if i % 2 == 0 {
                let c = rng::sphere_direction(normal.dim(), (i / 2) as u64);
                return normal.frame() * c;
            }
            return rng::sphere_direction(n, (i / 2) as u64);
        }
        rng::sphere_direction(n, i as u64)
    }

    /// Adversarial search over directions. Scans `max(budget, 32)`
    /// directions of a prefix-stable sequence, then runs a compass search
    /// on the sphere from the best direction of every dyadic prefix. The
    /// result is the best over everything evaluated, so a larger budget
    /// never gives a worse value.
    pub fn search(&self, objective: Objective, sense: Sense, budget: usize, family: &Family) -> Result<GoodSequence> {
        let count = budget.max(MIN_DIRECTIONS);
        let normal_first = objective == Objective::Pb;
        let better = |a: f64, b: f64| match sense {
            Sense::Minimize => a < b,
            Sense::Maximize => a > b,
        };
        let scored: Vec<(DVector<f64>, Option<f64>)> = (0..count)
            .into_par_iter()
            .map(|i| {
                let d = self.direction(i, normal_first);
                let s = self.tail_score(&self.select(&d, family), objective);
                (d, s)
            })
            .collect();
        let mut best: Option<(f64, DVector<f64>)> = None;
        let consider = |s: f64, d: &DVector<f64>, best: &mut Option<(f64, DVector<f64>)>| {
            if best.as_ref().is_none_or(|b| better(s, b.0)) {
                *best = Some((s, d.clone()));
            }
        };
        let mut prefix = MIN_DIRECTIONS;
        let mut starts: Vec<(f64, DVector<f64>)> = Vec::new();
        for (i, (d, s)) in scored.iter().enumerate() {
            if let Some(s) = s {
                consider(*s, d, &mut best);
            }
            if i + 1 == prefix || i + 1 == count {
                if let Some(b) = &best {
                    if starts.last().is_none_or(|l| l.1 != b.1) {
                        starts.push(b.clone());
                    }
                }
                prefix *= 2;
            }
        }
        let refined: Vec<(f64, DVector<f64>)> = starts
            .par_iter()
            .map(|(s, d)| self.compass(d.clone(), *s, objective, &better, family))
            .collect();
        for (s, d) in &refined {
            consider(*s, d, &mut best);
        }
        let (_, dir) = best.ok_or_else(|| Error::NoConvergence("every directional search was truncated".into()))?;
        Ok(self.sequence(&dir, family))
    }

    fn compass(
        &self,
        mut dir: DVector<f64>,
        mut score: f64,
        objective: Objective,
        better: &(dyn Fn(f64, f64) -> bool + Sync),
        family: &Family,
    ) -> (f64, DVector<f64>) {
        let n = dir.len();
        if n < 2 {
            return (score, dir);
        }
        let mut step = self.config.aperture.max(1e-3);
        let mut evals = 0;
        while step > 1e-3 && evals < 80 {
            let tangent = Subspace::span(n, std::slice::from_ref(&dir)).expect("unit direction").orthogonal_complement();
            let mut moved = false;
            'probe: for b in tangent.basis() {
                for sign in [1.0, -1.0] {
                    let cand = &dir + &b * (sign * step);
                    let cand = &cand / cand.norm();
                    evals += 1;
                    if let Some(s) = self.tail_score(&self.select(&cand, family), objective) {
                        if better(s, score) {
                            score = s;
                            dir = cand;
                            moved = true;
                            break 'probe;
                        }
                    }
                }
            }
            if !moved {
                step *= 0.5;
            }
        }
        (score, dir)
    }
}

/// Builds a sequence from explicit `(shell, point)` entries, evaluating
/// tangents and Kuo values directly. Entries must be ordered by shell.
pub fn assemble_points(
    ctx: &KuoContext<'_>,
    config: &SearchConfig,
    entries: Vec<(usize, SamplePoint)>,
    direction: DVector<f64>,
    family: &str,
) -> GoodSequence {
    let len = config.schedule.len;
    let from = len - tail_window(len);
    let mut seq = GoodSequence {
        points: vec![],
        shells: vec![],
        radii: vec![],
        tangents: vec![],
        limit: None,
        converged: false,
        tail_spread: f64::INFINITY,
        complete: false,
        pa_trace: vec![],
        pb_trace: vec![],
        direction,
        family: family.to_string(),
        aperture: config.aperture,
        tail_from: from,
    };
    for (s, p) in entries {
        let Ok(t) = ctx.pair.x.tangent(&p) else { continue };
        let pa = p_a_from(&ctx.frame, &t);
        let pb = ctx.secant(&p.x).map(|sec| pa + p_b_prime_from(&sec, &t)).unwrap_or(f64::NAN);
        seq.radii.push((&p.x - &ctx.y).norm());
        seq.points.push(p);
        seq.shells.push(s);
        seq.tangents.push(t);
        seq.pa_trace.push(pa);
        seq.pb_trace.push(pb);
    }
    seq.complete = (from..len).all(|s| seq.shells.contains(&s));
    let tail: Vec<Subspace> = seq
        .shells
        .iter()
        .zip(&seq.tangents)
        .filter(|(s, _)| **s >= from)
        .map(|(_, t)| t.clone())
        .collect();
    if let Ok(lim) = grassmann_limit(&tail, config.grassmann_tol) {
        seq.tail_spread = tail_spread(&tail);
        seq.converged = seq.complete && tail.len() >= 2 && seq.tail_spread < config.grassmann_tol;
        seq.limit = Some(lim.limit);
    }
    seq
}

/// Largest pairwise angle over the whole tail; infinite when a pair has
/// mismatched dimensions.
fn tail_spread(tail: &[Subspace]) -> f64 {
    let mut spread: f64 = 0.0;
    for i in 0..tail.len() {
        for j in (i + 1)..tail.len() {
            spread = spread.max(symmetric_angle(&tail[i], &tail[j]).unwrap_or(f64::INFINITY));
        }
    }
    spread
}

/// Sequence in `X` toward `y` along `dir`, using every patch.
pub fn directional_sequence(
    pair: &PairXY,
    y: &DVector<f64>,
    dir: &DVector<f64>,
    config: SearchConfig,
    seed: u64,
) -> Result<GoodSequence> {
    directional_sequence_in(pair, y, dir, config, seed, None)
}

/// As [`directional_sequence`], optionally restricted to one patch of `X`.
pub fn directional_sequence_in(
    pair: &PairXY,
    y: &DVector<f64>,
    dir: &DVector<f64>,
    config: SearchConfig,
    seed: u64,
    patch: Option<usize>,
) -> Result<GoodSequence> {
    if dir.len() != y.len() || (dir.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid("search direction must be a unit vector in ambient space".into()));
    }
    let space = SearchSpace::build(pair, y, config, seed)?;
    let family = match patch {
        None => Family::all(),
        Some(p) => space
            .patch_families()
            .into_iter()
            .nth(p)
            .ok_or_else(|| Error::Invalid(format!("X has no patch {p}")))?,
    };
    let seq = space.sequence(dir, &family);
    if seq.is_empty() {
        return Err(Error::NoConvergence("no point of X in any shell".into()));
    }
    Ok(seq)
}

/// Sequence with the smallest tail `p_a` found within the budget.
pub fn minimize_pa_sequence(pair: &PairXY, y: &DVector<f64>, budget: usize, seed: u64) -> Result<GoodSequence> {
    let space = SearchSpace::build(pair, y, SearchConfig::default(), seed)?;
    space.search(Objective::Pa, Sense::Minimize, budget, &Family::all())
}

/// Sequence with the smallest tail `p_b`; directions in the normal space
/// of `Y` are tried first.
pub fn minimize_pb_sequence(pair: &PairXY, y: &DVector<f64>, budget: usize, seed: u64) -> Result<GoodSequence> {
    let space = SearchSpace::build(pair, y, SearchConfig::default(), seed)?;
    space.search(Objective::Pb, Sense::Minimize, budget, &Family::all())
}
