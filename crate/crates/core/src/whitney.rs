//! Verdicts for conditions (a) and (b), fault scans along `Y`, local and
//! essential components, the essential-only fault set `Sing_a`, and the
//! normal-fiber probe.
//!
//! A verdict maximizes the tail Kuo value over families of directional
//! sequences. A large value is a witness of a fault; a small one only says
//! that the search did not find a bad sequence, so "regular" is reported
//! only when the maximizing sequence also converged in the Grassmannian.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kuo::KuoContext;
use crate::rng;
use crate::sequence::{assemble_points, Family, GoodSequence, Objective, SearchConfig, SearchSpace, Sense, DEFAULT_BUDGET};
use crate::strata::{PairXY, SamplePoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Regular,
    Fault,
    Inconclusive,
}

impl Status {
    pub fn as_str(&self) -> &'static str {
        match self {
            Status::Regular => "regular",
            Status::Fault => "fault",
            Status::Inconclusive => "inconclusive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Condition {
    #[serde(rename = "a")]
    A,
    #[serde(rename = "b")]
    B,
}

impl Condition {
    pub fn objective(&self) -> Objective {
        match self {
            Condition::A => Objective::Pa,
            Condition::B => Objective::Pb,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Condition::A => "a",
            Condition::B => "b",
        }
    }
}

pub const DEFAULT_TOL: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    pub tol: f64,
    pub budget: usize,
    pub seed: u64,
    pub config: SearchConfig,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions { tol: DEFAULT_TOL, budget: DEFAULT_BUDGET, seed: 42, config: SearchConfig::default() }
    }
}

#[derive(Debug, Clone)]
pub struct Verdict {
    pub y: DVector<f64>,
    pub condition: Condition,
    pub status: Status,
    /// Largest tail Kuo value found; NaN when no sequence was complete.
    pub score: f64,
    pub tol: f64,
    /// The maximizing sequence, present whenever a complete one exists.
    pub witness: Option<GoodSequence>,
}

/// Maximizes the tail objective over several families and classifies.
fn verdict_from_families(
    space: &SearchSpace<'_>,
    families: &[Family],
    condition: Condition,
    opts: &CheckOptions,
) -> Verdict {
    let mut best: Option<GoodSequence> = None;
    for fam in families {
        let Ok(seq) = space.search(condition.objective(), Sense::Maximize, opts.budget, fam) else { continue };
        let s = seq.tail(condition.objective());
        if !s.is_finite() {
            continue;
        }
        if best.as_ref().is_none_or(|b| s > b.tail(condition.objective())) {
            best = Some(seq);
        }
    }
    let score = best.as_ref().map(|b| b.tail(condition.objective())).unwrap_or(f64::NAN);
    let status = match &best {
        None => Status::Inconclusive,
        Some(_) if score > opts.tol => Status::Fault,
        Some(b) if b.converged => Status::Regular,
        Some(_) => Status::Inconclusive,
    };
    Verdict { y: space.y().clone(), condition, status, score, tol: opts.tol, witness: best }
}

fn default_families(space: &SearchSpace<'_>) -> Vec<Family> {
    let mut families = vec![Family::all()];
    if space.ctx.pair.x.patches.len() > 1 {
        families.extend(space.patch_families());
    }
    families
}

/// Verdict for condition (a) or (b) at `y`. Over a point stratum
/// `T_y Y = 0`, so condition (a) holds at once.
pub fn check(pair: &PairXY, y: &DVector<f64>, condition: Condition, opts: &CheckOptions) -> Result<Verdict> {
    if condition == Condition::A && pair.k() == 0 {
        pair.y.locate(y)?;
        return Ok(Verdict { y: y.clone(), condition, status: Status::Regular, score: 0.0, tol: opts.tol, witness: None });
    }
    let space = SearchSpace::build(pair, y, opts.config, opts.seed)?;
    Ok(verdict_from_families(&space, &default_families(&space), condition, opts))
}

pub fn check_a(pair: &PairXY, y: &DVector<f64>, opts: &CheckOptions) -> Result<Verdict> {
    check(pair, y, Condition::A, opts)
}

pub fn check_b(pair: &PairXY, y: &DVector<f64>, opts: &CheckOptions) -> Result<Verdict> {
    check(pair, y, Condition::B, opts)
}

// ---------------------------------------------------------------------------
// scans
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct FaultCluster {
    /// Member closest to the cluster centroid.
    pub center: Vec<f64>,
    pub members: Vec<usize>,
    pub diameter: f64,
}

#[derive(Debug, Clone)]
pub struct FaultReport {
    pub pair: String,
    pub condition: Condition,
    pub tol: f64,
    pub seed: u64,
    pub samples: Vec<Verdict>,
    pub fault_fraction: f64,
    pub inconclusive: usize,
    pub isolated_faults: Vec<FaultCluster>,
    /// Largest nearest-neighbor distance among the `Y` samples.
    pub pitch: f64,
}

impl FaultReport {
    pub fn faults(&self) -> usize {
        self.samples.iter().filter(|v| v.status == Status::Fault).count()
    }

    pub fn is_clean(&self) -> bool {
        self.faults() == 0
    }
}

/// Largest nearest-neighbor distance in a point set (0 for fewer than two).
pub fn sampling_pitch(points: &[DVector<f64>]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| (p - q).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

/// Single-linkage clusters of `points` with link length `link`.
pub fn single_linkage(points: &[DVector<f64>], link: f64) -> Vec<Vec<usize>> {
    let mut uf = UnionFind::new(points.len());
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            if (&points[i] - &points[j]).norm() <= link {
                uf.union(i, j);
            }
        }
    }
    uf.groups()
}

/// Verdicts at every sample of `Y`, fault fraction and fault clusters.
pub fn scan_faults(pair: &PairXY, condition: Condition, y_samples: &[DVector<f64>], opts: &CheckOptions) -> FaultReport {
    let samples: Vec<Verdict> = y_samples
        .par_iter()
        .map(|y| {
            check(pair, y, condition, opts).unwrap_or_else(|_| Verdict {
                y: y.clone(),
                condition,
                status: Status::Inconclusive,
                score: f64::NAN,
                tol: opts.tol,
                witness: None,
            })
        })
        .collect();
    let pitch = sampling_pitch(y_samples);
    let fault_idx: Vec<usize> = samples
        .iter()
        .enumerate()
        .filter(|(_, v)| v.status == Status::Fault)
        .map(|(i, _)| i)
        .collect();
    let fault_pts: Vec<DVector<f64>> = fault_idx.iter().map(|i| samples[*i].y.clone()).collect();
    let isolated_faults = single_linkage(&fault_pts, 2.0 * pitch)
        .into_iter()
        .map(|g| {
            let members: Vec<usize> = g.iter().map(|k| fault_idx[*k]).collect();
            let pts: Vec<&DVector<f64>> = g.iter().map(|k| &fault_pts[*k]).collect();
            let centroid = pts.iter().fold(DVector::zeros(pts[0].len()), |a, p| a + *p) / pts.len() as f64;
            let center = pts
                .iter()
                .min_by(|a, b| (**a - &centroid).norm().total_cmp(&(**b - &centroid).norm()))
                .unwrap();
            let diameter = pts
                .iter()
                .flat_map(|a| pts.iter().map(move |b| (*a - *b).norm()))
                .fold(0.0, f64::max);
            FaultCluster { center: center.as_slice().to_vec(), members, diameter }
        })
        .collect();
    let n = samples.len().max(1);
    FaultReport {
        pair: pair.name.clone(),
        condition,
        tol: opts.tol,
        seed: opts.seed,
        fault_fraction: fault_idx.len() as f64 / n as f64,
        inconclusive: samples.iter().filter(|v| v.status == Status::Inconclusive).count(),
        samples,
        isolated_faults,
        pitch,
    }
}

/// [`scan_faults`] over `n` evenly spread samples of `Y`.
pub fn scan_pair(pair: &PairXY, condition: Condition, n: usize, opts: &CheckOptions) -> FaultReport {
    let ys: Vec<DVector<f64>> = pair.y.scan_samples(n, opts.seed).into_iter().map(|p| p.x).collect();
    scan_faults(pair, condition, &ys, opts)
}

// ---------------------------------------------------------------------------
// local components
// ---------------------------------------------------------------------------

pub(crate) struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    pub(crate) fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect() }
    }

    pub(crate) fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    pub(crate) fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }

    /// Groups in order of their smallest member.
    pub(crate) fn groups(&mut self) -> Vec<Vec<usize>> {
        let n = self.parent.len();
        let mut index = vec![usize::MAX; n];
        let mut out: Vec<Vec<usize>> = Vec::new();
        for i in 0..n {
            let r = self.find(i);
            if index[r] == usize::MAX {
                index[r] = out.len();
                out.push(Vec::new());
            }
            out[index[r]].push(i);
        }
        out
    }
}

/// Samples of `X` per patch in `B_r(y)`.
pub const COMPONENT_SAMPLES: usize = 800;
const START_RADIUS: f64 = 0.5;
const MAX_HALVINGS: usize = 8;

#[derive(Debug, Clone)]
pub struct Component {
    pub points: Vec<SamplePoint>,
    /// 90th percentile of nearest-neighbor distances within the cloud.
    pub pitch: f64,
}

#[derive(Debug, Clone)]
pub struct LocalComponents {
    pub y: DVector<f64>,
    pub radius: f64,
    pub components: Vec<Component>,
    pub n_y: usize,
    /// False when `N_y` never agreed between `r` and `r/2`.
    pub stable: bool,
    /// `(r, N_y(r))` for every radius tried.
    pub history: Vec<(f64, usize)>,
    pub essential: Option<Vec<bool>>,
}

fn nn_distances(points: &[&SamplePoint]) -> Vec<f64> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| (&p.x - &q.x).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn percentile(mut v: Vec<f64>, q: f64) -> f64 {
    v.retain(|x| x.is_finite());
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let idx = ((v.len() - 1) as f64 * q).round() as usize;
    v[idx]
}

/// Clusters `X ∩ B_r(y)` into connected pieces.
pub fn components_at(pair: &PairXY, y: &DVector<f64>, r: f64, seed: u64) -> Vec<Component> {
    let x = &pair.x;
    let cloud = x.sample_shell(y, r, 0.0, COMPONENT_SAMPLES, rng::mix(seed, r.to_bits()));
    let mut comps = Vec::new();
    for patch in 0..x.patches.len() {
        let pts: Vec<&SamplePoint> = cloud.iter().filter(|p| p.patch == patch).collect();
        if pts.is_empty() {
            continue;
        }
        let pitch = percentile(nn_distances(&pts), 0.9);
        let link = 2.0 * pitch;
        let edges: Vec<(usize, usize)> = (0..pts.len())
            .into_par_iter()
            .flat_map_iter(|i| {
                let pts = &pts;
                ((i + 1)..pts.len()).filter_map(move |j| {
                    ((&pts[i].x - &pts[j].x).norm() <= link && x.connected_by_segment(pts[i], pts[j], pitch))
                        .then_some((i, j))
                })
            })
            .collect();
        let mut uf = UnionFind::new(pts.len());
        for (i, j) in edges {
            uf.union(i, j);
        }
        let min_size = 3usize.max((0.02 * pts.len() as f64).ceil() as usize);
        for g in uf.groups() {
            if g.len() >= min_size {
                let members: Vec<SamplePoint> = g.iter().map(|i| pts[*i].clone()).collect();
                let refs: Vec<&SamplePoint> = members.iter().collect();
                let pitch = percentile(nn_distances(&refs), 0.9);
                comps.push(Component { points: members, pitch });
            }
        }
    }
    comps
}

/// Components of `X` near `y` at the first radius (halving from 0.5)
/// where the count agrees with the count at half the radius.
pub fn local_components(pair: &PairXY, y: &DVector<f64>, seed: u64) -> Result<LocalComponents> {
    pair.y.locate(y)?;
    let mut r = START_RADIUS;
    let mut current = components_at(pair, y, r, seed);
    let mut history = vec![(r, current.len())];
    for _ in 0..MAX_HALVINGS {
        let half = components_at(pair, y, r / 2.0, seed);
        history.push((r / 2.0, half.len()));
        if half.len() == current.len() {
            return Ok(LocalComponents {
                y: y.clone(),
                radius: r,
                n_y: current.len(),
                components: current,
                stable: true,
                history,
                essential: None,
            });
        }
        r /= 2.0;
        current = half;
    }
    Ok(LocalComponents { y: y.clone(), radius: r, n_y: current.len(), components: current, stable: false, history, essential: None })
}

/// Distance from `q` to the closure of a component: local descents on `X`
/// from the three nearest cloud points.
fn distance_to_component(pair: &PairXY, comp: &Component, q: &DVector<f64>) -> f64 {
    let mut near: Vec<(f64, usize)> = comp.points.iter().enumerate().map(|(i, p)| ((&p.x - q).norm(), i)).collect();
    near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    near.iter()
        .take(3)
        .map(|(d, i)| match pair.x.local_nearest(q, &comp.points[*i]) {
            Some(p) => (&p.x - q).norm().min(*d),
            None => *d,
        })
        .fold(f64::INFINITY, f64::min)
}

/// A component is essential when every sampled `y'` in `Y` within `r/4`
/// of `y` lies within one sampling pitch of the component's closure.
pub fn essential_flags(pair: &PairXY, comps: &LocalComponents, seed: u64) -> Result<Vec<bool>> {
    let mut ys: Vec<DVector<f64>> = vec![comps.y.clone()];
    ys.extend(
        pair.y
            .sample_shell(&comps.y, comps.radius / 4.0, 0.0, 32, rng::mix(seed, 0x4553_5345))
            .into_iter()
            .map(|p| p.x),
    );
    if ys.is_empty() {
        return Err(Error::Invalid("no samples of Y near the base point".into()));
    }
    Ok(comps
        .components
        .iter()
        .map(|c| ys.iter().all(|q| distance_to_component(pair, c, q) <= c.pitch))
        .collect())
}

/// Labels every shell point of a search space with the local component it
/// connects to, by single linkage at scale-relative radii across shells
/// and into the component clouds.
fn label_shell_points(space: &SearchSpace<'_>, comps: &LocalComponents) -> Vec<Vec<Option<usize>>> {
    let x = &space.ctx.pair.x;
    let y = space.y();
    struct Node<'p> {
        point: &'p SamplePoint,
        dist: f64,
        shell: Option<usize>,
        comp: Option<usize>,
        pitch: f64,
    }
    let mut nodes: Vec<Node<'_>> = Vec::new();
    for (c, comp) in comps.components.iter().enumerate() {
        for p in &comp.points {
            nodes.push(Node { point: p, dist: (&p.x - y).norm(), shell: None, comp: Some(c), pitch: comp.pitch });
        }
    }
    let first_shell = nodes.len();
    for (s, shell) in space.shells.iter().enumerate() {
        for sp in &shell.points {
            nodes.push(Node { point: &sp.point, dist: sp.dist, shell: Some(s), comp: None, pitch: 0.0 });
        }
    }
    let link = |a: &Node<'_>, b: &Node<'_>| -> Option<f64> {
        if a.point.patch != b.point.patch {
            return None;
        }
        match (a.shell, b.shell) {
            (Some(sa), Some(sb)) if sa.abs_diff(sb) <= 2 => Some(0.5 * a.dist.min(b.dist)),
            (Some(_), Some(_)) => None,
            (None, None) => None,
            (Some(_), None) => Some((2.0 * b.pitch).max(0.5 * a.dist)),
            (None, Some(_)) => Some((2.0 * a.pitch).max(0.5 * b.dist)),
        }
    };
    let edges: Vec<(usize, usize)> = (first_shell..nodes.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let nodes = &nodes;
            (0..i).filter_map(move |j| {
                let l = link(&nodes[i], &nodes[j])?;
                let d = (&nodes[i].point.x - &nodes[j].point.x).norm();
                (d <= l && x.connected_by_segment(nodes[i].point, nodes[j].point, 0.25 * l)).then_some((i, j))
            })
        })
        .collect();
    let mut uf = UnionFind::new(nodes.len());
    for (i, j) in edges {
        uf.union(i, j);
    }
    let mut root_label: std::collections::HashMap<usize, Option<usize>> = std::collections::HashMap::new();
    for i in 0..first_shell {
        let r = uf.find(i);
        let c = nodes[i].comp;
        root_label
            .entry(r)
            .and_modify(|l| {
                if *l != c {
                    *l = None;
                }
            })
            .or_insert(c);
    }
    let mut out: Vec<Vec<Option<usize>>> = space.shells.iter().map(|s| vec![None; s.points.len()]).collect();
    let mut i = first_shell;
    for (s, shell) in space.shells.iter().enumerate() {
        for k in 0..shell.points.len() {
            let r = uf.find(i);
            out[s][k] = root_label.get(&r).copied().flatten();
            i += 1;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct SingA {
    pub verdict: Verdict,
    pub components: LocalComponents,
}

/// Condition (a) at `y` searched only over essential components of `X`.
pub fn sing_a_kaloshin(pair: &PairXY, y: &DVector<f64>, opts: &CheckOptions) -> Result<SingA> {
    let mut comps = local_components(pair, y, opts.seed)?;
    let flags = essential_flags(pair, &comps, opts.seed)?;
    comps.essential = Some(flags.clone());
    let mut config = opts.config;
    config.schedule.r0 = config.schedule.r0.min(comps.radius / 2.0);
    let space = SearchSpace::build(pair, y, config, opts.seed)?;
    let labels = label_shell_points(&space, &comps);
    let essential: Vec<usize> = (0..flags.len()).filter(|c| flags[*c]).collect();
    if essential.is_empty() {
        let verdict = Verdict { y: y.clone(), condition: Condition::A, status: Status::Regular, score: 0.0, tol: opts.tol, witness: None };
        return Ok(SingA { verdict, components: comps });
    }
    let mask_for = |set: &[usize]| -> Vec<Vec<bool>> {
        labels
            .iter()
            .map(|shell| shell.iter().map(|l| l.is_some_and(|c| set.contains(&c))).collect())
            .collect()
    };
    let mut families = vec![Family::from_mask("essential", mask_for(&essential))];
    if essential.len() > 1 {
        for c in &essential {
            families.push(Family::from_mask(format!("component {c}"), mask_for(&[*c])));
        }
    }
    let verdict = verdict_from_families(&space, &families, Condition::A, opts);
    Ok(SingA { verdict, components: comps })
}

// ---------------------------------------------------------------------------
// normal fiber
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FiberProbe {
    /// Smallest distance from `y` to a sampled point of `X` in the normal
    /// fiber over `y`; 1 when none was found.
    pub omega: f64,
    pub fiber_points: Vec<SamplePoint>,
    /// Sequence inside the fiber converging to `y`, when the fiber reaches it.
    pub sequence: Option<GoodSequence>,
}

/// Samples `X` in the affine fiber `y + (T_y Y)^perp` at a geometric range
/// of scales.
pub fn b_fiber_probe(pair: &PairXY, y: &DVector<f64>, seed: u64) -> Result<FiberProbe> {
    let config = SearchConfig::default();
    let ctx = KuoContext::new(pair, y)?;
    let sched = config.schedule;
    let per_shell: Vec<Vec<(usize, SamplePoint)>> = (0..sched.len)
        .into_par_iter()
        .map(|n| {
            let (lo, hi) = sched.band(n);
            let r = sched.radius(n);
            let key = rng::mix(seed ^ rng::hash_floats(y.as_slice()), 0x4649_4252 ^ n as u64);
            pair.x
                .sample_shell(y, hi, lo, config.cloud_size, key)
                .iter()
                .filter_map(|p| pair.x.project_to_fiber(p, y, &ctx.frame, 1e-3 * r))
                .map(|p| (n, p))
                .collect()
        })
        .collect();
    let fiber_points: Vec<(usize, SamplePoint)> = per_shell.into_iter().flatten().collect();
    let omega = fiber_points
        .iter()
        .map(|(_, p)| (&p.x - y).norm())
        .filter(|d| *d > 0.0)
        .fold(f64::INFINITY, f64::min);
    let omega = if omega.is_finite() { omega } else { 1.0 };
    let reach = sched.band(sched.len - 1).1 * 2.0;
    let sequence = (omega <= reach).then(|| {
        let mut entries: Vec<(usize, SamplePoint)> = Vec::new();
        let mut last = f64::INFINITY;
        for n in 0..sched.len {
            let r = sched.radius(n);
            let pick = fiber_points
                .iter()
                .filter(|(_, p)| {
                    let d = (&p.x - y).norm();
                    d < last && d > 0.0
                })
                .min_by(|a, b| {
                    let da = ((&a.1.x - y).norm() / r).ln().abs();
                    let db = ((&b.1.x - y).norm() / r).ln().abs();
                    da.total_cmp(&db)
                });
            if let Some((_, p)) = pick {
                let d = (&p.x - y).norm();
                let (lo, hi) = sched.band(n);
                if d >= lo && d < hi {
                    last = d;
                    entries.push((n, p.clone()));
                }
            }
        }
        let dir = entries
            .last()
            .map(|(_, p)| {
                let d = &p.x - y;
                let n = d.norm();
                d / n
            })
            .unwrap_or_else(|| DVector::zeros(y.len()));
        assemble_points(&ctx, &config, entries, dir, "fiber")
    });
    Ok(FiberProbe { omega, fiber_points: fiber_points.into_iter().map(|(_, p)| p).collect(), sequence })
}
