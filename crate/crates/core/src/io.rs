//! JSON set descriptions, CSV/JSON reports and ASCII PLY export.
//!
//! A set description looks like
//!
//! ```json
//! {
//!   "ambient_dim": 3,
//!   "strata": [
//!     {"name": "annulus", "patches": [
//!       {"kind": "parametric", "params": ["u", "v"], "map": ["u", "v", "0"],
//!        "domain": [[-2, 2], [-2, 2]], "inequalities": ["u^2 + v^2 - 1"]}]},
//!     {"name": "origin", "patches": [{"kind": "point", "coords": [0, 0, 0]}]}
//!   ],
//!   "pairs": [{"name": "X,Y", "x": ["annulus"], "y": "origin"}]
//! }
//! ```
//!
//! Domain intervals are open when written as `[lo, hi]`; the object form
//! `{"lo": .., "hi": .., "lo_closed": true}` marks closed ends. Implicit
//! patches use `coords`, `equalities`, `inequalities` and sampling
//! `bounds`. Refinement adds `level_curve` and `level_region` patches and a
//! `provenance` block.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{Expression, Node};
use crate::kuo::PaField;
use crate::strata::{
    ImplicitPatch, Interval, LevelCurvePatch, LevelRegionPatch, PairXY, ParametricPatch, Patch, Stratum,
};
use crate::whitney::{FaultReport, Verdict};

/// Which strata form the `X` and `Y` of a named pair. Several `X` names
/// denote their disjoint union.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSpec {
    pub name: String,
    #[serde(deserialize_with = "one_or_many")]
    pub x: Vec<String>,
    pub y: String,
}

fn one_or_many<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Vec<String>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(String),
        Many(Vec<String>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(s) => vec![s],
        OneOrMany::Many(v) => v,
    })
}

impl PairSpec {
    pub fn new(name: &str, x: &[&str], y: &str) -> Self {
        PairSpec { name: name.into(), x: x.iter().map(|s| s.to_string()).collect(), y: y.into() }
    }
}

/// How a stratum was produced by refinement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub parent: String,
    pub operation: String,
    #[serde(default)]
    pub values: Vec<f64>,
}

/// Strata sharing an ambient space, plus named pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct StrataSet {
    pub ambient_dim: usize,
    pub strata: Vec<Arc<Stratum>>,
    pub pairs: Vec<PairSpec>,
    pub provenance: BTreeMap<String, Provenance>,
}

impl StrataSet {
    pub fn new(ambient_dim: usize, strata: Vec<Stratum>, pairs: Vec<PairSpec>) -> Result<Self> {
        Self::from_arcs(ambient_dim, strata.into_iter().map(Arc::new).collect(), pairs)
    }

    pub fn from_arcs(ambient_dim: usize, strata: Vec<Arc<Stratum>>, pairs: Vec<PairSpec>) -> Result<Self> {
        let set = StrataSet { ambient_dim, strata, pairs, provenance: BTreeMap::new() };
        set.check()?;
        Ok(set)
    }

    fn check(&self) -> Result<()> {
        if self.strata.is_empty() {
            return Err(Error::Invalid("set has no strata".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &self.strata {
            if !seen.insert(s.name.as_str()) {
                return Err(Error::Invalid(format!("duplicate stratum name `{}`", s.name)));
            }
            if s.ambient_dim != self.ambient_dim {
                return Err(Error::Dimension(format!(
                    "stratum `{}` lives in R^{} but the set is in R^{}",
                    s.name, s.ambient_dim, self.ambient_dim
                )));
            }
        }
        for p in &self.pairs {
            for n in p.x.iter().chain(std::iter::once(&p.y)) {
                if self.stratum(n).is_none() {
                    return Err(Error::Invalid(format!("pair `{}` refers to unknown stratum `{n}`", p.name)));
                }
            }
            if p.x.is_empty() {
                return Err(Error::Invalid(format!("pair `{}` has an empty X", p.name)));
            }
        }
        Ok(())
    }

    pub fn stratum(&self, name: &str) -> Option<&Arc<Stratum>> {
        self.strata.iter().find(|s| s.name == name)
    }

    fn spec(&self, query: &str) -> Option<&PairSpec> {
        self.pairs.iter().find(|p| p.name == query).or_else(|| {
            let (x, y) = query.split_once(',')?;
            self.pairs.iter().find(|p| p.y == y.trim() && p.x.join("+") == x.trim())
        })
    }

    /// Builds and validates a pair, looked up by name or as `"x,y"` with
    /// `x` the `+`-joined `X` names.
    pub fn pair(&self, query: &str) -> Result<PairXY> {
        let spec = self.spec(query).ok_or_else(|| Error::Invalid(format!("no pair named `{query}`")))?;
        let parts: Vec<&Arc<Stratum>> = spec.x.iter().map(|n| self.stratum(n).expect("checked")).collect();
        let x = if parts.len() == 1 {
            parts[0].clone()
        } else {
            let refs: Vec<&Stratum> = parts.iter().map(|a| a.as_ref()).collect();
            Arc::new(Stratum::union(spec.x.join("+"), &refs)?)
        };
        PairXY::new(spec.name.clone(), x, self.stratum(&spec.y).expect("checked").clone())
    }

    pub fn all_pairs(&self) -> Result<Vec<PairXY>> {
        self.pairs.iter().map(|p| self.pair(&p.name)).collect()
    }
}

// ---------------------------------------------------------------------------
// JSON schema
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SetDto {
    ambient_dim: usize,
    strata: Vec<StratumDto>,
    #[serde(default)]
    pairs: Vec<PairSpec>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    provenance: BTreeMap<String, Provenance>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StratumDto {
    name: String,
    patches: Vec<PatchDto>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum IntervalDto {
    Open([f64; 2]),
    Flagged(Interval),
}

impl From<&Interval> for IntervalDto {
    fn from(iv: &Interval) -> Self {
        if !iv.lo_closed && !iv.hi_closed {
            IntervalDto::Open([iv.lo, iv.hi])
        } else {
            IntervalDto::Flagged(*iv)
        }
    }
}

impl From<&IntervalDto> for Interval {
    fn from(d: &IntervalDto) -> Self {
        match d {
            IntervalDto::Open([lo, hi]) => Interval::open(*lo, *hi),
            IntervalDto::Flagged(iv) => *iv,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParametricDto {
    params: Vec<String>,
    map: Vec<String>,
    domain: Vec<IntervalDto>,
    #[serde(default)]
    inequalities: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum PatchDto {
    Parametric {
        params: Vec<String>,
        map: Vec<String>,
        domain: Vec<IntervalDto>,
        #[serde(default)]
        inequalities: Vec<String>,
    },
    Implicit {
        coords: Vec<String>,
        equalities: Vec<String>,
        #[serde(default)]
        inequalities: Vec<String>,
        bounds: Vec<[f64; 2]>,
    },
    Point {
        coords: Vec<f64>,
    },
    LevelCurve {
        base: ParametricDto,
        vertices: Vec<Vec<f64>>,
        closed: bool,
        #[serde(default)]
        level: Option<f64>,
    },
    LevelRegion {
        base: ParametricDto,
        /// Stratum whose tangent frames define the field.
        field: String,
        lo: f64,
        hi: f64,
        res: usize,
        /// `[stratum, patch]` references to bounding level curves.
        #[serde(default)]
        boundary: Vec<(String, usize)>,
    },
}

fn parse_exprs(texts: &[String], vars: &[String]) -> Result<Vec<Expression>> {
    texts
        .iter()
        .map(|t| Expression::parse_with_vars(t, vars).map_err(Error::from))
        .collect()
}

fn parametric_from_dto(d: &ParametricDto) -> Result<ParametricPatch> {
    ParametricPatch::new(
        d.params.clone(),
        parse_exprs(&d.map, &d.params)?,
        d.domain.iter().map(Interval::from).collect(),
        parse_exprs(&d.inequalities, &d.params)?,
    )
}

fn parametric_to_dto(p: &ParametricPatch) -> ParametricDto {
    ParametricDto {
        params: p.params.clone(),
        map: p.map.iter().map(|e| e.to_string()).collect(),
        domain: p.domain.iter().map(IntervalDto::from).collect(),
        inequalities: p.inequalities.iter().map(|e| e.to_string()).collect(),
    }
}

fn constant_value(e: &Expression) -> Option<f64> {
    match e.root() {
        Node::Const(c) => Some(*c),
        Node::Neg(inner) => match inner.as_ref() {
            Node::Const(c) => Some(-c),
            _ => None,
        },
        _ => None,
    }
}

fn patch_to_dto(p: &Patch, owner: &[Arc<Stratum>]) -> PatchDto {
    match p {
        Patch::Parametric(pp) if pp.params.is_empty() && pp.map.iter().all(|e| constant_value(e).is_some()) => {
            PatchDto::Point { coords: pp.map.iter().map(|e| constant_value(e).unwrap()).collect() }
        }
        Patch::Parametric(pp) => {
            let d = parametric_to_dto(pp);
            PatchDto::Parametric { params: d.params, map: d.map, domain: d.domain, inequalities: d.inequalities }
        }
        Patch::Implicit(ip) => PatchDto::Implicit {
            coords: ip.coords.clone(),
            equalities: ip.equalities.iter().map(|e| e.to_string()).collect(),
            inequalities: ip.inequalities.iter().map(|e| e.to_string()).collect(),
            bounds: ip.bounds.iter().map(|(a, b)| [*a, *b]).collect(),
        },
        Patch::LevelCurve(lc) => PatchDto::LevelCurve {
            base: parametric_to_dto(&lc.base),
            vertices: lc.vertices.iter().map(|v| v.as_slice().to_vec()).collect(),
            closed: lc.closed,
            level: lc.level,
        },
        Patch::LevelRegion(lr) => PatchDto::LevelRegion {
            base: parametric_to_dto(&lr.base),
            field: lr.field.y.name.clone(),
            lo: lr.lo,
            hi: lr.hi,
            res: lr.res,
            boundary: lr
                .boundary
                .iter()
                .filter_map(|c| {
                    owner.iter().find_map(|s| {
                        s.patches.iter().position(|q| matches!(q, Patch::LevelCurve(l) if l == c.as_ref())).map(|i| (s.name.clone(), i))
                    })
                })
                .collect(),
        },
    }
}

/// Serializes a set to its JSON description.
pub fn set_to_json(set: &StrataSet) -> String {
    let dto = SetDto {
        ambient_dim: set.ambient_dim,
        strata: set
            .strata
            .iter()
            .map(|s| StratumDto { name: s.name.clone(), patches: s.patches.iter().map(|p| patch_to_dto(p, &set.strata)).collect() })
            .collect(),
        pairs: set.pairs.clone(),
        provenance: set.provenance.clone(),
    };
    serde_json::to_string_pretty(&dto).expect("set serializes")
}

fn schema_err(path: String, message: impl Into<String>) -> Error {
    Error::Schema { path, message: message.into() }
}

/// Parses a JSON set description. Schema violations carry the JSON
/// pointer of the offending value.
pub fn set_from_json(text: &str) -> Result<StrataSet> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let dto: SetDto = serde_path_to_error::deserialize(de).map_err(|e| {
        let mut pointer = String::new();
        for seg in e.path().iter() {
            match seg {
                serde_path_to_error::Segment::Seq { index } => {
                    let _ = write!(pointer, "/{index}");
                }
                serde_path_to_error::Segment::Map { key } => {
                    let _ = write!(pointer, "/{}", key.replace('~', "~0").replace('/', "~1"));
                }
                serde_path_to_error::Segment::Enum { variant } => {
                    let _ = write!(pointer, "/{variant}");
                }
                serde_path_to_error::Segment::Unknown => pointer.push_str("/?"),
            }
        }
        schema_err(pointer, e.inner().to_string())
    })?;
    if dto.strata.is_empty() {
        return Err(schema_err("/strata".into(), "at least one stratum is required"));
    }
    let mut built: Vec<Option<Arc<Stratum>>> = vec![None; dto.strata.len()];
    // Two passes: level regions refer to other strata.
    for pass in 0..2 {
        for (si, sd) in dto.strata.iter().enumerate() {
            if built[si].is_some() {
                continue;
            }
            let has_region = sd.patches.iter().any(|p| matches!(p, PatchDto::LevelRegion { .. }));
            if has_region != (pass == 1) {
                continue;
            }
            if sd.patches.is_empty() {
                return Err(schema_err(format!("/strata/{si}/patches"), "at least one patch is required"));
            }
            let mut patches = Vec::new();
            for (pi, pd) in sd.patches.iter().enumerate() {
                let at = format!("/strata/{si}/patches/{pi}");
                let patch = build_patch(pd, &built, &dto).map_err(|e| match e {
                    Error::Schema { .. } => e,
                    other => schema_err(at.clone(), other.to_string()),
                })?;
                patches.push(patch);
            }
            let s = Stratum::new(sd.name.clone(), patches).map_err(|e| schema_err(format!("/strata/{si}"), e.to_string()))?;
            if s.ambient_dim != dto.ambient_dim {
                return Err(schema_err(
                    format!("/strata/{si}"),
                    format!("stratum lives in R^{} but ambient_dim is {}", s.ambient_dim, dto.ambient_dim),
                ));
            }
            built[si] = Some(Arc::new(s));
        }
    }
    let strata: Vec<Arc<Stratum>> = built.into_iter().map(|s| s.expect("both passes ran")).collect();
    for (i, p) in dto.pairs.iter().enumerate() {
        for n in p.x.iter().chain(std::iter::once(&p.y)) {
            if !strata.iter().any(|s| &s.name == n) {
                return Err(Error::Invalid(format!("/pairs/{i}: unknown stratum `{n}`")));
            }
        }
    }
    let mut set = StrataSet::from_arcs(dto.ambient_dim, strata, dto.pairs)?;
    set.provenance = dto.provenance;
    Ok(set)
}

fn build_patch(pd: &PatchDto, built: &[Option<Arc<Stratum>>], dto: &SetDto) -> Result<Patch> {
    let find = |name: &str| -> Result<Arc<Stratum>> {
        dto.strata
            .iter()
            .position(|s| s.name == name)
            .and_then(|i| built[i].clone())
            .ok_or_else(|| Error::Invalid(format!("unknown stratum `{name}`")))
    };
    Ok(match pd {
        PatchDto::Parametric { params, map, domain, inequalities } => Patch::Parametric(ParametricPatch::new(
            params.clone(),
            parse_exprs(map, params)?,
            domain.iter().map(Interval::from).collect(),
            parse_exprs(inequalities, params)?,
        )?),
        PatchDto::Implicit { coords, equalities, inequalities, bounds } => Patch::Implicit(ImplicitPatch::new(
            coords.clone(),
            parse_exprs(equalities, coords)?,
            parse_exprs(inequalities, coords)?,
            bounds.iter().map(|b| (b[0], b[1])).collect(),
        )?),
        PatchDto::Point { coords } => Patch::Parametric(ParametricPatch::point(coords)),
        PatchDto::LevelCurve { base, vertices, closed, level } => Patch::LevelCurve(LevelCurvePatch::new(
            parametric_from_dto(base)?,
            vertices.iter().map(|v| DVector::from_column_slice(v)).collect(),
            *closed,
            *level,
        )?),
        PatchDto::LevelRegion { base, field, lo, hi, res, boundary } => {
            let mut curves = Vec::new();
            for (name, idx) in boundary {
                let s = find(name)?;
                match s.patches.get(*idx) {
                    Some(Patch::LevelCurve(c)) => curves.push(Arc::new(c.clone())),
                    _ => return Err(Error::Invalid(format!("`{name}` patch {idx} is not a level curve"))),
                }
            }
            Patch::LevelRegion(LevelRegionPatch::new(
                parametric_from_dto(base)?,
                Arc::new(PaField::new(find(field)?)),
                *lo,
                *hi,
                *res,
                curves,
                None,
            )?)
        }
    })
}

pub fn load_set(path: impl AsRef<Path>) -> Result<StrataSet> {
    set_from_json(&std::fs::read_to_string(path)?)
}

pub fn save_set(set: &StrataSet, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, set_to_json(set) + "\n")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// reports
// ---------------------------------------------------------------------------

/// 17 significant digits, `.` decimal separator.
pub fn fmt17(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:.16e}")
    }
}

fn csv_header(dim: usize) -> String {
    let mut h = String::new();
    for i in 0..dim {
        let _ = write!(h, "y{i},");
    }
    h.push_str("status,score");
    for i in 0..dim {
        let _ = write!(h, ",dir{i}");
    }
    h
}

fn csv_row(v: &Verdict) -> String {
    let mut row = String::new();
    for c in v.y.iter() {
        row.push_str(&fmt17(*c));
        row.push(',');
    }
    row.push_str(v.status.as_str());
    row.push(',');
    row.push_str(&fmt17(v.score));
    for i in 0..v.y.len() {
        row.push(',');
        match &v.witness {
            Some(w) if w.direction.len() == v.y.len() => row.push_str(&fmt17(w.direction[i])),
            _ => row.push_str("nan"),
        }
    }
    row
}

/// CSV with one row per verdict: base point, status, score, witness
/// direction.
pub fn verdicts_csv(verdicts: &[Verdict]) -> String {
    let dim = verdicts.first().map(|v| v.y.len()).unwrap_or(0);
    let mut out = csv_header(dim);
    out.push('\n');
    for v in verdicts {
        out.push_str(&csv_row(v));
        out.push('\n');
    }
    out
}

pub fn report_csv(report: &FaultReport) -> String {
    verdicts_csv(&report.samples)
}

#[derive(Serialize)]
struct VerdictJson<'a> {
    y: &'a [f64],
    status: &'a str,
    score: Option<f64>,
    tol: f64,
    witness_direction: Option<&'a [f64]>,
    witness_family: Option<&'a str>,
    converged: Option<bool>,
    aperture: Option<f64>,
    pa_trace: Option<&'a [f64]>,
    pb_trace: Option<Vec<Option<f64>>>,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

fn verdict_json(v: &Verdict) -> VerdictJson<'_> {
    VerdictJson {
        y: v.y.as_slice(),
        status: v.status.as_str(),
        score: finite(v.score),
        tol: v.tol,
        witness_direction: v.witness.as_ref().map(|w| w.direction.as_slice()),
        witness_family: v.witness.as_ref().map(|w| w.family.as_str()),
        converged: v.witness.as_ref().map(|w| w.converged),
        aperture: v.witness.as_ref().map(|w| w.aperture),
        pa_trace: v.witness.as_ref().map(|w| w.pa_trace.as_slice()),
        pb_trace: v.witness.as_ref().map(|w| w.pb_trace.iter().map(|x| finite(*x)).collect()),
    }
}

pub fn verdicts_json(verdicts: &[Verdict]) -> String {
    let rows: Vec<VerdictJson<'_>> = verdicts.iter().map(verdict_json).collect();
    serde_json::to_string_pretty(&rows).expect("verdicts serialize")
}

pub fn report_json(report: &FaultReport) -> String {
    #[derive(Serialize)]
    struct ReportJson<'a> {
        pair: &'a str,
        condition: &'a str,
        tol: f64,
        seed: u64,
        fault_fraction: f64,
        inconclusive: usize,
        pitch: f64,
        isolated_faults: &'a [crate::whitney::FaultCluster],
        samples: Vec<VerdictJson<'a>>,
    }
    serde_json::to_string_pretty(&ReportJson {
        pair: &report.pair,
        condition: report.condition.as_str(),
        tol: report.tol,
        seed: report.seed,
        fault_fraction: report.fault_fraction,
        inconclusive: report.inconclusive,
        pitch: report.pitch,
        isolated_faults: &report.isolated_faults,
        samples: report.samples.iter().map(verdict_json).collect(),
    })
    .expect("report serializes")
}

// ---------------------------------------------------------------------------
// PLY
// ---------------------------------------------------------------------------

/// A colored point for mesh export.
#[derive(Debug, Clone, PartialEq)]
pub struct ColoredPoint {
    pub x: [f64; 3],
    pub rgb: [u8; 3],
}

/// Blue (0) to red (`max`) ramp.
pub fn ramp(value: f64, max: f64) -> [u8; 3] {
    let t = if max > 0.0 && value.is_finite() { (value / max).clamp(0.0, 1.0) } else { 0.0 };
    [(255.0 * t).round() as u8, (64.0 * (1.0 - (2.0 * t - 1.0).abs())).round() as u8, (255.0 * (1.0 - t)).round() as u8]
}

/// Samples of `X` colored by `p_a` (frame at the nearest point of `Y`), and
/// samples of `Y` in white.
pub fn pair_point_cloud(pair: &PairXY, n: usize, seed: u64) -> Result<Vec<ColoredPoint>> {
    if pair.x.ambient_dim > 3 {
        return Err(Error::Unsupported("PLY export needs ambient dimension at most 3".into()));
    }
    let field = PaField::new(pair.y.clone());
    let k = pair.y.dim() as f64;
    let pad = |x: &DVector<f64>| {
        let mut p = [0.0; 3];
        for (i, c) in x.iter().enumerate() {
            p[i] = *c;
        }
        p
    };
    let mut out = Vec::new();
    for p in pair.x.sample(n, seed).points {
        let v = field.eval_sample(&pair.x, &p).unwrap_or(f64::NAN);
        out.push(ColoredPoint { x: pad(&p.x), rgb: ramp(v, k.max(1.0)) });
    }
    for p in pair.y.sample(n / 4 + 1, seed).points {
        out.push(ColoredPoint { x: pad(&p.x), rgb: [255, 255, 255] });
    }
    Ok(out)
}

pub fn ply_string(points: &[ColoredPoint]) -> String {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\ncomment stratcheck point cloud, color = p_a\n");
    let _ = writeln!(s, "element vertex {}", points.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n");
    for p in points {
        let _ = writeln!(s, "{} {} {} {} {} {}", fmt17(p.x[0]), fmt17(p.x[1]), fmt17(p.x[2]), p.rgb[0], p.rgb[1], p.rgb[2]);
    }
    s
}
