//! Sampled ε-flatness of strata and subdivision into ε-flat pieces.
//!
//! A stratum is ε-flat when any two of its tangent spaces are within angle
//! `eps`. [`is_eps_flat`] checks this on samples; [`flatten`] bisects
//! parameter boxes along their longest edge until every piece passes.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grassmann::{angle, Subspace};
use crate::rng;
use crate::strata::{Interval, ParametricPatch, Patch, SamplePoint, Stratum};

/// Samples per piece while subdividing.
pub const FLAT_SAMPLES: usize = 24;
/// Density multiplier for the acceptance re-check of each piece.
pub const RECHECK_FACTOR: usize = 10;

#[derive(Debug, Clone)]
pub struct FlatCheck {
    pub flat: bool,
    /// Largest sampled angle between two tangent spaces.
    pub max_angle: f64,
    /// The two points realizing `max_angle`, if at least two were sampled.
    pub witness: Option<(SamplePoint, SamplePoint)>,
    pub samples: usize,
}

fn validate_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::Invalid(format!("eps must lie in (0, 1], got {eps}")));
    }
    Ok(())
}

/// Points slightly inside every corner of a parametric patch's box.
fn corner_samples(patch: &ParametricPatch, pi: usize) -> Vec<SamplePoint> {
    let m = patch.domain.len();
    if m == 0 || m > 4 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for mask in 0..(1usize << m) {
        let u: Vec<f64> = patch
            .domain
            .iter()
            .enumerate()
            .map(|(k, iv)| corner_coord(iv, mask >> k & 1 == 1))
            .collect();
        if !patch.domain.iter().zip(&u).all(|(iv, t)| iv.contains(*t)) {
            continue;
        }
        if !patch.inequalities.iter().all(|h| matches!(h.eval(&u), Ok(v) if v > 0.0)) {
            continue;
        }
        let x = patch.map.iter().map(|e| e.eval(&u)).collect::<std::result::Result<Vec<_>, _>>();
        if let Ok(x) = x {
            out.push(SamplePoint { x: DVector::from_vec(x), patch: pi, param: Some(DVector::from_vec(u)) });
        }
    }
    out
}

fn corner_coord(iv: &Interval, upper: bool) -> f64 {
    let nudge = 1e-9 * iv.width();
    match (upper, upper && iv.hi_closed || !upper && iv.lo_closed) {
        (false, true) => iv.lo,
        (false, false) => iv.lo + nudge,
        (true, true) => iv.hi,
        (true, false) => iv.hi - nudge,
    }
}

/// Checks ε-flatness on `n_samples` random points plus the corners of each
/// parametric box. Zero-dimensional strata are flat for every `eps`.
pub fn is_eps_flat(s: &Stratum, eps: f64, n_samples: usize, seed: u64) -> Result<FlatCheck> {
    validate_eps(eps)?;
    if n_samples < 2 {
        return Err(Error::Invalid("at least 2 samples are needed".into()));
    }
    if s.dim() == 0 {
        return Ok(FlatCheck { flat: true, max_angle: 0.0, witness: None, samples: 0 });
    }
    let mut points = s.sample(n_samples, seed).points;
    for (pi, patch) in s.patches.iter().enumerate() {
        if let Patch::Parametric(pp) = patch {
            points.extend(corner_samples(pp, pi));
        }
    }
    if points.is_empty() {
        return Err(Error::Degenerate(format!("no samples of `{}`", s.name)));
    }
    let tangents: Vec<Subspace> = points.iter().map(|p| s.tangent(p)).collect::<Result<_>>()?;
    let worst = (0..tangents.len())
        .into_par_iter()
        .map(|i| {
            let mut best = (0.0f64, i, i);
            for j in i + 1..tangents.len() {
                let d = angle(&tangents[i], &tangents[j]).unwrap_or(f64::INFINITY);
                if d > best.0 {
                    best = (d, i, j);
                }
            }
            best
        })
        // ties go to the smaller index pair so the witness is thread-count independent
        .reduce(
            || (0.0, 0, 0),
            |a, b| match b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))) {
                std::cmp::Ordering::Greater => b,
                _ => a,
            },
        );
    let witness = (points.len() >= 2).then(|| {
        let (i, j) = if worst.1 == worst.2 { (0, 1) } else { (worst.1, worst.2) };
        (points[i].clone(), points[j].clone())
    });
    Ok(FlatCheck { flat: worst.0 < eps, max_angle: worst.0, witness, samples: points.len() })
}

#[derive(Debug, Clone)]
struct Piece {
    patch: usize,
    domain: Vec<Interval>,
}

impl Piece {
    fn seed(&self, seed: u64) -> u64 {
        let bounds: Vec<f64> = self.domain.iter().flat_map(|iv| [iv.lo, iv.hi]).collect();
        rng::mix(seed ^ self.patch as u64, rng::hash_floats(&bounds))
    }

    fn split(&self) -> (Piece, Piece) {
        let axis = (0..self.domain.len())
            .max_by(|&a, &b| self.domain[a].width().total_cmp(&self.domain[b].width()).then(b.cmp(&a)))
            .expect("positive-dimensional box");
        let (lo, hi) = self.domain[axis].bisect();
        let mut a = self.clone();
        let mut b = self.clone();
        a.domain[axis] = lo;
        b.domain[axis] = hi;
        (a, b)
    }
}

enum Outcome {
    Accept(Stratum),
    Empty,
    Split(Piece, Piece),
}

/// Subdivides a parametric stratum into ε-flat pieces, each a one-patch
/// stratum over a sub-box. Shared faces go to the lower piece, so pieces
/// are disjoint and cover the original. Pieces come in patch order, then
/// lexicographic order of their boxes.
pub fn flatten(s: &Stratum, eps: f64, max_pieces: usize, seed: u64) -> Result<Vec<Stratum>> {
    validate_eps(eps)?;
    if max_pieces == 0 {
        return Err(Error::Invalid("max_pieces must be at least 1".into()));
    }
    let mut patches = Vec::with_capacity(s.patches.len());
    for p in &s.patches {
        match p {
            Patch::Parametric(pp) => patches.push(pp),
            _ => return Err(Error::Unsupported(format!("`{}` is not parametric", s.name))),
        }
    }
    if s.dim() == 0 {
        return Ok(vec![s.clone()]);
    }
    let build =
        |piece: &Piece| Stratum::parametric(s.name.clone(), patches[piece.patch].with_domain(piece.domain.clone()));
    let mut pending: Vec<Piece> =
        patches.iter().enumerate().map(|(i, p)| Piece { patch: i, domain: p.domain.clone() }).collect();
    let mut done: Vec<(Piece, Stratum)> = Vec::new();
    while !pending.is_empty() {
        if done.len() + pending.len() > max_pieces {
            return Err(Error::Budget(format!(
                "more than {max_pieces} pieces needed to make `{}` {eps}-flat",
                s.name
            )));
        }
        let outcomes: Vec<Result<Outcome>> = pending
            .par_iter()
            .map(|piece| {
                let st = build(piece)?;
                let pseed = piece.seed(seed);
                let Patch::Parametric(pp) = &st.patches[0] else { unreachable!() };
                if st.sample(4, pseed).points.is_empty() && corner_samples(pp, 0).is_empty() {
                    return Ok(Outcome::Empty);
                }
                let coarse = flat_or_tiny(&st, eps, FLAT_SAMPLES, pseed)?;
                if coarse && flat_or_tiny(&st, eps, FLAT_SAMPLES * RECHECK_FACTOR, pseed ^ 1)? {
                    Ok(Outcome::Accept(st))
                } else {
                    let (a, b) = piece.split();
                    Ok(Outcome::Split(a, b))
                }
            })
            .collect();
        let mut next = Vec::new();
        for (piece, outcome) in pending.into_iter().zip(outcomes) {
            match outcome? {
                Outcome::Accept(st) => done.push((piece, st)),
                Outcome::Empty => {}
                Outcome::Split(a, b) => {
                    next.push(a);
                    next.push(b);
                }
            }
        }
        pending = next;
    }
    done.sort_by(|(a, _), (b, _)| {
        a.patch.cmp(&b.patch).then_with(|| {
            a.domain
                .iter()
                .zip(&b.domain)
                .map(|(x, y)| x.lo.total_cmp(&y.lo))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let total = done.len();
    Ok(done
        .into_iter()
        .enumerate()
        .map(|(i, (_, mut st))| {
            if total > 1 {
                st.name = format!("{}.{}", st.name, i);
            }
            st
        })
        .collect())
}

/// Flatness of a piece, treating a piece with too few admissible points
/// to compare as flat.
fn flat_or_tiny(s: &Stratum, eps: f64, n: usize, seed: u64) -> Result<bool> {
    match is_eps_flat(s, eps, n, seed) {
        Ok(c) => Ok(c.flat),
        Err(Error::Degenerate(_)) => Ok(true),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn point_is_flat() {
        let p = Stratum::point("p", &[1.0, 2.0]);
        assert!(is_eps_flat(&p, 1e-9, 2, 0).unwrap().flat);
        assert_eq!(flatten(&p, 0.1, 1, 0).unwrap().len(), 1);
    }

    #[test]
    fn circle_needs_pieces() {
        let c = fixtures::unit_circle();
        let check = is_eps_flat(&c, 0.5, 64, 3).unwrap();
        assert!(!check.flat);
        assert!(check.max_angle > 0.9);
        let pieces = flatten(&c, 0.5, 64, 3).unwrap();
        assert!((12..=64).contains(&pieces.len()), "{}", pieces.len());
        assert!(matches!(flatten(&c, 0.5, 4, 3), Err(Error::Budget(_))));
    }

    #[test]
    fn bad_eps() {
        let c = fixtures::unit_circle();
        assert!(is_eps_flat(&c, 0.0, 8, 0).is_err());
        assert!(is_eps_flat(&c, 1.5, 8, 0).is_err());
    }
}
