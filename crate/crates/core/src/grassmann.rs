//! Linear subspaces of `R^n` stored as orthonormal frames.
//!
//! The angle used throughout is the asymmetric
//! `delta(P, Q) = sup_{|l| = 1, l in P} |l - pi_Q(l)|`, i.e. the sine of the
//! largest principal angle from `P` into `Q`. It is zero when `P` is
//! contained in `Q` and one when `P` has a direction orthogonal to `Q`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Subspace {
    ambient: usize,
    /// `ambient x dim`, orthonormal columns.
    frame: DMatrix<f64>,
}

impl Subspace {
    pub fn zero(ambient: usize) -> Self {
        Subspace {
            ambient,
            frame: DMatrix::zeros(ambient, 0),
        }
    }

    pub fn full(ambient: usize) -> Self {
        Subspace {
            ambient,
            frame: DMatrix::identity(ambient, ambient),
        }
    }

    /// Span of `vectors`. Linearly dependent vectors (relative residual below
    /// `1e-10`) are dropped, so the result may have fewer columns than inputs.
    pub fn span(ambient: usize, vectors: &[DVector<f64>]) -> Result<Self> {
        let mut cols: Vec<DVector<f64>> = Vec::with_capacity(vectors.len());
        for v in vectors {
            if v.len() != ambient {
                return Err(Error::Dimension(format!(
                    "vector of length {} in R^{ambient}",
                    v.len()
                )));
            }
            let scale = v.norm();
            if scale == 0.0 {
                continue;
            }
            let w = orthogonalize(v.clone(), &cols);
            let n = w.norm();
            if n > RANK_TOL * scale {
                cols.push(w / n);
            }
        }
        Ok(Self::from_unit_columns(ambient, &cols))
    }

    /// Column space of `m`, which must have full column rank.
    pub fn column_space(m: &DMatrix<f64>) -> Result<Self> {
        let vectors: Vec<DVector<f64>> = m.column_iter().map(|c| c.into_owned()).collect();
        let s = Self::span(m.nrows(), &vectors)?;
        if s.dim() != m.ncols() {
            return Err(Error::RankDeficient(format!(
                "{} columns span only {} dimensions",
                m.ncols(),
                s.dim()
            )));
        }
        Ok(s)
    }

    /// Wraps an existing frame after checking `F^T F = I` within `1e-10`.
    pub fn from_orthonormal(frame: DMatrix<f64>) -> Result<Self> {
        let gram = frame.transpose() * &frame;
        let err = (gram - DMatrix::identity(frame.ncols(), frame.ncols())).amax();
        if err > 1e-10 {
            return Err(Error::Invalid(format!("frame is not orthonormal (error {err:e})")));
        }
        Ok(Subspace {
            ambient: frame.nrows(),
            frame,
        })
    }

    fn from_unit_columns(ambient: usize, cols: &[DVector<f64>]) -> Self {
        let mut frame = DMatrix::zeros(ambient, cols.len());
        for (j, c) in cols.iter().enumerate() {
            frame.set_column(j, c);
        }
        Subspace { ambient, frame }
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient
    }

    pub fn dim(&self) -> usize {
        self.frame.ncols()
    }

    pub fn frame(&self) -> &DMatrix<f64> {
        &self.frame
    }

    pub fn basis(&self) -> impl Iterator<Item = DVector<f64>> + '_ {
        self.frame.column_iter().map(|c| c.into_owned())
    }

    fn check_vector(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.ambient {
            return Err(Error::Dimension(format!(
                "vector of length {} projected in R^{}",
                v.len(),
                self.ambient
            )));
        }
        Ok(())
    }

    /// Orthogonal projection `F (F^T v)`.
    pub fn project(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_vector(v)?;
        Ok(&self.frame * (self.frame.tr_mul(v)))
    }

    /// Squared norm of the projection, `|F^T v|^2`.
    pub fn project_norm_sq(&self, v: &DVector<f64>) -> Result<f64> {
        self.check_vector(v)?;
        Ok(self.frame.tr_mul(v).norm_squared())
    }

    /// `|v - pi(v)|`, computed without forming the projection.
    pub fn residual_norm(&self, v: &DVector<f64>) -> Result<f64> {
        self.check_vector(v)?;
        let coeffs = self.frame.tr_mul(v);
        Ok((v - &self.frame * coeffs).norm())
    }

    pub fn orthogonal_complement(&self) -> Subspace {
        let n = self.ambient;
        let target = n - self.dim();
        let mut cols: Vec<DVector<f64>> = Vec::with_capacity(target);
        let mut candidates: Vec<DVector<f64>> = (0..n)
            .map(|i| {
                let e = DVector::from_fn(n, |r, _| if r == i { 1.0 } else { 0.0 });
                let coeffs = self.frame.tr_mul(&e);
                e - &self.frame * coeffs
            })
            .collect();
        while cols.len() < target {
            // greedy pivot: the candidate with the largest remaining component
            let (best, _) = candidates
                .iter()
                .enumerate()
                .map(|(i, c)| (i, orthogonalize(c.clone(), &cols).norm()))
                .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            let mut w = candidates.swap_remove(best);
            w = orthogonalize(w, &cols);
            let coeffs = self.frame.tr_mul(&w);
            w -= &self.frame * coeffs;
            w = orthogonalize(w, &cols);
            let nrm = w.norm();
            cols.push(w / nrm);
        }
        Self::from_unit_columns(n, &cols)
    }

    /// Direct sum with `other` (the span of both frames).
    pub fn sum(&self, other: &Subspace) -> Result<Subspace> {
        if self.ambient != other.ambient {
            return Err(Error::Dimension("subspaces in different ambient spaces".into()));
        }
        let vectors: Vec<DVector<f64>> = self.basis().chain(other.basis()).collect();
        Subspace::span(self.ambient, &vectors)
    }
}

/// Modified Gram-Schmidt against orthonormal `basis`, two passes.
fn orthogonalize(mut w: DVector<f64>, basis: &[DVector<f64>]) -> DVector<f64> {
    for _ in 0..2 {
        for q in basis {
            let c = q.dot(&w);
            w.axpy(-c, q, 1.0);
        }
    }
    w
}

/// `delta(P, Q)`: the operator norm of `(I - pi_Q)` restricted to `P`.
/// The zero subspace has angle 0 to everything.
pub fn angle(p: &Subspace, q: &Subspace) -> Result<f64> {
    if p.ambient != q.ambient {
        return Err(Error::Dimension(format!(
            "angle between subspaces of R^{} and R^{}",
            p.ambient, q.ambient
        )));
    }
    if p.dim() == 0 {
        return Ok(0.0);
    }
    let coeffs = q.frame.tr_mul(&p.frame);
    let residual = &p.frame - &q.frame * coeffs;
    let top = if residual.ncols() == 1 {
        residual.column(0).norm()
    } else {
        residual
            .svd(false, false)
            .singular_values
            .iter()
            .cloned()
            .fold(0.0, f64::max)
    };
    Ok(top.clamp(0.0, 1.0))
}

/// `max(delta(P, Q), delta(Q, P))`; a metric on each Grassmannian.
pub fn symmetric_angle(p: &Subspace, q: &Subspace) -> Result<f64> {
    Ok(angle(p, q)?.max(angle(q, p)?))
}

#[derive(Debug, Clone)]
pub struct GrassmannLimit {
    pub limit: Subspace,
    pub converged: bool,
    /// Largest pairwise angle inside the convergence window.
    pub tail_spread: f64,
}

/// Minimum number of elements in the convergence window.
pub const MIN_WINDOW: usize = 4;

/// Length of the trailing window used for Cauchy tests: a quarter of the
/// sequence, at least [`MIN_WINDOW`], never more than the sequence.
pub fn tail_window(len: usize) -> usize {
    (len / 4).max(MIN_WINDOW).min(len)
}

/// Tests whether the tail of `seq` is Cauchy in the angle metric: every pair
/// in the last quarter (at least four elements) is closer than `tol`.
pub fn grassmann_limit(seq: &[Subspace], tol: f64) -> Result<GrassmannLimit> {
    let last = seq
        .last()
        .ok_or_else(|| Error::Invalid("empty subspace sequence".into()))?;
    let (dim, ambient) = (last.dim(), last.ambient);
    if seq.iter().any(|s| s.dim() != dim || s.ambient != ambient) {
        return Err(Error::Dimension("subspace sequence mixes dimensions".into()));
    }
    let window = &seq[seq.len() - tail_window(seq.len())..];
    let mut spread: f64 = 0.0;
    for (i, a) in window.iter().enumerate() {
        for b in &window[i + 1..] {
            spread = spread.max(angle(a, b)?);
        }
    }
    Ok(GrassmannLimit {
        limit: last.clone(),
        converged: window.len() >= 2 && spread < tol,
        tail_spread: spread,
    })
}
