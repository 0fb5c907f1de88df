//! The Kuo functions `p_a`, `p_b'` and `p_b`.
//!
//! With `e_1..e_k` an orthonormal frame of `T_y Y` and `N_x X` the normal
//! space of `X` at `x`:
//!
//! * `p_a(x)  = sum_i |pi_N(e_i)|^2`, in `[0, k]`,
//! * `p_b'(x) = |pi_N(s(x))|^2` where `s(x)` is the unit secant from the
//!   nearest point of `Y` to `x`, in `[0, 1]`,
//! * `p_b = p_a + p_b'`.
//!
//! Both vanish in the limit along every good sequence exactly when the
//! corresponding Whitney condition holds.

use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::grassmann::{symmetric_angle, Subspace};
use crate::strata::{LevelGrid, PairXY, ParametricPatch, SamplePoint, Stratum};

/// Shortest secant for which `p_b'` is defined.
pub const MIN_SECANT: f64 = 1e-12;

/// `p_a` from a frame of `T_y Y` and the tangent space `T_x X`.
pub fn p_a_from(frame: &Subspace, tangent: &Subspace) -> f64 {
    let k = frame.dim();
    let mut sum = 0.0;
    for i in 0..k {
        let e = frame.frame().column(i).into_owned();
        let r = tangent.residual_norm(&e).expect("ambient dimensions agree");
        sum += (r * r).min(1.0);
    }
    sum.clamp(0.0, k as f64)
}

/// `p_b'` from a unit secant and the tangent space `T_x X`.
pub fn p_b_prime_from(secant: &DVector<f64>, tangent: &Subspace) -> f64 {
    let r = tangent.residual_norm(secant).expect("ambient dimensions agree");
    (r * r).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KuoValues {
    pub pa: f64,
    pub pb_prime: f64,
    pub pb: f64,
}

impl KuoValues {
    pub fn new(pa: f64, pb_prime: f64) -> Self {
        KuoValues { pa, pb_prime, pb: pa + pb_prime }
    }
}

/// A pair together with a base point `y` and a frame of `T_y Y`.
#[derive(Debug, Clone)]
pub struct KuoContext<'a> {
    pub pair: &'a PairXY,
    pub y: DVector<f64>,
    pub frame: Subspace,
}

impl<'a> KuoContext<'a> {
    /// Locates `y` on `Y` and takes the cached tangent frame there.
    pub fn new(pair: &'a PairXY, y: &DVector<f64>) -> Result<Self> {
        let frame = pair.frame_at(y)?;
        Ok(KuoContext { pair, y: y.clone(), frame })
    }

    /// Uses a caller-supplied orthonormal frame, which must span `T_y Y`.
    pub fn with_frame(pair: &'a PairXY, y: &DVector<f64>, frame: Subspace) -> Result<Self> {
        let reference = pair.frame_at(y)?;
        if frame.dim() != reference.dim() || symmetric_angle(&frame, &reference)? > 1e-9 {
            return Err(Error::Invalid("frame does not span the tangent space of Y at y".into()));
        }
        Ok(KuoContext { pair, y: y.clone(), frame })
    }

    pub fn k(&self) -> usize {
        self.frame.dim()
    }

    pub fn p_a(&self, x: &SamplePoint) -> Result<f64> {
        let t = self.pair.x.tangent(x)?;
        Ok(p_a_from(&self.frame, &t))
    }

    /// Unit secant `(x - pi_Y(x)) / |x - pi_Y(x)|`.
    pub fn secant(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let foot = self.pair.project_to_y(x)?;
        let d = x - foot;
        let n = d.norm();
        if n <= MIN_SECANT {
            return Err(Error::Degenerate(format!("point is within {n:e} of Y; secant undefined")));
        }
        Ok(d / n)
    }

    pub fn p_b_prime(&self, x: &SamplePoint) -> Result<f64> {
        let t = self.pair.x.tangent(x)?;
        Ok(p_b_prime_from(&self.secant(&x.x)?, &t))
    }

    pub fn p_b(&self, x: &SamplePoint) -> Result<f64> {
        Ok(self.values(x)?.pb)
    }

    pub fn values(&self, x: &SamplePoint) -> Result<KuoValues> {
        let t = self.pair.x.tangent(x)?;
        self.values_with_tangent(x, &t)
    }

    pub fn values_with_tangent(&self, x: &SamplePoint, tangent: &Subspace) -> Result<KuoValues> {
        let pa = p_a_from(&self.frame, tangent);
        let pbp = p_b_prime_from(&self.secant(&x.x)?, tangent);
        Ok(KuoValues::new(pa, pbp))
    }
}

/// `p_a` as a field on all of `X`, with the frame taken at the nearest
/// point of `Y`. This is the function whose level sets the refinement loop
/// slices along.
#[derive(Debug)]
pub struct PaField {
    pub y: Arc<Stratum>,
}

impl PartialEq for PaField {
    fn eq(&self, other: &Self) -> bool {
        self.y == other.y
    }
}

impl PaField {
    pub fn new(y: Arc<Stratum>) -> Self {
        PaField { y }
    }

    pub fn eval(&self, x: &DVector<f64>, tangent: &Subspace) -> Result<f64> {
        let foot = self.y.nearest_point(x)?;
        let frame = self.y.tangent(&foot)?;
        Ok(p_a_from(&frame, tangent))
    }

    pub fn eval_sample(&self, x_stratum: &Stratum, p: &SamplePoint) -> Result<f64> {
        self.eval(&p.x, &x_stratum.tangent(p)?)
    }

    /// The field composed with a parametrization.
    pub fn eval_param(&self, base: &ParametricPatch, u: &[f64]) -> Result<f64> {
        use crate::strata::Chart;
        let (x, j) = base.jacobian(u)?;
        let t = Subspace::column_space(&j)?;
        self.eval(&x, &t)
    }

    /// Field values on the `(res + 1)^m` lattice of the closed parameter box.
    pub fn grid(&self, base: &ParametricPatch, res: usize) -> LevelGrid {
        let lo: Vec<f64> = base.domain.iter().map(|iv| iv.lo).collect();
        let hi: Vec<f64> = base.domain.iter().map(|iv| iv.hi).collect();
        let m = lo.len();
        let side = res + 1;
        let total = side.pow(m as u32);
        let mut grid = LevelGrid { lo, hi, res, values: Vec::new() };
        let values: Vec<f64> = {
            use rayon::prelude::*;
            (0..total)
                .into_par_iter()
                .map(|flat| {
                    let mut idx = vec![0; m];
                    let mut rest = flat;
                    for a in (0..m).rev() {
                        idx[a] = rest % side;
                        rest /= side;
                    }
                    let u = grid.node(&idx);
                    self.eval_param(base, &u).unwrap_or(f64::NAN)
                })
                .collect()
        };
        grid.values = values;
        grid
    }
}
