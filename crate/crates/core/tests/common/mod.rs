//! Independent oracles shared by the integration tests. Nothing here calls
//! into the library's linear algebra.

#![allow(dead_code)]

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stratcheck::Subspace;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Classical Gram-Schmidt, run twice per vector; drops near-dependent inputs.
pub fn gram_schmidt(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        let mut w = v.clone();
        for _ in 0..2 {
            for q in &out {
                let c = dot(&w, q);
                w.iter_mut().zip(q).for_each(|(a, b)| *a -= c * b);
            }
        }
        let n = norm(&w);
        if n > 1e-8 * norm(v).max(1e-300) {
            out.push(w.into_iter().map(|x| x / n).collect());
        }
    }
    out
}

/// Distance from `v` to the span of the orthonormal `basis`.
pub fn residual(v: &[f64], basis: &[Vec<f64>]) -> f64 {
    let mut w = v.to_vec();
    for q in basis {
        let c = dot(v, q);
        w.iter_mut().zip(q).for_each(|(a, b)| *a -= c * b);
    }
    norm(&w)
}

/// Sup of the residual over `samples` random unit vectors of span `p`,
/// plus the basis vectors themselves.
pub fn brute_angle(p: &[Vec<f64>], q: &[Vec<f64>], samples: usize, rng: &mut ChaCha8Rng) -> f64 {
    if p.is_empty() {
        return 0.0;
    }
    let n = p[0].len();
    let mut best = p.iter().map(|b| residual(b, q)).fold(0.0, f64::max);
    for _ in 0..samples {
        let c = random_vector(rng, p.len());
        let cn = norm(&c);
        if cn < 1e-12 {
            continue;
        }
        let mut u = vec![0.0; n];
        for (ci, b) in c.iter().zip(p) {
            u.iter_mut().zip(b).for_each(|(a, x)| *a += ci / cn * x);
        }
        best = best.max(residual(&u, q));
    }
    best
}

pub fn subspace(n: usize, vectors: &[Vec<f64>]) -> Subspace {
    let vs: Vec<DVector<f64>> = vectors.iter().map(|v| DVector::from_vec(v.clone())).collect();
    Subspace::span(n, &vs).unwrap()
}

/// A random subspace of dimension `d` in R^n with its independent basis.
pub fn random_subspace(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (Subspace, Vec<Vec<f64>>) {
    loop {
        let vs: Vec<Vec<f64>> = (0..d).map(|_| random_vector(rng, n)).collect();
        let basis = gram_schmidt(&vs);
        if basis.len() == d {
            return (subspace(n, &vs), basis);
        }
    }
}

/// A subspace of dimension `d` containing the columns of `inner`.
pub fn random_superspace(rng: &mut ChaCha8Rng, n: usize, inner: &[Vec<f64>], d: usize) -> (Subspace, Vec<Vec<f64>>) {
    loop {
        let mut vs = inner.to_vec();
        while vs.len() < d {
            vs.push(random_vector(rng, n));
        }
        let basis = gram_schmidt(&vs);
        if basis.len() == d {
            return (subspace(n, &vs), basis);
        }
    }
}

pub fn point(c: &[f64]) -> DVector<f64> {
    DVector::from_row_slice(c)
}
