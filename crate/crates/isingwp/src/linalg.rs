//! Hermitian eigensolvers and Krylov propagation for operators given as closures.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::C64;

const ZERO: C64 = C64::new(0.0, 0.0);

fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm(a: &[C64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

fn axpy(y: &mut [C64], alpha: C64, x: &[C64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}

/// Ascending eigenvalues and matching eigenvector columns of a Hermitian matrix.
pub fn dense_eigh(m: DMatrix<C64>) -> (Vec<f64>, DMatrix<C64>) {
    let n = m.nrows();
    let eig = m.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

/// `exp(−iHt)` for a Hermitian matrix.
pub fn expm_hermitian(h: &DMatrix<C64>, t: f64) -> DMatrix<C64> {
    let (vals, vecs) = dense_eigh(h.clone());
    let phases = DMatrix::from_diagonal(&DVector::from_iterator(
        vals.len(),
        vals.iter().map(|&e| C64::from_polar(1.0, -e * t)),
    ));
    &vecs * phases * vecs.adjoint()
}

/// Settings for [`lanczos_lowest`].
#[derive(Clone, Copy, Debug)]
pub struct LanczosOptions {
    /// Residual tolerance `‖Hv − λv‖` for every requested pair.
    pub tol: f64,
    /// Krylov dimension before a thick restart from the current Ritz vectors.
    pub max_basis: usize,
    pub max_restarts: usize,
}

impl Default for LanczosOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_basis: 160, max_restarts: 40 }
    }
}

/// Lowest `nev` eigenpairs of a Hermitian operator of dimension `dim` by Lanczos with full
/// reorthogonalisation, restarted from the Ritz vectors when the basis fills up.
pub fn lanczos_lowest<F>(apply: F, dim: usize, nev: usize, start: &[C64], opts: LanczosOptions) -> Result<(Vec<f64>, Vec<Vec<C64>>)>
where
    F: Fn(&[C64]) -> Vec<C64>,
{
    assert!(nev >= 1 && nev <= dim, "bad eigenpair count");
    let max_basis = opts.max_basis.min(dim).max(nev + 1).min(dim);
    let mut basis: Vec<Vec<C64>> = Vec::new();
    let mut seed = start.to_vec();
    let mut last_residual = f64::INFINITY;
    for restart in 0..=opts.max_restarts {
        // Orthonormalise the retained vectors plus the seed.
        let mut v: Vec<Vec<C64>> = Vec::new();
        for mut x in basis.drain(..).chain(std::iter::once(seed.clone())) {
            for _ in 0..2 {
                for q in &v {
                    let c = dot(q, &x);
                    axpy(&mut x, -c, q);
                }
            }
            let nx = norm(&x);
            if nx > 1e-12 {
                x.iter_mut().for_each(|a| *a /= nx);
                v.push(x);
            }
        }
        if v.is_empty() {
            return Err(Error::NoConvergence { residual: f64::NAN, iterations: 0 });
        }
        let mut w: Vec<Vec<C64>> = v.iter().map(|x| apply(x)).collect();
        let mut next = w.last().unwrap().clone();
        loop {
            // Extend with a new direction from the last image.
            for _ in 0..2 {
                for q in &v {
                    let c = dot(q, &next);
                    axpy(&mut next, -c, q);
                }
            }
            let nn = norm(&next);
            if v.len() >= max_basis || nn < 1e-12 {
                break;
            }
            next.iter_mut().for_each(|a| *a /= nn);
            let img = apply(&next);
            v.push(next);
            w.push(img);
            next = w.last().unwrap().clone();
        }
        // Rayleigh–Ritz on span(v).
        let m = v.len();
        let proj = DMatrix::from_fn(m, m, |i, j| dot(&v[i], &w[j]));
        let proj = (&proj + proj.adjoint()) * C64::new(0.5, 0.0);
        let (vals, vecs) = dense_eigh(proj);
        let take = nev.min(m);
        let mut ritz = Vec::with_capacity(take);
        let mut residual = 0.0f64;
        for c in 0..take {
            let mut x = vec![ZERO; dim];
            let mut hx = vec![ZERO; dim];
            for i in 0..m {
                let s = vecs[(i, c)];
                axpy(&mut x, s, &v[i]);
                axpy(&mut hx, s, &w[i]);
            }
            axpy(&mut hx, C64::new(-vals[c], 0.0), &x);
            residual = residual.max(norm(&hx));
            ritz.push((x, hx));
        }
        last_residual = residual;
        if take == nev && (residual < opts.tol || m == dim) {
            return Ok((vals[..nev].to_vec(), ritz.into_iter().map(|(x, _)| x).collect()));
        }
        // Thick restart: keep the Ritz vectors, seed with the worst residual direction.
        let worst = ritz
            .iter()
            .max_by(|a, b| norm(&a.1).total_cmp(&norm(&b.1)))
            .map(|r| r.1.clone())
            .unwrap();
        basis = ritz.into_iter().map(|r| r.0).collect();
        seed = worst;
        if restart == opts.max_restarts {
            break;
        }
    }
    Err(Error::NoConvergence { residual: last_residual, iterations: opts.max_restarts })
}

/// `exp(−iHt)ψ` by short Lanczos recurrences with step halving until the
/// truncated-Krylov error estimate is below `tol` per unit time.
pub fn expm_multiply<F>(apply: F, psi: &[C64], t: f64, tol: f64) -> Vec<C64>
where
    F: Fn(&[C64]) -> Vec<C64>,
{
    const M: usize = 30;
    let mut out = psi.to_vec();
    let mut done = 0.0;
    let mut dt = t;
    while (t - done).abs() > 1e-15 * t.abs().max(1.0) {
        let step = if (done + dt - t) * t.signum() > 0.0 { t - done } else { dt };
        let beta0 = norm(&out);
        if beta0 == 0.0 {
            return out;
        }
        let mut v: Vec<Vec<C64>> = vec![out.iter().map(|a| a / beta0).collect()];
        let mut alpha = Vec::new();
        let mut beta: Vec<f64> = Vec::new();
        let mut breakdown = false;
        for j in 0..M {
            let mut w = apply(&v[j]);
            let a = dot(&v[j], &w).re;
            alpha.push(a);
            axpy(&mut w, C64::new(-a, 0.0), &v[j]);
            if j > 0 {
                axpy(&mut w, C64::new(-beta[j - 1], 0.0), &v[j - 1]);
            }
            for q in &v {
                let c = dot(q, &w);
                axpy(&mut w, -c, q);
            }
            let b = norm(&w);
            beta.push(b);
            if b < 1e-13 {
                breakdown = true;
                break;
            }
            w.iter_mut().for_each(|x| *x /= b);
            v.push(w);
        }
        let m = alpha.len();
        let tri = DMatrix::from_fn(m, m, |i, j| {
            if i == j {
                C64::new(alpha[i], 0.0)
            } else if i + 1 == j {
                C64::new(beta[i], 0.0)
            } else if j + 1 == i {
                C64::new(beta[j], 0.0)
            } else {
                ZERO
            }
        });
        let e = expm_hermitian(&tri, step);
        let err = if breakdown { 0.0 } else { beta[m - 1] * e[(m - 1, 0)].norm() };
        if err > tol * step.abs().max(1e-3) && step.abs() > 1e-8 {
            dt = step / 2.0;
            continue;
        }
        let mut next = vec![ZERO; out.len()];
        for i in 0..m {
            axpy(&mut next, e[(i, 0)] * beta0, &v[i]);
        }
        out = next;
        done += step;
        if err < 0.1 * tol * step.abs() {
            dt = step * 1.5;
        }
    }
    out
}
