//! Dense reference constructions shared by the integration suites. They build matrices
//! bit by bit and never go through the library's own operator application.

#![allow(dead_code)]

use std::f64::consts::PI;

use isingwp::model::{Boundary, IsingModel};
use isingwp::pauli::{Pauli, PauliString};
use isingwp::wstate::WCoefficients;
use isingwp::C64;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `P|i⟩ = phase·|j⟩` for one basis index, qubit `q` on bit `q`.
fn pauli_action(p: &PauliString, i: usize) -> (usize, C64) {
    let mut j = i;
    let mut phase = C64::new(p.coeff, 0.0);
    for &(q, f) in p.factors() {
        let bit = (i >> q) & 1;
        match f {
            Pauli::X => j ^= 1 << q,
            Pauli::Y => {
                j ^= 1 << q;
                phase *= if bit == 0 { C64::new(0.0, 1.0) } else { C64::new(0.0, -1.0) };
            }
            Pauli::Z => {
                if bit == 1 {
                    phase = -phase;
                }
            }
        }
    }
    (j, phase)
}

pub fn dense(terms: &[PauliString], n: usize) -> DMatrix<C64> {
    let dim = 1 << n;
    let mut m = DMatrix::zeros(dim, dim);
    for p in terms {
        for i in 0..dim {
            let (j, a) = pauli_action(p, i);
            m[(j, i)] += a;
        }
    }
    m
}

/// `−Σ Z_nZ_{n+1} − g_x Σ X_n − g_z Σ Z_n` written out site by site.
pub fn dense_ising(model: &IsingModel) -> DMatrix<C64> {
    let l = model.l;
    let mut terms = Vec::new();
    let bonds = match model.boundary {
        Boundary::Pbc => l,
        Boundary::Obc => l - 1,
    };
    for n in 0..bonds {
        terms.push(PauliString::new(-1.0, [(n, Pauli::Z), ((n + 1) % l, Pauli::Z)]));
    }
    for n in 0..l {
        terms.push(PauliString::single(-model.gx, n, Pauli::X));
        terms.push(PauliString::single(-model.gz, n, Pauli::Z));
    }
    dense(&terms, l)
}

/// `exp(−i t H)` for Hermitian `H` by full diagonalization.
pub fn expm_i(h: &DMatrix<C64>, t: f64) -> DMatrix<C64> {
    let eig = SymmetricEigen::new(h.clone());
    let v = &eig.eigenvectors;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|e| C64::from_polar(1.0, -e * t)));
    v * d * v.adjoint()
}

pub fn eigenvalues(h: &DMatrix<C64>) -> Vec<f64> {
    let mut e: Vec<f64> = SymmetricEigen::new(h.clone()).eigenvalues.iter().copied().collect();
    e.sort_by(f64::total_cmp);
    e
}

/// One-site translation `|b₀…b_{L−1}⟩ → |b_{L−1}b₀…⟩` as a permutation matrix.
pub fn translation(l: usize) -> DMatrix<C64> {
    let dim = 1 << l;
    let mut t = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        let j = ((i << 1) | (i >> (l - 1))) & (dim - 1);
        t[(j, i)] = C64::new(1.0, 0.0);
    }
    t
}

pub fn max_abs(m: &DMatrix<C64>) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_coeffs(d: usize, rng: &mut ChaCha8Rng) -> WCoefficients {
    let raw: Vec<C64> = (0..d).map(|_| C64::from_polar(rng.gen_range(0.05..1.0), rng.gen_range(-PI..PI))).collect();
    let n = raw.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
    WCoefficients::from_amplitudes(&raw.iter().map(|a| a / n).collect::<Vec<_>>()).unwrap()
}

/// Random magnitudes mirrored about the window center, with momentum phases.
pub fn symmetric_coeffs(d: usize, k0: f64, rng: &mut ChaCha8Rng) -> WCoefficients {
    let half: Vec<f64> = (0..d.div_ceil(2)).map(|_| rng.gen_range(0.1..1.0)).collect();
    let mags: Vec<f64> = (0..d).map(|j| half[j.min(d - 1 - j)]).collect();
    let n = mags.iter().map(|m| m * m).sum::<f64>().sqrt();
    let amps: Vec<C64> = mags.iter().enumerate().map(|(j, m)| C64::from_polar(m / n, k0 * j as f64)).collect();
    WCoefficients::from_amplitudes(&amps).unwrap()
}

/// Free-fermion single-particle energy `2√(1 + g² − 2g cos k)`.
pub fn free_energy(g: f64, k: f64) -> f64 {
    2.0 * (1.0 + g * g - 2.0 * g * k.cos()).sqrt()
}
