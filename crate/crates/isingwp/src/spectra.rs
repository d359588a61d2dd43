//! Exact diagonalization in translation-momentum blocks, single-particle states,
//! exact wavepackets, dispersion and inelastic kinematics.
//!
//! Momentum basis: `|r, k⟩ = ℓ^{−½} Σ_{j<ℓ} e^{ikj} Tʲ|r⟩` for an orbit of period `ℓ` with
//! representative `r` (its smallest member), kept only when `e^{ikℓ} = 1`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dense_eigh, lanczos_lowest, LanczosOptions};
use crate::model::{hamiltonian_terms, Boundary, IsingModel};
use crate::sim::{translate, StateVector};
use crate::wstate::WavepacketSpec;
use crate::C64;

/// Blocks up to this dimension are diagonalized densely.
pub const DENSE_LIMIT: usize = 400;

/// Largest lattice accepted by the block builders.
pub const MAX_SITES: usize = 24;

/// Translation orbits of all `2^L` computational states.
#[derive(Clone, Debug)]
pub struct Orbits {
    pub l: usize,
    /// Representative of each state's orbit.
    rep: Vec<u32>,
    /// `t` with `T^t rep = s`.
    shift: Vec<u8>,
    /// Orbit period by representative.
    period: HashMap<u32, u8>,
}

impl Orbits {
    pub fn new(l: usize) -> Result<Self> {
        if !(1..=MAX_SITES).contains(&l) {
            return Err(Error::InvalidModel(format!("momentum blocks support 1 ≤ L ≤ {MAX_SITES}, got {l}")));
        }
        let dim = 1usize << l;
        let mut rep = vec![u32::MAX; dim];
        let mut shift = vec![0u8; dim];
        let mut period = HashMap::new();
        let mut orbit = Vec::with_capacity(l);
        for s in 0..dim {
            if rep[s] != u32::MAX {
                continue;
            }
            orbit.clear();
            let mut x = s;
            loop {
                orbit.push(x);
                x = translate(x, l);
                if x == s {
                    break;
                }
            }
            // s is the smallest unvisited state, hence the orbit minimum.
            for (j, &y) in orbit.iter().enumerate() {
                rep[y] = s as u32;
                shift[y] = j as u8;
            }
            period.insert(s as u32, orbit.len() as u8);
        }
        Ok(Self { l, rep, shift, period })
    }

    pub fn representative(&self, s: usize) -> (usize, usize) {
        (self.rep[s] as usize, self.shift[s] as usize)
    }

    pub fn period(&self, rep: usize) -> usize {
        self.period[&(rep as u32)] as usize
    }

    /// Representatives sorted ascending.
    pub fn reps(&self) -> Vec<usize> {
        let mut r: Vec<usize> = self.period.keys().map(|&x| x as usize).collect();
        r.sort_unstable();
        r
    }
}

pub fn momentum(l: usize, m: usize) -> f64 {
    let k = 2.0 * PI * m as f64 / l as f64;
    if k > PI + 1e-12 {
        k - 2.0 * PI
    } else {
        k
    }
}

/// Basis of the block with `k = 2πm/L`.
#[derive(Clone, Debug)]
pub struct MomentumBasis {
    pub l: usize,
    pub m: usize,
    pub k: f64,
    pub reps: Vec<usize>,
    pub periods: Vec<usize>,
    index: HashMap<usize, usize>,
}

impl MomentumBasis {
    pub fn dim(&self) -> usize {
        self.reps.len()
    }

    pub fn index_of(&self, rep: usize) -> Option<usize> {
        self.index.get(&rep).copied()
    }

    /// Sparse amplitudes of basis vector `a` over computational states.
    pub fn vector(&self, a: usize, orbits: &Orbits) -> Vec<(usize, C64)> {
        let (r, p) = (self.reps[a], self.periods[a]);
        let norm = 1.0 / (p as f64).sqrt();
        let mut out = Vec::with_capacity(p);
        let mut x = r;
        for j in 0..p {
            out.push((x, C64::from_polar(norm, self.k * j as f64)));
            x = translate(x, orbits.l);
        }
        out
    }

    /// Full-space amplitudes of the block vector with components `coeffs`.
    pub fn expand(&self, coeffs: &[C64], orbits: &Orbits) -> Vec<C64> {
        let mut amps = vec![C64::new(0.0, 0.0); 1 << self.l];
        for (a, &c) in coeffs.iter().enumerate() {
            for (s, v) in self.vector(a, orbits) {
                amps[s] += c * v;
            }
        }
        amps
    }

    /// `⟨r_a, k|ψ⟩` for every basis vector.
    pub fn project(&self, psi: &[C64], orbits: &Orbits) -> Vec<C64> {
        (0..self.dim()).map(|a| self.vector(a, orbits).iter().map(|&(s, v)| v.conj() * psi[s]).sum()).collect()
    }
}

pub fn momentum_basis(orbits: &Orbits, m: usize) -> MomentumBasis {
    let l = orbits.l;
    let reps: Vec<usize> = orbits.reps().into_iter().filter(|&r| (m * orbits.period(r)) % l == 0).collect();
    let periods = reps.iter().map(|&r| orbits.period(r)).collect();
    let index = reps.iter().enumerate().map(|(i, &r)| (r, i)).collect();
    MomentumBasis { l, m, k: momentum(l, m), reps, periods, index }
}

/// Sparse Hermitian block, stored by column.
#[derive(Clone, Debug)]
pub struct BlockHamiltonian {
    pub basis: MomentumBasis,
    cols: Vec<Vec<(usize, C64)>>,
}

impl BlockHamiltonian {
    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn matvec(&self, x: &[C64]) -> Vec<C64> {
        let mut y = vec![C64::new(0.0, 0.0); x.len()];
        for (b, col) in self.cols.iter().enumerate() {
            let xb = x[b];
            for &(a, h) in col {
                y[a] += h * xb;
            }
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for (b, col) in self.cols.iter().enumerate() {
            for &(a, h) in col {
                m[(a, b)] += h;
            }
        }
        m
    }

    /// Lowest `nev` eigenpairs (block coordinates).
    pub fn lowest(&self, nev: usize) -> Result<(Vec<f64>, Vec<Vec<C64>>)> {
        let n = self.dim();
        let nev = nev.min(n);
        if n <= DENSE_LIMIT {
            let (vals, vecs) = dense_eigh(self.to_dense());
            let out = (0..nev).map(|c| vecs.column(c).iter().copied().collect()).collect();
            return Ok((vals[..nev].to_vec(), out));
        }
        let start: Vec<C64> = (0..n).map(|i| C64::new(1.0 + 0.01 * ((i * 7919) % 101) as f64, 0.0)).collect();
        lanczos_lowest(|x| self.matvec(x), n, nev, &start, LanczosOptions::default())
    }
}

/// `H_k[a, b] = √(ℓ_b/ℓ_a) Σ_{s: rep(s) = r_a} h_s e^{−ik t_s}` where `H|r_b⟩ = Σ_s h_s|s⟩`.
pub fn block_hamiltonian(model: &IsingModel, orbits: &Orbits, m: usize) -> Result<BlockHamiltonian> {
    if model.boundary != Boundary::Pbc {
        return Err(Error::Unsupported("momentum blocks need periodic boundaries".into()));
    }
    if orbits.l != model.l {
        return Err(Error::Contract("orbit table built for a different L".into()));
    }
    let terms = hamiltonian_terms(model)?;
    let basis = momentum_basis(orbits, m);
    let k = basis.k;
    let mut cols = Vec::with_capacity(basis.dim());
    let mut acc: HashMap<usize, C64> = HashMap::new();
    for b in 0..basis.dim() {
        acc.clear();
        let rb = basis.reps[b];
        let lb = basis.periods[b] as f64;
        for t in &terms {
            let (s, phase) = t.apply_to_index(rb);
            let (ra, ts) = orbits.representative(s);
            if let Some(a) = basis.index_of(ra) {
                let la = basis.periods[a] as f64;
                *acc.entry(a).or_default() += phase * t.coeff * C64::from_polar((lb / la).sqrt(), -k * ts as f64);
            }
        }
        let mut col: Vec<(usize, C64)> = acc.iter().filter(|(_, v)| v.norm() > 1e-15).map(|(&a, &v)| (a, v)).collect();
        col.sort_by_key(|&(a, _)| a);
        cols.push(col);
    }
    Ok(BlockHamiltonian { basis, cols })
}

/// Multiplies by the phase that makes the reference amplitude real and positive. The
/// reference is `|0…01⟩` (index 1) unless that amplitude vanishes, in which case the first
/// index carrying at least 1e−6 of the largest magnitude is used.
pub fn fix_phase(amps: &mut [C64]) {
    let max = amps.iter().map(|a| a.norm()).fold(0.0, f64::max);
    if max == 0.0 {
        return;
    }
    let reference = if amps.len() > 1 && amps[1].norm() > 1e-10 * max {
        1
    } else {
        amps.iter().position(|a| a.norm() >= 1e-6 * max).unwrap()
    };
    let ph = amps[reference].conj() / amps[reference].norm();
    amps.iter_mut().for_each(|a| *a *= ph);
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlockLevels {
    pub m: usize,
    pub k: f64,
    /// Lowest eigenvalues of the block, absolute.
    pub energies: Vec<f64>,
}

/// Lightest particle per momentum plus the masses, all relative to the vacuum.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Spectrum {
    pub l: usize,
    pub e_vac: f64,
    pub blocks: Vec<BlockLevels>,
    pub m1: f64,
    pub m2: f64,
}

impl Spectrum {
    /// Vacuum-subtracted energy of particle 1 in block `m`.
    pub fn e1(&self, m: usize) -> f64 {
        let b = &self.blocks[m];
        let level = if m == 0 { 1 } else { 0 };
        b.energies[level] - self.e_vac
    }

    /// Particle |2⟩ is the third k = 0 level only while it lies below the two-particle threshold.
    pub fn m2_is_stable(&self) -> bool {
        self.m2 < 2.0 * self.m1
    }
}

fn levels_needed(m: usize) -> usize {
    if m == 0 {
        3
    } else {
        2
    }
}

/// Diagonalizes every block; the vacuum is the lowest k = 0 level, `m₁` the next and `m₂` the third.
pub fn single_particle_spectrum(model: &IsingModel) -> Result<Spectrum> {
    let orbits = Orbits::new(model.l)?;
    let blocks: Vec<BlockLevels> = (0..model.l)
        .into_par_iter()
        .map(|m| {
            let h = block_hamiltonian(model, &orbits, m)?;
            let (energies, _) = h.lowest(levels_needed(m))?;
            Ok(BlockLevels { m, k: momentum(model.l, m), energies })
        })
        .collect::<Result<_>>()?;
    let e_vac = blocks[0].energies[0];
    if blocks[0].energies.len() < 3 {
        return Err(Error::InvalidModel("k = 0 block too small for two particle levels".into()));
    }
    let m1 = blocks[0].energies[1] - e_vac;
    let m2 = blocks[0].energies[2] - e_vac;
    Ok(Spectrum { l: model.l, e_vac, blocks, m1, m2 })
}

#[derive(Clone, Debug)]
pub struct SingleParticleState {
    pub m: usize,
    pub k: f64,
    /// Vacuum-subtracted energy.
    pub energy: f64,
    /// Phase-fixed full-space amplitudes.
    pub state: StateVector,
}

/// The lightest one-particle state of every block, phase-fixed, with the vacuum energy.
pub fn single_particle_states(model: &IsingModel) -> Result<(f64, Vec<SingleParticleState>)> {
    let orbits = Orbits::new(model.l)?;
    let raw: Vec<(usize, Vec<f64>, Vec<C64>, MomentumBasis)> = (0..model.l)
        .into_par_iter()
        .map(|m| {
            let h = block_hamiltonian(model, &orbits, m)?;
            let (vals, vecs) = h.lowest(levels_needed(m))?;
            let level = if m == 0 { 1 } else { 0 };
            if vals.len() > level + 1 && (vals[level + 1] - vals[level]).abs() < 1e-8 {
                return Err(Error::Degenerate(m));
            }
            Ok((m, vals, vecs[level].clone(), h.basis))
        })
        .collect::<Result<_>>()?;
    let e_vac = raw[0].1[0];
    let states = raw
        .into_iter()
        .map(|(m, vals, v, basis)| {
            let level = if m == 0 { 1 } else { 0 };
            let mut amps = basis.expand(&v, &orbits);
            let n = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
            amps.iter_mut().for_each(|a| *a /= n);
            fix_phase(&mut amps);
            Ok(SingleParticleState {
                m,
                k: basis.k,
                energy: vals[level] - e_vac,
                state: StateVector::from_amplitudes(model.l, amps)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((e_vac, states))
}

/// Ground state of the k = 0 block.
pub fn vacuum_state(model: &IsingModel) -> Result<(f64, StateVector)> {
    let orbits = Orbits::new(model.l)?;
    let h = block_hamiltonian(model, &orbits, 0)?;
    let (vals, vecs) = h.lowest(1)?;
    let mut amps = h.basis.expand(&vecs[0], &orbits);
    let n = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
    amps.iter_mut().for_each(|a| *a /= n);
    fix_phase(&mut amps);
    Ok((vals[0], StateVector::from_amplitudes(model.l, amps)?))
}

/// Gaussian envelope weights `e^{−ikx₀} e^{−(k₀−k)²/(4σ²)}` per block, normalized.
pub fn envelope(spec: &WavepacketSpec) -> Vec<C64> {
    let raw: Vec<C64> = (0..spec.l)
        .map(|m| {
            let k = momentum(spec.l, m);
            C64::from_polar((-(spec.k0 - k).powi(2) / (4.0 * spec.sigma * spec.sigma)).exp(), -k * spec.x0)
        })
        .collect();
    let n = raw.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
    raw.into_iter().map(|a| a / n).collect()
}

/// `𝒩 Σ_k e^{−ikx₀} e^{−(k₀−k)²/(4σ²)} |ψ_k⟩` over the lattice momenta.
pub fn exact_wavepacket(model: &IsingModel, spec: &WavepacketSpec) -> Result<StateVector> {
    let (_, states) = single_particle_states(model)?;
    exact_wavepacket_from(&states, spec)
}

pub fn exact_wavepacket_from(states: &[SingleParticleState], spec: &WavepacketSpec) -> Result<StateVector> {
    let l = states.first().map(|s| s.state.n_qubits()).unwrap_or(0);
    if spec.l != l || spec.boundary != Boundary::Pbc {
        return Err(Error::Contract("wavepacket spec must match the periodic lattice".into()));
    }
    let env = envelope(spec);
    let mut amps = vec![C64::new(0.0, 0.0); 1 << l];
    for (s, w) in states.iter().zip(&env) {
        for (a, v) in amps.iter_mut().zip(s.state.amplitudes()) {
            *a += w * v;
        }
    }
    let mut sv = StateVector::from_amplitudes(l, amps)?;
    sv.normalize()?;
    Ok(sv)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DispersionRow {
    pub k: f64,
    pub energy: f64,
    pub velocity: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DispersionTable {
    pub l: usize,
    pub m1: f64,
    pub m2: f64,
    /// Rows sorted by `k` in `(−π, π]`.
    pub rows: Vec<DispersionRow>,
}

impl DispersionTable {
    /// `v(k)` linearly interpolated between lattice momenta, periodic in `k`.
    pub fn velocity_at(&self, k: f64) -> f64 {
        let n = self.rows.len();
        let k = (k + PI).rem_euclid(2.0 * PI) - PI;
        let k = if k == -PI { PI } else { k };
        let hi = self.rows.iter().position(|r| r.k >= k).unwrap_or(n);
        let (a, b) = match hi {
            0 => (&self.rows[n - 1], &self.rows[0]),
            h if h == n => (&self.rows[n - 1], &self.rows[0]),
            h => (&self.rows[h - 1], &self.rows[h]),
        };
        let ka = if a.k > k { a.k - 2.0 * PI } else { a.k };
        let kb = if b.k < k { b.k + 2.0 * PI } else { b.k };
        if kb == ka {
            return a.velocity;
        }
        a.velocity + (b.velocity - a.velocity) * (k - ka) / (kb - ka)
    }
}

/// `E(k)` per block and `v(k) = (E(k+ε) − E(k−ε))/(2ε)` with `ε = 2π/L`.
pub fn dispersion(model: &IsingModel) -> Result<DispersionTable> {
    let sp = single_particle_spectrum(model)?;
    Ok(dispersion_from(&sp))
}

pub fn dispersion_from(sp: &Spectrum) -> DispersionTable {
    let l = sp.l;
    let eps = 2.0 * PI / l as f64;
    let mut rows: Vec<DispersionRow> = (0..l)
        .map(|m| DispersionRow {
            k: momentum(l, m),
            energy: sp.e1(m),
            velocity: (sp.e1((m + 1) % l) - sp.e1((m + l - 1) % l)) / (2.0 * eps),
        })
        .collect();
    rows.sort_by(|a, b| a.k.total_cmp(&b.k));
    DispersionTable { l, m1: sp.m1, m2: sp.m2, rows }
}

pub fn dispersion_and_velocity(model: &IsingModel, sizes: &[usize]) -> Result<Vec<DispersionTable>> {
    sizes.iter().map(|&l| dispersion(&model.with_size(l))).collect()
}

/// Columns `L, k/π, E, v`.
pub fn write_dispersion_csv<W: Write>(tables: &[DispersionTable], mut w: W) -> Result<()> {
    writeln!(w, "L,k_over_pi,E,v")?;
    for t in tables {
        for r in &t.rows {
            writeln!(w, "{},{},{},{}", t.l, r.k / PI, r.energy, r.velocity)?;
        }
    }
    Ok(())
}

/// Least-squares fit of `m(L) = m∞ + a·e^{−bL}`: golden-section search over `b`,
/// linear solve for `(m∞, a)`. Returns `(m∞, a, b)`.
pub fn fit_exponential(sizes: &[f64], values: &[f64]) -> Result<(f64, f64, f64)> {
    if sizes.len() < 3 || sizes.len() != values.len() {
        return Err(Error::Domain("exponential fit needs at least three points".into()));
    }
    let solve = |b: f64| -> (f64, f64, f64) {
        let xs: Vec<f64> = sizes.iter().map(|l| (-b * l).exp()).collect();
        let n = xs.len() as f64;
        let (sx, sy) = (xs.iter().sum::<f64>(), values.iter().sum::<f64>());
        let sxx: f64 = xs.iter().map(|x| x * x).sum();
        let sxy: f64 = xs.iter().zip(values).map(|(x, y)| x * y).sum();
        let det = n * sxx - sx * sx;
        let a = if det.abs() < 1e-300 { 0.0 } else { (n * sxy - sx * sy) / det };
        let c = (sy - a * sx) / n;
        let r: f64 = xs.iter().zip(values).map(|(x, y)| (c + a * x - y).powi(2)).sum();
        (c, a, r)
    };
    let (mut lo, mut hi) = (1e-4, 5.0);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let b1 = hi - g * (hi - lo);
        let b2 = lo + g * (hi - lo);
        if solve(b1).2 < solve(b2).2 {
            hi = b2;
        } else {
            lo = b1;
        }
    }
    let b = (lo + hi) / 2.0;
    let (c, a, _) = solve(b);
    Ok((c, a, b))
}

/// `E(k) = √(m² + 4g_x k²)`.
pub fn relativistic_energy(m: f64, gx: f64, k: f64) -> f64 {
    (m * m + 4.0 * gx * k * k).sqrt()
}

fn bisect<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64) -> Option<f64> {
    let (flo, fhi) = (f(lo), f(hi));
    if flo == 0.0 {
        return Some(lo);
    }
    if flo.signum() == fhi.signum() {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid).signum() == flo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Kinematics {
    pub m1: f64,
    pub m2: f64,
    pub e_thr: f64,
    pub e_thr_over_m1: f64,
    /// Incoming momentum at which `2E₁(k) = E_thr`.
    pub k_thr: f64,
    pub k0: f64,
    pub sigma: f64,
    /// Outgoing momentum of the `11 → 12` products in the centre-of-mass frame, if open.
    pub k_out: Option<f64>,
    pub v_in: f64,
    pub v_out1: Option<f64>,
    pub v_out2: Option<f64>,
    /// `P(E₁(k_a) + E₁(k_b) > E_thr)` for `k_a ~ N(k₀, σ)`, `k_b ~ N(−k₀, σ)`.
    pub p_access: f64,
}

/// Threshold momentum from `E₁(k) = E_thr/2` on `(0, π]`.
pub fn threshold_momentum<F: Fn(f64) -> f64>(e1: F, e_thr: f64) -> Result<f64> {
    bisect(|k| e1(k) - e_thr / 2.0, 0.0, PI)
        .ok_or_else(|| Error::Kinematics(format!("E₁(k) = {} has no root in (0, π]", e_thr / 2.0)))
}

/// Probability that two Gaussian momentum distributions carry total energy above `e_thr`,
/// integrated on an `n × n` grid spanning ±6σ.
pub fn access_probability<F: Fn(f64) -> f64>(e1: F, e_thr: f64, k0: f64, sigma: f64, n: usize) -> f64 {
    let ks: Vec<f64> = (0..n).map(|i| -6.0 + 12.0 * (i as f64 + 0.5) / n as f64).collect();
    let w: Vec<f64> = ks.iter().map(|z| (-0.5 * z * z).exp()).collect();
    let norm: f64 = w.iter().sum();
    let ea: Vec<f64> = ks.iter().map(|z| e1(k0 + sigma * z)).collect();
    let eb: Vec<f64> = ks.iter().map(|z| e1(-k0 + sigma * z)).collect();
    let mut p = 0.0;
    for i in 0..n {
        for j in 0..n {
            if ea[i] + eb[j] > e_thr {
                p += w[i] * w[j];
            }
        }
    }
    p / (norm * norm)
}

/// Channel `11 → 12` with the relativistic dispersion for both species.
pub fn inelastic_kinematics(m1: f64, m2: f64, gx: f64, k0: f64, sigma: f64) -> Result<Kinematics> {
    let e1 = |k: f64| relativistic_energy(m1, gx, k);
    let e2 = |k: f64| relativistic_energy(m2, gx, k);
    let e_thr = m1 + m2;
    let k_thr = threshold_momentum(e1, e_thr)?;
    let e_in = 2.0 * e1(k0);
    let k_out = bisect(|k| e1(k) + e2(k) - e_in, 0.0, PI);
    let v = |m: f64, k: f64| 4.0 * gx * k / relativistic_energy(m, gx, k);
    Ok(Kinematics {
        m1,
        m2,
        e_thr,
        e_thr_over_m1: e_thr / m1,
        k_thr,
        k0,
        sigma,
        k_out,
        v_in: v(m1, k0),
        v_out1: k_out.map(|k| v(m1, k)),
        v_out2: k_out.map(|k| v(m2, k)),
        p_access: access_probability(e1, e_thr, k0, sigma, 400),
    })
}
