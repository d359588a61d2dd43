//! Two-wavepacket scattering: seed placement, Trotterized or exact evolution, and the
//! vacuum-subtracted energy density `E_n(t) = ⟨Ĥₙ(t)⟩_2wp − ⟨Ĥₙ(t)⟩_vac`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::adapt::{build_pool, AdaptAnsatz};
use crate::error::{Error, Result};
use crate::linalg::expm_multiply;
use crate::model::{hamiltonian_terms, Boundary, IsingModel};
use crate::sim::{Circuit, SparseObservable, StateVector};
use crate::wstate::{coefficients, lattice_seed, WCoefficients, WavepacketSpec};
use crate::C64;

/// Largest lattice the statevector scattering runs accept.
pub const MAX_SITES: usize = 22;

/// Minimum number of empty sites between packet supports.
pub const MIN_SEPARATION: usize = 2;

const TIME_GRID_TOL: f64 = 1e-9;
const KRYLOV_TOL: f64 = 1e-13;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Evolution {
    /// Symmetric `{R_X/2, R_Z, R_ZZ, R_X/2}` step.
    Trotter2,
    /// `{R_X, R_Z, R_ZZ}` step.
    Trotter1,
    /// `e^{−iĤt}` by Krylov propagation.
    Exact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterConfig {
    pub model: IsingModel,
    /// One spec for a single-packet run, two for scattering.
    pub specs: Vec<WavepacketSpec>,
    /// W-state coefficients placed for each spec, in the same order.
    pub seeds: Vec<WCoefficients>,
    pub ansatz: AdaptAnsatz,
    /// Negative `dt` evolves backwards.
    pub dt: f64,
    pub n_steps: usize,
    /// Multiples of `dt`; empty measures after every step.
    pub measure_times: Vec<f64>,
    pub evolution: Evolution,
}

/// Right packet as the reflection `n → L−1−n` of the left one. The result carries
/// momentum `−k₀` and makes the initial state exactly reflection symmetric.
pub fn mirror_coefficients(c: &WCoefficients, l: usize) -> WCoefficients {
    let d = c.sites.len();
    WCoefficients {
        sites: (0..d).map(|j| l - 1 - c.sites[d - 1 - j]).collect(),
        mags: c.mags.iter().rev().copied().collect(),
        phases: c.phases.iter().rev().copied().collect(),
        truncated_weight: c.truncated_weight,
    }
}

impl ScatterConfig {
    /// Packets at `spec` and its mirror image, colliding at the lattice center.
    pub fn mirrored(model: IsingModel, spec: WavepacketSpec, ansatz: AdaptAnsatz, dt: f64, n_steps: usize) -> Result<Self> {
        let left = coefficients(&spec)?;
        let right = mirror_coefficients(&left, model.l);
        let mirror_spec = WavepacketSpec { k0: -spec.k0, x0: model.l as f64 - 1.0 - spec.x0, ..spec.clone() };
        let c = Self {
            model,
            specs: vec![spec, mirror_spec],
            seeds: vec![left, right],
            ansatz,
            dt,
            n_steps,
            measure_times: Vec::new(),
            evolution: Evolution::Trotter2,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn single(model: IsingModel, spec: WavepacketSpec, ansatz: AdaptAnsatz, dt: f64, n_steps: usize) -> Result<Self> {
        let seed = coefficients(&spec)?;
        let c = Self {
            model,
            specs: vec![spec],
            seeds: vec![seed],
            ansatz,
            dt,
            n_steps,
            measure_times: Vec::new(),
            evolution: Evolution::Trotter2,
        };
        c.validate()?;
        Ok(c)
    }

    /// The same process run backwards: conjugated seeds (momenta flipped in place, which
    /// for a mirrored pair swaps the packets) evolved with `−dt`. `E_n(t)` is unchanged
    /// because `Ĥ`, every `Ĥₙ`, the ansatz and each Trotter gate are real.
    pub fn time_reversed(&self) -> Self {
        Self {
            seeds: self.seeds.iter().map(WCoefficients::conjugated).collect(),
            specs: self.specs.iter().map(|s| WavepacketSpec { k0: -s.k0, ..s.clone() }).collect(),
            dt: -self.dt,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let l = self.model.l;
        if l > MAX_SITES {
            return Err(Error::Config(format!("L = {l} exceeds the statevector limit of {MAX_SITES} sites")));
        }
        if self.specs.is_empty() || self.specs.len() > 2 || self.specs.len() != self.seeds.len() {
            return Err(Error::Config(format!("need one or two packets, got {} specs and {} seeds", self.specs.len(), self.seeds.len())));
        }
        if self.specs.iter().any(|s| s.l != l || s.boundary != self.model.boundary) {
            return Err(Error::Config("wavepacket lattice does not match the model".into()));
        }
        if !self.dt.is_finite() || self.dt == 0.0 {
            return Err(Error::Config(format!("dt must be finite and nonzero, got {}", self.dt)));
        }
        let mut occupied = vec![false; l];
        for s in self.seeds.iter().flat_map(|c| &c.sites) {
            if *s >= l {
                return Err(Error::Index { index: *s, limit: l });
            }
            if occupied[*s] {
                return Err(Error::Config(format!("packet supports overlap at site {s}")));
            }
            occupied[*s] = true;
        }
        if self.seeds.len() == 2 {
            let gap = self.separation().unwrap_or(0);
            if gap < MIN_SEPARATION {
                return Err(Error::Config(format!("packets are {gap} sites apart, need at least {MIN_SEPARATION}")));
            }
        }
        self.measure_steps()?;
        Ok(())
    }

    /// Fewest empty sites between the two supports, counting around the ring under PBC.
    pub fn separation(&self) -> Option<usize> {
        if self.seeds.len() != 2 {
            return None;
        }
        let l = self.model.l;
        let mut owner = vec![None; l];
        for (p, c) in self.seeds.iter().enumerate() {
            c.sites.iter().for_each(|&s| owner[s] = Some(p));
        }
        let ring = self.model.boundary == Boundary::Pbc;
        let mut best: Option<usize> = None;
        for start in 0..l {
            let Some(a) = owner[start] else { continue };
            let mut gap = 0;
            let mut n = start + 1;
            loop {
                if n == l {
                    if !ring {
                        break;
                    }
                    n = 0;
                }
                if n == start {
                    break;
                }
                match owner[n] {
                    None => gap += 1,
                    Some(b) => {
                        if b != a {
                            best = Some(best.map_or(gap, |g| g.min(gap)));
                        }
                        break;
                    }
                }
                n += 1;
            }
        }
        best
    }

    /// Step indices at which the energy density is recorded.
    pub fn measure_steps(&self) -> Result<Vec<usize>> {
        if self.measure_times.is_empty() {
            return Ok((0..=self.n_steps).collect());
        }
        let mut steps = Vec::with_capacity(self.measure_times.len());
        for &t in &self.measure_times {
            let r = t / self.dt;
            let s = r.round();
            if !r.is_finite() || s < 0.0 || (r - s).abs() > TIME_GRID_TOL * r.abs().max(1.0) {
                return Err(Error::Config(format!("time {t} is not a non-negative multiple of dt = {}", self.dt)));
            }
            if s as usize > self.n_steps {
                return Err(Error::Config(format!("time {t} lies beyond n_T = {} steps", self.n_steps)));
            }
            steps.push(s as usize);
        }
        steps.sort_unstable();
        steps.dedup();
        Ok(steps)
    }

    fn prepared(&self, excite: bool) -> Result<Circuit> {
        let l = self.model.l;
        let pool = build_pool(self.ansatz.pool, l, self.model.boundary)?;
        let mut c = Circuit::new(l);
        for seed in &self.seeds {
            c.append(&lattice_seed(seed, l, excite)?);
        }
        c.append(&self.ansatz.circuit(&pool)?);
        Ok(c)
    }
}

/// W-state seeds at every packet support followed by the ansatz across the lattice.
pub fn build_two_wavepacket_circuit(config: &ScatterConfig) -> Result<Circuit> {
    config.validate()?;
    config.prepared(true)
}

/// The mitigation reference: identical gate structure with every seed left in `|0…0⟩`,
/// so the ansatz prepares the vacuum.
pub fn build_vacuum_circuit(config: &ScatterConfig) -> Result<Circuit> {
    config.validate()?;
    config.prepared(false)
}

/// Bonds split into non-overlapping layers: even `n`, odd `n`, then the wrap bond of an odd ring.
pub fn bond_layers(model: &IsingModel) -> Vec<Vec<(usize, usize)>> {
    let l = model.l;
    let bonds = model.bonds();
    let wrap_alone = l % 2 == 1 && model.boundary == Boundary::Pbc;
    let even = bonds.iter().copied().filter(|&(a, _)| a % 2 == 0 && !(wrap_alone && a == l - 1)).collect();
    let odd = bonds.iter().copied().filter(|&(a, _)| a % 2 == 1).collect();
    let mut layers: Vec<Vec<(usize, usize)>> = vec![even, odd];
    if wrap_alone {
        layers.push(vec![(l - 1, 0)]);
    }
    layers.retain(|b| !b.is_empty());
    layers
}

/// One Trotter step approximating `e^{−iĤ dt}`; negative `dt` gives the inverse of the
/// second-order step. With `e^{iaX} = R_X(−2a)`: `R_X(−g_x dt)` halves, `R_Z(−2g_z dt)`,
/// `R_ZZ(−2dt)` on every bond.
pub fn trotter_step_circuit(model: &IsingModel, dt: f64, order2: bool) -> Result<Circuit> {
    model.validate()?;
    if !dt.is_finite() || dt == 0.0 {
        return Err(Error::Domain(format!("Trotter step needs a finite nonzero dt, got {dt}")));
    }
    let l = model.l;
    let mut c = Circuit::new(l);
    let x_angle = if order2 { -model.gx * dt } else { -2.0 * model.gx * dt };
    for q in 0..l {
        c.rx(q, x_angle);
    }
    if model.gz != 0.0 {
        for q in 0..l {
            c.rz(q, -2.0 * model.gz * dt);
        }
    }
    for layer in bond_layers(model) {
        for (a, b) in layer {
            c.rzz(a, b, -2.0 * dt);
        }
    }
    if order2 {
        for q in 0..l {
            c.rx(q, x_angle);
        }
    }
    Ok(c)
}

/// `⟨Zₙ⟩`, `⟨Xₙ⟩` and `⟨ZₙZₙ₊₁⟩`, the latter indexed like [`IsingModel::bonds`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalObservables {
    pub z: Vec<f64>,
    pub x: Vec<f64>,
    pub zz: Vec<f64>,
}

impl LocalObservables {
    pub fn measure(state: &StateVector, model: &IsingModel) -> Result<Self> {
        let l = model.l;
        if state.n_qubits() != l {
            return Err(Error::Contract(format!("state has {} qubits, lattice {l}", state.n_qubits())));
        }
        let amps = state.amplitudes();
        let sign = |i: usize, q: usize| if i >> q & 1 == 0 { 1.0 } else { -1.0 };
        let mut z = vec![0.0; l];
        let mut x = vec![0.0; l];
        let bonds = model.bonds();
        let mut zz = vec![0.0; bonds.len()];
        for (i, a) in amps.iter().enumerate() {
            let p = a.norm_sqr();
            if p == 0.0 {
                continue;
            }
            for q in 0..l {
                z[q] += sign(i, q) * p;
            }
            for (b, &(u, v)) in bonds.iter().enumerate() {
                zz[b] += sign(i, u) * sign(i, v) * p;
            }
        }
        for (q, xq) in x.iter_mut().enumerate() {
            let bit = 1usize << q;
            *xq = amps
                .iter()
                .enumerate()
                .filter(|(i, _)| i & bit == 0)
                .map(|(i, a)| 2.0 * (a.conj() * amps[i | bit]).re)
                .sum();
        }
        Ok(Self { z, x, zz })
    }

    /// `Ĥₙ` assembled from the three measurement bases; the open-chain edges carry
    /// their single bond with unit weight.
    pub fn energy_density(&self, model: &IsingModel) -> Vec<f64> {
        let l = model.l;
        (0..l)
            .map(|n| {
                let bonds = match model.boundary {
                    Boundary::Pbc => 0.5 * (self.zz[(n + l - 1) % l] + self.zz[n]),
                    Boundary::Obc if n == 0 => self.zz[0],
                    Boundary::Obc if n == l - 1 => self.zz[l - 2],
                    Boundary::Obc => 0.5 * (self.zz[n - 1] + self.zz[n]),
                };
                -bonds - model.gx * self.x[n] - model.gz * self.z[n]
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyDensityTrace {
    pub l: usize,
    pub times: Vec<f64>,
    /// Vacuum-subtracted `E_n`, one row per time.
    pub energy: Vec<Vec<f64>>,
    pub raw_2wp: Vec<Vec<f64>>,
    pub raw_vac: Vec<Vec<f64>>,
    /// Largest `|‖ψ‖² − 1|` seen along either evolution.
    pub norm_error: f64,
}

impl EnergyDensityTrace {
    /// `Σₙ E_n` per time.
    pub fn total_energy(&self) -> Vec<f64> {
        self.energy.iter().map(|row| row.iter().sum()).collect()
    }

    /// Largest `|E_n − E_{L−1−n}|` over all times.
    pub fn reflection_asymmetry(&self) -> f64 {
        let l = self.l;
        self.energy
            .iter()
            .flat_map(|row| (0..l).map(move |n| (row[n] - row[l - 1 - n]).abs()))
            .fold(0.0, f64::max)
    }

    /// Largest drift of the raw vacuum density from its first record; zero under exact evolution.
    pub fn vacuum_drift(&self) -> f64 {
        let Some(first) = self.raw_vac.first() else { return 0.0 };
        self.raw_vac
            .iter()
            .flat_map(|row| row.iter().zip(first).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max)
    }

    /// Largest `|Σ E_n(t) − Σ E_n(0)| / |Σ E_n(0)|`.
    pub fn energy_fluctuation(&self) -> f64 {
        let tot = self.total_energy();
        let Some(&e0) = tot.first() else { return 0.0 };
        tot.iter().map(|e| (e - e0).abs() / e0.abs().max(f64::MIN_POSITIVE)).fold(0.0, f64::max)
    }

    /// Columns `t, n, E_n, E_n_raw_2wp, E_n_raw_vac`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,n,E_n,E_n_raw_2wp,E_n_raw_vac")?;
        for (i, t) in self.times.iter().enumerate() {
            for n in 0..self.l {
                writeln!(w, "{t},{n},{},{},{}", self.energy[i][n], self.raw_2wp[i][n], self.raw_vac[i][n])?;
            }
        }
        Ok(())
    }
}

/// Evolves `psi` and records the energy density after each step in `measure_steps` (sorted).
fn evolve_densities(
    model: &IsingModel,
    mut psi: StateVector,
    evolution: Evolution,
    dt: f64,
    measure_steps: &[usize],
) -> Result<(Vec<Vec<f64>>, f64)> {
    let mut rows = Vec::with_capacity(measure_steps.len());
    let mut norm_error = (psi.norm_sqr() - 1.0).abs();
    let mut at = 0usize;
    let step = match evolution {
        Evolution::Trotter2 => Some(trotter_step_circuit(model, dt, true)?),
        Evolution::Trotter1 => Some(trotter_step_circuit(model, dt, false)?),
        Evolution::Exact => None,
    };
    let h = match evolution {
        Evolution::Exact => Some(SparseObservable::new(model.l, &hamiltonian_terms(model)?)?),
        _ => None,
    };
    for &target in measure_steps {
        match (&step, &h) {
            (Some(c), _) => {
                for _ in at..target {
                    psi.apply_unitary_circuit(c)?;
                }
            }
            (None, Some(h)) if target > at => {
                let t = (target - at) as f64 * dt;
                let amps: Vec<C64> = expm_multiply(|x| h.apply(x), psi.amplitudes(), t, KRYLOV_TOL);
                psi = StateVector::from_amplitudes(model.l, amps)?;
            }
            _ => {}
        }
        at = target;
        norm_error = norm_error.max((psi.norm_sqr() - 1.0).abs());
        rows.push(LocalObservables::measure(&psi, model)?.energy_density(model));
    }
    Ok((rows, norm_error))
}

/// Evolves given packet and vacuum states through identical schedules.
pub fn evolve_and_measure_states(
    model: &IsingModel,
    psi: StateVector,
    vacuum: StateVector,
    evolution: Evolution,
    dt: f64,
    measure_steps: &[usize],
) -> Result<EnergyDensityTrace> {
    let mut steps = measure_steps.to_vec();
    steps.sort_unstable();
    steps.dedup();
    let (a, b) = rayon::join(
        || evolve_densities(model, psi, evolution, dt, &steps),
        || evolve_densities(model, vacuum, evolution, dt, &steps),
    );
    let ((raw_2wp, e1), (raw_vac, e2)) = (a?, b?);
    let energy = raw_2wp
        .iter()
        .zip(&raw_vac)
        .map(|(p, v)| p.iter().zip(v).map(|(x, y)| x - y).collect())
        .collect();
    Ok(EnergyDensityTrace {
        l: model.l,
        times: steps.iter().map(|&s| s as f64 * dt.abs()).collect(),
        energy,
        raw_2wp,
        raw_vac,
        norm_error: e1.max(e2),
    })
}

/// Prepares the packet and vacuum circuits on `|0…0⟩` and evolves both. Times are
/// reported as `step·|dt|`, so a time-reversed run lines up with its forward partner.
pub fn evolve_and_measure(config: &ScatterConfig) -> Result<EnergyDensityTrace> {
    let l = config.model.l;
    let steps = config.measure_steps()?;
    let mut psi = StateVector::zero(l);
    psi.apply_unitary_circuit(&build_two_wavepacket_circuit(config)?)?;
    let mut vac = StateVector::zero(l);
    vac.apply_unitary_circuit(&build_vacuum_circuit(config)?)?;
    evolve_and_measure_states(&config.model, psi, vac, config.evolution, config.dt, &steps)
}

/// [`evolve_and_measure`] restricted to a single packet, the control for skewness.
pub fn single_wavepacket_run(config: &ScatterConfig) -> Result<EnergyDensityTrace> {
    if config.specs.len() != 1 {
        return Err(Error::Config(format!("single-packet run given {} packets", config.specs.len())));
    }
    evolve_and_measure(config)
}

/// Centroid of `max(E_n, 0)` within `halfwidth` sites of the maximum, as an unwrapped
/// position that may leave `[0, L)` under PBC.
pub fn packet_centroid(e: &[f64], boundary: Boundary, halfwidth: usize) -> f64 {
    let l = e.len() as i64;
    let peak = e.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |(i, _)| i) as i64;
    let (mut num, mut den) = (0.0, 0.0);
    for off in -(halfwidth as i64)..=halfwidth as i64 {
        let n = peak + off;
        let site = match boundary {
            Boundary::Pbc => n.rem_euclid(l),
            Boundary::Obc if (0..l).contains(&n) => n,
            Boundary::Obc => continue,
        };
        let w = e[site as usize].max(0.0);
        num += w * n as f64;
        den += w;
    }
    if den > 0.0 {
        num / den
    } else {
        peak as f64
    }
}

/// Least-squares slope of the packet centroid against time, unwrapping ring crossings.
pub fn centroid_velocity(trace: &EnergyDensityTrace, boundary: Boundary, halfwidth: usize) -> Result<f64> {
    if trace.times.len() < 2 {
        return Err(Error::Domain("velocity fit needs at least two times".into()));
    }
    let l = trace.l as f64;
    let mut xs: Vec<f64> = Vec::with_capacity(trace.times.len());
    for row in &trace.energy {
        let mut c = packet_centroid(row, boundary, halfwidth);
        if let (Some(&prev), Boundary::Pbc) = (xs.last(), boundary) {
            c += ((prev - c) / l).round() * l;
        }
        xs.push(c);
    }
    let n = xs.len() as f64;
    let tm = trace.times.iter().sum::<f64>() / n;
    let xm = xs.iter().sum::<f64>() / n;
    let stt: f64 = trace.times.iter().map(|t| (t - tm).powi(2)).sum();
    let stx: f64 = trace.times.iter().zip(&xs).map(|(t, x)| (t - tm) * (x - xm)).sum();
    Ok(stx / stt)
}
