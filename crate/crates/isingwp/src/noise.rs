//! Stochastic two-qubit Pauli noise, Pauli twirling, and operator decoherence
//! renormalization (ODR) with energy rescaling.

use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::IsingModel;
use crate::pauli::{Pauli, PauliString};
use crate::scatter::{build_two_wavepacket_circuit, build_vacuum_circuit, trotter_step_circuit, ScatterConfig};
use crate::sim::{pauli_expval, Circuit, Gate, Op, StateVector};
use crate::C64;

/// Observables with a smaller signal strength are dropped.
pub const MIN_SIGNAL: f64 = 0.01;
/// Predictions below this magnitude cannot be divided by.
pub const MIN_PREDICTION: f64 = 1e-6;
pub const BOOTSTRAP_SAMPLES: usize = 200;

/// Checkpoint memory budget for skipping the error-free prefix of a trajectory.
const CHECKPOINT_BYTES: usize = 1 << 29;


#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TwirlGate {
    Cz,
    Rzz,
}

impl FromStr for TwirlGate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cz" => Ok(TwirlGate::Cz),
            "rzz" => Ok(TwirlGate::Rzz),
            other => Err(Error::Unsupported(format!("no twirl set for gate {other}"))),
        }
    }
}

/// Tuples `(P₁, P₂, P₃, P₄)`: `P₁ ⊗ P₂` before the gate on `(a, b)`, `P₃ ⊗ P₄` after.
/// Letters index `I, X, Y, Z` as `0..4`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwirlSet {
    pub gate: TwirlGate,
    pub tuples: Vec<[u8; 4]>,
}

/// Product of two Pauli letters, phase dropped.
fn mul_letters(a: u8, b: u8) -> u8 {
    match (a, b) {
        (0, x) | (x, 0) => x,
        (x, y) if x == y => 0,
        (x, y) => 6 - x - y,
    }
}

pub fn twirl_sets(gate: TwirlGate) -> TwirlSet {
    let tuples = match gate {
        // ZZ-commuting pairs, repeated on both sides.
        TwirlGate::Rzz => [(0, 0), (1, 1), (2, 2), (3, 3), (1, 2), (2, 1), (3, 0), (0, 3)]
            .iter()
            .map(|&(p, q)| [p, q, p, q])
            .collect(),
        // CZ X_a CZ = X_a Z_b, CZ Y_a CZ ∝ Y_a Z_b, Z unchanged.
        TwirlGate::Cz => {
            let mut t = Vec::with_capacity(16);
            for p in 0..4u8 {
                for q in 0..4u8 {
                    let flips_b = matches!(p, 1 | 2);
                    let flips_a = matches!(q, 1 | 2);
                    let p3 = if flips_a { mul_letters(p, 3) } else { p };
                    let q3 = if flips_b { mul_letters(q, 3) } else { q };
                    t.push([p, q, p3, q3]);
                }
            }
            t
        }
    };
    TwirlSet { gate, tuples }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BondOverride {
    pub a: usize,
    pub b: usize,
    pub p_err: f64,
}

/// Pauli channel after every two-qubit gate: identity with probability `1 − p_err`,
/// otherwise a non-identity `P_a ⊗ P_b` drawn from `weights`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PauliNoiseSpec {
    pub p_err: f64,
    /// Relative weights of the 15 non-identity pairs, entry `a + 4b − 1` for letters `a, b`.
    pub weights: Vec<f64>,
    #[serde(default)]
    pub overrides: Vec<BondOverride>,
    /// Coherent `exp(−iεZZ/2)` over-rotation after every two-qubit gate, inside the twirl frame.
    #[serde(default)]
    pub coherent_zz: f64,
}

impl PauliNoiseSpec {
    pub fn depolarizing(p_err: f64) -> Self {
        Self { p_err, weights: vec![1.0; 15], overrides: Vec::new(), coherent_zz: 0.0 }
    }

    pub fn noiseless() -> Self {
        Self::depolarizing(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad_p = |p: f64| !(0.0..=1.0).contains(&p);
        if bad_p(self.p_err) || self.overrides.iter().any(|o| bad_p(o.p_err)) {
            return Err(Error::Config("error probabilities must lie in [0, 1]".into()));
        }
        if self.weights.len() != 15 || self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) || self.weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("need 15 non-negative Pauli weights with a positive sum".into()));
        }
        if !self.coherent_zz.is_finite() {
            return Err(Error::Config("coherent angle must be finite".into()));
        }
        Ok(())
    }

    pub fn p_for(&self, a: usize, b: usize) -> f64 {
        self.overrides
            .iter()
            .find(|o| (o.a, o.b) == (a, b) || (o.a, o.b) == (b, a))
            .map_or(self.p_err, |o| o.p_err)
    }

    /// The 16 outcome probabilities on bond `(a, b)`, identity first.
    pub fn probabilities(&self, a: usize, b: usize) -> [f64; 16] {
        let p = self.p_for(a, b);
        let total: f64 = self.weights.iter().sum();
        let mut out = [0.0; 16];
        out[0] = 1.0 - p;
        for (i, w) in self.weights.iter().enumerate() {
            out[i + 1] = p * w / total;
        }
        out
    }
}

/// Applies `P_a ⊗ P_b` in place, global phase dropped.
fn apply_letters(amps: &mut [C64], a: usize, pa: u8, b: usize, pb: u8) {
    for (q, p) in [(a, pa), (b, pb)] {
        let mask = 1usize << q;
        match p {
            1 | 2 => {
                for i in 0..amps.len() {
                    if i & mask == 0 {
                        amps.swap(i, i | mask);
                    }
                }
                if p == 2 {
                    // Y = iXZ: after the swap, negate the entries that came from |1⟩.
                    for (i, x) in amps.iter_mut().enumerate() {
                        if i & mask == 0 {
                            *x = -*x;
                        }
                    }
                }
            }
            3 => {
                for (i, x) in amps.iter_mut().enumerate() {
                    if i & mask != 0 {
                        *x = -*x;
                    }
                }
            }
            _ => {}
        }
    }
}

fn two_qubit_pair(g: &Gate) -> Option<(usize, usize)> {
    match *g {
        Gate::Cnot { control, target } | Gate::Cry { control, target, .. } => Some((control, target)),
        Gate::Cz { a, b } | Gate::Rzz { a, b, .. } => Some((a, b)),
        _ => None,
    }
}

fn twirl_kind(g: &Gate) -> Option<TwirlGate> {
    match g {
        Gate::Cz { .. } => Some(TwirlGate::Cz),
        Gate::Rzz { .. } => Some(TwirlGate::Rzz),
        _ => None,
    }
}

/// Per-observable trajectory means with bootstrap errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisyEstimate {
    pub labels: Vec<String>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    /// 2.5% and 97.5% bootstrap percentiles.
    pub interval: Vec<(f64, f64)>,
    /// Bootstrap means, one row per resample.
    pub resamples: Vec<Vec<f64>>,
    pub trajectories: usize,
}

struct Event {
    twirl: u8,
    error: u8,
}

/// Trajectory sampling of `circuit` from `|0…0⟩`: each two-qubit gate is followed by a
/// Pauli drawn from `noise`; with `twirling`, CZ and RZZ gates are also dressed with a
/// uniformly drawn tuple from their twirl set. Each trajectory contributes the exact
/// expectation values of its pure state. Trajectory `i` uses ChaCha stream `i` of `seed`,
/// so results do not depend on scheduling.
pub fn noisy_run(
    circuit: &Circuit,
    observables: &[PauliString],
    noise: &PauliNoiseSpec,
    twirling: bool,
    trajectories: usize,
    seed: u64,
) -> Result<NoisyEstimate> {
    noise.validate()?;
    if trajectories == 0 {
        return Err(Error::Config("need at least one trajectory".into()));
    }
    let gates: Vec<Gate> = circuit
        .ops
        .iter()
        .map(|op| match op {
            Op::Gate(g) => Ok(*g),
            _ => Err(Error::Contract("noisy runs take measurement-free circuits".into())),
        })
        .collect::<Result<_>>()?;
    let n = circuit.n_qubits;
    let noisy: Vec<usize> = (0..gates.len()).filter(|&i| two_qubit_pair(&gates[i]).is_some()).collect();
    let sets = [twirl_sets(TwirlGate::Cz), twirl_sets(TwirlGate::Rzz)];
    let set_of = |g: &Gate| twirl_kind(g).map(|k| &sets[k as usize]);
    let pick = WeightedIndex::new(&noise.weights).map_err(|e| Error::Config(e.to_string()))?;

    // Noiseless states just before each noisy gate; without coherent error a trajectory
    // can resume from the one preceding its first Pauli error.
    let resume = noise.coherent_zz == 0.0 && (1usize << n) * 16 * (noisy.len() + 1) <= CHECKPOINT_BYTES;
    let mut checkpoints: Vec<StateVector> = Vec::new();
    let mut clean = StateVector::zero(n);
    let mut next = 0;
    for (i, g) in gates.iter().enumerate() {
        if resume && next < noisy.len() && noisy[next] == i {
            checkpoints.push(clean.clone());
            next += 1;
        }
        clean.apply_gate(g)?;
    }
    let measure = |s: &StateVector| -> Vec<f64> { observables.iter().map(|p| p.coeff * pauli_expval(s, p).map_or(f64::NAN, |v| v.re)).collect() };
    let clean_values = measure(&clean);

    let samples: Vec<Vec<f64>> = (0..trajectories)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let events: Vec<Event> = noisy
                .iter()
                .map(|&i| {
                    let (a, b) = two_qubit_pair(&gates[i]).unwrap();
                    let twirl = match (twirling, set_of(&gates[i])) {
                        (true, Some(set)) => rng.gen_range(0..set.tuples.len()) as u8,
                        _ => 0,
                    };
                    let error = if rng.gen::<f64>() < noise.p_for(a, b) { pick.sample(&mut rng) as u8 + 1 } else { 0 };
                    Event { twirl, error }
                })
                .collect();
            let first = if resume {
                match events.iter().position(|e| e.error != 0) {
                    None => return clean_values.clone(),
                    Some(f) => f,
                }
            } else {
                0
            };
            let (mut state, start) = if resume { (checkpoints[first].clone(), noisy[first]) } else { (StateVector::zero(n), 0) };
            let mut k = first;
            for g in &gates[start..] {
                let Some((a, b)) = two_qubit_pair(g) else {
                    state.apply_gate(g).expect("validated gate");
                    continue;
                };
                let ev = &events[k];
                k += 1;
                let tuple = match set_of(g) {
                    Some(set) if twirling => set.tuples[ev.twirl as usize],
                    _ => [0; 4],
                };
                apply_letters(state.amplitudes_mut(), a, tuple[0], b, tuple[1]);
                state.apply_gate(g).expect("validated gate");
                if noise.coherent_zz != 0.0 {
                    state.apply_gate(&Gate::Rzz { a, b, theta: noise.coherent_zz }).expect("validated gate");
                }
                apply_letters(state.amplitudes_mut(), a, tuple[2], b, tuple[3]);
                if ev.error != 0 {
                    apply_letters(state.amplitudes_mut(), a, ev.error % 4, b, ev.error / 4);
                }
            }
            measure(&state)
        })
        .collect();

    let n_obs = observables.len();
    let mean: Vec<f64> = (0..n_obs).map(|o| samples.iter().map(|s| s[o]).sum::<f64>() / trajectories as f64).collect();
    let resamples: Vec<Vec<f64>> = (0..BOOTSTRAP_SAMPLES)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
            rng.set_stream(r as u64);
            let mut acc = vec![0.0; n_obs];
            for _ in 0..trajectories {
                let s = &samples[rng.gen_range(0..trajectories)];
                acc.iter_mut().zip(s).for_each(|(a, v)| *a += v);
            }
            acc.iter().map(|a| a / trajectories as f64).collect()
        })
        .collect();
    let (stderr, interval) = bootstrap_spread(&resamples, n_obs);
    Ok(NoisyEstimate {
        labels: observables.iter().map(PauliString::label).collect(),
        mean,
        stderr,
        interval,
        resamples,
        trajectories,
    })
}

/// Standard deviation and 2.5/97.5 percentiles of each column.
fn bootstrap_spread(resamples: &[Vec<f64>], n: usize) -> (Vec<f64>, Vec<(f64, f64)>) {
    let r = resamples.len() as f64;
    let mut sd = Vec::with_capacity(n);
    let mut ci = Vec::with_capacity(n);
    for o in 0..n {
        let mut col: Vec<f64> = resamples.iter().map(|s| s[o]).collect();
        let m = col.iter().sum::<f64>() / r;
        sd.push((col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (r - 1.0).max(1.0)).sqrt());
        col.sort_by(f64::total_cmp);
        let at = |q: f64| col[((q * (r - 1.0)).round() as usize).min(col.len() - 1)];
        ci.push((at(0.025), at(0.975)));
    }
    (sd, ci)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdrStatus {
    Mitigated,
    /// Signal strength below [`MIN_SIGNAL`].
    Filtered,
    /// Prediction below [`MIN_PREDICTION`] in magnitude.
    Unmitigable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdrEntry {
    pub signal: Option<f64>,
    pub mitigated: Option<f64>,
    pub status: OdrStatus,
}

/// `p_Ô = ⟨Ô⟩_meas / ⟨Ô⟩_pred` from the mitigation circuit, then `⟨Ô⟩_phys / p_Ô`.
pub fn odr_rescale(physics: &[f64], mitigation: &[f64], predicted: &[f64]) -> Result<Vec<OdrEntry>> {
    if physics.len() != mitigation.len() || physics.len() != predicted.len() {
        return Err(Error::Contract("ODR inputs must cover the same observables".into()));
    }
    Ok(physics
        .iter()
        .zip(mitigation)
        .zip(predicted)
        .map(|((&phys, &meas), &pred)| {
            if pred.abs() < MIN_PREDICTION {
                return OdrEntry { signal: None, mitigated: None, status: OdrStatus::Unmitigable };
            }
            let p = meas / pred;
            if p < MIN_SIGNAL {
                OdrEntry { signal: Some(p), mitigated: None, status: OdrStatus::Filtered }
            } else {
                OdrEntry { signal: Some(p), mitigated: Some(phys / p), status: OdrStatus::Mitigated }
            }
        })
        .collect())
}

/// `E_n · E_tot / Σⱼ E_j`, enforcing energy conservation.
pub fn energy_rescale(e: &[f64], e_tot: f64) -> Result<Vec<f64>> {
    let sum: f64 = e.iter().sum();
    let scale = e.iter().map(|x| x.abs()).sum::<f64>().max(e_tot.abs());
    if sum == 0.0 || sum.abs() < 1e-12 * scale || sum.signum() != e_tot.signum() {
        return Err(Error::RescaleUnstable(format!("Σ E_n = {sum:.3e} against E_tot = {e_tot:.3e}")));
    }
    let factor = e_tot / sum;
    Ok(e.iter().map(|x| x * factor).collect())
}

/// `(E_n + E_{L−1−n})/2` with errors combined in quadrature.
pub fn reflection_average(e: &[f64], sigma: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let l = e.len();
    let avg = (0..l).map(|n| 0.5 * (e[n] + e[l - 1 - n])).collect();
    let sig = (0..l)
        .map(|n| if n == l - 1 - n { sigma[n] } else { 0.5 * (sigma[n].powi(2) + sigma[l - 1 - n].powi(2)).sqrt() })
        .collect();
    (avg, sig)
}

/// `Z₀…Z_{L−1}`, `X₀…X_{L−1}`, then `ZₙZₙ₊₁` over the model's bonds.
pub fn energy_observables(model: &IsingModel) -> Vec<PauliString> {
    let l = model.l;
    let mut obs: Vec<PauliString> = (0..l).map(|n| PauliString::single(1.0, n, Pauli::Z)).collect();
    obs.extend((0..l).map(|n| PauliString::single(1.0, n, Pauli::X)));
    obs.extend(model.bonds().into_iter().map(|(a, b)| PauliString::new(1.0, [(a, Pauli::Z), (b, Pauli::Z)])));
    obs
}

/// `⟨Ĥₙ⟩` from values ordered as in [`energy_observables`]; `None` where an input is missing.
pub fn assemble_energy(model: &IsingModel, values: &[Option<f64>]) -> Vec<Option<f64>> {
    let l = model.l;
    let (z, rest) = values.split_at(l);
    let (x, zz) = rest.split_at(l);
    (0..l)
        .map(|n| {
            let bond = match model.boundary {
                crate::model::Boundary::Pbc => Some(0.5 * (zz[(n + l - 1) % l]? + zz[n]?)),
                crate::model::Boundary::Obc if n == 0 => zz[0],
                crate::model::Boundary::Obc if n == l - 1 => zz[l - 2],
                crate::model::Boundary::Obc => Some(0.5 * (zz[n - 1]? + zz[n]?)),
            }?;
            Some(-bond - model.gx * x[n]? - model.gz * z[n]?)
        })
        .collect()
}

/// One line of the mitigation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservableReport {
    pub observable: String,
    pub p_o: Option<f64>,
    pub raw: f64,
    pub mitigated: Option<f64>,
    pub sigma: Option<f64>,
    pub status: OdrStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MitigationRun {
    pub n_steps: usize,
    pub time: f64,
    /// Noiseless vacuum-subtracted `E_n` of the same Trotterized circuits.
    pub exact: Vec<f64>,
    /// Unmitigated physics density minus the noiseless evolved vacuum.
    pub raw: Vec<f64>,
    /// ODR against the time-evolved vacuum; `None` where an observable was dropped.
    pub mitigated: Vec<Option<f64>>,
    pub sigma: Vec<Option<f64>>,
    /// ODR against the unevolved vacuum, vacuum-subtracted with the unevolved vacuum.
    pub mitigated_static: Vec<Option<f64>>,
    /// Noiseless `Σ E_n` of the prepared state, the rescaling target.
    pub e_tot: f64,
    pub observables: Vec<ObservableReport>,
}

impl MitigationRun {
    /// Sites whose mitigated value lies within `k` bootstrap σ of the noiseless one,
    /// as a fraction of all sites.
    pub fn agreement(&self, k: f64) -> f64 {
        let ok = (0..self.exact.len())
            .filter(|&n| match (self.mitigated[n], self.sigma[n]) {
                (Some(m), Some(s)) => (m - self.exact[n]).abs() <= k * s,
                _ => false,
            })
            .count();
        ok as f64 / self.exact.len() as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.observables)?)
    }
}

/// Physics circuit = packets + `n_steps` Trotter steps; mitigation circuit = the vacuum
/// with the same gate structure through the same steps.
pub fn mitigation_circuits(config: &ScatterConfig, n_steps: usize) -> Result<(Circuit, Circuit)> {
    let step = trotter_step_circuit(&config.model, config.dt, true)?;
    let mut phys = build_two_wavepacket_circuit(config)?;
    let mut mit = build_vacuum_circuit(config)?;
    for _ in 0..n_steps {
        phys.append(&step);
        mit.append(&step);
    }
    Ok((phys, mit))
}

fn noiseless_values(circuit: &Circuit, obs: &[PauliString]) -> Result<Vec<f64>> {
    let mut s = StateVector::zero(circuit.n_qubits);
    s.apply_unitary_circuit(circuit)?;
    obs.iter().map(|p| Ok(pauli_expval(&s, p)?.re)).collect()
}

fn mitigated_density(model: &IsingModel, phys: &[f64], mit: &[f64], pred: &[f64], vac: &[f64]) -> Result<(Vec<Option<f64>>, Vec<OdrEntry>)> {
    let odr = odr_rescale(phys, mit, pred)?;
    let values: Vec<Option<f64>> = odr.iter().map(|e| e.mitigated).collect();
    let h = assemble_energy(model, &values);
    let v = assemble_energy(model, &vac.iter().map(|&x| Some(x)).collect::<Vec<_>>());
    Ok((h.iter().zip(&v).map(|(a, b)| Some((*a)? - (*b)?)).collect(), odr))
}

/// End-to-end noisy scattering run with ODR: both circuits are sampled under `noise`,
/// signal strengths come from the noiseless mitigation circuit, and bootstrap errors are
/// propagated by pairing resamples of the two runs.
pub fn mitigation_pipeline(
    config: &ScatterConfig,
    n_steps: usize,
    noise: &PauliNoiseSpec,
    twirling: bool,
    trajectories: usize,
    seed: u64,
) -> Result<MitigationRun> {
    let model = &config.model;
    let obs = energy_observables(model);
    let (phys_c, mit_c) = mitigation_circuits(config, n_steps)?;
    let (prep_phys, prep_vac) = mitigation_circuits(config, 0)?;
    let pred = noiseless_values(&mit_c, &obs)?;
    let exact_phys = noiseless_values(&phys_c, &obs)?;
    let static_vac = noiseless_values(&prep_vac, &obs)?;
    let initial_phys = noiseless_values(&prep_phys, &obs)?;
    let some = |v: &[f64]| v.iter().map(|&x| Some(x)).collect::<Vec<_>>();
    let density = |v: &[f64]| assemble_energy(model, &some(v)).into_iter().map(|x| x.unwrap_or(f64::NAN)).collect::<Vec<f64>>();
    let sub = |a: Vec<f64>, b: Vec<f64>| a.iter().zip(&b).map(|(x, y)| x - y).collect::<Vec<f64>>();
    let exact = sub(density(&exact_phys), density(&pred));
    let e_tot = sub(density(&initial_phys), density(&static_vac)).iter().sum();

    let phys = noisy_run(&phys_c, &obs, noise, twirling, trajectories, seed)?;
    let mit = noisy_run(&mit_c, &obs, noise, twirling, trajectories, seed.wrapping_add(1))?;
    let raw = sub(density(&phys.mean), density(&pred));
    let (mitigated, odr) = mitigated_density(model, &phys.mean, &mit.mean, &pred, &pred)?;
    let (mitigated_static, _) = mitigated_density(model, &phys.mean, &mit.mean, &static_vac, &static_vac)?;

    // Bootstrap: push paired resamples through the same pipeline.
    let l = model.l;
    let mut spread: Vec<Vec<f64>> = vec![Vec::new(); l];
    let mut obs_spread: Vec<Vec<f64>> = vec![Vec::new(); obs.len()];
    for (rp, rm) in phys.resamples.iter().zip(&mit.resamples) {
        let (e, entries) = mitigated_density(model, rp, rm, &pred, &pred)?;
        for (n, v) in e.iter().enumerate() {
            if let Some(v) = v {
                spread[n].push(*v);
            }
        }
        for (o, en) in entries.iter().enumerate() {
            if let Some(v) = en.mitigated {
                obs_spread[o].push(v);
            }
        }
    }
    let sd = |xs: &[f64]| -> Option<f64> {
        if xs.len() < 2 {
            return None;
        }
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        Some((xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt())
    };
    let sigma = spread.iter().map(|s| sd(s)).collect();
    let observables = odr
        .iter()
        .enumerate()
        .map(|(o, e)| ObservableReport {
            observable: phys.labels[o].clone(),
            p_o: e.signal,
            raw: phys.mean[o],
            mitigated: e.mitigated,
            sigma: sd(&obs_spread[o]),
            status: e.status,
        })
        .collect();
    Ok(MitigationRun {
        n_steps,
        time: n_steps as f64 * config.dt.abs(),
        exact,
        raw,
        mitigated,
        sigma,
        mitigated_static,
        e_tot,
        observables,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::{build_pool, AdaptAnsatz, PoolId, Reference};
    use crate::model::Boundary;
    use crate::sim::circuit_unitary;
    use crate::wstate::WavepacketSpec;
    use nalgebra::DMatrix;
    use std::f64::consts::PI;

    const LETTERS: [Option<Pauli>; 4] = [None, Some(Pauli::X), Some(Pauli::Y), Some(Pauli::Z)];

    fn letter_matrix(p: u8) -> DMatrix<C64> {
        let (o, z, i) = (C64::new(1.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 1.0));
        match p {
            0 => DMatrix::from_row_slice(2, 2, &[o, z, z, o]),
            1 => DMatrix::from_row_slice(2, 2, &[z, o, o, z]),
            2 => DMatrix::from_row_slice(2, 2, &[z, -i, i, z]),
            _ => DMatrix::from_row_slice(2, 2, &[o, z, z, -o]),
        }
    }

    /// `P_b ⊗ P_a` in the little-endian basis with qubit `a = 0`.
    fn pair(pa: u8, pb: u8) -> DMatrix<C64> {
        letter_matrix(pb).kronecker(&letter_matrix(pa))
    }

    fn stabilizes(gate: Gate, t: [u8; 4]) -> bool {
        let mut c = Circuit::new(2);
        c.gate(gate);
        let g = circuit_unitary(&c).unwrap();
        let m = pair(t[2], t[3]) * &g * pair(t[0], t[1]);
        let phase = m[(0, 0)] / g[(0, 0)];
        (phase.norm() - 1.0).abs() < 1e-12 && (m - g * phase).norm() < 1e-12
    }

    #[test]
    fn twirl_tuples_stabilize_their_gates() {
        let rzz = twirl_sets(TwirlGate::Rzz);
        assert_eq!(rzz.tuples.len(), 8);
        assert!(rzz.tuples.contains(&[0, 0, 0, 0]) && rzz.tuples.contains(&[1, 2, 1, 2]));
        for theta in [0.1, 0.7, 1.3, 2.9, -0.4] {
            for &t in &rzz.tuples {
                assert!(stabilizes(Gate::Rzz { a: 0, b: 1, theta }, t), "{t:?} at {theta}");
            }
        }
        let cz = twirl_sets(TwirlGate::Cz);
        assert_eq!(cz.tuples.len(), 16);
        let firsts: std::collections::BTreeSet<_> = cz.tuples.iter().map(|t| (t[0], t[1])).collect();
        assert_eq!(firsts.len(), 16);
        for &t in &cz.tuples {
            assert!(stabilizes(Gate::Cz { a: 0, b: 1 }, t), "{t:?}");
        }
        assert!("cnot".parse::<TwirlGate>().is_err());
        assert_eq!("RZZ".parse::<TwirlGate>().unwrap(), TwirlGate::Rzz);
    }

    #[test]
    fn letters_match_pauli_strings() {
        let mut s = StateVector::zero(3);
        for q in 0..3 {
            s.apply_gate(&Gate::Ry { q, theta: 0.3 + q as f64 }).unwrap();
            s.apply_gate(&Gate::Rz { q, theta: 0.5 * q as f64 }).unwrap();
        }
        for pa in 0..4u8 {
            for pb in 0..4u8 {
                let mut a = s.clone();
                apply_letters(a.amplitudes_mut(), 0, pa, 2, pb);
                let mut factors = Vec::new();
                if let Some(p) = LETTERS[pa as usize] {
                    factors.push((0, p));
                }
                if let Some(p) = LETTERS[pb as usize] {
                    factors.push((2, p));
                }
                let mut b = s.clone();
                b.apply_pauli(&PauliString::new(1.0, factors)).unwrap();
                assert!((a.inner(&b).norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut spec = PauliNoiseSpec::depolarizing(0.02);
        spec.overrides.push(BondOverride { a: 3, b: 2, p_err: 0.1 });
        let p = spec.probabilities(0, 1);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((p[0] - 0.98).abs() < 1e-15);
        assert!((spec.probabilities(2, 3)[0] - 0.9).abs() < 1e-15);
        spec.weights.pop();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn zero_noise_reproduces_noiseless_values() {
        let mut c = Circuit::new(3);
        c.h(0).cnot(0, 1).rzz(1, 2, 0.4).ry(2, 0.3).cz(0, 2);
        let obs = vec![PauliString::single(1.0, 0, Pauli::X), PauliString::new(1.0, [(1, Pauli::Z), (2, Pauli::Z)])];
        let want = noiseless_values(&c, &obs).unwrap();
        let est = noisy_run(&c, &obs, &PauliNoiseSpec::noiseless(), true, 50, 3).unwrap();
        for (m, w) in est.mean.iter().zip(&want) {
            assert!((m - w).abs() < 1e-12);
        }
        assert!(est.stderr.iter().all(|s| *s < 1e-12));
    }

    #[test]
    fn single_gate_depolarizing_attenuation() {
        // ⟨Z₀⟩ flips under the 8 of 15 errors carrying X or Y on qubit 0.
        let p = 0.3;
        let mut c = Circuit::new(2);
        c.ry(0, 0.7).rzz(0, 1, 0.9);
        let obs = vec![PauliString::single(1.0, 0, Pauli::Z)];
        let est = noisy_run(&c, &obs, &PauliNoiseSpec::depolarizing(p), true, 20_000, 11).unwrap();
        let want = 0.7f64.cos() * (1.0 - 2.0 * p * 8.0 / 15.0);
        assert!((est.mean[0] - want).abs() < 3.0 * est.stderr[0], "{} vs {want} ± {}", est.mean[0], est.stderr[0]);
        assert!(est.mean[0].abs() <= 0.7f64.cos().abs() + 3.0 * est.stderr[0]);
    }

    #[test]
    fn runs_are_reproducible_under_any_thread_count() {
        let mut c = Circuit::new(3);
        c.h(0).cnot(0, 1).rzz(1, 2, 0.4).cz(0, 2);
        let obs = vec![PauliString::single(1.0, 1, Pauli::Z)];
        let spec = PauliNoiseSpec::depolarizing(0.2);
        let a = noisy_run(&c, &obs, &spec, true, 500, 9).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| noisy_run(&c, &obs, &spec, true, 500, 9).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_resume_matches_full_replay() {
        // A vanishing coherent angle disables resuming without changing the physics.
        let mut c = Circuit::new(3);
        c.h(0).cnot(0, 1).rx(2, 0.3).rzz(1, 2, 0.4).ry(0, 0.2).cz(0, 2);
        let obs = vec![PauliString::single(1.0, 0, Pauli::X), PauliString::single(1.0, 2, Pauli::Z)];
        let spec = PauliNoiseSpec::depolarizing(0.3);
        let fast = noisy_run(&c, &obs, &spec, true, 300, 5).unwrap();
        let slow = noisy_run(&c, &obs, &PauliNoiseSpec { coherent_zz: 1e-300, ..spec }, true, 300, 5).unwrap();
        for (a, b) in fast.mean.iter().zip(&slow.mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cz_twirling_removes_coherent_zz_error() {
        // |+0⟩ through CZ and exp(−iεZZ/2) gives ⟨Y₀⟩ = sin ε. The CZ set flips ZZ on half
        // its tuples; every RZZ tuple commutes with ZZ, so that set cannot.
        let eps = 0.3;
        let obs = vec![PauliString::single(1.0, 0, Pauli::Y)];
        let spec = PauliNoiseSpec { coherent_zz: eps, ..PauliNoiseSpec::noiseless() };
        let mut cz = Circuit::new(2);
        cz.h(0).cz(0, 1);
        let bare = noisy_run(&cz, &obs, &spec, false, 200, 1).unwrap();
        assert!((bare.mean[0].abs() - eps.sin()).abs() < 1e-12);
        let twirled = noisy_run(&cz, &obs, &spec, true, 4000, 1).unwrap();
        assert!(twirled.mean[0].abs() < 3.0 * twirled.stderr[0] + 1e-12, "{}", twirled.mean[0]);
        let mut rzz = Circuit::new(2);
        rzz.h(0).rzz(0, 1, 0.0);
        let rzz_twirled = noisy_run(&rzz, &obs, &spec, true, 400, 1).unwrap();
        assert!((rzz_twirled.mean[0].abs() - eps.sin()).abs() < 1e-12);
    }

    #[test]
    fn odr_rescale_thresholds() {
        let out = odr_rescale(&[0.2, 0.3, 0.1], &[0.25, 0.005, 0.3], &[0.5, 1.0, 1e-8]).unwrap();
        assert!((out[0].mitigated.unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(out[1].status, OdrStatus::Filtered);
        assert_eq!(out[2].status, OdrStatus::Unmitigable);
        assert!(odr_rescale(&[0.1], &[0.1, 0.2], &[1.0]).is_err());
    }

    #[test]
    fn energy_rescale_restores_total() {
        let e = [0.1, 0.5, -0.05, 0.3];
        let tot: f64 = e.iter().sum();
        let same = energy_rescale(&e, tot).unwrap();
        assert!(same.iter().zip(&e).all(|(a, b)| (a - b).abs() < 1e-15));
        let shrunk: Vec<f64> = e.iter().map(|x| 0.85 * x).collect();
        let back = energy_rescale(&shrunk, tot).unwrap();
        assert!(back.iter().zip(&e).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!((back.iter().sum::<f64>() - tot).abs() < 1e-15);
        assert!(matches!(energy_rescale(&[0.1, -0.1], 1.0), Err(Error::RescaleUnstable(_))));
        assert!(matches!(energy_rescale(&[-0.1, -0.2], 1.0), Err(Error::RescaleUnstable(_))));
    }

    #[test]
    fn reflection_average_halves_variance() {
        let (avg, sig) = reflection_average(&[1.0, 2.0, 3.0, 5.0], &[0.2, 0.2, 0.2, 0.2]);
        assert_eq!(avg, vec![3.0, 2.5, 2.5, 3.0]);
        assert!(sig.iter().all(|s| (s * s - 0.02).abs() < 1e-15));
    }

    #[test]
    fn assembled_energy_matches_local_observables() {
        let model = IsingModel::pbc(5, 1.25, 0.15).unwrap();
        let mut s = StateVector::zero(5);
        for q in 0..5 {
            s.apply_gate(&Gate::Ry { q, theta: 0.2 + 0.3 * q as f64 }).unwrap();
        }
        s.apply_unitary_circuit(&trotter_step_circuit(&model, 0.4, true).unwrap()).unwrap();
        let vals: Vec<Option<f64>> = energy_observables(&model).iter().map(|p| Some(pauli_expval(&s, p).unwrap().re)).collect();
        let got = assemble_energy(&model, &vals);
        let want = crate::scatter::LocalObservables::measure(&s, &model).unwrap().energy_density(&model);
        for (g, w) in got.iter().zip(&want) {
            assert!((g.unwrap() - w).abs() < 1e-12);
        }
        let mut holes = vals.clone();
        holes[5] = None;
        assert!(assemble_energy(&model, &holes)[0].is_none());
    }

    fn small_config(l: usize, dt: f64) -> ScatterConfig {
        let model = IsingModel::pbc(l, 1.25, 0.15).unwrap();
        let pool = build_pool(PoolId::O3, l, Boundary::Pbc).unwrap();
        let steps = crate::adapt::reference_sequence("vacuum_L28_gx1.25").unwrap().steps;
        let ansatz = AdaptAnsatz::from_labels(&pool, Reference::Wavepacket, steps).unwrap();
        let spec = WavepacketSpec { l, k0: 0.36 * PI, sigma: 0.5, x0: 2.0, d: 3, boundary: Boundary::Pbc };
        ScatterConfig::mirrored(model, spec, ansatz, dt, 3).unwrap()
    }

    #[test]
    fn noiseless_pipeline_is_exact() {
        let cfg = small_config(10, 0.3);
        let run = mitigation_pipeline(&cfg, 2, &PauliNoiseSpec::noiseless(), true, 20, 4).unwrap();
        for (m, e) in run.mitigated.iter().zip(&run.exact) {
            assert!((m.unwrap() - e).abs() < 1e-12);
        }
        assert!(run.observables.iter().all(|o| o.p_o.is_some_and(|p| (p - 1.0).abs() < 1e-9) || o.status == OdrStatus::Unmitigable));
        let json = run.to_json().unwrap();
        assert!(json.contains("\"observable\"") && json.contains("\"p_o\""));
    }

    #[test]
    fn static_vacuum_variant_after_rescaling() {
        // Noiseless, so the variants differ only through the Trotter quench of the vacuum.
        // At this size the rescaled variants stay about 4% apart (relative L2 over sites).
        let cfg = small_config(10, 0.3);
        let run = mitigation_pipeline(&cfg, 3, &PauliNoiseSpec::noiseless(), false, 10, 4).unwrap();
        let evolved: Vec<f64> = run.mitigated.iter().map(|x| x.unwrap()).collect();
        let stat: Vec<f64> = run.mitigated_static.iter().map(|x| x.unwrap()).collect();
        let a = energy_rescale(&evolved, run.e_tot).unwrap();
        let b = energy_rescale(&stat, run.e_tot).unwrap();
        assert!((b.iter().sum::<f64>() - run.e_tot).abs() < 1e-12);
        let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(diff < 0.05 * norm, "relative difference {}", diff / norm);
        let (ra, rb) = (reflection_average(&b, &vec![0.0; 10]).0, b.clone());
        assert!(ra.iter().zip(&rb).all(|(x, y)| (x - y).abs() < 1e-12));
    }

}
