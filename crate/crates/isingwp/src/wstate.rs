//! Wavepacket seed coefficients and the circuits that prepare `|W(k₀)⟩ = Σₙ e^{iφₙ}cₙ|2ⁿ⟩`.
//!
//! Every builder returns a [`WPrep`]: a circuit whose first `d` qubits carry the
//! state (local qubit `j` is window site `j`), plus the classical outcome that
//! marks success when the construction is probabilistic.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Boundary;
use crate::sim::{enumerate_branches, merge_postselected, Circuit, Condition, Gate, Record, StateVector};
use crate::C64;

/// Coefficients below this magnitude are treated as exactly zero by the angle solvers.
pub const ZERO_COEFF: f64 = 1e-14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WavepacketSpec {
    pub l: usize,
    pub k0: f64,
    pub sigma: f64,
    pub x0: f64,
    pub d: usize,
    pub boundary: Boundary,
}

impl WavepacketSpec {
    /// The `d` lattice sites nearest `x0`, ties resolved to the left; wrapped mod `L` under PBC.
    pub fn window(&self) -> Result<Vec<usize>> {
        if self.d == 0 || self.l == 0 || self.d > self.l {
            return Err(Error::DegenerateSpec(format!("window of {} sites on L = {}", self.d, self.l)));
        }
        let start = (self.x0 - (self.d as f64 - 1.0) / 2.0).floor() as i64;
        let l = self.l as i64;
        match self.boundary {
            Boundary::Obc if start < 0 || start + self.d as i64 > l => Err(Error::DegenerateSpec(format!(
                "window [{}, {}] leaves the open chain of {} sites",
                start,
                start + self.d as i64 - 1,
                self.l
            ))),
            _ => Ok((0..self.d as i64).map(|j| (start + j).rem_euclid(l) as usize).collect()),
        }
    }
}

/// Normalized magnitudes and phases on consecutive lattice sites.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WCoefficients {
    pub sites: Vec<usize>,
    pub mags: Vec<f64>,
    pub phases: Vec<f64>,
    /// Weight outside the window before renormalization.
    pub truncated_weight: f64,
}

impl WCoefficients {
    /// Builds from complex amplitudes on window positions `0..d`; rejects unnormalized input.
    pub fn from_amplitudes(amps: &[C64]) -> Result<Self> {
        let norm: f64 = amps.iter().map(|a| a.norm_sqr()).sum();
        if amps.is_empty() || (norm - 1.0).abs() > 1e-10 {
            return Err(Error::Contract(format!("coefficients have norm² {norm}")));
        }
        Ok(Self {
            sites: (0..amps.len()).collect(),
            mags: amps.iter().map(|a| a.norm()).collect(),
            phases: amps.iter().map(|a| if a.norm() > 0.0 { a.arg() } else { 0.0 }).collect(),
            truncated_weight: 0.0,
        })
    }

    pub fn d(&self) -> usize {
        self.mags.len()
    }

    pub fn amplitude(&self, j: usize) -> C64 {
        C64::from_polar(self.mags[j], self.phases[j])
    }

    /// Seed for the opposite momentum: `φₙ → −φₙ`.
    pub fn conjugated(&self) -> Self {
        Self { phases: self.phases.iter().map(|p| wrap_phase(-p)).collect(), ..self.clone() }
    }

    /// `Σⱼ e^{iφⱼ}cⱼ|2ʲ⟩` on `d` qubits.
    pub fn target_state(&self) -> StateVector {
        let d = self.d();
        let mut amps = vec![C64::new(0.0, 0.0); 1 << d];
        for j in 0..d {
            amps[1 << j] = self.amplitude(j);
        }
        StateVector::from_amplitudes(d, amps).expect("dimension matches")
    }

    fn check_normalized(&self) -> Result<()> {
        let n: f64 = self.mags.iter().map(|c| c * c).sum();
        if (n - 1.0).abs() > 1e-10 {
            return Err(Error::Contract(format!("coefficients have norm² {n}")));
        }
        Ok(())
    }

    fn clean_mags(&self) -> Vec<f64> {
        self.mags.iter().map(|&c| if c < ZERO_COEFF { 0.0 } else { c }).collect()
    }
}

fn wrap_phase(p: f64) -> f64 {
    let w = p.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Lattice momenta `2πm/L` folded into `(−π, π]`.
pub fn lattice_momenta(l: usize) -> Vec<f64> {
    (0..l)
        .map(|m| {
            let k = 2.0 * PI * m as f64 / l as f64;
            if k > PI + 1e-12 {
                k - 2.0 * PI
            } else {
                k
            }
        })
        .collect()
}

/// `e^{iφₙ}cₙ ∝ Σ_k e^{−ikx₀} e^{−(k₀−k)²/(4σ²)} e^{ikn}`, truncated to the window and renormalized.
pub fn coefficients(spec: &WavepacketSpec) -> Result<WCoefficients> {
    if !(spec.sigma > 0.0) || !spec.k0.is_finite() || !spec.x0.is_finite() {
        return Err(Error::DegenerateSpec("σ must be positive and k₀, x₀ finite".into()));
    }
    let sites = spec.window()?;
    let ks = lattice_momenta(spec.l);
    let full: Vec<C64> = (0..spec.l)
        .map(|n| {
            ks.iter()
                .map(|&k| {
                    let env = (-(spec.k0 - k).powi(2) / (4.0 * spec.sigma * spec.sigma)).exp();
                    C64::from_polar(env, k * (n as f64 - spec.x0))
                })
                .sum()
        })
        .collect();
    let total: f64 = full.iter().map(|a| a.norm_sqr()).sum();
    let kept: f64 = sites.iter().map(|&n| full[n].norm_sqr()).sum();
    if total == 0.0 || kept == 0.0 {
        return Err(Error::DegenerateSpec("window carries no weight".into()));
    }
    let scale = kept.sqrt();
    let amps: Vec<C64> = sites.iter().map(|&n| full[n] / scale).collect();
    let mut c = WCoefficients::from_amplitudes(&amps)?;
    c.sites = sites;
    c.truncated_weight = 1.0 - kept / total;
    Ok(c)
}

/// Supported preparation circuits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Construction {
    Linear,
    Heavyhex,
    Logdepth,
    Mcmff,
    Fusion,
}

/// A preparation circuit. Data lives on qubits `0..d`; any further qubits are ancillas
/// that end in `|0⟩`. When `success` is set, the run succeeds iff that register reads 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WPrep {
    pub construction: Construction,
    pub circuit: Circuit,
    pub n_data: usize,
    pub success: Option<usize>,
}

impl WPrep {
    fn unitary(construction: Construction, circuit: Circuit, n_data: usize) -> Self {
        Self { construction, circuit, n_data, success: None }
    }

    /// Runs from `|0…0⟩`, keeps the successful branches and returns the data-qubit
    /// state with the total success probability.
    pub fn run(&self) -> Result<(StateVector, f64)> {
        let branches = enumerate_branches(&StateVector::zero(self.circuit.n_qubits), &self.circuit)?;
        let accepted: Vec<_> = branches
            .into_iter()
            .filter(|b| self.success.map_or(true, |r| b.record.get(&r) == Some(&1)))
            .collect();
        let merged = merge_postselected(&accepted, 1e-9)?;
        Ok((restrict_to_data(&merged.state, self.n_data)?, merged.probability))
    }
}

/// Drops ancilla qubits `n_data..`, which must be in `|0⟩`.
pub fn restrict_to_data(state: &StateVector, n_data: usize) -> Result<StateVector> {
    let amps = state.amplitudes();
    let keep = &amps[..1 << n_data];
    let w: f64 = keep.iter().map(|a| a.norm_sqr()).sum();
    if (w - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("ancillas not returned to |0⟩ (data weight {w})")));
    }
    StateVector::from_amplitudes(n_data, keep.to_vec())
}

pub fn build(construction: Construction, coeffs: &WCoefficients, delta: f64) -> Result<WPrep> {
    match construction {
        Construction::Linear => linear_circuit(coeffs),
        Construction::Heavyhex => heavyhex_circuit(coeffs),
        Construction::Logdepth => logdepth_circuit(coeffs),
        Construction::Mcmff => mcmff_circuit(coeffs, delta),
        Construction::Fusion => fusion_circuit(coeffs),
    }
}

fn phase_layer(c: &mut Circuit, coeffs: &WCoefficients, qubits: &[usize]) {
    for (j, &q) in qubits.iter().enumerate() {
        c.rz(q, coeffs.phases[j]);
    }
}

/// Angle that leaves amplitude `stay` on the current qubit and moves `go` onward:
/// `cos(θ/2) ∝ stay`, `sin(θ/2) ∝ go`.
fn split_angle(stay: f64, go: f64) -> f64 {
    2.0 * go.atan2(stay)
}

/// Spreads one excitation sitting on local `center` over a segment with magnitudes `m`.
/// Local qubit 0 is skipped entirely when `pad` is set (its magnitude must be 0).
fn ladder(c: &mut Circuit, qubits: &[usize], m: &[f64], center: usize, pad: bool) {
    let s = m.len();
    let sq = |a: &[f64]| a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if center >= 1 && !(pad && center == 1) {
        c.cry(qubits[center], qubits[center - 1], split_angle(sq(&m[center..]), sq(&m[..center])));
        c.cnot(qubits[center - 1], qubits[center]);
    }
    for f in center..s.saturating_sub(1) {
        c.cry(qubits[f], qubits[f + 1], split_angle(m[f], sq(&m[f + 1..])));
        c.cnot(qubits[f + 1], qubits[f]);
    }
    for f in (1..center).rev() {
        if pad && f == 1 {
            continue;
        }
        c.cry(qubits[f], qubits[f - 1], split_angle(m[f], sq(&m[..f])));
        c.cnot(qubits[f - 1], qubits[f]);
    }
}

/// The linear construction placed on an `l`-site lattice, data qubit `j` on `coeffs.sites[j]`.
pub fn lattice_seed(coeffs: &WCoefficients, l: usize, excite: bool) -> Result<Circuit> {
    if let Some(&s) = coeffs.sites.iter().find(|&&s| s >= l) {
        return Err(Error::Index { index: s, limit: l });
    }
    let prep = linear_circuit_with(coeffs, excite)?;
    let mut c = Circuit::new(l);
    c.append_mapped(&prep.circuit, &coeffs.sites);
    Ok(c)
}

/// Center-out CRY/CNOT ladder. Even `d` is padded on the left with a zero site that
/// receives no gates. Two-qubit depth `d + 1` for odd `d`, `d + 2` for even `d ≥ 4`.
pub fn linear_circuit(coeffs: &WCoefficients) -> Result<WPrep> {
    linear_circuit_with(coeffs, true)
}

/// As [`linear_circuit`]; with `excite = false` the seeding X is omitted, so the same
/// two-qubit skeleton acts on `|0…0⟩` and leaves it unchanged.
pub fn linear_circuit_with(coeffs: &WCoefficients, excite: bool) -> Result<WPrep> {
    coeffs.check_normalized()?;
    let d = coeffs.d();
    let mut c = Circuit::new(d);
    let m = coeffs.clean_mags();
    if d == 1 {
        if excite {
            c.x(0);
        }
        return Ok(WPrep::unitary(Construction::Linear, c, d));
    }
    let pad = d % 2 == 0;
    let (qubits, mags): (Vec<usize>, Vec<f64>) = if pad {
        // Local index 0 is the pad; it is mapped to an unused label and never touched.
        (std::iter::once(usize::MAX).chain(0..d).collect(), std::iter::once(0.0).chain(m).collect())
    } else {
        ((0..d).collect(), m)
    };
    let center = (mags.len() - 1) / 2;
    if excite {
        c.x(qubits[center]);
    }
    ladder(&mut c, &qubits, &mags, center, pad);
    phase_layer(&mut c, coeffs, &(0..d).collect::<Vec<_>>());
    Ok(WPrep::unitary(Construction::Linear, c, d))
}

/// Two simultaneous ladders on segments `[0, 2η]` and `[2η+1, 4η+1]`, `η = (d−2)/4`,
/// seeded through one ancilla (qubit `d`). Requires `d ≡ 2 (mod 4)`.
/// Two-qubit depth `5 + 2η`.
pub fn heavyhex_circuit(coeffs: &WCoefficients) -> Result<WPrep> {
    heavyhex_circuit_with(coeffs, true)
}

pub fn heavyhex_circuit_with(coeffs: &WCoefficients, excite: bool) -> Result<WPrep> {
    coeffs.check_normalized()?;
    let d = coeffs.d();
    if d < 2 || d % 4 != 2 {
        return Err(Error::Unsupported(format!("heavy-hex layout needs d ≡ 2 mod 4, got {d}")));
    }
    let eta = (d - 2) / 4;
    let m = coeffs.clean_mags();
    let (a, b) = m.split_at(2 * eta + 1);
    let wa: f64 = a.iter().map(|x| x * x).sum();
    let wb: f64 = b.iter().map(|x| x * x).sum();
    let anc = d;
    let (ca, cb) = (eta, 3 * eta + 1);
    let mut c = Circuit::new(d + 1);
    if excite {
        c.ry(ca, split_angle(wb.sqrt(), wa.sqrt()));
        c.x(cb);
    }
    c.cnot(ca, anc).cnot(anc, cb).cnot(ca, anc);
    let qa: Vec<usize> = (0..=2 * eta).collect();
    let qb: Vec<usize> = (2 * eta + 1..d).collect();
    ladder(&mut c, &qa, &normalized(a), eta, false);
    ladder(&mut c, &qb, &normalized(b), eta, false);
    phase_layer(&mut c, coeffs, &(0..d).collect::<Vec<_>>());
    Ok(WPrep::unitary(Construction::Heavyhex, c, d))
}

fn normalized(m: &[f64]) -> Vec<f64> {
    let n = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        m.to_vec()
    } else {
        m.iter().map(|x| x / n).collect()
    }
}

/// One controlled rotation of the doubling tree: at `level`, node `from` hands part of its
/// amplitude to node `to = from + 2^level`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TreeRotation {
    pub level: usize,
    pub from: usize,
    pub to: usize,
    pub theta: f64,
}

fn subtree_weight(m2: &[f64], node: usize, stride: usize) -> f64 {
    (node..m2.len()).step_by(stride).map(|i| m2[i]).sum()
}

/// Rotations of the doubling tree; node `j` at level `n` owns every site `i ≡ j (mod 2ⁿ)`.
pub fn logdepth_rotations(coeffs: &WCoefficients) -> Vec<TreeRotation> {
    let m2: Vec<f64> = coeffs.clean_mags().iter().map(|x| x * x).collect();
    let d = m2.len();
    let mut out = Vec::new();
    let mut level = 0;
    while (1usize << level) < d {
        let span = 1usize << level;
        for j in 0..span.min(d - span) {
            let stay = subtree_weight(&m2, j, 2 * span).sqrt();
            let go = subtree_weight(&m2, j + span, 2 * span).sqrt();
            out.push(TreeRotation { level, from: j, to: j + span, theta: split_angle(stay, go) });
        }
        level += 1;
    }
    out
}

/// `Θᵢⱼ`: the factor rotation `j` contributes to site `i` (`cos(θⱼ/2)` if `i` stays with the
/// source node, `sin(θⱼ/2)` if it follows the target, 1 otherwise), so that `cᵢ = Πⱼ Θᵢⱼ`.
pub fn logdepth_theta_table(rotations: &[TreeRotation], d: usize) -> Vec<Vec<f64>> {
    (0..d)
        .map(|i| {
            rotations
                .iter()
                .map(|r| {
                    let stride = 2usize << r.level;
                    if i % stride == r.from {
                        (r.theta / 2.0).cos()
                    } else if i % stride == r.to {
                        (r.theta / 2.0).sin()
                    } else {
                        1.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Doubling tree of depth `2⌈log₂ d⌉` for all-to-all connectivity.
pub fn logdepth_circuit(coeffs: &WCoefficients) -> Result<WPrep> {
    logdepth_circuit_with(coeffs, true)
}

pub fn logdepth_circuit_with(coeffs: &WCoefficients, excite: bool) -> Result<WPrep> {
    coeffs.check_normalized()?;
    let d = coeffs.d();
    let rots = logdepth_rotations(coeffs);
    let table = logdepth_theta_table(&rots, d);
    for (i, row) in table.iter().enumerate() {
        let prod: f64 = row.iter().product();
        let want = coeffs.clean_mags()[i];
        if (prod - want).abs() > 1e-9 {
            return Err(Error::AngleSolve(i));
        }
    }
    let mut c = Circuit::new(d);
    if excite {
        c.x(0);
    }
    for r in &rots {
        c.cry(r.from, r.to, r.theta);
        c.cnot(r.to, r.from);
    }
    phase_layer(&mut c, coeffs, &(0..d).collect::<Vec<_>>());
    Ok(WPrep::unitary(Construction::Logdepth, c, d))
}

fn pair_weights(coeffs: &WCoefficients) -> Result<Vec<f64>> {
    let d = coeffs.d();
    if d % 2 != 0 || d == 0 {
        return Err(Error::Unsupported(format!("pairwise construction needs even d, got {d}")));
    }
    let m = coeffs.clean_mags();
    Ok((0..d / 2).map(|n| m[2 * n] * m[2 * n] + m[2 * n + 1] * m[2 * n + 1]).collect())
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::Domain(format!("δ must lie in (0, 1], got {delta}")));
    }
    Ok(())
}

/// Constant-depth preparation: a product state on the odd qubits, an odd-parity check
/// kicked back onto a cat state of the even qubits built with measurement and
/// feedforward, post-selection on the parity, then a pairwise spreading layer.
pub fn mcmff_circuit(coeffs: &WCoefficients, delta: f64) -> Result<WPrep> {
    mcmff_circuit_with(coeffs, delta, true)
}

pub fn mcmff_circuit_with(coeffs: &WCoefficients, delta: f64, excite: bool) -> Result<WPrep> {
    coeffs.check_normalized()?;
    check_delta(delta)?;
    let w = pair_weights(coeffs)?;
    let d = coeffs.d();
    let pairs = d / 2;
    let m = coeffs.clean_mags();
    let odd = |j: usize| 2 * j + 1;
    let even = |j: usize| 2 * j;
    let mut c = Circuit::new(d);
    if excite {
        for (j, &wj) in w.iter().enumerate() {
            let s = (delta * wj).sqrt().min(1.0);
            c.ry(odd(j), 2.0 * s.asin());
        }
    }
    // Bell pairs (e_{2k}, e_{2k+1}); an unpaired last even qubit stays in |+⟩.
    for j in (0..pairs).step_by(2) {
        c.h(even(j));
    }
    for j in (0..pairs).step_by(2) {
        if j + 1 < pairs {
            c.cnot(even(j), even(j + 1));
        }
    }
    for j in 0..pairs {
        c.cz(even(j), odd(j));
    }
    // Fuse neighbouring pairs into one cat state.
    let mut fused = Vec::new();
    for j in (2..pairs).step_by(2) {
        c.cnot(even(j - 1), even(j));
        fused.push((even(j), c.measure(even(j))));
    }
    for j in 0..pairs {
        let regs: Vec<usize> = fused.iter().filter(|(q, _)| *q < odd(j)).map(|&(_, r)| r).collect();
        if !regs.is_empty() {
            c.conditional(Condition::Parity { registers: regs, odd: true }, Gate::Rz { q: odd(j), theta: PI });
        }
    }
    // X-basis readout of the remaining cat members, sign fixed on q₀.
    let mut xregs = Vec::new();
    for j in (1..pairs).step_by(2) {
        c.h(even(j));
        xregs.push(c.measure(even(j)));
    }
    if !xregs.is_empty() {
        c.conditional(Condition::Parity { registers: xregs, odd: true }, Gate::Rz { q: 0, theta: PI });
    }
    c.h(0);
    let success = c.measure(0);
    for j in 0..pairs {
        c.reset(even(j));
    }
    for j in 0..pairs {
        if m[2 * j] == 0.0 && m[2 * j + 1] == 0.0 {
            continue;
        }
        c.cry(odd(j), even(j), split_angle(m[2 * j + 1], m[2 * j]));
        c.cnot(even(j), odd(j));
    }
    phase_layer(&mut c, coeffs, &(0..d).collect::<Vec<_>>());
    Ok(WPrep { construction: Construction::Mcmff, circuit: c, n_data: d, success: Some(success) })
}

/// Exact odd-parity probability `(1 − Πₙ(1 − 2δwₙ))/2`, `wₙ = c²_{2n} + c²_{2n+1}`.
pub fn predict_success(coeffs: &WCoefficients, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    let w = pair_weights(coeffs)?;
    Ok((1.0 - w.iter().map(|wn| 1.0 - 2.0 * delta * wn).product::<f64>()) / 2.0)
}

/// `1 − (1/p)Σₙ δwₙ Π_{ℓ≠n}(1 − δw_ℓ)`: one minus the single-excitation share of the
/// accepted state.
pub fn predict_infidelity(coeffs: &WCoefficients, delta: f64) -> Result<f64> {
    let p = predict_success(coeffs, delta)?;
    let w = pair_weights(coeffs)?;
    let single: f64 = (0..w.len())
        .map(|n| {
            delta * w[n]
                * w.iter().enumerate().filter(|&(l, _)| l != n).map(|(_, wl)| 1.0 - delta * wl).product::<f64>()
        })
        .sum();
    Ok(1.0 - single / p)
}

/// Infidelity of the accepted state against the target: the single-excitation amplitude of
/// pair `n` carries the extra factor `Π_{ℓ≠n}√(1 − δw_ℓ)`, which differs between pairs
/// unless the pair weights are equal.
pub fn exact_infidelity(coeffs: &WCoefficients, delta: f64) -> Result<f64> {
    let p = predict_success(coeffs, delta)?;
    let w = pair_weights(coeffs)?;
    let overlap: f64 = (0..w.len())
        .map(|n| {
            w[n] * delta.sqrt()
                * w.iter().enumerate().filter(|&(l, _)| l != n).map(|(_, wl)| (1.0 - delta * wl).sqrt()).product::<f64>()
        })
        .sum();
    Ok(1.0 - overlap * overlap / p)
}

/// Halves split for [`fusion_circuit`]: `(b, a)` magnitudes for the lower and upper halves.
/// The lower half ends on a link qubit of weight ½ and folds `c_{h−1}` into `c_{h−2}`;
/// the upper half starts on a link of weight `Σ_{n<h} cₙ²` and folds `c_h` into `c_{h+1}`.
pub fn fusion_halves(coeffs: &WCoefficients) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = coeffs.d();
    if d < 4 || d % 2 != 0 {
        return Err(Error::Unsupported(format!("fusion needs even d ≥ 4, got {d}")));
    }
    let h = d / 2;
    let m = coeffs.clean_mags();
    let low: f64 = m[..h].iter().map(|x| x * x).sum();
    let mut b = vec![0.0; h];
    if low > 0.0 {
        for n in 0..h - 2 {
            b[n] = m[n] / (2.0 * low).sqrt();
        }
        b[h - 2] = ((m[h - 2].powi(2) + m[h - 1].powi(2)) / (2.0 * low)).sqrt();
    } else {
        b[h - 2] = 0.5f64.sqrt();
    }
    b[h - 1] = 0.5f64.sqrt();
    let mut a = vec![0.0; h];
    a[0] = low.sqrt();
    a[1] = (m[h].powi(2) + m[h + 1].powi(2)).sqrt();
    a[2..].copy_from_slice(&m[h + 2..]);
    Ok((b, a))
}

/// Two half-size ladders fused by a Bell measurement on `q_{h−1}, q_h` (`h = d/2`); success
/// when `q_h` reads 1, with probability ½ for any coefficients.
pub fn fusion_circuit(coeffs: &WCoefficients) -> Result<WPrep> {
    fusion_circuit_with(coeffs, true, true)
}

/// `feedforward = false` drops the sign fix on outcome 11, for branch-wise comparisons.
pub fn fusion_circuit_with(coeffs: &WCoefficients, excite: bool, feedforward: bool) -> Result<WPrep> {
    coeffs.check_normalized()?;
    let d = coeffs.d();
    let (b, a) = fusion_halves(coeffs)?;
    let h = d / 2;
    let mut c = Circuit::new(d);
    for (mags, offset) in [(&b, 0usize), (&a, h)] {
        let half = WCoefficients {
            sites: (0..h).collect(),
            mags: mags.clone(),
            phases: vec![0.0; h],
            truncated_weight: 0.0,
        };
        let mut prep = linear_circuit_with(&half, excite)?.circuit;
        prep.ops.retain(|op| !matches!(op, crate::sim::Op::Gate(Gate::Rz { .. })));
        let map: Vec<usize> = (offset..offset + h).collect();
        c.append_mapped(&prep, &map);
    }
    c.cnot(h - 1, h).h(h - 1);
    let rb = c.measure(h - 1);
    let ra = c.measure(h);
    if feedforward {
        for q in h + 1..d {
            c.conditional(Condition::Equals { registers: vec![rb, ra], bits: vec![1, 1] }, Gate::Rz { q, theta: PI });
        }
    }
    c.reset(h - 1);
    c.reset(h);
    let m = coeffs.clean_mags();
    c.cry(h - 2, h - 1, split_angle(m[h - 2], m[h - 1]));
    c.cnot(h - 1, h - 2);
    c.cry(h + 1, h, split_angle(m[h + 1], m[h]));
    c.cnot(h, h + 1);
    phase_layer(&mut c, coeffs, &(0..d).collect::<Vec<_>>());
    Ok(WPrep { construction: Construction::Fusion, circuit: c, n_data: d, success: Some(ra) })
}

/// All branches of a fusion run keyed by the Bell outcome `(q_{h−1}, q_h)`.
pub fn fusion_branches(prep: &WPrep) -> Result<Vec<((u8, u8), crate::sim::RunOutcome)>> {
    let branches = enumerate_branches(&StateVector::zero(prep.circuit.n_qubits), &prep.circuit)?;
    Ok(branches.into_iter().map(|b| ((b.record[&0], b.record[&1]), b)).collect())
}

/// Record requiring success for post-selected runs.
pub fn success_record(prep: &WPrep) -> Record {
    prep.success.map(|r| Record::from([(r, 1u8)])).unwrap_or_default()
}
