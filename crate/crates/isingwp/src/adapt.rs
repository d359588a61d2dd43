//! ADAPT-VQE with translation-invariant, real operator pools.
//!
//! A pool operator `Ô = Σₙ Σ_w w(n)` is a sum of shifted Pauli words with an odd number of
//! `Y` factors, so `e^{iθÔ}` is real. Its unitary is the ordered product of exponentials
//! over commuting groups of strings, built greedily in shift order from reflection-closed
//! pairs. The product equals `e^{iθÔ}` exactly when every string commutes; for bond
//! operators such as `YZ + ZY` it is the even/odd brickwall that the compiled circuits
//! implement.

use std::f64::consts::FRAC_PI_2;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{energy_density_terms, hamiltonian_terms, Boundary, IsingModel};
use crate::pauli::{Pauli, PauliString};
use crate::sim::{Circuit, SparseObservable, StateVector};
use crate::wstate::WavepacketSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PoolId {
    O1,
    O3,
    O5,
    O7,
}

impl PoolId {
    fn order(self) -> u8 {
        match self {
            PoolId::O1 => 1,
            PoolId::O3 => 3,
            PoolId::O5 => 5,
            PoolId::O7 => 7,
        }
    }
}

/// Every operator with the commutator order at which it enters; pools keep this order.
const OPERATORS: &[(&[&str], u8)] = &[
    (&["Y"], 1),
    (&["ZYZ"], 3),
    (&["YZ", "ZY"], 1),
    (&["YX", "XY"], 3),
    (&["ZXY", "YXZ"], 3),
    (&["ZYX", "XYZ"], 5),
    (&["YXX", "XXY"], 5),
    (&["YYY"], 5),
    (&["ZXYZ", "ZYXZ"], 5),
    (&["YZZ", "ZZY"], 5),
    (&["ZXXY", "YXXZ"], 5),
    (&["ZIY", "YIZ"], 7),
    (&["YZX", "XZY"], 7),
    (&["ZZYZ", "ZYZZ"], 7),
    (&["ZXYX", "XYXZ"], 7),
    (&["XYX"], 7),
    (&["YYYZ", "ZYYY"], 7),
    (&["ZYXX", "XXYZ"], 7),
    (&["YXXX", "XXXY"], 7),
    (&["ZXXYZ", "ZYXXZ"], 7),
    (&["YXZZ", "ZZXY"], 7),
    (&["YXYY", "YYXY"], 7),
    (&["ZYIZ", "ZIYZ"], 7),
    (&["ZXZY", "YZXZ"], 7),
    (&["ZXYXZ"], 7),
    (&["XIY", "YIX"], 7),
    (&["ZXXXY", "YXXXZ"], 7),
];

/// Circuit template used by [`OperatorPool::compile`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Kernel {
    /// `RY` on every site.
    RotY,
    /// `CZ̄ · RY · CZ̄`.
    Zyz,
    /// Per bond group: `CZ · RY ⊗ RY · CZ`.
    BondYz,
    /// As `BondYz` inside a Hadamard frame.
    BondYx,
    /// Per group: `H̃_S · CZ̄ · RX · CZ̄ · H̃_S` with `S` the group's `Y` sites.
    Zxy,
    /// Basis change, CNOT parity ladder and `RZ` per string.
    Generic,
}

fn kernel_for(words: &[&str]) -> Kernel {
    match words {
        ["Y"] => Kernel::RotY,
        ["ZYZ"] => Kernel::Zyz,
        ["YZ", "ZY"] => Kernel::BondYz,
        ["YX", "XY"] => Kernel::BondYx,
        ["ZXY", "YXZ"] => Kernel::Zxy,
        _ => Kernel::Generic,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolOperator {
    /// First word, e.g. `"YZ"` for `Σ(YZ + ZY)`.
    pub label: String,
    pub words: Vec<String>,
    pub kernel: Kernel,
    /// Ordered commuting groups of shifted strings.
    groups: Vec<Vec<PauliString>>,
}

impl PoolOperator {
    pub fn groups(&self) -> &[Vec<PauliString>] {
        &self.groups
    }

    /// All strings of `Ô` in shift order.
    pub fn strings(&self) -> Vec<PauliString> {
        self.groups.iter().flatten().cloned().collect()
    }

    /// `Π_g exp(iθ Σ_{P∈g} P)` applied in place.
    pub fn apply(&self, state: &mut StateVector, theta: f64) -> Result<()> {
        for g in &self.groups {
            for p in g {
                state.apply_pauli_rotation(p, theta)?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorPool {
    pub id: PoolId,
    pub l: usize,
    pub boundary: Boundary,
    pub operators: Vec<PoolOperator>,
}

/// Sites of the `Z`, `X` and `Y` factors of a three-site `ZXY`-type string.
fn zxy_sites(p: &PauliString) -> (usize, usize, usize) {
    let find = |q: Pauli| p.factors().iter().find(|&&(_, f)| f == q).map(|&(s, _)| s).unwrap();
    (find(Pauli::Z), find(Pauli::X), find(Pauli::Y))
}

/// Period-4 split of `ZXY + YXZ`: with `m(c) = 1` for centers `c ≡ s, s+1 (mod 4)`, the
/// strings `Z_{c−1}X_cY_{c+1}` with `m(c) = 1` and `Y_{c−1}X_cZ_{c+1}` with `m(c) = 0` commute,
/// share one `H̃` set and, for `s ≡ L/2 (mod 2)`, map onto each other under reflection.
/// Listing them first lets the greedy colouring find the two-layer split.
fn zxy_first_layer(p: &PauliString, l: usize) -> bool {
    let (z, x, _) = zxy_sites(p);
    let zxy = (z + 1) % l == x;
    let s = (l / 2) % 2;
    let m = (x + 4 - s) % 4 < 2;
    zxy == m
}

fn compatible(kernel: Kernel, a: &PauliString, b: &PauliString) -> bool {
    if !a.commutes_with(b) {
        return false;
    }
    if kernel == Kernel::Zxy {
        // One rotation per center, and no site needs H̃ for one string but not the other.
        let (za, xa, ya) = zxy_sites(a);
        let (zb, xb, yb) = zxy_sites(b);
        return xa != xb && ya != zb && za != yb;
    }
    if matches!(kernel, Kernel::BondYz | Kernel::BondYx) {
        // Each rotated site may sit on exactly one CZ bond of the group.
        let bond = |p: &PauliString| (p.factors()[0].0, p.factors()[1].0);
        let ya = a.factors().iter().find(|f| f.1 == Pauli::Y).map(|f| f.0);
        let yb = b.factors().iter().find(|f| f.1 == Pauli::Y).map(|f| f.0);
        let (sa, sb) = (bond(a), bond(b));
        let touches = |y: Option<usize>, (u, v): (usize, usize)| y.is_some_and(|y| y == u || y == v);
        return sa == sb || (!touches(ya, sb) && !touches(yb, sa));
    }
    true
}

fn shifted_strings(words: &[&str], l: usize, boundary: Boundary) -> Vec<PauliString> {
    let mut out: Vec<PauliString> = Vec::new();
    for n in 0..l {
        for w in words {
            if boundary == Boundary::Obc && n + w.len() > l {
                continue;
            }
            let p = PauliString::from_word(1.0, w, n, l);
            match out.iter_mut().find(|q| q.same_operator(&p)) {
                Some(q) => q.coeff += 1.0,
                None => out.push(p),
            }
        }
    }
    out
}

/// Greedy colouring over reflection orbits `{P, R(P)}`, `R: n → L−1−n`, so every group is
/// closed under `R` and the operator's unitary commutes with the reflection.
fn greedy_groups(kernel: Kernel, strings: Vec<PauliString>, l: usize) -> Vec<Vec<PauliString>> {
    let mut taken = vec![false; strings.len()];
    let mut units: Vec<Vec<PauliString>> = Vec::new();
    for i in 0..strings.len() {
        if taken[i] {
            continue;
        }
        taken[i] = true;
        let p = &strings[i];
        let mirror = p.reflected(l);
        let partner = (0..strings.len()).find(|&j| !taken[j] && strings[j].same_operator(&mirror));
        match partner {
            Some(j) if compatible(kernel, p, &strings[j]) => {
                taken[j] = true;
                units.push(vec![p.clone(), strings[j].clone()]);
            }
            _ => units.push(vec![p.clone()]),
        }
    }
    let mut groups: Vec<Vec<PauliString>> = Vec::new();
    for unit in units {
        match groups.iter_mut().find(|g| g.iter().all(|q| unit.iter().all(|p| compatible(kernel, q, p)))) {
            Some(g) => g.extend(unit),
            None => groups.push(unit),
        }
    }
    groups
}

/// Pool `id` on `l` sites. Under OBC every string that would wrap from `q_{L−1}` to `q₀`
/// is dropped, which can leave an operator empty; such operators are omitted.
pub fn build_pool(id: PoolId, l: usize, boundary: Boundary) -> Result<OperatorPool> {
    let longest = OPERATORS.iter().filter(|(_, o)| *o <= id.order()).flat_map(|(w, _)| w.iter()).map(|w| w.len()).max();
    if l < 3 || (boundary == Boundary::Pbc && longest.is_some_and(|m| l < m)) {
        return Err(Error::InvalidModel(format!("pool {id:?} needs more than {l} sites")));
    }
    let operators = OPERATORS
        .iter()
        .filter(|(_, o)| *o <= id.order())
        .filter_map(|(words, _)| {
            let kernel = kernel_for(words);
            let mut strings = shifted_strings(words, l, boundary);
            if kernel == Kernel::Zxy {
                strings.sort_by_key(|p| !zxy_first_layer(p, l));
            }
            (!strings.is_empty()).then(|| PoolOperator {
                label: words[0].to_string(),
                words: words.iter().map(|w| w.to_string()).collect(),
                kernel,
                groups: greedy_groups(kernel, strings, l),
            })
        })
        .collect();
    Ok(OperatorPool { id, l, boundary, operators })
}

impl OperatorPool {
    pub fn len(&self) -> usize {
        self.operators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.operators.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.operators.iter().position(|o| o.label == label)
    }

    fn operator(&self, op: usize) -> Result<&PoolOperator> {
        self.operators.get(op).ok_or(Error::Index { index: op, limit: self.operators.len() })
    }

    /// Bonds in even, odd, wrap order so `CZ̄` packs into two layers for even `L`.
    fn bonds(&self) -> Vec<(usize, usize)> {
        let l = self.l;
        let mut b: Vec<(usize, usize)> = (0..l - 1).step_by(2).map(|n| (n, n + 1)).collect();
        b.extend((1..l - 1).step_by(2).map(|n| (n, n + 1)));
        if self.boundary == Boundary::Pbc {
            b.push((l - 1, 0));
        }
        b
    }

    fn cz_bar(&self, c: &mut Circuit) {
        for (a, b) in self.bonds() {
            c.cz(a, b);
        }
    }

    /// Circuit for `Π_g exp(iθ Σ_{P∈g} P)` on `L` qubits.
    pub fn compile(&self, op: usize, theta: f64) -> Result<Circuit> {
        let o = self.operator(op)?;
        let mut c = Circuit::new(self.l);
        match o.kernel {
            Kernel::RotY => {
                for p in o.groups.iter().flatten() {
                    c.ry(site_of(p, Pauli::Y), -2.0 * theta * p.coeff);
                }
            }
            Kernel::Zyz => {
                self.cz_bar(&mut c);
                for p in o.groups.iter().flatten() {
                    c.ry(site_of(p, Pauli::Y), -2.0 * theta * p.coeff);
                }
                self.cz_bar(&mut c);
            }
            Kernel::BondYz | Kernel::BondYx => {
                // CZ Y_a CZ = Y_a Z_b; H(YX)H = −YZ on the same bond.
                let frame = o.kernel == Kernel::BondYx;
                let sign = if frame { 1.0 } else { -1.0 };
                for g in &o.groups {
                    let mut bonds: Vec<(usize, usize)> = g.iter().map(|p| (p.factors()[0].0, p.factors()[1].0)).collect();
                    bonds.sort_unstable();
                    bonds.dedup();
                    let mut sites: Vec<usize> = bonds.iter().flat_map(|&(a, b)| [a, b]).collect();
                    sites.sort_unstable();
                    sites.dedup();
                    if frame {
                        sites.iter().for_each(|&q| {
                            c.h(q);
                        });
                    }
                    bonds.iter().for_each(|&(a, b)| {
                        c.cz(a, b);
                    });
                    for p in g {
                        c.ry(site_of(p, Pauli::Y), sign * 2.0 * theta * p.coeff);
                    }
                    bonds.iter().for_each(|&(a, b)| {
                        c.cz(a, b);
                    });
                    if frame {
                        sites.iter().for_each(|&q| {
                            c.h(q);
                        });
                    }
                }
            }
            Kernel::Zxy => {
                // H̃_S CZ̄ X_c CZ̄ H̃_S = Z_{c−1}X_cZ_{c+1} with Z → Y on S and X → −X on S.
                for g in &o.groups {
                    let mut s: Vec<usize> = g.iter().map(|p| zxy_sites(p).2).collect();
                    s.sort_unstable();
                    s.dedup();
                    s.iter().for_each(|&q| {
                        c.ht(q);
                    });
                    self.cz_bar(&mut c);
                    for p in g {
                        let center = zxy_sites(p).1;
                        let flip = if s.contains(&center) { -1.0 } else { 1.0 };
                        c.rx(center, -2.0 * theta * p.coeff * flip);
                    }
                    self.cz_bar(&mut c);
                    s.iter().for_each(|&q| {
                        c.ht(q);
                    });
                }
            }
            Kernel::Generic => {
                for p in o.groups.iter().flatten() {
                    pauli_evolution(&mut c, p, theta);
                }
            }
        }
        Ok(c)
    }
}

fn site_of(p: &PauliString, q: Pauli) -> usize {
    p.factors().iter().find(|&&(_, f)| f == q).map(|&(s, _)| s).expect("pool string lacks the rotated factor")
}

/// Appends `exp(iθ·coeff·P)`: rotate every factor to `Z`, fold parity onto the last site,
/// `RZ(−2φ)`, unfold.
pub fn pauli_evolution(c: &mut Circuit, p: &PauliString, theta: f64) {
    let f = p.factors();
    if f.is_empty() {
        return;
    }
    for &(s, q) in f {
        match q {
            Pauli::X => {
                c.h(s);
            }
            Pauli::Y => {
                c.sdg(s).h(s);
            }
            Pauli::Z => {}
        }
    }
    for w in f.windows(2) {
        c.cnot(w[0].0, w[1].0);
    }
    c.rz(f[f.len() - 1].0, -2.0 * theta * p.coeff);
    for w in f.windows(2).rev() {
        c.cnot(w[0].0, w[1].0);
    }
    for &(s, q) in f {
        match q {
            Pauli::X => {
                c.h(s);
            }
            Pauli::Y => {
                c.h(s).s(s);
            }
            Pauli::Z => {}
        }
    }
}

/// How the ansatz reference state is built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    Wavepacket,
    Zeros,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptStep {
    pub operator: usize,
    pub label: String,
    pub theta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptAnsatz {
    pub pool: PoolId,
    pub reference: Reference,
    pub steps: Vec<AdaptStep>,
}

impl AdaptAnsatz {
    pub fn empty(pool: PoolId, reference: Reference) -> Self {
        Self { pool, reference, steps: Vec::new() }
    }

    /// Operator sequence given by labels, e.g. from a stored table.
    pub fn from_labels(pool: &OperatorPool, reference: Reference, steps: &[(&str, f64)]) -> Result<Self> {
        let steps = steps
            .iter()
            .map(|&(label, theta)| {
                let operator = pool.index_of(label).ok_or_else(|| Error::Config(format!("operator {label} is not in pool {:?}", pool.id)))?;
                Ok(AdaptStep { operator, label: label.to_string(), theta })
            })
            .collect::<Result<_>>()?;
        Ok(Self { pool: pool.id, reference, steps })
    }

    pub fn thetas(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.theta).collect()
    }

    fn check(&self, pool: &OperatorPool) -> Result<()> {
        if pool.id != self.pool {
            return Err(Error::Contract(format!("ansatz uses pool {:?}, got {:?}", self.pool, pool.id)));
        }
        for s in &self.steps {
            if pool.operators.get(s.operator).map(|o| o.label.as_str()) != Some(s.label.as_str()) {
                return Err(Error::Contract(format!("step operator {} ({}) not in pool", s.operator, s.label)));
            }
        }
        Ok(())
    }

    pub fn apply(&self, pool: &OperatorPool, state: &mut StateVector) -> Result<()> {
        self.check(pool)?;
        for s in &self.steps {
            pool.operators[s.operator].apply(state, s.theta)?;
        }
        Ok(())
    }

    pub fn circuit(&self, pool: &OperatorPool) -> Result<Circuit> {
        self.check(pool)?;
        let mut c = Circuit::new(pool.l);
        for s in &self.steps {
            c.append(&pool.compile(s.operator, s.theta)?);
        }
        Ok(c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// The ansatz on `|0…0⟩`, with no seed; prepares the approximate vacuum.
pub fn prepare_vacuum(ansatz: &AdaptAnsatz, pool: &OperatorPool) -> Result<Circuit> {
    ansatz.circuit(pool)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    TotalEnergy,
    /// `Σ_{n ∈ sites} ⟨Ĥₙ⟩`.
    WindowedEnergy { sites: Vec<usize> },
}

impl Objective {
    pub fn terms(&self, model: &IsingModel) -> Result<Vec<PauliString>> {
        match self {
            Objective::TotalEnergy => hamiltonian_terms(model),
            Objective::WindowedEnergy { sites } => {
                let mut t = Vec::new();
                for &n in sites {
                    t.extend(energy_density_terms(model, n)?);
                }
                Ok(crate::pauli::canonicalize(t))
            }
        }
    }
}

/// `d + 6` sites centered on the packet, capped at `L`.
pub fn default_window(spec: &WavepacketSpec) -> Result<Vec<usize>> {
    WavepacketSpec { d: (spec.d + 6).min(spec.l), ..spec.clone() }.window()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Stop when the simplex energy spread falls below this.
    pub tol: f64,
    pub max_evals: usize,
    pub initial_step: f64,
    /// Fresh simplices built around the best point after convergence.
    pub restarts: usize,
    /// Angles are confined to `[−bound, bound]`.
    pub bound: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { tol: 1e-9, max_evals: 20_000, initial_step: 0.1, restarts: 2, bound: FRAC_PI_2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evaluations: usize,
    pub converged: bool,
}

/// Bounded Nelder–Mead. The start point is part of the first simplex, so `f` never exceeds
/// `f(x0)`.
pub fn nelder_mead<F: Fn(&[f64]) -> f64>(f: F, x0: &[f64], cfg: &OptimizerConfig) -> Minimum {
    let clamp = |x: &mut Vec<f64>| x.iter_mut().for_each(|v| *v = v.clamp(-cfg.bound, cfg.bound));
    let mut best: Vec<f64> = x0.to_vec();
    clamp(&mut best);
    let mut f_best = f(&best);
    let mut evals = 1;
    let mut converged = false;
    if x0.is_empty() {
        return Minimum { x: best, f: f_best, evaluations: evals, converged: true };
    }
    for round in 0..=cfg.restarts {
        let start_f = f_best;
        let (x, fx, e, ok) = simplex_search(&f, &best, f_best, cfg, cfg.max_evals.saturating_sub(evals));
        evals += e;
        converged = ok;
        if fx <= f_best {
            best = x;
            f_best = fx;
        }
        if !ok || (round > 0 && start_f - f_best < cfg.tol) {
            break;
        }
    }
    Minimum { x: best, f: f_best, evaluations: evals, converged }
}

fn simplex_search<F: Fn(&[f64]) -> f64>(f: &F, x0: &[f64], f0: f64, cfg: &OptimizerConfig, budget: usize) -> (Vec<f64>, f64, usize, bool) {
    let n = x0.len();
    let clamp = |x: Vec<f64>| -> Vec<f64> { x.into_iter().map(|v| v.clamp(-cfg.bound, cfg.bound)).collect() };
    let mut evals = 0usize;
    let eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        f(x)
    };
    let mut pts: Vec<(Vec<f64>, f64)> = vec![(x0.to_vec(), f0)];
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += if x[i] + cfg.initial_step <= cfg.bound { cfg.initial_step } else { -cfg.initial_step };
        let fx = eval(&x, &mut evals);
        pts.push((x, fx));
    }
    let combine = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p + t * (q - p)).collect() };
    loop {
        pts.sort_by(|a, b| a.1.total_cmp(&b.1));
        if pts[n].1 - pts[0].1 <= cfg.tol {
            return (pts[0].0.clone(), pts[0].1, evals, true);
        }
        if evals >= budget {
            return (pts[0].0.clone(), pts[0].1, evals, false);
        }
        let centroid: Vec<f64> = (0..n).map(|j| pts[..n].iter().map(|p| p.0[j]).sum::<f64>() / n as f64).collect();
        let worst = pts[n].clone();
        let xr = clamp(combine(&centroid, &worst.0, -1.0));
        let fr = eval(&xr, &mut evals);
        if fr < pts[0].1 {
            let xe = clamp(combine(&centroid, &worst.0, -2.0));
            let fe = eval(&xe, &mut evals);
            pts[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < pts[n - 1].1 {
            pts[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < worst.1 {
                let x = clamp(combine(&centroid, &xr, 0.5));
                let fx = eval(&x, &mut evals);
                (x, fx)
            } else {
                let x = clamp(combine(&centroid, &worst.0, 0.5));
                let fx = eval(&x, &mut evals);
                (x, fx)
            };
            if fc < fr.min(worst.1) {
                pts[n] = (xc, fc);
            } else {
                let b = pts[0].0.clone();
                for p in pts.iter_mut().skip(1) {
                    let x = combine(&b, &p.0, 0.5);
                    let fx = eval(&x, &mut evals);
                    *p = (x, fx);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub steps: usize,
    pub optimizer: OptimizerConfig,
    pub objective: Objective,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub operator: usize,
    pub energy: f64,
    pub evaluations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptTrace {
    /// Objective after each step, index 0 being the reference.
    pub energies: Vec<f64>,
    /// Total energy `⟨Ĥ⟩` after each step.
    pub total_energies: Vec<f64>,
    /// `1 − |⟨ψ_exact|ψ⟩|²` after each step, when an exact state was supplied.
    pub infidelities: Option<Vec<f64>>,
    pub trials: Vec<Vec<TrialSummary>>,
}

struct Evaluator<'a> {
    pool: &'a OperatorPool,
    reference: &'a StateVector,
    objective: &'a SparseObservable,
}

impl Evaluator<'_> {
    fn state(&self, ops: &[usize], thetas: &[f64]) -> StateVector {
        let mut s = self.reference.clone();
        for (&op, &t) in ops.iter().zip(thetas) {
            self.pool.operators[op].apply(&mut s, t).expect("pool sized to the lattice");
        }
        s
    }

    fn energy(&self, ops: &[usize], thetas: &[f64]) -> f64 {
        self.objective.expval(self.state(ops, thetas).amplitudes())
    }
}

fn check_lattice(model: &IsingModel, pool: &OperatorPool, reference: &Circuit) -> Result<()> {
    if pool.l != model.l || pool.boundary != model.boundary || reference.n_qubits != model.l {
        return Err(Error::Contract("model, pool and reference must share one lattice".into()));
    }
    Ok(())
}

/// Greedy ADAPT: each step trials every pool operator with full warm-started re-optimization
/// and keeps the lowest objective; ties go to the lower pool index.
pub fn adapt_run(
    model: &IsingModel,
    pool: &OperatorPool,
    reference: &Circuit,
    kind: Reference,
    config: &AdaptConfig,
    exact: Option<&StateVector>,
) -> Result<(AdaptAnsatz, AdaptTrace)> {
    check_lattice(model, pool, reference)?;
    let mut ref_state = StateVector::zero(model.l);
    ref_state.apply_unitary_circuit(reference)?;
    let objective = SparseObservable::new(model.l, &config.objective.terms(model)?)?;
    let total = SparseObservable::new(model.l, &hamiltonian_terms(model)?)?;
    let ev = Evaluator { pool, reference: &ref_state, objective: &objective };

    let mut ops: Vec<usize> = Vec::new();
    let mut thetas: Vec<f64> = Vec::new();
    let record = |ops: &[usize], thetas: &[f64], trace: &mut AdaptTrace| {
        let s = ev.state(ops, thetas);
        trace.energies.push(objective.expval(s.amplitudes()));
        trace.total_energies.push(total.expval(s.amplitudes()));
        if let (Some(inf), Some(e)) = (trace.infidelities.as_mut(), exact) {
            inf.push(1.0 - e.fidelity(&s));
        }
    };
    let mut trace = AdaptTrace { energies: Vec::new(), total_energies: Vec::new(), infidelities: exact.map(|_| Vec::new()), trials: Vec::new() };
    record(&ops, &thetas, &mut trace);

    for step in 0..config.steps {
        let results: Vec<(TrialSummary, Vec<f64>)> = (0..pool.len())
            .into_par_iter()
            .map(|op| {
                let mut trial_ops = ops.clone();
                trial_ops.push(op);
                let mut x0 = thetas.clone();
                x0.push(0.0);
                let m = nelder_mead(|x| ev.energy(&trial_ops, x), &x0, &config.optimizer);
                (TrialSummary { operator: op, energy: m.f, evaluations: m.evaluations, converged: m.converged }, m.x)
            })
            .collect();
        let best = results
            .iter()
            .filter(|(t, _)| t.converged)
            .fold(None::<&(TrialSummary, Vec<f64>)>, |acc, r| match acc {
                Some(a) if a.0.energy <= r.0.energy => Some(a),
                _ => Some(r),
            })
            .ok_or_else(|| Error::Optimizer(format!("every trial failed to converge at step {}", step + 1)))?;
        ops.push(best.0.operator);
        thetas = best.1.clone();
        trace.trials.push(results.iter().map(|r| r.0.clone()).collect());
        record(&ops, &thetas, &mut trace);
    }

    let steps = ops
        .iter()
        .zip(&thetas)
        .map(|(&op, &theta)| AdaptStep { operator: op, label: pool.operators[op].label.clone(), theta })
        .collect();
    Ok((AdaptAnsatz { pool: pool.id, reference: kind, steps }, trace))
}

/// Re-optimizes the angles of a fixed operator sequence, starting from its stored angles.
pub fn reoptimize(
    model: &IsingModel,
    pool: &OperatorPool,
    reference: &Circuit,
    ansatz: &AdaptAnsatz,
    config: &AdaptConfig,
) -> Result<(AdaptAnsatz, Minimum)> {
    check_lattice(model, pool, reference)?;
    ansatz.check(pool)?;
    let mut ref_state = StateVector::zero(model.l);
    ref_state.apply_unitary_circuit(reference)?;
    let objective = SparseObservable::new(model.l, &config.objective.terms(model)?)?;
    let ev = Evaluator { pool, reference: &ref_state, objective: &objective };
    let ops: Vec<usize> = ansatz.steps.iter().map(|s| s.operator).collect();
    let m = nelder_mead(|x| ev.energy(&ops, x), &ansatz.thetas(), &config.optimizer);
    let mut out = ansatz.clone();
    out.steps.iter_mut().zip(&m.x).for_each(|(s, &t)| s.theta = t);
    Ok((out, m))
}

/// Stored operator sequences with the couplings and packet they were trained for.
#[derive(Clone, Copy, Debug)]
pub struct ReferenceSequence {
    pub name: &'static str,
    pub lattice: usize,
    pub gx: f64,
    pub gz: f64,
    /// `None` for vacuum sequences.
    pub k0_over_pi: Option<f64>,
    pub sigma: f64,
    pub steps: &'static [(&'static str, f64)],
}

pub const REFERENCE_SEQUENCES: &[ReferenceSequence] = &[
    ReferenceSequence {
        name: "hardware_L104_k0.32",
        lattice: 104,
        gx: 1.25,
        gz: 0.15,
        k0_over_pi: Some(0.32),
        sigma: 0.13,
        steps: &[("Y", 0.0191), ("YZ", 0.0276), ("Y", -0.4497), ("ZXY", 0.0226), ("YZ", 0.0618), ("ZYZ", 0.0900), ("Y", -0.2238)],
    },
    ReferenceSequence {
        name: "statevector_L28_gx1.25",
        lattice: 28,
        gx: 1.25,
        gz: 0.15,
        k0_over_pi: Some(0.36),
        sigma: 0.13,
        steps: &[("Y", 0.1212), ("YZ", 0.0185), ("Y", -0.5452), ("ZXY", 0.0397), ("YZ", 0.0599), ("YZ", 0.0556), ("Y", -0.2637), ("ZYZ", 0.0566)],
    },
    ReferenceSequence {
        name: "statevector_L28_gx1.18",
        lattice: 28,
        gx: 1.18,
        gz: 0.08,
        k0_over_pi: Some(0.36),
        sigma: 0.13,
        steps: &[("Y", -0.3517), ("YZ", 0.0610), ("ZXY", 0.0477), ("Y", -0.1425), ("ZYZ", 0.1107), ("Y", -0.2030), ("YZ", 0.0310), ("YX", 0.0176)],
    },
    ReferenceSequence {
        name: "statevector_L28_gx1.15",
        lattice: 28,
        gx: 1.15,
        gz: 0.05,
        k0_over_pi: Some(0.36),
        sigma: 0.13,
        steps: &[("Y", -0.3866), ("YZ", 0.0700), ("ZXY", 0.0473), ("Y", 0.0201), ("ZYZ", 0.0705), ("Y", -0.3268), ("YZ", 0.0288), ("ZYZ", 0.0368)],
    },
    ReferenceSequence {
        name: "statevector_L28_gx1.08",
        lattice: 28,
        gx: 1.08,
        gz: 0.03,
        k0_over_pi: Some(0.36),
        sigma: 0.13,
        steps: &[("Y", -0.3653), ("YZ", 0.0754), ("ZXY", 0.0539), ("Y", -0.1910), ("ZYZ", 0.1234), ("Y", -0.1772), ("YZ", 0.0313), ("YX", 0.0266)],
    },
    ReferenceSequence {
        name: "mps_L256_k0.36",
        lattice: 256,
        gx: 1.25,
        gz: 0.15,
        k0_over_pi: Some(0.36),
        sigma: 0.13,
        steps: &[("Y", 0.1212), ("YZ", 0.0185), ("Y", -0.5452), ("ZXY", 0.0397), ("YZ", 0.0599), ("YZ", 0.0556), ("Y", -0.2637), ("ZYZ", 0.0566)],
    },
    ReferenceSequence {
        name: "mps_L256_k0.32",
        lattice: 256,
        gx: 1.25,
        gz: 0.15,
        k0_over_pi: Some(0.32),
        sigma: 0.13,
        steps: &[("Y", 0.0505), ("YZ", 0.0006), ("Y", -0.3983), ("ZXY", 0.0316), ("YZ", 0.0750), ("ZYZ", 0.0868), ("Y", -0.3029), ("ZYZ", 0.0349)],
    },
    ReferenceSequence {
        name: "mps_L256_k0.28",
        lattice: 256,
        gx: 1.25,
        gz: 0.15,
        k0_over_pi: Some(0.28),
        sigma: 0.13,
        steps: &[("Y", 0.0499), ("YZ", 0.0314), ("Y", -0.5092), ("ZXY", 0.0231), ("YZ", 0.0401), ("YZ", 0.0325), ("ZYZ", 0.0739), ("Y", -0.2064)],
    },
    ReferenceSequence {
        name: "mps_L256_k0.18",
        lattice: 256,
        gx: 1.25,
        gz: 0.15,
        k0_over_pi: Some(0.18),
        sigma: 0.13,
        steps: &[("Y", -0.2663), ("YZ", 0.0566), ("ZXY", 0.0470), ("Y", -0.1871), ("ZYZ", 0.0806), ("Y", -0.2214), ("YZ", 0.0524), ("ZXY", 0.0127)],
    },
    ReferenceSequence {
        name: "mps_L256_k0.20",
        lattice: 256,
        gx: 1.25,
        gz: 0.15,
        k0_over_pi: Some(0.20),
        sigma: 0.13,
        steps: &[
            ("Y", -0.3124),
            ("YZ", 0.0412),
            ("ZXY", 0.0511),
            ("Y", 0.1360),
            ("ZYZ", 0.0235),
            ("Y", -0.3669),
            ("YZ", 0.0579),
            ("ZYZ", 0.0828),
            ("Y", -0.1367),
            ("ZXY", 0.0009),
        ],
    },
    ReferenceSequence {
        name: "vacuum_L28_gx1.25",
        lattice: 28,
        gx: 1.25,
        gz: 0.15,
        k0_over_pi: None,
        sigma: 0.0,
        steps: &[("Y", -0.4735), ("YZ", 0.0244), ("ZXY", 0.0145), ("YZ", 0.0209), ("YZ", 0.0195), ("ZYZ", 0.0008), ("YX", -0.0024), ("ZYZ", -0.0029)],
    },
    ReferenceSequence {
        name: "vacuum_L28_gx1.08",
        lattice: 28,
        gx: 1.08,
        gz: 0.03,
        k0_over_pi: None,
        sigma: 0.0,
        steps: &[("Y", -0.4885), ("YZ", 0.0288), ("ZXY", 0.0194), ("YZ", 0.0248), ("YZ", 0.0235), ("Y", -0.0048), ("YX", 0.0021), ("YX", -0.0026)],
    },
];

pub fn reference_sequence(name: &str) -> Option<&'static ReferenceSequence> {
    REFERENCE_SEQUENCES.iter().find(|r| r.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::expm_hermitian;
    use crate::sim::{circuit_unitary, momentum_block_weights};
    use crate::C64;
    use nalgebra::DMatrix;

    fn dense(terms: &[PauliString], l: usize) -> DMatrix<C64> {
        let dim = 1 << l;
        let mut m = DMatrix::zeros(dim, dim);
        for t in terms {
            for c in 0..dim {
                let (r, ph) = t.apply_to_index(c);
                m[(r, c)] += ph * t.coeff;
            }
        }
        m
    }

    /// `Π_g exp(iθ Σ_g)` from dense exponentials of each group.
    fn group_product(op: &PoolOperator, theta: f64, l: usize) -> DMatrix<C64> {
        let mut u = DMatrix::identity(1 << l, 1 << l);
        for g in op.groups() {
            // exp(iθG) = exp(−iHt) with H = −G, t = θ.
            u = expm_hermitian(&(-dense(g, l)), theta) * u;
        }
        u
    }

    #[test]
    fn pool_sizes_and_nesting() {
        let sizes: Vec<usize> =
            [PoolId::O1, PoolId::O3, PoolId::O5, PoolId::O7].iter().map(|&id| build_pool(id, 8, Boundary::Pbc).unwrap().len()).collect();
        assert_eq!(sizes, vec![2, 5, 11, 27]);
        let labels = |id| build_pool(id, 8, Boundary::Pbc).unwrap().operators.into_iter().map(|o| o.label).collect::<Vec<_>>();
        assert_eq!(labels(PoolId::O3), vec!["Y", "ZYZ", "YZ", "YX", "ZXY"]);
        let o7 = labels(PoolId::O7);
        for id in [PoolId::O1, PoolId::O3, PoolId::O5] {
            assert!(labels(id).iter().all(|l| o7.contains(l)));
        }
    }

    #[test]
    fn operators_are_hermitian_and_imaginary() {
        let pool = build_pool(PoolId::O7, 5, Boundary::Pbc).unwrap();
        for op in &pool.operators {
            let m = dense(&op.strings(), 5);
            assert!((&m - m.adjoint()).norm() < 1e-12, "{}", op.label);
            assert!(m.iter().all(|z| z.re.abs() < 1e-12), "{}", op.label);
        }
    }

    #[test]
    fn open_pools_drop_wrapping_strings() {
        let pool = build_pool(PoolId::O3, 6, Boundary::Obc).unwrap();
        for op in &pool.operators {
            for p in op.strings() {
                let sites: Vec<usize> = p.factors().iter().map(|f| f.0).collect();
                assert!(!(sites.contains(&0) && sites.contains(&5)), "{p}");
                assert!(sites.windows(2).all(|w| w[1] - w[0] <= 2));
            }
        }
        assert_eq!(pool.operators[1].strings().len(), 4);
        assert!(build_pool(PoolId::O3, 2, Boundary::Pbc).is_err());
    }

    #[test]
    fn bond_groups_split_even_and_odd() {
        let pool = build_pool(PoolId::O3, 8, Boundary::Pbc).unwrap();
        let yz = &pool.operators[2];
        assert_eq!(yz.groups().len(), 2);
        assert_eq!(pool.operators[4].groups().len(), 2);
        for g in yz.groups() {
            for a in g {
                for b in g {
                    assert!(a.commutes_with(b));
                }
            }
        }
        // The period-4 split does not close around a periodic chain with L ≡ 2 (mod 4).
        assert_eq!(build_pool(PoolId::O3, 14, Boundary::Pbc).unwrap().operators[4].groups().len(), 3);
        assert_eq!(build_pool(PoolId::O3, 14, Boundary::Obc).unwrap().operators[4].groups().len(), 2);
    }

    #[test]
    fn compiled_circuits_match_group_products() {
        for (l, boundary) in [(6, Boundary::Pbc), (5, Boundary::Pbc), (6, Boundary::Obc)] {
            let pool = build_pool(PoolId::O7, l, boundary).unwrap();
            for (i, op) in pool.operators.iter().enumerate() {
                let theta = 0.3 - 0.05 * i as f64;
                let u = circuit_unitary(&pool.compile(i, theta).unwrap()).unwrap();
                let want = group_product(op, theta, l);
                assert!((&u - &want).norm() < 1e-10, "{} L={l} {boundary:?}", op.label);
            }
        }
    }

    #[test]
    fn direct_application_matches_circuit() {
        let pool = build_pool(PoolId::O5, 6, Boundary::Pbc).unwrap();
        let mut seed = StateVector::zero(6);
        seed.apply_gate(&crate::sim::Gate::H { q: 2 }).unwrap();
        seed.apply_gate(&crate::sim::Gate::Ry { q: 4, theta: 0.7 }).unwrap();
        for i in 0..pool.len() {
            let mut a = seed.clone();
            pool.operators[i].apply(&mut a, 0.41).unwrap();
            let mut b = seed.clone();
            b.apply_unitary_circuit(&pool.compile(i, 0.41).unwrap()).unwrap();
            assert!((a.fidelity(&b) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn commuting_operators_are_exact_exponentials() {
        let pool = build_pool(PoolId::O3, 8, Boundary::Pbc).unwrap();
        for i in [0, 1] {
            let u = circuit_unitary(&pool.compile(i, 0.3).unwrap()).unwrap();
            let want = expm_hermitian(&(-dense(&pool.operators[i].strings(), 8)), 0.3);
            assert!((u - want).norm() < 1e-10);
        }
    }

    #[test]
    fn o3_two_qubit_depths() {
        let pool = build_pool(PoolId::O3, 12, Boundary::Pbc).unwrap();
        let depths: Vec<usize> = (0..5).map(|i| pool.compile(i, 0.2).unwrap().two_qubit_depth()).collect();
        assert_eq!(depths, vec![0, 4, 4, 4, 8]);
    }

    #[test]
    fn compiled_ansatz_is_real() {
        let pool = build_pool(PoolId::O3, 6, Boundary::Pbc).unwrap();
        let ansatz = AdaptAnsatz::from_labels(&pool, Reference::Zeros, &[("Y", 0.3), ("ZXY", -0.2), ("YX", 0.1), ("ZYZ", 0.5), ("YZ", 0.05)]).unwrap();
        let u = circuit_unitary(&ansatz.circuit(&pool).unwrap()).unwrap();
        assert!(u.iter().all(|z| z.im.abs() < 1e-10));
    }

    #[test]
    fn translation_invariant_operators_keep_momentum() {
        let pool = build_pool(PoolId::O3, 8, Boundary::Pbc).unwrap();
        let mut psi = StateVector::zero(8);
        psi.apply_gate(&crate::sim::Gate::Ry { q: 3, theta: 1.1 }).unwrap();
        psi.apply_gate(&crate::sim::Gate::Rx { q: 5, theta: 0.4 }).unwrap();
        let before = momentum_block_weights(&psi, 8).unwrap();
        for i in [0, 1] {
            let mut s = psi.clone();
            pool.operators[i].apply(&mut s, 0.37).unwrap();
            let after = momentum_block_weights(&s, 8).unwrap();
            for (a, b) in before.iter().zip(&after) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    fn reflect(s: &StateVector) -> StateVector {
        let l = s.n_qubits();
        let amps = (0..1usize << l).map(|i| s.amplitudes()[i.reverse_bits() >> (usize::BITS as usize - l)]).collect();
        StateVector::from_amplitudes(l, amps).unwrap()
    }

    #[test]
    fn operator_unitaries_commute_with_reflection() {
        for (l, boundary) in [(8, Boundary::Pbc), (10, Boundary::Pbc), (6, Boundary::Obc), (8, Boundary::Obc)] {
            let pool = build_pool(PoolId::O7, l, boundary).unwrap();
            let mut psi = StateVector::zero(l);
            for q in 0..l {
                psi.apply_gate(&crate::sim::Gate::Ry { q, theta: 0.3 + 0.2 * q as f64 }).unwrap();
                psi.apply_gate(&crate::sim::Gate::Rz { q, theta: 0.1 * q as f64 }).unwrap();
            }
            for op in &pool.operators {
                let mut a = psi.clone();
                op.apply(&mut a, 0.43).unwrap();
                let a = reflect(&a);
                let mut b = reflect(&psi);
                op.apply(&mut b, 0.43).unwrap();
                let diff: f64 = a.amplitudes().iter().zip(b.amplitudes()).map(|(x, y)| (x - y).norm_sqr()).sum();
                assert!(diff.sqrt() < 1e-12, "{} L={l} {boundary:?}", op.label);
            }
        }
    }

    #[test]
    fn nelder_mead_minimizes_bounded_quadratic() {
        let cfg = OptimizerConfig::default();
        let m = nelder_mead(|x| (x[0] - 0.3).powi(2) + 2.0 * (x[1] + 0.2).powi(2) + 0.5 * x[0] * x[1], &[0.0, 0.0], &cfg);
        assert!(m.converged);
        // Stationary point of the quadratic.
        let det = 2.0 * 4.0 - 0.25;
        let (xs, ys) = ((0.6 * 4.0 - 0.5 * -0.8) / det, (2.0 * -0.8 - 0.5 * 0.6) / det);
        assert!((m.x[0] - xs).abs() < 1e-3 && (m.x[1] - ys).abs() < 1e-3);
        let edge = nelder_mead(|x| (x[0] - 3.0).powi(2), &[0.0], &cfg);
        assert!((edge.x[0] - FRAC_PI_2).abs() < 1e-6);
    }

    fn small_run(l: usize, steps: usize, reference: Reference) -> (AdaptAnsatz, AdaptTrace, OperatorPool) {
        let model = IsingModel::pbc(l, 1.25, 0.15).unwrap();
        let pool = build_pool(PoolId::O3, l, Boundary::Pbc).unwrap();
        let circuit = match reference {
            Reference::Zeros => Circuit::new(l),
            Reference::Wavepacket => {
                let spec = WavepacketSpec { l, k0: 0.36 * std::f64::consts::PI, sigma: 0.25, x0: 3.0, d: 5, boundary: Boundary::Pbc };
                crate::wstate::lattice_seed(&crate::wstate::coefficients(&spec).unwrap(), l, true).unwrap()
            }
        };
        let cfg = AdaptConfig { steps, optimizer: OptimizerConfig::default(), objective: Objective::TotalEnergy };
        let (a, t) = adapt_run(&model, &pool, &circuit, reference, &cfg, None).unwrap();
        (a, t, pool)
    }

    #[test]
    fn zero_steps_reproduce_reference_energy() {
        let (a, t, _) = small_run(6, 0, Reference::Wavepacket);
        assert!(a.steps.is_empty());
        let model = IsingModel::pbc(6, 1.25, 0.15).unwrap();
        let spec = WavepacketSpec { l: 6, k0: 0.36 * std::f64::consts::PI, sigma: 0.25, x0: 3.0, d: 5, boundary: Boundary::Pbc };
        let w = crate::wstate::coefficients(&spec).unwrap();
        let mut s = StateVector::zero(6);
        s.apply_unitary_circuit(&crate::wstate::lattice_seed(&w, 6, true).unwrap()).unwrap();
        let e = crate::sim::expval(&s, &hamiltonian_terms(&model).unwrap()).unwrap();
        assert!((t.energies[0] - e).abs() < 1e-12);
    }

    #[test]
    fn greedy_energies_non_increasing() {
        let (a, t, pool) = small_run(6, 3, Reference::Wavepacket);
        assert_eq!(a.steps.len(), 3);
        assert!(t.energies.windows(2).all(|w| w[1] <= w[0]));
        // The reported energy is reproduced by the compiled circuit.
        let spec = WavepacketSpec { l: 6, k0: 0.36 * std::f64::consts::PI, sigma: 0.25, x0: 3.0, d: 5, boundary: Boundary::Pbc };
        let mut s = StateVector::zero(6);
        s.apply_unitary_circuit(&crate::wstate::lattice_seed(&crate::wstate::coefficients(&spec).unwrap(), 6, true).unwrap()).unwrap();
        s.apply_unitary_circuit(&a.circuit(&pool).unwrap()).unwrap();
        let model = IsingModel::pbc(6, 1.25, 0.15).unwrap();
        assert!((crate::sim::expval(&s, &hamiltonian_terms(&model).unwrap()).unwrap() - t.energies[3]).abs() < 1e-10);
    }

    #[test]
    fn vacuum_run_approaches_ground_energy() {
        let (a, t, pool) = small_run(8, 4, Reference::Zeros);
        let (e0, _) = crate::spectra::vacuum_state(&IsingModel::pbc(8, 1.25, 0.15).unwrap()).unwrap();
        let last = *t.energies.last().unwrap();
        assert!(last - e0 < 1e-2 * 8.0, "{last} vs {e0}");
        let mut s = StateVector::zero(8);
        s.apply_unitary_circuit(&prepare_vacuum(&a, &pool).unwrap()).unwrap();
        assert!(momentum_block_weights(&s, 8).unwrap()[0] > 0.99);
    }

    #[test]
    fn empty_vacuum_circuit_is_identity() {
        let pool = build_pool(PoolId::O3, 5, Boundary::Pbc).unwrap();
        let c = prepare_vacuum(&AdaptAnsatz::empty(PoolId::O3, Reference::Wavepacket), &pool).unwrap();
        assert!(c.ops.is_empty());
    }

    #[test]
    fn ansatz_json_round_trip() {
        let pool = build_pool(PoolId::O3, 6, Boundary::Pbc).unwrap();
        let seq = reference_sequence("statevector_L28_gx1.25").unwrap();
        let a = AdaptAnsatz::from_labels(&pool, Reference::Wavepacket, seq.steps).unwrap();
        assert_eq!(a.steps.len(), 8);
        assert_eq!(AdaptAnsatz::from_json(&a.to_json().unwrap()).unwrap(), a);
        assert!(AdaptAnsatz::from_labels(&pool, Reference::Wavepacket, &[("YYY", 0.1)]).is_err());
    }

    #[test]
    fn reoptimization_never_raises_energy() {
        let l = 8;
        let model = IsingModel::pbc(l, 1.25, 0.15).unwrap();
        let pool = build_pool(PoolId::O3, l, Boundary::Pbc).unwrap();
        let seq = reference_sequence("vacuum_L28_gx1.25").unwrap();
        let a = AdaptAnsatz::from_labels(&pool, Reference::Zeros, seq.steps).unwrap();
        let cfg = AdaptConfig { steps: 0, optimizer: OptimizerConfig::default(), objective: Objective::TotalEnergy };
        let reference = Circuit::new(l);
        let mut s = StateVector::zero(l);
        a.apply(&pool, &mut s).unwrap();
        let before = crate::sim::expval(&s, &hamiltonian_terms(&model).unwrap()).unwrap();
        let (_, m) = reoptimize(&model, &pool, &reference, &a, &cfg).unwrap();
        assert!(m.f <= before + 1e-12);
    }

    #[test]
    fn windowed_objective_covers_packet() {
        let spec = WavepacketSpec { l: 20, k0: 1.0, sigma: 0.2, x0: 10.0, d: 7, boundary: Boundary::Pbc };
        let w = default_window(&spec).unwrap();
        assert_eq!(w.len(), 13);
        assert_eq!(w[0], 4);
        let model = IsingModel::pbc(20, 1.25, 0.15).unwrap();
        let terms = Objective::WindowedEnergy { sites: w }.terms(&model).unwrap();
        assert!(terms.iter().all(|t| t.factors().iter().all(|f| (3..=17).contains(&f.0))));
    }
}
