//! Dense statevector engine with mid-circuit measurement, feedforward and resets.
//!
//! Basis index bit `n` holds qubit `qₙ` (little-endian).

use std::collections::BTreeMap;
use std::f64::consts::FRAC_1_SQRT_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pauli::{i_pow, PauliString};
use crate::C64;

/// Branches lighter than this are dropped during enumeration.
pub const PRUNE_PROBABILITY: f64 = 1e-20;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);
const I: C64 = C64::new(0.0, 1.0);

#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    n_qubits: usize,
    amps: Vec<C64>,
}

impl StateVector {
    /// `|0…0⟩` on `n_qubits` qubits.
    pub fn zero(n_qubits: usize) -> Self {
        Self::basis(n_qubits, 0)
    }

    pub fn basis(n_qubits: usize, index: usize) -> Self {
        assert!(n_qubits < usize::BITS as usize - 1, "too many qubits");
        let mut amps = vec![ZERO; 1 << n_qubits];
        amps[index] = ONE;
        Self { n_qubits, amps }
    }

    pub fn from_amplitudes(n_qubits: usize, amps: Vec<C64>) -> Result<Self> {
        if amps.len() != 1 << n_qubits {
            return Err(Error::Contract(format!(
                "{} amplitudes do not describe {} qubits",
                amps.len(),
                n_qubits
            )));
        }
        Ok(Self { n_qubits, amps })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amps
    }

    pub fn amplitudes_mut(&mut self) -> &mut [C64] {
        &mut self.amps
    }

    pub fn into_amplitudes(self) -> Vec<C64> {
        self.amps
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn normalize(&mut self) -> Result<()> {
        let n = self.norm_sqr().sqrt();
        if n == 0.0 {
            return Err(Error::ZeroProbability);
        }
        let inv = 1.0 / n;
        self.amps.iter_mut().for_each(|a| *a *= inv);
        Ok(())
    }

    /// `⟨self|other⟩`.
    pub fn inner(&self, other: &StateVector) -> C64 {
        assert_eq!(self.n_qubits, other.n_qubits, "qubit counts differ");
        self.amps.iter().zip(&other.amps).map(|(a, b)| a.conj() * b).sum()
    }

    /// `|⟨self|other⟩|²`.
    pub fn fidelity(&self, other: &StateVector) -> f64 {
        self.inner(other).norm_sqr()
    }

    pub fn apply_gate(&mut self, gate: &Gate) -> Result<()> {
        gate.check(self.n_qubits)?;
        match *gate {
            Gate::X { q } => self.apply_1q(q, [[ZERO, ONE], [ONE, ZERO]]),
            Gate::H { q } => {
                let h = C64::new(FRAC_1_SQRT_2, 0.0);
                self.apply_1q(q, [[h, h], [h, -h]])
            }
            Gate::S { q } => self.apply_diag(q, ONE, I),
            Gate::Sdg { q } => self.apply_diag(q, ONE, -I),
            Gate::Ht { q } => {
                let h = FRAC_1_SQRT_2;
                self.apply_1q(q, [[C64::new(h, 0.0), C64::new(0.0, -h)], [C64::new(0.0, h), C64::new(-h, 0.0)]])
            }
            Gate::Rx { q, theta } => {
                let (s, c) = (theta / 2.0).sin_cos();
                let d = C64::new(c, 0.0);
                let o = C64::new(0.0, -s);
                self.apply_1q(q, [[d, o], [o, d]])
            }
            Gate::Ry { q, theta } => self.apply_1q(q, ry_matrix(theta)),
            Gate::Rz { q, theta } => {
                let p = C64::from_polar(1.0, -theta / 2.0);
                self.apply_diag(q, p, p.conj())
            }
            Gate::Cnot { control, target } => {
                let (cm, tm) = (1 << control, 1 << target);
                for i in 0..self.amps.len() {
                    if i & cm != 0 && i & tm == 0 {
                        self.amps.swap(i, i | tm);
                    }
                }
            }
            Gate::Cz { a, b } => {
                let m = (1 << a) | (1 << b);
                for (i, amp) in self.amps.iter_mut().enumerate() {
                    if i & m == m {
                        *amp = -*amp;
                    }
                }
            }
            Gate::Rzz { a, b, theta } => {
                let m = (1 << a) | (1 << b);
                let even = C64::from_polar(1.0, -theta / 2.0);
                let odd = even.conj();
                for (i, amp) in self.amps.iter_mut().enumerate() {
                    *amp *= if (i & m).count_ones() % 2 == 0 { even } else { odd };
                }
            }
            Gate::Cry { control, target, theta } => {
                let [[a, b], [c, d]] = ry_matrix(theta);
                let (cm, tm) = (1 << control, 1 << target);
                for i in 0..self.amps.len() {
                    if i & cm != 0 && i & tm == 0 {
                        let (u, v) = (self.amps[i], self.amps[i | tm]);
                        self.amps[i] = a * u + b * v;
                        self.amps[i | tm] = c * u + d * v;
                    }
                }
            }
        }
        Ok(())
    }

    fn apply_1q(&mut self, q: usize, m: [[C64; 2]; 2]) {
        let step = 1usize << q;
        for base in (0..self.amps.len()).step_by(2 * step) {
            for i in base..base + step {
                let (u, v) = (self.amps[i], self.amps[i + step]);
                self.amps[i] = m[0][0] * u + m[0][1] * v;
                self.amps[i + step] = m[1][0] * u + m[1][1] * v;
            }
        }
    }

    fn apply_diag(&mut self, q: usize, d0: C64, d1: C64) {
        let mask = 1usize << q;
        for (i, amp) in self.amps.iter_mut().enumerate() {
            *amp *= if i & mask == 0 { d0 } else { d1 };
        }
    }

    /// Applies the Pauli operator of `p`, ignoring its coefficient.
    pub fn apply_pauli(&mut self, p: &PauliString) -> Result<()> {
        self.check_sites(p)?;
        let (flip, sign, ny) = p.masks();
        let ph = i_pow(ny);
        let mut out = vec![ZERO; self.amps.len()];
        for (i, &a) in self.amps.iter().enumerate() {
            let s = if (i & sign).count_ones() % 2 == 1 { -ph } else { ph };
            out[i ^ flip] = s * a;
        }
        self.amps = out;
        Ok(())
    }

    /// Applies `exp(iθ·coeff·P)` in place; `P² = 1` gives `cos φ + i sin φ P`.
    pub fn apply_pauli_rotation(&mut self, p: &PauliString, theta: f64) -> Result<()> {
        self.check_sites(p)?;
        let phi = theta * p.coeff;
        let (flip, sign, ny) = p.masks();
        let (c, s) = (phi.cos(), phi.sin());
        let parity = |i: usize| if (i & sign).count_ones() % 2 == 1 { -1.0 } else { 1.0 };
        if flip == 0 {
            // Diagonal: ny = 0, eigenvalue ±1 per index.
            let (plus, minus) = (C64::new(c, s), C64::new(c, -s));
            for (i, a) in self.amps.iter_mut().enumerate() {
                *a *= if parity(i) > 0.0 { plus } else { minus };
            }
            return Ok(());
        }
        // i·sin φ·i^{ny}, then ±1 from the sign mask of the source index.
        let k = I * s * i_pow(ny);
        let low = flip & flip.wrapping_neg();
        for i in 0..self.amps.len() {
            if i & low != 0 {
                continue;
            }
            let j = i ^ flip;
            let (ai, aj) = (self.amps[i], self.amps[j]);
            self.amps[i] = ai * c + k * parity(j) * aj;
            self.amps[j] = aj * c + k * parity(i) * ai;
        }
        Ok(())
    }

    fn check_sites(&self, p: &PauliString) -> Result<()> {
        match p.max_site() {
            Some(s) if s >= self.n_qubits => Err(Error::Index { index: s, limit: self.n_qubits }),
            _ => Ok(()),
        }
    }

    /// Probability that qubit `q` reads 1.
    pub fn prob_one(&self, q: usize) -> f64 {
        let mask = 1usize << q;
        self.amps.iter().enumerate().filter(|(i, _)| i & mask != 0).map(|(_, a)| a.norm_sqr()).sum()
    }

    /// Projects qubit `q` onto `bit` without renormalizing.
    fn project(&mut self, q: usize, bit: u8) {
        let mask = 1usize << q;
        for (i, amp) in self.amps.iter_mut().enumerate() {
            if ((i & mask != 0) as u8) != bit {
                *amp = ZERO;
            }
        }
    }

    /// Runs a measurement-free circuit in place.
    pub fn apply_unitary_circuit(&mut self, circuit: &Circuit) -> Result<()> {
        if circuit.n_qubits != self.n_qubits {
            return Err(Error::Contract(format!(
                "circuit has {} qubits, state has {}",
                circuit.n_qubits, self.n_qubits
            )));
        }
        for op in &circuit.ops {
            match op {
                Op::Gate(g) => self.apply_gate(g)?,
                _ => return Err(Error::Contract("circuit contains measurements".into())),
            }
        }
        Ok(())
    }
}

fn ry_matrix(theta: f64) -> [[C64; 2]; 2] {
    let (s, c) = (theta / 2.0).sin_cos();
    [[C64::new(c, 0.0), C64::new(-s, 0.0)], [C64::new(s, 0.0), C64::new(c, 0.0)]]
}

/// `H̃ = S·H·S†`; `RZZ(θ) = exp(−iθZZ/2)`; `CRY` rotates the target by `RY(θ)` when the control is 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Gate {
    X { q: usize },
    H { q: usize },
    S { q: usize },
    Sdg { q: usize },
    Ht { q: usize },
    Rx { q: usize, theta: f64 },
    Ry { q: usize, theta: f64 },
    Rz { q: usize, theta: f64 },
    Cnot { control: usize, target: usize },
    Cz { a: usize, b: usize },
    Rzz { a: usize, b: usize, theta: f64 },
    Cry { control: usize, target: usize, theta: f64 },
}

impl Gate {
    pub fn qubits(&self) -> Vec<usize> {
        match *self {
            Gate::X { q }
            | Gate::H { q }
            | Gate::S { q }
            | Gate::Sdg { q }
            | Gate::Ht { q }
            | Gate::Rx { q, .. }
            | Gate::Ry { q, .. }
            | Gate::Rz { q, .. } => vec![q],
            Gate::Cnot { control, target } | Gate::Cry { control, target, .. } => vec![control, target],
            Gate::Cz { a, b } | Gate::Rzz { a, b, .. } => vec![a, b],
        }
    }

    pub fn is_two_qubit(&self) -> bool {
        self.qubits().len() == 2
    }

    pub fn name(&self) -> &'static str {
        match self {
            Gate::X { .. } => "x",
            Gate::H { .. } => "h",
            Gate::S { .. } => "s",
            Gate::Sdg { .. } => "sdg",
            Gate::Ht { .. } => "ht",
            Gate::Rx { .. } => "rx",
            Gate::Ry { .. } => "ry",
            Gate::Rz { .. } => "rz",
            Gate::Cnot { .. } => "cnot",
            Gate::Cz { .. } => "cz",
            Gate::Rzz { .. } => "rzz",
            Gate::Cry { .. } => "cry",
        }
    }

    /// The same gate with qubits relabelled through `map`.
    pub fn remapped(&self, map: &[usize]) -> Gate {
        let m = |q: usize| map[q];
        match *self {
            Gate::X { q } => Gate::X { q: m(q) },
            Gate::H { q } => Gate::H { q: m(q) },
            Gate::S { q } => Gate::S { q: m(q) },
            Gate::Sdg { q } => Gate::Sdg { q: m(q) },
            Gate::Ht { q } => Gate::Ht { q: m(q) },
            Gate::Rx { q, theta } => Gate::Rx { q: m(q), theta },
            Gate::Ry { q, theta } => Gate::Ry { q: m(q), theta },
            Gate::Rz { q, theta } => Gate::Rz { q: m(q), theta },
            Gate::Cnot { control, target } => Gate::Cnot { control: m(control), target: m(target) },
            Gate::Cz { a, b } => Gate::Cz { a: m(a), b: m(b) },
            Gate::Rzz { a, b, theta } => Gate::Rzz { a: m(a), b: m(b), theta },
            Gate::Cry { control, target, theta } => Gate::Cry { control: m(control), target: m(target), theta },
        }
    }

    fn check(&self, n_qubits: usize) -> Result<()> {
        let qs = self.qubits();
        for &q in &qs {
            if q >= n_qubits {
                return Err(Error::Index { index: q, limit: n_qubits });
            }
        }
        if qs.len() == 2 && qs[0] == qs[1] {
            return Err(Error::DuplicateQubit(qs[0]));
        }
        Ok(())
    }
}

/// Classical predicate over measured registers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Condition {
    /// Holds when the XOR of the registers equals `odd`.
    Parity { registers: Vec<usize>, odd: bool },
    /// Holds when every register equals the matching bit.
    Equals { registers: Vec<usize>, bits: Vec<u8> },
}

impl Condition {
    pub fn registers(&self) -> &[usize] {
        match self {
            Condition::Parity { registers, .. } | Condition::Equals { registers, .. } => registers,
        }
    }

    pub fn holds(&self, record: &Record) -> bool {
        match self {
            Condition::Parity { registers, odd } => {
                let p = registers.iter().fold(0u8, |acc, r| acc ^ record[r]);
                (p == 1) == *odd
            }
            Condition::Equals { registers, bits } => registers.iter().zip(bits).all(|(r, &b)| record[r] == b),
        }
    }

    fn shifted(&self, offset: usize) -> Condition {
        match self {
            Condition::Parity { registers, odd } => Condition::Parity {
                registers: registers.iter().map(|r| r + offset).collect(),
                odd: *odd,
            },
            Condition::Equals { registers, bits } => Condition::Equals {
                registers: registers.iter().map(|r| r + offset).collect(),
                bits: bits.clone(),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    Gate(Gate),
    Measure { qubit: usize, register: usize },
    /// Measure into `register`, then flip the qubit back to 0 if it read 1.
    Reset { qubit: usize, register: usize },
    Conditional { condition: Condition, gate: Gate },
}

/// Ordered operation list. Registers are numbered in allocation order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Circuit {
    pub n_qubits: usize,
    pub n_registers: usize,
    pub ops: Vec<Op>,
}

impl Circuit {
    pub fn new(n_qubits: usize) -> Self {
        Self { n_qubits, n_registers: 0, ops: Vec::new() }
    }

    pub fn gate(&mut self, g: Gate) -> &mut Self {
        self.ops.push(Op::Gate(g));
        self
    }

    pub fn x(&mut self, q: usize) -> &mut Self {
        self.gate(Gate::X { q })
    }

    pub fn h(&mut self, q: usize) -> &mut Self {
        self.gate(Gate::H { q })
    }

    pub fn s(&mut self, q: usize) -> &mut Self {
        self.gate(Gate::S { q })
    }

    pub fn sdg(&mut self, q: usize) -> &mut Self {
        self.gate(Gate::Sdg { q })
    }

    pub fn ht(&mut self, q: usize) -> &mut Self {
        self.gate(Gate::Ht { q })
    }

    pub fn rx(&mut self, q: usize, theta: f64) -> &mut Self {
        self.gate(Gate::Rx { q, theta })
    }

    pub fn ry(&mut self, q: usize, theta: f64) -> &mut Self {
        self.gate(Gate::Ry { q, theta })
    }

    pub fn rz(&mut self, q: usize, theta: f64) -> &mut Self {
        self.gate(Gate::Rz { q, theta })
    }

    pub fn cnot(&mut self, control: usize, target: usize) -> &mut Self {
        self.gate(Gate::Cnot { control, target })
    }

    pub fn cz(&mut self, a: usize, b: usize) -> &mut Self {
        self.gate(Gate::Cz { a, b })
    }

    pub fn rzz(&mut self, a: usize, b: usize, theta: f64) -> &mut Self {
        self.gate(Gate::Rzz { a, b, theta })
    }

    pub fn cry(&mut self, control: usize, target: usize, theta: f64) -> &mut Self {
        self.gate(Gate::Cry { control, target, theta })
    }

    /// Appends a Z-basis measurement and returns its register.
    pub fn measure(&mut self, qubit: usize) -> usize {
        let register = self.n_registers;
        self.n_registers += 1;
        self.ops.push(Op::Measure { qubit, register });
        register
    }

    /// Appends a reset and returns the register recording the pre-reset outcome.
    pub fn reset(&mut self, qubit: usize) -> usize {
        let register = self.n_registers;
        self.n_registers += 1;
        self.ops.push(Op::Reset { qubit, register });
        register
    }

    pub fn conditional(&mut self, condition: Condition, gate: Gate) -> &mut Self {
        self.ops.push(Op::Conditional { condition, gate });
        self
    }

    /// Appends `other` with its qubit `j` placed on `map[j]`; returns the register offset.
    pub fn append_mapped(&mut self, other: &Circuit, map: &[usize]) -> usize {
        assert_eq!(map.len(), other.n_qubits, "qubit map length");
        let offset = self.n_registers;
        for op in &other.ops {
            self.ops.push(match op {
                Op::Gate(g) => Op::Gate(g.remapped(map)),
                Op::Measure { qubit, register } => Op::Measure { qubit: map[*qubit], register: register + offset },
                Op::Reset { qubit, register } => Op::Reset { qubit: map[*qubit], register: register + offset },
                Op::Conditional { condition, gate } => Op::Conditional {
                    condition: condition.shifted(offset),
                    gate: gate.remapped(map),
                },
            });
        }
        self.n_registers += other.n_registers;
        offset
    }

    pub fn append(&mut self, other: &Circuit) -> usize {
        let map: Vec<usize> = (0..other.n_qubits).collect();
        self.append_mapped(other, &map)
    }

    pub fn has_measurements(&self) -> bool {
        self.ops.iter().any(|op| !matches!(op, Op::Gate(_)))
    }

    /// Checks qubit ranges, register allocation order and that conditions only read earlier registers.
    pub fn validate(&self) -> Result<()> {
        let mut written = vec![false; self.n_registers];
        for op in &self.ops {
            match op {
                Op::Gate(g) => g.check(self.n_qubits)?,
                Op::Measure { qubit, register } | Op::Reset { qubit, register } => {
                    if *qubit >= self.n_qubits {
                        return Err(Error::Index { index: *qubit, limit: self.n_qubits });
                    }
                    match written.get_mut(*register) {
                        Some(w) if !*w => *w = true,
                        _ => return Err(Error::Contract(format!("register {register} written twice or undeclared"))),
                    }
                }
                Op::Conditional { condition, gate } => {
                    gate.check(self.n_qubits)?;
                    if let Condition::Equals { registers, bits } = condition {
                        if registers.len() != bits.len() {
                            return Err(Error::Contract("condition register/bit lengths differ".into()));
                        }
                    }
                    for &r in condition.registers() {
                        if !written.get(r).copied().unwrap_or(false) {
                            return Err(Error::Contract(format!("condition reads register {r} before it is written")));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Two-qubit gate count, conditionals included.
    pub fn two_qubit_count(&self) -> usize {
        self.ops
            .iter()
            .filter(|op| match op {
                Op::Gate(g) | Op::Conditional { gate: g, .. } => g.is_two_qubit(),
                _ => false,
            })
            .count()
    }

    /// Number of layers of two-qubit gates under as-soon-as-possible scheduling;
    /// single-qubit gates, measurements and resets do not add layers.
    pub fn two_qubit_depth(&self) -> usize {
        let mut t = vec![0usize; self.n_qubits];
        for op in &self.ops {
            if let Op::Gate(g) | Op::Conditional { gate: g, .. } = op {
                let qs = g.qubits();
                if qs.len() == 2 {
                    let layer = t[qs[0]].max(t[qs[1]]) + 1;
                    t[qs[0]] = layer;
                    t[qs[1]] = layer;
                }
            }
        }
        t.into_iter().max().unwrap_or(0)
    }
}

/// Measured bits by register id.
pub type Record = BTreeMap<usize, u8>;

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub state: StateVector,
    pub record: Record,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RunMode {
    /// One Born-rule trajectory.
    Sample { seed: u64 },
    /// Every branch whose record agrees with `required`.
    PostSelect { required: Record },
    /// Every branch.
    Enumerate,
}

/// Runs `circuit` from `state`. `Sample` yields one outcome; the other modes yield
/// every surviving branch, ordered by the binary value of their records.
pub fn run_circuit(state: &StateVector, circuit: &Circuit, mode: &RunMode) -> Result<Vec<RunOutcome>> {
    if circuit.n_qubits != state.n_qubits {
        return Err(Error::Contract(format!(
            "circuit has {} qubits, state has {}",
            circuit.n_qubits, state.n_qubits
        )));
    }
    circuit.validate()?;
    let mut rng = match mode {
        RunMode::Sample { seed } => Some(ChaCha8Rng::seed_from_u64(*seed)),
        _ => None,
    };
    let required = match mode {
        RunMode::PostSelect { required } => Some(required),
        _ => None,
    };
    let mut branches = vec![RunOutcome { state: state.clone(), record: Record::new(), probability: 1.0 }];
    for op in &circuit.ops {
        match op {
            Op::Gate(g) => {
                for b in &mut branches {
                    b.state.apply_gate(g)?;
                }
            }
            Op::Conditional { condition, gate } => {
                for b in &mut branches {
                    if condition.holds(&b.record) {
                        b.state.apply_gate(gate)?;
                    }
                }
            }
            Op::Measure { qubit, register } | Op::Reset { qubit, register } => {
                let reset = matches!(op, Op::Reset { .. });
                let mut next = Vec::with_capacity(branches.len() * 2);
                for b in branches {
                    let p1 = b.state.prob_one(*qubit);
                    let p0 = b.state.norm_sqr() - p1;
                    let p1 = (p1 / (p0 + p1)).clamp(0.0, 1.0);
                    let outcomes: Vec<u8> = match rng.as_mut() {
                        Some(r) => vec![u8::from(r.gen::<f64>() < p1)],
                        None => vec![0, 1],
                    };
                    for bit in outcomes {
                        if let Some(req) = required {
                            if req.get(register).is_some_and(|&r| r != bit) {
                                continue;
                            }
                        }
                        let p = if bit == 1 { p1 } else { 1.0 - p1 };
                        if p == 0.0 || (rng.is_none() && b.probability * p < PRUNE_PROBABILITY) {
                            continue;
                        }
                        let mut s = b.state.clone();
                        s.project(*qubit, bit);
                        s.normalize()?;
                        if reset && bit == 1 {
                            s.apply_gate(&Gate::X { q: *qubit })?;
                        }
                        let mut record = b.record.clone();
                        record.insert(*register, bit);
                        next.push(RunOutcome { state: s, record, probability: b.probability * p });
                    }
                }
                branches = next;
            }
        }
    }
    if required.is_some() && branches.is_empty() {
        return Err(Error::ZeroProbability);
    }
    branches.sort_by(|a, b| a.record.iter().map(|(_, v)| *v).cmp(b.record.iter().map(|(_, v)| *v)));
    Ok(branches)
}

pub fn sample(state: &StateVector, circuit: &Circuit, seed: u64) -> Result<RunOutcome> {
    Ok(run_circuit(state, circuit, &RunMode::Sample { seed })?.remove(0))
}

pub fn enumerate_branches(state: &StateVector, circuit: &Circuit) -> Result<Vec<RunOutcome>> {
    run_circuit(state, circuit, &RunMode::Enumerate)
}

pub fn post_select(state: &StateVector, circuit: &Circuit, required: Record) -> Result<Vec<RunOutcome>> {
    run_circuit(state, circuit, &RunMode::PostSelect { required })
}

/// Collapses accepted branches that carry the same state up to a global phase into
/// one outcome whose probability is their total. The returned record is the heaviest branch's.
pub fn merge_postselected(branches: &[RunOutcome], tol: f64) -> Result<RunOutcome> {
    let total: f64 = branches.iter().map(|b| b.probability).sum();
    if total <= 0.0 {
        return Err(Error::ZeroProbability);
    }
    let heaviest = branches
        .iter()
        .max_by(|a, b| a.probability.total_cmp(&b.probability))
        .ok_or(Error::ZeroProbability)?;
    for b in branches {
        let f = heaviest.state.fidelity(&b.state);
        if (1.0 - f).abs() > tol {
            return Err(Error::Contract(format!("accepted branches differ (fidelity {f})")));
        }
    }
    Ok(RunOutcome { state: heaviest.state.clone(), record: heaviest.record.clone(), probability: total })
}

/// `⟨ψ|P|ψ⟩` for the bare operator of `p`.
pub fn pauli_expval(state: &StateVector, p: &PauliString) -> Result<C64> {
    state.check_sites(p)?;
    let (flip, sign, ny) = p.masks();
    let amps = state.amplitudes();
    let mut acc = ZERO;
    for (i, &a) in amps.iter().enumerate() {
        if a == ZERO {
            continue;
        }
        let t = amps[i ^ flip].conj() * a;
        if (i & sign).count_ones() % 2 == 1 {
            acc -= t;
        } else {
            acc += t;
        }
    }
    Ok(acc * i_pow(ny))
}

/// `Σ coeff·⟨ψ|P|ψ⟩`, real part. Hermitian input makes the imaginary part vanish.
pub fn expval(state: &StateVector, observable: &[PauliString]) -> Result<f64> {
    let mut acc = 0.0;
    for t in observable {
        acc += t.coeff * pauli_expval(state, t)?.re;
    }
    Ok(acc)
}

/// `Σ coeff·P` applied to an amplitude vector.
pub fn apply_operator(terms: &[PauliString], psi: &[C64]) -> Vec<C64> {
    let mut out = vec![ZERO; psi.len()];
    for t in terms {
        let (flip, sign, ny) = t.masks();
        let ph = i_pow(ny) * t.coeff;
        for (i, &a) in psi.iter().enumerate() {
            let s = if (i & sign).count_ones() % 2 == 1 { -ph } else { ph };
            out[i ^ flip] += s * a;
        }
    }
    out
}

/// A Hermitian Pauli sum prepared for repeated expectation values: diagonal terms are
/// summed into one vector, the rest keep their masks.
#[derive(Clone, Debug)]
pub struct SparseObservable {
    n_qubits: usize,
    diag: Vec<f64>,
    offdiag: Vec<(usize, usize, C64)>,
}

impl SparseObservable {
    pub fn new(n_qubits: usize, terms: &[PauliString]) -> Result<Self> {
        let mut diag = vec![0.0; 1 << n_qubits];
        let mut offdiag = Vec::new();
        for t in terms {
            if let Some(s) = t.max_site() {
                if s >= n_qubits {
                    return Err(Error::Index { index: s, limit: n_qubits });
                }
            }
            let (flip, sign, ny) = t.masks();
            if flip == 0 {
                for (i, d) in diag.iter_mut().enumerate() {
                    *d += if (i & sign).count_ones() % 2 == 1 { -t.coeff } else { t.coeff };
                }
            } else {
                offdiag.push((flip, sign, i_pow(ny) * t.coeff));
            }
        }
        Ok(Self { n_qubits, diag, offdiag })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    /// `Re⟨ψ|O|ψ⟩` for amplitudes of matching length.
    pub fn expval(&self, psi: &[C64]) -> f64 {
        debug_assert_eq!(psi.len(), self.diag.len());
        let mut acc: f64 = psi.iter().zip(&self.diag).map(|(a, d)| a.norm_sqr() * d).sum();
        for &(flip, sign, ph) in &self.offdiag {
            let mut t = ZERO;
            for (i, &a) in psi.iter().enumerate() {
                let z = psi[i ^ flip].conj() * a;
                if (i & sign).count_ones() % 2 == 1 {
                    t -= z;
                } else {
                    t += z;
                }
            }
            acc += (t * ph).re;
        }
        acc
    }

    /// `O|ψ⟩`.
    pub fn apply(&self, psi: &[C64]) -> Vec<C64> {
        let mut out: Vec<C64> = psi.iter().zip(&self.diag).map(|(a, d)| a * d).collect();
        for &(flip, sign, ph) in &self.offdiag {
            for (i, &a) in psi.iter().enumerate() {
                let s = if (i & sign).count_ones() % 2 == 1 { -ph } else { ph };
                out[i ^ flip] += s * a;
            }
        }
        out
    }
}

/// Cyclic left rotation of the low `l` bits: site `n` moves to `n + 1 mod l`.
pub fn translate(i: usize, l: usize) -> usize {
    let mask = (1usize << l) - 1;
    ((i << 1) | (i >> (l - 1))) & mask
}

/// `w_m = ‖P_m|ψ⟩‖²` for `k = 2πm/L`, `m = 0..L`. A momentum-`k` state `Σₙ e^{ikn}|2ⁿ⟩`
/// picks up `e^{−ik}` under the site shift, so `P_k = (1/L)Σₙ e^{ikn}Tⁿ`.
pub fn momentum_block_weights(state: &StateVector, l: usize) -> Result<Vec<f64>> {
    if state.n_qubits != l {
        return Err(Error::Contract(format!("state has {} qubits, lattice {}", state.n_qubits, l)));
    }
    let amps = state.amplitudes();
    let mut overlaps = Vec::with_capacity(l);
    for n in 0..l {
        let mut acc = ZERO;
        for (i, &a) in amps.iter().enumerate() {
            let mut j = i;
            for _ in 0..n {
                j = translate(j, l);
            }
            acc += amps[j].conj() * a;
        }
        overlaps.push(acc);
    }
    Ok((0..l)
        .map(|m| {
            let k = 2.0 * std::f64::consts::PI * m as f64 / l as f64;
            let s: C64 = overlaps.iter().enumerate().map(|(n, o)| C64::from_polar(1.0, k * n as f64) * o).sum();
            s.re / l as f64
        })
        .collect())
}

/// Dense unitary of a measurement-free circuit, column `j` = `U|j⟩`.
pub fn circuit_unitary(circuit: &Circuit) -> Result<nalgebra::DMatrix<C64>> {
    let dim = 1usize << circuit.n_qubits;
    let mut u = nalgebra::DMatrix::zeros(dim, dim);
    for j in 0..dim {
        let mut s = StateVector::basis(circuit.n_qubits, j);
        s.apply_unitary_circuit(circuit)?;
        for (i, a) in s.amplitudes().iter().enumerate() {
            u[(i, j)] = *a;
        }
    }
    Ok(u)
}
