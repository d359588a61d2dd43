//! Real-weighted Pauli strings over little-endian qubit registers.

use std::collections::BTreeMap;
use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pauli {
    X,
    Y,
    Z,
}

impl Pauli {
    pub fn from_char(c: char) -> Option<Self> {
        match c {
            'X' | 'x' => Some(Pauli::X),
            'Y' | 'y' => Some(Pauli::Y),
            'Z' | 'z' => Some(Pauli::Z),
            _ => None,
        }
    }

    pub fn as_char(self) -> char {
        match self {
            Pauli::X => 'X',
            Pauli::Y => 'Y',
            Pauli::Z => 'Z',
        }
    }

    pub fn commutes_with(self, other: Pauli) -> bool {
        self == other
    }
}

/// `coeff · ⊗ P_site`; identity factors are never stored and sites are sorted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PauliString {
    pub coeff: f64,
    factors: Vec<(usize, Pauli)>,
}

impl PauliString {
    /// Panics if a site appears twice.
    pub fn new(coeff: f64, factors: impl IntoIterator<Item = (usize, Pauli)>) -> Self {
        let mut factors: Vec<(usize, Pauli)> = factors.into_iter().collect();
        factors.sort_by_key(|&(s, _)| s);
        for w in factors.windows(2) {
            assert!(w[0].0 != w[1].0, "site {} appears twice in a Pauli string", w[0].0);
        }
        Self { coeff, factors }
    }

    pub fn identity(coeff: f64) -> Self {
        Self { coeff, factors: Vec::new() }
    }

    pub fn single(coeff: f64, site: usize, p: Pauli) -> Self {
        Self { coeff, factors: vec![(site, p)] }
    }

    /// Parses a contiguous word such as `"ZXY"` starting at `start` with sites taken mod `l`;
    /// `'I'` leaves a site empty.
    pub fn from_word(coeff: f64, word: &str, start: usize, l: usize) -> Self {
        let factors = word
            .chars()
            .enumerate()
            .filter_map(|(j, c)| Pauli::from_char(c).map(|p| ((start + j) % l, p)));
        Self::new(coeff, factors)
    }

    pub fn factors(&self) -> &[(usize, Pauli)] {
        &self.factors
    }

    pub fn get(&self, site: usize) -> Option<Pauli> {
        self.factors.iter().find(|&&(s, _)| s == site).map(|&(_, p)| p)
    }

    pub fn weight(&self) -> usize {
        self.factors.len()
    }

    pub fn max_site(&self) -> Option<usize> {
        self.factors.last().map(|&(s, _)| s)
    }

    pub fn with_coeff(&self, coeff: f64) -> Self {
        Self { coeff, factors: self.factors.clone() }
    }

    pub fn same_operator(&self, other: &PauliString) -> bool {
        self.factors == other.factors
    }

    pub fn commutes_with(&self, other: &PauliString) -> bool {
        let mut anti = 0usize;
        let (mut i, mut j) = (0, 0);
        while i < self.factors.len() && j < other.factors.len() {
            let (sa, pa) = self.factors[i];
            let (sb, pb) = other.factors[j];
            if sa == sb {
                if pa != pb {
                    anti += 1;
                }
                i += 1;
                j += 1;
            } else if sa < sb {
                i += 1;
            } else {
                j += 1;
            }
        }
        anti % 2 == 0
    }

    /// Image under the site permutation `n → (n + by) mod l`.
    pub fn shifted(&self, by: usize, l: usize) -> Self {
        Self::new(self.coeff, self.factors.iter().map(|&(s, p)| ((s + by) % l, p)))
    }

    /// Image under the reflection `n → l − 1 − n`.
    pub fn reflected(&self, l: usize) -> Self {
        Self::new(self.coeff, self.factors.iter().map(|&(s, p)| (l - 1 - s, p)))
    }

    /// Bit masks `(flip, sign, n_y)`: `P|i⟩ = i^{n_y} (−1)^{popcount(i & sign)} |i ⊕ flip⟩`.
    pub fn masks(&self) -> (usize, usize, u32) {
        let mut flip = 0usize;
        let mut sign = 0usize;
        let mut ny = 0u32;
        for &(s, p) in &self.factors {
            match p {
                Pauli::X => flip |= 1 << s,
                Pauli::Y => {
                    flip |= 1 << s;
                    sign |= 1 << s;
                    ny += 1;
                }
                Pauli::Z => sign |= 1 << s,
            }
        }
        (flip, sign, ny)
    }

    /// `(j, phase)` with `P|i⟩ = phase · |j⟩`, excluding the coefficient.
    pub fn apply_to_index(&self, i: usize) -> (usize, Complex64) {
        let (flip, sign, ny) = self.masks();
        let s = if (i & sign).count_ones() % 2 == 1 { -1.0 } else { 1.0 };
        (i ^ flip, i_pow(ny) * s)
    }

    pub fn label(&self) -> String {
        if self.factors.is_empty() {
            return "I".to_string();
        }
        self.factors
            .iter()
            .map(|&(s, p)| format!("{}{}", p.as_char(), s))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl fmt::Display for PauliString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:+} {}", self.coeff, self.label())
    }
}

pub(crate) fn i_pow(n: u32) -> Complex64 {
    match n % 4 {
        0 => Complex64::new(1.0, 0.0),
        1 => Complex64::new(0.0, 1.0),
        2 => Complex64::new(-1.0, 0.0),
        _ => Complex64::new(0.0, -1.0),
    }
}

/// Merges terms with equal factor maps, drops exact zeros, and sorts by factor map.
pub fn canonicalize(terms: impl IntoIterator<Item = PauliString>) -> Vec<PauliString> {
    let mut merged: BTreeMap<Vec<(usize, Pauli)>, f64> = BTreeMap::new();
    for t in terms {
        *merged.entry(t.factors).or_insert(0.0) += t.coeff;
    }
    merged
        .into_iter()
        .filter(|&(_, c)| c != 0.0)
        .map(|(factors, coeff)| PauliString { coeff, factors })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_word_skips_identity_and_wraps() {
        let p = PauliString::from_word(1.0, "ZIY", 3, 4);
        assert_eq!(p.factors(), &[(1, Pauli::Y), (3, Pauli::Z)]);
    }

    #[test]
    fn y_action_matches_ixz() {
        let y = PauliString::single(1.0, 0, Pauli::Y);
        assert_eq!(y.apply_to_index(0), (1, Complex64::new(0.0, 1.0)));
        assert_eq!(y.apply_to_index(1), (0, Complex64::new(0.0, -1.0)));
    }

    #[test]
    fn commutation_counts_anticommuting_sites() {
        let a = PauliString::from_word(1.0, "YZ", 0, 8);
        let b = PauliString::from_word(1.0, "ZY", 0, 8);
        let c = PauliString::from_word(1.0, "YZ", 1, 8);
        assert!(a.commutes_with(&b));
        assert!(!a.commutes_with(&c));
    }

    #[test]
    fn canonicalize_merges_and_drops_zeros() {
        let terms = vec![
            PauliString::from_word(-0.5, "ZZ", 0, 2),
            PauliString::from_word(-0.5, "ZZ", 1, 2),
            PauliString::single(1.0, 0, Pauli::X),
            PauliString::single(-1.0, 0, Pauli::X),
        ];
        let c = canonicalize(terms);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].coeff, -1.0);
    }
}
