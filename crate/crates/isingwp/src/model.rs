//! One-dimensional Ising field theory on a qubit chain:
//! `H = −Σₙ [½(Zₙ₋₁Zₙ + ZₙZₙ₊₁) + g_x Xₙ + g_z Zₙ] = Σₙ Hₙ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pauli::{canonicalize, Pauli, PauliString};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    Pbc,
    Obc,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsingModel {
    pub l: usize,
    pub gx: f64,
    pub gz: f64,
    pub boundary: Boundary,
}

impl IsingModel {
    pub fn new(l: usize, gx: f64, gz: f64, boundary: Boundary) -> Result<Self> {
        let m = Self { l, gx, gz, boundary };
        m.validate()?;
        Ok(m)
    }

    pub fn pbc(l: usize, gx: f64, gz: f64) -> Result<Self> {
        Self::new(l, gx, gz, Boundary::Pbc)
    }

    pub fn obc(l: usize, gx: f64, gz: f64) -> Result<Self> {
        Self::new(l, gx, gz, Boundary::Obc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.l < 2 {
            return Err(Error::InvalidModel(format!("need L >= 2, got {}", self.l)));
        }
        if self.l > 62 {
            return Err(Error::InvalidModel(format!("L = {} exceeds the bit-mask limit", self.l)));
        }
        if !self.gx.is_finite() || !self.gz.is_finite() {
            return Err(Error::InvalidModel("couplings must be finite".into()));
        }
        Ok(())
    }

    pub fn with_size(&self, l: usize) -> Self {
        Self { l, ..*self }
    }

    /// Bonds `(n, n+1 mod L)`; the wrap bond only under PBC.
    pub fn bonds(&self) -> Vec<(usize, usize)> {
        let l = self.l;
        let last = match self.boundary {
            Boundary::Pbc => l,
            Boundary::Obc => l - 1,
        };
        (0..last).map(|n| (n, (n + 1) % l)).collect()
    }
}

pub fn hamiltonian_terms(model: &IsingModel) -> Result<Vec<PauliString>> {
    model.validate()?;
    let mut terms = Vec::with_capacity(3 * model.l);
    for (a, b) in model.bonds() {
        terms.push(PauliString::new(-1.0, [(a, Pauli::Z), (b, Pauli::Z)]));
    }
    for n in 0..model.l {
        terms.push(PauliString::single(-model.gx, n, Pauli::X));
        terms.push(PauliString::single(-model.gz, n, Pauli::Z));
    }
    Ok(canonicalize(terms))
}

/// Site-local energy density `Hₙ`. Under OBC the edge sites carry their single bond
/// with unit weight, so `Σₙ Hₙ` exceeds `H` by `−½(Z₀Z₁ + Z_{L−2}Z_{L−1})`.
pub fn energy_density_terms(model: &IsingModel, n: usize) -> Result<Vec<PauliString>> {
    model.validate()?;
    let l = model.l;
    if n >= l {
        return Err(Error::Index { index: n, limit: l });
    }
    let zz = |a: usize, b: usize, c: f64| PauliString::new(c, [(a, Pauli::Z), (b, Pauli::Z)]);
    let mut terms = Vec::with_capacity(4);
    match model.boundary {
        Boundary::Pbc => {
            terms.push(zz((n + l - 1) % l, n, -0.5));
            terms.push(zz(n, (n + 1) % l, -0.5));
        }
        Boundary::Obc => {
            if n == 0 {
                terms.push(zz(0, 1, -1.0));
            } else if n == l - 1 {
                terms.push(zz(n - 1, n, -1.0));
            } else {
                terms.push(zz(n - 1, n, -0.5));
                terms.push(zz(n, n + 1, -0.5));
            }
        }
    }
    terms.push(PauliString::single(-model.gx, n, Pauli::X));
    terms.push(PauliString::single(-model.gz, n, Pauli::Z));
    Ok(canonicalize(terms))
}

/// All energy densities, indexed by site.
pub fn energy_densities(model: &IsingModel) -> Result<Vec<Vec<PauliString>>> {
    (0..model.l).map(|n| energy_density_terms(model, n)).collect()
}

/// `η_latt = (g_x − 1)/|g_z|^{8/15}`.
pub fn scaling_ratio(model: &IsingModel) -> Result<f64> {
    if model.gz == 0.0 {
        return Err(Error::Domain("scaling ratio needs g_z != 0".into()));
    }
    Ok((model.gx - 1.0) / model.gz.abs().powf(8.0 / 15.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sum_densities(m: &IsingModel) -> Vec<PauliString> {
        canonicalize(energy_densities(m).unwrap().into_iter().flatten())
    }

    #[test]
    fn two_site_ring_merges_both_bonds() {
        let m = IsingModel::pbc(2, 1.0, 0.0).unwrap();
        let h = hamiltonian_terms(&m).unwrap();
        let zz = h.iter().find(|t| t.weight() == 2).unwrap();
        assert_eq!(zz.coeff, -2.0);
        assert_eq!(h.iter().filter(|t| t.get(0) == Some(Pauli::X) || t.get(1) == Some(Pauli::X)).count(), 2);
    }

    #[test]
    fn open_chain_term_counts() {
        let m = IsingModel::obc(3, 1.25, 0.15).unwrap();
        let h = hamiltonian_terms(&m).unwrap();
        let zz: Vec<_> = h.iter().filter(|t| t.weight() == 2).collect();
        assert_eq!(zz.len(), 2);
        assert!(zz.iter().all(|t| t.coeff == -1.0));
        let xs: Vec<_> = h.iter().filter(|t| t.weight() == 1 && t.factors()[0].1 == Pauli::X).collect();
        assert_eq!(xs.len(), 3);
        assert!(xs.iter().all(|t| t.coeff == -1.25));
        let zs: Vec<_> = h.iter().filter(|t| t.weight() == 1 && t.factors()[0].1 == Pauli::Z).collect();
        assert_eq!(zs.len(), 3);
        assert!(zs.iter().all(|t| t.coeff == -0.15));
    }

    #[test]
    fn periodic_density_at_origin() {
        let m = IsingModel::pbc(4, 1.25, 0.15).unwrap();
        let h0 = energy_density_terms(&m, 0).unwrap();
        let expect = canonicalize(vec![
            PauliString::new(-0.5, [(3, Pauli::Z), (0, Pauli::Z)]),
            PauliString::new(-0.5, [(0, Pauli::Z), (1, Pauli::Z)]),
            PauliString::single(-1.25, 0, Pauli::X),
            PauliString::single(-0.15, 0, Pauli::Z),
        ]);
        assert_eq!(h0, expect);
    }

    #[test]
    fn open_edge_density_has_unit_bond() {
        let m = IsingModel::obc(3, 1.25, 0.15).unwrap();
        let h0 = energy_density_terms(&m, 0).unwrap();
        let zz = h0.iter().find(|t| t.weight() == 2).unwrap();
        assert_eq!(zz.coeff, -1.0);
        assert_eq!(zz.factors(), &[(0, Pauli::Z), (1, Pauli::Z)]);
        let h2 = energy_density_terms(&m, 2).unwrap();
        assert_eq!(h2.iter().find(|t| t.weight() == 2).unwrap().coeff, -1.0);
    }

    #[test]
    fn open_partition_surplus_is_the_two_edge_half_bonds() {
        let m = IsingModel::obc(6, 1.1, 0.05).unwrap();
        let mut diff = sum_densities(&m);
        for t in hamiltonian_terms(&m).unwrap() {
            diff.push(t.with_coeff(-t.coeff));
        }
        let diff = canonicalize(diff);
        let expect = canonicalize(vec![
            PauliString::new(-0.5, [(0, Pauli::Z), (1, Pauli::Z)]),
            PauliString::new(-0.5, [(4, Pauli::Z), (5, Pauli::Z)]),
        ]);
        assert_eq!(diff, expect);
    }

    #[test]
    fn density_index_out_of_range() {
        let m = IsingModel::pbc(4, 1.0, 0.0).unwrap();
        assert!(matches!(energy_density_terms(&m, 4), Err(Error::Index { .. })));
    }

    #[test]
    fn invalid_size_rejected() {
        assert!(matches!(IsingModel::pbc(1, 1.0, 0.0), Err(Error::InvalidModel(_))));
    }

    #[test]
    fn scaling_ratio_values() {
        let m = IsingModel::pbc(4, 1.25, 0.15).unwrap();
        assert!((scaling_ratio(&m).unwrap() - 0.69).abs() < 0.01);
        let m = IsingModel::pbc(4, 1.0, 0.5).unwrap();
        assert_eq!(scaling_ratio(&m).unwrap(), 0.0);
        let m = IsingModel::pbc(4, 1.0, 0.0).unwrap();
        assert!(matches!(scaling_ratio(&m), Err(Error::Domain(_))));
    }

    #[test]
    fn scaling_ratio_high_precision() {
        // (g_x, g_z) = (1.15, 0.05): 0.15 · 0.05^{-8/15} evaluated to 20 digits independently.
        let m = IsingModel::pbc(4, 1.15, 0.05).unwrap();
        assert!((scaling_ratio(&m).unwrap() - 0.741_265_731_725_408_8).abs() < 1e-13);
    }

    proptest! {
        #[test]
        fn periodic_partition_is_exact(l in 2usize..=8, gx in -2.0f64..2.0, gz in -1.0f64..1.0) {
            let m = IsingModel::pbc(l, gx, gz).unwrap();
            prop_assert_eq!(sum_densities(&m), hamiltonian_terms(&m).unwrap());
        }

        #[test]
        fn periodic_density_is_translation_covariant(l in 3usize..=8, n in 0usize..8) {
            let n = n % l;
            let m = IsingModel::pbc(l, 1.25, 0.15).unwrap();
            let shifted = canonicalize(energy_density_terms(&m, n).unwrap().iter().map(|t| t.shifted(1, l)));
            prop_assert_eq!(shifted, energy_density_terms(&m, (n + 1) % l).unwrap());
        }

        #[test]
        fn coefficients_are_real_and_finite(l in 2usize..=8, obc in any::<bool>()) {
            let b = if obc { Boundary::Obc } else { Boundary::Pbc };
            let m = IsingModel::new(l, 1.25, 0.15, b).unwrap();
            for t in hamiltonian_terms(&m).unwrap() {
                prop_assert!(t.coeff.is_finite());
            }
        }
    }
}
