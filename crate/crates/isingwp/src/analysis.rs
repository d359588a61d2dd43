//! Post-collision skewness of the energy density and diffs against reference tables.

use std::io::Read;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scatter::EnergyDensityTrace;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Half {
    /// Sites `0..⌊L/2⌋`.
    Left,
    /// Sites `⌈L/2⌉..L`.
    Right,
}

fn half_range(l: usize, half: Half) -> std::ops::Range<usize> {
    match half {
        Half::Left => 0..l / 2,
        Half::Right => l.div_ceil(2)..l,
    }
}

/// The contiguous run of sites with `E_n + σ_n ≥ ε` that contains the largest `E_n + σ_n`
/// on the chosen half; `None` when no site clears the cutoff.
pub fn select_window(e: &[f64], sigma: &[f64], eps: f64, half: Half) -> Option<(usize, usize)> {
    assert_eq!(e.len(), sigma.len(), "energy and error arrays differ in length");
    let range = half_range(e.len(), half);
    let score = |n: usize| e[n] + sigma[n];
    let peak = range.clone().filter(|&n| score(n) >= eps).max_by(|&a, &b| score(a).total_cmp(&score(b)).then(b.cmp(&a)))?;
    let mut lo = peak;
    while lo > range.start && score(lo - 1) >= eps {
        lo -= 1;
    }
    let mut hi = peak;
    while hi + 1 < range.end && score(hi + 1) >= eps {
        hi += 1;
    }
    Some((lo, hi))
}

/// `γ = Σⱼ(j−μ)³Ẽⱼ / σ³` with `Ẽ = E/ΣE`; positive for a tail toward larger `j`.
pub fn skewness(e: &[f64]) -> Result<f64> {
    if e.len() < 3 {
        return Err(Error::DegenerateWindow(format!("{} sites, need at least 3", e.len())));
    }
    let total: f64 = e.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::DegenerateWindow(format!("window energy {total} is not positive")));
    }
    let w: Vec<f64> = e.iter().map(|x| x / total).collect();
    let mu: f64 = w.iter().enumerate().map(|(j, x)| j as f64 * x).sum();
    let moment = |k: i32| -> f64 { w.iter().enumerate().map(|(j, x)| (j as f64 - mu).powi(k) * x).sum() };
    let var = moment(2);
    if var <= 1e-300 {
        return Err(Error::DegenerateWindow("zero spread".into()));
    }
    Ok(moment(3) / var.powf(1.5))
}

/// Cutoffs `min, min+step, …, max` without floating-point drift.
pub fn cutoff_range(min: f64, max: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || max < min {
        return Err(Error::Config(format!("bad cutoff range [{min}, {max}] step {step}")));
    }
    let n = ((max - min) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| min + i as f64 * step).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoffSkewness {
    pub eps: f64,
    pub window: Option<(usize, usize)>,
    pub gamma: Option<f64>,
    /// Bootstrap standard deviation of `γ_ε` over Gaussian perturbations of `E`.
    pub sigma: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkewnessReport {
    pub half: Half,
    pub cutoffs: Vec<CutoffSkewness>,
    /// `(max γ_ε + min γ_ε)/2`.
    pub gamma: f64,
    /// Half the cutoff spread and the mean bootstrap σ, in quadrature.
    pub error: f64,
    /// Set when the maximum sits at the lattice center or no cutoff yields a window.
    pub zeroed: bool,
}

/// `γ` over a cutoff sweep. Each `γ_ε` keeps the window chosen from the central values
/// while `E` is perturbed by `N(0, σ_n²)` for the bootstrap.
pub fn skewness_sweep(e: &[f64], sigma: &[f64], half: Half, cutoffs: &[f64], bootstrap: usize, seed: u64) -> SkewnessReport {
    let l = e.len();
    let peak = e.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i);
    let centered = peak.is_some_and(|p| p == l / 2 || (l % 2 == 0 && p + 1 == l / 2));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<CutoffSkewness> = cutoffs
        .iter()
        .map(|&eps| {
            let window = select_window(e, sigma, eps, half);
            let (gamma, sd) = match window {
                Some((lo, hi)) => {
                    let g = skewness(&e[lo..=hi]).ok();
                    let draws: Vec<f64> = (0..bootstrap)
                        .filter_map(|_| {
                            let pert: Vec<f64> = (lo..=hi)
                                .map(|n| {
                                    let z: f64 = StandardNormal.sample(&mut rng);
                                    e[n] + sigma[n] * z
                                })
                                .collect();
                            skewness(&pert).ok()
                        })
                        .collect();
                    let sd = (draws.len() >= 2).then(|| {
                        let m = draws.iter().sum::<f64>() / draws.len() as f64;
                        (draws.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (draws.len() - 1) as f64).sqrt()
                    });
                    (g, sd)
                }
                None => (None, None),
            };
            CutoffSkewness { eps, window, gamma, sigma: sd }
        })
        .collect();
    let gammas: Vec<f64> = rows.iter().filter_map(|r| r.gamma).collect();
    let sigmas: Vec<f64> = rows.iter().filter_map(|r| r.sigma).collect();
    if centered || gammas.is_empty() {
        return SkewnessReport { half, cutoffs: rows, gamma: 0.0, error: 0.0, zeroed: true };
    }
    let max = gammas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = gammas.iter().copied().fold(f64::INFINITY, f64::min);
    let stat = if sigmas.is_empty() { 0.0 } else { sigmas.iter().sum::<f64>() / sigmas.len() as f64 };
    SkewnessReport { half, cutoffs: rows, gamma: 0.5 * (max + min), error: (0.25 * (max - min).powi(2) + stat * stat).sqrt(), zeroed: false }
}

/// [`skewness_sweep`] on one recorded time of a trace, with per-site errors `sigma`
/// (zeros for noiseless traces).
pub fn trace_skewness(trace: &EnergyDensityTrace, index: usize, sigma: &[f64], half: Half, cutoffs: &[f64], bootstrap: usize, seed: u64) -> Result<SkewnessReport> {
    let e = trace.energy.get(index).ok_or(Error::Index { index, limit: trace.energy.len() })?;
    if sigma.len() != e.len() {
        return Err(Error::Contract("error array does not match the lattice".into()));
    }
    Ok(skewness_sweep(e, sigma, half, cutoffs, bootstrap, seed))
}

/// One row of a `t, n, E_n, …` table; extra columns are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityRow {
    pub t: f64,
    pub n: usize,
    #[serde(rename = "E_n")]
    pub e: f64,
}

pub fn read_density_csv<R: Read>(r: R) -> Result<Vec<DensityRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let rows = rdr.deserialize().collect::<std::result::Result<Vec<DensityRow>, _>>()?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteDiff {
    pub t: f64,
    pub n: usize,
    pub reference: f64,
    pub computed: f64,
    pub diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub sites: Vec<SiteDiff>,
    pub max_abs_diff: f64,
    /// Reference rows with no computed counterpart.
    pub missing: Vec<(f64, usize)>,
}

/// Matches rows on `n` and on `t` within `t_tol`.
pub fn compare(reference: &[DensityRow], computed: &[DensityRow], t_tol: f64) -> CompareReport {
    let mut sites = Vec::new();
    let mut missing = Vec::new();
    for r in reference {
        match computed.iter().find(|c| c.n == r.n && (c.t - r.t).abs() <= t_tol) {
            Some(c) => sites.push(SiteDiff { t: r.t, n: r.n, reference: r.e, computed: c.e, diff: c.e - r.e }),
            None => missing.push((r.t, r.n)),
        }
    }
    let max_abs_diff = sites.iter().map(|s| s.diff.abs()).fold(0.0, f64::max);
    CompareReport { sites, max_abs_diff, missing }
}

/// Rows of a trace in the table layout.
pub fn trace_rows(trace: &EnergyDensityTrace) -> Vec<DensityRow> {
    trace
        .times
        .iter()
        .zip(&trace.energy)
        .flat_map(|(&t, row)| row.iter().enumerate().map(move |(n, &e)| DensityRow { t, n, e }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Third standardized moment by direct summation over explicit positions.
    fn moment_oracle(e: &[f64]) -> f64 {
        let total: f64 = e.iter().sum();
        let pos: Vec<f64> = (0..e.len()).map(|j| j as f64).collect();
        let mean = pos.iter().zip(e).map(|(x, w)| x * w).sum::<f64>() / total;
        let m2 = pos.iter().zip(e).map(|(x, w)| (x - mean).powi(2) * w).sum::<f64>() / total;
        let m3 = pos.iter().zip(e).map(|(x, w)| (x - mean).powi(3) * w).sum::<f64>() / total;
        m3 / m2.powf(1.5)
    }

    #[test]
    fn window_selection() {
        let mut e = vec![0.0; 14];
        e[2..5].copy_from_slice(&[1.0, 2.0, 1.0]);
        let zero = vec![0.0; 14];
        assert_eq!(select_window(&e, &zero, 0.5, Half::Left), Some((2, 4)));
        assert_eq!(select_window(&e, &zero, 2.5, Half::Left), None);
        assert_eq!(select_window(&e, &zero, 0.5, Half::Right), None);
        // Ties on the cutoff count as inside.
        assert_eq!(select_window(&e, &zero, 1.0, Half::Left), Some((2, 4)));
        let sigma: Vec<f64> = (0..14).map(|n| if n == 5 { 0.6 } else { 0.0 }).collect();
        assert_eq!(select_window(&e, &sigma, 0.5, Half::Left), Some((2, 5)));
        // A separate run away from the peak is excluded.
        e[0] = 0.7;
        assert_eq!(select_window(&e, &zero, 0.5, Half::Left), Some((2, 4)));
    }

    #[test]
    fn skewness_signs_and_oracle() {
        assert!(skewness(&[1.0, 2.0, 3.0, 2.0, 1.0]).unwrap().abs() < 1e-14);
        let g = skewness(&[3.0, 2.0, 1.0]).unwrap();
        assert!(g > 0.0);
        assert!((g - moment_oracle(&[3.0, 2.0, 1.0])).abs() < 1e-14);
        assert!((skewness(&[1.0, 2.0, 3.0]).unwrap() + g).abs() < 1e-14);
        assert!(matches!(skewness(&[0.0, 5.0, 0.0]), Err(Error::DegenerateWindow(_))));
        assert!(matches!(skewness(&[1.0, 1.0]), Err(Error::DegenerateWindow(_))));
        assert!(matches!(skewness(&[-1.0, 0.5, 0.2]), Err(Error::DegenerateWindow(_))));
    }

    #[test]
    fn cutoff_grid() {
        let c = cutoff_range(0.055, 0.075, 0.005).unwrap();
        assert_eq!(c.len(), 5);
        assert!((c[4] - 0.075).abs() < 1e-15);
        assert!(cutoff_range(0.1, 0.0, 0.005).is_err());
    }

    #[test]
    fn sweep_zeroes_centered_and_empty_profiles() {
        let e = [0.0, 0.1, 0.3, 0.9, 0.9, 0.3, 0.1, 0.0];
        let r = skewness_sweep(&e, &[0.0; 8], Half::Left, &[0.05, 0.1], 50, 1);
        assert!(r.zeroed && r.gamma == 0.0);
        let e = [0.0, 0.4, 0.9, 0.3, 0.1, 0.0, 0.0, 0.0, 0.0, 0.0];
        let r = skewness_sweep(&e, &[0.0; 10], Half::Left, &[2.0], 50, 1);
        assert!(r.zeroed);
        let r = skewness_sweep(&e, &[0.01; 10], Half::Left, &cutoff_range(0.05, 0.2, 0.05).unwrap(), 200, 1);
        assert!(!r.zeroed && r.gamma > 0.0);
        assert!(r.error > 0.0);
        let flat = [0.0, 0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let r = skewness_sweep(&flat, &[0.0; 10], Half::Left, &[0.1], 10, 1);
        assert!(r.gamma.abs() < 1e-14);
        assert!(!r.zeroed);
    }

    #[test]
    fn compare_reports_differences() {
        let csv = "t,n,E_n,E_n_raw_2wp,E_n_raw_vac\n0.5,0,0.25,1,1\n0.5,1,0.5,1,1\n1.0,0,0.1,1,1\n";
        let reference = read_density_csv(csv.as_bytes()).unwrap();
        assert_eq!(reference.len(), 3);
        let computed = vec![DensityRow { t: 0.5, n: 0, e: 0.2 }, DensityRow { t: 0.5000000001, n: 1, e: 0.5 }];
        let rep = compare(&reference, &computed, 1e-6);
        assert_eq!(rep.sites.len(), 2);
        assert!((rep.max_abs_diff - 0.05).abs() < 1e-12);
        assert_eq!(rep.missing, vec![(1.0, 0)]);
    }

    proptest! {
        #[test]
        fn scale_invariance(e in prop::collection::vec(0.01f64..1.0, 3..12), c in 0.01f64..100.0) {
            let scaled: Vec<f64> = e.iter().map(|x| c * x).collect();
            prop_assert!((skewness(&e).unwrap() - skewness(&scaled).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn reflection_antisymmetry(e in prop::collection::vec(0.01f64..1.0, 3..12)) {
            let rev: Vec<f64> = e.iter().rev().copied().collect();
            prop_assert!((skewness(&e).unwrap() + skewness(&rev).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn matches_moment_oracle(e in prop::collection::vec(0.01f64..1.0, 3..12)) {
            prop_assert!((skewness(&e).unwrap() - moment_oracle(&e)).abs() < 1e-12);
        }

        #[test]
        fn symmetric_profiles_vanish(half in prop::collection::vec(0.01f64..1.0, 1..6), mid in 0.01f64..1.0) {
            let mut e = half.clone();
            e.push(mid);
            e.extend(half.iter().rev());
            prop_assert!(skewness(&e).unwrap().abs() < 1e-12);
        }
    }
}
