//! One pipeline per subcommand. Each writes its artifacts into the output directory and
//! returns their file names for the manifest.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use isingwp::adapt::{adapt_run, build_pool, default_window, reference_sequence, AdaptAnsatz, AdaptConfig, AdaptTrace, Objective, Reference};
use isingwp::analysis::{compare, cutoff_range, read_density_csv, skewness_sweep, trace_rows, DensityRow};
use isingwp::model::{Boundary, IsingModel};
use isingwp::noise::{energy_rescale, mitigation_pipeline, PauliNoiseSpec};
use isingwp::scatter::{evolve_and_measure, ScatterConfig, MAX_SITES};
use isingwp::sim::{Circuit, StateVector};
use isingwp::spectra::{dispersion_from, exact_wavepacket, inelastic_kinematics, single_particle_spectrum, vacuum_state, write_dispersion_csv};
use isingwp::wstate::{build, coefficients, lattice_seed, predict_infidelity, predict_success, exact_infidelity, Construction};
use serde::Serialize;
use serde_json::json;

use crate::config::{AdaptSection, Format, NoiseDistribution, ObjectiveKind, RunConfig};

/// Largest qubit count any subcommand simulates as a dense statevector.
pub const MAX_QUBITS: usize = isingwp::spectra::MAX_SITES;

pub struct Output {
    pub dir: PathBuf,
    pub formats: Vec<Format>,
    pub artifacts: Vec<String>,
    pub verbose: bool,
}

impl Output {
    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.dir.join(name);
        let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        self.artifacts.push(name.to_string());
        Ok(BufWriter::new(f))
    }

    fn csv(&mut self, name: &str, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
        if self.formats.contains(&Format::Csv) {
            let mut w = self.create(name)?;
            body(&mut w)?;
            w.flush()?;
        }
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        if self.formats.contains(&Format::Json) {
            self.json_always(name, value)?;
        }
        Ok(())
    }

    pub fn json_always<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn check_ceiling(l: usize, limit: usize, what: &str) -> Result<()> {
    if l > limit {
        bail!("refusing {what} on {l} qubits: the dense statevector limit is {limit} (2^{limit} amplitudes)");
    }
    Ok(())
}

pub fn prepare(cfg: &RunConfig, out: &mut Output) -> Result<()> {
    let spec = cfg.wavepacket_spec()?;
    let w = cfg.section(&cfg.wavepacket, "wavepacket")?;
    let coeffs = coefficients(&spec)?;
    let prep = build(w.construction, &coeffs, w.delta)?;
    check_ceiling(prep.circuit.n_qubits, MAX_QUBITS, "W-state preparation")?;
    out.log(format!("{:?}: {} qubits, {} ops", w.construction, prep.circuit.n_qubits, prep.circuit.ops.len()));
    let (state, p_success) = prep.run()?;
    let infidelity = 1.0 - coeffs.target_state().fidelity(&state);
    let (predicted_success, predicted_infidelity, exact_closed_form) = match w.construction {
        Construction::Mcmff => (predict_success(&coeffs, w.delta)?, predict_infidelity(&coeffs, w.delta)?, Some(exact_infidelity(&coeffs, w.delta)?)),
        Construction::Fusion => (0.5, 0.0, None),
        _ => (1.0, 0.0, None),
    };
    out.json_always("circuit.json", &prep.circuit)?;
    out.json(
        "prepare.json",
        &json!({
            "construction": w.construction,
            "sites": coeffs.sites,
            "truncated_weight": coeffs.truncated_weight,
            "qubits": prep.circuit.n_qubits,
            "two_qubit_count": prep.circuit.two_qubit_count(),
            "two_qubit_depth": prep.circuit.two_qubit_depth(),
            "p_success": { "predicted": predicted_success, "simulated": p_success },
            "infidelity": { "predicted": predicted_infidelity, "closed_form": exact_closed_form, "simulated": infidelity },
        }),
    )?;
    println!("p_success predicted {predicted_success:.12} simulated {p_success:.12}; infidelity predicted {predicted_infidelity:.3e} simulated {infidelity:.3e}");
    Ok(())
}

pub fn spectra(cfg: &RunConfig, out: &mut Output) -> Result<()> {
    let model = cfg.model()?;
    check_ceiling(model.l, isingwp::spectra::MAX_SITES, "exact diagonalization")?;
    let sp = single_particle_spectrum(&model)?;
    let table = dispersion_from(&sp);
    out.csv("dispersion.csv", |w| Ok(write_dispersion_csv(std::slice::from_ref(&table), w)?))?;
    let kinematics = match &cfg.wavepacket {
        Some(wp) => Some(inelastic_kinematics(sp.m1, sp.m2, model.gx, wp.k0_over_pi * std::f64::consts::PI, wp.sigma)?),
        None => None,
    };
    out.json("spectrum.json", &json!({ "L": model.l, "e_vac": sp.e_vac, "m1": sp.m1, "m2": sp.m2, "m2_stable": sp.m2_is_stable(), "kinematics": kinematics }))?;
    println!("m1 = {:.12}, m2 = {:.12}", sp.m1, sp.m2);
    Ok(())
}

fn reference_circuit(cfg: &RunConfig, model: &IsingModel, kind: Reference) -> Result<Circuit> {
    Ok(match kind {
        Reference::Wavepacket => lattice_seed(&coefficients(&cfg.wavepacket_spec()?)?, model.l, true)?,
        Reference::Zeros => Circuit::new(model.l),
    })
}

fn train(cfg: &RunConfig, a: &AdaptSection, model: &IsingModel, out: &Output) -> Result<(AdaptAnsatz, AdaptTrace)> {
    check_ceiling(model.l, MAX_SITES, "ADAPT training")?;
    let pool = build_pool(a.pool, model.l, model.boundary)?;
    let reference = reference_circuit(cfg, model, a.reference)?;
    let objective = match a.objective {
        ObjectiveKind::Total => Objective::TotalEnergy,
        ObjectiveKind::Window => Objective::WindowedEnergy {
            sites: match &a.window {
                Some(w) => w.clone(),
                None => default_window(&cfg.wavepacket_spec()?)?,
            },
        },
    };
    let exact: Option<StateVector> = match (model.boundary, a.reference) {
        (Boundary::Obc, _) => None,
        (Boundary::Pbc, Reference::Wavepacket) => Some(exact_wavepacket(model, &cfg.wavepacket_spec()?)?),
        (Boundary::Pbc, Reference::Zeros) => Some(vacuum_state(model)?.1),
    };
    let config = AdaptConfig { steps: a.steps, optimizer: (&a.optimizer).into(), objective };
    out.log(format!("ADAPT: {} operators, {} steps", pool.len(), a.steps));
    Ok(adapt_run(model, &pool, &reference, a.reference, &config, exact.as_ref())?)
}

/// Ansatz from a file, a stored sequence, or fresh training, in that order of preference.
fn resolve_ansatz(cfg: &RunConfig, model: &IsingModel, out: &Output) -> Result<AdaptAnsatz> {
    let a = cfg.section(&cfg.adapt, "adapt")?;
    if let Some(path) = &a.ansatz {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        return Ok(AdaptAnsatz::from_json(&text)?);
    }
    if let Some(name) = &a.sequence {
        let seq = reference_sequence(name).ok_or_else(|| anyhow!("unknown stored sequence {name:?}"))?;
        let pool = build_pool(a.pool, model.l, model.boundary)?;
        return Ok(AdaptAnsatz::from_labels(&pool, a.reference, seq.steps)?);
    }
    Ok(train(cfg, a, model, out)?.0)
}

pub fn adapt(cfg: &RunConfig, out: &mut Output) -> Result<()> {
    let model = cfg.model()?;
    let a = cfg.section(&cfg.adapt, "adapt")?;
    let (ansatz, trace) = train(cfg, a, &model, out)?;
    out.json_always("ansatz.json", &ansatz)?;
    out.json("adapt_trace.json", &trace)?;
    out.csv("adapt_trace.csv", |w| {
        writeln!(w, "step,operator,energy,total_energy,infidelity")?;
        for (i, e) in trace.energies.iter().enumerate() {
            let label = if i == 0 { "" } else { ansatz.steps[i - 1].label.as_str() };
            let inf = trace.infidelities.as_ref().map(|v| v[i].to_string()).unwrap_or_default();
            writeln!(w, "{i},{label},{e},{},{inf}", trace.total_energies[i])?;
        }
        Ok(())
    })?;
    let last = trace.energies.last().copied().unwrap_or(f64::NAN);
    println!("{} steps, final objective {last:.10}", ansatz.steps.len());
    Ok(())
}

fn scatter_config(cfg: &RunConfig, out: &Output) -> Result<ScatterConfig> {
    let model = cfg.model()?;
    check_ceiling(model.l, MAX_SITES, "scattering")?;
    let s = cfg.section(&cfg.scatter, "scatter")?;
    let spec = cfg.wavepacket_spec()?;
    let ansatz = resolve_ansatz(cfg, &model, out)?;
    let mut c = match s.packets {
        1 => ScatterConfig::single(model, spec, ansatz, s.dt, s.n_t)?,
        2 => ScatterConfig::mirrored(model, spec, ansatz, s.dt, s.n_t)?,
        n => bail!("scatter.packets must be 1 or 2, got {n}"),
    };
    c.measure_times = s.measure_times.clone();
    c.evolution = s.evolution;
    c.validate()?;
    Ok(c)
}

pub fn scatter(cfg: &RunConfig, out: &mut Output) -> Result<()> {
    let config = scatter_config(cfg, out)?;
    out.log(format!("evolving {} steps of dt = {}", config.n_steps, config.dt));
    let trace = evolve_and_measure(&config)?;
    out.csv("results.csv", |w| Ok(trace.write_csv(w)?))?;
    out.json(
        "scatter.json",
        &json!({
            "times": trace.times,
            "total_energy": trace.total_energy(),
            "reflection_asymmetry": trace.reflection_asymmetry(),
            "norm_error": trace.norm_error,
            "ansatz": config.ansatz,
        }),
    )?;
    println!("{} times recorded; max reflection asymmetry {:.3e}", trace.times.len(), trace.reflection_asymmetry());
    Ok(())
}

pub fn noise_lab(cfg: &RunConfig, out: &mut Output) -> Result<()> {
    let config = scatter_config(cfg, out)?;
    let n = cfg.section(&cfg.noise, "noise")?;
    let mut noise = PauliNoiseSpec::depolarizing(n.p_err);
    match (&n.distribution, &n.weights) {
        (NoiseDistribution::Custom, Some(w)) => noise.weights = w.clone(),
        (NoiseDistribution::Custom, None) => bail!("noise.distribution = \"custom\" needs noise.weights"),
        (NoiseDistribution::Depolarizing, Some(_)) => bail!("noise.weights is only read with distribution = \"custom\""),
        (NoiseDistribution::Depolarizing, None) => {}
    }
    noise.coherent_zz = n.coherent_zz;
    out.log(format!("{} trajectories at p_err = {}", n.shots, n.p_err));
    let run = mitigation_pipeline(&config, config.n_steps, &noise, n.twirling, n.shots, n.seed)?;
    let rescaled = run.mitigated.iter().copied().collect::<Option<Vec<f64>>>().map(|m| energy_rescale(&m, run.e_tot)).transpose()?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    out.csv("results.csv", |w| {
        writeln!(w, "n,E_n_exact,E_n_raw,E_n_mitigated,sigma,E_n_mitigated_static,E_n_rescaled")?;
        for i in 0..run.exact.len() {
            let r = rescaled.as_ref().map(|v| v[i]);
            writeln!(w, "{i},{},{},{},{},{},{}", run.exact[i], run.raw[i], opt(run.mitigated[i]), opt(run.sigma[i]), opt(run.mitigated_static[i]), opt(r))?;
        }
        Ok(())
    })?;
    out.json("observables.json", &run.observables)?;
    let agreement = run.agreement(3.0);
    out.json("noise.json", &json!({ "time": run.time, "e_tot": run.e_tot, "agreement_3sigma": agreement }))?;
    println!("mitigated E_n within 3 sigma of noiseless at {:.1}% of sites", 100.0 * agreement);
    Ok(())
}

fn density_at(rows: &[DensityRow], time: Option<f64>) -> Result<(f64, Vec<f64>)> {
    let t = match time {
        Some(t) => t,
        None => rows.iter().map(|r| r.t).fold(f64::NEG_INFINITY, f64::max),
    };
    let mut sel: Vec<&DensityRow> = rows.iter().filter(|r| (r.t - t).abs() <= 1e-9).collect();
    if sel.is_empty() {
        bail!("no rows at t = {t}");
    }
    sel.sort_by_key(|r| r.n);
    if sel.iter().enumerate().any(|(i, r)| r.n != i) {
        bail!("rows at t = {t} do not cover sites 0..L exactly once");
    }
    Ok((t, sel.iter().map(|r| r.e).collect()))
}

pub fn skewness(cfg: &RunConfig, out: &mut Output) -> Result<()> {
    let a = cfg.section(&cfg.analysis, "analysis")?;
    let rows = match &a.input {
        Some(path) => read_density_csv(File::open(path).with_context(|| format!("opening {}", path.display()))?)?,
        None => trace_rows(&evolve_and_measure(&scatter_config(cfg, out)?)?),
    };
    let (t, e) = density_at(&rows, a.time)?;
    let cutoffs = cutoff_range(a.cutoff_min, a.cutoff_max, a.cutoff_step)?;
    let report = skewness_sweep(&e, &vec![0.0; e.len()], a.half, &cutoffs, a.bootstrap_n, a.seed);
    out.csv("results.csv", |w| {
        writeln!(w, "eps,window_lo,window_hi,gamma,sigma")?;
        for c in &report.cutoffs {
            let (lo, hi) = c.window.map(|(a, b)| (a.to_string(), b.to_string())).unwrap_or_default();
            let g = c.gamma.map(|v| v.to_string()).unwrap_or_default();
            let s = c.sigma.map(|v| v.to_string()).unwrap_or_default();
            writeln!(w, "{},{lo},{hi},{g},{s}", c.eps)?;
        }
        Ok(())
    })?;
    out.json("skewness.json", &json!({ "t": t, "report": report }))?;
    println!("t = {t}: gamma = {:.6} +- {:.6}", report.gamma, report.error);
    Ok(())
}

fn read_rows(path: &Path) -> Result<Vec<DensityRow>> {
    Ok(read_density_csv(File::open(path).with_context(|| format!("opening {}", path.display()))?)?)
}

pub fn compare_tables(cfg: &RunConfig, out: &mut Output) -> Result<()> {
    let c = cfg.section(&cfg.compare, "compare")?;
    let report = compare(&read_rows(&c.reference)?, &read_rows(&c.computed)?, c.t_tol);
    out.csv("results.csv", |w| {
        writeln!(w, "t,n,reference,computed,diff")?;
        for s in &report.sites {
            writeln!(w, "{},{},{},{},{}", s.t, s.n, s.reference, s.computed, s.diff)?;
        }
        Ok(())
    })?;
    out.json("compare.json", &json!({ "max_abs_diff": report.max_abs_diff, "matched": report.sites.len(), "missing": report.missing }))?;
    println!("max |diff| = {:.3e} over {} rows, {} missing", report.max_abs_diff, report.sites.len(), report.missing.len());
    Ok(())
}
