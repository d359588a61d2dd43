//! Run configuration. Every section rejects unknown keys and fills defaults during
//! parsing, so serializing a parsed config echoes every value the run used.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use isingwp::adapt::{OptimizerConfig, PoolId, Reference};
use isingwp::analysis::Half;
use isingwp::model::{Boundary, IsingModel};
use isingwp::scatter::Evolution;
use isingwp::wstate::{Construction, WavepacketSpec};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<ModelSection>,
    pub wavepacket: Option<WavepacketSection>,
    pub adapt: Option<AdaptSection>,
    pub scatter: Option<ScatterSection>,
    pub noise: Option<NoiseSection>,
    pub analysis: Option<AnalysisSection>,
    pub compare: Option<CompareSection>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(default = "default_gx")]
    pub g_x: f64,
    #[serde(default = "default_gz")]
    pub g_z: f64,
    #[serde(default = "default_boundary")]
    pub boundary: Boundary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WavepacketSection {
    pub k0_over_pi: f64,
    pub sigma: f64,
    /// Left packet center; defaults to the center of the left half.
    pub x0: Option<f64>,
    pub d: usize,
    #[serde(default = "default_construction")]
    pub construction: Construction,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Total,
    Window,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptSection {
    #[serde(default = "default_pool")]
    pub pool: PoolId,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_objective")]
    pub objective: ObjectiveKind,
    /// Sites of the windowed objective; defaults to `d + 6` sites around the packet.
    pub window: Option<Vec<usize>>,
    #[serde(default = "default_reference")]
    pub reference: Reference,
    /// Stored operator sequence used instead of training.
    pub sequence: Option<String>,
    /// Ansatz JSON written by the `adapt` subcommand, used instead of training.
    pub ansatz: Option<PathBuf>,
    #[serde(default)]
    pub optimizer: OptimizerSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub tol: f64,
    pub max_evals: usize,
    pub initial_step: f64,
    pub restarts: usize,
    pub bound: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let c = OptimizerConfig::default();
        Self { tol: c.tol, max_evals: c.max_evals, initial_step: c.initial_step, restarts: c.restarts, bound: c.bound }
    }
}

impl From<&OptimizerSection> for OptimizerConfig {
    fn from(s: &OptimizerSection) -> Self {
        Self { tol: s.tol, max_evals: s.max_evals, initial_step: s.initial_step, restarts: s.restarts, bound: s.bound }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScatterSection {
    /// Sites between the two packet centers; overrides `wavepacket.x0`.
    pub separation: Option<usize>,
    #[serde(default = "default_packets")]
    pub packets: usize,
    pub dt: f64,
    #[serde(rename = "n_T")]
    pub n_t: usize,
    /// Multiples of `dt`; empty measures after every step.
    #[serde(default)]
    pub measure_times: Vec<f64>,
    #[serde(default = "default_evolution")]
    pub evolution: Evolution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseDistribution {
    Depolarizing,
    /// Relative weights given in `weights`.
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub p_err: f64,
    #[serde(default = "default_distribution")]
    pub distribution: NoiseDistribution,
    /// Relative weights of the 15 non-identity Pauli pairs, entry `a + 4b − 1`.
    pub weights: Option<Vec<f64>>,
    #[serde(default = "default_true")]
    pub twirling: bool,
    /// Number of noise trajectories.
    pub shots: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub coherent_zz: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    /// `t, n, E_n` table to analyze; when absent the scatter pipeline runs first.
    pub input: Option<PathBuf>,
    /// Time row to analyze; defaults to the last one.
    pub time: Option<f64>,
    #[serde(default = "default_half")]
    pub half: Half,
    #[serde(default = "default_cutoff_min")]
    pub cutoff_min: f64,
    #[serde(default = "default_cutoff_max")]
    pub cutoff_max: f64,
    #[serde(default = "default_cutoff_step")]
    pub cutoff_step: f64,
    #[serde(default = "default_bootstrap")]
    pub bootstrap_n: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    pub reference: PathBuf,
    pub computed: PathBuf,
    #[serde(default = "default_t_tol")]
    pub t_tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_directory")]
    pub directory: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { directory: default_directory(), formats: default_formats() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

fn default_gx() -> f64 {
    1.25
}
fn default_gz() -> f64 {
    0.15
}
fn default_boundary() -> Boundary {
    Boundary::Pbc
}
fn default_construction() -> Construction {
    Construction::Linear
}
fn default_delta() -> f64 {
    0.2
}
fn default_pool() -> PoolId {
    PoolId::O3
}
fn default_steps() -> usize {
    8
}
fn default_objective() -> ObjectiveKind {
    ObjectiveKind::Window
}
fn default_reference() -> Reference {
    Reference::Wavepacket
}
fn default_packets() -> usize {
    2
}
fn default_evolution() -> Evolution {
    Evolution::Trotter2
}
fn default_distribution() -> NoiseDistribution {
    NoiseDistribution::Depolarizing
}
fn default_true() -> bool {
    true
}
fn default_half() -> Half {
    Half::Left
}
fn default_cutoff_min() -> f64 {
    0.055
}
fn default_cutoff_max() -> f64 {
    0.075
}
fn default_cutoff_step() -> f64 {
    0.005
}
fn default_bootstrap() -> usize {
    200
}
fn default_t_tol() -> f64 {
    1e-9
}
fn default_directory() -> PathBuf {
    PathBuf::from("out")
}
fn default_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Json]
}

impl RunConfig {
    /// Parses TOML, or the `config` member of a manifest written by an earlier run.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        if path.extension().is_some_and(|e| e == "json") {
            #[derive(Deserialize)]
            struct Manifest {
                config: RunConfig,
            }
            let m: Manifest = serde_json::from_str(&text).with_context(|| format!("{}: not a run manifest", path.display()))?;
            return Ok(m.config);
        }
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn model(&self) -> Result<IsingModel> {
        let m = self.model.as_ref().ok_or_else(|| anyhow!("missing [model] section"))?;
        Ok(IsingModel::new(m.l, m.g_x, m.g_z, m.boundary)?)
    }

    pub fn section<'a, T>(&self, s: &'a Option<T>, name: &str) -> Result<&'a T> {
        s.as_ref().ok_or_else(|| anyhow!("missing [{name}] section"))
    }

    /// The (left) packet, placed by `scatter.separation` when given.
    pub fn wavepacket_spec(&self) -> Result<WavepacketSpec> {
        let model = self.model()?;
        let w = self.section(&self.wavepacket, "wavepacket")?;
        let l = model.l as f64;
        let x0 = match (self.scatter.as_ref().and_then(|s| s.separation), w.x0) {
            (Some(sep), _) => {
                if sep as f64 > l - 1.0 {
                    bail!("scatter.separation = {sep} does not fit on L = {}", model.l);
                }
                (l - 1.0 - sep as f64) / 2.0
            }
            (None, Some(x0)) => x0,
            (None, None) => (l / 2.0 - 1.0) / 2.0,
        };
        Ok(WavepacketSpec { l: model.l, k0: w.k0_over_pi * PI, sigma: w.sigma, x0, d: w.d, boundary: model.boundary })
    }

    /// Overrides every seed in the config.
    pub fn set_seed(&mut self, seed: u64) {
        if let Some(n) = self.noise.as_mut() {
            n.seed = seed;
        }
        if let Some(a) = self.analysis.as_mut() {
            a.seed = seed;
        }
    }

    pub fn seeds(&self) -> serde_json::Value {
        serde_json::json!({
            "noise": self.noise.as_ref().map(|n| n.seed),
            "analysis": self.analysis.as_ref().map(|a| a.seed),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_filled_and_echoed() {
        let c = RunConfig::parse("[model]\nL = 12\n").unwrap();
        let m = c.model.as_ref().unwrap();
        assert_eq!((m.g_x, m.g_z, m.boundary), (1.25, 0.15, Boundary::Pbc));
        let echo = serde_json::to_value(&c).unwrap();
        assert_eq!(echo["model"]["g_x"], 1.25);
        assert_eq!(echo["output"]["directory"], "out");
        let back: RunConfig = serde_json::from_value(echo).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = RunConfig::parse("[model]\nL = 12\ngx = 1.0\n").unwrap_err().to_string();
        assert!(err.contains("gx") && err.contains("line 3"), "{err}");
        let err = RunConfig::parse("[modle]\nL = 12\n").unwrap_err().to_string();
        assert!(err.contains("modle"), "{err}");
    }

    #[test]
    fn separation_places_the_left_packet() {
        let c = RunConfig::parse(
            "[model]\nL = 14\n[wavepacket]\nk0_over_pi = 0.36\nsigma = 0.5\nd = 5\n[scatter]\nseparation = 7\ndt = 0.5\nn_T = 2\n",
        )
        .unwrap();
        assert_eq!(c.wavepacket_spec().unwrap().x0, 3.0);
    }
}
