//! Experiment configuration files (TOML).

use std::path::Path;

use conserva_core::fields::TestFunction;
use conserva_core::model::{make_preset, Capacity, ModelPreset, RatePolicy};
use conserva_core::sim::InitialProfile;
use conserva_core::FourierSeries;
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Base seed; `--seed` overrides it.
    #[serde(default)]
    pub seed: u64,
    pub model: ModelPreset,
    /// Initial density `psi`.
    pub psi: FourierSeries,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub meanfield: MeanFieldSection,
    #[serde(default)]
    pub observable: ObservableSection,
    #[serde(default)]
    pub ou: OuSection,
    #[serde(default)]
    pub indep: IndepSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    /// Number of sites for single-size commands.
    pub n: usize,
    /// Sizes for sweeps; defaults to `[n]`.
    pub n_list: Option<Vec<usize>>,
    pub horizon: f64,
    /// Defaults to `[0, horizon]`.
    pub observation_times: Option<Vec<f64>>,
    pub replicas: usize,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            n: 64,
            n_list: None,
            horizon: 1.0,
            observation_times: None,
            replicas: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeanFieldSection {
    pub grid: usize,
    pub dt: f64,
    /// Truncation level; required for infinite capacity.
    pub kmax: Option<usize>,
}

impl Default for MeanFieldSection {
    fn default() -> Self {
        Self {
            grid: 64,
            dt: 1e-3,
            kmax: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObservableSection {
    /// Occupancy level `k` of the observed field.
    pub level: u32,
    /// Test function `f`.
    pub f: FourierSeries,
}

impl Default for ObservableSection {
    fn default() -> Self {
        Self {
            level: 1,
            f: FourierSeries::cosine(0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OuSection {
    pub grid: usize,
    pub dt: f64,
}

impl Default for OuSection {
    fn default() -> Self {
        Self { grid: 64, dt: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndepSection {
    /// Observation time of the covariance panel.
    pub time: f64,
    pub decay_replicas: usize,
    pub overlap_replicas: usize,
    /// Horizon of the influence sets.
    pub overlap_horizon: f64,
    /// Arrow rate; defaults to the policy's thinning envelope.
    pub envelope: Option<f64>,
    /// Occupancy level used to bound rates for infinite capacity.
    pub truncation: Option<u32>,
}

impl Default for IndepSection {
    fn default() -> Self {
        Self {
            time: 0.5,
            decay_replicas: 2000,
            overlap_replicas: 2000,
            overlap_horizon: 0.5,
            envelope: None,
            truncation: None,
        }
    }
}

/// A validated configuration with the derived core objects.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub policy: RatePolicy,
    pub profile: InitialProfile,
    pub observation_times: Vec<f64>,
    pub n_list: Vec<usize>,
    pub f: TestFunction,
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Config(msg.into())
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
    }

    /// Applies defaults and checks every value before anything runs.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Resolved, Failure> {
        if let Some(s) = seed {
            self.seed = s;
        }
        let policy = make_preset(&self.model).map_err(|e| invalid(format!("model: {e}")))?;
        let capacity = policy.capacity();
        let profile = InitialProfile::new(self.psi.clone(), capacity)
            .map_err(|e| invalid(format!("psi: {e}")))?;
        let sim = &mut self.sim;
        if !(sim.horizon >= 0.0 && sim.horizon.is_finite()) {
            return Err(invalid(format!(
                "sim.horizon = {} must be finite and >= 0",
                sim.horizon
            )));
        }
        let times = sim
            .observation_times
            .get_or_insert_with(|| {
                if sim.horizon > 0.0 {
                    vec![0.0, sim.horizon]
                } else {
                    vec![0.0]
                }
            })
            .clone();
        if times.is_empty()
            || times.windows(2).any(|w| w[1] <= w[0])
            || times.iter().any(|&t| !(0.0..=sim.horizon).contains(&t))
        {
            return Err(invalid(format!(
                "sim.observation_times must be strictly increasing within [0, {}]",
                sim.horizon
            )));
        }
        let n_list = sim.n_list.get_or_insert_with(|| vec![sim.n]).clone();
        if sim.n < 2 || n_list.is_empty() || n_list.iter().any(|&n| n < 2) {
            return Err(invalid("sim.n and sim.n_list entries must be at least 2"));
        }
        if sim.replicas < 2 {
            return Err(invalid("sim.replicas must be at least 2"));
        }
        let mf = &self.meanfield;
        if mf.grid < 8 || !(mf.dt > 0.0 && mf.dt.is_finite()) {
            return Err(invalid("meanfield.grid must be >= 8 and meanfield.dt > 0"));
        }
        if !capacity.is_finite() && mf.kmax.is_none() {
            return Err(invalid("meanfield.kmax is required for infinite capacity"));
        }
        if let (Capacity::Finite(k), Some(_)) = (capacity, mf.kmax) {
            return Err(invalid(format!(
                "meanfield.kmax is fixed to K = {k} for finite capacity"
            )));
        }
        if let Capacity::Finite(k) = capacity {
            if self.observable.level > k {
                return Err(invalid(format!("observable.level exceeds K = {k}")));
            }
        }
        if self.ou.grid < 8 || !(self.ou.dt > 0.0 && self.ou.dt.is_finite()) {
            return Err(invalid("ou.grid must be >= 8 and ou.dt > 0"));
        }
        let ind = &self.indep;
        if !(ind.time >= 0.0 && ind.overlap_horizon >= 0.0)
            || ind.decay_replicas < 2
            || ind.overlap_replicas < 1
        {
            return Err(invalid(
                "indep times must be >= 0 with at least 2 decay replicas and 1 overlap replica",
            ));
        }
        if ind.envelope.is_some_and(|e| !(e > 0.0 && e.is_finite())) {
            return Err(invalid("indep.envelope must be positive"));
        }
        let f = self.observable.f.clone().into();
        Ok(Resolved {
            config: self,
            policy,
            profile,
            observation_times: times,
            n_list,
            f,
        })
    }
}
