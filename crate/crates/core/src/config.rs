//! TOML experiment configuration. Every section and field is optional.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flatctrl::ControlTiming;
use crate::harness::MonteCarloSpec;
use crate::model::{Geometry, KgInterpretation, PhysicalParams, DEFAULT_FRICTION};
use crate::r2r::{nominal_reference, CostMode, NmCoefficients, R2RConfig, RecordRetention, ResistanceProbe};
use crate::sensitivity::DEFAULT_REL_STEP;
use crate::simulator::SimConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub device: DeviceSection,
    pub geometry: Geometry,
    pub reference: ReferenceSection,
    pub control: ControlTiming,
    pub sim: SimConfig,
    pub r2r: R2RSection,
    pub montecarlo: MonteCarloSection,
    pub sensitivity: SensitivitySection,
    pub simulate: SimulateSection,
}

/// Nominal device. Individual parameters override the built-in values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceSection {
    pub k_g_interpretation: KgInterpretation,
    pub c_f: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_g: Option<f64>,
    #[serde(rename = "R_g0", skip_serializing_if = "Option::is_none")]
    pub r_g0: Option<f64>,
    #[serde(rename = "R_c0", skip_serializing_if = "Option::is_none")]
    pub r_c0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_sat: Option<f64>,
    #[serde(rename = "R", skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
}

impl Default for DeviceSection {
    fn default() -> Self {
        Self {
            k_g_interpretation: KgInterpretation::default(),
            c_f: DEFAULT_FRICTION,
            m: None,
            k_s: None,
            z_s: None,
            k_g: None,
            r_g0: None,
            r_c0: None,
            lambda_sat: None,
            r: None,
        }
    }
}

impl DeviceSection {
    pub fn nominal(&self) -> PhysicalParams {
        let mut p = PhysicalParams::nominal_with(self.k_g_interpretation);
        p.c_f = self.c_f;
        let slots = [
            (&mut p.m, self.m),
            (&mut p.k_s, self.k_s),
            (&mut p.z_s, self.z_s),
            (&mut p.k_g, self.k_g),
            (&mut p.r_g0, self.r_g0),
            (&mut p.r_c0, self.r_c0),
            (&mut p.lambda_sat, self.lambda_sat),
            (&mut p.r, self.r),
        ];
        for (slot, value) in slots {
            if let Some(v) = value {
                *slot = v;
            }
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceSection {
    /// Transition time `T` (s).
    pub duration: f64,
}

impl Default for ReferenceSection {
    fn default() -> Self {
        Self { duration: 4.5e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct R2RSection {
    pub n_operations: usize,
    pub delta: f64,
    pub mode: CostMode,
    pub restart_on_collapse: bool,
    pub coefficients: NmCoefficients,
    pub probe: ResistanceProbe,
    pub retain: RecordRetention,
}

impl Default for R2RSection {
    fn default() -> Self {
        let d = R2RConfig::default();
        Self {
            n_operations: d.n_operations,
            delta: d.delta,
            mode: d.mode,
            restart_on_collapse: d.restart_on_collapse,
            coefficients: d.coefficients,
            probe: d.probe,
            retain: RecordRetention::FirstAndLast,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloSection {
    pub n_trials: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub modes: Vec<CostMode>,
    pub percentiles: Vec<f64>,
    /// Worker threads; 0 uses all available cores.
    pub parallelism: usize,
    pub baseline_voltage: f64,
    pub plots: bool,
    pub trial_logs: bool,
}

impl Default for MonteCarloSection {
    fn default() -> Self {
        Self {
            n_trials: 100,
            epsilon: 0.05,
            seed: 2024,
            modes: vec![CostMode::Im, CostMode::Dm],
            percentiles: vec![10.0, 25.0, 50.0, 75.0, 90.0],
            parallelism: 0,
            baseline_voltage: 30.0,
            plots: true,
            trial_logs: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivitySection {
    pub rel_step: f64,
    /// Grid spacing of the predictor analysis (s).
    pub sample_period: f64,
}

impl Default for SensitivitySection {
    fn default() -> Self {
        Self { rel_step: DEFAULT_REL_STEP, sample_period: 1e-6 }
    }
}

/// Single-operation run: the device is the nominal one scaled per parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    /// Multipliers for the nine physical parameters, in declaration order.
    pub device_scale: [f64; 9],
    /// Controller parameters; omitted means the device's own values.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_hat: Option<[f64; 7]>,
    /// Apply this constant voltage instead of the feedforward controller.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub voltage: Option<f64>,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self { device_scale: [1.0; 9], theta_hat: None, voltage: None }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn nominal(&self) -> PhysicalParams {
        self.device.nominal()
    }

    pub fn r2r_config(&self) -> R2RConfig {
        let nominal = self.nominal();
        R2RConfig {
            n_operations: self.r2r.n_operations,
            delta: self.r2r.delta,
            coefficients: self.r2r.coefficients,
            mode: self.r2r.mode,
            restart_on_collapse: self.r2r.restart_on_collapse,
            sim: self.sim,
            timing: self.control,
            reference: nominal_reference(&nominal, &self.geometry, self.reference.duration),
            nominal,
            probe: self.r2r.probe,
            retain: self.r2r.retain,
        }
    }

    pub fn montecarlo_spec(&self) -> MonteCarloSpec {
        let mc = &self.montecarlo;
        MonteCarloSpec {
            n_trials: mc.n_trials,
            epsilon: mc.epsilon,
            seed: mc.seed,
            modes: mc.modes.clone(),
            percentiles: mc.percentiles.clone(),
            parallelism: mc.parallelism,
            baseline_voltage: mc.baseline_voltage,
            geometry: self.geometry,
            r2r: R2RConfig { retain: RecordRetention::None, ..self.r2r_config() },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.reference.duration > 0.0) {
            return Err(Error::Config("reference.duration must be positive".into()));
        }
        self.r2r_config().validate(&self.geometry).map_err(|e| Error::Config(e.to_string()))?;
        self.montecarlo_spec().validate().map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = Config::from_toml("").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.nominal(), PhysicalParams::nominal());
        c.validate().unwrap();
    }

    #[test]
    fn round_trip_through_toml() {
        let mut c = Config::default();
        c.device.r = Some(48.0);
        c.montecarlo.modes = vec![CostMode::Dm];
        c.simulate.voltage = Some(30.0);
        let text = c.to_toml().unwrap();
        assert_eq!(Config::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn overrides_and_interpretation() {
        let c = Config::from_toml(
            "[device]\nk_g_interpretation = \"as_printed\"\nR_g0 = 4.0\n[r2r]\nmode = \"dm\"\nn_operations = 20\n",
        )
        .unwrap();
        let p = c.nominal();
        assert_eq!(p.k_g, 7.67);
        assert_eq!(p.r_g0, 4.0);
        assert_eq!(c.r2r_config().mode, CostMode::Dm);
        assert_eq!(c.r2r_config().reference.r_g0_nom, 4.0);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(Config::from_toml("[device]\nmass = 1.0\n"), Err(Error::Config(_))));
        let c = Config::from_toml("[r2r]\nn_operations = 3\n").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
