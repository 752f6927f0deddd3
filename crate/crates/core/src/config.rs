//! Experiment configuration.
//!
//! Keys carry their unit as a suffix (`_Hz`, `_s`, `_MHz_per_T`, …). Unknown
//! keys are rejected; a key whose stem matches a known key but whose unit
//! suffix differs is reported as a unit mismatch.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::alt::AltReadoutParams;
use crate::dynamics::BathSpin;
use crate::error::{Error, Result};
use crate::readout::{ReadoutParams, DEFAULT_GATE_OVERHEAD_S, DEFAULT_LAMBDA_DARK};
use crate::spin::{GyromagneticTable, HyperfineTensor, Species, SpinSystem};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spin_system: Option<SpinSystemConfig>,
    pub readout: ReadoutConfig,
    #[serde(default)]
    pub alt: AltConfig,
    #[serde(default)]
    pub trajectory: TrajectoryConfig,
    #[serde(default)]
    pub dynamics: DynamicsConfig,
}

fn default_output_dir() -> String {
    "out".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpinSystemConfig {
    #[serde(rename = "D_ground_MHz")]
    pub d_ground_mhz: f64,
    #[serde(rename = "D_excited_MHz")]
    pub d_excited_mhz: f64,
    #[serde(rename = "gamma_e_MHz_per_T", default = "default_gamma_e")]
    pub gamma_e_mhz_per_t: f64,
    #[serde(rename = "gamma_n_MHz_per_T", default = "default_gamma_n")]
    pub gamma_n_mhz_per_t: f64,
    #[serde(rename = "B_T")]
    pub b_t: f64,
    #[serde(default)]
    pub hyperfine: HyperfineConfig,
}

fn default_gamma_e() -> f64 {
    28_025.0
}

/// Same sign convention as the electron term, so that `γ_n·B·I_z` and
/// `γ_e·B·S_z` enter the Hamiltonian alike.
fn default_gamma_n() -> f64 {
    8.465
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperfineConfig {
    #[serde(rename = "Axx_MHz")]
    pub axx_mhz: f64,
    #[serde(rename = "Ayy_MHz")]
    pub ayy_mhz: f64,
    #[serde(rename = "Azz_MHz")]
    pub azz_mhz: f64,
}

impl Default for HyperfineConfig {
    fn default() -> Self {
        let t = HyperfineTensor::si_ii();
        Self {
            axx_mhz: t.a_xx,
            ayy_mhz: t.a_yy,
            azz_mhz: t.a_zz,
        }
    }
}

impl SpinSystemConfig {
    pub fn system(&self) -> SpinSystem {
        SpinSystem {
            d_ground_mhz: self.d_ground_mhz,
            d_excited_mhz: self.d_excited_mhz,
            gamma_e_mhz_per_t: self.gamma_e_mhz_per_t,
            gamma_n_mhz_per_t: self.gamma_n_mhz_per_t,
            b_t: self.b_t,
        }
    }

    pub fn tensor(&self) -> HyperfineTensor {
        HyperfineTensor::new(self.hyperfine.axx_mhz, self.hyperfine.ayy_mhz, self.hyperfine.azz_mhz)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReadoutConfig {
    #[serde(rename = "gamma_bright_Hz")]
    pub gamma_bright_hz: f64,
    #[serde(rename = "gamma_dark_Hz")]
    pub gamma_dark_hz: f64,
    pub lambda_bright_per_rep: f64,
    #[serde(default = "default_lambda_dark")]
    pub lambda_dark_per_rep: f64,
    /// Laser window; `t_rep_s` defaults to this plus the gate overhead.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_laser_s: Option<f64>,
    #[serde(default = "default_overhead")]
    pub gate_overhead_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_rep_s: Option<f64>,
    #[serde(rename = "N", default = "default_n")]
    pub n: usize,
    /// Single threshold `n ≥ n_th` reads bright.
    #[serde(default = "default_threshold")]
    pub threshold: u64,
    #[serde(default = "default_trials")]
    pub trials: u64,
    #[serde(default)]
    pub scan: ScanConfig,
    #[serde(default)]
    pub two_point: TwoPointConfig,
}

fn default_lambda_dark() -> f64 {
    DEFAULT_LAMBDA_DARK
}
fn default_overhead() -> f64 {
    DEFAULT_GATE_OVERHEAD_S
}
fn default_n() -> usize {
    300
}
fn default_threshold() -> u64 {
    3
}
fn default_trials() -> u64 {
    100_000
}

impl ReadoutConfig {
    pub fn t_rep(&self) -> Result<f64> {
        match (self.t_rep_s, self.t_laser_s) {
            (Some(t), None) => Ok(t),
            (None, Some(l)) => Ok(l + self.gate_overhead_s),
            (Some(t), Some(l)) => {
                let derived = l + self.gate_overhead_s;
                if ((t - derived) / derived).abs() > 1e-9 {
                    Err(cfg_err(
                        "readout.t_rep_s",
                        format!("{t} disagrees with t_laser_s + gate_overhead_s = {derived}"),
                    ))
                } else {
                    Ok(t)
                }
            }
            (None, None) => Err(cfg_err("readout.t_laser_s", "either t_laser_s or t_rep_s is required")),
        }
    }

    pub fn params(&self) -> Result<ReadoutParams> {
        Ok(ReadoutParams {
            gamma_bright_hz: self.gamma_bright_hz,
            gamma_dark_hz: self.gamma_dark_hz,
            lambda_bright: self.lambda_bright_per_rep,
            lambda_dark: self.lambda_dark_per_rep,
            t_rep_s: self.t_rep()?,
            repetitions: self.n,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    #[serde(rename = "N_values")]
    pub n_values: Vec<usize>,
    pub n_dark_max_limit: u64,
    pub n_bright_min_limit: u64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            n_values: vec![50, 100, 150, 200, 250, 300, 400, 500, 750, 1000, 1500, 2000, 3000],
            n_dark_max_limit: 5,
            n_bright_min_limit: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoPointConfig {
    #[serde(rename = "N1")]
    pub n1: usize,
    #[serde(rename = "N2")]
    pub n2: usize,
    pub bright_threshold: u64,
    pub crc_pass: f64,
    pub initial_bright_probability: f64,
}

impl Default for TwoPointConfig {
    fn default() -> Self {
        Self {
            n1: 300,
            n2: 300,
            bright_threshold: 3,
            crc_pass: 1.0,
            initial_bright_probability: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AltConfig {
    pub n_pairs: usize,
    pub scan_pairs: Vec<usize>,
    pub threshold_limit: i64,
    pub trials: u64,
}

impl Default for AltConfig {
    fn default() -> Self {
        Self {
            n_pairs: 150,
            scan_pairs: vec![10, 25, 50, 75, 100, 150, 200],
            threshold_limit: 30,
            trials: 100_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    #[serde(rename = "T_total_s")]
    pub t_total_s: f64,
    #[serde(rename = "N_bin")]
    pub n_bin: usize,
    pub p_threshold: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            t_total_s: 10.0,
            n_bin: 100,
            p_threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsConfig {
    #[serde(default)]
    pub rabi: RabiBlock,
    #[serde(default)]
    pub ramsey: RamseyBlock,
    #[serde(default)]
    pub endor: EndorBlock,
}

/// Readout fidelities for the contrast map. When both are absent they are
/// computed from the readout block at its `N` and `threshold`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RabiBlock {
    #[serde(rename = "rabi_frequency_kHz")]
    pub rabi_frequency_khz: f64,
    pub t_stop_s: f64,
    pub points: usize,
    #[serde(rename = "F_dark", skip_serializing_if = "Option::is_none")]
    pub f_dark: Option<f64>,
    #[serde(rename = "F_bright", skip_serializing_if = "Option::is_none")]
    pub f_bright: Option<f64>,
    /// Scale of the optional Poisson sampling layer.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shots: Option<f64>,
}

impl Default for RabiBlock {
    fn default() -> Self {
        Self {
            rabi_frequency_khz: 1.0,
            t_stop_s: 3e-3,
            points: 401,
            f_dark: None,
            f_bright: None,
            shots: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RamseyBlock {
    #[serde(rename = "detuning_kHz")]
    pub detuning_khz: f64,
    #[serde(rename = "T2_star_s")]
    pub t2_star_s: f64,
    pub decay_exponent: f64,
    #[serde(rename = "beat_splitting_kHz", default, skip_serializing_if = "Option::is_none")]
    pub beat_splitting_khz: Option<f64>,
    pub t_stop_s: f64,
    pub points: usize,
    #[serde(rename = "F_dark", default, skip_serializing_if = "Option::is_none")]
    pub f_dark: Option<f64>,
    #[serde(rename = "F_bright", default, skip_serializing_if = "Option::is_none")]
    pub f_bright: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shots: Option<f64>,
}

impl Default for RamseyBlock {
    fn default() -> Self {
        Self {
            detuning_khz: 1.0,
            t2_star_s: 7.4e-3,
            decay_exponent: 2.0,
            beat_splitting_khz: None,
            t_stop_s: 20e-3,
            points: 401,
            f_dark: None,
            f_bright: None,
            shots: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndorBlock {
    /// Falls back to `spin_system.B_T`.
    #[serde(rename = "B_T", default, skip_serializing_if = "Option::is_none")]
    pub b_t: Option<f64>,
    #[serde(rename = "f_start_kHz")]
    pub f_start_khz: f64,
    #[serde(rename = "f_stop_kHz")]
    pub f_stop_khz: f64,
    #[serde(rename = "f_step_kHz")]
    pub f_step_khz: f64,
    pub baseline: f64,
    pub bath: Vec<BathSpin>,
    pub gyromagnetic: GyromagneticTable,
    #[serde(rename = "match_tolerance_kHz")]
    pub match_tolerance_khz: f64,
    #[serde(rename = "max_Azz_kHz")]
    pub max_azz_khz: f64,
    pub peak_min_height: f64,
}

impl Default for EndorBlock {
    fn default() -> Self {
        Self {
            b_t: None,
            f_start_khz: 1000.0,
            f_stop_khz: 1700.0,
            f_step_khz: 0.25,
            baseline: 0.05,
            bath: Vec::new(),
            gyromagnetic: GyromagneticTable::default(),
            match_tolerance_khz: 2.0,
            max_azz_khz: 200.0,
            peak_min_height: 0.05,
        }
    }
}

impl EndorBlock {
    pub fn grid(&self) -> Vec<f64> {
        let n = ((self.f_stop_khz - self.f_start_khz) / self.f_step_khz + 1e-9).floor() as usize;
        (0..=n).map(|i| self.f_start_khz + i as f64 * self.f_step_khz).collect()
    }
}

fn cfg_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

fn check(ok: bool, path: &str, message: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(cfg_err(path, message))
    }
}

fn finite_nonneg(v: f64) -> bool {
    v.is_finite() && v >= 0.0
}

fn positive(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        check(
            self.schema_version == SCHEMA_VERSION,
            "schema_version",
            &format!("unsupported schema version (expected {SCHEMA_VERSION})"),
        )?;
        if let Some(s) = &self.spin_system {
            for (v, key) in [
                (s.d_ground_mhz, "D_ground_MHz"),
                (s.d_excited_mhz, "D_excited_MHz"),
                (s.gamma_e_mhz_per_t, "gamma_e_MHz_per_T"),
                (s.gamma_n_mhz_per_t, "gamma_n_MHz_per_T"),
            ] {
                check(v.is_finite(), &format!("spin_system.{key}"), "must be finite")?;
            }
            check(finite_nonneg(s.b_t), "spin_system.B_T", "must be finite and ≥ 0")?;
            for (v, key) in [
                (s.hyperfine.axx_mhz, "Axx_MHz"),
                (s.hyperfine.ayy_mhz, "Ayy_MHz"),
                (s.hyperfine.azz_mhz, "Azz_MHz"),
            ] {
                check(v.is_finite(), &format!("spin_system.hyperfine.{key}"), "must be finite")?;
            }
        }

        let r = &self.readout;
        check(finite_nonneg(r.gamma_bright_hz), "readout.gamma_bright_Hz", "must be finite and ≥ 0")?;
        check(finite_nonneg(r.gamma_dark_hz), "readout.gamma_dark_Hz", "must be finite and ≥ 0")?;
        check(finite_nonneg(r.lambda_dark_per_rep), "readout.lambda_dark_per_rep", "must be finite and ≥ 0")?;
        check(
            r.lambda_bright_per_rep.is_finite() && r.lambda_bright_per_rep >= r.lambda_dark_per_rep,
            "readout.lambda_bright_per_rep",
            "must be finite and ≥ lambda_dark_per_rep",
        )?;
        if let Some(t) = r.t_laser_s {
            check(positive(t), "readout.t_laser_s", "must be positive")?;
        }
        check(finite_nonneg(r.gate_overhead_s), "readout.gate_overhead_s", "must be finite and ≥ 0")?;
        if let Some(t) = r.t_rep_s {
            check(positive(t), "readout.t_rep_s", "must be positive")?;
        }
        r.t_rep()?;
        check(r.n >= 1, "readout.N", "must be at least 1")?;
        check(r.threshold >= 1, "readout.threshold", "must be at least 1")?;
        check(r.trials >= 1, "readout.trials", "must be at least 1")?;
        check(
            !r.scan.n_values.is_empty() && r.scan.n_values.iter().all(|n| *n >= 1),
            "readout.scan.N_values",
            "must be a non-empty list of positive integers",
        )?;
        check(
            r.scan.n_bright_min_limit > r.scan.n_dark_max_limit,
            "readout.scan.n_bright_min_limit",
            "must exceed n_dark_max_limit",
        )?;
        let tp = &r.two_point;
        check(tp.n1 >= 1, "readout.two_point.N1", "must be at least 1")?;
        check(tp.n2 >= 1, "readout.two_point.N2", "must be at least 1")?;
        check(
            tp.crc_pass > 0.0 && tp.crc_pass <= 1.0,
            "readout.two_point.crc_pass",
            "must lie in (0, 1]",
        )?;
        check(
            (0.0..=1.0).contains(&tp.initial_bright_probability),
            "readout.two_point.initial_bright_probability",
            "must lie in [0, 1]",
        )?;

        let a = &self.alt;
        check(a.n_pairs >= 1, "alt.n_pairs", "must be at least 1")?;
        check(
            !a.scan_pairs.is_empty() && a.scan_pairs.iter().all(|n| *n >= 1),
            "alt.scan_pairs",
            "must be a non-empty list of positive integers",
        )?;
        check(a.threshold_limit >= 1, "alt.threshold_limit", "must be at least 1")?;
        check(a.trials >= 1, "alt.trials", "must be at least 1")?;

        let t = &self.trajectory;
        check(positive(t.t_total_s), "trajectory.T_total_s", "must be positive")?;
        check(t.n_bin >= 1, "trajectory.N_bin", "must be at least 1")?;
        check((0.0..1.0).contains(&t.p_threshold), "trajectory.p_threshold", "must lie in [0, 1)")?;

        let rb = &self.dynamics.rabi;
        check(positive(rb.rabi_frequency_khz), "dynamics.rabi.rabi_frequency_kHz", "must be positive")?;
        check(positive(rb.t_stop_s), "dynamics.rabi.t_stop_s", "must be positive")?;
        check(rb.points >= 2, "dynamics.rabi.points", "must be at least 2")?;
        validate_contrast("dynamics.rabi", rb.f_dark, rb.f_bright, rb.shots)?;

        let rm = &self.dynamics.ramsey;
        check(rm.detuning_khz.is_finite(), "dynamics.ramsey.detuning_kHz", "must be finite")?;
        check(positive(rm.t2_star_s), "dynamics.ramsey.T2_star_s", "must be positive")?;
        check(
            (1.0..=3.0).contains(&rm.decay_exponent),
            "dynamics.ramsey.decay_exponent",
            "must lie in [1, 3]",
        )?;
        if let Some(b) = rm.beat_splitting_khz {
            check(finite_nonneg(b), "dynamics.ramsey.beat_splitting_kHz", "must be finite and ≥ 0")?;
        }
        check(positive(rm.t_stop_s), "dynamics.ramsey.t_stop_s", "must be positive")?;
        check(rm.points >= 6, "dynamics.ramsey.points", "must be at least 6")?;
        validate_contrast("dynamics.ramsey", rm.f_dark, rm.f_bright, rm.shots)?;

        let e = &self.dynamics.endor;
        if let Some(b) = e.b_t {
            check(finite_nonneg(b), "dynamics.endor.B_T", "must be finite and ≥ 0")?;
        }
        check(positive(e.f_step_khz), "dynamics.endor.f_step_kHz", "must be positive")?;
        check(
            e.f_start_khz.is_finite() && e.f_stop_khz.is_finite() && e.f_stop_khz >= e.f_start_khz,
            "dynamics.endor.f_stop_kHz",
            "must be finite and ≥ f_start_kHz",
        )?;
        check((0.0..=1.0).contains(&e.baseline), "dynamics.endor.baseline", "must lie in [0, 1]")?;
        for (i, s) in e.bath.iter().enumerate() {
            let p = format!("dynamics.endor.bath[{i}]");
            check(s.azz_khz.is_finite(), &format!("{p}.Azz_kHz"), "must be finite")?;
            check(finite_nonneg(s.amplitude), &format!("{p}.amplitude"), "must be finite and ≥ 0")?;
            check(positive(s.t_rf_s), &format!("{p}.T_rf_s"), "must be positive")?;
        }
        check(
            positive(e.match_tolerance_khz),
            "dynamics.endor.match_tolerance_kHz",
            "must be positive",
        )?;
        check(positive(e.max_azz_khz), "dynamics.endor.max_Azz_kHz", "must be positive")?;
        check(finite_nonneg(e.peak_min_height), "dynamics.endor.peak_min_height", "must be finite and ≥ 0")?;
        Ok(())
    }

    pub fn readout_params(&self) -> Result<ReadoutParams> {
        self.readout.params()
    }

    pub fn alt_params(&self) -> Result<AltReadoutParams> {
        Ok(AltReadoutParams {
            base: self.readout.params()?,
            n_pairs: self.alt.n_pairs,
        })
    }

    pub fn spin(&self) -> Result<&SpinSystemConfig> {
        self.spin_system
            .as_ref()
            .ok_or_else(|| cfg_err("spin_system", "block is required for this operation"))
    }

    pub fn endor_field(&self) -> Result<f64> {
        match (self.dynamics.endor.b_t, &self.spin_system) {
            (Some(b), _) => Ok(b),
            (None, Some(s)) => Ok(s.b_t),
            (None, None) => Err(cfg_err("dynamics.endor.B_T", "no field given here or in spin_system")),
        }
    }

    /// Every optional key populated, used as the key schema.
    fn schema() -> Self {
        let mut c: Self = serde_json::from_value(serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "readout": {"gamma_bright_Hz": 0.0, "gamma_dark_Hz": 0.0, "lambda_bright_per_rep": 0.02, "t_laser_s": 15e-6}
        }))
        .expect("schema skeleton parses");
        c.seed = Some(0);
        c.spin_system = Some(SpinSystemConfig {
            d_ground_mhz: 0.0,
            d_excited_mhz: 0.0,
            gamma_e_mhz_per_t: 0.0,
            gamma_n_mhz_per_t: 0.0,
            b_t: 0.0,
            hyperfine: HyperfineConfig::default(),
        });
        c.readout.t_rep_s = Some(17e-6);
        for (f_dark, f_bright, shots) in [
            (&mut c.dynamics.rabi.f_dark, &mut c.dynamics.rabi.f_bright, &mut c.dynamics.rabi.shots),
            (&mut c.dynamics.ramsey.f_dark, &mut c.dynamics.ramsey.f_bright, &mut c.dynamics.ramsey.shots),
        ] {
            *f_dark = Some(1.0);
            *f_bright = Some(1.0);
            *shots = Some(1.0);
        }
        c.dynamics.ramsey.beat_splitting_khz = Some(0.0);
        c.dynamics.endor.b_t = Some(0.0);
        c.dynamics.endor.bath = vec![BathSpin {
            species: Species::Si29,
            azz_khz: 0.0,
            amplitude: 0.0,
            t_rf_s: 1.0,
        }];
        c
    }
}

fn validate_contrast(block: &str, f_dark: Option<f64>, f_bright: Option<f64>, shots: Option<f64>) -> Result<()> {
    check(
        f_dark.is_some() == f_bright.is_some(),
        &format!("{block}.F_dark"),
        "F_dark and F_bright must be given together",
    )?;
    for (v, key) in [(f_dark, "F_dark"), (f_bright, "F_bright")] {
        if let Some(v) = v {
            check((0.0..=1.0).contains(&v), &format!("{block}.{key}"), "must lie in [0, 1]")?;
        }
    }
    if let Some(s) = shots {
        check(positive(s), &format!("{block}.shots"), "must be positive")?;
    }
    Ok(())
}

/// A loaded configuration with the defaults that were filled in.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    /// Dotted key path and value of every key absent from the input.
    pub applied_defaults: Vec<(String, Value)>,
}

const UNIT_SUFFIXES: &[&str] = &[
    "_MHz_per_T",
    "_per_rep",
    "_per_T",
    "_GHz",
    "_MHz",
    "_kHz",
    "_Hz",
    "_ms",
    "_us",
    "_ns",
    "_mT",
    "_T",
    "_s",
];

fn stem(key: &str) -> (&str, &str) {
    for suf in UNIT_SUFFIXES {
        if let Some(s) = key.strip_suffix(suf) {
            if !s.is_empty() {
                return (s, suf);
            }
        }
    }
    (key, "")
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

/// Rejects keys missing from the schema, naming unit mismatches.
fn check_keys(input: &Value, schema: &Value, path: &str) -> Result<()> {
    match (input, schema) {
        (Value::Object(inp), Value::Object(sch)) => {
            for (k, v) in inp {
                match sch.get(k) {
                    Some(s) => check_keys(v, s, &join(path, k))?,
                    None => {
                        let (st, suf) = stem(k);
                        if let Some(known) = sch.keys().find(|known| stem(known).0 == st) {
                            let found = if suf.is_empty() { "no unit suffix".into() } else { format!("unit `{suf}`") };
                            return Err(cfg_err(
                                &join(path, k),
                                format!("unit suffix mismatch: {found}, expected key `{known}`"),
                            ));
                        }
                        return Err(cfg_err(&join(path, k), "unknown key"));
                    }
                }
            }
            Ok(())
        }
        (Value::Array(inp), Value::Array(sch)) => {
            if let Some(s) = sch.first() {
                for (i, v) in inp.iter().enumerate() {
                    check_keys(v, s, &format!("{path}[{i}]"))?;
                }
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

fn collect_defaults(input: &Value, full: &Value, path: &str, out: &mut Vec<(String, Value)>) {
    if let (Value::Object(inp), Value::Object(f)) = (input, full) {
        for (k, v) in f {
            let p = join(path, k);
            match inp.get(k) {
                None => out.push((p, v.clone())),
                Some(iv) => collect_defaults(iv, v, &p, out),
            }
        }
    }
}

pub fn parse_config(text: &str) -> Result<LoadedConfig> {
    let input: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    check(input.is_object(), "", "configuration must be a JSON object")?;
    let schema = serde_json::to_value(ExperimentConfig::schema())?;
    check_keys(&input, &schema, "")?;
    let config: ExperimentConfig = serde_path_to_error::deserialize(&input).map_err(|e| {
        let path = e.path().to_string();
        cfg_err(if path == "." { "" } else { &path }, e.into_inner().to_string())
    })?;
    config.validate()?;
    let full = serde_json::to_value(&config)?;
    let mut applied_defaults = Vec::new();
    collect_defaults(&input, &full, "", &mut applied_defaults);
    Ok(LoadedConfig {
        config,
        applied_defaults,
    })
}

pub fn load_config(path: impl AsRef<Path>) -> Result<LoadedConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

pub fn to_json(config: &ExperimentConfig) -> Result<String> {
    Ok(serde_json::to_string_pretty(config)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MINIMAL: &str = r#"{
        "schema_version": 1,
        "readout": {"gamma_bright_Hz": 100, "gamma_dark_Hz": 8, "lambda_bright_per_rep": 0.02, "t_laser_s": 15e-6}
    }"#;

    fn with_readout_key(key: &str, value: Value) -> String {
        let mut v: Value = serde_json::from_str(MINIMAL).unwrap();
        v["readout"][key] = value;
        v.to_string()
    }

    fn config_path_of(e: Error) -> String {
        match e {
            Error::Config { path, .. } => path,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let loaded = parse_config(MINIMAL).unwrap();
        let c = &loaded.config;
        assert_eq!(c.readout.lambda_dark_per_rep, 0.001);
        assert_eq!(c.readout.gate_overhead_s, 2e-6);
        assert!((c.readout.t_rep().unwrap() - 17e-6).abs() < 1e-18);
        let keys: Vec<&str> = loaded.applied_defaults.iter().map(|(k, _)| k.as_str()).collect();
        assert!(keys.contains(&"readout.lambda_dark_per_rep"));
        assert!(keys.contains(&"readout.N"));
        assert!(keys.contains(&"alt"));
        assert!(!keys.contains(&"readout.gamma_bright_Hz"));
    }

    #[test]
    fn negative_rate_names_key() {
        let e = parse_config(&with_readout_key("gamma_bright_Hz", (-1.0).into())).unwrap_err();
        assert_eq!(config_path_of(e), "readout.gamma_bright_Hz");
    }

    #[test]
    fn unit_mismatch_is_named() {
        let mut v: Value = serde_json::from_str(MINIMAL).unwrap();
        let r = v["readout"].as_object_mut().unwrap();
        let g = r.remove("gamma_bright_Hz").unwrap();
        r.insert("gamma_bright_kHz".into(), g);
        let e = parse_config(&v.to_string()).unwrap_err();
        let msg = e.to_string();
        assert_eq!(config_path_of(e), "readout.gamma_bright_kHz");
        assert!(msg.contains("gamma_bright_Hz"), "{msg}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let e = parse_config(&with_readout_key("colour", "blue".into())).unwrap_err();
        assert_eq!(config_path_of(e), "readout.colour");
    }

    #[test]
    fn type_error_names_key() {
        let e = parse_config(&with_readout_key("N", "many".into())).unwrap_err();
        assert_eq!(config_path_of(e), "readout.N");
    }

    #[test]
    fn missing_required_key() {
        let mut v: Value = serde_json::from_str(MINIMAL).unwrap();
        v["readout"].as_object_mut().unwrap().remove("gamma_dark_Hz");
        assert!(matches!(parse_config(&v.to_string()), Err(Error::Config { .. })));
    }

    #[test]
    fn inconsistent_repetition_time() {
        let e = parse_config(&with_readout_key("t_rep_s", 30e-6.into())).unwrap_err();
        assert_eq!(config_path_of(e), "readout.t_rep_s");
    }

    #[test]
    fn bath_entries_are_checked() {
        let mut v: Value = serde_json::from_str(MINIMAL).unwrap();
        v["dynamics"] = serde_json::json!({"endor": {"bath": [{"species": "Si29", "Azz_MHz": 0.05, "amplitude": 0.2, "T_rf_s": 1e-4}]}});
        let e = parse_config(&v.to_string()).unwrap_err();
        assert_eq!(config_path_of(e), "dynamics.endor.bath[0].Azz_MHz");
    }

    #[test]
    fn schema_covers_every_key() {
        let schema = serde_json::to_value(ExperimentConfig::schema()).unwrap();
        let text = serde_json::to_string(&schema).unwrap();
        let back = parse_config(&text).unwrap();
        assert_eq!(back.config, ExperimentConfig::schema());
        assert!(back.applied_defaults.is_empty());
    }

    #[test]
    fn shipped_example_loads() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../cli/examples/calibration.json");
        let c = load_config(path).unwrap().config;
        let p = c.readout_params().unwrap();
        assert_eq!((p.gamma_bright_hz, p.gamma_dark_hz, p.lambda_bright), (100.0, 8.0, 0.02));
        assert_eq!(c.readout.t_laser_s, Some(15e-6));
    }

    proptest! {
        #[test]
        fn round_trip_is_fixed_point(
            g1 in 0.0..1e3f64,
            g0 in 0.0..1e3f64,
            ld in 0.0..0.01f64,
            extra in 0.0..0.1f64,
            n in 1usize..5000,
            seed in proptest::option::of(any::<u64>()),
        ) {
            let mut v: Value = serde_json::from_str(MINIMAL).unwrap();
            v["readout"]["gamma_bright_Hz"] = g1.into();
            v["readout"]["gamma_dark_Hz"] = g0.into();
            v["readout"]["lambda_dark_per_rep"] = ld.into();
            v["readout"]["lambda_bright_per_rep"] = (ld + extra).into();
            v["readout"]["N"] = n.into();
            if let Some(s) = seed {
                v["seed"] = s.into();
            }
            let first = parse_config(&v.to_string()).unwrap().config;
            let second = parse_config(&to_json(&first).unwrap()).unwrap();
            prop_assert_eq!(&first, &second.config);
            prop_assert!(second.applied_defaults.is_empty());
        }
    }
}
