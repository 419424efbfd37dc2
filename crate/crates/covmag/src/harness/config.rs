//! Experiment configuration: schema, parsing and cross-validation.
//!
//! A single TOML file fully determines a run; the resolved form echoes every
//! default so the file plus the binary version are a complete provenance
//! record.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{NoiseKind, NoiseSourceSpec, PhaseNoiseModel, TimeGrid};
use crate::measurement::{DriftSpec, FailureSpec, ReadoutChannel};
use crate::sequence::{
    build_sequence, GyromagneticConstants, InitParity, SequenceKind, SequenceSpec,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Reserved user-level seed streams for the auto-generated dephasing tones
/// of `[coherence] targets`.
pub const COHERENCE_STREAM_1: u64 = 0xC0DE_0001;
pub const COHERENCE_STREAM_2: u64 = 0xC0DE_0002;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceConfig {
    pub kind: SequenceKind,
    pub tau: f64,
    pub n_pulses: u32,
    #[serde(default)]
    pub t_delay: f64,
    #[serde(default)]
    pub init_parity: InitParity,
    #[serde(default = "default_transition_sign")]
    pub transition_sign: i8,
}

fn default_transition_sign() -> i8 {
    1
}

impl SequenceConfig {
    pub fn build(&self) -> Result<SequenceSpec> {
        build_sequence(
            self.kind,
            self.tau,
            self.n_pulses,
            self.t_delay,
            self.init_parity,
            self.transition_sign,
        )
    }
}

/// Partial override of the shared `[sequence]` block for sensor 2.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceOverride {
    pub kind: Option<SequenceKind>,
    pub tau: Option<f64>,
    pub n_pulses: Option<u32>,
    pub t_delay: Option<f64>,
    pub init_parity: Option<InitParity>,
    pub transition_sign: Option<i8>,
}

impl SequenceOverride {
    fn apply(&self, base: &SequenceConfig) -> SequenceConfig {
        SequenceConfig {
            kind: self.kind.unwrap_or(base.kind),
            tau: self.tau.unwrap_or(base.tau),
            n_pulses: self.n_pulses.unwrap_or(base.n_pulses),
            t_delay: self.t_delay.unwrap_or(base.t_delay),
            init_parity: self.init_parity.unwrap_or(base.init_parity),
            transition_sign: self.transition_sign.unwrap_or(base.transition_sign),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourcesConfig {
    #[serde(default = "default_common")]
    pub common: NoiseSourceSpec,
    #[serde(default = "default_local1")]
    pub local1: NoiseSourceSpec,
    #[serde(default = "default_local2")]
    pub local2: NoiseSourceSpec,
}

fn default_common() -> NoiseSourceSpec {
    NoiseSourceSpec::silence(1)
}
fn default_local1() -> NoiseSourceSpec {
    NoiseSourceSpec::silence(2)
}
fn default_local2() -> NoiseSourceSpec {
    NoiseSourceSpec::silence(3)
}

impl Default for SourcesConfig {
    fn default() -> Self {
        Self {
            common: default_common(),
            local1: default_local1(),
            local2: default_local2(),
        }
    }
}

/// Auto-generated local dephasing: a resonant random-phase tone per sensor
/// with amplitude calibrated so the single-sensor coherence factor hits the
/// target exactly (`<cos phi_L> = J0(a) = C`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoherenceTargets {
    pub targets: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetrendMode {
    /// On for photon-counting channels, off for threshold channels.
    Auto,
    On,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    #[serde(default = "default_detrend_mode")]
    pub detrend: DetrendMode,
    #[serde(default = "default_block_size")]
    pub block_size: usize,
    /// Lag profile up to this lag; 0 disables it.
    #[serde(default)]
    pub max_lag: usize,
    /// Also report the order-2 joint cumulant (a cross-check on r).
    #[serde(default)]
    pub cumulants: bool,
}

fn default_detrend_mode() -> DetrendMode {
    DetrendMode::Auto
}
fn default_block_size() -> usize {
    1000
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            detrend: default_detrend_mode(),
            block_size: default_block_size(),
            max_lag: 0,
            cumulants: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Tau,
    TDelay,
    B0,
    Frequency,
    SigmaR,
    NShots,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

/// Sample grid for sources that need a full time trace (phase-diffused
/// tones). Tone and broadband sources use exact analytic integration and
/// ignore it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub n_shots: u64,
    pub master_seed: u64,
    /// Added to the sequence duration for shot timestamps.
    #[serde(default)]
    pub t_readout: f64,
    #[serde(default)]
    pub sources: SourcesConfig,
    #[serde(default = "default_couplings")]
    pub couplings: [f64; 2],
    pub sequence: SequenceConfig,
    #[serde(default)]
    pub sequence2: Option<SequenceOverride>,
    pub channel1: ReadoutChannel,
    pub channel2: ReadoutChannel,
    #[serde(default)]
    pub readout_failure: Option<FailureSpec>,
    #[serde(default)]
    pub drift: Option<DriftSpec>,
    #[serde(default)]
    pub coherence: Option<CoherenceTargets>,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub grid: Option<GridConfig>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
}

fn default_couplings() -> [f64; 2] {
    [1.0, 1.0]
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn sequence_pair(&self) -> Result<(SequenceSpec, SequenceSpec)> {
        let seq1 = self.sequence.build()?;
        let cfg2 = match &self.sequence2 {
            Some(ov) => ov.apply(&self.sequence),
            None => self.sequence.clone(),
        };
        Ok((seq1, cfg2.build()?))
    }

    /// True when any active source needs sampled traces instead of the
    /// analytic per-shot path.
    pub fn needs_trace(&self) -> bool {
        [
            &self.sources.common,
            &self.sources.local1,
            &self.sources.local2,
        ]
        .iter()
        .any(|s| source_needs_trace(s))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.n_shots < 4 {
            return Err(Error::Config(format!(
                "n_shots must be >= 4, got {}",
                self.n_shots
            )));
        }
        if self.t_readout < 0.0 || !self.t_readout.is_finite() {
            return Err(Error::Config(format!(
                "t_readout must be finite and >= 0, got {}",
                self.t_readout
            )));
        }
        for c in self.couplings {
            if !c.is_finite() {
                return Err(Error::Config(format!("coupling {c} is not finite")));
            }
        }
        let (seq1, seq2) = self.sequence_pair()?;
        for s in [
            &self.sources.common,
            &self.sources.local1,
            &self.sources.local2,
        ] {
            s.validate()?;
        }
        crate::field::check_seed_streams(
            &self.sources.common,
            &self.sources.local1,
            &self.sources.local2,
        )?;
        self.channel1.validate()?;
        self.channel2.validate()?;
        if let Some(f) = &self.readout_failure {
            if !(0.0..=1.0).contains(&f.p_fail) || f.background < 0.0 {
                return Err(Error::Config(
                    "readout_failure needs p_fail in [0, 1] and background >= 0".into(),
                ));
            }
        }
        if let Some(d) = &self.drift {
            d.validate()?;
            if d.enabled {
                for ch in [&self.channel1, &self.channel2] {
                    if !matches!(ch, ReadoutChannel::PhotonCount { .. }) {
                        return Err(Error::DriftNeedsPhotonCount);
                    }
                }
            }
        }
        if let Some(c) = &self.coherence {
            for t in c.targets {
                if !(t > 0.0 && t <= 1.0) {
                    return Err(Error::Config(format!(
                        "coherence targets must be in (0, 1], got {t}"
                    )));
                }
            }
            for s in [&self.sources.local1, &self.sources.local2] {
                if !s.is_silent() {
                    return Err(Error::Config(
                        "coherence targets replace the local sources; configure one or the other"
                            .into(),
                    ));
                }
            }
            for s in [
                &self.sources.common,
                &self.sources.local1,
                &self.sources.local2,
            ] {
                if s.seed_stream == COHERENCE_STREAM_1 || s.seed_stream == COHERENCE_STREAM_2 {
                    return Err(Error::Config(format!(
                        "seed stream {:#x} is reserved for coherence targets",
                        s.seed_stream
                    )));
                }
            }
        }
        if self.estimator.block_size < 2 {
            return Err(Error::Config(format!(
                "estimator block_size must be >= 2, got {}",
                self.estimator.block_size
            )));
        }
        if self.estimator.max_lag > 0 && self.estimator.max_lag as u64 >= self.n_shots / 10 {
            return Err(Error::Config(format!(
                "max_lag {} must stay below n_shots/10",
                self.estimator.max_lag
            )));
        }
        if self.needs_trace() {
            let grid = self.grid.ok_or_else(|| {
                Error::Config(
                    "a phase-diffused source needs a [grid] block with the sample step dt".into(),
                )
            })?;
            if !(grid.dt > 0.0) || !grid.dt.is_finite() {
                return Err(Error::Config(format!(
                    "grid dt must be positive, got {}",
                    grid.dt
                )));
            }
            // the grid must cover both sequence windows at every sweep value
            let end = seq1.window().1.max(seq2.window().1);
            let n = (end / grid.dt).ceil() as usize + 2;
            let g = TimeGrid::new(0.0, grid.dt, n)?;
            // sampling-rate check against every non-silent source
            for s in [
                &self.sources.common,
                &self.sources.local1,
                &self.sources.local2,
            ] {
                if !s.is_silent() {
                    // synthesizing shot 0 runs the internal coarse-grid check
                    crate::field::synth_trace(s, 0, &g)?;
                }
            }
        }
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return Err(Error::Config("sweep needs at least one value".into()));
            }
            for &v in &sweep.values {
                if !v.is_finite() {
                    return Err(Error::Config("sweep values must be finite".into()));
                }
                match sweep.axis {
                    SweepAxis::Tau | SweepAxis::Frequency => {
                        if v <= 0.0 {
                            return Err(Error::Config(format!(
                                "sweep value {v} must be positive for this axis"
                            )));
                        }
                    }
                    SweepAxis::TDelay | SweepAxis::B0 => {
                        if v < 0.0 {
                            return Err(Error::Config(format!(
                                "sweep value {v} must be >= 0 for this axis"
                            )));
                        }
                    }
                    SweepAxis::SigmaR => {
                        if v < 1.0 {
                            return Err(Error::Config(format!(
                                "sigma_R sweep values must be >= 1, got {v}"
                            )));
                        }
                    }
                    SweepAxis::NShots => {
                        if v < 4.0 || v.fract() != 0.0 {
                            return Err(Error::Config(format!(
                                "n_shots sweep values must be integers >= 4, got {v}"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Applies one sweep-axis value, returning the modified point config
    /// (without the sweep block).
    pub fn at_axis_value(&self, axis: SweepAxis, value: f64) -> Result<ExperimentConfig> {
        let mut cfg = self.clone();
        cfg.sweep = None;
        match axis {
            SweepAxis::Tau => {
                cfg.sequence.tau = value;
                if let Some(ov) = &mut cfg.sequence2 {
                    if ov.tau.is_some() {
                        ov.tau = Some(value);
                    }
                }
            }
            // relative delay between the two sensors' sequences
            SweepAxis::TDelay => {
                let ov = cfg.sequence2.get_or_insert_with(SequenceOverride::default);
                ov.t_delay = Some(value);
            }
            SweepAxis::B0 => cfg.sources.common.amplitude_b0 = value,
            SweepAxis::Frequency => cfg.sources.common.carrier_f0 = value,
            SweepAxis::SigmaR => {
                let ch = channel_for_sigma_r(value)?;
                cfg.channel1 = ch;
                cfg.channel2 = ch;
            }
            SweepAxis::NShots => cfg.n_shots = value as u64,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A photon-counting channel realizing a requested readout noise figure
/// (dark state `alpha1 = 0`); `sigma_R = 1` maps to a perfect threshold.
pub fn channel_for_sigma_r(sigma_r: f64) -> Result<ReadoutChannel> {
    if sigma_r < 1.0 || !sigma_r.is_finite() {
        return Err(Error::Config(format!(
            "sigma_R must be >= 1, got {sigma_r}"
        )));
    }
    if (sigma_r - 1.0).abs() < 1e-12 {
        return Ok(ReadoutChannel::Threshold {
            p1_given_0: 0.0,
            p1_given_1: 1.0,
        });
    }
    Ok(ReadoutChannel::PhotonCount {
        alpha0: 2.0 / (sigma_r * sigma_r - 1.0),
        alpha1: 0.0,
    })
}

pub fn source_needs_trace(spec: &NoiseSourceSpec) -> bool {
    !spec.is_silent()
        && spec.kind == NoiseKind::RandomPhaseAc
        && spec.phase_noise == PhaseNoiseModel::Diffusion
        && spec.phase_bandwidth > 0.0
}

/// Shared physical constants; fixed, not configurable.
pub fn constants() -> GyromagneticConstants {
    GyromagneticConstants::default()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = r#"
schema_version = 1
n_shots = 1000
master_seed = 7

[sequence]
kind = "xy8"
tau = 250e-9
n_pulses = 32

[channel1]
mode = "threshold"
p1_given_0 = 0.0
p1_given_1 = 1.0

[channel2]
mode = "threshold"
p1_given_0 = 0.0
p1_given_1 = 1.0
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.couplings, [1.0, 1.0]);
        assert!(cfg.sources.common.is_silent());
        let (s1, s2) = cfg.sequence_pair().unwrap();
        assert_eq!(s1, s2);
        // round trip through the echo form
        let echo = cfg.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&echo).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("master_seed = 7", "master_seed = 7\nbogus_key = 1");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn xy8_multiple_of_eight_enforced_through_config() {
        let text = MINIMAL.replace("n_pulses = 32", "n_pulses = 20");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn duplicate_streams_rejected() {
        let text = format!(
            "{MINIMAL}
[sources.common]
kind = \"coherent_ac\"
amplitude_b0 = 1e-6
carrier_f0 = 2e6
seed_stream = 5

[sources.local1]
kind = \"coherent_ac\"
amplitude_b0 = 1e-6
carrier_f0 = 1e6
seed_stream = 5
"
        );
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert!(matches!(err, Error::DuplicateSeedStream(_)), "{err}");
    }

    #[test]
    fn diffused_source_requires_grid() {
        let text = format!(
            "{MINIMAL}
[sources.common]
kind = \"random_phase_ac\"
amplitude_b0 = 13e-6
carrier_f0 = 2e6
phase_bandwidth = 1e6
seed_stream = 5
"
        );
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("grid"), "{err}");
        let with_grid = format!("{text}\n[grid]\ndt = 5e-9\n");
        ExperimentConfig::from_toml_str(&with_grid).unwrap();
        // too coarse
        let coarse = format!("{text}\n[grid]\ndt = 5e-8\n");
        assert!(ExperimentConfig::from_toml_str(&coarse).is_err());
    }

    #[test]
    fn sigma_r_channels_hit_their_figure() {
        for target in [1.0, 2.0, 4.0, 8.0] {
            let ch = channel_for_sigma_r(target).unwrap();
            let got = ch.readout_noise().unwrap();
            assert!((got - target).abs() < 1e-9, "{target} -> {got}");
        }
    }

    #[test]
    fn sweep_axis_application() {
        let text = format!(
            "{MINIMAL}
[sweep]
axis = \"tau\"
values = [200e-9, 250e-9]
"
        );
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let point = cfg.at_axis_value(SweepAxis::Tau, 200e-9).unwrap();
        assert_eq!(point.sequence.tau, 200e-9);
        assert!(point.sweep.is_none());
        let delayed = cfg.at_axis_value(SweepAxis::TDelay, 80e-9).unwrap();
        let (s1, s2) = delayed.sequence_pair().unwrap();
        assert_eq!(s1.t_delay, 0.0);
        assert_eq!(s2.t_delay, 80e-9);
    }
}
