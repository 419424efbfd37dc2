//! Reproducible synthesis of per-shot magnetic field traces.
//!
//! Each source is a pure function of `(seed_stream, shot_index, grid)`:
//! repeated synthesis of the same shot returns a bit-identical trace no
//! matter which thread asks for it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::shot_rng;
use crate::theory::{SpectralConvention, Spectrum};

pub const TWO_PI: f64 = std::f64::consts::TAU;

/// Uniform sampling grid for field traces. Samples sit at
/// `t_start + (k + 1/2) dt`, the midpoint convention used by the
/// trapezoid/midpoint phase integral.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t_start: f64,
    pub dt: f64,
    pub n_samples: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, dt: f64, n_samples: usize) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidGrid(format!("dt must be positive, got {dt}")));
        }
        if n_samples < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least 2 samples, got {n_samples}"
            )));
        }
        if !t_start.is_finite() {
            return Err(Error::InvalidGrid("t_start must be finite".into()));
        }
        Ok(Self {
            t_start,
            dt,
            n_samples,
        })
    }

    pub fn t_end(&self) -> f64 {
        self.t_start + self.dt * self.n_samples as f64
    }

    /// Midpoint time of sample `k`.
    pub fn sample_time(&self, k: usize) -> f64 {
        self.t_start + (k as f64 + 0.5) * self.dt
    }

    pub fn covers(&self, start: f64, end: f64) -> bool {
        // Half-sample slack: the midpoint integral treats sample k as owning
        // [t_start + k dt, t_start + (k+1) dt].
        self.t_start <= start + 1e-15 && self.t_end() >= end - 1e-15
    }
}

/// How a phase-broadened carrier is realized.
///
/// `Diffusion` applies a Wiener phase walk within each shot, producing a
/// Lorentzian line of the requested FWHM (homogeneous broadening).
/// `ShotDetuning` freezes the carrier within a shot and draws a per-shot
/// frequency offset from a truncated Cauchy distribution of the same FWHM
/// (inhomogeneous broadening). The two have identical line shapes and
/// identical shot-to-shot coherence decay, but differ in intra-shot
/// statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseNoiseModel {
    #[default]
    Diffusion,
    ShotDetuning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    RandomPhaseAc,
    GaussianBroadband,
    CoherentAc,
    Silence,
}

/// Description of one field source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSourceSpec {
    pub kind: NoiseKind,
    /// Carrier amplitude in tesla (AC kinds).
    #[serde(default)]
    pub amplitude_b0: f64,
    /// Carrier frequency in Hz (AC kinds).
    #[serde(default)]
    pub carrier_f0: f64,
    /// FWHM of the phase-noise-broadened line, Hz.
    #[serde(default)]
    pub phase_bandwidth: f64,
    /// One-sided PSD level in tesla^2/Hz (broadband kind).
    #[serde(default)]
    pub psd_level: f64,
    /// Upper band edge in Hz (broadband kind).
    #[serde(default)]
    pub band_limit: f64,
    pub seed_stream: u64,
    #[serde(default)]
    pub phase_noise: PhaseNoiseModel,
    /// Number of tones in the sum-of-sinusoids broadband synthesis.
    #[serde(default = "default_n_tones")]
    pub n_tones: usize,
}

fn default_n_tones() -> usize {
    64
}

impl NoiseSourceSpec {
    pub fn silence(seed_stream: u64) -> Self {
        Self {
            kind: NoiseKind::Silence,
            amplitude_b0: 0.0,
            carrier_f0: 0.0,
            phase_bandwidth: 0.0,
            psd_level: 0.0,
            band_limit: 0.0,
            seed_stream,
            phase_noise: PhaseNoiseModel::Diffusion,
            n_tones: default_n_tones(),
        }
    }

    pub fn coherent_ac(amplitude_b0: f64, carrier_f0: f64, seed_stream: u64) -> Self {
        Self {
            kind: NoiseKind::CoherentAc,
            amplitude_b0,
            carrier_f0,
            ..Self::silence(seed_stream)
        }
    }

    pub fn random_phase_ac(
        amplitude_b0: f64,
        carrier_f0: f64,
        phase_bandwidth: f64,
        seed_stream: u64,
    ) -> Self {
        Self {
            kind: NoiseKind::RandomPhaseAc,
            amplitude_b0,
            carrier_f0,
            phase_bandwidth,
            ..Self::silence(seed_stream)
        }
    }

    pub fn broadband(psd_level: f64, band_limit: f64, seed_stream: u64) -> Self {
        Self {
            kind: NoiseKind::GaussianBroadband,
            psd_level,
            band_limit,
            ..Self::silence(seed_stream)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let reject = |reason: String| {
            Err(Error::InvalidSource {
                source_id: format!("stream {}", self.seed_stream),
                reason,
            })
        };
        for (name, v) in [
            ("amplitude_b0", self.amplitude_b0),
            ("carrier_f0", self.carrier_f0),
            ("phase_bandwidth", self.phase_bandwidth),
            ("psd_level", self.psd_level),
            ("band_limit", self.band_limit),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return reject(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        match self.kind {
            NoiseKind::GaussianBroadband => {
                if self.psd_level > 0.0 && self.band_limit <= 0.0 {
                    return reject("broadband source needs band_limit > 0".into());
                }
                if self.n_tones < 64 {
                    return reject(format!("need at least 64 tones, got {}", self.n_tones));
                }
            }
            NoiseKind::RandomPhaseAc | NoiseKind::CoherentAc => {
                if self.amplitude_b0 > 0.0 && self.carrier_f0 <= 0.0 {
                    return reject("AC source needs carrier_f0 > 0".into());
                }
            }
            NoiseKind::Silence => {}
        }
        Ok(())
    }

    pub fn is_silent(&self) -> bool {
        match self.kind {
            NoiseKind::Silence => true,
            NoiseKind::GaussianBroadband => self.psd_level == 0.0,
            _ => self.amplitude_b0 == 0.0,
        }
    }

    /// Highest frequency content, used for the sampling-rate check.
    pub fn max_frequency(&self) -> f64 {
        match self.kind {
            NoiseKind::Silence => 0.0,
            NoiseKind::GaussianBroadband => self.band_limit,
            NoiseKind::CoherentAc => self.carrier_f0,
            NoiseKind::RandomPhaseAc => self.carrier_f0 + self.detuning_half_width(),
        }
    }

    /// Truncation half-width of the `ShotDetuning` Cauchy draw. Also bounds
    /// the effective spectral support used for the sampling check.
    pub fn detuning_half_width(&self) -> f64 {
        if self.phase_bandwidth == 0.0 {
            return 0.0;
        }
        (3.0 * self.phase_bandwidth).min(0.95 * self.carrier_f0)
    }

    fn check_sampling(&self, grid: &TimeGrid) -> Result<()> {
        let f_max = self.max_frequency();
        if f_max <= 0.0 {
            return Ok(());
        }
        let limit = 1.0 / (20.0 * f_max);
        if grid.dt > limit {
            return Err(Error::GridTooCoarse {
                dt: grid.dt,
                limit,
                f_max,
            });
        }
        Ok(())
    }
}

/// One realization of a source on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldTrace {
    pub grid: TimeGrid,
    pub samples: Vec<f64>,
    pub source_id: u64,
}

impl FieldTrace {
    fn check_finite(self) -> Result<Self> {
        if self.samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidSource {
                source_id: format!("stream {}", self.source_id),
                reason: "non-finite sample in synthesized trace".into(),
            });
        }
        Ok(self)
    }
}

/// Common + local field pair for the two sensor locations.
#[derive(Debug, Clone)]
pub struct TwoPointField {
    pub common: FieldTrace,
    pub local1: FieldTrace,
    pub local2: FieldTrace,
    pub coupling1: f64,
    pub coupling2: f64,
}

impl TwoPointField {
    /// Field seen by sensor 1 or 2: `coupling_i * common + local_i`.
    pub fn sensor_field(&self, sensor: u8) -> FieldTrace {
        let (coupling, local) = match sensor {
            1 => (self.coupling1, &self.local1),
            2 => (self.coupling2, &self.local2),
            _ => panic!("sensor must be 1 or 2"),
        };
        let samples = self
            .common
            .samples
            .iter()
            .zip(&local.samples)
            .map(|(c, l)| coupling * c + l)
            .collect();
        FieldTrace {
            grid: self.common.grid,
            samples,
            source_id: local.source_id,
        }
    }
}

/// Single-shot tone realization: `B(t) = amplitude * cos(2 pi f t + psi0)`.
/// Available for sources that stay a pure tone within one shot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToneShot {
    pub amplitude: f64,
    pub frequency: f64,
    pub psi0: f64,
}

/// Per-shot tone parameters for `CoherentAc` and for `RandomPhaseAc` under
/// the `ShotDetuning` model. Draws for a given shot match [`synth_trace`]
/// exactly; returns `None` for kinds that are not a single tone per shot.
pub fn tone_realization(spec: &NoiseSourceSpec, shot_index: u64) -> Option<ToneShot> {
    match spec.kind {
        NoiseKind::CoherentAc => Some(ToneShot {
            amplitude: spec.amplitude_b0,
            frequency: spec.carrier_f0,
            psi0: 0.0,
        }),
        NoiseKind::RandomPhaseAc => {
            let mut rng = shot_rng(spec.seed_stream, shot_index);
            let psi0: f64 = rng.random::<f64>() * TWO_PI;
            match spec.phase_noise {
                PhaseNoiseModel::ShotDetuning => {
                    let df = sample_detuning(spec, &mut rng);
                    Some(ToneShot {
                        amplitude: spec.amplitude_b0,
                        frequency: spec.carrier_f0 + df,
                        psi0,
                    })
                }
                PhaseNoiseModel::Diffusion if spec.phase_bandwidth == 0.0 => Some(ToneShot {
                    amplitude: spec.amplitude_b0,
                    frequency: spec.carrier_f0,
                    psi0,
                }),
                PhaseNoiseModel::Diffusion => None,
            }
        }
        _ => None,
    }
}

fn sample_detuning<R: Rng>(spec: &NoiseSourceSpec, rng: &mut R) -> f64 {
    if spec.phase_bandwidth == 0.0 {
        return 0.0;
    }
    let hwhm = spec.phase_bandwidth / 2.0;
    let half_width = spec.detuning_half_width();
    let u_max = (half_width / hwhm).atan();
    let u = (2.0 * rng.random::<f64>() - 1.0) * u_max;
    hwhm * u.tan()
}

/// Fixed tone table of a broadband source: frequencies at band midpoints,
/// amplitudes chosen so the one-sided PSD is flat at `psd_level` up to
/// `band_limit` (total variance `psd_level * band_limit`).
pub fn broadband_tones(spec: &NoiseSourceSpec) -> Vec<(f64, f64)> {
    if spec.is_silent() {
        return Vec::new();
    }
    let m = spec.n_tones;
    let df = spec.band_limit / m as f64;
    let amp = (2.0 * spec.psd_level * df).sqrt();
    (0..m)
        .map(|j| ((j as f64 + 0.5) * df, amp))
        .collect()
}

/// Per-shot tone phases of a broadband source, matching [`synth_trace`].
pub fn broadband_phases(spec: &NoiseSourceSpec, shot_index: u64) -> Vec<f64> {
    let mut rng = shot_rng(spec.seed_stream, shot_index);
    (0..spec.n_tones)
        .map(|_| rng.random::<f64>() * TWO_PI)
        .collect()
}

/// Synthesizes the field trace of one source for one shot.
pub fn synth_trace(spec: &NoiseSourceSpec, shot_index: u64, grid: &TimeGrid) -> Result<FieldTrace> {
    spec.validate()?;
    if spec.is_silent() {
        return Ok(FieldTrace {
            grid: *grid,
            samples: vec![0.0; grid.n_samples],
            source_id: spec.seed_stream,
        });
    }
    spec.check_sampling(grid)?;

    let samples = match spec.kind {
        NoiseKind::Silence => unreachable!(),
        NoiseKind::CoherentAc => tone_samples(spec.amplitude_b0, spec.carrier_f0, 0.0, grid),
        NoiseKind::RandomPhaseAc => match spec.phase_noise {
            PhaseNoiseModel::ShotDetuning => {
                let tone = tone_realization(spec, shot_index).expect("shot-detuning tone");
                tone_samples(tone.amplitude, tone.frequency, tone.psi0, grid)
            }
            PhaseNoiseModel::Diffusion => diffusion_samples(spec, shot_index, grid),
        },
        NoiseKind::GaussianBroadband => {
            let tones = broadband_tones(spec);
            let phases = broadband_phases(spec, shot_index);
            let mut out = vec![0.0; grid.n_samples];
            for ((f, a), theta) in tones.iter().zip(&phases) {
                for (k, s) in out.iter_mut().enumerate() {
                    *s += a * (TWO_PI * f * grid.sample_time(k) + theta).cos();
                }
            }
            out
        }
    };

    FieldTrace {
        grid: *grid,
        samples,
        source_id: spec.seed_stream,
    }
    .check_finite()
}

fn tone_samples(b0: f64, f0: f64, psi0: f64, grid: &TimeGrid) -> Vec<f64> {
    (0..grid.n_samples)
        .map(|k| b0 * (TWO_PI * f0 * grid.sample_time(k) + psi0).cos())
        .collect()
}

/// Wiener phase walk: increments with variance `2 D dt`, `D = pi * FWHM`,
/// so the tone autocorrelation decays as `exp(-D |t|)` and the line is
/// Lorentzian with the requested FWHM.
fn diffusion_samples(spec: &NoiseSourceSpec, shot_index: u64, grid: &TimeGrid) -> Vec<f64> {
    let mut rng = shot_rng(spec.seed_stream, shot_index);
    let mut psi: f64 = rng.random::<f64>() * TWO_PI;
    let diffusion = std::f64::consts::PI * spec.phase_bandwidth;
    let step_sigma = (2.0 * diffusion * grid.dt).sqrt();
    let normal = rand_distr::StandardNormal;
    (0..grid.n_samples)
        .map(|k| {
            let sample =
                spec.amplitude_b0 * (TWO_PI * spec.carrier_f0 * grid.sample_time(k) + psi).cos();
            let z: f64 = rng.sample(normal);
            psi += step_sigma * z;
            sample
        })
        .collect()
}

/// Draws the common and both local sources for one shot.
pub fn compose_two_point(
    common: &NoiseSourceSpec,
    local1: &NoiseSourceSpec,
    local2: &NoiseSourceSpec,
    couplings: (f64, f64),
    shot_index: u64,
    grid: &TimeGrid,
) -> Result<TwoPointField> {
    check_seed_streams(common, local1, local2)?;
    Ok(TwoPointField {
        common: synth_trace(common, shot_index, grid)?,
        local1: synth_trace(local1, shot_index, grid)?,
        local2: synth_trace(local2, shot_index, grid)?,
        coupling1: couplings.0,
        coupling2: couplings.1,
    })
}

pub fn check_seed_streams(
    common: &NoiseSourceSpec,
    local1: &NoiseSourceSpec,
    local2: &NoiseSourceSpec,
) -> Result<()> {
    let pairs = [
        ("common", common, "local1", local1),
        ("common", common, "local2", local2),
        ("local1", local1, "local2", local2),
    ];
    for (na, a, nb, b) in pairs {
        if a.seed_stream == b.seed_stream && !a.is_silent() && !b.is_silent() {
            return Err(Error::DuplicateSeedStream(format!(
                "{na} and {nb} both use seed stream {}",
                a.seed_stream
            )));
        }
    }
    Ok(())
}

/// One-sided periodogram averaged over traces, in tesla^2/Hz. Serves as the
/// synthesis-validation oracle: for a flat broadband source the result is
/// flat at `psd_level`; integrated over frequency it recovers the sample
/// variance.
pub fn empirical_psd(traces: &[FieldTrace]) -> Result<Spectrum> {
    if traces.len() < 100 {
        return Err(Error::EstimatorInput(format!(
            "need at least 100 traces for a PSD estimate, got {}",
            traces.len()
        )));
    }
    let grid = traces[0].grid;
    if traces.iter().any(|t| t.grid != grid) {
        return Err(Error::EstimatorInput("traces on mismatched grids".into()));
    }
    let n = grid.n_samples;
    let mut planner = rustfft::FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let n_bins = n / 2 + 1;
    let mut acc = vec![0.0f64; n_bins];
    let mut buf = vec![rustfft::num_complex::Complex::default(); n];
    for trace in traces {
        for (b, &s) in buf.iter_mut().zip(&trace.samples) {
            *b = rustfft::num_complex::Complex::new(s, 0.0);
        }
        fft.process(&mut buf);
        for (k, a) in acc.iter_mut().enumerate() {
            let p = buf[k].norm_sqr() * grid.dt / n as f64;
            // fold the negative-frequency half into interior bins
            let one_sided = if k == 0 || (n % 2 == 0 && k == n / 2) {
                p
            } else {
                2.0 * p
            };
            *a += one_sided;
        }
    }
    let scale = 1.0 / traces.len() as f64;
    let df = 1.0 / (n as f64 * grid.dt);
    Ok(Spectrum {
        frequencies: (0..n_bins).map(|k| k as f64 * df).collect(),
        values: acc.iter().map(|a| a * scale).collect(),
        convention: SpectralConvention::OneSidedPerHz,
    })
}
