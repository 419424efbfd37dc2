//! Quantum projection and noisy readout.
//!
//! Phases become spins through the projection probability
//! `P(1) = sin^2(phi/2 + pi/4)`; spins become raw signals through a
//! photon-counting or thresholded channel. The readout noise figure
//! `sigma_R` of each channel is what degrades the detected correlation.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::TWO_PI;
use crate::rng::{derive_stream, shot_rng, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReadoutChannel {
    /// Poisson photon statistics with state-dependent means.
    PhotonCount { alpha0: f64, alpha1: f64 },
    /// Direct (possibly asymmetric) spin-state assignment.
    Threshold { p1_given_0: f64, p1_given_1: f64 },
}

impl ReadoutChannel {
    /// Symmetric threshold channel with fidelity `F` on both states.
    pub fn symmetric_threshold(fidelity: f64) -> Self {
        ReadoutChannel::Threshold {
            p1_given_0: 1.0 - fidelity,
            p1_given_1: fidelity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ReadoutChannel::PhotonCount { alpha0, alpha1 } => {
                if alpha0 < 0.0 || alpha1 < 0.0 || !alpha0.is_finite() || !alpha1.is_finite() {
                    return Err(Error::InvalidChannel(format!(
                        "photon means must be finite and >= 0, got ({alpha0}, {alpha1})"
                    )));
                }
                if alpha0 == alpha1 {
                    return Err(Error::ZeroContrast(format!(
                        "photon-count channel with alpha0 = alpha1 = {alpha0} carries no signal"
                    )));
                }
            }
            ReadoutChannel::Threshold {
                p1_given_0,
                p1_given_1,
            } => {
                for (label, p) in [("p1_given_0", p1_given_0), ("p1_given_1", p1_given_1)] {
                    if !(0.0..=1.0).contains(&p) {
                        return Err(Error::InvalidChannel(format!(
                            "{label} must be in [0, 1], got {p}"
                        )));
                    }
                }
                if p1_given_0 == p1_given_1 {
                    return Err(Error::ZeroContrast(format!(
                        "threshold channel with P(1|0) = P(1|1) = {p1_given_0} carries no signal"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Readout noise figure `sigma_R >= 1`.
    ///
    /// Photon counting: `sqrt(1 + 2 (a0 + a1)/(a0 - a1)^2)`.
    /// Thresholding: `sqrt(1 + 2 [p(1-p) + q(1-q)] / (p - q)^2)` with
    /// `p = P(1|0)`, `q = P(1|1)`; for symmetric fidelity this reduces to
    /// `1/(2F - 1)`.
    pub fn readout_noise(&self) -> Result<f64> {
        self.validate()?;
        Ok(match *self {
            ReadoutChannel::PhotonCount { alpha0, alpha1 } => {
                let contrast = alpha0 - alpha1;
                (1.0 + 2.0 * (alpha0 + alpha1) / (contrast * contrast)).sqrt()
            }
            ReadoutChannel::Threshold {
                p1_given_0: p,
                p1_given_1: q,
            } => {
                let contrast = p - q;
                (1.0 + 2.0 * (p * (1.0 - p) + q * (1.0 - q)) / (contrast * contrast)).sqrt()
            }
        })
    }
}

/// Probability of reading spin 1 after a final pi/2 pulse of the given
/// phase: `sin^2(phi/2 + final_pulse_phase/2)`.
pub fn spin_probability(phi: f64, final_pulse_phase: f64) -> f64 {
    let s = (0.5 * phi + 0.5 * final_pulse_phase).sin();
    s * s
}

/// Quantum projection: Bernoulli draw of the spin state.
pub fn project_spin(phi: f64, final_pulse_phase: f64, rng: &mut impl Rng) -> u8 {
    let p = spin_probability(phi, final_pulse_phase);
    u8::from(rng.random::<f64>() < p)
}

/// One raw readout sample for a known spin state.
pub fn read_signal(spin: u8, channel: &ReadoutChannel, rng: &mut impl Rng) -> f64 {
    debug_assert!(spin <= 1);
    match *channel {
        ReadoutChannel::PhotonCount { alpha0, alpha1 } => {
            let mean = if spin == 1 { alpha1 } else { alpha0 };
            draw_poisson(mean, rng)
        }
        ReadoutChannel::Threshold {
            p1_given_0,
            p1_given_1,
        } => {
            let p = if spin == 1 { p1_given_1 } else { p1_given_0 };
            f64::from(rng.random::<f64>() < p)
        }
    }
}

/// Optional charge-initialization failure: with probability `p_fail` the
/// shot's signal is replaced by a spin-independent background draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureSpec {
    pub p_fail: f64,
    pub background: f64,
}

pub fn read_signal_with_failure(
    spin: u8,
    channel: &ReadoutChannel,
    failure: Option<&FailureSpec>,
    rng: &mut impl Rng,
) -> f64 {
    if let Some(f) = failure {
        if rng.random::<f64>() < f.p_fail {
            return draw_poisson(f.background, rng);
        }
    }
    read_signal(spin, channel, rng)
}

fn draw_poisson(mean: f64, rng: &mut impl Rng) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    Poisson::new(mean).expect("positive finite mean").sample(rng)
}

/// Slow common-mode modulation of the photon means, standing in for
/// mechanical/thermal fluorescence drift. Used to exercise detrending.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSpec {
    pub enabled: bool,
    pub frequency: f64,
    pub relative_amplitude: f64,
    /// Same modulation phase on both sensors when true.
    pub shared: bool,
}

impl DriftSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.relative_amplitude) {
            return Err(Error::Config(format!(
                "drift relative_amplitude must be in [0, 0.5], got {}",
                self.relative_amplitude
            )));
        }
        if self.enabled && !(self.frequency > 0.0) {
            return Err(Error::Config(format!(
                "drift frequency must be positive, got {}",
                self.frequency
            )));
        }
        Ok(())
    }
}

/// Seed information embedded in every persisted table, enough to replay the
/// run bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SeedMetadata {
    pub master_seed: u64,
    /// User-visible seed streams of the active noise sources.
    pub source_streams: Vec<u64>,
}

/// Columnar record of one run: phases, spins and raw signals per sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotTable {
    pub t_stamps: Vec<f64>,
    pub phi1: Vec<f64>,
    pub phi2: Vec<f64>,
    pub spin1: Vec<u8>,
    pub spin2: Vec<u8>,
    pub sig1: Vec<f64>,
    pub sig2: Vec<f64>,
    pub seed: SeedMetadata,
}

impl ShotTable {
    pub fn with_capacity(n: usize, seed: SeedMetadata) -> Self {
        Self {
            t_stamps: vec![0.0; n],
            phi1: vec![0.0; n],
            phi2: vec![0.0; n],
            spin1: vec![0; n],
            spin2: vec![0; n],
            sig1: vec![0.0; n],
            sig2: vec![0.0; n],
            seed,
        }
    }

    pub fn n_shots(&self) -> usize {
        self.t_stamps.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_shots();
        let lens = [
            self.phi1.len(),
            self.phi2.len(),
            self.spin1.len(),
            self.spin2.len(),
            self.sig1.len(),
            self.sig2.len(),
        ];
        if lens.iter().any(|l| *l != n) {
            return Err(Error::EstimatorInput(
                "shot table columns have unequal lengths".into(),
            ));
        }
        if self.spin1.iter().chain(&self.spin2).any(|s| *s > 1) {
            return Err(Error::EstimatorInput("spins must be 0 or 1".into()));
        }
        if self.sig1.iter().chain(&self.sig2).any(|s| *s < 0.0) {
            return Err(Error::EstimatorInput("signals must be >= 0".into()));
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "# seed: {}", serde_json::to_string(&self.seed).unwrap())?;
        writeln!(w, "shot, t_stamp, phi1, phi2, s1_spin, s2_spin, s1_sig, s2_sig")?;
        for i in 0..self.n_shots() {
            writeln!(
                w,
                "{}, {:.9e}, {:.9e}, {:.9e}, {}, {}, {}, {}",
                i,
                self.t_stamps[i],
                self.phi1[i],
                self.phi2[i],
                self.spin1[i],
                self.spin2[i],
                self.sig1[i],
                self.sig2[i]
            )?;
        }
        Ok(())
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            w,
            "{}",
            serde_json::json!({ "meta": { "seed": &self.seed, "n_shots": self.n_shots() } })
        )?;
        for i in 0..self.n_shots() {
            writeln!(
                w,
                "{}",
                serde_json::json!({
                    "shot": i,
                    "t_stamp": self.t_stamps[i],
                    "phi1": self.phi1[i],
                    "phi2": self.phi2[i],
                    "s1_spin": self.spin1[i],
                    "s2_spin": self.spin2[i],
                    "s1_sig": self.sig1[i],
                    "s2_sig": self.sig2[i],
                })
            )?;
        }
        Ok(())
    }
}

/// Re-draws the photon signals of a table with drift-modulated means
/// `alpha * (1 + a sin(2 pi f t + phase))`. Requires photon-counting
/// channels on both sensors.
pub fn apply_drift(
    table: &ShotTable,
    drift: &DriftSpec,
    channel1: &ReadoutChannel,
    channel2: &ReadoutChannel,
) -> Result<ShotTable> {
    drift.validate()?;
    for ch in [channel1, channel2] {
        if !matches!(ch, ReadoutChannel::PhotonCount { .. }) {
            return Err(Error::DriftNeedsPhotonCount);
        }
    }
    if !drift.enabled {
        return Ok(table.clone());
    }
    let mut out = table.clone();
    let master = table.seed.master_seed;
    for sensor in [1u8, 2u8] {
        // sensor offset 0x40 keeps drift redraws off the original readout
        // streams
        let stream = derive_stream(master, 0, Purpose::Readout { sensor: 0x40 | sensor });
        let phase = if drift.shared || sensor == 1 {
            0.0
        } else {
            // decorrelate the second sensor with a fixed quarter-cycle shift
            std::f64::consts::FRAC_PI_2
        };
        let channel = if sensor == 1 { channel1 } else { channel2 };
        let (alpha0, alpha1) = match channel {
            ReadoutChannel::PhotonCount { alpha0, alpha1 } => (*alpha0, *alpha1),
            ReadoutChannel::Threshold { .. } => unreachable!(),
        };
        for i in 0..table.n_shots() {
            let modulation =
                1.0 + drift.relative_amplitude * (TWO_PI * drift.frequency * table.t_stamps[i] + phase).sin();
            let spin = if sensor == 1 { table.spin1[i] } else { table.spin2[i] };
            let mean = if spin == 1 { alpha1 } else { alpha0 } * modulation;
            let mut rng = shot_rng(stream, i as u64);
            let sig = draw_poisson(mean, &mut rng);
            if sensor == 1 {
                out.sig1[i] = sig;
            } else {
                out.sig2[i] = sig;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn rng(shot: u64) -> rand_chacha::ChaCha8Rng {
        shot_rng(0xdead, shot)
    }

    #[test]
    fn projection_extremes() {
        for shot in 0..200 {
            let mut r = rng(shot);
            assert_eq!(project_spin(FRAC_PI_2, FRAC_PI_2, &mut r), 1);
            assert_eq!(project_spin(-FRAC_PI_2, FRAC_PI_2, &mut r), 0);
        }
    }

    #[test]
    fn projection_statistics_on_phase_grid() {
        let n = 100_000;
        for i in 0..9 {
            let phi = -PI + 2.0 * PI * i as f64 / 8.0;
            let p = spin_probability(phi, FRAC_PI_2);
            let mut r = rng(i);
            let ones: u64 = (0..n)
                .map(|_| u64::from(project_spin(phi, FRAC_PI_2, &mut r)))
                .sum();
            let sigma = (p * (1.0 - p) / n as f64).sqrt().max(1e-4);
            let rate = ones as f64 / n as f64;
            assert!(
                (rate - p).abs() < 3.5 * sigma,
                "phi {phi}: rate {rate} vs p {p}"
            );
        }
    }

    #[test]
    fn readout_noise_values() {
        let perfect = ReadoutChannel::symmetric_threshold(1.0);
        assert!((perfect.readout_noise().unwrap() - 1.0).abs() < 1e-12);
        let f075 = ReadoutChannel::symmetric_threshold(0.75);
        assert!((f075.readout_noise().unwrap() - 2.0).abs() < 1e-12);
        let pc = ReadoutChannel::PhotonCount {
            alpha0: 1.0,
            alpha1: 0.0,
        };
        assert!((pc.readout_noise().unwrap() - 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn symmetric_threshold_matches_fidelity_shortcut() {
        for f in [0.6, 0.75, 0.9, 0.99] {
            let ch = ReadoutChannel::symmetric_threshold(f);
            let sigma = ch.readout_noise().unwrap();
            assert!(
                (sigma - 1.0 / (2.0 * f - 1.0)).abs() < 1e-12,
                "F = {f}: {sigma}"
            );
        }
    }

    #[test]
    fn zero_contrast_is_rejected() {
        let pc = ReadoutChannel::PhotonCount {
            alpha0: 2.0,
            alpha1: 2.0,
        };
        assert!(matches!(pc.readout_noise(), Err(Error::ZeroContrast(_))));
        let th = ReadoutChannel::Threshold {
            p1_given_0: 0.5,
            p1_given_1: 0.5,
        };
        assert!(matches!(th.readout_noise(), Err(Error::ZeroContrast(_))));
    }

    #[test]
    fn sigma_r_grows_with_photon_budget_at_fixed_contrast() {
        let mut last = 0.0;
        for base in [0.0, 1.0, 5.0, 20.0] {
            let ch = ReadoutChannel::PhotonCount {
                alpha0: base + 2.0,
                alpha1: base,
            };
            let s = ch.readout_noise().unwrap();
            assert!(s > last);
            last = s;
        }
    }

    #[test]
    fn perfect_threshold_echoes_spin() {
        let ch = ReadoutChannel::Threshold {
            p1_given_0: 0.0,
            p1_given_1: 1.0,
        };
        let mut r = rng(0);
        for spin in [0u8, 1u8] {
            for _ in 0..100 {
                assert_eq!(read_signal(spin, &ch, &mut r), f64::from(spin));
            }
        }
    }

    #[test]
    fn dark_state_yields_zero_photons() {
        let ch = ReadoutChannel::PhotonCount {
            alpha0: 1.0,
            alpha1: 0.0,
        };
        let mut r = rng(1);
        for _ in 0..100 {
            assert_eq!(read_signal(1, &ch, &mut r), 0.0);
        }
    }

    #[test]
    fn equal_means_decouple_signal_from_spin() {
        // alpha0 = alpha1 fails validation as a channel, so sample the two
        // Poisson branches directly and correlate against the spin.
        let n = 100_000usize;
        let mut r = rng(7);
        let mut spins = Vec::with_capacity(n);
        let mut sigs = Vec::with_capacity(n);
        for _ in 0..n {
            let spin = u8::from(r.random::<f64>() < 0.5);
            let sig = draw_poisson(3.0, &mut r);
            spins.push(f64::from(spin));
            sigs.push(sig);
        }
        let corr = sample_corr(&spins, &sigs);
        assert!(corr.abs() < 3.0 / (n as f64).sqrt(), "corr = {corr}");
    }

    fn sample_corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let mut c = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (x, y) in a.iter().zip(b) {
            c += (x - ma) * (y - mb);
            va += (x - ma) * (x - ma);
            vb += (y - mb) * (y - mb);
        }
        c / (va * vb).sqrt()
    }

    #[test]
    fn mean_signal_is_invariant_under_even_phases() {
        // even phase ensemble: +-phi0 equally likely
        let ch = ReadoutChannel::PhotonCount {
            alpha0: 5.0,
            alpha1: 1.0,
        };
        let n = 200_000usize;
        let mut r = rng(11);
        let mut total = 0.0;
        for _ in 0..n {
            let phi = if r.random::<bool>() { 1.1 } else { -1.1 };
            let spin = project_spin(phi, FRAC_PI_2, &mut r);
            total += read_signal(spin, &ch, &mut r);
        }
        let mean = total / n as f64;
        let expect = 0.5 * (5.0 + 1.0);
        let sigma = (expect / n as f64).sqrt() * 3.0 + 3.0 * 2.0 / (n as f64).sqrt();
        assert!((mean - expect).abs() < 4.0 * sigma.max(0.02), "mean {mean}");
    }

    #[test]
    fn failure_branch_replaces_signal_with_background() {
        let ch = ReadoutChannel::PhotonCount {
            alpha0: 50.0,
            alpha1: 40.0,
        };
        let fail = FailureSpec {
            p_fail: 1.0,
            background: 0.0,
        };
        let mut r = rng(3);
        for spin in [0, 1] {
            assert_eq!(read_signal_with_failure(spin, &ch, Some(&fail), &mut r), 0.0);
        }
    }

    #[test]
    fn drift_requires_photon_counting() {
        let table = ShotTable::with_capacity(4, SeedMetadata::default());
        let drift = DriftSpec {
            enabled: true,
            frequency: 20.0,
            relative_amplitude: 0.2,
            shared: true,
        };
        let th = ReadoutChannel::symmetric_threshold(0.9);
        let pc = ReadoutChannel::PhotonCount {
            alpha0: 3.0,
            alpha1: 1.0,
        };
        assert!(matches!(
            apply_drift(&table, &drift, &th, &pc),
            Err(Error::DriftNeedsPhotonCount)
        ));
    }

    #[test]
    fn disabled_drift_is_identity() {
        let mut table = ShotTable::with_capacity(8, SeedMetadata::default());
        table.sig1 = (0..8).map(|i| i as f64).collect();
        let drift = DriftSpec {
            enabled: false,
            frequency: 20.0,
            relative_amplitude: 0.2,
            shared: true,
        };
        let pc = ReadoutChannel::PhotonCount {
            alpha0: 3.0,
            alpha1: 1.0,
        };
        let out = apply_drift(&table, &drift, &pc, &pc).unwrap();
        assert_eq!(out, table);
    }

    #[test]
    fn zero_amplitude_drift_preserves_statistics() {
        let n = 50_000;
        let pc = ReadoutChannel::PhotonCount {
            alpha0: 4.0,
            alpha1: 1.0,
        };
        let mut table = ShotTable::with_capacity(n, SeedMetadata::default());
        let mut r = rng(21);
        for i in 0..n {
            table.t_stamps[i] = i as f64 * 1e-5;
            table.spin1[i] = u8::from(r.random::<f64>() < 0.5);
            table.spin2[i] = u8::from(r.random::<f64>() < 0.5);
            table.sig1[i] = read_signal(table.spin1[i], &pc, &mut r);
            table.sig2[i] = read_signal(table.spin2[i], &pc, &mut r);
        }
        let drift = DriftSpec {
            enabled: true,
            frequency: 20.0,
            relative_amplitude: 0.0,
            shared: true,
        };
        let out = apply_drift(&table, &drift, &pc, &pc).unwrap();
        let mean_in = table.sig1.iter().sum::<f64>() / n as f64;
        let mean_out = out.sig1.iter().sum::<f64>() / n as f64;
        assert!((mean_in - mean_out).abs() < 0.05, "{mean_in} vs {mean_out}");
    }

    #[test]
    fn csv_round_trip_header_and_rows() {
        let mut table = ShotTable::with_capacity(
            2,
            SeedMetadata {
                master_seed: 42,
                source_streams: vec![1, 2],
            },
        );
        table.phi1 = vec![0.1, -0.2];
        table.spin1 = vec![1, 0];
        table.sig1 = vec![3.0, 0.0];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("shots.csv");
        table.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        let meta = lines.next().unwrap();
        assert!(meta.contains("\"master_seed\":42"));
        assert_eq!(
            lines.next().unwrap(),
            "shot, t_stamp, phi1, phi2, s1_spin, s2_spin, s1_sig, s2_sig"
        );
        assert_eq!(lines.count(), 2);
    }

    #[test]
    fn table_validation_catches_ragged_columns() {
        let mut table = ShotTable::with_capacity(3, SeedMetadata::default());
        table.phi2.pop();
        assert!(table.validate().is_err());
        let mut bad_spin = ShotTable::with_capacity(3, SeedMetadata::default());
        bad_spin.spin1[0] = 2;
        assert!(bad_spin.validate().is_err());
    }
}
