//! Pipeline execution: fields -> phases -> spins -> signals -> estimates,
//! plus the matched closed-form prediction for every point.

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::estimators::{
    joint_cumulant, lag_correlation, pearson, sigma_r_of, CorrelationEstimate, CumulantEstimate,
    DetrendSpec, LagPoint,
};
use crate::field::{
    broadband_phases, broadband_tones, synth_trace, tone_realization, NoiseKind, NoiseSourceSpec,
    PhaseNoiseModel, TimeGrid, TWO_PI,
};
use crate::harness::config::{
    source_needs_trace, CoherenceTargets, DetrendMode, ExperimentConfig, SweepAxis,
    COHERENCE_STREAM_1, COHERENCE_STREAM_2,
};
use crate::measurement::{
    apply_drift, project_spin, read_signal_with_failure, ReadoutChannel, SeedMetadata, ShotTable,
};
use crate::rng::{derive_point_seed, derive_stream, shot_rng, Purpose};
use crate::sequence::{
    accumulate_phase, tone_quadrature, GyromagneticConstants, SequenceSpec,
};
use crate::theory::{
    bessel_j0, bessel_j0_inverse, gauss_legendre, TheoryPrediction,
};

type C64 = Complex<f64>;

/// Selects the rayon pool size: explicit argument, else `COVMAG_THREADS`,
/// else the rayon default. Safe to call repeatedly; only the first global
/// initialization wins.
pub fn init_threads(threads: Option<usize>) {
    let n = threads.or_else(|| {
        std::env::var("COVMAG_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = n {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// A config bound to concrete sequences, derived seed streams and
/// calibrated synthetic sources — everything the shot loop needs.
pub struct ResolvedPoint {
    pub n_shots: u64,
    pub master_seed: u64,
    pub seq1: SequenceSpec,
    pub seq2: SequenceSpec,
    pub consts: GyromagneticConstants,
    pub common: NoiseSourceSpec,
    pub local1: NoiseSourceSpec,
    pub local2: NoiseSourceSpec,
    pub couplings: [f64; 2],
    pub channel1: ReadoutChannel,
    pub channel2: ReadoutChannel,
    pub sigma_r1: f64,
    pub sigma_r2: f64,
    pub detrend: DetrendSpec,
    pub t_shot: f64,
    pub grid: Option<TimeGrid>,
    cfg: ExperimentConfig,
    engines: Vec<Engine>,
}

/// Per-source evaluation strategy for the shot loop.
enum Engine {
    /// (spec, coupling to sensor 1, coupling to sensor 2)
    Tone(NoiseSourceSpec, f64, f64),
    /// cached per-tone sequence quadratures per sensor
    Broadband {
        spec: NoiseSourceSpec,
        tones: Vec<(f64, f64)>,
        z1: Vec<C64>,
        z2: Vec<C64>,
        c1: f64,
        c2: f64,
    },
    Trace(NoiseSourceSpec, f64, f64),
}

pub fn resolve(cfg: &ExperimentConfig) -> Result<ResolvedPoint> {
    cfg.validate()?;
    let consts = crate::harness::config::constants();
    let (seq1, seq2) = cfg.sequence_pair()?;
    let master = cfg.master_seed;

    let derive = |spec: &NoiseSourceSpec| {
        let mut s = spec.clone();
        s.seed_stream = derive_stream(master, spec.seed_stream, Purpose::Field);
        s
    };
    let common = derive(&cfg.sources.common);
    let mut local1 = derive(&cfg.sources.local1);
    let mut local2 = derive(&cfg.sources.local2);

    if let Some(CoherenceTargets { targets }) = &cfg.coherence {
        local1 = dephasing_tone(targets[0], &seq1, &consts, master, COHERENCE_STREAM_1)?;
        local2 = dephasing_tone(targets[1], &seq2, &consts, master, COHERENCE_STREAM_2)?;
    }

    let grid = if cfg.needs_trace() {
        let dt = cfg.grid.expect("validated").dt;
        let end = seq1.window().1.max(seq2.window().1);
        let n = (end / dt).ceil() as usize + 2;
        Some(TimeGrid::new(0.0, dt, n)?)
    } else {
        None
    };

    let mut engines = Vec::new();
    for (spec, k1, k2) in [
        (&common, cfg.couplings[0], cfg.couplings[1]),
        (&local1, 1.0, 0.0),
        (&local2, 0.0, 1.0),
    ] {
        if spec.is_silent() {
            continue;
        }
        if source_needs_trace(spec) {
            engines.push(Engine::Trace(spec.clone(), k1, k2));
        } else if spec.kind == NoiseKind::GaussianBroadband {
            let tones = broadband_tones(spec);
            let z1 = tones.iter().map(|(f, _)| tone_quadrature(&seq1, *f)).collect();
            let z2 = tones.iter().map(|(f, _)| tone_quadrature(&seq2, *f)).collect();
            engines.push(Engine::Broadband {
                spec: spec.clone(),
                tones,
                z1,
                z2,
                c1: k1,
                c2: k2,
            });
        } else {
            engines.push(Engine::Tone(spec.clone(), k1, k2));
        }
    }

    let sigma_r1 = cfg.channel1.readout_noise()?;
    let sigma_r2 = cfg.channel2.readout_noise()?;
    let detrend = match cfg.estimator.detrend {
        DetrendMode::On => DetrendSpec {
            enabled: true,
            block_size: cfg.estimator.block_size,
        },
        DetrendMode::Off => DetrendSpec {
            enabled: false,
            block_size: cfg.estimator.block_size,
        },
        DetrendMode::Auto => DetrendSpec {
            enabled: matches!(cfg.channel1, ReadoutChannel::PhotonCount { .. })
                || matches!(cfg.channel2, ReadoutChannel::PhotonCount { .. }),
            block_size: cfg.estimator.block_size,
        },
    };
    let t_shot = seq1.window().1.max(seq2.window().1) + cfg.t_readout;

    Ok(ResolvedPoint {
        n_shots: cfg.n_shots,
        master_seed: master,
        seq1,
        seq2,
        consts,
        common,
        local1,
        local2,
        couplings: cfg.couplings,
        channel1: cfg.channel1,
        channel2: cfg.channel2,
        sigma_r1,
        sigma_r2,
        detrend,
        t_shot,
        grid,
        cfg: cfg.clone(),
        engines,
    })
}

/// Resonant random-phase tone whose amplitude realizes `<cos phi_L> = c`.
fn dephasing_tone(
    c: f64,
    seq: &SequenceSpec,
    consts: &GyromagneticConstants,
    master_seed: u64,
    user_stream: u64,
) -> Result<NoiseSourceSpec> {
    let f_res = 1.0 / (2.0 * seq.tau);
    let z = tone_quadrature(seq, f_res).norm();
    if z < 1e-30 {
        return Err(Error::Config(
            "sequence filter vanishes at resonance; cannot calibrate coherence target".into(),
        ));
    }
    let a = bessel_j0_inverse(c)?;
    let b0 = a / (TWO_PI * consts.gamma_e * z);
    let mut spec = NoiseSourceSpec::random_phase_ac(b0, f_res, 0.0, 0);
    spec.seed_stream = derive_stream(master_seed, user_stream, Purpose::Field);
    Ok(spec)
}

impl ResolvedPoint {
    /// Accumulated phases of both sensors for one shot.
    pub fn phases(&self, shot: u64) -> Result<(f64, f64)> {
        let mut phi1 = 0.0;
        let mut phi2 = 0.0;
        let consts = &self.consts;
        for engine in &self.engines {
            match engine {
                Engine::Tone(spec, k1, k2) => {
                    let tone = tone_realization(spec, shot).expect("tone path");
                    let rot = C64::new(0.0, tone.psi0).exp();
                    for (seq, k, phi) in [
                        (&self.seq1, *k1, &mut phi1),
                        (&self.seq2, *k2, &mut phi2),
                    ] {
                        if k == 0.0 {
                            continue;
                        }
                        let z = tone_quadrature(seq, tone.frequency);
                        *phi += k
                            * seq.phase_sign()
                            * TWO_PI
                            * consts.gamma_e
                            * tone.amplitude
                            * (rot * z).re;
                    }
                }
                Engine::Broadband {
                    spec,
                    tones,
                    z1,
                    z2,
                    c1,
                    c2,
                } => {
                    let phases = broadband_phases(spec, shot);
                    for (seq, k, z, phi) in [
                        (&self.seq1, *c1, z1, &mut phi1),
                        (&self.seq2, *c2, z2, &mut phi2),
                    ] {
                        if k == 0.0 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for (((_, a), theta), zz) in tones.iter().zip(&phases).zip(z) {
                            acc += a * (theta.cos() * zz.re - theta.sin() * zz.im);
                        }
                        *phi += k * seq.phase_sign() * TWO_PI * consts.gamma_e * acc;
                    }
                }
                Engine::Trace(spec, k1, k2) => {
                    let grid = self.grid.as_ref().expect("trace engines carry a grid");
                    let trace = synth_trace(spec, shot, grid)?;
                    if *k1 != 0.0 {
                        phi1 += k1 * accumulate_phase(&trace, &self.seq1, consts)?;
                    }
                    if *k2 != 0.0 {
                        phi2 += k2 * accumulate_phase(&trace, &self.seq2, consts)?;
                    }
                }
            }
        }
        Ok((phi1, phi2))
    }

    pub fn seed_metadata(&self) -> SeedMetadata {
        SeedMetadata {
            master_seed: self.master_seed,
            source_streams: vec![
                self.cfg.sources.common.seed_stream,
                self.cfg.sources.local1.seed_stream,
                self.cfg.sources.local2.seed_stream,
            ],
        }
    }
}

/// Runs the shot loop; column order is keyed by shot index, so the result
/// is identical for any thread count.
pub fn run_point(point: &ResolvedPoint) -> Result<ShotTable> {
    let n = point.n_shots as usize;
    let proj1 = derive_stream(point.master_seed, 0, Purpose::Projection { sensor: 1 });
    let proj2 = derive_stream(point.master_seed, 0, Purpose::Projection { sensor: 2 });
    let read1 = derive_stream(point.master_seed, 0, Purpose::Readout { sensor: 1 });
    let read2 = derive_stream(point.master_seed, 0, Purpose::Readout { sensor: 2 });
    let failure = point.cfg.readout_failure;

    let rows: Vec<Result<(f64, f64, u8, u8, f64, f64)>> = (0..n as u64)
        .into_par_iter()
        .map(|shot| {
            let (phi1, phi2) = point.phases(shot)?;
            let spin1 = project_spin(
                phi1,
                point.seq1.final_pulse_phase,
                &mut shot_rng(proj1, shot),
            );
            let spin2 = project_spin(
                phi2,
                point.seq2.final_pulse_phase,
                &mut shot_rng(proj2, shot),
            );
            let sig1 = read_signal_with_failure(
                spin1,
                &point.channel1,
                failure.as_ref(),
                &mut shot_rng(read1, shot),
            );
            let sig2 = read_signal_with_failure(
                spin2,
                &point.channel2,
                failure.as_ref(),
                &mut shot_rng(read2, shot),
            );
            Ok((phi1, phi2, spin1, spin2, sig1, sig2))
        })
        .collect();

    let mut table = ShotTable::with_capacity(n, point.seed_metadata());
    for (i, row) in rows.into_iter().enumerate() {
        let (phi1, phi2, spin1, spin2, sig1, sig2) = row?;
        table.t_stamps[i] = i as f64 * point.t_shot;
        table.phi1[i] = phi1;
        table.phi2[i] = phi2;
        table.spin1[i] = spin1;
        table.spin2[i] = spin2;
        table.sig1[i] = sig1;
        table.sig2[i] = sig2;
    }

    if let Some(drift) = &point.cfg.drift {
        if drift.enabled {
            table = apply_drift(&table, drift, &point.channel1, &point.channel2)?;
        }
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub estimate: CorrelationEstimate,
    pub lag: Option<Vec<LagPoint>>,
    pub cumulant2: Option<CumulantEstimate>,
    pub theory: Option<TheoryPrediction>,
    /// `(r_sim - r_theory) / sigma_r` when theory is computable.
    pub residual: Option<f64>,
    pub wall_seconds: f64,
    pub shots_per_second: f64,
    pub seed: SeedMetadata,
}

impl CorrelationReport {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "{}", serde_json::to_string(self).unwrap())?;
        Ok(())
    }
}

/// Full single-point pipeline: simulate, estimate, and attach theory.
pub fn run(cfg: &ExperimentConfig) -> Result<(ShotTable, CorrelationReport)> {
    let point = resolve(cfg)?;
    let start = std::time::Instant::now();
    let table = run_point(&point)?;
    let wall = start.elapsed().as_secs_f64();
    let report = estimate(&point, &table, wall)?;
    Ok((table, report))
}

fn estimate(point: &ResolvedPoint, table: &ShotTable, wall: f64) -> Result<CorrelationReport> {
    let est = pearson(&table.sig1, &table.sig2, &point.detrend)?;
    let lag = if point.cfg.estimator.max_lag > 0 {
        Some(lag_correlation(
            &table.sig1,
            &table.sig2,
            point.cfg.estimator.max_lag,
            &point.detrend,
        )?)
    } else {
        None
    };
    let cumulant2 = if point.cfg.estimator.cumulants {
        Some(joint_cumulant(&[&table.sig1, &table.sig2])?)
    } else {
        None
    };
    let theory = predict(point);
    let residual = theory
        .as_ref()
        .map(|t| (est.r - t.r_observed) / est.sigma_r);
    Ok(CorrelationReport {
        estimate: est,
        lag,
        cumulant2,
        theory,
        residual,
        wall_seconds: wall,
        shots_per_second: point.n_shots as f64 / wall.max(1e-9),
        seed: point.seed_metadata(),
    })
}

// ---------------------------------------------------------------------------
// closed-form prediction for a resolved point

/// Weighted average of `f` over `[lo, hi]` with composite Gauss-Legendre
/// panels fine enough to resolve the filter-lobe scale `1/t`.
fn weighted_average(
    lo: f64,
    hi: f64,
    t: f64,
    weight: impl Fn(f64) -> f64,
    f: impl Fn(f64) -> f64,
) -> f64 {
    let span = hi - lo;
    let panels = ((span * t * 8.0).ceil() as usize).clamp(5, 4000);
    let (nodes, weights) = gauss_legendre(21);
    let mut num = 0.0;
    let mut den = 0.0;
    for p in 0..panels {
        let a = lo + span * p as f64 / panels as f64;
        let hw = 0.5 * span / panels as f64;
        for (x, w) in nodes.iter().zip(&weights) {
            let fx = a + hw * (1.0 + x);
            let wt = w * hw * weight(fx);
            num += wt * f(fx);
            den += wt;
        }
    }
    num / den
}

/// Plain integral with the same panel scheme.
fn panel_integral(lo: f64, hi: f64, t: f64, f: impl Fn(f64) -> f64) -> f64 {
    let span = hi - lo;
    let panels = ((span * t * 8.0).ceil() as usize).clamp(5, 4000);
    let (nodes, weights) = gauss_legendre(21);
    let mut total = 0.0;
    for p in 0..panels {
        let a = lo + span * p as f64 / panels as f64;
        let hw = 0.5 * span / panels as f64;
        for (x, w) in nodes.iter().zip(&weights) {
            total += w * hw * f(a + hw * (1.0 + x));
        }
    }
    total
}

fn lorentzian_pdf(f: f64, f0: f64, fwhm: f64) -> f64 {
    let hwhm = 0.5 * fwhm;
    (1.0 / (std::f64::consts::PI * hwhm)) / (1.0 + ((f - f0) / hwhm).powi(2))
}

/// `<sin phi1 sin phi2>` for one shared tone with complex per-sensor
/// couplings `zeta_i = sign_i k_i 2 pi gamma B0 Z_i(f)`: product-to-sum plus
/// the uniform-phase Bessel average gives
/// `1/2 [J0(|z1 - z2|) - J0(|z1 + z2|)]`.
fn sin_sin_tone(z1: C64, z2: C64) -> f64 {
    0.5 * (bessel_j0((z1 - z2).norm()) - bessel_j0((z1 + z2).norm()))
}

impl ResolvedPoint {
    fn zeta(&self, sensor: u8, f: f64, b0: f64, coupling: f64) -> C64 {
        let seq = if sensor == 1 { &self.seq1 } else { &self.seq2 };
        tone_quadrature(seq, f)
            * (seq.phase_sign() * coupling * TWO_PI * self.consts.gamma_e * b0)
    }

    /// `<sin phi_C1 sin phi_C2>` of the common source, `None` when no
    /// closed form applies.
    fn common_sin_sin(&self) -> Option<(f64, &'static str)> {
        let s = &self.common;
        let (k1, k2) = (self.couplings[0], self.couplings[1]);
        let t = self.seq1.total_time().max(self.seq2.total_time());
        if s.is_silent() {
            return Some((0.0, "null"));
        }
        match s.kind {
            NoiseKind::Silence => Some((0.0, "null")),
            // deterministic field: no shot-to-shot covariance
            NoiseKind::CoherentAc => Some((0.0, "coherent_null")),
            NoiseKind::RandomPhaseAc => {
                let pure = |f: f64| {
                    sin_sin_tone(
                        self.zeta(1, f, s.amplitude_b0, k1),
                        self.zeta(2, f, s.amplitude_b0, k2),
                    )
                };
                if s.phase_bandwidth == 0.0 {
                    return Some((pure(s.carrier_f0), "bessel"));
                }
                match s.phase_noise {
                    PhaseNoiseModel::ShotDetuning => {
                        let hw = s.detuning_half_width();
                        let avg = weighted_average(
                            s.carrier_f0 - hw,
                            s.carrier_f0 + hw,
                            t,
                            |f| lorentzian_pdf(f, s.carrier_f0, s.phase_bandwidth),
                            pure,
                        );
                        Some((avg, "bessel_line"))
                    }
                    PhaseNoiseModel::Diffusion => {
                        // Gaussian-phase closed form with the Lorentzian PSD
                        let lo = (s.carrier_f0 - 8.0 * s.phase_bandwidth).max(1e2);
                        let hi = s.carrier_f0 + 8.0 * s.phase_bandwidth;
                        let pref = (TWO_PI * self.consts.gamma_e).powi(2)
                            * s.amplitude_b0
                            * s.amplitude_b0
                            / 2.0;
                        let gz = |f: f64, sign: f64| {
                            let z1 = tone_quadrature(&self.seq1, f)
                                * (self.seq1.phase_sign() * k1);
                            let z2 = tone_quadrature(&self.seq2, f)
                                * (self.seq2.phase_sign() * k2);
                            (z1 + z2 * sign).norm_sqr()
                        };
                        let vm = pref
                            * panel_integral(lo, hi, t, |f| {
                                lorentzian_pdf(f, s.carrier_f0, s.phase_bandwidth) * gz(f, -1.0)
                            });
                        let vp = pref
                            * panel_integral(lo, hi, t, |f| {
                                lorentzian_pdf(f, s.carrier_f0, s.phase_bandwidth) * gz(f, 1.0)
                            });
                        Some((0.5 * ((-0.5 * vm).exp() - (-0.5 * vp).exp()), "gaussian"))
                    }
                }
            }
            NoiseKind::GaussianBroadband => {
                let pref = (TWO_PI * self.consts.gamma_e).powi(2) * s.psd_level;
                let gz = |f: f64, sign: f64| {
                    let z1 = tone_quadrature(&self.seq1, f) * (self.seq1.phase_sign() * k1);
                    let z2 = tone_quadrature(&self.seq2, f) * (self.seq2.phase_sign() * k2);
                    (z1 + z2 * sign).norm_sqr()
                };
                let vm = pref * panel_integral(0.0, s.band_limit, t, |f| gz(f, -1.0));
                let vp = pref * panel_integral(0.0, s.band_limit, t, |f| gz(f, 1.0));
                Some((0.5 * ((-0.5 * vm).exp() - (-0.5 * vp).exp()), "gaussian"))
            }
        }
    }

    /// Single-sensor coherence factor `<cos phi_L>` of one local source.
    fn local_coherence(&self, spec: &NoiseSourceSpec, sensor: u8) -> Option<f64> {
        if spec.is_silent() {
            return Some(1.0);
        }
        let seq = if sensor == 1 { &self.seq1 } else { &self.seq2 };
        let t = seq.total_time();
        let amp = |f: f64| {
            TWO_PI * self.consts.gamma_e * spec.amplitude_b0 * tone_quadrature(seq, f).norm()
        };
        match spec.kind {
            NoiseKind::Silence => Some(1.0),
            NoiseKind::CoherentAc => None,
            NoiseKind::RandomPhaseAc => {
                if spec.phase_bandwidth == 0.0 {
                    return Some(bessel_j0(amp(spec.carrier_f0)));
                }
                match spec.phase_noise {
                    PhaseNoiseModel::ShotDetuning => {
                        let hw = spec.detuning_half_width();
                        Some(weighted_average(
                            spec.carrier_f0 - hw,
                            spec.carrier_f0 + hw,
                            t,
                            |f| lorentzian_pdf(f, spec.carrier_f0, spec.phase_bandwidth),
                            |f| bessel_j0(amp(f)),
                        ))
                    }
                    PhaseNoiseModel::Diffusion => {
                        let lo = (spec.carrier_f0 - 8.0 * spec.phase_bandwidth).max(1e2);
                        let hi = spec.carrier_f0 + 8.0 * spec.phase_bandwidth;
                        let sigma_sq = 0.5
                            * panel_integral(lo, hi, t, |f| {
                                lorentzian_pdf(f, spec.carrier_f0, spec.phase_bandwidth)
                                    * amp(f).powi(2)
                            });
                        Some((-0.5 * sigma_sq).exp())
                    }
                }
            }
            NoiseKind::GaussianBroadband => {
                let pref = (TWO_PI * self.consts.gamma_e).powi(2) * spec.psd_level;
                let sigma_sq = pref
                    * panel_integral(0.0, spec.band_limit, t, |f| {
                        tone_quadrature(seq, f).norm_sqr()
                    });
                Some((-0.5 * sigma_sq).exp())
            }
        }
    }
}

/// Closed-form prediction for a resolved point, when one exists.
pub fn predict(point: &ResolvedPoint) -> Option<TheoryPrediction> {
    let (sin_sin, model) = point.common_sin_sin()?;
    let c1 = point.local_coherence(&point.local1, 1)?;
    let c2 = point.local_coherence(&point.local2, 2)?;
    let r_ideal = c1 * c2 * sin_sin;
    let r_observed = r_ideal / (point.sigma_r1 * point.sigma_r2);
    Some(TheoryPrediction {
        r_ideal,
        r_observed,
        snr: r_observed.abs() / sigma_r_of(point.n_shots as usize),
        sigma_r1: point.sigma_r1,
        sigma_r2: point.sigma_r2,
        model: model.to_string(),
    })
}

// ---------------------------------------------------------------------------
// sweeps

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub estimate: CorrelationEstimate,
    pub theory: Option<TheoryPrediction>,
    pub residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            w,
            "axis_value, r, sigma_r, n_shots, r_theory_ideal, r_theory_observed, residual"
        )?;
        for p in &self.points {
            let (ri, ro, res) = match (&p.theory, p.residual) {
                (Some(t), Some(res)) => (
                    format!("{:.9e}", t.r_ideal),
                    format!("{:.9e}", t.r_observed),
                    format!("{res:.4}"),
                ),
                _ => ("".into(), "".into(), "".into()),
            };
            writeln!(
                w,
                "{:.9e}, {:.9e}, {:.9e}, {}, {}, {}, {}",
                p.value, p.estimate.r, p.estimate.sigma_r, p.estimate.n_effective, ri, ro, res
            )?;
        }
        Ok(())
    }
}

/// Runs every sweep point with an independent derived master seed.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    let sweep = cfg
        .sweep
        .clone()
        .ok_or_else(|| Error::Config("config has no [sweep] block".into()))?;
    let mut points = Vec::with_capacity(sweep.values.len());
    for (idx, &value) in sweep.values.iter().enumerate() {
        let mut point_cfg = cfg.at_axis_value(sweep.axis, value)?;
        point_cfg.master_seed = derive_point_seed(cfg.master_seed, idx);
        let (_, report) = run(&point_cfg)?;
        points.push(SweepPoint {
            value,
            estimate: report.estimate,
            theory: report.theory,
            residual: report.residual,
        });
    }
    Ok(SweepResult {
        axis: sweep.axis,
        points,
    })
}

// ---------------------------------------------------------------------------
// spectral reconstruction

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructRow {
    pub frequency: f64,
    pub tau: f64,
    pub r: f64,
    pub sigma_r: f64,
    /// Single-sensor coherence factors measured from the simulated phases.
    pub c1: f64,
    pub c2: f64,
    /// Correlated spectrum from the asinh inversion.
    pub s_c: f64,
    /// Total single-sensor spectra from the measured decays.
    pub s1: f64,
    pub s2: f64,
    pub s_l1: f64,
    pub s_l2: f64,
    pub reliable: bool,
}

pub fn write_reconstruct_csv(rows: &[ReconstructRow], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        w,
        "frequency, tau, r, sigma_r, c1, c2, s_c, s1, s2, s_l1, s_l2, reliable"
    )?;
    for row in rows {
        writeln!(
            w,
            "{:.9e}, {:.9e}, {:.9e}, {:.9e}, {:.6}, {:.6}, {:.9e}, {:.9e}, {:.9e}, {:.9e}, {:.9e}, {}",
            row.frequency,
            row.tau,
            row.r,
            row.sigma_r,
            row.c1,
            row.c2,
            row.s_c,
            row.s1,
            row.s2,
            row.s_l1,
            row.s_l2,
            row.reliable
        )?;
    }
    Ok(())
}

/// Spectral decomposition over a tau sweep: each tau probes
/// `f = 1/(2 tau)`; the correlated spectrum comes from the asinh inversion
/// of r, the single-sensor spectra from the simulated coherence decays,
/// and the local spectra from their difference.
pub fn reconstruct_report(cfg: &ExperimentConfig) -> Result<Vec<ReconstructRow>> {
    let sweep = cfg
        .sweep
        .clone()
        .ok_or_else(|| Error::Config("reconstruction needs a [sweep] block".into()))?;
    if sweep.axis != SweepAxis::Tau {
        return Err(Error::Config(
            "reconstruction sweeps the probe tau (axis = \"tau\")".into(),
        ));
    }
    let mut rows = Vec::with_capacity(sweep.values.len());
    for (idx, &tau) in sweep.values.iter().enumerate() {
        let mut point_cfg = cfg.at_axis_value(SweepAxis::Tau, tau)?;
        point_cfg.master_seed = derive_point_seed(cfg.master_seed, idx);
        let point = resolve(&point_cfg)?;
        let table = run_point(&point)?;
        let est = pearson(&table.sig1, &table.sig2, &point.detrend)?;
        let n = table.n_shots() as f64;
        let c1 = (table.phi1.iter().map(|p| p.cos()).sum::<f64>() / n).clamp(1e-6, 1.0);
        let c2 = (table.phi2.iter().map(|p| p.cos()).sum::<f64>() / n).clamp(1e-6, 1.0);
        let n_pulses = point.seq1.n_pulses.max(1);
        let t = n_pulses as f64 * tau;
        let sp = crate::theory::reconstruct_correlated_spectrum(
            est.r,
            c1,
            c2,
            point.sigma_r1 * point.sigma_r2,
            tau,
            n_pulses,
            crate::theory::COHERENCE_FLOOR_DEFAULT,
        )?;
        let s1 = -c1.ln() * std::f64::consts::PI / t;
        let s2 = -c2.ln() * std::f64::consts::PI / t;
        rows.push(ReconstructRow {
            frequency: sp.frequency,
            tau,
            r: est.r,
            sigma_r: est.sigma_r,
            c1,
            c2,
            s_c: sp.s_c,
            s1,
            s2,
            s_l1: s1 - sp.s_c,
            s_l2: s2 - sp.s_c,
            reliable: sp.reliable,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::tests::MINIMAL;

    fn minimal() -> ExperimentConfig {
        ExperimentConfig::from_toml_str(MINIMAL).unwrap()
    }

    #[test]
    fn null_pipeline_gives_null_correlation() {
        let mut cfg = minimal();
        cfg.n_shots = 100_000;
        let (table, report) = run(&cfg).unwrap();
        assert!(table.phi1.iter().all(|&p| p == 0.0));
        let theory = report.theory.unwrap();
        assert_eq!(theory.r_ideal, 0.0);
        assert!(
            report.estimate.r.abs() < 4.0 * report.estimate.sigma_r,
            "null r = {} vs sigma {}",
            report.estimate.r,
            report.estimate.sigma_r
        );
    }

    #[test]
    fn replay_is_bit_identical_across_thread_counts() {
        let mut cfg = minimal();
        cfg.n_shots = 2_000;
        cfg.sources.common = NoiseSourceSpec::random_phase_ac(2e-6, 2.0e6, 0.0, 11);
        let point = resolve(&cfg).unwrap();
        let run_with = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| run_point(&point).unwrap())
        };
        let a = run_with(1);
        let b = run_with(4);
        assert_eq!(a, b);
    }

    #[test]
    fn shared_tone_matches_bessel_prediction() {
        let mut cfg = minimal();
        cfg.n_shots = 200_000;
        // resonant with tau = 250 ns
        cfg.sources.common = NoiseSourceSpec::random_phase_ac(0.8e-6, 2.0e6, 0.0, 11);
        let (_, report) = run(&cfg).unwrap();
        let theory = report.theory.unwrap();
        assert_eq!(theory.model, "bessel");
        assert!(theory.r_ideal > 0.05, "want a clearly nonzero signal");
        assert!(
            report.residual.unwrap().abs() < 4.0,
            "r = {} theory = {} residual = {:?}",
            report.estimate.r,
            theory.r_observed,
            report.residual
        );
    }

    #[test]
    fn coherence_targets_realize_requested_contrast() {
        let mut cfg = minimal();
        cfg.n_shots = 100_000;
        cfg.coherence = Some(CoherenceTargets {
            targets: [0.9, 0.6],
        });
        let point = resolve(&cfg).unwrap();
        let table = run_point(&point).unwrap();
        let n = table.n_shots() as f64;
        let c1 = table.phi1.iter().map(|p| p.cos()).sum::<f64>() / n;
        let c2 = table.phi2.iter().map(|p| p.cos()).sum::<f64>() / n;
        assert!((c1 - 0.9).abs() < 0.01, "c1 = {c1}");
        assert!((c2 - 0.6).abs() < 0.01, "c2 = {c2}");
        // local dephasing alone produces no covariance
        let est = pearson(&table.sig1, &table.sig2, &point.detrend).unwrap();
        assert!(est.r.abs() < 4.0 * est.sigma_r);
    }

    #[test]
    fn sweep_uses_independent_seeds_per_point() {
        let mut cfg = minimal();
        cfg.n_shots = 2_000;
        cfg.sources.common = NoiseSourceSpec::random_phase_ac(0.8e-6, 2.0e6, 0.0, 11);
        cfg.sweep = Some(crate::harness::config::SweepConfig {
            axis: SweepAxis::B0,
            values: vec![0.8e-6, 0.8e-6],
        });
        let result = run_sweep(&cfg).unwrap();
        assert_eq!(result.points.len(), 2);
        // identical physics, distinct seeds: estimates must differ
        assert_ne!(result.points[0].estimate.r, result.points[1].estimate.r);
    }

    #[test]
    fn throughput_exceeds_target_on_analytic_path() {
        let mut cfg = minimal();
        cfg.n_shots = 400_000;
        cfg.sources.common = NoiseSourceSpec::random_phase_ac(0.8e-6, 2.0e6, 0.0, 11);
        let (_, report) = run(&cfg).unwrap();
        assert!(
            report.shots_per_second > 1e5,
            "throughput {} shots/s",
            report.shots_per_second
        );
    }

    #[test]
    fn broadband_common_source_matches_gaussian_prediction() {
        let mut cfg = minimal();
        cfg.n_shots = 100_000;
        cfg.sources.common = NoiseSourceSpec::broadband(2.0e-18, 2.0e6, 11);
        let (_, report) = run(&cfg).unwrap();
        let theory = report.theory.unwrap();
        assert_eq!(theory.model, "gaussian");
        assert!(theory.r_ideal > 0.02);
        assert!(
            report.residual.unwrap().abs() < 4.0,
            "r = {} theory = {}",
            report.estimate.r,
            theory.r_observed
        );
    }
}
