//! Closed-form prediction engine.
//!
//! Every quantity the pipeline estimates by Monte Carlo has an analytic
//! counterpart here: ideal and readout-degraded correlations, SNR and
//! minimum detectable field noise, coherence decay from a spectral density,
//! pointwise spectral reconstruction, and the joint-cumulant scaling laws.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::TWO_PI;
use crate::measurement::ReadoutChannel;
use crate::sequence::{filter_weight, GyromagneticConstants};

/// Tags the normalization of a stored spectral density so a value can never
/// be consumed under the wrong factor-of-pi convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralConvention {
    /// One-sided density over linear frequency; magnetic noise in tesla^2/Hz.
    OneSidedPerHz,
    /// One-sided phase-noise density in the angular-argument form where the
    /// coherence decay is `chi = t * S(omega) / pi`. Units 1/s.
    OneSidedAngular,
}

/// Sampled one-sided spectral density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub frequencies: Vec<f64>,
    pub values: Vec<f64>,
    pub convention: SpectralConvention,
}

impl Spectrum {
    pub fn new(
        frequencies: Vec<f64>,
        values: Vec<f64>,
        convention: SpectralConvention,
    ) -> Result<Self> {
        if frequencies.len() != values.len() || frequencies.is_empty() {
            return Err(Error::EstimatorInput(
                "spectrum needs equal-length, non-empty frequency and value lists".into(),
            ));
        }
        if !frequencies.windows(2).all(|w| w[1] > w[0]) {
            return Err(Error::EstimatorInput(
                "spectrum frequencies must be strictly increasing".into(),
            ));
        }
        if values.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::EstimatorInput(
                "spectral density values must be finite and >= 0".into(),
            ));
        }
        Ok(Self {
            frequencies,
            values,
            convention,
        })
    }

    /// Linear interpolation; errors outside the sampled band.
    pub fn value_at(&self, f: f64) -> Result<f64> {
        let fs = &self.frequencies;
        if f < fs[0] || f > *fs.last().unwrap() {
            return Err(Error::SpectrumCoverage(f));
        }
        let idx = fs.partition_point(|x| *x < f);
        if idx == 0 {
            return Ok(self.values[0]);
        }
        let (f0, f1) = (fs[idx - 1], fs[idx.min(fs.len() - 1)]);
        if f1 == f0 {
            return Ok(self.values[idx - 1]);
        }
        let w = (f - f0) / (f1 - f0);
        Ok(self.values[idx - 1] * (1.0 - w) + self.values[idx.min(fs.len() - 1)] * w)
    }

    /// Converts a magnetic density (tesla^2/Hz) into the angular-argument
    /// phase-noise form, defined so that `chi = t S(omega) / pi` reproduces
    /// the exact first-harmonic filter integral for a slowly varying
    /// density: `S(omega) = 8 pi gamma_e^2 S_B(f)`.
    pub fn to_angular(&self, consts: &GyromagneticConstants) -> Spectrum {
        match self.convention {
            SpectralConvention::OneSidedAngular => self.clone(),
            SpectralConvention::OneSidedPerHz => {
                let g2 = consts.gamma_e * consts.gamma_e;
                Spectrum {
                    frequencies: self.frequencies.clone(),
                    values: self
                        .values
                        .iter()
                        .map(|v| 8.0 * std::f64::consts::PI * g2 * v)
                        .collect(),
                    convention: SpectralConvention::OneSidedAngular,
                }
            }
        }
    }
}

/// Coherence losses entering the correlation formulas, as accumulated
/// exponents at the operating sequence time.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DecoherenceModel {
    pub chi_local_1: f64,
    pub chi_local_2: f64,
    pub chi_common: f64,
}

impl DecoherenceModel {
    pub fn from_factors(c1: f64, c2: f64) -> Result<Self> {
        for (label, c) in [("C1", c1), ("C2", c2)] {
            if !(c > 0.0 && c <= 1.0) {
                return Err(Error::EstimatorInput(format!(
                    "coherence factor {label} must be in (0, 1], got {c}"
                )));
            }
        }
        Ok(Self {
            chi_local_1: -c1.ln(),
            chi_local_2: -c2.ln(),
            chi_common: 0.0,
        })
    }

    /// Exponential shortcut: both sensors decay as `exp(-t/T2)`.
    pub fn from_t2(t: f64, t2: f64) -> Self {
        Self {
            chi_local_1: t / t2,
            chi_local_2: t / t2,
            chi_common: 0.0,
        }
    }

    pub fn c1(&self) -> f64 {
        (-self.chi_local_1).exp()
    }

    pub fn c2(&self) -> f64 {
        (-self.chi_local_2).exp()
    }
}

/// Prediction bundle exported next to every simulated point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryPrediction {
    pub r_ideal: f64,
    pub r_observed: f64,
    pub snr: f64,
    pub sigma_r1: f64,
    pub sigma_r2: f64,
    /// Which closed form produced `r_ideal`.
    pub model: String,
}

/// `r_ideal = exp(-(chi1 + chi2)) <sin phi_C1 sin phi_C2>`.
pub fn r_ideal_general(chi1: f64, chi2: f64, sin_sin_expect: f64) -> f64 {
    debug_assert!(sin_sin_expect.abs() <= 1.0 + 1e-12);
    (-(chi1 + chi2)).exp() * sin_sin_expect
}

/// Gaussian correlated phases, equal on both sensors:
/// `r = 1/2 exp(-(chi1 + chi2)) (1 - exp(-2 sigma^2))`.
pub fn r_ideal_gaussian(chi1: f64, chi2: f64, sigma_phi_c_sq: f64) -> f64 {
    debug_assert!(sigma_phi_c_sq >= 0.0);
    0.5 * (-(chi1 + chi2)).exp() * (1.0 - (-2.0 * sigma_phi_c_sq).exp())
}

/// Bessel argument of a coherent tone `B0 cos(2 pi f t + psi)` seen through
/// the sequence filter: twice the per-shot phase amplitude.
fn bessel_argument(b0: f64, f: f64, tau: f64, n_pulses: u32, consts: &GyromagneticConstants) -> f64 {
    let t = n_pulses as f64 * tau;
    let w = filter_weight(f, tau, n_pulses).abs();
    2.0 * TWO_PI * consts.gamma_e * b0 * w * t
}

/// Random-phase tone with equal coupling to both sensors:
/// `r = 1/2 exp(-(chi1 + chi2)) [1 - J0(arg)]`.
pub fn r_ideal_bessel(
    chi1: f64,
    chi2: f64,
    b0: f64,
    f: f64,
    tau: f64,
    n_pulses: u32,
    consts: &GyromagneticConstants,
) -> f64 {
    let arg = bessel_argument(b0, f, tau, n_pulses, consts);
    0.5 * (-(chi1 + chi2)).exp() * (1.0 - bessel_j0(arg))
}

/// Cauchy (Lorentzian-line) frequency weighting for a broadened tone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineShape {
    pub center: f64,
    pub fwhm: f64,
    /// Symmetric truncation half-width of the weighting window.
    pub half_width: f64,
}

impl LineShape {
    /// Window used by the per-shot detuning draw: `min(3 fwhm, 0.95 center)`.
    pub fn truncated(center: f64, fwhm: f64) -> Self {
        Self {
            center,
            fwhm,
            half_width: (3.0 * fwhm).min(0.95 * center),
        }
    }
}

/// Line-broadened Bessel prediction: averages `1 - J0(arg(f))` over the
/// truncated Cauchy weight with 201-point Gauss-Legendre quadrature.
pub fn r_ideal_bessel_broadened(
    chi1: f64,
    chi2: f64,
    b0: f64,
    line: &LineShape,
    tau: f64,
    n_pulses: u32,
    consts: &GyromagneticConstants,
) -> f64 {
    if line.fwhm <= 0.0 {
        return r_ideal_bessel(chi1, chi2, b0, line.center, tau, n_pulses, consts);
    }
    // The integrand oscillates on the filter-lobe scale 1/t, so a single
    // Gauss-Legendre rule over the window aliases badly. Use composite
    // 21-point panels no wider than an eighth of a lobe.
    let t = n_pulses.max(1) as f64 * tau;
    let span = 2.0 * line.half_width;
    let panels = ((span * t * 8.0).ceil() as usize).clamp(5, 4000);
    let (nodes, weights) = gauss_legendre(21);
    let gamma_half = 0.5 * line.fwhm;
    let mut num = 0.0;
    let mut den = 0.0;
    for p in 0..panels {
        let lo = line.center - line.half_width + span * p as f64 / panels as f64;
        let hw = 0.5 * span / panels as f64;
        for (x, w) in nodes.iter().zip(&weights) {
            let f = lo + hw * (1.0 + x);
            let cauchy = 1.0 / (1.0 + ((f - line.center) / gamma_half).powi(2));
            let arg = bessel_argument(b0, f, tau, n_pulses, consts);
            num += w * hw * cauchy * (1.0 - bessel_j0(arg));
            den += w * hw * cauchy;
        }
    }
    0.5 * (-(chi1 + chi2)).exp() * num / den
}

/// Readout penalty: `r_observed = r_ideal / (sigma_R1 sigma_R2)`. For a
/// symmetric threshold channel this reduces to the fidelity product
/// `(2 F1 - 1)(2 F2 - 1) r_ideal`.
pub fn apply_readout_penalty(
    r_ideal: f64,
    channel1: &ReadoutChannel,
    channel2: &ReadoutChannel,
) -> Result<f64> {
    let s1 = channel1.readout_noise()?;
    let s2 = channel2.readout_noise()?;
    Ok(r_ideal / (s1 * s2))
}

/// Correlation SNR after `T_total` of averaging at a Gaussian common-mode
/// field of rms `sigma_B`: `sqrt(N) r_observed` with
/// `N = T / (t + t_R)` and the exponential-T2 coherence shortcut.
pub fn correlation_snr(
    sigma_r: f64,
    t2: f64,
    t: f64,
    t_r: f64,
    t_total: f64,
    sigma_b: f64,
    consts: &GyromagneticConstants,
) -> f64 {
    let n = t_total / (t + t_r);
    let arg = 4.0 * consts.gamma_e * consts.gamma_e * t * sigma_b * sigma_b / std::f64::consts::PI;
    let r_obs = 0.5 * (1.0 - (-arg).exp()) * (-2.0 * t / t2).exp() / (sigma_r * sigma_r);
    2.0 * n.sqrt() * r_obs
}

/// Minimum detectable Gaussian field noise after `T_total` of averaging:
/// `sigma_B_min^2 = -(pi Hz)/(4 gamma_e^2 t) ln(1 - 2 sigma_R^2 e^{2t/T2} / sqrt(T/(t+t_R)))`.
pub fn min_detectable_noise(
    sigma_r: f64,
    t2: f64,
    t: f64,
    t_r: f64,
    t_total: f64,
    consts: &GyromagneticConstants,
) -> Result<f64> {
    let n = t_total / (t + t_r);
    let arg = 1.0 - 2.0 * sigma_r * sigma_r * (2.0 * t / t2).exp() / n.sqrt();
    if arg <= 0.0 {
        return Err(Error::UnreachableSensitivity {
            min_total_time: required_total_time_unit_arg(sigma_r, t2, t, t_r),
        });
    }
    let g2 = consts.gamma_e * consts.gamma_e;
    let sigma_sq = -(std::f64::consts::PI) / (4.0 * g2 * t) * arg.ln();
    Ok(sigma_sq.sqrt())
}

/// Smallest averaging time at which any noise level becomes detectable
/// (the ln argument reaches zero).
fn required_total_time_unit_arg(sigma_r: f64, t2: f64, t: f64, t_r: f64) -> f64 {
    let x = 2.0 * sigma_r * sigma_r * (2.0 * t / t2).exp();
    (t + t_r) * x * x
}

/// Averaging time required to reach SNR = 1 on a Gaussian field noise of
/// rms `sigma_b` — the inversion of [`min_detectable_noise`].
pub fn required_total_time(
    sigma_r: f64,
    t2: f64,
    t: f64,
    t_r: f64,
    sigma_b: f64,
    consts: &GyromagneticConstants,
) -> f64 {
    let g2 = consts.gamma_e * consts.gamma_e;
    let x = 1.0 - (-4.0 * g2 * t * sigma_b * sigma_b / std::f64::consts::PI).exp();
    let y = 2.0 * sigma_r * sigma_r * (2.0 * t / t2).exp() / x;
    (t + t_r) * y * y
}

/// Coherence after the sequence under the delta-filter approximation:
/// `chi = (t/pi) S(omega)` at `omega = pi/tau`. Magnetic spectra are first
/// converted to the angular phase-noise form.
pub fn coherence_from_psd(
    s: &Spectrum,
    tau: f64,
    n_pulses: u32,
    consts: &GyromagneticConstants,
) -> Result<f64> {
    let angular = s.to_angular(consts);
    let f_res = 1.0 / (2.0 * tau);
    let value = angular.value_at(f_res)?;
    let t = n_pulses.max(1) as f64 * tau;
    Ok((-(t / std::f64::consts::PI) * value).exp())
}

/// Variance of the accumulated phase for a Gaussian field with one-sided
/// magnetic density `S_B(f)`:
/// `sigma_phi^2 = (2 pi gamma)^2 integral S_B(f) |W(f) t|^2 df`,
/// evaluated by trapezoid over the spectrum's own frequency grid.
pub fn phase_variance_from_psd(
    s: &Spectrum,
    tau: f64,
    n_pulses: u32,
    consts: &GyromagneticConstants,
) -> Result<f64> {
    if s.convention != SpectralConvention::OneSidedPerHz {
        return Err(Error::EstimatorInput(
            "phase_variance_from_psd needs a magnetic tesla^2/Hz spectrum".into(),
        ));
    }
    let t = n_pulses.max(1) as f64 * tau;
    let pref = (TWO_PI * consts.gamma_e).powi(2);
    let mut total = 0.0;
    for w in s
        .frequencies
        .iter()
        .zip(&s.values)
        .collect::<Vec<_>>()
        .windows(2)
    {
        let (f0, v0) = (*w[0].0, *w[0].1);
        let (f1, v1) = (*w[1].0, *w[1].1);
        let y0 = (filter_weight(f0, tau, n_pulses) * t).powi(2);
        let y1 = (filter_weight(f1, tau, n_pulses) * t).powi(2);
        total += 0.5 * (v0 * y0 + v1 * y1) * (f1 - f0);
    }
    Ok(pref * total)
}

/// Pointwise spectral reconstruction at `f = 1/(2 tau)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumPoint {
    pub frequency: f64,
    pub s_c: f64,
    /// False when `C1 C2` fell below the reliability floor.
    pub reliable: bool,
}

pub const COHERENCE_FLOOR_DEFAULT: f64 = 1e-3;

/// `S_C = (pi / 2t) asinh(sigma_R^2 r / (C1 C2))` with `t = n tau`.
pub fn reconstruct_correlated_spectrum(
    r: f64,
    c1: f64,
    c2: f64,
    sigma_r_product: f64,
    tau: f64,
    n_pulses: u32,
    coherence_floor: f64,
) -> Result<SpectrumPoint> {
    for (label, c) in [("C1", c1), ("C2", c2)] {
        if !(c > 0.0 && c <= 1.0) {
            return Err(Error::EstimatorInput(format!(
                "{label} must be in (0, 1], got {c}"
            )));
        }
    }
    if !r.is_finite() {
        return Err(Error::EstimatorInput("r must be finite".into()));
    }
    let t = n_pulses.max(1) as f64 * tau;
    let x = sigma_r_product * r / (c1 * c2);
    Ok(SpectrumPoint {
        frequency: 1.0 / (2.0 * tau),
        s_c: std::f64::consts::PI / (2.0 * t) * stable_asinh(x),
        reliable: c1 * c2 >= coherence_floor,
    })
}

/// Forward form: `r = (1/sigma_R^2) C1 C2 sinh(2 t S_C / pi)`.
pub fn forward_correlation_from_spectrum(
    s_c: f64,
    c1: f64,
    c2: f64,
    sigma_r_product: f64,
    tau: f64,
    n_pulses: u32,
) -> f64 {
    let t = n_pulses.max(1) as f64 * tau;
    c1 * c2 * (2.0 * t * s_c / std::f64::consts::PI).sinh() / sigma_r_product
}

/// `asinh` with an explicit small-argument series so the inverse pair stays
/// exact to 1e-12 even when `x` underflows the log form's precision.
pub fn stable_asinh(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        let x2 = x * x;
        x * (1.0 - x2 / 6.0 + 3.0 * x2 * x2 / 40.0)
    } else {
        x.asinh()
    }
}

/// Phase statistics accepted by the cumulant predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseDistribution {
    /// Zero-mean Gaussian phase of the given variance (radians^2).
    Gaussian { sigma_sq: f64 },
    /// Any symmetric distribution supplied through its sine moments
    /// `<sin^k phi>` for k = 1..=N.
    SineMoments { moments: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CumulantPrediction {
    pub order: u32,
    /// `kappa_tilde_N = 2^N kappa_N = <sin^N phi>` under independence-arranged
    /// parity patterns.
    pub kappa_tilde: f64,
    /// Sensitivity relative to a single sensor: `sqrt(N) / 2^(N-1)`.
    pub sensitivity_factor: f64,
}

/// Closed-form `<sin^N phi>` for a zero-mean Gaussian phase.
pub fn gaussian_sine_moment(order: u32, sigma_sq: f64) -> f64 {
    if order % 2 == 1 {
        return 0.0;
    }
    // sin^N = (2i)^-N sum_k C(N,k) (-1)^(N-k) e^{i(2k-N)phi};
    // <e^{i m phi}> = exp(-m^2 sigma^2 / 2).
    let n = order as i64;
    let mut sum = 0.0;
    let mut binom = 1.0f64;
    for k in 0..=n {
        let m = (2 * k - n) as f64;
        let sign = if (n - k) % 2 == 0 { 1.0 } else { -1.0 };
        sum += sign * binom * (-0.5 * m * m * sigma_sq).exp();
        binom = binom * (n - k) as f64 / (k + 1) as f64;
    }
    // (2i)^-N for even N contributes (-1)^(N/2) / 2^N.
    let phase = if (n / 2) % 2 == 0 { 1.0 } else { -1.0 };
    phase * sum / 2f64.powi(order as i32)
}

pub fn cumulant_prediction(order: u32, dist: &PhaseDistribution) -> Result<CumulantPrediction> {
    if order < 2 {
        return Err(Error::EstimatorInput(format!(
            "cumulant order must be >= 2, got {order}"
        )));
    }
    let kappa_tilde = match dist {
        PhaseDistribution::Gaussian { sigma_sq } => gaussian_sine_moment(order, *sigma_sq),
        PhaseDistribution::SineMoments { moments } => *moments
            .get(order as usize - 1)
            .ok_or_else(|| Error::EstimatorInput("missing sine moment for order".into()))?,
    };
    Ok(CumulantPrediction {
        order,
        kappa_tilde,
        sensitivity_factor: (order as f64).sqrt() / 2f64.powi(order as i32 - 1),
    })
}

/// Bessel function of the first kind, order zero.
pub fn bessel_j0(x: f64) -> f64 {
    libm::j0(x)
}

/// Inverse of J0 on its first monotone branch [0, j_{0,1}]: the argument at
/// which `J0(a) = c` for `c` in (0, 1]. Used to calibrate dephasing tones
/// to a target coherence factor.
pub fn bessel_j0_inverse(c: f64) -> Result<f64> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::EstimatorInput(format!(
            "J0 inverse needs a value in (0, 1], got {c}"
        )));
    }
    let (mut lo, mut hi) = (0.0f64, 2.404_825_557_695_773);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if bessel_j0(mid) > c {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Gauss-Legendre nodes and weights on [-1, 1], by Newton iteration on the
/// Legendre recurrence.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Chebyshev-based initial guess.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}
