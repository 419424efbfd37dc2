//! Pulse sequences and phase accumulation.
//!
//! A dynamical-decoupling sequence turns the sensor into a band-pass filter
//! of the field: between instantaneous pi pulses the accumulated phase picks
//! up the field with alternating sign (the toggling function). The phase of
//! one shot is `2 pi gamma_e * integral B(t) y(t) dt` over the sequence
//! window.

use num_complex_like::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{FieldTrace, ToneShot, TWO_PI};

// rustfft re-exports num-complex; alias it so the sequence module does not
// need a separate dependency.
mod num_complex_like {
    pub type Complex64 = rustfft::num_complex::Complex<f64>;
}

/// Gyromagnetic ratios in linear-frequency units (Hz/T).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GyromagneticConstants {
    pub gamma_e: f64,
    pub gamma_n15: f64,
}

impl Default for GyromagneticConstants {
    fn default() -> Self {
        Self {
            gamma_e: 28.024e9,
            gamma_n15: -4.3e6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceKind {
    Xy8,
    Cp,
    Ramsey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitParity {
    #[default]
    Parallel,
    Antiparallel,
}

/// Validated description of one sensor's pulse sequence.
///
/// Pi pulses are instantaneous and centered at `t_delay + (k - 1/2) tau`
/// for `k = 1..n_pulses`. For `Ramsey` (zero pulses) `tau` is the free
/// precession time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub kind: SequenceKind,
    pub tau: f64,
    pub n_pulses: u32,
    pub t_delay: f64,
    /// Phase of the final pi/2 pulse relative to the first, radians.
    /// pi/2 places the mean phase on the equator, the covariance-detection
    /// working point.
    pub final_pulse_phase: f64,
    pub init_parity: InitParity,
    /// +1 for the 0 -> +1 transition branch, -1 for 0 -> -1.
    pub transition_sign: i8,
}

pub fn build_sequence(
    kind: SequenceKind,
    tau: f64,
    n_pulses: u32,
    t_delay: f64,
    init_parity: InitParity,
    transition_sign: i8,
) -> Result<SequenceSpec> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidSequence(format!(
            "tau must be positive, got {tau}"
        )));
    }
    if t_delay < 0.0 || !t_delay.is_finite() {
        return Err(Error::InvalidSequence(format!(
            "t_delay must be >= 0, got {t_delay}"
        )));
    }
    if transition_sign != 1 && transition_sign != -1 {
        return Err(Error::InvalidSequence(format!(
            "transition_sign must be +1 or -1, got {transition_sign}"
        )));
    }
    match kind {
        SequenceKind::Xy8 => {
            if n_pulses == 0 || n_pulses % 8 != 0 {
                return Err(Error::InvalidSequence(format!(
                    "XY8 needs a positive multiple of 8 pulses, got {n_pulses}"
                )));
            }
        }
        SequenceKind::Cp => {
            if n_pulses == 0 {
                return Err(Error::InvalidSequence("CP needs at least one pulse".into()));
            }
        }
        SequenceKind::Ramsey => {
            if n_pulses != 0 {
                return Err(Error::InvalidSequence(format!(
                    "Ramsey is a zero-pulse sequence, got {n_pulses} pulses"
                )));
            }
        }
    }
    Ok(SequenceSpec {
        kind,
        tau,
        n_pulses,
        t_delay,
        final_pulse_phase: std::f64::consts::FRAC_PI_2,
        init_parity,
        transition_sign,
    })
}

impl SequenceSpec {
    /// Phase integration time: `n_pulses * tau`, or `tau` for Ramsey.
    pub fn total_time(&self) -> f64 {
        if self.n_pulses == 0 {
            self.tau
        } else {
            self.n_pulses as f64 * self.tau
        }
    }

    pub fn window(&self) -> (f64, f64) {
        (self.t_delay, self.t_delay + self.total_time())
    }

    /// Pi-pulse center times.
    pub fn pulse_times(&self) -> impl Iterator<Item = f64> + '_ {
        (1..=self.n_pulses).map(move |k| self.t_delay + (k as f64 - 0.5) * self.tau)
    }

    /// Sign applied to the accumulated phase: transition branch times
    /// initialization parity. Antiparallel initialization is equivalent to
    /// negating the sensor's effective phase.
    pub fn phase_sign(&self) -> f64 {
        let parity = match self.init_parity {
            InitParity::Parallel => 1.0,
            InitParity::Antiparallel => -1.0,
        };
        f64::from(self.transition_sign) * parity
    }

    /// Constant-sign integration segments `(start, end, sign)` covering the
    /// sequence window.
    pub fn segments(&self) -> Vec<(f64, f64, f64)> {
        let (start, end) = self.window();
        let mut edges = vec![start];
        edges.extend(self.pulse_times());
        edges.push(end);
        let mut sign = 1.0;
        let mut out = Vec::with_capacity(edges.len() - 1);
        for w in edges.windows(2) {
            out.push((w[0], w[1], sign));
            sign = -sign;
        }
        out
    }

    pub fn toggling_profile(&self) -> TogglingProfile {
        TogglingProfile {
            switch_times: self.pulse_times().collect(),
            initial_sign: 1,
            window: self.window(),
        }
    }
}

/// The +-1 modulation the sequence applies to field integration.
#[derive(Debug, Clone, PartialEq)]
pub struct TogglingProfile {
    pub switch_times: Vec<f64>,
    pub initial_sign: i8,
    pub window: (f64, f64),
}

/// Toggling function value at time `t`: 0 outside the sequence window,
/// otherwise +-1 flipping at each pulse center.
pub fn toggling(seq: &SequenceSpec, t: f64) -> i8 {
    let (start, end) = seq.window();
    if t < start || t > end {
        return 0;
    }
    let mut flips = 0u32;
    for p in seq.pulse_times() {
        if p <= t {
            flips += 1;
        } else {
            break;
        }
    }
    if flips % 2 == 0 {
        1
    } else {
        -1
    }
}

/// Accumulated sensing phase in radians:
/// `phase_sign * 2 pi gamma_e * integral B(t) y(t) dt`.
///
/// The integral evaluates a cubic interpolant of the sampled trace exactly
/// on each constant-sign segment, so segment boundaries that fall inside a
/// sample cell are handled without bias.
pub fn accumulate_phase(
    field: &FieldTrace,
    seq: &SequenceSpec,
    consts: &GyromagneticConstants,
) -> Result<f64> {
    let (start, end) = seq.window();
    if !field.grid.covers(start, end) {
        return Err(Error::GridCoverage { start, end });
    }
    let mut integral = 0.0;
    for (a, b, sign) in seq.segments() {
        integral += sign * integrate_trace(field, a, b);
    }
    Ok(seq.phase_sign() * TWO_PI * consts.gamma_e * integral)
}

/// Integral of the trace's Catmull-Rom interpolant over `[a, b]`.
fn integrate_trace(field: &FieldTrace, a: f64, b: f64) -> f64 {
    let grid = &field.grid;
    let n = grid.n_samples;
    let samples = &field.samples;
    // Node k sits at grid.sample_time(k); spans run between consecutive nodes.
    // Convert to span coordinates: u = (t - t0)/dt with t0 the first node.
    let t0 = grid.sample_time(0);
    let ua = (a - t0) / grid.dt;
    let ub = (b - t0) / grid.dt;
    let sample = |i: isize| -> f64 {
        let i = i.clamp(0, n as isize - 1) as usize;
        samples[i]
    };
    let mut total = 0.0;
    let first_span = ua.floor() as isize;
    let last_span = (ub.ceil() as isize - 1).max(first_span);
    for span in first_span..=last_span {
        let lo = (ua - span as f64).max(0.0).min(1.0);
        let hi = (ub - span as f64).max(0.0).min(1.0);
        if hi <= lo {
            continue;
        }
        // Catmull-Rom coefficients on [0, 1] through nodes span-1 .. span+2.
        let p0 = sample(span - 1);
        let p1 = sample(span);
        let p2 = sample(span + 1);
        let p3 = sample(span + 2);
        let c0 = p1;
        let c1 = 0.5 * (p2 - p0);
        let c2 = p0 - 2.5 * p1 + 2.0 * p2 - 0.5 * p3;
        let c3 = 0.5 * (p3 - p0) + 1.5 * (p1 - p2);
        let anti = |u: f64| {
            let u2 = u * u;
            c0 * u + 0.5 * c1 * u2 + c2 * u2 * u / 3.0 + 0.25 * c3 * u2 * u2
        };
        total += anti(hi) - anti(lo);
    }
    total * grid.dt
}

/// Exact `integral y(t) exp(i 2 pi f t) dt` over the sequence window.
/// Its magnitude equals `|filter_weight| * total_time` for zero delay; the
/// complex value carries the delay-dependent phase used by the analytic
/// tone path.
pub fn tone_quadrature(seq: &SequenceSpec, f: f64) -> Complex64 {
    if f == 0.0 {
        let sum: f64 = seq
            .segments()
            .iter()
            .map(|(a, b, s)| s * (b - a))
            .sum();
        return Complex64::new(sum, 0.0);
    }
    let w = TWO_PI * f;
    let mut z = Complex64::new(0.0, 0.0);
    for (a, b, sign) in seq.segments() {
        let ea = Complex64::new(0.0, w * a).exp();
        let eb = Complex64::new(0.0, w * b).exp();
        // integral exp(i w t) dt = (exp(i w b) - exp(i w a)) / (i w)
        z += (eb - ea) / Complex64::new(0.0, w) * sign;
    }
    z
}

/// Analytic phase for a pure-tone field `B0 cos(2 pi f t + psi0)`:
/// `phase_sign * 2 pi gamma_e * B0 * Re[exp(i psi0) Z(f)]`.
pub fn tone_phase(tone: &ToneShot, seq: &SequenceSpec, consts: &GyromagneticConstants) -> f64 {
    let z = tone_quadrature(seq, tone.frequency);
    let rotated = Complex64::new(0.0, tone.psi0).exp() * z;
    seq.phase_sign() * TWO_PI * consts.gamma_e * tone.amplitude * rotated.re
}

/// Band-pass weight of a CP/XY8 sequence at frequency `f`:
/// `sinc(pi f n tau) * (1 - sec(pi f tau))` with the singular points of
/// `sec` resolved by their finite limit (magnitude `2/pi` at `f = 1/(2 tau)`).
pub fn filter_weight(f: f64, tau: f64, n_pulses: u32) -> f64 {
    let n = n_pulses as f64;
    if f == 0.0 {
        return 0.0;
    }
    let x = std::f64::consts::PI * f * tau;
    let nx = n * x;
    let sinc = if nx.abs() < 1e-12 { 1.0 } else { nx.sin() / nx };
    let cos_x = x.cos();
    if cos_x.abs() < 1e-8 && nx.sin().abs() < 1e-6 {
        // 0/0 at odd multiples of pi/2: evaluate the limit of
        // sin(nx)(cos x - 1)/(n x cos x).
        return (nx.cos()) / (x * x.sin());
    }
    sinc * (1.0 - 1.0 / cos_x)
}

/// Filter-function harmonic of the intrinsic 15N hyperfine interaction:
/// `f_k = (2 gamma_n15 B0 + 3.05 MHz) / (2 k)`.
pub fn hyperfine_harmonic(b0_static: f64, k: u32, consts: &GyromagneticConstants) -> f64 {
    assert!(k >= 1, "harmonic index must be >= 1");
    (2.0 * consts.gamma_n15 * b0_static + 3.05e6) / (2.0 * k as f64)
}
