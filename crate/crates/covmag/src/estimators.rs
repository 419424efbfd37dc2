//! Correlation and cumulant estimators over raw shot signals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sequential block-mean subtraction, removing slow drifts far below the
/// shot rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetrendSpec {
    pub enabled: bool,
    pub block_size: usize,
}

impl Default for DetrendSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            block_size: 1000,
        }
    }
}

impl DetrendSpec {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            block_size: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size < 2 {
            return Err(Error::EstimatorInput(format!(
                "detrend block_size must be >= 2, got {}",
                self.block_size
            )));
        }
        Ok(())
    }
}

/// Subtracts the mean of each `block_size` chunk; a trailing partial block
/// uses its own mean. Idempotent.
pub fn detrend(signals: &[f64], spec: &DetrendSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    if !spec.enabled {
        return Ok(signals.to_vec());
    }
    let mut out = Vec::with_capacity(signals.len());
    for chunk in signals.chunks(spec.block_size) {
        let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
        out.extend(chunk.iter().map(|s| s - mean));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEstimate {
    pub r: f64,
    /// Fisher-approximation uncertainty `tanh(1/sqrt(N-3))`, from the raw
    /// shot count (about `1/sqrt(N)` for large N).
    pub sigma_r: f64,
    pub n_effective: usize,
    pub detrend: DetrendSpec,
}

pub fn sigma_r_of(n: usize) -> f64 {
    (1.0 / ((n as f64) - 3.0).sqrt()).tanh()
}

struct CoMoments {
    n: usize,
    mean1: f64,
    mean2: f64,
    m2_1: f64,
    m2_2: f64,
    co: f64,
}

/// Single-pass (Welford-style) means, variances and covariance; stable at
/// 10^8 shots.
fn co_moments(s1: &[f64], s2: &[f64]) -> CoMoments {
    let mut m = CoMoments {
        n: 0,
        mean1: 0.0,
        mean2: 0.0,
        m2_1: 0.0,
        m2_2: 0.0,
        co: 0.0,
    };
    for (x, y) in s1.iter().zip(s2) {
        m.n += 1;
        let k = m.n as f64;
        let d1 = x - m.mean1;
        let d2 = y - m.mean2;
        m.mean1 += d1 / k;
        m.mean2 += d2 / k;
        let d1b = x - m.mean1;
        let d2b = y - m.mean2;
        m.m2_1 += d1 * d1b;
        m.m2_2 += d2 * d2b;
        m.co += d1 * d2b;
    }
    m
}

/// Pearson correlation of the two raw signal lists after optional
/// detrending.
pub fn pearson(
    signals1: &[f64],
    signals2: &[f64],
    detrend_spec: &DetrendSpec,
) -> Result<CorrelationEstimate> {
    if signals1.len() != signals2.len() {
        return Err(Error::EstimatorInput(format!(
            "signal lists differ in length: {} vs {}",
            signals1.len(),
            signals2.len()
        )));
    }
    let n = signals1.len();
    if n < 4 {
        return Err(Error::EstimatorInput(format!(
            "need at least 4 shots for a correlation, got {n}"
        )));
    }
    let (d1, d2);
    let (s1, s2): (&[f64], &[f64]) = if detrend_spec.enabled {
        d1 = detrend(signals1, detrend_spec)?;
        d2 = detrend(signals2, detrend_spec)?;
        (&d1, &d2)
    } else {
        detrend_spec.validate()?;
        (signals1, signals2)
    };
    let m = co_moments(s1, s2);
    if m.m2_1 <= 0.0 || m.m2_2 <= 0.0 {
        return Err(Error::UndefinedCorrelation(
            "zero variance in a (detrended) signal list".into(),
        ));
    }
    Ok(CorrelationEstimate {
        r: m.co / (m.m2_1 * m.m2_2).sqrt(),
        sigma_r: sigma_r_of(n),
        n_effective: n,
        detrend: *detrend_spec,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagPoint {
    pub lag: usize,
    pub r: f64,
}

/// Shot-lag correlation `r(s) = Cov[S1(i), S2(i+s)] / (sigma1 sigma2)`,
/// normalized by the full-sample standard deviations at every lag.
/// `r(0)` coincides with [`pearson`].
pub fn lag_correlation(
    signals1: &[f64],
    signals2: &[f64],
    max_lag: usize,
    detrend_spec: &DetrendSpec,
) -> Result<Vec<LagPoint>> {
    let n = signals1.len();
    if signals2.len() != n || n < 4 {
        return Err(Error::EstimatorInput(
            "lag correlation needs two equal lists of >= 4 shots".into(),
        ));
    }
    if max_lag >= n / 10 {
        return Err(Error::EstimatorInput(format!(
            "max_lag {max_lag} must be below N/10 = {}",
            n / 10
        )));
    }
    let s1 = detrend(signals1, detrend_spec)?;
    let s2 = detrend(signals2, detrend_spec)?;
    let m = co_moments(&s1, &s2);
    if m.m2_1 <= 0.0 || m.m2_2 <= 0.0 {
        return Err(Error::UndefinedCorrelation(
            "zero variance in a (detrended) signal list".into(),
        ));
    }
    // population-normalized full-sample standard deviations
    let sig1 = (m.m2_1 / n as f64).sqrt();
    let sig2 = (m.m2_2 / n as f64).sqrt();
    let mut out = Vec::with_capacity(max_lag + 1);
    for s in 0..=max_lag {
        let mut cov = 0.0;
        for i in 0..n - s {
            cov += (s1[i] - m.mean1) * (s2[i + s] - m.mean2);
        }
        cov /= (n - s) as f64;
        out.push(LagPoint {
            lag: s,
            r: cov / (sig1 * sig2),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CumulantEstimate {
    pub order: u32,
    pub kappa: f64,
    /// `kappa / product of sample standard deviations`.
    pub kappa_normalized: f64,
    pub n_shots: usize,
}

/// Nth-order joint cumulant of N signal lists via the set-partition sum
/// `kappa = sum_pi (|pi|-1)! (-1)^(|pi|-1) prod_B E[prod_(i in B) x_i]`
/// over mean-centered data. Supports 2 <= N <= 6.
pub fn joint_cumulant(signal_lists: &[&[f64]]) -> Result<CumulantEstimate> {
    let order = signal_lists.len();
    if !(2..=6).contains(&order) {
        return Err(Error::EstimatorInput(format!(
            "joint cumulant supports orders 2..=6, got {order}"
        )));
    }
    let n = signal_lists[0].len();
    if n < 4 {
        return Err(Error::EstimatorInput("need at least 4 shots".into()));
    }
    if signal_lists.iter().any(|l| l.len() != n) {
        return Err(Error::EstimatorInput("signal lists differ in length".into()));
    }
    // center each list; cumulants of order >= 2 are shift invariant and the
    // centered raw-moment products stay well conditioned
    let centered: Vec<Vec<f64>> = signal_lists
        .iter()
        .map(|l| {
            let mean = l.iter().sum::<f64>() / n as f64;
            l.iter().map(|x| x - mean).collect()
        })
        .collect();
    let sigmas: Vec<f64> = centered
        .iter()
        .map(|l| (l.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt())
        .collect();
    if sigmas.iter().any(|s| *s <= 0.0) {
        return Err(Error::UndefinedCorrelation(
            "zero variance in a signal list".into(),
        ));
    }
    // moment of one block: E[prod_(i in B) x_i]
    let block_moment = |block: &[usize]| -> f64 {
        let mut sum = 0.0;
        for shot in 0..n {
            let mut p = 1.0;
            for &i in block {
                p *= centered[i][shot];
            }
            sum += p;
        }
        sum / n as f64
    };
    let mut kappa = 0.0;
    for partition in set_partitions(order) {
        let blocks = partition.len();
        let weight = factorial(blocks - 1) * if (blocks - 1) % 2 == 0 { 1.0 } else { -1.0 };
        let product: f64 = partition.iter().map(|b| block_moment(b)).product();
        kappa += weight * product;
    }
    Ok(CumulantEstimate {
        order: order as u32,
        kappa,
        kappa_normalized: kappa / sigmas.iter().product::<f64>(),
        n_shots: n,
    })
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|x| x as f64).product()
}

/// All set partitions of `{0, .., n-1}` (Bell-number many; 203 for n = 6).
fn set_partitions(n: usize) -> Vec<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    let mut current: Vec<Vec<usize>> = Vec::new();
    fn recurse(next: usize, n: usize, current: &mut Vec<Vec<usize>>, out: &mut Vec<Vec<Vec<usize>>>) {
        if next == n {
            out.push(current.clone());
            return;
        }
        for b in 0..current.len() {
            current[b].push(next);
            recurse(next + 1, n, current, out);
            current[b].pop();
        }
        current.push(vec![next]);
        recurse(next + 1, n, current, out);
        current.pop();
    }
    recurse(0, n, &mut current, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn rng(s: u64) -> rand_chacha::ChaCha8Rng {
        crate::rng::shot_rng(0xe5717, s)
    }

    #[test]
    fn identical_lists_give_unit_correlation() {
        let x: Vec<f64> = (0..100).map(|i| (i % 7) as f64).collect();
        let e = pearson(&x, &x, &DetrendSpec::disabled()).unwrap();
        assert!((e.r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn independent_bernoulli_null() {
        let n = 1_000_000;
        let mut r = rng(0);
        let a: Vec<f64> = (0..n).map(|_| f64::from(r.random::<bool>())).collect();
        let b: Vec<f64> = (0..n).map(|_| f64::from(r.random::<bool>())).collect();
        let e = pearson(&a, &b, &DetrendSpec::disabled()).unwrap();
        assert!(e.r.abs() < 3.0 * e.sigma_r, "r = {}", e.r);
        assert!((e.sigma_r - 1e-3).abs() < 3e-6);
    }

    #[test]
    fn sigma_r_formula() {
        assert!((sigma_r_of(1_000_000) - (1.0f64 / (999_997f64).sqrt()).tanh()).abs() < 1e-15);
        // 1/sqrt(N) approximation at large N
        assert!((sigma_r_of(1_000_000) * 1e3 - 1.0).abs() < 1e-2);
    }

    #[test]
    fn zero_variance_is_rejected() {
        let a = vec![1.0; 100];
        let b: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert!(matches!(
            pearson(&a, &b, &DetrendSpec::disabled()),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn detrending_is_idempotent() {
        let mut r = rng(1);
        let spec = DetrendSpec {
            enabled: true,
            block_size: 97,
        };
        let x: Vec<f64> = (0..1234)
            .map(|i| (i as f64 * 0.01).sin() * 5.0 + r.random::<f64>())
            .collect();
        let once = detrend(&x, &spec).unwrap();
        let twice = detrend(&once, &spec).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn partial_trailing_block_is_centered() {
        let spec = DetrendSpec {
            enabled: true,
            block_size: 4,
        };
        let x = vec![1.0, 2.0, 3.0, 4.0, 10.0, 12.0];
        let d = detrend(&x, &spec).unwrap();
        assert_eq!(&d[..4], &[-1.5, -0.5, 0.5, 1.5]);
        assert_eq!(&d[4..], &[-1.0, 1.0]);
    }

    #[test]
    fn streaming_matches_two_pass_reference() {
        let mut r = rng(2);
        let n = 10_000;
        let a: Vec<f64> = (0..n).map(|_| 1e6 + r.random::<f64>()).collect();
        let b: Vec<f64> = a
            .iter()
            .map(|x| 0.3 * (x - 1e6) + r.random::<f64>())
            .collect();
        let e = pearson(&a, &b, &DetrendSpec::disabled()).unwrap();
        // two-pass reference
        let ma = a.iter().sum::<f64>() / n as f64;
        let mb = b.iter().sum::<f64>() / n as f64;
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
        let r_ref = cov / (va * vb).sqrt();
        assert!((e.r - r_ref).abs() <= 1e-10 * r_ref.abs().max(1.0));
    }

    #[test]
    fn lag_zero_equals_pearson() {
        let mut r = rng(3);
        let a: Vec<f64> = (0..5000).map(|_| r.random::<f64>()).collect();
        let b: Vec<f64> = a.iter().map(|x| x + 0.5 * r.random::<f64>()).collect();
        let spec = DetrendSpec::default();
        let lags = lag_correlation(&a, &b, 10, &spec).unwrap();
        let e = pearson(&a, &b, &spec).unwrap();
        assert!((lags[0].r - e.r).abs() < 1e-12);
        assert_eq!(lags.len(), 11);
    }

    #[test]
    fn lag_on_identical_lists() {
        let x: Vec<f64> = (0..1000).map(|i| ((i * 37) % 11) as f64).collect();
        let lags = lag_correlation(&x, &x, 5, &DetrendSpec::disabled()).unwrap();
        assert!((lags[0].r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn white_noise_lags_are_null() {
        let mut r = rng(4);
        let n = 100_000;
        let phi: Vec<f64> = (0..n).map(|_| r.random::<f64>() - 0.5).collect();
        let a: Vec<f64> = phi
            .iter()
            .map(|p| f64::from(r.random::<f64>() < 0.5 + 0.4 * p))
            .collect();
        let b: Vec<f64> = phi
            .iter()
            .map(|p| f64::from(r.random::<f64>() < 0.5 + 0.4 * p))
            .collect();
        let lags = lag_correlation(&a, &b, 20, &DetrendSpec::disabled()).unwrap();
        let sigma = sigma_r_of(n);
        assert!(lags[0].r > 5.0 * sigma, "r(0) = {}", lags[0].r);
        let mut hits = 0;
        for p in &lags[1..] {
            if p.r.abs() > 3.0 * sigma {
                hits += 1;
            }
        }
        assert!(hits <= 1, "{hits} lags above 3 sigma");
    }

    #[test]
    fn max_lag_bound_enforced() {
        let x = vec![0.0, 1.0, 2.0, 1.5, 0.5, 1.2, 0.3, 0.9, 1.4, 0.1];
        assert!(lag_correlation(&x, &x, 1, &DetrendSpec::disabled()).is_err());
    }

    #[test]
    fn cumulant_order_two_equals_pearson() {
        let mut r = rng(5);
        let a: Vec<f64> = (0..10_000).map(|_| r.random::<f64>()).collect();
        let b: Vec<f64> = a.iter().map(|x| x * 0.4 + r.random::<f64>()).collect();
        let c = joint_cumulant(&[&a, &b]).unwrap();
        let e = pearson(&a, &b, &DetrendSpec::disabled()).unwrap();
        assert!((c.kappa_normalized - e.r).abs() < 1e-12);
        // kappa itself is the population covariance
        let ma = a.iter().sum::<f64>() / a.len() as f64;
        let mb = b.iter().sum::<f64>() / b.len() as f64;
        let cov: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - ma) * (y - mb))
            .sum::<f64>()
            / a.len() as f64;
        assert!((c.kappa - cov).abs() < 1e-12 * cov.abs().max(1.0));
    }

    #[test]
    fn third_cumulant_null_for_independent_lists() {
        let mut r = rng(6);
        let n = 200_000;
        let lists: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..n).map(|_| f64::from(r.random::<bool>())).collect())
            .collect();
        let c = joint_cumulant(&[&lists[0], &lists[1], &lists[2]]).unwrap();
        // each centered factor has sigma 1/2; MC sigma of the triple moment
        // is about (1/2)^3/sqrt(n)
        let mc_sigma = 0.125 / (n as f64).sqrt();
        assert!(c.kappa.abs() < 4.0 * mc_sigma, "kappa3 = {}", c.kappa);
    }

    #[test]
    fn fourth_cumulant_matches_brute_force_partitions() {
        let mut r = rng(7);
        let n = 2000;
        // deliberately dependent lists
        let base: Vec<f64> = (0..n).map(|_| r.random::<f64>() - 0.5).collect();
        let lists: Vec<Vec<f64>> = (0..4)
            .map(|k| {
                base.iter()
                    .map(|x| x * (1.0 + 0.3 * k as f64) + 0.2 * r.random::<f64>())
                    .collect()
            })
            .collect();
        let c = joint_cumulant(&[&lists[0], &lists[1], &lists[2], &lists[3]]).unwrap();

        // independent brute force with the 15 partitions of a 4-set written
        // out by hand
        let m = |idx: &[usize]| -> f64 {
            let means: Vec<f64> = lists
                .iter()
                .map(|l| l.iter().sum::<f64>() / n as f64)
                .collect();
            (0..n)
                .map(|s| idx.iter().map(|&i| lists[i][s] - means[i]).product::<f64>())
                .sum::<f64>()
                / n as f64
        };
        let m1234 = m(&[0, 1, 2, 3]);
        let pair = |a: &[usize], b: &[usize]| m(a) * m(b);
        let triple_single = m(&[0, 1, 2]) * m(&[3])
            + m(&[0, 1, 3]) * m(&[2])
            + m(&[0, 2, 3]) * m(&[1])
            + m(&[1, 2, 3]) * m(&[0]);
        let pairs = pair(&[0, 1], &[2, 3]) + pair(&[0, 2], &[1, 3]) + pair(&[0, 3], &[1, 2]);
        let pair_singles = m(&[0, 1]) * m(&[2]) * m(&[3])
            + m(&[0, 2]) * m(&[1]) * m(&[3])
            + m(&[0, 3]) * m(&[1]) * m(&[2])
            + m(&[1, 2]) * m(&[0]) * m(&[3])
            + m(&[1, 3]) * m(&[0]) * m(&[2])
            + m(&[2, 3]) * m(&[0]) * m(&[1]);
        let singles = m(&[0]) * m(&[1]) * m(&[2]) * m(&[3]);
        let brute =
            m1234 - triple_single - pairs + 2.0 * pair_singles - 6.0 * singles;
        assert!(
            (c.kappa - brute).abs() < 1e-12 * brute.abs().max(1.0),
            "{} vs {brute}",
            c.kappa
        );
    }

    #[test]
    fn partition_counts_are_bell_numbers() {
        assert_eq!(set_partitions(2).len(), 2);
        assert_eq!(set_partitions(3).len(), 5);
        assert_eq!(set_partitions(4).len(), 15);
        assert_eq!(set_partitions(6).len(), 203);
    }

    #[test]
    fn cumulant_order_bounds() {
        let x = vec![1.0, 2.0, 3.0, 4.0];
        assert!(joint_cumulant(&[&x]).is_err());
        let refs: Vec<&[f64]> = (0..7).map(|_| x.as_slice()).collect();
        assert!(joint_cumulant(&refs).is_err());
    }

    proptest! {
        #[test]
        fn pearson_is_scale_invariant(
            a in 0.1f64..10.0,
            b in -5.0f64..5.0,
            c in 0.1f64..10.0,
            d in -5.0f64..5.0,
            seed in 0u64..1000,
        ) {
            let mut r = rng(seed);
            let x: Vec<f64> = (0..200).map(|_| r.random::<f64>()).collect();
            let y: Vec<f64> = x.iter().map(|v| v * 0.5 + r.random::<f64>()).collect();
            let xs: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let ys: Vec<f64> = y.iter().map(|v| c * v + d).collect();
            let e0 = pearson(&x, &y, &DetrendSpec::disabled()).unwrap();
            let e1 = pearson(&xs, &ys, &DetrendSpec::disabled()).unwrap();
            prop_assert!((e0.r - e1.r).abs() < 1e-9);
        }
    }
}
