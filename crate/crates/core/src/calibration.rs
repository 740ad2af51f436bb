//! Temperature-scaled softmax over answer options, temperature fitting and
//! reliability (ECE) reporting.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{CalibratedDistribution, LogitVector};

#[derive(Debug, Error, PartialEq)]
pub enum CalibrationError {
    #[error("non-finite logit at option {0}")]
    NonFiniteLogit(usize),
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("need at least 2 options, got {0}")]
    TooFewOptions(usize),
    #[error("sample {sample}: label {label} out of range for {options} options")]
    LabelOutOfRange {
        sample: usize,
        label: usize,
        options: usize,
    },
    #[error("all samples share one label and one logit pattern")]
    DegenerateLabels,
}

pub fn constrained_softmax(
    logits: &LogitVector,
    t: f64,
) -> Result<CalibratedDistribution, CalibrationError> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(CalibrationError::InvalidTemperature(t));
    }
    let z = &logits.values;
    if z.len() < 2 {
        return Err(CalibrationError::TooFewOptions(z.len()));
    }
    if let Some(i) = z.iter().position(|v| !v.is_finite()) {
        return Err(CalibrationError::NonFiniteLogit(i));
    }
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = z.iter().map(|&v| ((v - m) / t).exp()).collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);

    let (mut top1, mut top2) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &p in &probs {
        if p > top1 {
            top2 = top1;
            top1 = p;
        } else if p > top2 {
            top2 = p;
        }
    }
    let entropy: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    let entropy_norm = (entropy / (probs.len() as f64).ln()).clamp(0.0, 1.0);
    Ok(CalibratedDistribution {
        probs,
        confidence: top1,
        margin: top1 - top2,
        entropy_norm,
        temperature: t,
    })
}

/// Mean negative log-likelihood of the labelled option at temperature `t`.
pub fn mean_nll(samples: &[(LogitVector, usize)], t: f64) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|(z, y)| {
            let m = z.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = z
                .values
                .iter()
                .map(|&v| ((v - m) / t).exp())
                .sum::<f64>()
                .ln();
            lse - (z.values[*y] - m) / t
        })
        .sum();
    total / samples.len() as f64
}

pub const MIN_FIT_SAMPLES: usize = 30;
pub const T_MIN: f64 = 0.25;
pub const T_MAX: f64 = 8.0;
const LOG_T_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CalibrationWarning {
    /// Fewer than [`MIN_FIT_SAMPLES`] samples; T = 1 was returned.
    DataTooSmall { n: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureModel {
    pub temperature: f64,
    pub fit_nll: f64,
    pub n_fit: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<CalibrationWarning>,
}

impl TemperatureModel {
    pub fn identity() -> Self {
        Self {
            temperature: 1.0,
            fit_nll: f64::NAN,
            n_fit: 0,
            warning: None,
        }
    }

    pub fn apply(&self, logits: &LogitVector) -> Result<CalibratedDistribution, CalibrationError> {
        constrained_softmax(logits, self.temperature)
    }
}

fn check_samples(samples: &[(LogitVector, usize)]) -> Result<(), CalibrationError> {
    for (i, (z, y)) in samples.iter().enumerate() {
        if z.len() < 2 {
            return Err(CalibrationError::TooFewOptions(z.len()));
        }
        if let Some(j) = z.values.iter().position(|v| !v.is_finite()) {
            return Err(CalibrationError::NonFiniteLogit(j));
        }
        if *y >= z.len() {
            return Err(CalibrationError::LabelOutOfRange {
                sample: i,
                label: *y,
                options: z.len(),
            });
        }
    }
    Ok(())
}

/// Fits T by golden-section search of the mean NLL over log T.
pub fn fit_temperature(
    samples: &[(LogitVector, usize)],
) -> Result<TemperatureModel, CalibrationError> {
    check_samples(samples)?;
    if samples.len() < MIN_FIT_SAMPLES {
        log::warn!(
            "only {} calibration samples (< {MIN_FIT_SAMPLES}); keeping T = 1",
            samples.len()
        );
        return Ok(TemperatureModel {
            temperature: 1.0,
            fit_nll: if samples.is_empty() {
                f64::NAN
            } else {
                mean_nll(samples, 1.0)
            },
            n_fit: samples.len(),
            warning: Some(CalibrationWarning::DataTooSmall { n: samples.len() }),
        });
    }
    let (z0, y0) = &samples[0];
    if samples.iter().all(|(z, y)| y == y0 && z == z0) {
        return Err(CalibrationError::DegenerateLabels);
    }

    let f = |log_t: f64| mean_nll(samples, log_t.exp());
    let log_t = golden_section_min(f, T_MIN.ln(), T_MAX.ln(), LOG_T_TOL);
    let temperature = log_t.exp();
    Ok(TemperatureModel {
        temperature,
        fit_nll: mean_nll(samples, temperature),
        n_fit: samples.len(),
        warning: None,
    })
}

/// Minimizer of a unimodal `f` on `[a, b]`, to interval width `tol`.
pub fn golden_section_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    (a + b) / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub mean_confidence: f64,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub bins: Vec<ReliabilityBin>,
    pub ece: f64,
}

impl ReliabilityReport {
    pub fn sample_count(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }
}

/// Equal-width binning on [0, 1]; confidence 1.0 lands in the last bin.
/// Empty bins report zero confidence and accuracy.
pub fn ece(preds: &[(f64, bool)], n_bins: usize) -> ReliabilityReport {
    let n_bins = n_bins.max(1);
    let mut conf = vec![0.0; n_bins];
    let mut hits = vec![0usize; n_bins];
    let mut counts = vec![0usize; n_bins];
    for &(c, ok) in preds {
        let c = c.clamp(0.0, 1.0);
        let b = ((c * n_bins as f64) as usize).min(n_bins - 1);
        conf[b] += c;
        hits[b] += ok as usize;
        counts[b] += 1;
    }
    let n = preds.len().max(1) as f64;
    let mut total = 0.0;
    let bins = (0..n_bins)
        .map(|b| {
            let count = counts[b];
            let (mean_confidence, accuracy) = if count == 0 {
                (0.0, 0.0)
            } else {
                (conf[b] / count as f64, hits[b] as f64 / count as f64)
            };
            total += count as f64 / n * (mean_confidence - accuracy).abs();
            ReliabilityBin {
                lo: b as f64 / n_bins as f64,
                hi: (b + 1) as f64 / n_bins as f64,
                mean_confidence,
                accuracy,
                count,
            }
        })
        .collect();
    ReliabilityReport {
        bins,
        ece: total.clamp(0.0, 1.0),
    }
}

/// Reliability of `samples` after softmax at temperature `t`.
pub fn reliability_at(
    samples: &[(LogitVector, usize)],
    t: f64,
    n_bins: usize,
) -> Result<ReliabilityReport, CalibrationError> {
    let preds = samples
        .iter()
        .map(|(z, y)| {
            let d = constrained_softmax(z, t)?;
            Ok((d.confidence, d.argmax() == *y))
        })
        .collect::<Result<Vec<_>, CalibrationError>>()?;
    Ok(ece(&preds, n_bins))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn lv(v: &[f64]) -> LogitVector {
        LogitVector::new(v.to_vec())
    }

    #[test]
    fn symmetric_logits_are_uniform() {
        for t in [0.3, 1.0, 7.0] {
            let d = constrained_softmax(&lv(&[1.0, 1.0]), t).unwrap();
            assert_eq!(d.probs, vec![0.5, 0.5]);
            assert_eq!(d.confidence, 0.5);
            assert_eq!(d.margin, 0.0);
            assert!((d.entropy_norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_option_values() {
        // Independent evaluation of the logistic function.
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let d1 = constrained_softmax(&lv(&[2.0, 0.0]), 1.0).unwrap();
        assert!((d1.probs[0] - sig(2.0)).abs() < 1e-12);
        assert!((d1.probs[0] - 0.8808).abs() < 1e-4);
        let d2 = constrained_softmax(&lv(&[2.0, 0.0]), 2.0).unwrap();
        assert!((d2.probs[0] - sig(1.0)).abs() < 1e-12);
        assert!((d2.probs[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn smoothing_keeps_argmax_and_lowers_confidence() {
        let z = lv(&[5.0, 1.0, 1.0, 1.0]);
        let a = constrained_softmax(&z, 1.0).unwrap();
        let b = constrained_softmax(&z, 1.4).unwrap();
        assert_eq!(a.argmax(), b.argmax());
        assert!(b.confidence < a.confidence);
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(
            constrained_softmax(&lv(&[1.0, f64::NAN]), 1.0),
            Err(CalibrationError::NonFiniteLogit(1))
        );
        assert!(constrained_softmax(&lv(&[1.0, 2.0]), 0.0).is_err());
        assert!(constrained_softmax(&lv(&[1.0]), 1.0).is_err());
    }

    #[test]
    fn huge_logits_stay_finite() {
        let d = constrained_softmax(&lv(&[1e300, -1e300, 0.0]), 0.5).unwrap();
        assert_eq!(d.probs, vec![1.0, 0.0, 0.0]);
        assert_eq!(d.entropy_norm, 0.0);
    }

    #[test]
    fn ece_examples() {
        let all_right: Vec<_> = (0..10).map(|_| (1.0, true)).collect();
        let r = ece(&all_right, 10);
        assert_eq!(r.ece, 0.0);
        assert_eq!(r.bins[9].count, 10);

        let preds: Vec<_> = (0..100).map(|i| (0.8, i < 65)).collect();
        assert!((ece(&preds, 10).ece - 0.15).abs() < 1e-12);
    }

    #[test]
    fn ece_two_bins_weighted_mean() {
        let mut preds = Vec::new();
        preds.extend((0..50).map(|i| (0.35, i < 15)));
        preds.extend((0..50).map(|i| (0.95, i < 35)));
        let r = ece(&preds, 10);
        assert!((r.bins[3].mean_confidence - r.bins[3].accuracy - 0.05).abs() < 1e-12);
        assert!((r.ece - 0.5 * (0.35 - 0.30) - 0.5 * (0.95 - 0.70)).abs() < 1e-12);
    }

    #[test]
    fn small_sets_keep_unit_temperature() {
        let samples: Vec<_> = (0..10).map(|i| (lv(&[i as f64, 0.0]), 0)).collect();
        let m = fit_temperature(&samples).unwrap();
        assert_eq!(m.temperature, 1.0);
        assert_eq!(m.warning, Some(CalibrationWarning::DataTooSmall { n: 10 }));
    }

    #[test]
    fn degenerate_labels() {
        let samples: Vec<_> = (0..40).map(|_| (lv(&[1.0, 0.0]), 0)).collect();
        assert_eq!(
            fit_temperature(&samples),
            Err(CalibrationError::DegenerateLabels)
        );
    }

    fn sample_set(n: usize, scale: f64, seed: u64) -> Vec<(LogitVector, usize)> {
        let mut rng = StdRng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
                let p = constrained_softmax(&lv(&z), 1.0).unwrap().probs;
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let y = p
                    .iter()
                    .position(|&pi| {
                        acc += pi;
                        u < acc
                    })
                    .unwrap_or(3);
                (lv(&z.iter().map(|v| v * scale).collect::<Vec<_>>()), y)
            })
            .collect()
    }

    #[test]
    fn recovers_known_temperatures() {
        let calibrated = fit_temperature(&sample_set(4000, 1.0, 1)).unwrap();
        assert!(
            (0.9..=1.1).contains(&calibrated.temperature),
            "{calibrated:?}"
        );

        let samples = sample_set(4000, 2.0, 2);
        let fit = fit_temperature(&samples).unwrap();
        assert!((1.7..=2.3).contains(&fit.temperature), "{fit:?}");
        let before = reliability_at(&samples, 1.0, 10).unwrap().ece;
        let after = reliability_at(&samples, fit.temperature, 10).unwrap().ece;
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn golden_section_finds_parabola_minimum() {
        let x = golden_section_min(|x| (x - 0.3) * (x - 0.3), -1.0, 2.0, 1e-8);
        assert!((x - 0.3).abs() < 1e-7);
    }

    proptest! {
        #[test]
        fn simplex_argmax_and_monotone(
            z in prop::collection::vec(-50.0f64..50.0, 2..=6),
            t1 in 0.05f64..20.0,
            dt in 0.0f64..20.0,
        ) {
            let z = LogitVector::new(z);
            let a = constrained_softmax(&z, t1).unwrap();
            let b = constrained_softmax(&z, t1 + dt).unwrap();
            prop_assert!((a.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(a.probs.iter().all(|&p| p >= 0.0));
            prop_assert_eq!(a.argmax(), z.argmax());
            prop_assert!(b.confidence <= a.confidence + 1e-12);
            prop_assert!((0.0..=1.0).contains(&a.entropy_norm));
        }

        #[test]
        fn infinite_temperature_limit(z in prop::collection::vec(-50.0f64..50.0, 2..=6)) {
            let n = z.len() as f64;
            let d = constrained_softmax(&LogitVector::new(z), 1e6).unwrap();
            prop_assert!(d.probs.iter().all(|p| (p - 1.0 / n).abs() < 1e-4));
        }
    }
}
