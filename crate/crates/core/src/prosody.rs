//! Prosodic feature processing: pitch gap filling and smoothing, sentence-level
//! normalization, Mexican-hat wavelet decomposition of the normalized contour,
//! categorical pauses and the squared earth mover's distance for ordinal
//! pause classes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Moving-average window applied after gap filling.
pub const SMOOTHING_WINDOW: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitchContour {
    pub values: Vec<f64>,
    pub voiced: Vec<bool>,
}

impl PitchContour {
    pub fn new(values: Vec<f64>, voiced: Vec<bool>) -> Result<Self> {
        if values.len() != voiced.len() {
            return Err(Error::Shape(format!(
                "pitch has {} values but {} voicing flags",
                values.len(),
                voiced.len()
            )));
        }
        Ok(Self { values, voiced })
    }

    pub fn fully_voiced(values: Vec<f64>) -> Self {
        let voiced = vec![true; values.len()];
        Self { values, voiced }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Fills unvoiced frames by linear interpolation between flanking voiced
/// frames (nearest voiced value at the edges), then smooths.
pub fn fill_unvoiced(contour: &PitchContour) -> Result<Vec<f64>> {
    let voiced: Vec<usize> = (0..contour.len()).filter(|&i| contour.voiced[i]).collect();
    let (&first, &last) = match (voiced.first(), voiced.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::Invalid("pitch contour has no voiced frame".into())),
    };
    let v = &contour.values;
    let mut out = v.clone();
    out[..first].iter_mut().for_each(|x| *x = v[first]);
    out[last + 1..].iter_mut().for_each(|x| *x = v[last]);
    for pair in voiced.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        for (i, slot) in out.iter_mut().enumerate().take(b).skip(a + 1) {
            let w = (i - a) as f64 / (b - a) as f64;
            *slot = v[a] * (1.0 - w) + v[b] * w;
        }
    }
    Ok(out)
}

/// Centered moving average with edge replication.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let n = values.len();
    if n == 0 || window <= 1 {
        return values.to_vec();
    }
    let half = (window / 2) as isize;
    (0..n as isize)
        .map(|i| {
            let sum: f64 = (i - half..=i + half)
                .map(|k| values[k.clamp(0, n as isize - 1) as usize])
                .sum();
            sum / (2 * half + 1) as f64
        })
        .collect()
}

pub fn interpolate_pitch(contour: &PitchContour) -> Result<PitchContour> {
    let filled = fill_unvoiced(contour)?;
    Ok(PitchContour::fully_voiced(smooth(&filled, SMOOTHING_WINDOW)))
}

/// Sentence-level z-score with population statistics. A constant contour maps
/// to zeros.
pub fn normalize_contour(contour: &PitchContour) -> PitchContour {
    let n = contour.len();
    if n == 0 {
        return contour.clone();
    }
    let mean = contour.values.iter().sum::<f64>() / n as f64;
    let var = contour.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    let values = if std <= 1e-12 * mean.abs().max(1.0) {
        vec![0.0; n]
    } else {
        contour.values.iter().map(|v| (v - mean) / std).collect()
    };
    PitchContour {
        values,
        voiced: contour.voiced.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CwtConfig {
    pub n_scales: usize,
    /// Smallest scale, in frames.
    pub base_scale: f64,
    /// Spacing between consecutive scales, in octaves.
    pub octave_step: f64,
}

impl Default for CwtConfig {
    fn default() -> Self {
        Self {
            n_scales: 10,
            base_scale: 2.0,
            octave_step: 0.5,
        }
    }
}

impl CwtConfig {
    pub fn with_scales(n_scales: usize) -> Self {
        Self {
            n_scales,
            ..Self::default()
        }
    }

    pub fn scales(&self) -> Vec<f64> {
        (0..self.n_scales)
            .map(|j| self.base_scale * 2f64.powf(j as f64 * self.octave_step))
            .collect()
    }
}

/// `[scales x frames]` wavelet coefficients, row-major by scale.
#[derive(Debug, Clone, PartialEq)]
pub struct PitchScaleogram {
    pub scales: Vec<f64>,
    pub n_frames: usize,
    pub coeffs: Vec<f64>,
}

impl PitchScaleogram {
    pub fn scale_row(&self, j: usize) -> &[f64] {
        &self.coeffs[j * self.n_frames..(j + 1) * self.n_frames]
    }

    /// Sum over scales; the coefficients are pre-weighted so this is the
    /// approximate inverse transform.
    pub fn reconstruct(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_frames];
        for row in self.coeffs.chunks(self.n_frames.max(1)) {
            out.iter_mut().zip(row).for_each(|(o, c)| *o += c);
        }
        out
    }

    /// Period (frames) of the sinusoid each scale's coefficients respond to most.
    pub fn peak_periods(&self) -> Vec<f64> {
        self.scales
            .iter()
            .map(|s| 2.0 * std::f64::consts::PI * s / std::f64::consts::SQRT_2)
            .collect()
    }

    /// Frame-major copy `[frames x scales]`, the layout the local reference
    /// encoder consumes.
    pub fn frame_major(&self) -> Vec<f64> {
        let s = self.scales.len();
        let mut out = vec![0.0; s * self.n_frames];
        for j in 0..s {
            for t in 0..self.n_frames {
                out[t * s + j] = self.coeffs[j * self.n_frames + t];
            }
        }
        out
    }
}

fn mexican_hat(u: f64) -> f64 {
    // 2 / (sqrt(3) pi^(1/4))
    const NORM: f64 = 0.867_325_070_584_078;
    let u2 = u * u;
    NORM * (1.0 - u2) * (-u2 / 2.0).exp()
}

/// Reconstruction constant of the second-derivative-of-gaussian wavelet.
const MEXICAN_HAT_C_DELTA: f64 = 3.541;
const MEXICAN_HAT_PSI0: f64 = 0.867_325_070_584_078;

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut k = i.rem_euclid(period);
    if k >= n as isize {
        k = period - k;
    }
    k as usize
}

fn kernel(s: f64) -> Vec<f64> {
    let half = (6.0 * s).ceil() as isize;
    (-half..=half).map(|u| mexican_hat(u as f64 / s)).collect()
}

/// Response of the sampled kernel to a unit cosine of angular frequency `w`.
fn kernel_response(k: &[f64], w: f64) -> f64 {
    let half = (k.len() / 2) as f64;
    k.iter().enumerate().map(|(i, v)| v * (w * (i as f64 - half)).cos()).sum()
}

/// Per-scale reconstruction weights. The textbook weights
/// `dj / (C_delta psi0 s)` assume an unbounded set of scales and lose half the
/// gain at the edges of a finite bank, so each is rescaled by a factor fitted
/// for a flat summed response over the band between the peak periods of the
/// smallest and largest scales. A ridge term keeps the factors near one.
pub fn reconstruction_weights(config: &CwtConfig) -> Vec<f64> {
    const GRID: usize = 400;
    const RIDGE: f64 = 0.01;
    let scales = config.scales();
    let n = scales.len();
    let base: Vec<f64> = scales
        .iter()
        .map(|s| config.octave_step / (MEXICAN_HAT_C_DELTA * MEXICAN_HAT_PSI0) / s)
        .collect();
    if n == 0 {
        return base;
    }
    let peak = |s: f64| 2.0 * std::f64::consts::PI * s / std::f64::consts::SQRT_2;
    let (lo, hi) = (peak(scales[0]).ln(), peak(scales[n - 1]).ln());
    let kernels: Vec<Vec<f64>> = scales.iter().map(|&s| kernel(s)).collect();
    let a = nalgebra::DMatrix::from_fn(GRID, n, |r, j| {
        let period = (lo + (hi - lo) * r as f64 / (GRID - 1) as f64).exp();
        base[j] * kernel_response(&kernels[j], 2.0 * std::f64::consts::PI / period)
    });
    let ones = nalgebra::DVector::from_element(GRID, 1.0);
    let m = a.transpose() * &a / GRID as f64 + nalgebra::DMatrix::identity(n, n) * (RIDGE / n as f64);
    let b = a.transpose() * ones / GRID as f64 + nalgebra::DVector::from_element(n, RIDGE / n as f64);
    match m.cholesky() {
        Some(c) => {
            let r = c.solve(&b);
            base.iter().zip(r.iter()).map(|(w, f)| w * f).collect()
        }
        None => base,
    }
}

/// Mexican-hat CWT with symmetric boundary extension. Coefficients carry the
/// reconstruction weights, so [`PitchScaleogram::reconstruct`] inverts the
/// transform for signals inside the scale band.
pub fn cwt_with(norm: &PitchContour, config: &CwtConfig) -> PitchScaleogram {
    let x = &norm.values;
    let n = x.len();
    let scales = config.scales();
    let mut coeffs = vec![0.0; scales.len() * n];
    if n == 0 {
        return PitchScaleogram {
            scales,
            n_frames: 0,
            coeffs,
        };
    }
    let weights = reconstruction_weights(config);
    for (j, (&s, &weight)) in scales.iter().zip(&weights).enumerate() {
        let half = (6.0 * s).ceil() as isize;
        let kernel = kernel(s);
        let row = &mut coeffs[j * n..(j + 1) * n];
        for (t, out) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let tau = t as isize + ki as isize - half;
                acc += x[reflect(tau, n)] * k;
            }
            *out = weight * acc;
        }
    }
    PitchScaleogram {
        scales,
        n_frames: n,
        coeffs,
    }
}

pub fn cwt_decompose(norm: &PitchContour, n_scales: usize) -> PitchScaleogram {
    cwt_with(norm, &CwtConfig::with_scales(n_scales))
}

/// Full pitch pipeline: gap filling, smoothing, normalization and CWT.
pub fn pitch_scaleogram(contour: &PitchContour, config: &CwtConfig) -> Result<PitchScaleogram> {
    let filled = interpolate_pitch(contour)?;
    Ok(cwt_with(&normalize_contour(&filled), config))
}

/// Ordinal pause class, from "no pause" to "extra-long".
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PauseCategory {
    #[serde(rename = "-")]
    None,
    #[serde(rename = ".")]
    Short,
    #[serde(rename = ",")]
    Medium,
    #[serde(rename = ";")]
    Long,
    #[serde(rename = "#")]
    ExtraLong,
}

impl PauseCategory {
    pub const ALL: [PauseCategory; 5] = [
        PauseCategory::None,
        PauseCategory::Short,
        PauseCategory::Medium,
        PauseCategory::Long,
        PauseCategory::ExtraLong,
    ];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn symbol(self) -> &'static str {
        ["-", ".", ",", ";", "#"][self.index()]
    }
}

impl fmt::Display for PauseCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl FromStr for PauseCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.symbol() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown pause symbol {s:?}")))
    }
}

/// Boundaries between consecutive pause classes in speaking-rate-normalized units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PauseThresholds(pub [f64; 4]);

impl Default for PauseThresholds {
    fn default() -> Self {
        Self([0.5, 2.0, 5.0, 10.0])
    }
}

pub fn categorize_pause_with(pause_sec: f64, speaking_rate: f64, thresholds: &PauseThresholds) -> Result<PauseCategory> {
    if !(pause_sec >= 0.0) || !pause_sec.is_finite() {
        return Err(Error::Invalid(format!("pause duration {pause_sec} must be nonnegative")));
    }
    if !(speaking_rate > 0.0) || !speaking_rate.is_finite() {
        return Err(Error::Invalid(format!("speaking rate {speaking_rate} must be positive")));
    }
    let p = pause_sec * speaking_rate;
    let idx = thresholds.0.iter().filter(|&&b| p >= b).count();
    Ok(PauseCategory::ALL[idx])
}

pub fn categorize_pause(pause_sec: f64, speaking_rate: f64) -> Result<PauseCategory> {
    categorize_pause_with(pause_sec, speaking_rate, &PauseThresholds::default())
}

const SIMPLEX_TOL: f64 = 1e-5;

fn check_simplex(p: &[f64], what: &str) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&x| !x.is_finite() || x < -SIMPLEX_TOL) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Invalid(format!("{what} is not a probability vector (sum {sum})")));
    }
    Ok(())
}

/// Squared earth mover's distance between two distributions over ordered
/// classes: the sum of squared CDF differences.
pub fn emd2_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!("{} vs {} classes", pred.len(), target.len())));
    }
    check_simplex(pred, "prediction")?;
    check_simplex(target, "target")?;
    Ok(emd2_unchecked(pred, target))
}

pub(crate) fn emd2_unchecked(pred: &[f64], target: &[f64]) -> f64 {
    let (mut cp, mut ct, mut sum) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(target) {
        cp += p;
        ct += t;
        sum += (cp - ct).powi(2);
    }
    sum
}

/// d emd2 / d pred_k = 2 * sum_{m >= k} (CDF_pred[m] - CDF_target[m]).
pub fn emd2_grad(pred: &[f64], target: &[f64]) -> Vec<f64> {
    let n = pred.len();
    let mut diff = Vec::with_capacity(n);
    let (mut cp, mut ct) = (0.0, 0.0);
    for (p, t) in pred.iter().zip(target) {
        cp += p;
        ct += t;
        diff.push(cp - ct);
    }
    let mut grad = vec![0.0; n];
    let mut tail = 0.0;
    for k in (0..n).rev() {
        tail += diff[k];
        grad[k] = 2.0 * tail;
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn constant_contour_unchanged() {
        let c = PitchContour::fully_voiced(vec![180.0; 12]);
        assert_eq!(interpolate_pitch(&c).unwrap().values, vec![180.0; 12]);
    }

    #[test]
    fn gaps_filled_linearly_and_edges_extended() {
        let c = PitchContour::new(vec![0.0, 0.0, 100.0, 0.0, 200.0, 0.0], vec![false, false, true, false, true, false]).unwrap();
        let filled = fill_unvoiced(&c).unwrap();
        assert_eq!(filled, vec![100.0, 100.0, 100.0, 150.0, 200.0, 200.0]);
        let all_unvoiced = PitchContour::new(vec![0.0; 3], vec![false; 3]).unwrap();
        assert!(interpolate_pitch(&all_unvoiced).is_err());
    }

    #[test]
    fn normalization_examples() {
        let z = normalize_contour(&PitchContour::fully_voiced(vec![100.0, 200.0]));
        assert_eq!(z.values, vec![-1.0, 1.0]);
        let flat = normalize_contour(&PitchContour::fully_voiced(vec![150.0; 7]));
        assert!(flat.values.iter().all(|&v| v == 0.0));
        let wavy = PitchContour::fully_voiced((0..50).map(|i| 120.0 + (i as f64 * 0.37).sin() * 30.0).collect());
        let n = normalize_contour(&wavy);
        let mean = n.values.iter().sum::<f64>() / 50.0;
        let var = n.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(var, 1.0, epsilon = 1e-9);
        let twice = normalize_contour(&n);
        for (a, b) in n.values.iter().zip(&twice.values) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn zero_contour_gives_zero_scaleogram() {
        let s = cwt_decompose(&PitchContour::fully_voiced(vec![0.0; 40]), 10);
        assert_eq!(s.scales.len(), 10);
        assert!(s.coeffs.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn scales_are_half_octaves_from_two() {
        let scales = CwtConfig::default().scales();
        assert_abs_diff_eq!(scales[0], 2.0);
        assert_abs_diff_eq!(scales[2], 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(scales[9], 2.0 * 2f64.powf(4.5), epsilon = 1e-12);
    }

    #[test]
    fn pause_examples() {
        assert_eq!(categorize_pause(0.0, 15.0).unwrap(), PauseCategory::None);
        assert_eq!(categorize_pause(0.3, 10.0).unwrap(), PauseCategory::Medium);
        assert!(categorize_pause(-0.1, 10.0).is_err());
        assert_eq!("#".parse::<PauseCategory>().unwrap(), PauseCategory::ExtraLong);
        assert_eq!(serde_json::to_string(&PauseCategory::Long).unwrap(), "\";\"");
    }

    #[test]
    fn emd_examples() {
        let onehot = |k: usize| -> Vec<f64> { (0..5).map(|i| if i == k { 1.0 } else { 0.0 }).collect() };
        assert_eq!(emd2_loss(&onehot(3), &onehot(3)).unwrap(), 0.0);
        assert_abs_diff_eq!(emd2_loss(&onehot(0), &onehot(4)).unwrap(), 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(emd2_loss(&[0.2; 5], &onehot(2)).unwrap(), 0.40, epsilon = 1e-12);
        assert!(emd2_loss(&[0.5, 0.6, 0.0, 0.0, 0.0], &onehot(0)).is_err());
    }

    proptest! {
        #[test]
        fn pause_rescaling_invariance(p in 0.0f64..2.0, rate in 1.0f64..30.0, c in 0.25f64..4.0) {
            // exact binary scalings so the product is bit-identical
            let c = 2f64.powi((c.log2()).round() as i32);
            prop_assert_eq!(categorize_pause(p, rate).unwrap(), categorize_pause(p * c, rate / c).unwrap());
        }

        #[test]
        fn pause_is_monotone(a in 0.0f64..3.0, b in 0.0f64..3.0, rate in 1.0f64..20.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(categorize_pause(lo, rate).unwrap() <= categorize_pause(hi, rate).unwrap());
        }

        #[test]
        fn emd_symmetric_nonnegative(a in proptest::collection::vec(0.01f64..1.0, 5), b in proptest::collection::vec(0.01f64..1.0, 5)) {
            let sa: f64 = a.iter().sum();
            let sb: f64 = b.iter().sum();
            let p: Vec<f64> = a.iter().map(|x| x / sa).collect();
            let q: Vec<f64> = b.iter().map(|x| x / sb).collect();
            let d = emd2_loss(&p, &q).unwrap();
            prop_assert!(d >= 0.0);
            prop_assert!((d - emd2_loss(&q, &p).unwrap()).abs() < 1e-15);
        }

        #[test]
        fn cwt_is_linear(x in proptest::collection::vec(-2.0f64..2.0, 30), y in proptest::collection::vec(-2.0f64..2.0, 30), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
            let sx = cwt_decompose(&PitchContour::fully_voiced(x), 10);
            let sy = cwt_decompose(&PitchContour::fully_voiced(y), 10);
            let sm = cwt_decompose(&PitchContour::fully_voiced(mix), 10);
            for k in 0..sm.coeffs.len() {
                prop_assert!((sm.coeffs[k] - (a * sx.coeffs[k] + b * sy.coeffs[k])).abs() < 1e-6);
            }
        }
    }
}
