//! Alignment mathematics: single-gaussian monotonic attention, duration
//! extraction from the attention trajectory, gaussian upsampling, the two
//! auxiliary alignment losses and the fractional-progression positional code.
//!
//! Everything here is plain `f64` math with explicit parameters. The acoustic
//! model's autodiff ops call into these functions for their forward values and
//! use the `*_grad` companions for their backward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hidden width of the attention MLP (`W h + b` before the ReLU).
pub const ATTENTION_HIDDEN: usize = 128;
/// Dimension of the fractional-progression positional code.
pub const POSITIONAL_DIM: usize = 32;
/// Floor used inside every logarithm of this module.
pub const LOG_EPS: f64 = 1e-8;
/// Increments are kept inside `[DELTA_EPS, 1 - DELTA_EPS]` so that `mu` stays
/// strictly increasing in floating point.
pub const DELTA_EPS: f64 = 1e-6;
/// Lower bound on the attention width.
pub const SIGMA_MIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionState {
    pub mu: f64,
    pub sigma: f64,
    pub delta: f64,
}

impl AttentionState {
    /// State before the first decoder step: `mu = 0`, so `mu_0 = delta_0`.
    pub fn initial() -> Self {
        Self {
            mu: 0.0,
            sigma: 1.0,
            delta: 0.0,
        }
    }
}

/// Parameters of `(sigma_hat, delta_hat) = V relu(W h + b) + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub input_dim: usize,
    /// `[ATTENTION_HIDDEN x input_dim]`, row-major.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    /// `[2 x ATTENTION_HIDDEN]`; row 0 drives sigma, row 1 drives delta.
    pub v: Vec<f64>,
    pub c: [f64; 2],
}

impl AttentionParams {
    pub fn zeros(input_dim: usize) -> Self {
        Self {
            input_dim,
            w: vec![0.0; ATTENTION_HIDDEN * input_dim],
            b: vec![0.0; ATTENTION_HIDDEN],
            v: vec![0.0; 2 * ATTENTION_HIDDEN],
            c: [0.0; 2],
        }
    }

    pub fn random<R: Rng>(input_dim: usize, scale: f64, rng: &mut R) -> Self {
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-scale..scale)).collect() };
        let w = draw(ATTENTION_HIDDEN * input_dim);
        let b = draw(ATTENTION_HIDDEN);
        let v = draw(2 * ATTENTION_HIDDEN);
        let c = [rng.gen_range(-scale..scale), rng.gen_range(-scale..scale)];
        Self {
            input_dim,
            w,
            b,
            v,
            c,
        }
    }

    /// Raw `(sigma_hat, delta_hat)` for one hidden state.
    pub fn raw(&self, hidden: &[f64]) -> [f64; 2] {
        let mut out = self.c;
        for u in 0..ATTENTION_HIDDEN {
            let row = &self.w[u * self.input_dim..(u + 1) * self.input_dim];
            let pre = self.b[u] + row.iter().zip(hidden).map(|(w, h)| w * h).sum::<f64>();
            if pre > 0.0 {
                out[0] += self.v[u] * pre;
                out[1] += self.v[ATTENTION_HIDDEN + u] * pre;
            }
        }
        out
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Increment from its raw parameter, clamped to the open unit interval.
pub fn delta_from_raw(raw: f64) -> f64 {
    sigmoid(raw).clamp(DELTA_EPS, 1.0 - DELTA_EPS)
}

/// d delta / d raw, zero where the clamp is active.
pub fn delta_from_raw_grad(raw: f64) -> f64 {
    let s = sigmoid(raw);
    if !(DELTA_EPS..=1.0 - DELTA_EPS).contains(&s) {
        0.0
    } else {
        s * (1.0 - s)
    }
}

pub fn sigma_from_raw(raw: f64) -> f64 {
    softplus(raw).max(SIGMA_MIN)
}

pub fn sigma_from_raw_grad(raw: f64) -> f64 {
    if softplus(raw) < SIGMA_MIN {
        0.0
    } else {
        sigmoid(raw)
    }
}

/// Unnormalized gaussian weights `exp(-(j - mu)^2 / (2 sigma^2))` for `j < n`.
pub fn gaussian_weights(mu: f64, sigma: f64, n: usize) -> Vec<f64> {
    let denom = 2.0 * sigma * sigma;
    (0..n)
        .map(|j| {
            let d = j as f64 - mu;
            (-(d * d) / denom).exp()
        })
        .collect()
}

/// Row-normalized gaussian weights, computed in log space so that narrow or
/// distant gaussians never produce `0 / 0`.
pub fn normalized_gaussian(mu: f64, sigma: f64, n: usize) -> Vec<f64> {
    let denom = 2.0 * sigma * sigma;
    let logits: Vec<f64> = (0..n)
        .map(|j| {
            let d = j as f64 - mu;
            -(d * d) / denom
        })
        .collect();
    softmax(&logits)
}

/// Gradient of a scalar through [`normalized_gaussian`]: given `upstream`
/// (dL/dalpha) and the forward output `alpha`, returns `(dL/dmu, dL/dsigma)`.
pub fn normalized_gaussian_grad(mu: f64, sigma: f64, alpha: &[f64], upstream: &[f64]) -> (f64, f64) {
    let dot: f64 = alpha.iter().zip(upstream).map(|(a, g)| a * g).sum();
    let s2 = sigma * sigma;
    let s3 = s2 * sigma;
    let mut dmu = 0.0;
    let mut dsigma = 0.0;
    for (j, (&a, &g)) in alpha.iter().zip(upstream).enumerate() {
        let gl = a * (g - dot);
        let d = j as f64 - mu;
        dmu += gl * d / s2;
        dsigma += gl * d * d / s3;
    }
    (dmu, dsigma)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// One attention row: the raw gaussian weights plus the normalized copy used
/// for the decoder context.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRow {
    pub weights: Vec<f64>,
    pub normalized: Vec<f64>,
}

/// Advances the gaussian attention by one decoder step.
pub fn attention_step(
    hidden: &[f64],
    prev: &AttentionState,
    params: &AttentionParams,
    n_enc: usize,
    step: usize,
) -> Result<(AttentionRow, AttentionState)> {
    if hidden.len() != params.input_dim {
        return Err(Error::Shape(format!(
            "decoder state has {} entries, attention expects {}",
            hidden.len(),
            params.input_dim
        )));
    }
    if hidden.iter().any(|h| !h.is_finite()) {
        return Err(Error::NonFiniteState { step });
    }
    if !(prev.mu >= 0.0) {
        return Err(Error::Invalid(format!("previous mu {} is negative", prev.mu)));
    }
    let [sigma_hat, delta_hat] = params.raw(hidden);
    let delta = delta_from_raw(delta_hat);
    let sigma = sigma_from_raw(sigma_hat);
    let mu = prev.mu + delta;
    let row = AttentionRow {
        weights: gaussian_weights(mu, sigma, n_enc),
        normalized: normalized_gaussian(mu, sigma, n_enc),
    };
    Ok((row, AttentionState { mu, sigma, delta }))
}

/// Dense, nonnegative `[rows x cols]` alignment (decoder steps x encoder positions).
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMatrix {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
}

impl AlignmentMatrix {
    pub fn new(rows: usize, cols: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != rows * cols {
            return Err(Error::Shape(format!(
                "alignment {rows}x{cols} needs {} weights, got {}",
                rows * cols,
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Invalid("alignment weights must be finite and nonnegative".into()));
        }
        Ok(Self { rows, cols, weights })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged alignment rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.cols + j]
    }

    /// Copy with every row scaled to sum to one. All-zero rows stay zero.
    pub fn normalized(&self) -> Self {
        let mut weights = self.weights.clone();
        for row in weights.chunks_mut(self.cols.max(1)) {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|w| *w /= s);
            }
        }
        Self {
            rows: self.rows,
            cols: self.cols,
            weights,
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }
}

/// Integer frame counts per encoder position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DurationVector(pub Vec<usize>);

impl DurationVector {
    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn floored(&self) -> Self {
        Self(self.0.iter().map(|&d| d.max(1)).collect())
    }

    pub fn log(&self) -> Vec<f64> {
        self.0.iter().map(|&d| (d.max(1) as f64).ln()).collect()
    }
}

/// Encoder index a continuous location is attributed to: round half-up,
/// clamped to `[0, n_enc - 1]`.
pub fn attributed_index(mu: f64, n_enc: usize) -> usize {
    let r = (mu + 0.5).floor();
    if r <= 0.0 {
        0
    } else {
        (r as usize).min(n_enc.saturating_sub(1))
    }
}

/// Raw per-position step counts; sums to `mus.len()`.
pub fn count_durations(mus: &[f64], n_enc: usize) -> Result<DurationVector> {
    if mus.is_empty() {
        return Err(Error::EmptyTrace);
    }
    if n_enc == 0 {
        return Err(Error::Invalid("encoder length must be positive".into()));
    }
    let mut d = vec![0usize; n_enc];
    for &mu in mus {
        d[attributed_index(mu, n_enc)] += 1;
    }
    Ok(DurationVector(d))
}

/// Durations of each encoder position from an attention trajectory, floored at
/// one frame.
pub fn extract_durations(mus: &[f64], n_enc: usize) -> Result<DurationVector> {
    Ok(count_durations(mus, n_enc)?.floored())
}

pub fn durations_from_trace(trace: &[AttentionState], n_enc: usize) -> Result<DurationVector> {
    let mus: Vec<f64> = trace.iter().map(|s| s.mu).collect();
    extract_durations(&mus, n_enc)
}

/// Center of each position's frame span: cumulative sum plus half its own duration.
pub fn upsample_centers(durations: &[usize]) -> Vec<f64> {
    let mut acc = 0.0;
    durations
        .iter()
        .map(|&d| {
            let c = acc + d as f64 / 2.0;
            acc += d as f64;
            c
        })
        .collect()
}

/// Width in frames of position `k`: its range times its duration.
fn upsample_width(range: f64, duration: usize) -> f64 {
    range * duration as f64
}

fn upsample_logits(centers: &[f64], widths: &[f64], frame: usize, out: &mut [f64]) {
    let t = frame as f64 + 0.5;
    for ((o, c), w) in out.iter_mut().zip(centers).zip(widths) {
        let d = t - c;
        *o = -(d * d) / (2.0 * w * w);
    }
}

/// Gaussian upsampling for an arbitrary number of frames. Rows are
/// normalized over encoder positions.
///
/// Ranges are relative: position `k` spreads with a standard deviation of
/// `ranges[k] * durations[k]` frames. Durations must be at least one.
pub fn upsample_frames(durations: &[usize], ranges: &[f64], n_frames: usize) -> Result<AlignmentMatrix> {
    if durations.len() != ranges.len() {
        return Err(Error::Shape(format!(
            "{} durations but {} ranges",
            durations.len(),
            ranges.len()
        )));
    }
    if durations.is_empty() {
        return Err(Error::Invalid("empty duration vector".into()));
    }
    if ranges.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
        return Err(Error::Invalid("upsampling ranges must be positive".into()));
    }
    if durations.contains(&0) {
        return Err(Error::Invalid("upsampling durations must be at least one frame".into()));
    }
    let centers = upsample_centers(durations);
    let widths: Vec<f64> = ranges.iter().zip(durations).map(|(&r, &d)| upsample_width(r, d)).collect();
    let j = durations.len();
    let mut weights = vec![0.0; n_frames * j];
    let mut logits = vec![0.0; j];
    for (i, row) in weights.chunks_mut(j).enumerate() {
        upsample_logits(&centers, &widths, i, &mut logits);
        row.copy_from_slice(&softmax(&logits));
    }
    AlignmentMatrix::new(n_frames, j, weights)
}

/// Gaussian upsampling over exactly `sum(durations)` frames.
pub fn gaussian_upsample(durations: &DurationVector, ranges: &[f64], n_frames: usize) -> Result<AlignmentMatrix> {
    let sum = durations.total();
    if sum != n_frames {
        return Err(Error::FrameMismatch {
            frames: n_frames,
            sum,
        });
    }
    upsample_frames(durations.as_slice(), ranges, n_frames)
}

/// Gradient with respect to the ranges of a scalar through [`upsample_frames`],
/// given the forward output and dL/dweights.
pub fn upsample_ranges_grad(
    durations: &[usize],
    ranges: &[f64],
    forward: &AlignmentMatrix,
    upstream: &[f64],
) -> Vec<f64> {
    let centers = upsample_centers(durations);
    let j = durations.len();
    let mut grad = vec![0.0; j];
    for i in 0..forward.rows() {
        let row = forward.row(i);
        let g = &upstream[i * j..(i + 1) * j];
        let dot: f64 = row.iter().zip(g).map(|(a, b)| a * b).sum();
        let t = i as f64 + 0.5;
        for k in 0..j {
            let gl = row[k] * (g[k] - dot);
            let d = t - centers[k];
            let dur = durations[k] as f64;
            grad[k] += gl * d * d / (ranges[k].powi(3) * dur * dur);
        }
    }
    grad
}

/// Expected encoder position of a normalized row.
pub fn centroid(row: &[f64]) -> f64 {
    row.iter().enumerate().map(|(k, w)| k as f64 * w).sum()
}

/// Mean squared error between predicted log-durations and the log of the
/// (floored) target durations.
pub fn duration_loss(pred_log_d: &[f64], target: &DurationVector) -> Result<f64> {
    check_len(pred_log_d.len(), target.len())?;
    if pred_log_d.is_empty() {
        return Ok(0.0);
    }
    let n = pred_log_d.len() as f64;
    Ok(pred_log_d
        .iter()
        .zip(target.log())
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / n)
}

pub fn duration_loss_grad(pred_log_d: &[f64], target: &DurationVector) -> Result<Vec<f64>> {
    check_len(pred_log_d.len(), target.len())?;
    let n = pred_log_d.len().max(1) as f64;
    Ok(pred_log_d
        .iter()
        .zip(target.log())
        .map(|(p, t)| 2.0 * (p - t) / n)
        .collect())
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("lengths differ: {a} vs {b}")));
    }
    Ok(())
}

fn kl_row(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pj, &qj)| pj * ((pj + LOG_EPS).ln() - (qj + LOG_EPS).ln()))
        .sum()
}

fn normalize_row(row: &[f64]) -> (Vec<f64>, f64) {
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() <= 1e-12 {
        (row.to_vec(), 1.0)
    } else if s > 0.0 {
        (row.iter().map(|w| w / s).collect(), s)
    } else {
        (row.to_vec(), 1.0)
    }
}

/// Mean over decoder steps of `KL(normalize(attn_i) || upsampled_i)`.
pub fn alignment_kl(attn: &AlignmentMatrix, upsampled: &AlignmentMatrix) -> Result<f64> {
    if attn.rows() != upsampled.rows() || attn.cols() != upsampled.cols() {
        return Err(Error::Shape(format!(
            "attention {}x{} vs upsampled {}x{}",
            attn.rows(),
            attn.cols(),
            upsampled.rows(),
            upsampled.cols()
        )));
    }
    if attn.rows() == 0 {
        return Ok(0.0);
    }
    let total: f64 = (0..attn.rows())
        .map(|i| {
            let (p, _) = normalize_row(attn.row(i));
            kl_row(&p, upsampled.row(i))
        })
        .sum();
    Ok(total / attn.rows() as f64)
}

/// Gradients of [`alignment_kl`] with respect to the raw attention entries and
/// the upsampled entries, as `(d_attn, d_upsampled)` in row-major order.
pub fn alignment_kl_grad(attn: &AlignmentMatrix, upsampled: &AlignmentMatrix) -> Result<(Vec<f64>, Vec<f64>)> {
    alignment_kl(attn, upsampled)?;
    let (rows, cols) = (attn.rows(), attn.cols());
    let scale = 1.0 / rows.max(1) as f64;
    let mut d_attn = vec![0.0; rows * cols];
    let mut d_up = vec![0.0; rows * cols];
    for i in 0..rows {
        let (p, s) = normalize_row(attn.row(i));
        let q = upsampled.row(i);
        // dKL/dp_j
        let gp: Vec<f64> = p
            .iter()
            .zip(q)
            .map(|(&pj, &qj)| ((pj + LOG_EPS).ln() - (qj + LOG_EPS).ln()) + pj / (pj + LOG_EPS))
            .collect();
        let dot: f64 = p.iter().zip(&gp).map(|(a, b)| a * b).sum();
        for j in 0..cols {
            d_attn[i * cols + j] = scale * (gp[j] - dot) / s;
            d_up[i * cols + j] = -scale * p[j] / (q[j] + LOG_EPS);
        }
    }
    Ok((d_attn, d_up))
}

/// Sinusoidal code of a location's fractional part.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalCode(pub Vec<f64>);

/// Angular frequency of the `i`-th sin/cos pair: geometric from pi to 16 pi.
pub fn positional_frequency(i: usize, pairs: usize) -> f64 {
    let ratio = if pairs > 1 { i as f64 / (pairs - 1) as f64 } else { 0.0 };
    std::f64::consts::PI * 16f64.powf(ratio)
}

/// Interleaved `[sin(w_0 f), cos(w_0 f), sin(w_1 f), ...]` with `f = mu - floor(mu)`.
pub fn positional_encoding(mu: f64, dim: usize) -> PositionalCode {
    let f = mu - mu.floor();
    let pairs = dim / 2;
    let mut code = Vec::with_capacity(dim);
    for i in 0..pairs {
        let a = positional_frequency(i, pairs) * f;
        code.push(a.sin());
        code.push(a.cos());
    }
    PositionalCode(code)
}

/// d code / d mu (the fractional part has unit slope between integers).
pub fn positional_encoding_grad(mu: f64, dim: usize) -> Vec<f64> {
    let f = mu - mu.floor();
    let pairs = dim / 2;
    let mut grad = Vec::with_capacity(dim);
    for i in 0..pairs {
        let w = positional_frequency(i, pairs);
        let a = w * f;
        grad.push(w * a.cos());
        grad.push(-w * a.sin());
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_give_analytic_state() {
        let params = AttentionParams::zeros(4);
        let prev = AttentionState {
            mu: 1.5,
            sigma: 1.0,
            delta: 0.3,
        };
        let (_, next) = attention_step(&[0.0; 4], &prev, &params, 6, 0).unwrap();
        assert_abs_diff_eq!(next.delta, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(next.sigma, std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(next.mu, 2.0, epsilon = 1e-15);
    }

    #[test]
    fn gaussian_row_matches_hand_values() {
        let w = gaussian_weights(2.0, 1.0, 5);
        let expect = [(-2f64).exp(), (-0.5f64).exp(), 1.0, (-0.5f64).exp(), (-2f64).exp()];
        for (a, b) in w.iter().zip(expect) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        assert_eq!(w[1], w[3]);
    }

    #[test]
    fn non_finite_hidden_names_step() {
        let params = AttentionParams::zeros(2);
        let err = attention_step(&[f64::NAN, 0.0], &AttentionState::initial(), &params, 3, 17).unwrap_err();
        assert!(err.to_string().contains("17"), "{err}");
    }

    #[test]
    fn extraction_examples() {
        assert_eq!(extract_durations(&[0.1, 0.3, 0.45], 1).unwrap().0, vec![3]);
        assert_eq!(extract_durations(&[0.2, 0.7, 1.1, 1.6, 2.4], 3).unwrap().0, vec![1, 2, 2]);
        assert!(matches!(extract_durations(&[], 3), Err(Error::EmptyTrace)));
    }

    #[test]
    fn floor_applies_to_unvisited_tail() {
        let raw = count_durations(&[0.1, 0.2, 0.9], 4).unwrap();
        assert_eq!(raw.0, vec![2, 1, 0, 0]);
        assert_eq!(raw.floored().0, vec![2, 1, 1, 1]);
    }

    #[test]
    fn upsample_examples() {
        let one = gaussian_upsample(&DurationVector(vec![4]), &[0.7], 4).unwrap();
        assert!(one.weights().iter().all(|&w| (w - 1.0).abs() < 1e-15));

        // range 0.25 on a 2-frame token is a 0.5-frame standard deviation
        let a = gaussian_upsample(&DurationVector(vec![2, 2]), &[0.25, 0.25], 4).unwrap();
        let raw = [(-0.5f64).exp(), (-12.5f64).exp()];
        assert_abs_diff_eq!(a.get(0, 0), raw[0] / (raw[0] + raw[1]), epsilon = 1e-12);
        assert_abs_diff_eq!(a.get(0, 0), 0.999994, epsilon = 1e-6);
        for s in a.row_sums() {
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-6);
        }
        assert!(matches!(
            gaussian_upsample(&DurationVector(vec![2, 2]), &[0.25, 0.25], 5),
            Err(Error::FrameMismatch { frames: 5, sum: 4 })
        ));
    }

    #[test]
    fn centroid_examples() {
        assert_eq!(centroid(&[0.0, 0.0, 0.0, 1.0]), 3.0);
        assert_abs_diff_eq!(centroid(&[0.2; 5]), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(centroid(&[0.25, 0.75]), 0.75, epsilon = 1e-15);
    }

    #[test]
    fn duration_loss_examples() {
        let t = DurationVector(vec![3, 5]);
        assert_eq!(duration_loss(&t.log(), &t).unwrap(), 0.0);
        assert_eq!(duration_loss(&[0.0, 0.0], &DurationVector(vec![1, 1])).unwrap(), 0.0);
        let l = duration_loss(&[0.0], &DurationVector(vec![2])).unwrap();
        assert_abs_diff_eq!(l, std::f64::consts::LN_2.powi(2), epsilon = 1e-15);
        assert_abs_diff_eq!(l, 0.4805, epsilon = 1e-4);
    }

    #[test]
    fn kl_examples() {
        let p = AlignmentMatrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let q = AlignmentMatrix::from_rows(&[vec![0.9, 0.1]]).unwrap();
        let hand = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert_abs_diff_eq!(alignment_kl(&p, &q).unwrap(), hand, epsilon = 1e-7);
        assert_abs_diff_eq!(hand, 0.5108, epsilon = 1e-4);
        assert_eq!(alignment_kl(&q, &q).unwrap(), 0.0);
        let r = AlignmentMatrix::from_rows(&[vec![0.5, 0.25, 0.25]]).unwrap();
        assert!(matches!(alignment_kl(&p, &r), Err(Error::Shape(_))));
    }

    #[test]
    fn positional_examples() {
        let c = positional_encoding(0.0, POSITIONAL_DIM);
        assert_eq!(c.0.len(), POSITIONAL_DIM);
        for pair in c.0.chunks(2) {
            assert_eq!(pair, [0.0, 1.0]);
        }
        assert_eq!(positional_encoding(1.25, 32), positional_encoding(2.25, 32));
    }

    #[test]
    fn positional_grad_matches_fd() {
        let h = 1e-6;
        for mu in [0.13, 1.47, 3.9, 7.02] {
            let g = positional_encoding_grad(mu, 32);
            let up = positional_encoding(mu + h, 32).0;
            let dn = positional_encoding(mu - h, 32).0;
            for k in 0..32 {
                let fd = (up[k] - dn[k]) / (2.0 * h);
                assert!((fd - g[k]).abs() <= 1e-4 * fd.abs().max(1.0), "k={k} fd={fd} an={}", g[k]);
            }
        }
    }

    #[test]
    fn normalized_gaussian_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mu: f64 = rng.gen_range(0.0..6.0);
            let sigma: f64 = rng.gen_range(0.3..2.0);
            let up: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let f = |m: f64, s: f64| -> f64 {
                normalized_gaussian(m, s, 7).iter().zip(&up).map(|(a, b)| a * b).sum()
            };
            let alpha = normalized_gaussian(mu, sigma, 7);
            let (dmu, ds) = normalized_gaussian_grad(mu, sigma, &alpha, &up);
            let h = 1e-5;
            let fdm = (f(mu + h, sigma) - f(mu - h, sigma)) / (2.0 * h);
            let fds = (f(mu, sigma + h) - f(mu, sigma - h)) / (2.0 * h);
            assert!((fdm - dmu).abs() < 1e-6 + 1e-4 * fdm.abs());
            assert!((fds - ds).abs() < 1e-6 + 1e-4 * fds.abs());
        }
    }

    proptest! {
        #[test]
        fn trace_is_strictly_monotone(seed in 0u64..500, len in 1usize..60) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = AttentionParams::random(6, 3.0, &mut rng);
            let mut state = AttentionState::initial();
            for step in 0..len {
                let h: Vec<f64> = (0..6).map(|_| rng.gen_range(-5.0..5.0)).collect();
                let (_, next) = attention_step(&h, &state, &params, 10, step).unwrap();
                prop_assert!(next.mu > state.mu);
                prop_assert!(next.delta > 0.0 && next.delta < 1.0);
                prop_assert!(next.sigma > 0.0);
                state = next;
            }
        }

        #[test]
        fn counts_partition_the_trace(incs in proptest::collection::vec(0.01f64..0.99, 1..80), n_enc in 1usize..30) {
            let mut mu = 0.0;
            let mus: Vec<f64> = incs.iter().map(|d| { mu += d; mu }).collect();
            let raw = count_durations(&mus, n_enc).unwrap();
            prop_assert_eq!(raw.total(), mus.len());
            // every bin crossed between the first and last attributed index is visited
            let first = attributed_index(mus[0], n_enc);
            let last = attributed_index(*mus.last().unwrap(), n_enc);
            for k in first..=last {
                prop_assert!(raw.0[k] >= 1);
            }
        }

        // exact up to about 0.28; durations like 11, 1, 12 break it just below 0.3
        #[test]
        fn upsample_round_trips(d in proptest::collection::vec(1usize..=12, 1..40), r in 0.01f64..0.25) {
            let dv = DurationVector(d.clone());
            let ranges = vec![r; d.len()];
            let a = gaussian_upsample(&dv, &ranges, dv.total()).unwrap();
            let mus: Vec<f64> = (0..a.rows()).map(|i| centroid(a.row(i))).collect();
            prop_assert_eq!(extract_durations(&mus, d.len()).unwrap().0, d);
        }

        #[test]
        fn kl_is_nonnegative(rows in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 4), 1..6),
                             qs in proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, 4), 6)) {
            let p = AlignmentMatrix::from_rows(&rows).unwrap();
            let q = AlignmentMatrix::from_rows(&qs[..rows.len()]).unwrap().normalized();
            prop_assert!(alignment_kl(&p, &q).unwrap() >= 0.0);
            prop_assert_eq!(alignment_kl(&q, &q).unwrap(), 0.0);
        }
    }
}
