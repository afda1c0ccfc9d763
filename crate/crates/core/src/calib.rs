//! Range calibrators: max-min, entropy (KL) over an |x| histogram, and a
//! grid search over clipping thresholds minimizing the squared
//! fake-quantization error.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::quant::{scale_from_range, QuantParams};
use crate::{Error, Real, Result, Tensor};

/// Half-width used for tensors with no dynamic range at all.
pub const DEGENERATE_EPS: f64 = 1e-8;
/// Default histogram resolution for entropy calibration.
pub const ENTROPY_BINS: usize = 2048;
/// Mass spread over empty candidate bins before taking logs.
pub const KL_SMOOTHING: f64 = 1e-10;

/// Symmetric `(-max|x|, max|x|)`; an all-zero tensor maps to `(-eps, eps)`.
pub fn maxmin_range<T: Real>(x: &[T]) -> Result<(f64, f64)> {
    if x.is_empty() {
        return Err(Error::EmptyTensor);
    }
    let mut m = 0.0f64;
    for (index, v) in x.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { index });
        }
        m = m.max(v.as_f64().abs());
    }
    if m == 0.0 {
        m = DEGENERATE_EPS;
    }
    Ok((-m, m))
}

/// Equal-width histogram of `|x|` over `[origin, origin + n * bin_width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bin_counts: Vec<u64>,
    pub bin_width: f64,
    pub origin: f64,
}

impl Histogram {
    /// Empty histogram of `|x|` covering `[0, max_abs]`.
    pub fn with_range(max_abs: f64, n_bins: usize) -> Result<Self> {
        if n_bins < 2 {
            return Err(Error::InvalidConfig(alloc::format!("histogram needs >= 2 bins, got {n_bins}")));
        }
        if !(max_abs > 0.0 && max_abs.is_finite()) {
            return Err(Error::AllZero);
        }
        Ok(Histogram { bin_counts: vec![0; n_bins], bin_width: max_abs / n_bins as f64, origin: 0.0 })
    }

    pub fn n_bins(&self) -> usize {
        self.bin_counts.len()
    }

    pub fn total(&self) -> u64 {
        self.bin_counts.iter().sum()
    }

    /// Adds `|x|` of every element; values past the last edge land in the last bin.
    pub fn accumulate<T: Real>(&mut self, x: &[T]) -> Result<()> {
        let last = self.bin_counts.len() - 1;
        for (index, v) in x.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { index });
            }
            let a = v.as_f64().abs() - self.origin;
            let b = Float::floor(a / self.bin_width);
            let b = if b < 0.0 { 0 } else { (b as usize).min(last) };
            self.bin_counts[b] += 1;
        }
        Ok(())
    }

    /// Adds another histogram with identical binning.
    pub fn merge(&mut self, other: &Histogram) -> Result<()> {
        if other.bin_counts.len() != self.bin_counts.len()
            || other.bin_width != self.bin_width
            || other.origin != self.origin
        {
            return Err(Error::LengthMismatch { left: self.bin_counts.len(), right: other.bin_counts.len() });
        }
        for (a, b) in self.bin_counts.iter_mut().zip(&other.bin_counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Histogram of `|x|` over `[0, max|x|]`.
pub fn build_histogram<T: Real>(x: &[T], n_bins: usize) -> Result<Histogram> {
    let (_, max_abs) = maxmin_range(x)?;
    if max_abs <= DEGENERATE_EPS {
        return Err(Error::AllZero);
    }
    let mut h = Histogram::with_range(max_abs, n_bins)?;
    h.accumulate(x)?;
    Ok(h)
}

/// `sum_i p_i log p_i - p_i log q_i` with `0 log 0 = 0`; `q_i = 0 < p_i` gives `+inf`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch { left: p.len(), right: q.len() });
    }
    let mut d = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Ok(f64::INFINITY);
            }
            d += pi * Float::ln(pi) - pi * Float::ln(qi);
        }
    }
    Ok(d)
}

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
    }
}

/// Moves `eps` onto each empty bin, taken evenly from the occupied ones.
fn smooth(q: &mut [f64], eps: f64) {
    let zeros = q.iter().filter(|&&v| v == 0.0).count();
    let nonzero = q.len() - zeros;
    if zeros == 0 || nonzero == 0 {
        return;
    }
    let take = eps * zeros as f64 / nonzero as f64;
    for v in q.iter_mut() {
        if *v == 0.0 {
            *v = eps;
        } else {
            *v = (*v - take).max(eps);
        }
    }
}

/// Resamples `bins` (length `i`) onto `levels` equal-mass-preserving buckets
/// and back by linear interpolation of the per-bin density.
pub(crate) fn requantize_linear(bins: &[f64], levels: usize) -> Vec<f64> {
    let i = bins.len();
    let width = i as f64 / levels as f64;
    // bucket masses with fractional overlap of source bins
    let mut mass = vec![0.0; levels];
    for (k, &c) in bins.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let (lo, hi) = (k as f64, k as f64 + 1.0);
        let first = (Float::floor(lo / width) as usize).min(levels - 1);
        let last = (Float::floor((hi - 1e-12) / width) as usize).min(levels - 1);
        for (j, m) in mass.iter_mut().enumerate().take(last + 1).skip(first) {
            let a = lo.max(j as f64 * width);
            let b = hi.min((j + 1) as f64 * width);
            if b > a {
                *m += c * (b - a);
            }
        }
    }
    let density: Vec<f64> = mass.iter().map(|m| m / width).collect();
    let center = |j: usize| (j as f64 + 0.5) * width;
    let mut out = vec![0.0; i];
    for (k, o) in out.iter_mut().enumerate() {
        let x = k as f64 + 0.5;
        *o = if x <= center(0) {
            density[0]
        } else if x >= center(levels - 1) {
            density[levels - 1]
        } else {
            let j = (Float::floor(x / width - 0.5) as usize).min(levels - 2);
            let t = (x - center(j)) / width;
            density[j] * (1.0 - t) + density[j + 1] * t
        };
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyResult {
    pub threshold: f64,
    pub range: (f64, f64),
    /// Number of leading bins kept by the chosen candidate.
    pub index: usize,
    /// `divergence[i]` for candidates `i = 2^(b-1) .. N`, starting at offset 0.
    pub divergences: Vec<f64>,
    /// The histogram was degenerate and the max-min range was used instead.
    pub fallback: bool,
}

/// Threshold minimizing KL between the clipped reference distribution and
/// its `2^(bits-1)`-level requantization.
pub fn entropy_threshold(h: &Histogram, bits: u32) -> Result<EntropyResult> {
    let levels = 1usize << (bits - 1);
    let n = h.n_bins();
    if n <= levels {
        return Err(Error::InvalidConfig(alloc::format!(
            "entropy calibration needs more than {levels} bins, got {n}"
        )));
    }
    if h.total() == 0 {
        return Err(Error::AllZero);
    }
    let full = n as f64 * h.bin_width;
    let nonzero: Vec<usize> = (0..n).filter(|&k| h.bin_counts[k] > 0).collect();
    if nonzero.len() == 1 && nonzero[0] < levels {
        return Ok(EntropyResult {
            threshold: full,
            range: (-full, full),
            index: n,
            divergences: Vec::new(),
            fallback: true,
        });
    }
    let bins: Vec<f64> = h.bin_counts.iter().map(|&c| c as f64).collect();
    // suffix sums give the outlier mass for every candidate
    let mut tail = vec![0.0; n + 1];
    for k in (0..n).rev() {
        tail[k] = tail[k + 1] + bins[k];
    }
    let mut divergences = Vec::with_capacity(n - levels);
    let mut best = (f64::INFINITY, levels);
    for i in levels..n {
        let mut p = bins[..i].to_vec();
        p[i - 1] += tail[i];
        normalize(&mut p);
        let mut q = requantize_linear(&bins[..i], levels);
        normalize(&mut q);
        smooth(&mut q, KL_SMOOTHING);
        let d = kl_divergence(&p, &q)?;
        if d < best.0 {
            best = (d, i);
        }
        divergences.push(d);
    }
    let m = best.1;
    let threshold = (m as f64 + 0.5) * h.bin_width + h.origin;
    Ok(EntropyResult { threshold, range: (-threshold, threshold), index: m, divergences, fallback: false })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchConfig {
    /// Number of candidate thresholds `T`.
    pub candidates: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Use the descending `range / T / i` sweep instead of the linear one.
    pub literal_sweep: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { candidates: 100, alpha: 0.01, beta: 1.2, literal_sweep: false }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidates == 0 || !(self.alpha > 0.0) || self.alpha > self.beta {
            return Err(Error::InvalidConfig(alloc::format!("invalid search config {self:?}")));
        }
        Ok(())
    }

    /// Candidate clipping thresholds for a tensor with `max|x| = range`.
    ///
    /// The linear sweep spans `[alpha, beta] * range` with `T` points and also
    /// contains the max-min threshold itself whenever `alpha <= 1 <= beta`.
    pub fn thresholds(&self, range: f64) -> Vec<f64> {
        let t = self.candidates;
        if self.literal_sweep {
            return (1..t.max(2)).map(|i| range / t as f64 / i as f64).collect();
        }
        let mut out: Vec<f64> = if t == 1 {
            vec![self.beta * range]
        } else {
            (0..t)
                .map(|i| range * (self.alpha + (self.beta - self.alpha) * i as f64 / (t - 1) as f64))
                .collect()
        };
        if self.alpha <= 1.0 && self.beta >= 1.0 && !out.contains(&range) {
            out.push(range);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSearchResult {
    pub params: QuantParams,
    pub threshold: f64,
    pub mse: f64,
    pub degenerate: bool,
}

/// Squared fake-quantization error `||x - fq(x)||^2`, summed in element order.
pub fn quant_sq_error<T: Real>(x: &[T], p: &QuantParams) -> f64 {
    x.iter()
        .map(|&v| {
            let v = v.as_f64();
            let d = v - p.value(p.code(v, 0.0));
            d * d
        })
        .sum()
}

/// Grid search over symmetric clipping thresholds; ties go to the larger threshold.
pub fn grid_search_scale<T: Real>(x: &[T], bits: u32, cfg: &SearchConfig) -> Result<GridSearchResult> {
    cfg.validate()?;
    let (_, range) = maxmin_range(x)?;
    if range <= DEGENERATE_EPS {
        let params = QuantParams::symmetric(DEGENERATE_EPS, bits)?;
        return Ok(GridSearchResult { params, threshold: DEGENERATE_EPS, mse: quant_sq_error(x, &params), degenerate: true });
    }
    let mut best: Option<GridSearchResult> = None;
    for t in cfg.thresholds(range) {
        let params = scale_from_range(-t, t, bits)?;
        let mse = quant_sq_error(x, &params);
        let better = match &best {
            None => true,
            Some(b) => mse < b.mse || (mse == b.mse && t > b.threshold),
        };
        if better {
            best = Some(GridSearchResult { params, threshold: t, mse, degenerate: false });
        }
    }
    Ok(best.expect("at least one candidate"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CalibMethod {
    MaxMin,
    Entropy,
    MaxMinGrid,
}

impl CalibMethod {
    pub fn name(&self) -> &'static str {
        match self {
            CalibMethod::MaxMin => "maxmin",
            CalibMethod::Entropy => "entropy",
            CalibMethod::MaxMinGrid => "maxmin_grid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "maxmin" => Some(CalibMethod::MaxMin),
            "entropy" => Some(CalibMethod::Entropy),
            "maxmin_grid" => Some(CalibMethod::MaxMinGrid),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCalibration {
    pub weights: QuantParams,
    pub activations: QuantParams,
    /// The activation calibrator fell back to max-min (degenerate data).
    pub fallback: bool,
}

/// Max-min parameters for a tensor.
pub fn maxmin_params<T: Real>(x: &[T], bits: u32) -> Result<QuantParams> {
    let (lo, hi) = maxmin_range(x)?;
    scale_from_range(lo, hi, bits)
}

/// Activation parameters from a set of calibration batches.
///
/// Statistics are pooled over every batch before searching. Entropy uses a
/// shared `|x|` histogram whose range is the pooled maximum.
pub fn calibrate_activations<T: Real>(
    batches: &[Tensor<T>],
    method: CalibMethod,
    bits: u32,
    cfg: &SearchConfig,
) -> Result<(QuantParams, bool)> {
    if batches.is_empty() || batches.iter().all(|b| b.is_empty()) {
        return Err(Error::EmptyCalibration);
    }
    match method {
        CalibMethod::MaxMin => {
            let mut m = 0.0f64;
            for b in batches {
                let (_, hi) = maxmin_range(b.data())?;
                m = m.max(hi);
            }
            Ok((scale_from_range(-m, m, bits)?, false))
        }
        CalibMethod::MaxMinGrid => {
            let pooled: Vec<T> = batches.iter().flat_map(|b| b.data().iter().copied()).collect();
            let r = grid_search_scale(&pooled, bits, cfg)?;
            Ok((r.params, r.degenerate))
        }
        CalibMethod::Entropy => {
            let mut m = 0.0f64;
            for b in batches {
                let (_, hi) = maxmin_range(b.data())?;
                m = m.max(hi);
            }
            if m <= DEGENERATE_EPS {
                return Ok((QuantParams::symmetric(DEGENERATE_EPS, bits)?, true));
            }
            let mut hist = Histogram::with_range(m, ENTROPY_BINS.max((1 << (bits - 1)) + 1))?;
            for b in batches {
                let mut part = Histogram { bin_counts: vec![0; hist.n_bins()], ..hist.clone() };
                part.accumulate(b.data())?;
                hist.merge(&part)?;
            }
            let r = entropy_threshold(&hist, bits)?;
            let (lo, hi) = r.range;
            Ok((scale_from_range(lo, hi, bits)?, r.fallback))
        }
    }
}

/// Weight and activation parameters for one layer.
///
/// Weights use max-min for the max-min and entropy methods and the grid
/// search for `MaxMinGrid`; activations use the chosen method.
pub fn calibrate_layer<T: Real>(
    activations: &[Tensor<T>],
    weights: &Tensor<T>,
    method: CalibMethod,
    bits: u32,
    cfg: &SearchConfig,
) -> Result<LayerCalibration> {
    let (a, fallback) = calibrate_activations(activations, method, bits, cfg)?;
    let w = match method {
        CalibMethod::MaxMinGrid => grid_search_scale(weights.data(), bits, cfg)?.params,
        _ => maxmin_params(weights.data(), bits)?,
    };
    Ok(LayerCalibration { weights: w, activations: a, fallback })
}
