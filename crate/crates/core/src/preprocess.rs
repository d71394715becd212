//! CIR recording → model-ready samples of shape `(2, N, R, W)`.
//!
//! Slow time is cut into windows of `W` packets with step `δ`. In each window
//! the `R` range bins with the largest joint interquartile range
//! (IQR of the real part + IQR of the imaginary part over the window) are kept,
//! in ascending bin order. Consecutive windows are grouped into segments of `N`
//! with an `N/2` overlap, and each segment is min-max normalized as a whole.

use num_complex::Complex64;

use crate::data_io::CirRecording;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PreprocessParams {
    /// Window length `W` in packets.
    pub window: usize,
    /// Window step `δ` in packets.
    pub step: usize,
    /// Range bins kept per window, `R`.
    pub bins: usize,
    /// Windows per sample, `N`.
    pub segment: usize,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        Self { window: 64, step: 32, bins: 10, segment: 232 }
    }
}

impl PreprocessParams {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.step == 0 || self.bins == 0 || self.segment < 2 {
            return Err(Error::config(format!("invalid preprocessing parameters {self:?}")));
        }
        Ok(())
    }

    pub fn sample_shape(&self) -> [usize; 4] {
        [2, self.segment, self.bins, self.window]
    }

    /// Samples produced from a recording of `packets` packets.
    pub fn expected_samples(&self, packets: usize) -> usize {
        if packets < self.window {
            return 0;
        }
        let windows = (packets - self.window) / self.step + 1;
        segment_starts(windows, self.segment).len()
    }
}

/// A preprocessed sample with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub data: Tensor,
    pub label: usize,
    pub subject: u8,
    pub recording: usize,
    pub segment: usize,
}

/// `(start, end)` packet ranges of every full window.
pub fn window_slices(packets: usize, window: usize, step: usize) -> Result<Vec<(usize, usize)>> {
    if step == 0 || window == 0 {
        return Err(Error::config("window length and step must be positive"));
    }
    if packets < window {
        return Err(Error::contract(format!("recording of {packets} packets is shorter than one window ({window})")));
    }
    Ok((0..=(packets - window) / step).map(|i| (i * step, i * step + window)).collect())
}

/// Linear-interpolation percentile of already sorted values, `q` in [0,1].
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn iqr(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    percentile_sorted(&v, 0.75) - percentile_sorted(&v, 0.25)
}

/// Picks the `r` most variable bins of a `rows × bins` window (row-major).
/// Ties go to the lower bin index; the result is sorted ascending.
pub fn iqr_select_bins(window: &[Complex64], rows: usize, bins: usize, r: usize) -> Result<Vec<usize>> {
    if bins < r {
        return Err(Error::contract(format!("cannot keep {r} bins out of {bins}")));
    }
    if window.len() != rows * bins || rows == 0 {
        return Err(Error::dim("iqr_select_bins", format!("{} values for {rows}×{bins}", window.len())));
    }
    let mut re = vec![0.0; rows];
    let mut im = vec![0.0; rows];
    let mut scored: Vec<(f64, usize)> = (0..bins)
        .map(|b| {
            for t in 0..rows {
                let c = window[t * bins + b];
                re[t] = c.re;
                im[t] = c.im;
            }
            (iqr(&re) + iqr(&im), b)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut keep: Vec<usize> = scored[..r].iter().map(|&(_, b)| b).collect();
    keep.sort_unstable();
    Ok(keep)
}

/// `(x - min) / (max - min)` over the whole tensor; all zeros when constant.
pub fn minmax_normalize(x: &Tensor) -> Tensor {
    let (lo, hi) = x.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = hi - lo;
    if !(span > 0.0) {
        return Tensor::zeros(x.shape());
    }
    x.map(|v| (v - lo) / span)
}

/// Segment start indices for `windows` windows grouped by `n` with `n/2` overlap.
pub fn segment_starts(windows: usize, n: usize) -> Vec<usize> {
    if n == 0 || windows < n {
        return Vec::new();
    }
    let hop = (n / 2).max(1);
    (0..).map(|i| i * hop).take_while(|s| s + n <= windows).collect()
}

/// Groups an ordered window list into overlapping segments of `n` windows.
pub fn segment_sequence<T: Clone>(windows: &[T], n: usize) -> Vec<Vec<T>> {
    segment_starts(windows.len(), n).into_iter().map(|s| windows[s..s + n].to_vec()).collect()
}

/// Full pipeline for one recording. Recordings too short for a single sample
/// yield an empty list.
pub fn build_samples(rec: &CirRecording, params: &PreprocessParams, recording_id: usize) -> Result<Vec<Sample>> {
    params.validate()?;
    if rec.packets < params.window {
        return Ok(Vec::new());
    }
    let PreprocessParams { window: w, bins: r, segment: n, .. } = *params;
    let slices = window_slices(rec.packets, w, params.step)?;
    if slices.len() < n {
        return Ok(Vec::new());
    }
    // per window: [2][R][W] real/imag of the selected bins
    let mut features: Vec<Vec<f64>> = Vec::with_capacity(slices.len());
    let mut buf = vec![Complex64::new(0.0, 0.0); w * rec.bins];
    for &(start, _) in &slices {
        for t in 0..w {
            for b in 0..rec.bins {
                let c = rec.at(start + t, b);
                buf[t * rec.bins + b] = Complex64::new(c.re as f64, c.im as f64);
            }
        }
        let keep = iqr_select_bins(&buf, w, rec.bins, r)?;
        let mut f = vec![0.0; 2 * r * w];
        for (ri, &b) in keep.iter().enumerate() {
            for t in 0..w {
                let c = buf[t * rec.bins + b];
                f[ri * w + t] = c.re;
                f[(r + ri) * w + t] = c.im;
            }
        }
        features.push(f);
    }
    let plane = r * w;
    segment_starts(features.len(), n)
        .into_iter()
        .enumerate()
        .map(|(seg, s)| {
            let mut data = vec![0.0; 2 * n * plane];
            for (ni, f) in features[s..s + n].iter().enumerate() {
                for c in 0..2 {
                    data[(c * n + ni) * plane..(c * n + ni + 1) * plane].copy_from_slice(&f[c * plane..(c + 1) * plane]);
                }
            }
            let t = Tensor::new(vec![2, n, r, w], data)?;
            Ok(Sample {
                data: minmax_normalize(&t),
                label: rec.label as usize,
                subject: rec.subject,
                recording: recording_id,
                segment: seg,
            })
        })
        .collect()
}
