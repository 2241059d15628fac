//! Least-squares FIR matching of a close-talk source to array channels.
//!
//! For every channel `c` we solve `min_h |target_c - h * source|^2` over
//! causal taps `h` of length `filter_len`, via the normal equations with a
//! small Tikhonov term (`1e-6 * trace / filter_len`) on the diagonal.

use crate::signal::{energy, MultiChannelSignal, SignalError};

/// Default filter length (taps at 16 kHz).
pub const DEFAULT_FILTER_LEN: usize = 512;

const RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceFilter {
    pub filtered: MultiChannelSignal,
    pub residual: MultiChannelSignal,
    /// `taps[c][k]`: tap `k` of the filter for channel `c`.
    pub taps: Vec<Vec<f64>>,
}

/// Causal FIR convolution truncated to `source.len()` samples.
pub fn fir_filter(source: &[f64], taps: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; source.len()];
    for (t, o) in out.iter_mut().enumerate() {
        let kmax = taps.len().min(t + 1);
        let mut acc = 0.0;
        for k in 0..kmax {
            acc += taps[k] * source[t - k];
        }
        *o = acc;
    }
    out
}

/// Autocorrelation matrix of the windowed data matrix, `R[i][j] = sum_t s[t-i] s[t-j]`.
fn covariance(source: &[f64], order: usize) -> Vec<Vec<f64>> {
    let n = source.len();
    let mut r = vec![vec![0.0; order]; order];
    for lag in 0..order {
        r[0][lag] = (lag..n).map(|t| source[t] * source[t - lag]).sum();
    }
    for i in 1..order {
        for j in i..order {
            r[i][j] = r[i - 1][j - 1] - source[n - i] * source[n - j];
        }
    }
    for i in 0..order {
        for j in 0..i {
            r[i][j] = r[j][i];
        }
    }
    r
}

/// In-place Cholesky factorization (lower triangle). Returns `false` if the
/// matrix is not positive definite.
fn cholesky(a: &mut [Vec<f64>]) -> bool {
    let n = a.len();
    for j in 0..n {
        let mut d = a[j][j];
        for k in 0..j {
            d -= a[j][k] * a[j][k];
        }
        if d <= 0.0 || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j][j] = d;
        for i in j + 1..n {
            let mut s = a[i][j];
            for k in 0..j {
                s -= a[i][k] * a[j][k];
            }
            a[i][j] = s / d;
        }
    }
    true
}

fn cholesky_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = l.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * y[k];
        }
        y[i] = s / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    x
}

/// Finds the per-channel FIR that best maps `source` onto `target` and splits
/// the target into `filtered + residual`.
pub fn estimate_reference_filter(
    source: &[f64],
    target: &MultiChannelSignal,
    filter_len: usize,
) -> Result<ReferenceFilter, SignalError> {
    let n = target.num_frames();
    if source.len() != n {
        return Err(SignalError::ShapeMismatch(format!(
            "source has {} samples, target has {n}",
            source.len()
        )));
    }
    if filter_len == 0 || filter_len > n {
        return Err(SignalError::ShapeMismatch(format!(
            "filter length {filter_len} must be in 1..={n}"
        )));
    }
    if energy(source) <= 0.0 {
        return Err(SignalError::DegenerateSource);
    }

    let r = covariance(source, filter_len);
    let trace: f64 = (0..filter_len).map(|i| r[i][i]).sum();
    let mut ridge = RIDGE * trace / filter_len as f64;
    let factor = loop {
        let mut a = r.clone();
        for (i, row) in a.iter_mut().enumerate() {
            row[i] += ridge;
        }
        if cholesky(&mut a) {
            break a;
        }
        ridge *= 10.0;
    };

    let mut taps = Vec::with_capacity(target.num_channels());
    let mut filtered = Vec::with_capacity(target.num_channels());
    let mut residual = Vec::with_capacity(target.num_channels());
    for y in target.channels() {
        let p: Vec<f64> = (0..filter_len)
            .map(|k| (k..n).map(|t| y[t] * source[t - k]).sum())
            .collect();
        let h = cholesky_solve(&factor, &p);
        let f = fir_filter(source, &h);
        residual.push(y.iter().zip(&f).map(|(a, b)| a - b).collect());
        filtered.push(f);
        taps.push(h);
    }
    let sr = target.sample_rate();
    Ok(ReferenceFilter {
        filtered: MultiChannelSignal::new(filtered, sr)?,
        residual: MultiChannelSignal::new(residual, sr)?,
        taps,
    })
}
