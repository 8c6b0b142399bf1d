//! Spectral estimation and the analysis chain applied to recorded currents.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_positive, Error, Result};
use crate::modes::K_B;
use crate::simulator::TimeSeries;
use crate::spectra::resonator_psd;

/// Shortest accepted Welch segment.
pub const MIN_SEGMENT: usize = 256;

/// Segments transformed together before being added to the running sum.
const BATCH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    #[default]
    Hann,
    Rectangular,
}

impl Window {
    pub fn coefficients(&self, n: usize) -> Vec<f64> {
        match self {
            // periodic Hann
            Window::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
                .collect(),
            Window::Rectangular => vec![1.0; n],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchConfig {
    pub segment_length: usize,
    pub overlap: f64,
    pub window: Window,
    pub detrend: bool,
}

impl WelchConfig {
    pub fn new(segment_length: usize) -> Result<Self> {
        let cfg = WelchConfig {
            segment_length,
            overlap: 0.5,
            window: Window::Hann,
            detrend: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Smallest power-of-two segment giving `bins` frequency bins across `linewidth_hz`.
    pub fn for_linewidth(fs: f64, linewidth_hz: f64, bins: f64) -> Result<Self> {
        ensure_positive("fs_hz", fs)?;
        ensure_positive("linewidth_hz", linewidth_hz)?;
        let n = (bins * fs / linewidth_hz).ceil().max(MIN_SEGMENT as f64) as usize;
        WelchConfig::new(n.next_power_of_two())
    }

    pub fn validate(&self) -> Result<()> {
        if self.segment_length < MIN_SEGMENT {
            return Err(Error::validation(
                "segment_length",
                format!("must be at least {MIN_SEGMENT}, got {}", self.segment_length),
            ));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::validation("overlap", format!("must lie in [0, 1), got {}", self.overlap)));
        }
        Ok(())
    }

    /// Samples between consecutive segment starts.
    pub fn hop(&self) -> usize {
        (((1.0 - self.overlap) * self.segment_length as f64).round() as usize).max(1)
    }

    /// Number of whole segments that fit in `len` samples.
    pub fn segments_for(&self, len: usize) -> usize {
        if len < self.segment_length {
            0
        } else {
            (len - self.segment_length) / self.hop() + 1
        }
    }
}

/// Single-sided PSD estimate on the grid `k * fs / segment_length`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PsdEstimate {
    pub fs: f64,
    pub segment_length: usize,
    pub frequencies: Vec<f64>,
    pub values: Vec<f64>,
    pub n_averages: usize,
    pub window_corrected: bool,
}

impl PsdEstimate {
    pub fn df(&self) -> f64 {
        self.fs / self.segment_length as f64
    }

    /// Sum of `values * df`, the variance seen by the estimator.
    pub fn total_power(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.df()
    }

    /// Frequencies and values with `f_lo <= f <= f_hi`.
    pub fn band(&self, f_lo: f64, f_hi: f64) -> (Vec<f64>, Vec<f64>) {
        self.frequencies
            .iter()
            .zip(&self.values)
            .filter(|(f, _)| **f >= f_lo && **f <= f_hi)
            .map(|(f, v)| (*f, *v))
            .unzip()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("frequency_hz,psd_a2_per_hz\n");
        for (f, v) in self.frequencies.iter().zip(&self.values) {
            out.push_str(&format!("{f:.16e},{v:.16e}\n"));
        }
        out
    }
}

/// Streaming Welch estimator: feed samples in any chunking, read the estimate
/// at the end. The result does not depend on how the input was chunked.
pub struct WelchAccumulator {
    cfg: WelchConfig,
    fs: f64,
    window: Vec<f64>,
    window_power: f64,
    fft: Arc<dyn Fft<f64>>,
    pending: Vec<f64>,
    batch: Vec<Vec<f64>>,
    sum: Vec<f64>,
    count: usize,
}

impl WelchAccumulator {
    pub fn new(cfg: WelchConfig, fs: f64) -> Result<Self> {
        cfg.validate()?;
        ensure_positive("fs_hz", fs)?;
        let window = cfg.window.coefficients(cfg.segment_length);
        let window_power = window.iter().map(|w| w * w).sum();
        let fft = FftPlanner::new().plan_fft_forward(cfg.segment_length);
        Ok(WelchAccumulator {
            cfg,
            fs,
            window,
            window_power,
            fft,
            pending: Vec::with_capacity(2 * cfg.segment_length),
            batch: Vec::with_capacity(BATCH),
            sum: vec![0.0; cfg.segment_length / 2 + 1],
            count: 0,
        })
    }

    pub fn push(&mut self, x: f64) {
        self.pending.push(x);
        if self.pending.len() == self.cfg.segment_length {
            self.cut_segment();
        }
    }

    pub fn extend(&mut self, xs: &[f64]) {
        for &x in xs {
            self.push(x);
        }
    }

    fn cut_segment(&mut self) {
        self.batch.push(self.pending.clone());
        let hop = self.cfg.hop().min(self.cfg.segment_length);
        self.pending.drain(..hop);
        if self.batch.len() == BATCH {
            self.flush();
        }
    }

    fn flush(&mut self) {
        if self.batch.is_empty() {
            return;
        }
        let spectra: Vec<Vec<f64>> = self
            .batch
            .par_iter()
            .map(|seg| periodogram(seg, &self.window, self.cfg.detrend, self.fft.as_ref()))
            .collect();
        // fixed summation order keeps the result independent of thread count
        for s in &spectra {
            for (a, b) in self.sum.iter_mut().zip(s) {
                *a += b;
            }
        }
        self.count += spectra.len();
        self.batch.clear();
    }

    pub fn segments(&self) -> usize {
        self.count + self.batch.len()
    }

    pub fn finish(mut self) -> Result<PsdEstimate> {
        self.flush();
        if self.count == 0 {
            return Err(Error::Length {
                len: self.pending.len(),
                needed: self.cfg.segment_length,
            });
        }
        let n = self.cfg.segment_length;
        let norm = 1.0 / (self.fs * self.window_power * self.count as f64);
        let last = n / 2;
        let values = self
            .sum
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let one_sided = if k == 0 || (n % 2 == 0 && k == last) { 1.0 } else { 2.0 };
                s * norm * one_sided
            })
            .collect();
        let frequencies = (0..=last).map(|k| k as f64 * self.fs / n as f64).collect();
        Ok(PsdEstimate {
            fs: self.fs,
            segment_length: n,
            frequencies,
            values,
            n_averages: self.count,
            window_corrected: true,
        })
    }
}

fn periodogram(seg: &[f64], window: &[f64], detrend: bool, fft: &dyn Fft<f64>) -> Vec<f64> {
    let mean = if detrend { seg.iter().sum::<f64>() / seg.len() as f64 } else { 0.0 };
    let mut buf: Vec<Complex64> = seg
        .iter()
        .zip(window)
        .map(|(x, w)| Complex64::new((x - mean) * w, 0.0))
        .collect();
    fft.process(&mut buf);
    buf[..seg.len() / 2 + 1].iter().map(|z| z.norm_sqr()).collect()
}

pub fn welch_psd_samples(samples: &[f64], fs: f64, cfg: &WelchConfig) -> Result<PsdEstimate> {
    cfg.validate()?;
    if samples.len() < cfg.segment_length {
        return Err(Error::Length {
            len: samples.len(),
            needed: cfg.segment_length,
        });
    }
    let mut acc = WelchAccumulator::new(*cfg, fs)?;
    acc.extend(samples);
    acc.finish()
}

/// Welch estimate of the measured channel of `series`.
pub fn welch_psd(series: &TimeSeries, cfg: &WelchConfig) -> Result<PsdEstimate> {
    welch_psd_samples(series.measured(), series.fs, cfg)
}

/// Fitted parameters of one mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeEstimate {
    pub index: usize,
    pub l_henry: f64,
    pub t_kelvin: f64,
    pub t_stderr: f64,
    pub f_hz: f64,
    pub f_stderr: f64,
    pub q_prime: f64,
    pub q_prime_stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConvergence {
    pub iterations: usize,
    pub converged: bool,
    /// Weighted residual sum of squares per degree of freedom.
    pub residual: f64,
    pub n_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeFitResult {
    pub schema: String,
    pub modes: Vec<ModeEstimate>,
    pub floor_a2_per_hz: f64,
    pub floor_stderr: f64,
    pub band_hz: [f64; 2],
    /// Parameter covariance in the order (ln T, f, ln Q') per mode, then floor.
    pub covariance: Vec<Vec<f64>>,
    pub convergence: FitConvergence,
}

pub const FIT_SCHEMA: &str = "colddamp-fit/1";

impl ModeFitResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fit result serializes")
    }

    pub fn mode(&self, index: usize) -> Option<&ModeEstimate> {
        self.modes.iter().find(|m| m.index == index)
    }

    /// Model spectrum at `f`, A^2/Hz.
    pub fn model(&self, f: f64) -> f64 {
        self.floor_a2_per_hz
            + self
                .modes
                .iter()
                .map(|m| resonator_psd(m.t_kelvin, m.f_hz, m.q_prime, m.l_henry, f))
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Fit band; `None` spans the detected peaks plus `band_linewidths` on each side.
    pub band: Option<(f64, f64)>,
    pub band_linewidths: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    /// Minimum peak height over the median level.
    pub peak_threshold: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            band: None,
            band_linewidths: 30.0,
            max_iterations: 200,
            tolerance: 1e-8,
            peak_threshold: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Peak {
    f: f64,
    height: f64,
    fwhm: f64,
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    if v.is_empty() {
        0.0
    } else {
        v[v.len() / 2]
    }
}

/// Centred running mean over `width` bins, shrinking at the edges.
fn smooth(vals: &[f64], width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut prefix = vec![0.0; vals.len() + 1];
    for (i, v) in vals.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
    }
    (0..vals.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(vals.len());
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// Bins averaged before peak search; keeps noisy estimates from splitting one line.
const PEAK_SMOOTHING: usize = 5;

/// Picks up to `n` peaks by repeated maximum search with masking.
fn find_peaks(freqs: &[f64], raw: &[f64], n: usize, threshold: f64) -> Vec<Peak> {
    let vals = smooth(raw, PEAK_SMOOTHING);
    let level = median(raw);
    let df = if freqs.len() > 1 { freqs[1] - freqs[0] } else { 1.0 };
    let mut masked = vec![false; vals.len()];
    let mut peaks = Vec::new();
    while peaks.len() < n {
        let best = (0..vals.len())
            .filter(|&i| !masked[i])
            .max_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        let Some(i) = best else { break };
        if vals[i] <= threshold * level {
            break;
        }
        let walk = |cut: f64| {
            let mut lo = i;
            while lo > 0 && vals[lo] > cut {
                lo -= 1;
            }
            let mut hi = i;
            while hi + 1 < vals.len() && vals[hi] > cut {
                hi += 1;
            }
            (lo, hi)
        };
        let half = 0.5 * (vals[i] + level);
        let (lo, hi) = walk(half);
        // interpolate the half-power crossings
        let cross = |a: usize, b: usize| -> f64 {
            let (va, vb) = (vals[a], vals[b]);
            if (vb - va).abs() > 0.0 {
                freqs[a] + (half - va) / (vb - va) * (freqs[b] - freqs[a])
            } else {
                freqs[a]
            }
        };
        let f_lo = if lo < i { cross(lo, lo + 1) } else { freqs[i] - 0.5 * df };
        let f_hi = if hi > i { cross(hi - 1, hi) } else { freqs[i] + 0.5 * df };
        let fwhm = (f_hi - f_lo).max(df);
        // parabolic refinement of the centre
        let f_peak = if i > 0 && i + 1 < vals.len() {
            let (a, b, c) = (vals[i - 1], vals[i], vals[i + 1]);
            let den = a - 2.0 * b + c;
            if den < 0.0 {
                freqs[i] + 0.5 * (a - c) / den * df
            } else {
                freqs[i]
            }
        } else {
            freqs[i]
        };
        peaks.push(Peak {
            f: f_peak,
            height: vals[i] - level.min(vals[i]),
            fwhm,
        });
        let (foot_lo, foot_hi) = walk(level + 0.05 * (vals[i] - level));
        let mask = (3.0 * fwhm).max(3.0 * df);
        for (j, f) in freqs.iter().enumerate() {
            if (f - f_peak).abs() <= mask || (foot_lo..=foot_hi).contains(&j) {
                masked[j] = true;
            }
        }
    }
    peaks.sort_by(|a, b| a.f.total_cmp(&b.f));
    peaks
}

struct Model<'a> {
    freqs: &'a [f64],
    ls: &'a [f64],
    floor_scale: f64,
}

impl Model<'_> {
    fn n_params(&self) -> usize {
        3 * self.ls.len() + 1
    }

    fn eval(&self, p: &[f64], out: &mut [f64]) {
        for (o, &f) in out.iter_mut().zip(self.freqs) {
            *o = p[3 * self.ls.len()] * self.floor_scale;
            for (k, &l) in self.ls.iter().enumerate() {
                *o += resonator_psd(p[3 * k].exp(), p[3 * k + 1], p[3 * k + 2].exp(), l, f);
            }
        }
    }

    /// Jacobian, rows = frequencies, columns = parameters.
    fn jacobian(&self, p: &[f64]) -> DMatrix<f64> {
        let m = self.ls.len();
        let mut j = DMatrix::zeros(self.freqs.len(), self.n_params());
        for (r, &f) in self.freqs.iter().enumerate() {
            let w = 2.0 * PI * f;
            for (k, &l) in self.ls.iter().enumerate() {
                let t = p[3 * k].exp();
                let wk = 2.0 * PI * p[3 * k + 1];
                let q = p[3 * k + 2].exp();
                let amp = 4.0 * K_B * t / l;
                let detune = w * w - wk * wk;
                let d = detune * detune + wk * wk * w * w / (q * q);
                let s = amp * wk * w * w / (q * d);
                let dd_dwk = -4.0 * wk * detune + 2.0 * wk * w * w / (q * q);
                let ds_dwk = amp * w * w / q * (1.0 / d - wk * dd_dwk / (d * d));
                j[(r, 3 * k)] = s;
                j[(r, 3 * k + 1)] = 2.0 * PI * ds_dwk;
                j[(r, 3 * k + 2)] = s * (-1.0 + 2.0 * wk * wk * w * w / (q * q) / d);
            }
            j[(r, 3 * m)] = self.floor_scale;
        }
        j
    }
}

/// Fits `sum_k` resonator lines plus a flat floor to `psd`. Inductances are
/// given in increasing-frequency order of the modes and labelled 1..n.
pub fn fit_modes(psd: &PsdEstimate, n_modes: usize, l_list: &[f64]) -> Result<ModeFitResult> {
    fit_modes_with(psd, n_modes, l_list, &FitOptions::default())
}

pub fn fit_modes_with(psd: &PsdEstimate, n_modes: usize, l_list: &[f64], opts: &FitOptions) -> Result<ModeFitResult> {
    fit_spectrum(&psd.frequencies, &psd.values, n_modes, l_list, opts)
}

/// Fit on an arbitrary uniformly spaced spectrum.
pub fn fit_spectrum(
    freqs: &[f64],
    values: &[f64],
    n_modes: usize,
    l_list: &[f64],
    opts: &FitOptions,
) -> Result<ModeFitResult> {
    if n_modes == 0 {
        return Err(Error::validation("n_modes", "must be at least 1"));
    }
    if l_list.len() != n_modes {
        return Err(Error::validation("l_list", format!("expected {n_modes} inductances, got {}", l_list.len())));
    }
    for &l in l_list {
        ensure_positive("l_henry", l)?;
    }
    if freqs.len() != values.len() || freqs.len() < 4 {
        return Err(Error::Length {
            len: freqs.len().min(values.len()),
            needed: 4,
        });
    }

    // peaks are searched inside the requested band, away from dc
    let (sf, sv): (Vec<f64>, Vec<f64>) = freqs
        .iter()
        .zip(values)
        .filter(|(f, _)| **f > 0.0 && opts.band.is_none_or(|(lo, hi)| **f >= lo && **f <= hi))
        .map(|(f, v)| (*f, *v))
        .unzip();
    let peaks = find_peaks(&sf, &sv, n_modes, opts.peak_threshold);
    if peaks.len() < n_modes {
        return Err(Error::PeakDetection {
            found: peaks.len(),
            expected: n_modes,
        });
    }

    let (lo, hi) = opts.band.unwrap_or_else(|| {
        let first = peaks.first().expect("peaks");
        let last = peaks.last().expect("peaks");
        (
            (first.f - opts.band_linewidths * first.fwhm).max(0.0),
            last.f + opts.band_linewidths * last.fwhm,
        )
    });
    let (bf, bv): (Vec<f64>, Vec<f64>) = freqs
        .iter()
        .zip(values)
        .filter(|(f, _)| **f >= lo && **f <= hi && **f > 0.0)
        .map(|(f, v)| (*f, *v))
        .unzip();
    let n_params = 3 * n_modes + 1;
    if bf.len() <= n_params {
        return Err(Error::Length {
            len: bf.len(),
            needed: n_params + 1,
        });
    }

    let level = median(&bv);
    let floor_scale = if level > 0.0 { level } else { 1.0 };
    let mut p = vec![0.0; n_params];
    for (k, (pk, &l)) in peaks.iter().zip(l_list).enumerate() {
        let q = (pk.f / pk.fwhm).max(1.5);
        let w = 2.0 * PI * pk.f;
        let t = (pk.height * w * l / (4.0 * K_B * q)).max(f64::MIN_POSITIVE);
        p[3 * k] = t.ln();
        p[3 * k + 1] = pk.f;
        p[3 * k + 2] = q.ln();
    }
    p[3 * n_modes] = 0.5;
    solve(&bf, &bv, l_list, floor_scale, p, [lo, hi], opts)
}

/// Refits `psd` starting from the parameters and band of `start`.
pub fn fit_modes_from(psd: &PsdEstimate, start: &ModeFitResult, opts: &FitOptions) -> Result<ModeFitResult> {
    let [lo, hi] = start.band_hz;
    let (bf, bv): (Vec<f64>, Vec<f64>) = psd
        .frequencies
        .iter()
        .zip(&psd.values)
        .filter(|(f, _)| **f >= lo && **f <= hi && **f > 0.0)
        .map(|(f, v)| (*f, *v))
        .unzip();
    let l_list: Vec<f64> = start.modes.iter().map(|m| m.l_henry).collect();
    let level = median(&bv);
    let floor_scale = if level > 0.0 { level } else { 1.0 };
    let mut p = Vec::with_capacity(3 * l_list.len() + 1);
    for m in &start.modes {
        p.extend([m.t_kelvin.ln(), m.f_hz, m.q_prime.ln()]);
    }
    p.push(start.floor_a2_per_hz / floor_scale);
    solve(&bf, &bv, &l_list, floor_scale, p, [lo, hi], opts)
}

fn solve(
    bf: &[f64],
    bv: &[f64],
    l_list: &[f64],
    floor_scale: f64,
    p: Vec<f64>,
    band: [f64; 2],
    opts: &FitOptions,
) -> Result<ModeFitResult> {
    let n_modes = l_list.len();
    let n_params = 3 * n_modes + 1;
    if bf.len() <= n_params {
        return Err(Error::Length {
            len: bf.len(),
            needed: n_params + 1,
        });
    }
    if p.iter().any(|x| !x.is_finite()) {
        return Err(Error::validation("initial parameters", "must be finite"));
    }
    let model = Model {
        freqs: bf,
        ls: l_list,
        floor_scale,
    };
    let lm = levenberg_marquardt(&model, bv, p, opts)?;
    let p = lm.params;

    let mut modes = Vec::with_capacity(n_modes);
    for (k, &l) in l_list.iter().enumerate() {
        let var = |i: usize| lm.covariance[(i, i)].max(0.0);
        let t = p[3 * k].exp();
        let q = p[3 * k + 2].exp();
        modes.push(ModeEstimate {
            index: k + 1,
            l_henry: l,
            t_kelvin: t,
            t_stderr: t * var(3 * k).sqrt(),
            f_hz: p[3 * k + 1],
            f_stderr: var(3 * k + 1).sqrt(),
            q_prime: q,
            q_prime_stderr: q * var(3 * k + 2).sqrt(),
        });
    }
    let mut cov = lm.covariance.clone();
    // floor entries in A^2/Hz
    for i in 0..n_params {
        cov[(i, n_params - 1)] *= floor_scale;
        cov[(n_params - 1, i)] *= floor_scale;
    }
    let covariance = (0..n_params)
        .map(|r| (0..n_params).map(|c| cov[(r, c)]).collect())
        .collect();
    if !lm.converged {
        return Err(Error::FitNonConvergence {
            iterations: lm.iterations,
            residual: lm.residual,
        });
    }
    Ok(ModeFitResult {
        schema: FIT_SCHEMA.into(),
        modes,
        floor_a2_per_hz: p[3 * n_modes] * floor_scale,
        floor_stderr: lm.covariance[(n_params - 1, n_params - 1)].max(0.0).sqrt() * floor_scale,
        band_hz: band,
        covariance,
        convergence: FitConvergence {
            iterations: lm.iterations,
            converged: lm.converged,
            residual: lm.residual,
            n_points: bf.len(),
        },
    })
}

struct LmOutcome {
    params: Vec<f64>,
    covariance: DMatrix<f64>,
    iterations: usize,
    converged: bool,
    residual: f64,
}

fn weighted_cost(data: &[f64], model: &[f64], weights: &[f64]) -> f64 {
    data.iter()
        .zip(model)
        .zip(weights)
        .map(|((d, m), w)| w * (d - m) * (d - m))
        .sum()
}

/// Damped Gauss-Newton with weights `1 / model^2` refreshed every iteration.
fn levenberg_marquardt(model: &Model<'_>, data: &[f64], mut p: Vec<f64>, opts: &FitOptions) -> Result<LmOutcome> {
    let n = data.len();
    let np = p.len();
    let floor_idx = np - 1;
    let mut m = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut lambda: f64 = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    model.eval(&p, &mut m);
    for it in 0..opts.max_iterations {
        iterations = it + 1;
        let w: Vec<f64> = m.iter().map(|v| 1.0 / (v * v).max(f64::MIN_POSITIVE)).collect();
        let cost = weighted_cost(data, &m, &w);
        let j = model.jacobian(&p);
        let mut jtwj = DMatrix::<f64>::zeros(np, np);
        let mut jtwr = DVector::<f64>::zeros(np);
        for r in 0..n {
            let row = j.row(r);
            let res = data[r] - m[r];
            for a in 0..np {
                jtwr[a] += w[r] * row[a] * res;
                for b in a..np {
                    jtwj[(a, b)] += w[r] * row[a] * row[b];
                }
            }
        }
        for a in 0..np {
            for b in 0..a {
                jtwj[(a, b)] = jtwj[(b, a)];
            }
        }

        let mut accepted = false;
        let mut step_small = false;
        for _ in 0..60 {
            let mut h = jtwj.clone();
            for a in 0..np {
                h[(a, a)] += lambda * jtwj[(a, a)].max(1e-300);
            }
            let Some(delta) = h.cholesky().map(|c| c.solve(&jtwr)) else {
                lambda *= 10.0;
                continue;
            };
            let mut q = p.clone();
            for a in 0..np {
                q[a] += delta[a];
            }
            q[floor_idx] = q[floor_idx].max(0.0);
            model.eval(&q, &mut trial);
            let new_cost = weighted_cost(data, &trial, &w);
            if new_cost.is_finite() && new_cost <= cost {
                let change = (0..np)
                    .map(|a| {
                        let d = (q[a] - p[a]).abs();
                        if a == floor_idx {
                            d / (q[a].abs() + 1.0)
                        } else if a % 3 == 1 {
                            d / q[a].abs()
                        } else {
                            d
                        }
                    })
                    .fold(0.0, f64::max);
                step_small = change < opts.tolerance;
                p = q;
                std::mem::swap(&mut m, &mut trial);
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                break;
            }
            lambda *= 10.0;
            if lambda > 1e16 {
                break;
            }
        }
        if !accepted || step_small {
            // no downhill step left means we sit at the minimum
            converged = true;
            break;
        }
    }

    // covariance s^2 (J^T W J)^-1 at the final point
    let w: Vec<f64> = m.iter().map(|v| 1.0 / (v * v).max(f64::MIN_POSITIVE)).collect();
    let cost = weighted_cost(data, &m, &w);
    let dof = (n - np).max(1) as f64;
    let s2 = cost / dof;
    let j = model.jacobian(&p);
    let jw = DMatrix::from_fn(n, np, |r, c| j[(r, c)] * w[r].sqrt());
    let jtwj = jw.transpose() * &jw;
    let covariance = pseudo_inverse_sym(&jtwj) * s2;
    Ok(LmOutcome {
        params: p,
        covariance,
        iterations,
        converged,
        residual: s2,
    })
}

/// Inverse of a symmetric PSD matrix via eigen-decomposition, dropping
/// directions with negligible curvature.
fn pseudo_inverse_sym(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    // scale to unit diagonal for conditioning
    let d: Vec<f64> = (0..n).map(|i| a[(i, i)].max(1e-300).sqrt()).collect();
    let scaled = DMatrix::from_fn(n, n, |r, c| a[(r, c)] / (d[r] * d[c]));
    let eig = nalgebra::SymmetricEigen::new(scaled);
    let max = eig.eigenvalues.amax();
    let mut inv = DMatrix::zeros(n, n);
    for k in 0..n {
        let l = eig.eigenvalues[k];
        if l > 1e-14 * max {
            let v = eig.eigenvectors.column(k);
            inv += v * v.transpose() / l;
        }
    }
    let out = DMatrix::from_fn(n, n, |r, c| inv[(r, c)] / (d[r] * d[c]));
    (&out + out.transpose()) * 0.5
}

/// Temperature of one fitted mode with its integral cross-check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TemperatureEstimate {
    pub mode_index: usize,
    pub t_kelvin: f64,
    pub t_stderr: f64,
    /// `L * integral(line) / k_B` from the fitted line shape.
    pub t_integral: f64,
    /// Amplitude and integral temperatures differ by more than 0.5%.
    pub inconsistent: bool,
}

pub const CONSISTENCY_TOLERANCE: f64 = 5e-3;

/// Integral of a resonator line over `0 < f < inf`, evaluated numerically on
/// the substitution `f = f_k + (fwhm / 2) tan(theta)`, which maps the whole
/// line onto a bounded, smooth integrand.
pub fn line_integral(t: f64, f_k: f64, q_prime: f64, l: f64) -> f64 {
    if t == 0.0 {
        return 0.0;
    }
    let hw = 0.5 * f_k / q_prime;
    let th_lo = (-f_k / hw).atan();
    let th_hi = 0.5 * PI;
    let n = 20_000;
    let h = (th_hi - th_lo) / n as f64;
    let integrand = |th: f64| -> f64 {
        let c = th.cos();
        if c.abs() < 1e-12 {
            // limit of S(f) df/dtheta as f -> infinity
            let wk = 2.0 * PI * f_k;
            return 4.0 * K_B * t * wk / (q_prime * l) / ((2.0 * PI).powi(2) * hw);
        }
        let f = f_k + hw * th.tan();
        resonator_psd(t, f_k, q_prime, l, f) * hw / (c * c)
    };
    let mut sum = 0.5 * (integrand(th_lo) + integrand(th_hi));
    for i in 1..n {
        sum += integrand(th_lo + i as f64 * h);
    }
    sum * h
}

pub fn extract_temperature(fit: &ModeFitResult, mode_index: usize, l: f64) -> Result<TemperatureEstimate> {
    ensure_positive("l_henry", l)?;
    let m = fit
        .mode(mode_index)
        .ok_or_else(|| Error::validation("mode_index", format!("no fitted mode {mode_index}")))?;
    let integral = line_integral(m.t_kelvin, m.f_hz, m.q_prime, l);
    let t_integral = l * integral / K_B;
    let inconsistent = if m.t_kelvin == 0.0 {
        t_integral != 0.0
    } else {
        ((t_integral - m.t_kelvin) / m.t_kelvin).abs() > CONSISTENCY_TOLERANCE
    };
    Ok(TemperatureEstimate {
        mode_index,
        t_kelvin: m.t_kelvin,
        t_stderr: m.t_stderr,
        t_integral,
        inconsistent,
    })
}

/// Series RLC recovered from calibration tones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub l_henry: f64,
    pub l_stderr: f64,
    pub c_farad: f64,
    pub c_stderr: f64,
    pub r_ohm: f64,
    pub r_stderr: f64,
}

impl CalibrationResult {
    pub fn f0(&self) -> f64 {
        1.0 / (2.0 * PI * (self.l_henry * self.c_farad).sqrt())
    }

    pub fn q(&self) -> f64 {
        2.0 * PI * self.f0() * self.l_henry / self.r_ohm
    }
}

/// Fits `Z = R + i w L + 1/(i w C)` to `v_cal / I` for each `(f, I)` tone.
pub fn estimate_impedance(responses: &[(f64, Complex64)], v_cal: f64) -> Result<CalibrationResult> {
    if !v_cal.is_finite() || v_cal == 0.0 {
        return Err(Error::validation("v_cal", "must be finite and non-zero"));
    }
    if responses.len() < 5 {
        return Err(Error::Conditioning(format!("{} tones given, at least 5 needed", responses.len())));
    }
    let mut zs = Vec::with_capacity(responses.len());
    for &(f, i) in responses {
        ensure_positive("f_hz", f)?;
        if !(i.norm() > 0.0) || !i.re.is_finite() || !i.im.is_finite() {
            return Err(Error::validation("phasor", "must be finite and non-zero"));
        }
        zs.push((2.0 * PI * f, v_cal / i));
    }
    let n = zs.len();
    // resistance from the real parts
    let r = zs.iter().map(|(_, z)| z.re).sum::<f64>() / n as f64;
    let r_var = zs.iter().map(|(_, z)| (z.re - r).powi(2)).sum::<f64>() / (n - 1) as f64;
    // reactance w L - K / w with K = 1/C
    let a = DMatrix::from_fn(n, 2, |row, col| if col == 0 { zs[row].0 } else { -1.0 / zs[row].0 });
    let b = DVector::from_iterator(n, zs.iter().map(|(_, z)| z.im));
    // column scaling for conditioning
    let s: Vec<f64> = (0..2).map(|c| a.column(c).norm()).collect();
    let a_s = DMatrix::from_fn(n, 2, |row, col| a[(row, col)] / s[col]);
    let svd = a_s.clone().svd(true, true);
    let x_s = svd
        .solve(&b, 1e-14)
        .map_err(|e| Error::Conditioning(e.to_string()))?;
    let l = x_s[0] / s[0];
    let k = x_s[1] / s[1];
    if !(l > 0.0 && k > 0.0 && r > 0.0) {
        return Err(Error::Conditioning(format!(
            "non-physical circuit values L = {l:e}, 1/C = {k:e}, R = {r:e}"
        )));
    }
    let linewidth = r / (2.0 * PI * l);
    let f_min = zs.iter().map(|(w, _)| *w).fold(f64::INFINITY, f64::min) / (2.0 * PI);
    let f_max = zs.iter().map(|(w, _)| *w).fold(0.0, f64::max) / (2.0 * PI);
    if f_max - f_min < 3.0 * linewidth {
        return Err(Error::Conditioning(format!(
            "tones span {:.3e} Hz, less than 3 linewidths ({:.3e} Hz)",
            f_max - f_min,
            3.0 * linewidth
        )));
    }
    let resid = &b - &a_s * &x_s;
    let s2 = if n > 2 { resid.norm_squared() / (n - 2) as f64 } else { 0.0 };
    let ata_inv = (a_s.transpose() * &a_s)
        .try_inverse()
        .ok_or_else(|| Error::Conditioning("singular reactance fit".into()))?;
    let l_err = (s2 * ata_inv[(0, 0)]).sqrt() / s[0];
    let k_err = (s2 * ata_inv[(1, 1)]).sqrt() / s[1];
    Ok(CalibrationResult {
        l_henry: l,
        l_stderr: l_err,
        c_farad: 1.0 / k,
        c_stderr: k_err / (k * k),
        r_ohm: r,
        r_stderr: (r_var / n as f64).sqrt(),
    })
}

/// Complex amplitude of the `f` component of `x`, using the largest whole
/// number of cycles in the record. Times are `t0 + n / fs`.
pub fn lock_in(x: &[f64], fs: f64, t0: f64, f: f64) -> Result<Complex64> {
    ensure_positive("f_hz", f)?;
    let cycles = (x.len() as f64 * f / fs).floor();
    let n = (cycles * fs / f).round() as usize;
    if cycles < 1.0 || n == 0 {
        return Err(Error::Length {
            len: x.len(),
            needed: (fs / f).ceil() as usize,
        });
    }
    let w = 2.0 * PI * f;
    let acc: Complex64 = x[..n]
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let t = t0 + i as f64 / fs;
            Complex64::from_polar(*v, -w * t)
        })
        .sum();
    Ok(acc * (2.0 / n as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RingdownResult {
    pub q_prime: f64,
    pub q_prime_stderr: f64,
    pub f_hz: f64,
    pub f_stderr: f64,
    /// Amplitude decay time, s.
    pub tau_s: f64,
}

fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - icpt - slope * a).powi(2)).sum();
    let se = if n > 2.0 { (rss / (n - 2.0) / sxx).sqrt() } else { 0.0 };
    (slope, icpt, se)
}

/// Decay time and frequency of the measured channel of a free decay.
pub fn ringdown_decay(series: &TimeSeries) -> Result<RingdownResult> {
    ringdown_decay_samples(series.measured(), series.fs)
}

pub fn ringdown_decay_samples(x: &[f64], fs: f64) -> Result<RingdownResult> {
    ensure_positive("fs_hz", fs)?;
    if x.len() < 64 {
        return Err(Error::Length {
            len: x.len(),
            needed: 64,
        });
    }
    // coarse carrier from the spectrum peak
    let nfft = x.len().next_power_of_two() * 2;
    let mut buf: Vec<Complex64> = x.iter().map(|v| Complex64::new(*v, 0.0)).collect();
    buf.resize(nfft, Complex64::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(nfft).process(&mut buf);
    let mag: Vec<f64> = buf[..nfft / 2].iter().map(|z| z.norm()).collect();
    let k = (1..mag.len() - 1)
        .max_by(|&a, &b| mag[a].total_cmp(&mag[b]))
        .ok_or_else(|| Error::RingdownFit("empty spectrum".into()))?;
    let (a, b, c) = (mag[k - 1], mag[k], mag[k + 1]);
    let den = a - 2.0 * b + c;
    let shift = if den < 0.0 { 0.5 * (a - c) / den } else { 0.0 };
    let f0 = (k as f64 + shift) * fs / nfft as f64;
    if f0 <= 0.0 {
        return Err(Error::RingdownFit("no carrier found".into()));
    }

    // demodulate and smooth over whole carrier periods
    let w0 = 2.0 * PI * f0;
    let period = fs / f0;
    let win = ((4.0 * period).round() as usize).max(1);
    if x.len() < 4 * win {
        return Err(Error::Length {
            len: x.len(),
            needed: 4 * win,
        });
    }
    let z: Vec<Complex64> = x
        .iter()
        .enumerate()
        .map(|(i, v)| Complex64::from_polar(*v, -w0 * i as f64 / fs))
        .collect();
    let mut smoothed = Vec::with_capacity(z.len() - win + 1);
    let mut acc: Complex64 = z[..win].iter().sum();
    smoothed.push(acc / win as f64);
    for i in win..z.len() {
        acc += z[i] - z[i - win];
        smoothed.push(acc / win as f64);
    }
    let centre = |i: usize| (i as f64 + 0.5 * (win - 1) as f64) / fs;
    let env: Vec<f64> = smoothed.iter().map(|s| 2.0 * s.norm()).collect();
    let env0 = env.iter().cloned().fold(0.0, f64::max);
    if env0 <= 0.0 {
        return Err(Error::RingdownFit("zero signal".into()));
    }
    // stop where the envelope meets the noise or 1% of its start
    let tail = &env[env.len() - env.len() / 10..];
    let tail_level = median(tail);
    let threshold = if tail_level < 0.3 * env0 {
        (0.01 * env0).max(3.0 * tail_level)
    } else {
        0.01 * env0
    };
    let start = env
        .iter()
        .position(|&e| e == env0)
        .unwrap_or(0);
    let stop = env[start..]
        .iter()
        .position(|&e| e < threshold)
        .map_or(env.len(), |p| start + p);
    if stop - start < 8 {
        return Err(Error::RingdownFit("too few points above the noise".into()));
    }
    let ts: Vec<f64> = (start..stop).map(centre).collect();
    let logs: Vec<f64> = env[start..stop].iter().map(|e| e.ln()).collect();
    let (slope, _, slope_se) = linear_fit(&ts, &logs);
    let total_decay = -slope * (ts[ts.len() - 1] - ts[0]);
    if !(slope < 0.0) || total_decay < 0.01 {
        return Err(Error::RingdownFit(format!(
            "envelope does not decay (slope {slope:e} 1/s over the record)"
        )));
    }
    let mut phase = Vec::with_capacity(stop - start);
    let mut acc = smoothed[start].arg();
    phase.push(acc);
    for pair in smoothed[start..stop].windows(2) {
        // step between neighbours wrapped into (-pi, pi]
        acc += (pair[1] * pair[0].conj()).arg();
        phase.push(acc);
    }
    let (dphi, _, dphi_se) = linear_fit(&ts, &phase);
    let f = f0 + dphi / (2.0 * PI);
    let tau = -1.0 / slope;
    let w = 2.0 * PI * f;
    let q = w * tau / 2.0;
    Ok(RingdownResult {
        q_prime: q,
        q_prime_stderr: q * slope_se / slope.abs(),
        f_hz: f,
        f_stderr: dphi_se / (2.0 * PI),
        tau_s: tau,
    })
}
