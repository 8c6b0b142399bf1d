//! Analytic frequency-domain predictions.
//!
//! All spectra are single-sided and per Hz: integrating over `f` in Hz gives
//! the mean square in A^2. With this convention
//!
//! ```text
//! int_0^inf w^2 dw / ((w^2 - wk^2)^2 + (wk w / Q')^2) = pi Q' / (2 wk)
//! ```
//!
//! turns the mode spectrum into `k_B T0 / (L (1 + g))`.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_non_negative, ensure_positive, Error, Result};
use crate::feedback::{close_loop, AmplifierModel, ClosedLoopMode, LoopFilter};
use crate::modes::{ModeSet, NormalMode, K_B};
use crate::optim::brent_min;

/// Evenly spaced frequencies `f_start..=f_stop`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrequencyGrid {
    pub f_start: f64,
    pub f_stop: f64,
    pub n_points: usize,
}

impl FrequencyGrid {
    pub fn new(f_start: f64, f_stop: f64, n_points: usize) -> Result<Self> {
        ensure_positive("f_start", f_start)?;
        ensure_positive("f_stop", f_stop)?;
        if f_stop <= f_start {
            return Err(Error::validation("f_stop", "must exceed f_start"));
        }
        if n_points < 2 {
            return Err(Error::validation("n_points", "must be at least 2"));
        }
        Ok(FrequencyGrid {
            f_start,
            f_stop,
            n_points,
        })
    }

    /// Grid of `[f_center - half_width, f_center + half_width]` clipped below
    /// at `f_min`, with at least `per_linewidth` points per `linewidth`.
    pub fn around(f_center: f64, half_width: f64, linewidth: f64, per_linewidth: usize, f_min: f64) -> Result<Self> {
        let lo = (f_center - half_width).max(f_min);
        let hi = f_center + half_width;
        let n = ((hi - lo) / linewidth * per_linewidth as f64).ceil() as usize + 1;
        FrequencyGrid::new(lo, hi, n.max(2))
    }

    pub fn step(&self) -> f64 {
        (self.f_stop - self.f_start) / (self.n_points - 1) as f64
    }

    pub fn frequency(&self, i: usize) -> f64 {
        if i + 1 == self.n_points {
            self.f_stop
        } else {
            self.f_start + i as f64 * self.step()
        }
    }

    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.n_points).map(|i| self.frequency(i)).collect()
    }
}

/// Single-sided current PSD samples, A^2/Hz, on a linear grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticSpectrum {
    pub grid: FrequencyGrid,
    pub values: Vec<f64>,
}

impl AnalyticSpectrum {
    fn tabulate<F>(grid: FrequencyGrid, f: F) -> Self
    where
        F: Fn(f64) -> f64 + Sync,
    {
        let values = (0..grid.n_points)
            .into_par_iter()
            .map(|i| f(grid.frequency(i)))
            .collect();
        AnalyticSpectrum { grid, values }
    }

    pub fn frequencies(&self) -> Vec<f64> {
        self.grid.frequencies()
    }

    /// CSV with header `frequency_hz,psd_a2_per_hz`, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.values.len() * 50);
        out.push_str("frequency_hz,psd_a2_per_hz\n");
        for (i, v) in self.values.iter().enumerate() {
            let _ = writeln!(out, "{:.16e},{:.16e}", self.grid.frequency(i), v);
        }
        out
    }

    fn add(&mut self, other: &AnalyticSpectrum) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }
}

/// Thermal voltage noise `4 k_B T0 R`, V^2/Hz.
pub fn thermal_voltage_psd(mode: &NormalMode, t0: f64) -> Result<f64> {
    ensure_non_negative("t0", t0)?;
    Ok(4.0 * K_B * t0 * mode.r)
}

/// Passive-resonator spectrum of a mode at effective temperature `t_k`:
/// `4 k_B T_k wk / (Q' L) * w^2 / ((w^2 - wk^2)^2 + (wk w / Q')^2)`.
pub fn resonator_psd(t_k: f64, f_k: f64, q_prime: f64, l: f64, f: f64) -> f64 {
    let wk = 2.0 * PI * f_k;
    let w = 2.0 * PI * f;
    let detune = w * w - wk * wk;
    let width = wk * w / q_prime;
    4.0 * K_B * t_k * wk / (q_prime * l) * w * w / (detune * detune + width * width)
}

/// Thermal current spectrum of one mode driven by the bath at `t0`; the
/// prefactor carries the intrinsic Q and the line shape the reduced Q'.
pub fn mode_current_psd_at(clm: &ClosedLoopMode, t0: f64, f: f64) -> f64 {
    let mode = &clm.mode;
    let wk = mode.omega0();
    let w = 2.0 * PI * f;
    let detune = w * w - wk * wk;
    let width = wk * w / clm.q_prime;
    4.0 * K_B * t0 * wk / (mode.q() * mode.l) * w * w / (detune * detune + width * width)
}

pub fn mode_current_psd(clm: &ClosedLoopMode, t0: f64, grid: &FrequencyGrid) -> Result<AnalyticSpectrum> {
    ensure_non_negative("t0", t0)?;
    if clm.q_prime <= 0.0 {
        return Err(Error::AntiDamping {
            mode: Some(clm.mode.index),
            margin: clm.q_prime,
        });
    }
    Ok(AnalyticSpectrum::tabulate(*grid, |f| mode_current_psd_at(clm, t0, f)))
}

/// Components of the measured spectrum, kept separate for inspection.
#[derive(Debug, Clone)]
pub struct SpectrumComponents {
    pub modes: Vec<AnalyticSpectrum>,
    pub back_action: AnalyticSpectrum,
    pub floor: AnalyticSpectrum,
}

impl SpectrumComponents {
    pub fn total(&self) -> AnalyticSpectrum {
        let mut total = self.floor.clone();
        for m in &self.modes {
            total.add(m);
        }
        total.add(&self.back_action);
        total
    }
}

/// Per-mode lines (thermal plus back-action) and the additive floor for
/// already-closed loops.
pub fn current_psd_components(
    loops: &[ClosedLoopMode],
    amp: &AmplifierModel,
    t0: f64,
    grid: &FrequencyGrid,
) -> Result<SpectrumComponents> {
    let modes = loops
        .iter()
        .map(|clm| mode_current_psd(clm, t0, grid))
        .collect::<Result<Vec<_>>>()?;
    let s_vn = amp.s_vn;
    let back_action = AnalyticSpectrum::tabulate(*grid, |f| {
        if s_vn == 0.0 {
            return 0.0;
        }
        loops
            .iter()
            .map(|clm| s_vn / clm.impedance(f).map(|z| z.norm_sqr()).unwrap_or(f64::INFINITY))
            .sum()
    });
    let floor = AnalyticSpectrum {
        grid: *grid,
        values: vec![amp.s_in; grid.n_points],
    };
    Ok(SpectrumComponents {
        modes,
        back_action,
        floor,
    })
}

pub fn total_current_psd_for_loops(
    loops: &[ClosedLoopMode],
    amp: &AmplifierModel,
    t0: f64,
    grid: &FrequencyGrid,
) -> Result<AnalyticSpectrum> {
    Ok(current_psd_components(loops, amp, t0, grid)?.total())
}

/// Spectrum seen by the amplifier: all mode lines plus the
/// additive floor, with every source treated as independent.
pub fn total_current_psd(
    modes: &ModeSet,
    amp: &AmplifierModel,
    filter: &LoopFilter,
    t0: f64,
    grid: &FrequencyGrid,
) -> Result<AnalyticSpectrum> {
    let loops = modes
        .iter()
        .map(|m| close_loop(m, amp, filter))
        .collect::<Result<Vec<_>>>()?;
    total_current_psd_for_loops(&loops, amp, t0, grid)
}

/// Trapezoidal integral of `spectrum` over `[f_lo, f_hi]` Hz, interpolating
/// linearly at band edges that fall between grid points.
pub fn integrate_psd(spectrum: &AnalyticSpectrum, f_lo: f64, f_hi: f64) -> Result<f64> {
    trapezoid(&spectrum.frequencies(), &spectrum.values, f_lo, f_hi)
}

pub(crate) fn trapezoid(freqs: &[f64], values: &[f64], f_lo: f64, f_hi: f64) -> Result<f64> {
    if f_hi < f_lo {
        return Err(Error::OutOfRange(format!("band [{f_lo}, {f_hi}] is reversed")));
    }
    let (first, last) = match (freqs.first(), freqs.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => return Err(Error::OutOfRange("empty spectrum".into())),
    };
    let slack = 1e-9 * (last - first).abs();
    if f_lo < first - slack || f_hi > last + slack {
        return Err(Error::OutOfRange(format!(
            "band [{f_lo}, {f_hi}] Hz outside grid [{first}, {last}] Hz"
        )));
    }
    if f_hi == f_lo {
        return Ok(0.0);
    }
    let f_lo = f_lo.max(first);
    let f_hi = f_hi.min(last);
    let interp = |f: f64| -> f64 {
        let i = freqs.partition_point(|&x| x <= f).clamp(1, freqs.len() - 1);
        let (x0, x1) = (freqs[i - 1], freqs[i]);
        let t = if x1 > x0 { (f - x0) / (x1 - x0) } else { 0.0 };
        values[i - 1] + t * (values[i] - values[i - 1])
    };
    let mut xs = vec![f_lo];
    let mut ys = vec![interp(f_lo)];
    for (&f, &v) in freqs.iter().zip(values) {
        if f > f_lo && f < f_hi {
            xs.push(f);
            ys.push(v);
        }
    }
    xs.push(f_hi);
    ys.push(interp(f_hi));
    Ok(xs
        .windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum())
}

/// Mode temperature without amplifier noise, `T0 / (1 + g)`.
pub fn predicted_temperature_simple(t0: f64, g: f64) -> Result<f64> {
    ensure_non_negative("t0", t0)?;
    if !g.is_finite() || g <= -1.0 {
        return Err(Error::AntiDamping {
            mode: None,
            margin: 1.0 + g,
        });
    }
    Ok(t0 / (1.0 + g))
}

/// Mode temperature including back-action and fed-back measurement noise.
pub fn predicted_temperature_refined(mode: &NormalMode, amp: &AmplifierModel, t0: f64, g: f64) -> Result<f64> {
    ensure_non_negative("t0", t0)?;
    ensure_non_negative("g", g)?;
    Ok(refined(mode, amp, t0, g))
}

fn effective_bath(mode: &NormalMode, amp: &AmplifierModel, t0: f64) -> f64 {
    t0 + mode.q() * amp.s_vn / (4.0 * K_B * mode.omega0() * mode.l)
}

fn refined(mode: &NormalMode, amp: &AmplifierModel, t0: f64, g: f64) -> f64 {
    let feedback_noise = mode.omega0() * mode.l / (4.0 * K_B * mode.q()) * amp.s_in;
    effective_bath(mode, amp, t0) / (1.0 + g) + g * g / (1.0 + g) * feedback_noise
}

/// Predicted temperatures for one closed-loop mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TemperaturePrediction {
    pub mode_index: usize,
    pub g: f64,
    pub q_prime: f64,
    pub t_simple: f64,
    pub t_refined: f64,
    pub mean_square_current: f64,
}

pub fn predict_temperatures(clm: &ClosedLoopMode, amp: &AmplifierModel, t0: f64) -> Result<TemperaturePrediction> {
    let t_simple = predicted_temperature_simple(t0, clm.g)?;
    let t_refined = predicted_temperature_refined(&clm.mode, amp, t0, clm.g.max(0.0))?;
    Ok(TemperaturePrediction {
        mode_index: clm.mode.index,
        g: clm.g,
        q_prime: clm.q_prime,
        t_simple,
        t_refined,
        mean_square_current: K_B * t_simple / clm.mode.l,
    })
}

/// Optimum damping ratio and the minimum reachable temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimumGain {
    pub mode_index: usize,
    pub g_opt: f64,
    pub t_min: f64,
    /// Large-gain estimate `sqrt(4 k_B Q T0_eff / (w L S_In))`.
    pub g_large_gain: f64,
}

pub fn optimum_gain(mode: &NormalMode, amp: &AmplifierModel, t0: f64) -> Result<OptimumGain> {
    ensure_non_negative("t0", t0)?;
    if amp.s_in <= 0.0 {
        return Err(Error::UnboundedOptimum(
            "without measurement noise the temperature decreases monotonically with g".into(),
        ));
    }
    let t_eff = effective_bath(mode, amp, t0);
    if t_eff <= 0.0 {
        return Err(Error::UnboundedOptimum("zero effective bath temperature".into()));
    }
    let g_large_gain = (4.0 * K_B * mode.q() * t_eff / (mode.omega0() * mode.l * amp.s_in)).sqrt();
    // T(g) is unimodal in ln g; bracket generously around the estimate.
    let centre = g_large_gain.ln();
    let lo = (centre - 12.0).max(-30.0);
    let hi = centre + 12.0;
    let (x, t_min) = brent_min(|x| refined(mode, amp, t0, x.exp()), lo, hi, 1e-12, 500)?;
    Ok(OptimumGain {
        mode_index: mode.index,
        g_opt: x.exp(),
        t_min,
        g_large_gain,
    })
}
