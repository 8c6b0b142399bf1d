//! The amplifier and low-pass feedback path, and the cold-damping quantities
//! it induces on each normal mode.
//!
//! The amplifier senses the input-coil current and the filtered copy `AD I` is
//! fed back into the same coil. Seen from mode `k` this adds the series
//! impedance `i w L_in AD / (1 - AD)`; its real part is the feedback
//! resistance `R_D`, its imaginary part `X_D` detunes the mode slightly.
//!
//! Only the product `A * dc_gain` enters the physics. Both are kept so that
//! configurations can quote the amplifier gain and the filter setting
//! separately.

use std::f64::consts::{FRAC_PI_2, PI};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_non_negative, ensure_positive, Error, Result};
use crate::modes::NormalMode;
use crate::optim::brent_root;

/// Default cutoff of the feedback filter, Hz.
pub const DEFAULT_CUTOFF_HZ: f64 = 200.0;

/// Loops with `|1 - AD|` at or below this are treated as singular.
pub const SINGULARITY_EPS: f64 = 1e-9;

/// `gain_for_target` refuses settings with `|AD|` at or above this.
pub const MAX_LOOP_MAGNITUDE: f64 = 0.5;

/// Single-pole low-pass filter `D(f) = dc_gain / (1 + i f / f_c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopFilter {
    pub dc_gain: f64,
    pub f_c: f64,
}

impl LoopFilter {
    pub fn new(dc_gain: f64, f_c: f64) -> Result<Self> {
        ensure_non_negative("dc_gain", dc_gain)?;
        ensure_positive("f_c_hz", f_c)?;
        Ok(LoopFilter { dc_gain, f_c })
    }

    pub fn open() -> Self {
        LoopFilter {
            dc_gain: 0.0,
            f_c: DEFAULT_CUTOFF_HZ,
        }
    }

    /// Filter time constant 1/(2 pi f_c), s.
    pub fn tau(&self) -> f64 {
        1.0 / (2.0 * PI * self.f_c)
    }

    pub fn response(&self, f: f64) -> Complex64 {
        Complex64::new(self.dc_gain, 0.0) / Complex64::new(1.0, f / self.f_c)
    }
}

/// Current amplifier with its noise sources.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmplifierModel {
    /// Gain entering the loop product `A * D`.
    pub a_gain: f64,
    /// Input inductance, H.
    pub l_in: f64,
    /// Additive current noise, single-sided, A^2/Hz.
    pub s_in: f64,
    /// Back-action voltage noise, single-sided, V^2/Hz.
    pub s_vn: f64,
}

impl AmplifierModel {
    pub fn new(a_gain: f64, l_in: f64, s_in: f64, s_vn: f64) -> Result<Self> {
        if !a_gain.is_finite() || a_gain == 0.0 {
            return Err(Error::validation(
                "a_gain",
                format!("must be finite and non-zero, got {a_gain}"),
            ));
        }
        ensure_positive("l_in_henry", l_in)?;
        ensure_non_negative("s_in_a2_per_hz", s_in)?;
        ensure_non_negative("s_vn_v2_per_hz", s_vn)?;
        Ok(AmplifierModel {
            a_gain,
            l_in,
            s_in,
            s_vn,
        })
    }

    /// Noiseless amplifier with unit gain.
    pub fn noiseless(l_in: f64) -> Self {
        AmplifierModel {
            a_gain: 1.0,
            l_in,
            s_in: 0.0,
            s_vn: 0.0,
        }
    }

    pub fn with_noise(mut self, s_in: f64, s_vn: f64) -> Self {
        self.s_in = s_in;
        self.s_vn = s_vn;
        self
    }
}

/// Open-loop transfer `A D(f)` at frequency `f` (Hz).
pub fn loop_transfer(filter: &LoopFilter, amp: &AmplifierModel, f: f64) -> Result<Complex64> {
    ensure_non_negative("f", f)?;
    Ok(amp.a_gain * filter.response(f))
}

/// Series impedance added to a mode by the loop, as `(R_D, X_D)` in ohm.
pub fn feedback_resistance(ad: Complex64, f: f64, l_in: f64) -> Result<(f64, f64)> {
    ensure_non_negative("f", f)?;
    ensure_positive("l_in", l_in)?;
    let denom = Complex64::new(1.0, 0.0) - ad;
    if denom.norm() <= SINGULARITY_EPS {
        return Err(Error::LoopSingularity {
            magnitude: denom.norm(),
        });
    }
    let omega = 2.0 * PI * f;
    let z = Complex64::i() * ad / denom * omega * l_in;
    Ok((z.re, z.im))
}

/// A normal mode under feedback, evaluated at its own resonance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClosedLoopMode {
    pub mode: NormalMode,
    /// Loop transfer at the mode frequency.
    #[serde(skip)]
    pub ad: Complex64,
    pub r_d: f64,
    pub x_d: f64,
    /// Damping ratio R_D / R.
    pub g: f64,
    pub q_prime: f64,
    /// Fractional shift of the resonance frequency caused by X_D.
    pub f_shift: f64,
    /// `|AD| < 0.01` and AD within 0.25 rad of -pi/2.
    pub small_gain_regime: bool,
}

impl ClosedLoopMode {
    /// Builds the closed-loop description from an explicit loop transfer.
    pub fn from_transfer(mode: NormalMode, ad: Complex64, l_in: f64) -> Result<Self> {
        let omega = mode.omega0();
        let (r_d, x_d) = feedback_resistance(ad, mode.f0(), l_in)?;
        let total = mode.r + r_d;
        if total <= 0.0 {
            return Err(Error::AntiDamping {
                mode: Some(mode.index),
                margin: total,
            });
        }
        let g = r_d / mode.r;
        let small_gain_regime = ad.norm() < 0.01 && (ad.arg() + FRAC_PI_2).abs() < 0.25;
        Ok(ClosedLoopMode {
            mode,
            ad,
            r_d,
            x_d,
            g,
            q_prime: mode.q() / (1.0 + g),
            f_shift: -x_d / (2.0 * omega * mode.l),
            small_gain_regime,
        })
    }

    /// Purely resistive feedback with a prescribed damping ratio; used for
    /// analytic scenarios that do not go through a physical loop.
    pub fn with_damping_ratio(mode: NormalMode, g: f64) -> Result<Self> {
        if !g.is_finite() || g <= -1.0 {
            return Err(Error::AntiDamping {
                mode: Some(mode.index),
                margin: mode.r * (1.0 + g),
            });
        }
        Ok(ClosedLoopMode {
            mode,
            ad: Complex64::new(0.0, 0.0),
            r_d: g * mode.r,
            x_d: 0.0,
            g,
            q_prime: mode.q() / (1.0 + g),
            f_shift: 0.0,
            small_gain_regime: true,
        })
    }

    /// Closed-loop full width at half maximum, Hz.
    pub fn linewidth_hz(&self) -> f64 {
        self.mode.f0() / self.q_prime
    }

    /// Closed-loop amplitude relaxation time 2Q'/w, s.
    pub fn relaxation_time(&self) -> f64 {
        2.0 * self.q_prime / self.mode.omega0()
    }

    /// `Z'(f) = R + R_D + i(wL - 1/(wC))`, with R_D taken at the mode frequency.
    pub fn impedance(&self, f: f64) -> Result<Complex64> {
        Ok(self.mode.impedance(f)? + self.r_d)
    }
}

/// Closes the loop on `mode` and evaluates the feedback at its resonance.
pub fn close_loop(mode: &NormalMode, amp: &AmplifierModel, filter: &LoopFilter) -> Result<ClosedLoopMode> {
    let ad = loop_transfer(filter, amp, mode.f0())?;
    ClosedLoopMode::from_transfer(*mode, ad, amp.l_in)
}

/// Filter dc gain that gives `mode` the damping ratio `g_target`.
///
/// Solved on the exact feedback expression, restricted to `|AD| < 0.5`.
pub fn gain_for_target(mode: &NormalMode, amp: &AmplifierModel, f_c: f64, g_target: f64) -> Result<f64> {
    ensure_non_negative("g_target", g_target)?;
    ensure_positive("f_c", f_c)?;
    if g_target == 0.0 {
        return Ok(0.0);
    }
    if amp.a_gain <= 0.0 {
        return Err(Error::OutOfRange(
            "a negative amplifier gain cannot produce damping".into(),
        ));
    }
    let f = mode.f0();
    let ratio = |dc_gain: f64| -> f64 {
        let filter = LoopFilter { dc_gain, f_c };
        let ad = amp.a_gain * filter.response(f);
        match feedback_resistance(ad, f, amp.l_in) {
            Ok((r_d, _)) => r_d / mode.r,
            Err(_) => f64::NAN,
        }
    };
    // |AD| = A dc_gain / sqrt(1 + (f/f_c)^2)
    let max_gain = MAX_LOOP_MAGNITUDE * (1.0 + (f / f_c).powi(2)).sqrt() / amp.a_gain;
    let reachable = ratio(max_gain * (1.0 - 1e-12));
    if !(reachable > g_target) {
        return Err(Error::OutOfRange(format!(
            "g = {g_target:e} needs |AD| >= {MAX_LOOP_MAGNITUDE} for mode {} (max reachable g = {reachable:e})",
            mode.index
        )));
    }
    brent_root(|x| ratio(x) / g_target - 1.0, 0.0, max_gain, 1e-16 * max_gain, 200)
}
