//! Effective normal modes of the coupled resonator system, as seen from the
//! current amplifier, plus the equipartition quantities derived from them.
//!
//! Every normal mode is a series RLC branch. Modes are specified the way they
//! are measured (inductance, resonance frequency in Hz, quality factor); the
//! capacitance and resistance are derived.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_non_negative, ensure_positive, Error, Result};

/// Fixed physical constants (SI).
#[derive(Debug, Clone, Copy)]
pub struct PhysicalConstants;

impl PhysicalConstants {
    /// Boltzmann constant, J/K.
    pub const K_B: f64 = 1.380649e-23;
    /// Reduced Planck constant, J s.
    pub const HBAR: f64 = 1.054572e-34;
}

pub const K_B: f64 = PhysicalConstants::K_B;
pub const HBAR: f64 = PhysicalConstants::HBAR;

/// Modes closer than this many closed-loop linewidths raise the
/// near-degeneracy warning on a [`ModeSet`].
pub const DEGENERACY_LINEWIDTHS: f64 = 5.0;

/// One normal mode as a series RLC circuit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalMode {
    /// 1-based label.
    pub index: usize,
    /// Inductance, H (includes the amplifier input inductance).
    pub l: f64,
    /// Capacitance, F.
    pub c: f64,
    /// Resistance, ohm.
    pub r: f64,
}

impl NormalMode {
    /// Builds a mode directly from circuit values.
    pub fn from_circuit(index: usize, l: f64, c: f64, r: f64) -> Result<Self> {
        ensure_positive("l", l)?;
        ensure_positive("c", c)?;
        ensure_positive("r", r)?;
        let mode = NormalMode { index, l, c, r };
        if mode.q() <= 1.0 {
            return Err(Error::validation(
                "q",
                format!("mode must be underdamped (Q > 1), got {}", mode.q()),
            ));
        }
        Ok(mode)
    }

    /// Builds a mode from measured inductance plus resonance (f, Q).
    pub fn from_measurement(index: usize, l: f64, f: f64, q: f64) -> Result<Self> {
        ensure_positive("l", l)?;
        ensure_positive("f", f)?;
        ensure_positive("q", q)?;
        if q <= 1.0 {
            return Err(Error::validation("q", format!("must be > 1, got {q}")));
        }
        let omega = 2.0 * PI * f;
        Ok(NormalMode {
            index,
            l,
            c: 1.0 / (omega * omega * l),
            r: omega * l / q,
        })
    }

    /// Angular resonance frequency, rad/s.
    pub fn omega0(&self) -> f64 {
        1.0 / (self.l * self.c).sqrt()
    }

    /// Resonance frequency, Hz.
    pub fn f0(&self) -> f64 {
        self.omega0() / (2.0 * PI)
    }

    pub fn q(&self) -> f64 {
        self.omega0() * self.l / self.r
    }

    /// Full width at half maximum of the open-loop resonance, Hz.
    pub fn linewidth_hz(&self) -> f64 {
        self.f0() / self.q()
    }

    /// Series impedance R + i(wL - 1/(wC)) at frequency `f` (Hz).
    pub fn impedance(&self, f: f64) -> Result<Complex64> {
        ensure_positive("f", f)?;
        Ok(self.impedance_unchecked(2.0 * PI * f))
    }

    pub(crate) fn impedance_unchecked(&self, omega: f64) -> Complex64 {
        Complex64::new(self.r, omega * self.l - 1.0 / (omega * self.c))
    }
}

/// Equivalent of [`NormalMode::from_measurement`] with index 1.
pub fn mode_from_measurement(l: f64, f: f64, q: f64) -> Result<NormalMode> {
    NormalMode::from_measurement(1, l, f, q)
}

/// Series impedance of `mode` at `f` Hz.
pub fn impedance(mode: &NormalMode, f: f64) -> Result<Complex64> {
    mode.impedance(f)
}

/// `(L [H], f [Hz], Q)` of the three default modes.
pub const DEFAULT_MODE_PARAMS: [(f64, f64, f64); 3] =
    [(1.66e-4, 865.0, 1.2e6), (1.23e-5, 914.0, 0.88e6), (8.12e-6, 953.0, 0.77e6)];

/// Ordered collection of normal modes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSet {
    modes: Vec<NormalMode>,
    near_degenerate: bool,
}

impl ModeSet {
    /// Requires strictly increasing resonance frequencies. The near-degeneracy
    /// warning is evaluated with the open-loop linewidths; use
    /// [`ModeSet::check_separation`] once the closed-loop widths are known.
    pub fn new(modes: Vec<NormalMode>) -> Result<Self> {
        if modes.is_empty() {
            return Err(Error::validation("modes", "at least one mode is required"));
        }
        for (i, pair) in modes.windows(2).enumerate() {
            if pair[1].f0() <= pair[0].f0() {
                return Err(Error::validation(
                    format!("modes[{}].f_hz", i + 1),
                    "resonance frequencies must be strictly increasing",
                ));
            }
        }
        let widths: Vec<f64> = modes.iter().map(NormalMode::linewidth_hz).collect();
        let mut set = ModeSet {
            modes,
            near_degenerate: false,
        };
        set.near_degenerate = set.check_separation(&widths);
        Ok(set)
    }

    /// The three default normal modes of a resonant-bar transducer chain.
    pub fn default_modes() -> Self {
        let modes = DEFAULT_MODE_PARAMS
            .iter()
            .enumerate()
            .map(|(i, &(l, f, q))| NormalMode::from_measurement(i + 1, l, f, q).unwrap())
            .collect();
        ModeSet::new(modes).unwrap()
    }

    /// True when two neighbouring resonances are closer than
    /// [`DEGENERACY_LINEWIDTHS`] times the wider of the two given linewidths.
    pub fn check_separation(&self, linewidths_hz: &[f64]) -> bool {
        self.modes.windows(2).zip(linewidths_hz.windows(2)).any(|(m, w)| {
            let gap = m[1].f0() - m[0].f0();
            gap < DEGENERACY_LINEWIDTHS * w[0].max(w[1])
        })
    }

    pub fn near_degenerate(&self) -> bool {
        self.near_degenerate
    }

    pub fn modes(&self) -> &[NormalMode] {
        &self.modes
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, NormalMode> {
        self.modes.iter()
    }
}

/// Thermodynamic bath.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bath {
    pub t0: f64,
}

impl Bath {
    pub fn new(t0: f64) -> Result<Self> {
        ensure_non_negative("t0_kelvin", t0)?;
        Ok(Bath { t0 })
    }
}

/// A mechanical resonator reduced to effective mass and angular frequency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MechanicalResonator {
    pub mass: f64,
    pub omega: f64,
}

impl MechanicalResonator {
    pub fn new(mass: f64, omega: f64) -> Result<Self> {
        ensure_positive("mass", mass)?;
        ensure_positive("omega", omega)?;
        Ok(MechanicalResonator { mass, omega })
    }
}

/// Equipartition mean-square current k_B T / L, A^2.
pub fn thermal_mean_square_current(mode: &NormalMode, t: f64) -> Result<f64> {
    ensure_non_negative("t", t)?;
    Ok(K_B * t / mode.l)
}

/// Equipartition rms displacement sqrt(k_B T / (M w^2)), m.
pub fn rms_displacement(res: &MechanicalResonator, t: f64) -> Result<f64> {
    ensure_non_negative("t", t)?;
    Ok((K_B * t / (res.mass * res.omega * res.omega)).sqrt())
}

/// Mean number of quanta k_B T / (hbar w) at frequency `f` Hz.
pub fn occupation_number(t: f64, f: f64) -> Result<f64> {
    ensure_non_negative("t", t)?;
    ensure_positive("f", f)?;
    Ok(K_B * t / (HBAR * 2.0 * PI * f))
}
