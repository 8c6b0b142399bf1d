//! Time-domain Langevin simulation of the closed loop.
//!
//! State per mode: scaled charge `u_k = w_k q_k` and branch current `I_k`
//! (both in A), plus the filter output current `I_D`. The filter senses the
//! total coil current `sum I_k + I_D` and drives
//!
//! ```text
//! tau dI_D/dt = -(1 - a0) I_D + a0 (sum_j I_j + i_n),   a0 = A * dc_gain
//! L_k dI_k/dt = -R_k I_k - q_k / C_k + v_th,k + v_ba - L_in dI_D/dt
//! ```
//!
//! so each branch sees the added series impedance `i w L_in AD / (1 - AD)`.
//! The system is discretized exactly: transition by matrix exponential and
//! process noise by the Van Loan construction.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_non_negative, ensure_positive, Error, Result};
use crate::feedback::{close_loop, AmplifierModel, ClosedLoopMode, LoopFilter};
use crate::modes::{ModeSet, NormalMode, K_B};

/// Minimum ratio of sample rate to the highest mode frequency.
pub const MIN_OVERSAMPLING: f64 = 8.0;

/// Default burn-in in units of the slowest closed-loop relaxation time.
pub const BURN_IN_RELAXATION_TIMES: f64 = 10.0;

pub const MEASURED_CHANNEL: &str = "measured_current_a";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Sample rate, Hz.
    pub fs: f64,
    /// Total simulated time including burn-in, s.
    pub duration: f64,
    pub seed: u64,
    /// Discarded transient, s. `None` selects ten slowest relaxation times.
    pub burn_in: Option<f64>,
}

impl SimConfig {
    pub fn new(fs: f64, duration: f64, seed: u64, burn_in: Option<f64>) -> Result<Self> {
        ensure_positive("fs_hz", fs)?;
        ensure_positive("duration_s", duration)?;
        if let Some(b) = burn_in {
            ensure_non_negative("burn_in_s", b)?;
            if b >= duration {
                return Err(Error::validation("burn_in_s", format!("must be below duration ({duration} s)")));
            }
        }
        Ok(SimConfig {
            fs,
            duration,
            seed,
            burn_in,
        })
    }

    fn check_modes(&self, f_max: f64) -> Result<()> {
        if self.fs < MIN_OVERSAMPLING * f_max {
            return Err(Error::validation(
                "fs_hz",
                format!("{} Hz is below {MIN_OVERSAMPLING} x highest mode frequency {f_max} Hz", self.fs),
            ));
        }
        Ok(())
    }
}

/// Continuous-time linear model of the closed loop.
#[derive(Debug, Clone)]
pub struct StateSpace {
    pub modes: Vec<NormalMode>,
    pub loops: Vec<ClosedLoopMode>,
    pub t0: f64,
    pub amp: AmplifierModel,
    pub filter: LoopFilter,
    /// Drift matrix, 1/s.
    pub drift: DMatrix<f64>,
    /// Columns: thermal voltage of each mode, then back-action voltage.
    pub noise_input: DMatrix<f64>,
    /// Two-sided white intensity of each noise column, V^2 s.
    pub noise_intensity: Vec<f64>,
    /// Input column of the measurement noise current.
    pub measurement_input: DVector<f64>,
    /// Input column of a series voltage applied to every branch.
    pub drive_input: DVector<f64>,
    /// Output row giving the sum of branch currents.
    pub output: DVector<f64>,
}

impl StateSpace {
    pub fn dim(&self) -> usize {
        self.drift.nrows()
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn current_index(k: usize) -> usize {
        2 * k + 1
    }

    pub fn eigenvalues(&self) -> Vec<Complex64> {
        self.drift
            .complex_eigenvalues()
            .iter()
            .map(|z| Complex64::new(z.re, z.im))
            .collect()
    }

    /// Longest decay time among all poles, s.
    pub fn slowest_time_constant(&self) -> f64 {
        self.eigenvalues()
            .iter()
            .map(|z| -1.0 / z.re)
            .fold(0.0, f64::max)
    }

    /// Continuous noise intensity matrix `B diag(q) B^T`.
    pub fn process_intensity(&self) -> DMatrix<f64> {
        let q = DMatrix::from_diagonal(&DVector::from_vec(self.noise_intensity.clone()));
        &self.noise_input * q * self.noise_input.transpose()
    }
}

/// Builds the continuous-time model for `modes` under the given loop.
pub fn build_state_space(modes: &ModeSet, amp: &AmplifierModel, filter: &LoopFilter, t0: f64) -> Result<StateSpace> {
    ensure_non_negative("t0_kelvin", t0)?;
    let loops = modes
        .iter()
        .map(|m| close_loop(m, amp, filter))
        .collect::<Result<Vec<_>>>()?;
    let n = modes.len();
    let dim = 2 * n + 1;
    let id = 2 * n;
    let a0 = amp.a_gain * filter.dc_gain;
    let tau = filter.tau();

    let mut drift = DMatrix::zeros(dim, dim);
    let mut noise_input = DMatrix::zeros(dim, n + 1);
    let mut measurement_input = DVector::zeros(dim);
    let mut drive_input = DVector::zeros(dim);
    let mut output = DVector::zeros(dim);
    let mut noise_intensity = Vec::with_capacity(n + 1);

    // filter row
    for k in 0..n {
        drift[(id, 2 * k + 1)] = a0 / tau;
    }
    drift[(id, id)] = -(1.0 - a0) / tau;
    measurement_input[id] = a0 / tau;

    for (k, m) in modes.iter().enumerate() {
        let (u, i) = (2 * k, 2 * k + 1);
        let w = m.omega0();
        let couple = amp.l_in / m.l;
        drift[(u, i)] = w;
        drift[(i, u)] = -w;
        drift[(i, i)] = -m.r / m.l;
        // -L_in dI_D/dt / L_k with the filter equation substituted
        for j in 0..n {
            drift[(i, 2 * j + 1)] -= couple * a0 / tau;
        }
        drift[(i, id)] += couple * (1.0 - a0) / tau;
        measurement_input[i] = -couple * a0 / tau;
        noise_input[(i, k)] = 1.0 / m.l;
        noise_input[(i, n)] = 1.0 / m.l;
        drive_input[i] = 1.0 / m.l;
        output[i] = 1.0;
        noise_intensity.push(2.0 * K_B * t0 * m.r);
    }
    noise_intensity.push(amp.s_vn / 2.0);

    let ss = StateSpace {
        modes: modes.modes().to_vec(),
        loops,
        t0,
        amp: *amp,
        filter: *filter,
        drift,
        noise_input,
        noise_intensity,
        measurement_input,
        drive_input,
        output,
    };
    if let Some(z) = ss.eigenvalues().into_iter().find(|z| !(z.re < 0.0)) {
        return Err(Error::Instability { re: z.re, im: z.im });
    }
    Ok(ss)
}

/// Exactly discretized system with a noise factor ready for sampling.
#[derive(Debug, Clone)]
pub struct DiscreteSystem {
    pub ss: StateSpace,
    pub fs: f64,
    /// Transition matrix `exp(A / fs)`.
    pub phi: DMatrix<f64>,
    /// Discrete process-noise covariance.
    pub qd: DMatrix<f64>,
    /// Response of the state to a unit measurement-noise current held over one sample.
    pub gamma: DVector<f64>,
    /// Standard deviation of the held measurement-noise sample, A.
    pub sigma_in: f64,
    factor: DMatrix<f64>,
}

fn checked_exp(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = m.exp();
    if e.iter().all(|x| x.is_finite()) {
        Ok(e)
    } else {
        Err(Error::Numerical(
            "matrix exponential is not finite; the sample rate is too low for this system".into(),
        ))
    }
}

/// Discrete covariance of `int_0^dt e^{As} Qc e^{A^T s} ds` by Van Loan's method.
pub(crate) fn van_loan(drift: &DMatrix<f64>, qc: &DMatrix<f64>, dt: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = drift.nrows();
    let scale = qc.amax();
    let mut m = DMatrix::zeros(2 * n, 2 * n);
    m.view_mut((0, 0), (n, n)).copy_from(&(-drift * dt));
    if scale > 0.0 {
        m.view_mut((0, n), (n, n)).copy_from(&(qc * (dt / scale)));
    }
    m.view_mut((n, n), (n, n)).copy_from(&(drift.transpose() * dt));
    let e = checked_exp(m)?;
    let phi = e.view((n, n), (n, n)).transpose();
    let mut qd = if scale > 0.0 {
        &phi * e.view((0, n), (n, n)) * scale
    } else {
        DMatrix::zeros(n, n)
    };
    qd = (&qd + qd.transpose()) * 0.5;
    Ok((phi, qd))
}

/// Square-root factor of a symmetric PSD matrix, clipping small negative
/// eigenvalues. Only columns with non-zero weight are kept.
fn psd_factor(qd: &DMatrix<f64>) -> DMatrix<f64> {
    let n = qd.nrows();
    let trace = qd.trace();
    if trace <= 0.0 {
        return DMatrix::zeros(n, 0);
    }
    let eig = SymmetricEigen::new(qd.clone());
    let cutoff = 1e-14 * trace;
    let keep: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > cutoff).collect();
    let mut f = DMatrix::zeros(n, keep.len());
    for (c, &i) in keep.iter().enumerate() {
        let s = eig.eigenvalues[i].sqrt();
        for r in 0..n {
            f[(r, c)] = eig.eigenvectors[(r, i)] * s;
        }
    }
    f
}

pub fn discretize(ss: &StateSpace, fs: f64) -> Result<DiscreteSystem> {
    ensure_positive("fs_hz", fs)?;
    let f_max = ss.modes.iter().map(|m| m.f0()).fold(0.0, f64::max);
    if fs < MIN_OVERSAMPLING * f_max {
        return Err(Error::validation(
            "fs_hz",
            format!("{fs} Hz is below {MIN_OVERSAMPLING} x highest mode frequency {f_max} Hz"),
        ));
    }
    let dt = 1.0 / fs;
    let n = ss.dim();
    let (phi, qd) = van_loan(&ss.drift, &ss.process_intensity(), dt)?;

    // zero-order hold integral for the measurement noise input
    let mut aug = DMatrix::zeros(n + 1, n + 1);
    aug.view_mut((0, 0), (n, n)).copy_from(&(&ss.drift * dt));
    aug.view_mut((0, n), (n, 1)).copy_from(&(&ss.measurement_input * dt));
    let e = checked_exp(aug)?;
    let gamma = e.view((0, n), (n, 1)).column(0).into_owned();

    let factor = psd_factor(&qd);
    Ok(DiscreteSystem {
        ss: ss.clone(),
        fs,
        phi,
        qd,
        gamma,
        sigma_in: (ss.amp.s_in * fs / 2.0).sqrt(),
        factor,
    })
}

impl DiscreteSystem {
    pub fn dim(&self) -> usize {
        self.phi.nrows()
    }

    /// Covariance added per step, including the held measurement noise.
    pub fn total_step_covariance(&self) -> DMatrix<f64> {
        &self.qd + &self.gamma * self.gamma.transpose() * (self.sigma_in * self.sigma_in)
    }

    /// Stationary state covariance `P = Phi P Phi^T + Q` by doubling.
    pub fn stationary_covariance(&self) -> Result<DMatrix<f64>> {
        discrete_lyapunov(&self.phi, &self.total_step_covariance())
    }

    /// True when any noise source is active.
    pub fn has_noise(&self) -> bool {
        self.factor.ncols() > 0 || self.sigma_in > 0.0
    }

    pub fn burn_in(&self, cfg: &SimConfig) -> f64 {
        cfg.burn_in
            .unwrap_or_else(|| BURN_IN_RELAXATION_TIMES * self.ss.slowest_time_constant())
    }

    /// Sampler started from the zero state.
    pub fn stepper(&self, seed: u64) -> Stepper<'_> {
        Stepper::new(self, seed, vec![0.0; self.dim()])
    }
}

fn matrix_power(m: &DMatrix<f64>, mut k: usize) -> DMatrix<f64> {
    let mut result = DMatrix::identity(m.nrows(), m.ncols());
    let mut base = m.clone();
    while k > 0 {
        if k & 1 == 1 {
            result = &result * &base;
        }
        base = &base * &base;
        k >>= 1;
    }
    result
}

/// Solves `P = A P A^T + Q` by the doubling iteration.
pub fn discrete_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut ak = a.clone();
    let mut p = q.clone();
    for _ in 0..200 {
        p = &p + &ak * &p * ak.transpose();
        ak = &ak * &ak;
        if ak.amax() < 1e-18 {
            return Ok((&p + p.transpose()) * 0.5);
        }
        if !ak.amax().is_finite() {
            break;
        }
    }
    Err(Error::Numerical("discrete Lyapunov iteration did not converge".into()))
}

/// Streaming sampler: one call to [`Stepper::step`] per output sample.
pub struct Stepper<'a> {
    sys: &'a DiscreteSystem,
    rng: ChaCha20Rng,
    state: Vec<f64>,
    next: Vec<f64>,
    phi: Vec<f64>,
    factor: Vec<f64>,
    rank: usize,
    z: Vec<f64>,
    pending_in: f64,
}

impl<'a> Stepper<'a> {
    fn new(sys: &'a DiscreteSystem, seed: u64, state: Vec<f64>) -> Self {
        let n = sys.dim();
        let rank = sys.factor.ncols();
        // row-major copies for tight loops
        let phi = (0..n * n).map(|i| sys.phi[(i / n, i % n)]).collect();
        let factor = (0..n * rank).map(|i| sys.factor[(i / rank, i % rank)]).collect();
        Stepper {
            sys,
            rng: ChaCha20Rng::seed_from_u64(seed),
            state,
            next: vec![0.0; n],
            phi,
            factor,
            rank,
            z: vec![0.0; rank],
            pending_in: 0.0,
        }
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    /// Branch current of mode `k` (0-based), A.
    pub fn mode_current(&self, k: usize) -> f64 {
        self.state[StateSpace::current_index(k)]
    }

    fn sum_currents(&self) -> f64 {
        (0..self.sys.ss.n_modes()).map(|k| self.mode_current(k)).sum()
    }

    /// Draws this sample's noise and returns the measured current at the
    /// present state; [`Stepper::advance`] then moves to the next sample.
    pub fn measure(&mut self) -> f64 {
        for zi in self.z.iter_mut() {
            *zi = StandardNormal.sample(&mut self.rng);
        }
        self.pending_in = if self.sys.sigma_in > 0.0 {
            let x: f64 = StandardNormal.sample(&mut self.rng);
            x * self.sys.sigma_in
        } else {
            0.0
        };
        self.sum_currents() + self.pending_in
    }

    pub fn advance(&mut self) {
        let n = self.state.len();
        let i_n = self.pending_in;
        for r in 0..n {
            let row = &self.phi[r * n..(r + 1) * n];
            let mut acc: f64 = row.iter().zip(&self.state).map(|(a, b)| a * b).sum();
            let frow = &self.factor[r * self.rank..(r + 1) * self.rank];
            acc += frow.iter().zip(&self.z).map(|(a, b)| a * b).sum::<f64>();
            acc += self.sys.gamma[r] * i_n;
            self.next[r] = acc;
        }
        std::mem::swap(&mut self.state, &mut self.next);
    }

    /// `measure` followed by `advance`.
    pub fn step(&mut self) -> f64 {
        let y = self.measure();
        self.advance();
        y
    }
}

/// Sampled record with named channels of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub fs: f64,
    /// Time of the first sample, s.
    pub t0: f64,
    pub names: Vec<String>,
    pub channels: Vec<Vec<f64>>,
}

/// JSON sidecar describing a binary time series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesSidecar {
    pub fs_hz: f64,
    pub t0_s: f64,
    pub n_samples: usize,
    pub channels: Vec<String>,
    /// Samples are stored interleaved, one row per time step.
    pub layout: String,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
}

impl TimeSeries {
    pub fn new(fs: f64, t0: f64, names: Vec<String>, channels: Vec<Vec<f64>>) -> Result<Self> {
        ensure_positive("fs_hz", fs)?;
        if names.len() != channels.len() || names.is_empty() {
            return Err(Error::validation("channels", "one name per channel required"));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::validation("channels", "channels differ in length"));
        }
        if channels.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::validation("channels", "non-finite sample"));
        }
        Ok(TimeSeries {
            fs,
            t0,
            names,
            channels,
        })
    }

    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.channels[i].as_slice())
    }

    /// The measured current, or the first channel if it is not named.
    pub fn measured(&self) -> &[f64] {
        self.channel(MEASURED_CHANNEL).unwrap_or(&self.channels[0])
    }

    pub fn time(&self, n: usize) -> f64 {
        self.t0 + n as f64 / self.fs
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.len() * 24 * (self.channels.len() + 1));
        out.push_str("time_s");
        for n in &self.names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for i in 0..self.len() {
            out.push_str(&format!("{:.16e}", self.time(i)));
            for c in &self.channels {
                out.push_str(&format!(",{:.16e}", c[i]));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.len() < 2 || cols[0] != "time_s" {
            return Err(parse_err(1, "header must start with time_s"));
        }
        let names: Vec<String> = cols[1..].iter().map(|s| s.to_string()).collect();
        let mut times = Vec::new();
        let mut channels = vec![Vec::new(); names.len()];
        for (ln, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<&str> = line.split(',').collect();
            if vals.len() != cols.len() {
                return Err(parse_err(ln + 1, "wrong number of columns"));
            }
            let parse = |s: &str| -> Result<f64> {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| parse_err(ln + 1, &e.to_string()))
            };
            times.push(parse(vals[0])?);
            for (c, v) in channels.iter_mut().zip(&vals[1..]) {
                c.push(parse(v)?);
            }
        }
        if times.len() < 2 {
            return Err(Error::Length {
                len: times.len(),
                needed: 2,
            });
        }
        let fs = (times.len() - 1) as f64 / (times[times.len() - 1] - times[0]);
        TimeSeries::new(fs, times[0], names, channels)
    }

    pub fn sidecar(&self, seed: Option<u64>, config_hash: Option<String>) -> SeriesSidecar {
        SeriesSidecar {
            fs_hz: self.fs,
            t0_s: self.t0,
            n_samples: self.len(),
            channels: self.names.clone(),
            layout: "interleaved-f64-le".into(),
            seed,
            config_hash,
        }
    }

    /// Raw little-endian f64 samples, interleaved by time step.
    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * self.channels.len() * 8);
        for i in 0..self.len() {
            for c in &self.channels {
                out.extend_from_slice(&c[i].to_le_bytes());
            }
        }
        out
    }

    pub fn from_binary(bytes: &[u8], sidecar: &SeriesSidecar) -> Result<Self> {
        let nc = sidecar.channels.len();
        let needed = sidecar.n_samples * nc * 8;
        if bytes.len() != needed {
            return Err(Error::Length {
                len: bytes.len(),
                needed,
            });
        }
        let mut channels = vec![Vec::with_capacity(sidecar.n_samples); nc];
        for (i, chunk) in bytes.chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
            channels[i % nc].push(v);
        }
        TimeSeries::new(sidecar.fs_hz, sidecar.t0_s, sidecar.channels.clone(), channels)
    }

    /// Reads a CSV series, or a binary one when `path` has a `.json`
    /// sidecar next to it (`x.bin` + `x.json`).
    pub fn load(path: &Path) -> Result<Self> {
        let read = |p: &Path| -> Result<Vec<u8>> {
            let mut buf = Vec::new();
            File::open(p)
                .and_then(|mut f| f.read_to_end(&mut buf))
                .map_err(|e| Error::io(p, e))?;
            Ok(buf)
        };
        let is_bin = path.extension().is_some_and(|e| e == "bin");
        if is_bin {
            let side_path = path.with_extension("json");
            let side: SeriesSidecar = serde_json::from_slice(&read(&side_path)?).map_err(|e| Error::Parse {
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            })?;
            TimeSeries::from_binary(&read(path)?, &side)
        } else {
            let bytes = read(path)?;
            let text = String::from_utf8(bytes).map_err(|e| parse_err(0, &e.to_string()))?;
            TimeSeries::from_csv(&text)
        }
    }

    /// Writes CSV text to `path` (non-atomic; callers stage as needed).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        w.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn parse_err(line: usize, message: &str) -> Error {
    Error::Parse {
        line,
        column: 0,
        message: message.to_string(),
    }
}

fn mode_channel_names(ss: &StateSpace) -> Vec<String> {
    ss.modes.iter().map(|m| format!("mode{}_a", m.index)).collect()
}

fn recorded_samples(dsys: &DiscreteSystem, cfg: &SimConfig) -> Result<(usize, usize)> {
    let f_max = dsys.ss.modes.iter().map(|m| m.f0()).fold(0.0, f64::max);
    cfg.check_modes(f_max)?;
    if (cfg.fs - dsys.fs).abs() > 1e-12 * dsys.fs {
        return Err(Error::validation("fs_hz", "differs from the discretization rate"));
    }
    let burn = dsys.burn_in(cfg);
    if burn >= cfg.duration {
        return Err(Error::validation(
            "burn_in_s",
            format!("burn-in {burn} s is not shorter than duration {} s", cfg.duration),
        ));
    }
    let n_burn = (burn * cfg.fs).round() as usize;
    let n_total = (cfg.duration * cfg.fs).round() as usize;
    Ok((n_burn, n_total - n_burn))
}

/// Runs the sampler and hands every recorded sample to `sink` together with
/// the current state, without storing the record. Returns the record start
/// time and sample count.
pub fn simulate_stream<F>(dsys: &DiscreteSystem, cfg: &SimConfig, mut sink: F) -> Result<(f64, usize)>
where
    F: FnMut(f64, &Stepper<'_>),
{
    let (n_burn, n_rec) = recorded_samples(dsys, cfg)?;
    let mut st = dsys.stepper(cfg.seed);
    if dsys.has_noise() {
        for _ in 0..n_burn {
            st.step();
        }
    }
    for _ in 0..n_rec {
        let y = st.measure();
        sink(y, &st);
        st.advance();
    }
    Ok((n_burn as f64 / cfg.fs, n_rec))
}

/// Simulates the closed loop and collects the recorded samples.
pub fn simulate(dsys: &DiscreteSystem, cfg: &SimConfig, record_modes: bool) -> Result<TimeSeries> {
    let n_modes = dsys.ss.n_modes();
    let mut measured = Vec::new();
    let mut modes: Vec<Vec<f64>> = if record_modes { vec![Vec::new(); n_modes] } else { Vec::new() };
    let (t0, _) = simulate_stream(dsys, cfg, |y, st| {
        measured.push(y);
        for (k, c) in modes.iter_mut().enumerate() {
            c.push(st.mode_current(k));
        }
    })?;
    let mut names = vec![MEASURED_CHANNEL.to_string()];
    let mut channels = vec![measured];
    if record_modes {
        names.extend(mode_channel_names(&dsys.ss));
        channels.extend(modes);
    }
    TimeSeries::new(cfg.fs, t0, names, channels)
}

fn mode_position(ss: &StateSpace, mode_index: usize) -> Result<usize> {
    ss.modes
        .iter()
        .position(|m| m.index == mode_index)
        .ok_or_else(|| Error::validation("mode_index", format!("no mode labelled {mode_index}")))
}

/// Free decay from `I_mode = i0` with everything else at rest. Any noise in
/// `dsys` is kept. No burn-in is applied; per-mode currents are recorded.
pub fn ringdown(dsys: &DiscreteSystem, cfg: &SimConfig, mode_index: usize, i0: f64) -> Result<TimeSeries> {
    let k = mode_position(&dsys.ss, mode_index)?;
    let n = (cfg.duration * cfg.fs).round() as usize;
    let mut x0 = vec![0.0; dsys.dim()];
    x0[StateSpace::current_index(k)] = i0;
    let mut st = Stepper::new(dsys, cfg.seed, x0);
    let n_modes = dsys.ss.n_modes();
    let mut measured = Vec::with_capacity(n);
    let mut modes = vec![Vec::with_capacity(n); n_modes];
    for _ in 0..n {
        measured.push(st.measure());
        for (j, c) in modes.iter_mut().enumerate() {
            c.push(st.mode_current(j));
        }
        st.advance();
    }
    let mut names = vec![MEASURED_CHANNEL.to_string()];
    names.extend(mode_channel_names(&dsys.ss));
    let mut channels = vec![measured];
    channels.extend(modes);
    TimeSeries::new(cfg.fs, 0.0, names, channels)
}

/// Drives every branch with `amplitude * cos(2 pi f t)` in series and records
/// the response after the burn-in. Per-mode currents are recorded.
pub fn inject_calibration(dsys: &DiscreteSystem, cfg: &SimConfig, amplitude: f64, f: f64) -> Result<TimeSeries> {
    if !amplitude.is_finite() {
        return Err(Error::validation("amplitude", "must be finite"));
    }
    ensure_positive("f_hz", f)?;
    let (n_burn, n_rec) = recorded_samples(dsys, cfg)?;
    let n = dsys.dim();
    let w = 2.0 * PI * f;
    // particular solution X = (iw - A)^-1 B V
    let mut m = nalgebra::DMatrix::<nalgebra::Complex<f64>>::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            m[(r, c)] = nalgebra::Complex::new(-dsys.ss.drift[(r, c)], if r == c { w } else { 0.0 });
        }
    }
    let rhs = nalgebra::DVector::from_iterator(
        n,
        dsys.ss.drive_input.iter().map(|b| nalgebra::Complex::new(b * amplitude, 0.0)),
    );
    let x = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("drive frequency coincides with a pole".into()))?;
    let particular = |t: f64| -> Vec<f64> {
        let e = nalgebra::Complex::new((w * t).cos(), (w * t).sin());
        x.iter().map(|xi| (xi * e).re).collect()
    };

    let dt = 1.0 / cfg.fs;
    let mut st = dsys.stepper(cfg.seed);
    if dsys.has_noise() {
        for _ in 0..n_burn {
            st.step();
        }
    }
    let n_modes = dsys.ss.n_modes();
    let mut measured = Vec::with_capacity(n_rec);
    let mut modes = vec![Vec::with_capacity(n_rec); n_modes];
    // deterministic transient: starts at -X(0), decays as Phi^n
    let x_tr0 = DVector::from_vec(particular(0.0).into_iter().map(|v| -v).collect());
    let mut transient: Vec<f64> = (matrix_power(&dsys.phi, n_burn) * x_tr0).iter().copied().collect();
    let mut tmp = vec![0.0; n];
    for step in n_burn..n_burn + n_rec {
        let t = step as f64 * dt;
        let y_noise = st.measure();
        let p = particular(t);
        let total = |i: usize| st.state[i] + p[i] + transient[i];
        measured.push(y_noise + (0..n_modes).map(|k| p[2 * k + 1] + transient[2 * k + 1]).sum::<f64>());
        for (k, c) in modes.iter_mut().enumerate() {
            c.push(total(StateSpace::current_index(k)));
        }
        st.advance();
        for (r, out) in tmp.iter_mut().enumerate() {
            *out = (0..n).map(|c| dsys.phi[(r, c)] * transient[c]).sum();
        }
        std::mem::swap(&mut transient, &mut tmp);
    }
    let mut names = vec![MEASURED_CHANNEL.to_string()];
    names.extend(mode_channel_names(&dsys.ss));
    let mut channels = vec![measured];
    channels.extend(modes);
    TimeSeries::new(cfg.fs, n_burn as f64 * dt, names, channels)
}
