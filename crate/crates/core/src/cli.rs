//! Command-line front end and artifact output.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimation::{
    estimate_impedance, extract_temperature, fit_modes, lock_in, welch_psd, CalibrationResult, ModeFitResult,
    WelchAccumulator, WelchConfig, Window,
};
use crate::feedback::{close_loop, gain_for_target, AmplifierModel, ClosedLoopMode, LoopFilter};
use crate::modes::{ModeSet, NormalMode, DEFAULT_MODE_PARAMS};
use crate::simulator::{build_state_space, discretize, inject_calibration, simulate, simulate_stream, SimConfig, TimeSeries};
use crate::spectra::{optimum_gain, predict_temperatures, total_current_psd_for_loops, FrequencyGrid, OptimumGain};

pub const RUN_SCHEMA: &str = "colddamp-run/1";

/// Bins across the narrowest closed-loop line when the segment length is automatic.
pub const AUTO_BINS_PER_LINEWIDTH: f64 = 10.0;

/// Largest analytic spectrum written by `predict`.
const MAX_PREDICT_POINTS: usize = 200_001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BathConfig {
    pub t0_kelvin: f64,
}

impl Default for BathConfig {
    fn default() -> Self {
        BathConfig { t0_kelvin: 4.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeConfig {
    pub l_henry: f64,
    pub f_hz: f64,
    pub q: f64,
}

fn default_modes() -> Vec<ModeConfig> {
    DEFAULT_MODE_PARAMS
        .iter()
        .map(|&(l_henry, f_hz, q)| ModeConfig { l_henry, f_hz, q })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AmplifierConfig {
    pub a_gain: f64,
    pub l_in_henry: f64,
    pub s_in_a2_per_hz: f64,
    pub s_vn_v2_per_hz: f64,
}

impl Default for AmplifierConfig {
    fn default() -> Self {
        AmplifierConfig {
            a_gain: 1.0,
            l_in_henry: 1.74e-6,
            s_in_a2_per_hz: 6.6e-26,
            s_vn_v2_per_hz: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub dc_gain: f64,
    pub f_c_hz: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            dc_gain: 0.09,
            f_c_hz: 200.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub fs_hz: f64,
    pub duration_s: f64,
    pub burn_in_s: Option<f64>,
    pub seed: u64,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            fs_hz: 8000.0,
            duration_s: 600.0,
            burn_in_s: None,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WelchSection {
    /// `None` picks a power of two giving ten bins per narrowest linewidth.
    pub segment_length: Option<usize>,
    pub overlap: f64,
    pub window: Window,
}

impl Default for WelchSection {
    fn default() -> Self {
        WelchSection {
            segment_length: None,
            overlap: 0.5,
            window: Window::Hann,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// Damping ratios of the reference mode.
    pub gains: Vec<f64>,
    /// 1-based mode whose damping ratio the gains refer to.
    pub reference_mode: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            gains: vec![0.0, 9.0, 99.0],
            reference_mode: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSection {
    pub mode_index: usize,
    pub amplitude_v: f64,
    pub n_tones: usize,
    /// Total tone span in open-loop linewidths, centred on the resonance.
    pub span_linewidths: f64,
    /// Recorded time per tone after settling, s.
    pub record_s: f64,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        CalibrationSection {
            mode_index: 1,
            amplitude_v: 1e-12,
            n_tones: 9,
            span_linewidths: 6.0,
            record_s: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub bath: BathConfig,
    #[serde(default = "default_modes")]
    pub modes: Vec<ModeConfig>,
    #[serde(default)]
    pub amplifier: AmplifierConfig,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub welch: WelchSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub calibration: CalibrationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            bath: BathConfig::default(),
            modes: default_modes(),
            amplifier: AmplifierConfig::default(),
            filter: FilterConfig::default(),
            sim: SimSection::default(),
            welch: WelchSection::default(),
            sweep: SweepSection::default(),
            calibration: CalibrationSection::default(),
        }
    }
}

fn check(field: &str, value: f64, positive: bool) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::validation(field, format!("must be finite, got {value}")));
    }
    if positive && value <= 0.0 {
        return Err(Error::validation(field, format!("must be > 0, got {value}")));
    }
    if !positive && value < 0.0 {
        return Err(Error::validation(field, format!("must be >= 0, got {value}")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        check("bath.t0_kelvin", self.bath.t0_kelvin, false)?;
        if self.modes.is_empty() {
            return Err(Error::validation("modes", "at least one mode is required"));
        }
        for (i, m) in self.modes.iter().enumerate() {
            check(&format!("modes[{i}].l_henry"), m.l_henry, true)?;
            check(&format!("modes[{i}].f_hz"), m.f_hz, true)?;
            check(&format!("modes[{i}].q"), m.q, true)?;
            if m.q <= 1.0 {
                return Err(Error::validation(format!("modes[{i}].q"), format!("must be > 1, got {}", m.q)));
            }
            if i > 0 && m.f_hz <= self.modes[i - 1].f_hz {
                return Err(Error::validation(
                    format!("modes[{i}].f_hz"),
                    "mode frequencies must be strictly increasing",
                ));
            }
        }
        let a = &self.amplifier;
        if !a.a_gain.is_finite() || a.a_gain == 0.0 {
            return Err(Error::validation("amplifier.a_gain", "must be finite and non-zero"));
        }
        check("amplifier.l_in_henry", a.l_in_henry, true)?;
        check("amplifier.s_in_a2_per_hz", a.s_in_a2_per_hz, false)?;
        check("amplifier.s_vn_v2_per_hz", a.s_vn_v2_per_hz, false)?;
        check("filter.dc_gain", self.filter.dc_gain, false)?;
        check("filter.f_c_hz", self.filter.f_c_hz, true)?;
        check("sim.fs_hz", self.sim.fs_hz, true)?;
        check("sim.duration_s", self.sim.duration_s, true)?;
        let f_max = self.modes.iter().map(|m| m.f_hz).fold(0.0, f64::max);
        if self.sim.fs_hz < crate::simulator::MIN_OVERSAMPLING * f_max {
            return Err(Error::validation(
                "sim.fs_hz",
                format!("must be at least {} x the highest mode frequency", crate::simulator::MIN_OVERSAMPLING),
            ));
        }
        if let Some(b) = self.sim.burn_in_s {
            check("sim.burn_in_s", b, false)?;
            if b >= self.sim.duration_s {
                return Err(Error::validation("sim.burn_in_s", "must be below sim.duration_s"));
            }
        }
        if let Some(n) = self.welch.segment_length {
            if n < crate::estimation::MIN_SEGMENT {
                return Err(Error::validation(
                    "welch.segment_length",
                    format!("must be at least {}", crate::estimation::MIN_SEGMENT),
                ));
            }
        }
        if !(0.0..1.0).contains(&self.welch.overlap) {
            return Err(Error::validation("welch.overlap", "must lie in [0, 1)"));
        }
        for (i, g) in self.sweep.gains.iter().enumerate() {
            check(&format!("sweep.gains[{i}]"), *g, false)?;
        }
        if self.sweep.reference_mode == 0 || self.sweep.reference_mode > self.modes.len() {
            return Err(Error::validation("sweep.reference_mode", "must name a configured mode (1-based)"));
        }
        let c = &self.calibration;
        if c.mode_index == 0 || c.mode_index > self.modes.len() {
            return Err(Error::validation("calibration.mode_index", "must name a configured mode (1-based)"));
        }
        check("calibration.amplitude_v", c.amplitude_v, true)?;
        if c.n_tones < 5 {
            return Err(Error::validation("calibration.n_tones", "at least 5 tones are required"));
        }
        check("calibration.span_linewidths", c.span_linewidths, true)?;
        check("calibration.record_s", c.record_s, true)?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form (sorted keys, shortest round-trip numbers).
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let bytes = serde_json::to_vec(&value).expect("value serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn mode_set(&self) -> Result<ModeSet> {
        let modes = self
            .modes
            .iter()
            .enumerate()
            .map(|(i, m)| NormalMode::from_measurement(i + 1, m.l_henry, m.f_hz, m.q))
            .collect::<Result<Vec<_>>>()?;
        ModeSet::new(modes)
    }

    pub fn amplifier_model(&self) -> Result<AmplifierModel> {
        let a = &self.amplifier;
        AmplifierModel::new(a.a_gain, a.l_in_henry, a.s_in_a2_per_hz, a.s_vn_v2_per_hz)
    }

    pub fn loop_filter(&self) -> Result<LoopFilter> {
        LoopFilter::new(self.filter.dc_gain, self.filter.f_c_hz)
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        SimConfig::new(self.sim.fs_hz, self.sim.duration_s, self.sim.seed, self.sim.burn_in_s)
    }

    /// Welch settings for a record whose narrowest line is `linewidth_hz` wide.
    pub fn welch_config(&self, linewidth_hz: f64) -> Result<WelchConfig> {
        let mut cfg = match self.welch.segment_length {
            Some(n) => WelchConfig::new(n)?,
            None => WelchConfig::for_linewidth(self.sim.fs_hz, linewidth_hz, AUTO_BINS_PER_LINEWIDTH)?,
        };
        cfg.overlap = self.welch.overlap;
        cfg.window = self.welch.window;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn json_error(e: serde_json::Error) -> Error {
    if e.is_data() {
        // unknown keys and type mismatches are reported as validation errors
        Error::validation("config", format!("{e}"))
    } else {
        Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_json::from_str(text).map_err(json_error)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedMode {
    pub mode_index: usize,
    pub f_hz: f64,
    pub g: f64,
    pub q_prime: f64,
    pub t_simple_k: f64,
    pub t_refined_k: f64,
    pub r_d_ohm: f64,
    pub f_shift_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatedMode {
    pub mode_index: usize,
    pub t_kelvin: f64,
    pub t_stderr: f64,
    pub f_hz: f64,
    pub q_prime: f64,
    pub t_integral_k: f64,
    pub inconsistent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub g_target: f64,
    pub dc_gain: f64,
    pub seed: u64,
    pub predicted: Vec<PredictedMode>,
    pub estimated: Vec<EstimatedMode>,
    pub artifact: String,
}

/// Scientific record of one command. Wall-clock data lives in `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunRecord {
    pub schema: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub predicted: Vec<PredictedMode>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub estimated: Vec<EstimatedMode>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub sweep: Vec<SweepPoint>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub optimum: Vec<OptimumGain>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub calibration: Option<CalibrationResult>,
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
struct Meta {
    command: String,
    config_hash: String,
    started_unix_s: f64,
    finished_unix_s: f64,
    version: String,
    workers: Option<usize>,
}

/// Writes `bytes` to `dir/name` through a temporary file and an atomic rename.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    let path = dir.join(name);
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(&path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(&path, e))?;
    tmp.persist(&path).map_err(|e| Error::io(&path, e.error))?;
    Ok(path)
}

/// Writes `run.json`; artifacts referenced by the record are written by the
/// commands themselves before this is called.
pub fn write_records(record: &RunRecord, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut text = serde_json::to_string_pretty(record).expect("record serializes");
    text.push('\n');
    let run = write_atomic(out_dir, "run.json", text.as_bytes())?;
    let mut paths = vec![run];
    paths.extend(record.artifacts.iter().map(|a| out_dir.join(a)));
    Ok(paths)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SeriesFormat {
    /// CSV up to 200000 samples, binary beyond.
    Auto,
    Csv,
    Bin,
}

#[derive(Debug, Parser)]
#[command(name = "colddamp", version, about = "Cold-damping feedback: Langevin simulation and spectral thermometry")]
pub struct Cli {
    /// JSON experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Worker threads for sweeps and spectral estimation.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Overrides `sim.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-mode temperature table and analytic spectrum.
    Predict,
    /// Simulate the closed loop and write the time series.
    Simulate {
        #[arg(long, value_enum, default_value = "auto")]
        format: SeriesFormat,
    },
    /// Welch spectrum and line fit of a recorded series.
    Analyze {
        #[arg(long)]
        series: PathBuf,
    },
    /// Simulate and analyse every gain in `sweep.gains`.
    Sweep,
    /// Optimum damping ratio and minimum temperature per mode.
    Optimum,
    /// Tone sweep around one mode and circuit recovery.
    Calibrate,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Predict => "predict",
            Command::Simulate { .. } => "simulate",
            Command::Analyze { .. } => "analyze",
            Command::Sweep => "sweep",
            Command::Optimum => "optimum",
            Command::Calibrate => "calibrate",
        }
    }
}

fn predicted_rows(loops: &[ClosedLoopMode], amp: &AmplifierModel, t0: f64) -> Result<Vec<PredictedMode>> {
    loops
        .iter()
        .map(|clm| {
            let p = predict_temperatures(clm, amp, t0)?;
            Ok(PredictedMode {
                mode_index: clm.mode.index,
                f_hz: clm.mode.f0(),
                g: clm.g,
                q_prime: clm.q_prime,
                t_simple_k: p.t_simple,
                t_refined_k: p.t_refined,
                r_d_ohm: clm.r_d,
                f_shift_fraction: clm.f_shift,
            })
        })
        .collect()
}

fn estimated_rows(fit: &ModeFitResult) -> Result<Vec<EstimatedMode>> {
    fit.modes
        .iter()
        .map(|m| {
            let t = extract_temperature(fit, m.index, m.l_henry)?;
            Ok(EstimatedMode {
                mode_index: m.index,
                t_kelvin: m.t_kelvin,
                t_stderr: m.t_stderr,
                f_hz: m.f_hz,
                q_prime: m.q_prime,
                t_integral_k: t.t_integral,
                inconsistent: t.inconsistent,
            })
        })
        .collect()
}

fn close_all(modes: &ModeSet, amp: &AmplifierModel, filter: &LoopFilter) -> Result<Vec<ClosedLoopMode>> {
    modes.iter().map(|m| close_loop(m, amp, filter)).collect()
}

fn narrowest_linewidth(loops: &[ClosedLoopMode]) -> f64 {
    loops.iter().map(|c| c.linewidth_hz()).fold(f64::INFINITY, f64::min)
}

struct Context {
    cfg: ExperimentConfig,
    out: PathBuf,
    hash: String,
    record: RunRecord,
}

impl Context {
    fn artifact(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.out, name, bytes)?;
        self.record.artifacts.push(name.to_string());
        Ok(())
    }
}

fn cmd_predict(ctx: &mut Context) -> Result<()> {
    let modes = ctx.cfg.mode_set()?;
    let amp = ctx.cfg.amplifier_model()?;
    let loops = close_all(&modes, &amp, &ctx.cfg.loop_filter()?)?;
    ctx.record.predicted = predicted_rows(&loops, &amp, ctx.cfg.bath.t0_kelvin)?;

    let f_lo = modes.modes()[0].f0();
    let f_hi = modes.modes()[modes.len() - 1].f0();
    let widest = loops.iter().map(|c| c.linewidth_hz()).fold(0.0, f64::max);
    let margin = (0.05 * (f_hi - f_lo)).max(30.0 * widest).max(1.0);
    let lo = (f_lo - margin).max(f_lo * 1e-3);
    let hi = f_hi + margin;
    let n = (((hi - lo) / (narrowest_linewidth(&loops) / 10.0)).ceil() as usize + 1).clamp(2, MAX_PREDICT_POINTS);
    let grid = FrequencyGrid::new(lo, hi, n)?;
    let spectrum = total_current_psd_for_loops(&loops, &amp, ctx.cfg.bath.t0_kelvin, &grid)?;
    ctx.artifact("spectrum.csv", spectrum.to_csv().as_bytes())
}

fn cmd_simulate(ctx: &mut Context, format: SeriesFormat) -> Result<()> {
    let modes = ctx.cfg.mode_set()?;
    let amp = ctx.cfg.amplifier_model()?;
    let filter = ctx.cfg.loop_filter()?;
    let ss = build_state_space(&modes, &amp, &filter, ctx.cfg.bath.t0_kelvin)?;
    ctx.record.predicted = predicted_rows(&ss.loops, &amp, ctx.cfg.bath.t0_kelvin)?;
    let d = discretize(&ss, ctx.cfg.sim.fs_hz)?;
    let ts = simulate(&d, &ctx.cfg.sim_config()?, true)?;
    let binary = match format {
        SeriesFormat::Csv => false,
        SeriesFormat::Bin => true,
        SeriesFormat::Auto => ts.len() > 200_000,
    };
    if binary {
        let side = ts.sidecar(Some(ctx.cfg.sim.seed), Some(ctx.hash.clone()));
        ctx.artifact("series.bin", &ts.to_binary())?;
        let mut text = serde_json::to_string_pretty(&side).expect("sidecar serializes");
        text.push('\n');
        ctx.artifact("series.json", text.as_bytes())
    } else {
        ctx.artifact("series.csv", ts.to_csv().as_bytes())
    }
}

fn cmd_analyze(ctx: &mut Context, series: &Path) -> Result<()> {
    let ts = TimeSeries::load(series)?;
    let modes = ctx.cfg.mode_set()?;
    let amp = ctx.cfg.amplifier_model()?;
    let loops = close_all(&modes, &amp, &ctx.cfg.loop_filter()?)?;
    ctx.record.predicted = predicted_rows(&loops, &amp, ctx.cfg.bath.t0_kelvin)?;
    let mut wcfg = ctx.cfg.welch_config(narrowest_linewidth(&loops))?;
    if ctx.cfg.welch.segment_length.is_none() && wcfg.segment_length > ts.len() {
        // automatic length cannot exceed the record; keep at least a few averages
        let n = (ts.len() / 4).max(crate::estimation::MIN_SEGMENT);
        wcfg.segment_length = if n.is_power_of_two() { n } else { n.next_power_of_two() / 2 };
        wcfg.validate()?;
    }
    let psd = welch_psd(&ts, &wcfg)?;
    let ls: Vec<f64> = modes.iter().map(|m| m.l).collect();
    let fit = fit_modes(&psd, modes.len(), &ls)?;
    ctx.record.estimated = estimated_rows(&fit)?;
    ctx.artifact("psd.csv", psd.to_csv().as_bytes())?;
    ctx.artifact("fit.json", (fit.to_json() + "\n").as_bytes())
}

/// Seed of sweep point `i`, derived from the base seed.
pub fn point_seed(base: u64, i: usize) -> u64 {
    base.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(i as u64 + 1))
}

fn run_point(cfg: &ExperimentConfig, i: usize, g_target: f64) -> Result<(SweepPoint, ModeFitResult)> {
    let modes = cfg.mode_set()?;
    let amp = cfg.amplifier_model()?;
    let reference = modes.modes()[cfg.sweep.reference_mode - 1];
    let dc_gain = gain_for_target(&reference, &amp, cfg.filter.f_c_hz, g_target)?;
    let filter = LoopFilter::new(dc_gain, cfg.filter.f_c_hz)?;
    let ss = build_state_space(&modes, &amp, &filter, cfg.bath.t0_kelvin)?;
    let predicted = predicted_rows(&ss.loops, &amp, cfg.bath.t0_kelvin)?;
    let d = discretize(&ss, cfg.sim.fs_hz)?;
    let seed = point_seed(cfg.sim.seed, i);
    let mut sim = cfg.sim_config()?;
    sim.seed = seed;
    let wcfg = cfg.welch_config(narrowest_linewidth(&ss.loops))?;
    let mut acc = WelchAccumulator::new(wcfg, sim.fs)?;
    simulate_stream(&d, &sim, |y, _| acc.push(y))?;
    let psd = acc.finish()?;
    let ls: Vec<f64> = modes.iter().map(|m| m.l).collect();
    let fit = fit_modes(&psd, modes.len(), &ls)?;
    let estimated = estimated_rows(&fit)?;
    Ok((
        SweepPoint {
            g_target,
            dc_gain,
            seed,
            predicted,
            estimated,
            artifact: format!("sweep_point_{i:03}.json"),
        },
        fit,
    ))
}

/// Rows of the sweep CSV for one point: `(1/(1+g), T0/(1+g), T_est, mode)`.
fn sweep_rows(t0: f64, point: &SweepPoint, out: &mut String) {
    for (p, e) in point.predicted.iter().zip(&point.estimated) {
        let x = 1.0 / (1.0 + p.g);
        let _ = writeln!(out, "{:.16e},{:.16e},{:.16e},{}", x, t0 * x, e.t_kelvin, p.mode_index);
    }
}

fn cmd_sweep(ctx: &mut Context) -> Result<()> {
    let cfg = ctx.cfg.clone();
    let results: Vec<Result<(SweepPoint, ModeFitResult)>> = cfg
        .sweep
        .gains
        .par_iter()
        .enumerate()
        .map(|(i, g)| run_point(&cfg, i, *g))
        .collect();
    let mut points = Vec::with_capacity(results.len());
    for r in results {
        let (point, fit) = r?;
        ctx.artifact(&point.artifact, (fit.to_json() + "\n").as_bytes())?;
        points.push(point);
    }
    let mut csv = String::from("one_over_1_plus_g,t_predicted_k,t_estimated_k,mode_index\n");
    for p in &points {
        sweep_rows(cfg.bath.t0_kelvin, p, &mut csv);
    }
    ctx.record.sweep = points;
    ctx.artifact("sweep.csv", csv.as_bytes())
}

fn cmd_optimum(ctx: &mut Context) -> Result<()> {
    let modes = ctx.cfg.mode_set()?;
    let amp = ctx.cfg.amplifier_model()?;
    ctx.record.optimum = modes
        .iter()
        .map(|m| optimum_gain(m, &amp, ctx.cfg.bath.t0_kelvin))
        .collect::<Result<Vec<_>>>()?;
    Ok(())
}

/// Tone responses of one mode with the loop open and all noise sources off.
pub fn calibration_tones(cfg: &ExperimentConfig) -> Result<Vec<(f64, Complex64)>> {
    let modes = cfg.mode_set()?;
    let c = &cfg.calibration;
    let mode = modes.modes()[c.mode_index - 1];
    let amp = AmplifierModel::noiseless(cfg.amplifier.l_in_henry);
    let filter = LoopFilter::open();
    let ss = build_state_space(&modes, &amp, &filter, 0.0)?;
    let d = discretize(&ss, cfg.sim.fs_hz)?;
    let burn = 10.0 * ss.slowest_time_constant();
    let sim = SimConfig::new(cfg.sim.fs_hz, burn + c.record_s, cfg.sim.seed, Some(burn))?;
    let lw = mode.linewidth_hz();
    let channel = format!("mode{}_a", mode.index);
    (0..c.n_tones)
        .into_par_iter()
        .map(|k| {
            let f = mode.f0() + c.span_linewidths * lw * (k as f64 / (c.n_tones - 1) as f64 - 0.5);
            let ts = inject_calibration(&d, &sim, c.amplitude_v, f)?;
            let x = ts.channel(&channel).expect("mode channel recorded");
            Ok((f, lock_in(x, ts.fs, ts.t0, f)?))
        })
        .collect()
}

fn cmd_calibrate(ctx: &mut Context) -> Result<()> {
    let tones = calibration_tones(&ctx.cfg)?;
    let cal = estimate_impedance(&tones, ctx.cfg.calibration.amplitude_v)?;
    let mut csv = String::from("frequency_hz,current_re_a,current_im_a\n");
    for (f, i) in &tones {
        let _ = writeln!(csv, "{f:.16e},{:.16e},{:.16e}", i.re, i.im);
    }
    ctx.record.calibration = Some(cal);
    ctx.artifact("calibration.csv", csv.as_bytes())
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Runs a parsed command line and returns the record written to `run.json`.
pub fn run_command(cli: &Cli) -> Result<RunRecord> {
    let started = now();
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.sim.seed = seed;
    }
    if cli.workers == Some(0) {
        return Err(Error::validation("workers", "must be at least 1"));
    }
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    let hash = cfg.hash();
    let mut ctx = Context {
        record: RunRecord {
            schema: RUN_SCHEMA.into(),
            command: cli.command.name().into(),
            config_hash: hash.clone(),
            seed: cfg.sim.seed,
            ..RunRecord::default()
        },
        cfg,
        out: cli.out.clone(),
        hash,
    };
    let body = |ctx: &mut Context| -> Result<()> {
        match &cli.command {
            Command::Predict => cmd_predict(ctx),
            Command::Simulate { format } => cmd_simulate(ctx, *format),
            Command::Analyze { series } => cmd_analyze(ctx, series),
            Command::Sweep => cmd_sweep(ctx),
            Command::Optimum => cmd_optimum(ctx),
            Command::Calibrate => cmd_calibrate(ctx),
        }
    };
    match cli.workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Numerical(e.to_string()))?;
            pool.install(|| body(&mut ctx))?
        }
        None => body(&mut ctx)?,
    }
    write_records(&ctx.record, &ctx.out)?;
    let meta = Meta {
        command: ctx.record.command.clone(),
        config_hash: ctx.record.config_hash.clone(),
        started_unix_s: started,
        finished_unix_s: now(),
        version: env!("CARGO_PKG_VERSION").into(),
        workers: cli.workers,
    };
    let mut text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    text.push('\n');
    write_atomic(&ctx.out, "meta.json", text.as_bytes())?;
    Ok(ctx.record)
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    message: String,
    exit_code: i32,
}

/// Entry point used by the binary: parses `args`, runs, reports errors as
/// JSON on standard error and returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let report = ErrorReport {
                error: "usage",
                message: e.to_string().trim().to_string(),
                exit_code: 1,
            };
            eprintln!("{}", serde_json::to_string(&report).expect("report serializes"));
            return 1;
        }
    };
    match run_command(&cli) {
        Ok(_) => 0,
        Err(e) => {
            let code = e.exit_code();
            let report = ErrorReport {
                error: e.kind(),
                message: e.to_string(),
                exit_code: code,
            };
            eprintln!("{}", serde_json::to_string(&report).expect("report serializes"));
            code
        }
    }
}
