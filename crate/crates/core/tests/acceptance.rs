//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use colddamp::cli::{calibration_tones, run_command, Cli, ExperimentConfig};
use colddamp::estimation::{
    estimate_impedance, fit_modes, ringdown_decay, PsdEstimate, WelchAccumulator, WelchConfig,
};
use colddamp::feedback::{close_loop, gain_for_target, AmplifierModel, ClosedLoopMode, LoopFilter};
use colddamp::modes::{occupation_number, rms_displacement, MechanicalResonator, ModeSet, NormalMode, K_B};
use colddamp::simulator::{build_state_space, discretize, ringdown, simulate_stream, SimConfig};
use colddamp::spectra::{
    integrate_psd, mode_current_psd, optimum_gain, predict_temperatures, predicted_temperature_refined,
    predicted_temperature_simple, total_current_psd_for_loops, FrequencyGrid,
};
use clap::Parser;
use num_complex::Complex64;

const T0: f64 = 4.2;
const L_IN: f64 = 1.74e-6;
const S_IN: f64 = 6.6e-26;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rel(a: f64, b: f64) -> f64 {
    (a / b - 1.0).abs()
}

/// Band integral of the closed-loop line over +-200 linewidths.
fn closure() -> Outcome {
    let mut worst = (0.0, 0, 0.0);
    let mut pass = true;
    for m in ModeSet::default_modes().iter() {
        for g in [0.0, 1e2, 1e4] {
            let clm = ClosedLoopMode::with_damping_ratio(*m, g).unwrap();
            let lw = clm.linewidth_hz();
            let grid = FrequencyGrid::around(m.f0(), 200.0 * lw, lw, 40, 1e-6).unwrap();
            let spectrum = mode_current_psd(&clm, T0, &grid).unwrap();
            let got = integrate_psd(&spectrum, grid.f_start, grid.f_stop).unwrap();
            let err = rel(got, K_B * T0 / (m.l * (1.0 + g)));
            if err >= 2e-3 {
                pass = false;
            }
            if err > worst.0 {
                worst = (err, m.index, g);
            }
        }
    }
    outcome(
        pass,
        format!("worst relative error {:.3e} (mode {}, g = {:.0e}), tolerance 2e-3", worst.0, worst.1, worst.2),
    )
}

fn desk_mode() -> ModeSet {
    ModeSet::new(vec![NormalMode::from_measurement(1, 1.0e-5, 900.0, 1e4).unwrap()]).unwrap()
}

fn scaled_law() -> Outcome {
    let modes = desk_mode();
    let amp = AmplifierModel::noiseless(L_IN).with_noise(S_IN, 0.0);
    let fs = 7200.0;
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, g) in [0.0, 9.0, 99.0].into_iter().enumerate() {
        let dc = gain_for_target(&modes.modes()[0], &amp, 200.0, g).unwrap();
        let filter = LoopFilter::new(dc, 200.0).unwrap();
        let clm = close_loop(&modes.modes()[0], &amp, &filter).unwrap();
        let ss = build_state_space(&modes, &amp, &filter, T0).unwrap();
        let d = discretize(&ss, fs).unwrap();
        let tau = clm.relaxation_time();
        let burn = 10.0 * tau;
        let cfg = SimConfig::new(fs, burn + 2000.0 * tau, 100 + i as u64, Some(burn)).unwrap();
        let wcfg = WelchConfig::for_linewidth(fs, clm.linewidth_hz(), 10.0).unwrap();
        let mut acc = WelchAccumulator::new(wcfg, fs).unwrap();
        simulate_stream(&d, &cfg, |y, _| acc.push(y)).unwrap();
        let psd = acc.finish().unwrap();
        let fit = fit_modes(&psd, 1, &[modes.modes()[0].l]).unwrap();
        let expect = T0 / (1.0 + g);
        let t = fit.modes[0].t_kelvin;
        pass &= rel(t, expect) < 0.10;
        parts.push(format!("g={g}: {t:.4e} K vs {expect:.4e} K"));
    }
    // published points from their (T0, g) pairs
    let t1 = predicted_temperature_simple(T0, 2000.0).unwrap();
    let g3 = T0 / 1.7e-4 - 1.0;
    pass &= rel(t1, 2.0e-3) < 0.05;
    pass &= (2200.0..=30000.0).contains(&g3);
    parts.push(format!("T(g=2000) = {t1:.3e} K, g(0.17 mK) = {g3:.3e}"));
    outcome(pass, parts.join("; "))
}

fn synthetic(loops: &[ClosedLoopMode], df: f64, lo: f64, hi: f64) -> PsdEstimate {
    let n = ((hi - lo) / df).round() as usize + 1;
    let grid = FrequencyGrid::new(lo, lo + (n - 1) as f64 * df, n).unwrap();
    let amp = AmplifierModel::noiseless(L_IN).with_noise(S_IN, 0.0);
    let spectrum = total_current_psd_for_loops(loops, &amp, T0, &grid).unwrap();
    PsdEstimate {
        fs: 2.0 * hi,
        segment_length: 0,
        frequencies: spectrum.frequencies(),
        values: spectrum.values,
        n_averages: 1,
        window_corrected: true,
    }
}

fn fit_round_trip() -> Outcome {
    let modes = ModeSet::default_modes();
    let ls: Vec<f64> = modes.iter().map(|m| m.l).collect();
    let loops: Vec<ClosedLoopMode> = modes
        .iter()
        .zip([8e3, 2e3, 1e3])
        .map(|(m, qp)| ClosedLoopMode::with_damping_ratio(*m, m.q() / qp - 1.0).unwrap())
        .collect();
    let fit = fit_modes(&synthetic(&loops, 0.005, 840.0, 990.0), 3, &ls).unwrap();
    let mut worst_exact: f64 = 0.0;
    for (e, c) in fit.modes.iter().zip(&loops) {
        worst_exact = worst_exact
            .max(rel(e.t_kelvin, T0 / (1.0 + c.g)))
            .max(rel(e.f_hz, c.mode.f0()))
            .max(rel(e.q_prime, c.q_prime));
    }

    // shared loop, simulated noise
    let amp = AmplifierModel::noiseless(L_IN).with_noise(S_IN, 0.0);
    let filter = LoopFilter::new(0.09, 200.0).unwrap();
    let ss = build_state_space(&modes, &amp, &filter, T0).unwrap();
    let fs = 8000.0;
    let d = discretize(&ss, fs).unwrap();
    let wcfg = WelchConfig::new(1 << 19).unwrap();
    let hop = wcfg.hop() as f64 / fs;
    let burn = 10.0 * ss.slowest_time_constant();
    let record = (wcfg.segment_length as f64 + 400.0 * hop * fs) / fs + 1.0;
    let cfg = SimConfig::new(fs, burn + record, 2024, Some(burn)).unwrap();
    let mut acc = WelchAccumulator::new(wcfg, fs).unwrap();
    simulate_stream(&d, &cfg, |y, _| acc.push(y)).unwrap();
    let psd = acc.finish().unwrap();
    let noisy = fit_modes(&psd, 3, &ls).unwrap();
    let mut worst_noisy: f64 = 0.0;
    for (e, clm) in noisy.modes.iter().zip(&ss.loops) {
        let expect = predict_temperatures(clm, &amp, T0).unwrap().t_refined;
        worst_noisy = worst_noisy.max(rel(e.t_kelvin, expect));
    }
    outcome(
        worst_exact < 1e-6 && psd.n_averages >= 400 && worst_noisy < 0.05,
        format!(
            "noiseless worst {worst_exact:.2e} (tol 1e-6); simulated worst T error {worst_noisy:.3e} (tol 5e-2) over {} averages",
            psd.n_averages
        ),
    )
}

fn optimum() -> Outcome {
    let m = ModeSet::default_modes().modes()[1];
    let amp = AmplifierModel::noiseless(L_IN).with_noise(S_IN, 0.0);
    let opt = optimum_gain(&m, &amp, T0).unwrap();
    let brute = (0..10_000)
        .map(|i| 10f64.powf(9.0 * i as f64 / 9_999.0))
        .map(|g| predicted_temperature_refined(&m, &amp, T0, g).unwrap())
        .fold(f64::INFINITY, f64::min);
    outcome(
        rel(opt.t_min, 4.0e-5) < 0.05 && rel(opt.t_min, brute) < 0.05,
        format!("T_min = {:.4e} K at g = {:.3e}; grid minimum {brute:.4e} K", opt.t_min, opt.g_opt),
    )
}

fn pole_placement() -> Outcome {
    let modes = desk_mode();
    let m = modes.modes()[0];
    let amp = AmplifierModel::noiseless(L_IN);
    let fs = 7200.0;
    let mut pass = true;
    let mut parts = Vec::new();
    for g in [9.0, 99.0] {
        let filter = LoopFilter::new(gain_for_target(&m, &amp, 200.0, g).unwrap(), 200.0).unwrap();
        let ss = build_state_space(&modes, &amp, &filter, 0.0).unwrap();
        let d = discretize(&ss, fs).unwrap();
        let expect = (1.0 + g) * m.omega0() / (2.0 * m.q());
        let cfg = SimConfig::new(fs, 3.0 / expect, 0, Some(0.0)).unwrap();
        let fit = ringdown_decay(&ringdown(&d, &cfg, 1, 1e-9).unwrap()).unwrap();
        let rate = 1.0 / fit.tau_s;
        pass &= rel(rate, expect) < 0.02;
        parts.push(format!("g={g}: {rate:.4} vs {expect:.4} 1/s"));
    }
    outcome(pass, parts.join("; "))
}

fn calibration() -> Outcome {
    let v = 1e-9;
    let mut worst = [0.0f64; 3];
    let mut check = |m: &NormalMode, tones: &[(f64, Complex64)]| {
        let cal = estimate_impedance(tones, v).unwrap();
        worst[0] = worst[0].max(rel(cal.l_henry, m.l));
        worst[1] = worst[1].max(rel(cal.c_farad, m.c));
        worst[2] = worst[2].max(rel(cal.r_ohm, m.r));
    };
    for m in ModeSet::default_modes().iter() {
        let lw = m.linewidth_hz();
        let tones: Vec<(f64, Complex64)> = (0..9)
            .map(|k| {
                let f = m.f0() + lw * (k as f64 - 4.0) * 0.75;
                (f, v / m.impedance(f).unwrap())
            })
            .collect();
        check(m, &tones);
    }
    let mut cfg = ExperimentConfig::default();
    for idx in 1..=3 {
        cfg.calibration.mode_index = idx;
        cfg.calibration.amplitude_v = v;
        let tones = calibration_tones(&cfg).unwrap();
        check(&ModeSet::default_modes().modes()[idx - 1], &tones);
    }
    outcome(
        worst[0] < 1e-3 && worst[1] < 1e-3 && worst[2] < 1e-2,
        format!("worst L {:.2e}, C {:.2e}, R {:.2e} (tol 1e-3/1e-3/1e-2)", worst[0], worst[1], worst[2]),
    )
}

fn anchors() -> Outcome {
    let x = rms_displacement(&MechanicalResonator::new(1.1e3, 2.0 * PI * 900.0).unwrap(), T0).unwrap();
    let n = occupation_number(1.7e-4, 914.0).unwrap();
    let one_figure = format!("{x:.0e}");
    outcome(
        one_figure == "4e-17" && rel(n, 4000.0) < 0.05,
        format!("x_rms = {x:.3e} m, n = {n:.1}"),
    )
}

fn sweep_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "meta.json")
        .collect();
    names.sort();
    names.into_iter().map(|n| (n.clone(), std::fs::read(dir.join(&n)).unwrap())).collect()
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("desk.json");
    std::fs::write(
        &config,
        r#"{"modes":[{"l_henry":5e-6,"f_hz":900,"q":1000}],
            "filter":{"dc_gain":0.0,"f_c_hz":2000},
            "sim":{"fs_hz":7200,"duration_s":300,"seed":11},
            "sweep":{"gains":[0,9,99]}}"#,
    )
    .unwrap();
    let run = |dir: &str, workers: &str| {
        let out = tmp.path().join(dir);
        let cli = Cli::try_parse_from([
            "colddamp",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--workers",
            workers,
            "sweep",
        ])
        .unwrap();
        run_command(&cli).unwrap();
        sweep_files(&out)
    };
    let a = run("a", "1");
    let b = run("b", "3");
    outcome(a == b && a.len() == 5, format!("{} artifacts compared byte for byte", a.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("line integral closure", closure),
        ("scaled temperature law", scaled_law),
        ("fit round trip", fit_round_trip),
        ("optimum gain", optimum),
        ("closed-loop pole placement", pole_placement),
        ("calibration round trip", calibration),
        ("scalar anchors", anchors),
        ("sweep determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let status = if result.pass { "PASS" } else { "FAIL" };
        if !result.pass {
            failed += 1;
        }
        println!(
            "{status} criterion {} ({name}): {} [{:.2} s]",
            i + 1,
            result.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
}
