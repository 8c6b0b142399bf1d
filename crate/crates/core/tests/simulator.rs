use approx::assert_relative_eq;
use colddamp::error::Error;
use colddamp::estimation::{lock_in, ringdown_decay};
use colddamp::feedback::{close_loop, gain_for_target, AmplifierModel, LoopFilter};
use colddamp::modes::{ModeSet, NormalMode, K_B};
use colddamp::simulator::{
    build_state_space, discretize, inject_calibration, ringdown, simulate, simulate_stream, SimConfig, StateSpace,
    TimeSeries,
};
use num_complex::Complex64;
use proptest::prelude::*;

const L_IN: f64 = 1.74e-6;

fn single(f: f64, q: f64) -> ModeSet {
    ModeSet::new(vec![NormalMode::from_measurement(1, 1.0e-5, f, q).unwrap()]).unwrap()
}

fn loop_for(modes: &ModeSet, k: usize, g: f64) -> LoopFilter {
    let amp = AmplifierModel::noiseless(L_IN);
    LoopFilter::new(gain_for_target(&modes.modes()[k], &amp, 200.0, g).unwrap(), 200.0).unwrap()
}

#[test]
fn open_loop_poles_are_rlc_poles() {
    let modes = ModeSet::default_modes();
    let ss = build_state_space(&modes, &AmplifierModel::noiseless(L_IN), &LoopFilter::open(), 4.2).unwrap();
    let eig = ss.eigenvalues();
    for m in modes.iter() {
        let w = m.omega0();
        let q = m.q();
        let expect = Complex64::new(-w / (2.0 * q), w * (1.0 - 1.0 / (4.0 * q * q)).sqrt());
        let best = eig.iter().map(|z| (z - expect).norm()).fold(f64::INFINITY, f64::min);
        assert!(best / w < 1e-9, "mode {}: {best}", m.index);
    }
}

#[test]
fn closed_loop_pole_moves_by_one_plus_g() {
    let modes = ModeSet::default_modes();
    let g = 125.0;
    let filter = loop_for(&modes, 1, g);
    let ss = build_state_space(&modes, &AmplifierModel::noiseless(L_IN), &filter, 4.2).unwrap();
    let m = modes.modes()[1];
    let expect = -(1.0 + g) * m.omega0() / (2.0 * m.q());
    let pole = ss
        .eigenvalues()
        .into_iter()
        .filter(|z| z.im > 0.0)
        .min_by(|a, b| (a.im - m.omega0()).abs().total_cmp(&(b.im - m.omega0()).abs()))
        .unwrap();
    assert!((pole.re / expect - 1.0).abs() < 0.02, "{} vs {expect}", pole.re);
}

#[test]
fn weak_loop_poles_match_closed_loop_q() {
    let modes = ModeSet::default_modes();
    let filter = LoopFilter::new(0.02, 200.0).unwrap();
    let amp = AmplifierModel::noiseless(L_IN);
    let ss = build_state_space(&modes, &amp, &filter, 4.2).unwrap();
    for m in modes.iter() {
        let clm = close_loop(m, &amp, &filter).unwrap();
        assert!(clm.ad.norm() < 0.01);
        let w = m.omega0();
        let qp = clm.q_prime;
        let expect = Complex64::new(-w / (2.0 * qp), w * (1.0 - 1.0 / (4.0 * qp * qp)).sqrt());
        let best = ss.eigenvalues().iter().map(|z| (z - expect).norm()).fold(f64::INFINITY, f64::min);
        assert!(best / expect.norm() < 1e-3);
        // the shared loop couples the branches; the damping itself moves by well under 1%
        let pole = ss
            .eigenvalues()
            .into_iter()
            .min_by(|a, b| (a - expect).norm().total_cmp(&(b - expect).norm()))
            .unwrap();
        assert!((pole.re / expect.re - 1.0).abs() < 1e-2, "mode {}: {} vs {}", m.index, pole.re, expect.re);

        // alone on the loop the damping matches to 0.1%
        let alone = build_state_space(&ModeSet::new(vec![*m]).unwrap(), &amp, &filter, 4.2).unwrap();
        let pole = alone
            .eigenvalues()
            .into_iter()
            .min_by(|a, b| (a - expect).norm().total_cmp(&(b - expect).norm()))
            .unwrap();
        assert!((pole.re / expect.re - 1.0).abs() < 1e-3, "mode {} alone: {} vs {}", m.index, pole.re, expect.re);
    }
}

#[test]
fn positive_feedback_is_unstable_or_rejected() {
    let modes = single(900.0, 1e4);
    let amp = AmplifierModel::new(-1.0, L_IN, 0.0, 0.0).unwrap();
    let err = build_state_space(&modes, &amp, &LoopFilter::new(0.2, 200.0).unwrap(), 4.2).unwrap_err();
    assert!(matches!(err, Error::AntiDamping { .. } | Error::Instability { .. }));
}

#[test]
fn discrete_pole_magnitude() {
    let modes = single(900.0, 1e4);
    let ss = build_state_space(&modes, &AmplifierModel::noiseless(L_IN), &LoopFilter::open(), 4.2).unwrap();
    let fs = 7200.0;
    let d = discretize(&ss, fs).unwrap();
    let m = modes.modes()[0];
    let expect = (-m.omega0() / (2.0 * m.q()) / fs).exp();
    let eig = d.phi.clone().complex_eigenvalues();
    let mag = eig.iter().map(|z| z.norm()).filter(|r| *r > 0.5).fold(0.0, f64::max);
    assert_relative_eq!(mag, expect, max_relative = 1e-10);
}

#[test]
fn zero_noise_zero_covariance() {
    let modes = ModeSet::default_modes();
    let ss = build_state_space(&modes, &AmplifierModel::noiseless(L_IN), &LoopFilter::open(), 0.0).unwrap();
    let d = discretize(&ss, 8000.0).unwrap();
    assert_eq!(d.qd.amax(), 0.0);
    assert_eq!(d.sigma_in, 0.0);
}

#[test]
fn stationary_covariance_is_equipartition() {
    for (f, q) in [(900.0, 1e4), (865.0, 1.2e6)] {
        let modes = single(f, q);
        let ss = build_state_space(&modes, &AmplifierModel::noiseless(L_IN), &LoopFilter::open(), 4.2).unwrap();
        let d = discretize(&ss, 8000.0).unwrap();
        let p = d.stationary_covariance().unwrap();
        let l = modes.modes()[0].l;
        assert_relative_eq!(p[(1, 1)], K_B * 4.2 / l, max_relative = 1e-3);
        // scaled charge carries the same energy
        assert_relative_eq!(p[(0, 0)], K_B * 4.2 / l, max_relative = 1e-3);
    }
}

#[test]
fn stationary_covariance_with_feedback_follows_one_plus_g() {
    let modes = single(900.0, 1e4);
    let filter = loop_for(&modes, 0, 99.0);
    let amp = AmplifierModel::noiseless(L_IN);
    let clm = close_loop(&modes.modes()[0], &amp, &filter).unwrap();
    let ss = build_state_space(&modes, &amp, &filter, 4.2).unwrap();
    let d = discretize(&ss, 7200.0).unwrap();
    let p = d.stationary_covariance().unwrap();
    let l = modes.modes()[0].l;
    assert_relative_eq!(l * p[(1, 1)] / K_B, 4.2 / (1.0 + clm.g), max_relative = 0.01);
}

#[test]
fn low_sample_rate_is_rejected() {
    let modes = single(900.0, 1e4);
    let ss = build_state_space(&modes, &AmplifierModel::noiseless(L_IN), &LoopFilter::open(), 4.2).unwrap();
    assert!(matches!(discretize(&ss, 7000.0), Err(Error::Validation { .. })));
}

#[test]
fn zero_state_without_noise_stays_zero() {
    let modes = ModeSet::default_modes();
    let ss = build_state_space(&modes, &AmplifierModel::noiseless(L_IN), &LoopFilter::new(0.05, 200.0).unwrap(), 0.0)
        .unwrap();
    let d = discretize(&ss, 8000.0).unwrap();
    let cfg = SimConfig::new(8000.0, 1.0, 3, Some(0.0)).unwrap();
    let ts = simulate(&d, &cfg, true).unwrap();
    assert!(ts.channels.iter().flatten().all(|&x| x == 0.0));
}

#[test]
fn same_seed_same_series() {
    let modes = ModeSet::default_modes();
    let amp = AmplifierModel::noiseless(L_IN).with_noise(6.6e-26, 1e-30);
    let ss = build_state_space(&modes, &amp, &LoopFilter::new(0.05, 200.0).unwrap(), 4.2).unwrap();
    let d = discretize(&ss, 8000.0).unwrap();
    let cfg = SimConfig::new(8000.0, 2.0, 11, Some(0.5)).unwrap();
    let a = simulate(&d, &cfg, true).unwrap();
    let b = simulate(&d, &cfg, true).unwrap();
    assert_eq!(a, b);
    let other = SimConfig::new(8000.0, 2.0, 12, Some(0.5)).unwrap();
    assert_ne!(a.channels[0], simulate(&d, &other, false).unwrap().channels[0]);
    // results do not depend on the rayon pool either
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let c = pool.install(|| simulate(&d, &cfg, true).unwrap());
    assert_eq!(a, c);
}

#[test]
fn measured_is_sum_plus_noise() {
    let modes = ModeSet::default_modes();
    let ss = build_state_space(&modes, &AmplifierModel::noiseless(L_IN), &LoopFilter::open(), 4.2).unwrap();
    let d = discretize(&ss, 8000.0).unwrap();
    let cfg = SimConfig::new(8000.0, 0.5, 1, Some(0.0)).unwrap();
    let ts = simulate(&d, &cfg, true).unwrap();
    for i in 0..ts.len() {
        let sum: f64 = ts.channels[1..].iter().map(|c| c[i]).sum();
        assert_eq!(ts.channels[0][i], sum);
    }
}

fn equipartition_run(g: f64, seed: u64, relaxation_times: f64) -> (f64, f64) {
    let modes = single(900.0, 1e4);
    let amp = AmplifierModel::noiseless(L_IN);
    let filter = if g == 0.0 { LoopFilter::open() } else { loop_for(&modes, 0, g) };
    let clm = close_loop(&modes.modes()[0], &amp, &filter).unwrap();
    let ss = build_state_space(&modes, &amp, &filter, 4.2).unwrap();
    let fs = 7200.0;
    let d = discretize(&ss, fs).unwrap();
    let tau = clm.relaxation_time();
    let burn = 10.0 * tau;
    let cfg = SimConfig::new(fs, burn + relaxation_times * tau, seed, Some(burn)).unwrap();
    let mut sum = 0.0;
    let (_, n) = simulate_stream(&d, &cfg, |y, _| sum += y * y).unwrap();
    let l = modes.modes()[0].l;
    (l * sum / n as f64 / K_B, 4.2 / (1.0 + clm.g))
}

#[test]
fn equipartition_without_feedback() {
    let (t, expect) = equipartition_run(0.0, 5, 600.0);
    assert!((t / expect - 1.0).abs() < 0.10, "{t} vs {expect}");
}

#[test]
fn equipartition_with_feedback() {
    let (t, expect) = equipartition_run(99.0, 6, 600.0);
    assert!((t / expect - 1.0).abs() < 0.10, "{t} vs {expect}");
    assert_relative_eq!(expect, 0.042, max_relative = 1e-3);
}

#[test]
fn three_mode_run_matches_single_mode_runs() {
    let modes = ModeSet::default_modes();
    let amp = AmplifierModel::noiseless(L_IN);
    // Q scaled down so a short run covers many relaxation times
    let scaled = ModeSet::new(
        modes
            .iter()
            .map(|m| NormalMode::from_measurement(m.index, m.l, m.f0(), 2e3).unwrap())
            .collect(),
    )
    .unwrap();
    let filter = LoopFilter::new(0.01, 200.0).unwrap();
    let ss = build_state_space(&scaled, &amp, &filter, 4.2).unwrap();
    let d = discretize(&ss, 8000.0).unwrap();
    let p = d.stationary_covariance().unwrap();
    for (k, m) in scaled.iter().enumerate() {
        let single_set = ModeSet::new(vec![*m]).unwrap();
        let s1 = build_state_space(&single_set, &amp, &filter, 4.2).unwrap();
        let p1 = discretize(&s1, 8000.0).unwrap().stationary_covariance().unwrap();
        let i = StateSpace::current_index(k);
        assert_relative_eq!(p[(i, i)], p1[(1, 1)], max_relative = 0.01);
    }
    let tau = ss.slowest_time_constant();
    let cfg = SimConfig::new(8000.0, 400.0 * tau, 21, Some(10.0 * tau)).unwrap();
    let mut sums = [0.0; 3];
    let (_, n) = simulate_stream(&d, &cfg, |_, st| {
        for (k, s) in sums.iter_mut().enumerate() {
            *s += st.mode_current(k).powi(2);
        }
    })
    .unwrap();
    for (k, m) in scaled.iter().enumerate() {
        let i = StateSpace::current_index(k);
        let tau_k = 2.0 * close_loop(m, &amp, &filter).unwrap().q_prime / m.omega0();
        let t_meas = n as f64 / 8000.0;
        let tol = 3.0 * (2.0 * tau_k / t_meas).sqrt();
        let got = sums[k] / n as f64;
        assert!((got / p[(i, i)] - 1.0).abs() < tol, "mode {}: {}", m.index, got / p[(i, i)]);
    }
}

#[test]
fn simulated_covariance_matches_lyapunov() {
    let modes = single(900.0, 2e3);
    let amp = AmplifierModel::noiseless(L_IN).with_noise(1e-22, 0.0);
    let filter = loop_for(&modes, 0, 4.0);
    let ss = build_state_space(&modes, &amp, &filter, 4.2).unwrap();
    let d = discretize(&ss, 7200.0).unwrap();
    let p = d.stationary_covariance().unwrap();
    let tau = ss.slowest_time_constant();
    let cfg = SimConfig::new(7200.0, 3000.0 * tau, 8, Some(10.0 * tau)).unwrap();
    let dim = d.dim();
    let mut acc = vec![0.0; dim * dim];
    let (_, n) = simulate_stream(&d, &cfg, |_, st| {
        let s = st.state();
        for r in 0..dim {
            for c in 0..dim {
                acc[r * dim + c] += s[r] * s[c];
            }
        }
    })
    .unwrap();
    for r in 0..dim {
        for c in 0..dim {
            let est = acc[r * dim + c] / n as f64;
            let exact = p[(r, c)];
            let scale = (p[(r, r)] * p[(c, c)]).sqrt();
            // off-diagonal entries near zero are compared on the diagonal scale
            assert!(
                (est - exact).abs() < 0.05 * exact.abs().max(0.2 * scale),
                "entry ({r},{c}): {est:e} vs {exact:e}"
            );
        }
    }
}

fn noiseless_loop(modes: &ModeSet, filter: LoopFilter, fs: f64) -> colddamp::simulator::DiscreteSystem {
    let ss = build_state_space(modes, &AmplifierModel::noiseless(L_IN), &filter, 0.0).unwrap();
    discretize(&ss, fs).unwrap()
}

#[test]
fn ringdown_starts_at_i0_and_decays_at_open_loop_rate() {
    let modes = single(900.0, 1e4);
    let d = noiseless_loop(&modes, LoopFilter::open(), 7200.0);
    let m = modes.modes()[0];
    let tau = 2.0 * m.q() / m.omega0();
    let cfg = SimConfig::new(7200.0, 3.0 * tau, 0, Some(0.0)).unwrap();
    let ts = ringdown(&d, &cfg, 1, 1e-9).unwrap();
    assert_eq!(ts.measured()[0], 1e-9);
    let fit = ringdown_decay(&ts).unwrap();
    assert!((fit.tau_s / tau - 1.0).abs() < 0.01, "{} vs {tau}", fit.tau_s);
}

#[test]
fn ringdown_under_feedback() {
    let modes = single(900.0, 1e4);
    let amp = AmplifierModel::noiseless(L_IN);
    let filter = loop_for(&modes, 0, 99.0);
    let clm = close_loop(&modes.modes()[0], &amp, &filter).unwrap();
    let d = noiseless_loop(&modes, filter, 7200.0);
    let m = modes.modes()[0];
    let tau0 = 2.0 * m.q() / m.omega0();
    let cfg = SimConfig::new(7200.0, 3.0 * tau0 / 100.0, 0, Some(0.0)).unwrap();
    let fit = ringdown_decay(&ringdown(&d, &cfg, 1, 1e-9).unwrap()).unwrap();
    assert!((fit.tau_s * 100.0 / tau0 - 1.0).abs() < 0.02, "{}", fit.tau_s * 100.0 / tau0);
    assert!((fit.q_prime / clm.q_prime - 1.0).abs() < 0.02);
    let shift = clm.f_shift * m.f0();
    let measured_shift = fit.f_hz - m.f0();
    assert!(
        (measured_shift - shift).abs() < 0.1 * shift.abs(),
        "shift {measured_shift} vs {shift}"
    );
}

#[test]
fn calibration_phasors_follow_impedance() {
    let modes = ModeSet::default_modes();
    let m = modes.modes()[1];
    let d = noiseless_loop(&modes, LoopFilter::open(), 8000.0);
    let v = 1e-12;
    let lw = m.linewidth_hz();
    for f in [m.f0(), m.f0() + 10.0 * lw] {
        let burn = 10.0 * d.ss.slowest_time_constant();
        let cfg = SimConfig::new(8000.0, burn + 30.0, 0, None).unwrap();
        let ts = inject_calibration(&d, &cfg, v, f).unwrap();
        let ph = lock_in(ts.channel("mode2_a").unwrap(), ts.fs, ts.t0, f).unwrap();
        let expect = v / m.impedance(f).unwrap();
        assert!(((ph - expect).norm() / expect.norm()) < 5e-3, "{ph} vs {expect}");
    }
    let cfg = SimConfig::new(8000.0, 1.0, 0, Some(0.0)).unwrap();
    let zero = inject_calibration(&d, &cfg, 0.0, m.f0()).unwrap();
    assert!(zero.channels.iter().flatten().all(|&x| x == 0.0));
}

#[test]
fn calibration_at_resonance_is_resistive() {
    let modes = ModeSet::default_modes();
    let m = modes.modes()[1];
    let d = noiseless_loop(&modes, LoopFilter::open(), 8000.0);
    let burn = 10.0 * d.ss.slowest_time_constant();
    let cfg = SimConfig::new(8000.0, burn + 20.0, 0, None).unwrap();
    let ts = inject_calibration(&d, &cfg, 1e-12, m.f0()).unwrap();
    let ph = lock_in(ts.channel("mode2_a").unwrap(), ts.fs, ts.t0, m.f0()).unwrap();
    assert_relative_eq!(ph.norm(), 1e-12 / m.r, max_relative = 5e-3);
    assert!(ph.arg().abs() < 5e-3);
}

#[test]
fn csv_and_binary_round_trip() {
    let modes = ModeSet::default_modes();
    let ss = build_state_space(&modes, &AmplifierModel::noiseless(L_IN), &LoopFilter::open(), 4.2).unwrap();
    let d = discretize(&ss, 8000.0).unwrap();
    let cfg = SimConfig::new(8000.0, 0.1, 2, Some(0.0)).unwrap();
    let ts = simulate(&d, &cfg, true).unwrap();
    let back = TimeSeries::from_csv(&ts.to_csv()).unwrap();
    assert_eq!(back.channels, ts.channels);
    assert_eq!(back.names, ts.names);
    assert_relative_eq!(back.fs, ts.fs, max_relative = 1e-12);
    let side = ts.sidecar(Some(2), Some("abc".into()));
    let bin = TimeSeries::from_binary(&ts.to_binary(), &side).unwrap();
    assert_eq!(bin, ts);
    assert!(TimeSeries::from_binary(&ts.to_binary()[8..], &side).is_err());
    let header = ts.to_csv().lines().next().unwrap().to_string();
    assert_eq!(header, "time_s,measured_current_a,mode1_a,mode2_a,mode3_a");
}

#[test]
fn config_invariants() {
    assert!(SimConfig::new(8000.0, 1.0, 0, Some(1.0)).is_err());
    assert!(SimConfig::new(8000.0, 1.0, 0, Some(-0.1)).is_err());
    assert!(SimConfig::new(0.0, 1.0, 0, None).is_err());
    // default burn-in longer than the run is rejected at simulation time
    let modes = single(900.0, 1e4);
    let ss = build_state_space(&modes, &AmplifierModel::noiseless(L_IN), &LoopFilter::open(), 4.2).unwrap();
    let d = discretize(&ss, 7200.0).unwrap();
    let cfg = SimConfig::new(7200.0, 1.0, 0, None).unwrap();
    assert!(matches!(simulate(&d, &cfg, false), Err(Error::Validation { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stationary_temperature_follows_gain(g in 0.0f64..200.0, t0 in 0.1f64..10.0) {
        let modes = single(900.0, 1e4);
        let amp = AmplifierModel::noiseless(L_IN);
        let filter = if g == 0.0 { LoopFilter::open() } else { loop_for(&modes, 0, g) };
        let clm = close_loop(&modes.modes()[0], &amp, &filter).unwrap();
        let ss = build_state_space(&modes, &amp, &filter, t0).unwrap();
        let p = discretize(&ss, 7200.0).unwrap().stationary_covariance().unwrap();
        let t = modes.modes()[0].l * p[(1, 1)] / K_B;
        prop_assert!((t / (t0 / (1.0 + clm.g)) - 1.0).abs() < 0.01);
    }

    #[test]
    fn covariance_is_symmetric_psd(dc in 0.0f64..0.2, t0 in 0.0f64..10.0) {
        let modes = ModeSet::default_modes();
        let amp = AmplifierModel::noiseless(L_IN).with_noise(6.6e-26, 1e-31);
        let ss = build_state_space(&modes, &amp, &LoopFilter::new(dc, 200.0).unwrap(), t0).unwrap();
        let d = discretize(&ss, 8000.0).unwrap();
        prop_assert_eq!(d.qd.clone(), d.qd.transpose());
        let eig = nalgebra::SymmetricEigen::new(d.qd.clone());
        let tr = d.qd.trace().max(1e-300);
        prop_assert!(eig.eigenvalues.iter().all(|&l| l > -1e-12 * tr));
    }
}
