use approx::assert_relative_eq;
use proptest::prelude::*;

use repread_core::alt::{diff_distribution, skellam_pmf, AltReadoutParams, NuclearState};
use repread_core::config::{parse_config, to_json};
use repread_core::dynamics::{
    endor_spectrum, find_peaks, match_peaks, rabi_signal, BathSpin, ContrastMap, EndorOptions, MatchOptions,
    RabiConfig,
};
use repread_core::io;
use repread_core::poisson;
use repread_core::readout::{
    count_distribution, fit_rates, log_likelihood, policy_grid, readout_fidelity, simulate_counts, FitMask,
    FitOptions, ReadoutParams, SpinState, ThresholdPolicy,
};
use repread_core::spin::{
    build_hamiltonian, eigen_levels, electron_transition_frequencies, nuclear_transition_frequency,
    ElectronProjection, HyperfineTensor, Manifold, NuclearProjection, Species, SpinSystem,
};

fn system(b_t: f64) -> SpinSystem {
    SpinSystem {
        d_ground_mhz: 35.0,
        d_excited_mhz: 490.0,
        gamma_e_mhz_per_t: 28025.0,
        gamma_n_mhz_per_t: 8.465,
        b_t,
    }
}

fn params() -> impl Strategy<Value = ReadoutParams> {
    (0.0..500.0f64, 0.0..100.0f64, 0.005..0.05f64, 0.0..0.005f64, 10usize..400).prop_map(|(gb, gd, lb, ld, n)| {
        ReadoutParams {
            gamma_bright_hz: gb,
            gamma_dark_hz: gd,
            lambda_bright: lb,
            lambda_dark: ld,
            t_rep_s: 17e-6,
            repetitions: n,
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hamiltonian_is_symmetric_and_diagonalized(
        b in 0.0..1.0f64,
        axx in 0.0..20.0f64,
        ayy in 0.0..20.0f64,
        azz in -20.0..20.0f64,
        excited in any::<bool>(),
    ) {
        let manifold = if excited { Manifold::Excited } else { Manifold::Ground };
        let h = build_hamiltonian(&system(b), &HyperfineTensor::new(axx, ayy, azz), manifold).unwrap();
        prop_assert_eq!(h, h.transpose());
        let levels = eigen_levels(&h);
        let sum: f64 = levels.levels.iter().map(|l| l.energy_mhz).sum();
        prop_assert!((sum - h.trace()).abs() <= 1e-9 * h.trace().abs().max(1.0));
        let v = &levels.eigenvectors;
        let gram = v.transpose() * v;
        let identity = repread_core::spin::HamiltonianMatrix::identity();
        prop_assert!((gram - identity).amax() < 1e-9);
    }

    #[test]
    fn diagonal_tensor_matches_secular_formula(b in 0.05..1.0f64, azz in -20.0..20.0f64) {
        let sys = system(b);
        let levels = eigen_levels(&build_hamiltonian(&sys, &HyperfineTensor::new(0.0, 0.0, azz), Manifold::Ground).unwrap());
        for ms in ElectronProjection::ALL {
            let f = nuclear_transition_frequency(&levels, ms).unwrap();
            let secular = (ms.value() * azz + sys.gamma_n_mhz_per_t * b).abs();
            prop_assert!((f - secular).abs() < 1e-9, "{:?}: {} vs {}", ms, f, secular);
        }
    }

    #[test]
    fn count_pmf_is_normalized(p in params(), bright in any::<bool>()) {
        let s0 = if bright { SpinState::Bright } else { SpinState::Dark };
        let pmf = count_distribution(&p, s0).unwrap();
        let total: f64 = pmf.marginal.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        for (n, m) in pmf.marginal.iter().enumerate() {
            prop_assert_eq!(*m, pmf.joint[0][n] + pmf.joint[1][n]);
        }
    }

    #[test]
    fn no_switching_is_poisson(mut p in params(), bright in any::<bool>()) {
        p.gamma_bright_hz = 0.0;
        p.gamma_dark_hz = 0.0;
        let s0 = if bright { SpinState::Bright } else { SpinState::Dark };
        let mu = p.repetitions as f64 * p.emission(s0);
        let pmf = count_distribution(&p, s0).unwrap();
        for (n, m) in pmf.marginal.iter().enumerate() {
            prop_assert!((m - poisson::pmf(mu, n as u64)).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_rates_make_states_indistinguishable(g in 0.0..300.0f64, lam in 0.001..0.05f64, n in 10usize..300) {
        let p = ReadoutParams {
            gamma_bright_hz: g,
            gamma_dark_hz: g,
            lambda_bright: lam,
            lambda_dark: lam,
            t_rep_s: 17e-6,
            repetitions: n,
        };
        let b = count_distribution(&p, SpinState::Bright).unwrap();
        let d = count_distribution(&p, SpinState::Dark).unwrap();
        prop_assert_eq!(b.marginal.len(), d.marginal.len());
        for (x, y) in b.marginal.iter().zip(&d.marginal) {
            prop_assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn fidelities_are_bounded(p in params(), a in 0u64..5, gap in 1u64..10) {
        let point = readout_fidelity(&p, ThresholdPolicy::new(a, a + gap).unwrap());
        if let Ok(pt) = point {
            for v in [pt.f_dark, pt.f_bright, pt.f_avg, pt.eta] {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            }
        }
        let single = readout_fidelity(&p, ThresholdPolicy::single(a + 1).unwrap()).unwrap();
        prop_assert_eq!(single.eta, 1.0);
    }

    #[test]
    fn bright_tail_is_monotone_in_threshold(p in params()) {
        let pmf = count_distribution(&p, SpinState::Bright).unwrap();
        let mut prev = f64::INFINITY;
        for b in 0..pmf.marginal.len() as u64 {
            let tail = pmf.upper_tail(b);
            prop_assert!(tail <= prev + 1e-15);
            prev = tail;
        }
    }

    #[test]
    fn alt_pmf_is_normalized(g in 0.0..200.0f64, pairs in 1usize..120, up in any::<bool>()) {
        let base = ReadoutParams { gamma_bright_hz: g, ..ReadoutParams::calibrated(1) };
        let s0 = if up { NuclearState::Up } else { NuclearState::Down };
        let pmf = diff_distribution(&AltReadoutParams { base, n_pairs: pairs }, s0).unwrap();
        prop_assert!((pmf.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn alt_states_mirror_without_switching(pairs in 1usize..150, lb in 0.005..0.05f64, ld in 0.0..0.005f64) {
        let base = ReadoutParams {
            gamma_bright_hz: 0.0,
            gamma_dark_hz: 0.0,
            lambda_bright: lb,
            lambda_dark: ld,
            ..ReadoutParams::calibrated(1)
        };
        let params = AltReadoutParams { base, n_pairs: pairs };
        let up = diff_distribution(&params, NuclearState::Up).unwrap();
        let down = diff_distribution(&params, NuclearState::Down).unwrap();
        for k in up.support() {
            prop_assert!((up.prob(k) - down.prob(-k)).abs() < 1e-14);
        }
    }

    #[test]
    fn alt_without_switching_is_skellam(pairs in 1usize..150, lb in 0.005..0.05f64, ld in 0.0..0.005f64) {
        let base = ReadoutParams {
            gamma_bright_hz: 0.0,
            gamma_dark_hz: 0.0,
            lambda_bright: lb,
            lambda_dark: ld,
            ..ReadoutParams::calibrated(1)
        };
        let pmf = diff_distribution(&AltReadoutParams { base, n_pairs: pairs }, NuclearState::Up).unwrap();
        let n = pairs as f64;
        for k in pmf.support() {
            prop_assert!((pmf.prob(k) - skellam_pmf(n * lb, n * ld, k)).abs() < 1e-10);
        }
    }

    #[test]
    fn rabi_endpoints_are_contrast_levels(f_dark in 0.5..1.0f64, f_bright in 0.5..1.0f64, omega in 0.1..10.0f64) {
        let contrast = ContrastMap::from_fidelities(f_dark, f_bright).unwrap();
        prop_assert_eq!(contrast.apply(0.0), contrast.dark_level);
        prop_assert_eq!(contrast.apply(1.0), contrast.bright_level);
        let s = rabi_signal(&RabiConfig { rabi_frequency_khz: omega, durations_s: vec![0.0], contrast }).unwrap();
        prop_assert_eq!(s[0], contrast.dark_level);
    }

    #[test]
    fn endor_is_permutation_invariant_and_clamped(
        couplings in proptest::collection::vec((-120.0..120.0f64, 0.0..1.5f64, any::<bool>()), 1..8),
        rotate in 0usize..8,
    ) {
        let bath: Vec<BathSpin> = couplings
            .iter()
            .map(|&(a, amp, si)| BathSpin {
                species: if si { Species::Si29 } else { Species::C13 },
                azz_khz: a,
                amplitude: amp,
                t_rf_s: 1e-4,
            })
            .collect();
        let mut shuffled = bath.clone();
        shuffled.rotate_left(rotate % bath.len());
        shuffled.reverse();
        let grid: Vec<f64> = (0..2000).map(|i| 1000.0 + 0.4 * i as f64).collect();
        let opts = EndorOptions::default();
        let a = endor_spectrum(&bath, 0.14, &grid, &opts).unwrap();
        let b = endor_spectrum(&shuffled, 0.14, &grid, &opts).unwrap();
        prop_assert_eq!(&a.contrast, &b.contrast);
        prop_assert!(a.contrast.iter().all(|c| (0.0..=1.0).contains(c)));
    }

    #[test]
    fn histogram_file_round_trip(counts in proptest::collection::vec(0u64..1_000_000, 1..100)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        let h = repread_core::readout::Histogram::from_counts(counts);
        io::save_histogram(&path, &h).unwrap();
        let back = io::ingest_histogram(&path).unwrap();
        let trim = |v: &[u64]| v.iter().rposition(|c| *c > 0).map_or(Vec::new(), |i| v[..=i].to_vec());
        prop_assert_eq!(trim(&back.counts), trim(&h.counts));
    }
}

#[test]
fn electron_transitions_are_monotone_in_field() {
    let tensor = HyperfineTensor::si_ii();
    let mut prev: Option<[f64; 2]> = None;
    for i in 0..=95 {
        let b = 0.05 + 0.01 * i as f64;
        let levels = eigen_levels(&build_hamiltonian(&system(b), &tensor, Manifold::Ground).unwrap());
        assert!(levels.high_field_labels());
        let f = electron_transition_frequencies(&levels, NuclearProjection::Up).unwrap();
        if let Some(p) = prev {
            assert!(f[0] > p[0] && f[1] > p[1], "B = {b}");
        }
        prev = Some(f);
    }
}

#[test]
fn fitted_rates_do_not_lose_likelihood_to_truth() {
    let truth = ReadoutParams::calibrated(250);
    let data = vec![
        (simulate_counts(&truth, SpinState::Bright, 30_000, 11).unwrap(), SpinState::Bright),
        (simulate_counts(&truth, SpinState::Dark, 30_000, 12).unwrap(), SpinState::Dark),
    ];
    let fit = fit_rates(&data, &truth, FitMask::all(), &FitOptions::default()).unwrap();
    let at_truth = log_likelihood(&data, &truth).unwrap();
    assert!(fit.log_likelihood >= at_truth - 1e-3, "{} < {}", fit.log_likelihood, at_truth);
}

#[test]
fn simulated_spectrum_round_trips_through_matching() {
    let bath: Vec<BathSpin> = [(Species::Si29, 25.0), (Species::Si29, 60.0), (Species::C13, 40.0)]
        .into_iter()
        .map(|(species, azz_khz)| BathSpin {
            species,
            azz_khz,
            amplitude: 0.3,
            t_rf_s: 1e-4,
        })
        .collect();
    let grid: Vec<f64> = (0..4000).map(|i| 1000.0 + 0.2 * i as f64).collect();
    let opts = EndorOptions::default();
    let s = endor_spectrum(&bath, 0.14, &grid, &opts).unwrap();
    let peaks = find_peaks(&s.f_khz, &s.contrast, opts.baseline, 0.05);
    assert_eq!(peaks.len(), 6);
    let matched = match_peaks(&peaks, 0.14, &MatchOptions::new(2.0)).unwrap();
    for spin in &bath {
        assert!(
            matched.iter().any(|m| m.species == Some(spin.species)
                && m.azz_khz.is_some_and(|a| (a - spin.azz_khz).abs() < 0.5 * spin.linewidth_khz())),
            "{spin:?}"
        );
    }
}

#[test]
fn policy_grid_has_no_empty_regions_for_calibrated_params() {
    let p = ReadoutParams::calibrated(250);
    for policy in policy_grid(3, 10) {
        let pt = readout_fidelity(&p, policy).unwrap();
        assert!(pt.eta > 0.0 && pt.eta <= 1.0);
    }
}

#[test]
fn config_round_trip_is_fixed_point() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../cli/examples/calibration.json")).unwrap();
    let first = parse_config(&text).unwrap().config;
    let second = parse_config(&to_json(&first).unwrap()).unwrap();
    assert_eq!(first, second.config);
    assert!(second.applied_defaults.is_empty());
    assert_relative_eq!(first.readout.t_rep().unwrap(), 17e-6, max_relative = 1e-12);
}
