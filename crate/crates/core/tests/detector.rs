use pnr_core::detector::{
    expected_area, simulate_features, PulseKey, Thresholds, WaveformParams, MAX_PHOTONS_PER_CHANNEL,
};
use pnr_core::stats::{mean_var, skewness};
use proptest::prelude::*;

fn features(n: u32, count: u64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let p = WaveformParams::default();
    let t = Thresholds::default();
    (0..count)
        .map(|id| {
            let f = simulate_features(n, &p, t, PulseKey::new(seed, id, 0)).unwrap();
            f.map_or((0.0, 0.0), |f| (f.area as f64, f.height as f64))
        })
        .unzip()
}

#[test]
fn monte_carlo_mean_matches_expected_area() {
    let p = WaveformParams::default();
    let t = Thresholds::default();
    for n in [1, 5, 15, 30] {
        let (areas, _) = features(n, 10_000, 17);
        let (m, v) = mean_var(&areas);
        let sem = (v / areas.len() as f64).sqrt();
        let e = expected_area(n, &p, t).unwrap();
        assert!((m - e).abs() < 3.0 * sem, "n={n}: mc {m} ± {sem}, expected {e}");
    }
}

#[test]
fn mean_area_strictly_increasing() {
    let mut prev = -1.0;
    for n in 0..=MAX_PHOTONS_PER_CHANNEL {
        let (areas, _) = features(n, 2_000, 23);
        let (m, _) = mean_var(&areas);
        assert!(m > prev, "n={n}");
        prev = m;
    }
}

#[test]
fn area_distributions_are_nearly_symmetric() {
    for n in [1, 2, 5, 10, 20, 30, 37] {
        let (areas, _) = features(n, 5_000, 29);
        let g = skewness(&areas);
        assert!(g.abs() < 0.2, "n={n}: skewness {g}");
    }
}

#[test]
fn heights_saturate_faster_than_areas() {
    let (a10, h10) = features(10, 2_000, 31);
    let (a20, h20) = features(20, 2_000, 31);
    let ratio = |x: &[f64], y: &[f64]| mean_var(y).0 / mean_var(x).0;
    assert!(ratio(&h10, &h20) < ratio(&a10, &a20));
}

#[test]
fn vacuum_never_triggers() {
    let (areas, _) = features(0, 2_000, 37);
    assert!(areas.iter().all(|&a| a == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn extraction_is_deterministic(n in 0u32..=37, id in any::<u64>(), seed in any::<u64>()) {
        let p = WaveformParams::default();
        let t = Thresholds::default();
        let k = PulseKey::new(seed, id, 2);
        prop_assert_eq!(simulate_features(n, &p, t, k).unwrap(), simulate_features(n, &p, t, k).unwrap());
    }

    #[test]
    fn feature_invariants_hold(n in 1u32..=37, id in any::<u64>()) {
        let p = WaveformParams::default();
        let f = simulate_features(n, &p, Thresholds::default(), PulseKey::new(5, id, 1)).unwrap().unwrap();
        prop_assert!(f.area >= f.height as u64);
        prop_assert!(f.t_start <= f.t_peak && f.t_peak <= f.t_start + f.duration);
    }
}
