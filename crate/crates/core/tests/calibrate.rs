use pnr_core::calibrate::{
    calibrate_areas, fit_mixture, place_edges, AreaHistogram, Assignment, Calibration, CalibrationOptions,
    GaussComponent,
};
use pnr_core::detector::{render_features, PulseKey, Thresholds, WaveformParams};
use pnr_core::rng::{self, Domain};
use pnr_core::stats::chi_square_two_sample;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

fn normal_draws(mu: f64, sigma: f64, count: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, Domain::Synthetic, 0, 0);
    (0..count)
        .map(|_| mu + sigma * r.sample::<f64, _>(StandardNormal))
        .collect()
}

#[test]
fn recovers_two_well_separated_gaussians() {
    let mut v = normal_draws(100.0, 5.0, 50_000, 1);
    v.extend(normal_draws(200.0, 6.0, 50_000, 2));
    let hist = AreaHistogram::geometric(&v, 1.001).unwrap();
    let (c, report) = fit_mixture(&hist, &CalibrationOptions::default()).unwrap();
    assert_eq!(c.len(), 2, "{c:?}");
    assert!((c[0].mu - 100.0).abs() < 0.5 && (c[1].mu - 200.0).abs() < 0.5, "{c:?}");
    assert!((c[0].sigma / 5.0 - 1.0).abs() < 0.1 && (c[1].sigma / 6.0 - 1.0).abs() < 0.1);
    assert!(report.r_squared >= 0.99, "R² {}", report.r_squared);
}

#[test]
fn single_component_gives_single_fit() {
    let v = normal_draws(1000.0, 20.0, 100_000, 3);
    let hist = AreaHistogram::geometric(&v, 1.001).unwrap();
    let (c, _) = fit_mixture(&hist, &CalibrationOptions::default()).unwrap();
    assert_eq!(c.len(), 1);
    assert!((c[0].mu - 1000.0).abs() < 0.5);
}

/// Pulse areas of one channel with Poisson(mean) photons per event, plus the
/// true photon numbers.
fn channel_areas(mean: f64, events: u64, seed: u64) -> (Vec<u32>, Vec<f64>) {
    let p = WaveformParams::default();
    let t = Thresholds::default();
    (0..events)
        .into_par_iter()
        .map(|id| {
            let mut r = rng::stream(seed, Domain::PhotonCounts, id, 0);
            let n = rng::poisson(&mut r, mean);
            let a = render_features(n, &p, t, PulseKey::new(seed, id, 0)).map_or(0.0, |f| f.area as f64);
            (n, a)
        })
        .unzip()
}

#[test]
fn full_chain_at_mean_19() {
    let (truth, areas) = channel_areas(19.0, 1_000_000, 77);
    let hist = AreaHistogram::geometric(&areas, 1.001).unwrap();
    let (c, report) = fit_mixture(&hist, &CalibrationOptions::default()).unwrap();
    assert!(c.len() >= 35, "only {} components", c.len());
    assert!(c.windows(2).all(|w| w[1].mu > w[0].mu));
    assert!(report.r_squared >= 0.99, "R² {}", report.r_squared);

    let cal = Calibration::build(&c, &CalibrationOptions::default()).unwrap();
    assert_eq!(cal.max_n(), 37);
    // empirical per-n confidence against the Gaussian-overlap prediction
    for n in cal.first_n()..=30 {
        let (hits, total) = truth.iter().zip(&areas).filter(|(&m, _)| m == n).fold((0, 0), |(h, t), (_, &a)| {
            (h + (cal.assign(a) == Assignment::Photons(n)) as u64, t + 1)
        });
        if total < 100 {
            continue;
        }
        let empirical = hits as f64 / total as f64;
        let predicted = 1.0 - cal.error_rate_with(n, None).unwrap();
        assert!((empirical - predicted).abs() < 0.02, "n={n}: {empirical} vs {predicted}");
    }

    // confidence does not improve with photon number; sparse tail components
    // carry too much width uncertainty for a pairwise comparison
    let table: Vec<_> = cal
        .confidence_table()
        .into_iter()
        .filter(|r| cal.component(r.n).unwrap().weight * 1e6 >= 1000.0)
        .collect();
    assert!(table.len() >= 20);
    for w in table.windows(2) {
        assert!(w[1].error_all >= w[0].error_all - 1e-9, "{w:?}");
    }
}

#[test]
fn windowed_post_selection_is_unbiased() {
    let comps: Vec<GaussComponent> = (1..=30)
        .map(|n| GaussComponent {
            n,
            mu: 100.0 * n as f64,
            sigma: 8.0 + 0.3 * n as f64,
            weight: 1.0 / 30.0,
        })
        .collect();
    let opts = CalibrationOptions {
        window_frac: Some(1.0),
        ..Default::default()
    };
    let cal = Calibration::build(&comps, &opts).unwrap();
    let mut r = rng::stream(5, Domain::Synthetic, 0, 0);
    let mut all = vec![0u64; 40];
    let mut kept = vec![0u64; 40];
    for _ in 0..1_000_000 {
        let n = rng::poisson(&mut r, 15.0).clamp(1, 30);
        all[n as usize] += 1;
        let c = &comps[n as usize - 1];
        let a = c.mu + c.sigma * r.sample::<f64, _>(StandardNormal);
        if let Assignment::Photons(m) = cal.assign(a) {
            kept[m as usize] += 1;
        }
    }
    let res = chi_square_two_sample(&all, &kept, 10).unwrap();
    assert!(res.p_value > 0.001, "{res:?}");
    let frac = kept.iter().sum::<u64>() as f64 / 1e6;
    assert!((frac - 0.6827).abs() < 0.003, "{frac}");
}

#[test]
fn refit_recovers_means() {
    let truth: Vec<GaussComponent> = (1..=6)
        .map(|n| GaussComponent {
            n,
            mu: 1000.0 * n as f64,
            sigma: 40.0 + 5.0 * n as f64,
            weight: 1.0 / 6.0,
        })
        .collect();
    let per_peak = 20_000;
    let mut v = Vec::new();
    for (i, c) in truth.iter().enumerate() {
        v.extend(normal_draws(c.mu, c.sigma, per_peak, 100 + i as u64));
    }
    let (cal, _) = calibrate_areas(&v, &CalibrationOptions::default()).unwrap();
    assert_eq!(cal.components.len(), 6);
    assert_eq!(cal.first_n(), 1);
    for (f, t) in cal.components.iter().zip(&truth) {
        let tol = 0.5 * t.sigma / (per_peak as f64).sqrt() * 4.0;
        assert!((f.mu - t.mu).abs() < tol, "{f:?} vs {t:?}");
    }
}

proptest! {
    #[test]
    fn edges_ascend_strictly_inside(
        start in -1e3f64..1e3,
        gaps in prop::collection::vec(10.0f64..100.0, 1..20),
        sigmas in prop::collection::vec(0.5f64..3.0, 21),
    ) {
        let mut mu = start;
        let mut comps = vec![GaussComponent { n: 1, mu, sigma: sigmas[0], weight: 0.0 }];
        for (i, g) in gaps.iter().enumerate() {
            mu += g;
            comps.push(GaussComponent { n: i as u32 + 2, mu, sigma: sigmas[i + 1], weight: 0.0 });
        }
        let e = place_edges(&comps).unwrap();
        prop_assert_eq!(e.len(), comps.len() - 1);
        for (i, x) in e.iter().enumerate() {
            prop_assert!(*x > comps[i].mu && *x < comps[i + 1].mu);
        }
        prop_assert!(e.windows(2).all(|w| w[1] > w[0]));
    }
}
