//! Verification scores against naive reference loops and closed forms.

use dtca::data::RadarSequence;
use dtca::metrics::{
    crps_ensemble, csi, fss, power_spectrum_2d, radial_bin, radial_psd, taylor_stats, token_rows, token_similarity,
    ContingencyTable, EvalConfig, ForecastCase, MetricsReport, SimilarityMode,
};
use proptest::prelude::*;

mod common;

use common::oracles::*;

// ---- strategies

/// Rain-like fields: mostly dry with a heavy tail, on grids up to 16×16.
fn field(h: usize, w: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![3 => Just(0.0), 2 => 0.0..2.0f64, 1 => 0.0..30.0f64], h * w)
}

fn grid() -> impl Strategy<Value = (usize, usize)> {
    (1usize..=16, 1usize..=16)
}

fn pair() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>)> {
    grid().prop_flat_map(|(h, w)| (Just(h), Just(w), field(h, w), field(h, w)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn csi_matches_reference((_h, _w, p, o) in pair(), tau in 0.01..10.0f64) {
        let got = csi(&p, &o, tau).unwrap();
        prop_assert_eq!(got.to_bits(), naive_csi(&p, &o, tau).to_bits());
        prop_assert!((0.0..=1.0).contains(&got));
        let t = ContingencyTable::new(&p, &o, tau).unwrap();
        prop_assert_eq!(t.total() as usize, p.len());
    }

    #[test]
    fn fss_matches_reference((h, w, p, o) in pair(), tau in 0.01..10.0f64, half in 0usize..4) {
        let win = 2 * half + 1;
        let got = fss(&p, &o, h, w, tau, win).unwrap();
        prop_assert_eq!(got.to_bits(), naive_fss(&p, &o, h, w, tau, win).to_bits());
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn crps_matches_reference(
        (h, w) in grid(),
        m in 1usize..6,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || (0..h * w).map(|_| if r.random_bool(0.5) { 0.0 } else { r.random_range(0.0..20.0) }).collect::<Vec<f64>>();
        let members: Vec<Vec<f64>> = (0..m).map(|_| draw()).collect();
        let obs = draw();
        let refs: Vec<&[f64]> = members.iter().map(|v| v.as_slice()).collect();
        let got = crps_ensemble(&refs, &obs).unwrap();
        prop_assert_eq!(got.to_bits(), naive_crps(&members, &obs).to_bits());
        prop_assert!(got >= 0.0);
        let mut rev = refs.clone();
        rev.reverse();
        prop_assert!((crps_ensemble(&rev, &obs).unwrap() - got).abs() <= 1e-12 * got.max(1.0));
    }

    #[test]
    fn radial_spectrum_matches_reference(n in 1usize..=16, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let f: Vec<f64> = (0..n * n).map(|_| r.random_range(-5.0..5.0)).collect();
        let power = power_spectrum_2d(&f, n).unwrap();
        let reference = naive_power(&f, n);
        let scale = reference.iter().cloned().fold(0.0f64, f64::max).max(1e-300);
        for (a, b) in power.iter().zip(&reference) {
            prop_assert!((a - b).abs() <= 1e-9 * scale, "{a} vs {b}");
        }
        // ring assignment and averaging, bit-exact on the same 2-D power
        let spec = radial_bin(&power, n);
        let (total, count) = naive_rings(&power, n);
        for k in 0..spec.total.len() {
            let (t, c) = (total.get(k).copied().unwrap_or(0.0), count.get(k).copied().unwrap_or(0));
            prop_assert_eq!(spec.total[k].to_bits(), t.to_bits());
            prop_assert_eq!(spec.count[k], c);
            let mean = if c == 0 { 0.0 } else { t / c as f64 };
            prop_assert_eq!(spec.power[k].to_bits(), mean.to_bits());
        }
        prop_assert!(total.len() <= spec.total.len());
        // Parseval
        let energy: f64 = f.iter().map(|v| v * v).sum();
        let summed: f64 = spec.total.iter().sum();
        prop_assert!((summed - energy).abs() <= 1e-6 * energy.max(1e-300));
    }

    #[test]
    fn taylor_matches_reference(len in 2usize..=16, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<f64> = (0..len).map(|_| r.random_range(0.0..10.0)).collect();
        let o: Vec<f64> = (0..len).map(|_| r.random_range(0.0..10.0)).collect();
        let s = taylor_stats(&p, &o).unwrap();
        let (c, ratio, crms) = naive_taylor(&p, &o);
        prop_assert_eq!(s.corr.to_bits(), c.to_bits());
        prop_assert_eq!(s.std_ratio.to_bits(), ratio.to_bits());
        prop_assert_eq!(s.centered_rms.to_bits(), crms.to_bits());
        let identity = s.std_pred.powi(2) + s.std_obs.powi(2) - 2.0 * s.std_pred * s.std_obs * s.corr;
        prop_assert!((s.centered_rms.powi(2) - identity).abs() <= 1e-10 * s.centered_rms.powi(2).max(1e-12));
    }

    #[test]
    fn similarity_matches_reference(ra in 1usize..=16, rb in 1usize..=16, dim in 1usize..=16, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |rows: usize| -> Vec<f64> {
            let mut v: Vec<f64> = (0..rows * dim).map(|_| r.random_range(-3.0..3.0)).collect();
            if r.random_bool(0.1) {
                let z = r.random_range(0..rows);
                v[z * dim..(z + 1) * dim].fill(0.0);
            }
            v
        };
        let (a, b) = (draw(ra), draw(rb));
        let s = token_similarity(&a, &b, dim).unwrap();
        let reference = naive_cosine(&a, &b, dim);
        prop_assert_eq!(s.values.len(), reference.len());
        for (x, y) in s.values.iter().zip(&reference) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
            prop_assert!((-1.0..=1.0).contains(x));
        }
    }
}

// ---- closed-form examples

#[test]
fn contingency_toy_grid_gives_one_half() {
    let pred = [5.0, 5.0, 5.0, 0.0];
    let obs = [5.0, 5.0, 0.0, 5.0];
    let t = ContingencyTable::new(&pred, &obs, 1.0).unwrap();
    assert_eq!((t.hits, t.misses, t.false_alarms, t.correct_negatives), (2, 1, 1, 0));
    assert_eq!(csi(&pred, &obs, 1.0).unwrap(), 0.5);
    assert_eq!(csi(&pred, &pred, 1.0).unwrap(), 1.0);
    assert_eq!(csi(&pred, &obs, 100.0).unwrap(), 0.0);
    assert!(csi(&pred, &obs[..3], 1.0).is_err());
    assert!(csi(&pred, &obs, 0.0).is_err());
}

#[test]
fn csi_is_non_increasing_in_threshold_for_a_perfect_forecast() {
    let f: Vec<f64> = (0..64).map(|i| (i % 13) as f64 * 0.7).collect();
    let mut prev = 1.0;
    for tau in [0.06, 0.5, 1.0, 3.0, 6.3, 100.0] {
        let c = csi(&f, &f, tau).unwrap();
        assert!(c <= prev);
        prev = c;
    }
}

#[test]
fn fss_closed_forms() {
    let mut a = vec![0.0; 64];
    let mut b = vec![0.0; 64];
    a[3 * 8 + 3] = 5.0;
    b[3 * 8 + 4] = 5.0;
    assert_eq!(fss(&a, &a, 8, 8, 1.0, 3).unwrap(), 1.0);
    assert_eq!(fss(&a, &b, 8, 8, 1.0, 1).unwrap(), 0.0);
    let got = fss(&a, &b, 8, 8, 1.0, 3).unwrap();
    assert_eq!(got.to_bits(), naive_fss(&a, &b, 8, 8, 1.0, 3).to_bits());
    // 9 cells each, 6 shared: 1 - 6/18
    assert!((got - 2.0 / 3.0).abs() < 1e-15, "{got}");
    assert!(fss(&a, &b, 8, 8, 1.0, 2).is_err());
    assert_eq!(fss(&vec![0.0; 64], &vec![0.0; 64], 8, 8, 1.0, 3).unwrap(), 1.0);
}

#[test]
fn crps_closed_forms() {
    let obs = [1.0];
    assert_eq!(crps_ensemble(&[&[0.0], &[2.0]], &obs).unwrap(), 0.5);
    assert_eq!(crps_ensemble(&[&obs], &obs).unwrap(), 0.0);
    assert!(crps_ensemble(&[], &obs).is_err());
}

#[test]
fn spectrum_of_constant_and_pure_wave() {
    let n = 16;
    let spec = radial_psd(&vec![2.5; n * n], n).unwrap();
    assert!(spec.total[0] > 0.0);
    assert!(spec.total[1..].iter().all(|&p| p.abs() < 1e-20));
    for k in 1..=7 {
        let f: Vec<f64> = (0..n * n)
            .map(|i| (2.0 * std::f64::consts::PI * k as f64 * (i % n) as f64 / n as f64).cos())
            .collect();
        let spec = radial_psd(&f, n).unwrap();
        let non_dc: f64 = spec.total[1..].iter().sum();
        assert!(spec.total[k] > 0.99 * non_dc, "k={k}");
        assert_eq!(spec.wavelength(k), n as f64 / k as f64);
    }
    assert!(spec.pairs().iter().all(|(w, p)| *w > 0.0 && *p >= 0.0));
}

#[test]
fn taylor_closed_forms() {
    let o = [1.0, 3.0, 2.0, 5.0];
    let s = taylor_stats(&o, &o).unwrap();
    assert_eq!((s.corr, s.std_ratio, s.centered_rms), (1.0, 1.0, 0.0));
    let neg: Vec<f64> = o.iter().map(|v| -v).collect();
    assert!((taylor_stats(&neg, &o).unwrap().corr + 1.0).abs() < 1e-15);
    assert!(taylor_stats(&[2.0; 4], &o).is_err());
}

#[test]
fn similarity_closed_forms() {
    let a = [1.0, 0.0, 0.0, 0.0, 2.0, 0.0];
    let s = token_similarity(&a, &a, 3).unwrap();
    assert_eq!(s.diagonal(), vec![1.0, 1.0]);
    assert_eq!(s.get(0, 1), 0.0);
    assert_eq!(s.global_mean(), 1.0);
    assert_eq!(s.matrix_mean(), 0.5);
    assert!(!s.zero_norm);

    let scaled = [7.0, 0.0, 0.0, 0.0, 0.1, 0.0];
    assert_eq!(token_similarity(&scaled, &a, 3).unwrap().values, s.values);

    let z = token_similarity(&[0.0, 0.0, 0.0], &a, 3).unwrap();
    assert!(z.zero_norm);
    assert_eq!(z.values, vec![0.0, 0.0]);
    assert!(token_similarity(&a, &a, 4).is_err());
}

#[test]
fn token_rows_group_by_patch_or_frame() {
    // C = 2, F = 3, N = 1: token (c, f) holds 10c + f
    let t = [0.0, 1.0, 2.0, 10.0, 11.0, 12.0];
    let (rows, width) = token_rows(&t, 2, 3, 1, SimilarityMode::Spatial).unwrap();
    assert_eq!((rows.as_slice(), width), (&t[..], 3));
    let (rows, width) = token_rows(&t, 2, 3, 1, SimilarityMode::Temporal).unwrap();
    assert_eq!(rows, vec![0.0, 10.0, 1.0, 11.0, 2.0, 12.0]);
    assert_eq!(width, 2);
}

#[test]
fn report_on_perfect_forecast() {
    let truth = dtca::data::gen_synthetic(&Default::default(), 4, 16, 16, 5).unwrap();
    let case = ForecastCase { members: vec![truth.clone(), truth.clone()], truth: truth.clone() };
    let cfg = EvalConfig::default();
    let r = MetricsReport::evaluate(&[case.clone(), case], &cfg).unwrap();
    assert_eq!(r.leads(), 4);
    for k in 0..cfg.thresholds.len() {
        for lead in 0..4 {
            let has_events = truth.frame(lead).iter().any(|&v| v as f64 >= cfg.thresholds[k]);
            assert_eq!(r.csi[k][lead], if has_events { 1.0 } else { 0.0 });
            assert_eq!(r.fss[k][lead], 1.0);
        }
    }
    assert!(r.crps.iter().all(|&c| c == 0.0));
    let t = r.taylor.unwrap();
    assert!((t.corr - 1.0).abs() < 1e-12);

    let dir = tempfile::tempdir().unwrap();
    r.write_dir(dir.path()).unwrap();
    for f in ["csi.csv", "fss.csv", "crps.csv", "spectrum.csv", "summary.txt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let summary = std::fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    assert!(summary.contains("fss_window=3"));
}

#[test]
fn report_rejects_misaligned_cases() {
    let truth = RadarSequence::zeros(4, 8, 8);
    let short = RadarSequence::zeros(3, 8, 8);
    let case = ForecastCase { members: vec![short], truth };
    assert!(MetricsReport::evaluate(&[case], &EvalConfig::default()).is_err());
}
