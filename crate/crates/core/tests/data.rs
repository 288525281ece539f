//! Sequence files on disk, generator and normalization properties.

use dtca::data::{gen_synthetic, BlobParams, Normalizer, RadarSequence};
use dtca::Error;
use proptest::prelude::*;

#[test]
fn save_load_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let seq = gen_synthetic(&BlobParams { noise: 0.3, ..Default::default() }, 5, 12, 8, 3).unwrap();
    let path = dir.path().join("a.rseq");
    seq.save(&path).unwrap();
    let back = RadarSequence::load(&path).unwrap();
    assert_eq!(back, seq);
    assert_eq!(std::fs::read(&path).unwrap(), seq.to_bytes());
    assert_eq!(std::fs::read(&path).unwrap().len(), 36 + 4 * 5 * 12 * 8);
}

#[test]
fn damaged_files_report_named_errors() {
    let dir = tempfile::tempdir().unwrap();
    let seq = gen_synthetic(&BlobParams::default(), 2, 4, 4, 1).unwrap();
    let bytes = seq.to_bytes();

    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"JUNK");
    let p = dir.path().join("magic.rseq");
    std::fs::write(&p, &bad).unwrap();
    let e = RadarSequence::load(&p).unwrap_err();
    assert!(matches!(e, Error::Format(_)), "{e}");
    assert!(e.to_string().contains("magic"), "{e}");

    let p = dir.path().join("short.rseq");
    std::fs::write(&p, &bytes[..bytes.len() - 6]).unwrap();
    let e = RadarSequence::load(&p).unwrap_err().to_string();
    assert!(e.contains(&bytes.len().to_string()) && e.contains(&(bytes.len() - 6).to_string()), "{e}");

    let mut bad = bytes.clone();
    bad[4] = 7;
    let e = RadarSequence::from_bytes(&bad).unwrap_err().to_string();
    assert!(e.contains("version"), "{e}");

    assert!(RadarSequence::load(dir.path().join("missing.rseq")).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generation_is_deterministic_and_non_negative(seed: u64, count in 0usize..5, noise in 0.0..2.0f64) {
        let p = BlobParams { count, noise, ..Default::default() };
        let a = gen_synthetic(&p, 3, 8, 8, seed).unwrap();
        let b = gen_synthetic(&p, 3, 8, 8, seed).unwrap();
        prop_assert_eq!(a.to_bytes(), b.to_bytes());
        prop_assert!(a.values().iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn normalization_round_trips_below_cap(v in 0.0..32.0f64, y in -3.0..3.0f64) {
        let n = Normalizer::new(32.0).unwrap();
        let f = n.forward(v);
        prop_assert!((-1.0..=1.0).contains(&f));
        prop_assert!((n.inverse(f) - v).abs() < 1e-5 * v.max(1.0));
        prop_assert!(n.inverse(y) >= 0.0);
    }
}
