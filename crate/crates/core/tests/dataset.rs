mod common;

use common::brute_force_violations;
use proptest::prelude::*;
use seismoforge::dataset::*;
use seismoforge::trace_store::*;
use seismoforge::Error;
use std::collections::HashSet;

fn toy(n_events: usize, n_noise: usize, seed: u64) -> (RawTrace, EventCatalog) {
    make_toy_corpus(&ToyCorpusConfig { n_events, n_noise_windows: n_noise, seed, ..Default::default() }).unwrap()
}

/// A catalog of `n` events spaced `gap` apart after a lead-in, and the trace
/// length leaving `tail` samples of quiet time at the end.
fn spaced_catalog(n: usize, gap: u64, tail: u64) -> (usize, EventCatalog) {
    let events: Vec<u64> = (0..n as u64).map(|i| 2000 + i * gap).collect();
    let len = (events.last().unwrap() + 2000 + tail) as usize;
    (len, EventCatalog::new(events).unwrap())
}

#[test]
fn already_standardized_window_is_unchanged() {
    let (trace, catalog) = toy(5, 20, 1);
    let set = build_sample_set(&trace, &catalog, &BuildConfig::default()).unwrap();
    let s = &set.samples()[0];
    let again = normalize(s.data()).unwrap();
    for (a, b) in again.iter().zip(s.data()) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
    assert!(normalize(&[5.0; 4800]).is_err());
}

#[test]
fn count_arithmetic_for_a_1025_event_station() {
    let (n, catalog) = spaced_catalog(1025, 3200, 3075 * 1600 + 1600);
    let pos = build_positive_windows(n, &catalog, 3, 600, 1).unwrap();
    assert_eq!(pos.len(), 3075);
    let starts: Vec<u64> = pos.iter().map(|w| w.start).collect();
    let neg = build_negative_windows(n, &catalog, pos.len(), &starts, 2).unwrap();
    assert_eq!(neg.len(), 3075);
    assert_eq!(pos.len() + neg.len(), 6150);
}

#[test]
fn count_arithmetic_for_a_1072_event_station() {
    let (n, catalog) = spaced_catalog(1072, 3300, 3216 * 1700);
    let pos = build_positive_windows(n, &catalog, 3, 600, 3).unwrap();
    assert_eq!(pos.len(), 3216);
    let starts: Vec<u64> = pos.iter().map(|w| w.start).collect();
    assert_eq!(build_negative_windows(n, &catalog, 3216, &starts, 4).unwrap().len(), 3216);
}

#[test]
fn zero_offset_centres_windows_on_events() {
    let (n, catalog) = spaced_catalog(10, 4000, 0);
    let pos = build_positive_windows(n, &catalog, 3, 0, 5).unwrap();
    assert_eq!(pos.len(), 30);
    for w in &pos {
        assert_eq!(w.start + 800, catalog.events()[w.event]);
    }
}

#[test]
fn offsets_stay_within_bound() {
    let (n, catalog) = spaced_catalog(50, 3200, 0);
    for w in build_positive_windows(n, &catalog, 3, 600, 6).unwrap() {
        let centre = w.start as i64 + 800;
        assert!((centre - catalog.events()[w.event] as i64).abs() <= 600);
    }
    assert!(build_positive_windows(n, &catalog, 3, 800, 6).is_err());
}

#[test]
fn edge_events_are_skipped() {
    let catalog = EventCatalog::new(vec![100, 5000, 9990]).unwrap();
    let pos = build_positive_windows(10_000, &catalog, 3, 600, 1).unwrap();
    assert_eq!(pos.len(), 3);
    assert!(pos.iter().all(|w| w.event == 1));
}

#[test]
fn negative_requests_beyond_capacity_report_the_maximum() {
    let (n, catalog) = spaced_catalog(3, 3200, 1600 * 4);
    let pos = build_positive_windows(n, &catalog, 3, 600, 1).unwrap();
    let starts: Vec<u64> = pos.iter().map(|w| w.start).collect();
    let cap = negative_capacity(n, &catalog, &starts);
    assert!(build_negative_windows(n, &catalog, 0, &starts, 1).unwrap().is_empty());
    assert_eq!(build_negative_windows(n, &catalog, cap, &starts, 1).unwrap().len(), cap);
    match build_negative_windows(n, &catalog, cap + 1, &starts, 1) {
        Err(Error::Infeasible { requested, achievable }) => assert_eq!((requested, achievable), (cap + 1, cap)),
        other => panic!("expected infeasible, got {other:?}"),
    }
}

#[test]
fn negatives_are_event_free_and_disjoint() {
    let (trace, catalog) = toy(30, 120, 4);
    let n = trace.n_samples();
    let pos = build_positive_windows(n, &catalog, 3, 600, 9).unwrap();
    let starts: Vec<u64> = pos.iter().map(|w| w.start).collect();
    let neg = build_negative_windows(n, &catalog, 90, &starts, 9).unwrap();
    assert_eq!(neg.len(), 90);
    for (i, &a) in neg.iter().enumerate() {
        assert!(a as usize + WINDOW_LEN <= n);
        assert!(catalog.events().iter().all(|&e| e < a || e >= a + 1600));
        assert!(starts.iter().all(|&p| p + 1600 <= a || a + 1600 <= p));
        assert!(neg[i + 1..].iter().all(|&b| b + 1600 <= a || a + 1600 <= b));
    }
}

#[test]
fn sample_set_obeys_all_rules_by_brute_force() {
    let (trace, catalog) = toy(200, 600, 7);
    let set = build_sample_set(&trace, &catalog, &BuildConfig { seed: 7, ..Default::default() }).unwrap();
    assert_eq!(set.positive_count(), 600);
    assert_eq!(set.negative_count(), 600);
    assert_eq!(brute_force_violations(&set, catalog.events()), (0, 0, 0));
    for s in set.samples() {
        assert!(is_standardized(s));
        let raw = extract_window(&trace, s.origin_index()).unwrap();
        assert_eq!(normalize(&raw).unwrap(), s.data());
    }
    assert!(verify_sample_set(&set, Some(&catalog)).is_ok());
}

#[test]
fn rebuild_with_same_seed_is_identical() {
    let (trace, catalog) = toy(20, 80, 3);
    let cfg = BuildConfig { seed: 11, ..Default::default() };
    let a = build_sample_set(&trace, &catalog, &cfg).unwrap();
    let b = build_sample_set(&trace, &catalog, &cfg).unwrap();
    assert_eq!(encode_sample_set(&a).unwrap(), encode_sample_set(&b).unwrap());
    let c = build_sample_set(&trace, &catalog, &BuildConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn balancing_without_events_fails() {
    let (trace, catalog) = toy(0, 10, 1);
    assert!(build_sample_set(&trace, &catalog, &BuildConfig::default()).is_err());
    let set = build_sample_set(&trace, &catalog, &BuildConfig { balance: false, negatives: 4, ..Default::default() }).unwrap();
    assert_eq!((set.positive_count(), set.negative_count()), (0, 4));
}

#[test]
fn verify_flags_each_rule() {
    let (trace, catalog) = toy(10, 40, 2);
    let set = build_sample_set(&trace, &catalog, &BuildConfig::default()).unwrap();
    let pos = set.samples().iter().find(|s| s.label() == 1).unwrap().clone();
    let neg = set.samples().iter().find(|s| s.label() == 0).unwrap().clone();

    let relabel = |s: &WaveformSample, label: u8, origin: u64| WaveformSample::new(s.data().to_vec(), label, origin).unwrap();
    let bad = SampleSet::new(vec![relabel(&pos, 0, pos.origin_index()), relabel(&neg, 1, neg.origin_index())]);
    let rep = verify_sample_set(&bad, Some(&catalog));
    assert_eq!((rep.rule1, rep.rule2, rep.rule3), (1, 1, 0));

    let overlapping = SampleSet::new(vec![pos.clone(), relabel(&neg, 0, pos.origin_index() + 100)]);
    assert_eq!(verify_sample_set(&overlapping, None).rule3, 1);

    let mut data = pos.data().to_vec();
    data[0] += 1.0;
    let unnorm = SampleSet::new(vec![WaveformSample::new(data, 1, pos.origin_index()).unwrap(), neg]);
    let rep = verify_sample_set(&unnorm, None);
    assert_eq!(rep.not_normalized, 1);
    assert!(!rep.is_ok());
}

fn flat_set(n_pairs: usize) -> SampleSet {
    let mut base = vec![0.0f32; SAMPLE_LEN];
    for (i, v) in base.iter_mut().enumerate() {
        *v = if i % 2 == 0 { 1.0 } else { -1.0 };
    }
    let samples = (0..2 * n_pairs)
        .map(|i| WaveformSample::new(base.clone(), (i % 2) as u8, (i * WINDOW_LEN) as u64).unwrap())
        .collect();
    SampleSet::new(samples)
}

#[test]
fn split_of_6432_leaves_2432_for_testing() {
    let set = flat_set(3216);
    let (train, test) = split(&set, 4000, 1).unwrap();
    assert_eq!((train.len(), test.len()), (4000, 2432));
    assert!(train.is_balanced() && test.is_balanced());
    let a: HashSet<u64> = train.samples().iter().map(|s| s.origin_index()).collect();
    assert!(test.samples().iter().all(|s| !a.contains(&s.origin_index())));
}

#[test]
fn split_edge_cases() {
    let set = flat_set(10);
    let (train, test) = split(&set, 20, 1).unwrap();
    assert_eq!((train.len(), test.len()), (20, 0));
    assert!(split(&set, 7, 1).is_err());
    assert!(split(&set, 22, 1).is_err());
    assert_eq!(split(&set, 8, 3).unwrap(), split(&set, 8, 3).unwrap());
}

#[test]
fn toy_split_is_disjoint_by_origin() {
    let (trace, catalog) = toy(60, 200, 5);
    let set = build_sample_set(&trace, &catalog, &BuildConfig::default()).unwrap();
    let train_count = (set.len() * 2 / 3) & !1;
    let (train, test) = split(&set, train_count, 5).unwrap();
    assert_eq!(train.len() + test.len(), set.len());
    let a: HashSet<u64> = train.samples().iter().map(|s| s.origin_index()).collect();
    assert!(test.samples().iter().all(|s| !a.contains(&s.origin_index())));
}

#[test]
fn sample_set_file_round_trip_and_layout() {
    let (trace, catalog) = toy(4, 16, 8);
    let set = build_sample_set(&trace, &catalog, &BuildConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.sgds");
    write_sample_set(&set, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"SGDS");
    assert_eq!(bytes.len(), 4 + 2 + 4 + set.len() * (1 + 8 + 4 * 4800));
    assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize, set.len());
    assert_eq!(read_sample_set(&path).unwrap(), set);
    assert!(matches!(decode_sample_set(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
    let mut bad = bytes.clone();
    bad[1] = b'X';
    assert!(matches!(decode_sample_set(&bad), Err(Error::BadMagic { .. })));
}

#[test]
fn balanced_subset_takes_half_of_each_class() {
    let set = flat_set(30);
    let sub = balanced_subset(&set, 10, 2).unwrap();
    assert_eq!((sub.positive_count(), sub.negative_count()), (5, 5));
    assert!(balanced_subset(&set, 9, 2).is_err());
    assert!(balanced_subset(&set, 62, 2).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn rules_hold_for_random_corpora(n_events in 1usize..12, extra in 0usize..20, seed in 0u64..1000, per_event in 1usize..4, bound in 0u64..700) {
        let n_noise = n_events * per_event + extra + 2;
        let (trace, catalog) = toy(n_events, n_noise, seed);
        let cfg = BuildConfig { per_event, offset_bound: bound, seed, ..Default::default() };
        let set = build_sample_set(&trace, &catalog, &cfg).unwrap();
        prop_assert_eq!(set.positive_count(), n_events * per_event);
        prop_assert!(set.is_balanced());
        prop_assert_eq!(brute_force_violations(&set, catalog.events()), (0, 0, 0));
        prop_assert!(set.samples().iter().all(is_standardized));
    }
}
