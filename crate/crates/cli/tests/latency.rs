use proptest::prelude::*;
use storyrank_cli::serve::LatencyHistogram;

fn histogram(samples: &[u64]) -> LatencyHistogram {
    let mut h = LatencyHistogram::new();
    for &s in samples {
        h.record(s);
    }
    h
}

proptest! {
    #[test]
    fn percentiles_are_nearest_rank_samples(samples in proptest::collection::vec(0u64..1_000_000, 1..200), p in 0.01f64..100.0) {
        let h = histogram(&samples);
        let mut sorted = samples.clone();
        sorted.sort_unstable();
        let rank = (p / 100.0 * sorted.len() as f64).ceil() as usize;
        prop_assert_eq!(h.percentile(p), Some(sorted[rank.max(1) - 1]));
        prop_assert_eq!(h.percentile(100.0), sorted.last().copied());
        let s = h.summary();
        prop_assert!(s.p50_us <= s.p95_us && s.p95_us <= s.p99_us && s.p99_us <= s.max_us);
    }

    #[test]
    fn merge_equals_recording_everything(a in proptest::collection::vec(0u64..1000, 0..50), b in proptest::collection::vec(0u64..1000, 0..50)) {
        let mut merged = histogram(&a);
        merged.merge(&histogram(&b));
        let all: Vec<u64> = a.iter().chain(&b).copied().collect();
        prop_assert_eq!(merged.summary(), histogram(&all).summary());
    }
}
