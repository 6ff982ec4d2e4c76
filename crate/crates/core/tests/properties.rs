use dpmg::io::SerializedSketch;
use dpmg::merge::MergedSketch;
use dpmg::oracle::{canonical_mg, ExactHistogram};
use dpmg::{
    merge, postprocess, privatize_mg, threshold_pmg, NoiseSampler, PrivacyParams, PrivateSummary,
    Sketch,
};
use proptest::prelude::*;

fn stream_strategy() -> impl Strategy<Value = (usize, u64, Vec<u64>)> {
    (1usize..6, 1u64..12)
        .prop_flat_map(|(k, d)| (Just(k), Just(d), prop::collection::vec(1..=d, 0..150)))
}

proptest! {
    #[test]
    fn estimates_undercount_by_at_most_n_over_k_plus_one((k, d, items) in stream_strategy()) {
        let s = Sketch::from_stream(k, d, &items).unwrap();
        let h = ExactHistogram::from_stream(&items, d).unwrap();
        let n = items.len() as u64;
        prop_assert!(s.gamma() <= n / (k as u64 + 1));
        prop_assert_eq!(s.entries().count(), k);
        for x in 1..=d {
            let (f, est) = (h.count(x), s.estimate(x).unwrap());
            prop_assert!(est <= f);
            prop_assert!((f - est) * (k as u64 + 1) <= n);
        }
    }

    #[test]
    fn agrees_with_textbook_misra_gries((k, d, items) in stream_strategy()) {
        let s = Sketch::from_stream(k, d, &items).unwrap();
        let c = canonical_mg(&items, k, d).unwrap();
        for x in 1..=d {
            prop_assert_eq!(s.estimate(x).unwrap(), c.get(&x).copied().unwrap_or(0));
        }
        let standard = s.to_standard();
        prop_assert_eq!(standard.entries().collect::<Vec<_>>(), c.into_iter().collect::<Vec<_>>());
    }

    #[test]
    fn sketch_files_round_trip((k, d, items) in stream_strategy()) {
        let s = SerializedSketch::Mg(Sketch::from_stream(k, d, &items).unwrap());
        prop_assert_eq!(SerializedSketch::from_json(&s.to_json().unwrap()).unwrap(), s.clone());
        let m = SerializedSketch::Merged(s.to_merged());
        prop_assert_eq!(SerializedSketch::from_json(&m.to_json().unwrap()).unwrap(), m);
    }

    #[test]
    fn offsets_keep_the_accuracy_guarantee((k, d, items) in stream_strategy()) {
        let o = postprocess(&Sketch::from_stream(k, d, &items).unwrap());
        let h = ExactHistogram::from_stream(&items, d).unwrap();
        let (k1, n) = (k as i128 + 1, items.len() as i128);
        for x in 1..=d {
            let f = h.count(x) as i128 * k1;
            prop_assert!(o.numerator(x) <= f && o.numerator(x) >= f - n);
        }
    }

    #[test]
    fn merges_keep_the_accuracy_guarantee(
        (k, d, a) in stream_strategy(),
        extra in prop::collection::vec(1u64..100, 0..150),
    ) {
        let b: Vec<u64> = extra.into_iter().map(|x| (x - 1) % d + 1).collect();
        let ma = MergedSketch::from(&Sketch::from_stream(k, d, &a).unwrap());
        let mb = MergedSketch::from(&Sketch::from_stream(k, d, &b).unwrap());
        let m = merge(&ma, &mb).unwrap();
        let h = ExactHistogram::from_stream(&a, d).unwrap().add(&ExactHistogram::from_stream(&b, d).unwrap());
        prop_assert!(m.len() <= k);
        prop_assert_eq!(m.n(), (a.len() + b.len()) as u64);
        for x in 1..=d {
            let (f, est) = (h.count(x), m.estimate(x));
            prop_assert!(est <= f && (f - est) * (k as u64 + 1) <= m.n());
        }
    }

    #[test]
    fn releases_are_thresholded_subsets(
        (k, d, items) in stream_strategy(),
        seed in any::<u64>(),
        eps in 0.1f64..4.0,
        delta in 1e-6f64..0.5,
    ) {
        let p = PrivacyParams::new(eps, delta, 0.05).unwrap();
        let mut s = Sketch::from_stream(k, d, &items).unwrap();
        let stored: Vec<u64> = s.real_entries().map(|(key, _)| key).collect();
        let out = privatize_mg(&mut s, &p, &mut NoiseSampler::laplace(seed)).unwrap();
        prop_assert!(out.len() <= k);
        for (key, count) in out.entries() {
            prop_assert!(stored.contains(&key));
            prop_assert!(count >= threshold_pmg(&p));
        }
        let back = PrivateSummary::from_json(&out.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, out);
    }
}
