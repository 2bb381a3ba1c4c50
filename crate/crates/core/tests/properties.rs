use chrono::{TimeDelta, TimeZone, Utc};
use proptest::prelude::*;

use dhwcast::calendar::aggregate;
use dhwcast::iforest::{c_factor, top_fraction};
use dhwcast::metrics::{rmse, wilcoxon_exact};

proptest! {
    #[test]
    fn wilcoxon_is_symmetric_in_its_arguments(pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..12)) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let ab = wilcoxon_exact(&a, &b).unwrap();
        let ba = wilcoxon_exact(&b, &a).unwrap();
        prop_assert_eq!(ab.p_value, ba.p_value);
        prop_assert_eq!(ab.w_plus, ba.w_minus);
        prop_assert!(ab.p_value > 0.0 && ab.p_value <= 1.0);
    }

    #[test]
    fn calendar_probabilities_are_fractions(offsets in prop::collection::vec(0i64..(21 * 24 * 60), 0..60)) {
        let start = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
        let events: Vec<_> = offsets.iter().map(|m| start + TimeDelta::minutes(*m)).collect();
        let cal = aggregate(&events, start, start + TimeDelta::days(21)).unwrap();
        for w in 0..7 {
            for h in 0..24 {
                let p = cal.probability[w][h];
                prop_assert!((0.0..=1.0).contains(&p));
                prop_assert_eq!(cal.support[w][h], 3);
                prop_assert!(p * 3.0 <= cal.event_count[w][h] as f64 + 1e-12);
            }
        }
    }

    #[test]
    fn top_fraction_takes_the_floor(scores in prop::collection::vec(0.0f64..1.0, 0..300), c in 0.0f64..0.5) {
        let picked = top_fraction(&scores, c);
        prop_assert_eq!(picked.len(), (c * scores.len() as f64 + 1e-9).floor() as usize);
        prop_assert!(picked.windows(2).all(|w| w[0] < w[1]));
        if let Some(min_in) = picked.iter().map(|i| scores[*i]).reduce(f64::min) {
            let outside = (0..scores.len()).filter(|i| !picked.contains(i)).map(|i| scores[i]);
            prop_assert!(outside.into_iter().all(|s| s <= min_in));
        }
    }

    #[test]
    fn c_factor_grows_with_n(n in 3usize..100_000) {
        prop_assert!(c_factor(n + 1).unwrap() > c_factor(n).unwrap());
    }

    #[test]
    fn rmse_vanishes_only_on_a_perfect_fit(y in prop::collection::vec(-10.0f64..10.0, 1..50), shift in 0.01f64..1.0) {
        prop_assert_eq!(rmse(&y, &y).unwrap(), 0.0);
        let off: Vec<f64> = y.iter().map(|v| v + shift).collect();
        prop_assert!((rmse(&y, &off).unwrap() - shift).abs() < 1e-9);
    }
}

#[test]
fn six_pairs_with_one_small_reversal_give_three_thirty_seconds() {
    let a = [1.0, 0.0, 3.0, 4.0, 5.0, 6.0];
    let b = [0.0, 2.0, 0.0, 0.0, 0.0, 0.0];
    let w = wilcoxon_exact(&a, &b).unwrap();
    assert_eq!(w.statistic, 2.0);
    assert!((w.p_value - 0.09375).abs() < 1e-12);
}
