use std::collections::BTreeMap;

use halt_core::baselines::{self, Direction, StatDetector, Statistic};
use halt_core::features::{self, topk_mass};
use halt_core::metrics::{self, ScoredResponse};
use halt_core::trace::{format_traces, parse_traces, LogProbStep, ResponseTrace};
use halt_core::training;
use proptest::prelude::*;

fn step_strategy() -> impl Strategy<Value = LogProbStep> {
    (-30.0f64..0.0, prop::collection::vec(-30.0f64..0.0, 19)).prop_map(|(sel, mut alts)| {
        alts.sort_by(|a, b| b.total_cmp(a));
        let mut v = vec![sel];
        v.extend(alts);
        LogProbStep::new(&v).unwrap()
    })
}

/// Steps built from a proper distribution so that the entries are true
/// log-probabilities.
fn normalized_step_strategy() -> impl Strategy<Value = LogProbStep> {
    (prop::collection::vec(0.0f64..1.0, 21), 0usize..20).prop_map(|(mut w, sel)| {
        let total: f64 = w.iter().sum::<f64>() + 1e-9;
        w.iter_mut().for_each(|x| *x = (*x + 1e-12) / total);
        let mut logs: Vec<f64> = w[..20].iter().map(|p| p.ln()).collect();
        logs.sort_by(|a, b| b.total_cmp(a));
        let chosen = logs.remove(sel);
        let mut v = vec![chosen];
        v.extend(logs.into_iter().take(19));
        LogProbStep::new(&v).unwrap()
    })
}

fn labels_and_scores() -> impl Strategy<Value = (Vec<u8>, Vec<f64>)> {
    (2usize..80).prop_flat_map(|n| {
        (
            prop::collection::vec(0u8..=1, n).prop_map(|mut l| {
                l[0] = 0;
                l[1] = 1;
                l
            }),
            prop::collection::vec(-5.0f64..5.0, n),
        )
    })
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(step in step_strategy()) {
        let d = features::trunc_softmax(&step);
        let s: f64 = d.0.iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
        prop_assert!(d.0.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn entropies_are_bounded(step in step_strategy()) {
        let d = features::trunc_softmax(&step);
        let h = features::entropy_overall(&d);
        let ha = features::entropy_alts(&d);
        let hd = features::decision_entropy(&step);
        prop_assert!((0.0..=20f64.ln() + 1e-12).contains(&h));
        prop_assert!((0.0..=19f64.ln() + 1e-12).contains(&ha));
        prop_assert!((0.0..=2f64.ln() + 1e-12).contains(&hd));
    }

    #[test]
    fn softmax_matches_direct_evaluation(step in step_strategy()) {
        // exp without shifting is safe over this range
        let v = step.values();
        let z: f64 = v.iter().map(|l| l.exp()).sum();
        let d = features::trunc_softmax(&step);
        for (p, l) in d.0.iter().zip(v) {
            prop_assert!((p - l.exp() / z).abs() < 1e-10);
        }
    }

    #[test]
    fn rank_proxy_counts_stronger_alternatives(step in step_strategy()) {
        let r = features::rank_proxy(&step);
        let naive = 1 + step.alternatives().iter().filter(|&&a| a > step.selected()).count() as u32;
        prop_assert_eq!(r, naive);
        prop_assert!((1..=20).contains(&r));
    }

    #[test]
    fn shifting_all_log_probs_leaves_shape_features(step in step_strategy(), c in 0.0f64..10.0) {
        let shifted: Vec<f64> = step.values().iter().map(|v| v - c).collect();
        let s2 = LogProbStep::new(&shifted).unwrap();
        let (d1, d2) = (features::trunc_softmax(&step), features::trunc_softmax(&s2));
        prop_assert!((features::entropy_overall(&d1) - features::entropy_overall(&d2)).abs() < 1e-9);
        prop_assert!((features::entropy_alts(&d1) - features::entropy_alts(&d2)).abs() < 1e-9);
        prop_assert!((features::decision_entropy(&step) - features::decision_entropy(&s2)).abs() < 1e-9);
        prop_assert_eq!(features::rank_proxy(&step), features::rank_proxy(&s2));
    }

    #[test]
    fn topk_mass_is_monotone(step in normalized_step_strategy()) {
        let mut prev = 0.0;
        for k in 1..=20 {
            let m = topk_mass(&step, k).unwrap();
            prop_assert!(m >= prev && m <= 1.0 + 1e-9);
            prev = m;
        }
    }

    #[test]
    fn confusion_matches_naive_count(l in prop::collection::vec(0u8..=1, 1..200), seed in any::<u64>()) {
        let p: Vec<u8> = l.iter().enumerate().map(|(i, _)| ((seed >> (i % 64)) & 1) as u8).collect();
        let c = metrics::confusion(&l, &p).unwrap();
        let mut naive = [0usize; 4];
        for (a, b) in l.iter().zip(&p) {
            naive[(*a as usize) * 2 + *b as usize] += 1;
        }
        prop_assert_eq!((c.tn, c.fp, c.fn_, c.tp), (naive[0], naive[1], naive[2], naive[3]));
    }

    #[test]
    fn macro_f1_symmetric_under_relabeling(l in prop::collection::vec(0u8..=1, 1..100), p in prop::collection::vec(0u8..=1, 100)) {
        let p = &p[..l.len()];
        let f = metrics::f1_macro_f1(&l, p).unwrap().1;
        let fl: Vec<u8> = l.iter().map(|v| 1 - v).collect();
        let fp: Vec<u8> = p.iter().map(|v| 1 - v).collect();
        prop_assert!((f - metrics::f1_macro_f1(&fl, &fp).unwrap().1).abs() < 1e-12);
    }

    #[test]
    fn auroc_invariant_under_monotone_maps((l, s) in labels_and_scores()) {
        let a = metrics::auroc(&l, &s).unwrap();
        let t: Vec<f64> = s.iter().map(|v| (v * 0.7).exp() + 3.0).collect();
        prop_assert!((a - metrics::auroc(&l, &t).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn auroc_of_negated_scores_complements((l, s) in labels_and_scores()) {
        let mut sorted = s.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        prop_assume!(sorted.windows(2).all(|w| w[0] < w[1]));
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        let total = metrics::auroc(&l, &s).unwrap() + metrics::auroc(&l, &neg).unwrap();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn average_is_cluster_mean(items in prop::collection::vec((0usize..4, 0u8..=1, -1.0f64..1.0), 1..120)) {
        let results: Vec<ScoredResponse> = items
            .iter()
            .map(|&(c, l, s)| ScoredResponse { cluster: format!("c{c}"), label: l, score: s, prediction: (s >= 0.0) as u8 })
            .collect();
        let r = metrics::aggregate(&results).unwrap();
        let mean = r.per_cluster.values().map(|b| b.macro_f1).sum::<f64>() / r.per_cluster.len() as f64;
        prop_assert!((r.average.macro_f1 - mean).abs() < 1e-12);
        prop_assert_eq!(r.per_cluster.values().map(|b| b.support).sum::<usize>(), r.overall.support);
        // independent group-by
        let mut groups: BTreeMap<String, (Vec<u8>, Vec<u8>)> = BTreeMap::new();
        for x in &results {
            let g = groups.entry(x.cluster.clone()).or_default();
            g.0.push(x.label);
            g.1.push(x.prediction);
        }
        for (k, (l, p)) in groups {
            prop_assert_eq!(r.per_cluster[&k].macro_f1, metrics::f1_macro_f1(&l, &p).unwrap().1);
        }
    }

    #[test]
    fn tuner_is_exactly_optimal((l, s) in labels_and_scores()) {
        let tuned = baselines::tune_threshold(Statistic::Ppl, &l, &s).unwrap();
        prop_assert_eq!(baselines::detector_macro_f1(&tuned.detector, &l, &s).unwrap(), tuned.val_macro_f1);
        let mut cands: Vec<f64> = s.clone();
        cands.extend([f64::NEG_INFINITY, f64::INFINITY]);
        for t in cands {
            for dir in [Direction::HigherIsHallucinated, Direction::LowerIsHallucinated] {
                let det = StatDetector { direction: dir, threshold: t, ..StatDetector::new(Statistic::Ppl) };
                prop_assert!(baselines::detector_macro_f1(&det, &l, &s).unwrap() <= tuned.val_macro_f1);
            }
        }
    }

    #[test]
    fn clipping_bounds_the_norm(g in prop::collection::vec(-100.0f64..100.0, 1..300)) {
        let mut g = g;
        let pre = training::global_norm(&g);
        training::clip_global_norm(&mut g, 1.0);
        let post = training::global_norm(&g);
        prop_assert!(post <= 1.0 + 1e-9);
        prop_assert!((post - pre.min(1.0)).abs() < 1e-9);
    }

    #[test]
    fn traces_round_trip(steps in prop::collection::vec(step_strategy(), 1..6), label in 0u8..=1) {
        let t = ResponseTrace {
            id: "p-1".into(),
            cluster: "qa".into(),
            label,
            steps,
            meta: BTreeMap::new(),
        };
        let text = format_traces(std::slice::from_ref(&t));
        let back = parse_traces(&text, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(&back[0], &t);
        prop_assert_eq!(format_traces(&back), text);
    }

    #[test]
    fn detector_score_ignores_trace_order(steps in prop::collection::vec(step_strategy(), 1..8)) {
        let mk = |id: &str| ResponseTrace { id: id.into(), cluster: "c".into(), label: 0, steps: steps.clone(), meta: BTreeMap::new() };
        let a = vec![mk("a"), mk("b")];
        let b = vec![mk("b"), mk("a")];
        for st in Statistic::ALL {
            let sa = baselines::score_all(st, &a);
            let sb = baselines::score_all(st, &b);
            prop_assert_eq!(sa[0], sb[1]);
            if steps.len() == 1 && st == Statistic::DhDec {
                prop_assert_eq!(sa[0], 0.0);
            }
        }
    }
}
