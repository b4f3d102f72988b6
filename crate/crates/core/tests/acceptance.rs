//! High-level acceptance checks. Each check prints one `PASS`/`FAIL` line;
//! the test fails if any check fails.

use std::time::{Duration, Instant};

use halt_core::baselines::{self, Statistic};
use halt_core::features::{self, column_names, FEATURE_DIM};
use halt_core::metrics;
use halt_core::model::{self, attribute, Batch, HaltConfig, HaltModel, Mode, ParamLayout};
use halt_core::synth::{self, SuiteConfig};
use halt_core::trace::LogProbStep;
use halt_core::training::{self, AdamHyper, AdamState};
use halt_core::{ColumnMask, FeatureSequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn report(name: &str, started: Instant, o: &Outcome, failures: &mut Vec<String>) {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    println!("[{tag}] {name}: {} ({:.1}s)", o.detail, started.elapsed().as_secs_f64());
    if !o.pass {
        failures.push(name.to_string());
    }
}

#[derive(Deserialize)]
struct OracleCase {
    logprobs: Vec<f64>,
    trunc_softmax: Vec<f64>,
    avg_logp: f64,
    rank_proxy: u32,
    entropy_overall: f64,
    entropy_alts: f64,
    decision_entropy: f64,
}

fn feature_oracle() -> Outcome {
    let started = Instant::now();
    let cases: Vec<OracleCase> =
        serde_json::from_str(include_str!("fixtures/feature_oracle.json")).expect("oracle fixture");
    let mut worst: f64 = 0.0;
    let mut bounds_ok = true;
    let mut rank_ok = true;
    for c in &cases {
        let step = LogProbStep::new(&c.logprobs).expect("valid step");
        let dist = features::trunc_softmax(&step);
        for (a, b) in dist.0.iter().zip(&c.trunc_softmax) {
            worst = worst.max((a - b).abs());
        }
        let h = features::entropy_overall(&dist);
        let ha = features::entropy_alts(&dist);
        let hd = features::decision_entropy(&step);
        worst = worst
            .max((features::avg_logp(&step) - c.avg_logp).abs())
            .max((h - c.entropy_overall).abs())
            .max((ha - c.entropy_alts).abs())
            .max((hd - c.decision_entropy).abs());
        rank_ok &= features::rank_proxy(&step) == c.rank_proxy;
        bounds_ok &= h <= 20f64.ln() + 1e-12 && ha <= 19f64.ln() + 1e-12 && hd <= 2f64.ln() + 1e-12;
        bounds_ok &= h >= 0.0 && ha >= 0.0 && hd >= 0.0;
    }
    let elapsed = started.elapsed();
    outcome(
        worst < 1e-10 && rank_ok && bounds_ok && elapsed < Duration::from_secs(5),
        format!(
            "{} steps, max abs error {worst:.2e}, ranks exact {rank_ok}, bounds respected {bounds_ok}",
            cases.len()
        ),
    )
}

fn random_tiny_config(rng: &mut ChaCha8Rng) -> HaltConfig {
    HaltConfig {
        proj_dim: rng.random_range(2..=5),
        hidden_dim: rng.random_range(2..=6),
        num_layers: rng.random_range(1..=3),
        bidirectional: rng.random_bool(0.75),
        dropout_rate: 0.0,
        top_q: rng.random_range(0.05..=1.0),
        out_norm: rng.random_bool(0.5),
        ..HaltConfig::default()
    }
}

fn short_emulator_sequences(seed: u64, n: usize, max_len: usize) -> Vec<FeatureSequence> {
    let spec = synth::fixture_a();
    let traces = synth::generate(&spec, "qa", n, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    features::featurize_all(&traces)
        .into_iter()
        .map(|mut s| {
            let len = rng.random_range(1..=max_len);
            s.rows.truncate(len);
            s
        })
        .collect()
}

fn gradient_check() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let h = 1e-5;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
    let mut worst: f64 = 0.0;
    let mut worst_group = String::new();
    let mut skipped = 0usize;
    let mut checked = 0usize;
    let configs = 20;
    for k in 0..configs {
        let cfg = random_tiny_config(&mut rng);
        let model = HaltModel::new(cfg, 1000 + k).unwrap();
        let seqs = short_emulator_sequences(k, 3, 7);
        let refs: Vec<&FeatureSequence> = seqs.iter().collect();
        let batch = Batch::from_sequences(&refs);
        let lg = model::loss_and_grad(&model, &batch, Mode::Inference).unwrap();
        let selection = |m: &HaltModel, b: &Batch| -> Vec<Vec<usize>> {
            let (_, c) = model::forward(m, b, Mode::Inference).unwrap();
            (0..b.size()).map(|i| c.selected(i).to_vec()).collect()
        };
        let base_sel = selection(&model, &batch);
        let loss = |m: &HaltModel, b: &Batch| model::loss_and_grad(m, b, Mode::Inference).unwrap().loss;

        for spec in &model.layout.specs {
            for i in spec.range() {
                let mut p = model.clone();
                p.params[i] += h;
                let up = loss(&p, &batch);
                let sel_up = selection(&p, &batch);
                p.params[i] -= 2.0 * h;
                let down = loss(&p, &batch);
                if sel_up != base_sel || selection(&p, &batch) != base_sel {
                    skipped += 1;
                    continue;
                }
                checked += 1;
                let e = rel(lg.param_grads[i], (up - down) / (2.0 * h));
                if e > worst {
                    worst = e;
                    worst_group = spec.name.clone();
                }
            }
        }
        for b in 0..batch.size() {
            for t in 0..batch.lengths[b] {
                for c in 0..FEATURE_DIM {
                    let i = (b * batch.max_len + t) * FEATURE_DIM + c;
                    let mut pb = batch.clone();
                    pb.features[i] += h;
                    let up = loss(&model, &pb);
                    let sel_up = selection(&model, &pb);
                    pb.features[i] -= 2.0 * h;
                    let down = loss(&model, &pb);
                    if sel_up != base_sel || selection(&model, &pb) != base_sel {
                        skipped += 1;
                        continue;
                    }
                    checked += 1;
                    let e = rel(lg.input_grads[i], (up - down) / (2.0 * h));
                    if e > worst {
                        worst = e;
                        worst_group = "input".into();
                    }
                }
            }
        }
    }
    let elapsed = started.elapsed();
    outcome(
        worst < 1e-4 && elapsed < Duration::from_secs(120),
        format!(
            "{configs} configs, {checked} coordinates ({skipped} skipped at pooling switches), \
             max relative error {worst:.2e} in `{worst_group}`"
        ),
    )
}

fn padding_invariance() -> Outcome {
    let model = HaltModel::new(
        HaltConfig {
            proj_dim: 8,
            hidden_dim: 8,
            num_layers: 2,
            ..HaltConfig::default()
        },
        5,
    )
    .unwrap();
    let spec = synth::fixture_a();
    let seqs = features::featurize_all(&synth::generate(&spec, "dialogue", 100, 9).unwrap());
    let alone: Vec<u64> = seqs
        .iter()
        .map(|s| model::logits(&model, &Batch::from_sequences(&[s])).unwrap()[0].to_bits())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for _ in 0..20 {
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
        let mut start = 0;
        while start < order.len() {
            let size = rng.random_range(1..=17).min(order.len() - start);
            let idx = &order[start..start + size];
            let refs: Vec<&FeatureSequence> = idx.iter().map(|&i| &seqs[i]).collect();
            let longest = refs.iter().map(|s| s.len()).max().unwrap();
            let batch = Batch::with_padding(&refs, longest + rng.random_range(0..30));
            let z = model::logits(&model, &batch).unwrap();
            mismatches += idx
                .iter()
                .zip(&z)
                .filter(|(&i, zb)| zb.to_bits() != alone[i])
                .count();
            start += size;
        }
    }
    outcome(
        mismatches == 0,
        format!("100 traces x 20 random batchings, {mismatches} logit mismatches"),
    )
}

fn pairwise_auroc(labels: &[u8], scores: &[f64]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if li != 1 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0 {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_auc: f64 = 0.0;
    for &n in &[2usize, 10, 100, 1000, 10_000] {
        let labels: Vec<u8> = (0..n).map(|i| if i < 2 { i as u8 } else { rng.random_range(0..=1) }).collect();
        // coarse rounding produces ties
        let scores: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 50.0).round() / 50.0).collect();
        let fast = metrics::auroc(&labels, &scores).unwrap();
        worst_auc = worst_auc.max((fast - pairwise_auroc(&labels, &scores)).abs());
    }

    let balanced: Vec<u8> = (0..100).map(|i| (i % 2) as u8).collect();
    let cp = metrics::f1_macro_f1(&balanced, &[1; 100]).unwrap().1;
    let cp_exact = cp == 1.0 / 3.0;

    let mut dominated = 0;
    let mut violations = 0;
    for _ in 0..50 {
        let n = rng.random_range(4..200);
        let labels: Vec<u8> = (0..n).map(|i| if i < 2 { i as u8 } else { rng.random_range(0..=1) }).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let tuned = baselines::tune_threshold(Statistic::HOverall, &labels, &scores).unwrap();
        for _ in 0..1000 {
            let t = rng.random_range(-3.5..3.5);
            for dir in [baselines::Direction::HigherIsHallucinated, baselines::Direction::LowerIsHallucinated] {
                let det = baselines::StatDetector {
                    direction: dir,
                    threshold: t,
                    ..baselines::StatDetector::new(Statistic::HOverall)
                };
                let f = baselines::detector_macro_f1(&det, &labels, &scores).unwrap();
                if f > tuned.val_macro_f1 + 1e-15 {
                    violations += 1;
                }
            }
        }
        dominated += 1;
    }
    outcome(
        worst_auc < 1e-12 && cp_exact && violations == 0,
        format!(
            "AUROC max deviation {worst_auc:.1e} up to n=10000; constant-positive macro-F1 {cp} \
             (exactly 1/3: {cp_exact}); tuner beaten {violations} times over {dominated} sets x 1000 thresholds"
        ),
    )
}

fn optimizer_fidelity() -> Outcome {
    let mut p = [0.0];
    let mut state = AdamState::new(1);
    training::adam_step(&mut p, &[1.0], &mut state, 4.41e-4, 0.0, AdamHyper::default()).unwrap();
    let step_err = (p[0] + 4.41e-4).abs();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_excess: f64 = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let n = rng.random_range(1..500);
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let mut g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        let pre = training::clip_global_norm(&mut g, 1.0);
        let post = training::global_norm(&g);
        worst_excess = worst_excess.max(post - 1.0);
        if (post - pre.min(1.0)).abs() > 1e-9 {
            worst_excess = f64::INFINITY;
        }
    }
    outcome(
        step_err < 1e-7 && worst_excess <= 1e-9,
        format!("first step {:.10e} (error {step_err:.1e}); post-clip norm excess {worst_excess:.1e}", p[0]),
    )
}

fn parameter_count() -> Outcome {
    let n = ParamLayout::new(&HaltConfig::default()).total();
    let ratio = n as f64 / 5e6;
    outcome((0.8..=1.2).contains(&ratio), format!("{n} parameters ({:.3} x 5M)", ratio))
}

fn transfer_suite(failures: &mut Vec<String>) {
    let started = Instant::now();
    let cfg = SuiteConfig::default();
    let a = synth::fixture_a();
    let b = synth::fixture_b();
    let traces = 2 * (cfg.n_train_per_family + cfg.n_val_per_family);
    let r = synth::hypothesis_suite(&a, &b, &cfg).unwrap();
    let elapsed = started.elapsed();
    report(
        "held-out task family (A trained on families 1-2, tested on family 3)",
        started,
        &outcome(
            r.a_on_a >= 0.80 && elapsed < Duration::from_secs(30 * 60) && traces <= 4000,
            format!(
                "macro-F1 {:.3} on `{}` (>= 0.80); {traces} training traces; suite wall time {:.0}s",
                r.a_on_a,
                r.held_out_family,
                elapsed.as_secs_f64()
            ),
        ),
        failures,
    );
    report(
        "cross-emulator drop",
        started,
        &outcome(
            r.gap_a >= 0.10 && r.gap_b >= 0.10,
            format!(
                "A: {:.3} -> {:.3} (gap {:.3}); B: {:.3} -> {:.3} (gap {:.3}); bias distance {:.2}",
                r.a_on_a, r.a_on_b, r.gap_a, r.b_on_b, r.b_on_a, r.gap_b, r.bias_distance
            ),
        ),
        failures,
    );
}

/// Fixed budget shared by the hard-family and ablation checks.
fn hard_family_runs() -> ([Vec<FeatureSequence>; 3], HaltConfig, training::TrainConfig) {
    let spec = synth::fixture_a();
    let sets = synth::split_sets(&spec, "hard", [800, 100, 400], 21).unwrap();
    let mut tc = synth::desk_train_config();
    tc.max_epochs = 12;
    tc.seed = 21;
    (sets, synth::desk_model_config(), tc)
}

fn halt_vs_baselines(sets: &[Vec<FeatureSequence>; 3], mc: &HaltConfig, tc: &training::TrainConfig) -> (Outcome, HaltModel) {
    let spec = synth::fixture_a();
    let raw_val = synth::generate(&spec, "hard", 100, halt_core::seeds::derive(21, "validation")).unwrap();
    let raw_test = synth::generate(&spec, "hard", 400, halt_core::seeds::derive(21, "test")).unwrap();
    let vl: Vec<u8> = raw_val.iter().map(|t| t.label).collect();
    let tl: Vec<u8> = raw_test.iter().map(|t| t.label).collect();
    let mut best = (String::new(), f64::NEG_INFINITY);
    for st in Statistic::ALL {
        let tuned = baselines::tune_threshold(st, &vl, &baselines::score_all(st, &raw_val)).unwrap();
        let f = baselines::detector_macro_f1(&tuned.detector, &tl, &baselines::score_all(st, &raw_test)).unwrap();
        if f > best.1 {
            best = (st.to_string(), f);
        }
    }
    let model = HaltModel::new(mc.clone(), halt_core::seeds::derive(21, "init")).unwrap();
    let out = training::train(model, &sets[0], &sets[1], tc).unwrap();
    let halt = training::validation_macro_f1(&out.best_model, &sets[2]).unwrap();
    (
        outcome(
            halt - best.1 >= 0.05,
            format!("HALT {halt:.3} vs best statistic `{}` {:.3} (margin {:.3})", best.0, best.1, halt - best.1),
        ),
        out.best_model,
    )
}

fn topk_exactness() -> Outcome {
    let spec = synth::fixture_a();
    let mut worst: f64 = 0.0;
    let mut monotone = true;
    let mut all = Vec::new();
    for fam in &spec.task_families {
        let detailed = synth::generate_detailed(&spec, &fam.name, 40, 4).unwrap();
        for d in &detailed {
            for (step, full) in d.trace.steps.iter().zip(&d.full_logprobs) {
                let mut prev = 0.0;
                let mut exact = 0.0;
                for k in 1..=20 {
                    exact += full[k - 1].exp();
                    let m = features::topk_mass(step, k).unwrap();
                    worst = worst.max((m - exact).abs());
                    monotone &= m >= prev;
                    prev = m;
                }
            }
        }
        all.extend(detailed.into_iter().map(|d| d.trace));
    }
    let means = synth::mean_topk_mass(&all, &[5, 10, 20]).unwrap();
    let ordered = means[&20] >= means[&10] && means[&10] >= means[&5];
    outcome(
        worst < 1e-9 && monotone && ordered,
        format!(
            "max deviation from full distribution {worst:.1e}; mean mass k=5 {:.4}, k=10 {:.4}, k=20 {:.4}",
            means[&5], means[&10], means[&20]
        ),
    )
}

fn attribution_sanity(
    full_model: &HaltModel,
    sets: &[Vec<FeatureSequence>; 3],
    mc: &HaltConfig,
    tc: &training::TrainConfig,
) -> Outcome {
    let test: Vec<&FeatureSequence> = sets[2].iter().take(64).collect();
    let batch = Batch::from_sequences(&test);
    let att = attribute(full_model, &batch).unwrap();
    let sum_err = (att.per_feature().iter().sum::<f64>() - 1.0).abs();

    let masked_cfg = HaltConfig {
        column_mask: ColumnMask::without(&[features::COL_H_ALTS]),
        ..mc.clone()
    };
    let masked = HaltModel::new(masked_cfg, 1).unwrap();
    let masked_imp = attribute(&masked, &batch).unwrap().per_feature()[features::COL_H_ALTS];

    let engineered: Vec<Vec<usize>> = (0..features::D_STATS).map(|c| vec![c]).collect();
    let ablation = training::ablate(
        mc,
        tc,
        halt_core::seeds::derive(21, "init"),
        [&sets[0], &sets[1], &sets[2]],
        &engineered,
    )
    .unwrap();
    let degraded: Vec<String> = ablation
        .rows
        .iter()
        .filter(|r| r.delta < 0.0)
        .map(|r| format!("{} {:+.3}", r.dropped.join(","), r.delta))
        .collect();
    let names = column_names();
    let top = att
        .per_feature()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| names[i].clone())
        .unwrap();
    outcome(
        sum_err < 1e-9 && masked_imp == 0.0 && !degraded.is_empty(),
        format!(
            "importance sum error {sum_err:.1e}; masked column importance {masked_imp}; top column `{top}`; \
             full {:.3}, degraded by ablation: [{}]",
            ablation.full_macro_f1,
            degraded.join("; ")
        ),
    )
}

#[test]
fn acceptance() {
    let mut failures = Vec::new();
    let t = Instant::now();
    report("feature oracle", t, &feature_oracle(), &mut failures);
    let t = Instant::now();
    report("gradient check", t, &gradient_check(), &mut failures);
    let t = Instant::now();
    report("padding and batching invariance", t, &padding_invariance(), &mut failures);
    let t = Instant::now();
    report("metric oracles", t, &metric_oracles(), &mut failures);
    let t = Instant::now();
    report("optimizer fidelity", t, &optimizer_fidelity(), &mut failures);
    let t = Instant::now();
    report("default parameter count", t, &parameter_count(), &mut failures);
    transfer_suite(&mut failures);
    let t = Instant::now();
    let (sets, mc, tc) = hard_family_runs();
    let (o, full_model) = halt_vs_baselines(&sets, &mc, &tc);
    report("HALT vs single-statistic detectors on `hard`", t, &o, &mut failures);
    let t = Instant::now();
    report("top-k mass exactness and ordering", t, &topk_exactness(), &mut failures);
    let t = Instant::now();
    report(
        "attribution sanity",
        t,
        &attribution_sanity(&full_model, &sets, &mc, &tc),
        &mut failures,
    );
    assert!(failures.is_empty(), "failed: {failures:?}");
}
