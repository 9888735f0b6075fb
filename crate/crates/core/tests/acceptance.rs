//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use aesp_core::backbone::{Backbone, BackboneConfig};
use aesp_core::checkpoint::bundle_bytes;
use aesp_core::config::toy_config;
use aesp_core::data::ingest;
use aesp_core::evaluator::{avg_acc, forgetting, last_acc, AccuracyMatrix};
use aesp_core::iqkm::{entropy, select_task, IqkmMode, SelectorConfig};
use aesp_core::losses::{classification_loss, semantic_contrast_loss, total_loss, ContrastConfig, PairIndicator};
use aesp_core::model::{Classifier, PromptPool};
use aesp_core::objective::{batch_loss, batch_loss_grad, ObjectiveConfig, PreparedSample};
use aesp_core::run::{build_semantics, train, RunSummary};
use aesp_core::text::Projection;
use aesp_core::trainer::{run_protocol, split_tasks, TrainConfig, Trainer};
use aesp_oracle::{brute_force_vote, gradient_check, reference_forward, OracleReport};
use common::*;
use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let bb = Backbone::toy(BackboneConfig::toy(), 5).map_err(err)?;
    ensure(
        bb.config.num_layers == 2 && bb.config.embed_dim == 32 && bb.config.adapter_dim == 8,
        "toy geometry changed",
    )?;
    let bundle = random_bundle(&bb.config, 1, vec![0, 1], 4, 9, false);
    let samples: Vec<PreparedSample> = (0..2)
        .map(|i| {
            let img = random_image(&bb.config, 30 + i);
            Ok(PreparedSample {
                image_tokens: bb.image_tokens(&img)?,
                query: bb.query_features(&img)?,
                class_index: i as usize,
            })
        })
        .collect::<aesp_core::Result<_>>()
        .map_err(err)?;
    let refs: Vec<&PreparedSample> = samples.iter().collect();
    let cfg = ObjectiveConfig::default();
    let (terms, grad) = batch_loss_grad(&bb, &bundle, &refs, &cfg).map_err(err)?;
    ensure(terms.total.is_finite(), "non-finite loss")?;

    let mut worst: f64 = 0.0;
    let mut checked = Vec::new();
    for (gi, (name, values)) in bundle.params.groups().into_iter().enumerate() {
        if !bundle.is_trainable(&name) {
            continue;
        }
        let analytic = grad.groups()[gi].1.to_vec();
        let f = |x: &[f64]| {
            let mut probe = bundle.clone();
            probe.params.groups_mut()[gi].1.copy_from_slice(x);
            batch_loss(&bb, &probe, &refs, &cfg).expect("finite loss").total
        };
        let r = gradient_check(&name, &analytic, f, values, 1e-5, 1e-4);
        ensure(r.pass, r.to_string())?;
        worst = worst.max(r.max_rel_error);
        checked.push(name);
    }
    for want in ["visual_prompt", "keys", "classifier.weight", "classifier.bias"] {
        ensure(checked.iter().any(|n| n == want), format!("group {want} not checked"))?;
    }
    ensure(checked.iter().any(|n| n.starts_with("adapter")), "no adapter group checked")?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} groups, max rel error {worst:.2e}, {:.1}s",
        checked.len(),
        elapsed.as_secs_f64()
    ))
}

fn forward_equivalence() -> Outcome {
    let mut cases = 0;
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut cfg = BackboneConfig::toy();
        match seed % 4 {
            1 => cfg.adapter_layers = Some(Default::default()),
            2 => cfg.prompt_attention = aesp_core::PromptAttention::ImageIsolated,
            3 => cfg.adapter_layers = Some([0].into_iter().collect()),
            _ => {}
        }
        let bb = Backbone::toy(cfg, seed).map_err(err)?;
        let zero_up = seed % 5 == 0;
        let b = random_bundle(&bb.config, 1, vec![0, 1], 4, seed + 50, zero_up);
        let img = if seed == 19 {
            aesp_core::Image::zeros(bb.config.channels, bb.config.image_size, bb.config.image_size)
        } else {
            random_image(&bb.config, seed + 70)
        };
        let seq = bb.embed(&img, &b).map_err(err)?;
        let out = bb.forward(&seq, &b).map_err(err)?;
        let reference = reference_forward(
            &rows(&seq.to_matrix()),
            &ref_weights(&bb),
            &ref_adapters(&b.params.adapters),
            ref_layout(&bb, 4),
        )
        .map_err(|e| format!("{e:?}"))?;
        let expect: Vec<f64> = reference.into_iter().flatten().collect();
        let got: Vec<f64> = out.all_tokens.iter().copied().collect();
        let r = OracleReport::absolute(&format!("forward case {seed}"), &expect, &got, 1e-10);
        ensure(r.pass, r.to_string())?;
        worst = worst.max(r.max_abs_error);
        cases += 1;
    }
    Ok(format!("{cases} cases, max abs error {worst:.2e}"))
}

fn frozen_and_isolated() -> Outcome {
    let mut cfg = toy_config(std::env::temp_dir());
    cfg.train = TrainConfig {
        epochs: 3,
        ..cfg.train
    };
    let dataset = ingest(&cfg.dataset).map_err(err)?;
    let backbone = cfg.build_backbone().map_err(err)?;
    let before = backbone.checksum();
    let ids: Vec<usize> = (0..dataset.num_classes()).collect();
    let labels = split_tasks(&ids, &cfg.protocol).map_err(err)?;
    ensure(labels.num_tasks() == 5, "expected 5 tasks")?;
    let encoder = cfg.build_encoder().map_err(err)?;
    let projection = Projection::seeded(encoder.dim(), backbone.config.embed_dim, cfg.encoder.projection_seed);
    let names: Vec<Vec<String>> = labels
        .tasks()
        .iter()
        .map(|t| t.iter().map(|&c| dataset.class_names[c].clone()).collect())
        .collect();
    let semantics = build_semantics(encoder.as_ref(), &projection, &names).map_err(err)?;
    let trainer = Trainer::new(&backbone, cfg.method, cfg.train, 0).map_err(err)?;

    let mut emitted: BTreeMap<usize, Vec<u8>> = BTreeMap::new();
    let mut problems = Vec::new();
    let outcome = run_protocol(&trainer, &labels, &dataset, &semantics, PromptPool::new(), |ev| {
        if backbone.checksum() != before {
            problems.push(format!("backbone checksum changed in session {}", ev.report.task_id));
        }
        emitted.insert(ev.bundle.task_id, bundle_bytes(ev.bundle)?);
        Ok(())
    })
    .map_err(err)?;
    ensure(problems.is_empty(), problems.join("; "))?;
    ensure(backbone.checksum() == before, "backbone checksum changed")?;
    for b in outcome.pool.bundles() {
        let now = bundle_bytes(b).map_err(err)?;
        ensure(emitted.get(&b.task_id) == Some(&now), format!("bundle {} changed after its session", b.task_id))?;
    }
    let m = &outcome.oracle_accuracy;
    for t in 1..=5 {
        for i in 1..=t {
            let (a, d) = (m.get(t, i), m.get(i, i));
            ensure(a == d, format!("oracle a[{t}][{i}] = {a:?} differs from a[{i}][{i}] = {d:?}"))?;
        }
    }
    let ff = forgetting(m).map_err(err)?;
    ensure(ff == 0.0, format!("oracle forgetting {ff}"))?;
    Ok(format!("5 sessions, {} bundles unchanged, oracle FF = {ff}", emitted.len()))
}

fn iqkm_correctness() -> Outcome {
    let mut triples = 0;
    for p1 in 1..=5 {
        for p2 in 1..=5 {
            for p3 in 1..=5 {
                let got = aesp_core::iqkm::vote(p1, p2, p3);
                ensure(got == brute_force_vote(p1, p2, p3), format!("vote({p1},{p2},{p3}) = {got}"))?;
                triples += 1;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for n in [2usize, 3, 10, 20] {
        let ln_n = (n as f64).ln();
        let uniform = Array1::from_elem(n, 1.0 / n as f64);
        ensure((entropy(uniform.view()) - ln_n).abs() < 1e-12, format!("uniform entropy for N={n}"))?;
        let mut one_hot = Array1::zeros(n);
        one_hot[n - 1] = 1.0;
        ensure(entropy(one_hot.view()) == 0.0, format!("one-hot entropy for N={n}"))?;
        for _ in 0..200 {
            let raw = Array1::from_shape_fn(n, |_| rng.random_range(0.0..1.0f64).powi(3));
            let p = &raw / raw.sum();
            let h = entropy(p.view());
            ensure((0.0..=ln_n + 1e-12).contains(&h), format!("entropy {h} outside [0, ln {n}]"))?;
        }
    }

    let cfg = BackboneConfig::toy();
    let mut pool = PromptPool::new();
    for t in 1..=5 {
        pool.push(random_bundle(&cfg, t, vec![2 * t - 2, 2 * t - 1], 4, 40 + t as u64, false))
            .map_err(err)?;
    }
    let selector = SelectorConfig::default();
    for i in 0..100 {
        let q = Array1::from_shape_fn(cfg.embed_dim, |_| rng.random_range(-1.0..1.0));
        let base = select_task(q.view(), &pool, &selector).map_err(err)?;
        ensure(
            base.chosen == brute_force_vote(base.p1, base.p2, base.p3),
            format!("query {i}: chosen {} disagrees with the vote", base.chosen),
        )?;
        for s in [1e-3, 0.5, 7.0, 1e3] {
            let scaled = select_task((&q * s).view(), &pool, &selector).map_err(err)?;
            ensure(
                (scaled.p1, scaled.p2, scaled.p3) == (base.p1, base.p2, base.p3),
                format!("query {i}: strategies changed under scale {s}"),
            )?;
        }
    }
    Ok(format!("{triples} triples, entropy bounds, scale invariance on 100 queries"))
}

fn loss_closed_forms() -> Outcome {
    let s = array![1.0, 0.0];
    let with_cos = |c: &[f64]| Array2::from_shape_fn((c.len(), 2), |(i, j)| if j == 0 { c[i] } else { (1.0 - c[i] * c[i]).sqrt() });
    let ind = PairIndicator::new(0, 2).map_err(err)?;
    let cfg = ContrastConfig::default();
    ensure(cfg.alpha == 0.3, "default alpha is not 0.3")?;
    let l = semantic_contrast_loss(s.view(), with_cos(&[0.5, -0.4]).view(), ind, cfg).map_err(err)?;
    ensure((l - 0.31).abs() < 1e-12, format!("contrast case gave {l}"))?;
    let perfect = semantic_contrast_loss(s.view(), with_cos(&[1.0, 0.0]).view(), ind, cfg).map_err(err)?;
    ensure(perfect.abs() < 1e-15, format!("perfect alignment gave {perfect}"))?;

    for n in [2usize, 5, 20] {
        let clf = Classifier {
            weight: Array2::zeros((4, n)),
            bias: Array1::zeros(n),
        };
        let ce = classification_loss(array![0.3, -1.0, 2.0, 0.5].view(), &clf, n - 1).map_err(err)?;
        ensure((ce - (n as f64).ln()).abs() < 1e-14, format!("uniform CE for N={n} gave {ce}"))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let (k, c, e): (f64, f64, f64) = (rng.random_range(0.0..5.0), rng.random_range(0.0..2.0), rng.random_range(0.0..5.0));
        let t = total_loss(k, c, e).map_err(err)?;
        ensure(t == k + c + e, format!("total {t} is not {k} + {c} + {e}"))?;
    }
    Ok("contrast 0.31 and 0, uniform CE = ln N, total = sum".into())
}

fn run_toy(dir: &std::path::Path) -> Result<(RunSummary, String), String> {
    let summary = train(&toy_config(dir)).map_err(err)?;
    let metrics = std::fs::read_to_string(dir.join("seed_0").join("metrics.json")).map_err(err)?;
    Ok((summary, metrics))
}

fn desk_scale(first: &RunSummary, elapsed: Duration, repeat: &Result<(RunSummary, String), String>, metrics: &str) -> Outcome {
    let last = first.mean_last_acc;
    let selection = first.selection_accuracy(IqkmMode::Full);
    ensure(last >= 0.90, format!("Last-acc {last:.4} < 0.90"))?;
    ensure(selection >= 0.90, format!("selection accuracy {selection:.4} < 0.90"))?;
    ensure(elapsed < Duration::from_secs(300), format!("run took {elapsed:?}"))?;
    let (again, again_metrics) = repeat.as_ref().map_err(|e| e.clone())?;
    ensure(again_metrics == metrics, "metrics.json differs between identical runs")?;
    ensure(
        again.mean_last_acc.to_bits() == last.to_bits() && again.mean_avg_acc.to_bits() == first.mean_avg_acc.to_bits(),
        "summary metrics differ between identical runs",
    )?;
    Ok(format!(
        "Last-acc {last:.4}, selection {selection:.4}, Avg-acc {:.4}, {:.1}s, bitwise reproducible",
        first.mean_avg_acc,
        elapsed.as_secs_f64()
    ))
}

fn ablation_direction(summary: &RunSummary) -> Outcome {
    let full = summary.selection_accuracy(IqkmMode::Full);
    let multi = summary.selection_accuracy(IqkmMode::MultiKeyOnly);
    ensure(full >= multi, format!("full {full:.4} < multi-key-only {multi:.4}"))?;
    Ok(format!(
        "full {full:.4} >= multi-key-only {multi:.4} (entropy-only {:.4}, prototype-only {:.4})",
        summary.selection_accuracy(IqkmMode::EntropyOnly),
        summary.selection_accuracy(IqkmMode::PrototypeOnly)
    ))
}

fn metric_formulas() -> Outcome {
    let m = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.8, 0.7]], vec![10, 10]).map_err(err)?;
    let (l, a, f) = (last_acc(&m).map_err(err)?, avg_acc(&m).map_err(err)?, forgetting(&m).map_err(err)?);
    ensure(l == 0.75, format!("Last-acc {l}"))?;
    ensure((a - 0.825).abs() < 1e-15, format!("Avg-acc {a}"))?;
    ensure((f - 0.1).abs() < 1e-15, format!("FF {f}"))?;
    Ok(format!("Last-acc {l}, Avg-acc {a}, FF {f}"))
}

fn report(id: usize, name: &str, outcome: std::thread::Result<Outcome>) -> bool {
    let outcome = outcome.unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    match outcome {
        Ok(detail) => {
            println!("PASS criterion {id} {name}: {detail}");
            true
        }
        Err(detail) => {
            println!("FAIL criterion {id} {name}: {detail}");
            false
        }
    }
}

fn main() {
    let mut ok = true;
    let guarded = |f: fn() -> Outcome| catch_unwind(f);
    ok &= report(1, "gradient correctness", guarded(gradients));
    ok &= report(2, "forward equivalence", guarded(forward_equivalence));
    ok &= report(3, "frozen and isolation invariants", guarded(frozen_and_isolated));
    ok &= report(4, "IQKM correctness", guarded(iqkm_correctness));
    ok &= report(5, "loss closed forms", guarded(loss_closed_forms));

    let dirs = (tempfile::tempdir(), tempfile::tempdir());
    let runs = catch_unwind(AssertUnwindSafe(|| {
        let (a, b) = match &dirs {
            (Ok(a), Ok(b)) => (a.path().join("run"), b.path().join("run")),
            _ => return Err("cannot create temporary directories".to_string()),
        };
        let start = Instant::now();
        let first = run_toy(&a)?;
        let elapsed = start.elapsed();
        Ok((first, elapsed, run_toy(&b)))
    }))
    .unwrap_or_else(|_| Err("desk-scale run panicked".into()));
    match &runs {
        Ok(((summary, metrics), elapsed, repeat)) => {
            ok &= report(6, "desk-scale end-to-end", Ok(desk_scale(summary, *elapsed, repeat, metrics)));
            ok &= report(7, "ablation direction", Ok(ablation_direction(summary)));
        }
        Err(e) => {
            ok &= report(6, "desk-scale end-to-end", Ok(Err(e.clone())));
            ok &= report(7, "ablation direction", Ok(Err(e.clone())));
        }
    }
    ok &= report(8, "metric formulas", guarded(metric_formulas));

    if !ok {
        std::process::exit(1);
    }
}
