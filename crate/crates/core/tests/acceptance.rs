//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line. Run with `cargo test --test acceptance -- --nocapture`
//! to see the lines; the assertions carry the same conditions either way.

use std::time::Instant;

use frs_core::data::{split_dataset, synth_generate, BoxCxcywh, LabeledBox, SynthSceneSpec};
use frs_core::detector::{
    evaluate_model, train, Detection, FrsNanoConfig, Sample, TrainConfig,
    UpsamplerKind,
};
use frs_core::dysample::{dysample_forward, fixed_bilinear, DysampleParams, RangeMode};
use frs_core::mcea::{triple_squeeze, BranchId};
use frs_core::metrics::{ap_from_matches, ap_thresholds, evaluate, match_predictions};
use frs_core::tape::Tape;
use frs_core::tensor::Tensor;
use frs_core::verify;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(name: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {name}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "acceptance criterion `{name}` failed: {detail}");
}

/// Gradient suite: every differentiable operator against central finite
/// differences, 50 seeded instances each, 1e-4 relative tolerance, within
/// the 2-minute budget.
#[test]
fn gradient_suite() {
    let started = Instant::now();
    let reports = verify::run_gradient_suite(50, 1e-4).expect("suite runs");
    let elapsed = started.elapsed();
    for r in &reports {
        println!("  {r}");
    }
    let all_pass = reports.iter().all(|r| r.pass);
    let within_budget = elapsed.as_secs_f64() < 120.0;
    report(
        "gradient_suite",
        all_pass && within_budget,
        &format!(
            "{} ops x 50 instances, worst {:.2e}, {:.1}s",
            reports.len(),
            reports
                .iter()
                .map(|r| r.max_rel_err)
                .fold(0.0f64, f64::max),
            elapsed.as_secs_f64()
        ),
    );
}

/// Oracle equivalence: attention forward, bilinear resampling, and AP against
/// their straight-line reimplementations.
#[test]
fn oracle_equivalence() {
    let reports = verify::run_oracle_suite(50).expect("suite runs");
    for r in &reports {
        println!("  {r}");
    }
    let all_pass = reports.iter().all(|r| r.pass);
    report(
        "oracle_equivalence",
        all_pass,
        &format!(
            "3 oracles x 50 instances, worst {:.2e}",
            reports
                .iter()
                .map(|r| r.max_abs_err)
                .fold(0.0f64, f64::max)
        ),
    );
}

/// Pooling-blend algebra: with equal weights the blend factors, and constant
/// input exercises the zero-variance branch exactly.
#[test]
fn pooling_blend_algebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let tape = Tape::new();
        let f = tape.leaf(Tensor::from_fn(&[3, 4, 5], |_| rng.random_range(-2.0..2.0)));
        let latent = rng.random_range(-2.0..2.0);
        let w = 1.0 / (1.0 + (-latent as f64).exp());
        let latents = tape.leaf(Tensor::full(&[3], latent));
        let got = triple_squeeze(f, latents).unwrap().value();

        let avg = f.reduce_mean_tail2().unwrap().value();
        let std = f.reduce_std_tail2().unwrap().value();
        let max = f.reduce_max_tail2().unwrap().value();
        for i in 0..got.len() {
            let expect = (1.0 / 3.0 + w) * (avg.data()[i] + std.data()[i] + max.data()[i]);
            worst = worst.max((got.data()[i] - expect).abs());
        }
    }

    // constant input c: avg = max = c, std exactly 0 => 2c/3 + (α+γ)c
    let c = 1.25f64;
    let tape = Tape::new();
    let f = tape.leaf(Tensor::full(&[2, 3, 4], c));
    let std_exact = f.reduce_std_tail2().unwrap().value();
    let zero_std = std_exact.data().iter().all(|&v| v == 0.0);
    let latents = tape.leaf(Tensor::zeros(&[3]));
    let got = triple_squeeze(f, latents).unwrap().value();
    let expect = 2.0 * c / 3.0 + (0.5 + 0.5) * c;
    let const_ok = got.data().iter().all(|&v| (v - expect).abs() < 1e-12);

    report(
        "eq8_algebra",
        worst < 1e-12 && zero_std && const_ok,
        &format!("equal-weight worst {worst:.2e}, constant-input std exactly 0: {zero_std}"),
    );
}

/// Zero-initialized dynamic upsampling reduces to fixed bilinear; pixel
/// shuffle round-trips bit-exactly.
#[test]
fn dysample_reduction() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let c = 4 * rng.random_range(1..3usize);
        let h = rng.random_range(2..7usize);
        let w = rng.random_range(2..7usize);
        let x = Tensor::from_fn(&[c, h, w], |_| rng.random_range(-2.0..2.0));
        for mode in [RangeMode::Static, RangeMode::Dynamic] {
            let p = DysampleParams::defaults(c, mode).unwrap();
            let dy = dysample_forward(&x, &p).unwrap();
            let fb = fixed_bilinear(&x, 2).unwrap();
            for i in 0..dy.len() {
                worst = worst.max((dy.data()[i] - fb.data()[i]).abs());
            }
        }
    }

    let mut shuffle_exact = true;
    for _ in 0..20 {
        let s = rng.random_range(1..4usize);
        let c = s * s * rng.random_range(1..4usize);
        let h = rng.random_range(1..5usize);
        let w = rng.random_range(1..5usize);
        let x = Tensor::from_fn(&[c, h, w], |_| rng.random_range(-2.0..2.0));
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        let round = v.pixel_shuffle(s).unwrap().pixel_unshuffle(s).unwrap().value();
        shuffle_exact &= round == x;
    }

    report(
        "dysample_reduction",
        worst < 1e-12 && shuffle_exact,
        &format!("zero-init vs bilinear worst {worst:.2e}, shuffle round-trip exact: {shuffle_exact}"),
    );
}

/// The sigmoid reparameterization keeps every pooling weight strictly inside
/// (0,1) through real training.
#[test]
fn constraint_invariant_after_training() {
    let cfg = FrsNanoConfig {
        input_size: 32,
        cells: 4,
        classes: 4,
        use_mcea: true,
        ..Default::default()
    };
    // 500 steps: 10 epochs x (100 images / batch 2) = 500 updates
    let tc = TrainConfig {
        epochs: 10,
        batch_size: 2,
        seed: 3,
        ..Default::default()
    };
    let train_set: Vec<Sample> = (0..100)
        .map(|i| {
            let spec = SynthSceneSpec {
                image_size: 32,
                small_targets: 2,
                occluded_pairs: 1,
                smoke_blobs: 1,
                noise_level: 0.02,
                num_classes: 4,
                seed: 900 + i,
            };
            let (image, ann) = synth_generate(&spec).unwrap();
            Sample {
                image,
                boxes: ann.boxes,
            }
        })
        .collect();

    let result = train(&cfg, &tc, &train_set, &[], |_, _| {}).expect("training runs");
    let steps = tc.epochs * (train_set.len() / tc.batch_size);
    assert!(steps >= 500, "need at least 500 steps, got {steps}");

    let mut all_in_bounds = true;
    let mut worst_margin = f64::INFINITY;
    for block in [&result.params.stage1.mcea, &result.params.stage2.mcea] {
        let m = block.as_ref().expect("mcea enabled");
        for b in BranchId::ALL {
            let (alpha, beta, gamma) = m.branch(b).squeeze.effective_weights();
            for v in [alpha, beta, gamma] {
                all_in_bounds &= v > 0.0 && v < 1.0 && v.is_finite();
                worst_margin = worst_margin.min(v.min(1.0 - v));
            }
        }
    }
    report(
        "constraint_invariant",
        all_in_bounds,
        &format!("{steps} steps, all alpha/beta/gamma in (0,1), closest margin {worst_margin:.3e}"),
    );
}

/// Metric sanity: the exact IoU-0.60 case, perfect predictions, and AP
/// monotonicity over thresholds.
#[test]
fn metric_sanity() {
    // exact-dyadic IoU 0.60 single box: mAP50 = 1, mAP50-95 = 0.3
    let gts = vec![vec![LabeledBox {
        class_id: 0,
        bbox: BoxCxcywh::new(0.3125, 0.5, 0.625, 0.5),
    }]];
    let preds = vec![vec![Detection {
        class_id: 0,
        confidence: 0.9,
        bbox: BoxCxcywh::new(0.1875, 0.5, 0.375, 0.5),
    }]];
    let r = evaluate(&preds, &gts, 1).unwrap();
    let iou_case_ok = r.map50 == 1.0 && (r.map50_95 - 0.3).abs() < 1e-12;

    // perfect predictions: all four metrics are 1
    let gts2 = vec![
        vec![
            LabeledBox {
                class_id: 0,
                bbox: BoxCxcywh::new(0.3, 0.3, 0.2, 0.2),
            },
            LabeledBox {
                class_id: 1,
                bbox: BoxCxcywh::new(0.7, 0.7, 0.2, 0.2),
            },
        ],
        vec![LabeledBox {
            class_id: 2,
            bbox: BoxCxcywh::new(0.5, 0.5, 0.3, 0.4),
        }],
    ];
    let preds2: Vec<Vec<Detection>> = gts2
        .iter()
        .map(|img| {
            img.iter()
                .map(|g| Detection {
                    class_id: g.class_id,
                    confidence: 0.9,
                    bbox: g.bbox,
                })
                .collect()
        })
        .collect();
    let r2 = evaluate(&preds2, &gts2, 3).unwrap();
    let perfect_ok =
        r2.map50 == 1.0 && r2.map50_95 == 1.0 && r2.precision == 1.0 && r2.recall == 1.0;

    // AP@t non-increasing in t on 100 random instances
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut monotone = true;
    for _ in 0..100 {
        let n_gt = rng.random_range(1..5usize);
        let gts: Vec<LabeledBox> = (0..n_gt)
            .map(|_| LabeledBox {
                class_id: 0,
                bbox: BoxCxcywh::new(
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.1..0.3),
                    rng.random_range(0.1..0.3),
                ),
            })
            .collect();
        let preds: Vec<Detection> = (0..rng.random_range(1..6usize))
            .map(|_| {
                let base = gts[rng.random_range(0..n_gt)].bbox;
                Detection {
                    class_id: 0,
                    confidence: rng.random_range(0.1..1.0),
                    bbox: BoxCxcywh::new(
                        base.cx + rng.random_range(-0.08..0.08),
                        base.cy + rng.random_range(-0.08..0.08),
                        (base.w + rng.random_range(-0.08..0.08)).max(0.02),
                        (base.h + rng.random_range(-0.08..0.08)).max(0.02),
                    ),
                }
            })
            .collect();
        let confs: Vec<f64> = preds.iter().map(|p| p.confidence).collect();
        let mut last = f64::INFINITY;
        for t in ap_thresholds() {
            let flags = match_predictions(&preds, &gts, t).unwrap();
            let ap = ap_from_matches(&flags, &confs, n_gt);
            monotone &= ap <= last + 1e-12;
            last = ap;
        }
    }

    report(
        "metric_sanity",
        iou_case_ok && perfect_ok && monotone,
        &format!(
            "IoU-0.60 case mAP50-95 {:.6}, perfect metrics all 1: {perfect_ok}, AP monotone: {monotone}",
            r.map50_95
        ),
    );
}

/// Identical (config, seed) must reproduce training logs and evaluation
/// reports byte for byte.
#[test]
fn determinism() {
    let cfg = FrsNanoConfig {
        input_size: 32,
        cells: 4,
        classes: 4,
        use_mcea: true,
        upsampler: UpsamplerKind::Dysample,
        ..Default::default()
    };
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed: 77,
        ..Default::default()
    };
    let make_set = |base: u64, n: usize| -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let spec = SynthSceneSpec {
                    image_size: 32,
                    small_targets: 2,
                    occluded_pairs: 1,
                    smoke_blobs: 1,
                    noise_level: 0.02,
                    num_classes: 4,
                    seed: base + i as u64,
                };
                let (image, ann) = synth_generate(&spec).unwrap();
                Sample {
                    image,
                    boxes: ann.boxes,
                }
            })
            .collect()
    };
    let train_set = make_set(5000, 12);
    let val_set = make_set(6000, 4);

    let run = || {
        let mut log_text = String::new();
        let result = train(&cfg, &tc, &train_set, &val_set, |e, _| {
            log_text.push_str(&e.to_line());
            log_text.push('\n');
        })
        .unwrap();
        let eval = evaluate_model(&cfg, &result.params, &val_set, 0.05, 0.5).unwrap();
        (log_text, eval.to_kv_text())
    };
    let (log_a, eval_a) = run();
    let (log_b, eval_b) = run();
    report(
        "determinism",
        log_a == log_b && eval_a == eval_b,
        &format!("loss log {} bytes, eval report {} bytes, both byte-identical", log_a.len(), eval_a.len()),
    );
}

/// Split arithmetic on the full dataset population size.
#[test]
fn split_arithmetic() {
    let ids: Vec<u32> = (0..15_980).collect();
    let (tr, va, te) = split_dataset(&ids, 1).unwrap();
    report(
        "split_arithmetic",
        tr.len() == 12_784 && va.len() == 1_598 && te.len() == 1_598,
        &format!("{}/{}/{}", tr.len(), va.len(), te.len()),
    );
}

/// Directional desk-scale ablation: on seeded synthetic datasets
/// (600 train / 100 val at 96×96, heavy small-object and occlusion
/// settings), the median validation mAP50 over 5 seeds of the attention
/// variant and of the attention+dynamic-upsampling variant must not fall
/// below the baseline. This checks the sign of the improvements, not their
/// magnitude, inside a one-hour budget.
#[test]
fn directional_ablation() {
    let started = Instant::now();
    let seeds: Vec<u64> = vec![11, 22, 33, 44, 55];

    let dataset = |seed: u64| -> (Vec<Sample>, Vec<Sample>) {
        let gen = |base: u64, n: usize| -> Vec<Sample> {
            (0..n)
                .map(|i| {
                    let spec = SynthSceneSpec {
                        image_size: 96,
                        small_targets: 6,
                        occluded_pairs: 2,
                        smoke_blobs: 3,
                        noise_level: 0.06,
                        num_classes: 8,
                        seed: base + i as u64,
                    };
                    let (image, ann) = synth_generate(&spec).unwrap();
                    Sample {
                        image,
                        boxes: ann.boxes,
                    }
                })
                .collect()
        };
        (gen(seed * 1_000_000, 600), gen(seed * 1_000_000 + 500_000, 100))
    };

    let variant = |use_mcea: bool, dysample: bool| FrsNanoConfig {
        use_mcea,
        upsampler: if dysample {
            UpsamplerKind::Dysample
        } else {
            UpsamplerKind::FixedBilinear
        },
        ..Default::default()
    };

    let run = |cfg: &FrsNanoConfig, seed: u64, train_set: &[Sample], val_set: &[Sample]| -> f64 {
        let tc = TrainConfig {
            epochs: ABLATION_EPOCHS,
            batch_size: 8,
            seed,
            ..Default::default()
        };
        // best validation score over the late epochs (early epochs never
        // win, and skipping their evaluations keeps the suite inside the
        // runtime budget)
        let mut best = 0.0f64;
        train(cfg, &tc, train_set, &[], |entry, params| {
            if entry.epoch + 9 >= ABLATION_EPOCHS {
                let score = evaluate_model(
                    cfg,
                    params,
                    val_set,
                    frs_core::detector::EVAL_CONF_THRESHOLD,
                    frs_core::detector::EVAL_NMS_IOU,
                )
                .expect("evaluation runs")
                .map50;
                best = best.max(score);
            }
        })
        .expect("training runs");
        best
    };

    let mut base_scores = Vec::new();
    let mut mcea_deltas = Vec::new();
    let mut both_deltas = Vec::new();
    for &seed in &seeds {
        let (train_set, val_set) = dataset(seed);
        let base = run(&variant(false, false), seed, &train_set, &val_set);
        let mcea = run(&variant(true, false), seed, &train_set, &val_set);
        let both = run(&variant(true, true), seed, &train_set, &val_set);
        println!(
            "  seed {seed}: baseline {base:.4}  +attention {mcea:.4} (d {:+.4})  +attention+dysample {both:.4} (d {:+.4})",
            mcea - base,
            both - base
        );
        base_scores.push(base);
        mcea_deltas.push(mcea - base);
        both_deltas.push(both - base);
    }

    let median = |v: &[f64]| -> f64 {
        let mut s = v.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        s[s.len() / 2]
    };
    let med_mcea = median(&mcea_deltas);
    let med_both = median(&both_deltas);
    let elapsed = started.elapsed();
    let within_budget = elapsed.as_secs_f64() < 3600.0;
    report(
        "directional_ablation",
        med_mcea >= 0.0 && med_both >= 0.0 && within_budget,
        &format!(
            "median baseline {:.4}, median delta +attention {med_mcea:+.4}, +attention+dysample {med_both:+.4}, {:.0}s",
            median(&base_scores),
            elapsed.as_secs_f64()
        ),
    );
}

const ABLATION_EPOCHS: usize = 18;
