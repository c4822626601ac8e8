//! End-to-end acceptance gate for the whole crate. One test per criterion;
//! the harness line per test is the pass/fail verdict, and each test prints
//! the numbers it judged (visible with `-- --show-output`, or on failure).
//!
//! Reference figures used below (parameter totals, FLOP totals, one metric
//! table row) are the published comparison-table values for this
//! architecture family; where our counts disagree with a published figure
//! the test says so and pins the measured value instead of faking agreement.

use std::fs;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use plunet::analysis::{compare_ps_vs_aspp, count_flops, count_params};
use plunet::arch::{ArchConfig, Model, Variant};
use plunet::blocks::{Mode, Session};
use plunet::codec::load_checkpoint;
use plunet::data::{self, SplitSpec};
use plunet::gradcheck;
use plunet::metrics::{confusion, metrics};
use plunet::tensor::{dims, Tensor};
use plunet::train::{self, DataSource, TrainConfig, TrainOutcome};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ALL_VARIANTS: [Variant; 4] = [
    Variant::Unet,
    Variant::Lunet,
    Variant::Punet,
    Variant::Plunet,
];

#[test]
fn c1_gradients_match_central_differences_on_every_target() {
    let start = Instant::now();
    let reports = gradcheck::check_all().expect("gradcheck suite runs");
    let secs = start.elapsed().as_secs_f64();

    assert_eq!(reports.len(), 19, "14 primitive ops + 5 composite blocks");
    let mut worst = 0.0f64;
    for r in &reports {
        worst = worst.max(r.max_rel_err);
        assert!(
            r.passed,
            "{} max rel err {:.3e} exceeds tolerance {:.1e}",
            r.target, r.max_rel_err, r.tolerance
        );
    }
    assert!(
        secs < 120.0,
        "gradcheck --all took {secs:.1}s, budget is 120s"
    );
    println!(
        "acceptance 1: PASS  all 19 gradcheck targets within 1e-5 (worst {worst:.3e}), {secs:.1}s"
    );
}

#[test]
fn c2_metrics_match_a_double_loop_oracle_and_the_f1_js_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let d = dims(1, 1, 16, 16);
    let mut worst_identity = 0.0f64;

    for pair in 0..1000 {
        let pred: Vec<f64> = (0..d.count())
            .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
            .collect();
        let gt: Vec<f64> = (0..d.count())
            .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
            .collect();

        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for row in 0..16usize {
            for col in 0..16usize {
                let i = row * 16 + col;
                match (pred[i] == 1.0, gt[i] == 1.0) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => tn += 1,
                }
            }
        }
        let sr = tp + fp;
        let gt_count = tp + fn_;
        let oracle_pc = if sr == 0 { 0.0 } else { tp as f64 / sr as f64 };
        let oracle_se = if gt_count == 0 {
            0.0
        } else {
            tp as f64 / gt_count as f64
        };
        let oracle_f1 = 2.0 * tp as f64 / (gt_count + sr) as f64;
        let oracle_js = tp as f64 / (tp + fp + fn_) as f64;

        let pt = Tensor::from_vec(d, pred).unwrap();
        let gtt = Tensor::from_vec(d, gt).unwrap();
        let counts = confusion(&pt, &gtt).unwrap();
        assert_eq!(
            (counts.tp, counts.fp, counts.fn_, counts.tn),
            (tp, fp, fn_, tn),
            "confusion counts diverge from the oracle on pair {pair}"
        );
        let m = metrics(counts);
        assert_eq!(m.pc, oracle_pc, "pc differs on pair {pair}");
        assert_eq!(m.se, oracle_se, "se differs on pair {pair}");
        assert_eq!(m.f1, oracle_f1, "f1 differs on pair {pair}");
        assert_eq!(m.js, oracle_js, "js differs on pair {pair}");

        let implied = 2.0 * m.js / (1.0 + m.js);
        worst_identity = worst_identity.max((m.f1 - implied).abs());
    }
    assert!(
        worst_identity <= 1e-12,
        "F1 == 2*JS/(1+JS) violated by {worst_identity:.3e}"
    );

    // The published comparison table lists DoubleUNet on CVC-ClinicDB with
    // F1 = 0.8920 and JS = 0.8249. Those two numbers cannot both be right:
    // the identity implies F1 = 0.9040 from that JS. Our implementation
    // enforces the identity; the table row is recorded here as inconsistent.
    let published_f1 = 0.8920f64;
    let published_js = 0.8249f64;
    let implied_f1 = 2.0 * published_js / (1.0 + published_js);
    assert!(
        (published_f1 - implied_f1).abs() > 5e-3,
        "the DoubleUNet CVC row would satisfy the identity now; drop this note"
    );
    println!(
        "acceptance 2: PASS  1000 mask pairs exact vs oracle, identity gap {worst_identity:.1e}; \
         published DoubleUNet CVC row (F1 {published_f1}, JS {published_js}) violates the \
         identity (implied F1 {implied_f1:.4}) - inconsistency in the source table, documented"
    );
}

#[test]
fn c3_parameter_totals_sit_near_published_and_match_frozen_goldens() {
    let unet = count_params(&Model::preset(Variant::Unet)).unwrap().total;
    let plunet = count_params(&Model::preset(Variant::Plunet)).unwrap().total;

    let unet_ref = 34.53e6;
    let plunet_ref = 6.22e6;
    let unet_dev = unet as f64 / unet_ref - 1.0;
    let plunet_dev = plunet as f64 / plunet_ref - 1.0;
    assert!(
        unet_dev.abs() <= 0.20,
        "unet params {unet} deviate {:.1}% from {unet_ref}",
        unet_dev * 100.0
    );
    assert!(
        plunet_dev.abs() <= 0.20,
        "plunet params {plunet} deviate {:.1}% from {plunet_ref}",
        plunet_dev * 100.0
    );

    assert_eq!(unet, 31_042_561, "frozen unet parameter total moved");
    assert_eq!(plunet, 6_524_185, "frozen plunet parameter total moved");
    println!(
        "acceptance 3: PASS  unet {unet} ({:+.1}% of 34.53M), plunet {plunet} ({:+.1}% of 6.22M); \
         goldens frozen",
        unet_dev * 100.0,
        plunet_dev * 100.0
    );
}

#[test]
fn c4_flop_totals_scale_with_input_area_for_every_preset() {
    let small = dims(1, 3, 96, 96);
    let medium = dims(1, 3, 224, 224);
    let large = dims(1, 3, 384, 288);
    let medium_expect = (224.0 * 224.0) / (96.0 * 96.0);
    let large_expect = (384.0 * 288.0) / (96.0 * 96.0);

    let mut summary = String::new();
    for variant in ALL_VARIANTS {
        let model = Model::preset(variant);
        let base = count_flops(&model, small).unwrap().totals.flops as f64;
        let med = count_flops(&model, medium).unwrap().totals.flops as f64;
        let big = count_flops(&model, large).unwrap().totals.flops as f64;
        let r_med = med / base;
        let r_big = big / base;
        assert!(
            (r_med / medium_expect - 1.0).abs() <= 0.01,
            "{}: 224x224/96x96 flop ratio {r_med:.4}, expected {medium_expect:.4} +-1%",
            variant.name()
        );
        assert!(
            (r_big / large_expect - 1.0).abs() <= 0.01,
            "{}: 384x288/96x96 flop ratio {r_big:.4}, expected {large_expect:.4} +-1%",
            variant.name()
        );
        summary.push_str(&format!(" {} {r_med:.3}/{r_big:.3}", variant.name()));
    }
    println!(
        "acceptance 4: PASS  flop ratios vs 96x96 (want {medium_expect:.3}/{large_expect:.3}):{summary}"
    );
}

#[test]
fn c5_flop_absolutes_against_published_totals() {
    let unet = count_flops(&Model::preset(Variant::Unet), dims(1, 3, 96, 96))
        .unwrap()
        .totals
        .flops;
    let plunet = count_flops(&Model::preset(Variant::Plunet), dims(1, 3, 96, 96))
        .unwrap()
        .totals
        .flops;

    let unet_ref = 9.21e9;
    let plunet_ref = 4.99e9;
    let unet_factor = unet as f64 / unet_ref;
    let plunet_factor = plunet as f64 / plunet_ref;

    let in_band = |f: f64| f >= 1.0 / 1.5 && f <= 1.5;
    assert!(
        in_band(unet_factor),
        "unet {unet} flops vs {unet_ref} is factor {unet_factor:.3}, outside [1/1.5, 1.5]"
    );
    assert_eq!(unet, 13_557_178_368, "frozen unet flop total moved");
    assert_eq!(plunet, 11_410_697_688, "frozen plunet flop total moved");

    // Under the 2*MACs convention this counter uses, the plunet preset does
    // not land within factor 1.5 of the published 4.99G: it measures 11.41G,
    // factor 2.29. Halving it (a 1*MAC count) gives 5.71G, factor 1.14,
    // squarely in band, so the published number is only consistent with a
    // multiply-accumulate count. That limitation is exactly the convention
    // caveat this criterion carries; the honest numbers are printed and the
    // two assertions below pin the analysis so it cannot rot silently.
    assert!(
        !in_band(plunet_factor),
        "plunet now lands in band under 2*MACs; update the convention note"
    );
    assert!(
        in_band(plunet_factor / 2.0),
        "plunet is out of band even as a 1*MAC count; the convention note no longer explains it"
    );

    println!(
        "acceptance 5: unet 13557178368 vs 9.21e9 -> factor {unet_factor:.3}, in band: PASS; \
         plunet 11410697688 vs 4.99e9 -> factor {plunet_factor:.3}, out of band under 2*MACs \
         (as a 1*MAC count: factor {:.3}, in band) - documented convention limitation",
        plunet_factor / 2.0
    );
}

#[test]
fn c6_separable_pyramid_cuts_parameters_by_a_mid_single_digit_factor() {
    let cmp = compare_ps_vs_aspp(256, 512).unwrap();
    assert!(
        cmp.module_ratio >= 3.0 && cmp.module_ratio <= 9.0,
        "module ratio {:.3} outside [3, 9]",
        cmp.module_ratio
    );
    println!(
        "acceptance 6: PASS  dense pyramid {} params vs separable {} params, \
         module ratio {:.3} (branch ratio {:.3})",
        cmp.aspp_params, cmp.ps_params, cmp.module_ratio, cmp.branch_ratio
    );
}

/// Reduced-width PLU-Net used by the training criteria: same topology as the
/// preset (depth 3, LS blocks, separable-pyramid bottleneck), widths cut to
/// [8, 16, 32] with a 64-wide bottleneck so two full runs fit the budget.
fn desk_arch() -> ArchConfig {
    let mut cfg = ArchConfig::preset(Variant::Plunet);
    cfg.widths = vec![8, 16, 32];
    cfg.bottleneck_width = 64;
    cfg.se_reduction = 4;
    cfg
}

fn desk_config(dir: &Path) -> TrainConfig {
    TrainConfig {
        arch: desk_arch(),
        epochs: 30,
        batch_size: 4,
        lr: 3e-4,
        beta1: 0.5,
        beta2: 0.999,
        eps_adam: 1e-8,
        seed: 42,
        threshold: 0.5,
        data: DataSource::Synth {
            count: 200,
            height: 64,
            width: 64,
            seed: 42,
        },
        split: SplitSpec::new(42),
        checkpoint_dir: dir.to_path_buf(),
    }
}

struct DeskRuns {
    _root: tempfile::TempDir,
    first: TrainOutcome,
    second: TrainOutcome,
    first_secs: f64,
}

fn desk_runs() -> &'static DeskRuns {
    static RUNS: OnceLock<DeskRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let root = tempfile::tempdir().expect("tempdir");
        let start = Instant::now();
        let first =
            train::train::<f32>(&desk_config(&root.path().join("a")), None).expect("first run");
        let first_secs = start.elapsed().as_secs_f64();
        let second =
            train::train::<f32>(&desk_config(&root.path().join("b")), None).expect("second run");
        DeskRuns {
            _root: root,
            first,
            second,
            first_secs,
        }
    })
}

#[test]
fn c7_reduced_width_plunet_learns_the_synthetic_task_in_budget() {
    let runs = desk_runs();
    assert!(
        runs.first_secs <= 1800.0,
        "training took {:.0}s, budget is 1800s",
        runs.first_secs
    );
    assert!(runs.first.records.len() <= 30);

    let samples = data::synth_generate::<f32>(200, 64, 64, 42).unwrap();
    let (_, _, test) = data::split(samples, &SplitSpec::new(42)).unwrap();
    let ckpt = load_checkpoint::<f32>(&runs.first.best_path).unwrap();
    let report = train::evaluate(&ckpt, &test, 0.5).unwrap();

    assert!(
        report.f1 >= 0.90,
        "test-split F1 {:.4} below 0.90",
        report.f1
    );
    assert!(
        report.js >= 0.82,
        "test-split JS {:.4} below 0.82",
        report.js
    );
    println!(
        "acceptance 7: PASS  widths [8,16,32] plunet, 30 epochs in {:.0}s, test split \
         F1 {:.4} (>=0.90) JS {:.4} (>=0.82), best epoch {}",
        runs.first_secs, report.f1, report.js, runs.first.best_epoch
    );
}

#[test]
fn c8_identical_seeds_give_byte_identical_logs_and_checkpoints() {
    let runs = desk_runs();
    assert_eq!(runs.first.records, runs.second.records);
    for (a, b, what) in [
        (&runs.first.log_path, &runs.second.log_path, "train_log.jsonl"),
        (&runs.first.last_path, &runs.second.last_path, "last.pluw"),
        (&runs.first.best_path, &runs.second.best_path, "best.pluw"),
    ] {
        let ba = fs::read(a).unwrap();
        let bb = fs::read(b).unwrap();
        assert!(ba == bb, "{what} differs between identically seeded runs");
    }
    println!(
        "acceptance 8: PASS  two seed-42 runs byte-identical: train_log.jsonl, last.pluw, best.pluw"
    );
}

#[test]
fn c9_presets_forward_at_three_sizes_and_plunet_has_the_reduced_topology() {
    let sizes = [(96usize, 96usize), (224, 224), (384, 288)];
    for variant in ALL_VARIANTS {
        let model = Model::preset(variant);
        let mut params = model.init_params::<f32>(1).unwrap();
        for (h, w) in sizes {
            let image = data::synth_generate::<f32>(1, h, w, 7).unwrap().remove(0).image;
            assert_eq!(image.dims(), dims(1, 3, h, w));
            let probs = model.forward_probs(&mut params, &image).unwrap();
            assert_eq!(
                probs.dims(),
                dims(1, 1, h, w),
                "{} at {h}x{w}: mask spatial size differs from the input",
                variant.name()
            );
            assert!(
                probs.data().iter().all(|&p| p > 0.0 && p < 1.0),
                "{} at {h}x{w}: probabilities left (0,1)",
                variant.name()
            );
        }
    }

    let model = Model::preset(Variant::Plunet);
    let mut params = model.init_params::<f32>(1).unwrap();
    let image = data::synth_generate::<f32>(1, 96, 96, 7).unwrap().remove(0).image;
    let (pools, ups) = {
        let mut sess = Session::new(&mut params, Mode::Train, true);
        model.forward(&mut sess, &image).unwrap();
        let kinds = sess.tape.op_kinds();
        (
            kinds.iter().filter(|k| **k == "maxpool2d").count(),
            kinds.iter().filter(|k| **k == "conv_transpose2d").count(),
        )
    };
    assert_eq!(pools, 3, "plunet should pool exactly three times");
    assert_eq!(ups, 3, "plunet should upsample exactly three times");
    for d in [1usize, 6, 12, 18] {
        assert!(
            params.contains(&format!("bottleneck.branch_d{d}.dw.w")),
            "plunet bottleneck is missing the separable dilation-{d} branch"
        );
    }
    println!(
        "acceptance 9: PASS  4 presets x 3 input sizes forward to same-size masks in (0,1); \
         plunet: 3 pools, 3 ups, separable-pyramid bottleneck"
    );
}
