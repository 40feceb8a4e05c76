//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::*;
use proptest::prelude::*;
use proptest::test_runner::{Config as RunnerConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsvit::autodiff::Tape;
use tsvit::checkpoint::Checkpoint;
use tsvit::data::{Labels, SitsRecord, SynthConfig};
use tsvit::embedding::{DayIndex, PatchSize, SitsTensor};
use tsvit::model::{ClsMode, InputNorm, PeMode, TsvitConfig, TsvitModel};
use tsvit::tensor::Tensor;
use tsvit::training::{
    evaluate, focal_loss, masked_cross_entropy, train_loop, ConfusionMatrix, Example, LrSchedule,
    TrainConfig, Trainer,
};

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

fn parameter_budget() -> Outcome {
    let keys: Vec<DayIndex> = (0..52).map(|i| 7 * i).collect();
    let cfg = TsvitConfig::default();
    let model = TsvitModel::new(cfg.clone(), &keys, 0).unwrap();
    let n = model.count_parameters();
    let (lo, hi) = (1_360_000, 2_040_000);
    outcome(
        n >= lo && n <= hi && n == cfg.parameter_count(52),
        format!("{n} parameters, allowed [{lo}, {hi}]"),
    )
}

fn schedule_pins() -> Outcome {
    let mut worst = String::new();
    let mut ok = true;
    for spe in [1, 7, 250] {
        let s = LrSchedule::new(10, 1e-3, 5e-6, 100, spe).unwrap();
        let (a, b, c) = (s.lr_at(0), s.lr_at(10 * spe), s.lr_at(s.total_steps() - 1));
        if a != 0.0 || b != 1e-3 || c != 5e-6 {
            ok = false;
            worst = format!("steps/epoch {spe}: {a} {b} {c}");
        }
    }
    outcome(
        ok,
        if ok {
            "lr(0)=0, lr(end of epoch 10)=1e-3, lr(last)=5e-6 for 1, 7 and 250 steps per epoch"
                .into()
        } else {
            worst
        },
    )
}

fn gradient_suite() -> Outcome {
    let (model, store, batch, labels) = gradient_fixture(toy_config(), 1);
    let refs: Vec<_> = batch.iter().collect();
    let r = check_gradients(&model, &store, &refs, &labels, 1e-5, 1e-6);
    outcome(
        r.max_rel < 1e-3 && r.checked == model.count_parameters(),
        format!(
            "{} scalars, max rel err {:.2e} (tol 1e-3), worst {}",
            r.checked, r.max_rel, r.worst
        ),
    )
}

fn factorization_structure() -> Outcome {
    let mut perm_gap = 0f64;
    let mut leaks = 0;
    let mut class_gap = 0f64;
    let calendar: Vec<DayIndex> = (0..365).collect();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = TsvitConfig {
            input_t: 6,
            ..toy_config()
        };
        let mut model = TsvitModel::new(cfg.clone(), &calendar, seed).unwrap();
        scramble(model.params_mut(), 0.3, seed);
        let mut dates: Vec<DayIndex> = rand::seq::index::sample(&mut rng, 365, 6)
            .into_iter()
            .map(|d| d as DayIndex)
            .collect();
        dates.sort_unstable();
        let sits = random_sits(&mut rng, &cfg, &dates);

        let mut perm: Vec<usize> = (0..6).collect();
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng);
        perm_gap = perm_gap.max(time_permutation_gap(&model, &sits, &perm));

        let s = rng.random_range(0..3);
        let (base, shifted) = spatial_outputs_with_stream_shift(&model, &sits, s, 0.5);
        for k in (0..3).filter(|&k| k != s) {
            if stream(&base, k) != stream(&shifted, k) {
                leaks += 1;
            }
        }

        let mut cperm: Vec<usize> = (0..3).collect();
        rand::seq::SliceRandom::shuffle(&mut cperm[..], &mut rng);
        class_gap = class_gap.max(class_permutation_gap(&model, &sits, &cperm));
    }
    outcome(
        perm_gap < 1e-5 && leaks == 0 && class_gap < 1e-5,
        format!(
            "(a) time-permutation max diff {perm_gap:.1e} (tol 1e-5); (b) {leaks} blocked-stream leaks; \
             (c) class-permutation max diff {class_gap:.1e}"
        ),
    )
}

fn masking() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let k = 5;
    let n = 64;
    let logits = Tensor::from_fn(&[n, k], |_| rng.random_range(-4.0f32..4.0));
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..=k)).collect();

    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(logits.clone(), true);
    let loss = masked_cross_entropy(&mut tape, x, &labels, k).unwrap();
    let g = tape.backward(loss).unwrap().get(x).unwrap().clone();
    let background = labels.iter().filter(|&&l| l == k).count();
    let nonzero_bg = labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == k)
        .filter(|(i, _)| g.data()[i * k..(i + 1) * k].iter().any(|&v| v != 0.0))
        .count();

    let fg: Vec<usize> = labels.iter().map(|&l| l % k).collect();
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(logits, false);
    let ce = masked_cross_entropy(&mut tape, x, &fg, k).unwrap();
    let focal = focal_loss(&mut tape, x, &fg, 0.0).unwrap();
    let diff = (tape.value(ce).item().unwrap() - tape.value(focal).item().unwrap()).abs() as f64;

    outcome(
        nonzero_bg == 0 && background > 0 && diff < 1e-7,
        format!("{nonzero_bg}/{background} background rows with non-zero gradient; |focal(γ=0) − CE| = {diff:.1e}"),
    )
}

fn overfit_oracle() -> Outcome {
    let start = Instant::now();
    let synth = SynthConfig {
        level_cue: true,
        ..toy_synth(0)
    };
    let data = synthetic_examples(&synth, 0, 32);
    let mut model = TsvitModel::new(toy_config(), &observed_days(&data), 0).unwrap();
    model
        .set_input_norm(Some(InputNorm::fit(data.iter().map(|e| &e.sits)).unwrap()))
        .unwrap();
    let cfg = TrainConfig {
        batch_size: 2,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, cfg, data.len()).unwrap();
    let mut reached = None;
    let mut best = 0.0f64;
    for epoch in 1..=100 {
        let r = trainer.run_epoch(&data, &[]).unwrap();
        best = best.max(r.overall_accuracy);
        if r.overall_accuracy >= 0.99 {
            reached = Some(epoch);
            break;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    match reached {
        Some(e) => outcome(
            secs < 900.0,
            format!("training OA ≥ 0.99 at epoch {e} ({secs:.1}s)"),
        ),
        None => outcome(
            false,
            format!("best training OA {best:.4} after 100 epochs ({secs:.1}s)"),
        ),
    }
}

fn ablation_direction() -> Outcome {
    let start = Instant::now();
    let synth = SynthConfig {
        num_classes: 6,
        revisit: 5,
        seed: 100,
        ..SynthConfig::default()
    };
    let all = synthetic_examples(&synth, 0, 500);
    let (train, test) = all.split_at(400);
    let days = observed_days(train);
    let norm = InputNorm::fit(train.iter().map(|e| &e.sits)).unwrap();
    let base = TsvitConfig {
        num_classes: 6,
        dim: 16,
        temporal_depth: 1,
        spatial_depth: 1,
        heads: 2,
        patch: PatchSize { t: 1, h: 2, w: 2 },
        input_t: synth.t_max,
        height: synth.height,
        width: synth.width,
        channels: synth.channels,
        ..TsvitConfig::default()
    };
    let run = |cfg: &TsvitConfig| -> f64 {
        let mut total = 0.0;
        for seed in 0..3u64 {
            let mut model = TsvitModel::new(cfg.clone(), &days, seed).unwrap();
            model.set_input_norm(Some(norm.clone())).unwrap();
            let tc = TrainConfig {
                epochs: 30,
                warmup_epochs: 3,
                seed,
                ..TrainConfig::default()
            };
            let mut t = Trainer::new(model, tc, train.len()).unwrap();
            for _ in 0..30 {
                t.run_epoch(train, &[]).unwrap();
            }
            total += evaluate(t.model(), test, 16).unwrap().metrics.mean_iou;
        }
        total / 3.0
    };
    let dated = run(&base);
    let ordinal = run(&TsvitConfig {
        pe_mode: PeMode::Static,
        ..base.clone()
    });
    let single = run(&TsvitConfig {
        cls_mode: ClsMode::Single,
        ..base
    });
    outcome(
        dated >= ordinal && dated >= single,
        format!(
            "test mIoU over 3 seeds: date_lookup {dated:.4} vs static {ordinal:.4}; multi_k {dated:.4} vs single {single:.4} ({:.0}s)",
            start.elapsed().as_secs_f64()
        ),
    )
}

fn record_strategy() -> impl Strategy<Value = SitsRecord> {
    (1usize..5, 1usize..5, 1usize..5, 1usize..4)
        .prop_flat_map(|(t, h, w, c)| {
            (
                proptest::collection::btree_set(any::<u16>(), t),
                proptest::collection::vec(any::<f32>(), t * h * w * c),
                proptest::collection::vec(any::<u16>(), h * w),
                Just((h, w, c)),
            )
        })
        .prop_map(|(dates, raster, labels, (h, w, c))| {
            let dates: Vec<u16> = dates.into_iter().collect();
            let values = Tensor::new(&[dates.len(), h, w, c], raster).unwrap();
            SitsRecord::new(
                SitsTensor::new(values, dates).unwrap(),
                Labels::Pixels(labels),
            )
            .unwrap()
        })
}

fn io_determinism() -> Outcome {
    let mut runner = TestRunner::new_with_rng(
        RunnerConfig {
            failure_persistence: None,
            ..RunnerConfig::with_cases(100)
        },
        proptest::test_runner::TestRng::deterministic_rng(
            proptest::test_runner::RngAlgorithm::ChaCha,
        ),
    );
    let round_trip = runner
        .run(&record_strategy(), |r| {
            let back = SitsRecord::from_bytes(&r.to_bytes()).unwrap();
            prop_assert_eq!(back.to_bytes(), r.to_bytes());
            Ok(())
        })
        .is_ok();

    let data: Vec<Example> = synthetic_examples(&toy_synth(3), 0, 12);
    let days = observed_days(&data);
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 4,
        warmup_epochs: 1,
        seed: 7,
        ..TrainConfig::default()
    };
    let log_of = || {
        let dir = tempfile::tempdir().unwrap();
        let model = TsvitModel::new(toy_config(), &days, 7).unwrap();
        train_loop(model, &data, &[], &cfg, dir.path()).unwrap();
        std::fs::read(dir.path().join("metrics.log")).unwrap()
    };
    let same_logs = log_of() == log_of();

    let fresh = || TsvitModel::new(toy_config(), &days, 7).unwrap();
    let mut straight = Trainer::new(fresh(), cfg.clone(), data.len()).unwrap();
    let a: Vec<_> = (0..4)
        .map(|_| straight.run_epoch(&data, &[]).unwrap())
        .collect();
    let mut first = Trainer::new(fresh(), cfg.clone(), data.len()).unwrap();
    let mut b: Vec<_> = (0..2)
        .map(|_| first.run_epoch(&data, &[]).unwrap())
        .collect();
    let state = Checkpoint::from_bytes(&first.state_checkpoint().to_bytes()).unwrap();
    let mut resumed = Trainer::resume(&state, cfg, data.len()).unwrap();
    b.extend((0..2).map(|_| resumed.run_epoch(&data, &[]).unwrap()));
    let resume_exact = a == b && straight.model().params() == resumed.model().params();

    outcome(
        round_trip && same_logs && resume_exact,
        format!(
            "100-record round trip {}; repeated seeded logs {}; resumed run {}",
            if round_trip {
                "bitwise equal"
            } else {
                "DIFFERS"
            },
            if same_logs { "identical" } else { "DIFFER" },
            if resume_exact {
                "bitwise equal to uninterrupted"
            } else {
                "DIVERGES"
            },
        ),
    )
}

fn metrics_oracle() -> Outcome {
    let m = ConfusionMatrix::from_counts(2, vec![1, 1, 0, 2])
        .unwrap()
        .metrics()
        .unwrap();
    let pass =
        m.overall_accuracy == 0.75 && (m.mean_iou - 0.5833).abs() < 1e-4 && m.mean_accuracy == 0.75;
    outcome(
        pass,
        format!(
            "OA {} mIoU {:.4} mAcc {}",
            m.overall_accuracy, m.mean_iou, m.mean_accuracy
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("parameter budget", parameter_budget),
        ("schedule pins", schedule_pins),
        ("gradient suite", gradient_suite),
        ("factorization structure", factorization_structure),
        ("masking", masking),
        ("overfit oracle", overfit_oracle),
        ("ablation direction", ablation_direction),
        ("io and determinism", io_determinism),
        ("metrics oracle", metrics_oracle),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {}: {} {name}: {}",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
