//! Acceptance suite: one PASS/FAIL line per primary criterion.
//!
//! Runs as a plain binary so the lines always reach the test log; exits
//! non-zero when any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use cac_core::bench::{evaluate, Confusion, EvalOptions, HardSplitConfig, PredictionRecord};
use cac_core::codec::ViolationCode;
use cac_core::domain::SaliencyLabel;
use cac_core::grpo::{
    clipped_surrogate, group_advantages, kl_penalty, kl_term, unclipped_surrogate, GrpoConfig, RolloutGroup,
    TokenRatioStream,
};
use cac_core::orchestrator::{crop_window, run_two_turn, score_rollout_group, SamplingConfig};
use cac_core::synth::fixtures::{confusion_fixture, hard_split_fixture, HARD_SPLIT_HITS, MAIN_TABLE_PLAN};
use cac_core::synth::judge::{scripted_judge, JudgeScript, MalformedMode};
use cac_core::synth::{balanced_corpus, generate_video, SynthSpec};
use cac_core::{
    aggregate_reward, sample_frames, AnomalyAnnotation, AnomalyType, BBox, Fps, FrameSpan, GroundTruth, ParseMode,
    RewardWeights, RolloutRecord, Status, TurnKind, TurnOutcome, VideoDescriptor,
};
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(got: f64, want: f64, tol: f64, what: &str) -> Result<(), String> {
    ensure((got - want).abs() <= tol, || format!("{what}: got {got}, want {want} ± {tol:e}"))
}

fn main_table() -> Outcome {
    let start = Instant::now();
    let (corpus, preds) = confusion_fixture(2024, MAIN_TABLE_PLAN);
    let r = evaluate(&preds, &corpus, &EvalOptions::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(r.counts == Confusion { tp: 455, fn_: 45, tn: 362, fp: 138 }, || format!("counts {:?}", r.counts))?;
    let rows = [
        (r.anomalous.recall, 0.910, "anomalous recall"),
        (r.anomalous.precision, 0.767, "anomalous precision"),
        (r.anomalous.f1, 0.833, "anomalous F1"),
        (r.normal.recall, 0.724, "normal recall"),
        (r.normal.precision, 0.889, "normal precision"),
        (r.normal.f1, 0.798, "normal F1"),
        (r.accuracy, 0.817, "accuracy"),
    ];
    for (got, want, what) in rows {
        within(got, want, 5e-4, what)?;
    }
    ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{:.3}/{:.3}/{:.3} {:.3}/{:.3}/{:.3} acc {:.3} in {elapsed:.0?}",
        r.anomalous.recall,
        r.anomalous.precision,
        r.anomalous.f1,
        r.normal.recall,
        r.normal.precision,
        r.normal.f1,
        r.accuracy
    ))
}

fn hard_split() -> Outcome {
    let (corpus, preds) = hard_split_fixture(2024, 100, HARD_SPLIT_HITS);
    ensure(corpus.len() == 400, || format!("{} videos", corpus.len()))?;
    let opts = EvalOptions { hard_split: HardSplitConfig::default(), type_matched: false };
    let r = evaluate(&preds, &corpus, &opts).map_err(|e| e.to_string())?;
    let buckets = r.hard_split.ok_or("no hard split in report")?;
    let recalls: Vec<f64> = buckets.iter().map(|b| b.recall).collect();
    let totals: Vec<usize> = buckets.iter().map(|b| b.total).collect();
    ensure(totals == vec![100; 4], || format!("bucket sizes {totals:?}"))?;
    ensure(recalls == vec![0.70, 0.69, 0.76, 0.71], || format!("recalls {recalls:?}"))?;
    Ok(format!("{recalls:?}"))
}

fn raw_turn_one(start: usize, end: usize, label: AnomalyType) -> String {
    format!(
        r#"{{"COT":"","status":"abnormal","anomalies":[{{"Attributed Time Region":"Frame {start} - Frame {end}","Attributed Label":"{}"}}]}}"#,
        label.name()
    )
}

fn raw_turn_two(frames: &BTreeMap<usize, [i64; 4]>, label: AnomalyType) -> String {
    let body: Vec<String> = frames.iter().map(|(k, b)| format!(r#""Frame {k}":{b:?}"#)).collect();
    format!(
        r#"{{"COT":"","status":"abnormal","anomalies":[{{"Attributed Label":"{}","BBOX":{{{}}}}}]}}"#,
        label.name(),
        body.join(",")
    )
}

/// A 5 s, 24 fps video with one anomaly on sparse frames 5..=8.
fn worked_example(saliency: SaliencyLabel, predicted: (usize, usize), hit_boxes: bool) -> Result<f64, String> {
    let video = VideoDescriptor::with_default_handles("w", 120, Fps::integer(24)).map_err(|e| e.to_string())?;
    let gt_box = [100, 100, 300, 300];
    let gt = GroundTruth {
        video_id: "w".into(),
        status: Status::Abnormal,
        anomalies: vec![AnomalyAnnotation {
            kind: AnomalyType::ObjectDistortion,
            span: FrameSpan::sparse(5, 8),
            reason: String::new(),
            boxes: (5..=8).map(|f| (f, vec![BBox::from_array(gt_box)])).collect(),
            saliency,
        }],
    };
    let sparse = sample_frames(&video, Fps::integer(4));
    let t1 = TurnOutcome::assess(
        &raw_turn_one(predicted.0, predicted.1, AnomalyType::ObjectDistortion),
        TurnKind::TurnOne,
        ParseMode::Strict,
        Some(sparse.len()),
    );
    let clip = crop_window(&video, &sparse, FrameSpan::sparse(predicted.0, predicted.1), Fps::integer(8), None)
        .map_err(|e| e.to_string())?;
    let boxes = (0..clip.frame_count()).map(|k| (k, if hit_boxes { gt_box } else { [600, 600, 700, 700] })).collect();
    let t2 = TurnOutcome::assess(
        &raw_turn_two(&boxes, AnomalyType::ObjectDistortion),
        TurnKind::TurnTwo,
        ParseMode::Strict,
        Some(clip.frame_count()),
    );
    let rollout = RolloutRecord::two_turn(t1, t2, clip);
    Ok(aggregate_reward(&rollout, &gt, &RewardWeights::default()).map_err(|e| e.to_string())?.total)
}

fn reward_oracle() -> Outcome {
    let mut corpus = balanced_corpus(31, 60, 140);
    corpus.extend(cac_core::synth::hard_split_corpus(32, 25));
    let weights = RewardWeights::default();
    let mut rng = common::rng(33);
    let mut worst = 0.0f64;
    for i in 0..10_000 {
        let (video, gt) = &corpus[rng.random_range(0..corpus.len())];
        let case = common::random_case(&mut rng, video, gt);
        let kernel = aggregate_reward(&case.rollout, gt, &weights).map_err(|e| format!("pair {i}: {e}"))?.total;
        let diff = (kernel - common::naive_total(&case, &weights)).abs();
        worst = worst.max(diff);
        ensure(diff <= 1e-12, || format!("pair {i} ({}) differs by {diff:e}", video.id))?;
    }
    let perfect = worked_example(SaliencyLabel::Salient, (5, 8), true)?;
    ensure(perfect == 9.0, || format!("perfect salient total {perfect}"))?;
    // Non-salient (γ̄ = 0.5), type exact, temporal 2/4, boxes missed.
    let discounted = worked_example(SaliencyLabel::NonSalient, (5, 6), false)?;
    ensure(discounted == 6.0, || format!("discounted total {discounted}"))?;
    Ok(format!("10000 pairs, max |Δ| = {worst:e}; totals {perfect:.1} and {discounted:.1}"))
}

fn single(ratio: f64, rho: f64) -> TokenRatioStream {
    TokenRatioStream::new(vec![ratio], vec![rho])
}

fn grpo_properties() -> Outcome {
    let mut rng = common::rng(44);
    let mut min_kl = f64::INFINITY;
    for _ in 0..10_000 {
        let len = rng.random_range(1..64);
        for _ in 0..len {
            let rho = (rng.random_range(-20.0f64..20.0)).exp();
            let k = kl_term(rho);
            ensure(k >= 0.0, || format!("k({rho}) = {k}"))?;
            min_kl = min_kl.min(k);
        }
    }
    for n in 2..16 {
        let v = rng.random_range(-3.0..9.0);
        let adv = group_advantages(&vec![v; n], 1e-4).map_err(|e| e.to_string())?;
        ensure(adv.iter().all(|a| *a == 0.0), || format!("constant group gave {adv:?}"))?;
    }
    let cfg = GrpoConfig::default();
    for _ in 0..1_000 {
        let g = rng.random_range(2..6);
        let streams: Vec<TokenRatioStream> = (0..g)
            .map(|_| {
                let len = rng.random_range(1..20);
                TokenRatioStream::new((0..len).map(|_| rng.random_range(0.8..=1.2)).collect(), vec![1.0; len])
            })
            .collect();
        let rewards: Vec<f64> = (0..g).map(|_| rng.random_range(-3.0..9.0)).collect();
        let group = RolloutGroup::new(rewards.clone(), streams, cfg).map_err(|e| e.to_string())?;
        let adv = group_advantages(&rewards, cfg.epsilon_a).map_err(|e| e.to_string())?;
        let clipped = clipped_surrogate(&group, &adv).map_err(|e| e.to_string())?;
        let plain = unclipped_surrogate(&group, &adv).map_err(|e| e.to_string())?;
        ensure((clipped - plain).abs() <= 1e-12, || format!("clip active inside band: {clipped} vs {plain}"))?;
    }
    let beta0 = GrpoConfig { beta: 0.0, ..cfg };
    let group =
        |s: TokenRatioStream| RolloutGroup::new(vec![0.0, 0.0], vec![s.clone(), s], beta0).map_err(|e| e.to_string());
    let up = clipped_surrogate(&group(single(1.5, 1.0))?, &[1.0, 1.0]).map_err(|e| e.to_string())?;
    let down = clipped_surrogate(&group(single(0.5, 1.0))?, &[-1.0, -1.0]).map_err(|e| e.to_string())?;
    let kl = kl_penalty(&group(single(1.0, 2.0))?).map_err(|e| e.to_string())?;
    within(up, 1.2, 1e-12, "clipped positive advantage")?;
    within(down, -0.8, 1e-12, "clipped negative advantage")?;
    within(kl, 2.0 - 2f64.ln() - 1.0, 1e-12, "KL at rho = 2")?;
    Ok(format!("min k(ρ) = {min_kl:e}; fixtures {up:.12} {down:.12} {kl:.12}"))
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let corpus = balanced_corpus(2024, 100, 100);
    let types: std::collections::BTreeSet<AnomalyType> = corpus.iter().flat_map(|(_, g)| g.types()).collect();
    ensure(types.len() == 5, || format!("only {} types planted", types.len()))?;
    let cfg = SamplingConfig::default();
    let run = |script: JudgeScript| -> Result<cac_core::bench::MetricReport, String> {
        let judge = scripted_judge(script, 7, corpus.clone());
        let preds = corpus
            .iter()
            .map(|(v, _)| {
                run_two_turn(v, "judge this video", &judge, &cfg, ParseMode::Strict, 0)
                    .map(|verdict| PredictionRecord::from_verdict(&verdict))
                    .map_err(|e| format!("{}: {e}", v.id))
            })
            .collect::<Result<Vec<_>, _>>()?;
        evaluate(&preds, &corpus, &EvalOptions::default()).map_err(|e| e.to_string())
    };
    let oracle = run(JudgeScript::PerfectOracle)?;
    ensure(oracle.accuracy == 1.0, || format!("oracle accuracy {}", oracle.accuracy))?;
    within(oracle.localization.temporal, 1.0, 1e-9, "oracle temporal IoU")?;
    within(oracle.localization.spatial, 1.0, 1e-9, "oracle spatial IoU")?;
    let always = run(JudgeScript::AlwaysAbnormal)?;
    ensure(always.anomalous.recall == 1.0, || format!("always-abnormal recall {}", always.anomalous.recall))?;
    ensure(always.normal.recall == 0.0, || format!("always-abnormal normal recall {}", always.normal.recall))?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "oracle acc {:.3} tIoU {:.9} sIoU {:.9}; always-abnormal recall {:.1}/{:.1}; {elapsed:.2?}",
        oracle.accuracy,
        oracle.localization.temporal,
        oracle.localization.spatial,
        always.anomalous.recall,
        always.normal.recall
    ))
}

fn sampling_datum() -> Outcome {
    let spec = SynthSpec { id: "s".into(), seed: 0, duration_seconds: 5.0, source_fps: Fps::integer(24), plan: vec![] };
    let (video, _) = generate_video(&spec).map_err(|e| e.to_string())?;
    let mut counts = Vec::new();
    for fps in [24, 25, 30, 60] {
        let v = VideoDescriptor::with_default_handles("s", 5 * fps as usize, Fps::integer(fps))
            .map_err(|e| e.to_string())?;
        counts.push(sample_frames(&v, Fps::integer(4)).len());
    }
    let n = sample_frames(&video, Fps::integer(4)).len();
    ensure(n == 21, || format!("{n} frames"))?;
    ensure(counts.iter().all(|c| *c == 21), || format!("per source fps {counts:?}"))?;
    Ok(format!("{n} sparse frames (24/25/30/60 fps sources: {counts:?})"))
}

fn malformed_suite() -> Outcome {
    let corpus = balanced_corpus(77, 40, 60);
    let cfg = SamplingConfig::default();
    let weights = RewardWeights::default();
    let modes = [
        (MalformedMode::Fenced, ViolationCode::ExtraText, -1.0),
        (MalformedMode::Truncated, ViolationCode::MalformedJson, -1.0),
        (MalformedMode::WrongKey, ViolationCode::MissingKey, -1.0),
        (MalformedMode::FrameGap, ViolationCode::FrameGap, -0.5),
    ];
    let mut variants = 0;
    for (mode, code, penalty) in modes {
        for i in 0..250u64 {
            // Frame gaps only show up in turn two, which needs abnormal truth.
            let pool = if mode == MalformedMode::FrameGap { &corpus[40..] } else { &corpus[..] };
            let (video, gt) = &pool[i as usize % pool.len()];
            let judge = scripted_judge(JudgeScript::Malformed { mode }, i, corpus.clone());
            let result = catch_unwind(AssertUnwindSafe(|| {
                score_rollout_group(video, gt, "p", &judge, 2, &weights, &cfg, ParseMode::Strict)
            }))
            .map_err(|_| format!("{mode:?} variant {i} panicked"))?
            .map_err(|e| format!("{mode:?} variant {i}: {e}"))?;
            for (rollout, b) in result.rollouts.iter().zip(&result.breakdowns) {
                let turn = if mode == MalformedMode::FrameGap { rollout.turn2.as_ref() } else { Some(&rollout.turn1) };
                let has = turn.is_some_and(|t| t.validity.has(code));
                ensure(has, || format!("{mode:?} variant {i} on {}: missing {code}", video.id))?;
                ensure(b.r_fmt == penalty, || format!("{mode:?} variant {i}: r_fmt {} not {penalty}", b.r_fmt))?;
                variants += 1;
            }
        }
    }
    Ok(format!("{variants} rollouts over 1000 variants, codes and penalties as documented"))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 7] = [
        ("main metric row from confusion counts", main_table),
        ("hard-split bucket recalls", hard_split),
        ("reward kernel vs naive transcription", reward_oracle),
        ("GRPO math properties", grpo_properties),
        ("end-to-end scripted judges", end_to_end),
        ("5 s video sampling", sampling_datum),
        ("malformed judge outputs", malformed_suite),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {}: PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
