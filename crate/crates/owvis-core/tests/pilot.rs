//! Manual pilot runs for timing and hyperparameter checks. Ignored by
//! default; run with
//! `cargo test --release -p owvis-core --test pilot -- --ignored --nocapture`.

use std::time::Instant;

use owvis_core::config::RunConfig;
use owvis_core::data_model::ClassRegistry;
use owvis_core::eval::{random_proposal_tracks, relabel_unknown, EvalConfig};
use owvis_core::model::Model;
use owvis_core::openworld_protocol::{
    evaluate_task, incremental_step, measure_separation, select_exemplars, train_task,
    MetricsLogger,
};
use owvis_core::splits::{build_split, desk_splits};
use owvis_core::synthdata::{generate, SynthConfig};

#[test]
#[ignore]
fn pilot_desk_training() {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig::desk_default(1234);
    let ds = generate(&synth, dir.path()).unwrap();
    let split = build_split(&ds, &desk_splits(7)[0]).unwrap();
    println!(
        "split desk_a: t1 train {} / test {} | t2 train {} / unknown-test {}",
        split.task(1).train_videos.len(),
        split.task(1).known_test_videos.len(),
        split.task(2).train_videos.len(),
        split.task(1).unknown_test_videos.len(),
    );

    let cfg = RunConfig::desk(42);
    let reg1 = ClassRegistry::new(split.task(1).known_category_ids.clone()).unwrap();
    let mut model = Model::new(&cfg.model, reg1.num_known(), cfg.seed);

    // ~200 steps, then the separation margin (criterion-8 shape)
    let steps_per_epoch = split.task(1).train_videos.len();
    let epochs_200 = 200usize.div_ceil(steps_per_epoch);
    let mut logger = MetricsLogger::in_memory();
    let t1 = Instant::now();
    train_task(&mut model, &ds, &split.task(1).train_videos, &reg1, &cfg, epochs_200, &mut logger, None)
        .unwrap();
    let b = logger.history.last().unwrap();
    println!(
        "{} steps in {:.0}s; last components: c {:.3} f {:.3} box {:.3} mask {:.3} contr {:.3}",
        logger.history.len(),
        t1.elapsed().as_secs_f64(),
        b.l_c,
        b.l_f,
        b.l_r_box,
        b.l_r_mask,
        b.l_contr
    );
    let margin = measure_separation(&model, &ds, &split.task(1).train_videos, &reg1, &cfg, 5).unwrap();
    println!(
        "margin@200: fg {:.4} bg {:.4} diff {:.4}",
        margin.foreground_mean,
        margin.background_mean,
        margin.margin()
    );

    // continue to the full schedule
    let rest = cfg.schedule.task1_epochs.saturating_sub(epochs_200);
    let t2 = Instant::now();
    train_task(&mut model, &ds, &split.task(1).train_videos, &reg1, &cfg, rest, &mut logger, None)
        .unwrap();
    let b = logger.history.last().unwrap();
    println!(
        "task-1 total {} steps ({:.0}s more); final: c {:.3} f {:.3} box {:.3} mask {:.3} contr {:.3}",
        logger.history.len(),
        t2.elapsed().as_secs_f64(),
        b.l_c,
        b.l_f,
        b.l_r_box,
        b.l_r_mask,
        b.l_contr
    );
    let margin = measure_separation(&model, &ds, &split.task(1).train_videos, &reg1, &cfg, 5).unwrap();
    println!("margin@end: fg {:.4} bg {:.4} diff {:.4}", margin.foreground_mean, margin.background_mean, margin.margin());

    let ap50 = EvalConfig { iou_thresholds: vec![0.5], ..Default::default() };
    let out = evaluate_task(&model, &ds, &split, 1, &reg1, &cfg, &ap50).unwrap();
    println!("task1 AP50 eval:\n{}", out.report.to_table());
    for (cid, m) in &out.report.known.as_ref().unwrap().per_class {
        println!("  class {cid}: AP50 {:.3} AR1 {:.3} ({} gts)", m.ap, m.ar1, m.gt_count);
    }

    // unknown AR-1 at default thresholds, vs random proposals
    let full = EvalConfig::default();
    let out_full = evaluate_task(&model, &ds, &split, 1, &reg1, &cfg, &full).unwrap();
    let unk = out_full.report.unknown.unwrap();
    println!("unknown (default thresholds): AP {:.3} AR1 {:.3} ({} gts)", unk.ap, unk.ar1, unk.gt_count);
    let rand_preds = random_proposal_tracks(&ds, &split.task(1).unknown_test_videos, cfg.infer.top_k, 999);
    let mut future_gts = std::collections::BTreeMap::new();
    for &vid in &split.task(1).unknown_test_videos {
        future_gts.insert(
            vid,
            ds.tracks(vid).iter().filter(|t| !reg1.is_known(t.category_id)).cloned().collect::<Vec<_>>(),
        );
    }
    let future_gts = relabel_unknown(&future_gts);
    let rand_m = owvis_core::eval::evaluate_unknown(&rand_preds, &future_gts, &full).unwrap();
    println!("random proposals: AP {:.3} AR1 {:.3}", rand_m.ap, rand_m.ar1);

    // task 2 with replay vs without
    let reg2 = ClassRegistry::new(split.task(2).known_category_ids.clone()).unwrap();
    let exemplars = select_exemplars(&ds, &split.task(1).train_videos, &reg1, cfg.schedule.exemplars_per_class, cfg.seed);
    let t4 = Instant::now();
    let mut model_replay = Model::from_store(&cfg.model, model.num_known, model.store.clone()).unwrap();
    incremental_step(&mut model_replay, &ds, &split.task(2).train_videos, &reg1, &reg2, Some(&exemplars), &cfg, &mut logger, None).unwrap();
    println!("task-2 replay in {:.0}s", t4.elapsed().as_secs_f64());
    let out2 = evaluate_task(&model_replay, &ds, &split, 2, &reg2, &cfg, &ap50).unwrap();
    println!("replay:\n{}", out2.report.to_table());
    for (cid, m) in &out2.report.both.as_ref().unwrap().per_class {
        println!("  class {cid}: AP50 {:.3} AR1 {:.3} ({} gts)", m.ap, m.ar1, m.gt_count);
    }

    let mut model_norep = Model::from_store(&cfg.model, model.num_known, model.store.clone()).unwrap();
    incremental_step(&mut model_norep, &ds, &split.task(2).train_videos, &reg1, &reg2, None, &cfg, &mut logger, None).unwrap();
    let out3 = evaluate_task(&model_norep, &ds, &split, 2, &reg2, &cfg, &ap50).unwrap();
    println!("no-replay:\n{}", out3.report.to_table());
}
