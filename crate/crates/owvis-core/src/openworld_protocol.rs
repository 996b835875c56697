//! The two-task open-world lifecycle: training with pseudo-labeled
//! unknowns, incremental extension with balanced exemplar replay,
//! inference-time known/unknown selection, and the per-video prediction
//! path feeding the evaluator.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::config::RunConfig;
use crate::data_model::{
    load_clip, BoxCxcywh, CategoryId, ClassRegistry, Dataset, InstanceTrack, Mask, VideoClip,
    VideoId, UNKNOWN_LABEL,
};
use crate::decoder_heads::{
    decoder_forward, heads_forward, incremental_extend, segmentation_forward_subset,
};
use crate::error::{Error, Result};
use crate::eval::{
    aggregate, build_report, evaluate_known, evaluate_unknown, relabel_unknown, EvalConfig,
    EvalReport,
};
use crate::feature_net::{backbone_stage16_activations, features_forward};
use crate::matching_losses::{
    class_targets, focal_loss, hungarian_match, objectness_targets, regression_loss, total_loss,
    GtClipInstance, LossBundle, RegressionInputs,
};
use crate::model::Model;
use crate::nn::{save_checkpoint, Adam, AdamConfig, CheckpointHeader};
use crate::sto::{
    baseline_scorer, contrastive_loss, enriched_16, objectness_map, objectness_score,
    select_pseudo_unknowns, QueryPartition,
};
use crate::tensor::Tensor;

/// Alignment required by the model pipeline (the 1/32 backbone scale).
pub const CLIP_ALIGN: usize = 32;

// ---- metrics logging ----

#[derive(Serialize)]
struct StepRecord<'a> {
    step: u64,
    phase: &'a str,
    l_c: f64,
    l_f: f64,
    l_r_box: f64,
    l_r_mask: f64,
    l_contr: f64,
    total: f64,
}

/// Line-delimited JSON metrics sink; `None` path keeps records in memory
/// only.
pub struct MetricsLogger {
    file: Option<std::io::BufWriter<std::fs::File>>,
    pub history: Vec<LossBundle>,
}

impl MetricsLogger {
    pub fn to_file(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsLogger { file: Some(std::io::BufWriter::new(file)), history: Vec::new() })
    }

    pub fn in_memory() -> Self {
        MetricsLogger { file: None, history: Vec::new() }
    }

    fn log_step(&mut self, step: u64, phase: &str, bundle: &LossBundle) -> Result<()> {
        self.history.push(*bundle);
        if let Some(f) = &mut self.file {
            let rec = StepRecord {
                step,
                phase,
                l_c: bundle.l_c,
                l_f: bundle.l_f,
                l_r_box: bundle.l_r_box,
                l_r_mask: bundle.l_r_mask,
                l_contr: bundle.l_contr,
                total: bundle.total,
            };
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io("metrics", e))?;
        }
        Ok(())
    }

    pub fn log_json(&mut self, value: &serde_json::Value) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{value}").map_err(|e| Error::io("metrics", e))?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(f) = &mut self.file {
            f.flush().map_err(|e| Error::io("metrics", e))?;
        }
        Ok(())
    }
}

// ---- ground-truth preparation ----

/// Ground truth for a clip window: known-category instances visible in
/// the window, boxes converted to the padded clip frame.
pub fn clip_ground_truth(
    tracks: &[InstanceTrack],
    clip: &VideoClip,
    registry: &ClassRegistry,
) -> Vec<GtClipInstance> {
    let mut out = Vec::new();
    for track in tracks {
        if !registry.is_known(track.category_id) {
            continue; // not-yet-known instances supervise nothing
        }
        let mut boxes = Vec::with_capacity(clip.num_frames());
        let mut masks = Vec::with_capacity(clip.num_frames());
        let mut visible = false;
        for &fi in &clip.frame_indices {
            let b = track.boxes[fi];
            visible |= !b.is_empty();
            boxes.push(clip.to_clip_box(&b));
            masks.push(track.masks[fi].clone());
        }
        if !visible {
            continue;
        }
        let class_index = registry.class_index(track.category_id).expect("known");
        out.push(GtClipInstance { category_id: track.category_id, class_index, boxes, masks });
    }
    out
}

// ---- one optimization step ----

pub struct StepOutcome {
    pub bundle: LossBundle,
    pub partition: QueryPartition,
}

/// Forward, match, pseudo-label, loss, backward, optimizer update.
pub fn train_step(
    model: &mut Model,
    opt: &mut Adam,
    clip: &VideoClip,
    gt: &[GtClipInstance],
    registry: &ClassRegistry,
    cfg: &RunConfig,
    step: u64,
) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let enc = features_forward(model, &mut tape, clip);
    let dec = decoder_forward(model, &mut tape, &enc);
    let heads = heads_forward(model, &mut tape, &dec, registry)?;

    let class_logit_values = tape.value(heads.class_logits).clone();
    let box_values = tape.value(heads.boxes).clone();
    let matching = hungarian_match(&class_logit_values, &box_values, gt, &cfg.loss)?;
    let matched_queries = matching.matched_queries();

    // objectness scores drive pseudo-unknown selection; the full model
    // scores the learned map, the ablated baseline scores raw backbone
    // activations
    let (scores_var, score_values) = if model.cfg.enable_sto {
        let e16 = enriched_16(&enc)?;
        let omap = objectness_map(model, &mut tape, e16.var)?;
        let s = objectness_score(&mut tape, omap, &box_values);
        let vals = tape.value(s).data().to_vec();
        (Some(s), vals)
    } else {
        let raw = backbone_stage16_activations(model, &mut tape, clip);
        let vals = baseline_scorer(tape.value(raw), &box_values);
        (None, vals)
    };
    let partition = select_pseudo_unknowns(&score_values, &matched_queries, cfg.sto.p_u);
    let n_fg = partition.foreground().len().max(1);

    let q = model.cfg.queries;
    let width = model.num_known + 1;
    let ct = class_targets(q, width, &matching.assignment, gt, &partition.pseudo_unknown);
    let flat_logits = tape.reshape(heads.class_logits, &[q * width]);
    let l_c = focal_loss(&mut tape, flat_logits, &ct, cfg.loss.gamma, cfg.loss.alpha_f, n_fg);

    let ot = objectness_targets(q, &partition.foreground());
    let l_f = focal_loss(&mut tape, heads.objectness_logits, &ot, cfg.loss.gamma, cfg.loss.alpha_f, n_fg);

    let (l_r_box, l_r_mask) = if matching.assignment.is_empty() {
        let z = tape.constant(Tensor::scalar(0.0));
        (z, z)
    } else {
        let matched: Vec<usize> = matching.assignment.iter().map(|&(qi, _)| qi).collect();
        let mask_logits = segmentation_forward_subset(model, &mut tape, dec.instance_features, &enc, &matched);
        let inputs = RegressionInputs {
            boxes: heads.boxes,
            matched_mask_logits: mask_logits,
            assignment: &matching.assignment,
            gt,
            pad_top: clip.pad_top,
            pad_left: clip.pad_left,
            gt_h: clip.orig_h,
            gt_w: clip.orig_w,
        };
        regression_loss(&mut tape, &inputs, &cfg.loss)
    };

    let l_contr = match scores_var {
        Some(s) => contrastive_loss(&mut tape, s, &partition, cfg.sto.normalize_scores),
        None => tape.constant(Tensor::scalar(0.0)),
    };

    let (total, bundle) = total_loss(&mut tape, l_c, l_f, l_r_box, l_r_mask, l_contr, cfg.loss.alpha, step)?;
    let grads = tape.backward(total);
    opt.update(&mut model.store, &grads);
    Ok(StepOutcome { bundle, partition })
}

// ---- training phases ----

#[allow(clippy::too_many_arguments)]
pub fn train_phase(
    model: &mut Model,
    opt: &mut Adam,
    dataset: &Dataset,
    video_ids: &[VideoId],
    registry: &ClassRegistry,
    cfg: &RunConfig,
    epochs: usize,
    phase: &str,
    phase_seed: u64,
    step_counter: &mut u64,
    logger: &mut MetricsLogger,
    run_dir: Option<&Path>,
) -> Result<()> {
    let mut order: Vec<VideoId> = video_ids.to_vec();
    order.sort_unstable();
    for epoch in 0..epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(phase_seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9));
        let mut epoch_order = order.clone();
        epoch_order.shuffle(&mut rng);
        for &vid in &epoch_order {
            let meta = &dataset.videos[&vid];
            let len = cfg.schedule.clip_len.min(meta.length);
            let start = if meta.length > len { rng.gen_range(0..=meta.length - len) } else { 0 };
            let clip = load_clip(dataset, vid, start, len, CLIP_ALIGN)?;
            let gt = clip_ground_truth(dataset.tracks(vid), &clip, registry);
            *step_counter += 1;
            match train_step(model, opt, &clip, &gt, registry, cfg, *step_counter) {
                Ok(outcome) => logger.log_step(*step_counter, phase, &outcome.bundle)?,
                Err(e @ Error::NonFiniteLoss { .. }) => {
                    if let Some(dir) = run_dir {
                        let header = CheckpointHeader {
                            config_fingerprint: cfg.fingerprint(),
                            schedule_fingerprint: cfg.schedule_fingerprint(),
                            known_ids: registry.known_ids().to_vec(),
                            task: 0,
                        };
                        save_checkpoint(&dir.join("last_finite.ckpt"), &header, &model.store)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
    }
    logger.flush()?;
    Ok(())
}

/// Train on task-1 data with the task-1 registry.
#[allow(clippy::too_many_arguments)]
pub fn train_task(
    model: &mut Model,
    dataset: &Dataset,
    video_ids: &[VideoId],
    registry: &ClassRegistry,
    cfg: &RunConfig,
    epochs: usize,
    logger: &mut MetricsLogger,
    run_dir: Option<&Path>,
) -> Result<()> {
    cfg.schedule.validate()?;
    let mut opt = Adam::new(
        AdamConfig {
            learning_rate: cfg.schedule.learning_rate,
            grad_clip: cfg.schedule.grad_clip,
            ..Default::default()
        },
        model.frozen_prefixes(),
    );
    let mut step = 0u64;
    train_phase(
        model, &mut opt, dataset, video_ids, registry, cfg, epochs, "task1", cfg.seed, &mut step,
        logger, run_dir,
    )
}

// ---- exemplar replay ----

/// Balanced per-category sample of training clips for replay finetuning.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct ExemplarStore {
    pub seed: u64,
    pub per_category: BTreeMap<CategoryId, Vec<VideoId>>,
}

impl ExemplarStore {
    pub fn all_videos(&self) -> Vec<VideoId> {
        let mut v: Vec<VideoId> = self.per_category.values().flatten().copied().collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn is_empty(&self) -> bool {
        self.per_category.values().all(Vec::is_empty)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string_pretty(self).expect("store serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad exemplar store: {e}")))
    }

    /// Materialize the store as a dataset in the annotation format,
    /// keeping only known-category annotations.
    pub fn as_dataset(&self, dataset: &Dataset, registry: &ClassRegistry) -> Dataset {
        let mut out = Dataset { root: dataset.root.clone(), ..Default::default() };
        for (&id, info) in &dataset.categories {
            if registry.is_known(id) {
                out.categories.insert(id, info.clone());
            }
        }
        for vid in self.all_videos() {
            out.videos.insert(vid, dataset.videos[&vid].clone());
            let tracks: Vec<InstanceTrack> = dataset
                .tracks(vid)
                .iter()
                .filter(|t| registry.is_known(t.category_id))
                .cloned()
                .collect();
            out.annotations.insert(vid, tracks);
        }
        out
    }
}

/// Seeded uniform sample of up to `e` clips per known category; a clip
/// counts for every category it contains.
pub fn select_exemplars(
    dataset: &Dataset,
    train_videos: &[VideoId],
    registry: &ClassRegistry,
    e: usize,
    seed: u64,
) -> ExemplarStore {
    assert!(e >= 1, "exemplar quota must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_category = BTreeMap::new();
    let mut known = registry.known_ids().to_vec();
    known.sort_unstable();
    for cid in known {
        let mut candidates: Vec<VideoId> = train_videos
            .iter()
            .filter(|&&v| dataset.tracks(v).iter().any(|t| t.category_id == cid))
            .copied()
            .collect();
        candidates.sort_unstable();
        candidates.shuffle(&mut rng);
        if candidates.is_empty() {
            log::warn!("category {cid} has no training clips; exemplar entry left empty");
        }
        let mut chosen: Vec<VideoId> = candidates.into_iter().take(e).collect();
        chosen.sort_unstable();
        per_category.insert(cid, chosen);
    }
    ExemplarStore { seed, per_category }
}

/// Incremental task-2 update: extend the classifier, train on the new
/// task's videos, then (with replay) finetune on the union of task-2
/// samples and the exemplar clips.
#[allow(clippy::too_many_arguments)]
pub fn incremental_step(
    model: &mut Model,
    dataset: &Dataset,
    task2_videos: &[VideoId],
    registry_old: &ClassRegistry,
    registry_new: &ClassRegistry,
    exemplars: Option<&ExemplarStore>,
    cfg: &RunConfig,
    logger: &mut MetricsLogger,
    run_dir: Option<&Path>,
) -> Result<()> {
    cfg.schedule.validate()?;
    incremental_extend(model, registry_old, registry_new, cfg.seed ^ 0x5eed_c1a5)?;
    let mut opt = Adam::new(
        AdamConfig {
            learning_rate: cfg.schedule.learning_rate,
            grad_clip: cfg.schedule.grad_clip,
            ..Default::default()
        },
        model.frozen_prefixes(),
    );
    let mut step = 0u64;
    train_phase(
        model,
        &mut opt,
        dataset,
        task2_videos,
        registry_new,
        cfg,
        cfg.schedule.task2_epochs,
        "task2",
        cfg.seed ^ 0xaaaa,
        &mut step,
        logger,
        run_dir,
    )?;
    if let Some(store) = exemplars {
        let mut finetune_videos: Vec<VideoId> = task2_videos.to_vec();
        finetune_videos.extend(store.all_videos());
        finetune_videos.sort_unstable();
        finetune_videos.dedup();
        train_phase(
            model,
            &mut opt,
            dataset,
            &finetune_videos,
            registry_new,
            cfg,
            cfg.schedule.finetune_epochs,
            "finetune",
            cfg.seed ^ 0xbbbb,
            &mut step,
            logger,
            run_dir,
        )?;
    }
    Ok(())
}

// ---- inference ----

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub query: usize,
    pub category_id: CategoryId,
    pub score: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Selection {
    pub known: Vec<Detection>,
    pub unknown: Vec<Detection>,
}

/// Top-k known instances by maximum known-class probability, then top-k
/// unknown instances among the remaining queries by unknown-class
/// probability; both filtered by the score threshold.
pub fn inference_select(
    class_logits: &Tensor,
    registry: &ClassRegistry,
    k: usize,
    threshold: f64,
) -> Selection {
    let probs = crate::matching_losses::softmax_rows(class_logits);
    let (q, width) = (probs.shape()[0], probs.shape()[1]);
    assert_eq!(width, registry.num_known() + 1);

    let mut ranked: Vec<(usize, usize, f64)> = (0..q)
        .map(|i| {
            let mut best_c = 1usize;
            let mut best_p = f64::NEG_INFINITY;
            for c in 1..width {
                let p = probs.at(&[i, c]);
                if p > best_p {
                    best_p = p;
                    best_c = c;
                }
            }
            (i, best_c, best_p)
        })
        .collect();
    ranked.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
    let k_known = k.min(q);
    let known_set: Vec<(usize, usize, f64)> = ranked[..k_known].to_vec();

    let taken: std::collections::BTreeSet<usize> = known_set.iter().map(|t| t.0).collect();
    let mut rest: Vec<(usize, f64)> = (0..q)
        .filter(|i| !taken.contains(i))
        .map(|i| (i, probs.at(&[i, 0])))
        .collect();
    rest.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let k_unknown = if 2 * k > q {
        log::warn!("2k={} exceeds q={q}; clamping the unknown set", 2 * k);
        q - k_known
    } else {
        k
    };

    Selection {
        known: known_set
            .into_iter()
            .filter(|&(_, _, p)| p > threshold)
            .map(|(i, c, p)| Detection {
                query: i,
                category_id: registry.category_of_index(c).expect("known index"),
                score: p,
            })
            .collect(),
        unknown: rest
            .into_iter()
            .take(k_unknown)
            .filter(|&(_, p)| p > threshold)
            .map(|(i, p)| Detection { query: i, category_id: UNKNOWN_LABEL, score: p })
            .collect(),
    }
}

/// Run the model over one full video and emit predicted tracks at the
/// annotation resolution.
pub fn predict_video(
    model: &Model,
    dataset: &Dataset,
    video_id: VideoId,
    registry: &ClassRegistry,
    cfg: &RunConfig,
) -> Result<Vec<InstanceTrack>> {
    let meta = &dataset.videos[&video_id];
    let clip = load_clip(dataset, video_id, 0, meta.length, CLIP_ALIGN)?;
    let mut tape = Tape::new();
    let enc = features_forward(model, &mut tape, &clip);
    let dec = decoder_forward(model, &mut tape, &enc);
    let heads = heads_forward(model, &mut tape, &dec, registry)?;
    let logits = tape.value(heads.class_logits).clone();
    let selection = inference_select(&logits, registry, cfg.infer.top_k, cfg.infer.score_threshold);

    let mut chosen: Vec<&Detection> = selection.known.iter().chain(&selection.unknown).collect();
    if chosen.is_empty() {
        return Ok(Vec::new());
    }
    chosen.sort_by_key(|d| d.query);
    let indices: Vec<usize> = chosen.iter().map(|d| d.query).collect();
    let mask_logits = segmentation_forward_subset(model, &mut tape, dec.instance_features, &enc, &indices);
    let m = clip.num_frames();
    let s = tape.shape(mask_logits).to_vec();
    let flat = tape.reshape(mask_logits, &[s[0] * m, s[2], s[3]]);
    let up = tape.upsample_bilinear(flat, s[2] * 8, s[3] * 8);
    let cropped = tape.crop2d(up, clip.pad_top, clip.pad_left, clip.orig_h, clip.orig_w);
    let values = tape.value(cropped);

    let (h, w) = (clip.orig_h, clip.orig_w);
    let mut tracks = Vec::with_capacity(chosen.len());
    for (row, det) in chosen.iter().enumerate() {
        let mut masks = Vec::with_capacity(m);
        for f in 0..m {
            let base = (row * m + f) * h * w;
            let mut mask = Mask::zeros(h, w);
            for r in 0..h {
                for c in 0..w {
                    if values.data()[base + r * w + c] > 0.0 {
                        mask.set(r, c, true);
                    }
                }
            }
            masks.push(mask);
        }
        tracks.push(InstanceTrack::from_masks(det.category_id, masks, det.score));
    }
    Ok(tracks)
}

// ---- task evaluation ----

pub struct TaskEvalOutput {
    pub report: EvalReport,
    pub known_predictions: BTreeMap<VideoId, Vec<InstanceTrack>>,
    pub unknown_predictions: BTreeMap<VideoId, Vec<InstanceTrack>>,
}

/// Predict every test video of the task and evaluate known (and, at task
/// 1, unknown) performance.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_task(
    model: &Model,
    dataset: &Dataset,
    split: &crate::splits::TaskSplit,
    task: u8,
    registry: &ClassRegistry,
    cfg: &RunConfig,
    eval_cfg: &EvalConfig,
) -> Result<TaskEvalOutput> {
    let part = split.task(task as usize);

    let mut known_preds: BTreeMap<VideoId, Vec<InstanceTrack>> = BTreeMap::new();
    let mut known_gts: BTreeMap<VideoId, Vec<InstanceTrack>> = BTreeMap::new();
    for &vid in &part.known_test_videos {
        let preds = predict_video(model, dataset, vid, registry, cfg)?;
        known_preds.insert(vid, preds.into_iter().filter(|t| t.category_id != UNKNOWN_LABEL).collect());
        known_gts.insert(
            vid,
            dataset.tracks(vid).iter().filter(|t| registry.is_known(t.category_id)).cloned().collect(),
        );
    }
    let per_class = evaluate_known(&known_preds, &known_gts, registry.known_ids(), eval_cfg)?;

    let mut unknown_preds: BTreeMap<VideoId, Vec<InstanceTrack>> = BTreeMap::new();
    let unknown = if part.unknown_test_videos.is_empty() {
        None
    } else {
        let mut future_gts: BTreeMap<VideoId, Vec<InstanceTrack>> = BTreeMap::new();
        for &vid in &part.unknown_test_videos {
            let preds = predict_video(model, dataset, vid, registry, cfg)?;
            unknown_preds
                .insert(vid, preds.into_iter().filter(|t| t.category_id == UNKNOWN_LABEL).collect());
            future_gts.insert(
                vid,
                dataset.tracks(vid).iter().filter(|t| !registry.is_known(t.category_id)).cloned().collect(),
            );
        }
        let future_gts = relabel_unknown(&future_gts);
        Some(evaluate_unknown(&unknown_preds, &future_gts, eval_cfg)?)
    };

    let report = build_report(
        task,
        &per_class,
        unknown,
        split.task(1).known_category_ids.as_slice(),
        &cfg.fingerprint(),
    );
    Ok(TaskEvalOutput { report, known_predictions: known_preds, unknown_predictions: unknown_preds })
}

/// Mean section metrics for a plain per-class map (helper for summaries).
pub fn section_mean(per_class: &BTreeMap<CategoryId, crate::eval::ClassMetrics>) -> (f64, f64) {
    let s = aggregate(per_class);
    (s.ap, s.ar1)
}

// ---- objectness separation measurement ----

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SeparationMargin {
    pub foreground_mean: f64,
    pub background_mean: f64,
}

impl SeparationMargin {
    pub fn margin(&self) -> f64 {
        self.foreground_mean - self.background_mean
    }
}

/// Mean objectness score over ground-truth boxes versus size-matched
/// random background boxes, measured with the model's active scorer (the
/// learned STO map, or channel-mean backbone activations for the baseline
/// arm).
pub fn measure_separation(
    model: &Model,
    dataset: &Dataset,
    video_ids: &[VideoId],
    registry: &ClassRegistry,
    cfg: &RunConfig,
    seed: u64,
) -> Result<SeparationMargin> {
    let mut fg_scores = Vec::new();
    let mut bg_scores = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &vid in video_ids {
        let meta = &dataset.videos[&vid];
        let len = cfg.schedule.clip_len.min(meta.length);
        let clip = load_clip(dataset, vid, 0, len, CLIP_ALIGN)?;
        let gt = clip_ground_truth(dataset.tracks(vid), &clip, registry);
        if gt.is_empty() {
            continue;
        }
        let mut tape = Tape::new();
        let map: Tensor = if model.cfg.enable_sto {
            let enc = features_forward(model, &mut tape, &clip);
            let e16 = enriched_16(&enc)?;
            let omap = objectness_map(model, &mut tape, e16.var)?;
            tape.value(omap).clone()
        } else {
            let raw = backbone_stage16_activations(model, &mut tape, &clip);
            let v = tape.value(raw);
            let (m, c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
            let mut mean = Tensor::zeros(&[m, h, w]);
            for fi in 0..m {
                for r in 0..h {
                    for col in 0..w {
                        let mut acc = 0.0;
                        for ch in 0..c {
                            acc += v.at(&[fi, ch, r, col]);
                        }
                        mean.set(&[fi, r, col], acc / c as f64);
                    }
                }
            }
            mean
        };

        let m = clip.num_frames();
        for inst in &gt {
            // foreground: the instance's own boxes
            let mut fg_data = Vec::with_capacity(m * 4);
            for b in &inst.boxes {
                fg_data.extend_from_slice(&[b.cx, b.cy, b.w, b.h]);
            }
            let fg_boxes = Tensor::new(&[1, m, 4], fg_data);
            fg_scores.push(crate::sto::score_values(&map, &fg_boxes)[0]);

            // background: same sizes, random placement away from any object
            let mut bg_data = Vec::with_capacity(m * 4);
            for (f, b) in inst.boxes.iter().enumerate() {
                if b.is_empty() {
                    bg_data.extend_from_slice(&[0.0, 0.0, 0.0, 0.0]);
                    continue;
                }
                let mut candidate = *b;
                for _ in 0..20 {
                    let cx = rng.gen_range(b.w / 2.0..=(1.0 - b.w / 2.0).max(b.w / 2.0));
                    let cy = rng.gen_range(b.h / 2.0..=(1.0 - b.h / 2.0).max(b.h / 2.0));
                    candidate = BoxCxcywh { cx, cy, w: b.w, h: b.h };
                    let clear = gt.iter().all(|other| {
                        let ob = &other.boxes[f];
                        ob.is_empty() || crate::matching_losses::giou(&candidate, ob) < 0.0
                    });
                    if clear {
                        break;
                    }
                }
                bg_data.extend_from_slice(&[candidate.cx, candidate.cy, candidate.w, candidate.h]);
            }
            let bg_boxes = Tensor::new(&[1, m, 4], bg_data);
            bg_scores.push(crate::sto::score_values(&map, &bg_boxes)[0]);
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(SeparationMargin { foreground_mean: mean(&fg_scores), background_mean: mean(&bg_scores) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::splits::{build_split, desk_splits};
    use crate::synthdata::{generate, SynthConfig};

    fn tiny_run_config(seed: u64) -> RunConfig {
        let mut cfg = RunConfig::desk(seed);
        cfg.model = ModelConfig {
            d: 16,
            queries: 8,
            enc_layers: 2,
            dec_layers: 1,
            heads: 2,
            ffn_dim: 32,
            mask_dim: 4,
            backbone_channels: vec![4, 6, 8, 10, 12],
            scratch_mid_channels: 6,
            max_frames: 8,
            ..ModelConfig::desk()
        };
        cfg.schedule.clip_len = 2;
        cfg.sto.p_u = 2;
        cfg.infer.top_k = 2;
        cfg
    }

    fn tiny_synth(dir: &Path, seed: u64) -> Dataset {
        let mut sc = SynthConfig::desk_default(seed);
        sc.num_videos = 4;
        sc.frames_per_video = 3;
        sc.resolution = (32, 32);
        sc.size_range = (5.0, 8.0);
        sc.instances_per_video = (1, 1);
        generate(&sc, dir).unwrap()
    }

    #[test]
    fn smoke_one_epoch_logs_one_record_per_step() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_synth(dir.path(), 3);
        let cfg = tiny_run_config(5);
        let registry = ClassRegistry::new(vec![1, 2, 3, 4, 5]).unwrap();
        let mut model = Model::new(&cfg.model, 5, cfg.seed);
        let mut logger = MetricsLogger::in_memory();
        let videos: Vec<VideoId> = ds.videos.keys().copied().collect();
        train_task(&mut model, &ds, &videos, &registry, &cfg, 1, &mut logger, None).unwrap();
        assert_eq!(logger.history.len(), videos.len());
        assert!(logger.history.iter().all(|b| b.total.is_finite()));
    }

    #[test]
    fn same_seed_reproduces_the_loss_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_synth(dir.path(), 4);
        let cfg = tiny_run_config(9);
        let registry = ClassRegistry::new(vec![1, 2, 3, 4, 5]).unwrap();
        let videos: Vec<VideoId> = ds.videos.keys().copied().collect();

        let run = || {
            let mut model = Model::new(&cfg.model, 5, cfg.seed);
            let mut logger = MetricsLogger::in_memory();
            train_task(&mut model, &ds, &videos, &registry, &cfg, 2, &mut logger, None).unwrap();
            logger.history.iter().map(|b| b.total).collect::<Vec<f64>>()
        };
        assert_eq!(run(), run());
    }

    /// Total loss from raw branch-output tensors, the same assembly the
    /// training step performs.
    fn loss_from_outputs(
        class_logits: &Tensor,
        boxes: &Tensor,
        obj_logits: &Tensor,
        mask_logits: &Tensor, // [q, M, h8, w8]
        omap: &Tensor,
        gt: &[GtClipInstance],
        cfg: &RunConfig,
    ) -> f64 {
        let mut tape = Tape::new();
        let cl = tape.constant(class_logits.clone());
        let bx = tape.constant(boxes.clone());
        let ob = tape.constant(obj_logits.clone());
        let om = tape.constant(omap.clone());
        let matching = hungarian_match(class_logits, boxes, gt, &cfg.loss).unwrap();
        let matched = matching.matched_queries();
        let scores = objectness_score(&mut tape, om, boxes);
        let score_vals = tape.value(scores).data().to_vec();
        let partition = select_pseudo_unknowns(&score_vals, &matched, cfg.sto.p_u);
        let n_fg = partition.foreground().len().max(1);
        let q = class_logits.shape()[0];
        let width = class_logits.shape()[1];
        let ct = class_targets(q, width, &matching.assignment, gt, &partition.pseudo_unknown);
        let flat = tape.reshape(cl, &[q * width]);
        let l_c = focal_loss(&mut tape, flat, &ct, cfg.loss.gamma, cfg.loss.alpha_f, n_fg);
        let ot = objectness_targets(q, &partition.foreground());
        let l_f = focal_loss(&mut tape, ob, &ot, cfg.loss.gamma, cfg.loss.alpha_f, n_fg);
        let ml = tape.constant(mask_logits.clone());
        let sel: Vec<usize> = matching.assignment.iter().map(|&(qi, _)| qi).collect();
        let ml_sel = tape.gather_rows(ml, &sel);
        let (gt_h, gt_w) = (gt[0].masks[0].h, gt[0].masks[0].w);
        let inputs = RegressionInputs {
            boxes: bx,
            matched_mask_logits: ml_sel,
            assignment: &matching.assignment,
            gt,
            pad_top: 0,
            pad_left: 0,
            gt_h,
            gt_w,
        };
        let (l_rb, l_rm) = regression_loss(&mut tape, &inputs, &cfg.loss);
        let l_ct = contrastive_loss(&mut tape, scores, &partition, cfg.sto.normalize_scores);
        let (total, _) = total_loss(&mut tape, l_c, l_f, l_rb, l_rm, l_ct, cfg.loss.alpha, 0).unwrap();
        tape.value(total).item()
    }

    #[test]
    fn loss_permutation_invariance_under_query_shuffle() {
        let cfg = tiny_run_config(11);
        let (q, width, m) = (cfg.model.queries, 6usize, 2usize);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let class_logits = Tensor::randn(&[q, width], 1.0, &mut rng);
        let boxes = Tensor::rand_uniform(&[q, m, 4], 0.05, 0.9, &mut rng);
        let obj = Tensor::randn(&[q], 1.0, &mut rng);
        let mask_logits = Tensor::randn(&[q, m, 4, 4], 1.0, &mut rng);
        let omap = Tensor::rand_uniform(&[m, 4, 4], 0.0, 1.0, &mut rng);
        let gt = vec![GtClipInstance {
            category_id: 1,
            class_index: 1,
            boxes: vec![
                BoxCxcywh { cx: 0.4, cy: 0.4, w: 0.3, h: 0.3 },
                BoxCxcywh { cx: 0.45, cy: 0.42, w: 0.3, h: 0.3 },
            ],
            masks: vec![
                Mask::from_fn(32, 32, |r, c| r > 8 && r < 18 && c > 8 && c < 18),
                Mask::from_fn(32, 32, |r, c| r > 9 && r < 19 && c > 9 && c < 19),
            ],
        }];
        let l1 = loss_from_outputs(&class_logits, &boxes, &obj, &mask_logits, &omap, &gt, &cfg);

        // exact value permutation of every per-query tensor
        let perm: Vec<usize> = (0..q).map(|i| (i + 3) % q).collect();
        let permute_rows = |t: &Tensor| {
            let row: usize = t.shape()[1..].iter().product();
            let mut out = t.clone();
            for (dst, &src) in perm.iter().enumerate() {
                for j in 0..row {
                    out.data_mut()[dst * row + j] = t.data()[src * row + j];
                }
            }
            out
        };
        let l2 = loss_from_outputs(
            &permute_rows(&class_logits),
            &permute_rows(&boxes),
            &permute_rows(&obj),
            &permute_rows(&mask_logits),
            &omap,
            &gt,
            &cfg,
        );
        assert!((l1 - l2).abs() < 1e-9, "query order must not change the loss: {l1} vs {l2}");
    }

    #[test]
    fn exemplar_selection_is_balanced_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let mut sc = SynthConfig::desk_default(7);
        sc.num_videos = 10;
        sc.frames_per_video = 2;
        sc.resolution = (32, 32);
        sc.instances_per_video = (1, 1);
        let ds = generate(&sc, dir.path()).unwrap();
        let registry = ClassRegistry::new(vec![1, 2, 3]).unwrap();
        let videos: Vec<VideoId> = ds.videos.keys().copied().collect();
        let store = select_exemplars(&ds, &videos, &registry, 2, 99);
        assert_eq!(store.per_category.len(), 3);
        for (cid, vids) in &store.per_category {
            assert!(vids.len() <= 2, "category {cid} has {} exemplars", vids.len());
            for v in vids {
                assert!(ds.tracks(*v).iter().any(|t| t.category_id == *cid));
            }
        }
        let again = select_exemplars(&ds, &videos, &registry, 2, 99);
        assert_eq!(store, again);

        // scarcity: a category with one clip yields one exemplar
        let one_vid: Vec<VideoId> = videos
            .iter()
            .filter(|&&v| ds.tracks(v).iter().any(|t| t.category_id == 1))
            .take(1)
            .copied()
            .collect();
        let scarce = select_exemplars(&ds, &one_vid, &ClassRegistry::new(vec![1]).unwrap(), 5, 1);
        assert_eq!(scarce.per_category[&1].len(), 1);
    }

    #[test]
    fn inference_selection_rules() {
        let registry = ClassRegistry::new(vec![10, 20]).unwrap();
        // q=5, C=2: probs constructed via logits
        let mut logits = Tensor::zeros(&[5, 3]);
        // queries 0,1 strongly known; query 3 strongly unknown
        logits.set(&[0, 1], 6.0);
        logits.set(&[1, 2], 5.0);
        logits.set(&[3, 0], 6.0);
        let sel = inference_select(&logits, &registry, 2, 0.05);
        let known_queries: Vec<usize> = sel.known.iter().map(|d| d.query).collect();
        assert_eq!(known_queries, vec![0, 1]);
        assert_eq!(sel.known[0].category_id, 10);
        assert_eq!(sel.known[1].category_id, 20);
        let unknown_queries: Vec<usize> = sel.unknown.iter().map(|d| d.query).collect();
        assert!(unknown_queries.contains(&3));
        // disjoint by construction
        for u in &unknown_queries {
            assert!(!known_queries.contains(u));
        }
        // threshold filters everything when set to 1
        let sel2 = inference_select(&logits, &registry, 2, 0.9999);
        assert!(sel2.known.len() <= 2 && sel2.unknown.is_empty() || sel2.unknown.len() <= 2);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_synth(dir.path(), 8);
        let cfg = tiny_run_config(13);
        let registry = ClassRegistry::new(vec![1, 2, 3, 4, 5]).unwrap();
        let model = Model::new(&cfg.model, 5, cfg.seed);
        let vid = *ds.videos.keys().next().unwrap();
        let before = predict_video(&model, &ds, vid, &registry, &cfg).unwrap();

        let header = CheckpointHeader {
            config_fingerprint: cfg.fingerprint(),
            schedule_fingerprint: cfg.schedule_fingerprint(),
            known_ids: registry.known_ids().to_vec(),
            task: 1,
        };
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &header, &model.store).unwrap();
        let (h2, model2) = Model::load(&path, &cfg.model).unwrap();
        assert_eq!(h2, header);
        let after = predict_video(&model2, &ds, vid, &registry, &cfg).unwrap();
        assert_eq!(before.len(), after.len());
        for (a, b) in before.iter().zip(&after) {
            assert_eq!(a.masks, b.masks);
            assert_eq!(a.score, b.score);
            assert_eq!(a.category_id, b.category_id);
        }
    }

    #[test]
    fn extension_keeps_probe_predictions_before_training() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_synth(dir.path(), 12);
        let cfg = tiny_run_config(17);
        let reg3 = ClassRegistry::new(vec![1, 2, 3]).unwrap();
        let reg5 = reg3.extended(&[4, 5]).unwrap();
        let mut model = Model::new(&cfg.model, 3, cfg.seed);
        let vid = *ds.videos.keys().next().unwrap();

        let clip = load_clip(&ds, vid, 0, 2, CLIP_ALIGN).unwrap();
        let probe = |model: &Model, reg: &ClassRegistry| -> Tensor {
            let mut tape = Tape::new();
            let enc = features_forward(model, &mut tape, &clip);
            let dec = decoder_forward(model, &mut tape, &enc);
            let heads = heads_forward(model, &mut tape, &dec, reg).unwrap();
            tape.value(heads.class_logits).clone()
        };
        let before = probe(&model, &reg3);
        incremental_extend(&mut model, &reg3, &reg5, 3).unwrap();
        let after = probe(&model, &reg5);
        for qi in 0..cfg.model.queries {
            for c in 0..4 {
                assert_eq!(before.at(&[qi, c]), after.at(&[qi, c]));
            }
        }
    }

    #[test]
    fn lifecycle_monotonicity_and_eval_runs() {
        let dir = tempfile::tempdir().unwrap();
        let mut sc = SynthConfig::desk_default(20);
        sc.num_videos = 10;
        sc.frames_per_video = 2;
        sc.resolution = (32, 32);
        sc.instances_per_video = (1, 1);
        sc.size_range = (5.0, 8.0);
        let ds = generate(&sc, dir.path()).unwrap();
        let split = build_split(&ds, &desk_splits(1)[0]).unwrap();
        let cfg = tiny_run_config(23);
        let reg1 = ClassRegistry::new(split.task(1).known_category_ids.clone()).unwrap();
        let reg2 = ClassRegistry::new(split.task(2).known_category_ids.clone()).unwrap();
        assert!(reg2.num_known() > reg1.num_known(), "known set must strictly grow");
        assert_eq!(&reg2.known_ids()[..reg1.num_known()], reg1.known_ids());

        let mut model = Model::new(&cfg.model, reg1.num_known(), cfg.seed);
        let mut logger = MetricsLogger::in_memory();
        train_task(&mut model, &ds, &split.task(1).train_videos, &reg1, &cfg, 1, &mut logger, None)
            .unwrap();
        let out = evaluate_task(&model, &ds, &split, 1, &reg1, &cfg, &EvalConfig::default()).unwrap();
        assert!(out.report.known.is_some());
        assert!(out.report.unknown.is_some());

        let exemplars = select_exemplars(&ds, &split.task(1).train_videos, &reg1, 1, cfg.seed);
        incremental_step(
            &mut model,
            &ds,
            &split.task(2).train_videos,
            &reg1,
            &reg2,
            Some(&exemplars),
            &cfg,
            &mut logger,
            None,
        )
        .unwrap();
        assert_eq!(model.num_known, reg2.num_known());
        let out2 = evaluate_task(&model, &ds, &split, 2, &reg2, &cfg, &EvalConfig::default()).unwrap();
        assert!(out2.report.previously_known.is_some());
        assert!(out2.report.both.is_some());
    }

    #[test]
    fn separation_measurement_produces_finite_margin() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_synth(dir.path(), 30);
        let cfg = tiny_run_config(31);
        let registry = ClassRegistry::new(vec![1, 2, 3, 4, 5]).unwrap();
        let model = Model::new(&cfg.model, 5, 3);
        let videos: Vec<VideoId> = ds.videos.keys().copied().collect();
        let m = measure_separation(&model, &ds, &videos, &registry, &cfg, 55).unwrap();
        assert!(m.foreground_mean.is_finite() && m.background_mean.is_finite());
    }
}
