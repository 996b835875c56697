//! Open-world evaluation: spatio-temporal mask IoU, per-class AP over a
//! threshold sweep with 101-point interpolation, AR-1, and the
//! known/unknown report layout.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data_model::{CategoryId, Dataset, InstanceTrack, Mask, VideoId, UNKNOWN_LABEL};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    /// Detections kept per video and class for AP; AR uses 1.
    pub max_dets_ap: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            max_dets_ap: 100,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.iou_thresholds;
        if t.is_empty() || t.windows(2).any(|p| p[0] >= p[1]) || t.iter().any(|&x| !(0.0 < x && x < 1.0)) {
            return Err(Error::Eval("iou_thresholds must be strictly increasing in (0,1)".into()));
        }
        Ok(())
    }
}

/// Spatio-temporal IoU of two mask tracks: the sum of per-frame
/// intersections over the sum of per-frame unions. Tracks that are empty
/// on every frame have IoU 0 by definition.
pub fn st_iou(pred: &InstanceTrack, gt: &InstanceTrack) -> Result<f64> {
    if pred.frame_count() != gt.frame_count() {
        return Err(Error::Eval(format!(
            "frame count mismatch: prediction has {}, ground truth has {}",
            pred.frame_count(),
            gt.frame_count()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (pm, gm) in pred.masks.iter().zip(&gt.masks) {
        if (pm.h, pm.w) != (gm.h, gm.w) {
            return Err(Error::Eval(format!(
                "mask resolution mismatch: {}x{} vs {}x{}",
                pm.h, pm.w, gm.h, gm.w
            )));
        }
        for (a, b) in pm.pixels().iter().zip(gm.pixels()) {
            inter += (*a && *b) as usize;
            union += (*a || *b) as usize;
        }
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// AP/AR-1 of one class plus how much ground truth it had.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub ap: f64,
    pub ar1: f64,
    pub gt_count: usize,
}

/// Unweighted means over the classes that have ground truth.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SectionMetrics {
    pub ap: f64,
    pub ar1: f64,
    pub per_class: BTreeMap<CategoryId, ClassMetrics>,
}

pub fn aggregate(per_class: &BTreeMap<CategoryId, ClassMetrics>) -> SectionMetrics {
    let with_gt: Vec<&ClassMetrics> = per_class.values().filter(|m| m.gt_count > 0).collect();
    let n = with_gt.len().max(1) as f64;
    SectionMetrics {
        ap: with_gt.iter().map(|m| m.ap).sum::<f64>() / n,
        ar1: with_gt.iter().map(|m| m.ar1).sum::<f64>() / n,
        per_class: per_class.clone(),
    }
}

type TrackMap = BTreeMap<VideoId, Vec<InstanceTrack>>;

/// Evaluate one class: score-descending greedy matching per threshold,
/// 101-point interpolated AP averaged over thresholds, and AR-1 with the
/// single highest-scoring prediction per video.
fn eval_single_class(
    preds: &TrackMap,
    gts: &TrackMap,
    category_id: CategoryId,
    config: &EvalConfig,
) -> Result<ClassMetrics> {
    // collect (video, index-in-video) handles, deterministic order
    let mut gt_handles: Vec<(VideoId, usize)> = Vec::new();
    for (&vid, tracks) in gts {
        for (i, t) in tracks.iter().enumerate() {
            if t.category_id == category_id {
                gt_handles.push((vid, i));
            }
        }
    }
    let gt_count = gt_handles.len();
    if gt_count == 0 {
        return Ok(ClassMetrics { ap: 0.0, ar1: 0.0, gt_count: 0 });
    }

    let mut pred_handles: Vec<(VideoId, usize, f64)> = Vec::new();
    for (&vid, tracks) in preds {
        let mut of_class: Vec<(usize, f64)> = tracks
            .iter()
            .enumerate()
            .filter(|(_, t)| t.category_id == category_id)
            .map(|(i, t)| (i, t.score))
            .collect();
        // per-video cap at max_dets_ap, keeping the highest scores
        of_class.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for (i, score) in of_class.into_iter().take(config.max_dets_ap) {
            pred_handles.push((vid, i, score));
        }
    }
    pred_handles.sort_by(|a, b| {
        b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1))
    });

    // IoU of every prediction against every same-video ground truth
    let mut ious: Vec<Vec<(usize, f64)>> = Vec::with_capacity(pred_handles.len());
    for &(vid, pi, _) in &pred_handles {
        let mut row = Vec::new();
        for (g, &(gvid, gi)) in gt_handles.iter().enumerate() {
            if gvid != vid {
                continue;
            }
            let iou = st_iou(&preds[&vid][pi], &gts[&gvid][gi])?;
            row.push((g, iou));
        }
        ious.push(row);
    }

    let mut ap_sum = 0.0;
    for &tau in &config.iou_thresholds {
        let mut gt_matched = vec![false; gt_count];
        let mut tps = Vec::with_capacity(pred_handles.len());
        for row in &ious {
            let mut best: Option<(usize, f64)> = None;
            for &(g, iou) in row {
                if gt_matched[g] || iou < tau {
                    continue;
                }
                if best.map_or(true, |(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, _)) => {
                    gt_matched[g] = true;
                    tps.push(true);
                }
                None => tps.push(false),
            }
        }
        ap_sum += interpolated_ap(&tps, gt_count);
    }
    let ap = ap_sum / config.iou_thresholds.len() as f64;

    // AR-1: only the single highest-scoring prediction of each video
    let mut top1: BTreeMap<VideoId, usize> = BTreeMap::new();
    for (rank, &(vid, _, _)) in pred_handles.iter().enumerate() {
        top1.entry(vid).or_insert(rank);
    }
    let mut ar_sum = 0.0;
    for &tau in &config.iou_thresholds {
        let mut gt_matched = vec![false; gt_count];
        let mut matched = 0usize;
        for (rank, row) in ious.iter().enumerate() {
            if top1.get(&pred_handles[rank].0) != Some(&rank) {
                continue;
            }
            let mut best: Option<(usize, f64)> = None;
            for &(g, iou) in row {
                if gt_matched[g] || iou < tau {
                    continue;
                }
                if best.map_or(true, |(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            if let Some((g, _)) = best {
                gt_matched[g] = true;
                matched += 1;
            }
        }
        ar_sum += matched as f64 / gt_count as f64;
    }
    let ar1 = ar_sum / config.iou_thresholds.len() as f64;

    Ok(ClassMetrics { ap, ar1, gt_count })
}

/// 101-point interpolated average precision from the ordered TP/FP flags.
fn interpolated_ap(tps: &[bool], gt_count: usize) -> f64 {
    let mut precisions = Vec::with_capacity(tps.len());
    let mut recalls = Vec::with_capacity(tps.len());
    let mut tp = 0usize;
    for (i, &is_tp) in tps.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precisions.push(tp as f64 / (i + 1) as f64);
        recalls.push(tp as f64 / gt_count as f64);
    }
    // monotone non-increasing envelope from the right
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        if precisions[i] < precisions[i + 1] {
            precisions[i] = precisions[i + 1];
        }
    }
    let mut total = 0.0;
    for j in 0..=100 {
        let r = j as f64 / 100.0;
        let p = recalls
            .iter()
            .position(|&rec| rec >= r)
            .map(|idx| precisions[idx])
            .unwrap_or(0.0);
        total += p;
    }
    total / 101.0
}

/// Per-class AP and AR-1 over the known categories.
pub fn evaluate_known(
    preds: &TrackMap,
    gts: &TrackMap,
    known_ids: &[CategoryId],
    config: &EvalConfig,
) -> Result<BTreeMap<CategoryId, ClassMetrics>> {
    config.validate()?;
    let mut out = BTreeMap::new();
    for &cid in known_ids {
        out.insert(cid, eval_single_class(preds, gts, cid, config)?);
    }
    Ok(out)
}

/// Single-class unknown evaluation; ground truth must already be
/// relabeled to the unknown category.
pub fn evaluate_unknown(preds: &TrackMap, gts_future: &TrackMap, config: &EvalConfig) -> Result<ClassMetrics> {
    config.validate()?;
    eval_single_class(preds, gts_future, UNKNOWN_LABEL, config)
}

/// Relabel every track to the unknown category (used to build unknown
/// ground truth from future-class tracks).
pub fn relabel_unknown(tracks: &TrackMap) -> TrackMap {
    tracks
        .iter()
        .map(|(&vid, ts)| {
            let ts = ts
                .iter()
                .map(|t| InstanceTrack { category_id: UNKNOWN_LABEL, ..t.clone() })
                .collect();
            (vid, ts)
        })
        .collect()
}

/// The task-level report mirroring the known/unknown table layout.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: u8,
    pub config_fingerprint: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub known: Option<SectionMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unknown: Option<ClassMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub previously_known: Option<SectionMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub current_known: Option<SectionMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub both: Option<SectionMetrics>,
}

/// Assemble the report: task 1 carries Known + Unknown sections; task 2
/// splits the known classes into Previously Known / Current Known / Both.
pub fn build_report(
    task: u8,
    per_class: &BTreeMap<CategoryId, ClassMetrics>,
    unknown: Option<ClassMetrics>,
    task1_ids: &[CategoryId],
    config_fingerprint: &str,
) -> EvalReport {
    if task == 1 {
        EvalReport {
            task,
            config_fingerprint: config_fingerprint.to_string(),
            known: Some(aggregate(per_class)),
            unknown,
            previously_known: None,
            current_known: None,
            both: None,
        }
    } else {
        let prev: BTreeMap<CategoryId, ClassMetrics> = per_class
            .iter()
            .filter(|(id, _)| task1_ids.contains(id))
            .map(|(&id, &m)| (id, m))
            .collect();
        let cur: BTreeMap<CategoryId, ClassMetrics> = per_class
            .iter()
            .filter(|(id, _)| !task1_ids.contains(id))
            .map(|(&id, &m)| (id, m))
            .collect();
        EvalReport {
            task,
            config_fingerprint: config_fingerprint.to_string(),
            known: None,
            unknown: None,
            previously_known: Some(aggregate(&prev)),
            current_known: Some(aggregate(&cur)),
            both: Some(aggregate(per_class)),
        }
    }
}

impl EvalReport {
    /// Human-readable table, metrics reported x100.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let pct = |v: f64| format!("{:5.1}", v * 100.0);
        out.push_str(&format!("Task-{} results (config {})\n", self.task, self.config_fingerprint));
        out.push_str(&format!("{:<18} {:>6} {:>6}\n", "section", "AP", "AR-1"));
        if let Some(k) = &self.known {
            out.push_str(&format!("{:<18} {:>6} {:>6}\n", "Known", pct(k.ap), pct(k.ar1)));
        }
        if let Some(u) = &self.unknown {
            out.push_str(&format!("{:<18} {:>6} {:>6}\n", "Unknown", pct(u.ap), pct(u.ar1)));
        }
        if let Some(p) = &self.previously_known {
            out.push_str(&format!("{:<18} {:>6} {:>6}\n", "Previously Known", pct(p.ap), pct(p.ar1)));
        }
        if let Some(c) = &self.current_known {
            out.push_str(&format!("{:<18} {:>6} {:>6}\n", "Current Known", pct(c.ap), pct(c.ar1)));
        }
        if let Some(b) = &self.both {
            out.push_str(&format!("{:<18} {:>6} {:>6}\n", "Both", pct(b.ap), pct(b.ar1)));
        }
        out
    }
}

// ---- prediction files ----

/// Write predictions in the submission layout: one record per track with
/// per-frame RLE masks (`null` on empty frames).
pub fn save_predictions(preds: &TrackMap, path: &Path) -> Result<()> {
    let mut records = Vec::new();
    for (&vid, tracks) in preds {
        for t in tracks {
            let (h, w) = t.masks.first().map(|m| (m.h, m.w)).unwrap_or((0, 0));
            let segs: Vec<Value> = t
                .masks
                .iter()
                .map(|m| {
                    if m.is_empty() {
                        Value::Null
                    } else {
                        json!({"size": [m.h, m.w], "counts": m.to_rle()})
                    }
                })
                .collect();
            records.push(json!({
                "video_id": vid,
                "category_id": t.category_id,
                "score": t.score,
                "height": h,
                "width": w,
                "segmentations": segs,
            }));
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, serde_json::to_string(&records).expect("predictions serialize"))
        .map_err(|e| Error::io(path, e))
}

pub fn load_predictions(path: &Path) -> Result<TrackMap> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records: Vec<Value> = serde_json::from_str(&text)
        .map_err(|e| Error::AnnotationParse { key: "<predictions>".into(), message: e.to_string() })?;
    let mut out: TrackMap = BTreeMap::new();
    for (i, rec) in records.iter().enumerate() {
        let vid = rec["video_id"].as_u64().ok_or_else(|| Error::AnnotationParse {
            key: format!("[{i}].video_id"),
            message: "missing".into(),
        })?;
        let cat = rec["category_id"].as_u64().unwrap_or(0) as CategoryId;
        let score = rec["score"].as_f64().unwrap_or(0.0);
        let h = rec["height"].as_u64().unwrap_or(0) as usize;
        let w = rec["width"].as_u64().unwrap_or(0) as usize;
        let segs = rec["segmentations"].as_array().ok_or_else(|| Error::AnnotationParse {
            key: format!("[{i}].segmentations"),
            message: "missing".into(),
        })?;
        let mut masks = Vec::with_capacity(segs.len());
        for seg in segs {
            if seg.is_null() {
                masks.push(Mask::zeros(h, w));
            } else {
                let size = seg["size"].as_array().ok_or_else(|| Error::AnnotationParse {
                    key: format!("[{i}].segmentations.size"),
                    message: "missing".into(),
                })?;
                let (sh, sw) = (size[0].as_u64().unwrap() as usize, size[1].as_u64().unwrap() as usize);
                let counts: Vec<u32> = seg["counts"]
                    .as_array()
                    .map(|a| a.iter().filter_map(|v| v.as_u64().map(|x| x as u32)).collect())
                    .unwrap_or_default();
                masks.push(Mask::from_rle(sh, sw, &counts)?);
            }
        }
        out.entry(vid).or_default().push(InstanceTrack::from_masks(cat, masks, score));
    }
    Ok(out)
}

/// Random moving filled-box proposals labeled unknown, the comparison arm
/// for unknown recall.
pub fn random_proposal_tracks(
    dataset: &Dataset,
    video_ids: &[VideoId],
    proposals_per_video: usize,
    seed: u64,
) -> TrackMap {
    let mut out: TrackMap = BTreeMap::new();
    for &vid in video_ids {
        let meta = &dataset.videos[&vid];
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(vid));
        let mut tracks = Vec::with_capacity(proposals_per_video);
        for _ in 0..proposals_per_video {
            let bw = rng.gen_range(0.15..0.5) * meta.width as f64;
            let bh = rng.gen_range(0.15..0.5) * meta.height as f64;
            let mut cx = rng.gen_range(bw / 2.0..meta.width as f64 - bw / 2.0);
            let mut cy = rng.gen_range(bh / 2.0..meta.height as f64 - bh / 2.0);
            let mut vx: f64 = rng.gen_range(-2.0..2.0);
            let mut vy: f64 = rng.gen_range(-2.0..2.0);
            let mut masks = Vec::with_capacity(meta.length);
            for f in 0..meta.length {
                if f > 0 {
                    cx += vx;
                    cy += vy;
                    if cx < bw / 2.0 || cx > meta.width as f64 - bw / 2.0 {
                        vx = -vx;
                        cx = cx.clamp(bw / 2.0, meta.width as f64 - bw / 2.0);
                    }
                    if cy < bh / 2.0 || cy > meta.height as f64 - bh / 2.0 {
                        vy = -vy;
                        cy = cy.clamp(bh / 2.0, meta.height as f64 - bh / 2.0);
                    }
                }
                masks.push(Mask::from_fn(meta.height, meta.width, |r, c| {
                    (c as f64 + 0.5 - cx).abs() <= bw / 2.0 && (r as f64 + 0.5 - cy).abs() <= bh / 2.0
                }));
            }
            let score = rng.gen_range(0.05..1.0);
            tracks.push(InstanceTrack::from_masks(UNKNOWN_LABEL, masks, score));
        }
        out.insert(vid, tracks);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(cat: CategoryId, score: f64, frames: &[&[(usize, usize, usize, usize)]]) -> InstanceTrack {
        // each frame: list of filled (r0, r1, c0, c1) rectangles on 16x16
        let masks = frames
            .iter()
            .map(|rects| {
                let mut m = Mask::zeros(16, 16);
                for &(r0, r1, c0, c1) in rects.iter() {
                    for r in r0..r1 {
                        for c in c0..c1 {
                            m.set(r, c, true);
                        }
                    }
                }
                m
            })
            .collect();
        InstanceTrack::from_masks(cat, masks, score)
    }

    #[test]
    fn st_iou_basic_cases() {
        let a = track(1, 1.0, &[&[(0, 8, 0, 8)], &[(0, 8, 0, 8)]]);
        assert_eq!(st_iou(&a, &a).unwrap(), 1.0);
        let b = track(1, 1.0, &[&[(8, 16, 8, 16)], &[(8, 16, 8, 16)]]);
        assert_eq!(st_iou(&a, &b).unwrap(), 0.0);
        // pred equals gt on frame 1, empty on frame 2 -> I=A, U=2A -> 0.5
        let c = track(1, 1.0, &[&[(0, 8, 0, 8)], &[]]);
        assert_eq!(st_iou(&c, &a).unwrap(), 0.5);
        // symmetry
        assert_eq!(st_iou(&a, &c).unwrap(), st_iou(&c, &a).unwrap());
        // frame-count mismatch
        let d = track(1, 1.0, &[&[(0, 8, 0, 8)]]);
        assert!(st_iou(&a, &d).is_err());
        // both tracks empty on every frame -> 0
        let e = track(1, 1.0, &[&[], &[]]);
        assert_eq!(st_iou(&e, &e).unwrap(), 0.0);
    }

    fn single_map(vid: VideoId, t: InstanceTrack) -> TrackMap {
        BTreeMap::from([(vid, vec![t])])
    }

    #[test]
    fn single_prediction_ap_hand_case() {
        // exact IoU 0.9: gt fills rows 0..10, the prediction covers 9 of
        // those rows and nothing else => intersection 90 / union 100.
        let gt = track(1, 1.0, &[&[(0, 10, 0, 10)]]);
        let pred = track(1, 0.8, &[&[(0, 9, 0, 10)]]);
        let iou = st_iou(&pred, &gt).unwrap();
        assert!((iou - 0.9).abs() < 1e-12);
        let metrics = evaluate_known(
            &single_map(1, pred),
            &single_map(1, gt),
            &[1],
            &EvalConfig::default(),
        )
        .unwrap();
        let m = metrics[&1];
        // matched at thresholds 0.50..0.90 (9 of 10), unmatched at 0.95
        assert!((m.ap - 0.9).abs() < 1e-12, "ap={}", m.ap);
        assert!((m.ar1 - 0.9).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let gt = track(2, 1.0, &[&[(0, 10, 0, 10)], &[(2, 12, 2, 12)]]);
        let perfect = InstanceTrack { score: 0.9, ..gt.clone() };
        let m = evaluate_known(&single_map(1, perfect), &single_map(1, gt.clone()), &[2], &EvalConfig::default())
            .unwrap()[&2];
        assert_eq!(m.ap, 1.0);
        assert_eq!(m.ar1, 1.0);

        let empty: TrackMap = BTreeMap::new();
        let m0 = evaluate_known(&empty, &single_map(1, gt), &[2], &EvalConfig::default()).unwrap()[&2];
        assert_eq!(m0.ap, 0.0);
        assert_eq!(m0.ar1, 0.0);
    }

    #[test]
    fn unknown_eval_ignores_known_class_gts() {
        // prediction overlaps a known-class object; unknown gt elsewhere
        let pred = track(UNKNOWN_LABEL, 0.9, &[&[(0, 10, 0, 10)]]);
        let unknown_gt = track(UNKNOWN_LABEL, 1.0, &[&[(12, 16, 12, 16)]]);
        let m = evaluate_unknown(&single_map(1, pred), &single_map(1, unknown_gt), &EvalConfig::default())
            .unwrap();
        assert_eq!(m.ap, 0.0, "unknown prediction on a known object is a false positive");
    }

    #[test]
    fn score_monotonicity_of_ap() {
        let gt1 = track(1, 1.0, &[&[(0, 10, 0, 10)]]);
        let gt2 = track(1, 1.0, &[&[(10, 16, 10, 16)]]);
        let gts: TrackMap = BTreeMap::from([(1, vec![gt1.clone()]), (2, vec![gt2.clone()])]);
        let tp1 = InstanceTrack { score: 0.3, ..gt1 };
        let fp = track(1, 0.5, &[&[(12, 16, 0, 4)]]);
        let tp2 = InstanceTrack { score: 0.6, ..gt2 };
        let preds: TrackMap = BTreeMap::from([(1, vec![tp1.clone(), fp.clone()]), (2, vec![tp2.clone()])]);
        let base = evaluate_known(&preds, &gts, &[1], &EvalConfig::default()).unwrap()[&1].ap;
        // raise the low TP score above the FP
        let tp1_up = InstanceTrack { score: 0.9, ..tp1 };
        let preds_up: TrackMap = BTreeMap::from([(1, vec![tp1_up, fp]), (2, vec![tp2])]);
        let up = evaluate_known(&preds_up, &gts, &[1], &EvalConfig::default()).unwrap()[&1].ap;
        assert!(up >= base, "raising TP scores may not lower AP: {up} vs {base}");
    }

    #[test]
    fn report_sections_and_both_mean() {
        let per_class: BTreeMap<CategoryId, ClassMetrics> = BTreeMap::from([
            (1, ClassMetrics { ap: 0.8, ar1: 0.7, gt_count: 3 }),
            (2, ClassMetrics { ap: 0.6, ar1: 0.5, gt_count: 2 }),
            (3, ClassMetrics { ap: 0.4, ar1: 0.3, gt_count: 1 }),
            (4, ClassMetrics { ap: 0.2, ar1: 0.1, gt_count: 4 }),
            (5, ClassMetrics { ap: 0.0, ar1: 0.0, gt_count: 0 }), // no gt: excluded
        ]);
        let report = build_report(2, &per_class, None, &[1, 2, 3], "fp");
        let prev = report.previously_known.as_ref().unwrap();
        assert!((prev.ap - (0.8 + 0.6 + 0.4) / 3.0).abs() < 1e-12);
        let cur = report.current_known.as_ref().unwrap();
        assert!((cur.ap - 0.2).abs() < 1e-12);
        let both = report.both.as_ref().unwrap();
        assert!((both.ap - (0.8 + 0.6 + 0.4 + 0.2) / 4.0).abs() < 1e-12, "unweighted class mean");

        let r1 = build_report(1, &per_class, Some(ClassMetrics { ap: 0.5, ar1: 0.4, gt_count: 2 }), &[], "fp");
        assert!(r1.known.is_some() && r1.unknown.is_some());
        let table = r1.to_table();
        assert!(table.contains("Known") && table.contains("Unknown"));
    }

    #[test]
    fn prediction_file_roundtrip() {
        let preds: TrackMap = BTreeMap::from([
            (3, vec![track(1, 0.75, &[&[(0, 4, 0, 4)], &[]]), track(0, 0.5, &[&[], &[(2, 6, 2, 6)]])]),
        ]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.json");
        save_predictions(&preds, &path).unwrap();
        let loaded = load_predictions(&path).unwrap();
        assert_eq!(loaded.len(), 1);
        let (a, b) = (&preds[&3], &loaded[&3]);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.masks, y.masks);
            assert_eq!(x.category_id, y.category_id);
            assert_eq!(x.score, y.score);
        }
    }
}
