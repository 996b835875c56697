//! Batch visualization: per-frame objectness heatmaps and predicted-mask
//! overlays, plus the STO diagnostic dump consumed alongside them.

use std::path::Path;

use serde_json::json;

use crate::autodiff::Tape;
use crate::config::RunConfig;
use crate::data_model::{load_clip, ClassRegistry, Dataset, VideoId, UNKNOWN_LABEL};
use crate::decoder_heads::{decoder_forward, heads_forward};
use crate::error::{Error, Result};
use crate::feature_net::{backbone_stage16_activations, features_forward};
use crate::model::Model;
use crate::openworld_protocol::{predict_video, CLIP_ALIGN};
use crate::sto::{enriched_16, objectness_map, score_values};
use crate::tensor::Tensor;

/// Five-stop blue-to-red heat ramp over `[0,1]`.
fn heat_color(v: f64) -> [u8; 3] {
    let stops: [(f64, [f64; 3]); 5] = [
        (0.0, [20.0, 20.0, 90.0]),
        (0.25, [30.0, 90.0, 200.0]),
        (0.5, [40.0, 200.0, 120.0]),
        (0.75, [250.0, 220.0, 50.0]),
        (1.0, [230.0, 40.0, 30.0]),
    ];
    let v = v.clamp(0.0, 1.0);
    for pair in stops.windows(2) {
        let (a, ca) = pair[0];
        let (b, cb) = pair[1];
        if v <= b {
            let t = if b > a { (v - a) / (b - a) } else { 0.0 };
            return [
                (ca[0] + t * (cb[0] - ca[0])) as u8,
                (ca[1] + t * (cb[1] - ca[1])) as u8,
                (ca[2] + t * (cb[2] - ca[2])) as u8,
            ];
        }
    }
    [230, 40, 30]
}

const INSTANCE_PALETTE: [[u8; 3]; 6] = [
    [255, 60, 60],   // unknown: red
    [80, 220, 100],  // greens/blues/purples for known instances
    [80, 140, 255],
    [240, 200, 60],
    [200, 100, 240],
    [80, 230, 230],
];

/// Emit `<frame>_input.png`, `<frame>_objectness.png` and
/// `<frame>_overlay.png` panels for one video, plus a diagnostic dump of
/// the objectness map and per-query scores.
pub fn visualize_video(
    model: &Model,
    dataset: &Dataset,
    video_id: VideoId,
    registry: &ClassRegistry,
    cfg: &RunConfig,
    out_dir: &Path,
) -> Result<()> {
    let meta = dataset
        .videos
        .get(&video_id)
        .ok_or_else(|| Error::Eval(format!("unknown video id {video_id}")))?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let clip = load_clip(dataset, video_id, 0, meta.length, CLIP_ALIGN)?;

    // objectness map (learned STO map, or channel-mean baseline when ablated)
    let mut tape = Tape::new();
    let (map, scores) = if model.cfg.enable_sto {
        let enc = features_forward(model, &mut tape, &clip);
        let dec = decoder_forward(model, &mut tape, &enc);
        let heads = heads_forward(model, &mut tape, &dec, registry)?;
        let e16 = enriched_16(&enc)?;
        let omap = objectness_map(model, &mut tape, e16.var)?;
        let map = tape.value(omap).clone();
        let scores = score_values(&map, tape.value(heads.boxes));
        (map, scores)
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
        (mean, Vec::new())
    };

    // diagnostic dump
    let dump = json!({
        "video_id": video_id,
        "map_shape": map.shape(),
        "o_map": map.data(),
        "query_scores": scores,
    });
    std::fs::write(out_dir.join(format!("video_{video_id:04}_sto.json")), dump.to_string())
        .map_err(|e| Error::io(out_dir, e))?;

    let predictions = predict_video(model, dataset, video_id, registry, cfg)?;

    let (h, w) = (meta.height, meta.width);
    let (hs, ws) = (map.shape()[1], map.shape()[2]);
    // normalize the map over the whole clip for display
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in map.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = (hi - lo).max(1e-9);

    for f in 0..meta.length {
        // input panel
        let mut input = image::RgbImage::new(w as u32, h as u32);
        for r in 0..h {
            for c in 0..w {
                let px = |ch: usize| {
                    (clip.frames.at(&[f, ch, r + clip.pad_top, c + clip.pad_left]) * 255.0) as u8
                };
                input.put_pixel(c as u32, r as u32, image::Rgb([px(0), px(1), px(2)]));
            }
        }
        input
            .save(out_dir.join(format!("{f:05}_input.png")))
            .map_err(|e| Error::Io { path: "input panel".into(), source: std::io::Error::other(e) })?;

        // objectness heatmap, nearest-cell upsampled to frame size
        let mut heat = image::RgbImage::new(w as u32, h as u32);
        for r in 0..h {
            for c in 0..w {
                let mr = ((r + clip.pad_top) * hs / clip.height()).min(hs - 1);
                let mc = ((c + clip.pad_left) * ws / clip.width()).min(ws - 1);
                let v = (map.at(&[f, mr, mc]) - lo) / range;
                heat.put_pixel(c as u32, r as u32, image::Rgb(heat_color(v)));
            }
        }
        heat.save(out_dir.join(format!("{f:05}_objectness.png")))
            .map_err(|e| Error::Io { path: "heatmap panel".into(), source: std::io::Error::other(e) })?;

        // prediction overlay
        let mut overlay = input.clone();
        for (i, track) in predictions.iter().enumerate() {
            let color = if track.category_id == UNKNOWN_LABEL {
                INSTANCE_PALETTE[0]
            } else {
                INSTANCE_PALETTE[1 + i % (INSTANCE_PALETTE.len() - 1)]
            };
            let mask = &track.masks[f];
            for r in 0..h {
                for c in 0..w {
                    if mask.get(r, c) {
                        let p = overlay.get_pixel(c as u32, r as u32).0;
                        let blend = |a: u8, b: u8| ((a as u16 * 2 + b as u16 * 3) / 5) as u8;
                        overlay.put_pixel(
                            c as u32,
                            r as u32,
                            image::Rgb([blend(p[0], color[0]), blend(p[1], color[1]), blend(p[2], color[2])]),
                        );
                    }
                }
            }
        }
        overlay
            .save(out_dir.join(format!("{f:05}_overlay.png")))
            .map_err(|e| Error::Io { path: "overlay panel".into(), source: std::io::Error::other(e) })?;
    }
    Ok(())
}
