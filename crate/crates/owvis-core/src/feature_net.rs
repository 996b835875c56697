//! Multi-scale feature extraction and enrichment: a small strided CNN
//! backbone (pluggable stand-in for a pre-trained network), the ScratchNet
//! shallow 3D-convolution stream trained from random initialization, the
//! extended-scale assembly, and the encoder whose intermediate layers are
//! scale-wise fused into the final output.

use crate::autodiff::{Tape, Var};
use crate::data_model::VideoClip;
use crate::error::{Error, Result};
use crate::model::{
    Model, SCALE_SLOT_16, SCALE_SLOT_32, SCALE_SLOT_8, SCALE_SLOT_SCRATCH,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaleKind {
    Backbone,
    Scratch,
}

/// One feature scale: a `[M, d, h, w]` map tagged with its origin and
/// downsampling factor.
#[derive(Clone, Copy, Debug)]
pub struct ScaleEntry {
    pub kind: ScaleKind,
    pub downsample: usize,
    pub h: usize,
    pub w: usize,
    pub var: Var,
}

impl ScaleEntry {
    pub fn scale_slot(&self) -> usize {
        match (self.kind, self.downsample) {
            (ScaleKind::Backbone, 8) => SCALE_SLOT_8,
            (ScaleKind::Backbone, 16) => SCALE_SLOT_16,
            (ScaleKind::Scratch, 16) => SCALE_SLOT_SCRATCH,
            (ScaleKind::Backbone, 32) => SCALE_SLOT_32,
            other => panic!("no scale slot for {other:?}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MultiScaleVars {
    pub frames: usize,
    pub entries: Vec<ScaleEntry>,
}

/// Encoder output: enriched per-scale maps plus the flattened token
/// matrix the decoder attends to.
pub struct EncodedFeatures {
    pub enriched: MultiScaleVars,
    /// `[T, d]` enriched tokens, ordered scale-major then frame-major.
    pub tokens: Var,
    /// `[T, d]` final-layer tokens before fusion (the enrichment baseline).
    pub final_tokens: Var,
    /// Token row indices belonging to each frame.
    pub frame_token_indices: Vec<Vec<usize>>,
    pub clip_h: usize,
    pub clip_w: usize,
}

fn conv_stage(model: &Model, tape: &mut Tape, x: Var, stage: usize, stride: usize, pad: usize) -> Var {
    let w = model.store.var(tape, &format!("backbone.s{stage}.w"));
    let b = model.store.var(tape, &format!("backbone.s{stage}.b"));
    let y = tape.conv2d(x, w, b, stride, pad);
    let g = model.store.var(tape, &format!("backbone.n{stage}.g"));
    let bb = model.store.var(tape, &format!("backbone.n{stage}.b"));
    let y = tape.layer_norm(y, 1, g, bb, 1e-5);
    tape.relu(y)
}

/// Per-frame multi-scale features at 1/8, 1/16 and 1/32 of the clip
/// resolution, each projected to `d` channels.
pub fn backbone_forward(model: &Model, tape: &mut Tape, clip: &VideoClip) -> MultiScaleVars {
    let (h, w) = (clip.height(), clip.width());
    assert!(
        h % 32 == 0 && w % 32 == 0,
        "backbone input must be padded to multiples of 32, got {h}x{w}"
    );
    let m = clip.num_frames();
    let x = tape.constant(clip.frames.clone());
    let s1 = conv_stage(model, tape, x, 1, 2, 1);
    let s2 = conv_stage(model, tape, s1, 2, 2, 1);
    let s3 = conv_stage(model, tape, s2, 3, 2, 1); // 1/8
    let s4 = conv_stage(model, tape, s3, 4, 2, 1); // 1/16
    let s5 = conv_stage(model, tape, s4, 5, 2, 1); // 1/32
    let mut entries = Vec::with_capacity(3);
    for (ds, stage_out) in [(8usize, s3), (16, s4), (32, s5)] {
        let pw = model.store.var(tape, &format!("backbone.proj{ds}.w"));
        let pb = model.store.var(tape, &format!("backbone.proj{ds}.b"));
        let proj = tape.conv2d(stage_out, pw, pb, 1, 0);
        entries.push(ScaleEntry { kind: ScaleKind::Backbone, downsample: ds, h: h / ds, w: w / ds, var: proj });
    }
    let _ = m;
    MultiScaleVars { frames: m, entries }
}

/// Raw backbone 1/16-scale stage activations (pre-projection), used by the
/// baseline pseudo-labeling scorer. `[M, C4, H/16, W/16]`.
pub fn backbone_stage16_activations(model: &Model, tape: &mut Tape, clip: &VideoClip) -> Var {
    let x = tape.constant(clip.frames.clone());
    let s1 = conv_stage(model, tape, x, 1, 2, 1);
    let s2 = conv_stage(model, tape, s1, 2, 2, 1);
    let s3 = conv_stage(model, tape, s2, 3, 2, 1);
    conv_stage(model, tape, s3, 4, 2, 1)
}

/// ScratchNet: two 3D convolution + layer norm stages. Spatial stride 4
/// per stage (1/16 total); the temporal kernel is 4 with stride 1 and
/// (1,2) padding so the M frames are preserved. Output `[M, d, H/16, W/16]`.
pub fn scratchnet_forward(model: &Model, tape: &mut Tape, clip: &VideoClip) -> Var {
    let (h, w) = (clip.height(), clip.width());
    assert!(h % 16 == 0 && w % 16 == 0, "ScratchNet input must be a multiple of 16");
    let m = clip.num_frames();
    let x = tape.constant(clip.frames.clone());
    let x = tape.permute(x, &[1, 0, 2, 3]); // [3, M, H, W]
    let w1 = model.store.var(tape, "scratch.c1.w");
    let b1 = model.store.var(tape, "scratch.c1.b");
    let y = tape.conv3d(x, w1, b1, (1, 4, 4), (1, 2), 0);
    let g1 = model.store.var(tape, "scratch.n1.g");
    let n1 = model.store.var(tape, "scratch.n1.b");
    let y = tape.layer_norm(y, 0, g1, n1, 1e-5);
    let y = tape.relu(y);
    let w2 = model.store.var(tape, "scratch.c2.w");
    let b2 = model.store.var(tape, "scratch.c2.b");
    let y = tape.conv3d(y, w2, b2, (1, 4, 4), (1, 2), 0);
    let g2 = model.store.var(tape, "scratch.n2.g");
    let n2 = model.store.var(tape, "scratch.n2.b");
    let y = tape.layer_norm(y, 0, g2, n2, 1e-5);
    debug_assert_eq!(tape.shape(y), &[model.cfg.d, m, h / 16, w / 16]);
    tape.permute(y, &[1, 0, 2, 3]) // [M, d, H/16, W/16]
}

/// Insert the ScratchNet map as an additional scale next to the backbone
/// 1/16 entry, ordered by decreasing spatial area.
pub fn assemble_extended(
    model: &Model,
    tape: &mut Tape,
    backbone: &MultiScaleVars,
    scratch: Option<Var>,
) -> Result<MultiScaleVars> {
    let d = model.cfg.d;
    for e in &backbone.entries {
        let s = tape.shape(e.var);
        if s[1] != d {
            return Err(Error::Assembly(format!("backbone scale has {} channels, expected {d}", s[1])));
        }
    }
    let mut entries = backbone.entries.clone();
    if let Some(sv) = scratch {
        let s = tape.shape(sv).to_vec();
        if s[1] != d {
            return Err(Error::Assembly(format!(
                "scratch map has {} channels, expected {d}",
                s[1]
            )));
        }
        if s[0] != backbone.frames {
            return Err(Error::Assembly(format!(
                "scratch map has {} frames, backbone has {}",
                s[0], backbone.frames
            )));
        }
        let entry = ScaleEntry { kind: ScaleKind::Scratch, downsample: 16, h: s[2], w: s[3], var: sv };
        // directly after the backbone 1/16 entry (equal spatial area)
        let pos = entries
            .iter()
            .position(|e| e.downsample > 16)
            .unwrap_or(entries.len());
        entries.insert(pos, entry);
    }
    entries.sort_by_key(|e| std::cmp::Reverse(e.h * e.w * 2 - usize::from(e.kind == ScaleKind::Scratch)));
    Ok(MultiScaleVars { frames: backbone.frames, entries })
}

/// Fixed 2-D sinusoidal position features over an `h x w` grid.
pub fn sinusoidal_2d(h: usize, w: usize, d: usize) -> Tensor {
    assert!(d % 2 == 0);
    let half = d / 2;
    let mut data = vec![0.0; h * w * d];
    for r in 0..h {
        for c in 0..w {
            let y = (r as f64 + 0.5) / h as f64 * 2.0 * std::f64::consts::PI;
            let x = (c as f64 + 0.5) / w as f64 * 2.0 * std::f64::consts::PI;
            let base = (r * w + c) * d;
            for i in 0..half {
                let div = 10000f64.powf(((i / 2) * 2) as f64 / half as f64);
                data[base + i] = if i % 2 == 0 { (y / div).sin() } else { (y / div).cos() };
                data[base + half + i] = if i % 2 == 0 { (x / div).sin() } else { (x / div).cos() };
            }
        }
    }
    Tensor::new(&[h * w, d], data)
}

/// Run the encoder over the flattened multi-scale tokens and fuse the
/// intermediate layers into the final one, scale by scale.
pub fn encoder_forward(model: &Model, tape: &mut Tape, extended: &MultiScaleVars) -> EncodedFeatures {
    let d = model.cfg.d;
    let m = extended.frames;
    assert!(
        m <= model.cfg.max_frames,
        "clip has {m} frames but the model was built for at most {}",
        model.cfg.max_frames
    );

    // flatten scales to [rows, d] and record bookkeeping
    let mut token_parts = Vec::new();
    let mut pos_rows: Vec<Tensor> = Vec::new();
    let mut scale_idx: Vec<usize> = Vec::new();
    let mut frame_idx: Vec<usize> = Vec::new();
    let mut ranges = Vec::new(); // (start, len) per entry
    let mut offset = 0usize;
    for e in &extended.entries {
        let rows = m * e.h * e.w;
        let t = tape.permute(e.var, &[0, 2, 3, 1]);
        let t = tape.reshape(t, &[rows, d]);
        token_parts.push(t);
        let pos2d = sinusoidal_2d(e.h, e.w, d);
        for fi in 0..m {
            pos_rows.push(pos2d.clone());
            frame_idx.extend(std::iter::repeat(fi).take(e.h * e.w));
        }
        scale_idx.extend(std::iter::repeat(e.scale_slot()).take(rows));
        ranges.push((offset, rows));
        offset += rows;
    }
    let total = offset;
    let x0 = tape.concat0(&token_parts);

    // positional information: fixed 2-D sinusoid + learned scale + frame embeddings
    let mut pos_data = Vec::with_capacity(total * d);
    for p in &pos_rows {
        pos_data.extend_from_slice(p.data());
    }
    let pos_const = Tensor::new(&[total, d], pos_data);
    let x = tape.add_const(x0, &pos_const);
    let scale_table = model.store.var(tape, "embed.scale");
    let scale_emb = tape.gather_rows(scale_table, &scale_idx);
    let x = tape.add(x, scale_emb);
    let frame_table = model.store.var(tape, "embed.frame");
    let frame_emb = tape.gather_rows(frame_table, &frame_idx);
    let mut x = tape.add(x, frame_emb);

    let mut layer_outputs = Vec::with_capacity(model.enc_layers.len());
    for layer in &model.enc_layers {
        x = layer.forward(tape, &model.store, x);
        layer_outputs.push(x);
    }
    let final_tokens = model.enc_final_norm.forward(tape, &model.store, x);

    let n_layers = model.enc_layers.len();
    let tokens = if model.cfg.enable_fusion && n_layers >= 2 {
        fuse_intermediate_layers(
            model,
            tape,
            &layer_outputs[..n_layers - 1],
            final_tokens,
            &extended.entries,
            &ranges,
        )
    } else {
        final_tokens
    };

    // reshape the enriched tokens back into per-scale maps
    let mut entries = Vec::with_capacity(extended.entries.len());
    for (e, &(start, len)) in extended.entries.iter().zip(&ranges) {
        let part = tape.slice0(tokens, start, len);
        let map = tape.reshape(part, &[m, e.h, e.w, d]);
        let map = tape.permute(map, &[0, 3, 1, 2]);
        entries.push(ScaleEntry { var: map, ..*e });
    }

    let mut frame_token_indices = vec![Vec::new(); m];
    for (i, &f) in frame_idx.iter().enumerate() {
        frame_token_indices[f].push(i);
    }

    EncodedFeatures {
        enriched: MultiScaleVars { frames: m, entries },
        tokens,
        final_tokens,
        frame_token_indices,
        clip_h: extended.entries[0].h * extended.entries[0].downsample,
        clip_w: extended.entries[0].w * extended.entries[0].downsample,
    }
}

/// Scale-wise enrichment: the intermediate layer outputs of each scale are
/// concatenated channel-wise, passed through that scale's 1x1 fusion
/// layer, and added to the final-layer tokens.
pub(crate) fn fuse_intermediate_layers(
    model: &Model,
    tape: &mut Tape,
    intermediates: &[Var],
    final_tokens: Var,
    entries: &[ScaleEntry],
    ranges: &[(usize, usize)],
) -> Var {
    let mut enriched_parts = Vec::with_capacity(entries.len());
    for (e, &(start, len)) in entries.iter().zip(ranges) {
        let mut cols = Vec::with_capacity(intermediates.len());
        for inter in intermediates {
            let part = tape.slice0(*inter, start, len);
            cols.push(tape.permute(part, &[1, 0])); // [d, len]
        }
        let stacked = tape.concat0(&cols); // [(L-1)d, len]
        let stacked = tape.permute(stacked, &[1, 0]); // [len, (L-1)d]
        let fused = model.fusion[e.scale_slot()].forward(tape, &model.store, stacked);
        let base = tape.slice0(final_tokens, start, len);
        enriched_parts.push(tape.add(base, fused));
    }
    tape.concat0(&enriched_parts)
}

/// Full feature pipeline for one clip: backbone, optional ScratchNet
/// scale, assembly, encoder.
pub fn features_forward(model: &Model, tape: &mut Tape, clip: &VideoClip) -> EncodedFeatures {
    let backbone = backbone_forward(model, tape, clip);
    let scratch = if model.cfg.enable_scratch {
        Some(scratchnet_forward(model, tape, clip))
    } else {
        None
    };
    let extended = assemble_extended(model, tape, &backbone, scratch)
        .expect("internal scale assembly is consistent");
    encoder_forward(model, tape, &extended)
}
