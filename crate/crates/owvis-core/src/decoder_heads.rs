//! Instance-query decoder, the class-specific / class-agnostic /
//! regression branches, and the dynamic-kernel segmentation block.

use crate::autodiff::{Tape, Var};
use crate::data_model::ClassRegistry;
use crate::error::{Error, Result};
use crate::feature_net::EncodedFeatures;
use crate::model::Model;

/// Decoder output: temporally shared instance features and per-frame box
/// features.
pub struct DecoderOutput {
    /// `[q, d]`
    pub instance_features: Var,
    /// `[q, M, d]`
    pub box_features: Var,
}

/// The three branch outputs.
pub struct BranchOutputs {
    /// `[q, C+1]`; index 0 is the unknown class.
    pub class_logits: Var,
    /// `[q]` class-agnostic foreground logits.
    pub objectness_logits: Var,
    /// `[q, M, 4]` normalized (cx, cy, w, h).
    pub boxes: Var,
}

/// Self-attention over the queries, cross-attention to the enriched
/// tokens, then one frame-restricted cross-attention per frame to
/// specialize box features.
pub fn decoder_forward(model: &Model, tape: &mut Tape, enc: &EncodedFeatures) -> DecoderOutput {
    let q = model.cfg.queries;
    let d = model.cfg.d;
    let mut x = model.store.var(tape, "decoder.queries");
    for layer in &model.dec_layers {
        x = layer.forward(tape, &model.store, x, enc.tokens);
    }
    let f_i = model.dec_final_norm.forward(tape, &model.store, x);

    let m = enc.enriched.frames;
    let mut per_frame = Vec::with_capacity(m);
    for fi in 0..m {
        let tokens_m = tape.gather_rows(enc.tokens, &enc.frame_token_indices[fi]);
        let n = model.box_norm.forward(tape, &model.store, f_i);
        let a = model.box_attn.forward(tape, &model.store, n, tokens_m);
        per_frame.push(tape.add(f_i, a));
    }
    let stacked = tape.concat0(&per_frame); // [M*q, d]
    let stacked = tape.reshape(stacked, &[m, q, d]);
    let box_features = tape.permute(stacked, &[1, 0, 2]); // [q, M, d]

    DecoderOutput { instance_features: f_i, box_features }
}

/// Class logits over C+1, a scalar objectness logit per query, and
/// per-frame boxes through a 3-layer feed-forward head with sigmoid.
pub fn heads_forward(
    model: &Model,
    tape: &mut Tape,
    dec: &DecoderOutput,
    registry: &ClassRegistry,
) -> Result<BranchOutputs> {
    let width = model.class_head.dim_out;
    if width != registry.num_known() + 1 {
        return Err(Error::ClassifierWidthMismatch {
            expected: registry.num_known() + 1,
            actual: width,
        });
    }
    let class_logits = model.class_head.forward(tape, &model.store, dec.instance_features);
    let obj = model.obj_head.forward(tape, &model.store, dec.instance_features);
    let q = model.cfg.queries;
    let objectness_logits = tape.reshape(obj, &[q]);

    let shape = tape.shape(dec.box_features).to_vec();
    let (m, d) = (shape[1], shape[2]);
    let flat = tape.reshape(dec.box_features, &[q * m, d]);
    let h = model.box_mlp[0].forward(tape, &model.store, flat);
    let h = tape.relu(h);
    let h = model.box_mlp[1].forward(tape, &model.store, h);
    let h = tape.relu(h);
    let h = model.box_mlp[2].forward(tape, &model.store, h);
    let h = tape.sigmoid(h);
    let boxes = tape.reshape(h, &[q, m, 4]);

    Ok(BranchOutputs { class_logits, objectness_logits, boxes })
}

/// Widen the classifier for the categories newly revealed in
/// `registry_new`. Existing classes must keep their positions.
pub fn incremental_extend(
    model: &mut Model,
    registry_old: &ClassRegistry,
    registry_new: &ClassRegistry,
    seed: u64,
) -> Result<()> {
    let old = registry_old.known_ids();
    let new = registry_new.known_ids();
    if new.len() < old.len() || &new[..old.len()] != old {
        return Err(Error::RegistryShrink(format!(
            "new registry {new:?} does not extend old registry {old:?}"
        )));
    }
    if model.num_known != old.len() {
        return Err(Error::ClassifierWidthMismatch {
            expected: old.len() + 1,
            actual: model.num_known + 1,
        });
    }
    model.extend_classifier(new.len(), seed)
}

/// Mask logits for every query at 1/8 of the clip resolution:
/// `[q, M, H/8, W/8]`. Enriched scales are upsampled to 1/8, summed,
/// projected, and probed by per-instance dynamic kernels.
pub fn segmentation_forward(model: &Model, tape: &mut Tape, f_i: Var, enc: &EncodedFeatures) -> Var {
    let q = model.cfg.queries;
    let all: Vec<usize> = (0..q).collect();
    segmentation_forward_subset(model, tape, f_i, enc, &all)
}

/// Mask logits for a subset of queries: `[len, M, H/8, W/8]`.
pub fn segmentation_forward_subset(
    model: &Model,
    tape: &mut Tape,
    f_i: Var,
    enc: &EncodedFeatures,
    query_indices: &[usize],
) -> Var {
    let d = model.cfg.d;
    let dm = model.cfg.mask_dim;
    let m = enc.enriched.frames;
    let (h8, w8) = (enc.clip_h / 8, enc.clip_w / 8);

    // fused 1/8 map: upsample every enriched scale and sum
    let mut fused: Option<Var> = None;
    for e in &enc.enriched.entries {
        let maps = tape.reshape(e.var, &[m * d, e.h, e.w]);
        let up = tape.upsample_bilinear(maps, h8, w8);
        let up = tape.reshape(up, &[m, d, h8, w8]);
        fused = Some(match fused {
            None => up,
            Some(acc) => tape.add(acc, up),
        });
    }
    let fused = fused.expect("at least one scale");
    let fused = tape.permute(fused, &[0, 2, 3, 1]); // [M, H8, W8, d]
    let flat = tape.reshape(fused, &[m * h8 * w8, d]);
    let feat = model.seg_proj.forward(tape, &model.store, flat);
    let feat = tape.relu(feat); // [M*H8*W8, dm]

    let sel = tape.gather_rows(f_i, query_indices);
    let kb = model.seg_kernel.forward(tape, &model.store, sel); // [n, dm+1]
    let kb_t = tape.permute(kb, &[1, 0]); // [dm+1, n]
    let kernels = tape.slice0(kb_t, 0, dm); // [dm, n]
    let bias = tape.slice0(kb_t, dm, 1); // [1, n]
    let n = query_indices.len();
    let bias = tape.reshape(bias, &[n]);

    let logits = tape.matmul(feat, kernels); // [M*H8*W8, n]
    let logits = tape.add_rowvec(logits, bias);
    let logits = tape.reshape(logits, &[m, h8, w8, n]);
    tape.permute(logits, &[3, 0, 1, 2]) // [n, M, H8, W8]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data_model::VideoClip;
    use crate::feature_net::features_forward;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d: 16,
            queries: 6,
            enc_layers: 2,
            dec_layers: 2,
            heads: 2,
            ffn_dim: 32,
            mask_dim: 4,
            backbone_channels: vec![4, 6, 8, 10, 12],
            scratch_mid_channels: 6,
            max_frames: 8,
            ..ModelConfig::desk()
        }
    }

    fn clip(m: usize, seed: u64) -> VideoClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = Tensor::rand_uniform(&[m, 3, 32, 32], 0.0, 1.0, &mut rng);
        VideoClip::new(frames, 1, (0..m).collect(), 32)
    }

    #[test]
    fn decoder_output_shapes() {
        let model = Model::new(&cfg(), 3, 1);
        let mut tape = Tape::new();
        let enc = features_forward(&model, &mut tape, &clip(2, 2));
        let dec = decoder_forward(&model, &mut tape, &enc);
        assert_eq!(tape.shape(dec.instance_features), &[6, 16]);
        assert_eq!(tape.shape(dec.box_features), &[6, 2, 16]);
    }

    #[test]
    fn single_frame_clip_works() {
        let model = Model::new(&cfg(), 3, 1);
        let mut tape = Tape::new();
        let enc = features_forward(&model, &mut tape, &clip(1, 3));
        let dec = decoder_forward(&model, &mut tape, &enc);
        assert_eq!(tape.shape(dec.box_features), &[6, 1, 16]);
        let reg = ClassRegistry::new(vec![1, 2, 3]).unwrap();
        let heads = heads_forward(&model, &mut tape, &dec, &reg).unwrap();
        assert_eq!(tape.shape(heads.boxes), &[6, 1, 4]);
    }

    #[test]
    fn query_permutation_permutes_instance_features() {
        let c = cfg();
        let model = Model::new(&c, 3, 5);
        let video = clip(2, 7);
        let mut tape = Tape::new();
        let enc = features_forward(&model, &mut tape, &video);
        let dec = decoder_forward(&model, &mut tape, &enc);
        let fi = tape.value(dec.instance_features).clone();

        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut model2 = Model::new(&c, 3, 5);
        let queries = model.store.get("decoder.queries").clone();
        let mut permuted = Tensor::zeros(&[c.queries, c.d]);
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..c.d {
                permuted.set(&[dst, j], queries.at(&[src, j]));
            }
        }
        model2.store.set("decoder.queries", permuted);
        let mut tape2 = Tape::new();
        let enc2 = features_forward(&model2, &mut tape2, &video);
        let dec2 = decoder_forward(&model2, &mut tape2, &enc2);
        let fi2 = tape2.value(dec2.instance_features).clone();

        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..c.d {
                let a = fi.at(&[src, j]);
                let b = fi2.at(&[dst, j]);
                assert!((a - b).abs() < 1e-9, "row {src}->{dst} col {j}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn head_widths_and_box_range() {
        let model = Model::new(&cfg(), 3, 4);
        let reg = ClassRegistry::new(vec![1, 2, 3]).unwrap();
        let mut tape = Tape::new();
        let enc = features_forward(&model, &mut tape, &clip(2, 9));
        let dec = decoder_forward(&model, &mut tape, &enc);
        let heads = heads_forward(&model, &mut tape, &dec, &reg).unwrap();
        assert_eq!(tape.shape(heads.class_logits), &[6, 4]);
        assert_eq!(tape.shape(heads.objectness_logits), &[6]);
        assert!(tape.value(heads.boxes).data().iter().all(|v| (0.0..=1.0).contains(v)));

        // registry mismatch is an explicit error
        let reg5 = ClassRegistry::new(vec![1, 2, 3, 4, 5]).unwrap();
        assert!(matches!(
            heads_forward(&model, &mut tape, &dec, &reg5),
            Err(Error::ClassifierWidthMismatch { .. })
        ));
    }

    #[test]
    fn extension_preserves_old_class_logits() {
        let c = cfg();
        let mut model = Model::new(&c, 3, 4);
        let reg3 = ClassRegistry::new(vec![1, 2, 3]).unwrap();
        let reg5 = reg3.extended(&[4, 5]).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let probe = Tensor::randn(&[c.queries, c.d], 1.0, &mut rng);

        let mut tape = Tape::new();
        let x = tape.constant(probe.clone());
        let before = model.class_head.forward(&mut tape, &model.store, x);
        let before = tape.value(before).clone();

        incremental_extend(&mut model, &reg3, &reg5, 77).unwrap();
        let mut tape2 = Tape::new();
        let x2 = tape2.constant(probe);
        let after = model.class_head.forward(&mut tape2, &model.store, x2);
        let after = tape2.value(after).clone();

        assert_eq!(after.shape(), &[c.queries, 6]);
        for r in 0..c.queries {
            for col in 0..4 {
                assert_eq!(before.at(&[r, col]), after.at(&[r, col]), "old logits must be untouched");
            }
        }
    }

    #[test]
    fn extension_identity_and_shrink() {
        let mut model = Model::new(&cfg(), 3, 4);
        let reg3 = ClassRegistry::new(vec![1, 2, 3]).unwrap();
        let w = model.store.get("heads.class.w").clone();
        incremental_extend(&mut model, &reg3, &reg3, 1).unwrap();
        assert_eq!(&w, model.store.get("heads.class.w"));

        let reg2 = ClassRegistry::new(vec![1, 2]).unwrap();
        assert!(incremental_extend(&mut model, &reg3, &reg2, 1).is_err());
    }

    #[test]
    fn segmentation_shapes_and_determinism() {
        let c = cfg();
        let model = Model::new(&c, 3, 6);
        let mut tape = Tape::new();
        let enc = features_forward(&model, &mut tape, &clip(2, 11));
        // two identical instance features must give identical mask logits
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut fi = Tensor::randn(&[c.queries, c.d], 1.0, &mut rng);
        for j in 0..c.d {
            let v = fi.at(&[0, j]);
            fi.set(&[1, j], v);
        }
        let fi = tape.constant(fi);
        let masks = segmentation_forward(&model, &mut tape, fi, &enc);
        assert_eq!(tape.shape(masks), &[6, 2, 4, 4]);
        let mv = tape.value(masks);
        assert!(mv.is_finite());
        let plane = 2 * 4 * 4;
        assert_eq!(mv.data()[0..plane], mv.data()[plane..2 * plane]);
    }
}
