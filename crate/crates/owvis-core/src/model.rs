//! Model container: every learnable parameter of the segmentation model
//! plus the layer descriptors that the forward passes in
//! [`crate::feature_net`], [`crate::decoder_heads`] and [`crate::sto`]
//! operate on.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{
    focal_bias, kaiming_uniform, xavier_uniform, CheckpointHeader, DecoderLayer, EncoderLayer,
    LayerNorm, Linear, MultiHeadAttention, ParamStore,
};
use crate::tensor::Tensor;

/// Scale-embedding slots; fixed so that ablation variants keep stable
/// indices.
pub const SCALE_SLOT_8: usize = 0;
pub const SCALE_SLOT_16: usize = 1;
pub const SCALE_SLOT_SCRATCH: usize = 2;
pub const SCALE_SLOT_32: usize = 3;
pub const NUM_SCALE_SLOTS: usize = 4;

const CLASS_PRIOR: f64 = 0.01;

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    /// Number of known classes C; the classifier is C+1 wide (index 0 is
    /// the unknown class).
    pub num_known: usize,
    pub(crate) enc_layers: Vec<EncoderLayer>,
    pub(crate) enc_final_norm: LayerNorm,
    pub(crate) fusion: Vec<Linear>, // one per scale slot
    pub(crate) dec_layers: Vec<DecoderLayer>,
    pub(crate) dec_final_norm: LayerNorm,
    pub(crate) box_attn: MultiHeadAttention,
    pub(crate) box_norm: LayerNorm,
    pub(crate) class_head: Linear,
    pub(crate) obj_head: Linear,
    pub(crate) box_mlp: [Linear; 3],
    pub(crate) seg_proj: Linear,
    pub(crate) seg_kernel: Linear,
}

impl Model {
    pub fn new(cfg: &ModelConfig, num_known: usize, seed: u64) -> Self {
        assert!(num_known >= 1, "model needs at least one known class");
        assert_eq!(cfg.backbone_channels.len(), 5, "backbone needs 5 stage widths");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d;

        // backbone: five stride-2 stages, channel layer norm each, then
        // 1x1 projections of the last three stages to d
        let mut cin = 3usize;
        for (i, &cout) in cfg.backbone_channels.iter().enumerate() {
            store.insert(
                &format!("backbone.s{}.w", i + 1),
                kaiming_uniform(&[cout, cin, 3, 3], cin * 9, &mut rng),
            );
            store.insert(&format!("backbone.s{}.b", i + 1), Tensor::zeros(&[cout]));
            store.insert(&format!("backbone.n{}.g", i + 1), Tensor::full(&[cout], 1.0));
            store.insert(&format!("backbone.n{}.b", i + 1), Tensor::zeros(&[cout]));
            cin = cout;
        }
        for (slot, stage) in [(8usize, 3usize), (16, 4), (32, 5)] {
            let c = cfg.backbone_channels[stage - 1];
            store.insert(
                &format!("backbone.proj{slot}.w"),
                kaiming_uniform(&[d, c, 1, 1], c, &mut rng),
            );
            store.insert(&format!("backbone.proj{slot}.b"), Tensor::zeros(&[d]));
        }

        // ScratchNet: two 3D convolutions with channel layer norms,
        // spatial stride 4 each, temporal extent preserved
        let sm = cfg.scratch_mid_channels;
        store.insert("scratch.c1.w", kaiming_uniform(&[sm, 3, 4, 4, 4], 3 * 64, &mut rng));
        store.insert("scratch.c1.b", Tensor::zeros(&[sm]));
        store.insert("scratch.n1.g", Tensor::full(&[sm], 1.0));
        store.insert("scratch.n1.b", Tensor::zeros(&[sm]));
        store.insert("scratch.c2.w", kaiming_uniform(&[d, sm, 4, 4, 4], sm * 64, &mut rng));
        store.insert("scratch.c2.b", Tensor::zeros(&[d]));
        store.insert("scratch.n2.g", Tensor::full(&[d], 1.0));
        store.insert("scratch.n2.b", Tensor::zeros(&[d]));

        // embeddings
        store.insert("embed.scale", Tensor::randn(&[NUM_SCALE_SLOTS, d], 0.02, &mut rng));
        store.insert("embed.frame", Tensor::randn(&[cfg.max_frames, d], 0.02, &mut rng));
        store.insert("decoder.queries", Tensor::randn(&[cfg.queries, d], 1.0 / (d as f64).sqrt(), &mut rng));

        let enc_layers: Vec<EncoderLayer> = (0..cfg.enc_layers)
            .map(|i| EncoderLayer::init(&mut store, &format!("encoder.l{i}"), d, cfg.heads, cfg.ffn_dim, &mut rng))
            .collect();
        let enc_final_norm = LayerNorm::init(&mut store, "encoder.final_norm", d);

        // per-scale fusion of intermediate encoder layers; zero-initialized
        // so a fresh model starts at the final-layer-only baseline
        let fused_in = (cfg.enc_layers.max(1) - 1).max(1) * d;
        let mut fusion = Vec::with_capacity(NUM_SCALE_SLOTS);
        for slot in 0..NUM_SCALE_SLOTS {
            let name = format!("encoder.fusion.s{slot}");
            store.insert(&format!("{name}.w"), Tensor::zeros(&[fused_in, d]));
            store.insert(&format!("{name}.b"), Tensor::zeros(&[d]));
            fusion.push(Linear { name, dim_in: fused_in, dim_out: d });
        }

        let dec_layers: Vec<DecoderLayer> = (0..cfg.dec_layers)
            .map(|i| DecoderLayer::init(&mut store, &format!("decoder.l{i}"), d, cfg.heads, cfg.ffn_dim, &mut rng))
            .collect();
        let dec_final_norm = LayerNorm::init(&mut store, "decoder.final_norm", d);
        let box_norm = LayerNorm::init(&mut store, "boxattn.norm", d);
        let box_attn = MultiHeadAttention::init(&mut store, "boxattn.attn", d, cfg.heads, &mut rng);

        let class_head =
            Linear::init_with_bias(&mut store, "heads.class", d, num_known + 1, focal_bias(CLASS_PRIOR), &mut rng);
        let obj_head =
            Linear::init_with_bias(&mut store, "heads.obj", d, 1, focal_bias(CLASS_PRIOR), &mut rng);
        let box_mlp = [
            Linear::init(&mut store, "heads.box.l1", d, d, &mut rng),
            Linear::init(&mut store, "heads.box.l2", d, d, &mut rng),
            Linear::init(&mut store, "heads.box.l3", d, 4, &mut rng),
        ];

        let seg_proj = Linear::init(&mut store, "seg.proj", d, cfg.mask_dim, &mut rng);
        let seg_kernel = Linear::init(&mut store, "seg.kernel", d, cfg.mask_dim + 1, &mut rng);

        // STO: one 3x3x3 convolution to a single channel
        store.insert("sto.conv.w", kaiming_uniform(&[1, d, 3, 3, 3], d * 27, &mut rng));
        store.insert("sto.conv.b", Tensor::zeros(&[1]));

        Model {
            cfg: cfg.clone(),
            store,
            num_known,
            enc_layers,
            enc_final_norm,
            fusion,
            dec_layers,
            dec_final_norm,
            box_attn,
            box_norm,
            class_head,
            obj_head,
            box_mlp,
            seg_proj,
            seg_kernel,
        }
    }

    /// Rebuild a model around a loaded parameter table, verifying that
    /// every expected parameter is present with the right shape.
    pub fn from_store(cfg: &ModelConfig, num_known: usize, store: ParamStore) -> Result<Self> {
        let mut model = Model::new(cfg, num_known, 0);
        for (name, tensor) in model.store.iter() {
            if !store.contains(name) {
                return Err(Error::Checkpoint(format!("missing parameter {name}")));
            }
            let loaded = store.get(name);
            if loaded.shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    loaded.shape(),
                    tensor.shape()
                )));
            }
        }
        model.store = store;
        Ok(model)
    }

    pub fn load(path: &std::path::Path, cfg: &ModelConfig) -> Result<(CheckpointHeader, Self)> {
        let (header, store) = crate::nn::load_checkpoint(path)?;
        let model = Model::from_store(cfg, header.known_ids.len(), store)?;
        Ok((header, model))
    }

    /// Widen the classifier for newly revealed classes. Existing columns
    /// (unknown + previously known) are copied bit-for-bit; new columns are
    /// freshly initialized.
    pub fn extend_classifier(&mut self, new_num_known: usize, seed: u64) -> Result<()> {
        if new_num_known < self.num_known {
            return Err(Error::RegistryShrink(format!(
                "classifier has {} known classes, refusing to shrink to {new_num_known}",
                self.num_known
            )));
        }
        if new_num_known == self.num_known {
            return Ok(());
        }
        let d = self.cfg.d;
        let (old_w, old_b) = (self.store.get("heads.class.w").clone(), self.store.get("heads.class.b").clone());
        let (wc_old, wc_new) = (self.num_known + 1, new_num_known + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fresh = xavier_uniform(&[d, wc_new - wc_old], d, wc_new, &mut rng);
        let mut w = Tensor::zeros(&[d, wc_new]);
        for r in 0..d {
            for c in 0..wc_old {
                w.set(&[r, c], old_w.at(&[r, c]));
            }
            for c in wc_old..wc_new {
                w.set(&[r, c], fresh.at(&[r, c - wc_old]));
            }
        }
        let mut b = Tensor::full(&[wc_new], focal_bias(CLASS_PRIOR));
        for c in 0..wc_old {
            b.set(&[c], old_b.at(&[c]));
        }
        self.store.set("heads.class.w", w);
        self.store.set("heads.class.b", b);
        self.num_known = new_num_known;
        self.class_head = Linear { name: "heads.class".into(), dim_in: d, dim_out: wc_new };
        Ok(())
    }

    /// Parameter-name prefixes excluded from optimizer updates.
    pub fn frozen_prefixes(&self) -> Vec<String> {
        if self.cfg.freeze_backbone {
            vec!["backbone.".into()]
        } else {
            vec![]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = ModelConfig::desk();
        let a = Model::new(&cfg, 3, 7);
        let b = Model::new(&cfg, 3, 7);
        for (name, t) in a.store.iter() {
            assert_eq!(t, b.store.get(name), "{name} differs");
        }
        let c = Model::new(&cfg, 3, 8);
        assert_ne!(a.store.get("decoder.queries"), c.store.get("decoder.queries"));
    }

    #[test]
    fn extend_copies_old_columns_exactly() {
        let cfg = ModelConfig::desk();
        let mut m = Model::new(&cfg, 3, 7);
        let w_before = m.store.get("heads.class.w").clone();
        m.extend_classifier(5, 99).unwrap();
        let w_after = m.store.get("heads.class.w");
        assert_eq!(w_after.shape(), &[cfg.d, 6]);
        for r in 0..cfg.d {
            for c in 0..4 {
                assert_eq!(w_after.at(&[r, c]), w_before.at(&[r, c]));
            }
        }
    }

    #[test]
    fn extend_same_width_is_noop_and_shrink_errors() {
        let cfg = ModelConfig::desk();
        let mut m = Model::new(&cfg, 5, 7);
        let w = m.store.get("heads.class.w").clone();
        m.extend_classifier(5, 1).unwrap();
        assert_eq!(&w, m.store.get("heads.class.w"));
        assert!(matches!(m.extend_classifier(3, 1), Err(Error::RegistryShrink(_))));
    }

    #[test]
    fn from_store_checks_shapes() {
        let cfg = ModelConfig::desk();
        let m = Model::new(&cfg, 3, 7);
        let mut store = m.store.clone();
        store.set("heads.class.w", Tensor::zeros(&[1, 1]));
        assert!(matches!(Model::from_store(&cfg, 3, store), Err(Error::Checkpoint(_))));
    }
}
