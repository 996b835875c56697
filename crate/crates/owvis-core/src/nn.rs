//! Parameter storage, layer building blocks, the Adam optimizer, and the
//! checkpoint format shared by all model components.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Flat named-parameter table. Names are dotted paths
/// (`"encoder.layer0.attn.wq"`); ordering is lexicographic everywhere so
/// that updates and serialization are deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        assert!(
            self.params.insert(name.to_string(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn set(&mut self, name: &str, value: Tensor) {
        self.params.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.params.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.params.get_mut(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.params.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Insert this parameter into the tape as a leaf (cached per tape).
    pub fn var(&self, tape: &mut Tape, name: &str) -> Var {
        tape.leaf(self.get(name).clone(), name)
    }
}

// ---- initialization ----

pub fn xavier_uniform<R: Rng>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::rand_uniform(shape, -limit, limit, rng)
}

pub fn kaiming_uniform<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -limit, limit, rng)
}

/// Bias value putting an initial sigmoid probability at `prior`; keeps
/// focal-loss logits from being swamped by background early in training.
pub fn focal_bias(prior: f64) -> f64 {
    -((1.0 - prior) / prior).ln()
}

// ---- layers ----

/// Fully connected layer; weight is `[in, out]` so `y = x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub dim_in: usize,
    pub dim_out: usize,
}

impl Linear {
    pub fn init<R: Rng>(store: &mut ParamStore, name: &str, dim_in: usize, dim_out: usize, rng: &mut R) -> Self {
        Self::init_with_bias(store, name, dim_in, dim_out, 0.0, rng)
    }

    pub fn init_with_bias<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim_in: usize,
        dim_out: usize,
        bias: f64,
        rng: &mut R,
    ) -> Self {
        store.insert(&format!("{name}.w"), xavier_uniform(&[dim_in, dim_out], dim_in, dim_out, rng));
        store.insert(&format!("{name}.b"), Tensor::full(&[dim_out], bias));
        Linear { name: name.to_string(), dim_in, dim_out }
    }

    /// `x: [n, in] -> [n, out]`
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = store.var(tape, &format!("{}.w", self.name));
        let b = store.var(tape, &format!("{}.b", self.name));
        let y = tape.matmul(x, w);
        tape.add_rowvec(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        store.insert(&format!("{name}.g"), Tensor::full(&[dim], 1.0));
        store.insert(&format!("{name}.b"), Tensor::zeros(&[dim]));
        LayerNorm { name: name.to_string(), dim }
    }

    pub fn forward_axis(&self, tape: &mut Tape, store: &ParamStore, x: Var, axis: usize) -> Var {
        let g = store.var(tape, &format!("{}.g", self.name));
        let b = store.var(tape, &format!("{}.b", self.name));
        tape.layer_norm(x, axis, g, b, 1e-5)
    }

    /// Normalize the last axis of a 2-D `[n, d]` input.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        self.forward_axis(tape, store, x, tape.shape(x).len() - 1)
    }
}

/// Standard multi-head attention; queries, keys and values are 2-D token
/// matrices `[T, d]`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub name: String,
    pub dim: usize,
    pub heads: usize,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
}

impl MultiHeadAttention {
    pub fn init<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert_eq!(dim % heads, 0, "dim {dim} not divisible by heads {heads}");
        MultiHeadAttention {
            name: name.to_string(),
            dim,
            heads,
            wq: Linear::init(store, &format!("{name}.wq"), dim, dim, rng),
            wk: Linear::init(store, &format!("{name}.wk"), dim, dim, rng),
            wv: Linear::init(store, &format!("{name}.wv"), dim, dim, rng),
            wo: Linear::init(store, &format!("{name}.wo"), dim, dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, queries: Var, keys_values: Var) -> Var {
        let tq = tape.shape(queries)[0];
        let tk = tape.shape(keys_values)[0];
        let dk = self.dim / self.heads;
        let q = self.wq.forward(tape, store, queries);
        let k = self.wk.forward(tape, store, keys_values);
        let v = self.wv.forward(tape, store, keys_values);
        // [T, d] -> [heads, T, dk]
        let q = tape.reshape(q, &[tq, self.heads, dk]);
        let q = tape.permute(q, &[1, 0, 2]);
        let k = tape.reshape(k, &[tk, self.heads, dk]);
        let k = tape.permute(k, &[1, 2, 0]); // [heads, dk, Tk]
        let v = tape.reshape(v, &[tk, self.heads, dk]);
        let v = tape.permute(v, &[1, 0, 2]);
        let scores = tape.bmm(q, k);
        let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
        let attn = tape.softmax_last(scores);
        let ctx = tape.bmm(attn, v); // [heads, Tq, dk]
        let ctx = tape.permute(ctx, &[1, 0, 2]);
        let ctx = tape.reshape(ctx, &[tq, self.dim]);
        self.wo.forward(tape, store, ctx)
    }
}

/// Two-layer feed-forward block with ReLU.
#[derive(Clone, Debug)]
pub struct FeedForward {
    lin1: Linear,
    lin2: Linear,
}

impl FeedForward {
    pub fn init<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        FeedForward {
            lin1: Linear::init(store, &format!("{name}.lin1"), dim, hidden, rng),
            lin2: Linear::init(store, &format!("{name}.lin2"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.lin1.forward(tape, store, x);
        let h = tape.relu(h);
        self.lin2.forward(tape, store, h)
    }
}

/// Pre-norm transformer encoder layer over a `[T, d]` token matrix.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
}

impl EncoderLayer {
    pub fn init<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ffn_dim: usize, rng: &mut R) -> Self {
        EncoderLayer {
            norm1: LayerNorm::init(store, &format!("{name}.norm1"), dim),
            attn: MultiHeadAttention::init(store, &format!("{name}.attn"), dim, heads, rng),
            norm2: LayerNorm::init(store, &format!("{name}.norm2"), dim),
            ffn: FeedForward::init(store, &format!("{name}.ffn"), dim, ffn_dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let n = self.norm1.forward(tape, store, x);
        let a = self.attn.forward(tape, store, n, n);
        let x = tape.add(x, a);
        let n = self.norm2.forward(tape, store, x);
        let f = self.ffn.forward(tape, store, n);
        tape.add(x, f)
    }
}

/// Pre-norm transformer decoder layer: query self-attention, cross
/// attention to memory tokens, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    norm1: LayerNorm,
    self_attn: MultiHeadAttention,
    norm2: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm3: LayerNorm,
    ffn: FeedForward,
}

impl DecoderLayer {
    pub fn init<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ffn_dim: usize, rng: &mut R) -> Self {
        DecoderLayer {
            norm1: LayerNorm::init(store, &format!("{name}.norm1"), dim),
            self_attn: MultiHeadAttention::init(store, &format!("{name}.self_attn"), dim, heads, rng),
            norm2: LayerNorm::init(store, &format!("{name}.norm2"), dim),
            cross_attn: MultiHeadAttention::init(store, &format!("{name}.cross_attn"), dim, heads, rng),
            norm3: LayerNorm::init(store, &format!("{name}.norm3"), dim),
            ffn: FeedForward::init(store, &format!("{name}.ffn"), dim, ffn_dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, queries: Var, memory: Var) -> Var {
        let n = self.norm1.forward(tape, store, queries);
        let a = self.self_attn.forward(tape, store, n, n);
        let q = tape.add(queries, a);
        let n = self.norm2.forward(tape, store, q);
        let a = self.cross_attn.forward(tape, store, n, memory);
        let q = tape.add(q, a);
        let n = self.norm3.forward(tape, store, q);
        let f = self.ffn.forward(tape, store, n);
        tape.add(q, f)
    }
}

// ---- optimizer ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, grad_clip: 1.0 }
    }
}

/// Adam with global-norm gradient clipping. Parameters whose names start
/// with a frozen prefix keep their values.
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
    frozen_prefixes: Vec<String>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, frozen_prefixes: Vec<String>) -> Self {
        Adam { cfg, step: 0, moments: BTreeMap::new(), frozen_prefixes }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &crate::autodiff::Gradients) {
        self.step += 1;
        let norm = grads.global_norm();
        let scale = if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            self.cfg.grad_clip / norm
        } else {
            1.0
        };
        let bc1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
        for (name, grad) in grads.iter() {
            if self.frozen_prefixes.iter().any(|p| name.starts_with(p.as_str())) {
                continue;
            }
            if !store.contains(name) {
                continue; // e.g. probe leaves created by tests
            }
            let param = store.get_mut(name);
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(grad.shape()), Tensor::zeros(grad.shape())));
            let (b1, b2, eps, lr) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps, self.cfg.learning_rate);
            for i in 0..grad.numel() {
                let g = grad.data()[i] * scale;
                let mi = b1 * m.data()[i] + (1.0 - b1) * g;
                let vi = b2 * v.data()[i] + (1.0 - b2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mh = mi / bc1;
                let vh = vi / bc2;
                param.data_mut()[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

// ---- checkpoints ----

const CKPT_MAGIC: &[u8; 8] = b"OWVISCKP";
const CKPT_VERSION: u32 = 1;

/// Metadata stored next to the parameter table.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointHeader {
    pub config_fingerprint: String,
    pub schedule_fingerprint: String,
    pub known_ids: Vec<u32>,
    pub task: u8,
}

pub fn save_checkpoint(path: &Path, header: &CheckpointHeader, store: &ParamStore) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.write_u32::<LittleEndian>(CKPT_VERSION).unwrap();
    let header_json = serde_json::to_vec(header).expect("header serializes");
    buf.write_u64::<LittleEndian>(header_json.len() as u64).unwrap();
    buf.extend_from_slice(&header_json);
    let count = store.iter().count() as u64;
    buf.write_u64::<LittleEndian>(count).unwrap();
    for (name, tensor) in store.iter() {
        buf.write_u32::<LittleEndian>(name.len() as u32).unwrap();
        buf.extend_from_slice(name.as_bytes());
        buf.write_u32::<LittleEndian>(tensor.shape().len() as u32).unwrap();
        for &d in tensor.shape() {
            buf.write_u64::<LittleEndian>(d as u64).unwrap();
        }
        for &x in tensor.data() {
            buf.write_f64::<LittleEndian>(x).unwrap();
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ParamStore)> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::Cursor::new(&data);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("truncated file".into()))?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic; not an owvis checkpoint".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|_| Error::Checkpoint("truncated".into()))?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = r.read_u64::<LittleEndian>().map_err(|_| Error::Checkpoint("truncated".into()))? as usize;
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf).map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&hbuf).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let count = r.read_u64::<LittleEndian>().map_err(|_| Error::Checkpoint("truncated".into()))?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let nlen = r.read_u32::<LittleEndian>().map_err(|_| Error::Checkpoint("truncated".into()))? as usize;
        let mut nbuf = vec![0u8; nlen];
        r.read_exact(&mut nbuf).map_err(|_| Error::Checkpoint("truncated name".into()))?;
        let name = String::from_utf8(nbuf).map_err(|_| Error::Checkpoint("bad name".into()))?;
        let ndim = r.read_u32::<LittleEndian>().map_err(|_| Error::Checkpoint("truncated".into()))? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u64::<LittleEndian>().map_err(|_| Error::Checkpoint("truncated".into()))? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            values.push(r.read_f64::<LittleEndian>().map_err(|_| Error::Checkpoint("truncated data".into()))?);
        }
        store.insert(&name, Tensor::new(&shape, values));
    }
    Ok((header, store))
}

/// Copy `backbone.*` entries from a checkpoint into an existing store,
/// leaving every other parameter (ScratchNet included) untouched.
pub fn load_backbone_only(path: &Path, store: &mut ParamStore) -> Result<usize> {
    let (_header, loaded) = load_checkpoint(path)?;
    let mut n = 0;
    for (name, tensor) in loaded.iter() {
        if name.starts_with("backbone.") && store.contains(name) {
            if store.get(name).shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for {name}")));
            }
            store.set(name, tensor.clone());
            n += 1;
        }
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_shapes_and_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let lin = Linear::init(&mut store, "lin", 4, 3, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[5, 4], 1.0, &mut rng));
        let y = lin.forward(&mut tape, &store, x);
        assert_eq!(tape.shape(y), &[5, 3]);
        let s = tape.sum(y);
        let grads = tape.backward(s);
        assert!(grads.get("lin.w").is_some());
        assert!(grads.get("lin.b").is_some());
    }

    #[test]
    fn attention_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let attn = MultiHeadAttention::init(&mut store, "a", 8, 2, &mut rng);
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::randn(&[3, 8], 1.0, &mut rng));
        let kv = tape.constant(Tensor::randn(&[7, 8], 1.0, &mut rng));
        let y = attn.forward(&mut tape, &store, q, kv);
        assert_eq!(tape.shape(y), &[3, 8]);
        assert!(tape.value(y).is_finite());
    }

    #[test]
    fn adam_reduces_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::new(&[2], vec![3.0, -2.0]));
        let mut opt = Adam::new(
            AdamConfig { learning_rate: 0.1, ..Default::default() },
            vec![],
        );
        for _ in 0..200 {
            let mut tape = Tape::new();
            let x = store.var(&mut tape, "x");
            let sq = tape.mul(x, x);
            let loss = tape.sum(sq);
            let grads = tape.backward(loss);
            opt.update(&mut store, &grads);
        }
        let x = store.get("x");
        assert!(x.data().iter().all(|v| v.abs() < 1e-2), "{:?}", x.data());
    }

    #[test]
    fn frozen_prefix_is_not_updated() {
        let mut store = ParamStore::new();
        store.insert("backbone.w", Tensor::new(&[1], vec![1.0]));
        store.insert("head.w", Tensor::new(&[1], vec![1.0]));
        let mut opt = Adam::new(
            AdamConfig { learning_rate: 0.1, ..Default::default() },
            vec!["backbone.".into()],
        );
        let mut tape = Tape::new();
        let a = store.var(&mut tape, "backbone.w");
        let b = store.var(&mut tape, "head.w");
        let s0 = tape.add(a, b);
        let s = tape.sum(s0);
        let grads = tape.backward(s);
        opt.update(&mut store, &grads);
        assert_eq!(store.get("backbone.w").data()[0], 1.0);
        assert!(store.get("head.w").data()[0] < 1.0);
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.insert("a.w", Tensor::randn(&[3, 4], 1.0, &mut rng));
        store.insert("b.w", Tensor::randn(&[7], 0.3, &mut rng));
        let header = CheckpointHeader {
            config_fingerprint: "cafebabe".into(),
            schedule_fingerprint: "12345678".into(),
            known_ids: vec![1, 2, 3],
            task: 1,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &header, &store).unwrap();
        let (h2, s2) = load_checkpoint(&path).unwrap();
        assert_eq!(header, h2);
        assert_eq!(store.get("a.w"), s2.get("a.w"));
        assert_eq!(store.get("b.w"), s2.get("b.w"));
    }

    #[test]
    fn backbone_only_load_keeps_other_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut donor = ParamStore::new();
        donor.insert("backbone.s1.w", Tensor::randn(&[2, 2], 1.0, &mut rng));
        donor.insert("scratch.c1.w", Tensor::randn(&[2], 1.0, &mut rng));
        let header = CheckpointHeader {
            config_fingerprint: "x".into(),
            schedule_fingerprint: "y".into(),
            known_ids: vec![],
            task: 1,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("donor.ckpt");
        save_checkpoint(&path, &header, &donor).unwrap();

        let mut target = ParamStore::new();
        target.insert("backbone.s1.w", Tensor::zeros(&[2, 2]));
        let scratch_before = Tensor::randn(&[2], 1.0, &mut rng);
        target.insert("scratch.c1.w", scratch_before.clone());
        let n = load_backbone_only(&path, &mut target).unwrap();
        assert_eq!(n, 1);
        assert_eq!(target.get("backbone.s1.w"), donor.get("backbone.s1.w"));
        assert_eq!(target.get("scratch.c1.w"), &scratch_before);
    }
}
