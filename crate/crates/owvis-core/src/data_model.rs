//! Core domain types and annotation ingestion.
//!
//! Datasets follow the YouTube-VIS layout: a JSON file with `videos`,
//! `annotations` and `categories`, where each annotation carries one
//! run-length-encoded segmentation per frame (or `null` when the object
//! is absent). All domain types are immutable after construction.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type VideoId = u64;
pub type CategoryId = u32;

/// Reserved label for the unknown class.
pub const UNKNOWN_LABEL: CategoryId = 0;

// ---- masks ----

/// Single-frame binary mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn zeros(h: usize, w: usize) -> Self {
        Mask { h, w, data: vec![false; h * w] }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                data.push(f(r, c));
            }
        }
        Mask { h, w, data }
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.w + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.w + c] = v;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn pixels(&self) -> &[bool] {
        &self.data
    }

    /// Uncompressed COCO-style RLE: column-major runs, starting with the
    /// number of zeros.
    pub fn to_rle(&self) -> Vec<u32> {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run: u32 = 0;
        for c in 0..self.w {
            for r in 0..self.h {
                let v = self.get(r, c);
                if v == current {
                    run += 1;
                } else {
                    counts.push(run);
                    current = v;
                    run = 1;
                }
            }
        }
        counts.push(run);
        counts
    }

    pub fn from_rle(h: usize, w: usize, counts: &[u32]) -> Result<Self> {
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        if total != (h * w) as u64 {
            return Err(Error::AnnotationParse {
                key: "segmentations.counts".into(),
                message: format!("RLE counts sum to {total}, expected {}", h * w),
            });
        }
        let mut mask = Mask::zeros(h, w);
        let mut pos = 0usize;
        let mut value = false;
        for &run in counts {
            for _ in 0..run {
                let c = pos / h;
                let r = pos % h;
                if value {
                    mask.set(r, c, true);
                }
                pos += 1;
            }
            value = !value;
        }
        Ok(mask)
    }
}

// ---- boxes ----

/// Axis-aligned box in normalized center format.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCxcywh {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxCxcywh {
    pub const EMPTY: BoxCxcywh = BoxCxcywh { cx: 0.0, cy: 0.0, w: 0.0, h: 0.0 };

    /// The defined convention for frames where the object is absent.
    pub fn is_empty(&self) -> bool {
        self.cx == 0.0 && self.cy == 0.0 && self.w == 0.0 && self.h == 0.0
    }

    pub fn to_xyxy(&self) -> (f64, f64, f64, f64) {
        (self.cx - 0.5 * self.w, self.cy - 0.5 * self.h, self.cx + 0.5 * self.w, self.cy + 0.5 * self.h)
    }
}

/// Tight bounding box of the nonzero pixels, normalized by the mask size;
/// all-zero masks map to `(0,0,0,0)`.
pub fn box_from_mask(mask: &Mask) -> BoxCxcywh {
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0usize, usize::MAX, 0usize);
    let mut any = false;
    for r in 0..mask.h {
        for c in 0..mask.w {
            if mask.get(r, c) {
                any = true;
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    if !any {
        return BoxCxcywh::EMPTY;
    }
    let (wf, hf) = (mask.w as f64, mask.h as f64);
    BoxCxcywh {
        cx: (c0 + c1 + 1) as f64 / (2.0 * wf),
        cy: (r0 + r1 + 1) as f64 / (2.0 * hf),
        w: (c1 + 1 - c0) as f64 / wf,
        h: (r1 + 1 - r0) as f64 / hf,
    }
}

// ---- tracks ----

/// One object instance across a video: per-frame masks and boxes plus a
/// category and (for predictions) a confidence score.
#[derive(Clone, Debug)]
pub struct InstanceTrack {
    pub category_id: CategoryId,
    pub masks: Vec<Mask>,
    pub boxes: Vec<BoxCxcywh>,
    pub score: f64,
}

impl InstanceTrack {
    /// Build a track from masks alone; boxes are derived per frame.
    pub fn from_masks(category_id: CategoryId, masks: Vec<Mask>, score: f64) -> Self {
        let boxes = masks.iter().map(box_from_mask).collect();
        InstanceTrack { category_id, masks, boxes, score }
    }

    pub fn frame_count(&self) -> usize {
        self.masks.len()
    }

    /// Is the instance visible in any frame of `[start, start+len)`?
    pub fn visible_in_window(&self, start: usize, len: usize) -> bool {
        self.masks[start..(start + len).min(self.masks.len())].iter().any(|m| !m.is_empty())
    }
}

// ---- dataset ----

#[derive(Clone, Debug)]
pub struct VideoMeta {
    pub id: VideoId,
    pub width: usize,
    pub height: usize,
    pub length: usize,
    pub file_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategoryInfo {
    pub name: String,
    pub super_category: String,
}

/// An annotated video dataset plus the directory its frame files resolve
/// against.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub videos: BTreeMap<VideoId, VideoMeta>,
    pub annotations: BTreeMap<VideoId, Vec<InstanceTrack>>,
    pub categories: BTreeMap<CategoryId, CategoryInfo>,
    pub root: PathBuf,
}

impl Dataset {
    pub fn tracks(&self, video_id: VideoId) -> &[InstanceTrack] {
        self.annotations.get(&video_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn num_instances(&self) -> usize {
        self.annotations.values().map(Vec::len).sum()
    }
}

// ---- class registry ----

/// The ordered set of currently known category ids. Never shrinks; the
/// unknown label 0 is never a member.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassRegistry {
    known_ids: Vec<CategoryId>,
}

impl ClassRegistry {
    pub fn new(known_ids: Vec<CategoryId>) -> Result<Self> {
        if known_ids.contains(&UNKNOWN_LABEL) {
            return Err(Error::Config("category id 0 is reserved for unknown".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &id in &known_ids {
            if !seen.insert(id) {
                return Err(Error::Config(format!("duplicate known category id {id}")));
            }
        }
        Ok(ClassRegistry { known_ids })
    }

    pub fn known_ids(&self) -> &[CategoryId] {
        &self.known_ids
    }

    pub fn num_known(&self) -> usize {
        self.known_ids.len()
    }

    pub fn is_known(&self, id: CategoryId) -> bool {
        self.known_ids.contains(&id)
    }

    /// Classifier index of a category: unknown is 0, known classes are
    /// 1..=C in registry order.
    pub fn class_index(&self, id: CategoryId) -> Option<usize> {
        if id == UNKNOWN_LABEL {
            return Some(0);
        }
        self.known_ids.iter().position(|&k| k == id).map(|p| p + 1)
    }

    pub fn category_of_index(&self, index: usize) -> Option<CategoryId> {
        if index == 0 {
            Some(UNKNOWN_LABEL)
        } else {
            self.known_ids.get(index - 1).copied()
        }
    }

    /// Grow the known set; the new registry must contain the old one as a
    /// prefix-preserving superset.
    pub fn extended(&self, new_ids: &[CategoryId]) -> Result<Self> {
        let mut ids = self.known_ids.clone();
        for &id in new_ids {
            if id == UNKNOWN_LABEL {
                return Err(Error::Config("category id 0 is reserved for unknown".into()));
            }
            if !ids.contains(&id) {
                ids.push(id);
            }
        }
        ClassRegistry::new(ids)
    }
}

// ---- clips ----

/// An M-frame RGB clip, zero-padded so H and W are multiples of `align`
/// (at least 16). Pixel values are in `[0,1]`.
#[derive(Clone, Debug)]
pub struct VideoClip {
    pub frames: Tensor, // [M, 3, H, W]
    pub video_id: VideoId,
    pub frame_indices: Vec<usize>,
    pub orig_h: usize,
    pub orig_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl VideoClip {
    /// Center-pad raw frames (`[M,3,h,w]`) to the alignment.
    pub fn new(frames: Tensor, video_id: VideoId, frame_indices: Vec<usize>, align: usize) -> Self {
        assert!(align >= 16 && align % 16 == 0, "alignment must be a positive multiple of 16");
        let s = frames.shape().to_vec();
        assert_eq!(s.len(), 4);
        assert_eq!(s[1], 3, "clip frames must be RGB");
        assert_eq!(s[0], frame_indices.len());
        let (m, h, w) = (s[0], s[2], s[3]);
        let hp = h.div_ceil(align) * align;
        let wp = w.div_ceil(align) * align;
        let pad_top = (hp - h) / 2;
        let pad_left = (wp - w) / 2;
        let frames = if hp == h && wp == w {
            frames
        } else {
            let mut out = Tensor::zeros(&[m, 3, hp, wp]);
            for fi in 0..m {
                for ch in 0..3 {
                    for r in 0..h {
                        for c in 0..w {
                            let v = frames.at(&[fi, ch, r, c]);
                            out.set(&[fi, ch, r + pad_top, c + pad_left], v);
                        }
                    }
                }
            }
            out
        };
        VideoClip { frames, video_id, frame_indices, orig_h: h, orig_w: w, pad_top, pad_left }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    /// Convert a box normalized against the original video resolution to
    /// the padded clip frame.
    pub fn to_clip_box(&self, b: &BoxCxcywh) -> BoxCxcywh {
        if b.is_empty() {
            return BoxCxcywh::EMPTY;
        }
        let (hp, wp) = (self.height() as f64, self.width() as f64);
        BoxCxcywh {
            cx: (b.cx * self.orig_w as f64 + self.pad_left as f64) / wp,
            cy: (b.cy * self.orig_h as f64 + self.pad_top as f64) / hp,
            w: b.w * self.orig_w as f64 / wp,
            h: b.h * self.orig_h as f64 / hp,
        }
    }
}

/// Read a window of frames for one video from its image files.
pub fn load_clip(dataset: &Dataset, video_id: VideoId, start: usize, len: usize, align: usize) -> Result<VideoClip> {
    let meta = dataset
        .videos
        .get(&video_id)
        .ok_or_else(|| Error::Eval(format!("unknown video id {video_id}")))?;
    assert!(start + len <= meta.length, "clip window out of range");
    let (h, w) = (meta.height, meta.width);
    let mut data = vec![0.0f64; len * 3 * h * w];
    for (fi, frame) in (start..start + len).enumerate() {
        let name = meta
            .file_names
            .get(frame)
            .ok_or_else(|| Error::Eval(format!("video {video_id} has no file for frame {frame}")))?;
        let path = dataset.root.join(name);
        let img = image::open(&path)
            .map_err(|e| Error::Io { path: path.display().to_string(), source: std::io::Error::other(e) })?
            .to_rgb8();
        if (img.height() as usize, img.width() as usize) != (h, w) {
            return Err(Error::AnnotationInvalid {
                video_id,
                instance: 0,
                message: format!("frame {frame} size {}x{} differs from video meta {h}x{w}", img.height(), img.width()),
            });
        }
        for r in 0..h {
            for c in 0..w {
                let px = img.get_pixel(c as u32, r as u32);
                for ch in 0..3 {
                    data[((fi * 3 + ch) * h + r) * w + c] = px.0[ch] as f64 / 255.0;
                }
            }
        }
    }
    let frames = Tensor::new(&[len, 3, h, w], data);
    Ok(VideoClip::new(frames, video_id, (start..start + len).collect(), align))
}

// ---- annotation JSON ----

fn obj<'a>(v: &'a Value, key: &str) -> Result<&'a Value> {
    v.get(key).ok_or_else(|| Error::AnnotationParse {
        key: key.to_string(),
        message: "missing key".into(),
    })
}

fn as_u64(v: &Value, key: &str) -> Result<u64> {
    v.as_u64().ok_or_else(|| Error::AnnotationParse {
        key: key.to_string(),
        message: format!("expected unsigned integer, got {v}"),
    })
}

fn as_array<'a>(v: &'a Value, key: &str) -> Result<&'a Vec<Value>> {
    v.as_array().ok_or_else(|| Error::AnnotationParse {
        key: key.to_string(),
        message: "expected array".into(),
    })
}

/// Load a YouTube-VIS-style annotation file. Frame files referenced by
/// `file_names` resolve against the annotation file's directory.
pub fn load_annotations(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| Error::AnnotationParse {
        key: "<document>".into(),
        message: e.to_string(),
    })?;
    let root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    dataset_from_value(&value, root)
}

pub fn dataset_from_value(value: &Value, root: PathBuf) -> Result<Dataset> {
    let mut dataset = Dataset { root, ..Default::default() };

    for (i, cat) in as_array(obj(value, "categories")?, "categories")?.iter().enumerate() {
        let key = format!("categories[{i}]");
        let id = as_u64(obj(cat, "id").map_err(|_| Error::AnnotationParse { key: format!("{key}.id"), message: "missing".into() })?, &format!("{key}.id"))? as CategoryId;
        let name = obj(cat, "name")
            .ok()
            .and_then(|v| v.as_str())
            .unwrap_or_default()
            .to_string();
        let super_category = cat
            .get("supercategory")
            .and_then(|v| v.as_str())
            .unwrap_or("object")
            .to_string();
        dataset.categories.insert(id, CategoryInfo { name, super_category });
    }

    for (i, vid) in as_array(obj(value, "videos")?, "videos")?.iter().enumerate() {
        let key = format!("videos[{i}]");
        let id = as_u64(obj(vid, "id").map_err(|_| Error::AnnotationParse { key: format!("{key}.id"), message: "missing".into() })?, &format!("{key}.id"))?;
        let width = as_u64(obj(vid, "width")?, &format!("{key}.width"))? as usize;
        let height = as_u64(obj(vid, "height")?, &format!("{key}.height"))? as usize;
        let length = as_u64(obj(vid, "length")?, &format!("{key}.length"))? as usize;
        let file_names = vid
            .get("file_names")
            .and_then(|v| v.as_array())
            .map(|a| a.iter().filter_map(|x| x.as_str().map(str::to_string)).collect())
            .unwrap_or_default();
        dataset.videos.insert(id, VideoMeta { id, width, height, length, file_names });
    }

    for (i, ann) in as_array(obj(value, "annotations")?, "annotations")?.iter().enumerate() {
        let key = format!("annotations[{i}]");
        let video_id = as_u64(obj(ann, "video_id").map_err(|_| Error::AnnotationParse { key: format!("{key}.video_id"), message: "missing".into() })?, &format!("{key}.video_id"))?;
        let category_id =
            as_u64(obj(ann, "category_id")?, &format!("{key}.category_id"))? as CategoryId;
        let meta = dataset.videos.get(&video_id).ok_or_else(|| Error::AnnotationInvalid {
            video_id,
            instance: i,
            message: "annotation references a video id absent from `videos`".into(),
        })?;
        if !dataset.categories.contains_key(&category_id) {
            return Err(Error::AnnotationInvalid {
                video_id,
                instance: i,
                message: format!("category_id {category_id} absent from `categories`"),
            });
        }
        let segs = as_array(obj(ann, "segmentations")?, &format!("{key}.segmentations"))?;
        if segs.len() != meta.length {
            return Err(Error::AnnotationInvalid {
                video_id,
                instance: i,
                message: format!(
                    "segmentations has {} frames but video length is {}",
                    segs.len(),
                    meta.length
                ),
            });
        }
        if let Some(bboxes) = ann.get("bboxes").and_then(|v| v.as_array()) {
            if bboxes.len() != segs.len() {
                return Err(Error::AnnotationInvalid {
                    video_id,
                    instance: i,
                    message: format!(
                        "bboxes has {} frames but segmentations has {}",
                        bboxes.len(),
                        segs.len()
                    ),
                });
            }
        }
        let mut masks = Vec::with_capacity(segs.len());
        for (f, seg) in segs.iter().enumerate() {
            if seg.is_null() {
                masks.push(Mask::zeros(meta.height, meta.width));
                continue;
            }
            let size = as_array(obj(seg, "size")?, &format!("{key}.segmentations[{f}].size"))?;
            if size.len() != 2 {
                return Err(Error::AnnotationParse {
                    key: format!("{key}.segmentations[{f}].size"),
                    message: "expected [h, w]".into(),
                });
            }
            let h = as_u64(&size[0], "size[0]")? as usize;
            let w = as_u64(&size[1], "size[1]")? as usize;
            if (h, w) != (meta.height, meta.width) {
                return Err(Error::AnnotationInvalid {
                    video_id,
                    instance: i,
                    message: format!("frame {f} RLE size {h}x{w} differs from video {}x{}", meta.height, meta.width),
                });
            }
            let counts_v = as_array(obj(seg, "counts")?, &format!("{key}.segmentations[{f}].counts"))?;
            let mut counts = Vec::with_capacity(counts_v.len());
            for c in counts_v {
                counts.push(as_u64(c, "counts")? as u32);
            }
            masks.push(Mask::from_rle(h, w, &counts)?);
        }
        let track = InstanceTrack::from_masks(category_id, masks, 1.0);
        dataset.annotations.entry(video_id).or_default().push(track);
    }

    Ok(dataset)
}

/// Serialize a dataset back to the annotation layout. Empty frames are
/// written as `null` segmentations.
pub fn dataset_to_value(dataset: &Dataset) -> Value {
    let videos: Vec<Value> = dataset
        .videos
        .values()
        .map(|m| {
            json!({
                "id": m.id,
                "width": m.width,
                "height": m.height,
                "length": m.length,
                "file_names": m.file_names,
            })
        })
        .collect();
    let categories: Vec<Value> = dataset
        .categories
        .iter()
        .map(|(id, c)| json!({"id": id, "name": c.name, "supercategory": c.super_category}))
        .collect();
    let mut annotations = Vec::new();
    let mut ann_id = 1u64;
    for (video_id, tracks) in &dataset.annotations {
        let meta = &dataset.videos[video_id];
        for track in tracks {
            let segs: Vec<Value> = track
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
            let bboxes: Vec<Value> = track
                .boxes
                .iter()
                .map(|b| {
                    if b.is_empty() {
                        Value::Null
                    } else {
                        let (x0, y0, x1, y1) = b.to_xyxy();
                        json!([
                            x0 * meta.width as f64,
                            y0 * meta.height as f64,
                            (x1 - x0) * meta.width as f64,
                            (y1 - y0) * meta.height as f64
                        ])
                    }
                })
                .collect();
            let areas: Vec<Value> =
                track.masks.iter().map(|m| json!(m.area())).collect();
            annotations.push(json!({
                "id": ann_id,
                "video_id": video_id,
                "category_id": track.category_id,
                "segmentations": segs,
                "bboxes": bboxes,
                "areas": areas,
                "iscrowd": 0,
            }));
            ann_id += 1;
        }
    }
    json!({"videos": videos, "annotations": annotations, "categories": categories})
}

pub fn save_annotations(dataset: &Dataset, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let value = dataset_to_value(dataset);
    let text = serde_json::to_string(&value).expect("dataset serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
