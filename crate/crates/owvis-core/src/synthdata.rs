//! Deterministic synthetic video generator.
//!
//! Renders videos of colored geometric shapes moving with constant
//! velocity and bouncing off the frame borders, with exact ground-truth
//! masks, and writes them in the annotation layout accepted by
//! [`crate::data_model::load_annotations`]. Instances drawn later occlude
//! earlier ones; occluded pixels are removed from the occluded mask.
//! Everything is a pure function of the seed.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{
    save_annotations, CategoryId, CategoryInfo, Dataset, InstanceTrack, Mask, VideoMeta,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Geometry {
    Disk,
    Square,
    Triangle,
    Bar,
    Ring,
}

impl Geometry {
    fn default_color(self) -> [u8; 3] {
        match self {
            Geometry::Disk => [220, 40, 40],
            Geometry::Square => [40, 200, 60],
            Geometry::Triangle => [50, 90, 230],
            // unknown-reserved shapes reuse known colors so that unknown
            // identification cannot fall back on color alone
            Geometry::Ring => [220, 40, 40],
            Geometry::Bar => [40, 200, 60],
        }
    }

    /// Axis half-extents for a base size `s`, used for border bouncing.
    fn half_extents(self, s: f64) -> (f64, f64) {
        match self {
            Geometry::Disk | Geometry::Square | Geometry::Triangle | Geometry::Ring => (s, s),
            Geometry::Bar => (1.8 * s, 0.55 * s),
        }
    }

    fn covers(self, dx: f64, dy: f64, s: f64) -> bool {
        match self {
            Geometry::Disk => dx * dx + dy * dy <= s * s,
            Geometry::Square => dx.abs() <= s && dy.abs() <= s,
            Geometry::Triangle => {
                // upright isoceles triangle, apex at the top
                let t = dy + s; // distance below the apex, in [0, 2s]
                t >= 0.0 && t <= 2.0 * s && dx.abs() <= 0.5 * t
            }
            Geometry::Bar => dx.abs() <= 1.8 * s && dy.abs() <= 0.55 * s,
            Geometry::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= s * s && d2 > (0.55 * s) * (0.55 * s)
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShapeClassSpec {
    pub name: String,
    pub super_category: String,
    pub geometry: Geometry,
    /// RGB; defaults to the geometry's palette entry.
    pub color: Option<[u8; 3]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_videos: usize,
    pub frames_per_video: usize,
    /// (H, W); both must be positive multiples of 16.
    pub resolution: (usize, usize),
    pub shape_classes: Vec<ShapeClassSpec>,
    /// Inclusive range of instances per video.
    pub instances_per_video: (usize, usize),
    /// Speed range in pixels/frame.
    pub speed_range: (f64, f64),
    /// Base shape size range in pixels (disk radius, square half-side, ...).
    pub size_range: (f64, f64),
    pub seed: u64,
}

impl SynthConfig {
    /// Desk-scale five-class configuration: three known-style shapes plus
    /// two shapes that reuse known colors, 64x64, short videos.
    pub fn desk_default(seed: u64) -> Self {
        let class = |name: &str, sc: &str, g: Geometry| ShapeClassSpec {
            name: name.into(),
            super_category: sc.into(),
            geometry: g,
            color: None,
        };
        SynthConfig {
            num_videos: 24,
            frames_per_video: 8,
            resolution: (64, 64),
            shape_classes: vec![
                class("disk", "round", Geometry::Disk),
                class("square", "angular", Geometry::Square),
                class("triangle", "pointed", Geometry::Triangle),
                class("ring", "hollow", Geometry::Ring),
                class("bar", "elongated", Geometry::Bar),
            ],
            instances_per_video: (2, 2),
            speed_range: (0.5, 2.0),
            size_range: (8.0, 13.0),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.resolution;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::SynthConfig(format!(
                "resolution {h}x{w} must be positive multiples of 16"
            )));
        }
        if self.shape_classes.len() < 2 {
            return Err(Error::SynthConfig("need at least 2 shape classes".into()));
        }
        if self.num_videos == 0 || self.frames_per_video == 0 {
            return Err(Error::SynthConfig("num_videos and frames_per_video must be positive".into()));
        }
        if self.instances_per_video.0 == 0 || self.instances_per_video.0 > self.instances_per_video.1 {
            return Err(Error::SynthConfig("invalid instances_per_video range".into()));
        }
        if !(self.speed_range.0 <= self.speed_range.1 && self.size_range.0 <= self.size_range.1) {
            return Err(Error::SynthConfig("invalid speed or size range".into()));
        }
        Ok(())
    }
}

struct InstanceState {
    class_index: usize,
    size: f64,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    brightness: f64,
}

/// Generate the dataset, write per-frame PNGs plus `annotations.json`
/// under `out_dir`, and return the loaded-equivalent dataset.
pub fn generate(config: &SynthConfig, out_dir: &Path) -> Result<Dataset> {
    config.validate()?;
    let (h, w) = config.resolution;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    // Per-video instance counts, then a balanced class quota laid out in
    // contiguous runs so most videos are class-homogeneous.
    let mut quota_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let counts: Vec<usize> = (0..config.num_videos)
        .map(|_| quota_rng.gen_range(config.instances_per_video.0..=config.instances_per_video.1))
        .collect();
    let total: usize = counts.iter().sum();
    let ncls = config.shape_classes.len();
    let mut quotas = vec![total / ncls; ncls];
    for c in 0..total % ncls {
        quotas[c] += 1;
    }
    let mut class_sequence = Vec::with_capacity(total);
    for (c, &q) in quotas.iter().enumerate() {
        class_sequence.extend(std::iter::repeat(c).take(q));
    }

    let mut dataset = Dataset { root: out_dir.to_path_buf(), ..Default::default() };
    for (i, spec) in config.shape_classes.iter().enumerate() {
        dataset.categories.insert(
            (i + 1) as CategoryId,
            CategoryInfo { name: spec.name.clone(), super_category: spec.super_category.clone() },
        );
    }

    let mut slot = 0usize;
    for v in 0..config.num_videos {
        let video_id = (v + 1) as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(v as u64));
        let n_inst = counts[v];
        let mut instances = Vec::with_capacity(n_inst);
        for _ in 0..n_inst {
            let class_index = class_sequence[slot];
            slot += 1;
            let spec = &config.shape_classes[class_index];
            let size = rng.gen_range(config.size_range.0..=config.size_range.1);
            let (ex, ey) = spec.geometry.half_extents(size);
            let x = rng.gen_range(ex..(w as f64 - ex).max(ex + 1e-9));
            let y = rng.gen_range(ey..(h as f64 - ey).max(ey + 1e-9));
            let speed = rng.gen_range(config.speed_range.0..=config.speed_range.1);
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let brightness = rng.gen_range(0.8..=1.0);
            instances.push(InstanceState {
                class_index,
                size,
                x,
                y,
                vx: speed * angle.cos(),
                vy: speed * angle.sin(),
                brightness,
            });
        }

        let video_dir = out_dir.join(format!("video_{video_id:04}"));
        std::fs::create_dir_all(&video_dir).map_err(|e| Error::io(&video_dir, e))?;
        let mut file_names = Vec::with_capacity(config.frames_per_video);
        let mut full_masks: Vec<Vec<Mask>> = vec![Vec::new(); n_inst];

        for f in 0..config.frames_per_video {
            // advance and bounce (first frame stays at the initial state)
            if f > 0 {
                for inst in instances.iter_mut() {
                    let g = config.shape_classes[inst.class_index].geometry;
                    let (ex, ey) = g.half_extents(inst.size);
                    inst.x += inst.vx;
                    inst.y += inst.vy;
                    if inst.x < ex {
                        inst.x = 2.0 * ex - inst.x;
                        inst.vx = -inst.vx;
                    }
                    if inst.x > w as f64 - ex {
                        inst.x = 2.0 * (w as f64 - ex) - inst.x;
                        inst.vx = -inst.vx;
                    }
                    if inst.y < ey {
                        inst.y = 2.0 * ey - inst.y;
                        inst.vy = -inst.vy;
                    }
                    if inst.y > h as f64 - ey {
                        inst.y = 2.0 * (h as f64 - ey) - inst.y;
                        inst.vy = -inst.vy;
                    }
                }
            }
            for (i, inst) in instances.iter().enumerate() {
                let g = config.shape_classes[inst.class_index].geometry;
                let mask = Mask::from_fn(h, w, |r, c| {
                    g.covers(c as f64 + 0.5 - inst.x, r as f64 + 0.5 - inst.y, inst.size)
                });
                full_masks[i].push(mask);
            }

            // render with later instances on top
            let mut img = image::RgbImage::new(w as u32, h as u32);
            for (i, inst) in instances.iter().enumerate() {
                let spec = &config.shape_classes[inst.class_index];
                let color = spec.color.unwrap_or_else(|| spec.geometry.default_color());
                let mask = &full_masks[i][f];
                for r in 0..h {
                    for c in 0..w {
                        if mask.get(r, c) {
                            let px = [
                                (color[0] as f64 * inst.brightness) as u8,
                                (color[1] as f64 * inst.brightness) as u8,
                                (color[2] as f64 * inst.brightness) as u8,
                            ];
                            img.put_pixel(c as u32, r as u32, image::Rgb(px));
                        }
                    }
                }
            }
            let name = format!("video_{video_id:04}/{f:05}.png");
            img.save(out_dir.join(&name))
                .map_err(|e| Error::Io { path: name.clone(), source: std::io::Error::other(e) })?;
            file_names.push(name);
        }

        // visibility masks: subtract every later instance
        let mut tracks = Vec::with_capacity(n_inst);
        for i in 0..n_inst {
            let mut visible = Vec::with_capacity(config.frames_per_video);
            for f in 0..config.frames_per_video {
                let mut m = full_masks[i][f].clone();
                for later in full_masks.iter().skip(i + 1) {
                    let lm = &later[f];
                    for r in 0..h {
                        for c in 0..w {
                            if lm.get(r, c) {
                                m.set(r, c, false);
                            }
                        }
                    }
                }
                visible.push(m);
            }
            let category_id = (instances[i].class_index + 1) as CategoryId;
            tracks.push(InstanceTrack::from_masks(category_id, visible, 1.0));
        }

        dataset.videos.insert(
            video_id,
            VideoMeta { id: video_id, width: w, height: h, length: config.frames_per_video, file_names },
        );
        dataset.annotations.insert(video_id, tracks);
    }

    save_annotations(&dataset, &out_dir.join("annotations.json"))?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{box_from_mask, load_annotations};

    fn one_disk_config(speed: f64) -> SynthConfig {
        SynthConfig {
            num_videos: 1,
            frames_per_video: 4,
            resolution: (64, 64),
            shape_classes: vec![
                ShapeClassSpec {
                    name: "disk".into(),
                    super_category: "round".into(),
                    geometry: Geometry::Disk,
                    color: None,
                },
                ShapeClassSpec {
                    name: "square".into(),
                    super_category: "angular".into(),
                    geometry: Geometry::Square,
                    color: None,
                },
            ],
            instances_per_video: (1, 1),
            speed_range: (speed, speed),
            size_range: (20.0, 20.0),
            seed: 11,
        }
    }

    #[test]
    fn static_disk_has_identical_masks() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&one_disk_config(0.0), dir.path()).unwrap();
        assert_eq!(ds.videos.len(), 1);
        let tracks = ds.tracks(1);
        assert_eq!(tracks.len(), 1);
        for f in 1..4 {
            assert_eq!(tracks[0].masks[f], tracks[0].masks[0]);
        }
    }

    #[test]
    fn same_seed_gives_byte_identical_annotations() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let cfg = SynthConfig::desk_default(5);
        generate(&cfg, d1.path()).unwrap();
        generate(&cfg, d2.path()).unwrap();
        let a = std::fs::read(d1.path().join("annotations.json")).unwrap();
        let b = std::fs::read(d2.path().join("annotations.json")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn disk_area_close_to_analytic() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&one_disk_config(0.0), dir.path()).unwrap();
        let area = ds.tracks(1)[0].masks[0].area() as f64;
        let expect = std::f64::consts::PI * 20.0 * 20.0;
        assert!((area - expect).abs() / expect < 0.02, "area {area} vs {expect}");
    }

    #[test]
    fn boxes_match_masks_everywhere() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&SynthConfig::desk_default(3), dir.path()).unwrap();
        for tracks in ds.annotations.values() {
            for t in tracks {
                for (m, b) in t.masks.iter().zip(&t.boxes) {
                    assert_eq!(&box_from_mask(m), b);
                }
            }
        }
    }

    #[test]
    fn class_counts_are_balanced() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&SynthConfig::desk_default(9), dir.path()).unwrap();
        let mut counts = std::collections::BTreeMap::new();
        for tracks in ds.annotations.values() {
            for t in tracks {
                *counts.entry(t.category_id).or_insert(0usize) += 1;
            }
        }
        assert_eq!(counts.len(), 5);
        let min = counts.values().min().unwrap();
        let max = counts.values().max().unwrap();
        assert!(max - min <= 1, "counts {counts:?}");
    }

    #[test]
    fn occlusion_removes_pixels_from_earlier_instance() {
        let mut cfg = one_disk_config(0.0);
        cfg.instances_per_video = (2, 2);
        cfg.size_range = (24.0, 24.0); // large disks on 64x64 must overlap
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&cfg, dir.path()).unwrap();
        let tracks = ds.tracks(1);
        assert_eq!(tracks.len(), 2);
        for f in 0..4 {
            let (a, b) = (&tracks[0].masks[f], &tracks[1].masks[f]);
            for r in 0..64 {
                for c in 0..64 {
                    assert!(!(a.get(r, c) && b.get(r, c)), "masks overlap at {r},{c}");
                }
            }
        }
    }

    #[test]
    fn rejects_bad_resolution() {
        let mut cfg = one_disk_config(0.0);
        cfg.resolution = (60, 64);
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(generate(&cfg, dir.path()), Err(Error::SynthConfig(_))));
    }

    #[test]
    fn written_annotations_reload_identically() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&SynthConfig::desk_default(2), dir.path()).unwrap();
        let loaded = load_annotations(&dir.path().join("annotations.json")).unwrap();
        assert_eq!(ds.videos.len(), loaded.videos.len());
        assert_eq!(ds.num_instances(), loaded.num_instances());
        for (vid, tracks) in &ds.annotations {
            let lt = loaded.tracks(*vid);
            for (a, b) in tracks.iter().zip(lt) {
                assert_eq!(a.masks, b.masks);
                assert_eq!(a.boxes, b.boxes);
                assert_eq!(a.category_id, b.category_id);
            }
        }
    }
}
