//! Open-world two-task split construction.
//!
//! A split groups the dataset's super-categories into two disjoint tasks,
//! assigns each video to a task by majority instance vote, and carves a
//! seeded test fraction out of each task. Known evaluation at task `t`
//! uses the test videos of tasks `<= t`; unknown evaluation uses the test
//! videos of tasks `> t`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{CategoryId, Dataset, VideoId};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitConfig {
    pub split_name: String,
    pub task1_supercats: Vec<String>,
    pub task2_supercats: Vec<String>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    pub seed: u64,
}

fn default_test_fraction() -> f64 {
    0.2
}

/// One task's category and video partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPartition {
    /// Cumulative known categories at this task (monotone across tasks).
    pub known_category_ids: Vec<CategoryId>,
    pub train_videos: Vec<VideoId>,
    pub known_test_videos: Vec<VideoId>,
    pub unknown_test_videos: Vec<VideoId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSplit {
    pub split_name: String,
    pub seed: u64,
    pub tasks: Vec<TaskPartition>,
}

impl TaskSplit {
    pub fn task(&self, t: usize) -> &TaskPartition {
        &self.tasks[t - 1]
    }

    /// Categories first revealed at task 2.
    pub fn task2_new_ids(&self) -> Vec<CategoryId> {
        let t1: BTreeSet<_> = self.tasks[0].known_category_ids.iter().collect();
        self.tasks[1]
            .known_category_ids
            .iter()
            .filter(|id| !t1.contains(id))
            .copied()
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string_pretty(self).expect("split serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::SplitConfig(format!("bad split file: {e}")))
    }
}

/// Build a two-task split. Every super-category present in the dataset
/// must be claimed by exactly one task.
pub fn build_split(dataset: &Dataset, config: &SplitConfig) -> Result<TaskSplit> {
    if !(config.test_fraction > 0.0 && config.test_fraction < 1.0) {
        return Err(Error::SplitConfig(format!(
            "test_fraction {} must be in (0,1)",
            config.test_fraction
        )));
    }
    let t1: BTreeSet<&str> = config.task1_supercats.iter().map(String::as_str).collect();
    let t2: BTreeSet<&str> = config.task2_supercats.iter().map(String::as_str).collect();
    if let Some(dup) = t1.intersection(&t2).next() {
        return Err(Error::SplitConfig(format!(
            "super-category `{dup}` is assigned to both tasks"
        )));
    }

    let mut task_of_category: BTreeMap<CategoryId, usize> = BTreeMap::new();
    let mut cats_per_task: [Vec<CategoryId>; 2] = [Vec::new(), Vec::new()];
    for (&id, info) in &dataset.categories {
        let task = if t1.contains(info.super_category.as_str()) {
            0
        } else if t2.contains(info.super_category.as_str()) {
            1
        } else {
            return Err(Error::SplitConfig(format!(
                "super-category `{}` (category {id}) is not assigned to any task",
                info.super_category
            )));
        };
        task_of_category.insert(id, task);
        cats_per_task[task].push(id);
    }

    // majority instance vote; ties go to the lower task
    let mut videos_per_task: [Vec<VideoId>; 2] = [Vec::new(), Vec::new()];
    for &vid in dataset.videos.keys() {
        let mut votes = [0usize; 2];
        for track in dataset.tracks(vid) {
            if let Some(&t) = task_of_category.get(&track.category_id) {
                votes[t] += 1;
            }
        }
        let task = if votes[1] > votes[0] { 1 } else { 0 };
        videos_per_task[task].push(vid);
    }
    for (t, vids) in videos_per_task.iter().enumerate() {
        if vids.is_empty() {
            return Err(Error::SplitConstruction(format!("task {} has zero videos", t + 1)));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut train: [Vec<VideoId>; 2] = [Vec::new(), Vec::new()];
    let mut test: [Vec<VideoId>; 2] = [Vec::new(), Vec::new()];
    for t in 0..2 {
        let mut vids = videos_per_task[t].clone();
        vids.sort_unstable();
        vids.shuffle(&mut rng);
        let n_test = ((config.test_fraction * vids.len() as f64).floor() as usize).max(1);
        let mut te: Vec<VideoId> = vids[..n_test].to_vec();
        let mut tr: Vec<VideoId> = vids[n_test..].to_vec();
        te.sort_unstable();
        tr.sort_unstable();
        test[t] = te;
        train[t] = tr;
    }

    let mut known1 = cats_per_task[0].clone();
    known1.sort_unstable();
    let mut new2 = cats_per_task[1].clone();
    new2.sort_unstable();
    let mut known2 = known1.clone();
    known2.extend_from_slice(&new2);

    let mut known_test2: Vec<VideoId> =
        test[0].iter().chain(test[1].iter()).copied().collect();
    known_test2.sort_unstable();

    Ok(TaskSplit {
        split_name: config.split_name.clone(),
        seed: config.seed,
        tasks: vec![
            TaskPartition {
                known_category_ids: known1,
                train_videos: train[0].clone(),
                known_test_videos: test[0].clone(),
                unknown_test_videos: test[1].clone(),
            },
            TaskPartition {
                known_category_ids: known2,
                train_videos: train[1].clone(),
                known_test_videos: known_test2,
                unknown_test_videos: Vec::new(),
            },
        ],
    })
}

/// An instance of a not-yet-known category inside a train video; such
/// instances are masked out of supervision rather than treated as errors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SuppressedInstance {
    pub task: usize,
    pub video_id: VideoId,
    pub category_id: CategoryId,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct SplitReport {
    pub violations: Vec<String>,
    pub suppressed_future_class_instances: Vec<SuppressedInstance>,
}

impl SplitReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check split invariants; violations become report entries, never errors.
pub fn validate_split(split: &TaskSplit, dataset: &Dataset) -> SplitReport {
    let mut report = SplitReport::default();
    let known1: BTreeSet<_> = split.tasks[0].known_category_ids.iter().copied().collect();
    let known2: BTreeSet<_> = split.tasks[1].known_category_ids.iter().copied().collect();

    if !known1.is_subset(&known2) {
        report.violations.push("task-2 known set does not contain task-1 known set".into());
    }
    let new2: BTreeSet<_> = known2.difference(&known1).copied().collect();
    if !new2.is_disjoint(&known1) {
        report.violations.push("task categories overlap".into());
    }

    for (t, part) in split.tasks.iter().enumerate() {
        let train: BTreeSet<_> = part.train_videos.iter().copied().collect();
        let test: BTreeSet<_> = part.known_test_videos.iter().copied().collect();
        for v in train.intersection(&test) {
            report
                .violations
                .push(format!("task {} video {v} is in both train and test", t + 1));
        }
        let unknown: BTreeSet<_> = part.unknown_test_videos.iter().copied().collect();
        for v in train.intersection(&unknown) {
            report
                .violations
                .push(format!("task {} video {v} is in both train and unknown-test", t + 1));
        }

        let known: &BTreeSet<_> = if t == 0 { &known1 } else { &known2 };
        for &vid in &part.train_videos {
            for track in dataset.tracks(vid) {
                if !known.contains(&track.category_id) {
                    report.suppressed_future_class_instances.push(SuppressedInstance {
                        task: t + 1,
                        video_id: vid,
                        category_id: track.category_id,
                    });
                }
            }
        }
    }
    report
}

#[derive(Clone, Debug, Serialize)]
pub struct TaskStats {
    pub task: usize,
    pub train_videos: usize,
    pub known_test_videos: usize,
    pub unknown_test_videos: usize,
    pub train_instances: usize,
    pub known_test_instances: usize,
    pub unknown_test_instances: usize,
}

pub fn split_stats(split: &TaskSplit, dataset: &Dataset) -> Vec<TaskStats> {
    let count = |vids: &[VideoId]| -> usize { vids.iter().map(|v| dataset.tracks(*v).len()).sum() };
    split
        .tasks
        .iter()
        .enumerate()
        .map(|(t, part)| TaskStats {
            task: t + 1,
            train_videos: part.train_videos.len(),
            known_test_videos: part.known_test_videos.len(),
            unknown_test_videos: part.unknown_test_videos.len(),
            train_instances: count(&part.train_videos),
            known_test_instances: count(&part.known_test_videos),
            unknown_test_instances: count(&part.unknown_test_videos),
        })
        .collect()
}

/// The five desk-scale split configurations over the synthetic
/// super-categories (round / angular / pointed / hollow / elongated).
pub fn desk_splits(seed: u64) -> Vec<SplitConfig> {
    let mk = |name: &str, t1: &[&str], t2: &[&str]| SplitConfig {
        split_name: name.to_string(),
        task1_supercats: t1.iter().map(|s| s.to_string()).collect(),
        task2_supercats: t2.iter().map(|s| s.to_string()).collect(),
        test_fraction: 0.2,
        seed,
    };
    vec![
        mk("desk_a", &["round", "angular", "pointed"], &["hollow", "elongated"]),
        mk("desk_b", &["round", "hollow"], &["angular", "pointed", "elongated"]),
        mk("desk_c", &["angular", "elongated"], &["round", "pointed", "hollow"]),
        mk("desk_d", &["round", "angular", "hollow", "elongated"], &["pointed"]),
        mk("desk_e", &["pointed", "hollow", "elongated"], &["round", "angular"]),
    ]
}
