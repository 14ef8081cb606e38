#![allow(dead_code)]

use std::path::Path;

use depthlane::dataset::{generate, write_dataset, Dataset};
use depthlane::TrainConfig;
use depthlane_core::SceneParams;

/// Scenes rendered at a quarter of the default size (32x64).
pub fn small_scenes(first_seed: u64, count: usize) -> Dataset {
    generate(&SceneParams::default().downscaled(4), first_seed, count).unwrap()
}

/// Writes `count` small scenes to `dir/train` and returns a config that trains
/// a narrow model on them, with outputs under `dir/run`.
pub fn small_setup(dir: &Path, count: usize) -> TrainConfig {
    let data = small_scenes(0, count);
    write_dataset(&data, &dir.join("train")).unwrap();
    TrainConfig {
        dataset: dir.join("train"),
        out_dir: dir.join("run"),
        channels: 8,
        embed_dim: 3,
        steps: 5,
        pretrain_steps: 5,
        eval_every: 0,
        ..TrainConfig::default()
    }
}
