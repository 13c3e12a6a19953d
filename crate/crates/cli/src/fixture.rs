//! A self-contained synthetic study: annotated persons of varying size, a
//! cached layer whose signal channel encodes the leg mask, and a config.

use std::fs;
use std::path::{Path, PathBuf};

use concept_embed::maskgen::{letterbox, rasterize, Concept};
use concept_embed::skeleton::{estimate_size, STANDARD_HEIGHT_M};
use concept_embed::synthetic::{proportional_skeleton, SkeletonSelection};
use concept_embed::tensors::{CacheWriter, DType, Tensor};
use concept_embed::train::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{CategoryFilter, ExperimentSpec, KernelMode, LayerSpec};
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone)]
pub struct StudyFixture {
    pub images: usize,
    pub channels: usize,
    pub grid: usize,
    pub target_side: usize,
    pub signal_channel: usize,
    pub noise_sigma: f32,
    /// Range of projection scales; 400 px images, 1.7 m persons.
    pub px_per_m: (f64, f64),
    pub dtype: DType,
    pub seed: u64,
}

impl Default for StudyFixture {
    fn default() -> Self {
        Self {
            images: 40,
            channels: 4,
            grid: 13,
            target_side: 104,
            signal_channel: 1,
            noise_sigma: 0.1,
            px_per_m: (55.0, 200.0),
            dtype: DType::Bf16,
            seed: 3,
        }
    }
}

pub const FIXTURE_NET: &str = "toy";
pub const FIXTURE_LAYER: &str = "toy/block1";

impl StudyFixture {
    /// Writes `annotations.jsonl`, `cache/` and `study.toml` into `dir` and
    /// returns the config path.
    pub fn write(&self, dir: &Path) -> CliResult<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let noise = Normal::new(0.0f32, self.noise_sigma).expect("finite sigma");
        let cache_dir = dir.join("cache");
        let mut writer = CacheWriter::create(
            &cache_dir,
            FIXTURE_LAYER,
            (self.channels, self.grid, self.grid),
            self.dtype,
        )?;
        let cell = self.target_side / self.grid;
        let mut lines = String::new();
        for i in 0..self.images {
            let ppm = rng.random_range(self.px_per_m.0..self.px_per_m.1);
            let base = proportional_skeleton(ppm, STANDARD_HEIGHT_M, &SkeletonSelection::body());
            let person_h = ppm * STANDARD_HEIGHT_M;
            let slack_y = ((400.0 - person_h) / 2.0 - 5.0).max(0.0);
            let slack_x = (200.0 - 0.4 * ppm).max(0.0);
            let dx = rng.random_range(-slack_x..=slack_x);
            let dy = rng.random_range(-slack_y..=slack_y);
            let mut ann = base.map_points(|x, y| (x + dx, y + dy), 1.0);
            ann.image_id = format!("img{i:03}");
            ann.id = Some(format!("p{i:03}"));
            lines.push_str(&ann.to_json_line());
            lines.push('\n');

            let size = estimate_size(&ann, STANDARD_HEIGHT_M)?;
            let t = letterbox(ann.image_width, ann.image_height, self.target_side)?;
            let mask = rasterize(&ann, Concept::Leg, &t, &size).mask;
            let g = self.grid;
            let mut data: Vec<f32> = (0..self.channels * g * g).map(|_| noise.sample(&mut rng)).collect();
            for cy in 0..g {
                for cx in 0..g {
                    let mut on = 0usize;
                    for y in cy * cell..(cy + 1) * cell {
                        for x in cx * cell..(cx + 1) * cell {
                            on += usize::from(mask.get(x, y));
                        }
                    }
                    data[self.signal_channel * g * g + cy * g + cx] += on as f32 / (cell * cell) as f32;
                }
            }
            writer.write_sample(&ann.image_id, &Tensor::new(vec![self.channels, g, g], data)?)?;
        }
        writer.finish()?;
        let ann_path = dir.join("annotations.jsonl");
        fs::write(&ann_path, lines).map_err(|e| CliError::io(&ann_path, e))?;

        let spec = ExperimentSpec {
            output_dir: PathBuf::from("out"),
            annotations: PathBuf::from("annotations.jsonl"),
            target_side: self.target_side,
            concepts: vec![Concept::Leg],
            categories: CategoryFilter::EVERY.to_vec(),
            kernel_modes: vec![KernelMode::Fixed1x1, KernelMode::Adaptive],
            folds: 5,
            train: TrainConfig {
                seed: self.seed,
                ..TrainConfig::default()
            },
            layers: vec![LayerSpec {
                net: FIXTURE_NET.into(),
                layer: FIXTURE_LAYER.into(),
                cache: PathBuf::from("cache"),
            }],
        };
        let config = dir.join("study.toml");
        fs::write(&config, spec.to_toml()).map_err(|e| CliError::io(&config, e))?;
        Ok(config)
    }
}
