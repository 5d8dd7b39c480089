//! Run configuration: a single JSON document with defaults for every field.
//!
//! All randomness flows from the named seeds here. Stage seeds default to
//! values derived from the master `seed`, so overriding the master re-seeds
//! the whole pipeline while explicit per-stage seeds still win.

use geovoxel_core::encoding::{default_lambda_grid, SplitConfig};
use geovoxel_core::featmodel::ContrastiveConfig;
use geovoxel_core::rng::derive_seed;
use geovoxel_core::synth::SceneSpec;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

const STREAM_SCENES: u64 = 1;
const STREAM_TRAINING: u64 = 2;
const STREAM_FEATURES: u64 = 3;
const STREAM_RESPONSES: u64 = 4;
const STREAM_SPLIT: u64 = 5;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; per-stage seeds derive from it unless overridden.
    pub seed: u64,
    pub seeds: SeedOverrides,
    pub scenes: SceneConfig,
    pub grid: GridConfig,
    pub contrastive: ContrastiveSettings,
    pub split: SplitSettings,
    pub subjects: usize,
    pub voxels: VoxelConfig,
    /// Requested PCA components; clamped to min(K, train rows - 1, features).
    pub pca_components: usize,
    /// Inclusion threshold on the noise-ceiling fraction.
    pub nc_threshold: f64,
    pub response_source: ResponseSource,
    pub models: Vec<ModelConfig>,
    /// ROI names for the synthesized atlas, assigned as contiguous blocks.
    pub rois: Vec<String>,
    /// Optional external atlas labels container (i32 [V]); ROI names are
    /// read from `<stem>_names.json` next to it.
    pub atlas_path: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            seeds: SeedOverrides::default(),
            scenes: SceneConfig::default(),
            grid: GridConfig::default(),
            contrastive: ContrastiveSettings::default(),
            split: SplitSettings::default(),
            subjects: 3,
            voxels: VoxelConfig::default(),
            pca_components: 1000,
            nc_threshold: 0.10,
            response_source: ResponseSource::default(),
            models: vec![
                ModelConfig {
                    name: "geovoxel".to_string(),
                    source: ModelSource::Geovoxel,
                },
                ModelConfig {
                    name: "gauss256".to_string(),
                    source: ModelSource::Random { dims: 256 },
                },
            ],
            rois: default_rois(),
            atlas_path: None,
        }
    }
}

pub fn default_rois() -> Vec<String> {
    [
        "early",
        "midventral",
        "midlateral",
        "midparietal",
        "highventral",
        "highlateral",
        "highparietal",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SeedOverrides {
    pub scenes: Option<u64>,
    pub training: Option<u64>,
    pub features: Option<u64>,
    pub responses: Option<u64>,
    pub split: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub stimuli: usize,
    pub train_pairs: usize,
    pub width: usize,
    pub height: usize,
    pub fov_degrees: f64,
    pub spheres: usize,
    pub boxes: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub min_separation: f64,
    pub lateral: f64,
    pub z_near: f64,
    pub z_far: f64,
    pub max_rotation: f64,
    pub max_translation: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            stimuli: 200,
            train_pairs: 20,
            width: 64,
            height: 64,
            fov_degrees: 60.0,
            spheres: 30,
            boxes: 0,
            radius_min: 0.06,
            radius_max: 0.09,
            min_separation: 0.25,
            lateral: 1.9,
            z_near: 3.2,
            z_far: 6.2,
            max_rotation: 0.05,
            max_translation: 0.15,
        }
    }
}

impl SceneConfig {
    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            n_spheres: self.spheres,
            n_boxes: self.boxes,
            image_width: self.width,
            image_height: self.height,
            fov: self.fov_degrees.to_radians(),
            lateral: self.lateral,
            z_near: self.z_near,
            z_far: self.z_far,
            radius_min: self.radius_min,
            radius_max: self.radius_max,
            min_separation: self.min_separation,
            max_rotation: self.max_rotation,
            max_translation: self.max_translation,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub dims: [usize; 3],
    pub margin: f64,
    /// Block counts per axis for pooled feature export.
    pub pool_blocks: [usize; 3],
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            dims: [32, 32, 32],
            margin: 1.2,
            pool_blocks: [4, 4, 4],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveSettings {
    pub temperature: f64,
    pub negatives_per_anchor: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub encoder_init_seed: u64,
}

impl Default for ContrastiveSettings {
    fn default() -> Self {
        ContrastiveSettings {
            temperature: 0.07,
            negatives_per_anchor: 64,
            learning_rate: 0.1,
            epochs: 30,
            encoder_init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSettings {
    pub train_fraction: f64,
    pub cv_folds: usize,
    pub lambda_grid: Vec<f64>,
}

impl Default for SplitSettings {
    fn default() -> Self {
        SplitSettings {
            train_fraction: 0.85,
            cv_folds: 7,
            lambda_grid: default_lambda_grid(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct VoxelConfig {
    pub count: usize,
    pub noise_level: f64,
    pub repeats: usize,
}

impl Default for VoxelConfig {
    fn default() -> Self {
        VoxelConfig {
            count: 50,
            noise_level: 0.5,
            repeats: 3,
        }
    }
}

/// Which model/layer's features generate the synthetic voxel responses.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ResponseSource {
    pub model: String,
    pub layer: String,
}

impl Default for ResponseSource {
    fn default() -> Self {
        ResponseSource {
            model: "geovoxel".to_string(),
            layer: "conv2".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub source: ModelSource,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    /// The trained voxel encoder; exports one feature matrix per conv layer.
    Geovoxel,
    /// Seeded Gaussian features with one layer labeled "gauss".
    Random { dims: usize },
    /// Externally produced feature containers (f64 [stimuli, features]).
    External { layers: Vec<ExternalLayer> },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExternalLayer {
    pub layer: String,
    pub path: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("bad config {}: {e}", path.display()))
    }

    pub fn scenes_seed(&self) -> u64 {
        self.seeds
            .scenes
            .unwrap_or_else(|| derive_seed(self.seed, STREAM_SCENES))
    }

    pub fn training_seed(&self) -> u64 {
        self.seeds
            .training
            .unwrap_or_else(|| derive_seed(self.seed, STREAM_TRAINING))
    }

    pub fn features_seed(&self) -> u64 {
        self.seeds
            .features
            .unwrap_or_else(|| derive_seed(self.seed, STREAM_FEATURES))
    }

    pub fn responses_seed(&self) -> u64 {
        self.seeds
            .responses
            .unwrap_or_else(|| derive_seed(self.seed, STREAM_RESPONSES))
    }

    pub fn split_seed(&self) -> u64 {
        self.seeds
            .split
            .unwrap_or_else(|| derive_seed(self.seed, STREAM_SPLIT))
    }

    pub fn contrastive_config(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            temperature: self.contrastive.temperature,
            negatives_per_anchor: self.contrastive.negatives_per_anchor,
            learning_rate: self.contrastive.learning_rate,
            epochs: self.contrastive.epochs,
            seed: self.training_seed(),
        }
    }

    pub fn split_config(&self) -> SplitConfig {
        SplitConfig {
            train_fraction: self.split.train_fraction,
            cv_folds: self.split.cv_folds,
            lambda_grid: self.split.lambda_grid.clone(),
            seed: self.split_seed(),
        }
    }

    pub fn model(&self, name: &str) -> Option<&ModelConfig> {
        self.models.iter().find(|m| m.name == name)
    }

    /// Layer labels a model exposes, in model order.
    pub fn model_layers(&self, model: &ModelConfig) -> Vec<String> {
        match &model.source {
            ModelSource::Geovoxel => vec!["conv1".to_string(), "conv2".to_string()],
            ModelSource::Random { .. } => vec!["gauss".to_string()],
            ModelSource::External { layers } => {
                layers.iter().map(|l| l.layer.clone()).collect()
            }
        }
    }

    /// Structural validation plus existence checks for referenced paths.
    pub fn validate(&self) -> Result<(), String> {
        if self.scenes.stimuli < 2 {
            return Err("scenes.stimuli must be at least 2".to_string());
        }
        if self.scenes.width == 0 || self.scenes.height == 0 {
            return Err("scene image dimensions must be positive".to_string());
        }
        if self.subjects == 0 {
            return Err("subjects must be at least 1".to_string());
        }
        if self.voxels.count == 0 {
            return Err("voxels.count must be at least 1".to_string());
        }
        if self.voxels.repeats == 0 {
            return Err("voxels.repeats must be at least 1".to_string());
        }
        if !self.voxels.noise_level.is_finite() || self.voxels.noise_level < 0.0 {
            return Err("voxels.noise_level must be nonnegative".to_string());
        }
        if self.pca_components == 0 {
            return Err("pca_components must be at least 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.nc_threshold) {
            return Err("nc_threshold must lie in [0, 1]".to_string());
        }
        if self.models.is_empty() {
            return Err("at least one model is required".to_string());
        }
        let mut names: Vec<&str> = self.models.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.models.len() {
            return Err("model names must be unique".to_string());
        }
        for a in 0..3 {
            if self.grid.pool_blocks[a] == 0 || self.grid.dims[a] % self.grid.pool_blocks[a] != 0 {
                return Err(format!(
                    "grid.dims {:?} must be divisible by pool_blocks {:?}",
                    self.grid.dims, self.grid.pool_blocks
                ));
            }
        }
        if self.rois.is_empty() {
            return Err("at least one roi name is required".to_string());
        }
        let source_model = self
            .model(&self.response_source.model)
            .ok_or_else(|| format!("response_source model {:?} not in model list", self.response_source.model))?;
        if !self
            .model_layers(source_model)
            .iter()
            .any(|l| *l == self.response_source.layer)
        {
            return Err(format!(
                "response_source layer {:?} not exposed by model {:?}",
                self.response_source.layer, self.response_source.model
            ));
        }
        self.split
            .clone()
            .probe_validate()
            .map_err(|e| format!("split settings: {e}"))?;
        // Referenced paths must exist up front so a bad config fails before
        // any stage writes artifacts.
        if let Some(atlas) = &self.atlas_path {
            if !atlas.exists() {
                return Err(format!("atlas_path {} does not exist", atlas.display()));
            }
        }
        for model in &self.models {
            if let ModelSource::External { layers } = &model.source {
                if layers.is_empty() {
                    return Err(format!("external model {:?} lists no layers", model.name));
                }
                for layer in layers {
                    if !layer.path.exists() {
                        return Err(format!(
                            "feature file {} for model {:?} does not exist",
                            layer.path.display(),
                            model.name
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

impl SplitSettings {
    fn probe_validate(self) -> Result<(), String> {
        let cfg = SplitConfig {
            train_fraction: self.train_fraction,
            cv_folds: self.cv_folds,
            lambda_grid: self.lambda_grid,
            seed: 0,
        };
        cfg.validate().map_err(|e| e.to_string())
    }
}
