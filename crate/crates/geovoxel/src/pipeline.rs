//! Staged pipeline: synth -> train -> featurize -> encode -> stats -> report.
//!
//! Each stage reads its inputs from the output directory and writes its own
//! artifacts there, so the stages work both as individual subcommands and
//! chained by `run`. Every stage is deterministic given the config seeds,
//! and the parallel sections only split work across independent items, so
//! reports are byte-identical for any `--threads` value.

use crate::config::{ModelSource, RunConfig};
use crate::container::TensorContainer;
use crate::report::{BestLayerRow, LayerMeanRow, NcRow, StatsReport, TestRow};
use crate::threads::chunked_map;
use geovoxel_core::encoding::{
    cv_select_lambda, estimate_noise_ceiling, filter_voxels, fit_pca, pca_project, pearson_r,
    predict, r_squared, ridge_fit_selected, train_test_split, FeatureMatrix, SplitConfig,
};
use geovoxel_core::featmodel::{
    encoder_layer_outputs, pooled_block_features, prepare_pair, train_view_prediction, ConvLayer,
    EncoderParams, Nonlinearity, ScenePair,
};
use geovoxel_core::geometry::{
    lift_to_grid, unproject_depth, CameraIntrinsics, DepthImage, GridSpec, RgbImage, RigidPose,
};
use geovoxel_core::linalg::Matrix;
use geovoxel_core::rng::{derive_seed, Rng};
use geovoxel_core::roistats::{
    best_layer, difference_map, paired_t_test, roi_mean, RoiAtlas, StatsError, SubjectResult,
};
use geovoxel_core::synth::{render_depth, synth_scene, synth_responses, SceneSpec};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Synth,
    Train,
    Featurize,
    Encode,
    Stats,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Config => "config",
            Stage::Synth => "synth",
            Stage::Train => "train",
            Stage::Featurize => "featurize",
            Stage::Encode => "encode",
            Stage::Stats => "stats",
            Stage::Report => "report",
        };
        f.write_str(name)
    }
}

#[derive(Debug)]
pub struct PipelineError {
    pub stage: Stage,
    pub message: String,
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.stage, self.message)
    }
}

impl std::error::Error for PipelineError {}

fn err<E: fmt::Display>(stage: Stage) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError {
        stage,
        message: e.to_string(),
    }
}

fn fail(stage: Stage, message: impl Into<String>) -> PipelineError {
    PipelineError {
        stage,
        message: message.into(),
    }
}

pub fn validate_config(cfg: &RunConfig) -> Result<(), PipelineError> {
    cfg.validate().map_err(err(Stage::Config))
}

// ---------------------------------------------------------------------------
// Output layout

fn scenes_dir(out: &Path) -> PathBuf {
    out.join("scenes")
}

fn train_dir(out: &Path) -> PathBuf {
    out.join("train")
}

fn features_dir(out: &Path) -> PathBuf {
    out.join("features")
}

fn responses_dir(out: &Path) -> PathBuf {
    out.join("responses")
}

fn encode_dir(out: &Path) -> PathBuf {
    out.join("encode")
}

fn stats_dir(out: &Path) -> PathBuf {
    out.join("stats")
}

fn features_path(out: &Path, model: &str, layer: &str) -> PathBuf {
    features_dir(out).join(format!("features_{model}_{layer}.json"))
}

fn metric_path(out: &Path, metric: &str, model: &str, layer: &str, subject: usize) -> PathBuf {
    encode_dir(out).join(format!("{metric}_{model}_{layer}_s{subject}.json"))
}

// ---------------------------------------------------------------------------
// Shared manifest

#[derive(Debug, Serialize, Deserialize)]
struct SceneManifest {
    stimuli: usize,
    train_pairs: usize,
    width: usize,
    height: usize,
    // fx, fy, cx, cy
    intrinsics: [f64; 4],
}

fn write_json<T: Serialize>(stage: Stage, path: &Path, value: &T) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(err(stage))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(err(stage))?;
    fs::write(path, text + "\n").map_err(err(stage))
}

fn read_json<T: for<'de> Deserialize<'de>>(stage: Stage, path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path)
        .map_err(|e| fail(stage, format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| fail(stage, format!("{}: {e}", path.display())))
}

fn read_tensor(stage: Stage, path: &Path) -> Result<TensorContainer, PipelineError> {
    TensorContainer::read(path).map_err(err(stage))
}

fn expect_shape(
    stage: Stage,
    path: &Path,
    tensor: &TensorContainer,
    shape: &[usize],
) -> Result<(), PipelineError> {
    if tensor.meta.shape != shape {
        return Err(fail(
            stage,
            format!(
                "{}: shape {:?} does not match expected {:?}",
                path.display(),
                tensor.meta.shape,
                shape
            ),
        ));
    }
    Ok(())
}

fn write_tensor(stage: Stage, path: &Path, tensor: &TensorContainer) -> Result<(), PipelineError> {
    tensor.write(path).map_err(err(stage))
}

// ---------------------------------------------------------------------------
// Stage: synth

pub fn stage_synth(cfg: &RunConfig, out: &Path, threads: usize) -> Result<(), PipelineError> {
    validate_config(cfg)?;
    let stage = Stage::Synth;
    let spec = cfg.scenes.scene_spec();
    let intrinsics = spec
        .intrinsics()
        .map_err(|e| fail(stage, e.to_string()))?;
    let (w, h) = (cfg.scenes.width, cfg.scenes.height);
    let seed = cfg.scenes_seed();

    // Stimulus views (view A of each stimulus scene).
    let s = cfg.scenes.stimuli;
    let rendered = chunked_map(s, threads, |range| {
        range
            .map(|i| {
                let scene = synth_scene(derive_seed(seed, i as u64), &spec)
                    .expect("scene spec validated");
                render_depth(&scene, &scene.view_a)
            })
            .collect::<Vec<_>>()
    });
    let mut rgb = Vec::with_capacity(s * h * w * 3);
    let mut depth = Vec::with_capacity(s * h * w);
    for (d, c) in &rendered {
        rgb.extend(c.data.iter().map(|&x| x as f32));
        depth.extend(d.data.iter().map(|&x| x as f32));
    }
    let dir = scenes_dir(out);
    write_tensor(
        stage,
        &dir.join("stimuli_rgb.json"),
        &TensorContainer::f32("stimuli_rgb", vec![s, h, w, 3], rgb),
    )?;
    write_tensor(
        stage,
        &dir.join("stimuli_depth.json"),
        &TensorContainer::f32("stimuli_depth", vec![s, h, w], depth),
    )?;

    // Two-view training pairs.
    let p = cfg.scenes.train_pairs;
    let pair_views = chunked_map(p, threads, |range| {
        range
            .map(|i| {
                let scene = synth_scene(derive_seed(seed, 1_000_000 + i as u64), &spec)
                    .expect("scene spec validated");
                let a = render_depth(&scene, &scene.view_a);
                let b = render_depth(&scene, &scene.view_b);
                (a, b, scene.view_a.pose.clone(), scene.view_b.pose.clone())
            })
            .collect::<Vec<_>>()
    });
    let mut prgb = Vec::with_capacity(p * 2 * h * w * 3);
    let mut pdepth = Vec::with_capacity(p * 2 * h * w);
    let mut pposes = Vec::with_capacity(p * 2 * 16);
    for ((da, ca), (db, cb), pose_a, pose_b) in &pair_views {
        for (d, c) in [(da, ca), (db, cb)] {
            prgb.extend(c.data.iter().map(|&x| x as f32));
            pdepth.extend(d.data.iter().map(|&x| x as f32));
        }
        for pose in [pose_a, pose_b] {
            pposes.extend_from_slice(&pose_to_rows(pose));
        }
    }
    write_tensor(
        stage,
        &dir.join("pairs_rgb.json"),
        &TensorContainer::f32("pairs_rgb", vec![p, 2, h, w, 3], prgb),
    )?;
    write_tensor(
        stage,
        &dir.join("pairs_depth.json"),
        &TensorContainer::f32("pairs_depth", vec![p, 2, h, w], pdepth),
    )?;
    write_tensor(
        stage,
        &dir.join("pairs_pose.json"),
        &TensorContainer::f64("pairs_pose", vec![p, 2, 4, 4], pposes),
    )?;

    write_json(
        stage,
        &dir.join("manifest.json"),
        &SceneManifest {
            stimuli: s,
            train_pairs: p,
            width: w,
            height: h,
            intrinsics: [intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy],
        },
    )?;

    write_atlas(cfg, out)?;
    Ok(())
}

fn pose_to_rows(pose: &RigidPose) -> [f64; 16] {
    let mut m = [0.0; 16];
    for i in 0..3 {
        for j in 0..3 {
            m[i * 4 + j] = pose.rotation[i][j];
        }
        m[i * 4 + 3] = pose.translation[i];
    }
    m[15] = 1.0;
    m
}

fn pose_from_rows(stage: Stage, m: &[f64]) -> Result<RigidPose, PipelineError> {
    let mut rotation = [[0.0; 3]; 3];
    let mut translation = [0.0; 3];
    for i in 0..3 {
        for j in 0..3 {
            rotation[i][j] = m[i * 4 + j];
        }
        translation[i] = m[i * 4 + 3];
    }
    RigidPose::new(rotation, translation).map_err(err(stage))
}

fn write_atlas(cfg: &RunConfig, out: &Path) -> Result<(), PipelineError> {
    let stage = Stage::Synth;
    let v = cfg.voxels.count;
    let dir = scenes_dir(out);
    let (labels, names): (Vec<i32>, BTreeMap<String, String>) = match &cfg.atlas_path {
        Some(path) => {
            let tensor = read_tensor(stage, path)?;
            let labels = tensor.as_i32(path).map_err(err(stage))?.to_vec();
            if labels.len() != v {
                return Err(fail(
                    stage,
                    format!("atlas has {} labels for {v} voxels", labels.len()),
                ));
            }
            let names_path = path.with_file_name(format!(
                "{}_names.json",
                path.file_stem().and_then(|s| s.to_str()).unwrap_or("atlas")
            ));
            let names: BTreeMap<String, String> = read_json(stage, &names_path)?;
            (labels, names)
        }
        None => {
            // Contiguous blocks of voxels per ROI, in config order.
            let r = cfg.rois.len();
            let base = v / r;
            let extra = v % r;
            let mut labels = Vec::with_capacity(v);
            for (idx, _name) in cfg.rois.iter().enumerate() {
                let len = base + usize::from(idx < extra);
                labels.extend(std::iter::repeat((idx + 1) as i32).take(len));
            }
            let names = cfg
                .rois
                .iter()
                .enumerate()
                .map(|(idx, name)| ((idx + 1).to_string(), name.clone()))
                .collect();
            (labels, names)
        }
    };
    write_tensor(
        stage,
        &dir.join("atlas_labels.json"),
        &TensorContainer::i32("atlas_labels", vec![v], labels),
    )?;
    write_json(stage, &dir.join("atlas_names.json"), &names)
}

fn read_atlas(stage: Stage, out: &Path) -> Result<RoiAtlas, PipelineError> {
    let dir = scenes_dir(out);
    let labels_path = dir.join("atlas_labels.json");
    let tensor = read_tensor(stage, &labels_path)?;
    let labels: Vec<u32> = tensor
        .as_i32(&labels_path)
        .map_err(err(stage))?
        .iter()
        .map(|&l| l.max(0) as u32)
        .collect();
    let names_raw: BTreeMap<String, String> = read_json(stage, &dir.join("atlas_names.json"))?;
    let names = parse_atlas_names(names_raw, stage)?;
    RoiAtlas::new(labels, names).map_err(err(stage))
}

fn parse_atlas_names(
    raw: BTreeMap<String, String>,
    stage: Stage,
) -> Result<BTreeMap<u32, String>, PipelineError> {
    let mut out = BTreeMap::new();
    for (k, v) in raw {
        let id: u32 = k
            .parse()
            .map_err(|_| fail(stage, format!("atlas name key {k:?} is not an id")))?;
        out.insert(id, v);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Stage: train

#[derive(Debug, Serialize, Deserialize)]
struct ArchLayer {
    size: usize,
    cin: usize,
    cout: usize,
    nonlinearity: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainSummary {
    layers: Vec<ArchLayer>,
    epochs: usize,
    skipped_pairs: usize,
    final_loss: Option<f64>,
}

fn read_scene_pairs(stage: Stage, out: &Path) -> Result<Vec<ScenePair>, PipelineError> {
    let dir = scenes_dir(out);
    let manifest: SceneManifest = read_json(stage, &dir.join("manifest.json"))?;
    let (w, h, p) = (manifest.width, manifest.height, manifest.train_pairs);
    let intr = CameraIntrinsics::new(
        manifest.intrinsics[0],
        manifest.intrinsics[1],
        manifest.intrinsics[2],
        manifest.intrinsics[3],
        w,
        h,
    )
    .map_err(err(stage))?;

    let rgb_path = dir.join("pairs_rgb.json");
    let rgb = read_tensor(stage, &rgb_path)?;
    expect_shape(stage, &rgb_path, &rgb, &[p, 2, h, w, 3])?;
    let rgb = rgb.as_f32(&rgb_path).map_err(err(stage))?;
    let depth_path = dir.join("pairs_depth.json");
    let depth = read_tensor(stage, &depth_path)?;
    expect_shape(stage, &depth_path, &depth, &[p, 2, h, w])?;
    let depth = depth.as_f32(&depth_path).map_err(err(stage))?;
    let pose_path = dir.join("pairs_pose.json");
    let poses = read_tensor(stage, &pose_path)?;
    expect_shape(stage, &pose_path, &poses, &[p, 2, 4, 4])?;
    let poses = poses.as_f64(&pose_path).map_err(err(stage))?;

    let img = h * w;
    let mut pairs = Vec::with_capacity(p);
    for i in 0..p {
        let view = |v: usize| -> Result<(RgbImage, DepthImage), PipelineError> {
            let rgb_off = ((i * 2) + v) * img * 3;
            let d_off = ((i * 2) + v) * img;
            let rgb_data: Vec<f64> = rgb[rgb_off..rgb_off + img * 3]
                .iter()
                .map(|&x| x as f64)
                .collect();
            let depth_data: Vec<f64> = depth[d_off..d_off + img]
                .iter()
                .map(|&x| x as f64)
                .collect();
            Ok((
                RgbImage::new(w, h, rgb_data).map_err(err(stage))?,
                DepthImage::new(w, h, depth_data).map_err(err(stage))?,
            ))
        };
        let (rgb_a, depth_a) = view(0)?;
        let (rgb_b, depth_b) = view(1)?;
        let pose_a = pose_from_rows(stage, &poses[(i * 2) * 16..(i * 2) * 16 + 16])?;
        let pose_b = pose_from_rows(stage, &poses[(i * 2 + 1) * 16..(i * 2 + 1) * 16 + 16])?;
        pairs.push(ScenePair {
            rgb_a,
            depth_a,
            pose_a,
            rgb_b,
            depth_b,
            pose_b,
            intrinsics: intr.clone(),
        });
    }
    Ok(pairs)
}

pub fn stage_train(cfg: &RunConfig, out: &Path, _threads: usize) -> Result<(), PipelineError> {
    validate_config(cfg)?;
    let stage = Stage::Train;
    let pairs = read_scene_pairs(stage, out)?;
    let params0 = EncoderParams::default_two_layer(cfg.contrastive.encoder_init_seed);
    let ccfg = cfg.contrastive_config();
    let outcome = train_view_prediction(&pairs, &params0, &ccfg, cfg.grid.dims, cfg.grid.margin)
        .map_err(err(stage))?;

    let dir = train_dir(out);
    let mut layers = Vec::new();
    for (i, layer) in outcome.params.layers.iter().enumerate() {
        layers.push(ArchLayer {
            size: layer.size,
            cin: layer.cin,
            cout: layer.cout,
            nonlinearity: match layer.nonlinearity {
                Nonlinearity::Relu => "relu".to_string(),
                Nonlinearity::None => "none".to_string(),
            },
        });
        let k = layer.size;
        write_tensor(
            stage,
            &dir.join(format!("layer{i}_kernel.json")),
            &TensorContainer::f64(
                &format!("layer{i}_kernel"),
                vec![k, k, k, layer.cin, layer.cout],
                layer.kernel.clone(),
            ),
        )?;
        write_tensor(
            stage,
            &dir.join(format!("layer{i}_bias.json")),
            &TensorContainer::f64(
                &format!("layer{i}_bias"),
                vec![layer.cout],
                layer.bias.clone(),
            ),
        )?;
    }
    write_tensor(
        stage,
        &dir.join("loss_curve.json"),
        &TensorContainer::f64(
            "loss_curve",
            vec![outcome.loss_curve.len()],
            outcome.loss_curve.clone(),
        ),
    )?;
    write_json(
        stage,
        &dir.join("summary.json"),
        &TrainSummary {
            layers,
            epochs: ccfg.epochs,
            skipped_pairs: outcome.skipped_pairs,
            final_loss: outcome.loss_curve.last().copied(),
        },
    )
}

fn read_checkpoint(stage: Stage, out: &Path) -> Result<EncoderParams, PipelineError> {
    let dir = train_dir(out);
    let summary: TrainSummary = read_json(stage, &dir.join("summary.json"))?;
    let mut layers = Vec::with_capacity(summary.layers.len());
    for (i, arch) in summary.layers.iter().enumerate() {
        let kernel_path = dir.join(format!("layer{i}_kernel.json"));
        let kernel = read_tensor(stage, &kernel_path)?;
        let kernel = kernel.as_f64(&kernel_path).map_err(err(stage))?.to_vec();
        let bias_path = dir.join(format!("layer{i}_bias.json"));
        let bias = read_tensor(stage, &bias_path)?;
        let bias = bias.as_f64(&bias_path).map_err(err(stage))?.to_vec();
        let nonlinearity = match arch.nonlinearity.as_str() {
            "relu" => Nonlinearity::Relu,
            "none" => Nonlinearity::None,
            other => {
                return Err(fail(stage, format!("unknown nonlinearity {other:?}")));
            }
        };
        layers.push(
            ConvLayer::new(arch.size, arch.cin, arch.cout, kernel, bias, nonlinearity)
                .map_err(err(stage))?,
        );
    }
    EncoderParams::new(layers).map_err(err(stage))
}

// ---------------------------------------------------------------------------
// Stage: featurize

struct StimulusSet {
    width: usize,
    height: usize,
    count: usize,
    intrinsics: CameraIntrinsics,
    rgb: Vec<f32>,
    depth: Vec<f32>,
}

fn read_stimuli(stage: Stage, out: &Path) -> Result<StimulusSet, PipelineError> {
    let dir = scenes_dir(out);
    let manifest: SceneManifest = read_json(stage, &dir.join("manifest.json"))?;
    let intrinsics = CameraIntrinsics::new(
        manifest.intrinsics[0],
        manifest.intrinsics[1],
        manifest.intrinsics[2],
        manifest.intrinsics[3],
        manifest.width,
        manifest.height,
    )
    .map_err(err(stage))?;
    let rgb_path = dir.join("stimuli_rgb.json");
    let rgb_tensor = read_tensor(stage, &rgb_path)?;
    expect_shape(
        stage,
        &rgb_path,
        &rgb_tensor,
        &[manifest.stimuli, manifest.height, manifest.width, 3],
    )?;
    let rgb = rgb_tensor.as_f32(&rgb_path).map_err(err(stage))?.to_vec();
    let depth_path = dir.join("stimuli_depth.json");
    let depth_tensor = read_tensor(stage, &depth_path)?;
    expect_shape(
        stage,
        &depth_path,
        &depth_tensor,
        &[manifest.stimuli, manifest.height, manifest.width],
    )?;
    let depth = depth_tensor
        .as_f32(&depth_path)
        .map_err(err(stage))?
        .to_vec();
    if rgb.iter().any(|c| !c.is_finite() || !(0.0..=1.0).contains(&(*c as f64))) {
        return Err(fail(stage, "stored stimulus colors must be finite in [0, 1]"));
    }
    if depth.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(fail(stage, "stored stimulus depths must be finite and >= 0"));
    }
    Ok(StimulusSet {
        width: manifest.width,
        height: manifest.height,
        count: manifest.stimuli,
        intrinsics,
        rgb,
        depth,
    })
}

/// FNV-1a over the model name, used to give each synthetic feature model its
/// own seed stream.
fn name_stream(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

pub fn stage_featurize(cfg: &RunConfig, out: &Path, threads: usize) -> Result<(), PipelineError> {
    validate_config(cfg)?;
    let stage = Stage::Featurize;
    let stimuli = read_stimuli(stage, out)?;
    let needs_encoder = cfg
        .models
        .iter()
        .any(|m| matches!(m.source, ModelSource::Geovoxel));
    let params = if needs_encoder {
        Some(read_checkpoint(stage, out)?)
    } else {
        None
    };

    for model in &cfg.models {
        match &model.source {
            ModelSource::Geovoxel => {
                let params = params.as_ref().unwrap();
                let layers = cfg.model_layers(model);
                let per_layer = featurize_geovoxel(cfg, &stimuli, params, threads)?;
                for (label, matrix) in layers.iter().zip(per_layer) {
                    write_feature_matrix(stage, out, &model.name, label, &matrix)?;
                }
            }
            ModelSource::Random { dims } => {
                let mut rng = Rng::from_seed(derive_seed(
                    cfg.features_seed(),
                    name_stream(&model.name),
                ));
                let data: Vec<f64> = (0..stimuli.count * dims).map(|_| rng.normal()).collect();
                let matrix = Matrix::from_vec(stimuli.count, *dims, data);
                write_feature_matrix(stage, out, &model.name, "gauss", &matrix)?;
            }
            ModelSource::External { layers } => {
                for layer in layers {
                    let tensor = read_tensor(stage, &layer.path)?;
                    let data = tensor.as_f64(&layer.path).map_err(err(stage))?;
                    if tensor.meta.shape.len() != 2 || tensor.meta.shape[0] != stimuli.count {
                        return Err(fail(
                            stage,
                            format!(
                                "external features {} must be [stimuli, features] with {} rows, got {:?}",
                                layer.path.display(),
                                stimuli.count,
                                tensor.meta.shape
                            ),
                        ));
                    }
                    let matrix = Matrix::from_vec(
                        tensor.meta.shape[0],
                        tensor.meta.shape[1],
                        data.to_vec(),
                    );
                    write_feature_matrix(stage, out, &model.name, &layer.layer, &matrix)?;
                }
            }
        }
    }
    Ok(())
}

fn featurize_geovoxel(
    cfg: &RunConfig,
    stimuli: &StimulusSet,
    params: &EncoderParams,
    threads: usize,
) -> Result<Vec<Matrix>, PipelineError> {
    let stage = Stage::Featurize;
    let (w, h) = (stimuli.width, stimuli.height);
    let img = w * h;
    let blocks = cfg.grid.pool_blocks;
    let n_blocks = blocks[0] * blocks[1] * blocks[2];
    let dims = cfg.grid.dims;
    let margin = cfg.grid.margin;
    let layer_channels: Vec<usize> = params.layers.iter().map(|l| l.cout).collect();

    // Per stimulus: one pooled row per layer, zeros when the view is empty.
    let rows = chunked_map(stimuli.count, threads, |range| {
        range
            .map(|i| {
                let rgb_data: Vec<f64> = stimuli.rgb[i * img * 3..(i + 1) * img * 3]
                    .iter()
                    .map(|&x| x as f64)
                    .collect();
                let depth_data: Vec<f64> = stimuli.depth[i * img..(i + 1) * img]
                    .iter()
                    .map(|&x| x as f64)
                    .collect();
                let rgb = RgbImage::new(w, h, rgb_data).expect("stored image valid");
                let depth = DepthImage::new(w, h, depth_data).expect("stored depth valid");
                let identity = RigidPose::identity();
                let pts = unproject_depth(&depth, &stimuli.intrinsics, &identity)
                    .expect("dims match");
                if pts.is_empty() {
                    return layer_channels
                        .iter()
                        .map(|&c| vec![0.0; n_blocks * c])
                        .collect::<Vec<_>>();
                }
                let cloud: Vec<[f64; 3]> = pts.iter().map(|p| p.world).collect();
                let spec = GridSpec::from_points(&cloud, dims, margin).expect("nonempty cloud");
                let grid = lift_to_grid(&rgb, &depth, &stimuli.intrinsics, &identity, &spec)
                    .expect("dims match");
                let outputs = encoder_layer_outputs(&grid, params).expect("channels chain");
                outputs
                    .iter()
                    .map(|layer| {
                        pooled_block_features(
                            &layer.data,
                            layer.channels,
                            dims,
                            &grid.occupancy,
                            blocks,
                        )
                        .expect("dims divisible by blocks")
                    })
                    .collect::<Vec<_>>()
            })
            .collect::<Vec<_>>()
    });

    let mut matrices = Vec::with_capacity(layer_channels.len());
    for (l, &c) in layer_channels.iter().enumerate() {
        let f = n_blocks * c;
        let mut data = Vec::with_capacity(stimuli.count * f);
        for row in &rows {
            if row[l].len() != f {
                return Err(fail(stage, "pooled feature width mismatch"));
            }
            data.extend_from_slice(&row[l]);
        }
        matrices.push(Matrix::from_vec(stimuli.count, f, data));
    }
    Ok(matrices)
}

fn write_feature_matrix(
    stage: Stage,
    out: &Path,
    model: &str,
    layer: &str,
    matrix: &Matrix,
) -> Result<(), PipelineError> {
    write_tensor(
        stage,
        &features_path(out, model, layer),
        &TensorContainer::f64(
            &format!("features_{model}_{layer}"),
            vec![matrix.rows(), matrix.cols()],
            matrix.data().to_vec(),
        ),
    )
}

fn read_feature_matrix(
    stage: Stage,
    out: &Path,
    model: &str,
    layer: &str,
) -> Result<FeatureMatrix, PipelineError> {
    let path = features_path(out, model, layer);
    let tensor = read_tensor(stage, &path)?;
    let data = tensor.as_f64(&path).map_err(err(stage))?;
    if tensor.meta.shape.len() != 2 {
        return Err(fail(
            stage,
            format!("{} is not a matrix: {:?}", path.display(), tensor.meta.shape),
        ));
    }
    let matrix = Matrix::from_vec(tensor.meta.shape[0], tensor.meta.shape[1], data.to_vec());
    FeatureMatrix::new(matrix, model.to_string(), layer.to_string()).map_err(err(stage))
}

// ---------------------------------------------------------------------------
// Stage: encode

#[derive(Debug, Serialize, Deserialize)]
struct SplitRecord {
    train: Vec<usize>,
    test: Vec<usize>,
}

pub fn stage_encode(cfg: &RunConfig, out: &Path, threads: usize) -> Result<(), PipelineError> {
    validate_config(cfg)?;
    let stage = Stage::Encode;
    let v = cfg.voxels.count;
    let dir = encode_dir(out);
    let resp_dir = responses_dir(out);

    // Responses from the configured source features, one synthesis per
    // subject, plus noise ceilings and inclusion masks.
    let source =
        read_feature_matrix(stage, out, &cfg.response_source.model, &cfg.response_source.layer)?;
    let s = source.data.rows();
    let mut responses = Vec::with_capacity(cfg.subjects);
    for subject in 0..cfg.subjects {
        let synth = synth_responses(
            &source.data,
            v,
            cfg.voxels.noise_level,
            cfg.voxels.repeats,
            derive_seed(cfg.responses_seed(), subject as u64),
        )
        .map_err(err(stage))?;
        let repeats = synth.responses.repeats.as_ref().unwrap();
        write_tensor(
            stage,
            &resp_dir.join(format!("responses_s{subject}.json")),
            &TensorContainer::f64(
                &format!("responses_s{subject}"),
                vec![s, v, repeats.trials],
                repeats.data.clone(),
            ),
        )?;
        write_tensor(
            stage,
            &resp_dir.join(format!("readout_weights_s{subject}.json")),
            &TensorContainer::f64(
                &format!("readout_weights_s{subject}"),
                vec![synth.weights.rows(), v],
                synth.weights.data().to_vec(),
            ),
        )?;
        let nc = if cfg.voxels.repeats >= 2 {
            estimate_noise_ceiling(&synth.responses)
                .map_err(err(stage))?
                .nc
        } else {
            // Single-trial responses carry no repeat structure; treat every
            // voxel as fully explainable.
            vec![1.0; v]
        };
        let included = filter_voxels(&nc, cfg.nc_threshold);
        write_tensor(
            stage,
            &dir.join(format!("nc_s{subject}.json")),
            &TensorContainer::f64(&format!("nc_s{subject}"), vec![v], nc.clone()),
        )?;
        write_tensor(
            stage,
            &dir.join(format!("included_s{subject}.json")),
            &TensorContainer::u8(
                &format!("included_s{subject}"),
                vec![v],
                included.iter().map(|&b| b as u8).collect(),
            ),
        )?;
        responses.push(synth.responses);
    }

    // One seeded split shared by every model, layer, and subject.
    let split_cfg = cfg.split_config();
    let (train_idx, test_idx) = train_test_split(s, &split_cfg).map_err(err(stage))?;
    if train_idx.len() < 2 * split_cfg.cv_folds {
        return Err(fail(
            stage,
            format!(
                "training split has {} rows; {}-fold cross-validation needs at least {}",
                train_idx.len(),
                split_cfg.cv_folds,
                2 * split_cfg.cv_folds
            ),
        ));
    }
    write_json(
        stage,
        &dir.join("split.json"),
        &SplitRecord {
            train: train_idx.clone(),
            test: test_idx.clone(),
        },
    )?;

    for model in &cfg.models {
        for layer in cfg.model_layers(model) {
            let features = read_feature_matrix(stage, out, &model.name, &layer)?;
            if features.data.rows() != s {
                return Err(fail(
                    stage,
                    format!(
                        "features {}/{layer} have {} rows, responses have {s}",
                        model.name,
                        features.data.rows()
                    ),
                ));
            }
            encode_one(
                cfg,
                out,
                &features.model_id,
                &features.layer_id,
                &features.data,
                &responses,
                &train_idx,
                &test_idx,
                &split_cfg,
                threads,
            )?;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn encode_one(
    cfg: &RunConfig,
    out: &Path,
    model: &str,
    layer: &str,
    x: &Matrix,
    responses: &[geovoxel_core::encoding::ResponseMatrix],
    train_idx: &[usize],
    test_idx: &[usize],
    split_cfg: &SplitConfig,
    threads: usize,
) -> Result<(), PipelineError> {
    let stage = Stage::Encode;
    let v = cfg.voxels.count;
    let xtr_full = x.select_rows(train_idx);
    let xte_full = x.select_rows(test_idx);
    let k = cfg
        .pca_components
        .min(train_idx.len().saturating_sub(1))
        .min(x.cols())
        .max(1);
    let pca = fit_pca(&xtr_full, k).map_err(err(stage))?;
    let ztr = pca_project(&pca, &xtr_full).map_err(err(stage))?;
    let zte = pca_project(&pca, &xte_full).map_err(err(stage))?;

    for (subject, resp) in responses.iter().enumerate() {
        let ytr = resp.responses.select_rows(train_idx);
        let yte = resp.responses.select_rows(test_idx);

        // Per-voxel lambda selection, chunked over voxels; the per-voxel
        // result is independent of the chunking.
        struct VoxelPick {
            lambda: f64,
            index: usize,
            cv_r2: f64,
        }
        let picks: Vec<VoxelPick> = chunked_map(v, threads, |range| {
            let cols: Vec<usize> = range.collect();
            let mut sub = Matrix::zeros(ytr.rows(), cols.len());
            for r in 0..ytr.rows() {
                for (j, &c) in cols.iter().enumerate() {
                    sub[(r, j)] = ytr[(r, c)];
                }
            }
            let sel = cv_select_lambda(&ztr, &sub, split_cfg).expect("validated inputs");
            (0..cols.len())
                .map(|j| VoxelPick {
                    lambda: sel.lambda_per_voxel[j],
                    index: sel.lambda_index_per_voxel[j],
                    cv_r2: sel.cv_r2_per_voxel[j],
                })
                .collect()
        });
        let lambda_idx: Vec<usize> = picks.iter().map(|p| p.index).collect();
        let fit = ridge_fit_selected(&ztr, &ytr, &split_cfg.lambda_grid, &lambda_idx)
            .map_err(err(stage))?;
        let pred = predict(&fit, &zte).map_err(err(stage))?;

        let nc_path = encode_dir(out).join(format!("nc_s{subject}.json"));
        let nc = read_tensor(stage, &nc_path)?
            .as_f64(&nc_path)
            .map_err(err(stage))?
            .to_vec();
        let included = filter_voxels(&nc, cfg.nc_threshold);

        let mut r_vec = vec![f64::NAN; v];
        let mut r2_vec = vec![f64::NAN; v];
        let mut r2nc_vec = vec![f64::NAN; v];
        for vox in 0..v {
            let y: Vec<f64> = (0..test_idx.len()).map(|row| yte[(row, vox)]).collect();
            let p: Vec<f64> = (0..test_idx.len()).map(|row| pred[(row, vox)]).collect();
            if let Ok(r) = pearson_r(&y, &p) {
                r_vec[vox] = r;
            }
            if let Ok(r2) = r_squared(&y, &p) {
                r2_vec[vox] = r2;
                if included[vox] && nc[vox] > 0.0 {
                    r2nc_vec[vox] = r2 / nc[vox];
                }
            }
        }

        let lambda_vec: Vec<f64> = picks.iter().map(|p| p.lambda).collect();
        let cvr2_vec: Vec<f64> = picks.iter().map(|p| p.cv_r2).collect();
        for (metric, data) in [
            ("r", r_vec),
            ("r2", r2_vec),
            ("r2nc", r2nc_vec),
            ("lambda", lambda_vec),
            ("cvr2", cvr2_vec),
        ] {
            write_tensor(
                stage,
                &metric_path(out, metric, model, layer, subject),
                &TensorContainer::f64(
                    &format!("{metric}_{model}_{layer}_s{subject}"),
                    vec![v],
                    data,
                ),
            )?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Stage: stats

fn read_inclusion_mask(
    stage: Stage,
    out: &Path,
    subject: usize,
) -> Result<Vec<bool>, PipelineError> {
    let path = encode_dir(out).join(format!("included_s{subject}.json"));
    let t = read_tensor(stage, &path)?;
    match &t.data {
        crate::container::TensorData::U8(bytes) => {
            Ok(bytes.iter().map(|&b| b != 0).collect())
        }
        _ => Err(fail(stage, "inclusion mask must be u8")),
    }
}

fn read_metric(
    stage: Stage,
    out: &Path,
    metric: &str,
    model: &str,
    layer: &str,
    subject: usize,
) -> Result<Vec<f64>, PipelineError> {
    let path = metric_path(out, metric, model, layer, subject);
    Ok(read_tensor(stage, &path)?
        .as_f64(&path)
        .map_err(err(stage))?
        .to_vec())
}

pub fn stage_stats(cfg: &RunConfig, out: &Path, _threads: usize) -> Result<(), PipelineError> {
    validate_config(cfg)?;
    let stage = Stage::Stats;
    let atlas = read_atlas(stage, out)?;
    let v = cfg.voxels.count;
    if atlas.labels.len() != v {
        return Err(fail(
            stage,
            format!("atlas covers {} voxels, config claims {v}", atlas.labels.len()),
        ));
    }

    let mut report = StatsReport {
        subjects: (0..cfg.subjects).map(|s| format!("s{s}")).collect(),
        rois: atlas
            .roi_ids()
            .iter()
            .filter_map(|&id| atlas.name(id).map(|n| n.to_string()))
            .collect(),
        models: cfg.models.iter().map(|m| m.name.clone()).collect(),
        ..StatsReport::default()
    };

    // Per-(roi, model) best-layer metric across subjects for the t-tests.
    let mut best_values: BTreeMap<(String, String), Vec<Option<f64>>> = BTreeMap::new();
    // Per subject/model: chosen layer per roi id, for difference maps.
    let mut chosen_layer: BTreeMap<(usize, String, u32), String> = BTreeMap::new();
    let mut subject_results: Vec<SubjectResult> = Vec::with_capacity(cfg.subjects);

    for subject in 0..cfg.subjects {
        let included = read_inclusion_mask(stage, out, subject)?;
        let nc_path = encode_dir(out).join(format!("nc_s{subject}.json"));
        let nc = read_tensor(stage, &nc_path)?
            .as_f64(&nc_path)
            .map_err(err(stage))?
            .to_vec();

        // Load every corrected-R2 vector once; a voxel whose metric is
        // undefined for any model drops out of this subject's comparisons.
        let mut r2nc_all: Vec<((String, String), Vec<f64>)> = Vec::new();
        let mut usable = included.clone();
        for model in &cfg.models {
            for layer in cfg.model_layers(model) {
                let values = read_metric(stage, out, "r2nc", &model.name, &layer, subject)?;
                for (u, &m) in usable.iter_mut().zip(&values) {
                    *u = *u && m.is_finite();
                }
                r2nc_all.push(((model.name.clone(), layer), values));
            }
        }
        let mut subject_result = SubjectResult::new(format!("s{subject}"), usable);
        for ((model, layer), values) in r2nc_all {
            subject_result
                .insert_corrected_r2(model, layer, values)
                .map_err(err(stage))?;
        }

        for &roi_id in &atlas.roi_ids() {
            let roi = atlas.name(roi_id).unwrap().to_string();
            match roi_mean(&nc, &included, &atlas, roi_id) {
                Ok(mean_nc) => report.nc_means.push(NcRow {
                    subject: format!("s{subject}"),
                    roi: roi.clone(),
                    nc: mean_nc,
                }),
                Err(StatsError::EmptyRoi { .. }) => {
                    report
                        .warnings
                        .push(format!("s{subject}/{roi}: no included voxels"));
                    continue;
                }
                Err(e) => return Err(fail(stage, e.to_string())),
            }

            for model in &cfg.models {
                let layers = cfg.model_layers(model);
                let mut cv_scores = Vec::with_capacity(layers.len());
                let mut test_scores = Vec::with_capacity(layers.len());
                let mut per_layer_metrics = Vec::with_capacity(layers.len());
                for layer in &layers {
                    let cvr2 = read_metric(stage, out, "cvr2", &model.name, layer, subject)?;
                    let r = read_metric(stage, out, "r", &model.name, layer, subject)?;
                    let r2 = read_metric(stage, out, "r2", &model.name, layer, subject)?;
                    let r2nc = subject_result
                        .corrected_r2(&model.name, layer)
                        .expect("loaded above");

                    let mean_of = |metric: &[f64]| -> Option<f64> {
                        let mask: Vec<bool> = included
                            .iter()
                            .zip(metric)
                            .map(|(&inc, &m)| inc && m.is_finite())
                            .collect();
                        roi_mean(metric, &mask, &atlas, roi_id).ok()
                    };
                    let row = LayerMeanRow {
                        subject: format!("s{subject}"),
                        roi: roi.clone(),
                        model: model.name.clone(),
                        layer: layer.clone(),
                        r: mean_of(&r),
                        r2: mean_of(&r2),
                        r2_nc: mean_of(r2nc),
                    };
                    cv_scores.push(mean_of(&cvr2).unwrap_or(f64::NEG_INFINITY));
                    test_scores.push(row.r2_nc.unwrap_or(f64::NEG_INFINITY));
                    per_layer_metrics.push(row);
                }
                report.layer_means.extend(per_layer_metrics.clone());

                let cv_pick = best_layer(&cv_scores).map_err(err(stage))?;
                let test_pick = best_layer(&test_scores).map_err(err(stage))?;
                let picked = &per_layer_metrics[cv_pick];
                report.best_layers.push(BestLayerRow {
                    subject: format!("s{subject}"),
                    roi: roi.clone(),
                    model: model.name.clone(),
                    cv_layer: layers[cv_pick].clone(),
                    test_layer: layers[test_pick].clone(),
                    r: picked.r,
                    r2: picked.r2,
                    r2_nc: picked.r2_nc,
                    r2_nc_test_selected: per_layer_metrics[test_pick].r2_nc,
                });
                chosen_layer.insert(
                    (subject, model.name.clone(), roi_id),
                    layers[cv_pick].clone(),
                );
                best_values
                    .entry((roi.clone(), model.name.clone()))
                    .or_insert_with(|| vec![None; cfg.subjects])[subject] = picked.r2_nc;
            }
        }
        subject_results.push(subject_result);
    }

    // Paired t-tests across subjects for every model pair and ROI.
    for &roi_id in &atlas.roi_ids() {
        let roi = atlas.name(roi_id).unwrap().to_string();
        for i in 0..cfg.models.len() {
            for j in i + 1..cfg.models.len() {
                let a_name = &cfg.models[i].name;
                let b_name = &cfg.models[j].name;
                let a = best_values.get(&(roi.clone(), a_name.clone()));
                let b = best_values.get(&(roi.clone(), b_name.clone()));
                let (Some(a), Some(b)) = (a, b) else { continue };
                let pairs: Vec<(f64, f64)> =
                    a.iter().zip(b).filter_map(|(x, y)| x.zip(*y)).collect();
                if pairs.len() < 2 {
                    report.warnings.push(format!(
                        "{roi}: fewer than two subjects with {a_name} and {b_name} values"
                    ));
                    continue;
                }
                let av: Vec<f64> = pairs.iter().map(|p| p.0).collect();
                let bv: Vec<f64> = pairs.iter().map(|p| p.1).collect();
                match paired_t_test(&av, &bv) {
                    Ok(t) => report.tests.push(TestRow {
                        roi: roi.clone(),
                        model_a: a_name.clone(),
                        model_b: b_name.clone(),
                        t: t.t,
                        p: t.p,
                        df: t.df,
                        n: t.n,
                    }),
                    Err(StatsError::DegenerateTest) => report.warnings.push(format!(
                        "{roi}: degenerate paired test between {a_name} and {b_name}"
                    )),
                    Err(e) => return Err(fail(stage, e.to_string())),
                }
            }
        }
    }

    // Voxelwise difference maps between each model pair at the per-ROI
    // best layers (missing voxels carry NaN).
    for (subject, subject_result) in subject_results.iter().enumerate() {
        for i in 0..cfg.models.len() {
            for j in i + 1..cfg.models.len() {
                let a_name = &cfg.models[i].name;
                let b_name = &cfg.models[j].name;
                let mut a_vals = vec![f64::NAN; v];
                let mut b_vals = vec![f64::NAN; v];
                for (name, vals) in [(a_name, &mut a_vals), (b_name, &mut b_vals)] {
                    for vox in 0..v {
                        let roi_id = atlas.labels[vox];
                        if roi_id == 0 {
                            continue;
                        }
                        let Some(layer) = chosen_layer.get(&(subject, (*name).clone(), roi_id))
                        else {
                            continue;
                        };
                        if let Some(r2nc) = subject_result.corrected_r2(name, layer) {
                            vals[vox] = r2nc[vox];
                        }
                    }
                }
                let mask: Vec<bool> = (0..v)
                    .map(|vox| {
                        subject_result.included[vox]
                            && a_vals[vox].is_finite()
                            && b_vals[vox].is_finite()
                    })
                    .collect();
                let map = difference_map(&a_vals, &b_vals, &mask).map_err(err(stage))?;
                write_tensor(
                    stage,
                    &stats_dir(out).join(format!("diff_{a_name}_vs_{b_name}_s{subject}.json")),
                    &TensorContainer::f64(
                        &format!("diff_{a_name}_vs_{b_name}_s{subject}"),
                        vec![v],
                        map,
                    ),
                )?;
            }
        }
    }

    write_json(stage, &stats_dir(out).join("stats.json"), &report)
}

// ---------------------------------------------------------------------------
// Stage: report

pub fn stage_report(cfg: &RunConfig, out: &Path, _threads: usize) -> Result<(), PipelineError> {
    validate_config(cfg)?;
    let stage = Stage::Report;
    let stats: StatsReport = read_json(stage, &stats_dir(out).join("stats.json"))?;
    let csv = crate::report::render_csv(&stats);
    fs::write(out.join("report.csv"), csv).map_err(err(stage))?;

    #[derive(Serialize)]
    struct FullReport<'a> {
        config: &'a RunConfig,
        stats: &'a StatsReport,
    }
    write_json(
        stage,
        &out.join("report.json"),
        &FullReport {
            config: cfg,
            stats: &stats,
        },
    )
}

// ---------------------------------------------------------------------------
// Full pipeline

pub fn run_pipeline(cfg: &RunConfig, out: &Path, threads: usize) -> Result<(), PipelineError> {
    validate_config(cfg)?;
    fs::create_dir_all(out).map_err(err(Stage::Config))?;
    stage_synth(cfg, out, threads)?;
    stage_train(cfg, out, threads)?;
    stage_featurize(cfg, out, threads)?;
    stage_encode(cfg, out, threads)?;
    stage_stats(cfg, out, threads)?;
    stage_report(cfg, out, threads)?;
    Ok(())
}

/// Scene pairs straight from config seeds, used by tests that bypass disk.
pub fn synth_pairs_from_config(cfg: &RunConfig, count: usize, offset: u64) -> Vec<ScenePair> {
    let spec: SceneSpec = cfg.scenes.scene_spec();
    let seed = cfg.scenes_seed();
    (0..count)
        .map(|i| {
            let scene = synth_scene(derive_seed(seed, offset + i as u64), &spec)
                .expect("scene spec validated");
            geovoxel_core::synth::render_scene_pair(&scene)
        })
        .collect()
}

/// Covisibility check helper used by tests: does a freshly prepared pair
/// from this config have correspondences?
pub fn pair_is_trainable(cfg: &RunConfig, pair: &ScenePair) -> bool {
    prepare_pair(pair, cfg.grid.dims, cfg.grid.margin)
        .map(|p| p.is_some())
        .unwrap_or(false)
}
