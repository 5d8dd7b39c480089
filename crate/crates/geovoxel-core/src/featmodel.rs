//! Trainable 3D convolutional encoder over voxel grids and the
//! view-contrastive objective that pulls features of the same 3D location
//! together across egomotion-stabilized grids.
//!
//! Both views of a scene pair are lifted into their own camera-frame grids,
//! view A is warped onto view B's lattice with the known relative pose, both
//! grids are encoded, and an InfoNCE loss over covisible voxels trains the
//! encoder with plain SGD. All gradients are analytic.

use crate::fmath;
use crate::geometry::{
    covisibility_mask, lift_to_grid, unproject_depth, warp_grid, CameraIntrinsics, DepthImage,
    GridSpec, RgbImage, RigidPose, VoxelGrid,
};
use crate::rng::{derive_seed, Rng};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

/// Norm below which a feature vector is left unnormalized (treated as zero).
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    ChannelMismatch { expected: usize, got: usize },
    ShapeMismatch(String),
    InvalidLayer(String),
    InvalidConfig(String),
    NoCorrespondences,
    NotEnoughVoxels,
    NoTrainablePairs,
    Geometry(String),
}

impl core::fmt::Display for ModelError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ModelError::ChannelMismatch { expected, got } => {
                write!(f, "channel mismatch: expected {expected}, got {got}")
            }
            ModelError::ShapeMismatch(m) => write!(f, "shape mismatch: {m}"),
            ModelError::InvalidLayer(m) => write!(f, "invalid layer: {m}"),
            ModelError::InvalidConfig(m) => write!(f, "invalid config: {m}"),
            ModelError::NoCorrespondences => write!(f, "no correspondences in covisibility mask"),
            ModelError::NotEnoughVoxels => write!(f, "fewer than two masked voxels"),
            ModelError::NoTrainablePairs => {
                write!(f, "every scene pair has an empty covisibility mask")
            }
            ModelError::Geometry(m) => write!(f, "geometry: {m}"),
        }
    }
}

impl core::error::Error for ModelError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Relu,
    None,
}

/// One 3D convolution layer (zero padding, stride 1, odd kernel size).
/// Kernel layout: `kernel[(((tx*k + ty)*k + tz)*cin + ci)*cout + co]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub size: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
    pub nonlinearity: Nonlinearity,
}

impl ConvLayer {
    pub fn new(
        size: usize,
        cin: usize,
        cout: usize,
        kernel: Vec<f64>,
        bias: Vec<f64>,
        nonlinearity: Nonlinearity,
    ) -> Result<Self, ModelError> {
        if size == 0 || size % 2 == 0 {
            return Err(ModelError::InvalidLayer(format!(
                "kernel size must be odd, got {size}"
            )));
        }
        if cin == 0 || cout == 0 {
            return Err(ModelError::InvalidLayer("zero channel count".into()));
        }
        if kernel.len() != size * size * size * cin * cout {
            return Err(ModelError::InvalidLayer(format!(
                "kernel length {} != {size}^3 x {cin} x {cout}",
                kernel.len()
            )));
        }
        if bias.len() != cout {
            return Err(ModelError::InvalidLayer(format!(
                "bias length {} != {cout}",
                bias.len()
            )));
        }
        if kernel.iter().chain(bias.iter()).any(|w| !w.is_finite()) {
            return Err(ModelError::InvalidLayer("non-finite weight".into()));
        }
        Ok(ConvLayer {
            size,
            cin,
            cout,
            kernel,
            bias,
            nonlinearity,
        })
    }
}

/// Weights of the voxel feature encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<ConvLayer>,
}

impl EncoderParams {
    pub fn new(layers: Vec<ConvLayer>) -> Result<Self, ModelError> {
        if layers.is_empty() {
            return Err(ModelError::InvalidLayer("no layers".into()));
        }
        for w in layers.windows(2) {
            if w[0].cout != w[1].cin {
                return Err(ModelError::InvalidLayer(format!(
                    "channel chain broken: {} -> {}",
                    w[0].cout, w[1].cin
                )));
            }
        }
        Ok(EncoderParams { layers })
    }

    /// Default architecture: 3x3x3 conv (3 -> 16, relu) followed by a
    /// pointwise 1x1x1 conv (16 -> 32, linear), then masked L2 normalization.
    pub fn default_two_layer(seed: u64) -> Self {
        let mut rng = Rng::from_seed(seed);
        let l1 = random_layer(&mut rng, 3, 3, 16, Nonlinearity::Relu);
        let l2 = random_layer(&mut rng, 1, 16, 32, Nonlinearity::None);
        EncoderParams {
            layers: vec![l1, l2],
        }
    }

    pub fn input_channels(&self) -> usize {
        self.layers[0].cin
    }

    pub fn output_channels(&self) -> usize {
        self.layers.last().unwrap().cout
    }
}

/// Randomly initialized layer with fan-in scaled weights and zero biases.
pub fn random_layer(
    rng: &mut Rng,
    size: usize,
    cin: usize,
    cout: usize,
    nonlinearity: Nonlinearity,
) -> ConvLayer {
    let fan_in = (size * size * size * cin) as f64;
    let gain = match nonlinearity {
        Nonlinearity::Relu => 2.0,
        Nonlinearity::None => 1.0,
    };
    let std = fmath::sqrt(gain / fan_in);
    let kernel = (0..size * size * size * cin * cout)
        .map(|_| std * rng.normal())
        .collect();
    ConvLayer {
        size,
        cin,
        cout,
        kernel,
        bias: vec![0.0; cout],
        nonlinearity,
    }
}

/// Encoded voxel grid: per-voxel feature vectors are unit-norm where the
/// source occupancy is positive and zero elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub spec: GridSpec,
    pub channels: usize,
    pub data: Vec<f64>,
    pub occupancy: Vec<f64>,
}

impl FeatureGrid {
    pub fn feature(&self, voxel: usize) -> &[f64] {
        &self.data[voxel * self.channels..(voxel + 1) * self.channels]
    }
}

/// Raw post-activation output of one encoder layer.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub channels: usize,
    pub data: Vec<f64>,
}

fn conv3d_forward(input: &[f64], dims: [usize; 3], layer: &ConvLayer) -> Vec<f64> {
    let [dx, dy, dz] = dims;
    let (cin, cout, k) = (layer.cin, layer.cout, layer.size);
    let half = (k / 2) as isize;
    let n = dx * dy * dz;
    let mut out = vec![0.0; n * cout];
    for v in 0..n {
        out[v * cout..(v + 1) * cout].copy_from_slice(&layer.bias);
    }
    for tx in 0..k {
        let ox = tx as isize - half;
        let (x_lo, x_hi) = shifted_range(dx, ox);
        for ty in 0..k {
            let oy = ty as isize - half;
            let (y_lo, y_hi) = shifted_range(dy, oy);
            for tz in 0..k {
                let oz = tz as isize - half;
                let (z_lo, z_hi) = shifted_range(dz, oz);
                let tap = &layer.kernel[((tx * k + ty) * k + tz) * cin * cout..][..cin * cout];
                for x in x_lo..x_hi {
                    let sx = (x as isize + ox) as usize;
                    for y in y_lo..y_hi {
                        let sy = (y as isize + oy) as usize;
                        let src_base = (sx * dy + sy) * dz * cin;
                        let dst_base = (x * dy + y) * dz * cout;
                        for z in z_lo..z_hi {
                            let sz = (z as isize + oz) as usize;
                            let src = &input[src_base + sz * cin..][..cin];
                            let dst = &mut out[dst_base + z * cout..][..cout];
                            for (ci, &v) in src.iter().enumerate() {
                                if v == 0.0 {
                                    continue;
                                }
                                let w = &tap[ci * cout..][..cout];
                                for (d, &wv) in dst.iter_mut().zip(w) {
                                    *d += v * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    match layer.nonlinearity {
        Nonlinearity::Relu => {
            for v in out.iter_mut() {
                if *v <= 0.0 {
                    *v = 0.0;
                }
            }
        }
        Nonlinearity::None => {}
    }
    out
}

/// Output voxel range for which `x + offset` stays inside [0, dim).
fn shifted_range(dim: usize, offset: isize) -> (usize, usize) {
    let lo = if offset < 0 { (-offset) as usize } else { 0 };
    let hi = if offset > 0 {
        dim.saturating_sub(offset as usize)
    } else {
        dim
    };
    (lo.min(hi), hi)
}

/// Gradients through one conv layer. `grad_post` is the gradient at the
/// post-activation output; `post` is the forward post-activation (the relu
/// mask is recovered from it).
fn conv3d_backward(
    input: &[f64],
    post: &[f64],
    grad_post: &[f64],
    dims: [usize; 3],
    layer: &ConvLayer,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [dx, dy, dz] = dims;
    let (cin, cout, k) = (layer.cin, layer.cout, layer.size);
    let half = (k / 2) as isize;
    let n = dx * dy * dz;

    let grad_pre: Vec<f64> = match layer.nonlinearity {
        Nonlinearity::Relu => grad_post
            .iter()
            .zip(post.iter())
            .map(|(&g, &p)| if p > 0.0 { g } else { 0.0 })
            .collect(),
        Nonlinearity::None => grad_post.to_vec(),
    };

    let mut bias_grad = vec![0.0; cout];
    for v in 0..n {
        for (bg, &g) in bias_grad
            .iter_mut()
            .zip(&grad_pre[v * cout..(v + 1) * cout])
        {
            *bg += g;
        }
    }

    let mut kernel_grad = vec![0.0; layer.kernel.len()];
    let mut input_grad = vec![0.0; n * cin];
    for tx in 0..k {
        let ox = tx as isize - half;
        let (x_lo, x_hi) = shifted_range(dx, ox);
        for ty in 0..k {
            let oy = ty as isize - half;
            let (y_lo, y_hi) = shifted_range(dy, oy);
            for tz in 0..k {
                let oz = tz as isize - half;
                let (z_lo, z_hi) = shifted_range(dz, oz);
                let tap = &layer.kernel[((tx * k + ty) * k + tz) * cin * cout..][..cin * cout];
                let tap_grad =
                    &mut kernel_grad[((tx * k + ty) * k + tz) * cin * cout..][..cin * cout];
                for x in x_lo..x_hi {
                    let sx = (x as isize + ox) as usize;
                    for y in y_lo..y_hi {
                        let sy = (y as isize + oy) as usize;
                        let src_base = (sx * dy + sy) * dz * cin;
                        let dst_base = (x * dy + y) * dz * cout;
                        for z in z_lo..z_hi {
                            let sz = (z as isize + oz) as usize;
                            let src = &input[src_base + sz * cin..][..cin];
                            let sgrad = &mut input_grad[src_base + sz * cin..][..cin];
                            let g = &grad_pre[dst_base + z * cout..][..cout];
                            for ci in 0..cin {
                                let w = &tap[ci * cout..][..cout];
                                let wg = &mut tap_grad[ci * cout..][..cout];
                                let v = src[ci];
                                let mut acc = 0.0;
                                for co in 0..cout {
                                    acc += w[co] * g[co];
                                    wg[co] += v * g[co];
                                }
                                sgrad[ci] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
    (kernel_grad, bias_grad, input_grad)
}

fn check_input(grid: &VoxelGrid, params: &EncoderParams) -> Result<(), ModelError> {
    if grid.channels != params.input_channels() {
        return Err(ModelError::ChannelMismatch {
            expected: params.input_channels(),
            got: grid.channels,
        });
    }
    Ok(())
}

fn run_layers(grid: &VoxelGrid, params: &EncoderParams) -> Vec<Vec<f64>> {
    let dims = grid.spec.dims;
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(params.layers.len());
    let mut cur = &grid.data;
    for layer in &params.layers {
        let out = conv3d_forward(cur, dims, layer);
        acts.push(out);
        cur = acts.last().unwrap();
    }
    acts
}

/// Masked L2 normalization: unit vectors where occupancy > 0, zeros
/// elsewhere. Vectors with (near-)zero norm pass through unchanged.
fn normalize_masked(raw: &[f64], occupancy: &[f64], channels: usize) -> Vec<f64> {
    let mut out = vec![0.0; raw.len()];
    for (v, &occ) in occupancy.iter().enumerate() {
        if occ <= 0.0 {
            continue;
        }
        let x = &raw[v * channels..(v + 1) * channels];
        let norm = fmath::sqrt(x.iter().map(|a| a * a).sum());
        let dst = &mut out[v * channels..(v + 1) * channels];
        if norm > NORM_EPS {
            for (d, &a) in dst.iter_mut().zip(x) {
                *d = a / norm;
            }
        } else {
            dst.copy_from_slice(x);
        }
    }
    out
}

/// Runs the conv stack and the final masked normalization.
pub fn encoder_forward(
    grid: &VoxelGrid,
    params: &EncoderParams,
) -> Result<FeatureGrid, ModelError> {
    check_input(grid, params)?;
    let acts = run_layers(grid, params);
    let channels = params.output_channels();
    let data = normalize_masked(acts.last().unwrap(), &grid.occupancy, channels);
    Ok(FeatureGrid {
        spec: grid.spec.clone(),
        channels,
        data,
        occupancy: grid.occupancy.clone(),
    })
}

/// Post-activation outputs of every layer; the final entry is the masked,
/// normalized feature grid data. Used to export per-layer features.
pub fn encoder_layer_outputs(
    grid: &VoxelGrid,
    params: &EncoderParams,
) -> Result<Vec<LayerOutput>, ModelError> {
    check_input(grid, params)?;
    let mut acts = run_layers(grid, params);
    let channels = params.output_channels();
    let last = normalize_masked(acts.last().unwrap(), &grid.occupancy, channels);
    *acts.last_mut().unwrap() = last;
    Ok(acts
        .into_iter()
        .zip(params.layers.iter())
        .map(|(data, layer)| LayerOutput {
            channels: layer.cout,
            data,
        })
        .collect())
}

/// Per-layer parameter gradients plus the gradient at the grid input.
#[derive(Debug, Clone)]
pub struct EncoderGradients {
    pub kernels: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub input: Vec<f64>,
}

/// Exact gradients of [`encoder_forward`] for an upstream gradient at the
/// normalized output (layout matches `FeatureGrid::data`).
pub fn encoder_backward(
    grid: &VoxelGrid,
    params: &EncoderParams,
    upstream: &[f64],
) -> Result<EncoderGradients, ModelError> {
    check_input(grid, params)?;
    let channels = params.output_channels();
    let n = grid.spec.num_voxels();
    if upstream.len() != n * channels {
        return Err(ModelError::ShapeMismatch(format!(
            "upstream length {} != {n} voxels x {channels} channels",
            upstream.len()
        )));
    }
    let acts = run_layers(grid, params);
    let raw_out = acts.last().unwrap();

    // Backward through the masked normalization y = x / |x|:
    // dL/dx = (g - (g . y) y) / |x|.
    let mut grad = vec![0.0; raw_out.len()];
    for (v, &occ) in grid.occupancy.iter().enumerate() {
        if occ <= 0.0 {
            continue;
        }
        let x = &raw_out[v * channels..(v + 1) * channels];
        let g = &upstream[v * channels..(v + 1) * channels];
        let dst = &mut grad[v * channels..(v + 1) * channels];
        let norm = fmath::sqrt(x.iter().map(|a| a * a).sum());
        if norm > NORM_EPS {
            let mut gy = 0.0;
            for (gi, xi) in g.iter().zip(x) {
                gy += gi * (xi / norm);
            }
            for c in 0..channels {
                dst[c] = (g[c] - gy * (x[c] / norm)) / norm;
            }
        } else {
            dst.copy_from_slice(g);
        }
    }

    let dims = grid.spec.dims;
    let mut kernels = vec![Vec::new(); params.layers.len()];
    let mut biases = vec![Vec::new(); params.layers.len()];
    for (idx, layer) in params.layers.iter().enumerate().rev() {
        let input = if idx == 0 { &grid.data } else { &acts[idx - 1] };
        let (kg, bg, ig) = conv3d_backward(input, &acts[idx], &grad, dims, layer);
        kernels[idx] = kg;
        biases[idx] = bg;
        grad = ig;
    }
    Ok(EncoderGradients {
        kernels,
        biases,
        input: grad,
    })
}

/// Hyperparameters of the view-contrastive objective and its SGD loop.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub negatives_per_anchor: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            temperature: 0.07,
            negatives_per_anchor: 64,
            learning_rate: 0.1,
            epochs: 30,
            seed: 0,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return Err(ModelError::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.negatives_per_anchor == 0 {
            return Err(ModelError::InvalidConfig(
                "negatives_per_anchor must be positive".into(),
            ));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(ModelError::InvalidConfig(format!(
                "learning rate must be nonnegative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Loss value plus gradients with respect to both feature grids.
#[derive(Debug, Clone)]
pub struct ContrastiveLoss {
    pub loss: f64,
    pub grad_a: Vec<f64>,
    pub grad_b: Vec<f64>,
}

/// InfoNCE over covisible voxels: the anchor is a voxel of A's features
/// warped into B's frame, the positive is B's feature at the same voxel, and
/// negatives are drawn without replacement from the other masked voxels of B
/// (all of them when fewer than `negatives_per_anchor` exist).
pub fn view_contrastive_loss(
    feat_a_in_b: &FeatureGrid,
    feat_b: &FeatureGrid,
    mask: &[bool],
    cfg: &ContrastiveConfig,
) -> Result<ContrastiveLoss, ModelError> {
    let mut rng = Rng::from_seed(cfg.seed);
    view_contrastive_loss_seeded(feat_a_in_b, feat_b, mask, cfg, &mut rng)
}

fn view_contrastive_loss_seeded(
    feat_a_in_b: &FeatureGrid,
    feat_b: &FeatureGrid,
    mask: &[bool],
    cfg: &ContrastiveConfig,
    rng: &mut Rng,
) -> Result<ContrastiveLoss, ModelError> {
    cfg.validate()?;
    if feat_a_in_b.spec != feat_b.spec || feat_a_in_b.channels != feat_b.channels {
        return Err(ModelError::ShapeMismatch(
            "feature grids differ in spec or channels".into(),
        ));
    }
    let n_vox = feat_a_in_b.spec.num_voxels();
    if mask.len() != n_vox {
        return Err(ModelError::ShapeMismatch(format!(
            "mask length {} != {n_vox} voxels",
            mask.len()
        )));
    }
    let anchors: Vec<usize> = (0..n_vox).filter(|&v| mask[v]).collect();
    if anchors.is_empty() {
        return Err(ModelError::NoCorrespondences);
    }

    let c = feat_a_in_b.channels;
    let tau = cfg.temperature;
    let m = anchors.len();
    let n_neg = cfg.negatives_per_anchor.min(m - 1);
    let mut grad_a = vec![0.0; feat_a_in_b.data.len()];
    let mut grad_b = vec![0.0; feat_b.data.len()];
    let mut loss = 0.0;
    let mut pool: Vec<usize> = Vec::with_capacity(m);
    let mut logits: Vec<f64> = Vec::with_capacity(n_neg + 1);

    for (ai, &vox) in anchors.iter().enumerate() {
        let a = feat_a_in_b.feature(vox);

        // Negatives: partial Fisher-Yates over the masked set minus self.
        pool.clear();
        pool.extend_from_slice(&anchors);
        pool.swap_remove(ai);
        for t in 0..n_neg {
            let j = t + rng.range(pool.len() - t);
            pool.swap(t, j);
        }
        let negatives = &pool[..n_neg];

        logits.clear();
        logits.push(dot(a, feat_b.feature(vox)) / tau);
        for &nv in negatives {
            logits.push(dot(a, feat_b.feature(nv)) / tau);
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = logits.iter().map(|&l| fmath::exp(l - max)).sum();
        let lse = max + fmath::ln(sum_exp);
        loss += lse - logits[0];

        // Softmax cross-entropy gradients on the logits, pushed through the
        // dot products into both grids.
        for (slot, &l) in logits.iter().enumerate() {
            let s = fmath::exp(l - lse);
            let coeff = if slot == 0 { s - 1.0 } else { s };
            let other = if slot == 0 { vox } else { negatives[slot - 1] };
            let b_feat = feat_b.feature(other);
            let ga = &mut grad_a[vox * c..(vox + 1) * c];
            for (g, &bf) in ga.iter_mut().zip(b_feat) {
                *g += coeff * bf / tau;
            }
            let gb = &mut grad_b[other * c..(other + 1) * c];
            for (g, &af) in gb.iter_mut().zip(a) {
                *g += coeff * af / tau;
            }
        }
    }

    let scale = 1.0 / m as f64;
    for g in grad_a.iter_mut().chain(grad_b.iter_mut()) {
        *g *= scale;
    }
    Ok(ContrastiveLoss {
        loss: loss * scale,
        grad_a,
        grad_b,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fraction of masked anchors whose nearest neighbor (by cosine similarity)
/// among all masked voxels of `feat_b` is the same-voxel positive. Ties
/// count as failures.
pub fn retrieval_accuracy(
    feat_a_in_b: &FeatureGrid,
    feat_b: &FeatureGrid,
    mask: &[bool],
) -> Result<f64, ModelError> {
    if feat_a_in_b.spec != feat_b.spec || feat_a_in_b.channels != feat_b.channels {
        return Err(ModelError::ShapeMismatch(
            "feature grids differ in spec or channels".into(),
        ));
    }
    let masked: Vec<usize> = (0..feat_a_in_b.spec.num_voxels())
        .filter(|&v| mask[v])
        .collect();
    if masked.len() < 2 {
        return Err(ModelError::NotEnoughVoxels);
    }
    let mut hits = 0usize;
    for &vox in &masked {
        let a = feat_a_in_b.feature(vox);
        let own = dot(a, feat_b.feature(vox));
        let beaten = masked
            .iter()
            .filter(|&&other| other != vox)
            .all(|&other| dot(a, feat_b.feature(other)) < own);
        if beaten {
            hits += 1;
        }
    }
    Ok(hits as f64 / masked.len() as f64)
}

/// One two-view training example with known camera-to-world poses.
#[derive(Debug, Clone)]
pub struct ScenePair {
    pub rgb_a: RgbImage,
    pub depth_a: DepthImage,
    pub pose_a: RigidPose,
    pub rgb_b: RgbImage,
    pub depth_b: DepthImage,
    pub pose_b: RigidPose,
    pub intrinsics: CameraIntrinsics,
}

/// A pair lifted and stabilized onto view B's lattice, ready to encode.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub warped_a: VoxelGrid,
    pub grid_b: VoxelGrid,
    pub mask: Vec<bool>,
}

/// Lifts both views in their own camera frames, warps A's grid onto B's
/// lattice with the relative pose, and computes the covisibility mask.
/// Returns `None` when either view is empty or no voxel is covisible.
pub fn prepare_pair(
    pair: &ScenePair,
    grid_dims: [usize; 3],
    margin: f64,
) -> Result<Option<PreparedPair>, ModelError> {
    let identity = RigidPose::identity();
    let geo = |e: crate::geometry::GeometryError| ModelError::Geometry(format!("{e}"));

    let pts_a = unproject_depth(&pair.depth_a, &pair.intrinsics, &identity).map_err(geo)?;
    let pts_b = unproject_depth(&pair.depth_b, &pair.intrinsics, &identity).map_err(geo)?;
    if pts_a.is_empty() || pts_b.is_empty() {
        return Ok(None);
    }
    let cloud_a: Vec<[f64; 3]> = pts_a.iter().map(|p| p.world).collect();
    let cloud_b: Vec<[f64; 3]> = pts_b.iter().map(|p| p.world).collect();
    let spec_a = GridSpec::from_points(&cloud_a, grid_dims, margin).map_err(geo)?;
    let spec_b = GridSpec::from_points(&cloud_b, grid_dims, margin).map_err(geo)?;

    let grid_a = lift_to_grid(
        &pair.rgb_a,
        &pair.depth_a,
        &pair.intrinsics,
        &identity,
        &spec_a,
    )
    .map_err(geo)?;
    let grid_b = lift_to_grid(
        &pair.rgb_b,
        &pair.depth_b,
        &pair.intrinsics,
        &identity,
        &spec_b,
    )
    .map_err(geo)?;

    // Camera A expressed in B's camera frame.
    let a_to_b = pair.pose_b.inverse().compose(&pair.pose_a);
    let warped_a = warp_grid(&grid_a, &a_to_b, &spec_b);
    let mask = covisibility_mask(
        &spec_b,
        &pair.depth_a,
        &a_to_b,
        &pair.depth_b,
        &identity,
        &pair.intrinsics,
    );
    if !mask.iter().any(|&m| m) {
        return Ok(None);
    }
    Ok(Some(PreparedPair {
        warped_a,
        grid_b,
        mask,
    }))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    /// Mean InfoNCE loss per epoch, measured at the pre-update parameters of
    /// each step.
    pub loss_curve: Vec<f64>,
    pub skipped_pairs: usize,
}

/// Trains the encoder with one SGD step per scene pair. Fully deterministic
/// given `cfg.seed`: pairs are visited in order and each pair draws its
/// negatives from a seed derived from (cfg.seed, pair index), so a zero
/// learning rate reproduces the same loss every epoch.
pub fn train_view_prediction(
    pairs: &[ScenePair],
    params0: &EncoderParams,
    cfg: &ContrastiveConfig,
    grid_dims: [usize; 3],
    margin: f64,
) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    let mut prepared = Vec::new();
    let mut skipped = 0usize;
    for pair in pairs {
        match prepare_pair(pair, grid_dims, margin)? {
            Some(p) => prepared.push(p),
            None => skipped += 1,
        }
    }
    if prepared.is_empty() && !pairs.is_empty() {
        return Err(ModelError::NoTrainablePairs);
    }

    let mut params = params0.clone();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for _epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for (pair_idx, prep) in prepared.iter().enumerate() {
            let feat_a = encoder_forward(&prep.warped_a, &params)?;
            let feat_b = encoder_forward(&prep.grid_b, &params)?;
            let mut rng = Rng::from_seed(derive_seed(cfg.seed, pair_idx as u64));
            let result = view_contrastive_loss_seeded(&feat_a, &feat_b, &prep.mask, cfg, &mut rng)?;
            epoch_loss += result.loss;

            if cfg.learning_rate > 0.0 {
                let grads_a = encoder_backward(&prep.warped_a, &params, &result.grad_a)?;
                let grads_b = encoder_backward(&prep.grid_b, &params, &result.grad_b)?;
                for (idx, layer) in params.layers.iter_mut().enumerate() {
                    for ((w, &ga), &gb) in layer
                        .kernel
                        .iter_mut()
                        .zip(&grads_a.kernels[idx])
                        .zip(&grads_b.kernels[idx])
                    {
                        *w -= cfg.learning_rate * (ga + gb);
                    }
                    for ((b, &ga), &gb) in layer
                        .bias
                        .iter_mut()
                        .zip(&grads_a.biases[idx])
                        .zip(&grads_b.biases[idx])
                    {
                        *b -= cfg.learning_rate * (ga + gb);
                    }
                }
            }
        }
        loss_curve.push(epoch_loss / prepared.len().max(1) as f64);
    }
    Ok(TrainOutcome {
        params,
        loss_curve,
        skipped_pairs: skipped,
    })
}

/// Occupancy-weighted block pooling of a layer activation into
/// `blocks[0] x blocks[1] x blocks[2]` cells per channel. Grid dims must be
/// divisible by the block counts. Output is block-major, channel-minor.
pub fn pooled_block_features(
    data: &[f64],
    channels: usize,
    dims: [usize; 3],
    occupancy: &[f64],
    blocks: [usize; 3],
) -> Result<Vec<f64>, ModelError> {
    for a in 0..3 {
        if blocks[a] == 0 || dims[a] % blocks[a] != 0 {
            return Err(ModelError::ShapeMismatch(format!(
                "grid dims {dims:?} not divisible by blocks {blocks:?}"
            )));
        }
    }
    let cell = [
        dims[0] / blocks[0],
        dims[1] / blocks[1],
        dims[2] / blocks[2],
    ];
    let mut out = vec![0.0; blocks[0] * blocks[1] * blocks[2] * channels];
    for bx in 0..blocks[0] {
        for by in 0..blocks[1] {
            for bz in 0..blocks[2] {
                let b = (bx * blocks[1] + by) * blocks[2] + bz;
                let mut wsum = 0.0;
                let acc = &mut out[b * channels..(b + 1) * channels];
                for ix in bx * cell[0]..(bx + 1) * cell[0] {
                    for iy in by * cell[1]..(by + 1) * cell[1] {
                        for iz in bz * cell[2]..(bz + 1) * cell[2] {
                            let v = (ix * dims[1] + iy) * dims[2] + iz;
                            let w = occupancy[v];
                            if w <= 0.0 {
                                continue;
                            }
                            wsum += w;
                            for (a, &d) in acc.iter_mut().zip(&data[v * channels..][..channels]) {
                                *a += w * d;
                            }
                        }
                    }
                }
                if wsum > 0.0 {
                    for a in acc.iter_mut() {
                        *a /= wsum;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GridSpec;

    fn test_grid(dims: [usize; 3], channels: usize, seed: u64) -> VoxelGrid {
        let spec = GridSpec::new([0.0; 3], 0.5, dims).unwrap();
        let mut grid = VoxelGrid::zeros(spec, channels);
        let mut rng = Rng::from_seed(seed);
        for v in 0..grid.spec.num_voxels() {
            // leave some voxels empty
            if rng.uniform() < 0.3 {
                continue;
            }
            grid.occupancy[v] = rng.uniform_in(0.2, 1.0);
            for c in 0..channels {
                grid.data[v * channels + c] = rng.normal();
            }
        }
        grid
    }

    fn identity_params(channels: usize) -> EncoderParams {
        let mut kernel = vec![0.0; channels * channels];
        for c in 0..channels {
            kernel[c * channels + c] = 1.0;
        }
        EncoderParams::new(vec![ConvLayer::new(
            1,
            channels,
            channels,
            kernel,
            vec![0.0; channels],
            Nonlinearity::None,
        )
        .unwrap()])
        .unwrap()
    }

    #[test]
    fn identity_kernel_outputs_normalized_input() {
        let grid = test_grid([3, 3, 3], 4, 1);
        let feat = encoder_forward(&grid, &identity_params(4)).unwrap();
        for v in 0..grid.spec.num_voxels() {
            let x = &grid.data[v * 4..(v + 1) * 4];
            let y = feat.feature(v);
            if grid.occupancy[v] > 0.0 {
                let norm = x.iter().map(|a| a * a).sum::<f64>().sqrt();
                for c in 0..4 {
                    assert!((y[c] - x[c] / norm).abs() < 1e-12);
                }
            } else {
                assert!(y.iter().all(|&f| f == 0.0));
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let grid = test_grid([3, 3, 3], 2, 2);
        let params = EncoderParams::new(vec![ConvLayer::new(
            3,
            2,
            5,
            vec![0.0; 27 * 2 * 5],
            vec![0.0; 5],
            Nonlinearity::Relu,
        )
        .unwrap()])
        .unwrap();
        let feat = encoder_forward(&grid, &params).unwrap();
        assert!(feat.data.iter().all(|&f| f == 0.0));
    }

    // Direct seven-nested-loop convolution oracle.
    fn conv_oracle(input: &[f64], dims: [usize; 3], layer: &ConvLayer) -> Vec<f64> {
        let [dx, dy, dz] = dims;
        let (cin, cout, k) = (layer.cin, layer.cout, layer.size);
        let half = (k / 2) as isize;
        let mut out = vec![0.0; dx * dy * dz * cout];
        for x in 0..dx as isize {
            for y in 0..dy as isize {
                for z in 0..dz as isize {
                    for co in 0..cout {
                        let mut acc = layer.bias[co];
                        for tx in 0..k as isize {
                            for ty in 0..k as isize {
                                for tz in 0..k as isize {
                                    let (sx, sy, sz) =
                                        (x + tx - half, y + ty - half, z + tz - half);
                                    if sx < 0
                                        || sy < 0
                                        || sz < 0
                                        || sx >= dx as isize
                                        || sy >= dy as isize
                                        || sz >= dz as isize
                                    {
                                        continue;
                                    }
                                    for ci in 0..cin {
                                        let iv = ((sx as usize * dy + sy as usize) * dz
                                            + sz as usize)
                                            * cin
                                            + ci;
                                        let kv = (((tx as usize * k + ty as usize) * k
                                            + tz as usize)
                                            * cin
                                            + ci)
                                            * cout
                                            + co;
                                        acc += input[iv] * layer.kernel[kv];
                                    }
                                }
                            }
                        }
                        let ov = ((x as usize * dy + y as usize) * dz + z as usize) * cout + co;
                        out[ov] = match layer.nonlinearity {
                            Nonlinearity::Relu => acc.max(0.0),
                            Nonlinearity::None => acc,
                        };
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loop_oracle() {
        let mut rng = Rng::from_seed(7);
        let dims = [5, 5, 5];
        let layer = random_layer(&mut rng, 3, 3, 4, Nonlinearity::None);
        let input: Vec<f64> = (0..5 * 5 * 5 * 3).map(|_| rng.normal()).collect();
        let got = conv3d_forward(&input, dims, &layer);
        let want = conv_oracle(&input, dims, &layer);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-10, "{g} vs {w}");
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let grid = test_grid([4, 4, 4], 3, 3);
        let params = EncoderParams::default_two_layer(5);
        let upstream = vec![0.0; grid.spec.num_voxels() * params.output_channels()];
        let grads = encoder_backward(&grid, &params, &upstream).unwrap();
        assert!(grads.kernels.iter().flatten().all(|&g| g == 0.0));
        assert!(grads.biases.iter().flatten().all(|&g| g == 0.0));
        assert!(grads.input.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn linear_pointwise_weight_gradient_is_input_sum() {
        // For pre = w * x per voxel and upstream gradient 1 at every voxel,
        // dL/dw through the conv alone is the sum of inputs.
        let dims = [3, 3, 3];
        let n = 27;
        let mut input = vec![0.0; n];
        let mut rng = Rng::from_seed(11);
        for v in input.iter_mut() {
            *v = rng.normal();
        }
        let layer = ConvLayer::new(1, 1, 1, vec![1.7], vec![0.0], Nonlinearity::None).unwrap();
        let post = conv3d_forward(&input, dims, &layer);
        let ones = vec![1.0; n];
        let (kernel_grad, bias_grad, _) = conv3d_backward(&input, &post, &ones, dims, &layer);
        let sum: f64 = input.iter().sum();
        assert!((kernel_grad[0] - sum).abs() < 1e-12);
        assert!((bias_grad[0] - n as f64).abs() < 1e-12);
    }

    #[test]
    fn output_unit_norm_where_occupied() {
        let grid = test_grid([4, 4, 4], 3, 9);
        let params = EncoderParams::default_two_layer(1);
        let feat = encoder_forward(&grid, &params).unwrap();
        for v in 0..grid.spec.num_voxels() {
            let norm: f64 = feat.feature(v).iter().map(|a| a * a).sum::<f64>().sqrt();
            if grid.occupancy[v] > 0.0 {
                assert!((norm - 1.0).abs() < 1e-6, "norm {norm} at voxel {v}");
            } else {
                assert_eq!(norm, 0.0);
            }
        }
    }

    fn uniform_feature_grid(dims: [usize; 3], vectors: &[Vec<f64>]) -> (FeatureGrid, Vec<bool>) {
        let spec = GridSpec::new([0.0; 3], 1.0, dims).unwrap();
        let n = spec.num_voxels();
        assert!(vectors.len() <= n);
        let channels = vectors[0].len();
        let mut data = vec![0.0; n * channels];
        let mut occupancy = vec![0.0; n];
        let mut mask = vec![false; n];
        for (v, vecf) in vectors.iter().enumerate() {
            data[v * channels..(v + 1) * channels].copy_from_slice(vecf);
            occupancy[v] = 1.0;
            mask[v] = true;
        }
        (
            FeatureGrid {
                spec,
                channels,
                data,
                occupancy,
            },
            mask,
        )
    }

    #[test]
    fn loss_all_identical_features_is_log_one_plus_n() {
        let vecs: Vec<Vec<f64>> = (0..10).map(|_| vec![1.0, 0.0, 0.0]).collect();
        let (grid, mask) = uniform_feature_grid([10, 1, 1], &vecs);
        let cfg = ContrastiveConfig {
            negatives_per_anchor: 6,
            ..ContrastiveConfig::default()
        };
        let out = view_contrastive_loss(&grid, &grid, &mask, &cfg).unwrap();
        assert!((out.loss - (1.0f64 + 6.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_orthogonal_negatives_closed_form() {
        // Anchor equals positive, all negatives orthogonal, tau = 1:
        // loss = -log(e / (e + N)) with N negatives.
        let n = 4usize;
        let c = n + 1;
        let vecs: Vec<Vec<f64>> = (0..c)
            .map(|i| {
                let mut v = vec![0.0; c];
                v[i] = 1.0;
                v
            })
            .collect();
        let (grid, mask) = uniform_feature_grid([c, 1, 1], &vecs);
        let cfg = ContrastiveConfig {
            temperature: 1.0,
            negatives_per_anchor: n,
            ..ContrastiveConfig::default()
        };
        let out = view_contrastive_loss(&grid, &grid, &mask, &cfg).unwrap();
        let expect = -(core::f64::consts::E / (core::f64::consts::E + n as f64)).ln();
        assert!((out.loss - expect).abs() < 1e-12, "{} vs {expect}", out.loss);
    }

    #[test]
    fn loss_empty_mask_errors() {
        let vecs = vec![vec![1.0, 0.0]];
        let (grid, _) = uniform_feature_grid([2, 1, 1], &vecs);
        let mask = vec![false; 2];
        assert!(matches!(
            view_contrastive_loss(&grid, &grid, &mask, &ContrastiveConfig::default()),
            Err(ModelError::NoCorrespondences)
        ));
    }

    #[test]
    fn retrieval_exact_match_is_one() {
        let vecs: Vec<Vec<f64>> = (0..5)
            .map(|i| {
                let mut v = vec![0.0; 5];
                v[i] = 1.0;
                v
            })
            .collect();
        let (grid, mask) = uniform_feature_grid([5, 1, 1], &vecs);
        assert_eq!(retrieval_accuracy(&grid, &grid, &mask).unwrap(), 1.0);
    }

    #[test]
    fn retrieval_all_identical_is_zero() {
        let vecs: Vec<Vec<f64>> = (0..4).map(|_| vec![0.5, 0.5]).collect();
        let (grid, mask) = uniform_feature_grid([4, 1, 1], &vecs);
        assert_eq!(retrieval_accuracy(&grid, &grid, &mask).unwrap(), 0.0);
    }

    #[test]
    fn retrieval_needs_two_voxels() {
        let vecs = vec![vec![1.0]];
        let (grid, mask) = uniform_feature_grid([1, 1, 1], &vecs);
        assert!(matches!(
            retrieval_accuracy(&grid, &grid, &mask),
            Err(ModelError::NotEnoughVoxels)
        ));
    }

    #[test]
    fn pooled_features_weighted_mean() {
        let dims = [2, 2, 2];
        let data = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let occupancy = vec![1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 3.0];
        let pooled = pooled_block_features(&data, 1, dims, &occupancy, [1, 1, 1]).unwrap();
        // (1 + 2 + 5 + 3*8) / 6
        assert!((pooled[0] - 32.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn pooled_features_rejects_bad_blocks() {
        let data = vec![0.0; 27];
        let occ = vec![0.0; 27];
        assert!(pooled_block_features(&data, 1, [3, 3, 3], &occ, [2, 2, 2]).is_err());
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let grid = test_grid([2, 2, 2], 4, 13);
        let params = EncoderParams::default_two_layer(0); // expects 3 channels
        assert!(matches!(
            encoder_forward(&grid, &params),
            Err(ModelError::ChannelMismatch {
                expected: 3,
                got: 4
            })
        ));
    }

    #[test]
    fn layer_validation() {
        assert!(ConvLayer::new(2, 1, 1, vec![0.0; 8], vec![0.0], Nonlinearity::None).is_err());
        assert!(ConvLayer::new(1, 1, 1, vec![f64::NAN], vec![0.0], Nonlinearity::None).is_err());
        let l1 = ConvLayer::new(1, 1, 2, vec![0.0; 2], vec![0.0; 2], Nonlinearity::None).unwrap();
        let l2 = ConvLayer::new(1, 3, 1, vec![0.0; 3], vec![0.0], Nonlinearity::None).unwrap();
        assert!(EncoderParams::new(vec![l1, l2]).is_err());
    }
}
