//! Pinhole camera math, depth unprojection into world-frame voxel grids, and
//! rigid-pose grid warping with trilinear interpolation.
//!
//! Conventions (also documented in the README): camera looks along +z with
//! +x right and +y down; pixel (0, 0) is the top-left sample and pixel
//! centers sit at integer coordinates; depth values are z-depths in meters
//! and a depth of exactly 0 means "no hit".

use crate::fmath;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

/// Depth value marking a pixel with no surface hit.
pub const DEPTH_NO_HIT: f64 = 0.0;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub(crate) fn vadd(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn vsub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn vscale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn vdot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn vnorm(a: Vec3) -> f64 {
    fmath::sqrt(vdot(a, a))
}

pub(crate) fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub(crate) fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub(crate) fn mat_transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum GeometryError {
    InvalidIntrinsics(String),
    InvalidRotation(String),
    InvalidGridSpec(String),
    InvalidImage(String),
    DimensionMismatch(String),
    EmptyPointCloud,
}

impl core::fmt::Display for GeometryError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            GeometryError::InvalidIntrinsics(m) => write!(f, "invalid intrinsics: {m}"),
            GeometryError::InvalidRotation(m) => write!(f, "invalid rotation: {m}"),
            GeometryError::InvalidGridSpec(m) => write!(f, "invalid grid spec: {m}"),
            GeometryError::InvalidImage(m) => write!(f, "invalid image: {m}"),
            GeometryError::DimensionMismatch(m) => write!(f, "dimension mismatch: {m}"),
            GeometryError::EmptyPointCloud => write!(f, "empty point cloud"),
        }
    }
}

impl core::error::Error for GeometryError {}

/// Pinhole camera intrinsics in pixel units.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) || !fx.is_finite() || !fy.is_finite() {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if !(0.0 <= cx && cx < width as f64) || !(0.0 <= cy && cy < height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Square-pixel intrinsics from a horizontal field of view in radians,
    /// principal point at the image center.
    pub fn with_horizontal_fov(
        width: usize,
        height: usize,
        fov: f64,
    ) -> Result<Self, GeometryError> {
        if !(fov > 0.0 && fov < core::f64::consts::PI) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "horizontal fov must be in (0, pi), got {fov}"
            )));
        }
        let fx = (width as f64 / 2.0) / fmath::tan(fov / 2.0);
        CameraIntrinsics::new(fx, fx, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }
}

/// SE(3) rigid transform: `apply(p) = rotation · p + translation`.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidPose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

const ROTATION_TOL: f64 = 1e-6;

impl RigidPose {
    pub fn identity() -> Self {
        RigidPose {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Validates that `rotation` is orthonormal with determinant +1.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self, GeometryError> {
        let rt = mat_transpose(&rotation);
        let gram = mat_mul(&rt, &rotation);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                if fmath::abs(gram[i][j] - expect) > ROTATION_TOL {
                    return Err(GeometryError::InvalidRotation(format!(
                        "RᵀR deviates from identity at ({i},{j}) by {}",
                        fmath::abs(gram[i][j] - expect)
                    )));
                }
            }
        }
        let det = det3(&rotation);
        if fmath::abs(det - 1.0) > ROTATION_TOL {
            return Err(GeometryError::InvalidRotation(format!(
                "determinant {det} is not +1"
            )));
        }
        if !translation.iter().all(|t| t.is_finite()) {
            return Err(GeometryError::InvalidRotation(
                "non-finite translation".into(),
            ));
        }
        Ok(RigidPose {
            rotation,
            translation,
        })
    }

    pub fn from_translation(translation: Vec3) -> Self {
        RigidPose {
            translation,
            ..RigidPose::identity()
        }
    }

    /// Rodrigues rotation about a (not necessarily unit) axis.
    pub fn from_axis_angle(axis: Vec3, angle: f64, translation: Vec3) -> Self {
        let n = vnorm(axis);
        if n == 0.0 {
            return RigidPose::from_translation(translation);
        }
        let [x, y, z] = vscale(axis, 1.0 / n);
        let (s, c) = (fmath::sin(angle), fmath::cos(angle));
        let t = 1.0 - c;
        let rotation = [
            [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
            [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
            [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
        ];
        RigidPose {
            rotation,
            translation,
        }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        vadd(mat_vec(&self.rotation, p), self.translation)
    }

    /// Inverse transform: `inverse().apply(apply(p)) = p`.
    pub fn inverse(&self) -> RigidPose {
        let rt = mat_transpose(&self.rotation);
        let t = mat_vec(&rt, self.translation);
        RigidPose {
            rotation: rt,
            translation: [-t[0], -t[1], -t[2]],
        }
    }

    /// Composition acting as `other` first, then `self`:
    /// `a.compose(&b).apply(p) = a.apply(b.apply(p))`.
    pub fn compose(&self, other: &RigidPose) -> RigidPose {
        RigidPose {
            rotation: mat_mul(&self.rotation, &other.rotation),
            translation: vadd(mat_vec(&self.rotation, other.translation), self.translation),
        }
    }
}

fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Placement of a dense voxel lattice in world coordinates. `origin` is the
/// world position of the center of voxel (0, 0, 0).
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub origin: Vec3,
    pub voxel_size: f64,
    pub dims: [usize; 3],
}

impl GridSpec {
    pub fn new(origin: Vec3, voxel_size: f64, dims: [usize; 3]) -> Result<Self, GeometryError> {
        if !voxel_size.is_finite() || voxel_size <= 0.0 {
            return Err(GeometryError::InvalidGridSpec(format!(
                "voxel_size must be positive, got {voxel_size}"
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(GeometryError::InvalidGridSpec("zero dimension".into()));
        }
        if !origin.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidGridSpec("non-finite origin".into()));
        }
        Ok(GridSpec {
            origin,
            voxel_size,
            dims,
        })
    }

    /// Cube-voxel grid centered on the mean of `points`, sized so the lattice
    /// spans the point cloud's bounding box with the given margin factor.
    pub fn from_points(
        points: &[Vec3],
        dims: [usize; 3],
        margin: f64,
    ) -> Result<Self, GeometryError> {
        if points.is_empty() {
            return Err(GeometryError::EmptyPointCloud);
        }
        let mut mean = [0.0; 3];
        for p in points {
            mean = vadd(mean, *p);
        }
        mean = vscale(mean, 1.0 / points.len() as f64);
        let mut half = [0.0f64; 3];
        for p in points {
            for a in 0..3 {
                half[a] = half[a].max(fmath::abs(p[a] - mean[a]));
            }
        }
        let mut voxel_size: f64 = 0.0;
        for a in 0..3 {
            voxel_size = voxel_size.max(2.0 * margin * half[a] / dims[a] as f64);
        }
        // Degenerate cloud (single point): fall back to a small cell.
        if voxel_size <= 0.0 {
            voxel_size = 1e-3;
        }
        let origin = [
            mean[0] - voxel_size * (dims[0] - 1) as f64 / 2.0,
            mean[1] - voxel_size * (dims[1] - 1) as f64 / 2.0,
            mean[2] - voxel_size * (dims[2] - 1) as f64 / 2.0,
        ];
        GridSpec::new(origin, voxel_size, dims)
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn voxel_index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        [
            self.origin[0] + self.voxel_size * i as f64,
            self.origin[1] + self.voxel_size * j as f64,
            self.origin[2] + self.voxel_size * k as f64,
        ]
    }

    /// Continuous grid coordinates: voxel (i, j, k) center maps to (i, j, k).
    pub fn world_to_grid(&self, p: Vec3) -> Vec3 {
        [
            (p[0] - self.origin[0]) / self.voxel_size,
            (p[1] - self.origin[1]) / self.voxel_size,
            (p[2] - self.origin[2]) / self.voxel_size,
        ]
    }
}

/// Dense voxel lattice of C-dimensional features with an occupancy weight in
/// [0, 1] per voxel. Layout: `data[voxel_index(i,j,k) * channels + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub spec: GridSpec,
    pub channels: usize,
    pub data: Vec<f64>,
    pub occupancy: Vec<f64>,
}

impl VoxelGrid {
    pub fn zeros(spec: GridSpec, channels: usize) -> Self {
        let n = spec.num_voxels();
        VoxelGrid {
            spec,
            channels,
            data: vec![0.0; n * channels],
            occupancy: vec![0.0; n],
        }
    }

    pub fn feature(&self, i: usize, j: usize, k: usize) -> &[f64] {
        let v = self.spec.voxel_index(i, j, k);
        &self.data[v * self.channels..(v + 1) * self.channels]
    }

    pub fn occupancy_at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.occupancy[self.spec.voxel_index(i, j, k)]
    }
}

/// Z-depth image in meters; `DEPTH_NO_HIT` (exactly 0) marks no surface.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, GeometryError> {
        if data.len() != width * height {
            return Err(GeometryError::DimensionMismatch(format!(
                "depth data length {} != {width}x{height}",
                data.len()
            )));
        }
        if data.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(GeometryError::InvalidImage(
                "depths must be finite and >= 0".into(),
            ));
        }
        Ok(DepthImage {
            width,
            height,
            data,
        })
    }

    pub fn no_hits(width: usize, height: usize) -> Self {
        DepthImage {
            width,
            height,
            data: vec![DEPTH_NO_HIT; width * height],
        }
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, d: f64) {
        self.data[v * self.width + u] = d;
    }

    pub fn is_hit(&self, u: usize, v: usize) -> bool {
        self.get(u, v) > DEPTH_NO_HIT
    }
}

/// RGB image with channels in [0, 1], layout `data[(v * width + u) * 3 + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, GeometryError> {
        if data.len() != width * height * 3 {
            return Err(GeometryError::DimensionMismatch(format!(
                "rgb data length {} != {width}x{height}x3",
                data.len()
            )));
        }
        if data.iter().any(|c| !c.is_finite() || !(0.0..=1.0).contains(c)) {
            return Err(GeometryError::InvalidImage(
                "rgb values must be finite in [0, 1]".into(),
            ));
        }
        Ok(RgbImage {
            width,
            height,
            data,
        })
    }

    pub fn black(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn pixel(&self, u: usize, v: usize) -> [f64; 3] {
        let i = (v * self.width + u) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, u: usize, v: usize, rgb: [f64; 3]) {
        let i = (v * self.width + u) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// A world-frame point together with the pixel it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct UnprojectedPoint {
    pub world: Vec3,
    pub pixel: [usize; 2],
}

/// Back-projects every valid-depth pixel into the world frame. Pixel (u, v)
/// with depth d maps to camera coords ((u-cx)·d/fx, (v-cy)·d/fy, d).
pub fn unproject_depth(
    depth: &DepthImage,
    k: &CameraIntrinsics,
    cam_to_world: &RigidPose,
) -> Result<Vec<UnprojectedPoint>, GeometryError> {
    if depth.width != k.width || depth.height != k.height {
        return Err(GeometryError::DimensionMismatch(format!(
            "depth image {}x{} does not match intrinsics {}x{}",
            depth.width, depth.height, k.width, k.height
        )));
    }
    let mut points = Vec::new();
    for v in 0..depth.height {
        for u in 0..depth.width {
            let d = depth.get(u, v);
            if d <= DEPTH_NO_HIT {
                continue;
            }
            let cam = [
                (u as f64 - k.cx) * d / k.fx,
                (v as f64 - k.cy) * d / k.fy,
                d,
            ];
            points.push(UnprojectedPoint {
                world: cam_to_world.apply(cam),
                pixel: [u, v],
            });
        }
    }
    Ok(points)
}

/// Lifts an RGB-D view into a voxel grid by trilinear splatting.
///
/// Each unprojected point distributes its RGB vector over the 8 surrounding
/// voxel centers with trilinear weights; per-voxel features are the
/// weight-normalized average and occupancy is min(1, accumulated weight).
/// Points outside the lattice hull are dropped whole, so the total splatted
/// weight equals the number of in-bounds valid-depth pixels.
pub fn lift_to_grid(
    rgb: &RgbImage,
    depth: &DepthImage,
    k: &CameraIntrinsics,
    cam_to_world: &RigidPose,
    spec: &GridSpec,
) -> Result<VoxelGrid, GeometryError> {
    if rgb.width != depth.width || rgb.height != depth.height {
        return Err(GeometryError::DimensionMismatch(format!(
            "rgb {}x{} vs depth {}x{}",
            rgb.width, rgb.height, depth.width, depth.height
        )));
    }
    let points = unproject_depth(depth, k, cam_to_world)?;
    let mut grid = VoxelGrid::zeros(spec.clone(), 3);
    let mut weight = vec![0.0f64; spec.num_voxels()];
    let dims = spec.dims;

    for pt in &points {
        let g = spec.world_to_grid(pt.world);
        // Drop points whose splat support would leave the lattice.
        if g.iter()
            .zip(dims.iter())
            .any(|(&c, &d)| c < 0.0 || c > (d - 1) as f64)
        {
            continue;
        }
        let base = [
            fmath::floor(g[0]) as usize,
            fmath::floor(g[1]) as usize,
            fmath::floor(g[2]) as usize,
        ];
        let frac = [
            g[0] - base[0] as f64,
            g[1] - base[1] as f64,
            g[2] - base[2] as f64,
        ];
        let color = rgb.pixel(pt.pixel[0], pt.pixel[1]);
        for corner in 0..8usize {
            let off = [corner >> 2 & 1, corner >> 1 & 1, corner & 1];
            let mut w = 1.0;
            for a in 0..3 {
                w *= if off[a] == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            if w == 0.0 {
                continue;
            }
            let idx = [base[0] + off[0], base[1] + off[1], base[2] + off[2]];
            if idx[0] >= dims[0] || idx[1] >= dims[1] || idx[2] >= dims[2] {
                continue; // only reachable with w == 0 at the upper hull
            }
            let v = spec.voxel_index(idx[0], idx[1], idx[2]);
            weight[v] += w;
            for c in 0..3 {
                grid.data[v * 3 + c] += w * color[c];
            }
        }
    }

    for v in 0..spec.num_voxels() {
        if weight[v] > 0.0 {
            for c in 0..3 {
                grid.data[v * 3 + c] /= weight[v];
            }
            grid.occupancy[v] = weight[v].min(1.0);
        }
    }
    Ok(grid)
}

/// Trilinear interpolation of grid features and occupancy at a world point,
/// writing the feature into `out`. Lattice nodes outside the grid contribute
/// zero, so fully out-of-bounds points yield a zero feature and zero weight.
pub fn trilinear_sample_into(grid: &VoxelGrid, world_point: Vec3, out: &mut [f64]) -> f64 {
    sample_grid_coords(grid, grid.spec.world_to_grid(world_point), out)
}

/// Gather in continuous grid coordinates (voxel centers at integers).
fn sample_grid_coords(grid: &VoxelGrid, g: Vec3, out: &mut [f64]) -> f64 {
    debug_assert_eq!(out.len(), grid.channels);
    for o in out.iter_mut() {
        *o = 0.0;
    }
    let dims = grid.spec.dims;
    // Reject points with no in-bounds lattice support.
    for a in 0..3 {
        if !(g[a] > -1.0 && g[a] < dims[a] as f64) {
            return 0.0;
        }
    }
    let base = [
        fmath::floor(g[0]),
        fmath::floor(g[1]),
        fmath::floor(g[2]),
    ];
    let frac = [g[0] - base[0], g[1] - base[1], g[2] - base[2]];
    let mut occ = 0.0;
    for corner in 0..8usize {
        let off = [corner >> 2 & 1, corner >> 1 & 1, corner & 1];
        let mut w = 1.0;
        for a in 0..3 {
            w *= if off[a] == 1 { frac[a] } else { 1.0 - frac[a] };
        }
        if w == 0.0 {
            continue;
        }
        let ix = base[0] as isize + off[0] as isize;
        let iy = base[1] as isize + off[1] as isize;
        let iz = base[2] as isize + off[2] as isize;
        if ix < 0
            || iy < 0
            || iz < 0
            || ix >= dims[0] as isize
            || iy >= dims[1] as isize
            || iz >= dims[2] as isize
        {
            continue;
        }
        let v = grid.spec.voxel_index(ix as usize, iy as usize, iz as usize);
        occ += w * grid.occupancy[v];
        let feat = &grid.data[v * grid.channels..(v + 1) * grid.channels];
        for (o, &f) in out.iter_mut().zip(feat) {
            *o += w * f;
        }
    }
    occ
}

/// Allocating wrapper around [`trilinear_sample_into`].
pub fn trilinear_sample(grid: &VoxelGrid, world_point: Vec3) -> (Vec<f64>, f64) {
    let mut feat = vec![0.0; grid.channels];
    let w = trilinear_sample_into(grid, world_point, &mut feat);
    (feat, w)
}

/// Resamples `src` onto the lattice of `dst_spec` under a rigid transform
/// from the source frame to the destination frame. Each destination voxel
/// center is pulled back into the source frame and sampled trilinearly;
/// occupancy is transported the same way.
///
/// The pullback is folded into one affine map from destination lattice
/// indices to source grid coordinates, so an identity warp onto the same
/// spec lands on exact integer coordinates and reproduces the input
/// bit-for-bit.
pub fn warp_grid(src: &VoxelGrid, src_to_dst: &RigidPose, dst_spec: &GridSpec) -> VoxelGrid {
    let dst_to_src = src_to_dst.inverse();
    let scale = dst_spec.voxel_size / src.spec.voxel_size;
    let mut affine = dst_to_src.rotation;
    for row in affine.iter_mut() {
        for a in row.iter_mut() {
            *a *= scale;
        }
    }
    let offset = vscale(
        vsub(dst_to_src.apply(dst_spec.origin), src.spec.origin),
        1.0 / src.spec.voxel_size,
    );

    let mut out = VoxelGrid::zeros(dst_spec.clone(), src.channels);
    let [dx, dy, dz] = dst_spec.dims;
    for i in 0..dx {
        for j in 0..dy {
            for k in 0..dz {
                let idx = [i as f64, j as f64, k as f64];
                let g = vadd(mat_vec(&affine, idx), offset);
                let v = dst_spec.voxel_index(i, j, k);
                let feat = &mut out.data[v * src.channels..(v + 1) * src.channels];
                out.occupancy[v] = sample_grid_coords(src, g, feat);
            }
        }
    }
    out
}

/// Marks voxels observed near the surface in both views.
///
/// A voxel is covisible when its center projects inside both image frames
/// onto a valid-depth pixel and its z-depth along each camera ray is within
/// half a voxel size of the observed surface depth.
pub fn covisibility_mask(
    spec: &GridSpec,
    depth_a: &DepthImage,
    pose_a: &RigidPose,
    depth_b: &DepthImage,
    pose_b: &RigidPose,
    k: &CameraIntrinsics,
) -> Vec<bool> {
    let world_to_a = pose_a.inverse();
    let world_to_b = pose_b.inverse();
    let band = spec.voxel_size / 2.0;
    let mut mask = vec![false; spec.num_voxels()];
    let [dx, dy, dz] = spec.dims;
    for i in 0..dx {
        for j in 0..dy {
            for kk in 0..dz {
                let center = spec.voxel_center(i, j, kk);
                let visible_a = surface_band_visible(center, &world_to_a, depth_a, k, band);
                if !visible_a {
                    continue;
                }
                let visible_b = surface_band_visible(center, &world_to_b, depth_b, k, band);
                mask[spec.voxel_index(i, j, kk)] = visible_b;
            }
        }
    }
    mask
}

fn surface_band_visible(
    world: Vec3,
    world_to_cam: &RigidPose,
    depth: &DepthImage,
    k: &CameraIntrinsics,
    band: f64,
) -> bool {
    let cam = world_to_cam.apply(world);
    if cam[2] <= 1e-9 {
        return false;
    }
    let u = k.fx * cam[0] / cam[2] + k.cx;
    let v = k.fy * cam[1] / cam[2] + k.cy;
    let ui = fmath::round(u);
    let vi = fmath::round(v);
    if ui < 0.0 || vi < 0.0 || ui >= depth.width as f64 || vi >= depth.height as f64 {
        return false;
    }
    let observed = depth.get(ui as usize, vi as usize);
    if observed <= DEPTH_NO_HIT {
        return false;
    }
    fmath::abs(cam[2] - observed) <= band
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    pub(crate) fn random_pose(rng: &mut Rng) -> RigidPose {
        let axis = [rng.normal(), rng.normal(), rng.normal()];
        let angle = rng.uniform_in(-3.0, 3.0);
        let t = [
            rng.uniform_in(-2.0, 2.0),
            rng.uniform_in(-2.0, 2.0),
            rng.uniform_in(-2.0, 2.0),
        ];
        RigidPose::from_axis_angle(axis, angle, t)
    }

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn assert_vec_close(a: Vec3, b: Vec3, tol: f64) {
        for i in 0..3 {
            assert_close(a[i], b[i], tol);
        }
    }

    // Independent oracle: invert the 4x4 homogeneous matrix by Gauss-Jordan.
    fn homogeneous_inverse(p: &RigidPose) -> ([[f64; 4]; 4], RigidPose) {
        let mut m = [[0.0f64; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = p.rotation[i][j];
            }
            m[i][3] = p.translation[i];
        }
        m[3][3] = 1.0;
        let mut aug = [[0.0f64; 8]; 4];
        for i in 0..4 {
            for j in 0..4 {
                aug[i][j] = m[i][j];
            }
            aug[i][4 + i] = 1.0;
        }
        for col in 0..4 {
            let mut pivot = col;
            for r in col + 1..4 {
                if aug[r][col].abs() > aug[pivot][col].abs() {
                    pivot = r;
                }
            }
            aug.swap(col, pivot);
            let d = aug[col][col];
            for j in 0..8 {
                aug[col][j] /= d;
            }
            for r in 0..4 {
                if r != col {
                    let f = aug[r][col];
                    for j in 0..8 {
                        aug[r][j] -= f * aug[col][j];
                    }
                }
            }
        }
        let mut inv = [[0.0f64; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                inv[i][j] = aug[i][4 + j];
            }
        }
        let mut rot = [[0.0; 3]; 3];
        let mut tr = [0.0; 3];
        for i in 0..3 {
            for j in 0..3 {
                rot[i][j] = inv[i][j];
            }
            tr[i] = inv[i][3];
        }
        (inv, RigidPose { rotation: rot, translation: tr })
    }

    #[test]
    fn invert_identity() {
        let p = RigidPose::identity();
        assert_eq!(p.inverse(), RigidPose::identity());
    }

    #[test]
    fn invert_pure_translation() {
        let p = RigidPose::from_translation([1.0, -2.0, 3.0]);
        let inv = p.inverse();
        assert_vec_close(inv.translation, [-1.0, 2.0, -3.0], 0.0);
    }

    #[test]
    fn invert_matches_homogeneous_matrix_oracle() {
        let p = RigidPose::from_axis_angle(
            [0.0, 0.0, 1.0],
            core::f64::consts::FRAC_PI_2,
            [1.0, 0.0, 0.0],
        );
        let inv = p.inverse();
        let (_, oracle) = homogeneous_inverse(&p);
        for i in 0..3 {
            assert_vec_close(inv.rotation[i], oracle.rotation[i], 1e-12);
        }
        assert_vec_close(inv.translation, oracle.translation, 1e-12);
        let round = p.compose(&inv);
        let ident = RigidPose::identity();
        for i in 0..3 {
            assert_vec_close(round.rotation[i], ident.rotation[i], 1e-9);
        }
        assert_vec_close(round.translation, [0.0; 3], 1e-9);
    }

    #[test]
    fn compose_identity_and_translations() {
        let p = RigidPose::from_axis_angle([1.0, 2.0, 0.5], 0.7, [0.1, 0.2, 0.3]);
        let id = RigidPose::identity();
        assert_eq!(id.compose(&p), p);
        let a = RigidPose::from_translation([1.0, 0.0, 0.0]);
        let b = RigidPose::from_translation([0.0, 1.0, 0.0]);
        assert_vec_close(a.compose(&b).translation, [1.0, 1.0, 0.0], 0.0);
    }

    #[test]
    fn compose_matches_pointwise_oracle() {
        let mut rng = Rng::from_seed(17);
        for _ in 0..5 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let ab = a.compose(&b);
            for _ in 0..10 {
                let p = [rng.normal(), rng.normal(), rng.normal()];
                assert_vec_close(ab.apply(p), a.apply(b.apply(p)), 1e-9);
            }
        }
    }

    #[test]
    fn unproject_principal_point_and_offsets() {
        let k = CameraIntrinsics::new(100.0, 100.0, 32.0, 24.0, 64, 48).unwrap();
        let mut depth = DepthImage::no_hits(64, 48);
        depth.set(32, 24, 2.5);
        let pts = unproject_depth(&depth, &k, &RigidPose::identity()).unwrap();
        assert_eq!(pts.len(), 1);
        assert_vec_close(pts[0].world, [0.0, 0.0, 2.5], 1e-12);
        assert_eq!(pts[0].pixel, [32, 24]);
    }

    #[test]
    fn unproject_pixel_at_one_focal_length() {
        // Pixel (cx + fx, cy) at depth d lies at (d, 0, d) in camera coords.
        let k = CameraIntrinsics::new(20.0, 20.0, 10.0, 10.0, 40, 24).unwrap();
        let mut depth = DepthImage::no_hits(40, 24);
        depth.set(30, 10, 3.0);
        let pts = unproject_depth(&depth, &k, &RigidPose::identity()).unwrap();
        assert_eq!(pts.len(), 1);
        assert_vec_close(pts[0].world, [3.0, 0.0, 3.0], 1e-12);
    }

    #[test]
    fn unproject_skips_no_hit_pixels() {
        let k = CameraIntrinsics::new(10.0, 10.0, 4.0, 4.0, 8, 8).unwrap();
        let depth = DepthImage::no_hits(8, 8);
        let pts = unproject_depth(&depth, &k, &RigidPose::identity()).unwrap();
        assert!(pts.is_empty());
    }

    #[test]
    fn unproject_rejects_dimension_mismatch() {
        let k = CameraIntrinsics::new(10.0, 10.0, 4.0, 4.0, 8, 8).unwrap();
        let depth = DepthImage::no_hits(9, 8);
        assert!(matches!(
            unproject_depth(&depth, &k, &RigidPose::identity()),
            Err(GeometryError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn lift_empty_depth_gives_empty_grid() {
        let k = CameraIntrinsics::new(10.0, 10.0, 4.0, 4.0, 8, 8).unwrap();
        let spec = GridSpec::new([0.0; 3], 0.5, [4, 4, 4]).unwrap();
        let grid = lift_to_grid(
            &RgbImage::black(8, 8),
            &DepthImage::no_hits(8, 8),
            &k,
            &RigidPose::identity(),
            &spec,
        )
        .unwrap();
        assert!(grid.occupancy.iter().all(|&o| o == 0.0));
        assert!(grid.data.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn lift_point_on_voxel_center_is_exact() {
        let k = CameraIntrinsics::new(10.0, 10.0, 4.0, 4.0, 8, 8).unwrap();
        // Pixel (4, 4) at depth 2 unprojects to (0, 0, 2); place the grid so
        // that point is exactly the center of voxel (1, 1, 1).
        let spec = GridSpec::new([-0.5, -0.5, 1.5], 0.5, [4, 4, 4]).unwrap();
        let mut depth = DepthImage::no_hits(8, 8);
        depth.set(4, 4, 2.0);
        let mut rgb = RgbImage::black(8, 8);
        rgb.set_pixel(4, 4, [0.25, 0.5, 0.75]);
        let grid = lift_to_grid(&rgb, &depth, &k, &RigidPose::identity(), &spec).unwrap();
        assert_eq!(grid.feature(1, 1, 1), &[0.25, 0.5, 0.75]);
        assert_eq!(grid.occupancy_at(1, 1, 1), 1.0);
        let total: f64 = grid.occupancy.iter().sum();
        assert_eq!(total, 1.0);
    }

    #[test]
    fn lift_midpoint_splits_weight_evenly() {
        let k = CameraIntrinsics::new(10.0, 10.0, 4.0, 4.0, 8, 8).unwrap();
        // (0, 0, 2) halfway between voxel centers (1,1,1) and (2,1,1) in x.
        let spec = GridSpec::new([-0.75, -0.5, 1.5], 0.5, [4, 4, 4]).unwrap();
        let mut depth = DepthImage::no_hits(8, 8);
        depth.set(4, 4, 2.0);
        let mut rgb = RgbImage::black(8, 8);
        rgb.set_pixel(4, 4, [1.0, 0.0, 0.5]);
        let grid = lift_to_grid(&rgb, &depth, &k, &RigidPose::identity(), &spec).unwrap();
        assert_close(grid.occupancy_at(1, 1, 1), 0.5, 1e-12);
        assert_close(grid.occupancy_at(2, 1, 1), 0.5, 1e-12);
        // Normalized features carry the full color in both voxels.
        assert_vec_close(
            [
                grid.feature(1, 1, 1)[0],
                grid.feature(1, 1, 1)[1],
                grid.feature(1, 1, 1)[2],
            ],
            [1.0, 0.0, 0.5],
            1e-12,
        );
    }

    fn smooth_grid(spec: &GridSpec, channels: usize) -> VoxelGrid {
        let mut grid = VoxelGrid::zeros(spec.clone(), channels);
        let [dx, dy, dz] = spec.dims;
        for i in 0..dx {
            for j in 0..dy {
                for k in 0..dz {
                    let v = spec.voxel_index(i, j, k);
                    let c = spec.voxel_center(i, j, k);
                    for ch in 0..channels {
                        grid.data[v * channels + ch] = 0.3
                            + 0.1 * (ch as f64 + 1.0) * c[0]
                            + 0.07 * c[1]
                            - 0.05 * c[2];
                    }
                    grid.occupancy[v] = 1.0;
                }
            }
        }
        grid
    }

    #[test]
    fn trilinear_node_exactness_and_midpoint() {
        let spec = GridSpec::new([0.0; 3], 0.25, [5, 5, 5]).unwrap();
        let grid = smooth_grid(&spec, 2);
        let (feat, w) = trilinear_sample(&grid, spec.voxel_center(2, 3, 1));
        assert_eq!(feat, grid.feature(2, 3, 1));
        assert_eq!(w, 1.0);

        let a = spec.voxel_center(1, 1, 1);
        let b = spec.voxel_center(2, 1, 1);
        let mid = [(a[0] + b[0]) / 2.0, a[1], a[2]];
        let (feat, _) = trilinear_sample(&grid, mid);
        for ch in 0..2 {
            let expect = (grid.feature(1, 1, 1)[ch] + grid.feature(2, 1, 1)[ch]) / 2.0;
            assert_close(feat[ch], expect, 1e-12);
        }
    }

    // Independent 8-corner weighted-sum oracle.
    fn trilinear_oracle(grid: &VoxelGrid, p: Vec3) -> (Vec<f64>, f64) {
        let g = grid.spec.world_to_grid(p);
        let i0 = g[0].floor() as usize;
        let j0 = g[1].floor() as usize;
        let k0 = g[2].floor() as usize;
        let f = [g[0] - i0 as f64, g[1] - j0 as f64, g[2] - k0 as f64];
        let mut feat = vec![0.0; grid.channels];
        let mut occ = 0.0;
        for di in 0..2 {
            for dj in 0..2 {
                for dk in 0..2 {
                    let w = (if di == 1 { f[0] } else { 1.0 - f[0] })
                        * (if dj == 1 { f[1] } else { 1.0 - f[1] })
                        * (if dk == 1 { f[2] } else { 1.0 - f[2] });
                    let v = grid.spec.voxel_index(i0 + di, j0 + dj, k0 + dk);
                    occ += w * grid.occupancy[v];
                    for ch in 0..grid.channels {
                        feat[ch] += w * grid.data[v * grid.channels + ch];
                    }
                }
            }
        }
        (feat, occ)
    }

    #[test]
    fn trilinear_matches_eight_corner_oracle() {
        let spec = GridSpec::new([-1.0, 0.5, 2.0], 0.3, [6, 5, 7]).unwrap();
        let grid = smooth_grid(&spec, 3);
        let mut rng = Rng::from_seed(99);
        for _ in 0..50 {
            let p = [
                rng.uniform_in(-1.0, -1.0 + 0.3 * 4.9),
                rng.uniform_in(0.5, 0.5 + 0.3 * 3.9),
                rng.uniform_in(2.0, 2.0 + 0.3 * 5.9),
            ];
            let (feat, w) = trilinear_sample(&grid, p);
            let (ofeat, ow) = trilinear_oracle(&grid, p);
            assert_close(w, ow, 1e-12);
            for ch in 0..3 {
                assert_close(feat[ch], ofeat[ch], 1e-12);
            }
        }
    }

    #[test]
    fn trilinear_out_of_bounds_is_zero() {
        let spec = GridSpec::new([0.0; 3], 0.5, [3, 3, 3]).unwrap();
        let grid = smooth_grid(&spec, 2);
        let (feat, w) = trilinear_sample(&grid, [100.0, 0.0, 0.0]);
        assert_eq!(w, 0.0);
        assert!(feat.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn warp_identity_is_bit_identical() {
        let spec = GridSpec::new([0.1, -0.2, 0.3], 0.21, [6, 5, 4]).unwrap();
        let grid = smooth_grid(&spec, 3);
        let out = warp_grid(&grid, &RigidPose::identity(), &spec);
        assert_eq!(out.data, grid.data);
        assert_eq!(out.occupancy, grid.occupancy);
    }

    #[test]
    fn warp_one_voxel_translation_is_integer_shift() {
        let spec = GridSpec::new([0.0; 3], 0.5, [5, 4, 4]).unwrap();
        let grid = smooth_grid(&spec, 2);
        // Moving the content one voxel along +x means destination voxel
        // (i, j, k) reads source voxel (i-1, j, k).
        let pose = RigidPose::from_translation([spec.voxel_size, 0.0, 0.0]);
        let out = warp_grid(&grid, &pose, &spec);
        for i in 0..5 {
            for j in 0..4 {
                for k in 0..4 {
                    if i == 0 {
                        assert_eq!(out.feature(i, j, k), &[0.0, 0.0]);
                        assert_eq!(out.occupancy_at(i, j, k), 0.0);
                    } else {
                        assert_eq!(out.feature(i, j, k), grid.feature(i - 1, j, k));
                        assert_eq!(out.occupancy_at(i, j, k), grid.occupancy_at(i - 1, j, k));
                    }
                }
            }
        }
    }

    #[test]
    fn warp_round_trip_close_on_smooth_field() {
        let spec = GridSpec::new([0.0; 3], 0.2, [12, 12, 12]).unwrap();
        let grid = smooth_grid(&spec, 2);
        let pose = RigidPose::from_axis_angle([0.3, 1.0, 0.2], 0.15, [0.07, -0.04, 0.05]);
        let warped = warp_grid(&grid, &pose, &spec);
        let back = warp_grid(&warped, &pose.inverse(), &spec);
        for i in 2..10 {
            for j in 2..10 {
                for k in 2..10 {
                    for ch in 0..2 {
                        let orig = grid.feature(i, j, k)[ch];
                        let round = back.feature(i, j, k)[ch];
                        assert!(
                            (orig - round).abs() < 1e-2,
                            "voxel ({i},{j},{k}) ch {ch}: {orig} vs {round}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn covisibility_identical_views_matches_single_view_band() {
        let k = CameraIntrinsics::new(16.0, 16.0, 8.0, 8.0, 16, 16).unwrap();
        // Constant-depth plane at z = 2 (z-depth is constant across pixels).
        let depth = DepthImage::new(16, 16, vec![2.0; 256]).unwrap();
        let pose = RigidPose::identity();
        let spec = GridSpec::new([-0.45, -0.45, 1.3], 0.3, [4, 4, 6]).unwrap();
        let mask = covisibility_mask(&spec, &depth, &pose, &depth, &pose, &k);
        for i in 0..4 {
            for j in 0..4 {
                for kk in 0..6 {
                    let center = spec.voxel_center(i, j, kk);
                    let u = 16.0 * center[0] / center[2] + 8.0;
                    let v = 16.0 * center[1] / center[2] + 8.0;
                    let in_frame = (-0.5..15.5).contains(&u) && (-0.5..15.5).contains(&v);
                    let expect = in_frame && (center[2] - 2.0).abs() <= 0.15;
                    assert_eq!(
                        mask[spec.voxel_index(i, j, kk)],
                        expect,
                        "voxel ({i},{j},{kk}) center {center:?}"
                    );
                }
            }
        }
        assert!(mask.iter().any(|&m| m));
    }

    #[test]
    fn covisibility_opposite_sides_of_box_is_empty() {
        let k = CameraIntrinsics::new(16.0, 16.0, 8.0, 8.0, 16, 16).unwrap();
        // Camera A at origin sees the front face (z-depth 4); camera B sits
        // at z = 10 looking back and sees the rear face (z-depth 4 from its
        // side, i.e. the plane z = 6 in world coords).
        let depth_a = DepthImage::new(16, 16, vec![4.0; 256]).unwrap();
        let depth_b = DepthImage::new(16, 16, vec![4.0; 256]).unwrap();
        let pose_a = RigidPose::identity();
        let pose_b = RigidPose::from_axis_angle(
            [0.0, 1.0, 0.0],
            core::f64::consts::PI,
            [0.0, 0.0, 10.0],
        );
        let spec = GridSpec::new([-0.9, -0.9, 3.0], 0.6, [4, 4, 8]).unwrap();
        let mask = covisibility_mask(&spec, &depth_a, &pose_a, &depth_b, &pose_b, &k);
        assert!(mask.iter().all(|&m| !m));
    }

    #[test]
    fn covisibility_empty_scene_is_all_false() {
        let k = CameraIntrinsics::new(16.0, 16.0, 8.0, 8.0, 16, 16).unwrap();
        let depth = DepthImage::no_hits(16, 16);
        let pose = RigidPose::identity();
        let spec = GridSpec::new([0.0; 3], 0.5, [4, 4, 4]).unwrap();
        let mask = covisibility_mask(&spec, &depth, &pose, &depth, &pose, &k);
        assert!(mask.iter().all(|&m| !m));
    }

    #[test]
    fn grid_spec_from_points_spans_cloud() {
        let points = [
            [0.0, 0.0, 2.0],
            [1.0, -1.0, 4.0],
            [-1.0, 1.0, 3.0],
            [0.5, 0.2, 2.5],
        ];
        let spec = GridSpec::from_points(&points, [8, 8, 8], 1.2).unwrap();
        for p in &points {
            let g = spec.world_to_grid(*p);
            for a in 0..3 {
                assert!(g[a] >= 0.0 && g[a] <= 7.0, "point {p:?} outside grid");
            }
        }
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 0.0, 4, 4).is_err());
        assert!(CameraIntrinsics::with_horizontal_fov(64, 48, 1.0).is_ok());
    }

    #[test]
    fn pose_validation_rejects_non_rotation() {
        let scaled = [[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]];
        assert!(RigidPose::new(scaled, [0.0; 3]).is_err());
        let reflection = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        assert!(RigidPose::new(reflection, [0.0; 3]).is_err());
    }
}
