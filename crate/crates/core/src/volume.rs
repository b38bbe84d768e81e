//! Voxel grids, raw volume I/O and geometric operations.
//!
//! Raw volumes are headerless little-endian binaries accompanied by a text
//! sidecar of `key=value` lines:
//!
//! ```text
//! nx=380
//! ny=380
//! nz=512
//! depth=8
//! voxel_size_um=10.72
//! byte_order=little
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::field::Field3;
use crate::interp::{self, Kernel};
use crate::scalar::quantize;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("raw file holds {actual} bytes, metadata implies {expected}")]
    SizeMismatch { expected: u64, actual: u64 },
    #[error("metadata parse error: {0}")]
    Parse(String),
    #[error("metadata is missing required key `{0}`")]
    MissingKey(&'static str),
    #[error("region {origin:?}+{shape:?} does not fit in grid {dims:?}")]
    OutOfBounds {
        origin: [usize; 3],
        shape: [usize; 3],
        dims: [usize; 3],
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("resampling factor must be positive, got {0}")]
    InvalidFactor(f64),
    #[error("resampling would produce an empty axis (dims {0:?})")]
    EmptyOutput([usize; 3]),
    #[error("slice {index} has shape {found:?}, expected {expected:?}")]
    InconsistentSlices {
        index: usize,
        found: [usize; 3],
        expected: [usize; 3],
    },
    #[error("invalid grid: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, VolumeError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> VolumeError + '_ {
    move |source| VolumeError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BitDepth {
    U8,
    U16,
}

impl BitDepth {
    pub fn bits(self) -> u32 {
        match self {
            BitDepth::U8 => 8,
            BitDepth::U16 => 16,
        }
    }

    pub fn max_value(self) -> u16 {
        match self {
            BitDepth::U8 => u8::MAX as u16,
            BitDepth::U16 => u16::MAX,
        }
    }

    pub fn levels(self) -> usize {
        self.max_value() as usize + 1
    }

    pub fn from_bits(bits: u32) -> Option<Self> {
        match bits {
            8 => Some(BitDepth::U8),
            16 => Some(BitDepth::U16),
            _ => None,
        }
    }
}

/// 3D scalar image. Data is stored x fastest, then y, then z.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    dims: [usize; 3],
    voxel_size: f64,
    depth: BitDepth,
    data: Vec<u16>,
}

impl VoxelGrid {
    pub fn new(dims: [usize; 3], voxel_size: f64, depth: BitDepth, data: Vec<u16>) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(VolumeError::Invalid(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(VolumeError::Invalid(format!("voxel size {voxel_size} must be positive")));
        }
        let max = depth.max_value();
        if let Some(v) = data.iter().find(|&&v| v > max) {
            return Err(VolumeError::Invalid(format!("value {v} exceeds {}-bit range", depth.bits())));
        }
        Ok(Self { dims, voxel_size, depth, data })
    }

    pub fn filled(dims: [usize; 3], voxel_size: f64, depth: BitDepth, value: u16) -> Result<Self> {
        Self::new(dims, voxel_size, depth, vec![value; dims[0] * dims[1] * dims[2]])
    }

    /// Builds a grid from a function of voxel coordinates; values are clamped
    /// into the depth range.
    pub fn from_fn(
        dims: [usize; 3],
        voxel_size: f64,
        depth: BitDepth,
        f: impl Fn(usize, usize, usize) -> u16,
    ) -> Result<Self> {
        let max = depth.max_value();
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z).min(max));
                }
            }
        }
        Self::new(dims, voxel_size, depth, data)
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }
    #[inline]
    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }
    #[inline]
    pub fn depth(&self) -> BitDepth {
        self.depth
    }
    #[inline]
    pub fn data(&self) -> &[u16] {
        &self.data
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }
    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u16 {
        self.data[self.index(x, y, z)]
    }

    /// Sets a voxel, clamping to the depth range.
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: u16) {
        let i = self.index(x, y, z);
        self.data[i] = v.min(self.depth.max_value());
    }

    pub fn with_voxel_size(mut self, voxel_size: f64) -> Self {
        assert!(voxel_size > 0.0);
        self.voxel_size = voxel_size;
        self
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn to_field(&self) -> Field3<f64> {
        Field3::from_vec(self.dims, self.to_f64()).expect("dims consistent")
    }

    /// Quantizes real values (half-up rounding, clamped to the depth range).
    pub fn from_real(dims: [usize; 3], voxel_size: f64, depth: BitDepth, values: &[f64]) -> Result<Self> {
        let max = depth.max_value();
        Self::new(dims, voxel_size, depth, values.iter().map(|&v| quantize(v, max)).collect())
    }

    /// Replaces the data buffer, keeping dims, voxel size and depth.
    pub fn with_data(&self, data: Vec<u16>) -> Result<Self> {
        Self::new(self.dims, self.voxel_size, self.depth, data)
    }
}

/// Axis-aligned box inside a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub origin: [usize; 3],
    pub shape: [usize; 3],
}

impl Region {
    pub fn new(origin: [usize; 3], shape: [usize; 3]) -> Self {
        Self { origin, shape }
    }

    pub fn full(dims: [usize; 3]) -> Self {
        Self { origin: [0; 3], shape: dims }
    }

    pub fn fits(&self, dims: [usize; 3]) -> bool {
        (0..3).all(|a| self.origin[a] + self.shape[a] <= dims[a])
    }
}

// ---------------------------------------------------------------------------
// raw I/O

#[derive(Debug, Clone, PartialEq)]
pub struct RawMeta {
    pub dims: [usize; 3],
    /// 8, 16, or 32 (IEEE float).
    pub depth_bits: u32,
    pub voxel_size: f64,
}

impl RawMeta {
    pub fn to_sidecar(&self) -> String {
        format!(
            "nx={}\nny={}\nnz={}\ndepth={}\nvoxel_size_um={}\nbyte_order=little\n",
            self.dims[0], self.dims[1], self.dims[2], self.depth_bits, self.voxel_size
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| VolumeError::Parse(format!("line {}: expected key=value", lineno + 1)))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        fn get<'a>(kv: &'a HashMap<String, String>, key: &'static str) -> Result<&'a str> {
            kv.get(key).map(String::as_str).ok_or(VolumeError::MissingKey(key))
        }
        fn num<T: std::str::FromStr>(kv: &HashMap<String, String>, key: &'static str) -> Result<T> {
            let raw = get(kv, key)?;
            raw.parse()
                .map_err(|_| VolumeError::Parse(format!("{key}: cannot parse `{raw}`")))
        }
        let dims = [num(&kv, "nx")?, num(&kv, "ny")?, num(&kv, "nz")?];
        let depth_bits: u32 = num(&kv, "depth")?;
        if !matches!(depth_bits, 8 | 16 | 32) {
            return Err(VolumeError::Parse(format!("unsupported depth {depth_bits}")));
        }
        let voxel_size: f64 = num(&kv, "voxel_size_um")?;
        if !(voxel_size > 0.0) {
            return Err(VolumeError::Parse(format!("voxel_size_um must be positive, got {voxel_size}")));
        }
        let order = get(&kv, "byte_order")?;
        if order != "little" {
            return Err(VolumeError::Parse(format!("byte_order must be `little`, got `{order}`")));
        }
        Ok(Self { dims, depth_bits, voxel_size })
    }

    fn voxel_count(&self) -> u64 {
        self.dims.iter().map(|&d| d as u64).product()
    }
}

fn read_meta(meta_path: &Path) -> Result<RawMeta> {
    RawMeta::parse(&fs::read_to_string(meta_path).map_err(io_err(meta_path))?)
}

fn read_checked(path: &Path, expected: u64) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() as u64 != expected {
        return Err(VolumeError::SizeMismatch {
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes)
}

/// Writes `bytes` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp_name = path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn load_raw(path: &Path, meta_path: &Path) -> Result<VoxelGrid> {
    let meta = read_meta(meta_path)?;
    let depth = BitDepth::from_bits(meta.depth_bits)
        .ok_or_else(|| VolumeError::Parse(format!("depth {} is not an integer grid", meta.depth_bits)))?;
    let bytes_per = (meta.depth_bits / 8) as u64;
    let bytes = read_checked(path, meta.voxel_count() * bytes_per)?;
    let data = match depth {
        BitDepth::U8 => bytes.iter().map(|&b| b as u16).collect(),
        BitDepth::U16 => bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect(),
    };
    VoxelGrid::new(meta.dims, meta.voxel_size, depth, data)
}

pub fn save_raw(grid: &VoxelGrid, path: &Path, meta_path: &Path) -> Result<()> {
    let bytes: Vec<u8> = match grid.depth {
        BitDepth::U8 => grid.data.iter().map(|&v| v as u8).collect(),
        BitDepth::U16 => grid.data.iter().flat_map(|v| v.to_le_bytes()).collect(),
    };
    let meta = RawMeta {
        dims: grid.dims,
        depth_bits: grid.depth.bits(),
        voxel_size: grid.voxel_size,
    };
    write_atomic(path, &bytes).map_err(io_err(path))?;
    write_atomic(meta_path, meta.to_sidecar().as_bytes()).map_err(io_err(meta_path))
}

/// Writes a 32-bit float field with a `depth=32` sidecar.
pub fn save_raw_f32(field: &Field3<f32>, voxel_size: f64, path: &Path, meta_path: &Path) -> Result<()> {
    let bytes: Vec<u8> = field.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    let meta = RawMeta {
        dims: field.dims(),
        depth_bits: 32,
        voxel_size,
    };
    write_atomic(path, &bytes).map_err(io_err(path))?;
    write_atomic(meta_path, meta.to_sidecar().as_bytes()).map_err(io_err(meta_path))
}

pub fn load_raw_f32(path: &Path, meta_path: &Path) -> Result<(Field3<f32>, f64)> {
    let meta = read_meta(meta_path)?;
    if meta.depth_bits != 32 {
        return Err(VolumeError::Parse(format!("expected depth=32, got {}", meta.depth_bits)));
    }
    let bytes = read_checked(path, meta.voxel_count() * 4)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((Field3::from_vec(meta.dims, data).expect("size checked"), meta.voxel_size))
}

// ---------------------------------------------------------------------------
// geometry

pub fn crop(grid: &VoxelGrid, region: Region) -> Result<VoxelGrid> {
    if !region.fits(grid.dims) {
        return Err(VolumeError::OutOfBounds {
            origin: region.origin,
            shape: region.shape,
            dims: grid.dims,
        });
    }
    let [sx, sy, sz] = region.shape;
    let [ox, oy, oz] = region.origin;
    let mut data = Vec::with_capacity(sx * sy * sz);
    for z in 0..sz {
        for y in 0..sy {
            let start = grid.index(ox, oy + y, oz + z);
            data.extend_from_slice(&grid.data[start..start + sx]);
        }
    }
    Ok(VoxelGrid {
        dims: region.shape,
        voxel_size: grid.voxel_size,
        depth: grid.depth,
        data,
    })
}

/// Embeds `grid` in a larger grid filled with `fill`; inverse of [`crop`] at
/// `Region::new(before, grid.dims())`.
pub fn pad(grid: &VoxelGrid, before: [usize; 3], after: [usize; 3], fill: u16) -> Result<VoxelGrid> {
    let dims = [0, 1, 2].map(|a| grid.dims[a] + before[a] + after[a]);
    let mut out = VoxelGrid::filled(dims, grid.voxel_size, grid.depth, fill.min(grid.depth.max_value()))?;
    let [nx, ny, nz] = grid.dims;
    for z in 0..nz {
        for y in 0..ny {
            let src = grid.index(0, y, z);
            let dst = out.index(before[0], before[1] + y, before[2] + z);
            out.data[dst..dst + nx].copy_from_slice(&grid.data[src..src + nx]);
        }
    }
    Ok(out)
}

/// Paired LR/HR (or unpaired) training patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPairSet {
    pub lr_patches: Vec<VoxelGrid>,
    pub hr_patches: Vec<VoxelGrid>,
    pub scale: usize,
    pub paired: bool,
}

impl PatchPairSet {
    pub fn len(&self) -> usize {
        self.lr_patches.len()
    }
    pub fn is_empty(&self) -> bool {
        self.lr_patches.is_empty()
    }
}

/// Dims of a grid upscaled by `scale`; unit-extent axes stay at one voxel so
/// that 2D slices remain 2D.
pub fn scaled_dims(dims: [usize; 3], scale: usize) -> [usize; 3] {
    dims.map(|d| if d == 1 { 1 } else { d * scale })
}

/// Window origins along one axis: `floor((n − p)/s) + 1` positions.
pub fn window_origins(n: usize, patch: usize, step: usize) -> Vec<usize> {
    if patch == 0 || patch > n || step == 0 {
        return Vec::new();
    }
    (0..=(n - patch) / step).map(|i| i * step).collect()
}

fn window_regions(dims: [usize; 3], patch: [usize; 3], step: [usize; 3]) -> Vec<Region> {
    let ox = window_origins(dims[0], patch[0], step[0]);
    let oy = window_origins(dims[1], patch[1], step[1]);
    let oz = window_origins(dims[2], patch[2], step[2]);
    let mut out = Vec::with_capacity(ox.len() * oy.len() * oz.len());
    for &z in &oz {
        for &y in &oy {
            for &x in &ox {
                out.push(Region::new([x, y, z], patch));
            }
        }
    }
    out
}

/// Sliding-window paired patches. HR windows sit at `scale ×` the LR origin
/// with `scale ×` the LR shape (unit-extent axes excepted). Windows that do
/// not fit are dropped.
pub fn extract_paired_patches(
    lr: &VoxelGrid,
    hr: &VoxelGrid,
    lr_patch: [usize; 3],
    lr_step: [usize; 3],
    scale: usize,
) -> Result<PatchPairSet> {
    if scale == 0 {
        return Err(VolumeError::DimensionMismatch("scale must be at least 1".into()));
    }
    if scaled_dims(lr.dims, scale) != hr.dims {
        return Err(VolumeError::DimensionMismatch(format!(
            "hr dims {:?} are not {}× lr dims {:?}",
            hr.dims, scale, lr.dims
        )));
    }
    if (0..3).any(|a| lr_patch[a] == 0 || lr_patch[a] > lr.dims[a] || lr_step[a] == 0) {
        return Err(VolumeError::DimensionMismatch(format!(
            "patch {:?} / step {:?} incompatible with lr dims {:?}",
            lr_patch, lr_step, lr.dims
        )));
    }
    let mut lr_patches = Vec::new();
    let mut hr_patches = Vec::new();
    for region in window_regions(lr.dims, lr_patch, lr_step) {
        let hr_region = Region::new(
            [0, 1, 2].map(|a| if lr.dims[a] == 1 { 0 } else { region.origin[a] * scale }),
            [0, 1, 2].map(|a| if lr.dims[a] == 1 { 1 } else { region.shape[a] * scale }),
        );
        lr_patches.push(crop(lr, region)?);
        hr_patches.push(crop(hr, hr_region)?);
    }
    Ok(PatchPairSet {
        lr_patches,
        hr_patches,
        scale,
        paired: true,
    })
}

/// Sliding-window patches from a single grid.
pub fn extract_patches(grid: &VoxelGrid, patch: [usize; 3], step: [usize; 3]) -> Result<Vec<VoxelGrid>> {
    if (0..3).any(|a| patch[a] == 0 || patch[a] > grid.dims[a] || step[a] == 0) {
        return Err(VolumeError::DimensionMismatch(format!(
            "patch {:?} / step {:?} incompatible with dims {:?}",
            patch, step, grid.dims
        )));
    }
    window_regions(grid.dims, patch, step)
        .into_iter()
        .map(|r| crop(grid, r))
        .collect()
}

/// Unpaired patch sets for adversarial training.
pub fn extract_unpaired_patches(
    lr: &VoxelGrid,
    hr: &VoxelGrid,
    lr_patch: [usize; 3],
    lr_step: [usize; 3],
    scale: usize,
) -> Result<PatchPairSet> {
    let lr_patches = extract_patches(lr, lr_patch, lr_step)?;
    let hr_patch = [0, 1, 2].map(|a| if hr.dims[a] == 1 { 1 } else { lr_patch[a] * scale });
    let hr_step = [0, 1, 2].map(|a| if hr.dims[a] == 1 { 1 } else { lr_step[a] * scale });
    let hr_patches = extract_patches(hr, hr_patch, hr_step)?;
    Ok(PatchPairSet {
        lr_patches,
        hr_patches,
        scale,
        paired: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResampleMethod {
    Trilinear,
    /// Catmull-Rom per XY slice; z is never resampled.
    BicubicPerSlice,
    Nearest,
}

fn kernel_of(method: ResampleMethod) -> Kernel {
    match method {
        ResampleMethod::Trilinear => Kernel::Linear,
        ResampleMethod::BicubicPerSlice => Kernel::Cubic,
        ResampleMethod::Nearest => Kernel::Nearest,
    }
}

/// Resamples by a uniform factor (`< 1` downsamples). Output extent is
/// `round(factor × n)` on every axis longer than one voxel; unit-extent axes
/// are kept, and `BicubicPerSlice` leaves z untouched. Voxel size is divided
/// by the factor.
pub fn resample(grid: &VoxelGrid, factor: f64, method: ResampleMethod) -> Result<VoxelGrid> {
    let mut factors = [factor; 3];
    if method == ResampleMethod::BicubicPerSlice {
        factors[2] = 1.0;
    }
    resample_axes(grid, factors, method)
}

/// Per-axis factor resampling; see [`resample`].
pub fn resample_axes(grid: &VoxelGrid, factors: [f64; 3], method: ResampleMethod) -> Result<VoxelGrid> {
    if let Some(&f) = factors.iter().find(|f| !(**f > 0.0 && f.is_finite())) {
        return Err(VolumeError::InvalidFactor(f));
    }
    if method == ResampleMethod::BicubicPerSlice && factors[2] != 1.0 {
        return Err(VolumeError::InvalidFactor(factors[2]));
    }
    let out_dims = [0, 1, 2].map(|a| {
        if grid.dims[a] == 1 {
            1
        } else {
            (factors[a] * grid.dims[a] as f64).round() as usize
        }
    });
    let voxel_factor = factors
        .iter()
        .zip(grid.dims)
        .find(|(_, d)| *d > 1)
        .map(|(f, _)| *f)
        .unwrap_or(1.0);
    let mut out = resample_to(grid, out_dims, method)?;
    out.voxel_size = grid.voxel_size / voxel_factor;
    Ok(out)
}

/// Resamples to explicit output dims. Voxel size is kept.
pub fn resample_to(grid: &VoxelGrid, out_dims: [usize; 3], method: ResampleMethod) -> Result<VoxelGrid> {
    if out_dims.contains(&0) {
        return Err(VolumeError::EmptyOutput(out_dims));
    }
    if grid.is_empty() {
        return Err(VolumeError::Invalid("cannot resample an empty grid".into()));
    }
    if method == ResampleMethod::BicubicPerSlice && out_dims[2] != grid.dims[2] {
        return Err(VolumeError::DimensionMismatch(
            "per-slice bicubic cannot change the z extent".into(),
        ));
    }
    if out_dims == grid.dims {
        return Ok(grid.clone());
    }
    let values = interp::resample_separable(&grid.to_f64(), grid.dims, out_dims, kernel_of(method));
    VoxelGrid::from_real(out_dims, grid.voxel_size, grid.depth, &values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Plane {
    /// One slice per z, each `nx × ny`.
    XY,
    /// One slice per y, each `nx × nz`.
    XZ,
}

/// Splits a grid into 2D slices stored as `(w, h, 1)` grids.
pub fn reslice(grid: &VoxelGrid, plane: Plane) -> Result<Vec<VoxelGrid>> {
    if grid.is_empty() {
        return Err(VolumeError::Invalid("cannot reslice an empty grid".into()));
    }
    let [nx, ny, nz] = grid.dims;
    let mk = |dims: [usize; 3], data: Vec<u16>| VoxelGrid {
        dims,
        voxel_size: grid.voxel_size,
        depth: grid.depth,
        data,
    };
    Ok(match plane {
        Plane::XY => (0..nz)
            .map(|z| {
                let s = grid.index(0, 0, z);
                mk([nx, ny, 1], grid.data[s..s + nx * ny].to_vec())
            })
            .collect(),
        Plane::XZ => (0..ny)
            .map(|y| {
                let mut data = Vec::with_capacity(nx * nz);
                for z in 0..nz {
                    let s = grid.index(0, y, z);
                    data.extend_from_slice(&grid.data[s..s + nx]);
                }
                mk([nx, nz, 1], data)
            })
            .collect(),
    })
}

/// Inverse of [`reslice`].
pub fn stack(slices: &[VoxelGrid], plane: Plane) -> Result<VoxelGrid> {
    let first = slices
        .first()
        .ok_or_else(|| VolumeError::Invalid("no slices to stack".into()))?;
    let expected = first.dims;
    if expected[2] != 1 {
        return Err(VolumeError::InconsistentSlices {
            index: 0,
            found: expected,
            expected: [expected[0], expected[1], 1],
        });
    }
    for (index, s) in slices.iter().enumerate() {
        if s.dims != expected || s.depth != first.depth {
            return Err(VolumeError::InconsistentSlices {
                index,
                found: s.dims,
                expected,
            });
        }
    }
    let n = slices.len();
    let [w, h, _] = expected;
    let (dims, data) = match plane {
        Plane::XY => {
            let mut data = Vec::with_capacity(w * h * n);
            for s in slices {
                data.extend_from_slice(&s.data);
            }
            ([w, h, n], data)
        }
        Plane::XZ => {
            // slice y holds rows z = 0..h of width w
            let mut data = vec![0u16; w * n * h];
            for (y, s) in slices.iter().enumerate() {
                for z in 0..h {
                    let dst = w * (y + n * z);
                    data[dst..dst + w].copy_from_slice(&s.data[z * w..(z + 1) * w]);
                }
            }
            ([w, n, h], data)
        }
    };
    Ok(VoxelGrid {
        dims,
        voxel_size: first.voxel_size,
        depth: first.depth,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(dims: [usize; 3], seed: u64) -> VoxelGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        VoxelGrid::new(dims, 1.0, BitDepth::U8, (0..n).map(|_| rng.random_range(0..=255)).collect()).unwrap()
    }

    #[test]
    fn load_eight_voxels_x_fastest() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("g.raw");
        let meta = dir.path().join("g.meta");
        fs::write(&raw, [0u8, 1, 2, 3, 4, 5, 6, 7]).unwrap();
        fs::write(&meta, "nx=2\nny=2\nnz=2\ndepth=8\nvoxel_size_um=2.5\nbyte_order=little\n").unwrap();
        let g = load_raw(&raw, &meta).unwrap();
        assert_eq!(g.get(1, 0, 0), 1);
        assert_eq!(g.get(0, 1, 0), 2);
        assert_eq!(g.get(0, 0, 1), 4);
        assert_eq!(g.data(), &[0, 1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(g.voxel_size(), 2.5);
    }

    #[test]
    fn sixteen_bit_little_endian() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("g.raw");
        let meta = dir.path().join("g.meta");
        fs::write(&raw, [0x01u8, 0x00, 0x00, 0x01]).unwrap();
        fs::write(&meta, "nx=2\nny=1\nnz=1\ndepth=16\nvoxel_size_um=1\nbyte_order=little\n").unwrap();
        assert_eq!(load_raw(&raw, &meta).unwrap().data(), &[1, 256]);
    }

    #[test]
    fn size_mismatch_and_missing_key() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("g.raw");
        let meta = dir.path().join("g.meta");
        fs::write(&raw, [0u8; 7]).unwrap();
        fs::write(&meta, "nx=2\nny=2\nnz=2\ndepth=8\nvoxel_size_um=1\nbyte_order=little\n").unwrap();
        assert!(matches!(
            load_raw(&raw, &meta),
            Err(VolumeError::SizeMismatch { expected: 8, actual: 7 })
        ));
        fs::write(&meta, "nx=2\nny=2\ndepth=8\nvoxel_size_um=1\nbyte_order=little\n").unwrap();
        assert!(matches!(load_raw(&raw, &meta), Err(VolumeError::MissingKey("nz"))));
    }

    #[test]
    fn save_writes_dims_and_exact_size() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("g.raw");
        let meta = dir.path().join("g.meta");
        let g = random_grid([5, 4, 3], 1);
        save_raw(&g, &raw, &meta).unwrap();
        let text = fs::read_to_string(&meta).unwrap();
        assert!(text.contains("nx=5\nny=4\nnz=3"));
        assert_eq!(fs::metadata(&raw).unwrap().len(), 60);
        assert_eq!(load_raw(&raw, &meta).unwrap(), g);
    }

    #[test]
    fn full_size_slab_byte_count() {
        // 380·380·512 voxels at one byte each
        let meta = RawMeta {
            dims: [380, 380, 512],
            depth_bits: 8,
            voxel_size: 10.72,
        };
        assert_eq!(meta.voxel_count(), 73_932_800);
    }

    #[test]
    fn crop_offsets() {
        let g = VoxelGrid::from_fn([4, 4, 4], 1.0, BitDepth::U8, |x, y, z| (x + 4 * y + 16 * z) as u16).unwrap();
        assert_eq!(crop(&g, Region::full(g.dims())).unwrap(), g);
        let c = crop(&g, Region::new([1, 1, 1], [2, 2, 2])).unwrap();
        let expected: Vec<u16> = [(1, 1, 1), (2, 1, 1), (1, 2, 1), (2, 2, 1), (1, 1, 2), (2, 1, 2), (1, 2, 2), (2, 2, 2)]
            .iter()
            .map(|&(x, y, z)| (x + 4 * y + 16 * z) as u16)
            .collect();
        assert_eq!(c.data(), expected.as_slice());
        assert!(matches!(
            crop(&g, Region::new([3, 0, 0], [2, 1, 1])),
            Err(VolumeError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn patch_counts() {
        assert_eq!(window_origins(100, 40, 20).len(), 4);
        let lr = VoxelGrid::filled([40, 40, 40], 4.0, BitDepth::U8, 7).unwrap();
        let hr = VoxelGrid::filled([160, 160, 160], 1.0, BitDepth::U8, 7).unwrap();
        let set = extract_paired_patches(&lr, &hr, [40; 3], [20; 3], 4).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.lr_patches[0], lr);
        assert_eq!(set.hr_patches[0], hr);
        assert!(set.paired);
    }

    #[test]
    fn patch_count_hundred_cube() {
        // counting only; tiny voxel values keep this cheap
        let lr = VoxelGrid::filled([100, 100, 100], 4.0, BitDepth::U8, 0).unwrap();
        let hr = VoxelGrid::filled([400, 400, 400], 1.0, BitDepth::U8, 0).unwrap();
        let set = extract_paired_patches(&lr, &hr, [40; 3], [20; 3], 4).unwrap();
        assert_eq!(set.len(), 64);
        assert_eq!(set.hr_patches[0].dims(), [160; 3]);
    }

    #[test]
    fn paired_patch_dimension_mismatch() {
        let lr = VoxelGrid::filled([10, 10, 10], 4.0, BitDepth::U8, 0).unwrap();
        let hr = VoxelGrid::filled([39, 40, 40], 1.0, BitDepth::U8, 0).unwrap();
        assert!(extract_paired_patches(&lr, &hr, [5; 3], [5; 3], 4).is_err());
    }

    #[test]
    fn hr_patches_are_crops_at_scaled_origin() {
        let lr = random_grid([9, 7, 6], 3);
        let hr = random_grid([27, 21, 18], 4);
        let set = extract_paired_patches(&lr, &hr, [4, 3, 2], [2, 2, 3], 3).unwrap();
        let mut k = 0;
        for z in window_origins(6, 2, 3) {
            for y in window_origins(7, 3, 2) {
                for x in window_origins(9, 4, 2) {
                    let want = crop(&hr, Region::new([3 * x, 3 * y, 3 * z], [12, 9, 6])).unwrap();
                    assert_eq!(set.hr_patches[k], want);
                    k += 1;
                }
            }
        }
        assert_eq!(k, set.len());
    }

    #[test]
    fn resample_constants_and_identity() {
        let g = VoxelGrid::filled([5, 6, 7], 1.0, BitDepth::U8, 100).unwrap();
        for m in [ResampleMethod::Trilinear, ResampleMethod::BicubicPerSlice, ResampleMethod::Nearest] {
            for f in [0.5, 1.0, 2.0, 3.0] {
                assert!(resample(&g, f, m).unwrap().data().iter().all(|&v| v == 100));
            }
        }
        let r = random_grid([5, 6, 7], 9);
        assert_eq!(resample(&r, 1.0, ResampleMethod::Trilinear).unwrap(), r);
    }

    #[test]
    fn linear_ramp_doubling_is_symmetric_about_fifty() {
        let g = VoxelGrid::new([2, 1, 1], 1.0, BitDepth::U8, vec![0, 100]).unwrap();
        let up = resample(&g, 2.0, ResampleMethod::Trilinear).unwrap();
        // half-pixel sample positions -0.25, 0.25, 0.75, 1.25
        assert_eq!(up.data(), &[0, 25, 75, 100]);
        assert_eq!((up.data()[1] + up.data()[2]) / 2, 50);
    }

    #[test]
    fn resample_errors() {
        let g = VoxelGrid::filled([4, 4, 4], 1.0, BitDepth::U8, 1).unwrap();
        assert!(matches!(resample(&g, 0.0, ResampleMethod::Trilinear), Err(VolumeError::InvalidFactor(_))));
        assert!(matches!(resample(&g, -1.0, ResampleMethod::Nearest), Err(VolumeError::InvalidFactor(_))));
        assert!(matches!(resample(&g, 0.01, ResampleMethod::Trilinear), Err(VolumeError::EmptyOutput(_))));
    }

    #[test]
    fn reslice_axis_order() {
        let meta_only = VoxelGrid::filled([38, 38, 51], 1.0, BitDepth::U8, 0).unwrap();
        let xy = reslice(&meta_only, Plane::XY).unwrap();
        assert_eq!(xy.len(), 51);
        assert_eq!(xy[0].dims(), [38, 38, 1]);
        let xz = reslice(&meta_only, Plane::XZ).unwrap();
        assert_eq!(xz.len(), 38);
        assert_eq!(xz[0].dims(), [38, 51, 1]);
    }

    #[test]
    fn stack_rejects_inconsistent_slices() {
        let a = VoxelGrid::filled([3, 3, 1], 1.0, BitDepth::U8, 0).unwrap();
        let b = VoxelGrid::filled([3, 2, 1], 1.0, BitDepth::U8, 0).unwrap();
        assert!(matches!(
            stack(&[a, b], Plane::XY),
            Err(VolumeError::InconsistentSlices { index: 1, .. })
        ));
    }

    #[test]
    fn xz_slice_contents() {
        let g = random_grid([5, 4, 3], 11);
        let xz = reslice(&g, Plane::XZ).unwrap();
        for y in 0..4 {
            for z in 0..3 {
                for x in 0..5 {
                    assert_eq!(xz[y].get(x, z, 0), g.get(x, y, z));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn reslice_stack_round_trip(nx in 1usize..6, ny in 1usize..6, nz in 1usize..6, seed in 0u64..1000) {
            let g = random_grid([nx, ny, nz], seed);
            for plane in [Plane::XY, Plane::XZ] {
                let back = stack(&reslice(&g, plane).unwrap(), plane).unwrap();
                prop_assert_eq!(&back, &g);
            }
        }

        #[test]
        fn crop_pad_round_trip(nx in 1usize..5, ny in 1usize..5, nz in 1usize..5,
                               b in proptest::array::uniform3(0usize..3),
                               a in proptest::array::uniform3(0usize..3), seed in 0u64..1000) {
            let g = random_grid([nx, ny, nz], seed);
            let p = pad(&g, b, a, 9).unwrap();
            prop_assert_eq!(crop(&p, Region::new(b, g.dims())).unwrap(), g);
        }

        #[test]
        fn raw_round_trip(nx in 1usize..6, ny in 1usize..6, nz in 1usize..4, seed in 0u64..1000, wide in any::<bool>()) {
            let dir = tempfile::tempdir().unwrap();
            let raw = dir.path().join("g.raw");
            let meta = dir.path().join("g.meta");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let depth = if wide { BitDepth::U16 } else { BitDepth::U8 };
            let n = nx * ny * nz;
            let g = VoxelGrid::new([nx, ny, nz], 0.5 + seed as f64, depth,
                (0..n).map(|_| rng.random_range(0..=depth.max_value())).collect()).unwrap();
            save_raw(&g, &raw, &meta).unwrap();
            prop_assert_eq!(load_raw(&raw, &meta).unwrap(), g);
        }

        #[test]
        fn resample_stays_within_input_bounds(seed in 0u64..1000, f in 0.3f64..3.5) {
            let g = random_grid([6, 5, 4], seed);
            let lo = *g.data().iter().min().unwrap();
            let hi = *g.data().iter().max().unwrap();
            for m in [ResampleMethod::Trilinear, ResampleMethod::Nearest] {
                let r = resample(&g, f, m).unwrap();
                prop_assert!(r.data().iter().all(|&v| v >= lo && v <= hi));
            }
        }
    }
}
