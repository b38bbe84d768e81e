//! Whole-volume super-resolution: slab tiling, the slice-wise
//! generator/EDSR workflow and seam diagnostics.

use rayon::prelude::*;
use thiserror::Error;

use crate::interp::{resample_separable, Kernel};
use crate::neural::{EdsrNet, Generator, GeneratorKind, Network, NeuralError, Tensor};
use crate::scalar::Scalar;
use crate::volume::{self, crop, reslice, resample_to, stack, Plane, Region, ResampleMethod, VoxelGrid};

#[derive(Debug, Error)]
pub enum ReconstructError {
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("network incompatible with input: {0}")]
    Incompatible(String),
    #[error("seam index {0} out of range")]
    SeamOutOfRange(usize),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Volume(#[from] volume::VolumeError),
}

pub type Result<T> = std::result::Result<T, ReconstructError>;

pub enum Upsampler<'a, T> {
    Trilinear { scale: usize },
    /// Separable Catmull-Rom on all three axes.
    Bicubic { scale: usize },
    /// Volumetric EDSR.
    Edsr(&'a EdsrNet<T>),
    /// Slice-wise clean-up generator and 2D EDSR, see [`cincgan_reconstruct_2d3d`].
    CincganChain { g1: &'a Generator<T>, edsr: &'a EdsrNet<T> },
}

impl<T: Scalar> Upsampler<'_, T> {
    pub fn scale(&self) -> usize {
        match self {
            Upsampler::Trilinear { scale } | Upsampler::Bicubic { scale } => *scale,
            Upsampler::Edsr(n) => n.config().scale,
            Upsampler::CincganChain { edsr, .. } => edsr.config().scale,
        }
    }

    /// LR slices a slab needs beyond its own extent to match the whole-volume result.
    fn support(&self) -> usize {
        match self {
            Upsampler::Trilinear { .. } => 1,
            Upsampler::Bicubic { .. } => 2,
            _ => 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.scale() == 0 {
            return Err(ReconstructError::Invalid("scale must be ≥ 1".into()));
        }
        match self {
            Upsampler::Edsr(n) if n.config().dims != 3 => {
                Err(ReconstructError::Incompatible("slab reconstruction needs a 3D EDSR".into()))
            }
            Upsampler::CincganChain { g1, edsr } => check_chain(g1, edsr),
            _ => Ok(()),
        }
    }
}

fn check_chain<T: Scalar>(g1: &Generator<T>, edsr: &EdsrNet<T>) -> Result<()> {
    if edsr.config().dims != 2 || g1.config().dims != 2 {
        return Err(ReconstructError::Incompatible("slice workflow needs 2D networks".into()));
    }
    if g1.kind() != GeneratorKind::SameSize {
        return Err(ReconstructError::Incompatible("clean-up generator must preserve size".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileOptions {
    /// LR slices per slab.
    pub slab_thickness: usize,
    /// Extra LR slices reconstructed on each side of a slab and trimmed.
    /// Zero reproduces independent sub-volume reconstruction.
    pub overlap: usize,
}

impl Default for TileOptions {
    fn default() -> Self {
        Self {
            slab_thickness: 4,
            overlap: 0,
        }
    }
}

fn scaled(grid: &VoxelGrid, k: Kernel, s: usize) -> Result<VoxelGrid> {
    let d = grid.dims();
    let out = d.map(|n| n * s);
    let v = resample_separable(&grid.to_f64(), d, out, k);
    Ok(VoxelGrid::from_real(out, grid.voxel_size() / s as f64, grid.depth(), &v)?)
}

fn net_apply<T: Scalar, N: Network<T>>(net: &N, grid: &VoxelGrid, voxel_size: f64) -> Result<VoxelGrid> {
    let y = net.forward(&Tensor::<T>::from_grid(grid))?;
    Ok(y.to_grid(voxel_size, grid.depth())?)
}

fn upsample_block<T: Scalar>(up: &Upsampler<'_, T>, block: &VoxelGrid) -> Result<VoxelGrid> {
    let s = up.scale();
    match up {
        Upsampler::Trilinear { .. } => scaled(block, Kernel::Linear, s),
        Upsampler::Bicubic { .. } => scaled(block, Kernel::Cubic, s),
        Upsampler::Edsr(net) => net_apply(*net, block, block.voxel_size() / s as f64),
        Upsampler::CincganChain { g1, edsr } => cincgan_reconstruct_2d3d(block, g1, edsr),
    }
}

/// Splits the LR volume into z slabs, reconstructs each independently
/// (in parallel) and stacks the results.
pub fn sr_reconstruct_tiled<T: Scalar>(lr: &VoxelGrid, up: &Upsampler<'_, T>, opts: &TileOptions) -> Result<VoxelGrid> {
    up.validate()?;
    if opts.slab_thickness == 0 {
        return Err(ReconstructError::Invalid("slab thickness must be ≥ 1".into()));
    }
    if lr.is_empty() {
        return Err(ReconstructError::Invalid("empty input".into()));
    }
    let [nx, ny, nz] = lr.dims();
    let s = up.scale();
    let halo = opts.overlap.max(up.support());
    let starts: Vec<usize> = (0..nz).step_by(opts.slab_thickness).collect();
    let slabs: Vec<VoxelGrid> = starts
        .par_iter()
        .map(|&z0| {
            let z1 = (z0 + opts.slab_thickness).min(nz);
            let (lo, hi) = (z0.saturating_sub(halo), (z1 + halo).min(nz));
            let block = crop(lr, Region::new([0, 0, lo], [nx, ny, hi - lo]))?;
            let out = upsample_block(up, &block)?;
            Ok(crop(&out, Region::new([0, 0, (z0 - lo) * s], [nx * s, ny * s, (z1 - z0) * s]))?)
        })
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(lr.len() * s * s * s);
    for slab in &slabs {
        data.extend_from_slice(slab.data());
    }
    Ok(VoxelGrid::new([nx * s, ny * s, nz * s], lr.voxel_size() / s as f64, lr.depth(), data)?)
}

/// Whole-volume reconstruction without tiling.
pub fn sr_reconstruct<T: Scalar>(lr: &VoxelGrid, up: &Upsampler<'_, T>) -> Result<VoxelGrid> {
    let nz = lr.dims()[2].max(1);
    sr_reconstruct_tiled(
        lr,
        up,
        &TileOptions {
            slab_thickness: nz,
            overlap: 0,
        },
    )
}

/// Three-step slice workflow: XY slices through G1 then EDSR; XZ slices of
/// that stack bicubic-downsampled along x back to LR width; XZ images
/// through EDSR again.
pub fn cincgan_reconstruct_2d3d<T: Scalar>(lr: &VoxelGrid, g1: &Generator<T>, edsr: &EdsrNet<T>) -> Result<VoxelGrid> {
    check_chain(g1, edsr)?;
    let s = edsr.config().scale;
    let [nx, _, nz] = lr.dims();
    let vs = lr.voxel_size() / s as f64;
    let xy = reslice(lr, Plane::XY)?;
    let step1: Vec<VoxelGrid> = xy
        .par_iter()
        .map(|sl| {
            let clean = net_apply(g1, sl, sl.voxel_size())?;
            net_apply(edsr, &clean, vs)
        })
        .collect::<Result<_>>()?;
    let stacked = stack(&step1, Plane::XY)?;
    let xz = reslice(&stacked, Plane::XZ)?;
    let step3: Vec<VoxelGrid> = xz
        .par_iter()
        .map(|sl| {
            let small = resample_to(sl, [nx, nz, 1], ResampleMethod::BicubicPerSlice)?;
            net_apply(edsr, &small, vs)
        })
        .collect::<Result<_>>()?;
    Ok(stack(&step3, Plane::XZ)?.with_voxel_size(vs))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Seam {
    /// The seam lies between SR slices `z` and `z + 1`.
    pub z: usize,
    pub jump: f64,
    /// Mean jump between non-seam slice pairs in the same position of the
    /// upsampling period.
    pub baseline: f64,
    /// `jump / baseline`; infinite for a zero baseline.
    pub ratio: f64,
}

fn slice_jump(sr: &VoxelGrid, z: usize) -> f64 {
    let [nx, ny, _] = sr.dims();
    let a = &sr.data()[z * nx * ny..(z + 1) * nx * ny];
    let b = &sr.data()[(z + 1) * nx * ny..(z + 2) * nx * ny];
    a.iter().zip(b).map(|(&p, &q)| (p as f64 - q as f64).abs()).sum::<f64>() / (nx * ny) as f64
}

/// Mean absolute jump at every slab seam of a tiled reconstruction.
/// Empty for a single slab.
pub fn boundary_artifact_report(sr: &VoxelGrid, slab_thickness: usize, scale: usize) -> Result<Vec<Seam>> {
    if slab_thickness == 0 || scale == 0 {
        return Err(ReconstructError::Invalid("slab thickness and scale must be ≥ 1".into()));
    }
    let nz = sr.dims()[2];
    let period = slab_thickness * scale;
    let seams: Vec<usize> = (1..).map(|k| k * period - 1).take_while(|&z| z + 1 < nz).collect();
    if seams.is_empty() {
        return Ok(Vec::new());
    }
    let phase = scale - 1;
    let reference: Vec<f64> = (0..nz - 1)
        .filter(|&z| z % scale == phase && (z + 1) % period != 0)
        .map(|z| slice_jump(sr, z))
        .collect();
    let baseline = if reference.is_empty() {
        // every candidate pair is a seam; fall back to all pairs
        (0..nz - 1).map(|z| slice_jump(sr, z)).sum::<f64>() / (nz - 1) as f64
    } else {
        reference.iter().sum::<f64>() / reference.len() as f64
    };
    Ok(seams
        .into_iter()
        .map(|z| {
            let jump = slice_jump(sr, z);
            Seam {
                z,
                jump,
                baseline,
                ratio: if baseline > 0.0 { jump / baseline } else { f64::INFINITY },
            }
        })
        .collect())
}

/// Seam jump for an explicit seam index.
pub fn seam_jump(sr: &VoxelGrid, z: usize) -> Result<f64> {
    if z + 1 >= sr.dims()[2] {
        return Err(ReconstructError::SeamOutOfRange(z));
    }
    Ok(slice_jump(sr, z))
}

pub fn seam_csv(seams: &[Seam]) -> String {
    let mut s = String::from("z,jump,baseline,ratio\n");
    for m in seams {
        s.push_str(&format!("{},{:.6},{:.6},{:.6}\n", m.z, m.jump, m.baseline, m.ratio));
    }
    s
}
