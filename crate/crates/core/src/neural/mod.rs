//! Minimal deterministic neural core: tensors with reverse-mode gradients,
//! 2D/3D convolutions, residual blocks, a trilinear upsampling layer, the
//! EDSR super-resolution network and the CinCGAN generator/discriminator
//! family, Adam and checkpoints.
//!
//! Activations are `[C, D, H, W]` with `W` fastest, matching the x-fastest
//! voxel layout of [`crate::volume::VoxelGrid`]. Two-dimensional networks use
//! `D = 1` and `1×k×k` kernels.

mod nets;
mod tape;
mod train;

pub use nets::{
    conv_layer_graph, edsr_forward, ConvLayer, Discriminator, DiscriminatorConfig, EdsrConfig, EdsrNet, Generator, GeneratorConfig,
    GeneratorKind, Network, Param,
};
pub use tape::{Tape, Var};
pub use train::{
    cincgan_total_loss, train_cincgan, train_edsr, train_edsr_from, CinLossParts, CincganSetup, CinLossWeights, CincganNets, CincganTrace,
    EpochLoss, GanEpoch, LossTrace, TrainSchedule,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scalar::Scalar;
use crate::volume::{BitDepth, VoxelGrid};

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite gradient in parameter `{param}` at index {index}: {value}")]
    NonFiniteGradient { param: String, index: usize, value: f64 },
    #[error("training data: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Volume(#[from] crate::volume::VolumeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NeuralError>;

/// Dense tensor with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(NeuralError::Shape(format!(
                "shape {shape:?} does not hold {} values",
                values.len()
            )));
        }
        Ok(Self {
            shape,
            values,
            grad: None,
        })
    }

    /// Tensor with a zeroed gradient buffer.
    pub fn tracked(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        let mut t = Self::new(shape, values)?;
        t.grad = Some(vec![T::zero(); t.values.len()]);
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![T::zero(); n],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn is_tracked(&self) -> bool {
        self.grad.is_some()
    }

    /// Copies a gradient into the buffer of a tracked tensor.
    pub fn set_grad(&mut self, g: &[T]) -> Result<()> {
        match &mut self.grad {
            Some(buf) if buf.len() == g.len() => {
                buf.copy_from_slice(g);
                Ok(())
            }
            Some(_) => Err(NeuralError::Shape("gradient length mismatch".into())),
            None => Err(NeuralError::Shape("tensor is not tracked".into())),
        }
    }

    /// Interprets the shape as `[C, D, H, W]`; shorter shapes are padded with
    /// leading ones.
    pub fn shape4(&self) -> Result<[usize; 4]> {
        if self.shape.is_empty() || self.shape.len() > 4 {
            return Err(NeuralError::Shape(format!("rank {} not supported", self.shape.len())));
        }
        let mut s = [1usize; 4];
        s[4 - self.shape.len()..].copy_from_slice(&self.shape);
        Ok(s)
    }

    /// Single-channel tensor `[1, nz, ny, nx]` holding raw intensities.
    pub fn from_grid(grid: &VoxelGrid) -> Self {
        let [nx, ny, nz] = grid.dims();
        Self {
            shape: vec![1, nz, ny, nx],
            values: grid.data().iter().map(|&v| T::from_usize_lossy(v as usize)).collect(),
            grad: None,
        }
    }

    /// Quantizes channel 0 back to a grid.
    pub fn to_grid(&self, voxel_size: f64, depth: BitDepth) -> Result<VoxelGrid> {
        let [_, d, h, w] = self.shape4()?;
        let vals: Vec<f64> = self.values[..d * h * w].iter().map(|v| v.as_f64()).collect();
        Ok(VoxelGrid::from_real([w, h, d], voxel_size, depth, &vals)?)
    }
}

/// Standard bias-corrected Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn for_params(params: &[Param<T>]) -> Self {
        Self {
            m: params.iter().map(|p| vec![T::zero(); p.values.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.values.len()]).collect(),
            t: 0,
        }
    }
}

/// One Adam update over every parameter tensor. Rejects non-finite
/// gradients before touching any state.
pub fn adam_step<T: Scalar>(
    params: &mut [Param<T>],
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    lr: T,
    cfg: AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(NeuralError::Shape("parameter/gradient count mismatch".into()));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.values.len() != g.len() {
            return Err(NeuralError::Shape(format!("gradient for `{}` has wrong length", p.name)));
        }
        if let Some((index, v)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(NeuralError::NonFiniteGradient {
                param: p.name.clone(),
                index,
                value: v.as_f64(),
            });
        }
    }
    state.t += 1;
    let (b1, b2, eps) = (T::lit(cfg.beta1), T::lit(cfg.beta2), T::lit(cfg.eps));
    let t = state.t as i32;
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p.values[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Largest analytic gradient magnitude seen; zero for frozen networks.
    pub max_analytic: f64,
}

/// Relative error with an absolute floor so gradients that vanish on both
/// sides do not blow up the ratio.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compares reverse-mode gradients with central differences (step `1e-5`)
/// on sampled entries of every leaf in `leaves`. `build` maps leaf handles
/// to a scalar loss.
pub fn gradient_check_leaves(
    leaves: &mut [(Vec<usize>, Vec<f64>)],
    build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    samples_per_leaf: usize,
    seed: u64,
) -> Result<GradCheck> {
    let h = 1e-5;
    let eval = |leaves: &[(Vec<usize>, Vec<f64>)], tracked: bool| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let mut vars = Vec::with_capacity(leaves.len());
        for (shape, vals) in leaves.iter() {
            let t = Tensor::new(shape.clone(), vals.clone())?;
            let s4 = t.shape4()?;
            vars.push(tape.leaf(s4, vals.clone(), tracked)?);
        }
        let loss = build(&mut tape, &vars)?;
        Ok((tape, vars, loss))
    };
    let (mut tape, vars, loss) = eval(leaves, true)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(leaves.iter())
        .map(|(v, (_, vals))| tape.grad(*v).map_or(vec![0.0; vals.len()], <[f64]>::to_vec))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheck {
        max_relative_error: 0.0,
        checked: 0,
        max_analytic: 0.0,
    };
    for li in 0..leaves.len() {
        let n = leaves[li].1.len();
        let picks: Vec<usize> = if n <= samples_per_leaf {
            (0..n).collect()
        } else {
            (0..samples_per_leaf).map(|_| rng.random_range(0..n)).collect()
        };
        for i in picks {
            let orig = leaves[li].1[i];
            leaves[li].1[i] = orig + h;
            let (t1, _, l1) = eval(leaves, false)?;
            leaves[li].1[i] = orig - h;
            let (t2, _, l2) = eval(leaves, false)?;
            leaves[li].1[i] = orig;
            let numeric = (t1.scalar(l1) - t2.scalar(l2)) / (2.0 * h);
            let a = analytic[li][i];
            report.max_relative_error = report.max_relative_error.max(rel_err(a, numeric));
            report.max_analytic = report.max_analytic.max(a.abs());
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Gradient check of a network's parameters for `loss(output)`. With
/// `tracked = false` the analytic gradients are zero by construction and
/// only `max_analytic` is meaningful.
pub fn gradient_check<N: Network<f64>>(
    net: &N,
    input: &Tensor<f64>,
    loss: &dyn Fn(&mut Tape<f64>, Var) -> Result<Var>,
    samples_per_param: usize,
    seed: u64,
    tracked: bool,
) -> Result<GradCheck> {
    if !tracked {
        let mut tape = Tape::new();
        let x = tape.input(input)?;
        let (y, pv) = net.graph(&mut tape, x, false)?;
        let l = loss(&mut tape, y)?;
        tape.backward(l)?;
        let max_analytic = pv
            .iter()
            .filter_map(|v| tape.grad(*v))
            .flatten()
            .fold(0.0f64, |m, g| m.max(g.abs()));
        return Ok(GradCheck {
            max_relative_error: 0.0,
            checked: 0,
            max_analytic,
        });
    }
    let mut leaves: Vec<(Vec<usize>, Vec<f64>)> =
        net.params().iter().map(|p| (vec![p.values.len()], p.values.clone())).collect();
    let input = input.clone();
    let build = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let x = tape.input(&input)?;
        let y = net.graph_with(tape, x, vars)?;
        loss(tape, y)
    };
    gradient_check_leaves(&mut leaves, &build, samples_per_param, seed)
}

/// Uniform `±1/√fan_in` initialisation.
pub(crate) fn init_uniform<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = vec![Param::new("w", vec![3], vec![1.0f64, -2.0, 0.5])];
        let mut st = AdamState::for_params(&p);
        adam_step(&mut p, &[vec![0.0; 3]], &mut st, 1e-3, AdamConfig::default()).unwrap();
        assert_eq!(p[0].values, vec![1.0, -2.0, 0.5]);
    }

    /// Hand-run scalar Adam reference.
    fn adam_reference(mut x: f64, g: f64, lr: f64, steps: usize) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=steps {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        x
    }

    #[test]
    fn adam_first_step_and_trace() {
        let mut p = vec![Param::new("w", vec![1], vec![0.3f64])];
        let mut st = AdamState::for_params(&p);
        adam_step(&mut p, &[vec![-4.0]], &mut st, 0.01, AdamConfig::default()).unwrap();
        assert!((p[0].values[0] - (0.3 + 0.01)).abs() < 1e-9);
        adam_step(&mut p, &[vec![-4.0]], &mut st, 0.01, AdamConfig::default()).unwrap();
        assert!((p[0].values[0] - adam_reference(0.3, -4.0, 0.01, 2)).abs() < 1e-12);
    }

    #[test]
    fn adam_rejects_nan() {
        let mut p = vec![Param::new("w", vec![2], vec![0.0f64, 0.0])];
        let mut st = AdamState::for_params(&p);
        let err = adam_step(&mut p, &[vec![0.0, f64::NAN]], &mut st, 0.01, AdamConfig::default()).unwrap_err();
        assert!(matches!(err, NeuralError::NonFiniteGradient { index: 1, .. }));
        assert_eq!(st.t, 0);
    }

    #[test]
    fn tensor_invariants() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::tracked(vec![2], vec![1.0, 2.0]).unwrap();
        assert_eq!(t.grad().unwrap().len(), 2);
        assert!(!Tensor::<f32>::zeros(vec![2]).is_tracked());
        assert_eq!(t.shape4().unwrap(), [1, 1, 1, 2]);
    }

    fn random_input(shape: Vec<usize>, seed: u64, scale: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(0.0..scale)).collect()).unwrap()
    }

    fn l1_to(target: Tensor<f64>) -> impl Fn(&mut Tape<f64>, Var) -> Result<Var> {
        move |tape, y| {
            let t = tape.input(&target)?;
            tape.l1(y, t)
        }
    }

    #[test]
    fn conv_layer_gradient() {
        let net = ConvLayer::<f64>::new(2, 3, [3, 3, 3], 1);
        let x = random_input(vec![2, 3, 4, 5], 2, 1.0);
        let loss = l1_to(random_input(vec![3, 3, 4, 5], 3, 1.0));
        let r = gradient_check(&net, &x, &loss, 40, 0, true).unwrap();
        assert!(r.max_relative_error < 1e-5, "{r:?}");
    }

    #[test]
    fn toy_edsr_gradient() {
        let cfg = EdsrConfig {
            dims: 2,
            filters: 4,
            residual_blocks: 2,
            scale: 2,
            kernel: 3,
            ..EdsrConfig::default()
        };
        let net = EdsrNet::<f64>::new(cfg, 5).unwrap();
        let x = random_input(vec![1, 1, 5, 6], 6, 255.0);
        let loss = l1_to(random_input(vec![1, 1, 10, 12], 7, 255.0));
        let r = gradient_check(&net, &x, &loss, 12, 1, true).unwrap();
        assert!(r.max_relative_error < 1e-4, "{r:?}");
    }

    #[test]
    fn frozen_net_has_zero_gradient() {
        let net = ConvLayer::<f64>::new(1, 1, [1, 3, 3], 1);
        let x = random_input(vec![1, 1, 4, 4], 2, 1.0);
        let loss = l1_to(random_input(vec![1, 1, 4, 4], 3, 1.0));
        let r = gradient_check(&net, &x, &loss, 10, 0, false).unwrap();
        assert_eq!(r.max_analytic, 0.0);
    }

    #[test]
    fn op_gradients() {
        // upsample → TV + LSGAN on a tracked leaf
        let mut leaves = vec![(vec![1, 2, 3, 4], random_input(vec![24], 4, 1.0).values().to_vec())];
        let build = |tape: &mut Tape<f64>, v: &[Var]| {
            let u = tape.upsample(v[0], [4, 6, 8]);
            let t = tape.tv(u);
            let a = tape.sq_diff_const(u, 0.3);
            let p = tape.avg_pool(u, [2, 2, 2])?;
            let l = tape.leaky_relu(p, 0.2);
            let q = tape.sq_diff_const(l, 1.0);
            tape.weighted_sum(&[(t, 1.0), (a, 2.0), (q, 0.5)])
        };
        let r = gradient_check_leaves(&mut leaves, &build, 24, 0).unwrap();
        assert!(r.max_relative_error < 1e-6, "{r:?}");
    }
}
