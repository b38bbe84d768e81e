//! Training loops for EDSR (paired L1) and the two-stage CinCGAN.

use std::io::{self, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::scalar::Scalar;
use crate::volume::{self, PatchPairSet, ResampleMethod, VoxelGrid};

use super::{
    adam_step, AdamConfig, AdamState, Discriminator, DiscriminatorConfig, EdsrNet, Generator, GeneratorConfig,
    GeneratorKind, Network, NeuralError, Result, Tape, Tensor, Var,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSchedule {
    pub initial_lr: f64,
    /// Learning rate is multiplied by `decay_factor` every `decay_period` epochs.
    pub decay_factor: f64,
    pub decay_period: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    /// Share of the patch set held out for validation.
    pub validation_fraction: f64,
}

impl TrainSchedule {
    /// 1e-4, tenfold decay every 20 epochs, batch 6, 100 epochs.
    pub fn edsr_default() -> Self {
        Self {
            initial_lr: 1e-4,
            decay_factor: 0.1,
            decay_period: 20,
            batch_size: 6,
            epochs: 100,
            seed: 0,
            max_steps: None,
            validation_fraction: 0.2,
        }
    }

    /// 1e-4 halved every 20 epochs, batch 8, 100 epochs (use 50 for stage 2).
    pub fn cincgan_default() -> Self {
        Self {
            initial_lr: 1e-4,
            decay_factor: 0.5,
            decay_period: 20,
            batch_size: 8,
            epochs: 100,
            seed: 0,
            max_steps: None,
            validation_fraction: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0) {
            return Err(NeuralError::Config("learning rate must be positive".into()));
        }
        if self.batch_size < 1 {
            return Err(NeuralError::Config("batch size must be ≥ 1".into()));
        }
        if self.decay_period < 1 || !(self.decay_factor > 0.0) {
            return Err(NeuralError::Config("decay period ≥ 1 and factor > 0 required".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(NeuralError::Config("validation fraction must be in [0,1)".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.initial_lr * self.decay_factor.powi((epoch / self.decay_period) as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    /// 0 is the state before any update.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossTrace {
    pub epochs: Vec<EpochLoss>,
    pub step_losses: Vec<f64>,
}

impl LossTrace {
    pub fn initial_val_loss(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.val_loss)
    }

    pub fn final_val_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.val_loss)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "epoch,train_loss,val_loss")?;
        for e in &self.epochs {
            writeln!(w, "{},{},{}", e.epoch, e.train_loss, e.val_loss)?;
        }
        Ok(())
    }
}

fn grads_of<T: Scalar>(tape: &Tape<T>, vars: &[Var], net: &impl Network<T>) -> Vec<Vec<T>> {
    vars.iter()
        .zip(net.params())
        .map(|(v, p)| tape.grad(*v).map_or_else(|| vec![T::zero(); p.values.len()], <[T]>::to_vec))
        .collect()
}

/// Sums per-sample gradients in sample order and divides by the count.
fn mean_grads<T: Scalar>(per_sample: Vec<Vec<Vec<T>>>) -> Vec<Vec<T>> {
    let n = T::from_usize_lossy(per_sample.len().max(1));
    let mut it = per_sample.into_iter();
    let mut acc = it.next().unwrap_or_default();
    for g in it {
        for (a, b) in acc.iter_mut().zip(g) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
    acc.iter_mut().flatten().for_each(|v| *v /= n);
    acc
}

fn split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_5a11));
    let n_val = ((n as f64 * fraction).round() as usize).min(n.saturating_sub(1));
    let val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    train.sort_unstable();
    (train, val)
}

fn edsr_l1<T: Scalar>(net: &EdsrNet<T>, x: &Tensor<T>, y: &Tensor<T>, tracked: bool) -> Result<(T, Vec<Vec<T>>)> {
    let mut tape = Tape::new();
    let xv = tape.input(x)?;
    let yv = tape.input(y)?;
    let (out, pv) = net.graph(&mut tape, xv, tracked)?;
    let loss = tape.l1(out, yv)?;
    let value = tape.scalar(loss);
    if !tracked {
        return Ok((value, Vec::new()));
    }
    tape.backward(loss)?;
    Ok((value, grads_of(&tape, &pv, net)))
}

fn mean_loss<T: Scalar>(net: &EdsrNet<T>, set: &[(Tensor<T>, Tensor<T>)], idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Ok(f64::NAN);
    }
    let losses: Vec<f64> = idx
        .par_iter()
        .map(|&i| edsr_l1(net, &set[i].0, &set[i].1, false).map(|(l, _)| l.as_f64()))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn check_pairs(patches: &PatchPairSet, scale: usize, dims: usize) -> Result<()> {
    if !patches.paired {
        return Err(NeuralError::Data("EDSR training needs paired patches".into()));
    }
    if patches.is_empty() {
        return Err(NeuralError::Data("empty patch set".into()));
    }
    if patches.scale != scale {
        return Err(NeuralError::Data(format!(
            "patch scale {} does not match network scale {scale}",
            patches.scale
        )));
    }
    for (lr, hr) in patches.lr_patches.iter().zip(&patches.hr_patches) {
        let [x, y, z] = lr.dims();
        let want = if dims == 3 { [x * scale, y * scale, z * scale] } else { [x * scale, y * scale, z] };
        if dims == 2 && z != 1 {
            return Err(NeuralError::Data("2D network given 3D patches".into()));
        }
        if hr.dims() != want {
            return Err(NeuralError::Data(format!("HR patch {:?} does not match LR {:?}", hr.dims(), lr.dims())));
        }
    }
    Ok(())
}

/// Trains a freshly initialised EDSR (seeded by the schedule).
pub fn train_edsr<T: Scalar>(
    patches: &PatchPairSet,
    config: &super::EdsrConfig,
    schedule: &TrainSchedule,
) -> Result<(EdsrNet<T>, LossTrace)> {
    let net = EdsrNet::new(*config, schedule.seed)?;
    train_edsr_from(net, patches, schedule)
}

/// Continues training an existing EDSR with L1 loss.
pub fn train_edsr_from<T: Scalar>(
    mut net: EdsrNet<T>,
    patches: &PatchPairSet,
    schedule: &TrainSchedule,
) -> Result<(EdsrNet<T>, LossTrace)> {
    schedule.validate()?;
    let cfg = *net.config();
    check_pairs(patches, cfg.scale, cfg.dims)?;
    let set: Vec<(Tensor<T>, Tensor<T>)> = patches
        .lr_patches
        .iter()
        .zip(&patches.hr_patches)
        .map(|(l, h)| (Tensor::from_grid(l), Tensor::from_grid(h)))
        .collect();
    let (train, val) = split(set.len(), schedule.validation_fraction, schedule.seed);
    let mut trace = LossTrace::default();
    if schedule.epochs == 0 {
        return Ok((net, trace));
    }
    trace.epochs.push(EpochLoss {
        epoch: 0,
        train_loss: mean_loss(&net, &set, &train)?,
        val_loss: mean_loss(&net, &set, &val)?,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut adam = AdamState::for_params(net.params());
    let max_steps = schedule.max_steps.unwrap_or(usize::MAX);
    let mut steps = 0usize;
    for epoch in 0..schedule.epochs {
        if steps >= max_steps {
            break;
        }
        let lr = T::lit(schedule.lr_at(epoch));
        let mut order = train.clone();
        order.shuffle(&mut rng);
        let mut epoch_losses = Vec::new();
        for batch in order.chunks(schedule.batch_size) {
            if steps >= max_steps {
                break;
            }
            let results: Vec<(T, Vec<Vec<T>>)> = batch
                .par_iter()
                .map(|&i| edsr_l1(&net, &set[i].0, &set[i].1, true))
                .collect::<Result<_>>()?;
            let loss = results.iter().map(|r| r.0.as_f64()).sum::<f64>() / results.len() as f64;
            let grads = mean_grads(results.into_iter().map(|r| r.1).collect());
            adam_step(net.params_mut(), &grads, &mut adam, lr, AdamConfig::default())?;
            epoch_losses.push(loss);
            trace.step_losses.push(loss);
            steps += 1;
        }
        let train_loss = if epoch_losses.is_empty() {
            f64::NAN
        } else {
            epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64
        };
        trace.epochs.push(EpochLoss {
            epoch: epoch + 1,
            train_loss,
            val_loss: mean_loss(&net, &set, &val)?,
        });
    }
    Ok((net, trace))
}

// ---------------------------------------------------------------------------
// CinCGAN

/// Weights of the cycle, identity and TV terms for the X→Y→X (`lambda`) and
/// X→Z→X (`beta`) cycles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CinLossWeights {
    pub lambda: [f64; 3],
    pub beta: [f64; 3],
}

impl Default for CinLossWeights {
    fn default() -> Self {
        Self {
            lambda: [10.0, 5.0, 0.5],
            beta: [10.0, 5.0, 0.5],
        }
    }
}

impl CinLossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.iter().chain(&self.beta).any(|w| !(*w >= 0.0)) {
            return Err(NeuralError::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CinLossParts {
    /// Sum of both generator adversarial terms.
    pub adversarial: f64,
    pub cycle_xy: f64,
    pub identity_xy: f64,
    pub tv_xy: f64,
    pub cycle_xz: f64,
    pub identity_xz: f64,
    pub tv_xz: f64,
}

pub fn cincgan_total_loss(parts: &CinLossParts, weights: &CinLossWeights) -> Result<f64> {
    weights.validate()?;
    let [l1, l2, l3] = weights.lambda;
    let [b1, b2, b3] = weights.beta;
    Ok(parts.adversarial
        + l1 * parts.cycle_xy
        + l2 * parts.identity_xy
        + l3 * parts.tv_xy
        + b1 * parts.cycle_xz
        + b2 * parts.identity_xz
        + b3 * parts.tv_xz)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CincganNets<T> {
    pub g1: Generator<T>,
    pub g2: Generator<T>,
    pub g3: Generator<T>,
    pub d1: Discriminator<T>,
    pub d2: Discriminator<T>,
    pub edsr: Option<EdsrNet<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GanEpoch {
    pub stage: usize,
    pub epoch: usize,
    pub generator_loss: f64,
    pub discriminator_loss: f64,
    pub cycle_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CincganTrace {
    pub epochs: Vec<GanEpoch>,
    /// Per-step records (`epoch` holds the step index).
    pub steps: Vec<GanEpoch>,
}

impl CincganTrace {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "stage,epoch,generator_loss,discriminator_loss,cycle_loss")?;
        for e in &self.epochs {
            writeln!(
                w,
                "{},{},{},{},{}",
                e.stage, e.epoch, e.generator_loss, e.discriminator_loss, e.cycle_loss
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CincganSetup {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub weights: CinLossWeights,
    pub scale: usize,
    pub stage1: TrainSchedule,
    pub stage2: TrainSchedule,
}

impl CincganSetup {
    pub fn new(scale: usize) -> Self {
        let mut stage2 = TrainSchedule::cincgan_default();
        stage2.epochs = 50;
        Self {
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            weights: CinLossWeights::default(),
            scale,
            stage1: TrainSchedule::cincgan_default(),
            stage2,
        }
    }
}

struct StepOut<T> {
    gen_loss: T,
    cycle: T,
    gen_grads: Vec<Vec<Vec<T>>>,
    fake: Tensor<T>,
}

/// Generator objective of one cycle: adversarial + w₀·cycle + w₁·identity +
/// w₂·TV, with image terms on intensities divided by `norm`.
#[allow(clippy::too_many_arguments)]
fn cycle_step<T: Scalar>(
    forward: &[&dyn Network<T>],
    backward_net: &dyn Network<T>,
    disc: &Discriminator<T>,
    x: &Tensor<T>,
    identity_in: &Tensor<T>,
    identity_target: &Tensor<T>,
    w: [f64; 3],
    norm: T,
) -> Result<StepOut<T>> {
    let mut tape = Tape::new();
    let xv = tape.input(x)?;
    let iv = tape.input(identity_in)?;
    let it = tape.input(identity_target)?;
    let fwd_params: Vec<Vec<Var>> = forward
        .iter()
        .map(|n| n.register(&mut tape, true))
        .collect::<Result<_>>()?;
    let back_params = backward_net.register(&mut tape, true)?;
    let disc_params = disc.register(&mut tape, false)?;
    let run = |tape: &mut Tape<T>, mut h: Var| -> Result<Var> {
        for (n, p) in forward.iter().zip(&fwd_params) {
            h = n.graph_with(tape, h, p)?;
        }
        Ok(h)
    };
    let fake = run(&mut tape, xv)?;
    let score = disc.graph_with(&mut tape, fake, &disc_params)?;
    let adv = tape.sq_diff_const(score, T::one());
    let back = backward_net.graph_with(&mut tape, fake, &back_params)?;
    let inv = T::one() / norm;
    let (bn, xn) = (tape.scale(back, inv), tape.scale(xv, inv));
    let cyc = tape.l1(bn, xn)?;
    let fake_n = tape.scale(fake, inv);
    let tv = tape.tv(fake_n);
    let mut terms = vec![(adv, T::one()), (cyc, T::lit(w[0])), (tv, T::lit(w[2]))];
    if w[1] != 0.0 {
        let idv = run(&mut tape, iv)?;
        let (idn, itn) = (tape.scale(idv, inv), tape.scale(it, inv));
        terms.push((tape.l1(idn, itn)?, T::lit(w[1])));
    }
    let total = tape.weighted_sum(&terms)?;
    tape.backward(total)?;
    let mut gen_grads: Vec<Vec<Vec<T>>> = forward
        .iter()
        .zip(&fwd_params)
        .map(|(n, p)| grads_of_dyn(&tape, p, *n))
        .collect();
    gen_grads.push(grads_of_dyn(&tape, &back_params, backward_net));
    Ok(StepOut {
        gen_loss: tape.scalar(total),
        cycle: tape.scalar(cyc),
        gen_grads,
        fake: tape.tensor(fake),
    })
}

fn grads_of_dyn<T: Scalar>(tape: &Tape<T>, vars: &[Var], net: &dyn Network<T>) -> Vec<Vec<T>> {
    vars.iter()
        .zip(net.params())
        .map(|(v, p)| tape.grad(*v).map_or_else(|| vec![T::zero(); p.values.len()], <[T]>::to_vec))
        .collect()
}

/// Least-squares discriminator objective `½(mean (D(real)−1)² + mean D(fake)²)`.
fn disc_step<T: Scalar>(disc: &Discriminator<T>, real: &Tensor<T>, fake: &Tensor<T>) -> Result<(T, Vec<Vec<T>>)> {
    let mut tape = Tape::new();
    let rv = tape.input(real)?;
    let fv = tape.input(fake)?;
    let pv = disc.register(&mut tape, true)?;
    let sr = disc.graph_with(&mut tape, rv, &pv)?;
    let sf = disc.graph_with(&mut tape, fv, &pv)?;
    let lr = tape.sq_diff_const(sr, T::one());
    let lf = tape.sq_diff_const(sf, T::zero());
    let half = T::lit(0.5);
    let loss = tape.weighted_sum(&[(lr, half), (lf, half)])?;
    tape.backward(loss)?;
    Ok((tape.scalar(loss), grads_of(&tape, &pv, disc)))
}

fn bicubic_down(hr: &VoxelGrid, scale: usize) -> Result<VoxelGrid> {
    let [x, y, z] = hr.dims();
    if x % scale != 0 || y % scale != 0 {
        return Err(NeuralError::Data(format!("HR patch {:?} not divisible by {scale}", hr.dims())));
    }
    Ok(volume::resample_to(hr, [x / scale, y / scale, z], ResampleMethod::BicubicPerSlice)?)
}

/// Two-stage CinCGAN training on unpaired LR (`X`) and HR (`Z`) patch sets.
/// The clean LR set `Y` is derived from `Z` by bicubic downsampling.
///
/// Stage 1 trains `G1`/`G2`/`D1` on X→Y→X. Stage 2 chains `G1` with the
/// pretrained EDSR as the X→Z generator and trains it together with `G3` and
/// `D2`. Zero epochs leave every network at its seeded initialisation.
pub fn train_cincgan<T: Scalar>(
    lr_patches: &[VoxelGrid],
    hr_patches: &[VoxelGrid],
    pretrained_edsr: Option<&EdsrNet<T>>,
    setup: &CincganSetup,
) -> Result<(CincganNets<T>, CincganTrace)> {
    setup.weights.validate()?;
    setup.stage1.validate()?;
    setup.stage2.validate()?;
    let s = setup.scale;
    let seed = setup.stage1.seed;
    let gcfg = setup.generator;
    if gcfg.dims != 2 || setup.discriminator.dims != 2 {
        return Err(NeuralError::Config("CinCGAN networks are two-dimensional".into()));
    }
    let mut nets = CincganNets {
        g1: Generator::new(gcfg, GeneratorKind::SameSize, seed.wrapping_add(1))?,
        g2: Generator::new(gcfg, GeneratorKind::SameSize, seed.wrapping_add(2))?,
        g3: Generator::new(gcfg, GeneratorKind::Downscale(s), seed.wrapping_add(3))?,
        d1: Discriminator::new(setup.discriminator, seed.wrapping_add(4))?,
        d2: Discriminator::new(setup.discriminator, seed.wrapping_add(5))?,
        edsr: pretrained_edsr.cloned(),
    };
    if let Some(e) = &nets.edsr {
        if e.config().scale != s || e.config().dims != 2 {
            return Err(NeuralError::Config("pretrained EDSR must be 2D with the CinCGAN scale".into()));
        }
    }
    let mut trace = CincganTrace::default();
    if setup.stage1.epochs == 0 && setup.stage2.epochs == 0 {
        return Ok((nets, trace));
    }
    if lr_patches.is_empty() || hr_patches.is_empty() {
        return Err(NeuralError::Data("empty patch set".into()));
    }
    if setup.stage2.epochs > 0 && nets.edsr.is_none() {
        return Err(NeuralError::Config("stage 2 needs a pretrained EDSR".into()));
    }
    let x: Vec<Tensor<T>> = lr_patches.iter().map(Tensor::from_grid).collect();
    let z: Vec<Tensor<T>> = hr_patches.iter().map(Tensor::from_grid).collect();
    let y: Vec<Tensor<T>> = hr_patches
        .iter()
        .map(|h| bicubic_down(h, s).map(|g| Tensor::from_grid(&g)))
        .collect::<Result<_>>()?;
    if x[0].shape() != y[0].shape() {
        return Err(NeuralError::Data(format!(
            "LR patch {:?} and downsampled HR patch {:?} differ",
            x[0].shape(),
            y[0].shape()
        )));
    }
    let norm = T::lit(gcfg.intensity_scale);

    // stage 1: X → Y → X
    {
        let sched = &setup.stage1;
        let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
        let mut st_g1 = AdamState::for_params(nets.g1.params());
        let mut st_g2 = AdamState::for_params(nets.g2.params());
        let mut st_d1 = AdamState::for_params(nets.d1.params());
        let mut steps = 0usize;
        let max_steps = sched.max_steps.unwrap_or(usize::MAX);
        for epoch in 0..sched.epochs {
            if steps >= max_steps {
                break;
            }
            let lr = T::lit(sched.lr_at(epoch));
            let (bx, by) = epoch_batches(x.len(), y.len(), sched.batch_size, &mut rng);
            let mut acc = Vec::new();
            for (ix, iy) in bx.iter().zip(&by) {
                if steps >= max_steps {
                    break;
                }
                let outs: Vec<StepOut<T>> = ix
                    .par_iter()
                    .zip(iy.par_iter())
                    .map(|(&i, &j)| {
                        cycle_step(&[&nets.g1], &nets.g2, &nets.d1, &x[i], &y[j], &y[j], setup.weights.lambda, norm)
                    })
                    .collect::<Result<_>>()?;
                let d_out: Vec<(T, Vec<Vec<T>>)> = outs
                    .par_iter()
                    .zip(iy.par_iter())
                    .map(|(o, &j)| disc_step(&nets.d1, &y[j], &o.fake))
                    .collect::<Result<_>>()?;
                let rec = record(1, steps, &outs, &d_out);
                let (g1g, g2g) = split_grads2(outs);
                adam_step(nets.g1.params_mut(), &g1g, &mut st_g1, lr, AdamConfig::default())?;
                adam_step(nets.g2.params_mut(), &g2g, &mut st_g2, lr, AdamConfig::default())?;
                let dg = mean_grads(d_out.into_iter().map(|d| d.1).collect());
                adam_step(nets.d1.params_mut(), &dg, &mut st_d1, lr, AdamConfig::default())?;
                trace.steps.push(rec);
                acc.push(rec);
                steps += 1;
            }
            trace.epochs.push(average(1, epoch + 1, &acc));
        }
    }

    // stage 2: X → Z → X with G1 ∘ EDSR as the generator
    if setup.stage2.epochs > 0 {
        let sched = &setup.stage2;
        let mut edsr = nets.edsr.take().expect("checked above");
        let mut rng = ChaCha8Rng::seed_from_u64(sched.seed.wrapping_add(0x2));
        let mut st_g1 = AdamState::for_params(nets.g1.params());
        let mut st_e = AdamState::for_params(edsr.params());
        let mut st_g3 = AdamState::for_params(nets.g3.params());
        let mut st_d2 = AdamState::for_params(nets.d2.params());
        let mut steps = 0usize;
        let max_steps = sched.max_steps.unwrap_or(usize::MAX);
        for epoch in 0..sched.epochs {
            if steps >= max_steps {
                break;
            }
            let lr = T::lit(sched.lr_at(epoch));
            let (bx, bz) = epoch_batches(x.len(), z.len(), sched.batch_size, &mut rng);
            let mut acc = Vec::new();
            for (ix, iz) in bx.iter().zip(&bz) {
                if steps >= max_steps {
                    break;
                }
                // identity term maps the clean LR y through the upscaler only
                let outs: Vec<(StepOut<T>, StepOut<T>)> = ix
                    .par_iter()
                    .zip(iz.par_iter())
                    .map(|(&i, &k)| {
                        let main = cycle_step(
                            &[&nets.g1, &edsr],
                            &nets.g3,
                            &nets.d2,
                            &x[i],
                            &y[k],
                            &z[k],
                            [setup.weights.beta[0], 0.0, setup.weights.beta[2]],
                            norm,
                        )?;
                        let id = identity_step(&edsr, &y[k], &z[k], setup.weights.beta[1], norm)?;
                        Ok((main, id))
                    })
                    .collect::<Result<_>>()?;
                let d_out: Vec<(T, Vec<Vec<T>>)> = outs
                    .par_iter()
                    .zip(iz.par_iter())
                    .map(|(o, &k)| disc_step(&nets.d2, &z[k], &o.0.fake))
                    .collect::<Result<_>>()?;
                let mut mains = Vec::with_capacity(outs.len());
                let mut ids = Vec::with_capacity(outs.len());
                for (mut m, id) in outs {
                    m.gen_loss += id.gen_loss;
                    ids.push(id.gen_grads.into_iter().next().expect("edsr grads"));
                    mains.push(m);
                }
                let rec = record(2, steps, &mains, &d_out);
                let n = mains.len();
                let mut per = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
                for m in mains {
                    for (slot, g) in per.iter_mut().zip(m.gen_grads) {
                        slot.push(g);
                    }
                }
                let [g1s, es, g3s] = per;
                let g1g = mean_grads(g1s);
                let mut eg = mean_grads(es);
                let idg = mean_grads(ids);
                for (a, b) in eg.iter_mut().zip(idg) {
                    a.iter_mut().zip(b).for_each(|(p, q)| *p += q);
                }
                let g3g = mean_grads(g3s);
                adam_step(nets.g1.params_mut(), &g1g, &mut st_g1, lr, AdamConfig::default())?;
                adam_step(edsr.params_mut(), &eg, &mut st_e, lr, AdamConfig::default())?;
                adam_step(nets.g3.params_mut(), &g3g, &mut st_g3, lr, AdamConfig::default())?;
                let dg = mean_grads(d_out.into_iter().map(|d| d.1).collect());
                adam_step(nets.d2.params_mut(), &dg, &mut st_d2, lr, AdamConfig::default())?;
                trace.steps.push(rec);
                acc.push(rec);
                steps += 1;
            }
            trace.epochs.push(average(2, epoch + 1, &acc));
        }
        nets.edsr = Some(edsr);
    }
    Ok((nets, trace))
}

/// `w · |EDSR(y) − z|` on normalised intensities.
fn identity_step<T: Scalar>(
    edsr: &EdsrNet<T>,
    y: &Tensor<T>,
    z: &Tensor<T>,
    w: f64,
    norm: T,
) -> Result<StepOut<T>> {
    let mut tape = Tape::new();
    let yv = tape.input(y)?;
    let zv = tape.input(z)?;
    let (out, pv) = edsr.graph(&mut tape, yv, true)?;
    let inv = T::one() / norm;
    let (a, b) = (tape.scale(out, inv), tape.scale(zv, inv));
    let l = tape.l1(a, b)?;
    let total = tape.weighted_sum(&[(l, T::lit(w))])?;
    tape.backward(total)?;
    Ok(StepOut {
        gen_loss: tape.scalar(total),
        cycle: T::zero(),
        gen_grads: vec![grads_of(&tape, &pv, edsr)],
        fake: Tensor::zeros(vec![1]),
    })
}

fn epoch_batches(
    n_a: usize,
    n_b: usize,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let mut a: Vec<usize> = (0..n_a).collect();
    a.shuffle(rng);
    let mut b: Vec<usize> = (0..n_b).collect();
    b.shuffle(rng);
    let ba: Vec<Vec<usize>> = a.chunks(batch).map(<[usize]>::to_vec).collect();
    let mut bb = Vec::with_capacity(ba.len());
    let mut k = 0;
    for chunk in &ba {
        bb.push(
            (0..chunk.len())
                .map(|_| {
                    let v = b[k % n_b];
                    k += 1;
                    v
                })
                .collect(),
        );
    }
    (ba, bb)
}

fn split_grads2<T: Scalar>(outs: Vec<StepOut<T>>) -> (Vec<Vec<T>>, Vec<Vec<T>>) {
    let mut g1 = Vec::with_capacity(outs.len());
    let mut g2 = Vec::with_capacity(outs.len());
    for o in outs {
        let mut it = o.gen_grads.into_iter();
        g1.push(it.next().expect("forward grads"));
        g2.push(it.next().expect("backward grads"));
    }
    (mean_grads(g1), mean_grads(g2))
}

fn record<T: Scalar>(stage: usize, step: usize, outs: &[StepOut<T>], d: &[(T, Vec<Vec<T>>)]) -> GanEpoch {
    let n = outs.len().max(1) as f64;
    GanEpoch {
        stage,
        epoch: step,
        generator_loss: outs.iter().map(|o| o.gen_loss.as_f64()).sum::<f64>() / n,
        discriminator_loss: d.iter().map(|o| o.0.as_f64()).sum::<f64>() / n,
        cycle_loss: outs.iter().map(|o| o.cycle.as_f64()).sum::<f64>() / n,
    }
}

fn average(stage: usize, epoch: usize, recs: &[GanEpoch]) -> GanEpoch {
    let n = recs.len().max(1) as f64;
    GanEpoch {
        stage,
        epoch,
        generator_loss: recs.iter().map(|r| r.generator_loss).sum::<f64>() / n,
        discriminator_loss: recs.iter().map(|r| r.discriminator_loss).sum::<f64>() / n,
        cycle_loss: recs.iter().map(|r| r.cycle_loss).sum::<f64>() / n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::EdsrConfig;
    use crate::synth;

    fn toy_cfg() -> EdsrConfig {
        EdsrConfig {
            dims: 2,
            filters: 4,
            residual_blocks: 1,
            scale: 4,
            kernel: 3,
            ..EdsrConfig::default()
        }
    }

    fn sched(steps: usize) -> TrainSchedule {
        TrainSchedule {
            initial_lr: 2e-3,
            decay_factor: 1.0,
            decay_period: 1000,
            batch_size: 3,
            epochs: 1000,
            seed: 11,
            max_steps: Some(steps),
            validation_fraction: 0.25,
        }
    }

    #[test]
    fn zero_epochs_returns_initial_net() {
        let p = synth::texture_patch_pairs(4, 32, 4, 2.0, 0).unwrap();
        let s = TrainSchedule { epochs: 0, ..sched(10) };
        let (net, trace) = train_edsr::<f64>(&p, &toy_cfg(), &s).unwrap();
        assert_eq!(net, EdsrNet::new(toy_cfg(), s.seed).unwrap());
        assert!(trace.epochs.is_empty());
    }

    #[test]
    fn training_reduces_validation_loss_and_is_deterministic() {
        let p = synth::texture_patch_pairs(8, 32, 4, 2.0, 0).unwrap();
        let (_, a) = train_edsr::<f64>(&p, &toy_cfg(), &sched(40)).unwrap();
        let (_, b) = train_edsr::<f64>(&p, &toy_cfg(), &sched(40)).unwrap();
        assert_eq!(a, b);
        assert!(a.final_val_loss().unwrap() < a.initial_val_loss().unwrap());
        let mut csv = Vec::new();
        a.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("epoch,train_loss,val_loss\n0,"));
    }

    #[test]
    fn rejects_unpaired_and_empty() {
        let mut p = synth::texture_patch_pairs(2, 32, 4, 2.0, 0).unwrap();
        p.paired = false;
        assert!(matches!(train_edsr::<f64>(&p, &toy_cfg(), &sched(1)), Err(NeuralError::Data(_))));
        let empty = PatchPairSet {
            lr_patches: vec![],
            hr_patches: vec![],
            scale: 4,
            paired: true,
        };
        assert!(train_edsr::<f64>(&empty, &toy_cfg(), &sched(1)).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let ones = CinLossParts {
            adversarial: 1.0,
            cycle_xy: 1.0,
            identity_xy: 1.0,
            tv_xy: 1.0,
            cycle_xz: 1.0,
            identity_xz: 1.0,
            tv_xz: 1.0,
        };
        let unit = CinLossWeights {
            lambda: [1.0; 3],
            beta: [1.0; 3],
        };
        assert_eq!(cincgan_total_loss(&ones, &unit).unwrap(), 7.0);
        let zero = CinLossWeights {
            lambda: [0.0; 3],
            beta: [0.0; 3],
        };
        let parts = CinLossParts {
            adversarial: 0.3,
            ..ones
        };
        assert_eq!(cincgan_total_loss(&parts, &zero).unwrap(), 0.3);
        let neg = CinLossWeights {
            lambda: [1.0, -1.0, 0.0],
            ..unit
        };
        assert!(cincgan_total_loss(&ones, &neg).is_err());
    }

    fn gan_setup(stage1: usize, stage2: usize) -> CincganSetup {
        let mut s = CincganSetup::new(4);
        s.generator = GeneratorConfig {
            filters: 4,
            residual_blocks: 1,
            ..GeneratorConfig::default()
        };
        s.discriminator = DiscriminatorConfig {
            filters: 4,
            ..DiscriminatorConfig::default()
        };
        for (sch, n) in [(&mut s.stage1, stage1), (&mut s.stage2, stage2)] {
            sch.batch_size = 2;
            sch.initial_lr = 1e-3;
            sch.epochs = if n == 0 { 0 } else { 1000 };
            sch.max_steps = Some(n);
            sch.seed = 3;
        }
        s
    }

    fn gan_data() -> (Vec<VoxelGrid>, Vec<VoxelGrid>) {
        let hr = synth::texture_patch_pairs(6, 32, 4, 2.0, 1).unwrap().hr_patches;
        let lr = synth::texture_patch_pairs(6, 32, 4, 2.0, 2)
            .unwrap()
            .lr_patches
            .iter()
            .enumerate()
            .map(|(i, g)| synth::area_downsample(&g.clone(), 1, 12.0, i as u64).unwrap())
            .collect();
        (lr, hr)
    }

    #[test]
    fn cincgan_zero_epochs_and_missing_edsr() {
        let (lr, hr) = gan_data();
        let (nets, trace) = train_cincgan::<f64>(&lr, &hr, None, &gan_setup(0, 0)).unwrap();
        assert!(trace.epochs.is_empty());
        assert_eq!(nets.g1, Generator::new(gan_setup(0, 0).generator, GeneratorKind::SameSize, 4).unwrap());
        assert!(matches!(
            train_cincgan::<f64>(&lr, &hr, None, &gan_setup(1, 1)),
            Err(NeuralError::Config(_))
        ));
    }

    #[test]
    fn cincgan_both_stages_finite_and_deterministic() {
        let (lr, hr) = gan_data();
        let edsr = EdsrNet::<f64>::new(toy_cfg(), 0).unwrap();
        let setup = gan_setup(4, 3);
        let (_, a) = train_cincgan(&lr, &hr, Some(&edsr), &setup).unwrap();
        let (_, b) = train_cincgan(&lr, &hr, Some(&edsr), &setup).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.steps.len(), 7);
        assert!(a
            .steps
            .iter()
            .all(|s| s.generator_loss.is_finite() && s.discriminator_loss.is_finite()));
        assert!(a.steps.iter().any(|s| s.stage == 2));
    }
}
