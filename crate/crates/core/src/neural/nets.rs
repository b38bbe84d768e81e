use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;

use super::{init_uniform, NeuralError, Result, Tape, Tensor, Var};

/// Named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: &str, shape: Vec<usize>, values: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Self {
            name: name.to_string(),
            shape,
            values,
        }
    }
}

/// A differentiable network over single-sample `[C, D, H, W]` inputs.
pub trait Network<T: Scalar> {
    fn params(&self) -> &[Param<T>];
    fn params_mut(&mut self) -> &mut [Param<T>];

    /// Builds the forward graph using already-registered parameter leaves,
    /// in declaration order.
    fn graph_with(&self, tape: &mut Tape<T>, x: Var, params: &[Var]) -> Result<Var>;

    fn register(&self, tape: &mut Tape<T>, tracked: bool) -> Result<Vec<Var>> {
        self.params()
            .iter()
            .map(|p| tape.leaf([1, 1, 1, p.values.len()], p.values.clone(), tracked))
            .collect()
    }

    fn graph(&self, tape: &mut Tape<T>, x: Var, tracked: bool) -> Result<(Var, Vec<Var>)> {
        let pv = self.register(tape, tracked)?;
        let y = self.graph_with(tape, x, &pv)?;
        Ok((y, pv))
    }

    fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.input(input)?;
        let (y, _) = self.graph(&mut tape, x, false)?;
        Ok(tape.tensor(y))
    }

    fn zero_params(&mut self) {
        for p in self.params_mut() {
            p.values.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.values.len()).sum()
    }
}

fn kernel_of(dims: usize, k: usize) -> [usize; 3] {
    if dims == 2 {
        [1, k, k]
    } else {
        [k, k, k]
    }
}

fn check_dims(dims: usize, kernel: usize) -> Result<()> {
    if dims != 2 && dims != 3 {
        return Err(NeuralError::Config(format!("dims must be 2 or 3, got {dims}")));
    }
    if kernel % 2 == 0 || kernel == 0 {
        return Err(NeuralError::Config(format!("kernel size must be odd, got {kernel}")));
    }
    Ok(())
}

fn check_input(tape: &Tape<impl Scalar>, x: Var, dims: usize, channels: usize) -> Result<[usize; 4]> {
    let s = tape.shape(x);
    if s[0] != channels {
        return Err(NeuralError::Shape(format!("expected {channels} input channel(s), got {}", s[0])));
    }
    if dims == 2 && s[1] != 1 {
        return Err(NeuralError::Shape(format!("2D network given depth {}", s[1])));
    }
    Ok(s)
}

/// Builder that appends conv parameters in declaration order.
struct ParamBuilder<'a, T> {
    rng: &'a mut ChaCha8Rng,
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamBuilder<'_, T> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: [usize; 3], zero: bool) {
        let kk = k[0] * k[1] * k[2];
        let fan_in = cin * kk;
        let n = cout * cin * kk;
        let w = if zero {
            vec![T::zero(); n]
        } else {
            init_uniform(self.rng, n, fan_in)
        };
        let b = if zero {
            vec![T::zero(); cout]
        } else {
            init_uniform(self.rng, cout, fan_in)
        };
        self.params
            .push(Param::new(&format!("{name}.weight"), vec![cout, cin, k[0], k[1], k[2]], w));
        self.params.push(Param::new(&format!("{name}.bias"), vec![cout], b));
    }
}

fn conv_at<T: Scalar>(tape: &mut Tape<T>, x: Var, pv: &[Var], i: &mut usize, k: [usize; 3]) -> Result<Var> {
    let y = tape.conv(x, pv[*i], pv[*i + 1], k)?;
    *i += 2;
    Ok(y)
}

fn res_blocks<T: Scalar>(
    tape: &mut Tape<T>,
    mut h: Var,
    pv: &[Var],
    i: &mut usize,
    blocks: usize,
    k: [usize; 3],
) -> Result<Var> {
    for _ in 0..blocks {
        let a = conv_at(tape, h, pv, i, k)?;
        let a = tape.relu(a);
        let a = conv_at(tape, a, pv, i, k)?;
        h = tape.add(h, a)?;
    }
    Ok(h)
}

/// Single convolution layer; the smallest network that exercises conv
/// gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub kernel: [usize; 3],
    params: Vec<Param<T>>,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn new(cin: usize, cout: usize, kernel: [usize; 3], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder {
            rng: &mut rng,
            params: Vec::new(),
        };
        b.conv("conv", cin, cout, kernel, false);
        Self {
            kernel,
            params: b.params,
        }
    }
}

impl<T: Scalar> Network<T> for ConvLayer<T> {
    fn params(&self) -> &[Param<T>] {
        &self.params
    }
    fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }
    fn graph_with(&self, tape: &mut Tape<T>, x: Var, pv: &[Var]) -> Result<Var> {
        tape.conv(x, pv[0], pv[1], self.kernel)
    }
}

/// Builds one "same" convolution on the tape.
pub fn conv_layer_graph<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var, kernel: [usize; 3]) -> Result<Var> {
    tape.conv(x, w, b, kernel)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdsrConfig {
    pub dims: usize,
    pub filters: usize,
    pub residual_blocks: usize,
    pub scale: usize,
    pub kernel: usize,
    /// Inputs are divided by this before the body and the body output is
    /// multiplied back, so the network works on roughly unit-range values.
    pub intensity_scale: f64,
    /// Start the tail convolution at zero so the untrained network equals
    /// the trilinear upsampler.
    pub zero_init_tail: bool,
}

impl Default for EdsrConfig {
    fn default() -> Self {
        Self {
            dims: 3,
            filters: 32,
            residual_blocks: 16,
            scale: 4,
            kernel: 3,
            intensity_scale: 255.0,
            zero_init_tail: false,
        }
    }
}

impl EdsrConfig {
    pub fn validate(&self) -> Result<()> {
        check_dims(self.dims, self.kernel)?;
        if self.scale < 1 {
            return Err(NeuralError::Config("scale must be ≥ 1".into()));
        }
        if self.filters < 1 {
            return Err(NeuralError::Config("filters must be ≥ 1".into()));
        }
        if !(self.intensity_scale > 0.0) {
            return Err(NeuralError::Config("intensity_scale must be positive".into()));
        }
        Ok(())
    }

    /// Spatial `[D, H, W]` output extent for an input extent.
    pub fn output_extent(&self, d: usize, h: usize, w: usize) -> [usize; 3] {
        let s = self.scale;
        if self.dims == 3 {
            [d * s, h * s, w * s]
        } else {
            [d, h * s, w * s]
        }
    }

    fn kernel3(&self) -> [usize; 3] {
        kernel_of(self.dims, self.kernel)
    }
}

/// EDSR with a trilinear feature upsampler and a global trilinear input skip.
#[derive(Debug, Clone, PartialEq)]
pub struct EdsrNet<T> {
    config: EdsrConfig,
    params: Vec<Param<T>>,
}

impl<T: Scalar> EdsrNet<T> {
    pub fn new(config: EdsrConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder {
            rng: &mut rng,
            params: Vec::new(),
        };
        let k = config.kernel3();
        let f = config.filters;
        b.conv("head", 1, f, k, false);
        for i in 0..config.residual_blocks {
            b.conv(&format!("block{i}.conv1"), f, f, k, false);
            b.conv(&format!("block{i}.conv2"), f, f, k, false);
        }
        b.conv("tail", f, 1, k, config.zero_init_tail);
        Ok(Self {
            config,
            params: b.params,
        })
    }

    pub fn zeros(config: EdsrConfig) -> Result<Self> {
        let mut n = Self::new(config, 0)?;
        n.zero_params();
        Ok(n)
    }

    pub fn config(&self) -> &EdsrConfig {
        &self.config
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let c = &self.config;
        let ints = [c.dims, c.filters, c.residual_blocks, c.scale, c.kernel, c.zero_init_tail as usize];
        write_checkpoint(w, KIND_EDSR, &ints, &[c.intensity_scale], &self.params)
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        let (ints, floats, params) = read_checkpoint::<T, R>(r, KIND_EDSR, 6, 1)?;
        let config = EdsrConfig {
            dims: ints[0],
            filters: ints[1],
            residual_blocks: ints[2],
            scale: ints[3],
            kernel: ints[4],
            zero_init_tail: ints[5] != 0,
            intensity_scale: floats[0],
        };
        let mut net = Self::new(config, 0)?;
        adopt(&mut net.params, params)?;
        Ok(net)
    }
}

impl<T: Scalar> Network<T> for EdsrNet<T> {
    fn params(&self) -> &[Param<T>] {
        &self.params
    }
    fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }
    fn graph_with(&self, tape: &mut Tape<T>, x: Var, pv: &[Var]) -> Result<Var> {
        let c = &self.config;
        let s = check_input(tape, x, c.dims, 1)?;
        let out = c.output_extent(s[1], s[2], s[3]);
        let k = c.kernel3();
        let mut i = 0;
        let xn = tape.scale(x, T::one() / T::lit(c.intensity_scale));
        let h = conv_at(tape, xn, pv, &mut i, k)?;
        let r = res_blocks(tape, h, pv, &mut i, c.residual_blocks, k)?;
        let f = if c.residual_blocks > 0 { tape.add(r, h)? } else { r };
        let u = tape.upsample(f, out);
        let t = conv_at(tape, u, pv, &mut i, k)?;
        let t = tape.scale(t, T::lit(c.intensity_scale));
        let skip = tape.upsample(x, out);
        tape.add(skip, t)
    }
}

/// Forward pass of an EDSR network on one input.
pub fn edsr_forward<T: Scalar>(net: &EdsrNet<T>, lr_input: &Tensor<T>) -> Result<Tensor<T>> {
    net.forward(lr_input)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorConfig {
    pub dims: usize,
    pub filters: usize,
    pub residual_blocks: usize,
    pub kernel: usize,
    pub intensity_scale: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            dims: 2,
            filters: 32,
            residual_blocks: 4,
            kernel: 3,
            intensity_scale: 255.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorKind {
    /// Same-size image translation (`G1`, `G2`).
    SameSize,
    /// Reduces the in-plane extent by the factor (`G3`, high → low resolution).
    Downscale(usize),
}

/// Residual image-to-image generator with a global skip; all-zero weights
/// give the identity (or plain area downsampling for [`GeneratorKind::Downscale`]).
#[derive(Debug, Clone, PartialEq)]
pub struct Generator<T> {
    config: GeneratorConfig,
    kind: GeneratorKind,
    params: Vec<Param<T>>,
}

impl<T: Scalar> Generator<T> {
    pub fn new(config: GeneratorConfig, kind: GeneratorKind, seed: u64) -> Result<Self> {
        check_dims(config.dims, config.kernel)?;
        if config.filters < 1 {
            return Err(NeuralError::Config("filters must be ≥ 1".into()));
        }
        if let GeneratorKind::Downscale(0) = kind {
            return Err(NeuralError::Config("downscale factor must be ≥ 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder {
            rng: &mut rng,
            params: Vec::new(),
        };
        let k = kernel_of(config.dims, config.kernel);
        let f = config.filters;
        b.conv("head", 1, f, k, false);
        for i in 0..config.residual_blocks {
            b.conv(&format!("block{i}.conv1"), f, f, k, false);
            b.conv(&format!("block{i}.conv2"), f, f, k, false);
        }
        b.conv("tail", f, 1, k, false);
        Ok(Self {
            config,
            kind,
            params: b.params,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn kind(&self) -> GeneratorKind {
        self.kind
    }

    fn pool(&self) -> [usize; 3] {
        match self.kind {
            GeneratorKind::SameSize => [1, 1, 1],
            GeneratorKind::Downscale(s) if self.config.dims == 2 => [1, s, s],
            GeneratorKind::Downscale(s) => [s, s, s],
        }
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let c = &self.config;
        let factor = match self.kind {
            GeneratorKind::SameSize => 0,
            GeneratorKind::Downscale(s) => s,
        };
        let ints = [c.dims, c.filters, c.residual_blocks, c.kernel, factor];
        write_checkpoint(w, KIND_GENERATOR, &ints, &[c.intensity_scale], &self.params)
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        let (ints, floats, params) = read_checkpoint::<T, R>(r, KIND_GENERATOR, 5, 1)?;
        let config = GeneratorConfig {
            dims: ints[0],
            filters: ints[1],
            residual_blocks: ints[2],
            kernel: ints[3],
            intensity_scale: floats[0],
        };
        let kind = if ints[4] == 0 {
            GeneratorKind::SameSize
        } else {
            GeneratorKind::Downscale(ints[4])
        };
        let mut net = Self::new(config, kind, 0)?;
        adopt(&mut net.params, params)?;
        Ok(net)
    }
}

impl<T: Scalar> Network<T> for Generator<T> {
    fn params(&self) -> &[Param<T>] {
        &self.params
    }
    fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }
    fn graph_with(&self, tape: &mut Tape<T>, x: Var, pv: &[Var]) -> Result<Var> {
        let c = &self.config;
        check_input(tape, x, c.dims, 1)?;
        let k = kernel_of(c.dims, c.kernel);
        let pool = self.pool();
        let mut i = 0;
        let xn = tape.scale(x, T::one() / T::lit(c.intensity_scale));
        let mut h = conv_at(tape, xn, pv, &mut i, k)?;
        let skip = if pool == [1, 1, 1] {
            x
        } else {
            h = tape.avg_pool(h, pool)?;
            tape.avg_pool(x, pool)?
        };
        let r = res_blocks(tape, h, pv, &mut i, c.residual_blocks, k)?;
        let t = conv_at(tape, r, pv, &mut i, k)?;
        let t = tape.scale(t, T::lit(c.intensity_scale));
        tape.add(skip, t)
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscriminatorConfig {
    pub dims: usize,
    pub filters: usize,
    /// Total number of convolutions (≥ 2).
    pub layers: usize,
    pub kernel: usize,
    pub intensity_scale: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            dims: 2,
            filters: 32,
            layers: 3,
            kernel: 3,
            intensity_scale: 255.0,
        }
    }
}

/// Fully convolutional patch discriminator producing a per-pixel score map.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<T> {
    config: DiscriminatorConfig,
    params: Vec<Param<T>>,
}

const LEAKY_SLOPE: f64 = 0.2;

impl<T: Scalar> Discriminator<T> {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        check_dims(config.dims, config.kernel)?;
        if config.layers < 2 || config.filters < 1 {
            return Err(NeuralError::Config("discriminator needs ≥ 2 layers and ≥ 1 filter".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder {
            rng: &mut rng,
            params: Vec::new(),
        };
        let k = kernel_of(config.dims, config.kernel);
        let f = config.filters;
        for l in 0..config.layers {
            let cin = if l == 0 { 1 } else { f };
            let cout = if l + 1 == config.layers { 1 } else { f };
            b.conv(&format!("conv{l}"), cin, cout, k, false);
        }
        Ok(Self {
            config,
            params: b.params,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let c = &self.config;
        let ints = [c.dims, c.filters, c.layers, c.kernel];
        write_checkpoint(w, KIND_DISCRIMINATOR, &ints, &[c.intensity_scale], &self.params)
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        let (ints, floats, params) = read_checkpoint::<T, R>(r, KIND_DISCRIMINATOR, 4, 1)?;
        let config = DiscriminatorConfig {
            dims: ints[0],
            filters: ints[1],
            layers: ints[2],
            kernel: ints[3],
            intensity_scale: floats[0],
        };
        let mut net = Self::new(config, 0)?;
        adopt(&mut net.params, params)?;
        Ok(net)
    }
}

impl<T: Scalar> Network<T> for Discriminator<T> {
    fn params(&self) -> &[Param<T>] {
        &self.params
    }
    fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }
    fn graph_with(&self, tape: &mut Tape<T>, x: Var, pv: &[Var]) -> Result<Var> {
        let c = &self.config;
        check_input(tape, x, c.dims, 1)?;
        let k = kernel_of(c.dims, c.kernel);
        let mut i = 0;
        let mut h = tape.scale(x, T::one() / T::lit(c.intensity_scale));
        for l in 0..c.layers {
            h = conv_at(tape, h, pv, &mut i, k)?;
            if l + 1 < c.layers {
                h = tape.leaky_relu(h, T::lit(LEAKY_SLOPE));
            }
        }
        Ok(h)
    }
}

// ---------------------------------------------------------------------------
// checkpoints: "RSRN", version, kind, config ints/floats, scalar width, params

const MAGIC: &[u8; 4] = b"RSRN";
const VERSION: u32 = 1;
const KIND_EDSR: u8 = 1;
const KIND_GENERATOR: u8 = 2;
const KIND_DISCRIMINATOR: u8 = 3;

fn write_checkpoint<T: Scalar, W: Write>(
    mut w: W,
    kind: u8,
    ints: &[usize],
    floats: &[f64],
    params: &[Param<T>],
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(kind);
    buf.push(T::BYTES as u8);
    buf.extend_from_slice(&(ints.len() as u32).to_le_bytes());
    for &v in ints {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    buf.extend_from_slice(&(floats.len() as u32).to_le_bytes());
    for &v in floats {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        buf.extend_from_slice(&(p.values.len() as u64).to_le_bytes());
        for &v in &p.values {
            v.write_le(&mut buf);
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(NeuralError::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

type Checkpoint<T> = (Vec<usize>, Vec<f64>, Vec<Vec<T>>);

fn read_checkpoint<T: Scalar, R: Read>(mut r: R, kind: u8, n_ints: usize, n_floats: usize) -> Result<Checkpoint<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(NeuralError::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(NeuralError::Checkpoint(format!("unsupported version {version}")));
    }
    let hdr = c.take(2)?;
    let (k, width) = (hdr[0], hdr[1] as usize);
    if k != kind {
        return Err(NeuralError::Checkpoint(format!("network kind {k}, expected {kind}")));
    }
    if width != T::BYTES {
        return Err(NeuralError::Checkpoint(format!(
            "scalar width {width} bytes, expected {}",
            T::BYTES
        )));
    }
    let ni = c.u32()? as usize;
    if ni != n_ints {
        return Err(NeuralError::Checkpoint("config block size mismatch".into()));
    }
    let ints = (0..ni).map(|_| c.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let nf = c.u32()? as usize;
    if nf != n_floats {
        return Err(NeuralError::Checkpoint("config block size mismatch".into()));
    }
    let floats = (0..nf)
        .map(|_| c.u64().map(f64::from_bits))
        .collect::<Result<Vec<_>>>()?;
    let np = c.u32()? as usize;
    let mut params = Vec::with_capacity(np);
    for _ in 0..np {
        let len = c.u64()? as usize;
        let raw = c.take(len.checked_mul(width).ok_or_else(|| NeuralError::Checkpoint("overflow".into()))?)?;
        params.push(raw.chunks_exact(width).map(T::read_le).collect());
    }
    if c.pos != bytes.len() {
        return Err(NeuralError::Checkpoint("trailing bytes".into()));
    }
    Ok((ints, floats, params))
}

fn adopt<T: Scalar>(dst: &mut [Param<T>], src: Vec<Vec<T>>) -> Result<()> {
    if dst.len() != src.len() {
        return Err(NeuralError::Checkpoint(format!(
            "{} parameter tensors, config implies {}",
            src.len(),
            dst.len()
        )));
    }
    for (d, s) in dst.iter_mut().zip(src) {
        if d.values.len() != s.len() {
            return Err(NeuralError::Checkpoint(format!("parameter `{}` has wrong length", d.name)));
        }
        d.values = s;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{self, BitDepth, ResampleMethod, VoxelGrid};
    use rand::Rng;

    fn toy() -> EdsrConfig {
        EdsrConfig {
            dims: 2,
            filters: 4,
            residual_blocks: 2,
            scale: 4,
            kernel: 3,
            ..EdsrConfig::default()
        }
    }

    #[test]
    fn shape_contract_2d() {
        let net = EdsrNet::<f64>::new(toy(), 1).unwrap();
        let x = Tensor::new(vec![1, 1, 8, 8], vec![100.0; 64]).unwrap();
        assert_eq!(net.forward(&x).unwrap().shape(), &[1, 1, 32, 32]);
        let bad = Tensor::new(vec![1, 2, 8, 8], vec![0.0; 128]).unwrap();
        assert!(net.forward(&bad).is_err());
    }

    #[test]
    fn zero_weights_equal_trilinear() {
        let cfg = EdsrConfig {
            dims: 3,
            filters: 4,
            residual_blocks: 1,
            ..EdsrConfig::default()
        };
        let net = EdsrNet::<f64>::zeros(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = (0..512).map(|_| rng.random_range(0..=255)).collect();
        let grid = VoxelGrid::new([8, 8, 8], 1.0, BitDepth::U8, data).unwrap();
        let out = net.forward(&Tensor::from_grid(&grid)).unwrap();
        let sr = out.to_grid(0.25, BitDepth::U8).unwrap();
        let tri = volume::resample(&grid, 4.0, ResampleMethod::Trilinear).unwrap();
        assert_eq!(sr.data(), tri.data());
    }

    #[test]
    fn identity_kernel_conv() {
        let mut layer = ConvLayer::<f64>::new(1, 1, [1, 1, 1], 0);
        layer.params_mut()[0].values = vec![1.0];
        layer.params_mut()[1].values = vec![0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v: Vec<f64> = (0..30).map(|_| rng.random_range(-5.0..5.0)).collect();
        let x = Tensor::new(vec![1, 2, 3, 5], v.clone()).unwrap();
        assert_eq!(layer.forward(&x).unwrap().values(), &v[..]);
        layer.params_mut()[0].values = vec![-0.5];
        layer.params_mut()[1].values = vec![2.0];
        let y = layer.forward(&x).unwrap();
        for (a, b) in y.values().iter().zip(&v) {
            assert_eq!(*a, -0.5 * b + 2.0);
        }
    }

    #[test]
    fn generators_reduce_to_identity_and_area() {
        let cfg = GeneratorConfig {
            filters: 3,
            residual_blocks: 1,
            ..GeneratorConfig::default()
        };
        let mut g = Generator::<f64>::new(cfg, GeneratorKind::SameSize, 2).unwrap();
        g.zero_params();
        let x = Tensor::new(vec![1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        assert_eq!(g.forward(&x).unwrap(), x);
        let mut g3 = Generator::<f64>::new(cfg, GeneratorKind::Downscale(2), 2).unwrap();
        g3.zero_params();
        let y = g3.forward(&x).unwrap();
        assert_eq!(y.values(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = EdsrNet::<f32>::new(toy(), 4).unwrap();
        let mut bytes = Vec::new();
        net.save(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"RSRN");
        let back = EdsrNet::<f32>::load(bytes.as_slice()).unwrap();
        assert_eq!(back, net);
        assert!(EdsrNet::<f64>::load(bytes.as_slice()).is_err());
        assert!(Generator::<f32>::load(bytes.as_slice()).is_err());

        let d = Discriminator::<f64>::new(DiscriminatorConfig::default(), 1).unwrap();
        let mut bytes = Vec::new();
        d.save(&mut bytes).unwrap();
        assert_eq!(Discriminator::<f64>::load(bytes.as_slice()).unwrap(), d);
    }

    #[test]
    fn init_is_seeded() {
        let a = EdsrNet::<f64>::new(toy(), 7).unwrap();
        let b = EdsrNet::<f64>::new(toy(), 7).unwrap();
        let c = EdsrNet::<f64>::new(toy(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound = 1.0 / 9f64.sqrt();
        assert!(a.params()[0].values.iter().all(|v| v.abs() <= bound));
    }
}
