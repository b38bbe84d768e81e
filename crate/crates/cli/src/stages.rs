//! Pipeline stages. Each reads its inputs from the workspace, writes its
//! outputs atomically and fails with context on any missing artifact.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::{anyhow, bail, Context, Result};
use rocksr_core::metrics::{psnr, ssim, SsimParams};
use rocksr_core::micp::{partition_porosity, thomeer_eval, thomeer_fit, FitOptions, ResidualWeighting, ThomeerSystem};
use rocksr_core::neural::{
    train_cincgan, train_edsr, CincganSetup, DiscriminatorConfig, EdsrConfig, GeneratorConfig, TrainSchedule,
};
use rocksr_core::pnm::{
    absolute_permeability, default_pc_steps, distance_transform, drainage_simulate, extract_network, formation_factor,
    pore_size_distribution, relative_permeability, DrainageOptions, ExtractOptions, FluidPair, PoreNetwork,
};
use rocksr_core::porosity::{dykstra_parsons, local_porosity_map, porosity_summary, BlockPorosity, PorosityMap};
use rocksr_core::prep::{histogram, histogram_match, normalize_u16_to_u8};
use rocksr_core::reconstruct::{boundary_artifact_report, seam_csv, sr_reconstruct_tiled, TileOptions, Upsampler};
use rocksr_core::segment::{select_optimal_thresholds, threshold_sweep, LabelGrid, ThresholdConfig, ThresholdPair};
use rocksr_core::synth::{area_downsample, promote_u16, sphere_pack, synthetic_micp, SpherePackConfig};
use rocksr_core::volume::{crop, extract_paired_patches, extract_patches, reslice, Plane, Region};
use rocksr_core::{EdsrNet, Generator, MicpCurve, ThomeerModel, VoxelGrid};

use crate::config::Config;
use crate::workspace::Workspace;

pub const METHODS: [&str; 4] = ["trilinear", "bicubic", "edsr", "cincgan"];

const SEED_SYNTH: u64 = 0;
const SEED_HR_NOISE: u64 = 1;
const SEED_LR_NOISE: u64 = 2;
const SEED_EDSR: u64 = 10;
const SEED_EDSR2D: u64 = 20;
const SEED_CINCGAN: u64 = 21;
const SEED_SEGMENT: u64 = 30;
const SEED_THOMEER: u64 = 40;

pub struct Ctx<'a> {
    pub ws: &'a Workspace,
    pub cfg: &'a Config,
}

impl Ctx<'_> {
    fn seed(&self, offset: u64) -> u64 {
        (self.cfg.int("run", "seed") as u64).wrapping_add(offset)
    }

    fn methods(&self) -> Result<Vec<String>> {
        let m = self.cfg.str_list("reconstruct", "methods");
        if let Some(bad) = m.iter().find(|m| !METHODS.contains(&m.as_str())) {
            bail!("[reconstruct] methods: unknown method '{bad}'");
        }
        Ok(m)
    }

    /// `hr` plus every configured method whose reconstruction exists.
    fn volumes(&self) -> Result<Vec<String>> {
        let mut v = vec!["hr".to_string()];
        for m in self.methods()? {
            if self.ws.has_grid(&format!("sr/{m}")) {
                v.push(m);
            }
        }
        Ok(v)
    }

    fn deltas(&self) -> Vec<i32> {
        self.cfg.int_list("segment", "sweep").into_iter().map(|d| d as i32).collect()
    }
}

fn volume_stem(v: &str) -> String {
    if v == "hr" {
        "norm/hr".into()
    } else {
        format!("sr/{v}")
    }
}

/// Name of one segmentation run, e.g. `edsr_d-2`.
pub fn run_name(v: &str, delta: i32) -> String {
    format!("{v}_d{delta:+}")
}

/// Rows of a headed CSV as column-name maps.
pub fn read_csv(text: &str) -> Vec<BTreeMap<String, String>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let Some(head) = lines.next() else { return Vec::new() };
    let cols: Vec<&str> = head.split(',').collect();
    lines
        .map(|l| cols.iter().map(|c| c.to_string()).zip(l.split(',').map(str::to_string)).collect())
        .collect()
}

pub fn field<'r>(row: &'r BTreeMap<String, String>, key: &str) -> Result<&'r str> {
    row.get(key).map(String::as_str).ok_or_else(|| anyhow!("missing column '{key}'"))
}

pub fn num(row: &BTreeMap<String, String>, key: &str) -> Result<f64> {
    let v = field(row, key)?;
    v.parse().with_context(|| format!("column '{key}': '{v}' is not a number"))
}

fn stack_patches(ps: &[VoxelGrid]) -> Result<VoxelGrid> {
    let first = ps.first().ok_or_else(|| anyhow!("no patches could be extracted; reduce the patch size"))?;
    let d = first.dims();
    let data: Vec<u16> = ps.iter().flat_map(|p| p.data().iter().copied()).collect();
    Ok(VoxelGrid::new([d[0], d[1], d[2] * ps.len()], first.voxel_size(), first.depth(), data)?)
}

fn unstack_patches(grid: &VoxelGrid, depth: usize) -> Result<Vec<VoxelGrid>> {
    let d = grid.dims();
    if depth == 0 || d[2] % depth != 0 {
        bail!("stacked patch volume depth {} is not a multiple of {depth}", d[2]);
    }
    (0..d[2] / depth)
        .map(|i| Ok(crop(grid, Region::new([0, 0, i * depth], [d[0], d[1], depth]))?))
        .collect()
}

fn load_patch_set(ctx: &Ctx, name: &str) -> Result<Vec<VoxelGrid>> {
    let index = read_csv(&ctx.ws.read_text("patches/index.csv")?);
    let row = index
        .iter()
        .find(|r| r.get("set").map(String::as_str) == Some(name))
        .ok_or_else(|| anyhow!("patches/index.csv has no '{name}' set"))?;
    let depth = num(row, "dz")? as usize;
    unstack_patches(&ctx.ws.load_grid(&format!("patches/{name}"))?, depth)
}

fn save_bytes<F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>>(ctx: &Ctx, rel: &str, f: F) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    ctx.ws.write(rel, &buf)
}

// ---------------------------------------------------------------------------

pub fn synth(ctx: &Ctx) -> Result<()> {
    let c = ctx.cfg;
    let n = c.usize("synth", "dims")?;
    let scale = c.usize("synth", "scale")?;
    if scale == 0 || n % scale != 0 {
        bail!("[synth] dims {n} must be a multiple of scale {scale}");
    }
    let rock = sphere_pack(&SpherePackConfig {
        dims: [n; 3],
        voxel_size: c.float("synth", "voxel_size"),
        target_porosity: c.float("synth", "porosity"),
        radius_min: c.float("synth", "radius_min"),
        radius_max: c.float("synth", "radius_max"),
        blur_sigma: c.float("synth", "blur_sigma"),
        seed: ctx.seed(SEED_SYNTH),
        ..Default::default()
    })?;
    let hr = promote_u16(&rock.grid, c.float("synth", "hr_noise"), ctx.seed(SEED_HR_NOISE))?;
    let lr = area_downsample(&hr, scale, c.float("synth", "lr_noise") * 257.0, ctx.seed(SEED_LR_NOISE))?;
    ctx.ws.save_grid("input/hr16", &hr)?;
    ctx.ws.save_grid("input/lr16", &lr)?;
    ctx.ws.write(
        "input/truth.txt",
        format!("macro_porosity={}\nmicro_fraction={}\n", rock.macro_porosity, rock.micro_fraction).as_bytes(),
    )?;
    let model = ThomeerModel::new(vec![ThomeerSystem::new(0.1784, 0.25, 8.0)?, ThomeerSystem::new(0.1097, 0.4, 400.0)?])?;
    let curve = synthetic_micp(&model, 48, 1.0, 6.0e4)?;
    save_bytes(ctx, "input/micp.csv", |b| curve.write_csv(b))
}

pub fn normalize(ctx: &Ctx) -> Result<()> {
    let clip = ctx.cfg.float("normalize", "clip_fraction");
    let mut params = String::from("volume,p_min,p_max,clip_fraction\n");
    for (name, key) in [("hr", "hr"), ("lr", "lr")] {
        let stem = ctx.cfg.str("normalize", key);
        let g = ctx.ws.load_grid(stem).with_context(|| format!("normalize {name}"))?;
        let (n, p) = normalize_u16_to_u8(&g, clip)?;
        ctx.ws.save_grid(&format!("norm/{name}"), &n)?;
        let _ = writeln!(params, "{name},{},{},{}", p.p_min, p.p_max, p.clip_fraction);
    }
    ctx.ws.write("norm/params.csv", params.as_bytes())
}

pub fn patches(ctx: &Ctx) -> Result<()> {
    let c = ctx.cfg;
    let scale = c.usize("patches", "scale")?;
    let lr = ctx.ws.load_grid("norm/lr")?;
    let hr = ctx.ws.load_grid("norm/hr")?;
    let (s3, t3) = (c.usize("patches", "size3d")?, c.usize("patches", "step3d")?);
    let p3 = extract_paired_patches(&lr, &hr, [s3; 3], [t3; 3], scale)?;

    let (s2, t2) = (c.usize("patches", "size2d")?, c.usize("patches", "step2d")?);
    let every = c.usize("patches", "slice_step")?.max(1);
    let mut p2_lr = Vec::new();
    for sl in reslice(&lr, Plane::XY)?.iter().step_by(every) {
        p2_lr.extend(extract_patches(sl, [s2, s2, 1], [t2, t2, 1])?);
    }
    let mut p2_hr = Vec::new();
    for sl in reslice(&hr, Plane::XY)?.iter().step_by(every * scale) {
        p2_hr.extend(extract_patches(sl, [s2 * scale, s2 * scale, 1], [t2 * scale, t2 * scale, 1])?);
    }

    let mut index = String::from("set,count,dx,dy,dz\n");
    for (name, set) in [("p3_lr", &p3.lr_patches), ("p3_hr", &p3.hr_patches), ("p2_lr", &p2_lr), ("p2_hr", &p2_hr)] {
        let stacked = stack_patches(set).with_context(|| format!("patch set {name}"))?;
        ctx.ws.save_grid(&format!("patches/{name}"), &stacked)?;
        let d = set[0].dims();
        let _ = writeln!(index, "{name},{},{},{},{}", set.len(), d[0], d[1], d[2]);
    }
    ctx.ws.write("patches/index.csv", index.as_bytes())
}

fn schedule(ctx: &Ctx, section: &str, epochs_key: &str, seed: u64) -> Result<TrainSchedule> {
    let c = ctx.cfg;
    let max_steps = c.usize(section, "max_steps")?;
    Ok(TrainSchedule {
        initial_lr: c.float(section, "lr"),
        decay_factor: if section == "edsr" { c.float("edsr", "decay_factor") } else { 0.5 },
        decay_period: if section == "edsr" { c.usize("edsr", "decay_period")?.max(1) } else { 20 },
        batch_size: c.usize(section, "batch")?,
        epochs: c.usize(section, epochs_key)?,
        seed,
        max_steps: (max_steps > 0).then_some(max_steps),
        validation_fraction: if section == "edsr" { c.float("edsr", "validation") } else { 0.0 },
    })
}

pub fn train_edsr_stage(ctx: &Ctx) -> Result<()> {
    let c = ctx.cfg;
    let set = rocksr_core::volume::PatchPairSet {
        lr_patches: load_patch_set(ctx, "p3_lr")?,
        hr_patches: load_patch_set(ctx, "p3_hr")?,
        scale: c.usize("patches", "scale")?,
        paired: true,
    };
    let cfg = EdsrConfig {
        dims: 3,
        filters: c.usize("edsr", "filters")?,
        residual_blocks: c.usize("edsr", "blocks")?,
        scale: set.scale,
        kernel: c.usize("edsr", "kernel")?,
        intensity_scale: 255.0,
        zero_init_tail: true,
    };
    let sched = schedule(ctx, "edsr", "epochs", ctx.seed(SEED_EDSR))?;
    let (net, trace): (EdsrNet, _) = train_edsr(&set, &cfg, &sched)?;
    save_bytes(ctx, "tables/edsr_loss.csv", |b| trace.write_csv(b))?;
    let mut ckpt = Vec::new();
    net.save(&mut ckpt)?;
    ctx.ws.write("models/edsr.ckpt", &ckpt)
}

pub fn train_cincgan_stage(ctx: &Ctx) -> Result<()> {
    let c = ctx.cfg;
    let scale = c.usize("patches", "scale")?;
    let cap = c.usize("cincgan", "max_patches")?.max(1);
    let lr: Vec<VoxelGrid> = load_patch_set(ctx, "p2_lr")?.into_iter().take(cap).collect();
    let hr: Vec<VoxelGrid> = load_patch_set(ctx, "p2_hr")?.into_iter().take(cap).collect();

    // 2D EDSR pre-trained on clean pairs made by block-averaging HR slices.
    let clean: Vec<VoxelGrid> = hr.iter().map(|p| area_downsample(p, scale, 0.0, 0)).collect::<Result<_, _>>()?;
    let pairs = rocksr_core::volume::PatchPairSet {
        lr_patches: clean,
        hr_patches: hr.clone(),
        scale,
        paired: true,
    };
    let ecfg = EdsrConfig {
        dims: 2,
        filters: c.usize("cincgan", "edsr_filters")?,
        residual_blocks: c.usize("cincgan", "edsr_blocks")?,
        scale,
        kernel: 3,
        intensity_scale: 255.0,
        zero_init_tail: true,
    };
    let mut esched = schedule(ctx, "cincgan", "edsr_epochs", ctx.seed(SEED_EDSR2D))?;
    esched.validation_fraction = 0.0;
    let (edsr, _): (EdsrNet, _) = train_edsr(&pairs, &ecfg, &esched)?;

    let mut setup = CincganSetup::new(scale);
    setup.generator = GeneratorConfig {
        dims: 2,
        filters: c.usize("cincgan", "filters")?,
        residual_blocks: c.usize("cincgan", "blocks")?,
        kernel: 3,
        intensity_scale: 255.0,
    };
    setup.discriminator = DiscriminatorConfig {
        dims: 2,
        filters: c.usize("cincgan", "disc_filters")?,
        layers: c.usize("cincgan", "disc_layers")?,
        kernel: 3,
        intensity_scale: 255.0,
    };
    setup.stage1 = schedule(ctx, "cincgan", "stage1_epochs", ctx.seed(SEED_CINCGAN))?;
    setup.stage2 = schedule(ctx, "cincgan", "stage2_epochs", ctx.seed(SEED_CINCGAN + 1))?;
    let (nets, trace) = train_cincgan::<f64>(&lr, &hr, Some(&edsr), &setup)?;
    save_bytes(ctx, "tables/cincgan_loss.csv", |b| trace.write_csv(b))?;
    let mut g1 = Vec::new();
    nets.g1.save(&mut g1)?;
    ctx.ws.write("models/cincgan_g1.ckpt", &g1)?;
    let mut e = Vec::new();
    nets.edsr.as_ref().unwrap_or(&edsr).save(&mut e)?;
    ctx.ws.write("models/cincgan_edsr.ckpt", &e)
}

fn load_model<M>(ctx: &Ctx, rel: &str, f: impl FnOnce(&[u8]) -> rocksr_core::neural::Result<M>) -> Result<M> {
    ctx.ws.require(&[rel])?;
    let bytes = std::fs::read(ctx.ws.path(rel))?;
    f(&bytes).with_context(|| format!("loading {rel}"))
}

pub fn reconstruct(ctx: &Ctx) -> Result<()> {
    let c = ctx.cfg;
    let methods = ctx.methods()?;
    let mut need = vec!["norm/lr.raw", "norm/hr.raw"];
    if methods.iter().any(|m| m == "edsr") {
        need.push("models/edsr.ckpt");
    }
    if methods.iter().any(|m| m == "cincgan") {
        need.extend(["models/cincgan_g1.ckpt", "models/cincgan_edsr.ckpt"]);
    }
    ctx.ws.require(&need)?;
    let lr = ctx.ws.load_grid("norm/lr")?;
    let hr = ctx.ws.load_grid("norm/hr")?;
    let scale = c.usize("patches", "scale")?;
    let opts = TileOptions {
        slab_thickness: c.usize("reconstruct", "slab_thickness")?,
        overlap: c.usize("reconstruct", "overlap")?,
    };
    for m in &methods {
        let sr = match m.as_str() {
            "trilinear" => sr_reconstruct_tiled::<f64>(&lr, &Upsampler::Trilinear { scale }, &opts)?,
            "bicubic" => sr_reconstruct_tiled::<f64>(&lr, &Upsampler::Bicubic { scale }, &opts)?,
            "edsr" => {
                let net: EdsrNet = load_model(ctx, "models/edsr.ckpt", |b| EdsrNet::load(b))?;
                sr_reconstruct_tiled(&lr, &Upsampler::Edsr(&net), &opts)?
            }
            _ => {
                let g1: Generator = load_model(ctx, "models/cincgan_g1.ckpt", |b| Generator::load(b))?;
                let edsr: EdsrNet = load_model(ctx, "models/cincgan_edsr.ckpt", |b| EdsrNet::load(b))?;
                sr_reconstruct_tiled(&lr, &Upsampler::CincganChain { g1: &g1, edsr: &edsr }, &opts)?
            }
        };
        if sr.dims() != hr.dims() {
            bail!("{m} reconstruction has dims {:?}, HR has {:?}", sr.dims(), hr.dims());
        }
        let seams = boundary_artifact_report(&sr, opts.slab_thickness, scale)?;
        ctx.ws.write(&format!("tables/seams_{m}.csv"), seam_csv(&seams).as_bytes())?;
        let out = if c.bool("reconstruct", "histogram_match") { histogram_match(&sr, &hr)? } else { sr };
        ctx.ws.save_grid(&format!("sr/{m}"), &out)?;
    }
    Ok(())
}

pub fn metrics(ctx: &Ctx) -> Result<()> {
    let hr = ctx.ws.load_grid("norm/hr")?;
    let lr = ctx.ws.load_grid("norm/lr")?;
    let params = SsimParams {
        window: ctx.cfg.usize("metrics", "ssim_window")?,
        sigma: ctx.cfg.float("metrics", "ssim_sigma"),
        ..Default::default()
    };
    let vols = ctx.volumes()?;
    let mut table = String::from("method,psnr_db,ssim\n");
    let mut hists = vec![("hr".to_string(), histogram(&hr)), ("lr".to_string(), histogram(&lr))];
    for m in vols.iter().skip(1) {
        let sr = ctx.ws.load_grid(&volume_stem(m))?;
        let _ = writeln!(table, "{m},{},{}", psnr(&sr, &hr)?, ssim(&sr, &hr, params)?);
        hists.push((m.clone(), histogram(&sr)));
    }
    ctx.ws.write("tables/metrics.csv", table.as_bytes())?;
    let mut h = String::from("value");
    for (n, _) in &hists {
        let _ = write!(h, ",{n}");
    }
    h.push('\n');
    for v in 0..hists[0].1.bins.len() {
        let _ = write!(h, "{v}");
        for (_, hist) in &hists {
            let _ = write!(h, ",{}", hist.bins.get(v).copied().unwrap_or(0));
        }
        h.push('\n');
    }
    ctx.ws.write("tables/histograms.csv", h.as_bytes())
}

pub fn segment(ctx: &Ctx) -> Result<()> {
    let c = ctx.cfg;
    let hr = ctx.ws.load_grid("norm/hr")?;
    let tcfg = ThresholdConfig {
        n_regions: c.usize("segment", "regions")?,
        half_width: u16::try_from(c.usize("segment", "half_width")?)?,
        seed: ctx.seed(SEED_SEGMENT),
        ..Default::default()
    };
    let (pm, gm, gc) = (c.int("segment", "pore_max"), c.int("segment", "grain_min"), c.float("segment", "grad_cutoff"));
    let base = if pm >= 0 && gm >= 0 && gc > 0.0 {
        ThresholdPair::new(u16::try_from(pm)?, u16::try_from(gm)?, gc)?
    } else {
        let sel = select_optimal_thresholds(&hr, &tcfg)?.thresholds;
        ThresholdPair::new(
            if pm >= 0 { u16::try_from(pm)? } else { sel.pore_max },
            if gm >= 0 { u16::try_from(gm)? } else { sel.grain_min },
            if gc > 0.0 { gc } else { sel.grad_cutoff },
        )?
    };
    let deltas = ctx.deltas();
    let mut table = String::from("volume,delta,pore_max,grain_min,grad_cutoff,pore_fraction\n");
    for v in ctx.volumes()? {
        let grid = if v == "hr" { hr.clone() } else { ctx.ws.load_grid(&volume_stem(&v))? };
        let sweep = threshold_sweep(&grid, &base, &deltas)?;
        for ((thr, labels), d) in sweep.iter().zip(&deltas) {
            let name = run_name(&v, *d);
            let (r, m) = Workspace::raw(&format!("seg/{name}"));
            labels.save(&ctx.ws.ensure_parent(&r)?, &ctx.ws.path(&m))?;
            let _ = writeln!(
                table,
                "{v},{d},{},{},{},{}",
                thr.pore_max,
                thr.grain_min,
                thr.grad_cutoff,
                labels.pore_fraction()
            );
        }
    }
    ctx.ws.write("tables/thresholds.csv", table.as_bytes())
}

struct SegRun {
    volume: String,
    delta: i32,
    thr: ThresholdPair,
}

impl SegRun {
    fn name(&self) -> String {
        run_name(&self.volume, self.delta)
    }
}

fn seg_runs(ctx: &Ctx) -> Result<Vec<SegRun>> {
    read_csv(&ctx.ws.read_text("tables/thresholds.csv")?)
        .iter()
        .map(|r| {
            Ok(SegRun {
                volume: field(r, "volume")?.to_string(),
                delta: num(r, "delta")? as i32,
                thr: ThresholdPair::new(num(r, "pore_max")? as u16, num(r, "grain_min")? as u16, num(r, "grad_cutoff")?)?,
            })
        })
        .collect()
}

fn load_labels(ctx: &Ctx, name: &str) -> Result<LabelGrid> {
    Ok(LabelGrid::from_grid(&ctx.ws.load_grid(&format!("seg/{name}"))?))
}

fn load_pmap(ctx: &Ctx, name: &str) -> Result<PorosityMap> {
    let (r, m) = Workspace::raw(&format!("porosity/{name}"));
    ctx.ws.require(&[&r, &m])?;
    Ok(PorosityMap::load(&ctx.ws.path(&r), &ctx.ws.path(&m))?)
}

pub fn porosity(ctx: &Ctx) -> Result<()> {
    let mut table = String::from("volume,delta,macro,micro,total\n");
    for run in seg_runs(ctx)? {
        let grid = ctx.ws.load_grid(&volume_stem(&run.volume))?;
        let labels = load_labels(ctx, &run.name())?;
        let pmap = local_porosity_map(&grid, &labels, &run.thr)?;
        let (r, m) = Workspace::raw(&format!("porosity/{}", run.name()));
        pmap.save(&ctx.ws.ensure_parent(&r)?, &ctx.ws.path(&m))?;
        let s = porosity_summary(&labels, &pmap)?;
        let _ = writeln!(table, "{},{},{},{},{}", run.volume, run.delta, s.macro_porosity, s.micro_porosity, s.total);
    }
    ctx.ws.write("tables/porosity.csv", table.as_bytes())
}

pub fn dykstra(ctx: &Ctx) -> Result<()> {
    let mode: BlockPorosity = ctx.cfg.str("dykstra", "mode").parse().map_err(|e: String| anyhow!("[dykstra] mode: {e}"))?;
    let sizes: Vec<usize> = ctx
        .cfg
        .int_list("dykstra", "block_sizes")
        .into_iter()
        .map(|b| usize::try_from(b).map_err(|_| anyhow!("[dykstra] block_sizes must be positive")))
        .collect::<Result<_>>()?;
    let mut table = String::from("volume,delta,block_size,blocks,v_dp\n");
    for run in seg_runs(ctx)? {
        let labels = load_labels(ctx, &run.name())?;
        let pmap = load_pmap(ctx, &run.name())?;
        let fits: Vec<usize> = sizes.iter().copied().filter(|&b| b > 0 && labels.dims.iter().all(|&n| b <= n)).collect();
        for p in dykstra_parsons(&labels, &pmap, &fits, mode)? {
            let cell = p.coefficient.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(table, "{},{},{},{},{cell}", run.volume, run.delta, p.block_size, p.blocks);
        }
    }
    ctx.ws.write("tables/dykstra.csv", table.as_bytes())
}

pub fn thomeer(ctx: &Ctx) -> Result<()> {
    let c = ctx.cfg;
    let path = c.str("thomeer", "curve");
    let text = ctx.ws.read_text(path)?;
    let curve = MicpCurve::read_csv(text.as_bytes()).with_context(|| format!("parsing {path}"))?;
    let weighting = match c.str("thomeer", "weighting") {
        "linear" => ResidualWeighting::Linear,
        "log" => ResidualWeighting::LogPressure,
        w => bail!("[thomeer] weighting: unknown '{w}'"),
    };
    let opts = FitOptions {
        starts: c.usize("thomeer", "starts")?.max(1),
        seed: ctx.seed(SEED_THOMEER),
        weighting,
        ..Default::default()
    };
    let systems = c.usize("thomeer", "systems")?;
    let fit = thomeer_fit(&curve, systems, &opts)?;
    save_bytes(ctx, "tables/thomeer.csv", |b| fit.model.write_csv(fit.rms, b))?;
    let mut cmp = String::from("pressure,measured,fitted\n");
    for &(p, b) in curve.points() {
        let _ = writeln!(cmp, "{p},{b},{}", thomeer_eval(&fit.model, p));
    }
    ctx.ws.write("tables/micp_fit.csv", cmp.as_bytes())?;
    if systems == 2 {
        let part = partition_porosity(&fit.model, None)?;
        ctx.ws.write(
            "tables/thomeer_partition.csv",
            format!("macro,micro,total,unassigned\n{},{},{},{}\n", part.macro_porosity, part.micro_porosity, part.total, part.unassigned)
                .as_bytes(),
        )?;
    }
    Ok(())
}

fn load_network(ctx: &Ctx, name: &str) -> Result<PoreNetwork> {
    let rel = format!("pnm/{name}");
    ctx.ws.require(&[&format!("{rel}/pores.csv"), &format!("{rel}/throats.csv"), &format!("{rel}/network.txt")])?;
    PoreNetwork::load(&ctx.ws.path(&rel)).with_context(|| format!("loading network {rel}"))
}

pub fn pnm_extract(ctx: &Ctx) -> Result<()> {
    let opts = ExtractOptions {
        min_prominence: ctx.cfg.float("pnm", "min_prominence"),
    };
    let mut psd = String::from("volume,delta,radius_um,count\n");
    for run in seg_runs(ctx)? {
        let labels = load_labels(ctx, &run.name())?;
        let net = extract_network(&labels, &distance_transform(&labels), &opts)?;
        let dir = format!("pnm/{}", run.name());
        ctx.ws.write(&format!("{dir}/pores.csv"), net.pores_csv().as_bytes())?;
        ctx.ws.write(&format!("{dir}/throats.csv"), net.throats_csv().as_bytes())?;
        ctx.ws.write(&format!("{dir}/network.txt"), net.meta_text().as_bytes())?;
        for (r, n) in pore_size_distribution(&net) {
            let _ = writeln!(psd, "{},{},{r},{n}", run.volume, run.delta);
        }
    }
    ctx.ws.write("tables/psd.csv", psd.as_bytes())
}

fn fluids(ctx: &Ctx) -> Result<FluidPair> {
    let f = FluidPair {
        sigma: ctx.cfg.float("pnm", "sigma"),
        theta: ctx.cfg.float("pnm", "theta"),
        mu_w: ctx.cfg.float("pnm", "mu_w"),
        mu_nw: ctx.cfg.float("pnm", "mu_nw"),
    };
    f.validate()?;
    Ok(f)
}

pub fn pnm_flow(ctx: &Ctx) -> Result<()> {
    let fl = fluids(ctx)?;
    let mut table = String::from("volume,delta,pores,throats,connected,k_um2,k_darcy,formation_factor,conservation_residual\n");
    for run in seg_runs(ctx)? {
        let net = load_network(ctx, &run.name())?;
        let k = absolute_permeability(&net, fl.mu_w)?;
        let ff = formation_factor(&net)?;
        let _ = writeln!(
            table,
            "{},{},{},{},{},{},{},{},{}",
            run.volume,
            run.delta,
            net.pores.len(),
            net.throats.len(),
            k.connected,
            k.um2,
            k.darcy,
            ff.value,
            k.flow.conservation_residual
        );
    }
    ctx.ws.write("tables/pnm_flow.csv", table.as_bytes())
}

pub fn pnm_drainage(ctx: &Ctx) -> Result<()> {
    let fl = fluids(ctx)?;
    let runs = seg_runs(ctx)?;
    let reference = runs
        .iter()
        .find(|r| r.volume == "hr" && r.delta == 0)
        .or_else(|| runs.iter().find(|r| r.volume == "hr"))
        .ok_or_else(|| anyhow!("no HR segmentation in tables/thresholds.csv"))?;
    let steps = default_pc_steps(&load_network(ctx, &reference.name())?, &fl, ctx.cfg.usize("pnm", "pc_points")?);
    let opts = DrainageOptions {
        trapping: ctx.cfg.bool("pnm", "trapping"),
    };
    let beta = ctx.cfg.float("pnm", "corner_factor");
    let mut table = String::from("volume,delta,step,pc_pa,sw,krw,krnw\n");
    for run in &runs {
        let net = load_network(ctx, &run.name())?;
        let states = drainage_simulate(&net, &fl, &steps, &opts)?;
        let kr = relative_permeability(&net, &fl, &states, beta)?;
        for (i, p) in kr.iter().enumerate() {
            let _ = writeln!(table, "{},{},{i},{},{},{},{}", run.volume, run.delta, p.pc, p.sw, p.krw, p.krnw);
        }
    }
    ctx.ws.write("tables/drainage.csv", table.as_bytes())
}
