//! `rocksr` pipeline driver.
//!
//! Every stage is a subcommand operating on a workspace directory:
//!
//! ```text
//! rocksr <stage> --config pipeline.cfg [--workspace ws] [--seed 7]
//! ```
//!
//! `all` runs the synthetic pipeline end to end. After each stage the
//! workspace manifest is rewritten with a SHA-256 checksum for every file
//! and an echo of the resolved configuration; `verify` checks it.

pub mod config;
pub mod report;
pub mod stages;
pub mod svg;
pub mod workspace;

use std::path::PathBuf;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, ValueEnum};
use sha2::{Digest, Sha256};

use config::Config;
use stages::Ctx;
use workspace::{Workspace, MANIFEST, RUN_LOG};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Synth,
    Normalize,
    Patches,
    TrainEdsr,
    TrainCincgan,
    Reconstruct,
    Metrics,
    Segment,
    Porosity,
    Dykstra,
    Thomeer,
    PnmExtract,
    PnmFlow,
    PnmDrainage,
    Report,
    /// Every stage above in order.
    All,
    /// Check the manifest checksums.
    Verify,
}

/// Stage order of `all`.
pub const PIPELINE: [Stage; 15] = [
    Stage::Synth,
    Stage::Normalize,
    Stage::Patches,
    Stage::TrainEdsr,
    Stage::TrainCincgan,
    Stage::Reconstruct,
    Stage::Metrics,
    Stage::Segment,
    Stage::Porosity,
    Stage::Dykstra,
    Stage::Thomeer,
    Stage::PnmExtract,
    Stage::PnmFlow,
    Stage::PnmDrainage,
    Stage::Report,
];

#[derive(Debug, Parser)]
#[command(name = "rocksr", version, about = "Super-resolution and petrophysical validation pipeline for micro-CT rock volumes")]
pub struct Cli {
    pub stage: Stage,
    /// Pipeline configuration (sectioned key = value).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "workspace")]
    pub workspace: PathBuf,
    /// Overrides `[run] seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// With `report`: print the CSV and config schema and exit.
    #[arg(long)]
    pub schema: bool,
}

fn stage_name(s: Stage) -> String {
    s.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default()
}

fn run_stage(stage: Stage, ctx: &Ctx) -> Result<()> {
    match stage {
        Stage::Synth => stages::synth(ctx),
        Stage::Normalize => stages::normalize(ctx),
        Stage::Patches => stages::patches(ctx),
        Stage::TrainEdsr => stages::train_edsr_stage(ctx),
        Stage::TrainCincgan => stages::train_cincgan_stage(ctx),
        Stage::Reconstruct => stages::reconstruct(ctx),
        Stage::Metrics => stages::metrics(ctx),
        Stage::Segment => stages::segment(ctx),
        Stage::Porosity => stages::porosity(ctx),
        Stage::Dykstra => stages::dykstra(ctx),
        Stage::Thomeer => stages::thomeer(ctx),
        Stage::PnmExtract => stages::pnm_extract(ctx),
        Stage::PnmFlow => stages::pnm_flow(ctx),
        Stage::PnmDrainage => stages::pnm_drainage(ctx),
        Stage::Report => report::report(ctx),
        Stage::All | Stage::Verify => unreachable!("handled by run"),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Manifest text: one `file <sha256> <bytes> <path>` line per workspace file
/// (the manifest and run log excepted) followed by `config <line>` echo lines.
pub fn build_manifest(ws: &Workspace, cfg: &Config) -> Result<String> {
    let mut out = String::new();
    for rel in ws.files()? {
        if rel == MANIFEST || rel == RUN_LOG || rel.ends_with(".tmp") {
            continue;
        }
        let bytes = std::fs::read(ws.path(&rel)).with_context(|| format!("reading {rel}"))?;
        out.push_str(&format!("file {} {} {rel}\n", sha256_hex(&bytes), bytes.len()));
    }
    for line in cfg.canonical().lines() {
        out.push_str(&format!("config {line}\n"));
    }
    Ok(out)
}

/// Files listed in the manifest that are missing or whose checksum changed.
pub fn verify_manifest(ws: &Workspace) -> Result<Vec<String>> {
    let text = ws.read_text(MANIFEST)?;
    let mut bad = Vec::new();
    for line in text.lines().filter_map(|l| l.strip_prefix("file ")) {
        let mut parts = line.splitn(3, ' ');
        let (Some(sum), Some(_), Some(rel)) = (parts.next(), parts.next(), parts.next()) else {
            bail!("malformed manifest line: {line}");
        };
        match std::fs::read(ws.path(rel)) {
            Ok(b) if sha256_hex(&b) == sum => {}
            Ok(_) => bad.push(format!("checksum mismatch: {rel}")),
            Err(_) => bad.push(format!("missing: {rel}")),
        }
    }
    Ok(bad)
}

fn load_config(cli: &Cli) -> Result<Config> {
    let path = cli.config.as_ref().ok_or_else(|| anyhow!("--config <file> is required"))?;
    let mut cfg = Config::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.set("run", "seed", &seed.to_string())?;
    }
    Ok(cfg)
}

pub fn run_cli(cli: &Cli) -> Result<()> {
    if cli.schema {
        if cli.stage != Stage::Report {
            bail!("--schema is only valid with the report stage");
        }
        print!("{}", report::schema_text());
        return Ok(());
    }
    let ws = Workspace::new(&cli.workspace)?;
    if cli.stage == Stage::Verify {
        let bad = verify_manifest(&ws)?;
        if !bad.is_empty() {
            bail!("manifest verification failed:\n  {}", bad.join("\n  "));
        }
        println!("manifest ok");
        return Ok(());
    }
    let cfg = load_config(cli)?;
    let ctx = Ctx { ws: &ws, cfg: &cfg };
    let list: Vec<Stage> = if cli.stage == Stage::All { PIPELINE.to_vec() } else { vec![cli.stage] };
    for stage in list {
        let name = stage_name(stage);
        let t0 = Instant::now();
        let res = run_stage(stage, &ctx).with_context(|| format!("stage {name} failed"));
        let status = if res.is_ok() { "ok" } else { "error" };
        ws.append_log(&format!(
            "rocksr {} stage={name} seed={} status={status} elapsed_ms={}",
            env!("CARGO_PKG_VERSION"),
            cfg.int("run", "seed"),
            t0.elapsed().as_millis()
        ))?;
        res?;
        ws.write(MANIFEST, build_manifest(&ws, &cfg)?.as_bytes())?;
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the requested stage.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| anyhow!("{e}"))?;
    run_cli(&cli)
}
