//! Comparison tables, plots and the artifact schema.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::{bail, Result};

use crate::config::SCHEMA;
use crate::stages::{field, num, read_csv, Ctx};
use crate::svg::{Chart, Series};

type Row = BTreeMap<String, String>;

/// Tables the report draws on; any subset is enough for a partial report.
pub const REPORT_INPUTS: [&str; 9] = [
    "tables/porosity.csv",
    "tables/pnm_flow.csv",
    "tables/drainage.csv",
    "tables/metrics.csv",
    "tables/histograms.csv",
    "tables/dykstra.csv",
    "tables/edsr_loss.csv",
    "tables/cincgan_loss.csv",
    "input/truth.txt",
];

/// Column documentation for every CSV the pipeline emits.
pub const CSV_SCHEMA: &[(&str, &str)] = &[
    ("norm/params.csv", "volume: hr|lr; p_min, p_max: 16-bit clip levels mapped to 0 and 255; clip_fraction: tail fraction"),
    ("patches/index.csv", "set: p3_lr|p3_hr|p2_lr|p2_hr; count: patches stacked along z; dx, dy, dz: patch extent"),
    ("tables/edsr_loss.csv", "epoch (0 = before training); train_loss, val_loss: mean L1 in 8-bit units"),
    ("tables/cincgan_loss.csv", "stage: 1|2; epoch; generator_loss, discriminator_loss, cycle_loss: epoch means"),
    ("tables/seams_<method>.csv", "z: seam between SR slices z and z+1; jump: mean |difference|; baseline: phase-matched non-seam jump; ratio: jump/baseline"),
    ("tables/metrics.csv", "method; psnr_db: PSNR against HR (peak 255); ssim: mean SSIM against HR"),
    ("tables/histograms.csv", "value: 8-bit gray level; one voxel-count column per volume"),
    ("tables/thresholds.csv", "volume; delta: sweep shift; pore_max, grain_min: gray thresholds; grad_cutoff; pore_fraction: macro porosity of the labels"),
    ("tables/porosity.csv", "volume; delta; macro, micro, total: bulk porosity fractions"),
    ("tables/dykstra.csv", "volume; delta; block_size: cube edge in voxels; blocks: count; v_dp: Dykstra-Parsons coefficient (empty when undefined)"),
    ("tables/thomeer.csv", "b_inf: bulk fraction; g: pore geometrical factor; p_d: displacement pressure; rms: fit residual"),
    ("tables/thomeer_partition.csv", "macro, micro: B_inf of the low- and high-P_d systems; total; unassigned: total - macro - micro"),
    ("tables/micp_fit.csv", "pressure; measured, fitted: intrusion fraction"),
    ("tables/psd.csv", "volume; delta; radius_um: inscribed pore radius; count"),
    ("tables/pnm_flow.csv", "volume; delta; pores; throats; connected; k_um2, k_darcy: absolute permeability; formation_factor; conservation_residual"),
    ("tables/drainage.csv", "volume; delta; step: pressure index; pc_pa: capillary pressure; sw: wetting saturation; krw, krnw: relative permeabilities"),
    ("pnm/<run>/pores.csv", "id; x, y, z: centre in voxels; radius_um; volume_um3; inlet, outlet, boundary: 0|1"),
    ("pnm/<run>/throats.csv", "id; pore_i, pore_j; radius_um; length_um; volume_um3"),
    ("report/comparison.csv", "quantity; volume; kind: mean_signed_rel_error|abs_error|value; value; points: samples averaged"),
];

pub fn schema_text() -> String {
    let mut s = String::from("# CSV artifacts\n");
    for (f, d) in CSV_SCHEMA {
        let _ = writeln!(s, "{f}: {d}");
    }
    s.push_str("\n# Config keys (section.key kind default: meaning)\n");
    for k in SCHEMA {
        let _ = writeln!(s, "{}.{} {:?} {}: {}", k.section, k.key, k.kind, k.default, k.doc);
    }
    s
}

fn load(ctx: &Ctx, rel: &str) -> Result<Option<Vec<Row>>> {
    if !ctx.ws.exists(rel) {
        return Ok(None);
    }
    Ok(Some(read_csv(&ctx.ws.read_text(rel)?)))
}

/// Mean of `(sr - ref) / ref` over pairs with a finite, nonzero reference.
fn mean_rel_error(pairs: impl Iterator<Item = (f64, f64)>) -> (f64, usize) {
    let (mut sum, mut n) = (0.0, 0);
    for (sr, r) in pairs {
        if r != 0.0 && r.is_finite() && sr.is_finite() {
            sum += (sr - r) / r;
            n += 1;
        }
    }
    (if n > 0 { sum / n as f64 } else { f64::NAN }, n)
}

struct Comparison {
    csv: String,
    text: String,
}

impl Comparison {
    fn push(&mut self, quantity: &str, volume: &str, kind: &str, value: f64, points: usize) {
        let v = if value.is_finite() { value.to_string() } else { String::new() };
        let _ = writeln!(self.csv, "{quantity},{volume},{kind},{v},{points}");
        let _ = writeln!(self.text, "{quantity:<18} {volume:<10} {kind:<22} {value:>12.6} (n={points})");
    }
}

fn key_of(r: &Row) -> Result<(String, i64)> {
    Ok((field(r, "volume")?.to_string(), num(r, "delta")? as i64))
}

/// Per-volume relative errors of `cols` against the `hr` rows with the same extra key.
fn sweep_errors(cmp: &mut Comparison, rows: &[Row], cols: &[(&str, &str)], extra: Option<&str>) -> Result<()> {
    let mut by: BTreeMap<(String, i64, i64), &Row> = BTreeMap::new();
    for r in rows {
        let (v, d) = key_of(r)?;
        let e = match extra {
            Some(k) => num(r, k)? as i64,
            None => 0,
        };
        by.insert((v, d, e), r);
    }
    let mut vols: Vec<String> = by.keys().map(|k| k.0.clone()).filter(|v| v != "hr").collect();
    vols.dedup();
    for v in vols {
        for (col, label) in cols {
            let mut pairs = Vec::new();
            for ((vv, d, e), r) in &by {
                if *vv != v {
                    continue;
                }
                if let Some(h) = by.get(&("hr".to_string(), *d, *e)) {
                    pairs.push((num(r, col)?, num(h, col)?));
                }
            }
            let (err, n) = mean_rel_error(pairs.into_iter());
            cmp.push(label, &v, "mean_signed_rel_error", err, n);
        }
    }
    Ok(())
}

fn series_by_volume(rows: &[Row], delta: i64, x: &str, y: &str) -> Result<Vec<Series>> {
    let mut map: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in rows {
        let (v, d) = key_of(r)?;
        if d != delta {
            continue;
        }
        let (Ok(xv), Ok(yv)) = (num(r, x), num(r, y)) else { continue };
        if !map.contains_key(&v) {
            order.push(v.clone());
        }
        map.entry(v).or_default().push((xv, yv));
    }
    Ok(order
        .into_iter()
        .map(|v| {
            let points = map.remove(&v).unwrap_or_default();
            Series { name: v, points }
        })
        .collect())
}

fn write_chart(ctx: &Ctx, rel: &str, title: &str, x: &str, y: &str, log_x: bool, series: Vec<Series>) -> Result<()> {
    let chart = Chart {
        title: title.into(),
        x_label: x.into(),
        y_label: y.into(),
        log_x,
        series,
    };
    ctx.ws.write(rel, chart.render().as_bytes())
}

pub fn report(ctx: &Ctx) -> Result<()> {
    let missing: Vec<&str> = REPORT_INPUTS.iter().copied().filter(|r| !ctx.ws.exists(r)).collect();
    if missing.len() == REPORT_INPUTS.len() {
        bail!("missing input artifacts: {}", missing.join(", "));
    }
    let mut cmp = Comparison {
        csv: String::from("quantity,volume,kind,value,points\n"),
        text: String::new(),
    };

    let porosity = load(ctx, "tables/porosity.csv")?;
    if let Some(rows) = &porosity {
        sweep_errors(&mut cmp, rows, &[("macro", "macro_porosity"), ("micro", "micro_porosity"), ("total", "total_porosity")], None)?;
    }
    if let Some(rows) = load(ctx, "tables/pnm_flow.csv")? {
        sweep_errors(&mut cmp, &rows, &[("k_um2", "permeability"), ("formation_factor", "formation_factor")], None)?;
    }
    let drainage = load(ctx, "tables/drainage.csv")?;
    if let Some(rows) = &drainage {
        sweep_errors(&mut cmp, rows, &[("sw", "sw"), ("krw", "krw"), ("krnw", "krnw")], Some("step"))?;
    }
    if let Some(rows) = load(ctx, "tables/metrics.csv")? {
        for r in &rows {
            let m = field(r, "method")?;
            cmp.push("psnr_db", m, "value", num(r, "psnr_db")?, 1);
            cmp.push("ssim", m, "value", num(r, "ssim")?, 1);
        }
    }
    if let (Some(rows), true) = (&porosity, ctx.ws.exists("input/truth.txt")) {
        let truth = ctx
            .ws
            .read_text("input/truth.txt")?
            .lines()
            .find_map(|l| l.strip_prefix("macro_porosity=").and_then(|v| v.trim().parse::<f64>().ok()));
        if let Some(t) = truth {
            for r in rows {
                let (v, d) = key_of(r)?;
                if d == 0 {
                    cmp.push("macro_vs_truth", &v, "abs_error", num(r, "macro")? - t, 1);
                }
            }
        }
    }
    ctx.ws.write("report/comparison.csv", cmp.csv.as_bytes())?;

    if let Some(rows) = load(ctx, "tables/histograms.csv")? {
        let cols: Vec<String> = rows.first().map(|r| r.keys().filter(|k| *k != "value").cloned().collect()).unwrap_or_default();
        let series = cols
            .iter()
            .map(|c| {
                let total: f64 = rows.iter().filter_map(|r| num(r, c).ok()).sum::<f64>().max(1.0);
                Series {
                    name: c.clone(),
                    points: rows.iter().filter_map(|r| Some((num(r, "value").ok()?, num(r, c).ok()? / total))).collect(),
                }
            })
            .collect();
        write_chart(ctx, "report/histograms.svg", "Gray-level histograms", "gray level", "fraction", false, series)?;
    }
    if let Some(rows) = &drainage {
        write_chart(ctx, "report/pc_curves.svg", "Drainage capillary pressure", "Pc (Pa)", "Sw", true, series_by_volume(rows, 0, "pc_pa", "sw")?)?;
        let mut kr = Vec::new();
        for (col, tag) in [("krw", "krw"), ("krnw", "krnw")] {
            for mut s in series_by_volume(rows, 0, "sw", col)? {
                s.name = format!("{} {tag}", s.name);
                kr.push(s);
            }
        }
        write_chart(ctx, "report/kr_curves.svg", "Relative permeability", "Sw", "kr", false, kr)?;
    }
    if let Some(rows) = load(ctx, "tables/dykstra.csv")? {
        write_chart(ctx, "report/dykstra.svg", "Dykstra-Parsons coefficient", "block size (voxels)", "V_DP", false, series_by_volume(&rows, 0, "block_size", "v_dp")?)?;
    }
    let mut loss = Vec::new();
    if let Some(rows) = load(ctx, "tables/edsr_loss.csv")? {
        for col in ["train_loss", "val_loss"] {
            loss.push(Series {
                name: format!("edsr {col}"),
                points: rows.iter().filter_map(|r| Some((num(r, "epoch").ok()?, num(r, col).ok()?))).collect(),
            });
        }
    }
    if let Some(rows) = load(ctx, "tables/cincgan_loss.csv")? {
        for stage in ["1", "2"] {
            loss.push(Series {
                name: format!("cincgan stage {stage} cycle"),
                points: rows
                    .iter()
                    .filter(|r| r.get("stage").map(String::as_str) == Some(stage))
                    .filter_map(|r| Some((num(r, "epoch").ok()?, num(r, "cycle_loss").ok()?)))
                    .collect(),
            });
        }
    }
    if !loss.is_empty() {
        write_chart(ctx, "report/loss.svg", "Training loss", "epoch", "loss", false, loss)?;
    }

    let mut gaps = String::new();
    for m in &missing {
        let _ = writeln!(gaps, "missing {m}");
    }
    ctx.ws.write("report/gaps.txt", gaps.as_bytes())?;
    let mut summary = String::from("quantity           volume     kind                          value\n");
    summary.push_str(&cmp.text);
    if !missing.is_empty() {
        let _ = writeln!(summary, "\npartial report; {} input(s) missing, see gaps.txt", missing.len());
    }
    ctx.ws.write("report/summary.txt", summary.as_bytes())?;
    ctx.ws.write("report/schema.txt", schema_text().as_bytes())
}
