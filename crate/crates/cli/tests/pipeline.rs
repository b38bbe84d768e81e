use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rocksr_cli::{build_manifest, run, verify_manifest};
use rocksr_cli::config::Config;
use rocksr_cli::stages::read_csv;
use rocksr_cli::workspace::Workspace;

const SMALL: &str = "\
[run]
seed = 3
[synth]
dims = 32
radius_min = 3
radius_max = 5
[patches]
size3d = 4
step3d = 4
size2d = 6
step2d = 6
slice_step = 3
[edsr]
filters = 4
blocks = 1
epochs = 1
max_steps = 4
[cincgan]
filters = 4
disc_filters = 4
edsr_filters = 4
edsr_epochs = 1
stage1_epochs = 1
stage2_epochs = 1
max_steps = 2
max_patches = 8
[dykstra]
block_sizes = 4,8,16
[thomeer]
starts = 2
";

struct Fixture {
    _dir: tempfile::TempDir,
    cfg: PathBuf,
    ws: PathBuf,
}

fn rocksr(args: &[&str]) -> anyhow::Result<()> {
    run(std::iter::once("rocksr").chain(args.iter().copied()))
}

fn pipeline(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    let cfg = dir.join("small.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    let ws = dir.join(name);
    rocksr(&["all", "--config", cfg.to_str().unwrap(), "--workspace", ws.to_str().unwrap()]).unwrap();
    (cfg, ws)
}

fn shared() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, ws) = pipeline(dir.path(), "ws");
        Fixture { _dir: dir, cfg, ws }
    })
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for e in std::fs::read_dir(from).unwrap() {
        let p = e.unwrap().path();
        let dst = to.join(p.file_name().unwrap());
        if p.is_dir() {
            copy_dir(&p, &dst);
        } else {
            std::fs::copy(&p, &dst).unwrap();
        }
    }
}

fn comparison(ws: &Path) -> Vec<std::collections::BTreeMap<String, String>> {
    read_csv(&std::fs::read_to_string(ws.join("report/comparison.csv")).unwrap())
}

#[test]
fn synthetic_pipeline_writes_complete_manifest() {
    let f = shared();
    let manifest = std::fs::read_to_string(f.ws.join("manifest.txt")).unwrap();
    for rel in [
        "input/hr16.raw",
        "norm/params.csv",
        "models/edsr.ckpt",
        "models/cincgan_g1.ckpt",
        "sr/edsr.raw",
        "seg/hr_d+0.raw",
        "porosity/cincgan_d-2.raw",
        "pnm/bicubic_d+4/pores.csv",
        "tables/drainage.csv",
        "tables/thomeer_partition.csv",
        "report/comparison.csv",
        "report/kr_curves.svg",
    ] {
        assert!(manifest.lines().any(|l| l.ends_with(&format!(" {rel}"))), "{rel} not in manifest");
    }
    assert!(manifest.contains("config [segment]"));
    assert!(!manifest.contains("run_log.txt"));
    assert!(verify_manifest(&Workspace::new(&f.ws).unwrap()).unwrap().is_empty());
    let log = std::fs::read_to_string(f.ws.join("run_log.txt")).unwrap();
    assert!(log.contains("stage=pnm-drainage seed=3 status=ok"));
}

#[test]
fn macro_porosity_matches_synthetic_truth() {
    let rows = comparison(&shared().ws);
    let truth: Vec<_> = rows.iter().filter(|r| r["quantity"] == "macro_vs_truth").collect();
    assert_eq!(truth.len(), 5);
    for r in truth {
        let e: f64 = r["value"].parse().unwrap();
        assert!(e.abs() < 0.01, "{}: {e}", r["volume"]);
    }
}

#[test]
fn rerun_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ws) = pipeline(dir.path(), "again");
    let a = std::fs::read_to_string(shared().ws.join("manifest.txt")).unwrap();
    let b = std::fs::read_to_string(ws.join("manifest.txt")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn seed_override_changes_artifacts() {
    let f = shared();
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path().join("w");
    let args = ["synth", "--config", f.cfg.to_str().unwrap(), "--workspace", ws.to_str().unwrap(), "--seed", "4"];
    rocksr(&args).unwrap();
    let a = std::fs::read(f.ws.join("input/hr16.raw")).unwrap();
    let b = std::fs::read(ws.join("input/hr16.raw")).unwrap();
    assert_ne!(a, b);
    assert!(std::fs::read_to_string(ws.join("manifest.txt")).unwrap().contains("config seed = 4"));
}

#[test]
fn manifest_detects_deleted_and_modified_files() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path().join("w");
    copy_dir(&shared().ws, &ws);
    std::fs::remove_file(ws.join("tables/psd.csv")).unwrap();
    std::fs::write(ws.join("tables/metrics.csv"), "tampered").unwrap();
    let bad = verify_manifest(&Workspace::new(&ws).unwrap()).unwrap();
    assert_eq!(bad, vec!["checksum mismatch: tables/metrics.csv", "missing: tables/psd.csv"]);
    assert!(rocksr(&["verify", "--workspace", ws.to_str().unwrap()]).is_err());
}

#[test]
fn empty_workspace_report_lists_missing_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, "").unwrap();
    let err = rocksr(&["report", "--config", cfg.to_str().unwrap(), "--workspace", dir.path().join("w").to_str().unwrap()])
        .unwrap_err();
    let msg = format!("{err:#}");
    assert!(msg.contains("missing input artifacts"), "{msg}");
    assert!(msg.contains("tables/porosity.csv") && msg.contains("tables/drainage.csv"), "{msg}");
}

#[test]
fn stage_with_missing_inputs_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, "").unwrap();
    let err = rocksr(&["segment", "--config", cfg.to_str().unwrap(), "--workspace", dir.path().join("w").to_str().unwrap()])
        .unwrap_err();
    assert!(format!("{err:#}").contains("norm/hr.raw"));
}

#[test]
fn invalid_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, "[edsr]\nfilterz = 3\n").unwrap();
    let err = rocksr(&["synth", "--config", cfg.to_str().unwrap(), "--workspace", dir.path().join("w").to_str().unwrap()])
        .unwrap_err();
    assert!(format!("{err:#}").contains("unknown key"));
    assert!(rocksr(&["synth", "--workspace", dir.path().join("w").to_str().unwrap()]).is_err());
}

#[test]
fn partial_inputs_give_partial_report() {
    let f = shared();
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path().join("w");
    copy_dir(&f.ws, &ws);
    std::fs::remove_file(ws.join("tables/drainage.csv")).unwrap();
    std::fs::remove_file(ws.join("report/kr_curves.svg")).unwrap();
    rocksr(&["report", "--config", f.cfg.to_str().unwrap(), "--workspace", ws.to_str().unwrap()]).unwrap();
    let gaps = std::fs::read_to_string(ws.join("report/gaps.txt")).unwrap();
    assert_eq!(gaps.trim(), "missing tables/drainage.csv");
    assert!(!ws.join("report/kr_curves.svg").exists());
    let rows = comparison(&ws);
    assert!(rows.iter().any(|r| r["quantity"] == "permeability"));
    assert!(!rows.iter().any(|r| r["quantity"] == "sw"));
}

#[test]
fn identical_sr_and_hr_give_zero_errors() {
    let f = shared();
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path().join("w");
    copy_dir(&f.ws, &ws);
    for m in ["trilinear", "bicubic", "edsr", "cincgan"] {
        std::fs::copy(ws.join("norm/hr.raw"), ws.join(format!("sr/{m}.raw"))).unwrap();
        std::fs::copy(ws.join("norm/hr.meta"), ws.join(format!("sr/{m}.meta"))).unwrap();
    }
    for stage in ["segment", "porosity", "pnm-extract", "pnm-flow", "pnm-drainage", "report"] {
        rocksr(&[stage, "--config", f.cfg.to_str().unwrap(), "--workspace", ws.to_str().unwrap()]).unwrap();
    }
    let rows = comparison(&ws);
    let errs: Vec<_> = rows.iter().filter(|r| r["kind"] == "mean_signed_rel_error").collect();
    assert_eq!(errs.len(), 4 * 8);
    for r in errs {
        assert_eq!(r["value"], "0", "{} {}", r["quantity"], r["volume"]);
        assert!(r["points"].parse::<usize>().unwrap() > 0);
    }
}

#[test]
fn plots_are_valid_svg() {
    let ws = &shared().ws;
    for name in ["histograms", "pc_curves", "kr_curves", "dykstra", "loss"] {
        let text = std::fs::read_to_string(ws.join(format!("report/{name}.svg"))).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        let root = doc.root_element();
        assert_eq!(root.tag_name().name(), "svg");
        assert_eq!(root.tag_name().namespace(), Some("http://www.w3.org/2000/svg"));
        assert!(root.descendants().any(|n| n.has_tag_name("polyline")), "{name} has no data");
    }
}

#[test]
fn schema_documents_every_emitted_table() {
    let ws = &shared().ws;
    let schema = rocksr_cli::report::schema_text();
    for rel in Workspace::new(ws).unwrap().files().unwrap() {
        if rel.ends_with(".csv") && !rel.starts_with("input/") {
            let generic = rel
                .strip_prefix("tables/seams_")
                .map(|_| "tables/seams_<method>.csv".to_string())
                .or_else(|| rel.strip_prefix("pnm/").map(|r| format!("pnm/<run>/{}", r.rsplit('/').next().unwrap())))
                .unwrap_or(rel.clone());
            assert!(schema.contains(&format!("{generic}:")), "{rel} undocumented");
        }
    }
    assert!(rocksr(&["report", "--schema"]).is_ok());
}

#[test]
fn manifest_is_a_function_of_files_and_config() {
    let ws = Workspace::new(&shared().ws).unwrap();
    let cfg = Config::parse(SMALL).unwrap();
    let m = build_manifest(&ws, &cfg).unwrap();
    assert_eq!(m, std::fs::read_to_string(shared().ws.join("manifest.txt")).unwrap());
}
