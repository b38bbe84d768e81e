//! Sectioned `key = value` pipeline configuration.
//!
//! ```text
//! # comment
//! [edsr]
//! filters = 8
//! ```
//!
//! Every section and key must appear in [`SCHEMA`]; values are type-checked
//! when the file is loaded and missing keys take their defaults.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::{anyhow, bail, Context, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Int,
    Float,
    Bool,
    Str,
    IntList,
    StrList,
}

pub struct KeySpec {
    pub section: &'static str,
    pub key: &'static str,
    pub kind: Kind,
    pub default: &'static str,
    pub doc: &'static str,
}

macro_rules! keys {
    ($($s:literal $k:literal $kind:ident $d:literal $doc:literal;)*) => {
        &[$(KeySpec { section: $s, key: $k, kind: Kind::$kind, default: $d, doc: $doc }),*]
    };
}

pub const SCHEMA: &[KeySpec] = keys! {
    "run" "seed" Int "0" "base seed; stages add fixed offsets";
    "synth" "dims" Int "48" "edge length of the cubic HR volume";
    "synth" "scale" Int "2" "HR/LR resolution ratio";
    "synth" "porosity" Float "0.25" "target macro porosity of the sphere pack";
    "synth" "radius_min" Float "3.0" "smallest grain radius, voxels";
    "synth" "radius_max" Float "6.0" "largest grain radius, voxels";
    "synth" "blur_sigma" Float "0.5" "Gaussian PSF sigma, voxels";
    "synth" "hr_noise" Float "2.0" "HR noise sigma in 8-bit units";
    "synth" "lr_noise" Float "3.0" "LR noise sigma in 8-bit units";
    "synth" "voxel_size" Float "2.0" "HR voxel size, um";
    "normalize" "hr" Str "input/hr16" "16-bit HR volume stem (.raw/.meta)";
    "normalize" "lr" Str "input/lr16" "16-bit LR volume stem (.raw/.meta)";
    "normalize" "clip_fraction" Float "0.0001" "fraction clipped from each histogram tail";
    "patches" "scale" Int "2" "HR/LR resolution ratio";
    "patches" "size3d" Int "6" "LR edge of volumetric patches";
    "patches" "step3d" Int "6" "LR stride of volumetric patches";
    "patches" "size2d" Int "12" "LR edge of slice patches";
    "patches" "step2d" Int "12" "LR stride of slice patches";
    "patches" "slice_step" Int "2" "use every n-th slice for slice patches";
    "edsr" "filters" Int "16" "feature channels";
    "edsr" "blocks" Int "2" "residual blocks";
    "edsr" "kernel" Int "3" "convolution kernel edge";
    "edsr" "lr" Float "0.002" "initial learning rate";
    "edsr" "decay_factor" Float "0.5" "learning-rate decay factor";
    "edsr" "decay_period" Int "10" "epochs between decays";
    "edsr" "epochs" Int "30" "training epochs";
    "edsr" "batch" Int "8" "mini-batch size";
    "edsr" "max_steps" Int "0" "optimizer step cap, 0 for none";
    "edsr" "validation" Float "0.2" "held-out fraction";
    "cincgan" "filters" Int "8" "generator channels";
    "cincgan" "blocks" Int "1" "generator residual blocks";
    "cincgan" "disc_filters" Int "8" "discriminator channels";
    "cincgan" "disc_layers" Int "2" "discriminator convolutions";
    "cincgan" "edsr_filters" Int "8" "2D EDSR channels";
    "cincgan" "edsr_blocks" Int "1" "2D EDSR residual blocks";
    "cincgan" "edsr_epochs" Int "20" "2D EDSR pre-training epochs";
    "cincgan" "lr" Float "0.001" "initial learning rate (both stages)";
    "cincgan" "stage1_epochs" Int "6" "clean-up cycle epochs";
    "cincgan" "stage2_epochs" Int "4" "joint fine-tuning epochs";
    "cincgan" "batch" Int "4" "mini-batch size";
    "cincgan" "max_steps" Int "0" "optimizer step cap per stage, 0 for none";
    "cincgan" "max_patches" Int "48" "patch cap per domain";
    "reconstruct" "methods" StrList "trilinear,bicubic,edsr,cincgan" "upsamplers to run";
    "reconstruct" "slab_thickness" Int "4" "LR slices per slab";
    "reconstruct" "overlap" Int "0" "extra LR slices per slab side for neural upsamplers";
    "reconstruct" "histogram_match" Bool "true" "match SR histograms to the HR reference";
    "metrics" "ssim_window" Int "7" "SSIM Gaussian window edge";
    "metrics" "ssim_sigma" Float "1.5" "SSIM Gaussian sigma";
    "segment" "pore_max" Int "-1" "fixed pore threshold, -1 to select from the HR gradient histogram";
    "segment" "grain_min" Int "-1" "fixed grain threshold, -1 to select";
    "segment" "grad_cutoff" Float "0" "fixed gradient cutoff, 0 to select";
    "segment" "half_width" Int "5" "threshold offset either side of the valley";
    "segment" "regions" Int "20" "interfacial regions sampled for the cutoff";
    "segment" "sweep" IntList "-4,-2,0,2,4" "threshold shifts for sensitivity runs";
    "dykstra" "block_sizes" IntList "4,6,8,12,16,24" "cube edges, voxels";
    "dykstra" "mode" Str "combined" "block porosity: combined, macro or micro";
    "thomeer" "curve" Str "input/micp.csv" "pressure,intrusion CSV";
    "thomeer" "systems" Int "2" "pore systems to fit";
    "thomeer" "starts" Int "8" "multistart initial points";
    "thomeer" "weighting" Str "linear" "residual weighting: linear or log";
    "pnm" "min_prominence" Float "1.0" "maxima merge prominence, voxels";
    "pnm" "sigma" Float "0.05" "interfacial tension, N/m";
    "pnm" "theta" Float "0" "contact angle, rad";
    "pnm" "mu_w" Float "0.001" "wetting viscosity, Pa s";
    "pnm" "mu_nw" Float "0.00092" "non-wetting viscosity, Pa s";
    "pnm" "pc_points" Int "24" "capillary pressure steps";
    "pnm" "corner_factor" Float "0.01" "wetting corner conductance factor";
    "pnm" "trapping" Bool "false" "trap wetting phase without an outlet path";
};

fn spec(section: &str, key: &str) -> Option<&'static KeySpec> {
    SCHEMA.iter().find(|s| s.section == section && s.key == key)
}

fn check(kind: Kind, v: &str) -> Result<()> {
    let ok = match kind {
        Kind::Int => v.parse::<i64>().is_ok(),
        Kind::Float => v.parse::<f64>().map(f64::is_finite).unwrap_or(false),
        Kind::Bool => matches!(v, "true" | "false"),
        Kind::Str => true,
        Kind::IntList => split_list(v).all(|s| s.parse::<i64>().is_ok()),
        Kind::StrList => true,
    };
    if ok {
        Ok(())
    } else {
        bail!("expected {kind:?}, got '{v}'")
    }
}

fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    values: BTreeMap<(String, String), String>,
}

impl Default for Config {
    fn default() -> Self {
        Self::parse("").expect("defaults are valid")
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for s in SCHEMA {
            values.insert((s.section.to_string(), s.key.to_string()), s.default.to_string());
        }
        let mut section: Option<String> = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = || format!("line {}", no + 1);
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SCHEMA.iter().any(|s| s.section == name) {
                    bail!("{}: unknown section [{name}]", at());
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("{}: expected key = value", at()))?;
            let (k, v) = (k.trim(), v.trim());
            let sec = section.as_deref().ok_or_else(|| anyhow!("{}: key '{k}' outside any section", at()))?;
            let sp = spec(sec, k).ok_or_else(|| anyhow!("{}: unknown key '{k}' in [{sec}]", at()))?;
            check(sp.kind, v).with_context(|| format!("{}: [{sec}] {k}", at()))?;
            values.insert((sec.to_string(), k.to_string()), v.to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let sp = spec(section, key).ok_or_else(|| anyhow!("unknown key [{section}] {key}"))?;
        check(sp.kind, value)?;
        self.values.insert((section.into(), key.into()), value.into());
        Ok(())
    }

    fn raw(&self, section: &str, key: &str) -> &str {
        self.values
            .get(&(section.to_string(), key.to_string()))
            .unwrap_or_else(|| panic!("[{section}] {key} is not in the schema"))
    }

    pub fn int(&self, section: &str, key: &str) -> i64 {
        self.raw(section, key).parse().expect("validated")
    }

    /// Non-negative integer; negative values are a configuration error.
    pub fn usize(&self, section: &str, key: &str) -> Result<usize> {
        let v = self.int(section, key);
        usize::try_from(v).map_err(|_| anyhow!("[{section}] {key} must be non-negative, got {v}"))
    }

    pub fn float(&self, section: &str, key: &str) -> f64 {
        self.raw(section, key).parse().expect("validated")
    }

    pub fn bool(&self, section: &str, key: &str) -> bool {
        self.raw(section, key) == "true"
    }

    pub fn str(&self, section: &str, key: &str) -> &str {
        self.raw(section, key)
    }

    pub fn int_list(&self, section: &str, key: &str) -> Vec<i64> {
        split_list(self.raw(section, key)).map(|s| s.parse().expect("validated")).collect()
    }

    pub fn str_list(&self, section: &str, key: &str) -> Vec<String> {
        split_list(self.raw(section, key)).map(str::to_string).collect()
    }

    /// Every key with its resolved value, in schema order.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        let mut last = "";
        for s in SCHEMA {
            if s.section != last {
                let _ = writeln!(out, "[{}]", s.section);
                last = s.section;
            }
            let _ = writeln!(out, "{} = {}", s.key, self.raw(s.section, s.key));
        }
        out
    }
}
