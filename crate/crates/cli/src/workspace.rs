use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rocksr_core::volume::{self, write_atomic};
use rocksr_core::VoxelGrid;

/// Run log; its timings differ between runs so it is kept out of the manifest.
pub const RUN_LOG: &str = "run_log.txt";
pub const MANIFEST: &str = "manifest.txt";

pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).with_context(|| format!("creating workspace {}", root.display()))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).exists()
    }

    /// Absolute path of `rel` with its directory created.
    pub fn ensure_parent(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
        Ok(p)
    }

    pub fn write(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        let p = self.ensure_parent(rel)?;
        write_atomic(&p, bytes).with_context(|| format!("writing {}", p.display()))
    }

    pub fn read_text(&self, rel: &str) -> Result<String> {
        self.require(&[rel])?;
        std::fs::read_to_string(self.path(rel)).with_context(|| format!("reading {rel}"))
    }

    /// Errors listing every missing artifact.
    pub fn require(&self, rels: &[&str]) -> Result<()> {
        let missing: Vec<&str> = rels.iter().copied().filter(|r| !self.exists(r)).collect();
        if !missing.is_empty() {
            bail!("missing input artifacts: {}", missing.join(", "));
        }
        Ok(())
    }

    pub fn raw(stem: &str) -> (String, String) {
        (format!("{stem}.raw"), format!("{stem}.meta"))
    }

    pub fn has_grid(&self, stem: &str) -> bool {
        let (r, m) = Self::raw(stem);
        self.exists(&r) && self.exists(&m)
    }

    pub fn load_grid(&self, stem: &str) -> Result<VoxelGrid> {
        let (r, m) = Self::raw(stem);
        self.require(&[&r, &m])?;
        Ok(volume::load_raw(&self.path(&r), &self.path(&m))?)
    }

    pub fn save_grid(&self, stem: &str, grid: &VoxelGrid) -> Result<()> {
        let (r, m) = Self::raw(stem);
        let (rp, mp) = (self.ensure_parent(&r)?, self.ensure_parent(&m)?);
        Ok(volume::save_raw(grid, &rp, &mp)?)
    }

    pub fn append_log(&self, line: &str) -> Result<()> {
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(self.path(RUN_LOG))?;
        writeln!(f, "{line}")?;
        Ok(())
    }

    /// Workspace-relative paths of all regular files, sorted, with `/` separators.
    pub fn files(&self) -> Result<Vec<String>> {
        fn walk(dir: &Path, root: &Path, out: &mut Vec<String>) -> Result<()> {
            for e in std::fs::read_dir(dir)? {
                let p = e?.path();
                if p.is_dir() {
                    walk(&p, root, out)?;
                } else {
                    let rel = p.strip_prefix(root).expect("under root");
                    out.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
                }
            }
            Ok(())
        }
        let mut out = Vec::new();
        walk(&self.root, &self.root, &mut out)?;
        out.sort();
        Ok(out)
    }
}
