//! Pore-network extraction and quasi-static two-phase flow.
//!
//! Lengths are in µm, pressures in Pa. Flow runs along z: pores touching
//! the z = 0 face are inlets, pores touching the last slice are outlets.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::field::{coords_of, for_each_face_neighbor, for_each_neighbor26, Field3};
use crate::linalg::{conjugate_gradient, CsrMatrix};
use crate::segment::{LabelGrid, Phase};
use crate::volume::write_atomic;

#[derive(Debug, Error)]
pub enum PnmError {
    #[error("capillary pressure steps must be strictly increasing")]
    NonIncreasingSteps,
    #[error("invalid fluid properties: {0}")]
    InvalidFluids(String),
    #[error("absolute permeability is zero; relative permeability undefined")]
    MissingAbsolutePermeability,
    #[error("linear solve did not converge after {iterations} iterations (residual {residual:e})")]
    Singular { iterations: usize, residual: f64 },
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimensionMismatch([usize; 3], [usize; 3]),
    #[error("network has zero total volume")]
    EmptyVolume,
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PnmError>;

pub const UM2_PER_DARCY: f64 = 0.986_923_3;

// ---------------------------------------------------------------------------
// Distance transform

/// Squared 1D lower envelope transform, in place.
fn edt_1d(f: &mut [f64], v: &mut [usize], z: &mut [f64], out: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        out[q] = d * d + f[p];
    }
    f.copy_from_slice(out);
}

const FAR: f64 = 1e20;

/// Exact Euclidean distance (voxel units) from each pore voxel to the
/// nearest grain voxel centre; zero on grain. A volume without grain is
/// measured against the exterior layer instead.
pub fn distance_transform(labels: &LabelGrid) -> Field3<f64> {
    let d = labels.dims;
    let n = labels.labels.len();
    if !labels.labels.contains(&Phase::Grain) {
        let data = (0..n)
            .map(|i| {
                let c = coords_of(d, i);
                (0..3).map(|a| (c[a] + 1).min(d[a] - c[a])).min().unwrap_or(0) as f64
            })
            .collect();
        return Field3::from_vec(d, data).expect("dims");
    }
    let mut sq: Vec<f64> = labels.labels.iter().map(|&l| if l == Phase::Grain { 0.0 } else { FAR }).collect();
    let longest = *d.iter().max().unwrap_or(&1);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut v = vec![0usize; longest];
    let mut z = vec![0.0; longest + 1];
    let strides = [1, d[0], d[0] * d[1]];
    for axis in 0..3 {
        let len = d[axis];
        let (a1, a2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for j in 0..d[a2] {
            for i in 0..d[a1] {
                let base = i * strides[a1] + j * strides[a2];
                for t in 0..len {
                    line[t] = sq[base + t * strides[axis]];
                }
                edt_1d(&mut line[..len], &mut v, &mut z, &mut out[..len]);
                for t in 0..len {
                    sq[base + t * strides[axis]] = line[t];
                }
            }
        }
    }
    Field3::from_vec(d, sq.into_iter().map(f64::sqrt).collect()).expect("dims")
}

// ---------------------------------------------------------------------------
// Network

#[derive(Debug, Clone, PartialEq)]
pub struct Pore {
    pub center: [usize; 3],
    pub radius: f64,
    pub volume: f64,
    pub inlet: bool,
    pub outlet: bool,
    /// Zero-volume node on the inlet or outlet face.
    pub boundary: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Throat {
    pub pore_i: usize,
    pub pore_j: usize,
    pub radius: f64,
    pub length: f64,
    /// Zero for extracted networks, whose pore regions hold all pore volume.
    pub volume: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Domain {
    pub area: f64,
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoreNetwork {
    pub pores: Vec<Pore>,
    pub throats: Vec<Throat>,
    pub domain: Domain,
    pub voxel_size: f64,
}

impl PoreNetwork {
    /// Independent straight tubes spanning the domain, one inlet and one
    /// outlet node each; tube volume is carried by the throat.
    pub fn tube_bundle(radii: &[f64], length: f64, area: f64) -> Self {
        let mut pores = Vec::new();
        let mut throats = Vec::new();
        for &r in radii {
            let i = pores.len();
            for (inlet, z) in [(true, 0), (false, 1)] {
                pores.push(Pore {
                    center: [i / 2, 0, z],
                    radius: r,
                    volume: 0.0,
                    inlet,
                    outlet: !inlet,
                    boundary: false,
                });
            }
            throats.push(Throat {
                pore_i: i,
                pore_j: i + 1,
                radius: r,
                length,
                volume: PI * r * r * length,
            });
        }
        Self {
            pores,
            throats,
            domain: Domain { area, length },
            voxel_size: 1.0,
        }
    }

    pub fn total_volume(&self) -> f64 {
        self.pores.iter().map(|p| p.volume).sum::<f64>() + self.throats.iter().map(|t| t.volume).sum::<f64>()
    }

    pub fn pores_csv(&self) -> String {
        let mut s = String::from("id,x,y,z,radius_um,volume_um3,inlet,outlet,boundary\n");
        for (i, p) in self.pores.iter().enumerate() {
            let _ = writeln!(
                s,
                "{i},{},{},{},{:.9e},{:.9e},{},{},{}",
                p.center[0],
                p.center[1],
                p.center[2],
                p.radius,
                p.volume,
                p.inlet as u8,
                p.outlet as u8,
                p.boundary as u8
            );
        }
        s
    }

    pub fn throats_csv(&self) -> String {
        let mut s = String::from("id,pore_i,pore_j,radius_um,length_um,volume_um3\n");
        for (i, t) in self.throats.iter().enumerate() {
            let _ = writeln!(s, "{i},{},{},{:.9e},{:.9e},{:.9e}", t.pore_i, t.pore_j, t.radius, t.length, t.volume);
        }
        s
    }

    pub fn meta_text(&self) -> String {
        format!(
            "area_um2={:.9e}\nlength_um={:.9e}\nvoxel_size_um={:.9e}\npores={}\nthroats={}\n",
            self.domain.area,
            self.domain.length,
            self.voxel_size,
            self.pores.len(),
            self.throats.len()
        )
    }

    /// Writes `pores.csv`, `throats.csv` and `network.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("pores.csv"), self.pores_csv().as_bytes())?;
        write_atomic(&dir.join("throats.csv"), self.throats_csv().as_bytes())?;
        write_atomic(&dir.join("network.txt"), self.meta_text().as_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta = std::fs::read_to_string(dir.join("network.txt"))?;
        let mut kv = BTreeMap::new();
        for line in meta.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| PnmError::Parse(format!("bad line '{line}'")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let num = |k: &str| -> Result<f64> {
            kv.get(k)
                .ok_or_else(|| PnmError::Parse(format!("missing {k}")))?
                .parse()
                .map_err(|_| PnmError::Parse(format!("bad {k}")))
        };
        let domain = Domain {
            area: num("area_um2")?,
            length: num("length_um")?,
        };
        let voxel_size = num("voxel_size_um")?;
        let rows = |name: &str, cols: usize| -> Result<Vec<Vec<String>>> {
            let text = std::fs::read_to_string(dir.join(name))?;
            text.lines()
                .skip(1)
                .filter(|l| !l.trim().is_empty())
                .map(|l| {
                    let f: Vec<String> = l.split(',').map(|s| s.trim().to_string()).collect();
                    if f.len() != cols {
                        return Err(PnmError::Parse(format!("{name}: expected {cols} columns in '{l}'")));
                    }
                    Ok(f)
                })
                .collect()
        };
        fn p<T: std::str::FromStr>(s: &str) -> Result<T> {
            s.parse().map_err(|_| PnmError::Parse(format!("bad value '{s}'")))
        }
        let pores = rows("pores.csv", 9)?
            .iter()
            .map(|f| {
                Ok(Pore {
                    center: [p(&f[1])?, p(&f[2])?, p(&f[3])?],
                    radius: p(&f[4])?,
                    volume: p(&f[5])?,
                    inlet: p::<u8>(&f[6])? != 0,
                    outlet: p::<u8>(&f[7])? != 0,
                    boundary: p::<u8>(&f[8])? != 0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let throats = rows("throats.csv", 6)?
            .iter()
            .map(|f| {
                let t = Throat {
                    pore_i: p(&f[1])?,
                    pore_j: p(&f[2])?,
                    radius: p(&f[3])?,
                    length: p(&f[4])?,
                    volume: p(&f[5])?,
                };
                if t.pore_i >= pores.len() || t.pore_j >= pores.len() || t.pore_i == t.pore_j {
                    return Err(PnmError::Parse(format!("throat references invalid pores {} {}", t.pore_i, t.pore_j)));
                }
                Ok(t)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            pores,
            throats,
            domain,
            voxel_size,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractOptions {
    /// Neighbouring regions whose lower peak rises less than this (voxels)
    /// above their shared saddle are merged.
    pub min_prominence: f64,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self { min_prominence: 1.0 }
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Maxima plateaux of the distance field, each reduced to the member
/// voxel nearest its centroid. Returns (marker voxel, plateau members).
fn distance_maxima(dist: &Field3<f64>, pore: &[bool]) -> Vec<(usize, Vec<usize>)> {
    let dims = dist.dims();
    let d = dist.data();
    let n = d.len();
    let candidate: Vec<bool> = (0..n)
        .map(|i| {
            if !pore[i] {
                return false;
            }
            let mut ok = true;
            for_each_neighbor26(dims, i, |j| {
                if pore[j] && d[j] > d[i] {
                    ok = false;
                }
            });
            ok
        })
        .collect();
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for s in 0..n {
        if !candidate[s] || seen[s] {
            continue;
        }
        let mut comp = vec![s];
        let mut valid = true;
        seen[s] = true;
        let mut k = 0;
        while k < comp.len() {
            let i = comp[k];
            k += 1;
            for_each_neighbor26(dims, i, |j| {
                if pore[j] && d[j] == d[s] && !seen[j] {
                    if candidate[j] {
                        seen[j] = true;
                        comp.push(j);
                    } else {
                        valid = false;
                    }
                }
            });
        }
        if !valid {
            continue;
        }
        let mut c = [0.0; 3];
        for &i in &comp {
            let p = coords_of(dims, i);
            (0..3).for_each(|a| c[a] += p[a] as f64);
        }
        c.iter_mut().for_each(|v| *v /= comp.len() as f64);
        let dist2 = |i: usize| {
            let p = coords_of(dims, i);
            (0..3).map(|a| (p[a] as f64 - c[a]).powi(2)).sum::<f64>()
        };
        let marker = *comp
            .iter()
            .min_by(|&&a, &&b| dist2(a).partial_cmp(&dist2(b)).unwrap_or(Ordering::Equal).then(a.cmp(&b)))
            .expect("non-empty");
        comp.sort_unstable();
        out.push((marker, comp));
    }
    out
}

#[derive(PartialEq)]
struct Desc(f64, u64, usize);
impl Eq for Desc {}
impl PartialOrd for Desc {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Desc {
    // larger distance first, then earlier insertion
    fn cmp(&self, o: &Self) -> Ordering {
        self.0.partial_cmp(&o.0).unwrap_or(Ordering::Equal).then(o.1.cmp(&self.1))
    }
}

/// Region label per voxel (`usize::MAX` on grain) and the marker voxel of
/// each region.
fn pore_regions(dist: &Field3<f64>, pore: &[bool]) -> (Vec<usize>, Vec<usize>) {
    let dims = dist.dims();
    let d = dist.data();
    let n = d.len();
    let mut region = vec![usize::MAX; n];
    let mut markers = Vec::new();
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    for (marker, members) in distance_maxima(dist, pore) {
        let r = markers.len();
        markers.push(marker);
        for &i in &members {
            region[i] = r;
            heap.push(Desc(d[i], seq, i));
            seq += 1;
        }
    }
    loop {
        while let Some(Desc(_, _, i)) = heap.pop() {
            let r = region[i];
            for_each_face_neighbor(dims, i, |j| {
                if pore[j] && region[j] == usize::MAX {
                    region[j] = r;
                    heap.push(Desc(d[j], seq, j));
                    seq += 1;
                }
            });
        }
        // pore voxels reachable only diagonally from any marker
        let left = (0..n)
            .filter(|&i| pore[i] && region[i] == usize::MAX)
            .max_by(|&a, &b| d[a].partial_cmp(&d[b]).unwrap_or(Ordering::Equal).then(b.cmp(&a)));
        match left {
            Some(i) => {
                region[i] = markers.len();
                markers.push(i);
                heap.push(Desc(d[i], seq, i));
                seq += 1;
            }
            None => break,
        }
    }
    (region, markers)
}

/// Pores at distance maxima, regions by distance-ordered flooding and
/// throats on shared region faces.
pub fn extract_network(labels: &LabelGrid, dist: &Field3<f64>, opts: &ExtractOptions) -> Result<PoreNetwork> {
    let dims = labels.dims;
    if dist.dims() != dims {
        return Err(PnmError::DimensionMismatch(dims, dist.dims()));
    }
    let vs = labels.voxel_size;
    let domain = Domain {
        area: (dims[0] * dims[1]) as f64 * vs * vs,
        length: dims[2] as f64 * vs,
    };
    let pore: Vec<bool> = labels.labels.iter().map(|&l| l == Phase::Pore).collect();
    let d = dist.data();
    let (region, markers) = pore_regions(dist, &pore);
    let nr = markers.len();
    let mut peak = vec![0.0f64; nr];
    let mut count = vec![0usize; nr];
    // widest voxel of each region on the inlet and outlet faces
    let mut face: Vec<[Option<(f64, usize)>; 2]> = vec![[None, None]; nr];
    let better = |a: Option<(f64, usize)>, b: Option<(f64, usize)>| match (a, b) {
        (Some(x), Some(y)) => Some(if y.0 > x.0 || (y.0 == x.0 && y.1 < x.1) { y } else { x }),
        (x, None) => x,
        (None, y) => y,
    };
    for (i, &r) in region.iter().enumerate() {
        if r == usize::MAX {
            continue;
        }
        peak[r] = peak[r].max(d[i]);
        count[r] += 1;
        let z = i / (dims[0] * dims[1]);
        if z == 0 {
            face[r][0] = better(face[r][0], Some((d[i], i)));
        }
        if z + 1 == dims[2] {
            face[r][1] = better(face[r][1], Some((d[i], i)));
        }
    }
    let mut saddles: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let strides = [1, dims[0], dims[0] * dims[1]];
    for i in 0..region.len() {
        let a = region[i];
        if a == usize::MAX {
            continue;
        }
        let c = coords_of(dims, i);
        for ax in 0..3 {
            if c[ax] + 1 >= dims[ax] {
                continue;
            }
            let j = i + strides[ax];
            let b = region[j];
            if b == usize::MAX || b == a {
                continue;
            }
            let key = (a.min(b), a.max(b));
            let s = d[i].min(d[j]);
            let e = saddles.entry(key).or_insert(0.0);
            *e = e.max(s);
        }
    }
    // prominence merging, highest saddles first
    let mut parent: Vec<usize> = (0..nr).collect();
    let mut order: Vec<((usize, usize), f64)> = saddles.iter().map(|(&k, &s)| (k, s)).collect();
    order.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    for ((a, b), s) in order {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra == rb || peak[ra].min(peak[rb]) - s >= opts.min_prominence {
            continue;
        }
        let (keep, gone) = if peak[ra] > peak[rb] || (peak[ra] == peak[rb] && ra < rb) {
            (ra, rb)
        } else {
            (rb, ra)
        };
        parent[gone] = keep;
        count[keep] += count[gone];
        for f in 0..2 {
            face[keep][f] = better(face[keep][f], face[gone][f]);
        }
    }
    let mut index = vec![usize::MAX; nr];
    let mut pores = Vec::new();
    for r in 0..nr {
        if find(&mut parent, r) == r {
            index[r] = pores.len();
            pores.push(Pore {
                center: coords_of(dims, markers[r]),
                radius: peak[r] * vs,
                volume: count[r] as f64 * vs * vs * vs,
                inlet: false,
                outlet: false,
                boundary: false,
            });
        }
    }
    let mut merged: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (&(a, b), &s) in &saddles {
        let (pa, pb) = (index[find(&mut parent, a)], index[find(&mut parent, b)]);
        if pa == pb {
            continue;
        }
        let e = merged.entry((pa.min(pb), pa.max(pb))).or_insert(0.0);
        *e = e.max(s);
    }
    let span = |a: [usize; 3], b: [usize; 3]| (0..3).map(|k| (a[k] as f64 - b[k] as f64).powi(2)).sum::<f64>().sqrt() * vs;
    let mut throats: Vec<Throat> = merged
        .into_iter()
        .map(|((i, j), s)| Throat {
            pore_i: i,
            pore_j: j,
            radius: s * vs,
            length: (span(pores[i].center, pores[j].center) - pores[i].radius - pores[j].radius).max(vs),
            volume: 0.0,
        })
        .collect();
    // zero-volume boundary pores on the inlet and outlet faces
    for r in 0..nr {
        if find(&mut parent, r) != r {
            continue;
        }
        for (f, is_inlet) in [(0, true), (1, false)] {
            if let Some((fd, v)) = face[r][f] {
                let center = coords_of(dims, v);
                let host = index[r];
                throats.push(Throat {
                    pore_i: host,
                    pore_j: pores.len(),
                    radius: fd * vs,
                    length: (span(pores[host].center, center) - pores[host].radius).max(vs),
                    volume: 0.0,
                });
                pores.push(Pore {
                    center,
                    radius: fd * vs,
                    volume: 0.0,
                    inlet: is_inlet,
                    outlet: !is_inlet,
                    boundary: true,
                });
            }
        }
    }
    Ok(PoreNetwork {
        pores,
        throats,
        domain,
        voxel_size: vs,
    })
}

/// Histogram of body-pore radii with bins of one voxel, centred on
/// multiples of the voxel size. Returns (bin centre µm, count).
pub fn pore_size_distribution(net: &PoreNetwork) -> Vec<(f64, usize)> {
    if net.pores.iter().all(|p| p.boundary) {
        return Vec::new();
    }
    let vs = net.voxel_size;
    let bins: Vec<usize> = net.pores.iter().filter(|p| !p.boundary).map(|p| (p.radius / vs).round() as usize).collect();
    let (lo, hi) = (*bins.iter().min().expect("non-empty"), *bins.iter().max().expect("non-empty"));
    let mut counts = vec![0usize; hi - lo + 1];
    bins.iter().for_each(|&b| counts[b - lo] += 1);
    counts.into_iter().enumerate().map(|(k, c)| ((lo + k) as f64 * vs, c)).collect()
}

pub fn psd_csv(psd: &[(f64, usize)]) -> String {
    let mut s = String::from("radius_um,count\n");
    for (r, c) in psd {
        let _ = writeln!(s, "{r:.6},{c}");
    }
    s
}

// ---------------------------------------------------------------------------
// Single-phase flow

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSolution {
    /// Total throughput for a unit pressure drop.
    pub flow_rate: f64,
    pub pressures: Vec<f64>,
    pub connected: bool,
    pub iterations: usize,
    pub relative_residual: f64,
    /// Largest net flux at a free pore relative to the throughput.
    pub conservation_residual: f64,
}

/// Solves flux conservation with unit pressure at inlets and zero at
/// outlets. Throats with zero conductance are treated as absent; clusters
/// that do not span inlet to outlet are left out of the system.
pub fn solve_flow(net: &PoreNetwork, conductance: &[f64]) -> Result<FlowSolution> {
    let np = net.pores.len();
    let mut parent: Vec<usize> = (0..np).collect();
    for (t, &g) in net.throats.iter().zip(conductance) {
        if g > 0.0 {
            let (a, b) = (find(&mut parent, t.pore_i), find(&mut parent, t.pore_j));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut has_in = vec![false; np];
    let mut has_out = vec![false; np];
    for (i, p) in net.pores.iter().enumerate() {
        let r = find(&mut parent, i);
        has_in[r] |= p.inlet;
        has_out[r] |= p.outlet && !p.inlet;
    }
    let active: Vec<bool> = (0..np)
        .map(|i| {
            let r = find(&mut parent, i);
            has_in[r] && has_out[r]
        })
        .collect();
    let mut pressures = vec![0.0; np];
    if !active.iter().any(|&a| a) {
        return Ok(FlowSolution {
            flow_rate: 0.0,
            pressures,
            connected: false,
            iterations: 0,
            relative_residual: 0.0,
            conservation_residual: 0.0,
        });
    }
    let fixed = |i: usize| net.pores[i].inlet || net.pores[i].outlet;
    let mut unknown = vec![usize::MAX; np];
    let mut m = 0;
    for i in 0..np {
        if net.pores[i].inlet {
            pressures[i] = 1.0;
        }
        if active[i] && !fixed(i) {
            unknown[i] = m;
            m += 1;
        }
    }
    let mut trip = Vec::new();
    let mut rhs = vec![0.0; m];
    for (t, &g) in net.throats.iter().zip(conductance) {
        if !(g > 0.0) || !active[t.pore_i] {
            continue;
        }
        let (ui, uj) = (unknown[t.pore_i], unknown[t.pore_j]);
        for (u, v, other) in [(ui, uj, t.pore_j), (uj, ui, t.pore_i)] {
            if u == usize::MAX {
                continue;
            }
            trip.push((u, u, g));
            if v != usize::MAX {
                trip.push((u, v, -g));
            } else {
                rhs[u] += g * pressures[other];
            }
        }
    }
    let (mut iterations, mut relative_residual) = (0, 0.0);
    if m > 0 {
        let a = CsrMatrix::from_triplets(m, trip);
        let mut x = vec![0.5; m];
        let rep = conjugate_gradient(&a, &rhs, &mut x, 1e-13, 20 * m + 100);
        if !rep.converged {
            return Err(PnmError::Singular {
                iterations: rep.iterations,
                residual: rep.relative_residual,
            });
        }
        iterations = rep.iterations;
        relative_residual = rep.relative_residual;
        for i in 0..np {
            if unknown[i] != usize::MAX {
                pressures[i] = x[unknown[i]];
            }
        }
    }
    let mut net_flux = vec![0.0; np];
    let mut flow_rate = 0.0;
    for (t, &g) in net.throats.iter().zip(conductance) {
        if !(g > 0.0) || !active[t.pore_i] {
            continue;
        }
        let q = g * (pressures[t.pore_i] - pressures[t.pore_j]);
        net_flux[t.pore_i] -= q;
        net_flux[t.pore_j] += q;
        let (ii, ij) = (net.pores[t.pore_i].inlet, net.pores[t.pore_j].inlet);
        if ii && !ij {
            flow_rate += q;
        } else if ij && !ii {
            flow_rate -= q;
        }
    }
    let worst = (0..np)
        .filter(|&i| unknown[i] != usize::MAX)
        .map(|i| net_flux[i].abs())
        .fold(0.0, f64::max);
    Ok(FlowSolution {
        flow_rate,
        pressures,
        connected: true,
        iterations,
        relative_residual,
        conservation_residual: if flow_rate > 0.0 { worst / flow_rate } else { worst },
    })
}

/// Poiseuille conductance of a circular conduit.
pub fn hydraulic_conductance(radius: f64, length: f64, viscosity: f64) -> f64 {
    PI * radius.powi(4) / (8.0 * viscosity * length)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Permeability {
    pub um2: f64,
    pub darcy: f64,
    pub connected: bool,
    pub flow: FlowSolution,
}

pub fn absolute_permeability(net: &PoreNetwork, viscosity: f64) -> Result<Permeability> {
    if !(viscosity > 0.0) {
        return Err(PnmError::InvalidFluids(format!("viscosity {viscosity}")));
    }
    let g: Vec<f64> = net.throats.iter().map(|t| hydraulic_conductance(t.radius, t.length, viscosity)).collect();
    let flow = solve_flow(net, &g)?;
    let um2 = flow.flow_rate * viscosity * net.domain.length / net.domain.area;
    Ok(Permeability {
        um2,
        darcy: um2 / UM2_PER_DARCY,
        connected: flow.connected,
        flow,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FormationFactor {
    /// Infinite when inlet and outlet are disconnected.
    pub value: f64,
    pub connected: bool,
    pub flow: FlowSolution,
}

pub fn formation_factor(net: &PoreNetwork) -> Result<FormationFactor> {
    let g: Vec<f64> = net.throats.iter().map(|t| PI * t.radius * t.radius / t.length).collect();
    let flow = solve_flow(net, &g)?;
    let sigma_eff = flow.flow_rate * net.domain.length / net.domain.area;
    Ok(FormationFactor {
        value: if sigma_eff > 0.0 { 1.0 / sigma_eff } else { f64::INFINITY },
        connected: flow.connected,
        flow,
    })
}

// ---------------------------------------------------------------------------
// Drainage

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluidPair {
    /// Interfacial tension, N/m.
    pub sigma: f64,
    /// Contact angle through the wetting phase, rad.
    pub theta: f64,
    /// Viscosities, Pa·s.
    pub mu_w: f64,
    pub mu_nw: f64,
}

impl Default for FluidPair {
    fn default() -> Self {
        Self {
            sigma: 0.05,
            theta: 0.0,
            mu_w: 1.0e-3,
            mu_nw: 0.92e-3,
        }
    }
}

impl FluidPair {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(PnmError::InvalidFluids(format!("sigma {}", self.sigma)));
        }
        if !(self.theta >= 0.0 && self.theta < std::f64::consts::FRAC_PI_2) {
            return Err(PnmError::InvalidFluids(format!("theta {}", self.theta)));
        }
        if !(self.mu_w > 0.0 && self.mu_nw > 0.0) {
            return Err(PnmError::InvalidFluids("viscosities must be positive".into()));
        }
        Ok(())
    }

    /// Young-Laplace entry pressure (Pa) of a circular element of radius `r_um`.
    pub fn entry_pressure(&self, r_um: f64) -> f64 {
        if r_um > 0.0 {
            2.0 * self.sigma * self.theta.cos() / (r_um * 1e-6)
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DrainageOptions {
    /// Wetting phase cut off from every outlet cannot be displaced.
    pub trapping: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrainageState {
    pub pc: f64,
    pub invaded_pores: Vec<bool>,
    pub invaded_throats: Vec<bool>,
    pub sw: f64,
}

/// Lowest capillary pressure at which each pore and throat is reached
/// from the inlet face without trapping.
pub fn invasion_thresholds(net: &PoreNetwork, fluids: &FluidPair) -> (Vec<f64>, Vec<f64>) {
    let np = net.pores.len();
    let adj = pore_adjacency(net);
    let mut pore_thr = vec![f64::INFINITY; np];
    let mut throat_thr = vec![f64::INFINITY; net.throats.len()];
    let mut heap = BinaryHeap::new();
    #[derive(PartialEq)]
    struct Asc(f64, usize);
    impl Eq for Asc {}
    impl PartialOrd for Asc {
        fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
            Some(self.cmp(o))
        }
    }
    impl Ord for Asc {
        fn cmp(&self, o: &Self) -> Ordering {
            self.0.partial_cmp(&o.0).unwrap_or(Ordering::Equal).then(self.1.cmp(&o.1))
        }
    }
    for (i, p) in net.pores.iter().enumerate() {
        if p.inlet {
            pore_thr[i] = fluids.entry_pressure(p.radius);
            heap.push(Reverse(Asc(pore_thr[i], i)));
        }
    }
    while let Some(Reverse(Asc(v, i))) = heap.pop() {
        if v > pore_thr[i] || !v.is_finite() {
            continue;
        }
        for &(t, j) in &adj[i] {
            let vt = v.max(fluids.entry_pressure(net.throats[t].radius));
            throat_thr[t] = throat_thr[t].min(vt);
            let vj = vt.max(fluids.entry_pressure(net.pores[j].radius));
            if vj < pore_thr[j] {
                pore_thr[j] = vj;
                heap.push(Reverse(Asc(vj, j)));
            }
        }
    }
    (pore_thr, throat_thr)
}

fn pore_adjacency(net: &PoreNetwork) -> Vec<Vec<(usize, usize)>> {
    let mut adj = vec![Vec::new(); net.pores.len()];
    for (t, th) in net.throats.iter().enumerate() {
        adj[th.pore_i].push((t, th.pore_j));
        adj[th.pore_j].push((t, th.pore_i));
    }
    adj
}

fn saturation(net: &PoreNetwork, pores: &[bool], throats: &[bool], total: f64) -> f64 {
    let inv = net.pores.iter().zip(pores).filter(|(_, &b)| b).map(|(p, _)| p.volume).sum::<f64>()
        + net.throats.iter().zip(throats).filter(|(_, &b)| b).map(|(t, _)| t.volume).sum::<f64>();
    (1.0 - inv / total).clamp(0.0, 1.0)
}

/// Quasi-static drainage from the inlet face at each prescribed capillary
/// pressure.
pub fn drainage_simulate(net: &PoreNetwork, fluids: &FluidPair, pc_steps: &[f64], opts: &DrainageOptions) -> Result<Vec<DrainageState>> {
    fluids.validate()?;
    if pc_steps.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(PnmError::NonIncreasingSteps);
    }
    let total = net.total_volume();
    if !(total > 0.0) {
        return Err(PnmError::EmptyVolume);
    }
    if !opts.trapping {
        let (pt, tt) = invasion_thresholds(net, fluids);
        return Ok(pc_steps
            .iter()
            .map(|&pc| {
                let ip: Vec<bool> = pt.iter().map(|&v| v <= pc).collect();
                let it: Vec<bool> = tt.iter().map(|&v| v <= pc).collect();
                let sw = saturation(net, &ip, &it, total);
                DrainageState {
                    pc,
                    invaded_pores: ip,
                    invaded_throats: it,
                    sw,
                }
            })
            .collect());
    }
    let adj = pore_adjacency(net);
    let np = net.pores.len();
    let mut ip = vec![false; np];
    let mut it = vec![false; net.throats.len()];
    let mut states = Vec::with_capacity(pc_steps.len());
    let pe_pore: Vec<f64> = net.pores.iter().map(|p| fluids.entry_pressure(p.radius)).collect();
    let pe_throat: Vec<f64> = net.throats.iter().map(|t| fluids.entry_pressure(t.radius)).collect();
    for &pc in pc_steps {
        // one element at a time, cheapest entry first, so each invasion
        // sees the trapping caused by the previous ones
        loop {
            let (ep, et) = escape_sets(net, &adj, &ip, &it);
            let mut best: Option<(f64, usize)> = None;
            let mut offer = |e: usize, pe: f64| {
                if pe <= pc && best.is_none_or(|(b, be)| pe < b || (pe == b && e < be)) {
                    best = Some((pe, e));
                }
            };
            for i in 0..np {
                if ip[i] {
                    for &(t, _) in &adj[i] {
                        if !it[t] && et[t] {
                            offer(np + t, pe_throat[t]);
                        }
                    }
                } else if ep[i] && (net.pores[i].inlet || adj[i].iter().any(|&(t, _)| it[t])) {
                    offer(i, pe_pore[i]);
                }
            }
            match best {
                Some((_, e)) if e < np => ip[e] = true,
                Some((_, e)) => it[e - np] = true,
                None => break,
            }
        }
        states.push(DrainageState {
            pc,
            invaded_pores: ip.clone(),
            invaded_throats: it.clone(),
            sw: saturation(net, &ip, &it, total),
        });
    }
    Ok(states)
}

/// Uninvaded elements joined to an outlet through uninvaded elements.
fn escape_sets(net: &PoreNetwork, adj: &[Vec<(usize, usize)>], ip: &[bool], it: &[bool]) -> (Vec<bool>, Vec<bool>) {
    let mut ep = vec![false; ip.len()];
    let mut et = vec![false; it.len()];
    let mut queue: VecDeque<usize> = VecDeque::new();
    for (i, p) in net.pores.iter().enumerate() {
        if p.outlet && !ip[i] {
            ep[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        for &(t, j) in &adj[i] {
            if it[t] {
                continue;
            }
            et[t] = true;
            if !ip[j] && !ep[j] {
                ep[j] = true;
                queue.push_back(j);
            }
        }
    }
    // throats whose wetting phase drains through an adjacent escaping pore
    for (t, th) in net.throats.iter().enumerate() {
        if !it[t] && (ep[th.pore_i] || ep[th.pore_j]) {
            et[t] = true;
        }
    }
    (ep, et)
}

pub fn pc_curve_csv(states: &[DrainageState]) -> String {
    let mut s = String::from("pc_pa,sw\n");
    for st in states {
        let _ = writeln!(s, "{:.6},{:.9}", st.pc, st.sw);
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KrPoint {
    pub pc: f64,
    pub sw: f64,
    pub krw: f64,
    pub krnw: f64,
}

pub const DEFAULT_CORNER_FACTOR: f64 = 0.01;

/// Phase conductance networks per drainage state: invaded throats carry
/// the non-wetting phase plus a wetting corner film of `beta` times the
/// single-phase conductance; uninvaded throats carry wetting phase only.
pub fn relative_permeability(net: &PoreNetwork, fluids: &FluidPair, states: &[DrainageState], beta: f64) -> Result<Vec<KrPoint>> {
    fluids.validate()?;
    if !(0.0..=1.0).contains(&beta) {
        return Err(PnmError::InvalidFluids(format!("corner factor {beta}")));
    }
    let g: Vec<f64> = net.throats.iter().map(|t| hydraulic_conductance(t.radius, t.length, 1.0)).collect();
    let q_abs = solve_flow(net, &g)?.flow_rate;
    if !(q_abs > 0.0) {
        return Err(PnmError::MissingAbsolutePermeability);
    }
    states
        .iter()
        .map(|st| {
            let gw: Vec<f64> = g.iter().zip(&st.invaded_throats).map(|(&g, &inv)| if inv { beta * g } else { g }).collect();
            let gn: Vec<f64> = g.iter().zip(&st.invaded_throats).map(|(&g, &inv)| if inv { g } else { 0.0 }).collect();
            let qw = solve_flow(net, &gw)?.flow_rate;
            let qn = solve_flow(net, &gn)?.flow_rate;
            Ok(KrPoint {
                pc: st.pc,
                sw: st.sw,
                krw: (qw / q_abs).clamp(0.0, 1.0),
                krnw: (qn / q_abs).clamp(0.0, 1.0),
            })
        })
        .collect()
}

pub fn kr_csv(points: &[KrPoint]) -> String {
    let mut s = String::from("pc_pa,sw,krw,krnw\n");
    for p in points {
        let _ = writeln!(s, "{:.6},{:.9},{:.9},{:.9}", p.pc, p.sw, p.krw, p.krnw);
    }
    s
}

/// Log-spaced pressures between the smallest and largest finite entry
/// pressures of the network, widened by 10% on either side.
pub fn default_pc_steps(net: &PoreNetwork, fluids: &FluidPair, n: usize) -> Vec<f64> {
    let pe = net
        .pores
        .iter()
        .map(|p| p.radius)
        .chain(net.throats.iter().map(|t| t.radius))
        .map(|r| fluids.entry_pressure(r))
        .filter(|v| v.is_finite());
    let (lo, hi) = pe.fold((f64::INFINITY, 0.0f64), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() || n == 0 {
        return Vec::new();
    }
    let (a, b) = ((lo * 0.9).log10(), (hi * 1.1).log10());
    (0..n)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n.max(2) - 1) as f64))
        .collect()
}

/// Network statistics as `key=value` lines.
pub fn summary_text(net: &PoreNetwork, perm: &Permeability, ff: &FormationFactor) -> String {
    let mean_r = if net.pores.is_empty() {
        0.0
    } else {
        net.pores.iter().map(|p| p.radius).sum::<f64>() / net.pores.len() as f64
    };
    let coordination = if net.pores.is_empty() {
        0.0
    } else {
        2.0 * net.throats.len() as f64 / net.pores.len() as f64
    };
    format!(
        "pores={}\nthroats={}\ninlet_pores={}\noutlet_pores={}\nmean_pore_radius_um={:.6}\ncoordination_number={:.6}\npermeability_um2={:.9e}\npermeability_darcy={:.9e}\nformation_factor={}\nconnected={}\nconservation_residual={:.3e}\n",
        net.pores.len(),
        net.throats.len(),
        net.pores.iter().filter(|p| p.inlet).count(),
        net.pores.iter().filter(|p| p.outlet).count(),
        mean_r,
        coordination,
        perm.um2,
        perm.darcy,
        if ff.value.is_finite() { format!("{:.9e}", ff.value) } else { "inf".into() },
        perm.connected,
        perm.flow.conservation_residual,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels_from(dims: [usize; 3], f: impl Fn([usize; 3]) -> bool) -> LabelGrid {
        LabelGrid {
            dims,
            voxel_size: 1.0,
            labels: (0..dims.iter().product())
                .map(|i| if f(coords_of(dims, i)) { Phase::Pore } else { Phase::Grain })
                .collect(),
        }
    }

    fn brute_edt(l: &LabelGrid) -> Vec<f64> {
        let grains: Vec<[usize; 3]> = (0..l.labels.len())
            .filter(|&i| l.labels[i] == Phase::Grain)
            .map(|i| coords_of(l.dims, i))
            .collect();
        (0..l.labels.len())
            .map(|i| {
                if l.labels[i] == Phase::Grain {
                    return 0.0;
                }
                let p = coords_of(l.dims, i);
                grains
                    .iter()
                    .map(|g| (0..3).map(|a| (p[a] as f64 - g[a] as f64).powi(2)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect()
    }

    fn ball(c: [f64; 3], r: f64) -> impl Fn([usize; 3]) -> bool {
        move |p| (0..3).map(|a| (p[a] as f64 + 0.5 - c[a]).powi(2)).sum::<f64>() <= r * r
    }

    #[test]
    fn edt_trivial_cases() {
        let g = labels_from([4; 3], |_| false);
        assert!(distance_transform(&g).data().iter().all(|&v| v == 0.0));
        let one = labels_from([5; 3], |p| p == [2, 2, 2]);
        let d = distance_transform(&one);
        assert_eq!(d.get(2, 2, 2), 1.0);
    }

    #[test]
    fn edt_matches_brute_force() {
        let l = labels_from([20, 18, 16], ball([10.0, 9.0, 8.0], 6.0));
        let d = distance_transform(&l);
        for (a, b) in d.data().iter().zip(brute_edt(&l)) {
            assert!((a - b).abs() < 1e-12);
        }
        let max = d.data().iter().copied().fold(0.0, f64::max);
        // discrete ball: the nearest grain centre may sit half a voxel off on every axis
        assert!((max - 6.0).abs() <= 0.5 * 3f64.sqrt() + 1e-9, "{max}");

        let mut state = 7u64;
        let bits: Vec<bool> = (0..12 * 11 * 10)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 33) % 3 != 0
            })
            .collect();
        let l = labels_from([12, 11, 10], |p| bits[p[0] + 12 * (p[1] + 11 * p[2])]);
        let d = distance_transform(&l);
        for (a, b) in d.data().iter().zip(brute_edt(&l)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn edt_is_lipschitz() {
        let l = labels_from([16; 3], |p| (p[0] * 7 + p[1] * 3 + p[2] * 5) % 11 > 2);
        let d = distance_transform(&l);
        for i in 0..d.len() {
            for_each_face_neighbor([16; 3], i, |j| assert!((d.data()[i] - d.data()[j]).abs() <= 1.0 + 1e-12));
        }
    }

    #[test]
    fn channel_is_one_plateau_pore() {
        let r = 4.0;
        let l = labels_from([16, 16, 24], |p| (p[0] as f64 + 0.5 - 8.0).powi(2) + (p[1] as f64 + 0.5 - 8.0).powi(2) <= r * r);
        let net = extract_network(&l, &distance_transform(&l), &ExtractOptions::default()).unwrap();
        assert!(!net.pores.is_empty());
        for p in &net.pores {
            assert!((p.radius - r).abs() <= 0.5 + 1e-9, "{}", p.radius);
        }
        assert!(net.pores.iter().any(|p| p.inlet) && net.pores.iter().any(|p| p.outlet));
    }

    #[test]
    fn two_spheres_and_neck() {
        let (a, b) = (ball([10.0, 10.0, 8.0], 6.0), ball([10.0, 10.0, 24.0], 6.0));
        let neck = |p: [usize; 3]| (p[0] as f64 + 0.5 - 10.0).powi(2) + (p[1] as f64 + 0.5 - 10.0).powi(2) <= 2.0 * 2.0;
        let l = labels_from([20, 20, 32], |p| a(p) || b(p) || neck(p));
        let net = extract_network(&l, &distance_transform(&l), &ExtractOptions::default()).unwrap();
        assert_eq!(net.pores.iter().filter(|p| !p.boundary).count(), 2, "{:?}", net.pores);
        let inner: Vec<&Throat> = net.throats.iter().filter(|t| !net.pores[t.pore_i].boundary && !net.pores[t.pore_j].boundary).collect();
        assert_eq!(inner.len(), 1);
        assert!((inner[0].radius - 2.0).abs() <= 1.0, "{}", inner[0].radius);
        for t in &net.throats {
            assert!(t.radius <= net.pores[t.pore_i].radius.min(net.pores[t.pore_j].radius));
            assert_ne!(t.pore_i, t.pore_j);
        }
        let total: f64 = net.pores.iter().map(|p| p.volume).sum();
        assert_eq!(total, l.pore_count() as f64);
    }

    #[test]
    fn isolated_voxels() {
        let l = labels_from([6; 3], |p| p.iter().all(|&c| c % 2 == 1));
        let net = extract_network(&l, &distance_transform(&l), &ExtractOptions::default()).unwrap();
        let bodies: Vec<&Pore> = net.pores.iter().filter(|p| !p.boundary).collect();
        assert_eq!(bodies.len(), 27);
        assert!(net.throats.iter().all(|t| net.pores[t.pore_j].boundary));
        assert!(net.pores.iter().all(|p| p.radius == 1.0));
        let empty = labels_from([4; 3], |_| false);
        let net = extract_network(&empty, &distance_transform(&empty), &ExtractOptions::default()).unwrap();
        assert!(net.pores.is_empty() && pore_size_distribution(&net).is_empty());
    }

    #[test]
    fn psd_two_modes() {
        let (a, b) = (ball([8.0, 8.0, 8.0], 3.0), ball([24.0, 24.0, 24.0], 6.0));
        let l = labels_from([32; 3], |p| a(p) || b(p));
        let net = extract_network(&l, &distance_transform(&l), &ExtractOptions::default()).unwrap();
        let psd = pore_size_distribution(&net);
        let modes: Vec<f64> = psd.iter().filter(|(_, c)| *c > 0).map(|(r, _)| *r).collect();
        assert_eq!(modes.len(), 2, "{psd:?}");
        assert!((modes[0] - 3.0).abs() <= 1.0 && (modes[1] - 6.0).abs() <= 1.0, "{modes:?}");
    }

    #[test]
    fn tube_permeability_and_formation_factor() {
        let net = PoreNetwork::tube_bundle(&[10.0], 50.0, 1e4);
        let k = absolute_permeability(&net, 1e-3).unwrap();
        let exact = PI * 1e4 / (8.0 * 1e4);
        assert!((k.um2 - exact).abs() / exact < 1e-3);
        let ff = formation_factor(&net).unwrap();
        assert!((ff.value - 1e4 / (PI * 100.0)).abs() / ff.value < 1e-3);
        let two = PoreNetwork::tube_bundle(&[10.0, 10.0], 50.0, 1e4);
        let k2 = absolute_permeability(&two, 1e-3).unwrap();
        assert!((k2.um2 - 2.0 * k.um2).abs() < 1e-12);
        let big = PoreNetwork::tube_bundle(&[20.0], 50.0, 1e4);
        assert!((formation_factor(&big).unwrap().value * 4.0 - ff.value).abs() < 1e-9);
    }

    fn chain(radii: &[f64]) -> PoreNetwork {
        let n = radii.len() + 1;
        let pores = (0..n)
            .map(|i| Pore {
                center: [0, 0, i],
                radius: 20.0,
                volume: 100.0,
                inlet: i == 0,
                outlet: i + 1 == n,
                boundary: false,
            })
            .collect();
        let throats = radii
            .iter()
            .enumerate()
            .map(|(i, &r)| Throat {
                pore_i: i,
                pore_j: i + 1,
                radius: r,
                length: 10.0,
                volume: 0.0,
            })
            .collect();
        PoreNetwork {
            pores,
            throats,
            domain: Domain {
                area: 400.0,
                length: 10.0 * radii.len() as f64,
            },
            voxel_size: 1.0,
        }
    }

    #[test]
    fn series_chain_conserves_flux() {
        let net = chain(&[3.0, 5.0, 2.0, 4.0]);
        let g: Vec<f64> = net.throats.iter().map(|t| hydraulic_conductance(t.radius, t.length, 1.0)).collect();
        let sol = solve_flow(&net, &g).unwrap();
        let series = 1.0 / g.iter().map(|g| 1.0 / g).sum::<f64>();
        assert!((sol.flow_rate - series).abs() / series < 1e-10);
        assert!(sol.conservation_residual < 1e-10);
        let blocked = chain(&[3.0, 0.0, 2.0]);
        let k = absolute_permeability(&blocked, 1.0).unwrap();
        assert_eq!(k.um2, 0.0);
        assert!(!k.connected);
        assert!(formation_factor(&blocked).unwrap().value.is_infinite());
    }

    #[test]
    fn bundle_invasion_pressures() {
        let net = PoreNetwork::tube_bundle(&[10.0, 5.0], 100.0, 1e4);
        let f = FluidPair::default();
        let (_, tt) = invasion_thresholds(&net, &f);
        assert!((tt[0] - 1e4).abs() / 1e4 < 1e-3);
        assert!((tt[1] - 2e4).abs() / 2e4 < 1e-3);
        let st = drainage_simulate(&net, &f, &[5e3, 1.5e4, 3e4], &DrainageOptions::default()).unwrap();
        assert_eq!(st[0].sw, 1.0);
        assert_eq!(st[1].invaded_throats, vec![true, false]);
        assert_eq!(st[2].sw, 0.0);
        let kr = relative_permeability(&net, &f, &st, 0.0).unwrap();
        assert_eq!((kr[0].krw, kr[0].krnw), (1.0, 0.0));
        let expect = 1e4 / (1e4 + 625.0);
        assert!((kr[1].krnw - expect).abs() < 1e-9);
        assert!(drainage_simulate(&net, &f, &[2.0, 1.0], &DrainageOptions::default()).is_err());
    }

    #[test]
    fn trapping_leaves_wetting_phase() {
        // big dead-end pore behind a tight throat next to an outlet path
        let mut net = chain(&[8.0, 8.0]);
        net.pores.push(Pore {
            center: [1, 0, 1],
            radius: 15.0,
            volume: 500.0,
            inlet: false,
            outlet: false,
            boundary: false,
        });
        net.throats.push(Throat {
            pore_i: 1,
            pore_j: 3,
            radius: 8.0,
            length: 10.0,
            volume: 0.0,
        });
        let f = FluidPair::default();
        let open = drainage_simulate(&net, &f, &[1e6], &DrainageOptions { trapping: false }).unwrap();
        assert_eq!(open[0].sw, 0.0);
        let trapped = drainage_simulate(&net, &f, &[1e6], &DrainageOptions { trapping: true }).unwrap();
        assert!((trapped[0].sw - 0.625).abs() < 1e-12, "{}", trapped[0].sw);
    }

    #[test]
    fn network_roundtrip() {
        let net = chain(&[3.0, 5.0]);
        let dir = tempfile::tempdir().unwrap();
        net.save(dir.path()).unwrap();
        let back = PoreNetwork::load(dir.path()).unwrap();
        assert_eq!(back.pores.len(), 3);
        assert_eq!(back.throats[1].radius, 5.0);
        assert_eq!(back.domain, net.domain);
    }

    #[test]
    fn extracted_network_flow_scales() {
        let l = labels_from([12, 12, 20], |p| {
            let dx = p[0] as f64 + 0.5 - 6.0 - 2.0 * ((p[2] as f64) * 0.3).sin();
            let dy = p[1] as f64 + 0.5 - 6.0;
            dx * dx + dy * dy <= 9.0
        });
        let net = extract_network(&l, &distance_transform(&l), &ExtractOptions::default()).unwrap();
        let k = absolute_permeability(&net, 1.0).unwrap();
        assert!(k.connected && k.um2 > 0.0, "{:?}", net.pores.len());
        assert!(k.flow.conservation_residual < 1e-10);
        let mut scaled = net.clone();
        for p in &mut scaled.pores {
            p.radius *= 2.0;
        }
        for t in &mut scaled.throats {
            t.radius *= 2.0;
            t.length *= 2.0;
        }
        scaled.domain.area *= 4.0;
        scaled.domain.length *= 2.0;
        let k2 = absolute_permeability(&scaled, 1.0).unwrap();
        assert!((k2.um2 / k.um2 - 4.0).abs() < 1e-9);
        let (f1, f2) = (formation_factor(&net).unwrap().value, formation_factor(&scaled).unwrap().value);
        assert!((f1 - f2).abs() / f1 < 1e-9);
    }
}
