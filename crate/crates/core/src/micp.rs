//! Thomeer hyperbola model of mercury-intrusion curves.
//!
//! A pore system with displacement pressure `P_d`, geometrical factor `G` and
//! infinite-pressure bulk fraction `B∞` contributes
//! `B∞ · exp(−G / log10(P_c / P_d))` for `P_c > P_d` and nothing below. A
//! model is a superposition of such systems.

use std::io::{self, BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum MicpError {
    #[error("invalid MICP curve: {0}")]
    InvalidCurve(String),
    #[error("need at least {needed} points to fit {systems} systems, got {got}")]
    TooFewPoints { needed: usize, got: usize, systems: usize },
    #[error("invalid Thomeer system: {0}")]
    InvalidSystem(String),
    #[error("porosity partition needs exactly 2 systems, model has {0}")]
    NotTwoSystems(usize),
    #[error("partition total {total} is smaller than the system sum {sum}")]
    InconsistentTotal { total: f64, sum: f64 },
    #[error("csv parse error on line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, MicpError>;

/// Capillary pressure vs cumulative intruded bulk-volume fraction.
#[derive(Debug, Clone, PartialEq)]
pub struct MicpCurve<T> {
    points: Vec<(T, T)>,
}

impl<T: Scalar> MicpCurve<T> {
    pub fn new(points: Vec<(T, T)>) -> Result<Self> {
        for (i, &(p, b)) in points.iter().enumerate() {
            if !(p > T::zero()) || !p.is_finite() {
                return Err(MicpError::InvalidCurve(format!("pressure {p} at point {i} must be positive")));
            }
            if !(b >= T::zero() && b <= T::one()) {
                return Err(MicpError::InvalidCurve(format!("saturation {b} at point {i} outside [0,1]")));
            }
            if i > 0 {
                let (pp, pb) = points[i - 1];
                if !(p > pp) {
                    return Err(MicpError::InvalidCurve(format!("pressure not strictly increasing at point {i}")));
                }
                if b < pb {
                    return Err(MicpError::InvalidCurve(format!("intrusion decreases at point {i}")));
                }
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(T, T)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Two-column CSV `pressure,intrusion`; a non-numeric first line is
    /// treated as a header.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut points = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split(',').map(str::trim);
            let (a, b) = (cols.next(), cols.next());
            let parsed = a.zip(b).and_then(|(a, b)| Some((a.parse::<f64>().ok()?, b.parse::<f64>().ok()?)));
            match parsed {
                Some((p, v)) => points.push((T::lit(p), T::lit(v))),
                None if i == 0 => continue,
                None => {
                    return Err(MicpError::Csv {
                        line: i + 1,
                        msg: format!("expected two numeric columns, got `{line}`"),
                    })
                }
            }
        }
        Self::new(points)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "pressure,intrusion")?;
        for (p, b) in &self.points {
            writeln!(w, "{p},{b}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThomeerSystem<T> {
    pub b_inf: T,
    pub g: T,
    pub p_d: T,
}

impl<T: Scalar> ThomeerSystem<T> {
    pub fn new(b_inf: T, g: T, p_d: T) -> Result<Self> {
        if !(b_inf > T::zero() && b_inf <= T::one()) {
            return Err(MicpError::InvalidSystem(format!("B_inf {b_inf} outside (0,1]")));
        }
        if !(g > T::zero()) {
            return Err(MicpError::InvalidSystem(format!("G {g} must be positive")));
        }
        if !(p_d > T::zero()) {
            return Err(MicpError::InvalidSystem(format!("P_d {p_d} must be positive")));
        }
        Ok(Self { b_inf, g, p_d })
    }

    /// Right-limit convention: zero for `P_c ≤ P_d`.
    #[inline]
    pub fn eval(&self, pc: T) -> T {
        if pc <= self.p_d {
            return T::zero();
        }
        let l = (pc / self.p_d).log10();
        self.b_inf * (-self.g / l).exp()
    }
}

/// Superposed pore systems ordered by ascending displacement pressure.
#[derive(Debug, Clone, PartialEq)]
pub struct ThomeerModel<T> {
    systems: Vec<ThomeerSystem<T>>,
}

impl<T: Scalar> ThomeerModel<T> {
    pub fn new(mut systems: Vec<ThomeerSystem<T>>) -> Result<Self> {
        let sum: T = systems.iter().map(|s| s.b_inf).sum();
        if sum > T::one() + T::lit(1e-12) {
            return Err(MicpError::InvalidSystem(format!("sum of B_inf {sum} exceeds 1")));
        }
        systems.sort_by(|a, b| a.p_d.partial_cmp(&b.p_d).expect("finite P_d"));
        Ok(Self { systems })
    }

    /// Builds a model without the per-system validity checks; used for fitted
    /// models that may have collapsed toward zero.
    fn from_fit(mut systems: Vec<ThomeerSystem<T>>) -> Self {
        systems.sort_by(|a, b| a.p_d.partial_cmp(&b.p_d).unwrap_or(std::cmp::Ordering::Equal));
        Self { systems }
    }

    pub fn systems(&self) -> &[ThomeerSystem<T>] {
        &self.systems
    }

    pub fn total_b_inf(&self) -> T {
        self.systems.iter().map(|s| s.b_inf).sum()
    }

    pub fn write_csv<W: Write>(&self, rms: T, mut w: W) -> io::Result<()> {
        writeln!(w, "b_inf,g,p_d,rms")?;
        for s in &self.systems {
            writeln!(w, "{},{},{},{}", s.b_inf, s.g, s.p_d, rms)?;
        }
        Ok(())
    }
}

pub fn thomeer_eval<T: Scalar>(model: &ThomeerModel<T>, pc: T) -> T {
    model.systems.iter().map(|s| s.eval(pc)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualWeighting {
    /// Plain sum of squared residuals in `B_v`.
    Linear,
    /// Squared residuals weighted by the log-pressure interval each sample
    /// represents (trapezoid weights in `log10 P_c`).
    LogPressure,
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub starts: usize,
    pub seed: u64,
    pub max_iterations: usize,
    pub max_restarts: usize,
    pub weighting: ResidualWeighting,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            starts: 16,
            seed: 0,
            max_iterations: 20_000,
            max_restarts: 8,
            weighting: ResidualWeighting::Linear,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult<T> {
    pub model: ThomeerModel<T>,
    /// Root-mean-square residual in `B_v` (unweighted).
    pub rms: T,
    pub converged: bool,
    /// Set when the fitted total `B∞` collapses to (near) zero.
    pub degenerate: bool,
}

// ---------------------------------------------------------------------------
// Nelder-Mead

struct NmOutcome<T> {
    x: Vec<T>,
    f: T,
    converged: bool,
}

fn nelder_mead<T: Scalar>(f: &impl Fn(&[T]) -> T, x0: &[T], step: T, max_iter: usize) -> NmOutcome<T> {
    let n = x0.len();
    let (alpha, gamma, rho, sigma) = (T::one(), T::lit(2.0), T::lit(0.5), T::lit(0.5));
    let mut simplex: Vec<Vec<T>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += step;
        simplex.push(v);
    }
    let mut fv: Vec<T> = simplex.iter().map(|v| f(v)).collect();
    let mut converged = false;
    for _ in 0..max_iter {
        // order
        let mut idx: Vec<usize> = (0..=n).collect();
        idx.sort_by(|&a, &b| fv[a].partial_cmp(&fv[b]).unwrap_or(std::cmp::Ordering::Equal));
        simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
        fv = idx.iter().map(|&i| fv[i]).collect();

        let spread = fv[n] - fv[0];
        let diameter = simplex[1..]
            .iter()
            .flat_map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (*a - *b).abs()))
            .fold(T::zero(), T::max);
        if spread <= T::lit(1e-15) * fv[0].abs() + T::lit(1e-300) && diameter < T::lit(1e-9) {
            converged = true;
            break;
        }

        let mut centroid = vec![T::zero(); n];
        for v in &simplex[..n] {
            for (c, &x) in centroid.iter_mut().zip(v) {
                *c += x;
            }
        }
        let nn = T::from_usize_lossy(n);
        centroid.iter_mut().for_each(|c| *c /= nn);
        let along = |t: T| -> Vec<T> {
            centroid
                .iter()
                .zip(&simplex[n])
                .map(|(&c, &w)| c + t * (c - w))
                .collect()
        };
        let xr = along(alpha);
        let fr = f(&xr);
        if fr < fv[0] {
            let xe = along(gamma);
            let fe = f(&xe);
            if fe < fr {
                simplex[n] = xe;
                fv[n] = fe;
            } else {
                simplex[n] = xr;
                fv[n] = fr;
            }
        } else if fr < fv[n - 1] {
            simplex[n] = xr;
            fv[n] = fr;
        } else {
            let (xc, fc) = if fr < fv[n] {
                let xc = along(rho);
                let fc = f(&xc);
                (xc, fc)
            } else {
                let xc = along(-rho);
                let fc = f(&xc);
                (xc, fc)
            };
            if fc < fv[n].min(fr) {
                simplex[n] = xc;
                fv[n] = fc;
            } else {
                let best = simplex[0].clone();
                for i in 1..=n {
                    for (x, &b) in simplex[i].iter_mut().zip(&best) {
                        *x = b + sigma * (*x - b);
                    }
                    fv[i] = f(&simplex[i]);
                }
            }
        }
    }
    let best = (0..=n)
        .min_by(|&a, &b| fv[a].partial_cmp(&fv[b]).unwrap_or(std::cmp::Ordering::Equal))
        .expect("non-empty simplex");
    NmOutcome {
        x: simplex[best].clone(),
        f: fv[best],
        converged,
    }
}

// ---------------------------------------------------------------------------
// fitting

/// Unconstrained coordinates: per system `(u, ln G, ln P_d)`, with
/// `B_i = e^{u_i} / (1 + Σ e^{u_j})` so every `B_i ∈ (0,1)` and `ΣB < 1`.
fn decode<T: Scalar>(x: &[T]) -> Vec<ThomeerSystem<T>> {
    let n = x.len() / 3;
    let m = x.iter().step_by(3).fold(T::zero(), |a, &u| a.max(u));
    let denom = (-m).exp() + (0..n).map(|i| (x[3 * i] - m).exp()).sum::<T>();
    (0..n)
        .map(|i| ThomeerSystem {
            b_inf: (x[3 * i] - m).exp() / denom,
            g: x[3 * i + 1].exp(),
            p_d: x[3 * i + 2].exp(),
        })
        .collect()
}

fn encode<T: Scalar>(systems: &[ThomeerSystem<T>]) -> Vec<T> {
    let floor = T::lit(1e-12);
    let sum: T = systems.iter().map(|s| s.b_inf.max(floor)).sum();
    let rest = (T::one() - sum).max(floor);
    systems
        .iter()
        .flat_map(|s| [(s.b_inf.max(floor) / rest).ln(), s.g.ln(), s.p_d.ln()])
        .collect()
}

fn weights<T: Scalar>(curve: &MicpCurve<T>, mode: ResidualWeighting) -> Vec<T> {
    let pts = curve.points();
    match mode {
        ResidualWeighting::Linear => vec![T::one(); pts.len()],
        ResidualWeighting::LogPressure => {
            let lp: Vec<T> = pts.iter().map(|p| p.0.log10()).collect();
            let n = lp.len();
            if n < 2 {
                return vec![T::one(); n];
            }
            let half = T::lit(0.5);
            let w: Vec<T> = (0..n)
                .map(|i| {
                    let left = if i > 0 { lp[i] - lp[i - 1] } else { T::zero() };
                    let right = if i + 1 < n { lp[i + 1] - lp[i] } else { T::zero() };
                    half * (left + right)
                })
                .collect();
            let mean = w.iter().copied().sum::<T>() / T::from_usize_lossy(n);
            w.into_iter().map(|v| v / mean).collect()
        }
    }
}

fn sse<T: Scalar>(curve: &MicpCurve<T>, systems: &[ThomeerSystem<T>], w: &[T]) -> T {
    curve
        .points()
        .iter()
        .zip(w)
        .map(|(&(p, b), &wi)| {
            let m: T = systems.iter().map(|s| s.eval(p)).sum();
            wi * (m - b) * (m - b)
        })
        .sum()
}

fn refine<T: Scalar>(curve: &MicpCurve<T>, x0: Vec<T>, w: &[T], opts: &FitOptions) -> NmOutcome<T> {
    let objective = |x: &[T]| {
        let s = decode(x);
        let v = sse(curve, &s, w);
        if v.is_finite() {
            v
        } else {
            T::max_value()
        }
    };
    let mut best = nelder_mead(&objective, &x0, T::lit(0.5), opts.max_iterations);
    let mut step = T::lit(0.1);
    for _ in 0..opts.max_restarts {
        let next = nelder_mead(&objective, &best.x, step, opts.max_iterations);
        let improved = next.f < best.f * (T::one() - T::lit(1e-10));
        let converged = next.converged;
        if next.f <= best.f {
            best = next;
        }
        if !improved && converged {
            best.converged = true;
            break;
        }
        step = step * T::lit(0.5);
    }
    best
}

fn finish<T: Scalar>(curve: &MicpCurve<T>, out: NmOutcome<T>) -> FitResult<T> {
    let systems = decode(&out.x);
    let ones = vec![T::one(); curve.len()];
    let rms = (sse(curve, &systems, &ones) / T::from_usize_lossy(curve.len().max(1))).sqrt();
    let model = ThomeerModel::from_fit(systems);
    let degenerate = model.total_b_inf() < T::lit(1e-6);
    FitResult {
        model,
        rms,
        converged: out.converged,
        degenerate,
    }
}

/// Multi-start Nelder-Mead least-squares fit of `n_systems` hyperbolas.
pub fn thomeer_fit<T: Scalar>(curve: &MicpCurve<T>, n_systems: usize, opts: &FitOptions) -> Result<FitResult<T>> {
    let needed = 3 * n_systems.max(1);
    if curve.len() < needed {
        return Err(MicpError::TooFewPoints {
            needed,
            got: curve.len(),
            systems: n_systems,
        });
    }
    let pts = curve.points();
    let lp_lo = pts[0].0.as_f64().log10();
    let lp_hi = pts[pts.len() - 1].0.as_f64().log10();
    let b_max = pts.iter().map(|p| p.1.as_f64()).fold(0.0, f64::max);
    let b_each = (b_max / n_systems as f64).clamp(1e-3, 0.9 / n_systems as f64);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let starts: Vec<Vec<ThomeerSystem<T>>> = (0..opts.starts.max(1))
        .map(|k| {
            let mut lp: Vec<f64> = if k == 0 {
                (0..n_systems)
                    .map(|i| lp_lo + (lp_hi - lp_lo) * (i as f64 + 0.5) / (n_systems as f64 + 0.5))
                    .collect()
            } else {
                (0..n_systems)
                    .map(|_| rng.random_range((lp_lo - 0.3)..lp_hi.max(lp_lo - 0.3 + 1e-9)))
                    .collect()
            };
            lp.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            let g = if k == 0 { 0.5 } else { rng.random_range(0.05..2.0) };
            lp.into_iter()
                .map(|l| ThomeerSystem {
                    b_inf: T::lit(b_each),
                    g: T::lit(g),
                    p_d: T::lit(10f64.powf(l)),
                })
                .collect()
        })
        .collect();

    let w = weights(curve, opts.weighting);
    let outcomes: Vec<NmOutcome<T>> = starts
        .par_iter()
        .map(|s| refine(curve, encode(s), &w, opts))
        .collect();
    // lowest objective wins; ties go to the earliest start
    let best = outcomes
        .into_iter()
        .enumerate()
        .min_by(|(ia, a), (ib, b)| {
            a.f.partial_cmp(&b.f)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(ia.cmp(ib))
        })
        .map(|(_, o)| o)
        .expect("at least one start");
    Ok(finish(curve, best))
}

/// Local refinement from a given model (single start).
pub fn thomeer_fit_from<T: Scalar>(
    curve: &MicpCurve<T>,
    init: &ThomeerModel<T>,
    opts: &FitOptions,
) -> Result<FitResult<T>> {
    let needed = 3 * init.systems().len().max(1);
    if curve.len() < needed {
        return Err(MicpError::TooFewPoints {
            needed,
            got: curve.len(),
            systems: init.systems().len(),
        });
    }
    let w = weights(curve, opts.weighting);
    Ok(finish(curve, refine(curve, encode(init.systems()), &w, opts)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PorosityPartition<T> {
    pub macro_porosity: T,
    pub micro_porosity: T,
    pub total: T,
    /// `total − macro − micro`; zero unless a separate total was supplied.
    pub unassigned: T,
}

/// Macro porosity is the `B∞` of the lower-`P_d` system, micro porosity that
/// of the higher one. When `total_porosity` is given it is reported as the
/// total and any remainder goes to `unassigned`.
pub fn partition_porosity<T: Scalar>(model: &ThomeerModel<T>, total_porosity: Option<T>) -> Result<PorosityPartition<T>> {
    let s = model.systems();
    if s.len() != 2 {
        return Err(MicpError::NotTwoSystems(s.len()));
    }
    let macro_porosity = s[0].b_inf;
    let micro_porosity = s[1].b_inf;
    let sum = macro_porosity + micro_porosity;
    let total = total_porosity.unwrap_or(sum);
    if total < sum - T::lit(1e-12) {
        return Err(MicpError::InconsistentTotal {
            total: total.as_f64(),
            sum: sum.as_f64(),
        });
    }
    Ok(PorosityPartition {
        macro_porosity,
        micro_porosity,
        total,
        unassigned: total - sum,
    })
}
