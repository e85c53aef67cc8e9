//! Meyer truncation, exponentially conjugated semigroups and the
//! off-diagonal heat kernel check.

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cutoff::{davies_lambda0, davies_theta};
use crate::dirichlet::{gamma, gamma_sum, gamma_weighted, VertexFunction, SV_EXPONENTS};
use crate::error::{invalid, Error, Result};
use crate::estimates::{check_boundary_rule, hkp_envelope_time, EstimateCell, EstimateReport};
use crate::graph::{DistanceTable, Vertex, WeightedGraph, ALL_PAIRS_LIMIT};
use crate::kernel::{
    continuous_semigroup, poisson_weights, semigroup_rows_multi, CsrMatrix, KernelKind,
    MarkovKernel, Storage,
};

/// Tail tolerance for every uniformization in this module.
pub const UNIFORMIZATION_TOL: f64 = 1e-12;

/// Relative slack allowed in the key energy inequality.
pub const DAVIES_SLACK_TOL: f64 = 1e-10;

/// Parameters of the off-diagonal argument for one pair and time.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DaviesConfig {
    pub x: Vertex,
    pub y: Vertex,
    pub t: f64,
    pub d: u32,
    /// Half the distance.
    pub r: f64,
    pub theta: f64,
    /// Locality radius `ϑ r` of the small-jump part.
    pub locality: f64,
    pub lambda: f64,
    pub lambda0: f64,
    /// `λ ≥ λ₀`; otherwise only the on-diagonal bound is in force.
    pub active: bool,
}

impl DaviesConfig {
    pub fn new(
        g: &WeightedGraph,
        x: Vertex,
        y: Vertex,
        t: f64,
        df: f64,
        beta: f64,
        c3: f64,
    ) -> Result<Self> {
        let d = g.distance(x, y)?;
        if d < 2 {
            return Err(invalid(format!("pair ({x},{y}) is at distance {d}, need at least 2")));
        }
        if !(t > 0.0 && t.is_finite()) {
            return Err(invalid(format!("t must be positive, got {t}")));
        }
        let r = d as f64 / 2.0;
        let theta = davies_theta(df, beta);
        let lambda = (df + beta) / beta * (r.powf(beta) / t).ln();
        let lambda0 = davies_lambda0(theta, c3)?;
        Ok(DaviesConfig {
            x,
            y,
            t,
            d,
            r,
            theta,
            locality: theta * r,
            lambda,
            lambda0,
            active: lambda >= lambda0,
        })
    }
}

/// Distances from one vertex, from the all-pairs table when the graph is small.
enum DistanceRow<'a> {
    Table(&'a [u16]),
    Search(Arc<Vec<u32>>),
}

impl DistanceRow<'_> {
    #[inline]
    fn get(&self, y: Vertex) -> u32 {
        match self {
            DistanceRow::Table(r) => r[y] as u32,
            DistanceRow::Search(r) => r[y],
        }
    }
}

fn table(g: &WeightedGraph) -> Option<&DistanceTable> {
    if g.n_vertices() <= ALL_PAIRS_LIMIT {
        g.all_pairs().ok()
    } else {
        None
    }
}

fn distance_row<'a>(g: &WeightedGraph, t: Option<&'a DistanceTable>, x: Vertex) -> DistanceRow<'a> {
    match t {
        Some(t) => DistanceRow::Table(t.row(x)),
        None => DistanceRow::Search(g.distances_from(x).expect("vertex in range")),
    }
}

fn check_radius(radius: f64) -> Result<()> {
    if !(radius >= 0.0) {
        return Err(invalid(format!("locality radius must be non-negative, got {radius}")));
    }
    Ok(())
}

/// Split `K` into jumps of length `≤ radius` (diagonal included) and the rest.
pub fn meyer_split(k: &MarkovKernel, radius: f64) -> Result<(MarkovKernel, MarkovKernel)> {
    check_radius(radius)?;
    let g = k.graph();
    let t = table(g);
    let n = k.n();
    let beta = k.nominal_beta();
    let (small, large) = match k.storage() {
        Storage::Dense(m) => {
            let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
                .into_par_iter()
                .map(|x| {
                    let dist = distance_row(g, t, x);
                    let mut s = vec![0.0; n];
                    let mut l = vec![0.0; n];
                    for (y, &v) in m.row(x).iter().enumerate() {
                        if dist.get(y) as f64 <= radius {
                            s[y] = v;
                        } else {
                            l[y] = v;
                        }
                    }
                    (s, l)
                })
                .collect();
            let mut s = Array2::zeros((n, n));
            let mut l = Array2::zeros((n, n));
            for (x, (rs, rl)) in rows.into_iter().enumerate() {
                s.row_mut(x).assign(&ndarray::Array1::from(rs));
                l.row_mut(x).assign(&ndarray::Array1::from(rl));
            }
            (Storage::Dense(s), Storage::Dense(l))
        }
        Storage::Sparse(m) => {
            let mut s = CsrMatrix { n, offsets: vec![0], cols: vec![], vals: vec![] };
            let mut l = s.clone();
            for x in 0..n {
                let dist = distance_row(g, t, x);
                for (y, v) in m.row(x) {
                    let part = if dist.get(y) as f64 <= radius { &mut s } else { &mut l };
                    part.cols.push(y);
                    part.vals.push(v);
                }
                s.offsets.push(s.cols.len());
                l.offsets.push(l.cols.len());
            }
            (Storage::Sparse(s), Storage::Sparse(l))
        }
    };
    Ok((
        MarkovKernel::from_parts(Arc::clone(g), small, beta, KernelKind::MeyerSmall { radius }),
        MarkovKernel::from_parts(Arc::clone(g), large, beta, KernelKind::MeyerLarge { radius }),
    ))
}

/// `sup_x Σ_y k(x,y) μ(y)`, the total jump rate of a (large-jump) kernel.
pub fn total_jump_rate(k: &MarkovKernel) -> f64 {
    k.row_masses().into_iter().fold(0.0, f64::max)
}

/// `sup_{d(x,y) ≤ radius} |ψ(x) − ψ(y)|`.
pub fn osc(g: &WeightedGraph, psi: &[f64], radius: f64) -> Result<f64> {
    check_radius(radius)?;
    if psi.len() != g.n_vertices() {
        return Err(invalid("function length does not match the graph"));
    }
    if radius < 1.0 {
        return Ok(0.0);
    }
    let t = table(g);
    Ok((0..g.n_vertices())
        .into_par_iter()
        .map(|x| {
            let dist = distance_row(g, t, x);
            let mut worst: f64 = 0.0;
            for (y, &v) in psi.iter().enumerate() {
                if dist.get(y) as f64 <= radius {
                    worst = worst.max((psi[x] - v).abs());
                }
            }
            worst
        })
        .reduce(|| 0.0, f64::max))
}

/// Fail unless every stored entry of `k` at distance beyond `radius` is zero.
pub fn check_locality(k: &MarkovKernel, radius: f64) -> Result<()> {
    check_radius(radius)?;
    let g = k.graph();
    let t = table(g);
    let bad = (0..k.n()).into_par_iter().find_map_first(|x| {
        let dist = distance_row(g, t, x);
        let mut hit = None;
        k.for_each_in_row(x, |y, v| {
            if v != 0.0 && dist.get(y) as f64 > radius && hit.is_none() {
                hit = Some((x, y));
            }
        });
        hit
    });
    match bad {
        Some((x, y)) => Err(invalid(format!(
            "kernel is not {radius}-local: k({x},{y}) is nonzero"
        ))),
        None => Ok(()),
    }
}

/// Add the missing row mass `(1 − K1(x))/μ(x)` to the diagonal, so the
/// result is Markov with the same off-diagonal jumps.
pub fn markov_completion(k: &MarkovKernel) -> Result<MarkovKernel> {
    let g = k.graph();
    let mu = g.measure();
    let masses = k.row_masses();
    if let Some((x, m)) = masses.iter().enumerate().find(|(_, m)| **m > 1.0 + 1e-12) {
        return Err(invalid(format!("row {x} has mass {m}, kernel is not sub-Markov")));
    }
    let holding: Vec<f64> = masses
        .iter()
        .zip(mu)
        .map(|(m, w)| (1.0 - m).max(0.0) / w)
        .collect();
    let storage = match k.storage() {
        Storage::Dense(m) => {
            let mut m = m.clone();
            for (x, h) in holding.iter().enumerate() {
                m[[x, x]] += h;
            }
            Storage::Dense(m)
        }
        Storage::Sparse(s) => {
            let mut out = CsrMatrix { n: s.n, offsets: vec![0], cols: vec![], vals: vec![] };
            for x in 0..s.n {
                let mut placed = false;
                for (y, v) in s.row(x) {
                    if !placed && y >= x {
                        if y == x {
                            out.cols.push(x);
                            out.vals.push(v + holding[x]);
                            placed = true;
                            continue;
                        }
                        out.cols.push(x);
                        out.vals.push(holding[x]);
                        placed = true;
                    }
                    out.cols.push(y);
                    out.vals.push(v);
                }
                if !placed {
                    out.cols.push(x);
                    out.vals.push(holding[x]);
                }
                out.offsets.push(out.cols.len());
            }
            Storage::Sparse(out)
        }
    };
    Ok(MarkovKernel::from_parts(
        Arc::clone(g),
        storage,
        k.nominal_beta(),
        k.kind().clone(),
    ))
}

fn check_bounded(k: &MarkovKernel, psi: &[f64]) -> Result<()> {
    if psi.len() != k.n() {
        return Err(invalid("function length does not match the kernel"));
    }
    if psi.iter().any(|v| !v.is_finite()) {
        return Err(invalid("psi must be finite"));
    }
    Ok(())
}

/// `e^{ψ} H_t (e^{−ψ} f)`, where `H_t` is the semigroup of the small-jump
/// process (the Markov completion of `k_small`), computed by uniformization.
pub fn perturbed_semigroup(
    k_small: &MarkovKernel,
    psi: &VertexFunction,
    t: f64,
    f: &VertexFunction,
) -> Result<VertexFunction> {
    check_bounded(k_small, psi)?;
    if f.len() != k_small.n() {
        return Err(invalid("function length does not match the kernel"));
    }
    if !(t > 0.0 && t.is_finite()) {
        return Err(invalid(format!("t must be positive, got {t}")));
    }
    let q = markov_completion(k_small)?;
    let w = poisson_weights(t, UNIFORMIZATION_TOL)?;
    let mut v: Vec<f64> = f.iter().zip(psi.iter()).map(|(a, p)| a * (-p).exp()).collect();
    let mut acc: Vec<f64> = v.iter().map(|a| a * w[0]).collect();
    for &wm in &w[1..] {
        v = q.apply(&v);
        for (a, b) in acc.iter_mut().zip(&v) {
            *a += wm * b;
        }
    }
    VertexFunction::from_values(acc.iter().zip(psi.iter()).map(|(a, p)| a * p.exp()).collect())
}

/// Dense kernel `e^{ψ(x)−ψ(y)} h_t(x,y)` of [`perturbed_semigroup`].
pub fn perturbed_kernel(k_small: &MarkovKernel, psi: &VertexFunction, t: f64) -> Result<Array2<f64>> {
    check_bounded(k_small, psi)?;
    let h = continuous_semigroup(&markov_completion(k_small)?, t, UNIFORMIZATION_TOL)?;
    let mut m = h.to_dense();
    for ((x, y), v) in m.indexed_iter_mut() {
        *v *= (psi[x] - psi[y]).exp();
    }
    Ok(m)
}

/// Both sides of the key energy inequality for one `(f, ψ, p)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DaviesInequalityReport {
    pub p: f64,
    pub locality: f64,
    pub osc: f64,
    /// `Σ Γ(e^{−ψ}f, e^{ψ}f^{2p−1})`.
    pub lhs: f64,
    /// `Σ Γ(f^p, f^p) / (2p)`.
    pub energy_term: f64,
    /// `9p e^{2 osc} Σ f^{2p} Γ(ψ,ψ)`.
    pub drift_term: f64,
    pub slack: f64,
    pub scale: f64,
    pub holds: bool,
}

/// Evaluate the key energy inequality for an L-local kernel.
pub fn verify_davies_inequality(
    t: &MarkovKernel,
    f: &VertexFunction,
    psi: &VertexFunction,
    p: f64,
    locality: f64,
) -> Result<DaviesInequalityReport> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(invalid(format!("p must be at least 1, got {p}")));
    }
    check_bounded(t, psi)?;
    if f.len() != t.n() {
        return Err(invalid("function length does not match the kernel"));
    }
    if let Some(v) = f.iter().find(|v| !(**v >= 0.0)) {
        return Err(invalid(format!("f must be nonnegative, found {v}")));
    }
    check_locality(t, locality)?;
    let oscillation = osc(t.graph(), psi, locality)?;
    let left: Vec<f64> = f.iter().zip(psi.iter()).map(|(a, s)| (-s).exp() * a).collect();
    let right: Vec<f64> = f
        .iter()
        .zip(psi.iter())
        .map(|(a, s)| s.exp() * a.powf(2.0 * p - 1.0))
        .collect();
    let lhs = gamma_sum(t, &left, &right);
    let fp: Vec<f64> = f.iter().map(|a| a.powf(p)).collect();
    let energy_term = gamma_sum(t, &fp, &fp) / (2.0 * p);
    let f2p: Vec<f64> = fp.iter().map(|a| a * a).collect();
    let drift_term = 9.0 * p * (2.0 * oscillation).exp() * gamma_weighted(t, &f2p, psi, psi);
    let slack = lhs - (energy_term - drift_term);
    let scale = lhs.abs() + energy_term + drift_term;
    Ok(DaviesInequalityReport {
        p,
        locality,
        osc: oscillation,
        lhs,
        energy_term,
        drift_term,
        slack,
        scale,
        holds: slack >= -DAVIES_SLACK_TOL * scale,
    })
}

/// One seeded instance of the key inequality.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InequalitySample {
    pub sample: usize,
    pub report: DaviesInequalityReport,
}

/// Seeded `(f, ψ, p)` instances on the small-jump part of `k` for each
/// locality radius. `f` is uniform on `[0,1]`; `ψ` alternates between small
/// vertexwise noise and a distance ramp `s·min(d(c,·), R)/R` around a random
/// core vertex; `p` cycles through 1, 2, 4.
pub fn sample_davies_inequality(
    k: &MarkovKernel,
    localities: &[f64],
    samples: usize,
    seed: u64,
) -> Result<Vec<InequalitySample>> {
    if samples == 0 || localities.is_empty() {
        return Err(invalid("need at least one sample and one locality radius"));
    }
    let g = k.graph();
    let n = k.n();
    let core = g.core_vertices();
    let mut out = Vec::new();
    for &locality in localities {
        let (small, _) = meyer_split(k, locality)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..samples {
            let f: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
            let psi: Vec<f64> = if i % 2 == 0 {
                (0..n).map(|_| rng.gen_range(-0.5..=0.5)).collect()
            } else {
                let c = core[rng.gen_range(0..core.len())];
                let ramp = rng.gen_range(4.0..=32.0);
                let height = rng.gen_range(0.0..=3.0);
                g.distances_from(c)?
                    .iter()
                    .map(|&d| height * (d as f64).min(ramp) / ramp)
                    .collect()
            };
            let p = SV_EXPONENTS[i % SV_EXPONENTS.len()] as f64;
            let report = verify_davies_inequality(
                &small,
                &VertexFunction::from_values(f)?,
                &VertexFunction::from_values(psi)?,
                p,
                locality,
            )?;
            out.push(InequalitySample { sample: i, report });
        }
    }
    Ok(out)
}

/// Largest `max(e^{2ψ}Γ(e^{−ψ},e^{−ψ}), e^{−2ψ}Γ(e^ψ,e^ψ)) / (e^{2 osc} Γ(ψ,ψ))`
/// over vertices with nonzero denominator, and whether any vertex with zero
/// denominator has a nonzero numerator.
pub fn exponential_gradient_ratio(t: &MarkovKernel, psi: &VertexFunction, locality: f64) -> Result<(f64, bool)> {
    check_bounded(t, psi)?;
    check_locality(t, locality)?;
    let oscillation = osc(t.graph(), psi, locality)?;
    let minus: Vec<f64> = psi.iter().map(|s| (-s).exp()).collect();
    let plus: Vec<f64> = psi.iter().map(|s| s.exp()).collect();
    let gm = gamma(t, &minus, &minus, None);
    let gp = gamma(t, &plus, &plus, None);
    let gpsi = gamma(t, psi, psi, None);
    let bound = (2.0 * oscillation).exp();
    let mut worst: f64 = 0.0;
    let mut stray = false;
    for x in 0..t.n() {
        let a = plus[x] * plus[x] * gm[x];
        let b = minus[x] * minus[x] * gp[x];
        let c = bound * gpsi[x];
        if c > 0.0 {
            worst = worst.max(a.max(b) / c);
        } else if a.max(b) > 0.0 {
            stray = true;
        }
    }
    Ok((worst, stray))
}

/// `h_t(x,y)` against `min(t^{−d_f/β}, t d^{−(d_f+β)})` on active cells and
/// against `t^{−d_f/β}` alone where `λ < λ₀`.
pub fn off_diagonal_check(
    k: &MarkovKernel,
    pairs: &[(Vertex, Vertex)],
    t_grid: &[f64],
    df: f64,
    beta: f64,
    c3: f64,
) -> Result<EstimateReport> {
    if pairs.is_empty() || t_grid.is_empty() {
        return Err(invalid("pairs and time grid must be nonempty"));
    }
    if let Some(t) = t_grid.iter().find(|t| !(**t >= 1.0 && t.is_finite())) {
        return Err(invalid(format!("times must be at least 1, got {t}")));
    }
    let g = k.graph();
    let t_max = t_grid.iter().copied().fold(0.0, f64::max);
    check_boundary_rule(g, t_max, beta)?;
    let mut sources: Vec<Vertex> = Vec::new();
    for &(x, y) in pairs {
        g.check_vertex(x)?;
        g.check_vertex(y)?;
        if !g.is_core(x) || !g.is_core(y) {
            return Err(Error::InvalidGeometry(format!("pair ({x},{y}) leaves the core")));
        }
        if let Err(i) = sources.binary_search(&x) {
            sources.insert(i, x);
        }
    }
    let rows = semigroup_rows_multi(k, &sources, t_grid, UNIFORMIZATION_TOL)?;
    let mut cells = Vec::new();
    for (ti, &t) in t_grid.iter().enumerate() {
        for &(x, y) in pairs {
            let cfg = DaviesConfig::new(g, x, y, t, df, beta, c3)?;
            let value = rows[ti][[sources.binary_search(&x).unwrap(), y]];
            let on_diag = t.powf(-df / beta);
            let (envelope, branch) = if !cfg.active {
                (on_diag, "inactive")
            } else {
                let env = hkp_envelope_time(t, cfg.d as f64, df, beta);
                (env, if env < on_diag { "off-diagonal" } else { "on-diagonal" })
            };
            cells.push(EstimateCell {
                n: t,
                x,
                y,
                d: cfg.d,
                value,
                envelope,
                ratio: value / envelope,
                lambda: Some(cfg.lambda),
                active_branch: Some(branch.to_string()),
            });
        }
    }
    Ok(EstimateReport::from_cells("davies", cells, false, 0))
}
