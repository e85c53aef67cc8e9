//! Energy measures, Dirichlet forms, killed kernels and resolvents.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::ops::Deref;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::graph::{Vertex, WeightedGraph, ALL_PAIRS_LIMIT};
use crate::kernel::{CsrMatrix, KernelKind, MarkovKernel, Storage};

/// Relative residual at which resolvent solves stop.
pub const RESOLVENT_TOL: f64 = 1e-10;
/// Upper limit on Neumann series terms before switching to conjugate gradients.
pub const NEUMANN_CAP: usize = 1000;

/// Real-valued function on the vertices of a graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VertexFunction {
    values: Vec<f64>,
}

impl VertexFunction {
    pub fn new(g: &WeightedGraph, values: Vec<f64>) -> Result<Self> {
        if values.len() != g.n_vertices() {
            return Err(invalid(format!(
                "function has {} values, graph has {} vertices",
                values.len(),
                g.n_vertices()
            )));
        }
        Self::from_values(values)
    }

    /// Wrap raw values; only finiteness is checked.
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite value at vertex {i}")));
        }
        Ok(VertexFunction { values })
    }

    pub fn constant(g: &WeightedGraph, c: f64) -> Self {
        VertexFunction {
            values: vec![c; g.n_vertices()],
        }
    }

    pub fn indicator(g: &WeightedGraph, set: &[Vertex]) -> Self {
        let mut values = vec![0.0; g.n_vertices()];
        for &v in set {
            values[v] = 1.0;
        }
        VertexFunction { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::from_values(self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn sup_distance(&self, other: &VertexFunction) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// CSV with header `vertex,value`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "vertex,value")?;
        for (x, v) in self.values.iter().enumerate() {
            writeln!(out, "{x},{v}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut values = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if i == 0 {
                if line != "vertex,value" {
                    return Err(Error::Parse(format!("unexpected header {line:?}")));
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let (x, v) = line
                .split_once(',')
                .ok_or_else(|| Error::Parse(format!("line {}: expected two fields", i + 1)))?;
            let x: usize = x
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: bad vertex {x:?}", i + 1)))?;
            let v: f64 = v
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: bad value {v:?}", i + 1)))?;
            if x != values.len() {
                return Err(Error::Parse(format!("line {}: vertices must be listed in order", i + 1)));
            }
            values.push(v);
        }
        Self::from_values(values)
    }
}

impl Deref for VertexFunction {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.values
    }
}

fn check_len(k: &MarkovKernel, f: &[f64]) -> Result<()> {
    if f.len() != k.n() {
        return Err(invalid(format!(
            "function has {} values, kernel acts on {} vertices",
            f.len(),
            k.n()
        )));
    }
    Ok(())
}

/// Pointwise `Γ(f,g)(x) = ½ Σ_y (f(x)−f(y))(g(x)−g(y)) k(x,y) μ(y) μ(x)`,
/// restricted to `d(x,y) ≤ radius` when a radius is given.
pub(crate) fn gamma(k: &MarkovKernel, f: &[f64], g: &[f64], radius: Option<f64>) -> Vec<f64> {
    let graph = k.graph();
    let mu = graph.measure();
    let radius = radius.filter(|&l| l < graph.diameter() as f64);
    let table = match radius {
        Some(_) if graph.n_vertices() <= ALL_PAIRS_LIMIT => graph.all_pairs().ok(),
        _ => None,
    };
    (0..k.n())
        .into_par_iter()
        .map(|x| {
            let (fx, gx) = (f[x], g[x]);
            let mut acc = 0.0;
            match radius {
                None => match k.storage() {
                    Storage::Dense(m) => {
                        let row = m.row(x);
                        acc = dense_row_gamma(row.as_slice().expect("standard layout"), fx, gx, f, g, mu);
                    }
                    Storage::Sparse(_) => k.for_each_in_row(x, |y, v| {
                        acc += (fx - f[y]) * (gx - g[y]) * v * mu[y];
                    }),
                },
                Some(l) => {
                    let mut add = |y: Vertex, v: f64, dy: f64| {
                        if dy <= l {
                            acc += (fx - f[y]) * (gx - g[y]) * v * mu[y];
                        }
                    };
                    match table {
                        Some(t) => {
                            let row = t.row(x);
                            k.for_each_in_row(x, |y, v| add(y, v, row[y] as f64));
                        }
                        None => {
                            let row = graph.distances_from(x).expect("vertex in range");
                            k.for_each_in_row(x, |y, v| add(y, v, row[y] as f64));
                        }
                    }
                }
            }
            0.5 * mu[x] * acc
        })
        .collect()
}

/// `Σ_y (f_x − f_y)(g_x − g_y) k(x,y) μ(y)` over a dense row, with four
/// independent accumulators so the loop vectorizes.
#[inline]
fn dense_row_gamma(row: &[f64], fx: f64, gx: f64, f: &[f64], g: &[f64], mu: &[f64]) -> f64 {
    let n = row.len();
    let (row, f, g, mu) = (&row[..n], &f[..n], &g[..n], &mu[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        for lane in 0..4 {
            let y = 4 * c + lane;
            acc[lane] += (fx - f[y]) * (gx - g[y]) * row[y] * mu[y];
        }
    }
    let mut tail = 0.0;
    for y in 4 * chunks..n {
        tail += (fx - f[y]) * (gx - g[y]) * row[y] * mu[y];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `Σ_x Γ(f,g)(x)`.
pub(crate) fn gamma_sum(k: &MarkovKernel, f: &[f64], g: &[f64]) -> f64 {
    gamma(k, f, g, None).iter().sum()
}

/// `Σ_x w(x) Γ(f,g)(x)`.
pub(crate) fn gamma_weighted(k: &MarkovKernel, w: &[f64], f: &[f64], g: &[f64]) -> f64 {
    gamma(k, f, g, None).iter().zip(w).map(|(a, b)| a * b).sum()
}

/// Energy measure `Γ(f,g)`, optionally truncated to jumps of length at most `radius`.
pub fn energy_measure(
    k: &MarkovKernel,
    f: &VertexFunction,
    g: &VertexFunction,
    radius: Option<f64>,
) -> Result<VertexFunction> {
    check_len(k, f)?;
    check_len(k, g)?;
    if let Some(l) = radius {
        if !(l >= 0.0) {
            return Err(invalid(format!("truncation radius must be non-negative, got {l}")));
        }
    }
    VertexFunction::from_values(gamma(k, f, g, radius))
}

/// `E(f,g) = ⟨f, (I − K) g⟩` in `L²(μ)`.
pub fn dirichlet_form(k: &MarkovKernel, f: &VertexFunction, g: &VertexFunction) -> Result<f64> {
    check_len(k, f)?;
    check_len(k, g)?;
    Ok(form(k, f, g))
}

pub(crate) fn form(k: &MarkovKernel, f: &[f64], g: &[f64]) -> f64 {
    let mu = k.graph().measure();
    let kg = k.apply(g);
    f.iter()
        .zip(g)
        .zip(&kg)
        .zip(mu)
        .map(|(((a, b), c), m)| a * (b - c) * m)
        .sum()
}

/// Kernel with every entry outside `D × D` removed.
pub fn killed_kernel(k: &MarkovKernel, set: &[Vertex]) -> Result<MarkovKernel> {
    if set.is_empty() {
        return Err(invalid("killing set must be nonempty"));
    }
    let n = k.n();
    let mut inside = vec![false; n];
    for &v in set {
        k.graph().check_vertex(v)?;
        inside[v] = true;
    }
    let storage = match k.storage() {
        Storage::Dense(m) => {
            let mut m = m.clone();
            for x in 0..n {
                for y in 0..n {
                    if !(inside[x] && inside[y]) {
                        m[[x, y]] = 0.0;
                    }
                }
            }
            Storage::Dense(m)
        }
        Storage::Sparse(s) => {
            let mut offsets = vec![0];
            let mut cols = Vec::new();
            let mut vals = Vec::new();
            for x in 0..n {
                if inside[x] {
                    for (y, v) in s.row(x) {
                        if inside[y] {
                            cols.push(y);
                            vals.push(v);
                        }
                    }
                }
                offsets.push(cols.len());
            }
            Storage::Sparse(CsrMatrix {
                n,
                offsets,
                cols,
                vals,
            })
        }
    };
    Ok(MarkovKernel::from_parts(
        Arc::clone(k.graph()),
        storage,
        k.nominal_beta(),
        KernelKind::Killed,
    ))
}

/// Transition operator restricted to a vertex subset, in local indices.
struct LocalOperator {
    mu: Vec<f64>,
    rows: Vec<Vec<(usize, f64)>>,
}

impl LocalOperator {
    fn new(k: &MarkovKernel, set: &[Vertex]) -> Self {
        let mut local = vec![usize::MAX; k.n()];
        for (i, &v) in set.iter().enumerate() {
            local[v] = i;
        }
        let mu_all = k.graph().measure();
        let rows = set
            .iter()
            .map(|&x| {
                let mut row = Vec::new();
                k.for_each_in_row(x, |y, v| {
                    if local[y] != usize::MAX && v != 0.0 {
                        row.push((local[y], v * mu_all[y]));
                    }
                });
                row
            })
            .collect();
        LocalOperator {
            mu: set.iter().map(|&v| mu_all[v]).collect(),
            rows,
        }
    }

    fn apply(&self, u: &[f64], scale: f64) -> Vec<f64> {
        self.rows
            .par_iter()
            .map(|row| scale * row.iter().map(|&(j, t)| t * u[j]).sum::<f64>())
            .collect()
    }

    fn dot(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).zip(&self.mu).map(|((x, y), m)| x * y * m).sum()
    }

    fn norm(&self, a: &[f64]) -> f64 {
        self.dot(a, a).sqrt()
    }
}

/// How a resolvent solve finished.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub method: String,
    pub iterations: usize,
    pub relative_residual: f64,
}

/// `G_λ^D f = (I − K_D/(1+λ))^{-1} f`, computed on `D` and zero elsewhere.
pub fn resolvent(
    k: &MarkovKernel,
    set: &[Vertex],
    lambda: f64,
    f: &VertexFunction,
) -> Result<VertexFunction> {
    Ok(resolvent_with_stats(k, set, lambda, f)?.0)
}

/// [`resolvent`] together with solver diagnostics.
///
/// Sums the Neumann series first; if it has not converged after
/// `min(10(1 + 1/λ), NEUMANN_CAP)` terms, the partial sum seeds a conjugate
/// gradient solve in `L²(μ)`, where `I − K_D/(1+λ)` is symmetric positive definite.
pub fn resolvent_with_stats(
    k: &MarkovKernel,
    set: &[Vertex],
    lambda: f64,
    f: &VertexFunction,
) -> Result<(VertexFunction, SolveStats)> {
    check_len(k, f)?;
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(invalid(format!("lambda must be positive, got {lambda}")));
    }
    if set.is_empty() {
        return Err(invalid("resolvent set must be nonempty"));
    }
    let mut set = set.to_vec();
    set.sort_unstable();
    set.dedup();
    for &v in &set {
        k.graph().check_vertex(v)?;
    }
    let op = LocalOperator::new(k, &set);
    let rhs: Vec<f64> = set.iter().map(|&v| f[v]).collect();
    let scale = 1.0 / (1.0 + lambda);
    let norm_f = op.norm(&rhs);
    let lift = |u: Vec<f64>| {
        let mut out = vec![0.0; k.n()];
        for (i, &v) in set.iter().enumerate() {
            out[v] = u[i];
        }
        VertexFunction::from_values(out)
    };
    if norm_f == 0.0 {
        let stats = SolveStats {
            method: "neumann".into(),
            iterations: 0,
            relative_residual: 0.0,
        };
        return Ok((lift(vec![0.0; set.len()])?, stats));
    }
    let target = RESOLVENT_TOL * norm_f;

    let cap = ((10.0 * (1.0 + 1.0 / lambda)).ceil() as usize).min(NEUMANN_CAP);
    let mut sum = rhs.clone();
    let mut term = rhs.clone();
    for it in 0..cap {
        let next = op.apply(&term, scale);
        let residual = op.norm(&next);
        if residual <= target {
            let stats = SolveStats {
                method: "neumann".into(),
                iterations: it + 1,
                relative_residual: residual / norm_f,
            };
            return Ok((lift(sum)?, stats));
        }
        for (s, t) in sum.iter_mut().zip(&next) {
            *s += t;
        }
        term = next;
    }

    let (u, iterations, residual) = conjugate_gradient(&op, &rhs, sum, scale, target)?;
    let stats = SolveStats {
        method: "conjugate-gradient".into(),
        iterations: cap + iterations,
        relative_residual: residual / norm_f,
    };
    Ok((lift(u)?, stats))
}

fn conjugate_gradient(
    op: &LocalOperator,
    rhs: &[f64],
    mut x: Vec<f64>,
    scale: f64,
    target: f64,
) -> Result<(Vec<f64>, usize, f64)> {
    let apply_b = |u: &[f64]| -> Vec<f64> {
        let a = op.apply(u, scale);
        u.iter().zip(&a).map(|(p, q)| p - q).collect()
    };
    let true_residual = |x: &[f64]| -> Vec<f64> {
        let bx = apply_b(x);
        rhs.iter().zip(&bx).map(|(a, b)| a - b).collect()
    };
    let max_iter = 10 * rhs.len() + 100;
    let mut total = 0;
    let mut history = Vec::new();
    for _restart in 0..5 {
        let mut r = true_residual(&x);
        let mut rr = op.dot(&r, &r);
        history.push(rr.sqrt());
        if rr.sqrt() <= target {
            return Ok((x, total, rr.sqrt()));
        }
        let mut p = r.clone();
        for _ in 0..max_iter {
            total += 1;
            let bp = apply_b(&p);
            let pbp = op.dot(&p, &bp);
            if !(pbp > 0.0) {
                break;
            }
            let alpha = rr / pbp;
            for i in 0..x.len() {
                x[i] += alpha * p[i];
                r[i] -= alpha * bp[i];
            }
            let rr_new = op.dot(&r, &r);
            if rr_new.sqrt() <= 0.5 * target {
                break;
            }
            let beta = rr_new / rr;
            for i in 0..p.len() {
                p[i] = r[i] + beta * p[i];
            }
            rr = rr_new;
        }
    }
    let last = op.norm(&true_residual(&x));
    if last <= target {
        return Ok((x, total, last));
    }
    Err(Error::NumericalFailure(format!(
        "resolvent solve stalled after {total} iterations: residual {last:e} against target {target:e}; restart residuals {history:?}"
    )))
}

/// Output of [`funh_builder`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FunhReport {
    pub center: Vertex,
    pub inner_radius: f64,
    pub width: f64,
    pub beta: f64,
    pub lambda: f64,
    pub max_h: f64,
    /// `2 r^β`.
    pub bound: f64,
    /// `min_{D_2} h / r^β`.
    pub c1: f64,
    pub d0_size: usize,
    pub d1_size: usize,
    pub d2_size: usize,
    pub solve: SolveStats,
}

/// Annulus `B(x, R + a·r/10) ∖ B(x, R + b·r/10)` with `a > b`.
pub(crate) fn annulus(dist: &[u32], big_r: f64, r: f64, outer_tenths: u32, inner_tenths: u32) -> Vec<Vertex> {
    let outer = big_r + (outer_tenths as f64 * r) / 10.0;
    let inner = big_r + (inner_tenths as f64 * r) / 10.0;
    (0..dist.len())
        .filter(|&y| {
            let d = dist[y] as f64;
            d <= outer && d > inner
        })
        .collect()
}

/// `h = G_λ^{D_0} 1_{D_1}` with `λ = r^{-β}` on the nested annuli around `x0`.
pub fn funh_builder(
    k: &MarkovKernel,
    x0: Vertex,
    big_r: u32,
    r: u32,
) -> Result<(VertexFunction, FunhReport)> {
    funh_at(k, x0, big_r as f64, r as f64)
}

/// [`funh_builder`] for radii that need not be integers.
pub fn funh_at(
    k: &MarkovKernel,
    x0: Vertex,
    big_r: f64,
    r: f64,
) -> Result<(VertexFunction, FunhReport)> {
    if !(r > 10.0 && r.is_finite()) {
        return Err(invalid(format!("annulus width must exceed 10, got {r}")));
    }
    if !(big_r >= 0.0 && big_r.is_finite()) {
        return Err(invalid(format!("inner radius must be non-negative, got {big_r}")));
    }
    let beta = k.nominal_beta();
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(invalid("kernel has no jump index"));
    }
    let g = k.graph();
    g.check_ball_in_core(x0, big_r + (9.0 * r) / 10.0)?;
    let dist = g.distances_from(x0)?;
    let d0 = annulus(&dist, big_r, r, 9, 1);
    let d1 = annulus(&dist, big_r, r, 8, 2);
    let d2 = annulus(&dist, big_r, r, 6, 4);
    if d0.is_empty() || d1.is_empty() || d2.is_empty() {
        return Err(Error::InvalidGeometry(format!(
            "empty annulus around {x0} for R={big_r}, r={r}"
        )));
    }
    let lambda = r.powf(-beta);
    let (h, solve) = resolvent_with_stats(k, &d0, lambda, &VertexFunction::indicator(g, &d1))?;
    let scale = r.powf(beta);
    let max_h = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let c1 = d2.iter().map(|&y| h[y] / scale).fold(f64::INFINITY, f64::min);
    let report = FunhReport {
        center: x0,
        inner_radius: big_r,
        width: r,
        beta,
        lambda,
        max_h,
        bound: 2.0 * scale,
        c1,
        d0_size: d0.len(),
        d1_size: d1.len(),
        d2_size: d2.len(),
        solve,
    };
    Ok((h, report))
}

/// Largest violations of the form identities and smallest Stroock–Varopoulos slacks.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FormIdentityReport {
    pub samples: usize,
    pub seed: u64,
    /// Largest relative error per identity.
    pub identity_errors: BTreeMap<String, f64>,
    /// Smallest `(lhs − rhs)/scale` per inequality and exponent.
    pub inequality_slacks: BTreeMap<String, f64>,
}

impl FormIdentityReport {
    pub fn max_identity_error(&self) -> f64 {
        self.identity_errors.values().cloned().fold(0.0, f64::max)
    }

    pub fn min_slack(&self) -> f64 {
        self.inequality_slacks
            .values()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Exponents used for the Stroock–Varopoulos checks.
pub const SV_EXPONENTS: [u32; 3] = [1, 2, 4];

pub(crate) fn random_bounded(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect()
}

fn relative_gap(lhs: f64, rhs: f64, magnitude: f64) -> f64 {
    let scale = lhs.abs().max(rhs.abs()).max(magnitude);
    if scale == 0.0 {
        0.0
    } else {
        (lhs - rhs).abs() / scale
    }
}

fn abs_sum(v: &[f64]) -> f64 {
    v.iter().map(|a| a.abs()).sum()
}

fn mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

/// Evaluate the integration-by-parts, Leibniz and product identities on
/// random bounded `f, g, h`, and the Stroock–Varopoulos chains on random
/// nonnegative `f`.
///
/// Relative errors divide by the larger of both sides and the summed
/// magnitude of the pointwise terms.
pub fn verify_form_identities(k: &MarkovKernel, samples: usize, seed: u64) -> Result<FormIdentityReport> {
    if samples == 0 {
        return Err(invalid("samples must be at least 1"));
    }
    let n = k.n();
    let mu = k.graph().measure();
    let markov = k.kind().is_markov();
    let defect: Vec<f64> = k.row_masses().iter().map(|m| 1.0 - m).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errors: BTreeMap<String, f64> = BTreeMap::new();
    let mut slacks: BTreeMap<String, f64> = BTreeMap::new();
    let bump = |map: &mut BTreeMap<String, f64>, key: &str, v: f64, take_max: bool| {
        let e = map
            .entry(key.to_string())
            .or_insert(if take_max { 0.0 } else { f64::INFINITY });
        *e = if take_max { e.max(v) } else { e.min(v) };
    };

    for _ in 0..samples {
        let f = random_bounded(n, &mut rng);
        let g = random_bounded(n, &mut rng);
        let h = random_bounded(n, &mut rng);

        let energy = form(k, &f, &g);
        let gfg = gamma(k, &f, &g, None);
        let sum_gfg: f64 = gfg.iter().sum();
        let killing: Vec<f64> = (0..n).map(|x| f[x] * g[x] * defect[x] * mu[x]).collect();
        let kill_sum: f64 = killing.iter().sum();
        let mag = abs_sum(&gfg) + abs_sum(&killing);
        bump(&mut errors, "intp", relative_gap(energy, sum_gfg + kill_sum, mag), true);
        if markov {
            bump(&mut errors, "intp1", relative_gap(energy, sum_gfg, abs_sum(&gfg)), true);
        }

        let fg = mul(&f, &g);
        let lhs = gamma_sum(k, &fg, &h);
        let ggh = gamma(k, &g, &h, None);
        let gfh = gamma(k, &f, &h, None);
        let parts: Vec<f64> = (0..n).map(|x| f[x] * ggh[x] + g[x] * gfh[x]).collect();
        let rhs: f64 = parts.iter().sum();
        bump(&mut errors, "prod", relative_gap(lhs, rhs, abs_sum(&parts)), true);

        // Σ g Γ(f,h) = ½ Σ [Γ(gh,f) + Γ(gf,h) − Γ(g,fh)]
        let weighted: Vec<f64> = (0..n).map(|x| g[x] * gfh[x]).collect();
        let lhs: f64 = weighted.iter().sum();
        let a = gamma(k, &mul(&g, &h), &f, None);
        let b = gamma(k, &fg, &h, None);
        let c = gamma(k, &g, &mul(&f, &h), None);
        let combo: Vec<f64> = (0..n).map(|x| 0.5 * (a[x] + b[x] - c[x])).collect();
        let rhs: f64 = combo.iter().sum();
        let mag = abs_sum(&weighted).max(0.5 * (abs_sum(&a) + abs_sum(&b) + abs_sum(&c)));
        bump(&mut errors, "tech", relative_gap(lhs, rhs, mag), true);

        let nonneg: Vec<f64> = random_bounded(n, &mut rng).iter().map(|v| v.abs()).collect();
        let gff = gamma(k, &nonneg, &nonneg, None);
        for p in SV_EXPONENTS {
            let pf = p as f64;
            let odd: Vec<f64> = nonneg.iter().map(|v| v.powi(2 * p as i32 - 1)).collect();
            let pow_p: Vec<f64> = nonneg.iter().map(|v| v.powi(p as i32)).collect();
            let weight: Vec<f64> = nonneg.iter().map(|v| v.powi(2 * p as i32 - 2)).collect();
            let s_odd = gamma_sum(k, &odd, &nonneg);
            let s_weighted: f64 = weight.iter().zip(&gff).map(|(a, b)| a * b).sum();
            let s_pow = gamma_sum(k, &pow_p, &pow_p);
            let scale = s_odd.abs().max(s_weighted.abs()).max(s_pow.abs());
            let rel = |v: f64| if scale == 0.0 { 0.0 } else { v / scale };
            let s8 = rel((s_odd - s_weighted).min(s_weighted - s_odd / (2.0 * pf - 1.0)));
            let s9 = rel((s_pow - s_odd).min(s_odd - (2.0 * pf - 1.0) / (pf * pf) * s_pow));
            bump(&mut slacks, &format!("dv8_p{p}"), s8, false);
            bump(&mut slacks, &format!("dv9_p{p}"), s9, false);
        }
    }
    Ok(FormIdentityReport {
        samples,
        seed,
        identity_errors: errors,
        inequality_slacks: slacks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, GraphSpec};
    use crate::kernel::{heavy_tailed_kernel, nearest_neighbor_kernel};

    fn two_vertex() -> Arc<WeightedGraph> {
        Arc::new(
            WeightedGraph::from_edges(2, vec![(0, 1, 1.0)], vec![], vec![], None, 1.0, 2.0)
                .unwrap(),
        )
    }

    fn gasket(level: u32) -> Arc<WeightedGraph> {
        Arc::new(build_graph(&GraphSpec::Gasket { level }).unwrap())
    }

    #[test]
    fn two_vertex_energy_and_form() {
        let g = two_vertex();
        let k = nearest_neighbor_kernel(Arc::clone(&g), 0.0).unwrap();
        let f = VertexFunction::indicator(&g, &[0]);
        let gam = energy_measure(&k, &f, &f, None).unwrap();
        assert_eq!(gam[0], 0.5);
        assert_eq!(dirichlet_form(&k, &f, &f).unwrap(), 1.0);
    }

    #[test]
    fn constant_function_has_no_energy() {
        let g = gasket(3);
        let k = heavy_tailed_kernel(Arc::clone(&g), 2.1).unwrap();
        let c = VertexFunction::constant(&g, 3.0);
        let gam = energy_measure(&k, &c, &c, None).unwrap();
        assert!(gam.iter().all(|&v| v == 0.0));
        assert!(dirichlet_form(&k, &c, &c).unwrap().abs() < 1e-12);
    }

    #[test]
    fn truncation_at_diameter_is_exact() {
        let g = gasket(3);
        let k = heavy_tailed_kernel(Arc::clone(&g), 2.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = VertexFunction::new(&g, random_bounded(g.n_vertices(), &mut rng)).unwrap();
        let full = energy_measure(&k, &f, &f, None).unwrap();
        let same = energy_measure(&k, &f, &f, Some(g.diameter() as f64)).unwrap();
        assert_eq!(full, same);
        let local = energy_measure(&k, &f, &f, Some(1.0)).unwrap();
        assert!(local.iter().zip(full.iter()).all(|(a, b)| *a <= *b + 1e-15));
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let k = nearest_neighbor_kernel(gasket(2), 0.5).unwrap();
        let f = VertexFunction::from_values(vec![1.0; 3]).unwrap();
        assert!(matches!(
            energy_measure(&k, &f, &f, None),
            Err(Error::InvalidParameter(_))
        ));
        assert!(VertexFunction::from_values(vec![f64::NAN]).is_err());
    }

    #[test]
    fn killed_kernel_cases() {
        let g = two_vertex();
        let k = nearest_neighbor_kernel(Arc::clone(&g), 0.0).unwrap();
        let kd = killed_kernel(&k, &[0]).unwrap();
        assert_eq!(kd.to_dense().iter().cloned().fold(0.0, f64::max), 0.0);
        let all = killed_kernel(&k, &[0, 1]).unwrap();
        assert_eq!(all.to_dense(), k.to_dense());
        assert!(killed_kernel(&k, &[]).is_err());

        let gk = gasket(3);
        let k = nearest_neighbor_kernel(Arc::clone(&gk), 0.5).unwrap();
        let ball = gk.ball(0, 2.0).unwrap();
        let kd = killed_kernel(&k, &ball).unwrap();
        let mass = kd.row_masses();
        assert!(ball.iter().any(|&x| mass[x] < 1.0 - 1e-12));
        assert!(mass.iter().all(|&m| m <= 1.0 + 1e-12));
    }

    #[test]
    fn resolvent_of_constant() {
        let g = gasket(3);
        let k = heavy_tailed_kernel(Arc::clone(&g), 2.1).unwrap();
        let all: Vec<Vertex> = (0..g.n_vertices()).collect();
        let one = VertexFunction::constant(&g, 1.0);
        for &lambda in &[0.5, 0.01, 1e-4] {
            let (u, stats) = resolvent_with_stats(&k, &all, lambda, &one).unwrap();
            let expect = (1.0 + lambda) / lambda;
            for &v in u.iter() {
                assert!((v - expect).abs() < 1e-8 * expect, "lambda={lambda}: {v} vs {expect}");
            }
            if lambda == 1e-4 {
                assert_eq!(stats.method, "conjugate-gradient");
            }
        }
    }

    #[test]
    fn resolvent_single_vertex_and_large_lambda() {
        let g = two_vertex();
        let k = nearest_neighbor_kernel(Arc::clone(&g), 0.0).unwrap();
        let f = VertexFunction::new(&g, vec![2.5, -1.0]).unwrap();
        let u = resolvent(&k, &[0], 0.3, &f).unwrap();
        assert_eq!(u.values(), &[2.5, 0.0]);

        let gk = gasket(3);
        let k = heavy_tailed_kernel(Arc::clone(&gk), 2.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = VertexFunction::new(&gk, random_bounded(gk.n_vertices(), &mut rng)).unwrap();
        let all: Vec<Vertex> = (0..gk.n_vertices()).collect();
        let u = resolvent(&k, &all, 1e9, &f).unwrap();
        assert!(u.sup_distance(&f) < 1e-8);
    }

    #[test]
    fn resolvent_inverts_the_operator() {
        let g = gasket(4);
        let k = heavy_tailed_kernel(Arc::clone(&g), 2.1).unwrap();
        let set = g.ball(0, 6.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = VertexFunction::new(&g, random_bounded(g.n_vertices(), &mut rng)).unwrap();
        let lambda = 1e-3;
        let u = resolvent(&k, &set, lambda, &f).unwrap();
        let kd = killed_kernel(&k, &set).unwrap();
        let ku = kd.apply(&u);
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for &x in &set {
            let back = u[x] - ku[x] / (1.0 + lambda);
            worst = worst.max((back - f[x]).abs());
            scale = scale.max(f[x].abs());
        }
        assert!(worst <= 1e-9 * scale, "{worst}");
    }

    #[test]
    fn funh_bounds_on_small_gasket() {
        let g = gasket(6);
        let k = heavy_tailed_kernel(Arc::clone(&g), 2.1).unwrap();
        let (h, rep) = funh_builder(&k, 0, 4, 16).unwrap();
        assert!(rep.max_h <= rep.bound);
        assert!(rep.c1 > 0.0);
        let dist = g.distances_from(0).unwrap();
        for y in 0..g.n_vertices() {
            let d = dist[y] as f64;
            if d <= 4.0 + 1.6 || d > 4.0 + 14.4 {
                assert_eq!(h[y], 0.0);
            }
        }
        assert!(matches!(funh_builder(&k, 0, 4, 10), Err(Error::InvalidParameter(_))));
        assert!(matches!(funh_builder(&k, 0, 40, 30), Err(Error::InvalidGeometry(_))));
    }

    #[test]
    fn identities_hold_on_small_graph() {
        let g = gasket(3);
        let k = heavy_tailed_kernel(Arc::clone(&g), 2.1).unwrap();
        let rep = verify_form_identities(&k, 10, 3).unwrap();
        assert!(rep.max_identity_error() < 1e-12, "{:?}", rep.identity_errors);
        assert!(rep.min_slack() >= -1e-12, "{:?}", rep.inequality_slacks);
        assert_eq!(rep.inequality_slacks["dv8_p1"], 0.0);
        assert_eq!(rep.inequality_slacks["dv9_p1"], 0.0);

        let killed = killed_kernel(&k, &g.ball(0, 3.0).unwrap()).unwrap();
        let rep = verify_form_identities(&killed, 5, 3).unwrap();
        assert!(!rep.identity_errors.contains_key("intp1"));
        assert!(rep.max_identity_error() < 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let f = VertexFunction::from_values(vec![0.1, -2.0, 1e-300]).unwrap();
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"vertex,value\n0,0.1\n"));
        assert_eq!(VertexFunction::read_csv(&buf[..]).unwrap(), f);
        assert!(VertexFunction::read_csv(&b"v,w\n"[..]).is_err());
    }
}
