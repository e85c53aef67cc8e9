//! Envelopes and empirical checks of heat kernel, Nash and exit-time estimates.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cutoff::TestFunction;
use crate::dirichlet::form;
use crate::error::{invalid, Error, Result};
use crate::graph::{Vertex, WeightedGraph};
use crate::kernel::{propagate_rows, MarkovKernel, Witness};

/// Largest `trials × horizon` a Monte Carlo run may simulate.
pub const MC_STEP_BUDGET: u64 = 2_000_000_000;

/// `min(n^{-d_f/β}, n·max(d,1)^{-(d_f+β)})`; the first branch alone at `d = 0`.
pub fn hkp_envelope(n: u64, d: u64, df: f64, beta: f64) -> f64 {
    let n = n as f64;
    let on_diag = n.powf(-df / beta);
    if d == 0 {
        return on_diag;
    }
    on_diag.min(n * (d as f64).powf(-(df + beta)))
}

/// Continuous-time form of [`hkp_envelope`].
pub fn hkp_envelope_time(t: f64, d: f64, df: f64, beta: f64) -> f64 {
    let on_diag = t.powf(-df / beta);
    if d <= 0.0 {
        return on_diag;
    }
    on_diag.min(t * d.max(1.0).powf(-(df + beta)))
}

/// `n^{-d_f/d_w} exp(−(d^{d_w}/(c n))^{1/(d_w−1)})`.
pub fn sub_gaussian_envelope(n: u64, d: u64, df: f64, dw: f64, c: f64) -> f64 {
    let n = n as f64;
    let d = d as f64;
    n.powf(-df / dw) * (-(d.powf(dw) / (c * n)).powf(1.0 / (dw - 1.0))).exp()
}

/// One evaluated cell of an estimate check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EstimateCell {
    /// Step count or time.
    pub n: f64,
    pub x: Vertex,
    pub y: Vertex,
    pub d: u32,
    pub value: f64,
    pub envelope: f64,
    pub ratio: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub active_branch: Option<String>,
}

/// Constants restricted to one step count or time.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SliceConstants {
    pub n: f64,
    pub c_up: f64,
    pub c_low: f64,
}

/// Ratios of a kernel to an envelope over a grid, with two-sided constants.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EstimateReport {
    pub tag: String,
    pub cells: Vec<EstimateCell>,
    /// Largest ratio.
    pub c_up: f64,
    /// Reciprocal of the smallest positive ratio (0 when no lower bound is checked).
    pub c_low: f64,
    pub up_witness: Option<Witness>,
    pub low_witness: Option<Witness>,
    /// Cells with zero kernel value outside the validity window, left out of `c_low`.
    pub flagged_zero_cells: usize,
    pub slices: Vec<SliceConstants>,
    /// Largest ratio of slice constants between consecutive grid points.
    pub dyadic_drift: f64,
}

impl EstimateReport {
    pub(crate) fn from_cells(tag: &str, cells: Vec<EstimateCell>, lower: bool, flagged: usize) -> Self {
        let mut c_up: f64 = 0.0;
        let mut min_ratio = f64::INFINITY;
        let mut up_w = None;
        let mut low_w = None;
        let mut slices: BTreeMap<u64, (f64, f64, f64)> = BTreeMap::new();
        for c in &cells {
            let s = slices.entry(c.n.to_bits()).or_insert((c.n, 0.0, f64::INFINITY));
            if c.ratio > c_up {
                c_up = c.ratio;
                up_w = Some(Witness { x: c.x, y: c.y, scale: c.n });
            }
            s.1 = s.1.max(c.ratio);
            if lower && c.ratio > 0.0 {
                if c.ratio < min_ratio {
                    min_ratio = c.ratio;
                    low_w = Some(Witness { x: c.x, y: c.y, scale: c.n });
                }
                s.2 = s.2.min(c.ratio);
            }
        }
        let mut slices: Vec<SliceConstants> = slices
            .into_values()
            .map(|(n, up, lo)| SliceConstants {
                n,
                c_up: up,
                c_low: if lower { 1.0 / lo } else { 0.0 },
            })
            .collect();
        slices.sort_by(|a, b| a.n.total_cmp(&b.n));
        let mut drift: f64 = 1.0;
        for w in slices.windows(2) {
            drift = drift.max(ratio_spread(w[0].c_up, w[1].c_up));
            if lower {
                drift = drift.max(ratio_spread(w[0].c_low, w[1].c_low));
            }
        }
        EstimateReport {
            tag: tag.to_string(),
            cells,
            c_up,
            c_low: if lower { 1.0 / min_ratio } else { 0.0 },
            up_witness: up_w,
            low_witness: low_w,
            flagged_zero_cells: flagged,
            slices,
            dyadic_drift: drift,
        }
    }

    /// CSV with columns `tag,n,x,y,d,k_n,envelope,ratio`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "tag,n,x,y,d,k_n,envelope,ratio")?;
        for c in &self.cells {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                self.tag, c.n, c.x, c.y, c.d, c.value, c.envelope, c.ratio
            )?;
        }
        Ok(())
    }

    /// CSV with columns `x,y,d,t,h_t,envelope,ratio,lambda,active_branch`.
    pub fn write_time_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "x,y,d,t,h_t,envelope,ratio,lambda,active_branch")?;
        for c in &self.cells {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                c.x,
                c.y,
                c.d,
                c.n,
                c.value,
                c.envelope,
                c.ratio,
                c.lambda.unwrap_or(f64::NAN),
                c.active_branch.as_deref().unwrap_or("")
            )?;
        }
        Ok(())
    }
}

/// `max(a/b, b/a)`, with `0/0` read as 1.
pub fn ratio_spread(a: f64, b: f64) -> f64 {
    if a == b {
        1.0
    } else if a == 0.0 || b == 0.0 {
        f64::INFINITY
    } else {
        (a / b).max(b / a)
    }
}

/// Core pairs `(x, y)` with `d(x,y) ≤ d_max`, for each of the given sources.
pub fn core_pairs_within(g: &WeightedGraph, sources: &[Vertex], d_max: u32) -> Result<Vec<(Vertex, Vertex)>> {
    let mut out = Vec::new();
    for &x in sources {
        let dist = g.distances_from(x)?;
        for y in 0..g.n_vertices() {
            if dist[y] <= d_max && g.is_core(y) {
                out.push((x, y));
            }
        }
    }
    Ok(out)
}

fn group_pairs(g: &WeightedGraph, pairs: &[(Vertex, Vertex)]) -> Result<BTreeMap<Vertex, Vec<Vertex>>> {
    let mut by_source: BTreeMap<Vertex, Vec<Vertex>> = BTreeMap::new();
    for &(x, y) in pairs {
        g.check_vertex(x)?;
        g.check_vertex(y)?;
        if !g.is_core(x) || !g.is_core(y) {
            return Err(Error::InvalidGeometry(format!("pair ({x},{y}) leaves the core")));
        }
        by_source.entry(x).or_default().push(y);
    }
    Ok(by_source)
}

fn check_grid(n_grid: &[u64], pairs: &[(Vertex, Vertex)]) -> Result<Vec<u64>> {
    if n_grid.is_empty() || pairs.is_empty() {
        return Err(invalid("estimate grid must be nonempty"));
    }
    if n_grid.contains(&0) {
        return Err(invalid("step counts must be at least 1"));
    }
    let mut grid = n_grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    Ok(grid)
}

pub(crate) fn check_boundary_rule(g: &WeightedGraph, n_max: f64, beta: f64) -> Result<()> {
    let limit = (g.core_radius() as f64).powf(beta) / 4.0;
    if n_max > limit {
        return Err(Error::BoundaryContamination(format!(
            "n = {n_max} exceeds core_radius^beta / 4 = {limit:.1}"
        )));
    }
    Ok(())
}

/// Evaluate `k_n(x,y)` against the stable-like envelope on a grid of step counts.
///
/// Zero kernel values at `n < d` are flagged and skipped for the lower
/// constant; at `n ≥ d` they are an invariant violation.
pub fn check_hkp(
    k: &MarkovKernel,
    n_grid: &[u64],
    pairs: &[(Vertex, Vertex)],
    df: f64,
    beta: f64,
) -> Result<EstimateReport> {
    let grid = check_grid(n_grid, pairs)?;
    let g = k.graph();
    let n_max = *grid.last().unwrap();
    check_boundary_rule(g, n_max as f64, beta)?;
    let by_source = group_pairs(g, pairs)?;
    let sources: Vec<Vertex> = by_source.keys().copied().collect();
    let dists: Vec<_> = sources
        .iter()
        .map(|&x| g.distances_from(x))
        .collect::<Result<_>>()?;

    let mut cells = Vec::new();
    let mut flagged = 0;
    let mut failure = None;
    propagate_rows(k, &sources, n_max as usize, |n, rows| {
        if grid.binary_search(&(n as u64)).is_err() {
            return;
        }
        for (i, (&x, ys)) in by_source.iter().enumerate() {
            for &y in ys {
                let d = dists[i][y];
                let value = rows[[i, y]];
                let envelope = hkp_envelope(n as u64, d as u64, df, beta);
                if value == 0.0 {
                    if (n as u32) < d {
                        flagged += 1;
                        continue;
                    }
                    failure.get_or_insert((n, x, y, d));
                }
                cells.push(EstimateCell {
                    n: n as f64,
                    x,
                    y,
                    d,
                    value,
                    envelope,
                    ratio: value / envelope,
                    lambda: None,
                    active_branch: None,
                });
            }
        }
    });
    if let Some((n, x, y, d)) = failure {
        return Err(Error::InvariantViolation(format!(
            "k_{n}({x},{y}) = 0 at distance {d} inside the validity window"
        )));
    }
    Ok(EstimateReport::from_cells("hkp", cells, true, flagged))
}

/// Sub-Gaussian check: upper ratios `k_n / envelope` on every cell, lower
/// ratios `(k_n + k_{n+1}) / envelope` only where `n ≥ d`.
pub fn check_sub_gaussian(
    k: &MarkovKernel,
    n_grid: &[u64],
    pairs: &[(Vertex, Vertex)],
    df: f64,
    dw: f64,
    c: f64,
) -> Result<(EstimateReport, EstimateReport)> {
    let grid = check_grid(n_grid, pairs)?;
    if !(dw > 1.0 && c > 0.0) {
        return Err(invalid("need d_w > 1 and c > 0"));
    }
    let g = k.graph();
    let n_max = *grid.last().unwrap();
    check_boundary_rule(g, (n_max + 1) as f64, dw)?;
    let by_source = group_pairs(g, pairs)?;
    let sources: Vec<Vertex> = by_source.keys().copied().collect();
    let dists: Vec<_> = sources
        .iter()
        .map(|&x| g.distances_from(x))
        .collect::<Result<_>>()?;
    let mut upper = Vec::new();
    let mut lower = Vec::new();
    let mut previous: Option<ndarray::Array2<f64>> = None;
    propagate_rows(k, &sources, n_max as usize + 1, |n, rows| {
        let n64 = n as u64;
        if grid.binary_search(&n64).is_ok() {
            for (i, (&x, ys)) in by_source.iter().enumerate() {
                for &y in ys {
                    let d = dists[i][y];
                    let env = sub_gaussian_envelope(n64, d as u64, df, dw, c);
                    let value = rows[[i, y]];
                    upper.push(EstimateCell {
                        n: n as f64,
                        x,
                        y,
                        d,
                        value,
                        envelope: env,
                        ratio: value / env,
                        lambda: None,
                        active_branch: None,
                    });
                }
            }
        }
        if let Some(prev) = &previous {
            let m = n64 - 1;
            if grid.binary_search(&m).is_ok() {
                for (i, (&x, ys)) in by_source.iter().enumerate() {
                    for &y in ys {
                        let d = dists[i][y];
                        if m < d as u64 {
                            continue;
                        }
                        let env = sub_gaussian_envelope(m, d as u64, df, dw, c);
                        let value = prev[[i, y]] + rows[[i, y]];
                        lower.push(EstimateCell {
                            n: m as f64,
                            x,
                            y,
                            d,
                            value,
                            envelope: env,
                            ratio: value / env,
                            lambda: None,
                            active_branch: None,
                        });
                    }
                }
            }
        }
        previous = Some(rows.clone());
    });
    Ok((
        EstimateReport::from_cells("usg", upper, false, 0),
        EstimateReport::from_cells("lsg", lower, true, 0),
    ))
}

/// Monte Carlo estimate of exit probabilities at one radius.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SurvivalCell {
    pub r: u32,
    pub delta: f64,
    pub horizon: u64,
    pub p_hat: f64,
    pub half_width: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SurvivalReport {
    pub x: Vertex,
    pub trials: u64,
    pub seed: u64,
    pub cells: Vec<SurvivalCell>,
    /// `sup P̂(d(Y_n,x) ≥ s) s^β / n` over the sampled steps and `s ≤ r`.
    pub tail_constant: f64,
    pub tail_witness: Option<(u64, u32)>,
}

impl SurvivalReport {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "x,r,delta,horizon,p_hat,half_width,trials,seed")?;
        for c in &self.cells {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                self.x, c.r, c.delta, c.horizon, c.p_hat, c.half_width, self.trials, self.seed
            )?;
        }
        Ok(())
    }

    /// Append the cells of another run at the same center.
    pub fn merge(&mut self, other: SurvivalReport) {
        self.cells.extend(other.cells);
        if other.tail_constant > self.tail_constant {
            self.tail_constant = other.tail_constant;
            self.tail_witness = other.tail_witness;
        }
    }
}

/// Lazily built cumulative transition rows for inverse-CDF sampling.
struct RowSampler<'a> {
    k: &'a MarkovKernel,
    rows: Vec<OnceLock<(Vec<Vertex>, Vec<f64>)>>,
}

impl<'a> RowSampler<'a> {
    fn new(k: &'a MarkovKernel) -> Self {
        RowSampler {
            k,
            rows: (0..k.n()).map(|_| OnceLock::new()).collect(),
        }
    }

    fn step(&self, x: Vertex, u: f64) -> Vertex {
        let (cols, cdf) = self.rows[x].get_or_init(|| {
            let mu = self.k.graph().measure();
            let mut cols = Vec::new();
            let mut cdf = Vec::new();
            let mut acc = 0.0;
            self.k.for_each_in_row(x, |y, v| {
                if v > 0.0 {
                    acc += v * mu[y];
                    cols.push(y);
                    cdf.push(acc);
                }
            });
            (cols, cdf)
        });
        // scale by the row total so rounding in the cumulative sum cannot strand u
        let target = u * cdf.last().copied().unwrap_or(0.0);
        let i = cdf.partition_point(|&c| c <= target).min(cols.len() - 1);
        cols[i]
    }
}

/// Exit probabilities `P_x(τ_{B(x,r)} ≤ δ r^β)` by simulation.
///
/// Each trial draws from its own ChaCha stream, so results do not depend on
/// the number of worker threads. The walk keeps running after exit up to the
/// longest horizon to sample the jump tail `P(d(Y_n,x) ≥ s)`.
pub fn mc_exit_time(
    k: &MarkovKernel,
    x: Vertex,
    r: u32,
    delta_grid: &[f64],
    trials: u64,
    seed: u64,
) -> Result<SurvivalReport> {
    if trials < 1000 {
        return Err(invalid(format!("need at least 1000 trials, got {trials}")));
    }
    if delta_grid.is_empty() || delta_grid.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
        return Err(invalid("delta grid must hold positive values"));
    }
    if r == 0 {
        return Err(invalid("radius must be positive"));
    }
    let beta = k.nominal_beta();
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(invalid("kernel has no jump index"));
    }
    let g = k.graph();
    g.check_ball_in_core(x, r as f64)?;
    let scale = (r as f64).powf(beta);
    let horizons: Vec<u64> = delta_grid.iter().map(|d| (d * scale).floor() as u64).collect();
    let h_max = horizons.iter().copied().max().unwrap_or(0);
    if trials.saturating_mul(h_max) > MC_STEP_BUDGET {
        return Err(Error::ResourceLimit(format!(
            "{trials} trials of {h_max} steps exceed the step budget {MC_STEP_BUDGET}"
        )));
    }
    let dist = g.distances_from(x)?;
    let sampler = RowSampler::new(k);
    let checkpoints: Vec<u64> = std::iter::successors(Some(1u64), |s| Some(s * 2))
        .take_while(|&s| s <= h_max)
        .collect();

    // per trial: exit step (u64::MAX if none within h_max) and distances at checkpoints
    let outcomes: Vec<(u64, Vec<u32>)> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(trial);
            let mut pos = x;
            let mut exit = u64::MAX;
            let mut marks = Vec::with_capacity(checkpoints.len());
            let mut next_mark = 0;
            for step in 1..=h_max {
                pos = sampler.step(pos, rng.gen::<f64>());
                if exit == u64::MAX && dist[pos] > r {
                    exit = step;
                }
                if next_mark < checkpoints.len() && checkpoints[next_mark] == step {
                    marks.push(dist[pos]);
                    next_mark += 1;
                }
            }
            (exit, marks)
        })
        .collect();

    let t = trials as f64;
    let cells = delta_grid
        .iter()
        .zip(&horizons)
        .map(|(&delta, &horizon)| {
            let hits = outcomes.iter().filter(|(e, _)| *e <= horizon).count() as f64;
            let p = hits / t;
            SurvivalCell {
                r,
                delta,
                horizon,
                p_hat: p,
                half_width: 1.96 * (p * (1.0 - p) / t).sqrt(),
            }
        })
        .collect();

    let mut tail_constant = 0.0;
    let mut tail_witness = None;
    for (i, &step) in checkpoints.iter().enumerate() {
        for s in 1..=r {
            let count = outcomes.iter().filter(|(_, m)| m[i] >= s).count() as f64;
            let c = count / t * (s as f64).powf(beta) / step as f64;
            if c > tail_constant {
                tail_constant = c;
                tail_witness = Some((step, s));
            }
        }
    }
    Ok(SurvivalReport {
        x,
        trials,
        seed,
        cells,
        tail_constant,
        tail_witness,
    })
}

/// Largest Nash ratio over a test family.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NashReport {
    pub constant: f64,
    pub witness: Option<String>,
    pub ratios: Vec<(String, f64)>,
    pub skipped: Vec<String>,
}

/// `max_f ‖f‖₂^{2(1+β/d_f)} / (E(f,f) ‖f‖₁^{2β/d_f})`; functions with
/// `E(f,f) ≤ 0` (constants in particular) are skipped with a note.
pub fn nash_constant(k: &MarkovKernel, df: f64, beta: f64, test_fs: &[TestFunction]) -> Result<NashReport> {
    if test_fs.is_empty() {
        return Err(invalid("test family must be nonempty"));
    }
    if !(df > 0.0 && beta > 0.0) {
        return Err(invalid("d_f and beta must be positive"));
    }
    let mu = k.graph().measure();
    let mut ratios = Vec::new();
    let mut skipped = Vec::new();
    let mut best = 0.0;
    let mut witness = None;
    for tf in test_fs {
        if tf.values.len() != k.n() {
            return Err(invalid(format!("test function {} has the wrong length", tf.id)));
        }
        let first = tf.values[0];
        if tf.values.iter().all(|&v| v == first) {
            skipped.push(format!("{}: constant function, energy vanishes", tf.id));
            continue;
        }
        let energy = form(k, &tf.values, &tf.values);
        if !(energy > 0.0) {
            skipped.push(format!("{}: non-positive energy {energy}", tf.id));
            continue;
        }
        let l1: f64 = tf.values.iter().zip(mu).map(|(v, m)| v.abs() * m).sum();
        let l2sq: f64 = tf.values.iter().zip(mu).map(|(v, m)| v * v * m).sum();
        let lhs = l2sq.powf(1.0 + beta / df);
        let ratio = lhs / (energy * l1.powf(2.0 * beta / df));
        if ratio > best {
            best = ratio;
            witness = Some(tf.id.clone());
        }
        ratios.push((tf.id.clone(), ratio));
    }
    Ok(NashReport {
        constant: best,
        witness,
        ratios,
        skipped,
    })
}

/// Ball indicators `1_{B(x,ρ)}` for each radius.
pub fn ball_family(g: &WeightedGraph, x: Vertex, radii: &[u32]) -> Result<Vec<TestFunction>> {
    radii
        .iter()
        .map(|&rho| {
            Ok(TestFunction {
                id: format!("ball-{rho}"),
                values: crate::dirichlet::VertexFunction::indicator(g, &g.ball(x, rho as f64)?),
            })
        })
        .collect()
}
