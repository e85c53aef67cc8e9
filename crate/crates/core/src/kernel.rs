//! μ-symmetric Markov kernels on weighted graphs.
//!
//! Kernels are stored with respect to the vertex measure: the one-step
//! transition probability is `P(x, y) = k(x, y) μ(y)`, and the operator acts
//! as `Kf(x) = Σ_y k(x, y) f(y) μ(y)`. Symmetry of `k` is μ-reversibility.

use std::io::{Read, Write};
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::graph::{Vertex, WeightedGraph, ALL_PAIRS_LIMIT};

/// Bytes of kernel matrices `iterate_kernel` may hold at once.
pub const MEMORY_BUDGET: usize = 1 << 31;
/// Largest Poisson truncation accepted by the uniformization routines.
pub const MAX_UNIFORMIZATION_TERMS: usize = 20_000;

const CACHE_MAGIC: &[u8; 4] = b"HKLB";
const CACHE_VERSION: u32 = 1;

/// Compressed sparse rows of kernel values.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    pub n: usize,
    pub offsets: Vec<usize>,
    pub cols: Vec<Vertex>,
    pub vals: Vec<f64>,
}

impl CsrMatrix {
    pub fn row(&self, x: Vertex) -> impl Iterator<Item = (Vertex, f64)> + '_ {
        let r = self.offsets[x]..self.offsets[x + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn get(&self, x: Vertex, y: Vertex) -> f64 {
        let r = self.offsets[x]..self.offsets[x + 1];
        match self.cols[r.clone()].binary_search(&y) {
            Ok(i) => self.vals[r.start + i],
            Err(_) => 0.0,
        }
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Storage {
    Dense(Array2<f64>),
    Sparse(CsrMatrix),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum KernelKind {
    NearestNeighbor { lazy: f64 },
    DirectHeavyTail,
    Subordinated { n_terms: usize },
    Perturbed { seed: u64, amplitude: f64 },
    Killed,
    MeyerSmall { radius: f64 },
    MeyerLarge { radius: f64 },
    Power { n: usize },
    Semigroup { t: f64 },
}

impl KernelKind {
    /// Whether rows are expected to carry full mass.
    pub fn is_markov(&self) -> bool {
        !matches!(
            self,
            KernelKind::Killed | KernelKind::MeyerSmall { .. } | KernelKind::MeyerLarge { .. }
        )
    }
}

#[derive(Clone, Debug)]
pub struct MarkovKernel {
    graph: Arc<WeightedGraph>,
    storage: Storage,
    nominal_beta: f64,
    kind: KernelKind,
    warnings: Vec<String>,
}

impl MarkovKernel {
    pub(crate) fn from_parts(
        graph: Arc<WeightedGraph>,
        storage: Storage,
        nominal_beta: f64,
        kind: KernelKind,
    ) -> Self {
        MarkovKernel {
            graph,
            storage,
            nominal_beta,
            kind,
            warnings: Vec::new(),
        }
    }

    /// Wrap a dense matrix of kernel values. No Markov or symmetry check is made.
    pub fn from_dense(
        graph: Arc<WeightedGraph>,
        values: Array2<f64>,
        nominal_beta: f64,
        kind: KernelKind,
    ) -> Result<Self> {
        let n = graph.n_vertices();
        if values.dim() != (n, n) {
            return Err(invalid(format!(
                "kernel is {:?}, graph has {n} vertices",
                values.dim()
            )));
        }
        Ok(Self::from_parts(graph, Storage::Dense(values), nominal_beta, kind))
    }

    pub fn graph(&self) -> &Arc<WeightedGraph> {
        &self.graph
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    pub fn kind(&self) -> &KernelKind {
        &self.kind
    }

    pub fn nominal_beta(&self) -> f64 {
        self.nominal_beta
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub(crate) fn with_warnings(mut self, warnings: Vec<String>) -> Self {
        self.warnings = warnings;
        self
    }

    pub fn n(&self) -> usize {
        self.graph.n_vertices()
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.storage, Storage::Dense(_))
    }

    pub fn value(&self, x: Vertex, y: Vertex) -> f64 {
        match &self.storage {
            Storage::Dense(m) => m[[x, y]],
            Storage::Sparse(s) => s.get(x, y),
        }
    }

    /// Visit the stored entries of row `x`; dense rows visit every column.
    #[inline]
    pub fn for_each_in_row(&self, x: Vertex, mut f: impl FnMut(Vertex, f64)) {
        match &self.storage {
            Storage::Dense(m) => {
                for (y, &v) in m.row(x).iter().enumerate() {
                    f(y, v);
                }
            }
            Storage::Sparse(s) => {
                for (y, v) in s.row(x) {
                    f(y, v);
                }
            }
        }
    }

    pub fn dense_values(&self) -> Option<&Array2<f64>> {
        match &self.storage {
            Storage::Dense(m) => Some(m),
            Storage::Sparse(_) => None,
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        match &self.storage {
            Storage::Dense(m) => m.clone(),
            Storage::Sparse(s) => {
                let mut m = Array2::zeros((s.n, s.n));
                for x in 0..s.n {
                    for (y, v) in s.row(x) {
                        m[[x, y]] = v;
                    }
                }
                m
            }
        }
    }

    /// Dense copy of this kernel, or a resource error beyond the dense limit.
    pub fn densified(&self) -> Result<MarkovKernel> {
        if self.n() > ALL_PAIRS_LIMIT {
            return Err(Error::ResourceLimit(format!(
                "dense storage requested for {} vertices",
                self.n()
            )));
        }
        let mut k = self.clone();
        k.storage = Storage::Dense(self.to_dense());
        Ok(k)
    }

    /// `Kf(x) = Σ_y k(x,y) f(y) μ(y)`.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let mu = self.graph.measure();
        let fm: Vec<f64> = f.iter().zip(mu).map(|(a, b)| a * b).collect();
        if let Storage::Dense(m) = &self.storage {
            return m.dot(&ArrayView1::from(&fm[..])).to_vec();
        }
        (0..self.n())
            .into_par_iter()
            .map(|x| {
                let mut acc = 0.0;
                self.for_each_in_row(x, |y, v| acc += v * fm[y]);
                acc
            })
            .collect()
    }

    /// `K1(x) = Σ_y k(x,y) μ(y)`, the mass retained after one step from `x`.
    pub fn row_masses(&self) -> Vec<f64> {
        self.apply(&vec![1.0; self.n()])
    }

    /// Largest relative deviation of a row mass from one.
    pub fn markov_defect(&self) -> f64 {
        self.row_masses()
            .iter()
            .map(|m| (m - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// `max |k(x,y) − k(y,x)| / max |k|`.
    pub fn symmetry_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for x in 0..self.n() {
            self.for_each_in_row(x, |y, v| {
                scale = scale.max(v.abs());
                worst = worst.max((v - self.value(y, x)).abs());
            });
        }
        if scale == 0.0 {
            0.0
        } else {
            worst / scale
        }
    }

    pub fn min_value(&self) -> f64 {
        match &self.storage {
            Storage::Dense(m) => m.iter().cloned().fold(f64::INFINITY, f64::min),
            Storage::Sparse(s) => s.vals.iter().cloned().fold(0.0, f64::min),
        }
    }

    /// One more step on a block of kernel rows: `R ↦ R diag(μ) K`.
    pub fn step_rows(&self, rows: &Array2<f64>) -> Array2<f64> {
        let mu = Array1::from(self.graph.measure().to_vec());
        let scaled = rows * &mu.view().insert_axis(Axis(0));
        match &self.storage {
            Storage::Dense(m) => scaled.dot(m),
            Storage::Sparse(s) => {
                // symmetric: (R diag μ K)[i, y] = Σ_z k(y, z) R[i, z] μ(z)
                let mut out = Array2::zeros(rows.dim());
                for (i, src) in scaled.axis_iter(Axis(0)).enumerate() {
                    for y in 0..s.n {
                        let mut acc = 0.0;
                        for (z, v) in s.row(y) {
                            acc += v * src[z];
                        }
                        out[[i, y]] = acc;
                    }
                }
                out
            }
        }
    }

    /// Kernel rows `k(x, ·)` for the given sources, one row per source.
    pub fn rows(&self, sources: &[Vertex]) -> Array2<f64> {
        let mut out = Array2::zeros((sources.len(), self.n()));
        for (i, &x) in sources.iter().enumerate() {
            self.for_each_in_row(x, |y, v| out[[i, y]] = v);
        }
        out
    }
}

/// Lazy nearest-neighbor kernel `lazy·δ/μ + (1 − lazy) μ_xy/(μ(x)μ(y))`.
pub fn nearest_neighbor_kernel(g: Arc<WeightedGraph>, lazy: f64) -> Result<MarkovKernel> {
    if !(0.0..1.0).contains(&lazy) {
        return Err(invalid(format!("laziness must lie in [0, 1), got {lazy}")));
    }
    let n = g.n_vertices();
    let mu = g.measure();
    let mut offsets = Vec::with_capacity(n + 1);
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    offsets.push(0);
    for x in 0..n {
        let mut entries: Vec<(Vertex, f64)> = g
            .edges_of(x)
            .map(|(y, w)| (y, (1.0 - lazy) * w / (mu[x] * mu[y])))
            .collect();
        if lazy > 0.0 {
            entries.push((x, lazy / mu[x]));
        }
        entries.sort_by_key(|e| e.0);
        for (y, v) in entries {
            cols.push(y);
            vals.push(v);
        }
        offsets.push(cols.len());
    }
    let csr = CsrMatrix {
        n,
        offsets,
        cols,
        vals,
    };
    Ok(MarkovKernel::from_parts(
        g,
        Storage::Sparse(csr),
        f64::NAN,
        KernelKind::NearestNeighbor { lazy },
    ))
}

/// Direct heavy-tailed kernel with off-diagonal values `(1 + d)^{-(d_f+β)} / Z`.
///
/// `Z = 2 max_x s(x)` where `s(x)` is the off-diagonal mass of the unnormalized
/// profile; the diagonal absorbs the remaining mass, so every `k(x,x) ≥ 1/(2μ(x))`.
pub fn heavy_tailed_kernel(g: Arc<WeightedGraph>, beta: f64) -> Result<MarkovKernel> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(invalid(format!("beta must be positive, got {beta}")));
    }
    let table = g.all_pairs()?;
    let n = g.n_vertices();
    let mu = g.measure();
    let exponent = -(g.nominal_df() + beta);
    let max_d = (0..n).flat_map(|x| table.row(x).iter().copied()).max().unwrap_or(0) as usize;
    let profile: Vec<f64> = (0..=max_d).map(|d| (1.0 + d as f64).powf(exponent)).collect();
    let mut a = Array2::zeros((n, n));
    let mut s = vec![0.0; n];
    for x in 0..n {
        let row = table.row(x);
        let mut acc = 0.0;
        for y in 0..n {
            if y != x {
                let v = profile[row[y] as usize];
                a[[x, y]] = v;
                acc += v * mu[y];
            }
        }
        s[x] = acc;
    }
    let z = 2.0 * s.iter().cloned().fold(0.0, f64::max);
    a.mapv_inplace(|v| v / z);
    for x in 0..n {
        a[[x, x]] = (z - s[x]) / (z * mu[x]);
    }
    Ok(MarkovKernel::from_parts(
        g,
        Storage::Dense(a),
        beta,
        KernelKind::DirectHeavyTail,
    ))
}

/// Normalized weights `c_m ∝ m^{-1-β/d_w}`, `m = 1..=n_terms`.
pub fn subordination_weights(beta: f64, dw: f64, n_terms: usize) -> Vec<f64> {
    let raw: Vec<f64> = (1..=n_terms)
        .map(|m| (m as f64).powf(-1.0 - beta / dw))
        .collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|c| c / z).collect()
}

/// `K = Σ_{m=1}^{n_terms} c_m P^m` for a nearest-neighbor base kernel `P`.
pub fn subordinate_kernel(
    base: &MarkovKernel,
    beta: f64,
    dw: f64,
    n_terms: usize,
) -> Result<MarkovKernel> {
    if !matches!(base.kind(), KernelKind::NearestNeighbor { .. }) {
        return Err(invalid("subordination expects a nearest-neighbor base kernel"));
    }
    if !(beta > 0.0 && beta < dw) {
        return Err(invalid(format!("need 0 < beta < d_w, got beta={beta}, d_w={dw}")));
    }
    if n_terms == 0 {
        return Err(invalid("n_terms must be at least 1"));
    }
    let g = Arc::clone(base.graph());
    let n = g.n_vertices();
    if n > ALL_PAIRS_LIMIT {
        return Err(Error::ResourceLimit(format!(
            "subordinated kernel on {n} vertices exceeds the dense limit"
        )));
    }
    let mu = g.measure().to_vec();
    let Storage::Sparse(p) = base.storage() else {
        return Err(invalid("nearest-neighbor kernel must be sparse"));
    };
    // transition probabilities P(x,y) = p(x,y) μ(y)
    let trans: Vec<Vec<(Vertex, f64)>> = (0..n)
        .map(|x| p.row(x).map(|(y, v)| (y, v * mu[y])).collect())
        .collect();
    let c = subordination_weights(beta, dw, n_terms);

    // Horner, M ← c_m I + P M from m = n_terms down to 1, then M ← P M.
    // Columns evolve independently, so each block of columns runs the whole
    // recursion while it fits in cache.
    const BLOCK: usize = 32;
    let blocks: Vec<(usize, Vec<f64>)> = (0..n)
        .step_by(BLOCK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|c0| {
            let w = BLOCK.min(n - c0);
            let mut cur = vec![0.0; n * w];
            let mut next = vec![0.0; n * w];
            for j in 0..w {
                cur[(c0 + j) * w + j] = c[n_terms - 1];
            }
            for m in (0..n_terms).rev() {
                for x in 0..n {
                    let out = &mut next[x * w..(x + 1) * w];
                    out.fill(0.0);
                    for &(z, t) in &trans[x] {
                        let src = &cur[z * w..(z + 1) * w];
                        for (o, s) in out.iter_mut().zip(src) {
                            *o += t * s;
                        }
                    }
                }
                if m > 0 {
                    for j in 0..w {
                        next[(c0 + j) * w + j] += c[m - 1];
                    }
                }
                std::mem::swap(&mut cur, &mut next);
            }
            (c0, cur)
        })
        .collect();
    let mut cur = vec![0.0; n * n];
    for (c0, block) in blocks {
        let w = BLOCK.min(n - c0);
        for x in 0..n {
            cur[x * n + c0..x * n + c0 + w].copy_from_slice(&block[x * w..(x + 1) * w]);
        }
    }

    let mut k = Array2::from_shape_vec((n, n), cur).expect("shape");
    for x in 0..n {
        for y in 0..n {
            k[[x, y]] /= mu[y];
        }
    }
    symmetrize(&mut k);

    let mut kernel =
        MarkovKernel::from_parts(g, Storage::Dense(k), beta, KernelKind::Subordinated { n_terms });
    let resolve = (kernel.graph.core_radius() as f64).powf(dw);
    if (n_terms as f64) < resolve {
        kernel.warnings.push(format!(
            "n_terms = {n_terms} is below core_radius^d_w = {resolve:.0}; the jump tail is truncated at long range"
        ));
    }
    Ok(kernel)
}

fn symmetrize(k: &mut Array2<f64>) {
    let n = k.nrows();
    for x in 0..n {
        for y in (x + 1)..n {
            let v = 0.5 * (k[[x, y]] + k[[y, x]]);
            k[[x, y]] = v;
            k[[y, x]] = v;
        }
    }
}

/// Multiply each off-diagonal pair by a symmetric factor uniform on
/// `[1/amplitude, amplitude]`, then restore the Markov property.
///
/// Off-diagonal rows are rescaled by `Z = max(1, max_x s'(x) / s_max)` where
/// `s'` is the perturbed off-diagonal mass and `s_max` the largest original
/// one, so no row ends up with more off-diagonal mass than the original
/// kernel allowed. The diagonal absorbs the rest.
pub fn perturb_kernel(k: &MarkovKernel, seed: u64, amplitude: f64) -> Result<MarkovKernel> {
    if !(amplitude >= 1.0 && amplitude.is_finite()) {
        return Err(invalid(format!("amplitude must be at least 1, got {amplitude}")));
    }
    if amplitude == 1.0 {
        return Ok(k.clone());
    }
    let g = Arc::clone(k.graph());
    let n = g.n_vertices();
    let mu = k.graph().measure();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = 1.0 / amplitude;

    let off_mass = |kern: &MarkovKernel| -> Vec<f64> {
        (0..n)
            .map(|x| {
                let mut acc = 0.0;
                kern.for_each_in_row(x, |y, v| {
                    if y != x {
                        acc += v * mu[y];
                    }
                });
                acc
            })
            .collect()
    };
    let s_max = off_mass(k).into_iter().fold(0.0, f64::max);

    let mut storage = k.storage().clone();
    match &mut storage {
        Storage::Dense(m) => {
            for x in 0..n {
                for y in (x + 1)..n {
                    let f: f64 = rng.gen_range(lo..=amplitude);
                    m[[x, y]] *= f;
                    m[[y, x]] *= f;
                }
            }
        }
        Storage::Sparse(s) => {
            for x in 0..n {
                for i in s.offsets[x]..s.offsets[x + 1] {
                    let y = s.cols[i];
                    if y > x {
                        let f: f64 = rng.gen_range(lo..=amplitude);
                        s.vals[i] *= f;
                        let r = s.offsets[y]..s.offsets[y + 1];
                        let j = r.start + s.cols[r].binary_search(&x).expect("symmetric pattern");
                        s.vals[j] *= f;
                    }
                }
            }
        }
    }
    let mut out = MarkovKernel::from_parts(
        g,
        storage,
        k.nominal_beta(),
        KernelKind::Perturbed { seed, amplitude },
    );
    let s_new = off_mass(&out);
    let peak = s_new.iter().cloned().fold(0.0, f64::max);
    let z = if s_max > 0.0 { (peak / s_max).max(1.0) } else { 1.0 };
    let set_row = |x: Vertex, y: Vertex, v: f64| -> f64 {
        if y == x {
            (1.0 - s_new[x] / z) / mu[x]
        } else {
            v / z
        }
    };
    match &mut out.storage {
        Storage::Dense(m) => {
            for x in 0..n {
                for y in 0..n {
                    m[[x, y]] = set_row(x, y, m[[x, y]]);
                }
            }
        }
        Storage::Sparse(s) => {
            for x in 0..n {
                let mut has_diag = false;
                for i in s.offsets[x]..s.offsets[x + 1] {
                    has_diag |= s.cols[i] == x;
                    s.vals[i] = set_row(x, s.cols[i], s.vals[i]);
                }
                let lost = (1.0 - s_new[x] / z).abs();
                if !has_diag && lost > 1e-12 {
                    return Err(Error::NumericalFailure(
                        "sparse kernel without diagonal cannot absorb renormalized mass".into(),
                    ));
                }
            }
        }
    }
    Ok(out)
}

/// Witness of an extremal cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub x: Vertex,
    pub y: Vertex,
    /// Step count, time or radius of the cell, depending on the check.
    pub scale: f64,
}

/// Empirical constants for a two-sided inequality `C^{-1} E ≤ q ≤ C E`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConstantsReport {
    pub tag: String,
    pub grid: String,
    /// Smallest `C` with `q ≤ C E` on the grid.
    pub upper: f64,
    /// Smallest `C` with `C^{-1} E ≤ q` on the grid (`∞` if some `q = 0`).
    pub lower: f64,
    pub upper_witness: Option<Witness>,
    pub lower_witness: Option<Witness>,
    pub cells: usize,
}

impl ConstantsReport {
    /// Smallest single constant making both sides hold.
    pub fn constant(&self) -> f64 {
        self.upper.max(self.lower)
    }
}

/// Two-sided jump bound `(1+d)^{-(d_f+β)}` on all core pairs.
pub fn check_jump_bounds(k: &MarkovKernel, beta: f64) -> Result<ConstantsReport> {
    let g = k.graph();
    let core = g.core_vertices();
    let mut pairs = Vec::with_capacity(core.len() * (core.len() + 1) / 2);
    for (i, &x) in core.iter().enumerate() {
        for &y in &core[i..] {
            pairs.push((x, y));
        }
    }
    check_jump_bounds_on(k, beta, &pairs)
}

/// Two-sided jump bound on an explicit pair list.
pub fn check_jump_bounds_on(
    k: &MarkovKernel,
    beta: f64,
    pairs: &[(Vertex, Vertex)],
) -> Result<ConstantsReport> {
    if pairs.is_empty() {
        return Err(invalid("no pairs to check"));
    }
    let g = k.graph();
    let exponent = g.nominal_df() + beta;
    let mut upper = 0.0;
    let mut lower = 0.0;
    let mut up_w = None;
    let mut lo_w = None;
    for &(x, y) in pairs {
        let d = g.distance(x, y)?;
        let ratio = k.value(x, y) * (1.0 + d as f64).powf(exponent);
        if ratio > upper {
            upper = ratio;
            up_w = Some(Witness { x, y, scale: d as f64 });
        }
        let inv = if ratio > 0.0 { 1.0 / ratio } else { f64::INFINITY };
        if inv > lower {
            lower = inv;
            lo_w = Some(Witness { x, y, scale: d as f64 });
        }
    }
    Ok(ConstantsReport {
        tag: "jump".into(),
        grid: format!("{} pairs, beta={beta}", pairs.len()),
        upper,
        lower,
        upper_witness: up_w,
        lower_witness: lo_w,
        cells: pairs.len(),
    })
}

/// Iterated kernels `k_1, …, k_{n_max}` as dense matrices.
pub fn iterate_kernel(k: &MarkovKernel, n_max: usize) -> Result<Vec<MarkovKernel>> {
    if n_max == 0 {
        return Err(invalid("n_max must be at least 1"));
    }
    let n = k.n();
    let bytes = n_max
        .checked_mul(n * n * 8)
        .ok_or_else(|| Error::ResourceLimit("kernel sequence size overflows".into()))?;
    if bytes > MEMORY_BUDGET || n > ALL_PAIRS_LIMIT {
        return Err(Error::ResourceLimit(format!(
            "{n_max} dense kernels on {n} vertices need {bytes} bytes"
        )));
    }
    let mut out = Vec::with_capacity(n_max);
    let mut cur = k.to_dense();
    let step = transition_matrix(k);
    for m in 1..=n_max {
        if m > 1 {
            cur = cur.dot(&step);
        }
        let mut km = MarkovKernel::from_parts(
            Arc::clone(k.graph()),
            Storage::Dense(cur.clone()),
            k.nominal_beta(),
            KernelKind::Power { n: m },
        );
        if !k.kind().is_markov() {
            km.kind = KernelKind::Power { n: m };
        }
        out.push(km);
    }
    Ok(out)
}

/// `diag(μ) · k`: right-multiplying kernel values by this advances one step.
fn transition_matrix(k: &MarkovKernel) -> Array2<f64> {
    let mu = k.graph().measure();
    let mut m = k.to_dense();
    for (x, mut row) in m.axis_iter_mut(Axis(0)).enumerate() {
        row.mapv_inplace(|v| v * mu[x]);
    }
    m
}

/// Kernel rows `k_n(x, ·)` for `n = 1..=n_max`, without forming full powers.
///
/// `visit(n, rows)` receives one row per source.
pub fn propagate_rows(
    k: &MarkovKernel,
    sources: &[Vertex],
    n_max: usize,
    mut visit: impl FnMut(usize, &Array2<f64>),
) {
    let mut rows = k.rows(sources);
    for n in 1..=n_max {
        if n > 1 {
            rows = k.step_rows(&rows);
        }
        visit(n, &rows);
    }
}

/// Poisson(t) weights `w_0..=w_M` with `Σ_{m>M} w_m < tol`.
pub fn poisson_weights(t: f64, tol: f64) -> Result<Vec<f64>> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(invalid(format!("time must be non-negative, got {t}")));
    }
    if t == 0.0 {
        return Ok(vec![1.0]);
    }
    let ln_t = t.ln();
    let mut w = Vec::new();
    let mut lw = -t;
    let mut m = 0usize;
    loop {
        let v = lw.exp();
        w.push(v);
        if (m as f64) > t + 1.0 && v < tol * 1e-6 {
            break;
        }
        m += 1;
        if m > 2 * MAX_UNIFORMIZATION_TERMS {
            return Err(Error::ResourceLimit(format!(
                "Poisson weights for t={t} exceed the term budget"
            )));
        }
        lw += ln_t - (m as f64).ln();
    }
    let mut tail = 0.0;
    let mut cut = w.len() - 1;
    for i in (0..w.len()).rev() {
        if tail + w[i] >= tol {
            cut = i;
            break;
        }
        tail += w[i];
    }
    w.truncate(cut + 1);
    if w.len() > MAX_UNIFORMIZATION_TERMS {
        return Err(Error::ResourceLimit(format!(
            "uniformization for t={t} needs {} terms (limit {MAX_UNIFORMIZATION_TERMS})",
            w.len()
        )));
    }
    Ok(w)
}

fn check_semigroup_args(t: f64, tol: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(invalid(format!("t must be positive, got {t}")));
    }
    if !(tol > 0.0 && tol <= 1e-6) {
        return Err(invalid(format!("tol must lie in (0, 1e-6], got {tol}")));
    }
    Ok(())
}

/// Continuous-time kernel `h_t` of `exp(t(K − I))` by uniformization.
pub fn continuous_semigroup(k: &MarkovKernel, t: f64, tol: f64) -> Result<MarkovKernel> {
    check_semigroup_args(t, tol)?;
    let n = k.n();
    if n > ALL_PAIRS_LIMIT {
        return Err(Error::ResourceLimit(format!(
            "dense semigroup on {n} vertices; use semigroup_rows"
        )));
    }
    let w = poisson_weights(t, tol)?;
    let mu = k.graph().measure();
    let step = transition_matrix(k);
    let mut power: Array2<f64> = Array2::zeros((n, n));
    for x in 0..n {
        power[[x, x]] = 1.0 / mu[x];
    }
    let mut h = &power * w[0];
    for &wm in &w[1..] {
        power = power.dot(&step);
        h.scaled_add(wm, &power);
    }
    symmetrize(&mut h);
    Ok(MarkovKernel::from_parts(
        Arc::clone(k.graph()),
        Storage::Dense(h),
        k.nominal_beta(),
        KernelKind::Semigroup { t },
    ))
}

/// Rows `h_t(x, ·)` for each source, computed by uniformization on rows.
pub fn semigroup_rows(k: &MarkovKernel, sources: &[Vertex], t: f64, tol: f64) -> Result<Array2<f64>> {
    Ok(semigroup_rows_multi(k, sources, &[t], tol)?.remove(0))
}

/// Rows `h_t(x, ·)` for several times sharing one pass over the powers.
pub fn semigroup_rows_multi(
    k: &MarkovKernel,
    sources: &[Vertex],
    times: &[f64],
    tol: f64,
) -> Result<Vec<Array2<f64>>> {
    let mut weights = Vec::with_capacity(times.len());
    for &t in times {
        check_semigroup_args(t, tol)?;
        weights.push(poisson_weights(t, tol)?);
    }
    let mu = k.graph().measure();
    let n = k.n();
    let mut power = Array2::zeros((sources.len(), n));
    for (i, &x) in sources.iter().enumerate() {
        k.graph().check_vertex(x)?;
        power[[i, x]] = 1.0 / mu[x];
    }
    let mut out: Vec<Array2<f64>> = weights.iter().map(|w| &power * w[0]).collect();
    let m_max = weights.iter().map(|w| w.len()).max().unwrap_or(1);
    for m in 1..m_max {
        power = k.step_rows(&power);
        for (h, w) in out.iter_mut().zip(&weights) {
            if let Some(&wm) = w.get(m) {
                h.scaled_add(wm, &power);
            }
        }
    }
    Ok(out)
}

/// Write the kernel cache format: magic `HKLB`, version, `n`, storage tag,
/// then the values, then the vertex measure. All numbers little-endian.
pub fn write_kernel_cache<W: Write>(k: &MarkovKernel, mut out: W) -> Result<()> {
    let n = k.n();
    out.write_all(CACHE_MAGIC)?;
    out.write_all(&CACHE_VERSION.to_le_bytes())?;
    out.write_all(&(n as u64).to_le_bytes())?;
    match k.storage() {
        Storage::Dense(m) => {
            out.write_all(&[0u8])?;
            let mut buf = Vec::with_capacity(n * 8);
            for row in m.axis_iter(Axis(0)) {
                buf.clear();
                for v in row.iter() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                out.write_all(&buf)?;
            }
        }
        Storage::Sparse(s) => {
            out.write_all(&[1u8])?;
            for x in 0..n {
                for (y, v) in s.row(x) {
                    out.write_all(&(x as u64).to_le_bytes())?;
                    out.write_all(&(y as u64).to_le_bytes())?;
                    out.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    for m in k.graph().measure() {
        out.write_all(&m.to_le_bytes())?;
    }
    Ok(())
}

/// Read a kernel cache written by [`write_kernel_cache`] for the given graph.
///
/// The stored vertex measure must match the graph bit for bit.
pub fn read_kernel_cache<R: Read>(
    mut input: R,
    graph: Arc<WeightedGraph>,
    nominal_beta: f64,
    kind: KernelKind,
) -> Result<MarkovKernel> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let bad = |m: &str| Error::Parse(format!("kernel cache: {m}"));
    if bytes.len() < 17 || &bytes[..4] != CACHE_MAGIC {
        return Err(bad("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if n != graph.n_vertices() {
        return Err(invalid(format!(
            "cache holds {n} vertices, graph has {}",
            graph.n_vertices()
        )));
    }
    let tag = bytes[16];
    let body = &bytes[17..];
    if body.len() < 8 * n {
        return Err(bad("truncated"));
    }
    let (data, mu_bytes) = body.split_at(body.len() - 8 * n);
    let f64_at = |b: &[u8], i: usize| f64::from_le_bytes(b[i..i + 8].try_into().unwrap());
    for (x, &m) in graph.measure().iter().enumerate() {
        if f64_at(mu_bytes, 8 * x).to_bits() != m.to_bits() {
            return Err(invalid("cache vertex measure does not match the graph"));
        }
    }
    let storage = match tag {
        0 => {
            if data.len() != 8 * n * n {
                return Err(bad("dense payload has the wrong length"));
            }
            let vals = (0..n * n).map(|i| f64_at(data, 8 * i)).collect();
            Storage::Dense(Array2::from_shape_vec((n, n), vals).expect("shape"))
        }
        1 => {
            if data.len() % 24 != 0 {
                return Err(bad("triplet payload has the wrong length"));
            }
            let mut offsets = vec![0usize; n + 1];
            let mut cols = Vec::with_capacity(data.len() / 24);
            let mut vals = Vec::with_capacity(data.len() / 24);
            let mut last = (0usize, None::<usize>);
            for chunk in data.chunks_exact(24) {
                let x = u64::from_le_bytes(chunk[0..8].try_into().unwrap()) as usize;
                let y = u64::from_le_bytes(chunk[8..16].try_into().unwrap()) as usize;
                if x >= n || y >= n {
                    return Err(bad("triplet index out of range"));
                }
                let ordered = x > last.0 || (x == last.0 && last.1.map_or(true, |ly| y > ly));
                if !ordered {
                    return Err(bad("triplets must be sorted by (row, column)"));
                }
                last = (x, Some(y));
                offsets[x + 1] += 1;
                cols.push(y);
                vals.push(f64_at(chunk, 16));
            }
            for x in 0..n {
                offsets[x + 1] += offsets[x];
            }
            Storage::Sparse(CsrMatrix {
                n,
                offsets,
                cols,
                vals,
            })
        }
        t => return Err(bad(&format!("unknown storage tag {t}"))),
    };
    Ok(MarkovKernel::from_parts(graph, storage, nominal_beta, kind))
}

/// Inner product in `L²(μ)`.
pub fn inner(mu: &[f64], f: ArrayView1<f64>, g: ArrayView1<f64>) -> f64 {
    f.iter().zip(g.iter()).zip(mu).map(|((a, b), m)| a * b * m).sum()
}
