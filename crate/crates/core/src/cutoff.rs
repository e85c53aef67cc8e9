//! Cutoff functions and the cutoff Sobolev inequality.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dirichlet::{funh_at, gamma, gamma_sum, FunhReport, VertexFunction};
use crate::error::{invalid, Error, Result};
use crate::graph::{Vertex, WeightedGraph};
use crate::kernel::{ConstantsReport, MarkovKernel, Witness};

/// Floor applied to the measured `min h / r^β` before dividing by it.
pub const C1_FLOOR: f64 = 1e-8;
/// Energy coefficients at which the mass coefficient is minimized.
pub const C1_GRID: [f64; 3] = [1.0, 10.0, 100.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CutoffKind {
    Linear,
    Annulus,
    Csj,
    Davies,
}

/// Function with values in `[0, 1]` that is 1 on an inner ball and 0 off an outer ball.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CutoffFunction {
    pub values: VertexFunction,
    pub center: Vertex,
    pub inner_radius: f64,
    pub width: f64,
    /// Number of sub-annuli averaged (1 unless built by [`csj_cutoff`]).
    pub subannuli: usize,
    pub kind: CutoffKind,
    /// Radius of the ball on which the function is identically 1.
    pub one_radius: f64,
    /// Radius of the ball outside which the function vanishes.
    pub zero_radius: f64,
    /// Set when a CSJ request fell back to the linear cutoff.
    pub linear_fallback: bool,
}

impl CutoffFunction {
    /// Range and endpoint checks, with no tolerance.
    pub fn check_invariants(&self, g: &WeightedGraph) -> Result<()> {
        let dist = g.distances_from(self.center)?;
        for (y, &v) in self.values.iter().enumerate() {
            let d = dist[y] as f64;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvariantViolation(format!("value {v} at vertex {y}")));
            }
            if d <= self.one_radius && v != 1.0 {
                return Err(Error::InvariantViolation(format!(
                    "value {v} at distance {d} inside the unit ball"
                )));
            }
            if d > self.zero_radius && v != 0.0 {
                return Err(Error::InvariantViolation(format!(
                    "value {v} at distance {d} outside the support ball"
                )));
            }
        }
        Ok(())
    }
}

/// `G_β(n)`: `n^{β−2}` for `β > 2`, `log(1+n)` for `β = 2`.
pub fn g_beta(n: u64, beta: f64) -> Result<f64> {
    if n == 0 {
        return Err(invalid("n must be at least 1"));
    }
    if beta > 2.0 && beta.is_finite() {
        Ok((n as f64).powf(beta - 2.0))
    } else if beta == 2.0 {
        Ok((1.0 + n as f64).ln())
    } else {
        Err(invalid(format!("G_beta needs beta >= 2, got {beta}")))
    }
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Linear cutoff for `B(x,r) ⊂ B(x,2r)`: `(2r − d(x,·))/r` clamped to `[0,1]`.
pub fn linear_cutoff(g: &WeightedGraph, x: Vertex, r: u32) -> Result<CutoffFunction> {
    linear_cutoff_between(g, x, r as f64, r as f64)
}

/// Linear cutoff for `B(x,R) ⊂ B(x,R+r)`: `(R + r − d(x,·))/r` clamped to `[0,1]`.
pub fn linear_cutoff_between(g: &WeightedGraph, x: Vertex, big_r: f64, r: f64) -> Result<CutoffFunction> {
    if !(r >= 1.0 && r.is_finite()) {
        return Err(invalid(format!("cutoff width must be at least 1, got {r}")));
    }
    if !(big_r >= 0.0 && big_r.is_finite()) {
        return Err(invalid(format!("inner radius must be non-negative, got {big_r}")));
    }
    let dist = g.distances_from(x)?;
    let values = dist
        .iter()
        .map(|&d| clamp01((big_r + r - d as f64) / r))
        .collect();
    Ok(CutoffFunction {
        values: VertexFunction::from_values(values)?,
        center: x,
        inner_radius: big_r,
        width: r,
        subannuli: 1,
        kind: CutoffKind::Linear,
        one_radius: big_r,
        zero_radius: big_r + r,
        linear_fallback: false,
    })
}

/// `max_y Γ(ψ,ψ)(y) r²`, divided by `log(1+r)` when the kernel has `β = 2`.
pub fn linear_cutoff_energy_check(k: &MarkovKernel, psi: &CutoffFunction) -> Result<ConstantsReport> {
    if psi.values.len() != k.n() {
        return Err(invalid("cutoff and kernel live on different graphs"));
    }
    let r = psi.width;
    let gam = gamma(k, &psi.values, &psi.values, None);
    let (arg, peak) = gam
        .iter()
        .cloned()
        .enumerate()
        .fold((0, 0.0), |best, (y, v)| if v > best.1 { (y, v) } else { best });
    let norm = if k.nominal_beta() == 2.0 {
        (1.0 + r).ln() / (r * r)
    } else {
        1.0 / (r * r)
    };
    Ok(ConstantsReport {
        tag: "linear-cutoff-energy".into(),
        grid: format!("center={}, r={r}", psi.center),
        upper: peak / norm,
        lower: 0.0,
        upper_witness: Some(Witness {
            x: arg,
            y: psi.center,
            scale: r,
        }),
        lower_witness: None,
        cells: gam.len(),
    })
}

/// Cutoff for `B(x,R) ⊂ B(x,R+r)` built from the killed resolvent.
///
/// For `r ≤ 10` this is the indicator of `B(x, R + r/2)`. Otherwise it is 1 on
/// `B(x, R + r/2)` and `min(1, h/(c₁ r^β))` elsewhere, with `c₁` the measured
/// `min_{D_2} h/r^β` floored at [`C1_FLOOR`].
pub fn annulus_cutoff(k: &MarkovKernel, x: Vertex, big_r: u32, r: u32) -> Result<CutoffFunction> {
    Ok(annulus_cutoff_at(k, x, big_r as f64, r as f64)?.0)
}

/// [`annulus_cutoff`] for real radii, returning the resolvent report when one was built.
pub fn annulus_cutoff_at(
    k: &MarkovKernel,
    x: Vertex,
    big_r: f64,
    r: f64,
) -> Result<(CutoffFunction, Option<FunhReport>)> {
    let g = k.graph();
    let dist = g.distances_from(x)?;
    let one_radius = big_r + r / 2.0;
    if r <= 10.0 {
        if !(r > 0.0) {
            return Err(invalid(format!("annulus width must be positive, got {r}")));
        }
        let values = dist
            .iter()
            .map(|&d| if d as f64 <= one_radius { 1.0 } else { 0.0 })
            .collect();
        let phi = CutoffFunction {
            values: VertexFunction::from_values(values)?,
            center: x,
            inner_radius: big_r,
            width: r,
            subannuli: 1,
            kind: CutoffKind::Annulus,
            one_radius,
            zero_radius: one_radius,
            linear_fallback: false,
        };
        return Ok((phi, None));
    }
    let (h, rep) = funh_at(k, x, big_r, r)?;
    let c1 = rep.c1.max(C1_FLOOR);
    let scale = c1 * r.powf(k.nominal_beta());
    let values = dist
        .iter()
        .zip(h.iter())
        .map(|(&d, &hv)| if d as f64 <= one_radius { 1.0 } else { clamp01(hv / scale) })
        .collect();
    let phi = CutoffFunction {
        values: VertexFunction::from_values(values)?,
        center: x,
        inner_radius: big_r,
        width: r,
        subannuli: 1,
        kind: CutoffKind::Annulus,
        one_radius,
        zero_radius: big_r + (9.0 * r) / 10.0,
        linear_fallback: false,
    };
    Ok((phi, Some(rep)))
}

/// Average of `n` annulus cutoffs across the sub-annuli of `B(x,2r) ∖ B(x,r)`.
///
/// Requires `r > 10n`; otherwise the linear cutoff is returned with
/// `linear_fallback` set.
pub fn csj_cutoff(k: &MarkovKernel, x: Vertex, r: u32, n: usize) -> Result<CutoffFunction> {
    if n == 0 {
        return Err(invalid("sub-annulus count must be at least 1"));
    }
    if r == 0 {
        return Err(invalid("radius must be positive"));
    }
    let g = k.graph();
    g.check_ball_in_core(x, 2.0 * r as f64)?;
    if (r as u64) <= 10 * n as u64 {
        let mut psi = linear_cutoff(g, x, r)?;
        psi.subannuli = n;
        psi.kind = CutoffKind::Csj;
        psi.linear_fallback = true;
        return Ok(psi);
    }
    let width = r as f64 / n as f64;
    let mut sum = vec![0.0; g.n_vertices()];
    for i in 1..=n {
        let inner = ((n + i - 1) as f64 * r as f64) / n as f64;
        let (part, _) = annulus_cutoff_at(k, x, inner, width)?;
        for (s, v) in sum.iter_mut().zip(part.values.iter()) {
            *s += v;
        }
    }
    let values = sum.into_iter().map(|s| s / n as f64).collect();
    Ok(CutoffFunction {
        values: VertexFunction::from_values(values)?,
        center: x,
        inner_radius: r as f64,
        width: r as f64,
        subannuli: n,
        kind: CutoffKind::Csj,
        one_radius: r as f64,
        zero_radius: 2.0 * r as f64,
        linear_fallback: false,
    })
}

/// Sub-annulus window check and sup-norm distance to the linear cutoff.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WindowCheck {
    pub sup_deviation: f64,
    /// Vertices whose value left `[1 − i/n, 1 − (i−1)/n]` on sub-annulus `i`.
    pub window_violations: usize,
    pub endpoint_violations: usize,
}

impl WindowCheck {
    pub fn holds(&self, n: usize) -> bool {
        self.window_violations == 0
            && self.endpoint_violations == 0
            && self.sup_deviation <= 1.0 / n as f64
    }
}

/// Compare a CSJ cutoff for `B(x,r) ⊂ B(x,2r)` with the linear cutoff.
pub fn csj_window_check(g: &WeightedGraph, phi: &CutoffFunction, r: u32, n: usize) -> Result<WindowCheck> {
    let psi = linear_cutoff(g, phi.center, r)?;
    let dist = g.distances_from(phi.center)?;
    let (r64, n64) = (r as u64, n as u64);
    let mut window_violations = 0;
    let mut endpoint_violations = 0;
    for (y, &v) in phi.values.iter().enumerate() {
        let d = dist[y] as u64;
        if d <= r64 {
            endpoint_violations += (v != 1.0) as usize;
        } else if d > 2 * r64 {
            endpoint_violations += (v != 0.0) as usize;
        } else {
            // sub-annulus index: smallest i with d ≤ r + i r/n
            let i = ((d - r64) * n64).div_ceil(r64);
            let lo = (n64 - i) as f64 / n as f64;
            let hi = (n64 - i + 1) as f64 / n as f64;
            window_violations += !(lo <= v && v <= hi) as usize;
        }
    }
    Ok(WindowCheck {
        sup_deviation: phi.values.sup_distance(&psi.values),
        window_violations,
        endpoint_violations,
    })
}

/// Named test function for [`verify_csj`].
#[derive(Clone, Debug)]
pub struct TestFunction {
    pub id: String,
    pub values: VertexFunction,
}

/// Ball indicators, linear cutoffs and seeded random `[0,1]`-valued functions around `x`.
pub fn csj_test_family(g: &WeightedGraph, x: Vertex, r: u32, seed: u64) -> Result<Vec<TestFunction>> {
    let mut out = Vec::new();
    let rf = r as f64;
    for (label, rho) in [("0.5r", 0.5 * rf), ("r", rf), ("1.5r", 1.5 * rf), ("2r", 2.0 * rf), ("4r", 4.0 * rf)] {
        out.push(TestFunction {
            id: format!("ball-{label}"),
            values: VertexFunction::indicator(g, &g.ball(x, rho)?),
        });
    }
    for (label, rho) in [("0.5r", 0.5 * rf), ("r", rf), ("2r", 2.0 * rf)] {
        out.push(TestFunction {
            id: format!("linear-{label}"),
            values: linear_cutoff_between(g, x, rho, rho.max(1.0))?.values,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..20 {
        let values = (0..g.n_vertices()).map(|_| rng.gen_range(0.0..=1.0)).collect();
        out.push(TestFunction {
            id: format!("random-{i}"),
            values: VertexFunction::from_values(values)?,
        });
    }
    Ok(out)
}

/// One row of a [`CsjReport`]: the smallest mass coefficient at a fixed energy coefficient.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CsjCell {
    pub r: u32,
    pub n: usize,
    pub c1_grid_value: f64,
    pub c2_min: f64,
    pub sup_deviation: f64,
    pub witness_function_id: String,
    pub linear_fallback: bool,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CsjReport {
    pub cells: Vec<CsjCell>,
}

impl CsjReport {
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "r,n,C1_grid_value,C2_min,sup_deviation,witness_function_id")?;
        for c in &self.cells {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                c.r, c.n, c.c1_grid_value, c.c2_min, c.sup_deviation, c.witness_function_id
            )?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: CsjReport) {
        self.cells.extend(other.cells);
        self.cells
            .sort_by(|a, b| (a.r, a.n).cmp(&(b.r, b.n)).then(a.c1_grid_value.total_cmp(&b.c1_grid_value)));
    }

    pub fn cell(&self, r: u32, n: usize, c1: f64) -> Option<&CsjCell> {
        self.cells
            .iter()
            .find(|c| c.r == r && c.n == n && c.c1_grid_value == c1)
    }
}

/// Smallest `C₂` with `Σ f² Γ(φ,φ) ≤ C₁/n² Σ Γ(f,f) + C₂ G_β(n)/r^β Σ f² μ`
/// for each `C₁` in [`C1_GRID`], maximized over the test family.
pub fn verify_csj(
    k: &MarkovKernel,
    phi: &CutoffFunction,
    test_fs: &[TestFunction],
    r: u32,
    n: usize,
) -> Result<CsjReport> {
    if test_fs.is_empty() {
        return Err(invalid("test family must be nonempty"));
    }
    if phi.values.len() != k.n() {
        return Err(invalid("cutoff and kernel live on different graphs"));
    }
    let beta = k.nominal_beta();
    let gb = g_beta(n as u64, beta)?;
    let mu = k.graph().measure();
    let gphi = gamma(k, &phi.values, &phi.values, None);
    let psi = linear_cutoff(k.graph(), phi.center, r)?;
    let sup_deviation = phi.values.sup_distance(&psi.values);
    let nn = (n * n) as f64;
    let rb = (r as f64).powf(beta);

    let mut terms = Vec::with_capacity(test_fs.len());
    for tf in test_fs {
        if tf.values.len() != k.n() {
            return Err(invalid(format!("test function {} has the wrong length", tf.id)));
        }
        let f2: Vec<f64> = tf.values.iter().map(|v| v * v).collect();
        let lhs: f64 = f2.iter().zip(&gphi).map(|(a, b)| a * b).sum();
        let energy = gamma_sum(k, &tf.values, &tf.values);
        let mass: f64 = f2.iter().zip(mu).map(|(a, b)| a * b).sum();
        terms.push((lhs, energy, mass));
    }
    let mut cells = Vec::new();
    for c1 in C1_GRID {
        let mut best = 0.0;
        let mut witness = test_fs[0].id.clone();
        for ((lhs, energy, mass), tf) in terms.iter().zip(test_fs) {
            let excess = lhs - c1 * energy / nn;
            let need = if excess <= 0.0 {
                0.0
            } else if *mass > 0.0 {
                excess * rb / (gb * mass)
            } else {
                f64::INFINITY
            };
            if need > best {
                best = need;
                witness = tf.id.clone();
            }
        }
        cells.push(CsjCell {
            r,
            n,
            c1_grid_value: c1,
            c2_min: best,
            sup_deviation,
            witness_function_id: witness,
            linear_fallback: phi.linear_fallback,
        });
    }
    Ok(CsjReport { cells })
}

/// Exponent scale `ϑ = 1/(8(d_f+β))`.
pub fn davies_theta(df: f64, beta: f64) -> f64 {
    1.0 / (8.0 * (df + beta))
}

/// Sub-annulus count `⌈6pλ e^{3λϑ} √C₃⌉`.
pub fn davies_n(p: f64, lambda: f64, theta: f64, c3: f64) -> u64 {
    (6.0 * p * lambda * (3.0 * lambda * theta).exp() * c3.sqrt()).ceil() as u64
}

/// Smallest `λ ≥ 1` with `6λ e^{3λϑ} √C₃ ≥ 1/ϑ`.
pub fn davies_lambda0(theta: f64, c3: f64) -> Result<f64> {
    if !(theta > 0.0 && c3 > 0.0) {
        return Err(invalid("theta and C3 must be positive"));
    }
    let count = |l: f64| 6.0 * l * (3.0 * l * theta).exp() * c3.sqrt();
    let target = 1.0 / theta;
    if count(1.0) >= target {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (1.0, 2.0);
    while count(hi) < target {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if count(mid) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    Ok(hi)
}

/// CSJ cutoff with the sub-annulus count tied to `λ` and `p`.
///
/// Fails for `λ < λ₀` and reports `λ₀` in the message. The returned cutoff
/// stays within `1/(λp)` of the linear cutoff.
pub fn davies_cutoff(
    k: &MarkovKernel,
    x: Vertex,
    r: u32,
    p: f64,
    lambda: f64,
    c3: f64,
) -> Result<(CutoffFunction, f64)> {
    if !(p >= 1.0) {
        return Err(invalid(format!("p must be at least 1, got {p}")));
    }
    let g = k.graph();
    let theta = davies_theta(g.nominal_df(), k.nominal_beta());
    let lambda0 = davies_lambda0(theta, c3)?;
    if !(lambda >= lambda0) {
        return Err(invalid(format!("lambda {lambda} is below lambda_0 = {lambda0}")));
    }
    let n = davies_n(p, lambda, theta, c3);
    let mut phi = csj_cutoff(k, x, r, n as usize)?;
    phi.kind = CutoffKind::Davies;
    let deviation = phi.values.sup_distance(&linear_cutoff(g, x, r)?.values);
    if deviation > 1.0 / (lambda * p) {
        return Err(Error::InvariantViolation(format!(
            "cutoff deviates from linear by {deviation}, above 1/(lambda p) = {}",
            1.0 / (lambda * p)
        )));
    }
    Ok((phi, deviation))
}
