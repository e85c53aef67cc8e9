//! Experiment configuration, kernel caching, runs and summaries.
//!
//! A run builds a graph and kernel from an [`ExperimentConfig`], evaluates one
//! experiment, and writes CSV reports plus a `summary.json` into the output
//! directory. Output is a pure function of the config: no timestamps, ordered
//! maps, and per-trial random streams.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cutoff::{csj_cutoff, csj_test_family, csj_window_check, verify_csj, CsjReport, C1_GRID};
use crate::davies::{meyer_split, off_diagonal_check, sample_davies_inequality, total_jump_rate};
use crate::dirichlet::verify_form_identities;
use crate::error::{invalid, Error, Result};
use crate::estimates::{
    ball_family, check_hkp, check_sub_gaussian, core_pairs_within, mc_exit_time, nash_constant,
    ratio_spread, EstimateReport,
};
use crate::graph::{build_graph, volume_profile, GraphSpec, Vertex, WeightedGraph};
use crate::kernel::{
    check_jump_bounds, heavy_tailed_kernel, nearest_neighbor_kernel, perturb_kernel,
    read_kernel_cache, subordinate_kernel, write_kernel_cache, KernelKind, MarkovKernel,
};

/// Environment variable overriding the kernel cache directory.
pub const CACHE_DIR_ENV: &str = "HKLAB_CACHE_DIR";

/// Cache directory used when neither the config nor the environment names one.
pub const DEFAULT_CACHE_DIR: &str = ".hklab-cache";

/// Lazy base used under subordination.
pub const SUBORDINATION_BASE_LAZY: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tag {
    Volume,
    Kernel,
    Identities,
    Hkp,
    Csj,
    Nash,
    Exit,
    Davies,
}

impl Tag {
    pub fn as_str(self) -> &'static str {
        match self {
            Tag::Volume => "volume",
            Tag::Kernel => "kernel",
            Tag::Identities => "identities",
            Tag::Hkp => "hkp",
            Tag::Csj => "csj",
            Tag::Nash => "nash",
            Tag::Exit => "exit",
            Tag::Davies => "davies",
        }
    }

    /// Whether the experiment needs a jump index inside a validity window.
    fn needs_jump_index(self) -> bool {
        matches!(self, Tag::Hkp | Tag::Csj | Tag::Nash | Tag::Exit | Tag::Davies)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum KernelSpec {
    NearestNeighbor {
        lazy: f64,
    },
    DirectHeavyTail {
        beta: f64,
    },
    Subordinated {
        beta: f64,
        /// Defaults to `⌈core_radius^{d_w}⌉`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        n_terms: Option<usize>,
    },
}

impl KernelSpec {
    pub fn beta(&self) -> Option<f64> {
        match *self {
            KernelSpec::NearestNeighbor { .. } => None,
            KernelSpec::DirectHeavyTail { beta } | KernelSpec::Subordinated { beta, .. } => Some(beta),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    pub seed: u64,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    #[serde(flatten)]
    pub spec: KernelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<Perturbation>,
}

/// Grids and sample sizes. Unset radii take a per-experiment default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grids {
    /// Step counts for heat kernel checks.
    pub steps: Vec<u64>,
    /// Times for the continuous-time check.
    pub times: Vec<f64>,
    /// Source vertices; empty means the deepest vertex plus two more core vertices.
    pub sources: Vec<Vertex>,
    pub min_distance: u32,
    pub max_distance: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radii: Option<Vec<u32>>,
    pub subannuli: Vec<usize>,
    pub deltas: Vec<f64>,
    pub localities: Vec<f64>,
    pub trials: u64,
    pub samples: usize,
    /// CSJ mass constant fed to the Davies threshold.
    pub c3: f64,
    /// Scale constant of the sub-Gaussian envelope.
    pub sub_gaussian_c: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub volume_radius: Option<u32>,
}

impl Default for Grids {
    fn default() -> Self {
        Grids {
            steps: (0..8).map(|i| 1 << i).collect(),
            times: vec![4.0, 8.0, 16.0, 32.0, 64.0],
            sources: Vec::new(),
            min_distance: 2,
            max_distance: 24,
            radii: None,
            subannuli: vec![1, 2, 4],
            deltas: vec![0.01, 0.1, 0.5, 1.0],
            localities: vec![2.0, 4.0, 8.0],
            trials: 10_000,
            samples: 100,
            c3: 1.0,
            sub_gaussian_c: 1.0,
            volume_radius: None,
        }
    }
}

impl Grids {
    fn radii(&self, tag: Tag) -> Vec<u32> {
        if let Some(r) = &self.radii {
            return r.clone();
        }
        match tag {
            Tag::Csj => vec![32, 64],
            Tag::Exit => vec![8, 16],
            _ => (0..6).map(|i| 1 << i).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Largest relative error accepted for the form identities.
    pub identity: f64,
    /// Most negative relative slack accepted for the Stroock–Varopoulos inequalities.
    pub sv_slack: f64,
    /// Most negative relative slack accepted for the Davies energy inequality.
    pub davies_slack: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            identity: 1e-10,
            sv_slack: 1e-12,
            davies_slack: crate::davies::DAVIES_SLACK_TOL,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub tag: Tag,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    pub graph: GraphSpec,
    pub kernel: KernelConfig,
    #[serde(default)]
    pub grids: Grids,
    #[serde(default)]
    pub tolerances: Tolerances,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Read a config file; `.json` files are JSON, anything else TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    /// SHA-256 of the canonical JSON form, ignoring where output goes.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        c.cache_dir = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Parameter checks that do not need the graph.
    pub fn validate(&self) -> Result<()> {
        // TOML integers are signed 64-bit
        let seeds = std::iter::once(self.seed).chain(self.kernel.perturbation.as_ref().map(|p| p.seed));
        for seed in seeds {
            if seed > i64::MAX as u64 {
                return Err(invalid(format!("seed {seed} exceeds {}", i64::MAX)));
            }
        }
        if let Some(p) = &self.kernel.perturbation {
            if !(p.amplitude >= 1.0 && p.amplitude.is_finite()) {
                return Err(invalid(format!("perturbation amplitude must be at least 1, got {}", p.amplitude)));
            }
        }
        if let KernelSpec::NearestNeighbor { lazy } = self.kernel.spec {
            if !(0.0..1.0).contains(&lazy) {
                return Err(invalid(format!("laziness must lie in [0, 1), got {lazy}")));
            }
        }
        let dw = self.graph.nominal_dw();
        match self.kernel.spec.beta() {
            Some(beta) => {
                let stable_like = beta > 0.0 && beta < 2.0;
                let main = beta >= 2.0 && beta < dw;
                if (self.tag.needs_jump_index() || matches!(self.kernel.spec, KernelSpec::Subordinated { .. }))
                    && !(stable_like || main)
                {
                    return Err(invalid(format!(
                        "beta = {beta} lies outside both validity windows (0, 2) and [2, d_w) with d_w = {dw:.4}"
                    )));
                }
            }
            None => {
                if self.tag.needs_jump_index() && self.tag != Tag::Hkp {
                    return Err(invalid(format!(
                        "experiment {} needs a jump kernel with an index beta",
                        self.tag.as_str()
                    )));
                }
            }
        }
        let g = &self.grids;
        match self.tag {
            Tag::Hkp if g.steps.is_empty() => Err(invalid("steps grid is empty")),
            Tag::Davies if g.times.is_empty() || g.localities.is_empty() => {
                Err(invalid("times and localities must be nonempty"))
            }
            Tag::Csj if g.subannuli.is_empty() => Err(invalid("subannuli grid is empty")),
            Tag::Exit if g.deltas.is_empty() => Err(invalid("deltas grid is empty")),
            Tag::Identities if g.samples == 0 => Err(invalid("samples must be positive")),
            _ => Ok(()),
        }
    }
}

/// Where a run's kernel cache lives: config, then environment, then default.
pub fn cache_dir(config: &ExperimentConfig) -> PathBuf {
    config
        .cache_dir
        .clone()
        .or_else(|| std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE_DIR))
}

/// Resolved kernel spec plus its cache fingerprint.
fn resolve_kernel(config: &KernelConfig, g: &WeightedGraph) -> KernelConfig {
    let mut c = config.clone();
    if let KernelSpec::Subordinated { n_terms: n @ None, .. } = &mut c.spec {
        *n = Some(default_n_terms(g));
    }
    c
}

/// `⌈core_radius^{d_w}⌉`, enough terms to cover jumps across the core.
pub fn default_n_terms(g: &WeightedGraph) -> usize {
    (g.core_radius() as f64).powf(g.nominal_dw()).ceil() as usize
}

fn kernel_fingerprint(g: &WeightedGraph, spec: &KernelConfig) -> String {
    let mut h = Sha256::new();
    h.update(g.fingerprint().as_bytes());
    h.update(serde_json::to_string(spec).expect("kernel spec serializes").as_bytes());
    hex::encode(h.finalize())
}

fn kernel_kind(spec: &KernelConfig) -> KernelKind {
    if let Some(p) = &spec.perturbation {
        return KernelKind::Perturbed { seed: p.seed, amplitude: p.amplitude };
    }
    match spec.spec {
        KernelSpec::NearestNeighbor { lazy } => KernelKind::NearestNeighbor { lazy },
        KernelSpec::DirectHeavyTail { .. } => KernelKind::DirectHeavyTail,
        KernelSpec::Subordinated { n_terms, .. } => KernelKind::Subordinated {
            n_terms: n_terms.unwrap_or(0),
        },
    }
}

/// Build the kernel described by `spec` on `g`.
pub fn build_kernel(g: &Arc<WeightedGraph>, spec: &KernelConfig) -> Result<MarkovKernel> {
    let spec = resolve_kernel(spec, g);
    let base = match spec.spec {
        KernelSpec::NearestNeighbor { lazy } => nearest_neighbor_kernel(Arc::clone(g), lazy)?,
        KernelSpec::DirectHeavyTail { beta } => heavy_tailed_kernel(Arc::clone(g), beta)?,
        KernelSpec::Subordinated { beta, n_terms } => {
            let walk = nearest_neighbor_kernel(Arc::clone(g), SUBORDINATION_BASE_LAZY)?;
            subordinate_kernel(&walk, beta, g.nominal_dw(), n_terms.expect("resolved"))?
        }
    };
    match &spec.perturbation {
        Some(p) => {
            let warnings = base.warnings().to_vec();
            Ok(perturb_kernel(&base, p.seed, p.amplitude)?.with_warnings(warnings))
        }
        None => Ok(base),
    }
}

/// Whether a kernel was read from the cache or rebuilt.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheOutcome {
    Hit,
    Built,
    /// A file with the right name failed to load and was replaced.
    Replaced,
    Skipped,
}

/// Build or load a kernel. Dense kernels are cached under their fingerprint;
/// files are written to a temporary name and renamed into place.
pub fn cached_kernel(
    g: &Arc<WeightedGraph>,
    spec: &KernelConfig,
    dir: Option<&Path>,
) -> Result<(MarkovKernel, String, CacheOutcome)> {
    let resolved = resolve_kernel(spec, g);
    let fp = kernel_fingerprint(g, &resolved);
    let cacheable = !matches!(resolved.spec, KernelSpec::NearestNeighbor { .. });
    let Some(dir) = dir.filter(|_| cacheable) else {
        return Ok((build_kernel(g, &resolved)?, fp, CacheOutcome::Skipped));
    };
    let path = dir.join(format!("{fp}.hklb"));
    let notes_path = dir.join(format!("{fp}.warnings.json"));
    let beta = resolved.spec.beta().unwrap_or(f64::NAN);
    let mut outcome = CacheOutcome::Built;
    if let Ok(f) = File::open(&path) {
        let warnings: Option<Vec<String>> = fs::read(&notes_path)
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok());
        match (read_kernel_cache(BufReader::new(f), Arc::clone(g), beta, kernel_kind(&resolved)), warnings) {
            (Ok(k), Some(w)) => return Ok((k.with_warnings(w), fp, CacheOutcome::Hit)),
            _ => outcome = CacheOutcome::Replaced,
        }
    }
    let k = build_kernel(g, &resolved)?;
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(".{fp}.{}.tmp", std::process::id()));
    {
        let mut out = BufWriter::new(File::create(&tmp)?);
        write_kernel_cache(&k, &mut out)?;
        out.flush()?;
    }
    let tmp_notes = dir.join(format!(".{fp}.{}.warnings.tmp", std::process::id()));
    fs::write(&tmp_notes, serde_json::to_vec(k.warnings()).expect("strings serialize"))?;
    fs::rename(&tmp_notes, &notes_path)?;
    fs::rename(&tmp, &path)?;
    Ok((k, fp, outcome))
}

/// Deepest vertex plus the core vertices a third and two thirds of the way
/// through the core list, deduplicated and sorted.
pub fn default_sources(g: &WeightedGraph) -> Vec<Vertex> {
    let core = g.core_vertices();
    let mut s = vec![g.deepest_vertex()];
    if !core.is_empty() {
        s.push(core[core.len() / 3]);
        s.push(core[2 * core.len() / 3]);
    }
    s.sort_unstable();
    s.dedup();
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub graph_fingerprint: String,
    pub kernel_fingerprint: String,
}

/// Result of one run: named constants, pass/fail checks and plot series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub tag: Tag,
    pub constants: BTreeMap<String, f64>,
    pub checks: BTreeMap<String, bool>,
    /// `(x, y)` points for external plotting.
    pub series: BTreeMap<String, Vec<[f64; 2]>>,
    pub notes: Vec<String>,
    pub files: Vec<String>,
    pub provenance: Provenance,
}

impl RunSummary {
    fn new(tag: Tag, provenance: Provenance) -> Self {
        RunSummary {
            tag,
            constants: BTreeMap::new(),
            checks: BTreeMap::new(),
            series: BTreeMap::new(),
            notes: Vec::new(),
            files: Vec::new(),
            provenance,
        }
    }

    /// Record a constant; non-finite values go to the notes since JSON has no
    /// encoding for them.
    fn put(&mut self, name: impl Into<String>, v: f64) {
        let name = name.into();
        if v.is_finite() {
            self.constants.insert(name, v);
        } else {
            self.notes.push(format!("{name} = {v}"));
        }
    }

    fn check(&mut self, name: &str, ok: bool) {
        self.checks.insert(name.to_string(), ok);
    }

    fn series(&mut self, name: &str, points: Vec<[f64; 2]>) {
        let points: Vec<[f64; 2]> = points.into_iter().filter(|p| p[0].is_finite() && p[1].is_finite()).collect();
        self.series.insert(name.to_string(), points);
    }

    pub fn all_checks_pass(&self) -> bool {
        self.checks.values().all(|&b| b)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serializes");
        s.push('\n');
        s
    }
}

fn write_file(out: &Path, name: &str, summary: &mut RunSummary, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(out.join(name))?);
    body(&mut w)?;
    w.flush()?;
    summary.files.push(name.to_string());
    Ok(())
}

/// Run one experiment and write its artifacts into `out`.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    config.validate()?;
    fs::create_dir_all(out)?;
    let g = Arc::new(build_graph(&config.graph)?);
    let sources = if config.grids.sources.is_empty() {
        default_sources(&g)
    } else {
        config.grids.sources.clone()
    };
    for &x in &sources {
        g.check_vertex(x)?;
    }
    let needs_kernel = config.tag != Tag::Volume;
    let dir = cache_dir(config);
    let (kernel, kernel_fp) = if needs_kernel {
        let (k, fp, _) = cached_kernel(&g, &config.kernel, Some(&dir))?;
        (Some(k), fp)
    } else {
        (None, String::new())
    };
    let provenance = Provenance {
        config_hash: config.hash(),
        seed: config.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        graph_fingerprint: g.fingerprint(),
        kernel_fingerprint: kernel_fp,
    };
    let mut s = RunSummary::new(config.tag, provenance);
    if let Some(k) = &kernel {
        s.notes.extend(k.warnings().iter().cloned());
    }
    let grids = &config.grids;
    let df = g.nominal_df();
    match (config.tag, kernel.as_ref()) {
        (Tag::Volume, _) => run_volume(&g, &sources, grids, out, &mut s)?,
        (Tag::Kernel, Some(k)) => run_kernel(k, out, &mut s)?,
        (Tag::Identities, Some(k)) => {
            let rep = verify_form_identities(k, grids.samples, config.seed)?;
            write_file(out, "identities.csv", &mut s, |w| {
                writeln!(w, "quantity,kind,value")?;
                for (name, v) in &rep.identity_errors {
                    writeln!(w, "{name},relative_error,{v}")?;
                }
                for (name, v) in &rep.inequality_slacks {
                    writeln!(w, "{name},relative_slack,{v}")?;
                }
                Ok(())
            })?;
            s.put("max_identity_error", rep.max_identity_error());
            s.put("min_inequality_slack", rep.min_slack());
            s.check("identities", rep.max_identity_error() <= config.tolerances.identity);
            s.check("stroock_varopoulos", rep.min_slack() >= -config.tolerances.sv_slack);
        }
        (Tag::Hkp, Some(k)) => {
            let pairs = core_pairs_within(&g, &sources, grids.max_distance)?;
            match config.kernel.spec.beta() {
                Some(beta) => {
                    let rep = check_hkp(k, &grids.steps, &pairs, df, beta)?;
                    write_file(out, "hkp.csv", &mut s, |w| rep.write_csv(w))?;
                    record_estimate(&mut s, "", &rep, true);
                }
                None => {
                    let dw = g.nominal_dw();
                    let (up, low) = check_sub_gaussian(k, &grids.steps, &pairs, df, dw, grids.sub_gaussian_c)?;
                    write_file(out, "usg.csv", &mut s, |w| up.write_csv(w))?;
                    write_file(out, "lsg.csv", &mut s, |w| low.write_csv(w))?;
                    record_estimate(&mut s, "usg_", &up, false);
                    record_estimate(&mut s, "lsg_", &low, true);
                }
            }
        }
        (Tag::Csj, Some(k)) => run_csj(k, sources[0], grids, config.seed, out, &mut s)?,
        (Tag::Nash, Some(k)) => {
            let beta = k.nominal_beta();
            let fam = ball_family(&g, sources[0], &grids.radii(Tag::Nash))?;
            let rep = nash_constant(k, df, beta, &fam)?;
            write_file(out, "nash.csv", &mut s, |w| {
                writeln!(w, "function_id,ratio")?;
                for (id, r) in &rep.ratios {
                    writeln!(w, "{id},{r}")?;
                }
                Ok(())
            })?;
            s.put("nash_constant", rep.constant);
            s.notes.extend(rep.skipped.iter().cloned());
            s.check("finite_constant", rep.constant.is_finite() && rep.constant > 0.0);
        }
        (Tag::Exit, Some(k)) => {
            let x = sources[0];
            let mut merged: Option<crate::estimates::SurvivalReport> = None;
            for r in grids.radii(Tag::Exit) {
                let rep = mc_exit_time(k, x, r, &grids.deltas, grids.trials, config.seed)?;
                match &mut merged {
                    Some(m) => m.merge(rep),
                    None => merged = Some(rep),
                }
            }
            let rep = merged.ok_or_else(|| invalid("radius grid is empty"))?;
            write_file(out, "exit.csv", &mut s, |w| rep.write_csv(w))?;
            s.put("tail_constant", rep.tail_constant);
            let smallest = grids.deltas.iter().copied().fold(f64::INFINITY, f64::min);
            let worst = rep
                .cells
                .iter()
                .filter(|c| c.delta == smallest)
                .map(|c| c.p_hat + c.half_width)
                .fold(0.0, f64::max);
            s.put("max_upper_exit_probability_at_smallest_delta", worst);
            s.check("survival_at_smallest_delta", worst <= 0.5);
            s.series(
                "exit_probability_vs_delta",
                rep.cells.iter().map(|c| [c.delta, c.p_hat]).collect(),
            );
        }
        (Tag::Davies, Some(k)) => run_davies(k, &sources, grids, config, out, &mut s)?,
        (_, None) => unreachable!("every tag but volume builds a kernel"),
    }
    fs::write(out.join("summary.json"), s.to_json())?;
    Ok(s)
}

fn record_estimate(s: &mut RunSummary, prefix: &str, rep: &EstimateReport, lower: bool) {
    s.put(format!("{prefix}c_up"), rep.c_up);
    if lower {
        s.put(format!("{prefix}c_low"), rep.c_low);
    }
    s.put(format!("{prefix}dyadic_drift"), rep.dyadic_drift);
    s.put(format!("{prefix}flagged_zero_cells"), rep.flagged_zero_cells as f64);
    let finite = rep.c_up.is_finite() && (!lower || rep.c_low.is_finite());
    s.check(&format!("{prefix}finite_constants"), finite && !rep.cells.is_empty());
    s.series(&format!("{prefix}c_up_vs_n"), rep.slices.iter().map(|c| [c.n, c.c_up]).collect());
    if lower {
        s.series(&format!("{prefix}c_low_vs_n"), rep.slices.iter().map(|c| [c.n, c.c_low]).collect());
    }
    let mut by_d: BTreeMap<u32, f64> = BTreeMap::new();
    for c in &rep.cells {
        let e = by_d.entry(c.d).or_insert(0.0);
        *e = e.max(c.ratio);
    }
    s.series(
        &format!("{prefix}max_ratio_vs_d"),
        by_d.into_iter().map(|(d, r)| [d as f64, r]).collect(),
    );
}

fn run_volume(g: &WeightedGraph, sources: &[Vertex], grids: &Grids, out: &Path, s: &mut RunSummary) -> Result<()> {
    let r_max = grids
        .volume_radius
        .unwrap_or_else(|| sources.iter().map(|&x| g.boundary_distance(x)).min().unwrap_or(0));
    let rep = volume_profile(g, sources, r_max)?;
    write_file(out, "volume.csv", s, |w| {
        writeln!(w, "center,r,volume")?;
        for (x, vols) in rep.centers.iter().zip(&rep.volumes) {
            for (r, v) in vols.iter().enumerate() {
                writeln!(w, "{x},{r},{v}")?;
            }
        }
        Ok(())
    })?;
    if let Some(df) = rep.df_hat {
        s.put("df_hat", df);
    }
    s.put("df_nominal", g.nominal_df());
    s.put("cv_hat", rep.cv_hat);
    s.series(
        "volume_vs_r",
        rep.volumes[0].iter().enumerate().skip(1).map(|(r, v)| [r as f64, *v]).collect(),
    );
    Ok(())
}

fn run_kernel(k: &MarkovKernel, out: &Path, s: &mut RunSummary) -> Result<()> {
    s.put("markov_defect", k.markov_defect());
    s.put("symmetry_defect", k.symmetry_defect());
    s.put("min_value", k.min_value());
    s.check("markov", k.markov_defect() <= 1e-10);
    s.check("symmetric", k.symmetry_defect() <= 1e-12);
    s.check("nonnegative", k.min_value() >= 0.0);
    let beta = k.nominal_beta();
    if beta.is_finite() {
        let rep = check_jump_bounds(k, beta)?;
        s.put("jump_upper", rep.upper);
        s.put("jump_lower", rep.lower);
        write_file(out, "jump_bounds.json", s, |w| {
            serde_json::to_writer_pretty(&mut *w, &rep).map_err(|e| Error::Parse(e.to_string()))?;
            writeln!(w)?;
            Ok(())
        })?;
    }
    Ok(())
}

fn run_csj(k: &MarkovKernel, x: Vertex, grids: &Grids, seed: u64, out: &Path, s: &mut RunSummary) -> Result<()> {
    let g = k.graph();
    let radii = grids.radii(Tag::Csj);
    let mut all = CsjReport { cells: Vec::new() };
    let mut windows = Vec::new();
    for &r in &radii {
        let family = csj_test_family(g, x, r, seed)?;
        for &n in &grids.subannuli {
            let phi = csj_cutoff(k, x, r, n)?;
            let w = csj_window_check(g, &phi, r, n)?;
            windows.push((r, n, w));
            all.merge(verify_csj(k, &phi, &family, r, n)?);
        }
    }
    write_file(out, "csj.csv", s, |w| all.write_csv(w))?;
    write_file(out, "csj_windows.csv", s, |w| {
        writeln!(w, "r,n,sup_deviation,window_violations,endpoint_violations")?;
        for (r, n, c) in &windows {
            writeln!(w, "{r},{n},{},{},{}", c.sup_deviation, c.window_violations, c.endpoint_violations)?;
        }
        Ok(())
    })?;
    let windows_hold = windows.iter().all(|(_, n, w)| w.holds(*n));
    s.check("windows", windows_hold);
    s.check("finite_constants", all.cells.iter().all(|c| c.c2_min.is_finite()));
    let mut drift: f64 = 1.0;
    for pair in radii.windows(2) {
        for &n in &grids.subannuli {
            let a = all.cell(pair[0], n, C1_GRID[0]).map(|c| c.c2_min);
            let b = all.cell(pair[1], n, C1_GRID[0]).map(|c| c.c2_min);
            if let (Some(a), Some(b)) = (a, b) {
                drift = drift.max(ratio_spread(a, b));
            }
        }
    }
    s.put("c2_cross_scale_drift", drift);
    for c in &all.cells {
        s.put(format!("c2[r={},n={},c1={}]", c.r, c.n, c.c1_grid_value), c.c2_min);
    }
    Ok(())
}

fn run_davies(
    k: &MarkovKernel,
    sources: &[Vertex],
    grids: &Grids,
    config: &ExperimentConfig,
    out: &Path,
    s: &mut RunSummary,
) -> Result<()> {
    let g = k.graph();
    let beta = k.nominal_beta();
    let mut pairs = Vec::new();
    for &x in sources {
        let dist = g.distances_from(x)?;
        for (y, &d) in dist.iter().enumerate() {
            if d >= grids.min_distance.max(2) && d <= grids.max_distance && g.is_core(y) {
                pairs.push((x, y));
            }
        }
    }
    let rep = off_diagonal_check(k, &pairs, &grids.times, g.nominal_df(), beta, grids.c3)?;
    write_file(out, "davies.csv", s, |w| rep.write_time_csv(w))?;
    s.put("c_up", rep.c_up);
    s.put("dyadic_drift", rep.dyadic_drift);
    s.check("finite_c_up", rep.c_up.is_finite() && !rep.cells.is_empty());
    s.series("c_up_vs_t", rep.slices.iter().map(|c| [c.n, c.c_up]).collect());

    for &l in &grids.localities {
        let (_, large) = meyer_split(k, l)?;
        let rate = total_jump_rate(&large);
        s.put(format!("large_jump_rate[L={l}]"), rate);
        s.put(format!("large_jump_rate_scaled[L={l}]"), rate * l.powf(beta));
    }
    let samples = sample_davies_inequality(k, &grids.localities, grids.samples, config.seed)?;
    write_file(out, "davies_inequality.csv", s, |w| {
        writeln!(w, "locality,sample,p,osc,lhs,energy_term,drift_term,slack,scale")?;
        for x in &samples {
            let r = &x.report;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                r.locality, x.sample, r.p, r.osc, r.lhs, r.energy_term, r.drift_term, r.slack, r.scale
            )?;
        }
        Ok(())
    })?;
    let tol = config.tolerances.davies_slack;
    let worst = samples
        .iter()
        .map(|x| if x.report.scale > 0.0 { x.report.slack / x.report.scale } else { 0.0 })
        .fold(f64::INFINITY, f64::min);
    s.put("min_relative_slack", worst);
    s.check("energy_inequality", worst >= -tol);
    Ok(())
}

/// Consolidated summaries keyed by experiment tag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Consolidated {
    pub experiments: BTreeMap<String, TagSummary>,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagSummary {
    pub reports: Vec<RunSummary>,
    /// `max/min` ratio of `c_up` between consecutive reports, when there are several.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_up_drift: Option<f64>,
}

/// Merge run summaries into one JSON document and a plot-data CSV with
/// columns `tag,report,series,x,y`. Reports without constants are left out
/// with a note.
pub fn emit_summary(reports: &[RunSummary]) -> Result<(Consolidated, String)> {
    if reports.is_empty() {
        return Err(invalid("no reports to summarize"));
    }
    let mut experiments: BTreeMap<String, TagSummary> = BTreeMap::new();
    let mut notes = Vec::new();
    for r in reports {
        if r.constants.is_empty() {
            notes.push(format!(
                "{} report {} has no constants and was omitted",
                r.tag.as_str(),
                &r.provenance.config_hash[..12.min(r.provenance.config_hash.len())]
            ));
            continue;
        }
        experiments
            .entry(r.tag.as_str().to_string())
            .or_insert_with(|| TagSummary { reports: Vec::new(), c_up_drift: None })
            .reports
            .push(r.clone());
    }
    let mut csv = String::from("tag,report,series,x,y\n");
    for (tag, t) in experiments.iter_mut() {
        let ups: Vec<f64> = t.reports.iter().filter_map(|r| r.constants.get("c_up").copied()).collect();
        if ups.len() >= 2 {
            let drift = ups.windows(2).map(|w| ratio_spread(w[0], w[1])).fold(1.0, f64::max);
            t.c_up_drift = Some(drift);
        }
        for (i, r) in t.reports.iter().enumerate() {
            for (name, points) in &r.series {
                for p in points {
                    csv.push_str(&format!("{tag},{i},{name},{},{}\n", p[0], p[1]));
                }
            }
        }
    }
    Ok((Consolidated { experiments, notes }, csv))
}
