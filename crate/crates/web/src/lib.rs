//! Browser bindings: build a gasket with a heavy-tailed walk and query heat
//! kernel rows, cutoff functions and exit probabilities.

use std::sync::Arc;

use hklab_core::cutoff::csj_cutoff;
use hklab_core::estimates::mc_exit_time;
use hklab_core::kernel::{heavy_tailed_kernel, propagate_rows};
use hklab_core::{build_graph, GraphSpec, MarkovKernel, WeightedGraph};
use wasm_bindgen::prelude::*;

/// Largest gasket level offered in the browser (1095 vertices).
pub const MAX_LEVEL: u32 = 6;

#[wasm_bindgen]
pub struct Demo {
    graph: Arc<WeightedGraph>,
    kernel: MarkovKernel,
}

#[wasm_bindgen]
impl Demo {
    /// Gasket of the given level with the direct heavy-tailed kernel of index `beta`.
    #[wasm_bindgen(constructor)]
    pub fn new(level: u32, beta: f64) -> Result<Demo, String> {
        if level == 0 || level > MAX_LEVEL {
            return Err(format!("level must be between 1 and {MAX_LEVEL}"));
        }
        let graph = Arc::new(build_graph(&GraphSpec::Gasket { level }).map_err(|e| e.to_string())?);
        let kernel = heavy_tailed_kernel(Arc::clone(&graph), beta).map_err(|e| e.to_string())?;
        Ok(Demo { graph, kernel })
    }

    pub fn vertex_count(&self) -> usize {
        self.graph.n_vertices()
    }

    /// Interleaved `x, y` drawing coordinates.
    pub fn positions(&self) -> Vec<f64> {
        self.graph.positions().iter().flat_map(|p| [p[0], p[1]]).collect()
    }

    /// Interleaved endpoint pairs.
    pub fn edges(&self) -> Vec<u32> {
        self.graph.edges().flat_map(|(a, b, _)| [a as u32, b as u32]).collect()
    }

    pub fn deepest_vertex(&self) -> usize {
        self.graph.deepest_vertex()
    }

    pub fn core_radius(&self) -> u32 {
        self.graph.core_radius()
    }

    /// The row `k_n(source, ·)`.
    pub fn heat_row(&self, source: usize, steps: usize) -> Result<Vec<f64>, String> {
        self.graph.check_vertex(source).map_err(|e| e.to_string())?;
        if steps == 0 || steps > 256 {
            return Err("steps must be between 1 and 256".into());
        }
        let mut row = Vec::new();
        propagate_rows(&self.kernel, &[source], steps, |n, rows| {
            if n == steps {
                row = rows.row(0).to_vec();
            }
        });
        Ok(row)
    }

    /// Cutoff built from `n` nested annuli around `center` at radius `r`.
    pub fn cutoff(&self, center: usize, r: u32, n: usize) -> Result<Vec<f64>, String> {
        let phi = csj_cutoff(&self.kernel, center, r, n).map_err(|e| e.to_string())?;
        Ok(phi.values.into_values())
    }

    /// `[p̂, half_width]` for `P(τ_{B(center,r)} ≤ δ r^β)`.
    pub fn exit_probability(
        &self,
        center: usize,
        r: u32,
        delta: f64,
        trials: u32,
        seed: u32,
    ) -> Result<Vec<f64>, String> {
        let rep = mc_exit_time(&self.kernel, center, r, &[delta], trials as u64, seed as u64)
            .map_err(|e| e.to_string())?;
        let c = &rep.cells[0];
        Ok(vec![c.p_hat, c.half_width])
    }
}
