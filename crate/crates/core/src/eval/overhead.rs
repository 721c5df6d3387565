use crate::error::Result;
use crate::model::BlockGraph;
use crate::pipeline::{compress_graph, CompressionPlan};
use crate::tensor::Tensor;
use serde::Serialize;

/// Bytes held by one `H × H` f64 Gram matrix.
pub fn gram_bytes(h: usize) -> u64 {
    (h * h * 8) as u64
}

/// Transient solver storage for reducing `H` units to `K`: the reduced Gram
/// (overwritten by its Cholesky factor), `G·M` and `B`.
pub fn solver_bytes(h: usize, k: usize) -> u64 {
    (8 * (k * k + 2 * h * k)) as u64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageCost {
    pub block: usize,
    pub width: usize,
    #[serde(rename = "K")]
    pub reduced_width: usize,
    pub t_calib_s: f64,
    pub t_comp_s: f64,
    pub gram_bytes: u64,
    pub solver_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverheadReport {
    pub blocks: Vec<StageCost>,
    pub t_calib_s: f64,
    pub t_comp_s: f64,
    /// Largest per-block transient footprint; blocks are processed one at a time.
    pub peak_bytes: u64,
}

/// Runs the plan once and splits its cost into calibration (forward passes
/// and Gram accumulation) and compensation (selection, solve, merge).
/// Memory figures are analytic, not measured.
pub fn measure_overhead(graph: &BlockGraph, batch: &Tensor, plan: &CompressionPlan) -> Result<OverheadReport> {
    let outcome = compress_graph(graph, batch, plan)?;
    let blocks: Vec<StageCost> = outcome
        .reports
        .iter()
        .map(|r| StageCost {
            block: r.block,
            width: r.width,
            reduced_width: r.reduced_width,
            t_calib_s: r.t_calib_s,
            t_comp_s: r.t_comp_s,
            gram_bytes: gram_bytes(r.width),
            solver_bytes: solver_bytes(r.width, r.reduced_width),
        })
        .collect();
    Ok(OverheadReport {
        t_calib_s: blocks.iter().map(|b| b.t_calib_s).sum(),
        t_comp_s: blocks.iter().map(|b| b.t_comp_s).sum(),
        peak_bytes: blocks.iter().map(|b| b.gram_bytes + b.solver_bytes).max().unwrap_or(0),
        blocks,
    })
}
