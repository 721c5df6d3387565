use super::{column_norms, GramStats, Tap};
use crate::error::{GrailError, Result};
use crate::model::{Block, BlockGraph};
use crate::tensor::Tensor;

/// Statistics for one planned block, taken after every earlier planned block
/// has been replaced by its compressed version.
#[derive(Debug, Clone)]
pub struct CalibrationStep {
    pub block: usize,
    pub stats: GramStats,
    /// Consumer-input activations, `N_eff × H`.
    pub activations: Tensor,
    /// The batch as it enters the block.
    pub block_input: Tensor,
    /// Per-feature L2 norms of the producer input.
    pub input_norms: Tensor,
}

/// Sequential recalibration over a graph.
///
/// Call [`ClosedLoop::next_step`] to get statistics for the next planned
/// block, then optionally [`ClosedLoop::commit`] its replacement. The
/// calibration batch is pushed through each block at most twice.
#[derive(Debug)]
pub struct ClosedLoop {
    graph: BlockGraph,
    plan: Vec<usize>,
    cursor: usize,
    position: usize,
    current: Tensor,
    pending: Option<usize>,
}

impl ClosedLoop {
    pub fn new(graph: BlockGraph, batch: &Tensor, plan: Vec<usize>) -> Result<Self> {
        graph.check_batch(batch)?;
        if plan.windows(2).any(|w| w[0] >= w[1]) {
            return Err(GrailError::InvalidArgument(format!(
                "plan blocks must be strictly ascending: {plan:?}"
            )));
        }
        if let Some(&last) = plan.last() {
            graph.block(last)?;
        }
        Ok(Self {
            graph,
            plan,
            cursor: 0,
            position: 0,
            current: batch.clone(),
            pending: None,
        })
    }

    fn advance_through(&mut self, block: usize) -> Result<()> {
        let (y, _) = self.graph.blocks()[block]
            .forward(&self.current, false)
            .map_err(|e| e.at_block(block))?;
        self.current = y;
        self.position = block + 1;
        Ok(())
    }

    pub fn next_step(&mut self) -> Option<Result<CalibrationStep>> {
        let target = *self.plan.get(self.cursor)?;
        self.cursor += 1;
        Some(self.step_to(target))
    }

    fn step_to(&mut self, target: usize) -> Result<CalibrationStep> {
        if let Some(prev) = self.pending.take() {
            self.advance_through(prev)?;
        }
        while self.position < target {
            self.advance_through(self.position)?;
        }
        let block = &self.graph.blocks()[target];
        let (_, cap) = block.forward(&self.current, true).map_err(|e| e.at_block(target))?;
        let activations = cap.expect("capture requested");
        let input_norms = column_norms(&block.producer_input_rows(&self.current)?);
        let stats = GramStats::from_rows(&activations, Some(Tap { block: target }))?;
        self.pending = Some(target);
        Ok(CalibrationStep {
            block: target,
            stats,
            activations,
            block_input: self.current.clone(),
            input_norms,
        })
    }

    /// Installs the replacement for the block of the latest step.
    pub fn commit(&mut self, replacement: Block) -> Result<()> {
        let i = self.pending.take().ok_or_else(|| {
            GrailError::InvalidArgument("commit called without a pending calibration step".into())
        })?;
        self.graph.replace_block(i, replacement).map_err(|e| e.at_block(i))?;
        self.advance_through(i)
    }

    pub fn graph(&self) -> &BlockGraph {
        &self.graph
    }

    pub fn into_graph(self) -> BlockGraph {
        self.graph
    }
}

/// Drives a [`ClosedLoop`] to completion. `compress` sees each step and the
/// current block and returns its replacement, or `None` to keep it.
pub fn closed_loop_pass<F>(
    graph: BlockGraph,
    batch: &Tensor,
    plan: Vec<usize>,
    mut compress: F,
) -> Result<(Vec<GramStats>, BlockGraph)>
where
    F: FnMut(&CalibrationStep, &Block) -> Result<Option<Block>>,
{
    let mut cl = ClosedLoop::new(graph, batch, plan)?;
    let mut stats = Vec::new();
    while let Some(step) = cl.next_step() {
        let step = step?;
        let current = cl.graph().blocks()[step.block].clone();
        if let Some(new_block) = compress(&step, &current).map_err(|e| e.at_block(step.block))? {
            cl.commit(new_block)?;
        }
        stats.push(step.stats);
    }
    Ok((stats, cl.into_graph()))
}
