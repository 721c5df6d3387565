//! End-to-end closed-loop compression of a block graph.

use crate::calibration::{CalibrationStep, ClosedLoop};
use crate::compensation::{compress_block, reducer_for, Compensation, RidgeConfig, DEFAULT_ALPHA};
use crate::error::{GrailError, Result};
use crate::model::{Block, BlockGraph};
use crate::selectors::{
    select_fold, select_heads, select_magnitude, select_wanda, HeadMethod, Norm, ReductionKind, SelectionDecision,
};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "mag-l1")]
    MagL1,
    #[serde(rename = "mag-l2")]
    MagL2,
    #[serde(rename = "wanda")]
    Wanda,
    #[serde(rename = "fold")]
    Fold,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::MagL1, Method::MagL2, Method::Wanda, Method::Fold];

    pub fn name(self) -> &'static str {
        match self {
            Method::MagL1 => "mag-l1",
            Method::MagL2 => "mag-l2",
            Method::Wanda => "wanda",
            Method::Fold => "fold",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = GrailError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                GrailError::InvalidArgument(format!(
                    "unknown method {s:?}; valid methods: mag-l1, mag-l2, wanda, fold"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockPlan {
    pub block: usize,
    pub method: Method,
    /// Fraction of units removed, in `[0, 1)`.
    pub ratio: f64,
    #[serde(default = "yes")]
    pub compensate: bool,
}

fn yes() -> bool {
    true
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionPlan {
    pub blocks: Vec<BlockPlan>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
    /// Calibration file path, used by the command-line front end.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calib: Option<String>,
}

impl CompressionPlan {
    /// The same method and ratio on every block.
    pub fn uniform(n_blocks: usize, method: Method, ratio: f64, compensate: bool, alpha: f64, seed: u64) -> Self {
        Self {
            blocks: (0..n_blocks)
                .map(|block| BlockPlan {
                    block,
                    method,
                    ratio,
                    compensate,
                })
                .collect(),
            alpha,
            seed,
            calib: None,
        }
    }

    pub fn validate(&self, n_blocks: usize) -> Result<()> {
        RidgeConfig::new(self.alpha)?;
        if self.blocks.windows(2).any(|w| w[0].block >= w[1].block) {
            return Err(GrailError::InvalidArgument(
                "plan blocks must be listed in strictly ascending order".into(),
            ));
        }
        for b in &self.blocks {
            if !(0.0..1.0).contains(&b.ratio) {
                return Err(GrailError::InvalidArgument(format!(
                    "ratio {} for block {} outside [0, 1)",
                    b.ratio, b.block
                )));
            }
            if b.block >= n_blocks {
                return Err(GrailError::InvalidArgument(format!(
                    "plan names block {} but the model has {n_blocks}",
                    b.block
                )));
            }
        }
        Ok(())
    }
}

/// Surviving unit count for removal fraction `ratio`, at least one.
pub fn kept_units(width: usize, ratio: f64) -> usize {
    let k = ((1.0 - ratio) * width as f64).round() as usize;
    k.clamp(1, width)
}

/// Surviving head count, a positive multiple of the group count.
pub fn kept_heads(n_heads: usize, groups: usize, ratio: f64) -> usize {
    let k = kept_units(n_heads, ratio);
    (k / groups).max(1) * groups
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockReport {
    pub block: usize,
    pub kind: String,
    pub method: Method,
    pub compensated: bool,
    pub width: usize,
    #[serde(rename = "K")]
    pub reduced_width: usize,
    pub lambda_used: f64,
    pub calib_error_before: f64,
    pub calib_error_after: f64,
    /// ‖y_original − y_compressed‖_F of this block on its calibration input.
    pub realized_output_error: f64,
    /// For folding: relative gap between `X·M` and the activations the folded
    /// producer really emits (they differ whenever the activation is nonlinear).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fold_activation_gap: Option<f64>,
    pub t_calib_s: f64,
    pub t_comp_s: f64,
}

#[derive(Debug, Clone)]
pub struct CompressionOutcome {
    pub graph: BlockGraph,
    pub reports: Vec<BlockReport>,
}

/// Chooses units of `block` with `method`.
pub fn select_units(
    block: &Block,
    step: &CalibrationStep,
    method: Method,
    ratio: f64,
    seed: u64,
) -> Result<SelectionDecision> {
    match block {
        Block::Attention(a) => {
            let k = kept_heads(a.n_heads, a.gqa_groups, ratio);
            let hm = match method {
                Method::MagL1 | Method::MagL2 => HeadMethod::L2,
                Method::Wanda => HeadMethod::Wanda,
                Method::Fold => HeadMethod::Fold,
            };
            select_heads(a, &step.stats, k, hm, seed)
        }
        _ => {
            let wp = match block {
                Block::Dense(b) => &b.w_producer,
                Block::Conv(b) => &b.w_producer,
                Block::Ffn(b) => &b.w_fc,
                Block::Attention(_) => unreachable!(),
            };
            let k = kept_units(block.hidden_width(), ratio);
            match method {
                Method::MagL1 => select_magnitude(wp, k, Norm::L1),
                Method::MagL2 => select_magnitude(wp, k, Norm::L2),
                Method::Wanda => select_wanda(wp, &step.input_norms, k),
                Method::Fold => select_fold(wp, k, seed),
            }
        }
    }
}

/// Compresses the planned blocks in order, each calibrated on the outputs of
/// the already-compressed blocks before it.
pub fn compress_graph(graph: &BlockGraph, calib: &Tensor, plan: &CompressionPlan) -> Result<CompressionOutcome> {
    plan.validate(graph.len())?;
    let cfg = RidgeConfig::new(plan.alpha)?;
    let order: Vec<usize> = plan.blocks.iter().map(|b| b.block).collect();
    let mut cl = ClosedLoop::new(graph.clone(), calib, order)?;
    let mut reports = Vec::with_capacity(plan.blocks.len());

    for bp in &plan.blocks {
        let watch = Stopwatch::start();
        let step = cl.next_step().expect("one step per planned block")?;
        let t_calib_s = watch.elapsed_s();

        let watch = Stopwatch::start();
        let original = cl.graph().blocks()[bp.block].clone();
        let seed = plan.seed.wrapping_add(bp.block as u64);
        let mode = if bp.compensate {
            Compensation::Ridge(cfg)
        } else {
            Compensation::None
        };
        let decision = select_units(&original, &step, bp.method, bp.ratio, seed)
            .map_err(|e| e.at_block(bp.block))?;
        let (compressed, res) = compress_block(&original, &decision, &step.stats, mode)
            .map_err(|e| e.at_block(bp.block))?;
        let t_comp_s = watch.elapsed_s();

        let (y_orig, _) = original.forward(&step.block_input, false)?;
        let (y_new, realized) = compressed.forward(&step.block_input, true)?;
        let fold_activation_gap = match (res.kind, realized) {
            (ReductionKind::Fold, Some(real)) => {
                let reduced = reducer_for(&original, &decision)?.reduce_activations(&step.activations)?;
                Some(real.rel_diff(&reduced))
            }
            _ => None,
        };
        reports.push(BlockReport {
            block: bp.block,
            kind: original.kind().to_string(),
            method: bp.method,
            compensated: bp.compensate,
            width: res.width,
            reduced_width: res.reduced_width,
            lambda_used: res.lambda_used,
            calib_error_before: res.calib_error_before,
            calib_error_after: res.calib_error_after,
            realized_output_error: y_new.sub(&y_orig)?.frobenius(),
            fold_activation_gap,
            t_calib_s,
            t_comp_s,
        });
        cl.commit(compressed)?;
    }
    Ok(CompressionOutcome {
        graph: cl.into_graph(),
        reports,
    })
}

/// Wall-clock stopwatch; reads zero where no clock is available.
#[derive(Debug, Clone, Copy)]
pub struct Stopwatch {
    #[cfg(not(target_arch = "wasm32"))]
    start: std::time::Instant,
}

impl Stopwatch {
    pub fn start() -> Self {
        Self {
            #[cfg(not(target_arch = "wasm32"))]
            start: std::time::Instant::now(),
        }
    }

    pub fn elapsed_s(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        {
            self.start.elapsed().as_secs_f64()
        }
        #[cfg(target_arch = "wasm32")]
        {
            0.0
        }
    }
}
