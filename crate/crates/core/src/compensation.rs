//! Ridge reconstruction of the full consumer input from the reduced one,
//! merged into the consumer weights.
//!
//! For consumer-input Gram `G` and reducer `M`, the compensation map is
//!
//! ```text
//! B = G·M · (Mᵀ·G·M + λI)⁻¹,   λ = α · mean diag(Mᵀ·G·M)
//! ```
//!
//! the minimizer of `‖X − X·M·Bᵀ‖²_F + λ‖B‖²_F` over calibration rows `X`.
//! The consumer becomes `W' = W·B`; its bias is left untouched.

use crate::calibration::GramStats;
use crate::error::{GrailError, Result};
use crate::linalg::{matmul, matmul_a_bt, spd_solve, SpdSystem};
use crate::model::{AttentionBlock, Block, ConvBlock, DenseBlock, FfnBlock};
use crate::reducers::{build_reducer, lift_heads, reduce_producer, NarrowedProducer, ReducerMap};
use crate::selectors::{ReductionKind, SelectionDecision};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const DEFAULT_ALPHA: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RidgeConfig {
    /// Ridge strength relative to the mean diagonal of the reduced Gram.
    pub alpha: f64,
}

impl Default for RidgeConfig {
    fn default() -> Self {
        Self { alpha: DEFAULT_ALPHA }
    }
}

impl RidgeConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(GrailError::InvalidArgument(format!(
                "alpha must lie in (0, 1), got {alpha}"
            )));
        }
        Ok(Self { alpha })
    }
}

/// How the consumer is rewritten.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Compensation {
    /// Ridge-compensated consumer `W·B`.
    Ridge(RidgeConfig),
    /// Plain structural reduction: the consumer keeps the columns of the
    /// surviving units (pruning) or sums the columns of each cluster (folding).
    None,
}

/// The `H × K` reconstruction map and the ridge used to get it.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub b: Tensor,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompensationResult {
    pub b: Tensor,
    pub lambda_used: f64,
    /// ‖X·Wᵀ − X·M·(W·U)ᵀ‖_F over the calibration rows, `U` the membership matrix.
    pub calib_error_before: f64,
    /// ‖X·Wᵀ − X·M·(W·B)ᵀ‖_F over the calibration rows.
    pub calib_error_after: f64,
    pub block: Option<usize>,
    pub kind: ReductionKind,
    pub width: usize,
    pub reduced_width: usize,
}

/// `G·M` and `Mᵀ·G·M`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedGram {
    pub cross: Tensor,
    pub reduced: Tensor,
}

/// Reduced statistics. Pruning reducers index into `G` directly unless
/// `force_general` asks for the two GEMMs.
pub fn reduced_gram(g: &Tensor, reducer: &ReducerMap, force_general: bool) -> Result<ReducedGram> {
    if g.rows() != reducer.width() {
        return Err(GrailError::shape("reduced_gram", g.shape(), reducer.m().shape()));
    }
    match reducer.kept() {
        Some(kept) if !force_general => {
            let cross = g.select_cols(kept)?;
            let reduced = cross.select_rows(kept)?;
            Ok(ReducedGram { cross, reduced })
        }
        _ => {
            let cross = matmul(g, reducer.m())?;
            let mut reduced = matmul(&reducer.m().transpose(), &cross)?;
            symmetrize(&mut reduced);
            Ok(ReducedGram { cross, reduced })
        }
    }
}

fn symmetrize(a: &mut Tensor) {
    let n = a.rows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a.at(i, j) + a.at(j, i));
            a.set(i, j, v);
            a.set(j, i, v);
        }
    }
}

fn check_stats(gram: &GramStats) -> Result<()> {
    if gram.n_samples() == 0 {
        return Err(GrailError::EmptyBatch);
    }
    if gram.g().trace() <= 0.0 {
        return Err(GrailError::DegenerateStats(
            "Gram matrix is zero: every unit is dead on the calibration batch".into(),
        ));
    }
    Ok(())
}

fn solve_with(rg: &ReducedGram, lambda: f64) -> Result<Tensor> {
    // (G_red + λI) Xᵀ = G_crossᵀ, B = X
    let sys = SpdSystem::new(rg.reduced.clone(), rg.cross.transpose())?;
    Ok(spd_solve(&sys, lambda)?.transpose())
}

/// Solves for `B` with `λ = α·mean diag(Mᵀ G M)`.
pub fn solve_reconstruction(gram: &GramStats, reducer: &ReducerMap, cfg: &RidgeConfig) -> Result<Reconstruction> {
    check_stats(gram)?;
    let rg = reduced_gram(gram.g(), reducer, false)?;
    let diag = rg.reduced.diag();
    let mean_diag = diag.iter().sum::<f64>() / diag.len() as f64;
    if mean_diag <= 0.0 {
        return Err(GrailError::DegenerateStats(
            "retained units carry no activation energy".into(),
        ));
    }
    let lambda = cfg.alpha * mean_diag;
    Ok(Reconstruction {
        b: solve_with(&rg, lambda)?,
        lambda,
    })
}

/// Solves for `B` with an explicit ridge `λ ≥ 0`.
pub fn solve_reconstruction_with_lambda(gram: &GramStats, reducer: &ReducerMap, lambda: f64) -> Result<Reconstruction> {
    check_stats(gram)?;
    let rg = reduced_gram(gram.g(), reducer, false)?;
    Ok(Reconstruction {
        b: solve_with(&rg, lambda)?,
        lambda,
    })
}

/// `‖X·Dᵀ‖_F` evaluated from `G = XᵀX` as `sqrt(tr(D·G·Dᵀ))`.
pub fn output_error(d: &Tensor, g: &Tensor) -> Result<f64> {
    let dg = matmul(d, g)?;
    let sq: f64 = dg.data().iter().zip(d.data()).map(|(a, b)| a * b).sum();
    Ok(sq.max(0.0).sqrt())
}

/// Output error of replacing consumer matrix `c` (`R × H`) by `c_new` (`R × K`)
/// fed with reduced activations.
fn consumer_error(c: &Tensor, c_new: &Tensor, reducer: &ReducerMap, g: &Tensor) -> Result<f64> {
    // D = C − C'·Mᵀ
    let d = c.sub(&matmul_a_bt(c_new, reducer.m())?)?;
    output_error(&d, g)
}

/// Rewrites a consumer matrix whose columns index the hidden units.
pub fn compensate_consumer(
    consumer: &Tensor,
    gram: &GramStats,
    reducer: &ReducerMap,
    mode: Compensation,
) -> Result<(Tensor, CompensationResult)> {
    consumer.expect_rank(2, "consumer")?;
    if consumer.cols() != reducer.width() || gram.width() != reducer.width() {
        return Err(GrailError::shape("compensate_consumer", consumer.shape(), gram.g().shape()));
    }
    let naive = match reducer.kept() {
        Some(kept) => consumer.select_cols(kept)?,
        None => matmul(consumer, &reducer.indicator())?,
    };
    let before = consumer_error(consumer, &naive, reducer, gram.g())?;
    let (b, lambda, new_consumer, after) = match mode {
        Compensation::Ridge(cfg) => {
            let rec = solve_reconstruction(gram, reducer, &cfg)?;
            let merged = matmul(consumer, &rec.b)?;
            let after = consumer_error(consumer, &merged, reducer, gram.g())?;
            (rec.b, rec.lambda, merged, after)
        }
        Compensation::None => (reducer.indicator(), 0.0, naive, before),
    };
    Ok((
        new_consumer,
        CompensationResult {
            b,
            lambda_used: lambda,
            calib_error_before: before,
            calib_error_after: after,
            block: gram.tap().map(|t| t.block),
            kind: reducer.kind(),
            width: reducer.width(),
            reduced_width: reducer.reduced_width(),
        },
    ))
}

fn expect_channels(p: NarrowedProducer) -> (Tensor, Tensor) {
    match p {
        NarrowedProducer::Channels { weight, bias } => (weight, bias),
        NarrowedProducer::Heads { .. } => unreachable!("channel block produced head weights"),
    }
}

/// The reducer matching a block: Kronecker-lifted for attention heads.
pub fn reducer_for(block: &Block, decision: &SelectionDecision) -> Result<ReducerMap> {
    match block {
        Block::Attention(a) => lift_heads(decision, a.n_heads, a.head_dim, a.gqa_groups),
        other => build_reducer(decision, other.hidden_width()),
    }
}

/// Compresses any block: narrows its producer and rewrites its consumer.
pub fn compress_block(
    block: &Block,
    decision: &SelectionDecision,
    gram: &GramStats,
    mode: Compensation,
) -> Result<(Block, CompensationResult)> {
    let reducer = reducer_for(block, decision)?;
    let producer = reduce_producer(block, &reducer)?;
    match block {
        Block::Dense(b) => {
            let (w, res) = compensate_consumer(&b.w_consumer, gram, &reducer, mode)?;
            let (wp, bp) = expect_channels(producer);
            Ok((
                Block::Dense(DenseBlock {
                    w_producer: wp,
                    b_producer: bp,
                    activation: b.activation,
                    w_consumer: w,
                    b_consumer: b.b_consumer.clone(),
                }),
                res,
            ))
        }
        Block::Ffn(b) => {
            let (w, res) = compensate_consumer(&b.w_proj, gram, &reducer, mode)?;
            let (wp, bp) = expect_channels(producer);
            Ok((
                Block::Ffn(FfnBlock {
                    w_fc: wp,
                    b_fc: bp,
                    activation: b.activation,
                    w_proj: w,
                    b_proj: b.b_proj.clone(),
                }),
                res,
            ))
        }
        Block::Conv(b) => {
            let kernel = conv_consumer_matrix(&b.w_consumer);
            let (w, res) = compensate_consumer(&kernel, gram, &reducer, mode)?;
            let s = b.w_consumer.shape();
            let (wp, bp) = expect_channels(producer);
            Ok((
                Block::Conv(ConvBlock {
                    w_producer: wp,
                    b_producer: bp,
                    activation: b.activation,
                    w_consumer: conv_consumer_kernel(&w, s[0], s[2], s[3]),
                    b_consumer: b.b_consumer.clone(),
                    producer_geometry: b.producer_geometry,
                    consumer_geometry: b.consumer_geometry,
                }),
                res,
            ))
        }
        Block::Attention(a) => {
            let (w_o, res) = compensate_consumer(&a.w_o, gram, &reducer, mode)?;
            let NarrowedProducer::Heads { w_q, w_k, w_v, n_heads } = producer else {
                unreachable!("attention block produced channel weights")
            };
            Ok((
                Block::Attention(AttentionBlock {
                    w_q,
                    w_k,
                    w_v,
                    w_o,
                    n_heads,
                    head_dim: a.head_dim,
                    gqa_groups: a.gqa_groups,
                    causal: a.causal,
                }),
                res,
            ))
        }
    }
}

/// `O×H×kH×kW` → `(O·kH·kW) × H`, one row per output channel and kernel tap.
fn conv_consumer_matrix(w: &Tensor) -> Tensor {
    let s = w.shape();
    let (o, h, kh, kw) = (s[0], s[1], s[2], s[3]);
    let taps = kh * kw;
    Tensor::from_fn2(o * taps, h, |r, c| {
        let (oc, t) = (r / taps, r % taps);
        w.data()[(oc * h + c) * taps + t]
    })
}

fn conv_consumer_kernel(m: &Tensor, o: usize, kh: usize, kw: usize) -> Tensor {
    let k = m.cols();
    let taps = kh * kw;
    let mut data = vec![0.0; o * k * taps];
    for oc in 0..o {
        for t in 0..taps {
            for c in 0..k {
                data[(oc * k + c) * taps + t] = m.at(oc * taps + t, c);
            }
        }
    }
    Tensor::new(vec![o, k, kh, kw], data).expect("kernel shape")
}

pub fn merge_dense(
    block: &DenseBlock,
    decision: &SelectionDecision,
    gram: &GramStats,
    cfg: &RidgeConfig,
) -> Result<(DenseBlock, CompensationResult)> {
    match compress_block(&Block::Dense(block.clone()), decision, gram, Compensation::Ridge(*cfg))? {
        (Block::Dense(b), r) => Ok((b, r)),
        _ => unreachable!(),
    }
}

pub fn merge_conv(
    block: &ConvBlock,
    decision: &SelectionDecision,
    gram: &GramStats,
    cfg: &RidgeConfig,
) -> Result<(ConvBlock, CompensationResult)> {
    match compress_block(&Block::Conv(block.clone()), decision, gram, Compensation::Ridge(*cfg))? {
        (Block::Conv(b), r) => Ok((b, r)),
        _ => unreachable!(),
    }
}

pub fn merge_ffn(
    block: &FfnBlock,
    decision: &SelectionDecision,
    gram: &GramStats,
    cfg: &RidgeConfig,
) -> Result<(FfnBlock, CompensationResult)> {
    match compress_block(&Block::Ffn(block.clone()), decision, gram, Compensation::Ridge(*cfg))? {
        (Block::Ffn(b), r) => Ok((b, r)),
        _ => unreachable!(),
    }
}

pub fn merge_attention(
    block: &AttentionBlock,
    decision: &SelectionDecision,
    gram: &GramStats,
    cfg: &RidgeConfig,
) -> Result<(AttentionBlock, CompensationResult)> {
    match compress_block(&Block::Attention(block.clone()), decision, gram, Compensation::Ridge(*cfg))? {
        (Block::Attention(b), r) => Ok((b, r)),
        _ => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selectors::Unit;
    use crate::testutil::random_matrix;

    fn stats(g: Tensor) -> GramStats {
        GramStats::from_parts(g, 10, None).unwrap()
    }

    fn prune(width: usize, kept: Vec<usize>) -> ReducerMap {
        build_reducer(&SelectionDecision::prune(width, kept, Unit::Channel, vec![]).unwrap(), width).unwrap()
    }

    #[test]
    fn identity_gram_shrinks_selection() {
        let r = prune(4, vec![1, 3]);
        let rec = solve_reconstruction(&stats(Tensor::eye(4)), &r, &RidgeConfig::new(0.01).unwrap()).unwrap();
        assert_eq!(rec.lambda, 0.01);
        assert!(rec.b.max_abs_diff(&r.m().scale(1.0 / 1.01)) <= 1e-15);
    }

    #[test]
    fn correlated_pair_keep_first() {
        let g = Tensor::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let rec = solve_reconstruction_with_lambda(&stats(g), &prune(2, vec![0]), 0.0).unwrap();
        assert!(rec.b.max_abs_diff(&Tensor::from_rows(&[vec![1.0], vec![0.5]]).unwrap()) <= 1e-15);
    }

    #[test]
    fn fold_pair_identity_gram() {
        let d = SelectionDecision::fold(2, vec![vec![0, 1]], Unit::Channel, vec![]).unwrap();
        let r = build_reducer(&d, 2).unwrap();
        let rg = reduced_gram(&Tensor::eye(2), &r, false).unwrap();
        assert_eq!(rg.reduced.data(), &[0.5]);
        assert_eq!(rg.cross.data(), &[0.5, 0.5]);
        let rec = solve_reconstruction_with_lambda(&stats(Tensor::eye(2)), &r, 0.0).unwrap();
        assert!(rec.b.data().iter().all(|v| (v - 1.0).abs() <= 1e-15));
    }

    #[test]
    fn fast_path_matches_general() {
        let x = random_matrix(60, 12, 4);
        let g = GramStats::from_rows(&x, None).unwrap();
        let r = prune(12, vec![0, 3, 4, 8, 11]);
        let fast = reduced_gram(g.g(), &r, false).unwrap();
        let general = reduced_gram(g.g(), &r, true).unwrap();
        assert!(fast.cross.max_abs_diff(&general.cross) <= 1e-12);
        assert!(fast.reduced.max_abs_diff(&general.reduced) <= 1e-12);
    }

    #[test]
    fn zero_gram_is_degenerate() {
        let err = solve_reconstruction(&stats(Tensor::zeros(&[3, 3])), &prune(3, vec![0]), &RidgeConfig::default())
            .unwrap_err();
        assert!(matches!(err, GrailError::DegenerateStats(_)));
        let mut g = Tensor::zeros(&[2, 2]);
        g.set(1, 1, 1.0);
        let err = solve_reconstruction(&stats(g), &prune(2, vec![0]), &RidgeConfig::default()).unwrap_err();
        assert!(matches!(err, GrailError::DegenerateStats(_)));
    }

    #[test]
    fn alpha_bounds() {
        assert!(RidgeConfig::new(0.0).is_err());
        assert!(RidgeConfig::new(1.0).is_err());
        assert!(RidgeConfig::new(f64::NAN).is_err());
        assert_eq!(RidgeConfig::default().alpha, 1e-3);
    }

    #[test]
    fn output_error_matches_direct() {
        let x = random_matrix(30, 5, 1);
        let d = random_matrix(3, 5, 2);
        let g = GramStats::from_rows(&x, None).unwrap();
        let direct = matmul_a_bt(&x, &d).unwrap().frobenius();
        assert!((output_error(&d, g.g()).unwrap() - direct).abs() < 1e-10 * direct);
    }

    #[test]
    fn conv_matrix_round_trip() {
        let w = random_matrix(3 * 4 * 2 * 2, 1, 3).reshape(vec![3, 4, 2, 2]).unwrap();
        let m = conv_consumer_matrix(&w);
        assert_eq!(m.shape(), &[12, 4]);
        assert_eq!(conv_consumer_kernel(&m, 3, 2, 2), w);
    }

    #[test]
    fn no_compensation_keeps_errors_equal() {
        let x = random_matrix(40, 6, 9);
        let g = GramStats::from_rows(&x, None).unwrap();
        let w = random_matrix(3, 6, 10);
        let r = prune(6, vec![1, 2, 5]);
        let (c, res) = compensate_consumer(&w, &g, &r, Compensation::None).unwrap();
        assert_eq!(c, w.select_cols(&[1, 2, 5]).unwrap());
        assert_eq!(res.calib_error_after, res.calib_error_before);
    }
}
