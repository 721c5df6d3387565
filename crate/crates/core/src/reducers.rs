//! The reducer matrix `M` (`H × K`, reduced activations `H_red = H·M`) and
//! the producer-side rewrite that goes with it.

use crate::error::{GrailError, Result};
use crate::linalg::{block_diag, kronecker};
use crate::model::{AttentionBlock, Block};
use crate::selectors::{Reduction, ReductionKind, SelectionDecision, Unit};
use crate::tensor::Tensor;

/// Head structure of a lifted reducer.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMeta {
    pub n_heads: usize,
    pub head_dim: usize,
    pub groups: usize,
    /// Heads kept (or clusters formed) per group.
    pub per_group_k: usize,
    /// The per-group reduction over the `n_heads / groups` key/value slots.
    pub kv_reduction: Reduction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReducerMap {
    m: Tensor,
    /// The same reduction expressed over feature indices.
    features: Reduction,
    head_meta: Option<HeadMeta>,
}

fn reducer_matrix(width: usize, r: &Reduction) -> Tensor {
    match r {
        Reduction::Prune { kept } => {
            let mut m = Tensor::zeros(&[width, kept.len()]);
            for (k, &p) in kept.iter().enumerate() {
                m.set(p, k, 1.0);
            }
            m
        }
        Reduction::Fold { clusters } => {
            let mut m = Tensor::zeros(&[width, clusters.len()]);
            for (k, c) in clusters.iter().enumerate() {
                let w = 1.0 / c.len() as f64;
                for &h in c {
                    m.set(h, k, w);
                }
            }
            m
        }
    }
}

/// Materializes a channel-level (or unlifted head-level) decision as `M`.
pub fn build_reducer(decision: &SelectionDecision, width: usize) -> Result<ReducerMap> {
    if decision.width() != width {
        return Err(GrailError::InvalidArgument(format!(
            "decision covers {} units but the layer has {width}",
            decision.width()
        )));
    }
    Ok(ReducerMap {
        m: reducer_matrix(width, decision.reduction()),
        features: decision.reduction().clone(),
        head_meta: None,
    })
}

/// Extracts the per-group key/value reduction, failing unless every group
/// applies the identical reduction.
fn per_group_reduction(decision: &SelectionDecision, groups: usize) -> Result<Reduction> {
    let nh = decision.width();
    let k = decision.reduced_width();
    if groups == 0 || !nh.is_multiple_of(groups) {
        return Err(GrailError::Gqa(format!("{nh} heads cannot form {groups} groups")));
    }
    if !k.is_multiple_of(groups) {
        return Err(GrailError::Gqa(format!(
            "{k} reduced heads are not divisible by {groups} groups"
        )));
    }
    let nkv = nh / groups;
    let kkv = k / groups;
    let not_blockdiag = || {
        GrailError::Gqa("head reduction differs between groups (reducer must be block-diagonal)".into())
    };
    match decision.reduction() {
        Reduction::Prune { kept } => {
            let slots: Vec<usize> = kept[..kkv].to_vec();
            if slots.iter().any(|&h| h >= nkv) {
                return Err(not_blockdiag());
            }
            for g in 0..groups {
                let expect = slots.iter().map(|&j| g * nkv + j);
                if !kept[g * kkv..(g + 1) * kkv].iter().copied().eq(expect) {
                    return Err(not_blockdiag());
                }
            }
            Ok(Reduction::Prune { kept: slots })
        }
        Reduction::Fold { clusters } => {
            let slots: Vec<Vec<usize>> = clusters[..kkv].to_vec();
            if slots.iter().flatten().any(|&h| h >= nkv) {
                return Err(not_blockdiag());
            }
            for g in 0..groups {
                for (c, members) in slots.iter().enumerate() {
                    let expect = members.iter().map(|&j| g * nkv + j);
                    if !clusters[g * kkv + c].iter().copied().eq(expect) {
                        return Err(not_blockdiag());
                    }
                }
            }
            Ok(Reduction::Fold { clusters: slots })
        }
    }
}

fn expand_to_features(r: &Reduction, head_dim: usize) -> Reduction {
    match r {
        Reduction::Prune { kept } => Reduction::Prune {
            kept: kept
                .iter()
                .flat_map(|&h| (0..head_dim).map(move |t| h * head_dim + t))
                .collect(),
        },
        Reduction::Fold { clusters } => Reduction::Fold {
            clusters: clusters
                .iter()
                .flat_map(|c| (0..head_dim).map(move |t| c.iter().map(|&h| h * head_dim + t).collect()))
                .collect(),
        },
    }
}

/// Head-level reducer lifted to features: `M = blkdiag(R_kv, …, R_kv) ⊗ I_{d_h}`.
pub fn lift_heads(
    decision: &SelectionDecision,
    n_heads: usize,
    head_dim: usize,
    groups: usize,
) -> Result<ReducerMap> {
    if decision.unit() != Unit::Head {
        return Err(GrailError::InvalidArgument("lift_heads needs a head-level decision".into()));
    }
    if decision.width() != n_heads {
        return Err(GrailError::InvalidArgument(format!(
            "decision covers {} heads, block has {n_heads}",
            decision.width()
        )));
    }
    let kv = per_group_reduction(decision, groups)?;
    let nkv = n_heads / groups;
    let r_kv = reducer_matrix(nkv, &kv);
    let r_blk = block_diag(&vec![&r_kv; groups])?;
    let m = kronecker(&r_blk, &Tensor::eye(head_dim))?;
    Ok(ReducerMap {
        m,
        features: expand_to_features(decision.reduction(), head_dim),
        head_meta: Some(HeadMeta {
            n_heads,
            head_dim,
            groups,
            per_group_k: decision.reduced_width() / groups,
            kv_reduction: kv,
        }),
    })
}

impl ReducerMap {
    /// The `H × K` matrix.
    pub fn m(&self) -> &Tensor {
        &self.m
    }

    pub fn kind(&self) -> ReductionKind {
        match self.features {
            Reduction::Prune { .. } => ReductionKind::Prune,
            Reduction::Fold { .. } => ReductionKind::Fold,
        }
    }

    pub fn width(&self) -> usize {
        self.m.rows()
    }

    pub fn reduced_width(&self) -> usize {
        self.m.cols()
    }

    pub fn features(&self) -> &Reduction {
        &self.features
    }

    pub fn head_meta(&self) -> Option<&HeadMeta> {
        self.head_meta.as_ref()
    }

    /// Kept feature indices when this is a pruning reducer.
    pub fn kept(&self) -> Option<&[usize]> {
        match &self.features {
            Reduction::Prune { kept } => Some(kept),
            Reduction::Fold { .. } => None,
        }
    }

    /// Membership matrix `U` with `U[h,k] = 1` iff unit `h` maps to column `k`.
    ///
    /// Used as the uncompensated consumer map: for pruning `U = M`, for
    /// folding every original unit is stood in for by its cluster mean.
    pub fn indicator(&self) -> Tensor {
        self.m.map(|v| if v != 0.0 { 1.0 } else { 0.0 })
    }

    /// `H·M` for an `N × H` activation matrix.
    pub fn reduce_activations(&self, x: &Tensor) -> Result<Tensor> {
        x.expect_rank(2, "reduce_activations")?;
        if x.cols() != self.width() {
            return Err(GrailError::shape("reduce_activations", x.shape(), self.m.shape()));
        }
        Ok(reduce_rows(&x.transpose(), &self.features)?.transpose())
    }
}

/// Applies a reduction along the first axis: row selection for pruning,
/// per-cluster means for folding (`Mᵀ·W`). Trailing axes are carried along.
pub fn reduce_rows(w: &Tensor, r: &Reduction) -> Result<Tensor> {
    match r {
        Reduction::Prune { kept } => w.select_rows(kept),
        Reduction::Fold { clusters } => {
            let n = w.row_len();
            let mut data = Vec::with_capacity(clusters.len() * n);
            for c in clusters {
                let inv = 1.0 / c.len() as f64;
                let mut acc = vec![0.0; n];
                for &h in c {
                    if h >= w.rows() {
                        return Err(GrailError::InvalidArgument(format!(
                            "cluster member {h} out of range for {} rows",
                            w.rows()
                        )));
                    }
                    for (a, v) in acc.iter_mut().zip(w.row(h)) {
                        *a += inv * v;
                    }
                }
                data.extend(acc);
            }
            let mut shape = w.shape().to_vec();
            shape[0] = clusters.len();
            Tensor::new(shape, data)
        }
    }
}

/// Producer-side weights after narrowing.
#[derive(Debug, Clone, PartialEq)]
pub enum NarrowedProducer {
    /// Dense / FFN rows or conv output channels, with bias.
    Channels { weight: Tensor, bias: Tensor },
    Heads {
        w_q: Tensor,
        w_k: Tensor,
        w_v: Tensor,
        n_heads: usize,
    },
}

/// Narrows the producer side of `block` according to `reducer`.
pub fn reduce_producer(block: &Block, reducer: &ReducerMap) -> Result<NarrowedProducer> {
    if reducer.width() != block.hidden_width() {
        return Err(GrailError::shape(
            "reduce_producer",
            &[block.hidden_width()],
            reducer.m.shape(),
        ));
    }
    let channels = |w: &Tensor, b: &Tensor| -> Result<NarrowedProducer> {
        Ok(NarrowedProducer::Channels {
            weight: reduce_rows(w, &reducer.features)?,
            bias: reduce_rows(b, &reducer.features)?,
        })
    };
    match block {
        Block::Dense(b) => channels(&b.w_producer, &b.b_producer),
        Block::Conv(b) => channels(&b.w_producer, &b.b_producer),
        Block::Ffn(b) => channels(&b.w_fc, &b.b_fc),
        Block::Attention(a) => reduce_attention_producer(a, reducer),
    }
}

fn reduce_attention_producer(a: &AttentionBlock, reducer: &ReducerMap) -> Result<NarrowedProducer> {
    let meta = reducer.head_meta.as_ref().ok_or_else(|| {
        GrailError::InvalidArgument("attention blocks need a head-lifted reducer".into())
    })?;
    if meta.n_heads != a.n_heads || meta.head_dim != a.head_dim || meta.groups != a.gqa_groups {
        return Err(GrailError::Gqa(format!(
            "reducer built for {}x{} heads in {} groups, block has {}x{} in {}",
            meta.n_heads, meta.head_dim, meta.groups, a.n_heads, a.head_dim, a.gqa_groups
        )));
    }
    let kv_features = expand_to_features(&meta.kv_reduction, a.head_dim);
    Ok(NarrowedProducer::Heads {
        w_q: reduce_rows(&a.w_q, &reducer.features)?,
        w_k: reduce_rows(&a.w_k, &kv_features)?,
        w_v: reduce_rows(&a.w_v, &kv_features)?,
        n_heads: meta.per_group_k * meta.groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_matrix;

    fn prune(width: usize, kept: Vec<usize>, unit: Unit) -> SelectionDecision {
        SelectionDecision::prune(width, kept, unit, vec![]).unwrap()
    }

    fn fold(width: usize, clusters: Vec<Vec<usize>>, unit: Unit) -> SelectionDecision {
        SelectionDecision::fold(width, clusters, unit, vec![]).unwrap()
    }

    #[test]
    fn selection_matrix() {
        let r = build_reducer(&prune(3, vec![0, 2], Unit::Channel), 3).unwrap();
        assert_eq!(r.m().data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let mtm = crate::linalg::matmul(&r.m().transpose(), r.m()).unwrap();
        assert_eq!(mtm, Tensor::eye(2));
    }

    #[test]
    fn fold_matrix() {
        let r = build_reducer(&fold(3, vec![vec![0, 1], vec![2]], Unit::Channel), 3).unwrap();
        assert_eq!(r.m().data(), &[0.5, 0.0, 0.5, 0.0, 0.0, 1.0]);
        // columns sum to one
        for k in 0..2 {
            let s: f64 = (0..3).map(|h| r.m().at(h, k)).sum();
            assert_eq!(s, 1.0);
        }
    }

    #[test]
    fn keep_all_is_identity() {
        let r = build_reducer(&SelectionDecision::identity(4, Unit::Channel), 4).unwrap();
        assert_eq!(r.m(), &Tensor::eye(4));
        assert!(build_reducer(&SelectionDecision::identity(4, Unit::Channel), 5).is_err());
    }

    #[test]
    fn producer_rows() {
        let w = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let p = Reduction::Prune { kept: vec![1] };
        assert_eq!(reduce_rows(&w, &p).unwrap().data(), &[3.0, 4.0]);
        let f = Reduction::Fold { clusters: vec![vec![0, 1]] };
        assert_eq!(reduce_rows(&w, &f).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn conv_kernel_slices() {
        let w = random_matrix(4 * 27, 1, 3).reshape(vec![4, 3, 3, 3]).unwrap();
        let r = reduce_rows(&w, &Reduction::Prune { kept: vec![1, 3] }).unwrap();
        assert_eq!(r.shape(), &[2, 3, 3, 3]);
        assert_eq!(r.row(0), w.row(1));
        assert_eq!(r.row(1), w.row(3));
    }

    #[test]
    fn fold_rows_equal_mt_w() {
        let w = random_matrix(6, 4, 8);
        let d = fold(6, vec![vec![0, 3, 5], vec![1], vec![2, 4]], Unit::Channel);
        let r = build_reducer(&d, 6).unwrap();
        let via_gemm = crate::linalg::matmul(&r.m().transpose(), &w).unwrap();
        assert!(reduce_rows(&w, r.features()).unwrap().max_abs_diff(&via_gemm) < 1e-15);
    }

    #[test]
    fn lift_single_head() {
        let r = lift_heads(&prune(2, vec![0], Unit::Head), 2, 2, 1).unwrap();
        assert_eq!(r.m().shape(), &[4, 2]);
        assert_eq!(r.kept(), Some(&[0usize, 1][..]));
        assert_eq!(r.m().data(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn lift_fold_unit_head_dim() {
        let r = lift_heads(&fold(2, vec![vec![0, 1]], Unit::Head), 2, 1, 1).unwrap();
        assert_eq!(r.m().data(), &[0.5, 0.5]);
    }

    #[test]
    fn lift_gqa_matches_index_oracle() {
        // 4 heads in 2 groups; slot 1 kept in each group
        let r = lift_heads(&prune(4, vec![1, 3], Unit::Head), 4, 2, 2).unwrap();
        let oracle = Tensor::from_fn2(8, 4, |f, c| {
            let (head, t) = (f / 2, f % 2);
            let (col_head, ct) = (c / 2, c % 2);
            let (g, j) = (head / 2, head % 2);
            let (cg, cj) = (col_head, 0);
            let slot_kept = [1usize];
            if g == cg && j == slot_kept[cj] && t == ct { 1.0 } else { 0.0 }
        });
        assert_eq!(r.m(), &oracle);
    }

    #[test]
    fn gqa_violations_rejected() {
        // 3 of 4 heads over 2 groups
        assert!(matches!(
            lift_heads(&prune(4, vec![0, 1, 2], Unit::Head), 4, 2, 2),
            Err(GrailError::Gqa(_))
        ));
        // different slot per group
        assert!(matches!(
            lift_heads(&prune(4, vec![0, 3], Unit::Head), 4, 2, 2),
            Err(GrailError::Gqa(_))
        ));
        assert!(lift_heads(&prune(4, vec![0, 2], Unit::Head), 4, 2, 2).is_ok());
        // channel-level decision cannot be lifted
        assert!(lift_heads(&prune(4, vec![0, 2], Unit::Channel), 4, 2, 2).is_err());
    }

    #[test]
    fn indicator_for_fold() {
        let r = build_reducer(&fold(3, vec![vec![0, 2], vec![1]], Unit::Channel), 3).unwrap();
        assert_eq!(r.indicator().data(), &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn reduce_activations_matches_product() {
        let x = random_matrix(10, 5, 2);
        let d = fold(5, vec![vec![0, 4], vec![1, 2], vec![3]], Unit::Channel);
        let r = build_reducer(&d, 5).unwrap();
        let direct = crate::linalg::matmul(&x, r.m()).unwrap();
        assert!(r.reduce_activations(&x).unwrap().max_abs_diff(&direct) < 1e-15);
    }
}
