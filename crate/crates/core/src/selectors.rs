//! Which hidden units or heads survive.
//!
//! Every selector returns the same [`SelectionDecision`], so reducers and
//! compensation never need to know how units were chosen.

use crate::calibration::GramStats;
use crate::error::{GrailError, Result};
use crate::linalg::kmeans_best_of;
use crate::model::AttentionBlock;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Lloyd iteration cap for folding.
pub const FOLD_MAX_ITER: usize = 100;
/// Independent k-means++ seedings tried by the fold selectors.
pub const FOLD_RESTARTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Channel,
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReductionKind {
    Prune,
    Fold,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Reduction {
    /// Surviving indices, strictly increasing.
    Prune { kept: Vec<usize> },
    /// Disjoint, non-empty clusters covering every unit.
    Fold { clusters: Vec<Vec<usize>> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionDecision {
    reduction: Reduction,
    unit: Unit,
    width: usize,
    scores: Vec<f64>,
}

impl SelectionDecision {
    pub fn prune(width: usize, kept: Vec<usize>, unit: Unit, scores: Vec<f64>) -> Result<Self> {
        if kept.is_empty() {
            return Err(GrailError::InvalidArgument("prune decision keeps nothing".into()));
        }
        if kept.windows(2).any(|w| w[0] >= w[1]) {
            return Err(GrailError::InvalidArgument(format!(
                "kept indices must be strictly increasing: {kept:?}"
            )));
        }
        if let Some(&last) = kept.last() {
            if last >= width {
                return Err(GrailError::InvalidArgument(format!(
                    "kept index {last} out of range for width {width}"
                )));
            }
        }
        Ok(Self {
            reduction: Reduction::Prune { kept },
            unit,
            width,
            scores,
        })
    }

    pub fn fold(width: usize, clusters: Vec<Vec<usize>>, unit: Unit, scores: Vec<f64>) -> Result<Self> {
        if clusters.is_empty() {
            return Err(GrailError::InvalidArgument("fold decision has no clusters".into()));
        }
        let mut seen = vec![false; width];
        for c in &clusters {
            if c.is_empty() {
                return Err(GrailError::InvalidArgument("empty fold cluster".into()));
            }
            for &u in c {
                if u >= width {
                    return Err(GrailError::InvalidArgument(format!(
                        "cluster member {u} out of range for width {width}"
                    )));
                }
                if std::mem::replace(&mut seen[u], true) {
                    return Err(GrailError::InvalidArgument(format!(
                        "unit {u} appears in two clusters"
                    )));
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(GrailError::InvalidArgument(format!(
                "unit {missing} belongs to no cluster"
            )));
        }
        Ok(Self {
            reduction: Reduction::Fold { clusters },
            unit,
            width,
            scores,
        })
    }

    /// Keep-all pruning, the identity reduction.
    pub fn identity(width: usize, unit: Unit) -> Self {
        Self::prune(width, (0..width).collect(), unit, vec![0.0; width]).expect("valid identity")
    }

    pub fn reduction(&self) -> &Reduction {
        &self.reduction
    }

    pub fn kind(&self) -> ReductionKind {
        match self.reduction {
            Reduction::Prune { .. } => ReductionKind::Prune,
            Reduction::Fold { .. } => ReductionKind::Fold,
        }
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    /// Number of units `H` before reduction.
    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of units `K` after reduction.
    pub fn reduced_width(&self) -> usize {
        match &self.reduction {
            Reduction::Prune { kept } => kept.len(),
            Reduction::Fold { clusters } => clusters.len(),
        }
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    L2,
}

/// Indices of the `k` largest scores, ties to the lower index, returned sorted.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = order[..k].to_vec();
    kept.sort_unstable();
    kept
}

fn check_k(k: usize, width: usize, what: &str) -> Result<()> {
    if k == 0 || k > width {
        return Err(GrailError::InvalidArgument(format!(
            "target {what} count {k} outside 1..={width}"
        )));
    }
    Ok(())
}

fn row_view(w: &Tensor) -> Result<Tensor> {
    if w.rank() < 2 {
        return Err(GrailError::InvalidTensor(
            "producer weight needs an output axis and at least one input axis".into(),
        ));
    }
    w.clone().reshape(vec![w.rows(), w.row_len()])
}

/// Keeps the `k` producer rows with the largest L1 or L2 norm. Conv kernels
/// are scored over their flattened `C×kH×kW` slice.
pub fn select_magnitude(w_producer: &Tensor, k: usize, norm: Norm) -> Result<SelectionDecision> {
    let w = row_view(w_producer)?;
    check_k(k, w.rows(), "channel")?;
    let scores: Vec<f64> = (0..w.rows())
        .map(|h| match norm {
            Norm::L1 => w.row(h).iter().map(|v| v.abs()).sum(),
            Norm::L2 => w.row(h).iter().map(|v| v * v).sum::<f64>().sqrt(),
        })
        .collect();
    SelectionDecision::prune(w.rows(), top_k(&scores, k), Unit::Channel, scores)
}

/// Structured Wanda: unit score `Σ_c |W[h,c]|·‖x_c‖`, with `input_norms` the
/// per-input-feature L2 norms over the calibration batch. For conv kernels
/// each input channel's norm applies to all of its kernel taps.
pub fn select_wanda(w_producer: &Tensor, input_norms: &Tensor, k: usize) -> Result<SelectionDecision> {
    let c = *w_producer.shape().get(1).ok_or_else(|| {
        GrailError::InvalidTensor("producer weight needs an input axis".into())
    })?;
    if input_norms.rank() != 1 || input_norms.len() != c {
        return Err(GrailError::shape("select_wanda", w_producer.shape(), input_norms.shape()));
    }
    let w = row_view(w_producer)?;
    check_k(k, w.rows(), "channel")?;
    let taps = w.row_len() / c;
    let norms = input_norms.data();
    let scores: Vec<f64> = (0..w.rows())
        .map(|h| {
            w.row(h)
                .iter()
                .enumerate()
                .map(|(j, v)| v.abs() * norms[j / taps])
                .sum()
        })
        .collect();
    SelectionDecision::prune(w.rows(), top_k(&scores, k), Unit::Channel, scores)
}

/// Folding: k-means over producer rows, clusters ordered by their lowest member.
pub fn select_fold(w_producer: &Tensor, k: usize, seed: u64) -> Result<SelectionDecision> {
    let w = row_view(w_producer)?;
    check_k(k, w.rows(), "cluster")?;
    let km = kmeans_best_of(&w, k, seed, FOLD_MAX_ITER, FOLD_RESTARTS)?;
    let scores = (0..w.rows())
        .map(|h| w.row(h).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    SelectionDecision::fold(w.rows(), km.clusters(k), Unit::Channel, scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMethod {
    L2,
    Wanda,
    Fold,
}

/// Activation energy of each head: the trace of its diagonal Gram block.
pub fn head_energies(gram: &Tensor, n_heads: usize, head_dim: usize) -> Vec<f64> {
    (0..n_heads)
        .map(|h| (0..head_dim).map(|t| gram.at(h * head_dim + t, h * head_dim + t)).sum())
        .collect()
}

/// Head-level selection. Under grouped-query attention the same reduction
/// is applied to every group: `k_heads` must be a multiple of the group count
/// and key/value slot `j` is kept (or clustered) jointly across groups.
pub fn select_heads(
    block: &AttentionBlock,
    gram: &GramStats,
    k_heads: usize,
    method: HeadMethod,
    seed: u64,
) -> Result<SelectionDecision> {
    let (nh, dh, groups) = (block.n_heads, block.head_dim, block.gqa_groups);
    check_k(k_heads, nh, "head")?;
    if !k_heads.is_multiple_of(groups) {
        return Err(GrailError::Gqa(format!(
            "{k_heads} heads cannot be split evenly over {groups} groups"
        )));
    }
    if gram.width() != nh * dh {
        return Err(GrailError::shape("select_heads", gram.g().shape(), &[nh * dh, nh * dh]));
    }
    let nkv = nh / groups;
    let k_kv = k_heads / groups;
    let energies = head_energies(gram.g(), nh, dh);
    match method {
        HeadMethod::L2 | HeadMethod::Wanda => {
            let slot_scores: Vec<f64> = (0..nkv)
                .map(|j| (0..groups).map(|g| energies[g * nkv + j]).sum())
                .collect();
            let slots = top_k(&slot_scores, k_kv);
            let kept = (0..groups)
                .flat_map(|g| slots.iter().map(move |&j| g * nkv + j))
                .collect();
            SelectionDecision::prune(nh, kept, Unit::Head, energies)
        }
        HeadMethod::Fold => {
            let d_out = block.w_o.rows();
            let features = Tensor::from_fn2(nkv, groups * d_out * dh, |j, f| {
                let g = f / (d_out * dh);
                let r = (f % (d_out * dh)) / dh;
                let t = f % dh;
                block.w_o.at(r, (g * nkv + j) * dh + t)
            });
            let km = kmeans_best_of(&features, k_kv, seed, FOLD_MAX_ITER, FOLD_RESTARTS)?;
            let slot_clusters = km.clusters(k_kv);
            let clusters = (0..groups)
                .flat_map(|g| {
                    slot_clusters
                        .iter()
                        .map(move |c| c.iter().map(|&j| g * nkv + j).collect::<Vec<_>>())
                })
                .collect();
            SelectionDecision::fold(nh, clusters, Unit::Head, energies)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_matrix;

    fn kept(d: &SelectionDecision) -> Vec<usize> {
        match d.reduction() {
            Reduction::Prune { kept } => kept.clone(),
            Reduction::Fold { .. } => panic!("expected prune"),
        }
    }

    fn clusters(d: &SelectionDecision) -> Vec<Vec<usize>> {
        match d.reduction() {
            Reduction::Fold { clusters } => clusters.clone(),
            Reduction::Prune { .. } => panic!("expected fold"),
        }
    }

    #[test]
    fn magnitude_l1_hand_scores() {
        let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 3.0], vec![2.0, 2.0]]).unwrap();
        let d = select_magnitude(&w, 2, Norm::L1).unwrap();
        assert_eq!(kept(&d), vec![1, 2]);
        assert_eq!(d.scores(), &[1.0, 3.0, 4.0]);
    }

    #[test]
    fn magnitude_tie_goes_to_lower_index() {
        let w = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 3.0]]).unwrap();
        assert_eq!(kept(&select_magnitude(&w, 1, Norm::L2).unwrap()), vec![0]);
    }

    #[test]
    fn magnitude_matches_full_sort() {
        let w = random_matrix(32, 16, 5);
        let d = select_magnitude(&w, 8, Norm::L2).unwrap();
        let mut scored: Vec<(f64, usize)> = (0..32)
            .map(|h| ((0..16).map(|c| w.at(h, c).powi(2)).sum::<f64>().sqrt(), h))
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut want: Vec<usize> = scored[..8].iter().map(|s| s.1).collect();
        want.sort();
        assert_eq!(kept(&d), want);
    }

    #[test]
    fn k_out_of_range() {
        let w = random_matrix(4, 2, 1);
        assert!(select_magnitude(&w, 0, Norm::L1).is_err());
        assert!(select_magnitude(&w, 5, Norm::L1).is_err());
        assert!(select_fold(&w, 5, 0).is_err());
    }

    #[test]
    fn wanda_unit_norms_is_l1() {
        let w = random_matrix(12, 6, 8);
        let ones = Tensor::filled(&[6], 1.0);
        assert_eq!(
            kept(&select_wanda(&w, &ones, 5).unwrap()),
            kept(&select_magnitude(&w, 5, Norm::L1).unwrap())
        );
    }

    #[test]
    fn wanda_tie_break() {
        let w = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let norms = Tensor::vector(vec![10.0, 0.0]);
        assert_eq!(kept(&select_wanda(&w, &norms, 1).unwrap()), vec![0]);
    }

    #[test]
    fn wanda_matches_score_table() {
        let w = random_matrix(10, 4, 3);
        let norms = random_matrix(4, 1, 4).map(f64::abs).reshape(vec![4]).unwrap();
        let d = select_wanda(&w, &norms, 3).unwrap();
        for h in 0..10 {
            let mut s = 0.0;
            for c in 0..4 {
                s += w.at(h, c).abs() * norms.data()[c];
            }
            assert!((d.scores()[h] - s).abs() < 1e-12);
        }
        assert!(select_wanda(&w, &Tensor::vector(vec![1.0; 3]), 3).is_err());
    }

    #[test]
    fn wanda_conv_broadcasts_channel_norm() {
        let w = random_matrix(4 * 2 * 3 * 3, 1, 6).reshape(vec![4, 2, 3, 3]).unwrap();
        let norms = Tensor::vector(vec![1.0, 0.0]);
        let d = select_wanda(&w, &norms, 2).unwrap();
        for h in 0..4 {
            let s: f64 = w.row(h)[..9].iter().map(|v| v.abs()).sum();
            assert!((d.scores()[h] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn fold_identical_rows_and_groups() {
        let same = Tensor::filled(&[5, 3], 1.5);
        assert_eq!(clusters(&select_fold(&same, 1, 0).unwrap()), vec![vec![0, 1, 2, 3, 4]]);
        let w = Tensor::from_rows(&[
            vec![5.0, 5.0],
            vec![-5.0, -5.0],
            vec![5.1, 5.0],
            vec![-5.0, -5.2],
        ])
        .unwrap();
        assert_eq!(clusters(&select_fold(&w, 2, 3).unwrap()), vec![vec![0, 2], vec![1, 3]]);
    }

    #[test]
    fn fold_matches_direct_kmeans() {
        let w = random_matrix(16, 8, 12);
        let d = select_fold(&w, 4, 99).unwrap();
        let km = kmeans_best_of(&w, 4, 99, FOLD_MAX_ITER, FOLD_RESTARTS).unwrap();
        assert_eq!(clusters(&d), km.clusters(4));
    }

    #[test]
    fn decision_invariants_enforced() {
        assert!(SelectionDecision::prune(3, vec![1, 1], Unit::Channel, vec![]).is_err());
        assert!(SelectionDecision::prune(3, vec![3], Unit::Channel, vec![]).is_err());
        assert!(SelectionDecision::fold(3, vec![vec![0], vec![0, 1, 2]], Unit::Channel, vec![]).is_err());
        assert!(SelectionDecision::fold(3, vec![vec![0], vec![2]], Unit::Channel, vec![]).is_err());
        assert!(SelectionDecision::fold(3, vec![vec![0], vec![], vec![1, 2]], Unit::Channel, vec![]).is_err());
        assert!(SelectionDecision::fold(3, vec![vec![2, 0], vec![1]], Unit::Channel, vec![]).is_ok());
    }
}
