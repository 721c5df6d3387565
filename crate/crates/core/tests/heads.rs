mod common;

use common::*;
use grail_core::calibration::GramStats;
use grail_core::selectors::{head_energies, select_heads, HeadMethod, Reduction, SelectionDecision};
use grail_core::Tensor;

fn kept(d: &SelectionDecision) -> Vec<usize> {
    match d.reduction() {
        Reduction::Prune { kept } => kept.clone(),
        Reduction::Fold { .. } => panic!("expected prune"),
    }
}

fn stats(g: Tensor) -> GramStats {
    GramStats::from_parts(g, 100, None).unwrap()
}

#[test]
fn equal_energies_keep_lowest_heads() {
    let a = attention_block(8, 4, 2, 1, false, 1);
    let g = stats(Tensor::eye(8));
    for method in [HeadMethod::L2, HeadMethod::Wanda] {
        for k in 1..=4 {
            let d = select_heads(&a, &g, k, method, 0).unwrap();
            assert_eq!(kept(&d), (0..k).collect::<Vec<_>>());
        }
    }
}

#[test]
fn loud_head_is_always_kept() {
    let a = attention_block(8, 4, 3, 1, false, 2);
    let x = rand_mat(200, 12, 3);
    // Head 2 carries ten times the activation scale of the others.
    let x = Tensor::from_fn2(200, 12, |i, j| if j / 3 == 2 { 10.0 * x.at(i, j) } else { x.at(i, j) });
    let g = GramStats::from_rows(&x, None).unwrap();
    for k in 1..=4 {
        assert!(kept(&select_heads(&a, &g, k, HeadMethod::L2, 0).unwrap()).contains(&2));
    }
}

#[test]
fn selection_is_best_subset_by_energy() {
    let a = attention_block(8, 4, 2, 1, false, 4);
    for seed in 0..10 {
        let x = Tensor::from_fn2(64, 8, {
            let base = rand_mat(64, 8, 100 + seed);
            move |i, j| base.at(i, j) * (1.0 + (j / 2) as f64 * ((seed + j as u64) % 3) as f64)
        });
        let g = GramStats::from_rows(&x, None).unwrap();
        let energy: Vec<f64> = (0..4)
            .map(|h| (0..2).map(|t| (0..64).map(|i| x.at(i, 2 * h + t).powi(2)).sum::<f64>()).sum())
            .collect();
        let e = head_energies(g.g(), 4, 2);
        for h in 0..4 {
            assert!((e[h] - energy[h]).abs() <= 1e-9 * energy[h]);
        }
        let mut best = (f64::MIN, vec![]);
        for i in 0..4 {
            for j in (i + 1)..4 {
                let s = energy[i] + energy[j];
                if s > best.0 {
                    best = (s, vec![i, j]);
                }
            }
        }
        assert_eq!(kept(&select_heads(&a, &g, 2, HeadMethod::L2, 0).unwrap()), best.1, "seed {seed}");
    }
}

#[test]
fn grouped_selection_keeps_same_slot_in_every_group() {
    let a = attention_block(8, 6, 2, 2, false, 5);
    let g = GramStats::from_rows(&rand_mat(50, 12, 6), None).unwrap();
    let d = select_heads(&a, &g, 4, HeadMethod::L2, 0).unwrap();
    let k = kept(&d);
    assert_eq!(k.len(), 4);
    assert_eq!(k[2] - k[0], 3);
    assert_eq!(k[3] - k[1], 3);
    assert!(select_heads(&a, &g, 3, HeadMethod::L2, 0).is_err());
}

#[test]
fn head_fold_clusters_whole_heads() {
    let a = attention_block(8, 4, 2, 1, false, 7);
    let g = GramStats::from_rows(&rand_mat(50, 8, 8), None).unwrap();
    let d = select_heads(&a, &g, 2, HeadMethod::Fold, 3).unwrap();
    let Reduction::Fold { clusters } = d.reduction() else { panic!() };
    let mut all: Vec<usize> = clusters.iter().flatten().copied().collect();
    all.sort_unstable();
    assert_eq!(all, vec![0, 1, 2, 3]);
    assert_eq!(clusters.len(), 2);
}
