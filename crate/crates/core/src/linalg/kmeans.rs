use crate::error::{GrailError, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of a k-means run. Labels are canonical: cluster ids are numbered
/// by the first row that belongs to them.
#[derive(Debug, Clone)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Tensor,
    /// Objective after every Lloyd iteration.
    pub history: Vec<f64>,
}

impl KMeans {
    pub fn objective(&self) -> f64 {
        *self.history.last().expect("at least one iteration")
    }

    pub fn clusters(&self, k: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); k];
        for (i, &c) in self.assignments.iter().enumerate() {
            out[c].push(i);
        }
        out
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sum of squared distances from each row to the mean of its cluster.
pub fn kmeans_objective(rows: &Tensor, assignments: &[usize], k: usize) -> f64 {
    let centroids = centroids_of(rows, assignments, k);
    (0..rows.rows())
        .map(|i| sq_dist(rows.row(i), centroids.row(assignments[i])))
        .sum()
}

fn centroids_of(rows: &Tensor, assignments: &[usize], k: usize) -> Tensor {
    let d = rows.row_len();
    let mut sums = Tensor::zeros(&[k, d]);
    let mut counts = vec![0usize; k];
    for (i, &c) in assignments.iter().enumerate() {
        counts[c] += 1;
        for (s, v) in sums.row_mut(c).iter_mut().zip(rows.row(i)) {
            *s += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            let inv = 1.0 / n as f64;
            sums.row_mut(c).iter_mut().for_each(|v| *v *= inv);
        }
    }
    sums
}

/// Lloyd's algorithm from a k-means++ seeding.
///
/// Empty clusters are re-seeded with the point farthest from its centroid
/// (taken from a cluster with at least two members), so every cluster ends
/// non-empty. Deterministic for fixed `seed`.
pub fn kmeans(rows: &Tensor, k: usize, seed: u64, max_iter: usize) -> Result<KMeans> {
    rows.expect_rank(2, "kmeans")?;
    let n = rows.rows();
    if k == 0 || k > n {
        return Err(GrailError::InvalidArgument(format!(
            "k-means needs 1 <= k <= rows, got k = {k} for {n} rows"
        )));
    }
    if max_iter == 0 {
        return Err(GrailError::InvalidArgument("max_iter must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(rows, k, &mut rng);
    let mut assignments = vec![usize::MAX; n];
    let mut history = Vec::new();

    for _ in 0..max_iter {
        let mut changed = false;
        for i in 0..n {
            let best = nearest(rows.row(i), &centroids);
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
        }
        if !changed && !history.is_empty() {
            break;
        }
        reseed_empty(rows, &mut assignments, k, &centroids);
        centroids = centroids_of(rows, &assignments, k);
        history.push(
            (0..n)
                .map(|i| sq_dist(rows.row(i), centroids.row(assignments[i])))
                .sum(),
        );
    }

    let (assignments, centroids) = canonicalize(&assignments, &centroids, k);
    Ok(KMeans {
        assignments,
        centroids,
        history,
    })
}

/// Runs [`kmeans`] from `restarts` seedings derived from `seed` and keeps the
/// lowest objective (earliest run on ties).
pub fn kmeans_best_of(rows: &Tensor, k: usize, seed: u64, max_iter: usize, restarts: usize) -> Result<KMeans> {
    let mut best = kmeans(rows, k, seed, max_iter)?;
    for r in 1..restarts as u64 {
        let run = kmeans(rows, k, seed.wrapping_add(r.wrapping_mul(0x9E37_79B9_7F4A_7C15)), max_iter)?;
        if run.objective() < best.objective() {
            best = run;
        }
    }
    Ok(best)
}

fn plus_plus_init(rows: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let n = rows.rows();
    let d = rows.row_len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = (0..n)
        .map(|i| sq_dist(rows.row(i), rows.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // all remaining points coincide with a center
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min(sq_dist(rows.row(i), rows.row(next)));
        }
    }
    let mut c = Tensor::zeros(&[k, d]);
    for (j, &i) in chosen.iter().enumerate() {
        c.row_mut(j).copy_from_slice(rows.row(i));
    }
    c
}

fn nearest(x: &[f64], centroids: &Tensor) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for c in 0..centroids.rows() {
        let d = sq_dist(x, centroids.row(c));
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

fn reseed_empty(rows: &Tensor, assignments: &mut [usize], k: usize, centroids: &Tensor) {
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignments.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut far = None;
        let mut far_d = -1.0;
        for (i, &a) in assignments.iter().enumerate() {
            if counts[a] < 2 {
                continue;
            }
            let d = sq_dist(rows.row(i), centroids.row(a));
            if d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        assignments[far.expect("some cluster has two members when k <= n")] = empty;
    }
}

fn canonicalize(assignments: &[usize], centroids: &Tensor, k: usize) -> (Vec<usize>, Tensor) {
    let mut map = vec![usize::MAX; k];
    let mut next = 0;
    for &a in assignments {
        if map[a] == usize::MAX {
            map[a] = next;
            next += 1;
        }
    }
    let relabeled: Vec<usize> = assignments.iter().map(|&a| map[a]).collect();
    let mut c = Tensor::zeros(centroids.shape());
    for old in 0..k {
        c.row_mut(map[old]).copy_from_slice(centroids.row(old));
    }
    (relabeled, c)
}
