//! Consumer-input statistics gathered on the calibration batch.

mod closed_loop;
pub mod gram_file;

pub use closed_loop::{closed_loop_pass, CalibrationStep, ClosedLoop};
pub use gram_file::{decode_gram, encode_gram, load_gram, save_gram};

use crate::error::{GrailError, Result};
use crate::model::BlockGraph;
use crate::tensor::Tensor;

/// Rows per accumulation chunk. Chunk partial sums are added in chunk order.
pub const CHUNK_ROWS: usize = 256;

/// Where statistics were taken: the consumer input of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tap {
    pub block: usize,
}

/// Uncentered second moment `G = Σ x xᵀ` of consumer-input rows.
#[derive(Debug, Clone, PartialEq)]
pub struct GramStats {
    g: Tensor,
    n_samples: u64,
    tap: Option<Tap>,
}

impl GramStats {
    /// Accumulates `XᵀX` for an `N × H` activation matrix.
    pub fn from_rows(x: &Tensor, tap: Option<Tap>) -> Result<Self> {
        x.expect_rank(2, "gram accumulation")?;
        let h = x.cols();
        let chunks: Vec<&[f64]> = x.data().chunks(CHUNK_ROWS * h).collect();

        #[cfg(feature = "parallel")]
        let partials: Vec<Vec<f64>> = {
            use rayon::prelude::*;
            chunks.par_iter().map(|c| upper_gram(c, h)).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let partials: Vec<Vec<f64>> = chunks.iter().map(|c| upper_gram(c, h)).collect();

        let mut g = vec![0.0; h * h];
        for p in &partials {
            for (acc, v) in g.iter_mut().zip(p) {
                *acc += v;
            }
        }
        mirror_upper(&mut g, h);
        Ok(Self {
            g: Tensor::new(vec![h, h], g)?,
            n_samples: x.rows() as u64,
            tap,
        })
    }

    /// Statistics with no samples: the identity element of [`merge_gram`].
    pub fn empty(width: usize, tap: Option<Tap>) -> Self {
        Self {
            g: Tensor::zeros(&[width, width]),
            n_samples: 0,
            tap,
        }
    }

    pub fn from_parts(g: Tensor, n_samples: u64, tap: Option<Tap>) -> Result<Self> {
        g.expect_rank(2, "gram")?;
        if g.rows() != g.cols() {
            return Err(GrailError::InvalidTensor(format!(
                "gram must be square, got {:?}",
                g.shape()
            )));
        }
        Ok(Self { g, n_samples, tap })
    }

    pub fn g(&self) -> &Tensor {
        &self.g
    }

    pub fn n_samples(&self) -> u64 {
        self.n_samples
    }

    pub fn tap(&self) -> Option<Tap> {
        self.tap
    }

    pub fn width(&self) -> usize {
        self.g.rows()
    }

    /// Largest asymmetry relative to `max|g|`.
    pub fn asymmetry(&self) -> f64 {
        let n = self.width();
        let scale = self.g.max_abs().max(f64::MIN_POSITIVE);
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((self.g.at(i, j) - self.g.at(j, i)).abs());
            }
        }
        worst / scale
    }
}

fn upper_gram(rows: &[f64], h: usize) -> Vec<f64> {
    let mut g = vec![0.0; h * h];
    for x in rows.chunks_exact(h) {
        for i in 0..h {
            let xi = x[i];
            let gi = &mut g[i * h + i..(i + 1) * h];
            for (acc, xj) in gi.iter_mut().zip(&x[i..]) {
                *acc += xi * xj;
            }
        }
    }
    g
}

fn mirror_upper(g: &mut [f64], h: usize) {
    for i in 0..h {
        for j in (i + 1)..h {
            g[j * h + i] = g[i * h + j];
        }
    }
}

/// Runs the graph and accumulates the Gram matrix at block `block`'s consumer input.
pub fn accumulate_gram(graph: &BlockGraph, batch: &Tensor, block: usize) -> Result<GramStats> {
    let f = graph.forward(batch, Some(block))?;
    let x = f.captured.expect("capture requested");
    GramStats::from_rows(&x, Some(Tap { block }))
}

/// Sums two sets of statistics taken at the same tap.
pub fn merge_gram(a: &GramStats, b: &GramStats) -> Result<GramStats> {
    if a.width() != b.width() {
        return Err(GrailError::shape("merge_gram", a.g.shape(), b.g.shape()));
    }
    if a.tap != b.tap {
        return Err(GrailError::InvalidArgument(format!(
            "cannot merge statistics from taps {:?} and {:?}",
            a.tap, b.tap
        )));
    }
    let data = a.g.data().iter().zip(b.g.data()).map(|(x, y)| x + y).collect();
    Ok(GramStats {
        g: Tensor::new(a.g.shape().to_vec(), data)?,
        n_samples: a.n_samples + b.n_samples,
        tap: a.tap,
    })
}

/// L2 norm of every column of an `N × C` matrix.
pub fn column_norms(rows: &Tensor) -> Tensor {
    let c = rows.cols();
    let mut acc = vec![0.0; c];
    for r in rows.data().chunks_exact(c) {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v * v;
        }
    }
    Tensor::vector(acc.into_iter().map(f64::sqrt).collect())
}

/// Per-input-feature L2 norms of the producer input of block `block`.
pub fn input_feature_norms(graph: &BlockGraph, batch: &Tensor, block: usize) -> Result<Tensor> {
    let b = graph.block(block)?;
    let x = graph.forward_until(batch, block)?;
    Ok(column_norms(&b.producer_input_rows(&x)?))
}
