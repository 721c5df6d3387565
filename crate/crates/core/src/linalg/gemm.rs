use crate::error::{GrailError, Result};
use crate::tensor::Tensor;

// Rows per parallel task. Each output element is still summed over k in
// ascending order, so results do not depend on the thread count.
#[cfg(feature = "parallel")]
const PAR_ROWS: usize = 16;
#[cfg(feature = "parallel")]
const PAR_MIN_WORK: usize = 1 << 16;

/// `a · b` for row-major matrices.
///
/// Every output element accumulates `a[i,k]·b[k,j]` for `k = 0..K` in order,
/// which is the same summation as the textbook triple loop.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_rank(2, "matmul")?;
    b.expect_rank(2, "matmul")?;
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(GrailError::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    let kernel = |i: usize, row: &mut [f64]| {
        let arow = &ad[i * k..(i + 1) * k];
        for (p, &aik) in arow.iter().enumerate() {
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    };
    run_rows(&mut out, n, m * n * k, kernel);
    Tensor::new(vec![m, n], out)
}

/// `a · bᵀ`; the workhorse for `X · Wᵀ` layer application.
pub fn matmul_a_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_rank(2, "matmul_a_bt")?;
    b.expect_rank(2, "matmul_a_bt")?;
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    if k != k2 {
        return Err(GrailError::shape("matmul_a_bt", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    let kernel = |i: usize, row: &mut [f64]| {
        let arow = &ad[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &bd[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *o = acc;
        }
    };
    run_rows(&mut out, n, m * n * k, kernel);
    Tensor::new(vec![m, n], out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_at_b(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_rank(2, "matmul_at_b")?;
    b.expect_rank(2, "matmul_at_b")?;
    if a.rows() != b.rows() {
        return Err(GrailError::shape("matmul_at_b", a.shape(), b.shape()));
    }
    matmul(&a.transpose(), b)
}

fn run_rows<F>(out: &mut [f64], n: usize, work: usize, kernel: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    #[cfg(feature = "parallel")]
    if work >= PAR_MIN_WORK {
        use rayon::prelude::*;
        out.par_chunks_mut(n * PAR_ROWS)
            .enumerate()
            .for_each(|(c, chunk)| {
                for (r, row) in chunk.chunks_mut(n).enumerate() {
                    kernel(c * PAR_ROWS + r, row);
                }
            });
        return;
    }
    let _ = work;
    for (i, row) in out.chunks_mut(n).enumerate() {
        kernel(i, row);
    }
}
