use crate::error::{GrailError, Result};
use crate::tensor::Tensor;

/// Kronecker product: block `(i, j)` of the result equals `a[i,j] · b`.
pub fn kronecker(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_rank(2, "kronecker")?;
    b.expect_rank(2, "kronecker")?;
    let (br, bc) = (b.rows(), b.cols());
    Ok(Tensor::from_fn2(a.rows() * br, a.cols() * bc, |r, c| {
        a.at(r / br, c / bc) * b.at(r % br, c % bc)
    }))
}

/// Block-diagonal matrix built from `blocks` in order.
pub fn block_diag(blocks: &[&Tensor]) -> Result<Tensor> {
    if blocks.is_empty() {
        return Err(GrailError::InvalidArgument("block_diag of nothing".into()));
    }
    for b in blocks {
        b.expect_rank(2, "block_diag")?;
    }
    let rows: usize = blocks.iter().map(|b| b.rows()).sum();
    let cols: usize = blocks.iter().map(|b| b.cols()).sum();
    let mut out = Tensor::zeros(&[rows, cols]);
    let (mut r0, mut c0) = (0, 0);
    for b in blocks {
        for i in 0..b.rows() {
            for j in 0..b.cols() {
                out.set(r0 + i, c0 + j, b.at(i, j));
            }
        }
        r0 += b.rows();
        c0 += b.cols();
    }
    Ok(out)
}
