use super::AttentionBlock;
use crate::error::Result;
use crate::linalg::matmul_a_bt;
use crate::tensor::Tensor;

/// Concatenated per-head outputs for an `N×T×D` batch, returned as
/// `(N·T) × (n_heads·head_dim)`: exactly the tensor entering `w_o`.
///
/// Query head `h` reads key/value head `h mod n_kv`, so the heads form
/// `gqa_groups` contiguous groups of `n_kv` heads each.
pub fn attention_heads(block: &AttentionBlock, x: &Tensor) -> Result<Tensor> {
    let (n, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let rows = x.clone().reshape(vec![n * t, d])?;
    let q = matmul_a_bt(&rows, &block.w_q)?;
    let k = matmul_a_bt(&rows, &block.w_k)?;
    let v = matmul_a_bt(&rows, &block.w_v)?;

    let dh = block.head_dim;
    let nh = block.n_heads;
    let nkv = block.kv_heads();
    let width = nh * dh;
    let kv_width = nkv * dh;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; n * t * width];
    let mut scores = vec![0.0; t];

    for seq in 0..n {
        let base = seq * t;
        for h in 0..nh {
            let kvh = h % nkv;
            for ti in 0..t {
                let qrow = &q.data()[(base + ti) * width + h * dh..][..dh];
                let visible = if block.causal { ti + 1 } else { t };
                let mut max = f64::NEG_INFINITY;
                for (s, score) in scores.iter_mut().enumerate().take(visible) {
                    let krow = &k.data()[(base + s) * kv_width + kvh * dh..][..dh];
                    let dot: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
                    *score = dot * scale;
                    max = max.max(*score);
                }
                let mut z = 0.0;
                for score in scores.iter_mut().take(visible) {
                    *score = (*score - max).exp();
                    z += *score;
                }
                let orow = &mut out[(base + ti) * width + h * dh..][..dh];
                for (s, &p) in scores.iter().enumerate().take(visible) {
                    let vrow = &v.data()[(base + s) * kv_width + kvh * dh..][..dh];
                    let w = p / z;
                    for (o, vv) in orow.iter_mut().zip(vrow) {
                        *o += w * vv;
                    }
                }
            }
        }
    }
    Tensor::new(vec![n * t, width], out)
}
