use super::Block;
use crate::error::{GrailError, Result};
use crate::tensor::Tensor;

/// Ordered chain of blocks with shape-checked wiring.
///
/// `input_shape` is the per-sample shape; a batch carries at least one extra
/// leading axis in front of it.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGraph {
    blocks: Vec<Block>,
    input_shape: Vec<usize>,
}

/// Result of a forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub output: Tensor,
    /// Consumer-input activations of the captured block, `(N_eff × H)`.
    pub captured: Option<Tensor>,
    /// The batch as it entered the captured block.
    pub block_input: Option<Tensor>,
}

impl BlockGraph {
    pub fn new(blocks: Vec<Block>, input_shape: Vec<usize>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(GrailError::InvalidArgument("graph has no blocks".into()));
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(GrailError::InvalidArgument(format!(
                "invalid input shape {input_shape:?}"
            )));
        }
        let g = Self {
            blocks,
            input_shape,
        };
        g.check_wiring()?;
        Ok(g)
    }

    fn check_wiring(&self) -> Result<()> {
        let mut shape = self.input_shape.clone();
        for (i, b) in self.blocks.iter().enumerate() {
            b.validate().map_err(|e| e.at_block(i))?;
            shape = b.output_shape(&shape).map_err(|e| e.at_block(i))?;
        }
        Ok(())
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, i: usize) -> Result<&Block> {
        self.blocks.get(i).ok_or_else(|| {
            GrailError::InvalidArgument(format!(
                "block index {i} out of range for {} blocks",
                self.blocks.len()
            ))
        })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Per-sample output shape.
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        self.blocks
            .iter()
            .try_fold(self.input_shape.clone(), |s, b| b.output_shape(&s))
    }

    /// Swaps in a new block, re-validating the whole chain.
    pub fn replace_block(&mut self, i: usize, block: Block) -> Result<Block> {
        self.block(i)?;
        let old = std::mem::replace(&mut self.blocks[i], block);
        if let Err(e) = self.check_wiring() {
            self.blocks[i] = old;
            return Err(e);
        }
        Ok(old)
    }

    pub fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let s = batch.shape();
        let k = self.input_shape.len();
        if s.len() <= k || s[s.len() - k..] != self.input_shape[..] {
            return Err(GrailError::shape("graph input", s, &self.input_shape));
        }
        Ok(())
    }

    /// Evaluation-mode forward pass, optionally capturing block `capture`.
    pub fn forward(&self, batch: &Tensor, capture: Option<usize>) -> Result<Forward> {
        self.check_batch(batch)?;
        if let Some(c) = capture {
            self.block(c)?;
        }
        let mut x = batch.clone();
        let mut captured = None;
        let mut block_input = None;
        for (i, b) in self.blocks.iter().enumerate() {
            let here = capture == Some(i);
            if here {
                block_input = Some(x.clone());
            }
            let (y, cap) = b.forward(&x, here).map_err(|e| e.at_block(i))?;
            if here {
                captured = cap;
            }
            x = y;
        }
        Ok(Forward {
            output: x,
            captured,
            block_input,
        })
    }

    /// The batch as it reaches block `i` (running blocks `0..i`).
    pub fn forward_until(&self, batch: &Tensor, i: usize) -> Result<Tensor> {
        self.check_batch(batch)?;
        if i > self.blocks.len() {
            self.block(i)?;
        }
        let mut x = batch.clone();
        for (j, b) in self.blocks[..i].iter().enumerate() {
            x = b.forward(&x, false).map_err(|e| e.at_block(j))?.0;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, AttentionBlock, DenseBlock, FfnBlock};
    use crate::testutil::random_matrix;

    fn identity_dense() -> DenseBlock {
        DenseBlock {
            w_producer: Tensor::eye(2),
            b_producer: Tensor::zeros(&[2]),
            activation: Activation::Identity,
            w_consumer: Tensor::eye(2),
            b_consumer: Tensor::zeros(&[2]),
        }
    }

    #[test]
    fn identity_chain_captures_hidden() {
        let g = BlockGraph::new(vec![identity_dense().into()], vec![2]).unwrap();
        let x = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let f = g.forward(&x, Some(0)).unwrap();
        assert_eq!(f.output.data(), &[3.0, 4.0]);
        assert_eq!(f.captured.unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn ffn_capture_matches_scalar_gelu() {
        let gelu = |x: f64| 0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()));
        let ffn = FfnBlock {
            w_fc: random_matrix(6, 4, 1),
            b_fc: random_matrix(6, 1, 2).reshape(vec![6]).unwrap(),
            activation: Activation::Gelu,
            w_proj: random_matrix(4, 6, 3),
            b_proj: Tensor::zeros(&[4]),
        };
        let x = random_matrix(5, 4, 4);
        let g = BlockGraph::new(vec![ffn.clone().into()], vec![4]).unwrap();
        let h = g.forward(&x, Some(0)).unwrap().captured.unwrap();
        for n in 0..5 {
            for j in 0..6 {
                let mut pre = ffn.b_fc.data()[j];
                for c in 0..4 {
                    pre += x.at(n, c) * ffn.w_fc.at(j, c);
                }
                assert!((h.at(n, j) - gelu(pre)).abs() <= 1e-10);
            }
        }
    }

    fn padded_identity(rows: usize, cols: usize) -> Tensor {
        Tensor::from_fn2(rows, cols, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    #[test]
    fn single_token_attention_is_value_concat() {
        let att = AttentionBlock {
            w_q: padded_identity(4, 4),
            w_k: padded_identity(4, 4),
            w_v: padded_identity(4, 4),
            w_o: Tensor::eye(4),
            n_heads: 2,
            head_dim: 2,
            gqa_groups: 1,
            causal: false,
        };
        let g = BlockGraph::new(vec![att.into()], vec![1, 4]).unwrap();
        let x = Tensor::new(vec![1, 1, 4], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let cap = g.forward(&x, Some(0)).unwrap().captured.unwrap();
        // a single token attends only to itself: each head returns its value slice
        assert_eq!(cap.data(), &[0.5, -1.0, 2.0, 3.0]);
    }

    #[test]
    fn rejects_miswired_chain() {
        let mut b = identity_dense();
        b.w_consumer = Tensor::zeros(&[3, 2]);
        b.b_consumer = Tensor::zeros(&[3]);
        let err = BlockGraph::new(vec![b.into(), identity_dense().into()], vec![2]).unwrap_err();
        assert!(matches!(err, GrailError::Block { block: 1, .. }), "{err}");
    }

    #[test]
    fn capture_index_out_of_range() {
        let g = BlockGraph::new(vec![identity_dense().into()], vec![2]).unwrap();
        let x = Tensor::zeros(&[1, 2]);
        assert!(g.forward(&x, Some(1)).is_err());
        assert!(g.forward(&Tensor::zeros(&[1, 3]), None).is_err());
    }

    #[test]
    fn replace_block_rejects_incompatible() {
        let mut g = BlockGraph::new(
            vec![identity_dense().into(), identity_dense().into()],
            vec![2],
        )
        .unwrap();
        let mut wide = identity_dense();
        wide.w_consumer = Tensor::zeros(&[5, 2]);
        wide.b_consumer = Tensor::zeros(&[5]);
        assert!(g.replace_block(0, wide.into()).is_err());
        assert_eq!(g.blocks()[0], Block::Dense(identity_dense()));
    }
}
