use super::attention::attention_heads;
use super::conv::{conv2d, out_extent, positions_as_rows};
use super::Activation;
use crate::error::{GrailError, Result};
use crate::linalg::matmul_a_bt;
use crate::tensor::Tensor;

/// Fully connected producer → φ → consumer pair.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseBlock {
    /// `H × C`
    pub w_producer: Tensor,
    pub b_producer: Tensor,
    pub activation: Activation,
    /// `O × H`
    pub w_consumer: Tensor,
    pub b_consumer: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

/// Two stacked convolutions; the hidden channels sit between them.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    /// `H × C × kH × kW`
    pub w_producer: Tensor,
    pub b_producer: Tensor,
    pub activation: Activation,
    /// `O × H × kH' × kW'`
    pub w_consumer: Tensor,
    pub b_consumer: Tensor,
    pub producer_geometry: ConvGeometry,
    pub consumer_geometry: ConvGeometry,
}

/// Transformer MLP: expansion `w_fc`, GELU, projection `w_proj`.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnBlock {
    /// `H × D`
    pub w_fc: Tensor,
    pub b_fc: Tensor,
    pub activation: Activation,
    /// `D × H`
    pub w_proj: Tensor,
    pub b_proj: Tensor,
}

/// Bias-free self-attention with optional grouped key/value heads.
///
/// With `gqa_groups = G`, the `n_heads` query heads form `G` contiguous groups
/// of `n_heads / G` heads; head `j` of every group shares key/value head `j`.
/// `G = 1` is standard multi-head attention.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    /// `(n_heads·head_dim) × D`
    pub w_q: Tensor,
    /// `(kv_heads·head_dim) × D`
    pub w_k: Tensor,
    pub w_v: Tensor,
    /// `D_out × (n_heads·head_dim)`
    pub w_o: Tensor,
    pub n_heads: usize,
    pub head_dim: usize,
    pub gqa_groups: usize,
    pub causal: bool,
}

impl AttentionBlock {
    pub fn kv_heads(&self) -> usize {
        self.n_heads / self.gqa_groups
    }

    pub fn model_dim(&self) -> usize {
        self.w_q.shape()[1]
    }

    fn validate(&self) -> Result<()> {
        for t in [&self.w_q, &self.w_k, &self.w_v, &self.w_o] {
            t.expect_rank(2, "attention weight")?;
        }
        if self.n_heads == 0 || self.head_dim == 0 || self.gqa_groups == 0 {
            return Err(GrailError::InvalidArgument(
                "attention head counts must be positive".into(),
            ));
        }
        if !self.n_heads.is_multiple_of(self.gqa_groups) {
            return Err(GrailError::Gqa(format!(
                "{} heads are not divisible into {} groups",
                self.n_heads, self.gqa_groups
            )));
        }
        let width = self.n_heads * self.head_dim;
        let kv_width = self.kv_heads() * self.head_dim;
        let d = self.model_dim();
        if self.w_q.rows() != width {
            return Err(GrailError::shape("attention w_q", self.w_q.shape(), &[width, d]));
        }
        for (name, t) in [("attention w_k", &self.w_k), ("attention w_v", &self.w_v)] {
            if t.shape() != [kv_width, d] {
                return Err(GrailError::shape(name, t.shape(), &[kv_width, d]));
            }
        }
        if self.w_o.cols() != width {
            return Err(GrailError::shape(
                "attention w_o",
                self.w_o.shape(),
                &[self.w_o.rows(), width],
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Dense(DenseBlock),
    Conv(ConvBlock),
    Ffn(FfnBlock),
    Attention(AttentionBlock),
}

impl From<DenseBlock> for Block {
    fn from(b: DenseBlock) -> Self {
        Block::Dense(b)
    }
}

impl From<ConvBlock> for Block {
    fn from(b: ConvBlock) -> Self {
        Block::Conv(b)
    }
}

impl From<FfnBlock> for Block {
    fn from(b: FfnBlock) -> Self {
        Block::Ffn(b)
    }
}

impl From<AttentionBlock> for Block {
    fn from(b: AttentionBlock) -> Self {
        Block::Attention(b)
    }
}

fn check_pair(
    op: &'static str,
    wp: &Tensor,
    bp: &Tensor,
    wc: &Tensor,
    bc: &Tensor,
    rank: usize,
) -> Result<()> {
    wp.expect_rank(rank, op)?;
    wc.expect_rank(rank, op)?;
    bp.expect_rank(1, op)?;
    bc.expect_rank(1, op)?;
    if wc.shape()[1] != wp.shape()[0] {
        return Err(GrailError::shape(op, wp.shape(), wc.shape()));
    }
    if bp.len() != wp.shape()[0] {
        return Err(GrailError::shape(op, wp.shape(), bp.shape()));
    }
    if bc.len() != wc.shape()[0] {
        return Err(GrailError::shape(op, wc.shape(), bc.shape()));
    }
    Ok(())
}

impl Block {
    pub fn kind(&self) -> &'static str {
        match self {
            Block::Dense(_) => "dense",
            Block::Conv(_) => "conv",
            Block::Ffn(_) => "ffn",
            Block::Attention(_) => "attention",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Block::Dense(b) => check_pair(
                "dense block",
                &b.w_producer,
                &b.b_producer,
                &b.w_consumer,
                &b.b_consumer,
                2,
            ),
            Block::Ffn(b) => check_pair("ffn block", &b.w_fc, &b.b_fc, &b.w_proj, &b.b_proj, 2),
            Block::Conv(b) => {
                check_pair(
                    "conv block",
                    &b.w_producer,
                    &b.b_producer,
                    &b.w_consumer,
                    &b.b_consumer,
                    4,
                )?;
                if b.producer_geometry.stride == 0 || b.consumer_geometry.stride == 0 {
                    return Err(GrailError::InvalidArgument("conv stride must be positive".into()));
                }
                Ok(())
            }
            Block::Attention(b) => b.validate(),
        }
    }

    /// Width `H` of the consumer input: hidden units, channels, or `n_heads·head_dim`.
    pub fn hidden_width(&self) -> usize {
        match self {
            Block::Dense(b) => b.w_producer.rows(),
            Block::Conv(b) => b.w_producer.shape()[0],
            Block::Ffn(b) => b.w_fc.rows(),
            Block::Attention(b) => b.n_heads * b.head_dim,
        }
    }

    /// Feature count the block consumes (last axis, or channels for conv).
    pub fn input_width(&self) -> usize {
        match self {
            Block::Dense(b) => b.w_producer.cols(),
            Block::Conv(b) => b.w_producer.shape()[1],
            Block::Ffn(b) => b.w_fc.cols(),
            Block::Attention(b) => b.model_dim(),
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = || GrailError::shape(self.kind(), input, &[self.input_width()]);
        match self {
            Block::Dense(_) | Block::Ffn(_) | Block::Attention(_) => {
                if input.last() != Some(&self.input_width()) {
                    return Err(mismatch());
                }
                if matches!(self, Block::Attention(_)) && input.len() > 2 {
                    return Err(mismatch());
                }
                let mut out = input.to_vec();
                *out.last_mut().unwrap() = match self {
                    Block::Dense(b) => b.w_consumer.rows(),
                    Block::Ffn(b) => b.w_proj.rows(),
                    Block::Attention(b) => b.w_o.rows(),
                    Block::Conv(_) => unreachable!(),
                };
                Ok(out)
            }
            Block::Conv(b) => {
                if input.len() != 3 || input[0] != self.input_width() {
                    return Err(mismatch());
                }
                let (ps, cs) = (b.w_producer.shape(), b.w_consumer.shape());
                let pg = b.producer_geometry;
                let cg = b.consumer_geometry;
                let h1 = out_extent(input[1], ps[2], pg.stride, pg.padding);
                let w1 = out_extent(input[2], ps[3], pg.stride, pg.padding);
                let h2 = h1.and_then(|h| out_extent(h, cs[2], cg.stride, cg.padding));
                let w2 = w1.and_then(|w| out_extent(w, cs[3], cg.stride, cg.padding));
                match (h2, w2) {
                    (Some(h), Some(w)) => Ok(vec![cs[0], h, w]),
                    _ => Err(GrailError::InvalidArgument(format!(
                        "conv kernels do not fit spatial input {input:?}"
                    ))),
                }
            }
        }
    }

    /// Runs the block on a batch. When `capture` is set, also returns the
    /// consumer-input activations as an `(N_effective × H)` matrix where every
    /// token or spatial position is one row.
    pub fn forward(&self, x: &Tensor, capture: bool) -> Result<(Tensor, Option<Tensor>)> {
        match self {
            Block::Dense(b) => dense_like(
                x,
                &b.w_producer,
                &b.b_producer,
                b.activation,
                &b.w_consumer,
                &b.b_consumer,
                capture,
            ),
            Block::Ffn(b) => dense_like(
                x, &b.w_fc, &b.b_fc, b.activation, &b.w_proj, &b.b_proj, capture,
            ),
            Block::Conv(b) => {
                x.expect_rank(4, "conv block input")?;
                let pg = b.producer_geometry;
                let cg = b.consumer_geometry;
                let hidden = conv2d(x, &b.w_producer, Some(&b.b_producer), pg.stride, pg.padding)?
                    .map(|v| b.activation.apply(v));
                let y = conv2d(&hidden, &b.w_consumer, Some(&b.b_consumer), cg.stride, cg.padding)?;
                let cap = capture.then(|| positions_as_rows(&hidden));
                Ok((y, cap))
            }
            Block::Attention(b) => {
                let seq = as_sequences(x)?;
                let heads = attention_heads(b, &seq)?;
                let y = matmul_a_bt(&heads, &b.w_o)?;
                let mut shape = x.shape().to_vec();
                *shape.last_mut().unwrap() = b.w_o.rows();
                Ok((y.reshape(shape)?, capture.then_some(heads)))
            }
        }
    }

    /// Rows of producer-input features, one per token or spatial position.
    pub fn producer_input_rows(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Block::Conv(_) => {
                x.expect_rank(4, "conv block input")?;
                Ok(positions_as_rows(x))
            }
            _ => {
                if x.rank() < 2 {
                    return Err(GrailError::InvalidTensor(
                        "batch must carry a leading sample axis".into(),
                    ));
                }
                Ok(x.flatten_rows())
            }
        }
    }
}

fn as_sequences(x: &Tensor) -> Result<Tensor> {
    match x.rank() {
        2 => x.clone().reshape(vec![x.shape()[0], 1, x.shape()[1]]),
        3 => Ok(x.clone()),
        _ => Err(GrailError::InvalidTensor(format!(
            "attention expects N×T×D or N×D input, got {:?}",
            x.shape()
        ))),
    }
}

fn dense_like(
    x: &Tensor,
    wp: &Tensor,
    bp: &Tensor,
    act: Activation,
    wc: &Tensor,
    bc: &Tensor,
    capture: bool,
) -> Result<(Tensor, Option<Tensor>)> {
    if x.rank() < 2 {
        return Err(GrailError::InvalidTensor(
            "batch must carry a leading sample axis".into(),
        ));
    }
    let rows = x.flatten_rows();
    let mut hidden = matmul_a_bt(&rows, wp)?;
    let h = hidden.cols();
    for row in hidden.data_mut().chunks_mut(h) {
        for (v, b) in row.iter_mut().zip(bp.data()) {
            *v = act.apply(*v + b);
        }
    }
    let mut y = matmul_a_bt(&hidden, wc)?;
    let o = y.cols();
    for row in y.data_mut().chunks_mut(o) {
        for (v, b) in row.iter_mut().zip(bc.data()) {
            *v += b;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = o;
    Ok((y.reshape(shape)?, capture.then_some(hidden)))
}
