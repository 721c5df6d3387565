//! Synthetic tasks and constructed teacher models with injected redundancy.

use super::{Dataset, Metric, Targets};
use crate::error::{GrailError, Result};
use crate::linalg::{matmul_at_b, spd_solve, SpdSystem};
use crate::model::{
    Activation, AttentionBlock, Block, BlockGraph, ConvBlock, ConvGeometry, DenseBlock, FfnBlock,
};
use crate::rng::{gaussian, seeded, SeededRng};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Targets are the outputs of the (uncompressed) teacher model.
    TeacherRegression,
    /// Isotropic Gaussian clusters, one per class; the model's read-out is a
    /// least-squares fit on the training split.
    GaussianMixtureClassification,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub input_dim: usize,
    /// Output width of the MLP teacher; defaults to `input_dim`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_classes: Option<usize>,
    #[serde(default = "default_pool")]
    pub n_train: usize,
    #[serde(default = "default_pool")]
    pub n_eval: usize,
    #[serde(default)]
    pub seed: u64,
    /// Distance scale between class means.
    #[serde(default = "default_separation")]
    pub class_separation: f64,
    /// Use this graph instead of constructing one (regression only).
    #[serde(skip)]
    pub teacher: Option<BlockGraph>,
}

fn default_pool() -> usize {
    512
}

fn default_separation() -> f64 {
    2.0
}

impl SyntheticTask {
    pub fn regression(input_dim: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::TeacherRegression,
            input_dim,
            output_dim: None,
            n_classes: None,
            n_train: default_pool(),
            n_eval: default_pool(),
            seed,
            class_separation: default_separation(),
            teacher: None,
        }
    }

    pub fn classification(input_dim: usize, n_classes: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::GaussianMixtureClassification,
            n_classes: Some(n_classes),
            ..Self::regression(input_dim, seed)
        }
    }

    pub fn metric(&self) -> Metric {
        match self.kind {
            TaskKind::TeacherRegression => Metric::RelativeError,
            TaskKind::GaussianMixtureClassification => Metric::Accuracy,
        }
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let bad = |m: String| Err(GrailError::InvalidArgument(m));
        if self.input_dim == 0 {
            return bad("input_dim must be positive".into());
        }
        if self.n_train == 0 || self.n_eval == 0 {
            return bad("n_train and n_eval must be positive".into());
        }
        if self.output_dim == Some(0) {
            return bad("output_dim must be positive".into());
        }
        match self.kind {
            TaskKind::GaussianMixtureClassification => {
                if !matches!(self.n_classes, Some(c) if c >= 2) {
                    return bad("classification needs n_classes >= 2".into());
                }
                if spec.family != ModelFamily::Mlp {
                    return bad(format!(
                        "classification is only defined for the mlp family, not {}",
                        spec.family.name()
                    ));
                }
                if self.teacher.is_some() {
                    return bad("a supplied teacher only makes sense for regression".into());
                }
            }
            TaskKind::TeacherRegression => {}
        }
        if self.teacher.is_none() {
            spec.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    Mlp,
    Ffn,
    Conv,
    Attention,
}

impl ModelFamily {
    pub fn name(self) -> &'static str {
        match self {
            ModelFamily::Mlp => "mlp",
            ModelFamily::Ffn => "ffn",
            ModelFamily::Conv => "conv",
            ModelFamily::Attention => "attention",
        }
    }
}

/// Architecture of a constructed teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub family: ModelFamily,
    /// Hidden width of dense, FFN and conv blocks.
    pub hidden: usize,
    pub depth: usize,
    /// Fraction of hidden units (or heads) that are noisy copies of others.
    pub redundancy: f64,
    /// Noise on the copies, relative to the copied row's scale.
    pub dup_noise: f64,
    pub n_heads: usize,
    pub head_dim: usize,
    pub gqa_groups: usize,
    pub causal: bool,
    pub seq_len: usize,
    pub spatial: usize,
    pub kernel: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            family: ModelFamily::Mlp,
            hidden: 32,
            depth: 2,
            redundancy: 0.5,
            dup_noise: 0.01,
            n_heads: 4,
            head_dim: 8,
            gqa_groups: 1,
            causal: false,
            seq_len: 6,
            spatial: 6,
            kernel: 3,
        }
    }
}

impl ModelSpec {
    pub fn family(family: ModelFamily) -> Self {
        Self {
            family,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GrailError::InvalidArgument(m.into()));
        if self.depth == 0 || self.hidden == 0 {
            return bad("depth and hidden must be positive");
        }
        if !(0.0..1.0).contains(&self.redundancy) {
            return bad("redundancy must lie in [0, 1)");
        }
        if !(self.dup_noise >= 0.0) {
            return bad("dup_noise must be non-negative");
        }
        match self.family {
            ModelFamily::Attention => {
                if self.n_heads == 0 || self.head_dim == 0 || self.gqa_groups == 0 || self.seq_len == 0 {
                    return bad("attention needs positive n_heads, head_dim, gqa_groups and seq_len");
                }
                if !self.n_heads.is_multiple_of(self.gqa_groups) {
                    return Err(GrailError::Gqa(format!(
                        "{} heads are not divisible into {} groups",
                        self.n_heads, self.gqa_groups
                    )));
                }
            }
            ModelFamily::Conv
                if (self.kernel.is_multiple_of(2) || self.spatial == 0) => {
                    return bad("conv needs an odd kernel and positive spatial size");
                }
            _ => {}
        }
        Ok(())
    }

    /// Per-sample input shape for a model of this family.
    pub fn input_shape(&self, input_dim: usize) -> Vec<usize> {
        match self.family {
            ModelFamily::Mlp | ModelFamily::Ffn => vec![input_dim],
            ModelFamily::Conv => vec![input_dim, self.spatial, self.spatial],
            ModelFamily::Attention => vec![self.seq_len, input_dim],
        }
    }
}

/// A model together with its calibration pool and held-out split.
#[derive(Debug, Clone)]
pub struct TaskInstance {
    pub model: BlockGraph,
    /// Unlabelled training inputs; calibration batches are prefixes.
    pub train: Tensor,
    pub eval: Dataset,
    pub metric: Metric,
}

impl TaskInstance {
    /// The first `size` training inputs.
    pub fn calibration(&self, size: usize) -> Result<Tensor> {
        let n = self.train.shape()[0];
        if size == 0 || size > n {
            return Err(GrailError::InvalidArgument(format!(
                "calibration size {size} outside 1..={n}"
            )));
        }
        self.train.select_rows(&(0..size).collect::<Vec<_>>())
    }
}

/// Mixes the task seed with a sweep seed into one stream seed.
pub fn instance_seed(task_seed: u64, seed: u64) -> u64 {
    let mut z = task_seed ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Builds the model and data for one seed. Deterministic in
/// `(task.seed, seed)`.
pub fn instantiate(task: &SyntheticTask, spec: &ModelSpec, seed: u64) -> Result<TaskInstance> {
    task.validate(spec)?;
    let mut rng = seeded(instance_seed(task.seed, seed));
    match task.kind {
        TaskKind::TeacherRegression => {
            let model = match &task.teacher {
                Some(t) => t.clone(),
                None => build_teacher(spec, task.input_dim, task.output_dim.unwrap_or(task.input_dim), &mut rng)?,
            };
            let shape = model.input_shape().to_vec();
            let train = gaussian(&batch_shape(task.n_train, &shape), &mut rng);
            let inputs = gaussian(&batch_shape(task.n_eval, &shape), &mut rng);
            let targets = model.forward(&inputs, None)?.output;
            Ok(TaskInstance {
                model,
                train,
                eval: Dataset {
                    inputs,
                    targets: Targets::Values(targets),
                },
                metric: Metric::RelativeError,
            })
        }
        TaskKind::GaussianMixtureClassification => classification_instance(task, spec, &mut rng),
    }
}

fn batch_shape(n: usize, sample: &[usize]) -> Vec<usize> {
    let mut s = vec![n];
    s.extend_from_slice(sample);
    s
}

fn normal(rng: &mut SeededRng) -> f64 {
    rng.sample(StandardNormal)
}

fn scaled_gaussian(shape: &[usize], scale: f64, rng: &mut SeededRng) -> Tensor {
    gaussian(shape, rng).scale(scale)
}

/// Overwrites `round(redundancy·units)` randomly placed units of `weights`
/// with noisy copies of the remaining ones, spread round-robin over the
/// originals. All tensors in `weights` share the unit axis 0. For homogeneous
/// activations the copies are scaled down by a factor in `[0.5, 0.9)`, so every
/// original outranks its copies under any norm-based score.
fn inject_redundancy(
    weights: &mut [&mut Tensor],
    units: usize,
    redundancy: f64,
    noise: f64,
    homogeneous: bool,
    rng: &mut SeededRng,
) {
    let n_dup = ((redundancy * units as f64).round() as usize).min(units.saturating_sub(1));
    if n_dup == 0 {
        return;
    }
    let mut order: Vec<usize> = (0..units).collect();
    order.shuffle(rng);
    let (dups, bases) = order.split_at(n_dup);
    for (i, &d) in dups.iter().enumerate() {
        let src = bases[i % bases.len()];
        let s = if homogeneous { rng.random_range(0.5..0.9) } else { 1.0 };
        for w in weights.iter_mut() {
            let len = w.len() / units;
            let row: Vec<f64> = w.data()[src * len..(src + 1) * len].to_vec();
            let scale = (row.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
            for (j, v) in row.iter().enumerate() {
                w.data_mut()[d * len + j] = s * v + noise * scale * normal(rng);
            }
        }
    }
}

fn build_teacher(spec: &ModelSpec, input_dim: usize, output_dim: usize, rng: &mut SeededRng) -> Result<BlockGraph> {
    let h = spec.hidden;
    let mut blocks = Vec::with_capacity(spec.depth);
    for i in 0..spec.depth {
        let last = i + 1 == spec.depth;
        let block = match spec.family {
            ModelFamily::Mlp => {
                let out = if last { output_dim } else { input_dim };
                let mut w_producer = scaled_gaussian(&[h, input_dim], (1.0 / input_dim as f64).sqrt(), rng);
                let mut b_producer = scaled_gaussian(&[h], 0.1, rng);
                inject_redundancy(
                    &mut [&mut w_producer, &mut b_producer],
                    h,
                    spec.redundancy,
                    spec.dup_noise,
                    true,
                    rng,
                );
                Block::Dense(DenseBlock {
                    w_producer,
                    b_producer,
                    activation: Activation::Relu,
                    w_consumer: scaled_gaussian(&[out, h], (2.0 / h as f64).sqrt(), rng),
                    b_consumer: scaled_gaussian(&[out], 0.1, rng),
                })
            }
            ModelFamily::Ffn => {
                let mut w_fc = scaled_gaussian(&[h, input_dim], (1.0 / input_dim as f64).sqrt(), rng);
                let mut b_fc = scaled_gaussian(&[h], 0.1, rng);
                inject_redundancy(&mut [&mut w_fc, &mut b_fc], h, spec.redundancy, spec.dup_noise, false, rng);
                Block::Ffn(FfnBlock {
                    w_fc,
                    b_fc,
                    activation: Activation::Gelu,
                    w_proj: scaled_gaussian(&[input_dim, h], (2.0 / h as f64).sqrt(), rng),
                    b_proj: scaled_gaussian(&[input_dim], 0.1, rng),
                })
            }
            ModelFamily::Conv => {
                let k = spec.kernel;
                let geometry = ConvGeometry {
                    stride: 1,
                    padding: k / 2,
                };
                let fan_in = (input_dim * k * k) as f64;
                let mut w_producer = scaled_gaussian(&[h, input_dim, k, k], (1.0 / fan_in).sqrt(), rng);
                let mut b_producer = scaled_gaussian(&[h], 0.1, rng);
                inject_redundancy(
                    &mut [&mut w_producer, &mut b_producer],
                    h,
                    spec.redundancy,
                    spec.dup_noise,
                    true,
                    rng,
                );
                Block::Conv(ConvBlock {
                    w_producer,
                    b_producer,
                    activation: Activation::Relu,
                    w_consumer: scaled_gaussian(&[input_dim, h, k, k], (2.0 / (h * k * k) as f64).sqrt(), rng),
                    b_consumer: scaled_gaussian(&[input_dim], 0.1, rng),
                    producer_geometry: geometry,
                    consumer_geometry: geometry,
                })
            }
            ModelFamily::Attention => Block::Attention(attention_teacher(spec, input_dim, rng)?),
        };
        blocks.push(block);
    }
    BlockGraph::new(blocks, spec.input_shape(input_dim))
}

/// Redundant heads copy another head's query rows. Without grouping the
/// key rows are copied too and the value rows scaled, so the copy's output is
/// a multiple of the original's; with grouping a copy sits in another group
/// at the same key/value slot and shares its keys and values outright.
fn attention_teacher(spec: &ModelSpec, d: usize, rng: &mut SeededRng) -> Result<AttentionBlock> {
    let (nh, dh, g) = (spec.n_heads, spec.head_dim, spec.gqa_groups);
    let kvh = nh / g;
    let s = (1.0 / d as f64).sqrt();
    let mut w_q = scaled_gaussian(&[nh * dh, d], s, rng);
    let mut w_k = scaled_gaussian(&[kvh * dh, d], s, rng);
    let mut w_v = scaled_gaussian(&[kvh * dh, d], s, rng);
    let w_o = scaled_gaussian(&[d, nh * dh], (1.0 / (nh * dh) as f64).sqrt(), rng);
    let n_dup = ((spec.redundancy * nh as f64).round() as usize).min(nh - 1);
    let copy_rows = |w: &mut Tensor, from: usize, to: usize, scale: f64, rng: &mut SeededRng| {
        for r in 0..dh {
            for c in 0..d {
                let v = scale * w.at(from * dh + r, c) + spec.dup_noise * s * normal(rng);
                w.set(to * dh + r, c, v);
            }
        }
    };
    if g == 1 {
        let mut order: Vec<usize> = (0..nh).collect();
        order.shuffle(rng);
        let (dups, bases) = order.split_at(n_dup);
        for (i, &dst) in dups.iter().enumerate() {
            let src = bases[i % bases.len()];
            copy_rows(&mut w_q, src, dst, 1.0, rng);
            copy_rows(&mut w_k, src, dst, 1.0, rng);
            let scale = rng.random_range(0.5..0.9);
            copy_rows(&mut w_v, src, dst, scale, rng);
        }
    } else {
        // heads in groups 1.. may copy the head in group 0 at the same slot
        let mut candidates: Vec<usize> = (kvh..nh).collect();
        candidates.shuffle(rng);
        for &dst in candidates.iter().take(n_dup) {
            copy_rows(&mut w_q, dst % kvh, dst, 1.0, rng);
        }
    }
    Ok(AttentionBlock {
        w_q,
        w_k,
        w_v,
        w_o,
        n_heads: nh,
        head_dim: dh,
        gqa_groups: g,
        causal: spec.causal,
    })
}

fn classification_instance(task: &SyntheticTask, spec: &ModelSpec, rng: &mut SeededRng) -> Result<TaskInstance> {
    let d = task.input_dim;
    let c = task.n_classes.expect("validated");
    let means = scaled_gaussian(&[c, d], task.class_separation / (d as f64).sqrt(), rng);
    let draw = |n: usize, rng: &mut SeededRng| {
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let mut x = gaussian(&[n, d], rng).scale(1.0 / (d as f64).sqrt());
        for (i, &l) in labels.iter().enumerate() {
            for (v, m) in x.row_mut(i).iter_mut().zip(means.row(l)) {
                *v += m;
            }
        }
        (x, labels)
    };
    let mut hidden_spec = spec.clone();
    hidden_spec.family = ModelFamily::Mlp;
    let mut model = build_teacher(&hidden_spec, d, c, rng)?;
    let (train, train_labels) = draw(task.n_train, rng);
    let (inputs, labels) = draw(task.n_eval, rng);
    fit_readout(&mut model, &train, &train_labels, c)?;
    Ok(TaskInstance {
        model,
        train,
        eval: Dataset {
            inputs,
            targets: Targets::Labels(labels),
        },
        metric: Metric::Accuracy,
    })
}

/// Least-squares fit of the last consumer (with bias) onto one-hot labels.
fn fit_readout(model: &mut BlockGraph, x: &Tensor, labels: &[usize], c: usize) -> Result<()> {
    let last = model.len() - 1;
    let features = model.forward(x, Some(last))?.captured.expect("captured");
    let (n, h) = (features.rows(), features.cols());
    let aug = Tensor::from_fn2(n, h + 1, |i, j| if j < h { features.at(i, j) } else { 1.0 });
    let onehot = Tensor::from_fn2(n, c, |i, j| if labels[i] == j { 1.0 } else { 0.0 });
    let gram = matmul_at_b(&aug, &aug)?;
    let rhs = matmul_at_b(&aug, &onehot)?;
    let ridge = 1e-2 * gram.trace() / (h + 1) as f64;
    let sol = spd_solve(&SpdSystem::new(gram, rhs)?, ridge)?;
    let w_consumer = Tensor::from_fn2(c, h, |i, j| sol.at(j, i));
    let b_consumer = Tensor::vector((0..c).map(|i| sol.at(h, i)).collect());
    let Block::Dense(mut block) = model.blocks()[last].clone() else {
        unreachable!("classification models are dense");
    };
    block.w_consumer = w_consumer;
    block.b_consumer = b_consumer;
    model.replace_block(last, Block::Dense(block))?;
    Ok(())
}
