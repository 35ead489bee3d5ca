//! Three-view network: one convolutional branch per canonical view, a merge
//! of the branch activations, and a fully connected head.
//!
//! Branches are either one shared parameter set applied to all three views
//! or three independent sets. Activations are merged by element-wise max
//! (order-free) or by depth concatenation in fixed X, Y, Z order followed by
//! a 3x3 convolution that maps `3D` channels back to `D` (order-aware).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::descriptor::MultiViewBundle;
use crate::error::{Error, Result};
use crate::nn::gradcheck::{cross_entropy_terms, projection_terms, Objective};
use crate::nn::layers::{BatchNorm2d, Cache, Conv2d, Layer, Mode, Param};
use crate::nn::loss::softmax_cross_entropy;
use crate::nn::sequential::Sequential;
use crate::nn::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MergeKind {
    ElementwiseMax,
    ConcatConv,
}

/// The three branch/merge designs compared in the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MergeVariant {
    #[serde(rename = "shared-max")]
    SharedMax,
    #[serde(rename = "ind-max")]
    IndependentMax,
    #[serde(rename = "ind-cat")]
    IndependentConcat,
}

impl MergeVariant {
    pub const ALL: [MergeVariant; 3] = [
        MergeVariant::SharedMax,
        MergeVariant::IndependentMax,
        MergeVariant::IndependentConcat,
    ];

    pub fn shared(self) -> bool {
        self == MergeVariant::SharedMax
    }

    pub fn merge(self) -> MergeKind {
        match self {
            MergeVariant::IndependentConcat => MergeKind::ConcatConv,
            _ => MergeKind::ElementwiseMax,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MergeVariant::SharedMax => "shared-max",
            MergeVariant::IndependentMax => "ind-max",
            MergeVariant::IndependentConcat => "ind-cat",
        }
    }
}

impl std::str::FromStr for MergeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MergeVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown merge variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiViewConfig {
    pub shared: bool,
    pub merge: MergeKind,
    pub classes: usize,
    /// Descriptor resolution.
    pub n: usize,
    /// Descriptor layers (input channels).
    pub k: usize,
    /// Channels per branch convolution, `D`.
    pub width: usize,
    pub hidden: usize,
    /// conv-bn-relu-pool blocks per branch.
    pub blocks: usize,
    /// Initialize the first branch convolution by expanding 3-channel
    /// filters with [`expand_input_weights`] (requires `k` in {3, 5}).
    pub expand_init: bool,
}

impl MultiViewConfig {
    pub fn new(variant: MergeVariant, classes: usize, n: usize, k: usize) -> Self {
        Self {
            shared: variant.shared(),
            merge: variant.merge(),
            classes,
            n,
            k,
            width: 32,
            hidden: 128,
            blocks: 3,
            expand_init: false,
        }
    }

    pub fn variant(&self) -> Option<MergeVariant> {
        match (self.shared, self.merge) {
            (true, MergeKind::ElementwiseMax) => Some(MergeVariant::SharedMax),
            (false, MergeKind::ElementwiseMax) => Some(MergeVariant::IndependentMax),
            (false, MergeKind::ConcatConv) => Some(MergeVariant::IndependentConcat),
            (true, MergeKind::ConcatConv) => None,
        }
    }

    /// Spatial size of a branch output.
    pub fn branch_hw(&self) -> usize {
        self.n >> self.blocks
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.classes == 0 || self.k == 0 || self.width == 0 || self.hidden == 0 {
            return bad("classes, k, width and hidden must be >= 1".into());
        }
        if self.blocks == 0 || self.blocks > 16 {
            return bad(format!("unsupported block count {}", self.blocks));
        }
        if self.n == 0 || !self.n.is_multiple_of(1 << self.blocks) {
            return bad(format!(
                "N = {} must be a positive multiple of 2^{} for {} pooling blocks",
                self.n, self.blocks, self.blocks
            ));
        }
        if self.expand_init && !matches!(self.k, 3 | 5) {
            return Err(Error::UnsupportedK(self.k));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Branches<T> {
    Shared(Sequential<T>),
    Independent(Box<[Sequential<T>; 3]>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewNetwork<T> {
    pub config: MultiViewConfig,
    pub branches: Branches<T>,
    /// Merge convolution and its ReLU; `None` for max merging.
    pub merge: Option<Sequential<T>>,
    pub head: Sequential<T>,
}

pub struct MultiViewCache<T> {
    branches: [Vec<Cache<T>>; 3],
    merge: MergeCache<T>,
    head: Vec<Cache<T>>,
}

enum MergeCache<T> {
    Max { winners: Vec<u8> },
    Concat { caches: Vec<Cache<T>>, depth: usize },
}

impl<T> MultiViewCache<T> {
    fn pattern(&self, out: &mut Vec<u32>) {
        for b in &self.branches {
            for c in b {
                c.activation_pattern(out);
            }
        }
        match &self.merge {
            MergeCache::Max { winners } => out.extend(winners.iter().map(|&w| w as u32)),
            MergeCache::Concat { caches, .. } => {
                for c in caches {
                    c.activation_pattern(out);
                }
            }
        }
        for c in &self.head {
            c.activation_pattern(out);
        }
    }
}

fn check_same_shape<T: Scalar>(inputs: [&Tensor<T>; 3]) -> Result<()> {
    if inputs[1].shape() != inputs[0].shape() || inputs[2].shape() != inputs[0].shape() {
        return Err(Error::ShapeMismatch(format!(
            "merge inputs differ: {:?}, {:?}, {:?}",
            inputs[0].shape(),
            inputs[1].shape(),
            inputs[2].shape()
        )));
    }
    Ok(())
}

/// Element-wise maximum of three equally shaped activations. The second
/// return value names the winning branch per element; ties go to the lowest
/// index.
pub fn merge_max<T: Scalar>(inputs: [&Tensor<T>; 3]) -> Result<(Tensor<T>, Vec<u8>)> {
    check_same_shape(inputs)?;
    let n = inputs[0].len();
    let mut out = Vec::with_capacity(n);
    let mut winners = Vec::with_capacity(n);
    for i in 0..n {
        let mut best = 0u8;
        let mut value = inputs[0].data()[i];
        for (b, t) in inputs.iter().enumerate().skip(1) {
            if t.data()[i] > value {
                value = t.data()[i];
                best = b as u8;
            }
        }
        out.push(value);
        winners.push(best);
    }
    Ok((Tensor::new(inputs[0].shape().to_vec(), out)?, winners))
}

/// Routes each gradient element to the branch that won the forward max.
pub fn merge_max_backward<T: Scalar>(grad: &Tensor<T>, winners: &[u8]) -> Result<[Tensor<T>; 3]> {
    if grad.len() != winners.len() {
        return Err(Error::ShapeMismatch("max-merge gradient length".into()));
    }
    let mut out: [Tensor<T>; 3] = std::array::from_fn(|_| Tensor::zeros(grad.shape()));
    for (i, (&g, &w)) in grad.data().iter().zip(winners).enumerate() {
        out[w as usize].data_mut()[i] = g;
    }
    Ok(out)
}

/// Stacks `[B, D, H, W]` activations along depth in argument order.
pub fn concat_channels<T: Scalar>(inputs: [&Tensor<T>; 3]) -> Result<Tensor<T>> {
    check_same_shape(inputs)?;
    let [b, d, h, w] = inputs[0].dims4("concat")?;
    let plane = d * h * w;
    let mut out = Vec::with_capacity(3 * inputs[0].len());
    for n in 0..b {
        for t in inputs {
            out.extend_from_slice(&t.data()[n * plane..(n + 1) * plane]);
        }
    }
    Tensor::new(vec![b, 3 * d, h, w], out)
}

/// Inverse of [`concat_channels`].
pub fn split_channels<T: Scalar>(t: &Tensor<T>, depth: usize) -> Result<[Tensor<T>; 3]> {
    let [b, d3, h, w] = t.dims4("split")?;
    if d3 != 3 * depth {
        return Err(Error::ShapeMismatch(format!(
            "cannot split {d3} channels into 3 x {depth}"
        )));
    }
    let plane = depth * h * w;
    let mut parts: [Vec<T>; 3] = std::array::from_fn(|_| Vec::with_capacity(b * plane));
    for n in 0..b {
        for (i, part) in parts.iter_mut().enumerate() {
            let start = (n * 3 + i) * plane;
            part.extend_from_slice(&t.data()[start..start + plane]);
        }
    }
    let [a, bb, c] = parts;
    Ok([
        Tensor::new(vec![b, depth, h, w], a)?,
        Tensor::new(vec![b, depth, h, w], bb)?,
        Tensor::new(vec![b, depth, h, w], c)?,
    ])
}

/// Depth-concatenates `(B1, B2, B3)` and applies `conv`, which must map
/// `3D` channels to `D` with a shape-preserving kernel.
pub fn merge_concat_conv<T: Scalar>(inputs: [&Tensor<T>; 3], conv: &Conv2d<T>) -> Result<Tensor<T>> {
    let [_, d, h, w] = inputs[0].dims4("concat merge")?;
    if conv.in_channels != 3 * d || conv.out_channels != d {
        return Err(Error::ShapeMismatch(format!(
            "merge conv maps {} -> {} channels, need {} -> {d}",
            conv.in_channels,
            conv.out_channels,
            3 * d
        )));
    }
    if conv.output_hw(h, w)? != (h, w) {
        return Err(Error::ShapeMismatch("merge conv must preserve H x W".into()));
    }
    let (out, _) = conv.forward(&concat_channels(inputs)?)?;
    Ok(out)
}

/// Builds `k`-channel first-layer filters from `[D, 3, kh, kw]` filters:
/// for `k = 5` channels 1, 3 and 5 copy input channels 1, 2 and 3, and
/// channels 2 and 4 take the mean of the three. `k = 3` is a copy.
pub fn expand_input_weights<T: Scalar>(w3: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let [d, c, kh, kw] = w3.dims4("expand_input_weights")?;
    if c != 3 {
        return Err(Error::ShapeMismatch(format!(
            "expected 3 input channels, got {c}"
        )));
    }
    match k {
        3 => Ok(w3.clone()),
        5 => {
            let plane = kh * kw;
            let src = w3.data();
            let mut out = Vec::with_capacity(d * 5 * plane);
            let third = T::from_f64(3.0);
            for f in 0..d {
                let ch = |i: usize| &src[(f * 3 + i) * plane..(f * 3 + i + 1) * plane];
                let mean: Vec<T> = (0..plane)
                    .map(|j| (ch(0)[j] + ch(1)[j] + ch(2)[j]) / third)
                    .collect();
                out.extend_from_slice(ch(0));
                out.extend_from_slice(&mean);
                out.extend_from_slice(ch(1));
                out.extend_from_slice(&mean);
                out.extend_from_slice(ch(2));
            }
            Tensor::new(vec![d, 5, kh, kw], out)
        }
        other => Err(Error::UnsupportedK(other)),
    }
}

impl<T: Scalar> MultiViewNetwork<T> {
    /// Shared branches draw from `seed`; independent ones from `seed`,
    /// `seed + 1` and `seed + 2`. The merge convolution and head use
    /// `seed + 3` and `seed + 4`.
    pub fn build(config: MultiViewConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let branch = |s: u64| -> Result<Sequential<T>> {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut seq = Sequential::conv_blocks(config.k, config.width, config.blocks, &mut rng);
            if config.expand_init {
                let w3 = Tensor::randn(
                    &[config.width, 3, 3, 3],
                    (2.0 / 27.0f64).sqrt(),
                    &mut rng,
                );
                if let Some(Layer::Conv2d(conv)) = seq.layers.first_mut() {
                    conv.weight.value = expand_input_weights(&w3, config.k)?;
                }
            }
            Ok(seq)
        };
        let branches = if config.shared {
            Branches::Shared(branch(seed)?)
        } else {
            Branches::Independent(Box::new([
                branch(seed)?,
                branch(seed.wrapping_add(1))?,
                branch(seed.wrapping_add(2))?,
            ]))
        };
        let merge = match config.merge {
            MergeKind::ElementwiseMax => None,
            MergeKind::ConcatConv => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
                Some(Sequential::new(vec![
                    Layer::Conv2d(Conv2d::new(
                        3 * config.width,
                        config.width,
                        (3, 3),
                        1,
                        1,
                        &mut rng,
                    )),
                    Layer::Relu,
                ]))
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(4));
        let hw = config.branch_hw();
        let head = Sequential::classifier_head(
            config.width * hw * hw,
            config.hidden,
            config.classes,
            &mut rng,
        );
        Ok(Self {
            config,
            branches,
            merge,
            head,
        })
    }

    fn branch_mut(&mut self, i: usize) -> &mut Sequential<T> {
        match &mut self.branches {
            Branches::Shared(s) => s,
            Branches::Independent(b) => &mut b[i],
        }
    }

    pub fn branch(&self, i: usize) -> &Sequential<T> {
        match &self.branches {
            Branches::Shared(s) => s,
            Branches::Independent(b) => &b[i],
        }
    }

    /// `views` are `[B, k, N, N]` batches for X, Y and Z.
    pub fn forward(
        &mut self,
        views: &[Tensor<T>; 3],
        mode: Mode,
    ) -> Result<(Tensor<T>, MultiViewCache<T>)> {
        let expected = [self.config.k, self.config.n, self.config.n];
        for v in views {
            if v.shape().len() != 4 || v.shape()[1..] != expected {
                return Err(Error::ShapeMismatch(format!(
                    "view batch {:?} does not match [B, {}, {}, {}]",
                    v.shape(),
                    self.config.k,
                    self.config.n,
                    self.config.n
                )));
            }
        }
        let mut acts = Vec::with_capacity(3);
        let mut branch_caches = Vec::with_capacity(3);
        for (i, v) in views.iter().enumerate() {
            let (a, c) = self.branch_mut(i).forward(v, mode)?;
            acts.push(a);
            branch_caches.push(c);
        }
        let inputs = [&acts[0], &acts[1], &acts[2]];
        let (merged, merge_cache) = match &mut self.merge {
            None => {
                let (m, winners) = merge_max(inputs)?;
                (m, MergeCache::Max { winners })
            }
            Some(seq) => {
                let (m, caches) = seq.forward(&concat_channels(inputs)?, mode)?;
                (
                    m,
                    MergeCache::Concat {
                        caches,
                        depth: self.config.width,
                    },
                )
            }
        };
        let (logits, head) = self.head.forward(&merged, mode)?;
        let branches: [Vec<Cache<T>>; 3] = branch_caches
            .try_into()
            .map_err(|_| Error::ShapeMismatch("branch cache count".into()))?;
        Ok((
            logits,
            MultiViewCache {
                branches,
                merge: merge_cache,
                head,
            },
        ))
    }

    /// Accumulates parameter gradients (shared branches collect all three
    /// views, in X, Y, Z order) and returns the per-view input gradients.
    pub fn backward(&mut self, cache: &MultiViewCache<T>, grad: &Tensor<T>) -> Result<[Tensor<T>; 3]> {
        let g_merged = self.head.backward(&cache.head, grad)?;
        let g_branches = match (&cache.merge, &mut self.merge) {
            (MergeCache::Max { winners }, None) => merge_max_backward(&g_merged, winners)?,
            (MergeCache::Concat { caches, depth }, Some(seq)) => {
                let g = seq.backward(caches, &g_merged)?;
                split_channels(&g, *depth)?
            }
            _ => return Err(Error::ShapeMismatch("merge cache does not match network".into())),
        };
        let mut out = Vec::with_capacity(3);
        for (i, g) in g_branches.iter().enumerate() {
            out.push(self.branch_mut(i).backward(&cache.branches[i], g)?);
        }
        out.try_into()
            .map_err(|_| Error::ShapeMismatch("branch gradient count".into()))
    }

    /// Every trainable parameter in a fixed order: branches, merge, head.
    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        match &mut self.branches {
            Branches::Shared(s) => out.extend(s.params_mut()),
            Branches::Independent(b) => {
                for s in b.iter_mut() {
                    out.extend(s.params_mut());
                }
            }
        }
        if let Some(m) = &mut self.merge {
            out.extend(m.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        match &self.branches {
            Branches::Shared(s) => out.extend(s.params()),
            Branches::Independent(b) => {
                for s in b.iter() {
                    out.extend(s.params());
                }
            }
        }
        if let Some(m) = &self.merge {
            out.extend(m.params());
        }
        out.extend(self.head.params());
        out
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    /// All parameter sequences in serialization order.
    pub fn sequences(&self) -> Vec<&Sequential<T>> {
        let mut out = Vec::new();
        match &self.branches {
            Branches::Shared(s) => out.push(s),
            Branches::Independent(b) => out.extend(b.iter()),
        }
        if let Some(m) = &self.merge {
            out.push(m);
        }
        out.push(&self.head);
        out
    }

    pub fn sequences_mut(&mut self) -> Vec<&mut Sequential<T>> {
        let mut out = Vec::new();
        match &mut self.branches {
            Branches::Shared(s) => out.push(s),
            Branches::Independent(b) => out.extend(b.iter_mut()),
        }
        if let Some(m) = &mut self.merge {
            out.push(m);
        }
        out.push(&mut self.head);
        out
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm2d<T>> {
        self.sequences_mut()
            .into_iter()
            .flat_map(|s| s.batch_norms_mut())
            .collect()
    }

    /// Shapes after each stage for a batch of one: branch output, merged
    /// volume, logits.
    pub fn shape_audit(&self) -> Result<ShapeAudit> {
        let input = [1, self.config.k, self.config.n, self.config.n];
        let branch = self.branch(0).output_shape(&input)?;
        let (concat, merged) = match &self.merge {
            None => (None, branch.clone()),
            Some(m) => {
                let mut c = branch.clone();
                c[1] *= 3;
                let merged = m.output_shape(&c)?;
                (Some(c), merged)
            }
        };
        let logits = self.head.output_shape(&merged)?;
        Ok(ShapeAudit {
            branch,
            concat,
            merged,
            logits,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeAudit {
    pub branch: Vec<usize>,
    pub concat: Option<Vec<usize>>,
    pub merged: Vec<usize>,
    pub logits: Vec<usize>,
}

pub fn build_multiview_net<T: Scalar>(
    config: MultiViewConfig,
    seed: u64,
) -> Result<MultiViewNetwork<T>> {
    MultiViewNetwork::build(config, seed)
}

/// Descriptor grid `(p, q, layer)` as a `[k, N, N]` channel-major block.
pub fn descriptor_channels<T: Scalar>(grid: &[f32], n: usize, k: usize, out: &mut Vec<T>) {
    for layer in 0..k {
        for cell in 0..n * n {
            out.push(T::from_f64(grid[cell * k + layer] as f64));
        }
    }
}

/// Stacks bundles into the three `[B, k, N, N]` view batches.
pub fn bundles_to_views<T: Scalar>(bundles: &[&MultiViewBundle]) -> Result<[Tensor<T>; 3]> {
    let first = bundles
        .first()
        .ok_or_else(|| Error::ShapeMismatch("empty batch".into()))?;
    let (n, k) = (first.n(), first.k());
    let mut data: [Vec<T>; 3] =
        std::array::from_fn(|_| Vec::with_capacity(bundles.len() * k * n * n));
    for b in bundles {
        if b.n() != n || b.k() != k {
            return Err(Error::ShapeMismatch("bundles in a batch differ in N or k".into()));
        }
        for (v, out) in b.views().iter().zip(data.iter_mut()) {
            descriptor_channels(v.grid(), n, k, out);
        }
    }
    let shape = vec![bundles.len(), k, n, n];
    let [x, y, z] = data;
    Ok([
        Tensor::new(shape.clone(), x)?,
        Tensor::new(shape.clone(), y)?,
        Tensor::new(shape, z)?,
    ])
}

/// Class logits for one bundle (evaluation mode).
pub fn forward_multiview<T: Scalar>(
    net: &mut MultiViewNetwork<T>,
    bundle: &MultiViewBundle,
) -> Result<Vec<T>> {
    if bundle.n() != net.config.n || bundle.k() != net.config.k {
        return Err(Error::ShapeMismatch(format!(
            "bundle is {}x{}x{}, network expects {}x{}x{}",
            bundle.n(),
            bundle.n(),
            bundle.k(),
            net.config.n,
            net.config.n,
            net.config.k
        )));
    }
    let views = bundles_to_views(&[bundle])?;
    let (logits, _) = net.forward(&views, Mode::Eval)?;
    Ok(logits.into_data())
}

/// Cross-entropy of a multi-view network over three input batches, for
/// gradient checking.
pub struct MultiViewObjective<'a> {
    pub net: &'a mut MultiViewNetwork<f64>,
    pub labels: Vec<usize>,
    pub mode: Mode,
}

impl Objective for MultiViewObjective<'_> {
    fn evaluate(&mut self, inputs: &[Tensor<f64>]) -> Result<(Vec<f64>, Vec<u32>)> {
        let views = three(inputs)?;
        let (logits, cache) = self.net.forward(&views, self.mode)?;
        let terms = cross_entropy_terms(&logits, &self.labels)?;
        let mut pattern = Vec::new();
        cache.pattern(&mut pattern);
        Ok((terms, pattern))
    }

    fn gradients(&mut self, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
        self.net.zero_grad();
        let views = three(inputs)?;
        let (logits, cache) = self.net.forward(&views, self.mode)?;
        let (_, grad) = softmax_cross_entropy(&logits, &self.labels)?;
        Ok(self.net.backward(&cache, &grad)?.into())
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
        self.net.params_mut()
    }
}

fn three(inputs: &[Tensor<f64>]) -> Result<[Tensor<f64>; 3]> {
    match inputs {
        [a, b, c] => Ok([a.clone(), b.clone(), c.clone()]),
        _ => Err(Error::ShapeMismatch(format!(
            "expected 3 view inputs, got {}",
            inputs.len()
        ))),
    }
}

/// Checks one merge operation in isolation: `sum(projection * merge(B1,
/// B2, B3))` with the three activations as inputs and, for the
/// concatenation merge, the convolution as parameters.
pub struct MergeObjective {
    pub conv: Option<Conv2d<f64>>,
    pub projection: Tensor<f64>,
}

impl Objective for MergeObjective {
    fn evaluate(&mut self, inputs: &[Tensor<f64>]) -> Result<(Vec<f64>, Vec<u32>)> {
        let [a, b, c] = three(inputs)?;
        let (out, pattern) = match &self.conv {
            None => {
                let (m, winners) = merge_max([&a, &b, &c])?;
                (m, winners.into_iter().map(u32::from).collect())
            }
            Some(conv) => (merge_concat_conv([&a, &b, &c], conv)?, Vec::new()),
        };
        Ok((projection_terms(&out, &self.projection)?, pattern))
    }

    fn gradients(&mut self, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
        let [a, b, c] = three(inputs)?;
        match &mut self.conv {
            None => {
                let (_, winners) = merge_max([&a, &b, &c])?;
                Ok(merge_max_backward(&self.projection, &winners)?.into())
            }
            Some(conv) => {
                conv.weight.zero_grad();
                if let Some(bias) = &mut conv.bias {
                    bias.zero_grad();
                }
                let depth = a.shape()[1];
                let (_, cache) = conv.forward(&concat_channels([&a, &b, &c])?)?;
                let g = conv.backward(&cache, &self.projection)?;
                Ok(split_channels(&g, depth)?.into())
            }
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
        match &mut self.conv {
            None => Vec::new(),
            Some(conv) => std::iter::once(&mut conv.weight)
                .chain(conv.bias.as_mut())
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::finite_diff_check;
    use crate::nn::optim::{Sgd, SgdConfig};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn max_merge_passes_dominant_branch() {
        let mut r = rng(1);
        let b1 = Tensor::<f64>::randn(&[2, 3, 4, 4], 1.0, &mut r);
        let low = Tensor::full(&[2, 3, 4, 4], -1e6);
        let (out, winners) = merge_max([&b1, &low, &low]).unwrap();
        assert_eq!(out, b1);
        assert!(winners.iter().all(|&w| w == 0));
    }

    #[test]
    fn max_merge_is_permutation_invariant() {
        let mut r = rng(2);
        let t: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::randn(&[1, 2, 3, 3], 1.0, &mut r)).collect();
        let (base, _) = merge_max([&t[0], &t[1], &t[2]]).unwrap();
        for perm in [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
            let (o, _) = merge_max([&t[perm[0]], &t[perm[1]], &t[perm[2]]]).unwrap();
            assert_eq!(o, base);
        }
    }

    #[test]
    fn max_merge_tie_goes_to_first_branch() {
        let t = Tensor::<f64>::full(&[1, 1, 1, 2], 3.0);
        let (_, winners) = merge_max([&t, &t, &t]).unwrap();
        let g = merge_max_backward(&Tensor::full(&[1, 1, 1, 2], 1.0), &winners).unwrap();
        assert_eq!(g[0].data(), &[1.0, 1.0]);
        assert_eq!(g[1].data(), &[0.0, 0.0]);
    }

    #[test]
    fn merge_shape_mismatch() {
        let a = Tensor::<f64>::zeros(&[1, 2, 3, 3]);
        let b = Tensor::<f64>::zeros(&[1, 2, 3, 4]);
        assert!(matches!(merge_max([&a, &a, &b]), Err(Error::ShapeMismatch(_))));
        assert!(concat_channels([&a, &b, &a]).is_err());
    }

    #[test]
    fn concat_split_round_trip() {
        let mut r = rng(3);
        let t: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::randn(&[2, 3, 2, 2], 1.0, &mut r)).collect();
        let cat = concat_channels([&t[0], &t[1], &t[2]]).unwrap();
        assert_eq!(cat.shape(), &[2, 9, 2, 2]);
        let back = split_channels(&cat, 3).unwrap();
        for i in 0..3 {
            assert_eq!(back[i], t[i]);
        }
    }

    #[test]
    fn zero_merge_conv_gives_zero() {
        let mut r = rng(4);
        let d = 3;
        let conv = Conv2d::from_params(
            Tensor::zeros(&[d, 3 * d, 3, 3]),
            Tensor::zeros(&[d]),
            1,
            1,
        )
        .unwrap();
        let t: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::randn(&[1, d, 4, 4], 1.0, &mut r)).collect();
        let out = merge_concat_conv([&t[0], &t[1], &t[2]], &conv).unwrap();
        assert_eq!(out.shape(), &[1, d, 4, 4]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn concat_merge_rejects_bad_conv() {
        let mut r = rng(5);
        let conv = Conv2d::<f64>::new(6, 2, (3, 3), 1, 0, &mut r);
        let t = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        // padding 0 shrinks the volume
        assert!(merge_concat_conv([&t, &t, &t], &conv).is_err());
        let conv = Conv2d::<f64>::new(6, 3, (3, 3), 1, 1, &mut r);
        assert!(merge_concat_conv([&t, &t, &t], &conv).is_err());
    }

    #[test]
    fn expansion_rule() {
        let w3 = Tensor::new(vec![1, 3, 1, 1], vec![1.0f64, 2.0, 3.0]).unwrap();
        let w5 = expand_input_weights(&w3, 5).unwrap();
        assert_eq!(w5.shape(), &[1, 5, 1, 1]);
        assert_eq!(w5.data(), &[1.0, 2.0, 2.0, 2.0, 3.0]);
        let same = expand_input_weights(&w3, 3).unwrap();
        assert!(same.bitwise_eq(&w3));
        let flat = Tensor::new(vec![1, 3, 1, 1], vec![0.7f64; 3]).unwrap();
        assert!(expand_input_weights(&flat, 5)
            .unwrap()
            .data()
            .iter()
            .all(|&v| (v - 0.7).abs() < 1e-15));
        assert!(matches!(
            expand_input_weights(&w3, 4),
            Err(Error::UnsupportedK(4))
        ));
    }

    fn small_config(variant: MergeVariant) -> MultiViewConfig {
        MultiViewConfig {
            width: 4,
            hidden: 8,
            blocks: 2,
            ..MultiViewConfig::new(variant, 3, 8, 2)
        }
    }

    #[test]
    fn shared_branches_stay_identical() {
        let mut net = MultiViewNetwork::<f64>::build(small_config(MergeVariant::SharedMax), 9).unwrap();
        let mut r = rng(6);
        let views: [Tensor<f64>; 3] = std::array::from_fn(|_| Tensor::randn(&[2, 2, 8, 8], 1.0, &mut r));
        let (logits, cache) = net.forward(&views, Mode::Train).unwrap();
        let (_, g) = softmax_cross_entropy(&logits, &[0, 2]).unwrap();
        net.zero_grad();
        net.backward(&cache, &g).unwrap();
        Sgd::new()
            .step(net.params_mut(), &SgdConfig::default(), 0)
            .unwrap();
        assert!(std::ptr::eq(net.branch(0), net.branch(2)));
        assert_eq!(net.sequences().len(), 2);
    }

    #[test]
    fn independent_branches_diverge() {
        let mut net =
            MultiViewNetwork::<f64>::build(small_config(MergeVariant::IndependentMax), 9).unwrap();
        assert_ne!(net.branch(0), net.branch(1));
        let mut r = rng(7);
        let views: [Tensor<f64>; 3] = std::array::from_fn(|i| {
            Tensor::randn(&[2, 2, 8, 8], 1.0 + i as f64, &mut r)
        });
        let (logits, cache) = net.forward(&views, Mode::Train).unwrap();
        let (_, g) = softmax_cross_entropy(&logits, &[1, 0]).unwrap();
        net.zero_grad();
        net.backward(&cache, &g).unwrap();
        Sgd::new()
            .step(net.params_mut(), &SgdConfig::default(), 0)
            .unwrap();
        assert_ne!(net.branch(0), net.branch(1));
        assert_ne!(net.branch(1), net.branch(2));
    }

    #[test]
    fn shape_audit_of_concat_design() {
        let config = MultiViewConfig::new(MergeVariant::IndependentConcat, 4, 32, 5);
        let net = MultiViewNetwork::<f32>::build(config, 0).unwrap();
        let audit = net.shape_audit().unwrap();
        assert_eq!(audit.branch, vec![1, 32, 4, 4]);
        assert_eq!(audit.concat, Some(vec![1, 96, 4, 4]));
        assert_eq!(audit.merged, vec![1, 32, 4, 4]);
        assert_eq!(audit.logits, vec![1, 4]);
    }

    #[test]
    fn config_validation() {
        let mut c = MultiViewConfig::new(MergeVariant::SharedMax, 4, 30, 5);
        assert!(c.validate().is_err());
        c.n = 32;
        assert!(c.validate().is_ok());
        c.k = 4;
        c.expand_init = true;
        assert!(matches!(c.validate(), Err(Error::UnsupportedK(4))));
    }

    #[test]
    fn expand_init_sets_mean_channels() {
        let config = MultiViewConfig {
            expand_init: true,
            ..small_config(MergeVariant::IndependentConcat)
        };
        let config = MultiViewConfig { k: 5, ..config };
        let net = MultiViewNetwork::<f64>::build(config, 1).unwrap();
        let Some(Layer::Conv2d(conv)) = net.branch(0).layers.first() else {
            panic!("first layer is a convolution");
        };
        let w = conv.weight.value.data();
        for f in 0..4 {
            for j in 0..9 {
                let at = |c: usize| w[(f * 5 + c) * 9 + j];
                assert_eq!(at(1), at(3));
                assert!((at(1) - (at(0) + at(2) + at(4)) / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn end_to_end_gradients() {
        for variant in MergeVariant::ALL {
            let mut net = MultiViewNetwork::<f64>::build(small_config(variant), 11).unwrap();
            let mut r = rng(12);
            let mut views: Vec<Tensor<f64>> =
                (0..3).map(|_| Tensor::randn(&[2, 2, 8, 8], 1.0, &mut r)).collect();
            let mut obj = MultiViewObjective {
                net: &mut net,
                labels: vec![2, 0],
                mode: Mode::Train,
            };
            let report = finite_diff_check(&mut obj, &mut views, 1e-5).unwrap();
            assert!(report.max_rel_error < 1e-5, "{variant:?}: {report:?}");
        }
    }

    #[test]
    fn empty_bundle_gives_finite_logits() {
        use crate::descriptor::{MlhDescriptor, ViewDirection};
        let views = ViewDirection::CANONICAL.map(|v| MlhDescriptor::empty(8, 2, v));
        let bundle = MultiViewBundle::new(views).unwrap();
        for variant in MergeVariant::ALL {
            let mut net = MultiViewNetwork::<f32>::build(small_config(variant), 3).unwrap();
            let logits = forward_multiview(&mut net, &bundle).unwrap();
            assert_eq!(logits.len(), 3);
            assert!(logits.iter().all(|v| v.is_finite()));
        }
    }
}
