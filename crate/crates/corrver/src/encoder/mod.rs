//! The 4D correlation encoder: center-pivot convolution blocks that
//! progressively compress a cross-scale correlation volume into a binary
//! match logit, plus the weight container shared with the scale-wise
//! reducers it is trained alongside.

pub mod conv4d;
mod io;

pub use conv4d::{
    conv4d_center_pivot, conv4d_center_pivot_backward, conv4d_naive, CenterPivotKernel,
};
pub use io::{load_weights, save_weights};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::correlation::{CrossScaleCorrelation, ReducerWeights};
use crate::error::{Error, Result};
use crate::ops::{
    global_avg_pool, global_avg_pool_backward, group_norm_backward, group_norm_forward,
    GroupNormCtx,
};
use crate::tensor::Tensor;

/// Epsilon inside every group normalization of the encoder.
pub const NORM_EPS: f32 = 1e-5;

/// Tap extent of every 4D convolution.
const TAP: usize = 3;

/// Architecture of the verifier: reducers feeding `num_blocks` 4D conv
/// blocks, then global average pooling and a 2-layer MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Pyramid depth S; the correlation volume has S*S channels.
    pub num_scales: usize,
    /// Channels of the backbone feature maps entering the reducers.
    pub in_channels: usize,
    /// Channels each reducer emits (the correlation feature width).
    pub reduced_channels: usize,
    /// Output channels of each 4D conv block.
    pub block_channel_plan: Vec<usize>,
    /// Convolutions per block; the last conv of every non-final block runs
    /// at stride 2 on both image sides.
    pub convs_per_block: usize,
    /// Hidden width of the MLP classifier.
    pub mlp_hidden: usize,
    /// Groups used by each group normalization.
    pub norm_groups: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_scales: 3,
            in_channels: 1024,
            reduced_channels: 256,
            block_channel_plan: vec![16, 32, 64, 128],
            convs_per_block: 2,
            mlp_hidden: 128,
            norm_groups: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_scales == 0 || self.in_channels == 0 || self.reduced_channels == 0 {
            return Err(Error::InvalidArgument(
                "encoder scales and channel counts must be positive".into(),
            ));
        }
        if self.block_channel_plan.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "encoder needs at least 2 blocks, got {}",
                self.block_channel_plan.len()
            )));
        }
        if self.convs_per_block == 0 || self.mlp_hidden == 0 || self.norm_groups == 0 {
            return Err(Error::InvalidArgument(
                "convs per block, MLP width, and norm groups must be positive".into(),
            ));
        }
        for &w in &self.block_channel_plan {
            if w == 0 {
                return Err(Error::InvalidArgument("block widths must be positive".into()));
            }
            if w % self.norm_groups != 0 {
                return Err(Error::InvalidArgument(format!(
                    "block width {} is not divisible by {} norm groups",
                    w, self.norm_groups
                )));
            }
        }
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        self.block_channel_plan.len()
    }

    /// Correlation volume channels seen by the first block.
    pub fn volume_channels(&self) -> usize {
        self.num_scales * self.num_scales
    }
}

/// One conv unit inside a block: center-pivot conv, group norm, ReLU.
#[derive(Debug, Clone)]
pub struct ConvUnit {
    pub kernel: CenterPivotKernel,
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// All trainable tensors: scale-wise reducers, the 4D conv blocks, and the
/// MLP head. Tensors are visited in a fixed order by [`EncoderWeights::for_each`],
/// which the optimizer, the gradient container, and the weights file all
/// share.
#[derive(Debug, Clone)]
pub struct EncoderWeights {
    pub config: EncoderConfig,
    pub reducers: ReducerWeights,
    pub blocks: Vec<Vec<ConvUnit>>,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

/// The two raw classifier outputs for a pair: index 0 scores "different
/// landmark", index 1 scores "same landmark".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLogit {
    pub z0: f32,
    pub z1: f32,
}

/// Match probability under the binary softmax, computed with max
/// subtraction; strictly inside (0, 1) for finite logits.
pub fn similarity_from_logit(z: &PairLogit) -> f32 {
    let m = z.z0.max(z.z1);
    let e0 = (z.z0 - m).exp();
    let e1 = (z.z1 - m).exp();
    e1 / (e0 + e1)
}

/// Initializes encoder weights from a seed: He-style normal fan-in scaling
/// for conv and MLP kernels, unit gamma, zero beta and biases.
pub fn init_encoder(config: &EncoderConfig, seed: u64) -> Result<EncoderWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |shape: &[usize], std: f32| -> Tensor {
        let dist = Normal::new(0.0f32, std).expect("std is finite");
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| dist.sample(&mut rng)).collect())
            .expect("shape is valid")
    };

    let mut kernels = Vec::new();
    let mut biases = Vec::new();
    for _ in 0..config.num_scales {
        let fan_in = (config.in_channels * 9) as f32;
        kernels.push(normal(
            &[config.reduced_channels, config.in_channels, 3, 3],
            (2.0 / fan_in).sqrt(),
        ));
        biases.push(Tensor::zeros(&[config.reduced_channels])?);
    }
    let reducers = ReducerWeights::new(kernels, biases)?;

    let mut blocks = Vec::new();
    let mut c_in = config.volume_channels();
    for &c_out in &config.block_channel_plan {
        let mut units = Vec::new();
        for j in 0..config.convs_per_block {
            let ci = if j == 0 { c_in } else { c_out };
            // Both kernel slices contribute at once, so split the fan-in
            // between them.
            let fan_in = (ci * TAP * TAP * 2) as f32;
            units.push(ConvUnit {
                kernel: CenterPivotKernel::new(
                    normal(&[c_out, ci, TAP, TAP], (2.0 / fan_in).sqrt()),
                    normal(&[c_out, ci, TAP, TAP], (2.0 / fan_in).sqrt()),
                    Tensor::zeros(&[c_out])?,
                )?,
                gamma: Tensor::filled(&[c_out], 1.0)?,
                beta: Tensor::zeros(&[c_out])?,
            });
        }
        blocks.push(units);
        c_in = c_out;
    }

    let c_last = *config.block_channel_plan.last().expect("plan nonempty");
    let mlp_w1 = normal(&[config.mlp_hidden, c_last], (2.0 / c_last as f32).sqrt());
    let mlp_b1 = Tensor::zeros(&[config.mlp_hidden])?;
    let mlp_w2 = normal(&[2, config.mlp_hidden], (1.0 / config.mlp_hidden as f32).sqrt());
    let mlp_b2 = Tensor::zeros(&[2])?;
    Ok(EncoderWeights {
        config: config.clone(),
        reducers,
        blocks,
        mlp_w1,
        mlp_b1,
        mlp_w2,
        mlp_b2,
    })
}

impl EncoderWeights {
    /// Same structure with every tensor zeroed; the gradient container.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, t| t.fill(0.0));
        z
    }

    /// Visits every trainable tensor in a fixed, documented order:
    /// reducers (kernel then bias per level), blocks (query, key, bias,
    /// gamma, beta per conv), then the MLP.
    pub fn for_each(&self, mut f: impl FnMut(&str, &Tensor)) {
        for s in 0..self.reducers.kernels.len() {
            f(&format!("reducer{}.kernel", s), &self.reducers.kernels[s]);
            f(&format!("reducer{}.bias", s), &self.reducers.biases[s]);
        }
        for (b, block) in self.blocks.iter().enumerate() {
            for (j, u) in block.iter().enumerate() {
                f(&format!("block{}.conv{}.query", b, j), &u.kernel.query_side);
                f(&format!("block{}.conv{}.key", b, j), &u.kernel.key_side);
                f(&format!("block{}.conv{}.bias", b, j), &u.kernel.bias);
                f(&format!("block{}.conv{}.gamma", b, j), &u.gamma);
                f(&format!("block{}.conv{}.beta", b, j), &u.beta);
            }
        }
        f("mlp.w1", &self.mlp_w1);
        f("mlp.b1", &self.mlp_b1);
        f("mlp.w2", &self.mlp_w2);
        f("mlp.b2", &self.mlp_b2);
    }

    /// Mutable twin of [`EncoderWeights::for_each`], same order.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        for s in 0..self.reducers.kernels.len() {
            f(&format!("reducer{}.kernel", s), &mut self.reducers.kernels[s]);
            f(&format!("reducer{}.bias", s), &mut self.reducers.biases[s]);
        }
        for (b, block) in self.blocks.iter_mut().enumerate() {
            for (j, u) in block.iter_mut().enumerate() {
                f(&format!("block{}.conv{}.query", b, j), &mut u.kernel.query_side);
                f(&format!("block{}.conv{}.key", b, j), &mut u.kernel.key_side);
                f(&format!("block{}.conv{}.bias", b, j), &mut u.kernel.bias);
                f(&format!("block{}.conv{}.gamma", b, j), &mut u.gamma);
                f(&format!("block{}.conv{}.beta", b, j), &mut u.beta);
            }
        }
        f("mlp.w1", &mut self.mlp_w1);
        f("mlp.b1", &mut self.mlp_b1);
        f("mlp.w2", &mut self.mlp_w2);
        f("mlp.b2", &mut self.mlp_b2);
    }

    /// `self += scale * other`, tensor by tensor. Both sides must share a
    /// structure (same config).
    pub fn accumulate(&mut self, other: &Self, scale: f32) -> Result<()> {
        let mut others = Vec::new();
        other.for_each(|name, t| others.push((name.to_string(), t.clone())));
        let mut idx = 0;
        let mut status = Ok(());
        self.for_each_mut(|name, t| {
            if status.is_err() {
                return;
            }
            if idx >= others.len() || others[idx].0 != name {
                status = Err(Error::ShapeMismatch(format!(
                    "weight structures disagree at tensor {}",
                    name
                )));
                return;
            }
            if let Err(e) = t.add_scaled(&others[idx].1, scale) {
                status = Err(e);
            }
            idx += 1;
        });
        status
    }

    /// Largest absolute entry over all tensors; used by divergence guards.
    pub fn max_abs(&self) -> f32 {
        let mut m = 0.0f32;
        self.for_each(|_, t| {
            for &v in t.data() {
                let a = v.abs();
                if a > m {
                    m = a;
                }
            }
        });
        m
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|_, t| ok &= t.all_finite());
        ok
    }
}

/// Per-conv saved state from a traced forward pass.
struct ConvTrace {
    input: Tensor,
    ctx: GroupNormCtx,
    output: Tensor,
    stride: usize,
}

/// Everything the backward pass needs from one forward evaluation.
pub struct EncoderTrace {
    convs: Vec<ConvTrace>,
    feature_shape: Vec<usize>,
    pooled: Tensor,
    hidden: Tensor,
}

fn matvec(w: &Tensor, x: &Tensor, b: &Tensor) -> Tensor {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut acc = b.data()[r];
        let row = &w.data()[r * cols..(r + 1) * cols];
        for i in 0..cols {
            acc += row[i] * x.data()[i];
        }
        out.push(acc);
    }
    Tensor::new(&[rows], out).expect("matvec shape is valid")
}

fn forward_impl(
    volume: &Tensor,
    w: &EncoderWeights,
    want_trace: bool,
) -> Result<(PairLogit, Option<EncoderTrace>)> {
    let cfg = &w.config;
    if volume.rank() != 5 {
        return Err(Error::ShapeMismatch(format!(
            "correlation volume must be rank 5, got {:?}",
            volume.shape()
        )));
    }
    if volume.shape()[0] != cfg.volume_channels() {
        return Err(Error::ChannelMismatch {
            expected: cfg.volume_channels(),
            got: volume.shape()[0],
        });
    }
    let mut convs = Vec::new();
    let mut x = volume.clone();
    for (b, block) in w.blocks.iter().enumerate() {
        for (j, unit) in block.iter().enumerate() {
            let last_in_block = j + 1 == cfg.convs_per_block;
            let stride = if last_in_block && b + 1 != cfg.num_blocks() { 2 } else { 1 };
            if stride == 2 && x.shape()[1..].iter().any(|&e| e < 2) {
                return Err(Error::EncoderUnderflow(format!(
                    "block {} cannot halve extents {:?}",
                    b,
                    &x.shape()[1..]
                )));
            }
            let y = conv4d_center_pivot(&x, &unit.kernel, stride, stride)?;
            let (mut y, ctx) = group_norm_forward(&y, &unit.gamma, &unit.beta, cfg.norm_groups, NORM_EPS)?;
            for v in y.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            if want_trace {
                convs.push(ConvTrace { input: x, ctx, output: y.clone(), stride });
            }
            x = y;
        }
    }
    let pooled = global_avg_pool(&x)?;
    let mut hidden = matvec(&w.mlp_w1, &pooled, &w.mlp_b1);
    for v in hidden.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let z = matvec(&w.mlp_w2, &hidden, &w.mlp_b2);
    let logit = PairLogit { z0: z.data()[0], z1: z.data()[1] };
    if !logit.z0.is_finite() || !logit.z1.is_finite() {
        return Err(Error::NonFinite("encoder logits".into()));
    }
    let trace = want_trace.then(|| EncoderTrace {
        convs,
        feature_shape: x.shape().to_vec(),
        pooled,
        hidden,
    });
    Ok((logit, trace))
}

/// Scores one correlation volume. Pure: identical inputs and weights give
/// bitwise-identical logits.
pub fn encoder_forward(c: &CrossScaleCorrelation, w: &EncoderWeights) -> Result<PairLogit> {
    Ok(forward_impl(&c.volume, w, false)?.0)
}

/// Forward pass that also returns the saved state for [`encoder_backward`].
pub fn encoder_forward_trace(
    c: &CrossScaleCorrelation,
    w: &EncoderWeights,
) -> Result<(PairLogit, EncoderTrace)> {
    let (logit, trace) = forward_impl(&c.volume, w, true)?;
    Ok((logit, trace.expect("trace was requested")))
}

/// Backpropagates a logit-space gradient `(dz0, dz1)` through the encoder.
/// Returns gradients in weight structure (reducer entries stay zero; the
/// caller chains them through the correlation assembly) plus the gradient
/// with respect to the input volume.
pub fn encoder_backward(
    w: &EncoderWeights,
    trace: &EncoderTrace,
    dz: (f32, f32),
) -> Result<(EncoderWeights, Tensor)> {
    let cfg = &w.config;
    let mut grads = w.zeros_like();
    let dz = Tensor::new(&[2], vec![dz.0, dz.1])?;

    // MLP head.
    let hidden_n = cfg.mlp_hidden;
    for o in 0..2 {
        for i in 0..hidden_n {
            grads.mlp_w2.data_mut()[o * hidden_n + i] = dz.data()[o] * trace.hidden.data()[i];
        }
        grads.mlp_b2.data_mut()[o] = dz.data()[o];
    }
    let mut dh = vec![0.0f32; hidden_n];
    for i in 0..hidden_n {
        let mut acc = 0.0f32;
        for o in 0..2 {
            acc += w.mlp_w2.data()[o * hidden_n + i] * dz.data()[o];
        }
        if trace.hidden.data()[i] <= 0.0 {
            acc = 0.0;
        }
        dh[i] = acc;
    }
    let c_last = trace.pooled.len();
    for i in 0..hidden_n {
        for p in 0..c_last {
            grads.mlp_w1.data_mut()[i * c_last + p] = dh[i] * trace.pooled.data()[p];
        }
        grads.mlp_b1.data_mut()[i] = dh[i];
    }
    let mut dpooled = Tensor::zeros(&[c_last])?;
    for p in 0..c_last {
        let mut acc = 0.0f32;
        for i in 0..hidden_n {
            acc += w.mlp_w1.data()[i * c_last + p] * dh[i];
        }
        dpooled.data_mut()[p] = acc;
    }

    let mut dx = global_avg_pool_backward(&trace.feature_shape, &dpooled)?;
    // Blocks in reverse; trace entries are in forward order.
    let mut t = trace.convs.len();
    for (b, block) in w.blocks.iter().enumerate().rev() {
        for (j, unit) in block.iter().enumerate().rev() {
            t -= 1;
            let tr = &trace.convs[t];
            debug_assert_eq!(
                tr.stride,
                if j + 1 == cfg.convs_per_block && b + 1 != cfg.num_blocks() { 2 } else { 1 }
            );
            for (g, &o) in dx.data_mut().iter_mut().zip(tr.output.data()) {
                if o <= 0.0 {
                    *g = 0.0;
                }
            }
            let (dy, dgamma, dbeta) = group_norm_backward(&tr.ctx, &unit.gamma, &dx)?;
            let (dinput, dkernel) =
                conv4d_center_pivot_backward(&tr.input, &unit.kernel, &dy, tr.stride, tr.stride)?;
            grads.blocks[b][j].kernel = dkernel;
            grads.blocks[b][j].gamma = dgamma;
            grads.blocks[b][j].beta = dbeta;
            dx = dinput;
        }
    }
    Ok((grads, dx))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    pub(crate) fn toy_config() -> EncoderConfig {
        EncoderConfig {
            num_scales: 2,
            in_channels: 3,
            reduced_channels: 4,
            block_channel_plan: vec![4, 6],
            convs_per_block: 2,
            mlp_hidden: 5,
            norm_groups: 2,
        }
    }

    fn random_volume(cfg: &EncoderConfig, h: usize, w: usize, seed: u64) -> CrossScaleCorrelation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [cfg.volume_channels(), h, w, h, w];
        let n: usize = shape.iter().product();
        CrossScaleCorrelation {
            volume: Tensor::new(&shape, (0..n).map(|_| rng.random_range(0.0..1.0f32)).collect())
                .unwrap(),
            query_id: None,
            key_id: None,
        }
    }

    #[test]
    fn config_validation_catches_bad_plans() {
        let mut cfg = toy_config();
        cfg.block_channel_plan = vec![4];
        assert!(cfg.validate().is_err());
        let mut cfg = toy_config();
        cfg.block_channel_plan = vec![4, 5]; // 5 not divisible by 2 groups
        assert!(cfg.validate().is_err());
        let mut cfg = toy_config();
        cfg.norm_groups = 0;
        assert!(cfg.validate().is_err());
        assert!(EncoderConfig::default().validate().is_ok());
    }

    #[test]
    fn forward_is_deterministic_and_finite() {
        let cfg = toy_config();
        let w = init_encoder(&cfg, 7).unwrap();
        let c = random_volume(&cfg, 4, 4, 1);
        let a = encoder_forward(&c, &w).unwrap();
        let b = encoder_forward(&c, &w).unwrap();
        assert_eq!(a, b);
        assert!(a.z0.is_finite() && a.z1.is_finite());
        let s = similarity_from_logit(&a);
        assert!(s > 0.0 && s < 1.0);
    }

    /// Fills every weight tensor with a small arithmetic sequence so the
    /// same weights can be rebuilt outside this crate without sharing an
    /// RNG: tensor number `idx` (in visit order) gets
    /// `data[i] = ((37 i + 7 idx + 3) mod 101 - 50) / 64`.
    fn fill_arithmetic(w: &mut EncoderWeights) {
        let mut idx = 0usize;
        w.for_each_mut(|_, t| {
            let off = idx * 7 + 3;
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = ((i * 37 + off) % 101) as f32 - 50.0;
                *v /= 64.0;
            }
            idx += 1;
        });
    }

    #[test]
    fn zero_volume_logits_match_pinned_fixture() {
        let cfg = toy_config();
        let mut w = init_encoder(&cfg, 0).unwrap();
        fill_arithmetic(&mut w);
        let c = CrossScaleCorrelation {
            volume: Tensor::zeros(&[cfg.volume_channels(), 4, 4, 4, 4]).unwrap(),
            query_id: None,
            key_id: None,
        };
        let z = encoder_forward(&c, &w).unwrap();
        // Pinned against an out-of-repo scripted forward pass over the same
        // arithmetic weights.
        assert_relative_eq!(z.z0, 1.0274456, epsilon = 1e-4);
        assert_relative_eq!(z.z1, -0.29315528, epsilon = 1e-4);
    }

    #[test]
    fn similarity_matches_binary_softmax() {
        assert_relative_eq!(similarity_from_logit(&PairLogit { z0: 0.0, z1: 0.0 }), 0.5);
        assert_relative_eq!(
            similarity_from_logit(&PairLogit { z0: 1.0, z1: 3.0 }),
            0.880797,
            epsilon = 1e-6
        );
        // Monotone in the logit gap, saturating toward 1.
        let mut prev = 0.0;
        for gap in [-4.0f32, -1.0, 0.0, 0.5, 2.0, 10.0, 80.0] {
            let s = similarity_from_logit(&PairLogit { z0: -gap / 2.0, z1: gap / 2.0 });
            assert!(s > prev);
            prev = s;
        }
        assert!(prev <= 1.0 && prev > 0.9999);
    }

    #[test]
    fn too_shallow_input_underflows() {
        let cfg = EncoderConfig {
            block_channel_plan: vec![4, 4, 4, 4],
            ..toy_config()
        };
        let w = init_encoder(&cfg, 3).unwrap();
        // 4x4 halves to 2, then 1; the third block cannot stride again.
        let c = random_volume(&cfg, 4, 4, 2);
        let err = encoder_forward(&c, &w).unwrap_err();
        assert!(
            err.to_string().contains("input too small for encoder depth"),
            "{}",
            err
        );
    }

    #[test]
    fn key_transposed_volume_with_swapped_kernels_matches() {
        let cfg = toy_config();
        let w = init_encoder(&cfg, 11).unwrap();
        let c = random_volume(&cfg, 4, 4, 3);
        let z = encoder_forward(&c, &w).unwrap();

        // Transpose the volume: swap the scale pair and both spatial pairs.
        let s = cfg.num_scales;
        let (h, wd) = (4usize, 4usize);
        let mut tv = Tensor::zeros(c.volume.shape()).unwrap();
        for sq in 0..s {
            for sk in 0..s {
                for a in 0..h {
                    for b in 0..wd {
                        for e in 0..h {
                            for f in 0..wd {
                                let v = c.volume.at(&[sq * s + sk, a, b, e, f]);
                                tv.set(&[sk * s + sq, e, f, a, b], v);
                            }
                        }
                    }
                }
            }
        }
        // Swap every kernel's two slices, and permute the first conv's input
        // channels to match the transposed scale axis.
        let mut w2 = w.clone();
        for block in &mut w2.blocks {
            for unit in block.iter_mut() {
                std::mem::swap(&mut unit.kernel.query_side, &mut unit.kernel.key_side);
            }
        }
        let first = &mut w2.blocks[0][0].kernel;
        for side in [&mut first.query_side, &mut first.key_side] {
            let orig = side.clone();
            for o in 0..side.shape()[0] {
                for sq in 0..s {
                    for sk in 0..s {
                        for u in 0..3 {
                            for v in 0..3 {
                                let val = orig.at(&[o, sq * s + sk, u, v]);
                                side.set(&[o, sk * s + sq, u, v], val);
                            }
                        }
                    }
                }
            }
        }
        let zt = encoder_forward(
            &CrossScaleCorrelation { volume: tv, query_id: None, key_id: None },
            &w2,
        )
        .unwrap();
        assert_relative_eq!(z.z0, zt.z0, epsilon = 1e-4);
        assert_relative_eq!(z.z1, zt.z1, epsilon = 1e-4);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = toy_config();
        let w = init_encoder(&cfg, 19).unwrap();
        let c = random_volume(&cfg, 4, 4, 4);
        let (_, trace) = encoder_forward_trace(&c, &w).unwrap();
        let (grads, dvol) = encoder_backward(&w, &trace, (0.3, -1.1)).unwrap();

        let loss_for = |weights: &EncoderWeights, vol: &Tensor| -> Result<f64> {
            let cc = CrossScaleCorrelation {
                volume: vol.clone(),
                query_id: None,
                key_id: None,
            };
            let z = encoder_forward(&cc, weights)?;
            Ok(0.3 * z.z0 as f64 - 1.1 * z.z1 as f64)
        };

        // Volume gradient.
        let rep = crate::ops::grad_check(
            |t: &Tensor| loss_for(&w, t),
            &c.volume,
            &dvol,
            1e-3,
        )
        .unwrap();
        assert!(
            rep.max_rel_diff < 1e-2,
            "volume rel {} abs {}",
            rep.max_rel_diff,
            rep.max_abs_diff
        );

        // A few parameter tensors across the depth of the net.
        for name in [
            "block0.conv0.query",
            "block0.conv1.key",
            "block1.conv0.gamma",
            "block1.conv1.bias",
            "mlp.w1",
            "mlp.b2",
        ] {
            let mut analytic = None;
            grads.for_each(|n, t| {
                if n == name {
                    analytic = Some(t.clone());
                }
            });
            let analytic = analytic.unwrap();
            let mut base = None;
            w.for_each(|n, t| {
                if n == name {
                    base = Some(t.clone());
                }
            });
            let base = base.unwrap();
            let f = |t: &Tensor| -> Result<f64> {
                let mut w2 = w.clone();
                w2.for_each_mut(|n, slot| {
                    if n == name {
                        *slot = t.clone();
                    }
                });
                loss_for(&w2, &c.volume)
            };
            let rep = crate::ops::grad_check(f, &base, &analytic, 1e-3).unwrap();
            assert!(rep.max_rel_diff < 1e-2, "{} rel {}", name, rep.max_rel_diff);
        }
    }

    #[test]
    fn accumulate_adds_tensorwise() {
        let cfg = toy_config();
        let w = init_encoder(&cfg, 23).unwrap();
        let mut sum = w.zeros_like();
        sum.accumulate(&w, 2.0).unwrap();
        let mut names = Vec::new();
        w.for_each(|n, t| names.push((n.to_string(), t.clone())));
        let mut idx = 0;
        sum.for_each(|n, t| {
            assert_eq!(n, names[idx].0);
            for (a, b) in t.data().iter().zip(names[idx].1.data()) {
                assert_relative_eq!(*a, 2.0 * b);
            }
            idx += 1;
        });
    }
}
