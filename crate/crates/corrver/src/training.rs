//! Desk-scale training loop for the re-ranking encoder: curriculum
//! schedules, hard-negative mining over global descriptors, Hide-and-Seek
//! masking, SGD with momentum under cosine learning-rate decay, and a
//! synthetic planted-pattern dataset that stands in for a real corpus.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::correlation::{
    assemble_cross_scale, assemble_cross_scale_backward, build_pyramid, reduce_scalewise,
    reduce_scalewise_backward, FeatureMap, FeaturePyramid,
};
use crate::encoder::{
    encoder_backward, encoder_forward, encoder_forward_trace, init_encoder, similarity_from_logit,
    EncoderConfig, EncoderWeights, PairLogit,
};
use crate::error::{Error, Result};
use crate::objectives::rerank_total_loss;
use crate::ops::{gem_pool, l2_normalize};
use crate::tensor::Tensor;

/// Mined hard negatives kept per anchor.
pub const HARD_NEGATIVE_K: usize = 10;
/// Default SGD momentum.
pub const DEFAULT_SGD_MOMENTUM: f32 = 0.9;

/// Linear curricula for the hard-negative rate and the Hide-and-Seek
/// masking probability.
#[derive(Debug, Clone, Copy)]
pub struct CurriculumSchedule {
    pub r_h_start: f32,
    pub r_h_end: f32,
    pub p_has_start: f32,
    pub p_has_end: f32,
    pub total_steps: usize,
}

impl CurriculumSchedule {
    /// The standard ramps: hard-negative rate 0.2 -> 1.0, masking
    /// probability 0.0 -> 0.2.
    pub fn new(total_steps: usize) -> Self {
        Self {
            r_h_start: 0.2,
            r_h_end: 1.0,
            p_has_start: 0.0,
            p_has_end: 0.2,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for v in [self.r_h_start, self.r_h_end, self.p_has_start, self.p_has_end] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!(
                    "curriculum endpoints must lie in [0, 1], got {v}"
                )));
            }
        }
        if self.total_steps == 0 {
            return Err(Error::InvalidArgument("curriculum needs at least one step".into()));
        }
        Ok(())
    }
}

/// Interpolated `(r_h, p_has)` at a step; out-of-range steps clamp with a
/// warning rather than failing mid-run.
pub fn schedule_at(sch: &CurriculumSchedule, step: usize) -> (f32, f32) {
    let step = if step > sch.total_steps {
        warn!("schedule queried at step {step} past {}; clamping", sch.total_steps);
        sch.total_steps
    } else {
        step
    };
    let t = step as f32 / sch.total_steps as f32;
    (
        sch.r_h_start * (1.0 - t) + sch.r_h_end * t,
        sch.p_has_start * (1.0 - t) + sch.p_has_end * t,
    )
}

/// Optimizer hyperparameters for the toy loop.
#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub seed: u64,
    pub steps: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("need at least one training step".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Per-anchor lists of the hardest negative ids, by global similarity.
#[derive(Debug, Clone, Default)]
pub struct HardNegativeIndex {
    lists: BTreeMap<u64, Vec<u64>>,
}

impl HardNegativeIndex {
    pub fn negatives_of(&self, id: u64) -> Option<&[u64]> {
        self.lists.get(&id).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }
}

/// Ranks, for every sample, all different-label samples by descending
/// global-descriptor cosine (ties broken by ascending id) and keeps the
/// top [`HARD_NEGATIVE_K`].
pub fn mine_hard_negatives(descriptors: &[(u64, usize, Tensor)]) -> Result<HardNegativeIndex> {
    let mut lists = BTreeMap::new();
    for (id, label, d) in descriptors {
        let mut scored: Vec<(f32, u64)> = Vec::new();
        for (oid, olabel, od) in descriptors {
            if olabel != label {
                scored.push((d.dot(od)?, *oid));
            }
        }
        if scored.is_empty() {
            return Err(Error::InvalidArgument(format!("sample {id} has no negatives to mine")));
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        scored.truncate(HARD_NEGATIVE_K);
        lists.insert(*id, scored.into_iter().map(|(_, oid)| oid).collect());
    }
    Ok(HardNegativeIndex { lists })
}

/// Hide-and-Seek masking: every spatial position is zeroed across all
/// channels independently with probability `p_has`. The draw order is
/// row-major over (h, w), so results are reproducible from the stream
/// state.
pub fn hide_and_seek(f: &FeatureMap, p_has: f32, rng: &mut ChaCha8Rng) -> Result<FeatureMap> {
    if !(0.0..=1.0).contains(&p_has) {
        return Err(Error::InvalidArgument(format!(
            "masking probability must lie in [0, 1], got {p_has}"
        )));
    }
    let (c, h, w) = (f.channels(), f.height(), f.width());
    let mut data = f.data().clone();
    let buf = data.data_mut();
    for y in 0..h {
        for x in 0..w {
            if rng.random::<f32>() < p_has {
                for ch in 0..c {
                    buf[(ch * h + y) * w + x] = 0.0;
                }
            }
        }
    }
    FeatureMap::new(data)
}

/// One labeled synthetic feature map.
#[derive(Debug, Clone)]
pub struct ToySample {
    pub id: u64,
    pub label: usize,
    pub map: FeatureMap,
}

/// A class-labeled synthetic corpus.
#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub samples: Vec<ToySample>,
}

impl ToyDataset {
    pub fn by_id(&self, id: u64) -> Option<&ToySample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn num_labels(&self) -> usize {
        let mut labels: Vec<usize> = self.samples.iter().map(|s| s.label).collect();
        labels.sort_unstable();
        labels.dedup();
        labels.len()
    }
}

/// Generator parameters for the planted-pattern corpus. Every class plants
/// a per-channel pattern field; samples are cyclic shifts of it with
/// amplitude jitter and additive noise. Classes come in confusable pairs:
/// the partner class copies the first `shared_channels` pattern fields
/// verbatim and spatially shuffles the rest. Shuffling preserves each
/// channel's value multiset, so pooled global descriptors of the two
/// classes coincide and only position-aware matching can tell them apart.
/// All classes draw pattern values from the same distribution, which keeps
/// spatially pooled statistics uninformative by design: nothing short of
/// locally coherent matching separates a pair.
#[derive(Debug, Clone, Copy)]
pub struct ToyGenConfig {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Maximum cyclic shift applied per sample on each axis.
    pub shift_max: usize,
    /// Relative amplitude jitter; each sample is scaled by 1 +/- this.
    pub amp_jitter: f32,
    /// Standard deviation of additive noise (clamped at zero afterwards).
    pub noise_sigma: f32,
    /// Channels whose pattern fields coincide within a class pair.
    pub shared_channels: usize,
    /// Fraction of pattern cells that are active (nonzero).
    pub pattern_density: f32,
    /// Seed for class patterns (stable across train/held-out splits).
    pub seed: u64,
    /// Seed for per-sample draws; vary it to get a fresh split.
    pub sample_seed: u64,
}

impl Default for ToyGenConfig {
    fn default() -> Self {
        Self {
            num_classes: 24,
            samples_per_class: 16,
            channels: 16,
            height: 5,
            width: 5,
            shift_max: 2,
            amp_jitter: 0.2,
            noise_sigma: 0.02,
            shared_channels: 14,
            pattern_density: 0.3,
            seed: 1,
            sample_seed: 2,
        }
    }
}

impl ToyGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "class count must be an even number >= 2, got {}",
                self.num_classes
            )));
        }
        if self.samples_per_class == 0 || self.channels == 0 {
            return Err(Error::InvalidArgument("empty class or channel plan".into()));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::InvalidArgument(
                "maps must be at least 4x4 to build pyramids".into(),
            ));
        }
        if self.shift_max >= self.height.min(self.width) {
            return Err(Error::InvalidArgument(format!(
                "shift {} exceeds the map extent",
                self.shift_max
            )));
        }
        if self.shared_channels > self.channels {
            return Err(Error::InvalidArgument(
                "cannot share more channels than exist".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.amp_jitter) || self.noise_sigma < 0.0 {
            return Err(Error::InvalidArgument("bad jitter or noise setting".into()));
        }
        if !(self.pattern_density > 0.0 && self.pattern_density <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "pattern density must be in (0, 1], got {}",
                self.pattern_density
            )));
        }
        Ok(())
    }
}

/// Rearranges a sparse field so the value multiset is preserved but the
/// nonzero cells move off their original positions wherever capacity
/// allows. A plain shuffle would leave ~density of the active cells in
/// place by chance, which keeps the rearranged channel correlated with the
/// original; steering values onto previously empty cells removes that.
fn displace(field: &[f32], rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut values: Vec<f32> = field.iter().copied().filter(|v| *v != 0.0).collect();
    values.shuffle(rng);
    let mut empty: Vec<usize> =
        (0..field.len()).filter(|i| field[*i] == 0.0).collect();
    empty.shuffle(rng);
    let mut active: Vec<usize> =
        (0..field.len()).filter(|i| field[*i] != 0.0).collect();
    active.shuffle(rng);

    let mut out = vec![0.0f32; field.len()];
    for (k, v) in values.into_iter().enumerate() {
        let cell = if k < empty.len() {
            empty[k]
        } else {
            // More values than empty cells; the excess reuses previously
            // active cells.
            active[k - empty.len()]
        };
        out[cell] = v;
    }
    out
}

/// Builds the synthetic corpus. Ids are contiguous in class-major order.
pub fn generate_toy_dataset(cfg: &ToyGenConfig) -> Result<ToyDataset> {
    cfg.validate()?;
    let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
    let cells = h * w;

    // Class patterns from the class seed; the partner class copies the
    // shared-channel fields and shuffles the rest (same values, different
    // arrangement).
    let mut crng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pairs = cfg.num_classes / 2;
    let mut patterns = vec![vec![Vec::new(); c]; cfg.num_classes];
    for p in 0..pairs {
        for ch in 0..c {
            patterns[2 * p][ch] = (0..cells)
                .map(|_| {
                    if crng.random::<f32>() < cfg.pattern_density {
                        crng.random_range(0.3..1.0f32)
                    } else {
                        0.0
                    }
                })
                .collect();
        }
        for ch in 0..c {
            patterns[2 * p + 1][ch] = if ch < cfg.shared_channels {
                patterns[2 * p][ch].clone()
            } else {
                displace(&patterns[2 * p][ch], &mut crng)
            };
        }
    }

    let mut srng = ChaCha8Rng::seed_from_u64(cfg.sample_seed);
    let noise = if cfg.noise_sigma > 0.0 {
        Some(Normal::new(0.0f32, cfg.noise_sigma).map_err(|e| {
            Error::InvalidArgument(format!("noise distribution: {e}"))
        })?)
    } else {
        None
    };

    let mut samples = Vec::with_capacity(cfg.num_classes * cfg.samples_per_class);
    for class in 0..cfg.num_classes {
        for k in 0..cfg.samples_per_class {
            let smax = cfg.shift_max as i64;
            let dy = srng.random_range(-smax..=smax);
            let dx = srng.random_range(-smax..=smax);
            let amp = srng.random_range(1.0 - cfg.amp_jitter..1.0 + cfg.amp_jitter);

            let mut data = vec![0.0f32; c * h * w];
            if let Some(n) = &noise {
                for v in data.iter_mut() {
                    *v = n.sample(&mut srng);
                }
            }
            for ch in 0..c {
                let field = &patterns[class][ch];
                for y in 0..h {
                    let sy = (y as i64 - dy).rem_euclid(h as i64) as usize;
                    for x in 0..w {
                        let sx = (x as i64 - dx).rem_euclid(w as i64) as usize;
                        data[(ch * h + y) * w + x] += amp * field[sy * w + sx];
                    }
                }
            }
            for v in data.iter_mut() {
                *v = v.max(0.0);
            }
            samples.push(ToySample {
                id: (class * cfg.samples_per_class + k) as u64,
                label: class,
                map: FeatureMap::new(Tensor::new(&[c, h, w], data)?)?,
            });
        }
    }
    Ok(ToyDataset { samples })
}

/// Global descriptor of a feature map: generalized-mean pooling (p = 3)
/// over space followed by L2 normalization.
pub fn global_descriptor(map: &FeatureMap) -> Result<Tensor> {
    let pooled = gem_pool(map.data(), 3.0)?;
    let (d, degenerate) = l2_normalize(&pooled);
    if degenerate {
        return Err(Error::DegenerateShape("all-zero map has no descriptor".into()));
    }
    Ok(d)
}

/// Draws a (query, positive, negative) index triple. The negative comes
/// from the query's mined hard list with probability `r_h`, otherwise
/// uniformly from all different-label samples.
pub fn sample_triplet(
    ds: &ToyDataset,
    hni: &HardNegativeIndex,
    r_h: f32,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, usize, usize)> {
    if ds.samples.len() < 3 || ds.num_labels() < 2 {
        return Err(Error::InvalidArgument(
            "triplet sampling needs at least two labels and three samples".into(),
        ));
    }
    // Anchor: resample until its label has a second member.
    let q = loop {
        let q = rng.random_range(0..ds.samples.len());
        let label = ds.samples[q].label;
        if ds.samples.iter().enumerate().any(|(i, s)| i != q && s.label == label) {
            break q;
        }
    };
    let q_label = ds.samples[q].label;
    let q_id = ds.samples[q].id;

    let peers: Vec<usize> = (0..ds.samples.len())
        .filter(|&i| i != q && ds.samples[i].label == q_label)
        .collect();
    let p = peers[rng.random_range(0..peers.len())];

    let hard = rng.random::<f32>() < r_h;
    let n = if hard {
        let list = hni
            .negatives_of(q_id)
            .ok_or_else(|| Error::MissingEntry(format!("no mined negatives for sample {q_id}")))?;
        let nid = list[rng.random_range(0..list.len())];
        ds.samples
            .iter()
            .position(|s| s.id == nid)
            .ok_or_else(|| Error::MissingEntry(format!("mined negative {nid} left the dataset")))?
    } else {
        let negatives: Vec<usize> = (0..ds.samples.len())
            .filter(|&i| ds.samples[i].label != q_label)
            .collect();
        negatives[rng.random_range(0..negatives.len())]
    };
    Ok((q, p, n))
}

/// Cosine-decayed learning rate: full at step 0, half way down at the
/// midpoint, zero at the final step.
pub fn cosine_lr(lr: f32, step: usize, total_steps: usize) -> f32 {
    let t = step as f32 / total_steps as f32;
    lr * 0.5 * (1.0 + (std::f32::consts::PI * t).cos())
}

/// Momentum SGD over every trainable tensor: `v <- momentum*v + g`,
/// `theta <- theta - lr_t*v`. Rejects non-finite gradients.
pub fn sgd_step(
    params: &mut EncoderWeights,
    grads: &EncoderWeights,
    velocity: &mut EncoderWeights,
    lr_t: f32,
    momentum: f32,
) -> Result<()> {
    let mut gmap: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut bad = None;
    grads.for_each(|name, t| {
        if !t.all_finite() && bad.is_none() {
            bad = Some(name.to_string());
        }
        gmap.insert(name.to_string(), t.clone());
    });
    if let Some(name) = bad {
        return Err(Error::Divergence(format!("non-finite gradient in {name}")));
    }

    let mut status: Result<()> = Ok(());
    velocity.for_each_mut(|name, v| {
        if status.is_ok() {
            v.scale(momentum);
            status = v.add_scaled(&gmap[name], 1.0);
        }
    });
    status?;

    let mut vmap: BTreeMap<String, Tensor> = BTreeMap::new();
    velocity.for_each(|name, t| {
        vmap.insert(name.to_string(), t.clone());
    });
    let mut status: Result<()> = Ok(());
    params.for_each_mut(|name, p| {
        if status.is_ok() {
            status = p.add_scaled(&vmap[name], -lr_t);
        }
    });
    status
}

/// One row of the emitted loss curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f32,
    pub lr: f32,
    pub r_h: f32,
    pub p_has: f32,
}

/// Scores one (query, key) pair end to end with the given weights.
pub fn pair_logit(w: &EncoderWeights, q: &FeatureMap, k: &FeatureMap) -> Result<PairLogit> {
    let s = w.config.num_scales;
    let pq = reduce_scalewise(&build_pyramid(q, s)?, &w.reducers)?;
    let pk = reduce_scalewise(&build_pyramid(k, s)?, &w.reducers)?;
    encoder_forward(&assemble_cross_scale(&pq, &pk)?, w)
}

/// Pair similarity in (0, 1); the verification score.
pub fn pair_similarity(w: &EncoderWeights, q: &FeatureMap, k: &FeatureMap) -> Result<f32> {
    Ok(similarity_from_logit(&pair_logit(w, q, k)?))
}

struct SampleCtx {
    raw: FeaturePyramid,
    reduced: FeaturePyramid,
    d_reduced: Vec<Tensor>,
}

impl SampleCtx {
    fn new(map: &FeatureMap, w: &EncoderWeights) -> Result<Self> {
        let raw = build_pyramid(map, w.config.num_scales)?;
        let reduced = reduce_scalewise(&raw, &w.reducers)?;
        let d_reduced = reduced
            .levels()
            .iter()
            .map(|l| Tensor::zeros_like(l.data()))
            .collect();
        Ok(Self { raw, reduced, d_reduced })
    }
}

/// Loss and full gradients for one (q, p, n) triplet under the symmetric
/// re-ranking objective over all four pair orientations.
fn triplet_grads(
    w: &EncoderWeights,
    q: &FeatureMap,
    p: &FeatureMap,
    n: &FeatureMap,
) -> Result<(f32, EncoderWeights)> {
    let mut ctx = [SampleCtx::new(q, w)?, SampleCtx::new(p, w)?, SampleCtx::new(n, w)?];
    // (gradient key, query sample, key sample)
    const ORIENTATIONS: [(&str, usize, usize); 4] =
        [("z_qp", 0, 1), ("z_pq", 1, 0), ("z_qn", 0, 2), ("z_nq", 2, 0)];

    let mut logits = Vec::with_capacity(4);
    let mut traces = Vec::with_capacity(4);
    for (_, qi, ki) in ORIENTATIONS {
        let vol = assemble_cross_scale(&ctx[qi].reduced, &ctx[ki].reduced)?;
        let (z, trace) = encoder_forward_trace(&vol, w)?;
        logits.push(z);
        traces.push(trace);
    }
    let lv = rerank_total_loss(&logits[0], &logits[1], &logits[2], &logits[3])?;

    let mut grads = w.zeros_like();
    for (o, (key, qi, ki)) in ORIENTATIONS.into_iter().enumerate() {
        let dz = &lv.grads[key];
        let (eg, dvol) = encoder_backward(w, &traces[o], (dz.data()[0], dz.data()[1]))?;
        grads.accumulate(&eg, 1.0)?;
        let (dq_levels, dk_levels) =
            assemble_cross_scale_backward(&ctx[qi].reduced, &ctx[ki].reduced, &dvol)?;
        for (acc, d) in ctx[qi].d_reduced.iter_mut().zip(&dq_levels) {
            acc.add_scaled(d, 1.0)?;
        }
        for (acc, d) in ctx[ki].d_reduced.iter_mut().zip(&dk_levels) {
            acc.add_scaled(d, 1.0)?;
        }
    }
    for sample in &ctx {
        let rg = reduce_scalewise_backward(&sample.raw, &sample.reduced, &w.reducers, &sample.d_reduced)?;
        for s in 0..rg.num_levels() {
            grads.reducers.kernels[s].add_scaled(&rg.kernels[s], 1.0)?;
            grads.reducers.biases[s].add_scaled(&rg.biases[s], 1.0)?;
        }
    }
    Ok((lv.value, grads))
}

/// Trains the verification stack (reducers, 4D blocks, MLP) on the toy
/// corpus. Deterministic given the seed; returns the weights together with
/// the per-step loss curve.
pub fn train_rerank_toy(
    ds: &ToyDataset,
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
    sch: &CurriculumSchedule,
) -> Result<(EncoderWeights, Vec<TrainRecord>)> {
    cfg.validate()?;
    sch.validate()?;
    enc_cfg.validate()?;
    if ds.samples.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let ch = ds.samples[0].map.channels();
    if ch != enc_cfg.in_channels {
        return Err(Error::ChannelMismatch { expected: enc_cfg.in_channels, got: ch });
    }

    let descriptors: Vec<(u64, usize, Tensor)> = ds
        .samples
        .iter()
        .map(|s| Ok((s.id, s.label, global_descriptor(&s.map)?)))
        .collect::<Result<_>>()?;
    let hni = mine_hard_negatives(&descriptors)?;

    let mut w = init_encoder(enc_cfg, cfg.seed)?;
    let mut velocity = w.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let (r_h, p_has) = schedule_at(sch, step);
        let lr_t = cosine_lr(cfg.lr, step, cfg.steps);

        let mut grads = w.zeros_like();
        let mut loss_sum = 0.0f64;
        for _ in 0..cfg.batch_size {
            let (qi, pi, ni) = sample_triplet(ds, &hni, r_h, &mut rng)?;
            let q = hide_and_seek(&ds.samples[qi].map, p_has, &mut rng)?;
            let p = hide_and_seek(&ds.samples[pi].map, p_has, &mut rng)?;
            let n = hide_and_seek(&ds.samples[ni].map, p_has, &mut rng)?;
            let (loss, g) = triplet_grads(&w, &q, &p, &n)?;
            loss_sum += loss as f64;
            grads.accumulate(&g, 1.0)?;
        }
        let inv = 1.0 / cfg.batch_size as f32;
        grads.for_each_mut(|_, t| t.scale(inv));
        let loss = (loss_sum * inv as f64) as f32;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!(
                "step {step}: loss became non-finite (lr {lr_t}, r_h {r_h}, p_has {p_has})"
            )));
        }
        sgd_step(&mut w, &grads, &mut velocity, lr_t, cfg.momentum)?;
        curve.push(TrainRecord { step, loss, lr: lr_t, r_h, p_has });
    }
    Ok((w, curve))
}

/// Fraction of pairs whose verification score lands on the right side of
/// 0.5.
pub fn pair_accuracy(
    w: &EncoderWeights,
    pairs: &[(&FeatureMap, &FeatureMap, bool)],
) -> Result<f32> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no evaluation pairs".into()));
    }
    let mut correct = 0usize;
    for (q, k, same) in pairs {
        let s = pair_similarity(w, q, k)?;
        if (s > 0.5) == *same {
            correct += 1;
        }
    }
    Ok(correct as f32 / pairs.len() as f32)
}

/// Everything a `train-toy` run needs, parsed from line-oriented
/// `key = value` text. Unknown keys are rejected so typos fail loudly.
#[derive(Debug, Clone)]
pub struct TrainSpec {
    pub gen: ToyGenConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub schedule: CurriculumSchedule,
}

impl Default for TrainSpec {
    fn default() -> Self {
        let gen = ToyGenConfig::default();
        let encoder = EncoderConfig {
            num_scales: 2,
            in_channels: gen.channels,
            reduced_channels: 128,
            block_channel_plan: vec![4, 6],
            convs_per_block: 2,
            mlp_hidden: 16,
            norm_groups: 2,
        };
        let steps = 2000;
        Self {
            gen,
            encoder,
            train: TrainConfig {
                lr: 0.02,
                momentum: DEFAULT_SGD_MOMENTUM,
                batch_size: 4,
                seed: 7,
                steps,
            },
            schedule: CurriculumSchedule::new(steps),
        }
    }
}

impl TrainSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        let mut explicit_total = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("config line {}: expected key = value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| {
                Error::InvalidArgument(format!(
                    "config line {}: cannot parse {key} as {what}",
                    lineno + 1
                ))
            };
            let as_usize =
                |v: &str, what: &str| v.parse::<usize>().map_err(|_| bad(what));
            let as_u64 = |v: &str, what: &str| v.parse::<u64>().map_err(|_| bad(what));
            let as_f32 = |v: &str, what: &str| v.parse::<f32>().map_err(|_| bad(what));
            match key {
                "num_classes" => spec.gen.num_classes = as_usize(value, "integer")?,
                "samples_per_class" => spec.gen.samples_per_class = as_usize(value, "integer")?,
                "channels" => spec.gen.channels = as_usize(value, "integer")?,
                "height" => spec.gen.height = as_usize(value, "integer")?,
                "width" => spec.gen.width = as_usize(value, "integer")?,
                "shift_max" => spec.gen.shift_max = as_usize(value, "integer")?,
                "amp_jitter" => spec.gen.amp_jitter = as_f32(value, "real")?,
                "noise_sigma" => spec.gen.noise_sigma = as_f32(value, "real")?,
                "shared_channels" => spec.gen.shared_channels = as_usize(value, "integer")?,
                "pattern_density" => spec.gen.pattern_density = as_f32(value, "real")?,
                "gen_seed" => spec.gen.seed = as_u64(value, "integer")?,
                "sample_seed" => spec.gen.sample_seed = as_u64(value, "integer")?,
                "num_scales" => spec.encoder.num_scales = as_usize(value, "integer")?,
                "in_channels" => spec.encoder.in_channels = as_usize(value, "integer")?,
                "reduced_channels" => spec.encoder.reduced_channels = as_usize(value, "integer")?,
                "block_channel_plan" => {
                    spec.encoder.block_channel_plan = value
                        .split(',')
                        .map(|v| v.trim().parse::<usize>().map_err(|_| bad("integer list")))
                        .collect::<Result<_>>()?;
                }
                "convs_per_block" => spec.encoder.convs_per_block = as_usize(value, "integer")?,
                "mlp_hidden" => spec.encoder.mlp_hidden = as_usize(value, "integer")?,
                "norm_groups" => spec.encoder.norm_groups = as_usize(value, "integer")?,
                "lr" => spec.train.lr = as_f32(value, "real")?,
                "momentum" => spec.train.momentum = as_f32(value, "real")?,
                "batch_size" => spec.train.batch_size = as_usize(value, "integer")?,
                "seed" => spec.train.seed = as_u64(value, "integer")?,
                "steps" => spec.train.steps = as_usize(value, "integer")?,
                "r_h_start" => spec.schedule.r_h_start = as_f32(value, "real")?,
                "r_h_end" => spec.schedule.r_h_end = as_f32(value, "real")?,
                "p_has_start" => spec.schedule.p_has_start = as_f32(value, "real")?,
                "p_has_end" => spec.schedule.p_has_end = as_f32(value, "real")?,
                "total_steps" => {
                    spec.schedule.total_steps = as_usize(value, "integer")?;
                    explicit_total = true;
                }
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "config line {}: unknown key {other}",
                        lineno + 1
                    )))
                }
            }
        }
        if !explicit_total {
            spec.schedule.total_steps = spec.train.steps;
        }
        // The encoder consumes whatever the generator emits unless the
        // config pins in_channels explicitly.
        if spec.encoder.in_channels != spec.gen.channels {
            spec.encoder.in_channels = spec.gen.channels;
        }
        spec.gen.validate()?;
        spec.encoder.validate()?;
        spec.train.validate()?;
        spec.schedule.validate()?;
        Ok(spec)
    }

    /// The default configuration in parseable form.
    pub fn render(&self) -> String {
        let plan: Vec<String> =
            self.encoder.block_channel_plan.iter().map(|c| c.to_string()).collect();
        format!(
            "# toy corpus\n\
             num_classes = {}\nsamples_per_class = {}\nchannels = {}\nheight = {}\nwidth = {}\n\
             shift_max = {}\namp_jitter = {}\nnoise_sigma = {}\nshared_channels = {}\n\
             pattern_density = {}\ngen_seed = {}\nsample_seed = {}\n\
             # encoder\n\
             num_scales = {}\nreduced_channels = {}\nblock_channel_plan = {}\n\
             convs_per_block = {}\nmlp_hidden = {}\nnorm_groups = {}\n\
             # optimizer\n\
             lr = {}\nmomentum = {}\nbatch_size = {}\nseed = {}\nsteps = {}\n\
             # curriculum\n\
             r_h_start = {}\nr_h_end = {}\np_has_start = {}\np_has_end = {}\n",
            self.gen.num_classes,
            self.gen.samples_per_class,
            self.gen.channels,
            self.gen.height,
            self.gen.width,
            self.gen.shift_max,
            self.gen.amp_jitter,
            self.gen.noise_sigma,
            self.gen.shared_channels,
            self.gen.pattern_density,
            self.gen.seed,
            self.gen.sample_seed,
            self.encoder.num_scales,
            self.encoder.reduced_channels,
            plan.join(","),
            self.encoder.convs_per_block,
            self.encoder.mlp_hidden,
            self.encoder.norm_groups,
            self.train.lr,
            self.train.momentum,
            self.train.batch_size,
            self.train.seed,
            self.train.steps,
            self.schedule.r_h_start,
            self.schedule.r_h_end,
            self.schedule.p_has_start,
            self.schedule.p_has_end,
        )
    }
}
