//! Feature pyramids and cross-scale correlation volumes.
//!
//! A query/key image pair is compared by correlating unit-normalized local
//! features across every combination of pyramid scales. Each pairwise slice
//! is clamped ReLU cosine similarity, bilinearly upsampled to the base
//! resolution on both image sides, and the S*S slices are stacked into one
//! 5-axis volume that the 4D encoder consumes.

use crate::error::{Error, Result};
use crate::ops::{conv2d, conv2d_backward, resize_axes_backward, resize_axes_forward, ResizePlan};
use crate::tensor::Tensor;

/// Ratio between consecutive pyramid levels.
pub const SCALE_STEP: f32 = std::f32::consts::FRAC_1_SQRT_2;

/// A dense local feature map laid out as `[channels, height, width]`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    data: Tensor,
}

impl FeatureMap {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "feature map expects [c, h, w], got {:?}",
                data.shape()
            )));
        }
        if !data.all_finite() {
            return Err(Error::NonFinite("feature map contains non-finite values".into()));
        }
        Ok(Self { data })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }
}

/// The same image at progressively smaller scales; level 0 is the original
/// map and level `s` has extents `round(step^s * extent)`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    levels: Vec<FeatureMap>,
    scales: Vec<f32>,
}

impl FeaturePyramid {
    /// Reassembles a pyramid from already-resized levels, e.g. maps loaded
    /// from a feature store. Scales are assigned as `step^s` by position;
    /// level extents are trusted as given.
    pub fn from_levels(levels: Vec<FeatureMap>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidArgument("pyramid needs at least one scale".into()));
        }
        let c = levels[0].channels();
        if levels.iter().any(|l| l.channels() != c) {
            return Err(Error::ShapeMismatch("pyramid levels disagree on channels".into()));
        }
        let scales = (0..levels.len()).map(|s| SCALE_STEP.powi(s as i32)).collect();
        Ok(Self { levels, scales })
    }

    pub fn levels(&self) -> &[FeatureMap] {
        &self.levels
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn num_scales(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, s: usize) -> &FeatureMap {
        &self.levels[s]
    }
}

/// Round-half-up of a positive pyramid extent.
fn scaled_extent(extent: usize, scale: f32) -> usize {
    (extent as f32 * scale + 0.5).floor() as usize
}

/// Builds a pyramid by resizing the base map to each target scale. Every
/// level is sampled from the original map, not the previous level, so
/// interpolation error does not compound.
pub fn build_pyramid(base: &FeatureMap, num_scales: usize) -> Result<FeaturePyramid> {
    if num_scales == 0 {
        return Err(Error::InvalidArgument("pyramid needs at least one scale".into()));
    }
    if base.height() < 4 || base.width() < 4 {
        return Err(Error::DegenerateShape(format!(
            "pyramid base must be at least 4x4, got {}x{}",
            base.height(),
            base.width()
        )));
    }
    let mut levels = Vec::with_capacity(num_scales);
    let mut scales = Vec::with_capacity(num_scales);
    for s in 0..num_scales {
        let scale = SCALE_STEP.powi(s as i32);
        scales.push(scale);
        if s == 0 {
            levels.push(base.clone());
            continue;
        }
        let h = scaled_extent(base.height(), scale);
        let w = scaled_extent(base.width(), scale);
        if h == 0 || w == 0 {
            return Err(Error::PyramidTooDeep { level: s });
        }
        let resized = crate::ops::resize_bilinear(base.data(), h, w)?;
        levels.push(FeatureMap::new(resized)?);
    }
    Ok(FeaturePyramid { levels, scales })
}

/// Per-level 3x3 channel reducers: level `s` maps `c_in` channels to
/// `kernels[s].shape()[0]` channels at stride 1 with padding 1, followed by
/// a ReLU.
#[derive(Debug, Clone)]
pub struct ReducerWeights {
    pub kernels: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl ReducerWeights {
    pub fn new(kernels: Vec<Tensor>, biases: Vec<Tensor>) -> Result<Self> {
        let w = Self { kernels, biases };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernels.len() != self.biases.len() || self.kernels.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "reducer has {} kernels but {} biases",
                self.kernels.len(),
                self.biases.len()
            )));
        }
        for (s, (k, b)) in self.kernels.iter().zip(&self.biases).enumerate() {
            if k.rank() != 4 || k.shape()[2] != 3 || k.shape()[3] != 3 {
                return Err(Error::ShapeMismatch(format!(
                    "reducer level {} kernel must be [c_out, c_in, 3, 3], got {:?}",
                    s,
                    k.shape()
                )));
            }
            if b.shape() != [k.shape()[0]] {
                return Err(Error::ShapeMismatch(format!(
                    "reducer level {} bias {:?} does not match {} output channels",
                    s,
                    b.shape(),
                    k.shape()[0]
                )));
            }
        }
        Ok(())
    }

    pub fn num_levels(&self) -> usize {
        self.kernels.len()
    }

    /// Zero tensors with the same structure, used as gradient accumulators.
    pub fn zeros_like(&self) -> Self {
        Self {
            kernels: self.kernels.iter().map(Tensor::zeros_like).collect(),
            biases: self.biases.iter().map(Tensor::zeros_like).collect(),
        }
    }
}

/// Applies the per-level reducer convs + ReLU, preserving spatial extents.
pub fn reduce_scalewise(pyr: &FeaturePyramid, w: &ReducerWeights) -> Result<FeaturePyramid> {
    if w.num_levels() != pyr.num_scales() {
        return Err(Error::ShapeMismatch(format!(
            "{} reducer levels for a {}-scale pyramid",
            w.num_levels(),
            pyr.num_scales()
        )));
    }
    let mut levels = Vec::with_capacity(pyr.num_scales());
    for (s, lvl) in pyr.levels().iter().enumerate() {
        let mut y = conv2d(lvl.data(), &w.kernels[s], Some(&w.biases[s]), 1, 1)?;
        for v in y.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        levels.push(FeatureMap { data: y });
    }
    Ok(FeaturePyramid { levels, scales: pyr.scales().to_vec() })
}

/// Gradients of [`reduce_scalewise`] with respect to the reducer parameters.
/// `reduced` must be the forward output (its zeros encode the ReLU mask) and
/// `d_reduced` holds one upstream gradient tensor per level.
pub fn reduce_scalewise_backward(
    pyr: &FeaturePyramid,
    reduced: &FeaturePyramid,
    w: &ReducerWeights,
    d_reduced: &[Tensor],
) -> Result<ReducerWeights> {
    if d_reduced.len() != pyr.num_scales() || reduced.num_scales() != pyr.num_scales() {
        return Err(Error::ShapeMismatch(format!(
            "reducer backward got {} gradients for {} levels",
            d_reduced.len(),
            pyr.num_scales()
        )));
    }
    let mut grads = w.zeros_like();
    for s in 0..pyr.num_scales() {
        let out = reduced.level(s).data();
        if d_reduced[s].shape() != out.shape() {
            return Err(Error::ShapeMismatch(format!(
                "level {} upstream gradient {:?} vs output {:?}",
                s,
                d_reduced[s].shape(),
                out.shape()
            )));
        }
        // Gate by the ReLU: positions that clamped to zero pass nothing.
        let mut dy = d_reduced[s].clone();
        for (g, &o) in dy.data_mut().iter_mut().zip(out.data()) {
            if o <= 0.0 {
                *g = 0.0;
            }
        }
        let g = conv2d_backward(pyr.level(s).data(), &w.kernels[s], &dy, 1, 1)?;
        grads.kernels[s] = g.dk;
        grads.biases[s] = g.db;
    }
    Ok(grads)
}

/// Clamped ReLU cosine similarity between every query position and every key
/// position: output `[hq, wq, hk, wk]` with entries in `[0, 1]`. Columns with
/// zero norm correlate to 0.
pub fn correlate(fq: &FeatureMap, fk: &FeatureMap) -> Result<Tensor> {
    if fq.channels() != fk.channels() {
        return Err(Error::ChannelMismatch {
            expected: fq.channels(),
            got: fk.channels(),
        });
    }
    let c = fq.channels();
    let (hq, wq) = (fq.height(), fq.width());
    let (hk, wk) = (fk.height(), fk.width());
    let nq = hq * wq;
    let nk = hk * wk;
    // Transpose to position-major so each column vector is contiguous.
    let colq = to_position_major(fq.data(), c, nq);
    let colk = to_position_major(fk.data(), c, nk);
    let normq = column_norms(&colq, nq, c);
    let normk = column_norms(&colk, nk, c);

    let mut out = vec![0.0f32; nq * nk];
    for pq in 0..nq {
        if normq[pq] == 0.0 {
            continue;
        }
        let a = &colq[pq * c..(pq + 1) * c];
        for pk in 0..nk {
            if normk[pk] == 0.0 {
                continue;
            }
            let b = &colk[pk * c..(pk + 1) * c];
            let mut dot = 0.0f32;
            for i in 0..c {
                dot += a[i] * b[i];
            }
            let cos = dot / (normq[pq] * normk[pk]);
            out[pq * nk + pk] = cos.clamp(0.0, 1.0);
        }
    }
    Tensor::new(&[hq, wq, hk, wk], out)
}

/// Gradients of [`correlate`] with respect to both feature maps.
pub fn correlate_backward(fq: &FeatureMap, fk: &FeatureMap, dcorr: &Tensor) -> Result<(Tensor, Tensor)> {
    if fq.channels() != fk.channels() {
        return Err(Error::ChannelMismatch {
            expected: fq.channels(),
            got: fk.channels(),
        });
    }
    let c = fq.channels();
    let (hq, wq) = (fq.height(), fq.width());
    let (hk, wk) = (fk.height(), fk.width());
    let nq = hq * wq;
    let nk = hk * wk;
    if dcorr.shape() != [hq, wq, hk, wk] {
        return Err(Error::ShapeMismatch(format!(
            "correlate_backward expects upstream [{}, {}, {}, {}], got {:?}",
            hq,
            wq,
            hk,
            wk,
            dcorr.shape()
        )));
    }
    let colq = to_position_major(fq.data(), c, nq);
    let colk = to_position_major(fk.data(), c, nk);
    let normq = column_norms(&colq, nq, c);
    let normk = column_norms(&colk, nk, c);

    let mut dcolq = vec![0.0f32; colq.len()];
    let mut dcolk = vec![0.0f32; colk.len()];
    let gd = dcorr.data();
    for pq in 0..nq {
        if normq[pq] == 0.0 {
            continue;
        }
        let a = &colq[pq * c..(pq + 1) * c];
        for pk in 0..nk {
            if normk[pk] == 0.0 {
                continue;
            }
            let g = gd[pq * nk + pk];
            if g == 0.0 {
                continue;
            }
            let b = &colk[pk * c..(pk + 1) * c];
            let mut dot = 0.0f32;
            for i in 0..c {
                dot += a[i] * b[i];
            }
            let denom = normq[pq] * normk[pk];
            let cos = dot / denom;
            // The clamp gates the gradient outside the open interval (0, 1).
            if cos <= 0.0 || cos >= 1.0 {
                continue;
            }
            let inv_nq2 = 1.0 / (normq[pq] * normq[pq]);
            let inv_nk2 = 1.0 / (normk[pk] * normk[pk]);
            let da = &mut dcolq[pq * c..(pq + 1) * c];
            for i in 0..c {
                da[i] += g * (b[i] / denom - cos * a[i] * inv_nq2);
            }
            let db = &mut dcolk[pk * c..(pk + 1) * c];
            for i in 0..c {
                db[i] += g * (a[i] / denom - cos * b[i] * inv_nk2);
            }
        }
    }
    Ok((
        from_position_major(&dcolq, c, &[c, hq, wq])?,
        from_position_major(&dcolk, c, &[c, hk, wk])?,
    ))
}

fn to_position_major(x: &Tensor, c: usize, positions: usize) -> Vec<f32> {
    let xd = x.data();
    let mut out = vec![0.0f32; c * positions];
    for ch in 0..c {
        for p in 0..positions {
            out[p * c + ch] = xd[ch * positions + p];
        }
    }
    out
}

fn from_position_major(cols: &[f32], c: usize, shape: &[usize]) -> Result<Tensor> {
    let positions = cols.len() / c;
    let mut out = vec![0.0f32; cols.len()];
    for ch in 0..c {
        for p in 0..positions {
            out[ch * positions + p] = cols[p * c + ch];
        }
    }
    Tensor::new(shape, out)
}

fn column_norms(cols: &[f32], positions: usize, c: usize) -> Vec<f32> {
    let mut norms = Vec::with_capacity(positions);
    for p in 0..positions {
        let mut acc = 0.0f32;
        for &v in &cols[p * c..(p + 1) * c] {
            acc += v * v;
        }
        norms.push(acc.sqrt());
    }
    norms
}

/// A stacked cross-scale correlation volume `[s*s, hq, wq, hk, wk]` between a
/// query and a key image, at the base (level 0) resolution of each side.
#[derive(Debug, Clone)]
pub struct CrossScaleCorrelation {
    pub volume: Tensor,
    pub query_id: Option<u64>,
    pub key_id: Option<u64>,
}

/// Correlates every scale pair `(s_q, s_k)`, upsamples each slice to the base
/// resolution on both image sides, and stacks the slices with `s_q` as the
/// major index of axis 0.
pub fn assemble_cross_scale(pq: &FeaturePyramid, pk: &FeaturePyramid) -> Result<CrossScaleCorrelation> {
    let s = pq.num_scales();
    if pk.num_scales() != s {
        return Err(Error::ShapeMismatch(format!(
            "pyramids have {} and {} scales",
            s,
            pk.num_scales()
        )));
    }
    let (bhq, bwq) = (pq.level(0).height(), pq.level(0).width());
    let (bhk, bwk) = (pk.level(0).height(), pk.level(0).width());
    let slice_len = bhq * bwq * bhk * bwk;
    let mut volume = vec![0.0f32; s * s * slice_len];
    for sq in 0..s {
        for sk in 0..s {
            let corr = correlate(pq.level(sq), pk.level(sk))?;
            let (hq, wq) = (pq.level(sq).height(), pq.level(sq).width());
            let (hk, wk) = (pk.level(sk).height(), pk.level(sk).width());
            // Key side: the trailing axis pair of [hq*wq, hk, wk, 1].
            let kplan = ResizePlan::new(hk, wk, bhk, bwk)?;
            let keyed = resize_axes_forward(corr.data(), hq * wq, 1, &kplan);
            // Query side: the leading axis pair of [1, hq, wq, bhk*bwk].
            let qplan = ResizePlan::new(hq, wq, bhq, bwq)?;
            let full = resize_axes_forward(&keyed, 1, bhk * bwk, &qplan);
            volume[(sq * s + sk) * slice_len..(sq * s + sk + 1) * slice_len]
                .copy_from_slice(&full);
        }
    }
    Ok(CrossScaleCorrelation {
        volume: Tensor::new(&[s * s, bhq, bwq, bhk, bwk], volume)?,
        query_id: None,
        key_id: None,
    })
}

/// Gradients of [`assemble_cross_scale`] with respect to both reduced
/// pyramids' level tensors, returned per level.
pub fn assemble_cross_scale_backward(
    pq: &FeaturePyramid,
    pk: &FeaturePyramid,
    d_volume: &Tensor,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let s = pq.num_scales();
    let (bhq, bwq) = (pq.level(0).height(), pq.level(0).width());
    let (bhk, bwk) = (pk.level(0).height(), pk.level(0).width());
    if d_volume.shape() != [s * s, bhq, bwq, bhk, bwk] {
        return Err(Error::ShapeMismatch(format!(
            "volume gradient shape {:?} does not match [{}, {}, {}, {}, {}]",
            d_volume.shape(),
            s * s,
            bhq,
            bwq,
            bhk,
            bwk
        )));
    }
    let slice_len = bhq * bwq * bhk * bwk;
    let mut dq: Vec<Tensor> = pq.levels().iter().map(|l| Tensor::zeros_like(l.data())).collect();
    let mut dk: Vec<Tensor> = pk.levels().iter().map(|l| Tensor::zeros_like(l.data())).collect();
    for sq in 0..s {
        for sk in 0..s {
            let (hq, wq) = (pq.level(sq).height(), pq.level(sq).width());
            let (hk, wk) = (pk.level(sk).height(), pk.level(sk).width());
            let g = &d_volume.data()[(sq * s + sk) * slice_len..(sq * s + sk + 1) * slice_len];
            // Reverse the two upsampling passes (their transposes commute).
            let qplan = ResizePlan::new(hq, wq, bhq, bwq)?;
            let keyed = resize_axes_backward(g, 1, bhk * bwk, &qplan);
            let kplan = ResizePlan::new(hk, wk, bhk, bwk)?;
            let dcorr_buf = resize_axes_backward(&keyed, hq * wq, 1, &kplan);
            let dcorr = Tensor::new(&[hq, wq, hk, wk], dcorr_buf)?;
            let (dfq, dfk) = correlate_backward(pq.level(sq), pk.level(sk), &dcorr)?;
            dq[sq].add_scaled(&dfq, 1.0)?;
            dk[sk].add_scaled(&dfk, 1.0)?;
        }
    }
    Ok((dq, dk))
}
