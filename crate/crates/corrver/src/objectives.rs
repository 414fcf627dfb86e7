//! Training objectives: margined classification over class weights, the
//! momentum-queue contrastive loss, their weighted sum, and the symmetric
//! re-ranking cross-entropy. Every loss returns its value together with
//! analytic gradients in a named map so optimizers can stay generic.

use std::collections::{BTreeMap, VecDeque};

use crate::encoder::PairLogit;
use crate::error::{Error, Result};
use crate::ops::l2_normalize;
use crate::tensor::Tensor;

/// Default margin added to target cosines.
pub const DEFAULT_MARGIN: f32 = 0.15;
/// Default inverse softmax temperature (tau = 1/30).
pub const DEFAULT_INV_TAU: f32 = 30.0;
/// Default moving-average momentum for the margin statistic `t`.
pub const DEFAULT_T_MOMENTUM: f32 = 0.99;
/// Default momentum-network blend coefficient.
pub const DEFAULT_ETA: f32 = 0.999;

/// State of the adaptive margin: `t` tracks a moving average of positive
/// cosines and controls how strongly hard negatives are amplified.
#[derive(Debug, Clone, Copy)]
pub struct MarginState {
    /// Moving-average statistic, kept in [0, 1].
    pub t: f32,
    /// Momentum of the `t` update.
    pub momentum: f32,
    /// Additive angular margin applied to target cosines.
    pub margin: f32,
    /// Inverse temperature multiplying every modulated logit.
    pub scale_inv_tau: f32,
}

impl MarginState {
    pub fn new(margin: f32, scale_inv_tau: f32) -> Self {
        Self { t: 0.0, momentum: DEFAULT_T_MOMENTUM, margin, scale_inv_tau }
    }

    /// Batch-level update of the moving statistic from the mean cosine of
    /// the batch's target (positive) pairs. Clamped so `t` stays a valid
    /// interpolation weight even on adversarial batches.
    pub fn commit(&mut self, mean_target_cos: f32) {
        self.t = (self.momentum * self.t + (1.0 - self.momentum) * mean_target_cos)
            .clamp(0.0, 1.0);
    }
}

/// One queued momentum descriptor with its class label.
#[derive(Debug, Clone)]
pub struct QueueEntry {
    pub descriptor: Tensor,
    pub label: usize,
}

/// Class-weight matrix plus the ring buffer of momentum descriptors that
/// the contrastive loss draws its negatives from.
#[derive(Debug, Clone)]
pub struct DescriptorBank {
    class_weights: Tensor,
    queue: VecDeque<QueueEntry>,
    capacity: usize,
    /// Momentum-network blend coefficient.
    pub eta: f32,
}

impl DescriptorBank {
    /// Builds a bank from an `N x C` class-weight matrix; rows are
    /// L2-normalized on entry so dot products against unit descriptors are
    /// cosines.
    pub fn new(class_weights: Tensor, capacity: usize, eta: f32) -> Result<Self> {
        if class_weights.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "class weights must be N x C, got {:?}",
                class_weights.shape()
            )));
        }
        if capacity == 0 {
            return Err(Error::InvalidArgument("queue capacity must be positive".into()));
        }
        let mut bank = Self {
            class_weights,
            queue: VecDeque::with_capacity(capacity),
            capacity,
            eta,
        };
        bank.renormalize_class_rows();
        Ok(bank)
    }

    pub fn num_classes(&self) -> usize {
        self.class_weights.shape()[0]
    }

    pub fn descriptor_dim(&self) -> usize {
        self.class_weights.shape()[1]
    }

    pub fn class_weights(&self) -> &Tensor {
        &self.class_weights
    }

    pub fn class_weights_mut(&mut self) -> &mut Tensor {
        &mut self.class_weights
    }

    pub fn queue(&self) -> impl Iterator<Item = &QueueEntry> {
        self.queue.iter()
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn queue_capacity(&self) -> usize {
        self.capacity
    }

    /// Restores the unit-row invariant after an optimizer step on the
    /// class weights.
    pub fn renormalize_class_rows(&mut self) {
        let (n, c) = (self.class_weights.shape()[0], self.class_weights.shape()[1]);
        let data = self.class_weights.data_mut();
        for row in 0..n {
            let band = &mut data[row * c..(row + 1) * c];
            let norm = band.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt() as f32;
            if norm > 1e-12 {
                for v in band.iter_mut() {
                    *v /= norm;
                }
            }
        }
    }

    /// Raw cosines of `dq` against every class row.
    fn class_cosines(&self, dq: &Tensor) -> Vec<f32> {
        let (n, c) = (self.class_weights.shape()[0], self.class_weights.shape()[1]);
        let w = self.class_weights.data();
        let d = dq.data();
        (0..n)
            .map(|row| {
                let mut acc = 0.0f64;
                for i in 0..c {
                    acc += w[row * c + i] as f64 * d[i] as f64;
                }
                acc as f32
            })
            .collect()
    }
}

/// FIFO insertion of a fresh momentum descriptor; once the buffer is at
/// capacity the oldest entry leaves.
pub fn queue_update(bank: &mut DescriptorBank, d_momentum: &Tensor, label: usize) -> Result<()> {
    check_unit_descriptor(d_momentum, bank.descriptor_dim(), "queued descriptor")?;
    if bank.queue.len() == bank.capacity {
        bank.queue.pop_front();
    }
    bank.queue.push_back(QueueEntry { descriptor: d_momentum.clone(), label });
    Ok(())
}

/// Momentum-network parameter blend: `target <- eta*target + (1-eta)*online`.
pub fn momentum_update(target: &mut Tensor, online: &Tensor, eta: f32) -> Result<()> {
    if target.shape() != online.shape() {
        return Err(Error::ShapeMismatch(format!(
            "momentum blend of {:?} against {:?}",
            target.shape(),
            online.shape()
        )));
    }
    for (t, o) in target.data_mut().iter_mut().zip(online.data()) {
        *t = eta * *t + (1.0 - eta) * *o;
    }
    Ok(())
}

/// A scalar loss plus analytic gradients keyed by tensor name.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f32,
    pub grads: BTreeMap<String, Tensor>,
}

fn check_unit_descriptor(d: &Tensor, dim: usize, what: &str) -> Result<()> {
    if d.rank() != 1 || d.shape()[0] != dim {
        return Err(Error::ShapeMismatch(format!(
            "{what} must be a length-{dim} vector, got {:?}",
            d.shape()
        )));
    }
    let norm = d.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt() as f32;
    if (norm - 1.0).abs() > 1e-3 {
        return Err(Error::InvalidArgument(format!(
            "{what} must be unit-norm, got norm {norm}"
        )));
    }
    Ok(())
}

/// Margined value assigned to a target cosine: `cos(theta + m)` expanded in
/// terms of `cos(theta)`.
pub fn margined_target(cos_theta: f32, margin: f32) -> f32 {
    let c = cos_theta.clamp(-1.0, 1.0);
    let s = (1.0 - c * c).max(0.0).sqrt();
    c * margin.cos() - s * margin.sin()
}

fn margined_target_grad(cos_theta: f32, margin: f32) -> f32 {
    let c = cos_theta.clamp(-1.0, 1.0);
    let s = (1.0 - c * c).max(0.0).sqrt().max(1e-6);
    margin.cos() + margin.sin() * c / s
}

/// Curriculum modulation of one cosine logit. Target logits get the
/// additive angular margin; negative logits are compared against the
/// target's margined value (`target_margined`, ignored when `is_target`):
/// easy negatives pass through, hard ones are rescaled by `t + cos(theta)`.
pub fn curricular_margin(
    cos_theta: f32,
    is_target: bool,
    target_margined: f32,
    st: &MarginState,
) -> f32 {
    if is_target {
        margined_target(cos_theta, st.margin)
    } else if target_margined >= cos_theta {
        cos_theta
    } else {
        cos_theta * (st.t + cos_theta)
    }
}

/// Derivative of [`curricular_margin`] in `cos_theta` (branch indicators
/// held fixed).
fn curricular_margin_grad(
    cos_theta: f32,
    is_target: bool,
    target_margined: f32,
    st: &MarginState,
) -> f32 {
    if is_target {
        margined_target_grad(cos_theta, st.margin)
    } else if target_margined >= cos_theta {
        1.0
    } else {
        st.t + 2.0 * cos_theta
    }
}

/// Numerically stable `log(sum(exp(z)))` with the softmax as a byproduct.
fn log_sum_exp(z: &[f32]) -> (f32, Vec<f32>) {
    let m = z.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = z.iter().map(|v| (v - m).exp()).collect();
    let sum: f32 = exps.iter().sum();
    let softmax = exps.iter().map(|e| e / sum).collect();
    (m + sum.ln(), softmax)
}

/// Margined softmax cross-entropy of a query descriptor against the class
/// weights. Gradients cover both the descriptor (`"dq"`) and the weight
/// matrix (`"class_weights"`).
pub fn classification_loss(
    dq: &Tensor,
    bank: &DescriptorBank,
    target: usize,
    st: &MarginState,
) -> Result<LossValue> {
    check_unit_descriptor(dq, bank.descriptor_dim(), "query descriptor")?;
    if target >= bank.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "target class {target} out of range 0..{}",
            bank.num_classes()
        )));
    }

    let cosines = bank.class_cosines(dq);
    let tm = margined_target(cosines[target], st.margin);
    let logits: Vec<f32> = cosines
        .iter()
        .enumerate()
        .map(|(i, &c)| curricular_margin(c, i == target, tm, st) * st.scale_inv_tau)
        .collect();
    let (lse, softmax) = log_sum_exp(&logits);
    let value = lse - logits[target];
    if !value.is_finite() {
        return Err(Error::NonFinite("classification loss".into()));
    }

    // Chain rule back to the raw cosines, then to dq and the weight rows.
    let (n, c) = (bank.num_classes(), bank.descriptor_dim());
    let mut d_cos = vec![0.0f32; n];
    for i in 0..n {
        let d_logit = softmax[i] - if i == target { 1.0 } else { 0.0 };
        d_cos[i] = d_logit
            * st.scale_inv_tau
            * curricular_margin_grad(cosines[i], i == target, tm, st);
    }
    let w = bank.class_weights().data();
    let d = dq.data();
    let mut d_dq = vec![0.0f32; c];
    let mut d_w = vec![0.0f32; n * c];
    for i in 0..n {
        for j in 0..c {
            d_dq[j] += d_cos[i] * w[i * c + j];
            d_w[i * c + j] = d_cos[i] * d[j];
        }
    }

    let mut grads = BTreeMap::new();
    grads.insert("dq".to_string(), Tensor::new(&[c], d_dq)?);
    grads.insert("class_weights".to_string(), Tensor::new(&[n, c], d_w)?);
    Ok(LossValue { value, grads })
}

/// Queue contrastive loss: one cross-entropy term per in-queue positive,
/// with that positive plus every in-queue negative in the denominator,
/// averaged over positives. Queue entries are constants, so the only
/// gradient is `"dq"`.
pub fn contrastive_loss(
    dq: &Tensor,
    bank: &DescriptorBank,
    query_label: usize,
    st: &MarginState,
) -> Result<LossValue> {
    check_unit_descriptor(dq, bank.descriptor_dim(), "query descriptor")?;
    let entries: Vec<&QueueEntry> = bank.queue().collect();
    let positives: Vec<usize> =
        (0..entries.len()).filter(|&i| entries[i].label == query_label).collect();
    if positives.is_empty() {
        return Err(Error::PositiveMissingFromQueue);
    }
    let negatives: Vec<usize> =
        (0..entries.len()).filter(|&i| entries[i].label != query_label).collect();

    let d = dq.data();
    let dim = bank.descriptor_dim();
    let cos_of = |idx: usize| -> f32 {
        let e = entries[idx].descriptor.data();
        let mut acc = 0.0f64;
        for j in 0..dim {
            acc += d[j] as f64 * e[j] as f64;
        }
        acc as f32
    };
    let cosines: Vec<f32> = (0..entries.len()).map(cos_of).collect();

    let mut total = 0.0f64;
    let mut d_dq = vec![0.0f32; dim];
    let inv_count = 1.0 / positives.len() as f32;
    for &p in &positives {
        let tm = margined_target(cosines[p], st.margin);
        // Logit vector over {p} union negatives, positive first.
        let mut logits = Vec::with_capacity(1 + negatives.len());
        logits.push(margined_target(cosines[p], st.margin) * st.scale_inv_tau);
        for &nidx in &negatives {
            logits.push(curricular_margin(cosines[nidx], false, tm, st) * st.scale_inv_tau);
        }
        let (lse, softmax) = log_sum_exp(&logits);
        total += (lse - logits[0]) as f64;

        let dp = (softmax[0] - 1.0)
            * st.scale_inv_tau
            * margined_target_grad(cosines[p], st.margin)
            * inv_count;
        let ep = entries[p].descriptor.data();
        for j in 0..dim {
            d_dq[j] += dp * ep[j];
        }
        for (slot, &nidx) in negatives.iter().enumerate() {
            let dn = softmax[slot + 1]
                * st.scale_inv_tau
                * curricular_margin_grad(cosines[nidx], false, tm, st)
                * inv_count;
            let en = entries[nidx].descriptor.data();
            for j in 0..dim {
                d_dq[j] += dn * en[j];
            }
        }
    }
    let value = (total / positives.len() as f64) as f32;
    if !value.is_finite() {
        return Err(Error::NonFinite("contrastive loss".into()));
    }

    let mut grads = BTreeMap::new();
    grads.insert("dq".to_string(), Tensor::new(&[dim], d_dq)?);
    Ok(LossValue { value, grads })
}

/// Weighted sum of the two global-descriptor losses with gradient maps
/// merged by the same weights.
pub fn global_total_loss(lc: &LossValue, lk: &LossValue, lambdas: (f32, f32)) -> Result<LossValue> {
    let value = lambdas.0 * lc.value + lambdas.1 * lk.value;
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    for (map, lambda) in [(&lc.grads, lambdas.0), (&lk.grads, lambdas.1)] {
        for (name, g) in map {
            match grads.get_mut(name) {
                Some(acc) => acc.add_scaled(g, lambda)?,
                None => {
                    let mut scaled = g.clone();
                    scaled.scale(lambda);
                    grads.insert(name.clone(), scaled);
                }
            }
        }
    }
    Ok(LossValue { value, grads })
}

fn pair_ce(z: &PairLogit, is_match: bool) -> (f32, [f32; 2]) {
    let logits = [z.z0, z.z1];
    let (lse, softmax) = log_sum_exp(&logits);
    let label = usize::from(is_match);
    let value = lse - logits[label];
    let mut dz = [softmax[0], softmax[1]];
    dz[label] -= 1.0;
    (value, dz)
}

/// Cross-entropy of one pair logit against its match label; gradient under
/// the key `"z"` as a length-2 tensor.
pub fn rerank_pair_loss(z: &PairLogit, is_match: bool) -> Result<LossValue> {
    if !z.z0.is_finite() || !z.z1.is_finite() {
        return Err(Error::NonFinite("re-rank pair logits".into()));
    }
    let (value, dz) = pair_ce(z, is_match);
    let mut grads = BTreeMap::new();
    grads.insert("z".to_string(), Tensor::new(&[2], dz.to_vec())?);
    Ok(LossValue { value, grads })
}

/// Symmetric re-ranking loss: the mean of the four orientation losses, with
/// match labels on the (q,p) pairs and non-match labels on the (q,n) pairs.
/// Gradients are routed per orientation under `"z_qp"`, `"z_pq"`, `"z_qn"`,
/// `"z_nq"`.
pub fn rerank_total_loss(
    z_qp: &PairLogit,
    z_pq: &PairLogit,
    z_qn: &PairLogit,
    z_nq: &PairLogit,
) -> Result<LossValue> {
    let parts = [
        ("z_qp", z_qp, true),
        ("z_pq", z_pq, true),
        ("z_qn", z_qn, false),
        ("z_nq", z_nq, false),
    ];
    let mut value = 0.0f32;
    let mut grads = BTreeMap::new();
    for (name, z, label) in parts {
        if !z.z0.is_finite() || !z.z1.is_finite() {
            return Err(Error::NonFinite("re-rank pair logits".into()));
        }
        let (v, dz) = pair_ce(z, label);
        value += 0.25 * v;
        grads.insert(
            name.to_string(),
            Tensor::new(&[2], vec![0.25 * dz[0], 0.25 * dz[1]])?,
        );
    }
    Ok(LossValue { value, grads })
}

/// Convenience for tests and the toy loop: L2-normalize an arbitrary vector
/// into a valid descriptor.
pub fn unit_descriptor(v: &Tensor) -> Result<Tensor> {
    let (d, degenerate) = l2_normalize(v);
    if degenerate {
        return Err(Error::DegenerateShape("zero vector cannot be a descriptor".into()));
    }
    Ok(d)
}
