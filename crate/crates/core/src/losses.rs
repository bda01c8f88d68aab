//! Training objectives and their analytic gradients.
//!
//! Every loss returns its value together with the gradient with respect to each of its inputs,
//! so the trainer can chain them through the network and the tests can compare them against
//! finite differences. Logarithms are natural throughout.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, PccsError, Result};
use crate::geometry::{Provenance, SegMask};
use crate::protobank::{build_contrast_sets, BinKey, FeatureMap, PrototypeBank};

/// Added inside the cross-entropy log.
pub const CE_EPS: f64 = 1e-10;
/// Soft Dice smoothing.
pub const DICE_SMOOTH: f64 = 1e-5;
/// Added inside the log of the pixel uncertainty.
pub const UNCERTAINTY_EPS: f64 = 1e-6;
/// Below this total anchor-positive similarity the positive weights become uniform.
pub const DEGENERATE_SIMILARITY: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Student,
    Teacher,
}

/// Per-pixel class probabilities stored channel-major: `data[c * h * w + y * w + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    pub h: usize,
    pub w: usize,
    pub classes: usize,
    pub data: Vec<f64>,
    pub branch: Branch,
}

impl ProbabilityMap {
    pub fn new(h: usize, w: usize, classes: usize, data: Vec<f64>, branch: Branch) -> Result<Self> {
        if data.len() != h * w * classes {
            return shape(format!(
                "{} values for a {h}x{w}x{classes} probability map",
                data.len()
            ));
        }
        let pm = Self {
            h,
            w,
            classes,
            data,
            branch,
        };
        for i in 0..h * w {
            let s: f64 = (0..classes).map(|c| pm.at(c, i)).sum();
            if (s - 1.0).abs() > 1e-5 || (0..classes).any(|c| !(0.0..=1.0).contains(&pm.at(c, i))) {
                return domain(format!("pixel {i} is not on the simplex (sum {s})"));
            }
        }
        Ok(pm)
    }

    /// Channel-wise softmax of channel-major logits.
    pub fn from_logits(h: usize, w: usize, classes: usize, logits: &[f64], branch: Branch) -> Self {
        let n = h * w;
        let mut data = vec![0.0; n * classes];
        for i in 0..n {
            let m = (0..classes)
                .map(|c| logits[c * n + i])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..classes {
                let e = (logits[c * n + i] - m).exp();
                data[c * n + i] = e;
                z += e;
            }
            for c in 0..classes {
                data[c * n + i] /= z;
            }
        }
        Self {
            h,
            w,
            classes,
            data,
            branch,
        }
    }

    pub fn uniform(h: usize, w: usize, classes: usize, branch: Branch) -> Self {
        Self {
            h,
            w,
            classes,
            data: vec![1.0 / classes as f64; h * w * classes],
            branch,
        }
    }

    pub fn one_hot(mask: &SegMask, branch: Branch) -> Self {
        let (h, w, c) = (mask.height(), mask.width(), mask.num_classes());
        let n = h * w;
        let mut data = vec![0.0; n * c];
        for (i, &l) in mask.labels().iter().enumerate() {
            data[l as usize * n + i] = 1.0;
        }
        Self {
            h,
            w,
            classes: c,
            data,
            branch,
        }
    }

    #[inline]
    pub fn at(&self, class: usize, pixel: usize) -> f64 {
        self.data[class * self.h * self.w + pixel]
    }

    pub fn num_pixels(&self) -> usize {
        self.h * self.w
    }

    /// Most probable class per pixel; ties go to the lower class index.
    pub fn argmax(&self, provenance: Provenance) -> SegMask {
        let n = self.num_pixels();
        let labels = (0..n)
            .map(|i| {
                let mut best = 0;
                for c in 1..self.classes {
                    if self.at(c, i) > self.at(best, i) {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        SegMask::new(self.h, self.w, self.classes, labels, provenance)
            .expect("argmax labels are in range")
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if (self.h, self.w, self.classes) != (other.h, other.w, other.classes) {
            return shape(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.h, self.w, self.classes, other.h, other.w, other.classes
            ));
        }
        Ok(())
    }
}

/// Chains a gradient on softmax outputs back to the logits, channel-major.
pub fn softmax_backward(probs: &ProbabilityMap, d_probs: &[f64]) -> Vec<f64> {
    let n = probs.num_pixels();
    let mut out = vec![0.0; d_probs.len()];
    for i in 0..n {
        let dot: f64 = (0..probs.classes)
            .map(|c| probs.at(c, i) * d_probs[c * n + i])
            .sum();
        for c in 0..probs.classes {
            out[c * n + i] = probs.at(c, i) * (d_probs[c * n + i] - dot);
        }
    }
    out
}

/// A scalar loss and its gradient with respect to one input.
#[derive(Clone, Debug)]
pub struct Graded {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// A scalar loss of two probability maps with gradients for both.
#[derive(Clone, Debug)]
pub struct PairGraded {
    pub value: f64,
    pub d_first: Vec<f64>,
    pub d_second: Vec<f64>,
}

/// Half cross-entropy plus half soft Dice loss against a ground-truth mask.
pub fn supervised_loss(pred: &ProbabilityMap, gt: &SegMask) -> Result<Graded> {
    if gt.provenance() != Provenance::GroundTruth {
        return domain("supervised loss requires a ground-truth mask");
    }
    if (pred.h, pred.w, pred.classes) != (gt.height(), gt.width(), gt.num_classes()) {
        return shape("prediction and mask differ in shape");
    }
    let n = pred.num_pixels();
    let c_count = pred.classes;
    let mut grad = vec![0.0; n * c_count];

    let mut ce = 0.0;
    for (i, &l) in gt.labels().iter().enumerate() {
        let p = pred.at(l as usize, i) + CE_EPS;
        ce -= p.ln();
        grad[l as usize * n + i] -= 0.5 / (n as f64 * p);
    }
    ce /= n as f64;

    let mut dice_sum = 0.0;
    for c in 0..c_count {
        let plane = &pred.data[c * n..(c + 1) * n];
        let (mut inter, mut psum, mut gsum) = (0.0, 0.0, 0.0);
        for (i, &p) in plane.iter().enumerate() {
            let g = f64::from(gt.labels()[i] as usize == c);
            inter += p * g;
            psum += p;
            gsum += g;
        }
        let num = 2.0 * inter + DICE_SMOOTH;
        let den = psum + gsum + DICE_SMOOTH;
        dice_sum += num / den;
        let scale = -0.5 / c_count as f64;
        for (i, g_out) in grad[c * n..(c + 1) * n].iter_mut().enumerate() {
            let g = f64::from(gt.labels()[i] as usize == c);
            *g_out += scale * (2.0 * g * den - num) / (den * den);
        }
    }
    let dice = 1.0 - dice_sum / c_count as f64;
    Ok(Graded {
        value: 0.5 * (ce + dice),
        grad,
    })
}

fn normalize(v: &[f64]) -> (Vec<f64>, f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    (v.iter().map(|x| x / norm).collect(), norm)
}

/// Gradient with respect to `v` given the gradient with respect to `v / |v|`.
fn normalize_backward(unit: &[f64], norm: f64, g: &[f64]) -> Vec<f64> {
    let dot: f64 = unit.iter().zip(g).map(|(u, g)| u * g).sum();
    unit.iter()
        .zip(g)
        .map(|(u, g)| (g - dot * u) / norm)
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Similarity-weighted contrastive loss of one anchor.
#[derive(Clone, Debug)]
pub struct ContrastGraded {
    pub value: f64,
    /// Weight of each positive in the sum; they add up to one.
    pub positive_weights: Vec<f64>,
    pub d_anchor: Vec<f64>,
    pub d_positives: Vec<Vec<f64>>,
    pub d_negatives: Vec<Vec<f64>>,
}

/// Contrastive consistency loss of one anchor against positive and negative prototypes.
///
/// All vectors are L2-normalised first. Each positive's log-likelihood term is weighted by its
/// share of the total anchor-positive similarity, with negative similarities counted as zero;
/// when that total is not positive the weights fall back to uniform.
pub fn contrastive_consistency_loss(
    anchor: &[f64],
    positives: &[&[f64]],
    negatives: &[&[f64]],
    tau: f64,
) -> Result<ContrastGraded> {
    if tau <= 0.0 || !tau.is_finite() {
        return domain(format!("temperature must be positive, got {tau}"));
    }
    let dim = anchor.len();
    if positives.iter().chain(negatives).any(|v| v.len() != dim) {
        return shape("prototype dimensions differ");
    }
    let zero = || ContrastGraded {
        value: 0.0,
        positive_weights: vec![],
        d_anchor: vec![0.0; dim],
        d_positives: vec![vec![0.0; dim]; positives.len()],
        d_negatives: vec![vec![0.0; dim]; negatives.len()],
    };
    if positives.is_empty() {
        return Ok(zero());
    }

    let (a, a_norm) = normalize(anchor);
    let pos: Vec<(Vec<f64>, f64)> = positives.iter().map(|p| normalize(p)).collect();
    let neg: Vec<(Vec<f64>, f64)> = negatives.iter().map(|p| normalize(p)).collect();
    let s: Vec<f64> = pos.iter().map(|(p, _)| dot(&a, p)).collect();
    let t: Vec<f64> = neg.iter().map(|(q, _)| dot(&a, q)).collect();

    // Negative similarities get no weight, so the weights stay a convex combination.
    let r: Vec<f64> = s.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = r.iter().sum();
    let degenerate = total <= DEGENERATE_SIMILARITY;
    let k = s.len() as f64;
    let weights: Vec<f64> = if degenerate {
        vec![1.0 / k; s.len()]
    } else {
        r.iter().map(|v| v / total).collect()
    };

    // log q_k = s_k / tau - log(exp(s_k / tau) + sum_m exp(t_m / tau))
    let mut logq = Vec::with_capacity(s.len());
    let mut value = 0.0;
    let mut ds = vec![0.0; s.len()];
    let mut dt = vec![0.0; t.len()];
    for (idx, &sk) in s.iter().enumerate() {
        let terms = std::iter::once(sk / tau).chain(t.iter().map(|&tm| tm / tau));
        let lz = log_sum_exp(terms);
        let lq = sk / tau - lz;
        logq.push(lq);
        value -= weights[idx] * lq;
        let qk = lq.exp();
        ds[idx] -= weights[idx] * (1.0 - qk) / tau;
        for (m, &tm) in t.iter().enumerate() {
            dt[m] += weights[idx] * (tm / tau - lz).exp() / tau;
        }
    }
    if !degenerate {
        // Through the weights: dL/ds_j = -logq_j / R + sum_k r_k logq_k / R^2 where s_j > 0.
        let weighted: f64 = r.iter().zip(&logq).map(|(a, b)| a * b).sum();
        for (j, d) in ds.iter_mut().enumerate() {
            if s[j] > 0.0 {
                *d += -logq[j] / total + weighted / (total * total);
            }
        }
    }

    let mut g_a = vec![0.0; dim];
    let mut d_positives = Vec::with_capacity(pos.len());
    for ((p, p_norm), &d) in pos.iter().zip(&ds) {
        let mut gp = vec![0.0; dim];
        for i in 0..dim {
            g_a[i] += d * p[i];
            gp[i] = d * a[i];
        }
        d_positives.push(normalize_backward(p, *p_norm, &gp));
    }
    let mut d_negatives = Vec::with_capacity(neg.len());
    for ((q, q_norm), &d) in neg.iter().zip(&dt) {
        let mut gq = vec![0.0; dim];
        for i in 0..dim {
            g_a[i] += d * q[i];
            gq[i] = d * a[i];
        }
        d_negatives.push(normalize_backward(q, *q_norm, &gq));
    }
    Ok(ContrastGraded {
        value,
        positive_weights: weights,
        d_anchor: normalize_backward(&a, a_norm, &g_a),
        d_positives,
        d_negatives,
    })
}

/// Uncertainty-weighted prototype contrastive loss over a whole bank.
#[derive(Clone, Debug, Default)]
pub struct BankGraded {
    pub value: f64,
    pub weights: BTreeMap<BinKey, f64>,
    pub per_anchor: BTreeMap<BinKey, f64>,
    pub d_vectors: BTreeMap<BinKey, Vec<f64>>,
    pub d_uncertainty: BTreeMap<BinKey, f64>,
}

/// Every prototype acts as an anchor; anchors are weighted by a softmax of their negated
/// uncertainties.
pub fn uncertainty_weighted_pc_loss(bank: &PrototypeBank, tau: f64) -> Result<BankGraded> {
    if tau <= 0.0 || !tau.is_finite() {
        return domain(format!("temperature must be positive, got {tau}"));
    }
    if bank.is_empty() {
        log::warn!("prototype bank is empty; contrastive loss is zero");
        return Ok(BankGraded::default());
    }
    let dim = bank.entries.values().next().map_or(0, |e| e.vector.len());
    let mut d_vectors: BTreeMap<BinKey, Vec<f64>> =
        bank.keys().map(|&k| (k, vec![0.0; dim])).collect();

    let lse = log_sum_exp(bank.entries.values().map(|e| -e.uncertainty));
    let weights: BTreeMap<BinKey, f64> = bank
        .entries
        .iter()
        .map(|(&k, e)| (k, (-e.uncertainty - lse).exp()))
        .collect();

    let mut per_anchor = BTreeMap::new();
    let mut value = 0.0;
    for (&key, entry) in &bank.entries {
        let sets = build_contrast_sets(bank, key)?;
        let pos = sets.vectors(bank, &sets.positives);
        let neg = sets.vectors(bank, &sets.negatives);
        let g = contrastive_consistency_loss(&entry.vector, &pos, &neg, tau)?;
        let w = weights[&key];
        value += w * g.value;
        per_anchor.insert(key, g.value);
        let acc = |dst: &mut Vec<f64>, src: &[f64]| {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        };
        acc(d_vectors.get_mut(&key).unwrap(), &g.d_anchor);
        for (k, d) in sets.positives.iter().zip(&g.d_positives) {
            acc(d_vectors.get_mut(k).unwrap(), d);
        }
        for (k, d) in sets.negatives.iter().zip(&g.d_negatives) {
            acc(d_vectors.get_mut(k).unwrap(), d);
        }
    }
    // d/dH_p of sum_q w_q L_q with w = softmax(-H): -w_p (L_p - value).
    let d_uncertainty = per_anchor
        .iter()
        .map(|(k, &l)| (*k, -weights[k] * (l - value)))
        .collect();
    Ok(BankGraded {
        value,
        weights,
        per_anchor,
        d_vectors,
        d_uncertainty,
    })
}

fn cosine(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let na = dot(a, a).sqrt().max(1e-12);
    let nb = dot(b, b).sqrt().max(1e-12);
    (dot(a, b) / (na * nb), na, nb)
}

/// Gradient of `cos(a, b)` with respect to `a`, scaled by `g`, accumulated into `out`.
fn cosine_backward(a: &[f64], b: &[f64], cos: f64, na: f64, nb: f64, g: f64, out: &mut [f64]) {
    for i in 0..a.len() {
        out[i] += g * (b[i] / (na * nb) - cos * a[i] / (na * na));
    }
}

/// Pixel-to-teacher-prototype contrastive loss.
#[derive(Clone, Debug)]
pub struct AuxGraded {
    pub value: f64,
    pub contributing_pixels: usize,
    /// Pixel-major gradient per input image.
    pub d_features: Vec<Vec<f64>>,
    pub d_prototypes: Vec<Option<Vec<f64>>>,
}

/// Mean over labelled pixels of the InfoNCE loss that pulls each pixel feature towards its
/// class's teacher prototype and away from the other classes' prototypes (cosine similarity).
/// Pixels whose class has no prototype are skipped.
pub fn pixel_prototype_aux_loss(
    items: &[(&FeatureMap, &SegMask)],
    prototypes: &[Option<Vec<f64>>],
    tau: f64,
) -> Result<AuxGraded> {
    if tau <= 0.0 || !tau.is_finite() {
        return domain(format!("temperature must be positive, got {tau}"));
    }
    let mut d_features: Vec<Vec<f64>> =
        items.iter().map(|(f, _)| vec![0.0; f.data.len()]).collect();
    let mut d_prototypes: Vec<Option<Vec<f64>>> = prototypes
        .iter()
        .map(|p| p.as_ref().map(|v| vec![0.0; v.len()]))
        .collect();
    if prototypes.iter().all(|p| p.is_none()) {
        log::warn!("no teacher prototypes available; auxiliary loss is zero");
        return Ok(AuxGraded {
            value: 0.0,
            contributing_pixels: 0,
            d_features,
            d_prototypes,
        });
    }

    let mut total = 0.0;
    let mut count = 0usize;
    // Raw per-pixel gradients, rescaled by 1/count at the end.
    for (img, (feat, mask)) in items.iter().enumerate() {
        if feat.h != mask.height() || feat.w != mask.width() {
            return shape("features and labels are not aligned");
        }
        for (i, &l) in mask.labels().iter().enumerate() {
            let c = l as usize;
            let Some(Some(_)) = prototypes.get(c) else {
                continue;
            };
            let v = feat.pixel(i);
            let sims: Vec<(usize, f64, f64, f64)> = prototypes
                .iter()
                .enumerate()
                .filter_map(|(k, p)| {
                    p.as_ref().map(|p| {
                        let (cs, na, nb) = cosine(v, p);
                        (k, cs, na, nb)
                    })
                })
                .collect();
            let lz = log_sum_exp(sims.iter().map(|s| s.1 / tau));
            let own = sims.iter().find(|s| s.0 == c).unwrap();
            total += lz - own.1 / tau;
            count += 1;
            let dv = &mut d_features[img][i * feat.dim..(i + 1) * feat.dim];
            for &(k, cs, na, nb) in &sims {
                let soft = (cs / tau - lz).exp();
                let g = (soft - f64::from(k == c)) / tau;
                let p = prototypes[k].as_ref().unwrap();
                cosine_backward(v, p, cs, na, nb, g, dv);
                let dp = d_prototypes[k].as_mut().unwrap();
                cosine_backward(p, v, cs, nb, na, g, dp);
            }
        }
    }
    if count == 0 {
        return Ok(AuxGraded {
            value: 0.0,
            contributing_pixels: 0,
            d_features,
            d_prototypes,
        });
    }
    let inv = 1.0 / count as f64;
    d_features.iter_mut().flatten().for_each(|g| *g *= inv);
    d_prototypes
        .iter_mut()
        .flatten()
        .flatten()
        .for_each(|g| *g *= inv);
    Ok(AuxGraded {
        value: total * inv,
        contributing_pixels: count,
        d_features,
        d_prototypes,
    })
}

/// Mean squared difference between two probability maps.
pub fn consistency_loss(p_s: &ProbabilityMap, p_t: &ProbabilityMap) -> Result<PairGraded> {
    p_s.same_shape(p_t)?;
    let n = p_s.data.len() as f64;
    let mut value = 0.0;
    let mut d_first = vec![0.0; p_s.data.len()];
    let mut d_second = vec![0.0; p_s.data.len()];
    for (i, (a, b)) in p_s.data.iter().zip(&p_t.data).enumerate() {
        let d = a - b;
        value += d * d;
        d_first[i] = 2.0 * d / n;
        d_second[i] = -2.0 * d / n;
    }
    Ok(PairGraded {
        value: value / n,
        d_first,
        d_second,
    })
}

fn pixel_entropy_raw(p: &ProbabilityMap, i: usize) -> f64 {
    -(0..p.classes)
        .map(|c| p.at(c, i) * (p.at(c, i) + UNCERTAINTY_EPS).ln())
        .sum::<f64>()
}

/// Per-pixel prediction entropy, clamped at zero.
pub fn pixel_uncertainty(p: &ProbabilityMap) -> Vec<f64> {
    (0..p.num_pixels())
        .map(|i| pixel_entropy_raw(p, i).max(0.0))
        .collect()
}

/// `(|u_s| + |u_t|) / (2 h w)` with Euclidean norms over pixels.
pub fn uncertainty_loss(u_s: &[f64], u_t: &[f64]) -> Result<f64> {
    if u_s.len() != u_t.len() || u_s.is_empty() {
        return shape("uncertainty maps differ in size");
    }
    let norm = |u: &[f64]| u.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok((norm(u_s) + norm(u_t)) / (2.0 * u_s.len() as f64))
}

/// Uncertainty loss of two branches with gradients on both probability maps.
pub fn uncertainty_loss_graded(p_s: &ProbabilityMap, p_t: &ProbabilityMap) -> Result<PairGraded> {
    p_s.same_shape(p_t)?;
    let n = p_s.num_pixels();
    let scale = 1.0 / (2.0 * n as f64);
    let branch_grad = |p: &ProbabilityMap| -> (f64, Vec<f64>) {
        let u = pixel_uncertainty(p);
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut g = vec![0.0; p.data.len()];
        if norm > 0.0 {
            for i in 0..n {
                if pixel_entropy_raw(p, i) <= 0.0 {
                    continue;
                }
                let du = scale * u[i] / norm;
                for c in 0..p.classes {
                    let v = p.at(c, i);
                    g[c * n + i] = du * (-(v + UNCERTAINTY_EPS).ln() - v / (v + UNCERTAINTY_EPS));
                }
            }
        }
        (norm, g)
    };
    let (ns, d_first) = branch_grad(p_s);
    let (nt, d_second) = branch_grad(p_t);
    Ok(PairGraded {
        value: (ns + nt) * scale,
        d_first,
        d_second,
    })
}

/// Ramp-up weight of the consistency objective, reaching 0.1 at `t_ramp` and held there.
pub fn lambda_c_schedule(t: u64, t_ramp: u64) -> f64 {
    if t >= t_ramp {
        return 0.1;
    }
    let r = 1.0 - t as f64 / t_ramp as f64;
    0.1 * (-5.0 * r * r).exp()
}

/// Which unsupervised terms participate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    pub l_con: bool,
    pub l_u: bool,
    pub l_aux: bool,
    pub l_pc: bool,
}

impl Toggles {
    pub const ALL: Self = Self {
        l_con: true,
        l_u: true,
        l_aux: true,
        l_pc: true,
    };
    pub const NONE: Self = Self {
        l_con: false,
        l_u: false,
        l_aux: false,
        l_pc: false,
    };

    pub fn any(&self) -> bool {
        self.l_con || self.l_u || self.l_aux || self.l_pc
    }

    /// Compact label such as `con+u+aux+pc`, or `sup` when everything is off.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [
            (self.l_con, "con"),
            (self.l_u, "u"),
            (self.l_aux, "aux"),
            (self.l_pc, "pc"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if parts.is_empty() {
            "sup".into()
        } else {
            parts.join("+")
        }
    }
}

impl Default for Toggles {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_aux: f64,
    pub lambda_pc: f64,
    pub lambda_u: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_aux: 0.3,
            lambda_pc: 0.1,
            lambda_u: 0.01,
        }
    }
}

/// Raw loss terms of one step, before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub l_sup: f64,
    pub l_pc: f64,
    pub l_aux: f64,
    pub l_con: f64,
    pub l_u: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_sup: f64,
    pub l_pc: f64,
    pub l_aux: f64,
    pub l_con: f64,
    pub l_u: f64,
    pub l_c: f64,
    pub l_total: f64,
    pub lambda_c: f64,
    pub lambda_aux: f64,
    pub lambda_pc: f64,
    pub lambda_u: f64,
}

/// Combines the terms: `l_c = l_con + lambda_u * l_u` and
/// `l_total = l_sup + lambda_c(t) * l_c + lambda_aux * l_aux + lambda_pc * l_pc`.
/// Disabled terms are zeroed.
pub fn total_loss(
    parts: LossParts,
    toggles: Toggles,
    weights: LossWeights,
    t: u64,
    t_ramp: u64,
) -> Result<LossBundle> {
    let gate = |on: bool, v: f64| if on { v } else { 0.0 };
    let named = [
        ("l_sup", parts.l_sup),
        ("l_pc", gate(toggles.l_pc, parts.l_pc)),
        ("l_aux", gate(toggles.l_aux, parts.l_aux)),
        ("l_con", gate(toggles.l_con, parts.l_con)),
        ("l_u", gate(toggles.l_u, parts.l_u)),
    ];
    if let Some((component, _)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(PccsError::NonFinite { component });
    }
    let [(_, l_sup), (_, l_pc), (_, l_aux), (_, l_con), (_, l_u)] = named;
    let lambda_c = lambda_c_schedule(t, t_ramp);
    let l_c = l_con + weights.lambda_u * l_u;
    let l_total = l_sup + lambda_c * l_c + weights.lambda_aux * l_aux + weights.lambda_pc * l_pc;
    Ok(LossBundle {
        l_sup,
        l_pc,
        l_aux,
        l_con,
        l_u,
        l_c,
        l_total,
        lambda_c,
        lambda_aux: weights.lambda_aux,
        lambda_pc: weights.lambda_pc,
        lambda_u: weights.lambda_u,
    })
}
