//! Boundary-distance prototypes and the teacher prototype set.
//!
//! A prototype is the mean projected feature of all pixels of one class that sit at the same
//! (quantized, strictly interior) distance from that class's boundary. A batch yields a
//! [`PrototypeBank`] keyed by `(class, distance)`; every entry can act as a contrastive anchor.
//! The [`TeacherPrototypeSet`] holds one slowly updated prototype per class across steps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Result};
use crate::geometry::{SegMask, SignedDistanceMap};

/// Pixel-major feature map: the vector of pixel `(y, x)` is `data[(y * w + x) * dim..][..dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * dim {
            return shape(format!(
                "{} values for a {h}x{w}x{dim} feature map",
                data.len()
            ));
        }
        Ok(Self { h, w, dim, data })
    }

    pub fn zeros(h: usize, w: usize, dim: usize) -> Self {
        Self {
            h,
            w,
            dim,
            data: vec![0.0; h * w * dim],
        }
    }

    /// Converts a channel-major (`C × H × W`) buffer.
    pub fn from_planar(h: usize, w: usize, dim: usize, planar: &[f64]) -> Self {
        let n = h * w;
        let mut data = vec![0.0; n * dim];
        for k in 0..dim {
            let plane = &planar[k * n..(k + 1) * n];
            for (i, &v) in plane.iter().enumerate() {
                data[i * dim + k] = v;
            }
        }
        Self { h, w, dim, data }
    }

    /// Channel-major copy of `self`.
    pub fn to_planar(&self) -> Vec<f64> {
        let n = self.h * self.w;
        let mut out = vec![0.0; n * self.dim];
        for i in 0..n {
            for k in 0..self.dim {
                out[k * n + i] = self.data[i * self.dim + k];
            }
        }
        out
    }

    #[inline]
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn pixel_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn num_pixels(&self) -> usize {
        self.h * self.w
    }
}

/// `(class, distance)` with distance strictly negative.
pub type BinKey = (usize, i32);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeEntry {
    pub vector: Vec<f64>,
    pub count: usize,
    pub uncertainty: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    pub entries: BTreeMap<BinKey, PrototypeEntry>,
    pub built_from: String,
    /// Per image, the bin each pixel contributed to.
    assignments: Vec<Vec<Option<BinKey>>>,
}

/// Interior bin of every pixel. Depths beyond `max_bin` merge into `-max_bin`.
pub fn bin_assignment(sdm: &SignedDistanceMap, max_bin: i32) -> Vec<Option<BinKey>> {
    let n = sdm.height() * sdm.width();
    let mut out = vec![None; n];
    for (c, plane) in sdm.planes.iter().enumerate() {
        if !plane.present {
            continue;
        }
        for (i, &v) in plane.values.iter().enumerate() {
            if v < 0 {
                out[i] = Some((c, v.max(-max_bin)));
            }
        }
    }
    out
}

impl PrototypeBank {
    /// Mean feature per `(class, interior distance)` over every image of a batch.
    pub fn extract(
        items: &[(&FeatureMap, &SignedDistanceMap)],
        max_bin: i32,
        built_from: impl Into<String>,
    ) -> Result<Self> {
        if max_bin < 1 {
            return domain(format!("max_bin must be >= 1, got {max_bin}"));
        }
        let mut sums: BTreeMap<BinKey, (Vec<f64>, usize)> = BTreeMap::new();
        let mut assignments = Vec::with_capacity(items.len());
        for (feat, sdm) in items {
            if feat.h != sdm.height() || feat.w != sdm.width() {
                return shape(format!(
                    "features {}x{} vs distance map {}x{}",
                    feat.h,
                    feat.w,
                    sdm.height(),
                    sdm.width()
                ));
            }
            let assign = bin_assignment(sdm, max_bin);
            for (i, key) in assign.iter().enumerate() {
                if let Some(key) = key {
                    let slot = sums.entry(*key).or_insert_with(|| (vec![0.0; feat.dim], 0));
                    for (s, &f) in slot.0.iter_mut().zip(feat.pixel(i)) {
                        *s += f;
                    }
                    slot.1 += 1;
                }
            }
            assignments.push(assign);
        }
        let entries = sums
            .into_iter()
            .map(|(k, (sum, count))| {
                let inv = 1.0 / count as f64;
                let vector = sum.into_iter().map(|s| s * inv).collect();
                (
                    k,
                    PrototypeEntry {
                        vector,
                        count,
                        uncertainty: 0.0,
                    },
                )
            })
            .collect();
        Ok(Self {
            entries,
            built_from: built_from.into(),
            assignments,
        })
    }

    /// Builds a bank directly from entries; it has no pixel assignments.
    pub fn from_entries(entries: BTreeMap<BinKey, PrototypeEntry>) -> Self {
        Self {
            entries,
            built_from: String::new(),
            assignments: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &BinKey> {
        self.entries.keys()
    }

    /// Fills every entry's uncertainty from the classifier's output entropy.
    pub fn assign_uncertainties<F>(&mut self, classifier: F) -> Result<()>
    where
        F: Fn(&[f64]) -> Vec<f64>,
    {
        for entry in self.entries.values_mut() {
            entry.uncertainty = prototype_uncertainty(&entry.vector, &classifier)?;
        }
        Ok(())
    }

    /// Chains per-prototype gradients back to the pixel features each prototype averaged.
    /// Returns one pixel-major gradient buffer per image in extraction order.
    pub fn backprop_to_pixels(
        &self,
        grads: &BTreeMap<BinKey, Vec<f64>>,
        dims: &[(usize, usize)],
    ) -> Vec<Vec<f64>> {
        self.assignments
            .iter()
            .zip(dims)
            .map(|(assign, &(n, dim))| {
                let mut out = vec![0.0; n * dim];
                for (i, key) in assign.iter().enumerate() {
                    let Some(key) = key else { continue };
                    let Some(g) = grads.get(key) else { continue };
                    let inv = 1.0 / self.entries[key].count as f64;
                    for (o, &gv) in out[i * dim..(i + 1) * dim].iter_mut().zip(g) {
                        *o += gv * inv;
                    }
                }
                out
            })
            .collect()
    }
}

/// Anchor with its positive and negative prototypes, referenced by key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContrastSets {
    pub anchor: BinKey,
    pub positives: Vec<BinKey>,
    pub negatives: Vec<BinKey>,
}

impl ContrastSets {
    pub fn vectors<'a>(&self, bank: &'a PrototypeBank, keys: &[BinKey]) -> Vec<&'a [f64]> {
        keys.iter()
            .map(|k| bank.entries[k].vector.as_slice())
            .collect()
    }
}

/// Positives are the anchor's other same-class prototypes, negatives all other-class ones.
pub fn build_contrast_sets(bank: &PrototypeBank, anchor: BinKey) -> Result<ContrastSets> {
    if !bank.entries.contains_key(&anchor) {
        return domain(format!("anchor {anchor:?} not in prototype bank"));
    }
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for &key in bank.entries.keys() {
        if key == anchor {
            continue;
        }
        if key.0 == anchor.0 {
            positives.push(key);
        } else {
            negatives.push(key);
        }
    }
    Ok(ContrastSets {
        anchor,
        positives,
        negatives,
    })
}

/// Mean feature over pixels labelled `class_id`, or `None` if there are none.
pub fn class_mean_feature(
    features: &FeatureMap,
    mask: &SegMask,
    class_id: usize,
) -> Result<Option<Vec<f64>>> {
    Ok(
        class_mean_features(&[(features, mask)], mask.num_classes())?
            .into_iter()
            .nth(class_id)
            .flatten(),
    )
}

/// Per-class mean features pooled over several images.
pub fn class_mean_features(
    items: &[(&FeatureMap, &SegMask)],
    num_classes: usize,
) -> Result<Vec<Option<Vec<f64>>>> {
    let dim = items.first().map_or(0, |(f, _)| f.dim);
    let mut sums = vec![vec![0.0; dim]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (feat, mask) in items {
        if feat.h != mask.height() || feat.w != mask.width() || feat.dim != dim {
            return shape("features and mask are not aligned");
        }
        for (i, &l) in mask.labels().iter().enumerate() {
            let c = l as usize;
            if c >= num_classes {
                continue;
            }
            counts[c] += 1;
            for (s, &f) in sums[c].iter_mut().zip(feat.pixel(i)) {
                *s += f;
            }
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect())
}

/// One prototype-updating step for the teacher.
///
/// With a class mean `v`: `(mu + gamma - 1) * p2 + (1 - mu) * p1 + (1 - gamma) * v`, the three
/// weights summing to one. Without it, the plain moving average `mu * p2 + (1 - mu) * p1`.
pub fn update_teacher_prototype(
    p2: &[f64],
    p1: &[f64],
    v: Option<&[f64]>,
    mu: f64,
    gamma: f64,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&mu) || !(0.0..=1.0).contains(&gamma) {
        return domain(format!("mu={mu} and gamma={gamma} must lie in [0, 1]"));
    }
    if p1.len() != p2.len() || v.is_some_and(|v| v.len() != p2.len()) {
        return shape("prototype dimensions differ");
    }
    match v {
        Some(v) => {
            if mu + gamma < 1.0 {
                return domain(format!("mu + gamma must be >= 1, got {}", mu + gamma));
            }
            // Written as a correction of p2 so that p1 = p2 = v is an exact fixed point.
            Ok((0..p2.len())
                .map(|k| p2[k] + (1.0 - mu) * (p1[k] - p2[k]) + (1.0 - gamma) * (v[k] - p2[k]))
                .collect())
        }
        None => Ok((0..p2.len())
            .map(|k| p2[k] + (1.0 - mu) * (p1[k] - p2[k]))
            .collect()),
    }
}

/// Shannon entropy (natural log) of the classifier output for `p`.
pub fn prototype_uncertainty<F>(p: &[f64], classifier: F) -> Result<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let probs = classifier(p);
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || probs.iter().any(|&v| !(-1e-6..=1.0 + 1e-6).contains(&v)) {
        return domain(format!(
            "classifier output is not a probability vector (sum {sum})"
        ));
    }
    Ok(probs
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum::<f64>()
        .max(0.0))
}

/// Class-level teacher prototypes carried across training steps.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TeacherPrototypeSet {
    pub prototypes: Vec<Option<Vec<f64>>>,
    /// Teacher-branch class means from the most recent update.
    pub class_means: Vec<Option<Vec<f64>>>,
    pub steps: u64,
}

impl TeacherPrototypeSet {
    pub fn new(num_classes: usize) -> Self {
        Self {
            prototypes: vec![None; num_classes],
            class_means: vec![None; num_classes],
            steps: 0,
        }
    }

    pub fn num_initialized(&self) -> usize {
        self.prototypes.iter().filter(|p| p.is_some()).count()
    }

    /// Updates every class seen by the student this step. Classes seen for the first time
    /// start from the student prototype. `teacher_means` is ignored when `use_history` is off.
    pub fn update(
        &mut self,
        student_means: &[Option<Vec<f64>>],
        teacher_means: &[Option<Vec<f64>>],
        mu: f64,
        gamma: f64,
        use_history: bool,
    ) -> Result<()> {
        if student_means.len() != self.prototypes.len() {
            return shape("class count differs from teacher prototype set");
        }
        for (c, p1) in student_means.iter().enumerate() {
            let Some(p1) = p1 else { continue };
            let v = if use_history {
                teacher_means.get(c).and_then(|v| v.as_deref())
            } else {
                None
            };
            let next = match &self.prototypes[c] {
                None => p1.clone(),
                Some(p2) => update_teacher_prototype(p2, p1, v, mu, gamma)?,
            };
            if next.iter().any(|x| !x.is_finite()) {
                return domain(format!("teacher prototype of class {c} became non-finite"));
            }
            self.prototypes[c] = Some(next);
        }
        self.class_means = teacher_means.to_vec();
        self.steps += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Provenance;
    use approx::assert_abs_diff_eq;

    fn unit(dim: usize, k: usize, scale: f64) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[k] = scale;
        v
    }

    fn bank_with(keys: &[BinKey]) -> PrototypeBank {
        PrototypeBank::from_entries(
            keys.iter()
                .map(|&k| {
                    (
                        k,
                        PrototypeEntry {
                            vector: vec![1.0, 0.0],
                            count: 1,
                            uncertainty: 0.0,
                        },
                    )
                })
                .collect(),
        )
    }

    #[test]
    fn two_pixel_bin_mean() {
        // 4x4 all-class-1 mask: the four centre pixels form the (1, -1) bin.
        let mask = SegMask::filled(4, 4, 2, 1).unwrap();
        let sdm = SignedDistanceMap::from_mask(&mask);
        let mut feat = FeatureMap::zeros(4, 4, 8);
        feat.pixel_mut(5).copy_from_slice(&unit(8, 0, 1.0));
        feat.pixel_mut(6).copy_from_slice(&unit(8, 1, 1.0));
        feat.pixel_mut(9).copy_from_slice(&unit(8, 0, 1.0));
        feat.pixel_mut(10).copy_from_slice(&unit(8, 1, 1.0));
        let bank = PrototypeBank::extract(&[(&feat, &sdm)], 24, "t").unwrap();
        assert_eq!(bank.len(), 1);
        let e = &bank.entries[&(1, -1)];
        assert_eq!(e.count, 4);
        assert_eq!(&e.vector[..3], &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn single_pixel_bin_equals_feature() {
        let mask = SegMask::filled(3, 3, 2, 1).unwrap();
        let sdm = SignedDistanceMap::from_mask(&mask);
        let mut feat = FeatureMap::zeros(3, 3, 4);
        feat.pixel_mut(4).copy_from_slice(&[0.3, -1.0, 2.0, 0.25]);
        let bank = PrototypeBank::extract(&[(&feat, &sdm)], 24, "t").unwrap();
        assert_eq!(bank.entries[&(1, -1)].vector, vec![0.3, -1.0, 2.0, 0.25]);
        // Class 0 is absent, so it has no entries.
        assert!(bank.keys().all(|k| k.0 == 1));
    }

    #[test]
    fn extract_rejects_misaligned_features() {
        let mask = SegMask::filled(3, 3, 2, 1).unwrap();
        let sdm = SignedDistanceMap::from_mask(&mask);
        let feat = FeatureMap::zeros(4, 3, 4);
        assert!(PrototypeBank::extract(&[(&feat, &sdm)], 24, "t").is_err());
    }

    #[test]
    fn deep_bins_are_capped() {
        let mask = SegMask::filled(9, 9, 2, 1).unwrap();
        let sdm = SignedDistanceMap::from_mask(&mask);
        let feat = FeatureMap::zeros(9, 9, 2);
        let bank = PrototypeBank::extract(&[(&feat, &sdm)], 2, "t").unwrap();
        let keys: Vec<_> = bank.keys().copied().collect();
        assert_eq!(keys, vec![(1, -2), (1, -1)]);
        // Interior of the 9x9 frame: 7x7 pixels, 5x5 of which sit at depth >= 2.
        assert_eq!(bank.entries[&(1, -2)].count, 25);
        assert_eq!(bank.entries[&(1, -1)].count, 24);
    }

    #[test]
    fn contrast_sets_follow_class_membership() {
        let bank = bank_with(&[(1, -1), (1, -2), (2, -1)]);
        let s = build_contrast_sets(&bank, (1, -1)).unwrap();
        assert_eq!(s.positives, vec![(1, -2)]);
        assert_eq!(s.negatives, vec![(2, -1)]);

        let bank = bank_with(&[(1, -1), (2, -1), (2, -2)]);
        let s = build_contrast_sets(&bank, (2, -1)).unwrap();
        assert_eq!(s.positives, vec![(2, -2)]);
        assert_eq!(s.negatives, vec![(1, -1)]);

        let bank = bank_with(&[(0, -3)]);
        let s = build_contrast_sets(&bank, (0, -3)).unwrap();
        assert!(s.positives.is_empty() && s.negatives.is_empty());
        assert!(build_contrast_sets(&bank, (1, -1)).is_err());
    }

    #[test]
    fn class_means() {
        let mask = SegMask::new(1, 3, 3, vec![1, 1, 0], Provenance::Pseudo).unwrap();
        let mut feat = FeatureMap::zeros(1, 3, 3);
        feat.pixel_mut(0).copy_from_slice(&[2.0, 0.0, 0.0]);
        feat.pixel_mut(1).copy_from_slice(&[0.0, 2.0, 0.0]);
        feat.pixel_mut(2).copy_from_slice(&[5.0, 5.0, 5.0]);
        assert_eq!(
            class_mean_feature(&feat, &mask, 1).unwrap(),
            Some(vec![1.0, 1.0, 0.0])
        );
        assert_eq!(
            class_mean_feature(&feat, &mask, 0).unwrap(),
            Some(vec![5.0, 5.0, 5.0])
        );
        assert_eq!(class_mean_feature(&feat, &mask, 2).unwrap(), None);
    }

    #[test]
    fn teacher_update_values() {
        let f = [0.2, -0.7, 1.5];
        assert_eq!(
            update_teacher_prototype(&f, &f, Some(&f), 0.99, 0.999).unwrap(),
            f.to_vec()
        );
        let out =
            update_teacher_prototype(&[1.0, 0.0], &[0.0, 1.0], Some(&[1.0, 1.0]), 0.99, 0.999)
                .unwrap();
        assert_abs_diff_eq!(out[0], 0.990, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], 0.011, epsilon = 1e-12);
        let p1 = [3.0, -4.0];
        assert_eq!(
            update_teacher_prototype(&[9.0, 9.0], &p1, Some(&[7.0, 7.0]), 0.0, 1.0).unwrap(),
            p1
        );
        // Without history this is the plain moving average.
        let out = update_teacher_prototype(&[1.0], &[0.0], None, 0.99, 0.999).unwrap();
        assert_abs_diff_eq!(out[0], 0.99, epsilon = 1e-15);
    }

    #[test]
    fn teacher_update_rejects_bad_arguments() {
        assert!(update_teacher_prototype(&[1.0], &[1.0, 2.0], None, 0.9, 0.9).is_err());
        assert!(update_teacher_prototype(&[1.0], &[1.0], Some(&[1.0]), 0.2, 0.3).is_err());
        assert!(update_teacher_prototype(&[1.0], &[1.0], None, 1.5, 0.3).is_err());
    }

    #[test]
    fn uncertainty_values() {
        let u = prototype_uncertainty(&[0.0], |_| vec![1.0 / 3.0; 3]).unwrap();
        assert_abs_diff_eq!(u, 3f64.ln(), epsilon = 1e-12);
        assert_eq!(
            prototype_uncertainty(&[0.0], |_| vec![0.0, 1.0, 0.0]).unwrap(),
            0.0
        );
        let u = prototype_uncertainty(&[0.0], |_| vec![0.9, 0.1]).unwrap();
        assert_abs_diff_eq!(u, 0.325083, epsilon = 1e-6);
        assert!(prototype_uncertainty(&[0.0], |_| vec![0.9, 0.2]).is_err());
    }

    #[test]
    fn teacher_set_initializes_then_averages() {
        let mut set = TeacherPrototypeSet::new(2);
        set.update(
            &[None, Some(vec![1.0])],
            &[None, Some(vec![0.0])],
            0.5,
            1.0,
            true,
        )
        .unwrap();
        assert_eq!(set.prototypes, vec![None, Some(vec![1.0])]);
        set.update(
            &[None, Some(vec![3.0])],
            &[None, Some(vec![0.0])],
            0.5,
            1.0,
            true,
        )
        .unwrap();
        assert_eq!(set.prototypes[1], Some(vec![2.0]));
        assert_eq!(set.steps, 2);
    }
}
