//! Segmentation masks and exact signed distance maps.
//!
//! A class boundary is the set of foreground pixels that have at least one 4-neighbour in the
//! background, with out-of-image positions counted as background. Distances are Euclidean,
//! measured between pixel centres, and rounded to the nearest integer (half away from zero).
//! Interior pixels carry negative values, boundary pixels zero, and exterior pixels positive
//! values.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Result};

/// Plane value used for every pixel of a class that does not occur in the mask.
pub const ABSENT: i32 = i32::MIN;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    GroundTruth,
    Pseudo,
}

/// Per-pixel class labels of an `h × w` image, stored row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMask {
    h: usize,
    w: usize,
    num_classes: usize,
    labels: Vec<u8>,
    provenance: Provenance,
}

impl SegMask {
    pub fn new(
        h: usize,
        w: usize,
        num_classes: usize,
        labels: Vec<u8>,
        provenance: Provenance,
    ) -> Result<Self> {
        if h == 0 || w == 0 {
            return domain(format!("mask must be non-empty, got {h}x{w}"));
        }
        if !(2..=256).contains(&num_classes) {
            return domain(format!(
                "num_classes must be in [2, 256], got {num_classes}"
            ));
        }
        if labels.len() != h * w {
            return shape(format!("{} labels for a {h}x{w} mask", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return domain(format!("label {bad} outside [0, {num_classes})"));
        }
        Ok(Self {
            h,
            w,
            num_classes,
            labels,
            provenance,
        })
    }

    pub fn filled(h: usize, w: usize, num_classes: usize, label: u8) -> Result<Self> {
        Self::new(
            h,
            w,
            num_classes,
            vec![label; h * w],
            Provenance::GroundTruth,
        )
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.w + x]
    }

    /// Binary indicator of `class_id`, row-major.
    pub fn class_indicator(&self, class_id: usize) -> Vec<bool> {
        self.labels
            .iter()
            .map(|&l| l as usize == class_id)
            .collect()
    }

    pub fn transposed(&self) -> Self {
        let mut labels = vec![0u8; self.labels.len()];
        for y in 0..self.h {
            for x in 0..self.w {
                labels[x * self.h + y] = self.labels[y * self.w + x];
            }
        }
        Self {
            h: self.w,
            w: self.h,
            labels,
            ..self.clone()
        }
    }

    /// Labels present in the mask, ascending.
    pub fn classes_present(&self) -> BTreeSet<u8> {
        self.labels.iter().copied().collect()
    }

    /// Downsamples by an integer factor using a majority vote in each `factor × factor` block.
    /// Ties go to the lowest label.
    pub fn downsample_majority(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.h.is_multiple_of(factor) || !self.w.is_multiple_of(factor) {
            return domain(format!(
                "cannot downsample {}x{} by {factor}",
                self.h, self.w
            ));
        }
        let (oh, ow) = (self.h / factor, self.w / factor);
        let mut counts = vec![0usize; self.num_classes];
        let mut out = Vec::with_capacity(oh * ow);
        for by in 0..oh {
            for bx in 0..ow {
                counts.iter_mut().for_each(|c| *c = 0);
                for y in by * factor..(by + 1) * factor {
                    for x in bx * factor..(bx + 1) * factor {
                        counts[self.get(y, x) as usize] += 1;
                    }
                }
                let mut best = 0;
                for (c, &n) in counts.iter().enumerate() {
                    if n > counts[best] {
                        best = c;
                    }
                }
                out.push(best as u8);
            }
        }
        Self::new(oh, ow, self.num_classes, out, self.provenance)
    }
}

/// Signed distance plane of one class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DistancePlane {
    pub h: usize,
    pub w: usize,
    /// Row-major quantized signed distances, or [`ABSENT`] everywhere when the class is missing.
    pub values: Vec<i32>,
    pub present: bool,
}

impl DistancePlane {
    fn absent(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            values: vec![ABSENT; h * w],
            present: false,
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> i32 {
        self.values[y * self.w + x]
    }

    pub fn transposed(&self) -> Self {
        let mut values = vec![0; self.values.len()];
        for y in 0..self.h {
            for x in 0..self.w {
                values[x * self.h + y] = self.values[y * self.w + x];
            }
        }
        Self {
            h: self.w,
            w: self.h,
            values,
            present: self.present,
        }
    }
}

/// Signed distance planes for every class of a mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignedDistanceMap {
    pub planes: Vec<DistancePlane>,
}

impl SignedDistanceMap {
    pub fn from_mask(mask: &SegMask) -> Self {
        let planes = (0..mask.num_classes())
            .map(|c| signed_distance_map(mask, c).expect("class index in range"))
            .collect();
        Self { planes }
    }

    pub fn num_classes(&self) -> usize {
        self.planes.len()
    }

    pub fn height(&self) -> usize {
        self.planes.first().map_or(0, |p| p.h)
    }

    pub fn width(&self) -> usize {
        self.planes.first().map_or(0, |p| p.w)
    }

    pub fn class_present(&self, class_id: usize) -> bool {
        self.planes[class_id].present
    }
}

/// Foreground pixels with a background 4-neighbour (out-of-image counts as background).
pub fn boundary_of(fg: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !fg[i] {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !fg[i - w]
                || !fg[i + w]
                || !fg[i - 1]
                || !fg[i + 1];
            out[i] = edge;
        }
    }
    out
}

/// Exact squared Euclidean distance from every pixel to the nearest seed pixel.
///
/// Separable lower-envelope algorithm (Felzenszwalb & Huttenlocher) on integer distances.
/// Returns `None` when there are no seeds.
pub fn squared_distance_to(seeds: &[bool], h: usize, w: usize) -> Option<Vec<i64>> {
    if !seeds.iter().any(|&s| s) {
        return None;
    }
    const INF: i64 = i64::MAX / 4;
    // Column pass: vertical distance to the nearest seed in the same column.
    let mut col = vec![INF; h * w];
    for x in 0..w {
        let mut last: Option<usize> = None;
        for y in 0..h {
            if seeds[y * w + x] {
                last = Some(y);
            }
            if let Some(s) = last {
                let d = (y - s) as i64;
                col[y * w + x] = d * d;
            }
        }
        last = None;
        for y in (0..h).rev() {
            if seeds[y * w + x] {
                last = Some(y);
            }
            if let Some(s) = last {
                let d = (s - y) as i64;
                col[y * w + x] = col[y * w + x].min(d * d);
            }
        }
    }
    // Row pass: lower envelope of parabolas centred at columns with finite cost.
    let mut out = vec![0i64; h * w];
    let mut verts: Vec<usize> = Vec::with_capacity(w);
    let mut bounds: Vec<f64> = Vec::with_capacity(w + 1);
    for y in 0..h {
        let f = &col[y * w..(y + 1) * w];
        verts.clear();
        bounds.clear();
        for q in 0..w {
            if f[q] >= INF {
                continue;
            }
            loop {
                match verts.last() {
                    None => {
                        verts.push(q);
                        bounds.push(f64::NEG_INFINITY);
                        break;
                    }
                    Some(&v) => {
                        let s = intersect(f, v, q);
                        if s <= *bounds.last().unwrap() {
                            verts.pop();
                            bounds.pop();
                        } else {
                            verts.push(q);
                            bounds.push(s);
                            break;
                        }
                    }
                }
            }
        }
        // Every row has at least one finite column because some column holds a seed.
        let mut k = 0;
        for q in 0..w {
            while k + 1 < verts.len() && bounds[k + 1] < q as f64 {
                k += 1;
            }
            let v = verts[k];
            let dx = q as i64 - v as i64;
            out[y * w + q] = dx * dx + f[v];
        }
    }
    Some(out)
}

fn intersect(f: &[i64], v: usize, q: usize) -> f64 {
    let (vf, qf) = (v as f64, q as f64);
    ((f[q] as f64 + qf * qf) - (f[v] as f64 + vf * vf)) / (2.0 * (qf - vf))
}

#[inline]
fn quantize(d2: i64) -> i32 {
    (d2 as f64).sqrt().round() as i32
}

fn check_class(mask: &SegMask, class_id: usize) -> Result<()> {
    if class_id >= mask.num_classes() {
        return domain(format!(
            "class {class_id} outside [0, {})",
            mask.num_classes()
        ));
    }
    Ok(())
}

fn assemble(fg: &[bool], boundary: &[bool], d2: &[i64], h: usize, w: usize) -> DistancePlane {
    let values = (0..h * w)
        .map(|i| {
            if boundary[i] {
                0
            } else if fg[i] {
                -quantize(d2[i])
            } else {
                quantize(d2[i])
            }
        })
        .collect();
    DistancePlane {
        h,
        w,
        values,
        present: true,
    }
}

/// Signed distance plane of `class_id` using the exact separable transform.
pub fn signed_distance_map(mask: &SegMask, class_id: usize) -> Result<DistancePlane> {
    check_class(mask, class_id)?;
    let (h, w) = (mask.height(), mask.width());
    let fg = mask.class_indicator(class_id);
    let boundary = boundary_of(&fg, h, w);
    match squared_distance_to(&boundary, h, w) {
        None => Ok(DistancePlane::absent(h, w)),
        Some(d2) => Ok(assemble(&fg, &boundary, &d2, h, w)),
    }
}

/// Reference implementation: nearest boundary pixel by exhaustive search.
pub fn signed_distance_map_bruteforce(mask: &SegMask, class_id: usize) -> Result<DistancePlane> {
    check_class(mask, class_id)?;
    let (h, w) = (mask.height(), mask.width());
    let fg = mask.class_indicator(class_id);
    let boundary = boundary_of(&fg, h, w);
    let pts: Vec<(i64, i64)> = (0..h * w)
        .filter(|&i| boundary[i])
        .map(|i| ((i / w) as i64, (i % w) as i64))
        .collect();
    if pts.is_empty() {
        return Ok(DistancePlane::absent(h, w));
    }
    let d2: Vec<i64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as i64, (i % w) as i64);
            pts.iter()
                .map(|&(by, bx)| (y - by) * (y - by) + (x - bx) * (x - bx))
                .min()
                .unwrap()
        })
        .collect();
    Ok(assemble(&fg, &boundary, &d2, h, w))
}

/// Pixel count per distance value. Absent planes give an empty histogram.
pub fn distance_histogram(plane: &DistancePlane) -> BTreeMap<i32, usize> {
    let mut hist = BTreeMap::new();
    if !plane.present {
        return hist;
    }
    for &v in &plane.values {
        *hist.entry(v).or_insert(0) += 1;
    }
    hist
}

/// Strictly negative (interior) distance values occurring in the plane.
pub fn interior_distance_set(plane: &DistancePlane) -> BTreeSet<i32> {
    if !plane.present {
        return BTreeSet::new();
    }
    plane.values.iter().copied().filter(|&v| v < 0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(h: usize, w: usize, fg: &[(usize, usize)]) -> SegMask {
        let mut labels = vec![0u8; h * w];
        for &(y, x) in fg {
            labels[y * w + x] = 1;
        }
        SegMask::new(h, w, 2, labels, Provenance::GroundTruth).unwrap()
    }

    #[test]
    fn single_pixel_plane() {
        let m = mask_from(5, 5, &[(2, 2)]);
        let p = signed_distance_map(&m, 1).unwrap();
        assert_eq!(p.get(2, 2), 0);
        assert_eq!(p.get(2, 3), 1);
        assert_eq!(p.get(0, 0), 3);
        assert_eq!(distance_histogram(&p).values().sum::<usize>(), 25);
        assert!(interior_distance_set(&p).is_empty());
    }

    #[test]
    fn full_frame_object_has_border_boundary() {
        let m = SegMask::filled(3, 3, 2, 1).unwrap();
        let p = signed_distance_map(&m, 1).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                let expect = if (y, x) == (1, 1) { -1 } else { 0 };
                assert_eq!(p.get(y, x), expect);
            }
        }
        let hist = distance_histogram(&p);
        assert_eq!(hist, BTreeMap::from([(-1, 1), (0, 8)]));
        assert_eq!(interior_distance_set(&p), BTreeSet::from([-1]));
        assert_eq!(p, signed_distance_map_bruteforce(&m, 1).unwrap());
    }

    #[test]
    fn absent_class_gives_sentinel_plane() {
        let m = SegMask::filled(4, 4, 3, 0).unwrap();
        for f in [signed_distance_map, signed_distance_map_bruteforce] {
            let p = f(&m, 2).unwrap();
            assert!(!p.present);
            assert!(p.values.iter().all(|&v| v == ABSENT));
            assert!(distance_histogram(&p).is_empty());
            assert!(interior_distance_set(&p).is_empty());
        }
    }

    #[test]
    fn class_out_of_range_is_rejected() {
        let m = SegMask::filled(4, 4, 2, 0).unwrap();
        assert!(signed_distance_map(&m, 2).is_err());
        assert!(signed_distance_map_bruteforce(&m, 5).is_err());
    }

    #[test]
    fn mask_validation() {
        assert!(SegMask::new(2, 2, 2, vec![0, 1, 2, 0], Provenance::GroundTruth).is_err());
        assert!(SegMask::new(0, 2, 2, vec![], Provenance::GroundTruth).is_err());
        assert!(SegMask::new(2, 2, 2, vec![0, 1, 1], Provenance::GroundTruth).is_err());
        assert!(SegMask::new(2, 2, 1, vec![0; 4], Provenance::GroundTruth).is_err());
    }

    #[test]
    fn majority_downsample() {
        let m = SegMask::new(2, 4, 2, vec![1, 1, 0, 0, 1, 0, 0, 1], Provenance::Pseudo).unwrap();
        let d = m.downsample_majority(2).unwrap();
        assert_eq!(d.labels(), &[1, 0]);
        assert_eq!(d.provenance(), Provenance::Pseudo);
    }

    #[test]
    fn large_disc_matches_bruteforce() {
        let n = 40;
        let mut fg = Vec::new();
        for y in 0..n {
            for x in 0..n {
                let (dy, dx) = (y as f64 - 19.5, x as f64 - 22.0);
                if dy * dy + dx * dx < 150.0 {
                    fg.push((y, x));
                }
            }
        }
        let m = mask_from(n, n, &fg);
        for c in 0..2 {
            assert_eq!(
                signed_distance_map(&m, c).unwrap(),
                signed_distance_map_bruteforce(&m, c).unwrap()
            );
        }
    }
}
