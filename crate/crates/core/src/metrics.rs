//! Overlap and surface-distance metrics between two label masks.
//!
//! Surface metrics use the same 4-neighbour boundary as the distance maps and pool the directed
//! boundary-to-boundary distances of both directions. They are undefined (`None`) unless both
//! masks contain the class. Both-empty masks count as a perfect overlap.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{shape, Result};
use crate::geometry::{boundary_of, squared_distance_to, SegMask};

fn check(pred: &SegMask, gt: &SegMask) -> Result<()> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return shape(format!(
            "prediction {}x{} vs reference {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        ));
    }
    Ok(())
}

/// Dice and Jaccard of class `class_id`.
pub fn dice_jaccard(pred: &SegMask, gt: &SegMask, class_id: usize) -> Result<(f64, f64)> {
    check(pred, gt)?;
    let (mut a, mut b, mut inter) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        let (p, g) = (p as usize == class_id, g as usize == class_id);
        a += p as usize;
        b += g as usize;
        inter += (p && g) as usize;
    }
    if a == 0 && b == 0 {
        return Ok((1.0, 1.0));
    }
    let dice = 2.0 * inter as f64 / (a + b) as f64;
    let jaccard = inter as f64 / (a + b - inter) as f64;
    Ok((dice, jaccard))
}

/// Percentile with linear interpolation between closest ranks (inclusive definition).
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// All directed boundary distances, both ways, or `None` if either boundary is empty.
pub fn pooled_boundary_distances(
    pred: &SegMask,
    gt: &SegMask,
    class_id: usize,
) -> Result<Option<Vec<f64>>> {
    check(pred, gt)?;
    let (h, w) = (pred.height(), pred.width());
    let bp = boundary_of(&pred.class_indicator(class_id), h, w);
    let bg = boundary_of(&gt.class_indicator(class_id), h, w);
    let (Some(to_gt), Some(to_pred)) = (
        squared_distance_to(&bg, h, w),
        squared_distance_to(&bp, h, w),
    ) else {
        return Ok(None);
    };
    let mut d: Vec<f64> = (0..h * w)
        .filter(|&i| bp[i])
        .map(|i| (to_gt[i] as f64).sqrt())
        .chain(
            (0..h * w)
                .filter(|&i| bg[i])
                .map(|i| (to_pred[i] as f64).sqrt()),
        )
        .collect();
    d.sort_by(f64::total_cmp);
    Ok(Some(d))
}

/// `(hd95, assd)` of class `class_id`, or `None` when either mask lacks the class.
pub fn surface_distances(
    pred: &SegMask,
    gt: &SegMask,
    class_id: usize,
) -> Result<Option<(f64, f64)>> {
    Ok(pooled_boundary_distances(pred, gt, class_id)?.map(|d| {
        let assd = d.iter().sum::<f64>() / d.len() as f64;
        (percentile(&d, 95.0), assd)
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub assd: Option<f64>,
}

/// Metrics of every foreground class (`1..C`) for one image.
pub fn image_metrics(pred: &SegMask, gt: &SegMask) -> Result<Vec<ClassMetrics>> {
    (1..gt.num_classes())
        .map(|c| {
            let (dice, jaccard) = dice_jaccard(pred, gt, c)?;
            let sd = surface_distances(pred, gt, c)?;
            Ok(ClassMetrics {
                class: c,
                dice,
                jaccard,
                hd95: sd.map(|s| s.0),
                assd: sd.map(|s| s.1),
            })
        })
        .collect()
}

/// Per-class metrics averaged over images, plus their mean over classes. Undefined surface
/// metrics are left out of every average.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class: Vec<ClassMetrics>,
    pub mean: ClassMetrics,
    pub num_images: usize,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl MetricReport {
    pub fn aggregate(per_image: &[Vec<ClassMetrics>]) -> Self {
        let classes: Vec<usize> = per_image
            .first()
            .map_or(vec![], |m| m.iter().map(|c| c.class).collect());
        let per_class: Vec<ClassMetrics> = classes
            .iter()
            .enumerate()
            .map(|(k, &class)| {
                let col = || per_image.iter().map(move |m| &m[k]);
                ClassMetrics {
                    class,
                    dice: mean_defined(col().map(|m| Some(m.dice))).unwrap_or(f64::NAN),
                    jaccard: mean_defined(col().map(|m| Some(m.jaccard))).unwrap_or(f64::NAN),
                    hd95: mean_defined(col().map(|m| m.hd95)),
                    assd: mean_defined(col().map(|m| m.assd)),
                }
            })
            .collect();
        let mean = ClassMetrics {
            class: usize::MAX,
            dice: mean_defined(per_class.iter().map(|m| Some(m.dice))).unwrap_or(f64::NAN),
            jaccard: mean_defined(per_class.iter().map(|m| Some(m.jaccard))).unwrap_or(f64::NAN),
            hd95: mean_defined(per_class.iter().map(|m| m.hd95)),
            assd: mean_defined(per_class.iter().map(|m| m.assd)),
        };
        Self {
            per_class,
            mean,
            num_images: per_image.len(),
        }
    }

    /// `class,dice,jaccard,hd95,assd` with one row per foreground class and a final `mean` row.
    /// Undefined values are written as `NA`.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
        let mut out = String::from("class,dice,jaccard,hd95,assd\n");
        for m in self.per_class.iter().chain(std::iter::once(&self.mean)) {
            let name = if m.class == usize::MAX {
                "mean".to_string()
            } else {
                m.class.to_string()
            };
            let _ = writeln!(
                out,
                "{name},{:.6},{:.6},{},{}",
                m.dice,
                m.jaccard,
                fmt(m.hd95),
                fmt(m.assd)
            );
        }
        out
    }

    /// Fixed-width table for terminals.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"));
        let mut out = format!(
            "{:<8}{:>10}{:>10}{:>10}{:>10}\n",
            "class", "dice", "jaccard", "hd95", "assd"
        );
        for m in self.per_class.iter().chain(std::iter::once(&self.mean)) {
            let name = if m.class == usize::MAX {
                "mean".to_string()
            } else {
                m.class.to_string()
            };
            let _ = writeln!(
                out,
                "{name:<8}{:>10.4}{:>10.4}{:>10}{:>10}",
                m.dice,
                m.jaccard,
                fmt(m.hd95),
                fmt(m.assd)
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Provenance;

    fn mask(h: usize, w: usize, fg: &[usize]) -> SegMask {
        let mut l = vec![0u8; h * w];
        fg.iter().for_each(|&i| l[i] = 1);
        SegMask::new(h, w, 2, l, Provenance::GroundTruth).unwrap()
    }

    #[test]
    fn overlap_cases() {
        let a = mask(4, 4, &[0, 1, 2, 3]);
        assert_eq!(dice_jaccard(&a, &a, 1).unwrap(), (1.0, 1.0));
        let b = mask(4, 4, &[2, 3, 4, 5]);
        let (d, j) = dice_jaccard(&a, &b, 1).unwrap();
        assert_eq!(d, 0.5);
        assert!((j - 1.0 / 3.0).abs() < 1e-15);
        let c = mask(4, 4, &[12, 13]);
        assert_eq!(dice_jaccard(&a, &c, 1).unwrap(), (0.0, 0.0));
        let empty = mask(4, 4, &[]);
        assert_eq!(dice_jaccard(&empty, &empty, 1).unwrap(), (1.0, 1.0));
        assert_eq!(dice_jaccard(&a, &empty, 1).unwrap(), (0.0, 0.0));
        assert!(dice_jaccard(&a, &mask(2, 2, &[]), 1).is_err());
    }

    #[test]
    fn surface_cases() {
        let a = mask(5, 5, &[6, 7, 8, 11, 12, 13]);
        assert_eq!(surface_distances(&a, &a, 1).unwrap(), Some((0.0, 0.0)));
        let p = mask(3, 7, &[7 + 1]);
        let g = mask(3, 7, &[7 + 4]);
        assert_eq!(surface_distances(&p, &g, 1).unwrap(), Some((3.0, 3.0)));
        let empty = mask(3, 7, &[]);
        assert_eq!(surface_distances(&p, &empty, 1).unwrap(), None);
        assert_eq!(surface_distances(&empty, &empty, 1).unwrap(), None);
    }

    #[test]
    fn percentile_interpolates() {
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 95.0), 3.8);
        assert_eq!(percentile(&v, 0.0), 0.0);
        assert_eq!(percentile(&[7.0], 95.0), 7.0);
    }

    #[test]
    fn report_rows() {
        let a = mask(4, 4, &[5, 6]);
        let empty = mask(4, 4, &[]);
        let rows = vec![
            image_metrics(&a, &a).unwrap(),
            image_metrics(&empty, &a).unwrap(),
        ];
        let r = MetricReport::aggregate(&rows);
        assert_eq!(r.per_class.len(), 1);
        assert_eq!(r.mean.dice, 0.5);
        assert_eq!(r.mean.hd95, Some(0.0));
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().last().unwrap().starts_with("mean,"));
    }
}
