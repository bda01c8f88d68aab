//! Datasets: synthetic generation, on-disk layout, splits and augmentation.
//!
//! A dataset directory holds `images/<id>.png` (8-bit grayscale), `masks/<id>.png` (label value
//! per pixel), `splits.csv` (`id,role` with roles `labeled`, `unlabeled`, `val`, `test`) and
//! `meta.csv` (`id,kind`, the shape family used for stratified splitting).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, PccsError, Result};
use crate::geometry::{Provenance, SegMask};

/// Per-image standardisation to zero mean and unit variance. Constant images become zero.
pub fn normalize(img: &[f64]) -> Vec<f64> {
    let n = img.len() as f64;
    let mean = img.iter().sum::<f64>() / n;
    let var = img.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 {
        return vec![0.0; img.len()];
    }
    img.iter().map(|v| (v - mean) / std).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub h: usize,
    pub w: usize,
    /// Normalised intensities, row-major.
    pub image: Vec<f64>,
    pub mask: Option<SegMask>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassMode {
    Binary,
    ThreeClass,
}

impl ClassMode {
    pub fn num_classes(self) -> usize {
        match self {
            ClassMode::Binary => 2,
            ClassMode::ThreeClass => 3,
        }
    }
}

impl std::str::FromStr for ClassMode {
    type Err = PccsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(Self::Binary),
            "three-class" | "three_class" => Ok(Self::ThreeClass),
            other => Err(PccsError::Config(format!("unknown class mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipse {
        cy: f64,
        cx: f64,
        a: f64,
        b: f64,
        theta: f64,
    },
    Star {
        cy: f64,
        cx: f64,
        radii: [f64; 24],
        n: usize,
        phase: f64,
    },
}

impl Shape {
    fn kind(&self) -> &'static str {
        match self {
            Shape::Ellipse { .. } => "ellipse",
            Shape::Star { .. } => "star",
        }
    }

    fn random(rng: &mut ChaCha8Rng, star: bool, cy: f64, cx: f64, scale: (f64, f64)) -> Self {
        let scale = rng.gen_range(scale.0..scale.1);
        if star {
            let n = rng.gen_range(5..=9) * 2;
            let r0 = scale * rng.gen_range(0.75..1.0);
            let spike = rng.gen_range(0.35..0.6);
            let mut radii = [0.0; 24];
            for (i, r) in radii.iter_mut().take(n).enumerate() {
                let jitter = rng.gen_range(0.85..1.15);
                *r = if i % 2 == 0 {
                    r0 * jitter
                } else {
                    r0 * (1.0 - spike) * jitter
                };
            }
            Shape::Star {
                cy,
                cx,
                radii,
                n,
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
            }
        } else {
            let a = scale * rng.gen_range(0.7..1.0);
            let b = a * rng.gen_range(0.55..1.0);
            Shape::Ellipse {
                cy,
                cx,
                a,
                b,
                theta: rng.gen_range(0.0..std::f64::consts::PI),
            }
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Ellipse {
                cy,
                cx,
                a,
                b,
                theta,
            } => {
                let (dy, dx) = (y - cy, x - cx);
                let (s, c) = theta.sin_cos();
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            Shape::Star {
                cy,
                cx,
                radii,
                n,
                phase,
            } => {
                // Star-shaped polygon around the centre: compare the radius along the ray.
                let (dy, dx) = (y - cy, x - cx);
                let r = (dy * dy + dx * dx).sqrt();
                let step = std::f64::consts::TAU / n as f64;
                let ang = (dy.atan2(dx) - phase).rem_euclid(std::f64::consts::TAU);
                let k = ((ang / step).floor() as usize).min(n - 1);
                let t = ang / step - k as f64;
                let (r0, r1) = (radii[k], radii[(k + 1) % n]);
                let (a0, a1) = (k as f64 * step, (k + 1) as f64 * step);
                // Intersection of the ray with the polygon edge between the two vertices.
                let (p0y, p0x) = (r0 * a0.sin(), r0 * a0.cos());
                let (p1y, p1x) = (r1 * a1.sin(), r1 * a1.cos());
                let ray = ang;
                let (dyr, dxr) = (ray.sin(), ray.cos());
                let (ey, ex) = (p1y - p0y, p1x - p0x);
                let denom = dxr * ey - dyr * ex;
                let edge_r = if denom.abs() < 1e-12 {
                    r0 + (r1 - r0) * t
                } else {
                    (p0x * ey - p0y * ex) / denom
                };
                r <= edge_r
            }
        }
    }
}

/// Generation parameters controlling image difficulty.
#[derive(Clone, Copy, Debug)]
struct Appearance {
    contrast: (f64, f64),
    texture_amp: f64,
    noise_sigma: f64,
    distractors: usize,
}

const APPEARANCE: Appearance = Appearance {
    contrast: (0.15, 0.3),
    texture_amp: 0.14,
    noise_sigma: 0.07,
    distractors: 2,
};

struct Generated {
    image: Vec<u8>,
    labels: Vec<u8>,
    kind: &'static str,
}

fn box_blur(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut s, mut n) = (0.0, 0.0);
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    s += img[yy * w + xx];
                    n += 1.0;
                }
            }
            out[y * w + x] = s / n;
        }
    }
    out
}

fn generate_one(rng: &mut ChaCha8Rng, size: usize, mode: ClassMode) -> Generated {
    let app = APPEARANCE;
    let s = size as f64;
    loop {
        let star = rng.gen_bool(0.5);
        let margin = 0.3 * s;
        let cy = rng.gen_range(margin..s - margin);
        let cx = rng.gen_range(margin..s - margin);
        let outer = Shape::random(rng, star, cy, cx, (0.14 * s, 0.3 * s));
        let inner = match mode {
            ClassMode::Binary => None,
            ClassMode::ThreeClass => {
                let inner_star = rng.gen_bool(0.5);
                Some(Shape::random(rng, inner_star, cy, cx, (0.05 * s, 0.09 * s)))
            }
        };
        // Background: smooth sinusoidal texture.
        let mut waves = Vec::new();
        for _ in 0..4 {
            let f = rng.gen_range(0.5..3.0) * std::f64::consts::TAU / s;
            let ang: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            waves.push((
                f * ang.cos(),
                f * ang.sin(),
                rng.gen_range(0.0..std::f64::consts::TAU),
            ));
        }
        let base = rng.gen_range(0.35..0.55);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let contrast = sign * rng.gen_range(app.contrast.0..app.contrast.1);
        let inner_contrast = -sign * rng.gen_range(app.contrast.0..app.contrast.1);
        let distractors: Vec<(Shape, f64)> = (0..app.distractors)
            .map(|_| {
                let dy = rng.gen_range(0.1 * s..0.9 * s);
                let dx = rng.gen_range(0.1 * s..0.9 * s);
                let shape = Shape::random(rng, false, dy, dx, (0.05 * s, 0.1 * s));
                (shape, -sign * rng.gen_range(app.contrast.0..app.contrast.1))
            })
            .collect();

        let mut img = vec![0.0; size * size];
        let mut labels = vec![0u8; size * size];
        for y in 0..size {
            for x in 0..size {
                let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
                let tex: f64 = waves
                    .iter()
                    .map(|&(ky, kx, ph)| (ky * fy + kx * fx + ph).sin())
                    .sum();
                let mut v = base + app.texture_amp * tex / 2.0;
                for (d, c) in &distractors {
                    if d.contains(fy, fx) {
                        v += c;
                    }
                }
                if outer.contains(fy, fx) {
                    labels[y * size + x] = 1;
                    v += contrast;
                    if let Some(inner) = &inner {
                        if inner.contains(fy, fx) {
                            labels[y * size + x] = 2;
                            v += inner_contrast;
                        }
                    }
                }
                img[y * size + x] = v;
            }
        }
        let fg = labels.iter().filter(|&&l| l > 0).count() as f64 / (size * size) as f64;
        let has_inner = inner.is_none() || labels.contains(&2);
        if !(0.02..=0.60).contains(&fg) || !has_inner {
            continue;
        }
        let blurred = box_blur(&img, size, size);
        let noise = Normal::new(0.0, app.noise_sigma).unwrap();
        let image: Vec<u8> = blurred
            .iter()
            .map(|&v| ((v + noise.sample(rng)).clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        if image.iter().all(|&p| p == image[0]) {
            continue;
        }
        let kind = match inner {
            None => outer.kind(),
            Some(inner) => inner.kind(),
        };
        return Generated {
            image,
            labels,
            kind,
        };
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n: usize,
    pub size: usize,
    pub num_classes: usize,
    /// Pixel count per label over all masks.
    pub class_histogram: Vec<usize>,
    pub kinds: BTreeMap<String, usize>,
}

fn sample_id(i: usize) -> String {
    format!("s{i:05}")
}

/// Writes `n` synthetic image/mask pairs plus `meta.csv` and a default `splits.csv`.
pub fn generate_synthetic(
    dir: &Path,
    n: usize,
    mode: ClassMode,
    size: usize,
    seed: u64,
    labeled_fraction: f64,
) -> Result<DatasetSummary> {
    if n == 0 {
        return domain("need at least one sample");
    }
    if size < 8 {
        return domain(format!("image size {size} is too small"));
    }
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hist = vec![0usize; mode.num_classes()];
    let mut kinds = BTreeMap::new();
    let mut meta = String::from("id,kind\n");
    let mut ids = Vec::with_capacity(n);
    let mut strata = Vec::with_capacity(n);
    for i in 0..n {
        let g = generate_one(&mut rng, size, mode);
        let id = sample_id(i);
        image::GrayImage::from_raw(size as u32, size as u32, g.image)
            .expect("buffer size matches")
            .save(dir.join("images").join(format!("{id}.png")))?;
        for &l in &g.labels {
            hist[l as usize] += 1;
        }
        image::GrayImage::from_raw(size as u32, size as u32, g.labels)
            .expect("buffer size matches")
            .save(dir.join("masks").join(format!("{id}.png")))?;
        *kinds.entry(g.kind.to_string()).or_insert(0) += 1;
        meta.push_str(&format!("{id},{}\n", g.kind));
        ids.push(id);
        strata.push(g.kind.to_string());
    }
    fs::write(dir.join("meta.csv"), meta)?;
    let splits = make_splits(&ids, Some(&strata), labeled_fraction, seed)?;
    fs::write(dir.join("splits.csv"), splits.to_csv())?;
    Ok(DatasetSummary {
        n,
        size,
        num_classes: mode.num_classes(),
        class_histogram: hist,
        kinds,
    })
}

/// An on-disk dataset loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: BTreeMap<String, Sample>,
    /// Shape family per id, when `meta.csv` exists.
    pub kinds: BTreeMap<String, String>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let mut samples = BTreeMap::new();
        let mut max_label = 1u8;
        let mut entries: Vec<_> = fs::read_dir(dir.join("images"))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "png"))
            .collect();
        entries.sort();
        let mut raw_masks = Vec::new();
        for path in entries {
            let id = path.file_stem().unwrap().to_string_lossy().into_owned();
            let img = image::open(&path)?.to_luma8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let pixels: Vec<f64> = img.as_raw().iter().map(|&p| f64::from(p) / 255.0).collect();
            let mask_path = dir.join("masks").join(format!("{id}.png"));
            let labels = if mask_path.exists() {
                let m = image::open(&mask_path)?.to_luma8();
                if (m.width() as usize, m.height() as usize) != (w, h) {
                    return domain(format!("mask of {id} differs in size from its image"));
                }
                let raw = m.into_raw();
                max_label = max_label.max(raw.iter().copied().max().unwrap_or(0));
                Some(raw)
            } else {
                None
            };
            raw_masks.push((id.clone(), labels));
            samples.insert(
                id.clone(),
                Sample {
                    id,
                    h,
                    w,
                    image: normalize(&pixels),
                    mask: None,
                },
            );
        }
        if samples.is_empty() {
            return domain(format!("no images found under {}", dir.display()));
        }
        let num_classes = max_label as usize + 1;
        for (id, labels) in raw_masks {
            if let Some(labels) = labels {
                let s = samples.get_mut(&id).unwrap();
                s.mask = Some(SegMask::new(
                    s.h,
                    s.w,
                    num_classes,
                    labels,
                    Provenance::GroundTruth,
                )?);
            }
        }
        let mut kinds = BTreeMap::new();
        if let Ok(text) = fs::read_to_string(dir.join("meta.csv")) {
            for line in text.lines().skip(1) {
                if let Some((id, kind)) = line.split_once(',') {
                    kinds.insert(id.to_string(), kind.to_string());
                }
            }
        }
        Ok(Self {
            samples,
            kinds,
            num_classes,
        })
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.keys().cloned().collect()
    }

    /// Stratum per id in `ids` order, if every id has one.
    pub fn strata(&self, ids: &[String]) -> Option<Vec<String>> {
        ids.iter().map(|id| self.kinds.get(id).cloned()).collect()
    }

    pub fn get(&self, id: &str) -> Result<&Sample> {
        self.samples
            .get(id)
            .ok_or_else(|| PccsError::Domain(format!("unknown sample id `{id}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub labeled_fraction: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = PccsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(PccsError::Config(format!(
                "unknown split `{other}` (expected val or test)"
            ))),
        }
    }
}

impl SplitManifest {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# labeled_fraction={},seed={}\nid,role\n",
            self.labeled_fraction, self.seed
        );
        for (ids, role) in [
            (&self.labeled, "labeled"),
            (&self.unlabeled, "unlabeled"),
            (&self.val, "val"),
            (&self.test, "test"),
        ] {
            for id in ids {
                out.push_str(&format!("{id},{role}\n"));
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut m = SplitManifest {
            labeled: vec![],
            unlabeled: vec![],
            val: vec![],
            test: vec![],
            labeled_fraction: 0.0,
            seed: 0,
        };
        for line in text.lines() {
            let line = line.trim();
            if let Some(meta) = line.strip_prefix('#') {
                for kv in meta.trim().split(',') {
                    match kv.split_once('=') {
                        Some(("labeled_fraction", v)) => {
                            m.labeled_fraction = v.parse().unwrap_or(0.0)
                        }
                        Some(("seed", v)) => m.seed = v.parse().unwrap_or(0),
                        _ => {}
                    }
                }
                continue;
            }
            if line.is_empty() || line == "id,role" {
                continue;
            }
            let (id, role) = line
                .split_once(',')
                .ok_or_else(|| PccsError::Config(format!("malformed split line `{line}`")))?;
            let list = match role {
                "labeled" => &mut m.labeled,
                "unlabeled" => &mut m.unlabeled,
                "val" => &mut m.val,
                "test" => &mut m.test,
                other => return Err(PccsError::Config(format!("unknown split role `{other}`"))),
            };
            list.push(id.to_string());
        }
        if m.labeled_fraction == 0.0 && !m.labeled.is_empty() {
            m.labeled_fraction =
                m.labeled.len() as f64 / (m.labeled.len() + m.unlabeled.len()) as f64;
        }
        Ok(m)
    }
}

/// 7:1:2 train/val/test split (per stratum when given), then the first
/// `round(labeled_fraction * n_train)` shuffled training ids are labelled.
///
/// The training order depends only on `seed`, so labelled sets grow monotonically with the
/// fraction.
pub fn make_splits(
    ids: &[String],
    strata: Option<&[String]>,
    labeled_fraction: f64,
    seed: u64,
) -> Result<SplitManifest> {
    if ids.is_empty() {
        return domain("cannot split an empty dataset");
    }
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return domain(format!(
            "labeled fraction {labeled_fraction} outside (0, 1]"
        ));
    }
    let mut groups: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        let key = strata.map_or("", |s| s[i].as_str());
        groups.entry(key).or_default().push(id.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5011);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (_, mut group) in groups {
        group.sort();
        group.shuffle(&mut rng);
        let n = group.len();
        let n_train = (0.7 * n as f64).round() as usize;
        let n_val = ((0.1 * n as f64).round() as usize).min(n - n_train);
        test.extend(group.split_off(n_train + n_val));
        val.extend(group.split_off(n_train));
        train.extend(group);
    }
    train.shuffle(&mut rng);
    let n_lab = ((labeled_fraction * train.len() as f64).round() as usize).min(train.len());
    if n_lab == 0 {
        return domain("labeled set would be empty");
    }
    let unlabeled = train.split_off(n_lab);
    Ok(SplitManifest {
        labeled: train,
        unlabeled,
        val,
        test,
        labeled_fraction,
        seed,
    })
}

/// Geometric and photometric augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub hflip: bool,
    pub vflip: bool,
    /// `(y0, x0, height, width)` of the crop, resized back to the full image.
    pub crop: Option<(usize, usize, usize, usize)>,
    pub noise_sigma: Option<f64>,
    pub noise_seed: u64,
}

impl AugmentParams {
    pub const IDENTITY: Self = Self {
        hflip: false,
        vflip: false,
        crop: None,
        noise_sigma: None,
        noise_seed: 0,
    };

    /// Each transform is applied with probability one half.
    pub fn sample<R: Rng>(rng: &mut R, h: usize, w: usize, allow_crop: bool) -> Self {
        let hflip = rng.gen_bool(0.5);
        let vflip = rng.gen_bool(0.5);
        let crop = if allow_crop && rng.gen_bool(0.5) {
            let area: f64 = rng.gen_range(0.75..=1.0);
            let side = area.sqrt();
            let ch = ((h as f64 * side).round() as usize).clamp(1, h);
            let cw = ((w as f64 * side).round() as usize).clamp(1, w);
            Some((rng.gen_range(0..=h - ch), rng.gen_range(0..=w - cw), ch, cw))
        } else {
            None
        };
        let noise_sigma = rng.gen_bool(0.5).then(|| rng.gen_range(0.01..=0.1));
        Self {
            hflip,
            vflip,
            crop,
            noise_sigma,
            noise_seed: rng.gen(),
        }
    }

    pub fn is_invertible(&self) -> bool {
        self.crop.is_none()
    }
}

/// Flips every `h × w` plane of a channel-major buffer in place.
pub fn flip_planes(data: &mut [f64], h: usize, w: usize, hflip: bool, vflip: bool) {
    for plane in data.chunks_mut(h * w) {
        if hflip {
            for row in plane.chunks_mut(w) {
                row.reverse();
            }
        }
        if vflip {
            for y in 0..h / 2 {
                let (top, bottom) = plane.split_at_mut((h - 1 - y) * w);
                top[y * w..(y + 1) * w].swap_with_slice(&mut bottom[..w]);
            }
        }
    }
}

/// Flips a pixel-major buffer with `dim` values per pixel in place.
pub fn flip_pixels(data: &mut [f64], h: usize, w: usize, dim: usize, hflip: bool, vflip: bool) {
    let src = data.to_vec();
    for y in 0..h {
        for x in 0..w {
            let sy = if vflip { h - 1 - y } else { y };
            let sx = if hflip { w - 1 - x } else { x };
            data[(y * w + x) * dim..][..dim].copy_from_slice(&src[(sy * w + sx) * dim..][..dim]);
        }
    }
}

fn flip_labels(labels: &mut [u8], h: usize, w: usize, hflip: bool, vflip: bool) {
    let src = labels.to_vec();
    for y in 0..h {
        for x in 0..w {
            let sy = if vflip { h - 1 - y } else { y };
            let sx = if hflip { w - 1 - x } else { x };
            labels[y * w + x] = src[sy * w + sx];
        }
    }
}

fn crop_resize_image(
    img: &[f64],
    h: usize,
    w: usize,
    crop: (usize, usize, usize, usize),
) -> Vec<f64> {
    let (y0, x0, ch, cw) = crop;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let sy = ((y as f64 + 0.5) * ch as f64 / h as f64 - 0.5).clamp(0.0, (ch - 1) as f64);
        let (ya, fy) = (sy.floor() as usize, sy - sy.floor());
        let yb = (ya + 1).min(ch - 1);
        for x in 0..w {
            let sx = ((x as f64 + 0.5) * cw as f64 / w as f64 - 0.5).clamp(0.0, (cw - 1) as f64);
            let (xa, fx) = (sx.floor() as usize, sx - sx.floor());
            let xb = (xa + 1).min(cw - 1);
            let at = |yy: usize, xx: usize| img[(y0 + yy) * w + x0 + xx];
            out[y * w + x] = (1.0 - fy) * ((1.0 - fx) * at(ya, xa) + fx * at(ya, xb))
                + fy * ((1.0 - fx) * at(yb, xa) + fx * at(yb, xb));
        }
    }
    out
}

fn crop_resize_labels(
    labels: &[u8],
    h: usize,
    w: usize,
    crop: (usize, usize, usize, usize),
) -> Vec<u8> {
    let (y0, x0, ch, cw) = crop;
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        let sy = ((y * ch) / h).min(ch - 1);
        for x in 0..w {
            let sx = ((x * cw) / w).min(cw - 1);
            out[y * w + x] = labels[(y0 + sy) * w + x0 + sx];
        }
    }
    out
}

/// Applies crop-and-resize, flips, then additive Gaussian noise. The mask receives the same
/// geometric transforms (nearest-neighbour resampling) and no noise.
pub fn augment_with(sample: &Sample, params: &AugmentParams) -> Sample {
    let (h, w) = (sample.h, sample.w);
    let mut image = sample.image.clone();
    let mut labels = sample.mask.as_ref().map(|m| m.labels().to_vec());
    if let Some(crop) = params.crop {
        image = crop_resize_image(&image, h, w, crop);
        labels = labels.map(|l| crop_resize_labels(&l, h, w, crop));
    }
    flip_planes(&mut image, h, w, params.hflip, params.vflip);
    if let Some(l) = labels.as_mut() {
        flip_labels(l, h, w, params.hflip, params.vflip);
    }
    if let Some(sigma) = params.noise_sigma {
        let mut rng = ChaCha8Rng::seed_from_u64(params.noise_seed);
        let normal = Normal::new(0.0, sigma).unwrap();
        image.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    let mask = match (&sample.mask, labels) {
        (Some(m), Some(l)) => Some(
            SegMask::new(h, w, m.num_classes(), l, m.provenance())
                .expect("labels keep their range"),
        ),
        _ => None,
    };
    Sample {
        id: sample.id.clone(),
        h,
        w,
        image,
        mask,
    }
}

/// Random augmentation determined entirely by `seed`.
pub fn augment(sample: &Sample, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = AugmentParams::sample(&mut rng, sample.h, sample.w, true);
    augment_with(sample, &params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_sample() -> Sample {
        let (h, w) = (6, 8);
        let image: Vec<f64> = (0..h * w).map(|i| ((i * 13) % 17) as f64).collect();
        let labels: Vec<u8> = (0..h * w).map(|i| u8::from(i % 5 == 0)).collect();
        Sample {
            id: "x".into(),
            h,
            w,
            image: normalize(&image),
            mask: Some(SegMask::new(h, w, 2, labels, Provenance::GroundTruth).unwrap()),
        }
    }

    #[test]
    fn normalize_properties() {
        let v: Vec<f64> = (0..50)
            .map(|i| (i as f64 * 0.7).sin() * 3.0 + 2.0)
            .collect();
        let n = normalize(&v);
        let mean = n.iter().sum::<f64>() / 50.0;
        let std = (n.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 50.0).sqrt();
        assert!(mean.abs() < 1e-12 && (std - 1.0).abs() < 1e-12);
        let nn = normalize(&n);
        assert!(n.iter().zip(&nn).all(|(a, b)| (a - b).abs() < 1e-9));
        assert_eq!(normalize(&[3.0; 4]), vec![0.0; 4]);
    }

    #[test]
    fn splits_arithmetic() {
        let ids: Vec<String> = (0..100).map(sample_id).collect();
        let strata: Vec<String> = (0..100)
            .map(|i| if i % 2 == 0 { "a" } else { "b" }.to_string())
            .collect();
        let m = make_splits(&ids, Some(&strata), 0.1, 3).unwrap();
        assert_eq!(
            (
                m.labeled.len(),
                m.unlabeled.len(),
                m.val.len(),
                m.test.len()
            ),
            (7, 63, 10, 20)
        );
        let full = make_splits(&ids, Some(&strata), 1.0, 3).unwrap();
        assert!(full.unlabeled.is_empty());
        assert_eq!(full.val, m.val);
        assert!(m.labeled.iter().all(|id| full.labeled.contains(id)));
        assert_eq!(
            make_splits(&ids, None, 0.1, 3).unwrap(),
            make_splits(&ids, None, 0.1, 3).unwrap()
        );
        assert!(make_splits(&ids[..1], None, 0.1, 3).is_err());
        assert!(make_splits(&ids, None, 0.0, 3).is_err());
    }

    #[test]
    fn split_csv_roundtrip() {
        let ids: Vec<String> = (0..30).map(sample_id).collect();
        let m = make_splits(&ids, None, 0.25, 11).unwrap();
        assert_eq!(SplitManifest::from_csv(&m.to_csv()).unwrap(), m);
    }

    #[test]
    fn augmentation_determinism_and_involution() {
        let s = toy_sample();
        assert_eq!(augment(&s, 5), augment(&s, 5));
        let flips = AugmentParams {
            hflip: true,
            vflip: true,
            ..AugmentParams::IDENTITY
        };
        assert_eq!(augment_with(&augment_with(&s, &flips), &flips), s);
        let noise = AugmentParams {
            noise_sigma: Some(0.05),
            noise_seed: 9,
            ..AugmentParams::IDENTITY
        };
        let n = augment_with(&s, &noise);
        assert_eq!(n.mask, s.mask);
        assert_ne!(n.image, s.image);
    }

    #[test]
    fn flip_helpers_agree() {
        let (h, w) = (3, 4);
        let planar: Vec<f64> = (0..2 * h * w).map(|i| i as f64).collect();
        let mut a = planar.clone();
        flip_planes(&mut a, h, w, true, true);
        let fm = crate::protobank::FeatureMap::from_planar(h, w, 2, &planar);
        let mut b = fm.data.clone();
        flip_pixels(&mut b, h, w, 2, true, true);
        let back = crate::protobank::FeatureMap { data: b, ..fm }.to_planar();
        assert_eq!(a, back);
    }
}
