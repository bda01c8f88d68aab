#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pccs::data::{AugmentParams, Sample};
use pccs::geometry::{Provenance, SegMask, SignedDistanceMap};
use pccs::losses::{
    consistency_loss, contrastive_consistency_loss, pixel_prototype_aux_loss, softmax_backward,
    supervised_loss, uncertainty_loss_graded, uncertainty_weighted_pc_loss, Branch, ProbabilityMap,
};
use pccs::model::NetConfig;
use pccs::protobank::{FeatureMap, PrototypeBank, PrototypeEntry};
use pccs::trainer::{
    forward_student, prepare_step, student_objective, Batch, TrainConfig, TrainState,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_grad(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + eps;
            let up = f(&x);
            x[i] = orig - eps;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * (rng.gen::<f64>() * 2.0 - 1.0))
        .collect()
}

/// A mask made of a few axis-aligned rectangles of random classes over background 0.
pub fn blob_mask(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    classes: usize,
    provenance: Provenance,
) -> SegMask {
    let mut labels = vec![0u8; h * w];
    for _ in 0..rng.gen_range(1..=3) {
        let c = rng.gen_range(1..classes) as u8;
        let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (y1, x1) = (rng.gen_range(y0..h) + 1, rng.gen_range(x0..w) + 1);
        for y in y0..y1 {
            for x in x0..x1 {
                labels[y * w + x] = c;
            }
        }
    }
    SegMask::new(h, w, classes, labels, provenance).unwrap()
}

/// Uniformly random labels.
pub fn noise_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: usize) -> SegMask {
    let labels = (0..h * w)
        .map(|_| rng.gen_range(0..classes) as u8)
        .collect();
    SegMask::new(h, w, classes, labels, Provenance::GroundTruth).unwrap()
}

fn probs(h: usize, w: usize, c: usize, z: &[f64]) -> ProbabilityMap {
    ProbabilityMap::from_logits(h, w, c, z, Branch::Student)
}

/// Checks a loss of a probability map through the softmax: returns the relative error of
/// `softmax_backward(p, dL/dp)` against finite differences in the logits.
fn check_through_softmax(
    h: usize,
    w: usize,
    c: usize,
    z: &[f64],
    loss: impl Fn(&ProbabilityMap) -> (f64, Vec<f64>),
) -> f64 {
    let p = probs(h, w, c, z);
    let analytic = softmax_backward(&p, &loss(&p).1);
    let numeric = numeric_grad(z, 1e-6, |z| loss(&probs(h, w, c, z)).0);
    rel_err(&analytic, &numeric)
}

/// Worst relative gradient error of every loss over `trials` random problems, by name.
pub fn loss_gradient_errors(trials: u64) -> Vec<(&'static str, f64)> {
    let mut worst: BTreeMap<&'static str, f64> = BTreeMap::new();
    let mut note = |name: &'static str, e: f64| {
        let slot = worst.entry(name).or_insert(0.0);
        *slot = slot.max(e);
    };
    for t in 0..trials {
        let mut r = rng(100 + t);
        let (h, w) = (5, 6);
        for c in [2usize, 3] {
            let n = h * w * c;
            let z = gaussian(&mut r, n, 2.0);
            let gt = noise_mask(&mut r, h, w, c);
            note(
                "supervised",
                check_through_softmax(h, w, c, &z, |p| {
                    let g = supervised_loss(p, &gt).unwrap();
                    (g.value, g.grad)
                }),
            );

            let zt = gaussian(&mut r, n, 2.0);
            let pt = probs(h, w, c, &zt);
            note(
                "consistency/student",
                check_through_softmax(h, w, c, &z, |p| {
                    let g = consistency_loss(p, &pt).unwrap();
                    (g.value, g.d_first)
                }),
            );
            let ps = probs(h, w, c, &z);
            note(
                "consistency/teacher",
                check_through_softmax(h, w, c, &zt, |p| {
                    let g = consistency_loss(&ps, p).unwrap();
                    (g.value, g.d_second)
                }),
            );
            note(
                "uncertainty/student",
                check_through_softmax(h, w, c, &z, |p| {
                    let g = uncertainty_loss_graded(p, &pt).unwrap();
                    (g.value, g.d_first)
                }),
            );
            note(
                "uncertainty/teacher",
                check_through_softmax(h, w, c, &zt, |p| {
                    let g = uncertainty_loss_graded(&ps, p).unwrap();
                    (g.value, g.d_second)
                }),
            );
        }

        note("contrastive", contrastive_error(&mut r));
        let (pix, unc) = bank_errors(&mut r);
        note("prototype-contrast/features", pix);
        note("prototype-contrast/uncertainty", unc);
        let (feat, proto) = aux_errors(&mut r);
        note("pixel-prototype/features", feat);
        note("pixel-prototype/prototypes", proto);
    }
    worst.into_iter().collect()
}

/// Single-anchor contrastive loss: anchor, positives and negatives packed in one vector.
fn contrastive_error(r: &mut ChaCha8Rng) -> f64 {
    let dim = 6;
    let (np, nn) = (3, 4);
    // Shared offset keeps the anchor-positive similarities positive.
    let offset = gaussian(r, dim, 1.0);
    let mut x = Vec::new();
    for k in 0..1 + np + nn {
        let v = gaussian(r, dim, 0.6);
        x.extend(
            v.iter()
                .zip(&offset)
                .map(|(a, o)| if k <= np { a + o } else { *a }),
        );
    }
    let tau = 0.5;
    let eval = |x: &[f64]| {
        let a = &x[..dim];
        let pos: Vec<&[f64]> = (0..np).map(|k| &x[(1 + k) * dim..(2 + k) * dim]).collect();
        let neg: Vec<&[f64]> = (0..nn)
            .map(|k| &x[(1 + np + k) * dim..(2 + np + k) * dim])
            .collect();
        contrastive_consistency_loss(a, &pos, &neg, tau).unwrap()
    };
    let g = eval(&x);
    let mut analytic = g.d_anchor.clone();
    g.d_positives
        .iter()
        .chain(&g.d_negatives)
        .for_each(|d| analytic.extend(d));
    let numeric = numeric_grad(&x, 1e-6, |x| eval(x).value);
    rel_err(&analytic, &numeric)
}

/// Uncertainty-weighted bank loss, differentiated through prototype extraction down to the
/// pixel features, and separately with respect to the uncertainties.
fn bank_errors(r: &mut ChaCha8Rng) -> (f64, f64) {
    let (h, w, dim, c) = (6, 6, 5, 3);
    let masks: Vec<SegMask> = (0..2)
        .map(|_| blob_mask(r, h, w, c, Provenance::GroundTruth))
        .collect();
    let sdms: Vec<SignedDistanceMap> = masks.iter().map(SignedDistanceMap::from_mask).collect();
    let offset = gaussian(r, dim, 1.0);
    let feats: Vec<f64> = (0..2 * h * w)
        .flat_map(|_| gaussian(r, dim, 0.5))
        .zip(offset.iter().cycle())
        .map(|(a, o)| a + o)
        .collect();
    let unc: BTreeMap<_, f64> = {
        let maps: Vec<FeatureMap> = (0..2)
            .map(|i| {
                FeatureMap::new(
                    h,
                    w,
                    dim,
                    feats[i * h * w * dim..(i + 1) * h * w * dim].to_vec(),
                )
                .unwrap()
            })
            .collect();
        let items: Vec<_> = maps.iter().zip(&sdms).collect();
        let bank = PrototypeBank::extract(&items, 4, "t").unwrap();
        bank.keys().map(|&k| (k, r.gen_range(0.0..1.0))).collect()
    };
    let tau = 0.3;
    let build = |x: &[f64]| {
        let maps: Vec<FeatureMap> = (0..2)
            .map(|i| {
                FeatureMap::new(
                    h,
                    w,
                    dim,
                    x[i * h * w * dim..(i + 1) * h * w * dim].to_vec(),
                )
                .unwrap()
            })
            .collect();
        let items: Vec<_> = maps.iter().zip(&sdms).collect();
        let mut bank = PrototypeBank::extract(&items, 4, "t").unwrap();
        for (k, e) in bank.entries.iter_mut() {
            e.uncertainty = unc[k];
        }
        bank
    };
    let bank = build(&feats);
    let g = uncertainty_weighted_pc_loss(&bank, tau).unwrap();
    let analytic: Vec<f64> = bank
        .backprop_to_pixels(&g.d_vectors, &[(h * w, dim); 2])
        .concat();
    let numeric = numeric_grad(&feats, 1e-6, |x| {
        uncertainty_weighted_pc_loss(&build(x), tau).unwrap().value
    });
    let pix = rel_err(&analytic, &numeric);

    let keys: Vec<_> = bank.keys().copied().collect();
    let u0: Vec<f64> = keys.iter().map(|k| unc[k]).collect();
    let with_unc = |u: &[f64]| {
        let entries = keys
            .iter()
            .zip(u)
            .map(|(k, &uv)| {
                (
                    *k,
                    PrototypeEntry {
                        uncertainty: uv,
                        ..bank.entries[k].clone()
                    },
                )
            })
            .collect();
        uncertainty_weighted_pc_loss(&PrototypeBank::from_entries(entries), tau)
            .unwrap()
            .value
    };
    let analytic_u: Vec<f64> = keys.iter().map(|k| g.d_uncertainty[k]).collect();
    let numeric_u = numeric_grad(&u0, 1e-6, with_unc);
    (pix, rel_err(&analytic_u, &numeric_u))
}

/// Pixel-to-prototype loss with respect to features and prototypes.
fn aux_errors(r: &mut ChaCha8Rng) -> (f64, f64) {
    let (h, w, dim, c) = (4, 5, 6, 3);
    let masks: Vec<SegMask> = (0..2).map(|_| noise_mask(r, h, w, c)).collect();
    let feats: Vec<f64> = gaussian(r, 2 * h * w * dim, 1.0);
    let protos: Vec<f64> = gaussian(r, c * dim, 1.0);
    let tau = 0.4;
    let eval = |f: &[f64], p: &[f64]| {
        let maps: Vec<FeatureMap> = (0..2)
            .map(|i| {
                FeatureMap::new(
                    h,
                    w,
                    dim,
                    f[i * h * w * dim..(i + 1) * h * w * dim].to_vec(),
                )
                .unwrap()
            })
            .collect();
        let items: Vec<_> = maps.iter().zip(&masks).collect();
        let prototypes: Vec<Option<Vec<f64>>> = (0..c)
            .map(|k| Some(p[k * dim..(k + 1) * dim].to_vec()))
            .collect();
        pixel_prototype_aux_loss(&items, &prototypes, tau).unwrap()
    };
    let g = eval(&feats, &protos);
    let df: Vec<f64> = g.d_features.concat();
    let dp: Vec<f64> = g
        .d_prototypes
        .iter()
        .flat_map(|p| p.clone().unwrap())
        .collect();
    let nf = numeric_grad(&feats, 1e-6, |f| eval(f, &protos).value);
    let np = numeric_grad(&protos, 1e-6, |p| eval(&feats, p).value);
    (rel_err(&df, &nf), rel_err(&dp, &np))
}

pub fn tiny_config() -> TrainConfig {
    let mut c = TrainConfig::desk(2);
    c.net = NetConfig {
        num_classes: 2,
        widths: vec![2, 4, 4],
        fused_dim: 4,
    };
    c.t_max = 10;
    c.warmup_steps = 0;
    c.t_ramp = 10;
    c.batch_labeled = 2;
    c.batch_unlabeled = 2;
    c.max_bin = 3;
    c.classifier_weight = 0.0;
    c
}

fn disc_sample(r: &mut ChaCha8Rng, id: &str, size: usize, labeled: bool) -> Sample {
    let (cy, cx) = (r.gen_range(10.0..22.0), r.gen_range(10.0..22.0));
    let rad: f64 = r.gen_range(5.0..9.0);
    let mut labels = vec![0u8; size * size];
    let mut image = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let inside = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= rad * rad;
            labels[y * size + x] = u8::from(inside);
            image[y * size + x] = if inside { 1.0 } else { -1.0 } + r.gen_range(-0.3..0.3);
        }
    }
    let mask = SegMask::new(size, size, 2, labels, Provenance::GroundTruth).unwrap();
    Sample {
        id: id.into(),
        h: size,
        w: size,
        image,
        mask: labeled.then_some(mask),
    }
}

/// Relative error of the full student objective's parameter gradient on a tiny network, with
/// every target (pseudo-labels, teacher outputs and prototypes) held fixed. The prototype
/// classifier is zeroed so the detached uncertainty weights do not depend on the parameters,
/// and its own parameters are excluded.
pub fn tiny_model_gradient_error(seed: u64) -> f64 {
    let config = tiny_config();
    let mut r = rng(seed);
    let size = 32;
    let labeled: Vec<Sample> = (0..2)
        .map(|i| disc_sample(&mut r, &format!("l{i}"), size, true))
        .collect();
    let unlabeled: Vec<Sample> = (0..2)
        .map(|i| disc_sample(&mut r, &format!("u{i}"), size, false))
        .collect();
    let teacher_views = vec![
        AugmentParams::IDENTITY,
        AugmentParams {
            hflip: true,
            ..AugmentParams::IDENTITY
        },
        AugmentParams {
            vflip: true,
            noise_sigma: Some(0.1),
            noise_seed: 3,
            ..AugmentParams::IDENTITY
        },
        AugmentParams {
            hflip: true,
            vflip: true,
            ..AugmentParams::IDENTITY
        },
    ];
    let batch = Batch {
        step: 4,
        labeled,
        unlabeled,
        teacher_views,
    };

    let mut state = TrainState::new(&config).unwrap();
    let classifier = state.student.layers.len() - 1;
    for net in [&mut state.student, &mut state.teacher] {
        let l = &mut net.layers[classifier];
        l.weight.iter_mut().for_each(|v| *v = 0.0);
        l.bias.iter_mut().for_each(|v| *v = 0.0);
    }
    // Zero biases put ReLU inputs over dead regions exactly on the kink, and dead adapter
    // units would leave projected features at zero norm; move both off those points.
    let adapter = classifier - 2;
    for l in &mut state.student.layers[..classifier] {
        l.bias.iter_mut().for_each(|v| *v = r.gen_range(0.01..0.05));
    }
    state.student.layers[adapter]
        .bias
        .iter_mut()
        .for_each(|v| *v = 0.5);
    state.teacher = state.student.clone();
    // Perturb the teacher so its outputs differ from the student's.
    let mut noise = r.clone();
    for p in state.teacher.param_slices_mut() {
        p.iter_mut()
            .for_each(|v| *v += 0.05 * (noise.gen::<f64>() - 0.5));
    }
    // Seed the teacher prototypes so the auxiliary term has history.
    state.step = 4;
    prepare_step(&config, &mut state, &batch).unwrap();
    let (fwd, targets) = prepare_step(&config, &mut state, &batch).unwrap();
    assert!(targets.stage_two);
    let analytic = student_objective(&config, &state.student, &fwd, &targets).unwrap();
    let b = analytic.bundle;
    assert!(
        b.l_con > 0.0 && b.l_u > 0.0 && b.l_aux > 0.0 && b.l_pc > 0.0,
        "{b:?}"
    );

    let images: Vec<&Sample> = batch.labeled.iter().chain(&batch.unlabeled).collect();
    let params = state.student.flat_params();
    let n_check = params.len() - state.student.layers[classifier].num_params();
    let mut net = state.student.clone();
    let objective = |x: &[f64], net: &mut pccs::model::Network| {
        let mut full = params.clone();
        full[..n_check].copy_from_slice(x);
        net.set_flat_params(&full).unwrap();
        let fwd = forward_student(net, &images).unwrap();
        student_objective(&config, net, &fwd, &targets)
            .unwrap()
            .bundle
            .l_total
    };
    let numeric = numeric_grad(&params[..n_check], 1e-6, |x| objective(x, &mut net));
    let grad = analytic.grad.flat_params();
    rel_err(&grad[..n_check], &numeric)
}

/// Exhaustive signed distance plane: 0 on the 4-neighbour boundary, minus the rounded
/// Euclidean distance to it inside, plus outside. `None` when the class is absent.
pub fn sdm_oracle(mask: &SegMask, class: usize) -> Option<Vec<i32>> {
    let (h, w) = (mask.height() as i64, mask.width() as i64);
    let fg = |y: i64, x: i64| {
        y >= 0 && x >= 0 && y < h && x < w && mask.get(y as usize, x as usize) as usize == class
    };
    let mut boundary = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if fg(y, x)
                && [(-1, 0), (1, 0), (0, -1), (0, 1)]
                    .iter()
                    .any(|(dy, dx)| !fg(y + dy, x + dx))
            {
                boundary.push((y, x));
            }
        }
    }
    if boundary.is_empty() {
        return None;
    }
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let d2 = boundary
                .iter()
                .map(|(by, bx)| (y - by).pow(2) + (x - bx).pow(2))
                .min()
                .unwrap();
            let d = (d2 as f64).sqrt().round() as i32;
            out.push(if fg(y, x) { -d } else { d });
        }
    }
    Some(out)
}

/// Random rectangles and discs over background, optionally sprinkled with label noise.
pub fn random_mask(seed: u64, h: usize, w: usize, classes: usize, noise: f64) -> SegMask {
    let mut r = rng(seed);
    let mut labels = vec![0u8; h * w];
    for _ in 0..r.gen_range(0..=4) {
        let c = r.gen_range(1..classes) as u8;
        let (cy, cx) = (r.gen_range(0..h) as f64, r.gen_range(0..w) as f64);
        let (ry, rx) = (
            r.gen_range(0.5..h as f64 / 2.0 + 1.0),
            r.gen_range(0.5..w as f64 / 2.0 + 1.0),
        );
        let disc = r.gen_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                let inside = if disc {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    labels[y * w + x] = c;
                }
            }
        }
    }
    for l in labels.iter_mut() {
        if r.gen_bool(noise) {
            *l = r.gen_range(0..classes) as u8;
        }
    }
    SegMask::new(h, w, classes, labels, Provenance::GroundTruth).unwrap()
}
