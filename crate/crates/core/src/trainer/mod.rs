//! Two-stage student/teacher training.
//!
//! Steps `0..warmup_steps` train the student on labelled images with the supervised loss only.
//! Afterwards every step runs the student on the batch, the EMA teacher on a flipped and noised
//! view (flips undone on its outputs), builds pseudo-labels, distance maps and the prototype
//! bank, updates the teacher prototypes, and takes one SGD step on the weighted objective.
//!
//! All randomness is a pure function of `(seed, stream, step, index)`, so a run resumed from a
//! checkpoint replays exactly the batches and augmentations it would have seen.

pub mod ablation;
pub mod checkpoint;
mod config;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{Paths, Preset, TrainConfig};

use crate::data::{
    augment_with, flip_pixels, flip_planes, AugmentParams, Dataset, Sample, Split, SplitManifest,
};
use crate::error::{domain, PccsError, Result};
use crate::geometry::{Provenance, SegMask, SignedDistanceMap};
use crate::losses::{
    consistency_loss, lambda_c_schedule, pixel_prototype_aux_loss, softmax_backward,
    supervised_loss, total_loss, uncertainty_loss_graded, uncertainty_weighted_pc_loss, Branch,
    LossBundle, LossParts, ProbabilityMap, Toggles,
};
use crate::metrics::{image_metrics, MetricReport};
use crate::model::{ema_update_weights, Network, NetworkOutputs, Tape};
use crate::optim::{clip_grad_norm, poly_lr, Sgd};
use crate::parallel::{par_map, par_map_range};
use crate::protobank::{class_mean_features, PrototypeBank, TeacherPrototypeSet};
use crate::PROJ_DIM;

/// Ratio between image and feature-map resolution.
pub const FEATURE_STRIDE: usize = 4;

/// Independent random streams derived from the root seed.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const LABELED_ORDER: u64 = 2;
    pub const UNLABELED_ORDER: u64 = 3;
    pub const LABELED_AUG: u64 = 4;
    pub const TEACHER_VIEW: u64 = 5;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of sub-stream `stream` at coordinates `(a, b)`.
pub fn derive_seed(root: u64, stream: u64, a: u64, b: u64) -> u64 {
    [stream, a, b]
        .iter()
        .fold(splitmix(root), |acc, &v| splitmix(acc ^ splitmix(v)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub split: String,
    pub dice: f64,
    pub jaccard: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Number of completed steps.
    pub step: u64,
    pub student: Network,
    pub teacher: Network,
    pub optimizer: Sgd,
    pub protos: TeacherPrototypeSet,
    pub history: Vec<MetricRecord>,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let student = Network::new(
            config.net.clone(),
            derive_seed(config.seed, stream::INIT, 0, 0),
        )?;
        let optimizer = Sgd::new(&student, config.momentum, config.weight_decay);
        Ok(Self {
            step: 0,
            teacher: student.clone(),
            student,
            optimizer,
            protos: TeacherPrototypeSet::new(config.net.num_classes),
            history: Vec::new(),
        })
    }
}

/// Labelled and unlabelled training samples in split-manifest order.
pub struct Pools<'a> {
    pub labeled: Vec<&'a Sample>,
    pub unlabeled: Vec<&'a Sample>,
}

impl<'a> Pools<'a> {
    pub fn new(dataset: &'a Dataset, splits: &SplitManifest) -> Result<Self> {
        let labeled = splits
            .labeled
            .iter()
            .map(|id| dataset.get(id))
            .collect::<Result<Vec<_>>>()?;
        if labeled.is_empty() {
            return domain("the labeled pool is empty");
        }
        if let Some(s) = labeled.iter().find(|s| s.mask.is_none()) {
            return domain(format!("labeled sample `{}` has no mask", s.id));
        }
        let unlabeled = splits
            .unlabeled
            .iter()
            .map(|id| dataset.get(id))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { labeled, unlabeled })
    }
}

/// `k`-th draw from a pool that is reshuffled every epoch.
fn pool_index(seed: u64, stream: u64, len: usize, k: u64) -> usize {
    let epoch = k / len as u64;
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        seed, stream, epoch, 0,
    )));
    order[(k % len as u64) as usize]
}

/// One training batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub step: u64,
    /// Augmented labelled samples (with masks).
    pub labeled: Vec<Sample>,
    /// Unlabelled samples as stored; empty during warm-up.
    pub unlabeled: Vec<Sample>,
    /// Teacher view of every image, labelled first; empty during warm-up.
    pub teacher_views: Vec<AugmentParams>,
}

pub fn make_batch(config: &TrainConfig, pools: &Pools, step: u64) -> Result<Batch> {
    if pools.labeled.is_empty() {
        return domain("the labeled pool is empty");
    }
    let seed = config.seed;
    let nl = config.batch_labeled;
    let labeled: Vec<Sample> = (0..nl)
        .map(|j| {
            let k = step * nl as u64 + j as u64;
            let s = pools.labeled[pool_index(seed, stream::LABELED_ORDER, pools.labeled.len(), k)];
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::LABELED_AUG, step, j as u64));
            augment_with(s, &AugmentParams::sample(&mut rng, s.h, s.w, true))
        })
        .collect();
    if step < config.warmup_steps {
        return Ok(Batch {
            step,
            labeled,
            unlabeled: vec![],
            teacher_views: vec![],
        });
    }
    let nu = config.batch_unlabeled;
    let unlabeled: Vec<Sample> = if pools.unlabeled.is_empty() {
        vec![]
    } else {
        (0..nu)
            .map(|j| {
                let k = (step - config.warmup_steps) * nu as u64 + j as u64;
                let i = pool_index(seed, stream::UNLABELED_ORDER, pools.unlabeled.len(), k);
                pools.unlabeled[i].clone()
            })
            .collect()
    };
    let teacher_views = labeled
        .iter()
        .chain(&unlabeled)
        .enumerate()
        .map(|(j, s)| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::TEACHER_VIEW, step, j as u64));
            AugmentParams::sample(&mut rng, s.h, s.w, false)
        })
        .collect();
    Ok(Batch {
        step,
        labeled,
        unlabeled,
        teacher_views,
    })
}

/// Quantities the student objective treats as constants.
#[derive(Clone, Debug)]
pub struct StepTargets {
    pub step: u64,
    pub stage_two: bool,
    /// Full-resolution ground truth of the labelled images.
    pub gt: Vec<SegMask>,
    /// Feature-resolution masks per image: ground truth, then pseudo-labels.
    pub feature_masks: Vec<SegMask>,
    /// Signed distance maps of `feature_masks` (empty when the bank loss is off).
    pub sdms: Vec<SignedDistanceMap>,
    /// Teacher probabilities aligned with the student view, for images under consistency.
    pub teacher_probs: Vec<Option<ProbabilityMap>>,
    pub teacher_prototypes: Vec<Option<Vec<f64>>>,
}

/// Loss terms and parameter gradient of one step.
pub struct StepGradients {
    pub bundle: LossBundle,
    pub grad: Network,
    pub bank_size: usize,
}

/// One row of `losses.csv`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub bundle: LossBundle,
    pub lr: f64,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "step,l_sup,l_pc,l_aux,l_con,l_u,l_c,l_total,lambda_c,lr";

    pub fn to_csv_row(&self) -> String {
        let b = &self.bundle;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            b.l_sup,
            b.l_pc,
            b.l_aux,
            b.l_con,
            b.l_u,
            b.l_c,
            b.l_total,
            b.lambda_c,
            self.lr
        )
    }
}

fn downsample(mask: &SegMask) -> Result<SegMask> {
    mask.downsample_majority(FEATURE_STRIDE)
}

/// Runs the teacher, builds pseudo-labels and distance maps, and updates the teacher
/// prototypes from the student features in `fwd` (labelled images first).
fn build_targets(
    config: &TrainConfig,
    state: &mut TrainState,
    batch: &Batch,
    images: &[&Sample],
    fwd: &[(NetworkOutputs, Tape)],
) -> Result<StepTargets> {
    let t = state.step;
    let stage_two = t >= config.warmup_steps;
    let toggles = config.toggles;
    let nl = batch.labeled.len();
    let gt: Vec<SegMask> = batch
        .labeled
        .iter()
        .map(|s| s.mask.clone().expect("labeled"))
        .collect();
    let use_unlabeled = stage_two && toggles.any();
    let n = images.len();
    let mut targets = StepTargets {
        step: t,
        stage_two,
        feature_masks: gt.iter().map(downsample).collect::<Result<_>>()?,
        gt,
        sdms: vec![],
        teacher_probs: vec![None; n],
        teacher_prototypes: state.protos.prototypes.clone(),
    };
    if !use_unlabeled {
        return Ok(targets);
    }

    let teacher = &state.teacher;
    let views: Vec<(&Sample, AugmentParams)> = images
        .iter()
        .copied()
        .zip(batch.teacher_views.iter().copied())
        .collect();
    let teacher_out = par_map(&views, |(s, view)| -> Result<(ProbabilityMap, Vec<f64>)> {
        debug_assert!(view.is_invertible());
        let v = augment_with(s, view);
        let out = teacher.forward(&v.image, v.h, v.w, Branch::Teacher)?;
        let mut probs = out.probs;
        flip_planes(&mut probs.data, s.h, s.w, view.hflip, view.vflip);
        let mut proj = out.projected.data;
        flip_pixels(
            &mut proj,
            s.h / FEATURE_STRIDE,
            s.w / FEATURE_STRIDE,
            PROJ_DIM,
            view.hflip,
            view.vflip,
        );
        Ok((probs, proj))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    for i in nl..n {
        let source = if config.student_pseudo_labels {
            &fwd[i].0.probs
        } else {
            &teacher_out[i].0
        };
        let pseudo = source.argmax(Provenance::Pseudo);
        targets.feature_masks.push(downsample(&pseudo)?);
    }
    if toggles.l_pc {
        targets.sdms = par_map(&targets.feature_masks, SignedDistanceMap::from_mask);
    }
    if toggles.l_con || toggles.l_u {
        for (i, (probs, _)) in teacher_out.iter().enumerate() {
            if i >= nl || config.consistency_on_labeled {
                targets.teacher_probs[i] = Some(probs.clone());
            }
        }
    }

    let c = config.net.num_classes;
    let student_items: Vec<_> = fwd
        .iter()
        .zip(&targets.feature_masks)
        .map(|(f, m)| (&f.0.projected, m))
        .collect();
    let student_means = class_mean_features(&student_items, c)?;
    let teacher_maps: Vec<_> = teacher_out
        .iter()
        .zip(&targets.feature_masks)
        .map(|((_, proj), m)| crate::protobank::FeatureMap {
            h: m.height(),
            w: m.width(),
            dim: PROJ_DIM,
            data: proj.clone(),
        })
        .collect();
    let teacher_items: Vec<_> = teacher_maps.iter().zip(&targets.feature_masks).collect();
    let teacher_means = class_mean_features(&teacher_items, c)?;
    state.protos.update(
        &student_means,
        &teacher_means,
        config.mu,
        config.gamma,
        true,
    )?;
    targets.teacher_prototypes = state.protos.prototypes.clone();
    Ok(targets)
}

/// Student forward passes of `images` with tapes for the backward pass.
pub fn forward_student(
    student: &Network,
    images: &[&Sample],
) -> Result<Vec<(NetworkOutputs, Tape)>> {
    par_map(images, |s| {
        student.forward_train(&s.image, s.h, s.w, Branch::Student)
    })
    .into_iter()
    .collect()
}

fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// Loss bundle and gradient of the student objective with every target held fixed.
///
/// The prototype-uncertainty weights are evaluated but not differentiated, and the
/// prototype classifier receives only its own cross-entropy.
pub fn student_objective(
    config: &TrainConfig,
    student: &Network,
    fwd: &[(NetworkOutputs, Tape)],
    targets: &StepTargets,
) -> Result<StepGradients> {
    let toggles = if targets.stage_two {
        config.toggles
    } else {
        Toggles::NONE
    };
    let n = fwd.len();
    let nl = targets.gt.len();
    if nl == 0 {
        return domain("batch has no labeled images");
    }
    let weights = config.weights();
    let lambda_c = lambda_c_schedule(targets.step, config.t_ramp);
    let mut parts = LossParts::default();
    let mut d_probs: Vec<Option<Vec<f64>>> = vec![None; n];
    let mut d_proj: Vec<Option<Vec<f64>>> = vec![None; n];
    let add = |slot: &mut Option<Vec<f64>>, alpha: f64, g: &[f64]| {
        axpy(slot.get_or_insert_with(|| vec![0.0; g.len()]), alpha, g);
    };

    for i in 0..nl {
        let g = supervised_loss(&fwd[i].0.probs, &targets.gt[i])?;
        parts.l_sup += g.value / nl as f64;
        add(&mut d_probs[i], 1.0 / nl as f64, &g.grad);
    }

    let cons: Vec<usize> = (0..n)
        .filter(|&i| targets.teacher_probs.get(i).is_some_and(Option::is_some))
        .collect();
    if (toggles.l_con || toggles.l_u) && !cons.is_empty() {
        let nc = cons.len() as f64;
        for &i in &cons {
            let pt = targets.teacher_probs[i].as_ref().unwrap();
            let ps = &fwd[i].0.probs;
            if toggles.l_con {
                let g = consistency_loss(ps, pt)?;
                parts.l_con += g.value / nc;
                add(&mut d_probs[i], lambda_c / nc, &g.d_first);
            }
            if toggles.l_u {
                let g = uncertainty_loss_graded(ps, pt)?;
                parts.l_u += g.value / nc;
                add(
                    &mut d_probs[i],
                    lambda_c * weights.lambda_u / nc,
                    &g.d_first,
                );
            }
        }
    }

    let mut bank_size = 0;
    if toggles.l_pc {
        let items: Vec<_> = fwd
            .iter()
            .zip(&targets.sdms)
            .map(|(f, s)| (&f.0.projected, s))
            .collect();
        let mut bank = PrototypeBank::extract(&items, config.max_bin, "student")?;
        bank.assign_uncertainties(|p| student.classify(p))?;
        bank_size = bank.len();
        let g = uncertainty_weighted_pc_loss(&bank, config.tau)?;
        parts.l_pc = g.value;
        let dims: Vec<_> = items.iter().map(|(f, _)| (f.num_pixels(), f.dim)).collect();
        for (i, pix) in bank
            .backprop_to_pixels(&g.d_vectors, &dims)
            .into_iter()
            .enumerate()
        {
            add(&mut d_proj[i], weights.lambda_pc, &pix);
        }
    }

    if toggles.l_aux {
        let items: Vec<_> = fwd
            .iter()
            .zip(&targets.feature_masks)
            .map(|(f, m)| (&f.0.projected, m))
            .collect();
        let g = pixel_prototype_aux_loss(&items, &targets.teacher_prototypes, config.tau)?;
        parts.l_aux = g.value;
        for (i, d) in g.d_features.iter().enumerate() {
            add(&mut d_proj[i], weights.lambda_aux, d);
        }
    }

    let bundle = total_loss(parts, toggles, weights, targets.step, config.t_ramp)?;

    let per_image = par_map_range(n, |i| {
        let mut g = student.zeros_like();
        let dl = d_probs[i]
            .as_ref()
            .map(|dp| softmax_backward(&fwd[i].0.probs, dp));
        if dl.is_some() || d_proj[i].is_some() {
            student.backward(&fwd[i].1, dl.as_deref(), d_proj[i].as_deref(), &mut g);
        }
        g
    });
    let mut grad = student.zeros_like();
    for g in &per_image {
        grad.add_scaled(g, 1.0);
    }

    if config.toggles.l_pc && config.classifier_weight > 0.0 {
        let items: Vec<_> = fwd[..nl]
            .iter()
            .zip(&targets.feature_masks[..nl])
            .map(|(f, m)| (&f.0.projected, m))
            .collect();
        student.classifier_loss(&items, config.classifier_weight, &mut grad);
    }
    Ok(StepGradients {
        bundle,
        grad,
        bank_size,
    })
}

/// Images the student processes this step: labelled first, unlabelled only when some
/// unsupervised term is active.
fn step_images<'b>(config: &TrainConfig, batch: &'b Batch, step: u64) -> Vec<&'b Sample> {
    let use_unlabeled = step >= config.warmup_steps && config.toggles.any();
    batch
        .labeled
        .iter()
        .chain(batch.unlabeled.iter().filter(|_| use_unlabeled))
        .collect()
}

/// Forward passes, targets and gradient of one step without touching the weights. Teacher
/// prototypes in `state` are updated.
pub fn prepare_step(
    config: &TrainConfig,
    state: &mut TrainState,
    batch: &Batch,
) -> Result<(Vec<(NetworkOutputs, Tape)>, StepTargets)> {
    if batch.labeled.is_empty() {
        return domain("the labeled pool is empty");
    }
    if batch.step != state.step {
        return domain(format!(
            "batch for step {} given at step {}",
            batch.step, state.step
        ));
    }
    let images = step_images(config, batch, state.step);
    let fwd = forward_student(&state.student, &images)?;
    let targets = build_targets(config, state, batch, &images, &fwd)?;
    Ok((fwd, targets))
}

/// One full training step; returns the logged record.
pub fn train_step(
    config: &TrainConfig,
    state: &mut TrainState,
    batch: &Batch,
) -> Result<LossRecord> {
    let (fwd, targets) = prepare_step(config, state, batch)?;
    let mut grads = student_objective(config, &state.student, &fwd, &targets)?;
    drop(fwd);
    if config.grad_clip > 0.0 {
        clip_grad_norm(&mut grads.grad, config.grad_clip);
    }
    let lr = poly_lr(config.lr, state.step, config.t_max, config.lr_power);
    state.optimizer.step(&mut state.student, &grads.grad, lr)?;
    ema_update_weights(&state.student, &mut state.teacher, config.mu_w)?;
    let record = LossRecord {
        step: state.step,
        bundle: grads.bundle,
        lr,
    };
    state.step += 1;
    Ok(record)
}

/// Argmax segmentation of one image.
pub fn predict(net: &Network, sample: &Sample) -> Result<SegMask> {
    Ok(net
        .forward(&sample.image, sample.h, sample.w, Branch::Student)?
        .probs
        .argmax(Provenance::Pseudo))
}

/// Per-class and mean metrics of `net` over `samples`, which must all carry masks.
pub fn evaluate(net: &Network, samples: &[&Sample]) -> Result<MetricReport> {
    if samples.is_empty() {
        return domain("cannot evaluate on an empty split");
    }
    let per_image = par_map(samples, |s| -> Result<_> {
        let gt = s
            .mask
            .as_ref()
            .ok_or_else(|| PccsError::Domain(format!("sample `{}` has no mask", s.id)))?;
        image_metrics(&predict(net, s)?, gt)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::aggregate(&per_image))
}

pub fn evaluate_split(
    net: &Network,
    dataset: &Dataset,
    splits: &SplitManifest,
    split: Split,
) -> Result<MetricReport> {
    let samples = splits
        .ids(split)
        .iter()
        .map(|id| dataset.get(id))
        .collect::<Result<Vec<_>>>()?;
    evaluate(net, &samples)
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Directory for `losses.csv`, checkpoints and metric files.
    pub out_dir: Option<PathBuf>,
    /// Checkpoint directory to resume from.
    pub resume: Option<PathBuf>,
    /// Stop after this many completed steps instead of `t_max`.
    pub stop_at: Option<u64>,
}

pub struct TrainOutcome {
    pub state: TrainState,
    /// Records of the steps run by this call.
    pub records: Vec<LossRecord>,
    /// Validation and test reports, when training reached `t_max`.
    pub val: Option<MetricReport>,
    pub test: Option<MetricReport>,
}

/// Opens `losses.csv`, keeping only rows from before `step` of an earlier run.
fn open_loss_log(path: &Path, step: u64) -> Result<fs::File> {
    let mut kept = String::from(LossRecord::CSV_HEADER);
    kept.push('\n');
    if step > 0 {
        if let Ok(text) = fs::read_to_string(path) {
            for line in text.lines().skip(1) {
                let s: Option<u64> = line.split(',').next().and_then(|v| v.parse().ok());
                if s.is_some_and(|s| s < step) {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
    }
    fs::write(path, kept)?;
    Ok(fs::OpenOptions::new().append(true).open(path)?)
}

/// Trains from scratch or from `opts.resume` up to `t_max` (or `opts.stop_at`).
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    splits: &SplitManifest,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.num_classes > config.net.num_classes {
        return Err(PccsError::Config(format!(
            "dataset has {} classes but the network predicts {}",
            dataset.num_classes, config.net.num_classes
        )));
    }
    let mut state = match &opts.resume {
        Some(dir) => checkpoint::load(dir, config)?,
        None => TrainState::new(config)?,
    };
    let pools = Pools::new(dataset, splits)?;
    let end = opts.stop_at.unwrap_or(config.t_max).min(config.t_max);
    let mut log = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(open_loss_log(
                &dir.join("losses.csv"),
                state.step,
            )?))
        }
        None => None,
    };
    let mut records = Vec::new();
    while state.step < end {
        let batch = make_batch(config, &pools, state.step)?;
        let record = train_step(config, &mut state, &batch)?;
        if let Some(log) = log.as_mut() {
            writeln!(log, "{}", record.to_csv_row())?;
        }
        if record.step % 100 == 0 {
            log::info!(
                "step {} l_total {:.4} l_sup {:.4} lr {:.4}",
                record.step,
                record.bundle.l_total,
                record.bundle.l_sup,
                record.lr
            );
        }
        records.push(record);
        if let (Some(dir), k) = (&opts.out_dir, config.checkpoint_every) {
            if k > 0 && state.step % k == 0 && state.step < end {
                log.as_mut().map(|l| l.flush()).transpose()?;
                checkpoint::save(&dir.join("checkpoint"), config, &state)?;
            }
        }
    }
    if let Some(mut l) = log {
        l.flush()?;
    }
    let (mut val, mut test) = (None, None);
    if state.step >= config.t_max {
        for (split, slot) in [(Split::Val, &mut val), (Split::Test, &mut test)] {
            if splits.ids(split).is_empty() {
                continue;
            }
            let report = evaluate_split(&state.student, dataset, splits, split)?;
            state.history.push(MetricRecord {
                step: state.step,
                split: if split == Split::Val { "val" } else { "test" }.into(),
                dice: report.mean.dice,
                jaccard: report.mean.jaccard,
            });
            *slot = Some(report);
        }
    }
    if let Some(dir) = &opts.out_dir {
        checkpoint::save(&dir.join("checkpoint"), config, &state)?;
        if let Some(r) = &test {
            fs::write(dir.join("final_metrics.csv"), r.to_csv())?;
        }
        if let Some(r) = &val {
            fs::write(dir.join("val_metrics.csv"), r.to_csv())?;
        }
    }
    Ok(TrainOutcome {
        state,
        records,
        val,
        test,
    })
}

/// Parses a `losses.csv` body back into records.
pub fn read_loss_log(text: &str) -> Result<Vec<LossRecord>> {
    let mut out = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let v: Vec<f64> = line
            .split(',')
            .map(|x| {
                x.parse::<f64>()
                    .map_err(|e| PccsError::Config(format!("bad losses.csv value `{x}`: {e}")))
            })
            .collect::<Result<_>>()?;
        if v.len() != 10 {
            return Err(PccsError::Config(format!(
                "losses.csv row has {} fields",
                v.len()
            )));
        }
        out.push(LossRecord {
            step: v[0] as u64,
            bundle: LossBundle {
                l_sup: v[1],
                l_pc: v[2],
                l_aux: v[3],
                l_con: v[4],
                l_u: v[5],
                l_c: v[6],
                l_total: v[7],
                lambda_c: v[8],
                ..LossBundle::default()
            },
            lr: v[9],
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_coordinate() {
        let a = derive_seed(1, 2, 3, 4);
        assert_eq!(a, derive_seed(1, 2, 3, 4));
        assert_ne!(a, derive_seed(1, 2, 4, 3));
        assert_ne!(a, derive_seed(2, 2, 3, 4));
    }

    #[test]
    fn pool_cycles_through_every_sample_each_epoch() {
        let mut seen: Vec<usize> = (0..7)
            .map(|k| pool_index(3, stream::LABELED_ORDER, 7, k))
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
        let mut second: Vec<usize> = (7..14)
            .map(|k| pool_index(3, stream::LABELED_ORDER, 7, k))
            .collect();
        second.sort_unstable();
        assert_eq!(second, (0..7).collect::<Vec<_>>());
    }
}
