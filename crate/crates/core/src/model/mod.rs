//! Encoder-decoder segmentation network with a fused-feature projection head.
//!
//! The encoder has one stage per entry of [`NetConfig::widths`]; stage `l` runs at resolution
//! `H / 2^l`. Each stage is two 3×3 conv + ReLU layers, with 2×2 max pooling between stages.
//! The decoder mirrors it with nearest upsampling and skip concatenation, followed by a 1×1
//! classification head.
//!
//! The contrastive branch fuses encoder stages 2, 3 and 4 (indices 1..=3, whichever exist) at
//! the stage-3 resolution `H / 4`: stage 2 is average-pooled, stage 4 upsampled. The
//! concatenation goes through a 1×1 conv + ReLU adapter to `fused_dim` channels and a linear
//! 1×1 projection to [`PROJ_DIM`] channels.

pub mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Result};
use crate::losses::{Branch, ProbabilityMap};
use crate::protobank::FeatureMap;
use crate::PROJ_DIM;
use layers::*;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub num_classes: usize,
    /// Encoder stage widths; at least three stages.
    pub widths: Vec<usize>,
    /// Channels of the fused feature map after the adapter.
    pub fused_dim: usize,
}

impl NetConfig {
    pub fn desk(num_classes: usize) -> Self {
        Self {
            num_classes,
            widths: vec![16, 32, 64, 64, 64],
            fused_dim: 256,
        }
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    /// Required divisor of the input height and width.
    pub fn size_multiple(&self) -> usize {
        1 << (self.depth() - 1)
    }

    /// Encoder stages feeding the fused features.
    pub fn fused_stages(&self) -> std::ops::Range<usize> {
        1..self.depth().min(4)
    }

    pub fn fused_in_channels(&self) -> usize {
        self.fused_stages().map(|s| self.widths[s]).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth() < 3 {
            return domain("the network needs at least three encoder stages");
        }
        if self.num_classes < 2 || self.widths.contains(&0) || self.fused_dim == 0 {
            return domain("class count, widths and fused_dim must be positive (>= 2 classes)");
        }
        Ok(())
    }
}

/// Everything a forward pass produces.
#[derive(Clone, Debug)]
pub struct NetworkOutputs {
    /// `C × H × W`.
    pub logits: Vec<f64>,
    pub probs: ProbabilityMap,
    /// `fused_dim × H/4 × W/4`, channel-major.
    pub fused_features: Vec<f64>,
    /// Pixel-major `H/4 × W/4 × 128`.
    pub projected: FeatureMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub config: NetConfig,
    /// Layers in a fixed order: encoder pairs, decoder pairs, head, adapter, projection,
    /// prototype classifier.
    pub layers: Vec<Conv>,
}

struct Layout {
    depth: usize,
}

impl Layout {
    fn enc(&self, stage: usize, i: usize) -> usize {
        2 * stage + i
    }
    fn dec(&self, stage: usize, i: usize) -> usize {
        2 * self.depth + 2 * stage + i
    }
    fn head(&self) -> usize {
        2 * self.depth + 2 * (self.depth - 1)
    }
    fn adapter(&self) -> usize {
        self.head() + 1
    }
    fn proj(&self) -> usize {
        self.head() + 2
    }
    fn classifier(&self) -> usize {
        self.head() + 3
    }
    fn count(&self) -> usize {
        self.head() + 4
    }
}

struct ConvTape {
    cols: Vec<f64>,
    out: Vec<f64>,
}

struct BlockTape {
    a: ConvTape,
    b: ConvTape,
    h: usize,
    w: usize,
}

/// Intermediate values kept by [`Network::forward_train`] for the backward pass.
pub struct Tape {
    h: usize,
    w: usize,
    enc: Vec<BlockTape>,
    pools: Vec<Vec<u32>>,
    dec: Vec<BlockTape>,
    head_cols: Vec<f64>,
    adapter: ConvTape,
    proj_cols: Vec<f64>,
}

impl Network {
    /// He-normal weights and zero biases from `seed`.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut net = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut net.layers {
            let fan_in = (layer.cin * layer.k * layer.k) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
            layer
                .weight
                .iter_mut()
                .for_each(|v| *v = normal.sample(&mut rng));
        }
        let lay = net.layout();
        // Layers without a following ReLU get variance 1/fan_in.
        for idx in [lay.proj(), lay.classifier()] {
            let s = (0.5f64).sqrt();
            net.layers[idx].weight.iter_mut().for_each(|v| *v *= s);
        }
        Ok(net)
    }

    /// Same architecture with every parameter zero.
    pub fn zeros(config: NetConfig) -> Self {
        let d = config.depth();
        let w = &config.widths;
        let mut layers = Vec::new();
        for s in 0..d {
            let cin = if s == 0 { 1 } else { w[s - 1] };
            layers.push(Conv::zeros(cin, w[s], 3));
            layers.push(Conv::zeros(w[s], w[s], 3));
        }
        for s in 0..d - 1 {
            layers.push(Conv::zeros(w[s + 1] + w[s], w[s], 3));
            layers.push(Conv::zeros(w[s], w[s], 3));
        }
        layers.push(Conv::zeros(w[0], config.num_classes, 1));
        layers.push(Conv::zeros(config.fused_in_channels(), config.fused_dim, 1));
        layers.push(Conv::zeros(config.fused_dim, PROJ_DIM, 1));
        layers.push(Conv::zeros(PROJ_DIM, config.num_classes, 1));
        debug_assert_eq!(layers.len(), Layout { depth: d }.count());
        Self { config, layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            layers: self.layers.iter().map(Conv::zeros_like).collect(),
        }
    }

    fn layout(&self) -> Layout {
        Layout {
            depth: self.config.depth(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Conv::num_params).sum()
    }

    /// Parameter buffers in canonical order.
    pub fn param_slices(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
    }

    pub fn param_slices_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.param_slices().flatten().copied().collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            ));
        }
        let mut off = 0;
        for buf in self.param_slices_mut() {
            let n = buf.len();
            buf.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    fn check_input(&self, image: &[f64], h: usize, w: usize) -> Result<()> {
        let m = self.config.size_multiple();
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return domain(format!("input {h}x{w} must be a positive multiple of {m}"));
        }
        if image.len() != h * w {
            return shape(format!("{} pixels for a {h}x{w} image", image.len()));
        }
        Ok(())
    }

    /// Inference forward pass.
    pub fn forward(
        &self,
        image: &[f64],
        h: usize,
        w: usize,
        branch: Branch,
    ) -> Result<NetworkOutputs> {
        self.forward_train(image, h, w, branch).map(|(o, _)| o)
    }

    /// Forward pass that also records the tape for [`Network::backward`].
    pub fn forward_train(
        &self,
        image: &[f64],
        h: usize,
        w: usize,
        branch: Branch,
    ) -> Result<(NetworkOutputs, Tape)> {
        self.check_input(image, h, w)?;
        let lay = self.layout();
        let cfg = &self.config;
        let depth = cfg.depth();

        let block = |a: &Conv, b: &Conv, x: &[f64], bh: usize, bw: usize| -> BlockTape {
            let (mut ya, cols_a) = a.forward(x, bh, bw);
            relu_inplace(&mut ya);
            let (mut yb, cols_b) = b.forward(&ya, bh, bw);
            relu_inplace(&mut yb);
            BlockTape {
                a: ConvTape {
                    cols: cols_a,
                    out: ya,
                },
                b: ConvTape {
                    cols: cols_b,
                    out: yb,
                },
                h: bh,
                w: bw,
            }
        };

        let mut enc: Vec<BlockTape> = Vec::with_capacity(depth);
        let mut pools = Vec::with_capacity(depth - 1);
        let (mut ch, mut cw) = (h, w);
        for s in 0..depth {
            let t = if s == 0 {
                block(
                    &self.layers[lay.enc(0, 0)],
                    &self.layers[lay.enc(0, 1)],
                    image,
                    ch,
                    cw,
                )
            } else {
                let prev = enc.last().unwrap();
                let (pooled, idx) = maxpool2(&prev.b.out, cfg.widths[s - 1], ch, cw);
                pools.push(idx);
                ch /= 2;
                cw /= 2;
                block(
                    &self.layers[lay.enc(s, 0)],
                    &self.layers[lay.enc(s, 1)],
                    &pooled,
                    ch,
                    cw,
                )
            };
            enc.push(t);
        }

        let mut dec: Vec<BlockTape> = (0..depth - 1).map(|_| BlockTape::empty()).collect();
        let mut cur = enc[depth - 1].b.out.clone();
        let mut cur_c = cfg.widths[depth - 1];
        for s in (0..depth - 1).rev() {
            let (sh, sw) = (enc[s].h, enc[s].w);
            let mut cat = upsample2(&cur, cur_c, sh / 2, sw / 2);
            cat.extend_from_slice(&enc[s].b.out);
            let t = block(
                &self.layers[lay.dec(s, 0)],
                &self.layers[lay.dec(s, 1)],
                &cat,
                sh,
                sw,
            );
            cur = t.b.out.clone();
            cur_c = cfg.widths[s];
            dec[s] = t;
        }
        let (logits, head_cols) = self.layers[lay.head()].forward(&cur, h, w);

        let (fh, fw) = (h / 4, w / 4);
        let mut fused_in = Vec::with_capacity(cfg.fused_in_channels() * fh * fw);
        for s in cfg.fused_stages() {
            let t = &enc[s];
            match s {
                1 => fused_in.extend(avgpool2(&t.b.out, cfg.widths[s], t.h, t.w)),
                2 => fused_in.extend_from_slice(&t.b.out),
                _ => fused_in.extend(upsample2(&t.b.out, cfg.widths[s], t.h, t.w)),
            }
        }
        let (mut fused, adapter_cols) = self.layers[lay.adapter()].forward(&fused_in, fh, fw);
        relu_inplace(&mut fused);
        let (proj, proj_cols) = self.layers[lay.proj()].forward(&fused, fh, fw);

        let probs = ProbabilityMap::from_logits(h, w, cfg.num_classes, &logits, branch);
        let outputs = NetworkOutputs {
            logits,
            probs,
            fused_features: fused.clone(),
            projected: FeatureMap::from_planar(fh, fw, PROJ_DIM, &proj),
        };
        let tape = Tape {
            h,
            w,
            enc,
            pools,
            dec,
            head_cols,
            adapter: ConvTape {
                cols: adapter_cols,
                out: fused,
            },
            proj_cols,
        };
        Ok((outputs, tape))
    }

    /// Accumulates into `grad` the parameter gradient of a scalar whose gradients with respect
    /// to the logits (`C × H × W`) and the projected features (pixel-major) are given.
    #[allow(clippy::needless_range_loop)]
    pub fn backward(
        &self,
        tape: &Tape,
        d_logits: Option<&[f64]>,
        d_projected: Option<&[f64]>,
        grad: &mut Network,
    ) {
        let lay = self.layout();
        let cfg = &self.config;
        let depth = cfg.depth();
        let (h, w) = (tape.h, tape.w);

        // Gradient arriving at each encoder stage output from places other than the next stage.
        let mut enc_out_grad: Vec<Vec<f64>> = tape
            .enc
            .iter()
            .zip(&cfg.widths)
            .map(|(t, &c)| vec![0.0; c * t.h * t.w])
            .collect();

        if let Some(dp) = d_projected {
            let (fh, fw) = (h / 4, w / 4);
            let planar = FeatureMap {
                h: fh,
                w: fw,
                dim: PROJ_DIM,
                data: dp.to_vec(),
            }
            .to_planar();
            let proj = &self.layers[lay.proj()];
            let mut d_fused = proj
                .backward(
                    &mut grad.layers[lay.proj()],
                    &tape.proj_cols,
                    &planar,
                    fh,
                    fw,
                    true,
                )
                .unwrap();
            relu_backward(&tape.adapter.out, &mut d_fused);
            let adapter = &self.layers[lay.adapter()];
            let d_in = adapter
                .backward(
                    &mut grad.layers[lay.adapter()],
                    &tape.adapter.cols,
                    &d_fused,
                    fh,
                    fw,
                    true,
                )
                .unwrap();
            let mut off = 0;
            for s in cfg.fused_stages() {
                let c = cfg.widths[s];
                let part = &d_in[off..off + c * fh * fw];
                off += c * fh * fw;
                let t = &tape.enc[s];
                let back = match s {
                    1 => avgpool2_backward(part, c, t.h, t.w),
                    2 => part.to_vec(),
                    _ => upsample2_backward(part, c, t.h, t.w),
                };
                add_into(&mut enc_out_grad[s], &back);
            }
        }

        if let Some(dl) = d_logits {
            let mut d_cur = self.layers[lay.head()]
                .backward(
                    &mut grad.layers[lay.head()],
                    &tape.head_cols,
                    dl,
                    h,
                    w,
                    true,
                )
                .unwrap();
            for s in 0..depth - 1 {
                let t = &tape.dec[s];
                let d_cat = self
                    .block_backward(lay.dec(s, 0), t, &mut d_cur, grad, true)
                    .unwrap();
                // d_cat = [upsampled deeper features | skip from encoder stage s].
                let up_c = cfg.widths[s + 1];
                let n = t.h * t.w;
                let (d_up, d_skip) = d_cat.split_at(up_c * n);
                add_into(&mut enc_out_grad[s], d_skip);
                d_cur = upsample2_backward(d_up, up_c, t.h / 2, t.w / 2);
            }
            add_into(&mut enc_out_grad[depth - 1], &d_cur);
        }

        // Encoder, deepest first.
        let mut carry: Option<Vec<f64>> = None;
        for s in (0..depth).rev() {
            let t = &tape.enc[s];
            let mut d_out = std::mem::take(&mut enc_out_grad[s]);
            if let Some(c) = carry.take() {
                add_into(&mut d_out, &c);
            }
            let need_input = s > 0;
            let d_in = self.block_backward(lay.enc(s, 0), t, &mut d_out, grad, need_input);
            if let Some(d_pooled) = d_in {
                let prev = &tape.enc[s - 1];
                carry = Some(maxpool2_backward(
                    &tape.pools[s - 1],
                    &d_pooled,
                    cfg.widths[s - 1] * prev.h * prev.w,
                ));
            }
        }
    }

    fn block_backward(
        &self,
        first: usize,
        t: &BlockTape,
        d_out: &mut [f64],
        grad: &mut Network,
        need_input: bool,
    ) -> Option<Vec<f64>> {
        relu_backward(&t.b.out, d_out);
        let (ga, gb) = grad.layers.split_at_mut(first + 1);
        let mut d_mid = self.layers[first + 1]
            .backward(&mut gb[0], &t.b.cols, d_out, t.h, t.w, true)
            .unwrap();
        relu_backward(&t.a.out, &mut d_mid);
        self.layers[first].backward(&mut ga[first], &t.a.cols, &d_mid, t.h, t.w, need_input)
    }

    /// Prototype classifier: affine map from the projection space followed by softmax.
    pub fn classify(&self, p: &[f64]) -> Vec<f64> {
        let layer = &self.layers[self.layout().classifier()];
        let logits: Vec<f64> = (0..layer.cout)
            .map(|o| {
                layer.bias[o]
                    + layer.weight[o * layer.cin..(o + 1) * layer.cin]
                        .iter()
                        .zip(p)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect();
        softmax(&logits)
    }

    /// Mean cross-entropy of the prototype classifier on labelled pixel features. Gradients go
    /// to the classifier only.
    #[allow(clippy::needless_range_loop)]
    pub fn classifier_loss(
        &self,
        items: &[(&FeatureMap, &crate::geometry::SegMask)],
        weight: f64,
        grad: &mut Network,
    ) -> f64 {
        let idx = self.layout().classifier();
        let layer = &self.layers[idx];
        let total: usize = items.iter().map(|(f, _)| f.num_pixels()).sum();
        if total == 0 {
            return 0.0;
        }
        let scale = weight / total as f64;
        let g = &mut grad.layers[idx];
        let mut loss = 0.0;
        for (feat, mask) in items {
            for (i, &l) in mask.labels().iter().enumerate() {
                let x = feat.pixel(i);
                let p = self.classify(x);
                loss -= (p[l as usize] + 1e-12).ln();
                for o in 0..layer.cout {
                    let d = scale * (p[o] - f64::from(o == l as usize));
                    g.bias[o] += d;
                    for (gw, &xv) in g.weight[o * layer.cin..(o + 1) * layer.cin]
                        .iter_mut()
                        .zip(x)
                    {
                        *gw += d * xv;
                    }
                }
            }
        }
        weight * loss / total as f64
    }

    /// Element-wise `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &Network, alpha: f64) {
        for (a, b) in self.param_slices_mut().zip(other.param_slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        }
    }

    pub fn param_distance(&self, other: &Network) -> f64 {
        self.param_slices()
            .zip(other.param_slices())
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)))
            .sum::<f64>()
            .sqrt()
    }
}

impl BlockTape {
    fn empty() -> Self {
        Self {
            a: ConvTape {
                cols: vec![],
                out: vec![],
            },
            b: ConvTape {
                cols: vec![],
                out: vec![],
            },
            h: 0,
            w: 0,
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Weight-level moving average: `teacher = decay * teacher + (1 - decay) * student`, computed
/// as a correction so identical weights stay bit-identical.
pub fn ema_update_weights(student: &Network, teacher: &mut Network, decay: f64) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return domain(format!("EMA decay must lie in [0, 1), got {decay}"));
    }
    if student.config != teacher.config {
        return shape("student and teacher architectures differ");
    }
    for (t, s) in teacher.param_slices_mut().zip(student.param_slices()) {
        for (tv, &sv) in t.iter_mut().zip(s) {
            *tv += (1.0 - decay) * (sv - *tv);
        }
    }
    Ok(())
}
