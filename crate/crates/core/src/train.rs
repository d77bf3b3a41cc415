//! Multi-task objective, learning-rate schedule, AdamW, augmentation and the
//! training loop.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use translocator_tensor::{Tape, Tensor, Var};

use crate::cells::CellIndex;
use crate::eval::{classify, CropPolicy};
use crate::model::{Batch, Model};
use crate::rngs::{stream, Stream};
use crate::synth::{Dataset, Sample};
use crate::{Error, Result};

pub const METRICS_HEADER: &str = "epoch,step,lr,train_loss,val_acc_fine,val_acc_scene";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let w = LossWeights { alpha, beta, gamma };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.alpha) && ok(self.beta) && ok(self.gamma)) {
            return Err(Error::Validation(
                "loss weights must be finite and nonnegative".into(),
            ));
        }
        if self.alpha + self.beta > 1.0 {
            return Err(Error::Validation(format!(
                "train.alpha + train.beta = {} exceeds 1",
                self.alpha + self.beta
            )));
        }
        Ok(())
    }

    /// Coefficients of the coarse, middle, fine and scene losses.
    pub fn coefficients(&self) -> [f64; 4] {
        [
            1.0 - self.alpha - self.beta,
            self.alpha,
            self.beta,
            self.gamma,
        ]
    }
}

/// `(1−α−β)·CE_coarse + α·CE_middle + β·CE_fine + γ·CE_scene`.
/// Heads with a zero coefficient are left off the tape entirely.
pub fn total_loss(
    tape: &mut Tape<'_>,
    logits: [Var; 4],
    labels: [&[usize]; 4],
    w: &LossWeights,
) -> Result<Var> {
    w.validate()?;
    let mut total: Option<Var> = None;
    for ((&l, targets), coef) in logits.iter().zip(labels).zip(w.coefficients()) {
        if coef == 0.0 {
            continue;
        }
        let ce = tape.cross_entropy(l, targets)?;
        let term = tape.scale(ce, coef);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub base_lr: f64,
    /// First-moment coefficient.
    pub momentum: f64,
    /// Second-moment coefficient.
    pub second_moment: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Validation(format!("train: {m}")));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail("base_lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.second_moment) {
            return fail("momentum and second_moment must be in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return fail("adam_eps must be positive and weight_decay nonnegative");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive");
        }
        if self.warmup_epochs >= self.epochs {
            return fail("warmup_epochs must be below epochs");
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at the end of training.
pub fn lr_at(step: usize, steps_per_epoch: usize, cfg: &OptimConfig) -> f64 {
    let warmup = (cfg.warmup_epochs * steps_per_epoch) as f64;
    let total = (cfg.epochs * steps_per_epoch) as f64;
    let s = step as f64;
    if s < warmup {
        return cfg.base_lr * s / warmup;
    }
    let progress = ((s - warmup) / (total - warmup)).min(1.0);
    0.5 * cfg.base_lr * (1.0 + (PI * progress).cos())
}

/// Adaptive-moment optimiser with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(params: &[Tensor]) -> Self {
        AdamW {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    /// One update. Non-finite gradients abort before any parameter changes.
    pub fn step(
        &mut self,
        params: &mut [Tensor],
        grads: &[Vec<f64>],
        lr: f64,
        cfg: &OptimConfig,
    ) -> Result<()> {
        assert_eq!(params.len(), grads.len());
        if let Some(i) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!(
                "gradient of parameter #{i} at step {}",
                self.t + 1
            )));
        }
        self.t += 1;
        let (b1, b2) = (cfg.momentum, cfg.second_moment);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let decay = 1.0 - lr * cfg.weight_decay;
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *x -= lr * mhat / (vhat.sqrt() + cfg.eps);
                *x *= decay;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Probability of applying the colour jitter at all.
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            flip_prob: 0.0,
            jitter_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.flip_prob)
            && unit(self.jitter_prob)
            && unit(self.brightness)
            && unit(self.contrast)
            && unit(self.saturation))
        {
            return Err(Error::Validation(
                "augment: probabilities and strengths must be in [0, 1]".into(),
            ));
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::Validation("augment.hue must be in [0, 0.5]".into()));
        }
        Ok(())
    }
}

/// Mirrors every row of each `size`-wide plane in place.
pub fn flip_planes<T>(data: &mut [T], width: usize) {
    for row in data.chunks_exact_mut(width) {
        row.reverse();
    }
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Colour jitter on a channel-major RGB image: brightness, contrast,
/// saturation, then hue, each clamped to `[0, 1]`.
pub fn color_jitter(rgb: &mut [f64], brightness: f64, contrast: f64, saturation: f64, hue: f64) {
    let plane = rgb.len() / 3;
    for x in rgb.iter_mut() {
        *x = (*x * brightness).clamp(0.0, 1.0);
    }
    let mean = (0..plane)
        .map(|p| luma(rgb[p], rgb[plane + p], rgb[2 * plane + p]))
        .sum::<f64>()
        / plane as f64;
    for x in rgb.iter_mut() {
        *x = (mean + (*x - mean) * contrast).clamp(0.0, 1.0);
    }
    for p in 0..plane {
        let gray = luma(rgb[p], rgb[plane + p], rgb[2 * plane + p]);
        for ch in 0..3 {
            let x = &mut rgb[ch * plane + p];
            *x = (gray + (*x - gray) * saturation).clamp(0.0, 1.0);
        }
    }
    if hue != 0.0 {
        for p in 0..plane {
            let (h, s, v) = rgb_to_hsv(rgb[p], rgb[plane + p], rgb[2 * plane + p]);
            let (r, g, b) = hsv_to_rgb(h + hue, s, v);
            rgb[p] = r;
            rgb[plane + p] = g;
            rgb[2 * plane + p] = b;
        }
    }
}

/// Random horizontal flip of RGB and segmentation together, then colour
/// jitter of the RGB channels only. Labels are untouched.
///
/// Every call consumes the same number of draws, whatever is applied.
pub fn augment<R: Rng>(sample: &Sample, width: usize, cfg: &AugmentConfig, rng: &mut R) -> Sample {
    let flip = rng.random::<f64>() < cfg.flip_prob;
    let jitter = rng.random::<f64>() < cfg.jitter_prob;
    let mut factor = |strength: f64| 1.0 + strength * (2.0 * rng.random::<f64>() - 1.0);
    let (b, c, s) = (
        factor(cfg.brightness),
        factor(cfg.contrast),
        factor(cfg.saturation),
    );
    let h = cfg.hue * (2.0 * rng.random::<f64>() - 1.0);

    let mut out = sample.clone();
    if flip {
        flip_planes(&mut out.rgb, width);
        flip_planes(&mut out.seg, width);
    }
    if jitter {
        let mut rgb: Vec<f64> = out.rgb.iter().map(|&v| f64::from(v)).collect();
        color_jitter(&mut rgb, b, c, s, h);
        out.rgb = rgb.into_iter().map(|v| v as f32).collect();
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Master seed for the init, shuffle and augment streams.
    pub seed: u64,
    pub optim: OptimConfig,
    pub loss: LossWeights,
    pub augment: AugmentConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.loss.validate()?;
        self.augment.validate()
    }
}

/// Training samples with labels at every level plus scene.
pub struct Labeled<'d> {
    pub samples: Vec<&'d Sample>,
    /// `[coarse, middle, fine, scene]` per sample.
    pub labels: Vec<[usize; 4]>,
    /// Samples unassigned at some level.
    pub excluded: usize,
}

/// Keeps the samples assigned at all three levels.
pub fn label_samples<'d>(data: &'d Dataset, index: &CellIndex) -> Labeled<'d> {
    let mut out = Labeled {
        samples: Vec::new(),
        labels: Vec::new(),
        excluded: 0,
    };
    for s in &data.samples {
        match index.locate_all(s.coord) {
            Some([c, m, f]) => {
                out.samples.push(s);
                out.labels.push([c, m, f, usize::from(s.scene)]);
            }
            None => out.excluded += 1,
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_acc_fine: f64,
    pub val_acc_scene: f64,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.step, self.lr, self.train_loss, self.val_acc_fine, self.val_acc_scene
        )
    }
}

pub fn metrics_csv(records: &[EpochRecord]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in records {
        writeln!(s, "{}", r.csv_row()).unwrap();
    }
    s
}

pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation fine-cell accuracy
    /// (latest on ties).
    pub best: Model,
    pub best_epoch: usize,
    pub records: Vec<EpochRecord>,
    pub excluded: usize,
    /// Set when a non-finite loss or gradient stopped training early.
    pub aborted: Option<String>,
}

/// Fraction of samples whose fine-cell and scene predictions are right.
/// Samples outside every fine cell count as misses.
pub fn val_accuracy(
    model: &Model,
    data: &Dataset,
    index: &CellIndex,
    batch_size: usize,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Validation("validation set is empty".into()));
    }
    let samples: Vec<&Sample> = data.samples.iter().collect();
    let pred = classify(model, &samples, batch_size, CropPolicy::Single)?;
    let mut fine = 0usize;
    let mut scene = 0usize;
    for (i, s) in samples.iter().enumerate() {
        if index.fine.locate(s.coord) == Some(pred.argmax(2, i)) {
            fine += 1;
        }
        if pred.argmax(3, i) == usize::from(s.scene) {
            scene += 1;
        }
    }
    let n = samples.len() as f64;
    Ok((fine as f64 / n, scene as f64 / n))
}

/// Checks that model heads, cell index and dataset label spaces agree.
pub fn check_label_spaces(model: &Model, index: &CellIndex, data: &Dataset) -> Result<()> {
    let [kc, km, kf] = index.class_counts();
    let want = [kc, km, kf, data.n_scene_classes];
    if model.config.classes != want {
        return Err(Error::Validation(format!(
            "model heads have {:?} classes but cells and data imply {:?}",
            model.config.classes, want
        )));
    }
    if model.config.image_size != data.height || data.height != data.width {
        return Err(Error::Validation(format!(
            "model expects {0}×{0} images, data has {1}×{2}",
            model.config.image_size, data.height, data.width
        )));
    }
    if model.config.is_dual() && model.config.n_seg_classes != data.n_seg_classes {
        return Err(Error::Validation(format!(
            "model expects {} segmentation classes, data has {}",
            model.config.n_seg_classes, data.n_seg_classes
        )));
    }
    Ok(())
}

/// Samples per gradient shard.
pub const SHARD: usize = 8;

/// Mean loss and parameter gradients over a batch. Fixed-size shards run in
/// parallel and are summed in shard order, so the result does not depend on
/// the thread count.
pub fn batch_gradients(
    model: &Model,
    samples: &[Sample],
    labels: &[[usize; 4]],
    w: &LossWeights,
) -> Result<(f64, Vec<Vec<f64>>)> {
    assert_eq!(samples.len(), labels.len());
    let total = samples.len() as f64;
    let dual = model.config.is_dual();
    let shards: Vec<Result<(f64, Vec<Vec<f64>>)>> = samples
        .par_chunks(SHARD)
        .zip(labels.par_chunks(SHARD))
        .map(|(s, l)| {
            let batch = Batch::from_samples(s, dual);
            let heads: Vec<Vec<usize>> = (0..4).map(|h| l.iter().map(|x| x[h]).collect()).collect();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let fw = model.forward(&mut tape, &bound, &batch)?;
            let loss = total_loss(
                &mut tape,
                fw.logits,
                [&heads[0], &heads[1], &heads[2], &heads[3]],
                w,
            )?;
            let value = tape.value(loss)[0];
            if !value.is_finite() {
                return Err(Error::NonFinite("loss".into()));
            }
            let scale = s.len() as f64 / total;
            let mut g = tape.backward(loss)?;
            let grads = bound
                .vars
                .iter()
                .map(|&v| {
                    let mut x = g.take(v).expect("every parameter is trainable");
                    x.iter_mut().for_each(|e| *e *= scale);
                    x
                })
                .collect();
            Ok((value * scale, grads))
        })
        .collect();
    let mut shards = shards.into_iter();
    let (mut loss, mut grads) = shards.next().expect("non-empty batch")?;
    for shard in shards {
        let (l, g) = shard?;
        loss += l;
        for (acc, x) in grads.iter_mut().zip(g) {
            acc.iter_mut().zip(x).for_each(|(a, b)| *a += b);
        }
    }
    Ok((loss, grads))
}

/// Mini-batch training with per-epoch validation; `on_epoch` sees each record as it is made.
pub fn train(
    mut model: Model,
    train_set: &Dataset,
    val_set: &Dataset,
    index: &CellIndex,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_label_spaces(&model, index, train_set)?;
    check_label_spaces(&model, index, val_set)?;
    let labeled = label_samples(train_set, index);
    if labeled.samples.is_empty() {
        return Err(Error::Validation(
            "no training sample falls inside a retained cell at every level".into(),
        ));
    }
    let n = labeled.samples.len();
    let bs = cfg.optim.batch_size;
    let steps_per_epoch = n.div_ceil(bs);
    let width = train_set.width;

    let mut shuffle_rng = stream(cfg.seed, Stream::Shuffle);
    let mut augment_rng = stream(cfg.seed, Stream::Augment);
    let mut opt = AdamW::new(model.params.tensors());
    let initial = model.clone();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut records = Vec::with_capacity(cfg.optim.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    let mut aborted = None;

    'epochs: for epoch in 0..cfg.optim.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(bs) {
            lr = lr_at(step, steps_per_epoch, &cfg.optim);
            let batch_samples: Vec<Sample> = chunk
                .iter()
                .map(|&i| augment(labeled.samples[i], width, &cfg.augment, &mut augment_rng))
                .collect();
            let labels: Vec<[usize; 4]> = chunk.iter().map(|&i| labeled.labels[i]).collect();
            let (loss, grads) = match batch_gradients(&model, &batch_samples, &labels, &cfg.loss) {
                Ok(r) => r,
                Err(Error::NonFinite(what)) => {
                    aborted = Some(format!("{what} at epoch {epoch}, step {step}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if let Err(e) = opt.step(model.params.tensors_mut(), &grads, lr, &cfg.optim) {
                aborted = Some(format!("{e} (epoch {epoch})"));
                break 'epochs;
            }
            loss_sum += loss * chunk.len() as f64;
            step += 1;
        }
        let (val_fine, val_scene) = val_accuracy(&model, val_set, index, bs)?;
        let rec = EpochRecord {
            epoch,
            step,
            lr,
            train_loss: loss_sum / n as f64,
            val_acc_fine: val_fine,
            val_acc_scene: val_scene,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} val fine {:.4} scene {:.4} lr {:.3e}",
            rec.train_loss,
            val_fine,
            val_scene,
            lr
        );
        on_epoch(&rec);
        records.push(rec);
        if best.as_ref().is_none_or(|(acc, _, _)| val_fine >= *acc) {
            best = Some((val_fine, epoch, model.clone()));
        }
    }

    let (best_epoch, best) = match best {
        Some((_, e, m)) => (e, m),
        // aborted before the first validation
        None => (0, initial),
    };
    Ok(TrainOutcome {
        best,
        best_epoch,
        records,
        excluded: labeled.excluded,
        aborted,
    })
}
