//! Training: box simulation, grouped splits, the AdamW loop and the
//! finite-difference gradient check.

mod gradcheck;
mod loss;
mod optim;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport, GroupError};
pub use loss::{
    bce_loss, dice_loss, thresholded_iou, total_loss, LossBreakdown, CONFIDENCE_WEIGHT,
    DEFAULT_DICE_EPSILON, PROB_CLAMP,
};
pub use optim::{adamw_step, AdamW, OptimizerState, ADAM_EPS};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::imgproc::ImagePlane;
use crate::mask::BinaryMask;
use crate::metrics::{evaluate_run, EvalOptions};
use crate::model::{forward, init_params, BoundingBox, ModelConfig, Net, ParameterSet, Params};
use crate::synth::{Dataset, Sample};
use crate::tensor::{Mat, Scalar};

/// Perturbation bound that scales a 20 px budget at 1024 px down to `image_size`.
pub fn default_perturb_max(image_size: usize) -> u32 {
    ((20 * image_size) as f64 / 1024.0).ceil().max(2.0) as u32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Images per optimizer step; every object of an image is a case.
    pub batch_size: usize,
    pub perturb_max: u32,
    /// Train / tune / validation fractions of the groups.
    pub fractions: [f64; 3],
    pub seed: u64,
    pub dice_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            epochs: 30,
            batch_size: 16,
            perturb_max: default_perturb_max(64),
            fractions: [0.8, 0.1, 0.1],
            seed: 0,
            dice_epsilon: DEFAULT_DICE_EPSILON,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.fractions.iter().any(|f| !(*f >= 0.0)) || (self.fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions {:?} must be >= 0 and sum to 1", self.fractions));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning_rate must be > 0 and weight_decay >= 0".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.dice_epsilon >= 0.0) {
            return bad("dice_epsilon must be >= 0".into());
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
        }
    }
}

/// Tight box of `gt` with each edge pushed outward by an independent
/// uniform draw from `0..=perturb_max`, clamped to the image.
pub fn simulate_box(gt: &BinaryMask, perturb_max: u32, rng: &mut impl Rng) -> Result<BoundingBox> {
    let tight = gt.bounding_box().ok_or(Error::EmptyMask)?;
    let (w, h) = (gt.width() as u32, gt.height() as u32);
    let mut draw = || rng.random_range(0..=perturb_max);
    let (dx0, dy0, dx1, dy1) = (draw(), draw(), draw(), draw());
    Ok(BoundingBox {
        x_min: tight.x_min.saturating_sub(dx0),
        y_min: tight.y_min.saturating_sub(dy0),
        x_max: (tight.x_max + dx1).min(w),
        y_max: (tight.y_max + dy1).min(h),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub tune: Vec<usize>,
    pub val: Vec<usize>,
}

/// Shuffles the distinct group ids with `seed` and cuts them by `fractions`.
/// Each split with a nonzero fraction receives at least one group.
pub fn split_dataset(group_ids: &[u32], fractions: [f64; 3], seed: u64) -> Result<Split> {
    let mut groups: Vec<u32> = group_ids.to_vec();
    groups.sort_unstable();
    groups.dedup();
    let wanted = fractions.iter().filter(|&&f| f > 0.0).count();
    if groups.len() < wanted {
        return Err(Error::InsufficientGroups {
            groups: groups.len(),
            splits: wanted,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);
    let g = groups.len();
    let take = |f: f64| {
        if f > 0.0 {
            ((g as f64 * f).round() as usize).max(1)
        } else {
            0
        }
    };
    let n_tune = take(fractions[1]);
    let n_val = take(fractions[2]);
    let n_train = g.saturating_sub(n_tune + n_val);
    if fractions[0] > 0.0 && n_train == 0 {
        return Err(Error::InsufficientGroups { groups: g, splits: wanted });
    }
    let mut which = std::collections::HashMap::new();
    for (i, &grp) in groups.iter().enumerate() {
        let s = if i < n_train {
            0
        } else if i < n_train + n_tune {
            1
        } else {
            2
        };
        which.insert(grp, s);
    }
    let mut split = Split::default();
    for (i, grp) in group_ids.iter().enumerate() {
        match which[grp] {
            0 => split.train.push(i),
            1 => split.tune.push(i),
            _ => split.val.push(i),
        }
    }
    Ok(split)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub tune_dsc_median: Option<f64>,
}

pub struct TrainOutcome {
    pub params: ParameterSet,
    pub log: Vec<EpochLog>,
}

/// Losses and, optionally, gradients of one image with all its boxes.
pub(crate) struct ImagePass<T> {
    pub losses: Vec<LossBreakdown>,
    pub ious: Vec<f64>,
    pub grads: Option<Vec<Mat<T>>>,
    /// Per-case probabilities and confidence, kept on forward-only passes.
    pub outputs: Vec<(Mat<T>, T)>,
}

/// `iou_targets` fixes the confidence targets; otherwise they come from the
/// current prediction. Gradients are of `weight * sum(case totals)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn image_pass<T: Scalar>(
    params: &Params<T>,
    cfg: &ModelConfig,
    plane: &ImagePlane,
    gts: &[&BinaryMask],
    boxes: &[BoundingBox],
    eps: f64,
    iou_targets: Option<&[f64]>,
    weight: f64,
    with_grad: bool,
) -> Result<ImagePass<T>> {
    let mut tape = Tape::new();
    let net = Net::bind(&mut tape, params, with_grad);
    let fwd = forward(&mut tape, &net, cfg, plane, boxes)?;
    let mut losses = Vec::with_capacity(boxes.len());
    let mut ious = Vec::with_capacity(boxes.len());
    let mut seeds = Vec::new();
    let mut outputs = Vec::new();
    for (i, (case, gt)) in fwd.cases.iter().zip(gts).enumerate() {
        let probs = tape.value(case.probs);
        let conf = tape.value(case.confidence).get(0, 0);
        let iou = match iou_targets {
            Some(t) => t[i],
            None => thresholded_iou(probs.data(), gt.data()),
        };
        let cl = loss::case_loss(probs, gt.data(), conf, iou, eps);
        if with_grad {
            let mut d = cl.d_probs;
            d.scale_assign(T::of(weight));
            seeds.push((case.probs, d));
            seeds.push((case.confidence, Mat::filled(1, 1, cl.d_confidence * T::of(weight))));
        }
        losses.push(cl.loss);
        ious.push(iou);
        if !with_grad {
            outputs.push((probs.clone(), conf));
        }
    }
    let grads = with_grad.then(|| {
        let mut g = tape.backward(seeds);
        net.vars()
            .iter()
            .zip(params.arrays())
            .map(|(&v, a)| g.take(v).unwrap_or_else(|| Mat::zeros(a.rows(), a.cols())))
            .collect()
    });
    Ok(ImagePass {
        losses,
        ious,
        grads,
        outputs,
    })
}

fn sample_boxes(sample: &Sample, perturb_max: u32, seed: u64, stream: u64) -> Result<Vec<BoundingBox>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x626f_7873);
    rng.set_stream(stream);
    sample
        .masks
        .iter()
        .map(|m| simulate_box(m, perturb_max, &mut rng))
        .collect()
}

/// Splits by group, then trains on the training part.
pub fn train(dataset: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let split = split_dataset(&dataset.group_ids(), cfg.fractions, cfg.seed)?;
    train_split(dataset, &split.train, &split.tune, model_cfg, cfg, |_| {})
}

/// Trains on `train_idx`, reporting tuning DSC on `tune_idx` after every
/// epoch. The result depends only on the inputs and the seed, never on the
/// thread count: per-image gradients are summed in a fixed order.
pub fn train_split(
    dataset: &Dataset,
    train_idx: &[usize],
    tune_idx: &[usize],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut params = init_params(model_cfg)?;
    if cfg.epochs == 0 {
        return Ok(TrainOutcome { params, log: Vec::new() });
    }
    if train_idx.is_empty() {
        return Err(Error::EmptyInput("training split is empty".into()));
    }
    let hp = cfg.optimizer();
    let mut state = OptimizerState::new(&params);
    let tune: Vec<&Sample> = tune_idx.iter().map(|&i| &dataset.samples[i]).collect();
    let mut order = train_idx.to_vec();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut batch_losses = Vec::new();
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let cases: usize = batch.iter().map(|&i| dataset.samples[i].masks.len()).sum();
            let weight = 1.0 / cases as f64;
            let passes = batch
                .par_iter()
                .map(|&i| {
                    let s = &dataset.samples[i];
                    let stream = ((epoch as u64) << 32) | i as u64;
                    let boxes = sample_boxes(s, cfg.perturb_max, cfg.seed, stream)?;
                    let gts: Vec<&BinaryMask> = s.masks.iter().collect();
                    image_pass(&params, model_cfg, &s.image, &gts, &boxes, cfg.dice_epsilon, None, weight, true)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut total = 0.0;
            let mut grads: Option<Vec<Mat<f32>>> = None;
            for p in passes {
                total += p.losses.iter().map(|l| l.total).sum::<f64>();
                let g = p.grads.expect("gradients requested");
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, x)| a.add_assign(x)),
                }
            }
            let loss = total * weight;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: b, loss });
            }
            adamw_step(&mut params, &grads.expect("nonempty batch"), &mut state, &hp)?;
            batch_losses.push(loss);
        }
        let mean_loss = batch_losses.iter().sum::<f64>() / batch_losses.len() as f64;
        let tune_dsc_median = if tune.is_empty() {
            None
        } else {
            let rep = evaluate_run(&tune, &params, model_cfg, &EvalOptions::default())?;
            Some(rep.overall().dsc.median)
        };
        let entry = EpochLog {
            epoch,
            mean_loss,
            tune_dsc_median,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { params, log })
}
