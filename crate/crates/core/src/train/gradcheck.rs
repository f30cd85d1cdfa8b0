//! Central-difference check of the analytic gradients in 64-bit arithmetic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{image_pass, CONFIDENCE_WEIGHT, DEFAULT_DICE_EPSILON, PROB_CLAMP};
use crate::error::Result;
use crate::mask::BinaryMask;
use crate::model::{init_params, BoundingBox, Init, ModelConfig, Params};
use crate::synth::{render_sample, Style, StyleMix, SynthSpec};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Scales the analytic gradient of this parameter by 1.5 before
    /// comparing; used to prove the harness catches faults.
    pub corrupt: Option<String>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            corrupt: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub group: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GroupError> {
        self.groups
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Weight scale of the check point relative to `1/sqrt(fan_in)`. Larger
/// gains raise curvature and with it the truncation error of the step.
const CHECK_GAIN: f64 = 0.7;

/// Evaluation point for the check. The training init (std 0.02) leaves
/// many gradients near 1e-9, where central differences drown in rounding;
/// fan-in scaled weights keep every gradient well above that floor.
fn check_point(cfg: &ModelConfig, seed: u64) -> Result<Params<f64>> {
    let mut params: Params<f64> = init_params(cfg)?.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let specs = params.specs().to_vec();
    for (spec, arr) in specs.iter().zip(params.arrays_mut()) {
        if !spec.trainable() {
            continue;
        }
        let (std, offset) = if spec.rows > 1 {
            (CHECK_GAIN / (spec.rows as f64).sqrt(), 0.0)
        } else if matches!(spec.init, Init::Ones) {
            (0.1, 1.0)
        } else {
            (0.1, 0.0)
        };
        for v in arr.data_mut() {
            *v = offset + std * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(params)
}

/// `L(up) - L(down)` assembled from per-pixel differences. Subtracting two
/// whole-loss totals of magnitude ~3 would leave about 1e-12 of rounding
/// in every difference quotient, swamping gradients near 1e-8.
fn loss_difference(
    up: &[(Mat<f64>, f64)],
    down: &[(Mat<f64>, f64)],
    gts: &[&BinaryMask],
    ious: &[f64],
    eps: f64,
) -> f64 {
    let mut total = 0.0;
    for (((pu, cu), (pd, cd)), (gt, iou)) in up.iter().zip(down).zip(gts.iter().zip(ious)) {
        let n = pu.data().len() as f64;
        let (mut d_bce, mut a_dn, mut b_up, mut b_dn, mut d_a, mut d_b) =
            (0.0, eps, eps, eps, 0.0, 0.0);
        for ((&su, &sd), &g) in pu.data().iter().zip(pd.data()).zip(gt.data()) {
            let g = g as f64;
            let (cu_, cd_) = (
                su.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP),
                sd.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP),
            );
            let ds = cu_ - cd_;
            // ln(su) - ln(sd) and ln(1-su) - ln(1-sd) without cancellation
            d_bce -= g * (ds / cd_).ln_1p() + (1.0 - g) * (-ds / (1.0 - cd_)).ln_1p();
            a_dn += 2.0 * g * sd;
            b_up += g + su * su;
            b_dn += g + sd * sd;
            d_a += 2.0 * g * (su - sd);
            d_b += (su - sd) * (su + sd);
        }
        d_bce /= n;
        let d_dice = if b_up == 0.0 || b_dn == 0.0 {
            0.0
        } else {
            -(d_a * b_dn - a_dn * d_b) / (b_up * b_dn)
        };
        let d_conf = CONFIDENCE_WEIGHT * (cu - cd) * (cu + cd - 2.0 * iou);
        total += d_bce + d_dice + d_conf;
    }
    total
}

pub fn grad_check(cfg: &ModelConfig) -> Result<GradCheckReport> {
    grad_check_with(cfg, &GradCheckOptions::default())
}

/// Checks every element of every trainable array on one synthetic image
/// with a tight and a loosened box. Confidence targets are frozen at the
/// unperturbed prediction so the loss is smooth in the parameters.
pub fn grad_check_with(cfg: &ModelConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut params = check_point(cfg, opts.seed)?;
    let spec = SynthSpec {
        style: StyleMix::Single(Style::CtLike),
        image_size: cfg.image_size.max(16),
        min_objects: 1,
        max_objects: 1,
        seed: opts.seed,
        ..SynthSpec::default()
    };
    let (sample, _) = render_sample(&spec, 0)?;
    let plane = if sample.image.width() == cfg.image_size {
        sample.image.clone()
    } else {
        crate::imgproc::resize_image(&sample.image, cfg.image_size, cfg.image_size)?
    };
    let gt = crate::imgproc::resize_mask(&sample.masks[0], cfg.image_size, cfg.image_size)?;
    let tight = gt.bounding_box().unwrap_or(BoundingBox::new(0, 0, 1, 1));
    let side = cfg.image_size as u32;
    let loose = BoundingBox {
        x_min: tight.x_min.saturating_sub(2),
        y_min: tight.y_min.saturating_sub(1),
        x_max: (tight.x_max + 1).min(side),
        y_max: (tight.y_max + 2).min(side),
    };
    let gts: Vec<&BinaryMask> = vec![&gt, &gt];
    let boxes = [tight, loose];
    let eps = DEFAULT_DICE_EPSILON;

    let base = image_pass(&params, cfg, &plane, &gts, &boxes, eps, None, 1.0, true)?;
    let ious = base.ious.clone();
    let mut analytic = base.grads.expect("gradients requested");
    if let Some(name) = &opts.corrupt {
        if let Some(i) = params.position(name) {
            analytic[i].scale_assign(1.5);
        }
    }
    let outputs_at = |p: &Params<f64>| -> Result<Vec<(Mat<f64>, f64)>> {
        Ok(image_pass::<f64>(p, cfg, &plane, &gts, &boxes, eps, Some(&ious), 1.0, false)?.outputs)
    };

    let h = opts.step;
    let mut groups = Vec::new();
    for i in 0..params.len() {
        let spec = params.specs()[i].clone();
        if !spec.trainable() {
            continue;
        }
        let n = spec.len();
        let mut worst: f64 = 0.0;
        for k in 0..n {
            let orig = params.arrays()[i].data()[k];
            params.arrays_mut()[i].data_mut()[k] = orig + h;
            let up = outputs_at(&params)?;
            params.arrays_mut()[i].data_mut()[k] = orig - h;
            let down = outputs_at(&params)?;
            params.arrays_mut()[i].data_mut()[k] = orig;
            let numeric = loss_difference(&up, &down, &gts, &ious, eps) / (2.0 * h);
            worst = worst.max(relative_error(analytic[i].data()[k], numeric));
        }
        groups.push(GroupError {
            group: spec.name,
            max_rel_error: worst,
            checked: n,
        });
    }
    Ok(GradCheckReport { groups })
}
