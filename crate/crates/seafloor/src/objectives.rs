//! Mask-aware scalar loss functionals, usable for evaluation and inside the
//! toy trainer.
//!
//! All masked L1 means normalize by (water-pixel count x channels) so that
//! tiles with different water fractions produce comparable losses. The
//! radiance term is a plain L2 norm over masked elements. An empty mask
//! always yields 0.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::imagecore::{masked_mean_abs, RasterImage, WaterMask};

/// Probabilities fed to the adversarial losses are clamped into
/// `[EPS, 1 - EPS]` before the logarithm.
pub const PROB_EPS: f64 = 1e-7;

/// Weights of the total objective. Defaults: gamma 30, sigma 90, iota 100,
/// tau 50, nu 10.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossWeights {
    pub gamma: f64,
    pub sigma: f64,
    pub iota: f64,
    pub tau: f64,
    pub nu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma: 30.0,
            sigma: 90.0,
            iota: 100.0,
            tau: 50.0,
            nu: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.gamma, self.sigma, self.iota, self.tau, self.nu];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::NonFiniteInput(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// The individual loss terms entering the total objective.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct LossTerms {
    pub l_gd: f64,
    pub l_gs: f64,
    pub l_r: f64,
    pub l_gj: f64,
    pub l_t: f64,
    pub l_n: f64,
    pub l_adv: f64,
}

/// Loss terms plus their weighted total:
/// `total = l_adv + gamma (l_gs + l_gd) + sigma l_r + iota l_gj + tau l_t + nu l_n`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossReport {
    pub l_gd: f64,
    pub l_gs: f64,
    pub l_r: f64,
    pub l_gj: f64,
    pub l_t: f64,
    pub l_n: f64,
    pub l_adv: f64,
    pub total: f64,
}

/// Diffuse reflectance loss: masked L1 mean over 3-channel rasters.
pub fn loss_diffuse(target: &RasterImage, pred: &RasterImage, mask: &WaterMask) -> Result<f64> {
    expect_channels(target, 3, "diffuse")?;
    masked_mean_abs(target, pred, mask)
}

/// Specular reflectance loss: masked L1 mean over 1-channel rasters.
pub fn loss_specular(target: &RasterImage, pred: &RasterImage, mask: &WaterMask) -> Result<f64> {
    expect_channels(target, 1, "specular")?;
    masked_mean_abs(target, pred, mask)
}

/// Radiance reconstruction loss: L2 norm of the difference between the RGB
/// composite and the predicted diffuse-plus-specular sum, gated elementwise
/// by the mask.
pub fn loss_radiance_l2(
    cube_rgb: &RasterImage,
    pred_sum: &RasterImage,
    mask: &WaterMask,
) -> Result<f64> {
    if !cube_rgb.same_shape(pred_sum) {
        return Err(Error::DimensionMismatch(
            "radiance loss operands disagree".into(),
        ));
    }
    if !mask.matches(cube_rgb) {
        return Err(Error::DimensionMismatch(
            "mask does not match radiance images".into(),
        ));
    }
    let channels = cube_rgb.channels();
    let mut sum_sq = 0.0;
    for y in 0..cube_rgb.height() {
        for x in 0..cube_rgb.width() {
            if mask.is_water(y, x) {
                for c in 0..channels {
                    let d = cube_rgb.get(y, x, c) - pred_sum.get(y, x, c);
                    sum_sq += d * d;
                }
            }
        }
    }
    Ok(sum_sq.sqrt())
}

/// Transmission loss `t`: masked L1 mean over 1-channel maps.
pub fn loss_transmission(target: &RasterImage, pred: &RasterImage, mask: &WaterMask) -> Result<f64> {
    expect_channels(target, 1, "transmission")?;
    masked_mean_abs(target, pred, mask)
}

/// Scale-invariant depth loss: `log(t + 0.5)` plus the mean over pixels of
/// `|dx d| + |dy d|` where `d = pred - target` and the gradients are forward
/// differences (zero on the last column / row).
pub fn loss_depth_scale_invariant(
    t: f64,
    pred: &RasterImage,
    target: &RasterImage,
) -> Result<f64> {
    if t < 0.0 {
        return Err(Error::InvalidArgument(
            "t is an L1 value and must be non-negative".into(),
        ));
    }
    if !pred.same_shape(target) || pred.channels() != 1 {
        return Err(Error::DimensionMismatch(
            "depth loss needs matching 1-channel maps".into(),
        ));
    }
    let h = pred.height();
    let w = pred.width();
    let d = |y: usize, x: usize| pred.get(y, x, 0) - target.get(y, x, 0);
    let mut grad_sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                grad_sum += (d(y, x + 1) - d(y, x)).abs();
            }
            if y + 1 < h {
                grad_sum += (d(y + 1, x) - d(y, x)).abs();
            }
        }
    }
    Ok((t + 0.5).ln() + grad_sum / (h * w) as f64)
}

/// Dewatered radiance loss: masked L1 mean over 3-channel rasters.
pub fn loss_dewatered(target: &RasterImage, pred: &RasterImage, mask: &WaterMask) -> Result<f64> {
    expect_channels(target, 3, "dewatered")?;
    masked_mean_abs(target, pred, mask)
}

/// Resynthesis loss between the real and re-synthesized underwater images:
/// masked L1 mean over 3-channel rasters.
pub fn loss_resynthesis(n_real: &RasterImage, n_fake: &RasterImage, mask: &WaterMask) -> Result<f64> {
    expect_channels(n_real, 3, "resynthesis")?;
    masked_mean_abs(n_real, n_fake, mask)
}

fn expect_channels(img: &RasterImage, channels: usize, what: &str) -> Result<()> {
    if img.channels() != channels {
        return Err(Error::DimensionMismatch(format!(
            "{what} loss expects {channels}-channel rasters, got {}",
            img.channels()
        )));
    }
    Ok(())
}

/// Generator objective form for the adversarial term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GanLossForm {
    /// `-log D(fake)`: the usual surrogate, with useful gradients when the
    /// discriminator wins early.
    #[default]
    NonSaturating,
    /// `log(1 - D(fake))`: the literal min-max generator term.
    Saturating,
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Cross-entropy adversarial losses over probability collections.
/// Returns `(generator, discriminator)` where
/// `disc = -mean log d_real - mean log(1 - d_fake)` and the generator term
/// follows `form`.
pub fn adversarial_losses_with(
    form: GanLossForm,
    d_real: &[f64],
    d_fake: &[f64],
) -> (f64, f64) {
    let mean = |vals: &[f64], f: &dyn Fn(f64) -> f64| -> f64 {
        if vals.is_empty() {
            return 0.0;
        }
        vals.iter().map(|&p| f(clamp_prob(p))).sum::<f64>() / vals.len() as f64
    };
    let disc = -mean(d_real, &|p| p.ln()) - mean(d_fake, &|p| (1.0 - p).ln());
    let gen = match form {
        GanLossForm::NonSaturating => -mean(d_fake, &|p| p.ln()),
        GanLossForm::Saturating => mean(d_fake, &|p| (1.0 - p).ln()),
    };
    (gen, disc)
}

/// Non-saturating adversarial losses; see [`adversarial_losses_with`].
pub fn adversarial_losses(d_real: &[f64], d_fake: &[f64]) -> (f64, f64) {
    adversarial_losses_with(GanLossForm::NonSaturating, d_real, d_fake)
}

/// Weighted total objective.
pub fn total_objective(terms: LossTerms, weights: &LossWeights) -> Result<LossReport> {
    weights.validate()?;
    let all = [
        terms.l_gd, terms.l_gs, terms.l_r, terms.l_gj, terms.l_t, terms.l_n, terms.l_adv,
    ];
    if all.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("loss term".into()));
    }
    let total = terms.l_adv
        + weights.gamma * (terms.l_gs + terms.l_gd)
        + weights.sigma * terms.l_r
        + weights.iota * terms.l_gj
        + weights.tau * terms.l_t
        + weights.nu * terms.l_n;
    Ok(LossReport {
        l_gd: terms.l_gd,
        l_gs: terms.l_gs,
        l_r: terms.l_r,
        l_gj: terms.l_gj,
        l_t: terms.l_t,
        l_n: terms.l_n,
        l_adv: terms.l_adv,
        total,
    })
}
