//! ScMix augmentation and the UAP crop-resize transform.
//!
//! Self-mix blends two random crops of the same image with the dominant
//! weight forced to the first crop (η ≥ 0.5), which keeps the semantics of
//! the original image intact; cross-mix then adds a faint second image.
//! The soft target is the matching convex combination of the two crop
//! embeddings. The same crop-resize machinery, applied to the perturbation
//! itself, trains UAP subregions; it is linear, so its adjoint carries
//! gradients back to the full perturbation.

use ndarray::{Array1, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::adapter::EncoderBundle;
use crate::dataset::{Caption, CaptionedImage, Geometry, ImageSample};
use crate::error::{Result, UapError};
use crate::uap::ImageUAP;

/// Self-mix / cross-mix parameters.
///
/// `beta1 + beta2 ≤ 1` keeps blended pixels inside `[0, 1]` without
/// post-hoc clipping; `crop_range` is the fraction of each spatial side
/// retained by self-mix crops.
#[derive(Debug, Clone, Copy)]
pub struct ScMixParams {
    pub alpha_mix: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub crop_range: (f64, f64),
}

impl ScMixParams {
    pub fn new(alpha_mix: f64, beta1: f64, beta2: f64, crop_range: (f64, f64)) -> Result<Self> {
        if alpha_mix.is_nan() || alpha_mix <= 0.0 {
            return Err(UapError::Param(format!(
                "alpha_mix must be > 0, got {alpha_mix}"
            )));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || beta1 <= beta2 {
            return Err(UapError::Param(format!(
                "need beta1 > beta2, both in [0, 1); got beta1={beta1}, beta2={beta2}"
            )));
        }
        if beta1 + beta2 > 1.0 {
            return Err(UapError::Param(format!(
                "beta1 + beta2 must be <= 1, got {}",
                beta1 + beta2
            )));
        }
        validate_scale_range(crop_range)?;
        Ok(ScMixParams {
            alpha_mix,
            beta1,
            beta2,
            crop_range,
        })
    }
}

impl Default for ScMixParams {
    fn default() -> Self {
        ScMixParams {
            alpha_mix: 1.0,
            beta1: 0.8,
            beta2: 0.2,
            crop_range: (0.5, 1.0),
        }
    }
}

/// Scale range for the UAP crop-resize transform.
#[derive(Debug, Clone, Copy)]
pub struct CropResizeParams {
    pub scale_range: (f64, f64),
}

impl CropResizeParams {
    pub fn new(scale_range: (f64, f64)) -> Result<Self> {
        validate_scale_range(scale_range)?;
        Ok(CropResizeParams { scale_range })
    }

    /// The identity transform (full-frame crop).
    pub fn identity() -> Self {
        CropResizeParams {
            scale_range: (1.0, 1.0),
        }
    }
}

impl Default for CropResizeParams {
    fn default() -> Self {
        CropResizeParams {
            scale_range: (0.5, 1.0),
        }
    }
}

fn validate_scale_range(range: (f64, f64)) -> Result<()> {
    let (lo, hi) = range;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(UapError::Param(format!(
            "scale range must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"
        )));
    }
    Ok(())
}

/// One augmented (image, caption) pair with its soft embedding target.
#[derive(Debug, Clone)]
pub struct AugmentedPair {
    /// Cross-mixed image x̃.
    pub mixed: Array3<f64>,
    /// Self-mixed image x̂.
    pub self_mixed: Array3<f64>,
    pub caption: Caption,
    /// Soft target p = η·f_I(x¹) + (1−η)·f_I(x²).
    pub soft_target: Array1<f64>,
    pub eta: f64,
}

/// A sampled axis-aligned crop, resized back to the full frame bilinearly.
///
/// The transform is linear in its input; `adjoint` is its exact transpose.
#[derive(Debug, Clone)]
pub struct CropDraw {
    r0: usize,
    c0: usize,
    ch: usize,
    cw: usize,
    out_h: usize,
    out_w: usize,
}

struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn tap(out_idx: usize, out_len: usize, crop_len: usize, offset: usize) -> Tap {
    // Half-pixel-center mapping; collapses to the exact identity when the
    // crop spans the full frame.
    let s = (out_idx as f64 + 0.5) * (crop_len as f64 / out_len as f64) - 0.5;
    let s = s.clamp(0.0, (crop_len - 1) as f64);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(crop_len - 1);
    Tap {
        lo: offset + lo,
        hi: offset + hi,
        frac: s - lo as f64,
    }
}

impl CropDraw {
    /// Sample a crop: side fractions uniform in `scale_range` per axis,
    /// offsets uniform over the valid positions.
    pub fn sample(range: (f64, f64), geometry: Geometry, rng: &mut ChaCha8Rng) -> Result<Self> {
        validate_scale_range(range)?;
        let side = |len: usize, frac: f64| -> usize {
            ((frac * len as f64).round() as usize).clamp(1, len)
        };
        let frac_h = rng.random_range(range.0..=range.1);
        let frac_w = rng.random_range(range.0..=range.1);
        let ch = side(geometry.h, frac_h);
        let cw = side(geometry.w, frac_w);
        let r0 = rng.random_range(0..=(geometry.h - ch));
        let c0 = rng.random_range(0..=(geometry.w - cw));
        Ok(CropDraw {
            r0,
            c0,
            ch,
            cw,
            out_h: geometry.h,
            out_w: geometry.w,
        })
    }

    /// The full-frame crop (exact identity).
    pub fn identity(geometry: Geometry) -> Self {
        CropDraw {
            r0: 0,
            c0: 0,
            ch: geometry.h,
            cw: geometry.w,
            out_h: geometry.h,
            out_w: geometry.w,
        }
    }

    /// Whole-frame resample from `src` to `target` spatial dims (no crop).
    pub fn resize(src: Geometry, target: Geometry) -> Self {
        CropDraw {
            r0: 0,
            c0: 0,
            ch: src.h,
            cw: src.w,
            out_h: target.h,
            out_w: target.w,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.r0 == 0 && self.c0 == 0 && self.ch == self.out_h && self.cw == self.out_w
    }

    /// Crop and bilinearly resize back to the full frame. Every output
    /// value is a convex combination of inputs, so the l∞ norm never grows.
    pub fn apply(&self, src: &Array3<f64>) -> Array3<f64> {
        let channels = src.dim().2;
        let mut out = Array3::<f64>::zeros((self.out_h, self.out_w, channels));
        for r in 0..self.out_h {
            let tr = tap(r, self.out_h, self.ch, self.r0);
            for c in 0..self.out_w {
                let tc = tap(c, self.out_w, self.cw, self.c0);
                let w00 = (1.0 - tr.frac) * (1.0 - tc.frac);
                let w01 = (1.0 - tr.frac) * tc.frac;
                let w10 = tr.frac * (1.0 - tc.frac);
                let w11 = tr.frac * tc.frac;
                for ch_i in 0..channels {
                    out[[r, c, ch_i]] = w00 * src[[tr.lo, tc.lo, ch_i]]
                        + w01 * src[[tr.lo, tc.hi, ch_i]]
                        + w10 * src[[tr.hi, tc.lo, ch_i]]
                        + w11 * src[[tr.hi, tc.hi, ch_i]];
                }
            }
        }
        out
    }

    /// Transpose of `apply`: scatters an output-space gradient back onto
    /// the input grid with the same bilinear weights.
    pub fn adjoint(&self, grad_out: &Array3<f64>) -> Array3<f64> {
        let (h, w, channels) = grad_out.dim();
        let mut out = Array3::<f64>::zeros((h, w, channels));
        for r in 0..self.out_h {
            let tr = tap(r, self.out_h, self.ch, self.r0);
            for c in 0..self.out_w {
                let tc = tap(c, self.out_w, self.cw, self.c0);
                let w00 = (1.0 - tr.frac) * (1.0 - tc.frac);
                let w01 = (1.0 - tr.frac) * tc.frac;
                let w10 = tr.frac * (1.0 - tc.frac);
                let w11 = tr.frac * tc.frac;
                for ch_i in 0..channels {
                    let g = grad_out[[r, c, ch_i]];
                    out[[tr.lo, tc.lo, ch_i]] += w00 * g;
                    out[[tr.lo, tc.hi, ch_i]] += w01 * g;
                    out[[tr.hi, tc.lo, ch_i]] += w10 * g;
                    out[[tr.hi, tc.hi, ch_i]] += w11 * g;
                }
            }
        }
        out
    }
}

/// η = max(η′, 1−η′), so the first crop always dominates.
pub fn eta_from_prime(eta_prime: f64) -> f64 {
    eta_prime.max(1.0 - eta_prime)
}

/// Convex pixel blend `eta·a + (1−eta)·b`, clamped to `[0, 1]`.
pub fn blend_images(a: &Array3<f64>, b: &Array3<f64>, eta: f64) -> Result<Array3<f64>> {
    if a.dim() != b.dim() {
        return Err(UapError::shape(
            format!("{:?}", a.dim()),
            format!("{:?}", b.dim()),
        ));
    }
    let mut out = Array3::<f64>::zeros(a.dim());
    for ((o, &x), &y) in out.iter_mut().zip(a.iter()).zip(b.iter()) {
        *o = (eta * x + (1.0 - eta) * y).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Result of the self-mix stage; the crops are kept so the soft target can
/// be recomputed or audited.
#[derive(Debug, Clone)]
pub struct SelfMix {
    pub mixed: Array3<f64>,
    pub eta: f64,
    pub crop1: Array3<f64>,
    pub crop2: Array3<f64>,
}

/// Blend two random crops of one image: η′ ~ Beta(α, α), η = max(η′, 1−η′),
/// x̂ = η·x¹ + (1−η)·x².
pub fn self_mix(
    image: &ImageSample,
    params: &ScMixParams,
    rng: &mut ChaCha8Rng,
) -> Result<SelfMix> {
    let geometry = image.geometry();
    let src = image.pixels_f64();
    let draw1 = CropDraw::sample(params.crop_range, geometry, rng)?;
    let draw2 = CropDraw::sample(params.crop_range, geometry, rng)?;
    let crop1 = draw1.apply(&src);
    let crop2 = draw2.apply(&src);
    let beta = Beta::new(params.alpha_mix, params.alpha_mix)
        .map_err(|e| UapError::Param(format!("Beta({0}, {0}): {e}", params.alpha_mix)))?;
    let eta = eta_from_prime(beta.sample(rng));
    let mixed = blend_images(&crop1, &crop2, eta)?;
    Ok(SelfMix {
        mixed,
        eta,
        crop1,
        crop2,
    })
}

/// Faint interpolation with a partner image: x̃ = β1·x̂ + β2·x_j.
///
/// Validates only what keeps pixels in range (β ≥ 0, β1 + β2 ≤ 1); the
/// stricter configuration constraints live in [`ScMixParams::new`].
pub fn cross_mix(
    self_mixed: &Array3<f64>,
    partner: &Array3<f64>,
    beta1: f64,
    beta2: f64,
) -> Result<Array3<f64>> {
    if self_mixed.dim() != partner.dim() {
        return Err(UapError::shape(
            format!("{:?}", self_mixed.dim()),
            format!("{:?}", partner.dim()),
        ));
    }
    if beta1 < 0.0 || beta2 < 0.0 || beta1 + beta2 > 1.0 {
        return Err(UapError::Param(format!(
            "cross-mix weights must be non-negative and sum to <= 1, got ({beta1}, {beta2})"
        )));
    }
    let mut out = Array3::<f64>::zeros(self_mixed.dim());
    for ((o, &x), &y) in out.iter_mut().zip(self_mixed.iter()).zip(partner.iter()) {
        *o = (beta1 * x + beta2 * y).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Soft target p = η·f_I(x¹) + (1−η)·f_I(x²) on the resized crops.
pub fn soft_target(
    bundle: &dyn EncoderBundle,
    crop1: &Array3<f64>,
    crop2: &Array3<f64>,
    eta: f64,
) -> Result<Array1<f64>> {
    let emb = bundle.encode_image(&[crop1.clone(), crop2.clone()])?;
    Ok(&emb.row(0) * eta + &(&emb.row(1) * (1.0 - eta)))
}

/// One ScMix application for a single (image, caption) pair.
pub fn scmix_single(
    image: &ImageSample,
    caption: &Caption,
    partner: &ImageSample,
    params: &ScMixParams,
    bundle: &dyn EncoderBundle,
    rng: &mut ChaCha8Rng,
) -> Result<AugmentedPair> {
    let sm = self_mix(image, params, rng)?;
    let p = soft_target(bundle, &sm.crop1, &sm.crop2, sm.eta)?;
    let mixed = cross_mix(&sm.mixed, &partner.pixels_f64(), params.beta1, params.beta2)?;
    Ok(AugmentedPair {
        mixed,
        self_mixed: sm.mixed,
        caption: caption.clone(),
        soft_target: p,
        eta: sm.eta,
    })
}

/// ScMix an image once per caption, each with fresh draws.
pub fn scmix(
    item: &CaptionedImage,
    partner: &ImageSample,
    params: &ScMixParams,
    bundle: &dyn EncoderBundle,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<AugmentedPair>> {
    item.captions
        .iter()
        .map(|caption| scmix_single(&item.image, caption, partner, params, bundle, rng))
        .collect()
}

/// The no-op augmentation: x̃ = x̂ = x, η = 1, p = f_I(x). Used when ScMix
/// is disabled but the local-utility loss still runs.
pub fn identity_augment(
    image: &ImageSample,
    caption: &Caption,
    bundle: &dyn EncoderBundle,
) -> Result<AugmentedPair> {
    let pixels = image.pixels_f64();
    let emb = bundle.encode_image(std::slice::from_ref(&pixels))?;
    Ok(AugmentedPair {
        mixed: pixels.clone(),
        self_mixed: pixels,
        caption: caption.clone(),
        soft_target: emb.row(0).to_owned(),
        eta: 1.0,
    })
}

/// Randomly crop a subregion of the UAP and resize it to the full frame.
/// The output never exceeds the perturbation's own l∞ budget.
pub fn crop_resize_uap(
    uap: &ImageUAP,
    params: &CropResizeParams,
    rng: &mut ChaCha8Rng,
) -> Result<Array3<f64>> {
    let draw = CropDraw::sample(params.scale_range, uap.geometry(), rng)?;
    let eps = f64::from(uap.epsilon());
    Ok(draw.apply(&uap.delta_f64()).mapv(|v| v.clamp(-eps, eps)))
}
