//! Future-aware momentum PGD over the universal image perturbation.
//!
//! Each step takes the mean combined-loss gradient on a mini-batch,
//! regularizes it with the previous gradient and a look-ahead estimate,
//! then applies a sign step projected onto the l∞ ball. The look-ahead
//! rolls the perturbation forward virtually on the same mini-batch using
//! the global loss only, collects the gradients along that roll-out, and
//! discards the virtual steps.
//!
//! Gradient accumulation happens in f64; the perturbation itself lives in
//! f32 so that the stored artifact equals the in-memory one bit for bit.

use ndarray::Array3;

use crate::adapter::EncoderBundle;
use crate::augment::{
    identity_augment, scmix_single, AugmentedPair, CropResizeParams, ScMixParams,
};
use crate::dataset::{epoch_batches, expand_by_captions, ExpandedPair, Geometry, PairedDataset};
use crate::error::{Result, UapError};
use crate::objective::{
    batch_refs, grad_global_with_refs, grad_total, BatchRefs, CropPlan, DivergenceConfig,
    LossBreakdown,
};
use crate::rng::stream;
use crate::uap::ImageUAP;

/// When the previous-gradient register is refreshed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GpCadence {
    /// After the final batch of each epoch.
    PerEpoch,
    /// After every batch.
    PerBatch,
}

/// How the look-ahead gradients are reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FutureMode {
    /// Mean over the d collected gradients.
    Mean,
    /// The gradient at the final virtual point only.
    Final,
}

/// Momentum registers and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    pub g_prev: Array3<f64>,
    pub gamma1: f64,
    pub gamma2: f64,
    pub lookahead: usize,
    /// −1 discounts the future gradient (the default); +1 adds it.
    pub future_sign: f64,
}

impl MomentumState {
    pub fn new(
        geometry: Geometry,
        gamma1: f64,
        gamma2: f64,
        lookahead: usize,
        future_sign: f64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma1) || !(0.0..1.0).contains(&gamma2) {
            return Err(UapError::Param(format!(
                "gamma weights must be in [0, 1), got ({gamma1}, {gamma2})"
            )));
        }
        if future_sign != 1.0 && future_sign != -1.0 {
            return Err(UapError::Param(format!(
                "future_sign must be +1 or -1, got {future_sign}"
            )));
        }
        Ok(MomentumState {
            g_prev: Array3::zeros(geometry.shape()),
            gamma1,
            gamma2,
            lookahead,
            future_sign,
        })
    }
}

/// Full configuration for one image-attack run.
#[derive(Debug, Clone)]
pub struct AttackConfig {
    pub epsilon_i: f32,
    pub step_size: f64,
    /// Epoch count M_I.
    pub iterations: usize,
    /// Mini-batch size l.
    pub batch_size: usize,
    pub seed: u64,
    pub gamma1: f64,
    pub gamma2: f64,
    /// Look-ahead depth d; 0 disables the future gradient.
    pub lookahead: usize,
    pub future_sign: f64,
    pub future_mode: FutureMode,
    pub gp_cadence: GpCadence,
    /// ScMix on original images; when off, the local loss (if enabled)
    /// sees identity-augmented pairs.
    pub augment_enabled: bool,
    /// Whether the local-utility loss L2 participates at all.
    pub use_local: bool,
    pub scmix: ScMixParams,
    pub crop: CropResizeParams,
    pub crop_per_sample: bool,
    pub divergence: DivergenceConfig,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon_i.is_nan() || self.epsilon_i <= 0.0 {
            return Err(UapError::Param("epsilon_I must be > 0".into()));
        }
        if self.step_size.is_nan() || self.step_size <= 0.0 {
            return Err(UapError::Param("step_size must be > 0".into()));
        }
        if self.iterations < 1 {
            return Err(UapError::Param("iterations must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(UapError::Param("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.gamma1) || !(0.0..1.0).contains(&self.gamma2) {
            return Err(UapError::Param("gamma1/gamma2 must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One row of the training trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub l1: f64,
    pub l2: f64,
    pub linf: f32,
}

/// Sign with the zero kept at zero, so dead coordinates take no step.
pub fn sign0(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v.signum()
    }
}

/// Mean gradient of a batch-sum objective: evaluates `objective` at
/// `delta` and divides the gradient by the batch size.
pub fn grad_batch<V, F>(
    objective: F,
    delta: &Array3<f64>,
    batch_len: usize,
) -> Result<(V, Array3<f64>)>
where
    F: FnOnce(&Array3<f64>) -> Result<(V, Array3<f64>)>,
{
    if batch_len == 0 {
        return Err(UapError::Contract("gradient over an empty batch".into()));
    }
    let (value, sum) = objective(delta)?;
    Ok((value, sum / batch_len as f64))
}

/// Mean gradient over the next `d` virtual sign-PGD steps on the same
/// mini-batch, driven by the global loss only. The real perturbation and
/// momentum state are never touched; the roll-out is discarded.
#[allow(clippy::too_many_arguments)]
pub fn lookahead_future_grad(
    uap: &ImageUAP,
    batch: &[ExpandedPair],
    refs: &BatchRefs,
    d: usize,
    step_size: f64,
    bundle: &dyn EncoderBundle,
    cfg: &DivergenceConfig,
    mode: FutureMode,
) -> Result<Array3<f64>> {
    let shape = uap.delta().dim();
    if d == 0 {
        return Ok(Array3::zeros(shape));
    }
    let eps = f64::from(uap.epsilon());
    let len = batch.len() as f64;
    let mut virt = uap.delta_f64();
    let (_, g0) = grad_global_with_refs(batch, refs, &virt, bundle, cfg)?;
    let mut advance = g0 / len;
    let mut acc = Array3::<f64>::zeros(shape);
    let mut last = Array3::<f64>::zeros(shape);
    for _ in 1..=d {
        for (v, &g) in virt.iter_mut().zip(advance.iter()) {
            *v = (*v + step_size * sign0(g)).clamp(-eps, eps);
        }
        let (_, gi) = grad_global_with_refs(batch, refs, &virt, bundle, cfg)?;
        let gi = gi / len;
        acc += &gi;
        last = gi.clone();
        advance = gi;
    }
    Ok(match mode {
        FutureMode::Mean => acc / d as f64,
        FutureMode::Final => last,
    })
}

/// g̃ = g + γ1·g_prev + future_sign·γ2·g_f. Pure; the state is not mutated.
pub fn combine(g: &Array3<f64>, state: &MomentumState, g_f: &Array3<f64>) -> Result<Array3<f64>> {
    if g.dim() != state.g_prev.dim() || g.dim() != g_f.dim() {
        return Err(UapError::shape(
            format!("{:?}", g.dim()),
            format!("{:?} / {:?}", state.g_prev.dim(), g_f.dim()),
        ));
    }
    let mut out = g.clone();
    for ((o, &p), &f) in out.iter_mut().zip(state.g_prev.iter()).zip(g_f.iter()) {
        *o += state.gamma1 * p + state.future_sign * state.gamma2 * f;
    }
    Ok(out)
}

/// One projected sign step: δ′ = Clip_ε(δ + α·sign(g̃)).
pub fn pgd_update(uap: &ImageUAP, grad: &Array3<f64>, step_size: f64) -> Result<ImageUAP> {
    if grad.dim() != uap.delta().dim() {
        return Err(UapError::shape(
            format!("{:?}", uap.delta().dim()),
            format!("{:?}", grad.dim()),
        ));
    }
    let eps = f64::from(uap.epsilon());
    let mut next = Array3::<f32>::zeros(uap.delta().dim());
    for ((n, &d), &g) in next.iter_mut().zip(uap.delta().iter()).zip(grad.iter()) {
        let stepped = (f64::from(d) + step_size * sign0(g)).clamp(-eps, eps);
        *n = stepped as f32;
    }
    ImageUAP::new(next, uap.epsilon())
}

fn partner_index(len: usize, me: usize, rng: &mut rand_chacha::ChaCha8Rng) -> usize {
    if len <= 1 {
        return me;
    }
    let j = rand::Rng::random_range(rng, 0..len - 1);
    if j >= me {
        j + 1
    } else {
        j
    }
}

fn gather_refs(all: &BatchRefs, idxs: &[usize]) -> BatchRefs {
    let e = all.img.ncols();
    let mut img = ndarray::Array2::<f64>::zeros((idxs.len(), e));
    let mut txt = ndarray::Array2::<f64>::zeros((idxs.len(), e));
    for (row, &i) in idxs.iter().enumerate() {
        img.row_mut(row).assign(&all.img.row(i));
        txt.row_mut(row).assign(&all.txt.row(i));
    }
    BatchRefs { img, txt }
}

/// Run the full image-attack loop and return the learned perturbation
/// plus a per-step trace of (L1, L2, ‖δ‖∞).
pub fn run_image_attack(
    dataset: &PairedDataset,
    bundle: &dyn EncoderBundle,
    cfg: &AttackConfig,
) -> Result<(ImageUAP, Vec<TraceRow>)> {
    cfg.validate()?;
    if dataset.n() == 0 {
        return Err(UapError::EmptyDataset);
    }
    let geometry = dataset.geometry;
    if geometry != bundle.input_geometry() {
        return Err(UapError::shape(
            bundle.input_geometry().to_string(),
            geometry.to_string(),
        ));
    }

    let expanded = expand_by_captions(dataset);
    let n_t = expanded.len();
    let all_refs = batch_refs(&expanded, bundle)?;

    let mut uap = ImageUAP::random_init(
        geometry,
        cfg.epsilon_i,
        &mut stream(cfg.seed, "uap-init", &[]),
    )?;
    let mut state = MomentumState::new(
        geometry,
        cfg.gamma1,
        cfg.gamma2,
        cfg.lookahead,
        cfg.future_sign,
    )?;
    let mut trace = Vec::with_capacity(cfg.iterations * n_t.div_ceil(cfg.batch_size));
    let mut step_no = 0usize;

    for epoch in 1..=cfg.iterations as u64 {
        let batches = epoch_batches(n_t, cfg.batch_size, cfg.seed, epoch);
        let mut last_combined: Option<Array3<f64>> = None;
        for (bi, idxs) in batches.iter().enumerate() {
            step_no += 1;
            let batch: Vec<ExpandedPair> = idxs.iter().map(|&i| expanded[i].clone()).collect();
            let refs = gather_refs(&all_refs, idxs);
            let delta64 = uap.delta_f64();

            let (breakdown, g) = if cfg.use_local {
                let augmented = build_augmented(&batch, bundle, cfg, epoch, bi as u64)?;
                let plan = CropPlan::draw(
                    &cfg.crop,
                    geometry,
                    cfg.crop_per_sample,
                    batch.len(),
                    &mut stream(cfg.seed, "uap-crop", &[epoch, bi as u64]),
                )?;
                grad_batch(
                    |d| grad_total(&batch, &augmented, &refs, d, &plan, bundle, &cfg.divergence),
                    &delta64,
                    batch.len(),
                )?
            } else {
                grad_batch(
                    |d| {
                        grad_global_with_refs(&batch, &refs, d, bundle, &cfg.divergence)
                            .map(|(l1, g)| (LossBreakdown { l1, l2: 0.0 }, g))
                    },
                    &delta64,
                    batch.len(),
                )?
            };
            if !breakdown.total().is_finite() {
                return Err(UapError::NonFinite {
                    step: step_no,
                    msg: format!("l1={}, l2={}", breakdown.l1, breakdown.l2),
                });
            }

            let g_f = lookahead_future_grad(
                &uap,
                &batch,
                &refs,
                state.lookahead,
                cfg.step_size,
                bundle,
                &cfg.divergence,
                cfg.future_mode,
            )?;
            let combined = combine(&g, &state, &g_f)?;
            uap = pgd_update(&uap, &combined, cfg.step_size)?;
            if cfg.gp_cadence == GpCadence::PerBatch {
                state.g_prev = combined.clone();
            }
            trace.push(TraceRow {
                step: step_no,
                l1: breakdown.l1,
                l2: breakdown.l2,
                linf: uap.linf(),
            });
            last_combined = Some(combined);
        }
        if cfg.gp_cadence == GpCadence::PerEpoch {
            if let Some(c) = last_combined {
                state.g_prev = c;
            }
        }
    }
    Ok((uap, trace))
}

fn build_augmented(
    batch: &[ExpandedPair],
    bundle: &dyn EncoderBundle,
    cfg: &AttackConfig,
    epoch: u64,
    batch_idx: u64,
) -> Result<Vec<AugmentedPair>> {
    if !cfg.augment_enabled {
        return batch
            .iter()
            .map(|p| identity_augment(&p.image, &p.caption, bundle))
            .collect();
    }
    let mut rng = stream(cfg.seed, "augment", &[epoch, batch_idx]);
    let mut out = Vec::with_capacity(batch.len());
    for (i, pair) in batch.iter().enumerate() {
        let partner = &batch[partner_index(batch.len(), i, &mut rng)].image;
        out.push(scmix_single(
            &pair.image,
            &pair.caption,
            partner,
            &cfg.scmix,
            bundle,
            &mut rng,
        )?);
    }
    Ok(out)
}
