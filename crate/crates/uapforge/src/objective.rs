//! The divergence ℓ, the global loss L1, the local-utility loss L2, and
//! the combined objective.
//!
//! ℓ is a KL divergence between temperature-softmaxed embeddings, taken
//! adversarial-first so gradients flow through the perturbed argument.
//! L1 pushes perturbed images away from their own image and caption
//! embeddings. L2 does the same through a cropped-and-resized view of the
//! perturbation, over both clean and ScMixed images, with the soft target
//! as a fifth reference. Adversarial composites are clipped to `[0, 1]`
//! before encoding; the clip mask gates the returned gradient.
//!
//! All losses are sums over the batch (maximized by the optimizer);
//! gradients returned here are batch sums, not means.

use ndarray::{Array1, Array2, Array3, ArrayView1};
use rand_chacha::ChaCha8Rng;

use crate::adapter::{EmbeddingLoss, EncoderBundle};
use crate::augment::{AugmentedPair, CropDraw, CropResizeParams};
use crate::dataset::{ExpandedPair, Geometry};
use crate::error::{Result, UapError};

/// Softmax temperature for the divergence.
#[derive(Debug, Clone, Copy)]
pub struct DivergenceConfig {
    pub temperature: f64,
}

impl DivergenceConfig {
    pub fn new(temperature: f64) -> Result<Self> {
        if temperature.is_nan() || temperature <= 0.0 {
            return Err(UapError::Param(format!(
                "temperature must be > 0, got {temperature}"
            )));
        }
        Ok(DivergenceConfig { temperature })
    }
}

impl Default for DivergenceConfig {
    fn default() -> Self {
        DivergenceConfig { temperature: 1.0 }
    }
}

/// Loss values for one mini-batch; the combined objective is their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.l1 + self.l2
    }
}

fn log_softmax(v: ArrayView1<f64>, temperature: f64) -> Array1<f64> {
    let scaled = v.mapv(|x| x / temperature);
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted = scaled.mapv(|x| x - max);
    let lse = shifted.mapv(f64::exp).sum().ln();
    shifted.mapv(|x| x - lse)
}

fn check_divergence_inputs(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<()> {
    if a.len() != b.len() {
        return Err(UapError::shape(
            format!("{}", a.len()),
            format!("{}", b.len()),
        ));
    }
    if a.len() < 2 {
        return Err(UapError::Param(format!(
            "divergence needs dimension >= 2, got {}",
            a.len()
        )));
    }
    Ok(())
}

/// KL(softmax(a/τ) ‖ softmax(b/τ)); zero iff the two softmaxes coincide.
pub fn divergence(a: ArrayView1<f64>, b: ArrayView1<f64>, cfg: &DivergenceConfig) -> Result<f64> {
    check_divergence_inputs(a, b)?;
    let la = log_softmax(a, cfg.temperature);
    let lb = log_softmax(b, cfg.temperature);
    let mut kl = 0.0;
    for (&lai, &lbi) in la.iter().zip(lb.iter()) {
        kl += lai.exp() * (lai - lbi);
    }
    Ok(floor_at_zero(kl))
}

// Clears the sub-ulp negatives a true-zero KL can round to, while letting
// NaN through so non-finite inputs stay detectable downstream.
fn floor_at_zero(kl: f64) -> f64 {
    if kl < 0.0 {
        0.0
    } else {
        kl
    }
}

/// Divergence value plus its gradient with respect to `a` (the
/// adversarial-first argument; `b` is treated as a constant).
pub fn divergence_with_grad(
    a: ArrayView1<f64>,
    b: ArrayView1<f64>,
    cfg: &DivergenceConfig,
) -> Result<(f64, Array1<f64>)> {
    check_divergence_inputs(a, b)?;
    let la = log_softmax(a, cfg.temperature);
    let lb = log_softmax(b, cfg.temperature);
    let mut kl = 0.0;
    for (&lai, &lbi) in la.iter().zip(lb.iter()) {
        kl += lai.exp() * (lai - lbi);
    }
    // d/da_k = (1/τ) · p_k · (log p_k − log q_k − KL)
    let grad = Array1::from_iter(
        la.iter()
            .zip(lb.iter())
            .map(|(&lai, &lbi)| lai.exp() * (lai - lbi - kl) / cfg.temperature),
    );
    Ok((floor_at_zero(kl), grad))
}

/// Sum of divergences from each embedding row to its per-row reference
/// set. Serves as the bundle-facing loss for both L1 (two references) and
/// L2 (two or three references per row).
pub struct KlToRefs {
    refs: Vec<Vec<Array1<f64>>>,
    cfg: DivergenceConfig,
}

impl KlToRefs {
    pub fn new(refs: Vec<Vec<Array1<f64>>>, cfg: DivergenceConfig) -> Self {
        KlToRefs { refs, cfg }
    }
}

impl EmbeddingLoss for KlToRefs {
    fn value(&self, embeddings: &Array2<f64>) -> f64 {
        let mut total = 0.0;
        for (i, row) in embeddings.rows().into_iter().enumerate() {
            for r in &self.refs[i] {
                total += divergence(row, r.view(), &self.cfg).expect("validated dims");
            }
        }
        total
    }

    fn grad(&self, embeddings: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros(embeddings.dim());
        for (i, row) in embeddings.rows().into_iter().enumerate() {
            let mut g = Array1::<f64>::zeros(embeddings.ncols());
            for r in &self.refs[i] {
                let (_, gr) =
                    divergence_with_grad(row, r.view(), &self.cfg).expect("validated dims");
                g += &gr;
            }
            out.row_mut(i).assign(&g);
        }
        out
    }
}

/// Clean-image and caption embeddings for a batch, row-parallel to it.
pub struct BatchRefs {
    pub img: Array2<f64>,
    pub txt: Array2<f64>,
}

/// Encode the reference embeddings for a batch of pairs.
pub fn batch_refs(batch: &[ExpandedPair], bundle: &dyn EncoderBundle) -> Result<BatchRefs> {
    let imgs: Vec<Array3<f64>> = batch.iter().map(|p| p.image.pixels_f64()).collect();
    let caps: Vec<_> = batch.iter().map(|p| p.caption.clone()).collect();
    Ok(BatchRefs {
        img: bundle.encode_image(&imgs)?,
        txt: bundle.encode_text(&caps)?,
    })
}

/// `clip(x + δ, 0, 1)` plus the pass-through mask for its gradient.
fn adv_composite(x: &Array3<f64>, delta: &Array3<f64>) -> (Array3<f64>, Array3<f64>) {
    let mut adv = Array3::<f64>::zeros(x.dim());
    let mut mask = Array3::<f64>::zeros(x.dim());
    for (((a, m), &xv), &dv) in adv
        .iter_mut()
        .zip(mask.iter_mut())
        .zip(x.iter())
        .zip(delta.iter())
    {
        let raw = xv + dv;
        *a = raw.clamp(0.0, 1.0);
        *m = if (0.0..=1.0).contains(&raw) { 1.0 } else { 0.0 };
    }
    (adv, mask)
}

fn check_delta_geometry(delta: &Array3<f64>, geometry: Geometry) -> Result<()> {
    let d = delta.dim();
    let g = Geometry::new(d.0, d.1, d.2);
    if g != geometry {
        return Err(UapError::shape(geometry.to_string(), g.to_string()));
    }
    Ok(())
}

/// How the UAP crop is drawn for a mini-batch: one shared draw (default)
/// or an independent draw per sample.
#[derive(Debug, Clone)]
pub enum CropPlan {
    Shared(CropDraw),
    PerSample(Vec<CropDraw>),
}

impl CropPlan {
    pub fn draw(
        params: &CropResizeParams,
        geometry: Geometry,
        per_sample: bool,
        batch_len: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if per_sample {
            let draws = (0..batch_len)
                .map(|_| CropDraw::sample(params.scale_range, geometry, rng))
                .collect::<Result<Vec<_>>>()?;
            Ok(CropPlan::PerSample(draws))
        } else {
            Ok(CropPlan::Shared(CropDraw::sample(
                params.scale_range,
                geometry,
                rng,
            )?))
        }
    }

    pub fn identity(geometry: Geometry) -> Self {
        CropPlan::Shared(CropDraw::identity(geometry))
    }

    fn for_sample(&self, i: usize) -> &CropDraw {
        match self {
            CropPlan::Shared(d) => d,
            CropPlan::PerSample(v) => &v[i],
        }
    }
}

fn global_refs(refs: &BatchRefs, batch_len: usize) -> Vec<Vec<Array1<f64>>> {
    (0..batch_len)
        .map(|i| vec![refs.img.row(i).to_owned(), refs.txt.row(i).to_owned()])
        .collect()
}

/// L1 over a batch: Σ_i ℓ(f_I(clip(x_i+δ)), f_I(x_i)) + ℓ(f_I(clip(x_i+δ)), f_T(y_i)).
pub fn loss_global(
    batch: &[ExpandedPair],
    delta: &Array3<f64>,
    bundle: &dyn EncoderBundle,
    cfg: &DivergenceConfig,
) -> Result<f64> {
    let refs = batch_refs(batch, bundle)?;
    loss_global_with_refs(batch, &refs, delta, bundle, cfg)
}

pub fn loss_global_with_refs(
    batch: &[ExpandedPair],
    refs: &BatchRefs,
    delta: &Array3<f64>,
    bundle: &dyn EncoderBundle,
    cfg: &DivergenceConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(UapError::Contract("loss over an empty batch".into()));
    }
    check_delta_geometry(delta, batch[0].image.geometry())?;
    let advs: Vec<Array3<f64>> = batch
        .iter()
        .map(|p| adv_composite(&p.image.pixels_f64(), delta).0)
        .collect();
    let embs = bundle.encode_image(&advs)?;
    let kl = KlToRefs::new(global_refs(refs, batch.len()), *cfg);
    Ok(kl.value(&embs))
}

/// L1 value and its gradient with respect to δ (batch sum).
pub fn grad_global(
    batch: &[ExpandedPair],
    delta: &Array3<f64>,
    bundle: &dyn EncoderBundle,
    cfg: &DivergenceConfig,
) -> Result<(f64, Array3<f64>)> {
    let refs = batch_refs(batch, bundle)?;
    grad_global_with_refs(batch, &refs, delta, bundle, cfg)
}

pub fn grad_global_with_refs(
    batch: &[ExpandedPair],
    refs: &BatchRefs,
    delta: &Array3<f64>,
    bundle: &dyn EncoderBundle,
    cfg: &DivergenceConfig,
) -> Result<(f64, Array3<f64>)> {
    if batch.is_empty() {
        return Err(UapError::Contract("loss over an empty batch".into()));
    }
    check_delta_geometry(delta, batch[0].image.geometry())?;
    let mut advs = Vec::with_capacity(batch.len());
    let mut masks = Vec::with_capacity(batch.len());
    for p in batch {
        let (adv, mask) = adv_composite(&p.image.pixels_f64(), delta);
        advs.push(adv);
        masks.push(mask);
    }
    let kl = KlToRefs::new(global_refs(refs, batch.len()), *cfg);
    let (value, pixel_grads) = bundle.grad_image(&advs, &kl)?;
    let mut grad = Array3::<f64>::zeros(delta.dim());
    for (g, mask) in pixel_grads.iter().zip(masks.iter()) {
        for ((acc, &gv), &mv) in grad.iter_mut().zip(g.iter()).zip(mask.iter()) {
            *acc += gv * mv;
        }
    }
    Ok((value, grad))
}

/// L2 over a batch, with the crop drawn inside from `rng` (one shared draw).
pub fn loss_local(
    batch: &[ExpandedPair],
    augmented: &[AugmentedPair],
    delta: &Array3<f64>,
    crop_params: &CropResizeParams,
    bundle: &dyn EncoderBundle,
    cfg: &DivergenceConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let geometry = batch
        .first()
        .ok_or_else(|| UapError::Contract("loss over an empty batch".into()))?
        .image
        .geometry();
    let plan = CropPlan::draw(crop_params, geometry, false, batch.len(), rng)?;
    let refs = batch_refs(batch, bundle)?;
    loss_local_with_plan(batch, augmented, &refs, delta, &plan, bundle, cfg)
}

fn local_groups(
    batch: &[ExpandedPair],
    augmented: &[AugmentedPair],
    refs: &BatchRefs,
    delta: &Array3<f64>,
    plan: &CropPlan,
) -> Result<LocalGroups> {
    if batch.len() != augmented.len() {
        return Err(UapError::Contract(format!(
            "batch has {} pairs but {} augmented pairs",
            batch.len(),
            augmented.len()
        )));
    }
    if batch.is_empty() {
        return Err(UapError::Contract("loss over an empty batch".into()));
    }
    check_delta_geometry(delta, batch[0].image.geometry())?;
    let embed_dim = refs.img.ncols();
    for (i, aug) in augmented.iter().enumerate() {
        if aug.soft_target.len() != embed_dim {
            return Err(UapError::Contract(format!(
                "augmented pair {i} is missing a valid soft target ({} vs embed dim {embed_dim})",
                aug.soft_target.len()
            )));
        }
    }

    let shared_view = match plan {
        CropPlan::Shared(d) => Some(d.apply(delta)),
        CropPlan::PerSample(_) => None,
    };
    let mut adv_clean = Vec::with_capacity(batch.len());
    let mut mask_clean = Vec::with_capacity(batch.len());
    let mut adv_mixed = Vec::with_capacity(batch.len());
    let mut mask_mixed = Vec::with_capacity(batch.len());
    for (i, (pair, aug)) in batch.iter().zip(augmented.iter()).enumerate() {
        let view = match &shared_view {
            Some(v) => v.clone(),
            None => plan.for_sample(i).apply(delta),
        };
        let (a, m) = adv_composite(&pair.image.pixels_f64(), &view);
        adv_clean.push(a);
        mask_clean.push(m);
        let (a, m) = adv_composite(&aug.mixed, &view);
        adv_mixed.push(a);
        mask_mixed.push(m);
    }

    let clean_refs = global_refs(refs, batch.len());
    let mixed_refs: Vec<Vec<Array1<f64>>> = (0..batch.len())
        .map(|i| {
            vec![
                refs.img.row(i).to_owned(),
                refs.txt.row(i).to_owned(),
                augmented[i].soft_target.clone(),
            ]
        })
        .collect();
    Ok(LocalGroups {
        adv_clean,
        mask_clean,
        adv_mixed,
        mask_mixed,
        clean_refs,
        mixed_refs,
    })
}

struct LocalGroups {
    adv_clean: Vec<Array3<f64>>,
    mask_clean: Vec<Array3<f64>>,
    adv_mixed: Vec<Array3<f64>>,
    mask_mixed: Vec<Array3<f64>>,
    clean_refs: Vec<Vec<Array1<f64>>>,
    mixed_refs: Vec<Vec<Array1<f64>>>,
}

/// L2 with an explicit crop plan (deterministic; used by the optimizer and
/// by gradient checks).
pub fn loss_local_with_plan(
    batch: &[ExpandedPair],
    augmented: &[AugmentedPair],
    refs: &BatchRefs,
    delta: &Array3<f64>,
    plan: &CropPlan,
    bundle: &dyn EncoderBundle,
    cfg: &DivergenceConfig,
) -> Result<f64> {
    let groups = local_groups(batch, augmented, refs, delta, plan)?;
    let kl_clean = KlToRefs::new(groups.clean_refs, *cfg);
    let kl_mixed = KlToRefs::new(groups.mixed_refs, *cfg);
    let v_clean = kl_clean.value(&bundle.encode_image(&groups.adv_clean)?);
    let v_mixed = kl_mixed.value(&bundle.encode_image(&groups.adv_mixed)?);
    Ok(v_clean + v_mixed)
}

/// L2 value and its gradient with respect to δ (batch sum), chained
/// through the crop transform's adjoint.
pub fn grad_local_with_plan(
    batch: &[ExpandedPair],
    augmented: &[AugmentedPair],
    refs: &BatchRefs,
    delta: &Array3<f64>,
    plan: &CropPlan,
    bundle: &dyn EncoderBundle,
    cfg: &DivergenceConfig,
) -> Result<(f64, Array3<f64>)> {
    let groups = local_groups(batch, augmented, refs, delta, plan)?;
    let kl_clean = KlToRefs::new(groups.clean_refs, *cfg);
    let kl_mixed = KlToRefs::new(groups.mixed_refs, *cfg);
    let (v_clean, g_clean) = bundle.grad_image(&groups.adv_clean, &kl_clean)?;
    let (v_mixed, g_mixed) = bundle.grad_image(&groups.adv_mixed, &kl_mixed)?;

    let mut grad = Array3::<f64>::zeros(delta.dim());
    for i in 0..batch.len() {
        let mut view_grad = Array3::<f64>::zeros(delta.dim());
        for (((vg, &gc), &mc), (&gm, &mm)) in view_grad
            .iter_mut()
            .zip(g_clean[i].iter())
            .zip(groups.mask_clean[i].iter())
            .zip(g_mixed[i].iter().zip(groups.mask_mixed[i].iter()))
        {
            *vg = gc * mc + gm * mm;
        }
        let back = plan.for_sample(i).adjoint(&view_grad);
        grad += &back;
    }
    Ok((v_clean + v_mixed, grad))
}

/// Combined objective on one mini-batch: L = L1 + L2.
pub fn loss_total(
    batch: &[ExpandedPair],
    augmented: &[AugmentedPair],
    refs: &BatchRefs,
    delta: &Array3<f64>,
    plan: &CropPlan,
    bundle: &dyn EncoderBundle,
    cfg: &DivergenceConfig,
) -> Result<LossBreakdown> {
    let l1 = loss_global_with_refs(batch, refs, delta, bundle, cfg)?;
    let l2 = loss_local_with_plan(batch, augmented, refs, delta, plan, bundle, cfg)?;
    Ok(LossBreakdown { l1, l2 })
}

/// Combined objective value and δ-gradient (batch sums).
pub fn grad_total(
    batch: &[ExpandedPair],
    augmented: &[AugmentedPair],
    refs: &BatchRefs,
    delta: &Array3<f64>,
    plan: &CropPlan,
    bundle: &dyn EncoderBundle,
    cfg: &DivergenceConfig,
) -> Result<(LossBreakdown, Array3<f64>)> {
    let (l1, mut grad) = grad_global_with_refs(batch, refs, delta, bundle, cfg)?;
    let (l2, g2) = grad_local_with_plan(batch, augmented, refs, delta, plan, bundle, cfg)?;
    grad += &g2;
    Ok((LossBreakdown { l1, l2 }, grad))
}
