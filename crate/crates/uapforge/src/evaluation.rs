//! Retrieval recall, attack success rate, and cross-geometry UAP transfer.
//!
//! Ranking uses cosine similarity with ties broken by lower index, so
//! reports are deterministic. ASR is computed only over queries that were
//! retrieved correctly on clean data: a no-op attack scores exactly zero,
//! and a corpus with no clean hits reports ASR as undefined rather than 0.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::adapter::EncoderBundle;
use crate::augment::CropDraw;
use crate::dataset::{Caption, Geometry, PairedDataset};
use crate::error::{Result, UapError};
use crate::objective::DivergenceConfig;
use crate::rng::stream;
use crate::text_attack::{apply_trigger, ImportanceContext, TextTrigger};
use crate::uap::ImageUAP;

/// Embeddings plus ground-truth match structure for one evaluation pass.
pub struct RetrievalIndex {
    /// N×E adversarial-or-clean image embeddings.
    pub image_embeddings: Array2<f64>,
    /// M×E caption embeddings (captions expanded in manifest order).
    pub text_embeddings: Array2<f64>,
    /// Per image, the caption indices that match it.
    pub image_to_texts: Vec<Vec<usize>>,
    /// Per caption, its matching image.
    pub text_to_image: Vec<usize>,
}

/// Recall percentages per direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionValues {
    pub i2t: f64,
    pub t2i: f64,
}

/// ASR percentages per direction; `None` when no query was correct on
/// clean data and the rate is therefore undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsrValues {
    pub i2t: Option<f64>,
    pub t2i: Option<f64>,
}

/// Full evaluation artifact, serialized as `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub adapter: String,
    pub config_digest: String,
    pub ks: Vec<usize>,
    pub clean: BTreeMap<String, DirectionValues>,
    pub adversarial: BTreeMap<String, DirectionValues>,
    pub asr: BTreeMap<String, AsrValues>,
}

/// Build the retrieval index, applying the image UAP and/or text trigger
/// when given. A UAP trained at another geometry is resized first.
pub fn build_index(
    bundle: &dyn EncoderBundle,
    dataset: &PairedDataset,
    uap: Option<&ImageUAP>,
    trigger: Option<&TextTrigger>,
    divergence: &DivergenceConfig,
    seed: u64,
) -> Result<RetrievalIndex> {
    if dataset.n() == 0 {
        return Err(UapError::EmptyDataset);
    }
    let geometry = dataset.geometry;
    let resized;
    let uap = match uap {
        Some(u) if u.geometry() != geometry => {
            resized = resize_uap(u, geometry)?;
            Some(&resized)
        }
        other => other,
    };

    let mut images: Vec<Array3<f64>> = Vec::with_capacity(dataset.n());
    for item in &dataset.items {
        let mut img = item.image.pixels_f64();
        if let Some(u) = uap {
            let delta = u.delta_f64();
            for (p, &d) in img.iter_mut().zip(delta.iter()) {
                *p = (*p + d).clamp(0.0, 1.0);
            }
        }
        images.push(img);
    }
    let image_embeddings = bundle.encode_image(&images)?;

    let mut captions: Vec<Caption> = Vec::with_capacity(dataset.n_t());
    let mut image_to_texts: Vec<Vec<usize>> = Vec::with_capacity(dataset.n());
    let mut text_to_image: Vec<usize> = Vec::with_capacity(dataset.n_t());
    let mut caption_idx = 0usize;
    for (img_idx, item) in dataset.items.iter().enumerate() {
        let mut mine = Vec::with_capacity(item.captions.len());
        for caption in &item.captions {
            let attacked = match trigger {
                None => caption.clone(),
                Some(t) => {
                    let ctx = ImportanceContext {
                        image: &item.image,
                        bundle,
                        divergence,
                    };
                    let mut rng = stream(seed, "eval-trigger", &[caption_idx as u64]);
                    apply_trigger(caption, t, Some(&ctx), &mut rng)?
                }
            };
            captions.push(attacked);
            mine.push(caption_idx);
            text_to_image.push(img_idx);
            caption_idx += 1;
        }
        image_to_texts.push(mine);
    }
    let text_embeddings = bundle.encode_text(&captions)?;

    Ok(RetrievalIndex {
        image_embeddings,
        text_embeddings,
        image_to_texts,
        text_to_image,
    })
}

fn row_norms(m: &Array2<f64>) -> Vec<f64> {
    m.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect()
}

/// Indices of the top-k entries by score, descending, lower index first on
/// ties.
fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Per-query correctness at rank k: one flag per image (I2T) and one per
/// caption (T2I).
pub fn correct_at(index: &RetrievalIndex, k: usize) -> Result<(Vec<bool>, Vec<bool>)> {
    let n = index.image_embeddings.nrows();
    let m = index.text_embeddings.nrows();
    if k < 1 || k > m || k > n {
        return Err(UapError::Param(format!(
            "k = {k} outside the corpus ({n} images, {m} captions)"
        )));
    }
    let img_norms = row_norms(&index.image_embeddings);
    let txt_norms = row_norms(&index.text_embeddings);
    let dots = index.image_embeddings.dot(&index.text_embeddings.t());
    let mut sims = Array2::<f64>::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let denom = img_norms[i] * txt_norms[j];
            sims[[i, j]] = if denom > 0.0 {
                dots[[i, j]] / denom
            } else {
                0.0
            };
        }
    }

    let mut i2t = Vec::with_capacity(n);
    for i in 0..n {
        let scores: Vec<f64> = (0..m).map(|j| sims[[i, j]]).collect();
        let top = top_k_indices(&scores, k);
        i2t.push(top.iter().any(|j| index.image_to_texts[i].contains(j)));
    }
    let mut t2i = Vec::with_capacity(m);
    for j in 0..m {
        let scores: Vec<f64> = (0..n).map(|i| sims[[i, j]]).collect();
        let top = top_k_indices(&scores, k);
        t2i.push(top.contains(&index.text_to_image[j]));
    }
    Ok((i2t, t2i))
}

fn percent(flags: &[bool]) -> f64 {
    if flags.is_empty() {
        return 0.0;
    }
    100.0 * flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64
}

/// R@K per direction over the (optionally attacked) corpus.
#[allow(clippy::too_many_arguments)]
pub fn retrieval_recall(
    bundle: &dyn EncoderBundle,
    dataset: &PairedDataset,
    ks: &[usize],
    uap: Option<&ImageUAP>,
    trigger: Option<&TextTrigger>,
    divergence: &DivergenceConfig,
    seed: u64,
) -> Result<BTreeMap<String, DirectionValues>> {
    let index = build_index(bundle, dataset, uap, trigger, divergence, seed)?;
    let mut out = BTreeMap::new();
    for &k in ks {
        let (i2t, t2i) = correct_at(&index, k)?;
        out.insert(
            k.to_string(),
            DirectionValues {
                i2t: percent(&i2t),
                t2i: percent(&t2i),
            },
        );
    }
    Ok(out)
}

fn asr_from_flags(clean: &[bool], attacked: &[bool]) -> Option<f64> {
    let correct = clean.iter().filter(|&&b| b).count();
    if correct == 0 {
        return None;
    }
    let broken = clean
        .iter()
        .zip(attacked.iter())
        .filter(|(&c, &a)| c && !a)
        .count();
    Some(100.0 * broken as f64 / correct as f64)
}

/// ASR@K per direction: among queries correct at rank K on clean data, the
/// percentage that the attack breaks.
#[allow(clippy::too_many_arguments)]
pub fn attack_success_rate(
    bundle: &dyn EncoderBundle,
    dataset: &PairedDataset,
    uap: Option<&ImageUAP>,
    trigger: Option<&TextTrigger>,
    ks: &[usize],
    divergence: &DivergenceConfig,
    seed: u64,
) -> Result<BTreeMap<String, AsrValues>> {
    let clean = build_index(bundle, dataset, None, None, divergence, seed)?;
    let attacked = build_index(bundle, dataset, uap, trigger, divergence, seed)?;
    let mut out = BTreeMap::new();
    for &k in ks {
        let (ci, ct) = correct_at(&clean, k)?;
        let (ai, at) = correct_at(&attacked, k)?;
        out.insert(
            k.to_string(),
            AsrValues {
                i2t: asr_from_flags(&ci, &ai),
                t2i: asr_from_flags(&ct, &at),
            },
        );
    }
    Ok(out)
}

/// Full evaluation: clean recall, adversarial recall, and ASR at each K.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_attack(
    bundle: &dyn EncoderBundle,
    dataset: &PairedDataset,
    uap: Option<&ImageUAP>,
    trigger: Option<&TextTrigger>,
    ks: &[usize],
    divergence: &DivergenceConfig,
    seed: u64,
    config_digest: String,
) -> Result<AttackReport> {
    let clean = retrieval_recall(bundle, dataset, ks, None, None, divergence, seed)?;
    let adversarial = retrieval_recall(bundle, dataset, ks, uap, trigger, divergence, seed)?;
    let asr = attack_success_rate(bundle, dataset, uap, trigger, ks, divergence, seed)?;
    Ok(AttackReport {
        adapter: bundle.name(),
        config_digest,
        ks: ks.to_vec(),
        clean,
        adversarial,
        asr,
    })
}

/// Bilinearly resize a UAP to another spatial geometry, carrying the
/// budget over; interpolation never increases the l∞ norm.
pub fn resize_uap(uap: &ImageUAP, target: Geometry) -> Result<ImageUAP> {
    let src = uap.geometry();
    if target.h < 1 || target.w < 1 {
        return Err(UapError::Param(format!(
            "target sides must be >= 1, got {target}"
        )));
    }
    if target.c != src.c {
        return Err(UapError::Param(format!(
            "channel counts must match: {} vs {}",
            src.c, target.c
        )));
    }
    if target == src {
        return Ok(uap.clone());
    }
    let draw = CropDraw::resize(src, target);
    let eps = f64::from(uap.epsilon());
    let out = draw.apply(&uap.delta_f64());
    let mut delta = Array3::<f32>::zeros(target.shape());
    for (d, &v) in delta.iter_mut().zip(out.iter()) {
        *d = v.clamp(-eps, eps) as f32;
    }
    ImageUAP::new(delta, uap.epsilon())
}
