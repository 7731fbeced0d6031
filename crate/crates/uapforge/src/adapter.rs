//! Encoder contract and the deterministic toy dual encoder.
//!
//! Every attacked or surrogate model enters the pipeline as an
//! [`EncoderBundle`]: a pair of unimodal encoders over a shared embedding
//! space, plus a pixel-gradient entry point. Fusion heads are deliberately
//! outside the contract. The [`ToyDualEncoder`] is a self-contained bundle
//! with closed-form gradients, used for desk-scale verification; real
//! models plug in behind the same trait.
//!
//! Input convention: images arrive in `[0, 1]` pixel space with the
//! perturbation already added, so the l∞ budget stays meaningful in pixel
//! units. Any model-specific normalization belongs inside the bundle.

use ndarray::{Array1, Array2, Array3};
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::{Caption, CaptionedImage, Geometry, ImageSample, PairedDataset};
use crate::error::{Result, UapError};
use crate::rng::{stream, token_hash};
use crate::text_attack::MASK_TOKEN;

/// A scalar loss over a batch of embeddings, differentiable in them.
///
/// `grad` must return exactly `value`'s gradient with respect to each
/// embedding row; the bundle chains it through its own encoder Jacobian.
pub trait EmbeddingLoss {
    fn value(&self, embeddings: &Array2<f64>) -> f64;
    fn grad(&self, embeddings: &Array2<f64>) -> Array2<f64>;
}

/// The encoder contract: deterministic unimodal encoders plus image-side
/// gradients. Text is discrete; no text gradients are promised.
pub trait EncoderBundle: Send + Sync {
    /// Adapter name for reports.
    fn name(&self) -> String;

    /// Expected image geometry.
    fn input_geometry(&self) -> Geometry;

    /// Embedding dimensionality E.
    fn embed_dim(&self) -> usize;

    /// Encode a batch of images into a B×E matrix.
    fn encode_image(&self, batch: &[Array3<f64>]) -> Result<Array2<f64>>;

    /// Encode a batch of token sequences into a B×E matrix.
    fn encode_text(&self, batch: &[Caption]) -> Result<Array2<f64>>;

    /// Evaluate `loss` on the batch embeddings and return the loss value
    /// together with its gradient with respect to every input pixel.
    fn grad_image(
        &self,
        batch: &[Array3<f64>],
        loss: &dyn EmbeddingLoss,
    ) -> Result<(f64, Vec<Array3<f64>>)>;
}

/// Encode a batch of dataset images (convenience upcast).
pub fn encode_samples(bundle: &dyn EncoderBundle, samples: &[&ImageSample]) -> Result<Array2<f64>> {
    let batch: Vec<Array3<f64>> = samples.iter().map(|s| s.pixels_f64()).collect();
    bundle.encode_image(&batch)
}

fn l2_normalize(v: &Array1<f64>) -> Array1<f64> {
    let norm = v.dot(v).sqrt();
    if norm > 0.0 {
        v / norm
    } else {
        v.clone()
    }
}

/// Deterministic dual encoder with analytic gradients.
///
/// Image path: fixed random linear map on centered pixels, tanh squashing,
/// l2 normalization. Text path: bag-of-token-embeddings mean, l2
/// normalization, with the mask token contributing a zero vector.
pub struct ToyDualEncoder {
    seed: u64,
    geometry: Geometry,
    embed_dim: usize,
    /// E×D map applied to flattened, centered pixels.
    image_map: Array2<f64>,
    squash: bool,
    normalize: bool,
}

impl ToyDualEncoder {
    pub fn new(seed: u64, geometry: Geometry, embed_dim: usize) -> Self {
        Self::with_flags(seed, geometry, embed_dim, true, true)
    }

    /// Variant constructor; disabling `squash`/`normalize` yields the plain
    /// linear map, which has a hand-checkable gradient.
    pub fn with_flags(
        seed: u64,
        geometry: Geometry,
        embed_dim: usize,
        squash: bool,
        normalize: bool,
    ) -> Self {
        let d = geometry.len();
        let mut rng = stream(seed, "toy-map", &[]);
        let scale = 1.0 / (d as f64).sqrt();
        let mut image_map = Array2::<f64>::zeros((embed_dim, d));
        for v in image_map.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = z * scale;
        }
        ToyDualEncoder {
            seed,
            geometry,
            embed_dim,
            image_map,
            squash,
            normalize,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The fixed E×D linear map (rows are embedding directions).
    pub fn image_map(&self) -> &Array2<f64> {
        &self.image_map
    }

    /// Embedding vector for one token; the mask token maps to zeros.
    pub fn token_embedding(&self, token: &str) -> Array1<f64> {
        if token == MASK_TOKEN {
            return Array1::zeros(self.embed_dim);
        }
        let mut rng = stream(self.seed, "toy-tok", &[token_hash(token)]);
        Array1::from_iter((0..self.embed_dim).map(|_| StandardNormal.sample(&mut rng)))
    }

    fn check_geometry(&self, img: &Array3<f64>) -> Result<()> {
        let d = img.dim();
        let g = Geometry::new(d.0, d.1, d.2);
        if g != self.geometry {
            return Err(UapError::shape(self.geometry.to_string(), g.to_string()));
        }
        Ok(())
    }

    /// Forward pass keeping intermediates for backprop.
    fn forward_image(&self, img: &Array3<f64>) -> Result<ImageForward> {
        self.check_geometry(img)?;
        let flat = Array1::from_iter(img.iter().map(|&v| v - 0.5));
        let z = self.image_map.dot(&flat);
        let activated = if self.squash { z.mapv(f64::tanh) } else { z };
        let norm = activated.dot(&activated).sqrt();
        let embedding = if self.normalize && norm > 0.0 {
            &activated / norm
        } else {
            activated.clone()
        };
        Ok(ImageForward {
            activated,
            norm,
            embedding,
        })
    }

    /// Build a retrieval-friendly corpus for this encoder: each image
    /// carries a low-amplitude pattern aligned with its captions'
    /// embedding, so clean image-text retrieval is near perfect. Two
    /// captions per pair (the second a rotation of the first).
    pub fn aligned_dataset(
        &self,
        seed: u64,
        n: usize,
        vocab_size: usize,
        caption_len: usize,
    ) -> Result<PairedDataset> {
        if n < 1 || vocab_size < caption_len || caption_len < 1 {
            return Err(UapError::Param(
                "aligned dataset needs n >= 1 and vocab_size >= caption_len >= 1".into(),
            ));
        }
        let vocab: Vec<String> = (0..vocab_size).map(|i| format!("w{i:04}")).collect();
        let mut items = Vec::with_capacity(n);
        let mut vocabulary = std::collections::BTreeSet::new();
        for i in 0..n {
            let mut rng = stream(seed, "aligned-cap", &[i as u64]);
            // Per-image pre-activation scale: strong enough for
            // near-perfect clean retrieval (normalization cancels the
            // scale on clean data), weak and varied enough that a
            // budget-limited perturbation shifts each image's
            // signal-to-perturbation mix differently. Without that
            // variation a universal perturbation could never reorder the
            // image ranking.
            let kappa = rand::Rng::random_range(&mut rng, 0.25..=0.75);
            let mut pick: Vec<usize> = (0..vocab_size).collect();
            for j in (1..pick.len()).rev() {
                let k = rand::Rng::random_range(&mut rng, 0..=j);
                pick.swap(j, k);
            }
            let caption_a: Caption = pick[..caption_len]
                .iter()
                .map(|&t| vocab[t].clone())
                .collect();
            let mut caption_b = caption_a.clone();
            caption_b.rotate_left(1);
            for t in &caption_a {
                vocabulary.insert(t.clone());
            }

            let target = self.encode_text(std::slice::from_ref(&caption_a))?;
            let target = target.row(0).to_owned();
            let pattern = self.image_map.t().dot(&target);
            let z0 = self.image_map.dot(&pattern);
            let z0_norm = z0.dot(&z0).sqrt();
            let max_abs = pattern.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
            let mut scale = if z0_norm > 0.0 { kappa / z0_norm } else { 0.0 };
            if max_abs > 0.0 {
                scale = scale.min(0.45 / max_abs);
            }
            let mut pixels = Array3::<f32>::zeros(self.geometry.shape());
            for (p, &v) in pixels.iter_mut().zip(pattern.iter()) {
                *p = (0.5 + scale * v) as f32;
            }
            items.push(CaptionedImage {
                image: ImageSample {
                    pixels,
                    id: format!("pair-{i:04}"),
                },
                captions: vec![caption_a, caption_b],
            });
        }
        Ok(PairedDataset {
            items,
            geometry: self.geometry,
            vocabulary,
        })
    }
}

struct ImageForward {
    activated: Array1<f64>,
    norm: f64,
    embedding: Array1<f64>,
}

impl EncoderBundle for ToyDualEncoder {
    fn name(&self) -> String {
        format!("toy:{}", self.seed)
    }

    fn input_geometry(&self) -> Geometry {
        self.geometry
    }

    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn encode_image(&self, batch: &[Array3<f64>]) -> Result<Array2<f64>> {
        let mut out = Array2::<f64>::zeros((batch.len(), self.embed_dim));
        for (i, img) in batch.iter().enumerate() {
            let fwd = self.forward_image(img)?;
            out.row_mut(i).assign(&fwd.embedding);
        }
        Ok(out)
    }

    fn encode_text(&self, batch: &[Caption]) -> Result<Array2<f64>> {
        let mut out = Array2::<f64>::zeros((batch.len(), self.embed_dim));
        for (i, caption) in batch.iter().enumerate() {
            if caption.is_empty() {
                return Err(UapError::Contract("cannot encode an empty caption".into()));
            }
            let mut sum = Array1::<f64>::zeros(self.embed_dim);
            for token in caption {
                sum += &self.token_embedding(token);
            }
            let mean = sum / caption.len() as f64;
            let emb = if self.normalize {
                l2_normalize(&mean)
            } else {
                mean
            };
            out.row_mut(i).assign(&emb);
        }
        Ok(out)
    }

    fn grad_image(
        &self,
        batch: &[Array3<f64>],
        loss: &dyn EmbeddingLoss,
    ) -> Result<(f64, Vec<Array3<f64>>)> {
        let mut forwards = Vec::with_capacity(batch.len());
        let mut embeddings = Array2::<f64>::zeros((batch.len(), self.embed_dim));
        for (i, img) in batch.iter().enumerate() {
            let fwd = self.forward_image(img)?;
            embeddings.row_mut(i).assign(&fwd.embedding);
            forwards.push(fwd);
        }
        let value = loss.value(&embeddings);
        let grad = loss.grad(&embeddings);
        if grad.dim() != embeddings.dim() {
            return Err(UapError::shape(
                format!("{:?}", embeddings.dim()),
                format!("{:?}", grad.dim()),
            ));
        }

        let mut pixel_grads = Vec::with_capacity(batch.len());
        for (i, fwd) in forwards.iter().enumerate() {
            let g_e = grad.row(i).to_owned();
            let g_a = if self.normalize && fwd.norm > 0.0 {
                let along = fwd.embedding.dot(&g_e);
                (&g_e - &(&fwd.embedding * along)) / fwd.norm
            } else {
                g_e
            };
            let g_z = if self.squash {
                // activated = tanh(z), so dtanh/dz = 1 - activated^2
                &g_a * &fwd.activated.mapv(|a| 1.0 - a * a)
            } else {
                g_a
            };
            let g_flat = self.image_map.t().dot(&g_z);
            let g_img = Array3::from_shape_vec(self.geometry.shape(), g_flat.to_vec())
                .expect("gradient matches input geometry");
            pixel_grads.push(g_img);
        }
        Ok((value, pixel_grads))
    }
}
