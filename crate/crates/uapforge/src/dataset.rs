//! Paired image-text corpora: manifest loading, synthetic fixtures,
//! caption expansion, and deterministic mini-batch iteration.
//!
//! The on-disk format is a JSONL manifest, one record per image:
//! `{"id": str, "image": relative-path, "captions": [str, ...]}`.
//! Images are PNG files or raw little-endian float32 tensors with a
//! `<file>.shape.json` sidecar carrying `{"h": H, "w": W, "c": C}`.
//! Pixels are rescaled to `[0, 1]` at load; any encoder-specific
//! normalization happens inside the adapter.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UapError};
use crate::rng::stream;
use crate::text_attack::tokenize;

/// A caption as an ordered token sequence.
pub type Caption = Vec<String>;

/// Spatial geometry of images in a dataset: height, width, channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Geometry {
    pub fn new(h: usize, w: usize, c: usize) -> Self {
        Geometry { h, w, c }
    }

    pub fn len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }
}

impl std::fmt::Display for Geometry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.h, self.w, self.c)
    }
}

/// One image with pixels in `[0, 1]`, stored H×W×C.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub pixels: Array3<f32>,
    pub id: String,
}

impl ImageSample {
    pub fn geometry(&self) -> Geometry {
        let d = self.pixels.dim();
        Geometry::new(d.0, d.1, d.2)
    }

    /// Pixels upcast to f64 for loss/gradient arithmetic.
    pub fn pixels_f64(&self) -> Array3<f64> {
        self.pixels.mapv(f64::from)
    }

    /// Checks the `[0, 1]` range and finiteness invariants.
    pub fn validate(&self) -> Result<()> {
        for &v in self.pixels.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(UapError::CorruptImage {
                    path: self.id.clone(),
                    msg: format!("pixel value {v} outside [0, 1]"),
                });
            }
        }
        Ok(())
    }
}

/// An image together with its k ≥ 1 captions.
#[derive(Debug, Clone)]
pub struct CaptionedImage {
    pub image: ImageSample,
    pub captions: Vec<Caption>,
}

/// A loaded corpus of image-caption pairs.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    pub items: Vec<CaptionedImage>,
    pub geometry: Geometry,
    pub vocabulary: BTreeSet<String>,
}

impl PairedDataset {
    /// Number of images.
    pub fn n(&self) -> usize {
        self.items.len()
    }

    /// Total caption count over all images.
    pub fn n_t(&self) -> usize {
        self.items.iter().map(|it| it.captions.len()).sum()
    }
}

/// One (image, caption) pair after caption expansion.
#[derive(Debug, Clone)]
pub struct ExpandedPair {
    pub image: ImageSample,
    pub caption: Caption,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    id: String,
    image: String,
    captions: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ShapeSidecar {
    h: usize,
    w: usize,
    c: usize,
}

fn decode_png(path: &Path, channels: Option<usize>) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|e| UapError::CorruptImage {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let c = channels.unwrap_or(3);
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::<f32>::zeros((h, w, c));
    match c {
        1 => {
            let g = img.to_luma8();
            for (y, x, p) in g
                .enumerate_pixels()
                .map(|(x, y, p)| (y as usize, x as usize, p))
            {
                out[[y, x, 0]] = f32::from(p.0[0]) / 255.0;
            }
        }
        3 => {
            let rgb = img.to_rgb8();
            for (x, y, p) in rgb.enumerate_pixels() {
                for ch in 0..3 {
                    out[[y as usize, x as usize, ch]] = f32::from(p.0[ch]) / 255.0;
                }
            }
        }
        other => {
            return Err(UapError::Param(format!(
                "unsupported channel count {other} for PNG decode"
            )))
        }
    }
    Ok(out)
}

fn decode_raw_f32(path: &Path) -> Result<Array3<f32>> {
    let sidecar = PathBuf::from(format!("{}.shape.json", path.display()));
    let raw = fs::read_to_string(&sidecar).map_err(|e| UapError::CorruptImage {
        path: path.display().to_string(),
        msg: format!("missing shape sidecar {}: {e}", sidecar.display()),
    })?;
    let shape: ShapeSidecar = serde_json::from_str(&raw).map_err(|e| UapError::CorruptImage {
        path: sidecar.display().to_string(),
        msg: e.to_string(),
    })?;
    let mut file = fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let expected = shape.h * shape.w * shape.c * 4;
    if bytes.len() != expected {
        return Err(UapError::CorruptImage {
            path: path.display().to_string(),
            msg: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    let mut vals = Vec::with_capacity(shape.h * shape.w * shape.c);
    for chunk in bytes.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() || !(0.0..=1.0).contains(&v) {
            return Err(UapError::CorruptImage {
                path: path.display().to_string(),
                msg: format!("pixel value {v} outside decodable range [0, 1]"),
            });
        }
        vals.push(v);
    }
    Array3::from_shape_vec((shape.h, shape.w, shape.c), vals).map_err(|e| UapError::CorruptImage {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

/// Loads a JSONL manifest into a dataset. Items keep manifest order; the
/// first image fixes the dataset geometry.
pub fn load_manifest(path: &Path) -> Result<PairedDataset> {
    let file = fs::File::open(path).map_err(|e| UapError::Manifest {
        line: 0,
        msg: format!("cannot open manifest {}: {e}", path.display()),
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let reader = BufReader::new(file);

    let mut items: Vec<CaptionedImage> = Vec::new();
    let mut geometry: Option<Geometry> = None;
    let mut vocabulary = BTreeSet::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| UapError::Manifest {
            line: line_no,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| UapError::Manifest {
                line: line_no,
                msg: format!("invalid record: {e}"),
            })?;
        if record.captions.is_empty() {
            return Err(UapError::Manifest {
                line: line_no,
                msg: format!("image '{}' has no captions", record.id),
            });
        }
        let img_path = base.join(&record.image);
        if !img_path.exists() {
            return Err(UapError::Manifest {
                line: line_no,
                msg: format!("image file not found: {}", img_path.display()),
            });
        }
        let is_png = img_path
            .extension()
            .map(|e| e.eq_ignore_ascii_case("png"))
            .unwrap_or(false);
        let pixels = if is_png {
            decode_png(&img_path, geometry.map(|g| g.c))
        } else {
            decode_raw_f32(&img_path)
        }
        .map_err(|e| UapError::Manifest {
            line: line_no,
            msg: e.to_string(),
        })?;

        let d = pixels.dim();
        let this_geom = Geometry::new(d.0, d.1, d.2);
        match geometry {
            None => geometry = Some(this_geom),
            Some(g) if g != this_geom => {
                return Err(UapError::Manifest {
                    line: line_no,
                    msg: format!("geometry {this_geom} does not match dataset geometry {g}"),
                })
            }
            _ => {}
        }

        let mut captions = Vec::with_capacity(record.captions.len());
        for (ci, raw) in record.captions.iter().enumerate() {
            let tokens = tokenize(raw);
            if tokens.is_empty() {
                return Err(UapError::Manifest {
                    line: line_no,
                    msg: format!("caption {} is empty after tokenization", ci + 1),
                });
            }
            for t in &tokens {
                vocabulary.insert(t.clone());
            }
            captions.push(tokens);
        }

        items.push(CaptionedImage {
            image: ImageSample {
                pixels,
                id: record.id,
            },
            captions,
        });
    }

    let geometry = geometry.ok_or(UapError::EmptyDataset)?;
    Ok(PairedDataset {
        items,
        geometry,
        vocabulary,
    })
}

/// Writes a dataset as a manifest plus raw float32 image files under `dir`.
/// Returns the manifest path.
pub fn write_manifest(ds: &PairedDataset, dir: &Path) -> Result<PathBuf> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir)?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut out = fs::File::create(&manifest_path)?;
    for item in &ds.items {
        let rel = format!("images/{}.f32", item.image.id);
        let img_path = dir.join(&rel);
        let mut bytes = Vec::with_capacity(item.image.pixels.len() * 4);
        for &v in item.image.pixels.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&img_path, &bytes)?;
        let g = item.image.geometry();
        let sidecar = ShapeSidecar {
            h: g.h,
            w: g.w,
            c: g.c,
        };
        fs::write(
            format!("{}.shape.json", img_path.display()),
            serde_json::to_string(&sidecar).expect("sidecar serializes"),
        )?;
        let record = ManifestRecord {
            id: item.image.id.clone(),
            image: rel,
            captions: item.captions.iter().map(|c| c.join(" ")).collect(),
        };
        writeln!(
            out,
            "{}",
            serde_json::to_string(&record).expect("record serializes")
        )?;
    }
    Ok(manifest_path)
}

/// One entry per (image, caption) pair, in manifest order then caption
/// order; the image repeats k times.
pub fn expand_by_captions(ds: &PairedDataset) -> Vec<ExpandedPair> {
    let mut out = Vec::with_capacity(ds.n_t());
    for item in &ds.items {
        for caption in &item.captions {
            out.push(ExpandedPair {
                image: item.image.clone(),
                caption: caption.clone(),
            });
        }
    }
    out
}

/// Deterministic synthetic corpus: uniform pixels, two captions per image
/// drawn from a generated vocabulary. Same seed, same dataset, bit for bit.
pub fn synth_toy_dataset(
    seed: u64,
    n: usize,
    geometry: Geometry,
    vocab_size: usize,
    caption_len: usize,
) -> Result<PairedDataset> {
    if n < 1 {
        return Err(UapError::Param("n must be >= 1".into()));
    }
    if geometry.h < 1 || geometry.w < 1 || geometry.c < 1 {
        return Err(UapError::Param(format!(
            "all geometry dims must be >= 1, got {geometry}"
        )));
    }
    if vocab_size < 1 || caption_len < 1 {
        return Err(UapError::Param(
            "vocab_size and caption_len must be >= 1".into(),
        ));
    }

    let vocab: Vec<String> = (0..vocab_size).map(|i| format!("w{i:04}")).collect();
    let mut items = Vec::with_capacity(n);
    let mut vocabulary = BTreeSet::new();
    for i in 0..n {
        let mut img_rng = stream(seed, "synth-img", &[i as u64]);
        let mut pixels = Array3::<f32>::zeros(geometry.shape());
        for v in pixels.iter_mut() {
            *v = img_rng.random_range(0.0f64..=1.0) as f32;
        }
        let mut cap_rng = stream(seed, "synth-cap", &[i as u64]);
        let mut captions = Vec::with_capacity(2);
        for _ in 0..2 {
            let cap: Caption = (0..caption_len)
                .map(|_| vocab[cap_rng.random_range(0..vocab_size)].clone())
                .collect();
            for t in &cap {
                vocabulary.insert(t.clone());
            }
            captions.push(cap);
        }
        items.push(CaptionedImage {
            image: ImageSample {
                pixels,
                id: format!("synth-{i:04}"),
            },
            captions,
        });
    }
    Ok(PairedDataset {
        items,
        geometry,
        vocabulary,
    })
}

/// Fisher-Yates over `0..n` driven by the given RNG.
pub fn shuffle_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Mini-batch index order for one epoch: a single seeded shuffle, then
/// contiguous chunks (the final batch may be short).
pub fn epoch_batches(n_t: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut rng = stream(seed, "shuffle", &[epoch]);
    let order = shuffle_indices(n_t, &mut rng);
    order
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect()
}
