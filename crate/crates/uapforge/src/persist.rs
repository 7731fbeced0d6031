//! Bit-exact artifact persistence.
//!
//! The UAP travels in a minimal checksummed binary container:
//!
//! ```text
//! magic "UAPFORGE" | version u16 | dtype u8 (1 = f32) | reserved u8
//! | H u32 | W u32 | C u32 | epsilon f32
//! | payload: H·W·C little-endian f32, row-major
//! | crc32 over everything above
//! ```
//!
//! Loading verifies the checksum and re-checks the budget invariant, so a
//! tampered or out-of-budget file never becomes a live perturbation.
//! Triggers, reports, and traces are plain JSON/CSV.

use std::fs;
use std::path::Path;

use ndarray::Array3;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Result, UapError};
use crate::evaluation::AttackReport;
use crate::optimizer::TraceRow;
use crate::text_attack::{LexiconEntry, TextTrigger};
use crate::uap::ImageUAP;

const MAGIC: &[u8; 8] = b"UAPFORGE";
const VERSION: u16 = 1;
const DTYPE_F32: u8 = 1;
const HEADER_LEN: usize = 8 + 2 + 1 + 1 + 12 + 4;

fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc ^= u32::from(b);
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

/// Serialize a UAP to the container format.
pub fn uap_to_bytes(uap: &ImageUAP) -> Vec<u8> {
    let g = uap.geometry();
    let mut out = Vec::with_capacity(HEADER_LEN + g.len() * 4 + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(0);
    out.extend_from_slice(&(g.h as u32).to_le_bytes());
    out.extend_from_slice(&(g.w as u32).to_le_bytes());
    out.extend_from_slice(&(g.c as u32).to_le_bytes());
    out.extend_from_slice(&uap.epsilon().to_le_bytes());
    for &v in uap.delta().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Parse and verify a container.
pub fn uap_from_bytes(bytes: &[u8]) -> Result<ImageUAP> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(UapError::Corrupt(format!(
            "file too short ({} bytes) for a UAP container",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(UapError::Corrupt("bad magic bytes".into()));
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != VERSION {
        return Err(UapError::Corrupt(format!("unsupported version {version}")));
    }
    if bytes[10] != DTYPE_F32 {
        return Err(UapError::Corrupt(format!(
            "unsupported dtype tag {}",
            bytes[10]
        )));
    }
    let dim = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let (h, w, c) = (dim(12) as usize, dim(16) as usize, dim(20) as usize);
    let epsilon = f32::from_le_bytes([bytes[24], bytes[25], bytes[26], bytes[27]]);
    let expected = HEADER_LEN + h * w * c * 4 + 4;
    if bytes.len() != expected {
        return Err(UapError::Corrupt(format!(
            "expected {expected} bytes for {h}x{w}x{c}, found {}",
            bytes.len()
        )));
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes([
        bytes[body_end],
        bytes[body_end + 1],
        bytes[body_end + 2],
        bytes[body_end + 3],
    ]);
    let actual = crc32(&bytes[..body_end]);
    if stored != actual {
        return Err(UapError::Corrupt(format!(
            "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    let mut vals = Vec::with_capacity(h * w * c);
    for chunk in bytes[HEADER_LEN..body_end].chunks_exact(4) {
        vals.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    let delta =
        Array3::from_shape_vec((h, w, c), vals).map_err(|e| UapError::Corrupt(e.to_string()))?;
    ImageUAP::new(delta, epsilon)
}

pub fn save_uap(uap: &ImageUAP, path: &Path) -> Result<()> {
    fs::write(path, uap_to_bytes(uap))?;
    Ok(())
}

pub fn load_uap(path: &Path) -> Result<ImageUAP> {
    uap_from_bytes(&fs::read(path)?)
}

/// The trigger artifact: the chosen trigger plus the full ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerArtifact {
    pub trigger: TextTrigger,
    pub ranked: Vec<LexiconEntry>,
}

fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| UapError::Corrupt(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| UapError::Corrupt(format!("{}: {e}", path.display())))
}

pub fn save_triggers(artifact: &TriggerArtifact, path: &Path) -> Result<()> {
    save_json(artifact, path)
}

pub fn load_triggers(path: &Path) -> Result<TriggerArtifact> {
    load_json(path)
}

pub fn save_report(report: &AttackReport, path: &Path) -> Result<()> {
    save_json(report, path)
}

pub fn load_report(path: &Path) -> Result<AttackReport> {
    load_json(path)
}

/// Training trace as CSV with columns `step,l1,l2,linf`.
pub fn write_trace_csv(trace: &[TraceRow], path: &Path) -> Result<()> {
    let mut out = String::from("step,l1,l2,linf\n");
    for row in trace {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.step, row.l1, row.l2, row.linf
        ));
    }
    fs::write(path, out)?;
    Ok(())
}
