//! The `MEL0` binary container: 4-byte magic, little-endian `u32` frame and
//! bin counts, then `n_frames * n_bins` little-endian `f32`s, frame-major.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::MelSpectrogram;
use crate::error::{Error, Result};

pub const MEL_MAGIC: &[u8; 4] = b"MEL0";
const HEADER_LEN: usize = 12;

pub fn encode_mel(m: &MelSpectrogram) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.frames().len());
    out.extend_from_slice(MEL_MAGIC);
    out.extend_from_slice(&(m.n_frames() as u32).to_le_bytes());
    out.extend_from_slice(&(m.n_bins() as u32).to_le_bytes());
    for v in m.frames().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_mel(bytes: &[u8]) -> Result<MelSpectrogram> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::CorruptFile(format!(
            "mel header needs {HEADER_LEN} bytes, file has {}",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MEL_MAGIC {
        return Err(Error::CorruptFile("bad magic, expected MEL0".into()));
    }
    let n_frames = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let n_bins = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = n_frames
        .checked_mul(n_bins)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::CorruptFile("header dimensions overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::CorruptFile(format!(
            "{n_frames}x{n_bins} mel needs {expected} payload bytes, found {}",
            payload.len()
        )));
    }
    if n_bins == 0 {
        return Err(Error::CorruptFile("mel header has zero bins".into()));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let frames = Array2::from_shape_vec((n_frames, n_bins), values)
        .map_err(|e| Error::CorruptFile(e.to_string()))?;
    MelSpectrogram::new(frames).map_err(|e| Error::CorruptFile(e.to_string()))
}

pub fn mel_write(m: &MelSpectrogram, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_mel(m))?;
    Ok(())
}

pub fn mel_read(path: impl AsRef<Path>) -> Result<MelSpectrogram> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_mel(&bytes).map_err(|e| match e {
        Error::CorruptFile(msg) => Error::CorruptFile(format!("{}: {msg}", path.display())),
        other => other,
    })
}
