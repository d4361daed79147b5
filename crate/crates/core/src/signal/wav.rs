//! 16-bit PCM mono WAV reading and writing.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Waveform;
use crate::error::{Error, Result};

const PCM_FORMAT: u16 = 1;

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_wav(&bytes).map_err(|e| match e {
        Error::CorruptFile(msg) => Error::CorruptFile(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    let corrupt = |m: &str| Error::CorruptFile(m.to_string());
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(corrupt("missing RIFF/WAVE header"));
    }
    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("chunk extends past end of file"))?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(corrupt("fmt chunk too short"));
                }
                let tag = u16::from_le_bytes([body[0], body[1]]);
                let channels = u16::from_le_bytes([body[2], body[3]]);
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes([body[14], body[15]]);
                format = Some((tag, channels, rate, bits));
            }
            b"data" => {
                let (tag, channels, rate, bits) =
                    format.ok_or_else(|| corrupt("data chunk before fmt chunk"))?;
                if tag != PCM_FORMAT || bits != 16 {
                    return Err(Error::InvalidArgument(format!(
                        "only 16-bit PCM is supported (format tag {tag}, {bits} bits)"
                    )));
                }
                if channels != 1 {
                    return Err(Error::InvalidArgument(format!(
                        "only mono audio is supported, got {channels} channels"
                    )));
                }
                if !body.len().is_multiple_of(2) {
                    return Err(corrupt("odd-sized 16-bit data chunk"));
                }
                let samples = body
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                    .collect();
                return Waveform::new(samples, rate);
            }
            _ => {}
        }
        // chunks are word aligned
        pos = body_end + (size & 1);
    }
    Err(corrupt("no data chunk"))
}

/// Quantizes to 16 bits; samples outside [-1, 1] are clipped.
pub fn encode_wav(w: &Waveform) -> Vec<u8> {
    let data_len = (w.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM_FORMAT.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&w.sample_rate().to_le_bytes());
    out.extend_from_slice(&(w.sample_rate() * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in w.samples() {
        out.extend_from_slice(&quantize(s).to_le_bytes());
    }
    out
}

fn quantize(s: f64) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_wav(w))?;
    Ok(())
}

/// The waveform as it will read back after a 16-bit round trip.
pub fn quantized(w: &Waveform) -> Waveform {
    let samples = w
        .samples()
        .iter()
        .map(|&s| quantize(s) as f64 / 32768.0)
        .collect();
    Waveform::new(samples, w.sample_rate()).expect("quantized samples are finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact_after_quantization() {
        let w = Waveform::new(vec![0.0, 0.5, -0.5, 0.25, -1.0, 0.999], 16000).unwrap();
        let q = quantized(&w);
        let back = decode_wav(&encode_wav(&w)).unwrap();
        assert_eq!(back, q);
        assert_eq!(decode_wav(&encode_wav(&q)).unwrap(), q);
    }

    #[test]
    fn clips_out_of_range_samples() {
        let w = Waveform::new(vec![2.0, -3.0], 8000).unwrap();
        let back = decode_wav(&encode_wav(&w)).unwrap();
        assert_eq!(back.samples(), &[32767.0 / 32768.0, -1.0]);
        assert_eq!(back.sample_rate(), 8000);
    }

    #[test]
    fn skips_unknown_chunks() {
        let w = Waveform::new(vec![0.25; 3], 16000).unwrap();
        let plain = encode_wav(&w);
        let mut bytes = plain[..12].to_vec();
        bytes.extend_from_slice(b"LIST");
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&[1, 2, 3, 0]);
        bytes.extend_from_slice(&plain[12..]);
        assert_eq!(decode_wav(&bytes).unwrap(), quantized(&w));
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(decode_wav(b"nope"), Err(Error::CorruptFile(_))));
        let w = Waveform::new(vec![0.1; 10], 16000).unwrap();
        let bytes = encode_wav(&w);
        assert!(matches!(
            decode_wav(&bytes[..bytes.len() - 4]),
            Err(Error::CorruptFile(_))
        ));
    }
}
