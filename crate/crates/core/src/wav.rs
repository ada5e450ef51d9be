//! Minimal RIFF/WAVE reader and writer.
//!
//! Supported encodings: PCM 16-bit and IEEE float-32, little-endian, mono
//! or interleaved stereo. Stereo is mixed down to mono by arithmetic mean
//! on read. Unknown chunks are skipped.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::dsp::Waveform;
use crate::error::{Error, Result};

const FORMAT_PCM: u16 = 1;
const FORMAT_IEEE_FLOAT: u16 = 3;

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::io(path, e))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

/// Read a WAV file, mixing multichannel content down to mono.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != b"RIFF" {
        return Err(Error::validation(format!("{}: not a RIFF file", path.display())));
    }
    let _riff_size = read_u32(&mut r, path)?;
    read_exact(&mut r, &mut magic, path)?;
    if &magic != b"WAVE" {
        return Err(Error::validation(format!("{}: not a WAVE file", path.display())));
    }

    let mut format: Option<(u16, u16, u32, u16)> = None; // (code, channels, rate, bits)
    let mut data: Option<Vec<u8>> = None;

    loop {
        let mut id = [0u8; 4];
        match r.read_exact(&mut id) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(Error::io(path, e)),
        }
        let size = read_u32(&mut r, path)? as usize;
        match &id {
            b"fmt " => {
                let mut body = vec![0u8; size];
                read_exact(&mut r, &mut body, path)?;
                if body.len() < 16 {
                    return Err(Error::validation(format!(
                        "{}: fmt chunk too short",
                        path.display()
                    )));
                }
                let code = u16::from_le_bytes([body[0], body[1]]);
                let channels = u16::from_le_bytes([body[2], body[3]]);
                let rate = u32::from_le_bytes([body[4], body[5], body[6], body[7]]);
                let bits = u16::from_le_bytes([body[14], body[15]]);
                format = Some((code, channels, rate, bits));
            }
            b"data" => {
                let mut body = vec![0u8; size];
                read_exact(&mut r, &mut body, path)?;
                data = Some(body);
            }
            _ => {
                // Skip unknown chunk (chunks are word-aligned).
                let skip = size + (size & 1);
                let mut sink = vec![0u8; skip];
                read_exact(&mut r, &mut sink, path)?;
            }
        }
        if format.is_some() && data.is_some() {
            break;
        }
        // Word alignment after data/fmt of odd size.
        if size & 1 == 1 && (&id == b"fmt " || &id == b"data") {
            let mut pad = [0u8; 1];
            let _ = r.read_exact(&mut pad);
        }
    }

    let (code, channels, rate, bits) = format.ok_or_else(|| {
        Error::validation(format!("{}: missing fmt chunk", path.display()))
    })?;
    let data = data.ok_or_else(|| {
        Error::validation(format!("{}: missing data chunk", path.display()))
    })?;

    if channels == 0 || channels > 2 {
        return Err(Error::validation(format!(
            "{}: {channels} channels unsupported (mono or stereo only)",
            path.display()
        )));
    }
    if rate == 0 {
        return Err(Error::validation(format!("{}: zero sample rate", path.display())));
    }

    let ch = channels as usize;
    let samples: Vec<f32> = match (code, bits) {
        (FORMAT_PCM, 16) => {
            let frames = data.len() / (2 * ch);
            (0..frames)
                .map(|f| {
                    let mut acc = 0.0f32;
                    for c in 0..ch {
                        let o = (f * ch + c) * 2;
                        let v = i16::from_le_bytes([data[o], data[o + 1]]);
                        acc += v as f32 / 32768.0;
                    }
                    acc / ch as f32
                })
                .collect()
        }
        (FORMAT_IEEE_FLOAT, 32) => {
            let frames = data.len() / (4 * ch);
            (0..frames)
                .map(|f| {
                    let mut acc = 0.0f32;
                    for c in 0..ch {
                        let o = (f * ch + c) * 4;
                        acc += f32::from_le_bytes([data[o], data[o + 1], data[o + 2], data[o + 3]]);
                    }
                    acc / ch as f32
                })
                .collect()
        }
        (code, bits) => {
            return Err(Error::validation(format!(
                "{}: unsupported encoding (format {code}, {bits} bits)",
                path.display()
            )));
        }
    };

    Ok(Waveform::new(samples, rate))
}

fn write_header(
    w: &mut impl Write,
    path: &Path,
    format: u16,
    sample_rate: u32,
    bits: u16,
    data_len: usize,
) -> Result<()> {
    let byte_rate = sample_rate * bits as u32 / 8;
    let block_align = bits / 8;
    let mut header = Vec::with_capacity(44);
    header.extend_from_slice(b"RIFF");
    header.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    header.extend_from_slice(b"WAVE");
    header.extend_from_slice(b"fmt ");
    header.extend_from_slice(&16u32.to_le_bytes());
    header.extend_from_slice(&format.to_le_bytes());
    header.extend_from_slice(&1u16.to_le_bytes()); // mono
    header.extend_from_slice(&sample_rate.to_le_bytes());
    header.extend_from_slice(&byte_rate.to_le_bytes());
    header.extend_from_slice(&block_align.to_le_bytes());
    header.extend_from_slice(&bits.to_le_bytes());
    header.extend_from_slice(b"data");
    header.extend_from_slice(&(data_len as u32).to_le_bytes());
    w.write_all(&header).map_err(|e| Error::io(path, e))
}

/// Write a mono IEEE float-32 WAV.
pub fn write_wav_f32(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_header(&mut out, path, FORMAT_IEEE_FLOAT, w.sample_rate, 32, w.len() * 4)?;
    for &s in &w.samples {
        out.write_all(&s.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Write a mono PCM 16-bit WAV. Samples are clamped to [-1, 1].
pub fn write_wav_i16(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_header(&mut out, path, FORMAT_PCM, w.sample_rate, 16, w.len() * 2)?;
    for &s in &w.samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.write_all(&q.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = Waveform::new(vec![0.25, -0.5, 0.9999, -1.0], 16_000);
        write_wav_f32(&path, &w).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 16_000);
        assert_eq!(back.samples, w.samples);
    }

    #[test]
    fn pcm16_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = Waveform::new(vec![0.25, -0.5, 0.75, 0.0], 44_100);
        write_wav_i16(&path, &w).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 44_100);
        for (a, b) in w.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() < 1.0 / 32000.0);
        }
    }

    #[test]
    fn stereo_is_mixed_down_by_mean() {
        // Hand-build a stereo float WAV: L = 0.5, R = -0.25 -> 0.125.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("st.wav");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(36u32 + 8).to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&3u16.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&16_000u32.to_le_bytes());
        bytes.extend_from_slice(&(16_000u32 * 8).to_le_bytes());
        bytes.extend_from_slice(&8u16.to_le_bytes());
        bytes.extend_from_slice(&32u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&8u32.to_le_bytes());
        bytes.extend_from_slice(&0.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-0.25f32).to_le_bytes());
        std::fs::write(&path, bytes).unwrap();

        let w = read_wav(&path).unwrap();
        assert_eq!(w.len(), 1);
        assert!((w.samples[0] - 0.125).abs() < 1e-7);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wav");
        std::fs::write(&path, b"not a wav at all").unwrap();
        assert!(read_wav(&path).is_err());
    }
}
