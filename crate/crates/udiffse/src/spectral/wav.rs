//! Minimal RIFF/WAVE reader and writer.
//!
//! Accepted input: mono, 16 kHz, either 16-bit PCM or 32-bit IEEE float.
//! Anything else is rejected rather than resampled or downmixed. Output is
//! always 32-bit float mono, which keeps write -> read lossless for f32
//! sample values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::spectral::Waveform;

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_tag(r: &mut impl Read) -> Result<[u8; 4]> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(b)
}

struct Format {
    code: u16,
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let mut r = BufReader::new(File::open(path.as_ref())?);

    if &read_tag(&mut r)? != b"RIFF" {
        return Err(Error::WavFormat("missing RIFF header".into()));
    }
    let _riff_size = read_u32(&mut r)?;
    if &read_tag(&mut r)? != b"WAVE" {
        return Err(Error::WavFormat("missing WAVE tag".into()));
    }

    let mut fmt: Option<Format> = None;
    loop {
        let tag = match read_tag(&mut r) {
            Ok(t) => t,
            Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                return Err(Error::WavFormat("no data chunk".into()));
            }
            Err(e) => return Err(e),
        };
        let size = read_u32(&mut r)? as usize;
        match &tag {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::WavFormat("fmt chunk too short".into()));
                }
                let code = read_u16(&mut r)?;
                let channels = read_u16(&mut r)?;
                let sample_rate = read_u32(&mut r)?;
                let _byte_rate = read_u32(&mut r)?;
                let _block_align = read_u16(&mut r)?;
                let bits = read_u16(&mut r)?;
                skip(&mut r, size - 16 + (size & 1))?;
                fmt = Some(Format { code, channels, sample_rate, bits });
            }
            b"data" => {
                let fmt = fmt.ok_or_else(|| {
                    Error::WavFormat("data chunk before fmt chunk".into())
                })?;
                return decode_data(&mut r, &fmt, size);
            }
            _ => skip(&mut r, size + (size & 1))?,
        }
    }
}

fn skip(r: &mut impl Read, n: usize) -> Result<()> {
    std::io::copy(&mut r.take(n as u64), &mut std::io::sink())?;
    Ok(())
}

fn decode_data(r: &mut impl Read, fmt: &Format, size: usize) -> Result<Waveform> {
    if fmt.channels != 1 {
        return Err(Error::WavFormat(format!(
            "expected mono audio, found {} channels",
            fmt.channels
        )));
    }
    if fmt.sample_rate != 16_000 {
        return Err(Error::WavFormat(format!(
            "expected 16000 Hz, found {} Hz",
            fmt.sample_rate
        )));
    }
    let mut raw = vec![0u8; size];
    r.read_exact(&mut raw).map_err(|_| Error::Truncated {
        expected: size as u64,
        actual: 0,
    })?;
    let samples: Vec<f64> = match (fmt.code, fmt.bits) {
        (1, 16) => raw
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
            .collect(),
        (3, 32) => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        (code, bits) => {
            return Err(Error::WavFormat(format!(
                "unsupported encoding: format code {code}, {bits} bits"
            )))
        }
    };
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFiniteFile);
    }
    Waveform::new(samples, fmt.sample_rate)
}

/// Write a mono 32-bit float WAVE file.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    let data_len = (w.len() * 4) as u32;
    let byte_rate = w.sample_rate * 4;

    out.write_all(b"RIFF")?;
    out.write_all(&(36 + data_len).to_le_bytes())?;
    out.write_all(b"WAVE")?;
    out.write_all(b"fmt ")?;
    out.write_all(&16u32.to_le_bytes())?;
    out.write_all(&3u16.to_le_bytes())?; // IEEE float
    out.write_all(&1u16.to_le_bytes())?; // mono
    out.write_all(&w.sample_rate.to_le_bytes())?;
    out.write_all(&byte_rate.to_le_bytes())?;
    out.write_all(&4u16.to_le_bytes())?; // block align
    out.write_all(&32u16.to_le_bytes())?;
    out.write_all(b"data")?;
    out.write_all(&data_len.to_le_bytes())?;
    for s in &w.samples {
        out.write_all(&(*s as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}
