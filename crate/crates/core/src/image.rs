//! Interleaved float images and their PNG / raw float forms.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Interleaved `[row][col][channel]` float image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, value: &[f64]) -> Self {
        let mut img = Self::new(width, height, value.len());
        for px in img.data.chunks_mut(value.len()) {
            px.copy_from_slice(value);
        }
        img
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Rounds every value to the nearest of 256 levels in [0, 1], matching
    /// what an 8-bit PNG stores.
    pub fn quantized_u8(&self) -> Image {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = to_u8(*v) as f64 / 255.0;
        }
        out
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn to_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn color_type(channels: usize) -> Result<png::ColorType> {
    match channels {
        1 => Ok(png::ColorType::Grayscale),
        3 => Ok(png::ColorType::Rgb),
        4 => Ok(png::ColorType::Rgba),
        c => Err(Error::invalid(format!(
            "cannot store {c}-channel image as PNG"
        ))),
    }
}

fn write_png_raw(path: &Path, img: &Image, depth: png::BitDepth, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(color_type(img.channels)?);
    enc.set_depth(depth);
    let mut w = enc
        .write_header()
        .map_err(|e| Error::format(path, e.to_string()))?;
    w.write_image_data(bytes)
        .map_err(|e| Error::format(path, e.to_string()))?;
    w.finish().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(())
}

/// 8-bit PNG; values are clamped to [0, 1] and rounded.
pub fn write_png8(path: &Path, img: &Image) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|v| to_u8(*v)).collect();
    write_png_raw(path, img, png::BitDepth::Eight, &bytes)
}

/// 16-bit PNG; values are clamped to [0, 1] and rounded.
pub fn write_png16(path: &Path, img: &Image) -> Result<()> {
    let bytes: Vec<u8> = img
        .data
        .iter()
        .flat_map(|v| to_u16(*v).to_be_bytes())
        .collect();
    write_png_raw(path, img, png::BitDepth::Sixteen, &bytes)
}

/// Writes integer labels as an 8-bit greyscale PNG.
pub fn write_label_png(path: &Path, width: usize, height: usize, labels: &[u8]) -> Result<()> {
    let img = Image {
        width,
        height,
        channels: 1,
        data: Vec::new(),
    };
    write_png_raw(path, &img, png::BitDepth::Eight, labels)
}

/// Raw PNG samples as integers plus their bit depth.
pub struct PngSamples {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub max_value: u32,
    pub samples: Vec<u32>,
}

pub fn read_png_samples(path: &Path) -> Result<PngSamples> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec
        .read_info()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    buf.truncate(info.buffer_size());
    let channels = info.color_type.samples();
    let (max_value, samples) = match info.bit_depth {
        png::BitDepth::Sixteen => (
            65535,
            buf.chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
                .collect(),
        ),
        png::BitDepth::Eight => (255, buf.iter().map(|v| *v as u32).collect()),
        d => return Err(Error::format(path, format!("unsupported bit depth {d:?}"))),
    };
    Ok(PngSamples {
        width: info.width as usize,
        height: info.height as usize,
        channels,
        max_value,
        samples,
    })
}

/// Reads a PNG as floats in [0, 1], keeping its channel count.
pub fn read_png(path: &Path) -> Result<Image> {
    let s = read_png_samples(path)?;
    let scale = s.max_value as f64;
    Ok(Image {
        width: s.width,
        height: s.height,
        channels: s.channels,
        data: s.samples.iter().map(|v| *v as f64 / scale).collect(),
    })
}

/// Reads an RGB(A) or greyscale PNG and returns RGB floats.
pub fn read_png_rgb(path: &Path) -> Result<Image> {
    let img = read_png(path)?;
    let mut out = Image::new(img.width, img.height, 3);
    for (src, dst) in img.data.chunks(img.channels).zip(out.data.chunks_mut(3)) {
        match img.channels {
            1 | 2 => dst.fill(src[0]),
            _ => dst.copy_from_slice(&src[..3]),
        }
    }
    Ok(out)
}

/// Reads a single-channel 8-bit label or mask PNG.
pub fn read_label_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let s = read_png_samples(path)?;
    if s.max_value != 255 {
        return Err(Error::format(path, "label images must be 8-bit"));
    }
    let labels = s
        .samples
        .iter()
        .step_by(s.channels)
        .map(|v| *v as u8)
        .collect();
    Ok((s.width, s.height, labels))
}

#[derive(Debug, Serialize, Deserialize)]
struct FloatHeader {
    width: usize,
    height: usize,
    channels: usize,
    dtype: String,
    byte_order: String,
}

/// Exact float dump: one line of JSON header, then little-endian f64 data.
pub fn write_float_dump(path: &Path, img: &Image) -> Result<()> {
    let header = FloatHeader {
        width: img.width,
        height: img.height,
        channels: img.channels,
        dtype: "f64".into(),
        byte_order: "little".into(),
    };
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let mut line = serde_json::to_vec(&header).expect("header serializes");
    line.push(b'\n');
    f.write_all(&line).map_err(|e| Error::io(path, e))?;
    for v in &img.data {
        f.write_all(&v.to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_float_dump(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| Error::format(path, "missing header line"))?;
    let header: FloatHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::format(path, e.to_string()))?;
    let body = &bytes[nl + 1..];
    let n = header.width * header.height * header.channels;
    if header.dtype != "f64" || body.len() != n * 8 {
        return Err(Error::format(
            path,
            "float dump size does not match its header",
        ));
    }
    Ok(Image {
        width: header.width,
        height: header.height,
        channels: header.channels,
        data: body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    })
}
