//! Depth grids: `CGDEPTH1` raw little-endian f32 meters, plus a reader for 16-bit integer PNG
//! grids scaled by the manifest's declared unit.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEPTH_MAGIC: &[u8; 8] = b"CGDEPTH1";
const PNG_SIGNATURE: &[u8; 8] = b"\x89PNG\r\n\x1a\n";

/// Unit of integer depth grids. `CGDEPTH1` files are always meters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum DepthUnit {
    #[serde(rename = "m")]
    Meters,
    #[default]
    #[serde(rename = "mm")]
    Millimeters,
}

impl DepthUnit {
    pub fn scale(self) -> f64 {
        match self {
            DepthUnit::Meters => 1.0,
            DepthUnit::Millimeters => 1e-3,
        }
    }
}

/// Row-major H×W depth in meters. Zero or NaN marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthGrid {
    width: u32,
    height: u32,
    data: Vec<f32>,
}

impl DepthGrid {
    pub fn new(width: u32, height: u32, data: Vec<f32>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::invalid(
                "depth grid",
                format!("{}x{} grid with {} values", width, height, data.len()),
            ));
        }
        Ok(DepthGrid { width, height, data })
    }

    pub fn filled(width: u32, height: u32, value: f32) -> Self {
        DepthGrid {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }

    /// Converts a 16-bit integer grid; zero stays invalid.
    pub fn from_integer(width: u32, height: u32, raw: &[u16], unit: DepthUnit) -> Result<Self> {
        let scale = unit.scale();
        Self::new(
            width,
            height,
            raw.iter().map(|&v| (f64::from(v) * scale) as f32).collect(),
        )
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.data
    }

    pub fn set(&mut self, u: u32, v: u32, depth: f32) {
        let i = v as usize * self.width as usize + u as usize;
        self.data[i] = depth;
    }

    /// Valid depth in meters at pixel (u, v), if any.
    pub fn at(&self, u: u32, v: u32) -> Option<f64> {
        if u >= self.width || v >= self.height {
            return None;
        }
        let d = self.data[v as usize * self.width as usize + u as usize];
        (d.is_finite() && d > 0.0).then_some(f64::from(d))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(DEPTH_MAGIC);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != DEPTH_MAGIC {
            return Err(Error::invalid("depth grid", "missing CGDEPTH1 header"));
        }
        let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let height = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        let n = width as usize * height as usize;
        let body = &bytes[16..];
        if body.len() != n * 4 {
            return Err(Error::invalid(
                "depth grid",
                format!("expected {} payload bytes, found {}", n * 4, body.len()),
            ));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(width, height, data)
    }

    /// Reads either a `CGDEPTH1` grid or a 16-bit grayscale PNG, detected by signature.
    pub fn read(path: &Path, unit: DepthUnit) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(PNG_SIGNATURE) {
            return Self::from_png(&bytes, unit).map_err(|e| Error::parse(path, None, e.to_string()));
        }
        Self::from_bytes(&bytes).map_err(|e| Error::parse(path, None, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&self.to_bytes()))
            .map_err(|e| Error::io(path, e))
    }

    fn from_png(bytes: &[u8], unit: DepthUnit) -> Result<Self> {
        let bad = |e: png::DecodingError| Error::invalid("depth png", e.to_string());
        let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
        decoder.set_transformations(png::Transformations::IDENTITY);
        let mut reader = decoder.read_info().map_err(bad)?;
        let info = reader.info();
        if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
            return Err(Error::invalid("depth png", "expected 16-bit grayscale"));
        }
        let (width, height) = (info.width, info.height);
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::invalid("depth png", "image too large"))?;
        let mut buf = vec![0u8; size];
        reader.next_frame(&mut buf).map_err(bad)?;
        let raw: Vec<u16> = buf
            .chunks_exact(2)
            .take(width as usize * height as usize)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect();
        Self::from_integer(width, height, &raw, unit)
    }
}
