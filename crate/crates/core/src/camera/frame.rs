use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major RGBA8 image with a top-left origin, stamped with the sample
/// index it belongs to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub pixels: Vec<u8>,
    pub width: u32,
    pub height: u32,
    pub timestamp: u64,
}

impl Frame {
    /// Fully transparent frame.
    pub fn transparent(width: u32, height: u32) -> Self {
        Frame {
            pixels: vec![0; 4 * width as usize * height as usize],
            width,
            height,
            timestamp: 0,
        }
    }

    pub fn filled(width: u32, height: u32, rgba: [u8; 4]) -> Self {
        let mut pixels = Vec::with_capacity(4 * width as usize * height as usize);
        for _ in 0..(width as usize * height as usize) {
            pixels.extend_from_slice(&rgba);
        }
        Frame {
            pixels,
            width,
            height,
            timestamp: 0,
        }
    }

    pub fn black(width: u32, height: u32) -> Self {
        Self::filled(width, height, [0, 0, 0, 255])
    }

    pub fn from_pixels(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != 4 * width as usize * height as usize {
            return Err(Error::invalid(format!(
                "buffer of {} bytes does not match {}x{} RGBA",
                pixels.len(),
                width,
                height
            )));
        }
        Ok(Frame {
            pixels,
            width,
            height,
            timestamp: 0,
        })
    }

    pub fn with_timestamp(mut self, n: u64) -> Self {
        self.timestamp = n;
        self
    }

    #[inline]
    fn index(&self, x: u32, y: u32) -> usize {
        4 * (y as usize * self.width as usize + x as usize)
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 4] {
        let i = self.index(x, y);
        [
            self.pixels[i],
            self.pixels[i + 1],
            self.pixels[i + 2],
            self.pixels[i + 3],
        ]
    }

    pub fn put(&mut self, x: u32, y: u32, rgba: [u8; 4]) {
        let i = self.index(x, y);
        self.pixels[i..i + 4].copy_from_slice(&rgba);
    }

    pub fn same_size(&self, other: &Frame) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn is_fully_transparent(&self) -> bool {
        self.pixels.chunks_exact(4).all(|p| p[3] == 0)
    }

    /// Alpha-weighted centroid `(x, y)` of the frame, or `None` when empty.
    pub fn alpha_centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
        for y in 0..self.height {
            for x in 0..self.width {
                let a = self.pixels[self.index(x, y) + 3] as f64;
                if a > 0.0 {
                    sx += a * x as f64;
                    sy += a * y as f64;
                    sw += a;
                }
            }
        }
        (sw > 0.0).then(|| (sx / sw, sy / sw))
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width, self.height);
            enc.set_color(png::ColorType::Rgba);
            enc.set_depth(png::BitDepth::Eight);
            enc.set_compression(png::Compression::Fast);
            let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
            writer
                .write_image_data(&self.pixels)
                .map_err(|e| Error::Png(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn decode_png(bytes: impl Read) -> Result<Self> {
        let mut decoder = png::Decoder::new(bytes);
        decoder.set_transformations(png::Transformations::EXPAND);
        let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Png(e.to_string()))?;
        if info.color_type != png::ColorType::Rgba || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Png(format!(
                "expected 8-bit RGBA, got {:?}/{:?}",
                info.color_type, info.bit_depth
            )));
        }
        buf.truncate(info.buffer_size());
        Frame::from_pixels(info.width, info.height, buf)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    /// Places two equally sized frames next to each other.
    pub fn side_by_side(left: &Frame, right: &Frame) -> Result<Frame> {
        if !left.same_size(right) {
            return Err(Error::invalid("stereo frames differ in size"));
        }
        let w = left.width as usize;
        let mut pixels = Vec::with_capacity(left.pixels.len() * 2);
        for y in 0..left.height as usize {
            pixels.extend_from_slice(&left.pixels[4 * y * w..4 * (y + 1) * w]);
            pixels.extend_from_slice(&right.pixels[4 * y * w..4 * (y + 1) * w]);
        }
        Ok(Frame {
            pixels,
            width: left.width * 2,
            height: left.height,
            timestamp: left.timestamp,
        })
    }
}
