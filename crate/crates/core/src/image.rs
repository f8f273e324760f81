//! 8-bit RGB images, PNG encoding and a tiny bitmap font for burned-in labels.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl RgbImage {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&fill);
        }
        Self { width, height, data }
    }

    /// From a row-major `res·res·3` float buffer in `[0,1]`.
    pub fn from_f64(width: usize, height: usize, rgb: &[f64]) -> Self {
        assert_eq!(rgb.len(), width * height * 3);
        Self { width, height, data: rgb.iter().map(|&v| to_u8(v)).collect() }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64 / 255.0).collect()
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, c: [u8; 3]) {
        if x < self.width && y < self.height {
            let i = (y * self.width + x) * 3;
            self.data[i..i + 3].copy_from_slice(&c);
        }
    }

    pub fn blit(&mut self, src: &RgbImage, x0: usize, y0: usize) {
        for y in 0..src.height {
            for x in 0..src.width {
                self.put(x0 + x, y0 + y, src.get(x, y));
            }
        }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
            w.write_image_data(&self.data).map_err(|e| Error::Image(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let dec = png::Decoder::new(BufReader::new(f));
        let mut reader = dec.read_info().map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::Image(e.to_string()))?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Image(format!("{}: expected 8-bit RGB", path.display())));
        }
        buf.truncate(info.buffer_size());
        Ok(Self { width: info.width as usize, height: info.height as usize, data: buf })
    }

    /// Burns `text` in with a 3×5 font at integer `scale`, on a dark backing box.
    pub fn label(&mut self, x0: usize, y0: usize, text: &str, scale: usize, color: [u8; 3]) {
        let w = text.chars().count() * 4 * scale + scale;
        for y in 0..(7 * scale) {
            for x in 0..w {
                self.put(x0 + x, y0 + y, [20, 20, 20]);
            }
        }
        for (k, ch) in text.chars().enumerate() {
            let glyph = glyph(ch);
            for (gy, bits) in glyph.iter().enumerate() {
                for gx in 0..3 {
                    if bits & (0b100 >> gx) != 0 {
                        for sy in 0..scale {
                            for sx in 0..scale {
                                self.put(
                                    x0 + scale + (k * 4 + gx) * scale + sx,
                                    y0 + scale + gy * scale + sy,
                                    color,
                                );
                            }
                        }
                    }
                }
            }
        }
    }
}

fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_uppercase() {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 3, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 2, 2],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        'A' => [2, 5, 7, 5, 5],
        'B' => [6, 5, 6, 5, 6],
        'C' => [3, 4, 4, 4, 3],
        'D' => [6, 5, 5, 5, 6],
        'E' => [7, 4, 6, 4, 7],
        'F' => [7, 4, 6, 4, 4],
        'G' => [3, 4, 5, 5, 3],
        'H' => [5, 5, 7, 5, 5],
        'I' => [7, 2, 2, 2, 7],
        'J' => [1, 1, 1, 5, 2],
        'K' => [5, 5, 6, 5, 5],
        'L' => [4, 4, 4, 4, 7],
        'M' => [5, 7, 7, 5, 5],
        'N' => [6, 5, 5, 5, 5],
        'O' => [2, 5, 5, 5, 2],
        'P' => [6, 5, 6, 4, 4],
        'Q' => [2, 5, 5, 6, 3],
        'R' => [6, 5, 6, 5, 5],
        'S' => [3, 4, 2, 1, 6],
        'T' => [7, 2, 2, 2, 2],
        'U' => [5, 5, 5, 5, 7],
        'V' => [5, 5, 5, 5, 2],
        'W' => [5, 5, 7, 7, 5],
        'X' => [5, 5, 2, 5, 5],
        'Y' => [5, 5, 2, 2, 2],
        'Z' => [7, 1, 2, 4, 7],
        '-' => [0, 0, 7, 0, 0],
        '.' => [0, 0, 0, 0, 2],
        '=' => [0, 7, 0, 7, 0],
        ':' => [0, 2, 0, 2, 0],
        '/' => [1, 1, 2, 4, 4],
        _ => [0, 0, 0, 0, 0],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip() {
        let mut img = RgbImage::new(5, 3, [255, 255, 255]);
        img.put(1, 2, [1, 2, 3]);
        let dir = std::env::temp_dir().join(format!("georefine-png-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("a.png");
        img.write_png(&p).unwrap();
        assert_eq!(RgbImage::read_png(&p).unwrap(), img);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn label_stays_in_bounds() {
        let mut img = RgbImage::new(10, 6, [0, 0, 0]);
        img.label(8, 4, "T2 LONG", 1, [255, 255, 0]);
        assert_eq!(img.data.len(), 10 * 6 * 3);
    }
}
