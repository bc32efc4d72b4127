//! 8-bit RGB rasters and binary PPM (P6) I/O.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    /// Interleaved RGB, row-major.
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Invalid(format!("empty image {width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Invalid(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.width, self.height, |x, y| self.pixel(self.width - 1 - x, y))
    }

    /// Planar `(3, H, W)` floats in `[-1, 1]`.
    pub fn to_planes(&self) -> Vec<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0.0f32; 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = pixel_to_unit(px[c]);
            }
        }
        out
    }

    /// `(1, 3, H, W)` tensor in `[-1, 1]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[1, 3, self.height, self.width], self.to_planes())
            .expect("planes match image extents")
    }

    pub fn read_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        decode_ppm(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let write = || -> std::io::Result<()> {
            let mut f = std::io::BufWriter::new(fs::File::create(path)?);
            write!(f, "P6\n{} {}\n255\n", self.width, self.height)?;
            f.write_all(&self.data)?;
            f.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }
}

pub fn pixel_to_unit(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

fn decode_ppm(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
    let mut pos = 0;
    let next_token = |pos: &mut usize| -> std::result::Result<String, String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err("truncated PPM header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = next_token(&mut pos)?;
    if magic != "P6" {
        return Err(format!("expected binary PPM magic P6, found {magic:?}"));
    }
    let num = |pos: &mut usize, what: &str| -> std::result::Result<usize, String> {
        let t = next_token(pos)?;
        t.parse().map_err(|_| format!("bad PPM {what}: {t:?}"))
    };
    let width = num(&mut pos, "width")?;
    let height = num(&mut pos, "height")?;
    let maxval = num(&mut pos, "max value")?;
    if maxval != 255 {
        return Err(format!("only 8-bit PPM (max value 255) is supported, got {maxval}"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height * 3;
    let raster = bytes.get(pos..pos + need).ok_or_else(|| {
        format!(
            "raster truncated: expected {need} bytes, found {}",
            bytes.len().saturating_sub(pos)
        )
    })?;
    RgbImage::new(width, height, raster.to_vec()).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let img = RgbImage::from_fn(5, 3, |x, y| [x as u8 * 40, y as u8 * 80, 7]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        img.write_ppm(&p).unwrap();
        assert_eq!(RgbImage::read_ppm(&p).unwrap(), img);
    }

    #[test]
    fn header_comments_and_errors() {
        let mut bytes = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.pixel(1, 0), [4, 5, 6]);
        assert!(decode_ppm(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_ppm(b"P3\n1 1\n255\n1 2 3").is_err());
    }

    #[test]
    fn unit_range() {
        assert_eq!(pixel_to_unit(0), -1.0);
        assert_eq!(pixel_to_unit(255), 1.0);
        let t = RgbImage::from_fn(2, 2, |x, _| [x as u8 * 255, 0, 255]).to_tensor();
        assert_eq!(t.shape(), &[1, 3, 2, 2]);
        assert_eq!(t.data()[..4], [-1.0, 1.0, -1.0, 1.0]);
    }
}
