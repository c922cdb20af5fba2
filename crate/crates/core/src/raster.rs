//! 8-bit RGB rasters: tensor conversion, grid composition, PPM and PNG.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const DEFAULT_CELL_PX: usize = 128;
pub const DEFAULT_BORDER_PX: usize = 2;
pub const FRAME_PX: usize = 3;
const FRAME_RGB: [u8; 3] = [255, 0, 0];
const PLACEHOLDER_RGB: [u8; 3] = [96, 96, 96];
const PLACEHOLDER_MARK_RGB: [u8; 3] = [255, 0, 255];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major interleaved RGB.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        RgbImage { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// `[−1, 1]` tensor of shape `[3×H×W]` to 8-bit, `round((v+1)/2·255)`
    /// clamped. Non-finite values map to 0.
    pub fn from_tensor(img: &Tensor) -> Result<Self> {
        if img.ndim() != 3 || img.dim(0) != 3 {
            return Err(Error::Shape(format!("expected [3×H×W] image, got {:?}", img.shape())));
        }
        let (h, w) = (img.dim(1), img.dim(2));
        let plane = h * w;
        let mut data = vec![0u8; plane * 3];
        for p in 0..plane {
            for c in 0..3 {
                data[p * 3 + c] = to_u8(img.data()[c * plane + p]);
            }
        }
        Ok(RgbImage { width: w, height: h, data })
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::InvalidArgument("malformed PPM".into());
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad());
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
        }
        pos += 1;
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
        if fields[0] != "P6" || num(&fields[3])? != 255 {
            return Err(bad());
        }
        let (width, height) = (num(&fields[1])?, num(&fields[2])?);
        let data = bytes.get(pos..).filter(|d| d.len() == width * height * 3).ok_or_else(bad)?.to_vec();
        Ok(RgbImage { width, height, data })
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let mut encoder = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let png_err = |e: png::EncodingError| Error::InvalidArgument(format!("png: {e}"));
        let mut writer = encoder.write_header().map_err(png_err)?;
        writer.write_image_data(&self.data).map_err(png_err)?;
        writer.finish().map_err(png_err)?;
        Ok(out)
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_png()?).map_err(|e| Error::io(path, e))
    }
}

fn to_u8(v: f32) -> u8 {
    if !v.is_finite() {
        return 0;
    }
    ((v + 1.0) * 0.5 * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Grey cell crossed by two magenta diagonals.
pub fn placeholder(size: usize) -> RgbImage {
    let mut img = RgbImage::filled(size, size, PLACEHOLDER_RGB);
    for i in 0..size {
        img.set(i, i, PLACEHOLDER_MARK_RGB);
        img.set(size - 1 - i, i, PLACEHOLDER_MARK_RGB);
    }
    img
}

/// Lays out `cells` (row-major, `None` for failures) with nearest-neighbor
/// upscaling to `cell_px`, black gutters of `border_px`, and a red frame
/// inside the `marked` cell.
pub fn compose(
    rows: usize,
    cols: usize,
    cells: &[Option<RgbImage>],
    marked: Option<(usize, usize)>,
    cell_px: usize,
    border_px: usize,
) -> Result<RgbImage> {
    if rows == 0 || cols == 0 || cells.len() != rows * cols {
        return Err(Error::Shape(format!("{} cells for a {rows}×{cols} grid", cells.len())));
    }
    if cell_px == 0 {
        return Err(Error::InvalidArgument("cell size must be positive".into()));
    }
    let width = cols * cell_px + (cols + 1) * border_px;
    let height = rows * cell_px + (rows + 1) * border_px;
    let mut out = RgbImage::filled(width, height, [0, 0, 0]);
    let fallback = placeholder(cell_px);
    for r in 0..rows {
        for c in 0..cols {
            let src = cells[r * cols + c].as_ref().unwrap_or(&fallback);
            let (ox, oy) = (border_px + c * (cell_px + border_px), border_px + r * (cell_px + border_px));
            for y in 0..cell_px {
                let sy = y * src.height / cell_px;
                for x in 0..cell_px {
                    let sx = x * src.width / cell_px;
                    out.set(ox + x, oy + y, src.pixel(sx, sy));
                }
            }
            if marked == Some((r, c)) {
                let f = FRAME_PX.min(cell_px);
                for y in 0..cell_px {
                    for x in 0..cell_px {
                        if x < f || y < f || x >= cell_px - f || y >= cell_px - f {
                            out.set(ox + x, oy + y, FRAME_RGB);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor {
        Tensor::from_fn(&[3, 4, 5], |i| (i as f32 / 30.0) - 1.0)
    }

    #[test]
    fn tensor_conversion() {
        let t = Tensor::new(&[3, 1, 2], vec![-1.0, 1.0, 0.0, 2.0, f32::NAN, -3.0]).unwrap();
        let img = RgbImage::from_tensor(&t).unwrap();
        assert_eq!(img.data, vec![0, 128, 0, 255, 255, 0]);
        assert!(RgbImage::from_tensor(&Tensor::zeros(&[1, 2, 2])).is_err());
    }

    #[test]
    fn ppm_roundtrip() {
        let img = RgbImage::from_tensor(&sample()).unwrap();
        let bytes = img.to_ppm();
        assert!(bytes.starts_with(b"P6\n5 4\n255\n"));
        assert_eq!(bytes.len(), 11 + 60);
        assert_eq!(RgbImage::from_ppm(&bytes).unwrap(), img);
        assert!(RgbImage::from_ppm(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn png_encodes() {
        let png = RgbImage::from_tensor(&sample()).unwrap().to_png().unwrap();
        assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
    }

    #[test]
    fn single_cell_is_raw_image() {
        let t = Tensor::from_fn(&[3, 32, 32], |i| ((i * 7) % 11) as f32 / 5.0 - 1.0);
        let img = RgbImage::from_tensor(&t).unwrap();
        let grid = compose(1, 1, &[Some(img.clone())], None, 32, 0).unwrap();
        assert_eq!(grid, img);
    }

    #[test]
    fn grid_geometry_and_frame() {
        let cell = RgbImage::filled(32, 32, [10, 20, 30]);
        let cells = vec![Some(cell); 9 * 12];
        let g = compose(9, 12, &cells, Some((4, 4)), 128, 2).unwrap();
        assert_eq!((g.width, g.height), (12 * 128 + 13 * 2, 9 * 128 + 10 * 2));
        assert_eq!(g.pixel(0, 0), [0, 0, 0]);
        assert_eq!(g.pixel(2, 2), [10, 20, 30]);
        let (ox, oy) = (2 + 4 * 130, 2 + 4 * 130);
        assert_eq!(g.pixel(ox, oy), FRAME_RGB);
        assert_eq!(g.pixel(ox + 2, oy + 64), FRAME_RGB);
        assert_eq!(g.pixel(ox + 3, oy + 64), [10, 20, 30]);
        assert_eq!(g.pixel(ox + 127, oy + 127), FRAME_RGB);
        let again = compose(9, 12, &cells, Some((4, 4)), 128, 2).unwrap();
        assert_eq!(again.to_ppm(), g.to_ppm());
    }

    #[test]
    fn failed_cells_use_placeholder() {
        let g = compose(1, 2, &[None, Some(RgbImage::filled(4, 4, [1, 2, 3]))], None, 8, 1).unwrap();
        assert_eq!(g.pixel(1, 1), PLACEHOLDER_MARK_RGB);
        assert_eq!(g.pixel(2, 1), PLACEHOLDER_RGB);
        assert_eq!(g.pixel(10, 1), [1, 2, 3]);
    }
}
