//! 8-bit grayscale rendering of descriptor layers (binary PGM or PNG).

use std::io::Write;
use std::path::Path;

use crate::descriptor::{MlhDescriptor, INF_SENTINEL};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, top row first.
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn pixel(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut encoder = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            encoder.set_color(png::ColorType::Grayscale);
            encoder.set_depth(png::BitDepth::Eight);
            let mut writer = encoder.write_header()?;
            writer.write_image_data(&self.pixels)?;
        }
        Ok(out)
    }

    /// Writes PNG for a `.png` extension and binary PGM otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        let bytes = if is_png { self.to_png()? } else { self.to_pgm() };
        let mut file = std::fs::File::create(path).map_err(|e| Error::from(e).with_path(path))?;
        file.write_all(&bytes)
            .map_err(|e| Error::from(e).with_path(path))?;
        Ok(())
    }
}

/// Maps heights `[0, 1]` linearly onto `[0, 254]` and empty bins to 255.
/// `layer` is 1-based. Image row 0 shows grid row `q = N - 1`, column `x`
/// is `p`.
pub fn export_layer_image(desc: &MlhDescriptor, layer: usize) -> Result<GrayImage> {
    let (n, k) = (desc.n(), desc.k());
    if layer == 0 || layer > k {
        return Err(Error::LayerOutOfRange { layer, k });
    }
    let mut pixels = Vec::with_capacity(n * n);
    for row in 0..n {
        let q = n - 1 - row;
        for p in 0..n {
            let v = desc.get(p, q, layer - 1);
            pixels.push(if v == INF_SENTINEL || v > 1.0 {
                255
            } else {
                (v.max(0.0) * 254.0).round() as u8
            });
        }
    }
    Ok(GrayImage {
        width: n,
        height: n,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::ViewDirection;

    #[test]
    fn empty_descriptor_is_white() {
        let d = MlhDescriptor::empty(5, 2, ViewDirection::PosZ);
        let img = export_layer_image(&d, 2).unwrap();
        assert!(img.pixels.iter().all(|&p| p == 255));
        assert_eq!(img.to_pgm().len(), "P5\n5 5\n255\n".len() + 25);
    }

    #[test]
    fn endpoints_and_orientation() {
        let mut d = MlhDescriptor::empty(3, 1, ViewDirection::PosZ);
        d.set(0, 2, 0, 0.0);
        d.set(2, 0, 0, 1.0);
        d.set(1, 1, 0, 0.5);
        let img = export_layer_image(&d, 1).unwrap();
        // q = N-1 on the top row
        assert_eq!(img.pixel(0, 0), 0);
        assert_eq!(img.pixel(2, 2), 254);
        assert_eq!(img.pixel(1, 1), 127);
        assert_eq!(img.pixel(1, 0), 255);
    }

    #[test]
    fn layer_bounds() {
        let d = MlhDescriptor::empty(2, 3, ViewDirection::PosZ);
        assert!(matches!(
            export_layer_image(&d, 0),
            Err(Error::LayerOutOfRange { layer: 0, k: 3 })
        ));
        assert!(export_layer_image(&d, 4).is_err());
        assert!(export_layer_image(&d, 3).is_ok());
    }

    #[test]
    fn png_has_signature() {
        let d = MlhDescriptor::empty(4, 1, ViewDirection::PosZ);
        let bytes = export_layer_image(&d, 1).unwrap().to_png().unwrap();
        assert_eq!(&bytes[..8], b"\x89PNG\r\n\x1a\n");
    }
}
