//! Wet-to-dry heatmaps written as 8-bit RGB PNG.

use std::fs;
use std::path::Path;

use crate::error::{argument, Error, Result};
use crate::raster::Raster2D;

/// Colour at the high (wet) end of the scale.
pub const WET_RGB: [u8; 3] = [30, 60, 255];
/// Colour at the low (dry) end of the scale.
pub const DRY_RGB: [u8; 3] = [220, 40, 30];
pub const NODATA_RGB: [u8; 3] = [128, 128, 128];

/// Linear blend from [`DRY_RGB`] at `lo` to [`WET_RGB`] at `hi`, rounding
/// half to even; values are clipped to `[lo, hi]`.
pub fn heat_color(v: f32, lo: f32, hi: f32) -> [u8; 3] {
    if v.is_nan() {
        return NODATA_RGB;
    }
    let t = ((v as f64 - lo as f64) / (hi as f64 - lo as f64)).clamp(0.0, 1.0);
    std::array::from_fn(|i| ((1.0 - t) * DRY_RGB[i] as f64 + t * WET_RGB[i] as f64).round_ties_even() as u8)
}

/// PNG bytes of the heatmap (no timestamps or other varying chunks).
pub fn encode_heatmap(map: &Raster2D, lo: f32, hi: f32) -> Result<Vec<u8>> {
    if !(lo < hi) {
        return Err(argument(format!("heatmap range [{lo}, {hi}] is empty")));
    }
    let rgb: Vec<u8> = map.values().iter().flat_map(|&v| heat_color(v, lo, hi)).collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, map.width() as u32, map.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&rgb)?;
        writer.finish()?;
    }
    Ok(out)
}

pub fn render_heatmap(map: &Raster2D, lo: f32, hi: f32, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_heatmap(map, lo, hi)?;
    let path = path.as_ref();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::GridGeo;

    fn decode(bytes: &[u8]) -> (u32, u32, Vec<u8>) {
        let dec = png::Decoder::new(std::io::Cursor::new(bytes));
        let mut reader = dec.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        let info = reader.next_frame(&mut buf).unwrap();
        buf.truncate(info.buffer_size());
        (info.width, info.height, buf)
    }

    #[test]
    fn colour_examples() {
        assert_eq!(heat_color(0.45, 0.05, 0.45), WET_RGB);
        assert_eq!(heat_color(0.05, 0.05, 0.45), DRY_RGB);
        assert_eq!(heat_color(f32::NAN, 0.05, 0.45), NODATA_RGB);
        assert_eq!(heat_color(0.5, 0.0, 1.0), [125, 50, 142]);
        assert_eq!(heat_color(9.0, 0.0, 1.0), WET_RGB);
        assert_eq!(heat_color(-9.0, 0.0, 1.0), DRY_RGB);
    }

    #[test]
    fn png_pixels_and_determinism() {
        let g = GridGeo::new(3, 2, 0.0, 0.0, 1.0).unwrap();
        let map = Raster2D::new(g, vec![1.0, 0.0, f32::NAN, 0.5, 1.0, 0.0]).unwrap();
        let a = encode_heatmap(&map, 0.0, 1.0).unwrap();
        assert_eq!(a, encode_heatmap(&map, 0.0, 1.0).unwrap());
        let (w, h, px) = decode(&a);
        assert_eq!((w, h), (3, 2));
        assert_eq!(&px[0..3], &WET_RGB);
        assert_eq!(&px[3..6], &DRY_RGB);
        assert_eq!(&px[6..9], &NODATA_RGB);
        assert_eq!(&px[9..12], &[125, 50, 142]);
        assert!(encode_heatmap(&map, 1.0, 1.0).is_err());
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(render_heatmap(&map, 0.0, 1.0, dir.path().join("no/such/dir.png")), Err(Error::Io { .. })));
    }
}
