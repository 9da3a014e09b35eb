use std::fs;
use std::io::Write;
use std::path::Path;

use png::{BitDepth, ColorType};

use crate::error::{Error, Result};
use crate::geom::DepthMap;

fn encode<W: Write>(out: W, width: u32, height: u32, color: ColorType, depth: BitDepth, data: &[u8]) -> Result<()> {
    let mut encoder = png::Encoder::new(out, width, height);
    encoder.set_color(color);
    encoder.set_depth(depth);
    let mut writer = encoder.write_header().map_err(|e| Error::Png(e.to_string()))?;
    writer.write_image_data(data).map_err(|e| Error::Png(e.to_string()))?;
    writer.finish().map_err(|e| Error::Png(e.to_string()))?;
    Ok(())
}

fn write_file(path: &Path, width: u32, height: u32, color: ColorType, depth: BitDepth, data: &[u8]) -> Result<()> {
    let mut bytes = Vec::new();
    encode(&mut bytes, width, height, color, depth, data)?;
    fs::write(path, bytes)?;
    Ok(())
}

fn decode(path: &Path, color: ColorType, depth: BitDepth) -> Result<(u32, u32, Vec<u8>)> {
    let file = fs::File::open(path)?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    if info.color_type != color || info.bit_depth != depth {
        return Err(Error::Png(format!(
            "{}: expected {color:?} {depth:?}, found {:?} {:?}",
            path.display(),
            info.color_type,
            info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width, info.height, buf))
}

fn check_len(width: u32, height: u32, per_pixel: usize, len: usize) -> Result<()> {
    let expected = width as usize * height as usize * per_pixel;
    if len != expected {
        return Err(Error::DimensionMismatch {
            expected: format!("{expected} values for {width}x{height}"),
            actual: len.to_string(),
        });
    }
    Ok(())
}

fn quantize_rgb(rgb: &[f32]) -> Vec<u8> {
    rgb.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
}

/// 8-bit RGB from row-major `[0, 1]` floats.
pub fn write_rgb_png(path: &Path, width: u32, height: u32, rgb: &[f32]) -> Result<()> {
    check_len(width, height, 3, rgb.len())?;
    write_file(path, width, height, ColorType::Rgb, BitDepth::Eight, &quantize_rgb(rgb))
}

/// Same encoding as [`write_rgb_png`], into any writer.
pub fn write_rgb_png_to<W: Write>(out: W, width: u32, height: u32, rgb: &[f32]) -> Result<()> {
    check_len(width, height, 3, rgb.len())?;
    encode(out, width, height, ColorType::Rgb, BitDepth::Eight, &quantize_rgb(rgb))
}

pub fn read_rgb_png(path: &Path) -> Result<(u32, u32, Vec<f32>)> {
    let (w, h, data) = decode(path, ColorType::Rgb, BitDepth::Eight)?;
    Ok((w, h, data.into_iter().map(|b| b as f32 / 255.0).collect()))
}

/// 8-bit grayscale, one class id per pixel.
pub fn write_labels_png(path: &Path, width: u32, height: u32, labels: &[u8]) -> Result<()> {
    check_len(width, height, 1, labels.len())?;
    write_file(path, width, height, ColorType::Grayscale, BitDepth::Eight, labels)
}

pub fn read_labels_png(path: &Path) -> Result<(u32, u32, Vec<u8>)> {
    decode(path, ColorType::Grayscale, BitDepth::Eight)
}

/// 16-bit grayscale in millimeters; 0 marks an invalid pixel.
pub fn write_depth_png(path: &Path, depth: &DepthMap) -> Result<()> {
    check_len(depth.width, depth.height, 1, depth.data.len())?;
    let mut bytes = Vec::with_capacity(depth.data.len() * 2);
    for &d in &depth.data {
        let mm = if d > 0.0 && d.is_finite() {
            (d * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16
        } else {
            0
        };
        bytes.extend_from_slice(&mm.to_be_bytes());
    }
    write_file(path, depth.width, depth.height, ColorType::Grayscale, BitDepth::Sixteen, &bytes)
}

pub fn read_depth_png(path: &Path) -> Result<DepthMap> {
    let (w, h, data) = decode(path, ColorType::Grayscale, BitDepth::Sixteen)?;
    let meters = data
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / 1000.0)
        .collect();
    DepthMap::new(w, h, meters)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_roundtrip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.png");
        let labels: Vec<u8> = (0..48).map(|i| if i % 7 == 0 { 255 } else { (i % 5) as u8 }).collect();
        write_labels_png(&path, 8, 6, &labels).unwrap();
        assert_eq!(read_labels_png(&path).unwrap(), (8, 6, labels));
    }

    #[test]
    fn depth_roundtrip_in_millimeters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        let depth = DepthMap::new(3, 2, vec![0.0, 1.234, 65.535, -1.0, 2.0, 0.001]).unwrap();
        write_depth_png(&path, &depth).unwrap();
        let back = read_depth_png(&path).unwrap();
        assert_eq!(back.data, vec![0.0, 1.234, 65.535, 0.0, 2.0, 0.001]);
    }

    #[test]
    fn rgb_quantizes_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        let rgb = vec![0.0, 0.5, 1.0, 0.2, 0.3, 0.4];
        write_rgb_png(&path, 2, 1, &rgb).unwrap();
        let (w, h, back) = read_rgb_png(&path).unwrap();
        assert_eq!((w, h), (2, 1));
        for (a, b) in rgb.iter().zip(&back) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        assert!(read_labels_png(&path).is_err());
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_labels_png(&dir.path().join("x.png"), 4, 4, &[0; 15]).is_err());
    }
}
