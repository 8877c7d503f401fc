//! PNG readers and writers for color frames, palette-indexed masks and
//! 16-bit depth maps.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::MaskMap;

/// Value an 8-bit channel decodes to.
pub fn from_u8(v: u8) -> f64 {
    v as f64 / 255.0
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn from_u16(v: u16) -> f64 {
    v as f64 / 65535.0
}

pub fn to_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// DAVIS-style label palette: id bits spread over the high bits of R, G, B.
pub fn label_palette() -> Vec<u8> {
    let mut pal = Vec::with_capacity(256 * 3);
    for id in 0u32..256 {
        let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
        let mut c = id;
        for j in 0..8 {
            r |= ((c & 1) as u8) << (7 - j);
            g |= (((c >> 1) & 1) as u8) << (7 - j);
            b |= (((c >> 2) & 1) as u8) << (7 - j);
            c >>= 3;
        }
        pal.extend_from_slice(&[r, g, b]);
    }
    pal
}

struct Decoded {
    width: usize,
    height: usize,
    color: ColorType,
    depth: BitDepth,
    data: Vec<u8>,
}

fn decode(path: &Path) -> Result<Decoded> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::data(path, format!("unreadable PNG: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::data(path, "PNG too large"))?;
    let mut data = vec![0; size];
    let info = reader
        .next_frame(&mut data)
        .map_err(|e| Error::data(path, format!("unreadable PNG: {e}")))?;
    data.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        data,
    })
}

fn encode(path: &Path, width: usize, height: usize, color: ColorType, depth: BitDepth, palette: Option<Vec<u8>>, data: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        if let Some(p) = palette {
            enc.set_palette(p);
        }
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::data(path, format!("PNG encode: {e}")))?;
        writer
            .write_image_data(data)
            .map_err(|e| Error::data(path, format!("PNG encode: {e}")))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read an 8-bit RGB (or grayscale) image as a `[3, H, W]` tensor in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let d = decode(path)?;
    if d.depth != BitDepth::Eight {
        return Err(Error::data(path, "color frames must be 8-bit"));
    }
    let plane = d.width * d.height;
    let mut out = vec![0.0; 3 * plane];
    match d.color {
        ColorType::Rgb => {
            for (px, rgb) in d.data.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    out[c * plane + px] = from_u8(rgb[c]);
                }
            }
        }
        ColorType::Grayscale => {
            for (px, &v) in d.data.iter().enumerate() {
                for c in 0..3 {
                    out[c * plane + px] = from_u8(v);
                }
            }
        }
        other => {
            return Err(Error::data(path, format!("unsupported frame color type {other:?}")));
        }
    }
    Tensor::new(vec![3, d.height, d.width], out)
}

pub fn write_rgb(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(Error::shape("RGB writer needs 3 channels"));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(3 * plane);
    for px in 0..plane {
        for ch in 0..3 {
            data.push(to_u8(image.data()[ch * plane + px]));
        }
    }
    encode(path, w, h, ColorType::Rgb, BitDepth::Eight, None, &data)
}

/// Read a palette-indexed (or 8-bit grayscale) label image: pixel value is
/// the object id. Returns `(height, width, labels)`.
pub fn read_label_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let d = decode(path)?;
    if d.depth != BitDepth::Eight || !matches!(d.color, ColorType::Indexed | ColorType::Grayscale) {
        return Err(Error::data(
            path,
            format!("masks must be 8-bit indexed or grayscale, got {:?} {:?}", d.color, d.depth),
        ));
    }
    Ok((d.height, d.width, d.data))
}

pub fn read_mask(path: &Path, num_objects: usize) -> Result<MaskMap> {
    let (h, w, labels) = read_label_png(path)?;
    if let Some(&bad) = labels.iter().find(|&&l| l as usize > num_objects) {
        return Err(Error::data(
            path,
            format!("mask value {bad} exceeds the sequence's {num_objects} objects"),
        ));
    }
    MaskMap::new(h, w, labels, num_objects)
}

pub fn write_mask(path: &Path, mask: &MaskMap) -> Result<()> {
    encode(
        path,
        mask.width(),
        mask.height(),
        ColorType::Indexed,
        BitDepth::Eight,
        Some(label_palette()),
        mask.labels(),
    )
}

/// Read a 16-bit grayscale depth map as `[1, H, W]` in `[0, 1]`.
pub fn read_depth(path: &Path) -> Result<Tensor> {
    let d = decode(path)?;
    if d.depth != BitDepth::Sixteen || d.color != ColorType::Grayscale {
        return Err(Error::data(path, "depth maps must be 16-bit grayscale"));
    }
    let data = d
        .data
        .chunks_exact(2)
        .map(|b| from_u16(u16::from_be_bytes([b[0], b[1]])))
        .collect();
    Tensor::new(vec![1, d.height, d.width], data)
}

pub fn write_depth(path: &Path, depth: &Tensor) -> Result<()> {
    let (c, h, w) = depth.chw()?;
    if c != 1 {
        return Err(Error::shape("depth writer needs one channel"));
    }
    let data: Vec<u8> = depth
        .data()
        .iter()
        .flat_map(|&v| to_u16(v).to_be_bytes())
        .collect();
    encode(path, w, h, ColorType::Grayscale, BitDepth::Sixteen, None, &data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_pixel_value_is_object_id() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let m = MaskMap::new(2, 3, vec![0, 1, 2, 2, 0, 1], 2).unwrap();
        write_mask(&p, &m).unwrap();
        let back = read_mask(&p, 2).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.get(0, 2), 2);
        let err = read_mask(&p, 1).unwrap_err().to_string();
        assert!(err.contains("exceeds"), "{err}");
    }

    #[test]
    fn rgb_and_depth_round_trip_exactly_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::from_fn(&[3, 4, 5], |i| from_u8((i * 13 % 256) as u8));
        write_rgb(&dir.path().join("f.png"), &img).unwrap();
        assert_eq!(read_rgb(&dir.path().join("f.png")).unwrap(), img);

        let depth = Tensor::from_fn(&[1, 4, 5], |i| from_u16((i * 3011 % 65536) as u16));
        write_depth(&dir.path().join("d.png"), &depth).unwrap();
        assert_eq!(read_depth(&dir.path().join("d.png")).unwrap(), depth);
    }

    #[test]
    fn palette_is_distinct_for_small_ids() {
        let pal = label_palette();
        assert_eq!(&pal[..3], &[0, 0, 0]);
        assert_eq!(&pal[3..6], &[128, 0, 0]);
        assert_eq!(&pal[6..9], &[0, 128, 0]);
    }

    #[test]
    fn unreadable_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        fs::write(&p, b"not a png").unwrap();
        assert!(matches!(read_rgb(&p), Err(Error::Data { .. })));
        assert!(matches!(read_rgb(&dir.path().join("missing.png")), Err(Error::Io { .. })));
    }
}
