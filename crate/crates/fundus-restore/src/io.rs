//! File I/O: lossless float rasters, PNG views, 1-bit mask PNGs, and
//! atomic writes.
//!
//! The lossless raster format `.f32` has a fixed 16-byte header:
//!
//! | bytes  | field    | encoding                      |
//! |--------|----------|-------------------------------|
//! | 0..3   | magic    | ASCII `F32`                   |
//! | 3      | version  | single byte, currently 1      |
//! | 4..8   | height   | little-endian u32             |
//! | 8..12  | width    | little-endian u32             |
//! | 12..16 | channels | little-endian u32             |
//!
//! followed by `height * width * channels` little-endian float32 values in
//! row-major HWC order. Round-trips are bit-exact. The 8-bit PNGs written
//! alongside are for viewing only; metrics always read the raster.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

const RASTER_MAGIC: [u8; 3] = *b"F32";
const RASTER_VERSION: u8 = 1;
const RASTER_HEADER_LEN: usize = 16;

/// Write `bytes` to `path` atomically: the payload lands in a temporary
/// sibling file first and is renamed into place, so readers never observe
/// a partial file and an interrupted run leaves the old content intact.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let stem = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    let tmp = dir.join(format!(".{}.tmp-{}", stem, std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_f32_raster(path: &Path, img: &Image) -> Result<()> {
    let mut buf = Vec::with_capacity(RASTER_HEADER_LEN + img.data.len() * 4);
    buf.extend_from_slice(&RASTER_MAGIC);
    buf.push(RASTER_VERSION);
    buf.extend_from_slice(&(img.height as u32).to_le_bytes());
    buf.extend_from_slice(&(img.width as u32).to_le_bytes());
    buf.extend_from_slice(&(img.channels as u32).to_le_bytes());
    for v in &img.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write(path, &buf)
}

pub fn read_f32_raster(path: &Path) -> Result<Image> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < RASTER_HEADER_LEN {
        return Err(Error::Validation(format!(
            "{}: truncated raster header ({} bytes)",
            path.display(),
            buf.len()
        )));
    }
    if buf[0..3] != RASTER_MAGIC {
        return Err(Error::Validation(format!(
            "{}: bad raster magic {:?}",
            path.display(),
            &buf[0..3]
        )));
    }
    if buf[3] != RASTER_VERSION {
        return Err(Error::Validation(format!(
            "{}: unsupported raster version {}",
            path.display(),
            buf[3]
        )));
    }
    let read_u32 = |off: usize| u32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as usize;
    let (height, width, channels) = (read_u32(4), read_u32(8), read_u32(12));
    let n = height * width * channels;
    let payload = &buf[RASTER_HEADER_LEN..];
    if payload.len() != n * 4 {
        return Err(Error::Validation(format!(
            "{}: raster payload holds {} bytes, expected {}",
            path.display(),
            payload.len(),
            n * 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Image::from_vec(height, width, channels, data)
}

/// Write an 8-bit PNG view of a float image (values clamped to `[0, 1]`
/// and scaled to 0..=255). Grayscale for 1 channel, RGB for 3.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let quant = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let bytes: Vec<u8> = img.data.iter().map(|&v| quant(v)).collect();
    let mut cursor = Cursor::new(Vec::new());
    let (w, h) = (img.width as u32, img.height as u32);
    let encode_err = |e: image::ImageError| Error::Validation(format!("{}: {e}", path.display()));
    match img.channels {
        1 => {
            let buf = image::GrayImage::from_raw(w, h, bytes)
                .ok_or_else(|| Error::Validation("png buffer size mismatch".into()))?;
            buf.write_to(&mut cursor, image::ImageFormat::Png)
                .map_err(encode_err)?;
        }
        3 => {
            let buf = image::RgbImage::from_raw(w, h, bytes)
                .ok_or_else(|| Error::Validation("png buffer size mismatch".into()))?;
            buf.write_to(&mut cursor, image::ImageFormat::Png)
                .map_err(encode_err)?;
        }
        c => {
            return Err(Error::Validation(format!(
                "png export supports 1 or 3 channels, got {c}"
            )))
        }
    }
    atomic_write(path, &cursor.into_inner())
}

/// Read an 8-bit PNG into a float image with values in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Image> {
    let dynimg = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Validation(format!("{}: {other}", path.display())),
    })?;
    if dynimg.color().has_color() {
        let rgb = dynimg.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.into_raw().iter().map(|&b| b as f32 / 255.0).collect();
        Image::from_vec(h as usize, w as usize, 3, data)
    } else {
        let gray = dynimg.to_luma8();
        let (w, h) = gray.dimensions();
        let data = gray.into_raw().iter().map(|&b| b as f32 / 255.0).collect();
        Image::from_vec(h as usize, w as usize, 1, data)
    }
}

/// Write a binary mask as a 1-bit grayscale PNG (bit value 1 = masked).
pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let row_bytes = mask.width.div_ceil(8);
    let mut packed = vec![0u8; row_bytes * mask.height];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) == 1 {
                packed[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, mask.width as u32, mask.height as u32);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::One);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        writer
            .write_image_data(&packed)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    }
    atomic_write(path, &out)
}

/// Read a mask PNG. Any grayscale bit depth is accepted; pixels at or
/// above half intensity count as 1.
pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let dynimg = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Validation(format!("{}: {other}", path.display())),
    })?;
    let gray = dynimg.to_luma8();
    let (w, h) = gray.dimensions();
    let data = gray
        .into_raw()
        .iter()
        .map(|&b| u8::from(b >= 128))
        .collect();
    Mask::from_vec(h as usize, w as usize, data)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::Validation(format!("json encode: {e}")))?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn raster_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.f32");
        let mut img = Image::zeros(5, 7, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            // Include values outside [0,1] and denormals to check no clamping.
            *v = (i as f32 - 50.0) * 0.3 + 1e-40;
        }
        write_f32_raster(&path, &img).unwrap();
        let back = read_f32_raster(&path).unwrap();
        assert_eq!(img.height, back.height);
        assert_eq!(img.width, back.width);
        assert_eq!(img.channels, back.channels);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn raster_rejects_corrupt_header() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.f32");
        let img = Image::zeros(2, 2, 1);
        write_f32_raster(&path, &img).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(read_f32_raster(&path).is_err());
    }

    #[test]
    fn raster_rejects_truncated_payload() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.f32");
        let img = Image::zeros(4, 4, 3);
        write_f32_raster(&path, &img).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(read_f32_raster(&path).is_err());
    }

    #[test]
    fn mask_png_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("mask.png");
        let mut mask = Mask::zeros(9, 13); // width not a multiple of 8
        for y in 0..9 {
            for x in 0..13 {
                mask.set(y, x, u8::from((y * 13 + x) % 3 == 0));
            }
        }
        write_mask_png(&path, &mask).unwrap();
        let back = read_mask_png(&path).unwrap();
        assert_eq!(mask, back);
    }

    #[test]
    fn png_view_quantizes_to_8bit() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = Image::from_vec(1, 2, 3, vec![0.0, 0.5, 1.0, -0.2, 1.7, 0.25]).unwrap();
        write_png(&path, &img).unwrap();
        let back = read_png(&path).unwrap();
        let expect = [0.0, 128.0 / 255.0, 1.0, 0.0, 1.0, 64.0 / 255.0];
        for (a, e) in back.data.iter().zip(expect) {
            assert!((a - e).abs() < 1e-6, "{a} vs {e}");
        }
    }

    #[test]
    fn missing_file_maps_to_io_error() {
        let err = read_f32_raster(Path::new("/nonexistent/x.f32")).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }
}
