//! 8-bit PNG and binary PPM (P6) / PGM (P5) reading and writing.
//!
//! A code `c` loads as `c / 255`; an intensity `v` saves as `round(v * 255)`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{c2g, BinaryMask, Image};
use crate::error::{Error, Result};

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"\x89PNG") {
        decode_png(path, &bytes)
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        decode_pnm(path, &bytes)
    } else {
        Err(Error::format(path, "not a PNG, PPM (P6) or PGM (P5) file"))
    }
}

/// Loads a mask image (any channel count) and thresholds it at 0.5.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let img = load_image(path)?;
    let gray = if img.channels() == 3 { c2g(&img)? } else { img };
    BinaryMask::from_image(&gray)
}

/// Saves by extension: `.png`, `.ppm` (3 channels) or `.pgm` (1 channel).
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let codes: Vec<u8> = img.data().iter().map(|&v| to_code(v)).collect();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    match ext.as_str() {
        "png" => {
            let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
            enc.set_color(if img.channels() == 3 {
                png::ColorType::Rgb
            } else {
                png::ColorType::Grayscale
            });
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc
                .write_header()
                .map_err(|e| Error::format(path, e.to_string()))?;
            writer
                .write_image_data(&codes)
                .map_err(|e| Error::format(path, e.to_string()))?;
            writer
                .finish()
                .map_err(|e| Error::format(path, e.to_string()))?;
        }
        "ppm" | "pgm" => {
            let (magic, want) = if ext == "ppm" { ("P6", 3) } else { ("P5", 1) };
            if img.channels() != want {
                return Err(Error::Channels {
                    expected: want,
                    actual: img.channels(),
                });
            }
            write!(out, "{magic}\n{} {}\n255\n", img.width(), img.height())
                .and_then(|_| out.write_all(&codes))
                .map_err(|e| Error::io(path, e))?;
        }
        other => {
            return Err(Error::format(
                path,
                format!("unsupported extension {other:?} (use png, ppm or pgm)"),
            ))
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    save_image(&mask.to_image(), path)
}

fn to_code(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn decode_png(path: &Path, bytes: &[u8]) -> Result<Image> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(
            path,
            format!("unsupported bit depth {:?}; only 8-bit PNG is read", info.bit_depth),
        ));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let (src_ch, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => return Err(Error::format(path, format!("unsupported color type {other:?}"))),
    };
    let buf = &buf[..info.buffer_size()];
    let mut data = Vec::with_capacity(h * w * keep);
    for row in buf.chunks_exact(info.line_size) {
        for px in row[..w * src_ch].chunks_exact(src_ch) {
            data.extend(px[..keep].iter().map(|&c| c as f64 / 255.0));
        }
    }
    Image::new(h, w, keep, data)
}

fn decode_pnm(path: &Path, bytes: &[u8]) -> Result<Image> {
    let channels = if bytes[1] == b'6' { 3 } else { 1 };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        *field = header_number(path, bytes, &mut pos)?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format(
            path,
            format!("unsupported maxval {maxval}; only 8-bit (255) is read"),
        ));
    }
    if w == 0 || h == 0 {
        return Err(Error::format(path, "zero image dimension"));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format(path, "malformed header")),
    }
    let need = w * h * channels;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::format(path, format!("truncated raster: need {need} bytes")))?;
    Image::new(h, w, channels, raster.iter().map(|&c| c as f64 / 255.0).collect())
}

fn header_number(path: &Path, bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while !matches!(bytes.get(*pos), Some(b'\n') | None) {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b) if b.is_ascii_digit() => break,
            _ => return Err(Error::format(path, "malformed header")),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(path, "malformed header number"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, c, (0..h * w * c).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        for (name, c) in [("a.png", 3), ("b.png", 1), ("c.ppm", 3), ("d.pgm", 1)] {
            let img = random_image(13, 9, c, c as u64);
            let path = dir.path().join(name);
            save_image(&img, &path).unwrap();
            let back = load_image(&path).unwrap();
            assert!(back.same_shape(&img), "{name}");
            assert!(back.max_abs_diff(&img) <= 1.0 / 510.0 + 1e-15, "{name}");
        }
    }

    #[test]
    fn reads_hand_built_ppm() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.ppm");
        let mut bytes = b"P6\n# a comment\n3 2\n255\n".to_vec();
        bytes.extend((0..18u8).map(|i| i * 10));
        std::fs::write(&path, bytes).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!((img.height(), img.width(), img.channels()), (2, 3, 3));
        assert_eq!(img.get(1, 2, 2), 170.0 / 255.0);
    }

    #[test]
    fn truncated_and_malformed_files_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        std::fs::write(&path, b"P6\n4 4\n255\n\x01\x02\x03").unwrap();
        assert!(matches!(load_image(&path), Err(Error::Format { .. })));

        std::fs::write(&path, b"P6\n4 x\n255\n").unwrap();
        assert!(load_image(&path).is_err());

        std::fs::write(&path, b"P5\n1 1\n65535\n\x00\x00").unwrap();
        assert!(load_image(&path).is_err());

        let png_path = dir.path().join("t.png");
        save_image(&random_image(8, 8, 3, 1), &png_path).unwrap();
        let bytes = std::fs::read(&png_path).unwrap();
        std::fs::write(&png_path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_image(&png_path).is_err());

        assert!(matches!(
            load_image(dir.path().join("missing.png")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn rejects_16_bit_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deep.png");
        {
            let file = File::create(&path).unwrap();
            let mut enc = png::Encoder::new(BufWriter::new(file), 2, 2);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Sixteen);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[0u8; 8]).unwrap();
        }
        let err = load_image(&path).unwrap_err().to_string();
        assert!(err.contains("bit depth"), "{err}");
    }

    #[test]
    fn mask_thresholds_at_half() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let img = Image::new(1, 4, 1, vec![0.0, 0.49, 0.51, 1.0]).unwrap();
        save_image(&img, &path).unwrap();
        let mask = load_mask(&path).unwrap();
        assert_eq!(
            (0..4).map(|x| mask.at(0, x)).collect::<Vec<_>>(),
            [false, false, true, true]
        );
    }
}
