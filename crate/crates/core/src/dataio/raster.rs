//! PNG raster I/O. Label maps are single-channel 16-bit so that instance ids
//! above 255 survive the round trip untouched.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use super::image::{InstanceLabelMap, RgbImage};
use crate::error::{Error, Result};

const LOSSY_EXTENSIONS: &[&str] = &["jpg", "jpeg", "jfif", "webp", "heic", "avif"];

/// Extensions accepted when scanning a dataset directory.
pub const SUPPORTED_EXTENSIONS: &[&str] = &["png"];

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default()
}

fn check_supported(path: &Path, what: &str) -> Result<()> {
    let ext = extension(path);
    if LOSSY_EXTENSIONS.contains(&ext.as_str()) {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: format!("lossy format '{ext}' cannot carry an exact {what}"),
        });
    }
    if !SUPPORTED_EXTENSIONS.contains(&ext.as_str()) {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: format!("'{ext}' is not a supported raster format (expected png)"),
        });
    }
    Ok(())
}

struct Decoded {
    width: usize,
    height: usize,
    color: ColorType,
    depth: BitDepth,
    data: Vec<u8>,
}

fn decode(path: &Path, transformations: Transformations) -> Result<Decoded> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decode_err = |e: png::DecodingError| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(transformations);
    let mut reader = decoder.read_info().map_err(decode_err)?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Decode {
        path: path.to_path_buf(),
        reason: "image too large".into(),
    })?;
    let mut data = vec![0u8; size];
    let info = reader.next_frame(&mut data).map_err(decode_err)?;
    data.truncate(info.line_size * info.height as usize);
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        data,
    })
}

/// Decodes an RGB image. Gray inputs are replicated to three channels and
/// alpha is dropped; 16-bit samples are reduced to their high byte.
pub fn read_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    check_supported(path, "image")?;
    let d = decode(path, Transformations::EXPAND | Transformations::STRIP_16)?;
    let n = d.width * d.height;
    let pixels = match d.color {
        ColorType::Rgb => d.data,
        ColorType::Rgba => d.data.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        ColorType::Grayscale => d.data.iter().flat_map(|&v| [v, v, v]).collect(),
        ColorType::GrayscaleAlpha => d.data.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        ColorType::Indexed => {
            return Err(Error::Decode {
                path: path.to_path_buf(),
                reason: "palette was not expanded".into(),
            })
        }
    };
    debug_assert_eq!(pixels.len(), n * 3);
    RgbImage::new(d.height, d.width, pixels)
}

/// Decodes a single-channel label map without any value remapping.
pub fn read_label_map(path: impl AsRef<Path>) -> Result<InstanceLabelMap> {
    let path = path.as_ref();
    check_supported(path, "label map")?;
    let d = decode(path, Transformations::IDENTITY)?;
    if d.color != ColorType::Grayscale {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: format!("label maps must be single-channel, found {:?}", d.color),
        });
    }
    let labels: Vec<u32> = match d.depth {
        BitDepth::Sixteen => d
            .data
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as u32)
            .collect(),
        BitDepth::Eight => d.data.iter().map(|&v| v as u32).collect(),
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                reason: format!("label maps must be 8- or 16-bit, found {other:?}"),
            })
        }
    };
    InstanceLabelMap::new(d.height, d.width, labels)
}

fn encode(path: &Path, width: usize, height: usize, color: ColorType, depth: BitDepth, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let encode_err = |e: png::EncodingError| Error::Encode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(depth);
    let mut writer = encoder.write_header().map_err(encode_err)?;
    writer.write_image_data(data).map_err(encode_err)?;
    writer.finish().map_err(encode_err)
}

pub fn write_image(image: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    check_supported(path, "image")?;
    encode(path, image.width(), image.height(), ColorType::Rgb, BitDepth::Eight, image.pixels())
}

/// Writes a 16-bit single-channel PNG. Ids above 65535 cannot be represented.
pub fn write_label_map(labels: &InstanceLabelMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    check_supported(path, "label map")?;
    let max = labels.max_id();
    if max > u16::MAX as u32 {
        return Err(Error::Encode {
            path: path.to_path_buf(),
            reason: format!("instance id {max} exceeds the 16-bit range"),
        });
    }
    let data: Vec<u8> = labels
        .labels()
        .iter()
        .flat_map(|&v| (v as u16).to_be_bytes())
        .collect();
    encode(path, labels.width(), labels.height(), ColorType::Grayscale, BitDepth::Sixteen, &data)
}

/// Writes an 8-bit single-channel PNG (ternary masks and similar small-valued maps).
pub fn write_gray8(values: &[u8], height: usize, width: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    check_supported(path, "mask")?;
    if values.len() != height * width {
        return Err(Error::Shape(format!(
            "expected {} values for a {height}x{width} mask, got {}",
            height * width,
            values.len()
        )));
    }
    encode(path, width, height, ColorType::Grayscale, BitDepth::Eight, values)
}

/// Reads an 8-bit single-channel PNG written by [`write_gray8`].
pub fn read_gray8(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    check_supported(path, "mask")?;
    let d = decode(path, Transformations::EXPAND)?;
    if d.color != ColorType::Grayscale || d.depth != BitDepth::Eight {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: format!("expected 8-bit grayscale, found {:?}/{:?}", d.color, d.depth),
        });
    }
    Ok((d.height, d.width, d.data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn label_map_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels: Vec<u32> = (0..37 * 23).map(|_| rng.gen_range(0..=u16::MAX as u32)).collect();
        let map = InstanceLabelMap::new(37, 23, labels).unwrap();
        let path = dir.path().join("l.png");
        write_label_map(&map, &path).unwrap();
        assert_eq!(read_label_map(&path).unwrap(), map);
    }

    #[test]
    fn all_zero_label_map_has_no_instances() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.png");
        write_label_map(&InstanceLabelMap::background(5, 7), &path).unwrap();
        let m = read_label_map(&path).unwrap();
        assert!(m.instance_ids().is_empty());
    }

    #[test]
    fn image_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let px: Vec<u8> = (0..9 * 11 * 3).map(|_| rng.gen()).collect();
        let img = RgbImage::new(9, 11, px).unwrap();
        let path = dir.path().join("i.png");
        write_image(&img, &path).unwrap();
        assert_eq!(read_image(&path).unwrap(), img);
    }

    #[test]
    fn large_image_dimensions_are_preserved() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::filled(1000, 1000, [200, 150, 190]);
        let path = dir.path().join("big.png");
        write_image(&img, &path).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!((back.height(), back.width()), (1000, 1000));
    }

    #[test]
    fn lossy_label_map_is_rejected() {
        let err = read_label_map("whatever/labels/a.jpg").unwrap_err();
        assert!(matches!(err, Error::UnsupportedFormat { .. }), "{err}");
    }

    #[test]
    fn corrupt_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"definitely not a png").unwrap();
        assert!(matches!(read_image(&path), Err(Error::Decode { .. })));
    }

    #[test]
    fn rgb_file_is_not_a_label_map() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        write_image(&RgbImage::filled(3, 3, [1, 2, 3]), &path).unwrap();
        assert!(matches!(read_label_map(&path), Err(Error::UnsupportedFormat { .. })));
    }
}
