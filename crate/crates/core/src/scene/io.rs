//! Binary PPM/PGM and JSON-lines ground truth.

use std::fs;
use std::io::{BufRead, BufReader, Cursor, Write};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};

use crate::error::{Error, Result};
use crate::scene::{Image, SceneObject};

/// Encodes an image as binary PPM (P6), rounding to 8 bits.
pub fn encode_ppm(img: &Image) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = img
        .pixels()
        .iter()
        .map(|v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(
            &bytes,
            img.width() as u32,
            img.height() as u32,
            ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::format("ppm", e.to_string()))?;
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let dynimg = image::load(Cursor::new(bytes), ImageFormat::Pnm)
        .map_err(|e| Error::format("ppm", e.to_string()))?;
    let rgb = dynimg.to_rgb8();
    let (w, h) = rgb.dimensions();
    Image::new(
        h as usize,
        w as usize,
        rgb.into_raw().into_iter().map(f64::from).collect(),
    )
}

pub fn write_ppm(img: &Image, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(img)?).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| match e {
        Error::Format { what, detail } => Error::Format {
            what,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    })
}

/// Encodes 8-bit grayscale values as binary PGM (P5).
pub fn encode_pgm(values: &[u8], height: usize, width: usize) -> Result<Vec<u8>> {
    if values.len() != height * width {
        return Err(Error::contract(format!(
            "pgm: {} values for {width}x{height}",
            values.len()
        )));
    }
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(values, width as u32, height as u32, ExtendedColorType::L8)
        .map_err(|e| Error::format("pgm", e.to_string()))?;
    Ok(out)
}

pub fn write_pgm(values: &[u8], height: usize, width: usize, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm(values, height, width)?).map_err(|e| Error::io(path, e))
}

/// Decodes a binary PGM into `(height, width, values)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let dynimg = image::load(Cursor::new(bytes), ImageFormat::Pnm)
        .map_err(|e| Error::format("pgm", e.to_string()))?;
    let g = dynimg.to_luma8();
    let (w, h) = g.dimensions();
    Ok((h as usize, w as usize, g.into_raw()))
}

/// One JSON object per line.
pub fn write_objects_jsonl(objects: &[SceneObject], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for o in objects {
        let line = serde_json::to_string(o).expect("scene objects serialize");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_objects_jsonl(path: &Path) -> Result<Vec<SceneObject>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let o = serde_json::from_str(&line).map_err(|e| {
            Error::format(
                "detection record",
                format!("{}:{}: {e}", path.display(), n + 1),
            )
        })?;
        out.push(o);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneSpec};

    #[test]
    fn ppm_round_trip_is_exact_for_8bit_images() {
        let (img, _) = generate_scene(3, &SceneSpec::default()).unwrap();
        let img = img.quantized();
        let bytes = encode_ppm(&img).unwrap();
        assert!(bytes.starts_with(b"P6"));
        assert_eq!(decode_ppm(&bytes).unwrap(), img);
    }

    #[test]
    fn pgm_header_and_payload() {
        let bytes = encode_pgm(&[0, 128, 255, 7], 2, 2).unwrap();
        assert!(bytes.starts_with(b"P5"));
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 128, 255, 7]);
        assert_eq!(decode_pgm(&bytes).unwrap(), (2, 2, vec![0, 128, 255, 7]));
    }

    #[test]
    fn jsonl_uses_detection_shape() {
        let (_, objs) = generate_scene(
            5,
            &SceneSpec {
                min_objects: 2,
                max_objects: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gt.jsonl");
        write_objects_jsonl(&objs, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["name", "class", "confidence", "box", "track_id"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
        assert!(first["box"].get("x1").is_some());
        assert_eq!(read_objects_jsonl(&p).unwrap(), objs);
    }
}
