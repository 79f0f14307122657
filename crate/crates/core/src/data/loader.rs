use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::DynamicImage;
use ndarray::{Array2, Array3};

use super::{Sample, IGNORE};
use crate::error::{Error, Result};

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Reads `root/images/<id>.png` with `root/masks/<id>.png`, sorted by id.
/// Mask values are passed through unchanged, including [`IGNORE`].
pub fn load_dataset(root: &Path) -> Result<Vec<Sample>> {
    let images = png_stems(&root.join("images"))?;
    let masks = png_stems(&root.join("masks"))?;
    let mut out = Vec::with_capacity(images.len());
    for (id, image_path) in &images {
        let mask_path = masks
            .get(id)
            .ok_or_else(|| Error::Dataset(format!("missing mask for image '{id}'")))?;
        let rgb = open(image_path)?.to_rgb8();
        let mask = match open(mask_path)? {
            DynamicImage::ImageLuma8(m) => m,
            other => {
                return Err(Error::Format {
                    path: mask_path.clone(),
                    msg: format!("mask must be single-channel 8-bit, found {:?}", other.color()),
                })
            }
        };
        if rgb.dimensions() != mask.dimensions() {
            return Err(Error::Dataset(format!(
                "image '{id}' is {:?} but its mask is {:?}",
                rgb.dimensions(),
                mask.dimensions()
            )));
        }
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let image = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            rgb.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0
        });
        let label = Array2::from_shape_fn((h, w), |(y, x)| mask.get_pixel(x as u32, y as u32).0[0]);
        out.push(Sample::new(id.clone(), image, label)?);
    }
    Ok(out)
}

/// Rejects any label outside {0..C-1, IGNORE}, listing every offending id.
pub fn validate_labels(samples: &[Sample], num_classes: usize) -> Result<()> {
    let bad: Vec<&str> = samples
        .iter()
        .filter(|s| s.label.iter().any(|&l| l != IGNORE && l as usize >= num_classes))
        .map(|s| s.id.as_str())
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Dataset(format!(
            "label values >= {num_classes} in: {}",
            bad.join(", ")
        )))
    }
}

pub fn load_dataset_checked(root: &Path, num_classes: usize) -> Result<Vec<Sample>> {
    let samples = load_dataset(root)?;
    validate_labels(&samples, num_classes)?;
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, Rgb, RgbImage};

    fn write_pair(root: &Path, id: &str, mask_value: u8) {
        std::fs::create_dir_all(root.join("images")).unwrap();
        std::fs::create_dir_all(root.join("masks")).unwrap();
        RgbImage::from_pixel(4, 3, Rgb([255, 0, 51]))
            .save(root.join("images").join(format!("{id}.png")))
            .unwrap();
        let mut m = GrayImage::from_pixel(4, 3, Luma([1]));
        m.put_pixel(0, 0, Luma([mask_value]));
        m.save(root.join("masks").join(format!("{id}.png"))).unwrap();
    }

    #[test]
    fn loads_pairs_in_lexical_order() {
        let dir = tempfile::tempdir().unwrap();
        for id in ["b", "c", "a"] {
            write_pair(dir.path(), id, 0);
        }
        let samples = load_dataset(dir.path()).unwrap();
        let ids: Vec<_> = samples.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(samples[0].image.dim(), (3, 4, 3));
        assert_eq!(samples[0].image[[1, 1, 0]], 1.0);
        assert!((samples[0].image[[1, 1, 2]] - 0.2).abs() < 1e-6);
    }

    #[test]
    fn ignore_value_passes_through() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "x", IGNORE);
        let s = load_dataset_checked(dir.path(), 2).unwrap();
        assert_eq!(s[0].label[[0, 0]], IGNORE);
    }

    #[test]
    fn out_of_range_label_lists_offending_ids() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "good", 0);
        write_pair(dir.path(), "bad", 3);
        let err = load_dataset_checked(dir.path(), 3).unwrap_err().to_string();
        assert!(err.contains("bad") && !err.contains("good"), "{err}");
    }

    #[test]
    fn missing_mask_names_the_id() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "ok", 0);
        RgbImage::new(2, 2).save(dir.path().join("images/lonely.png")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("lonely"), "{err}");
    }

    #[test]
    fn colour_mask_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "m", 0);
        RgbImage::new(4, 3).save(dir.path().join("masks/m.png")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format { .. })));
    }
}
