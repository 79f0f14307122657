//! PNG rendering of images, label maps and the per-region filter state.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3, ArrayView3};

use crate::data::{images_to_tensor, Sample, IGNORE};
use crate::drlc::{combine_decision_maps, render_cases};
use crate::error::{Error, Result};
use crate::eval::{predict_labels, EnsembleConfig};
use crate::models::Networks;
use crate::nn::ops::softmax;
use crate::region_filter::{make_concat, select_pseudo_labels, to_prediction_label, upsample_decision};
use crate::scalar::Scalar;

const PALETTE: [[u8; 3]; 12] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
];

/// Colour for a class id; IGNORE is white.
pub fn class_color(label: u8) -> Rgb<u8> {
    if label == IGNORE {
        return Rgb([255, 255, 255]);
    }
    Rgb(PALETTE[label as usize % PALETTE.len()])
}

pub fn render_labels(labels: &Array2<u8>) -> RgbImage {
    let (h, w) = labels.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| class_color(labels[[y as usize, x as usize]]))
}

/// (H, W, 3) image in [0, 1].
pub fn render_image(image: ArrayView3<f32>) -> RgbImage {
    let (h, w, _) = image.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (image[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

pub fn render_mask(mask: ndarray::ArrayView2<bool>) -> GrayImage {
    let (h, w) = mask.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    })
}

/// Writes a PNG, mapping encoder failures to a format error.
pub fn save_png<P>(img: &image::ImageBuffer<P, Vec<u8>>, path: &Path) -> Result<()>
where
    P: image::Pixel<Subpixel = u8> + image::PixelWithColorType,
{
    img.save(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Writes, per sample: the prediction R, branch 1's filter mask m and its
/// selected pseudo-labels s_l, and the four-case map rc_f rendered at
/// image resolution.
pub fn dump_debug<T: Scalar>(
    nets: &Networks<T>,
    samples: &[Sample],
    eni: bool,
    ensemble: &EnsembleConfig,
    eps: f64,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in samples {
        let images = images_to_tensor::<T>(&[s])?;
        let pred = predict_labels(&nets.branches, &images, eni, ensemble)?;
        let probs = softmax(&nets.branches[0].predict(&images));
        let concat_p = make_concat(&images, &probs)?;
        let (out1, _) = nets.discriminators[0].forward(&concat_p)?;
        let (out2, _) = nets.discriminators[1].forward(&concat_p)?;
        let hw = (s.height(), s.width());
        let m = upsample_decision(&out1.rc, hw, T::lit(eps))?;
        let s_l = select_pseudo_labels(&to_prediction_label(&probs), &m)?;
        let cases = combine_decision_maps(&out1.rc, &out2.rc, T::lit(eps))?;
        let scale = (hw.0 / cases.cases.shape()[1]) as u32;

        let first = |a: &Array3<u8>| a.index_axis(ndarray::Axis(0), 0).to_owned();
        save_png(&render_labels(&first(&pred)), &dir.join(format!("{}_pred.png", s.id)))?;
        save_png(
            &render_mask(m.index_axis(ndarray::Axis(0), 0)),
            &dir.join(format!("{}_mask.png", s.id)),
        )?;
        save_png(&render_labels(&first(&s_l)), &dir.join(format!("{}_selected.png", s.id)))?;
        save_png(&render_cases(&cases, 0, scale), &dir.join(format!("{}_rcf.png", s.id)))?;
    }
    Ok(())
}
