//! Image loading, resizing, and iris-pair composition.

use std::path::Path;

use ndarray::{Array3, Array4};

use super::{ComposeMode, SampleManifest, Split};
use crate::error::{Error, Result};

/// Loads an image as HxWx3 reals in [0,1]; grayscale inputs are replicated
/// across channels.
pub fn load_image_rgb(path: &Path, source_id: &str) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|e| Error::ImageLoad {
        source_id: source_id.to_string(),
        reason: format!("{}: {e}", path.display()),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let mut out = Array3::<f32>::zeros((h as usize, w as usize, 3));
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[(y as usize, x as usize, c)] = p.0[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

/// Bilinear resampling with pixel-center alignment. Same-size inputs pass
/// through untouched, which also makes the resize idempotent.
pub fn bilinear_resize(img: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (h, w, c) = img.dim();
    if h == out_h && w == out_w {
        return img.clone();
    }
    let mut out = Array3::<f32>::zeros((out_h, out_w, c));
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    for oy in 0..out_h {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f32;
        for ox in 0..out_w {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f32;
            for ci in 0..c {
                let top = img[(y0, x0, ci)] * (1.0 - wx) + img[(y0, x1, ci)] * wx;
                let bot = img[(y1, x0, ci)] * (1.0 - wx) + img[(y1, x1, ci)] * wx;
                out[(oy, ox, ci)] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

/// Composes two iris crops into the classifier input tensor.
pub fn compose_pair(
    left: &Array3<f32>,
    right: &Array3<f32>,
    mode: ComposeMode,
    out_h: usize,
    out_w: usize,
) -> Result<Array3<f32>> {
    for (name, img) in [("left", left), ("right", right)] {
        let (h, w, _) = img.dim();
        if h == 0 || w == 0 {
            return Err(Error::InvalidConfig(format!("{name} crop is empty")));
        }
    }
    match mode {
        ComposeMode::SideBySide => {
            let half_w = out_w / 2;
            let l = bilinear_resize(left, out_h, half_w);
            let r = bilinear_resize(right, out_h, out_w - half_w);
            let c = l.dim().2;
            let mut out = Array3::<f32>::zeros((out_h, out_w, c));
            out.slice_mut(ndarray::s![.., ..half_w, ..]).assign(&l);
            out.slice_mut(ndarray::s![.., half_w.., ..]).assign(&r);
            Ok(out)
        }
        ComposeMode::ChannelStack => {
            let l = bilinear_resize(left, out_h, out_w);
            let r = bilinear_resize(right, out_h, out_w);
            let c = l.dim().2;
            let mut out = Array3::<f32>::zeros((out_h, out_w, 2 * c));
            out.slice_mut(ndarray::s![.., .., ..c]).assign(&l);
            out.slice_mut(ndarray::s![.., .., c..]).assign(&r);
            Ok(out)
        }
    }
}

/// One composed sample held in memory.
#[derive(Debug, Clone)]
pub struct Sample {
    pub x: Array3<f32>,
    pub label: i8,
    pub source_id: String,
}

/// A manifest fully composed into classifier-ready tensors.
#[derive(Debug, Clone)]
pub struct ComposedDataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub compose_mode: ComposeMode,
    pub input_hw: (usize, usize),
}

impl ComposedDataset {
    /// Loads and composes every manifest row.
    pub fn load(manifest: &SampleManifest, out_h: usize, out_w: usize) -> Result<Self> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for row in &manifest.rows {
            let left = load_image_rgb(&row.left_path, &row.source_id)?;
            let right = load_image_rgb(&row.right_path, &row.source_id)?;
            let x = compose_pair(&left, &right, manifest.compose_mode, out_h, out_w)?;
            let sample = Sample {
                x,
                label: row.label,
                source_id: row.source_id.clone(),
            };
            match row.split {
                Split::Train => train.push(sample),
                Split::Test => test.push(sample),
            }
        }
        Ok(Self {
            train,
            test,
            compose_mode: manifest.compose_mode,
            input_hw: (out_h, out_w),
        })
    }

    /// Stacks the given samples into one NHWC batch tensor.
    pub fn batch_of(samples: &[Sample], indices: &[usize]) -> Array4<f32> {
        let (h, w, c) = samples[indices[0]].x.dim();
        let mut x = Array4::<f32>::zeros((indices.len(), h, w, c));
        for (bi, &si) in indices.iter().enumerate() {
            x.index_axis_mut(ndarray::Axis(0), bi).assign(&samples[si].x);
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_img(h: usize, w: usize) -> Array3<f32> {
        Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            ((y * w + x + c) % 17) as f32 / 17.0
        })
    }

    #[test]
    fn side_by_side_shape_and_symmetry() {
        let img = gradient_img(64, 64);
        let pair = compose_pair(&img, &img, ComposeMode::SideBySide, 96, 96).unwrap();
        assert_eq!(pair.dim(), (96, 96, 3));
        // identical crops -> left half equals right half exactly
        for y in 0..96 {
            for x in 0..48 {
                for c in 0..3 {
                    assert_eq!(pair[(y, x, c)], pair[(y, 48 + x, c)]);
                }
            }
        }
        for &v in pair.iter() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn channel_stack_shape() {
        let img = gradient_img(32, 48);
        let pair = compose_pair(&img, &img, ComposeMode::ChannelStack, 96, 96).unwrap();
        assert_eq!(pair.dim(), (96, 96, 6));
    }

    #[test]
    fn resize_is_identity_at_same_size() {
        let img = gradient_img(48, 96);
        let out = bilinear_resize(&img, 48, 96);
        assert_eq!(img, out);
    }

    #[test]
    fn resize_preserves_constant_images() {
        let img = Array3::<f32>::from_elem((64, 64, 3), 0.4375);
        let out = bilinear_resize(&img, 96, 48);
        for &v in out.iter() {
            assert!((v - 0.4375).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_crop_is_rejected() {
        let img = gradient_img(4, 4);
        let empty = Array3::<f32>::zeros((0, 4, 3));
        assert!(compose_pair(&empty, &img, ComposeMode::SideBySide, 96, 96).is_err());
    }
}
