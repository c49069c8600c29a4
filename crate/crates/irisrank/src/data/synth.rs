//! Procedural eye-pair corpus with controllable specular-highlight
//! consistency.
//!
//! Each sample is a pair of 64x64 eye crops: skin, an eye-opening ellipse of
//! sclera, a textured iris annulus with a dark pupil, and bright corneal
//! highlights. The real class renders both eyes with consistent highlights
//! (same count, positions within a pixel, matched intensity); the fake class
//! perturbs highlight positions with Gaussian jitter and optionally flips the
//! count or shifts the intensity. Everything else (noise, illumination gain,
//! small geometric jitter) varies identically in both classes, so the
//! highlight inconsistency is the only class signal.
//!
//! Ground truth geometry goes into one text sidecar per sample:
//! `eye,cx,cy,radius,value` rows, iris circles first, then highlights.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::manifest::{ManifestRow, SampleManifest};
use super::{ComposeMode, Split, LABEL_GAN, LABEL_REAL};
use crate::error::{Error, Result};

/// Generator parameters; the generator is a pure function of this struct.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub per_class: usize,
    /// Eye crop side length in pixels.
    pub eye_size: usize,
    /// Std-dev (pixels) of the fake-class highlight position jitter.
    pub highlight_sigma: f64,
    /// Probability that a fake pair disagrees on highlight count.
    pub count_mismatch_prob: f64,
    /// Half-width of the fake-class intensity shift, uniform in ±range.
    pub intensity_range: f64,
    /// Fraction of each class assigned to the train split.
    pub train_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            per_class: 100,
            eye_size: 64,
            highlight_sigma: 6.0,
            count_mismatch_prob: 0.5,
            intensity_range: 0.3,
            train_fraction: 0.8,
        }
    }
}

/// One rendered highlight, in eye-image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Highlight {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub intensity: f64,
}

/// Ground-truth geometry of one eye.
#[derive(Debug, Clone)]
pub struct EyeGeometry {
    /// Iris circle: center and radius.
    pub iris_cx: f64,
    pub iris_cy: f64,
    pub iris_r: f64,
    pub highlights: Vec<Highlight>,
}

/// Sidecar contents for one sample.
#[derive(Debug, Clone)]
pub struct SidecarData {
    pub left: EyeGeometry,
    pub right: EyeGeometry,
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

struct FaceParams {
    iris_cx: f64,
    iris_cy: f64,
    iris_r: f64,
    pupil_frac: f64,
    iris_color: [f64; 3],
    skin: [f64; 3],
    sclera: f64,
    texture_k: f64,
    texture_phase: f64,
    highlights: Vec<Highlight>,
}

/// Per-eye deviations applied in both classes.
struct EyeNuisance {
    dx: f64,
    dy: f64,
    dr: f64,
    gain: f64,
    noise_seed: u64,
    texture_dphase: f64,
}

fn render_eye(
    size: usize,
    face: &FaceParams,
    nuisance: &EyeNuisance,
    highlights: &[Highlight],
) -> Array3<f32> {
    let s = size as f64;
    let cx = face.iris_cx + nuisance.dx;
    let cy = face.iris_cy + nuisance.dy;
    let r = (face.iris_r + nuisance.dr).max(4.0);
    let pupil_r = r * face.pupil_frac;
    let mut img = Array3::<f32>::zeros((size, size, 3));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(nuisance.noise_seed);
    let noise = Normal::new(0.0f64, 0.015).expect("valid normal");
    // eye opening: almond-shaped ellipse centered on the crop
    let (ecx, ecy) = (s / 2.0, s / 2.0);
    let (ea, eb) = (s * 0.46, s * 0.33);
    for y in 0..size {
        for x in 0..size {
            let fx = x as f64 + 0.5;
            let fy = y as f64 + 0.5;
            let e = ((fx - ecx) / ea).powi(2) + ((fy - ecy) / eb).powi(2);
            let opening = smoothstep(1.05, 0.95, e);
            let d = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt();

            // layered surface color: skin -> sclera -> iris -> pupil
            let mut col = face.skin;
            let sclera = [face.sclera, face.sclera * 0.985, face.sclera * 0.96];
            for c in 0..3 {
                col[c] = col[c] * (1.0 - opening) + sclera[c] * opening;
            }
            let iris_cover = smoothstep(r + 0.8, r - 0.8, d) * opening;
            if iris_cover > 0.0 {
                let theta = (fy - cy).atan2(fx - cx);
                let streaks = 1.0
                    + 0.16
                        * (face.texture_k * theta + face.texture_phase + nuisance.texture_dphase)
                            .sin();
                let radial = 0.72 + 0.28 * (1.0 - (d / r).min(1.0)).powi(2);
                let limbus = 0.55 + 0.45 * smoothstep(1.0, 0.82, d / r);
                for c in 0..3 {
                    let iris_v = face.iris_color[c] * streaks * radial * limbus;
                    col[c] = col[c] * (1.0 - iris_cover) + iris_v * iris_cover;
                }
            }
            let pupil_cover = smoothstep(pupil_r + 0.7, pupil_r - 0.7, d) * opening;
            if pupil_cover > 0.0 {
                for c in &mut col {
                    *c = *c * (1.0 - pupil_cover) + 0.06 * pupil_cover;
                }
            }
            // additive specular highlights
            for h in highlights {
                let hd2 = (fx - h.cx).powi(2) + (fy - h.cy).powi(2);
                let sdev = h.radius / 1.6;
                let a = h.intensity * (-hd2 / (2.0 * sdev * sdev)).exp() * opening;
                if a > 1e-4 {
                    for c in &mut col {
                        *c += a;
                    }
                }
            }
            for (c, v) in col.iter().enumerate() {
                let n = noise.sample(&mut noise_rng);
                img[(y, x, c)] = ((v * nuisance.gain + n).clamp(0.0, 1.0)) as f32;
            }
        }
    }
    img
}

fn sample_face(rng: &mut ChaCha8Rng, size: usize) -> FaceParams {
    let s = size as f64;
    let palette: [[f64; 3]; 4] = [
        [0.36, 0.22, 0.12], // brown
        [0.24, 0.33, 0.42], // blue-grey
        [0.22, 0.32, 0.21], // green
        [0.42, 0.30, 0.16], // hazel
    ];
    let base: [f64; 3] = palette[rng.random_range(0..palette.len())];
    let mut iris_color = [0.0; 3];
    for c in 0..3 {
        iris_color[c] = (base[c] + rng.random_range(-0.05..0.05)).clamp(0.05, 0.9);
    }
    let skin_base = rng.random_range(0.62..0.82);
    let iris_r = rng.random_range(s * 0.20..s * 0.30);
    let count = if rng.random_bool(0.5) { 1 } else { 2 };
    let mut highlights = Vec::new();
    let cx = s / 2.0 + rng.random_range(-3.0..3.0);
    let cy = s / 2.0 + rng.random_range(-3.0..3.0);
    for _ in 0..count {
        let rho = rng.random_range(0.15..0.55) * iris_r;
        let ang = rng.random_range(0.0..2.0 * PI);
        highlights.push(Highlight {
            cx: cx + rho * ang.cos(),
            cy: cy + rho * ang.sin(),
            radius: rng.random_range(2.2..4.0),
            intensity: rng.random_range(0.75..1.0),
        });
    }
    FaceParams {
        iris_cx: cx,
        iris_cy: cy,
        iris_r,
        pupil_frac: rng.random_range(0.33..0.48),
        iris_color,
        skin: [skin_base, skin_base * 0.82, skin_base * 0.68],
        sclera: rng.random_range(0.86..0.94),
        texture_k: rng.random_range(9.0..14.0) as f64,
        texture_phase: rng.random_range(0.0..2.0 * PI),
        highlights,
    }
}

fn nuisance(rng: &mut ChaCha8Rng) -> EyeNuisance {
    EyeNuisance {
        dx: rng.random_range(-1.0..1.0),
        dy: rng.random_range(-1.0..1.0),
        dr: rng.random_range(-0.5..0.5),
        gain: rng.random_range(0.95..1.05),
        noise_seed: rng.random(),
        texture_dphase: rng.random_range(-0.15..0.15),
    }
}

/// Right-eye highlights for a consistent (real) pair: positions within one
/// pixel, intensity within 0.02.
fn consistent_highlights(rng: &mut ChaCha8Rng, base: &[Highlight]) -> Vec<Highlight> {
    base.iter()
        .map(|h| Highlight {
            cx: h.cx + rng.random_range(-1.0..1.0),
            cy: h.cy + rng.random_range(-1.0..1.0),
            radius: h.radius,
            intensity: (h.intensity + rng.random_range(-0.02..0.02)).clamp(0.2, 1.0),
        })
        .collect()
}

/// Right-eye highlights for an inconsistent (fake) pair: the consistent
/// rendering plus Gaussian position jitter, optional count mismatch, and a
/// uniform intensity shift. All three collapse to the consistent pair when
/// the spec parameters are zero.
fn inconsistent_highlights(
    rng: &mut ChaCha8Rng,
    base: &[Highlight],
    spec: &SyntheticSpec,
    iris_cx: f64,
    iris_cy: f64,
    iris_r: f64,
) -> Vec<Highlight> {
    let mut out = consistent_highlights(rng, base);
    let jitter = Normal::new(0.0, spec.highlight_sigma.max(0.0)).expect("valid normal");
    for h in &mut out {
        if spec.highlight_sigma > 0.0 {
            h.cx += jitter.sample(rng);
            h.cy += jitter.sample(rng);
        }
        if spec.intensity_range > 0.0 {
            let shift = rng.random_range(-spec.intensity_range..spec.intensity_range);
            h.intensity = (h.intensity + shift).clamp(0.15, 1.0);
        }
    }
    if spec.count_mismatch_prob > 0.0 && rng.random_bool(spec.count_mismatch_prob) {
        if out.len() > 1 {
            let drop = rng.random_range(0..out.len());
            out.remove(drop);
        } else {
            let rho = rng.random_range(0.15..0.55) * iris_r;
            let ang = rng.random_range(0.0..2.0 * PI);
            out.push(Highlight {
                cx: iris_cx + rho * ang.cos(),
                cy: iris_cy + rho * ang.sin(),
                radius: rng.random_range(2.2..4.0),
                intensity: rng.random_range(0.75..1.0),
            });
        }
    }
    out
}

fn save_png(img: &Array3<f32>, path: &Path) -> Result<()> {
    let (h, w, _) = img.dim();
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (img[(y, x, 0)] * 255.0).round().clamp(0.0, 255.0) as u8,
                (img[(y, x, 1)] * 255.0).round().clamp(0.0, 255.0) as u8,
                (img[(y, x, 2)] * 255.0).round().clamp(0.0, 255.0) as u8,
            ];
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    out.save(path)?;
    Ok(())
}

fn write_sidecar(path: &Path, data: &SidecarData) -> Result<()> {
    let mut text = String::from("# iris: eye,cx,cy,radius,level\n");
    for (eye, g) in [("L", &data.left), ("R", &data.right)] {
        text.push_str(&format!(
            "{eye},{:.3},{:.3},{:.3},0\n",
            g.iris_cx, g.iris_cy, g.iris_r
        ));
    }
    text.push_str("# highlights: eye,cx,cy,radius,intensity\n");
    for (eye, g) in [("L", &data.left), ("R", &data.right)] {
        for h in &g.highlights {
            text.push_str(&format!(
                "{eye},{:.3},{:.3},{:.3},{:.4}\n",
                h.cx, h.cy, h.radius, h.intensity
            ));
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Reads a generator sidecar back.
pub fn read_sidecar(path: &Path) -> Result<SidecarData> {
    let text = std::fs::read_to_string(path)?;
    let mut left = EyeGeometry {
        iris_cx: 0.0,
        iris_cy: 0.0,
        iris_r: 0.0,
        highlights: Vec::new(),
    };
    let mut right = left.clone();
    let mut in_iris = true;
    let mut saw_iris = [false; 2];
    for line in text.lines() {
        if line.starts_with("# iris") {
            in_iris = true;
            continue;
        }
        if line.starts_with("# highlights") {
            in_iris = false;
            continue;
        }
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(Error::Manifest(format!("bad sidecar row {line:?}")));
        }
        let vals: Vec<f64> = f[1..]
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Manifest(format!("bad sidecar number: {e}")))?;
        let geo = match f[0] {
            "L" => &mut left,
            "R" => &mut right,
            other => return Err(Error::Manifest(format!("bad sidecar eye {other:?}"))),
        };
        if in_iris {
            geo.iris_cx = vals[0];
            geo.iris_cy = vals[1];
            geo.iris_r = vals[2];
            saw_iris[if f[0] == "L" { 0 } else { 1 }] = true;
        } else {
            geo.highlights.push(Highlight {
                cx: vals[0],
                cy: vals[1],
                radius: vals[2],
                intensity: vals[3],
            });
        }
    }
    if !saw_iris[0] || !saw_iris[1] {
        return Err(Error::Manifest("sidecar missing iris rows".into()));
    }
    Ok(SidecarData { left, right })
}

/// Renders the corpus under `out_dir/real` and `out_dir/gan` with one sidecar
/// per sample, returning a manifest with a per-class train/test split.
///
/// Byte-identical for equal specs: every sample derives its own rng stream
/// from `(seed, class, index)` and the render is a pure function of it.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<SampleManifest> {
    if spec.per_class == 0 {
        return Err(Error::InvalidConfig("per_class must be positive".into()));
    }
    if spec.eye_size < 32 {
        return Err(Error::InvalidConfig("eye_size must be at least 32".into()));
    }
    let real_dir = out_dir.join("real");
    let gan_dir = out_dir.join("gan");
    std::fs::create_dir_all(&real_dir)?;
    std::fs::create_dir_all(&gan_dir)?;

    let mut rows = Vec::with_capacity(2 * spec.per_class);
    let train_count = (spec.per_class as f64 * spec.train_fraction).floor() as usize;
    for (class_tag, label, dir) in [("real", LABEL_REAL, &real_dir), ("gan", LABEL_GAN, &gan_dir)]
    {
        for i in 0..spec.per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let class_bit = if label == LABEL_GAN { 1u64 << 40 } else { 0 };
            rng.set_stream(class_bit | i as u64);

            let face = sample_face(&mut rng, spec.eye_size);
            let left_nui = nuisance(&mut rng);
            let right_nui = nuisance(&mut rng);
            let left_h = face.highlights.clone();
            let right_h = if label == LABEL_REAL {
                consistent_highlights(&mut rng, &face.highlights)
            } else {
                inconsistent_highlights(
                    &mut rng,
                    &face.highlights,
                    spec,
                    face.iris_cx,
                    face.iris_cy,
                    face.iris_r,
                )
            };
            let left_img = render_eye(spec.eye_size, &face, &left_nui, &left_h);
            let right_img = render_eye(spec.eye_size, &face, &right_nui, &right_h);

            let id = format!("{class_tag}_{i:05}");
            let left_path = dir.join(format!("{id}_L.png"));
            let right_path = dir.join(format!("{id}_R.png"));
            save_png(&left_img, &left_path)?;
            save_png(&right_img, &right_path)?;
            write_sidecar(
                &dir.join(format!("{id}.txt")),
                &SidecarData {
                    left: EyeGeometry {
                        iris_cx: face.iris_cx + left_nui.dx,
                        iris_cy: face.iris_cy + left_nui.dy,
                        iris_r: face.iris_r + left_nui.dr,
                        highlights: left_h,
                    },
                    right: EyeGeometry {
                        iris_cx: face.iris_cx + right_nui.dx,
                        iris_cy: face.iris_cy + right_nui.dy,
                        iris_r: face.iris_r + right_nui.dr,
                        highlights: right_h,
                    },
                },
            )?;
            rows.push(ManifestRow {
                left_path,
                right_path,
                label,
                split: if i < train_count {
                    Split::Train
                } else {
                    Split::Test
                },
                source_id: id,
            });
        }
    }
    Ok(SampleManifest {
        rows,
        compose_mode: ComposeMode::default(),
    })
}

/// Path of the sidecar written next to a sample's eye images.
pub fn sidecar_path(row: &ManifestRow) -> PathBuf {
    let mut p = row.left_path.clone();
    p.set_file_name(format!("{}.txt", row.source_id));
    p
}

/// Desk-scale baseline: mean absolute left/right difference inside the iris
/// band, the region where highlight inconsistencies live. Used as an oracle
/// that the generated classes are separable before any learning happens.
pub fn highlight_band_difference(
    left: &Array3<f32>,
    right: &Array3<f32>,
    geometry: &SidecarData,
) -> f64 {
    let (h, w, c) = left.dim();
    let g = &geometry.left;
    let r_band = g.iris_r + 2.0;
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w.min(right.dim().1) {
            let d = ((x as f64 + 0.5 - g.iris_cx).powi(2)
                + (y as f64 + 0.5 - g.iris_cy).powi(2))
            .sqrt();
            if d <= r_band {
                for ci in 0..c {
                    sum += (left[(y, x, ci)] - right[(y, x, ci)]).abs() as f64;
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::compose::load_image_rgb;
    use crate::metrics::{auc_wmw, ScoreSet};

    fn tree_digest(dir: &Path) -> Vec<(String, u64)> {
        let mut entries = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in std::fs::read_dir(&d).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let bytes = std::fs::read(&p).unwrap();
                    let mut hash = 1469598103934665603u64;
                    for b in bytes {
                        hash ^= b as u64;
                        hash = hash.wrapping_mul(1099511628211);
                    }
                    entries.push((
                        p.strip_prefix(dir).unwrap().to_string_lossy().into_owned(),
                        hash,
                    ));
                }
            }
        }
        entries.sort();
        entries
    }

    #[test]
    fn generation_is_byte_identical_for_equal_specs() {
        let spec = SyntheticSpec {
            seed: 7,
            per_class: 6,
            ..SyntheticSpec::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = generate_synthetic(&spec, d1.path()).unwrap();
        let m2 = generate_synthetic(&spec, d2.path()).unwrap();
        assert_eq!(m1.rows.len(), 12);
        assert_eq!(m2.rows.len(), 12);
        assert_eq!(tree_digest(d1.path()), tree_digest(d2.path()));
    }

    fn baseline_auc(spec: &SyntheticSpec, dir: &Path) -> f64 {
        let manifest = generate_synthetic(spec, dir).unwrap();
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for row in &manifest.rows {
            let left = load_image_rgb(&row.left_path, &row.source_id).unwrap();
            let right = load_image_rgb(&row.right_path, &row.source_id).unwrap();
            let geo = read_sidecar(&sidecar_path(row)).unwrap();
            let diff = highlight_band_difference(&left, &right, &geo);
            // squash to [0,1]; rank metrics only care about order
            scores.push(diff.min(1.0));
            labels.push(row.label);
        }
        auc_wmw(&ScoreSet::new(scores, labels).unwrap()).unwrap()
    }

    #[test]
    fn default_spec_is_separable_by_pixel_difference() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            seed: 11,
            per_class: 60,
            ..SyntheticSpec::default()
        };
        let auc = baseline_auc(&spec, dir.path());
        assert!(auc > 0.8, "pixel-difference baseline AUC {auc} <= 0.8");
    }

    #[test]
    fn degenerate_spec_removes_the_signal() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            seed: 13,
            per_class: 40,
            highlight_sigma: 0.0,
            count_mismatch_prob: 0.0,
            intensity_range: 0.0,
            ..SyntheticSpec::default()
        };
        let auc = baseline_auc(&spec, dir.path());
        assert!(
            (0.3..=0.7).contains(&auc),
            "degenerate spec should be near chance, got {auc}"
        );
    }

    #[test]
    fn sidecar_matches_rendered_highlight_centroids() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            seed: 17,
            per_class: 24,
            ..SyntheticSpec::default()
        };
        let manifest = generate_synthetic(&spec, dir.path()).unwrap();
        let mut checked = 0usize;
        for row in &manifest.rows {
            let geo = read_sidecar(&sidecar_path(row)).unwrap();
            for (path, eye) in [(&row.left_path, &geo.left), (&row.right_path, &geo.right)] {
                let img = load_image_rgb(path, &row.source_id).unwrap();
                for hl in &eye.highlights {
                    // only bright highlights fully inside the dark iris give
                    // an unambiguous centroid against the background
                    let center_dist = ((hl.cx - eye.iris_cx).powi(2)
                        + (hl.cy - eye.iris_cy).powi(2))
                    .sqrt();
                    if hl.intensity < 0.7 || center_dist + 2.0 * hl.radius > eye.iris_r {
                        continue;
                    }
                    // a neighboring highlight inside the window would drag
                    // the centroid; skip such pairs
                    let isolated = eye.highlights.iter().all(|other| {
                        std::ptr::eq(other, hl)
                            || ((other.cx - hl.cx).powi(2) + (other.cy - hl.cy).powi(2)).sqrt()
                                > 2.0 * (other.radius + hl.radius)
                    });
                    if !isolated {
                        continue;
                    }
                    let (mut sx, mut sy, mut sw) = (0.0f64, 0.0f64, 0.0f64);
                    let rad = (hl.radius * 2.0).ceil() as isize;
                    let (h, w, _) = img.dim();
                    for dy in -rad..=rad {
                        for dx in -rad..=rad {
                            let x = hl.cx as isize + dx;
                            let y = hl.cy as isize + dy;
                            if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                                continue;
                            }
                            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                            let in_iris = ((fx - eye.iris_cx).powi(2)
                                + (fy - eye.iris_cy).powi(2))
                            .sqrt()
                                < eye.iris_r - 0.5;
                            if !in_iris {
                                continue;
                            }
                            let lum = img[(y as usize, x as usize, 0)] as f64
                                + img[(y as usize, x as usize, 1)] as f64
                                + img[(y as usize, x as usize, 2)] as f64;
                            // weight only the near-peak core so background
                            // variation under the blob cannot bias the mean
                            let excess = (lum - 2.6).max(0.0);
                            sx += excess * fx;
                            sy += excess * fy;
                            sw += excess;
                        }
                    }
                    if sw < 1.0 {
                        continue;
                    }
                    let (gx, gy) = (sx / sw, sy / sw);
                    let err = ((gx - hl.cx).powi(2) + (gy - hl.cy).powi(2)).sqrt();
                    assert!(
                        err < 1.5,
                        "{}: centroid off by {err:.2}px (claimed {:.1},{:.1}, got {gx:.1},{gy:.1})",
                        row.source_id,
                        hl.cx,
                        hl.cy
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 10, "too few highlights verified ({checked})");
    }

    #[test]
    fn rejects_zero_count() {
        let spec = SyntheticSpec {
            per_class: 0,
            ..SyntheticSpec::default()
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_synthetic(&spec, dir.path()).is_err());
    }
}
