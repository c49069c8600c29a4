//! Artifact emission: metric blocks, curve data files, plot rendering, and
//! attention-map panels.
//!
//! Data files are the authoritative, diffable outputs; the rendered PNGs are
//! a convenience view of the same numbers.

use std::path::Path;

use ndarray::{Array2, Array3};

use crate::data::synth::SidecarData;
use crate::data::ComposeMode;
use crate::error::Result;
use crate::metrics::{ConfusionMatrix, MetricSummary};

/// Writes the flat `key=value` metric block.
pub fn write_metric_block(summary: &MetricSummary, path: &Path) -> Result<()> {
    std::fs::write(path, summary.to_kv_block())?;
    Ok(())
}

/// Two-column tab-separated curve file.
pub fn write_curve_tsv(points: &[(f64, f64)], header: (&str, &str), path: &Path) -> Result<()> {
    let mut out = format!("{}\t{}\n", header.0, header.1);
    for (x, y) in points {
        out.push_str(&format!("{x}\t{y}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Confusion counts as a small text table.
pub fn write_confusion(cm: &ConfusionMatrix, path: &Path) -> Result<()> {
    let text = format!(
        "counts
tp={}
fp={}
tn={}
fn={}
",
        cm.true_pos, cm.false_pos, cm.true_neg, cm.false_neg
    );
    std::fs::write(path, text)?;
    Ok(())
}

/// Alpha-sweep table: `alpha<TAB>auc` rows.
pub fn write_alpha_sweep(table: &[(f64, f64)], path: &Path) -> Result<()> {
    let mut out = String::from("alpha\tauc\n");
    for (a, auc) in table {
        out.push_str(&format!("{a}\t{auc}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// plot rendering
// ---------------------------------------------------------------------------

const PLOT_SIZE: u32 = 480;
const MARGIN: u32 = 40;

fn blank_canvas() -> image::RgbImage {
    image::RgbImage::from_pixel(PLOT_SIZE, PLOT_SIZE, image::Rgb([255, 255, 255]))
}

fn to_canvas(x: f64, y: f64) -> (i64, i64) {
    let span = (PLOT_SIZE - 2 * MARGIN) as f64;
    let px = MARGIN as f64 + x.clamp(0.0, 1.0) * span;
    let py = (PLOT_SIZE - MARGIN) as f64 - y.clamp(0.0, 1.0) * span;
    (px.round() as i64, py.round() as i64)
}

fn draw_line(img: &mut image::RgbImage, a: (i64, i64), b: (i64, i64), color: [u8; 3]) {
    //整数 Bresenham
    let (mut x0, mut y0) = a;
    let (x1, y1) = b;
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x0 >= 0 && y0 >= 0 && (x0 as u32) < img.width() && (y0 as u32) < img.height() {
            img.put_pixel(x0 as u32, y0 as u32, image::Rgb(color));
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// Renders a unit-square curve (ROC, PR, or sweep) as a PNG with axes, a
/// quarter grid, and the diagonal for reference.
pub fn plot_curve_png(points: &[(f64, f64)], path: &Path) -> Result<()> {
    let mut img = blank_canvas();
    // grid
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        draw_line(&mut img, to_canvas(t, 0.0), to_canvas(t, 1.0), [225, 225, 225]);
        draw_line(&mut img, to_canvas(0.0, t), to_canvas(1.0, t), [225, 225, 225]);
    }
    // diagonal reference
    draw_line(&mut img, to_canvas(0.0, 0.0), to_canvas(1.0, 1.0), [200, 200, 200]);
    // axes
    draw_line(&mut img, to_canvas(0.0, 0.0), to_canvas(1.0, 0.0), [0, 0, 0]);
    draw_line(&mut img, to_canvas(0.0, 0.0), to_canvas(0.0, 1.0), [0, 0, 0]);
    // curve
    for w in points.windows(2) {
        draw_line(&mut img, to_canvas(w[0].0, w[0].1), to_canvas(w[1].0, w[1].1), [178, 34, 34]);
    }
    img.save(path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// attention panels
// ---------------------------------------------------------------------------

/// Nearest-neighbor upsample of a single-channel map to the given size.
pub fn upsample_mask(mask: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        mask[((y * h / out_h).min(h - 1), (x * w / out_w).min(w - 1))]
    })
}

/// Saves a (0,1)-valued map as grayscale, values mapped linearly onto the
/// full 8-bit range.
pub fn save_mask_png(mask: &Array2<f32>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (mask[(y, x)].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save(path)?;
    Ok(())
}

// 5x7 digit glyphs for stamping scores into panels
const GLYPHS: [(char, [u8; 7]); 12] = [
    ('0', [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110]),
    ('1', [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110]),
    ('2', [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111]),
    ('3', [0b11110, 0b00001, 0b00001, 0b01110, 0b00001, 0b00001, 0b11110]),
    ('4', [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010]),
    ('5', [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110]),
    ('6', [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110]),
    ('7', [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000]),
    ('8', [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110]),
    ('9', [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100]),
    ('.', [0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b01100, 0b01100]),
    (' ', [0; 7]),
];

fn stamp_text(img: &mut image::RgbImage, text: &str, x0: u32, y0: u32, scale: u32) {
    let mut cx = x0;
    for ch in text.chars() {
        let Some((_, rows)) = GLYPHS.iter().find(|(g, _)| *g == ch) else {
            cx += 6 * scale;
            continue;
        };
        for (ry, bits) in rows.iter().enumerate() {
            for rx in 0..5 {
                if bits & (1 << (4 - rx)) != 0 {
                    for sy in 0..scale {
                        for sx in 0..scale {
                            let px = cx + rx as u32 * scale + sx;
                            let py = y0 + ry as u32 * scale + sy;
                            if px < img.width() && py < img.height() {
                                img.put_pixel(px, py, image::Rgb([255, 32, 32]));
                            }
                        }
                    }
                }
            }
        }
        cx += 6 * scale;
    }
}

fn rgb_tile(img: &Array3<f32>) -> image::RgbImage {
    let (h, w, c) = img.dim();
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = if c >= 3 {
                [
                    (img[(y, x, 0)] * 255.0).clamp(0.0, 255.0) as u8,
                    (img[(y, x, 1)] * 255.0).clamp(0.0, 255.0) as u8,
                    (img[(y, x, 2)] * 255.0).clamp(0.0, 255.0) as u8,
                ]
            } else {
                let v = (img[(y, x, 0)] * 255.0).clamp(0.0, 255.0) as u8;
                [v, v, v]
            };
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    out
}

/// Displayable RGB view of a composed pair, handling the 6-channel stacking
/// mode by placing the two eyes side by side.
pub fn pair_to_rgb(pair: &Array3<f32>, mode: ComposeMode) -> Array3<f32> {
    match mode {
        ComposeMode::SideBySide => pair.clone(),
        ComposeMode::ChannelStack => {
            let (h, w, _) = pair.dim();
            let mut out = Array3::<f32>::zeros((h, 2 * w, 3));
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        out[(y, x, c)] = pair[(y, x, c)];
                        out[(y, w + x, c)] = pair[(y, x, 3 + c)];
                    }
                }
            }
            out
        }
    }
}

/// One sample's panel: the composed pair followed by each stage's mask
/// (upsampled to input size), with the predicted score stamped into the
/// first tile.
pub fn render_panel(
    pair_rgb: &Array3<f32>,
    masks: &[Array2<f32>],
    score: f64,
    path: &Path,
) -> Result<()> {
    let (h, w, _) = pair_rgb.dim();
    let gap = 2usize;
    let total_w = w + masks.iter().map(|m| m.dim().1 + gap).sum::<usize>();
    let mut canvas = image::RgbImage::from_pixel(total_w as u32, h as u32, image::Rgb([30, 30, 30]));
    let tile = rgb_tile(pair_rgb);
    image::imageops::replace(&mut canvas, &tile, 0, 0);
    let mut x_off = w + gap;
    for mask in masks {
        let (mh, mw) = mask.dim();
        let mut gray = Array3::<f32>::zeros((mh, mw, 1));
        for y in 0..mh {
            for x in 0..mw {
                gray[(y, x, 0)] = mask[(y, x)];
            }
        }
        let tile = rgb_tile(&gray);
        image::imageops::replace(&mut canvas, &tile, x_off as i64, 0);
        x_off += mw + gap;
    }
    stamp_text(&mut canvas, &format!("{score:.2}"), 2, 2, 2);
    canvas.save(path)?;
    Ok(())
}

/// Ground-truth highlight disks mapped from eye-image coordinates into the
/// composed-pair frame.
pub fn highlights_in_pair_frame(
    geometry: &SidecarData,
    eye_size: usize,
    out_h: usize,
    out_w: usize,
    mode: ComposeMode,
) -> Vec<(f64, f64, f64)> {
    let s = eye_size as f64;
    let mut out = Vec::new();
    match mode {
        ComposeMode::SideBySide => {
            let half = (out_w / 2) as f64;
            let sx = half / s;
            let sy = out_h as f64 / s;
            for h in &geometry.left.highlights {
                out.push((h.cx * sx, h.cy * sy, h.radius * sx.max(sy)));
            }
            for h in &geometry.right.highlights {
                out.push((half + h.cx * sx, h.cy * sy, h.radius * sx.max(sy)));
            }
        }
        ComposeMode::ChannelStack => {
            let sx = out_w as f64 / s;
            let sy = out_h as f64 / s;
            for h in geometry
                .left
                .highlights
                .iter()
                .chain(&geometry.right.highlights)
            {
                out.push((h.cx * sx, h.cy * sy, h.radius * sx.max(sy)));
            }
        }
    }
    out
}

/// Mean mask value inside vs outside the given disks.
pub fn mask_focus(mask: &Array2<f32>, disks: &[(f64, f64, f64)]) -> (f64, f64) {
    let (h, w) = mask.dim();
    let mut sum_in = 0.0;
    let mut n_in = 0usize;
    let mut sum_out = 0.0;
    let mut n_out = 0usize;
    for y in 0..h {
        for x in 0..w {
            let fx = x as f64 + 0.5;
            let fy = y as f64 + 0.5;
            let inside = disks
                .iter()
                .any(|&(cx, cy, r)| ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt() <= r * 1.5);
            if inside {
                sum_in += mask[(y, x)] as f64;
                n_in += 1;
            } else {
                sum_out += mask[(y, x)] as f64;
                n_out += 1;
            }
        }
    }
    (
        if n_in == 0 { 0.0 } else { sum_in / n_in as f64 },
        if n_out == 0 { 0.0 } else { sum_out / n_out as f64 },
    )
}
