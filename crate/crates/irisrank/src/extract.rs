//! Face-to-iris-pair front-end.
//!
//! Heavy landmark and segmentation models are deliberately replaceable here:
//! callers program against the [`EyeDetector`] / [`IrisSegmenter`] traits,
//! and a deterministic geometric fallback ([`GeometricFallback`]) makes the
//! whole pipeline runnable without any learned detector. The fallback
//! thresholds the crop with Otsu's method, keeps the largest dark connected
//! component that is sufficiently circular, and fits its minimal enclosing
//! circle.
//!
//! All coordinates are reported in source-image space and inputs are never
//! mutated.

use ndarray::{Array2, Array3};

/// A crop around one eye, with its placement in the source image.
#[derive(Debug, Clone)]
pub struct EyeRegion {
    pub crop: Array3<f32>,
    /// (x, y, width, height) of the crop in source-image coordinates.
    pub bbox: (usize, usize, usize, usize),
    pub side: EyeSide,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EyeSide {
    Left,
    Right,
}

/// One segmented iris.
#[derive(Debug, Clone)]
pub struct IrisDetection {
    pub side: EyeSide,
    /// (x, y, width, height) in source-image coordinates.
    pub bbox: (usize, usize, usize, usize),
    /// Binary mask over the bbox (row-major, true = iris).
    pub mask: Array2<bool>,
    /// Circle fit in source-image coordinates.
    pub center: (f64, f64),
    pub radius: f64,
    pub confidence: f64,
}

/// Why an extraction stage produced nothing. Backends must return this
/// instead of failing hard.
#[derive(Debug, Clone)]
pub struct NotFound {
    pub reason: String,
}

impl NotFound {
    fn new(reason: impl Into<String>) -> Self {
        Self {
            reason: reason.into(),
        }
    }
}

pub type Detected<T> = std::result::Result<T, NotFound>;

/// Locates the two eye regions of a face image.
pub trait EyeDetector: Send + Sync {
    fn detect_eyes(&self, face: &Array3<f32>) -> Detected<(EyeRegion, EyeRegion)>;
    fn name(&self) -> &str;
    /// Whether one instance may serve many threads concurrently.
    fn share_safe(&self) -> bool {
        true
    }
}

/// Segments the iris inside one eye region.
pub trait IrisSegmenter: Send + Sync {
    fn segment(&self, eye: &EyeRegion) -> Detected<IrisDetection>;
    fn name(&self) -> &str;
    fn share_safe(&self) -> bool {
        true
    }
}

/// Runs a detector backend, ordering the result (left, right) by x.
pub fn detect_eyes(
    face: &Array3<f32>,
    backend: &dyn EyeDetector,
) -> Detected<(EyeRegion, EyeRegion)> {
    let (a, b) = backend.detect_eyes(face)?;
    if a.bbox.0 <= b.bbox.0 {
        Ok((a, b))
    } else {
        let (mut b, mut a) = (b, a);
        b.side = EyeSide::Left;
        a.side = EyeSide::Right;
        Ok((b, a))
    }
}

/// Runs a segmenter backend on one eye region.
pub fn segment_iris(eye: &EyeRegion, backend: &dyn IrisSegmenter) -> Detected<IrisDetection> {
    backend.segment(eye)
}

// ---------------------------------------------------------------------------
// geometric fallback backend
// ---------------------------------------------------------------------------

/// Deterministic stand-in for learned detectors: dark-component analysis
/// with a circularity gate. The 0.6 circularity and related constants are
/// calibration values of this fallback, not properties of the problem.
#[derive(Debug, Clone)]
pub struct GeometricFallback {
    /// Components below this `4*pi*A/P^2` circularity are rejected.
    pub min_circularity: f64,
    /// Eye crops are this factor larger than the detected circle's box.
    pub crop_margin: f64,
}

impl Default for GeometricFallback {
    fn default() -> Self {
        Self {
            min_circularity: 0.6,
            crop_margin: 1.6,
        }
    }
}

fn to_gray(img: &Array3<f32>) -> Array2<f32> {
    let (h, w, c) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        if c >= 3 {
            0.299 * img[(y, x, 0)] + 0.587 * img[(y, x, 1)] + 0.114 * img[(y, x, 2)]
        } else {
            img[(y, x, 0)]
        }
    })
}

/// Otsu's threshold over a 256-bin histogram.
fn otsu_threshold(gray: &Array2<f32>) -> f32 {
    let mut hist = [0u32; 256];
    for &v in gray.iter() {
        let bin = (v * 255.0).clamp(0.0, 255.0) as usize;
        hist[bin] += 1;
    }
    let total: u64 = hist.iter().map(|&c| c as u64).sum();
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let mut best_t = 0usize;
    let mut best_var = -1.0f64;
    let mut w0 = 0f64;
    let mut sum0 = 0f64;
    for t in 0..256 {
        w0 += hist[t] as f64;
        if w0 == 0.0 {
            continue;
        }
        let w1 = total as f64 - w0;
        if w1 == 0.0 {
            break;
        }
        sum0 += t as f64 * hist[t] as f64;
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best_var {
            best_var = between;
            best_t = t;
        }
    }
    (best_t as f32 + 0.5) / 255.0
}

#[derive(Debug)]
struct Component {
    area_filled: usize,
    perimeter: usize,
    filled: Array2<bool>,
    /// (x, y, w, h) of the component bounding box in crop coordinates.
    bbox: (usize, usize, usize, usize),
}

/// 4-connected components of `mask`, visited in scan order.
fn connected_components(mask: &Array2<bool>) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = mask.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut components = Vec::new();
    let mut next = 1u32;
    for sy in 0..h {
        for sx in 0..w {
            if !mask[(sy, sx)] || labels[(sy, sx)] != 0 {
                continue;
            }
            let mut pixels = Vec::new();
            let mut queue = std::collections::VecDeque::new();
            queue.push_back((sy, sx));
            labels[(sy, sx)] = next;
            while let Some((y, x)) = queue.pop_front() {
                pixels.push((y, x));
                let neighbors = [
                    (y.wrapping_sub(1), x),
                    (y + 1, x),
                    (y, x.wrapping_sub(1)),
                    (y, x + 1),
                ];
                for (ny, nx) in neighbors {
                    if ny < h && nx < w && mask[(ny, nx)] && labels[(ny, nx)] == 0 {
                        labels[(ny, nx)] = next;
                        queue.push_back((ny, nx));
                    }
                }
            }
            components.push(pixels);
            next += 1;
        }
    }
    components
}

/// Fills interior holes of a component (specular highlights punch holes in
/// the dark iris blob, which would wreck the perimeter measure).
fn fill_holes(pixels: &[(usize, usize)]) -> (Array2<bool>, (usize, usize, usize, usize)) {
    let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for &(y, x) in pixels {
        y0 = y0.min(y);
        x0 = x0.min(x);
        y1 = y1.max(y);
        x1 = x1.max(x);
    }
    let bh = y1 - y0 + 1;
    let bw = x1 - x0 + 1;
    let mut inside = Array2::<bool>::from_elem((bh, bw), false);
    for &(y, x) in pixels {
        inside[(y - y0, x - x0)] = true;
    }
    // flood the complement from the border; unreached complement = holes
    let mut outside = Array2::<bool>::from_elem((bh, bw), false);
    let mut queue = std::collections::VecDeque::new();
    for y in 0..bh {
        for x in [0, bw - 1] {
            if !inside[(y, x)] && !outside[(y, x)] {
                outside[(y, x)] = true;
                queue.push_back((y, x));
            }
        }
    }
    for x in 0..bw {
        for y in [0, bh - 1] {
            if !inside[(y, x)] && !outside[(y, x)] {
                outside[(y, x)] = true;
                queue.push_back((y, x));
            }
        }
    }
    while let Some((y, x)) = queue.pop_front() {
        let neighbors = [
            (y.wrapping_sub(1), x),
            (y + 1, x),
            (y, x.wrapping_sub(1)),
            (y, x + 1),
        ];
        for (ny, nx) in neighbors {
            if ny < bh && nx < bw && !inside[(ny, nx)] && !outside[(ny, nx)] {
                outside[(ny, nx)] = true;
                queue.push_back((ny, nx));
            }
        }
    }
    let mut filled = Array2::<bool>::from_elem((bh, bw), false);
    for y in 0..bh {
        for x in 0..bw {
            filled[(y, x)] = !outside[(y, x)];
        }
    }
    (filled, (x0, y0, bw, bh))
}

fn analyze_component(pixels: Vec<(usize, usize)>) -> Component {
    let (filled, bbox) = fill_holes(&pixels);
    let (bh, bw) = filled.dim();
    let mut area = 0usize;
    let mut perimeter = 0usize;
    for y in 0..bh {
        for x in 0..bw {
            if !filled[(y, x)] {
                continue;
            }
            area += 1;
            // count exposed edges (4-neighborhood)
            let up = y == 0 || !filled[(y - 1, x)];
            let down = y + 1 == bh || !filled[(y + 1, x)];
            let left = x == 0 || !filled[(y, x - 1)];
            let right = x + 1 == bw || !filled[(y, x + 1)];
            perimeter += up as usize + down as usize + left as usize + right as usize;
        }
    }
    Component {
        area_filled: area,
        perimeter,
        filled,
        bbox,
    }
}

/// `4*pi*A / P^2`, with the digital perimeter scaled by 0.8 to compensate
/// the 4-neighborhood over-count along diagonal arcs (a raster circle would
/// otherwise never reach 1.0).
fn circularity(area: usize, perimeter: usize) -> f64 {
    if perimeter == 0 {
        return 0.0;
    }
    let p = perimeter as f64 * 0.8;
    (4.0 * std::f64::consts::PI * area as f64 / (p * p)).min(1.0)
}

/// Minimal enclosing circle over boundary points, visited in deterministic
/// scan order (incremental Welzl without the randomization).
fn min_enclosing_circle(points: &[(f64, f64)]) -> ((f64, f64), f64) {
    fn circle_two(a: (f64, f64), b: (f64, f64)) -> ((f64, f64), f64) {
        let c = ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0);
        let r = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() / 2.0;
        (c, r)
    }
    fn circle_three(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> Option<((f64, f64), f64)> {
        let d = 2.0 * (a.0 * (b.1 - c.1) + b.0 * (c.1 - a.1) + c.0 * (a.1 - b.1));
        if d.abs() < 1e-12 {
            return None;
        }
        let a2 = a.0 * a.0 + a.1 * a.1;
        let b2 = b.0 * b.0 + b.1 * b.1;
        let c2 = c.0 * c.0 + c.1 * c.1;
        let ux = (a2 * (b.1 - c.1) + b2 * (c.1 - a.1) + c2 * (a.1 - b.1)) / d;
        let uy = (a2 * (c.0 - b.0) + b2 * (a.0 - c.0) + c2 * (b.0 - a.0)) / d;
        let r = ((a.0 - ux).powi(2) + (a.1 - uy).powi(2)).sqrt();
        Some(((ux, uy), r))
    }
    fn contains(c: &((f64, f64), f64), p: (f64, f64)) -> bool {
        ((p.0 - c.0 .0).powi(2) + (p.1 - c.0 .1).powi(2)).sqrt() <= c.1 + 1e-7
    }
    let mut circle = ((points[0].0, points[0].1), 0.0);
    for (i, &p) in points.iter().enumerate().skip(1) {
        if contains(&circle, p) {
            continue;
        }
        circle = ((p.0, p.1), 0.0);
        for (j, &q) in points.iter().enumerate().take(i) {
            if contains(&circle, q) {
                continue;
            }
            circle = circle_two(p, q);
            for &r in points.iter().take(j) {
                if contains(&circle, r) {
                    continue;
                }
                circle = circle_three(p, q, r).unwrap_or(circle);
            }
        }
    }
    circle
}

/// Dark circular components of a grayscale image, largest first.
fn dark_circular_components(gray: &Array2<f32>, min_circularity: f64) -> Vec<(Component, f64)> {
    let threshold = otsu_threshold(gray);
    let (h, w) = gray.dim();
    let mask = Array2::from_shape_fn((h, w), |(y, x)| gray[(y, x)] < threshold);
    let mut out: Vec<(Component, f64)> = connected_components(&mask)
        .into_iter()
        .filter(|px| px.len() >= 16)
        .map(analyze_component)
        .map(|comp| {
            let circ = circularity(comp.area_filled, comp.perimeter);
            (comp, circ)
        })
        .filter(|(_, circ)| *circ >= min_circularity)
        .collect();
    out.sort_by(|a, b| b.0.area_filled.cmp(&a.0.area_filled));
    out
}

impl GeometricFallback {
    fn detection_from_component(
        &self,
        comp: &Component,
        circ: f64,
        offset: (usize, usize),
        side: EyeSide,
    ) -> IrisDetection {
        let (bh, bw) = comp.filled.dim();
        let mut boundary = Vec::new();
        for y in 0..bh {
            for x in 0..bw {
                if !comp.filled[(y, x)] {
                    continue;
                }
                let edge = y == 0
                    || x == 0
                    || y + 1 == bh
                    || x + 1 == bw
                    || !comp.filled[(y - 1, x)]
                    || !comp.filled[(y + 1, x)]
                    || !comp.filled[(y, x - 1)]
                    || !comp.filled[(y, x + 1)];
                if edge {
                    boundary.push((
                        (comp.bbox.0 + x + offset.0) as f64 + 0.5,
                        (comp.bbox.1 + y + offset.1) as f64 + 0.5,
                    ));
                }
            }
        }
        let ((cx, cy), radius) = min_enclosing_circle(&boundary);
        let x0 = (cx - radius).floor().max(0.0) as usize;
        let y0 = (cy - radius).floor().max(0.0) as usize;
        let x1 = (cx + radius).ceil() as usize;
        let y1 = (cy + radius).ceil() as usize;
        let bw = x1.saturating_sub(x0).max(1);
        let bh = y1.saturating_sub(y0).max(1);
        // mask = filled circle over the box
        let mask = Array2::from_shape_fn((bh, bw), |(y, x)| {
            let fx = (x0 + x) as f64 + 0.5;
            let fy = (y0 + y) as f64 + 0.5;
            ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt() <= radius
        });
        IrisDetection {
            side,
            bbox: (x0, y0, bw, bh),
            mask,
            center: (cx, cy),
            radius,
            confidence: circ,
        }
    }
}

impl IrisSegmenter for GeometricFallback {
    fn segment(&self, eye: &EyeRegion) -> Detected<IrisDetection> {
        let gray = to_gray(&eye.crop);
        let comps = dark_circular_components(&gray, self.min_circularity);
        let Some((comp, circ)) = comps.first() else {
            return Err(NotFound::new(
                "no dark component with sufficient circularity",
            ));
        };
        Ok(self.detection_from_component(comp, *circ, (eye.bbox.0, eye.bbox.1), eye.side))
    }

    fn name(&self) -> &str {
        "geometric-fallback"
    }
}

impl EyeDetector for GeometricFallback {
    /// Finds the two most plausible dark circular blobs and crops around
    /// them with the configured margin, clamped to the image bounds.
    fn detect_eyes(&self, face: &Array3<f32>) -> Detected<(EyeRegion, EyeRegion)> {
        let gray = to_gray(face);
        let (h, w) = gray.dim();
        let comps = dark_circular_components(&gray, self.min_circularity);
        if comps.len() < 2 {
            return Err(NotFound::new(format!(
                "found {} candidate eye blobs, need 2",
                comps.len()
            )));
        }
        let mut regions = Vec::new();
        for (comp, _circ) in comps.iter().take(2) {
            let (bx, by, bw, bh) = comp.bbox;
            let cx = bx as f64 + bw as f64 / 2.0;
            let cy = by as f64 + bh as f64 / 2.0;
            let half = (bw.max(bh) as f64 * self.crop_margin) / 2.0;
            let x0 = (cx - half).floor().max(0.0) as usize;
            let y0 = (cy - half).floor().max(0.0) as usize;
            let x1 = ((cx + half).ceil() as usize).min(w);
            let y1 = ((cy + half).ceil() as usize).min(h);
            let crop = face.slice(ndarray::s![y0..y1, x0..x1, ..]).to_owned();
            regions.push(EyeRegion {
                crop,
                bbox: (x0, y0, x1 - x0, y1 - y0),
                side: EyeSide::Left, // fixed up by x-order below
            });
        }
        let mut it = regions.into_iter();
        let (mut a, mut b) = (it.next().unwrap(), it.next().unwrap());
        if a.bbox.0 > b.bbox.0 {
            std::mem::swap(&mut a, &mut b);
        }
        a.side = EyeSide::Left;
        b.side = EyeSide::Right;
        Ok((a, b))
    }

    fn name(&self) -> &str {
        "geometric-fallback"
    }
}

/// Mask intersection-over-union between a detection and a ground-truth disk
/// given in source-image coordinates.
pub fn detection_iou(det: &IrisDetection, cx: f64, cy: f64, r: f64) -> f64 {
    let x0 = det.bbox.0.min((cx - r).floor().max(0.0) as usize);
    let y0 = det.bbox.1.min((cy - r).floor().max(0.0) as usize);
    let x1 = (det.bbox.0 + det.bbox.2).max((cx + r).ceil() as usize);
    let y1 = (det.bbox.1 + det.bbox.3).max((cy + r).ceil() as usize);
    let mut inter = 0usize;
    let mut union = 0usize;
    for y in y0..y1 {
        for x in x0..x1 {
            let in_det = x >= det.bbox.0
                && x < det.bbox.0 + det.bbox.2
                && y >= det.bbox.1
                && y < det.bbox.1 + det.bbox.3
                && det.mask[(y - det.bbox.1, x - det.bbox.0)];
            let fx = x as f64 + 0.5;
            let fy = y as f64 + 0.5;
            let in_gt = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt() <= r;
            if in_det && in_gt {
                inter += 1;
            }
            if in_det || in_gt {
                union += 1;
            }
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Full fallback pipeline for one face image: locate both eyes, then segment
/// each iris. Backend failures surface as `NotFound`, never panics.
pub fn extract_iris_pair(
    face: &Array3<f32>,
    detector: &dyn EyeDetector,
    segmenter: &dyn IrisSegmenter,
) -> Detected<(IrisDetection, IrisDetection)> {
    let (left, right) = detect_eyes(face, detector)?;
    let l = segment_iris(&left, segmenter)
        .map_err(|e| NotFound::new(format!("left eye: {}", e.reason)))?;
    let r = segment_iris(&right, segmenter)
        .map_err(|e| NotFound::new(format!("right eye: {}", e.reason)))?;
    Ok((l, r))
}
