//! Synthetic shapes detection corpus: filled colored shapes with jittered
//! size, rotation and hue over a low-frequency noise background. Labels
//! are tight axis-aligned boxes around each shape.
//!
//! Every image draws from its own derived RNG stream, so generation order
//! cannot change pixel output and any image can be regenerated alone.
//!
//! On-disk layout: `images/NNNNN.ppm` (binary P6), `labels/NNNNN.txt`
//! (one `class cx cy w h` line per object), `manifest.json`.

use std::fs;
use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::detector::BoxLabel;
use crate::error::{Error, Result};
use crate::rng::{indexed_stream, stream_rng, streams};
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 6] = ["circle", "square", "triangle", "cross", "star", "ring"];
/// Long-tailed draw weights, mirroring the category imbalance of real
/// detection corpora.
pub const CLASS_WEIGHTS: [f64; 6] = [0.34, 0.22, 0.16, 0.12, 0.09, 0.07];
/// Success probability of the truncated geometric object count.
const COUNT_P: f64 = 0.4;
pub const MAX_OBJECTS: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub num_images: usize,
    pub image_size: usize,
    pub num_classes: usize,
    /// leading fraction of images used for training, rest validation
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_images: 5000,
            image_size: 64,
            num_classes: 6,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_images == 0 {
            return Err(Error::Config("data.num_images must be positive".into()));
        }
        if !(1..=CLASS_NAMES.len()).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "data.num_classes must be 1..={}, got {}",
                CLASS_NAMES.len(),
                self.num_classes
            )));
        }
        if self.image_size < 16 || self.image_size % 8 != 0 {
            return Err(Error::Config(format!(
                "data.image_size {} must be a multiple of 8, at least 16",
                self.image_size
            )));
        }
        if !(0.0..1.0).contains(&self.train_fraction) || self.train_fraction == 0.0 {
            return Err(Error::Config(format!(
                "data.train_fraction {} outside (0, 1)",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub image_size: usize,
    pub num_images: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub seed: u64,
    pub train_count: usize,
    /// objects of each class over the whole corpus
    pub class_histogram: Vec<usize>,
    pub per_image_counts: Vec<usize>,
    /// "real" for rendered shapes, otherwise the calibration method that produced the images
    #[serde(default = "default_source")]
    pub source: String,
}

fn default_source() -> String {
    "real".to_string()
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    /// RGB byte planes, one `3 * size * size` buffer per image
    pub images: Vec<Vec<u8>>,
    pub labels: Vec<Vec<BoxLabel>>,
}

impl Dataset {
    pub fn image_size(&self) -> usize {
        self.manifest.image_size
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.manifest.train_count).collect()
    }

    pub fn val_indices(&self) -> Vec<usize> {
        (self.manifest.train_count..self.len()).collect()
    }

    /// Stack the chosen images as an [N, 3, S, S] float tensor in [0, 1].
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let s = self.image_size();
        let mut data = Vec::with_capacity(indices.len() * 3 * s * s);
        for &i in indices {
            data.extend(self.images[i].iter().map(|&b| b as f64 / 255.0));
        }
        Tensor::new(vec![indices.len(), 3, s, s], data).expect("sized by construction")
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<Vec<BoxLabel>> {
        indices.iter().map(|&i| self.labels[i].clone()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Star,
    Ring,
}

impl ShapeKind {
    fn from_class(class_id: usize) -> ShapeKind {
        match class_id {
            0 => ShapeKind::Circle,
            1 => ShapeKind::Square,
            2 => ShapeKind::Triangle,
            3 => ShapeKind::Cross,
            4 => ShapeKind::Star,
            _ => ShapeKind::Ring,
        }
    }
}

/// Hole radius of the ring, relative to its outer radius.
const RING_INNER: f64 = 0.55;
/// Inner vertex radius of the star, relative to its outer radius. Fatter
/// than the classic pentagram so the points survive rasterization at the
/// smallest sizes.
const STAR_INNER: f64 = 0.45;
/// Arm half-width of the cross, relative to its half-length.
const CROSS_ARM: f64 = 0.35;

/// A shape instance in continuous pixel coordinates.
#[derive(Clone, Debug)]
struct ShapeDraw {
    kind: ShapeKind,
    /// pixel center of the generating geometry (not of the bbox)
    cx: f64,
    cy: f64,
    /// circumscribed radius in pixels
    r: f64,
    rot: f64,
    color: [f64; 3],
}

/// Polygon outline for vertex-based shapes; None for circle and ring.
fn shape_vertices(kind: ShapeKind, cx: f64, cy: f64, r: f64, rot: f64) -> Option<Vec<(f64, f64)>> {
    let place = |pts: &[(f64, f64)]| {
        pts.iter()
            .map(|&(x, y)| {
                let (s, c) = rot.sin_cos();
                (cx + x * c - y * s, cy + x * s + y * c)
            })
            .collect::<Vec<_>>()
    };
    match kind {
        ShapeKind::Circle | ShapeKind::Ring => None,
        ShapeKind::Square => {
            let a = std::f64::consts::FRAC_PI_4;
            let pts: Vec<(f64, f64)> = (0..4)
                .map(|k| {
                    let t = a + k as f64 * std::f64::consts::FRAC_PI_2;
                    (r * t.cos(), r * t.sin())
                })
                .collect();
            Some(place(&pts))
        }
        ShapeKind::Triangle => {
            let pts: Vec<(f64, f64)> = (0..3)
                .map(|k| {
                    let t = -std::f64::consts::FRAC_PI_2
                        + k as f64 * 2.0 * std::f64::consts::PI / 3.0;
                    (r * t.cos(), r * t.sin())
                })
                .collect();
            Some(place(&pts))
        }
        ShapeKind::Cross => {
            let w = CROSS_ARM * r;
            let pts = [
                (w, w),
                (w, r),
                (-w, r),
                (-w, w),
                (-r, w),
                (-r, -w),
                (-w, -w),
                (-w, -r),
                (w, -r),
                (w, -w),
                (r, -w),
                (r, w),
            ];
            Some(place(&pts))
        }
        ShapeKind::Star => {
            let pts: Vec<(f64, f64)> = (0..10)
                .map(|k| {
                    let rad = if k % 2 == 0 { r } else { STAR_INNER * r };
                    let t = -std::f64::consts::FRAC_PI_2 + k as f64 * std::f64::consts::PI / 5.0;
                    (rad * t.cos(), rad * t.sin())
                })
                .collect();
            Some(place(&pts))
        }
    }
}

/// Tight bbox (x1, y1, x2, y2) in pixel coordinates.
fn shape_bbox(d: &ShapeDraw) -> (f64, f64, f64, f64) {
    match shape_vertices(d.kind, d.cx, d.cy, d.r, d.rot) {
        None => (d.cx - d.r, d.cy - d.r, d.cx + d.r, d.cy + d.r),
        Some(verts) => {
            let mut x1 = f64::INFINITY;
            let mut y1 = f64::INFINITY;
            let mut x2 = f64::NEG_INFINITY;
            let mut y2 = f64::NEG_INFINITY;
            for (x, y) in verts {
                x1 = x1.min(x);
                y1 = y1.min(y);
                x2 = x2.max(x);
                y2 = y2.max(y);
            }
            (x1, y1, x2, y2)
        }
    }
}

/// Even-odd ray casting. Vertex order does not matter.
fn point_in_polygon(px: f64, py: f64, verts: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = verts.len() - 1;
    for i in 0..verts.len() {
        let (xi, yi) = verts[i];
        let (xj, yj) = verts[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn point_in_shape(d: &ShapeDraw, verts: &Option<Vec<(f64, f64)>>, px: f64, py: f64) -> bool {
    match d.kind {
        ShapeKind::Circle => (px - d.cx).hypot(py - d.cy) <= d.r,
        ShapeKind::Ring => {
            let dist = (px - d.cx).hypot(py - d.cy);
            dist <= d.r && dist >= RING_INNER * d.r
        }
        _ => point_in_polygon(px, py, verts.as_ref().expect("polygon kinds carry vertices")),
    }
}

/// Saturation and value in [0,1], hue in degrees.
fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Low-frequency background: a coarse random control grid, bilinearly
/// interpolated to full resolution. Kept dim so foregrounds stay separable.
fn render_background(size: usize, rng: &mut ChaCha12Rng) -> Vec<f64> {
    const GRID: usize = 5;
    let mut control = [[[0.0f64; 3]; GRID]; GRID];
    for row in control.iter_mut() {
        for cell in row.iter_mut() {
            for ch in cell.iter_mut() {
                *ch = rng.gen_range(0.10..0.45);
            }
        }
    }
    let mut out = vec![0.0; 3 * size * size];
    let scale = (GRID - 1) as f64 / (size - 1) as f64;
    for y in 0..size {
        let gy = y as f64 * scale;
        let y0 = (gy.floor() as usize).min(GRID - 2);
        let fy = gy - y0 as f64;
        for x in 0..size {
            let gx = x as f64 * scale;
            let x0 = (gx.floor() as usize).min(GRID - 2);
            let fx = gx - x0 as f64;
            for ch in 0..3 {
                let top = control[y0][x0][ch] * (1.0 - fx) + control[y0][x0 + 1][ch] * fx;
                let bot = control[y0 + 1][x0][ch] * (1.0 - fx) + control[y0 + 1][x0 + 1][ch] * fx;
                out[(ch * size + y) * size + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Subpixel grid per axis used by the renderer's coverage estimate.
const SUPERSAMPLE: usize = 4;

fn render_object(canvas: &mut [f64], size: usize, d: &ShapeDraw) {
    let verts = shape_vertices(d.kind, d.cx, d.cy, d.r, d.rot);
    let (bx1, by1, bx2, by2) = shape_bbox(d);
    let px1 = (bx1.floor() as isize - 1).max(0) as usize;
    let py1 = (by1.floor() as isize - 1).max(0) as usize;
    let px2 = (bx2.ceil() as isize + 1).min(size as isize - 1) as usize;
    let py2 = (by2.ceil() as isize + 1).min(size as isize - 1) as usize;
    let inv = 1.0 / SUPERSAMPLE as f64;
    for y in py1..=py2 {
        for x in px1..=px2 {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) * inv;
                    let py = y as f64 + (sy as f64 + 0.5) * inv;
                    if point_in_shape(d, &verts, px, py) {
                        hits += 1;
                    }
                }
            }
            if hits == 0 {
                continue;
            }
            let alpha = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            for ch in 0..3 {
                let p = &mut canvas[(ch * size + y) * size + x];
                *p = *p * (1.0 - alpha) + d.color[ch] * alpha;
            }
        }
    }
}

/// Draw the object count from a geometric distribution truncated to
/// [1, MAX_OBJECTS].
fn draw_count(rng: &mut ChaCha12Rng) -> usize {
    let q = 1.0 - COUNT_P;
    let weights: Vec<f64> = (0..MAX_OBJECTS).map(|k| q.powi(k as i32)).collect();
    let total: f64 = weights.iter().sum();
    let mut t = rng.gen_range(0.0..total);
    for (k, w) in weights.iter().enumerate() {
        if t < *w {
            return k + 1;
        }
        t -= w;
    }
    MAX_OBJECTS
}

fn draw_class(num_classes: usize, rng: &mut ChaCha12Rng) -> usize {
    let weights = &CLASS_WEIGHTS[..num_classes];
    let total: f64 = weights.iter().sum();
    let mut t = rng.gen_range(0.0..total);
    for (k, w) in weights.iter().enumerate() {
        if t < *w {
            return k;
        }
        t -= w;
    }
    num_classes - 1
}

/// One rendered image plus its labels.
pub fn generate_image(spec: &DatasetSpec, index: usize) -> (Vec<u8>, Vec<BoxLabel>) {
    let mut rng = stream_rng(spec.seed, indexed_stream(streams::DATA_GEN, index as u64));
    let size = spec.image_size;
    let sizef = size as f64;
    let mut canvas = render_background(size, &mut rng);

    // centers at least one grid cell apart so each label lands in its own
    // cell of the detector's stride-8 grid
    let grid = (size / crate::detector::STRIDE) as f64;
    let cell_gap = 1.0 / grid + 0.01;

    let want = draw_count(&mut rng);
    let mut draws: Vec<ShapeDraw> = Vec::new();
    let mut labels: Vec<BoxLabel> = Vec::new();
    for _ in 0..want {
        let class_id = draw_class(spec.num_classes, &mut rng);
        let kind = ShapeKind::from_class(class_id);
        let r_rel = rng.gen_range(0.07..0.20);
        let rot = rng.gen_range(0.0..std::f64::consts::TAU);
        let color = hsv_to_rgb(
            rng.gen_range(0.0..360.0),
            rng.gen_range(0.6..1.0),
            rng.gen_range(0.7..1.0),
        );
        // bbox of the same shape placed at the origin
        let probe = ShapeDraw { kind, cx: 0.0, cy: 0.0, r: r_rel * sizef, rot, color };
        let (bx1, by1, bx2, by2) = shape_bbox(&probe);
        let hx = (bx2 - bx1) / 2.0 / sizef;
        let hy = (by2 - by1) / 2.0 / sizef;
        // offset from bbox center back to the generating center
        let ox = (bx1 + bx2) / 2.0 / sizef;
        let oy = (by1 + by2) / 2.0 / sizef;

        // rejection placement on the bbox center; crowded canvases drop
        // the object rather than violating the spacing invariant
        let mut placed = None;
        for _ in 0..100 {
            let cx = rng.gen_range(hx + 0.02..1.0 - hx - 0.02);
            let cy = rng.gen_range(hy + 0.02..1.0 - hy - 0.02);
            let ok = labels.iter().all(|l| {
                let cheb = (cx - l.cx).abs().max((cy - l.cy).abs());
                let body = 0.75 * (hx.max(hy) + (l.w.max(l.h)) / 2.0);
                cheb >= cell_gap.max(body)
            });
            if ok {
                placed = Some((cx, cy));
                break;
            }
        }
        let Some((cx, cy)) = placed else { continue };
        labels.push(BoxLabel {
            class_id,
            cx,
            cy,
            w: 2.0 * hx,
            h: 2.0 * hy,
            confidence: 1.0,
        });
        draws.push(ShapeDraw {
            kind,
            cx: (cx - ox) * sizef,
            cy: (cy - oy) * sizef,
            r: r_rel * sizef,
            rot,
            color,
        });
    }
    // retention: an image is never empty, retry shrinks until one fits
    if labels.is_empty() {
        let class_id = draw_class(spec.num_classes, &mut rng);
        let kind = ShapeKind::from_class(class_id);
        let probe = ShapeDraw {
            kind,
            cx: 0.0,
            cy: 0.0,
            r: 0.1 * sizef,
            rot: 0.0,
            color: hsv_to_rgb(rng.gen_range(0.0..360.0), 0.9, 0.9),
        };
        let (bx1, by1, bx2, by2) = shape_bbox(&probe);
        let hx = (bx2 - bx1) / 2.0 / sizef;
        let hy = (by2 - by1) / 2.0 / sizef;
        labels.push(BoxLabel {
            class_id,
            cx: 0.5,
            cy: 0.5,
            w: 2.0 * hx,
            h: 2.0 * hy,
            confidence: 1.0,
        });
        draws.push(ShapeDraw {
            cx: (0.5 - (bx1 + bx2) / 2.0 / sizef) * sizef,
            cy: (0.5 - (by1 + by2) / 2.0 / sizef) * sizef,
            ..probe
        });
    }

    for d in &draws {
        render_object(&mut canvas, size, d);
    }
    let bytes = canvas
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    (bytes, labels)
}

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut images = Vec::with_capacity(spec.num_images);
    let mut labels = Vec::with_capacity(spec.num_images);
    let mut histogram = vec![0usize; spec.num_classes];
    let mut counts = Vec::with_capacity(spec.num_images);
    for i in 0..spec.num_images {
        let (img, ls) = generate_image(spec, i);
        for l in &ls {
            histogram[l.class_id] += 1;
        }
        counts.push(ls.len());
        images.push(img);
        labels.push(ls);
    }
    let train_count = ((spec.num_images as f64) * spec.train_fraction).round() as usize;
    let manifest = Manifest {
        format_version: 1,
        image_size: spec.image_size,
        num_images: spec.num_images,
        num_classes: spec.num_classes,
        class_names: CLASS_NAMES[..spec.num_classes].iter().map(|s| s.to_string()).collect(),
        seed: spec.seed,
        train_count: train_count.clamp(1, spec.num_images.saturating_sub(1).max(1)),
        class_histogram: histogram,
        per_image_counts: counts,
        source: default_source(),
    };
    Ok(Dataset { manifest, images, labels })
}

pub fn save_ppm(path: &Path, size: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * size * size {
        return Err(Error::invalid("save_ppm", format!("buffer {} for size {size}", rgb.len())));
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write!(f, "P6\n{size} {size}\n255\n")?;
    // planar [3,S,S] to interleaved RGB rows
    let mut row = Vec::with_capacity(3 * size);
    for y in 0..size {
        row.clear();
        for x in 0..size {
            for ch in 0..3 {
                row.push(rgb[(ch * size + y) * size + x]);
            }
        }
        f.write_all(&row)?;
    }
    Ok(())
}

/// Returns (size, planar RGB bytes). Square images only.
pub fn load_ppm(path: &Path) -> Result<(usize, Vec<u8>)> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let mut pos = 0usize;
    let mut next_token = |bytes: &[u8]| -> Result<(usize, usize)> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Dataset(format!(
                "{}: truncated header at byte {start}",
                path.display()
            )));
        }
        Ok((start, pos))
    };
    let tok = |range: (usize, usize)| std::str::from_utf8(&bytes[range.0..range.1]).unwrap_or("?");

    let magic = next_token(&bytes)?;
    if tok(magic) != "P6" {
        return Err(Error::Dataset(format!(
            "{}: bad magic '{}' at byte {}",
            path.display(),
            tok(magic),
            magic.0
        )));
    }
    let parse_num = |range: (usize, usize), what: &str| -> Result<usize> {
        tok(range).parse::<usize>().map_err(|_| {
            Error::Dataset(format!(
                "{}: bad {what} '{}' at byte {}",
                path.display(),
                tok(range),
                range.0
            ))
        })
    };
    let w = parse_num(next_token(&bytes)?, "width")?;
    let h = parse_num(next_token(&bytes)?, "height")?;
    let maxval = parse_num(next_token(&bytes)?, "maxval")?;
    if w != h || w == 0 || w > 4096 {
        return Err(Error::Dataset(format!("{}: unsupported size {w}x{h}", path.display())));
    }
    if maxval != 255 {
        return Err(Error::Dataset(format!("{}: unsupported maxval {maxval}", path.display())));
    }
    // exactly one whitespace byte separates header from pixels
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Dataset(format!("{}: missing header terminator", path.display())));
    }
    pos += 1;
    let want = 3 * w * h;
    if bytes.len() - pos != want {
        return Err(Error::Dataset(format!(
            "{}: {} pixel bytes at offset {pos}, want {want}",
            path.display(),
            bytes.len() - pos
        )));
    }
    let mut planar = vec![0u8; want];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                planar[(ch * w + y) * w + x] = bytes[pos + (y * w + x) * 3 + ch];
            }
        }
    }
    Ok((w, planar))
}

pub fn format_label(l: &BoxLabel) -> String {
    format!("{} {:.6} {:.6} {:.6} {:.6}", l.class_id, l.cx, l.cy, l.w, l.h)
}

pub fn parse_label_line(line: &str, num_classes: usize) -> Result<BoxLabel> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 5 {
        return Err(Error::Dataset(format!(
            "label line '{line}' has {} fields, want 5",
            fields.len()
        )));
    }
    let class_id: usize = fields[0]
        .parse()
        .map_err(|_| Error::Dataset(format!("bad class id '{}'", fields[0])))?;
    if class_id >= num_classes {
        return Err(Error::Dataset(format!("class id {class_id} outside 0..{num_classes}")));
    }
    let mut nums = [0.0f64; 4];
    for (i, f) in fields[1..].iter().enumerate() {
        nums[i] = f
            .parse()
            .map_err(|_| Error::Dataset(format!("bad coordinate '{f}' in '{line}'")))?;
    }
    let [cx, cy, w, h] = nums;
    if !(0.0..=1.0).contains(&cx)
        || !(0.0..=1.0).contains(&cy)
        || w <= 0.0
        || h <= 0.0
        || w > 1.0
        || h > 1.0
    {
        return Err(Error::Dataset(format!("label '{line}' outside the unit square")));
    }
    Ok(BoxLabel { class_id, cx, cy, w, h, confidence: 1.0 })
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let images_dir = dir.join("images");
    let labels_dir = dir.join("labels");
    fs::create_dir_all(&images_dir)?;
    fs::create_dir_all(&labels_dir)?;
    let size = ds.image_size();
    for (i, img) in ds.images.iter().enumerate() {
        save_ppm(&images_dir.join(format!("{i:05}.ppm")), size, img)?;
        let lines: Vec<String> = ds.labels[i].iter().map(format_label).collect();
        let mut body = lines.join("\n");
        body.push('\n');
        fs::write(labels_dir.join(format!("{i:05}.txt")), body)?;
    }
    let mut json = serde_json::to_string_pretty(&ds.manifest)?;
    json.push('\n');
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let mut buf = String::new();
    fs::File::open(&manifest_path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", manifest_path.display())))?
        .read_to_string(&mut buf)?;
    let manifest: Manifest = serde_json::from_str(&buf)?;
    if manifest.format_version != 1 {
        return Err(Error::Dataset(format!(
            "manifest format_version {} unsupported",
            manifest.format_version
        )));
    }
    let mut images = Vec::with_capacity(manifest.num_images);
    let mut labels = Vec::with_capacity(manifest.num_images);
    for i in 0..manifest.num_images {
        let (size, img) = load_ppm(&dir.join("images").join(format!("{i:05}.ppm")))?;
        if size != manifest.image_size {
            return Err(Error::Dataset(format!(
                "image {i} is {size}px, manifest says {}",
                manifest.image_size
            )));
        }
        let label_path = dir.join("labels").join(format!("{i:05}.txt"));
        let text = fs::read_to_string(&label_path)
            .map_err(|e| Error::Dataset(format!("{}: {e}", label_path.display())))?;
        let ls: Result<Vec<BoxLabel>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| parse_label_line(l, manifest.num_classes))
            .collect();
        images.push(img);
        labels.push(ls.map_err(|e| Error::Dataset(format!("{}: {e}", label_path.display())))?);
    }
    Ok(Dataset { manifest, images, labels })
}

pub fn generate_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Dataset> {
    let ds = generate(spec)?;
    save_dataset(&ds, dir)?;
    Ok(ds)
}

/// Mirror a planar RGB image left to right.
pub fn hflip_u8(size: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; rgb.len()];
    for ch in 0..3 {
        for y in 0..size {
            for x in 0..size {
                out[(ch * size + y) * size + x] = rgb[(ch * size + y) * size + (size - 1 - x)];
            }
        }
    }
    out
}

pub fn hflip_labels(labels: &[BoxLabel]) -> Vec<BoxLabel> {
    labels.iter().map(|l| BoxLabel { cx: 1.0 - l.cx, ..*l }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{assign_cells, STRIDE};

    fn small_spec() -> DatasetSpec {
        DatasetSpec { num_images: 40, seed: 11, ..DatasetSpec::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small_spec()).unwrap();
        let b = generate(&small_spec()).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        let c = generate(&DatasetSpec { seed: 12, ..small_spec() }).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn every_image_has_labels_in_distinct_cells() {
        let ds = generate(&small_spec()).unwrap();
        let grid = ds.image_size() / STRIDE;
        for (i, labels) in ds.labels.iter().enumerate() {
            assert!(!labels.is_empty(), "image {i} empty");
            assert!(labels.len() <= MAX_OBJECTS);
            let assigned = assign_cells(labels, grid);
            assert_eq!(assigned.len(), labels.len(), "image {i} shares a cell");
            for l in labels {
                assert!(l.cx - l.w / 2.0 >= 0.0 && l.cx + l.w / 2.0 <= 1.0);
                assert!(l.cy - l.h / 2.0 >= 0.0 && l.cy + l.h / 2.0 <= 1.0);
            }
        }
    }

    #[test]
    fn class_histogram_tracks_weights() {
        let ds = generate(&DatasetSpec { num_images: 1500, seed: 3, ..DatasetSpec::default() })
            .unwrap();
        let hist = &ds.manifest.class_histogram;
        let total: usize = hist.iter().sum();
        for (k, &w) in CLASS_WEIGHTS.iter().enumerate() {
            let observed = hist[k] as f64 / total as f64;
            // multinomial std at n≈3000 is about 0.009; allow 5 sigma
            assert!(
                (observed - w).abs() < 0.05,
                "class {k}: observed {observed:.3}, want {w:.3}"
            );
        }
        // long tail is strictly ordered
        for k in 1..hist.len() {
            assert!(hist[k - 1] > hist[k], "histogram not long-tailed: {hist:?}");
        }
    }

    #[test]
    fn object_counts_follow_truncated_geometric() {
        let ds = generate(&DatasetSpec { num_images: 2000, seed: 5, ..DatasetSpec::default() })
            .unwrap();
        let counts = &ds.manifest.per_image_counts;
        assert!(counts.iter().all(|&c| (1..=MAX_OBJECTS).contains(&c)));
        let ones = counts.iter().filter(|&&c| c == 1).count() as f64 / counts.len() as f64;
        // truncated geometric with p=0.4 puts about 0.43 of mass at k=1;
        // placement drop-outs can only push mass toward smaller counts
        assert!(ones > 0.30 && ones < 0.60, "P(count=1) = {ones:.3}");
    }

    /// Independent rasterization oracle: winding-number point test (the
    /// renderer uses even-odd ray casting) at 16x16 supersampling. The
    /// any-hit mask must stay inside the label box and reach within one
    /// pixel of every box edge.
    #[test]
    fn labels_tightly_bound_rendered_masks() {
        fn winding_inside(px: f64, py: f64, verts: &[(f64, f64)]) -> bool {
            let mut angle = 0.0f64;
            for i in 0..verts.len() {
                let (x1, y1) = verts[i];
                let (x2, y2) = verts[(i + 1) % verts.len()];
                let a1 = (y1 - py).atan2(x1 - px);
                let a2 = (y2 - py).atan2(x2 - px);
                let mut da = a2 - a1;
                while da > std::f64::consts::PI {
                    da -= std::f64::consts::TAU;
                }
                while da < -std::f64::consts::PI {
                    da += std::f64::consts::TAU;
                }
                angle += da;
            }
            angle.abs() > std::f64::consts::PI
        }

        let spec = DatasetSpec { num_images: 60, seed: 21, ..DatasetSpec::default() };
        let size = spec.image_size;
        let sizef = size as f64;
        let mut checked = 0;
        for i in 0..spec.num_images {
            let mut rng = stream_rng(spec.seed, indexed_stream(streams::DATA_GEN, i as u64));
            let _bg = render_background(size, &mut rng);
            // replay the image's draw sequence to recover shape geometry
            let want = draw_count(&mut rng);
            let mut labels: Vec<BoxLabel> = Vec::new();
            let grid = (size / STRIDE) as f64;
            let cell_gap = 1.0 / grid + 0.01;
            for _ in 0..want {
                let class_id = draw_class(spec.num_classes, &mut rng);
                let kind = ShapeKind::from_class(class_id);
                let r_rel = rng.gen_range(0.07..0.20);
                let rot = rng.gen_range(0.0..std::f64::consts::TAU);
                let color = hsv_to_rgb(
                    rng.gen_range(0.0..360.0),
                    rng.gen_range(0.6..1.0),
                    rng.gen_range(0.7..1.0),
                );
                let probe = ShapeDraw { kind, cx: 0.0, cy: 0.0, r: r_rel * sizef, rot, color };
                let (bx1, by1, bx2, by2) = shape_bbox(&probe);
                let hx = (bx2 - bx1) / 2.0 / sizef;
                let hy = (by2 - by1) / 2.0 / sizef;
                let ox = (bx1 + bx2) / 2.0 / sizef;
                let oy = (by1 + by2) / 2.0 / sizef;
                let mut placed = None;
                for _ in 0..100 {
                    let cx = rng.gen_range(hx + 0.02..1.0 - hx - 0.02);
                    let cy = rng.gen_range(hy + 0.02..1.0 - hy - 0.02);
                    let ok = labels.iter().all(|l| {
                        let cheb = (cx - l.cx).abs().max((cy - l.cy).abs());
                        let body = 0.75 * (hx.max(hy) + (l.w.max(l.h)) / 2.0);
                        cheb >= cell_gap.max(body)
                    });
                    if ok {
                        placed = Some((cx, cy));
                        break;
                    }
                }
                let Some((cx, cy)) = placed else { continue };
                labels.push(BoxLabel { class_id, cx, cy, w: 2.0 * hx, h: 2.0 * hy, confidence: 1.0 });
                let d = ShapeDraw {
                    kind,
                    cx: (cx - ox) * sizef,
                    cy: (cy - oy) * sizef,
                    r: r_rel * sizef,
                    rot,
                    color,
                };
                let label = labels.last().unwrap();

                // oracle mask bbox at 16x16 subsampling
                let (mut mx1, mut my1) = (f64::INFINITY, f64::INFINITY);
                let (mut mx2, mut my2) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                let verts = shape_vertices(d.kind, d.cx, d.cy, d.r, d.rot);
                let ss = 16;
                for y in 0..size {
                    for x in 0..size {
                        let mut hit = false;
                        'scan: for sy in 0..ss {
                            for sx in 0..ss {
                                let px = x as f64 + (sx as f64 + 0.5) / ss as f64;
                                let py = y as f64 + (sy as f64 + 0.5) / ss as f64;
                                let inside = match d.kind {
                                    ShapeKind::Circle => (px - d.cx).hypot(py - d.cy) <= d.r,
                                    ShapeKind::Ring => {
                                        let dist = (px - d.cx).hypot(py - d.cy);
                                        dist <= d.r && dist >= RING_INNER * d.r
                                    }
                                    _ => winding_inside(px, py, verts.as_ref().unwrap()),
                                };
                                if inside {
                                    hit = true;
                                    break 'scan;
                                }
                            }
                        }
                        if hit {
                            mx1 = mx1.min(x as f64);
                            my1 = my1.min(y as f64);
                            mx2 = mx2.max(x as f64 + 1.0);
                            my2 = my2.max(y as f64 + 1.0);
                        }
                    }
                }
                let lx1 = (label.cx - label.w / 2.0) * sizef;
                let lx2 = (label.cx + label.w / 2.0) * sizef;
                let ly1 = (label.cy - label.h / 2.0) * sizef;
                let ly2 = (label.cy + label.h / 2.0) * sizef;
                for (m, l, name) in [
                    (mx1, lx1, "left"),
                    (my1, ly1, "top"),
                    (mx2, lx2, "right"),
                    (my2, ly2, "bottom"),
                ] {
                    assert!(
                        (m - l).abs() <= 1.0 + 1e-9,
                        "image {i} {name} edge: mask {m:.2} vs label {l:.2} ({kind:?})"
                    );
                }
                checked += 1;
            }
        }
        assert!(checked >= 60, "only {checked} shapes checked");
    }

    #[test]
    fn renderer_coverage_agrees_with_oracle_sampling() {
        // coarse renderer coverage vs a 16x16 estimate on one image
        let spec = DatasetSpec { num_images: 1, seed: 9, ..DatasetSpec::default() };
        let d = ShapeDraw {
            kind: ShapeKind::Star,
            cx: 30.0,
            cy: 28.0,
            r: 11.0,
            rot: 0.7,
            color: [1.0, 0.0, 0.0],
        };
        let size = spec.image_size;
        let mut coarse = vec![0.0; 3 * size * size];
        render_object(&mut coarse, size, &d);
        let verts = shape_vertices(d.kind, d.cx, d.cy, d.r, d.rot);
        let mut worst = 0.0f64;
        for y in 0..size {
            for x in 0..size {
                let mut hits = 0;
                for sy in 0..16 {
                    for sx in 0..16 {
                        let px = x as f64 + (sx as f64 + 0.5) / 16.0;
                        let py = y as f64 + (sy as f64 + 0.5) / 16.0;
                        if point_in_shape(&d, &verts, px, py) {
                            hits += 1;
                        }
                    }
                }
                let fine = hits as f64 / 256.0;
                let got = coarse[y * size + x];
                worst = worst.max((fine - got).abs());
            }
        }
        // 4x4 coverage against 16x16 reference: boundary pixels may
        // disagree by a few subsamples, never grossly
        assert!(worst <= 0.25, "coverage deviates by {worst}");
    }

    #[test]
    fn ppm_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&DatasetSpec { num_images: 2, ..small_spec() }).unwrap();
        let p = dir.path().join("x.ppm");
        save_ppm(&p, ds.image_size(), &ds.images[0]).unwrap();
        let (size, img) = load_ppm(&p).unwrap();
        assert_eq!(size, ds.image_size());
        assert_eq!(img, ds.images[0]);

        // truncation is a structured error, not a panic
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 7]).unwrap();
        let err = load_ppm(&p).unwrap_err();
        assert!(matches!(err, Error::Dataset(_)), "got {err}");
        fs::write(&p, b"P5\n2 2\n255\n0000").unwrap();
        assert!(load_ppm(&p).is_err());
    }

    #[test]
    fn dataset_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec { num_images: 6, ..small_spec() };
        let ds = generate_dataset(&spec, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.images, ds.images);
        assert_eq!(loaded.manifest.class_histogram, ds.manifest.class_histogram);
        assert_eq!(loaded.labels.len(), ds.labels.len());
        for (a, b) in loaded.labels.iter().flatten().zip(ds.labels.iter().flatten()) {
            assert_eq!(a.class_id, b.class_id);
            // text labels carry six decimals
            assert!((a.cx - b.cx).abs() < 1e-6);
            assert!((a.w - b.w).abs() < 1e-6);
        }
    }

    #[test]
    fn save_twice_is_byte_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let spec = DatasetSpec { num_images: 3, ..small_spec() };
        generate_dataset(&spec, d1.path()).unwrap();
        generate_dataset(&spec, d2.path()).unwrap();
        for name in ["manifest.json", "images/00002.ppm", "labels/00002.txt"] {
            let a = fs::read(d1.path().join(name)).unwrap();
            let b = fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
    }

    #[test]
    fn label_line_format() {
        let l = parse_label_line("2 0.5 0.5 0.25 0.25", 6).unwrap();
        assert_eq!(l.class_id, 2);
        assert_eq!((l.cx, l.cy, l.w, l.h), (0.5, 0.5, 0.25, 0.25));
        assert!(parse_label_line("9 0.5 0.5 0.2 0.2", 6).is_err());
        assert!(parse_label_line("1 0.5 0.5 0.2", 6).is_err());
        assert!(parse_label_line("1 1.5 0.5 0.2 0.2", 6).is_err());
        assert!(parse_label_line("1 0.5 0.5 0.0 0.2", 6).is_err());
    }

    #[test]
    fn batch_is_normalized() {
        let ds = generate(&DatasetSpec { num_images: 3, ..small_spec() }).unwrap();
        let t = ds.batch(&[0, 2]);
        assert_eq!(t.shape(), &[2, 3, 64, 64]);
        assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(t.data()[0], ds.images[0][0] as f64 / 255.0);
    }

    #[test]
    fn hflip_is_involutive_and_flips_labels() {
        let ds = generate(&DatasetSpec { num_images: 1, ..small_spec() }).unwrap();
        let img = &ds.images[0];
        let flipped = hflip_u8(ds.image_size(), img);
        assert_ne!(&flipped, img);
        assert_eq!(&hflip_u8(ds.image_size(), &flipped), img);
        let labels = hflip_labels(&ds.labels[0]);
        for (a, b) in labels.iter().zip(&ds.labels[0]) {
            assert!((a.cx + b.cx - 1.0).abs() < 1e-12);
            assert_eq!(a.cy, b.cy);
            assert_eq!(a.w, b.w);
        }
    }

    #[test]
    fn spec_validation() {
        assert!(DatasetSpec { num_images: 0, ..small_spec() }.validate().is_err());
        assert!(DatasetSpec { num_classes: 7, ..small_spec() }.validate().is_err());
        assert!(DatasetSpec { image_size: 63, ..small_spec() }.validate().is_err());
        assert!(DatasetSpec { train_fraction: 1.0, ..small_spec() }.validate().is_err());
    }
}
