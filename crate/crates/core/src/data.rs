//! Label parsing, dataset splitting, class statistics, and the synthetic
//! scene generator used for desk-scale ablations.
//!
//! Label files are UTF-8 text, one box per line: `class cx cy w h`, all
//! coordinates normalized to [0,1]. A dataset manifest lists one
//! `image_path label_path` pair per line, relative to a declared root.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Axis-aligned box: normalized center coordinates plus extent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCxcywh {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxCxcywh {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoxCxcywh { cx, cy, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    /// Shrink the box so it lies fully inside [0,1]². Boxes already inside
    /// pass through untouched.
    pub fn clamped(&self) -> BoxCxcywh {
        let (x0, y0, x1, y1) = self.corners();
        if x0 >= 0.0 && y0 >= 0.0 && x1 <= 1.0 && y1 <= 1.0 {
            return *self;
        }
        let (x0, y0) = (x0.max(0.0), y0.max(0.0));
        let (x1, y1) = (x1.min(1.0), y1.min(1.0));
        BoxCxcywh {
            cx: (x0 + x1) / 2.0,
            cy: (y0 + y1) / 2.0,
            w: x1 - x0,
            h: y1 - y0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledBox {
    pub class_id: usize,
    pub bbox: BoxCxcywh,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<LabeledBox>,
}

/// Ordered class names. The default catalog covers the eight key scene
/// categories: five fire-truck types plus firefighter, flames, and smoke.
/// The three generic truck types are configuration placeholders.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassCatalog {
    names: Vec<String>,
}

impl ClassCatalog {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for n in &names {
            if !seen.insert(n.clone()) {
                return Err(Error::invalid("class_catalog", format!("duplicate class name `{n}`")));
            }
        }
        Ok(ClassCatalog { names })
    }

    pub fn default_catalog() -> Self {
        ClassCatalog {
            names: [
                "Emergency Rescue Fire Truck",
                "Water Tanker Fire Truck",
                "Ladder Fire Truck",
                "Foam Fire Truck",
                "Command Fire Truck",
                "Firefighter",
                "Flames",
                "Smoke",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(|s| s.as_str())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

impl Default for ClassCatalog {
    fn default() -> Self {
        ClassCatalog::default_catalog()
    }
}

// ---------------------------------------------------------------------------
// label io

/// Parse `class cx cy w h` lines. Boxes are clamped to lie fully inside the
/// unit square; out-of-range values are rejected with their line number.
pub fn parse_labels(text: &str) -> Result<Vec<LabeledBox>> {
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::LabelParse {
                line: line_no,
                field: "line",
                msg: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let class_id: usize = fields[0].parse().map_err(|_| Error::LabelParse {
            line: line_no,
            field: "class",
            msg: format!("`{}` is not a non-negative integer", fields[0]),
        })?;
        let names = ["cx", "cy", "w", "h"];
        let mut vals = [0.0f64; 4];
        for (j, (raw, name)) in fields[1..].iter().zip(names).enumerate() {
            let v: f64 = raw.parse().map_err(|_| Error::LabelParse {
                line: line_no,
                field: name,
                msg: format!("`{raw}` is not a number"),
            })?;
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::LabelParse {
                    line: line_no,
                    field: name,
                    msg: format!("{v} out of range [0,1]"),
                });
            }
            vals[j] = v;
        }
        if vals[2] == 0.0 || vals[3] == 0.0 {
            return Err(Error::LabelParse {
                line: line_no,
                field: if vals[2] == 0.0 { "w" } else { "h" },
                msg: "extent must be positive".into(),
            });
        }
        boxes.push(LabeledBox {
            class_id,
            bbox: BoxCxcywh::new(vals[0], vals[1], vals[2], vals[3]).clamped(),
        });
    }
    Ok(boxes)
}

pub fn serialize_labels(boxes: &[LabeledBox]) -> String {
    let mut out = String::new();
    for b in boxes {
        // shortest round-trip float formatting keeps parse/serialize exact
        out.push_str(&format!(
            "{} {} {} {} {}\n",
            b.class_id, b.bbox.cx, b.bbox.cy, b.bbox.w, b.bbox.h
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// splitting and statistics

/// Deterministic seeded shuffle into train/val/test with sizes
/// ⌊0.8n⌋ / ⌊0.1n⌋ / remainder.
pub fn split_dataset<T: Clone>(ids: &[T], seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if ids.is_empty() {
        return Err(Error::invalid("split_dataset", "empty id list"));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates, spelled out so the permutation depends only on the seed
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n = ids.len();
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let pick = |r: std::ops::Range<usize>| r.map(|i| ids[order[i]].clone()).collect::<Vec<T>>();
    Ok((
        pick(0..n_train),
        pick(n_train..n_train + n_val),
        pick(n_train + n_val..n),
    ))
}

/// Area-fraction thresholds for the small/medium/large buckets.
pub const SMALL_AREA: f64 = 0.02;
pub const LARGE_AREA: f64 = 0.10;

#[derive(Clone, Debug, PartialEq)]
pub struct StatsReport {
    pub per_class: Vec<usize>,
    pub small: usize,
    pub medium: usize,
    pub large: usize,
}

impl StatsReport {
    pub fn total(&self) -> usize {
        self.per_class.iter().sum()
    }

    pub fn to_text(&self, catalog: &ClassCatalog) -> String {
        let mut out = String::new();
        out.push_str("class,count\n");
        for (i, &c) in self.per_class.iter().enumerate() {
            let name = catalog.name(i).unwrap_or("?");
            out.push_str(&format!("{name},{c}\n"));
        }
        out.push_str(&format!(
            "size buckets (area fraction): small<{SMALL_AREA}: {}, medium: {}, large>={LARGE_AREA}: {}\n",
            self.small, self.medium, self.large
        ));
        out.push_str(&format!("total,{}\n", self.total()));
        out
    }
}

pub fn stats_report(images: &[AnnotatedImage], num_classes: usize) -> StatsReport {
    let mut per_class = vec![0usize; num_classes];
    let (mut small, mut medium, mut large) = (0, 0, 0);
    for img in images {
        for b in &img.boxes {
            if b.class_id < num_classes {
                per_class[b.class_id] += 1;
            }
            let a = b.bbox.area();
            if a < SMALL_AREA {
                small += 1;
            } else if a < LARGE_AREA {
                medium += 1;
            } else {
                large += 1;
            }
        }
    }
    StatsReport {
        per_class,
        small,
        medium,
        large,
    }
}

// ---------------------------------------------------------------------------
// synthetic scenes

/// Specification for one generated scene. Generation is a pure function of
/// this struct: identical specs give bit-identical images and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSceneSpec {
    pub image_size: usize,
    /// Targets with area strictly under the small-object cap.
    pub small_targets: usize,
    /// Target/occluder pairs with IoU >= 0.3; the occluder is unlabeled.
    pub occluded_pairs: usize,
    /// Low-contrast blurred masses composited over the scene.
    pub smoke_blobs: usize,
    /// Uniform per-pixel noise amplitude.
    pub noise_level: f64,
    pub num_classes: usize,
    pub seed: u64,
}

impl SynthSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::invalid("synth", "image size must be at least 16"));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("synth", "need at least one class"));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::invalid("synth", "noise level must be in [0,1]"));
        }
        Ok(())
    }
}

const PLACEMENT_RETRIES: usize = 200;
const OCCLUDER_SHADE: [f64; 3] = [0.5, 0.5, 0.5];
const SMOKE_SHADE: [f64; 3] = [0.72, 0.72, 0.76];

/// Shade for a class: corners of the channel cube with a stable ordering, so
/// the eight default classes are maximally separated in feature space.
fn class_shade(class_id: usize) -> [f64; 3] {
    let bit = |k: usize| {
        if (class_id >> k) & 1 == 1 {
            0.85
        } else {
            0.15
        }
    };
    [bit(0), bit(1), bit(2)]
}

struct Canvas {
    size: usize,
    data: Vec<f64>, // 3×S×S
}

impl Canvas {
    fn new(size: usize, background: f64) -> Self {
        Canvas {
            size,
            data: vec![background; 3 * size * size],
        }
    }

    fn fill_rect(&mut self, b: &BoxCxcywh, shade: [f64; 3]) {
        let s = self.size as f64;
        let (x0, y0, x1, y1) = b.corners();
        let (px0, py0) = ((x0 * s).floor().max(0.0) as usize, (y0 * s).floor().max(0.0) as usize);
        let (px1, py1) = (
            ((x1 * s).ceil() as usize).min(self.size),
            ((y1 * s).ceil() as usize).min(self.size),
        );
        for c in 0..3 {
            for y in py0..py1 {
                for x in px0..px1 {
                    self.data[(c * self.size + y) * self.size + x] = shade[c];
                }
            }
        }
    }

    fn blend_blob(&mut self, cx: f64, cy: f64, sigma: f64, peak: f64, shade: [f64; 3]) {
        let s = self.size as f64;
        for y in 0..self.size {
            for x in 0..self.size {
                let dx = (x as f64 + 0.5) / s - cx;
                let dy = (y as f64 + 0.5) / s - cy;
                let a = peak * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                for c in 0..3 {
                    let idx = (c * self.size + y) * self.size + x;
                    self.data[idx] = (1.0 - a) * self.data[idx] + a * shade[c];
                }
            }
        }
    }

    fn add_noise(&mut self, rng: &mut ChaCha8Rng, level: f64) {
        if level == 0.0 {
            return;
        }
        for v in &mut self.data {
            *v += rng.random_range(-level..level);
        }
    }

    /// Quantize to the 8-bit lattice so in-memory tensors survive image file
    /// round trips exactly.
    fn into_tensor(mut self) -> Tensor {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
        Tensor::new(vec![3, self.size, self.size], self.data).expect("static shape")
    }
}

fn boxes_iou(a: &BoxCxcywh, b: &BoxCxcywh) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn place_box(
    rng: &mut ChaCha8Rng,
    size_px: usize,
    w_px: usize,
    h_px: usize,
    existing: &[BoxCxcywh],
) -> Result<BoxCxcywh> {
    let s = size_px as f64;
    for _ in 0..PLACEMENT_RETRIES {
        let x0 = rng.random_range(0..=size_px - w_px);
        let y0 = rng.random_range(0..=size_px - h_px);
        let b = BoxCxcywh::new(
            (x0 as f64 + w_px as f64 / 2.0) / s,
            (y0 as f64 + h_px as f64 / 2.0) / s,
            w_px as f64 / s,
            h_px as f64 / s,
        );
        if existing.iter().all(|e| boxes_iou(e, &b) < 0.3) {
            return Ok(b);
        }
    }
    Err(Error::invalid(
        "synth_generate",
        "could not place a target within the occlusion budget",
    ))
}

/// Render one scene. Labels record the true (pre-occlusion) target boxes;
/// occluders and smoke are never labeled.
pub fn synth_generate(spec: &SynthSceneSpec) -> Result<(Tensor, AnnotatedImage)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.image_size;
    let s = size as f64;
    let mut canvas = Canvas::new(size, 0.35);
    let mut boxes: Vec<LabeledBox> = Vec::new();

    // small targets: strictly under the small-object area cap
    let max_small_side = ((SMALL_AREA * 0.95).sqrt() * s).floor() as usize;
    let max_small_area_px = (SMALL_AREA * s * s * 0.99) as usize;
    for _ in 0..spec.small_targets {
        let w_px = rng.random_range(3..=max_small_side.max(4));
        let h_hi = (max_small_area_px / w_px).min(max_small_side.max(4)).max(3);
        let h_px = rng.random_range(3..=h_hi);
        let placed: Vec<BoxCxcywh> = boxes.iter().map(|b| b.bbox).collect();
        let b = place_box(&mut rng, size, w_px, h_px, &placed)?;
        let class_id = rng.random_range(0..spec.num_classes);
        canvas.fill_rect(&b, jitter(class_shade(class_id), &mut rng));
        boxes.push(LabeledBox { class_id, bbox: b });
    }

    // occluded pairs: a labeled target with an unlabeled occluder on top
    for _ in 0..spec.occluded_pairs {
        let w_px = rng.random_range(8..=(size / 4).max(9));
        let h_px = rng.random_range(8..=(size / 4).max(9));
        let placed: Vec<BoxCxcywh> = boxes.iter().map(|b| b.bbox).collect();
        let target = place_box(&mut rng, size, w_px, h_px, &placed)?;
        let class_id = rng.random_range(0..spec.num_classes);
        canvas.fill_rect(&target, jitter(class_shade(class_id), &mut rng));

        // shift fraction rho gives IoU (1-rho)/(1+rho) for same-size boxes;
        // rho in [0.15, 0.45] keeps the pair comfortably above IoU 0.3
        let rho = rng.random_range(0.15..0.45);
        let along_x = rng.random_range(0..2usize) == 0;
        let sign = if rng.random_range(0..2usize) == 0 { 1.0 } else { -1.0 };
        let mut occ = target;
        if along_x {
            occ.cx += sign * rho * occ.w;
        } else {
            occ.cy += sign * rho * occ.h;
        }
        let occ = occ.clamped();
        debug_assert!(boxes_iou(&target, &occ) >= 0.3);
        canvas.fill_rect(&occ, OCCLUDER_SHADE);
        boxes.push(LabeledBox {
            class_id,
            bbox: target,
        });
    }

    for _ in 0..spec.smoke_blobs {
        let cx = rng.random_range(0.0..1.0);
        let cy = rng.random_range(0.0..1.0);
        let sigma = rng.random_range(0.05..0.15);
        let peak = rng.random_range(0.25..0.5);
        canvas.blend_blob(cx, cy, sigma, peak, SMOKE_SHADE);
    }

    canvas.add_noise(&mut rng, spec.noise_level);

    let image = canvas.into_tensor();
    Ok((
        image,
        AnnotatedImage {
            id: format!("synth_{:016x}", spec.seed),
            width: size,
            height: size,
            boxes,
        },
    ))
}

fn jitter(shade: [f64; 3], rng: &mut ChaCha8Rng) -> [f64; 3] {
    let mut out = shade;
    for v in &mut out {
        *v = (*v + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0);
    }
    out
}

// ---------------------------------------------------------------------------
// image and manifest io

/// Write a 3×S×S tensor in [0,1] as a binary PPM (P6, maxval 255).
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::invalid("write_ppm", "expected a 3×H×W tensor"));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                bytes.push((image.at3(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

fn ppm_header(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize)> {
    let err = |msg: &str| Error::invalid("read_ppm", format!("{}: {msg}", path.display()));
    // header: magic, width, height, maxval, single whitespace, then payload
    let mut fields = Vec::new();
    let mut pos = 0usize;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| err("bad header"))?);
    }
    pos += 1; // single whitespace after maxval
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(err("unsupported PPM variant"));
    }
    let w: usize = fields[1].parse().map_err(|_| err("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| err("bad height"))?;
    Ok((w, h, pos))
}

/// Width and height from a PPM header without decoding the payload.
pub fn ppm_dimensions(path: &Path) -> Result<(usize, usize)> {
    let mut head = [0u8; 64];
    let mut f = std::fs::File::open(path)?;
    let n = f.read(&mut head)?;
    let (w, h, _) = ppm_header(&head[..n], path)?;
    Ok((w, h))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let err = |msg: &str| Error::invalid("read_ppm", format!("{}: {msg}", path.display()));
    let (w, h, pos) = ppm_header(&bytes, path)?;
    if bytes.len() < pos + 3 * w * h {
        return Err(err("truncated payload"));
    }
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = bytes[pos + (y * w + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    Tensor::new(vec![3, h, w], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub image_path: String,
    pub label_path: String,
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        match (it.next(), it.next(), it.next()) {
            (Some(img), Some(lbl), None) => entries.push(ManifestEntry {
                image_path: img.to_string(),
                label_path: lbl.to_string(),
            }),
            _ => {
                return Err(Error::invalid(
                    "parse_manifest",
                    format!("line {}: expected `image_path label_path`", i + 1),
                ))
            }
        }
    }
    Ok(entries)
}

pub fn serialize_manifest(entries: &[ManifestEntry]) -> String {
    entries
        .iter()
        .map(|e| format!("{} {}\n", e.image_path, e.label_path))
        .collect()
}
