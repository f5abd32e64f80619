//! Deterministic paired source/target detection scenes.
//!
//! Source scenes are flat grey backgrounds with 1-3 warm-coloured shapes.
//! Target scenes are rendered the same way and then restyled (hue rotation,
//! sinusoidal grating, box blur, noise), which opens a controllable
//! appearance gap between the two domains.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 64;
pub const NUM_CLASSES: usize = 3;
pub const MIN_SIDE: usize = 10;
pub const MAX_SIDE: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn label(self) -> f64 {
        match self {
            Domain::Source => 0.0,
            Domain::Target => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// Axis-aligned box in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BBox { x_min, y_min, x_max, y_max }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let iw = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let ih = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Clips into `[0, size]` on both axes.
    pub fn clip(&self, size: f64) -> BBox {
        BBox {
            x_min: self.x_min.clamp(0.0, size),
            y_min: self.y_min.clamp(0.0, size),
            x_max: self.x_max.clamp(0.0, size),
            y_max: self.y_max.clamp(0.0, size),
        }
    }
}

/// A rendered image with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: u32,
    pub domain: Domain,
    /// `3 x 64 x 64`, values in `[0, 1]`.
    pub image: Tensor,
    pub boxes: Vec<BBox>,
    pub classes: Vec<usize>,
}

/// Target scene with its labels stripped; the only form training code sees.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledImage {
    pub id: u32,
    pub image: Tensor,
}

/// Appearance shift applied to target renders. All zeros is the identity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetStyle {
    /// Hue rotation in degrees.
    pub palette_shift: f64,
    pub grating_amp: f64,
    /// Grating period in pixels along the image diagonal.
    pub grating_period: f64,
    pub blur_radius: usize,
    pub noise_sigma: f64,
}

impl TargetStyle {
    pub const IDENTITY: TargetStyle = TargetStyle {
        palette_shift: 0.0,
        grating_amp: 0.0,
        grating_period: 8.0,
        blur_radius: 0,
        noise_sigma: 0.0,
    };

    pub fn is_valid(&self) -> bool {
        self.palette_shift >= 0.0 && self.grating_amp >= 0.0 && self.grating_period > 0.0 && self.noise_sigma >= 0.0
    }
}

impl Default for TargetStyle {
    fn default() -> Self {
        TargetStyle {
            palette_shift: 120.0,
            grating_amp: 0.05,
            grating_period: 8.0,
            blur_radius: 0,
            noise_sigma: 0.02,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub n_source: usize,
    pub n_target: usize,
    pub n_eval: usize,
    pub style: TargetStyle,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            seed: 0,
            n_source: 200,
            n_target: 200,
            n_eval: 100,
            style: TargetStyle::default(),
        }
    }
}

/// Which split a scene belongs to; also selects its rng stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    SourceTrain,
    TargetTrain,
    TargetEval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::SourceTrain => "source_train",
            Split::TargetTrain => "target_train",
            Split::TargetEval => "target_eval",
        }
    }

    pub fn domain(self) -> Domain {
        match self {
            Split::SourceTrain => Domain::Source,
            Split::TargetTrain | Split::TargetEval => Domain::Target,
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::SourceTrain => 1,
            Split::TargetTrain => 2,
            Split::TargetEval => 3,
        }
    }
}

/// Rng for scene `index` of `split`: one independent ChaCha stream per scene.
pub fn scene_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split.stream() << 32) | index as u64);
    rng
}

/// Unlabeled target training images. Reads are counted so tests can prove
/// which training paths touch the target domain.
#[derive(Debug, Default)]
pub struct TargetSplit {
    images: Vec<UnlabeledImage>,
    reads: AtomicUsize,
}

impl TargetSplit {
    pub fn new(images: Vec<UnlabeledImage>) -> Self {
        TargetSplit {
            images,
            reads: AtomicUsize::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, i: usize) -> &UnlabeledImage {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.images[i]
    }

    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }
}

impl Clone for TargetSplit {
    fn clone(&self) -> Self {
        TargetSplit::new(self.images.clone())
    }
}

/// The three splits. Target training labels are never materialised.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub source: Vec<Scene>,
    pub target: TargetSplit,
    pub eval: Vec<Scene>,
}

impl Dataset {
    pub fn generate(spec: &DatasetSpec) -> Dataset {
        let source = (0..spec.n_source)
            .map(|i| generate_split_scene(spec, Split::SourceTrain, i))
            .collect();
        let target = (0..spec.n_target)
            .map(|i| {
                let s = generate_split_scene(spec, Split::TargetTrain, i);
                UnlabeledImage { id: s.id, image: s.image }
            })
            .collect();
        let eval = (0..spec.n_eval)
            .map(|i| generate_split_scene(spec, Split::TargetEval, i))
            .collect();
        Dataset {
            spec: *spec,
            source,
            target: TargetSplit::new(target),
            eval,
        }
    }
}

/// Image id of scene `index` of `split`: ids are unique across the dataset.
pub fn scene_id(spec: &DatasetSpec, split: Split, index: usize) -> u32 {
    let offset = match split {
        Split::SourceTrain => 0,
        Split::TargetTrain => spec.n_source,
        Split::TargetEval => spec.n_source + spec.n_target,
    };
    (offset + index) as u32
}

pub fn generate_split_scene(spec: &DatasetSpec, split: Split, index: usize) -> Scene {
    let mut rng = scene_rng(spec.seed, split, index);
    let mut scene = generate_scene(&mut rng, split.domain(), &spec.style);
    scene.id = scene_id(spec, split, index);
    scene
}

/// Renders one scene; target scenes are restyled after rendering.
pub fn generate_scene<R: Rng>(rng: &mut R, domain: Domain, style: &TargetStyle) -> Scene {
    let n = IMAGE_SIZE;
    let bg = rng.random_range(0.35..0.65);
    let mut img = vec![bg; 3 * n * n];
    for v in img.iter_mut() {
        *v += 0.02 * normal(rng);
    }

    let count = rng.random_range(1..=3usize);
    let mut boxes: Vec<BBox> = Vec::new();
    let mut classes = Vec::new();
    for _ in 0..count {
        let class = rng.random_range(0..NUM_CLASSES);
        let side = rng.random_range(MIN_SIDE..=MAX_SIDE);
        let hue = rng.random_range(0.0..120.0);
        let value = rng.random_range(0.75..1.0);
        let sat = rng.random_range(0.7..1.0);
        let mut placed = None;
        for _ in 0..50 {
            let x = rng.random_range(0..=n - side) as f64;
            let y = rng.random_range(0..=n - side) as f64;
            let b = BBox::new(x, y, x + side as f64, y + side as f64);
            if boxes.iter().all(|o| !intersects(o, &b)) {
                placed = Some(b);
                break;
            }
        }
        let Some(b) = placed else { continue };
        let rgb = hsv_to_rgb(hue, sat, value);
        draw_shape(&mut img, class, &b, rgb);
        boxes.push(b);
        classes.push(class);
    }
    debug_assert!(!boxes.is_empty(), "first placement into an empty frame always fits");

    let mut image = Tensor::from_parts(vec![3, n, n], img);
    if domain == Domain::Target {
        image = apply_domain_style(&image, style, rng);
    }
    clamp_unit(&mut image);
    Scene {
        id: 0,
        domain,
        image,
        boxes,
        classes,
    }
}

fn intersects(a: &BBox, b: &BBox) -> bool {
    a.x_min < b.x_max && b.x_min < a.x_max && a.y_min < b.y_max && b.y_min < a.y_max
}

fn draw_shape(img: &mut [f64], class: usize, b: &BBox, rgb: [f64; 3]) {
    let n = IMAGE_SIZE;
    let (cx, cy) = b.center();
    let half = 0.5 * b.width();
    for y in b.y_min as usize..b.y_max as usize {
        for x in b.x_min as usize..b.x_max as usize {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = match class {
                0 => (px - cx) * (px - cx) + (py - cy) * (py - cy) <= half * half,
                1 => true,
                _ => {
                    // Apex at top centre, base along the bottom edge.
                    let t = (py - b.y_min) / b.height();
                    libm::fabs(px - cx) <= half * t
                }
            };
            if inside {
                for (c, &v) in rgb.iter().enumerate() {
                    img[(c * n + y) * n + x] = v;
                }
            }
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h % 360.0) / 60.0;
    let x = c * (1.0 - libm::fabs(hp % 2.0 - 1.0));
    let (r, g, b) = match hp as usize {
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

/// Standard normal draw (Box-Muller).
pub(crate) fn normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * PI * u2)
}

fn clamp_unit(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Hue rotation, additive grating, box blur, then additive noise; clamps to `[0, 1]`.
pub fn apply_domain_style<R: Rng>(image: &Tensor, style: &TargetStyle, rng: &mut R) -> Tensor {
    let n = IMAGE_SIZE;
    let plane = n * n;
    let mut out = image.clone();
    if style.palette_shift != 0.0 {
        let m = hue_rotation(style.palette_shift);
        let d = out.data_mut();
        for i in 0..plane {
            let px = [d[i], d[plane + i], d[2 * plane + i]];
            for (c, row) in m.iter().enumerate() {
                d[c * plane + i] = row[0] * px[0] + row[1] * px[1] + row[2] * px[2];
            }
        }
    }
    if style.grating_amp != 0.0 {
        let d = out.data_mut();
        for y in 0..n {
            for x in 0..n {
                let g = style.grating_amp * libm::sin(2.0 * PI * (x + y) as f64 / style.grating_period);
                for c in 0..3 {
                    d[c * plane + y * n + x] += g;
                }
            }
        }
    }
    if style.blur_radius > 0 {
        box_blur(out.data_mut(), n, style.blur_radius);
    }
    if style.noise_sigma != 0.0 {
        for v in out.data_mut() {
            *v += style.noise_sigma * normal(rng);
        }
    }
    clamp_unit(&mut out);
    out
}

/// Rotation by `deg` degrees about the grey axis of RGB space.
fn hue_rotation(deg: f64) -> [[f64; 3]; 3] {
    let th = deg * PI / 180.0;
    let (c, s) = (libm::cos(th), libm::sin(th));
    let a = (1.0 - c) / 3.0;
    let b = s / libm::sqrt(3.0);
    [[c + a, a - b, a + b], [a + b, c + a, a - b], [a - b, a + b, c + a]]
}

/// Separable box blur with clamp-to-edge borders.
fn box_blur(d: &mut [f64], n: usize, r: usize) {
    let norm = (2 * r + 1) as f64;
    let mut tmp = vec![0.0; n * n];
    for plane in d.chunks_mut(n * n) {
        for y in 0..n {
            for x in 0..n {
                let mut s = 0.0;
                for k in 0..=2 * r {
                    let xx = (x + k).saturating_sub(r).min(n - 1);
                    s += plane[y * n + xx];
                }
                tmp[y * n + x] = s / norm;
            }
        }
        for y in 0..n {
            for x in 0..n {
                let mut s = 0.0;
                for k in 0..=2 * r {
                    let yy = (y + k).saturating_sub(r).min(n - 1);
                    s += tmp[yy * n + x];
                }
                plane[y * n + x] = s / norm;
            }
        }
    }
}
