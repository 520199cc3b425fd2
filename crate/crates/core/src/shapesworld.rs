//! Procedural toy world: colored circles, squares and triangles on a
//! textured background, with exact masks, random-walk scribbles and
//! rendered conditions.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, LabelGrid};
use crate::rng::{keyed_rng, standard_normal};

pub const BACKGROUND: i16 = 0;
pub const CIRCLE: i16 = 1;
pub const SQUARE: i16 = 2;
pub const TRIANGLE: i16 = 3;
pub const UNLABELED: i16 = -1;

pub const CLASS_NAMES: [&str; 4] = ["background", "circle", "square", "triangle"];

/// How scribbles are rendered into condition channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionMode {
    Rgb,
    OneHot,
}

/// What the class-set part of a condition carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassSetMode {
    /// Bit `k` set iff class `k` is present in the scene.
    Present,
    /// Every bit set, whatever the scene holds (the "unchanging prompt" ablation).
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub height: usize,
    pub width: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Minimum visible fraction of the image each shape must keep.
    pub min_visible_fraction: f64,
    pub coverage_target: f64,
    pub condition_mode: ConditionMode,
    pub class_set_mode: ClassSetMode,
    /// RGB color per class, used by the rgb condition mode.
    pub palette: Vec<[f64; 3]>,
    /// Amplitude of the smooth colored background texture.
    pub background_texture: f64,
    /// Per-pixel noise amplitude on every pixel.
    pub pixel_noise: f64,
    /// Half-width, in degrees, of the hue window around each class's hue.
    pub hue_jitter_deg: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            min_shapes: 1,
            max_shapes: 3,
            min_visible_fraction: 0.02,
            coverage_target: 0.03,
            condition_mode: ConditionMode::Rgb,
            class_set_mode: ClassSetMode::Present,
            palette: default_palette(),
            background_texture: 0.15,
            pixel_noise: 0.04,
            hue_jitter_deg: 75.0,
        }
    }
}

pub fn default_palette() -> Vec<[f64; 3]> {
    vec![
        [1.0, 1.0, 1.0],
        [1.0, -1.0, -1.0],
        [-1.0, 1.0, -1.0],
        [-1.0, -1.0, 1.0],
    ]
}

impl WorldConfig {
    pub const NUM_CLASSES: usize = 4;

    pub fn num_classes(&self) -> usize {
        Self::NUM_CLASSES
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn condition_channels(&self) -> usize {
        match self.condition_mode {
            ConditionMode::Rgb => 3,
            ConditionMode::OneHot => self.num_classes(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.height < 8 || self.width < 8 {
            return bad(format!("world must be at least 8x8, got {}x{}", self.height, self.width));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return bad("need 1 <= min_shapes <= max_shapes".into());
        }
        if !(self.min_visible_fraction > 0.0 && self.min_visible_fraction * self.max_shapes as f64 <= 0.5) {
            return bad("min_visible_fraction out of range".into());
        }
        if !(self.coverage_target > 0.0 && self.coverage_target <= 0.1) {
            return bad(format!("coverage_target {} outside (0, 0.1]", self.coverage_target));
        }
        validate_palette(&self.palette, self.num_classes())?;
        Ok(())
    }
}

pub fn validate_palette(palette: &[[f64; 3]], num_classes: usize) -> Result<()> {
    if palette.len() != num_classes {
        return Err(Error::InvalidConfig(format!(
            "palette has {} colors for {num_classes} classes",
            palette.len()
        )));
    }
    for (i, a) in palette.iter().enumerate() {
        if a.iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidConfig(format!(
                "palette color {i} is all-zero, which is reserved for unlabeled pixels"
            )));
        }
        for (j, b) in palette.iter().enumerate().skip(i + 1) {
            if a == b {
                return Err(Error::InvalidConfig(format!("palette collision between classes {i} and {j}")));
            }
        }
    }
    Ok(())
}

/// One generated image with its exact ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: ImageGrid,
    pub full_mask: LabelGrid,
    pub class_set: Vec<bool>,
}

/// Sparse stroke annotation; `-1` marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScribbleMap {
    pub labels: LabelGrid,
    pub coverage: f64,
}

impl ScribbleMap {
    pub fn from_labels(labels: LabelGrid) -> Self {
        let n = labels.data().iter().filter(|&&v| v != UNLABELED).count();
        let coverage = n as f64 / labels.len().max(1) as f64;
        Self { labels, coverage }
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.data().iter().filter(|&&v| v != UNLABELED).count()
    }
}

/// Denoiser conditioning: rendered scribble channels plus the class-set vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub scribble_channels: ImageGrid,
    pub class_set_vector: Vec<f64>,
}

impl Condition {
    pub fn new(scribble_channels: ImageGrid, class_set_vector: Vec<f64>) -> Result<Self> {
        if let Some(v) = class_set_vector.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument(format!("class-set entries must be 0 or 1, got {v}")));
        }
        Ok(Self {
            scribble_channels,
            class_set_vector,
        })
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Circle { cx: f64, cy: f64, r: f64 },
    Square { cx: f64, cy: f64, half: f64 },
    Triangle { pts: [(f64, f64); 3] },
}

impl Shape {
    fn class(&self) -> i16 {
        match self {
            Shape::Circle { .. } => CIRCLE,
            Shape::Square { .. } => SQUARE,
            Shape::Triangle { .. } => TRIANGLE,
        }
    }

    fn contains(&self, px: f64, py: f64) -> bool {
        match *self {
            Shape::Circle { cx, cy, r } => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            Shape::Square { cx, cy, half } => (px - cx).abs() <= half && (py - cy).abs() <= half,
            Shape::Triangle { pts } => {
                let edge = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0);
                let d0 = edge(pts[0], pts[1]);
                let d1 = edge(pts[1], pts[2]);
                let d2 = edge(pts[2], pts[0]);
                let neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
                let pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
                !(neg && pos)
            }
        }
    }

    fn random<R: Rng + ?Sized>(class: i16, h: usize, w: usize, rng: &mut R) -> Shape {
        let scale = h.min(w) as f64 / 32.0;
        match class {
            CIRCLE => {
                let r = rng.random_range(4.0..9.0) * scale;
                let (cx, cy) = random_center(rng, h, w, r * 0.6);
                Shape::Circle { cx, cy, r }
            }
            SQUARE => {
                let half = rng.random_range(3.5..7.5) * scale;
                let (cx, cy) = random_center(rng, h, w, half * 0.6);
                Shape::Square { cx, cy, half }
            }
            _ => {
                let r = rng.random_range(5.5..10.5) * scale;
                let (cx, cy) = random_center(rng, h, w, r * 0.5);
                let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let mut pts = [(0.0, 0.0); 3];
                for (k, p) in pts.iter_mut().enumerate() {
                    let a = theta + k as f64 * std::f64::consts::TAU / 3.0;
                    *p = (cx + r * a.cos(), cy + r * a.sin());
                }
                Shape::Triangle { pts }
            }
        }
    }
}

fn random_center<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, margin: f64) -> (f64, f64) {
    let cx = rng.random_range(margin..(w as f64 - margin).max(margin + 1e-6));
    let cy = rng.random_range(margin..(h as f64 - margin).max(margin + 1e-6));
    (cx, cy)
}

/// HSV (hue in degrees) to RGB in [-1, 1].
fn hsv_to_signed_rgb(hue: f64, sat: f64, val: f64) -> [f64; 3] {
    let h = hue.rem_euclid(360.0) / 60.0;
    let c = val * sat;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = val - c;
    [2.0 * (r + m) - 1.0, 2.0 * (g + m) - 1.0, 2.0 * (b + m) - 1.0]
}

fn class_hue(class: i16) -> f64 {
    match class {
        CIRCLE => 0.0,
        SQUARE => 120.0,
        _ => 240.0,
    }
}

/// Low-resolution noise bilinearly upsampled to `h×w`, one plane per channel.
fn smooth_texture<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, cells: usize) -> Vec<f64> {
    let g = cells + 1;
    let mut out = vec![0.0; 3 * h * w];
    for c in 0..3 {
        let lattice: Vec<f64> = (0..g * g).map(|_| standard_normal(rng)).collect();
        for y in 0..h {
            let fy = (y as f64 + 0.5) / h as f64 * cells as f64;
            let y0 = (fy.floor() as usize).min(cells - 1);
            let ty = fy - y0 as f64;
            for x in 0..w {
                let fx = (x as f64 + 0.5) / w as f64 * cells as f64;
                let x0 = (fx.floor() as usize).min(cells - 1);
                let tx = fx - x0 as f64;
                let v00 = lattice[y0 * g + x0];
                let v01 = lattice[y0 * g + x0 + 1];
                let v10 = lattice[(y0 + 1) * g + x0];
                let v11 = lattice[(y0 + 1) * g + x0 + 1];
                out[(c * h + y) * w + x] =
                    (1.0 - ty) * ((1.0 - tx) * v00 + tx * v01) + ty * ((1.0 - tx) * v10 + tx * v11);
            }
        }
    }
    out
}

fn rasterize(shapes: &[Shape], h: usize, w: usize) -> (LabelGrid, Vec<usize>) {
    let mut mask = LabelGrid::filled(h, w, BACKGROUND);
    let mut owner = vec![usize::MAX; h * w];
    for (i, s) in shapes.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                if s.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    mask.set(y, x, s.class());
                    owner[y * w + x] = i;
                }
            }
        }
    }
    (mask, owner)
}

/// Generates one scene. Shape sets in which some shape keeps fewer than
/// `min_visible_fraction` of the pixels visible are redrawn.
pub fn generate_scene<R: Rng + ?Sized>(world: &WorldConfig, rng: &mut R) -> Scene {
    let (h, w) = (world.height, world.width);
    let min_visible = (world.min_visible_fraction * world.pixels() as f64).ceil() as usize;
    let mut attempt = 0;
    let (mask, owner, shapes) = loop {
        attempt += 1;
        let count = if attempt > 64 {
            1
        } else {
            rng.random_range(world.min_shapes..=world.max_shapes)
        };
        let shapes: Vec<Shape> = (0..count)
            .map(|_| {
                let class = rng.random_range(1..world.num_classes() as i16);
                Shape::random(class, h, w, rng)
            })
            .collect();
        let (mask, owner) = rasterize(&shapes, h, w);
        let ok = (0..shapes.len()).all(|i| owner.iter().filter(|&&o| o == i).count() >= min_visible);
        if ok {
            break (mask, owner, shapes);
        }
    };

    // Background: dim, low-saturation base color plus smooth colored texture.
    let base_val: f64 = rng.random_range(-0.6..0.0);
    let base_tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.12..0.12));
    let texture = smooth_texture(rng, h, w, 4);
    let colors: Vec<[f64; 3]> = shapes
        .iter()
        .map(|s| {
            let hue = class_hue(s.class()) + rng.random_range(-world.hue_jitter_deg..=world.hue_jitter_deg);
            let sat = rng.random_range(0.55..1.0);
            let val = rng.random_range(0.6..1.0);
            hsv_to_signed_rgb(hue, sat, val)
        })
        .collect();

    let mut image = ImageGrid::zeros(3, h, w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let base = match owner[p] {
                    usize::MAX => base_val + base_tint[c] + world.background_texture * texture[(c * h + y) * w + x],
                    i => colors[i][c],
                };
                let v = base + world.pixel_noise * standard_normal(rng);
                image.set(c, y, x, v.clamp(-1.0, 1.0));
            }
        }
    }
    image.round_to_f32();

    let mut class_set = vec![false; world.num_classes()];
    for &v in mask.data() {
        class_set[v as usize] = true;
    }
    Scene {
        image,
        full_mask: mask,
        class_set,
    }
}

const NEIGHBORS: [(isize, isize); 4] = [(0, 1), (1, 0), (0, -1), (-1, 0)];

fn step(p: usize, d: (isize, isize), h: usize, w: usize) -> Option<usize> {
    let (y, x) = ((p / w) as isize + d.0, (p % w) as isize + d.1);
    (y >= 0 && x >= 0 && y < h as isize && x < w as isize).then(|| y as usize * w + x as usize)
}

/// Confined random walk of `target` distinct pixels over pixels where
/// `allowed` holds. Steps are unit moves with a uniformly random turn
/// (left, straight or right); blocked walks resume from a random earlier
/// stroke pixel, so strokes stay 4-connected.
fn random_walk<R: Rng + ?Sized>(
    allowed: &dyn Fn(usize) -> bool,
    start: usize,
    target: usize,
    h: usize,
    w: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut stroke = vec![start];
    let mut visited = std::collections::HashSet::from([start]);
    let mut cur = start;
    let mut heading = rng.random_range(0..4usize);
    let mut budget = 64 * target.max(1);
    while stroke.len() < target && budget > 0 {
        budget -= 1;
        heading = (heading + [3, 0, 1][rng.random_range(0..3usize)]) % 4;
        let mut order = [heading, (heading + 1) % 4, (heading + 3) % 4, (heading + 2) % 4];
        order[1..3].shuffle(rng);
        let next = order.iter().find_map(|&d| {
            step(cur, NEIGHBORS[d], h, w)
                .filter(|&q| allowed(q) && !visited.contains(&q))
                .map(|q| (d, q))
        });
        match next {
            Some((d, q)) => {
                heading = d;
                cur = q;
                visited.insert(q);
                stroke.push(q);
            }
            None => cur = stroke[rng.random_range(0..stroke.len())],
        }
    }
    stroke
}

/// One random-walk stroke per present class, confined to that class's
/// region, totalling about `coverage_target` of the pixels.
pub fn draw_scribbles<R: Rng + ?Sized>(scene: &Scene, coverage_target: f64, rng: &mut R) -> Result<ScribbleMap> {
    if !(coverage_target > 0.0 && coverage_target <= 0.1) {
        return Err(Error::InvalidArgument(format!(
            "coverage_target {coverage_target} outside (0, 0.1]"
        )));
    }
    let (h, w) = scene.full_mask.shape();
    let mask = scene.full_mask.data();
    let total = ((coverage_target * (h * w) as f64).round() as usize).max(1);
    let classes: Vec<i16> = (0..scene.class_set.len() as i16)
        .filter(|&k| scene.class_set[k as usize])
        .collect();
    let mut labels = LabelGrid::filled(h, w, UNLABELED);
    let mut placed = 0usize;
    let mut strokes: Vec<(i16, Vec<usize>)> = Vec::new();
    for (i, &k) in classes.iter().enumerate() {
        let share = total / classes.len() + usize::from(i < total % classes.len());
        let region: Vec<usize> = (0..h * w).filter(|&p| mask[p] == k).collect();
        if region.is_empty() {
            continue;
        }
        // Prefer starting away from the region border.
        let interior: Vec<usize> = region
            .iter()
            .copied()
            .filter(|&p| NEIGHBORS.iter().all(|&d| step(p, d, h, w).is_some_and(|q| mask[q] == k)))
            .collect();
        let pool = if interior.is_empty() { &region } else { &interior };
        let start = pool[rng.random_range(0..pool.len())];
        let stroke = if share <= 1 {
            vec![start]
        } else {
            random_walk(&|q| mask[q] == k, start, share, h, w, rng)
        };
        placed += stroke.len();
        strokes.push((k, stroke));
    }
    // Strokes that fell short (tiny or fragmented regions) hand their deficit
    // to the longest-growing stroke, normally the background.
    if placed < total {
        if let Some((k, stroke)) = strokes.iter_mut().max_by_key(|(k, _)| {
            let k = *k;
            mask.iter().filter(|&&m| m == k).count()
        }) {
            let k = *k;
            let need = stroke.len() + (total - placed);
            let seed = stroke[0];
            let taken: std::collections::HashSet<usize> = stroke.iter().copied().collect();
            let mut grown = random_walk(&|q| mask[q] == k, seed, need, h, w, rng);
            // Keep the original pixels; the regrown walk starts from the same seed.
            grown.retain(|p| !taken.contains(p));
            stroke.extend(grown.into_iter().take(total - placed));
        }
    }
    for (k, stroke) in &strokes {
        for &p in stroke {
            labels.data_mut()[p] = *k;
        }
    }
    Ok(ScribbleMap::from_labels(labels))
}

/// Renders scribbles into condition channels. Unlabeled pixels are zero.
pub fn render_condition(sm: &ScribbleMap, mode: ConditionMode, palette: &[[f64; 3]], num_classes: usize) -> Result<ImageGrid> {
    let (h, w) = sm.labels.shape();
    match mode {
        ConditionMode::Rgb => {
            validate_palette(palette, num_classes)?;
            let mut g = ImageGrid::zeros(3, h, w);
            for y in 0..h {
                for x in 0..w {
                    let k = sm.labels.get(y, x);
                    if k >= 0 {
                        for c in 0..3 {
                            g.set(c, y, x, palette[k as usize][c]);
                        }
                    }
                }
            }
            Ok(g)
        }
        ConditionMode::OneHot => {
            let mut g = ImageGrid::zeros(num_classes, h, w);
            for y in 0..h {
                for x in 0..w {
                    let k = sm.labels.get(y, x);
                    if k >= 0 {
                        g.set(k as usize, y, x, 1.0);
                    }
                }
            }
            Ok(g)
        }
    }
}

pub fn class_set_vector(scene_classes: &[bool], mode: ClassSetMode) -> Vec<f64> {
    scene_classes
        .iter()
        .map(|&present| match mode {
            ClassSetMode::Present => f64::from(u8::from(present)),
            ClassSetMode::Constant => 1.0,
        })
        .collect()
}

/// A scene together with its scribbles and rendered condition.
#[derive(Debug, Clone, PartialEq)]
pub struct DataItem {
    pub scene: Scene,
    pub scribbles: ScribbleMap,
    pub condition: Condition,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub world: WorldConfig,
    pub seed: u64,
    pub items: Vec<DataItem>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// First `n` items; by construction this equals `build_dataset(n, ..)`.
    pub fn prefix(&self, n: usize) -> Dataset {
        Dataset {
            world: self.world.clone(),
            seed: self.seed,
            items: self.items[..n.min(self.items.len())].to_vec(),
        }
    }
}

/// Generates item `index` of the stream `seed`.
pub fn generate_item(world: &WorldConfig, seed: u64, index: usize) -> Result<DataItem> {
    let mut scene_rng = keyed_rng(seed, "scene", &[index as u64]);
    let scene = generate_scene(world, &mut scene_rng);
    let mut scribble_rng = keyed_rng(seed, "scribble", &[index as u64]);
    let scribbles = draw_scribbles(&scene, world.coverage_target, &mut scribble_rng)?;
    let channels = render_condition(&scribbles, world.condition_mode, &world.palette, world.num_classes())?;
    let condition = Condition::new(channels, class_set_vector(&scene.class_set, world.class_set_mode))?;
    Ok(DataItem {
        scene,
        scribbles,
        condition,
    })
}

/// `n` items, each keyed by `(seed, index)`, so smaller datasets are
/// prefixes of larger ones and the result is independent of thread count.
pub fn build_dataset(n: usize, world: &WorldConfig, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be >= 1".into()));
    }
    world.validate()?;
    let items = (0..n)
        .into_par_iter()
        .map(|i| generate_item(world, seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        world: world.clone(),
        seed,
        items,
    })
}

/// 4-connected components of equal, labeled pixels.
pub fn count_stroke_components(labels: &LabelGrid) -> usize {
    let (h, w) = labels.shape();
    let d = labels.data();
    let mut seen = vec![false; h * w];
    let mut count = 0;
    for p in 0..h * w {
        if d[p] == UNLABELED || seen[p] {
            continue;
        }
        count += 1;
        let mut stack = vec![p];
        seen[p] = true;
        while let Some(q) = stack.pop() {
            for &dir in &NEIGHBORS {
                if let Some(r) = step(q, dir, h, w) {
                    if !seen[r] && d[r] == d[p] {
                        seen[r] = true;
                        stack.push(r);
                    }
                }
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_is_deterministic_per_stream() {
        let world = WorldConfig::default();
        let a = generate_scene(&world, &mut keyed_rng(3, "s", &[]));
        let b = generate_scene(&world, &mut keyed_rng(3, "s", &[]));
        assert_eq!(a, b);
        let c = generate_scene(&world, &mut keyed_rng(4, "s", &[]));
        assert_ne!(a, c);
    }

    #[test]
    fn unlabeled_map_renders_to_zero() {
        let sm = ScribbleMap::from_labels(LabelGrid::filled(4, 4, UNLABELED));
        for mode in [ConditionMode::Rgb, ConditionMode::OneHot] {
            let g = render_condition(&sm, mode, &default_palette(), 4).unwrap();
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn renders_palette_and_one_hot_counts() {
        let mut labels = LabelGrid::filled(3, 3, UNLABELED);
        labels.set(0, 0, 2);
        labels.set(1, 1, 2);
        labels.set(2, 2, 0);
        let sm = ScribbleMap::from_labels(labels);
        let pal = default_palette();
        let rgb = render_condition(&sm, ConditionMode::Rgb, &pal, 4).unwrap();
        for c in 0..3 {
            assert_eq!(rgb.get(c, 0, 0), pal[2][c]);
            assert_eq!(rgb.get(c, 2, 2), pal[0][c]);
            assert_eq!(rgb.get(c, 0, 1), 0.0);
        }
        let oh = render_condition(&sm, ConditionMode::OneHot, &pal, 4).unwrap();
        let sums: Vec<f64> = (0..4)
            .map(|k| (0..3).flat_map(|y| (0..3).map(move |x| (y, x))).map(|(y, x)| oh.get(k, y, x)).sum())
            .collect();
        assert_eq!(sums, vec![1.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn palette_collisions_are_rejected() {
        let mut pal = default_palette();
        pal[3] = pal[1];
        let sm = ScribbleMap::from_labels(LabelGrid::filled(2, 2, UNLABELED));
        assert!(render_condition(&sm, ConditionMode::Rgb, &pal, 4).is_err());
        pal[3] = [0.0; 3];
        assert!(render_condition(&sm, ConditionMode::Rgb, &pal, 4).is_err());
    }

    #[test]
    fn single_circle_gives_two_stroke_components() {
        let world = WorldConfig::default();
        let shapes = [Shape::Circle {
            cx: 16.0,
            cy: 16.0,
            r: 7.0,
        }];
        let (mask, _) = rasterize(&shapes, 32, 32);
        let scene = Scene {
            image: ImageGrid::zeros(3, 32, 32),
            full_mask: mask,
            class_set: vec![true, true, false, false],
        };
        for seed in 0..50 {
            let sm = draw_scribbles(&scene, world.coverage_target, &mut keyed_rng(seed, "w", &[])).unwrap();
            assert_eq!(count_stroke_components(&sm.labels), 2, "seed {seed}");
            assert!((0.02..=0.04).contains(&sm.coverage));
        }
    }

    #[test]
    fn invalid_coverage_is_rejected() {
        let world = WorldConfig::default();
        let scene = generate_scene(&world, &mut keyed_rng(1, "s", &[]));
        assert!(draw_scribbles(&scene, 0.0, &mut keyed_rng(1, "w", &[])).is_err());
        assert!(draw_scribbles(&scene, 0.2, &mut keyed_rng(1, "w", &[])).is_err());
    }

    #[test]
    fn class_set_vector_modes() {
        let present = [true, false, true, false];
        assert_eq!(class_set_vector(&present, ClassSetMode::Present), vec![1.0, 0.0, 1.0, 0.0]);
        assert_eq!(class_set_vector(&present, ClassSetMode::Constant), vec![1.0; 4]);
        assert!(Condition::new(ImageGrid::zeros(3, 2, 2), vec![0.5]).is_err());
    }
}
