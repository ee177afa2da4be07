//! Procedural shape scenes: the desk-scale stand-in for the face/COCO data.
//!
//! Each scene is a 32x32 RGB image of a colored foreground shape on a
//! patterned background. The edit mask marks the background for regeneration
//! (M=1) and preserves the shape (M=0). Background palettes are derived from
//! the shape color so a trained model genuinely has to read the preserved
//! pixels to harmonize the regenerated region.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Scene edge length in pixels.
pub const SCENE_SIDE: usize = 32;

/// Allowed preserved-region (shape) area fraction.
pub const PRESERVED_FRACTION: (f64, f64) = (0.05, 0.4);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
}

pub const SHAPE_CLASSES: [ShapeClass; 5] = [
    ShapeClass::Circle,
    ShapeClass::Square,
    ShapeClass::Triangle,
    ShapeClass::Cross,
    ShapeClass::Ring,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackgroundClass {
    Stripes,
    Checker,
    Gradient,
    Blobs,
}

pub const BACKGROUND_CLASSES: [BackgroundClass; 4] = [
    BackgroundClass::Stripes,
    BackgroundClass::Checker,
    BackgroundClass::Gradient,
    BackgroundClass::Blobs,
];

/// One generated scene.
#[derive(Clone, Debug)]
pub struct ShapeScene {
    /// RGB image in [0,1], `[3, 32, 32]`.
    pub image: Tensor<f32>,
    /// Edit mask `[1, 32, 32]`: 1 = regenerate, 0 = preserved.
    pub mask: Tensor<f32>,
    pub shape_class: ShapeClass,
    pub background_class: BackgroundClass,
    /// Background class + 1; prompt 0 is the null prompt.
    pub prompt_id: usize,
    pub seed: u64,
}

/// One evaluation unit: the paper-style one-to-one pairing of image, mask,
/// prompt and random seed.
#[derive(Clone, Debug)]
pub struct InpaintTask {
    pub id: usize,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub prompt_id: usize,
    pub seed: u64,
}

impl ShapeScene {
    pub fn to_task(&self, id: usize) -> InpaintTask {
        InpaintTask {
            id,
            image: self.image.clone(),
            mask: self.mask.clone(),
            prompt_id: self.prompt_id,
            seed: self.seed,
        }
    }

    /// Fraction of pixels in the preserved (M=0) region.
    pub fn preserved_fraction(&self) -> f64 {
        preserved_fraction(&self.mask)
    }

    /// Classifier label over (shape x background) = 20 classes.
    pub fn label(&self) -> usize {
        let s = SHAPE_CLASSES
            .iter()
            .position(|&c| c == self.shape_class)
            .unwrap();
        let b = BACKGROUND_CLASSES
            .iter()
            .position(|&c| c == self.background_class)
            .unwrap();
        s * BACKGROUND_CLASSES.len() + b
    }
}

pub fn preserved_fraction(mask: &Tensor<f32>) -> f64 {
    let zeros = mask.data().iter().filter(|&&v| v == 0.0).count();
    zeros as f64 / mask.numel() as f64
}

/// Deterministic balanced dataset: class combos assigned round-robin.
pub fn gen_dataset(n: usize, seed: u64) -> Result<Vec<ShapeScene>> {
    if n == 0 {
        return Err(Error::Contract("gen_dataset: n must be >= 1".into()));
    }
    (0..n).map(|i| gen_scene(i, seed)).collect()
}

fn gen_scene(index: usize, dataset_seed: u64) -> Result<ShapeScene> {
    let shape_class = SHAPE_CLASSES[index % 5];
    let background_class = BACKGROUND_CLASSES[(index / 5) % 4];
    let scene_seed = rng::derive(dataset_seed, index as u64, 0x5ce);
    let mut r = rng::rng_for(scene_seed, 0, 0);

    let shape_color = [
        r.gen_range(0.25f32..1.0),
        r.gen_range(0.25f32..1.0),
        r.gen_range(0.25f32..1.0),
    ];
    // Palette tied to the shape color: the model must read the preserved
    // region to reproduce the background colors.
    let bg_a = shape_color.map(|c| (c * 0.85).clamp(0.0, 1.0));
    let bg_b = shape_color.map(|c| (1.0 - 0.7 * c).clamp(0.0, 1.0));

    let mut image = Tensor::zeros(&[3, SCENE_SIDE, SCENE_SIDE]);
    paint_background(&mut image, background_class, bg_a, bg_b, &mut r);

    let footprint = shape_footprint(shape_class, &mut r)?;
    let mut mask = Tensor::full(&[1, SCENE_SIDE, SCENE_SIDE], 1.0);
    for y in 0..SCENE_SIDE {
        for x in 0..SCENE_SIDE {
            if footprint[y * SCENE_SIDE + x] {
                mask.set3(0, y, x, 0.0);
                for (c, &col) in shape_color.iter().enumerate() {
                    image.set3(c, y, x, col);
                }
            }
        }
    }

    let scene = ShapeScene {
        image,
        mask,
        shape_class,
        background_class,
        prompt_id: BACKGROUND_CLASSES
            .iter()
            .position(|&c| c == background_class)
            .unwrap()
            + 1,
        seed: scene_seed,
    };
    let frac = scene.preserved_fraction();
    if frac < PRESERVED_FRACTION.0 || frac > PRESERVED_FRACTION.1 {
        return Err(Error::Contract(format!(
            "scene {index}: preserved fraction {frac:.3} out of bounds"
        )));
    }
    Ok(scene)
}

fn paint_background(
    img: &mut Tensor<f32>,
    class: BackgroundClass,
    a: [f32; 3],
    b: [f32; 3],
    r: &mut ChaCha8Rng,
) {
    let s = SCENE_SIDE;
    match class {
        BackgroundClass::Stripes => {
            let width = r.gen_range(3usize..=6);
            let diag = r.gen_bool(0.5);
            let vertical = r.gen_bool(0.5);
            let phase = r.gen_range(0usize..width * 2);
            for y in 0..s {
                for x in 0..s {
                    let coord = if diag { x + y } else if vertical { x } else { y };
                    let on = ((coord + phase) / width) % 2 == 0;
                    let col = if on { a } else { b };
                    for c in 0..3 {
                        img.set3(c, y, x, col[c]);
                    }
                }
            }
        }
        BackgroundClass::Checker => {
            let cell = r.gen_range(4usize..=8);
            let phase = r.gen_range(0usize..cell);
            for y in 0..s {
                for x in 0..s {
                    let on = (((x + phase) / cell) + ((y + phase) / cell)) % 2 == 0;
                    let col = if on { a } else { b };
                    for c in 0..3 {
                        img.set3(c, y, x, col[c]);
                    }
                }
            }
        }
        BackgroundClass::Gradient => {
            let angle = r.gen_range(0.0f32..std::f32::consts::TAU);
            let (dx, dy) = (angle.cos(), angle.sin());
            let span = (s as f32 - 1.0) * (dx.abs() + dy.abs());
            for y in 0..s {
                for x in 0..s {
                    let proj = x as f32 * dx + y as f32 * dy;
                    let t = ((proj / span) + 0.5).clamp(0.0, 1.0);
                    for c in 0..3 {
                        img.set3(c, y, x, a[c] + (b[c] - a[c]) * t);
                    }
                }
            }
        }
        BackgroundClass::Blobs => {
            let k = r.gen_range(3usize..=5);
            let centers: Vec<(f32, f32, f32)> = (0..k)
                .map(|_| {
                    (
                        r.gen_range(0.0..s as f32),
                        r.gen_range(0.0..s as f32),
                        r.gen_range(4.0..9.0f32),
                    )
                })
                .collect();
            for y in 0..s {
                for x in 0..s {
                    let mut w = 0.0f32;
                    for &(cx, cy, sig) in &centers {
                        let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                        w += (-d2 / (2.0 * sig * sig)).exp();
                    }
                    let t = (w / 1.5).clamp(0.0, 1.0);
                    for c in 0..3 {
                        img.set3(c, y, x, a[c] + (b[c] - a[c]) * t);
                    }
                }
            }
        }
    }
}

/// Rasterize the shape footprint, resizing until the preserved fraction lands
/// inside the allowed band.
fn shape_footprint(class: ShapeClass, r: &mut ChaCha8Rng) -> Result<Vec<bool>> {
    let s = SCENE_SIDE;
    let total = (s * s) as f64;
    let cx = s as f32 / 2.0 - 0.5 + r.gen_range(-3.0f32..3.0);
    let cy = s as f32 / 2.0 - 0.5 + r.gen_range(-3.0f32..3.0);
    let mut size = match class {
        ShapeClass::Circle => r.gen_range(5.0f32..10.0),
        ShapeClass::Square => r.gen_range(4.5f32..9.0),
        ShapeClass::Triangle => r.gen_range(7.0f32..11.0),
        ShapeClass::Cross => r.gen_range(8.0f32..12.0),
        ShapeClass::Ring => r.gen_range(7.5f32..11.0),
    };
    for _ in 0..16 {
        let fp = rasterize(class, cx, cy, size, r.gen_range(0.3f32..0.55));
        let frac = fp.iter().filter(|&&b| b).count() as f64 / total;
        if frac < PRESERVED_FRACTION.0 {
            size *= 1.15;
        } else if frac > PRESERVED_FRACTION.1 {
            size *= 0.87;
        } else {
            return Ok(fp);
        }
    }
    Err(Error::Contract(format!(
        "shape footprint for {class:?} failed to satisfy area bounds"
    )))
}

fn rasterize(class: ShapeClass, cx: f32, cy: f32, size: f32, aux: f32) -> Vec<bool> {
    let s = SCENE_SIDE;
    let mut fp = vec![false; s * s];
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f32 - cx, y as f32 - cy);
            let inside = match class {
                ShapeClass::Circle => px * px + py * py <= size * size,
                ShapeClass::Square => px.abs() <= size && py.abs() <= size,
                ShapeClass::Triangle => {
                    // Isoceles, apex up: height 1.7*size, half-base size.
                    let h = 1.7 * size;
                    let yy = py + h / 2.0;
                    yy >= 0.0 && yy <= h && px.abs() <= size * (yy / h)
                }
                ShapeClass::Cross => {
                    let w = size * aux;
                    (px.abs() <= w && py.abs() <= size) || (py.abs() <= w && px.abs() <= size)
                }
                ShapeClass::Ring => {
                    let d2 = px * px + py * py;
                    let inner = (size - 3.0).max(1.0);
                    d2 <= size * size && d2 >= inner * inner
                }
            };
            if inside {
                fp[y * s + x] = true;
            }
        }
    }
    fp
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_identical_scenes() {
        let a = gen_dataset(12, 77).unwrap();
        let b = gen_dataset(12, 77).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image.data(), y.image.data());
            assert_eq!(x.mask.data(), y.mask.data());
            assert_eq!(x.seed, y.seed);
        }
        let c = gen_dataset(12, 78).unwrap();
        assert_ne!(a[0].image.data(), c[0].image.data());
    }

    #[test]
    fn preserved_fraction_in_bounds() {
        for scene in gen_dataset(60, 3).unwrap() {
            let f = scene.preserved_fraction();
            assert!((0.05..=0.4).contains(&f), "fraction {f}");
            assert!(scene.mask.is_binary());
        }
    }

    #[test]
    fn class_histogram_balanced_over_100() {
        let scenes = gen_dataset(100, 9).unwrap();
        let mut counts = [0usize; 20];
        for s in &scenes {
            counts[s.label()] += 1;
        }
        let (min, max) = (
            counts.iter().min().unwrap(),
            counts.iter().max().unwrap(),
        );
        assert!(max - min <= 1, "histogram {counts:?}");
    }

    #[test]
    fn images_in_unit_range() {
        for scene in gen_dataset(24, 5).unwrap() {
            assert!(scene
                .image
                .data()
                .iter()
                .all(|&v| (0.0..=1.0).contains(&v)));
            assert!(scene.prompt_id >= 1 && scene.prompt_id <= 4);
        }
    }

    #[test]
    fn rejects_empty_dataset() {
        assert!(gen_dataset(0, 1).is_err());
    }
}
