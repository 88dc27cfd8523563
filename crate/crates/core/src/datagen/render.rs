use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{caption_for, DataConfig, SegSample, BACKGROUND};
use crate::numcore::RngState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Ellipse,
    Diamond,
    Ring,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Texture {
    Solid,
    Stripes,
    Dots,
    Checker,
    Speckle,
}

const SHAPES: [Shape; 6] = [
    Shape::Circle,
    Shape::Square,
    Shape::Triangle,
    Shape::Ellipse,
    Shape::Diamond,
    Shape::Ring,
];
const TEXTURES: [Texture; 5] = [
    Texture::Solid,
    Texture::Stripes,
    Texture::Dots,
    Texture::Checker,
    Texture::Speckle,
];

/// One way an ingredient can look.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AppearanceMode {
    pub shape: Shape,
    pub texture: Texture,
    pub color: [u8; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngredientClass {
    pub name: String,
    pub modes: Vec<AppearanceMode>,
}

const FOOD_NAMES: &[&str] = &[
    "egg",
    "rice",
    "carrot",
    "tomato",
    "broccoli",
    "potato",
    "mushroom",
    "onion",
    "pepper",
    "corn",
    "shrimp",
    "salmon",
    "chicken",
    "beef",
    "tofu",
    "noodle",
    "lettuce",
    "cucumber",
    "pumpkin",
    "eggplant",
    "cabbage",
    "bean",
    "cheese",
    "bread",
    "apple",
    "banana",
    "orange",
    "lemon",
    "strawberry",
    "grape",
    "pea",
    "garlic",
    "ginger",
    "spinach",
    "celery",
    "pork",
    "sausage",
    "pasta",
    "avocado",
    "olive",
];

/// `n` distinct single-word class names: food words first, then
/// pronounceable generated words.
pub fn class_names(n: usize) -> Vec<String> {
    const CONS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let mut out: Vec<String> = FOOD_NAMES.iter().take(n).map(|s| s.to_string()).collect();
    let mut k = 0usize;
    while out.len() < n {
        let mut word = String::from("x");
        let mut v = k;
        for _ in 0..3 {
            word.push(CONS[v % CONS.len()] as char);
            v /= CONS.len();
            word.push(VOWELS[v % VOWELS.len()] as char);
            v /= VOWELS.len();
        }
        out.push(word);
        k += 1;
    }
    out
}

/// `n` colors picked greedily from a 6-level RGB grid so each new color is
/// as far as possible from the ones already chosen and from the plate.
fn spread_palette(n: usize) -> Vec<[u8; 3]> {
    let grid: Vec<[f64; 3]> = (0..216)
        .map(|k| [k / 36, (k / 6) % 6, k % 6].map(|l| l as f64 * 51.0))
        .collect();
    let dist =
        |a: &[f64; 3], b: &[f64; 3]| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>().sqrt();
    let mut chosen: Vec<[f64; 3]> = vec![PLATE];
    while chosen.len() <= n {
        let best = grid
            .iter()
            .max_by(|a, b| {
                let da = chosen
                    .iter()
                    .map(|c| dist(a, c))
                    .fold(f64::INFINITY, f64::min);
                let db = chosen
                    .iter()
                    .map(|c| dist(b, c))
                    .fold(f64::INFINITY, f64::min);
                da.total_cmp(&db)
            })
            .expect("non-empty grid");
        chosen.push(*best);
    }
    chosen[1..].iter().map(|c| c.map(|v| v as u8)).collect()
}

const PLATE: [f64; 3] = [205.0, 203.0, 196.0];

/// Classes with `modes` appearance modes each. Every mode gets its own
/// palette color, so no two classes share a (shape, texture, color) triple.
pub fn make_classes(names: &[String], modes: usize, rng: &mut RngState) -> Vec<IngredientClass> {
    let n = names.len();
    let total = n * modes;
    let palette = spread_palette(total);
    names
        .iter()
        .enumerate()
        .map(|(c, name)| IngredientClass {
            name: name.clone(),
            modes: (0..modes)
                .map(|m| AppearanceMode {
                    shape: SHAPES[rng.below(SHAPES.len())],
                    texture: TEXTURES[rng.below(TEXTURES.len())],
                    color: palette[(c + m * n) % total],
                })
                .collect(),
        })
        .collect()
}

fn inside(shape: Shape, dx: f64, dy: f64, r: f64, aspect: f64) -> bool {
    match shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
        Shape::Triangle => dy <= r * 0.8 && dy >= -r && dx.abs() <= (dy + r) * 0.6,
        Shape::Ellipse => (dx / (r * aspect)).powi(2) + (dy / (r / aspect)).powi(2) <= 1.0,
        Shape::Diamond => dx.abs() + dy.abs() <= r,
        Shape::Ring => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (0.45 * r).powi(2)
        }
    }
}

fn texture_gain(t: Texture, x: usize, y: usize, phase: usize, speckle: f64) -> f64 {
    match t {
        Texture::Solid => 1.0,
        Texture::Stripes => {
            if ((x + y + phase) / 3).is_multiple_of(2) {
                1.0
            } else {
                0.72
            }
        }
        Texture::Dots => {
            if (x + phase) % 5 < 2 && (y + phase) % 5 < 2 {
                0.6
            } else {
                1.0
            }
        }
        Texture::Checker => {
            if ((x + phase) / 4 + y / 4).is_multiple_of(2) {
                1.0
            } else {
                0.8
            }
        }
        Texture::Speckle => speckle,
    }
}

struct Blob {
    class: usize,
    mode: usize,
    cx: f64,
    cy: f64,
    r: f64,
    aspect: f64,
}

const MIN_VISIBLE_PIXELS: usize = 64;

/// Renders one sample. Blobs are painted in order, so later blobs occlude
/// earlier ones; layouts in which a class ends up nearly hidden are redrawn.
pub fn render_sample(
    classes: &[IngredientClass],
    cfg: &DataConfig,
    rng: &mut RngState,
) -> SegSample {
    let size = cfg.image_size;
    let scale = size as f64 / 64.0;
    let n_blobs = cfg.min_blobs + rng.below(cfg.max_blobs - cfg.min_blobs + 1);
    let n_blobs = n_blobs.min(classes.len());
    let chosen = rng.sample_distinct(classes.len(), n_blobs);
    let names: Vec<String> = classes.iter().map(|c| c.name.clone()).collect();
    loop {
        let blobs: Vec<Blob> = chosen
            .iter()
            .map(|&class| {
                let r = rng.range_f64(8.0, 15.0) * scale;
                Blob {
                    class,
                    mode: rng.below(classes[class].modes.len()),
                    cx: rng.range_f64(r * 0.6, size as f64 - r * 0.6),
                    cy: rng.range_f64(r * 0.6, size as f64 - r * 0.6),
                    r,
                    aspect: rng.range_f64(1.2, 1.6),
                }
            })
            .collect();
        let mut mask = GrayImage::from_pixel(size as u32, size as u32, Luma([BACKGROUND]));
        let mut owner = vec![usize::MAX; size * size];
        for (bi, b) in blobs.iter().enumerate() {
            let shape = classes[b.class].modes[b.mode].shape;
            for y in 0..size {
                for x in 0..size {
                    let dx = x as f64 + 0.5 - b.cx;
                    let dy = y as f64 + 0.5 - b.cy;
                    if inside(shape, dx, dy, b.r, b.aspect) {
                        owner[y * size + x] = bi;
                        mask.put_pixel(x as u32, y as u32, Luma([b.class as u8]));
                    }
                }
            }
        }
        let mut visible = vec![0usize; blobs.len()];
        for &o in &owner {
            if o != usize::MAX {
                visible[o] += 1;
            }
        }
        if visible.iter().any(|&v| v < MIN_VISIBLE_PIXELS) {
            continue;
        }
        let jitter: Vec<[f64; 3]> = blobs
            .iter()
            .map(|_| [0; 3].map(|_: i32| rng.range_f64(-10.0, 10.0)))
            .collect();
        let phases: Vec<usize> = blobs.iter().map(|_| rng.below(6)).collect();
        let mut image = RgbImage::new(size as u32, size as u32);
        for y in 0..size {
            for x in 0..size {
                let noise = rng.range_f64(-4.0, 4.0);
                let px = match owner[y * size + x] {
                    usize::MAX => {
                        let rim = if x < 2 || y < 2 || x >= size - 2 || y >= size - 2 {
                            0.85
                        } else {
                            1.0
                        };
                        PLATE.map(|c| c * rim + noise)
                    }
                    bi => {
                        let b = &blobs[bi];
                        let mode = &classes[b.class].modes[b.mode];
                        let speckle = rng.range_f64(0.8, 1.1);
                        let g = texture_gain(mode.texture, x, y, phases[bi], speckle);
                        let mut px = [0.0; 3];
                        for c in 0..3 {
                            px[c] = (mode.color[c] as f64 + jitter[bi][c]) * g + noise;
                        }
                        px
                    }
                };
                image.put_pixel(
                    x as u32,
                    y as u32,
                    Rgb(px.map(|v| v.round().clamp(0.0, 255.0) as u8)),
                );
            }
        }
        let mut present: Vec<usize> = chosen.clone();
        present.sort_unstable();
        let caption = caption_for(&names, &present);
        return SegSample {
            image,
            mask,
            present_classes: present,
            caption,
        };
    }
}

/// `n_samples` samples; sample `i` depends only on `(rng seed, tag, i)`.
pub fn gen_corpus(
    classes: &[IngredientClass],
    cfg: &DataConfig,
    n_samples: usize,
    rng: &RngState,
    tag: u64,
) -> Vec<SegSample> {
    use rayon::prelude::*;
    (0..n_samples)
        .into_par_iter()
        .map(|i| render_sample(classes, cfg, &mut rng.derive(tag, i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::classes_in_caption;
    use std::collections::HashSet;

    fn setup(n: usize) -> (Vec<IngredientClass>, DataConfig) {
        let names = class_names(n);
        let classes = make_classes(&names, 2, &mut RngState::new(1));
        let cfg = DataConfig {
            n_classes: n,
            ..Default::default()
        };
        (classes, cfg)
    }

    #[test]
    fn names_are_distinct() {
        let names = class_names(300);
        let set: HashSet<&String> = names.iter().collect();
        assert_eq!(set.len(), 300);
        assert!(names.iter().all(|n| !n.contains(' ')));
    }

    #[test]
    fn deterministic_per_seed() {
        let (classes, cfg) = setup(8);
        let rng = RngState::new(42);
        let a = gen_corpus(&classes, &cfg, 6, &rng, 0);
        let b = gen_corpus(&classes, &cfg, 6, &rng, 0);
        assert_eq!(a, b);
        let c = gen_corpus(&classes, &cfg, 6, &RngState::new(43), 0);
        assert_ne!(a, c);
    }

    #[test]
    fn modes_are_unique_and_separated() {
        let (classes, _) = setup(24);
        let modes: Vec<&AppearanceMode> = classes.iter().flat_map(|c| &c.modes).collect();
        let set: HashSet<&AppearanceMode> = modes.iter().copied().collect();
        assert_eq!(set.len(), modes.len());
        for (i, a) in modes.iter().enumerate() {
            for b in &modes[i + 1..] {
                let d: f64 = (0..3)
                    .map(|c| (a.color[c] as f64 - b.color[c] as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(d > 25.0, "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn every_class_covered() {
        let (classes, cfg) = setup(8);
        let samples = gen_corpus(&classes, &cfg, 80, &RngState::new(5), 0);
        let mut hist = vec![0usize; 8];
        for s in &samples {
            for (c, n) in s.class_pixel_counts(8).iter().enumerate() {
                hist[c] += n;
            }
        }
        assert!(hist.iter().all(|&n| n > 0), "{hist:?}");
    }

    #[test]
    fn caption_matches_mask() {
        let (classes, cfg) = setup(12);
        let names: Vec<String> = classes.iter().map(|c| c.name.clone()).collect();
        for s in gen_corpus(&classes, &cfg, 40, &RngState::new(9), 3) {
            let counts = s.class_pixel_counts(12);
            let visible: Vec<usize> = (0..12).filter(|&c| counts[c] > 0).collect();
            assert_eq!(visible, s.present_classes);
            assert_eq!(classes_in_caption(&names, &s.caption), s.present_classes);
            assert!((1..=4).contains(&s.present_classes.len()));
        }
    }
}
