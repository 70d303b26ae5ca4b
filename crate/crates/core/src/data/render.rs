//! Procedural attribute × object images and programmatic analyzers.
//!
//! Objects pick the geometry, attributes pick the fill (color plus an
//! optional stripe or checker pattern). Rendering is a pure function of
//! `(attribute, object, sample seed)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vocab::VocabSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const BACKGROUND: [f32; 3] = [0.5, 0.5, 0.5];
const DARK_FACTOR: f32 = 0.4;

const COLORS: [(&str, [f32; 3]); 8] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.8, 0.15]),
    ("blue", [0.15, 0.25, 0.95]),
    ("yellow", [0.95, 0.9, 0.1]),
    ("magenta", [0.9, 0.1, 0.85]),
    ("cyan", [0.1, 0.85, 0.9]),
    ("orange", [1.0, 0.55, 0.0]),
    ("purple", [0.55, 0.15, 0.9]),
];

const SHAPE_NAMES: [&str; 8] = [
    "circle", "square", "triangle", "ring", "cross", "star", "diamond", "hexagon",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    Solid,
    Stripes,
    Checker,
}

/// Appearance controlled by an attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeStyle {
    pub name: String,
    pub color: [f32; 3],
    pub pattern: Pattern,
}

/// Geometry controlled by an object.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Ring,
    Cross,
    Star,
    Diamond,
    Polygon(usize),
}

/// Style of the `k`-th synthetic attribute: eight base colors, then striped
/// and checkered variants, then further hues.
pub fn attribute_style(k: usize) -> AttributeStyle {
    let pattern = match (k / COLORS.len()) % 3 {
        0 => Pattern::Solid,
        1 => Pattern::Stripes,
        _ => Pattern::Checker,
    };
    let cycle = k / (3 * COLORS.len());
    let (base, color) = if cycle == 0 {
        let (n, c) = COLORS[k % COLORS.len()];
        (n.to_string(), c)
    } else {
        let hue = (k as f32 * 0.618_034).fract();
        (format!("hue{k}"), hsv_to_rgb(hue, 0.85, 0.9))
    };
    let name = match pattern {
        Pattern::Solid => base,
        Pattern::Stripes => format!("striped-{base}"),
        Pattern::Checker => format!("checkered-{base}"),
    };
    AttributeStyle {
        name,
        color,
        pattern,
    }
}

pub fn object_shape(k: usize) -> (String, Shape) {
    let shape = match k {
        0 => Shape::Circle,
        1 => Shape::Square,
        2 => Shape::Triangle,
        3 => Shape::Ring,
        4 => Shape::Cross,
        5 => Shape::Star,
        6 => Shape::Diamond,
        _ => Shape::Polygon(k - 1),
    };
    let name = SHAPE_NAMES
        .get(k)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("polygon{}", k - 1));
    (name, shape)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Rendering parameters for one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderSpec {
    pub image_hw: usize,
    /// Half-width of uniform per-pixel noise.
    pub noise: f32,
    pub attributes: Vec<AttributeStyle>,
    pub objects: Vec<(String, Shape)>,
}

impl RenderSpec {
    /// The synthetic `n_attrs × n_objs` family.
    pub fn synthetic(n_attrs: usize, n_objs: usize, image_hw: usize, noise: f32) -> Self {
        RenderSpec {
            image_hw,
            noise,
            attributes: (0..n_attrs).map(attribute_style).collect(),
            objects: (0..n_objs).map(object_shape).collect(),
        }
    }

    pub fn vocab(&self) -> Result<VocabSpec> {
        VocabSpec::new(
            self.attributes.iter().map(|a| a.name.clone()).collect(),
            self.objects.iter().map(|o| o.0.clone()).collect(),
        )
    }
}

/// An `hw × hw × 3` image in `[0, 1]`.
pub type Image = Tensor;

/// Renders one sample. Position, scale and noise are drawn from
/// `sample_seed`.
pub fn render_image(attr: usize, obj: usize, spec: &RenderSpec, sample_seed: u64) -> Result<Image> {
    let style = spec
        .attributes
        .get(attr)
        .ok_or_else(|| Error::Vocabulary(format!("attribute #{attr}")))?;
    let &(_, shape) = spec
        .objects
        .get(obj)
        .ok_or_else(|| Error::Vocabulary(format!("object #{obj}")))?;
    let hw = spec.image_hw;
    if hw < 8 {
        return Err(Error::Config(format!("image size {hw} too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let hwf = hw as f32;
    let radius = hwf * rng.random_range(0.28..0.38);
    let slack = (hwf / 2.0 - radius - 1.0).max(0.0);
    let cx = hwf / 2.0 + rng.random_range(-1.0..=1.0) * slack;
    let cy = hwf / 2.0 + rng.random_range(-1.0..=1.0) * slack;
    let period = (hw / 16).max(2);

    let mut data = vec![0.0f32; hw * hw * 3];
    for y in 0..hw {
        for x in 0..hw {
            let u = (x as f32 + 0.5 - cx) / radius;
            let v = (y as f32 + 0.5 - cy) / radius;
            let rgb = if inside(shape, u, v) {
                let dark = match style.pattern {
                    Pattern::Solid => false,
                    Pattern::Stripes => (x / period) % 2 == 1,
                    Pattern::Checker => (x / period + y / period) % 2 == 1,
                };
                let f = if dark { DARK_FACTOR } else { 1.0 };
                style.color.map(|c| c * f)
            } else {
                BACKGROUND
            };
            let px = &mut data[(y * hw + x) * 3..(y * hw + x) * 3 + 3];
            for (dst, c) in px.iter_mut().zip(rgb) {
                let n = if spec.noise > 0.0 {
                    rng.random_range(-spec.noise..=spec.noise)
                } else {
                    0.0
                };
                *dst = (c + n).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![hw, hw, 3], data)
}

fn regular_polygon(n: usize, radius_at: impl Fn(usize) -> f32) -> Vec<(f32, f32)> {
    (0..n)
        .map(|i| {
            let theta = -std::f32::consts::FRAC_PI_2 + i as f32 * std::f32::consts::TAU / n as f32;
            let r = radius_at(i);
            (r * theta.cos(), r * theta.sin())
        })
        .collect()
}

fn in_polygon(poly: &[(f32, f32)], u: f32, v: f32) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > v) != (yj > v) && u < (xj - xi) * (v - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn inside(shape: Shape, u: f32, v: f32) -> bool {
    match shape {
        Shape::Circle => u * u + v * v <= 1.0,
        Shape::Square => u.abs() <= 0.85 && v.abs() <= 0.85,
        Shape::Triangle => in_polygon(&[(0.0, -1.0), (0.95, 0.8), (-0.95, 0.8)], u, v),
        Shape::Ring => {
            let r2 = u * u + v * v;
            (0.25..=1.0).contains(&r2)
        }
        Shape::Cross => (u.abs() <= 0.33 && v.abs() <= 1.0) || (v.abs() <= 0.33 && u.abs() <= 1.0),
        Shape::Star => in_polygon(
            &regular_polygon(10, |i| if i % 2 == 0 { 1.0 } else { 0.45 }),
            u,
            v,
        ),
        Shape::Diamond => u.abs() + v.abs() <= 1.0,
        Shape::Polygon(n) => in_polygon(&regular_polygon(n, |_| 1.0), u, v),
    }
}

/// Pixels that differ visibly from the background.
pub fn foreground_mask(img: &Image) -> Vec<bool> {
    img.data()
        .chunks(3)
        .map(|px| {
            px.iter()
                .zip(BACKGROUND)
                .map(|(&c, b)| (c - b).abs())
                .fold(0.0f32, f32::max)
                > 0.15
        })
        .collect()
}

const GRID: usize = 24;

/// Foreground mask cropped to its bounding box and resampled to a fixed grid.
fn normalized_mask(mask: &[bool], hw: usize) -> Option<Vec<bool>> {
    let (mut x0, mut y0, mut x1, mut y1) = (hw, hw, 0, 0);
    for y in 0..hw {
        for x in 0..hw {
            if mask[y * hw + x] {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if x0 > x1 {
        return None;
    }
    let (w, h) = ((x1 - x0 + 1) as f32, (y1 - y0 + 1) as f32);
    Some(
        (0..GRID * GRID)
            .map(|i| {
                let gx = ((i % GRID) as f32 + 0.5) / GRID as f32;
                let gy = ((i / GRID) as f32 + 0.5) / GRID as f32;
                let x = x0 + ((gx * w) as usize).min(x1 - x0);
                let y = y0 + ((gy * h) as usize).min(y1 - y0);
                mask[y * hw + x]
            })
            .collect(),
    )
}

fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Object index whose canonical silhouette best matches the image.
pub fn classify_object(img: &Image, spec: &RenderSpec) -> Option<usize> {
    let hw = spec.image_hw;
    let probe = normalized_mask(&foreground_mask(img), hw)?;
    let mut best = None;
    let mut best_iou = -1.0;
    for (k, (_, shape)) in spec.objects.iter().enumerate() {
        let template = canonical_mask(*shape, hw);
        let score = normalized_mask(&template, hw).map_or(0.0, |t| iou(&probe, &t));
        if score > best_iou {
            best_iou = score;
            best = Some(k);
        }
    }
    best
}

fn canonical_mask(shape: Shape, hw: usize) -> Vec<bool> {
    let c = hw as f32 / 2.0;
    let r = hw as f32 * 0.33;
    (0..hw * hw)
        .map(|i| {
            let u = ((i % hw) as f32 + 0.5 - c) / r;
            let v = ((i / hw) as f32 + 0.5 - c) / r;
            inside(shape, u, v)
        })
        .collect()
}

/// Attribute index recovered from fill color and pattern.
pub fn classify_attribute(img: &Image, spec: &RenderSpec) -> Option<usize> {
    let hw = spec.image_hw;
    let mask = foreground_mask(img);
    let px: Vec<(usize, &[f32])> = img
        .data()
        .chunks(3)
        .enumerate()
        .filter(|(i, _)| mask[*i])
        .collect();
    if px.is_empty() {
        return None;
    }
    let bright = |p: &[f32]| p.iter().copied().fold(0.0f32, f32::max);
    let peak = px.iter().map(|(_, p)| bright(p)).fold(0.0f32, f32::max);
    let is_dark = |p: &[f32]| bright(p) < 0.7 * peak;
    let dark_count = px.iter().filter(|(_, p)| is_dark(p)).count();
    let pattern = if (dark_count as f64) < 0.05 * px.len() as f64 {
        Pattern::Solid
    } else {
        // Stripes depend on the column only.
        let mut col_state: Vec<Option<bool>> = vec![None; hw];
        let mut consistent = 0usize;
        let mut total = 0usize;
        for (i, p) in &px {
            let x = i % hw;
            let d = is_dark(p);
            match col_state[x] {
                None => col_state[x] = Some(d),
                Some(s) => {
                    total += 1;
                    if s == d {
                        consistent += 1;
                    }
                }
            }
        }
        if total > 0 && consistent as f64 > 0.9 * total as f64 {
            Pattern::Stripes
        } else {
            Pattern::Checker
        }
    };
    let light: Vec<&[f32]> = px.iter().filter(|(_, p)| !is_dark(p)).map(|(_, p)| *p).collect();
    let mut mean = [0.0f32; 3];
    for p in &light {
        for c in 0..3 {
            mean[c] += p[c] / light.len() as f32;
        }
    }
    spec.attributes
        .iter()
        .enumerate()
        .filter(|(_, s)| s.pattern == pattern)
        .map(|(k, s)| {
            let d: f32 = s.color.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
            (k, d)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_pure() {
        let spec = RenderSpec::synthetic(6, 6, 32, 0.05);
        let a = render_image(2, 3, &spec, 99).unwrap();
        let b = render_image(2, 3, &spec, 99).unwrap();
        assert!(a.bit_eq(&b));
        let c = render_image(2, 3, &spec, 100).unwrap();
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn values_in_unit_range() {
        let spec = RenderSpec::synthetic(24, 10, 32, 0.2);
        for k in 0..24 {
            let img = render_image(k, k % 10, &spec, k as u64).unwrap();
            assert_eq!(img.shape(), &[32, 32, 3]);
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn unknown_primitive_rejected() {
        let spec = RenderSpec::synthetic(2, 2, 32, 0.0);
        assert!(matches!(render_image(2, 0, &spec, 0), Err(Error::Vocabulary(_))));
        assert!(matches!(render_image(0, 5, &spec, 0), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn names_are_unique_words() {
        let spec = RenderSpec::synthetic(40, 20, 32, 0.0);
        assert!(spec.vocab().is_ok());
    }
}
