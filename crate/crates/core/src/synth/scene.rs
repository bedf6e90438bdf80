use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub const IMAGE_SIZE: usize = 16;
pub const CHANNELS: usize = 3;
const QUAD: usize = IMAGE_SIZE / 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Whether local pixel `(r, c)` of an 8×8 quadrant belongs to the shape.
    pub fn covers(self, r: usize, c: usize) -> bool {
        let (dr, dc) = (r as f64 - 3.5, c as f64 - 3.5);
        match self {
            Shape::Square => dr.abs() <= 2.5 && dc.abs() <= 2.5,
            Shape::Circle => dr * dr + dc * dc <= 3.2 * 3.2,
            Shape::Triangle => (1..=6).contains(&r) && dc.abs() <= 0.5 * r as f64,
        }
    }

    /// Local 8×8 coverage mask, row-major.
    pub fn mask(self) -> [bool; QUAD * QUAD] {
        let mut m = [false; QUAD * QUAD];
        for r in 0..QUAD {
            for c in 0..QUAD {
                m[r * QUAD + c] = self.covers(r, c);
            }
        }
        m
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, -1.0, -1.0],
            Color::Green => [-1.0, 1.0, -1.0],
            Color::Blue => [-1.0, -1.0, 1.0],
            Color::Yellow => [1.0, 1.0, -1.0],
        }
    }
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::TopLeft,
        Quadrant::TopRight,
        Quadrant::BottomLeft,
        Quadrant::BottomRight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Quadrant::TopLeft => "top-left",
            Quadrant::TopRight => "top-right",
            Quadrant::BottomLeft => "bottom-left",
            Quadrant::BottomRight => "bottom-right",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Pixel offset `(row, col)` of the quadrant's top-left corner.
    pub fn origin(self) -> (usize, usize) {
        match self {
            Quadrant::TopLeft => (0, 0),
            Quadrant::TopRight => (0, QUAD),
            Quadrant::BottomLeft => (QUAD, 0),
            Quadrant::BottomRight => (QUAD, QUAD),
        }
    }
}

/// One scene of the closed world: a single shape of one color in one quadrant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: Shape,
    pub color: Color,
    pub quadrant: Quadrant,
}

impl SceneSpec {
    pub fn new(shape: Shape, color: Color, quadrant: Quadrant) -> Self {
        Self {
            shape,
            color,
            quadrant,
        }
    }

    /// All 48 scenes in a fixed order.
    pub fn all() -> Vec<SceneSpec> {
        let mut v = Vec::with_capacity(48);
        for shape in Shape::ALL {
            for color in Color::ALL {
                for quadrant in Quadrant::ALL {
                    v.push(SceneSpec::new(shape, color, quadrant));
                }
            }
        }
        v
    }

    pub fn index(&self) -> usize {
        (self.shape.index() * 4 + self.color.index()) * 4 + self.quadrant.index()
    }

    pub fn from_index(i: usize) -> Option<Self> {
        (i < 48).then(|| {
            SceneSpec::new(
                Shape::ALL[i / 16],
                Color::ALL[(i / 4) % 4],
                Quadrant::ALL[i % 4],
            )
        })
    }

    /// Held-out image/caption pairs form a Latin square: for every (shape, quadrant) pair
    /// exactly one color is withheld, so every pair of attribute values still occurs in
    /// training while 12 full combinations never do.
    pub fn is_held_out(&self) -> bool {
        self.color.index() == (self.shape.index() + self.quadrant.index()) % 4
    }

    pub fn train_split() -> Vec<SceneSpec> {
        Self::all().into_iter().filter(|s| !s.is_held_out()).collect()
    }

    pub fn held_out_split() -> Vec<SceneSpec> {
        Self::all().into_iter().filter(SceneSpec::is_held_out).collect()
    }
}

/// A 3×16×16 channel-major image with values in [-1, 1]; the background is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageLatent {
    pixels: Vec<f32>,
}

impl ImageLatent {
    pub const LEN: usize = CHANNELS * IMAGE_SIZE * IMAGE_SIZE;

    pub fn blank() -> Self {
        Self {
            pixels: vec![0.0; Self::LEN],
        }
    }

    pub fn from_pixels(pixels: Vec<f32>) -> Option<Self> {
        (pixels.len() == Self::LEN).then_some(Self { pixels })
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * IMAGE_SIZE + y) * IMAGE_SIZE + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.pixels[(c * IMAGE_SIZE + y) * IMAGE_SIZE + x] = v;
    }

    pub fn clamp(&mut self) {
        self.pixels.iter_mut().for_each(|p| *p = p.clamp(-1.0, 1.0));
    }

    pub fn mean_abs_error(&self, other: &ImageLatent) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / Self::LEN as f64
    }

    pub fn l2_distance(&self, other: &ImageLatent) -> f64 {
        num_traits::Float::sqrt(
            self.pixels
                .iter()
                .zip(&other.pixels)
                .map(|(a, b)| ((a - b) as f64) * ((a - b) as f64))
                .sum::<f64>(),
        )
    }
}

/// Deterministic rendering: the shape, centered in its quadrant, on a neutral background.
pub fn render_scene(spec: &SceneSpec) -> ImageLatent {
    let mut img = ImageLatent::blank();
    let (oy, ox) = spec.quadrant.origin();
    let rgb = spec.color.rgb();
    for r in 0..QUAD {
        for c in 0..QUAD {
            if spec.shape.covers(r, c) {
                for (ch, &v) in rgb.iter().enumerate() {
                    img.set(ch, oy + r, ox + c, v);
                }
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn red_square_top_left_only_lights_that_block() {
        let img = render_scene(&SceneSpec::new(Shape::Square, Color::Red, Quadrant::TopLeft));
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                if img.get(0, y, x) > 0.5 {
                    assert!(y < 8 && x < 8);
                }
            }
        }
        assert!(img.get(0, 3, 3) > 0.5);
    }

    #[test]
    fn rendering_is_deterministic_and_injective() {
        let all = SceneSpec::all();
        let imgs: Vec<_> = all.iter().map(render_scene).collect();
        for (s, i) in all.iter().zip(&imgs) {
            assert_eq!(&render_scene(s), i);
        }
        for a in 0..imgs.len() {
            for b in a + 1..imgs.len() {
                assert!(imgs[a].l2_distance(&imgs[b]) > 0.0, "{a} {b}");
            }
        }
    }

    #[test]
    fn split_is_a_latin_square() {
        let held = SceneSpec::held_out_split();
        assert_eq!(held.len(), 12);
        assert_eq!(SceneSpec::train_split().len(), 36);
        let train = SceneSpec::train_split();
        for s in Shape::ALL {
            for c in Color::ALL {
                assert!(train.iter().any(|t| t.shape == s && t.color == c));
            }
            for q in Quadrant::ALL {
                assert!(train.iter().any(|t| t.shape == s && t.quadrant == q));
            }
        }
        for c in Color::ALL {
            for q in Quadrant::ALL {
                assert!(train.iter().any(|t| t.color == c && t.quadrant == q));
            }
        }
    }

    #[test]
    fn index_roundtrip() {
        for (i, s) in SceneSpec::all().iter().enumerate() {
            assert_eq!(s.index(), i);
            assert_eq!(SceneSpec::from_index(i), Some(*s));
        }
        assert_eq!(SceneSpec::from_index(48), None);
    }
}
