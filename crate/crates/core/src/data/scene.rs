//! Scene descriptions, rasterisation and the ground-truth rules that turn a
//! scene into answers. Answers are always derived from the scene, never
//! from pixels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_TIERS: u8 = 5;

/// Planar float image, channel-major `[C×H×W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape {
                op: "Image::new",
                lhs: vec![channels, height, width],
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn bit_eq(&self, other: &Image) -> bool {
        self.channels == other.channels
            && self.height == other.height
            && self.width == other.width
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.word() == s)
    }

    fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Shape {
    Circle,
    Square,
    Cross,
    Diamond,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Cross, Shape::Diamond];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Cross => "cross",
            Shape::Diamond => "diamond",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.word() == s)
    }

    /// Coverage test in cell-local coordinates `u, v ∈ [0, 1)`.
    fn covers(self, u: f64, v: f64) -> bool {
        let (du, dv) = ((u - 0.5).abs(), (v - 0.5).abs());
        match self {
            Shape::Circle => du * du + dv * dv <= 0.36 * 0.36,
            Shape::Square => du <= 0.38 && dv <= 0.38,
            Shape::Cross => du.min(dv) <= 0.13 && du.max(dv) <= 0.45,
            Shape::Diamond => du + dv <= 0.45,
        }
    }
}

/// Layout family of the background; plays the role of the echo view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum View {
    Apical,
    Parasternal,
    Subcostal,
    Suprasternal,
}

impl View {
    pub const ALL: [View; 4] = [
        View::Apical,
        View::Parasternal,
        View::Subcostal,
        View::Suprasternal,
    ];

    pub fn word(self) -> &'static str {
        match self {
            View::Apical => "apical",
            View::Parasternal => "parasternal",
            View::Subcostal => "subcostal",
            View::Suprasternal => "suprasternal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.word() == s)
    }

    fn background(self, y: usize, x: usize) -> f32 {
        let stripe = match self {
            View::Apical => x % 2 == 0,
            View::Parasternal => y % 2 == 0,
            View::Subcostal => (x + y) % 2 == 0,
            View::Suprasternal => (x / 2 + y / 2) % 2 == 0,
        };
        if stripe {
            0.25
        } else {
            0.05
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Concept {
    pub color: Color,
    pub shape: Shape,
}

impl Concept {
    pub fn phrase(self) -> String {
        format!("{} {}", self.color.word(), self.shape.word())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placed {
    pub concept: Concept,
    pub row: usize,
    pub col: usize,
}

/// Occluding artifact band over whole cell rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Band {
    pub start_row: usize,
    pub rows: usize,
}

impl Band {
    pub fn covers_row(&self, row: usize) -> bool {
        row >= self.start_row && row < self.start_row + self.rows
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub view: View,
    pub objects: Vec<Placed>,
    pub band: Option<Band>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
    Centered,
}

impl Direction {
    pub fn phrase(self) -> &'static str {
        match self {
            Direction::Left => "shift left",
            Direction::Right => "shift right",
            Direction::Up => "shift up",
            Direction::Down => "shift down",
            Direction::Centered => "centered",
        }
    }
}

/// Guidance phrase when the target cannot be seen.
pub const NOT_VISIBLE: &str = "not visible";

/// Noise standard deviation for quality tiers 1..=5.
pub fn tier_sigma(tier: u8) -> f32 {
    match tier {
        1 => 0.0,
        2 => 0.03,
        3 => 0.25,
        4 => 0.25,
        _ => 0.35,
    }
}

/// Number of occluded cell rows for a tier.
pub fn tier_band_rows(tier: u8) -> usize {
    match tier {
        4 => 1,
        5 => 2,
        _ => 0,
    }
}

pub fn tier_word(tier: u8) -> &'static str {
    match tier {
        1 => "clean",
        2 => "grainy",
        3 => "noisy",
        4 => "shadowed",
        _ => "occluded",
    }
}

impl Scene {
    pub fn empty(view: View) -> Self {
        Self {
            view,
            objects: Vec::new(),
            band: None,
        }
    }

    pub fn occluded(&self, row: usize) -> bool {
        self.band.is_some_and(|b| b.covers_row(row))
    }

    /// The concept is drawn in at least one cell that no band covers.
    pub fn concept_visible(&self, concept: Concept) -> bool {
        self.objects
            .iter()
            .any(|p| p.concept == concept && !self.occluded(p.row))
    }

    pub fn find_visible(&self, concept: Concept) -> Option<&Placed> {
        self.objects
            .iter()
            .find(|p| p.concept == concept && !self.occluded(p.row))
    }

    /// Direction from the image centre to the first visible instance of
    /// `target`, or `None` if it is not visible.
    pub fn guidance(&self, target: Concept, grid: usize) -> Option<Direction> {
        let p = self.find_visible(target)?;
        let c = (grid as f64 - 1.0) / 2.0;
        let dx = p.col as f64 - c;
        let dy = p.row as f64 - c;
        Some(if dx.abs() <= 0.5 && dy.abs() <= 0.5 {
            Direction::Centered
        } else if dx.abs() >= dy.abs() {
            if dx < 0.0 {
                Direction::Left
            } else {
                Direction::Right
            }
        } else if dy < 0.0 {
            Direction::Up
        } else {
            Direction::Down
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Raster {
    pub grid: usize,
    pub size: usize,
    pub channels: usize,
}

impl Raster {
    pub fn cell(&self) -> usize {
        self.size / self.grid
    }
}

/// Deterministic rasterisation of `scene` at quality `tier`.
///
/// Shapes are painted over the view background, Gaussian noise with the
/// tier's sigma is added, then band rows are zeroed (no noise inside a band).
pub fn render_image(scene: &Scene, tier: u8, raster: Raster, seed: u64) -> Image {
    let Raster {
        grid,
        size,
        channels,
    } = raster;
    let cell = raster.cell();
    let mut img = Image::filled(channels, size, size, 0.0);
    for y in 0..size {
        for x in 0..size {
            let b = scene.view.background(y, x);
            for c in 0..channels {
                img.set(c, y, x, b);
            }
        }
    }
    for obj in &scene.objects {
        if obj.row >= grid || obj.col >= grid {
            continue;
        }
        let rgb = obj.concept.color.rgb();
        for dy in 0..cell {
            for dx in 0..cell {
                let u = (dx as f64 + 0.5) / cell as f64;
                let v = (dy as f64 + 0.5) / cell as f64;
                if obj.concept.shape.covers(u, v) {
                    let (y, x) = (obj.row * cell + dy, obj.col * cell + dx);
                    for c in 0..channels {
                        img.set(c, y, x, rgb[c % 3]);
                    }
                }
            }
        }
    }
    let sigma = tier_sigma(tier);
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, sigma).expect("finite sigma");
        for v in img.data.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    if let Some(band) = scene.band {
        for row in band.start_row..(band.start_row + band.rows).min(grid) {
            for y in row * cell..(row + 1) * cell {
                for x in 0..size {
                    for c in 0..channels {
                        img.set(c, y, x, 0.0);
                    }
                }
            }
        }
    }
    img
}
