use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::Image;

pub const GRID: usize = 4;
pub const CELLS: usize = GRID * GRID;
pub const MAX_OBJECTS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Magenta,
        Color::Cyan,
    ];

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [230, 40, 40],
            Color::Green => [40, 200, 60],
            Color::Blue => [50, 80, 230],
            Color::Yellow => [230, 220, 40],
            Color::Magenta => [210, 50, 210],
            Color::Cyan => [40, 210, 220],
        }
    }
}

const BACKGROUND: [u8; 3] = [24, 24, 24];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SceneObject {
    /// Row-major index into the 4×4 grid.
    pub cell: usize,
    pub shape: Shape,
    pub color: Color,
}

/// One to three objects in distinct cells, ordered by cell.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConceptScene {
    objects: Vec<SceneObject>,
}

impl ConceptScene {
    /// Validates and canonicalizes the object list.
    pub fn new(mut objects: Vec<SceneObject>) -> crate::Result<Self> {
        if objects.is_empty() || objects.len() > MAX_OBJECTS {
            return Err(crate::Error::Invalid(format!(
                "a scene holds 1..={MAX_OBJECTS} objects, got {}",
                objects.len()
            )));
        }
        objects.sort();
        for w in objects.windows(2) {
            if w[0].cell == w[1].cell {
                return Err(crate::Error::Invalid(format!(
                    "two objects share cell {}",
                    w[0].cell
                )));
            }
        }
        if let Some(o) = objects.iter().find(|o| o.cell >= CELLS) {
            return Err(crate::Error::Invalid(format!(
                "cell {} is outside the grid",
                o.cell
            )));
        }
        Ok(Self { objects })
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        let count = rng.random_range(1..=MAX_OBJECTS);
        let objects = sample(rng, CELLS, count)
            .into_iter()
            .map(|cell| SceneObject {
                cell,
                shape: Shape::ALL[rng.random_range(0..Shape::ALL.len())],
                color: Color::ALL[rng.random_range(0..Color::ALL.len())],
            })
            .collect();
        Self::new(objects).expect("sampled cells are distinct")
    }

    pub fn objects(&self) -> &[SceneObject] {
        &self.objects
    }
}

fn covers(shape: Shape, x: f64, y: f64, cell: f64) -> bool {
    let m = cell / 8.0;
    let c = cell / 2.0;
    let inside = x >= m && x <= cell - m && y >= m && y <= cell - m;
    match shape {
        Shape::Square => inside,
        Shape::Circle => (x - c).powi(2) + (y - c).powi(2) <= (c - m).powi(2),
        Shape::Triangle => {
            // Apex at the top centre, base along the bottom margin.
            let t = (y - m) / (cell - 2.0 * m);
            inside && (x - c).abs() <= t * (c - m)
        }
        Shape::Cross => inside && ((x - c).abs() <= cell / 8.0 || (y - c).abs() <= cell / 8.0),
    }
}

/// Rasterizes a scene as `size × size` RGB bytes, row-major HWC.
pub fn render_scene_bytes(scene: &ConceptScene, size: usize) -> crate::Result<Vec<u8>> {
    if size == 0 || !size.is_multiple_of(GRID) {
        return Err(crate::Error::Invalid(format!(
            "image size {size} is not a positive multiple of {GRID}"
        )));
    }
    let cell = size / GRID;
    let mut out = Vec::with_capacity(size * size * 3);
    for _ in 0..size * size {
        out.extend_from_slice(&BACKGROUND);
    }
    for o in scene.objects() {
        let (r0, c0) = ((o.cell / GRID) * cell, (o.cell % GRID) * cell);
        for y in 0..cell {
            for x in 0..cell {
                if covers(o.shape, x as f64 + 0.5, y as f64 + 0.5, cell as f64) {
                    let idx = ((r0 + y) * size + c0 + x) * 3;
                    out[idx..idx + 3].copy_from_slice(&o.color.rgb());
                }
            }
        }
    }
    Ok(out)
}

pub fn bytes_to_image(bytes: &[u8], size: usize) -> crate::Result<Image> {
    Image::new(
        size,
        size,
        3,
        bytes.iter().map(|&b| b as f32 / 255.0).collect(),
    )
}

/// Rasterizes a scene as an RGB image with values in [0, 1].
pub fn render_scene(scene: &ConceptScene, size: usize) -> crate::Result<Image> {
    bytes_to_image(&render_scene_bytes(scene, size)?, size)
}
