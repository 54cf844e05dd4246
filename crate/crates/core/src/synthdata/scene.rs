use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datamodel::ImageTensor;
use crate::error::{LocError, Result};
use crate::rng::Rng;

pub type Color = [f32; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];
}

/// Geometry is in normalized image coordinates: `center` in [0,1]² (x, y),
/// `size` is the half-extent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub center: [f32; 2],
    pub size: f32,
    pub color: Color,
}

impl Shape {
    fn contains(&self, px: f32, py: f32) -> bool {
        let dx = px - self.center[0];
        let dy = py - self.center[1];
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= self.size * self.size,
            ShapeKind::Square => dx.abs() <= self.size && dy.abs() <= self.size,
            ShapeKind::Triangle => {
                dy.abs() <= self.size && dx.abs() <= (dy + self.size) * 0.5
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let [cx, cy] = self.center;
        let s = self.size;
        if !(s > 0.0) || cx - s < 0.0 || cx + s > 1.0 || cy - s < 0.0 || cy + s > 1.0 {
            return Err(LocError::InvalidScene(format!(
                "{:?} at ({cx}, {cy}) with half-size {s} leaves the canvas",
                self.kind
            )));
        }
        if self.color.iter().any(|c| !(-1.0..=1.0).contains(c)) {
            return Err(LocError::InvalidScene(format!("color {:?} out of range", self.color)));
        }
        Ok(())
    }

    /// Mirror image about the vertical axis.
    pub fn mirrored(&self) -> Self {
        Self {
            center: [1.0 - self.center[0], self.center[1]],
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub background: Color,
    /// Painted in order; later shapes cover earlier ones.
    pub shapes: Vec<Shape>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() {
            return Err(LocError::InvalidScene("a scene needs at least one shape".into()));
        }
        self.shapes.iter().try_for_each(Shape::validate)
    }
}

pub(crate) fn render(spec: &SceneSpec, size: usize) -> ImageTensor {
    let mut img = ImageTensor::filled(size, spec.background);
    for y in 0..size {
        let py = (y as f32 + 0.5) / size as f32;
        for x in 0..size {
            let px = (x as f32 + 0.5) / size as f32;
            if let Some(s) = spec.shapes.iter().rev().find(|s| s.contains(px, py)) {
                img.set_pixel(y, x, s.color);
            }
        }
    }
    img
}

pub fn gen_base_image(spec: &SceneSpec, size: usize) -> Result<ImageTensor> {
    spec.validate()?;
    Ok(render(spec, size))
}

/// A color on the 8-bit grid, so rendered scenes survive PNG storage exactly.
pub(crate) fn random_color(rng: &mut Rng) -> Color {
    let mut c = || f32::from(rng.gen::<u8>()) / 255.0 * 2.0 - 1.0;
    [c(), c(), c()]
}

/// A color at least `min_gap` away (L∞) from every color in `avoid`.
pub(crate) fn distinct_color(rng: &mut Rng, avoid: &[Color], min_gap: f32) -> Color {
    loop {
        let c = random_color(rng);
        let far = avoid.iter().all(|a| {
            a.iter()
                .zip(&c)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f32, f32::max)
                >= min_gap
        });
        if far {
            return c;
        }
    }
}

pub(crate) fn random_shape(rng: &mut Rng, avoid: &[Color]) -> Shape {
    let kind = ShapeKind::ALL[rng.gen_range(0..3)];
    let size = rng.gen_range(0.08f32..0.22);
    let center = [rng.gen_range(size..1.0 - size), rng.gen_range(size..1.0 - size)];
    Shape {
        kind,
        center,
        size,
        color: distinct_color(rng, avoid, 0.5),
    }
}

/// A random scene with between `max(min_shapes, 2)` and 5 shapes.
pub fn random_scene(rng: &mut Rng, seed: u64, min_shapes: usize) -> SceneSpec {
    let background = random_color(rng);
    let count = rng.gen_range(min_shapes.clamp(2, 5)..=5);
    let mut colors = vec![background];
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let s = random_shape(rng, &colors);
        colors.push(s.color);
        shapes.push(s);
    }
    SceneSpec {
        background,
        shapes,
        seed,
    }
}
