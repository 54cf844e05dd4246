use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::scene::{distinct_color, random_shape, render, Color, SceneSpec, Shape, ShapeKind};
use crate::datamodel::ImageTensor;
use crate::diffusion::DESCRIPTOR_DIM;
use crate::error::{LocError, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    AddShape,
    RemoveShape,
    RecolorObject,
    HueShift,
    Grayscale,
    Invert,
    Brightness,
    Blur,
    EdgeMap,
    Posterize,
}

impl TransformKind {
    pub const ALL: [TransformKind; 10] = [
        TransformKind::AddShape,
        TransformKind::RemoveShape,
        TransformKind::RecolorObject,
        TransformKind::HueShift,
        TransformKind::Grayscale,
        TransformKind::Invert,
        TransformKind::Brightness,
        TransformKind::Blur,
        TransformKind::EdgeMap,
        TransformKind::Posterize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::AddShape => "add_shape",
            TransformKind::RemoveShape => "remove_shape",
            TransformKind::RecolorObject => "recolor_object",
            TransformKind::HueShift => "hue_shift",
            TransformKind::Grayscale => "grayscale",
            TransformKind::Invert => "invert",
            TransformKind::Brightness => "brightness",
            TransformKind::Blur => "blur",
            TransformKind::EdgeMap => "edge_map",
            TransformKind::Posterize => "posterize",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Edits driven by scene metadata rather than pixels.
    pub fn is_local(self) -> bool {
        matches!(
            self,
            TransformKind::AddShape | TransformKind::RemoveShape | TransformKind::RecolorObject
        )
    }

    /// Per-pixel color maps; these commute exactly with a horizontal flip.
    pub fn is_pointwise(self) -> bool {
        matches!(
            self,
            TransformKind::HueShift
                | TransformKind::Grayscale
                | TransformKind::Invert
                | TransformKind::Brightness
                | TransformKind::Posterize
        )
    }

    /// Shapes a scene needs for the edit to apply.
    pub fn min_shapes(self) -> usize {
        if self == TransformKind::RemoveShape {
            2
        } else {
            1
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformOp {
    AddShape { shape: Shape },
    RemoveShape { index: usize },
    RecolorObject { index: usize, color: Color },
    /// Rotation about the gray axis, radians.
    HueShift { angle: f32 },
    Grayscale,
    Invert,
    Brightness { delta: f32 },
    /// Box blur of side `2·radius + 1`, edge pixels replicated.
    Blur { radius: usize },
    /// Sobel magnitude of luma, white edges on black.
    EdgeMap,
    Posterize { levels: u32 },
}

impl TransformOp {
    pub fn kind(&self) -> TransformKind {
        match self {
            TransformOp::AddShape { .. } => TransformKind::AddShape,
            TransformOp::RemoveShape { .. } => TransformKind::RemoveShape,
            TransformOp::RecolorObject { .. } => TransformKind::RecolorObject,
            TransformOp::HueShift { .. } => TransformKind::HueShift,
            TransformOp::Grayscale => TransformKind::Grayscale,
            TransformOp::Invert => TransformKind::Invert,
            TransformOp::Brightness { .. } => TransformKind::Brightness,
            TransformOp::Blur { .. } => TransformKind::Blur,
            TransformOp::EdgeMap => TransformKind::EdgeMap,
            TransformOp::Posterize { .. } => TransformKind::Posterize,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub id: String,
    pub op: TransformOp,
}

impl TransformSpec {
    pub fn new(op: TransformOp) -> Self {
        let k = op.kind().name();
        let id = match &op {
            TransformOp::AddShape { shape } => format!(
                "{k}({:?}@{:.3},{:.3})",
                shape.kind, shape.center[0], shape.center[1]
            ),
            TransformOp::RemoveShape { index } => format!("{k}({index})"),
            TransformOp::RecolorObject { index, .. } => format!("{k}({index})"),
            TransformOp::HueShift { angle } => format!("{k}({angle:.4})"),
            TransformOp::Brightness { delta } => format!("{k}({delta:.4})"),
            TransformOp::Blur { radius } => format!("{k}({radius})"),
            TransformOp::Posterize { levels } => format!("{k}({levels})"),
            _ => k.to_string(),
        };
        Self { id, op }
    }

    pub fn kind(&self) -> TransformKind {
        self.op.kind()
    }
}

fn luma(p: [f32; 3]) -> f32 {
    (0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2])) as f32
}

fn hue_matrix(angle: f32) -> [[f64; 3]; 3] {
    let (s, c) = f64::from(angle).sin_cos();
    let k = 1.0 / 3.0f64.sqrt();
    let t = 1.0 - c;
    // Rodrigues rotation about (1, 1, 1)/√3.
    [
        [c + t / 3.0, t / 3.0 - s * k, t / 3.0 + s * k],
        [t / 3.0 + s * k, c + t / 3.0, t / 3.0 - s * k],
        [t / 3.0 - s * k, t / 3.0 + s * k, c + t / 3.0],
    ]
}

fn box_blur(img: &ImageTensor, radius: usize) -> ImageTensor {
    let n = img.size() as isize;
    let r = radius as isize;
    let mut out = img.clone();
    let norm = ((2 * r + 1) * (2 * r + 1)) as f32;
    for y in 0..n {
        for x in 0..n {
            let mut acc = [0.0f32; 3];
            for dy in -r..=r {
                for dx in -r..=r {
                    let p = img.pixel((y + dy).clamp(0, n - 1) as usize, (x + dx).clamp(0, n - 1) as usize);
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                }
            }
            out.set_pixel(y as usize, x as usize, acc.map(|v| v / norm));
        }
    }
    out
}

fn edge_map(img: &ImageTensor) -> ImageTensor {
    let n = img.size() as isize;
    let l = |y: isize, x: isize| luma(img.pixel(y.clamp(0, n - 1) as usize, x.clamp(0, n - 1) as usize));
    let mut out = img.clone();
    for y in 0..n {
        for x in 0..n {
            let gx = (l(y - 1, x + 1) + 2.0 * l(y, x + 1) + l(y + 1, x + 1))
                - (l(y - 1, x - 1) + 2.0 * l(y, x - 1) + l(y + 1, x - 1));
            let gy = (l(y + 1, x - 1) + 2.0 * l(y + 1, x) + l(y + 1, x + 1))
                - (l(y - 1, x - 1) + 2.0 * l(y - 1, x) + l(y - 1, x + 1));
            let m = ((gx * gx + gy * gy).sqrt() / 4.0).min(1.0);
            let v = m * 2.0 - 1.0;
            out.set_pixel(y as usize, x as usize, [v, v, v]);
        }
    }
    out
}

fn scene_for<'a>(spec: &TransformSpec, scene: Option<&'a SceneSpec>) -> Result<&'a SceneSpec> {
    scene.ok_or_else(|| LocError::InapplicableTransform {
        id: spec.id.clone(),
        reason: "local edits need scene metadata".into(),
    })
}

fn check_index(spec: &TransformSpec, scene: &SceneSpec, index: usize) -> Result<()> {
    if index >= scene.shapes.len() {
        return Err(LocError::InapplicableTransform {
            id: spec.id.clone(),
            reason: format!("scene has {} shape(s), no index {index}", scene.shapes.len()),
        });
    }
    Ok(())
}

/// Applies `t` to `img`. Local edits re-render the edited `scene` at the size
/// of `img`; the others work on pixels.
pub fn apply_transform(
    img: &ImageTensor,
    scene: Option<&SceneSpec>,
    t: &TransformSpec,
) -> Result<ImageTensor> {
    let size = img.size();
    let out = match &t.op {
        TransformOp::AddShape { shape } => {
            let mut s = scene_for(t, scene)?.clone();
            s.shapes.push(shape.clone());
            s.validate()?;
            render(&s, size)
        }
        TransformOp::RemoveShape { index } => {
            let mut s = scene_for(t, scene)?.clone();
            check_index(t, &s, *index)?;
            if s.shapes.len() < 2 {
                return Err(LocError::InapplicableTransform {
                    id: t.id.clone(),
                    reason: "removing the only shape would leave an empty scene".into(),
                });
            }
            s.shapes.remove(*index);
            render(&s, size)
        }
        TransformOp::RecolorObject { index, color } => {
            let mut s = scene_for(t, scene)?.clone();
            check_index(t, &s, *index)?;
            s.shapes[*index].color = *color;
            s.validate()?;
            render(&s, size)
        }
        TransformOp::HueShift { angle } => {
            let m = hue_matrix(*angle);
            img.map_pixels(|p| {
                let p = p.map(f64::from);
                std::array::from_fn(|r| {
                    ((m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2]) as f32).clamp(-1.0, 1.0)
                })
            })
        }
        TransformOp::Grayscale => img.map_pixels(|p| {
            let g = luma(p);
            [g, g, g]
        }),
        TransformOp::Invert => img.map_pixels(|p| p.map(|v| -v)),
        TransformOp::Brightness { delta } => img.map_pixels(|p| p.map(|v| (v + delta).clamp(-1.0, 1.0))),
        TransformOp::Blur { radius } => box_blur(img, *radius),
        TransformOp::EdgeMap => edge_map(img),
        TransformOp::Posterize { levels } => {
            if *levels < 2 {
                return Err(LocError::InapplicableTransform {
                    id: t.id.clone(),
                    reason: "posterize needs at least two levels".into(),
                });
            }
            let k = (*levels - 1) as f32;
            img.map_pixels(|p| p.map(|v| ((v + 1.0) * 0.5 * k).round() / k * 2.0 - 1.0))
        }
    };
    Ok(out)
}

/// A random edit of `kind` applicable to every scene in `scenes`.
pub fn random_transform(rng: &mut Rng, kind: TransformKind, scenes: &[&SceneSpec]) -> Result<TransformSpec> {
    let min_shapes = scenes.iter().map(|s| s.shapes.len()).min().unwrap_or(0);
    if min_shapes < kind.min_shapes() {
        return Err(LocError::InapplicableTransform {
            id: kind.name().into(),
            reason: format!("needs {} shape(s), a scene has {min_shapes}", kind.min_shapes()),
        });
    }
    let sign = |rng: &mut Rng| if rng.gen::<bool>() { 1.0f32 } else { -1.0 };
    let op = match kind {
        TransformKind::AddShape => {
            let avoid: Vec<Color> = scenes
                .iter()
                .flat_map(|s| std::iter::once(s.background).chain(s.shapes.iter().map(|x| x.color)))
                .collect();
            TransformOp::AddShape {
                shape: random_shape(rng, &avoid),
            }
        }
        TransformKind::RemoveShape => TransformOp::RemoveShape {
            index: rng.gen_range(0..min_shapes),
        },
        TransformKind::RecolorObject => {
            let index = rng.gen_range(0..min_shapes);
            let avoid: Vec<Color> = scenes
                .iter()
                .flat_map(|s| [s.background, s.shapes[index].color])
                .collect();
            TransformOp::RecolorObject {
                index,
                color: distinct_color(rng, &avoid, 0.5),
            }
        }
        TransformKind::HueShift => TransformOp::HueShift {
            angle: sign(rng) * rng.gen_range(std::f32::consts::FRAC_PI_3..2.0 * std::f32::consts::FRAC_PI_3),
        },
        TransformKind::Grayscale => TransformOp::Grayscale,
        TransformKind::Invert => TransformOp::Invert,
        TransformKind::Brightness => TransformOp::Brightness {
            delta: sign(rng) * rng.gen_range(0.3f32..0.6),
        },
        TransformKind::Blur => TransformOp::Blur {
            radius: rng.gen_range(2..=3),
        },
        TransformKind::EdgeMap => TransformOp::EdgeMap,
        TransformKind::Posterize => TransformOp::Posterize {
            levels: rng.gen_range(2..=4),
        },
    };
    Ok(TransformSpec::new(op))
}

fn shape_features(out: &mut [f32], shape: &Shape, mirrored: bool) {
    let s = if mirrored { shape.mirrored() } else { shape.clone() };
    let k = ShapeKind::ALL.iter().position(|k| *k == s.kind).unwrap();
    out[k] = 1.0;
    out[3] = s.center[0] * 2.0 - 1.0;
    out[4] = s.center[1] * 2.0 - 1.0;
    out[5] = s.size * 4.0;
    out[6..9].copy_from_slice(&s.color);
}

/// Fixed-width numeric description of an edit (kind one-hot, then parameters),
/// used as the instruction token when pretraining the generator. `mirrored`
/// describes the same edit applied to the horizontally flipped scene.
pub fn descriptor(t: &TransformSpec, scene: &SceneSpec, mirrored: bool) -> Result<[f32; DESCRIPTOR_DIM]> {
    let mut d = [0.0f32; DESCRIPTOR_DIM];
    let kind = t.kind();
    d[TransformKind::ALL.iter().position(|k| *k == kind).unwrap()] = 1.0;
    let p = &mut d[10..];
    match &t.op {
        TransformOp::AddShape { shape } => shape_features(p, shape, mirrored),
        TransformOp::RemoveShape { index } => {
            check_index(t, scene, *index)?;
            shape_features(p, &scene.shapes[*index], mirrored);
        }
        TransformOp::RecolorObject { index, color } => {
            check_index(t, scene, *index)?;
            shape_features(p, &scene.shapes[*index], mirrored);
            p[9..12].copy_from_slice(color);
        }
        TransformOp::HueShift { angle } => {
            p[0] = angle.cos();
            p[1] = angle.sin();
        }
        TransformOp::Brightness { delta } => p[0] = *delta,
        TransformOp::Blur { radius } => p[0] = *radius as f32 / 3.0,
        TransformOp::Posterize { levels } => p[0] = *levels as f32 / 4.0,
        TransformOp::Grayscale | TransformOp::Invert | TransformOp::EdgeMap => {}
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream_indexed;
    use crate::synthdata::scene::random_scene;
    use proptest::prelude::*;

    fn scene(seed: u64) -> (SceneSpec, ImageTensor) {
        let mut rng = substream_indexed(seed, "t", 0);
        let s = random_scene(&mut rng, seed, 2);
        let img = render(&s, 32);
        (s, img)
    }

    #[test]
    fn invert_negates_and_is_an_involution() {
        let (_, img) = scene(1);
        let t = TransformSpec::new(TransformOp::Invert);
        let inv = apply_transform(&img, None, &t).unwrap();
        assert!(inv.data().iter().zip(img.data()).all(|(a, b)| *a == -*b));
        assert_eq!(apply_transform(&inv, None, &t).unwrap(), img);
    }

    #[test]
    fn grayscale_fixed_point() {
        let (_, img) = scene(2);
        let t = TransformSpec::new(TransformOp::Grayscale);
        let g = apply_transform(&img, None, &t).unwrap();
        assert_eq!(apply_transform(&g, None, &t).unwrap(), g);
    }

    #[test]
    fn full_turn_hue_shift_is_identity() {
        let (_, img) = scene(3);
        let t = TransformSpec::new(TransformOp::HueShift {
            angle: std::f32::consts::TAU,
        });
        assert!(apply_transform(&img, None, &t).unwrap().max_abs_diff(&img) <= 1e-5);
    }

    #[test]
    fn hue_shift_preserves_gray() {
        let img = ImageTensor::filled(4, [0.2, 0.2, 0.2]);
        let t = TransformSpec::new(TransformOp::HueShift { angle: 1.0 });
        assert!(apply_transform(&img, None, &t).unwrap().max_abs_diff(&img) < 1e-6);
    }

    #[test]
    fn local_edits_need_metadata_and_valid_indices() {
        let (s, img) = scene(4);
        let t = TransformSpec::new(TransformOp::RemoveShape { index: 7 });
        assert!(matches!(
            apply_transform(&img, Some(&s), &t),
            Err(LocError::InapplicableTransform { .. })
        ));
        assert!(apply_transform(&img, None, &TransformSpec::new(TransformOp::RemoveShape { index: 0 })).is_err());
        let mut one = s.clone();
        one.shapes.truncate(1);
        assert!(apply_transform(&img, Some(&one), &TransformSpec::new(TransformOp::RemoveShape { index: 0 })).is_err());
        let removed = apply_transform(&img, Some(&s), &TransformSpec::new(TransformOp::RemoveShape { index: 0 })).unwrap();
        assert_eq!(removed.size(), 32);
    }

    #[test]
    fn random_transforms_apply_to_all_scenes() {
        let (a, ia) = scene(5);
        let (b, ib) = scene(6);
        let mut rng = substream_indexed(0, "rt", 0);
        for kind in TransformKind::ALL {
            let t = random_transform(&mut rng, kind, &[&a, &b]).unwrap();
            assert_eq!(t.kind(), kind);
            apply_transform(&ia, Some(&a), &t).unwrap();
            apply_transform(&ib, Some(&b), &t).unwrap();
            let d = descriptor(&t, &a, false).unwrap();
            assert!(d.iter().all(|v| v.is_finite()));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn pointwise_edits_commute_with_flip(seed in 0u64..10_000, k in 0usize..10) {
            let (s, img) = scene(seed);
            let mut rng = substream_indexed(seed, "flip", 0);
            let kind = TransformKind::ALL[k];
            prop_assume!(kind.is_pointwise());
            let t = random_transform(&mut rng, kind, &[&s]).unwrap();
            let a = apply_transform(&img.hflip(), None, &t).unwrap();
            let b = apply_transform(&img, None, &t).unwrap().hflip();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn edits_are_pure(seed in 0u64..10_000, k in 0usize..10) {
            let (s, img) = scene(seed);
            let mut rng = substream_indexed(seed, "pure", 0);
            let t = random_transform(&mut rng, TransformKind::ALL[k], &[&s]).unwrap();
            prop_assert_eq!(apply_transform(&img, Some(&s), &t).unwrap(), apply_transform(&img, Some(&s), &t).unwrap());
        }
    }
}
