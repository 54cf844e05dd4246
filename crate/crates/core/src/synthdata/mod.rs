//! Procedural visual-instruction data: flat-shaded scenes, deterministic edits,
//! paired training corpora and genuine-quad evaluation sets.

mod dataset;
mod scene;
mod transform;

pub use dataset::{
    gen_pair_dataset, gen_quad_evalset, load_pair_dataset, load_quad_evalset, CorpusKind,
    CorpusManifest, CorpusOptions, PairRecord, QuadRecord, SampleMeta,
};
pub use scene::{gen_base_image, random_scene, Color, SceneSpec, Shape, ShapeKind};
pub use transform::{
    apply_transform, descriptor, random_transform, TransformKind, TransformOp, TransformSpec,
};
