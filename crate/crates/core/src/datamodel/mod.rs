//! Shared domain types, image I/O and the checkpoint archive.

mod checkpoint;
mod image;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Manifest, NamedTensor, TensorEntry, FORMAT_VERSION,
};
pub use image::{load_image, save_image, stack_images, unstack_images, ImageTensor, CHANNELS};

use serde::{Deserialize, Serialize};

use crate::error::{LocError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Query/target are the pair itself or its horizontal flip.
    FlipPaired,
    /// Query is an unrelated scene edited by the same ground-truth transform.
    GenuineQuad,
}

/// A quad (A, A′, B, B′).
#[derive(Clone, Debug, PartialEq)]
pub struct EditSample {
    pub before: ImageTensor,
    pub after: ImageTensor,
    pub query: ImageTensor,
    pub target: ImageTensor,
    pub provenance: Provenance,
    pub transform_id: Option<String>,
}

impl EditSample {
    pub fn validate(&self) -> Result<()> {
        let size = self.before.size();
        for (name, img) in [
            ("after", &self.after),
            ("query", &self.query),
            ("target", &self.target),
        ] {
            if img.size() != size {
                return Err(LocError::Shape(format!(
                    "{name} is {0}x{0}, before is {size}x{size}",
                    img.size()
                )));
            }
        }
        if self.provenance == Provenance::FlipPaired {
            let plain = self.query == self.before && self.target == self.after;
            let flipped =
                self.query == self.before.hflip() && self.target == self.after.hflip();
            if !(plain || flipped) {
                return Err(LocError::Dataset(
                    "flip-paired sample whose query/target are not the pair or its flip".into(),
                ));
            }
        }
        Ok(())
    }
}
