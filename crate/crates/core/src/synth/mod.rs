//! The closed shapes world: scenes, rendering, captions, patches and training sequences.

mod mix;
mod patch;
mod scene;
mod sequence;
mod vocab;

pub use mix::{mix_batches, MixRatio, SampleDraw, SampleStream};
pub use patch::{patchify, unpatchify};
pub use scene::{render_scene, Color, ImageLatent, Quadrant, SceneSpec, Shape, CHANNELS, IMAGE_SIZE};
pub use sequence::{
    assemble, ImageSpan, Modality, MultimodalSequence, SampleKind, Slot, MAX_SEQ_LEN, N_PATCHES,
    PATCH, PATCH_DIM,
};
pub use vocab::{NoMatch, TokenId, Vocabulary};
