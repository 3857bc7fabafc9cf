//! File formats, synthetic scenes and patch-wise reconstruction.

pub mod formats;
pub mod patches;
pub mod synth;

pub use formats::{
    decode_cube, decode_depth, encode_cube, encode_depth, read_cube, read_depth, write_atomic,
    write_cube, write_depth,
};
pub use patches::{rebin_pairs, reconstruct_patches, PatchSpec};
pub use synth::{random_scene, synth_scene, Reflectivity, SceneKind};
