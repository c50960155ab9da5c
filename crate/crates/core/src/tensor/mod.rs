//! Tensor checkpoints and the single-file archive format.

mod archive;
mod checkpoint;
mod dtype;

pub use archive::{encode_archive, parse_archive, read_archive, write_archive, ArchiveWriter};
pub use checkpoint::{Checkpoint, Tensor};
pub use dtype::{bf16_to_f32, decode_f32, encode_f32, f32_to_bf16, DType};
