//! Shared encoder, CTC head, bidirectional attention decoders, attention
//! masks and checkpoint persistence.

mod checkpoint;
mod config;
mod mask;
mod network;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint_meta, save_checkpoint, Checkpoint, CheckpointMeta};
pub use config::{ChunkMode, ChunkPolicy, ChunkPolicyMode, EncoderKind, ModelConfig, R2lImpl};
pub use mask::{build_chunk_mask, build_left_mask, build_right_mask};
pub use network::{decoder_io, sinusoid_table, subsampled_len, Direction, U2Model};
pub use params::{Binder, ParamStore};
