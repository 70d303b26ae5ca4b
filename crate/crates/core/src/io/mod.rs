//! Checkpoint serialization and the flat run-configuration format.

mod checkpoint;
mod config;

pub use checkpoint::{
    decode_tensors, encode_tensors, load_checkpoint, meta_path, save_checkpoint, Checkpoint,
    CheckpointMeta, MAGIC,
};
pub use config::RunConfig;
