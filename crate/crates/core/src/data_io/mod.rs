//! Dataset ingestion, deterministic batching and the `RSPK` model container.

mod batcher;
mod container;
mod idx;

pub use batcher::{shuffled_batches, Batcher};
pub use container::{load_model, read_model, save_model, write_model, StoredModel, FORMAT_VERSION, MAGIC};
pub use idx::{load_idx, parse_idx_images, parse_idx_labels, write_idx_images, write_idx_labels, IdxDataset};
