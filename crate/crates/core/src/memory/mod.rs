//! Multi-source key/value knowledge memory: items, value compression,
//! regularizers, versioned snapshots, persistence and refresh.

mod item;
mod perceiver;
mod persist;
mod regularizers;
mod snapshot;
mod store;

pub use item::{linearize_triplets, load_manifests, manifest_line, parse_manifest, ItemKind, KnowledgeItem, Triplet};
pub use perceiver::{first_tokens, PerceiverHead, PerceiverLayer};
pub use persist::{
    decode_snapshot, encode_snapshot, load_snapshot, load_snapshot_for, read_header_from, save_snapshot, SnapshotHeader,
    FORMAT_VERSION, MAGIC,
};
pub use regularizers::{align_loss, decor_loss, norm_sum};
pub use snapshot::{build_snapshot, encode_entry, refresh_snapshot, MemoryEntry, MemorySnapshot};
pub use store::{RefreshHandle, SnapshotStore};
