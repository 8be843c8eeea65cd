//! Hierarchical content addressing with Merkle integrity checking.
//!
//! User content is organized in four levels: an inventory holds objects,
//! objects hold typed components, and components hold files addressed by
//! the hash of their bytes. Every non-leaf hash is the hash of its
//! children's hashes in sorted order, so mismatches can be localized by
//! descending only into differing branches and the number of hash
//! comparisons stays far below an exhaustive file scan.

mod corpus;
mod master;
mod tree;

pub use corpus::{generate_corpus, mutate_files, CorpusParams};
pub use master::resolve_master;
pub use tree::{
    build_tree, flat_verify, verify, ComponentKind, ContentTree, FileId, Hash256, Hasher,
    ObjectContent, Sha256Hasher, VerifyReport,
};
