//! The four-level content tree and its integrity verifiers.

use std::collections::BTreeSet;

use sha2::{Digest, Sha256};

pub type Hash256 = [u8; 32];
pub type FileId = Hash256;

/// Hash provider behind the tree. Tests and the experiment harness fix
/// SHA-256 so snapshots are bit-exact.
pub trait Hasher {
    fn hash(data: &[u8]) -> Hash256;
}

pub struct Sha256Hasher;

impl Hasher for Sha256Hasher {
    fn hash(data: &[u8]) -> Hash256 {
        let mut h = Sha256::new();
        h.update(data);
        h.finalize().into()
    }
}

/// Component categories from the object description.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub enum ComponentKind {
    Animation,
    Sound,
    Texture,
    Script,
    Other,
}

/// Input content: one object with its components and raw file bytes.
/// Objects and components carry stable keys so two snapshots of the same
/// inventory can be aligned for comparison.
#[derive(Clone, Debug)]
pub struct ObjectContent {
    pub key: u64,
    pub components: Vec<(u64, ComponentKind, Vec<Vec<u8>>)>,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct FileNode {
    pub id: FileId,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ComponentNode {
    pub key: u64,
    pub kind: ComponentKind,
    pub hash: Hash256,
    pub files: Vec<FileNode>,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ObjectNode {
    pub key: u64,
    pub hash: Hash256,
    pub components: Vec<ComponentNode>,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ContentTree {
    /// Hash of the owning user's id.
    pub inventory_id: Hash256,
    /// Merkle root over the object hashes.
    pub inventory_hash: Hash256,
    pub objects: Vec<ObjectNode>,
}

fn hash_children<H: Hasher>(children: &[Hash256]) -> Hash256 {
    let mut sorted: Vec<&Hash256> = children.iter().collect();
    sorted.sort();
    let mut buf = Vec::with_capacity(sorted.len() * 32);
    for c in sorted {
        buf.extend_from_slice(c);
    }
    H::hash(&buf)
}

/// Build the tree bottom-up: file ids are content hashes, parents hash
/// their children's hashes in sorted order. An empty inventory gets the
/// hash of no children.
pub fn build_tree<H: Hasher>(user_id: &[u8], content: &[ObjectContent]) -> ContentTree {
    let mut objects = Vec::with_capacity(content.len());
    for obj in content {
        let mut components = Vec::with_capacity(obj.components.len());
        for (key, kind, files) in &obj.components {
            let file_nodes: Vec<FileNode> = files
                .iter()
                .map(|bytes| FileNode { id: H::hash(bytes) })
                .collect();
            let ids: Vec<Hash256> = file_nodes.iter().map(|f| f.id).collect();
            components.push(ComponentNode {
                key: *key,
                kind: *kind,
                hash: hash_children::<H>(&ids),
                files: file_nodes,
            });
        }
        let compo_hashes: Vec<Hash256> = components.iter().map(|c| c.hash).collect();
        objects.push(ObjectNode {
            key: obj.key,
            hash: hash_children::<H>(&compo_hashes),
            components,
        });
    }
    let object_hashes: Vec<Hash256> = objects.iter().map(|o| o.hash).collect();
    ContentTree {
        inventory_id: H::hash(user_id),
        inventory_hash: hash_children::<H>(&object_hashes),
        objects,
    }
}

impl ContentTree {
    pub fn file_count(&self) -> usize {
        self.objects
            .iter()
            .flat_map(|o| &o.components)
            .map(|c| c.files.len())
            .sum()
    }

    fn all_file_ids(&self) -> BTreeSet<FileId> {
        self.objects
            .iter()
            .flat_map(|o| &o.components)
            .flat_map(|c| &c.files)
            .map(|f| f.id)
            .collect()
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct VerifyReport {
    /// File ids that differ between the two trees (union of both sides
    /// for subtrees present on only one side).
    pub changed: BTreeSet<FileId>,
    /// Hash comparisons performed; the root comparison counts as one.
    pub comparisons: u64,
}

/// Hierarchical integrity check: compare the roots, then descend only into
/// branches whose hashes differ. Objects and components are aligned by key;
/// a subtree present on one side only is reported changed in full (its
/// files join the changed set without hash comparisons).
pub fn verify(local: &ContentTree, remote: &ContentTree) -> VerifyReport {
    let mut report = VerifyReport {
        changed: BTreeSet::new(),
        comparisons: 1,
    };
    if local.inventory_hash == remote.inventory_hash {
        return report;
    }
    let mut li = 0;
    let mut ri = 0;
    while li < local.objects.len() || ri < remote.objects.len() {
        let lo = local.objects.get(li);
        let ro = remote.objects.get(ri);
        match (lo, ro) {
            (Some(l), Some(r)) if l.key == r.key => {
                report.comparisons += 1;
                if l.hash != r.hash {
                    verify_object(l, r, &mut report);
                }
                li += 1;
                ri += 1;
            }
            (Some(l), Some(r)) if l.key < r.key => {
                mark_object(l, &mut report);
                li += 1;
            }
            (Some(_), Some(_)) => {
                mark_object(remote.objects.get(ri).unwrap(), &mut report);
                ri += 1;
            }
            (Some(l), None) => {
                mark_object(l, &mut report);
                li += 1;
            }
            (None, Some(r)) => {
                mark_object(r, &mut report);
                ri += 1;
            }
            (None, None) => unreachable!(),
        }
    }
    report
}

fn verify_object(local: &ObjectNode, remote: &ObjectNode, report: &mut VerifyReport) {
    let mut li = 0;
    let mut ri = 0;
    while li < local.components.len() || ri < remote.components.len() {
        match (local.components.get(li), remote.components.get(ri)) {
            (Some(l), Some(r)) if l.key == r.key => {
                report.comparisons += 1;
                if l.hash != r.hash {
                    verify_component(l, r, report);
                }
                li += 1;
                ri += 1;
            }
            (Some(l), Some(r)) if l.key < r.key => {
                mark_component(l, report);
                li += 1;
            }
            (Some(_), Some(r)) => {
                mark_component(r, report);
                ri += 1;
            }
            (Some(l), None) => {
                mark_component(l, report);
                li += 1;
            }
            (None, Some(r)) => {
                mark_component(r, report);
                ri += 1;
            }
            (None, None) => unreachable!(),
        }
    }
}

fn verify_component(local: &ComponentNode, remote: &ComponentNode, report: &mut VerifyReport) {
    // Files carry no key besides their content hash: align by id sets.
    let l: BTreeSet<FileId> = local.files.iter().map(|f| f.id).collect();
    let r: BTreeSet<FileId> = remote.files.iter().map(|f| f.id).collect();
    // One comparison per file pairing in the larger side.
    report.comparisons += l.len().max(r.len()) as u64;
    for id in l.symmetric_difference(&r) {
        report.changed.insert(*id);
    }
}

fn mark_object(obj: &ObjectNode, report: &mut VerifyReport) {
    for c in &obj.components {
        mark_component(c, report);
    }
}

fn mark_component(c: &ComponentNode, report: &mut VerifyReport) {
    for f in &c.files {
        report.changed.insert(f.id);
    }
}

/// Exhaustive baseline: pairwise file-hash comparison over the whole
/// corpus; the comparison count is the total file count.
pub fn flat_verify(local: &ContentTree, remote: &ContentTree) -> VerifyReport {
    let l = local.all_file_ids();
    let r = remote.all_file_ids();
    let comparisons = l.len().max(r.len()) as u64;
    let changed: BTreeSet<FileId> = l.symmetric_difference(&r).copied().collect();
    VerifyReport {
        changed,
        comparisons,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_corpus() -> Vec<ObjectContent> {
        // 2 objects × 2 components × 2 files.
        (0..2u64)
            .map(|o| ObjectContent {
                key: o,
                components: (0..2u64)
                    .map(|c| {
                        (
                            c,
                            ComponentKind::Texture,
                            (0..2u64)
                                .map(|f| format!("file-{o}-{c}-{f}").into_bytes())
                                .collect(),
                        )
                    })
                    .collect(),
            })
            .collect()
    }

    #[test]
    fn identical_content_identical_roots() {
        let a = build_tree::<Sha256Hasher>(b"user", &small_corpus());
        let b = build_tree::<Sha256Hasher>(b"user", &small_corpus());
        assert_eq!(a.inventory_hash, b.inventory_hash);
    }

    #[test]
    fn byte_flip_changes_root() {
        let a = build_tree::<Sha256Hasher>(b"user", &small_corpus());
        let mut corpus = small_corpus();
        corpus[0].components[0].2[0][0] ^= 1;
        let b = build_tree::<Sha256Hasher>(b"user", &corpus);
        assert_ne!(a.inventory_hash, b.inventory_hash);
    }

    #[test]
    fn identical_trees_compare_once() {
        let a = build_tree::<Sha256Hasher>(b"user", &small_corpus());
        let b = build_tree::<Sha256Hasher>(b"user", &small_corpus());
        let rep = verify(&a, &b);
        assert!(rep.changed.is_empty());
        assert_eq!(rep.comparisons, 1);
    }

    #[test]
    fn one_change_in_2x2x2_costs_seven_comparisons() {
        // 1 root + 2 objects + 2 components + 2 files.
        let a = build_tree::<Sha256Hasher>(b"user", &small_corpus());
        let mut corpus = small_corpus();
        corpus[1].components[0].2[1][0] ^= 0xff;
        let b = build_tree::<Sha256Hasher>(b"user", &corpus);
        let rep = verify(&a, &b);
        assert_eq!(rep.comparisons, 7);
        assert_eq!(rep.changed.len(), 2); // old id gone, new id appeared
    }

    #[test]
    fn flat_verify_counts_every_file() {
        let a = build_tree::<Sha256Hasher>(b"user", &small_corpus());
        let b = build_tree::<Sha256Hasher>(b"user", &small_corpus());
        let rep = flat_verify(&a, &b);
        assert_eq!(rep.comparisons, 8);
        assert!(rep.changed.is_empty());
    }

    #[test]
    fn missing_object_reported_in_full() {
        let full = small_corpus();
        let a = build_tree::<Sha256Hasher>(b"user", &full);
        let b = build_tree::<Sha256Hasher>(b"user", &full[..1]);
        let rep = verify(&a, &b);
        // Object 1 exists only locally: its 4 files are all changed.
        assert_eq!(rep.changed.len(), 4);
        let flat = flat_verify(&a, &b);
        assert_eq!(rep.changed, flat.changed);
    }

    #[test]
    fn empty_inventory_has_a_defined_root() {
        let a = build_tree::<Sha256Hasher>(b"user", &[]);
        let b = build_tree::<Sha256Hasher>(b"user", &[]);
        assert_eq!(a.inventory_hash, b.inventory_hash);
        assert_eq!(verify(&a, &b).comparisons, 1);
    }
}
